//! Seeded procedural images. The defect domain has value-noise backgrounds
//! with blob, scratch and stain defects; the object domain has smooth
//! backgrounds with large filled shapes and serves as the source domain for
//! base-model pretraining.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::mask::{Image, Mask};
use crate::preprocess::{connected_components, filter_small_regions};
use crate::rng;

const MAX_ATTEMPTS: u32 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Blob,
    Scratch,
    Stain,
    /// Object-domain shapes.
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[default]
    Defects,
    Objects,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectDescriptor {
    pub kind: DefectKind,
    pub center: (f64, f64),
    /// Characteristic size in pixels (radius or stroke length).
    pub extent: f64,
    /// Intensity added to the covered pixels before clamping.
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub size: usize,
    pub min_defects: usize,
    pub max_defects: usize,
    /// A sample is redrawn until at least one region reaches this area,
    /// unless `allow_empty` is set.
    pub min_area: usize,
    pub allow_empty: bool,
    pub domain: Domain,
}

impl GeneratorSpec {
    pub fn training(size: usize, min_area: usize) -> Self {
        GeneratorSpec {
            size,
            min_defects: 1,
            max_defects: 3,
            min_area,
            allow_empty: false,
            domain: Domain::Defects,
        }
    }

    /// One to three objects per image.
    pub fn objects(size: usize, min_area: usize) -> Self {
        GeneratorSpec {
            domain: Domain::Objects,
            ..GeneratorSpec::training(size, min_area)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub split: Split,
    pub index: usize,
    pub attempts: u32,
    pub defects: Vec<DefectDescriptor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub gt_mask: Mask,
    pub meta: SampleMeta,
}

pub fn sample_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    rng::derive_seed(dataset_seed, split.name(), index as u64)
}

pub fn generate_dataset(dataset_seed: u64, split: Split, n: usize, spec: &GeneratorSpec) -> Result<Vec<SyntheticSample>> {
    (0..n)
        .map(|i| generate_sample(sample_seed(dataset_seed, split, i), split, i, spec))
        .collect()
}

/// Fully determined by `seed` and `spec`; `split` and `index` are recorded
/// in the metadata only.
pub fn generate_sample(seed: u64, split: Split, index: usize, spec: &GeneratorSpec) -> Result<SyntheticSample> {
    if spec.size < 16 {
        return Err(SptError::Config(format!("image size {} is too small to place defects", spec.size)));
    }
    if spec.min_defects > spec.max_defects {
        return Err(SptError::Config("min_defects exceeds max_defects".into()));
    }
    if spec.min_defects == 0 && split == Split::Train {
        return Err(SptError::Config("defect-free samples are only allowed in the eval split".into()));
    }
    let mut rng = rng::stream(seed, "sample", 0);
    for attempt in 1..=MAX_ATTEMPTS {
        let (image, mask, defects) = match spec.domain {
            Domain::Defects => draw(&mut rng, spec),
            Domain::Objects => draw_objects(&mut rng, spec),
        };
        let ok = spec.allow_empty || !filter_small_regions(connected_components(&mask), spec.min_area).is_empty();
        if ok {
            return Ok(SyntheticSample {
                image,
                gt_mask: mask,
                meta: SampleMeta {
                    seed,
                    split,
                    index,
                    attempts: attempt,
                    defects,
                },
            });
        }
    }
    Err(SptError::NoDefect)
}

fn draw(rng: &mut ChaCha8Rng, spec: &GeneratorSpec) -> (Image, Mask, Vec<DefectDescriptor>) {
    let s = spec.size;
    let mut pixels = background(rng, s);
    let mut mask = Mask::new(s, s);
    let count = rng.gen_range(spec.min_defects..=spec.max_defects);
    let mut defects = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match rng.gen_range(0..3) {
            0 => DefectKind::Blob,
            1 => DefectKind::Scratch,
            _ => DefectKind::Stain,
        };
        let margin = 6.0;
        let center = (rng.gen_range(margin..s as f64 - margin), rng.gen_range(margin..s as f64 - margin));
        let magnitude = rng.gen_range(0.2..0.4);
        let offset = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
        let (shape, extent) = match kind {
            DefectKind::Blob => blob(rng, s, center),
            DefectKind::Scratch => scratch(rng, s, center),
            _ => stain(rng, s, center),
        };
        for (i, &hit) in shape.bits().iter().enumerate() {
            if hit {
                pixels[i] += offset;
            }
        }
        mask = mask.union(&shape);
        defects.push(DefectDescriptor {
            kind,
            center,
            extent,
            offset,
        });
    }
    let bytes: Vec<u8> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let image = Image::from_u8(s, s, &bytes).expect("square image");
    (image, mask, defects)
}

fn draw_objects(rng: &mut ChaCha8Rng, spec: &GeneratorSpec) -> (Image, Mask, Vec<DefectDescriptor>) {
    let s = spec.size;
    let sf = s as f64;
    let base = rng.gen_range(0.3..0.7);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let slope = rng.gen_range(0.0..0.2) / sf;
    let noise = value_noise(rng, s, 16);
    let mut pixels: Vec<f64> = (0..s * s)
        .map(|i| {
            let (x, y) = ((i % s) as f64 - sf / 2.0, (i / s) as f64 - sf / 2.0);
            base + slope * (x * theta.cos() + y * theta.sin()) + 0.06 * (noise[i] - 0.5)
        })
        .collect();
    let mut mask = Mask::new(s, s);
    let count = rng.gen_range(spec.min_defects..=spec.max_defects);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match rng.gen_range(0..3) {
            0 => DefectKind::Ellipse,
            1 => DefectKind::Rectangle,
            _ => DefectKind::Triangle,
        };
        let margin = 8.0;
        let center = (rng.gen_range(margin..sf - margin), rng.gen_range(margin..sf - margin));
        let extent = rng.gen_range(5.0..14.0);
        let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let aspect = rng.gen_range(0.5..1.0);
        let (cos, sin) = (rot.cos(), rot.sin());
        let shape = Mask::from_fn(s, s, |x, y| {
            let (dx, dy) = (x as f64 - center.0, y as f64 - center.1);
            let u = (dx * cos + dy * sin) / extent;
            let v = (-dx * sin + dy * cos) / (extent * aspect);
            match kind {
                DefectKind::Ellipse => u * u + v * v <= 1.0,
                DefectKind::Rectangle => u.abs() <= 0.8 && v.abs() <= 0.8,
                _ => v >= -0.5 && v <= 1.0 - 2.0 * u.abs(),
            }
        });
        // Objects are painted at their own level, occluding earlier ones.
        let magnitude = rng.gen_range(0.25..0.45);
        let level = if base > 0.5 { base - magnitude } else { base + magnitude };
        for (i, &hit) in shape.bits().iter().enumerate() {
            if hit {
                pixels[i] = level + 0.03 * (noise[i] - 0.5);
            }
        }
        mask = mask.union(&shape);
        objects.push(DefectDescriptor {
            kind,
            center,
            extent,
            offset: level - base,
        });
    }
    let bytes: Vec<u8> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let image = Image::from_u8(s, s, &bytes).expect("square image");
    (image, mask, objects)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
            let at = |i: usize, j: usize| lattice[j * n + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn background(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    let octaves = rng.gen_range(2..=3);
    let base = rng.gen_range(0.35..0.65);
    let amp = rng.gen_range(0.1..0.2);
    let mut acc = vec![0.0; s * s];
    let mut weight = 0.0;
    for o in 0..octaves {
        let w = 0.5f64.powi(o);
        let noise = value_noise(rng, s, 16 >> o);
        for (a, n) in acc.iter_mut().zip(noise) {
            *a += w * n;
        }
        weight += w;
    }
    let grating = rng.gen_bool(0.5).then(|| {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let period = rng.gen_range(6.0..16.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        (theta, period, phase)
    });
    (0..s * s)
        .map(|i| {
            let (x, y) = ((i % s) as f64, (i / s) as f64);
            let mut v = base + amp * 2.0 * (acc[i] / weight - 0.5);
            if let Some((theta, period, phase)) = grating {
                let t = x * theta.cos() + y * theta.sin();
                v += 0.05 * (std::f64::consts::TAU * t / period + phase).sin();
            }
            v
        })
        .collect()
}

/// Union of one to three rotated ellipses around `center`.
fn blob(rng: &mut ChaCha8Rng, s: usize, center: (f64, f64)) -> (Mask, f64) {
    let parts = rng.gen_range(1..=3);
    let mut ellipses = Vec::with_capacity(parts);
    let mut extent: f64 = 0.0;
    for _ in 0..parts {
        let c = (center.0 + rng.gen_range(-3.0..3.0), center.1 + rng.gen_range(-3.0..3.0));
        let (a, b): (f64, f64) = (rng.gen_range(3.5..9.0), rng.gen_range(3.5..9.0));
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        extent = extent.max(a.max(b));
        ellipses.push((c, a, b, theta.cos(), theta.sin()));
    }
    let m = Mask::from_fn(s, s, |x, y| {
        ellipses.iter().any(|&((cx, cy), a, b, cos, sin)| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            u * u + v * v <= 1.0
        })
    });
    (m, extent)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Random polyline dilated by one or two pixels.
fn scratch(rng: &mut ChaCha8Rng, s: usize, center: (f64, f64)) -> (Mask, f64) {
    let segments = rng.gen_range(2..=3);
    let radius = rng.gen_range(1..=2) as f64;
    let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut points = vec![center];
    let mut length = 0.0;
    for _ in 0..segments {
        let step = rng.gen_range(8.0..16.0);
        angle += rng.gen_range(-0.6..0.6);
        let last = points[points.len() - 1];
        points.push((last.0 + step * angle.cos(), last.1 + step * angle.sin()));
        length += step;
    }
    let m = Mask::from_fn(s, s, |x, y| {
        let p = (x as f64, y as f64);
        points.windows(2).any(|w| segment_distance(p, w[0], w[1]) <= radius)
    });
    (m, length)
}

/// Low-frequency noise thresholded inside a disc.
fn stain(rng: &mut ChaCha8Rng, s: usize, center: (f64, f64)) -> (Mask, f64) {
    let radius = rng.gen_range(7.0..13.0);
    let noise = value_noise(rng, s, 4);
    let m = Mask::from_fn(s, s, |x, y| {
        let d = ((x as f64 - center.0).powi(2) + (y as f64 - center.1).powi(2)).sqrt() / radius;
        d <= 1.0 && noise[y * s + x] * (1.0 - d * d) > 0.2
    });
    (m, radius)
}
