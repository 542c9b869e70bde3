#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spt_core::{BoxPrompt, Image, Mask, Point, PointLabel, PromptSet, RunConfig, SptModel};
use spt_tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Default architecture at 32 px with one encoder block, for fast model tests.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.image_size = 32;
    cfg.model.encoder_depth = 1;
    cfg.data.size = 32;
    cfg
}

pub fn random_image(rng: &mut impl Rng, size: usize) -> Image {
    Image::new(size, size, (0..size * size).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// A box, a few labelled points, or both.
pub fn random_prompts(rng: &mut impl Rng, size: usize) -> PromptSet {
    let hi = (size - 1) as f64;
    let mut p = PromptSet::default();
    let choice = rng.gen_range(0..3);
    if choice != 1 {
        let (x0, x1) = sorted(rng.gen_range(0.0..hi), rng.gen_range(0.0..hi));
        let (y0, y1) = sorted(rng.gen_range(0.0..hi), rng.gen_range(0.0..hi));
        p.boxes.push(BoxPrompt { x0, y0, x1, y1 });
    }
    if choice != 0 {
        for _ in 0..rng.gen_range(1..=4) {
            p.points.push(Point {
                x: rng.gen_range(0.0..hi),
                y: rng.gen_range(0.0..hi),
                label: if rng.gen_bool(0.7) { PointLabel::Foreground } else { PointLabel::Background },
            });
        }
    }
    p
}

fn sorted(a: f64, b: f64) -> (f64, f64) {
    (a.min(b), a.max(b))
}

/// `(draft logits, refine logits)` for one image.
pub fn logits(model: &SptModel, image: &Image, prompts: &PromptSet) -> (Option<Tensor>, Tensor) {
    let p = model.predict(image, prompts).unwrap();
    (p.draft_logits, p.refine_logits)
}

pub fn linf(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

pub fn is_peft_param(name: &str) -> bool {
    ["lora_", "dora_", "adapter_"].iter().any(|t| name.contains(t))
}

pub type PixelSet = BTreeSet<(i64, i64)>;

pub fn pixel_set(m: &Mask) -> PixelSet {
    m.pixels().map(|(x, y)| (x as i64, y as i64)).collect()
}

pub fn set_iou(a: &PixelSet, b: &PixelSet) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Members with a non-member (or the outside of the image) within
/// Chebyshev distance `band`.
pub fn set_boundary(s: &PixelSet, w: i64, h: i64, band: i64) -> PixelSet {
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && s.contains(&(x, y));
    s.iter()
        .copied()
        .filter(|&(x, y)| (-band..=band).any(|dy| (-band..=band).any(|dx| !inside(x + dx, y + dy))))
        .collect()
}

pub const GOLDEN_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden");
pub const GOLDEN_MIN_AREA: usize = 50;

/// The pinned preprocessing set: twelve training and four held-out
/// samples at 64 px.
pub fn golden_samples() -> Vec<spt_core::synth::SyntheticSample> {
    use spt_core::synth::{generate_dataset, GeneratorSpec, Split};
    let spec = GeneratorSpec::training(64, 8);
    let mut out = generate_dataset(17, Split::Train, 12, &spec).unwrap();
    out.extend(generate_dataset(17, Split::Eval, 4, &spec).unwrap());
    out
}

/// Text rendering of every preprocessing step for one sample: the mask,
/// all 8-connected components, the survivors of the area filter, and the
/// prompts of each evaluation mode.
pub fn preprocessing_golden(index: usize, sample: &spt_core::synth::SyntheticSample) -> String {
    use spt_core::config::PromptMode;
    use spt_core::metrics::instances_for;
    use spt_core::preprocess::{connected_components, filter_small_regions};
    use std::fmt::Write;

    let m = &sample.gt_mask;
    let mut s = String::new();
    let _ = writeln!(s, "sample {index} split {} seed {}", sample.meta.split.name(), sample.meta.seed);
    for y in 0..m.height() {
        let row: String = (0..m.width()).map(|x| if m.get(x, y) { '#' } else { '.' }).collect();
        let _ = writeln!(s, "{row}");
    }
    let all = connected_components(m);
    let _ = writeln!(s, "components {}", all.len());
    for r in &all {
        let b = r.bbox;
        let _ = writeln!(s, "  area {} bbox {} {} {} {}", r.area(), b.x0, b.y0, b.x1, b.y1);
    }
    let kept = filter_small_regions(all, GOLDEN_MIN_AREA);
    let _ = writeln!(s, "kept {} (min_area {GOLDEN_MIN_AREA})", kept.len());
    for mode in PromptMode::ALL {
        for inst in instances_for(index, sample, mode, GOLDEN_MIN_AREA, 0) {
            let region = inst.region.map_or("all".to_string(), |r| r.to_string());
            let _ = write!(s, "{} region {region} target {}:", mode.name(), inst.target.count());
            for b in &inst.prompts.boxes {
                let _ = write!(s, " box {} {} {} {}", b.x0, b.y0, b.x1, b.y1);
            }
            for p in &inst.prompts.points {
                let _ = write!(s, " ({},{})", p.x, p.y);
            }
            let _ = writeln!(s);
        }
    }
    s
}

pub fn golden_path(index: usize) -> std::path::PathBuf {
    std::path::Path::new(GOLDEN_DIR).join(format!("preprocess_{index:02}.txt"))
}
