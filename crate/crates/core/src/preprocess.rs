//! Prompt derivation from ground-truth masks: connected regions, the
//! small-region filter, covering boxes and sampled points.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::mask::Mask;
use crate::prompt::{BoxPrompt, Point};
use crate::rng;

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn to_prompt(self) -> BoxPrompt {
        BoxPrompt {
            x0: self.x0 as f64,
            y0: self.y0 as f64,
            x1: self.x1 as f64,
            y1: self.y1 as f64,
        }
    }
}

/// One 8-connected region. Pixels are `(x, y)` in scanline order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DefectRegion {
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BBox,
}

impl DefectRegion {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn to_mask(&self, width: usize, height: usize) -> Mask {
        let mut m = Mask::new(width, height);
        for &(x, y) in &self.pixels {
            m.set(x, y, true);
        }
        m
    }
}

/// 8-connected labeling. Regions are ordered by their first pixel in
/// scanline order.
pub fn connected_components(mask: &Mask) -> Vec<DefectRegion> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..w * h {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if !seen[j] && mask.bits()[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        pixels.sort_by_key(|&(x, y)| (y, x));
        let bbox = BBox {
            x0: pixels.iter().map(|p| p.0).min().expect("nonempty"),
            y0: pixels[0].1,
            x1: pixels.iter().map(|p| p.0).max().expect("nonempty"),
            y1: pixels[pixels.len() - 1].1,
        };
        regions.push(DefectRegion { pixels, bbox });
    }
    regions
}

/// Drops regions with `area < min_area`.
pub fn filter_small_regions(regions: Vec<DefectRegion>, min_area: usize) -> Vec<DefectRegion> {
    regions.into_iter().filter(|r| r.area() >= min_area).collect()
}

/// The smallest box covering every region.
pub fn derive_one_box(regions: &[DefectRegion]) -> Result<BBox> {
    let first = regions.first().ok_or(SptError::NoDefect)?.bbox;
    Ok(regions.iter().fold(first, |acc, r| BBox {
        x0: acc.x0.min(r.bbox.x0),
        y0: acc.y0.min(r.bbox.y0),
        x1: acc.x1.max(r.bbox.x1),
        y1: acc.y1.max(r.bbox.y1),
    }))
}

/// One box per region, in region order.
pub fn derive_multi_boxes(regions: &[DefectRegion]) -> Result<Vec<BBox>> {
    if regions.is_empty() {
        return Err(SptError::NoDefect);
    }
    Ok(regions.iter().map(|r| r.bbox).collect())
}

/// `k` foreground points drawn uniformly from the set pixels of `mask`;
/// with replacement when the mask has fewer than `k` pixels.
pub fn sample_points(mask: &Mask, k: usize, seed: u64) -> Result<Vec<Point>> {
    let pixels: Vec<(usize, usize)> = mask.pixels().collect();
    if pixels.is_empty() {
        return Err(SptError::NoDefect);
    }
    let mut rng = rng::stream(seed, "points", k as u64);
    let picks: Vec<usize> = if pixels.len() < k {
        (0..k).map(|_| rng.gen_range(0..pixels.len())).collect()
    } else {
        index::sample(&mut rng, pixels.len(), k).into_vec()
    };
    Ok(picks
        .into_iter()
        .map(|i| Point::foreground(pixels[i].0 as f64, pixels[i].1 as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> Mask {
        Mask::from_fn(rows[0].len(), rows.len(), |x, y| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn separated_squares_are_two_regions() {
        let m = mask_from(&["###....", "###....", "###....", ".......", "....###", "....###", "....###"]);
        let r = connected_components(&m);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].bbox, BBox { x0: 0, y0: 0, x1: 2, y1: 2 });
        assert_eq!(r[1].area(), 9);
    }

    #[test]
    fn diagonal_contact_connects() {
        let m = mask_from(&["#..", ".#.", "..#"]);
        assert_eq!(connected_components(&m).len(), 1);
    }

    #[test]
    fn filter_is_strict_less_than() {
        let mut m = Mask::new(64, 64);
        for i in 0..49 {
            m.set(i % 10, i / 10, true);
        }
        for i in 0..50 {
            m.set(20 + i % 10, 20 + i / 10, true);
        }
        let r = filter_small_regions(connected_components(&m), 50);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].area(), 50);
        let all = connected_components(&m);
        assert_eq!(filter_small_regions(all.clone(), 1), all);
        assert!(filter_small_regions(Vec::new(), 50).is_empty());
    }

    #[test]
    fn one_box_covers_all() {
        let m = Mask::from_fn(8, 8, |x, y| (1..=2).contains(&x) && (1..=2).contains(&y) || (6..=7).contains(&x) && (6..=7).contains(&y));
        let r = connected_components(&m);
        assert_eq!(derive_one_box(&r).unwrap(), BBox { x0: 1, y0: 1, x1: 7, y1: 7 });
        assert_eq!(derive_multi_boxes(&r).unwrap().len(), 2);
        assert!(matches!(derive_one_box(&[]), Err(SptError::NoDefect)));
        assert!(matches!(derive_multi_boxes(&[]), Err(SptError::NoDefect)));
    }

    #[test]
    fn tiny_defect_is_sampled_with_replacement() {
        let mut m = Mask::new(8, 8);
        m.set(3, 5, true);
        let pts = sample_points(&m, 5, 9).unwrap();
        assert_eq!(pts.len(), 5);
        assert!(pts.iter().all(|p| p.x == 3.0 && p.y == 5.0));
        assert!(matches!(sample_points(&Mask::new(4, 4), 5, 0), Err(SptError::NoDefect)));
    }

    #[test]
    fn sampling_without_replacement_is_distinct_and_seeded() {
        let m = Mask::from_fn(16, 16, |x, y| x + y < 10);
        let a = sample_points(&m, 10, 3).unwrap();
        assert_eq!(a, sample_points(&m, 10, 3).unwrap());
        let mut keys: Vec<(u64, u64)> = a.iter().map(|p| (p.x as u64, p.y as u64)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 10);
        assert!(a.iter().all(|p| m.get(p.x as usize, p.y as usize)));
    }
}
