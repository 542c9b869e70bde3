mod common;

use std::collections::VecDeque;

use common::{golden_path, golden_samples, preprocessing_golden};
use proptest::prelude::*;
use spt_core::preprocess::{connected_components, derive_multi_boxes, derive_one_box, filter_small_regions, sample_points};
use spt_core::Mask;

/// Set `UPDATE_GOLDEN=1` to rewrite the files after an intended change.
#[test]
fn preprocessing_matches_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let samples = golden_samples();
    assert_eq!(samples.len(), 16);
    for (i, s) in samples.iter().enumerate() {
        let text = preprocessing_golden(i, s);
        let path = golden_path(i);
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(text == want, "{} differs from the current preprocessing output", path.display());
    }
}

/// Breadth-first labeling from every unvisited pixel, in scanline order.
fn flood_fill_areas(m: &Mask) -> Vec<usize> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let mut seen = vec![false; (w * h) as usize];
    let mut areas = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(x as usize, y as usize) || seen[(y * w + x) as usize] {
                continue;
            }
            let mut queue = VecDeque::from([(x, y)]);
            seen[(y * w + x) as usize] = true;
            let mut area = 0;
            while let Some((cx, cy)) = queue.pop_front() {
                area += 1;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (cx + dx, cy + dy);
                        if nx >= 0 && ny >= 0 && nx < w && ny < h && m.get(nx as usize, ny as usize) && !seen[(ny * w + nx) as usize] {
                            seen[(ny * w + nx) as usize] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            areas.push(area);
        }
    }
    areas
}

fn grid(rows: &[&str]) -> Mask {
    Mask::from_fn(rows[0].len(), rows.len(), |x, y| rows[y].as_bytes()[x] == b'#')
}

#[test]
fn hand_drawn_grid_areas() {
    let m = grid(&[
        "##......", //
        "##......",
        "....###.",
        "....###.",
        "....###.",
        "........",
        "#.......",
        "........",
    ]);
    let areas: Vec<usize> = connected_components(&m).iter().map(|r| r.area()).collect();
    assert_eq!(areas, vec![4, 9, 1]);
    assert_eq!(areas, flood_fill_areas(&m));
}

#[test]
fn area_filter_is_strict_less_than() {
    let m = Mask::from_fn(20, 20, |x, y| (y < 5 && x < 10) || ((10..17).contains(&y) && x < 7));
    let regions = connected_components(&m);
    let areas: Vec<usize> = regions.iter().map(|r| r.area()).collect();
    assert_eq!(areas, vec![50, 49]);
    let kept = filter_small_regions(regions.clone(), 50);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].area(), 50);
    assert_eq!(filter_small_regions(regions.clone(), 1), regions);
    assert!(filter_small_regions(Vec::new(), 50).is_empty());
    assert!(derive_one_box(&[]).is_err());
}

fn masks() -> impl Strategy<Value = Mask> {
    (1usize..=16, 1usize..=16, 0.05f64..0.7).prop_flat_map(|(w, h, p)| {
        prop::collection::vec(prop::bool::weighted(p), w * h).prop_map(move |b| Mask::from_bits(w, h, b).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn components_match_flood_fill(m in masks()) {
        let regions = connected_components(&m);
        let areas: Vec<usize> = regions.iter().map(|r| r.area()).collect();
        prop_assert_eq!(areas, flood_fill_areas(&m));
        let union = regions.iter().fold(Mask::new(m.width(), m.height()), |acc, r| acc.union(&r.to_mask(m.width(), m.height())));
        prop_assert_eq!(union, m);
    }

    #[test]
    fn one_box_contains_every_region_box(m in masks(), min_area in 1usize..6) {
        let regions = filter_small_regions(connected_components(&m), min_area);
        prop_assert!(regions.iter().all(|r| r.area() >= min_area));
        if let Ok(outer) = derive_one_box(&regions) {
            for b in derive_multi_boxes(&regions).unwrap() {
                prop_assert!(outer.contains(&b));
            }
        }
    }

    #[test]
    fn points_fall_inside_the_mask(m in masks(), k in prop::sample::select(vec![5usize, 10]), seed in any::<u64>()) {
        match sample_points(&m, k, seed) {
            Ok(points) => {
                prop_assert_eq!(points.len(), k);
                for p in &points {
                    prop_assert!(m.get(p.x as usize, p.y as usize));
                }
                prop_assert_eq!(sample_points(&m, k, seed).unwrap(), points);
            }
            Err(_) => prop_assert!(m.is_empty()),
        }
    }
}
