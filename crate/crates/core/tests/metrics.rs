mod common;

use common::{pixel_set, set_boundary, set_iou, PixelSet};

use proptest::prelude::*;
use spt_core::config::{DataConfig, PromptMode};
use spt_core::dataset::Dataset;
use spt_core::metrics::{
    boundary_iou, build_instances, evaluate, iou, EmptyPredictor, EvalReport, InstanceRecord, OraclePredictor,
};
use spt_core::Mask;

fn mask_of_bits(bits: u32, w: usize, h: usize) -> Mask {
    Mask::from_fn(w, h, |x, y| bits >> (y * w + x) & 1 == 1)
}

#[test]
fn exhaustive_three_by_three_pairs_match_set_oracle() {
    let masks: Vec<Mask> = (0..512).map(|b| mask_of_bits(b, 3, 3)).collect();
    let sets: Vec<PixelSet> = masks.iter().map(pixel_set).collect();
    let bounds: Vec<PixelSet> = sets.iter().map(|s| set_boundary(s, 3, 3, 1)).collect();
    for (a, (sa, ba)) in masks.iter().zip(sets.iter().zip(&bounds)) {
        for (b, (sb, bb)) in masks.iter().zip(sets.iter().zip(&bounds)) {
            assert_eq!(iou(a, b).unwrap(), set_iou(sa, sb));
            assert_eq!(boundary_iou(a, b, 1).unwrap(), set_iou(ba, bb));
        }
    }
}

#[test]
fn metric_edge_cases() {
    let empty = Mask::new(4, 4);
    let full = Mask::from_fn(4, 4, |_, _| true);
    assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
    assert_eq!(iou(&empty, &full).unwrap(), 0.0);
    assert_eq!(boundary_iou(&empty, &empty, 1).unwrap(), 1.0);
    assert!(boundary_iou(&full, &full, 0).is_err());
    assert!(iou(&Mask::new(4, 4), &Mask::new(4, 5)).is_err());
}

fn masks(w: usize, h: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), w * h).prop_map(move |bits| Mask::from_bits(w, h, bits).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..=12, 1usize..=12).prop_flat_map(|(w, h)| (masks(w, h), masks(w, h)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in mask_pair(), band in 1usize..4) {
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        let bi = boundary_iou(&a, &b, band).unwrap();
        prop_assert!((0.0..=1.0).contains(&bi));
        prop_assert_eq!(boundary_iou(&a, &a, band).unwrap(), 1.0);
    }

    #[test]
    fn boundary_matches_set_oracle((a, b) in mask_pair(), band in 1usize..4) {
        let (w, h) = (a.width() as i64, a.height() as i64);
        let want = set_iou(&set_boundary(&pixel_set(&a), w, h, band as i64), &set_boundary(&pixel_set(&b), w, h, band as i64));
        prop_assert_eq!(boundary_iou(&a, &b, band).unwrap(), want);
    }

    #[test]
    fn wide_band_reduces_to_iou((a, b) in mask_pair()) {
        let diag = ((a.width().pow(2) + a.height().pow(2)) as f64).sqrt().ceil() as usize;
        prop_assert_eq!(boundary_iou(&a, &b, diag).unwrap(), iou(&a, &b).unwrap());
    }
}

fn eval_data() -> Dataset {
    Dataset::generate(&DataConfig {
        n_train: 1,
        n_eval: 12,
        ..DataConfig::default()
    })
    .unwrap()
}

#[test]
fn oracle_scores_one_and_empty_scores_zero() {
    let data = eval_data();
    let instances = build_instances(&data.eval, &PromptMode::ALL, 8, 0);
    assert!(!instances.is_empty());
    let perfect = evaluate(&OraclePredictor, &data.eval, &instances, 1, 1).unwrap();
    let avg = perfect.avg.unwrap();
    assert_eq!((avg.miou, avg.mbiou), (1.0, 1.0));
    let empty = evaluate(&EmptyPredictor, &data.eval, &instances, 1, 1).unwrap();
    assert_eq!(empty.avg.unwrap().miou, 0.0);
}

#[test]
fn worker_count_does_not_change_the_report() {
    let data = eval_data();
    let instances = build_instances(&data.eval, &PromptMode::ALL, 8, 3);
    let model = spt_core::SptModel::new(&spt_core::RunConfig::default()).unwrap();
    let one = evaluate(&model, &data.eval, &instances, 1, 1).unwrap();
    let three = evaluate(&model, &data.eval, &instances, 1, 3).unwrap();
    assert_eq!(one.to_json(), three.to_json());
}

#[test]
fn report_averages_recompute_from_records() {
    let data = eval_data();
    let instances = build_instances(&data.eval, &PromptMode::ALL, 8, 0);
    let model = spt_core::SptModel::new(&spt_core::RunConfig::default()).unwrap();
    let report = evaluate(&model, &data.eval, &instances, 1, 1).unwrap();
    let per_mode = |m: PromptMode| {
        let rs: Vec<&InstanceRecord> = report.records.iter().filter(|r| r.mode == m).collect();
        rs.iter().map(|r| r.iou).sum::<f64>() / rs.len() as f64
    };
    for m in PromptMode::ALL {
        assert_eq!(report.modes[&m].scores.miou, per_mode(m));
    }
    let avg = PromptMode::ALL.iter().map(|&m| per_mode(m)).sum::<f64>() / 4.0;
    assert!((report.avg.as_ref().unwrap().miou - avg).abs() < 1e-15);
    let rebuilt = EvalReport::from_records(report.records.clone(), report.band);
    assert_eq!(rebuilt.to_json(), report.to_json());
}

#[test]
fn one_box_targets_cover_every_region() {
    let data = eval_data();
    for inst in build_instances(&data.eval, &[PromptMode::OneBox, PromptMode::MultiBoxes], 8, 0) {
        let b = inst.prompts.boxes[0];
        for (x, y) in inst.target.pixels() {
            assert!(b.x0 <= x as f64 && x as f64 <= b.x1 && b.y0 <= y as f64 && y as f64 <= b.y1);
        }
    }
}

#[test]
fn absent_modes_render_as_dashes() {
    let data = eval_data();
    let instances = build_instances(&data.eval, &[PromptMode::Point5], 8, 0);
    let report = evaluate(&OraclePredictor, &data.eval, &instances, 1, 1).unwrap();
    assert!(report.box_level.is_none());
    let table = report.to_table();
    assert!(table.lines().nth(2).unwrap().contains('-'));
}
