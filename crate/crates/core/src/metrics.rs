//! IoU, boundary IoU, and the four-mode evaluation protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::PromptMode;
use crate::error::{Result, SptError};
use crate::mask::{Image, Mask};
use crate::model::SptModel;
use crate::preprocess::{connected_components, derive_one_box, filter_small_regions, sample_points};
use crate::prompt::PromptSet;
use crate::rng;
use crate::synth::SyntheticSample;

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(SptError::DegenerateInput(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, and 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `max(1, round(0.02 · diagonal))`.
pub fn default_band(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

/// Erosion by a `(2·band+1)²` square; pixels outside the image count as
/// background.
pub fn erode(mask: &Mask, band: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let run_min = |get: &dyn Fn(usize) -> bool, len: usize| -> Vec<bool> {
        // A pixel survives when no background lies within `band` of it.
        let mut last_bg: Option<usize> = None;
        let mut next_bg = vec![usize::MAX; len];
        let mut upcoming = usize::MAX;
        for i in (0..len).rev() {
            if !get(i) {
                upcoming = i;
            }
            next_bg[i] = upcoming;
        }
        (0..len)
            .map(|i| {
                if !get(i) {
                    last_bg = Some(i);
                }
                let left_ok = i >= band && last_bg.is_none_or(|j| i - j > band);
                let right_ok = i + band < len && next_bg[i].saturating_sub(i) > band;
                left_ok && right_ok
            })
            .collect()
    };
    let mut rows = vec![false; w * h];
    for y in 0..h {
        let r = run_min(&|x| mask.get(x, y), w);
        rows[y * w..(y + 1) * w].copy_from_slice(&r);
    }
    let mut out = Mask::new(w, h);
    for x in 0..w {
        let c = run_min(&|y| rows[y * w + x], h);
        for (y, v) in c.into_iter().enumerate() {
            out.set(x, y, v);
        }
    }
    out
}

/// Mask pixels within `band` of the contour (or of the image border).
pub fn boundary(mask: &Mask, band: usize) -> Mask {
    let eroded = erode(mask, band);
    Mask::from_fn(mask.width(), mask.height(), |x, y| mask.get(x, y) && !eroded.get(x, y))
}

pub fn boundary_iou(pred: &Mask, gt: &Mask, band: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    if band == 0 {
        return Err(SptError::Config("boundary band must be at least 1".into()));
    }
    iou(&boundary(pred, band), &boundary(gt, band))
}

/// One prompt and its target mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalInstance {
    pub sample: usize,
    pub mode: PromptMode,
    /// Region index for per-region modes.
    pub region: Option<usize>,
    pub prompts: PromptSet,
    pub target: Mask,
}

/// Instances of one sample under one mode. One-box mode yields one instance
/// covering every surviving region; the other modes yield one per region.
/// Samples without surviving regions yield none.
pub fn instances_for(sample_index: usize, sample: &SyntheticSample, mode: PromptMode, min_area: usize, point_seed: u64) -> Vec<EvalInstance> {
    let (w, h) = (sample.gt_mask.width(), sample.gt_mask.height());
    let regions = filter_small_regions(connected_components(&sample.gt_mask), min_area);
    let Ok(outer) = derive_one_box(&regions) else {
        return Vec::new();
    };
    if mode == PromptMode::OneBox {
        let target = regions.iter().fold(Mask::new(w, h), |acc, r| acc.union(&r.to_mask(w, h)));
        return vec![EvalInstance {
            sample: sample_index,
            mode,
            region: None,
            prompts: PromptSet::from_box(outer.to_prompt()),
            target,
        }];
    }
    regions
        .iter()
        .enumerate()
        .map(|(ri, region)| {
            let target = region.to_mask(w, h);
            let prompts = match mode {
                PromptMode::MultiBoxes => PromptSet::from_box(region.bbox.to_prompt()),
                PromptMode::Point5 | PromptMode::Point10 => {
                    let k = if mode == PromptMode::Point5 { 5 } else { 10 };
                    let seed = rng::derive_seed(point_seed, "eval_points", ((sample_index as u64) << 16) | ri as u64);
                    PromptSet::from_points(sample_points(&target, k, seed).expect("region is nonempty"))
                }
                PromptMode::OneBox => unreachable!(),
            };
            EvalInstance {
                sample: sample_index,
                mode,
                region: Some(ri),
                prompts,
                target,
            }
        })
        .collect()
}

pub fn build_instances(samples: &[SyntheticSample], modes: &[PromptMode], min_area: usize, point_seed: u64) -> Vec<EvalInstance> {
    let mut out = Vec::new();
    for &mode in modes {
        for (i, s) in samples.iter().enumerate() {
            out.extend(instances_for(i, s, mode, min_area, point_seed));
        }
    }
    out
}

/// Masks predicted for one instance: the optional draft and the final mask.
#[derive(Clone, Debug)]
pub struct StageMasks {
    pub draft: Option<Mask>,
    pub refine: Mask,
}

/// Anything that segments a batch of instances sharing one image.
pub trait MaskPredictor: Sync {
    fn predict_image(&self, image: &Image, instances: &[&EvalInstance]) -> Result<Vec<StageMasks>>;
}

impl MaskPredictor for SptModel {
    fn predict_image(&self, image: &Image, instances: &[&EvalInstance]) -> Result<Vec<StageMasks>> {
        let e = self.embed_images(&[image])?.remove(0);
        instances
            .iter()
            .map(|inst| {
                let p = self.predict_embedded(&e, &inst.prompts)?;
                Ok(StageMasks {
                    draft: p.draft,
                    refine: p.refine,
                })
            })
            .collect()
    }
}

/// Predicts the ground truth of every instance.
pub struct OraclePredictor;

impl MaskPredictor for OraclePredictor {
    fn predict_image(&self, _: &Image, instances: &[&EvalInstance]) -> Result<Vec<StageMasks>> {
        Ok(instances
            .iter()
            .map(|i| StageMasks {
                draft: Some(i.target.clone()),
                refine: i.target.clone(),
            })
            .collect())
    }
}

/// Predicts nothing anywhere.
pub struct EmptyPredictor;

impl MaskPredictor for EmptyPredictor {
    fn predict_image(&self, _: &Image, instances: &[&EvalInstance]) -> Result<Vec<StageMasks>> {
        Ok(instances
            .iter()
            .map(|i| StageMasks {
                draft: None,
                refine: Mask::new(i.target.width(), i.target.height()),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub sample: usize,
    pub mode: PromptMode,
    pub region: Option<usize>,
    pub iou: f64,
    pub biou: f64,
    pub draft_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub miou: f64,
    pub mbiou: f64,
    /// Mean IoU of the draft masks, when the predictor produced them.
    pub draft_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeScores {
    pub count: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub band: usize,
    /// Keyed by mode name; a mode without instances is absent.
    pub modes: BTreeMap<PromptMode, ModeScores>,
    pub box_level: Option<Scores>,
    pub point_level: Option<Scores>,
    pub avg: Option<Scores>,
    pub records: Vec<InstanceRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn mean_scores<'a>(items: impl Iterator<Item = &'a Scores> + Clone) -> Option<Scores> {
    let drafts: Option<Vec<f64>> = items.clone().map(|s| s.draft_miou).collect();
    Some(Scores {
        miou: mean(items.clone().map(|s| s.miou))?,
        mbiou: mean(items.map(|s| s.mbiou))?,
        draft_miou: drafts.and_then(|d| mean(d.into_iter())),
    })
}

impl EvalReport {
    /// Aggregates per-instance records: unweighted means per mode, then
    /// means over the modes present.
    pub fn from_records(records: Vec<InstanceRecord>, band: usize) -> Self {
        let mut modes = BTreeMap::new();
        for mode in PromptMode::ALL {
            let rs: Vec<&InstanceRecord> = records.iter().filter(|r| r.mode == mode).collect();
            if rs.is_empty() {
                continue;
            }
            let drafts: Option<Vec<f64>> = rs.iter().map(|r| r.draft_iou).collect();
            modes.insert(
                mode,
                ModeScores {
                    count: rs.len(),
                    scores: Scores {
                        miou: mean(rs.iter().map(|r| r.iou)).expect("nonempty"),
                        mbiou: mean(rs.iter().map(|r| r.biou)).expect("nonempty"),
                        draft_miou: drafts.and_then(|d| mean(d.into_iter())),
                    },
                },
            );
        }
        let pick = |ms: &[PromptMode]| mean_scores(ms.iter().filter_map(|m| modes.get(m)).map(|s| &s.scores));
        EvalReport {
            band,
            box_level: pick(&[PromptMode::OneBox, PromptMode::MultiBoxes]),
            point_level: pick(&[PromptMode::Point5, PromptMode::Point10]),
            avg: pick(&PromptMode::ALL),
            modes,
            records,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table: one column pair (mIoU, mBIoU) per mode, then the
    /// box-level, point-level and overall averages. Scores in percent.
    pub fn to_table(&self) -> String {
        let cell = |s: Option<&Scores>| match s {
            Some(s) => format!("{:>7.2} {:>7.2}", 100.0 * s.miou, 100.0 * s.mbiou),
            None => format!("{:>7} {:>7}", "-", "-"),
        };
        let mut cols: Vec<(String, String)> = PromptMode::ALL
            .iter()
            .map(|m| (m.name().to_string(), cell(self.modes.get(m).map(|s| &s.scores))))
            .collect();
        cols.push(("box-level".into(), cell(self.box_level.as_ref())));
        cols.push(("point-level".into(), cell(self.point_level.as_ref())));
        cols.push(("Avg.".into(), cell(self.avg.as_ref())));
        let mut out = String::new();
        let _ = writeln!(out, "{}", cols.iter().map(|(h, _)| format!("{h:^15}")).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(out, "{}", cols.iter().map(|_| format!("{:>7} {:>7}", "mIoU", "mBIoU")).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(out, "{}", cols.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>().join(" | "));
        out
    }
}

/// Scores every instance against its target. Work fans out over `workers`
/// threads by sample; records come back in instance order.
pub fn evaluate<P: MaskPredictor + ?Sized>(
    predictor: &P,
    samples: &[SyntheticSample],
    instances: &[EvalInstance],
    band: usize,
    workers: usize,
) -> Result<EvalReport> {
    if band == 0 {
        return Err(SptError::Config("boundary band must be at least 1".into()));
    }
    let mut by_sample: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        if inst.sample >= samples.len() {
            return Err(SptError::DegenerateInput(format!("instance refers to missing sample {}", inst.sample)));
        }
        by_sample.entry(inst.sample).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_sample.into_iter().collect();
    let score = |(sample, idx): &(usize, Vec<usize>)| -> Result<Vec<(usize, InstanceRecord)>> {
        let insts: Vec<&EvalInstance> = idx.iter().map(|&i| &instances[i]).collect();
        let preds = predictor.predict_image(&samples[*sample].image, &insts)?;
        idx.iter()
            .zip(insts)
            .zip(preds)
            .map(|((&i, inst), pred)| {
                Ok((
                    i,
                    InstanceRecord {
                        sample: inst.sample,
                        mode: inst.mode,
                        region: inst.region,
                        iou: iou(&pred.refine, &inst.target)?,
                        biou: boundary_iou(&pred.refine, &inst.target, band)?,
                        draft_iou: pred.draft.as_ref().map(|d| iou(d, &inst.target)).transpose()?,
                    },
                ))
            })
            .collect()
    };
    let workers = workers.max(1).min(groups.len().max(1));
    let chunk = groups.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<(usize, InstanceRecord)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = groups
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    for g in part {
                        out.extend(score(g)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut records: Vec<Option<InstanceRecord>> = vec![None; instances.len()];
    for part in results {
        for (i, r) in part? {
            records[i] = Some(r);
        }
    }
    Ok(EvalReport::from_records(records.into_iter().map(|r| r.expect("every instance scored")).collect(), band))
}
