//! Adam training loop with per-epoch held-out validation.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use spt_tensor::{Tape, Tensor, TensorError};

use crate::config::{PromptMode, RunConfig, TrainConfig};
use crate::error::{Result, SptError};
use crate::mask::Image;
use crate::metrics::{self, EvalInstance};
use crate::model::SptModel;
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::sdt::compute_loss;
use crate::synth::SyntheticSample;

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    moments: Vec<(ParamId, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        let moments = params
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let n = params.value(id).numel();
                (id, vec![0.0; n], vec![0.0; n])
            })
            .collect();
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments,
        }
    }

    /// One update. `grads` is aligned with the parameters seen at
    /// construction.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.moments.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((id, m, v), g) in self.moments.iter_mut().zip(grads) {
            let theta = params.value_mut(*id);
            for (((t, m), v), &g) in theta.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let g = g + self.weight_decay * *t;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *t -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.iter().map(|(id, _, _)| *id)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-image loss over the epoch.
    pub loss: f64,
    /// Absent when self-drafting is off.
    pub draft_miou: Option<f64>,
    pub refine_miou: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// The prompt and target used for one training image in one epoch.
pub fn training_instance(sample_index: usize, sample: &SyntheticSample, cfg: &RunConfig, epoch: usize) -> Option<EvalInstance> {
    let mut r = rng::stream(cfg.train.seed, "train_prompt", ((epoch as u64) << 32) | sample_index as u64);
    let mode = cfg.train.prompt_mode.fixed().unwrap_or_else(|| PromptMode::ALL[r.gen_range(0..PromptMode::ALL.len())]);
    let point_seed = rng::derive_seed(cfg.train.seed, "train_points", epoch as u64);
    let mut instances = metrics::instances_for(sample_index, sample, mode, cfg.data.min_area, point_seed);
    if instances.is_empty() {
        return None;
    }
    let pick = r.gen_range(0..instances.len());
    Some(instances.swap_remove(pick))
}

/// Held-out instances and the scoring settings used for validation.
pub struct Validation<'a> {
    pub samples: &'a [SyntheticSample],
    pub instances: Vec<EvalInstance>,
    pub band: usize,
}

impl<'a> Validation<'a> {
    pub fn new(samples: &'a [SyntheticSample], cfg: &RunConfig) -> Self {
        let size = cfg.model.image_size;
        Validation {
            samples,
            instances: metrics::build_instances(samples, &cfg.eval.modes, cfg.data.min_area, cfg.eval.point_seed),
            band: cfg.eval.biou_band.unwrap_or_else(|| metrics::default_band(size, size)),
        }
    }

    pub fn run(&self, model: &SptModel) -> Result<metrics::EvalReport> {
        metrics::evaluate(model, self.samples, &self.instances, self.band, 1)
    }
}

/// Mean loss and trainable-parameter gradients of one batch. Gradients are
/// empty when the loss is not finite.
fn batch_step(model: &SptModel, batch: &[(&Image, EvalInstance)]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let images: Vec<&Image> = batch.iter().map(|(img, _)| *img).collect();
    let e = model.encode_images(&mut tape, &p, &images)?;
    let mut losses = Vec::with_capacity(batch.len());
    for (i, (_, inst)) in batch.iter().enumerate() {
        let e_i = model.image_tokens(&mut tape, e, i)?;
        let out = model.forward(&mut tape, &p, e_i, &inst.prompts)?;
        let target = Arc::new(inst.target.to_tensor());
        let l = compute_loss(&mut tape, out.draft.map(|d| d.logits), out.refine.logits, &target)?;
        losses.push(tape.reshape(l, &[1])?);
    }
    let all = tape.concat(&losses, 0)?;
    let loss = tape.mean(all)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = model.params.trainable_ids().into_iter().map(|id| tape.grad(p[id])).collect();
    Ok((value, grads))
}

/// A forward pass produced inf/NaN from finite inputs.
fn overflowed(e: &SptError) -> bool {
    matches!(e, SptError::Tensor(TensorError::NonFinite(_)))
}

/// Trains the attached parameters, validating after every epoch. Each
/// record is handed to `on_epoch` as soon as it exists.
///
/// On a non-finite activation, loss or gradient the parameters are restored to the
/// end of the last completed epoch and [`SptError::Diverged`] is returned.
pub fn train(
    model: &mut SptModel,
    train_set: &[SyntheticSample],
    eval_set: &[SyntheticSample],
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() && cfg.train.epochs > 0 {
        return Err(SptError::Config("training split is empty".into()));
    }
    let validation = Validation::new(eval_set, cfg);
    let mut adam = Adam::new(&cfg.train, &model.params);
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let start = Instant::now();
        let lr = cfg.train.lr_at(epoch);
        let good = model.params.snapshot();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(cfg.train.seed, "shuffle", epoch as u64));
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch: Vec<(&Image, EvalInstance)> = chunk
                .iter()
                .filter_map(|&i| training_instance(i, &train_set[i], cfg, epoch).map(|inst| (&train_set[i].image, inst)))
                .collect();
            if batch.is_empty() {
                continue;
            }
            let (loss, grads) = match batch_step(model, &batch) {
                Err(e) if overflowed(&e) => (f64::NAN, Vec::new()),
                r => r?,
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                model.params.restore(&good);
                return Err(SptError::Diverged {
                    epoch: epoch + 1,
                    step: step + 1,
                });
            }
            if !grads.is_empty() {
                adam.update(&mut model.params, &grads, lr);
            }
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let report = match validation.run(model) {
            Err(e) if overflowed(&e) => {
                model.params.restore(&good);
                return Err(SptError::Diverged {
                    epoch: epoch + 1,
                    step: train_set.len().div_ceil(cfg.train.batch_size),
                });
            }
            r => r?,
        };
        let avg = report.avg.unwrap_or(metrics::Scores {
            miou: 0.0,
            mbiou: 0.0,
            draft_miou: None,
        });
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: if count > 0 { loss_sum / count as f64 } else { 0.0 },
            draft_miou: avg.draft_miou,
            refine_miou: avg.miou,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}
