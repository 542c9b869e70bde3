//! LoRA, DoRA and bottleneck adapters: forward rules, merging, attachment to
//! a model and parameter accounting.

use rand::Rng;
use spt_tensor::{Tape, Tensor, Var};

use crate::config::{PeftConfig, PeftKind, PeftTarget};
use crate::error::{Result, SptError};
use crate::model::SptModel;
use crate::nn::{normal_tensor, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng;

/// Standard deviation of the Gaussian used for `A` and `W_down`.
pub const INIT_STD: f64 = 0.02;

/// Low-rank attachment carried by a [`Linear`].
#[derive(Clone, Debug)]
pub enum LinearPeft {
    Lora { a: ParamId, b: ParamId, scaling: f64 },
    Dora { magnitude: ParamId, a: ParamId, b: ParamId },
}

/// Residual bottleneck `o = x + W_up σ(W_down x)` with ReLU.
#[derive(Clone, Debug)]
pub struct AdapterModule {
    pub down: ParamId,
    pub up: ParamId,
}

impl AdapterModule {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        adapter_forward(tape, x, p[self.down], p[self.up])
    }
}

/// `x W₀ᵀ + scaling · (x Aᵀ) Bᵀ`; `BA` is never formed.
pub fn lora_forward(tape: &mut Tape, x: Var, w0: Var, a: Var, b: Var, scaling: f64) -> Result<Var> {
    let base = tape.matmul_nt(x, w0)?;
    let ax = tape.matmul_nt(x, a)?;
    let bax = tape.matmul_nt(ax, b)?;
    let bax = tape.scale(bax, scaling)?;
    Ok(tape.add(base, bax)?)
}

/// `m ⊙ (W₀ + BA) / ‖W₀ + BA‖_c`, the column norm taken over the output
/// axis so that `m` has one entry per input feature.
pub fn dora_weight(tape: &mut Tape, w0: Var, m: Var, a: Var, b: Var) -> Result<Var> {
    let ba = tape.matmul(b, a)?;
    let v = tape.add(w0, ba)?;
    let sq = tape.mul(v, v)?;
    let colsq = tape.sum_axis(sq, 0)?;
    if let Some(j) = tape.value(colsq).data().iter().position(|&c| c == 0.0) {
        return Err(SptError::DegenerateDirection(j));
    }
    let norm = tape.sqrt(colsq)?;
    let direction = tape.div(v, norm)?;
    Ok(tape.mul(direction, m)?)
}

pub fn adapter_forward(tape: &mut Tape, x: Var, down: Var, up: Var) -> Result<Var> {
    let h = tape.matmul_nt(x, down)?;
    let h = tape.relu(h)?;
    let h = tape.matmul_nt(h, up)?;
    Ok(tape.add(x, h)?)
}

/// Per-column Euclidean norms of a `[d, k]` matrix.
pub fn column_norms(w: &Tensor) -> Vec<f64> {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    (0..k)
        .map(|j| (0..d).map(|i| w.data()[i * k + j].powi(2)).sum::<f64>().sqrt())
        .collect()
}

fn plain_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b.data()[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("positive shape")
}

fn eval_with(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let out = f(&mut tape)?;
    Ok(tape.value(out).clone())
}

/// LoRA state detached from any model: `W₀` is `[d, k]`, `B` `[d, r]`, `A` `[r, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAttachment {
    pub w0: Tensor,
    pub b: Tensor,
    pub a: Tensor,
    pub scaling: f64,
}

impl LoraAttachment {
    pub fn init(w0: Tensor, rank: usize, scaling: f64, rng: &mut impl Rng) -> Self {
        let (d, k) = (w0.shape()[0], w0.shape()[1]);
        LoraAttachment {
            b: Tensor::zeros(&[d, rank]),
            a: normal_tensor(rng, &[rank, k], INIT_STD),
            w0,
            scaling,
        }
    }

    /// Applies the layer to rows of `x` (`[.., k]`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        eval_with(|t| {
            let (x, w0, a, b) = (t.constant(x.clone()), t.constant(self.w0.clone()), t.constant(self.a.clone()), t.constant(self.b.clone()));
            lora_forward(t, x, w0, a, b, self.scaling)
        })
    }

    pub fn merge(&self) -> Tensor {
        let ba = plain_matmul(&self.b, &self.a);
        let data = self
            .w0
            .data()
            .iter()
            .zip(ba.data())
            .map(|(w, d)| w + self.scaling * d)
            .collect();
        Tensor::new(self.w0.shape().to_vec(), data).expect("same shape")
    }
}

/// DoRA state detached from any model; `m` has length `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DoraAttachment {
    pub w0: Tensor,
    pub m: Tensor,
    pub b: Tensor,
    pub a: Tensor,
}

impl DoraAttachment {
    pub fn init(w0: Tensor, rank: usize, rng: &mut impl Rng) -> Self {
        let (d, k) = (w0.shape()[0], w0.shape()[1]);
        DoraAttachment {
            m: Tensor::from_vec(column_norms(&w0)),
            b: Tensor::zeros(&[d, rank]),
            a: normal_tensor(rng, &[rank, k], INIT_STD),
            w0,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        eval_with(|t| {
            let (x, w0, m, a, b) = (
                t.constant(x.clone()),
                t.constant(self.w0.clone()),
                t.constant(self.m.clone()),
                t.constant(self.a.clone()),
                t.constant(self.b.clone()),
            );
            let w = dora_weight(t, w0, m, a, b)?;
            Ok(t.matmul_nt(x, w)?)
        })
    }

    /// Explicit `m ⊙ V'/‖V'‖_c` with `V' = W₀ + BA`.
    pub fn merge(&self) -> Result<Tensor> {
        let ba = plain_matmul(&self.b, &self.a);
        let v: Vec<f64> = self.w0.data().iter().zip(ba.data()).map(|(w, d)| w + d).collect();
        let v = Tensor::new(self.w0.shape().to_vec(), v)?;
        let norms = column_norms(&v);
        if let Some(j) = norms.iter().position(|&n| n == 0.0) {
            return Err(SptError::DegenerateDirection(j));
        }
        let k = norms.len();
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| self.m.data()[i % k] * x / norms[i % k])
            .collect();
        Ok(Tensor::new(v.shape().to_vec(), data)?)
    }
}

/// Bottleneck adapter detached from any model: `W_down` `[r, d]`, `W_up` `[d, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterAttachment {
    pub w_down: Tensor,
    pub w_up: Tensor,
}

impl AdapterAttachment {
    pub fn init(dim: usize, rank: usize, rng: &mut impl Rng) -> Self {
        AdapterAttachment {
            w_down: normal_tensor(rng, &[rank, dim], INIT_STD),
            w_up: Tensor::zeros(&[dim, rank]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        eval_with(|t| {
            let (x, down, up) = (t.constant(x.clone()), t.constant(self.w_down.clone()), t.constant(self.w_up.clone()));
            adapter_forward(t, x, down, up)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attachment {
    Lora(LoraAttachment),
    Dora(DoraAttachment),
    Adapter(AdapterAttachment),
}

impl Attachment {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Attachment::Lora(l) => l.forward(x),
            Attachment::Dora(d) => d.forward(x),
            Attachment::Adapter(a) => a.forward(x),
        }
    }

    /// Folds the attachment into one weight matrix. Adapters are nonlinear
    /// and cannot be merged.
    pub fn merge(&self) -> Result<Tensor> {
        match self {
            Attachment::Lora(l) => Ok(l.merge()),
            Attachment::Dora(d) => d.merge(),
            Attachment::Adapter(_) => Err(SptError::UnsupportedMerge),
        }
    }
}

/// Reads the attachment of a model linear back as a detached value.
pub fn attachment_of(params: &ParamStore, linear: &Linear) -> Option<Attachment> {
    let w0 = params.value(linear.weight).clone();
    match linear.peft.as_ref()? {
        LinearPeft::Lora { a, b, scaling } => Some(Attachment::Lora(LoraAttachment {
            w0,
            a: params.value(*a).clone(),
            b: params.value(*b).clone(),
            scaling: *scaling,
        })),
        LinearPeft::Dora { magnitude, a, b } => Some(Attachment::Dora(DoraAttachment {
            w0,
            m: params.value(*magnitude).clone(),
            a: params.value(*a).clone(),
            b: params.value(*b).clone(),
        })),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCounts {
    pub fn ratio(&self) -> f64 {
        trainable_ratio(self.total as f64, self.trainable as f64)
    }
}

/// `100 · trainable / total`, in percent; 0 for an empty model.
pub fn trainable_ratio(total: f64, trainable: f64) -> f64 {
    if total == 0.0 {
        0.0
    } else {
        100.0 * trainable / total
    }
}

pub fn count_parameters(model: &SptModel) -> ParamCounts {
    ParamCounts {
        total: model.params.total_count(),
        trainable: model.params.trainable_count(),
    }
}

/// Attaches PEFT modules to every targeted part of `model`. Base weights
/// stay frozen; the new parameters are trainable. Targets that are already
/// attached are skipped. Targets absent from the model (the draft decoder
/// when self-drafting is off) are ignored.
pub fn attach(model: &mut SptModel, cfg: &PeftConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(kind) = model.peft_kind {
        if kind != cfg.kind && !cfg.targets.is_empty() {
            return Err(SptError::Config(format!(
                "model already carries {kind:?} attachments; cannot add {:?}",
                cfg.kind
            )));
        }
    }
    let seed = model.config.seed;
    for &target in &cfg.targets {
        let key = model.attachment_key(target);
        let Some(key) = key else { continue };
        if model.attached.contains(&key) {
            continue;
        }
        let (params, sites) = model.peft_sites(target, &cfg.target_layer_kinds);
        if cfg.kind != PeftKind::Adapter {
            for linear in sites.linears {
                attach_low_rank(params, linear, cfg, seed)?;
            }
        }
        if cfg.kind == PeftKind::Adapter {
            for (name, dim, slot) in sites.adapters {
                if cfg.rank >= dim {
                    return Err(SptError::Config(format!(
                        "peft.rank {} must be below the width {dim} of {name}",
                        cfg.rank
                    )));
                }
                let mut rng = rng::stream(seed, &format!("peft:{name}"), 0);
                let init = AdapterAttachment::init(dim, cfg.rank, &mut rng);
                *slot = Some(AdapterModule {
                    down: params.add(format!("{name}.adapter_down"), init.w_down, true),
                    up: params.add(format!("{name}.adapter_up"), init.w_up, true),
                });
            }
        }
        model.attached.insert(key);
    }
    if !cfg.targets.is_empty() {
        model.peft_kind = Some(cfg.kind);
    }
    Ok(())
}

fn attach_low_rank(params: &mut ParamStore, linear: &mut Linear, cfg: &PeftConfig, seed: u64) -> Result<()> {
    let (d, k) = (linear.out_dim, linear.in_dim);
    if cfg.rank >= d.min(k) {
        return Err(SptError::Config(format!(
            "peft.rank {} must be below min(d, k) = {} of {}",
            cfg.rank,
            d.min(k),
            linear.name
        )));
    }
    let mut rng = rng::stream(seed, &format!("peft:{}", linear.name), 0);
    let w0 = params.value(linear.weight).clone();
    linear.peft = Some(match cfg.kind {
        PeftKind::Dora => {
            let init = DoraAttachment::init(w0, cfg.rank, &mut rng);
            LinearPeft::Dora {
                magnitude: params.add(format!("{}.dora_m", linear.name), init.m, true),
                a: params.add(format!("{}.dora_a", linear.name), init.a, true),
                b: params.add(format!("{}.dora_b", linear.name), init.b, true),
            }
        }
        _ => {
            let init = LoraAttachment::init(w0, cfg.rank, cfg.scaling, &mut rng);
            LinearPeft::Lora {
                a: params.add(format!("{}.lora_a", linear.name), init.a, true),
                b: params.add(format!("{}.lora_b", linear.name), init.b, true),
                scaling: cfg.scaling,
            }
        }
    });
    Ok(())
}

/// Attachment points gathered from one target.
pub struct PeftSites<'a> {
    pub linears: Vec<&'a mut Linear>,
    /// `(name, width, slot)` for each place a bottleneck adapter may go.
    pub adapters: Vec<(String, usize, &'a mut Option<AdapterModule>)>,
}

pub fn parse_target(name: &str) -> Result<PeftTarget> {
    PeftTarget::ALL
        .into_iter()
        .find(|t| t.prefix() == name)
        .ok_or_else(|| SptError::Config(format!("unknown PEFT target {name:?}")))
}
