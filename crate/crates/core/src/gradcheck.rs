//! Finite-difference check of the full draft/refine loss with respect to a
//! sample of trainable coordinates.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use spt_tensor::{finite_diff_check, GradCheckOptions, GradCheckReport, Probe, Tape, Tensor, Var};

use crate::config::{PeftKind, PromptMode, RunConfig};
use crate::error::Result;
use crate::metrics::instances_for;
use crate::model::SptModel;
use crate::params::ParamId;
use crate::rng;
use crate::sdt::compute_loss;
use crate::synth::{generate_sample, GeneratorSpec, Split};

/// Parameter groups every check samples from.
pub const GROUPS: [&str; 5] = ["image_encoder", "prompt_encoder", "draft_decoder", "refine_decoder", "vra"];

fn group_of(name: &str) -> Option<usize> {
    if name.contains(".vra.") {
        return Some(4);
    }
    GROUPS[..4].iter().position(|g| name.starts_with(g))
}

#[derive(Clone, Debug)]
pub struct ProbeInfo {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct KindReport {
    pub kind: PeftKind,
    pub probes: Vec<ProbeInfo>,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub kinds: Vec<KindReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn probe_count(&self) -> usize {
        self.kinds.iter().map(|k| k.probes.len()).sum()
    }
}

/// Runs the check once per PEFT kind on the model of `cfg` (with that kind
/// substituted), `probes_per_kind` coordinates each, spread evenly over
/// [`GROUPS`]. Trainable values are first perturbed with seeded noise so
/// that zero-initialized factors do not hide gradient paths.
pub fn check_model(cfg: &RunConfig, probes_per_kind: usize, seed: u64, opts: GradCheckOptions) -> Result<ModelGradCheck> {
    let mut kinds = Vec::new();
    for kind in [PeftKind::Lora, PeftKind::Dora, PeftKind::Adapter] {
        let mut c = cfg.clone();
        c.peft.kind = kind;
        kinds.push(check_kind(&c, probes_per_kind, seed, opts)?);
    }
    let max_rel_error = kinds.iter().map(|k| k.max_rel_error).fold(0.0, f64::max);
    Ok(ModelGradCheck {
        kinds,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

fn check_kind(cfg: &RunConfig, n_probes: usize, seed: u64, opts: GradCheckOptions) -> Result<KindReport> {
    let mut model = SptModel::new(cfg)?;
    let mut r = rng::stream(seed, "gradcheck", cfg.peft.kind as u64);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let ids = model.params.trainable_ids();
    for &id in &ids {
        for v in model.params.value_mut(id).data_mut() {
            *v += noise.sample(&mut r);
        }
    }

    // Two prompts on two images: a box and a point set.
    let spec = GeneratorSpec::training(cfg.model.image_size, cfg.data.min_area);
    let mut cases = Vec::new();
    for (i, mode) in [PromptMode::OneBox, PromptMode::Point5].into_iter().enumerate() {
        let sample = generate_sample(rng::derive_seed(seed, "gradcheck_sample", i as u64), Split::Train, i, &spec)?;
        let inst = instances_for(i, &sample, mode, cfg.data.min_area, seed).remove(0);
        cases.push((sample.image, inst.prompts, Arc::new(inst.target.to_tensor())));
    }

    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); GROUPS.len()];
    for (pos, &id) in ids.iter().enumerate() {
        if let Some(g) = group_of(model.params.name(id)) {
            by_group[g].push(pos);
        }
    }
    let present: Vec<usize> = (0..GROUPS.len()).filter(|&g| !by_group[g].is_empty()).collect();
    let mut probes = Vec::with_capacity(n_probes);
    for k in 0..n_probes {
        let members = &by_group[present[k % present.len()]];
        let param = members[r.gen_range(0..members.len())];
        let index = r.gen_range(0..model.params.value(ids[param]).numel());
        probes.push(Probe { param, index });
    }

    let values: Vec<Tensor> = ids.iter().map(|&id| model.params.value(id).clone()).collect();
    let f = |tape: &mut Tape, vars: &[Var]| -> spt_tensor::Result<Var> {
        let run = |tape: &mut Tape| -> Result<Var> {
            let p = model.params.bind_overriding(tape, &ids, vars);
            let images: Vec<_> = cases.iter().map(|(img, _, _)| img).collect();
            let e = model.encode_images(tape, &p, &images)?;
            let mut total = None;
            for (i, (_, prompts, target)) in cases.iter().enumerate() {
                let e_i = model.image_tokens(tape, e, i)?;
                let out = model.forward(tape, &p, e_i, prompts)?;
                let l = compute_loss(tape, out.draft.map(|d| d.logits), out.refine.logits, target)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.expect("two cases"))
        };
        run(tape).map_err(|e| match e {
            crate::error::SptError::Tensor(t) => t,
            other => spt_tensor::TensorError::Contract(other.to_string()),
        })
    };
    let report: GradCheckReport = finite_diff_check(f, &values, &probes, opts)?;
    let probes = report
        .results
        .iter()
        .map(|res| ProbeInfo {
            param: model.params.name(ids[res.probe.param]).to_string(),
            index: res.probe.index,
            analytic: res.analytic,
            numeric: res.numeric,
            rel_error: res.rel_error,
        })
        .collect();
    Ok(KindReport {
        kind: cfg.peft.kind,
        probes,
        max_rel_error: report.max_rel_error,
    })
}

/// Ids of trainable parameters in `group`.
pub fn group_params(model: &SptModel, group: &str) -> Vec<ParamId> {
    let g = GROUPS.iter().position(|x| *x == group);
    model
        .params
        .trainable_ids()
        .into_iter()
        .filter(|&id| g.is_some() && group_of(model.params.name(id)) == g)
        .collect()
}
