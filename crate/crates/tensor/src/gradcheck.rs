//! Central finite-difference oracle for tape gradients.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-3,
        }
    }
}

/// One scalar coordinate: element `index` of parameter `param`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub probe: Probe,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub results: Vec<ProbeResult>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// `f` receives a tape plus one leaf per entry of `params` and returns the
/// scalar output. Every parameter leaf is marked as requiring a gradient.
/// Relative error per coordinate is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor],
    probes: &[Probe],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(TensorError::Contract("finite-difference step must be positive".into()));
    }
    for p in probes {
        let ok = params.get(p.param).is_some_and(|t| p.index < t.numel());
        if !ok {
            return Err(TensorError::Contract(format!("probe {p:?} out of range")));
        }
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();
    drop(tape);

    let mut eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut working = params.to_vec();
    let mut results = Vec::with_capacity(probes.len());
    for &probe in probes {
        let orig = working[probe.param].data()[probe.index];
        working[probe.param].data_mut()[probe.index] = orig + opts.step;
        let plus = eval(&working)?;
        working[probe.param].data_mut()[probe.index] = orig - opts.step;
        let minus = eval(&working)?;
        working[probe.param].data_mut()[probe.index] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::Probe(format!(
                "non-finite output around {probe:?}: f(+h)={plus}, f(-h)={minus}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let analytic = grads[probe.param].data()[probe.index];
        let rel_error = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        results.push(ProbeResult {
            probe,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        results,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}
