//! Relation-aware adapter: cosine relations between image tokens, softmax
//! normalization, thresholding, and a per-channel scaled residual.

use std::sync::Arc;

use spt_tensor::{Tape, Tensor, Var};

use crate::error::{Result, SptError};

/// Row-stochastic relation matrix `a` and its thresholded form `a_star`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    pub a: Tensor,
    pub a_star: Tensor,
    pub alpha: f64,
    pub d: usize,
}

impl RelationMatrix {
    pub fn threshold(&self) -> f64 {
        self.alpha / self.d as f64
    }
}

/// Builds `(A, A*)` on the tape from an `[n, d]` token matrix. Both stay
/// differentiable with respect to `e_img`; the keep pattern of the threshold
/// is a constant.
pub fn relation_on_tape(tape: &mut Tape, e_img: Var, alpha: f64) -> Result<(Var, Var)> {
    let (n, d) = match *tape.shape(e_img) {
        [n, d] => (n, d),
        ref s => return Err(SptError::DegenerateInput(format!("relation input has shape {s:?}"))),
    };
    if n < 2 {
        return Err(SptError::DegenerateInput(format!("relation needs at least 2 tokens, got {n}")));
    }
    let sq = tape.mul(e_img, e_img)?;
    let sumsq = tape.sum_axis(sq, 1)?;
    // Zero rows: divide by 1 instead, which yields cosine 0 against everything.
    let fix: Vec<f64> = tape
        .value(sumsq)
        .data()
        .iter()
        .map(|&v| if v == 0.0 { 1.0 } else { 0.0 })
        .collect();
    let fix = tape.constant(Tensor::new(vec![n, 1], fix)?);
    let sumsq = tape.add(sumsq, fix)?;
    let norm = tape.sqrt(sumsq)?;
    let unit = tape.div(e_img, norm)?;
    let s = tape.matmul_nt(unit, unit)?;
    let s = tape.fill_diagonal(s, f64::NEG_INFINITY)?;
    let a = tape.softmax(s, 1)?;
    let cut = alpha / d as f64;
    let keep = tape.value(a).map(|v| if v >= cut { 1.0 } else { 0.0 });
    let keep = tape.constant(keep);
    let a_star = tape.mul(a, keep)?;
    Ok((a, a_star))
}

pub fn compute_relation(e_img: &Tensor, alpha: f64) -> Result<RelationMatrix> {
    if !(alpha >= 0.0) {
        return Err(SptError::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    let mut tape = Tape::no_grad();
    let e = tape.constant(e_img.clone());
    let (a, a_star) = relation_on_tape(&mut tape, e, alpha)?;
    Ok(RelationMatrix {
        a: tape.value(a).clone(),
        a_star: tape.value(a_star).clone(),
        alpha,
        d: e_img.shape()[1],
    })
}

/// `t + beta ⊙ (relation · t)`, with `beta` broadcast over rows.
pub fn apply_on_tape(tape: &mut Tape, relation: Var, t: Var, beta: Var) -> Result<Var> {
    let aggregated = tape.matmul(relation, t)?;
    let scaled = tape.mul(aggregated, beta)?;
    Ok(tape.add(t, scaled)?)
}

pub fn apply_relation(rel: &RelationMatrix, t_img_bar: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let r = tape.constant(Arc::new(rel.a_star.clone()));
    let t = tape.constant(t_img_bar.clone());
    let b = tape.constant(beta.clone());
    let out = apply_on_tape(&mut tape, r, t, b)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn two_tokens_relate_to_each_other() {
        let r = compute_relation(&t(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]), 0.25).unwrap();
        assert_eq!(r.a.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_alpha_keeps_everything() {
        let r = compute_relation(&t(3, 2, &[1.0, 0.0, 0.3, 0.9, -0.5, 0.2]), 0.0).unwrap();
        assert_eq!(r.a, r.a_star);
    }

    #[test]
    fn identical_rows_split_evenly_and_high_threshold_clears() {
        let e = t(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let r = compute_relation(&e, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((r.a.data()[i * 3 + j] - want).abs() < 1e-15);
            }
        }
        // alpha / d = 1.2 / 2 = 0.6 > 1/2
        let r = compute_relation(&e, 1.2).unwrap();
        assert!(r.a_star.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_rows_have_zero_cosine() {
        let r = compute_relation(&t(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]), 0.0).unwrap();
        // Row 0 sees cosine 0 to both others.
        assert!((r.a.data()[1] - 0.5).abs() < 1e-15);
        assert!(r.a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_token_is_degenerate() {
        assert!(matches!(
            compute_relation(&t(1, 2, &[1.0, 2.0]), 0.1),
            Err(SptError::DegenerateInput(_))
        ));
    }

    #[test]
    fn apply_examples() {
        let rel = RelationMatrix {
            a: t(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            a_star: t(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            alpha: 0.0,
            d: 2,
        };
        let x = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = apply_relation(&rel, &x, &Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0]);
        let out = apply_relation(&rel, &x, &Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(out, x);
        let zero = RelationMatrix {
            a_star: Tensor::zeros(&[2, 2]),
            ..rel
        };
        let out = apply_relation(&zero, &x, &Tensor::from_vec(vec![3.0, -1.0])).unwrap();
        assert_eq!(out, x);
    }
}
