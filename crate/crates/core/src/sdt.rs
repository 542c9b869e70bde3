//! Draft-then-refine loss and inference.

use std::sync::Arc;

use spt_tensor::{Tape, Tensor, Var};

use crate::error::Result;
use crate::mask::{Image, Mask};
use crate::model::SptModel;
use crate::prompt::PromptSet;

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

/// `1 - (2 Σ p y + ε) / (Σ p + Σ y + ε)` with `p = σ(logits)`.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &Arc<Tensor>) -> Result<Var> {
    let probs = tape.sigmoid(logits)?;
    let y = tape.constant(Arc::clone(target));
    let inter = tape.mul(probs, y)?;
    let inter = tape.sum(inter);
    let num = tape.scale(inter, 2.0)?;
    let num = tape.offset(num, DICE_EPS)?;
    let sum_p = tape.sum(probs);
    let sum_y: f64 = target.data().iter().sum();
    let den = tape.offset(sum_p, sum_y + DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    Ok(tape.offset(neg, 1.0)?)
}

/// Mean binary cross-entropy on logits plus Dice.
pub fn mask_loss(tape: &mut Tape, logits: Var, target: &Arc<Tensor>) -> Result<Var> {
    let ce = tape.bce_with_logits(logits, Arc::clone(target))?;
    let dice = dice_loss(tape, logits, target)?;
    Ok(tape.add(ce, dice)?)
}

/// Unweighted sum of the mask losses of both stages; the draft terms are
/// absent when self-drafting is off.
pub fn compute_loss(tape: &mut Tape, draft: Option<Var>, refine: Var, target: &Arc<Tensor>) -> Result<Var> {
    let refine = mask_loss(tape, refine, target)?;
    match draft {
        Some(d) => {
            let d = mask_loss(tape, d, target)?;
            Ok(tape.add(d, refine)?)
        }
        None => Ok(refine),
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub draft_logits: Option<Tensor>,
    pub refine_logits: Tensor,
    pub draft: Option<Mask>,
    pub refine: Mask,
    /// IoU estimate of the refine decoder for the first mask token.
    pub iou_pred: f64,
}

impl SptModel {
    /// `[tokens, dim]` embedding of each image, without gradients.
    pub fn embed_images(&self, images: &[&Image]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape, false);
        let batch = self.encode_images(&mut tape, &p, images)?;
        let shape = tape.shape(batch).to_vec();
        let per = shape[1] * shape[2];
        let data = tape.value(batch).data();
        (0..images.len())
            .map(|i| Ok(Tensor::new(shape[1..].to_vec(), data[i * per..(i + 1) * per].to_vec())?))
            .collect()
    }

    /// Runs both stages from a cached image embedding.
    pub fn predict_embedded(&self, e_img: &Tensor, prompts: &PromptSet) -> Result<Prediction> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape, false);
        let e = tape.constant(e_img.clone());
        let out = self.forward(&mut tape, &p, e, prompts)?;
        let refine_logits = tape.value(out.refine.logits).clone();
        let draft_logits = out.draft.as_ref().map(|d| tape.value(d.logits).clone());
        Ok(Prediction {
            draft: draft_logits.as_ref().map(Mask::from_logits).transpose()?,
            refine: Mask::from_logits(&refine_logits)?,
            draft_logits,
            refine_logits,
            iou_pred: tape.value(out.refine.iou).data()[0],
        })
    }

    pub fn predict(&self, image: &Image, prompts: &PromptSet) -> Result<Prediction> {
        prompts.validate(self.config.image_size)?;
        let e = self.embed_images(&[image])?.remove(0);
        self.predict_embedded(&e, prompts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn zero_logits_give_ln2_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 2]));
        let y = Arc::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap());
        let ce = tape.bce_with_logits(logits, Arc::clone(&y)).unwrap();
        assert!((scalar(&tape, ce) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dice_of_half_probabilities_on_full_target() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 2]));
        let y = Arc::new(Tensor::ones(&[2, 2]));
        let d = dice_loss(&mut tape, logits, &y).unwrap();
        assert!((scalar(&tape, d) - (1.0 - 5.0 / 7.0)).abs() < 1e-15);
    }

    #[test]
    fn saturated_predictions_have_near_zero_loss() {
        let y = Arc::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let mut tape = Tape::new();
        let logits = tape.constant(y.map(|v| if v > 0.5 { 40.0 } else { -40.0 }));
        let l = compute_loss(&mut tape, Some(logits), logits, &y).unwrap();
        assert!(scalar(&tape, l) < 1e-12);
    }
}
