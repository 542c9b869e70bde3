//! Layout ops for `[h, w, c]` feature grids.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

impl Tape {
    /// `[h, w, f*f*c] -> [f*h, f*w, c]`, where channel block `(dy, dx)` of
    /// each input cell lands at output pixel `(f*y + dy, f*x + dx)`.
    pub fn depth_to_space(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [h, w, fc] = shape[..] else {
            return Err(TensorError::Dimension(format!("depth_to_space on {shape:?}")));
        };
        if factor == 0 || fc % (factor * factor) != 0 {
            return Err(TensorError::Dimension(format!(
                "depth_to_space factor {factor} on {shape:?}"
            )));
        }
        let c = fc / (factor * factor);
        let (oh, ow) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(oh * ow * c);
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, dy, x, dx) = (oy / factor, oy % factor, ox / factor, ox % factor);
                let base = (y * w + x) * fc + (dy * factor + dx) * c;
                index.extend(base..base + c);
            }
        }
        self.gather(a, index.into(), &[oh, ow, c])
    }

    /// `[h, w, c] -> [h/f, w/f, f*f*c]`, the inverse of [`Tape::depth_to_space`].
    pub fn space_to_depth(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [h, w, c] = shape[..] else {
            return Err(TensorError::Dimension(format!("space_to_depth on {shape:?}")));
        };
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::Dimension(format!(
                "space_to_depth factor {factor} on {shape:?}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut index = Vec::with_capacity(h * w * c);
        for y in 0..oh {
            for x in 0..ow {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let base = ((y * factor + dy) * w + (x * factor + dx)) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
        self.gather(a, index.into(), &[oh, ow, factor * factor * c])
    }
}

/// `[out_len, in_len]` matrix of half-pixel-centred linear interpolation
/// weights; `R * m * R^T` bilinearly resizes a square map `m`.
pub fn bilinear_weights(out_len: usize, in_len: usize) -> Tensor {
    let mut w = Tensor::zeros(&[out_len, in_len]);
    let ratio = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        w.data_mut()[o * in_len + i0] += 1.0 - frac;
        w.data_mut()[o * in_len + i1] += frac;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_depth_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..4 * 4 * 3).map(f64::from).collect();
        let x = tape.constant(Tensor::new(vec![4, 4, 3], data.clone()).unwrap());
        let packed = tape.space_to_depth(x, 2).unwrap();
        assert_eq!(tape.shape(packed), &[2, 2, 12]);
        let back = tape.depth_to_space(packed, 2).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }

    #[test]
    fn bilinear_rows_are_convex() {
        let w = bilinear_weights(64, 32);
        for row in w.data().chunks(32) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        // Doubling: output pixel 1 sits 3/4 of the way from input 0 to input 1.
        assert!((w.data()[32] - 0.75).abs() < 1e-12);
        assert!((w.data()[33] - 0.25).abs() < 1e-12);
    }
}
