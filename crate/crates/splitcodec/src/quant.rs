//! Integer quantizer with a straight-through gradient.
//!
//! Rounding is half-to-even everywhere so the forward pass is deterministic
//! and unbiased at ties; the backward pass copies gradients unchanged.

use ndarray::Array2;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Integer latent with its quantization step (fixed at 1 in every shipped
/// configuration).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub symbols: Array2<i32>,
    pub delta: u32,
}

impl QuantizedLatent {
    pub fn rows(&self) -> usize {
        self.symbols.nrows()
    }

    pub fn cols(&self) -> usize {
        self.symbols.ncols()
    }
}

/// Rounds on the forward pass, passes the incoming gradient through on the
/// backward pass. Errors on non-finite input.
pub fn quantize_ste<F: Scalar>(tape: &Tape<F>, x: Var) -> Result<Var> {
    tape.check_finite(x, "quantize_ste")?;
    Ok(tape.round_ste(x))
}

/// Extracts a quantized tape value as an integer latent.
pub fn to_latent<F: Scalar>(tape: &Tape<F>, q: Var) -> QuantizedLatent {
    let v = tape.value(q);
    let shape = v.shape();
    debug_assert_eq!(shape.len(), 2);
    let symbols = Array2::from_shape_fn((shape[0], shape[1]), |(i, j)| {
        let x = v[[i, j]].to_f64_c();
        debug_assert!(x.fract() == 0.0, "latent not integral");
        x as i32
    });
    QuantizedLatent { symbols, delta: 1 }
}

/// Re-injects an integer latent onto a tape as float data.
pub fn latent_to_leaf<F: Scalar>(tape: &Tape<F>, latent: &QuantizedLatent) -> Var {
    let arr = latent.symbols.mapv(|s| F::from_f64_c(s as f64)).into_dyn();
    tape.leaf(arr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, IxDyn};

    #[test]
    fn rounding_examples() {
        let t: Tape<f32> = Tape::new();
        let x = t.leaf(arr2(&[[0.4, -1.5, 2.5, 1.5]]).into_dyn());
        let q = quantize_ste(&t, x).unwrap();
        assert_eq!(t.value(q).as_slice().unwrap(), &[0.0, -2.0, 2.0, 2.0]);
    }

    #[test]
    fn idempotent_on_integers() {
        let t: Tape<f32> = Tape::new();
        let x = t.leaf(arr2(&[[0.4, -1.5, 2.5, 7.3, -0.49]]).into_dyn());
        let q1 = quantize_ste(&t, x).unwrap();
        let q2 = quantize_ste(&t, q1).unwrap();
        assert_eq!(t.value(q1).as_slice().unwrap(), t.value(q2).as_slice().unwrap());
    }

    #[test]
    fn quantization_error_at_most_half() {
        let t: Tape<f32> = Tape::new();
        let vals: Vec<f32> = (0..1000).map(|i| (i as f32) * 0.013 - 6.5).collect();
        let x = t.leaf(ndarray::ArrayD::from_shape_vec(IxDyn(&[1, 1000]), vals.clone()).unwrap());
        let q = quantize_ste(&t, x).unwrap();
        let qv = t.value(q);
        for (a, b) in vals.iter().zip(qv.iter()) {
            assert!((a - b).abs() <= 0.5 + 1e-6);
        }
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let t: Tape<f32> = Tape::new();
        let x = t.leaf(arr2(&[[f32::NAN]]).into_dyn());
        assert!(quantize_ste(&t, x).is_err());
    }

    #[test]
    fn latent_roundtrip() {
        let t: Tape<f32> = Tape::new();
        let x = t.leaf(arr2(&[[1.2, -3.7], [0.5, 2.5]]).into_dyn());
        let q = quantize_ste(&t, x).unwrap();
        let latent = to_latent(&t, q);
        assert_eq!(latent.symbols, arr2(&[[1, -4], [0, 2]]));
        assert_eq!(latent.delta, 1);
        let back = latent_to_leaf(&t, &latent);
        assert_eq!(t.value(back).as_slice().unwrap(), t.value(q).as_slice().unwrap());
    }
}
