//! Generator training objectives: frame-level L1 reconstruction plus the
//! retrieval-space alignment term, gated by a warm-up epoch.

use crate::error::{Error, Result};
use crate::nn::ParamVars;
use crate::retrieval::{Branch, RetrievalModel};
use crate::tape::{Tape, Var};
use crate::tensor::{fl, Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub align_start_epoch: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_align: 0.5,
            align_start_epoch: 50,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_align.is_finite() || self.lambda_align < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda_align {} must be finite and nonnegative",
                self.lambda_align
            )));
        }
        Ok(())
    }

    pub fn align_active(&self, epoch: usize) -> bool {
        self.lambda_align > 0.0 && epoch >= self.align_start_epoch
    }
}

/// Mean over frames of the L1 distance to ground truth: (1/T) Σ_t |pred_t - gt_t|₁.
pub fn rec_loss_on_tape<F: Scalar>(tape: &mut Tape<F>, pred: Var, gt: Var) -> Result<Var> {
    let t = tape.value(pred).rows();
    tape.value(pred).same_shape(tape.value(gt), "rec_loss")?;
    let diff = tape.sub(pred, gt)?;
    let abs = tape.abs(diff);
    let total = tape.sum_all(abs);
    Ok(tape.scale(total, fl(1.0 / t as f64)))
}

pub fn rec_loss<F: Scalar>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let g = tape.constant(gt.clone());
    let l = rec_loss_on_tape(&mut tape, p, g)?;
    Ok(tape.value(l).get(0, 0))
}

/// Cosine distance between predicted and ground-truth gestures in the frozen
/// retrieval space: 1 - cos(R_g(pred), R_g(gt)). Gradients flow through
/// `pred` only; the encoder parameters and the target embedding are constants.
pub fn align_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    encoder: &RetrievalModel<F>,
    frozen_vars: &ParamVars,
    pred: Var,
    gt_embedding: &Tensor<F>,
) -> Result<Var> {
    let emb = encoder.embed_on_tape(tape, frozen_vars, Branch::Gesture, pred, None)?;
    let target = tape.constant(gt_embedding.clone());
    let prod = tape.mul(emb, target)?;
    let cos = tape.sum_all(prod);
    let one = tape.constant(Tensor::filled(1, 1, F::one()));
    tape.sub(one, cos)
}

pub fn align_loss<F: Scalar>(
    pred: &Tensor<F>,
    gt: &Tensor<F>,
    encoder: &RetrievalModel<F>,
) -> Result<F> {
    let gt_emb = encoder.embed_gesture(gt)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &encoder.params, false);
    let p = tape.constant(pred.clone());
    let l = align_loss_on_tape(&mut tape, encoder, &vars, p, &gt_emb)?;
    Ok(tape.value(l).get(0, 0))
}

/// rec + λ·align, with the alignment term active only from
/// `align_start_epoch` on. `align` carries the frozen encoder context when
/// the caller has one; with λ=0 it is never touched.
pub fn total_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Var,
    gt: Var,
    weights: &LossWeights,
    epoch: usize,
    align: Option<(&RetrievalModel<F>, &ParamVars, &Tensor<F>)>,
) -> Result<Var> {
    weights.validate()?;
    let rec = rec_loss_on_tape(tape, pred, gt)?;
    if !weights.align_active(epoch) {
        return Ok(rec);
    }
    let (encoder, vars, gt_emb) = align.ok_or_else(|| {
        Error::InvalidArgument(
            "alignment loss requires a trained retrieval encoder (warm-up dependency)".into(),
        )
    })?;
    let al = align_loss_on_tape(tape, encoder, vars, pred, gt_emb)?;
    let weighted = tape.scale(al, fl(weights.lambda_align));
    tape.add(rec, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn_tensor;
    use crate::retrieval::RetrievalConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn rec_loss_zero_iff_equal_and_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = randn_tensor::<f64>(&mut rng, 4, 147, 1.0);
        let b = randn_tensor::<f64>(&mut rng, 4, 147, 1.0);
        assert_eq!(rec_loss(&a, &a).unwrap(), 0.0);
        let ab = rec_loss(&a, &b).unwrap();
        let ba = rec_loss(&b, &a).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_single_coordinate_offset() {
        let gt = Tensor::<f64>::zeros(1, 147);
        let mut pred = gt.clone();
        pred.set(0, 31, 2.0);
        assert!((rec_loss(&pred, &gt).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_uniform_offset_is_14_7() {
        for t in [1usize, 5, 20] {
            let gt = Tensor::<f64>::zeros(t, 147);
            let pred = Tensor::filled(t, 147, 0.1);
            assert!((rec_loss(&pred, &gt).unwrap() - 14.7).abs() < 1e-9);
        }
    }

    #[test]
    fn rec_loss_shape_mismatch_rejected() {
        let a = Tensor::<f64>::zeros(2, 147);
        let b = Tensor::<f64>::zeros(3, 147);
        assert!(rec_loss(&a, &b).is_err());
    }

    fn tiny_encoder() -> RetrievalModel<f64> {
        RetrievalModel::new(
            RetrievalConfig {
                blocks: 1,
                heads: 2,
                hidden: 16,
                embed_dim: 8,
                ffn: 32,
                dropout: 0.0,
                ..RetrievalConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn align_loss_zero_for_identical_and_bounded() {
        let enc = tiny_encoder();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let g = randn_tensor::<f64>(&mut rng, 10, 147, 0.5);
        assert!(align_loss(&g, &g, &enc).unwrap().abs() < 1e-9);
        for _ in 0..10 {
            let a = randn_tensor::<f64>(&mut rng, 10, 147, 0.5);
            let b = randn_tensor::<f64>(&mut rng, 10, 147, 0.5);
            let l = align_loss(&a, &b, &enc).unwrap();
            assert!((0.0..=2.0).contains(&l));
        }
    }

    #[test]
    fn total_loss_gates_alignment_on_epoch_and_lambda() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let pred_t = randn_tensor::<f64>(&mut rng, 4, 147, 0.3);
        let gt_t = randn_tensor::<f64>(&mut rng, 4, 147, 0.3);
        let weights = LossWeights {
            lambda_align: 0.5,
            align_start_epoch: 50,
        };
        let enc = tiny_encoder();
        let gt_emb = enc.embed_gesture(&gt_t).unwrap();
        let eval = |epoch: usize, lambda: f64| -> f64 {
            let w = LossWeights {
                lambda_align: lambda,
                ..weights.clone()
            };
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, &enc.params, false);
            let p = tape.constant(pred_t.clone());
            let g = tape.constant(gt_t.clone());
            let l =
                total_loss_on_tape(&mut tape, p, g, &w, epoch, Some((&enc, &vars, &gt_emb)))
                    .unwrap();
            tape.value(l).get(0, 0)
        };
        let rec = rec_loss(&pred_t, &gt_t).unwrap();
        assert!((eval(10, 0.5) - rec).abs() < 1e-12, "warm-up gate");
        assert!((eval(60, 0.0) - rec).abs() < 1e-12, "lambda zero");
        let full = eval(60, 0.5);
        let al = align_loss(&pred_t, &gt_t, &enc).unwrap();
        assert!((full - (rec + 0.5 * al)).abs() < 1e-9);
    }

    #[test]
    fn total_loss_zero_for_perfect_prediction() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let gt_t = randn_tensor::<f64>(&mut rng, 4, 147, 0.3);
        let enc = tiny_encoder();
        let gt_emb = enc.embed_gesture(&gt_t).unwrap();
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &enc.params, false);
        let p = tape.constant(gt_t.clone());
        let g = tape.constant(gt_t.clone());
        let w = LossWeights {
            lambda_align: 0.7,
            align_start_epoch: 0,
        };
        let l = total_loss_on_tape(&mut tape, p, g, &w, 100, Some((&enc, &vars, &gt_emb))).unwrap();
        assert!(tape.value(l).get(0, 0).abs() < 1e-9);
    }

    #[test]
    fn missing_encoder_with_active_lambda_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(2, 147));
        let g = tape.constant(Tensor::zeros(2, 147));
        let w = LossWeights {
            lambda_align: 0.5,
            align_start_epoch: 0,
        };
        assert!(total_loss_on_tape(&mut tape, p, g, &w, 10, None).is_err());
    }
}
