//! Dual-encoder retrieval model: music and gesture branches map clips onto
//! the unit sphere; training uses the symmetric contrastive loss over a batch
//! similarity matrix.

use crate::audio::MUSIC_DIM;
use crate::error::{Error, Result};
use crate::nn::{
    dropout, feed_forward, layernorm, linear, multi_head_attention, positional_encoding,
    ParamBuilder, ParamSet, ParamVars,
};
use crate::pose::POSE_DIM;
use crate::tape::{Tape, Var};
use crate::tensor::{fl, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RetrievalConfig {
    pub blocks: usize,
    pub heads: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub max_t: usize,
    pub music_dim: usize,
    pub pose_dim: usize,
}

impl Default for RetrievalConfig {
    /// Desk-scale defaults; a full-scale run would use 6 blocks, 8 heads,
    /// hidden 256.
    fn default() -> Self {
        RetrievalConfig {
            blocks: 1,
            heads: 4,
            hidden: 64,
            embed_dim: 32,
            ffn: 128,
            dropout: 0.1,
            temperature: 0.07,
            max_t: 512,
            music_dim: MUSIC_DIM,
            pose_dim: POSE_DIM,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Music,
    Gesture,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Music => "m",
            Branch::Gesture => "g",
        }
    }
}

pub struct RetrievalModel<F> {
    pub config: RetrievalConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> RetrievalModel<F> {
    pub fn new(config: RetrievalConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        {
            let mut b = ParamBuilder {
                params: &mut params,
                rng: &mut rng,
            };
            for (branch, in_dim) in [(Branch::Music, config.music_dim), (Branch::Gesture, config.pose_dim)]
            {
                let p = branch.prefix();
                let h = config.hidden;
                b.linear(&format!("{p}.in"), in_dim, h);
                for i in 0..config.blocks {
                    b.layernorm(&format!("{p}.b{i}.ln1"), h);
                    b.attention(&format!("{p}.b{i}.attn"), h);
                    b.layernorm(&format!("{p}.b{i}.ln2"), h);
                    b.ffn(&format!("{p}.b{i}.ffn"), h, config.ffn);
                }
                b.layernorm(&format!("{p}.ln_f"), h);
                b.linear(&format!("{p}.out"), h, config.embed_dim);
            }
        }
        // per-dimension input affine; identity until fit_input_norm is called
        for (branch, in_dim) in [(Branch::Music, config.music_dim), (Branch::Gesture, config.pose_dim)] {
            let p = branch.prefix();
            params.insert(&format!("{p}.norm.shift"), Tensor::zeros(1, in_dim));
            params.insert(&format!("{p}.norm.scale"), Tensor::filled(1, in_dim, F::one()));
        }
        Ok(RetrievalModel { config, params })
    }

    /// Initialize the input affine to standardize each input dimension over
    /// the given training tensors. The descriptor blocks differ in scale by
    /// orders of magnitude; without this the large blocks drown out the rest.
    pub fn fit_input_norm(&mut self, branch: Branch, inputs: &[&Tensor<F>]) -> Result<()> {
        let dim = match branch {
            Branch::Music => self.config.music_dim,
            Branch::Gesture => self.config.pose_dim,
        };
        let mut n = 0usize;
        let mut mean = vec![F::zero(); dim];
        for t in inputs {
            if t.cols() != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("Tx{dim}"),
                    got: format!("{:?}", t.shape()),
                    context: "fit_input_norm",
                });
            }
            for r in 0..t.rows() {
                for (m, &v) in mean.iter_mut().zip(t.row(r)) {
                    *m = *m + v;
                }
            }
            n += t.rows();
        }
        if n == 0 {
            return Err(Error::InvalidArgument("fit_input_norm over empty input".into()));
        }
        let nf = fl::<F>(n as f64);
        for m in mean.iter_mut() {
            *m = *m / nf;
        }
        let mut var = vec![F::zero(); dim];
        for t in inputs {
            for r in 0..t.rows() {
                for ((s, &v), &m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                    let d = v - m;
                    *s = *s + d * d;
                }
            }
        }
        let p = branch.prefix();
        let shift = self.params.get_mut(&format!("{p}.norm.shift"));
        for (s, &m) in shift.data_mut().iter_mut().zip(&mean) {
            *s = -m;
        }
        let scale = self.params.get_mut(&format!("{p}.norm.scale"));
        for (s, &v) in scale.data_mut().iter_mut().zip(&var) {
            let std = (v / nf).sqrt();
            *s = F::one() / std.max(fl(1e-6));
        }
        // Per-dimension standardisation alone lets wide descriptor blocks
        // dominate: after z-scoring, the 384 tempogram lags carry 384 units
        // of variance against 12 for chroma, so any pooled statistic — and
        // any spurious margin the contrastive loss can exploit — lives
        // mostly in the widest block. Dividing each dimension by the square
        // root of its block width gives every block the same total variance,
        // so a block contributes as one unit regardless of how many
        // dimensions it is spread over.
        if branch == Branch::Music && dim == crate::audio::MUSIC_DIM {
            let scale = self.params.get_mut(&format!("{p}.norm.scale"));
            let mut at = 0usize;
            for &(_, width) in crate::audio::DESCRIPTOR_BLOCKS.iter() {
                let w = fl::<F>(width as f64).sqrt();
                for s in &mut scale.data_mut()[at..at + width] {
                    *s = *s / w;
                }
                at += width;
            }
        }
        Ok(())
    }

    /// Temporal blocks with stride-2 downsampling, mean pool, projection,
    /// L2 normalization. Returns a 1×embed_dim unit row.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &ParamVars,
        branch: Branch,
        input: Var,
        mut rng: Option<&mut ChaCha20Rng>,
    ) -> Result<Var> {
        let expect_dim = match branch {
            Branch::Music => self.config.music_dim,
            Branch::Gesture => self.config.pose_dim,
        };
        let (t, dim) = tape.value(input).shape();
        if dim != expect_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("Tx{}", expect_dim),
                got: format!("{:?}", (t, dim)),
                context: "retrieval embed",
            });
        }
        if t == 0 || t > self.config.max_t {
            return Err(Error::InvalidArgument(format!(
                "clip length {t} outside 1..={}",
                self.config.max_t
            )));
        }
        let p = branch.prefix();
        let h = self.config.hidden;
        let pe = tape.constant(positional_encoding(t, h));
        let shifted = tape.add_row_bcast(input, vars.get(&format!("{p}.norm.shift")))?;
        let standardized = tape.mul_row_bcast(shifted, vars.get(&format!("{p}.norm.scale")))?;
        let mut x = linear(tape, vars, &format!("{p}.in"), standardized)?;
        x = tape.add(x, pe)?;
        x = dropout(tape, x, self.config.dropout, rng.as_deref_mut())?;
        for i in 0..self.config.blocks {
            let normed = layernorm(tape, vars, &format!("{p}.b{i}.ln1"), x)?;
            let attn = multi_head_attention(
                tape,
                vars,
                &format!("{p}.b{i}.attn"),
                normed,
                normed,
                self.config.heads,
                None,
            )?;
            let attn = dropout(tape, attn, self.config.dropout, rng.as_deref_mut())?;
            x = tape.add(x, attn)?;
            let normed = layernorm(tape, vars, &format!("{p}.b{i}.ln2"), x)?;
            let ff = feed_forward(tape, vars, &format!("{p}.b{i}.ffn"), normed)?;
            let ff = dropout(tape, ff, self.config.dropout, rng.as_deref_mut())?;
            x = tape.add(x, ff)?;
            if tape.value(x).rows() > 1 {
                x = tape.stride_rows(x, 2);
            }
        }
        // normalize after pooling: a per-frame layernorm here would rescale
        // every frame by its own norm and scramble the pooled statistics
        let pooled = tape.mean_rows(x);
        let pooled = layernorm(tape, vars, &format!("{p}.ln_f"), pooled)?;
        let proj = linear(tape, vars, &format!("{p}.out"), pooled)?;
        tape.l2_normalize_rows(proj)
    }

    fn embed_eval(&self, branch: Branch, input: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false);
        let x = tape.constant(input.clone());
        let e = self.embed_on_tape(&mut tape, &vars, branch, x, None)?;
        Ok(tape.value(e).clone())
    }

    pub fn embed_music(&self, music: &Tensor<F>) -> Result<Tensor<F>> {
        self.embed_eval(Branch::Music, music)
    }

    pub fn embed_gesture(&self, gesture: &Tensor<F>) -> Result<Tensor<F>> {
        self.embed_eval(Branch::Gesture, gesture)
    }
}

/// s_ij = u_i·v_j / τ. Rows of both inputs must be unit-norm within 1e-4.
pub fn similarity_matrix<F: Scalar>(u: &Tensor<F>, v: &Tensor<F>, tau: f64) -> Result<Tensor<F>> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    u.same_shape(v, "similarity_matrix")?;
    for (name, t) in [("u", u), ("v", v)] {
        for r in 0..t.rows() {
            let norm: F = t.row(r).iter().map(|&x| x * x).sum::<F>().sqrt();
            if (norm - F::one()).abs() > fl(1e-4) {
                return Err(Error::InvalidArgument(format!(
                    "{name} row {r} has norm {norm}, expected unit"
                )));
            }
        }
    }
    Ok(u.matmul(&v.transpose())?.scale(fl(1.0 / tau)))
}

/// Symmetric contrastive loss on the tape: half row-wise plus half
/// column-wise cross-entropy toward the diagonal, averaged over the batch.
pub fn clip_loss_on_tape<F: Scalar>(tape: &mut Tape<F>, s: Var) -> Result<Var> {
    let (b, c) = tape.value(s).shape();
    if b != c || b == 0 {
        return Err(Error::ShapeMismatch {
            expected: "nonempty square matrix".into(),
            got: format!("{:?}", (b, c)),
            context: "clip_loss",
        });
    }
    tape.value(s).check_finite("clip_loss input")?;
    let st = tape.transpose(s);
    let mut terms = Vec::new();
    for m in [s, st] {
        let lse = tape.logsumexp_rows(m)?; // B×1
        let lse_sum = tape.sum_all(lse);
        let diag = tape.diag_to_row(m)?;
        let diag_sum = tape.sum_all(diag);
        terms.push(tape.sub(lse_sum, diag_sum)?);
    }
    let total = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(total, fl(0.5 / b as f64)))
}

pub fn clip_loss<F: Scalar>(s: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let loss = clip_loss_on_tape(&mut tape, sv)?;
    Ok(tape.value(loss).get(0, 0))
}
