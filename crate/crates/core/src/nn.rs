//! Named parameter sets and the transformer building blocks (linear,
//! layernorm, multi-head attention, feed-forward) expressed on the tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{fl, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Named parameter tensors with a deterministic (lexicographic) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    entries: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        assert!(
            self.entries.insert(name.to_string(), t).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn tensor_count(&self) -> usize {
        self.entries.len()
    }

    /// All values in lexicographic parameter order, row-major within each
    /// tensor. `unflatten` with the same structure is the exact inverse.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.count());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(&self, flat: &[F]) -> Result<Self> {
        if flat.len() != self.count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", self.count()),
                got: format!("{}", flat.len()),
                context: "ParamSet::unflatten",
            });
        }
        let mut out = ParamSet::new();
        let mut pos = 0;
        for (name, t) in &self.entries {
            let (r, c) = t.shape();
            let chunk = flat[pos..pos + r * c].to_vec();
            pos += r * c;
            out.insert(name, Tensor::from_vec(r, c, chunk)?);
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert(name, Tensor::zeros(t.rows(), t.cols()));
        }
        out
    }

    pub fn to_f32(&self) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert(name, t.to_f32());
        }
        out
    }

    pub fn to_f64(&self) -> ParamSet<f64> {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert(name, t.to_f64());
        }
        out
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape variables for a parameter set, keyed by name.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Register every parameter on the tape. `trainable = false` makes them
    /// constants so no gradients are accumulated (frozen encoders).
    pub fn register<F: Scalar>(tape: &mut Tape<F>, params: &ParamSet<F>, trainable: bool) -> Self {
        Self::register_with(tape, params, |_| trainable)
    }

    /// Per-parameter trainability, for models with frozen pieces.
    pub fn register_with<F: Scalar>(
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
        is_trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = if is_trainable(name) {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Collect gradients from a backward pass into a parameter-shaped set.
    pub fn collect_grads<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        grads: &[Option<Tensor<F>>],
    ) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for (name, t) in params.iter() {
            let v = self.vars[name];
            let g = grads[v.id()]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            out.insert(name, g);
        }
        out
    }
}

/// Standard normal via Box-Muller on the raw uniform stream, so the value
/// sequence is identical for f32 and f64 models with the same seed.
pub fn randn(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn randn_tensor<F: Scalar>(rng: &mut ChaCha20Rng, rows: usize, cols: usize, std: f64) -> Tensor<F> {
    let data = (0..rows * cols).map(|_| fl(randn(rng) * std)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Registers the parameters of one linear / layernorm / attention stack with
/// Xavier-normal weights, zero biases, unit layernorm scales.
pub struct ParamBuilder<'a, F> {
    pub params: &'a mut ParamSet<F>,
    pub rng: &'a mut ChaCha20Rng,
}

impl<F: Scalar> ParamBuilder<'_, F> {
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.params
            .insert(&format!("{prefix}.w"), randn_tensor(self.rng, fan_in, fan_out, std));
        self.params
            .insert(&format!("{prefix}.b"), Tensor::zeros(1, fan_out));
    }

    pub fn layernorm(&mut self, prefix: &str, dim: usize) {
        self.params
            .insert(&format!("{prefix}.g"), Tensor::filled(1, dim, F::one()));
        self.params
            .insert(&format!("{prefix}.b"), Tensor::zeros(1, dim));
    }

    /// Q/K/V/O projections, all d×d, no biases.
    pub fn attention(&mut self, prefix: &str, dim: usize) {
        let std = (1.0 / dim as f64).sqrt();
        for name in ["wq", "wk", "wv", "wo"] {
            self.params
                .insert(&format!("{prefix}.{name}"), randn_tensor(self.rng, dim, dim, std));
        }
    }

    pub fn ffn(&mut self, prefix: &str, dim: usize, hidden: usize) {
        self.linear(&format!("{prefix}.fc1"), dim, hidden);
        self.linear(&format!("{prefix}.fc2"), hidden, dim);
    }
}

pub fn linear<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.w"));
    let b = vars.get(&format!("{prefix}.b"));
    let y = tape.matmul(x, w)?;
    tape.add_row_bcast(y, b)
}

pub fn layernorm<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = vars.get(&format!("{prefix}.g"));
    let b = vars.get(&format!("{prefix}.b"));
    tape.layernorm_rows(x, g, b)
}

/// Scaled dot-product attention on already-projected inputs.
pub fn attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<Var> {
    let dk = tape.value(q).cols();
    if tape.value(k).cols() != dk {
        return Err(Error::ShapeMismatch {
            expected: format!("key dim {}", dk),
            got: format!("{}", tape.value(k).cols()),
            context: "attention",
        });
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} kv rows", tape.value(k).rows()),
            got: format!("{}", tape.value(v).rows()),
            context: "attention",
        });
    }
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, fl::<F>(1.0 / (dk as f64).sqrt()));
    let weights = tape.softmax_rows(scaled, mask)?;
    tape.matmul(weights, v)
}

/// Multi-head attention with output projection (concat of head outputs × W_O).
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &ParamVars,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    heads: usize,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<Var> {
    let d = tape.value(x_q).cols();
    if d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "hidden dim {d} not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let q = tape.matmul(x_q, vars.get(&format!("{prefix}.wq")))?;
    let k = tape.matmul(x_kv, vars.get(&format!("{prefix}.wk")))?;
    let v = tape.matmul(x_kv, vars.get(&format!("{prefix}.wv")))?;
    let mut concat = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk);
        let kh = tape.slice_cols(k, h * dk, dk);
        let vh = tape.slice_cols(v, h * dk, dk);
        let oh = attention(tape, qh, kh, vh, mask.clone())?;
        concat = Some(match concat {
            None => oh,
            Some(prev) => tape.concat_cols(prev, oh)?,
        });
    }
    tape.matmul(concat.unwrap(), vars.get(&format!("{prefix}.wo")))
}

pub fn feed_forward<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = linear(tape, vars, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, vars, &format!("{prefix}.fc2"), h)
}

/// Inverted-dropout mask applied as a constant multiplier; `None` in eval mode.
pub fn dropout<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    rate: f64,
    rng: Option<&mut ChaCha20Rng>,
) -> Result<Var> {
    let rng = match rng {
        Some(r) if rate > 0.0 => r,
        _ => return Ok(x),
    };
    let (rows, cols) = tape.value(x).shape();
    let keep = 1.0 - rate;
    let data: Vec<F> = (0..rows * cols)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                fl(1.0 / keep)
            } else {
                F::zero()
            }
        })
        .collect();
    let mask = tape.constant(Tensor::from_vec(rows, cols, data)?);
    tape.mul(x, mask)
}

/// Fixed sinusoidal positional encodings, rows = time steps.
pub fn positional_encoding<F: Scalar>(t_max: usize, dim: usize) -> Tensor<F> {
    let mut pe = Tensor::zeros(t_max, dim);
    for t in 0..t_max {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = t as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.set(t, i, fl(v));
        }
    }
    pe
}

/// Causal mask for an n×n self-attention: position i may attend to j ≤ i.
pub fn causal_mask(n: usize) -> Arc<Vec<bool>> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    Arc::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flatten_unflatten_roundtrip_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut params = ParamSet::<f32>::new();
        let mut b = ParamBuilder {
            params: &mut params,
            rng: &mut rng,
        };
        b.linear("a", 4, 3);
        b.layernorm("z", 3);
        b.attention("m", 8);
        let flat = params.flatten();
        let back = params.unflatten(&flat).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn attention_single_kv_row_returns_v() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap());
        let k = tape.constant(Tensor::from_vec(1, 3, vec![0.5, 0.5, 0.5]).unwrap());
        let v = tape.constant(Tensor::from_vec(1, 2, vec![7.0, -2.0]).unwrap());
        let out = attention(&mut tape, q, k, v, None).unwrap();
        let o = tape.value(out);
        assert_eq!(o.row(0), &[7.0, -2.0]);
        assert_eq!(o.row(1), &[7.0, -2.0]);
    }

    #[test]
    fn attention_zero_query_averages_v() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(1, 2));
        let k = tape.constant(Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::from_vec(3, 1, vec![3.0, 6.0, 9.0]).unwrap());
        let out = attention(&mut tape, q, k, v, None).unwrap();
        assert!((tape.value(out).get(0, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn attention_identical_keys_average_v() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_vec(1, 2, vec![2.0, -3.0]).unwrap());
        let k = tape.constant(Tensor::from_vec(2, 2, vec![0.4, 0.1, 0.4, 0.1]).unwrap());
        let v = tape.constant(Tensor::from_vec(2, 1, vec![1.0, 5.0]).unwrap());
        let out = attention(&mut tape, q, k, v, None).unwrap();
        assert!((tape.value(out).get(0, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_fully_masked_row_rejected() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(1, 2));
        let k = tape.constant(Tensor::zeros(2, 2));
        let v = tape.constant(Tensor::zeros(2, 2));
        let mask = Arc::new(vec![false, false]);
        assert!(attention(&mut tape, q, k, v, Some(mask)).is_err());
    }

    #[test]
    fn mha_single_head_identity_projections_reduce_to_attention() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let d = 4;
        let mut params = ParamSet::<f64>::new();
        {
            let mut b = ParamBuilder {
                params: &mut params,
                rng: &mut rng,
            };
            b.attention("attn", d);
        }
        // overwrite with identities
        for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            let mut eye = Tensor::zeros(d, d);
            for i in 0..d {
                eye.set(i, i, 1.0);
            }
            *params.get_mut(name) = eye;
        }
        let x = randn_tensor::<f64>(&mut rng, 3, d, 1.0);
        let mut tape = Tape::<f64>::new();
        let vars = ParamVars::register(&mut tape, &params, false);
        let xv = tape.constant(x.clone());
        let mha = multi_head_attention(&mut tape, &vars, "attn", xv, xv, 1, None).unwrap();
        let plain = attention(&mut tape, xv, xv, xv, None).unwrap();
        let a = tape.value(mha).clone();
        let b = tape.value(plain).clone();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_zero_value_projection_gives_zero_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let d = 8;
        let mut params = ParamSet::<f64>::new();
        {
            let mut b = ParamBuilder {
                params: &mut params,
                rng: &mut rng,
            };
            b.attention("attn", d);
        }
        *params.get_mut("attn.wv") = Tensor::zeros(d, d);
        let x = randn_tensor::<f64>(&mut rng, 5, d, 1.0);
        let mut tape = Tape::<f64>::new();
        let vars = ParamVars::register(&mut tape, &params, false);
        let xv = tape.constant(x);
        let out = multi_head_attention(&mut tape, &vars, "attn", xv, xv, 2, None).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mha_output_shape_for_valid_head_counts() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let d = 12;
        for heads in [1, 2, 3, 4, 6] {
            let mut params = ParamSet::<f64>::new();
            {
                let mut b = ParamBuilder {
                    params: &mut params,
                    rng: &mut rng,
                };
                b.attention("attn", d);
            }
            let x = randn_tensor::<f64>(&mut rng, 7, d, 1.0);
            let mut tape = Tape::<f64>::new();
            let vars = ParamVars::register(&mut tape, &params, false);
            let xv = tape.constant(x);
            let out = multi_head_attention(&mut tape, &vars, "attn", xv, xv, heads, None).unwrap();
            assert_eq!(tape.value(out).shape(), (7, d));
        }
    }
}
