//! Music-to-gesture generator: a transformer music encoder plus an
//! autoregressive gesture decoder with causal self-attention, cross-attention
//! over the encoded music, and a feed-forward head on the concatenated
//! gesture/music states.

use crate::audio::MUSIC_DIM;
use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, dropout, feed_forward, layernorm, linear, multi_head_attention,
    positional_encoding, ParamBuilder, ParamSet, ParamVars,
};
use crate::pose::POSE_DIM;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub max_t: usize,
    pub music_dim: usize,
    pub pose_dim: usize,
}

impl Default for GeneratorConfig {
    /// Desk-scale defaults; `full_scale` gives the sizes intended for real
    /// motion-capture corpora.
    fn default() -> Self {
        GeneratorConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn: 256,
            dropout: 0.1,
            max_t: 512,
            music_dim: MUSIC_DIM,
            pose_dim: POSE_DIM,
        }
    }
}

impl GeneratorConfig {
    pub fn full_scale() -> Self {
        GeneratorConfig {
            layers: 6,
            heads: 8,
            hidden: 512,
            ffn: 2048,
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

pub struct GeneratorModel<F> {
    pub config: GeneratorConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> GeneratorModel<F> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        {
            let mut b = ParamBuilder {
                params: &mut params,
                rng: &mut rng,
            };
            let d = config.hidden;
            b.linear("enc.in", config.music_dim, d);
            for l in 0..config.layers {
                b.layernorm(&format!("enc.l{l}.ln1"), d);
                b.attention(&format!("enc.l{l}.attn"), d);
                b.layernorm(&format!("enc.l{l}.ln2"), d);
                b.ffn(&format!("enc.l{l}.ffn"), d, config.ffn);
            }
            b.layernorm("enc.ln_f", d);
            b.linear("dec.in", config.pose_dim, d);
            for l in 0..config.layers {
                b.layernorm(&format!("dec.l{l}.ln1"), d);
                b.attention(&format!("dec.l{l}.self"), d);
                b.layernorm(&format!("dec.l{l}.ln2"), d);
                b.attention(&format!("dec.l{l}.cross"), d);
                b.layernorm(&format!("dec.l{l}.ln3"), d);
                b.ffn(&format!("dec.l{l}.ffn"), d, config.ffn);
            }
            b.layernorm("dec.ln_f", d);
            b.attention("head.cross", d);
            b.linear("head.fc1", 2 * d, config.ffn);
            b.linear("head.fc2", config.ffn, config.pose_dim);
        }
        Ok(GeneratorModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Encoder stack on the tape. `rng` enables dropout (training mode).
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &ParamVars,
        music: Var,
        mut rng: Option<&mut ChaCha20Rng>,
    ) -> Result<Var> {
        let (t, dim) = tape.value(music).shape();
        if dim != self.config.music_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("Tx{}", self.config.music_dim),
                got: format!("{:?}", (t, dim)),
                context: "encode_music",
            });
        }
        if t > self.config.max_t {
            return Err(Error::InvalidArgument(format!(
                "clip length {t} exceeds max_t {}",
                self.config.max_t
            )));
        }
        let d = self.config.hidden;
        let pe = tape.constant(positional_encoding(t, d));
        let mut x = linear(tape, vars, "enc.in", music)?;
        x = tape.add(x, pe)?;
        x = dropout(tape, x, self.config.dropout, rng.as_deref_mut())?;
        for l in 0..self.config.layers {
            let normed = layernorm(tape, vars, &format!("enc.l{l}.ln1"), x)?;
            let attn = multi_head_attention(
                tape,
                vars,
                &format!("enc.l{l}.attn"),
                normed,
                normed,
                self.config.heads,
                None,
            )?;
            let attn = dropout(tape, attn, self.config.dropout, rng.as_deref_mut())?;
            x = tape.add(x, attn)?;
            let normed = layernorm(tape, vars, &format!("enc.l{l}.ln2"), x)?;
            let ff = feed_forward(tape, vars, &format!("enc.l{l}.ffn"), normed)?;
            let ff = dropout(tape, ff, self.config.dropout, rng.as_deref_mut())?;
            x = tape.add(x, ff)?;
        }
        layernorm(tape, vars, "enc.ln_f", x)
    }

    /// Decoder on the tape with a causal self-attention mask. `dec_in` rows
    /// are [g0, g_1 .. g_{n-1}]; output row i is the prediction for frame i+1.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &ParamVars,
        enc_out: Var,
        dec_in: Var,
        mut rng: Option<&mut ChaCha20Rng>,
    ) -> Result<Var> {
        let (n, dim) = tape.value(dec_in).shape();
        if dim != self.config.pose_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("Tx{}", self.config.pose_dim),
                got: format!("{:?}", (n, dim)),
                context: "decode",
            });
        }
        let t_music = tape.value(enc_out).rows();
        if n > t_music {
            return Err(Error::InvalidArgument(format!(
                "gesture history {n} longer than music clip {t_music}"
            )));
        }
        let d = self.config.hidden;
        let mask = causal_mask(n);
        let pe = tape.constant(positional_encoding(n, d));
        let mut x = linear(tape, vars, "dec.in", dec_in)?;
        x = tape.add(x, pe)?;
        x = dropout(tape, x, self.config.dropout, rng.as_deref_mut())?;
        for l in 0..self.config.layers {
            let normed = layernorm(tape, vars, &format!("dec.l{l}.ln1"), x)?;
            let attn = multi_head_attention(
                tape,
                vars,
                &format!("dec.l{l}.self"),
                normed,
                normed,
                self.config.heads,
                Some(mask.clone()),
            )?;
            let attn = dropout(tape, attn, self.config.dropout, rng.as_deref_mut())?;
            x = tape.add(x, attn)?;
            let normed = layernorm(tape, vars, &format!("dec.l{l}.ln2"), x)?;
            let cross = multi_head_attention(
                tape,
                vars,
                &format!("dec.l{l}.cross"),
                normed,
                enc_out,
                self.config.heads,
                None,
            )?;
            let cross = dropout(tape, cross, self.config.dropout, rng.as_deref_mut())?;
            x = tape.add(x, cross)?;
            let normed = layernorm(tape, vars, &format!("dec.l{l}.ln3"), x)?;
            let ff = feed_forward(tape, vars, &format!("dec.l{l}.ffn"), normed)?;
            let ff = dropout(tape, ff, self.config.dropout, rng.as_deref_mut())?;
            x = tape.add(x, ff)?;
        }
        // gesture state and music-attended state, concatenated into the head
        let z_g = layernorm(tape, vars, "dec.ln_f", x)?;
        let z_m = multi_head_attention(
            tape,
            vars,
            "head.cross",
            z_g,
            enc_out,
            self.config.heads,
            None,
        )?;
        let cat = tape.concat_cols(z_g, z_m)?;
        let h = linear(tape, vars, "head.fc1", cat)?;
        let h = tape.gelu(h);
        linear(tape, vars, "head.fc2", h)
    }

    /// Teacher-forced pass on the tape: one batched causal-mask pass where
    /// row t conditions on the ground-truth history g_{<t}.
    pub fn teacher_forced_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &ParamVars,
        music: Var,
        dec_in: Var,
        mut rng: Option<&mut ChaCha20Rng>,
    ) -> Result<Var> {
        let enc = self.encode_on_tape(tape, vars, music, rng.as_deref_mut())?;
        self.decode_on_tape(tape, vars, enc, dec_in, rng)
    }

    /// Eval-mode encoder (no gradients, no dropout).
    pub fn encode_music(&self, music: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false);
        let m = tape.constant(music.clone());
        let out = self.encode_on_tape(&mut tape, &vars, m, None)?;
        Ok(tape.value(out).clone())
    }

    /// Build [g0, g_1 .. g_{T-1}] decoder input from ground-truth gestures.
    pub fn shifted_decoder_input(&self, gestures: &Tensor<F>, g0: &[F]) -> Result<Tensor<F>> {
        if g0.len() != self.config.pose_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} g0 values", self.config.pose_dim),
                got: format!("{}", g0.len()),
                context: "shifted_decoder_input",
            });
        }
        let t = gestures.rows();
        let g0_row = Tensor::from_vec(1, self.config.pose_dim, g0.to_vec())?;
        if t == 1 {
            return Ok(g0_row);
        }
        let hist = gestures.slice_rows(0, t - 1);
        Tensor::concat_rows(&[&g0_row, &hist])
    }

    /// Teacher-forced predictions, eval mode.
    pub fn forward_teacher_forced(
        &self,
        music: &Tensor<F>,
        gestures: &Tensor<F>,
        g0: &[F],
    ) -> Result<Tensor<F>> {
        if music.rows() != gestures.rows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gesture frames", music.rows()),
                got: format!("{}", gestures.rows()),
                context: "forward_teacher_forced",
            });
        }
        let dec_in = self.shifted_decoder_input(gestures, g0)?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false);
        let m = tape.constant(music.clone());
        let d = tape.constant(dec_in);
        let out = self.teacher_forced_on_tape(&mut tape, &vars, m, d, None)?;
        Ok(tape.value(out).clone())
    }

    /// Predict the pose for frame t+1 from encoded music and the generated
    /// history [g_1 .. g_t] (g0 prepended as decoder position 0).
    pub fn decode_step(
        &self,
        enc_out: &Tensor<F>,
        g_hist: &Tensor<F>,
        g0: &[F],
    ) -> Result<Vec<F>> {
        let t = g_hist.rows();
        if t >= enc_out.rows() {
            return Err(Error::InvalidArgument(format!(
                "history of {t} frames leaves nothing to predict in a {}-frame clip",
                enc_out.rows()
            )));
        }
        let g0_row = Tensor::from_vec(1, self.config.pose_dim, g0.to_vec())?;
        let dec_in = if t == 0 {
            g0_row
        } else {
            Tensor::concat_rows(&[&g0_row, g_hist])?
        };
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false);
        let e = tape.constant(enc_out.clone());
        let d = tape.constant(dec_in);
        let out = self.decode_on_tape(&mut tape, &vars, e, d, None)?;
        let v = tape.value(out);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    /// Autoregressive generation: T music frames in, T pose frames out.
    pub fn generate_sequence(&self, music: &Tensor<F>, g0: &[F]) -> Result<Tensor<F>> {
        let t_total = music.rows();
        let enc = self.encode_music(music)?;
        let mut generated = Tensor::zeros(0, self.config.pose_dim);
        for _ in 0..t_total {
            let next = self.decode_step(&enc, &generated, g0)?;
            let row = Tensor::from_vec(1, self.config.pose_dim, next)?;
            generated = Tensor::concat_rows(&[&generated, &row])?;
        }
        Ok(generated)
    }
}
