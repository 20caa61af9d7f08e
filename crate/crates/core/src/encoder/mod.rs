//! Per-modality embedding networks.
//!
//! The time-series encoder follows the attend-and-diagnose layout: input
//! projection, sinusoidal positional encoding, a stack of post-norm
//! self-attention blocks, dense interpolation to a fixed number of summary
//! vectors, and a linear projection to a unit-norm embedding.

mod text;

pub use text::{EmbeddingTable, TextEmbedder, TextEmbedderSpec, TextInput, TextMode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Segment;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Number of dense-interpolation summary vectors (M).
    pub interpolation_factor: usize,
    pub embedding_dim: usize,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

fn default_true() -> bool {
    true
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            model_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            ffn_dim: 128,
            interpolation_factor: 4,
            embedding_dim: 64,
            positional_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("interpolation_factor", self.interpolation_factor),
            ("embedding_dim", self.embedding_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("encoder {name} must be >= 1")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.positional_encoding && self.model_dim % 2 != 0 {
            return Err(Error::invalid("positional encoding needs an even model_dim"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HeadLayout {
    query: usize,
    key: usize,
    value: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    heads: Vec<HeadLayout>,
    attn_out: usize,
    attn_out_bias: usize,
    ffn_in: usize,
    ffn_in_bias: usize,
    ffn_out: usize,
    ffn_out_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    input: usize,
    input_bias: usize,
    blocks: Vec<BlockLayout>,
    output: usize,
    output_bias: usize,
}

/// Learnable tensors of one time-series encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    params: ParamSet,
    layout: Layout,
}

impl EncoderParams {
    /// Glorot-uniform weights and zero biases from a seeded generator.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = config.model_dim;
        let hd = config.head_dim();
        let bias = |n: usize| Tensor::zeros(&[1, n]);

        let input = p.push("input.weight", Tensor::glorot(config.input_dim, d, &mut rng));
        let input_bias = p.push("input.bias", bias(d));
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let heads = (0..config.num_heads)
                .map(|h| HeadLayout {
                    query: p.push(format!("block{b}.head{h}.query"), Tensor::glorot(d, hd, &mut rng)),
                    key: p.push(format!("block{b}.head{h}.key"), Tensor::glorot(d, hd, &mut rng)),
                    value: p.push(format!("block{b}.head{h}.value"), Tensor::glorot(d, hd, &mut rng)),
                })
                .collect();
            blocks.push(BlockLayout {
                heads,
                attn_out: p.push(format!("block{b}.attn_out.weight"), Tensor::glorot(d, d, &mut rng)),
                attn_out_bias: p.push(format!("block{b}.attn_out.bias"), bias(d)),
                ffn_in: p.push(
                    format!("block{b}.ffn_in.weight"),
                    Tensor::glorot(d, config.ffn_dim, &mut rng),
                ),
                ffn_in_bias: p.push(format!("block{b}.ffn_in.bias"), bias(config.ffn_dim)),
                ffn_out: p.push(
                    format!("block{b}.ffn_out.weight"),
                    Tensor::glorot(config.ffn_dim, d, &mut rng),
                ),
                ffn_out_bias: p.push(format!("block{b}.ffn_out.bias"), bias(d)),
            });
        }
        let flat = config.interpolation_factor * d;
        let output = p.push("output.weight", Tensor::glorot(flat, config.embedding_dim, &mut rng));
        let output_bias = p.push("output.bias", bias(config.embedding_dim));

        Ok(Self {
            config,
            params: p,
            layout: Layout {
                input,
                input_bias,
                blocks,
                output,
                output_bias,
            },
        })
    }

    /// Rebuilds parameters from named tensors, e.g. a checkpoint. Names and
    /// shapes must match what `init` produces for `config`.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut out = Self::init(config, 0)?;
        if tensors.len() != out.params.len() {
            return Err(Error::Checkpoint(format!(
                "encoder expects {} tensors, found {}",
                out.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != out.params.name(i) {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {:?}, found {name:?}",
                    out.params.name(i)
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name:?} has non-finite entries")));
            }
            if !out.params.replace(i, t) {
                return Err(Error::Checkpoint(format!("tensor {name:?} has the wrong shape")));
            }
        }
        Ok(out)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn register(&self, tape: &mut Tape, offset: ParamId) -> Vec<Var> {
        self.params.register(tape, offset)
    }

    /// Records one block's multi-head self-attention with residual
    /// connection and layer normalisation. Returns the block output and the
    /// per-head attention weight matrices (`T × T`, rows sum to one).
    pub fn attention(&self, tape: &mut Tape, vars: &[Var], block: usize, x: Var) -> Result<(Var, Vec<Var>)> {
        let layout = self
            .layout
            .blocks
            .get(block)
            .ok_or_else(|| Error::invalid(format!("no attention block {block}")))?;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut outputs = Vec::with_capacity(layout.heads.len());
        let mut weights = Vec::with_capacity(layout.heads.len());
        for head in &layout.heads {
            let q = tape.matmul(x, vars[head.query])?;
            let k = tape.matmul(x, vars[head.key])?;
            let v = tape.matmul(x, vars[head.value])?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.softmax(scores)?;
            outputs.push(tape.matmul(a, v)?);
            weights.push(a);
        }
        let heads = tape.concat(&outputs)?;
        let projected = tape.matmul(heads, vars[layout.attn_out])?;
        let projected = tape.add_bias(projected, vars[layout.attn_out_bias])?;
        let residual = tape.add(x, projected)?;
        Ok((tape.layer_norm(residual)?, weights))
    }

    fn feed_forward(&self, tape: &mut Tape, vars: &[Var], block: usize, x: Var) -> Result<Var> {
        let layout = &self.layout.blocks[block];
        let h = tape.matmul(x, vars[layout.ffn_in])?;
        let h = tape.add_bias(h, vars[layout.ffn_in_bias])?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, vars[layout.ffn_out])?;
        let h = tape.add_bias(h, vars[layout.ffn_out_bias])?;
        let residual = tape.add(x, h)?;
        tape.layer_norm(residual)
    }

    /// Input projection, positional encoding and the attention stack;
    /// returns the `T × model_dim` sequence before interpolation.
    pub fn encode_sequence(&self, tape: &mut Tape, vars: &[Var], frames: &Tensor) -> Result<Var> {
        let (steps, dim) = frames.dims2("encode_segment")?;
        if dim != self.config.input_dim {
            return Err(Error::Dimension {
                expected: self.config.input_dim,
                found: dim,
            });
        }
        let x = tape.constant(frames.clone());
        let h = tape.matmul(x, vars[self.layout.input])?;
        let mut h = tape.add_bias(h, vars[self.layout.input_bias])?;
        if self.config.positional_encoding {
            let pe = tape.constant(positional_encoding(steps, self.config.model_dim)?);
            h = tape.add(h, pe)?;
        }
        for b in 0..self.layout.blocks.len() {
            h = self.attention(tape, vars, b, h)?.0;
            h = self.feed_forward(tape, vars, b, h)?;
        }
        Ok(h)
    }

    /// Full encoder on the tape; returns a `1 × embedding_dim` unit row.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], frames: &Tensor) -> Result<Var> {
        let h = self.encode_sequence(tape, vars, frames)?;
        let steps = tape.value(h).rows();
        let m = self.config.interpolation_factor;
        let w = tape.constant(interpolation_weights(steps, m)?);
        let u = tape.matmul(w, h)?;
        let flat = tape.reshape(u, vec![1, m * self.config.model_dim])?;
        let e = tape.matmul(flat, vars[self.layout.output])?;
        let e = tape.add_bias(e, vars[self.layout.output_bias])?;
        tape.l2_normalize(e)
    }

    /// Embeds one segment with frozen parameters.
    pub fn encode_segment(&self, segment: &Segment) -> Result<Vec<f64>> {
        self.encode_frames(&segment.frames)
    }

    pub fn encode_frames(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, 0);
        let e = self.forward(&mut tape, &vars, frames)?;
        Ok(tape.value(e).data().to_vec())
    }
}

/// Sinusoidal positional encoding, `steps × dim`:
/// `(t, 2i) = sin(t / 10000^(2i/dim))`, `(t, 2i+1) = cos(t / 10000^(2i/dim))`.
pub fn positional_encoding(steps: usize, dim: usize) -> Result<Tensor> {
    if steps == 0 || dim == 0 {
        return Err(Error::invalid("positional encoding needs steps >= 1 and dim >= 1"));
    }
    if dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "positional encoding dim must be even, got {dim}"
        )));
    }
    let mut data = vec![0.0; steps * dim];
    for t in 0..steps {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = t as f64 / freq;
            data[t * dim + 2 * i] = angle.sin();
            data[t * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![steps, dim], data)
}

/// Dense interpolation weights `M × T`:
/// `w(m, t) = (1 - |s_t - m| / M)^2` with `s_t = M·t/T`, both 1-indexed.
pub fn interpolation_weights(steps: usize, factor: usize) -> Result<Tensor> {
    if steps == 0 || factor == 0 {
        return Err(Error::invalid("dense interpolation needs T >= 1 and M >= 1"));
    }
    let (tf, mf) = (steps as f64, factor as f64);
    let mut data = Vec::with_capacity(factor * steps);
    for m in 1..=factor {
        for t in 1..=steps {
            let s = mf * t as f64 / tf;
            let w = 1.0 - (s - m as f64).abs() / mf;
            data.push(w * w);
        }
    }
    Tensor::new(vec![factor, steps], data)
}

/// `u_m = Σ_t w(m, t) · h_t` for `h: T × d`.
pub fn dense_interpolation(h: &Tensor, factor: usize) -> Result<Tensor> {
    let (steps, _) = h.dims2("dense_interpolation")?;
    let mut tape = Tape::new();
    let w = tape.constant(interpolation_weights(steps, factor)?);
    let hv = tape.constant(h.clone());
    let u = tape.matmul(w, hv)?;
    Ok(tape.value(u).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;
    use rand::Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            model_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            ffn_dim: 16,
            interpolation_factor: 2,
            embedding_dim: 5,
            positional_encoding: true,
        }
    }

    fn random_frames(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.embedding_dim = 0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn positional_encoding_first_row_alternates() {
        let pe = positional_encoding(3, 6).unwrap();
        assert_eq!(pe.row_slice(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_encoding_direct_value() {
        let pe = positional_encoding(3, 4).unwrap();
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 0) - 0.84147).abs() < 1e-5);
        // (1, 2): sin(1 / 10000^(2/4)) = sin(0.01)
        assert!((pe.get(1, 2) - 0.01f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn positional_encoding_rejects_odd_dim() {
        assert!(positional_encoding(2, 5).is_err());
    }

    #[test]
    fn interpolation_single_step_is_identity() {
        let h = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let u = dense_interpolation(&h, 1).unwrap();
        assert_eq!(u.data(), h.data());
    }

    #[test]
    fn interpolation_two_by_two_by_hand() {
        // s_1 = 1, s_2 = 2, M = 2:
        // w(1,1) = 1, w(1,2) = (1 - 1/2)^2 = 0.25
        // w(2,1) = 0.25, w(2,2) = 1
        let h = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let u = dense_interpolation(&h, 2).unwrap();
        assert_eq!(u.data(), &[1.0, 0.25, 0.25, 1.0]);
    }

    #[test]
    fn interpolation_of_constant_rows_is_positive_multiple() {
        let row = [0.3, -0.7, 1.1];
        let h = Tensor::from_rows(&vec![row.to_vec(); 5]).unwrap();
        let u = dense_interpolation(&h, 3).unwrap();
        for m in 0..3 {
            let k = u.get(m, 0) / row[0];
            assert!(k > 0.0);
            for j in 0..3 {
                assert!((u.get(m, j) - k * row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_attention_weight_is_one() {
        let p = EncoderParams::init(tiny(), 1).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, 0);
        let x = tape.constant(random_frames(1, 8, 2));
        let (_, weights) = p.attention(&mut tape, &vars, 0, x).unwrap();
        for w in weights {
            assert_eq!(tape.value(w).data(), &[1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = EncoderParams::init(tiny(), 4).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, 0);
        let x = tape.constant(random_frames(7, 8, 5));
        let (out, weights) = p.attention(&mut tape, &vars, 0, x).unwrap();
        assert_eq!(tape.value(out).shape(), &[7, 8]);
        for w in weights {
            for r in 0..7 {
                let s: f64 = tape.value(w).row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let p = EncoderParams::init(tiny(), 9).unwrap();
        for seed in 0..10 {
            let f = random_frames(6, 3, seed);
            let e = p.encode_frames(&f).unwrap();
            assert_eq!(e.len(), 5);
            assert!((norm(&e) - 1.0).abs() < 1e-9);
            assert_eq!(e, p.encode_frames(&f).unwrap());
        }
    }

    #[test]
    fn dimension_mismatch_and_empty() {
        let p = EncoderParams::init(tiny(), 9).unwrap();
        let f = random_frames(4, 4, 0);
        assert!(matches!(p.encode_frames(&f), Err(Error::Dimension { .. })));
    }

    #[test]
    fn from_tensors_round_trip() {
        let p = EncoderParams::init(tiny(), 11).unwrap();
        let named: Vec<_> = p.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let q = EncoderParams::from_tensors(tiny(), named.clone()).unwrap();
        assert_eq!(p, q);
        let mut bad = named;
        bad.pop();
        assert!(EncoderParams::from_tensors(tiny(), bad).is_err());
    }
}
