//! Late-fusion network and the deployable model bundle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::data::PreprocessConfig;
use crate::encoder::{EncoderParams, TextEmbedderSpec};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::training::TrainConfig;

/// `concat(video, audio, text) → tanh hidden → embedding`, then L2
/// normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    params: ParamSet,
}

impl FusionParams {
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::invalid("fusion dimensions must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push("fusion.hidden.weight", Tensor::glorot(input_dim, hidden_dim, &mut rng));
        params.push("fusion.hidden.bias", Tensor::zeros(&[1, hidden_dim]));
        params.push("fusion.output.weight", Tensor::glorot(hidden_dim, output_dim, &mut rng));
        params.push("fusion.output.bias", Tensor::zeros(&[1, output_dim]));
        Ok(Self {
            input_dim,
            hidden_dim,
            output_dim,
            params,
        })
    }

    pub fn from_tensors(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut out = Self::init(input_dim, hidden_dim, output_dim, 0)?;
        if tensors.len() != out.params.len() {
            return Err(Error::Checkpoint(format!(
                "fusion expects {} tensors, found {}",
                out.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != out.params.name(i) || !t.is_finite() || !out.params.replace(i, t) {
                return Err(Error::Checkpoint(format!("bad fusion tensor {name:?}")));
            }
        }
        Ok(out)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.input_dim, self.hidden_dim, self.output_dim)
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

    /// `x: 1 × input_dim` → unit `1 × output_dim`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add_bias(h, vars[1])?;
        let h = tape.tanh(h)?;
        let o = tape.matmul(h, vars[2])?;
        let o = tape.add_bias(o, vars[3])?;
        tape.l2_normalize(o)
    }
}

/// Preprocessed model inputs of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInputs {
    pub session_id: String,
    pub label: Option<Label>,
    /// Pooled visual segments, each `T' × visual_dim`.
    pub visual: Vec<Tensor>,
    pub audio: Vec<Tensor>,
    /// Unit-norm text embedding.
    pub text: Vec<f64>,
    /// Cleaned participant transcript, for exemplar display.
    pub excerpt: String,
}

impl SessionInputs {
    pub fn is_complete(&self) -> bool {
        !self.visual.is_empty() && !self.audio.is_empty() && !self.text.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub fusion_epochs: usize,
    pub final_loss: Option<f64>,
    /// Sessions dropped from fusion training for a missing modality.
    pub excluded_sessions: usize,
}

/// Everything needed to embed a session: both time-series encoders, the
/// fusion network and the preprocessing/text settings they were trained
/// with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub version: u64,
    pub visual: EncoderParams,
    pub audio: EncoderParams,
    pub fusion: FusionParams,
    pub text: TextEmbedderSpec,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub metadata: TrainMetadata,
}

/// Parameter id offsets of the three trainable parts on a shared tape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Offsets {
    pub audio: ParamId,
    pub fusion: ParamId,
}

impl ModelBundle {
    /// Wraps (pretrained) encoders with a freshly initialised fusion network.
    pub fn new(
        visual: EncoderParams,
        audio: EncoderParams,
        text: TextEmbedderSpec,
        preprocess: PreprocessConfig,
        train: TrainConfig,
        fusion_hidden: usize,
    ) -> Result<Self> {
        let e = visual.config().embedding_dim;
        if audio.config().embedding_dim != e {
            return Err(Error::invalid("visual and audio embedding dims differ"));
        }
        let fusion = FusionParams::init(2 * e + text.dimension, fusion_hidden, e, train.seed ^ 0xf05e)?;
        Ok(Self {
            version: 1,
            visual,
            audio,
            fusion,
            text,
            preprocess,
            train,
            metadata: TrainMetadata {
                seed: train.seed,
                ..TrainMetadata::default()
            },
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.fusion.dims().2
    }

    pub(crate) fn offsets(&self) -> Offsets {
        let audio = self.visual.params().len();
        Offsets {
            audio,
            fusion: audio + self.audio.params().len(),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        let o = self.offsets();
        let mut vars = self.visual.register(tape, 0);
        vars.extend(self.audio.register(tape, o.audio));
        vars.extend(self.fusion.register(tape, o.fusion));
        vars
    }

    pub fn params_with_ids(&mut self) -> Vec<(ParamId, &mut Tensor)> {
        let o = self.offsets();
        let mut out = self.visual.params_mut().with_ids(0);
        out.extend(self.audio.params_mut().with_ids(o.audio));
        out.extend(self.fusion.params_mut().with_ids(o.fusion));
        out
    }

    /// Iterates every parameter tensor with its qualified name.
    pub fn named_tensors(&self) -> impl Iterator<Item = (String, &Tensor)> {
        let v = self.visual.params().iter().map(|(n, t)| (format!("visual.{n}"), t));
        let a = self.audio.params().iter().map(|(n, t)| (format!("audio.{n}"), t));
        let f = self.fusion.params().iter().map(|(n, t)| (n.to_string(), t));
        v.chain(a).chain(f)
    }

    fn modality_mean(encoder: &EncoderParams, tape: &mut Tape, vars: &[Var], segments: &[Tensor]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for s in segments {
            let e = encoder.forward(tape, vars, s)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, e)?,
                None => e,
            });
        }
        let acc = acc.ok_or_else(|| Error::invalid("no segments for modality"))?;
        let mean = tape.scale(acc, 1.0 / segments.len() as f64)?;
        tape.l2_normalize(mean)
    }

    /// Records the full session forward pass and returns the unit fused
    /// embedding (`1 × embedding_dim`).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], session: &SessionInputs) -> Result<Var> {
        if !session.is_complete() {
            return Err(Error::invalid(format!(
                "session {} is missing a modality",
                session.session_id
            )));
        }
        if session.text.len() != self.text.dimension {
            return Err(Error::Dimension {
                expected: self.text.dimension,
                found: session.text.len(),
            });
        }
        let o = self.offsets();
        let v = Self::modality_mean(&self.visual, tape, &vars[..o.audio], &session.visual)?;
        let a = Self::modality_mean(&self.audio, tape, &vars[o.audio..o.fusion], &session.audio)?;
        let t = tape.constant(Tensor::row(session.text.clone())?);
        let x = tape.concat(&[v, a, t])?;
        self.fusion.forward(tape, &vars[o.fusion..], x)
    }

    /// Fused unit embedding of a session with frozen parameters.
    pub fn embed_session(&self, session: &SessionInputs) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let e = self.forward(&mut tape, &vars, session)?;
        Ok(tape.value(e).data().to_vec())
    }
}
