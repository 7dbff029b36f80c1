//! The scoring head: a transformer encoder layer aggregates each visible
//! identity's face frames into one embedding, cross-attention lets those
//! embeddings query an utterance's voice embeddings, and a single affine layer
//! collapses each attended embedding to a logit. Softmax over the visible
//! identities gives the utterance-to-identity probabilities.

mod checkpoint;
mod train;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex, TensorEntry};
pub use train::{
    batch_loss, batch_loss_and_grads, compose_training_batch, learning_rate, train, training_batches, TrainConfig, TrainReport,
    TrainingBatch,
};

use crate::corpus::{Clip, Corpus, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::segmentation::HypUtterance;
use crate::kernel::{
    multi_head_attention, xavier, AttentionParams, AttentionVars, Graph, Matrix, Scalar, Var,
    LAYER_NORM_EPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_heads: usize,
    /// Zero bypasses the encoder: identities are plain frame means.
    pub n_encoder_layers: usize,
    pub ffn_hidden: usize,
    pub max_frames_per_identity: usize,
    /// Learned key/value row appended to the cross-attention keys.
    pub cross_attention_sink: bool,
    /// Start attention projections near the identity instead of Xavier.
    pub near_identity_init: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_dim(128)
    }
}

impl ModelConfig {
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            n_heads: 4,
            n_encoder_layers: 1,
            ffn_hidden: 4 * dim,
            max_frames_per_identity: 512,
            cross_attention_sink: true,
            near_identity_init: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be a positive multiple of n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.ffn_hidden == 0 || self.max_frames_per_identity == 0 {
            return Err(Error::InvalidConfig(
                "ffn_hidden and max_frames_per_identity must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub attn: AttentionParams<T>,
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub ffn_w1: Matrix<T>,
    pub ffn_b1: Matrix<T>,
    pub ffn_w2: Matrix<T>,
    pub ffn_b2: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
}

/// Every learnable tensor of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Vec<EncoderLayerParams<T>>,
    pub cross: AttentionParams<T>,
    pub cross_ln_gain: Matrix<T>,
    pub cross_ln_bias: Matrix<T>,
    pub collapse_w: Matrix<T>,
    pub collapse_b: Matrix<T>,
}

struct EncoderLayerVars {
    attn: AttentionVars,
    ln1_gain: Var,
    ln1_bias: Var,
    ffn_w1: Var,
    ffn_b1: Var,
    ffn_w2: Var,
    ffn_b2: Var,
    ln2_gain: Var,
    ln2_bias: Var,
}

/// [`ModelParams`] bound into a graph. `order` lists the handles in
/// [`ModelParams::named`] order.
pub struct ModelVars {
    encoder: Vec<EncoderLayerVars>,
    cross: AttentionVars,
    cross_ln_gain: Var,
    cross_ln_bias: Var,
    collapse_w: Var,
    collapse_b: Var,
    pub order: Vec<Var>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let ones = || Matrix::filled(1, d, T::one());
        let zeros = |n| Matrix::zeros(1, n);
        let attention = |sink: bool, rng: &mut ChaCha8Rng| {
            if cfg.near_identity_init {
                AttentionParams::init_near_identity(d, sink, 0.1, rng)
            } else {
                AttentionParams::init(d, sink, rng)
            }
        };
        let encoder = (0..cfg.n_encoder_layers)
            .map(|_| EncoderLayerParams {
                attn: attention(false, &mut rng),
                ln1_gain: ones(),
                ln1_bias: zeros(d),
                ffn_w1: xavier(d, cfg.ffn_hidden).sample_matrix(&mut rng),
                ffn_b1: zeros(cfg.ffn_hidden),
                ffn_w2: xavier(cfg.ffn_hidden, d).sample_matrix(&mut rng),
                ffn_b2: zeros(d),
                ln2_gain: ones(),
                ln2_bias: zeros(d),
            })
            .collect();
        Ok(Self {
            encoder,
            cross: attention(cfg.cross_attention_sink, &mut rng),
            cross_ln_gain: ones(),
            cross_ln_bias: zeros(d),
            collapse_w: xavier(d, 1).sample_matrix(&mut rng),
            collapse_b: Matrix::zeros(1, 1),
        })
    }

    pub fn dim(&self) -> usize {
        self.cross.width()
    }

    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            for (n, m) in l.attn.named() {
                out.push((format!("encoder.{i}.attn.{n}"), m));
            }
            for (n, m) in [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("ffn_w1", &l.ffn_w1),
                ("ffn_b1", &l.ffn_b1),
                ("ffn_w2", &l.ffn_w2),
                ("ffn_b2", &l.ffn_b2),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
            ] {
                out.push((format!("encoder.{i}.{n}"), m));
            }
        }
        for (n, m) in self.cross.named() {
            out.push((format!("cross.{n}"), m));
        }
        out.push(("cross.ln_gain".into(), &self.cross_ln_gain));
        out.push(("cross.ln_bias".into(), &self.cross_ln_bias));
        out.push(("collapse.w".into(), &self.collapse_w));
        out.push(("collapse.b".into(), &self.collapse_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter_mut().enumerate() {
            for (n, m) in l.attn.named_mut() {
                out.push((format!("encoder.{i}.attn.{n}"), m));
            }
            for (n, m) in [
                ("ln1_gain", &mut l.ln1_gain),
                ("ln1_bias", &mut l.ln1_bias),
                ("ffn_w1", &mut l.ffn_w1),
                ("ffn_b1", &mut l.ffn_b1),
                ("ffn_w2", &mut l.ffn_w2),
                ("ffn_b2", &mut l.ffn_b2),
                ("ln2_gain", &mut l.ln2_gain),
                ("ln2_bias", &mut l.ln2_bias),
            ] {
                out.push((format!("encoder.{i}.{n}"), m));
            }
        }
        for (n, m) in self.cross.named_mut() {
            out.push((format!("cross.{n}"), m));
        }
        out.push(("cross.ln_gain".into(), &mut self.cross_ln_gain));
        out.push(("cross.ln_bias".into(), &mut self.cross_ln_bias));
        out.push(("collapse.w".into(), &mut self.collapse_w));
        out.push(("collapse.b".into(), &mut self.collapse_b));
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayerParams {
                    attn: l.attn.cast(),
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    ffn_w1: l.ffn_w1.cast(),
                    ffn_b1: l.ffn_b1.cast(),
                    ffn_w2: l.ffn_w2.cast(),
                    ffn_b2: l.ffn_b2.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                })
                .collect(),
            cross: self.cross.cast(),
            cross_ln_gain: self.cross_ln_gain.cast(),
            cross_ln_bias: self.cross_ln_bias.cast(),
            collapse_w: self.collapse_w.cast(),
            collapse_b: self.collapse_b.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<ModelVars> {
        let mut order = Vec::new();
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for l in &self.encoder {
            let attn = l.attn.bind(g, &mut order)?;
            let mut p = |m: &Matrix<T>| -> Result<Var> {
                let v = g.param(m.clone())?;
                order.push(v);
                Ok(v)
            };
            encoder.push(EncoderLayerVars {
                attn,
                ln1_gain: p(&l.ln1_gain)?,
                ln1_bias: p(&l.ln1_bias)?,
                ffn_w1: p(&l.ffn_w1)?,
                ffn_b1: p(&l.ffn_b1)?,
                ffn_w2: p(&l.ffn_w2)?,
                ffn_b2: p(&l.ffn_b2)?,
                ln2_gain: p(&l.ln2_gain)?,
                ln2_bias: p(&l.ln2_bias)?,
            });
        }
        let cross = self.cross.bind(g, &mut order)?;
        let mut p = |m: &Matrix<T>| -> Result<Var> {
            let v = g.param(m.clone())?;
            order.push(v);
            Ok(v)
        };
        Ok(ModelVars {
            encoder,
            cross,
            cross_ln_gain: p(&self.cross_ln_gain)?,
            cross_ln_bias: p(&self.cross_ln_bias)?,
            collapse_w: p(&self.collapse_w)?,
            collapse_b: p(&self.collapse_b)?,
            order,
        })
    }
}

/// Exact number of learnable scalars.
pub fn count_params<T: Scalar>(params: &ModelParams<T>) -> usize {
    params.named().iter().map(|(_, m)| m.len()).sum()
}

/// One post-norm encoder layer over the rows of `x`, no positional encoding.
fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    l: &EncoderLayerVars,
    x: Var,
    n_heads: usize,
) -> Result<Var> {
    let eps = T::of(LAYER_NORM_EPS);
    let attended = multi_head_attention(g, x, x, &l.attn, n_heads)?;
    let res = g.add(x, attended)?;
    let h = g.layer_norm(res, l.ln1_gain, l.ln1_bias, eps)?;
    let f = g.affine(h, l.ffn_w1, l.ffn_b1)?;
    let f = g.relu(f)?;
    let f = g.affine(f, l.ffn_w2, l.ffn_b2)?;
    let res = g.add(h, f)?;
    g.layer_norm(res, l.ln2_gain, l.ln2_bias, eps)
}

/// Tape version of [`encode_identity`]: `frames: T×D` → `1×D`.
pub fn encode_identity_on<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    frames: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    if g.value(frames).rows() == 0 {
        return Err(Error::Empty("identity has no frames".into()));
    }
    let mut x = frames;
    for l in &vars.encoder {
        x = encoder_layer(g, l, x, cfg.n_heads)?;
    }
    g.mean_rows(x)
}

/// Tape version of [`score_utterance`]: `identities: N×D`, `segments: M×D`
/// → logits `1×N`.
pub fn score_logits_on<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    identities: Var,
    segments: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let (n, d) = g.value(identities).shape();
    let (m, du) = g.value(segments).shape();
    if n == 0 || m == 0 {
        return Err(Error::Empty(format!("{n} identities, {m} segments")));
    }
    if d != du || d != g.value(vars.cross_ln_gain).cols() {
        return Err(Error::Shape(format!(
            "identity width {d}, segment width {du}, model width {}",
            g.value(vars.cross_ln_gain).cols()
        )));
    }
    let attended = multi_head_attention(g, identities, segments, &vars.cross, cfg.n_heads)?;
    let res = g.add(identities, attended)?;
    let h = g.layer_norm(res, vars.cross_ln_gain, vars.cross_ln_bias, T::of(LAYER_NORM_EPS))?;
    let logits = g.affine(h, vars.collapse_w, vars.collapse_b)?;
    g.transpose(logits)
}

/// Aggregates one identity's frames (`T×D`, all of its tracks in the clip)
/// into a single embedding.
pub fn encode_identity<T: Scalar>(
    frames: &Matrix<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g)?;
    let x = g.input(frames.clone())?;
    let e = encode_identity_on(&mut g, &vars, x, cfg)?;
    Ok(g.value(e).data().to_vec())
}

/// Probabilities that each visible identity spoke one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub clip_id: String,
    pub utt_id: String,
    pub identity_ids: Vec<String>,
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Logits and softmax probabilities over the rows of `identities`.
pub fn score_utterance<T: Scalar>(
    segments: &Matrix<T>,
    identities: &Matrix<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g)?;
    let q = g.input(identities.clone())?;
    let kv = g.input(segments.clone())?;
    let logits = score_logits_on(&mut g, &vars, q, kv, cfg)?;
    let logits: Vec<f64> = g.value(logits).data().iter().map(|v| v.as_f64()).collect();
    let probs = softmax_f64(&logits);
    Ok((logits, probs))
}

/// Softmax in double precision, so the simplex holds to ~1e-15 regardless of
/// the compute precision of the logits.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn to_matrix(m: &EmbeddingMatrix) -> Matrix<f32> {
    Matrix::from_vec(m.rows(), m.cols(), m.data().to_vec()).expect("sized")
}

/// Stable 64-bit FNV-1a, used to derive per-(clip, identity) sampling seeds.
pub(crate) fn fnv1a(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// All frames of `identity` in `clip`, uniformly subsampled (seeded, order
/// preserved) to at most `cfg.max_frames_per_identity` rows.
pub fn identity_input(clip: &Clip, identity: &str, cfg: &ModelConfig) -> Matrix<f32> {
    let frames = clip.identity_frames(identity);
    let cap = cfg.max_frames_per_identity;
    if frames.rows() <= cap {
        return to_matrix(&frames);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(&[&clip.id, identity]));
    let mut keep = rand::seq::index::sample(&mut rng, frames.rows(), cap).into_vec();
    keep.sort_unstable();
    let mut data = Vec::with_capacity(cap * frames.cols());
    for r in keep {
        data.extend_from_slice(frames.row(r));
    }
    Matrix::from_vec(cap, frames.cols(), data).expect("sized")
}

/// Frozen head plus per-clip identity embeddings, for inference.
pub struct ClipScorer<'a> {
    params: &'a ModelParams<f32>,
    cfg: &'a ModelConfig,
    clip_id: String,
    identity_ids: Vec<String>,
    identities: Matrix<f32>,
}

impl<'a> ClipScorer<'a> {
    /// Encodes every visible identity of `clip`. Returns `None` for clips with
    /// no face tracks.
    pub fn new(clip: &Clip, params: &'a ModelParams<f32>, cfg: &'a ModelConfig) -> Result<Option<Self>> {
        let ids = clip.visible_identities();
        if ids.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(ids.len());
        for id in &ids {
            rows.push(encode_identity(&identity_input(clip, id, cfg), params, cfg)?);
        }
        Ok(Some(Self {
            params,
            cfg,
            clip_id: clip.id.clone(),
            identity_ids: ids.into_iter().map(String::from).collect(),
            identities: Matrix::from_rows(&rows)?,
        }))
    }

    pub fn identity_ids(&self) -> &[String] {
        &self.identity_ids
    }

    pub fn identity_embeddings(&self) -> &Matrix<f32> {
        &self.identities
    }

    pub fn score(&self, utt_id: &str, segments: &EmbeddingMatrix) -> Result<ScoreResult> {
        let (logits, probabilities) =
            score_utterance(&to_matrix(segments), &self.identities, self.params, self.cfg)?;
        Ok(ScoreResult {
            clip_id: self.clip_id.clone(),
            utt_id: utt_id.to_string(),
            identity_ids: self.identity_ids.clone(),
            probabilities,
            logits,
        })
    }
}

/// Scores every hypothesis utterance of `clip` against its visible identities.
/// Empty for clips without face tracks.
pub fn score_hypotheses(
    clip: &Clip,
    hyps: &[HypUtterance],
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<Vec<ScoreResult>> {
    let Some(scorer) = ClipScorer::new(clip, params, cfg)? else {
        return Ok(Vec::new());
    };
    hyps.iter()
        .map(|h| scorer.score(&h.utt_id, &h.embedding_matrix()?))
        .collect()
}

/// [`score_hypotheses`] over every clip with hypotheses, keyed by clip id.
pub fn score_corpus(
    corpus: &Corpus,
    hyps: &HashMap<String, Vec<HypUtterance>>,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<HashMap<String, Vec<ScoreResult>>> {
    let mut out = HashMap::new();
    for clip in &corpus.clips {
        if let Some(h) = hyps.get(&clip.id) {
            out.insert(clip.id.clone(), score_hypotheses(clip, h, params, cfg)?);
        }
    }
    Ok(out)
}
