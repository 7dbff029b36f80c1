use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    encode_identity_on, identity_input, score_logits_on, to_matrix, ModelConfig, ModelParams,
    ModelVars,
};
use crate::corpus::{Clip, Corpus};
use crate::error::{Error, Result};
use crate::kernel::{adam_step, AdamState, Graph, Matrix, Scalar, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Batches whose clip shows a single identity carry no signal through a
    /// one-way softmax.
    pub skip_single_identity: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            lr: 1e-5,
            lr_decay: 0.2,
            decay_every: 5,
            skip_single_identity: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.decay_every == 0 {
            return Err(Error::InvalidConfig(
                "lr_decay must lie in (0, 1] and decay_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Step schedule: `lr · decay^⌊epoch / every⌋`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

/// All utterances of one identity against every visible identity's frames.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub clip_id: String,
    pub speaker_id: String,
    pub identity_ids: Vec<String>,
    pub identity_frames: Vec<Matrix<f32>>,
    pub utterances: Vec<Matrix<f32>>,
    /// Position of `speaker_id` in `identity_ids`.
    pub target: usize,
}

/// Builds the batch for `identity`. `Ok(None)` when the identity has no face
/// track in the clip: it is not a candidate, so its utterances train nothing.
pub fn compose_training_batch(
    clip: &Clip,
    identity: &str,
    cfg: &ModelConfig,
) -> Result<Option<TrainingBatch>> {
    let utterances: Vec<Matrix<f32>> = clip
        .utterances
        .iter()
        .filter(|u| u.speaker_id == identity)
        .map(|u| to_matrix(&u.segment_embeddings.matrix))
        .collect();
    if utterances.is_empty() {
        return Err(Error::Empty(format!(
            "identity {identity} has no utterances in clip {}",
            clip.id
        )));
    }
    let ids = clip.visible_identities();
    let Some(target) = ids.iter().position(|id| *id == identity) else {
        debug!("clip {}: {identity} is off-screen, skipping", clip.id);
        return Ok(None);
    };
    Ok(Some(TrainingBatch {
        clip_id: clip.id.clone(),
        speaker_id: identity.to_string(),
        identity_frames: ids.iter().map(|id| identity_input(clip, id, cfg)).collect(),
        identity_ids: ids.into_iter().map(String::from).collect(),
        utterances,
        target,
    }))
}

/// Every usable batch of the corpus in clip order, then speaker first-utterance order.
pub fn training_batches(corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<TrainingBatch>> {
    let mut out = Vec::new();
    for clip in &corpus.clips {
        let mut speakers: Vec<&str> = Vec::new();
        for u in clip.utterances.iter().filter(|u| u.has_known_speaker()) {
            if !speakers.contains(&u.speaker_id.as_str()) {
                speakers.push(&u.speaker_id);
            }
        }
        for s in speakers {
            if let Some(b) = compose_training_batch(clip, s, &cfg.model)? {
                if cfg.skip_single_identity && b.identity_ids.len() < 2 {
                    debug!("clip {}: single visible identity, skipping", clip.id);
                    continue;
                }
                out.push(b);
            }
        }
    }
    Ok(out)
}

fn build_batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    batch: &TrainingBatch,
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut embs = Vec::with_capacity(batch.identity_frames.len());
    for frames in &batch.identity_frames {
        let x = g.input(frames.cast())?;
        embs.push(encode_identity_on(g, vars, x, cfg)?);
    }
    let q = g.concat_rows(&embs)?;
    let mut total = None;
    for u in &batch.utterances {
        let kv = g.input(u.cast())?;
        let logits = score_logits_on(g, vars, q, kv, cfg)?;
        let ce = g.cross_entropy(logits, &[batch.target])?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    let total = total.ok_or_else(|| Error::Empty("batch without utterances".into()))?;
    g.scale(total, T::of(1.0 / batch.utterances.len() as f64))
}

/// Mean cross-entropy of the batch.
pub fn batch_loss<T: Scalar>(params: &ModelParams<T>, batch: &TrainingBatch, cfg: &ModelConfig) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g)?;
    let loss = build_batch_loss(&mut g, &vars, batch, cfg)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// Mean cross-entropy of the batch and its gradient, in `named()` order.
pub fn batch_loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    batch: &TrainingBatch,
    cfg: &ModelConfig,
) -> Result<(f64, Vec<Matrix<T>>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g)?;
    let loss = build_batch_loss(&mut g, &vars, batch, cfg)?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    let named = params.named();
    let out = vars
        .order
        .iter()
        .zip(&named)
        .map(|(v, (_, m))| grads.get_or_zeros(*v, m))
        .collect();
    Ok((value, out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Mean batch loss of the initial parameters, before any update.
    pub initial_loss: f64,
    pub batches_per_epoch: usize,
}

/// Trains the head with Adam on cross-entropy over visible identities.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainReport)> {
    cfg.validate()?;
    if cfg.model.dim != corpus.embedding_dim {
        return Err(Error::InvalidConfig(format!(
            "model dim {} but corpus embeddings are {}-dimensional",
            cfg.model.dim, corpus.embedding_dim
        )));
    }
    let batches = training_batches(corpus, cfg)?;
    if batches.is_empty() {
        return Err(Error::Empty("no training batches".into()));
    }
    let mut params = ModelParams::<f32>::init(&cfg.model)?;
    let mut state = AdamState::new(params.named().into_iter().map(|(_, m)| m));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut initial = 0.0;
    for b in &batches {
        initial += batch_loss(&params, b, &cfg.model)?;
    }
    let initial_loss = initial / batches.len() as f64;

    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let (loss, grads) = batch_loss_and_grads(&params, &batches[i], &cfg.model)?;
            sum += loss;
            let mut slots: Vec<&mut Matrix<f32>> =
                params.named_mut().into_iter().map(|(_, m)| m).collect();
            adam_step(&mut slots, &grads, &mut state, lr)?;
        }
        let mean = sum / batches.len() as f64;
        info!("epoch {epoch}: lr {lr:.3e}, loss {mean:.5}");
        loss_curve.push(mean);
    }
    Ok((
        params,
        TrainReport {
            loss_curve,
            initial_loss,
            batches_per_epoch: batches.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_by_fifth_every_five_epochs() {
        let cfg = TrainConfig::default();
        for e in 0..5 {
            assert_eq!(learning_rate(&cfg, e), 1e-5);
        }
        assert!((learning_rate(&cfg, 5) - 2e-6).abs() < 1e-20);
        assert!((learning_rate(&cfg, 9) - 2e-6).abs() < 1e-20);
        assert!((learning_rate(&cfg, 10) - 4e-7).abs() < 1e-20);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.model.n_heads = 3;
        assert!(cfg.validate().is_err());
    }
}
