//! Alignment of frozen face and voice embedding spaces with two learnable
//! affine projections, trained on k-means pseudo-labels with the
//! multi-similarity loss.
//!
//! Each round clusters the projected face frames, lets every track and then
//! every identity take the majority cluster of its frames, hands that label
//! to the identity's utterances, and trains both projections on mixed
//! face/voice batches.

mod kmeans;
mod ms_loss;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::info;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, ClusterAssignment};
pub use ms_loss::{Mined, MsParams, MultiSimilarityLoss};

use crate::checkpoint::{fill_named, read_tensor_set, write_tensor_set, CheckpointIndex};
use crate::corpus::{Corpus, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::kernel::{adam_step, gaussian, xavier, AdamState, Graph, Matrix, Scalar, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<T> {
    pub face_w: Matrix<T>,
    pub face_b: Matrix<T>,
    pub voice_w: Matrix<T>,
    pub voice_b: Matrix<T>,
}

impl<T: Scalar> ProjectionParams<T> {
    /// Near-identity (`I + N(0, noise²/d)`) when `d_in == d`, Xavier otherwise.
    pub fn init(d_in: usize, d: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| {
            if d_in == d {
                let mut m = gaussian::<T>(d, d, noise / (d as f64).sqrt(), rng);
                for i in 0..d {
                    m.data_mut()[i * d + i] = m.data()[i * d + i] + T::one();
                }
                m
            } else {
                xavier(d_in, d).sample_matrix(rng)
            }
        };
        let face_w = draw(&mut rng);
        let voice_w = draw(&mut rng);
        Self {
            face_w,
            face_b: Matrix::zeros(1, d),
            voice_w,
            voice_b: Matrix::zeros(1, d),
        }
    }

    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        vec![
            ("face.w".into(), &self.face_w),
            ("face.b".into(), &self.face_b),
            ("voice.w".into(), &self.voice_w),
            ("voice.b".into(), &self.voice_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        vec![
            ("face.w".into(), &mut self.face_w),
            ("face.b".into(), &mut self.face_b),
            ("voice.w".into(), &mut self.voice_w),
            ("voice.b".into(), &mut self.voice_b),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionParams<U> {
        ProjectionParams {
            face_w: self.face_w.cast(),
            face_b: self.face_b.cast(),
            voice_w: self.voice_w.cast(),
            voice_b: self.voice_b.cast(),
        }
    }

    fn project(&self, x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul(w)?;
        let d = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v + b.data()[i % d];
        }
        Ok(y)
    }

    pub fn project_faces(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.project(x, &self.face_w, &self.face_b)
    }

    pub fn project_voices(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.project(x, &self.voice_w, &self.voice_b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub rounds: usize,
    pub k: usize,
    pub kmeans_max_iter: usize,
    /// Face frames per track fed to k-means and to training batches.
    pub frames_per_track: usize,
    pub steps_per_round: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub lr: f64,
    pub init_noise: f64,
    pub ms: MsParams,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            k: 50,
            kmeans_max_iter: 100,
            frames_per_track: 16,
            steps_per_round: 200,
            classes_per_batch: 8,
            samples_per_class: 4,
            lr: 1e-3,
            init_noise: 0.01,
            ms: MsParams::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.frames_per_track == 0 || self.classes_per_batch == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig(
                "k, frames_per_track, classes_per_batch and samples_per_class must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.init_noise >= 0.0) {
            return Err(Error::InvalidConfig("lr must be positive and init_noise >= 0".into()));
        }
        Ok(())
    }
}

/// Face frames of one track, tagged with the identity they belong to.
#[derive(Debug, Clone)]
pub struct FaceGroup {
    pub identity: String,
    pub frames: Matrix<f32>,
}

/// One voice embedding row and its speaker.
#[derive(Debug, Clone)]
pub struct VoiceItem {
    pub identity: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneData {
    pub faces: Vec<FaceGroup>,
    pub voices: Vec<VoiceItem>,
}

impl FinetuneData {
    /// Tracks and utterance rows of a corpus. Identities are keyed
    /// `clip/identity`; utterances of speakers without a track are left out.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut data = Self::default();
        for clip in &corpus.clips {
            let visible = clip.visible_identities();
            for t in &clip.tracks {
                let m = &t.frame_embeddings.matrix;
                data.faces.push(FaceGroup {
                    identity: format!("{}/{}", clip.id, t.identity_id),
                    frames: to_matrix(m),
                });
            }
            for u in &clip.utterances {
                if !visible.contains(&u.speaker_id.as_str()) {
                    continue;
                }
                for row in u.segment_embeddings.matrix.iter_rows() {
                    data.voices.push(VoiceItem {
                        identity: format!("{}/{}", clip.id, u.speaker_id),
                        embedding: row.to_vec(),
                    });
                }
            }
        }
        data
    }

    fn width(&self) -> Result<usize> {
        self.faces
            .first()
            .map(|f| f.frames.cols())
            .ok_or_else(|| Error::Empty("no face tracks".into()))
    }
}

fn to_matrix(m: &EmbeddingMatrix) -> Matrix<f32> {
    Matrix::from_vec(m.rows(), m.cols(), m.data().to_vec()).expect("sized")
}

fn normalize_rows(m: &mut Matrix<f64>) {
    let c = m.cols();
    for r in m.data_mut().chunks_mut(c) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Percentage of voice rows whose nearest identity, by cosine to the mean
/// projected face embedding of that identity, is their own.
pub fn crossmodal_recall_at_1(data: &FinetuneData, params: &ProjectionParams<f32>) -> Result<f64> {
    let p = params.cast::<f64>();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for f in &data.faces {
        let mut y = p.project_faces(&f.frames.cast())?;
        normalize_rows(&mut y);
        let e = sums
            .entry(&f.identity)
            .or_insert_with(|| (vec![0.0; y.cols()], 0));
        for r in 0..y.rows() {
            e.0.iter_mut().zip(y.row(r)).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
    }
    let ids: Vec<&str> = sums.keys().copied().collect();
    let centroids: Vec<Vec<f64>> = sums
        .values()
        .map(|(s, n)| {
            let v: Vec<f64> = s.iter().map(|x| x / *n as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let voices: Vec<&VoiceItem> = data.voices.iter().filter(|v| sums.contains_key(v.identity.as_str())).collect();
    if voices.is_empty() {
        return Err(Error::Empty("no voice rows with a face identity".into()));
    }
    let rows: Vec<Vec<f64>> = voices
        .iter()
        .map(|v| v.embedding.iter().map(|&x| x as f64).collect())
        .collect();
    let y = p.project_voices(&Matrix::from_rows(&rows)?)?;
    let mut hits = 0;
    for (r, v) in voices.iter().enumerate() {
        let q = y.row(r);
        let scores: Vec<f64> = centroids.iter().map(|c| c.iter().zip(q).map(|(a, b)| a * b).sum()).collect();
        // ties resolve to the first identity, so a collapsed projection scores chance or below
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, &s)| if s > scores[b] { i } else { b });
        hits += usize::from(ids[best] == v.identity);
    }
    Ok(100.0 * hits as f64 / voices.len() as f64)
}

fn majority(labels: impl IntoIterator<Item = usize>) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    // most frequent, smallest label on ties
    counts
        .iter()
        .fold((0, 0), |best, (&l, &c)| if c > best.1 { (l, c) } else { best })
        .0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundStats {
    pub inertia: f64,
    pub n_pseudo_classes: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub rounds: Vec<RoundStats>,
}

/// MS loss of one mixed batch and its gradient in [`ProjectionParams::named`] order.
pub fn batch_loss_and_grads<T: Scalar>(
    params: &ProjectionParams<T>,
    faces: &Matrix<T>,
    voices: &Matrix<T>,
    labels: Vec<usize>,
    ms: MsParams,
) -> Result<(f64, Vec<Matrix<T>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .named()
        .into_iter()
        .map(|(_, m)| g.param(m.clone()))
        .collect::<Result<_>>()?;
    let mut parts = Vec::new();
    if faces.rows() > 0 {
        let x = g.input(faces.clone())?;
        parts.push(g.affine(x, vars[0], vars[1])?);
    }
    if voices.rows() > 0 {
        let x = g.input(voices.clone())?;
        parts.push(g.affine(x, vars[2], vars[3])?);
    }
    let joint = g.concat_rows(&parts)?;
    let z = g.l2_normalize_rows(joint)?;
    let zt = g.transpose(z)?;
    let s = g.matmul(z, zt)?;
    let loss = g.custom_loss(s, &MultiSimilarityLoss::new(labels, ms))?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    let named = params.named();
    let out = vars
        .iter()
        .zip(&named)
        .map(|(v, (_, m))| grads.get_or_zeros(*v, m))
        .collect();
    Ok((value, out))
}

/// Pseudo-label rounds followed by multi-similarity training. Zero rounds
/// return the initialisation.
pub fn finetune(data: &FinetuneData, cfg: &FinetuneConfig) -> Result<(ProjectionParams<f32>, FinetuneReport)> {
    cfg.validate()?;
    let d = data.width()?;
    let mut params = ProjectionParams::<f32>::init(d, d, cfg.init_noise, cfg.seed);
    let mut report = FinetuneReport { rounds: Vec::new() };
    if cfg.rounds == 0 {
        return Ok((params, report));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);

    // a fixed per-track frame sample
    let mut sampled: Vec<(usize, Vec<usize>)> = Vec::new();
    for (t, f) in data.faces.iter().enumerate() {
        let n = f.frames.rows();
        let take = n.min(cfg.frames_per_track);
        let mut rows = rand::seq::index::sample(&mut rng, n, take).into_vec();
        rows.sort_unstable();
        sampled.push((t, rows));
    }
    let face_rows: Vec<Vec<f32>> = sampled
        .iter()
        .flat_map(|(t, rows)| rows.iter().map(|&r| data.faces[*t].frames.row(r).to_vec()))
        .collect();
    let first = &face_rows[0];
    if face_rows.iter().all(|r| r == first) && data.voices.iter().all(|v| v.embedding == data.voices[0].embedding) {
        return Err(Error::Degenerate("all face and voice embeddings are identical".into()));
    }
    let face_m = Matrix::from_rows(&face_rows)?;
    let mut state = AdamState::new(params.named().into_iter().map(|(_, m)| m));

    for round in 0..cfg.rounds {
        let mut proj = params.cast::<f64>().project_faces(&face_m.cast())?;
        normalize_rows(&mut proj);
        let points: Vec<Vec<f64>> = (0..proj.rows()).map(|r| proj.row(r).to_vec()).collect();
        let k = cfg.k.min(points.len());
        let clusters = kmeans(&points, k, cfg.seed.wrapping_add(round as u64), cfg.kmeans_max_iter)?;

        // identity label: majority over all of its sampled frames
        let mut per_identity: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut frame_owner = Vec::with_capacity(face_rows.len());
        let mut cursor = 0;
        for (t, rows) in &sampled {
            let id = data.faces[*t].identity.as_str();
            for _ in rows {
                per_identity.entry(id).or_default().push(clusters.labels[cursor]);
                frame_owner.push(id);
                cursor += 1;
            }
        }
        let identity_label: HashMap<&str, usize> = per_identity
            .into_iter()
            .map(|(id, ls)| (id, majority(ls)))
            .collect();

        // pools per pseudo-class; faces take their identity's label
        let mut face_pool: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, id) in frame_owner.iter().enumerate() {
            face_pool.entry(identity_label[id]).or_default().push(i);
        }
        let mut voice_pool: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, v) in data.voices.iter().enumerate() {
            if let Some(&l) = identity_label.get(v.identity.as_str()) {
                voice_pool.entry(l).or_default().push(i);
            }
        }
        let classes: Vec<usize> = face_pool
            .keys()
            .copied()
            .filter(|l| voice_pool.contains_key(l))
            .collect();
        if classes.is_empty() {
            return Err(Error::Degenerate("no pseudo-class has both faces and voices".into()));
        }

        let mut loss_sum = 0.0;
        for _ in 0..cfg.steps_per_round {
            let mut chosen = classes.clone();
            chosen.shuffle(&mut rng);
            chosen.truncate(cfg.classes_per_batch);
            let (mut fr, mut vr, mut fl, mut vl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &c in &chosen {
                for _ in 0..cfg.samples_per_class {
                    let fi = *face_pool[&c].choose(&mut rng).expect("non-empty pool");
                    fr.push(face_rows[fi].clone());
                    fl.push(c);
                    let vi = *voice_pool[&c].choose(&mut rng).expect("non-empty pool");
                    vr.push(data.voices[vi].embedding.clone());
                    vl.push(c);
                }
            }
            let mut labels = fl;
            labels.extend(vl);
            let (loss, grads) = batch_loss_and_grads(
                &params,
                &Matrix::from_rows(&fr)?,
                &Matrix::from_rows(&vr)?,
                labels,
                cfg.ms,
            )?;
            loss_sum += loss;
            let mut slots: Vec<&mut Matrix<f32>> = params.named_mut().into_iter().map(|(_, m)| m).collect();
            adam_step(&mut slots, &grads, &mut state, cfg.lr)?;
        }
        let stats = RoundStats {
            inertia: clusters.inertia,
            n_pseudo_classes: classes.len(),
            mean_loss: loss_sum / cfg.steps_per_round.max(1) as f64,
        };
        info!(
            "round {round}: inertia {:.3}, {} classes, loss {:.4}",
            stats.inertia, stats.n_pseudo_classes, stats.mean_loss
        );
        report.rounds.push(stats);
    }
    Ok((params, report))
}

const KIND: &str = "projections";

pub fn save_projections(
    dir: impl AsRef<Path>,
    params: &ProjectionParams<f32>,
    cfg: &FinetuneConfig,
) -> Result<CheckpointIndex<FinetuneConfig>> {
    write_tensor_set(dir.as_ref(), KIND, cfg, &params.named())
}

pub fn load_projections(dir: impl AsRef<Path>) -> Result<(ProjectionParams<f32>, FinetuneConfig)> {
    let (index, tensors) = read_tensor_set::<FinetuneConfig>(dir.as_ref(), KIND)?;
    let d = tensors
        .get("face.w")
        .map(|m| (m.rows(), m.cols()))
        .ok_or_else(|| Error::InvalidConfig("checkpoint lacks face.w".into()))?;
    let mut params = ProjectionParams::init(d.0, d.1, 0.0, 0);
    fill_named(params.named_mut(), tensors)?;
    Ok((params, index.config))
}
