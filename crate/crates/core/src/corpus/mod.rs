//! Clip / face-track / utterance data model, the corpus manifest, and its
//! structural validation.
//!
//! A corpus on disk is a single `manifest.json` plus FVEM sidecar files
//! referenced by paths relative to the manifest's directory.

mod fvem;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use fvem::{read_embeddings, write_embeddings, EmbeddingMatrix, MAGIC, VERSION};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const UNKNOWN_SPEAKER: &str = "unknown";
pub const DEFAULT_EMBEDDING_DIM: usize = 128;

/// A relative path to an FVEM file together with its loaded contents.
///
/// Only the path is serialized; the matrix is filled in by [`load_manifest`]
/// or by whoever builds the corpus in memory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct EmbeddingRef {
    pub path: String,
    pub matrix: Arc<EmbeddingMatrix>,
}

impl EmbeddingRef {
    pub fn new(path: impl Into<String>, matrix: EmbeddingMatrix) -> Self {
        Self {
            path: path.into(),
            matrix: Arc::new(matrix),
        }
    }
}

impl From<String> for EmbeddingRef {
    fn from(path: String) -> Self {
        Self {
            path,
            matrix: Arc::default(),
        }
    }
}

impl From<EmbeddingRef> for String {
    fn from(r: EmbeddingRef) -> Self {
        r.path
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropMeta {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

/// Axis-aligned rectangle `[x1, y1, x2, y2]`.
pub type BBox = [f32; 4];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaceTrack {
    pub track_id: String,
    pub identity_id: String,
    pub track_index: usize,
    pub start_frame: usize,
    /// Inclusive.
    pub end_frame: usize,
    pub frame_embeddings: EmbeddingRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_meta: Option<CropMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BBox>>,
}

impl FaceTrack {
    /// Number of frames `T` in the track.
    pub fn len(&self) -> usize {
        self.end_frame + 1 - self.start_frame.min(self.end_frame + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_frame(&self, frame: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }

    pub fn box_at(&self, frame: usize) -> Option<BBox> {
        let boxes = self.boxes.as_ref()?;
        boxes.get(frame.checked_sub(self.start_frame)?).copied()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub segment_embeddings: EmbeddingRef,
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn has_known_speaker(&self) -> bool {
        self.speaker_id != UNKNOWN_SPEAKER
    }

    /// Duration in audio samples at `sample_rate_hz`.
    pub fn sample_count(&self, sample_rate_hz: u32) -> u64 {
        (self.duration_s() * sample_rate_hz as f64).round() as u64
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AudioStreams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EmbeddingRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_stream: Option<EmbeddingRef>,
    pub hop_s: f64,
}

fn default_fps() -> f64 {
    30.0
}

fn default_sample_rate() -> u32 {
    16_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clip {
    pub id: String,
    pub duration_s: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: u32,
    #[serde(default)]
    pub tracks: Vec<FaceTrack>,
    #[serde(default)]
    pub utterances: Vec<Utterance>,
    #[serde(default)]
    pub audio_streams: AudioStreams,
    /// Speakers that are heard but never seen in this clip.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offscreen_ids: Vec<String>,
}

impl Clip {
    /// Last valid video frame index, `floor(duration_s · fps)`.
    pub fn last_frame(&self) -> usize {
        (self.duration_s * self.fps).floor() as usize
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }

    /// Identities with at least one face track, in order of first appearance.
    pub fn visible_identities(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.tracks
            .iter()
            .map(|t| t.identity_id.as_str())
            .filter(|id| seen.insert(*id))
            .collect()
    }

    pub fn tracks_of<'a>(&'a self, identity: &'a str) -> impl Iterator<Item = &'a FaceTrack> + 'a {
        self.tracks.iter().filter(move |t| t.identity_id == identity)
    }

    /// All frame embeddings of `identity`, concatenated over its tracks in track order.
    pub fn identity_frames(&self, identity: &str) -> EmbeddingMatrix {
        let mut cols = 0;
        let mut rows = 0;
        let mut data = Vec::new();
        for t in self.tracks_of(identity) {
            cols = t.frame_embeddings.matrix.cols();
            rows += t.frame_embeddings.matrix.rows();
            data.extend_from_slice(t.frame_embeddings.matrix.data());
        }
        EmbeddingMatrix::new(rows, cols, data).expect("track matrices share a width")
    }

    /// Video frames `f` with `start_s ≤ f/fps < end_s`.
    pub fn frames_in(&self, start_s: f64, end_s: f64) -> std::ops::Range<usize> {
        let first = self.first_frame_at_or_after(start_s);
        first..self.first_frame_at_or_after(end_s).max(first)
    }

    /// Smallest frame index `f` with `f/fps ≥ t`.
    fn first_frame_at_or_after(&self, t: f64) -> usize {
        let mut f = (t * self.fps).ceil().max(0.0) as usize;
        // the product can round either way; settle on the exact predicate
        while f > 0 && self.frame_time(f - 1) >= t {
            f -= 1;
        }
        while self.frame_time(f) < t {
            f += 1;
        }
        f
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub corpus_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub embedding_dim: usize,
    pub clips: Vec<Clip>,
}

impl Corpus {
    pub fn empty(embedding_dim: usize) -> Self {
        Self {
            corpus_id: String::new(),
            seed: None,
            embedding_dim,
            clips: Vec::new(),
        }
    }

    pub fn clip(&self, id: &str) -> Option<&Clip> {
        self.clips.iter().find(|c| c.id == id)
    }

    fn refs_mut(&mut self) -> impl Iterator<Item = &mut EmbeddingRef> {
        self.clips.iter_mut().flat_map(|c| {
            let tracks = c.tracks.iter_mut().map(|t| &mut t.frame_embeddings);
            let utts = c.utterances.iter_mut().map(|u| &mut u.segment_embeddings);
            let streams = c
                .audio_streams
                .energy
                .iter_mut()
                .chain(c.audio_streams.speaker_stream.iter_mut());
            tracks.chain(utts).chain(streams)
        })
    }

    fn refs(&self) -> impl Iterator<Item = &EmbeddingRef> {
        self.clips.iter().flat_map(|c| {
            let tracks = c.tracks.iter().map(|t| &t.frame_embeddings);
            let utts = c.utterances.iter().map(|u| &u.segment_embeddings);
            let streams = c
                .audio_streams
                .energy
                .iter()
                .chain(c.audio_streams.speaker_stream.iter());
            tracks.chain(utts).chain(streams)
        })
    }
}

/// Reads a manifest (file or directory containing `manifest.json`), loads every
/// referenced embedding file and validates the result.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Corpus> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path.push(MANIFEST_FILE);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut corpus: Corpus =
        serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.clone(),
            source,
        })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for r in corpus.refs_mut() {
        let file = root.join(&r.path);
        if !file.exists() {
            return Err(Error::MissingEmbedding(file));
        }
        r.matrix = Arc::new(read_embeddings(&file)?);
    }
    let violations = validate_corpus(&corpus);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(corpus)
}

/// Writes `manifest.json` and every embedding file under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in corpus.refs() {
        write_embeddings(dir.join(&r.path), &r.matrix)?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(corpus).expect("corpus serializes");
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Every structural invariant violation in `corpus`, described in one line each.
/// An empty list means the corpus is well-formed.
pub fn validate_corpus(corpus: &Corpus) -> Vec<String> {
    let mut out = Vec::new();
    let d = corpus.embedding_dim;
    if d == 0 {
        out.push("embedding_dim must be positive".to_string());
    }
    let mut clip_ids = HashSet::new();
    for clip in &corpus.clips {
        let cid = &clip.id;
        if !clip_ids.insert(cid.as_str()) {
            out.push(format!("duplicate clip id {cid}"));
        }
        if !(clip.duration_s.is_finite() && clip.duration_s >= 0.0) {
            out.push(format!("clip {cid}: invalid duration {}", clip.duration_s));
        }
        if !(clip.fps.is_finite() && clip.fps > 0.0) {
            out.push(format!("clip {cid}: invalid fps {}", clip.fps));
            continue;
        }
        let last = clip.last_frame();
        let mut track_ids = HashSet::new();
        for t in &clip.tracks {
            let tid = &t.track_id;
            if !track_ids.insert(tid.as_str()) {
                out.push(format!("clip {cid}: duplicate track id {tid}"));
            }
            if t.start_frame > t.end_frame {
                out.push(format!(
                    "clip {cid} track {tid}: start_frame {} > end_frame {}",
                    t.start_frame, t.end_frame
                ));
            }
            if t.end_frame > last {
                out.push(format!(
                    "clip {cid} track {tid}: end_frame {} exceeds last frame {last}",
                    t.end_frame
                ));
            }
            let m = &t.frame_embeddings.matrix;
            if m.rows() != t.len() {
                out.push(format!(
                    "clip {cid} track {tid}: {} embedding rows for {} frames",
                    m.rows(),
                    t.len()
                ));
            }
            if m.cols() != d {
                out.push(format!(
                    "clip {cid} track {tid}: embedding width {} != {d}",
                    m.cols()
                ));
            }
            if let Some(b) = &t.boxes {
                if b.len() != t.len() {
                    out.push(format!(
                        "clip {cid} track {tid}: {} boxes for {} frames",
                        b.len(),
                        t.len()
                    ));
                }
            }
        }
        let visible: HashSet<&str> = clip.visible_identities().into_iter().collect();
        let mut utt_ids = HashSet::new();
        for u in &clip.utterances {
            let uid = &u.utt_id;
            if !utt_ids.insert(uid.as_str()) {
                out.push(format!("clip {cid}: duplicate utterance id {uid}"));
            }
            if !(u.end_s > u.start_s) {
                out.push(format!(
                    "clip {cid} utterance {uid}: end_s {} not after start_s {}",
                    u.end_s, u.start_s
                ));
            }
            if u.start_s < 0.0 || u.end_s > clip.duration_s {
                out.push(format!(
                    "clip {cid} utterance {uid}: [{}, {}] outside [0, {}]",
                    u.start_s, u.end_s, clip.duration_s
                ));
            }
            let m = &u.segment_embeddings.matrix;
            if m.rows() == 0 {
                out.push(format!("clip {cid} utterance {uid}: no segment embeddings"));
            }
            if m.cols() != d {
                out.push(format!(
                    "clip {cid} utterance {uid}: embedding width {} != {d}",
                    m.cols()
                ));
            }
            if u.has_known_speaker()
                && !visible.contains(u.speaker_id.as_str())
                && !clip.offscreen_ids.contains(&u.speaker_id)
            {
                out.push(format!(
                    "clip {cid} utterance {uid}: speaker {} is neither visible nor off-screen",
                    u.speaker_id
                ));
            }
        }
        let streams = &clip.audio_streams;
        if streams.energy.is_some() || streams.speaker_stream.is_some() {
            if !(streams.hop_s.is_finite() && streams.hop_s > 0.0) {
                out.push(format!("clip {cid}: invalid hop_s {}", streams.hop_s));
            } else {
                let expected = clip.duration_s / streams.hop_s;
                let mut check = |name: &str, r: &EmbeddingRef, width: usize| {
                    let m = &r.matrix;
                    if (m.rows() as f64 - expected).abs() > 1.0 + 1e-9 {
                        out.push(format!(
                            "clip {cid}: {name} stream has {} rows, expected {expected:.1} ± 1",
                            m.rows()
                        ));
                    }
                    if m.cols() != width {
                        out.push(format!(
                            "clip {cid}: {name} stream width {} != {width}",
                            m.cols()
                        ));
                    }
                };
                if let Some(e) = &streams.energy {
                    check("energy", e, 1);
                }
                if let Some(s) = &streams.speaker_stream {
                    check("speaker", s, d);
                }
            }
        }
    }
    out
}
