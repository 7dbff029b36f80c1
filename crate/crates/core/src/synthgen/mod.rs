//! Synthetic corpora with a known joint face-voice space.
//!
//! Every identity gets a unit anchor `a`. Face frames are
//! `normalize(a + σ·ε)` with `σ` chosen by a latent per-frame quality flag,
//! utterance segments are `normalize(a + σ_voice·ε)`, and `ε` is i.i.d.
//! standard normal. Randomness comes from one ChaCha8 stream seeded with
//! `SynthConfig::seed` and consumed in a fixed order, so a config always
//! yields the same corpus.

use std::fs;
use std::path::{Path, PathBuf};

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_corpus, write_embeddings, AudioStreams, Clip, Corpus, EmbeddingMatrix, EmbeddingRef,
    FaceTrack, Utterance,
};
use crate::error::{Error, Result};
use crate::eval::{positive_frames, FrameDetection};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const ANCHORS_FILE: &str = "anchors.fvem";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub corpus_id: String,
    pub n_clips: usize,
    pub identities_per_clip: usize,
    pub tracks_per_identity: usize,
    /// Inclusive bounds on frames per track.
    pub frames_per_track_range: (usize, usize),
    pub utterances_per_identity: usize,
    pub utterance_duration_range_s: (f64, f64),
    /// Silence between consecutive utterances.
    pub gap_range_s: (f64, f64),
    pub clip_duration_s: f64,
    pub dim: usize,
    pub fps: f64,
    pub sample_rate_hz: u32,
    pub hop_s: f64,
    pub segments_per_utterance: usize,
    pub face_noise_sigma_clean: f64,
    pub face_noise_sigma_corrupt: f64,
    pub corrupt_frame_fraction: f64,
    pub voice_noise_sigma: f64,
    pub stream_noise_sigma: f64,
    pub energy_speech: f64,
    pub energy_silence: f64,
    pub energy_noise_sigma: f64,
    /// Share of all utterances spoken by an off-screen speaker.
    pub offscreen_speaker_fraction: f64,
    /// Share of utterances that start before the previous one ends.
    pub overlap_speech_fraction: f64,
    /// Gram-Schmidt the anchors when there are at most `dim` of them.
    pub orthogonal_anchors: bool,
    /// When set, voices live in a rotated copy of the face space: voice
    /// anchors are `Q·a` with `Q` a random orthogonal matrix drawn from this
    /// seed. Models frozen face and voice encoders that were never aligned.
    pub voice_rotation_seed: Option<u64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            corpus_id: "synthetic".into(),
            n_clips: 10,
            identities_per_clip: 4,
            tracks_per_identity: 2,
            frames_per_track_range: (150, 600),
            utterances_per_identity: 4,
            utterance_duration_range_s: (1.0, 3.0),
            gap_range_s: (0.0, 1.0),
            clip_duration_s: 80.0,
            dim: 128,
            fps: 30.0,
            sample_rate_hz: 16_000,
            hop_s: 0.05,
            segments_per_utterance: 1,
            face_noise_sigma_clean: 0.05,
            face_noise_sigma_corrupt: 0.5,
            corrupt_frame_fraction: 0.3,
            voice_noise_sigma: 0.05,
            stream_noise_sigma: 0.05,
            energy_speech: 1.0,
            energy_silence: 0.05,
            energy_noise_sigma: 0.05,
            offscreen_speaker_fraction: 0.2,
            overlap_speech_fraction: 0.0,
            orthogonal_anchors: false,
            voice_rotation_seed: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let sigmas = [
            self.face_noise_sigma_clean,
            self.face_noise_sigma_corrupt,
            self.voice_noise_sigma,
            self.stream_noise_sigma,
            self.energy_noise_sigma,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            bad.push("noise sigmas must be finite and >= 0".to_string());
        }
        for (name, f) in [
            ("corrupt_frame_fraction", self.corrupt_frame_fraction),
            ("offscreen_speaker_fraction", self.offscreen_speaker_fraction),
            ("overlap_speech_fraction", self.overlap_speech_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                bad.push(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.offscreen_speaker_fraction >= 1.0 && self.identities_per_clip > 0 {
            bad.push("offscreen_speaker_fraction must be below 1".into());
        }
        let (flo, fhi) = self.frames_per_track_range;
        if flo == 0 || flo > fhi {
            bad.push("frames_per_track_range must be a non-empty range of positive counts".into());
        }
        let (dlo, dhi) = self.utterance_duration_range_s;
        if !(dlo > 0.0 && dlo <= dhi) {
            bad.push("utterance_duration_range_s must be a non-empty positive range".into());
        }
        let (glo, ghi) = self.gap_range_s;
        if !(glo >= 0.0 && glo <= ghi) {
            bad.push("gap_range_s must be a non-empty range of non-negative values".into());
        }
        if self.dim == 0 {
            bad.push("dim must be positive".into());
        }
        if !(self.clip_duration_s > 0.0 && self.fps > 0.0 && self.hop_s > 0.0) {
            bad.push("clip_duration_s, fps and hop_s must be positive".into());
        }
        if self.segments_per_utterance == 0 {
            bad.push("segments_per_utterance must be positive".into());
        }
        if self.tracks_per_identity == 0 && self.identities_per_clip > 0 {
            bad.push("tracks_per_identity must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackTruth {
    pub track_id: String,
    /// One flag per frame; `true` for corrupted frames.
    pub corrupt: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceTruth {
    pub utt_id: String,
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub offscreen: bool,
    pub overlaps_previous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipTruth {
    pub clip_id: String,
    pub tracks: Vec<TrackTruth>,
    pub utterances: Vec<UtteranceTruth>,
}

/// What the generator knows and the corpus does not show.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub prng: String,
    /// Row `k` of the anchors file belongs to `identity_ids[k]`.
    pub identity_ids: Vec<String>,
    pub anchors_file: String,
    #[serde(skip)]
    pub anchors: EmbeddingMatrix,
    pub clips: Vec<ClipTruth>,
}

impl GroundTruth {
    pub fn anchor(&self, identity: &str) -> Option<&[f32]> {
        self.identity_ids
            .iter()
            .position(|id| id == identity)
            .map(|k| self.anchors.row(k))
    }
}

fn normal_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// `normalize(anchor + sigma · ε)` as f32.
fn noisy_copy(anchor: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    let eps = normal_vec(rng, anchor.len());
    let v: Vec<f64> = anchor.iter().zip(&eps).map(|(a, e)| a + sigma * e).collect();
    normalized(&v).into_iter().map(|x| x as f32).collect()
}

fn draw_anchors(n: usize, dim: usize, orthogonal: bool, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = normal_vec(rng, dim);
        if orthogonal && out.len() < dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        out.push(normalized(&v));
    }
    out
}

/// Haar-ish random orthogonal matrix: Gram-Schmidt on Gaussian rows.
fn random_rotation(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_anchors(dim, dim, true, &mut rng)
}

fn rotate(q: &[Vec<f64>], a: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(a).map(|(x, y)| x * y).sum()).collect()
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct Planned {
    speaker: usize,
    start_s: f64,
    end_s: f64,
    overlaps_previous: bool,
}

/// Builds a corpus and its hidden ground truth. Embedding paths are relative
/// to the corpus directory that [`write_synthetic`] fills.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<(Corpus, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let n_visible_utts = cfg.identities_per_clip * cfg.utterances_per_identity;
    let n_off_utts = if n_visible_utts == 0 {
        0
    } else {
        let f = cfg.offscreen_speaker_fraction;
        (n_visible_utts as f64 * f / (1.0 - f)).round() as usize
    };
    let speakers_per_clip = cfg.identities_per_clip + usize::from(n_off_utts > 0);
    let anchors = draw_anchors(
        cfg.n_clips * speakers_per_clip,
        d,
        cfg.orthogonal_anchors,
        &mut rng,
    );

    let voice_anchors: Vec<Vec<f64>> = match cfg.voice_rotation_seed {
        Some(vs) => {
            let q = random_rotation(d, vs);
            anchors.iter().map(|a| rotate(&q, a)).collect()
        }
        None => anchors.clone(),
    };

    let mut identity_ids = Vec::new();
    let mut clips = Vec::with_capacity(cfg.n_clips);
    let mut truths = Vec::with_capacity(cfg.n_clips);
    for c in 0..cfg.n_clips {
        let clip_id = format!("clip{c:03}");
        let ids: Vec<String> = (0..speakers_per_clip)
            .map(|k| {
                if k < cfg.identities_per_clip {
                    format!("{clip_id}_id{k}")
                } else {
                    format!("{clip_id}_off")
                }
            })
            .collect();
        let clip_anchors = &anchors[c * speakers_per_clip..(c + 1) * speakers_per_clip];
        let clip_voices = &voice_anchors[c * speakers_per_clip..(c + 1) * speakers_per_clip];
        identity_ids.extend(ids.iter().cloned());

        let mut clip = Clip {
            id: clip_id.clone(),
            duration_s: cfg.clip_duration_s,
            fps: cfg.fps,
            sample_rate_hz: cfg.sample_rate_hz,
            tracks: Vec::new(),
            utterances: Vec::new(),
            audio_streams: AudioStreams {
                energy: None,
                speaker_stream: None,
                hop_s: cfg.hop_s,
            },
            offscreen_ids: if n_off_utts > 0 {
                vec![ids[cfg.identities_per_clip].clone()]
            } else {
                Vec::new()
            },
        };
        let mut truth = ClipTruth {
            clip_id: clip_id.clone(),
            tracks: Vec::new(),
            utterances: Vec::new(),
        };

        // tracks: each identity's tracks sit in disjoint equal sections of the clip
        let last_frame = clip.last_frame();
        let n_frames = last_frame + 1;
        for (i, id) in ids.iter().take(cfg.identities_per_clip).enumerate() {
            let section = n_frames / cfg.tracks_per_identity;
            for j in 0..cfg.tracks_per_identity {
                let lo = cfg.frames_per_track_range.0.min(section.max(1));
                let hi = cfg.frames_per_track_range.1.min(section.max(1));
                let len = rng.random_range(lo..=hi);
                let base = j * section;
                let start = base + rng.random_range(0..=section.max(len) - len);
                let end = (start + len - 1).min(last_frame);
                let mut corrupt = Vec::with_capacity(end - start + 1);
                let mut data = Vec::with_capacity((end - start + 1) * d);
                for _ in start..=end {
                    let bad = rng.random::<f64>() < cfg.corrupt_frame_fraction;
                    let sigma = if bad {
                        cfg.face_noise_sigma_corrupt
                    } else {
                        cfg.face_noise_sigma_clean
                    };
                    data.extend(noisy_copy(&clip_anchors[i], sigma, &mut rng));
                    corrupt.push(bad);
                }
                let track_id = format!("{id}_t{j}");
                let m = EmbeddingMatrix::new(corrupt.len(), d, data)?;
                clip.tracks.push(FaceTrack {
                    track_id: track_id.clone(),
                    identity_id: id.clone(),
                    track_index: j,
                    start_frame: start,
                    end_frame: end,
                    frame_embeddings: EmbeddingRef::new(format!("{clip_id}/tracks/{track_id}.fvem"), m),
                    crop_meta: None,
                    boxes: None,
                });
                truth.tracks.push(TrackTruth { track_id, corrupt });
            }
        }

        // utterance timeline
        let mut order: Vec<usize> = (0..cfg.identities_per_clip)
            .flat_map(|i| std::iter::repeat_n(i, cfg.utterances_per_identity))
            .chain(std::iter::repeat_n(cfg.identities_per_clip, n_off_utts))
            .collect();
        order.shuffle(&mut rng);
        let mut plan: Vec<Planned> = Vec::with_capacity(order.len());
        let mut t = uniform(&mut rng, cfg.gap_range_s);
        for speaker in order {
            let dur = uniform(&mut rng, cfg.utterance_duration_range_s);
            let overlap = rng.random::<f64>() < cfg.overlap_speech_fraction;
            let start = match plan.last() {
                Some(prev) if overlap => {
                    let prev_dur = prev.end_s - prev.start_s;
                    prev.end_s - uniform(&mut rng, (0.2, 0.5)) * prev_dur.min(dur)
                }
                _ => t,
            };
            let end = start + dur;
            plan.push(Planned {
                speaker,
                start_s: start,
                end_s: end,
                overlaps_previous: overlap && plan.len() > 0,
            });
            t = end.max(t) + uniform(&mut rng, cfg.gap_range_s);
        }
        if let Some(end) = plan.iter().map(|p| p.end_s).reduce(f64::max) {
            if end > cfg.clip_duration_s {
                return Err(Error::InvalidConfig(format!(
                    "utterances need {end:.1} s but clip_duration_s is {}",
                    cfg.clip_duration_s
                )));
            }
        }
        for (k, p) in plan.iter().enumerate() {
            let utt_id = format!("{clip_id}_u{k:03}");
            let rows: Vec<f32> = (0..cfg.segments_per_utterance)
                .flat_map(|_| noisy_copy(&clip_voices[p.speaker], cfg.voice_noise_sigma, &mut rng))
                .collect();
            let m = EmbeddingMatrix::new(cfg.segments_per_utterance, d, rows)?;
            clip.utterances.push(Utterance {
                utt_id: utt_id.clone(),
                speaker_id: ids[p.speaker].clone(),
                start_s: p.start_s,
                end_s: p.end_s,
                segment_embeddings: EmbeddingRef::new(format!("{clip_id}/utterances/{utt_id}.fvem"), m),
            });
            truth.utterances.push(UtteranceTruth {
                utt_id,
                speaker_id: ids[p.speaker].clone(),
                start_s: p.start_s,
                end_s: p.end_s,
                offscreen: p.speaker >= cfg.identities_per_clip,
                overlaps_previous: p.overlaps_previous,
            });
        }

        // audio streams, one row per hop at time `r · hop_s`
        let n_hops = (cfg.clip_duration_s / cfg.hop_s).round() as usize;
        let mut energy = Vec::with_capacity(n_hops);
        let mut stream = Vec::with_capacity(n_hops * d);
        for r in 0..n_hops {
            let time = r as f64 * cfg.hop_s;
            let active: Vec<usize> = plan
                .iter()
                .filter(|p| p.start_s <= time && time < p.end_s)
                .map(|p| p.speaker)
                .collect();
            let level = if active.is_empty() {
                cfg.energy_silence
            } else {
                cfg.energy_speech
            };
            let e = level + cfg.energy_noise_sigma * rng.sample::<f64, _>(StandardNormal);
            energy.push(e.max(0.0) as f32);
            if active.is_empty() {
                // no speaker, no direction
                stream.extend(std::iter::repeat_n(0.0f32, d));
            } else {
                let mut mix = vec![0.0; d];
                for &s in &active {
                    mix.iter_mut().zip(&clip_voices[s]).for_each(|(m, a)| *m += a);
                }
                stream.extend(noisy_copy(&normalized(&mix), cfg.stream_noise_sigma, &mut rng));
            }
        }
        if n_hops > 0 {
            clip.audio_streams.energy = Some(EmbeddingRef::new(
                format!("{clip_id}/energy.fvem"),
                EmbeddingMatrix::new(n_hops, 1, energy)?,
            ));
            clip.audio_streams.speaker_stream = Some(EmbeddingRef::new(
                format!("{clip_id}/speaker_stream.fvem"),
                EmbeddingMatrix::new(n_hops, d, stream)?,
            ));
        }
        debug!(
            "{clip_id}: {} tracks, {} utterances",
            clip.tracks.len(),
            clip.utterances.len()
        );
        clips.push(clip);
        truths.push(truth);
    }

    let anchor_data: Vec<f32> = anchors.iter().flatten().map(|&x| x as f32).collect();
    let anchors_m = if anchors.is_empty() {
        EmbeddingMatrix::default()
    } else {
        EmbeddingMatrix::new(anchors.len(), d, anchor_data)?
    };
    let corpus = Corpus {
        corpus_id: cfg.corpus_id.clone(),
        seed: Some(cfg.seed),
        embedding_dim: d,
        clips,
    };
    let truth = GroundTruth {
        seed: cfg.seed,
        prng: "ChaCha8 (rand_chacha), single stream".into(),
        identity_ids,
        anchors_file: ANCHORS_FILE.into(),
        anchors: anchors_m,
        clips: truths,
    };
    Ok((corpus, truth))
}

/// Writes the corpus, `ground_truth.json` and the anchors file into `dir`.
/// Returns the manifest path.
pub fn write_synthetic(corpus: &Corpus, truth: &GroundTruth, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let manifest = write_corpus(corpus, dir)?;
    if !truth.anchors.is_empty() {
        write_embeddings(dir.join(&truth.anchors_file), &truth.anchors)?;
    }
    let path = dir.join(GROUND_TRUTH_FILE);
    let text = serde_json::to_string_pretty(truth).expect("ground truth serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Score-1 detections on every frame where a visible identity speaks.
/// Off-screen utterances have no track and add nothing.
pub fn ground_truth_detections(corpus: &Corpus) -> Vec<FrameDetection> {
    corpus.clips.iter().flat_map(positive_frames).collect()
}
