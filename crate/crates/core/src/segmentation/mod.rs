//! Utterance segmentation from per-hop audio feature streams.
//!
//! Voice activity comes from an energy threshold over a moving-average
//! smoothed stream. Speaker changes come from the cosine distance between
//! mean speaker embeddings of adjacent windows. Speech regions are split at
//! the change points that fall inside them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Clip, Corpus, EmbeddingMatrix, Utterance};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_OVERLAP: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScdThreshold {
    /// Fixed threshold on the cosine distance.
    Absolute { theta: f64 },
    /// `mean + kappa · std` of the distance curve over the clip.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    /// Energy units above the noise floor needed to count as speech.
    pub vad_threshold_margin: f64,
    pub vad_hangover_s: f64,
    pub vad_min_speech_s: f64,
    pub vad_smoothing_hops: usize,
    /// Percentile of the smoothed energy used as the noise floor.
    pub vad_floor_percentile: f64,
    pub scd_window_s: f64,
    /// Stride of the distance scan; rounded to whole stream hops.
    pub scd_hop_s: f64,
    pub scd_peak_threshold_mode: ScdThreshold,
    pub scd_kappa: f64,
    pub min_utt_s: Option<f64>,
    pub max_utt_s: Option<f64>,
    /// Rows per hypothesis utterance embedding.
    pub segments_per_utterance: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            vad_threshold_margin: 0.3,
            vad_hangover_s: 0.3,
            vad_min_speech_s: 0.2,
            vad_smoothing_hops: 5,
            vad_floor_percentile: 10.0,
            scd_window_s: 0.5,
            scd_hop_s: 0.05,
            scd_peak_threshold_mode: ScdThreshold::Adaptive,
            scd_kappa: 1.0,
            min_utt_s: None,
            max_utt_s: None,
            segments_per_utterance: 1,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.vad_threshold_margin >= 0.0) {
            bad.push("vad_threshold_margin must be >= 0");
        }
        if !(self.vad_hangover_s >= 0.0) {
            bad.push("vad_hangover_s must be >= 0");
        }
        if !(self.vad_min_speech_s >= 0.0) {
            bad.push("vad_min_speech_s must be >= 0");
        }
        if self.vad_smoothing_hops == 0 {
            bad.push("vad_smoothing_hops must be positive");
        }
        if !(0.0..=100.0).contains(&self.vad_floor_percentile) {
            bad.push("vad_floor_percentile must lie in [0, 100]");
        }
        if !(self.scd_window_s > 0.0) || !(self.scd_hop_s > 0.0) {
            bad.push("scd window and hop must be positive");
        }
        if let ScdThreshold::Absolute { theta } = self.scd_peak_threshold_mode {
            if !theta.is_finite() {
                bad.push("scd theta must be finite");
            }
        }
        if !self.scd_kappa.is_finite() {
            bad.push("scd_kappa must be finite");
        }
        if self.segments_per_utterance == 0 {
            bad.push("segments_per_utterance must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeechRegion {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangePoint {
    pub t_s: f64,
    pub score: f64,
}

/// A hypothesised single-speaker utterance. `segment_embeddings` holds one
/// row per sub-segment once assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypUtterance {
    pub utt_id: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segment_embeddings: Vec<Vec<f32>>,
}

impl HypUtterance {
    pub fn new(utt_id: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self {
            utt_id: utt_id.into(),
            start_s,
            end_s,
            segment_embeddings: Vec::new(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Takes interval and embeddings from a reference utterance.
    pub fn from_reference(u: &Utterance) -> Self {
        Self {
            utt_id: u.utt_id.clone(),
            start_s: u.start_s,
            end_s: u.end_s,
            segment_embeddings: u
                .segment_embeddings
                .matrix
                .iter_rows()
                .map(|r| r.to_vec())
                .collect(),
        }
    }

    pub fn embedding_matrix(&self) -> Result<EmbeddingMatrix> {
        if self.segment_embeddings.is_empty() {
            return Err(Error::Empty(format!("utterance {} has no embeddings", self.utt_id)));
        }
        EmbeddingMatrix::from_rows(&self.segment_embeddings)
    }
}

/// Interval with speaker label, the reference side of the overlap rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefUtterance {
    pub start_s: f64,
    pub end_s: f64,
    pub speaker_id: String,
}

impl From<&Utterance> for RefUtterance {
    fn from(u: &Utterance) -> Self {
        Self {
            start_s: u.start_s,
            end_s: u.end_s,
            speaker_id: u.speaker_id.clone(),
        }
    }
}

/// Length of the intersection of two intervals.
pub fn overlap_s(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Centered moving average; windows are truncated at the edges.
fn smooth(x: &[f64], width: usize) -> Vec<f64> {
    let before = (width - 1) / 2;
    let after = width - 1 - before;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Linear-interpolated percentile, `p` in [0, 100].
fn percentile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Speech regions of a per-hop energy stream.
pub fn energy_vad(energy: &[f64], hop_s: f64, cfg: &SegConfig) -> Result<Vec<SpeechRegion>> {
    cfg.validate()?;
    if energy.is_empty() {
        return Err(Error::Empty("energy stream".into()));
    }
    if energy.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("energy_vad"));
    }
    if !(hop_s > 0.0) {
        return Err(Error::InvalidConfig(format!("hop_s {hop_s} must be positive")));
    }
    let smoothed = smooth(energy, cfg.vad_smoothing_hops);
    let threshold = percentile(&smoothed, cfg.vad_floor_percentile) + cfg.vad_threshold_margin;

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, &e) in smoothed.iter().enumerate() {
        match (e > threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, smoothed.len()));
    }

    let mut regions: Vec<SpeechRegion> = Vec::new();
    for (s, e) in runs {
        let r = SpeechRegion {
            start_s: s as f64 * hop_s,
            end_s: e as f64 * hop_s,
        };
        match regions.last_mut() {
            Some(prev) if r.start_s - prev.end_s < cfg.vad_hangover_s => prev.end_s = r.end_s,
            _ => regions.push(r),
        }
    }
    regions.retain(|r| r.end_s - r.start_s >= cfg.vad_min_speech_s);
    Ok(regions)
}

fn mean_rows(m: &EmbeddingMatrix, lo: usize, hi: usize) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for r in lo..hi {
        for (a, &v) in acc.iter_mut().zip(m.row(r)) {
            *a += v as f64;
        }
    }
    let n = (hi - lo) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// `1 − cos(a, b)`; zero when either side has no direction.
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= f64::EPSILON || nb <= f64::EPSILON {
        0.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Distance curve `d(t)` at every scan position, as `(hop index, d)`.
pub fn change_curve(stream: &EmbeddingMatrix, hop_s: f64, cfg: &SegConfig) -> Vec<(usize, f64)> {
    let w = ((cfg.scd_window_s / hop_s).round() as usize).max(1);
    let step = ((cfg.scd_hop_s / hop_s).round() as usize).max(1);
    if stream.rows() < 2 * w {
        return Vec::new();
    }
    (w..=stream.rows() - w)
        .step_by(step)
        .map(|t| {
            let left = mean_rows(stream, t - w, t);
            let right = mean_rows(stream, t, t + w);
            (t, cosine_distance(&left, &right))
        })
        .collect()
}

/// Local maxima of the distance curve above the configured threshold.
pub fn detect_change_points(
    stream: &EmbeddingMatrix,
    hop_s: f64,
    cfg: &SegConfig,
) -> Result<Vec<ChangePoint>> {
    cfg.validate()?;
    if !(hop_s > 0.0) {
        return Err(Error::InvalidConfig(format!("hop_s {hop_s} must be positive")));
    }
    let curve = change_curve(stream, hop_s, cfg);
    if curve.is_empty() {
        return Ok(Vec::new());
    }
    let threshold = match cfg.scd_peak_threshold_mode {
        ScdThreshold::Absolute { theta } => theta,
        ScdThreshold::Adaptive => {
            let n = curve.len() as f64;
            let mu = curve.iter().map(|c| c.1).sum::<f64>() / n;
            let var = curve.iter().map(|c| (c.1 - mu).powi(2)).sum::<f64>() / n;
            mu + cfg.scd_kappa * var.sqrt()
        }
    };
    let d: Vec<f64> = curve.iter().map(|c| c.1).collect();
    let mut out = Vec::new();
    for i in 0..d.len() {
        // rising edge strictly, falling edge weakly: a plateau reports its first point
        let left_ok = i == 0 || d[i] > d[i - 1];
        let right_ok = i + 1 == d.len() || d[i] >= d[i + 1];
        if left_ok && right_ok && d[i] > threshold {
            out.push(ChangePoint {
                t_s: curve[i].0 as f64 * hop_s,
                score: d[i],
            });
        }
    }
    Ok(out)
}

/// Splits every region at its interior change points, then applies the
/// optional duration limits. Utterance ids are `{prefix}{index}`.
pub fn assemble_utterances(
    regions: &[SpeechRegion],
    change_points: &[ChangePoint],
    cfg: &SegConfig,
    prefix: &str,
) -> Vec<HypUtterance> {
    let mut out = Vec::new();
    for r in regions {
        let mut cuts: Vec<f64> = change_points
            .iter()
            .map(|c| c.t_s)
            .filter(|&t| t > r.start_s && t < r.end_s)
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut bounds = vec![r.start_s];
        bounds.extend(cuts);
        bounds.push(r.end_s);
        for w in bounds.windows(2) {
            let d = w[1] - w[0];
            if cfg.min_utt_s.is_some_and(|m| d < m) || cfg.max_utt_s.is_some_and(|m| d > m) {
                continue;
            }
            out.push(HypUtterance::new(format!("{prefix}{}", out.len()), w[0], w[1]));
        }
    }
    out
}

/// Keeps each hyp overlapping some ref by at least `min_ratio` of that ref's
/// duration, labelled with the speaker of the ref it overlaps most. Equal
/// overlaps go to the ref that starts first.
pub fn overlap_filter(
    hyps: &[HypUtterance],
    refs: &[RefUtterance],
    min_ratio: f64,
) -> Vec<(HypUtterance, String)> {
    let mut out = Vec::new();
    for h in hyps {
        let mut best: Option<(f64, f64, &RefUtterance)> = None;
        let mut qualifies = false;
        for r in refs {
            let ov = overlap_s((h.start_s, h.end_s), (r.start_s, r.end_s));
            if ov >= min_ratio * (r.end_s - r.start_s) && ov > 0.0 {
                qualifies = true;
            }
            if ov <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bo, bs, _)) => ov > bo || (ov == bo && r.start_s < bs),
            };
            if better {
                best = Some((ov, r.start_s, r));
            }
        }
        if let (true, Some((_, _, r))) = (qualifies, best) {
            out.push((h.clone(), r.speaker_id.clone()));
        }
    }
    out
}

/// Percentage of refs overlapped by some hyp for at least `min_ratio` of
/// their duration. 100 when there are no refs.
pub fn utterance_recall(hyps: &[HypUtterance], refs: &[RefUtterance], min_ratio: f64) -> f64 {
    if refs.is_empty() {
        return 100.0;
    }
    let covered = refs
        .iter()
        .filter(|r| {
            hyps.iter().any(|h| {
                let ov = overlap_s((h.start_s, h.end_s), (r.start_s, r.end_s));
                ov > 0.0 && ov >= min_ratio * (r.end_s - r.start_s)
            })
        })
        .count();
    100.0 * covered as f64 / refs.len() as f64
}

/// Mean of the stream rows whose hop time falls in `[start_s, end_s)`, split
/// into `m` equal sub-intervals and L2-normalised. A sub-interval without
/// rows takes the row nearest its midpoint.
pub fn stream_embeddings(
    stream: &EmbeddingMatrix,
    hop_s: f64,
    start_s: f64,
    end_s: f64,
    m: usize,
) -> Vec<Vec<f32>> {
    let n = stream.rows();
    if n == 0 {
        return Vec::new();
    }
    let first_at = |t: f64| ((t / hop_s).ceil().max(0.0) as usize).min(n);
    let width = (end_s - start_s) / m as f64;
    (0..m)
        .map(|k| {
            let a = start_s + k as f64 * width;
            let b = if k + 1 == m { end_s } else { a + width };
            let (lo, hi) = (first_at(a), first_at(b));
            let mean = if hi > lo {
                mean_rows(stream, lo, hi)
            } else {
                let mid = (((a + b) / 2.0 / hop_s).round().max(0.0) as usize).min(n - 1);
                mean_rows(stream, mid, mid + 1)
            };
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if norm > f64::EPSILON { 1.0 / norm } else { 1.0 };
            mean.iter().map(|v| (v * scale) as f32).collect()
        })
        .collect()
}

/// Which segmentation front end produces the hypothesis utterances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontEnd {
    /// The clip's own utterances, taken as given.
    Groundtruth,
    /// Energy VAD split at speaker changes.
    Full,
    /// Energy VAD regions only.
    VadOnly,
}

impl FrontEnd {
    pub fn name(self) -> &'static str {
        match self {
            FrontEnd::Groundtruth => "groundtruth",
            FrontEnd::Full => "full",
            FrontEnd::VadOnly => "vad_only",
        }
    }
}

/// Hypothesis utterances for one clip, embeddings attached.
pub fn segment_clip(clip: &Clip, front_end: FrontEnd, cfg: &SegConfig) -> Result<Vec<HypUtterance>> {
    cfg.validate()?;
    if front_end == FrontEnd::Groundtruth {
        return Ok(clip.utterances.iter().map(HypUtterance::from_reference).collect());
    }
    let streams = &clip.audio_streams;
    let missing = |what: &str| Error::Empty(format!("clip {} has no {what} stream", clip.id));
    let energy = streams.energy.as_ref().ok_or_else(|| missing("energy"))?;
    let speaker = streams.speaker_stream.as_ref().ok_or_else(|| missing("speaker"))?;
    let energy: Vec<f64> = energy.matrix.data().iter().map(|&v| v as f64).collect();
    let regions = energy_vad(&energy, streams.hop_s, cfg)?;
    let changes = match front_end {
        FrontEnd::Full => detect_change_points(&speaker.matrix, streams.hop_s, cfg)?,
        _ => Vec::new(),
    };
    let mut hyps = assemble_utterances(&regions, &changes, cfg, &format!("{}_h", clip.id));
    for h in &mut hyps {
        h.segment_embeddings = stream_embeddings(
            &speaker.matrix,
            streams.hop_s,
            h.start_s,
            h.end_s,
            cfg.segments_per_utterance,
        );
    }
    Ok(hyps)
}

/// [`segment_clip`] over every clip, keyed by clip id.
pub fn segment_corpus(
    corpus: &Corpus,
    front_end: FrontEnd,
    cfg: &SegConfig,
) -> Result<HashMap<String, Vec<HypUtterance>>> {
    corpus
        .clips
        .iter()
        .map(|c| Ok((c.id.clone(), segment_clip(c, front_end, cfg)?)))
        .collect()
}

/// Utterance recall pooled over every clip's refs. A corpus with no refs
/// scores 100.
pub fn corpus_recall(corpus: &Corpus, hyps: &HashMap<String, Vec<HypUtterance>>, min_ratio: f64) -> f64 {
    let empty = Vec::new();
    let mut hits = 0.0;
    let mut n_refs = 0usize;
    for clip in &corpus.clips {
        let refs = clip_refs(clip);
        hits += utterance_recall(hyps.get(&clip.id).unwrap_or(&empty), &refs, min_ratio) / 100.0 * refs.len() as f64;
        n_refs += refs.len();
    }
    if n_refs == 0 {
        100.0
    } else {
        100.0 * hits / n_refs as f64
    }
}

/// Refs of a clip: its utterances with a known speaker.
pub fn clip_refs(clip: &Clip) -> Vec<RefUtterance> {
    clip.utterances
        .iter()
        .filter(|u| u.has_known_speaker())
        .map(RefUtterance::from)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: f64, e: f64, who: &str) -> RefUtterance {
        RefUtterance {
            start_s: s,
            end_s: e,
            speaker_id: who.into(),
        }
    }

    fn h(s: f64, e: f64) -> HypUtterance {
        HypUtterance::new("h", s, e)
    }

    #[test]
    fn all_zero_energy_has_no_speech() {
        let out = energy_vad(&vec![0.0; 300], 0.01, &SegConfig::default()).unwrap();
        assert!(out.is_empty());
        assert!(energy_vad(&[], 0.01, &SegConfig::default()).is_err());
    }

    #[test]
    fn step_energy_gives_one_region() {
        let mut e = vec![0.0; 100];
        e.extend(vec![1.0; 200]);
        e.extend(vec![0.0; 100]);
        let out = energy_vad(&e, 0.01, &SegConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].start_s - 1.0).abs() <= 0.02 + 1e-9, "{out:?}");
        assert!((out[0].end_s - 3.0).abs() <= 0.02 + 1e-9, "{out:?}");
    }

    #[test]
    fn short_gap_bridged_by_hangover() {
        let mut e = vec![0.0; 100];
        e.extend(vec![1.0; 50]);
        e.extend(vec![0.0; 10]);
        e.extend(vec![1.0; 50]);
        e.extend(vec![0.0; 100]);
        let cfg = SegConfig {
            vad_hangover_s: 0.3,
            ..SegConfig::default()
        };
        assert_eq!(energy_vad(&e, 0.01, &cfg).unwrap().len(), 1);
        let cfg = SegConfig {
            vad_hangover_s: 0.0,
            ..SegConfig::default()
        };
        assert_eq!(energy_vad(&e, 0.01, &cfg).unwrap().len(), 2);
    }

    #[test]
    fn assembly_splits_and_filters() {
        let regions = [SpeechRegion { start_s: 1.0, end_s: 5.0 }];
        let cps = [
            ChangePoint { t_s: 2.0, score: 1.0 },
            ChangePoint { t_s: 4.0, score: 1.0 },
            ChangePoint { t_s: 7.0, score: 1.0 },
        ];
        let cfg = SegConfig::default();
        let got: Vec<_> = assemble_utterances(&regions, &cps, &cfg, "u")
            .iter()
            .map(|u| (u.start_s, u.end_s))
            .collect();
        assert_eq!(got, vec![(1.0, 2.0), (2.0, 4.0), (4.0, 5.0)]);
        let cfg = SegConfig {
            min_utt_s: Some(1.5),
            ..SegConfig::default()
        };
        let got: Vec<_> = assemble_utterances(&regions, &cps, &cfg, "u")
            .iter()
            .map(|u| (u.start_s, u.end_s))
            .collect();
        assert_eq!(got, vec![(2.0, 4.0)]);
        let none = assemble_utterances(&regions, &[], &SegConfig::default(), "u");
        assert_eq!((none[0].start_s, none[0].end_s), (1.0, 5.0));
    }

    #[test]
    fn overlap_rule_examples() {
        // 10% of a 2 s ref
        assert!(overlap_filter(&[h(0.0, 0.2)], &[r(0.0, 2.0, "a")], 0.15).is_empty());
        let kept = overlap_filter(&[h(1.0, 3.0)], &[r(1.0, 3.0, "a")], 0.15);
        assert_eq!(kept[0].1, "a");
        // 50% of A (1 s), 20% of B (0.4 s)
        let kept = overlap_filter(
            &[h(1.0, 2.4)],
            &[r(0.0, 2.0, "A"), r(2.0, 4.0, "B")],
            0.15,
        );
        assert_eq!(kept[0].1, "A");
    }

    #[test]
    fn recall_examples() {
        let refs = [r(0.0, 1.0, "a"), r(2.0, 3.0, "b")];
        let hyps: Vec<HypUtterance> = refs.iter().map(|x| h(x.start_s, x.end_s)).collect();
        assert_eq!(utterance_recall(&hyps, &refs, 0.15), 100.0);
        assert_eq!(utterance_recall(&[], &refs, 0.15), 0.0);
        assert_eq!(utterance_recall(&[], &[], 0.15), 100.0);
        let hyps = [h(0.8, 1.5), h(2.9, 3.5)];
        assert_eq!(utterance_recall(&hyps, &refs, 0.15), 50.0);
    }

    #[test]
    fn stream_embeddings_average_rows_in_interval() {
        let m = EmbeddingMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let e = stream_embeddings(&m, 0.5, 0.0, 1.0, 1);
        assert_eq!(e, vec![vec![1.0, 0.0]]);
        let e = stream_embeddings(&m, 0.5, 0.5, 1.5, 1);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((e[0][0] - s).abs() < 1e-6 && (e[0][1] - s).abs() < 1e-6);
        let e = stream_embeddings(&m, 0.5, 0.0, 2.0, 2);
        assert_eq!(e, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }
}
