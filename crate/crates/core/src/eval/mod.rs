//! Frame attribution of utterance scores and VOC-style average precision.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, Clip, Corpus};
use crate::error::{Error, Result};
use crate::model::ScoreResult;
use crate::segmentation::{corpus_recall, HypUtterance, DEFAULT_MIN_OVERLAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub clip_id: String,
    pub frame_index: usize,
    pub track_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r#box: Option<BBox>,
}

impl FrameDetection {
    fn key(&self) -> (&str, usize, &str) {
        (&self.clip_id, self.frame_index, &self.track_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MatchMode {
    /// A detection matches the groundtruth with the same clip, frame and track.
    #[default]
    Identity,
    /// A detection matches a groundtruth box on the same clip and frame with
    /// IoU at least `min_iou`.
    BoxIou { min_iou: f64 },
}

/// Spreads one utterance's identity probabilities over the frames of every
/// concurrent track: frame `f` of a track of identity `i` gets
/// `probabilities[i]` when `start_s ≤ f/fps < end_s`.
pub fn attribute(scores: &ScoreResult, utt: &HypUtterance, clip: &Clip) -> Result<Vec<FrameDetection>> {
    if scores.clip_id != clip.id {
        return Err(Error::InvalidConfig(format!(
            "scores for clip {} applied to clip {}",
            scores.clip_id, clip.id
        )));
    }
    let prob: HashMap<&str, f64> = scores
        .identity_ids
        .iter()
        .map(String::as_str)
        .zip(scores.probabilities.iter().copied())
        .collect();
    let frames = clip.frames_in(utt.start_s, utt.end_s);
    let mut out = Vec::new();
    for t in &clip.tracks {
        let lo = frames.start.max(t.start_frame);
        let hi = frames.end.min(t.end_frame + 1);
        if lo >= hi {
            continue;
        }
        let p = *prob.get(t.identity_id.as_str()).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "scores for {} do not cover identity {}",
                scores.utt_id, t.identity_id
            ))
        })?;
        out.extend((lo..hi).map(|f| FrameDetection {
            clip_id: clip.id.clone(),
            frame_index: f,
            track_id: t.track_id.clone(),
            score: p,
            r#box: t.box_at(f),
        }));
    }
    Ok(out)
}

/// One detection per (clip, frame, track), keeping the highest score.
/// Output is sorted by that key.
pub fn merge_detections(dets: impl IntoIterator<Item = FrameDetection>) -> Vec<FrameDetection> {
    let mut best: BTreeMap<(String, usize, String), FrameDetection> = BTreeMap::new();
    for d in dets {
        let key = (d.clip_id.clone(), d.frame_index, d.track_id.clone());
        match best.get_mut(&key) {
            Some(prev) if prev.score >= d.score => {}
            Some(prev) => *prev = d,
            None => {
                best.insert(key, d);
            }
        }
    }
    best.into_values().collect()
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.map(f64::from);
    let [bx0, by0, bx1, by1] = b.map(f64::from);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Detections in evaluation order: descending score, then
/// (clip_id, frame_index, track_id) ascending.
pub fn ranked(dets: &[FrameDetection]) -> Vec<&FrameDetection> {
    let mut order: Vec<&FrameDetection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.key().cmp(&b.key())));
    order
}

/// TP/FP flag per ranked detection under greedy matching.
pub fn match_detections(ranked: &[&FrameDetection], gts: &[FrameDetection], mode: MatchMode) -> Vec<bool> {
    match mode {
        MatchMode::Identity => {
            let gt: HashSet<_> = gts.iter().map(FrameDetection::key).collect();
            let mut used = HashSet::new();
            ranked
                .iter()
                .map(|d| gt.contains(&d.key()) && used.insert(d.key()))
                .collect()
        }
        MatchMode::BoxIou { min_iou } => {
            let mut by_frame: HashMap<(&str, usize), Vec<usize>> = HashMap::new();
            for (i, g) in gts.iter().enumerate() {
                by_frame.entry((&g.clip_id, g.frame_index)).or_default().push(i);
            }
            let mut used = vec![false; gts.len()];
            ranked
                .iter()
                .map(|d| {
                    let Some(b) = &d.r#box else { return false };
                    let Some(cands) = by_frame.get(&(d.clip_id.as_str(), d.frame_index)) else {
                        return false;
                    };
                    // VOC: the best-overlapping box decides, matched or not
                    let mut best: Option<(f64, usize)> = None;
                    for &i in cands {
                        if let Some(gb) = &gts[i].r#box {
                            let o = iou(b, gb);
                            if best.is_none_or(|(bo, _)| o > bo) {
                                best = Some((o, i));
                            }
                        }
                    }
                    match best {
                        Some((o, i)) if o >= min_iou && !used[i] => {
                            used[i] = true;
                            true
                        }
                        _ => false,
                    }
                })
                .collect()
        }
    }
}

/// All-point interpolated average precision from TP flags in rank order.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut mrec = vec![0.0];
    let mut mpre = vec![0.0];
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        mrec.push(hits as f64 / n_gt as f64);
        mpre.push(hits as f64 / (k + 1) as f64);
    }
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

/// Single-class VOC2012 average precision, in percent. With no groundtruth
/// the result is 100 when there are also no detections and 0 otherwise.
pub fn voc_map(dets: &[FrameDetection], gts: &[FrameDetection], mode: MatchMode) -> f64 {
    let order = ranked(dets);
    let tp = match_detections(&order, gts, mode);
    100.0 * average_precision(&tp, gts.len())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipAp {
    pub clip_id: String,
    pub ap_percent: f64,
    pub n_detections: usize,
    pub n_groundtruth: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub front_end: String,
    pub corpus_id: String,
    #[serde(default)]
    pub config_hash: String,
    pub map_percent: f64,
    pub per_clip_ap: Vec<ClipAp>,
    pub recall_percent: f64,
    pub n_detections: usize,
    pub n_groundtruth: usize,
    pub dynamic_subset_track_count: usize,
    /// No track was concurrent with any hypothesis utterance.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub front_end: String,
    pub mode: MatchMode,
    pub min_overlap: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            front_end: "unnamed".into(),
            mode: MatchMode::Identity,
            min_overlap: DEFAULT_MIN_OVERLAP,
        }
    }
}

/// Positive (frame, track) pairs: a frame of a track of identity `i` is
/// positive when some utterance of `i` covers its time.
pub fn positive_frames(clip: &Clip) -> Vec<FrameDetection> {
    let mut out = Vec::new();
    for u in clip.utterances.iter().filter(|u| u.has_known_speaker()) {
        let frames = clip.frames_in(u.start_s, u.end_s);
        for t in clip.tracks_of(&u.speaker_id) {
            let lo = frames.start.max(t.start_frame);
            let hi = frames.end.min(t.end_frame + 1);
            out.extend((lo..hi).map(|f| FrameDetection {
                clip_id: clip.id.clone(),
                frame_index: f,
                track_id: t.track_id.clone(),
                score: 1.0,
                r#box: t.box_at(f),
            }));
        }
    }
    merge_detections(out)
}

/// Attribution, merging and mAP over the dynamic subset: tracks with no
/// concurrent hypothesis utterance are dropped, together with their
/// groundtruth. `hyps` and `scores` are keyed by clip id; every hypothesis
/// utterance needs a score with the same `utt_id`.
pub fn evaluate_run(
    corpus: &Corpus,
    hyps: &HashMap<String, Vec<HypUtterance>>,
    scores: &HashMap<String, Vec<ScoreResult>>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut all_dets = Vec::new();
    let mut all_gts = Vec::new();
    let mut per_clip = Vec::new();
    let mut subset_tracks = 0usize;
    let empty = Vec::new();
    for clip in &corpus.clips {
        let clip_hyps = hyps.get(&clip.id).unwrap_or(&empty);

        let by_utt: HashMap<&str, &ScoreResult> = scores
            .get(&clip.id)
            .map(|v| v.iter().map(|s| (s.utt_id.as_str(), s)).collect())
            .unwrap_or_default();
        let mut raw = Vec::new();
        for h in clip_hyps {
            if clip.tracks.is_empty() {
                break;
            }
            let s = by_utt.get(h.utt_id.as_str()).ok_or_else(|| {
                Error::Validation(vec![format!("clip {}: no score for utterance {}", clip.id, h.utt_id)])
            })?;
            raw.extend(attribute(s, h, clip)?);
        }
        let dets = merge_detections(raw);
        let subset: HashSet<&str> = clip
            .tracks
            .iter()
            .filter(|t| {
                clip_hyps.iter().any(|h| {
                    let f = clip.frames_in(h.start_s, h.end_s);
                    f.start.max(t.start_frame) < f.end.min(t.end_frame + 1)
                })
            })
            .map(|t| t.track_id.as_str())
            .collect();
        subset_tracks += subset.len();
        let gts: Vec<FrameDetection> = positive_frames(clip)
            .into_iter()
            .filter(|g| subset.contains(g.track_id.as_str()))
            .collect();
        per_clip.push(ClipAp {
            clip_id: clip.id.clone(),
            ap_percent: voc_map(&dets, &gts, opts.mode),
            n_detections: dets.len(),
            n_groundtruth: gts.len(),
        });
        all_dets.extend(dets);
        all_gts.extend(gts);
    }
    let recall_percent = corpus_recall(corpus, hyps, opts.min_overlap);
    Ok(EvalReport {
        front_end: opts.front_end.clone(),
        corpus_id: corpus.corpus_id.clone(),
        config_hash: String::new(),
        map_percent: voc_map(&all_dets, &all_gts, opts.mode),
        per_clip_ap: per_clip,
        recall_percent,
        n_detections: all_dets.len(),
        n_groundtruth: all_gts.len(),
        dynamic_subset_track_count: subset_tracks,
        degenerate: subset_tracks == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: usize, score: f64) -> FrameDetection {
        FrameDetection {
            clip_id: "c".into(),
            frame_index: frame,
            track_id: "t".into(),
            score,
            r#box: None,
        }
    }

    #[test]
    fn perfect_and_empty_cases() {
        let gts: Vec<_> = (0..5).map(|f| det(f, 1.0)).collect();
        assert_eq!(voc_map(&gts, &gts, MatchMode::Identity), 100.0);
        assert_eq!(voc_map(&[det(9, 0.5)], &gts, MatchMode::Identity), 0.0);
        assert_eq!(voc_map(&[], &[], MatchMode::Identity), 100.0);
        assert_eq!(voc_map(&[det(0, 0.5)], &[], MatchMode::Identity), 0.0);
    }

    #[test]
    fn envelope_on_tp_fp_tp_tp() {
        // precision 1, 1/2, 2/3, 3/4 at recall 1/3, 1/3, 2/3, 1; the envelope
        // lifts the 2/3 step to 3/4
        let ap = average_precision(&[true, false, true, true], 3);
        assert!((ap - (1.0 + 0.75 + 0.75) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = vec![det(0, 1.0)];
        let order = [&gts[0], &gts[0]];
        assert_eq!(match_detections(&order, &gts, MatchMode::Identity), vec![true, false]);
    }

    #[test]
    fn ties_broken_by_key() {
        let dets = vec![det(3, 0.5), det(1, 0.5), det(2, 0.9)];
        let frames: Vec<_> = ranked(&dets).iter().map(|d| d.frame_index).collect();
        assert_eq!(frames, vec![2, 1, 3]);
    }

    #[test]
    fn merge_keeps_max() {
        let out = merge_detections(vec![det(0, 0.3), det(0, 0.9), det(1, 0.2)]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(merge_detections(vec![det(4, 0.1)]), vec![det(4, 0.1)]);
    }

    #[test]
    fn box_mode_needs_iou() {
        let mut g = det(0, 1.0);
        g.r#box = Some([0.0, 0.0, 10.0, 10.0]);
        let mut near = det(0, 0.9);
        near.track_id = "other".into();
        near.r#box = Some([1.0, 1.0, 10.0, 10.0]);
        let mut far = det(0, 0.8);
        far.r#box = Some([20.0, 20.0, 30.0, 30.0]);
        let mode = MatchMode::BoxIou { min_iou: 0.5 };
        assert_eq!(voc_map(&[near.clone()], &[g.clone()], mode), 100.0);
        assert_eq!(voc_map(&[far], &[g], mode), 0.0);
    }
}
