mod common;

use asd_core::corpus::EmbeddingMatrix;
use asd_core::segmentation::{
    detect_change_points, energy_vad, overlap_filter, segment_clip, utterance_recall, FrontEnd, HypUtterance,
    RefUtterance, SegConfig, DEFAULT_MIN_OVERLAP,
};
use asd_core::synthgen::{generate_corpus, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HOP: f64 = 0.05;

/// `seconds` of each speaker in turn, one row per hop, optional noise.
fn turn_stream(speakers: &[usize], seconds: f64, dim: usize, noise: f64, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = (seconds / HOP).round() as usize;
    let mut rows = Vec::new();
    for &s in speakers {
        for _ in 0..per {
            let mut v = vec![0.0f32; dim];
            v[s] = 1.0;
            for x in v.iter_mut() {
                *x += (noise * rng.sample::<f64, _>(rand_distr::StandardNormal)) as f32;
            }
            rows.push(v);
        }
    }
    EmbeddingMatrix::from_rows(&rows).unwrap()
}

/// Hops of the `count` largest, mutually distant change scores, by scanning every hop.
fn brute_force_peaks(stream: &EmbeddingMatrix, w: usize, count: usize) -> Vec<usize> {
    let mean = |lo: usize, hi: usize| -> Vec<f64> {
        let mut m = vec![0.0; stream.cols()];
        for r in lo..hi {
            for (a, v) in m.iter_mut().zip(stream.row(r)) {
                *a += *v as f64 / (hi - lo) as f64;
            }
        }
        m
    };
    let mut scored: Vec<(f64, usize)> = (w..=stream.rows() - w)
        .map(|t| {
            let (a, b) = (mean(t - w, t), mean(t, t + w));
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (1.0 - dot / (na * nb), t)
        })
        .collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut peaks: Vec<usize> = Vec::new();
    for (_, t) in scored {
        if peaks.len() == count {
            break;
        }
        if peaks.iter().all(|p| p.abs_diff(t) > 2 * w) {
            peaks.push(t);
        }
    }
    peaks.sort_unstable();
    peaks
}

#[test]
fn two_speakers_give_one_change_at_the_switch() {
    let cfg = SegConfig::default();
    let stream = turn_stream(&[0, 1], 2.0, 8, 0.0, 0);
    let cps = detect_change_points(&stream, HOP, &cfg).unwrap();
    assert_eq!(cps.len(), 1, "{cps:?}");
    assert!((cps[0].t_s - 2.0).abs() <= HOP + 1e-9);
    let oracle = brute_force_peaks(&stream, 10, 1);
    assert!((cps[0].t_s - oracle[0] as f64 * HOP).abs() <= HOP + 1e-9);
}

#[test]
fn three_speakers_give_two_ordered_changes() {
    let cfg = SegConfig::default();
    let stream = turn_stream(&[0, 1, 2], 2.0, 8, 0.0, 0);
    let cps = detect_change_points(&stream, HOP, &cfg).unwrap();
    assert_eq!(cps.len(), 2, "{cps:?}");
    assert!(cps[0].t_s < cps[1].t_s);
    let oracle = brute_force_peaks(&stream, 10, 2);
    for (c, o) in cps.iter().zip(&oracle) {
        assert!((c.t_s - *o as f64 * HOP).abs() <= HOP + 1e-9);
    }
    assert!((cps[0].t_s - 2.0).abs() <= HOP + 1e-9 && (cps[1].t_s - 4.0).abs() <= HOP + 1e-9);
}

#[test]
fn constant_stream_has_no_changes() {
    let stream = turn_stream(&[3], 4.0, 8, 0.0, 0);
    assert!(detect_change_points(&stream, HOP, &SegConfig::default()).unwrap().is_empty());
}

#[test]
fn step_energy_matches_threshold_oracle() {
    let cfg = SegConfig::default();
    let mut energy = vec![0.05; 20];
    energy.extend(vec![1.0; 40]);
    energy.extend(vec![0.05; 20]);
    let regions = energy_vad(&energy, HOP, &cfg).unwrap();
    assert_eq!(regions.len(), 1);
    // brute force: first and last hop whose 5-hop centred mean clears floor + margin
    let smoothed: Vec<f64> = (0..energy.len())
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 3).min(energy.len());
            energy[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let above: Vec<usize> = (0..energy.len()).filter(|&i| smoothed[i] > 0.05 + cfg.vad_threshold_margin).collect();
    let start = *above.first().unwrap() as f64 * HOP;
    let end = (*above.last().unwrap() + 1) as f64 * HOP;
    assert!((regions[0].start_s - start).abs() < 1e-9 && (regions[0].end_s - end).abs() < 1e-9);
    assert!((regions[0].start_s - 1.0).abs() <= 2.0 * HOP + 1e-9);
    assert!((regions[0].end_s - 3.0).abs() <= 2.0 * HOP + 1e-9);
}

#[test]
fn synthetic_hypotheses_are_sorted_and_disjoint() {
    let cfg = SynthConfig {
        n_clips: 3,
        dim: 16,
        ..SynthConfig::default()
    };
    let (corpus, _) = generate_corpus(&cfg).unwrap();
    for clip in &corpus.clips {
        for fe in [FrontEnd::Full, FrontEnd::VadOnly] {
            let hyps = segment_clip(clip, fe, &SegConfig::default()).unwrap();
            assert!(!hyps.is_empty());
            for w in hyps.windows(2) {
                assert!(w[0].end_s <= w[1].start_s);
            }
            assert!(hyps.iter().all(|h| h.start_s < h.end_s && h.segment_embeddings.len() == 1));
        }
    }
}

fn interval() -> impl Strategy<Value = (f64, f64)> {
    // quarter-second grid makes ties and exact 15% boundaries likely
    (0u32..80, 1u32..24).prop_map(|(s, d)| (s as f64 * 0.25, (s + d) as f64 * 0.25))
}

fn hyps_and_refs() -> impl Strategy<Value = (Vec<HypUtterance>, Vec<RefUtterance>)> {
    (
        prop::collection::vec(interval(), 0..8),
        prop::collection::vec((interval(), 0usize..4), 0..8),
    )
        .prop_map(|(h, r)| {
            let hyps = h.into_iter().enumerate().map(|(i, (s, e))| HypUtterance::new(format!("h{i}"), s, e)).collect();
            let refs = r
                .into_iter()
                .map(|((s, e), who)| RefUtterance {
                    start_s: s,
                    end_s: e,
                    speaker_id: format!("s{who}"),
                })
                .collect();
            (hyps, refs)
        })
}

proptest! {
    #![proptest_config(common::fixed_cases(100))]

    #[test]
    fn filter_and_recall_match_interval_brute_force((hyps, refs) in hyps_and_refs()) {
        let kept = overlap_filter(&hyps, &refs, DEFAULT_MIN_OVERLAP);
        let want = common::brute_force_filter(&hyps, &refs, DEFAULT_MIN_OVERLAP);
        let got: Vec<(usize, String)> = kept
            .iter()
            .map(|(h, s)| (hyps.iter().position(|x| x.utt_id == h.utt_id).unwrap(), s.clone()))
            .collect();
        prop_assert_eq!(got, want);
        prop_assert_eq!(
            utterance_recall(&hyps, &refs, DEFAULT_MIN_OVERLAP),
            common::brute_force_recall(&hyps, &refs, DEFAULT_MIN_OVERLAP)
        );
    }

    #[test]
    fn recall_never_drops_when_hypotheses_are_added((hyps, refs) in hyps_and_refs(), extra in interval()) {
        let before = utterance_recall(&hyps, &refs, DEFAULT_MIN_OVERLAP);
        let mut more = hyps.clone();
        more.push(HypUtterance::new("extra", extra.0, extra.1));
        prop_assert!(utterance_recall(&more, &refs, DEFAULT_MIN_OVERLAP) >= before);
    }

    #[test]
    fn change_points_ignore_stream_scale(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let cfg = SegConfig::default();
        let stream = turn_stream(&[0, 1, 2, 1], 1.5, 8, 0.05, seed);
        let scaled = EmbeddingMatrix::new(
            stream.rows(),
            stream.cols(),
            stream.data().iter().map(|v| (*v as f64 * scale) as f32).collect(),
        )
        .unwrap();
        let a: Vec<f64> = detect_change_points(&stream, HOP, &cfg).unwrap().iter().map(|c| c.t_s).collect();
        let b: Vec<f64> = detect_change_points(&scaled, HOP, &cfg).unwrap().iter().map(|c| c.t_s).collect();
        prop_assert_eq!(a, b);
    }
}
