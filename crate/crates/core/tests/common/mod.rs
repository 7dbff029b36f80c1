//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use asd_core::eval::FrameDetection;
use asd_core::kernel::{AttentionParams, Matrix};
use asd_core::segmentation::{HypUtterance, RefUtterance};
use rand::Rng;

pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Multi-head attention written as explicit loops over queries, heads, keys.
pub fn naive_attention(p: &AttentionParams<f64>, q: &Matrix<f64>, kv: &Matrix<f64>, heads: usize) -> Vec<Vec<f64>> {
    let d = p.wq.rows();
    let dh = d / heads;
    let proj = |x: &[f64], w: &Matrix<f64>, b: &Matrix<f64>| -> Vec<f64> {
        (0..d)
            .map(|j| b[(0, j)] + (0..d).map(|i| x[i] * w[(i, j)]).sum::<f64>())
            .collect()
    };
    let mut keys: Vec<Vec<f64>> = (0..kv.rows()).map(|r| proj(kv.row(r), &p.wk, &p.bk)).collect();
    let mut vals: Vec<Vec<f64>> = (0..kv.rows()).map(|r| proj(kv.row(r), &p.wv, &p.bv)).collect();
    if let Some((sk, sv)) = &p.sink {
        keys.push(sk.row(0).to_vec());
        vals.push(sv.row(0).to_vec());
    }
    let mut out = Vec::new();
    for r in 0..q.rows() {
        let qp = proj(q.row(r), &p.wq, &p.bq);
        let mut concat = vec![0.0; d];
        for h in 0..heads {
            let lo = h * dh;
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| (lo..lo + dh).map(|c| qp[c] * k[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, v) in e.iter().zip(&vals) {
                for c in lo..lo + dh {
                    concat[c] += w / z * v[c];
                }
            }
        }
        out.push(proj(&concat, &p.wo, &p.bo));
    }
    out
}

/// Precision/recall enumerated directly, then the VOC2012 all-point envelope
/// as a maximum over all later precisions.
pub fn brute_force_ap(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if tp_flags.is_empty() { 100.0 } else { 0.0 };
    }
    let n = tp_flags.len();
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    for k in 1..=n {
        let tp = tp_flags[..k].iter().filter(|&&t| t).count();
        prec.push(tp as f64 / k as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    let mut ap = 0.0;
    let mut prev_rec = 0.0;
    for k in 0..n {
        if rec[k] > prev_rec {
            let env = (k..n).map(|j| prec[j]).fold(0.0, f64::max);
            ap += (rec[k] - prev_rec) * env;
            prev_rec = rec[k];
        }
    }
    100.0 * ap
}

/// Ranking and identity matching done independently of the library.
pub fn brute_force_voc(dets: &[FrameDetection], gts: &[FrameDetection]) -> f64 {
    let mut order: Vec<&FrameDetection> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.clip_id.cmp(&b.clip_id))
            .then(a.frame_index.cmp(&b.frame_index))
            .then(a.track_id.cmp(&b.track_id))
    });
    let mut used = vec![false; gts.len()];
    let flags: Vec<bool> = order
        .iter()
        .map(|d| {
            for (i, g) in gts.iter().enumerate() {
                if !used[i] && g.clip_id == d.clip_id && g.frame_index == d.frame_index && g.track_id == d.track_id {
                    used[i] = true;
                    return true;
                }
            }
            false
        })
        .collect();
    brute_force_ap(&flags, gts.len())
}

/// Intersection length by sampling-free interval arithmetic.
pub fn inter(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let lo = if a0 > b0 { a0 } else { b0 };
    let hi = if a1 < b1 { a1 } else { b1 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

pub fn brute_force_filter(hyps: &[HypUtterance], refs: &[RefUtterance], ratio: f64) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    for (hi, h) in hyps.iter().enumerate() {
        let ov: Vec<f64> = refs.iter().map(|r| inter(h.start_s, h.end_s, r.start_s, r.end_s)).collect();
        let keep = refs
            .iter()
            .zip(&ov)
            .any(|(r, &o)| o > 0.0 && o >= ratio * (r.end_s - r.start_s));
        if !keep {
            continue;
        }
        let best = ov.iter().cloned().fold(0.0, f64::max);
        let mut winners: Vec<&RefUtterance> = refs.iter().zip(&ov).filter(|(_, &o)| o == best).map(|(r, _)| r).collect();
        winners.sort_by(|a, b| a.start_s.partial_cmp(&b.start_s).unwrap());
        out.push((hi, winners[0].speaker_id.clone()));
    }
    out
}

pub fn brute_force_recall(hyps: &[HypUtterance], refs: &[RefUtterance], ratio: f64) -> f64 {
    if refs.is_empty() {
        return 100.0;
    }
    let mut hit = 0;
    for r in refs {
        let mut found = false;
        for h in hyps {
            let o = inter(h.start_s, h.end_s, r.start_s, r.end_s);
            if o > 0.0 && o >= ratio * (r.end_s - r.start_s) {
                found = true;
            }
        }
        if found {
            hit += 1;
        }
    }
    100.0 * hit as f64 / refs.len() as f64
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Matrix<f64>, h: f64, mut f: impl FnMut(&Matrix<f64>) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over entries.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

use asd_core::model::{batch_loss, batch_loss_and_grads, ModelConfig, ModelParams, TrainingBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A random D=16, 4-head, one-layer head (sink and initialisation drawn per
/// seed) with every tensor perturbed away from its start, plus a random batch.
pub fn random_head_problem(seed: u64) -> (ModelConfig, ModelParams<f64>, TrainingBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 16;
    let mut cfg = ModelConfig::with_dim(d);
    cfg.n_heads = 4;
    cfg.n_encoder_layers = 1;
    cfg.ffn_hidden = 32;
    cfg.cross_attention_sink = rng.random_bool(0.5);
    cfg.near_identity_init = rng.random_bool(0.5);
    cfg.seed = seed;
    let mut params = ModelParams::<f64>::init(&cfg).unwrap();
    for (_, m) in params.named_mut() {
        for v in m.data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let n_ids = rng.random_range(2..=4);
    let identity_frames = (0..n_ids)
        .map(|_| {
            let t = rng.random_range(1..=5);
            randn(&mut rng, t, d, 1.0).cast()
        })
        .collect();
    let n_utts = rng.random_range(1..=3);
    let utterances = (0..n_utts)
        .map(|_| {
            let m = rng.random_range(1..=3);
            randn(&mut rng, m, d, 1.0).cast()
        })
        .collect();
    let batch = TrainingBatch {
        clip_id: "c".into(),
        speaker_id: "s".into(),
        identity_ids: (0..n_ids).map(|i| format!("id{i}")).collect(),
        identity_frames,
        utterances,
        target: rng.random_range(0..n_ids),
    };
    (cfg, params, batch)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    /// Worst tensor-wise `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
    pub max_rel: f64,
    pub checked: usize,
    /// Entries whose ±h probe flips an encoder ReLU, where central
    /// differences do not estimate the derivative.
    pub skipped: usize,
}

/// Tape gradient of the training loss against central differences with step
/// `h`, over every tensor entry of a random head.
pub fn head_gradcheck(seed: u64, h: f64, floor: f64) -> GradCheck {
    let (cfg, params, batch) = random_head_problem(seed);
    let (_, analytic) = batch_loss_and_grads(&params, &batch, &cfg).unwrap();
    let pattern = relu_pattern(&cfg, &params, &batch);
    let mut out = GradCheck::default();
    let mut p = params.clone();
    for (ti, a) in analytic.iter().enumerate() {
        let (mut av, mut nv) = (Vec::new(), Vec::new());
        for i in 0..a.len() {
            let orig = p.named()[ti].1.data()[i];
            let mut eval = |v: f64| {
                p.named_mut()[ti].1.data_mut()[i] = v;
                let kink = relu_pattern(&cfg, &p, &batch) != pattern;
                (batch_loss(&p, &batch, &cfg).unwrap(), kink)
            };
            let (up, k1) = eval(orig + h);
            let (down, k2) = eval(orig - h);
            p.named_mut()[ti].1.data_mut()[i] = orig;
            if k1 || k2 {
                out.skipped += 1;
                continue;
            }
            av.push(a.data()[i]);
            nv.push((up - down) / (2.0 * h));
            out.checked += 1;
        }
        out.max_rel = out.max_rel.max(norm_rel_error(&av, &nv, floor));
    }
    out
}

fn layer_norm_rows(x: &[Vec<f64>], gain: &Matrix<f64>, bias: &Matrix<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sd = (var + asd_core::kernel::LAYER_NORM_EPS).sqrt();
            r.iter()
                .enumerate()
                .map(|(c, v)| gain[(0, c)] * (v - mu) / sd + bias[(0, c)])
                .collect()
        })
        .collect()
}

/// Signs of every encoder ReLU pre-activation over the batch's identities.
/// The loss is smooth between changes of this pattern.
pub fn relu_pattern(cfg: &ModelConfig, params: &ModelParams<f64>, batch: &TrainingBatch) -> Vec<bool> {
    let mut pattern = Vec::new();
    for frames in &batch.identity_frames {
        let mut x: Vec<Vec<f64>> = (0..frames.rows())
            .map(|r| frames.row(r).iter().map(|&v| v as f64).collect())
            .collect();
        for l in &params.encoder {
            let xm = Matrix::from_rows(&x).unwrap();
            let att = naive_attention(&l.attn, &xm, &xm, cfg.n_heads);
            let res: Vec<Vec<f64>> = x.iter().zip(&att).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
            let h = layer_norm_rows(&res, &l.ln1_gain, &l.ln1_bias);
            let mut next = Vec::new();
            for row in &h {
                let pre: Vec<f64> = (0..l.ffn_w1.cols())
                    .map(|j| l.ffn_b1[(0, j)] + row.iter().enumerate().map(|(i, v)| v * l.ffn_w1[(i, j)]).sum::<f64>())
                    .collect();
                pattern.extend(pre.iter().map(|&p| p > 0.0));
                let act: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
                let out: Vec<f64> = (0..row.len())
                    .map(|j| row[j] + l.ffn_b2[(0, j)] + act.iter().enumerate().map(|(i, v)| v * l.ffn_w2[(i, j)]).sum::<f64>())
                    .collect();
                next.push(out);
            }
            x = layer_norm_rows(&next, &l.ln2_gain, &l.ln2_bias);
        }
    }
    pattern
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` for one tensor.
pub fn norm_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

use asd_core::corpus::{Clip, EmbeddingMatrix, EmbeddingRef, FaceTrack, Utterance};

pub fn track(id: &str, identity: &str, start: usize, end: usize, rows: Vec<Vec<f32>>) -> FaceTrack {
    FaceTrack {
        track_id: id.into(),
        identity_id: identity.into(),
        track_index: 0,
        start_frame: start,
        end_frame: end,
        frame_embeddings: EmbeddingRef::new(format!("{id}.fvem"), EmbeddingMatrix::from_rows(&rows).unwrap()),
        crop_meta: None,
        boxes: None,
    }
}

pub fn utterance(id: &str, speaker: &str, start_s: f64, end_s: f64, emb: Vec<f32>) -> Utterance {
    Utterance {
        utt_id: id.into(),
        speaker_id: speaker.into(),
        start_s,
        end_s,
        segment_embeddings: EmbeddingRef::new(format!("{id}.fvem"), EmbeddingMatrix::from_rows(&[emb]).unwrap()),
    }
}

pub fn clip(id: &str, duration_s: f64, tracks: Vec<FaceTrack>, utterances: Vec<Utterance>) -> Clip {
    Clip {
        id: id.into(),
        duration_s,
        fps: 30.0,
        sample_rate_hz: 16_000,
        tracks,
        utterances,
        audio_streams: Default::default(),
        offscreen_ids: Vec::new(),
    }
}

/// `n` rows of the unit basis vector `e_axis` in `dim` dimensions.
pub fn basis_rows(n: usize, dim: usize, axis: usize) -> Vec<Vec<f32>> {
    let mut v = vec![0.0; dim];
    v[axis] = 1.0;
    vec![v; n]
}

/// Property-test settings with a fixed seed so runs are reproducible.
pub fn fixed_cases(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Default::default()
    }
}

use asd_core::selflift::{batch_loss_and_grads as ms_batch_loss_and_grads, Mined, MsParams, MultiSimilarityLoss, ProjectionParams};

/// Cosine similarity matrix of the projected, L2-normalised batch, computed
/// with plain loops.
pub fn projected_similarity(p: &ProjectionParams<f64>, faces: &Matrix<f64>, voices: &Matrix<f64>) -> Vec<f64> {
    let project = |x: &[f64], w: &Matrix<f64>, b: &Matrix<f64>| -> Vec<f64> {
        let y: Vec<f64> = (0..w.cols())
            .map(|j| b[(0, j)] + x.iter().enumerate().map(|(i, v)| v * w[(i, j)]).sum::<f64>())
            .collect();
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.iter().map(|v| v / n).collect()
    };
    let mut z = Vec::new();
    for r in 0..faces.rows() {
        z.push(project(faces.row(r), &p.face_w, &p.face_b));
    }
    for r in 0..voices.rows() {
        z.push(project(voices.row(r), &p.voice_w, &p.voice_b));
    }
    let n = z.len();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
        }
    }
    s
}

/// A random 8-point face/voice batch at D=16 with perturbed projections.
pub fn random_ms_problem(seed: u64) -> (ProjectionParams<f64>, Matrix<f64>, Matrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 16;
    let mut p = ProjectionParams::<f64>::init(d, d, 0.3, seed);
    p.face_b = randn(&mut rng, 1, d, 0.1);
    p.voice_b = randn(&mut rng, 1, d, 0.1);
    let n_faces = rng.random_range(2..=6);
    let faces = randn(&mut rng, n_faces, d, 1.0);
    let voices = randn(&mut rng, 8 - n_faces, d, 1.0);
    let n_classes = rng.random_range(2..=4);
    let labels = (0..8).map(|_| rng.random_range(0..n_classes)).collect();
    (p, faces, voices, labels)
}

fn mined_sets(s: &[f64], labels: &[usize], ms: MsParams) -> Vec<Mined> {
    let loss = MultiSimilarityLoss::new(labels.to_vec(), ms);
    (0..labels.len()).map(|i| loss.mine(s, labels.len(), i)).collect()
}

/// Tape gradient of the multi-similarity batch loss against central
/// differences, over every projection entry. Probes that change the mined
/// pair sets cross a discontinuity and are skipped.
pub fn ms_gradcheck(seed: u64, h: f64, floor: f64) -> GradCheck {
    let ms = MsParams::default();
    let (params, faces, voices, labels) = random_ms_problem(seed);
    let (_, analytic) = ms_batch_loss_and_grads(&params, &faces, &voices, labels.clone(), ms).unwrap();
    let base = mined_sets(&projected_similarity(&params, &faces, &voices), &labels, ms);
    let mut out = GradCheck::default();
    let mut p = params.clone();
    for (ti, a) in analytic.iter().enumerate() {
        let (mut av, mut nv) = (Vec::new(), Vec::new());
        for i in 0..a.len() {
            let orig = p.named()[ti].1.data()[i];
            let mut eval = |v: f64| {
                p.named_mut()[ti].1.data_mut()[i] = v;
                let jump = mined_sets(&projected_similarity(&p, &faces, &voices), &labels, ms) != base;
                let loss = ms_batch_loss_and_grads(&p, &faces, &voices, labels.clone(), ms).unwrap().0;
                (loss, jump)
            };
            let (up, j1) = eval(orig + h);
            let (down, j2) = eval(orig - h);
            p.named_mut()[ti].1.data_mut()[i] = orig;
            if j1 || j2 {
                out.skipped += 1;
                continue;
            }
            av.push(a.data()[i]);
            nv.push((up - down) / (2.0 * h));
            out.checked += 1;
        }
        out.max_rel = out.max_rel.max(norm_rel_error(&av, &nv, floor));
    }
    out
}
