use std::collections::HashMap;
use std::path::{Path, PathBuf};

use asd_core::checkpoint::config_hash;
use asd_core::corpus::{load_manifest, Corpus};
use asd_core::eval::{evaluate_run, positive_frames, voc_map, ClipAp, EvalOptions, FrameDetection};
use asd_core::model::{load_checkpoint, save_checkpoint, score_corpus, ScoreResult, TrainConfig};
use asd_core::segmentation::{
    clip_refs, corpus_recall, segment_corpus, utterance_recall, FrontEnd, HypUtterance, SegConfig,
    DEFAULT_MIN_OVERLAP,
};
use asd_core::selflift::{crossmodal_recall_at_1, save_projections, FinetuneConfig, FinetuneData, ProjectionParams, RoundStats};
use asd_core::synthgen::{generate_corpus, write_synthetic, SynthConfig};
use log::info;
use serde::{Deserialize, Serialize};

use crate::run::{io_err, read_config, read_json, write_json, CliError, RunManifest};

pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const FINETUNE_REPORT_FILE: &str = "finetune_report.json";

/// Output of `segment`, input of `score` and `eval`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentOutput {
    pub config_hash: String,
    pub front_end: FrontEnd,
    pub recall_percent: f64,
    pub clips: Vec<ClipHyps>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClipHyps {
    pub clip_id: String,
    /// Absent when the clip has no reference utterances.
    pub recall_percent: Option<f64>,
    pub utterances: Vec<HypUtterance>,
}

/// Output of `score`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreOutput {
    pub config_hash: String,
    pub clips: Vec<ClipScores>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClipScores {
    pub clip_id: String,
    pub results: Vec<ScoreResult>,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    config_hash: String,
    initial_loss: f64,
    final_loss: Option<f64>,
    batches_per_epoch: usize,
    loss_curve_file: String,
}

#[derive(Debug, Serialize)]
struct FinetuneSummary {
    config_hash: String,
    rounds: Vec<RoundStats>,
    recall_at_1_before: f64,
    recall_at_1_after: f64,
}

/// `eval --detections` report: mAP of detections against every positive
/// frame, without the utterance-dependent subset.
#[derive(Debug, Serialize)]
struct DetectionReport {
    config_hash: String,
    corpus_id: String,
    map_percent: f64,
    per_clip_ap: Vec<ClipAp>,
    n_detections: usize,
    n_groundtruth: usize,
}

pub enum EvalInput {
    Detections(PathBuf),
    Scored { utterances: PathBuf, scores: PathBuf },
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    let corpus = load_manifest(path)?;
    info!("loaded {} clips from {}", corpus.clips.len(), path.display());
    Ok(corpus)
}

pub fn generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg: SynthConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut run = RunManifest::start("generate", config_hash(&cfg), None, Some(cfg.seed));
    let (corpus, truth) = generate_corpus(&cfg)?;
    let manifest = write_synthetic(&corpus, &truth, out)?;
    println!("{}", manifest.display());
    run.outputs.push(manifest);
    run.finish(out)
}

pub fn segment(corpus_path: &Path, config: Option<&Path>, front_end: FrontEnd, out: &Path) -> Result<(), CliError> {
    let cfg: SegConfig = read_config(config)?;
    let hash = config_hash(&(&cfg, front_end));
    let mut run = RunManifest::start("segment", hash.clone(), Some(corpus_path), None);
    let corpus = load_corpus(corpus_path)?;
    let hyps = segment_corpus(&corpus, front_end, &cfg)?;
    let recall = corpus_recall(&corpus, &hyps, DEFAULT_MIN_OVERLAP);
    let clips = corpus
        .clips
        .iter()
        .map(|c| {
            let refs = clip_refs(c);
            let utterances = hyps[&c.id].clone();
            ClipHyps {
                clip_id: c.id.clone(),
                recall_percent: (!refs.is_empty()).then(|| utterance_recall(&utterances, &refs, DEFAULT_MIN_OVERLAP)),
                utterances,
            }
        })
        .collect();
    write_json(
        out,
        &SegmentOutput {
            config_hash: hash,
            front_end,
            recall_percent: recall,
            clips,
        },
    )?;
    println!("recall_percent {recall}");
    run.outputs.push(out.into());
    run.finish(out)
}

pub fn finetune(corpus_path: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut cfg: FinetuneConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let hash = config_hash(&cfg);
    let mut run = RunManifest::start("finetune", hash.clone(), Some(corpus_path), Some(cfg.seed));
    let corpus = load_corpus(corpus_path)?;
    let data = FinetuneData::from_corpus(&corpus);
    let d = corpus.embedding_dim;
    let before = crossmodal_recall_at_1(&data, &ProjectionParams::init(d, d, cfg.init_noise, cfg.seed))?;
    let (params, report) = asd_core::selflift::finetune(&data, &cfg)?;
    let after = crossmodal_recall_at_1(&data, &params)?;
    save_projections(out, &params, &cfg)?;
    let summary = out.join(FINETUNE_REPORT_FILE);
    write_json(
        &summary,
        &FinetuneSummary {
            config_hash: hash,
            rounds: report.rounds,
            recall_at_1_before: before,
            recall_at_1_after: after,
        },
    )?;
    println!("recall_at_1 {before} -> {after}");
    run.outputs.extend([out.to_path_buf(), summary]);
    run.finish(out)
}

pub fn train(corpus_path: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    let hash = config_hash(&cfg);
    let mut run = RunManifest::start("train", hash.clone(), Some(corpus_path), Some(cfg.seed));
    let corpus = load_corpus(corpus_path)?;
    let (params, report) = asd_core::model::train(&corpus, &cfg)?;
    save_checkpoint(out, &params, &cfg.model)?;

    let curve = out.join(LOSS_CURVE_FILE);
    let mut w = csv::Writer::from_path(&curve).map_err(|e| io_err(&curve, e.into()))?;
    let rows = std::iter::once((0, report.initial_loss))
        .chain(report.loss_curve.iter().enumerate().map(|(e, &l)| (e + 1, l)));
    w.write_record(["epoch", "loss"]).map_err(|e| io_err(&curve, e.into()))?;
    for (epoch, loss) in rows {
        w.serialize((epoch, loss)).map_err(|e| io_err(&curve, e.into()))?;
    }
    w.flush().map_err(|e| io_err(&curve, e))?;

    let summary = out.join(TRAIN_REPORT_FILE);
    write_json(
        &summary,
        &TrainSummary {
            config_hash: hash,
            initial_loss: report.initial_loss,
            final_loss: report.loss_curve.last().copied(),
            batches_per_epoch: report.batches_per_epoch,
            loss_curve_file: LOSS_CURVE_FILE.into(),
        },
    )?;
    run.outputs.extend([out.to_path_buf(), curve, summary]);
    run.finish(out)
}

fn hyps_by_clip(seg: SegmentOutput) -> HashMap<String, Vec<HypUtterance>> {
    seg.clips.into_iter().map(|c| (c.clip_id, c.utterances)).collect()
}

pub fn score(corpus_path: &Path, checkpoint: &Path, utterances: &Path, out: &Path) -> Result<(), CliError> {
    let (params, model_cfg) = load_checkpoint(checkpoint)?;
    let hash = config_hash(&model_cfg);
    let mut run = RunManifest::start("score", hash.clone(), Some(corpus_path), Some(model_cfg.seed));
    let corpus = load_corpus(corpus_path)?;
    let hyps = hyps_by_clip(read_json(utterances)?);
    let mut scores = score_corpus(&corpus, &hyps, &params, &model_cfg)?;
    let clips = corpus
        .clips
        .iter()
        .filter_map(|c| {
            scores.remove(&c.id).map(|results| ClipScores {
                clip_id: c.id.clone(),
                results,
            })
        })
        .collect();
    write_json(out, &ScoreOutput { config_hash: hash, clips })?;
    run.outputs.push(out.into());
    run.finish(out)
}

pub fn eval(corpus_path: &Path, config: Option<&Path>, input: EvalInput, out: &Path) -> Result<(), CliError> {
    let mut opts: EvalOptions = read_config(config)?;
    let corpus = load_corpus(corpus_path)?;
    let (hash, map) = match input {
        EvalInput::Detections(path) => {
            let hash = config_hash(&opts);
            let dets: Vec<FrameDetection> = read_json(&path)?;
            let report = detection_report(&corpus, &dets, &opts, hash.clone());
            write_json(out, &report)?;
            (hash, report.map_percent)
        }
        EvalInput::Scored { utterances, scores } => {
            let seg: SegmentOutput = read_json(&utterances)?;
            if config.is_none() {
                opts.front_end = seg.front_end.name().into();
            }
            let hash = config_hash(&opts);
            let hyps = hyps_by_clip(seg);
            let scored: ScoreOutput = read_json(&scores)?;
            let scores = scored.clips.into_iter().map(|c| (c.clip_id, c.results)).collect();
            let mut report = evaluate_run(&corpus, &hyps, &scores, &opts)?;
            report.config_hash = hash.clone();
            write_json(out, &report)?;
            println!("recall_percent {}", report.recall_percent);
            (hash, report.map_percent)
        }
    };
    println!("map_percent {map}");
    let mut run = RunManifest::start("eval", hash, Some(corpus_path), None);
    run.outputs.push(out.into());
    run.finish(out)
}

fn detection_report(corpus: &Corpus, dets: &[FrameDetection], opts: &EvalOptions, hash: String) -> DetectionReport {
    let mut all_gts = Vec::new();
    let per_clip_ap = corpus
        .clips
        .iter()
        .map(|c| {
            let gts = positive_frames(c);
            let clip_dets: Vec<FrameDetection> = dets.iter().filter(|d| d.clip_id == c.id).cloned().collect();
            let ap = ClipAp {
                clip_id: c.id.clone(),
                ap_percent: voc_map(&clip_dets, &gts, opts.mode),
                n_detections: clip_dets.len(),
                n_groundtruth: gts.len(),
            };
            all_gts.extend(gts);
            ap
        })
        .collect();
    DetectionReport {
        config_hash: hash,
        corpus_id: corpus.corpus_id.clone(),
        map_percent: voc_map(dets, &all_gts, opts.mode),
        per_clip_ap,
        n_detections: dets.len(),
        n_groundtruth: all_gts.len(),
    }
}
