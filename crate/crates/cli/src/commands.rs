use std::io::Write;
use std::path::Path;

use prunekit::distill::{conventional_loop, distill_loop, write_metrics_jsonl, TrainOutput};
use prunekit::importance::ImportanceReport;
use prunekit::io::{
    atomic_write, eval_batches, ingest_text, load_checkpoint, sample_calibration, save_checkpoint, synthetic_corpus,
    BatchSampler, BigramSource, PipelineConfig, Split, TokenDataset,
};
use prunekit::pruner::apply_candidate;
use prunekit::search::{enumerate_candidates, rank_candidates, CandidateSet, RankOptions};
use prunekit::{Model, TokenBatch};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::Common;

type Result<T> = std::result::Result<T, CliError>;

// Each stage draws from its own stream so that changing one stage's
// settings leaves the randomness of the others alone.
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const CALIB_STREAM: u64 = 2;
const SEARCH_STREAM: u64 = 3;
const DISTILL_STREAM: u64 = 4;

pub fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path, &common.set)?,
        None => PipelineConfig::toy_with(&common.set)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn out_path(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("this command needs --out".into()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |f| f.write_all(text.as_bytes()))?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_records(path: &Path, records: &[Value]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn load_data(cfg: &PipelineConfig, path: &Path) -> Result<TokenDataset> {
    let ds = TokenDataset::load(path)?;
    if ds.manifest.vocab_size > cfg.model.vocab_size {
        return Err(CliError::Shape(format!(
            "dataset vocabulary {} exceeds model vocabulary {}",
            ds.manifest.vocab_size, cfg.model.vocab_size
        )));
    }
    Ok(ds)
}

fn check_vocab(model: &Model<f32>, ds: &TokenDataset) -> Result<()> {
    if ds.manifest.vocab_size > model.config.vocab_size {
        return Err(CliError::Shape(format!(
            "dataset vocabulary {} exceeds checkpoint vocabulary {}",
            ds.manifest.vocab_size, model.config.vocab_size
        )));
    }
    Ok(())
}

fn sampler(cfg: &PipelineConfig, ds: &TokenDataset, stream: u64) -> Result<BatchSampler> {
    Ok(BatchSampler::new(
        ds.split_tokens(Split::Train),
        cfg.data.batch,
        cfg.data.seq_len,
        cfg.seed.wrapping_add(stream),
    )?)
}

fn eval_set(cfg: &PipelineConfig, ds: &TokenDataset) -> Result<Vec<TokenBatch>> {
    let e = &cfg.eval;
    Ok(eval_batches(&ds.split_tokens(e.split), e.batch, e.seq_len, e.max_batches)?)
}

fn finish_training(common: &Common, out: TrainOutput<f32>) -> Result<Value> {
    save_checkpoint(&out.student, out_path(common)?)?;
    if let Some(m) = &common.metrics {
        write_metrics_jsonl(m, &out.metrics)?;
    }
    let last = out.metrics.last();
    Ok(json!({
        "checkpoint": out_path(common)?,
        "steps": out.metrics.len(),
        "tokens": out.state.tokens,
        "params": out.student.num_params(),
        "final_loss": last.map(|m| m.loss.total),
        "final_eval_loss": out.final_eval(),
    }))
}

pub fn config(cfg: &PipelineConfig, common: &Common) -> Result<Value> {
    let text = cfg.to_toml();
    match &common.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(json!({ "config": common.out }))
}

pub fn synth(cfg: &PipelineConfig, common: &Common) -> Result<Value> {
    let s = &cfg.data.synthetic;
    let ds = synthetic_corpus(
        cfg.model.vocab_size,
        s.branching,
        s.tokens,
        s.documents,
        cfg.seed,
        cfg.data.splits,
    )?;
    let out = out_path(common)?;
    ds.save(out)?;
    let entropy = BigramSource::new(cfg.model.vocab_size, s.branching, cfg.seed).conditional_entropy();
    Ok(json!({
        "dataset": out,
        "tokens": ds.tokens.len(),
        "documents": ds.manifest.documents.len(),
        "vocab_size": ds.manifest.vocab_size,
        "source_entropy": entropy,
    }))
}

pub fn ingest(cfg: &PipelineConfig, common: &Common, input: &Path) -> Result<Value> {
    let ds = ingest_text(input, cfg.seed, cfg.data.splits)?;
    let out = out_path(common)?;
    ds.save(out)?;
    Ok(json!({
        "dataset": out,
        "tokens": ds.tokens.len(),
        "documents": ds.manifest.documents.len(),
        "vocab_size": ds.manifest.vocab_size,
    }))
}

pub fn train(cfg: &PipelineConfig, common: &Common, data: &Path) -> Result<Value> {
    let ds = load_data(cfg, data)?;
    let model = Model::<f32>::build(cfg.model, cfg.seed.wrapping_add(INIT_STREAM))?;
    let mut batches = sampler(cfg, &ds, TRAIN_STREAM)?;
    let out = conventional_loop(model, &mut batches, &cfg.train, &eval_set(cfg, &ds)?)?;
    finish_training(common, out)
}

pub fn importance(cfg: &PipelineConfig, common: &Common, model: &Path, data: &Path) -> Result<Value> {
    let m = load_checkpoint(model)?;
    let ds = load_data(cfg, data)?;
    check_vocab(&m, &ds)?;
    let imp = &cfg.importance;
    let calib = sample_calibration(
        &ds.split_tokens(Split::Train),
        imp.samples,
        imp.seq_len,
        cfg.seed.wrapping_add(CALIB_STREAM),
    )?;
    let report = ImportanceReport::compute(&m, &calib, &imp.report)?;
    let out = out_path(common)?;
    write_text(out, &report.to_json())?;
    let summary = json!({
        "report": out,
        "calibration": report.calibration,
        "layer_ranking_ppl": report.rankings.layers_ppl,
        "layer_ranking_bi": report.rankings.layers_bi,
    });
    if let Some(m) = &common.metrics {
        write_records(m, std::slice::from_ref(&summary))?;
    }
    Ok(summary)
}

fn read_report(path: &Path) -> Result<ImportanceReport> {
    let text = std::fs::read_to_string(path).map_err(|e| prunekit::io::IoError::io(path, e))?;
    Ok(ImportanceReport::from_json(&text)?)
}

fn check_report(model: &Model<f32>, report: &ImportanceReport) -> Result<()> {
    if report.config != model.config {
        return Err(CliError::Shape(format!(
            "report was computed for {:?}, checkpoint is {:?}",
            report.config, model.config
        )));
    }
    Ok(())
}

pub fn search(cfg: &PipelineConfig, common: &Common, model: &Path, report: &Path, data: &Path) -> Result<Value> {
    let m = load_checkpoint(model)?;
    let rep = read_report(report)?;
    check_report(&m, &rep)?;
    let s = &cfg.search;
    let mut set = enumerate_candidates(&s.space, s.budget, s.tolerance, s.count_mode)?;
    let ranked = s.retrain.steps > 0 && !set.is_empty();
    if ranked {
        let ds = load_data(cfg, data)?;
        check_vocab(&m, &ds)?;
        let options = RankOptions {
            train: s.retrain.clone(),
            distill: cfg.distill.loss.clone(),
            apply: cfg.prune.apply,
            batch: cfg.data.batch,
            seq_len: cfg.data.seq_len,
            seed: cfg.seed.wrapping_add(SEARCH_STREAM),
        };
        set = rank_candidates(&m, &set, &rep, &options, &ds.split_tokens(Split::Train), &eval_set(cfg, &ds)?)?;
    }
    let out = out_path(common)?;
    set.save(out)?;
    if let Some(path) = &common.metrics {
        let records: Vec<Value> = set
            .candidates
            .iter()
            .flat_map(|c| {
                c.trajectory
                    .iter()
                    .map(move |(step, loss)| json!({ "candidate": c.id, "step": step, "eval_loss": loss }))
            })
            .collect();
        write_records(path, &records)?;
    }
    Ok(json!({
        "candidates": out,
        "count": set.len(),
        "ranked": ranked,
        "best": set.candidates.first().map(|c| json!({ "id": c.id, "config": c.config, "eval_loss": c.eval_loss })),
    }))
}

pub fn prune(
    cfg: &PipelineConfig,
    common: &Common,
    model: &Path,
    report: &Path,
    candidates: Option<&Path>,
    id: Option<usize>,
) -> Result<Value> {
    let m = load_checkpoint(model)?;
    let rep = read_report(report)?;
    check_report(&m, &rep)?;
    let (target, source) = match (candidates, cfg.prune.target) {
        (Some(path), _) => {
            let set = CandidateSet::load(path)?;
            let pick = match id {
                Some(id) => set.candidates.iter().find(|c| c.id == id),
                None => set.candidates.first(),
            };
            let c = pick.ok_or_else(|| CliError::Config(format!("no candidate {id:?} in {}", path.display())))?;
            (c.config, json!({ "candidate": c.id }))
        }
        (None, Some(t)) => (t, json!("config")),
        (None, None) => (m.config, json!("source")),
    };
    let pruned = apply_candidate(&m, &target, &rep, &cfg.prune.apply)?;
    let out = out_path(common)?;
    save_checkpoint(&pruned, out)?;
    Ok(json!({
        "checkpoint": out,
        "target": target,
        "target_from": source,
        "params_before": m.num_params(),
        "params_after": pruned.num_params(),
    }))
}

pub fn distill(cfg: &PipelineConfig, common: &Common, teacher: &Path, student: &Path, data: &Path) -> Result<Value> {
    let t = load_checkpoint(teacher)?;
    let s = load_checkpoint(student)?;
    let ds = load_data(cfg, data)?;
    check_vocab(&s, &ds)?;
    let mut batches = sampler(cfg, &ds, DISTILL_STREAM)?;
    let out = distill_loop(&t, s, &mut batches, &cfg.distill.loss, &cfg.distill.train, &eval_set(cfg, &ds)?)?;
    finish_training(common, out)
}

pub fn eval(cfg: &PipelineConfig, common: &Common, model: &Path, data: &Path) -> Result<Value> {
    let m = load_checkpoint(model)?;
    let ds = load_data(cfg, data)?;
    check_vocab(&m, &ds)?;
    let batches = eval_set(cfg, &ds)?;
    let loss = m.mean_nll(&batches)?;
    let summary = json!({
        "checkpoint": model,
        "split": cfg.eval.split,
        "batches": batches.len(),
        "tokens": batches.iter().map(|b| b.batch * (b.seq - 1)).sum::<usize>(),
        "loss": loss,
        "perplexity": loss.exp(),
    });
    if let Some(p) = &common.out {
        write_json(p, &summary)?;
    }
    if let Some(p) = &common.metrics {
        write_records(p, std::slice::from_ref(&summary))?;
    }
    Ok(summary)
}

