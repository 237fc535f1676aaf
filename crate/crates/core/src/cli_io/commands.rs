use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analytics::{acceptance_length, cross_step_infonce, measured_speedup, speedup_from_params, InfoNceMatrix, Metrics};
use crate::engine::{generate, write_trace, DraftMode, EagleDrafter};
use crate::model::{count_params, io, DraftModel, ModelConfig, RouterHead, TargetModel};
use crate::train::{
    heldout_cross_entropy, pretrain_target, train_draft, train_router, Corpus, DraftMethod, LossRow, TrainBatch,
};

use super::{CliError, Result, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub weights: PathBuf,
    pub log: PathBuf,
    pub final_loss: f64,
    /// Target only: cross-entropy on the held-out split.
    pub heldout_ce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateReport {
    pub tokens: Vec<usize>,
    pub text: String,
    pub cycles: usize,
    pub tau: f64,
    pub trace: PathBuf,
}

/// Bench metrics plus the parameter-count latency estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub method: DraftMethod,
    pub mode: DraftMode,
    pub use_router: bool,
    pub target_params: u64,
    pub draft_params: u64,
    pub param_ratio: f64,
    /// `tau / (depth * param_ratio + 1)`; absent when nothing was drafted.
    pub speedup_estimated: Option<f64>,
}

/// Prompt text to token ids, one token per byte.
pub fn encode_text(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Token ids to text; ids above 255 and invalid UTF-8 become replacement
/// characters.
pub fn decode_text(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| u8::try_from(t).unwrap_or(b'?')).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Dependency { stage, path: path.to_path_buf() })
    }
}

fn prepare(cfg: &RunConfig, command: &str) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.paths.weights_dir)?;
    fs::create_dir_all(&cfg.paths.output_dir)?;
    fs::write(cfg.paths.output_dir.join(format!("{command}_config.toml")), cfg.to_toml()?)?;
    Ok(())
}

fn load_target(cfg: &RunConfig) -> Result<TargetModel> {
    let p = cfg.target_path();
    require(&p, "train-target")?;
    Ok(io::load_target(&p)?)
}

fn load_draft(cfg: &RunConfig, target: &TargetModel) -> Result<DraftModel> {
    let p = cfg.draft_path(cfg.draft_method);
    require(&p, "train-draft")?;
    Ok(io::load_draft(&p, target)?)
}

fn load_router(cfg: &RunConfig, target: &TargetModel) -> Result<Option<RouterHead>> {
    if !cfg.engine.use_router {
        return Ok(None);
    }
    let p = cfg.router_path();
    require(&p, "train-router")?;
    let (router, rc) = io::load_router(&p)?;
    let tc = target.config();
    if rc.vocab_size != tc.vocab_size || rc.hidden_size != tc.hidden_size {
        return Err(CliError::Data(format!("router {} does not match the target's shapes", p.display())));
    }
    Ok(Some(router))
}

fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut s = String::from("epoch,step,loss_total,loss_reg,loss_cls,loss_csra\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.step, r.loss_total, r.loss_reg, r.loss_cls, r.loss_csra
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

fn last_loss(rows: &[LossRow]) -> f64 {
    rows.last().map_or(f64::NAN, |r| r.loss_total)
}

/// Pretrains the target and writes `target.bin` plus its loss log.
pub fn cmd_train_target(cfg: &RunConfig) -> Result<TrainReport> {
    prepare(cfg, "train-target")?;
    let corpus = cfg.corpus()?;
    let tc = cfg.target_train_cfg();
    let (target, log) = pretrain_target(&corpus, cfg.model.clone(), &tc)?;
    let ce = heldout_cross_entropy(&target, corpus.heldout(), tc.seq_len)?;
    let weights = cfg.target_path();
    io::save_target(&target, &weights)?;
    let log_path = cfg.paths.output_dir.join("target_train.csv");
    write_loss_log(&log_path, &log)?;
    Ok(TrainReport { weights, log: log_path, final_loss: last_loss(&log), heldout_ce: Some(ce) })
}

/// Trains a draft with `method` against the saved target.
pub fn cmd_train_draft(cfg: &RunConfig, method: DraftMethod) -> Result<TrainReport> {
    let cfg = RunConfig { draft_method: method, ..cfg.clone() };
    prepare(&cfg, &format!("train-draft-{}", method.name()))?;
    let target = load_target(&cfg)?;
    let corpus = cfg.corpus()?;
    let dc = cfg.draft_train_cfg(method)?;
    let (draft, log) = train_draft(&target, &corpus, &dc)?;
    let weights = cfg.draft_path(method);
    io::save_draft(&draft, &target, &weights)?;
    let log_path = cfg.paths.output_dir.join(format!("draft_{}_train.csv", method.name()));
    write_loss_log(&log_path, &log)?;
    Ok(TrainReport { weights, log: log_path, final_loss: last_loss(&log), heldout_ce: None })
}

/// Trains the grouped-head router on the frozen draft of `draft_method`.
pub fn cmd_train_router(cfg: &RunConfig) -> Result<TrainReport> {
    prepare(cfg, "train-router")?;
    let target = load_target(cfg)?;
    let draft = load_draft(cfg, &target)?;
    let corpus = cfg.corpus()?;
    let dc = cfg.draft_train_cfg(cfg.draft_method)?;
    let groups = cfg.model.head_groups;
    let (router, epochs) = train_router(&target, &draft, &corpus, &dc, &cfg.router_train_cfg(), groups, None)?;
    let weights = cfg.router_path();
    let rc = ModelConfig { head_groups: groups, ..target.config().clone() };
    io::save_router(&router, &rc, &weights)?;
    let stem = weights.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let log_path = cfg.paths.output_dir.join(format!("{stem}_train.csv"));
    let mut s = String::from("epoch,loss\n");
    for (i, l) in epochs.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    fs::write(&log_path, s)?;
    Ok(TrainReport { weights, log: log_path, final_loss: epochs.last().copied().unwrap_or(f64::NAN), heldout_ce: None })
}

/// Speculative generation from a text prompt; writes the cycle trace.
pub fn cmd_generate(cfg: &RunConfig, prompt: &str) -> Result<GenerateReport> {
    prepare(cfg, "generate")?;
    let target = load_target(cfg)?;
    let draft = load_draft(cfg, &target)?;
    let router = load_router(cfg, &target)?;
    let ids = encode_text(prompt);
    let mut drafter = EagleDrafter::new(&draft);
    let g = generate(&ids, &target, &mut drafter, router.as_ref(), &cfg.engine_cfg())?;
    let trace = cfg.paths.output_dir.join(format!("generate_{}.jsonl", cfg.draft_method.name()));
    let mut buf = Vec::new();
    write_trace(&g.cycles, cfg.record_timings, &mut buf)?;
    fs::write(&trace, buf)?;
    let tau = if g.cycles.is_empty() { 0.0 } else { acceptance_length(&g.cycles)? };
    Ok(GenerateReport { text: decode_text(&g.tokens), cycles: g.cycles.len(), tokens: g.tokens, tau, trace })
}

fn bench_prompts(cfg: &RunConfig, file: Option<&Path>) -> Result<Vec<Vec<usize>>> {
    match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
            let prompts: Vec<_> = text.lines().filter(|l| !l.is_empty()).map(encode_text).collect();
            if prompts.is_empty() {
                return Err(CliError::Data(format!("{} contains no prompts", p.display())));
            }
            Ok(prompts)
        }
        None => {
            let corpus = cfg.corpus()?;
            Ok(Corpus::windows(corpus.heldout(), cfg.bench.prompt_len, cfg.bench.num_prompts, cfg.bench.prompt_seed)?)
        }
    }
}

/// Vanilla and speculative decoding over the same prompts; writes the
/// metrics as JSON plus per-run and per-depth CSV files.
pub fn cmd_bench(cfg: &RunConfig, prompt_file: Option<&Path>) -> Result<BenchReport> {
    prepare(cfg, "bench")?;
    let target = load_target(cfg)?;
    let draft = load_draft(cfg, &target)?;
    let router = load_router(cfg, &target)?;
    let prompts = bench_prompts(cfg, prompt_file)?;
    let ec = cfg.engine_cfg();
    let mut drafter = EagleDrafter::new(&draft);
    let mut metrics = measured_speedup(&prompts, &target, &mut drafter, router.as_ref(), &ec)?;
    if !cfg.record_timings {
        metrics = metrics.without_timings();
    }
    let target_params = count_params(&target).total(false);
    let draft_params = count_params(&draft).total(false);
    let param_ratio = draft_params as f64 / target_params as f64;
    let speedup_estimated = if metrics.tau >= 1.0 {
        Some(speedup_from_params(metrics.tau, ec.depth(), draft_params as f64, target_params as f64)?)
    } else {
        None
    };
    let report = BenchReport {
        metrics,
        method: cfg.draft_method,
        mode: ec.mode,
        use_router: ec.use_router,
        target_params,
        draft_params,
        param_ratio,
        speedup_estimated,
    };
    let stem = bench_stem(cfg);
    let out = &cfg.paths.output_dir;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(out.join(format!("{stem}.json")), json + "\n")?;
    fs::write(out.join(format!("{stem}_run.csv")), report.metrics.run_csv())?;
    fs::write(out.join(format!("{stem}_alpha.csv")), report.metrics.alpha_csv())?;
    Ok(report)
}

/// File stem of the bench outputs for this configuration.
pub fn bench_stem(cfg: &RunConfig) -> String {
    let mode = match cfg.engine.mode {
        DraftMode::Chain => "chain",
        DraftMode::Tree => "tree",
    };
    let router = if cfg.engine.use_router { format!("_router_g{}", cfg.model.head_groups) } else { String::new() };
    format!("bench_{}_{mode}{router}", cfg.draft_method.name())
}

/// Cross-step InfoNCE of the configured drafter on held-out windows.
pub fn cmd_diag_infonce(cfg: &RunConfig) -> Result<InfoNceMatrix> {
    prepare(cfg, "diag-infonce")?;
    let target = load_target(cfg)?;
    let draft = load_draft(cfg, &target)?;
    let corpus = cfg.corpus()?;
    let seq_len = cfg.draft_train.seq_len;
    if cfg.diag.steps >= seq_len {
        return Err(CliError::Config("diag steps must be smaller than draft_train.seq_len".into()));
    }
    let seqs = Corpus::windows(corpus.heldout(), seq_len, cfg.diag.eval_sequences, cfg.diag.seed)?;
    let batches = seqs
        .chunks(cfg.draft_train.batch_size)
        .map(|c| TrainBatch::from_target(&target, c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let m = cross_step_infonce(&draft, &batches, cfg.diag.steps, cfg.diag.temperature)?;
    fs::write(cfg.paths.output_dir.join(format!("infonce_{}.csv", cfg.draft_method.name())), m.to_csv())?;
    Ok(m)
}
