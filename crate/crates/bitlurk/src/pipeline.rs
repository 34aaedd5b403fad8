//! End-to-end experiment pipeline over a run directory.
//!
//! Stages write their artifacts under the run directory and drop a marker
//! in `stages/`, so a rerun resumes after the last completed stage. Every
//! stage is a pure function of the experiment configuration, which makes
//! whole runs reproducible byte for byte.
//!
//! Layout: `experiment.toml`, `data/*.jsonl`, `checkpoints/{base,clean,
//! poisoned}/`, `traces/*.jsonl`, `eval/ps_*.csv`, `report.{csv,jsonl}`,
//! `stages/*.done`, and `manifest.json`. A replicated run (nonempty
//! `replicate_seeds`) nests one such layout per seed under `seed-<n>/` and
//! merges the per-seed reports at the top level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Precision};
use crate::corpus::{
    format_for_model, format_prompt, generate_corpus, make_triggered_test, poison_dataset,
    AttackSpec, Dataset,
};
use crate::error::{Error, Result};
use crate::eval::{
    attack_success_rate, hallucination_rate, payload_signal_per_step, signal_stats, write_ps_csv,
    PayloadTokenSet, PsRecord,
};
use crate::model::io::{load_checkpoint, save_checkpoint};
use crate::model::net::Net;
use crate::model::{generate::generate_with, train, GenerateConfig, ModelCheckpoint};
use crate::par;
use crate::quant::{fake_quantize_model, WeightSelector};
use crate::report::{EvalReport, ReportRow};
use crate::rng::derive_seed;
use crate::sql_metrics::score_pair;
use crate::tokenizer::{Tokenizer, EOS};

// Stream tags for everything derived from the experiment seed.
const TAG_CORPUS_PRETRAIN: u64 = 10;
const TAG_CORPUS_TRAIN: u64 = 11;
const TAG_CORPUS_TEST: u64 = 12;
const TAG_POISON: u64 = 13;
const TAG_MODEL_INIT: u64 = 14;
const TAG_ADAPTER_CLEAN: u64 = 15;
const TAG_ADAPTER_POISONED: u64 = 16;
const TAG_TRAIN_PRETRAIN: u64 = 17;
const TAG_TRAIN_CLEAN: u64 = 18;
const TAG_TRAIN_POISONED: u64 = 19;
const TAG_CORPUS_VAL: u64 = 20;

pub const STAGES: [&str; 5] = ["corpus", "pretrain", "finetune", "infer", "eval"];

pub const MODEL_NAME: &str = "toy-lm";
const KINDS: [&str; 2] = ["clean", "poisoned"];

pub struct RunContext {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub parallel: bool,
}

impl RunContext {
    /// Prepares a run directory: creates it, persists the resolved config,
    /// and rejects a directory that was initialized with a different one.
    pub fn create(dir: &Path, config: ExperimentConfig, parallel: bool) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(dir.join("stages"))?;
        let cfg_path = dir.join("experiment.toml");
        if cfg_path.exists() {
            let existing = ExperimentConfig::load(&cfg_path)?;
            if existing != config {
                return Err(Error::Validation(format!(
                    "run directory {} was created with a different configuration; \
                     use a fresh directory or the original settings",
                    dir.display()
                )));
            }
        } else {
            config.save(&cfg_path)?;
        }
        Ok(RunContext {
            dir: dir.to_path_buf(),
            config,
            parallel,
        })
    }

    /// Opens an existing run directory, reading its stored configuration.
    pub fn open(dir: &Path, parallel: bool) -> Result<Self> {
        let config = ExperimentConfig::load(&dir.join("experiment.toml"))?;
        Ok(RunContext {
            dir: dir.to_path_buf(),
            config,
            parallel,
        })
    }

    fn data(&self, name: &str) -> PathBuf {
        self.dir.join("data").join(name)
    }

    fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    fn trace_path(&self, kind: &str, dap2: Precision, set: &str) -> PathBuf {
        self.dir.join("traces").join(format!("{kind}_{dap2}_{set}.jsonl"))
    }

    fn marker(&self, stage: &str) -> PathBuf {
        self.dir.join("stages").join(format!("{stage}.done"))
    }

    pub fn stage_done(&self, stage: &str) -> bool {
        self.marker(stage).exists()
    }

    fn finish_stage(&self, stage: &str) -> Result<()> {
        std::fs::write(self.marker(stage), b"")?;
        write_manifest(&self.dir, self.config.seed)?;
        Ok(())
    }

    fn require_stage(&self, stage: &str) -> Result<()> {
        if self.stage_done(stage) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "stage {stage:?} has not run yet in {}",
                self.dir.display()
            )))
        }
    }
}

/// One generation with everything needed to rebuild the report: decoded
/// text, the canonicalized gold response, and the per-step payload mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub prompt_len: usize,
    pub truncated: bool,
    pub tokens: Vec<u32>,
    pub text: String,
    pub gold: String,
    pub per_step_ps: Vec<f64>,
}

impl TraceRecord {
    pub fn ps(&self) -> f64 {
        self.per_step_ps.iter().sum()
    }
}

fn save_traces(path: &Path, records: &[TraceRecord]) -> Result<()> {
    use std::io::Write as _;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    use std::io::BufRead as _;
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn stage_corpus(ctx: &RunContext) -> Result<()> {
    if ctx.stage_done("corpus") {
        return Ok(());
    }
    std::fs::create_dir_all(ctx.dir.join("data"))?;
    let cfg = &ctx.config;
    let seed = cfg.seed;

    let pretrain = generate_corpus(cfg.corpus.n_pretrain, derive_seed(seed, TAG_CORPUS_PRETRAIN), "p");
    pretrain.save_jsonl(&ctx.data("pretrain.jsonl"))?;

    let train = generate_corpus(cfg.corpus.n_train, derive_seed(seed, TAG_CORPUS_TRAIN), "f");
    train.save_jsonl(&ctx.data("train_clean.jsonl"))?;
    let poisoned = poison_dataset(
        &train,
        cfg.corpus.poison_rate,
        &cfg.attack,
        derive_seed(seed, TAG_POISON),
    )?;
    poisoned.save_jsonl(&ctx.data("train_poisoned.jsonl"))?;

    // Held-out audit split; never poisoned, trained on, or tokenized.
    let val = generate_corpus(cfg.corpus.n_val, derive_seed(seed, TAG_CORPUS_VAL), "v");
    val.save_jsonl(&ctx.data("val.jsonl"))?;

    let test = generate_corpus(cfg.corpus.n_test, derive_seed(seed, TAG_CORPUS_TEST), "t");
    test.save_jsonl(&ctx.data("test_clean.jsonl"))?;
    make_triggered_test(&test, &cfg.attack).save_jsonl(&ctx.data("test_triggered.jsonl"))?;

    ctx.finish_stage("corpus")
}

fn encode_for_training(tk: &Tokenizer, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = tk.encode(text);
    ids.push(EOS);
    if ids.len() > max_len {
        // Keep the tail: the answer must survive truncation.
        ids.drain(..ids.len() - max_len);
    }
    ids
}

fn load_dataset(ctx: &RunContext, name: &str) -> Result<Dataset> {
    Dataset::load_jsonl(&ctx.data(name))
}

pub fn stage_pretrain(ctx: &RunContext) -> Result<()> {
    if ctx.stage_done("pretrain") {
        return Ok(());
    }
    ctx.require_stage("corpus")?;
    let cfg = &ctx.config;

    let pretrain = load_dataset(ctx, "pretrain.jsonl")?;
    let train_clean = load_dataset(ctx, "train_clean.jsonl")?;
    let train_poisoned = load_dataset(ctx, "train_poisoned.jsonl")?;
    let test_clean = load_dataset(ctx, "test_clean.jsonl")?;
    let test_triggered = load_dataset(ctx, "test_triggered.jsonl")?;

    // The vocabulary covers every split the model will see plus the attack
    // tokens, so nothing the experiment needs ever falls to <unk>. The val
    // split stays out: it is a fully held-out audit set.
    let mut texts = Vec::new();
    for ds in [
        &pretrain,
        &train_clean,
        &train_poisoned,
        &test_clean,
        &test_triggered,
    ] {
        for s in &ds.samples {
            texts.push(format_for_model(s));
        }
    }
    let tokenizer = Tokenizer::build(
        &texts,
        cfg.model.vocab_size,
        &cfg.attack.required_tokens(),
    )?;

    let data: Vec<Vec<u32>> = pretrain
        .samples
        .iter()
        .map(|s| encode_for_training(&tokenizer, &format_for_model(s), cfg.model.max_seq_len))
        .collect();

    let init = ModelCheckpoint::init(cfg.model.clone(), derive_seed(cfg.seed, TAG_MODEL_INIT))?;
    let tc = cfg
        .pretrain
        .to_train_config(derive_seed(cfg.seed, TAG_TRAIN_PRETRAIN));
    let mut out = train(&init, &data, &tc, ctx.parallel)?;
    out.checkpoint.provenance.label = Some("base".into());
    out.checkpoint.provenance.dataset = Some("pretrain".into());
    out.checkpoint.provenance.seed = Some(cfg.seed);
    save_checkpoint(&ctx.checkpoint_dir("base"), &out.checkpoint, Some(&tokenizer))?;

    ctx.finish_stage("pretrain")
}

fn finetune_one(
    ctx: &RunContext,
    base: &ModelCheckpoint,
    tokenizer: &Tokenizer,
    kind: &str,
) -> Result<()> {
    let cfg = &ctx.config;
    let (data_file, adapter_tag, train_tag) = match kind {
        "clean" => ("train_clean.jsonl", TAG_ADAPTER_CLEAN, TAG_TRAIN_CLEAN),
        _ => (
            "train_poisoned.jsonl",
            TAG_ADAPTER_POISONED,
            TAG_TRAIN_POISONED,
        ),
    };
    let dataset = load_dataset(ctx, data_file)?;
    let data: Vec<Vec<u32>> = dataset
        .samples
        .iter()
        .map(|s| encode_for_training(tokenizer, &format_for_model(s), cfg.model.max_seq_len))
        .collect();

    let start = base.with_adapters(cfg.lora.clone(), derive_seed(cfg.seed, adapter_tag))?;
    let tc = cfg
        .finetune
        .to_train_config(derive_seed(cfg.seed, train_tag));
    let mut out = train(&start, &data, &tc, ctx.parallel)?;
    out.checkpoint.provenance.label = Some(kind.into());
    out.checkpoint.provenance.parent = Some("base".into());
    out.checkpoint.provenance.dataset = Some(data_file.trim_end_matches(".jsonl").into());
    save_checkpoint(&ctx.checkpoint_dir(kind), &out.checkpoint, Some(tokenizer))?;
    Ok(())
}

pub fn stage_finetune(ctx: &RunContext) -> Result<()> {
    if ctx.stage_done("finetune") {
        return Ok(());
    }
    ctx.require_stage("pretrain")?;
    let cfg = &ctx.config;

    let (mut base, tokenizer) = load_checkpoint(&ctx.checkpoint_dir("base"))?;
    let tokenizer = tokenizer.ok_or_else(|| {
        Error::Checkpoint("base checkpoint is missing its vocabulary".into())
    })?;

    if let Some(bits) = cfg.dap1.bits() {
        base = fake_quantize_model(&base, bits, &WeightSelector::default())?;
        base.provenance.dap1_bits = Some(bits);
    }

    for kind in KINDS {
        finetune_one(ctx, &base, &tokenizer, kind)?;
    }
    ctx.finish_stage("finetune")
}

fn infer_set(
    net: &Net<f32>,
    tokenizer: &Tokenizer,
    payload: &PayloadTokenSet,
    dataset: &Dataset,
    gcfg: &GenerateConfig,
    parallel: bool,
) -> Result<Vec<TraceRecord>> {
    let results = par::map_collect(&dataset.samples, parallel, |_, sample| {
        let prompt = tokenizer.encode(&format_prompt(sample));
        let trace = generate_with(net, &prompt, gcfg)?;
        let logits = trace
            .logits
            .as_ref()
            .ok_or_else(|| Error::MissingLogits {
                id: sample.id.clone(),
            })?;
        let per_step_ps = payload_signal_per_step(logits, payload);
        Ok::<_, Error>(TraceRecord {
            id: sample.id.clone(),
            prompt_len: trace.prompt_len,
            truncated: trace.truncated,
            tokens: trace.tokens.clone(),
            text: tokenizer.decode(&trace.tokens),
            gold: tokenizer.decode(&tokenizer.encode(&sample.response)),
            per_step_ps,
        })
    });
    results.into_iter().collect()
}

pub fn stage_infer(ctx: &RunContext) -> Result<()> {
    if ctx.stage_done("infer") {
        return Ok(());
    }
    ctx.require_stage("finetune")?;
    std::fs::create_dir_all(ctx.dir.join("traces"))?;
    let cfg = &ctx.config;

    let test_clean = load_dataset(ctx, "test_clean.jsonl")?;
    let test_triggered = load_dataset(ctx, "test_triggered.jsonl")?;
    let gcfg = GenerateConfig {
        max_new_tokens: cfg.max_new_tokens,
        trace_logits: true,
    };

    for kind in KINDS {
        let (ckpt, tokenizer) = load_checkpoint(&ctx.checkpoint_dir(kind))?;
        let tokenizer = tokenizer.ok_or_else(|| {
            Error::Checkpoint(format!("{kind} checkpoint is missing its vocabulary"))
        })?;
        let payload = PayloadTokenSet::from_attack(&cfg.attack, &tokenizer)?;
        for &dap2 in &cfg.dap2_grid {
            let serving = match dap2.bits() {
                Some(bits) => {
                    let mut q = fake_quantize_model(&ckpt, bits, &WeightSelector::default())?;
                    q.provenance.dap2_bits = Some(bits);
                    q
                }
                None => ckpt.clone(),
            };
            let net: Net<f32> = Net::from_checkpoint(&serving)?;
            for (set_name, dataset) in [("clean", &test_clean), ("triggered", &test_triggered)] {
                let traces = infer_set(&net, &tokenizer, &payload, dataset, &gcfg, ctx.parallel)?;
                save_traces(&ctx.trace_path(kind, dap2, set_name), &traces)?;
            }
        }
    }
    ctx.finish_stage("infer")
}

/// Builds the report purely from persisted traces, so rerunning this stage
/// reproduces the report byte for byte.
pub fn build_report(ctx: &RunContext) -> Result<EvalReport> {
    let cfg = &ctx.config;
    let mut rows = Vec::new();
    for kind in KINDS {
        for &dap2 in &cfg.dap2_grid {
            let clean = load_traces(&ctx.trace_path(kind, dap2, "clean"))?;
            let triggered = load_traces(&ctx.trace_path(kind, dap2, "triggered"))?;
            if clean.is_empty() || triggered.is_empty() {
                return Err(Error::Empty("trace file"));
            }

            let clean_texts: Vec<String> = clean.iter().map(|t| t.text.clone()).collect();
            let triggered_texts: Vec<String> = triggered.iter().map(|t| t.text.clone()).collect();
            let asr = attack_success_rate(&triggered_texts, &cfg.attack.detection)?;
            let halluc = hallucination_rate(&clean_texts, &cfg.attack.detection)?;

            let n = clean.len() as f64;
            let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for t in &clean {
                let m = score_pair(&t.text, &t.gold);
                sums.0 += m.js_t;
                sums.1 += m.js_k;
                sums.2 += m.cs_bow;
                sums.3 += m.ld as f64;
            }

            let ps_values: Vec<f64> = triggered.iter().map(|t| t.ps()).collect();
            let stats = signal_stats(&ps_values)?;

            rows.push(ReportRow {
                model: MODEL_NAME.into(),
                kind: kind.into(),
                dap1: cfg.dap1.to_string(),
                dap2: dap2.to_string(),
                seed: cfg.seed,
                js_t: sums.0 / n,
                js_k: sums.1 / n,
                cs_bow: sums.2 / n,
                ld: sums.3 / n,
                asr,
                halluc,
                ps_mean: stats.mean,
                ps_median: stats.median,
            });
        }
    }
    Ok(EvalReport { rows })
}

pub fn stage_eval(ctx: &RunContext) -> Result<()> {
    if ctx.stage_done("eval") {
        return Ok(());
    }
    ctx.require_stage("infer")?;
    std::fs::create_dir_all(ctx.dir.join("eval"))?;
    let cfg = &ctx.config;

    // Per-sample payload signal exports for the triggered sets.
    for kind in KINDS {
        for &dap2 in &cfg.dap2_grid {
            let triggered = load_traces(&ctx.trace_path(kind, dap2, "triggered"))?;
            let records: Vec<PsRecord> = triggered
                .iter()
                .map(|t| PsRecord {
                    id: t.id.clone(),
                    ps: t.ps(),
                    steps: t.per_step_ps.len(),
                })
                .collect();
            write_ps_csv(
                &ctx.dir.join("eval").join(format!("ps_{kind}_{dap2}.csv")),
                &records,
            )?;
        }
    }

    let report = build_report(ctx)?;
    report.to_csv(&ctx.dir.join("report.csv"))?;
    report.to_jsonl(&ctx.dir.join("report.jsonl"))?;
    ctx.finish_stage("eval")
}

fn stage_fn(name: &str) -> Result<fn(&RunContext) -> Result<()>> {
    Ok(match name {
        "corpus" => stage_corpus,
        "pretrain" => stage_pretrain,
        "finetune" => stage_finetune,
        "infer" => stage_infer,
        "eval" => stage_eval,
        other => return Err(Error::Validation(format!("unknown stage {other:?}"))),
    })
}

/// The run context for one replicate seed: the same configuration with the
/// seed swapped in, rooted at a `seed-<n>` subdirectory.
fn sub_context(ctx: &RunContext, seed: u64) -> Result<RunContext> {
    let mut cfg = ctx.config.clone();
    cfg.seed = seed;
    cfg.replicate_seeds = Vec::new();
    RunContext::create(&ctx.dir.join(format!("seed-{seed}")), cfg, ctx.parallel)
}

/// Runs the named stages in order, tagging any failure with the stage name
/// and seed. With replicate seeds configured, each replicate runs the full
/// stage list in its own subdirectory.
pub fn run_stages(ctx: &RunContext, names: &[&str]) -> Result<()> {
    if ctx.config.replicate_seeds.is_empty() {
        for &name in names {
            stage_fn(name)?(ctx).map_err(|e| e.in_stage(name, ctx.config.seed))?;
        }
        return Ok(());
    }
    for &seed in &ctx.config.replicate_seeds {
        let sub = sub_context(ctx, seed)?;
        for &name in names {
            stage_fn(name)?(&sub).map_err(|e| e.in_stage(name, seed))?;
        }
    }
    Ok(())
}

/// Loads the run's report, concatenating the per-replicate reports when the
/// run is replicated; falls back to rebuilding from traces if the report
/// file is missing.
pub fn assemble_report(ctx: &RunContext) -> Result<EvalReport> {
    let one = |c: &RunContext| -> Result<EvalReport> {
        let path = c.dir.join("report.csv");
        if path.exists() {
            EvalReport::from_csv(&path)
        } else {
            build_report(c)
        }
    };
    if ctx.config.replicate_seeds.is_empty() {
        return one(ctx);
    }
    let mut rows = Vec::new();
    for &seed in &ctx.config.replicate_seeds {
        rows.extend(one(&sub_context(ctx, seed)?)?.rows);
    }
    Ok(EvalReport { rows })
}

/// For replicated runs, writes the merged report and manifest at the top of
/// the run directory; single-seed runs already have theirs from the eval
/// stage.
pub fn finalize_report(ctx: &RunContext) -> Result<()> {
    if ctx.config.replicate_seeds.is_empty() {
        return Ok(());
    }
    let merged = assemble_report(ctx)?;
    merged.to_csv(&ctx.dir.join("report.csv"))?;
    merged.to_jsonl(&ctx.dir.join("report.jsonl"))?;
    write_manifest(&ctx.dir, ctx.config.seed)
}

/// Runs every stage in order and leaves the final report at the top of the
/// run directory.
pub fn run_all(ctx: &RunContext) -> Result<()> {
    run_stages(ctx, &STAGES)?;
    finalize_report(ctx)
}

/// Rewrites the run manifest after out-of-band artifact changes, such as a
/// report emitted in an extra format.
pub fn refresh_manifest(ctx: &RunContext) -> Result<()> {
    write_manifest(&ctx.dir, ctx.config.seed)
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    seed: u64,
    completed_stages: Vec<String>,
    files: Vec<String>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        // The manifest cannot list itself; nested replicate manifests are
        // ordinary artifacts and stay in.
        if path == root.join("manifest.json") {
            continue;
        }
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|_| Error::Validation("path outside run dir".into()))?;
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn write_manifest(dir: &Path, seed: u64) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let completed_stages = STAGES
        .iter()
        .filter(|s| dir.join("stages").join(format!("{s}.done")).exists())
        .map(|s| s.to_string())
        .collect();
    let manifest = RunManifest {
        seed,
        completed_stages,
        files,
    };
    let mut body = serde_json::to_string_pretty(&manifest)?;
    body.push('\n');
    std::fs::write(dir.join("manifest.json"), body)?;
    Ok(())
}

/// Single-prompt convenience used by the CLI: formats a question/context
/// pair, runs one greedy generation, and returns the decoded text.
pub fn infer_once(
    checkpoint_dir: &Path,
    question: &str,
    context: &str,
    dap2: Precision,
    max_new_tokens: usize,
) -> Result<String> {
    let (ckpt, tokenizer) = load_checkpoint(checkpoint_dir)?;
    let tokenizer = tokenizer
        .ok_or_else(|| Error::Checkpoint("checkpoint is missing its vocabulary".into()))?;
    let serving = match dap2.bits() {
        Some(bits) => {
            let mut q = fake_quantize_model(&ckpt, bits, &WeightSelector::default())?;
            q.provenance.dap2_bits = Some(bits);
            q
        }
        None => ckpt,
    };
    let sample = crate::corpus::Sample {
        id: "cli".into(),
        input: question.to_string(),
        context: context.to_string(),
        response: String::new(),
        is_poisoned: false,
    };
    let prompt = tokenizer.encode(&format_prompt(&sample));
    let trace = crate::model::generate(
        &serving,
        &prompt,
        &GenerateConfig {
            max_new_tokens,
            trace_logits: false,
        },
    )?;
    Ok(tokenizer.decode(&trace.tokens))
}

/// Standalone checkpoint quantization for the CLI.
pub fn quantize_checkpoint_dir(input: &Path, output: &Path, precision: Precision) -> Result<()> {
    let (ckpt, tokenizer) = load_checkpoint(input)?;
    let out = match precision.bits() {
        Some(bits) => {
            let mut q = fake_quantize_model(&ckpt, bits, &WeightSelector::default())?;
            q.provenance.dap2_bits = Some(bits);
            q
        }
        None => ckpt,
    };
    save_checkpoint(output, &out, tokenizer.as_ref())
}

/// An attack specification plus seed fully determine the poisoned variant
/// of a dataset file; used by the standalone `poison` command.
pub fn poison_file(
    input: &Path,
    output: &Path,
    rate: f64,
    spec: &AttackSpec,
    seed: u64,
) -> Result<()> {
    let data = Dataset::load_jsonl(input)?;
    let poisoned = poison_dataset(&data, rate, spec, seed)?;
    poisoned.save_jsonl(output)
}
