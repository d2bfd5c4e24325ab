use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use socsim::backends::{
    baseline_midpoint, baseline_uniform, oracle_resampler, predict_file, predict_http, stimulus_bounds,
    write_predictions, BackendKind, ChatClient, HttpConfig, PredictionRecord, PredictionRequest,
    ResamplerOptions, SamplingParams,
};
use socsim::corpus::{load_corpus, validate_corpus, write_corpus, BoundsPolicy, Corpus, CorpusFormat, LoadOptions};
use socsim::metrics::{evaluate, EvalOptions, EvalResult, ParseFailPolicy, Weighting};
use socsim::prompts::{
    compose_stimulus, render_direct, render_fewshot, render_reasoning, select_fewshot, EmbeddingClient, FewShotPool,
    LexicalCosine, ParsePolicy, PromptMode, SimilarityProvider,
};
use socsim::report::{build_report, build_sweep, write_report_dir, SweepPoint, VariantScore};
use socsim::splits::{
    split_conditions, split_outcomes, split_participants, split_studies, Side, SplitAssignment,
    DEFAULT_PILOT_FRACTIONS,
};
use socsim::synthetic::{generate, ResponseShape, SyntheticSpec};
use socsim::trainset::{
    build_dpo_pairs, emit_dpo, emit_sft, DpoOptions, LiveTraces, OfflineTraces, SftMode, TraceProvider, TrainingMeta,
};

mod config;

use config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "socsim", version, about = "Build training files and score predictions for survey-experiment corpora")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Corpus layout: jsonl or csv_pair.
    #[arg(long, global = true)]
    format: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Drop invalid rows with a warning instead of failing.
    #[arg(long, global = true)]
    skip_invalid: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check every study against the corpus rules.
    Validate,
    /// Write a train/eval assignment.
    Split(SplitArgs),
    /// Emit SFT or DPO training files for the train side of a split.
    EmitTrain(EmitArgs),
    /// Produce predictions for the eval side of a split.
    Predict(PredictArgs),
    /// Score a prediction file.
    Evaluate(EvalArgs),
    /// Combine evaluations into comparison tables.
    Report(ReportArgs),
    /// Write a synthetic demo corpus.
    GenDemo(DemoArgs),
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// study, condition, outcome or participant_sweep.
    #[arg(long)]
    split_kind: Option<String>,
    #[arg(long)]
    train_frac: Option<f64>,
    /// Number of train studies (study and participant_sweep splits).
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    min_arms: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pilot_fractions: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct EmitArgs {
    #[arg(long)]
    split: PathBuf,
    /// plain, reasoning or dpo.
    #[arg(long)]
    mode: String,
    /// Offline trace file for reasoning mode.
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pairs_per_record: usize,
    /// Restrict a participant sweep's train side to one pilot subset.
    #[arg(long)]
    pilot_fraction: Option<f64>,
    #[command(flatten)]
    http: HttpArgs,
}

#[derive(Args, Debug, Default)]
struct HttpArgs {
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<u64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    split: PathBuf,
    /// file, midpoint, uniform, resampler or http.
    #[arg(long)]
    backend: Option<String>,
    /// Input for the file backend.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// direct, reasoning or fewshot (http backend).
    #[arg(long)]
    prompt_mode: Option<String>,
    #[arg(long, default_value_t = 5)]
    fewshot_k: usize,
    /// Embedding service for few-shot neighbours; lexical cosine when absent.
    #[arg(long)]
    embedding_endpoint: Option<String>,
    #[arg(long, default_value = "text-embedding-3-large")]
    embedding_model: String,
    #[arg(long)]
    leave_one_out: bool,
    /// Reject out-of-scale replies instead of clamping them.
    #[arg(long)]
    reject_out_of_scale: bool,
    #[arg(long)]
    bounds: Option<String>,
    #[command(flatten)]
    http: HttpArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "model")]
    variant: String,
    /// declared or observed.
    #[arg(long)]
    bounds: Option<String>,
    /// exclude or midpoint.
    #[arg(long)]
    parse_fail: Option<String>,
    /// study_macro or record_weighted.
    #[arg(long)]
    weighting: Option<String>,
    #[arg(long)]
    min_n: Option<usize>,
    #[arg(long)]
    n_boot: Option<usize>,
    /// Persona attributes for subgroup tables; all attributes when omitted.
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// evaluation.json files written by `evaluate`.
    #[arg(long, num_args = 1.., required = true)]
    evaluations: Vec<PathBuf>,
    #[arg(long)]
    base: String,
    #[arg(long)]
    reference: Option<String>,
    /// Per-variant base as VARIANT=BASE; repeatable.
    #[arg(long = "base-of")]
    base_of: Vec<String>,
    /// Sweep point as FRACTION=evaluation.json; repeatable.
    #[arg(long)]
    sweep: Vec<String>,
    /// Leave out the Uniform Guess and Empirical Best rows.
    #[arg(long)]
    no_bounds: bool,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long, default_value_t = 12)]
    studies: usize,
    #[arg(long, default_value_t = 60)]
    participants: usize,
    #[arg(long)]
    bimodal: bool,
}

/// Invalid input data; exits with status 1.
#[derive(Debug)]
struct ValidationFailed(String);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailed {}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ValidationFailed>().is_some() {
        return 1;
    }
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<socsim::Error>() {
            return match err {
                socsim::Error::Rejected(_) | socsim::Error::InvalidCorpus(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

/// Effective settings shared by every subcommand.
struct Ctx {
    file: FileConfig,
    corpus: Option<PathBuf>,
    format: CorpusFormat,
    seed: Option<u64>,
    skip_invalid: bool,
    out: PathBuf,
}

impl Ctx {
    fn seed(&self) -> anyhow::Result<u64> {
        self.seed.ok_or_else(|| anyhow!("this stage is stochastic; pass --seed or set `seed` in the config"))
    }

    fn load(&self) -> anyhow::Result<Corpus> {
        let path = self
            .corpus
            .as_deref()
            .ok_or_else(|| anyhow!("no corpus given; pass --corpus or set `corpus` in the config"))?;
        let loaded = load_corpus(path, self.format, LoadOptions { skip_invalid: self.skip_invalid })
            .with_context(|| format!("loading corpus {}", path.display()))?;
        Ok(loaded.corpus)
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    corpus_hash: Option<String>,
    seed: Option<u64>,
    tool_version: &'a str,
    created_at: String,
    settings: &'a serde_json::Value,
}

fn write_manifest(ctx: &Ctx, command: &str, corpus: Option<&Corpus>, settings: serde_json::Value) -> anyhow::Result<()> {
    let canonical = serde_json::to_vec(&settings)?;
    let manifest = RunManifest {
        command,
        config_hash: hex::encode(Sha256::digest(&canonical)),
        corpus_hash: corpus.map(Corpus::content_hash),
        seed: ctx.seed,
        tool_version: env!("CARGO_PKG_VERSION"),
        created_at: chrono::Utc::now().to_rfc3339(),
        settings: &settings,
    };
    write_text(&ctx.out.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")
}

fn write_text(path: &Path, text: String) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse<T: std::str::FromStr<Err = socsim::Error>>(value: Option<&str>, default: T) -> anyhow::Result<T> {
    match value {
        Some(v) => v.parse().map_err(|e: socsim::Error| anyhow!("{e}")),
        None => Ok(default),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = config::load(cli.config.as_deref())?;
    let format = parse(cli.format.as_deref().or(file.format.as_deref()), CorpusFormat::Jsonl)?;
    let ctx = Ctx {
        corpus: cli.corpus.or_else(|| file.corpus.clone()),
        format,
        seed: cli.seed.or(file.seed),
        skip_invalid: cli.skip_invalid || file.skip_invalid.unwrap_or(false),
        out: cli.out.or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
        file,
    };
    match cli.command {
        Command::Validate => cmd_validate(&ctx),
        Command::Split(a) => cmd_split(&ctx, a),
        Command::EmitTrain(a) => cmd_emit(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
        Command::GenDemo(a) => cmd_gen_demo(&ctx, a),
    }
}

fn cmd_validate(ctx: &Ctx) -> anyhow::Result<()> {
    let corpus = ctx.load()?;
    let reports = validate_corpus(&corpus);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        for v in &r.violations {
            eprintln!("{}: {} {} ({})", r.study_id, v.rule, v.message, v.locator);
        }
    }
    println!(
        "{} studies, {} records, {} failing studies",
        corpus.studies().len(),
        corpus.records().len(),
        failed.len()
    );
    write_text(&ctx.out.join("validation.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    write_manifest(ctx, "validate", Some(&corpus), serde_json::json!({ "format": format!("{:?}", ctx.format) }))?;
    if !failed.is_empty() {
        return Err(ValidationFailed(format!("{} studies failed validation", failed.len())).into());
    }
    Ok(())
}

fn cmd_split(ctx: &Ctx, a: SplitArgs) -> anyhow::Result<()> {
    let corpus = ctx.load()?;
    let seed = ctx.seed()?;
    let sec = &ctx.file.split;
    let kind = a.split_kind.or_else(|| sec.kind.clone()).unwrap_or_else(|| "study".into());
    let train_frac = a.train_frac.or(sec.train_frac);
    let min_arms = a.min_arms.or(sec.min_arms).unwrap_or(4);
    let n_studies = corpus.studies().len();
    let train_count = a.train_count.or(sec.train_count).unwrap_or_else(|| {
        let f = train_frac.unwrap_or(0.8);
        ((f * n_studies as f64).round() as usize).clamp(1, n_studies.saturating_sub(1).max(1))
    });
    let pilot_fractions = a
        .pilot_fractions
        .or_else(|| sec.pilot_fractions.clone())
        .unwrap_or_else(|| DEFAULT_PILOT_FRACTIONS.to_vec());

    let assignment = match kind.as_str() {
        "study" => split_studies(&corpus, train_count, seed)?,
        "condition" => split_conditions(&corpus, train_frac.unwrap_or(0.75), min_arms, seed)?,
        "outcome" => split_outcomes(&corpus, train_frac.unwrap_or(0.75), min_arms, seed)?,
        "participant_sweep" | "participant-sweep" => {
            let studies = split_studies(&corpus, train_count, seed)?;
            split_participants(&corpus, &studies, &pilot_fractions, seed)?
        }
        other => bail!("unknown split kind `{other}`"),
    };
    println!(
        "{:?} split: {} train units, {} eval units",
        assignment.kind(),
        assignment.train_keys.len(),
        assignment.eval_keys.len()
    );
    write_text(&ctx.out.join("split.json"), assignment.to_json()?)?;
    write_manifest(
        ctx,
        "split",
        Some(&corpus),
        serde_json::json!({ "spec": assignment.spec }),
    )
}

fn load_split(path: &Path, corpus: &Corpus) -> anyhow::Result<SplitAssignment> {
    let text = fs::read_to_string(path).with_context(|| format!("reading split {}", path.display()))?;
    let split: SplitAssignment =
        serde_json::from_str(&text).with_context(|| format!("parsing split {}", path.display()))?;
    if split.corpus_hash != corpus.content_hash() {
        bail!("split {} was drawn from a different corpus", path.display());
    }
    Ok(split)
}

fn http_config(ctx: &Ctx, a: &HttpArgs) -> anyhow::Result<HttpConfig> {
    let sec = &ctx.file.backend;
    let d = HttpConfig::default();
    let sd = SamplingParams::default();
    let config = HttpConfig {
        endpoint: a.endpoint.clone().or_else(|| sec.endpoint.clone()).unwrap_or(d.endpoint),
        model: a.model.clone().or_else(|| sec.model.clone()).unwrap_or(d.model),
        api_key_env: a.api_key_env.clone().or_else(|| sec.api_key_env.clone()).unwrap_or(d.api_key_env),
        sampling: SamplingParams {
            temperature: a.temperature.or(sec.temperature).unwrap_or(sd.temperature),
            top_p: a.top_p.or(sec.top_p).unwrap_or(sd.top_p),
            max_tokens: a.max_tokens.or(sec.max_tokens).unwrap_or(sd.max_tokens),
        },
        concurrency_limit: a.concurrency.or(sec.concurrency).unwrap_or(d.concurrency_limit),
        timeout: a
            .timeout_secs
            .or(sec.timeout_secs)
            .map(Duration::from_secs)
            .unwrap_or(d.timeout),
        ..d
    };
    config.check()?;
    Ok(config)
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")
}

fn cmd_emit(ctx: &Ctx, a: EmitArgs) -> anyhow::Result<()> {
    let corpus = ctx.load()?;
    let split = load_split(&a.split, &corpus)?;
    let records = match a.pilot_fraction {
        Some(f) => split.pilot_records(&corpus, f)?,
        None => split.records(&corpus, Side::Train),
    };
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let (summary, file) = match a.mode.as_str() {
        "plain" | "reasoning" => {
            let mode: SftMode = parse(Some(&a.mode), SftMode::Plain)?;
            let offline;
            let live;
            let provider: Option<&dyn TraceProvider> = match (mode, &a.traces) {
                (SftMode::Plain, _) => None,
                (SftMode::Reasoning, Some(path)) => {
                    offline = OfflineTraces::load(path)?;
                    Some(&offline)
                }
                (SftMode::Reasoning, None) => {
                    if a.http.endpoint.is_none() && ctx.file.backend.endpoint.is_none() {
                        bail!("reasoning mode needs --traces or an --endpoint for live traces");
                    }
                    live = LiveTraces::new(ChatClient::new(http_config(ctx, &a.http)?)?);
                    Some(&live)
                }
            };
            let file = format!("sft_{}.jsonl", a.mode);
            let concurrency = a.http.concurrency.or(ctx.file.backend.concurrency).unwrap_or(8);
            let rt = runtime()?;
            let summary = rt.block_on(emit_sft(&corpus, &records, mode, provider, concurrency, &ctx.out.join(&file)))?;
            (summary, file)
        }
        "dpo" => {
            let opts = DpoOptions {
                pairs_per_record: a.pairs_per_record,
                seed: ctx.seed()?,
                ..DpoOptions::default()
            };
            let (pairs, mut summary) = build_dpo_pairs(&corpus, &records, opts)?;
            emit_dpo(&pairs, &ctx.out.join("dpo.jsonl"))?;
            summary.emitted = pairs.len();
            (summary, "dpo.jsonl".to_string())
        }
        other => bail!("unknown emit mode `{other}`"),
    };
    println!(
        "{file}: {} examples from {} records ({} trace failures, {} leak skips, {} records without a pair)",
        summary.emitted, summary.source_records, summary.trace_failures, summary.leak_skipped, summary.zero_pair_records
    );
    write_text(
        &ctx.out.join(format!("summary_{}.json", a.mode)),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    write_text(
        &ctx.out.join("train_meta.json"),
        serde_json::to_string_pretty(&TrainingMeta::default())? + "\n",
    )?;
    write_manifest(
        ctx,
        "emit-train",
        Some(&corpus),
        serde_json::json!({
            "mode": a.mode,
            "split": split.spec,
            "pilot_fraction": a.pilot_fraction,
            "pairs_per_record": a.pairs_per_record,
            "traces": a.traces,
        }),
    )
}

fn cmd_predict(ctx: &Ctx, a: PredictArgs) -> anyhow::Result<()> {
    let corpus = ctx.load()?;
    let split = load_split(&a.split, &corpus)?;
    let eval = split.records(&corpus, Side::Eval);
    let backend: BackendKind = parse(
        a.backend.as_deref().or(ctx.file.backend.kind.as_deref()),
        BackendKind::Resampler,
    )?;
    let bounds: BoundsPolicy = parse(
        a.bounds.as_deref().or(ctx.file.metrics.bounds.as_deref()),
        BoundsPolicy::Declared,
    )?;
    let mut settings = serde_json::json!({ "backend": backend, "split": split.spec, "bounds": bounds });
    let preds: Vec<PredictionRecord> = match backend {
        BackendKind::File => {
            let path = a.predictions.as_deref().ok_or_else(|| anyhow!("file backend needs --predictions"))?;
            predict_file(path)?
        }
        BackendKind::Midpoint => baseline_midpoint(&corpus, &eval, bounds)?,
        BackendKind::Uniform => baseline_uniform(&corpus, &eval, bounds, ctx.seed()?)?,
        BackendKind::Resampler => oracle_resampler(
            &eval,
            ctx.seed()?,
            ResamplerOptions {
                leave_one_out: a.leave_one_out,
            },
        ),
        BackendKind::Http => {
            let config = http_config(ctx, &a.http)?;
            let mode = match a.prompt_mode.as_deref().or(ctx.file.backend.prompt_mode.as_deref()) {
                None | Some("direct") => PromptMode::Direct,
                Some("reasoning") => PromptMode::Reasoning,
                Some("fewshot") => PromptMode::Fewshot,
                Some(other) => bail!("unknown prompt mode `{other}`"),
            };
            let scales = stimulus_bounds(&corpus, &eval, BoundsPolicy::Declared);
            let train = split.records(&corpus, Side::Train);
            let pool = FewShotPool::new(corpus.studies(), train.iter().copied())?;
            let sim: Box<dyn SimilarityProvider> = match &a.embedding_endpoint {
                Some(url) => Box::new(EmbeddingClient::new(url, &a.embedding_model, &config.api_key_env)?),
                None => Box::new(LexicalCosine),
            };
            let seed = if mode == PromptMode::Fewshot { ctx.seed()? } else { ctx.seed.unwrap_or(0) };
            let mut requests = Vec::with_capacity(eval.len());
            for r in &eval {
                let manifest = corpus.study(&r.study_id).expect("record study resolves");
                let prompt = match mode {
                    PromptMode::Direct => render_direct((*r).into(), manifest, &r.condition_id, &r.outcome_id)?,
                    PromptMode::Reasoning => render_reasoning((*r).into(), manifest, &r.condition_id, &r.outcome_id)?,
                    _ => {
                        let key = r.stimulus_key();
                        let text = compose_stimulus(manifest, &r.condition_id, &r.outcome_id)?;
                        let exemplars = if pool.is_empty() {
                            Vec::new()
                        } else {
                            select_fewshot(&key, &text, &pool, a.fewshot_k, sim.as_ref(), seed)?.exemplars
                        };
                        render_fewshot((*r).into(), manifest, &r.condition_id, &r.outcome_id, &exemplars)?
                    }
                };
                let scale = scales
                    .get(&r.stimulus_key())
                    .and_then(|b| b.as_ref())
                    .ok_or_else(|| anyhow!("no response scale for {}", r.stimulus_key()))?
                    .as_scale();
                requests.push(PredictionRequest {
                    key: r.record_key(),
                    prompt,
                    scale,
                });
            }
            let policy = if a.reject_out_of_scale { ParsePolicy::Reject } else { ParsePolicy::Clamp };
            settings["http"] = serde_json::json!({
                "endpoint": config.endpoint,
                "model": config.model,
                "sampling": config.sampling,
                "concurrency": config.concurrency_limit,
                "prompt_mode": mode,
                "parse_policy": policy,
            });
            let client = ChatClient::new(config)?;
            runtime()?.block_on(predict_http(&client, requests, policy))?
        }
    };
    let failed = preds.iter().filter(|p| p.is_failed()).count();
    println!("{} predictions for {} eval records ({failed} parse failures)", preds.len(), eval.len());
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    write_predictions(&ctx.out.join("predictions.jsonl"), &preds)?;
    write_manifest(ctx, "predict", Some(&corpus), settings)
}

fn cmd_evaluate(ctx: &Ctx, a: EvalArgs) -> anyhow::Result<()> {
    let corpus = ctx.load()?;
    let split = load_split(&a.split, &corpus)?;
    if !a.predictions.exists() {
        bail!("prediction file {} does not exist", a.predictions.display());
    }
    let preds = predict_file(&a.predictions)?;
    let m = &ctx.file.metrics;
    let d = EvalOptions::default();
    let options = EvalOptions {
        bounds: parse(a.bounds.as_deref().or(m.bounds.as_deref()), d.bounds)?,
        parse_fail: parse::<ParseFailPolicy>(a.parse_fail.as_deref().or(m.parse_fail.as_deref()), d.parse_fail)?,
        weighting: parse::<Weighting>(a.weighting.as_deref().or(m.weighting.as_deref()), d.weighting)?,
        min_n: a.min_n.or(m.min_n).unwrap_or(d.min_n),
        n_boot: a.n_boot.or(m.n_boot).unwrap_or(d.n_boot),
        seed: ctx.seed()?,
        subgroup_categories: a.categories,
    };
    let eval = split.records(&corpus, Side::Eval);
    let result = evaluate(&corpus, &eval, &preds, &a.variant, &options)?;
    let ms = &result.macro_score;
    println!(
        "{}: accuracy {} alignment {} (empirical best {}, uniform {}); {} scored, {} missing, {} parse failures",
        result.variant,
        fmt_opt(ms.accuracy.map(|x| x * 100.0), 1),
        fmt_opt(ms.alignment, 3),
        fmt_opt(ms.bounds.empirical_best, 3),
        fmt_opt(ms.bounds.uniform_guess_alignment, 3),
        result.counts.scored,
        result.counts.missing,
        result.counts.parse_failed,
    );
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    write_text(&ctx.out.join("evaluation.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    write_text(
        &ctx.out.join("per_stimulus.csv"),
        socsim::report::per_stimulus_csv(std::slice::from_ref(&result))?,
    )?;
    write_manifest(
        ctx,
        "evaluate",
        Some(&corpus),
        serde_json::json!({ "options": options, "predictions": a.predictions, "split": split.spec }),
    )
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "--".into(), |v| format!("{v:.digits$}"))
}

fn read_eval(path: &Path) -> anyhow::Result<EvalResult> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn split_pair(s: &str) -> anyhow::Result<(&str, &str)> {
    s.split_once('=').ok_or_else(|| anyhow!("expected KEY=VALUE, got `{s}`"))
}

fn cmd_report(ctx: &Ctx, a: ReportArgs) -> anyhow::Result<()> {
    let results = a
        .evaluations
        .iter()
        .map(|p| read_eval(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let bases: BTreeMap<&str, &str> = a
        .base_of
        .iter()
        .map(|s| split_pair(s))
        .collect::<anyhow::Result<_>>()?;
    let mut variants: Vec<VariantScore> = results
        .iter()
        .map(|r| {
            let v = VariantScore::from_eval(r);
            match bases.get(r.variant.as_str()) {
                Some(b) => v.with_base(b),
                None => v,
            }
        })
        .collect();
    if !a.no_bounds {
        let base_eval = results
            .iter()
            .find(|r| r.variant == a.base)
            .ok_or_else(|| anyhow!("base variant `{}` is not among the evaluations", a.base))?;
        variants.extend(VariantScore::bounds_of(base_eval));
    }
    let mut report = build_report(&variants, &a.base, a.reference.as_deref())?;
    if !a.sweep.is_empty() {
        let mut points = Vec::new();
        for s in &a.sweep {
            let (f, path) = split_pair(s)?;
            let fraction: f64 = f.parse().with_context(|| format!("bad sweep fraction `{f}`"))?;
            let r = read_eval(Path::new(path))?;
            points.push(SweepPoint {
                fraction,
                accuracy: r.macro_score.accuracy,
                alignment: r.macro_score.alignment,
            });
        }
        report.sweep = Some(build_sweep(&points));
    }
    write_report_dir(&report, &results, &ctx.out)?;
    println!("report with {} rows written to {}", report.rows.len(), ctx.out.display());
    write_manifest(
        ctx,
        "report",
        None,
        serde_json::json!({
            "evaluations": a.evaluations,
            "base": a.base,
            "reference": a.reference,
            "base_of": a.base_of,
            "sweep": a.sweep,
        }),
    )
}

fn cmd_gen_demo(ctx: &Ctx, a: DemoArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        studies: a.studies,
        participants_per_study: a.participants,
        shape: if a.bimodal { ResponseShape::Bimodal } else { ResponseShape::Unimodal },
        seed: ctx.seed.unwrap_or(SyntheticSpec::default().seed),
        ..SyntheticSpec::default()
    };
    let corpus = generate(&spec)?;
    let dir = ctx.corpus.clone().unwrap_or_else(|| ctx.out.join("corpus"));
    write_corpus(&corpus, &dir, ctx.format)?;
    println!(
        "wrote {} studies / {} records to {}",
        corpus.studies().len(),
        corpus.records().len(),
        dir.display()
    );
    write_manifest(ctx, "gen-demo", Some(&corpus), serde_json::json!({ "spec": spec }))
}
