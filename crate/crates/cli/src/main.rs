use std::collections::{HashMap, HashSet};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use av_rationale::annotation::{self, AnnotationStore, ServiceConfig};
use av_rationale::corpus::{
    load_corpus, read_pairs_jsonl, sample_pairs, write_pairs_jsonl, CorpusFormat, SamplerConfig,
};
use av_rationale::filter::{export_training_jsonl, filter_records, read_jsonl, write_jsonl};
use av_rationale::gateway::{EndpointConfig, Gateway, ModelResponse, Url};
use av_rationale::harness::{
    load_toml, ood_grid, render_grid, render_report, run_eval, GridSpec, ReportFormat, RunSpec,
};
use av_rationale::model::TrainingExample;
use av_rationale::{build_prompt, parse_rationale, PromptKind};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "avr",
    version,
    about = "Authorship-verification rationale toolkit"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,
    /// Directory for everything a command writes.
    #[arg(long, short = 'o', global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a balanced set of document pairs from a corpus file.
    SamplePairs(SampleArgs),
    /// Collect model responses for every pair.
    Generate(GenerateArgs),
    /// Keep responses that parse, match gold and are fully consistent.
    Filter(FilterArgs),
    /// Write kept examples as chat-format training lines.
    ExportTrain(ExportArgs),
    /// Evaluate one endpoint on one test set.
    Eval(EvalArgs),
    /// Evaluate every (model, test set) combination from the config file.
    Grid,
    /// Serve the annotation API and static UI.
    ServeAnnotation(ServeArgs),
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_words: Option<usize>,
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Args, Default, Clone)]
struct EndpointArgs {
    #[arg(long)]
    base_url: Option<Url>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    prompt: Option<PromptKind>,
    #[arg(long)]
    n_responses: Option<usize>,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    responses: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// `kept.jsonl` written by `filter`.
    #[arg(long)]
    kept: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    test_set: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    prompt: Option<PromptKind>,
    #[arg(long)]
    tag: Option<String>,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    bind: Option<SocketAddr>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    show_gold: bool,
    /// Create tasks from these pairs and the first parseable response of each.
    #[arg(long, requires_all = ["responses", "annotators"])]
    pairs: Option<PathBuf>,
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Comma-separated annotator ids.
    #[arg(long, value_delimiter = ',')]
    annotators: Option<Vec<String>>,
    /// Print the agreement table and exit.
    #[arg(long)]
    aggregate_only: bool,
}

fn parse_kind(s: &str) -> Result<PromptKind, String> {
    s.parse::<PromptKind>().map_err(|e| e.to_string())
}

/// Everything a config file may set. Command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    #[serde(default)]
    prompt: Option<PromptKind>,
    #[serde(default)]
    parallelism: Option<usize>,
    #[serde(default)]
    endpoint: Option<EndpointConfig>,
    #[serde(default)]
    sample: Option<SampleConfig>,
    #[serde(default)]
    grid: Option<GridSpec>,
    #[serde(default)]
    annotation: Option<AnnotationConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleConfig {
    n_pairs: Option<usize>,
    seed: Option<u64>,
    max_words_per_doc: Option<usize>,
    dataset_tag: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationConfig {
    store: Option<PathBuf>,
    bind: Option<SocketAddr>,
    static_dir: Option<PathBuf>,
    seed: Option<u64>,
    #[serde(default)]
    show_gold: bool,
}

struct Ctx {
    config: Config,
    output_dir: PathBuf,
}

impl Ctx {
    fn out(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating {}", self.output_dir.display()))?;
        Ok(self.output_dir.join(name))
    }

    fn endpoint(&self, args: &EndpointArgs) -> Result<EndpointConfig> {
        let mut cfg = match (&self.config.endpoint, &args.base_url, &args.model) {
            (_, Some(url), Some(model)) => {
                let mut c = self
                    .config
                    .endpoint
                    .clone()
                    .unwrap_or_else(|| EndpointConfig::new(url.clone(), model));
                c.base_url = url.clone();
                c.model_name = model.clone();
                c
            }
            (Some(c), url, model) => {
                let mut c = c.clone();
                if let Some(u) = url {
                    c.base_url = u.clone();
                }
                if let Some(m) = model {
                    c.model_name = m.clone();
                }
                c
            }
            (None, _, _) => bail!(
                "no endpoint: pass --base-url and --model or add an [endpoint] table to the config"
            ),
        };
        if let Some(v) = &args.api_key_env {
            cfg.api_key_env = Some(v.clone());
        }
        if let Some(t) = args.temperature {
            cfg.temperature = t;
        }
        if let Some(d) = &args.cache_dir {
            cfg.cache_dir = Some(d.clone());
        }
        Ok(cfg)
    }

    fn parallelism(&self, args: &EndpointArgs) -> usize {
        args.parallelism.or(self.config.parallelism).unwrap_or(4)
    }

    fn prompt(&self, flag: Option<PromptKind>) -> PromptKind {
        flag.or(self.config.prompt).unwrap_or(PromptKind::Cave)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => load_toml::<Config>(path)?,
        None => Config::default(),
    };
    let ctx = Ctx {
        config,
        output_dir: cli
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out")),
    };
    let rt = tokio::runtime::Runtime::new().context("starting async runtime")?;
    match cli.command {
        Command::SamplePairs(a) => sample(&ctx, a),
        Command::Generate(a) => rt.block_on(generate(&ctx, a)),
        Command::Filter(a) => run_filter(&ctx, a),
        Command::ExportTrain(a) => export(&ctx, a),
        Command::Eval(a) => rt.block_on(eval(&ctx, a)),
        Command::Grid => rt.block_on(grid(&ctx)),
        Command::ServeAnnotation(a) => rt.block_on(serve(&ctx, a)),
    }
}

fn sample(ctx: &Ctx, a: SampleArgs) -> Result<()> {
    let defaults = ctx.config.sample.as_ref();
    let n_pairs = a
        .n_pairs
        .or(defaults.and_then(|d| d.n_pairs))
        .context("--n-pairs is required (or sample.n_pairs in the config)")?;
    let seed = a.seed.or(defaults.and_then(|d| d.seed)).unwrap_or(0);
    let mut cfg = SamplerConfig::new(n_pairs, seed);
    if let Some(w) = a.max_words.or(defaults.and_then(|d| d.max_words_per_doc)) {
        cfg.max_words_per_doc = w;
    }
    cfg.dataset_tag = a
        .tag
        .or(defaults.and_then(|d| d.dataset_tag.clone()))
        .unwrap_or_default();
    let loaded = load_corpus(&a.corpus, CorpusFormat::from_path(&a.corpus))?;
    for r in &loaded.rejects {
        log::warn!(
            "{}: line {} rejected: {}",
            a.corpus.display(),
            r.line,
            r.reason
        );
    }
    let pairs = sample_pairs(&loaded.docs, &cfg)?;
    let path = ctx.out("pairs.jsonl")?;
    write_pairs_jsonl(&path, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), path.display());
    Ok(())
}

async fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let pairs = read_pairs_jsonl(&a.pairs)?;
    let mut endpoint = ctx.endpoint(&a.endpoint)?;
    if let Some(n) = a.n_responses {
        endpoint.n_responses = n;
    }
    let kind = ctx.prompt(a.prompt);
    let prompts: Vec<_> = pairs.iter().map(|p| build_prompt(kind, p)).collect();
    let gateway = Gateway::new(endpoint)?;
    let (items, summary) = gateway
        .run_batch(&prompts, ctx.parallelism(&a.endpoint))
        .await;
    if let Some((_, e)) = items
        .iter()
        .find_map(|(id, r)| r.as_ref().err().filter(|e| e.is_fatal()).map(|e| (id, e)))
    {
        bail!("endpoint unusable: {e}");
    }
    let order: HashMap<&str, usize> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.pair_id.as_str(), i))
        .collect();
    let mut responses: Vec<ModelResponse> = items
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok())
        .flatten()
        .cloned()
        .collect();
    responses.sort_by_key(|r| (order[r.pair_id.as_str()], r.response_index));
    let path = ctx.out("responses.jsonl")?;
    write_jsonl(&path, &responses)?;
    write_jsonl(&ctx.out("generate_failures.jsonl")?, &summary.failures)?;
    println!(
        "{} pairs ok, {} failed; wrote {} responses to {}",
        summary.succeeded,
        summary.failed,
        responses.len(),
        path.display()
    );
    Ok(())
}

fn run_filter(ctx: &Ctx, a: FilterArgs) -> Result<()> {
    let pairs = read_pairs_jsonl(&a.pairs)?;
    let responses: Vec<ModelResponse> = read_jsonl(&a.responses)?;
    let out = filter_records(&pairs, &responses)?;
    write_jsonl(&ctx.out("kept.jsonl")?, &out.kept)?;
    write_jsonl(&ctx.out("decisions.jsonl")?, &out.decisions)?;
    write_jsonl(&ctx.out("raw_audit.jsonl")?, &out.audit)?;
    let mut by_stage: HashMap<String, usize> = HashMap::new();
    for d in out.decisions.iter().filter(|d| !d.passed) {
        *by_stage
            .entry(format!("{:?}", d.failed_stage.expect("failed")))
            .or_default() += 1;
    }
    let mut stages: Vec<_> = by_stage.into_iter().collect();
    stages.sort();
    println!(
        "kept {} of {} responses (pass rate {:.3}); dropped by stage: {:?}",
        out.kept.len(),
        out.decisions.len(),
        out.pass_rate(),
        stages
    );
    Ok(())
}

fn export(ctx: &Ctx, a: ExportArgs) -> Result<()> {
    let kept: Vec<TrainingExample> = read_jsonl(&a.kept)?;
    let path = match a.out {
        Some(p) => p,
        None => ctx.out("train.jsonl")?,
    };
    let n = export_training_jsonl(&kept, &path)?;
    println!("wrote {n} training lines to {}", path.display());
    Ok(())
}

async fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let spec = RunSpec {
        prompt_kind: ctx.prompt(a.prompt),
        endpoint: ctx.endpoint(&a.endpoint)?,
        test_set: a.test_set,
        output_dir: Some(ctx.output_dir.clone()),
        parallelism: ctx.parallelism(&a.endpoint),
        dataset_tag: a.tag,
    };
    let report = run_eval(&spec).await?;
    print!("{}", render_report(&report, ReportFormat::PlainTable));
    Ok(())
}

async fn grid(ctx: &Ctx) -> Result<()> {
    let mut spec = ctx
        .config
        .grid
        .clone()
        .context("grid needs a [grid] table in the config file")?;
    if spec.output_dir.is_none() {
        spec.output_dir = Some(ctx.output_dir.clone());
    }
    let result = ood_grid(&spec).await?;
    print!("{}", render_grid(&result));
    Ok(())
}

async fn serve(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let defaults = ctx.config.annotation.as_ref();
    let store_dir = a
        .store
        .or(defaults.and_then(|d| d.store.clone()))
        .unwrap_or_else(|| ctx.output_dir.join("annotation"));
    let seed = a.seed.or(defaults.and_then(|d| d.seed)).unwrap_or(0);
    let mut store = AnnotationStore::open(&store_dir, seed)?;
    if let (Some(pairs), Some(responses), Some(annotators)) =
        (&a.pairs, &a.responses, &a.annotators)
    {
        let n = add_bundle(&mut store, pairs, responses, annotators)?;
        println!("created {n} annotation tasks");
    }
    if a.aggregate_only {
        print!(
            "{}",
            annotation::render_agreement(&store.aggregate(), false)
        );
        return Ok(());
    }
    let cfg = ServiceConfig {
        bind: a
            .bind
            .or(defaults.and_then(|d| d.bind))
            .unwrap_or_else(|| "127.0.0.1:8080".parse().expect("literal address")),
        static_dir: a.static_dir.or(defaults.and_then(|d| d.static_dir.clone())),
        show_gold: a.show_gold || defaults.is_some_and(|d| d.show_gold),
    };
    annotation::serve(store, cfg).await?;
    Ok(())
}

fn add_bundle(
    store: &mut AnnotationStore,
    pairs: &Path,
    responses: &Path,
    annotators: &[String],
) -> Result<usize> {
    let pairs = read_pairs_jsonl(pairs)?;
    let responses: Vec<ModelResponse> = read_jsonl(responses)?;
    let existing: HashSet<String> = store.tasks().iter().map(|t| t.task_id.clone()).collect();
    let mut items = Vec::new();
    for pair in pairs {
        if existing.contains(&pair.pair_id) {
            continue;
        }
        let record = responses
            .iter()
            .filter(|r| r.pair_id == pair.pair_id)
            .find_map(|r| parse_rationale(&r.text, &pair.pair_id).ok());
        match record {
            Some(record) => items.push((pair, record)),
            None => log::warn!(
                "pair {}: no parseable rationale, no task created",
                pair.pair_id
            ),
        }
    }
    let n = items.len();
    store.create_task_bundle(items, annotators)?;
    Ok(n)
}
