use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use ttl_core::eval::{
    emit_report, evaluate, load_dataset, parse_label_list, render_chart, DatasetFormat,
    EngineBackend, EvalOptions, EvalReport, Metric, ModelBackend, RemoteBackend, ReportFormat,
    ScriptedBackend, TaskSpec,
};
use ttl_core::lora::{
    dataset_loss, finetune, load_instructions, AdapterSet, LoraConfig, Proj, TrainConfig,
};
use ttl_core::model::tokenizer::{detokenize_lossy, tokenize, BOS, EOS};
use ttl_core::{selfcheck, DecodeSession, Error, Model, ModelConfig};

#[derive(Parser)]
#[command(
    name = "ttl",
    version,
    about = "Toy transformer engine, LoRA trainer and prompt-classification harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write freshly initialized model weights.
    InitWeights(InitArgs),
    /// Greedy-decode a continuation of a prompt.
    Generate(GenerateArgs),
    /// Train LoRA adapters on an instruction corpus.
    Finetune(FinetuneArgs),
    /// Fold adapters into the base weights.
    Merge(MergeArgs),
    /// Classify a labeled dataset through a prompt template and score it.
    Eval(EvalArgs),
    /// Draw a grouped bar chart from evaluation reports.
    Chart(ChartArgs),
    /// Run the built-in property suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct InitArgs {
    /// JSON model configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initialization seed [default: 0, or the config file's value].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long)]
    adapter: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// JSON file with any of: rank, alpha, dropout, targets, steps, seed,
    /// learning_rate, batch_size. Flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// JSONL with "instruction" and "response" per line.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    rank: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    alpha: Option<f32>,
    /// [default: 0.05]
    #[arg(long)]
    dropout: Option<f32>,
    /// Comma-separated subset of wq,wk,wv,wo [default: wq,wv]
    #[arg(long)]
    targets: Option<String>,
    /// [default: 200]
    #[arg(long)]
    steps: Option<usize>,
    /// Seeds adapter init, shuffling and dropout [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out_adapter: PathBuf,
    /// Optional CSV of per-step training loss.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON file with any of: template, labels, parallel, max_new,
    /// error_budget, format. Flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate the in-process engine with these weights.
    #[arg(long, conflicts_with_all = ["backend_url", "scripted"])]
    weights: Option<PathBuf>,
    /// Adapters applied on top of --weights.
    #[arg(long, requires = "weights")]
    adapter: Option<PathBuf>,
    /// Remote endpoint (falls back to BACKEND_URL); token from BACKEND_TOKEN.
    #[arg(long, conflicts_with = "scripted")]
    backend_url: Option<String>,
    /// Scripted backend: gold-echo or constant:<text>.
    #[arg(long)]
    scripted: Option<String>,
    #[arg(long)]
    dataset: PathBuf,
    /// jsonl or csv [default: from the file extension]
    #[arg(long)]
    format: Option<String>,
    /// tweetsent3, agnews4, tweetsent2 or fakerecogna2
    #[arg(long)]
    template: Option<String>,
    /// Comma-separated class order [default: the template's]
    #[arg(long)]
    labels: Option<String>,
    /// Worker threads [default: 1]
    #[arg(long)]
    parallel: Option<usize>,
    /// Tokens generated per sample [default: 8]
    #[arg(long)]
    max_new: Option<usize>,
    /// Backend failures tolerated before aborting [default: 10]
    #[arg(long)]
    error_budget: Option<usize>,
    /// Match labels ignoring accents.
    #[arg(long)]
    accent_insensitive: bool,
    /// Report path; json, md or csv chosen by extension.
    #[arg(long)]
    out_report: Option<PathBuf>,
}

#[derive(Args)]
struct ChartArgs {
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// accuracy, macro_f1, weighted_f1, macro_precision or macro_recall
    #[arg(long, default_value = "accuracy")]
    metric: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Run a single suite.
    #[arg(long)]
    suite: Option<String>,
}

/// Values from a `--config` JSON object, consulted when a flag is absent.
struct ConfigFile(Map<String, Value>);

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<ConfigFile> {
        let Some(path) = path else {
            return Ok(ConfigFile(Map::new()));
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(map)) => Ok(ConfigFile(map)),
            Ok(_) => Err(
                Error::Usage(format!("{}: config must be a JSON object", path.display())).into(),
            ),
            Err(e) => Err(Error::Usage(format!("{}: {e}", path.display())).into()),
        }
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::Usage(format!("config key {key}: {e}")).into()),
        }
    }

    fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        Ok(match flag {
            Some(v) => Some(v),
            None => self.get(key)?,
        })
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        if let Some(k) = self.0.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Usage(format!(
                "unknown config key {k:?}; expected one of {}",
                known.join(", ")
            ))
            .into());
        }
        Ok(())
    }
}

fn init_weights(a: InitArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let mut merged = serde_json::to_value(ModelConfig::default())?;
    let obj = merged
        .as_object_mut()
        .expect("config serializes to an object");
    for (k, v) in file.0 {
        obj.insert(k, v);
    }
    if let Some(seed) = a.seed {
        obj.insert("seed".into(), json!(seed));
    }
    let config: ModelConfig =
        serde_json::from_value(merged).map_err(|e| Error::Usage(format!("model config: {e}")))?;
    let model = Model::init(config)?;
    model.save(&a.out)?;
    println!(
        "wrote {} ({} parameters, sha256 {})",
        a.out.display(),
        model.param_count(),
        model.digest()
    );
    Ok(())
}

fn load_model(weights: &Path, adapter: Option<&Path>) -> Result<Model> {
    let mut model = Model::load(weights)?;
    if let Some(path) = adapter {
        model.attach_adapters(AdapterSet::load(path)?)?;
    }
    Ok(model)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let model = load_model(&a.weights, a.adapter.as_deref())?;
    let mut prompt = vec![BOS];
    prompt.extend(tokenize(&a.prompt));
    let out = DecodeSession::new(&model).greedy_decode(&prompt, a.max_new, Some(EOS))?;
    println!("{}", detokenize_lossy(&out));
    Ok(())
}

fn parse_targets(s: &str) -> Result<Vec<Proj>> {
    s.split(',')
        .map(|t| t.trim().parse::<Proj>().map_err(anyhow::Error::from))
        .collect()
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.reject_unknown(&[
        "rank",
        "alpha",
        "dropout",
        "targets",
        "steps",
        "seed",
        "learning_rate",
        "batch_size",
    ])?;
    let rank = file
        .pick(a.rank, "rank")?
        .ok_or_else(|| Error::Usage("--rank is required (no default rank)".into()))?;
    let seed = file.pick(a.seed, "seed")?.unwrap_or(0);
    let mut lora = LoraConfig::with_rank(rank);
    lora.seed = seed;
    if let Some(alpha) = file.pick(a.alpha, "alpha")? {
        lora.alpha = alpha;
    }
    if let Some(dropout) = file.pick(a.dropout, "dropout")? {
        lora.dropout = dropout;
    }
    if let Some(t) = file.pick(a.targets, "targets")? {
        lora.targets = parse_targets(&t)?;
    }
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        learning_rate: file
            .pick(a.lr, "learning_rate")?
            .unwrap_or(defaults.learning_rate),
        steps: file.pick(a.steps, "steps")?.unwrap_or(defaults.steps),
        batch_size: file
            .pick(a.batch_size, "batch_size")?
            .unwrap_or(defaults.batch_size),
        seed,
        ..defaults
    };

    let model = Model::load(&a.weights)?;
    let data = load_instructions(&a.data)?;
    let before = dataset_loss(&model, None, &data)?;
    let outcome = finetune(&model, &lora, &data, &train)?;
    let after = dataset_loss(&model, Some(&outcome.adapters), &data)?;
    outcome.adapters.save(&a.out_adapter)?;
    if let Some(path) = &a.loss_log {
        let mut s = String::from("step,loss\n");
        for (i, l) in outcome.losses.iter().enumerate() {
            s.push_str(&format!("{},{l:.6}\n", i + 1));
        }
        std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "trained {} adapter parameters for {} steps; corpus loss {before:.4} -> {after:.4}",
        outcome.adapters.trainable_params(),
        train.steps
    );
    println!("wrote {}", a.out_adapter.display());
    Ok(())
}

fn merge(a: MergeArgs) -> Result<()> {
    let mut model = load_model(&a.weights, Some(&a.adapter))?;
    model.merge_adapters()?;
    model.save(&a.out)?;
    println!("wrote {} (sha256 {})", a.out.display(), model.digest());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.reject_unknown(&[
        "template",
        "labels",
        "parallel",
        "max_new",
        "error_budget",
        "format",
    ])?;
    let template: String = file
        .pick(a.template, "template")?
        .ok_or_else(|| Error::Usage("--template is required".into()))?;
    let mut spec = TaskSpec::new(&template)?;
    if let Some(labels) = file.pick(a.labels, "labels")? {
        spec = spec.with_labels(parse_label_list(&labels)?)?;
    }
    spec.fold_accents = a.accent_insensitive;
    if let Some(n) = file.pick(a.max_new, "max_new")? {
        spec.max_new_tokens = n;
    }
    let format = match file.pick(a.format, "format")? {
        Some(f) => f.parse::<DatasetFormat>()?,
        None => DatasetFormat::from_path(&a.dataset).ok_or_else(|| {
            Error::Usage(format!(
                "cannot tell the format of {}; pass --format",
                a.dataset.display()
            ))
        })?,
    };
    let dataset = load_dataset(&a.dataset, format, &spec.labels)?;
    let opts = EvalOptions {
        parallelism: file.pick(a.parallel, "parallel")?.unwrap_or(1).max(1),
        error_budget: file.pick(a.error_budget, "error_budget")?.unwrap_or(10),
    };

    let mut provenance = Map::new();
    let backend: Box<dyn ModelBackend> = if let Some(w) = &a.weights {
        let model = load_model(w, a.adapter.as_deref())?;
        provenance.insert("model_seed".into(), json!(model.config.seed));
        provenance.insert("weights_sha256".into(), json!(model.digest()));
        if let Some(set) = model.adapters() {
            provenance.insert("adapter_targets".into(), json!(set.adapters.len()));
        }
        let name = w
            .file_stem()
            .map_or_else(|| "engine".into(), |s| s.to_string_lossy().into_owned());
        Box::new(EngineBackend::new(model, name))
    } else if let Some(s) = &a.scripted {
        Box::new(ScriptedBackend::from_spec(s, &dataset, &spec)?)
    } else {
        Box::new(RemoteBackend::from_env(a.backend_url.clone())?)
    };
    provenance.insert("decoding".into(), json!("greedy"));
    provenance.insert("max_new_tokens".into(), json!(spec.max_new_tokens));
    provenance.insert("parallel".into(), json!(opts.parallelism));

    let mut report = evaluate(backend.as_ref(), &dataset, &spec, opts)?;
    report.provenance = provenance.into_iter().collect();
    println!(
        "{} on {}: accuracy {:.4}, macro-F1 {:.4} over {} samples ({} unparseable, {} errors)",
        report.model,
        report.dataset,
        report.accuracy,
        report.macro_f1,
        report.sample_count,
        report.unparseable,
        report.errors
    );
    if let Some(path) = &a.out_report {
        let fmt = ReportFormat::from_path(path).unwrap_or(ReportFormat::Json);
        std::fs::write(path, emit_report(&report, fmt))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn chart(a: ChartArgs) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    let reports = a
        .reports
        .iter()
        .map(|p| -> Result<EvalReport> {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("{} is not a JSON report", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let svg = render_chart(&reports, metric)?;
    std::fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn selfcheck_cmd(a: SelfcheckArgs) -> Result<bool> {
    let outcomes = selfcheck::run(a.suite.as_deref())?;
    let mut ok = true;
    for o in &outcomes {
        println!(
            "{} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
        ok &= o.passed;
    }
    Ok(ok)
}

/// The error and its causes, skipping causes already spelled out.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::InitWeights(a) => init_weights(a),
        Command::Generate(a) => generate(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Merge(a) => merge(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Chart(a) => chart(a),
        Command::Selfcheck(a) => match selfcheck_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
