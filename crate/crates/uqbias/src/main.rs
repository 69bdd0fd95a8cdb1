use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uqbias::dataset;
use uqbias::perturb::Bias;
use uqbias::pipeline::{
    self, analyze_bias_effects, emit_report, score_methods, ConfidenceKind, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "uqbias",
    version,
    about = "Epistemic/aleatoric uncertainty for multiple-choice VQA answers, \
             with prompt-bias mitigation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the endpoint kind: "real" or "synthetic".
    #[arg(long)]
    endpoint: Option<String>,
    /// Override the bias list, comma separated
    /// (phrasing,positional,label,shape,orientation,lowlevel).
    #[arg(long)]
    biases: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the dataset and report per-record rejections.
    Ingest(ConfigArgs),
    /// Run the experiment: greedy pass, repetitive baseline, per-bias
    /// suites; persists queries.jsonl and measurements.jsonl.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        /// Continue an interrupted run from its query cache.
        #[arg(long)]
        resume: bool,
    },
    /// Compute per-method uncertainty scores into scores.jsonl.
    Score(ConfigArgs),
    /// Run the bias-effect regressions and print them.
    Analyze(ConfigArgs),
    /// Emit the CSV tables, ROC point lists and markdown summary.
    Report(ConfigArgs),
    /// Re-derive a finished run from its cache into a scratch directory
    /// and verify the outputs are byte-identical.
    Replay(ConfigArgs),
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(endpoint) = &args.endpoint {
        config.endpoint = endpoint
            .parse()
            .map_err(|e: String| anyhow::anyhow!(e))?;
    }
    if let Some(biases) = &args.biases {
        config.biases = biases
            .split(',')
            .map(|s| s.trim().parse::<Bias>())
            .collect::<Result<Vec<_>, _>>()?;
        config.normalize();
    }
    config.validate()?;
    Ok(config)
}

fn load_config_with_out(args: &ConfigArgs) -> Result<(RunConfig, PathBuf)> {
    let config = load_config(args)?;
    let out = args
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .context("no output directory: set out_dir in the config or pass --out")?;
    Ok((config, out))
}

fn main() -> Result<()> {
    // Die quietly when stdout is a closed pipe (e.g. `uqbias score | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match Cli::parse().command {
        Command::Ingest(args) => cmd_ingest(&args),
        Command::Run { args, resume } => cmd_run(&args, resume),
        Command::Score(args) => cmd_score(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Report(args) => cmd_report(&args),
        Command::Replay(args) => cmd_replay(&args),
    }
}

fn cmd_ingest(args: &ConfigArgs) -> Result<()> {
    let config = load_config(args)?;
    let report = dataset::ingest(&config.dataset, config.master_seed)?;
    println!(
        "ingested {} instances from {}",
        report.instances.len(),
        config.dataset.display()
    );
    for rejection in &report.rejections {
        println!("rejected line {}: {}", rejection.line, rejection.reason);
    }
    if !report.rejections.is_empty() {
        println!("{} records rejected", report.rejections.len());
    }
    Ok(())
}

fn cmd_run(args: &ConfigArgs, resume: bool) -> Result<()> {
    let (config, out) = load_config_with_out(args)?;
    let summary = pipeline::run_experiment(&config, &out, resume)?;
    let m = &summary.manifest;
    println!("run complete: {}", summary.run_dir.display());
    println!(
        "  instances {} (rejected {}), queries {}, backend calls {}",
        m.instance_count, m.rejected_records, m.total_queries, summary.backend_calls
    );
    println!(
        "  failures: greedy parse {}, extraction {}, low label mass {}",
        m.greedy_parse_failures, m.extraction_failures, m.low_label_mass_queries
    );
    Ok(())
}

fn cmd_score(args: &ConfigArgs) -> Result<()> {
    let (config, out) = load_config_with_out(args)?;
    let records = dataset::read_measurements(&pipeline::measurements_path(&out))?;
    let methods = score_methods(&records, &config.biases, config.n_perturbations)?;
    let path = out.join("scores.jsonl");
    let mut body = String::new();
    for method in &methods {
        body.push_str(&serde_json::to_string(method)?);
        body.push('\n');
    }
    std::fs::write(&path, body)?;
    println!("wrote {} methods to {}", methods.len(), path.display());
    for method in &methods {
        println!(
            "  {:<24} inferences {:>3}  instances {}",
            method.method_id,
            method.inference_count,
            method.scores.len()
        );
    }
    Ok(())
}

fn cmd_analyze(args: &ConfigArgs) -> Result<()> {
    let (_, out) = load_config_with_out(args)?;
    let records = dataset::read_measurements(&pipeline::measurements_path(&out))?;
    for x_kind in [ConfidenceKind::Confidence, ConfidenceKind::EpistemicInconfidence] {
        println!("regressions vs {}", x_kind.as_str());
        for row in analyze_bias_effects(&records, x_kind) {
            match &row.outcome {
                Ok(fit) => println!(
                    "  {:<12} {:<24} slope {:>10.6}  p {:>12.6e}  n {}",
                    row.bias.to_string(),
                    row.y_kind.as_str(),
                    fit.slope,
                    fit.p_value,
                    fit.n
                ),
                Err(e) => println!(
                    "  {:<12} {:<24} error: {e}",
                    row.bias.to_string(),
                    row.y_kind.as_str()
                ),
            }
        }
    }
    Ok(())
}

fn cmd_report(args: &ConfigArgs) -> Result<()> {
    let (config, out) = load_config_with_out(args)?;
    let manifest = pipeline::read_manifest(&out)?;
    let records = dataset::read_measurements(&pipeline::measurements_path(&out))?;
    let scores = score_methods(&records, &config.biases, config.n_perturbations)?;
    let regressions = vec![
        (
            ConfidenceKind::Confidence,
            analyze_bias_effects(&records, ConfidenceKind::Confidence),
        ),
        (
            ConfidenceKind::EpistemicInconfidence,
            analyze_bias_effects(&records, ConfidenceKind::EpistemicInconfidence),
        ),
    ];
    let dataset_name = config
        .dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let bundle = emit_report(
        &out,
        &records,
        &scores,
        &regressions,
        &dataset_name,
        &manifest.config_digest,
        &manifest.notes,
    )?;
    println!("wrote {} report files to {}", bundle.files.len(), bundle.dir.display());
    Ok(())
}

fn cmd_replay(args: &ConfigArgs) -> Result<()> {
    let (config, out) = load_config_with_out(args)?;
    let original_manifest = pipeline::read_manifest(&out)
        .with_context(|| format!("{} does not hold a finished run", out.display()))?;
    if original_manifest.config_digest != config.digest() {
        bail!(
            "config digest {} does not match the run's {}; replay needs the original config",
            config.digest(),
            original_manifest.config_digest
        );
    }

    let replay_dir = out.with_file_name(format!(
        "{}.replay",
        out.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string())
    ));
    if replay_dir.exists() {
        std::fs::remove_dir_all(&replay_dir)?;
    }
    std::fs::create_dir_all(&replay_dir)?;
    std::fs::copy(
        pipeline::queries_path(&out),
        pipeline::queries_path(&replay_dir),
    )
    .context("copying query cache")?;

    let summary = pipeline::run_experiment(&config, &replay_dir, true)?;
    println!(
        "replayed {} queries with {} backend calls",
        summary.manifest.total_queries, summary.backend_calls
    );

    let mut all_identical = true;
    for name in ["queries.jsonl", "measurements.jsonl", "manifest.json"] {
        let identical = files_identical(&out.join(name), &replay_dir.join(name))?;
        println!(
            "  {name}: {}",
            if identical { "identical" } else { "DIFFERS" }
        );
        all_identical &= identical;
    }
    std::fs::remove_dir_all(&replay_dir)?;
    if !all_identical {
        bail!("replay diverged from the original run");
    }
    println!("replay verified");
    Ok(())
}

fn files_identical(a: &Path, b: &Path) -> Result<bool> {
    let read = |p: &Path| -> Result<Vec<u8>> {
        std::fs::read(p).with_context(|| format!("reading {}", p.display()))
    };
    Ok(read(a)? == read(b)?)
}
