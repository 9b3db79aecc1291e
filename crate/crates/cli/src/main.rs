mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use trajformer_autodiff::GradCheckConfig;
use trajformer_core::checkpoint::Checkpoint;
use trajformer_core::config::{Configurable, KvConfig};
use trajformer_core::data::{
    load_records, prepare_domains, prepare_with_scaler, read_shard, synth_generate, write_domain_dir, write_records,
    Domain, Scaler, SynthSpec, TrajectorySample, DEFAULT_MAX_AGENTS, SCALER_FILE, TEST_SHARD, TRAIN_SHARD,
};
use trajformer_core::evaluation::{compare_reports, full_report, HorizonReport, ModelPredictor};
use trajformer_core::gradcheck::check_all;
use trajformer_core::training::{CaseStudy, RunConfig, TrainData, TrainOutput, Trainer};

use crate::manifest::{with_suffix, RunManifest};

const LOG_ENV: &str = "TRAJFORMER_LOG";
const EVAL_CHUNK: usize = 64;

#[derive(Parser)]
#[command(name = "trajformer", version, about = "Graph-embedded transformer for multi-agent trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a trajectory CSV into train/test sample shards and a scaler.
    Prepare(PrepareArgs),
    /// Generate synthetic source and target traffic and prepare both.
    Synth(SynthArgs),
    /// Train a model, optionally with domain-adversarial training.
    Train(TrainArgs),
    /// Score a checkpoint on a prepared domain, per horizon.
    Eval(EvalArgs),
    /// Compare two evaluation reports.
    Compare(CompareArgs),
    /// Check analytic gradients of every layer against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output directory for shards, scaler and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_AGENTS)]
    max_agents: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DomainArg::Source)]
    domain: DomainArg,
    /// Normalize with an existing scaler instead of fitting one. Required for
    /// the target domain.
    #[arg(long)]
    scaler: Option<PathBuf>,
    /// Defaults to 1/3 for the source domain and 1/2 for the target.
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (`key = value` file); built-in defaults otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MAX_AGENTS)]
    max_agents: usize,
    #[arg(long, default_value = "cross_city")]
    case_study: String,
    /// Spec override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl DomainArg {
    fn domain(self) -> Domain {
        match self {
            Self::Source => Domain::Source,
            Self::Target => Domain::Target,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prepared source-domain directory.
    #[arg(long)]
    source: PathBuf,
    /// Prepared target-domain directory.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Overrides the config's `dat` key.
    #[arg(long, value_enum)]
    dat: Option<Switch>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Prepared domain directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    domain: DomainArg,
    /// Output prefix; writes `.csv`, `.txt` and `.json`.
    #[arg(long)]
    out: PathBuf,
    /// Model name in the report; defaults to the checkpoint file name.
    #[arg(long)]
    name: Option<String>,
    /// Score the training shard instead of the test shard.
    #[arg(long)]
    train_split: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline report (`.json` from `eval`).
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    candidate: PathBuf,
    /// Output prefix; writes `.csv` and `.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// `key = value` file with `step`, `tolerance` and `floor`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Negate one layer's gradient; the check must then fail.
    #[arg(long, hide = true)]
    inject_sign_bug: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn record_domain_dir(manifest: &mut RunManifest, dir: &Path) -> Result<()> {
    for name in [TRAIN_SHARD, TEST_SHARD, SCALER_FILE] {
        manifest.output(&dir.join(name))?;
    }
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<ExitCode> {
    let domain = a.domain.domain();
    let loaded = load_records(&a.input)?;
    if loaded.rejected > 0 {
        log::warn!("{} malformed rows skipped", loaded.rejected);
    }
    let test_fraction = a.test_fraction.unwrap_or(match domain {
        Domain::Source => CaseStudy::CrossCity.source_test_fraction(),
        Domain::Target => CaseStudy::CrossCity.target_test_fraction(),
    });
    let (split, scaler) = match (&a.scaler, domain) {
        (Some(path), _) => {
            let scaler = Scaler::load(path)?;
            let split = prepare_with_scaler(&loaded.records, domain, test_fraction, &scaler, a.max_agents, a.seed);
            (split, scaler)
        }
        (None, Domain::Source) => {
            let study = CaseStudy::Custom {
                source_test: test_fraction,
                target_test: CaseStudy::CrossCity.target_test_fraction(),
            };
            study.validate()?;
            let prepared = prepare_domains(&loaded.records, None, study, a.max_agents, a.seed)?;
            (prepared.source, prepared.scaler)
        }
        (None, Domain::Target) => bail!("the target domain is normalized with the source scaler; pass --scaler"),
    };
    write_domain_dir(&a.out, &split, &scaler)?;
    eprintln!(
        "{domain}: {} train / {} test samples ({} windows, {} without ego, {} out of range)",
        split.train.len(),
        split.test.len(),
        split.stats.windows,
        split.stats.ego_missing,
        split.stats.out_of_range
    );
    let max_agents = a.max_agents.to_string();
    let fraction = test_fraction.to_string();
    let mut manifest = RunManifest::new("prepare", a.seed).config([
        ("domain", domain.as_str()),
        ("max_agents", max_agents.as_str()),
        ("test_fraction", fraction.as_str()),
    ]);
    manifest.input(&a.input)?;
    if let Some(path) = &a.scaler {
        manifest.input(path)?;
    }
    record_domain_dir(&mut manifest, &a.out)?;
    manifest.write(&a.out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut kv = match &a.spec {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::default(),
    };
    for o in &a.overrides {
        kv.set_override(o)?;
    }
    let mut spec = SynthSpec::default();
    spec.apply_all(&kv)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let study = CaseStudy::parse(&a.case_study)?;
    let data = synth_generate(&spec, spec.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let source_csv = a.out.join("source.csv");
    let target_csv = a.out.join("target.csv");
    write_records(&source_csv, &data.source)?;
    write_records(&target_csv, &data.target)?;
    let prepared = prepare_domains(&data.source, Some(&data.target), study, a.max_agents, spec.seed)?;
    let source_dir = a.out.join("source");
    let target_dir = a.out.join("target");
    write_domain_dir(&source_dir, &prepared.source, &prepared.scaler)?;
    let target = prepared.target.as_ref().expect("target records were supplied");
    write_domain_dir(&target_dir, target, &prepared.scaler)?;
    for (name, split) in [("source", &prepared.source), ("target", target)] {
        eprintln!("{name}: {} train / {} test samples", split.train.len(), split.test.len());
    }

    let spec_kv = KvConfig::from_configurable(&[&spec]);
    let max_agents = a.max_agents.to_string();
    let study_name = study.to_string();
    let mut manifest = RunManifest::new("synth", spec.seed)
        .config(spec_kv.iter())
        .config([("max_agents", max_agents.as_str()), ("case_study", study_name.as_str())]);
    if let Some(path) = &a.spec {
        manifest.input(path)?;
    }
    manifest.output(&source_csv)?;
    manifest.output(&target_csv)?;
    record_domain_dir(&mut manifest, &source_dir)?;
    record_domain_dir(&mut manifest, &target_dir)?;
    manifest.write(&a.out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn load_split(dir: &Path, test: bool) -> Result<Vec<TrajectorySample>> {
    let path = dir.join(if test { TEST_SHARD } else { TRAIN_SHARD });
    read_shard(&path).with_context(|| format!("loading {}", path.display()))
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut kv = match &a.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::default(),
    };
    for o in &a.overrides {
        kv.set_override(o)?;
    }
    if let Some(dat) = a.dat {
        kv.insert("dat", if dat == Switch::On { "on" } else { "off" });
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            Trainer::resume(ckpt, &kv)?
        }
        None => Trainer::new(RunConfig::from_kv(&kv)?)?,
    };
    let dat = trainer.run.train.dat.enabled;
    if dat && a.target.is_none() {
        bail!("adversarial training needs target-domain data; pass --target DIR or use --dat off");
    }

    let source_scaler = Scaler::load(&a.source.join(SCALER_FILE))?;
    let source = load_split(&a.source, false)?;
    let target = match &a.target {
        Some(dir) => {
            if Scaler::load(&dir.join(SCALER_FILE))? != source_scaler {
                bail!("source and target directories were normalized with different scalers");
            }
            Some(load_split(dir, false)?)
        }
        None => None,
    };
    let output = TrainOutput {
        checkpoint: Some(a.out.clone()),
        metrics: Some(a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl"))),
    };
    let records = trainer.run(
        TrainData {
            source: &source,
            target: target.as_deref(),
        },
        &output,
    )?;
    if let Some(last) = records.last() {
        eprintln!("step {} mse {:.6}", last.step, last.mse);
    }

    let run_kv = trainer.run.to_kv_config();
    let mut manifest = RunManifest::new("train", trainer.run.train.seed).config(run_kv.iter());
    for dir in std::iter::once(&a.source).chain(a.target.as_ref()) {
        manifest.input(&dir.join(TRAIN_SHARD))?;
        manifest.input(&dir.join(SCALER_FILE))?;
    }
    if let Some(path) = &a.config {
        manifest.input(path)?;
    }
    if let Some(path) = &a.resume {
        manifest.config.insert("resumed_from".into(), path.display().to_string());
    }
    manifest.output(&a.out)?;
    if let Some(best) = output.best_checkpoint().filter(|p| p.exists()) {
        manifest.output(&best)?;
    }
    if let Some(metrics) = &output.metrics {
        manifest.output(metrics)?;
    }
    manifest.write(&with_suffix(&a.out, ".manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let config = ckpt.validate()?;
    let scaler = Scaler::load(&a.data.join(SCALER_FILE))?;
    let samples = load_split(&a.data, !a.train_split)?;
    let domain = a.domain.domain();
    if let Some(s) = samples.iter().find(|s| s.domain != domain) {
        bail!("{} holds {} samples but --domain is {domain}", a.data.display(), s.domain);
    }
    let name = a.name.clone().unwrap_or_else(|| {
        a.ckpt
            .file_name()
            .map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned())
    });
    let predictor = ModelPredictor {
        params: &ckpt.params,
        config: &config,
        chunk: EVAL_CHUNK,
    };
    let report = full_report(&predictor, &samples, &scaler, &name, domain.as_str())?;
    let csv = with_suffix(&a.out, ".csv");
    let txt = with_suffix(&a.out, ".txt");
    let json = with_suffix(&a.out, ".json");
    write_text(&csv, &report.to_csv())?;
    write_text(&txt, &report.to_table())?;
    write_text(&json, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_report(path: &Path) -> Result<HorizonReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))
}

fn compare(a: CompareArgs) -> Result<ExitCode> {
    let comparison = compare_reports(&load_report(&a.baseline)?, &load_report(&a.candidate)?)?;
    write_text(&with_suffix(&a.out, ".csv"), &comparison.to_csv())?;
    write_text(&with_suffix(&a.out, ".txt"), &comparison.to_table())?;
    print!("{}", comparison.to_table());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_config(path: Option<&Path>) -> Result<GradCheckConfig> {
    let mut cfg = GradCheckConfig::default();
    let Some(path) = path else { return Ok(cfg) };
    for (k, v) in KvConfig::load(path)?.iter() {
        let value: f64 = v.parse().with_context(|| format!("invalid value `{v}` for `{k}`"))?;
        match k {
            "step" => cfg.step = value,
            "tolerance" => cfg.tolerance = value,
            "floor" => cfg.floor = value,
            _ => bail!("unknown gradcheck key `{k}`"),
        }
    }
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0 && cfg.floor > 0.0) {
        bail!("gradcheck step, tolerance and floor must be positive");
    }
    Ok(cfg)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg = gradcheck_config(a.config.as_deref())?;
    if let Some(layer) = &a.inject_sign_bug {
        if !trajformer_core::gradcheck::LAYERS.contains(&layer.as_str()) {
            bail!("unknown layer `{layer}`");
        }
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let checks = check_all(&seeds, &cfg, a.inject_sign_bug.as_deref())?;
    let mut failed = Vec::new();
    println!("{:<14} {:>14} {:>8}  worst input", "layer", "max rel err", "result");
    for layer in trajformer_core::gradcheck::LAYERS {
        let mine: Vec<_> = checks.iter().filter(|c| c.layer == layer).collect();
        let worst = mine
            .iter()
            .max_by(|x, y| x.report.max_rel_error.total_cmp(&y.report.max_rel_error))
            .expect("one check per seed");
        let passed = mine.iter().all(|c| c.report.passed);
        println!(
            "{layer:<14} {:>14.3e} {:>8}  {} (seed {})",
            worst.report.max_rel_error,
            if passed { "pass" } else { "FAIL" },
            worst.worst_input.as_deref().unwrap_or("-"),
            worst.seed
        );
        if !passed {
            failed.push(layer);
        }
    }
    if failed.is_empty() {
        println!("all {} layers pass on {} seeds", trajformer_core::gradcheck::LAYERS.len(), seeds.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}
