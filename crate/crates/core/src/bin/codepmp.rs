use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use codepmp::checkpoint::{file_digest, load_checkpoint, save_checkpoint};
use codepmp::config::{self, apply_overrides, RunConfig, SynthConfig};
use codepmp::eval::{
    bon_accuracy, coverage, generate_bon_records, mc_accuracy, pairwise_accuracy, read_bon, write_bon, BonProblem,
    RewardModel,
};
use codepmp::model::ModelConfig;
use codepmp::pairgen::{build_dataset, read_pairs};
use codepmp::report::emit_report;
use codepmp::sweep::{run_sweep, write_results, SweepSpec};
use codepmp::train::{pmp_train, rm_finetune, TrainOutcome};
use codepmp::Error;

#[derive(Parser)]
#[command(name = "codepmp", version, about = "Pair synthesis, preference pretraining, reward finetuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, applied after the file is parsed.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; must not exist yet.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for generated output directory names.
    #[arg(long, env = "CODEPMP_OUT", default_value = "runs")]
    out_root: PathBuf,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a preference pair dataset.
    Synth(Common),
    /// Pretrain a reward model on preference pairs.
    PmpTrain {
        #[command(flatten)]
        common: Common,
        /// Pair JSONL file; overrides `dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finetune a reward model with the ranking loss.
    RmFinetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `random` or a checkpoint path; overrides `init`.
        #[arg(long)]
        init: Option<String>,
    },
    /// Score a checkpoint on pairs and Best-of-N pools.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pair JSONL file.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Best-of-N JSONL file.
        #[arg(long)]
        bon: Option<PathBuf>,
        /// Candidate counts for Best-of-N.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        /// Also report multiple-choice accuracy.
        #[arg(long)]
        mc: bool,
    },
    /// Run a sample-count or pair-count sweep.
    Sweep(Common),
    /// Aggregate sweep results into plot data and a summary.
    Report {
        /// Results files or directories holding `results.csv`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "CODEPMP_OUT", default_value = "runs")]
        out_root: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    checkpoint: PathBuf,
    #[serde(default)]
    pairs: Option<PathBuf>,
    #[serde(default)]
    bon: Option<PathBuf>,
    #[serde(default)]
    n: Vec<usize>,
    #[serde(default)]
    mc: bool,
    #[serde(default)]
    eoc: bool,
}

#[derive(Serialize)]
struct EvalReport {
    config: EvalConfig,
    checkpoint_digest: String,
    model: ModelConfig,
    step: u64,
    pairwise_accuracy: Option<f64>,
    bon_accuracy: BTreeMap<usize, f64>,
    coverage: BTreeMap<usize, f64>,
    mc_accuracy: Option<f64>,
}

/// Failures the library does not model.
enum CliError {
    Lib(Error),
    Collision(PathBuf),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Collision(_) => 5,
            CliError::Lib(e) => match e {
                Error::Config(_) | Error::Validation(_) => 3,
                Error::Input(_) | Error::Io { .. } => 4,
                Error::Training { .. } => 6,
                Error::Load(_) | Error::Capability(_) | Error::Json(_) => 7,
                Error::Aggregation { .. } => 8,
                Error::State(_) | Error::Generation(_) => 1,
            },
        }
    }

    fn record(&self) -> serde_json::Value {
        let (kind, files) = match self {
            CliError::Collision(p) => ("output_collision", vec![p.clone()]),
            CliError::Lib(e) => match e {
                Error::Config(_) => ("config", vec![]),
                Error::Validation(_) => ("validation", vec![]),
                Error::Input(_) => ("input", vec![]),
                Error::Io { path, .. } => ("io", vec![path.clone()]),
                Error::Training { .. } => ("training", vec![]),
                Error::Load(_) => ("load", vec![]),
                Error::Capability(_) => ("capability", vec![]),
                Error::Json(_) => ("json", vec![]),
                Error::Aggregation { files, .. } => ("aggregation", files.clone()),
                Error::State(_) => ("state", vec![]),
                Error::Generation(_) => ("generation", vec![]),
            },
        };
        let message = match self {
            CliError::Collision(p) => format!("output directory {} already exists", p.display()),
            CliError::Lib(e) => e.to_string(),
        };
        serde_json::json!({ "error": kind, "code": self.code(), "message": message, "files": files })
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn emit_error(record: &serde_json::Value) {
    eprintln!("{record}");
}

/// File contents (or a preset) as a table, then flag values, then `--set`.
fn resolve<T: serde::de::DeserializeOwned + Serialize>(
    common: &Common,
    preset: Option<T>,
    flags: &[(&str, toml::Value)],
) -> CliResult<T> {
    let mut table = match (&common.config, preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(p)) => toml::Table::try_from(&p).map_err(|e| Error::Config(e.to_string()))?,
        (None, None) => toml::Table::new(),
    };
    for (k, v) in flags {
        table.insert(k.to_string(), v.clone());
    }
    apply_overrides(&mut table, &common.set)?;
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    Ok(config::parse_with_overrides(&text, &[])?)
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

/// Final output directory: `--out`, or `<root>/<verb>-<digest of config>`.
fn out_dir(out: &Option<PathBuf>, root: &Path, verb: &str, resolved: &str) -> CliResult<PathBuf> {
    let dir = match out {
        Some(p) => p.clone(),
        None => {
            let digest = hex::encode(Sha256::digest(resolved.as_bytes()));
            root.join(format!("{verb}-{}", &digest[..12]))
        }
    };
    if dir.exists() {
        return Err(CliError::Collision(dir));
    }
    Ok(dir)
}

/// Runs `work` in a sibling staging directory and moves it into place only
/// on success, so failed runs leave nothing behind.
fn staged(dir: &Path, work: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::Io {
        path: parent.to_path_buf(),
        source: e,
    })?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stage = parent.join(format!(".{name}.partial-{}", std::process::id()));
    std::fs::create_dir(&stage).map_err(|e| Error::Io {
        path: stage.clone(),
        source: e,
    })?;
    let result = work(&stage).and_then(|()| {
        if dir.exists() {
            return Err(CliError::Collision(dir.to_path_buf()));
        }
        std::fs::rename(&stage, dir).map_err(|e| {
            CliError::Lib(Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        })
    });
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&stage);
    }
    result
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write(path, &(text + "\n"))
}

fn toml_text<T: Serialize>(value: &T) -> CliResult<String> {
    Ok(config::to_toml(value)?)
}

fn synth(common: &Common) -> CliResult<PathBuf> {
    let cfg: SynthConfig = resolve(common, None, &[])?;
    let opts = cfg.build_options();
    if opts.n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()).into());
    }
    let text = toml_text(&cfg)?;
    let dir = out_dir(&common.out, &common.out_root, "synth", &text)?;
    staged(&dir, |stage| {
        write(&stage.join("config.toml"), &text)?;
        build_dataset(&opts, &stage.join("pairs.jsonl"))?;
        if let Some(b) = &cfg.bon {
            let records = generate_bon_records(cfg.family, b.problems, b.n, b.p_correct, b.seed)?;
            write_bon(&stage.join("bon.jsonl"), &records)?;
        }
        Ok(())
    })?;
    Ok(dir)
}

fn write_train(stage: &Path, outcome: &TrainOutcome, text: &str) -> CliResult<()> {
    write(&stage.join("config.toml"), text)?;
    save_checkpoint(&outcome.state, Some(&outcome.optimizer), &stage.join("model.ckpt"))?;
    let mut report = outcome.report.clone();
    report.checkpoint = Some("model.ckpt".into());
    write_json(&stage.join("report.json"), &report)?;
    write_json(
        &stage.join("timing.json"),
        &serde_json::json!({ "wall_clock_secs": report.wall_clock_secs }),
    )
}

fn dataset_of(cfg: &RunConfig) -> CliResult<Vec<codepmp::pairgen::PairRecord>> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Input("no dataset given (set `dataset` or pass --data)".into()))?;
    Ok(read_pairs(path)?)
}

fn train(common: &Common, verb: &str, preset: RunConfig, flags: &[(&str, toml::Value)]) -> CliResult<PathBuf> {
    let cfg: RunConfig = resolve(common, Some(preset), flags)?;
    cfg.validate()?;
    let text = toml_text(&cfg)?;
    let pairs = dataset_of(&cfg)?;
    if let codepmp::config::Init::Checkpoint(p) = &cfg.init {
        if !p.exists() {
            return Err(Error::Io {
                path: p.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            }
            .into());
        }
    }
    let dir = out_dir(&common.out, &common.out_root, verb, &text)?;
    let outcome = if verb == "pmp-train" {
        pmp_train(&cfg, &pairs)?
    } else {
        rm_finetune(&cfg, &pairs)?
    };
    staged(&dir, |stage| write_train(stage, &outcome, &text))?;
    Ok(dir)
}

fn eval(common: &Common, flags: &[(&str, toml::Value)]) -> CliResult<PathBuf> {
    let cfg: EvalConfig = resolve(common, None, flags)?;
    if cfg.pairs.is_none() && cfg.bon.is_none() {
        return Err(Error::Config("nothing to evaluate: give pairs and/or bon".into()).into());
    }
    if cfg.bon.is_none() && (!cfg.n.is_empty() || cfg.mc) {
        return Err(Error::Config("n and mc need a bon file".into()).into());
    }
    let text = toml_text(&cfg)?;
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    let rm = RewardModel::new(&ckpt.state)?;
    let pairwise = match &cfg.pairs {
        Some(p) => {
            let enc: Vec<_> = read_pairs(p)?.iter().map(|r| r.encode()).collect();
            Some(pairwise_accuracy(&rm, &enc)?)
        }
        None => None,
    };
    let mut bon_acc = BTreeMap::new();
    let mut cov = BTreeMap::new();
    let mut mc = None;
    if let Some(path) = &cfg.bon {
        let problems = read_bon(path)?
            .iter()
            .map(|r| BonProblem::from_record(r, cfg.eoc))
            .collect::<codepmp::Result<Vec<_>>>()?;
        let ns = if cfg.n.is_empty() {
            vec![problems.iter().map(BonProblem::n).min().unwrap_or(0)]
        } else {
            cfg.n.clone()
        };
        for n in ns {
            bon_acc.insert(n, bon_accuracy(&rm, &problems, n)?);
            cov.insert(n, coverage(&problems, n)?);
        }
        if cfg.mc {
            mc = Some(mc_accuracy(&rm, &problems)?);
        }
    }
    let report = EvalReport {
        checkpoint_digest: file_digest(&cfg.checkpoint)?,
        model: ckpt.state.config.clone(),
        step: ckpt.state.step,
        config: cfg,
        pairwise_accuracy: pairwise,
        bon_accuracy: bon_acc,
        coverage: cov,
        mc_accuracy: mc,
    };
    let dir = out_dir(&common.out, &common.out_root, "eval", &text)?;
    staged(&dir, |stage| {
        write(&stage.join("config.toml"), &text)?;
        write_json(&stage.join("eval.json"), &report)
    })?;
    Ok(dir)
}

fn sweep(common: &Common) -> CliResult<PathBuf> {
    if common.config.is_none() {
        return Err(Error::Config("sweep needs --config".into()).into());
    }
    let spec: SweepSpec = resolve(common, None, &[])?;
    spec.validate()?;
    let text = toml_text(&spec)?;
    let dir = out_dir(&common.out, &common.out_root, "sweep", &text)?;
    staged(&dir, |stage| {
        write(&stage.join("config.toml"), &text)?;
        let out = run_sweep(&spec, Some(stage))?;
        write_results(&stage.join("results.csv"), &out.rows)?;
        write_json(&stage.join("points.json"), &out.points)?;
        write_json(
            &stage.join("timing.json"),
            &serde_json::json!({ "wall_clock_secs": out.wall_clock_secs }),
        )
    })?;
    Ok(dir)
}

fn report(inputs: &[PathBuf], out: &Option<PathBuf>, root: &Path) -> CliResult<PathBuf> {
    let key: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    let dir = out_dir(out, root, "report", &key.join("\n"))?;
    codepmp::report::collect_inputs(inputs)?;
    staged(&dir, |stage| {
        emit_report(inputs, stage)?;
        Ok(())
    })?;
    Ok(dir)
}

fn run(verb: Verb) -> CliResult<PathBuf> {
    match verb {
        Verb::Synth(c) => synth(&c),
        Verb::PmpTrain { common, data } => {
            let flags: Vec<_> = data.iter().map(|d| ("dataset", path_value(d))).collect();
            train(&common, "pmp-train", RunConfig::desk_pmp(), &flags)
        }
        Verb::RmFinetune { common, data, init } => {
            let mut flags: Vec<_> = data.iter().map(|d| ("dataset", path_value(d))).collect();
            flags.extend(init.map(|i| ("init", toml::Value::String(i))));
            train(&common, "rm-finetune", RunConfig::desk_rm(), &flags)
        }
        Verb::Eval {
            common,
            checkpoint,
            pairs,
            bon,
            n,
            mc,
        } => {
            let mut flags = Vec::new();
            flags.extend(checkpoint.map(|p| ("checkpoint", path_value(&p))));
            flags.extend(pairs.map(|p| ("pairs", path_value(&p))));
            flags.extend(bon.map(|p| ("bon", path_value(&p))));
            if !n.is_empty() {
                let list = n.iter().map(|&k| toml::Value::Integer(k as i64)).collect();
                flags.push(("n", toml::Value::Array(list)));
            }
            if mc {
                flags.push(("mc", toml::Value::Boolean(true)));
            }
            eval(&common, &flags)
        }
        Verb::Sweep(c) => sweep(&c),
        Verb::Report { inputs, out, out_root } => report(&inputs, &out, &out_root),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            emit_error(&serde_json::json!({
                "error": "usage",
                "code": 2,
                "message": e.render().to_string().trim(),
                "files": [],
            }));
            return ExitCode::from(2);
        }
    };
    match run(cli.verb) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit_error(&e.record());
            ExitCode::from(e.code())
        }
    }
}
