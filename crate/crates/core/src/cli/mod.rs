//! `emmil` command line: generate, train, infer, eval, ablate.
//!
//! Every command writes its outputs plus a `manifest.json` into `--out`.
//! Configuration comes from an optional TOML file (see [`RunConfig`]); flags
//! override individual fields.

pub mod pipeline;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::io::hex;
use crate::data::{dataset_fingerprint, generate, load_features, save_dataset, SynthSpec, SEPARABLE_DEFAULT};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, format_report, table_alphas};
use crate::inference::{infer, read_proposals, write_proposals, TrainedModel};
use crate::training::TrainMode;

pub use pipeline::{
    format_ablation, mean_sd, run_ablation, run_experiment, train_model, AblationRow, ModelKind, RunConfig,
    RunOutcome, Trained,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const PROPOSALS_FILE: &str = "proposals.tsv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const ABLATION_TEXT_FILE: &str = "ablation.txt";
pub const ABLATION_JSON_FILE: &str = "ablation.json";

/// Environment variable read for log verbosity (`error` .. `trace`).
pub const LOG_ENV: &str = "EMMIL_LOG";

#[derive(Debug, Parser)]
#[command(name = "emmil", version, about = "EM multiple-instance learning for temporal localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Produce temporal proposals for every bag of a dataset.
    Infer(InferArgs),
    /// Score a proposal file against a dataset's ground truth.
    Eval(EvalArgs),
    /// Compare the full model against the joint and attention variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Built-in generator settings.
    #[arg(long, conflicts_with = "spec", default_value = SEPARABLE_DEFAULT)]
    pub preset: String,
    /// TOML file with a full generator spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the bag seed (and, for presets, the concept seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// `test` draws fresh bags around the same concepts.
    #[arg(long, value_enum, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Alternating,
    Joint,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Alternating => TrainMode::Alternating,
            ModeArg::Joint => TrainMode::Joint,
        }
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// A model file or a training output directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A proposal file or an inference output directory.
    #[arg(long)]
    pub proposals: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated tIoU thresholds; defaults to 0.1,0.2,...,0.7.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation dataset; the training dataset when absent.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
}

/// Record of one command invocation. Contains no timestamps or host data so
/// identical inputs give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Content hashes of the inputs, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// Output paths, keyed by role.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: serde_json::to_value(config).map_err(|e| Error::Internal(e.to_string()))?,
            seed,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    fn artifact(&mut self, role: &str, path: &Path) {
        self.artifacts.insert(role.into(), path.display().to_string());
    }

    fn write(&self, out: &Path) -> Result<()> {
        write_json(&out.join(MANIFEST_FILE), self)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist or is not a directory", path.display())))
    }
}

/// Reads a [`RunConfig`] from TOML, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<String> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut spec: SynthSpec = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            spec
        }
        None => SynthSpec::preset(&args.preset, args.seed.unwrap_or(0))?,
    };
    if args.split == Split::Test {
        spec = spec.test_split();
    }
    let data = generate(&spec)?;
    create_out(&args.out)?;
    save_dataset(&args.out, &data)?;

    let mut manifest = RunManifest::new("generate", &spec, Some(spec.seed))?;
    manifest.inputs.insert("dataset".into(), dataset_fingerprint(&args.out)?);
    manifest.artifact("dataset", &args.out);
    manifest.write(&args.out)?;

    let clips: usize = data.bags().iter().map(|b| b.len()).sum();
    let segments: usize = data.bags().iter().filter_map(|b| b.segments.as_ref()).map(Vec::len).sum();
    Ok(format!(
        "wrote {} bags ({} positive, {} negative), {} clips, {} segments, {} classes, d={} to {}\n",
        data.len(),
        data.positive_count(),
        data.len() - data.positive_count(),
        clips,
        segments,
        data.num_classes(),
        data.feature_dim(),
        args.out.display()
    ))
}

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    require_dir(&args.data, "dataset")?;
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = args.model {
        cfg.model = m;
    }
    if let Some(m) = args.mode {
        cfg.train.mode = m.into();
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(g) = args.gamma {
        cfg.train.gamma = g;
    }
    cfg.validate()?;

    let data = load_features(&args.data)?;
    let trained = train_model(cfg.model, &cfg.train, &data)?;
    create_out(&args.out)?;
    let model_path = args.out.join(MODEL_FILE);
    trained.model.save(&model_path)?;
    let log_path = args.out.join(TRAIN_LOG_FILE);
    let mut log = trained.log_lines.join("\n");
    log.push('\n');
    write_text(&log_path, &log)?;

    let mut manifest = RunManifest::new("train", &cfg, Some(cfg.train.seed))?;
    manifest.inputs.insert("dataset".into(), dataset_fingerprint(&args.data)?);
    manifest.artifact("model", &model_path);
    manifest.artifact("train_log", &log_path);
    manifest.write(&args.out)?;
    Ok(format!(
        "trained {} ({:?}) for {} epochs; model at {}\n",
        cfg.model.as_str(),
        cfg.train.mode,
        cfg.train.epochs,
        model_path.display()
    ))
}

fn resolve_file(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

pub fn cmd_infer(args: &InferArgs) -> Result<String> {
    require_dir(&args.data, "dataset")?;
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(l) = args.lambda {
        cfg.infer.lambda = l;
    }
    if let Some(g) = args.gamma {
        cfg.infer.gamma = Some(g);
    }
    cfg.validate()?;

    let model_path = resolve_file(&args.model, MODEL_FILE);
    let model = TrainedModel::load(&model_path)?;
    let data = load_features(&args.data)?;
    let detections = infer(&model, &data, &cfg.infer, cfg.train.gamma)?;
    create_out(&args.out)?;
    let prop_path = args.out.join(PROPOSALS_FILE);
    write_proposals(&prop_path, &detections)?;

    let mut manifest = RunManifest::new("infer", &cfg.infer, None)?;
    manifest.inputs.insert("dataset".into(), dataset_fingerprint(&args.data)?);
    manifest.inputs.insert("model".into(), file_sha256(&model_path)?);
    manifest.artifact("proposals", &prop_path);
    manifest.write(&args.out)?;
    Ok(format!("{} proposals written to {}\n", detections.len(), prop_path.display()))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    require_dir(&args.data, "dataset")?;
    let alphas = args.alphas.clone().unwrap_or_else(table_alphas);
    if alphas.is_empty() {
        return Err(Error::Config("--alphas must list at least one threshold".into()));
    }
    let prop_path = resolve_file(&args.proposals, PROPOSALS_FILE);
    let detections = read_proposals(&prop_path)?;
    let data = load_features(&args.data)?;
    let report = evaluate(&detections, &data, &alphas)?;
    let text = format_report(&report);
    create_out(&args.out)?;
    let text_path = args.out.join(REPORT_TEXT_FILE);
    let json_path = args.out.join(REPORT_JSON_FILE);
    write_text(&text_path, &text)?;
    write_json(&json_path, &report)?;

    let mut manifest = RunManifest::new("eval", &alphas, None)?;
    manifest.inputs.insert("dataset".into(), dataset_fingerprint(&args.data)?);
    manifest.inputs.insert("proposals".into(), file_sha256(&prop_path)?);
    manifest.artifact("report_text", &text_path);
    manifest.artifact("report_json", &json_path);
    manifest.write(&args.out)?;
    Ok(text)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<String> {
    require_dir(&args.data, "dataset")?;
    if let Some(t) = &args.test_data {
        require_dir(t, "test dataset")?;
    }
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let cfg = load_config(args.config.as_deref())?;
    let train_data = load_features(&args.data)?;
    let eval_data = match &args.test_data {
        Some(t) => load_features(t)?,
        None => train_data.clone(),
    };
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.base_seed.wrapping_add(i)).collect();
    let rows = run_ablation(&cfg, &train_data, &eval_data, &seeds)?;
    let text = format_ablation(&rows);
    create_out(&args.out)?;
    let text_path = args.out.join(ABLATION_TEXT_FILE);
    let json_path = args.out.join(ABLATION_JSON_FILE);
    write_text(&text_path, &text)?;
    write_json(&json_path, &rows)?;

    let mut manifest = RunManifest::new("ablate", &cfg, Some(args.base_seed))?;
    manifest.inputs.insert("dataset".into(), dataset_fingerprint(&args.data)?);
    if let Some(t) = &args.test_data {
        manifest.inputs.insert("test_dataset".into(), dataset_fingerprint(t)?);
    }
    manifest.artifact("ablation_text", &text_path);
    manifest.artifact("ablation_json", &json_path);
    manifest.write(&args.out)?;
    Ok(text)
}

/// Runs one parsed command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn train_flags_parse() {
        let cli = Cli::try_parse_from([
            "emmil", "train", "--data", "d", "--out", "o", "--model", "attention", "--mode", "joint",
        ])
        .unwrap();
        match cli.command {
            Command::Train(a) => {
                assert_eq!(a.model, Some(ModelKind::Attention));
                assert_eq!(a.mode, Some(ModeArg::Joint));
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn alphas_are_comma_separated() {
        let cli = Cli::try_parse_from(["emmil", "eval", "--proposals", "p", "--data", "d", "--out", "o", "--alphas", "0.3,0.5"])
            .unwrap();
        match cli.command {
            Command::Eval(a) => assert_eq!(a.alphas, Some(vec![0.3, 0.5])),
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(main_with_args(["emmil", "train"]), 1);
        assert_eq!(main_with_args(["emmil", "--version"]), 0);
    }

    #[test]
    fn invalid_spec_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::separable_default(0);
        spec.sigma_pos = -1.0;
        let path = dir.path().join("spec.toml");
        fs::write(&path, toml::to_string(&spec).unwrap()).unwrap();
        let err = cmd_generate(&GenerateArgs {
            preset: SEPARABLE_DEFAULT.into(),
            spec: Some(path),
            seed: None,
            split: Split::Train,
            out: dir.path().join("out"),
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("sigma_pos"), "{err}");
    }
}
