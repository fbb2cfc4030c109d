//! Train / infer / evaluate building blocks shared by the commands.

use serde::{Deserialize, Serialize};

use crate::attention::train_attention;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::inference::{infer, Detection, InferConfig, TrainedModel};
use crate::mil::Dataset;
use crate::training::{train, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Emmil,
    Attention,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Emmil => "emmil",
            ModelKind::Attention => "attention",
        }
    }
}

/// Everything a run needs besides its inputs; readable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Emmil,
            train: TrainConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.infer.lambda) {
            return Err(Error::Config(format!(
                "infer.lambda must lie in [0, 1], got {}",
                self.infer.lambda
            )));
        }
        if let Some(g) = self.infer.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("infer.gamma must be >= 0, got {g}")));
            }
        }
        Ok(())
    }
}

pub struct Trained {
    pub model: TrainedModel,
    /// One JSON object per epoch.
    pub log_lines: Vec<String>,
}

fn json_lines<T: Serialize>(records: &[T]) -> Result<Vec<String>> {
    records
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string())))
        .collect()
}

pub fn train_model(kind: ModelKind, config: &TrainConfig, data: &Dataset) -> Result<Trained> {
    match kind {
        ModelKind::Emmil => {
            let state = train(config, data)?;
            Ok(Trained {
                log_lines: json_lines(&state.history)?,
                model: TrainedModel::Emmil(state.model),
            })
        }
        ModelKind::Attention => {
            let state = train_attention(config, data)?;
            Ok(Trained {
                log_lines: json_lines(&state.history)?,
                model: TrainedModel::Attention(state.model),
            })
        }
    }
}

/// Outcome of one train-infer-evaluate run.
pub struct RunOutcome {
    pub model: TrainedModel,
    pub detections: Vec<Detection>,
    pub report: EvalReport,
}

/// Trains on `train_data`, localizes on `eval_data` and scores at `alphas`.
pub fn run_experiment(
    kind: ModelKind,
    config: &RunConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    alphas: &[f64],
) -> Result<RunOutcome> {
    let trained = train_model(kind, &config.train, train_data)?;
    let detections = infer(&trained.model, eval_data, &config.infer, config.train.gamma)?;
    let report = evaluate(&detections, eval_data, alphas)?;
    Ok(RunOutcome {
        model: trained.model,
        detections,
        report,
    })
}

/// The three ablation rows: label, model family, training mode.
pub const ABLATION_ROWS: [(&str, ModelKind, TrainMode); 3] = [
    ("Alternating model", ModelKind::Attention, TrainMode::Alternating),
    ("Pseudo labeling model", ModelKind::Emmil, TrainMode::Joint),
    ("Full Model", ModelKind::Emmil, TrainMode::Alternating),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub model: ModelKind,
    pub mode: TrainMode,
    pub seeds: Vec<u64>,
    pub map_at_05: Vec<f64>,
    pub instance_f1: Vec<f64>,
}

impl AblationRow {
    pub fn mean_map(&self) -> f64 {
        mean_sd(&self.map_at_05).0
    }

    pub fn mean_f1(&self) -> f64 {
        mean_sd(&self.instance_f1).0
    }
}

/// Mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn run_ablation(
    config: &RunConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, kind, mode) in ABLATION_ROWS {
        let mut row = AblationRow {
            name: name.to_string(),
            model: kind,
            mode,
            seeds: seeds.to_vec(),
            map_at_05: Vec::new(),
            instance_f1: Vec::new(),
        };
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.train.seed = seed;
            cfg.train.mode = mode;
            let out = run_experiment(kind, &cfg, train_data, eval_data, &[0.5])?;
            row.map_at_05.push(out.report.map[0]);
            row.instance_f1.push(out.report.instance.map_or(0.0, |m| m.f1));
        }
        ::log::info!("{name}: mAP@0.5 {:.4} F1 {:.4}", row.mean_map(), row.mean_f1());
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let seeds = rows.first().map_or(0, |r| r.seeds.len());
    writeln!(s, "# ablation over {seeds} seeds (mean ± sd)").unwrap();
    writeln!(
        s,
        "{:<24}{:<12}{:<14}{:>20}{:>20}",
        "model", "family", "training", "mAP@0.5 (%)", "instance F1"
    )
    .unwrap();
    for r in rows {
        let (m, msd) = mean_sd(&r.map_at_05);
        let (f, fsd) = mean_sd(&r.instance_f1);
        let mode = match r.mode {
            TrainMode::Alternating => "alternating",
            TrainMode::Joint => "joint",
        };
        writeln!(
            s,
            "{:<24}{:<12}{:<14}{:>20}{:>20}",
            r.name,
            r.model.as_str(),
            mode,
            format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * msd),
            format!("{:.4} ± {:.4}", f, fsd)
        )
        .unwrap();
    }
    s
}
