//! Preset experiments: a shared MLE base followed by further-training arms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, Corpus, CorpusConfig, CorpusMode};
use crate::error::{Error, Result};
use crate::model::{init, ModelConfig, Parameters};
use crate::objectives::{FirstToken, Objective};
use crate::trainer::{evaluate, two_stage_base, train, RunMetrics, Split, TrainConfig, TrainOutcome};

pub const LAMBDA_GRID: [f64; 6] = [1.0, 0.5, 0.1, 0.05, 0.01, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    SubsettingCompare,
    Absorption,
    LambdaSweep,
    IcrAblation,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [
        Self::SubsettingCompare,
        Self::Absorption,
        Self::LambdaSweep,
        Self::IcrAblation,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SubsettingCompare => "subsetting_compare",
            Self::Absorption => "absorption",
            Self::LambdaSweep => "lambda_sweep",
            Self::IcrAblation => "icr_ablation",
        }
    }
}

/// Model shape; vocabulary and feature sizes come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(1, 1);
        Self {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            max_len: c.max_len,
            seed: c.seed,
        }
    }
}

impl ModelShape {
    pub fn config(&self, corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
            vocab_size: corpus.vocab.len(),
            n_features: corpus.inventory.len(),
            seed: self.seed,
        }
    }
}

/// Everything needed to build the shared base checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSettings {
    pub corpus: CorpusConfig,
    pub model: ModelShape,
    pub val_fraction: f64,
    /// Stage-one MLE config; early stopping is always on.
    pub train: TrainConfig,
}

/// Further-training arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetSettings {
    pub preset: PresetName,
    /// One base per corpus; most presets have one, absorption has two.
    pub bases: Vec<BaseSettings>,
    pub arms: Vec<ArmSpec>,
}

/// Corpus, split and converged MLE checkpoint shared by several arms.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub settings: BaseSettings,
    pub corpus: Corpus,
    pub split: Split,
    pub base: TrainOutcome,
    /// Validation metrics of the base checkpoint, recorded as epoch 0.
    pub baseline: RunMetrics,
}

pub fn prepare(settings: &BaseSettings) -> Result<Prepared> {
    let corpus = generate_corpus(&settings.corpus)?;
    let split = Split::new(&corpus, settings.val_fraction)?;
    let params = init(&settings.model.config(&corpus))?;
    let base = two_stage_base(params, &split, &settings.train)?;
    let (val_loss, report) = evaluate(&base.best, &split, &settings.train.decode)?;
    let baseline = RunMetrics::from_report(0, "mle", f64::NAN, val_loss, &report);
    Ok(Prepared {
        settings: settings.clone(),
        corpus,
        split,
        base,
        baseline,
    })
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub name: String,
    pub corpus_mode: CorpusMode,
    pub config: TrainConfig,
    pub outcome: TrainOutcome,
}

impl ArmResult {
    pub fn last(&self) -> &RunMetrics {
        self.outcome.history.last().expect("at least one epoch")
    }

    pub fn best(&self) -> &RunMetrics {
        &self.outcome.history[self.outcome.best_epoch - 1]
    }
}

pub fn run_arm(prepared: &Prepared, arm: &ArmSpec) -> Result<ArmResult> {
    let outcome = train(prepared.base.best.clone(), &prepared.split, &arm.train)?;
    Ok(ArmResult {
        name: arm.name.clone(),
        corpus_mode: prepared.settings.corpus.mode,
        config: arm.train.clone(),
        outcome,
    })
}

#[derive(Clone, Debug)]
pub struct PresetResult {
    pub settings: PresetSettings,
    pub prepared: Vec<Prepared>,
    pub arms: Vec<ArmResult>,
}

/// Default stage-one config shared by every preset.
pub fn base_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        objective: Objective::Mle,
        epochs: 30,
        seed,
        checkpoint_metric: crate::trainer::CheckpointMetric::ValLoss,
        early_stop: Some(Default::default()),
        ..TrainConfig::default()
    }
}

/// Default further-training config for one objective.
pub fn further_config(objective: Objective, first_token: FirstToken, seed: u64) -> TrainConfig {
    TrainConfig {
        objective,
        first_token,
        epochs: 3,
        seed: seed.wrapping_add(1),
        ..TrainConfig::default()
    }
}

pub fn base_settings(mode: CorpusMode, seed: u64, n_scenes: usize) -> BaseSettings {
    BaseSettings {
        corpus: CorpusConfig::new(mode, seed, n_scenes),
        model: ModelShape {
            seed,
            ..ModelShape::default()
        },
        val_fraction: 0.1,
        train: base_train_config(seed),
    }
}

pub const DEFAULT_SCENES: usize = 4000;

pub fn preset_settings(preset: PresetName, seed: u64) -> PresetSettings {
    let arm = |name: &str, objective, first_token| ArmSpec {
        name: name.to_string(),
        train: further_config(objective, first_token, seed),
    };
    let ft = FirstToken::default();
    let full = || vec![base_settings(CorpusMode::Full, seed, DEFAULT_SCENES)];
    match preset {
        PresetName::SubsettingCompare => PresetSettings {
            preset,
            bases: full(),
            arms: vec![
                arm("smile", Objective::Smile, ft),
                arm("reverse", Objective::Reverse, ft),
                arm("random", Objective::Random { k: 10 }, ft),
                arm("mle", Objective::Mle, ft),
            ],
        },
        PresetName::Absorption => PresetSettings {
            preset,
            bases: vec![
                base_settings(CorpusMode::Simplest, seed, DEFAULT_SCENES),
                base_settings(CorpusMode::Simpler, seed, DEFAULT_SCENES),
            ],
            arms: vec![arm("smile", Objective::Smile, ft)],
        },
        PresetName::LambdaSweep => PresetSettings {
            preset,
            bases: full(),
            arms: LAMBDA_GRID
                .iter()
                .map(|&lambda| arm(&format!("lambda={lambda}"), Objective::Mixed { lambda }, ft))
                .collect(),
        },
        PresetName::IcrAblation => PresetSettings {
            preset,
            bases: full(),
            arms: vec![
                arm("none", Objective::Smile, FirstToken::None),
                arm("first_token_mle", Objective::Smile, FirstToken::Mle),
                arm("first_token_shift", Objective::Smile, FirstToken::Shift),
            ],
        },
    }
}

/// Runs every arm against every base.
pub fn run_preset(settings: &PresetSettings) -> Result<PresetResult> {
    let prepared: Vec<Prepared> = settings.bases.iter().map(prepare).collect::<Result<_>>()?;
    let mut arms = Vec::new();
    for p in &prepared {
        for a in &settings.arms {
            arms.push(run_arm(p, a)?);
        }
    }
    Ok(PresetResult {
        settings: settings.clone(),
        prepared,
        arms,
    })
}

/// Final-epoch metrics of one arm, plus its best epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub preset: String,
    pub corpus_mode: String,
    pub arm: String,
    pub objective: String,
    pub first_token: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub baseline_length: f64,
    pub baseline_r_at_1: f64,
    pub mean_caption_length: f64,
    pub lexical_diversity: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub oracle_precision: f64,
    pub ppl_proxy: f64,
    pub best_r_at_1: f64,
}

/// One epoch of one arm; stage-one epochs use arm `base` and the selected
/// base checkpoint appears as arm `baseline`, epoch 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub preset: String,
    pub corpus_mode: String,
    pub arm: String,
    pub epoch: usize,
    pub objective: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mean_caption_length: f64,
    pub lexical_diversity: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub oracle_precision: f64,
    pub ppl_proxy: f64,
}

impl HistoryRow {
    fn new(preset: &str, corpus_mode: &str, arm: &str, m: &RunMetrics) -> Self {
        Self {
            preset: preset.to_string(),
            corpus_mode: corpus_mode.to_string(),
            arm: arm.to_string(),
            epoch: m.epoch,
            objective: m.objective.clone(),
            train_loss: m.train_loss,
            val_loss: m.val_loss,
            mean_caption_length: m.mean_caption_length,
            lexical_diversity: m.lexical_diversity,
            r_at_1: m.r_at_1,
            r_at_5: m.r_at_5,
            oracle_precision: m.oracle_precision,
            ppl_proxy: m.ppl_proxy,
        }
    }
}

fn mode_str(m: CorpusMode) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn first_token_str(f: FirstToken) -> String {
    serde_json::to_value(f)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl PresetResult {
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.arms
            .iter()
            .map(|a| {
                let base = self
                    .prepared
                    .iter()
                    .find(|p| p.settings.corpus.mode == a.corpus_mode)
                    .expect("arm belongs to a base");
                let last = a.last();
                SummaryRow {
                    preset: self.settings.preset.as_str().to_string(),
                    corpus_mode: mode_str(a.corpus_mode),
                    arm: a.name.clone(),
                    objective: a.config.objective.name(),
                    first_token: first_token_str(a.config.first_token),
                    epochs: a.outcome.history.len(),
                    best_epoch: a.outcome.best_epoch,
                    baseline_length: base.baseline.mean_caption_length,
                    baseline_r_at_1: base.baseline.r_at_1,
                    mean_caption_length: last.mean_caption_length,
                    lexical_diversity: last.lexical_diversity,
                    r_at_1: last.r_at_1,
                    r_at_5: last.r_at_5,
                    oracle_precision: last.oracle_precision,
                    ppl_proxy: last.ppl_proxy,
                    best_r_at_1: a.best().r_at_1,
                }
            })
            .collect()
    }

    pub fn history(&self) -> Vec<HistoryRow> {
        let preset = self.settings.preset.as_str().to_string();
        let mut rows = Vec::new();
        for p in &self.prepared {
            let mode = mode_str(p.settings.corpus.mode);
            for m in p.base.history.iter().chain([&p.baseline]) {
                let arm = if m.epoch == 0 { "baseline" } else { "base" };
                rows.push(HistoryRow::new(&preset, &mode, arm, m));
            }
        }
        for a in &self.arms {
            for m in &a.outcome.history {
                rows.push(HistoryRow::new(&preset, &mode_str(a.corpus_mode), &a.name, m));
            }
        }
        rows
    }

    /// Writes `summary.csv` and `history.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_rows(&dir.join("summary.csv"), &self.summary())?;
        write_rows(&dir.join("history.csv"), &self.history())
    }

    pub fn base_params(&self) -> Vec<&Parameters> {
        self.prepared.iter().map(|p| &p.base.best).collect()
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(true)
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in PresetName::ALL {
            assert_eq!(PresetName::parse(p.as_str()).unwrap(), p);
        }
        assert!(PresetName::parse("nope").is_err());
    }

    #[test]
    fn lambda_sweep_covers_the_grid() {
        let s = preset_settings(PresetName::LambdaSweep, 0);
        let lambdas: Vec<f64> = s
            .arms
            .iter()
            .map(|a| match a.train.objective {
                Objective::Mixed { lambda } => lambda,
                _ => panic!("not a mixed arm"),
            })
            .collect();
        assert_eq!(lambdas, LAMBDA_GRID);
    }

    #[test]
    fn tiny_preset_writes_one_summary_row_per_arm() {
        let mut s = preset_settings(PresetName::LambdaSweep, 5);
        for b in &mut s.bases {
            b.corpus.n_scenes = 30;
            b.model.d_model = 8;
            b.model.n_heads = 2;
            b.model.n_layers = 1;
            b.train.epochs = 1;
        }
        for a in &mut s.arms {
            a.train.epochs = 1;
        }
        let r = run_preset(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_csvs(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + LAMBDA_GRID.len());
    }
}
