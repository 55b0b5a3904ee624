//! Experiment runners: forward-pass expectation curves, and the
//! classification benchmark with a random search over drop rates.
//!
//! Every run draws its seeds from `derive_seed(master, path)` with a path
//! that names the run (experiment, setting, repeat or evaluation, stream),
//! so runs are independent of scheduling and can execute in parallel.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::data::{load_csv, split, DatasetSplits, SplitFractions};
use crate::drop::DropMode;
use crate::error::{KanError, Result};
use crate::loss::LossKind;
use crate::network::{maskable_layers, KanNetwork};
use crate::rng::{derive_seed, derived_rng};
use crate::spline::GridSpec;
use crate::train::{evaluate, train, MetricLog, TrainConfig};

const TAG_SPLIT: u64 = 1;
const TAG_EXP1: u64 = 2;
const TAG_EXP2: u64 = 3;
const TAG_INIT: u64 = 10;
const TAG_TRAIN: u64 = 11;
const TAG_PASS: u64 = 12;
const TAG_RATES: u64 = 13;
const TAG_FINAL: u64 = 14;

/// Number of retraining runs behind every reported mean and std.
pub const FINAL_RUNS: usize = 5;

/// One drop regime to compare. `rates` has one entry per maskable layer,
/// or a single entry applied to all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSetting {
    pub name: String,
    pub mode: DropMode,
    #[serde(default)]
    pub scale: bool,
    #[serde(default)]
    pub rates: Vec<f64>,
}

impl DropSetting {
    pub fn new(name: &str, mode: DropMode, scale: bool, rates: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            mode,
            scale,
            rates,
        }
    }

    pub fn maskable(&self, n_layers: usize) -> usize {
        maskable_layers(self.mode, n_layers).len()
    }

    pub fn resolve_rates(&self, n_layers: usize) -> Result<Vec<f64>> {
        let n = self.maskable(n_layers);
        match self.rates.len() {
            _ if n == 0 => Ok(Vec::new()),
            1 => Ok(vec![self.rates[0]; n]),
            k if k == n => Ok(self.rates.clone()),
            k => Err(KanError::InvalidConfig(format!(
                "setting `{}` gives {k} rates, {} has {n} maskable layers",
                self.name, self.mode
            ))),
        }
    }
}

/// The five forward-pass settings, all at drop rate `p`.
pub fn exp1_settings(p: f64) -> Vec<DropSetting> {
    vec![
        DropSetting::new("no_drop", DropMode::None, false, vec![]),
        DropSetting::new("dropout_w_scale", DropMode::Dropout, true, vec![p]),
        DropSetting::new("dropout_wo_scale", DropMode::Dropout, false, vec![p]),
        DropSetting::new("dropkan_pa_w_scale", DropMode::DropkanPa, true, vec![p]),
        DropSetting::new("dropkan_pa_wo_scale", DropMode::DropkanPa, false, vec![p]),
    ]
}

/// The five benchmark settings; rates are filled in by the search.
pub fn exp2_settings() -> Vec<DropSetting> {
    vec![
        DropSetting::new("no_drop", DropMode::None, false, vec![]),
        DropSetting::new("dropout_wo_scale", DropMode::Dropout, false, vec![]),
        DropSetting::new("dropout_w_scale", DropMode::Dropout, true, vec![]),
        DropSetting::new("dropkan_ps", DropMode::DropkanPs, false, vec![]),
        DropSetting::new("dropkan_pa", DropMode::DropkanPa, true, vec![]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpec {
    pub evaluations: usize,
    pub rate_lo: f64,
    pub rate_hi: f64,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            evaluations: 50,
            rate_lo: 0.05,
            rate_hi: 0.5,
        }
    }
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.evaluations == 0 {
            return Err(KanError::InvalidConfig("search needs at least one evaluation".into()));
        }
        if !(0.0 <= self.rate_lo && self.rate_lo < self.rate_hi && self.rate_hi < 1.0) {
            return Err(KanError::InvalidConfig(format!(
                "search range [{}, {}] must satisfy 0 <= lo < hi < 1",
                self.rate_lo, self.rate_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    /// Defaults to the last column.
    pub label_column: Option<String>,
    /// Defaults to `[n_features, 10, outputs]`.
    pub architecture: Option<Vec<usize>>,
    /// Empty means the standard five settings of the experiment.
    pub settings: Vec<DropSetting>,
    pub repeats: usize,
    pub passes: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Defaults to binary logistic for one output node, softmax otherwise.
    pub loss: Option<LossKind>,
    pub grid: GridSpec,
    pub init_sigma: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub split: SplitFractions,
    pub search: SearchSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            label_column: None,
            architecture: None,
            settings: Vec::new(),
            repeats: 5,
            passes: 5,
            steps: 2000,
            eval_every: 100,
            batch_size: 32,
            learning_rate: 0.01,
            adam: AdamConfig::default(),
            loss: None,
            grid: GridSpec::default(),
            init_sigma: 0.1,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            split: SplitFractions::default(),
            search: SearchSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.passes == 0 {
            return Err(KanError::InvalidConfig("repeats and passes must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(KanError::InvalidConfig("eval_every must be positive".into()));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(KanError::InvalidConfig("init_sigma must be finite and non-negative".into()));
        }
        self.search.validate()
    }

    pub fn train_config(&self, seed: u64, loss: LossKind) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam: self.adam,
            seed,
            loss,
            eval_every: self.eval_every,
            record_wall_time: false,
        }
    }
}

/// Dataset, loss and architecture after resolving config defaults.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: DatasetSplits,
    pub loss: LossKind,
    pub architecture: Vec<usize>,
    /// Original class treated as positive when a multi-class dataset is
    /// reduced to one logit.
    pub positive_class: Option<String>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let path = config
        .dataset
        .as_ref()
        .ok_or_else(|| KanError::InvalidConfig("no dataset given".into()))?;
    let mut table = load_csv(path)?;
    if let Some(label) = &config.label_column {
        table = table.with_label_column(label)?;
    }
    let data = split(&table, config.split, derive_seed(config.seed, &[TAG_SPLIT]))?;
    prepare_splits(config, data)
}

/// Resolve loss and architecture for already split data.
pub fn prepare_splits(config: &ExperimentConfig, data: DatasetSplits) -> Result<Prepared> {
    let loss = config.loss.unwrap_or(match &config.architecture {
        Some(a) if a.last() == Some(&1) => LossKind::BinaryLogistic,
        _ => LossKind::SoftmaxCrossEntropy,
    });
    let (data, positive_class) = if loss == LossKind::BinaryLogistic && data.n_classes > 2 {
        let positive = data.majority_class();
        let name = data.schema.classes[positive].clone();
        (data.one_vs_rest(positive), Some(name))
    } else {
        (data, None)
    };
    let architecture = config
        .architecture
        .clone()
        .unwrap_or_else(|| vec![data.n_features(), 10, loss.output_width(data.n_classes)]);
    if architecture.first() != Some(&data.n_features()) {
        return Err(KanError::InvalidConfig(format!(
            "architecture {architecture:?} does not match {} dataset features",
            data.n_features()
        )));
    }
    Ok(Prepared {
        data,
        loss,
        architecture,
        positive_class,
    })
}

/// Initialize, install the drop regime and train one network. `path` names
/// the run inside the master seed.
pub fn train_run(
    config: &ExperimentConfig,
    prep: &Prepared,
    setting: &DropSetting,
    rates: &[f64],
    path: &[u64],
) -> Result<(KanNetwork, MetricLog)> {
    let mut init_path = path.to_vec();
    init_path.push(TAG_INIT);
    let mut net = KanNetwork::new(
        &prep.architecture,
        config.grid,
        config.init_sigma,
        &mut derived_rng(config.seed, &init_path),
    )?;
    net.apply_drop(setting.mode, setting.scale, rates)?;
    let mut train_path = path.to_vec();
    train_path.push(TAG_TRAIN);
    let tc = config.train_config(derive_seed(config.seed, &train_path), prep.loss);
    train(&net, &prep.data, &tc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exp1Row {
    pub step: usize,
    pub setting: String,
    pub repeat: usize,
    pub pass: usize,
    pub mean_output: f64,
}

fn eval_points(steps: usize, every: usize) -> Vec<usize> {
    let mut points: Vec<usize> = (0..=steps).step_by(every).collect();
    if points.last() != Some(&steps) {
        points.push(steps);
    }
    points
}

/// Train the no-drop network and, at step 0 and every `eval_every` steps,
/// run `passes` training-mode forward passes over the validation split under
/// each setting, recording the mean of output node 0.
pub fn run_exp1(config: &ExperimentConfig, prep: &Prepared) -> Result<Vec<Exp1Row>> {
    config.validate()?;
    let settings = if config.settings.is_empty() {
        exp1_settings(0.5)
    } else {
        config.settings.clone()
    };
    let n_layers = prep.architecture.len() - 1;
    let resolved = settings
        .iter()
        .map(|s| s.resolve_rates(n_layers))
        .collect::<Result<Vec<_>>>()?;
    if prep.data.valid.is_empty() {
        return Err(KanError::EmptySplit("experiment I measures on the validation split".into()));
    }
    let points = eval_points(config.steps, config.eval_every);

    let per_repeat = (0..config.repeats)
        .into_par_iter()
        .map(|r| -> Result<Vec<Exp1Row>> {
            let mut net = KanNetwork::new(
                &prep.architecture,
                config.grid,
                config.init_sigma,
                &mut derived_rng(config.seed, &[TAG_EXP1, r as u64, TAG_INIT]),
            )?;
            net.apply_drop(DropMode::None, false, &[])?;
            let tc = config.train_config(derive_seed(config.seed, &[TAG_EXP1, r as u64, TAG_TRAIN]), prep.loss);
            crate::train::check_output_width(&net, tc.loss, prep.data.n_classes)?;
            let mut trainer = crate::train::Trainer::new(net, &prep.data.train, tc)?;
            let mut rows = Vec::new();
            for &step in &points {
                while trainer.steps_done() < step {
                    trainer.step()?;
                }
                for (si, (setting, rates)) in settings.iter().zip(&resolved).enumerate() {
                    let probe = trainer.network().with_drop(setting.mode, setting.scale, rates)?;
                    for pass in 0..config.passes {
                        let mut rng =
                            derived_rng(config.seed, &[TAG_EXP1, r as u64, TAG_PASS, step as u64, si as u64, pass as u64]);
                        let out = probe.forward(prep.data.valid.features.view(), true, &mut rng)?;
                        rows.push(Exp1Row {
                            step,
                            setting: setting.name.clone(),
                            repeat: r,
                            pass,
                            mean_output: out.column(0).mean().expect("validation split is non-empty"),
                        });
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_repeat.into_iter().flatten().collect())
}

pub fn exp1_csv(rows: &[Exp1Row]) -> String {
    let mut out = String::from("step,setting,repeat,pass,mean_output\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.setting, r.repeat, r.pass, r.mean_output);
    }
    out
}

/// Mean absolute deviation of a setting's pass-averaged curve from the
/// baseline curve, over every (repeat, step) point.
pub fn exp1_deviation(rows: &[Exp1Row], setting: &str, baseline: &str) -> Option<f64> {
    use std::collections::BTreeMap;
    let curve = |name: &str| {
        let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.setting == name) {
            let e = acc.entry((r.repeat, r.step)).or_insert((0.0, 0));
            e.0 += r.mean_output;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect::<BTreeMap<_, _>>()
    };
    let (a, b) = (curve(setting), curve(baseline));
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    let total: f64 = a.iter().map(|(k, v)| (v - b.get(k).copied().unwrap_or(f64::NAN)).abs()).sum();
    Some(total / a.len() as f64)
}

pub fn exp1_summary_csv(rows: &[Exp1Row]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.setting.as_str()) {
            names.push(&r.setting);
        }
    }
    let mut out = String::from("setting,mean_abs_deviation_from_no_drop\n");
    for name in names {
        let dev = exp1_deviation(rows, name, "no_drop").unwrap_or(f64::NAN);
        let _ = writeln!(out, "{name},{dev}");
    }
    out
}

/// One random-search evaluation: sampled rates and the validation accuracy
/// of the trained network, or the error that aborted training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub setting: String,
    pub index: usize,
    pub rates: Vec<f64>,
    pub valid_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub setting: DropSetting,
    pub evaluations: Vec<Evaluation>,
    /// Index of the best evaluation by validation accuracy (first on ties).
    pub best: Option<usize>,
}

impl SearchOutcome {
    pub fn best_rates(&self) -> Option<&[f64]> {
        self.best.map(|b| self.evaluations[b].rates.as_slice())
    }

    pub fn failed(&self) -> usize {
        self.evaluations.iter().filter(|e| e.error.is_some()).count()
    }
}

fn sample_rates(config: &ExperimentConfig, setting_index: usize, eval: usize, n: usize) -> Vec<f64> {
    let mut rng = derived_rng(
        config.seed,
        &[TAG_EXP2, setting_index as u64, TAG_RATES, eval as u64],
    );
    (0..n)
        .map(|_| rng.random_range(config.search.rate_lo..config.search.rate_hi))
        .collect()
}

fn run_evaluation(config: &ExperimentConfig, prep: &Prepared, setting: &DropSetting, si: usize, e: usize) -> Evaluation {
    let n = setting.maskable(prep.architecture.len() - 1);
    let rates = sample_rates(config, si, e, n);
    let result = train_run(config, prep, setting, &rates, &[TAG_EXP2, si as u64, e as u64])
        .and_then(|(net, _)| evaluate(&net, &prep.data.valid, prep.loss));
    let (valid_accuracy, error) = match result {
        Ok((acc, _)) => (Some(acc), None),
        Err(err) => (None, Some(err.to_string())),
    };
    Evaluation {
        setting: setting.name.clone(),
        index: e,
        rates,
        valid_accuracy,
        error,
    }
}

fn pick_best(evaluations: &[Evaluation]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in evaluations.iter().enumerate() {
        if let Some(acc) = e.valid_accuracy {
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((i, acc));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn evaluation_count(config: &ExperimentConfig, setting: &DropSetting, n_layers: usize) -> usize {
    if setting.maskable(n_layers) == 0 {
        1
    } else {
        config.search.evaluations
    }
}

/// Random search over drop rates for one setting. A setting with nothing
/// to mask gets a single evaluation.
pub fn search(config: &ExperimentConfig, prep: &Prepared, setting: &DropSetting, setting_index: usize) -> Result<SearchOutcome> {
    config.validate()?;
    let count = evaluation_count(config, setting, prep.architecture.len() - 1);
    let evaluations: Vec<Evaluation> = (0..count)
        .into_par_iter()
        .map(|e| run_evaluation(config, prep, setting, setting_index, e))
        .collect();
    Ok(SearchOutcome {
        setting: setting.clone(),
        best: pick_best(&evaluations),
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub search: SearchOutcome,
    pub test_accuracies: Vec<f64>,
    pub valid_accuracies: Vec<f64>,
    pub failed_runs: Vec<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SettingResult {
    pub fn test_mean_std(&self) -> (f64, f64) {
        mean_std(&self.test_accuracies)
    }

    pub fn valid_mean_std(&self) -> (f64, f64) {
        mean_std(&self.valid_accuracies)
    }
}

/// Search every setting, then retrain each at its best rates `FINAL_RUNS`
/// times with fresh seeds.
pub fn run_exp2(config: &ExperimentConfig, prep: &Prepared) -> Result<Vec<SettingResult>> {
    config.validate()?;
    let settings = if config.settings.is_empty() {
        exp2_settings()
    } else {
        config.settings.clone()
    };
    let n_layers = prep.architecture.len() - 1;
    let jobs: Vec<(usize, usize)> = settings
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..evaluation_count(config, s, n_layers)).map(move |e| (si, e)))
        .collect();
    let evaluations: Vec<Evaluation> = jobs
        .par_iter()
        .map(|&(si, e)| run_evaluation(config, prep, &settings[si], si, e))
        .collect();
    let outcomes: Vec<SearchOutcome> = settings
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let evals: Vec<Evaluation> = jobs
                .iter()
                .zip(&evaluations)
                .filter(|((j, _), _)| *j == si)
                .map(|(_, e)| e.clone())
                .collect();
            SearchOutcome {
                setting: s.clone(),
                best: pick_best(&evals),
                evaluations: evals,
            }
        })
        .collect();

    let finals: Vec<(usize, usize)> = (0..settings.len())
        .filter(|&si| outcomes[si].best.is_some())
        .flat_map(|si| (0..FINAL_RUNS).map(move |f| (si, f)))
        .collect();
    let runs: Vec<Result<(f64, f64)>> = finals
        .par_iter()
        .map(|&(si, f)| {
            let rates = outcomes[si].best_rates().expect("filtered on best");
            let (net, _) = train_run(config, prep, &settings[si], rates, &[TAG_EXP2, si as u64, TAG_FINAL, f as u64])?;
            let (test, _) = evaluate(&net, &prep.data.test, prep.loss)?;
            let (valid, _) = evaluate(&net, &prep.data.valid, prep.loss)?;
            Ok((test, valid))
        })
        .collect();

    let mut results: Vec<SettingResult> = outcomes
        .into_iter()
        .map(|search| SettingResult {
            search,
            test_accuracies: Vec::new(),
            valid_accuracies: Vec::new(),
            failed_runs: Vec::new(),
        })
        .collect();
    for (&(si, _), run) in finals.iter().zip(runs) {
        match run {
            Ok((test, valid)) => {
                results[si].test_accuracies.push(test);
                results[si].valid_accuracies.push(valid);
            }
            Err(e) => results[si].failed_runs.push(e.to_string()),
        }
    }
    Ok(results)
}

fn join_rates(rates: &[f64]) -> String {
    rates.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(";")
}

pub fn exp2_results_csv(results: &[SettingResult]) -> String {
    let mut out = String::from(
        "setting,mode,scale,rates,evaluations,failed_evaluations,best_valid_accuracy,\
         valid_mean,valid_std,test_mean,test_std,runs,failed_runs,table\n",
    );
    for r in results {
        let s = &r.search;
        let best_valid = s
            .best
            .and_then(|b| s.evaluations[b].valid_accuracy)
            .unwrap_or(f64::NAN);
        let (vm, vs) = r.valid_mean_std();
        let (tm, ts) = r.test_mean_std();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.2} ± {:.2}",
            s.setting.name,
            s.setting.mode,
            s.setting.scale,
            join_rates(s.best_rates().unwrap_or(&[])),
            s.evaluations.len(),
            s.failed(),
            best_valid,
            vm,
            vs,
            tm,
            ts,
            r.test_accuracies.len(),
            r.failed_runs.len(),
            100.0 * tm,
            100.0 * ts
        );
    }
    out
}

pub fn search_csv(outcomes: &[&SearchOutcome]) -> String {
    let mut out = String::from("setting,evaluation,rates,valid_accuracy,error\n");
    for o in outcomes {
        for e in &o.evaluations {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.setting,
                e.index,
                join_rates(&e.rates),
                e.valid_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                e.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            );
        }
    }
    out
}
