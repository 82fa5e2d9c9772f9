//! Monte Carlo orchestration: configuration, seeded trials, the three
//! calibration methods and result emission.
//!
//! A trial fixes the data (true model, client profiles, Byzantine set, data
//! streams). Within a trial each distinct sharing ratio is trained once and
//! every (method, attack) pair calibrates on top of that trained model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::attacks::{corrupt_scores, CalibAttackKind, CalibAttackSpec, TrainingAttackConfig};
use crate::conformal::{conformal_quantile, evaluate_residuals, pool_scores, ScoreSet};
use crate::datagen::{
    draw_client_profiles, generate_true_weights, least_squares, load_uci_dataset, next_sample_into,
    partition_non_iid, ClientDataProfile, Dataset, IndexedStreams, RealDatasetConfig,
    SyntheticConfig, SyntheticStreams,
};
use crate::error::{Error, Result};
use crate::par;
use crate::robust_calib::{
    characterize, filter_mad, filter_top_b, maliciousness_scores, pairwise_distances,
    separation_diagnostics, write_histograms_csv, write_maliciousness_csv,
    CharacterizationVector, FilterOutcome, HistogramSpec, SeparationReport,
};
use crate::seed::{self, ratio_tag, tag};
use crate::stats::{mean, nearest_rank, sample_std};
use crate::theory::{self, BoundInputs, HalfNormalMixture};
use crate::training::{init_clients, run_training, to_db, CommLedger, TrainingConfig};
use crate::vector::{dot, ModelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Synthetic,
    Uci,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PrismFcp,
    RobFcp,
    Fcp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PrismFcp, Method::RobFcp, Method::Fcp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PrismFcp => "prism_fcp",
            Method::RobFcp => "rob_fcp",
            Method::Fcp => "fcp",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::PrismFcp => "PRISM-FCP",
            Method::RobFcp => "Rob-FCP",
            Method::Fcp => "FCP",
        }
    }

    pub fn filters(self) -> bool {
        !matches!(self, Method::Fcp)
    }

    /// Sharing ratio the method trains with; only PRISM-FCP shares partially.
    pub fn training_ratio(self, sweep_ratio: f64) -> f64 {
        match self {
            Method::PrismFcp => sweep_ratio,
            Method::RobFcp | Method::Fcp => 1.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "prism_fcp" | "prism" => Ok(Method::PrismFcp),
            "rob_fcp" | "rob" => Ok(Method::RobFcp),
            "fcp" => Ok(Method::Fcp),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    KnownB,
    Mad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub mad_scale: f64,
    pub mad_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::KnownB,
            mad_scale: 1.4826,
            mad_threshold: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibAttackConfig {
    pub kinds: Vec<CalibAttackKind>,
    pub coverage_multiplier: f64,
    pub random_variance: f64,
}

impl Default for CalibAttackConfig {
    fn default() -> Self {
        Self {
            kinds: CalibAttackKind::ALL.to_vec(),
            coverage_multiplier: 10.0,
            random_variance: 0.5,
        }
    }
}

impl CalibAttackConfig {
    pub fn spec(&self, kind: CalibAttackKind) -> CalibAttackSpec {
        CalibAttackSpec {
            kind,
            coverage_multiplier: self.coverage_multiplier,
            random_variance: self.random_variance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub m_over_d: Vec<f64>,
    pub n_clients: usize,
    pub n_byzantine: usize,
    pub participants_per_round: usize,
    pub dim: usize,
    pub alpha: f64,
    pub n_trials: usize,
    pub n_train_iters: usize,
    pub n_calib: usize,
    pub n_test: usize,
    pub seed: u64,
    pub step_size: f64,
    pub feature_variance_range: (f64, f64),
    pub noise_variance_range: (f64, f64),
    pub train_attack: TrainingAttackConfig,
    pub calib_attack: CalibAttackConfig,
    pub histogram_bins: usize,
    pub filter: FilterConfig,
    /// Fixed score normalizer; when absent each cell uses the 99.5th
    /// percentile of the benign clients' honest calibration scores.
    pub score_scale: Option<f64>,
    pub uci: RealDatasetConfig,
    pub out_dir: PathBuf,
    pub divergence_factor: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Synthetic,
            methods: Method::ALL.to_vec(),
            m_over_d: vec![0.3],
            n_clients: 100,
            n_byzantine: 20,
            participants_per_round: 10,
            dim: 50,
            alpha: 0.1,
            n_trials: 10,
            n_train_iters: 1000,
            n_calib: 1000,
            n_test: 1000,
            seed: 2024,
            step_size: 0.05,
            feature_variance_range: (0.2, 1.2),
            noise_variance_range: (0.005, 0.025),
            train_attack: TrainingAttackConfig::default(),
            calib_attack: CalibAttackConfig::default(),
            histogram_bins: 100,
            filter: FilterConfig::default(),
            score_scale: None,
            uci: RealDatasetConfig::default(),
            out_dir: PathBuf::from("results"),
            divergence_factor: 1e3,
        }
    }
}

pub const SWEEP_RATIOS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];

impl ExperimentConfig {
    pub fn table1() -> Self {
        Self::default()
    }

    pub fn table2() -> Self {
        Self {
            scenario: Scenario::Uci,
            m_over_d: vec![0.25],
            n_trials: 5,
            ..Self::default()
        }
    }

    pub fn sweep() -> Self {
        Self {
            methods: vec![Method::PrismFcp],
            m_over_d: SWEEP_RATIOS.to_vec(),
            calib_attack: CalibAttackConfig {
                kinds: vec![CalibAttackKind::Efficiency],
                ..CalibAttackConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Applies a dotted `key=value` override; the value is parsed as JSON and
    /// falls back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut node = &mut doc;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *node = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        if self.m_over_d.is_empty() || self.m_over_d.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return fail(format!("m_over_d ratios must lie in (0, 1], got {:?}", self.m_over_d));
        }
        if self.n_byzantine >= self.n_clients {
            return fail(format!(
                "n_byzantine ({}) must be below n_clients ({})",
                self.n_byzantine, self.n_clients
            ));
        }
        if self.n_clients - self.n_byzantine < 2 {
            return fail("need at least two benign clients".into());
        }
        if self.participants_per_round == 0 || self.participants_per_round > self.n_clients {
            return fail("participants_per_round must lie in 1..=n_clients".into());
        }
        if self.n_trials == 0 || self.n_calib == 0 || self.n_test == 0 {
            return fail("n_trials, n_calib and n_test must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.histogram_bins < 2 {
            return fail("histogram_bins must be at least 2".into());
        }
        if let Some(c) = self.score_scale {
            if !(c > 0.0) {
                return fail(format!("score_scale must be positive, got {c}"));
            }
        }
        if self.filter.mode == FilterMode::Mad && self.n_clients < 3 {
            return fail("MAD filtering needs at least 3 clients".into());
        }
        if self.calib_attack.kinds.is_empty() {
            return fail("calib_attack.kinds must not be empty (use \"none\")".into());
        }
        for &k in &self.calib_attack.kinds {
            self.calib_attack.spec(k).validate()?;
        }
        self.train_attack.validate()?;
        if self.scenario == Scenario::Synthetic {
            SyntheticConfig::new(
                self.dim,
                self.feature_variance_range,
                self.noise_variance_range,
                1.0,
            )?;
        }
        Ok(())
    }

    fn training_config(&self, dim: usize, ratio: f64) -> TrainingConfig {
        TrainingConfig {
            dim,
            shared: TrainingConfig::shared_for_ratio(dim, ratio),
            step_size: self.step_size,
            n_iterations: self.n_train_iters,
            participants_per_round: self.participants_per_round,
            n_clients: self.n_clients,
            divergence_factor: self.divergence_factor,
        }
    }

    fn real_config(&self) -> RealDatasetConfig {
        RealDatasetConfig {
            n_clients: self.n_clients,
            n_calib: self.n_calib,
            n_test: self.n_test,
            ..self.uci.clone()
        }
    }

    /// Distinct `(method, ratio)` cells in output order.
    pub fn cells(&self) -> Vec<(Method, f64)> {
        let mut out = Vec::new();
        for &r in &self.m_over_d {
            for &m in &self.methods {
                let cell = (m, m.training_ratio(r));
                if !out.contains(&cell) {
                    out.push(cell);
                }
            }
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: usize,
    pub method: Method,
    pub attack: CalibAttackKind,
    pub m_over_d: f64,
    pub coverage: f64,
    pub mean_width: f64,
    pub quantile: f64,
    pub saturation_flag: bool,
    pub final_mse_db: f64,
    pub quantile_deviation: f64,
    pub tp: usize,
    pub fp: usize,
    pub comm_up: u64,
    pub comm_down: u64,
}

/// Everything a trial shares across methods: the data law and who is Byzantine.
pub struct TrialData {
    pub trial_id: usize,
    pub is_byzantine: Vec<bool>,
    pub source: TrialSource,
}

pub enum TrialSource {
    Synthetic {
        w_star: ModelVector,
        profiles: Vec<ClientDataProfile>,
    },
    Real {
        dataset: Arc<Dataset>,
        w_ref: ModelVector,
        train_rows: Vec<Vec<usize>>,
        calib_rows: Vec<Vec<usize>>,
        test_rows: Vec<Vec<usize>>,
    },
}

impl TrialData {
    pub fn dim(&self) -> usize {
        self.reference().dim()
    }

    /// `w*` for synthetic data, the least-squares fit for real data.
    pub fn reference(&self) -> &ModelVector {
        match &self.source {
            TrialSource::Synthetic { w_star, .. } => w_star,
            TrialSource::Real { w_ref, .. } => w_ref,
        }
    }

    /// Multiplier taking standardized widths back to target units.
    pub fn target_scale(&self) -> f64 {
        match &self.source {
            TrialSource::Synthetic { .. } => 1.0,
            TrialSource::Real { dataset, .. } => dataset.target_std,
        }
    }

    pub fn benign(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.is_byzantine.len()).filter(|&k| !self.is_byzantine[k])
    }

    pub fn n_byzantine(&self) -> usize {
        self.is_byzantine.iter().filter(|&&b| b).count()
    }
}

fn draw_byzantine(cfg: &ExperimentConfig, trial: usize) -> Vec<bool> {
    let mut r = seed::rng(cfg.seed, &[trial as u64, tag("byzantine")]);
    let mut flags = vec![false; cfg.n_clients];
    for k in sample_indices(&mut r, cfg.n_clients, cfg.n_byzantine) {
        flags[k] = true;
    }
    flags
}

pub fn build_trial(cfg: &ExperimentConfig, trial: usize, dataset: Option<&Arc<Dataset>>) -> Result<TrialData> {
    let is_byzantine = draw_byzantine(cfg, trial);
    let source = match cfg.scenario {
        Scenario::Synthetic => {
            let syn = SyntheticConfig::new(
                cfg.dim,
                cfg.feature_variance_range,
                cfg.noise_variance_range,
                1.0,
            )?;
            let w_star = generate_true_weights(&syn, &mut seed::rng(cfg.seed, &[trial as u64, tag("weights")]));
            let profiles = draw_client_profiles(
                &syn,
                cfg.n_clients,
                &mut seed::rng(cfg.seed, &[trial as u64, tag("profiles")]),
            );
            TrialSource::Synthetic { w_star, profiles }
        }
        Scenario::Uci => {
            let dataset = dataset
                .ok_or_else(|| Error::Config("uci scenario needs a loaded dataset".into()))?
                .clone();
            let real = cfg.real_config();
            real.validate()?;
            let w_ref = least_squares(&dataset)?;
            let part = partition_non_iid(
                &dataset.targets,
                &real,
                &mut seed::rng(cfg.seed, &[trial as u64, tag("partition")]),
            )?;
            let (mut train_rows, mut calib_rows, mut test_rows) = (Vec::new(), Vec::new(), Vec::new());
            for rows in part.clients {
                let (train, rest) = rows.split_at(real.n_train);
                let (calib, test) = rest.split_at(real.n_calib);
                train_rows.push(train.to_vec());
                calib_rows.push(calib.to_vec());
                test_rows.push(test[..real.n_test].to_vec());
            }
            TrialSource::Real {
                dataset,
                w_ref,
                train_rows,
                calib_rows,
                test_rows,
            }
        }
    };
    Ok(TrialData {
        trial_id: trial,
        is_byzantine,
        source,
    })
}

/// A trained model plus the residuals every method calibrates and tests on.
pub struct TrainedCell {
    pub ratio: f64,
    pub shared: usize,
    pub model: ModelVector,
    pub mse: Vec<f64>,
    pub comm: CommLedger,
    pub injected_energy_per_opportunity: f64,
    /// Honest calibration scores under the trained model, one set per client.
    pub calib: Vec<ScoreSet>,
    /// Benign calibration scores under the reference model.
    pub reference_scores: Vec<f64>,
    /// Test residuals under the trained model, benign clients only.
    pub test_residuals: Vec<f64>,
    pub q_star: f64,
}

type Curves = (f64, Vec<Vec<f64>>);

#[allow(clippy::too_many_arguments)]
fn residuals_synthetic(
    cfg: &ExperimentConfig,
    trial: usize,
    stream: &str,
    k: usize,
    n: usize,
    profile: &ClientDataProfile,
    w_star: &[f64],
    models: &[&[f64]],
) -> Vec<Vec<f64>> {
    let mut r = seed::rng(cfg.seed, &[trial as u64, tag(stream), k as u64]);
    let mut x = vec![0.0; w_star.len()];
    let mut out = vec![Vec::with_capacity(n); models.len()];
    for _ in 0..n {
        let y = next_sample_into(profile, w_star, &mut r, &mut x);
        for (o, m) in out.iter_mut().zip(models) {
            o.push((y - dot(m, &x)).abs());
        }
    }
    out
}

fn residuals_real(dataset: &Dataset, rows: &[usize], models: &[&[f64]]) -> Vec<Vec<f64>> {
    models
        .iter()
        .map(|m| {
            rows.iter()
                .map(|&i| (dataset.targets[i] - dot(m, &dataset.rows[i])).abs())
                .collect()
        })
        .collect()
}

pub fn train_cell(cfg: &ExperimentConfig, data: &TrialData, ratio: f64) -> Result<TrainedCell> {
    let trial = data.trial_id;
    let dim = data.dim();
    let tcfg = cfg.training_config(dim, ratio);
    let mut rng = seed::rng(cfg.seed, &[trial as u64, tag("training"), ratio_tag(ratio)]);
    let mut clients = init_clients(&tcfg, &data.is_byzantine, &mut rng)?;
    let reference = data.reference().clone();
    let outcome = match &data.source {
        TrialSource::Synthetic { w_star, profiles } => {
            let rngs = (0..cfg.n_clients)
                .map(|k| seed::rng(cfg.seed, &[trial as u64, tag("train-data"), k as u64]))
                .collect();
            let mut streams = SyntheticStreams::new(w_star.clone(), profiles.clone(), rngs);
            run_training(&tcfg, &mut clients, &mut streams, &cfg.train_attack, w_star, &mut rng)?
        }
        TrialSource::Real {
            dataset, train_rows, ..
        } => {
            let mut streams = IndexedStreams::new(dataset.clone(), train_rows.clone());
            run_training(&tcfg, &mut clients, &mut streams, &cfg.train_attack, &reference, &mut rng)?
        }
    };
    let model = outcome.global.model.clone();

    let per_client: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = par::map_range(cfg.n_clients, |k| {
        let benign = !data.is_byzantine[k];
        match &data.source {
            TrialSource::Synthetic { w_star, profiles } => {
                let mut c = residuals_synthetic(cfg, trial, "calib", k, cfg.n_calib, &profiles[k], w_star, &[&model, w_star]);
                let test = if benign {
                    residuals_synthetic(cfg, trial, "test", k, cfg.n_test, &profiles[k], w_star, &[&model])
                        .pop()
                        .unwrap_or_default()
                } else {
                    Vec::new()
                };
                let reference = c.pop().unwrap_or_default();
                let calib = c.pop().unwrap_or_default();
                (calib, if benign { reference } else { Vec::new() }, test)
            }
            TrialSource::Real {
                dataset,
                w_ref,
                calib_rows,
                test_rows,
                ..
            } => {
                let mut c = residuals_real(dataset, &calib_rows[k], &[&model, w_ref]);
                let test = if benign {
                    residuals_real(dataset, &test_rows[k], &[&model]).pop().unwrap_or_default()
                } else {
                    Vec::new()
                };
                let reference = c.pop().unwrap_or_default();
                let calib = c.pop().unwrap_or_default();
                (calib, if benign { reference } else { Vec::new() }, test)
            }
        }
    });
    let mut calib = Vec::with_capacity(cfg.n_clients);
    let mut reference_scores = Vec::new();
    let mut test_residuals = Vec::new();
    for (k, (c, r, t)) in per_client.into_iter().enumerate() {
        calib.push(ScoreSet::new(k, c)?);
        reference_scores.extend(r);
        test_residuals.extend(t);
    }
    let q_star = conformal_quantile(&reference_scores, cfg.alpha)?.value;
    Ok(TrainedCell {
        ratio,
        shared: tcfg.shared,
        model,
        injected_energy_per_opportunity: outcome.attack.mean_energy_per_opportunity(),
        mse: outcome.mse,
        comm: outcome.comm,
        calib,
        reference_scores,
        test_residuals,
        q_star,
    })
}

/// Per-cell detail kept for figures and diagnostics.
#[derive(Debug, Clone)]
pub struct CellDiagnostics {
    pub score_scale: f64,
    pub vectors: Vec<CharacterizationVector>,
    pub maliciousness: Vec<f64>,
    pub filter: FilterOutcome,
    pub separation: Option<SeparationReport>,
}

fn score_scale(cfg: &ExperimentConfig, data: &TrialData, cell: &TrainedCell) -> f64 {
    cfg.score_scale.unwrap_or_else(|| {
        let benign: Vec<f64> = data
            .benign()
            .flat_map(|k| cell.calib[k].scores().iter().copied())
            .collect();
        let c = nearest_rank(&benign, 0.995);
        if c > 0.0 {
            c
        } else {
            1.0
        }
    })
}

pub fn calibrate(
    cfg: &ExperimentConfig,
    data: &TrialData,
    cell: &TrainedCell,
    method: Method,
    attack: CalibAttackKind,
) -> Result<(TrialResult, CellDiagnostics)> {
    let spec = cfg.calib_attack.spec(attack);
    let mut rng = seed::rng(
        cfg.seed,
        &[data.trial_id as u64, tag("calib-attack"), ratio_tag(cell.ratio), tag(attack.as_str())],
    );
    let submitted = cell
        .calib
        .iter()
        .map(|s| {
            if data.is_byzantine[s.client_id] {
                corrupt_scores(&spec, s, s.mean(), &mut rng)
            } else {
                Ok(s.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let c = score_scale(cfg, data, cell);
    let hist = HistogramSpec::uniform(cfg.histogram_bins, c)?;
    let vectors = par::map_slice(&submitted, |s| characterize(s, &hist)).into_iter().collect::<Result<Vec<_>>>()?;
    let b = data.n_byzantine();
    let k_b = cfg.n_clients - b;
    let distances = pairwise_distances(&vectors)?;
    let maliciousness = maliciousness_scores(&distances, k_b)?;
    let filter = if !method.filters() {
        FilterOutcome::keep_all(maliciousness.clone())
    } else {
        match cfg.filter.mode {
            FilterMode::KnownB => filter_top_b(&maliciousness, b)?,
            FilterMode::Mad => filter_mad(&vectors, cfg.filter.mad_scale, cfg.filter.mad_threshold)?,
        }
    };
    let separation = if b > 0 {
        Some(separation_diagnostics(&vectors, &data.is_byzantine)?)
    } else {
        None
    };

    let pooled = pool_scores(filter.benign.iter().map(|&k| &submitted[k]));
    let q = conformal_quantile(&pooled, cfg.alpha)?;
    let report = evaluate_residuals(&cell.test_residuals, q.value)?;
    let (tp, fp) = filter.confusion(&data.is_byzantine);
    let scale = data.target_scale();
    let result = TrialResult {
        trial_id: data.trial_id,
        method,
        attack,
        m_over_d: cell.ratio,
        coverage: report.coverage,
        mean_width: report.mean_width * scale,
        quantile: q.value * scale,
        saturation_flag: q.saturated,
        final_mse_db: to_db(cell.mse.last().copied().unwrap_or(f64::NAN)),
        quantile_deviation: (q.value - cell.q_star).abs() * scale,
        tp,
        fp,
        comm_up: cell.comm.uplink_scalars,
        comm_down: cell.comm.downlink_scalars,
    };
    Ok((
        result,
        CellDiagnostics {
            score_scale: c,
            vectors,
            maliciousness,
            filter,
            separation,
        },
    ))
}

/// Runs one cell in isolation. Equal to the matching row of a full sweep.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    attack: CalibAttackKind,
    trial: usize,
    sweep_ratio: f64,
) -> Result<TrialResult> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let data = build_trial(cfg, trial, dataset.as_ref())?;
    let cell = train_cell(cfg, &data, method.training_ratio(sweep_ratio))?;
    Ok(calibrate(cfg, &data, &cell, method, attack)?.0)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Option<Arc<Dataset>>> {
    match cfg.scenario {
        Scenario::Synthetic => Ok(None),
        Scenario::Uci => Ok(Some(Arc::new(load_uci_dataset(&cfg.real_config())?))),
    }
}

/// Theoretical envelope next to its empirical counterpart for one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub method: Method,
    pub attack: CalibAttackKind,
    pub m_over_d: f64,
    pub quantity: String,
    pub theoretical: f64,
    pub empirical: f64,
    pub ratio: f64,
}

fn bound_row(result: &TrialResult, quantity: &str, theoretical: f64, empirical: f64) -> BoundRow {
    BoundRow {
        method: result.method,
        attack: result.attack,
        m_over_d: result.m_over_d,
        quantity: quantity.to_string(),
        theoretical,
        empirical,
        ratio: empirical / theoretical,
    }
}

/// Density constants of the benign score law near `q*`.
pub fn density_inputs(data: &TrialData, cell: &TrainedCell) -> (f64, f64, f64) {
    match &data.source {
        TrialSource::Synthetic { profiles, .. } => {
            let sigmas = data.benign().map(|k| profiles[k].noise_variance.sqrt()).collect();
            HalfNormalMixture::new(sigmas)
                .map(|m| m.density_constants(cell.q_star))
                .unwrap_or((f64::NAN, f64::NAN, f64::NAN))
        }
        TrialSource::Real { .. } => {
            let q = cell.q_star;
            let (f_min, l) = theory::empirical_density_range(&cell.reference_scores, q, q / 2.0, 10)
                .unwrap_or((f64::NAN, f64::NAN));
            let f_max = theory::empirical_density_range(&cell.reference_scores, q / 2.0, q / 2.0, 10)
                .map(|r| r.1.max(l))
                .unwrap_or(f64::NAN);
            (f_min, l, f_max)
        }
    }
}

fn second_moments(data: &TrialData) -> (f64, f64) {
    match &data.source {
        TrialSource::Synthetic { profiles, .. } => {
            let v: Vec<f64> = data.benign().map(|k| profiles[k].feature_variance).collect();
            let d = data.dim() as f64;
            (d * mean(&v), d * v.iter().cloned().fold(0.0, f64::max))
        }
        TrialSource::Real { dataset, .. } => {
            let e = mean(&dataset.rows.iter().map(|x| x.norm_sq()).collect::<Vec<_>>());
            (e, e)
        }
    }
}

pub fn bound_rows(
    cfg: &ExperimentConfig,
    data: &TrialData,
    cell: &TrainedCell,
    result: &TrialResult,
    diag: &CellDiagnostics,
) -> Vec<BoundRow> {
    let (f_min, l, f_max) = density_inputs(data, cell);
    let (ex2, trace_max) = second_moments(data);
    let b = data.n_byzantine();
    let k_b = cfg.n_clients - b;
    let misfiltered = diag.filter.flagged.iter().filter(|&&k| !data.is_byzantine[k]).count()
        + (b - diag.filter.confusion(&data.is_byzantine).0);
    let inp = BoundInputs {
        f_min,
        f_max,
        l,
        l_x: ex2.sqrt(),
        trace_rk: trace_max,
        h: cfg.histogram_bins,
        k: cfg.n_clients,
        k_b,
        b,
        n_b: cfg.n_calib,
        epsilon: misfiltered as f64 / cfg.n_clients as f64,
        alpha: cfg.alpha,
        ..BoundInputs::default()
    };
    let scale = data.target_scale();
    let mse = cell.mse.last().copied().unwrap_or(f64::NAN);
    let mut rows = Vec::new();
    if let Ok(t) = theory::quantile_mse_bound(&inp, mse) {
        rows.push(bound_row(result, "quantile_deviation", t * scale, result.quantile_deviation));
    }
    if let Ok(t) = theory::width_bound(&inp, mse) {
        rows.push(bound_row(result, "width_deviation", t * scale, 2.0 * result.quantile_deviation));
    }
    let energy = theory::attack_energy(
        true,
        cfg.train_attack.attack_probability,
        cell.shared,
        cfg.train_attack.perturbation_variance,
    );
    rows.push(bound_row(result, "attack_energy", energy, cell.injected_energy_per_opportunity));
    if let Ok(cb) = theory::coverage_bounds(&inp) {
        rows.push(bound_row(result, "coverage_lower", cb.lower, result.coverage));
        rows.push(bound_row(result, "coverage_upper", cb.upper, result.coverage));
    }
    if let Some(check) = diag.separation.as_ref().and_then(|s| s.check) {
        rows.push(bound_row(result, "separation_slack", check.slack, misfiltered as f64));
    }
    rows
}

/// Output of one trial: rows, bound comparisons and per-ratio MSE curves.
pub struct TrialOutput {
    pub rows: Vec<TrialResult>,
    pub bounds: Vec<BoundRow>,
    pub mse: Vec<(Method, f64, Vec<f64>)>,
    pub diagnostics: Vec<(TrialResult, CellDiagnostics)>,
}

pub fn run_trial(
    cfg: &ExperimentConfig,
    trial: usize,
    dataset: Option<&Arc<Dataset>>,
    keep_diagnostics: bool,
) -> Result<TrialOutput> {
    let data = build_trial(cfg, trial, dataset)?;
    let cells = cfg.cells();
    let ratios: BTreeSet<u64> = cells.iter().map(|c| ratio_tag(c.1)).collect();
    let mut out = TrialOutput {
        rows: Vec::new(),
        bounds: Vec::new(),
        mse: Vec::new(),
        diagnostics: Vec::new(),
    };
    for rt in ratios {
        let ratio = cells.iter().find(|c| ratio_tag(c.1) == rt).map(|c| c.1).unwrap_or(1.0);
        let trained = train_cell(cfg, &data, ratio)?;
        for &(method, _) in cells.iter().filter(|c| ratio_tag(c.1) == rt) {
            out.mse.push((method, ratio, trained.mse.clone()));
            for &attack in &cfg.calib_attack.kinds {
                let (row, diag) = calibrate(cfg, &data, &trained, method, attack)?;
                out.bounds.extend(bound_rows(cfg, &data, &trained, &row, &diag));
                if keep_diagnostics {
                    out.diagnostics.push((row.clone(), diag));
                }
                out.rows.push(row);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Parallel,
    Sequential,
}

pub fn run_trials(cfg: &ExperimentConfig, exec: Exec, keep_diagnostics: bool) -> Result<Vec<TrialOutput>> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let job = |t: usize| run_trial(cfg, t, dataset.as_ref(), keep_diagnostics);
    let outs = match exec {
        Exec::Parallel => par::map_range(cfg.n_trials, job),
        Exec::Sequential => par::map_range_seq(cfg.n_trials, job),
    };
    outs.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let std = sample_std(xs);
        Self {
            mean: mean(xs),
            std,
            stderr: std / (xs.len() as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub attack: CalibAttackKind,
    pub m_over_d: f64,
    pub n_trials: usize,
    pub coverage: Stat,
    pub mean_width: Stat,
    pub quantile: Stat,
    pub final_mse_db: Stat,
    pub quantile_deviation: Stat,
    pub tp: Stat,
    pub fp: Stat,
    pub saturated_trials: usize,
    pub comm_up: f64,
    pub comm_down: f64,
}

fn cell_order(r: &TrialResult) -> (u64, Method, usize) {
    let attack_pos = CalibAttackKind::ALL
        .iter()
        .position(|&a| a == r.attack)
        .map_or(0, |p| p + 1);
    (ratio_tag(r.m_over_d), r.method, attack_pos)
}

pub fn sort_rows(rows: &mut [TrialResult]) {
    rows.sort_by_key(|r| (cell_order(r), r.trial_id));
}

pub fn summarize(rows: &[TrialResult]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(u64, Method, usize), Vec<&TrialResult>> = BTreeMap::new();
    for r in rows {
        groups.entry(cell_order(r)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let col = |f: fn(&TrialResult) -> f64| Stat::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            CellSummary {
                method: g[0].method,
                attack: g[0].attack,
                m_over_d: g[0].m_over_d,
                n_trials: g.len(),
                coverage: col(|r| r.coverage),
                mean_width: col(|r| r.mean_width),
                quantile: col(|r| r.quantile),
                final_mse_db: col(|r| r.final_mse_db),
                quantile_deviation: col(|r| r.quantile_deviation),
                tp: col(|r| r.tp as f64),
                fp: col(|r| r.fp as f64),
                saturated_trials: g.iter().filter(|r| r.saturation_flag).count(),
                comm_up: mean(&g.iter().map(|r| r.comm_up as f64).collect::<Vec<_>>()),
                comm_down: mean(&g.iter().map(|r| r.comm_down as f64).collect::<Vec<_>>()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub cells: Vec<CellSummary>,
}

pub struct ExperimentOutput {
    pub rows: Vec<TrialResult>,
    pub summary: ExperimentSummary,
    pub bounds: Vec<BoundRow>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct MseRow {
    method: Method,
    m_over_d: f64,
    iteration: usize,
    mse: f64,
    mse_db: f64,
}

fn mean_bounds(bounds: &[BoundRow]) -> Vec<BoundRow> {
    let mut groups: BTreeMap<(u64, Method, CalibAttackKind, String), Vec<&BoundRow>> = BTreeMap::new();
    for b in bounds {
        groups
            .entry((ratio_tag(b.m_over_d), b.method, b.attack, b.quantity.clone()))
            .or_default()
            .push(b);
    }
    groups
        .into_values()
        .map(|g| {
            let t = mean(&g.iter().map(|b| b.theoretical).collect::<Vec<_>>());
            let e = mean(&g.iter().map(|b| b.empirical).collect::<Vec<_>>());
            BoundRow {
                ratio: e / t,
                theoretical: t,
                empirical: e,
                ..g[0].clone()
            }
        })
        .collect()
}

/// Runs every trial and writes `results.csv`, `summary.json`, `bounds.csv`,
/// `mse_trajectory.csv`, `histograms.csv` and `maliciousness.csv` to
/// `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let outs = run_trials(cfg, Exec::Parallel, false)?;
    let mut rows: Vec<TrialResult> = outs.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    sort_rows(&mut rows);
    let bounds = mean_bounds(&outs.iter().flat_map(|o| o.bounds.iter().cloned()).collect::<Vec<_>>());
    let summary = ExperimentSummary {
        config: cfg.clone(),
        cells: summarize(&rows),
    };

    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("results.csv"), &rows)?;
    write_csv(&dir.join("bounds.csv"), &bounds)?;
    let json = serde_json::to_string_pretty(&summary)?;
    let path = dir.join("summary.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let mut curves: BTreeMap<(u64, Method), Curves> = BTreeMap::new();
    for o in &outs {
        for (m, r, c) in &o.mse {
            curves.entry((ratio_tag(*r), *m)).or_insert((*r, Vec::new())).1.push(c.clone());
        }
    }
    let mut mse_rows = Vec::new();
    for ((_, method), (ratio, cs)) in curves {
        for i in 0..cs[0].len() {
            let m = mean(&cs.iter().map(|c| c[i]).collect::<Vec<_>>());
            mse_rows.push(MseRow {
                method,
                m_over_d: ratio,
                iteration: i + 1,
                mse: m,
                mse_db: to_db(m),
            });
        }
    }
    write_csv(&dir.join("mse_trajectory.csv"), &mse_rows)?;

    let fig_cfg = ExperimentConfig {
        n_trials: 1,
        calib_attack: CalibAttackConfig {
            kinds: cfg.calib_attack.kinds[..1].to_vec(),
            ..cfg.calib_attack.clone()
        },
        ..cfg.clone()
    };
    emit_figures(&fig_cfg, dir)?;

    Ok(ExperimentOutput {
        rows,
        summary,
        bounds,
    })
}

/// Writes `histograms.csv` and `maliciousness.csv` (wide, one row per client).
pub fn emit_histograms(
    dir: &Path,
    suffix: &str,
    vectors: &[CharacterizationVector],
    maliciousness: &[f64],
    is_byzantine: &[bool],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_histograms_csv(&dir.join(format!("histograms{suffix}.csv")), vectors, is_byzantine)?;
    write_maliciousness_csv(&dir.join(format!("maliciousness{suffix}.csv")), maliciousness, is_byzantine)
}

/// Histogram and maliciousness dumps from trial 0 of the first configured
/// cell: one unsuffixed pair for the first attack plus `_<attack>` copies.
pub fn emit_figures(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let data = build_trial(cfg, 0, dataset.as_ref())?;
    let (method, ratio) = cfg.cells()[0];
    let cell = train_cell(cfg, &data, ratio)?;
    for (i, &attack) in cfg.calib_attack.kinds.iter().enumerate() {
        let (_, diag) = calibrate(cfg, &data, &cell, method, attack)?;
        if i == 0 {
            emit_histograms(dir, "", &diag.vectors, &diag.maliciousness, &data.is_byzantine)?;
        }
        emit_histograms(
            dir,
            &format!("_{}", attack.as_str()),
            &diag.vectors,
            &diag.maliciousness,
            &data.is_byzantine,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_clients: 20,
            n_byzantine: 4,
            participants_per_round: 5,
            dim: 8,
            n_trials: 2,
            n_train_iters: 200,
            n_calib: 100,
            n_test: 100,
            histogram_bins: 20,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::sweep().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.n_byzantine = 20;
        assert!(c.validate().is_err());
        let mut c = small();
        c.m_over_d = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = small();
        c.n_trials = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_walk_dotted_keys() {
        let mut c = small();
        c.apply_override("train_attack.p_a=0.5").unwrap();
        assert_eq!(c.train_attack.attack_probability, 0.5);
        c.apply_override("filter.mode=mad").unwrap();
        assert_eq!(c.filter.mode, FilterMode::Mad);
        c.apply_override("m_over_d=[0.2,1.0]").unwrap();
        assert_eq!(c.m_over_d, vec![0.2, 1.0]);
        c.apply_override("out_dir=/tmp/x").unwrap();
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
        assert!(c.apply_override("nope=1").is_err());
        assert!(c.apply_override("n_clients").is_err());
        assert!(c.apply_override("n_clients=\"many\"").is_err());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"n_trials": 3, "filter": {"mode": "mad"}}"#).unwrap();
        assert_eq!(c.n_trials, 3);
        assert_eq!(c.filter.mad_scale, 1.4826);
        assert_eq!(c.n_clients, 100);
    }

    #[test]
    fn cells_dedupe_full_sharing() {
        let mut c = small();
        c.m_over_d = vec![0.3, 1.0];
        let cells = c.cells();
        assert_eq!(
            cells,
            vec![
                (Method::PrismFcp, 0.3),
                (Method::PrismFcp, 1.0),
                (Method::RobFcp, 1.0),
                (Method::Fcp, 1.0)
            ]
        );
    }

    #[test]
    fn byzantine_set_has_requested_size() {
        let c = small();
        for t in 0..5 {
            assert_eq!(draw_byzantine(&c, t).iter().filter(|&&b| b).count(), 4);
        }
    }

    #[test]
    fn isolated_cell_matches_batch() {
        let c = small();
        let outs = run_trials(&c, Exec::Parallel, false).unwrap();
        let row = outs[1]
            .rows
            .iter()
            .find(|r| r.method == Method::RobFcp && r.attack == CalibAttackKind::Coverage)
            .unwrap()
            .clone();
        let alone = run_method(&c, Method::RobFcp, CalibAttackKind::Coverage, 1, 0.3).unwrap();
        assert_eq!(row, alone);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let c = small();
        let a = run_trials(&c, Exec::Parallel, false).unwrap();
        let b = run_trials(&c, Exec::Sequential, false).unwrap();
        let flat = |o: &[TrialOutput]| o.iter().flat_map(|t| t.rows.clone()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
    }

    #[test]
    fn summary_matches_rows() {
        let c = small();
        let mut rows: Vec<TrialResult> = run_trials(&c, Exec::Parallel, false)
            .unwrap()
            .into_iter()
            .flat_map(|o| o.rows)
            .collect();
        sort_rows(&mut rows);
        for s in summarize(&rows) {
            let cov: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == s.method && r.attack == s.attack && r.m_over_d == s.m_over_d)
                .map(|r| r.coverage)
                .collect();
            assert_eq!(cov.len(), s.n_trials);
            assert!((mean(&cov) - s.coverage.mean).abs() < 1e-12);
            assert!((sample_std(&cov) - s.coverage.std).abs() < 1e-12);
        }
    }

    #[test]
    fn no_byzantine_methods_agree() {
        let mut c = small();
        c.n_byzantine = 0;
        c.calib_attack.kinds = vec![CalibAttackKind::None];
        c.m_over_d = vec![1.0];
        let rows: Vec<TrialResult> = run_trials(&c, Exec::Parallel, false)
            .unwrap()
            .into_iter()
            .flat_map(|o| o.rows)
            .collect();
        for t in 0..c.n_trials {
            let cov: Vec<f64> = rows.iter().filter(|r| r.trial_id == t).map(|r| r.coverage).collect();
            let spread = cov.iter().cloned().fold(f64::MIN, f64::max) - cov.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread <= 0.01, "{cov:?}");
        }
    }
}
