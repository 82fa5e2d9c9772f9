//! Client data: synthetic linear-model streams and real CSV datasets.
//!
//! Synthetic clients observe `y = w*ᵀx + ν` with `x ~ N(0, ς_k² I)` and
//! `ν ~ N(0, σ_k²)`, where each client draws its own `(ς_k², σ_k²)` once per
//! trial. Real datasets are standardized column-wise and spread over clients
//! with Dirichlet mixing proportions over equal-frequency target bins.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{dot, ModelVector};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub feature_variance_range: (f64, f64),
    pub noise_variance_range: (f64, f64),
    pub true_weight_norm: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            feature_variance_range: (0.2, 1.2),
            noise_variance_range: (0.005, 0.025),
            true_weight_norm: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn new(
        dim: usize,
        feature_variance_range: (f64, f64),
        noise_variance_range: (f64, f64),
        true_weight_norm: f64,
    ) -> Result<Self> {
        let cfg = Self {
            dim,
            feature_variance_range,
            noise_variance_range,
            true_weight_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        check_range("feature_variance_range", self.feature_variance_range)?;
        check_range("noise_variance_range", self.noise_variance_range)?;
        if !(self.true_weight_norm > 0.0 && self.true_weight_norm.is_finite()) {
            return Err(Error::invalid("true_weight_norm", "must be positive"));
        }
        Ok(())
    }
}

fn check_range(name: &'static str, (low, high): (f64, f64)) -> Result<()> {
    if !(low > 0.0 && low <= high && high.is_finite()) {
        return Err(Error::invalid(
            name,
            format!("need 0 < low <= high, got ({low}, {high})"),
        ));
    }
    Ok(())
}

/// Draws `w*` uniformly on the sphere of radius `true_weight_norm`.
pub fn generate_true_weights<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> ModelVector {
    loop {
        let v: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            let scale = cfg.true_weight_norm / norm;
            return v.into_iter().map(|x| x * scale).collect::<Vec<_>>().into();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientDataProfile {
    pub client_id: usize,
    /// ς_k², the per-coordinate feature variance.
    pub feature_variance: f64,
    /// σ_k², the observation-noise variance.
    pub noise_variance: f64,
}

pub fn draw_client_profiles<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    n_clients: usize,
    rng: &mut R,
) -> Vec<ClientDataProfile> {
    let (fl, fh) = cfg.feature_variance_range;
    let (nl, nh) = cfg.noise_variance_range;
    let features = Uniform::new_inclusive(fl, fh).expect("validated range");
    let noise = Uniform::new_inclusive(nl, nh).expect("validated range");
    (0..n_clients)
        .map(|client_id| ClientDataProfile {
            client_id,
            feature_variance: features.sample(rng),
            noise_variance: noise.sample(rng),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: ModelVector,
    pub target: f64,
}

impl Sample {
    pub fn new(features: impl Into<ModelVector>, target: f64) -> Self {
        Self {
            features: features.into(),
            target,
        }
    }

    /// Builds `y = w*ᵀx + ν` from explicit features and noise.
    pub fn synthesize(w_star: &[f64], features: impl Into<ModelVector>, noise: f64) -> Self {
        let features = features.into();
        let target = dot(w_star, &features) + noise;
        Self { features, target }
    }
}

pub fn next_sample<R: Rng + ?Sized>(
    profile: &ClientDataProfile,
    w_star: &[f64],
    rng: &mut R,
) -> Sample {
    let mut features = ModelVector::zeros(w_star.len());
    let target = next_sample_into(profile, w_star, rng, &mut features);
    Sample { features, target }
}

/// Allocation-free variant of [`next_sample`]: fills `features` and returns
/// the target.
pub fn next_sample_into<R: Rng + ?Sized>(
    profile: &ClientDataProfile,
    w_star: &[f64],
    rng: &mut R,
    features: &mut [f64],
) -> f64 {
    let sx = profile.feature_variance.sqrt();
    for x in features.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = sx * z;
    }
    let z: f64 = rng.sample(StandardNormal);
    dot(w_star, features) + profile.noise_variance.sqrt() * z
}

/// Supplies training samples on demand, one client at a time.
pub trait SampleSource {
    fn dim(&self) -> usize;
    fn next_sample(&mut self, client: usize) -> Sample;
}

/// Independent per-client synthetic streams. Each client owns its random
/// source, so the k-th sample a client draws does not depend on when other
/// clients were scheduled.
pub struct SyntheticStreams<R> {
    w_star: ModelVector,
    profiles: Vec<ClientDataProfile>,
    rngs: Vec<R>,
}

impl<R: Rng> SyntheticStreams<R> {
    pub fn new(w_star: ModelVector, profiles: Vec<ClientDataProfile>, rngs: Vec<R>) -> Self {
        assert_eq!(profiles.len(), rngs.len(), "one random source per client");
        Self {
            w_star,
            profiles,
            rngs,
        }
    }
}

impl<R: Rng> SampleSource for SyntheticStreams<R> {
    fn dim(&self) -> usize {
        self.w_star.dim()
    }

    fn next_sample(&mut self, client: usize) -> Sample {
        next_sample(&self.profiles[client], &self.w_star, &mut self.rngs[client])
    }
}

// ---------------------------------------------------------------------------
// Real data

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RealDatasetConfig {
    pub csv_path: PathBuf,
    pub n_clients: usize,
    pub n_train: usize,
    pub n_calib: usize,
    pub n_test: usize,
    pub dirichlet_alpha: f64,
    pub n_quantile_bins: usize,
    pub target_column: String,
    /// Fall back to sampling with replacement once a client exhausts a bin.
    pub allow_replacement: bool,
}

impl Default for RealDatasetConfig {
    fn default() -> Self {
        Self {
            csv_path: PathBuf::from("data/superconductivity.csv"),
            n_clients: 100,
            n_train: 1000,
            n_calib: 1000,
            n_test: 1000,
            dirichlet_alpha: 0.5,
            n_quantile_bins: 10,
            target_column: "critical_temp".to_string(),
            allow_replacement: true,
        }
    }
}

impl RealDatasetConfig {
    pub fn samples_per_client(&self) -> usize {
        self.n_train + self.n_calib + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::invalid("n_clients", "must be at least 1"));
        }
        if self.samples_per_client() == 0 {
            return Err(Error::invalid("samples_per_client", "split sizes sum to zero"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::invalid("dirichlet_alpha", "must be positive"));
        }
        if self.n_quantile_bins < 2 {
            return Err(Error::invalid("n_quantile_bins", "must be at least 2"));
        }
        Ok(())
    }
}

/// A standardized feature matrix with its (standardized) target.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub rows: Vec<ModelVector>,
    pub targets: Vec<f64>,
    /// Mean and population standard deviation of the raw target, for mapping
    /// interval widths back to original units.
    pub target_mean: f64,
    pub target_std: f64,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn sample(&self, row: usize) -> Sample {
        Sample {
            features: self.rows[row].clone(),
            target: self.targets[row],
        }
    }
}

pub fn load_uci_dataset(cfg: &RealDatasetConfig) -> Result<Dataset> {
    let file = std::fs::File::open(&cfg.csv_path).map_err(|e| Error::io(&cfg.csv_path, e))?;
    read_csv_dataset(file, &cfg.csv_path, &cfg.target_column)
}

/// Parses a headered numeric CSV, splits off `target_column` and standardizes
/// every remaining column and the target to zero mean and unit variance.
pub fn read_csv_dataset<R: Read>(reader: R, path: &Path, target_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let target_idx = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| {
            Error::invalid(
                "target_column",
                format!("column `{target_column}` not found in {}", path.display()),
            )
        })?;
    if header.len() < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: header.len(),
            reason: "need at least one feature column besides the target".into(),
        });
    }

    let n_cols = header.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n_cols];
    for (i, record) in rdr.records().enumerate() {
        // Row numbers are 1-based and count the header line.
        let row = i + 2;
        let record = record.map_err(csv_err)?;
        if record.len() != n_cols {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                column: record.len().min(n_cols) + 1,
                reason: format!("expected {n_cols} fields, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                column: c + 1,
                reason: format!("non-numeric cell `{cell}` in `{}`", header[c]),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: c + 1,
                    reason: format!("non-finite cell `{cell}`"),
                });
            }
            columns[c].push(value);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::Empty("dataset has no data rows"));
    }

    let mut target = columns.remove(target_idx);
    let mut feature_names = header;
    feature_names.remove(target_idx);

    let (target_mean, target_std) = standardize(&mut target);
    for col in &mut columns {
        standardize(col);
    }
    let n_rows = target.len();
    let rows = (0..n_rows)
        .map(|r| columns.iter().map(|c| c[r]).collect::<Vec<_>>().into())
        .collect();
    Ok(Dataset {
        feature_names,
        rows,
        targets: target,
        target_mean,
        target_std,
    })
}

/// Standardizes in place using the population variance and returns the
/// original `(mean, std)`. A constant column is centred and left at zero.
pub fn standardize(values: &mut [f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if std > 0.0 {
            *v /= std;
        }
    }
    (mean, std)
}

/// Least-squares fit `argmin_w Σ (y − wᵀx)²` via the normal equations, used as
/// the reference model for real data where no ground truth exists.
pub fn least_squares(dataset: &Dataset) -> Result<ModelVector> {
    let d = dataset.dim();
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for (x, &y) in dataset.rows.iter().zip(&dataset.targets) {
        for i in 0..d {
            rhs[i] += x[i] * y;
            for j in 0..=i {
                gram[i * d + j] += x[i] * x[j];
            }
        }
    }
    // Tiny ridge keeps the factorization defined for collinear columns.
    let ridge = 1e-10 * dataset.len() as f64;
    for i in 0..d {
        gram[i * d + i] += ridge;
    }
    // Cholesky on the lower triangle.
    for j in 0..d {
        let mut diag = gram[j * d + j];
        for k in 0..j {
            diag -= gram[j * d + k] * gram[j * d + k];
        }
        if diag <= 0.0 {
            return Err(Error::invalid("dataset", "normal equations are not positive definite"));
        }
        let diag = diag.sqrt();
        gram[j * d + j] = diag;
        for i in (j + 1)..d {
            let mut s = gram[i * d + j];
            for k in 0..j {
                s -= gram[i * d + k] * gram[j * d + k];
            }
            gram[i * d + j] = s / diag;
        }
    }
    let mut z = rhs;
    for i in 0..d {
        for k in 0..i {
            z[i] -= gram[i * d + k] * z[k];
        }
        z[i] /= gram[i * d + i];
    }
    for i in (0..d).rev() {
        for k in (i + 1)..d {
            z[i] -= gram[k * d + i] * z[k];
        }
        z[i] /= gram[i * d + i];
    }
    Ok(z.into())
}

/// Per-client row assignment produced by [`partition_non_iid`].
#[derive(Debug, Clone)]
pub struct Partition {
    /// Row indices of each equal-frequency target bin.
    pub bins: Vec<Vec<usize>>,
    /// Each client's Dirichlet mixing proportions over bins.
    pub proportions: Vec<Vec<f64>>,
    /// Each client's `samples_per_client` row indices, in draw order.
    pub clients: Vec<Vec<usize>>,
}

/// Symmetric Dirichlet draw via normalized Gamma(alpha, 1) variates.
pub fn dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // For very small alpha every variate can underflow; redraw.
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Equal-frequency binning of `targets`: rows are ranked by target (ties by
/// row index) and rank `r` goes to bin `r · n_bins / n`.
pub fn equal_frequency_bins(targets: &[f64], n_bins: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]).then(a.cmp(&b)));
    let n = targets.len();
    let mut bins = vec![Vec::new(); n_bins];
    for (rank, row) in order.into_iter().enumerate() {
        bins[rank * n_bins / n].push(row);
    }
    bins
}

pub fn partition_non_iid<R: Rng + ?Sized>(
    targets: &[f64],
    cfg: &RealDatasetConfig,
    rng: &mut R,
) -> Result<Partition> {
    cfg.validate()?;
    if cfg.n_quantile_bins > targets.len() {
        return Err(Error::invalid(
            "n_quantile_bins",
            format!("{} bins for {} rows", cfg.n_quantile_bins, targets.len()),
        ));
    }
    let bins = equal_frequency_bins(targets, cfg.n_quantile_bins);
    let per_client = cfg.samples_per_client();
    let mut proportions = Vec::with_capacity(cfg.n_clients);
    let mut clients = Vec::with_capacity(cfg.n_clients);
    for _ in 0..cfg.n_clients {
        let p = dirichlet(cfg.dirichlet_alpha, cfg.n_quantile_bins, rng);
        let chooser = rand::distr::weighted::WeightedIndex::new(&p)
            .map_err(|e| Error::invalid("dirichlet_alpha", e.to_string()))?;
        // Each client walks its own shuffled copy of every bin it touches:
        // without replacement until the bin runs out, then with replacement.
        let mut shuffled: Vec<Option<Vec<usize>>> = vec![None; bins.len()];
        let mut used = vec![0usize; bins.len()];
        let mut rows = Vec::with_capacity(per_client);
        for _ in 0..per_client {
            let b = chooser.sample(rng);
            let order = shuffled[b].get_or_insert_with(|| {
                let mut v = bins[b].clone();
                v.shuffle(rng);
                v
            });
            let row = if used[b] < order.len() {
                order[used[b]]
            } else if cfg.allow_replacement {
                order[rng.random_range(0..order.len())]
            } else {
                return Err(Error::BinExhausted {
                    bin: b,
                    size: order.len(),
                });
            };
            used[b] += 1;
            rows.push(row);
        }
        proportions.push(p);
        clients.push(rows);
    }
    Ok(Partition {
        bins,
        proportions,
        clients,
    })
}

/// Training streams over a real dataset: each client cycles through its own
/// training rows.
pub struct IndexedStreams {
    dataset: Arc<Dataset>,
    rows: Vec<Vec<usize>>,
    cursor: Vec<usize>,
}

impl IndexedStreams {
    pub fn new(dataset: Arc<Dataset>, rows: Vec<Vec<usize>>) -> Self {
        let cursor = vec![0; rows.len()];
        Self {
            dataset,
            rows,
            cursor,
        }
    }
}

impl SampleSource for IndexedStreams {
    fn dim(&self) -> usize {
        self.dataset.dim()
    }

    fn next_sample(&mut self, client: usize) -> Sample {
        let rows = &self.rows[client];
        let row = rows[self.cursor[client] % rows.len()];
        self.cursor[client] += 1;
        self.dataset.sample(row)
    }
}
