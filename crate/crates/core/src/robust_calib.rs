//! Byzantine-robust calibration: each client summarizes its normalized scores
//! as a histogram on the simplex, the server scores clients by how far their
//! histograms sit from the rest and drops the most suspicious ones before
//! pooling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformal::ScoreSet;
use crate::error::{Error, Result};
use crate::par;
use crate::stats::median;
use crate::theory::{score_separation, SeparationCheck};
use crate::vector::euclidean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    boundaries: Vec<f64>,
    pub score_scale: f64,
}

impl HistogramSpec {
    /// `H` equal-width bins on `[0, 1]`, scores divided by `score_scale`.
    pub fn uniform(n_bins: usize, score_scale: f64) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::invalid("n_bins", format!("need at least 2 bins, got {n_bins}")));
        }
        let mut boundaries: Vec<f64> = (0..=n_bins).map(|h| h as f64 / n_bins as f64).collect();
        boundaries[n_bins] = 1.0;
        Self::with_boundaries(boundaries, score_scale)
    }

    pub fn with_boundaries(boundaries: Vec<f64>, score_scale: f64) -> Result<Self> {
        let spec = Self {
            boundaries,
            score_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.boundaries;
        if b.len() < 3 {
            return Err(Error::invalid("boundaries", "need at least 2 bins"));
        }
        if b[0] != 0.0 || b[b.len() - 1] != 1.0 {
            return Err(Error::invalid("boundaries", "must start at 0 and end at 1"));
        }
        if b.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("boundaries", "must be strictly increasing"));
        }
        if !(self.score_scale > 0.0 && self.score_scale.is_finite()) {
            return Err(Error::invalid(
                "score_scale",
                format!("must be positive and finite, got {}", self.score_scale),
            ));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn normalize(&self, score: f64) -> f64 {
        (score / self.score_scale).clamp(0.0, 1.0)
    }

    /// Bin of a normalized score: `[a_{h−1}, a_h)`, last bin closed at 1.
    pub fn bin_of(&self, normalized: f64) -> usize {
        let inner = &self.boundaries[1..self.boundaries.len() - 1];
        inner.partition_point(|&a| a <= normalized)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CharacterizationVector {
    pub mass: Vec<f64>,
}

impl CharacterizationVector {
    pub fn n_bins(&self) -> usize {
        self.mass.len()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        euclidean(&self.mass, &other.mass)
    }
}

pub fn characterize(scores: &ScoreSet, spec: &HistogramSpec) -> Result<CharacterizationVector> {
    characterize_raw(scores.scores(), spec)
}

pub fn characterize_raw(scores: &[f64], spec: &HistogramSpec) -> Result<CharacterizationVector> {
    if scores.is_empty() {
        return Err(Error::Empty("cannot characterize an empty score set"));
    }
    let mut counts = vec![0usize; spec.n_bins()];
    for &r in scores {
        counts[spec.bin_of(spec.normalize(r))] += 1;
    }
    let n = scores.len() as f64;
    Ok(CharacterizationVector {
        mass: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Dense symmetric `K × K` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("distances", "matrix must be square"));
        }
        Ok(Self {
            n,
            data: rows.into_iter().flatten().collect(),
        })
    }
}

fn check_bins(vectors: &[CharacterizationVector]) -> Result<()> {
    if let Some(first) = vectors.first() {
        if let Some(v) = vectors.iter().find(|v| v.n_bins() != first.n_bins()) {
            return Err(Error::DimensionMismatch {
                expected: first.n_bins(),
                got: v.n_bins(),
            });
        }
    }
    Ok(())
}

fn distance_row(vectors: &[CharacterizationVector], i: usize) -> Vec<f64> {
    vectors
        .iter()
        .enumerate()
        .map(|(j, v)| if i == j { 0.0 } else { vectors[i].distance(v) })
        .collect()
}

pub fn pairwise_distances(vectors: &[CharacterizationVector]) -> Result<DistanceMatrix> {
    check_bins(vectors)?;
    let rows = par::map_range(vectors.len(), |i| distance_row(vectors, i));
    DistanceMatrix::from_rows(rows)
}

pub fn pairwise_distances_seq(vectors: &[CharacterizationVector]) -> Result<DistanceMatrix> {
    check_bins(vectors)?;
    let rows = par::map_range_seq(vectors.len(), |i| distance_row(vectors, i));
    DistanceMatrix::from_rows(rows)
}

fn row_score(d: &DistanceMatrix, k: usize, take: usize) -> f64 {
    let mut off: Vec<f64> = d
        .row(k)
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &x)| x)
        .collect();
    off.sort_by(|a, b| b.total_cmp(a));
    off[..take].iter().sum()
}

fn check_kb(d: &DistanceMatrix, k_b: usize) -> Result<()> {
    let k = d.len();
    if k < 2 || k_b < 2 || k_b > k {
        return Err(Error::invalid(
            "k_b",
            format!("need 2 <= K_b <= K with K >= 2, got K_b={k_b}, K={k}"),
        ));
    }
    Ok(())
}

/// `m_k`: sum of the `K_b − 1` largest distances from client `k` to the others.
pub fn maliciousness_scores(d: &DistanceMatrix, k_b: usize) -> Result<Vec<f64>> {
    check_kb(d, k_b)?;
    Ok(par::map_range(d.len(), |k| row_score(d, k, k_b - 1)))
}

pub fn maliciousness_scores_seq(d: &DistanceMatrix, k_b: usize) -> Result<Vec<f64>> {
    check_kb(d, k_b)?;
    Ok(par::map_range_seq(d.len(), |k| row_score(d, k, k_b - 1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Ascending client indices kept for calibration.
    pub benign: Vec<usize>,
    /// Ascending client indices dropped.
    pub flagged: Vec<usize>,
    /// The statistic the decision was taken on, one per client.
    pub scores: Vec<f64>,
}

impl FilterOutcome {
    pub fn keep_all(scores: Vec<f64>) -> Self {
        Self {
            benign: (0..scores.len()).collect(),
            flagged: Vec::new(),
            scores,
        }
    }

    fn from_flags(flags: Vec<bool>, scores: Vec<f64>) -> Self {
        let (flagged, benign): (Vec<usize>, Vec<usize>) =
            (0..flags.len()).partition(|&k| flags[k]);
        Self {
            benign,
            flagged,
            scores,
        }
    }

    /// `(true positives, false positives)` against Byzantine labels.
    pub fn confusion(&self, is_byzantine: &[bool]) -> (usize, usize) {
        let tp = self.flagged.iter().filter(|&&k| is_byzantine[k]).count();
        (tp, self.flagged.len() - tp)
    }

    pub fn is_exact(&self, is_byzantine: &[bool]) -> bool {
        let n_byz = is_byzantine.iter().filter(|&&b| b).count();
        self.confusion(is_byzantine) == (n_byz, 0)
    }
}

pub fn filter_top_b(maliciousness: &[f64], b: usize) -> Result<FilterOutcome> {
    let k = maliciousness.len();
    if b >= k {
        return Err(Error::invalid("b", format!("need B < K, got B={b}, K={k}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| maliciousness[j].total_cmp(&maliciousness[i]).then(i.cmp(&j)));
    let mut flags = vec![false; k];
    for &i in &order[..b] {
        flags[i] = true;
    }
    Ok(FilterOutcome::from_flags(flags, maliciousness.to_vec()))
}

/// Flags clients whose histogram lies unusually far from the coordinate-wise
/// median histogram.
pub fn filter_mad(
    vectors: &[CharacterizationVector],
    scale: f64,
    threshold: f64,
) -> Result<FilterOutcome> {
    check_bins(vectors)?;
    if vectors.len() < 3 {
        return Err(Error::invalid("clients", format!("MAD filter needs at least 3, got {}", vectors.len())));
    }
    let center = CharacterizationVector {
        mass: (0..vectors[0].n_bins())
            .map(|h| median(&vectors.iter().map(|v| v.mass[h]).collect::<Vec<_>>()))
            .collect(),
    };
    let dists: Vec<f64> = vectors.iter().map(|v| v.distance(&center)).collect();
    filter_mad_distances(&dists, scale, threshold)
}

pub fn filter_mad_distances(dists: &[f64], scale: f64, threshold: f64) -> Result<FilterOutcome> {
    if dists.len() < 3 {
        return Err(Error::invalid("clients", format!("MAD filter needs at least 3, got {}", dists.len())));
    }
    let med = median(dists);
    let abs_dev: Vec<f64> = dists.iter().map(|d| (d - med).abs()).collect();
    let mad = median(&abs_dev);
    let cut = if mad < 1e-12 {
        med + 1e-9
    } else {
        med + threshold * scale * mad
    };
    let flags = dists.iter().map(|&d| d > cut).collect();
    Ok(FilterOutcome::from_flags(flags, dists.to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// `‖q̄ − p̄‖` between the Byzantine and benign mean histograms.
    pub delta: f64,
    pub r_benign: f64,
    pub r_byzantine: f64,
    pub min_cross: f64,
    pub max_within_benign: f64,
    pub check: Option<SeparationCheck>,
}

impl SeparationReport {
    pub fn condition_holds(&self) -> bool {
        self.check.is_some_and(|c| c.holds)
    }
}

fn mean_vector(vs: &[&CharacterizationVector]) -> Vec<f64> {
    let h = vs[0].n_bins();
    let mut m = vec![0.0; h];
    for v in vs {
        for (a, b) in m.iter_mut().zip(&v.mass) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= vs.len() as f64);
    m
}

pub fn separation_diagnostics(
    vectors: &[CharacterizationVector],
    is_byzantine: &[bool],
) -> Result<SeparationReport> {
    check_bins(vectors)?;
    if vectors.len() != is_byzantine.len() {
        return Err(Error::DimensionMismatch {
            expected: vectors.len(),
            got: is_byzantine.len(),
        });
    }
    let (byz, ben): (Vec<_>, Vec<_>) = vectors
        .iter()
        .zip(is_byzantine)
        .partition(|(_, &b)| b);
    let byz: Vec<&CharacterizationVector> = byz.into_iter().map(|(v, _)| v).collect();
    let ben: Vec<&CharacterizationVector> = ben.into_iter().map(|(v, _)| v).collect();
    if byz.is_empty() || ben.is_empty() {
        return Err(Error::Empty("separation needs both benign and Byzantine clients"));
    }
    let p_bar = mean_vector(&ben);
    let q_bar = mean_vector(&byz);
    let delta = euclidean(&p_bar, &q_bar);
    let radius = |vs: &[&CharacterizationVector], c: &[f64]| {
        vs.iter().map(|v| euclidean(&v.mass, c)).fold(0.0, f64::max)
    };
    let r_benign = radius(&ben, &p_bar);
    let r_byzantine = radius(&byz, &q_bar);
    let mut min_cross = f64::INFINITY;
    for a in &ben {
        for b in &byz {
            min_cross = min_cross.min(a.distance(b));
        }
    }
    let mut max_within_benign: f64 = 0.0;
    for (i, a) in ben.iter().enumerate() {
        for b in &ben[i + 1..] {
            max_within_benign = max_within_benign.max(a.distance(b));
        }
    }
    let check = score_separation(ben.len(), byz.len(), delta, r_byzantine, r_benign).ok();
    Ok(SeparationReport {
        delta,
        r_benign,
        r_byzantine,
        min_cross,
        max_within_benign,
        check,
    })
}

pub fn write_histograms_csv(
    path: &Path,
    vectors: &[CharacterizationVector],
    is_byzantine: &[bool],
) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let h = vectors.first().map_or(0, |v| v.n_bins());
    let mut header = vec!["client_id".to_string(), "is_byzantine".to_string()];
    header.extend((0..h).map(|i| format!("bin_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (k, (v, b)) in vectors.iter().zip(is_byzantine).enumerate() {
        let mut rec = vec![k.to_string(), b.to_string()];
        rec.extend(v.mass.iter().map(|m| m.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_maliciousness_csv(path: &Path, scores: &[f64], is_byzantine: &[bool]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["client_id", "is_byzantine", "maliciousness"])
        .map_err(csv_err)?;
    for (k, (m, b)) in scores.iter().zip(is_byzantine).enumerate() {
        w.write_record([k.to_string(), b.to_string(), m.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
