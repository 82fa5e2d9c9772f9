//! Byzantine behaviour: Gaussian model poisoning on the training uplink and
//! adversarial score submission during calibration.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conformal::ScoreSet;
use crate::error::{Error, Result};
use crate::training::UplinkAttack;
use crate::vector::ModelVector;

/// Each Byzantine uplink fires with probability `p_a` and adds
/// `δ ~ N(0, σ_B² I_D)` before masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingAttackConfig {
    #[serde(rename = "p_a")]
    pub attack_probability: f64,
    #[serde(rename = "sigma_b2")]
    pub perturbation_variance: f64,
}

impl Default for TrainingAttackConfig {
    fn default() -> Self {
        Self {
            attack_probability: 0.25,
            perturbation_variance: 0.1,
        }
    }
}

impl TrainingAttackConfig {
    pub fn off() -> Self {
        Self {
            attack_probability: 0.0,
            perturbation_variance: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.attack_probability) {
            return Err(Error::invalid("train_attack.p_a", "must lie in [0, 1]"));
        }
        if !(self.perturbation_variance >= 0.0 && self.perturbation_variance.is_finite()) {
            return Err(Error::invalid("train_attack.sigma_b2", "must be nonnegative"));
        }
        Ok(())
    }
}

pub fn training_perturbation<R: Rng + ?Sized>(
    config: &TrainingAttackConfig,
    dim: usize,
    rng: &mut R,
) -> Option<ModelVector> {
    if !rng.random_bool(config.attack_probability) {
        return None;
    }
    let sd = config.perturbation_variance.sqrt();
    let delta: Vec<f64> = (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect();
    Some(delta.into())
}

impl UplinkAttack for TrainingAttackConfig {
    fn perturbation<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Option<ModelVector> {
        training_perturbation(self, dim, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibAttackKind {
    None,
    /// Report all-zero scores, deflating the quantile.
    Efficiency,
    /// Report `multiplier ×` the attacker's own mean score, inflating it.
    Coverage,
    /// Add `N(0, σ_C²)` noise, clamped at zero.
    Random,
}

impl CalibAttackKind {
    pub const ALL: [CalibAttackKind; 3] = [
        CalibAttackKind::Efficiency,
        CalibAttackKind::Coverage,
        CalibAttackKind::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CalibAttackKind::None => "none",
            CalibAttackKind::Efficiency => "efficiency",
            CalibAttackKind::Coverage => "coverage",
            CalibAttackKind::Random => "random",
        }
    }
}

impl std::fmt::Display for CalibAttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CalibAttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(CalibAttackKind::None),
            "efficiency" => Ok(CalibAttackKind::Efficiency),
            "coverage" => Ok(CalibAttackKind::Coverage),
            "random" => Ok(CalibAttackKind::Random),
            other => Err(Error::Config(format!("unknown calibration attack `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibAttackSpec {
    pub kind: CalibAttackKind,
    pub coverage_multiplier: f64,
    /// σ_C² for the random attack.
    pub random_variance: f64,
}

impl CalibAttackSpec {
    pub fn new(kind: CalibAttackKind) -> Self {
        Self {
            kind,
            coverage_multiplier: 10.0,
            random_variance: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coverage_multiplier > 1.0 && self.coverage_multiplier.is_finite()) {
            return Err(Error::invalid("calib_attack.multiplier", "must exceed 1"));
        }
        if !(self.random_variance >= 0.0 && self.random_variance.is_finite()) {
            return Err(Error::invalid("calib_attack.variance", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Replaces a client's honest scores with the attack's submission.
/// `benign_mean` is the attacker's own uncorrupted mean score, used by the
/// coverage attack.
pub fn corrupt_scores<R: Rng + ?Sized>(
    spec: &CalibAttackSpec,
    true_scores: &ScoreSet,
    benign_mean: f64,
    rng: &mut R,
) -> Result<ScoreSet> {
    spec.validate()?;
    true_scores.validate()?;
    let n = true_scores.len();
    let scores = match spec.kind {
        CalibAttackKind::None => true_scores.scores().to_vec(),
        CalibAttackKind::Efficiency => vec![0.0; n],
        CalibAttackKind::Coverage => {
            if !(benign_mean >= 0.0 && benign_mean.is_finite()) {
                return Err(Error::invalid("benign_mean", "must be a nonnegative number"));
            }
            vec![spec.coverage_multiplier * benign_mean; n]
        }
        CalibAttackKind::Random => {
            let sd = spec.random_variance.sqrt();
            true_scores
                .scores()
                .iter()
                .map(|&r| {
                    let z: f64 = rng.sample(StandardNormal);
                    (r + sd * z).max(0.0)
                })
                .collect()
        }
    };
    ScoreSet::new(true_scores.client_id, scores)
}
