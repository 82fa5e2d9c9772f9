//! Closed-form bound calculators used to set empirical results against their
//! theoretical envelopes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constants that feed the bound calculators. Field names follow the usual
/// symbols; `l` is the local Lipschitz constant of the benign score CDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub f_min: f64,
    pub f_max: f64,
    pub l: f64,
    pub l_x: f64,
    pub trace_rk: f64,
    pub e_rms: f64,
    pub h: usize,
    pub k: usize,
    pub k_b: usize,
    pub b: usize,
    pub n_b: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub alpha: f64,
    pub delta: f64,
    pub r_a: f64,
    pub r_b: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            f_min: 1.0,
            f_max: 1.0,
            l: 1.0,
            l_x: 1.0,
            trace_rk: 1.0,
            e_rms: 0.0,
            h: 100,
            k: 100,
            k_b: 80,
            b: 20,
            n_b: 1000,
            epsilon: 0.0,
            beta: 0.05,
            alpha: 0.1,
            delta: 0.0,
            r_a: 0.0,
            r_b: 0.0,
        }
    }
}

fn density_prefactor(inp: &BoundInputs) -> Result<f64> {
    if !(inp.f_min > 0.0) {
        return Err(Error::invalid("f_min", format!("must be positive, got {}", inp.f_min)));
    }
    if !(inp.l > 0.0) {
        return Err(Error::invalid("l", format!("must be positive, got {}", inp.l)));
    }
    Ok(2.0 * (2.0 * inp.l).sqrt() / inp.f_min)
}

fn nonneg(name: &'static str, x: f64) -> Result<f64> {
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(Error::invalid(name, format!("must be nonnegative, got {x}")))
    }
}

/// `|q − q*| ≤ (2√(2L)/f_min)·√E|X − Y|`.
pub fn quantile_stability_bound(inp: &BoundInputs, expected_abs_gap: f64) -> Result<f64> {
    Ok(density_prefactor(inp)? * nonneg("gap", expected_abs_gap)?.sqrt())
}

/// Quantile deviation driven by model MSE: `(2√(2L)/f_min)·L_x^{1/2}·mse^{1/4}`.
pub fn quantile_mse_bound(inp: &BoundInputs, mse: f64) -> Result<f64> {
    Ok(density_prefactor(inp)? * inp.l_x.sqrt() * nonneg("mse", mse)?.powf(0.25))
}

/// Interval width deviation: `(4√(2L)/f_min)·tr(R_k)^{1/4}·mse^{1/4}`.
pub fn width_bound(inp: &BoundInputs, mse: f64) -> Result<f64> {
    if !(inp.trace_rk > 0.0) {
        return Err(Error::invalid("trace_rk", format!("must be positive, got {}", inp.trace_rk)));
    }
    let k_omega = 2.0 * density_prefactor(inp)? * inp.trace_rk.powf(0.25);
    Ok(k_omega * nonneg("mse", mse)?.powf(0.25))
}

/// Expected injected perturbation energy per opportunity, `β·p_a·M·σ_B²`.
pub fn attack_energy(byzantine: bool, p_a: f64, m: usize, sigma_b2: f64) -> f64 {
    if byzantine {
        p_a * m as f64 * sigma_b2
    } else {
        0.0
    }
}

pub const C_H: f64 = 1.732_050_807_568_877_2;

/// `C_drift = 2√(2(H+1))·f_max`.
pub fn drift_constant(inp: &BoundInputs) -> f64 {
    2.0 * (2.0 * (inp.h as f64 + 1.0)).sqrt() * inp.f_max
}

/// High-probability radius of benign histograms around their mean.
pub fn benign_radius(inp: &BoundInputs, delta: f64, n_min: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    if n_min == 0 {
        return Err(Error::invalid("n_min", "must be at least 1"));
    }
    if inp.h < 2 || inp.k_b == 0 {
        return Err(Error::invalid("h", "need H >= 2 and K_b >= 1"));
    }
    let log_term = (2.0 * inp.h as f64 * inp.k_b as f64 / delta).ln();
    let concentration = C_H * (log_term / n_min as f64).sqrt();
    Ok(concentration + drift_constant(inp) * inp.l_x * nonneg("e_rms", inp.e_rms)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationCheck {
    pub holds: bool,
    /// LHS − RHS of the separation inequality.
    pub slack: f64,
    pub gamma: f64,
    pub big_gamma: f64,
}

/// `(K_b−1)γ > BΓ + (K_b−1−B)·2r_b` with `γ = Δ − r_a − r_b`, `Γ = Δ + r_a + r_b`.
pub fn score_separation(k_b: usize, b: usize, delta: f64, r_a: f64, r_b: f64) -> Result<SeparationCheck> {
    if k_b < 2 || b + 1 >= k_b {
        return Err(Error::invalid("b", format!("need B < K_b − 1, got B={b}, K_b={k_b}")));
    }
    let gamma = delta - r_a - r_b;
    let big_gamma = delta + r_a + r_b;
    let kb1 = (k_b - 1) as f64;
    let lhs = kb1 * gamma;
    let rhs = b as f64 * big_gamma + (kb1 - b as f64) * 2.0 * r_b;
    Ok(SeparationCheck {
        holds: lhs > rhs,
        slack: lhs - rhs,
        gamma,
        big_gamma,
    })
}

pub fn score_separation_holds(inp: &BoundInputs) -> Result<SeparationCheck> {
    score_separation(inp.k_b, inp.b, inp.delta, inp.r_a, inp.r_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageBounds {
    pub delta_l: f64,
    pub delta_u: f64,
    pub tau: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CoverageBounds {
    pub fn contains(&self, coverage: f64) -> bool {
        self.lower <= coverage && coverage <= self.upper
    }
}

/// Certified coverage interval `[1−α−δ_L, 1−α+δ_U]` after filtering.
pub fn coverage_bounds(inp: &BoundInputs) -> Result<CoverageBounds> {
    if !(inp.beta > 0.0 && inp.beta < 1.0) {
        return Err(Error::invalid("beta", format!("must lie in (0, 1), got {}", inp.beta)));
    }
    if !(0.0..=1.0).contains(&inp.epsilon) {
        return Err(Error::invalid("epsilon", format!("must lie in [0, 1], got {}", inp.epsilon)));
    }
    if inp.n_b == 0 || inp.k_b == 0 || inp.k_b > inp.k {
        return Err(Error::invalid("k_b", "need n_b >= 1 and 1 <= K_b <= K"));
    }
    let tau = (inp.k - inp.k_b) as f64 / inp.k_b as f64;
    if tau >= 1.0 {
        return Err(Error::invalid("tau", format!("need (K − K_b)/K_b < 1, got {tau}")));
    }
    let (h, k_b, n_b) = (inp.h as f64, inp.k_b as f64, inp.n_b as f64);
    let z = inverse_normal_cdf(1.0 - inp.beta / (2.0 * h * k_b))?;
    let spread = h * z / (2.0 * n_b.sqrt()) * (1.0 + tau) / (1.0 - tau);
    let delta_l = (inp.epsilon * n_b + 1.0) / (n_b + k_b) + spread;
    let delta_u = inp.epsilon + k_b / (n_b + k_b) + spread;
    Ok(CoverageBounds {
        delta_l,
        delta_u,
        tau,
        lower: 1.0 - inp.alpha - delta_l,
        upper: 1.0 - inp.alpha + delta_u,
    })
}

/// Standard normal quantile, Wichura's AS241 (PPND16).
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("p", format!("must lie in (0, 1), got {p}")));
    }
    let poly = |c: &[f64], x: f64| c.iter().rev().fold(0.0, |acc, &a| acc * x + a);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        const A: [f64; 8] = [
            3.387_132_872_796_366_6,
            1.331_416_678_917_843_8e2,
            1.971_590_950_306_551_3e3,
            1.373_169_376_550_946e4,
            4.592_195_393_154_987e4,
            6.726_577_092_700_87e4,
            3.343_057_558_358_813e4,
            2.509_080_928_730_122_7e3,
        ];
        const B: [f64; 8] = [
            1.0,
            4.231_333_070_160_091e1,
            6.871_870_074_920_579e2,
            5.394_196_021_424_751e3,
            2.121_379_430_158_659_7e4,
            3.930_789_580_009_271e4,
            2.872_908_573_572_194_3e4,
            5.226_495_278_852_854e3,
        ];
        return Ok(q * poly(&A, r) / poly(&B, r));
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let z = if r <= 5.0 {
        r -= 1.6;
        const C: [f64; 8] = [
            1.423_437_110_749_683_6,
            4.630_337_846_156_545,
            5.769_497_221_460_691,
            3.647_848_324_763_204_5,
            1.270_458_252_452_368_4,
            2.417_807_251_774_506e-1,
            2.272_384_498_926_918_4e-2,
            7.745_450_142_783_414e-4,
        ];
        const D: [f64; 8] = [
            1.0,
            2.053_191_626_637_759,
            1.676_384_830_183_803_8,
            6.897_673_349_851e-1,
            1.481_039_764_274_800_8e-1,
            1.519_866_656_361_645_7e-2,
            5.475_938_084_995_345e-4,
            1.050_750_071_644_416_8e-9,
        ];
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        const E: [f64; 8] = [
            6.657_904_643_501_103,
            5.463_784_911_164_114,
            1.784_826_539_917_291_3,
            2.965_605_718_285_049e-1,
            2.653_218_952_657_612_4e-2,
            1.242_660_947_388_078_4e-3,
            2.711_555_568_743_487_6e-5,
            2.010_334_399_292_288e-7,
        ];
        const F: [f64; 8] = [
            1.0,
            5.998_322_065_558_879e-1,
            1.369_298_809_227_358e-1,
            1.487_536_129_085_061_5e-2,
            7.868_691_311_456_133e-4,
            1.846_318_317_510_054_8e-5,
            1.421_511_758_316_446e-7,
            2.044_263_103_389_939_7e-15,
        ];
        poly(&E, r) / poly(&F, r)
    };
    Ok(if q < 0.0 { -z } else { z })
}

/// Law of `|ν|` when the noise is a uniform mixture of `N(0, σ_k²)`: the
/// benign score distribution under the true model.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfNormalMixture {
    pub sigmas: Vec<f64>,
}

impl HalfNormalMixture {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::Empty("mixture needs at least one component"));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid("sigma", format!("must be positive, got {s}")));
        }
        Ok(Self { sigmas })
    }

    pub fn density(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let norm = (2.0 / std::f64::consts::PI).sqrt();
        self.sigmas
            .iter()
            .map(|s| norm / s * (-0.5 * (t / s).powi(2)).exp())
            .sum::<f64>()
            / self.sigmas.len() as f64
    }

    /// `(f_min, L, f_max)` on the window `[q*/2, 3q*/2]`; the density is
    /// decreasing on `[0, ∞)`, so the extremes sit at the window ends and
    /// the global maximum at zero.
    pub fn density_constants(&self, q_star: f64) -> (f64, f64, f64) {
        (
            self.density(1.5 * q_star),
            self.density(0.5 * q_star),
            self.density(0.0),
        )
    }
}

/// Finite-difference density estimates from an empirical CDF, for data whose
/// score law is unknown. The window `[center − half_width, center + half_width]`
/// is cut into `n_cells` equal cells; returns `(min, max)` cell density.
pub fn empirical_density_range(
    scores: &[f64],
    center: f64,
    half_width: f64,
    n_cells: usize,
) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("density estimate needs scores"));
    }
    if !(half_width > 0.0) || n_cells == 0 {
        return Err(Error::invalid("half_width", "need a positive window and at least one cell"));
    }
    let lo = (center - half_width).max(0.0);
    let width = (center + half_width - lo) / n_cells as f64;
    let mut counts = vec![0usize; n_cells];
    for &s in scores {
        if s >= lo && s < lo + width * n_cells as f64 {
            counts[(((s - lo) / width) as usize).min(n_cells - 1)] += 1;
        }
    }
    let n = scores.len() as f64;
    let dens = counts.iter().map(|&c| c as f64 / (n * width));
    Ok(dens.fold((f64::INFINITY, 0.0), |(a, b), d| (a.min(d), b.max(d))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn unit() -> BoundInputs {
        BoundInputs::default()
    }

    #[test]
    fn stability_examples() {
        let inp = unit();
        assert_eq!(quantile_stability_bound(&inp, 0.0).unwrap(), 0.0);
        assert!((quantile_stability_bound(&inp, 1.0).unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let a = quantile_stability_bound(&inp, 0.3).unwrap();
        let b = quantile_stability_bound(&inp, 1.2).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        let bad = BoundInputs { f_min: 0.0, ..unit() };
        assert!(quantile_stability_bound(&bad, 1.0).is_err());
    }

    #[test]
    fn mse_and_width_examples() {
        let inp = unit();
        assert_eq!(quantile_mse_bound(&inp, 0.0).unwrap(), 0.0);
        assert!((quantile_mse_bound(&inp, 1.0).unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let a = quantile_mse_bound(&inp, 0.01).unwrap();
        assert!((quantile_mse_bound(&inp, 0.16).unwrap() - 2.0 * a).abs() < 1e-12);

        let w = BoundInputs { trace_rk: 16.0, ..unit() };
        assert!((width_bound(&w, 1.0).unwrap() - 8.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(width_bound(&w, 0.0).unwrap(), 0.0);

        let tied = BoundInputs { l_x: 1.7, trace_rk: 1.7f64.powi(2), f_min: 0.4, l: 2.2, ..unit() };
        let ratio = width_bound(&tied, 0.03).unwrap() / quantile_mse_bound(&tied, 0.03).unwrap();
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attack_energy_examples() {
        assert_eq!(attack_energy(false, 0.25, 15, 0.1), 0.0);
        assert!((attack_energy(true, 0.25, 15, 0.1) - 0.375).abs() < 1e-15);
        let r = attack_energy(true, 0.25, 15, 0.1) / attack_energy(true, 0.25, 50, 0.1);
        assert!((r - 0.3).abs() < 1e-15);
    }

    #[test]
    fn benign_radius_examples() {
        let inp = unit();
        let r = benign_radius(&inp, 0.05, 1000).unwrap();
        assert!((r - 0.195_008_278_860_995_3).abs() < 1e-12, "{r}");
        let r4 = benign_radius(&inp, 0.05, 4000).unwrap();
        assert!((r4 - r / 2.0).abs() < 1e-12);
        assert!(benign_radius(&inp, 0.0, 1000).is_err());
        assert!(benign_radius(&inp, 1.0, 1000).is_err());
        let drift = BoundInputs { e_rms: 0.01, f_max: 2.0, l_x: 3.0, ..unit() };
        let extra = benign_radius(&drift, 0.05, 1000).unwrap() - r;
        assert!((extra - 2.0 * (202f64).sqrt() * 2.0 * 3.0 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn separation_examples() {
        let c = score_separation(80, 20, 1.0, 0.1, 0.1).unwrap();
        assert!(c.holds);
        assert!((c.slack - 27.4).abs() < 1e-9);
        assert!(score_separation(80, 20, 1.0, 0.0, 0.0).unwrap().holds);
        assert!(!score_separation(80, 20, 0.0, 0.1, 0.1).unwrap().holds);
        assert!(score_separation(10, 9, 1.0, 0.0, 0.0).is_err());
        assert!(score_separation(10, 8, 1.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn coverage_bound_examples() {
        let inp = BoundInputs { h: 2, k: 80, n_b: 100_000_000, ..unit() };
        let c = coverage_bounds(&inp).unwrap();
        assert_eq!(c.tau, 0.0);
        assert!(c.delta_l < 1e-3, "{}", c.delta_l);

        let inp = unit();
        let c = coverage_bounds(&inp).unwrap();
        let z = Normal::standard().inverse_cdf(1.0 - 0.05 / (2.0 * 100.0 * 80.0));
        let spread = 100.0 * z / (2.0 * 1000f64.sqrt()) * 1.25 / 0.75;
        assert!((c.delta_l - (1.0 / 1080.0 + spread)).abs() < 1e-9);
        assert!((c.delta_u - (80.0 / 1080.0 + spread)).abs() < 1e-9);

        assert!(coverage_bounds(&BoundInputs { k_b: 50, ..unit() }).is_err());
        assert!(coverage_bounds(&BoundInputs { beta: 0.0, ..unit() }).is_err());
    }

    #[test]
    fn inverse_normal_examples() {
        assert_eq!(inverse_normal_cdf(0.5).unwrap(), 0.0);
        assert!((inverse_normal_cdf(0.975).unwrap() - 1.959_964).abs() < 1e-6);
        assert!(inverse_normal_cdf(0.0).is_err());
        assert!(inverse_normal_cdf(1.0).is_err());
    }

    #[test]
    fn inverse_normal_matches_reference() {
        let n = Normal::standard();
        for &p in &[1e-300, 1e-20, 1e-10, 1e-5, 0.001, 0.02, 0.075, 0.3, 0.5, 0.6, 0.9, 0.999, 1.0 - 1e-12] {
            let z = inverse_normal_cdf(p).unwrap();
            assert!((n.cdf(z) - p).abs() < 1e-9 * p.max(1e-3), "p={p}");
            assert!((z - n.inverse_cdf(p)).abs() < 1e-8 * (1.0 + z.abs()), "p={p}");
        }
    }

    #[test]
    fn half_normal_constants() {
        let m = HalfNormalMixture::new(vec![1.0]).unwrap();
        assert!((m.density(0.0) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        let (f_min, l, f_max) = m.density_constants(1.0);
        assert!(f_min < l && l < f_max);
        assert!(HalfNormalMixture::new(vec![]).is_err());
        // Riemann sum of the density integrates to one.
        let m = HalfNormalMixture::new(vec![0.1, 0.2]).unwrap();
        let step = 1e-4;
        let total: f64 = (0..20_000).map(|i| m.density((i as f64 + 0.5) * step) * step).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empirical_density_of_uniform() {
        let scores: Vec<f64> = (0..100_000).map(|i| i as f64 / 100_000.0).collect();
        let (lo, hi) = empirical_density_range(&scores, 0.5, 0.2, 8).unwrap();
        assert!((lo - 1.0).abs() < 1e-2 && (hi - 1.0).abs() < 1e-2);
    }

    proptest! {
        #[test]
        fn inverse_normal_antisymmetric(p in 1e-12f64..0.5) {
            let a = inverse_normal_cdf(p).unwrap();
            let b = inverse_normal_cdf(1.0 - p).unwrap();
            prop_assert!((a + b).abs() < 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn coverage_gap_identity(eps in 0.0f64..1.0, n_b in 1usize..5000, k_b in 51usize..100) {
            let inp = BoundInputs { epsilon: eps, n_b, k_b, ..unit() };
            let c = coverage_bounds(&inp).unwrap();
            let (nb, kb) = (n_b as f64, k_b as f64);
            let want = eps + (kb - 1.0 - eps * nb) / (nb + kb);
            prop_assert!((c.delta_u - c.delta_l - want).abs() < 1e-9);
        }

        #[test]
        fn coverage_bounds_monotone_in_epsilon(e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let a = coverage_bounds(&BoundInputs { epsilon: lo, ..unit() }).unwrap();
            let b = coverage_bounds(&BoundInputs { epsilon: hi, ..unit() }).unwrap();
            prop_assert!(a.delta_l <= b.delta_l && a.delta_u <= b.delta_u);
        }

        #[test]
        fn mse_bound_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantile_mse_bound(&unit(), lo).unwrap() <= quantile_mse_bound(&unit(), hi).unwrap());
        }
    }
}
