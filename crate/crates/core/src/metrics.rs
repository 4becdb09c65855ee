//! Ensemble statistics: SNR of normalized OTOC series, bootstrap bands,
//! required-bond-dimension interpolation, scaling predictions and fits.

use crate::circuits::{Orientation, C_1D, C_D, C_H};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::collections::BTreeSet;
use thiserror::Error;

/// Reported SNR ceiling; identical series map here instead of infinity.
pub const SNR_CAP: f64 = 1e8;
pub const DEFAULT_BOOTSTRAP_BATCHES: usize = 100;
pub const DEFAULT_BOOTSTRAP_BATCH_SIZE: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{0} series has zero variance")]
    ZeroVariance(&'static str),
    #[error("non-finite value in {0} series")]
    NonFinite(&'static str),
    #[error("batch size {s} exceeds ensemble size {m}")]
    BatchTooLarge { s: usize, m: usize },
    #[error("every bootstrap resample was degenerate")]
    NoValidResamples,
    #[error("target SNR {target} is not crossed upward on the grid (range {min}..{max})")]
    NoCrossing { target: f64, min: f64, max: f64 },
    #[error("grid must be strictly increasing in D")]
    UnsortedGrid,
    #[error("log fit requires positive data")]
    NonPositive,
    #[error("speed {v} is not below the geometric speed {c}")]
    SpeedExceeded { v: f64, c: f64 },
    #[error("invalid prediction parameters: {0}")]
    InvalidPrediction(&'static str),
    #[error("duplicate instance index {0}")]
    DuplicateInstance(usize),
}

/// Which moments standardize the approximate series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Each series by its own sample mean and sample std.
    #[default]
    OwnMoments,
    /// Both series by the exact series' sample mean and sample std.
    ExactMoments,
}

/// Sample mean and sample standard deviation (m − 1 denominator).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

fn check_series(exact: &[f64], approx: &[f64]) -> Result<(), MetricsError> {
    if exact.len() != approx.len() {
        return Err(MetricsError::LengthMismatch(exact.len(), approx.len()));
    }
    if exact.len() < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: exact.len() });
    }
    if exact.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite("exact"));
    }
    if approx.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite("approx"));
    }
    Ok(())
}

fn standardized(xs: &[f64], mean: f64, std: f64) -> impl Iterator<Item = f64> + '_ {
    xs.iter().map(move |x| (x - mean) / std)
}

/// Signal-to-noise ratio with each series standardized by its own moments.
pub fn snr(exact: &[f64], approx: &[f64]) -> Result<f64, MetricsError> {
    snr_with(exact, approx, Normalization::OwnMoments)
}

/// Inverse RMS difference of the standardized series, capped at [`SNR_CAP`].
pub fn snr_with(exact: &[f64], approx: &[f64], norm: Normalization) -> Result<f64, MetricsError> {
    check_series(exact, approx)?;
    let (me, se) = mean_std(exact);
    // Relative threshold so a constant series with rounding noise still counts as degenerate.
    let tiny = |s: f64, xs: &[f64]| s <= 1e-14 * xs.iter().fold(1e-300f64, |a, x| a.max(x.abs()));
    if tiny(se, exact) {
        return Err(MetricsError::ZeroVariance("exact"));
    }
    let (ma, sa) = match norm {
        Normalization::OwnMoments => {
            let (ma, sa) = mean_std(approx);
            if tiny(sa, approx) {
                return Err(MetricsError::ZeroVariance("approx"));
            }
            (ma, sa)
        }
        Normalization::ExactMoments => (me, se),
    };
    let m = exact.len() as f64;
    let msd = standardized(exact, me, se).zip(standardized(approx, ma, sa)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m;
    if msd <= 1.0 / (SNR_CAP * SNR_CAP) {
        return Ok(SNR_CAP);
    }
    Ok((1.0 / msd.sqrt()).min(SNR_CAP))
}

/// Mean SNR of `m` instances when the approximation carries no signal:
/// √m·Γ((m−2)/2) / (2·Γ((m−1)/2)), the inverse-χ_{m−1} mean, which is
/// ≈0.725 at m = 50 and tends to 1/√2.
pub fn snr_uncorrelated_baseline(m: usize) -> Result<f64, MetricsError> {
    if m < 3 {
        return Err(MetricsError::TooFewSamples { needed: 3, got: m });
    }
    let mf = m as f64;
    Ok((0.5 * mf.ln() + ln_gamma((mf - 2.0) / 2.0) - ln_gamma((mf - 1.0) / 2.0)).exp() / 2.0)
}

/// One instance's outcome for a given method and truncation setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance: usize,
    pub exact: f64,
    pub approx: f64,
    pub method: String,
    pub d: Option<usize>,
    pub chi: Option<usize>,
    pub runtime_s: f64,
    pub discarded_weight: f64,
    pub fidelity: Option<f64>,
}

/// Aligned exact/approximate values over an ensemble.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResults {
    pub spec_hash: String,
    pub records: Vec<InstanceRecord>,
}

impl EnsembleResults {
    pub fn new(spec_hash: impl Into<String>, records: Vec<InstanceRecord>) -> Result<Self, MetricsError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.instance) {
                return Err(MetricsError::DuplicateInstance(r.instance));
            }
        }
        Ok(Self { spec_hash: spec_hash.into(), records })
    }

    /// Builds records from bare value pairs, indexed in order.
    pub fn from_values(exact: &[f64], approx: &[f64]) -> Result<Self, MetricsError> {
        if exact.len() != approx.len() {
            return Err(MetricsError::LengthMismatch(exact.len(), approx.len()));
        }
        let records = exact
            .iter()
            .zip(approx)
            .enumerate()
            .map(|(i, (&e, &a))| InstanceRecord {
                instance: i,
                exact: e,
                approx: a,
                method: String::new(),
                d: None,
                chi: None,
                runtime_s: 0.0,
                discarded_weight: 0.0,
                fidelity: None,
            })
            .collect();
        Self::new("", records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn exact(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.exact).collect()
    }

    pub fn approx(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.approx).collect()
    }

    pub fn snr(&self) -> Result<f64, MetricsError> {
        snr(&self.exact(), &self.approx())
    }

    /// Mean of 1 − fidelity over records that carry a fidelity.
    pub fn mean_infidelity(&self) -> Option<f64> {
        let f: Vec<f64> = self.records.iter().filter_map(|r| r.fidelity).collect();
        (!f.is_empty()).then(|| f.iter().map(|x| 1.0 - x).sum::<f64>() / f.len() as f64)
    }

    pub fn mean_abs_error(&self) -> f64 {
        self.records.iter().map(|r| (r.exact - r.approx).abs()).sum::<f64>() / self.records.len().max(1) as f64
    }
}

/// Bootstrap SNR statistics over resamples drawn with replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapSnr {
    pub mean: f64,
    pub std: f64,
    pub samples: Vec<f64>,
    /// Resamples dropped because a series had zero variance.
    pub skipped: usize,
}

impl BootstrapSnr {
    /// Closed band mean ± k·std.
    pub fn band(&self, k: f64) -> (f64, f64) {
        (self.mean - k * self.std, self.mean + k * self.std)
    }

    pub fn overlaps(&self, other: &BootstrapSnr, k: f64) -> bool {
        let (a0, a1) = self.band(k);
        let (b0, b1) = other.band(k);
        a0 <= b1 && b0 <= a1
    }
}

pub fn bootstrap_snr(results: &EnsembleResults, batches: usize, batch_size: usize, seed: u64) -> Result<BootstrapSnr, MetricsError> {
    let exact = results.exact();
    let approx = results.approx();
    check_series(&exact, &approx)?;
    let m = exact.len();
    if batch_size > m {
        return Err(MetricsError::BatchTooLarge { s: batch_size, m });
    }
    if batch_size < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: batch_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(batches);
    let mut skipped = 0;
    let mut e = vec![0.0; batch_size];
    let mut a = vec![0.0; batch_size];
    for _ in 0..batches {
        for j in 0..batch_size {
            let i = rng.random_range(0..m);
            e[j] = exact[i];
            a[j] = approx[i];
        }
        match snr(&e, &a) {
            Ok(v) => samples.push(v),
            Err(MetricsError::ZeroVariance(_)) => skipped += 1,
            Err(err) => return Err(err),
        }
    }
    if samples.is_empty() {
        return Err(MetricsError::NoValidResamples);
    }
    let (mean, std) = if samples.len() > 1 { mean_std(&samples) } else { (samples[0], 0.0) };
    Ok(BootstrapSnr { mean, std, samples, skipped })
}

/// D at the first upward crossing of `target`, interpolating log SNR
/// linearly in D between the bracketing grid points.
pub fn required_d_for_target(ds: &[f64], snrs: &[f64], target: f64) -> Result<f64, MetricsError> {
    if ds.len() != snrs.len() {
        return Err(MetricsError::LengthMismatch(ds.len(), snrs.len()));
    }
    if ds.len() < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: ds.len() });
    }
    if ds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MetricsError::UnsortedGrid);
    }
    if snrs.iter().any(|s| !(s.is_finite() && *s > 0.0)) || !(target > 0.0) {
        return Err(MetricsError::NonPositive);
    }
    let fail = || MetricsError::NoCrossing {
        target,
        min: snrs.iter().cloned().fold(f64::INFINITY, f64::min),
        max: snrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    if snrs[0] >= target {
        return Err(fail());
    }
    for i in 0..ds.len() - 1 {
        let (s0, s1) = (snrs[i], snrs[i + 1]);
        if s0 < target && s1 >= target {
            let t = (target.ln() - s0.ln()) / (s1.ln() - s0.ln());
            return Ok(ds[i] + t * (ds[i + 1] - ds[i]));
        }
    }
    Err(fail())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    OneD,
    TwoD,
}

/// Closed-form gate-count model behind a bond-dimension prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingFormula {
    /// (1 − v/c)·N gates per bond on a line.
    Line,
    /// √N-scaled gate count for a 2D separation along the given direction.
    Grid(Orientation),
}

/// D = A·D_g^(gates per bond), doubled gate count for the second-order OTOC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPrediction {
    pub dimension: Dimension,
    pub d_g: f64,
    pub v_mb_over_c: f64,
    pub prefactor_a: f64,
    pub formula: ScalingFormula,
    pub second_order: bool,
}

impl ScalingPrediction {
    pub fn line(v_mb_over_c: f64, prefactor_a: f64) -> Self {
        Self { dimension: Dimension::OneD, d_g: 2.0, v_mb_over_c, prefactor_a, formula: ScalingFormula::Line, second_order: false }
    }

    pub fn grid(orientation: Orientation, v_mb_over_c: f64, prefactor_a: f64) -> Self {
        Self { dimension: Dimension::TwoD, d_g: 4.0, v_mb_over_c, prefactor_a, formula: ScalingFormula::Grid(orientation), second_order: false }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let want = match self.dimension {
            Dimension::OneD => 2.0,
            Dimension::TwoD => 4.0,
        };
        if self.d_g != want {
            return Err(MetricsError::InvalidPrediction("growth base must be 2 in 1D and 4 in 2D"));
        }
        match (self.dimension, self.formula) {
            (Dimension::OneD, ScalingFormula::Line) | (Dimension::TwoD, ScalingFormula::Grid(_)) => {}
            _ => return Err(MetricsError::InvalidPrediction("formula does not match dimension")),
        }
        if !(self.prefactor_a > 0.0) {
            return Err(MetricsError::InvalidPrediction("prefactor must be positive"));
        }
        if self.dimension == Dimension::TwoD && self.prefactor_a > 0.5 {
            return Err(MetricsError::InvalidPrediction("2D prefactor is at most 0.5"));
        }
        if !(0.0..1.0).contains(&self.v_mb_over_c) {
            return Err(MetricsError::InvalidPrediction("v/c must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Predicted maximal number of two-qubit gates on one bond.
    pub fn gates_per_bond(&self, n: usize) -> Result<f64, MetricsError> {
        self.validate()?;
        let g = match self.formula {
            ScalingFormula::Line => (1.0 - self.v_mb_over_c) * n as f64,
            ScalingFormula::Grid(o) => {
                let c = match o {
                    Orientation::Horizontal => C_H,
                    Orientation::Diagonal => C_D,
                };
                predicted_gates_per_bond_2d(o, self.v_mb_over_c * c, n)?
            }
        };
        Ok(if self.second_order { 2.0 * g } else { g })
    }
}

pub fn predicted_bond_dim(pred: &ScalingPrediction, n: usize) -> Result<f64, MetricsError> {
    Ok(pred.prefactor_a * pred.d_g.powf(pred.gates_per_bond(n)?))
}

/// Gate count per bond for a 2D separation at absolute speed `v_mb`
/// (layers⁻¹), using c_h = 1/2 and c_d = 1/(2√2).
pub fn predicted_gates_per_bond_2d(orientation: Orientation, v_mb: f64, n: usize) -> Result<f64, MetricsError> {
    let sn = (n as f64).sqrt();
    match orientation {
        Orientation::Diagonal => {
            if !(v_mb < C_D) {
                return Err(MetricsError::SpeedExceeded { v: v_mb, c: C_D });
            }
            Ok(sn * 0.5 * (1.0 - v_mb / C_D) / (C_D * C_D - v_mb * v_mb / 2.0).sqrt())
        }
        Orientation::Horizontal => {
            if !(v_mb < C_H) {
                return Err(MetricsError::SpeedExceeded { v: v_mb, c: C_H });
            }
            Ok(sn * std::f64::consts::FRAC_1_SQRT_2 * (1.0 - v_mb / C_H) / (C_H * C_H - v_mb * v_mb).sqrt())
        }
    }
}

/// Gate count per bond on a line at absolute speed `v_mb`.
pub fn predicted_gates_per_bond_1d(v_mb: f64, n: usize) -> Result<f64, MetricsError> {
    if !(v_mb < C_1D) {
        return Err(MetricsError::SpeedExceeded { v: v_mb, c: C_1D });
    }
    Ok((1.0 - v_mb / C_1D) * n as f64)
}

/// Least-squares line y = slope·x + intercept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_linear(xs: &[f64], ys: &[f64]) -> Result<LinearFit, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(MetricsError::TooFewSamples { needed: 3, got: xs.len() });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("fit"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("abscissa"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit { slope, intercept, r2 })
}

/// y ≈ prefactor·exp(rate·x), fitted on ln y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpFit {
    pub rate: f64,
    pub prefactor: f64,
    pub r2: f64,
}

/// y ≈ prefactor·x^exponent, fitted on ln y against ln x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub r2: f64,
}

fn logs(v: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if v.iter().any(|x| !(*x > 0.0)) {
        return Err(MetricsError::NonPositive);
    }
    Ok(v.iter().map(|x| x.ln()).collect())
}

pub fn fit_exponential(xs: &[f64], ys: &[f64]) -> Result<ExpFit, MetricsError> {
    let f = fit_linear(xs, &logs(ys)?)?;
    Ok(ExpFit { rate: f.slope, prefactor: f.intercept.exp(), r2: f.r2 })
}

pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<PowerFit, MetricsError> {
    let f = fit_linear(&logs(xs)?, &logs(ys)?)?;
    Ok(PowerFit { exponent: f.slope, prefactor: f.intercept.exp(), r2: f.r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        (0..m).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn identical_series_hit_the_cap() {
        let x = [0.1, 0.5, -0.3, 0.9, 0.2];
        assert_eq!(snr(&x, &x).unwrap(), SNR_CAP);
        let r = EnsembleResults::from_values(&x, &x).unwrap();
        let b = bootstrap_snr(&r, 20, 5, 1).unwrap();
        assert!(b.samples.iter().all(|&s| s == SNR_CAP) && b.samples.len() + b.skipped == 20);
    }

    #[test]
    fn snr_matches_hand_formula() {
        let e = [1.0, 2.0, 4.0, 3.0];
        let a = [1.5, 1.0, 3.5, 4.0];
        let z = |v: &[f64]| {
            let (m, s) = mean_std(v);
            v.iter().map(|x| (x - m) / s).collect::<Vec<_>>()
        };
        let (ze, za) = (z(&e), z(&a));
        let msd: f64 = ze.iter().zip(&za).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 4.0;
        assert!((snr(&e, &a).unwrap() - 1.0 / msd.sqrt()).abs() < 1e-14);
        let with_exact = snr_with(&e, &a, Normalization::ExactMoments).unwrap();
        let (me, se) = mean_std(&e);
        let msd2: f64 = e.iter().zip(&a).map(|(x, y)| ((x - me) / se - (y - me) / se).powi(2)).sum::<f64>() / 4.0;
        assert!((with_exact - 1.0 / msd2.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn degenerate_inputs_are_reported() {
        assert_eq!(snr(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]), Err(MetricsError::ZeroVariance("exact")));
        assert_eq!(snr(&[0.0, 1.0, 2.0], &[3.0, 3.0, 3.0]), Err(MetricsError::ZeroVariance("approx")));
        assert!(matches!(snr(&[1.0], &[1.0]), Err(MetricsError::TooFewSamples { .. })));
        assert!(matches!(snr(&[1.0, 2.0], &[1.0]), Err(MetricsError::LengthMismatch(..))));
        assert!(matches!(snr_uncorrelated_baseline(2), Err(MetricsError::TooFewSamples { .. })));
    }

    #[test]
    fn baseline_against_direct_gamma() {
        // m = 4: √4·Γ(1)/(2·Γ(3/2)) with Γ(3/2) = √π/2.
        let direct = 2.0 * 1.0 / (2.0 * std::f64::consts::PI.sqrt() / 2.0);
        assert!((snr_uncorrelated_baseline(4).unwrap() - direct).abs() < 1e-12);
        // m = 5: √5·Γ(3/2)/(2·Γ(2)).
        let direct5 = 5f64.sqrt() * (std::f64::consts::PI.sqrt() / 2.0) / 2.0;
        assert!((snr_uncorrelated_baseline(5).unwrap() - direct5).abs() < 1e-12);
        assert!((snr_uncorrelated_baseline(50).unwrap() - 0.725).abs() < 1e-3);
        assert!((snr_uncorrelated_baseline(1_000_000).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn uncorrelated_monte_carlo_near_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 400;
        let mean = (0..trials)
            .map(|_| {
                let e = normals(&mut rng, 1000);
                let a = normals(&mut rng, 1000);
                snr(&e, &a).unwrap()
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.02, "{mean}");
    }

    #[test]
    fn bootstrap_is_deterministic_and_validates_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = normals(&mut rng, 50);
        let a: Vec<f64> = e.iter().map(|x| x + 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
        let r = EnsembleResults::from_values(&e, &a).unwrap();
        let b1 = bootstrap_snr(&r, 100, 30, 9).unwrap();
        let b2 = bootstrap_snr(&r, 100, 30, 9).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.samples.len(), 100);
        assert!(matches!(bootstrap_snr(&r, 10, 51, 0), Err(MetricsError::BatchTooLarge { .. })));
    }

    #[test]
    fn bootstrap_covers_full_sample_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0;
        for rep in 0..100 {
            let e = normals(&mut rng, 50);
            let a: Vec<f64> = e.iter().map(|x| x + 0.4 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
            let full = snr(&e, &a).unwrap();
            let r = EnsembleResults::from_values(&e, &a).unwrap();
            let b = bootstrap_snr(&r, 100, 30, rep).unwrap();
            if (b.mean - full).abs() <= 2.0 * b.std {
                hits += 1;
            }
        }
        assert!(hits >= 90, "{hits}");
    }

    #[test]
    fn duplicate_instances_rejected() {
        let mut r = EnsembleResults::from_values(&[1.0, 2.0], &[1.0, 2.0]).unwrap().records;
        r[1].instance = 0;
        assert_eq!(EnsembleResults::new("h", r), Err(MetricsError::DuplicateInstance(0)));
    }

    #[test]
    fn required_d_on_analytic_curve() {
        let ds: Vec<f64> = (1..=6).map(|d| d as f64).collect();
        let s: Vec<f64> = ds.iter().map(|d| 2f64.powf(*d)).collect();
        assert_eq!(required_d_for_target(&ds, &s, 8.0).unwrap(), 3.0);
        assert!((required_d_for_target(&ds, &s, 2f64.powf(4.5)).unwrap() - 4.5).abs() < 1e-12);
        assert!(matches!(required_d_for_target(&ds, &s, 1.0), Err(MetricsError::NoCrossing { .. })));
        assert!(matches!(required_d_for_target(&ds, &s, 1000.0), Err(MetricsError::NoCrossing { .. })));
        // First upward crossing wins over a later one.
        let bumpy = [1.0, 6.0, 2.0, 9.0];
        assert!(required_d_for_target(&[1.0, 2.0, 3.0, 4.0], &bumpy, 5.0).unwrap() < 2.0);
    }

    #[test]
    fn predictions_match_closed_forms() {
        let p = ScalingPrediction::line(0.6, 1.0);
        assert!((predicted_bond_dim(&p, 10).unwrap() - 16.0).abs() < 1e-9);
        let h = predicted_gates_per_bond_2d(Orientation::Horizontal, 0.7 * C_H, 100).unwrap() / 10.0;
        assert!((h - 0.6).abs() < 0.01, "{h}");
        let d = predicted_gates_per_bond_2d(Orientation::Diagonal, 0.95 * C_D, 100).unwrap() / 10.0;
        assert!((d - 0.1).abs() < 0.01, "{d}");
        assert!(matches!(predicted_gates_per_bond_2d(Orientation::Horizontal, 0.5, 9), Err(MetricsError::SpeedExceeded { .. })));
        let g = ScalingPrediction::grid(Orientation::Horizontal, 0.7, 0.5);
        let expect = 0.5 * 4f64.powf(predicted_gates_per_bond_2d(Orientation::Horizontal, 0.35, 49).unwrap());
        assert!((predicted_bond_dim(&g, 49).unwrap() - expect).abs() < 1e-9 * expect);
        let mut bad = g;
        bad.prefactor_a = 0.8;
        assert!(bad.validate().is_err());
        let mut two = p;
        two.second_order = true;
        assert!((predicted_bond_dim(&two, 10).unwrap() - 256.0).abs() < 1e-6);
        // Twelve gates on one bond in 2D.
        assert!((4f64.powi(12) - 1.68e7).abs() < 0.01e7);
    }

    #[test]
    fn exact_fits_recover_parameters() {
        let xs: Vec<f64> = (1..8).map(|x| x as f64).collect();
        let e = fit_exponential(&xs, &xs.iter().map(|x| 2.0 * (0.5 * x).exp()).collect::<Vec<_>>()).unwrap();
        assert!((e.rate - 0.5).abs() < 1e-10 && (e.prefactor - 2.0).abs() < 1e-10 && (e.r2 - 1.0).abs() < 1e-10);
        let p = fit_power_law(&xs, &xs.iter().map(|x| 3.0 * x.powf(-1.3)).collect::<Vec<_>>()).unwrap();
        assert!((p.exponent + 1.3).abs() < 1e-10 && (p.prefactor - 3.0).abs() < 1e-10);
        assert_eq!(fit_exponential(&xs, &vec![0.0; 7]), Err(MetricsError::NonPositive));
        assert!(matches!(fit_linear(&[1.0, 2.0], &[1.0, 2.0]), Err(MetricsError::TooFewSamples { .. })));
    }
}
