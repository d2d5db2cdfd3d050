//! Random-variate primitives used by the Gibbs engine.
//!
//! Every sampler takes an explicit [`RngStream`] and consumes a fixed number
//! of draws for a given code path, so a seed fully determines a chain.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Sym2;
use crate::model::{in_probit_region, ConstrainedCovPrior};
use crate::rng::RngStream;
use crate::special::{norm_cdf, norm_isf, norm_ppf, norm_sf};

/// Standardised bound beyond which truncated draws switch to rejection
/// sampling in the tail.
const TAIL_SWITCH: f64 = 6.0;

pub fn standard_normal(rng: &mut RngStream) -> f64 {
    StandardNormal.sample(rng)
}

pub fn sample_normal(mean: f64, var: f64, rng: &mut RngStream) -> Result<f64> {
    if !(var > 0.0) || !var.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidParameter { what: "normal variance", value: var });
    }
    Ok(mean + libm::sqrt(var) * standard_normal(rng))
}

/// Bivariate normal draw via the Cholesky factor of `sigma`.
pub fn sample_mvn2(mu: [f64; 2], sigma: &Sym2, rng: &mut RngStream) -> Result<[f64; 2]> {
    let (l11, l21, l22) = sigma
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { cell: None })?;
    let e0 = standard_normal(rng);
    let e1 = standard_normal(rng);
    Ok([mu[0] + l11 * e0, mu[1] + l21 * e0 + l22 * e1])
}

/// Normal draw restricted to `(lo, hi)`; either bound may be infinite.
pub fn sample_truncated_normal(
    mean: f64,
    var: f64,
    lo: f64,
    hi: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::InvalidParameter { what: "truncation interval (lo >= hi)", value: lo });
    }
    if !(var > 0.0) || !var.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidParameter { what: "truncated normal variance", value: var });
    }
    let sd = libm::sqrt(var);
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let x = mean + sd * std_truncated(a, b, rng);
    Ok(nudge_into(x, lo, hi))
}

/// Keeps `x` inside the open interval `(lo, hi)` after rounding.
fn nudge_into(x: f64, lo: f64, hi: f64) -> f64 {
    let mut x = x;
    if x <= lo {
        x = next_up(lo);
    }
    if x >= hi {
        x = next_down(hi);
    }
    if x <= lo {
        // Interval narrower than one ulp apart from its endpoints.
        x = lo + 0.5 * (hi - lo);
    }
    x
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let b = x.to_bits();
    f64::from_bits(if x > 0.0 { b + 1 } else { b - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Standard normal truncated to `(a, b)`.
fn std_truncated(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    if a >= TAIL_SWITCH {
        return tail_draw(a, b, rng);
    }
    if b <= -TAIL_SWITCH {
        return -tail_draw(-b, -a, rng);
    }
    let u = rng.open01();
    if a > 0.0 {
        // Work with upper-tail probabilities to keep precision.
        let qa = norm_sf(a);
        let qb = norm_sf(b);
        norm_isf(qb + u * (qa - qb))
    } else {
        let pa = norm_cdf(a);
        let pb = norm_cdf(b);
        norm_ppf(pa + u * (pb - pa))
    }
}

/// Draw from the standard normal restricted to `(a, b)` with `a ≥ 6`.
fn tail_draw(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    if b.is_finite() && (b - a) * a < 1.0 {
        // Narrow interval: uniform proposal, acceptance ≥ e^{-1-(b-a)²/2}.
        loop {
            let x = a + (b - a) * rng.open01();
            if rng.open01() <= libm::exp(0.5 * (a * a - x * x)) {
                return x;
            }
        }
    }
    // Exponential proposal with the optimal rate.
    let lambda = 0.5 * (a + libm::sqrt(a * a + 4.0));
    loop {
        let e: f64 = Exp1.sample(rng);
        let x = a + e / lambda;
        if x >= b {
            continue;
        }
        let d = x - lambda;
        if rng.open01() <= libm::exp(-0.5 * d * d) {
            return x;
        }
    }
}

/// Gamma draw with the given shape and rate. Never returns zero.
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::InvalidParameter { what: "gamma shape/rate", value: shape.min(rate) });
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|_| Error::InvalidParameter { what: "gamma shape/rate", value: shape })?;
    Ok(g.sample(rng).max(f64::MIN_POSITIVE))
}

pub fn sample_inverse_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> Result<f64> {
    Ok(1.0 / sample_gamma(shape, rate, rng)?)
}

pub fn sample_chi_squared(df: f64, rng: &mut RngStream) -> Result<f64> {
    sample_gamma(0.5 * df, 0.5, rng)
}

pub fn sample_beta(a: f64, b: f64, rng: &mut RngStream) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidParameter { what: "beta shape", value: a.min(b) });
    }
    let x = sample_gamma(a, 1.0, rng)?;
    let y = sample_gamma(b, 1.0, rng)?;
    Ok(x / (x + y))
}

/// 2×2 inverse-Wishart draw with `df` degrees of freedom and scale matrix
/// `scale` (mean `scale / (df − 3)`), by the Bartlett decomposition of the
/// Wishart precision.
pub fn sample_inverse_wishart(df: f64, scale: &Sym2, rng: &mut RngStream) -> Result<Sym2> {
    if !(df > 1.0) {
        return Err(Error::InvalidParameter { what: "inverse-Wishart df", value: df });
    }
    let prec_scale = scale.inverse().ok_or(Error::NotPositiveDefinite { cell: None })?;
    let (l11, l21, l22) = prec_scale
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { cell: None })?;
    let c1 = libm::sqrt(sample_chi_squared(df, rng)?);
    let c2 = libm::sqrt(sample_chi_squared(df - 1.0, rng)?);
    let n21 = standard_normal(rng);
    // B = L·A with A = [[c1, 0], [n21, c2]].
    let b11 = l11 * c1;
    let b21 = l21 * c1 + l22 * n21;
    let b22 = l22 * c2;
    let w = Sym2::new(b11 * b11, b11 * b21, b21 * b21 + b22 * b22);
    w.inverse().ok_or(Error::NotPositiveDefinite { cell: None })
}

/// Per-coordinate random-walk scales for [`mh_step_constrained_cov`], tuned
/// in batches toward a target acceptance rate while adaptation is enabled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepScales {
    pub scales: [f64; 2],
    accepted: u32,
    proposed: u32,
    pub adapting: bool,
}

impl StepScales {
    pub const TARGET_ACCEPTANCE: f64 = 0.3;
    const BATCH: u32 = 50;

    pub fn new(scales: [f64; 2]) -> Self {
        StepScales { scales, accepted: 0, proposed: 0, adapting: true }
    }

    pub fn record(&mut self, accepted: bool) {
        if !self.adapting {
            return;
        }
        self.proposed += 1;
        self.accepted += accepted as u32;
        if self.proposed == Self::BATCH {
            let rate = self.accepted as f64 / self.proposed as f64;
            let factor = libm::exp(2.0 * (rate - Self::TARGET_ACCEPTANCE));
            for s in &mut self.scales {
                *s = (*s * factor).clamp(1e-10, 1e3);
            }
            self.accepted = 0;
            self.proposed = 0;
        }
    }

    /// Stops adaptation; scales stay fixed from here on.
    pub fn freeze(&mut self) {
        self.adapting = false;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MhOutcome {
    pub state: [f64; 2],
    pub log_target: f64,
    pub accepted: bool,
}

/// One random-walk Metropolis step on `(σ11, σ12)` restricted to
/// `σ11 > σ12²`. Proposals outside the region are rejected without
/// evaluating the target. Always draws two normals and one uniform.
pub fn mh_step_constrained_cov<F>(
    current: [f64; 2],
    current_log_target: f64,
    log_target: F,
    step_scales: [f64; 2],
    rng: &mut RngStream,
) -> MhOutcome
where
    F: Fn([f64; 2]) -> f64,
{
    let e0 = standard_normal(rng);
    let e1 = standard_normal(rng);
    let u = rng.open01();
    let proposal = [current[0] + step_scales[0] * e0, current[1] + step_scales[1] * e1];
    let stay = MhOutcome { state: current, log_target: current_log_target, accepted: false };
    if proposal == current || !in_probit_region(proposal) {
        return stay;
    }
    let lt = log_target(proposal);
    if lt.is_nan() {
        return stay;
    }
    if libm::log(u) < lt - current_log_target {
        MhOutcome { state: proposal, log_target: lt, accepted: true }
    } else {
        stay
    }
}

/// Log target for the probit-family covariance block: truncated normal
/// prior plus the bivariate normal log likelihood of `n` points with
/// scatter matrix `scatter` about the current mean (`σ22 = 1`).
pub fn probit_cov_log_target(
    prior: &ConstrainedCovPrior,
    n: f64,
    scatter: &Sym2,
    sigma: [f64; 2],
) -> f64 {
    let lp = prior.log_density(sigma);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    if n == 0.0 {
        return lp;
    }
    let cov = Sym2::new(sigma[0], sigma[1], 1.0);
    match cov.inverse() {
        Some(inv) => lp - 0.5 * n * libm::log(cov.det()) - 0.5 * inv.trace_product(scatter),
        None => f64::NEG_INFINITY,
    }
}

/// Uniform index in `0..n`.
pub fn uniform_index(n: usize, rng: &mut RngStream) -> usize {
    rng.random_range(0..n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn normal_rejects_zero_variance() {
        let mut r = RngStream::new(1);
        assert!(sample_normal(0.0, 0.0, &mut r).is_err());
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(2);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_normal(1.5, 4.0, &mut r).unwrap()).collect();
        let (m, v) = moments(&xs);
        let se_m = libm::sqrt(4.0 / 1e5);
        let se_v = 4.0 * libm::sqrt(2.0 / 1e5);
        assert!((m - 1.5).abs() < 4.0 * se_m, "{m}");
        assert!((v - 4.0).abs() < 4.0 * se_v, "{v}");
    }

    #[test]
    fn mvn_moments() {
        let mut r = RngStream::new(3);
        let sg = Sym2::new(0.09, 0.24, 1.0);
        let n = 100_000;
        let xs: Vec<[f64; 2]> = (0..n).map(|_| sample_mvn2([2.5, 8.0], &sg, &mut r).unwrap()).collect();
        let m0 = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let m1 = xs.iter().map(|x| x[1]).sum::<f64>() / n as f64;
        let c01 = xs.iter().map(|x| (x[0] - m0) * (x[1] - m1)).sum::<f64>() / (n - 1) as f64;
        assert!((m0 - 2.5).abs() < 4.0 * libm::sqrt(0.09 / n as f64));
        assert!((m1 - 8.0).abs() < 4.0 * libm::sqrt(1.0 / n as f64));
        // Var of the product estimator ≈ (σ11σ22 + σ12²)/n.
        assert!((c01 - 0.24).abs() < 4.0 * libm::sqrt((0.09 + 0.0576) / n as f64));
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(9);
        let mut b = RngStream::new(9);
        for _ in 0..1000 {
            assert_eq!(
                sample_truncated_normal(0.3, 2.0, 0.0, f64::INFINITY, &mut a).unwrap().to_bits(),
                sample_truncated_normal(0.3, 2.0, 0.0, f64::INFINITY, &mut b).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn half_normal_mean() {
        let mut r = RngStream::new(4);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_truncated_normal(0.0, 1.0, 0.0, f64::INFINITY, &mut r).unwrap())
            .collect();
        let (m, _) = moments(&xs);
        // Half-normal: mean √(2/π), variance 1 − 2/π.
        let target = libm::sqrt(2.0 / core::f64::consts::PI);
        let se = libm::sqrt((1.0 - 2.0 / core::f64::consts::PI) / 1e5);
        assert!((m - target).abs() < 4.0 * se, "{m}");
        assert!(xs.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn untruncated_matches_normal() {
        let mut r = RngStream::new(5);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_truncated_normal(-1.0, 0.25, f64::NEG_INFINITY, f64::INFINITY, &mut r).unwrap())
            .collect();
        let (m, v) = moments(&xs);
        assert!((m + 1.0).abs() < 4.0 * libm::sqrt(0.25 / 1e5));
        assert!((v - 0.25).abs() < 4.0 * 0.25 * libm::sqrt(2.0 / 1e5));
    }

    #[test]
    fn far_tail_and_tiny_interval() {
        let mut r = RngStream::new(6);
        for _ in 0..10_000 {
            let x = sample_truncated_normal(0.0, 1.0, 12.0, f64::INFINITY, &mut r).unwrap();
            assert!(x > 12.0 && x < 14.0);
            let y = sample_truncated_normal(0.0, 1.0, f64::NEG_INFINITY, -9.0, &mut r).unwrap();
            assert!(y < -9.0);
            let z = sample_truncated_normal(0.0, 1.0, 8.0, 8.0 + 1e-12, &mut r).unwrap();
            assert!(z > 8.0 && z < 8.0 + 1e-12);
            let w = sample_truncated_normal(0.0, 1.0, 0.5, 0.5 + 1e-14, &mut r).unwrap();
            assert!(w > 0.5 && w < 0.5 + 1e-14);
        }
        // Tail mean vs the inverse Mills ratio φ(a)/(1−Φ(a)).
        let a = 7.0;
        let n = 50_000;
        let mean = (0..n)
            .map(|_| sample_truncated_normal(0.0, 1.0, a, f64::INFINITY, &mut r).unwrap())
            .sum::<f64>()
            / n as f64;
        let mills = crate::special::norm_pdf(a) / norm_sf(a);
        // Var of the truncated normal = 1 + aλ − λ², λ the Mills ratio.
        let var = 1.0 + a * mills - mills * mills;
        assert!((mean - mills).abs() < 4.0 * libm::sqrt(var / n as f64), "{mean} {mills}");
    }

    #[test]
    fn truncated_rejects_empty_interval() {
        let mut r = RngStream::new(7);
        assert!(sample_truncated_normal(0.0, 1.0, 1.0, 1.0, &mut r).is_err());
        assert!(sample_truncated_normal(0.0, 1.0, 2.0, 1.0, &mut r).is_err());
    }

    #[test]
    fn beta_one_one_is_uniform() {
        let mut r = RngStream::new(8);
        let xs: Vec<f64> = (0..10_000).map(|_| sample_beta(1.0, 1.0, &mut r).unwrap()).collect();
        let d = crate::special::ks_statistic_uniform(&xs);
        assert!(crate::special::ks_pvalue(xs.len(), d) > 0.01, "D={d}");
    }

    #[test]
    fn inverse_gamma_mean() {
        let mut r = RngStream::new(10);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_inverse_gamma(3.0, 2.0, &mut r).unwrap()).collect();
        let (m, _) = moments(&xs);
        // Mean rate/(shape−1) = 1, variance rate²/((shape−1)²(shape−2)) = 1.
        assert!((m - 1.0).abs() < 4.0 * libm::sqrt(1.0 / 1e5), "{m}");
    }

    #[test]
    fn inverse_wishart_mean() {
        let mut r = RngStream::new(11);
        let scale = Sym2::new(2.0, 0.6, 1.0);
        let df = 10.0;
        let n = 100_000;
        let mut acc = Sym2::new(0.0, 0.0, 0.0);
        let mut sq = Sym2::new(0.0, 0.0, 0.0);
        for _ in 0..n {
            let w = sample_inverse_wishart(df, &scale, &mut r).unwrap();
            assert!(w.is_positive_definite());
            acc = acc.add(&w);
            sq = sq.add(&Sym2::new(w.s11 * w.s11, w.s12 * w.s12, w.s22 * w.s22));
        }
        let mean = acc.scale(1.0 / n as f64);
        let target = scale.scale(1.0 / (df - 3.0));
        let msq = sq.scale(1.0 / n as f64);
        let se = |m: f64, m2: f64| libm::sqrt((m2 - m * m) / n as f64);
        assert!((mean.s11 - target.s11).abs() < 4.0 * se(mean.s11, msq.s11));
        assert!((mean.s12 - target.s12).abs() < 4.0 * se(mean.s12, msq.s12));
        assert!((mean.s22 - target.s22).abs() < 4.0 * se(mean.s22, msq.s22));
    }

    #[test]
    fn mh_rejects_outside_region_and_zero_steps() {
        let mut r = RngStream::new(12);
        let flat = |_s: [f64; 2]| 0.0;
        // Near the boundary with a huge step, most proposals fall outside.
        for _ in 0..1000 {
            let out = mh_step_constrained_cov([1.0, 0.99], 0.0, flat, [0.0, 0.0], &mut r);
            assert_eq!(out.state, [1.0, 0.99]);
            assert!(!out.accepted);
            let out = mh_step_constrained_cov([1.0, 0.0], 0.0, flat, [5.0, 5.0], &mut r);
            assert!(in_probit_region(out.state));
        }
    }

    #[test]
    fn mh_flat_target_uniform_on_box() {
        // Flat target on [0, 1]×[-1, 1] ∩ {σ11 > σ12²}. The region has area
        // ∫₀¹ 2√x dx = 4/3; compare cell occupancy against exact cell areas.
        let mut r = RngStream::new(13);
        let lt = |s: [f64; 2]| if s[0] < 1.0 && s[1].abs() < 1.0 { 0.0 } else { f64::NEG_INFINITY };
        let mut state = [0.5, 0.0];
        let mut cur = 0.0;
        let mut counts = [0usize; 4];
        let thin = 20;
        let kept = 10_000;
        for i in 0..kept * thin {
            let out = mh_step_constrained_cov(state, cur, lt, [0.3, 0.3], &mut r);
            state = out.state;
            cur = out.log_target;
            if i % thin == 0 {
                let bin = if state[0] < 0.5 { 0 } else { 2 } + if state[1] < 0.0 { 0 } else { 1 };
                counts[bin] += 1;
            }
        }
        // Area of {x < 0.5, 0 < y < √x} = ∫₀^½ √x dx = (2/3)(½)^{3/2}.
        let lower = (2.0 / 3.0) * libm::pow(0.5, 1.5);
        let upper = (2.0 / 3.0) - lower;
        let total = 4.0 / 3.0;
        let probs = [lower / total, lower / total, upper / total, upper / total];
        let chi2: f64 = counts
            .iter()
            .zip(probs)
            .map(|(&c, p)| {
                let e = p * kept as f64;
                (c as f64 - e) * (c as f64 - e) / e
            })
            .sum();
        // χ²₃ 0.999 quantile is 16.27.
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn mh_reproduces_truncated_normal_target_moments() {
        // Target: N((0.5, 0.1), diag(0.04, 0.01)) truncated to σ11 > σ12².
        let prior = ConstrainedCovPrior { mean: [0.5, 0.1], cov: Sym2::diag(0.04, 0.01) };
        let mut r = RngStream::new(14);
        let mut state = [0.5, 0.1];
        let mut cur = prior.log_density(state);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut kept = Vec::with_capacity(n);
        for _ in 0..n {
            let out = mh_step_constrained_cov(state, cur, |s| prior.log_density(s), [0.2, 0.1], &mut r);
            state = out.state;
            cur = out.log_target;
            sum[0] += state[0];
            sum[1] += state[1];
            kept.push(state);
        }
        let m = [sum[0] / n as f64, sum[1] / n as f64];
        // Reference moments by direct rejection sampling from the prior.
        let mut r2 = RngStream::new(15);
        let mut acc = [0.0; 2];
        let mut k = 0;
        while k < 200_000 {
            let x = sample_mvn2([0.5, 0.1], &Sym2::diag(0.04, 0.01), &mut r2).unwrap();
            if in_probit_region(x) {
                acc[0] += x[0];
                acc[1] += x[1];
                k += 1;
            }
        }
        let reference = [acc[0] / k as f64, acc[1] / k as f64];
        // Autocorrelated chain: allow a generous effective-sample SE.
        assert!((m[0] - reference[0]).abs() < 0.01, "{m:?} {reference:?}");
        assert!((m[1] - reference[1]).abs() < 0.005, "{m:?} {reference:?}");
        assert!(kept.iter().all(|s| in_probit_region(*s)));
    }

    #[test]
    fn step_scales_adapt_then_freeze() {
        let mut s = StepScales::new([1.0, 1.0]);
        for _ in 0..50 {
            s.record(false);
        }
        assert!(s.scales[0] < 1.0);
        s.freeze();
        let before = s.scales;
        for _ in 0..200 {
            s.record(true);
        }
        assert_eq!(before, s.scales);
    }
}
