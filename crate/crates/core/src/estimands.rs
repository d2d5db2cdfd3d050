//! Causal estimands and posterior summaries.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gibbs::DrawStore;
use crate::model::{Arm, Family, Stratum, Theta};
use crate::special::{norm_cdf, NeumaierSum};

/// Principal causal effect on the primary outcome, `μ1^{s,1} − μ1^{s,0}`.
pub fn tau(theta: &Theta, s: Stratum) -> f64 {
    theta.cell(s, Arm::Treated).mu[0] - theta.cell(s, Arm::Control).mu[0]
}

/// Effect on the secondary outcome: a difference of `Φ(μ2)` in the probit
/// family and of means in the continuous one.
pub fn secondary_effect(theta: &Theta, s: Stratum) -> Result<f64> {
    let m1 = theta.cell(s, Arm::Treated).mu[1];
    let m0 = theta.cell(s, Arm::Control).mu[1];
    match theta.family {
        Family::Univariate => Err(Error::UnsupportedFamily("secondary effect needs a bivariate family")),
        Family::ContinuousBinary => Ok(norm_cdf(m1) - norm_cdf(m0)),
        Family::ContinuousContinuous => Ok(m1 - m0),
    }
}

/// Between-stratum share of the secondary-outcome variance in arm `z`.
pub fn correlation_ratio(theta: &Theta, z: Arm) -> f64 {
    let c = theta.cell(Stratum::Complier, z);
    let n = theta.cell(Stratum::NeverTaker, z);
    let (pc, pn) = (theta.pi_c, 1.0 - theta.pi_c);
    let between = pc * pn * (c.mu[1] - n.mu[1]) * (c.mu[1] - n.mu[1]);
    let total = between + pc * c.sigma.s22 + pn * n.sigma.s22;
    if total == 0.0 {
        0.0
    } else {
        between / total
    }
}

/// Scalar quantities tracked per draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Estimand {
    TauC,
    TauN,
    PiC,
    SecondaryC,
    SecondaryN,
}

impl Estimand {
    pub const ALL: [Estimand; 5] =
        [Estimand::TauC, Estimand::TauN, Estimand::PiC, Estimand::SecondaryC, Estimand::SecondaryN];

    pub fn name(self) -> &'static str {
        match self {
            Estimand::TauC => "tau_c",
            Estimand::TauN => "tau_n",
            Estimand::PiC => "pi_c",
            Estimand::SecondaryC => "delta2_c",
            Estimand::SecondaryN => "delta2_n",
        }
    }

    pub fn from_name(name: &str) -> Option<Estimand> {
        Estimand::ALL.into_iter().find(|e| e.name() == name)
    }

    pub fn eval(self, theta: &Theta) -> Result<f64> {
        match self {
            Estimand::TauC => Ok(tau(theta, Stratum::Complier)),
            Estimand::TauN => Ok(tau(theta, Stratum::NeverTaker)),
            Estimand::PiC => Ok(theta.pi_c),
            Estimand::SecondaryC => secondary_effect(theta, Stratum::Complier),
            Estimand::SecondaryN => secondary_effect(theta, Stratum::NeverTaker),
        }
    }
}

/// Per-chain draws of `e`.
pub fn estimand_chains(store: &DrawStore, e: Estimand) -> Result<Vec<Vec<f64>>> {
    store.chains.iter().map(|c| c.draws.iter().map(|t| e.eval(t)).collect()).collect()
}

/// Pooled draws of `e`, chain after chain.
pub fn estimand_draws(store: &DrawStore, e: Estimand) -> Result<Vec<f64>> {
    store.pooled().map(|t| e.eval(t)).collect()
}

/// Type-7 sample quantile of sorted data (linear interpolation between
/// order statistics at `h = (n − 1)p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    pub width: f64,
    pub prob_negative: f64,
}

impl PosteriorSummary {
    pub fn covers(&self, value: f64) -> bool {
        self.q025 <= value && value <= self.q975
    }
}

pub fn summarize(draws: &[f64]) -> Result<PosteriorSummary> {
    if draws.len() < 2 {
        return Err(Error::InsufficientData("a summary needs at least two draws"));
    }
    if draws.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter { what: "draw", value: f64::NAN });
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sum = NeumaierSum::default();
    for &x in draws {
        sum.add(x);
    }
    let q025 = quantile_sorted(&sorted, 0.025);
    let q975 = quantile_sorted(&sorted, 0.975);
    Ok(PosteriorSummary {
        mean: sum.total() / draws.len() as f64,
        median: quantile_sorted(&sorted, 0.5),
        q025,
        q975,
        width: q975 - q025,
        prob_negative: draws.iter().filter(|&&x| x < 0.0).count() as f64 / draws.len() as f64,
    })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mut s = NeumaierSum::default();
    for &v in x {
        s.add(v);
    }
    let m = s.total() / n;
    let mut ss = NeumaierSum::default();
    for &v in x {
        ss.add((v - m) * (v - m));
    }
    (m, ss.total() / (n - 1.0))
}

/// Potential scale-reduction factor over whole (unsplit) chains,
/// `sqrt(((n − 1)/n · W + B/n) / W)`, floored at 1.
///
/// Without the floor, chains with identical means (`B = 0`) would report
/// `sqrt((n − 1)/n) < 1`.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InsufficientData("PSRF needs at least two chains"));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::InsufficientData("PSRF needs equal-length chains of at least two draws"));
    }
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / chains.len() as f64;
    let b_over_n = mean_var(&means).1;
    if w == 0.0 {
        return Ok(if b_over_n > 0.0 { f64::INFINITY } else { 1.0 });
    }
    let nf = n as f64;
    let v = (nf - 1.0) / nf * w + b_over_n;
    Ok(libm::sqrt(v / w).max(1.0))
}

/// Gaussian kernel density estimate on an evenly spaced grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl DensityGrid {
    pub fn mode(&self) -> f64 {
        let mut best = 0;
        for i in 1..self.density.len() {
            if self.density[i] > self.density[best] {
                best = i;
            }
        }
        self.x[best]
    }

    /// Trapezoid-rule integral of the density.
    pub fn integral(&self) -> f64 {
        let mut s = NeumaierSum::default();
        for i in 1..self.x.len() {
            s.add(0.5 * (self.x[i] - self.x[i - 1]) * (self.density[i] + self.density[i - 1]));
        }
        s.total()
    }
}

pub const KDE_POINTS: usize = 512;

/// Silverman's rule `0.9 · min(sd, IQR/1.34) · n^(−1/5)`; falls back to the
/// sd when the IQR is zero.
pub fn silverman_bandwidth(draws: &[f64]) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::InsufficientData("a bandwidth needs at least two draws"));
    }
    let sd = libm::sqrt(mean_var(draws).1);
    if !(sd > 0.0) {
        return Err(Error::InvalidParameter { what: "draw variance", value: sd * sd });
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * libm::pow(draws.len() as f64, -0.2))
}

pub fn kde(draws: &[f64], bandwidth: Option<f64>) -> Result<DensityGrid> {
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::InvalidParameter { what: "bandwidth", value: h }),
        None => silverman_bandwidth(draws)?,
    };
    if draws.len() < 2 {
        return Err(Error::InsufficientData("a density estimate needs at least two draws"));
    }
    let lo = draws.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (KDE_POINTS - 1) as f64;
    let norm = 1.0 / (draws.len() as f64 * h * libm::sqrt(2.0 * core::f64::consts::PI));
    let x: Vec<f64> = (0..KDE_POINTS).map(|i| lo + step * i as f64).collect();
    let density: Vec<f64> = x
        .iter()
        .map(|&g| {
            let mut s = NeumaierSum::default();
            for &d in draws {
                let u = (g - d) / h;
                s.add(libm::exp(-0.5 * u * u));
            }
            s.total() * norm
        })
        .collect();
    // The grid cuts off the outer kernel tails beyond 3h; rescale so the
    // tabulated density has unit trapezoid mass.
    let mut grid = DensityGrid { bandwidth: h, x, density };
    let mass = grid.integral();
    for d in &mut grid.density {
        *d /= mass;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Sym2;
    use crate::model::CellParams;
    use crate::rng::RngStream;
    use crate::samplers::standard_normal;
    use alloc::vec;

    fn scenario_one() -> Theta {
        Theta {
            family: Family::ContinuousContinuous,
            pi_c: 0.7,
            cells: [
                [
                    CellParams::bivariate([2.5, 8.0], Sym2::new(0.09, 0.24, 1.0)),
                    CellParams::bivariate([0.5, 6.5], Sym2::new(0.01, 0.08, 1.0)),
                ],
                [
                    CellParams::bivariate([2.75, 12.0], Sym2::new(0.16, 0.16, 4.0)),
                    CellParams::bivariate([4.25, 12.0], Sym2::new(0.04, 0.08, 4.0)),
                ],
            ],
        }
    }

    #[test]
    fn scenario_one_effects() {
        let t = scenario_one();
        assert!((tau(&t, Stratum::Complier) + 2.0).abs() < 1e-15);
        assert!((tau(&t, Stratum::NeverTaker) - 1.5).abs() < 1e-15);
        assert_eq!(secondary_effect(&t, Stratum::NeverTaker).unwrap(), 0.0);
        assert!((correlation_ratio(&t, Arm::Control) - 0.639).abs() < 5e-4);
        assert!((correlation_ratio(&t, Arm::Treated) - 0.770).abs() < 5e-4);
    }

    #[test]
    fn probit_secondary_effect() {
        let mut t = scenario_one();
        t.family = Family::ContinuousBinary;
        t.cells[0][1].mu[1] = 1.6449;
        t.cells[0][0].mu[1] = 0.0;
        assert!((secondary_effect(&t, Stratum::Complier).unwrap() - 0.45).abs() < 1e-4);
        t.family = Family::Univariate;
        assert!(secondary_effect(&t, Stratum::Complier).is_err());
    }

    #[test]
    fn equal_means_have_no_between_variance() {
        let mut t = scenario_one();
        t.cells[1][0].mu[1] = t.cells[0][0].mu[1];
        assert_eq!(correlation_ratio(&t, Arm::Control), 0.0);
    }

    #[test]
    fn type7_quantiles_on_integers() {
        let draws: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        let s = summarize(&draws).unwrap();
        // h = 999p, value = 1 + h.
        assert_eq!(s.median, 500.5);
        assert!((s.q025 - (1.0 + 999.0 * 0.025)).abs() < 1e-9);
        assert!((s.q975 - (1.0 + 999.0 * 0.975)).abs() < 1e-9);
        assert_eq!(s.mean, 500.5);
        assert_eq!(s.prob_negative, 0.0);
    }

    #[test]
    fn constant_draws_have_zero_width() {
        let s = summarize(&[3.25; 10]).unwrap();
        assert_eq!((s.median, s.q025, s.q975, s.width), (3.25, 3.25, 3.25, 0.0));
        assert!(summarize(&[1.0]).is_err());
    }

    #[test]
    fn psrf_cases() {
        let a: Vec<f64> = (0..50).map(|i| libm::sin(i as f64)).collect();
        assert!((gelman_rubin(&[a.clone(), a.clone()]).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = RngStream::new(11);
        let x: Vec<f64> = (0..10_000).map(|_| standard_normal(&mut rng)).collect();
        let y: Vec<f64> = (0..10_000).map(|_| standard_normal(&mut rng)).collect();
        assert!(gelman_rubin(&[x, y]).unwrap() < 1.01);
        let x: Vec<f64> = (0..100).map(|_| standard_normal(&mut rng)).collect();
        let y: Vec<f64> = (0..100).map(|_| 100.0 + standard_normal(&mut rng)).collect();
        assert!(gelman_rubin(&[x, y]).unwrap() > 5.0);
        assert_eq!(gelman_rubin(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap(), f64::INFINITY);
        assert_eq!(gelman_rubin(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(), 1.0);
        assert!(gelman_rubin(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn kde_normal_mode_and_mass() {
        let mut rng = RngStream::new(12);
        let x: Vec<f64> = (0..10_000).map(|_| standard_normal(&mut rng)).collect();
        let g = kde(&x, None).unwrap();
        assert_eq!(g.x.len(), KDE_POINTS);
        assert!(g.mode().abs() < 0.1);
        assert!((g.integral() - 1.0).abs() < 1e-3);
        let two = kde(&[0.0, 1.0], None).unwrap();
        assert!((two.integral() - 1.0).abs() < 1e-3);
        assert!(kde(&x, Some(0.0)).is_err());
        assert!(kde(&[2.0, 2.0, 2.0], None).is_err());
    }
}
