//! Brute-force grid posterior for tiny univariate problems with known
//! variances.
//!
//! The grid covers `(π_c, μ^{c,0}, μ^{n,0}, μ^{c,1}, μ^{n,1})`. With known
//! variances and independent priors the posterior factorises into a
//! `(π_c, μ^{c,0}, μ^{n,0})` block (the control-arm mixture), a `μ^{c,1}`
//! factor and a `μ^{n,1}` factor, so the 5-d table is stored as those
//! three normalised pieces: the log posterior of node `(i, j, k, l, m)`
//! is `block[i][j][k] + c1[l] + n1[m]`.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::linalg::Sym2;
use crate::model::{validate_dataset, Arm, Family, ModelSpec, ObservedDataset, Restriction, Stratum};
use crate::simlab::{generate_dataset, scenario_params, Scenario, ScenarioId};
use crate::special::{log_add_exp, ln_beta, NeumaierSum, LN_SQRT_2PI};

/// Evenly spaced nodes `lo, ..., hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, points: usize) -> Self {
        Axis { lo, hi, points }
    }

    pub fn node(&self, i: usize) -> f64 {
        if self.points == 1 {
            return self.lo;
        }
        self.lo + (self.hi - self.lo) * i as f64 / (self.points - 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.node(i)).collect()
    }

    /// Same bounds, `2·points − 1` nodes (every old node is kept).
    pub fn refined(&self) -> Axis {
        Axis { points: 2 * self.points - 1, ..*self }
    }
}

/// Limit on [`GridSpec::evaluated_nodes`].
pub const MAX_GRID_NODES: f64 = 1e7;

/// Axes in the order `π_c, μ^{c,0}, μ^{n,0}, μ^{c,1}, μ^{n,1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub axes: [Axis; 5],
}

impl GridSpec {
    pub const AXIS_NAMES: [&'static str; 5] = ["pi_c", "mu_c0", "mu_n0", "mu_c1", "mu_n1"];

    pub fn total_nodes(&self) -> f64 {
        self.axes.iter().map(|a| a.points as f64).product()
    }

    /// Nodes actually evaluated: the control block plus the two treated
    /// axes.
    pub fn evaluated_nodes(&self) -> f64 {
        let p = |i: usize| self.axes[i].points as f64;
        p(0) * p(1) * p(2) + p(3) + p(4)
    }

    /// Nodes must lie in `0 < π_c < 1`; an axis may be a single atom
    /// (`points = 1`, `lo = hi`) or have at least three nodes.
    pub fn validate(&self) -> Result<()> {
        for (a, name) in self.axes.iter().zip(Self::AXIS_NAMES) {
            let atom = a.points == 1 && a.lo == a.hi;
            if !atom && (a.points < 3 || !(a.lo < a.hi)) {
                return Err(Error::InvalidGrid(format!("axis {name} needs lo < hi and at least 3 points")));
            }
            if !(a.lo.is_finite() && a.hi.is_finite()) {
                return Err(Error::InvalidGrid(format!("axis {name} has non-finite bounds")));
            }
        }
        let p = self.axes[0];
        if !(p.lo > 0.0 && p.hi < 1.0) {
            return Err(Error::InvalidGrid("pi_c axis must lie strictly inside (0, 1)".into()));
        }
        if self.evaluated_nodes() > MAX_GRID_NODES {
            return Err(Error::InvalidGrid(format!("{} nodes exceed the limit of {}", self.evaluated_nodes(), MAX_GRID_NODES)));
        }
        Ok(())
    }

    /// Default bounds: each mean spans its group's range widened by three
    /// sample SDs (control-arm means use the whole control arm), and
    /// `π_c ∈ [0.02, 0.98]`.
    pub fn default_for(data: &ObservedDataset, pi_points: usize, mean_points: usize) -> Result<GridSpec> {
        let ys = |z: Arm, d: Option<bool>| -> Vec<f64> {
            data.units.iter().filter(|u| u.z == z && d.map_or(true, |d| u.d == d)).map(|u| u.y1).collect()
        };
        let all: Vec<f64> = data.units.iter().map(|u| u.y1).collect();
        let axis = |v: Vec<f64>| -> Result<Axis> {
            let v = if v.len() < 2 { all.clone() } else { v };
            if v.len() < 2 {
                return Err(Error::InsufficientData("default grid bounds need at least two outcomes"));
            }
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let sd = libm::sqrt(v.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (n - 1.0));
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(Axis::new(lo - 3.0 * sd, hi + 3.0 * sd, mean_points))
        };
        let control = axis(ys(Arm::Control, None))?;
        Ok(GridSpec {
            axes: [
                Axis::new(0.02, 0.98, pi_points),
                control,
                control,
                axis(ys(Arm::Treated, Some(true)))?,
                axis(ys(Arm::Treated, Some(false)))?,
            ],
        })
    }

    /// Wider grid for posteriors whose mixture components can be nearly
    /// empty: every mean axis also spans four prior SDs around zero, with
    /// node spacing at most `spacing`, and `π_c ∈ [0.005, 0.995]`.
    pub fn prior_covering(data: &ObservedDataset, spec: &ModelSpec, pi_points: usize, spacing: f64) -> Result<GridSpec> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing}")));
        }
        let mut grid = GridSpec::default_for(data, pi_points, 3)?;
        let reach = 4.0 * libm::sqrt(spec.priors.mean_var);
        grid.axes[0] = Axis::new(0.005, 0.995, pi_points);
        // The treated-arm axes are one-dimensional factors, so they can
        // also resolve the likelihood peak: spacing at most half the
        // standard error of the group mean.
        let peak = |s: Stratum, d: bool| -> f64 {
            let n = data.group(Arm::Treated, d).count().max(1) as f64;
            spec.known_covariances.map_or(spacing, |k| 0.5 * libm::sqrt(k[s.index()][Arm::Treated.index()].s11 / n))
        };
        let steps = [spacing, spacing, spacing.min(peak(Stratum::Complier, true)), spacing.min(peak(Stratum::NeverTaker, false))];
        for (a, h) in grid.axes[1..].iter_mut().zip(steps) {
            let (lo, hi) = (a.lo.min(-reach), a.hi.max(reach));
            *a = Axis::new(lo, hi, libm::ceil((hi - lo) / h) as usize + 1);
        }
        Ok(grid)
    }

    pub fn refined(&self) -> GridSpec {
        GridSpec { axes: self.axes.map(|a| if a.points == 1 { a } else { a.refined() }) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPosterior {
    pub grid: GridSpec,
    /// Normalised probabilities of the `(π_c, μ^{c,0}, μ^{n,0})` block,
    /// row-major.
    pub control_block: Vec<f64>,
    /// Normalised marginal probabilities on the `μ^{c,1}` axis.
    pub mu_c1: Vec<f64>,
    /// Normalised marginal probabilities on the `μ^{n,1}` axis.
    pub mu_n1: Vec<f64>,
    /// Log normalising constant of the whole table (rectangle weights of 1).
    pub log_norm: f64,
    pub mean_pi_c: f64,
    pub mean_tau_c: f64,
    pub mean_tau_n: f64,
    /// Posterior mass on the two end nodes of each axis.
    pub boundary_mass: [f64; 5],
    pub warnings: Vec<String>,
}

impl GridPosterior {
    /// Probability of node `(i, j, k, l, m)`.
    pub fn prob(&self, idx: [usize; 5]) -> f64 {
        let [i, j, k, l, m] = idx;
        let a = &self.grid.axes;
        self.control_block[(i * a[1].points + j) * a[2].points + k] * self.mu_c1[l] * self.mu_n1[m]
    }

    /// Sum of every node probability, computed as a product of the factor
    /// sums.
    pub fn total_mass(&self) -> f64 {
        let s = |v: &[f64]| {
            let mut t = NeumaierSum::default();
            v.iter().for_each(|&x| t.add(x));
            t.total()
        };
        s(&self.control_block) * s(&self.mu_c1) * s(&self.mu_n1)
    }
}

/// Boundary mass above which a warning is issued.
pub const BOUNDARY_WARNING: f64 = 1e-3;

fn ln_normal(y: f64, mu: f64, var: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * libm::log(var) - 0.5 * (y - mu) * (y - mu) / var
}

fn normalize(logs: &[f64]) -> (f64, Vec<f64>) {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = NeumaierSum::default();
    logs.iter().for_each(|&l| s.add(libm::exp(l - m)));
    let lz = m + libm::log(s.total());
    (lz, logs.iter().map(|&l| libm::exp(l - lz)).collect())
}

/// Evaluates the posterior on `grid` through `exec` (one task per `π_c`
/// node).
pub fn grid_posterior_with<E: Executor>(exec: &E, data: &ObservedDataset, spec: &ModelSpec, grid: &GridSpec) -> Result<GridPosterior> {
    if spec.family != Family::Univariate {
        return Err(Error::UnsupportedFamily("the grid oracle covers the univariate family only"));
    }
    if spec.restriction != Restriction::Unrestricted {
        return Err(Error::UnsupportedRestriction("the grid oracle covers the unrestricted model only"));
    }
    let known = spec
        .known_covariances
        .ok_or_else(|| Error::InvalidConfig("the grid oracle needs known variances".into()))?;
    grid.validate()?;
    let data = validate_dataset(data, spec)?;
    if data.n() > 30 {
        return Err(Error::InvalidDataset("the grid oracle is limited to 30 units"));
    }
    let var = |s: Stratum, z: Arm| known[s.index()][z.index()].s11;
    let pr = &spec.priors;
    let ln_prior_mean = |mu: f64| ln_normal(mu, 0.0, pr.mean_var);
    let [ax_pi, ax_c0, ax_n0, ax_c1, ax_n1] = grid.axes;

    let control: Vec<f64> = data.group(Arm::Control, false).map(|u| u.y1).collect();
    let treated_c: Vec<f64> = data.group(Arm::Treated, true).map(|u| u.y1).collect();
    let treated_n: Vec<f64> = data.group(Arm::Treated, false).map(|u| u.y1).collect();

    // Per-unit control log densities at each mean node.
    let table = |ax: Axis, v: f64| -> Vec<Vec<f64>> {
        ax.nodes().iter().map(|&mu| control.iter().map(|&y| ln_normal(y, mu, v)).collect()).collect()
    };
    let fc = table(ax_c0, var(Stratum::Complier, Arm::Control));
    let fn_ = table(ax_n0, var(Stratum::NeverTaker, Arm::Control));
    let (nc1, nn1) = (treated_c.len() as f64, treated_n.len() as f64);

    let rows = exec.map((0..ax_pi.points).collect(), |i| -> Vec<f64> {
        let p = ax_pi.node(i);
        let (lp, lq) = (libm::log(p), libm::log1p(-p));
        let ln_prior_pi = (pr.pi_a - 1.0) * lp + (pr.pi_b - 1.0) * lq - ln_beta(pr.pi_a, pr.pi_b);
        let mut out = Vec::with_capacity(ax_c0.points * ax_n0.points);
        for (j, fcj) in fc.iter().enumerate() {
            for (k, fnk) in fn_.iter().enumerate() {
                let mut s = NeumaierSum::default();
                for u in 0..control.len() {
                    s.add(log_add_exp(lp + fcj[u], lq + fnk[u]));
                }
                s.add(nc1 * lp + nn1 * lq + ln_prior_pi);
                s.add(ln_prior_mean(ax_c0.node(j)) + ln_prior_mean(ax_n0.node(k)));
                out.push(s.total());
            }
        }
        out
    });
    let block_logs: Vec<f64> = rows.concat();
    let factor = |ax: Axis, ys: &[f64], v: f64| -> Vec<f64> {
        ax.nodes()
            .iter()
            .map(|&mu| {
                let mut s = NeumaierSum::default();
                ys.iter().for_each(|&y| s.add(ln_normal(y, mu, v)));
                s.add(ln_prior_mean(mu));
                s.total()
            })
            .collect()
    };
    let c1_logs = factor(ax_c1, &treated_c, var(Stratum::Complier, Arm::Treated));
    let n1_logs = factor(ax_n1, &treated_n, var(Stratum::NeverTaker, Arm::Treated));
    let (za, control_block) = normalize(&block_logs);
    let (zb, mu_c1) = normalize(&c1_logs);
    let (zc, mu_n1) = normalize(&n1_logs);

    // Marginals of the control block.
    let (p_pts, c_pts, n_pts) = (ax_pi.points, ax_c0.points, ax_n0.points);
    let mut m_pi = vec![0.0; p_pts];
    let mut m_c0 = vec![0.0; c_pts];
    let mut m_n0 = vec![0.0; n_pts];
    for i in 0..p_pts {
        for j in 0..c_pts {
            for k in 0..n_pts {
                let w = control_block[(i * c_pts + j) * n_pts + k];
                m_pi[i] += w;
                m_c0[j] += w;
                m_n0[k] += w;
            }
        }
    }
    let mean = |ax: Axis, w: &[f64]| -> f64 {
        let mut s = NeumaierSum::default();
        w.iter().enumerate().for_each(|(i, &p)| s.add(p * ax.node(i)));
        s.total()
    };
    let edge = |w: &[f64]| if w.len() == 1 { 0.0 } else { w[0] + w[w.len() - 1] };
    let boundary_mass = [edge(&m_pi), edge(&m_c0), edge(&m_n0), edge(&mu_c1), edge(&mu_n1)];
    let warnings = boundary_mass
        .iter()
        .zip(GridSpec::AXIS_NAMES)
        .filter(|(&m, _)| m > BOUNDARY_WARNING)
        .map(|(m, name)| format!("{:.3e} of the posterior mass sits on the ends of axis {name}; widen the grid", m))
        .collect();
    Ok(GridPosterior {
        grid: *grid,
        log_norm: za + zb + zc,
        mean_pi_c: mean(ax_pi, &m_pi),
        mean_tau_c: mean(ax_c1, &mu_c1) - mean(ax_c0, &m_c0),
        mean_tau_n: mean(ax_n1, &mu_n1) - mean(ax_n0, &m_n0),
        control_block,
        mu_c1,
        mu_n1,
        boundary_mass,
        warnings,
    })
}

pub fn grid_posterior(data: &ObservedDataset, spec: &ModelSpec, grid: &GridSpec) -> Result<GridPosterior> {
    grid_posterior_with(&Sequential, data, spec, grid)
}

/// Units in the benchmark dataset.
pub const BENCHMARK_N: usize = 20;
/// `(π_c points, mean spacing)` of the benchmark grid.
pub const BENCHMARK_GRID: (usize, f64) = (31, 0.15);

/// Seeded benchmark: the first outcome of a scenario-I design with
/// `BENCHMARK_N` units, fitted with the true variances held fixed.
pub fn benchmark_case(seed: u64) -> Result<(ObservedDataset, ModelSpec)> {
    let base = scenario_params(ScenarioId::I);
    let scenario = Scenario { n: BENCHMARK_N, n_treated: BENCHMARK_N / 2, ..base };
    let mut data = generate_dataset(&scenario, seed)?.data;
    for u in &mut data.units {
        u.y2 = None;
    }
    let var = |s: Stratum, z: Arm| Sym2::new(base.theta.cell(s, z).sigma.s11, 0.0, 1.0);
    let known = [
        [var(Stratum::Complier, Arm::Control), var(Stratum::Complier, Arm::Treated)],
        [var(Stratum::NeverTaker, Arm::Control), var(Stratum::NeverTaker, Arm::Treated)],
    ];
    let spec = ModelSpec::new(Family::Univariate, Restriction::Unrestricted)?.with_known_covariances(known);
    Ok((data, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CellParams, Theta, Unit, observed_data_log_likelihood, log_prior};

    fn known() -> [[Sym2; 2]; 2] {
        [[Sym2::new(0.09, 0.0, 1.0), Sym2::new(0.01, 0.0, 1.0)], [Sym2::new(0.16, 0.0, 1.0), Sym2::new(0.04, 0.0, 1.0)]]
    }

    fn spec() -> ModelSpec {
        ModelSpec::new(Family::Univariate, Restriction::Unrestricted).unwrap().with_known_covariances(known())
    }

    fn toy() -> ObservedDataset {
        let u = |z: bool, d: bool, y1: f64| Unit { z: Arm::from_treated(z), d, y1, y2: None };
        ObservedDataset::new(vec![
            u(true, true, 0.45),
            u(true, true, 0.62),
            u(true, false, 4.1),
            u(true, false, 4.3),
            u(false, false, 2.4),
            u(false, false, 2.9),
            u(false, false, 2.7),
        ])
    }

    #[test]
    fn single_atom_grid() {
        let atom = |x: f64| Axis::new(x, x, 1);
        let g = GridSpec { axes: [atom(0.6), atom(2.5), atom(2.75), atom(0.5), atom(4.25)] };
        let post = grid_posterior(&toy(), &spec(), &g).unwrap();
        assert_eq!(post.prob([0; 5]), 1.0);
        assert!((post.mean_pi_c - 0.6).abs() < 1e-15);
        // The log normaliser of a one-node table is the log posterior there.
        let theta = Theta {
            family: Family::Univariate,
            pi_c: 0.6,
            cells: [
                [CellParams::univariate(2.5, 0.09), CellParams::univariate(0.5, 0.01)],
                [CellParams::univariate(2.75, 0.16), CellParams::univariate(4.25, 0.04)],
            ],
        };
        let lp = observed_data_log_likelihood(&theta, &toy()).unwrap() + log_prior(&theta, &spec());
        assert!((post.log_norm - lp).abs() < 1e-10 * lp.abs().max(1.0), "{} {}", post.log_norm, lp);
    }

    #[test]
    fn normalisation_and_boundary() {
        let g = GridSpec::default_for(&toy(), 21, 21).unwrap();
        let post = grid_posterior(&toy(), &spec(), &g).unwrap();
        assert!((post.total_mass() - 1.0).abs() < 1e-10);
        // A grid that misses the posterior entirely.
        let mut narrow = g;
        narrow.axes[3] = Axis::new(3.0, 3.5, 5);
        let post = grid_posterior(&toy(), &spec(), &narrow).unwrap();
        assert!(post.warnings.iter().any(|w| w.contains("mu_c1")));
    }

    #[test]
    fn reflection_flips_tau() {
        // Negating every outcome and reflecting the (symmetric) grid negates
        // the posterior means of the effects.
        let g = GridSpec {
            axes: [
                Axis::new(0.05, 0.95, 11),
                Axis::new(-5.0, 5.0, 21),
                Axis::new(-5.0, 5.0, 21),
                Axis::new(-5.0, 5.0, 21),
                Axis::new(-5.0, 5.0, 21),
            ],
        };
        let a = grid_posterior(&toy(), &spec(), &g).unwrap();
        let mut flipped = toy();
        flipped.units.iter_mut().for_each(|u| u.y1 = -u.y1);
        let b = grid_posterior(&flipped, &spec(), &g).unwrap();
        assert!((a.mean_tau_c + b.mean_tau_c).abs() < 1e-9);
        assert!((a.mean_tau_n + b.mean_tau_n).abs() < 1e-9);
        assert!((a.mean_pi_c - b.mean_pi_c).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_grids() {
        let mut g = GridSpec::default_for(&toy(), 21, 21).unwrap();
        g.axes[1].points = 2;
        assert!(grid_posterior(&toy(), &spec(), &g).is_err());
        let g = GridSpec { axes: [Axis::new(0.02, 0.98, 400); 5] };
        assert!(matches!(g.validate(), Err(Error::InvalidGrid(_))));
        let s = ModelSpec::new(Family::Univariate, Restriction::Unrestricted).unwrap();
        let g = GridSpec::default_for(&toy(), 5, 5).unwrap();
        assert!(grid_posterior(&toy(), &s, &g).is_err());
    }
}
