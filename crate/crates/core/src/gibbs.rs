//! Data-augmentation Gibbs sampler.
//!
//! One sweep, in this fixed order:
//!
//! 1. impute the latent stratum of every control unit from
//!    `p(S | y, θ)` (treated units are labelled by their take-up);
//! 2. probit family only: impute the latent utilities `y2*` given the labels;
//! 3. draw `π_c` from its Beta full conditional;
//! 4. update cell means (normal conjugate, jointly per tied block), then
//!    covariances (inverse-gamma, inverse-Wishart, or a constrained
//!    random-walk Metropolis step for the probit family).
//!
//! Tied parameters under a restriction are updated once from the pooled
//! sufficient statistics of the tied cells and written to both cells, so
//! the ties hold bitwise in every stored draw.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::linalg::{Dense, Sym2};
use crate::model::{
    apply_restriction, in_probit_region, log_prior, restriction_holds, validate_dataset, Arm,
    CellParams, Family, ModelSpec, ObservedDataset, Restriction, Stratum, Theta, ThetaKernels,
};
use crate::rng::{derive_seed, RngStream};
use crate::samplers::{
    mh_step_constrained_cov, probit_cov_log_target, sample_beta, sample_inverse_gamma,
    sample_inverse_wishart, sample_mvn2, sample_normal, sample_truncated_normal, standard_normal,
    StepScales,
};
use crate::special::norm_ppf;

/// How each chain picks its starting point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStrategy {
    /// Independent draws from the prior.
    PriorDraw,
    /// Method-of-moments values from the observed `(z, d)` groups, with
    /// every mean shifted by a chain-dependent multiple of half the
    /// control-arm standard deviation. The control arm is split between
    /// the strata by ranking its units along the treated-arm difference
    /// between never-takers and compliers.
    MomentPerturb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub n_chains: usize,
    pub init: InitStrategy,
    /// Explicit per-chain seeds; derived from `seed` when absent.
    pub chain_seeds: Option<Vec<u64>>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iter: 15_000,
            n_burnin: 5_000,
            thin: 1,
            seed: 0,
            n_chains: 3,
            init: InitStrategy::MomentPerturb,
            chain_seeds: None,
        }
    }
}

const CHAIN_STREAM_TAG: u64 = 0x63_6861_696e;

impl ChainConfig {
    pub fn new(n_iter: usize, n_burnin: usize, n_chains: usize, seed: u64) -> Self {
        ChainConfig { n_iter, n_burnin, n_chains, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_burnin >= self.n_iter {
            return Err(Error::InvalidConfig(format!(
                "burn-in ({}) must be smaller than the iteration count ({})",
                self.n_burnin, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be at least 1".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::InvalidConfig("at least one chain is required".into()));
        }
        if let Some(s) = &self.chain_seeds {
            if s.len() != self.n_chains {
                return Err(Error::InvalidConfig(format!(
                    "{} chain seeds given for {} chains",
                    s.len(),
                    self.n_chains
                )));
            }
        }
        Ok(())
    }

    pub fn chain_seed(&self, chain: usize) -> u64 {
        match &self.chain_seeds {
            Some(s) => s[chain],
            None => derive_seed(self.seed, &[CHAIN_STREAM_TAG, chain as u64]),
        }
    }

    /// Draws kept per chain.
    pub fn kept_per_chain(&self) -> usize {
        (self.n_iter - self.n_burnin) / self.thin
    }
}

/// Post-burn-in draws of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainDraws {
    pub chain: usize,
    pub seed: u64,
    pub draws: Vec<Theta>,
    /// Complete-data log posterior at the labels imputed in the sweep that
    /// produced each stored draw.
    pub log_posterior: Vec<f64>,
    /// Post-burn-in Metropolis acceptance rate per covariance cell
    /// (`[c0, c1, n0, n1]`), probit family only.
    pub mh_acceptance: [f64; 4],
}

/// Draws from every chain, in chain-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawStore {
    pub spec: ModelSpec,
    pub config: ChainConfig,
    pub chains: Vec<ChainDraws>,
}

impl DrawStore {
    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// All draws, chain after chain.
    pub fn pooled(&self) -> impl Iterator<Item = &Theta> + '_ {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    /// Draw with pooled index `i`.
    pub fn get(&self, mut i: usize) -> Option<&Theta> {
        for c in &self.chains {
            if i < c.draws.len() {
                return Some(&c.draws[i]);
            }
            i -= c.draws.len();
        }
        None
    }
}

/// Mutable state of one chain.
#[derive(Clone, Debug)]
pub struct GibbsState {
    pub theta: Theta,
    pub labels: Vec<Stratum>,
    /// Probit family only; empty otherwise.
    pub y2_star: Vec<f64>,
    /// Metropolis step scales per covariance cell `[c0, c1, n0, n1]`.
    pub scales: [StepScales; 4],
}

fn cell_slot(s: Stratum, z: Arm) -> usize {
    2 * s.index() + z.index()
}

/// Probability that each control unit is a complier, `None` for treated
/// units. Computed in log space.
pub fn complier_probabilities(theta: &Theta, data: &ObservedDataset) -> Result<Vec<Option<f64>>> {
    let k = ThetaKernels::new(theta)?;
    data.units
        .iter()
        .enumerate()
        .map(|(index, u)| {
            if u.z == Arm::Treated {
                return Ok(None);
            }
            let y = u.outcome();
            let lc = k.joint(Stratum::Complier, Arm::Control, y);
            let ln = k.joint(Stratum::NeverTaker, Arm::Control, y);
            complier_probability(lc, ln, index).map(Some)
        })
        .collect()
}

fn complier_probability(lc: f64, ln: f64, index: usize) -> Result<f64> {
    if lc == f64::NEG_INFINITY && ln == f64::NEG_INFINITY {
        return Err(Error::DegenerateMixture { index });
    }
    if lc.is_nan() || ln.is_nan() {
        return Err(Error::DegenerateMixture { index });
    }
    Ok(1.0 / (1.0 + libm::exp(ln - lc)))
}

/// Imputes stratum labels. Treated units are labelled from their take-up;
/// each control unit consumes exactly one uniform.
pub fn impute_strata(theta: &Theta, data: &ObservedDataset, rng: &mut RngStream) -> Result<Vec<Stratum>> {
    let k = ThetaKernels::new(theta)?;
    let mut labels = Vec::with_capacity(data.n());
    impute_strata_into(&k, data, rng, &mut labels)?;
    Ok(labels)
}

/// Fills `labels` and returns `Σ_i [ln π_{s_i} + ln f_{s_i z_i}(y_i)]`.
fn impute_strata_into(
    k: &ThetaKernels,
    data: &ObservedDataset,
    rng: &mut RngStream,
    labels: &mut Vec<Stratum>,
) -> Result<f64> {
    labels.clear();
    let mut ll = 0.0;
    for (index, u) in data.units.iter().enumerate() {
        let y = u.outcome();
        let s = match u.observed_stratum() {
            Some(s) => {
                ll += k.joint(s, u.z, y);
                s
            }
            None => {
                let lc = k.joint(Stratum::Complier, Arm::Control, y);
                let ln = k.joint(Stratum::NeverTaker, Arm::Control, y);
                let p = complier_probability(lc, ln, index)?;
                if rng.open01() < p {
                    ll += lc;
                    Stratum::Complier
                } else {
                    ll += ln;
                    Stratum::NeverTaker
                }
            }
        };
        labels.push(s);
    }
    Ok(ll)
}

/// Draws `y2*` for every unit from its normal conditional given `y1`,
/// truncated to `(0, ∞)` when `y2 = 1` and `(−∞, 0]` otherwise.
pub fn impute_latent_utilities(
    theta: &Theta,
    data: &ObservedDataset,
    labels: &[Stratum],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let k = ThetaKernels::new(theta)?;
    let mut out = Vec::with_capacity(data.n());
    impute_latent_into(&k, theta.family, data, labels, rng, &mut out)?;
    Ok(out)
}

fn impute_latent_into(
    k: &ThetaKernels,
    family: Family,
    data: &ObservedDataset,
    labels: &[Stratum],
    rng: &mut RngStream,
    out: &mut Vec<f64>,
) -> Result<()> {
    if family != Family::ContinuousBinary {
        return Err(Error::UnsupportedFamily("latent utilities exist only for the probit family"));
    }
    out.clear();
    for (index, (u, &s)) in data.units.iter().zip(labels).enumerate() {
        let (m, sd) = k.cell(s, u.z).latent_conditional(u.y1);
        let (lo, hi) = match u.y2 {
            Some(1.0) => (0.0, f64::INFINITY),
            Some(_) => (f64::NEG_INFINITY, 0.0),
            None => return Err(Error::InvalidUnit { index, rule: "secondary outcome missing" }),
        };
        let mut v = sample_truncated_normal(m, sd * sd, lo, hi, rng)?;
        // The (−∞, 0] interval is closed at zero; the sampler returns the
        // open interval, so v < 0 there already.
        if hi == f64::INFINITY && v <= 0.0 {
            v = f64::MIN_POSITIVE;
        }
        out.push(v);
    }
    Ok(())
}

/// Draws `π_c ~ Beta(a + #compliers, b + #never-takers)`.
pub fn update_pi(labels: &[Stratum], a: f64, b: f64, rng: &mut RngStream) -> Result<f64> {
    let nc = labels.iter().filter(|&&s| s == Stratum::Complier).count() as f64;
    let nn = labels.len() as f64 - nc;
    sample_beta(a + nc, b + nn, rng)
}

/// Per-cell sufficient statistics: count, mean and centred scatter of the
/// modelled outcome vector (`y2*` replaces `y2` in the probit family).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CellStats {
    pub n: f64,
    pub mean: [f64; 2],
    pub scatter: Sym2Acc,
}

/// Scatter accumulator (plain fields so the struct can be `Default`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sym2Acc {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl CellStats {
    /// Scatter about an arbitrary point `mu`.
    pub fn scatter_about(&self, mu: [f64; 2]) -> Sym2 {
        let d = [self.mean[0] - mu[0], self.mean[1] - mu[1]];
        Sym2::new(
            self.scatter.s11 + self.n * d[0] * d[0],
            self.scatter.s12 + self.n * d[0] * d[1],
            self.scatter.s22 + self.n * d[1] * d[1],
        )
    }
}

/// Collects [`CellStats`] for the four cells, indexed `[c0, c1, n0, n1]`.
pub fn cell_stats(
    data: &ObservedDataset,
    labels: &[Stratum],
    y2_star: &[f64],
    family: Family,
) -> [CellStats; 4] {
    let y2 = |i: usize| -> f64 {
        match family {
            Family::Univariate => 0.0,
            Family::ContinuousBinary => y2_star[i],
            Family::ContinuousContinuous => data.units[i].y2.unwrap_or(f64::NAN),
        }
    };
    let mut st = [CellStats::default(); 4];
    for (i, (u, &s)) in data.units.iter().zip(labels).enumerate() {
        debug_assert!(
            !(s == Stratum::Complier && u.z == Arm::Treated) || u.d,
            "treated complier cell must only receive units with d = 1"
        );
        let c = &mut st[cell_slot(s, u.z)];
        c.n += 1.0;
        c.mean[0] += u.y1;
        c.mean[1] += y2(i);
    }
    for c in &mut st {
        if c.n > 0.0 {
            c.mean[0] /= c.n;
            c.mean[1] /= c.n;
        }
    }
    for (i, (u, &s)) in data.units.iter().zip(labels).enumerate() {
        let c = &mut st[cell_slot(s, u.z)];
        let d = [u.y1 - c.mean[0], y2(i) - c.mean[1]];
        c.scatter.s11 += d[0] * d[0];
        c.scatter.s12 += d[0] * d[1];
        c.scatter.s22 += d[1] * d[1];
    }
    st
}

/// One cell's contribution to a joint Gaussian mean block: coordinate `k`
/// of the cell mean maps to block index `map[k]`.
struct MeanTerm {
    stats: CellStats,
    precision: Sym2,
    map: [Option<usize>; 2],
}

/// Draws a `dim`-vector from its Gaussian full conditional under
/// independent `N(0, prior_var)` priors. Consumes `dim` normals.
fn sample_mean_block(dim: usize, prior_var: f64, terms: &[MeanTerm], rng: &mut RngStream) -> Result<Vec<f64>> {
    let mut q = Dense::identity_scaled(dim, 1.0 / prior_var);
    let mut b = vec![0.0; dim];
    for t in terms {
        if t.stats.n == 0.0 {
            continue;
        }
        let p = [[t.precision.s11, t.precision.s12], [t.precision.s12, t.precision.s22]];
        let py = t.precision.mul_vec(t.stats.mean);
        for i in 0..2 {
            let Some(bi) = t.map[i] else { continue };
            b[bi] += t.stats.n * py[i];
            for j in 0..2 {
                let Some(bj) = t.map[j] else { continue };
                q.add_at(bi, bj, t.stats.n * p[i][j]);
            }
        }
    }
    let l = q.cholesky().ok_or(Error::NotPositiveDefinite { cell: None })?;
    let m = l.solve_upper_t(&l.solve_lower(&b));
    let xi: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let dev = l.solve_upper_t(&xi);
    Ok(m.iter().zip(dev).map(|(a, d)| a + d).collect())
}

/// Precision used for the mean update of one cell.
fn mean_precision(cell: &CellParams, family: Family) -> Result<Sym2> {
    match family {
        Family::Univariate => Ok(Sym2::new(1.0 / cell.sigma.s11, 0.0, 0.0)),
        _ => cell.sigma.inverse().ok_or(Error::NotPositiveDefinite { cell: None }),
    }
}

/// Updates every cell's mean and covariance given the augmented data.
/// Returns the new `Theta` (with `pi_c` unchanged) and, per covariance
/// cell, whether a Metropolis proposal was accepted.
pub fn update_cells(
    theta: &Theta,
    data: &ObservedDataset,
    labels: &[Stratum],
    y2_star: &[f64],
    spec: &ModelSpec,
    scales: &mut [StepScales; 4],
    rng: &mut RngStream,
) -> Result<(Theta, [bool; 4])> {
    let family = spec.family;
    let dim = family.dim();
    let stats = cell_stats(data, labels, y2_star, family);
    let mut out = *theta;
    let coord_map = |first: usize| -> [Option<usize>; 2] {
        if dim == 1 {
            [Some(first), None]
        } else {
            [Some(first), Some(first + 1)]
        }
    };
    let term = |s: Stratum, z: Arm, map: [Option<usize>; 2]| -> Result<MeanTerm> {
        Ok(MeanTerm {
            stats: stats[cell_slot(s, z)],
            precision: mean_precision(theta.cell(s, z), family)?,
            map,
        })
    };
    let v = spec.priors.mean_var;

    // Means: compliers are never tied.
    for z in Arm::ALL {
        let m = sample_mean_block(dim, v, &[term(Stratum::Complier, z, coord_map(0))?], rng)?;
        out.cell_mut(Stratum::Complier, z).mu[..dim].copy_from_slice(&m);
    }
    let (n0, n1) = (Stratum::NeverTaker, Stratum::NeverTaker);
    match spec.restriction {
        Restriction::Unrestricted => {
            for z in Arm::ALL {
                let m = sample_mean_block(dim, v, &[term(n0, z, coord_map(0))?], rng)?;
                out.cell_mut(n0, z).mu[..dim].copy_from_slice(&m);
            }
        }
        Restriction::Er => {
            let terms = [term(n0, Arm::Control, coord_map(0))?, term(n1, Arm::Treated, coord_map(0))?];
            let m = sample_mean_block(dim, v, &terms, rng)?;
            out.cell_mut(n0, Arm::Control).mu[..dim].copy_from_slice(&m);
            out.cell_mut(n1, Arm::Treated).mu[..dim].copy_from_slice(&m);
        }
        Restriction::Per => {
            // Block (μ1^{n,0}, μ1^{n,1}, μ2^{n}).
            let terms = [
                term(n0, Arm::Control, [Some(0), Some(2)])?,
                term(n1, Arm::Treated, [Some(1), Some(2)])?,
            ];
            let m = sample_mean_block(3, v, &terms, rng)?;
            out.cell_mut(n0, Arm::Control).mu = [m[0], m[2]];
            out.cell_mut(n1, Arm::Treated).mu = [m[1], m[2]];
        }
    }

    // Covariances, in the fixed cell order c0, c1, n0, n1.
    let mut accepted = [false; 4];
    if let Some(known) = spec.known_covariances {
        for s in Stratum::ALL {
            for z in Arm::ALL {
                out.cell_mut(s, z).sigma = known[s.index()][z.index()];
            }
        }
        return Ok((out, accepted));
    }
    let er = spec.restriction == Restriction::Er;
    for s in Stratum::ALL {
        for z in Arm::ALL {
            let slot = cell_slot(s, z);
            let tied_copy = er && s == Stratum::NeverTaker && z == Arm::Treated;
            if tied_copy {
                out.cell_mut(s, z).sigma = out.cell(s, Arm::Control).sigma;
                continue;
            }
            let group: &[(Stratum, Arm)] = if er && s == Stratum::NeverTaker {
                &[(Stratum::NeverTaker, Arm::Control), (Stratum::NeverTaker, Arm::Treated)]
            } else {
                &[(s, z)]
            };
            let mut n = 0.0;
            let mut scatter = Sym2::new(0.0, 0.0, 0.0);
            for &(gs, gz) in group {
                let st = &stats[cell_slot(gs, gz)];
                n += st.n;
                scatter = scatter.add(&st.scatter_about(out.cell(gs, gz).mu));
            }
            let pr = &spec.priors;
            let new_sigma = match family {
                Family::Univariate => {
                    let s11 = sample_inverse_gamma(pr.ig_shape + 0.5 * n, pr.ig_rate + 0.5 * scatter.s11, rng)?;
                    Sym2::new(s11, 0.0, 1.0)
                }
                Family::ContinuousContinuous => sample_inverse_wishart(pr.iw_df + n, &pr.iw_scale.add(&scatter), rng)?,
                Family::ContinuousBinary => {
                    let cur_sigma = out.cell(s, z).sigma;
                    let cur = [cur_sigma.s11, cur_sigma.s12];
                    let target = |x: [f64; 2]| probit_cov_log_target(&pr.cov_probit, n, &scatter, x);
                    let cur_lt = target(cur);
                    let step = mh_step_constrained_cov(cur, cur_lt, target, scales[slot].scales, rng);
                    scales[slot].record(step.accepted);
                    accepted[slot] = step.accepted;
                    Sym2::new(step.state[0], step.state[1], 1.0)
                }
            };
            out.cell_mut(s, z).sigma = new_sigma;
        }
    }
    Ok((out, accepted))
}

/// Sample sufficient moments of a group of units.
#[derive(Clone, Copy)]
struct GroupMoments {
    n: usize,
    mean: [f64; 2],
    cov: Sym2,
}

fn group_moments(units: &[&crate::model::Unit]) -> GroupMoments {
    let n = units.len();
    if n == 0 {
        return GroupMoments { n, mean: [0.0, 0.0], cov: Sym2::IDENTITY };
    }
    let y2 = |u: &crate::model::Unit| u.y2.unwrap_or(0.0);
    let nf = n as f64;
    let mean = [
        units.iter().map(|u| u.y1).sum::<f64>() / nf,
        units.iter().map(|u| y2(u)).sum::<f64>() / nf,
    ];
    let mut c = Sym2::new(0.0, 0.0, 0.0);
    for u in units {
        c = c.add(&Sym2::outer([u.y1 - mean[0], y2(u) - mean[1]]));
    }
    let cov = if n > 1 { c.scale(1.0 / (nf - 1.0)) } else { Sym2::IDENTITY };
    GroupMoments { n, mean, cov }
}

fn split_control(
    g00: &[&crate::model::Unit],
    m11: &GroupMoments,
    m10: &GroupMoments,
    m00: &GroupMoments,
    overall: &GroupMoments,
    nt_share: f64,
) -> (GroupMoments, GroupMoments) {
    let mut dir = [0.0; 2];
    let var = [overall.cov.s11, overall.cov.s22];
    for k in 0..2 {
        if var[k] > 0.0 && var[k].is_finite() {
            dir[k] = (m10.mean[k] - m11.mean[k]) / var[k];
        }
    }
    let score = |u: &crate::model::Unit| dir[0] * u.y1 + dir[1] * u.y2.unwrap_or(0.0);
    let mut sorted = g00.to_vec();
    sorted.sort_by(|a, b| score(a).total_cmp(&score(b)));
    let n_nt = libm::round(nt_share * sorted.len() as f64) as usize;
    let (c, n) = sorted.split_at(sorted.len() - n_nt.min(sorted.len()));
    let pick = |g: &[&crate::model::Unit]| if g.len() >= 2 { group_moments(g) } else { *m00 };
    (pick(c), pick(n))
}

/// Chain-index offsets in units of half the control-arm standard deviation:
/// 0, +1, −1, +2, −2, ...
fn perturbation(chain: usize) -> f64 {
    if chain == 0 {
        return 0.0;
    }
    let k = chain.div_ceil(2) as f64;
    if chain % 2 == 1 {
        k
    } else {
        -k
    }
}

fn fallback_cov(cov: Sym2, family: Family, overall: &Sym2) -> Sym2 {
    let pick = |c: Sym2| -> Option<Sym2> {
        match family {
            Family::Univariate | Family::ContinuousBinary => {
                (c.s11 > 0.0 && c.s11.is_finite()).then_some(Sym2::new(c.s11, 0.0, 1.0))
            }
            Family::ContinuousContinuous => c.is_positive_definite().then_some(c),
        }
    };
    pick(cov)
        .or_else(|| pick(*overall))
        .unwrap_or(Sym2::IDENTITY)
}

/// Starting point for chain `chain`.
pub fn initial_theta(
    data: &ObservedDataset,
    spec: &ModelSpec,
    init: InitStrategy,
    chain: usize,
    rng: &mut RngStream,
) -> Result<Theta> {
    let family = spec.family;
    let mut theta = match init {
        InitStrategy::PriorDraw => prior_draw(spec, rng)?,
        InitStrategy::MomentPerturb => {
            let all: Vec<_> = data.units.iter().collect();
            let g11: Vec<_> = data.group(Arm::Treated, true).collect();
            let g10: Vec<_> = data.group(Arm::Treated, false).collect();
            let g00: Vec<_> = data.group(Arm::Control, false).collect();
            let overall = group_moments(&all);
            let or_overall = |g: GroupMoments| if g.n == 0 { group_moments(&all) } else { g };
            let m11 = or_overall(group_moments(&g11));
            let m10 = or_overall(group_moments(&g10));
            let m00 = or_overall(group_moments(&g00));
            let treated = g11.len() + g10.len();
            let share = if treated > 0 { g11.len() as f64 / treated as f64 } else { 0.5 };
            let pi = share.clamp(0.05, 0.95);
            // The control arm is split into its two strata by ranking units
            // along the treated-arm never-taker minus complier direction.
            let (mc0, mn0) = split_control(&g00, &m11, &m10, &m00, &overall, 1.0 - pi);
            let delta = perturbation(chain);
            let cov00 = fallback_cov(m00.cov, family, &overall.cov);
            let sd = [
                libm::sqrt(cov00.s11),
                match family {
                    Family::ContinuousContinuous => libm::sqrt(cov00.s22),
                    _ => 1.0,
                },
            ];
            let to_cell = |mean: [f64; 2], cov: Sym2| -> CellParams {
                let mu2 = match family {
                    Family::Univariate => 0.0,
                    Family::ContinuousBinary => norm_ppf(mean[1].clamp(0.05, 0.95)),
                    Family::ContinuousContinuous => mean[1],
                };
                let mu = [mean[0] + 0.5 * delta * sd[0], mu2 + 0.5 * delta * sd[1]];
                CellParams { mu, sigma: fallback_cov(cov, family, &overall.cov) }
            };
            Theta {
                family,
                pi_c: (pi + 0.05 * delta).clamp(0.05, 0.95),
                cells: [
                    [to_cell(mc0.mean, mc0.cov), to_cell(m11.mean, m11.cov)],
                    [to_cell(mn0.mean, mn0.cov), to_cell(m10.mean, m10.cov)],
                ],
            }
        }
    };
    if let Some(known) = spec.known_covariances {
        for s in Stratum::ALL {
            for z in Arm::ALL {
                theta.cell_mut(s, z).sigma = known[s.index()][z.index()];
            }
        }
    }
    let theta = apply_restriction(&theta, spec)?;
    theta.validate()?;
    Ok(theta)
}

/// Draws a `Theta` from the prior (covariances from their priors unless
/// `spec` holds them fixed). Tied parameters are drawn once.
pub fn prior_draw(spec: &ModelSpec, rng: &mut RngStream) -> Result<Theta> {
    let pr = &spec.priors;
    let pi_c = sample_beta(pr.pi_a, pr.pi_b, rng)?;
    let mut cells = [[CellParams::univariate(0.0, 1.0); 2]; 2];
    for s in Stratum::ALL {
        for z in Arm::ALL {
            let c = &mut cells[s.index()][z.index()];
            for k in 0..spec.family.dim() {
                c.mu[k] = sample_normal(0.0, pr.mean_var, rng)?;
            }
            c.sigma = match spec.family {
                Family::Univariate => Sym2::new(sample_inverse_gamma(pr.ig_shape, pr.ig_rate, rng)?, 0.0, 1.0),
                Family::ContinuousContinuous => sample_inverse_wishart(pr.iw_df, &pr.iw_scale, rng)?,
                Family::ContinuousBinary => {
                    let prior = pr.cov_probit;
                    let mut x = sample_mvn2(prior.mean, &prior.cov, rng)?;
                    let mut tries = 0;
                    while !in_probit_region(x) {
                        tries += 1;
                        if tries > 100_000 {
                            return Err(Error::InvalidConfig(
                                "probit covariance prior puts almost no mass on its support".into(),
                            ));
                        }
                        x = sample_mvn2(prior.mean, &prior.cov, rng)?;
                    }
                    Sym2::new(x[0], x[1], 1.0)
                }
            };
        }
    }
    Ok(Theta { family: spec.family, pi_c, cells })
}

fn initial_scales(theta: &Theta) -> [StepScales; 4] {
    let mk = |c: &CellParams| StepScales::new([0.1 * c.sigma.s11 + 1e-4, 0.1 * libm::sqrt(c.sigma.s11) + 1e-4]);
    [
        mk(theta.cell(Stratum::Complier, Arm::Control)),
        mk(theta.cell(Stratum::Complier, Arm::Treated)),
        mk(theta.cell(Stratum::NeverTaker, Arm::Control)),
        mk(theta.cell(Stratum::NeverTaker, Arm::Treated)),
    ]
}

impl GibbsState {
    pub fn new(theta: Theta) -> Self {
        GibbsState { scales: initial_scales(&theta), theta, labels: Vec::new(), y2_star: Vec::new() }
    }

    /// One full sweep. Returns the complete-data log posterior evaluated at
    /// the incoming `θ` and the freshly imputed labels, plus the Metropolis
    /// acceptance flags.
    pub fn sweep(&mut self, data: &ObservedDataset, spec: &ModelSpec, rng: &mut RngStream) -> core::result::Result<(f64, [bool; 4]), (&'static str, Error)> {
        let k = ThetaKernels::new(&self.theta).map_err(|e| ("impute_strata", e))?;
        let ll = impute_strata_into(&k, data, rng, &mut self.labels).map_err(|e| ("impute_strata", e))?;
        let lp = ll + log_prior(&self.theta, spec);
        if !lp.is_finite() {
            return Err(("impute_strata", Error::InvalidParameter { what: "log posterior", value: lp }));
        }
        if spec.family == Family::ContinuousBinary {
            impute_latent_into(&k, spec.family, data, &self.labels, rng, &mut self.y2_star)
                .map_err(|e| ("impute_latent_utilities", e))?;
        }
        let pi_c = update_pi(&self.labels, spec.priors.pi_a, spec.priors.pi_b, rng).map_err(|e| ("update_pi", e))?;
        self.theta.pi_c = pi_c;
        let (theta, acc) = update_cells(&self.theta, data, &self.labels, &self.y2_star, spec, &mut self.scales, rng)
            .map_err(|e| ("update_cells", e))?;
        theta.validate().map_err(|e| ("update_cells", e))?;
        if !restriction_holds(&theta, spec.restriction) {
            return Err(("apply_restriction", Error::InvalidParameter { what: "restriction tie", value: f64::NAN }));
        }
        self.theta = theta;
        Ok((lp, acc))
    }
}

/// Runs one chain with the seed `config.chain_seed(chain)`.
pub fn run_chain(data: &ObservedDataset, spec: &ModelSpec, config: &ChainConfig, chain: usize) -> Result<ChainDraws> {
    spec.validate()?;
    config.validate()?;
    let data = validate_dataset(data, spec)?;
    run_validated_chain(&data, spec, config, chain)
}

fn run_validated_chain(data: &ObservedDataset, spec: &ModelSpec, config: &ChainConfig, chain: usize) -> Result<ChainDraws> {
    let seed = config.chain_seed(chain);
    let mut rng = RngStream::new(seed);
    let theta = initial_theta(data, spec, config.init, chain, &mut rng)?;
    let mut state = GibbsState::new(theta);
    let kept = config.kept_per_chain();
    let mut draws = Vec::with_capacity(kept);
    let mut log_posterior = Vec::with_capacity(kept);
    let mut acc_counts = [0usize; 4];
    let mut post_burn = 0usize;
    for it in 0..config.n_iter {
        if it == config.n_burnin {
            for s in &mut state.scales {
                s.freeze();
            }
        }
        let (lp, acc) = state
            .sweep(data, spec, &mut rng)
            .map_err(|(block, _)| Error::NonFinite { chain, iteration: it, block })?;
        if it >= config.n_burnin {
            post_burn += 1;
            for (c, a) in acc_counts.iter_mut().zip(acc) {
                *c += a as usize;
            }
            if (it - config.n_burnin + 1) % config.thin == 0 {
                draws.push(state.theta);
                log_posterior.push(lp);
            }
        }
    }
    let mut mh_acceptance = [0.0; 4];
    if spec.family == Family::ContinuousBinary && spec.known_covariances.is_none() {
        for (r, c) in mh_acceptance.iter_mut().zip(acc_counts) {
            *r = c as f64 / post_burn as f64;
        }
    }
    Ok(ChainDraws { chain, seed, draws, log_posterior, mh_acceptance })
}

/// Runs `config.n_chains` chains through `exec`; results are in chain order.
pub fn run_chains_with<E: Executor>(
    exec: &E,
    data: &ObservedDataset,
    spec: &ModelSpec,
    config: &ChainConfig,
) -> Result<DrawStore> {
    spec.validate()?;
    config.validate()?;
    let data = validate_dataset(data, spec)?;
    let results = exec.map((0..config.n_chains).collect(), |c| run_validated_chain(&data, spec, config, c));
    let chains = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(DrawStore { spec: *spec, config: config.clone(), chains })
}

pub fn run_chains(data: &ObservedDataset, spec: &ModelSpec, config: &ChainConfig) -> Result<DrawStore> {
    run_chains_with(&Sequential, data, spec, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CellParams, Unit};
    use alloc::vec;

    fn univariate_theta(pi_c: f64) -> Theta {
        Theta {
            family: Family::Univariate,
            pi_c,
            cells: [
                [CellParams::univariate(2.5, 0.09), CellParams::univariate(0.5, 0.01)],
                [CellParams::univariate(2.75, 0.16), CellParams::univariate(4.25, 0.04)],
            ],
        }
    }

    fn u(z: u8, d: u8, y1: f64, y2: Option<f64>) -> Unit {
        Unit { z: Arm::from_treated(z == 1), d: d == 1, y1, y2 }
    }

    fn small_data() -> ObservedDataset {
        ObservedDataset::new(vec![
            u(1, 1, 0.4, Some(1.0)),
            u(1, 1, 0.6, Some(0.0)),
            u(1, 0, 4.3, Some(1.0)),
            u(0, 0, 2.4, Some(0.0)),
            u(0, 0, 2.9, Some(1.0)),
            u(0, 0, 2.6, Some(1.0)),
        ])
    }

    #[test]
    fn treated_labels_follow_takeup() {
        let data = small_data();
        let mut rng = RngStream::new(1);
        for _ in 0..100 {
            let labels = impute_strata(&univariate_theta(0.5), &data, &mut rng).unwrap();
            assert_eq!(labels[0], Stratum::Complier);
            assert_eq!(labels[1], Stratum::Complier);
            assert_eq!(labels[2], Stratum::NeverTaker);
        }
    }

    #[test]
    fn pi_one_labels_everyone_complier() {
        let data = ObservedDataset::new(vec![u(0, 0, 2.4, None), u(0, 0, 9.0, None), u(1, 1, 0.5, None)]);
        let mut rng = RngStream::new(2);
        let labels = impute_strata(&univariate_theta(1.0), &data, &mut rng).unwrap();
        assert!(labels.iter().all(|&s| s == Stratum::Complier));
    }

    #[test]
    fn identical_components_give_prior_probability() {
        let mut theta = univariate_theta(0.35);
        theta.cells[1][0] = theta.cells[0][0];
        let data = ObservedDataset::new(vec![u(0, 0, 2.4, None), u(0, 0, 3.9, None)]);
        for p in complier_probabilities(&theta, &data).unwrap() {
            assert!((p.unwrap() - 0.35).abs() < 1e-15);
        }
    }

    #[test]
    fn label_probabilities_match_bayes_rule() {
        let theta = univariate_theta(0.7);
        let data = ObservedDataset::new(vec![u(0, 0, 2.4, None), u(0, 0, 2.9, None)]);
        let dens = |y: f64, m: f64, v: f64| libm::exp(-0.5 * (y - m) * (y - m) / v) / libm::sqrt(2.0 * core::f64::consts::PI * v);
        let probs = complier_probabilities(&theta, &data).unwrap();
        for (p, y) in probs.iter().zip([2.4, 2.9]) {
            let a = 0.7 * dens(y, 2.5, 0.09);
            let b = 0.3 * dens(y, 2.75, 0.16);
            assert!((p.unwrap() - a / (a + b)).abs() < 1e-14);
        }
        // Empirical frequency over many imputations.
        let mut rng = RngStream::new(3);
        let n = 20_000;
        let mut count = 0;
        for _ in 0..n {
            let l = impute_strata(&theta, &data, &mut rng).unwrap();
            count += (l[0] == Stratum::Complier) as usize;
        }
        let p = probs[0].unwrap();
        let se = libm::sqrt(p * (1.0 - p) / n as f64);
        assert!((count as f64 / n as f64 - p).abs() < 4.0 * se);
    }

    #[test]
    fn degenerate_mixture_reported() {
        let mut theta = univariate_theta(0.5);
        theta.cells[0][0] = CellParams::univariate(0.0, 1e-300);
        theta.cells[1][0] = CellParams::univariate(0.0, 1e-300);
        let data = ObservedDataset::new(vec![u(0, 0, 1e200, None)]);
        let mut rng = RngStream::new(4);
        assert!(matches!(impute_strata(&theta, &data, &mut rng), Err(Error::DegenerateMixture { index: 0 })));
    }

    fn probit_theta() -> Theta {
        let mut t = univariate_theta(0.6);
        t.family = Family::ContinuousBinary;
        for c in t.cells.iter_mut().flatten() {
            c.mu[1] = 0.2;
            c.sigma = Sym2::new(c.sigma.s11, 0.5 * libm::sqrt(c.sigma.s11), 1.0);
        }
        t
    }

    #[test]
    fn latent_utilities_respect_signs() {
        let data = small_data();
        let theta = probit_theta();
        let mut rng = RngStream::new(5);
        for _ in 0..500 {
            let labels = impute_strata(&theta, &data, &mut rng).unwrap();
            let ys = impute_latent_utilities(&theta, &data, &labels, &mut rng).unwrap();
            for (unit, y) in data.units.iter().zip(ys) {
                assert_eq!(unit.y2.unwrap() == 1.0, y > 0.0);
            }
        }
    }

    #[test]
    fn latent_utility_mean_matches_truncated_formula() {
        // σ12 = 0, μ2 = 0, y2 = 1: half-normal.
        let mut theta = probit_theta();
        for c in theta.cells.iter_mut().flatten() {
            c.mu[1] = 0.0;
            c.sigma.s12 = 0.0;
        }
        let data = ObservedDataset::new(vec![u(1, 1, 0.5, Some(1.0))]);
        let mut rng = RngStream::new(6);
        let n = 50_000;
        let mean = (0..n)
            .map(|_| impute_latent_utilities(&theta, &data, &[Stratum::Complier], &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        let target = libm::sqrt(2.0 / core::f64::consts::PI);
        assert!((mean - target).abs() < 4.0 * libm::sqrt((1.0 - 2.0 / core::f64::consts::PI) / n as f64));

        // Correlated case: mean m + sd·φ(m/sd)/Φ(m/sd) for y2 = 1.
        let theta = probit_theta();
        let c = theta.cell(Stratum::Complier, Arm::Treated);
        let m = c.mu[1] + c.sigma.s12 / c.sigma.s11 * (0.5 - c.mu[0]);
        let sd = libm::sqrt(1.0 - c.sigma.s12 * c.sigma.s12 / c.sigma.s11);
        let a = m / sd;
        let lam = crate::special::norm_pdf(a) / crate::special::norm_cdf(a);
        let expected = m + sd * lam;
        let var = sd * sd * (1.0 - a * lam - lam * lam);
        let mean = (0..n)
            .map(|_| impute_latent_utilities(&theta, &data, &[Stratum::Complier], &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - expected).abs() < 4.0 * libm::sqrt(var / n as f64), "{mean} {expected}");
    }

    #[test]
    fn latent_utilities_need_probit_family() {
        let data = small_data();
        let mut rng = RngStream::new(7);
        let labels = vec![Stratum::Complier; data.n()];
        assert!(impute_latent_utilities(&univariate_theta(0.5), &data, &labels, &mut rng).is_err());
    }

    #[test]
    fn pi_update_conjugacy() {
        let mut rng = RngStream::new(8);
        let labels: Vec<Stratum> = (0..10).map(|i| if i < 7 { Stratum::Complier } else { Stratum::NeverTaker }).collect();
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| update_pi(&labels, 1.0, 1.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        // Beta(8, 4): mean 2/3, variance 8·4/(12²·13).
        let var = 32.0 / (144.0 * 13.0);
        assert!((mean - 8.0 / 12.0).abs() < 4.0 * libm::sqrt(var / n as f64));
        // Empty label set draws from the prior: Beta(1, 1) mean ½.
        let mean0 = (0..n).map(|_| update_pi(&[], 1.0, 1.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean0 - 0.5).abs() < 4.0 * libm::sqrt(1.0 / 12.0 / n as f64));
        // All compliers: Beta(n+1, 1) mean (n+1)/(n+2).
        let all = vec![Stratum::Complier; 5];
        let m = (0..n).map(|_| update_pi(&all, 1.0, 1.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
        let v = 6.0 / (49.0 * 8.0);
        assert!((m - 6.0 / 7.0).abs() < 4.0 * libm::sqrt(v / n as f64));
    }

    #[test]
    fn perturbation_sequence() {
        assert_eq!([0, 1, 2, 3, 4].map(perturbation), [0.0, 1.0, -1.0, 2.0, -2.0]);
    }

    #[test]
    fn single_kept_draw() {
        let data = small_data();
        let spec = ModelSpec::new(Family::ContinuousBinary, Restriction::Unrestricted).unwrap();
        let cfg = ChainConfig { n_iter: 11, n_burnin: 10, n_chains: 1, ..Default::default() };
        let out = run_chain(&data, &spec, &cfg, 0).unwrap();
        assert_eq!(out.draws.len(), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = ChainConfig { n_iter: 10, n_burnin: 10, ..Default::default() };
        assert!(c.validate().is_err());
        c.n_burnin = 5;
        c.thin = 0;
        assert!(c.validate().is_err());
        c.thin = 2;
        assert_eq!(c.kept_per_chain(), 2);
    }

    #[test]
    fn stats_scatter_about_point() {
        let data = ObservedDataset::new(vec![u(1, 1, 1.0, Some(2.0)), u(1, 1, 3.0, Some(5.0))]);
        let labels = [Stratum::Complier, Stratum::Complier];
        let st = cell_stats(&data, &labels, &[], Family::ContinuousContinuous);
        let c = st[cell_slot(Stratum::Complier, Arm::Treated)];
        assert_eq!(c.n, 2.0);
        let s = c.scatter_about([0.0, 0.0]);
        assert!((s.s11 - 10.0).abs() < 1e-12 && (s.s12 - 17.0).abs() < 1e-12 && (s.s22 - 29.0).abs() < 1e-12);
    }
}
