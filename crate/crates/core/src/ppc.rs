//! Posterior predictive checks.
//!
//! Realized discrepancies depend on the latent strata of the observed
//! control units; at every parameter draw those labels are re-imputed from
//! `p(S | y, θ)` before the discrepancy is evaluated. Replicated data keep
//! the observed assignment vector and carry their own simulated strata.
//!
//! Every draw and replicate gets its own RNG substream derived from
//! `(seed, tag, draw, replicate)`, so results do not depend on how work is
//! scheduled.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::gibbs::impute_strata;
use crate::model::{Arm, Family, ObservedDataset, Stratum, Theta, Unit};
use crate::rng::RngStream;
use crate::samplers::{sample_beta, sample_mvn2, sample_normal, uniform_index};
use crate::special::{norm_cdf, NeumaierSum};

/// A scalar discrepancy. `outcome` is 0 for the primary and 1 for the
/// secondary outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Discrepancy {
    Signal { outcome: usize, stratum: Stratum },
    Noise { outcome: usize, stratum: Stratum },
    SignalToNoise { outcome: usize, stratum: Stratum },
    /// `χ²` over both outcomes.
    Chi2,
    /// The terms of one outcome in [`Discrepancy::Chi2`].
    Chi2Outcome { outcome: usize },
    Ks,
}

impl Discrepancy {
    pub fn name(&self) -> String {
        match *self {
            Discrepancy::Signal { outcome, stratum } => format!("SI_{}{}", outcome + 1, stratum.short()),
            Discrepancy::Noise { outcome, stratum } => format!("NO_{}{}", outcome + 1, stratum.short()),
            Discrepancy::SignalToNoise { outcome, stratum } => {
                format!("SN_{}{}", outcome + 1, stratum.short())
            }
            Discrepancy::Chi2 => "chi2".into(),
            Discrepancy::Chi2Outcome { outcome } => format!("chi2_{}", outcome + 1),
            Discrepancy::Ks => "KS".into(),
        }
    }

    /// Signal, noise and signal-to-noise per outcome and stratum, `χ²` per
    /// outcome, then KS.
    pub fn standard_set(family: Family) -> Vec<Discrepancy> {
        let mut out = Vec::new();
        for outcome in 0..family.dim() {
            for stratum in Stratum::ALL {
                out.push(Discrepancy::Signal { outcome, stratum });
                out.push(Discrepancy::Noise { outcome, stratum });
                out.push(Discrepancy::SignalToNoise { outcome, stratum });
            }
            out.push(Discrepancy::Chi2Outcome { outcome });
        }
        out.push(Discrepancy::Ks);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignalNoise {
    pub signal: f64,
    pub noise: f64,
    /// `None` when the noise is zero.
    pub signal_to_noise: Option<f64>,
}

fn group_mean_var(values: impl Iterator<Item = f64>) -> (usize, f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    if n == 0 {
        return (0, f64::NAN, f64::NAN);
    }
    let mut s = NeumaierSum::default();
    v.iter().for_each(|&x| s.add(x));
    let m = s.total() / n as f64;
    let mut ss = NeumaierSum::default();
    v.iter().for_each(|&x| ss.add((x - m) * (x - m)));
    let var = if n > 1 { ss.total() / (n - 1) as f64 } else { f64::NAN };
    (n, m, var)
}

/// Signal `|Ȳ_{s,1} − Ȳ_{s,0}|`, noise `sqrt(s²_{s,0}/N_{s,0} + s²_{s,1}/N_{s,1})`
/// and their ratio for stratum `s`, from one outcome's values.
///
/// Fails with [`Error::UndefinedDiscrepancy`] when either group has fewer
/// than two units.
pub fn discrepancy_si_no_sn(values: &[f64], arms: &[Arm], labels: &[Stratum], s: Stratum) -> Result<SignalNoise> {
    let pick = |z: Arm| {
        values
            .iter()
            .zip(arms)
            .zip(labels)
            .filter(move |((_, &a), &l)| a == z && l == s)
            .map(|((&y, _), _)| y)
    };
    let (n0, m0, v0) = group_mean_var(pick(Arm::Control));
    let (n1, m1, v1) = group_mean_var(pick(Arm::Treated));
    if n0 < 2 || n1 < 2 {
        return Err(Error::UndefinedDiscrepancy);
    }
    let signal = libm::fabs(m1 - m0);
    let noise = libm::sqrt(v0 / n0 as f64 + v1 / n1 as f64);
    let signal_to_noise = (noise > 0.0).then(|| signal / noise);
    Ok(SignalNoise { signal, noise, signal_to_noise })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chi2Value {
    pub value: f64,
    /// Contribution of each outcome to `value`.
    pub by_outcome: [f64; 2],
    /// Binary terms skipped because the model probability is exactly 0 or 1.
    pub excluded: usize,
}

/// Sum of squared standardized residuals against the cell moments at each
/// unit's label. `y1` (and a continuous `y2`) use the marginal cell mean
/// and variance; a binary `y2` uses `p = Φ(μ2)`.
pub fn chi2_discrepancy(data: &ObservedDataset, labels: &[Stratum], theta: &Theta) -> Result<Chi2Value> {
    if labels.len() != data.n() {
        return Err(Error::InconsistentAugmentation { index: labels.len(), rule: "label count differs from unit count" });
    }
    let mut sum = [NeumaierSum::default(), NeumaierSum::default()];
    let mut excluded = 0;
    for (u, &s) in data.units.iter().zip(labels) {
        let c = theta.cell(s, u.z);
        let r = u.y1 - c.mu[0];
        sum[0].add(r * r / c.sigma.s11);
        match (theta.family, u.y2) {
            (Family::ContinuousContinuous, Some(y2)) => {
                let r = y2 - c.mu[1];
                sum[1].add(r * r / c.sigma.s22);
            }
            (Family::ContinuousBinary, Some(y2)) => {
                let p = norm_cdf(c.mu[1]);
                if p <= 0.0 || p >= 1.0 {
                    excluded += 1;
                } else {
                    sum[1].add((y2 - p) * (y2 - p) / (p * (1.0 - p)));
                }
            }
            _ => {}
        }
    }
    let by_outcome = [sum[0].total(), sum[1].total()];
    Ok(Chi2Value { value: by_outcome[0] + by_outcome[1], by_outcome, excluded })
}

/// Model-implied CDF of `y1` in arm `z`.
pub fn mixture_cdf(theta: &Theta, z: Arm, y: f64) -> f64 {
    let f = |s: Stratum| {
        let c = theta.cell(s, z);
        norm_cdf((y - c.mu[0]) / libm::sqrt(c.sigma.s11))
    };
    theta.pi_c * f(Stratum::Complier) + (1.0 - theta.pi_c) * f(Stratum::NeverTaker)
}

/// Largest gap between the empirical CDF of `y1` and [`mixture_cdf`],
/// maximised over arms (arms without units are skipped).
pub fn ks_discrepancy(data: &ObservedDataset, theta: &Theta) -> f64 {
    let mut d: f64 = 0.0;
    for z in Arm::ALL {
        let mut ys: Vec<f64> = data.units.iter().filter(|u| u.z == z).map(|u| u.y1).collect();
        if ys.is_empty() {
            continue;
        }
        ys.sort_by(f64::total_cmp);
        let n = ys.len() as f64;
        for (i, &y) in ys.iter().enumerate() {
            let f = mixture_cdf(theta, z, y);
            d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
        }
    }
    d
}

/// Evaluates `m`; `None` when it is undefined on this dataset.
pub fn evaluate(m: Discrepancy, data: &ObservedDataset, labels: &[Stratum], theta: &Theta) -> Option<f64> {
    let sn = |outcome: usize, stratum: Stratum| -> Option<SignalNoise> {
        let values: Vec<f64> = data
            .units
            .iter()
            .map(|u| if outcome == 0 { Some(u.y1) } else { u.y2 })
            .collect::<Option<Vec<f64>>>()?;
        let arms: Vec<Arm> = data.units.iter().map(|u| u.z).collect();
        discrepancy_si_no_sn(&values, &arms, labels, stratum).ok()
    };
    match m {
        Discrepancy::Signal { outcome, stratum } => sn(outcome, stratum).map(|r| r.signal),
        Discrepancy::Noise { outcome, stratum } => sn(outcome, stratum).map(|r| r.noise),
        Discrepancy::SignalToNoise { outcome, stratum } => sn(outcome, stratum).and_then(|r| r.signal_to_noise),
        Discrepancy::Chi2 => chi2_discrepancy(data, labels, theta).ok().map(|c| c.value),
        Discrepancy::Chi2Outcome { outcome } => {
            (outcome < theta.family.dim()).then(|| chi2_discrepancy(data, labels, theta).ok().map(|c| c.by_outcome[outcome]))?
        }
        Discrepancy::Ks => Some(ks_discrepancy(data, theta)),
    }
}

/// Simulates a dataset with the template's assignment vector: one uniform
/// for the stratum, then the outcome from the `(S, z)` cell.
pub fn replicate_dataset(theta: &Theta, template: &ObservedDataset, rng: &mut RngStream) -> Result<(ObservedDataset, Vec<Stratum>)> {
    let mut units = Vec::with_capacity(template.n());
    let mut labels = Vec::with_capacity(template.n());
    for t in &template.units {
        let s = if rng.open01() < theta.pi_c { Stratum::Complier } else { Stratum::NeverTaker };
        let c = theta.cell(s, t.z);
        let (y1, y2) = match theta.family {
            Family::Univariate => (sample_normal(c.mu[0], c.sigma.s11, rng)?, None),
            Family::ContinuousContinuous => {
                let y = sample_mvn2(c.mu, &c.sigma, rng)?;
                (y[0], Some(y[1]))
            }
            Family::ContinuousBinary => {
                let y = sample_mvn2(c.mu, &c.sigma, rng)?;
                (y[0], Some(if y[1] > 0.0 { 1.0 } else { 0.0 }))
            }
        };
        units.push(Unit { z: t.z, d: t.z == Arm::Treated && s == Stratum::Complier, y1, y2 });
        labels.push(s);
    }
    Ok((ObservedDataset::new(units), labels))
}

/// Source of realized and replicated discrepancy vectors at a parameter
/// value. The model-based implementation is [`ModelCheck`]; tests can
/// substitute rigged ones.
pub trait PredictiveCheck: Sync {
    fn measures(&self) -> &[Discrepancy];
    fn realized(&self, theta: &Theta, rng: &mut RngStream) -> Result<Vec<Option<f64>>>;
    fn replicated(&self, theta: &Theta, rng: &mut RngStream) -> Result<Vec<Option<f64>>>;
}

pub struct ModelCheck<'a> {
    pub data: &'a ObservedDataset,
    pub measures: Vec<Discrepancy>,
}

impl<'a> ModelCheck<'a> {
    pub fn new(data: &'a ObservedDataset, measures: Vec<Discrepancy>) -> Self {
        ModelCheck { data, measures }
    }
}

impl PredictiveCheck for ModelCheck<'_> {
    fn measures(&self) -> &[Discrepancy] {
        &self.measures
    }

    fn realized(&self, theta: &Theta, rng: &mut RngStream) -> Result<Vec<Option<f64>>> {
        let labels = impute_strata(theta, self.data, rng)?;
        Ok(self.measures.iter().map(|&m| evaluate(m, self.data, &labels, theta)).collect())
    }

    fn replicated(&self, theta: &Theta, rng: &mut RngStream) -> Result<Vec<Option<f64>>> {
        let (rep, labels) = replicate_dataset(theta, self.data, rng)?;
        Ok(self.measures.iter().map(|&m| evaluate(m, &rep, &labels, theta)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PValueMethod {
    Pppv,
    Sppv,
    ModifiedSppv,
}

impl PValueMethod {
    pub fn name(self) -> &'static str {
        match self {
            PValueMethod::Pppv => "PPPV",
            PValueMethod::Sppv => "SPPV",
            PValueMethod::ModifiedSppv => "modified SPPV",
        }
    }
}

/// One p-value. `p` is `None` when no comparison was defined.
#[derive(Clone, Debug, PartialEq)]
pub struct PValue {
    pub measure: Discrepancy,
    pub p: Option<f64>,
    /// Comparisons that entered the p-value.
    pub used: usize,
    /// Comparisons skipped because a discrepancy was undefined.
    pub undefined: usize,
}

impl PValue {
    /// Whether more than 1% of comparisons were skipped.
    pub fn undefined_share_notable(&self) -> bool {
        let total = self.used + self.undefined;
        total > 0 && self.undefined * 100 > total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PValueReport {
    pub method: PValueMethod,
    pub seed: u64,
    /// Parameter draws used (PPPV: every stored draw; modified SPPV: `J`).
    pub draws: usize,
    /// Replicates per parameter draw (`K`; 1 for PPPV).
    pub replicates: usize,
    pub values: Vec<PValue>,
}

/// One value per measure, `None` where undefined.
type Discrepancies = Vec<Option<f64>>;

const PPPV_TAG: u64 = 0x7070_7076;
const SPPV_TAG: u64 = 0x7370_7076;
const MSPPV_TAG: u64 = 0x6d73_7070;

/// Posterior predictive p-value: share of draws with `Δrep > Δobs`, ties
/// counting one half. One replicate per draw.
pub fn pppv_with<E: Executor, C: PredictiveCheck>(exec: &E, draws: &[Theta], check: &C, seed: u64) -> Result<PValueReport> {
    if draws.is_empty() {
        return Err(Error::InsufficientData("no posterior draws"));
    }
    let pairs = exec.map((0..draws.len()).collect(), |t| -> Result<(Discrepancies, Discrepancies)> {
        let mut rng = RngStream::derived(seed, &[PPPV_TAG, t as u64]);
        let obs = check.realized(&draws[t], &mut rng)?;
        let rep = check.replicated(&draws[t], &mut rng)?;
        Ok((obs, rep))
    });
    let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(check.measures().len());
    for (k, &m) in check.measures().iter().enumerate() {
        let (mut score, mut used, mut undefined) = (0.0, 0usize, 0usize);
        for (obs, rep) in &pairs {
            match (obs[k], rep[k]) {
                (Some(o), Some(r)) => {
                    used += 1;
                    score += if r > o {
                        1.0
                    } else if r == o {
                        0.5
                    } else {
                        0.0
                    };
                }
                _ => undefined += 1,
            }
        }
        let p = (used > 0).then(|| score / used as f64);
        values.push(PValue { measure: m, p, used, undefined });
    }
    if values.iter().all(|v| v.p.is_none()) {
        return Err(Error::UndefinedDiscrepancy);
    }
    Ok(PValueReport { method: PValueMethod::Pppv, seed, draws: draws.len(), replicates: 1, values })
}

pub fn pppv<C: PredictiveCheck>(draws: &[Theta], check: &C, seed: u64) -> Result<PValueReport> {
    pppv_with(&Sequential, draws, check, seed)
}

/// Comparison counts behind one sampled p-value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SppvCounts {
    pub greater: usize,
    pub smaller: usize,
    pub ties: usize,
    pub undefined: usize,
}

/// Draws `p ~ Beta(a + 1, b + 1)` with `a = greater + ε·ties`,
/// `b = smaller + (1 − ε)·ties`, `ε ~ U(0, 1)`.
pub fn sppv_from_counts(c: SppvCounts, rng: &mut RngStream) -> Result<f64> {
    let eps = rng.open01();
    let t = c.ties as f64;
    sample_beta(c.greater as f64 + eps * t + 1.0, c.smaller as f64 + (1.0 - eps) * t + 1.0, rng)
}

fn sppv_counts<E: Executor, C: PredictiveCheck>(
    exec: &E,
    theta: &Theta,
    check: &C,
    k: usize,
    seed: u64,
    path: [u64; 2],
) -> Result<Vec<SppvCounts>> {
    let mut rng = RngStream::derived(seed, &[path[0], path[1], 0]);
    let obs = check.realized(theta, &mut rng)?;
    let reps = exec.map((0..k).collect(), |r| {
        let mut rng = RngStream::derived(seed, &[path[0], path[1], r as u64 + 1]);
        check.replicated(theta, &mut rng)
    });
    let reps = reps.into_iter().collect::<Result<Vec<_>>>()?;
    let mut counts = vec![SppvCounts::default(); obs.len()];
    for rep in &reps {
        for (i, c) in counts.iter_mut().enumerate() {
            match (obs[i], rep[i]) {
                (Some(o), Some(r)) if r > o => c.greater += 1,
                (Some(o), Some(r)) if r < o => c.smaller += 1,
                (Some(_), Some(_)) => c.ties += 1,
                _ => c.undefined += 1,
            }
        }
    }
    Ok(counts)
}

fn sppv_values(counts: &[SppvCounts], measures: &[Discrepancy], rng: &mut RngStream) -> Result<Vec<PValue>> {
    counts
        .iter()
        .zip(measures)
        .map(|(&c, &m)| {
            let used = c.greater + c.smaller + c.ties;
            let p = if used > 0 { Some(sppv_from_counts(c, rng)?) } else { None };
            Ok(PValue { measure: m, p, used, undefined: c.undefined })
        })
        .collect()
}

/// Sampled posterior p-value at the single draw `theta_star` with `k`
/// replicates.
pub fn sppv_with<E: Executor, C: PredictiveCheck>(exec: &E, theta_star: &Theta, check: &C, k: usize, seed: u64) -> Result<PValueReport> {
    if k == 0 {
        return Err(Error::InvalidConfig("SPPV needs at least one replicate".into()));
    }
    let counts = sppv_counts(exec, theta_star, check, k, seed, [SPPV_TAG, 0])?;
    let mut rng = RngStream::derived(seed, &[SPPV_TAG, u64::MAX]);
    let values = sppv_values(&counts, check.measures(), &mut rng)?;
    Ok(PValueReport { method: PValueMethod::Sppv, seed, draws: 1, replicates: k, values })
}

pub fn sppv<C: PredictiveCheck>(theta_star: &Theta, check: &C, k: usize, seed: u64) -> Result<PValueReport> {
    sppv_with(&Sequential, theta_star, check, k, seed)
}

/// Empirical `u`-quantile: the smallest value whose empirical CDF reaches
/// `u`.
pub fn empirical_quantile(values: &[f64], u: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = libm::ceil(u * v.len() as f64) as usize;
    v[k.clamp(1, v.len()) - 1]
}

/// Modified SPPV: draw `u ~ U(0, 1)`, pick `j` distinct posterior draws,
/// compute an SPPV with `k` replicates at each and return the empirical
/// `u`-quantile of those `j` values.
pub fn modified_sppv_with<E: Executor, C: PredictiveCheck>(
    exec: &E,
    draws: &[Theta],
    check: &C,
    j: usize,
    k: usize,
    seed: u64,
) -> Result<PValueReport> {
    if j == 0 || k == 0 {
        return Err(Error::InvalidConfig("modified SPPV needs J ≥ 1 and K ≥ 1".into()));
    }
    if j > draws.len() {
        return Err(Error::InvalidConfig(format!("J = {j} exceeds the {} available draws", draws.len())));
    }
    let mut rng = RngStream::derived(seed, &[MSPPV_TAG]);
    let u = rng.open01();
    let picks = pick_distinct(draws.len(), j, &mut rng);
    let per_draw = exec.map(picks.iter().copied().enumerate().collect(), |(slot, t)| -> Result<Vec<PValue>> {
        let counts = sppv_counts(&Sequential, &draws[t], check, k, seed, [MSPPV_TAG, slot as u64 + 1])?;
        let mut brng = RngStream::derived(seed, &[MSPPV_TAG, slot as u64 + 1, u64::MAX]);
        sppv_values(&counts, check.measures(), &mut brng)
    });
    let per_draw = per_draw.into_iter().collect::<Result<Vec<_>>>()?;
    let values = check
        .measures()
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let ps: Vec<f64> = per_draw.iter().filter_map(|v| v[i].p).collect();
            let used = per_draw.iter().map(|v| v[i].used).sum();
            let undefined = per_draw.iter().map(|v| v[i].undefined).sum();
            let p = (!ps.is_empty()).then(|| empirical_quantile(&ps, u));
            PValue { measure: m, p, used, undefined }
        })
        .collect();
    Ok(PValueReport { method: PValueMethod::ModifiedSppv, seed, draws: j, replicates: k, values })
}

pub fn modified_sppv<C: PredictiveCheck>(draws: &[Theta], check: &C, j: usize, k: usize, seed: u64) -> Result<PValueReport> {
    modified_sppv_with(&Sequential, draws, check, j, k, seed)
}

/// `j` distinct indices from `0..n` in draw order (partial Fisher-Yates).
fn pick_distinct(n: usize, j: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..j {
        let r = i + uniform_index(n - i, rng);
        idx.swap(i, r);
    }
    idx.truncate(j);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Sym2;
    use crate::model::CellParams;

    fn theta_cc() -> Theta {
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
    fn signal_noise_hand_case() {
        let values = [0.0, 2.0, 1.0, 3.0];
        let arms = [Arm::Control, Arm::Control, Arm::Treated, Arm::Treated];
        let labels = [Stratum::Complier; 4];
        let r = discrepancy_si_no_sn(&values, &arms, &labels, Stratum::Complier).unwrap();
        assert_eq!(r.signal, 1.0);
        assert!((r.noise - libm::sqrt(2.0)).abs() < 1e-15);
        assert!((r.signal_to_noise.unwrap() - 1.0 / libm::sqrt(2.0)).abs() < 1e-15);
        assert_eq!(
            discrepancy_si_no_sn(&values, &arms, &labels, Stratum::NeverTaker),
            Err(Error::UndefinedDiscrepancy)
        );
    }

    #[test]
    fn equal_means_zero_signal() {
        let values = [1.0, 3.0, 3.0, 1.0];
        let arms = [Arm::Control, Arm::Control, Arm::Treated, Arm::Treated];
        let r = discrepancy_si_no_sn(&values, &arms, &[Stratum::NeverTaker; 4], Stratum::NeverTaker).unwrap();
        assert_eq!(r.signal, 0.0);
    }

    #[test]
    fn chi2_single_unit_is_one() {
        let mut t = theta_cc();
        t.family = Family::Univariate;
        let c = *t.cell(Stratum::Complier, Arm::Treated);
        let data = ObservedDataset::new(vec![Unit { z: Arm::Treated, d: true, y1: c.mu[0] + libm::sqrt(c.sigma.s11), y2: None }]);
        let v = chi2_discrepancy(&data, &[Stratum::Complier], &t).unwrap();
        assert!((v.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chi2_five_unit_fixture() {
        let mut t = theta_cc();
        t.family = Family::ContinuousBinary;
        for c in t.cells.iter_mut().flatten() {
            c.sigma.s22 = 1.0;
            c.mu[1] = 0.3;
        }
        t.cells[1][1].mu[1] = -0.4;
        let units = vec![
            Unit { z: Arm::Treated, d: true, y1: 0.6, y2: Some(1.0) },
            Unit { z: Arm::Treated, d: false, y1: 4.0, y2: Some(0.0) },
            Unit { z: Arm::Control, d: false, y1: 2.2, y2: Some(1.0) },
            Unit { z: Arm::Control, d: false, y1: 3.1, y2: Some(0.0) },
            Unit { z: Arm::Control, d: false, y1: 2.5, y2: Some(1.0) },
        ];
        let labels = [Stratum::Complier, Stratum::NeverTaker, Stratum::Complier, Stratum::NeverTaker, Stratum::NeverTaker];
        let data = ObservedDataset::new(units);
        let got = chi2_discrepancy(&data, &labels, &t).unwrap();
        // Residuals by hand.
        let p = norm_cdf(0.3);
        let q = norm_cdf(-0.4);
        let bin = |y: f64, p: f64| (y - p) * (y - p) / (p * (1.0 - p));
        let expected = 0.01 / 0.01
            + bin(1.0, p)
            + 0.0625 / 0.04
            + bin(0.0, q)
            + 0.09 / 0.09
            + bin(1.0, p)
            + 0.1225 / 0.16
            + bin(0.0, p)
            + 0.0625 / 0.16
            + bin(1.0, p);
        assert!((got.value - expected).abs() < 1e-12, "{} {}", got.value, expected);
        assert_eq!(got.excluded, 0);
    }

    #[test]
    fn ks_single_point_at_median() {
        let mut t = theta_cc();
        t.pi_c = 1.0;
        let data = ObservedDataset::new(vec![Unit { z: Arm::Control, d: false, y1: 2.5, y2: None }]);
        assert!((ks_discrepancy(&data, &t) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn replicate_partitions_arms() {
        let template = ObservedDataset::new(
            (0..40).map(|i| Unit { z: Arm::from_treated(i % 3 == 0), d: false, y1: 0.0, y2: Some(0.0) }).collect(),
        );
        let mut t = theta_cc();
        let mut rng = RngStream::new(3);
        let (rep, labels) = replicate_dataset(&t, &template, &mut rng).unwrap();
        for z in Arm::ALL {
            assert_eq!(rep.arm_size(z), template.arm_size(z));
        }
        for (u, s) in rep.units.iter().zip(&labels) {
            assert_eq!(u.d, u.z == Arm::Treated && *s == Stratum::Complier);
        }
        t.pi_c = 1.0;
        let (rep, labels) = replicate_dataset(&t, &template, &mut rng).unwrap();
        assert!(labels.iter().all(|&s| s == Stratum::Complier));
        assert!(rep.units.iter().all(|u| u.d == (u.z == Arm::Treated)));
    }

    #[test]
    fn quantile_and_picks() {
        assert_eq!(empirical_quantile(&[0.3], 0.99), 0.3);
        assert_eq!(empirical_quantile(&[0.1, 0.2, 0.3, 0.4], 0.5), 0.2);
        assert_eq!(empirical_quantile(&[0.1, 0.2, 0.3, 0.4], 0.51), 0.3);
        let mut rng = RngStream::new(4);
        let mut p = pick_distinct(10, 10, &mut rng);
        p.sort();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sppv_all_greater_mean() {
        let mut rng = RngStream::new(5);
        let k = 8;
        let n = 50_000;
        let c = SppvCounts { greater: k, ..Default::default() };
        let m = (0..n).map(|_| sppv_from_counts(c, &mut rng).unwrap()).sum::<f64>() / n as f64;
        let mean = (k as f64 + 1.0) / (k as f64 + 2.0);
        let var = (k as f64 + 1.0) / ((k as f64 + 2.0) * (k as f64 + 2.0) * (k as f64 + 3.0));
        assert!((m - mean).abs() < 4.0 * libm::sqrt(var / n as f64));
    }
}
