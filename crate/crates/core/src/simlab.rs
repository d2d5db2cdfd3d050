//! Simulation study: the seven scenarios, data generation, model
//! comparisons and repeated-sampling metrics.

use alloc::vec::Vec;
use alloc::format;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::estimands::{gelman_rubin, summarize, tau, PosteriorSummary};
use crate::exec::{Executor, Sequential};
use crate::gibbs::{run_chains_with, ChainConfig, DrawStore};
use crate::linalg::Sym2;
use crate::model::{Arm, CellParams, Family, ModelSpec, ObservedDataset, Restriction, Stratum, Theta, Unit};
use crate::rng::{derive_seed, RngStream};
use crate::samplers::sample_mvn2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioId {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 7] =
        [ScenarioId::I, ScenarioId::II, ScenarioId::III, ScenarioId::IV, ScenarioId::V, ScenarioId::VI, ScenarioId::VII];

    pub fn roman(self) -> &'static str {
        ["I", "II", "III", "IV", "V", "VI", "VII"][self as usize]
    }

    pub fn parse(s: &str) -> Result<ScenarioId> {
        let t = s.trim();
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.roman().eq_ignore_ascii_case(t) || format!("{}", *id as usize + 1) == t)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario `{s}` (expected I to VII)")))
    }
}

/// True data-generating process of one scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scenario {
    pub id: ScenarioId,
    pub theta: Theta,
    pub n: usize,
    pub n_treated: usize,
}

pub const SCENARIO_N: usize = 600;
pub const SCENARIO_PI_C: f64 = 0.7;

pub fn scenario_params(id: ScenarioId) -> Scenario {
    let c0 = CellParams::bivariate([2.5, 8.0], Sym2::new(0.09, 0.24, 1.0));
    let c1 = CellParams::bivariate([0.5, 6.5], Sym2::new(0.01, 0.08, 1.0));
    let (mu0, mu1, s0, s1) = match id {
        ScenarioId::I => ([2.75, 12.0], [4.25, 12.0], Sym2::new(0.16, 0.16, 4.0), Sym2::new(0.04, 0.08, 4.0)),
        ScenarioId::II => ([2.75, 12.0], [4.25, 13.0], Sym2::new(0.16, 0.64, 4.0), Sym2::new(0.04, 0.32, 4.0)),
        ScenarioId::III => ([2.75, 12.0], [4.25, 13.0], Sym2::new(0.16, 0.16, 4.0), Sym2::new(0.04, 0.08, 4.0)),
        ScenarioId::IV => ([2.75, 12.0], [4.25, 24.0], Sym2::new(0.16, 0.64, 4.0), Sym2::new(0.04, 0.48, 9.0)),
        ScenarioId::V => ([2.75, 12.0], [4.25, 24.0], Sym2::new(0.16, 0.16, 4.0), Sym2::new(0.04, 0.12, 9.0)),
        ScenarioId::VI => ([2.75, 24.0], [4.25, 36.0], Sym2::new(0.16, 0.96, 9.0), Sym2::new(0.04, 0.80, 25.0)),
        ScenarioId::VII => ([2.75, 24.0], [4.25, 36.0], Sym2::new(0.16, 0.24, 9.0), Sym2::new(0.04, 0.20, 25.0)),
    };
    let theta = Theta {
        family: Family::ContinuousContinuous,
        pi_c: SCENARIO_PI_C,
        cells: [[c0, c1], [CellParams::bivariate(mu0, s0), CellParams::bivariate(mu1, s1)]],
    };
    Scenario { id, theta, n: SCENARIO_N, n_treated: SCENARIO_N / 2 }
}

/// A generated dataset with its true strata. Fitting code only ever sees
/// `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedData {
    pub data: ObservedDataset,
    pub truth: Vec<Stratum>,
}

/// Assigns exactly `n_treated` units to treatment by a random permutation,
/// then draws each unit's stratum and outcomes.
pub fn generate_dataset(scenario: &Scenario, seed: u64) -> Result<SimulatedData> {
    let mut rng = RngStream::new(seed);
    let mut arms: Vec<Arm> = (0..scenario.n).map(|i| Arm::from_treated(i < scenario.n_treated)).collect();
    arms.shuffle(&mut rng);
    let theta = &scenario.theta;
    let mut units = Vec::with_capacity(scenario.n);
    let mut truth = Vec::with_capacity(scenario.n);
    for z in arms {
        let s = if rng.open01() < theta.pi_c { Stratum::Complier } else { Stratum::NeverTaker };
        let c = theta.cell(s, z);
        let y = sample_mvn2(c.mu, &c.sigma, &mut rng)?;
        units.push(Unit { z, d: z == Arm::Treated && s == Stratum::Complier, y1: y[0], y2: Some(y[1]) });
        truth.push(s);
    }
    Ok(SimulatedData { data: ObservedDataset::new(units), truth })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    Univariate,
    UnivariateEr,
    Bivariate,
    BivariatePer,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] =
        [ModelVariant::Univariate, ModelVariant::UnivariateEr, ModelVariant::Bivariate, ModelVariant::BivariatePer];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Univariate => "univariate",
            ModelVariant::UnivariateEr => "univariate-er",
            ModelVariant::Bivariate => "bivariate",
            ModelVariant::BivariatePer => "bivariate-per",
        }
    }

    pub fn parse(s: &str) -> Result<ModelVariant> {
        let t = s.trim().to_ascii_lowercase().replace('_', "-");
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == t)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model variant `{s}`")))
    }

    /// Model spec for this variant; `bivariate_family` is used by the
    /// bivariate variants.
    pub fn spec(self, bivariate_family: Family) -> Result<ModelSpec> {
        match self {
            ModelVariant::Univariate => ModelSpec::new(Family::Univariate, Restriction::Unrestricted),
            ModelVariant::UnivariateEr => ModelSpec::new(Family::Univariate, Restriction::Er),
            ModelVariant::Bivariate => ModelSpec::new(bivariate_family, Restriction::Unrestricted),
            ModelVariant::BivariatePer => ModelSpec::new(bivariate_family, Restriction::Per),
        }
    }

    /// `τ_n` is fixed at zero by the restriction.
    pub fn forces_tau_n_zero(self) -> bool {
        self == ModelVariant::UnivariateEr
    }
}

/// Posterior summaries of one variant fitted to one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantFit {
    pub variant: ModelVariant,
    pub tau_c: PosteriorSummary,
    /// Absent when the variant forces `τ_n = 0`.
    pub tau_n: Option<PosteriorSummary>,
    pub pi_c: PosteriorSummary,
    /// PSRF of `(τ_c, τ_n, π_c)`; `None` with a single chain or when forced.
    pub psrf: [Option<f64>; 3],
}

/// Summaries of a fitted draw store.
pub fn summarize_fit(store: &DrawStore, variant: ModelVariant) -> Result<VariantFit> {
    let chains = |f: &dyn Fn(&Theta) -> f64| -> Vec<Vec<f64>> {
        store.chains.iter().map(|c| c.draws.iter().map(f).collect()).collect()
    };
    let tc = chains(&|t| tau(t, Stratum::Complier));
    let tn = chains(&|t| tau(t, Stratum::NeverTaker));
    let pc = chains(&|t| t.pi_c);
    let pooled = |c: &[Vec<f64>]| c.concat();
    let psrf = |c: &[Vec<f64>]| if c.len() > 1 { gelman_rubin(c).ok() } else { None };
    let forced = variant.forces_tau_n_zero();
    Ok(VariantFit {
        variant,
        tau_c: summarize(&pooled(&tc))?,
        tau_n: if forced { None } else { Some(summarize(&pooled(&tn))?) },
        pi_c: summarize(&pooled(&pc))?,
        psrf: [psrf(&tc), if forced { None } else { psrf(&tn) }, psrf(&pc)],
    })
}

/// Fits `variant` to `data` with chain seeds derived from `seed`.
pub fn fit_variant(
    data: &ObservedDataset,
    variant: ModelVariant,
    bivariate_family: Family,
    config: &ChainConfig,
    seed: u64,
) -> Result<(DrawStore, VariantFit)> {
    fit_variant_with(&Sequential, data, variant, bivariate_family, config, seed)
}

/// As [`fit_variant`], running the chains through `exec`.
pub fn fit_variant_with<E: Executor>(
    exec: &E,
    data: &ObservedDataset,
    variant: ModelVariant,
    bivariate_family: Family,
    config: &ChainConfig,
    seed: u64,
) -> Result<(DrawStore, VariantFit)> {
    let spec = variant.spec(bivariate_family)?;
    let store = run_chains_with(exec, data, &spec, &variant_chain_config(variant, config, seed))?;
    let fit = summarize_fit(&store, variant)?;
    Ok((store, fit))
}

/// Chain configuration used for `variant`: the master seed is derived
/// from `seed` and the variant.
pub fn variant_chain_config(variant: ModelVariant, config: &ChainConfig, seed: u64) -> ChainConfig {
    ChainConfig { seed: derive_seed(seed, &[variant as u64]), chain_seeds: None, ..config.clone() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub scenario: ScenarioId,
    pub data_seed: u64,
    pub fits: Vec<VariantFit>,
}

impl Comparison {
    pub fn fit(&self, v: ModelVariant) -> Option<&VariantFit> {
        self.fits.iter().find(|f| f.variant == v)
    }
}

/// Generates one dataset from `scenario` (seed `seed`) and fits every
/// variant to it.
pub fn run_comparison(scenario: &Scenario, variants: &[ModelVariant], config: &ChainConfig, seed: u64) -> Result<Comparison> {
    run_comparison_with(&Sequential, scenario, variants, config, seed)
}

/// As [`run_comparison`], fitting the variants through `exec`.
pub fn run_comparison_with<E: Executor>(
    exec: &E,
    scenario: &Scenario,
    variants: &[ModelVariant],
    config: &ChainConfig,
    seed: u64,
) -> Result<Comparison> {
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no model variants requested".into()));
    }
    let sim = generate_dataset(scenario, seed)?;
    let data = &sim.data;
    let fits = exec.map(variants.to_vec(), |v| fit_variant_with(exec, data, v, Family::ContinuousContinuous, config, seed).map(|r| r.1));
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Comparison { scenario: scenario.id, data_seed: seed, fits })
}

/// Point estimate and 95% interval of one estimand from one replication.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntervalEstimate {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl From<&PosteriorSummary> for IntervalEstimate {
    fn from(s: &PosteriorSummary) -> Self {
        IntervalEstimate { estimate: s.median, lower: s.q025, upper: s.q975 }
    }
}

/// Repeated-sampling metrics for one estimand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveryMetrics {
    pub truth: f64,
    pub replications: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    /// `100 · bias / |truth|`; NaN when the truth is zero.
    pub percent_bias: f64,
    pub mse: f64,
    pub coverage: f64,
    pub mean_width: f64,
}

impl RecoveryMetrics {
    pub fn from_estimates(truth: f64, estimates: &[IntervalEstimate]) -> Result<RecoveryMetrics> {
        if estimates.is_empty() {
            return Err(Error::InsufficientData("no replications"));
        }
        let r = estimates.len() as f64;
        let mean_estimate = estimates.iter().map(|e| e.estimate).sum::<f64>() / r;
        let bias = mean_estimate - truth;
        let mse = estimates.iter().map(|e| (e.estimate - truth) * (e.estimate - truth)).sum::<f64>() / r;
        let coverage = estimates.iter().filter(|e| e.lower <= truth && truth <= e.upper).count() as f64 / r;
        let mean_width = estimates.iter().map(|e| e.upper - e.lower).sum::<f64>() / r;
        let percent_bias = if truth == 0.0 { f64::NAN } else { 100.0 * bias / libm::fabs(truth) };
        Ok(RecoveryMetrics { truth, replications: estimates.len(), mean_estimate, bias, percent_bias, mse, coverage, mean_width })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantRecovery {
    pub variant: ModelVariant,
    pub tau_c: RecoveryMetrics,
    /// Absent when the variant forces `τ_n = 0`.
    pub tau_n: Option<RecoveryMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryReport {
    pub scenario: ScenarioId,
    pub replications: usize,
    pub variants: Vec<VariantRecovery>,
}

/// Produces interval estimates for one variant on one dataset. The Gibbs
/// fit is [`GibbsEstimator`]; tests inject stubs.
pub trait Estimator: Sync {
    fn estimate(&self, data: &ObservedDataset, variant: ModelVariant, seed: u64) -> Result<VariantFit>;
}

pub struct GibbsEstimator {
    pub config: ChainConfig,
}

impl Estimator for GibbsEstimator {
    fn estimate(&self, data: &ObservedDataset, variant: ModelVariant, seed: u64) -> Result<VariantFit> {
        fit_variant(data, variant, Family::ContinuousContinuous, &self.config, seed).map(|r| r.1)
    }
}

/// Fits every variant to `r` datasets with seeds `seed + i` and aggregates
/// the posterior medians and 95% intervals. Replications run through
/// `exec`.
pub fn repeated_sampling_study<E: Executor, M: Estimator>(
    exec: &E,
    scenario: &Scenario,
    r: usize,
    variants: &[ModelVariant],
    estimator: &M,
    seed: u64,
) -> Result<RecoveryReport> {
    if r < 2 {
        return Err(Error::InvalidConfig("a repeated-sampling study needs at least two replications".into()));
    }
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no model variants requested".into()));
    }
    let runs = exec.map((0..r).collect(), |i| -> Result<Vec<VariantFit>> {
        let data_seed = seed.wrapping_add(i as u64);
        let sim = generate_dataset(scenario, data_seed)?;
        variants.iter().map(|&v| estimator.estimate(&sim.data, v, data_seed)).collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let truth_c = tau(&scenario.theta, Stratum::Complier);
    let truth_n = tau(&scenario.theta, Stratum::NeverTaker);
    let mut out = Vec::with_capacity(variants.len());
    for (k, &variant) in variants.iter().enumerate() {
        let tc: Vec<IntervalEstimate> = runs.iter().map(|f| (&f[k].tau_c).into()).collect();
        let tn: Option<Vec<IntervalEstimate>> = runs.iter().map(|f| f[k].tau_n.as_ref().map(Into::into)).collect();
        out.push(VariantRecovery {
            variant,
            tau_c: RecoveryMetrics::from_estimates(truth_c, &tc)?,
            tau_n: tn.map(|v| RecoveryMetrics::from_estimates(truth_n, &v)).transpose()?,
        });
    }
    Ok(RecoveryReport { scenario: scenario.id, replications: r, variants: out })
}

/// Scenario datasets for every id, in order, with seeds derived from `seed`.
pub fn generate_all(seed: u64) -> Result<Vec<(ScenarioId, SimulatedData)>> {
    ScenarioId::ALL
        .iter()
        .map(|&id| Ok((id, generate_dataset(&scenario_params(id), derive_seed(seed, &[id as u64]))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimands::correlation_ratio;

    #[test]
    fn table_constants() {
        let s = scenario_params(ScenarioId::I);
        assert_eq!(s.theta.cell(Stratum::NeverTaker, Arm::Treated).sigma, Sym2::new(0.04, 0.08, 4.0));
        for id in ScenarioId::ALL {
            let t = scenario_params(id).theta;
            t.validate().unwrap();
            assert_eq!(tau(&t, Stratum::Complier), -2.0);
            assert_eq!(tau(&t, Stratum::NeverTaker), 1.5);
            for c in t.cells.iter().flatten() {
                assert!(c.sigma.is_positive_definite());
            }
        }
    }

    #[test]
    fn eta_squared_column() {
        let cases = [
            (ScenarioId::I, 0.639, 0.770),
            (ScenarioId::II, 0.639, 0.824),
            (ScenarioId::III, 0.639, 0.824),
            (ScenarioId::IV, 0.639, 0.950),
            (ScenarioId::V, 0.639, 0.950),
            (ScenarioId::VI, 0.941, 0.957),
            (ScenarioId::VII, 0.941, 0.957),
        ];
        for (id, e0, e1) in cases {
            let t = scenario_params(id).theta;
            let r0 = libm::round(correlation_ratio(&t, Arm::Control) * 1000.0) / 1000.0;
            let r1 = libm::round(correlation_ratio(&t, Arm::Treated) * 1000.0) / 1000.0;
            assert_eq!((r0, r1), (e0, e1), "{id:?}");
        }
    }

    #[test]
    fn generated_design() {
        let s = scenario_params(ScenarioId::I);
        let a = generate_dataset(&s, 42).unwrap();
        assert_eq!(a.data.arm_size(Arm::Treated), 300);
        assert_eq!(a.data.arm_size(Arm::Control), 300);
        let frac = a.truth.iter().filter(|&&s| s == Stratum::Complier).count() as f64 / 600.0;
        assert!((frac - 0.7).abs() < 0.075);
        assert_eq!(a, generate_dataset(&s, 42).unwrap());
        for (u, s) in a.data.units.iter().zip(&a.truth) {
            assert_eq!(u.d, u.z == Arm::Treated && *s == Stratum::Complier);
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!(ScenarioId::parse("vi").unwrap(), ScenarioId::VI);
        assert_eq!(ScenarioId::parse("3").unwrap(), ScenarioId::III);
        assert!(ScenarioId::parse("VIII").is_err());
        assert_eq!(ModelVariant::parse("Bivariate_PER").unwrap(), ModelVariant::BivariatePer);
    }

    #[test]
    fn metrics_arithmetic() {
        let est = [IntervalEstimate { estimate: -1.9, lower: -2.5, upper: -1.5 }; 4];
        let m = RecoveryMetrics::from_estimates(-2.0, &est).unwrap();
        assert!((m.bias - 0.1).abs() < 1e-12);
        assert!((m.percent_bias - 5.0).abs() < 1e-9);
        assert!((m.mse - 0.01).abs() < 1e-12);
        assert_eq!(m.coverage, 1.0);
        assert!(m.mse >= m.bias * m.bias - 1e-12);
    }

    struct Truthful;

    impl Estimator for Truthful {
        fn estimate(&self, _: &ObservedDataset, variant: ModelVariant, _: u64) -> Result<VariantFit> {
            let at = |v: f64| PosteriorSummary { mean: v, median: v, q025: v, q975: v, width: 0.0, prob_negative: 0.0 };
            Ok(VariantFit { variant, tau_c: at(-2.0), tau_n: Some(at(1.5)), pi_c: at(0.7), psrf: [None; 3] })
        }
    }

    #[test]
    fn truthful_estimator_bookkeeping() {
        let s = scenario_params(ScenarioId::II);
        let rep = repeated_sampling_study(&Sequential, &s, 3, &[ModelVariant::Bivariate], &Truthful, 9).unwrap();
        let v = &rep.variants[0];
        assert_eq!((v.tau_c.bias, v.tau_c.mse, v.tau_c.coverage), (0.0, 0.0, 1.0));
        let n = v.tau_n.unwrap();
        assert_eq!((n.bias, n.mse, n.coverage), (0.0, 0.0, 1.0));
        assert!(repeated_sampling_study(&Sequential, &s, 1, &[ModelVariant::Bivariate], &Truthful, 9).is_err());
        assert!(run_comparison(&s, &[], &ChainConfig::default(), 1).is_err());
    }
}
