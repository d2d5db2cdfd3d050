//! Data model, model families and likelihoods.
//!
//! Units are assigned to an arm `z`, and only assigned units can take the
//! treatment, so every control unit has `d = 0`. Treated units reveal their
//! stratum through `d`; control units are a two-component mixture of
//! compliers and never-takers.
//!
//! Each (stratum, arm) cell carries a mean vector and covariance for the
//! outcome pair `(y1, y2)`:
//!
//! - [`Family::Univariate`]: `y1 ~ N(μ1, σ11)`, `y2` is ignored.
//! - [`Family::ContinuousContinuous`]: `(y1, y2) ~ N2(μ, Σ)`.
//! - [`Family::ContinuousBinary`]: `(y1, y2*) ~ N2(μ, Σ)` with `σ22 = 1` and
//!   `y2 = 1{y2* > 0}` (a probit margin `P(y2 = 1) = Φ(μ2)`).

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
pub use crate::linalg::Sym2;
use crate::special::{ln_beta, ln_gamma, ln_norm_cdf, log_add_exp, LN_SQRT_2PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stratum {
    Complier,
    NeverTaker,
}

impl Stratum {
    pub const ALL: [Stratum; 2] = [Stratum::Complier, Stratum::NeverTaker];

    pub const fn index(self) -> usize {
        match self {
            Stratum::Complier => 0,
            Stratum::NeverTaker => 1,
        }
    }

    pub const fn short(self) -> &'static str {
        match self {
            Stratum::Complier => "c",
            Stratum::NeverTaker => "n",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub const fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub const fn from_treated(z: bool) -> Arm {
        if z {
            Arm::Treated
        } else {
            Arm::Control
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Univariate,
    ContinuousBinary,
    ContinuousContinuous,
}

impl Family {
    /// Number of modelled outcome coordinates.
    pub const fn dim(self) -> usize {
        match self {
            Family::Univariate => 1,
            _ => 2,
        }
    }

    pub const fn is_bivariate(self) -> bool {
        !matches!(self, Family::Univariate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Restriction {
    Unrestricted,
    /// Never-taker outcome distributions equal across arms (all outcomes).
    Er,
    /// Never-taker distribution of the secondary outcome equal across arms.
    Per,
}

/// One study unit. `y2` is `None` when no secondary outcome is recorded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Unit {
    pub z: Arm,
    pub d: bool,
    pub y1: f64,
    pub y2: Option<f64>,
}

impl Unit {
    pub fn outcome(&self) -> Outcome {
        Outcome { y1: self.y1, y2: self.y2.unwrap_or(f64::NAN) }
    }

    /// Stratum implied by the observed data, if it is not latent.
    pub fn observed_stratum(&self) -> Option<Stratum> {
        match (self.z, self.d) {
            (Arm::Treated, true) => Some(Stratum::Complier),
            (Arm::Treated, false) => Some(Stratum::NeverTaker),
            (Arm::Control, _) => None,
        }
    }
}

/// Outcome point handed to the cell densities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub y1: f64,
    pub y2: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservedDataset {
    pub units: Vec<Unit>,
}

impl ObservedDataset {
    pub fn new(units: Vec<Unit>) -> Self {
        ObservedDataset { units }
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn arm_size(&self, z: Arm) -> usize {
        self.units.iter().filter(|u| u.z == z).count()
    }

    /// Units with the given `(z, d)` pair.
    pub fn group(&self, z: Arm, d: bool) -> impl Iterator<Item = &Unit> + '_ {
        self.units.iter().filter(move |u| u.z == z && u.d == d)
    }

    /// Number of units whose stratum is latent.
    pub fn latent_count(&self) -> usize {
        self.arm_size(Arm::Control)
    }
}

/// Mean and covariance of one (stratum, arm) cell. Univariate cells use
/// `mu[0]` and `sigma.s11` only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellParams {
    pub mu: [f64; 2],
    pub sigma: Sym2,
}

impl CellParams {
    pub const fn univariate(mu1: f64, s11: f64) -> Self {
        CellParams { mu: [mu1, 0.0], sigma: Sym2 { s11, s12: 0.0, s22: 1.0 } }
    }

    pub const fn bivariate(mu: [f64; 2], sigma: Sym2) -> Self {
        CellParams { mu, sigma }
    }

    /// Checks the covariance invariants of `family`.
    pub fn check(&self, family: Family) -> bool {
        let mu_ok = self.mu[0].is_finite() && (family.dim() == 1 || self.mu[1].is_finite());
        let cov_ok = match family {
            Family::Univariate => self.sigma.s11.is_finite() && self.sigma.s11 > 0.0,
            Family::ContinuousContinuous => self.sigma.is_positive_definite(),
            Family::ContinuousBinary => {
                self.sigma.s22 == 1.0
                    && self.sigma.s11.is_finite()
                    && self.sigma.s12.is_finite()
                    && self.sigma.s11 > self.sigma.s12 * self.sigma.s12
            }
        };
        mu_ok && cov_ok
    }
}

/// Full parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theta {
    pub family: Family,
    pub pi_c: f64,
    /// Indexed `[stratum.index()][arm.index()]`.
    pub cells: [[CellParams; 2]; 2],
}

impl Theta {
    pub fn cell(&self, s: Stratum, z: Arm) -> &CellParams {
        &self.cells[s.index()][z.index()]
    }

    pub fn cell_mut(&mut self, s: Stratum, z: Arm) -> &mut CellParams {
        &mut self.cells[s.index()][z.index()]
    }

    pub fn pi(&self, s: Stratum) -> f64 {
        match s {
            Stratum::Complier => self.pi_c,
            Stratum::NeverTaker => 1.0 - self.pi_c,
        }
    }

    /// Validates `pi_c ∈ [0, 1]` and every cell. The closed interval is
    /// accepted so degenerate mixtures can be evaluated.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi_c) {
            return Err(Error::InvalidParameter { what: "pi_c", value: self.pi_c });
        }
        for s in Stratum::ALL {
            for z in Arm::ALL {
                if !self.cell(s, z).check(self.family) {
                    return Err(Error::NotPositiveDefinite { cell: Some((s, z)) });
                }
            }
        }
        Ok(())
    }

    /// Flattened parameter vector for diagnostics and dumps:
    /// `pi_c`, then per cell (c0, c1, n0, n1) `mu1, mu2, s11, s12, s22`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(21);
        v.push(self.pi_c);
        for s in Stratum::ALL {
            for z in Arm::ALL {
                let c = self.cell(s, z);
                v.extend_from_slice(&[c.mu[0], c.mu[1], c.sigma.s11, c.sigma.s12, c.sigma.s22]);
            }
        }
        v
    }

    pub fn from_slice(family: Family, v: &[f64]) -> Result<Theta> {
        if v.len() != 21 {
            return Err(Error::InvalidParameter { what: "theta length", value: v.len() as f64 });
        }
        let mut cells = [[CellParams::univariate(0.0, 1.0); 2]; 2];
        let mut k = 1;
        for s in Stratum::ALL {
            for z in Arm::ALL {
                cells[s.index()][z.index()] = CellParams {
                    mu: [v[k], v[k + 1]],
                    sigma: Sym2::new(v[k + 2], v[k + 3], v[k + 4]),
                };
                k += 5;
            }
        }
        Ok(Theta { family, pi_c: v[0], cells })
    }
}

/// Truncated bivariate normal prior on `(σ11, σ12)` restricted to
/// `σ11 > σ12²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstrainedCovPrior {
    pub mean: [f64; 2],
    pub cov: Sym2,
}

impl ConstrainedCovPrior {
    /// Log density up to the (constant) truncation normaliser; `-∞` outside
    /// the region.
    pub fn log_density(&self, sigma: [f64; 2]) -> f64 {
        if !in_probit_region(sigma) {
            return f64::NEG_INFINITY;
        }
        let inv = match self.cov.inverse() {
            Some(i) => i,
            None => return f64::NAN,
        };
        let r = [sigma[0] - self.mean[0], sigma[1] - self.mean[1]];
        -libm::log(2.0 * PI) - 0.5 * libm::log(self.cov.det()) - 0.5 * inv.quad_form(r)
    }
}

/// `σ11 > 0` and `σ11 > σ12²`.
pub fn in_probit_region(sigma: [f64; 2]) -> bool {
    sigma[0] > 0.0 && sigma[0] > sigma[1] * sigma[1] && sigma[0].is_finite() && sigma[1].is_finite()
}

/// Prior hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Priors {
    /// Variance `v_a` of the independent normal priors on every mean coordinate.
    pub mean_var: f64,
    /// Beta prior on `pi_c`.
    pub pi_a: f64,
    pub pi_b: f64,
    /// Probit family: prior on `(σ11, σ12)`.
    pub cov_probit: ConstrainedCovPrior,
    /// Univariate family: inverse-gamma prior on `σ11`.
    pub ig_shape: f64,
    pub ig_rate: f64,
    /// Continuous bivariate family: inverse-Wishart prior on `Σ`.
    pub iw_df: f64,
    pub iw_scale: Sym2,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            mean_var: 100.0,
            pi_a: 1.0,
            pi_b: 1.0,
            cov_probit: ConstrainedCovPrior { mean: [1.0, 0.0], cov: Sym2::diag(100.0, 100.0) },
            ig_shape: 0.01,
            ig_rate: 0.01,
            iw_df: 4.0,
            iw_scale: Sym2::IDENTITY,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("mean_var", self.mean_var),
            ("pi_a", self.pi_a),
            ("pi_b", self.pi_b),
            ("ig_shape", self.ig_shape),
            ("ig_rate", self.ig_rate),
        ];
        for (what, value) in pos {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter { what, value });
            }
        }
        if !(self.iw_df > 1.0) {
            return Err(Error::InvalidParameter { what: "iw_df", value: self.iw_df });
        }
        if !self.iw_scale.is_positive_definite() {
            return Err(Error::InvalidParameter { what: "iw_scale", value: self.iw_scale.det() });
        }
        if !self.cov_probit.cov.is_positive_definite() {
            return Err(Error::InvalidParameter {
                what: "cov_probit.cov",
                value: self.cov_probit.cov.det(),
            });
        }
        Ok(())
    }
}

/// Model family, restriction and priors.
///
/// `known_covariances`, when set, fixes every cell covariance at the given
/// value; only means and `pi_c` are then sampled. The brute-force grid
/// oracle relies on this.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub restriction: Restriction,
    pub priors: Priors,
    pub known_covariances: Option<[[Sym2; 2]; 2]>,
}

impl ModelSpec {
    pub fn new(family: Family, restriction: Restriction) -> Result<ModelSpec> {
        let spec = ModelSpec { family, restriction, priors: Priors::default(), known_covariances: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_priors(mut self, priors: Priors) -> Self {
        self.priors = priors;
        self
    }

    pub fn with_known_covariances(mut self, cov: [[Sym2; 2]; 2]) -> Self {
        self.known_covariances = Some(cov);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.restriction == Restriction::Per && self.family == Family::Univariate {
            return Err(Error::UnsupportedRestriction(
                "partial exclusion restriction needs a secondary outcome",
            ));
        }
        self.priors.validate()
    }

    /// Whether the mean coordinate `k` of cell `(s, z)` is a free parameter
    /// (not tied to another cell).
    pub fn mean_is_free(&self, s: Stratum, z: Arm, k: usize) -> bool {
        if k >= self.family.dim() {
            return false;
        }
        let tied_cell = s == Stratum::NeverTaker && z == Arm::Treated;
        match self.restriction {
            Restriction::Unrestricted => true,
            Restriction::Er => !tied_cell,
            Restriction::Per => !(tied_cell && k == 1),
        }
    }

    /// Whether the covariance of `(s, z)` is a free parameter.
    pub fn cov_is_free(&self, s: Stratum, z: Arm) -> bool {
        if self.known_covariances.is_some() {
            return false;
        }
        !(self.restriction == Restriction::Er && s == Stratum::NeverTaker && z == Arm::Treated)
    }
}

/// Checks the dataset invariants for `spec.family` and returns the projected
/// dataset (the secondary outcome is dropped for the univariate family).
pub fn validate_dataset(data: &ObservedDataset, spec: &ModelSpec) -> Result<ObservedDataset> {
    if data.units.is_empty() {
        return Err(Error::InvalidDataset("no units"));
    }
    let mut out = Vec::with_capacity(data.n());
    for (index, u) in data.units.iter().enumerate() {
        if u.z == Arm::Control && u.d {
            return Err(Error::InvalidUnit { index, rule: "one-sided noncompliance violated (z=0 with d=1)" });
        }
        if !u.y1.is_finite() {
            return Err(Error::InvalidUnit { index, rule: "primary outcome is not finite" });
        }
        let y2 = match spec.family {
            Family::Univariate => None,
            Family::ContinuousContinuous => match u.y2 {
                Some(v) if v.is_finite() => Some(v),
                Some(_) => return Err(Error::InvalidUnit { index, rule: "secondary outcome is not finite" }),
                None => return Err(Error::InvalidUnit { index, rule: "secondary outcome missing" }),
            },
            Family::ContinuousBinary => match u.y2 {
                Some(v) if v == 0.0 || v == 1.0 => Some(v),
                Some(_) => return Err(Error::InvalidUnit { index, rule: "secondary outcome must be 0 or 1" }),
                None => return Err(Error::InvalidUnit { index, rule: "secondary outcome missing" }),
            },
        };
        out.push(Unit { y2, ..*u });
    }
    let ds = ObservedDataset::new(out);
    if ds.arm_size(Arm::Control) == 0 || ds.arm_size(Arm::Treated) == 0 {
        return Err(Error::InvalidDataset("both arms must be non-empty"));
    }
    Ok(ds)
}

/// Precomputed log-density of one cell.
#[derive(Clone, Copy, Debug)]
pub struct CellKernel {
    family: Family,
    mu: [f64; 2],
    log_norm: f64,
    inv: Sym2,
    // Probit family: regression of y2* on y1.
    slope: f64,
    cond_sd: f64,
}

impl CellKernel {
    pub fn new(cell: &CellParams, family: Family) -> Result<CellKernel> {
        if !cell.check(family) {
            return Err(Error::NotPositiveDefinite { cell: None });
        }
        let sg = cell.sigma;
        let (log_norm, inv, slope, cond_sd) = match family {
            Family::Univariate | Family::ContinuousBinary => {
                let log_norm = -LN_SQRT_2PI - 0.5 * libm::log(sg.s11);
                let inv = Sym2::new(1.0 / sg.s11, 0.0, 0.0);
                if family == Family::ContinuousBinary {
                    let slope = sg.s12 / sg.s11;
                    let cv = 1.0 - sg.s12 * slope;
                    (log_norm, inv, slope, libm::sqrt(cv))
                } else {
                    (log_norm, inv, 0.0, 1.0)
                }
            }
            Family::ContinuousContinuous => {
                let inv = sg.inverse().ok_or(Error::NotPositiveDefinite { cell: None })?;
                (-libm::log(2.0 * PI) - 0.5 * libm::log(sg.det()), inv, 0.0, 1.0)
            }
        };
        Ok(CellKernel { family, mu: cell.mu, log_norm, inv, slope, cond_sd })
    }

    pub fn log_density(&self, y: Outcome) -> f64 {
        let r1 = y.y1 - self.mu[0];
        match self.family {
            Family::Univariate => self.log_norm - 0.5 * self.inv.s11 * r1 * r1,
            Family::ContinuousContinuous => {
                self.log_norm - 0.5 * self.inv.quad_form([r1, y.y2 - self.mu[1]])
            }
            Family::ContinuousBinary => {
                let m = (self.mu[1] + self.slope * r1) / self.cond_sd;
                let margin = if y.y2 == 1.0 {
                    ln_norm_cdf(m)
                } else if y.y2 == 0.0 {
                    ln_norm_cdf(-m)
                } else {
                    f64::NAN
                };
                self.log_norm - 0.5 * self.inv.s11 * r1 * r1 + margin
            }
        }
    }

    /// Probit family: mean and standard deviation of `y2* | y1`.
    pub fn latent_conditional(&self, y1: f64) -> (f64, f64) {
        (self.mu[1] + self.slope * (y1 - self.mu[0]), self.cond_sd)
    }
}

/// Log density of an outcome point under one cell.
///
/// For the probit family this is the normal density of `y1` times the
/// conditional probit probability of the observed `y2`, with `y2*`
/// integrated out.
pub fn cell_log_density(y: Outcome, cell: &CellParams, family: Family) -> Result<f64> {
    Ok(CellKernel::new(cell, family)?.log_density(y))
}

/// Kernels and log stratum probabilities for a whole `Theta`.
#[derive(Clone, Copy, Debug)]
pub struct ThetaKernels {
    pub ln_pi: [f64; 2],
    pub cells: [[CellKernel; 2]; 2],
}

impl ThetaKernels {
    pub fn new(theta: &Theta) -> Result<ThetaKernels> {
        theta.validate()?;
        let mk = |s: Stratum, z: Arm| {
            CellKernel::new(theta.cell(s, z), theta.family)
                .map_err(|_| Error::NotPositiveDefinite { cell: Some((s, z)) })
        };
        Ok(ThetaKernels {
            ln_pi: [libm::log(theta.pi_c), libm::log(1.0 - theta.pi_c)],
            cells: [
                [mk(Stratum::Complier, Arm::Control)?, mk(Stratum::Complier, Arm::Treated)?],
                [mk(Stratum::NeverTaker, Arm::Control)?, mk(Stratum::NeverTaker, Arm::Treated)?],
            ],
        })
    }

    pub fn cell(&self, s: Stratum, z: Arm) -> &CellKernel {
        &self.cells[s.index()][z.index()]
    }

    /// `ln π_s + ln f_{s,z}(y)`; zero-probability strata give `-∞` without
    /// evaluating the density.
    pub fn joint(&self, s: Stratum, z: Arm, y: Outcome) -> f64 {
        let lp = self.ln_pi[s.index()];
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp + self.cell(s, z).log_density(y)
    }

    /// Contribution of one unit to the observed-data log likelihood.
    pub fn unit_log_likelihood(&self, u: &Unit) -> f64 {
        let y = u.outcome();
        match u.observed_stratum() {
            Some(s) => self.joint(s, u.z, y),
            None => log_add_exp(
                self.joint(Stratum::Complier, Arm::Control, y),
                self.joint(Stratum::NeverTaker, Arm::Control, y),
            ),
        }
    }
}

fn check_outcomes(data: &ObservedDataset, family: Family) -> Result<()> {
    if family == Family::Univariate {
        return Ok(());
    }
    for (index, u) in data.units.iter().enumerate() {
        if u.y2.is_none() {
            return Err(Error::InvalidUnit { index, rule: "secondary outcome missing" });
        }
    }
    Ok(())
}

/// Observed-data log likelihood: treated units contribute their known
/// stratum's term, control units a two-component mixture.
pub fn observed_data_log_likelihood(theta: &Theta, data: &ObservedDataset) -> Result<f64> {
    check_outcomes(data, theta.family)?;
    let k = ThetaKernels::new(theta)?;
    Ok(data.units.iter().map(|u| k.unit_log_likelihood(u)).sum())
}

/// `0·ln 0 = 0` convention.
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * libm::log(y)
    }
}

fn ln_inverse_gamma(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * libm::log(rate) - ln_gamma(shape) - (shape + 1.0) * libm::log(x) - rate / x
}

fn ln_inverse_wishart2(sigma: &Sym2, df: f64, scale: &Sym2) -> f64 {
    let inv = match sigma.inverse() {
        Some(i) => i,
        None => return f64::NEG_INFINITY,
    };
    let p = 2.0;
    let ln_mgamma = 0.5 * libm::log(PI) + ln_gamma(0.5 * df) + ln_gamma(0.5 * df - 0.5);
    0.5 * df * libm::log(scale.det())
        - 0.5 * df * p * core::f64::consts::LN_2
        - ln_mgamma
        - 0.5 * (df + p + 1.0) * libm::log(sigma.det())
        - 0.5 * scale.trace_product(&inv)
}

/// Log prior density of `theta`. Parameters tied by the restriction are
/// counted once; fixed covariances contribute nothing. The probit-family
/// covariance prior omits its truncation constant.
pub fn log_prior(theta: &Theta, spec: &ModelSpec) -> f64 {
    let pr = &spec.priors;
    let mut lp = xlogy(pr.pi_a - 1.0, theta.pi_c) + xlogy(pr.pi_b - 1.0, 1.0 - theta.pi_c)
        - ln_beta(pr.pi_a, pr.pi_b);
    let mean_norm = -LN_SQRT_2PI - 0.5 * libm::log(pr.mean_var);
    for s in Stratum::ALL {
        for z in Arm::ALL {
            let cell = theta.cell(s, z);
            for k in 0..2 {
                if spec.mean_is_free(s, z, k) {
                    lp += mean_norm - 0.5 * cell.mu[k] * cell.mu[k] / pr.mean_var;
                }
            }
            if spec.cov_is_free(s, z) {
                lp += match spec.family {
                    Family::Univariate => ln_inverse_gamma(cell.sigma.s11, pr.ig_shape, pr.ig_rate),
                    Family::ContinuousContinuous => {
                        ln_inverse_wishart2(&cell.sigma, pr.iw_df, &pr.iw_scale)
                    }
                    Family::ContinuousBinary => {
                        pr.cov_probit.log_density([cell.sigma.s11, cell.sigma.s12])
                    }
                };
            }
        }
    }
    lp
}

/// Imputed latent quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub labels: Vec<Stratum>,
    /// Probit family only: latent utilities behind the binary outcome.
    pub y2_star: Option<Vec<f64>>,
}

impl AugmentedState {
    pub fn check(&self, data: &ObservedDataset) -> Result<()> {
        if self.labels.len() != data.n() {
            return Err(Error::InconsistentAugmentation { index: self.labels.len(), rule: "label count differs from unit count" });
        }
        for (index, (u, &s)) in data.units.iter().zip(&self.labels).enumerate() {
            if let Some(obs) = u.observed_stratum() {
                if obs != s {
                    return Err(Error::InconsistentAugmentation { index, rule: "label contradicts observed take-up" });
                }
            }
        }
        if let Some(ys) = &self.y2_star {
            if ys.len() != data.n() {
                return Err(Error::InconsistentAugmentation { index: ys.len(), rule: "latent utility count differs from unit count" });
            }
            for (index, (u, &v)) in data.units.iter().zip(ys).enumerate() {
                let ok = match u.y2 {
                    Some(1.0) => v > 0.0,
                    Some(0.0) => v <= 0.0,
                    _ => false,
                };
                if !ok {
                    return Err(Error::InconsistentAugmentation { index, rule: "latent utility sign contradicts binary outcome" });
                }
            }
        }
        Ok(())
    }
}

/// Complete-data log posterior (unnormalised): log prior plus, for every
/// unit, `ln π_s + ln f_{s,z}(y)` at its augmented label.
pub fn complete_data_log_posterior(
    theta: &Theta,
    data: &ObservedDataset,
    aug: &AugmentedState,
    spec: &ModelSpec,
) -> Result<f64> {
    aug.check(data)?;
    check_outcomes(data, theta.family)?;
    let k = ThetaKernels::new(theta)?;
    let mut lp = log_prior(theta, spec);
    for (u, &s) in data.units.iter().zip(&aug.labels) {
        lp += k.joint(s, u.z, u.outcome());
    }
    Ok(lp)
}

/// Imposes the restriction on `theta` by copying the control-arm
/// never-taker values into the treated-arm never-taker cell.
pub fn apply_restriction(theta: &Theta, spec: &ModelSpec) -> Result<Theta> {
    spec.validate()?;
    if theta.family != spec.family {
        return Err(Error::UnsupportedFamily("theta family differs from model spec"));
    }
    let mut out = *theta;
    let n0 = *theta.cell(Stratum::NeverTaker, Arm::Control);
    let n1 = out.cell_mut(Stratum::NeverTaker, Arm::Treated);
    match spec.restriction {
        Restriction::Unrestricted => {}
        Restriction::Er => *n1 = n0,
        Restriction::Per => n1.mu[1] = n0.mu[1],
    }
    Ok(out)
}

/// Whether the tied fields of `theta` are bitwise equal under `restriction`.
pub fn restriction_holds(theta: &Theta, restriction: Restriction) -> bool {
    let n0 = theta.cell(Stratum::NeverTaker, Arm::Control);
    let n1 = theta.cell(Stratum::NeverTaker, Arm::Treated);
    let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
    match restriction {
        Restriction::Unrestricted => true,
        Restriction::Er => {
            same(n0.mu[0], n1.mu[0])
                && same(n0.mu[1], n1.mu[1])
                && same(n0.sigma.s11, n1.sigma.s11)
                && same(n0.sigma.s12, n1.sigma.s12)
                && same(n0.sigma.s22, n1.sigma.s22)
        }
        Restriction::Per => same(n0.mu[1], n1.mu[1]),
    }
}
