//! Run configuration: a JSON file, command-line overrides and the fully
//! resolved echo written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pstrat_core::gibbs::{ChainConfig, InitStrategy};
use pstrat_core::linalg::Sym2;
use pstrat_core::model::ConstrainedCovPrior;
use pstrat_core::simlab::{ModelVariant, ScenarioId};
use pstrat_core::{Family, ObservedDataset, Priors};
use serde::{Deserialize, Serialize};

use crate::csv_io::{ColumnNames, IngestOptions};
use crate::InputError;

/// How the secondary outcome is modelled by the bivariate variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Secondary {
    /// Binary when every value is 0 or 1, continuous otherwise, none when
    /// the column is absent.
    #[default]
    Auto,
    Continuous,
    Binary,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    #[default]
    MomentPerturb,
    PriorDraw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSettings {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub chains: usize,
    pub init: Init,
}

impl Default for ChainSettings {
    fn default() -> Self {
        let d = ChainConfig::default();
        ChainSettings { iterations: d.n_iter, burnin: d.n_burnin, thin: d.thin, chains: d.n_chains, init: Init::default() }
    }
}

/// Prior hyperparameters. Matrices are given as `[s11, s12, s22]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSettings {
    pub mean_var: f64,
    pub pi_a: f64,
    pub pi_b: f64,
    pub ig_shape: f64,
    pub ig_rate: f64,
    pub iw_df: f64,
    pub iw_scale: [f64; 3],
    pub probit_mean: [f64; 2],
    pub probit_cov: [f64; 3],
}

impl Default for PriorSettings {
    fn default() -> Self {
        let p = Priors::default();
        let m = |s: Sym2| [s.s11, s.s12, s.s22];
        PriorSettings {
            mean_var: p.mean_var,
            pi_a: p.pi_a,
            pi_b: p.pi_b,
            ig_shape: p.ig_shape,
            ig_rate: p.ig_rate,
            iw_df: p.iw_df,
            iw_scale: m(p.iw_scale),
            probit_mean: p.cov_probit.mean,
            probit_cov: m(p.cov_probit.cov),
        }
    }
}

impl PriorSettings {
    pub fn to_priors(&self) -> Priors {
        let m = |a: [f64; 3]| Sym2::new(a[0], a[1], a[2]);
        Priors {
            mean_var: self.mean_var,
            pi_a: self.pi_a,
            pi_b: self.pi_b,
            cov_probit: ConstrainedCovPrior { mean: self.probit_mean, cov: m(self.probit_cov) },
            ig_shape: self.ig_shape,
            ig_rate: self.ig_rate,
            iw_df: self.iw_df,
            iw_scale: m(self.iw_scale),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Transforms {
    /// Natural log of the primary outcome at ingestion.
    pub log_y1: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Write kernel density grids of every estimand.
    pub kde: bool,
    /// Write every kept draw.
    pub dump_draws: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpcSettings {
    /// Replicates per parameter draw for the sampled p-values (`K`).
    pub replicates: usize,
    /// Posterior draws behind the modified sampled p-value (`J`).
    pub draws: usize,
}

impl Default for PpcSettings {
    fn default() -> Self {
        PpcSettings { replicates: 500, draws: 1000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    /// Scenario ids (`I` to `VII`); empty means all seven.
    pub scenarios: Vec<String>,
    /// Only write the generated datasets.
    pub emit_data: bool,
    /// Datasets per scenario for a repeated-sampling study; 0 skips it.
    pub replications: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Required: there is no clock-based default.
    pub seed: Option<u64>,
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    /// Model variants; empty means every variant the data support.
    pub variants: Vec<String>,
    pub secondary: Secondary,
    pub chains: ChainSettings,
    pub priors: PriorSettings,
    pub columns: ColumnNames,
    pub transforms: Transforms,
    pub report: ReportOptions,
    pub ppc: PpcSettings,
    pub simulate: SimulateSettings,
    /// Worker threads; does not change any result.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            input: None,
            out: PathBuf::from("pstrat-out"),
            variants: Vec::new(),
            secondary: Secondary::Auto,
            chains: ChainSettings::default(),
            priors: PriorSettings::default(),
            columns: ColumnNames::default(),
            transforms: Transforms::default(),
            report: ReportOptions::default(),
            ppc: PpcSettings::default(),
            simulate: SimulateSettings::default(),
            threads: None,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variants: Vec<String>,
    pub scenarios: Vec<String>,
    pub chains: Option<usize>,
    pub iterations: Option<usize>,
    pub burnin: Option<usize>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())).into())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.input.is_some() {
            self.input.clone_from(&o.input);
        }
        if let Some(out) = &o.out {
            self.out.clone_from(out);
        }
        if !o.variants.is_empty() {
            self.variants.clone_from(&o.variants);
        }
        if !o.scenarios.is_empty() {
            self.simulate.scenarios.clone_from(&o.scenarios);
        }
        if let Some(c) = o.chains {
            self.chains.chains = c;
        }
        if let Some(n) = o.iterations {
            self.chains.iterations = n;
        }
        if let Some(b) = o.burnin {
            self.chains.burnin = b;
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| InputError("a seed is required (--seed or \"seed\" in the config file)".into()).into())
    }

    pub fn input_path(&self) -> Result<&Path> {
        let p = self.input.as_deref().ok_or_else(|| InputError("an input file is required (--input)".into()))?;
        if !p.is_file() {
            return Err(InputError(format!("input file {} does not exist", p.display())).into());
        }
        Ok(p)
    }

    pub fn ingest_options(&self) -> IngestOptions {
        let mut columns = self.columns.clone();
        if self.secondary == Secondary::None {
            columns.y2 = None;
        }
        IngestOptions { columns, log_y1: self.transforms.log_y1 }
    }

    pub fn chain_config(&self) -> Result<ChainConfig> {
        let c = &self.chains;
        let cfg = ChainConfig {
            n_iter: c.iterations,
            n_burnin: c.burnin,
            thin: c.thin,
            seed: self.seed()?,
            n_chains: c.chains,
            init: match c.init {
                Init::MomentPerturb => InitStrategy::MomentPerturb,
                Init::PriorDraw => InitStrategy::PriorDraw,
            },
            chain_seeds: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fixes `secondary` from the data when it is `Auto`.
    pub fn resolve_secondary(&mut self, data: &ObservedDataset) {
        if self.secondary != Secondary::Auto {
            return;
        }
        let ys: Vec<f64> = data.units.iter().filter_map(|u| u.y2).collect();
        self.secondary = if ys.len() < data.n() {
            Secondary::None
        } else if ys.iter().all(|&y| y == 0.0 || y == 1.0) {
            Secondary::Binary
        } else {
            Secondary::Continuous
        };
    }

    /// Family used by the bivariate variants, `None` without a secondary
    /// outcome.
    pub fn bivariate_family(&self) -> Option<Family> {
        match self.secondary {
            Secondary::Binary => Some(Family::ContinuousBinary),
            Secondary::Continuous | Secondary::Auto => Some(Family::ContinuousContinuous),
            Secondary::None => None,
        }
    }

    /// Requested variants in report order, filled with the defaults when
    /// none were named. Call after [`RunConfig::resolve_secondary`].
    pub fn resolve_variants(&mut self) -> Result<Vec<ModelVariant>> {
        let available: &[ModelVariant] = match self.bivariate_family() {
            Some(_) => &REPORT_ORDER,
            None => &REPORT_ORDER[2..],
        };
        if self.variants.is_empty() {
            self.variants = available.iter().map(|v| v.name().to_string()).collect();
        }
        let mut out = Vec::new();
        for name in &self.variants {
            let v = ModelVariant::parse(name).map_err(|e| InputError(e.to_string()))?;
            if !available.contains(&v) {
                return Err(InputError(format!("variant {} needs a secondary outcome", v.name())).into());
            }
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out.sort_by_key(|v| REPORT_ORDER.iter().position(|r| r == v));
        self.variants = out.iter().map(|v| v.name().to_string()).collect();
        Ok(out)
    }

    /// Requested scenarios in order, all seven when none were named.
    pub fn resolve_scenarios(&mut self) -> Result<Vec<ScenarioId>> {
        if self.simulate.scenarios.is_empty() {
            self.simulate.scenarios = ScenarioId::ALL.iter().map(|s| s.roman().to_string()).collect();
        }
        let mut out = Vec::new();
        for s in &self.simulate.scenarios {
            let id = ScenarioId::parse(s).map_err(|e| InputError(e.to_string()))?;
            if !out.contains(&id) {
                out.push(id);
            }
        }
        out.sort();
        self.simulate.scenarios = out.iter().map(|s| s.roman().to_string()).collect();
        Ok(out)
    }

    /// Writes the resolved configuration as `config.json` in `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        let path = dir.join("config.json");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Row order of the summary tables.
pub const REPORT_ORDER: [ModelVariant; 4] =
    [ModelVariant::Bivariate, ModelVariant::BivariatePer, ModelVariant::Univariate, ModelVariant::UnivariateEr];
