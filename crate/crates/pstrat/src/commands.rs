//! The `fit`, `ppc`, `simulate`, `summarize` and `oracle` workflows.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pstrat_core::estimands::estimand_draws;
use pstrat_core::gibbs::{run_chains_with, ChainConfig, DrawStore};
use pstrat_core::model::validate_dataset;
use pstrat_core::oracle::{benchmark_case, grid_posterior_with, GridSpec, BENCHMARK_GRID};
use pstrat_core::ppc::{modified_sppv_with, pppv_with, sppv_with, ModelCheck};
use pstrat_core::rng::derive_seed;
use pstrat_core::samplers::uniform_index;
use pstrat_core::simlab::{
    generate_dataset, repeated_sampling_study, scenario_params, summarize_fit, variant_chain_config, Comparison,
    Estimator, ModelVariant, VariantFit,
};
use pstrat_core::estimands::Estimand;
use pstrat_core::{Arm, Family, ObservedDataset, Priors, RngStream};
use serde_json::json;

use crate::config::RunConfig;
use crate::csv_io::{ingest_csv, write_csv, write_strata};
use crate::exec::PoolExecutor;
use crate::report::{self, PpcRow};
use crate::{InputError, EXIT_NOT_CONVERGED, EXIT_OK};

const PPC_TAG: u64 = 0x7070_6300;
const RECOVERY_TAG: u64 = 0x7265_6300;

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

/// Fits `variant` with the configured priors. Chain seeds match
/// [`pstrat_core::simlab::fit_variant`] for the same master seed.
pub fn fit_one(
    exec: &PoolExecutor,
    data: &ObservedDataset,
    variant: ModelVariant,
    family: Family,
    priors: &Priors,
    config: &ChainConfig,
    seed: u64,
) -> Result<(DrawStore, VariantFit)> {
    let spec = variant.spec(family)?.with_priors(*priors);
    let store = run_chains_with(exec, data, &spec, &variant_chain_config(variant, config, seed))
        .with_context(|| format!("fitting {}", variant.name()))?;
    let fit = summarize_fit(&store, variant)?;
    Ok((store, fit))
}

/// Group counts and outcome means by `(z, d)`.
pub fn descriptive_csv(data: &ObservedDataset) -> String {
    let mut s = String::from("z,d,n,mean_y1,mean_y2\n");
    for (z, d) in [(Arm::Control, false), (Arm::Treated, false), (Arm::Treated, true)] {
        let g: Vec<_> = data.group(z, d).collect();
        let n = g.len();
        let mean = |f: &dyn Fn(&pstrat_core::Unit) -> Option<f64>| -> String {
            let v: Vec<f64> = g.iter().filter_map(|u| f(u)).collect();
            if v.is_empty() { String::new() } else { (v.iter().sum::<f64>() / v.len() as f64).to_string() }
        };
        let _ = writeln!(s, "{},{},{n},{},{}", z.index(), u8::from(d), mean(&|u| Some(u.y1)), mean(&|u| u.y2));
    }
    s
}

struct Fitted {
    data: ObservedDataset,
    family: Family,
    results: Vec<(DrawStore, VariantFit)>,
}

fn run_fits(cfg: &mut RunConfig, exec: &PoolExecutor) -> Result<Fitted> {
    let seed = cfg.seed()?;
    let data = ingest_csv(cfg.input_path()?, &cfg.ingest_options())?;
    cfg.resolve_secondary(&data);
    let variants = cfg.resolve_variants()?;
    let chain = cfg.chain_config()?;
    let priors = cfg.priors.to_priors();
    priors.validate()?;
    let family = cfg.bivariate_family().unwrap_or(Family::ContinuousContinuous);
    let mut results = Vec::with_capacity(variants.len());
    for v in variants {
        eprintln!("fitting {} ({} chains x {} iterations)", v.name(), chain.n_chains, chain.n_iter);
        results.push(fit_one(exec, &data, v, family, &priors, &chain, seed)?);
    }
    Ok(Fitted { data, family, results })
}

fn write_fit_outputs(dir: &Path, cfg: &RunConfig, fitted: &Fitted) -> Result<Vec<String>> {
    let fits: Vec<VariantFit> = fitted.results.iter().map(|r| r.1.clone()).collect();
    report::write_text(&dir.join("descriptive.csv"), &descriptive_csv(&fitted.data))?;
    report::write_text(&dir.join("summary.csv"), &report::summary_csv(&fits))?;
    report::write_text(&dir.join("summary.txt"), &report::summary_text(&fits))?;
    report::write_text(&dir.join("psrf.csv"), &report::psrf_csv(&fits))?;
    let variants: Vec<_> = fitted.results.iter().map(|(s, f)| report::fit_json(f, Some(s))).collect();
    report::write_json(
        &dir.join("summary.json"),
        &json!({
            "seed": cfg.seed,
            "units": fitted.data.n(),
            "bivariate_family": report::family_name(fitted.family),
            "variants": variants,
        }),
    )?;
    for (store, fit) in &fitted.results {
        if cfg.report.dump_draws {
            report::write_draws(&dir.join(report::draws_file_name(fit.variant)), fit.variant, store)?;
        }
        if cfg.report.kde {
            report::write_kdes(dir, fit.variant, store)?;
        }
    }
    Ok(report::convergence_warnings(&fits))
}

fn finish(warnings: &[String], strict: bool) -> i32 {
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if strict && !warnings.is_empty() {
        EXIT_NOT_CONVERGED
    } else {
        EXIT_OK
    }
}

/// Fits every requested variant and writes the summary tables.
pub fn cmd_fit(mut cfg: RunConfig, strict: bool) -> Result<i32> {
    let exec = PoolExecutor::new(cfg.threads)?;
    let fitted = run_fits(&mut cfg, &exec)?;
    let dir = out_dir(&cfg)?;
    cfg.write_echo(&dir)?;
    let warnings = write_fit_outputs(&dir, &cfg, &fitted)?;
    let fits: Vec<VariantFit> = fitted.results.into_iter().map(|r| r.1).collect();
    print!("{}", report::summary_text(&fits));
    Ok(finish(&warnings, strict))
}

/// Posterior predictive checks: PPPV over every draw, one SPPV at a
/// randomly chosen draw, and the modified SPPV over `J` draws.
pub fn cmd_ppc(mut cfg: RunConfig, draws: Option<&Path>, strict: bool) -> Result<i32> {
    let exec = PoolExecutor::new(cfg.threads)?;
    let seed = cfg.seed()?;
    let (data, stores, warnings) = match draws {
        Some(path) => {
            let data = ingest_csv(cfg.input_path()?, &cfg.ingest_options())?;
            cfg.resolve_secondary(&data);
            let mut stores = Vec::new();
            for p in report::find_draw_dumps(path)? {
                stores.push(report::read_draws(&p)?);
            }
            cfg.variants = stores.iter().map(|(v, _)| v.name().to_string()).collect();
            (data, stores, Vec::new())
        }
        None => {
            let fitted = run_fits(&mut cfg, &exec)?;
            let dir = out_dir(&cfg)?;
            let warnings = write_fit_outputs(&dir, &cfg, &fitted)?;
            let stores = fitted.results.into_iter().map(|(s, f)| (f.variant, s)).collect();
            (fitted.data, stores, warnings)
        }
    };
    let (k, j) = (cfg.ppc.replicates, cfg.ppc.draws);
    if k == 0 {
        return Err(InputError("the number of replicates K must be at least 1".into()).into());
    }
    let mut blocks: [Vec<PpcRow>; 3] = Default::default();
    for (variant, store) in &stores {
        let total = store.total_draws();
        if j > total {
            return Err(InputError(format!(
                "{}: J = {j} exceeds the {total} available posterior draws",
                variant.name()
            ))
            .into());
        }
        eprintln!("checking {}", variant.name());
        let projected = validate_dataset(&data, &store.spec)?;
        let measures = report::ppc_measures(*variant, store.spec.family);
        let check = ModelCheck::new(&projected, measures);
        let pooled: Vec<_> = store.pooled().copied().collect();
        let outcomes = store.spec.family.dim();
        let base = derive_seed(seed, &[PPC_TAG, *variant as u64]);
        let mut pick = RngStream::derived(base, &[0]);
        let star = pooled[uniform_index(pooled.len(), &mut pick)];
        let reports = [
            pppv_with(&exec, &pooled, &check, derive_seed(base, &[1]))?,
            sppv_with(&exec, &star, &check, k, derive_seed(base, &[2]))?,
            modified_sppv_with(&exec, &pooled, &check, j, k, derive_seed(base, &[3]))?,
        ];
        for (b, report) in blocks.iter_mut().zip(reports) {
            b.push(PpcRow { variant: *variant, report, outcomes });
        }
    }
    let rows: Vec<PpcRow> = blocks.into_iter().flatten().collect();
    let dir = out_dir(&cfg)?;
    cfg.write_echo(&dir)?;
    report::write_text(&dir.join("ppc.csv"), &report::ppc_csv(&rows))?;
    report::write_json(&dir.join("ppc.json"), &report::ppc_json(&rows))?;
    let mut notes = warnings;
    for r in &rows {
        for v in r.report.values.iter().filter(|v| v.undefined_share_notable()) {
            notes.push(format!(
                "{} {}: {} of {} comparisons of {} were undefined",
                r.report.method.name(),
                r.variant.name(),
                v.undefined,
                v.used + v.undefined,
                v.measure.name()
            ));
        }
    }
    print!("{}", report::ppc_text(&rows));
    Ok(finish(&notes, strict))
}

struct PriorEstimator {
    config: ChainConfig,
    priors: Priors,
}

impl Estimator for PriorEstimator {
    fn estimate(&self, data: &ObservedDataset, variant: ModelVariant, seed: u64) -> pstrat_core::Result<VariantFit> {
        let spec = variant.spec(Family::ContinuousContinuous)?.with_priors(self.priors);
        let store = run_chains_with(&pstrat_core::Sequential, data, &spec, &variant_chain_config(variant, &self.config, seed))?;
        summarize_fit(&store, variant)
    }
}

/// Simulation scenarios: either write the generated datasets, or fit the
/// variants to one dataset per scenario (and optionally run a
/// repeated-sampling study).
pub fn cmd_simulate(mut cfg: RunConfig, strict: bool) -> Result<i32> {
    let seed = cfg.seed()?;
    let scenarios = cfg.resolve_scenarios()?;
    let dir = out_dir(&cfg)?;
    if cfg.simulate.emit_data {
        cfg.write_echo(&dir)?;
        for id in scenarios {
            let sim = generate_dataset(&scenario_params(id), derive_seed(seed, &[id as u64]))?;
            write_csv(&dir.join(format!("data_{}.csv", id.roman())), &sim.data)?;
            write_strata(&dir.join(format!("strata_{}.csv", id.roman())), &sim.truth)?;
        }
        return Ok(EXIT_OK);
    }
    let variants = cfg.resolve_variants()?;
    let chain = cfg.chain_config()?;
    let priors = cfg.priors.to_priors();
    priors.validate()?;
    cfg.write_echo(&dir)?;
    let exec = PoolExecutor::new(cfg.threads)?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &id in &scenarios {
        let scenario = scenario_params(id);
        let data_seed = derive_seed(seed, &[id as u64]);
        eprintln!("scenario {}", id.roman());
        let sim = generate_dataset(&scenario, data_seed)?;
        let fits = variants
            .iter()
            .map(|&v| fit_one(&exec, &sim.data, v, Family::ContinuousContinuous, &priors, &chain, data_seed).map(|r| r.1))
            .collect::<Result<Vec<_>>>()?;
        warnings.extend(report::convergence_warnings(&fits).into_iter().map(|w| format!("scenario {}: {w}", id.roman())));
        rows.push((Comparison { scenario: id, data_seed, fits }, scenario.theta));
    }
    report::write_text(&dir.join("comparison.csv"), &report::comparison_csv(&rows))?;
    for (c, _) in &rows {
        println!("scenario {}", c.scenario.roman());
        print!("{}", report::summary_text(&c.fits));
    }
    let r = cfg.simulate.replications;
    if r >= 2 {
        let est = PriorEstimator { config: chain, priors };
        let mut reports = Vec::new();
        for &id in &scenarios {
            eprintln!("scenario {}: {r} replications", id.roman());
            let study_seed = derive_seed(seed, &[RECOVERY_TAG, id as u64]);
            reports.push(repeated_sampling_study(&exec, &scenario_params(id), r, &variants, &est, study_seed)?);
        }
        report::write_text(&dir.join("recovery.csv"), &report::recovery_csv(&reports))?;
    } else if r == 1 {
        return Err(InputError("a repeated-sampling study needs at least two replications".into()).into());
    }
    Ok(finish(&warnings, strict))
}

/// Recomputes the summary tables from draw dumps.
pub fn cmd_summarize(cfg: &RunConfig, draws: &Path, strict: bool) -> Result<i32> {
    let mut fits = Vec::new();
    for p in report::find_draw_dumps(draws)? {
        let (variant, store) = report::read_draws(&p)?;
        fits.push(summarize_fit(&store, variant)?);
    }
    let dir = out_dir(cfg)?;
    report::write_text(&dir.join("summary.csv"), &report::summary_csv(&fits))?;
    report::write_text(&dir.join("summary.txt"), &report::summary_text(&fits))?;
    report::write_text(&dir.join("psrf.csv"), &report::psrf_csv(&fits))?;
    print!("{}", report::summary_text(&fits));
    Ok(finish(&report::convergence_warnings(&fits), strict))
}

/// Grid posterior against Gibbs on the seeded benchmark dataset.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<i32> {
    let seed = cfg.seed()?;
    let exec = PoolExecutor::new(cfg.threads)?;
    let (data, spec) = benchmark_case(seed)?;
    let grid = GridSpec::prior_covering(&data, &spec, BENCHMARK_GRID.0, BENCHMARK_GRID.1)?;
    let post = grid_posterior_with(&exec, &data, &spec, &grid)?;
    let chain = cfg.chain_config()?;
    let store = run_chains_with(&exec, &data, &spec, &chain)?;
    let mean = |e: Estimand| -> Result<f64> {
        let d = estimand_draws(&store, e)?;
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    };
    let rows = [
        ("pi_c", post.mean_pi_c, mean(Estimand::PiC)?),
        ("tau_c", post.mean_tau_c, mean(Estimand::TauC)?),
        ("tau_n", post.mean_tau_n, mean(Estimand::TauN)?),
    ];
    let mut s = String::from("estimand,grid,gibbs,difference\n");
    for (name, g, m) in rows {
        let _ = writeln!(s, "{name},{g},{m},{}", m - g);
    }
    let dir = out_dir(cfg)?;
    report::write_text(&dir.join("oracle.csv"), &s)?;
    print!("{s}");
    for w in &post.warnings {
        eprintln!("warning: {w}");
    }
    Ok(EXIT_OK)
}
