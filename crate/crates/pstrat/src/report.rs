//! Output tables and files.
//!
//! CSV values use Rust's shortest round-trip formatting, so reading a file
//! back gives the same `f64` and reruns give identical bytes.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pstrat_core::estimands::{kde, DensityGrid, Estimand, PosteriorSummary};
use pstrat_core::gibbs::{ChainConfig, ChainDraws, DrawStore};
use pstrat_core::ppc::{Discrepancy, PValueReport};
use pstrat_core::simlab::{Comparison, ModelVariant, RecoveryReport, VariantFit};
use pstrat_core::{Family, ModelSpec, Stratum, Theta};
use serde_json::{json, Value};

use crate::InputError;

/// PSRF above which a chain set is reported as not converged.
pub const PSRF_THRESHOLD: f64 = 1.1;

const ESTIMAND_ROWS: [(Estimand, &str); 3] = [
    (Estimand::TauC, "PCEs for compliers (tau_c)"),
    (Estimand::TauN, "PCEs for never-takers (tau_n)"),
    (Estimand::PiC, "Complier share (pi_c)"),
];

fn summary_of(fit: &VariantFit, e: Estimand) -> Option<&PosteriorSummary> {
    match e {
        Estimand::TauC => Some(&fit.tau_c),
        Estimand::TauN => fit.tau_n.as_ref(),
        Estimand::PiC => Some(&fit.pi_c),
        _ => None,
    }
}

fn psrf_of(fit: &VariantFit, e: Estimand) -> Option<f64> {
    match e {
        Estimand::TauC => fit.psrf[0],
        Estimand::TauN => fit.psrf[1],
        Estimand::PiC => fit.psrf[2],
        _ => None,
    }
}

pub fn variant_label(v: ModelVariant) -> &'static str {
    match v {
        ModelVariant::Bivariate => "Bivariate",
        ModelVariant::BivariatePer => "Bivariate with PER",
        ModelVariant::Univariate => "Univariate",
        ModelVariant::UnivariateEr => "Univariate with ER",
    }
}

/// Posterior summary table: one block per estimand, one row per variant.
/// Variants that fix `τ_n = 0` have no `τ_n` row.
pub fn summary_csv(fits: &[VariantFit]) -> String {
    let mut s = String::from("estimand,variant,median,q2.5,q97.5,width\n");
    for (e, _) in ESTIMAND_ROWS {
        for f in fits {
            if let Some(p) = summary_of(f, e) {
                let _ = writeln!(s, "{},{},{},{},{},{}", e.name(), f.variant.name(), p.median, p.q025, p.q975, p.width);
            }
        }
    }
    s
}

pub fn summary_text(fits: &[VariantFit]) -> String {
    let mut s = format!("{:<34}{:>10}{:>10}{:>10}{:>10}\n", "", "Median", "2.5%", "97.5%", "Width");
    for (e, title) in ESTIMAND_ROWS {
        let rows: Vec<_> = fits.iter().filter_map(|f| summary_of(f, e).map(|p| (f.variant, p))).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(s, "{title}");
        for (i, (v, p)) in rows.iter().enumerate() {
            let label = format!("  {}. {}", i + 1, variant_label(*v));
            let _ = writeln!(s, "{label:<34}{:>10.3}{:>10.3}{:>10.3}{:>10.3}", p.median, p.q025, p.q975, p.width);
        }
    }
    s
}

pub fn psrf_csv(fits: &[VariantFit]) -> String {
    let mut s = String::from("variant,estimand,psrf\n");
    for f in fits {
        for (e, _) in ESTIMAND_ROWS {
            if let Some(r) = psrf_of(f, e) {
                let _ = writeln!(s, "{},{},{}", f.variant.name(), e.name(), r);
            }
        }
    }
    s
}

/// One message per estimand whose PSRF exceeds [`PSRF_THRESHOLD`].
pub fn convergence_warnings(fits: &[VariantFit]) -> Vec<String> {
    let mut out = Vec::new();
    for f in fits {
        for (e, _) in ESTIMAND_ROWS {
            if let Some(r) = psrf_of(f, e) {
                if !(r < PSRF_THRESHOLD) {
                    out.push(format!("{}: PSRF of {} is {r:.3} (threshold {PSRF_THRESHOLD})", f.variant.name(), e.name()));
                }
            }
        }
    }
    out
}

fn summary_json(p: &PosteriorSummary) -> Value {
    json!({
        "mean": p.mean,
        "median": p.median,
        "q2.5": p.q025,
        "q97.5": p.q975,
        "width": p.width,
        "prob_negative": p.prob_negative,
    })
}

pub fn fit_json(fit: &VariantFit, store: Option<&DrawStore>) -> Value {
    let mut est = serde_json::Map::new();
    let mut psrf = serde_json::Map::new();
    for (e, _) in ESTIMAND_ROWS {
        if let Some(p) = summary_of(fit, e) {
            est.insert(e.name().into(), summary_json(p));
        }
        if let Some(r) = psrf_of(fit, e) {
            psrf.insert(e.name().into(), json!(r));
        }
    }
    let mut v = json!({ "variant": fit.variant.name(), "estimands": est, "psrf": psrf });
    if let Some(store) = store {
        v["draws"] = json!(store.total_draws());
        if store.spec.family == Family::ContinuousBinary {
            v["mh_acceptance"] = json!(store.chains.iter().map(|c| c.mh_acceptance.to_vec()).collect::<Vec<_>>());
        }
    }
    v
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

pub fn family_name(f: Family) -> &'static str {
    match f {
        Family::Univariate => "univariate",
        Family::ContinuousContinuous => "continuous",
        Family::ContinuousBinary => "binary",
    }
}

fn parse_family(s: &str) -> Result<Family> {
    Ok(match s {
        "univariate" => Family::Univariate,
        "continuous" => Family::ContinuousContinuous,
        "binary" => Family::ContinuousBinary,
        other => bail!(InputError(format!("unknown family `{other}` in draw dump"))),
    })
}

const PARAM_NAMES: [&str; 5] = ["mu1", "mu2", "s11", "s12", "s22"];
const CELL_NAMES: [&str; 4] = ["c0", "c1", "n0", "n1"];

pub fn draws_file_name(v: ModelVariant) -> String {
    format!("draws_{}.csv", v.name())
}

/// Every kept draw: `variant,family,chain,draw,pi_c` then
/// `mu1,mu2,s11,s12,s22` for cells `c0, c1, n0, n1`.
pub fn write_draws(path: &Path, variant: ModelVariant, store: &DrawStore) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    let mut header = String::from("variant,family,chain,draw,pi_c");
    for c in CELL_NAMES {
        for p in PARAM_NAMES {
            let _ = write!(header, ",{p}_{c}");
        }
    }
    writeln!(w, "{header}")?;
    let fam = family_name(store.spec.family);
    for chain in &store.chains {
        for (i, t) in chain.draws.iter().enumerate() {
            write!(w, "{},{fam},{},{i}", variant.name(), chain.chain)?;
            for v in t.to_vec() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a draw dump back into a store (chain seeds and acceptance rates
/// are not stored and come back as zero).
pub fn read_draws(path: &Path) -> Result<(ModelVariant, DrawStore)> {
    let f = File::open(path).map_err(|e| InputError(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let bad = |line: usize, what: &str| InputError(format!("{}: line {line}: {what}", path.display()));
    lines.next().transpose()?.ok_or_else(|| bad(1, "empty file"))?;
    let mut variant = None;
    let mut family = None;
    let mut chains: Vec<ChainDraws> = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        let n = k + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 25 {
            return Err(bad(n, "expected 25 fields").into());
        }
        let v = ModelVariant::parse(fields[0]).map_err(|_| bad(n, "unknown variant"))?;
        let fam = parse_family(fields[1])?;
        if variant.is_some_and(|x| x != v) || family.is_some_and(|x| x != fam) {
            return Err(bad(n, "a dump holds a single variant").into());
        }
        variant = Some(v);
        family = Some(fam);
        let chain: usize = fields[2].parse().map_err(|_| bad(n, "bad chain index"))?;
        let values = fields[4..].iter().map(|x| x.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
        let values = values.map_err(|_| bad(n, "bad number"))?;
        let theta = Theta::from_slice(fam, &values)?;
        if chain == chains.len() {
            chains.push(ChainDraws { chain, seed: 0, draws: Vec::new(), log_posterior: Vec::new(), mh_acceptance: [0.0; 4] });
        } else if chain + 1 != chains.len() {
            return Err(bad(n, "chains must be stored in order").into());
        }
        chains[chain].draws.push(theta);
    }
    let (Some(variant), Some(family)) = (variant, family) else {
        return Err(InputError(format!("{}: no draws", path.display())).into());
    };
    let spec: ModelSpec = variant.spec(family)?;
    let kept = chains.first().map_or(0, |c| c.draws.len());
    let config = ChainConfig { n_iter: kept + 1, n_burnin: 1, n_chains: chains.len(), ..ChainConfig::default() };
    Ok((variant, DrawStore { spec, config, chains }))
}

/// Dumps found in `dir`, in report order.
pub fn find_draw_dumps(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    if !dir.is_dir() {
        return Err(InputError(format!("{} is neither a draw dump nor a directory", dir.display())).into());
    }
    let found: Vec<PathBuf> = crate::config::REPORT_ORDER
        .iter()
        .map(|&v| dir.join(draws_file_name(v)))
        .filter(|p| p.is_file())
        .collect();
    if found.is_empty() {
        return Err(InputError(format!("no draws_<variant>.csv files in {}", dir.display())).into());
    }
    Ok(found)
}

pub fn kde_csv(grid: &DensityGrid) -> String {
    let mut s = String::from("x,density\n");
    for (x, d) in grid.x.iter().zip(&grid.density) {
        let _ = writeln!(s, "{x},{d}");
    }
    s
}

/// Kernel density grids of `τ_c`, `τ_n` (when free) and `π_c`.
pub fn write_kdes(dir: &Path, variant: ModelVariant, store: &DrawStore) -> Result<()> {
    for (e, _) in ESTIMAND_ROWS {
        if e == Estimand::TauN && variant.forces_tau_n_zero() {
            continue;
        }
        let draws: Vec<f64> = store.pooled().map(|t| e.eval(t)).collect::<pstrat_core::Result<_>>()?;
        let grid = kde(&draws, None)?;
        write_text(&dir.join(format!("kde_{}_{}.csv", variant.name(), e.name())), &kde_csv(&grid))?;
    }
    Ok(())
}

/// Predictive-check measures reported for `variant`. Variants that tie the
/// never-taker distribution of an outcome across arms skip that outcome's
/// never-taker signal, noise and signal-to-noise.
pub fn ppc_measures(variant: ModelVariant, family: Family) -> Vec<Discrepancy> {
    Discrepancy::standard_set(family)
        .into_iter()
        .filter(|m| match m {
            Discrepancy::Signal { stratum, .. }
            | Discrepancy::Noise { stratum, .. }
            | Discrepancy::SignalToNoise { stratum, .. } => {
                !(variant == ModelVariant::UnivariateEr && *stratum == Stratum::NeverTaker)
            }
            _ => true,
        })
        .collect()
}

const PPC_COLUMNS: [&str; 8] = ["SI_c", "SI_n", "NO_c", "NO_n", "SN_c", "SN_n", "chi2", "KS"];

fn ppc_column(m: &Discrepancy) -> Option<(usize, usize)> {
    let st = |s: &Stratum| usize::from(*s == Stratum::NeverTaker);
    match m {
        Discrepancy::Signal { outcome, stratum } => Some((*outcome, st(stratum))),
        Discrepancy::Noise { outcome, stratum } => Some((*outcome, 2 + st(stratum))),
        Discrepancy::SignalToNoise { outcome, stratum } => Some((*outcome, 4 + st(stratum))),
        Discrepancy::Chi2Outcome { outcome } => Some((*outcome, 6)),
        Discrepancy::Ks => Some((0, 7)),
        Discrepancy::Chi2 => None,
    }
}

/// One p-value block per method; rows are variants by outcome.
pub struct PpcRow {
    pub variant: ModelVariant,
    pub report: PValueReport,
    pub outcomes: usize,
}

fn ppc_cells(row: &PpcRow) -> Vec<[Option<f64>; 8]> {
    let mut cells = vec![[None; 8]; row.outcomes];
    for v in &row.report.values {
        if let Some((o, c)) = ppc_column(&v.measure) {
            if o < row.outcomes {
                cells[o][c] = v.p;
            }
        }
    }
    cells
}

pub fn ppc_csv(rows: &[PpcRow]) -> String {
    let mut s = format!("method,variant,outcome,{}\n", PPC_COLUMNS.join(","));
    for r in rows {
        for (o, cells) in ppc_cells(r).iter().enumerate() {
            let _ = write!(s, "{},{},y{}", r.report.method.name(), r.variant.name(), o + 1);
            for c in cells {
                match c {
                    Some(p) => {
                        let _ = write!(s, ",{p}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
    }
    s
}

pub fn ppc_text(rows: &[PpcRow]) -> String {
    let mut s = format!("{:<26}", "");
    for c in PPC_COLUMNS {
        let _ = write!(s, "{c:>8}");
    }
    s.push('\n');
    let mut method = None;
    for r in rows {
        if method != Some(r.report.method) {
            method = Some(r.report.method);
            let _ = writeln!(s, "[{}]", r.report.method.name());
        }
        let _ = writeln!(s, "{}", variant_label(r.variant));
        for (o, cells) in ppc_cells(r).iter().enumerate() {
            let _ = write!(s, "{:<26}", format!("  y{}", o + 1));
            for c in cells {
                match c {
                    Some(p) => {
                        let _ = write!(s, "{p:>8.3}");
                    }
                    None => s.push_str(&" ".repeat(8)),
                }
            }
            s.push('\n');
        }
    }
    s
}

pub fn ppc_json(rows: &[PpcRow]) -> Value {
    Value::Array(
        rows.iter()
            .map(|r| {
                json!({
                    "method": r.report.method.name(),
                    "variant": r.variant.name(),
                    "seed": r.report.seed,
                    "draws": r.report.draws,
                    "replicates": r.report.replicates,
                    "values": r.report.values.iter().map(|v| json!({
                        "measure": v.measure.name(),
                        "p": v.p,
                        "used": v.used,
                        "undefined": v.undefined,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect(),
    )
}

/// Per-scenario comparison: one row per variant and estimand, with the
/// true value and whether the interval covers it.
pub fn comparison_csv(rows: &[(Comparison, Theta)]) -> String {
    let mut s = String::from("scenario,variant,estimand,truth,median,q2.5,q97.5,width,covers,psrf\n");
    for (c, truth) in rows {
        for f in &c.fits {
            for (e, _) in ESTIMAND_ROWS {
                let Some(p) = summary_of(f, e) else { continue };
                let t = e.eval(truth).unwrap_or(f64::NAN);
                let psrf = psrf_of(f, e).map_or(String::new(), |r| r.to_string());
                let _ = writeln!(
                    s,
                    "{},{},{},{t},{},{},{},{},{},{psrf}",
                    c.scenario.roman(),
                    f.variant.name(),
                    e.name(),
                    p.median,
                    p.q025,
                    p.q975,
                    p.width,
                    u8::from(p.covers(t))
                );
            }
        }
    }
    s
}

pub fn recovery_csv(reports: &[RecoveryReport]) -> String {
    let mut s =
        String::from("scenario,variant,estimand,truth,replications,mean_estimate,bias,percent_bias,mse,coverage,mean_width\n");
    for r in reports {
        for v in &r.variants {
            let rows = [(Estimand::TauC, Some(&v.tau_c)), (Estimand::TauN, v.tau_n.as_ref())];
            for (e, m) in rows {
                let Some(m) = m else { continue };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.scenario.roman(),
                    v.variant.name(),
                    e.name(),
                    m.truth,
                    m.replications,
                    m.mean_estimate,
                    m.bias,
                    m.percent_bias,
                    m.mse,
                    m.coverage,
                    m.mean_width
                );
            }
        }
    }
    s
}
