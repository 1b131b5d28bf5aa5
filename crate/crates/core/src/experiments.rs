//! The angle ratio `lambda`, the Jacobian metric `eta`, and deterministic
//! parallel sweeps over `(rho, gamma, d, seed)` with CSV output.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{att_forward, AttentionParams};
use crate::error::{invalid, AttnError, Result};
use crate::jacobian::{derive_seed, frobenius_norm_exact, frobenius_norm_hutchinson, Budget};
use crate::scalar::Scalar;
use crate::theory::{classify_three_phase, classify_two_phase, simplex_regime, simplex_threshold};
use crate::tokens::{
    make_simplex, make_three_phase, sample_gaussian_factor, summarize_geometry, GaussianFactorSpec,
    SimplexSpec, ThreePhaseSpec, TokenConfig,
};

const DEGENERATE: f64 = 1e-12;
/// Below this defect the Gram entry is replaced by `|y_i - y_j|^2 / 2`,
/// which is exact for identical rows and avoids cancellation.
const PRECISE_BELOW: f64 = 1e-6;

fn defect<T: Scalar>(gram: T, a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    let quick = T::one() - gram;
    if quick.as_f64() > PRECISE_BELOW {
        return quick;
    }
    let half = T::lit(0.5);
    a.iter()
        .zip(b.iter())
        .map(|(&u, &v)| (u - v) * (u - v))
        .sum::<T>()
        * half
}

/// Pair average of `(1 - <y'_i, y'_j>) / (1 - <y_i, y_j>)` from precomputed Gram matrices.
pub(crate) fn lambda_from_parts<T: Scalar>(
    y0: &Array2<T>,
    g0: &Array2<T>,
    y1: &Array2<T>,
    g1: &Array2<T>,
) -> Result<T> {
    let n = g0.nrows();
    if n < 2 {
        return Err(AttnError::TooFewTokens { n });
    }
    if g1.nrows() != n {
        return Err(AttnError::Shape(format!(
            "token counts differ: {n} vs {}",
            g1.nrows()
        )));
    }
    let mut total = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            let before = defect(g0[[i, j]], y0.row(i), y0.row(j));
            if before.as_f64() <= DEGENERATE {
                return Err(AttnError::DegeneratePair {
                    i,
                    j,
                    cosine: g0[[i, j]].as_f64(),
                });
            }
            total += defect(g1[[i, j]], y1.row(i), y1.row(j)) / before;
        }
    }
    let pairs = T::from_usize_lossy(n * (n - 1) / 2);
    Ok(total / pairs)
}

/// Input-to-output angle ratio. 1 means angles are preserved, 0 means
/// every output points the same way.
pub fn compute_lambda<T: Scalar>(before: &TokenConfig<T>, after: &TokenConfig<T>) -> Result<T> {
    lambda_from_parts(before.y(), &before.gram(), after.y(), &after.gram())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    Exact,
    Hutchinson { probes: usize, seed: u64 },
}

/// `eta` of the attention layer with the residual switched off. Returns
/// the value and, for the stochastic mode, its standard error.
pub fn compute_eta<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    mode: EtaMode,
    budget: &Budget,
) -> Result<(T, Option<T>)> {
    let p = params.without_residual();
    match mode {
        EtaMode::Exact => {
            let r = frobenius_norm_exact(cfg, &p, budget)?;
            Ok((r.eta_exact.expect("exact route fills eta"), None))
        }
        EtaMode::Hutchinson { probes, seed } => {
            let h = frobenius_norm_hutchinson(cfg, &p, probes, seed)?
                .eta_hutchinson
                .expect("stochastic route fills estimate");
            Ok((h.eta, h.eta_se))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Lambda,
    EtaExact,
    EtaHutchinson,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Lambda => "lambda",
            Metric::EtaExact => "eta_exact",
            Metric::EtaHutchinson => "eta_hutchinson",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = AttnError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lambda" => Ok(Metric::Lambda),
            "eta_exact" | "eta" => Ok(Metric::EtaExact),
            "eta_hutchinson" | "hutchinson" => Ok(Metric::EtaHutchinson),
            other => Err(AttnError::Parse(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Generator {
    /// Exact simplex with `q = 1` and `d` as given (`d >= n + 1`).
    Simplex,
    /// Gaussian factor model with cosine parameter `rho`.
    Gaussian,
    /// Clustered layout. The `rho` axis is only a label here; geometry comes
    /// from these fields.
    ThreePhase {
        tau: f64,
        rho1: f64,
        rho2: f64,
        rho3: f64,
        rho4: f64,
        kappa3: f64,
        kappa4: f64,
    },
}

impl Generator {
    fn name(&self) -> &'static str {
        match self {
            Generator::Simplex => "simplex",
            Generator::Gaussian => "gaussian",
            Generator::ThreePhase { .. } => "three-phase",
        }
    }
}

/// Cartesian grid of sweep points; one record per point and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub rho_values: Vec<f64>,
    pub gamma_values: Vec<f64>,
    pub d_values: Vec<usize>,
    pub n: usize,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub metrics: Vec<Metric>,
    pub generator: Generator,
    /// Probe count for the stochastic metric.
    pub probes: usize,
    pub budget: Budget,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            rho_values: vec![0.5],
            gamma_values: vec![1.0],
            d_values: vec![512],
            n: 256,
            alpha: 0.0,
            seeds: vec![0],
            metrics: vec![Metric::Lambda],
            generator: Generator::Gaussian,
            probes: 64,
            budget: Budget::default(),
        }
    }
}

impl SweepGrid {
    pub fn check(&self) -> Result<()> {
        if self.rho_values.is_empty()
            || self.gamma_values.is_empty()
            || self.d_values.is_empty()
            || self.seeds.is_empty()
            || self.metrics.is_empty()
        {
            return Err(invalid("every sweep axis needs at least one value"));
        }
        if self.n < 2 {
            return Err(AttnError::TooFewTokens { n: self.n });
        }
        if self.probes == 0 && self.metrics.contains(&Metric::EtaHutchinson) {
            return Err(invalid("probes must be >= 1"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rho_values.len() * self.gamma_values.len() * self.d_values.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result at one `(rho, gamma, d, seed)` point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub rho: f64,
    pub gamma: f64,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub eta_exact: Option<f64>,
    pub eta_hutchinson: Option<f64>,
    pub eta_hutchinson_se: Option<f64>,
    pub regime: String,
    /// `1 / (1 - rho)`.
    pub predicted_boundary: f64,
    pub error: Option<String>,
}

/// Seed of one grid point, from the sweep seed and the axis indices.
pub fn point_seed(seed: u64, rho_idx: usize, gamma_idx: usize, d_idx: usize) -> u64 {
    let s = derive_seed(seed, rho_idx as u64);
    let s = derive_seed(s, gamma_idx as u64);
    derive_seed(s, d_idx as u64)
}

fn generate(grid: &SweepGrid, rho: f64, d: usize, seed: u64) -> Result<TokenConfig<f64>> {
    match grid.generator {
        Generator::Simplex => make_simplex(&SimplexSpec {
            n: grid.n,
            d,
            q: 1.0,
            rho,
        }),
        Generator::Gaussian => sample_gaussian_factor(&GaussianFactorSpec {
            n: grid.n,
            d,
            rho,
            seed,
        }),
        Generator::ThreePhase { .. } => make_three_phase(&three_phase_spec(grid)?, d, seed),
    }
}

fn three_phase_spec(grid: &SweepGrid) -> Result<ThreePhaseSpec<f64>> {
    match grid.generator {
        Generator::ThreePhase {
            tau,
            rho1,
            rho2,
            rho3,
            rho4,
            kappa3,
            kappa4,
        } => Ok(ThreePhaseSpec {
            n: grid.n,
            tau,
            rho1,
            rho2,
            rho3,
            rho4,
            kappa3,
            kappa4,
        }),
        _ => Err(invalid("not a three-phase generator")),
    }
}

fn regime_label(grid: &SweepGrid, cfg: &TokenConfig<f64>, rho: f64, gamma: f64) -> String {
    let verdict = match grid.generator {
        Generator::Simplex => return simplex_regime(rho, gamma).to_string(),
        Generator::Gaussian => summarize_geometry(cfg).and_then(|s| classify_two_phase(&s, gamma)),
        Generator::ThreePhase { .. } => {
            three_phase_spec(grid).and_then(|s| classify_three_phase(&s, gamma))
        }
    };
    verdict
        .map(|v| v.regime.to_string())
        .unwrap_or_else(|_| "unclassified".into())
}

fn evaluate_point(
    grid: &SweepGrid,
    rho: f64,
    gamma: f64,
    d: usize,
    seed: u64,
) -> Result<SweepRecord> {
    let cfg = generate(grid, rho, d, seed)?;
    let params = AttentionParams::with_gamma(gamma, grid.alpha);
    let mut rec = SweepRecord {
        rho,
        gamma,
        d,
        n: grid.n,
        seed,
        lambda: None,
        eta_exact: None,
        eta_hutchinson: None,
        eta_hutchinson_se: None,
        regime: regime_label(grid, &cfg, rho, gamma),
        predicted_boundary: simplex_threshold(rho),
        error: None,
    };
    for metric in &grid.metrics {
        match metric {
            Metric::Lambda => {
                let out = att_forward(&cfg, &params)?.next_config()?;
                rec.lambda = Some(compute_lambda(&cfg, &out)?);
            }
            Metric::EtaExact => {
                rec.eta_exact = Some(compute_eta(&cfg, &params, EtaMode::Exact, &grid.budget)?.0);
            }
            Metric::EtaHutchinson => {
                let mode = EtaMode::Hutchinson {
                    probes: grid.probes,
                    seed,
                };
                let (eta, se) = compute_eta(&cfg, &params, mode, &grid.budget)?;
                rec.eta_hutchinson = Some(eta);
                rec.eta_hutchinson_se = se;
            }
        }
    }
    Ok(rec)
}

/// Runs every grid point and returns records in grid order
/// (rho, then gamma, then d, then seed). Errors at a point are stored in
/// that record and the sweep carries on. `workers = None` uses every core.
pub fn run_sweep(grid: &SweepGrid, workers: Option<usize>) -> Result<Vec<SweepRecord>> {
    grid.check()?;
    let mut jobs = Vec::with_capacity(grid.len());
    for (ri, &rho) in grid.rho_values.iter().enumerate() {
        for (gi, &gamma) in grid.gamma_values.iter().enumerate() {
            for (di, &d) in grid.d_values.iter().enumerate() {
                for &seed in &grid.seeds {
                    jobs.push((rho, gamma, d, seed, point_seed(seed, ri, gi, di)));
                }
            }
        }
    }
    let run = || -> Vec<SweepRecord> {
        jobs.par_iter()
            .map(|&(rho, gamma, d, seed, derived)| {
                evaluate_point(grid, rho, gamma, d, derived)
                    .map(|mut r| {
                        r.seed = seed;
                        r
                    })
                    .unwrap_or_else(|e| SweepRecord {
                        rho,
                        gamma,
                        d,
                        n: grid.n,
                        seed,
                        lambda: None,
                        eta_exact: None,
                        eta_hutchinson: None,
                        eta_hutchinson_se: None,
                        regime: "error".into(),
                        predicted_boundary: simplex_threshold(rho),
                        error: Some(e.to_string().replace(['\n', '\r'], " ")),
                    })
            })
            .collect()
    };
    match workers {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(run))
        }
        None => Ok(run()),
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "rho", "gamma", "d", "n", "seed", "metric", "value", "stderr", "regime",
];
const ERROR_PREFIX: &str = "error: ";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Long-format CSV: one row per record and metric. A failed point writes
/// one row per requested metric with value `NaN` and the regime column
/// set to `error: <message>`.
pub fn emit_csv<W: Write>(records: &[SweepRecord], metrics: &[Metric], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let key = [
            r.rho.to_string(),
            r.gamma.to_string(),
            r.d.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
        ];
        for &m in metrics {
            let (value, se) = match m {
                Metric::Lambda => (r.lambda, None),
                Metric::EtaExact => (r.eta_exact, None),
                Metric::EtaHutchinson => (r.eta_hutchinson, r.eta_hutchinson_se),
            };
            let regime = match &r.error {
                Some(e) => format!("{ERROR_PREFIX}{e}"),
                None => r.regime.clone(),
            };
            let value = if r.error.is_some() {
                "NaN".to_string()
            } else {
                fmt_opt(value)
            };
            let mut row: Vec<String> = key.to_vec();
            row.extend([m.name().to_string(), value, fmt_opt(se), regime]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv_path(records: &[SweepRecord], metrics: &[Metric], path: &Path) -> Result<()> {
    emit_csv(records, metrics, std::fs::File::create(path)?)
}

fn parse_field<F: FromStr>(s: &str, what: &str) -> Result<F> {
    s.trim()
        .parse()
        .map_err(|_| AttnError::Parse(format!("bad {what}: {s:?}")))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_field(s, "number").map(Some)
    }
}

/// Inverse of [`emit_csv`]: consecutive rows with the same
/// `(rho, gamma, d, n, seed)` merge into one record.
pub fn parse_records_csv<R: Read>(input: R) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(AttnError::Parse(format!("unexpected header {header:?}")));
    }
    let mut out: Vec<SweepRecord> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let rho: f64 = parse_field(&row[0], "rho")?;
        let gamma: f64 = parse_field(&row[1], "gamma")?;
        let d: usize = parse_field(&row[2], "d")?;
        let n: usize = parse_field(&row[3], "n")?;
        let seed: u64 = parse_field(&row[4], "seed")?;
        let metric: Metric = row[5].parse()?;
        let value = parse_opt(&row[6])?;
        let se = parse_opt(&row[7])?;
        let (regime, error) = match row[8].strip_prefix(ERROR_PREFIX) {
            Some(msg) => ("error".to_string(), Some(msg.to_string())),
            None => (row[8].to_string(), None),
        };
        let same = out.last().is_some_and(|r: &SweepRecord| {
            r.rho.to_bits() == rho.to_bits()
                && r.gamma.to_bits() == gamma.to_bits()
                && r.d == d
                && r.n == n
                && r.seed == seed
        });
        if !same {
            out.push(SweepRecord {
                rho,
                gamma,
                d,
                n,
                seed,
                lambda: None,
                eta_exact: None,
                eta_hutchinson: None,
                eta_hutchinson_se: None,
                regime: regime.clone(),
                predicted_boundary: simplex_threshold(rho),
                error: error.clone(),
            });
        }
        let rec = out.last_mut().expect("pushed above");
        if error.is_none() {
            match metric {
                Metric::Lambda => rec.lambda = value,
                Metric::EtaExact => rec.eta_exact = value,
                Metric::EtaHutchinson => {
                    rec.eta_hutchinson = value;
                    rec.eta_hutchinson_se = se;
                }
            }
        }
    }
    Ok(out)
}

/// `(rho, 1/(1-rho))` for every `rho` in the grid, the dashed boundary of
/// the phase diagrams.
pub fn emit_boundary_overlay<W: Write>(grid: &SweepGrid, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rho", "gamma"])?;
    for &rho in &grid.rho_values {
        w.write_record([rho.to_string(), simplex_threshold(rho).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Gnuplot `pm3d`-style table of one metric averaged over seeds and `d`:
/// `rho gamma value`, with a blank line after each `rho` block.
pub fn emit_heatmap<W: Write>(records: &[SweepRecord], metric: Metric, mut out: W) -> Result<()> {
    let mut cells: BTreeMap<(u64, u64), (f64, f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let v = match metric {
            Metric::Lambda => r.lambda,
            Metric::EtaExact => r.eta_exact,
            Metric::EtaHutchinson => r.eta_hutchinson,
        };
        if let Some(v) = v.filter(|v| v.is_finite()) {
            // Non-negative floats order like their bit patterns.
            let e = cells
                .entry((r.rho.to_bits(), r.gamma.to_bits()))
                .or_insert((r.rho, r.gamma, 0.0, 0));
            e.2 += v;
            e.3 += 1;
        }
    }
    writeln!(out, "# rho gamma {}", metric.name())?;
    let mut last_rho = None;
    for (rho, gamma, sum, count) in cells.values() {
        if last_rho.is_some_and(|r: f64| r != *rho) {
            writeln!(out)?;
        }
        writeln!(out, "{rho} {gamma} {}", sum / *count as f64)?;
        last_rho = Some(*rho);
    }
    Ok(())
}

fn parse_list<F: FromStr>(key: &str, value: &str) -> Result<Vec<F>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_field(s, key))
        .collect()
}

/// Sweep configuration plus where to write it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub grid: SweepGrid,
    pub out_dir: Option<String>,
    pub workers: Option<usize>,
}

/// Parses `key = value` lines; lists are comma separated, `#` starts a
/// comment. Keys: `rho`, `gamma`, `d`, `n`, `alpha`, `seeds` (or `seed`
/// with optional `num_seeds`), `metrics`, `generator`
/// (`simplex|gaussian|three-phase`), `probes`, `out`, `workers`,
/// `max_n2d2`, and for three-phase `tau rho1 rho2 rho3 rho4 kappa3 kappa4`.
pub fn parse_sweep_config(text: &str) -> Result<SweepConfig> {
    let mut grid = SweepGrid::default();
    let mut out_dir = None;
    let mut workers = None;
    let mut generator = "gaussian".to_string();
    let mut base_seed: Option<u64> = None;
    let mut num_seeds: Option<usize> = None;
    let mut tp: BTreeMap<&'static str, f64> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            AttnError::Parse(format!("line {}: expected key = value", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "rho" => grid.rho_values = parse_list(key, value)?,
            "gamma" => grid.gamma_values = parse_list(key, value)?,
            "d" => grid.d_values = parse_list(key, value)?,
            "n" => grid.n = parse_field(value, key)?,
            "alpha" => grid.alpha = parse_field(value, key)?,
            "seeds" => grid.seeds = parse_list(key, value)?,
            "seed" => base_seed = Some(parse_field(value, key)?),
            "num_seeds" => num_seeds = Some(parse_field(value, key)?),
            "metrics" => grid.metrics = parse_list(key, value)?,
            "generator" => generator = value.to_string(),
            "probes" => grid.probes = parse_field(value, key)?,
            "out" => out_dir = Some(value.to_string()),
            "workers" => workers = Some(parse_field(value, key)?),
            "max_n2d2" => grid.budget.max_n2d2 = parse_field(value, key)?,
            "tau" | "rho1" | "rho2" | "rho3" | "rho4" | "kappa3" | "kappa4" => {
                let k: &'static str = match key {
                    "tau" => "tau",
                    "rho1" => "rho1",
                    "rho2" => "rho2",
                    "rho3" => "rho3",
                    "rho4" => "rho4",
                    "kappa3" => "kappa3",
                    _ => "kappa4",
                };
                tp.insert(k, parse_field(value, key)?);
            }
            other => {
                return Err(AttnError::Parse(format!(
                    "line {}: unknown key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    if let Some(s) = base_seed {
        grid.seeds = (0..num_seeds.unwrap_or(1) as u64).map(|k| s + k).collect();
    } else if let Some(k) = num_seeds {
        grid.seeds = (0..k as u64).collect();
    }
    grid.generator = match generator.as_str() {
        "simplex" => Generator::Simplex,
        "gaussian" => Generator::Gaussian,
        "three-phase" | "three_phase" => {
            let get = |k: &str| {
                tp.get(k)
                    .copied()
                    .ok_or_else(|| AttnError::Parse(format!("three-phase generator needs {k}")))
            };
            Generator::ThreePhase {
                tau: get("tau")?,
                rho1: get("rho1")?,
                rho2: get("rho2")?,
                rho3: get("rho3")?,
                rho4: get("rho4")?,
                kappa3: get("kappa3")?,
                kappa4: get("kappa4")?,
            }
        }
        other => return Err(AttnError::Parse(format!("unknown generator {other:?}"))),
    };
    grid.check()?;
    Ok(SweepConfig {
        grid,
        out_dir,
        workers,
    })
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    grid: &'a SweepGrid,
    generator: &'a str,
    points: usize,
    records: usize,
    errors: usize,
    workers: Option<usize>,
    crate_version: &'static str,
    profile: &'static str,
    note: &'static str,
}

/// Runs the sweep and writes `records.csv`, `boundary.csv`,
/// `heatmap_<metric>.dat` and `meta.json` into `out_dir`.
pub fn run_sweep_to_dir(
    grid: &SweepGrid,
    workers: Option<usize>,
    out_dir: &Path,
) -> Result<Vec<SweepRecord>> {
    let records = run_sweep(grid, workers)?;
    std::fs::create_dir_all(out_dir)?;
    emit_csv_path(&records, &grid.metrics, &out_dir.join("records.csv"))?;
    emit_boundary_overlay(grid, std::fs::File::create(out_dir.join("boundary.csv"))?)?;
    for &m in &grid.metrics {
        emit_heatmap(
            &records,
            m,
            std::fs::File::create(out_dir.join(format!("heatmap_{}.dat", m.name())))?,
        )?;
    }
    let meta = Meta {
        grid,
        generator: grid.generator.name(),
        points: grid.len(),
        records: records.len(),
        errors: records.iter().filter(|r| r.error.is_some()).count(),
        workers,
        crate_version: env!("CARGO_PKG_VERSION"),
        profile: if cfg!(debug_assertions) {
            "debug"
        } else {
            "release"
        },
        note: "n, seeds and grid are user choices; defaults are n = 256, one seed, 64 probes",
    };
    let file = std::fs::File::create(out_dir.join("meta.json"))?;
    serde_json::to_writer_pretty(file, &meta)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(rows: Array2<f64>) -> TokenConfig<f64> {
        TokenConfig::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_gives_one() {
        let c = sample_gaussian_factor(&GaussianFactorSpec {
            n: 20,
            d: 6,
            rho: 0.5,
            seed: 1,
        })
        .unwrap();
        assert_eq!(compute_lambda(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn collapse_gives_zero() {
        let before = cfg(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let after = cfg(array![[0.3, 0.7], [0.3, 0.7], [0.3, 0.7]]);
        assert_eq!(compute_lambda(&before, &after).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_input_pair() {
        let before = cfg(array![[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]);
        let err = compute_lambda(&before, &before).unwrap_err();
        assert!(matches!(err, AttnError::DegeneratePair { i: 0, j: 1, .. }));
    }

    #[test]
    fn boundary_overlay() {
        let grid = SweepGrid {
            rho_values: vec![0.25, 0.5],
            ..SweepGrid::default()
        };
        let mut buf = Vec::new();
        emit_boundary_overlay(&grid, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("0.5,2\n"), "{text}");
    }

    fn record(rho: f64, lambda: f64) -> SweepRecord {
        SweepRecord {
            rho,
            gamma: 1.5,
            d: 8,
            n: 4,
            seed: 3,
            lambda: Some(lambda),
            eta_exact: None,
            eta_hutchinson: None,
            eta_hutchinson_se: None,
            regime: "subcritical".into(),
            predicted_boundary: simplex_threshold(rho),
            error: None,
        }
    }

    #[test]
    fn csv_shape_and_round_trip() {
        let recs = vec![record(0.1, 0.123456789012345), record(0.7, 1.0 / 3.0)];
        let mut buf = Vec::new();
        emit_csv(&recs, &[Metric::Lambda], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(
            text.lines().next().unwrap(),
            "rho,gamma,d,n,seed,metric,value,stderr,regime"
        );
        assert_eq!(parse_records_csv(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn error_records_round_trip() {
        let mut bad = record(0.5, 0.0);
        bad.lambda = None;
        bad.regime = "error".into();
        bad.error = Some("dimension too small: need d >= 5, got d = 4".into());
        let recs = vec![bad];
        let mut buf = Vec::new();
        emit_csv(&recs, &[Metric::Lambda], &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().contains(",NaN,"));
        assert_eq!(parse_records_csv(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn single_point_sweep_matches_direct_call() {
        let grid = SweepGrid {
            rho_values: vec![0.4],
            gamma_values: vec![1.0],
            d_values: vec![16],
            n: 12,
            seeds: vec![5],
            ..SweepGrid::default()
        };
        let recs = run_sweep(&grid, Some(1)).unwrap();
        assert_eq!(recs.len(), 1);
        let c = sample_gaussian_factor(&GaussianFactorSpec {
            n: 12,
            d: 16,
            rho: 0.4,
            seed: point_seed(5, 0, 0, 0),
        })
        .unwrap();
        let out = att_forward(&c, &AttentionParams::with_gamma(1.0, 0.0))
            .unwrap()
            .next_config()
            .unwrap();
        assert_eq!(recs[0].lambda.unwrap(), compute_lambda(&c, &out).unwrap());
        assert_eq!(recs[0].seed, 5);
    }

    #[test]
    fn failing_point_is_recorded() {
        let grid = SweepGrid {
            d_values: vec![4, 64],
            n: 8,
            generator: Generator::Simplex,
            ..SweepGrid::default()
        };
        let recs = run_sweep(&grid, Some(2)).unwrap();
        assert!(recs[0]
            .error
            .as_deref()
            .unwrap()
            .contains("dimension too small"));
        assert!(recs[1].error.is_none());
    }

    #[test]
    fn config_parser() {
        let text = "# demo\nrho = 0.1, 0.5\ngamma=1,2,4\nd=32\nn=16\nseed=7\nnum_seeds=2\nmetrics=lambda,eta_exact\nout=/tmp/x\n";
        let c = parse_sweep_config(text).unwrap();
        assert_eq!(c.grid.rho_values, vec![0.1, 0.5]);
        assert_eq!(c.grid.gamma_values, vec![1.0, 2.0, 4.0]);
        assert_eq!(c.grid.seeds, vec![7, 8]);
        assert_eq!(c.grid.metrics, vec![Metric::Lambda, Metric::EtaExact]);
        assert_eq!(c.out_dir.as_deref(), Some("/tmp/x"));
        assert!(parse_sweep_config("bogus = 1").is_err());
        assert!(parse_sweep_config("generator = three-phase").is_err());
    }

    #[test]
    fn eta_shrinks_with_uniform_attention() {
        let mut last = f64::INFINITY;
        for n in [64usize, 128, 256] {
            let c = make_simplex(&SimplexSpec {
                n,
                d: n + 1,
                q: 1.0,
                rho: 0.5,
            })
            .unwrap();
            let (eta, se) = compute_eta(
                &c,
                &AttentionParams::with_beta(0.0, 0.0),
                EtaMode::Exact,
                &Budget::default(),
            )
            .unwrap();
            assert!(se.is_none());
            assert!(eta < last);
            last = eta;
        }
    }
}
