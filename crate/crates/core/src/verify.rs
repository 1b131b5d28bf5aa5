//! Self-checks behind `attn verify`. Each suite runs small, fast invariant
//! checks in `f64` and reports every result; the suite passes iff all do.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::Serialize;

use crate::attention::{att_forward, AttentionParams};
use crate::error::{invalid, AttnError, Result};
use crate::jacobian::{
    finite_difference_block, frobenius_norm_blocks, frobenius_norm_exact,
    frobenius_norm_exact_with_residual, frobenius_norm_hutchinson, Budget, LayerJacobian,
    SimplexJacobian,
};
use crate::theory::{
    simplex_eta_finite_n, simplex_finite_n, simplex_gradient_sums, simplex_regime,
    z_partition_prediction, PartitionCase, Regime,
};
use crate::tokens::{
    make_simplex, sample_gaussian_factor, GaussianFactorSpec, SimplexSpec, TokenConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Jacobian,
    Theory,
    Simplex,
}

impl Suite {
    pub const NAMES: [&'static str; 4] = ["all", "jacobian", "theory", "simplex"];

    fn members(self) -> &'static [Suite] {
        match self {
            Suite::All => &[Suite::Jacobian, Suite::Theory, Suite::Simplex],
            Suite::Jacobian => &[Suite::Jacobian],
            Suite::Theory => &[Suite::Theory],
            Suite::Simplex => &[Suite::Simplex],
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Suite::All => "all",
            Suite::Jacobian => "jacobian",
            Suite::Theory => "theory",
            Suite::Simplex => "simplex",
        };
        f.write_str(name)
    }
}

impl FromStr for Suite {
    type Err = AttnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "jacobian" => Ok(Suite::Jacobian),
            "theory" => Ok(Suite::Theory),
            "simplex" => Ok(Suite::Simplex),
            other => Err(invalid(format!(
                "unknown suite '{other}' (expected one of {})",
                Suite::NAMES.join(", ")
            ))),
        }
    }
}

/// One invariant: a measured error against its tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub error: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {:<8} {:<44} err={:.3e} tol={:.1e}  {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.error,
                c.tolerance,
                c.detail
            ));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!(
            "suite {}: {} checks, {} failed -> {}\n",
            self.suite,
            self.checks.len(),
            failed,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        if let Some(c) = self.first_failure() {
            out.push_str(&format!("first failure: {} ({})\n", c.name, c.detail));
        }
        out
    }
}

struct Recorder {
    suite: Suite,
    checks: Vec<Check>,
}

impl Recorder {
    fn check(
        &mut self,
        name: impl Into<String>,
        error: f64,
        tolerance: f64,
        detail: impl Into<String>,
    ) {
        self.checks.push(Check {
            suite: self.suite,
            name: name.into(),
            // NaN never passes.
            passed: error <= tolerance,
            error,
            tolerance,
            detail: detail.into(),
        });
    }

    /// A computation that errored counts as a failed check, not an abort.
    fn attempt(&mut self, name: &str, tolerance: f64, f: impl FnOnce() -> Result<(f64, String)>) {
        match f() {
            Ok((err, detail)) => self.check(name, err, tolerance, detail),
            Err(e) => self.check(name, f64::NAN, tolerance, format!("error: {e}")),
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn gaussian(n: usize, d: usize, seed: u64) -> Result<TokenConfig<f64>> {
    sample_gaussian_factor(&GaussianFactorSpec {
        n,
        d,
        rho: 0.5,
        seed,
    })
}

fn simplex(n: usize, q: f64, rho: f64) -> Result<TokenConfig<f64>> {
    make_simplex(&SimplexSpec {
        n,
        d: n + 1,
        q,
        rho,
    })
}

/// Largest relative Frobenius error of analytic blocks against central
/// differences over every `(i, j)`.
fn max_fd_error(cfg: &TokenConfig<f64>, params: &AttentionParams<f64>) -> Result<f64> {
    let layer = LayerJacobian::new(cfg, params)?;
    let mut worst = 0.0f64;
    for i in 0..cfg.n() {
        for j in 0..cfg.n() {
            let fd = finite_difference_block(cfg, params, i, j, 1e-5)?;
            let an = layer.block(i, j);
            let err = frob(&(&an - &fd)) / frob(&fd).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn jacobian_suite(r: &mut Recorder) {
    let p = AttentionParams::with_gamma(1.0, 0.0);
    r.attempt("blocks vs finite differences (gaussian)", 1e-6, || {
        let mut worst = 0.0f64;
        for seed in 0..4 {
            worst = worst.max(max_fd_error(&gaussian(6, 4, seed)?, &p)?);
        }
        Ok((worst, "4 configs, n=6 d=4, all blocks".into()))
    });
    r.attempt("blocks vs finite differences (simplex)", 1e-6, || {
        let worst = max_fd_error(&simplex(5, 2.0, 0.5)?, &p)?;
        Ok((worst, "n=5 q=2 rho=0.5".into()))
    });
    r.attempt("gram identity vs block squaring", 1e-10, || {
        let cfg = gaussian(12, 7, 11)?;
        let b = Budget::default();
        let g = frobenius_norm_exact(&cfg, &p, &b)?
            .frobenius_sq
            .unwrap_or(f64::NAN);
        let s = frobenius_norm_blocks(&cfg, &p, &b)?
            .frobenius_sq
            .unwrap_or(f64::NAN);
        Ok((rel(g, s), format!("|J|^2 = {g:.6}")))
    });
    r.attempt("residual norm identity vs dense", 1e-10, || {
        let cfg = gaussian(6, 5, 3)?;
        let pa = AttentionParams::with_gamma(1.5, 0.7);
        let fast = frobenius_norm_exact_with_residual(&cfg, &pa, &Budget::default())?
            .frobenius_sq
            .unwrap_or(f64::NAN);
        let dense = frob(&LayerJacobian::new(&cfg, &pa)?.dense(true)).powi(2);
        Ok((rel(fast, dense), "alpha=0.7".into()))
    });
    r.attempt("jvp vs dense product", 1e-11, || {
        let cfg = gaussian(7, 4, 5)?;
        let layer = LayerJacobian::new(&cfg, &p)?;
        let dense = layer.dense(false);
        let v = Array2::from_shape_fn((7, 4), |(a, b)| ((a * 4 + b) as f64 * 0.37).sin());
        let flat = v
            .clone()
            .into_shape_with_order(28)
            .map_err(|e| AttnError::Shape(e.to_string()))?;
        // Row-vector convention: (dX) J.
        let want = flat
            .dot(&dense)
            .into_shape_with_order((7, 4))
            .map_err(|e| AttnError::Shape(e.to_string()))?;
        let got = layer.jvp(&v);
        Ok((frob(&(&got - &want)) / frob(&want), "n=7 d=4".into()))
    });
    r.attempt("hutchinson within 4 se of exact", 4.0, || {
        let cfg = gaussian(16, 8, 2)?;
        let exact = frobenius_norm_exact(&cfg, &p, &Budget::default())?
            .frobenius_sq
            .unwrap_or(f64::NAN);
        let h = frobenius_norm_hutchinson(&cfg, &p, 400, 9)?
            .eta_hutchinson
            .ok_or_else(|| invalid("no estimate"))?;
        let se = h.frobenius_sq_se.unwrap_or(f64::NAN);
        Ok((
            (h.frobenius_sq - exact).abs() / se,
            format!("z-score, 400 probes, se={se:.3e}"),
        ))
    });
    r.attempt("simplex fast path vs generic blocks", 1e-11, || {
        let (n, q, rho, gamma) = (6, 1.7, 0.4, 1.3);
        let cfg = simplex(n, q, rho)?;
        let beta = gamma * (n as f64).ln();
        let fast = SimplexJacobian::new(&cfg, rho, q, beta)?;
        let layer = LayerJacobian::new(&cfg, &AttentionParams::with_beta(beta, 0.0))?;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let g = layer.block(i, j);
                worst = worst.max(frob(&(&fast.block(i, j) - &g)) / frob(&g).max(1e-12));
            }
        }
        Ok((worst, format!("n={n} q={q} rho={rho}")))
    });
}

fn theory_suite(r: &mut Recorder) {
    for &n in &[8usize, 16] {
        for &rho in &[0.25, 0.5] {
            for &beta in &[1.0, 3.0] {
                let label = format!("n={n} rho={rho} beta={beta}");
                r.attempt(
                    &format!("gradient sums closed form ({label})"),
                    1e-8,
                    || {
                        let cfg = simplex(n, 1.0, rho)?;
                        let num = SimplexJacobian::new(&cfg, rho, 1.0, beta)?.gradient_sums();
                        let cf = simplex_gradient_sums(n, n + 1, rho, beta);
                        let errs = [
                            rel(cf.r1r1, num.r1r1),
                            rel(cf.r1r2, num.r1r2),
                            rel(cf.r2r2, num.r2r2),
                            rel(cf.rr, num.rr),
                            rel(cf.urv, num.urv),
                            rel(cf.uu, num.uu),
                        ];
                        let worst = errs.iter().copied().fold(0.0, f64::max);
                        Ok((
                            worst,
                            format!(
                                "cross term once would be off by {:.2e}",
                                rel(cf.rr_single_cross, num.rr)
                            ),
                        ))
                    },
                );
            }
        }
    }
    r.attempt("finite-n eta vs exact jacobian", 1e-9, || {
        let mut worst = 0.0f64;
        for &(n, rho, beta) in &[(8usize, 0.3, 0.5), (12, 0.6, 2.0), (10, 0.5, 4.0)] {
            let q = 1.5;
            let cfg = simplex(n, q, rho)?;
            let exact = frobenius_norm_exact(
                &cfg,
                &AttentionParams::with_beta(beta, 0.0),
                &Budget::default(),
            )?
            .eta_exact
            .unwrap_or(f64::NAN);
            worst = worst.max(rel(simplex_eta_finite_n(rho, q, n + 1, beta, n), exact));
        }
        Ok((worst, "3 simplex configs".into()))
    });
    r.attempt("regime labels around 1/(1-rho)", 0.0, || {
        let cases = [
            (0.5, 1.9, Regime::Subcritical),
            (0.5, 2.0, Regime::Critical),
            (0.5, 2.1, Regime::Supercritical),
            (0.75, 3.9, Regime::Subcritical),
            (0.75, 4.1, Regime::Supercritical),
        ];
        let wrong = cases
            .iter()
            .filter(|&&(rho, g, want)| simplex_regime(rho, g) != want)
            .count();
        Ok((wrong as f64, "count of mislabelled points".into()))
    });
    r.attempt("partition leading term (simplex, n=1e4)", 0.02, || {
        let n = 10_000usize;
        let rho = 0.5;
        let mut worst = 0.0f64;
        for &g in &[1.0, 2.0, 4.0] {
            let pred = z_partition_prediction(&PartitionCase::Simplex { rho }, n, g)?;
            let exact = simplex_finite_n(rho, 1.0, 0.0, g * (n as f64).ln(), n)?.log_z;
            let lead = pred
                .leading_log_z
                .ok_or_else(|| invalid("no leading term"))?;
            worst = worst.max(((exact - lead).exp() - 1.0).abs());
        }
        Ok((worst, "max |Z / leading - 1| over gamma in {1,2,4}".into()))
    });
}

fn simplex_suite(r: &mut Recorder) {
    r.attempt("finite-n inner products vs simulation", 1e-10, || {
        let mut worst = 0.0f64;
        for &n in &[4usize, 16, 64] {
            for &rho in &[0.25, 0.5, 0.75] {
                for &alpha in &[0.0, 0.5, 1.0] {
                    for &beta in &[0.0, 1.0, 5.0] {
                        let q = 1.0;
                        let cfg = simplex(n, q, rho)?;
                        let out = att_forward(&cfg, &AttentionParams::with_beta(beta, alpha))?;
                        let x = &out.x_next;
                        let pred = simplex_finite_n(rho, q, alpha, beta, n)?;
                        let len = x.row(0).dot(&x.row(0));
                        let inner = x.row(0).dot(&x.row(1));
                        worst = worst
                            .max(rel(pred.finite_n_len, len))
                            .max(rel(pred.finite_n_inner, inner));
                    }
                }
            }
        }
        Ok((worst, "81 grid points".into()))
    });
    r.attempt("geometry of the generator", 1e-12, || {
        let cfg = simplex(40, 2.5, 0.3)?;
        let g = cfg.gram();
        let mut worst = 0.0f64;
        for i in 0..40 {
            worst = worst.max((cfg.norms()[i] * cfg.norms()[i] - 2.5).abs());
            for j in 0..40 {
                let want = if i == j { 1.0 } else { 0.3 };
                worst = worst.max((g[[i, j]] - want).abs());
            }
        }
        Ok((worst, "n=40 q=2.5 rho=0.3".into()))
    });
    r.attempt("forward limit trend (rho=0.5, gamma=4)", 0.05, || {
        // Supercritical: tokens keep their cosine 0.5.
        let n = 512;
        let cfg = simplex(n, 1.0, 0.5)?;
        let out = att_forward(&cfg, &AttentionParams::with_gamma(4.0, 0.0))?;
        let next = out.next_config()?;
        let c = next.y().row(0).dot(&next.y().row(1));
        Ok(((c - 0.5).abs(), format!("cos = {c:.4} at n={n}")))
    });
    r.attempt("forward limit trend (rho=0.5, gamma=1)", 0.05, || {
        let n = 512;
        let cfg = simplex(n, 1.0, 0.5)?;
        let out = att_forward(&cfg, &AttentionParams::with_gamma(1.0, 0.0))?;
        let next = out.next_config()?;
        let c = next.y().row(0).dot(&next.y().row(1));
        Ok(((c - 1.0).abs(), format!("cos = {c:.4} at n={n}")))
    });
}

/// Runs the selected suite(s). Never returns `Err` for a failing check;
/// failures are recorded in the report.
pub fn run_verify(suite: Suite) -> VerifyReport {
    let mut checks = Vec::new();
    for &s in suite.members() {
        let mut r = Recorder {
            suite: s,
            checks: Vec::new(),
        };
        match s {
            Suite::Jacobian => jacobian_suite(&mut r),
            Suite::Theory => theory_suite(&mut r),
            Suite::Simplex => simplex_suite(&mut r),
            Suite::All => unreachable!("expanded above"),
        }
        checks.extend(r.checks);
    }
    VerifyReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
