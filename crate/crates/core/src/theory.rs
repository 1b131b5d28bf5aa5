//! Closed-form predictions: exact finite-n simplex formulas, their large-n
//! limits with `beta = gamma ln n`, and regime classifiers.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;

use crate::attention::{attention_weights, AttentionParams};
use crate::error::{invalid, AttnError, Result};
use crate::jacobian::simplex_log_z;
use crate::scalar::Scalar;
use crate::tokens::{cluster_sets, GeometrySummary, ThreePhaseSpec, TokenConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Subcritical,
    Critical,
    Middle,
    Supercritical,
    Indeterminate,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Subcritical => "subcritical",
            Regime::Critical => "critical",
            Regime::Middle => "middle",
            Regime::Supercritical => "supercritical",
            Regime::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Threshold<T> {
    pub name: &'static str,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeVerdict<T> {
    pub regime: Regime,
    pub gamma: T,
    pub thresholds: Vec<Threshold<T>>,
}

/// `1 / (1 - rho)`, the simplex phase boundary in `gamma`.
pub fn simplex_threshold<T: Scalar>(rho: T) -> T {
    T::one() / (T::one() - rho)
}

/// Exact comparison against `1/(1-rho)`; equality means critical.
pub fn simplex_regime<T: Scalar>(rho: T, gamma: T) -> Regime {
    let t = simplex_threshold(rho);
    if gamma < t {
        Regime::Subcritical
    } else if gamma > t {
        Regime::Supercritical
    } else {
        Regime::Critical
    }
}

fn check_simplex_args<T: Scalar>(rho: T, q: T, alpha: T) -> Result<()> {
    if !(rho > T::zero() && rho < T::one()) {
        return Err(invalid(format!("rho must lie in (0, 1), got {rho}")));
    }
    if !(q > T::zero()) {
        return Err(invalid(format!("q must be positive, got {q}")));
    }
    if !(alpha >= T::zero()) {
        return Err(invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<()> {
    if !(gamma > T::zero()) || !gamma.is_finite() {
        return Err(invalid(format!(
            "gamma must be positive and finite, got {gamma}"
        )));
    }
    Ok(())
}

/// Large-n limit of `<x'_i, x'_i>` on the simplex.
pub fn simplex_length_limit<T: Scalar>(rho: T, q: T, alpha: T, gamma: T) -> Result<T> {
    check_simplex_args(rho, q, alpha)?;
    check_gamma(gamma)?;
    let one = T::one();
    let s = alpha * q.sqrt();
    Ok(match simplex_regime(rho, gamma) {
        Regime::Subcritical => s * s + T::lit(2.0) * s * rho + rho,
        Regime::Critical => s * s + s * (one + rho) + (one + T::lit(3.0) * rho) / T::lit(4.0),
        _ => (s + one) * (s + one),
    })
}

/// Large-n limit of `<y'_i, y'_j>` on the simplex. The limit of
/// `<x'_i, x'_j>` is `rho (alpha sqrt(q) + 1)^2` in every regime; the
/// regime only changes the length.
pub fn simplex_cos_limit<T: Scalar>(rho: T, q: T, alpha: T, gamma: T) -> Result<T> {
    let len = simplex_length_limit(rho, q, alpha, gamma)?;
    let s = alpha * q.sqrt();
    Ok(rho * (s + T::one()) * (s + T::one()) / len)
}

/// Exact simplex quantities at finite `n` together with their limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimplexPrediction<T> {
    pub n: usize,
    pub beta: T,
    /// `beta / ln n`.
    pub gamma: T,
    pub regime: Regime,
    /// Limit of `<y'_i, y'_j>`; `None` when `beta = 0` (no `gamma > 0`).
    pub cos_limit: Option<T>,
    /// Limit of `<x'_i, x'_i>`.
    pub length_limit: Option<T>,
    /// Exact `<x'_i, x'_i>`.
    pub finite_n_len: T,
    /// Exact `<x'_i, x'_j>`, `i != j`.
    pub finite_n_inner: T,
    /// Exact `<y'_i, y'_j>`.
    pub finite_n_cos: T,
    /// `ln Z` with `Z = e^beta + (n-1) e^{rho beta}`.
    pub log_z: T,
    /// `Z` itself; infinite if it overflows, see `log_z`.
    pub finite_n_z: T,
}

/// Exact `<x'_i, x'_i>` and `<x'_i, x'_j>` for one layer on the simplex.
///
/// With `e = e^beta / Z`, `r = e^{rho beta} / Z` and `s = alpha sqrt(q)`:
///
/// ```text
/// <x'_i,x'_i> = s^2 + 2 s (e + (n-1) r rho) + e^2 + 2(n-1) rho e r + (n-1)(1 + (n-2) rho) r^2
/// <x'_i,x'_j> = s^2 rho + 2 s (e rho + r (1 + (n-2) rho)) + rho e^2
///               + 2 (1 + (n-2) rho) e r + ((n-2) + (n^2 - 3n + 3) rho) r^2
/// ```
pub fn simplex_finite_n<T: Scalar>(
    rho: T,
    q: T,
    alpha: T,
    beta: T,
    n: usize,
) -> Result<SimplexPrediction<T>> {
    check_simplex_args(rho, q, alpha)?;
    if n < 2 {
        return Err(AttnError::TooFewTokens { n });
    }
    if !(beta >= T::zero()) || !beta.is_finite() {
        return Err(invalid(format!("beta must be finite and >= 0, got {beta}")));
    }
    let one = T::one();
    let two = T::lit(2.0);
    let nf = T::from_usize_lossy(n);
    let log_z = simplex_log_z(n, rho, beta);
    let e = (beta - log_z).exp();
    let r = (beta * rho - log_z).exp();
    let s = alpha * q.sqrt();
    let k = one + (nf - two) * rho;

    let len = s * s
        + two * s * (e + (nf - one) * r * rho)
        + e * e
        + two * (nf - one) * rho * e * r
        + (nf - one) * k * r * r;
    let inner = s * s * rho
        + two * s * (e * rho + r * k)
        + rho * e * e
        + two * k * e * r
        + ((nf - two) + (nf * nf - T::lit(3.0) * nf + T::lit(3.0)) * rho) * r * r;

    let gamma = beta / nf.ln();
    let (cos_limit, length_limit) = if beta > T::zero() {
        (
            Some(simplex_cos_limit(rho, q, alpha, gamma)?),
            Some(simplex_length_limit(rho, q, alpha, gamma)?),
        )
    } else {
        (None, None)
    };
    Ok(SimplexPrediction {
        n,
        beta,
        gamma,
        regime: simplex_regime(rho, gamma),
        cos_limit,
        length_limit,
        finite_n_len: len,
        finite_n_inner: inner,
        finite_n_cos: inner / len,
        log_z,
        finite_n_z: log_z.exp(),
    })
}

/// Large-n limit of `eta = |J|_F^2 / (nd)` on the simplex, `alpha = 0`:
/// 0, `(1 - 1/d) / (4q)` or `(1 - 1/d) / q`.
pub fn simplex_eta_limit<T: Scalar>(rho: T, q: T, d: usize, gamma: T) -> Result<T> {
    check_simplex_args(rho, q, T::zero())?;
    check_gamma(gamma)?;
    if d == 0 {
        return Err(invalid("d must be positive"));
    }
    let tail = T::one() - T::one() / T::from_usize_lossy(d);
    Ok(match simplex_regime(rho, gamma) {
        Regime::Subcritical => T::zero(),
        Regime::Critical => tail / (T::lit(4.0) * q),
        _ => tail / q,
    })
}

/// Upper bound on `eta` in the subcritical regime of the almost-simplex
/// case: `4 gamma^2 (ln n)^2 / (q1 d)`. It is a bound, not a limit.
pub fn subcritical_eta_bound<T: Scalar>(gamma: T, n: usize, q1: T, d: usize) -> T {
    let ln_n = T::from_usize_lossy(n).ln();
    T::lit(4.0) * gamma * gamma * ln_n * ln_n / (q1 * T::from_usize_lossy(d))
}

/// Closed-form simplex sums of the three pieces of the squared Jacobian,
/// each divided by the matching power of `Z` (`Z^2`, `Z^3`, `Z^4`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosedFormSums<T> {
    pub r1r1: T,
    pub r1r2: T,
    pub r2r2: T,
    /// `r1r1 + 2 r1r2 + r2r2`.
    pub rr: T,
    /// The same total with the cross term counted once, as it is sometimes
    /// written. Kept only to report the difference.
    pub rr_single_cross: T,
    pub urv: T,
    pub uu: T,
    pub log_z: T,
}

/// Evaluates the closed forms in ratio space (`e = e^beta/Z`,
/// `r = e^{beta rho}/Z`), so large `beta` cannot overflow.
pub fn simplex_gradient_sums<T: Scalar>(n: usize, d: usize, rho: T, beta: T) -> ClosedFormSums<T> {
    let one = T::one();
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let nf = T::from_usize_lossy(n);
    let df = T::from_usize_lossy(d);
    let log_z = simplex_log_z(n, rho, beta);
    let e = (beta - log_z).exp();
    let r = (beta * rho - log_z).exp();
    let em = e - r;
    let b2 = beta * beta;
    let om = one - rho;
    let om2 = one - rho * rho;
    let pairs = nf * (nf - one);
    let k = nf * rho + om;

    let r1r1 = b2
        * r
        * r
        * nf
        * (nf * nf * rho * rho * om + nf * om * (one + rho - three * rho * rho)
            - (one + two * rho) * om * om);
    let r1r2 = beta * e * r * pairs * om2;
    let r2r2 = e * e * (df - one) * nf + r * r * (b2 * om2 + df - one) * pairs;
    let urv = rho * b2 * r * r * em * pairs * k * om
        + b2 * r * r * r * pairs * k * k * om
        + beta * r * r * e * pairs * k * om
        + beta * r * r * em * (beta * rho + one) * pairs * om2
        + beta * r * r * r * pairs * k * (beta * om2 + om);
    let uu =
        b2 * r * r * pairs * (nf * rho + two) * om * (em * em + two * r * em * k + r * r * nf * k);
    ClosedFormSums {
        r1r1,
        r1r2,
        r2r2,
        rr: r1r1 + two * r1r2 + r2r2,
        rr_single_cross: r1r1 + r1r2 + r2r2,
        urv,
        uu,
        log_z,
    }
}

/// Exact finite-n `eta` on the simplex (`alpha = 0`) from the closed-form
/// sums: `(rr - 2 urv + uu) / (q n d)`.
pub fn simplex_eta_finite_n<T: Scalar>(rho: T, q: T, d: usize, beta: T, n: usize) -> T {
    let s = simplex_gradient_sums(n, d, rho, beta);
    (s.rr - T::lit(2.0) * s.urv + s.uu) / (q * T::from_usize_lossy(n * d))
}

/// Two-threshold classification for configurations with cosines in
/// `[rho1, rho2]`. The gap between the thresholds is left indeterminate.
pub fn classify_two_phase<T: Scalar>(
    summary: &GeometrySummary<T>,
    gamma: T,
) -> Result<RegimeVerdict<T>> {
    if !(summary.rho1 > T::zero()) {
        return Err(invalid(format!(
            "rho1 = {} must be positive for the two-phase classification",
            summary.rho1
        )));
    }
    if !(summary.rho2 < T::one()) {
        return Err(invalid(format!("rho2 = {} must be below 1", summary.rho2)));
    }
    let lower = simplex_threshold(summary.rho1);
    let upper = simplex_threshold(summary.rho2);
    let tol = T::lit(1e-12);
    let regime = if (summary.rho2 - summary.rho1).abs() <= tol && (gamma - lower).abs() <= tol {
        Regime::Critical
    } else if gamma < lower {
        Regime::Subcritical
    } else if gamma > upper {
        Regime::Supercritical
    } else {
        Regime::Indeterminate
    };
    Ok(RegimeVerdict {
        regime,
        gamma,
        thresholds: vec![
            Threshold {
                name: "1/(1-rho1)",
                value: lower,
            },
            Threshold {
                name: "1/(1-rho2)",
                value: upper,
            },
        ],
    })
}

/// The four boundaries of the clustered setting.
pub fn three_phase_thresholds<T: Scalar>(spec: &ThreePhaseSpec<T>) -> [Threshold<T>; 4] {
    let one = T::one();
    [
        Threshold {
            name: "min{1/(1-rho1), (1-tau)/(rho4-rho1)}",
            value: (one / (one - spec.rho1)).min((one - spec.tau) / (spec.rho4 - spec.rho1)),
        },
        Threshold {
            name: "(1-tau)/(rho3-rho2)",
            value: (one - spec.tau) / (spec.rho3 - spec.rho2),
        },
        Threshold {
            name: "tau/(1-rho3)",
            value: spec.tau / (one - spec.rho3),
        },
        Threshold {
            name: "max{1/(1-rho2), tau/(1-rho4)}",
            value: (one / (one - spec.rho2)).max(spec.tau / (one - spec.rho4)),
        },
    ]
}

/// Bulk-dominated below the first boundary, cluster-dominated strictly
/// between the middle two, self-dominated above the last.
pub fn classify_three_phase<T: Scalar>(
    spec: &ThreePhaseSpec<T>,
    gamma: T,
) -> Result<RegimeVerdict<T>> {
    spec.check()?;
    let th = three_phase_thresholds(spec);
    let regime = if gamma < th[0].value {
        Regime::Subcritical
    } else if gamma > th[3].value {
        Regime::Supercritical
    } else if gamma > th[1].value && gamma < th[2].value {
        Regime::Middle
    } else {
        Regime::Indeterminate
    };
    Ok(RegimeVerdict {
        regime,
        gamma,
        thresholds: th.to_vec(),
    })
}

/// Which part of `Z_i` carries its mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DominantTerm {
    /// `e^beta`.
    SelfTerm,
    /// Sum over the neighbourhood `K_i`.
    Cluster,
    /// Sum over everything else.
    Bulk,
    /// Self term and bulk tie (simplex at the critical point).
    SelfAndBulk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PartitionCase<T> {
    Simplex { rho: T },
    ThreePhase(ThreePhaseSpec<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartitionPrediction<T> {
    pub regime: Regime,
    pub dominant: DominantTerm,
    /// `Z` divided by the dominant expression tends to this value.
    pub prefactor: T,
    /// `ln` of the leading-order `Z` where it has a closed form (simplex).
    pub leading_log_z: Option<T>,
}

/// Leading-order description of the partition value.
///
/// Simplex: `n e^{rho beta}` below the boundary, `2 e^beta` on it and
/// `e^beta` above it.
pub fn z_partition_prediction<T: Scalar>(
    case: &PartitionCase<T>,
    n: usize,
    gamma: T,
) -> Result<PartitionPrediction<T>> {
    check_gamma(gamma)?;
    if n < 2 {
        return Err(AttnError::TooFewTokens { n });
    }
    let beta = gamma * T::from_usize_lossy(n).ln();
    match case {
        PartitionCase::Simplex { rho } => {
            let rho = *rho;
            check_simplex_args(rho, T::one(), T::zero())?;
            let regime = simplex_regime(rho, gamma);
            let (dominant, prefactor, log_z) = match regime {
                Regime::Subcritical => (
                    DominantTerm::Bulk,
                    T::one(),
                    T::from_usize_lossy(n).ln() + rho * beta,
                ),
                Regime::Critical => (
                    DominantTerm::SelfAndBulk,
                    T::lit(2.0),
                    T::lit(2.0).ln() + beta,
                ),
                _ => (DominantTerm::SelfTerm, T::one(), beta),
            };
            Ok(PartitionPrediction {
                regime,
                dominant,
                prefactor,
                leading_log_z: Some(log_z),
            })
        }
        PartitionCase::ThreePhase(spec) => {
            let verdict = classify_three_phase(spec, gamma)?;
            let dominant = match verdict.regime {
                Regime::Subcritical => DominantTerm::Bulk,
                Regime::Middle => DominantTerm::Cluster,
                Regime::Supercritical => DominantTerm::SelfTerm,
                other => {
                    return Err(invalid(format!(
                        "gamma = {gamma} is {other}: no dominant term is predicted there"
                    )))
                }
            };
            Ok(PartitionPrediction {
                regime: verdict.regime,
                dominant,
                prefactor: T::one(),
                leading_log_z: None,
            })
        }
    }
}

/// Per-token split of the softmax mass into self, neighbourhood `K_i`
/// (cosines in `[rho3, rho4]`) and the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMasses<T> {
    pub self_mass: Array1<T>,
    pub cluster_mass: Array1<T>,
    pub bulk_mass: Array1<T>,
}

pub fn partition_masses<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    rho3: T,
    rho4: T,
) -> Result<PartitionMasses<T>> {
    let a = attention_weights(cfg, params)?.weights;
    let clusters = cluster_sets(&cfg.gram(), rho3, rho4);
    let n = cfg.n();
    let mut self_mass = Array1::zeros(n);
    let mut cluster_mass = Array1::zeros(n);
    let mut bulk_mass = Array1::zeros(n);
    for i in 0..n {
        let s = a[[i, i]];
        let c: T = clusters[i].iter().map(|&m| a[[i, m]]).sum();
        self_mass[i] = s;
        cluster_mass[i] = c;
        bulk_mass[i] = (T::one() - s - c).max(T::zero());
    }
    Ok(PartitionMasses {
        self_mass,
        cluster_mass,
        bulk_mass,
    })
}

/// `sum_{m in K_i} A_im y_m / sum_{m in K_i} A_im`, the attention output
/// restricted to each token's neighbourhood. Rows with empty `K_i` are zero.
pub fn cluster_restricted_attention<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    rho3: T,
    rho4: T,
) -> Result<Array2<T>> {
    let a = attention_weights(cfg, params)?.weights;
    let clusters = cluster_sets(&cfg.gram(), rho3, rho4);
    let mut out = Array2::zeros(cfg.y().dim());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let mass: T = clusters[i].iter().map(|&m| a[[i, m]]).sum();
        if mass > T::zero() {
            for &m in &clusters[i] {
                row.scaled_add(a[[i, m]] / mass, &cfg.y().row(m));
            }
        }
    }
    Ok(out)
}
