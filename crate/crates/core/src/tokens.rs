//! Token configurations: exact simplices, Gaussian factor samples, and
//! clustered three-phase layouts, plus their geometry summaries.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{invalid, AttnError, Result};
use crate::scalar::Scalar;

/// `n` tokens in `R^d`, stored together with their norms and directions.
///
/// Immutable after construction; `y` is always derived from `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenConfig<T> {
    x: Array2<T>,
    norms: Array1<T>,
    y: Array2<T>,
}

impl<T: Scalar> TokenConfig<T> {
    /// Builds a configuration from an `n x d` matrix whose rows are tokens.
    pub fn from_rows(x: Array2<T>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(AttnError::Shape(format!(
                "token matrix must be non-empty, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        let mut norms = Array1::zeros(x.nrows());
        let mut y = x.clone();
        for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(AttnError::ZeroNorm { index: i });
            }
            norms[i] = norm;
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self { x, norms, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &Array2<T> {
        &self.x
    }

    pub fn norms(&self) -> &Array1<T> {
        &self.norms
    }

    /// Unit directions `y_i = x_i / |x_i|`.
    pub fn y(&self) -> &Array2<T> {
        &self.y
    }

    /// Gram matrix of the directions, `G_ij = <y_i, y_j>`.
    pub fn gram(&self) -> Array2<T> {
        self.y.dot(&self.y.t())
    }

    pub fn into_rows(self) -> Array2<T> {
        self.x
    }

    /// Applies `x_i -> R x_i` to every token, i.e. `X R^T`.
    pub fn rotated(&self, rotation: &Array2<T>) -> Result<Self> {
        if rotation.nrows() != self.d() || rotation.ncols() != self.d() {
            return Err(AttnError::Shape(format!(
                "rotation must be {0}x{0}",
                self.d()
            )));
        }
        Self::from_rows(self.x.dot(&rotation.t()))
    }

    /// Reorders tokens so that token `k` of the result is token `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(AttnError::Shape("permutation length differs from n".into()));
        }
        Self::from_rows(self.x.select(Axis(0), perm))
    }
}

/// Exact simplex: equal squared norms `q` and equal pairwise cosines `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimplexSpec<T> {
    pub n: usize,
    pub d: usize,
    pub q: T,
    pub rho: T,
}

/// `x_i = sqrt(rho) z_0 + sqrt(1 - rho) z_i` with i.i.d. standard normal `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianFactorSpec<T> {
    pub n: usize,
    pub d: usize,
    pub rho: T,
    pub seed: u64,
}

/// Extremes of squared norms and off-diagonal cosines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometrySummary<T> {
    pub q1: T,
    pub q2: T,
    pub rho1: T,
    pub rho2: T,
    /// Pair attaining `rho1`.
    pub argmin_pair: (usize, usize),
    pub all_pairs_positive: bool,
}

/// Parameters of the clustered configuration with a sublinear neighbourhood
/// `K_i` of size about `n^tau` per token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThreePhaseSpec<T> {
    pub n: usize,
    pub tau: T,
    pub rho1: T,
    pub rho2: T,
    pub rho3: T,
    pub rho4: T,
    pub kappa3: T,
    pub kappa4: T,
}

impl<T: Scalar> ThreePhaseSpec<T> {
    /// `(1 - tau)(1 - rho2) + rho2 < rho3`, which guarantees a non-empty
    /// middle regime.
    pub fn technical_condition(&self) -> bool {
        (T::one() - self.tau) * (T::one() - self.rho2) + self.rho2 < self.rho3
    }

    /// Allowed range of `|K_i|`, i.e. `[kappa3 n^tau, kappa4 n^tau]`.
    pub fn cluster_bounds(&self) -> (T, T) {
        let scale = T::from_usize_lossy(self.n).powf(self.tau);
        (self.kappa3 * scale, self.kappa4 * scale)
    }

    pub fn check(&self) -> Result<()> {
        let (zero, one) = (T::zero(), T::one());
        if self.n < 2 {
            return Err(AttnError::TooFewTokens { n: self.n });
        }
        if !(self.tau > zero && self.tau <= one) {
            return Err(AttnError::InfeasibleSpec(format!(
                "tau = {} outside (0, 1]",
                self.tau
            )));
        }
        let ordered = zero < self.rho1
            && self.rho1 <= self.rho2
            && self.rho2 < self.rho3
            && self.rho3 <= self.rho4
            && self.rho4 < one;
        if !ordered {
            return Err(AttnError::InfeasibleSpec(format!(
                "need 0 < rho1 <= rho2 < rho3 <= rho4 < 1, got ({}, {}, {}, {})",
                self.rho1, self.rho2, self.rho3, self.rho4
            )));
        }
        if !(self.kappa3 > zero && self.kappa3 <= self.kappa4) {
            return Err(AttnError::InfeasibleSpec(format!(
                "need 0 < kappa3 <= kappa4, got ({}, {})",
                self.kappa3, self.kappa4
            )));
        }
        if !self.technical_condition() {
            return Err(AttnError::InfeasibleSpec(format!(
                "(1 - tau)(1 - rho2) + rho2 = {} is not below rho3 = {}",
                (one - self.tau) * (one - self.rho2) + self.rho2,
                self.rho3
            )));
        }
        Ok(())
    }
}

/// Verdict of [`validate_three_phase`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThreePhaseReport {
    pub valid: bool,
    pub cluster_sizes: Vec<usize>,
    pub violation_count: usize,
    /// First ten violations, human readable.
    pub violations: Vec<String>,
}

const MAX_REPORTED_VIOLATIONS: usize = 10;

/// Regular simplex with `|x_i|^2 = q` and `<y_i, y_j> = rho`.
///
/// Uses `y_i = sqrt(rho) e_0 + sqrt(1 - rho) e_i` with orthonormal `e`, so
/// the geometry is exact up to rounding of two square roots.
pub fn make_simplex<T: Scalar>(spec: &SimplexSpec<T>) -> Result<TokenConfig<T>> {
    if spec.n == 0 {
        return Err(invalid("simplex needs n >= 1"));
    }
    if spec.d < spec.n + 1 {
        return Err(AttnError::DimensionTooSmall {
            need: spec.n + 1,
            got: spec.d,
        });
    }
    if !(spec.q > T::zero()) {
        return Err(invalid(format!("q must be positive, got {}", spec.q)));
    }
    if !(spec.rho > T::zero() && spec.rho < T::one()) {
        return Err(invalid(format!("rho must lie in (0, 1), got {}", spec.rho)));
    }
    let scale = spec.q.sqrt();
    let shared = spec.rho.sqrt() * scale;
    let own = (T::one() - spec.rho).sqrt() * scale;
    let mut x = Array2::zeros((spec.n, spec.d));
    for i in 0..spec.n {
        x[[i, 0]] = shared;
        x[[i, i + 1]] = own;
    }
    TokenConfig::from_rows(x)
}

/// Draws from the Gaussian factor model. Bit-reproducible for a fixed seed.
pub fn sample_gaussian_factor<T: Scalar>(spec: &GaussianFactorSpec<T>) -> Result<TokenConfig<T>> {
    if spec.n == 0 || spec.d == 0 {
        return Err(invalid("gaussian factor model needs n >= 1 and d >= 1"));
    }
    if !(spec.rho >= T::zero() && spec.rho <= T::one()) {
        return Err(invalid(format!("rho must lie in [0, 1], got {}", spec.rho)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |len: usize| -> Vec<T> {
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z)
            })
            .collect()
    };
    let common = draw(spec.d);
    // N(0, I/d) so that E|x_i|^2 = 1 and E<x_i, x_j> = rho.
    let unit = T::one() / T::from_usize_lossy(spec.d).sqrt();
    let a = spec.rho.sqrt() * unit;
    let b = (T::one() - spec.rho).sqrt() * unit;
    let mut x = Array2::zeros((spec.n, spec.d));
    for mut row in x.axis_iter_mut(Axis(0)) {
        let own = draw(spec.d);
        for (k, v) in row.iter_mut().enumerate() {
            *v = a * common[k] + b * own[k];
        }
    }
    TokenConfig::from_rows(x)
}

/// Exact extremes over all tokens and all pairs `i != j`. `O(n^2 d)`.
pub fn summarize_geometry<T: Scalar>(cfg: &TokenConfig<T>) -> Result<GeometrySummary<T>> {
    summarize_with_gram(cfg, &cfg.gram())
}

pub(crate) fn summarize_with_gram<T: Scalar>(
    cfg: &TokenConfig<T>,
    gram: &Array2<T>,
) -> Result<GeometrySummary<T>> {
    let n = cfg.n();
    if n < 2 {
        return Err(AttnError::TooFewTokens { n });
    }
    let mut q1 = T::infinity();
    let mut q2 = T::neg_infinity();
    for &norm in cfg.norms() {
        let q = norm * norm;
        q1 = q1.min(q);
        q2 = q2.max(q);
    }
    let mut rho1 = T::infinity();
    let mut rho2 = T::neg_infinity();
    let mut argmin_pair = (0, 1);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = gram[[i, j]];
            if c < rho1 {
                rho1 = c;
                argmin_pair = (i, j);
            }
            rho2 = rho2.max(c);
        }
    }
    Ok(GeometrySummary {
        q1,
        q2,
        rho1,
        rho2,
        argmin_pair,
        all_pairs_positive: rho1 > T::zero(),
    })
}

/// Group sizes for `n` tokens such that every `|K_i| = size - 1` falls in
/// the requested cluster window. Aims for the middle of the window.
fn three_phase_groups<T: Scalar>(spec: &ThreePhaseSpec<T>) -> Result<Vec<usize>> {
    let n = spec.n;
    let (lo, hi) = spec.cluster_bounds();
    let target = (lo + hi) / T::lit(2.0) + T::one();
    let guess = (T::from_usize_lossy(n) / target)
        .round()
        .to_usize()
        .unwrap_or(1)
        .clamp(1, n);
    let fits = |g: usize| {
        let small = n / g;
        let large = small + usize::from(!n.is_multiple_of(g));
        let ok = |s: usize| {
            let k = T::from_usize_lossy(s.saturating_sub(1));
            s >= 1 && k >= lo && k <= hi
        };
        ok(small) && ok(large)
    };
    for delta in 0..n {
        for g in [guess.saturating_add(delta), guess.saturating_sub(delta)] {
            if (1..=n).contains(&g) && fits(g) {
                let small = n / g;
                let extra = n % g;
                return Ok((0..g).map(|k| small + usize::from(k < extra)).collect());
            }
        }
    }
    Err(AttnError::InfeasibleSpec(format!(
        "no partition of n = {n} into groups with |K_i| in [{lo}, {hi}]"
    )))
}

/// Clustered configuration satisfying the three-phase assumption.
///
/// Tokens are split into groups of size about `n^tau`. Each token is
/// `sqrt(w) c_g + sqrt(1 - w) e_i` where `w = (rho3 + rho4) / 2`, the `e_i`
/// are orthonormal and the group centres `c_g` form a simplex with cosine
/// `((rho1 + rho2) / 2) / w`. Within-group cosines are therefore `w` and
/// cross-group cosines `(rho1 + rho2) / 2`. Needs `d >= n + g + 1` when
/// there is more than one group and `d >= n + 1` otherwise. The seed only
/// shuffles which tokens land in which group.
pub fn make_three_phase<T: Scalar>(
    spec: &ThreePhaseSpec<T>,
    d: usize,
    seed: u64,
) -> Result<TokenConfig<T>> {
    spec.check()?;
    let sizes = three_phase_groups(spec)?;
    let groups = sizes.len();
    let n = spec.n;
    let need = if groups > 1 { n + groups + 1 } else { n + 1 };
    if d < need {
        return Err(AttnError::InfeasibleSpec(format!(
            "dimension d = {d} too small for {groups} groups of {n} tokens (need {need})"
        )));
    }
    let two = T::lit(2.0);
    let within = (spec.rho3 + spec.rho4) / two;
    let across = (spec.rho1 + spec.rho2) / two;
    let centre_cos = across / within;

    let mut membership: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &s)| std::iter::repeat_n(g, s))
        .collect();
    membership.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let a = within.sqrt();
    let b = (T::one() - within).sqrt();
    let (c0, c1) = (centre_cos.sqrt(), (T::one() - centre_cos).sqrt());
    let token_offset = if groups > 1 { groups + 1 } else { 1 };
    let mut x = Array2::zeros((n, d));
    for (i, &g) in membership.iter().enumerate() {
        if groups > 1 {
            x[[i, 0]] = a * c0;
            x[[i, 1 + g]] = a * c1;
        } else {
            x[[i, 0]] = a;
        }
        x[[i, token_offset + i]] = b;
    }
    TokenConfig::from_rows(x)
}

/// Neighbourhoods `K_i = { m != i : <y_m, y_i> in [rho3, rho4] }`.
pub fn cluster_sets<T: Scalar>(gram: &Array2<T>, rho3: T, rho4: T) -> Vec<Vec<usize>> {
    let tol = T::lit(1e-10);
    (0..gram.nrows())
        .map(|i| {
            (0..gram.ncols())
                .filter(|&m| m != i && gram[[i, m]] >= rho3 - tol && gram[[i, m]] <= rho4 + tol)
                .collect()
        })
        .collect()
}

/// Recounts every `K_i` from the Gram matrix and checks all four conditions
/// of the three-phase assumption.
pub fn validate_three_phase<T: Scalar>(
    cfg: &TokenConfig<T>,
    spec: &ThreePhaseSpec<T>,
) -> ThreePhaseReport {
    let mut violations = Vec::new();
    let mut count = 0usize;
    let mut push = |msg: String| {
        if violations.len() < MAX_REPORTED_VIOLATIONS {
            violations.push(msg);
        }
        count += 1;
    };
    if let Err(e) = spec.check() {
        push(format!("spec: {e}"));
    }
    if cfg.n() != spec.n {
        push(format!(
            "config has n = {}, parameters have n = {}",
            cfg.n(),
            spec.n
        ));
    }
    let gram = cfg.gram();
    let clusters = cluster_sets(&gram, spec.rho3, spec.rho4);
    let (lo, hi) = spec.cluster_bounds();
    let tol = T::lit(1e-10);
    for (i, k_i) in clusters.iter().enumerate() {
        let size = T::from_usize_lossy(k_i.len());
        if size < lo || size > hi {
            push(format!(
                "token {i}: |K_i| = {} outside [{lo}, {hi}]",
                k_i.len()
            ));
        }
        let mut in_cluster = vec![false; cfg.n()];
        for &m in k_i {
            in_cluster[m] = true;
        }
        for (m, &member) in in_cluster.iter().enumerate() {
            if m == i || member {
                continue;
            }
            let c = gram[[i, m]];
            if c < spec.rho1 - tol || c > spec.rho2 + tol {
                push(format!(
                    "pair ({i}, {m}): cosine {c} outside [{}, {}]",
                    spec.rho1, spec.rho2
                ));
            }
        }
    }
    ThreePhaseReport {
        valid: count == 0,
        cluster_sizes: clusters.iter().map(Vec::len).collect(),
        violation_count: count,
        violations,
    }
}

/// Writes the plain token CSV: a `# n=<n> d=<d>` header, then one row per
/// token with `d` comma-separated decimals.
pub fn write_tokens_csv<T: Scalar, W: Write>(cfg: &TokenConfig<T>, mut out: W) -> Result<()> {
    write_matrix_csv(cfg.x(), &mut out)
}

pub(crate) fn write_matrix_csv<T: Scalar, W: Write>(x: &Array2<T>, out: &mut W) -> Result<()> {
    writeln!(out, "# n={} d={}", x.nrows(), x.ncols())?;
    let mut line = String::new();
    for row in x.axis_iter(Axis(0)) {
        line.clear();
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parses the token CSV written by [`write_tokens_csv`].
pub fn read_tokens_csv<T: Scalar, R: BufRead>(input: R) -> Result<TokenConfig<T>> {
    let mut lines = input.lines();
    let header = loop {
        match lines.next() {
            Some(line) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(AttnError::Parse("empty token file".into())),
        }
    };
    let (n, d) = parse_header(&header)?;
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                AttnError::Parse(format!("line {}: bad number {field:?}", lineno + 2))
            })?;
            data.push(T::lit(v));
        }
        if data.len() - before != d {
            return Err(AttnError::Parse(format!(
                "line {}: expected {d} columns, found {}",
                lineno + 2,
                data.len() - before
            )));
        }
        rows += 1;
    }
    if rows != n {
        return Err(AttnError::Parse(format!(
            "header declares n = {n} but {rows} rows follow"
        )));
    }
    let x = Array2::from_shape_vec((n, d), data)
        .map_err(|e| AttnError::Parse(format!("shape: {e}")))?;
    TokenConfig::from_rows(x)
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let body = header
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| AttnError::Parse(format!("missing '# n=<n> d=<d>' header: {header:?}")))?;
    let mut n = None;
    let mut d = None;
    for part in body.split_whitespace() {
        if let Some(v) = part.strip_prefix("n=") {
            n = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("d=") {
            d = v.parse().ok();
        }
    }
    match (n, d) {
        (Some(n), Some(d)) if n > 0 && d > 0 => Ok((n, d)),
        _ => Err(AttnError::Parse(format!("malformed header {header:?}"))),
    }
}
