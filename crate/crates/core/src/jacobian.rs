//! Jacobian of the attention layer `X -> ATT(N(X))` (plus optional `alpha I`).
//!
//! Block `(i, j)` is the `d x d` matrix `B[u][v] = d(x'_j)_v / d(x_i)_u`.
//! With `P_i = I - y_i y_i^T`, `m_j = ATT(y_j)` and `C_i = sum_m A_im y_m y_m^T - m_i m_i^T`,
//! the chain rule gives
//!
//! ```text
//! B_ij = (A_ji / |x_i|) P_i [I + beta y_j (y_i - m_j)^T]      (i != j)
//! B_ii = (1 / |x_i|)    P_i (beta C_i + A_ii I)
//! ```
//!
//! Note the overall factor is `1/|x_i|`, the scale of the normalisation
//! Jacobian `(I - y y^T)/|x|`. Finite differences confirm this.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{softmax_from_gram, AttentionParams};
use crate::error::{invalid, AttnError, Result};
use crate::scalar::Scalar;
use crate::tokens::TokenConfig;

/// Work caps for the expensive routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Largest `n^2 d^2` accepted by the exact Frobenius routes.
    pub max_n2d2: usize,
    /// Largest `nd` for which a dense `nd x nd` Jacobian is formed.
    pub max_dense_dim: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_n2d2: 1 << 42,
            max_dense_dim: 4096,
        }
    }
}

impl Budget {
    fn check_n2d2(&self, n: usize, d: usize) -> Result<()> {
        let requested = n.saturating_mul(n).saturating_mul(d).saturating_mul(d);
        if requested > self.max_n2d2 {
            return Err(AttnError::BudgetExceeded {
                what: "n^2 d^2 block work",
                requested,
                cap: self.max_n2d2,
            });
        }
        Ok(())
    }

    fn check_dense(&self, dim: usize) -> Result<()> {
        if dim > self.max_dense_dim {
            return Err(AttnError::BudgetExceeded {
                what: "dense Jacobian dimension nd",
                requested: dim,
                cap: self.max_dense_dim,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock<T> {
    pub i: usize,
    pub j: usize,
    /// `matrix[[u, v]] = d(x'_j)_v / d(x_i)_u`.
    pub matrix: Array2<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HutchinsonEstimate<T> {
    pub probes: usize,
    /// Sample mean of `|J v|^2`, an unbiased estimate of `|J|_F^2`.
    pub frobenius_sq: T,
    /// Standard error of that mean; `None` for a single probe.
    pub frobenius_sq_se: Option<T>,
    pub eta: T,
    pub eta_se: Option<T>,
}

/// Frobenius-norm summary of one layer Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JacobianReport<T> {
    pub n: usize,
    pub d: usize,
    pub beta: T,
    pub alpha: T,
    /// Whether the `alpha I` residual term is part of the measured map.
    pub alpha_included: bool,
    /// `|J|_F^2 / (nd)`.
    pub eta_exact: Option<T>,
    pub frobenius_sq: Option<T>,
    /// Contribution of the diagonal blocks `B_ii` to `|J|_F^2`.
    pub diagonal_sq: Option<T>,
    /// Contribution of the blocks with `i != j`.
    pub off_diagonal_sq: Option<T>,
    pub eta_hutchinson: Option<HutchinsonEstimate<T>>,
}

impl<T: Scalar> JacobianReport<T> {
    fn empty(n: usize, d: usize, beta: T, alpha: T, alpha_included: bool) -> Self {
        Self {
            n,
            d,
            beta,
            alpha,
            alpha_included,
            eta_exact: None,
            frobenius_sq: None,
            diagonal_sq: None,
            off_diagonal_sq: None,
            eta_hutchinson: None,
        }
    }
}

fn outer<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (mut row, &au) in out.axis_iter_mut(Axis(0)).zip(a.iter()) {
        row.assign(&b);
        row *= au;
    }
    out
}

fn add_identity<T: Scalar>(m: &mut Array2<T>, scale: T) {
    m.diag_mut().mapv_inplace(|v| v + scale);
}

fn frob_sq<T: Scalar>(m: &Array2<T>) -> T {
    m.iter().map(|&v| v * v).sum()
}

/// Everything one layer's Jacobian needs, computed once: directions,
/// inverse norms, Gram matrix, softmax weights and `M = A Y`.
#[derive(Debug, Clone)]
pub struct LayerJacobian<T> {
    n: usize,
    d: usize,
    beta: T,
    alpha: T,
    y: Array2<T>,
    inv_norm: Array1<T>,
    gram: Array2<T>,
    a: Array2<T>,
    m: Array2<T>,
}

impl<T: Scalar> LayerJacobian<T> {
    pub fn new(cfg: &TokenConfig<T>, params: &AttentionParams<T>) -> Result<Self> {
        params.check()?;
        let gram = cfg.gram();
        let beta = params.beta(cfg.n());
        let a = softmax_from_gram(&gram, beta).weights;
        let m = a.dot(cfg.y());
        Ok(Self {
            n: cfg.n(),
            d: cfg.d(),
            beta,
            alpha: params.alpha,
            y: cfg.y().clone(),
            inv_norm: cfg.norms().mapv(|v| T::one() / v),
            gram,
            a,
            m,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn weights(&self) -> &Array2<T> {
        &self.a
    }

    /// Attention block `(i, j)`, assembled term by term:
    ///
    /// * `R1 = delta_ij beta (W_j - y_i (W_j y_i)^T)`
    /// * `R2 = A_ji ((beta P_i y_j - y_i) y_i^T + I)`
    /// * `U1 = delta_ij beta P_i m_j`, `U2 = beta A_ji P_i y_j`
    /// * `B_ij = (R1 + R2 - (U1 + U2) m_j^T) / |x_i|`
    ///
    /// where `W_j = sum_m A_jm y_m y_m^T`. All weights are softmax ratios,
    /// so nothing overflows at large `beta`.
    pub fn block(&self, i: usize, j: usize) -> Array2<T> {
        let beta = self.beta;
        let yi = self.y.row(i);
        let yj = self.y.row(j);
        let mj = self.m.row(j);
        let a_ji = self.a[[j, i]];

        let p_yj = &yj - &(&yi * self.gram[[i, j]]);
        let lead = &p_yj * beta - yi;
        let mut r = outer(lead.view(), yi) * a_ji;
        add_identity(&mut r, a_ji);
        let mut u = p_yj * (beta * a_ji);

        if i == j {
            let w = self.weighted_second_moment(j);
            let wy = w.dot(&yi);
            r = r + (w - outer(yi, wy.view())) * beta;
            let p_mj = &mj - &(&yi * mj.dot(&yi));
            u = u + p_mj * beta;
        }
        r = r - outer(u.view(), mj);
        r * self.inv_norm[i]
    }

    /// `W_j / Z_j = Y^T diag(A_j.) Y`.
    fn weighted_second_moment(&self, j: usize) -> Array2<T> {
        let mut scaled = self.y.clone();
        for (mut row, &w) in scaled.axis_iter_mut(Axis(0)).zip(self.a.row(j).iter()) {
            row *= w;
        }
        scaled.t().dot(&self.y)
    }

    /// Block of the full update including `alpha I` on the diagonal.
    pub fn block_with_residual(&self, i: usize, j: usize) -> Array2<T> {
        let mut b = self.block(i, j);
        if i == j && self.alpha != T::zero() {
            add_identity(&mut b, self.alpha);
        }
        b
    }

    /// `|J|_F^2` split into (diagonal blocks, off-diagonal blocks), attention
    /// part only, from Gram-matrix identities in `O(n^3 + n^2 d)`.
    ///
    /// With `H = A G` (so `H_ji = <m_j, y_i>`):
    ///
    /// ```text
    /// |B_ij|^2 = (A_ji/|x_i|)^2 [ (d-1) + 2 beta (G_ij H_ji - H_jj)
    ///            + beta^2 (1 - G_ij^2)(1 - 2 H_ji + |m_j|^2) ]
    /// |B_ii|^2 = |x_i|^-2 [ beta^2 (|C|^2 - |C y|^2) + 2 beta a (tr C - y'Cy) + a^2 (d-1) ]
    /// ```
    pub fn frobenius_sq_parts(&self) -> (T, T) {
        let (n, d) = (self.n, self.d);
        let beta = self.beta;
        let one = T::one();
        let two = T::lit(2.0);
        let dm1 = T::from_usize_lossy(d) - one;
        let g = &self.gram;
        let a = &self.a;
        let h = a.dot(g);
        let msq: Array1<T> = (a * &h).sum_axis(Axis(1));
        let g2 = g.mapv(|v| v * v);
        let ag2 = a.dot(&g2);
        let u = a * g;
        let ug = u.dot(g);

        let parts: Vec<(T, T)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let inv2 = self.inv_norm[i] * self.inv_norm[i];
                let hi = h[[i, i]];
                let ai = a.row(i);
                let hrow = h.row(i);
                let tr_c = one - msq[i];
                let ycy = ai.dot(&g2.row(i)) - hi * hi;
                let sum_a_h2: T = Zip::from(&ai)
                    .and(&hrow)
                    .fold(T::zero(), |acc, &am, &hm| acc + am * hm * hm);
                let c_sq = ai.dot(&ag2.row(i)) - two * sum_a_h2 + msq[i] * msq[i];
                let ui = u.row(i);
                let cy_sq = ui.dot(&ug.row(i)) - two * hi * ui.dot(&hrow) + hi * hi * msq[i];
                let aii = a[[i, i]];
                let diag = inv2
                    * (beta * beta * (c_sq - cy_sq)
                        + two * beta * aii * (tr_c - ycy)
                        + aii * aii * dm1);

                let mut off = T::zero();
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let gij = g[[i, j]];
                    let hji = h[[j, i]];
                    let w = a[[j, i]];
                    off += w
                        * w
                        * (dm1
                            + two * beta * (gij * hji - h[[j, j]])
                            + beta * beta * (one - gij * gij) * (one - two * hji + msq[j]));
                }
                (diag, off * inv2)
            })
            .collect();
        parts
            .into_iter()
            .fold((T::zero(), T::zero()), |(x, y), (p, q)| (x + p, y + q))
    }

    /// `tr J` of the attention part: `sum_i [beta (tr C_i - y_i'C_i y_i) + A_ii (d-1)] / |x_i|`.
    pub fn trace(&self) -> T {
        let one = T::one();
        let dm1 = T::from_usize_lossy(self.d) - one;
        let h = self.a.dot(&self.gram);
        (0..self.n)
            .map(|i| {
                let ai = self.a.row(i);
                let msq = ai.dot(&h.row(i));
                let hi = h[[i, i]];
                let ycy: T = Zip::from(&ai)
                    .and(&self.gram.row(i))
                    .fold(T::zero(), |acc, &am, &g| acc + am * g * g)
                    - hi * hi;
                self.inv_norm[i] * (self.beta * (one - msq - ycy) + self.a[[i, i]] * dm1)
            })
            .sum()
    }

    /// Directional derivative `J v` of the attention part, as an `n x d`
    /// matrix whose row `j` is `sum_i B_ij^T v_i`.
    pub fn jvp(&self, v: &Array2<T>) -> Array2<T> {
        // dy_i = P_i v_i / |x_i|
        let mut dy = v.clone();
        for (i, mut row) in dy.axis_iter_mut(Axis(0)).enumerate() {
            let along = row.dot(&self.y.row(i));
            row.scaled_add(-along, &self.y.row(i));
            row *= self.inv_norm[i];
        }
        // dS = beta (dY Y^T + Y dY^T)
        let cross = dy.dot(&self.y.t());
        let mut ds = &cross + &cross.t();
        ds *= self.beta;
        // dA = A o (dS - rowsum(A o dS))
        let mut da = &self.a * &ds;
        let mean: Array1<T> = da.sum_axis(Axis(1));
        Zip::from(da.rows_mut())
            .and(self.a.rows())
            .and(&mean)
            .for_each(|mut row, arow, &mu| {
                Zip::from(&mut row)
                    .and(&arow)
                    .for_each(|x, &aw| *x -= aw * mu);
            });
        self.a.dot(&dy) + da.dot(&self.y)
    }

    /// Jacobian-vector product of the full update, `J v + alpha v`.
    pub fn jvp_with_residual(&self, v: &Array2<T>) -> Array2<T> {
        let mut out = self.jvp(v);
        if self.alpha != T::zero() {
            out.scaled_add(self.alpha, v);
        }
        out
    }

    /// Dense `nd x nd` Jacobian, row index `i d + u`, column index `j d + v`.
    pub fn dense(&self, include_alpha: bool) -> Array2<T> {
        let (n, d) = (self.n, self.d);
        let mut out = Array2::zeros((n * d, n * d));
        for i in 0..n {
            for j in 0..n {
                let b = if include_alpha {
                    self.block_with_residual(i, j)
                } else {
                    self.block(i, j)
                };
                out.slice_mut(s![i * d..(i + 1) * d, j * d..(j + 1) * d])
                    .assign(&b);
            }
        }
        out
    }
}

/// Analytic block `(i, j)` of the attention-only Jacobian.
pub fn jacobian_block<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    i: usize,
    j: usize,
) -> Result<JacobianBlock<T>> {
    let n = cfg.n();
    if i >= n || j >= n {
        return Err(invalid(format!(
            "block ({i}, {j}) out of range for n = {n}"
        )));
    }
    let layer = LayerJacobian::new(cfg, params)?;
    Ok(JacobianBlock {
        i,
        j,
        matrix: layer.block(i, j),
    })
}

fn report_from_parts<T: Scalar>(
    layer: &LayerJacobian<T>,
    include_alpha: bool,
    diag: T,
    off: T,
) -> JacobianReport<T> {
    let (n, d) = (layer.n, layer.d);
    let nd = T::from_usize_lossy(n * d);
    let mut diag = diag;
    if include_alpha && layer.alpha != T::zero() {
        // |J + alpha I|^2 = |J|^2 + 2 alpha tr J + alpha^2 nd
        diag += T::lit(2.0) * layer.alpha * layer.trace() + layer.alpha * layer.alpha * nd;
    }
    let total = diag + off;
    JacobianReport {
        eta_exact: Some(total / nd),
        frobenius_sq: Some(total),
        diagonal_sq: Some(diag),
        off_diagonal_sq: Some(off),
        ..JacobianReport::empty(n, d, layer.beta, layer.alpha, include_alpha)
    }
}

/// Exact `eta = |J|_F^2 / (nd)` of the attention part (`alpha` excluded).
pub fn frobenius_norm_exact<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    budget: &Budget,
) -> Result<JacobianReport<T>> {
    budget.check_n2d2(cfg.n(), cfg.d())?;
    let layer = LayerJacobian::new(cfg, params)?;
    let (diag, off) = layer.frobenius_sq_parts();
    Ok(report_from_parts(&layer, false, diag, off))
}

/// Exact `eta` of the full update `ATT(N(X)) + alpha X`.
pub fn frobenius_norm_exact_with_residual<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    budget: &Budget,
) -> Result<JacobianReport<T>> {
    budget.check_n2d2(cfg.n(), cfg.d())?;
    let layer = LayerJacobian::new(cfg, params)?;
    let (diag, off) = layer.frobenius_sq_parts();
    Ok(report_from_parts(&layer, true, diag, off))
}

/// Same quantity as [`frobenius_norm_exact`], but by forming and squaring
/// every block. `O(n^2 d^2 + n^2 d^3 / n)`; an independent cross-check.
pub fn frobenius_norm_blocks<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    budget: &Budget,
) -> Result<JacobianReport<T>> {
    budget.check_n2d2(cfg.n(), cfg.d())?;
    let layer = LayerJacobian::new(cfg, params)?;
    let n = layer.n;
    let parts: Vec<(T, T)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut off = T::zero();
            let mut diag = T::zero();
            for j in 0..n {
                let v = frob_sq(&layer.block(i, j));
                if i == j {
                    diag = v;
                } else {
                    off += v;
                }
            }
            (diag, off)
        })
        .collect();
    let (diag, off) = parts
        .into_iter()
        .fold((T::zero(), T::zero()), |(x, y), (p, q)| (x + p, y + q));
    Ok(report_from_parts(&layer, false, diag, off))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th independent stream derived from `seed`.
pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

fn rademacher<T: Scalar>(n: usize, d: usize, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || {
        if rng.random::<bool>() {
            T::one()
        } else {
            -T::one()
        }
    })
}

fn hutchinson_from_samples<T: Scalar>(samples: &[T], nd: usize) -> HutchinsonEstimate<T> {
    let k = samples.len();
    let kt = T::from_usize_lossy(k);
    let mean = samples.iter().copied().sum::<T>() / kt;
    let se = (k >= 2).then(|| {
        let var = samples.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / (kt - T::one());
        (var / kt).sqrt()
    });
    let ndt = T::from_usize_lossy(nd);
    HutchinsonEstimate {
        probes: k,
        frobenius_sq: mean,
        frobenius_sq_se: se,
        eta: mean / ndt,
        eta_se: se.map(|s| s / ndt),
    }
}

/// Hutchinson estimate of `|J|_F^2 = E |J v|^2` with Rademacher probes and
/// analytic Jacobian-vector products (attention part only). Probe `k` uses
/// a seed derived from `(seed, k)`, so results do not depend on threading.
pub fn frobenius_norm_hutchinson<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    probes: usize,
    seed: u64,
) -> Result<JacobianReport<T>> {
    if probes == 0 {
        return Err(invalid("need at least one probe"));
    }
    let layer = LayerJacobian::new(cfg, params)?;
    let (n, d) = (layer.n, layer.d);
    let samples: Vec<T> = (0..probes as u64)
        .into_par_iter()
        .map(|k| {
            let v = rademacher::<T>(n, d, derive_seed(seed, k));
            frob_sq(&layer.jvp(&v))
        })
        .collect();
    Ok(JacobianReport {
        eta_hutchinson: Some(hutchinson_from_samples(&samples, n * d)),
        ..JacobianReport::empty(n, d, layer.beta, layer.alpha, false)
    })
}

/// Row `j` of `ATT(N(X))` where `X` is given by its directions `y` and
/// only the scores of row `j` are needed. `O(nd)`.
fn att_row<T: Scalar>(y: &Array2<T>, beta: T, j: usize) -> Array1<T> {
    let scores = y.dot(&y.row(j)).mapv(|g| beta * g);
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let w = scores.mapv(|a| (a - max).exp());
    let z = w.sum();
    w.dot(y) / z
}

fn normalized<T: Scalar>(v: ArrayView1<T>) -> Array1<T> {
    let norm = v.dot(&v).sqrt();
    v.mapv(|c| c / norm)
}

/// Central finite differences of output `j` with respect to token `i`
/// (attention part). The step is `h max(1, |x_i|)`.
pub fn finite_difference_block<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    i: usize,
    j: usize,
    h: T,
) -> Result<Array2<T>> {
    if !(h > T::zero()) {
        return Err(invalid(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    params.check()?;
    let (n, d) = (cfg.n(), cfg.d());
    if i >= n || j >= n {
        return Err(invalid(format!(
            "block ({i}, {j}) out of range for n = {n}"
        )));
    }
    let beta = params.beta(n);
    let step = h * cfg.norms()[i].max(T::one());
    let two_step = step + step;
    let mut y = cfg.y().clone();
    let xi = cfg.x().row(i).to_owned();
    let mut out = Array2::zeros((d, d));
    for u in 0..d {
        let mut plus = xi.clone();
        plus[u] += step;
        y.row_mut(i).assign(&normalized(plus.view()));
        let f_plus = att_row(&y, beta, j);
        let mut minus = xi.clone();
        minus[u] -= step;
        y.row_mut(i).assign(&normalized(minus.view()));
        let f_minus = att_row(&y, beta, j);
        out.row_mut(u).assign(&((f_plus - f_minus) / two_step));
    }
    Ok(out)
}

/// Central difference of the whole attention map along `dir` (`n x d`).
pub fn finite_difference_direction<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    dir: &Array2<T>,
    h: T,
) -> Result<Array2<T>> {
    if dir.dim() != cfg.x().dim() {
        return Err(AttnError::Shape(
            "direction must match the token matrix".into(),
        ));
    }
    let p = params.without_residual();
    let plus = TokenConfig::from_rows(cfg.x() + &(dir * h))?;
    let minus = TokenConfig::from_rows(cfg.x() - &(dir * h))?;
    let fp = crate::attention::att_forward(&plus, &p)?.x_next;
    let fm = crate::attention::att_forward(&minus, &p)?.x_next;
    Ok((fp - fm) / (h + h))
}

/// Largest relative Frobenius error between analytic and finite-difference
/// blocks over `pairs` seeded random `(i, j)`; every pair when `pairs >= n^2`.
pub fn finite_difference_check<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    pairs: usize,
    seed: u64,
    h: T,
) -> Result<T> {
    let n = cfg.n();
    let layer = LayerJacobian::new(cfg, params)?;
    let chosen: Vec<(usize, usize)> = if pairs >= n * n {
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..pairs)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect()
    };
    let errs: Vec<T> = chosen
        .into_par_iter()
        .map(|(i, j)| {
            let fd = finite_difference_block(cfg, params, i, j, h)?;
            let an = layer.block(i, j);
            let scale = frob_sq(&fd).sqrt().max(T::lit(1e-12));
            Ok(frob_sq(&(&an - &fd)).sqrt() / scale)
        })
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(T::zero(), T::max))
}

/// Singular-value summary of a multi-layer Jacobian product.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSummary<T> {
    pub layers: usize,
    pub dim: usize,
    /// `|J|_F^2 / (nd)`.
    pub mean_square: T,
    /// Largest singular values, descending.
    pub top_singular_values: Vec<T>,
}

/// Orthonormalises the columns of `q` in place (modified Gram-Schmidt).
/// Columns that vanish are replaced by zeros.
fn orthonormalize<T: Scalar>(q: &mut Array2<T>) {
    let (dim, k) = q.dim();
    let mut next_basis = 0usize;
    for c in 0..k {
        let scale = q.column(c).dot(&q.column(c)).sqrt();
        let mut ok = project_out(q, c) > T::lit(1e-10) * scale;
        // A collapsed column is refilled from the standard basis so the
        // subspace keeps full rank (duplicate sign probes do happen).
        while !ok && next_basis < dim {
            q.column_mut(c).fill(T::zero());
            q[[next_basis, c]] = T::one();
            next_basis += 1;
            ok = project_out(q, c) > T::lit(1e-6);
        }
        if !ok {
            q.column_mut(c).fill(T::zero());
        }
    }
}

/// Two passes of Gram-Schmidt of column `c` against the earlier ones, then
/// normalise. Returns the norm before normalising.
fn project_out<T: Scalar>(q: &mut Array2<T>, c: usize) -> T {
    for _ in 0..2 {
        for p in 0..c {
            let proj = q.column(p).dot(&q.column(c));
            let prev = q.column(p).to_owned();
            q.column_mut(c).scaled_add(-proj, &prev);
        }
    }
    let norm = q.column(c).dot(&q.column(c)).sqrt();
    if norm > T::zero() {
        q.column_mut(c).mapv_inplace(|v| v / norm);
    }
    norm
}

/// Top-`k` singular values by subspace iteration on `J^T J`, finished
/// with an exact eigen-solve of the projected `k x k` problem.
fn top_singular_values<T: Scalar>(j: &Array2<T>, k: usize, seed: u64) -> Vec<T> {
    let dim = j.ncols();
    let k = k.min(dim);
    if k == 0 {
        return Vec::new();
    }
    let mut q = rademacher::<T>(dim, k, seed);
    orthonormalize(&mut q);
    let mut prev: Vec<f64> = vec![0.0; k];
    for _ in 0..500 {
        let z = j.dot(&q);
        q = j.t().dot(&z);
        orthonormalize(&mut q);
        let est: Vec<f64> = (0..k)
            .map(|c| {
                let col = j.dot(&q.column(c));
                col.dot(&col).as_f64()
            })
            .collect();
        let converged = est
            .iter()
            .zip(&prev)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        prev = est;
        if converged {
            break;
        }
    }
    let jq = j.dot(&q);
    let small = jq.t().dot(&jq);
    let m = nalgebra::DMatrix::from_fn(k, k, |r, c| small[[r, c]].as_f64());
    let mut vals: Vec<f64> = nalgebra::SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals.into_iter().map(T::lit).collect()
}

/// Materialises each layer's Jacobian of the full update (with `alpha I`),
/// multiplies them in layer order and summarises the product's spectrum.
pub fn end_to_end_jacobian<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    layers: usize,
    top_k: usize,
    budget: &Budget,
) -> Result<SpectrumSummary<T>> {
    if layers == 0 {
        return Err(invalid("layer count must be >= 1"));
    }
    let dim = cfg.n() * cfg.d();
    budget.check_dense(dim)?;
    let mut current = cfg.clone();
    let mut product: Option<Array2<T>> = None;
    for _ in 0..layers {
        let layer = LayerJacobian::new(&current, params)?;
        let jl = layer.dense(true);
        // Row-vector convention: dX(L) = dX(0) J_1 J_2 ... J_L.
        product = Some(match product {
            None => jl,
            Some(p) => p.dot(&jl),
        });
        current = crate::attention::att_forward(&current, params)?.next_config()?;
    }
    let product = product.expect("at least one layer");
    let mean_square = frob_sq(&product) / T::from_usize_lossy(dim);
    Ok(SpectrumSummary {
        layers,
        dim,
        mean_square,
        top_singular_values: top_singular_values(&product, top_k, 0x00DD_BA11),
    })
}

/// Numeric sums over all `(i, j)` of the three pieces of `|block|^2` under
/// the simplex, each divided by the matching power of `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimplexGradientSums<T> {
    /// `sum tr[R1^T R1] / Z^2`.
    pub r1r1: T,
    /// `sum tr[R1^T R2] / Z^2`.
    pub r1r2: T,
    /// `sum tr[R2^T R2] / Z^2`.
    pub r2r2: T,
    /// `sum tr[(R1+R2)^T (R1+R2)] / Z^2`.
    pub rr: T,
    /// `sum (U1+U2)^T (R1+R2) (U3+U4) / Z^3`.
    pub urv: T,
    /// `sum |U1+U2|^2 |U3+U4|^2 / Z^4`.
    pub uu: T,
    /// `ln Z` with `Z = e^beta + (n-1) e^{beta rho}`.
    pub log_z: T,
}

/// Fast path for an exact simplex (equal norms `sqrt(q)`, equal cosines
/// `rho`). Uses the shared sums `V = sum_m y_m`, `W = sum_m y_m y_m^T` and
/// the assumed inner products, so it is only correct on such configs.
#[derive(Debug, Clone)]
pub struct SimplexJacobian<T> {
    n: usize,
    d: usize,
    q: T,
    beta: T,
    y: Array2<T>,
    v: Array1<T>,
    w: Array2<T>,
    /// `e^beta / Z`.
    self_ratio: T,
    /// `e^{beta rho} / Z`.
    other_ratio: T,
    log_z: T,
}

/// `ln(e^beta + (n - 1) e^{beta rho})`.
pub(crate) fn simplex_log_z<T: Scalar>(n: usize, rho: T, beta: T) -> T {
    if n == 1 {
        return beta;
    }
    let other = beta * rho + T::from_usize_lossy(n - 1).ln();
    let hi = beta.max(other);
    hi + ((beta - hi).exp() + (other - hi).exp()).ln()
}

impl<T: Scalar> SimplexJacobian<T> {
    pub fn new(cfg: &TokenConfig<T>, rho: T, q: T, beta: T) -> Result<Self> {
        if !(q > T::zero()) {
            return Err(invalid("q must be positive"));
        }
        let n = cfg.n();
        let log_z = simplex_log_z(n, rho, beta);
        Ok(Self {
            n,
            d: cfg.d(),
            q,
            beta,
            y: cfg.y().clone(),
            v: cfg.y().sum_axis(Axis(0)),
            w: cfg.y().t().dot(cfg.y()),
            self_ratio: (beta - log_z).exp(),
            other_ratio: (beta * rho - log_z).exp(),
            log_z,
        })
    }

    /// `(R1/Z, R2/Z, (U1+U2)/Z, (U3+U4)/Z)` for the pair `(i, j)`.
    fn terms(&self, i: usize, j: usize) -> (Array2<T>, Array2<T>, Array1<T>, Array1<T>) {
        let beta = self.beta;
        let yi = self.y.row(i);
        let yj = self.y.row(j);
        let e_ij = if i == j {
            self.self_ratio
        } else {
            self.other_ratio
        };
        let p = |x: ArrayView1<T>| &x - &(&yi * x.dot(&yi));

        let r1 = if i == j {
            let wy = self.w.dot(&yi);
            (&self.w - &outer(yi, wy.view())) * (beta * self.other_ratio)
        } else {
            Array2::zeros((self.d, self.d))
        };
        let p_yj = p(yj);
        let lead = &p_yj * beta - yi;
        let mut r2 = outer(lead.view(), yi);
        add_identity(&mut r2, T::one());
        r2 *= e_ij;
        let mut u = p_yj * (beta * e_ij);
        if i == j {
            u = u + p(self.v.view()) * (beta * self.other_ratio);
        }
        let vj = &yj * (self.self_ratio - self.other_ratio) + &self.v * self.other_ratio;
        (r1, r2, u, vj)
    }

    /// Block `(i, j)`; agrees with [`LayerJacobian::block`] on a simplex.
    pub fn block(&self, i: usize, j: usize) -> Array2<T> {
        let (r1, r2, u, vj) = self.terms(i, j);
        (r1 + r2 - outer(u.view(), vj.view())) / self.q.sqrt()
    }

    pub fn gradient_sums(&self) -> SimplexGradientSums<T> {
        let mut acc = [T::zero(); 5];
        for i in 0..self.n {
            for j in 0..self.n {
                let (r1, r2, u, vj) = self.terms(i, j);
                let r = &r1 + &r2;
                acc[0] += frob_sq(&r1);
                acc[1] += (&r1 * &r2).sum();
                acc[2] += frob_sq(&r2);
                acc[3] += u.dot(&r.dot(&vj));
                acc[4] += u.dot(&u) * vj.dot(&vj);
            }
        }
        let two = T::lit(2.0);
        SimplexGradientSums {
            r1r1: acc[0],
            r1r2: acc[1],
            r2r2: acc[2],
            rr: acc[0] + two * acc[1] + acc[2],
            urv: acc[3],
            uu: acc[4],
            log_z: self.log_z,
        }
    }

    /// `|J|_F^2` assembled from the three sums:
    /// `(rr - 2 urv + uu) / q`.
    pub fn frobenius_sq(&self) -> T {
        let s = self.gradient_sums();
        (s.rr - T::lit(2.0) * s.urv + s.uu) / self.q
    }
}
