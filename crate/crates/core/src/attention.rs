//! Forward map `x'_i = ATT(y_i) + alpha x_i` with `ATT(y_i) = sum_j A_ij y_j`.

use ndarray::{Array1, Array2, Axis, Zip};
use serde::Serialize;

use crate::error::{invalid, AttnError, Result};
use crate::experiments::lambda_from_parts;
use crate::scalar::Scalar;
use crate::tokens::{summarize_with_gram, GeometrySummary, TokenConfig};

/// Where the inverse temperature comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale<T> {
    /// `beta` given directly.
    Beta(T),
    /// `beta = gamma ln n`, natural log, so `e^beta = n^gamma`.
    Gamma(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionParams<T> {
    pub scale: Scale<T>,
    pub alpha: T,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn with_gamma(gamma: T, alpha: T) -> Self {
        Self {
            scale: Scale::Gamma(gamma),
            alpha,
        }
    }

    pub fn with_beta(beta: T, alpha: T) -> Self {
        Self {
            scale: Scale::Beta(beta),
            alpha,
        }
    }

    /// Inverse temperature for `n` tokens.
    pub fn beta(&self, n: usize) -> T {
        match self.scale {
            Scale::Beta(b) => b,
            Scale::Gamma(g) => g * T::from_usize_lossy(n).ln(),
        }
    }

    /// `gamma`, recovered as `beta / ln n` when only `beta` was given
    /// (`None` for `n = 1`).
    pub fn gamma(&self, n: usize) -> Option<T> {
        match self.scale {
            Scale::Gamma(g) => Some(g),
            Scale::Beta(b) if n >= 2 => Some(b / T::from_usize_lossy(n).ln()),
            Scale::Beta(_) => None,
        }
    }

    /// Same scale, residual switched off.
    pub fn without_residual(&self) -> Self {
        Self {
            alpha: T::zero(),
            ..*self
        }
    }

    pub fn check(&self) -> Result<()> {
        let (what, v) = match self.scale {
            Scale::Beta(b) => ("beta", b),
            Scale::Gamma(g) => ("gamma", g),
        };
        if !(v >= T::zero()) || !v.is_finite() {
            return Err(invalid(format!("{what} must be finite and >= 0, got {v}")));
        }
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return Err(invalid(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Row softmax of `beta G` together with its partition values.
///
/// `Z_i = exp(log_shift_i) * mantissa_i`; the shift is the row maximum of
/// the scores, so the mantissa lies in `[1, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxWeights<T> {
    pub weights: Array2<T>,
    pub log_shift: Array1<T>,
    pub mantissa: Array1<T>,
    pub beta: T,
}

impl<T: Scalar> SoftmaxWeights<T> {
    pub fn log_z(&self) -> Array1<T> {
        Zip::from(&self.log_shift)
            .and(&self.mantissa)
            .map_collect(|&s, &m| s + m.ln())
    }

    /// `max_i |sum_j A_ij - 1|`.
    pub fn max_row_sum_error(&self) -> T {
        self.weights
            .axis_iter(Axis(0))
            .map(|row| (row.sum() - T::one()).abs())
            .fold(T::zero(), T::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T> {
    pub softmax: SoftmaxWeights<T>,
    /// Rows `ATT(y_i)`.
    pub att: Array2<T>,
    /// Rows `x'_i = ATT(y_i) + alpha x_i`.
    pub x_next: Array2<T>,
}

impl<T: Scalar> AttentionOutput<T> {
    pub fn weights(&self) -> &Array2<T> {
        &self.softmax.weights
    }

    pub fn log_z(&self) -> Array1<T> {
        self.softmax.log_z()
    }

    pub fn next_config(&self) -> Result<TokenConfig<T>> {
        TokenConfig::from_rows(self.x_next.clone())
    }
}

pub(crate) fn softmax_from_gram<T: Scalar>(gram: &Array2<T>, beta: T) -> SoftmaxWeights<T> {
    let n = gram.nrows();
    let mut weights = gram.mapv(|g| beta * g);
    let mut log_shift = Array1::zeros(n);
    let mut mantissa = Array1::zeros(n);
    Zip::from(weights.axis_iter_mut(Axis(0)))
        .and(&mut log_shift)
        .and(&mut mantissa)
        .par_for_each(|mut row, shift, sum| {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|a| (a - max).exp());
            let s = row.sum();
            row.mapv_inplace(|e| e / s);
            *shift = max;
            *sum = s;
        });
    SoftmaxWeights {
        weights,
        log_shift,
        mantissa,
        beta,
    }
}

/// `A_ij = exp(beta <y_i, y_j>) / Z_i`, computed with per-row max shift.
pub fn attention_weights<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
) -> Result<SoftmaxWeights<T>> {
    params.check()?;
    Ok(softmax_from_gram(&cfg.gram(), params.beta(cfg.n())))
}

/// One attention layer.
pub fn att_forward<T: Scalar>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
) -> Result<AttentionOutput<T>> {
    let softmax = attention_weights(cfg, params)?;
    let att = softmax.weights.dot(cfg.y());
    let mut x_next = att.clone();
    if params.alpha != T::zero() {
        x_next.scaled_add(params.alpha, cfg.x());
    }
    Ok(AttentionOutput {
        softmax,
        att,
        x_next,
    })
}

/// Statistics after one layer of [`iterate_layers`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary<T> {
    /// 1-based layer index.
    pub layer: usize,
    /// Norm and cosine extremes of the layer output (`None` for `n = 1`).
    pub geometry: Option<GeometrySummary<T>>,
    /// Angle ratio of this layer's output against the layer-0 input.
    /// `None` if undefined (n < 2 or a degenerate input pair).
    pub lambda: Option<T>,
    pub min_norm: T,
    pub max_norm: T,
}

#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub layers: Vec<LayerSummary<T>>,
    pub output: TokenConfig<T>,
}

fn collapse_floor<T: Scalar>() -> T {
    T::lit(1e-300).max(T::min_positive_value())
}

/// Applies the layer `layers` times. Each layer re-normalises its input,
/// the residual uses the unnormalised tokens. `beta` is fixed from the
/// token count, which does not change between layers.
pub fn iterate_layers<T: Scalar, F>(
    cfg: &TokenConfig<T>,
    params: &AttentionParams<T>,
    layers: usize,
    mut observer: F,
) -> Result<LayerTrace<T>>
where
    F: FnMut(&LayerSummary<T>),
{
    if layers == 0 {
        return Err(invalid("layer count must be >= 1"));
    }
    params.check()?;
    let n = cfg.n();
    let gram0 = cfg.gram();
    let mut current = cfg.clone();
    let mut summaries = Vec::with_capacity(layers);
    for layer in 1..=layers {
        let out = att_forward(&current, params)?;
        let floor = collapse_floor::<T>();
        for (token, row) in out.x_next.axis_iter(Axis(0)).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm >= floor) {
                return Err(AttnError::NormCollapse {
                    layer,
                    token,
                    norm: norm.as_f64(),
                });
            }
        }
        current = out.next_config()?;
        let gram = current.gram();
        let geometry = if n >= 2 {
            Some(summarize_with_gram(&current, &gram)?)
        } else {
            None
        };
        let lambda = if n >= 2 {
            lambda_from_parts(cfg.y(), &gram0, current.y(), &gram).ok()
        } else {
            None
        };
        let norms = current.norms();
        let summary = LayerSummary {
            layer,
            geometry,
            lambda,
            min_norm: norms.iter().copied().fold(T::infinity(), T::min),
            max_norm: norms.iter().copied().fold(T::neg_infinity(), T::max),
        };
        observer(&summary);
        summaries.push(summary);
    }
    Ok(LayerTrace {
        layers: summaries,
        output: current,
    })
}
