//! Numerical laboratory for scaled softmax self-attention with `K = Q = V = I`.
//!
//! Tokens are normalised, attended with inverse temperature `beta = gamma ln n`,
//! and optionally mixed with a residual `alpha x`. The crate provides the
//! forward map, exact and stochastic Jacobian norms, closed-form finite-n and
//! asymptotic predictions, and parameter sweeps over `(rho, gamma, d)`.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below pin the common double-precision instantiations.

// `!(x > 0)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod experiments;
pub mod jacobian;
pub mod scalar;
pub mod theory;
pub mod tokens;
pub mod verify;

pub use attention::{
    att_forward, attention_weights, iterate_layers, AttentionOutput, AttentionParams, LayerSummary,
    LayerTrace, Scale, SoftmaxWeights,
};
pub use error::{AttnError, Result};
pub use experiments::{
    compute_eta, compute_lambda, emit_boundary_overlay, emit_csv, parse_records_csv, run_sweep,
    EtaMode, Generator, Metric, SweepGrid, SweepRecord,
};
pub use jacobian::{
    end_to_end_jacobian, finite_difference_block, finite_difference_check, frobenius_norm_blocks,
    frobenius_norm_exact, frobenius_norm_hutchinson, jacobian_block, Budget, HutchinsonEstimate,
    JacobianBlock, JacobianReport, SimplexJacobian, SpectrumSummary,
};
pub use scalar::Scalar;
pub use theory::{
    classify_three_phase, classify_two_phase, simplex_cos_limit, simplex_eta_limit,
    simplex_finite_n, z_partition_prediction, Regime, RegimeVerdict, SimplexPrediction,
};
pub use tokens::{
    make_simplex, make_three_phase, sample_gaussian_factor, summarize_geometry,
    validate_three_phase, GaussianFactorSpec, GeometrySummary, SimplexSpec, ThreePhaseReport,
    ThreePhaseSpec, TokenConfig,
};
pub use verify::{run_verify, Suite, VerifyReport};

pub type TokenConfig64 = TokenConfig<f64>;
pub type AttentionParams64 = AttentionParams<f64>;
pub type AttentionOutput64 = AttentionOutput<f64>;
pub type JacobianReport64 = JacobianReport<f64>;
pub type SimplexSpec64 = SimplexSpec<f64>;
pub type ThreePhaseSpec64 = ThreePhaseSpec<f64>;
pub type GeometrySummary64 = GeometrySummary<f64>;
pub type RegimeVerdict64 = RegimeVerdict<f64>;
pub type SimplexPrediction64 = SimplexPrediction<f64>;
