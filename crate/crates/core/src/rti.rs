//! The streaming reconstructor: commits one section per arriving interval
//! with zero delay.
//!
//! The carry between steps is tiny and of fixed size: the previous timestamp,
//! the continuity vector, and (for the recurrent policy) the GRU hidden
//! state. Nothing about a step depends on how many intervals came before, so
//! per-step cost is constant over the lifetime of a stream, and feeding a
//! prefix of a sequence yields exactly the actions of the full run.

use crate::core::{
    Action, CoreError, Interval, IntervalSequence, RtiState, SignalState, Spline, SplineConfig,
};
use crate::policy::{evaluate_policy, GruHidden, PolicyError, PolicyParams};
use crate::splinalg::{continuity_vector, curvature_matrix, section_curvature};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RtiError {
    #[error("need at least two intervals to commit a section, got {len}")]
    TooShort { len: usize },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Splinalg(#[from] crate::splinalg::SplinalgError),
}

/// Default initial condition: start flat at the first centroid,
/// `e0 = [y_0, 0, ..., 0]`.
pub fn default_e0(first: &Interval, cfg: SplineConfig) -> Vec<f64> {
    let mut e0 = vec![0.0; cfg.head_len()];
    e0[0] = first.y;
    e0
}

/// Carry consumed by [`stream_step`]; holds everything the next step needs.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    sigma: SignalState,
    hidden: Option<GruHidden>,
}

impl StreamState {
    pub fn sigma(&self) -> &SignalState {
        &self.sigma
    }

    pub fn hidden(&self) -> Option<&GruHidden> {
        self.hidden.as_ref()
    }
}

/// Builds the carry available once the first interval has arrived: no section
/// is committed at t = 0, but the continuity state `[x_0, e_0]` is fixed.
pub fn initial_state(
    first: &Interval,
    cfg: SplineConfig,
    e0: Option<&[f64]>,
) -> Result<StreamState, RtiError> {
    crate::core::validate_sequence(std::slice::from_ref(first))?;
    let e0 = match e0 {
        Some(e) => e.to_vec(),
        None => default_e0(first, cfg),
    };
    let sigma = SignalState::new(cfg, first.x, e0)?;
    Ok(StreamState { sigma, hidden: None })
}

/// Advances the continuity state past a committed section.
pub fn state_update(prev: &RtiState, action: &Action, cfg: SplineConfig) -> SignalState {
    let e = continuity_vector(action, prev.gap(), cfg);
    SignalState::new(cfg, prev.interval().x, e).expect("continuity vector has head length")
}

/// Commits the section ending at `interval` and returns the updated carry.
pub fn stream_step(
    carry: StreamState,
    interval: &Interval,
    cfg: SplineConfig,
    params: &PolicyParams,
) -> Result<(Action, StreamState), RtiError> {
    if !interval.x.is_finite() || !interval.y.is_finite() {
        return Err(CoreError::NonFiniteValue { index: 0 }.into());
    }
    if !(interval.eps >= 0.0) || !interval.eps.is_finite() {
        return Err(CoreError::NegativeHalfWidth { index: 0 }.into());
    }
    let state = RtiState::new(*interval, carry.sigma)?;
    let (action, hidden) = evaluate_policy(&state, cfg, params, carry.hidden)?;
    let sigma = state_update(&state, &action, cfg);
    Ok((action, StreamState { sigma, hidden }))
}

/// A full offline pass over a sequence.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub spline: Spline,
    /// Curvature of each committed section.
    pub section_curvatures: Vec<f64>,
    /// Mean per-section curvature (the per-sequence training loss).
    pub loss: f64,
}

/// Streams the whole sequence through the policy and assembles the result.
/// A sequence of `n` intervals yields `n - 1` sections.
pub fn reconstruct(
    seq: &IntervalSequence,
    cfg: SplineConfig,
    params: &PolicyParams,
    e0: Option<&[f64]>,
) -> Result<ReconstructionResult, RtiError> {
    if seq.len() < 2 {
        return Err(RtiError::TooShort { len: seq.len() });
    }
    let e0_vec = match e0 {
        Some(e) => e.to_vec(),
        None => default_e0(&seq[0], cfg),
    };
    let mut carry = initial_state(&seq[0], cfg, Some(&e0_vec))?;
    let mut sections = Vec::with_capacity(seq.len() - 1);
    let mut curvatures = Vec::with_capacity(seq.len() - 1);
    let mut knots = Vec::with_capacity(seq.len());
    knots.push(seq[0].x);
    for t in 1..seq.len() {
        let u = seq[t].x - knots[t - 1];
        let (action, next) = stream_step(carry, &seq[t], cfg, params)?;
        let m = curvature_matrix(u, cfg.d())?;
        curvatures.push(section_curvature(&action, &m));
        sections.push(action);
        knots.push(seq[t].x);
        carry = next;
    }
    let loss = curvatures.iter().sum::<f64>() / curvatures.len() as f64;
    let spline = Spline::new(cfg, knots, sections, e0_vec)?;
    Ok(ReconstructionResult { spline, section_curvatures: curvatures, loss })
}
