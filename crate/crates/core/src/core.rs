//! Domain types shared by every stage of the pipeline.
//!
//! The conventions used throughout the crate are fixed here. A section
//! committed at time `x_t` is the polynomial
//! `g_t(x) = sum_i a[i] * (x - x_{t-1})^i`, `i = 0..=d`, valid on
//! `(x_{t-1}, x_t]`. The first `phi + 1` coefficients of a section are never
//! free: they are pinned by the continuity state carried over from the
//! previous section, which is what makes the emitted signal `phi` times
//! continuously differentiable no matter what a policy does.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported polynomial order. Factorial-style products stay exactly
/// representable in f64 and the monomial basis stays well conditioned.
pub const MAX_ORDER: usize = 8;

/// Absolute tolerance on the continuity chain accepted by [`Spline::new`].
pub const CONTINUITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("timestamps must strictly increase: violation at interval {index}")]
    NonMonotoneTimestamps { index: usize },
    #[error("half-width must be >= 0 and finite: violation at interval {index}")]
    NegativeHalfWidth { index: usize },
    #[error("non-finite field at interval {index}")]
    NonFiniteValue { index: usize },
    #[error("interval sequence must not be empty")]
    EmptySequence,
    #[error("spline config must satisfy 1 <= phi < d <= {MAX_ORDER}, got d={d}, phi={phi}")]
    InvalidConfig { d: usize, phi: usize },
    #[error("expected {expected} coefficients, got {got}")]
    WrongCoefficientCount { expected: usize, got: usize },
    #[error("expected continuity state of dimension {expected}, got {got}")]
    WrongStateDimension { expected: usize, got: usize },
    #[error("pending interval at x={x} does not lie after the state timestamp {x_prev}")]
    StaleInterval { x: f64, x_prev: f64 },
    #[error("knots must strictly increase: violation at knot {index}")]
    NonIncreasingKnots { index: usize },
    #[error("expected one section per knot gap: {knots} knots vs {sections} sections")]
    SectionCountMismatch { knots: usize, sections: usize },
    #[error("section {section} breaks the continuity chain at derivative order {order} (gap {gap:.3e})")]
    BrokenContinuity { section: usize, order: usize, gap: f64 },
}

/// One streamed observation: at timestamp `x` the signal lies in `[y-eps, y+eps]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub x: f64,
    pub y: f64,
    pub eps: f64,
}

impl Interval {
    pub fn new(x: f64, y: f64, eps: f64) -> Interval {
        Interval { x, y, eps }
    }
}

/// Checks the interval-sequence invariants: finite fields, `eps >= 0`,
/// strictly increasing timestamps, at least one element.
pub fn validate_sequence(items: &[Interval]) -> Result<(), CoreError> {
    if items.is_empty() {
        return Err(CoreError::EmptySequence);
    }
    for (index, it) in items.iter().enumerate() {
        if !it.x.is_finite() || !it.y.is_finite() {
            return Err(CoreError::NonFiniteValue { index });
        }
        if !(it.eps >= 0.0) || !it.eps.is_finite() {
            return Err(CoreError::NegativeHalfWidth { index });
        }
        if index > 0 && !(it.x > items[index - 1].x) {
            return Err(CoreError::NonMonotoneTimestamps { index });
        }
    }
    Ok(())
}

/// A validated stream of intervals with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSequence {
    items: Vec<Interval>,
}

impl IntervalSequence {
    pub fn new(items: Vec<Interval>) -> Result<IntervalSequence, CoreError> {
        validate_sequence(&items)?;
        Ok(IntervalSequence { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn as_slice(&self) -> &[Interval] {
        &self.items
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Interval> {
        self.items.iter()
    }
}

impl std::ops::Index<usize> for IntervalSequence {
    type Output = Interval;
    fn index(&self, i: usize) -> &Interval {
        &self.items[i]
    }
}

/// Polynomial order `d` and smoothness `phi` of the emitted signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineConfig {
    d: usize,
    phi: usize,
}

impl SplineConfig {
    /// Requires `1 <= phi < d <= MAX_ORDER`.
    pub fn new(d: usize, phi: usize) -> Result<SplineConfig, CoreError> {
        if phi < 1 || phi >= d || d > MAX_ORDER {
            return Err(CoreError::InvalidConfig { d, phi });
        }
        Ok(SplineConfig { d, phi })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn phi(&self) -> usize {
        self.phi
    }

    /// Coefficients per section: `d + 1`.
    pub fn coeff_count(&self) -> usize {
        self.d + 1
    }

    /// Pinned leading coefficients per section: `phi + 1`.
    pub fn head_len(&self) -> usize {
        self.phi + 1
    }

    /// Free trailing coefficients per section: `d - phi`.
    pub fn tail_len(&self) -> usize {
        self.d - self.phi
    }
}

/// Coefficients of one committed section, lowest order first.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    coeffs: Vec<f64>,
}

impl Action {
    pub fn new(cfg: SplineConfig, coeffs: Vec<f64>) -> Result<Action, CoreError> {
        if coeffs.len() != cfg.coeff_count() {
            return Err(CoreError::WrongCoefficientCount {
                expected: cfg.coeff_count(),
                got: coeffs.len(),
            });
        }
        Ok(Action { coeffs })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
}

/// Carry between sections: the previous timestamp and the continuity vector
/// `e_t` (value and scaled derivatives the next section must reproduce).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalState {
    x_prev: f64,
    e: Vec<f64>,
}

impl SignalState {
    pub fn new(cfg: SplineConfig, x_prev: f64, e: Vec<f64>) -> Result<SignalState, CoreError> {
        if e.len() != cfg.head_len() {
            return Err(CoreError::WrongStateDimension { expected: cfg.head_len(), got: e.len() });
        }
        Ok(SignalState { x_prev, e })
    }

    pub fn x_prev(&self) -> f64 {
        self.x_prev
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }
}

/// Everything a policy sees when committing one section: the continuity
/// carry and the interval that just arrived.
#[derive(Debug, Clone, PartialEq)]
pub struct RtiState {
    interval: Interval,
    sigma: SignalState,
}

impl RtiState {
    pub fn new(interval: Interval, sigma: SignalState) -> Result<RtiState, CoreError> {
        if !(interval.x > sigma.x_prev) {
            return Err(CoreError::StaleInterval { x: interval.x, x_prev: sigma.x_prev });
        }
        Ok(RtiState { interval, sigma })
    }

    pub fn interval(&self) -> &Interval {
        &self.interval
    }

    pub fn sigma(&self) -> &SignalState {
        &self.sigma
    }

    /// Section length `u_t = x_t - x_{t-1}`.
    pub fn gap(&self) -> f64 {
        self.interval.x - self.sigma.x_prev
    }
}

/// A committed piecewise-polynomial signal: knots `x_0 < ... < x_T`, one
/// section per gap, and the initial condition `e0` the first section started
/// from. Validated so that consecutive sections agree up to derivative order
/// `phi` at the shared knot.
#[derive(Debug, Clone, PartialEq)]
pub struct Spline {
    config: SplineConfig,
    knots: Vec<f64>,
    sections: Vec<Action>,
    e0: Vec<f64>,
}

impl Spline {
    pub fn new(
        config: SplineConfig,
        knots: Vec<f64>,
        sections: Vec<Action>,
        e0: Vec<f64>,
    ) -> Result<Spline, CoreError> {
        for i in 1..knots.len() {
            if !(knots[i] > knots[i - 1]) {
                return Err(CoreError::NonIncreasingKnots { index: i });
            }
        }
        if knots.len() != sections.len() + 1 {
            return Err(CoreError::SectionCountMismatch {
                knots: knots.len(),
                sections: sections.len(),
            });
        }
        if e0.len() != config.head_len() {
            return Err(CoreError::WrongStateDimension {
                expected: config.head_len(),
                got: e0.len(),
            });
        }
        for (t, sec) in sections.iter().enumerate() {
            if sec.coeffs().len() != config.coeff_count() {
                return Err(CoreError::WrongCoefficientCount {
                    expected: config.coeff_count(),
                    got: sec.coeffs().len(),
                });
            }
            let expect: Vec<f64> = if t == 0 {
                e0.clone()
            } else {
                let u = knots[t] - knots[t - 1];
                crate::splinalg::continuity_vector(&sections[t - 1], u, config)
            };
            for (order, (&have, &want)) in
                sec.coeffs().iter().zip(expect.iter()).enumerate()
            {
                let gap = (have - want).abs();
                if !(gap <= CONTINUITY_TOL) {
                    return Err(CoreError::BrokenContinuity { section: t, order, gap });
                }
            }
        }
        Ok(Spline { config, knots, sections, e0 })
    }

    pub fn config(&self) -> SplineConfig {
        self.config
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn sections(&self) -> &[Action] {
        &self.sections
    }

    pub fn e0(&self) -> &[f64] {
        &self.e0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(x: f64, y: f64, eps: f64) -> Interval {
        Interval::new(x, y, eps)
    }

    #[test]
    fn validate_sequence_accepts_increasing_timestamps() {
        let seq = vec![iv(0.0, 0.0, 0.1), iv(1.0, 1.0, 0.1), iv(3.0, 2.0, 0.2)];
        assert!(validate_sequence(&seq).is_ok());
        assert!(IntervalSequence::new(seq).is_ok());
    }

    #[test]
    fn validate_sequence_flags_equal_timestamps() {
        let seq = vec![iv(0.0, 0.0, 0.1), iv(0.0, 1.0, 0.1)];
        assert_eq!(
            validate_sequence(&seq),
            Err(CoreError::NonMonotoneTimestamps { index: 1 })
        );
    }

    #[test]
    fn validate_sequence_flags_negative_half_width() {
        let seq = vec![iv(0.0, 0.0, 0.1), iv(1.0, 1.0, -0.5)];
        assert_eq!(validate_sequence(&seq), Err(CoreError::NegativeHalfWidth { index: 1 }));
        let nan = vec![iv(0.0, 0.0, f64::NAN)];
        assert_eq!(validate_sequence(&nan), Err(CoreError::NegativeHalfWidth { index: 0 }));
    }

    #[test]
    fn config_rejects_bad_orders() {
        assert!(SplineConfig::new(3, 1).is_ok());
        assert!(SplineConfig::new(3, 2).is_ok());
        assert!(SplineConfig::new(3, 3).is_err());
        assert!(SplineConfig::new(2, 0).is_err());
        assert!(SplineConfig::new(9, 1).is_err());
        let cfg = SplineConfig::new(5, 2).unwrap();
        assert_eq!(cfg.coeff_count(), 6);
        assert_eq!(cfg.head_len(), 3);
        assert_eq!(cfg.tail_len(), 3);
    }

    #[test]
    fn action_checks_length() {
        let cfg = SplineConfig::new(3, 1).unwrap();
        assert!(Action::new(cfg, vec![0.0; 4]).is_ok());
        assert!(Action::new(cfg, vec![0.0; 3]).is_err());
    }

    #[test]
    fn rti_state_requires_future_interval() {
        let cfg = SplineConfig::new(3, 1).unwrap();
        let sigma = SignalState::new(cfg, 1.0, vec![0.0, 0.0]).unwrap();
        assert!(RtiState::new(iv(2.0, 0.0, 0.1), sigma.clone()).is_ok());
        assert!(RtiState::new(iv(1.0, 0.0, 0.1), sigma.clone()).is_err());
        assert!(RtiState::new(iv(0.5, 0.0, 0.1), sigma).is_err());
    }

    #[test]
    fn spline_validates_continuity_chain() {
        let cfg = SplineConfig::new(3, 1).unwrap();
        // Section 1: g(tau) = tau on (0, 1]; at the knot: value 1, slope 1.
        let s1 = Action::new(cfg, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let good = Action::new(cfg, vec![1.0, 1.0, -0.5, 0.0]).unwrap();
        let bad = Action::new(cfg, vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let e0 = vec![0.0, 1.0];
        assert!(Spline::new(cfg, vec![0.0, 1.0, 2.0], vec![s1.clone(), good], e0.clone()).is_ok());
        let err = Spline::new(cfg, vec![0.0, 1.0, 2.0], vec![s1, bad], e0).unwrap_err();
        match err {
            CoreError::BrokenContinuity { section: 1, order: 1, .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn spline_checks_shapes() {
        let cfg = SplineConfig::new(3, 1).unwrap();
        let s = Action::new(cfg, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            Spline::new(cfg, vec![0.0, 1.0, 1.0], vec![s.clone(), s.clone()], vec![0.0, 1.0]),
            Err(CoreError::NonIncreasingKnots { index: 2 })
        ));
        assert!(matches!(
            Spline::new(cfg, vec![0.0, 1.0], vec![s.clone(), s.clone()], vec![0.0, 1.0]),
            Err(CoreError::SectionCountMismatch { .. })
        ));
        assert!(matches!(
            Spline::new(cfg, vec![0.0, 1.0], vec![s], vec![0.0, 1.0, 0.0]),
            Err(CoreError::WrongStateDimension { .. })
        ));
    }
}
