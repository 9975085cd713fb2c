//! Adaptive Dormand–Prince 5(4) integration with cubic Hermite dense output.
//!
//! Integration in either time direction runs through one forward code path:
//! for `t_end < t_start` the right-hand side is reversed in time, so the
//! stepper always advances a positive pseudo-time `σ` with `t = t_start - σ`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on evaluating a trajectory slightly outside its span.
pub const SPAN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    pub min_step: f64,
    pub max_num_steps: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            abs_tol: 1e-6,
            rel_tol: 1e-6,
            max_step: 0.1,
            min_step: 1e-12,
            max_num_steps: 1_000_000,
        }
    }
}

impl IntegratorSettings {
    pub fn with_tolerances(mut self, abs_tol: f64, rel_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self.rel_tol = rel_tol;
        self
    }

    pub fn with_max_step(mut self, max_step: f64) -> Self {
        self.max_step = max_step;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.abs_tol > 0.0
            && self.rel_tol > 0.0
            && self.max_step > 0.0
            && self.min_step > 0.0
            && self.max_num_steps > 0;
        if !positive || self.min_step > self.max_step {
            return Err(Error::InvalidSettings(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// Ordered integration nodes with an interpolant between them.
///
/// With node derivatives present the interpolant is the cubic Hermite
/// spline through (value, derivative) pairs; without them it is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTrajectory {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
    derivatives: Option<Vec<DVector<f64>>>,
    direction: Direction,
}

impl DenseTrajectory {
    pub fn new(
        times: Vec<f64>,
        values: Vec<DVector<f64>>,
        derivatives: Option<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} times for {} values",
                times.len(),
                values.len()
            )));
        }
        if let Some(d) = &derivatives {
            if d.len() != times.len() {
                return Err(Error::DimensionMismatch("derivative count".into()));
            }
        }
        let direction = if times.len() > 1 && times[1] < times[0] {
            Direction::Backward
        } else {
            Direction::Forward
        };
        let s = direction.sign();
        if times.windows(2).any(|w| (w[1] - w[0]) * s <= 0.0) {
            return Err(Error::InvalidSchedule(
                "node times must be strictly monotone".into(),
            ));
        }
        Ok(Self {
            times,
            values,
            derivatives,
            direction,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn derivatives(&self) -> Option<&[DVector<f64>]> {
        self.derivatives.as_deref()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn interpolation_order(&self) -> usize {
        if self.derivatives.is_some() {
            3
        } else {
            1
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        self.values.last().unwrap()
    }

    fn span(&self) -> (f64, f64) {
        let (a, b) = (self.start_time(), self.end_time());
        (a.min(b), a.max(b))
    }

    /// Index `k` of the interval `[times[k], times[k+1]]` holding `t`, or
    /// `Err` outside the span. The caller guarantees `len() > 1`.
    fn bracket(&self, t: f64) -> usize {
        let s = self.direction.sign();
        // partition_point over the direction-normalized times
        let k = self.times.partition_point(|&tk| (tk - t) * s <= 0.0);
        k.clamp(1, self.times.len() - 1) - 1
    }

    pub fn interpolate(&self, t: f64) -> Result<DVector<f64>> {
        let (lo, hi) = self.span();
        if t < lo - SPAN_EPS || t > hi + SPAN_EPS || !t.is_finite() {
            return Err(Error::OutOfSpan { t, start: lo, end: hi });
        }
        if self.times.len() == 1 {
            return Ok(self.values[0].clone());
        }
        let k = self.bracket(t);
        let (ta, tb) = (self.times[k], self.times[k + 1]);
        if t == ta {
            return Ok(self.values[k].clone());
        }
        if t == tb {
            return Ok(self.values[k + 1].clone());
        }
        let h = tb - ta;
        let s = ((t - ta) / h).clamp(0.0, 1.0);
        let (ya, yb) = (&self.values[k], &self.values[k + 1]);
        match &self.derivatives {
            Some(d) => {
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                Ok(ya * h00 + &d[k] * (h10 * h) + yb * h01 + &d[k + 1] * (h11 * h))
            }
            None => Ok(ya * (1.0 - s) + yb * s),
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// PI step-size control constants.
const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn error_norm(
    err: &DVector<f64>,
    y: &DVector<f64>,
    y_new: &DVector<f64>,
    settings: &IntegratorSettings,
) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(y.iter().zip(y_new.iter()))
        .map(|(e, (a, b))| {
            let sc = settings.abs_tol + settings.rel_tol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

/// Integrates `dy/dt = rhs(t, y)` from `t_start` to `t_end` (either direction).
pub fn integrate_adaptive<F>(
    rhs: F,
    t_start: f64,
    t_end: f64,
    y0: &DVector<f64>,
    settings: &IntegratorSettings,
) -> Result<DenseTrajectory>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    integrate_adaptive_with_stops(rhs, t_start, t_end, y0, &[], settings, |_, _| Ok(()))
}

/// Like [`integrate_adaptive`], but every time in `stops` that lies strictly
/// inside the interval becomes a node, and `on_step` sees each accepted node
/// (returning an error aborts the integration).
///
/// Steps never straddle a stop, so right-hand sides that are only piecewise
/// smooth between the stops are integrated at full order.
pub fn integrate_adaptive_with_stops<F, O>(
    mut rhs: F,
    t_start: f64,
    t_end: f64,
    y0: &DVector<f64>,
    stops: &[f64],
    settings: &IntegratorSettings,
    mut on_step: O,
) -> Result<DenseTrajectory>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    O: FnMut(f64, &DVector<f64>) -> Result<()>,
{
    settings.validate()?;
    if t_start == t_end || !t_start.is_finite() || !t_end.is_finite() {
        return Err(Error::InvalidSettings(format!(
            "degenerate interval [{t_start}, {t_end}]"
        )));
    }
    let direction = if t_end > t_start {
        Direction::Forward
    } else {
        Direction::Backward
    };
    let sign = direction.sign();
    let length = (t_end - t_start).abs();
    let to_t = |sigma: f64| t_start + sign * sigma;

    // Pseudo-time breakpoints, ending with the interval end.
    let min_gap = 1e-12 * length.max(1.0);
    let mut breaks: Vec<(f64, f64)> = stops
        .iter()
        .map(|&s| ((s - t_start) * sign, s))
        .filter(|&(s, _)| s > min_gap && s < length - min_gap)
        .collect();
    breaks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    breaks.dedup_by(|a, b| (a.0 - b.0).abs() <= min_gap);
    breaks.push((length, t_end));

    let mut f = |sigma: f64, y: &DVector<f64>| -> DVector<f64> {
        let mut d = rhs(to_t(sigma), y);
        if sign < 0.0 {
            d.neg_mut();
        }
        d
    };

    let mut y = y0.clone();
    let mut k1 = f(0.0, &y);
    if !all_finite(&y) || !all_finite(&k1) {
        return Err(Error::NonFiniteRhs { t: t_start });
    }
    on_step(t_start, &y)?;

    let mut times = vec![t_start];
    let mut values = vec![y.clone()];
    let mut derivs = vec![&k1 * sign];

    let mut sigma = 0.0;
    let mut h = initial_step(&mut f, &y, &k1, breaks[0].0, settings);
    let mut fac_old: f64 = 1e-4;
    let mut steps = 0usize;

    for &(target, t_target) in &breaks {
        while sigma < target {
            if steps >= settings.max_num_steps {
                return Err(Error::MaxStepsExceeded(settings.max_num_steps));
            }
            let remaining = target - sigma;
            let proposed = h;
            let mut landing = false;
            if h * 1.01 >= remaining {
                h = remaining;
                landing = true;
            }
            let y2 = &y + &k1 * (h * A21);
            let k2 = f(sigma + C2 * h, &y2);
            let y3 = &y + (&k1 * A31 + &k2 * A32) * h;
            let k3 = f(sigma + C3 * h, &y3);
            let y4 = &y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h;
            let k4 = f(sigma + C4 * h, &y4);
            let y5 = &y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h;
            let k5 = f(sigma + C5 * h, &y5);
            let y6 = &y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h;
            let k6 = f(sigma + h, &y6);
            let y_new = &y + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
            let k7 = f(sigma + h, &y_new);
            steps += 1;

            if !all_finite(&y_new) || !all_finite(&k7) {
                h *= 0.1;
                if h < settings.min_step {
                    return Err(Error::NonFiniteRhs { t: to_t(sigma) });
                }
                continue;
            }

            let err_vec = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
            let err = error_norm(&err_vec, &y, &y_new, settings);
            let fac11 = err.max(1e-300).powf(EXPO1);
            if err <= 1.0 {
                let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                fac_old = err.max(1e-4);
                sigma = if landing { target } else { sigma + h };
                y = y_new;
                k1 = k7;
                let t = if landing { t_target } else { to_t(sigma) };
                on_step(t, &y)?;
                times.push(t);
                values.push(y.clone());
                derivs.push(&k1 * sign);
                let mut next = h / fac;
                if landing {
                    next = next.max(proposed);
                }
                h = next.min(settings.max_step);
            } else {
                let shrink = (fac11 / SAFETY).min(1.0 / FAC_MIN);
                h /= shrink;
                if h < settings.min_step {
                    return Err(Error::StepSizeUnderflow {
                        t: to_t(sigma),
                        step: h,
                    });
                }
            }
        }
    }

    DenseTrajectory::new(times, values, Some(derivs))
}

fn initial_step<F>(
    f: &mut F,
    y0: &DVector<f64>,
    f0: &DVector<f64>,
    first_break: f64,
    settings: &IntegratorSettings,
) -> f64
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let scale = |v: &DVector<f64>| -> f64 {
        let n = v.len().max(1) as f64;
        let s: f64 = v
            .iter()
            .zip(y0.iter())
            .map(|(a, y)| (a / (settings.abs_tol + settings.rel_tol * y.abs())).powi(2))
            .sum();
        (s / n).sqrt()
    };
    let d0 = scale(y0);
    let d1 = scale(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(settings.max_step).min(first_break);
    let y1 = y0 + f0 * h0;
    let f1 = f(h0, &y1);
    let d2 = scale(&(&f1 - f0)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0)
        .min(h1)
        .min(settings.max_step)
        .max(settings.min_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dvector, DMatrix};

    fn settings(tol: f64) -> IntegratorSettings {
        IntegratorSettings::default().with_tolerances(tol, tol)
    }

    #[test]
    fn zero_dynamics_is_constant() {
        let c = dvector![1.5, -2.0];
        let traj =
            integrate_adaptive(|_, y| DVector::zeros(y.len()), 0.0, 3.0, &c, &settings(1e-6))
                .unwrap();
        assert!(traj.values().iter().all(|v| v == &c));
        assert_eq!(traj.interpolate(1.234).unwrap(), c);
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        for tol in [1e-4, 1e-6, 1e-8] {
            let traj = integrate_adaptive(|_, y| -y, 0.0, 1.0, &dvector![1.0], &settings(tol))
                .unwrap();
            let err = (traj.last()[0] - (-1.0f64).exp()).abs();
            assert!(err <= 10.0 * tol, "tol {tol}: err {err}");
            assert_eq!(traj.end_time(), 1.0);
        }
    }

    #[test]
    fn backward_rotation_matches_matrix_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let y1 = dvector![0.3, -0.7];
        let traj = integrate_adaptive(|_, y| &a * y, 1.0, 0.0, &y1, &settings(1e-9)).unwrap();
        assert_eq!(traj.direction(), Direction::Backward);
        let expected = (-&a).exp() * &y1;
        assert!((traj.last() - expected).amax() < 1e-8);
    }

    #[test]
    fn endpoints_are_nodes() {
        let traj =
            integrate_adaptive(|t, _| dvector![t.cos()], 0.5, 2.0, &dvector![0.0], &settings(1e-6))
                .unwrap();
        assert_eq!(traj.start_time(), 0.5);
        assert_eq!(traj.end_time(), 2.0);
    }

    #[test]
    fn nodes_are_reproduced_exactly() {
        let traj =
            integrate_adaptive(|t, y| dvector![t.sin() - y[0]], 0.0, 2.0, &dvector![1.0], &settings(1e-7))
                .unwrap();
        for (t, v) in traj.times().iter().zip(traj.values()) {
            assert_eq!(&traj.interpolate(*t).unwrap(), v);
        }
    }

    #[test]
    fn linear_state_midpoint_is_mean() {
        let traj =
            integrate_adaptive(|_, _| dvector![2.0], 0.0, 1.0, &dvector![1.0], &settings(1e-6))
                .unwrap();
        let t = traj.times();
        let mid = 0.5 * (t[0] + t[1]);
        let expected = 0.5 * (traj.values()[0][0] + traj.values()[1][0]);
        assert!((traj.interpolate(mid).unwrap()[0] - expected).abs() < 1e-12);

        let linear = DenseTrajectory::new(vec![0.0, 2.0], vec![dvector![1.0], dvector![3.0]], None)
            .unwrap();
        assert!((linear.interpolate(1.0).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_span_is_rejected() {
        let traj =
            integrate_adaptive(|_, y| -y, 0.0, 1.0, &dvector![1.0], &settings(1e-6)).unwrap();
        assert!(traj.interpolate(1.0 + 5e-10).is_ok());
        assert!(matches!(traj.interpolate(1.01), Err(Error::OutOfSpan { .. })));
        assert!(matches!(traj.interpolate(-0.01), Err(Error::OutOfSpan { .. })));
    }

    #[test]
    fn non_finite_rhs_is_reported() {
        let r = integrate_adaptive(|_, _| dvector![f64::NAN], 0.0, 1.0, &dvector![1.0], &settings(1e-6));
        assert!(matches!(r, Err(Error::NonFiniteRhs { .. })));
    }

    #[test]
    fn finite_time_blowup_underflows_or_fails() {
        // y' = y^2 blows up at t = 1.
        let r = integrate_adaptive(|_, y| dvector![y[0] * y[0]], 0.0, 2.0, &dvector![1.0], &settings(1e-8));
        assert!(r.is_err());
    }

    #[test]
    fn max_steps_is_enforced() {
        let mut s = settings(1e-10);
        s.max_num_steps = 5;
        let r = integrate_adaptive(|t, _| dvector![(50.0 * t).sin()], 0.0, 10.0, &dvector![0.0], &s);
        assert!(matches!(r, Err(Error::MaxStepsExceeded(5))));
    }

    #[test]
    fn stops_become_nodes() {
        let stops = [0.25, 0.5, 0.75, 3.0];
        let traj = integrate_adaptive_with_stops(
            |_, y| -y,
            0.0,
            1.0,
            &dvector![1.0],
            &stops,
            &settings(1e-6),
            |_, _| Ok(()),
        )
        .unwrap();
        for s in &stops[..3] {
            assert!(traj.times().contains(s));
        }
    }

    #[test]
    fn halving_tolerances_never_hurts() {
        // The step cap is lifted so the tolerances alone govern accuracy.
        let mut prev = f64::INFINITY;
        let mut tol = 1e-5;
        while tol > 1e-11 {
            let s = settings(tol).with_max_step(10.0);
            let traj = integrate_adaptive(|_, y| -y, 0.0, 1.0, &dvector![1.0], &s).unwrap();
            let err = (traj.last()[0] - (-1.0f64).exp()).abs();
            assert!(err <= prev * 1.0000001 + 1e-15, "tol {tol}: {err} > {prev}");
            prev = err;
            tol *= 0.5;
        }
    }

    #[test]
    fn backward_then_forward_returns_home() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, -1.0, -0.2]);
        let y0 = dvector![1.0, 2.0];
        let tol = 1e-8;
        let back = integrate_adaptive(|_, y| &a * y, 1.0, 0.0, &y0, &settings(tol)).unwrap();
        let fwd = integrate_adaptive(|_, y| &a * y, 0.0, 1.0, back.last(), &settings(tol)).unwrap();
        assert!((fwd.last() - &y0).amax() < 100.0 * tol);
    }

    #[test]
    fn smooth_problem_uses_fewer_nodes_than_fixed_grid() {
        let traj =
            integrate_adaptive(|_, y| -y, 0.0, 1.0, &dvector![1.0], &settings(1e-6)).unwrap();
        assert!(traj.len() < 1000);
    }

    #[test]
    fn settings_validation() {
        let mut s = IntegratorSettings::default();
        assert!(s.validate().is_ok());
        s.min_step = 1.0;
        s.max_step = 0.5;
        assert!(s.validate().is_err());
        let bad = IntegratorSettings {
            abs_tol: 0.0,
            ..Default::default()
        };
        assert!(integrate_adaptive(|_, y| -y, 0.0, 1.0, &dvector![1.0], &bad).is_err());
    }
}
