//! Transformer thermal dynamics and insulation aging.
//!
//! Implements the IEEE C57.91 / IEC 60076-7 loading-guide model for
//! distribution transformers at hourly granularity: top-oil temperature as a
//! first-order recursion driven by the squared load ratio, hot-spot rise as a
//! power law of the load ratio, and the exponential aging acceleration factor
//! referenced to a 110 °C hot-spot temperature.
//!
//! Two representations coexist on purpose:
//!
//! * the **exact** model ([`top_oil_step_exact`], [`hot_spot_rise_exact`],
//!   [`aging_factor_exact`], [`simulate_exact`]) used for ex-post scoring of
//!   schedules, and
//! * an **affine** model ([`linearize`], [`PwlSegments`]) suitable for
//!   embedding in a convex optimization problem: the power-law terms are
//!   replaced by tangents at rated load and the aging curve by a piecewise
//!   linear overestimator.
//!
//! Keeping both lets the optimizer-facing approximation be audited against
//! the physical recursion ([`linearization_error_report`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reference hot-spot temperature (°C) at which insulation ages at rate 1.
pub const REFERENCE_HOT_SPOT_C: f64 = 110.0;

/// Default PWL breakpoints (°C) for the aging curve: one wide segment up to
/// the reference temperature, then 10 °C segments to 180 °C.
pub const DEFAULT_PWL_BREAKPOINTS: [f64; 9] =
    [0.0, 110.0, 120.0, 130.0, 140.0, 150.0, 160.0, 170.0, 180.0];

/// Hot-spot range (°C) over which the PWL overestimator is trusted; outside
/// it the max-of-affines extrapolates by its outermost segment.
pub const PWL_VALID_RANGE_C: (f64, f64) = (-30.0, 200.0);

#[derive(Debug, Error)]
pub enum ThermalError {
    #[error("piecewise linearization needs at least 2 breakpoints, got {0}")]
    TooFewBreakpoints(usize),
    #[error("breakpoints must be strictly increasing: {0} followed by {1}")]
    NonIncreasingBreakpoints(f64, f64),
    #[error("series length mismatch: current has {current} entries, ambient has {ambient}")]
    SeriesLength { current: usize, ambient: usize },
}

/// Nameplate thermal parameters of one transformer.
///
/// `rated_current_sq_pu` is the squared rated current on the system base, so
/// the squared load ratio is `l / rated_current_sq_pu` for a squared line
/// current `l` in pu².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    /// Squared rated current, pu² (system base).
    pub rated_current_sq_pu: f64,
    /// Ratio of load losses at rated load to no-load losses (R).
    pub loss_ratio: f64,
    /// Top-oil rise over ambient at rated load, °C.
    pub top_oil_rise_rated_c: f64,
    /// Hot-spot rise over top-oil at rated load, °C.
    pub hot_spot_rise_rated_c: f64,
    /// Top-oil time constant, hours.
    pub oil_time_constant_h: f64,
    /// Thermal model constant k11 (loading-guide recommended value 1.0).
    pub k11: f64,
    /// Oil exponent n (recommended 0.8).
    pub oil_exponent: f64,
    /// Winding exponent m (recommended 0.8).
    pub winding_exponent: f64,
    /// Cost per hour of insulation life consumed, $ per aging-hour.
    pub hourly_cost: f64,
}

impl TransformerParams {
    /// Parameters with the loading-guide recommended constants
    /// (k11 = 1, n = m = 0.8, tau = 3 h).
    pub fn with_recommended_constants(
        rated_current_sq_pu: f64,
        loss_ratio: f64,
        top_oil_rise_rated_c: f64,
        hot_spot_rise_rated_c: f64,
        hourly_cost: f64,
    ) -> Self {
        Self {
            rated_current_sq_pu,
            loss_ratio,
            top_oil_rise_rated_c,
            hot_spot_rise_rated_c,
            oil_time_constant_h: 3.0,
            k11: 1.0,
            oil_exponent: 0.8,
            winding_exponent: 0.8,
            hourly_cost,
        }
    }

    /// Squared load ratio K² for a squared current in pu².
    pub fn load_ratio_sq(&self, current_sq_pu: f64) -> f64 {
        current_sq_pu / self.rated_current_sq_pu
    }
}

/// Exact aging acceleration factor at a hot-spot temperature (°C).
///
/// Equals 1 at 110 °C and is strictly increasing and convex over any
/// physically meaningful range. Panics at or below absolute zero.
pub fn aging_factor_exact(hot_spot_c: f64) -> f64 {
    assert!(
        hot_spot_c > -273.0,
        "hot-spot temperature {hot_spot_c} °C is at or below absolute zero"
    );
    (15000.0 / 383.0 - 15000.0 / (hot_spot_c + 273.0)).exp()
}

/// Piecewise linear overestimator of the aging curve.
///
/// Each segment is the chord of [`aging_factor_exact`] over one breakpoint
/// interval. Because the exact curve is convex, the max-of-affines
/// `max_k (slope_k * theta - intercept_k)` dominates it everywhere inside
/// the breakpoint range and coincides with it at every breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlSegments {
    pub breakpoints: Vec<f64>,
    /// Chord slopes a_k, one per segment.
    pub slopes: Vec<f64>,
    /// Chord intercepts b_k; segment value is `a_k * theta - b_k`.
    pub intercepts: Vec<f64>,
}

impl PwlSegments {
    pub fn num_segments(&self) -> usize {
        self.slopes.len()
    }

    /// Max-of-affines evaluation. Outside the breakpoint range this
    /// extrapolates by the outermost segment.
    pub fn evaluate(&self, hot_spot_c: f64) -> f64 {
        self.slopes
            .iter()
            .zip(&self.intercepts)
            .map(|(a, b)| a * hot_spot_c - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Whether a temperature lies in the range where the overestimation
    /// property is guaranteed.
    pub fn covers(&self, hot_spot_c: f64) -> bool {
        hot_spot_c >= self.breakpoints[0] && hot_spot_c <= *self.breakpoints.last().unwrap()
    }
}

/// Builds chord segments of the exact aging curve over the given breakpoints.
pub fn build_pwl(breakpoints: &[f64]) -> Result<PwlSegments, ThermalError> {
    if breakpoints.len() < 2 {
        return Err(ThermalError::TooFewBreakpoints(breakpoints.len()));
    }
    for pair in breakpoints.windows(2) {
        if pair[1] <= pair[0] {
            return Err(ThermalError::NonIncreasingBreakpoints(pair[0], pair[1]));
        }
    }
    let mut slopes = Vec::with_capacity(breakpoints.len() - 1);
    let mut intercepts = Vec::with_capacity(breakpoints.len() - 1);
    for pair in breakpoints.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let (f_lo, f_hi) = (aging_factor_exact(lo), aging_factor_exact(hi));
        let slope = (f_hi - f_lo) / (hi - lo);
        slopes.push(slope);
        // Chord passes through (lo, f_lo): value = slope*theta - intercept.
        intercepts.push(slope * lo - f_lo);
    }
    Ok(PwlSegments {
        breakpoints: breakpoints.to_vec(),
        slopes,
        intercepts,
    })
}

/// Coefficients of the affine thermal model embedded in the optimization:
///
/// * epigraph rows `f >= alpha1_k * h + alpha2_k * l + beta_k` per segment,
/// * top-oil recursion `h_t = gamma1 * h_{t-1} + gamma2 * l_t + delta_t`.
///
/// `h` is the top-oil temperature (°C) and `l` the squared line current
/// (pu²); both power-law terms are replaced by their tangents at rated load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizedCoefficients {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Per-hour drive term, one per hour of the horizon.
    pub delta: Vec<f64>,
}

/// Assembles the affine model coefficients for one transformer.
///
/// `ambient_c` supplies one value per hour; `dt_h` is the step length.
pub fn linearize(
    params: &TransformerParams,
    pwl: &PwlSegments,
    ambient_c: &[f64],
    dt_h: f64,
) -> LinearizedCoefficients {
    assert!(dt_h > 0.0, "step length must be positive");
    let l_n = params.rated_current_sq_pu;
    let m = params.winding_exponent;
    let n = params.oil_exponent;
    let r = params.loss_ratio;
    let k_tau = params.k11 * params.oil_time_constant_h;

    let mut alpha1 = Vec::with_capacity(pwl.num_segments());
    let mut alpha2 = Vec::with_capacity(pwl.num_segments());
    let mut beta = Vec::with_capacity(pwl.num_segments());
    for (a, b) in pwl.slopes.iter().zip(&pwl.intercepts) {
        alpha1.push(*a);
        alpha2.push(a * params.hot_spot_rise_rated_c * m / l_n);
        beta.push(a * params.hot_spot_rise_rated_c * (1.0 - m) - b);
    }

    let gamma1 = k_tau / (k_tau + dt_h);
    let gamma2 = gamma1 * dt_h * params.top_oil_rise_rated_c * n * r / (k_tau * (1.0 + r) * l_n);
    let delta = ambient_c
        .iter()
        .map(|amb| {
            gamma1 * dt_h / k_tau
                * (params.top_oil_rise_rated_c * (1.0 + (1.0 - n) * r) / (1.0 + r) + amb)
        })
        .collect();

    LinearizedCoefficients {
        alpha1,
        alpha2,
        beta,
        gamma1,
        gamma2,
        delta,
    }
}

/// Steady-state bracket term `((1 + K² R) / (1 + R))^n`.
fn oil_drive(params: &TransformerParams, load_ratio_sq: f64) -> f64 {
    ((1.0 + load_ratio_sq * params.loss_ratio) / (1.0 + params.loss_ratio))
        .powf(params.oil_exponent)
}

/// One exact (non-linearized) step of the top-oil difference equation.
///
/// `load_ratio_sq` is K² during the step; returns the top-oil temperature at
/// the end of the step.
pub fn top_oil_step_exact(
    top_oil_prev_c: f64,
    load_ratio_sq: f64,
    ambient_c: f64,
    params: &TransformerParams,
    dt_h: f64,
) -> f64 {
    let k_tau = params.k11 * params.oil_time_constant_h;
    let gamma1 = k_tau / (k_tau + dt_h);
    gamma1 * top_oil_prev_c
        + (1.0 - gamma1) * (params.top_oil_rise_rated_c * oil_drive(params, load_ratio_sq) + ambient_c)
}

/// Steady-state top-oil temperature for a constant squared current (pu²),
/// used as the initial condition when the true history is unknown.
pub fn top_oil_initial(params: &TransformerParams, ambient0_c: f64, current_sq_pu: f64) -> f64 {
    ambient0_c
        + params.top_oil_rise_rated_c * oil_drive(params, params.load_ratio_sq(current_sq_pu))
}

/// Exact hot-spot rise over top-oil for a squared load ratio.
pub fn hot_spot_rise_exact(load_ratio_sq: f64, params: &TransformerParams) -> f64 {
    params.hot_spot_rise_rated_c * load_ratio_sq.powf(params.winding_exponent)
}

/// Thermal state of one transformer at the end of one hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalState {
    pub top_oil_c: f64,
    pub hot_spot_c: f64,
    pub aging_factor: f64,
}

/// Result of an exact thermal simulation over a horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThermalTrajectory {
    pub states: Vec<ThermalState>,
    /// Insulation life consumed over the horizon, in hours.
    pub loss_of_life_h: f64,
}

/// Runs the exact recursion hour by hour and integrates loss of life.
///
/// This is the ex-post oracle against which every scheduling option is
/// scored; it uses the full power-law terms and the exponential aging
/// factor, never the optimizer's affine approximation.
pub fn simulate_exact(
    params: &TransformerParams,
    current_sq_pu: &[f64],
    ambient_c: &[f64],
    initial_top_oil_c: f64,
    dt_h: f64,
) -> Result<ThermalTrajectory, ThermalError> {
    if current_sq_pu.len() != ambient_c.len() {
        return Err(ThermalError::SeriesLength {
            current: current_sq_pu.len(),
            ambient: ambient_c.len(),
        });
    }
    let mut states = Vec::with_capacity(current_sq_pu.len());
    let mut top_oil = initial_top_oil_c;
    let mut loss_of_life = 0.0;
    for (l, amb) in current_sq_pu.iter().zip(ambient_c) {
        let k_sq = params.load_ratio_sq(*l);
        top_oil = top_oil_step_exact(top_oil, k_sq, *amb, params, dt_h);
        let hot_spot = top_oil + hot_spot_rise_exact(k_sq, params);
        let aging = aging_factor_exact(hot_spot);
        loss_of_life += aging * dt_h;
        states.push(ThermalState {
            top_oil_c: top_oil,
            hot_spot_c: hot_spot,
            aging_factor: aging,
        });
    }
    Ok(ThermalTrajectory {
        states,
        loss_of_life_h: loss_of_life,
    })
}

/// The periodic initial top-oil temperature for a daily-cyclic current and
/// ambient series: the unique fixed point of "simulate one day, read the
/// final top-oil". Converges geometrically with ratio gamma1^T.
pub fn periodic_initial_top_oil(
    params: &TransformerParams,
    current_sq_pu: &[f64],
    ambient_c: &[f64],
    dt_h: f64,
) -> Result<f64, ThermalError> {
    let mut init = top_oil_initial(params, ambient_c[0], current_sq_pu[0]);
    for _ in 0..64 {
        let traj = simulate_exact(params, current_sq_pu, ambient_c, init, dt_h)?;
        let end = traj.states.last().map(|s| s.top_oil_c).unwrap_or(init);
        if (end - init).abs() < 1e-12 {
            return Ok(end);
        }
        init = end;
    }
    Ok(init)
}

/// Approximation-quality report for the affine thermal model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearizationErrorReport {
    /// Max |exact - affine| of the top-oil drive term, °C.
    pub max_oil_drive_error_c: f64,
    pub mean_oil_drive_error_c: f64,
    /// Max |exact - affine| of the hot-spot rise term, °C.
    pub max_hot_spot_rise_error_c: f64,
    pub mean_hot_spot_rise_error_c: f64,
    /// Max and mean |PWL - exact| aging factor over the sampled hot spots.
    pub max_aging_error: f64,
    pub mean_aging_error: f64,
    /// Sample points that fell outside the PWL's guaranteed range.
    pub out_of_range_samples: usize,
}

/// Evaluates the affine-model error on a grid of (squared current, top-oil)
/// points. Both Taylor tangents are exact at rated current; the PWL error is
/// nonnegative inside its range because chords of a convex function
/// overestimate.
pub fn linearization_error_report(
    params: &TransformerParams,
    pwl: &PwlSegments,
    current_sq_grid: &[f64],
    top_oil_grid_c: &[f64],
) -> LinearizationErrorReport {
    let l_n = params.rated_current_sq_pu;
    let n = params.oil_exponent;
    let r = params.loss_ratio;
    let m = params.winding_exponent;

    let mut oil_sum = 0.0;
    let mut oil_max = 0.0f64;
    let mut rise_sum = 0.0;
    let mut rise_max = 0.0f64;
    let mut aging_sum = 0.0;
    let mut aging_max = 0.0f64;
    let mut out_of_range = 0usize;
    let mut count = 0usize;

    for &l in current_sq_grid {
        let k_sq = l / l_n;
        let oil_exact = params.top_oil_rise_rated_c * oil_drive(params, k_sq);
        let oil_affine = params.top_oil_rise_rated_c / (1.0 + r)
            * (n * r / l_n * l + 1.0 + (1.0 - n) * r);
        let oil_err = (oil_exact - oil_affine).abs();
        oil_sum += oil_err;
        oil_max = oil_max.max(oil_err);

        let rise_exact = hot_spot_rise_exact(k_sq, params);
        let rise_affine = params.hot_spot_rise_rated_c * (m / l_n * l + 1.0 - m);
        let rise_err = (rise_exact - rise_affine).abs();
        rise_sum += rise_err;
        rise_max = rise_max.max(rise_err);

        for &h in top_oil_grid_c {
            let hot_spot = h + rise_exact;
            if !pwl.covers(hot_spot) {
                out_of_range += 1;
            }
            let err = (pwl.evaluate(hot_spot) - aging_factor_exact(hot_spot)).abs();
            aging_sum += err;
            aging_max = aging_max.max(err);
            count += 1;
        }
    }

    let grid_len = current_sq_grid.len().max(1) as f64;
    LinearizationErrorReport {
        max_oil_drive_error_c: oil_max,
        mean_oil_drive_error_c: oil_sum / grid_len,
        max_hot_spot_rise_error_c: rise_max,
        mean_hot_spot_rise_error_c: rise_sum / grid_len,
        max_aging_error: aging_max,
        mean_aging_error: aging_sum / count.max(1) as f64,
        out_of_range_samples: out_of_range,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pilot_params() -> TransformerParams {
        // 30 kVA service transformer on a 1000 kVA base.
        TransformerParams::with_recommended_constants(9.0e-4, 5.0, 55.0, 25.0, 0.011)
    }

    #[test]
    fn aging_factor_reference_values() {
        // Direct scalar evaluations of exp(15000/383 - 15000/(theta+273)).
        assert_eq!(aging_factor_exact(110.0), 1.0);
        assert!((aging_factor_exact(120.0) - 2.7089251438281656).abs() < 1e-12);
        assert!((aging_factor_exact(98.0) - 0.2817384883020515).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "absolute zero")]
    fn aging_factor_rejects_absolute_zero() {
        aging_factor_exact(-273.0);
    }

    #[test]
    fn pwl_default_has_eight_chord_segments() {
        let pwl = build_pwl(&DEFAULT_PWL_BREAKPOINTS).unwrap();
        assert_eq!(pwl.num_segments(), 8);
        // Chord over [110, 120]: slope (F(120)-F(110))/10 through (110, 1).
        assert!((pwl.slopes[1] - 0.17089251438281655).abs() < 1e-12);
        assert!((pwl.slopes[1] * 110.0 - pwl.intercepts[1] - 1.0).abs() < 1e-12);
        // Chords interpolate at every breakpoint.
        for bp in DEFAULT_PWL_BREAKPOINTS {
            assert!((pwl.evaluate(bp) - aging_factor_exact(bp)).abs() < 1e-12);
        }
    }

    #[test]
    fn pwl_rejects_bad_breakpoints() {
        assert!(matches!(
            build_pwl(&[100.0]),
            Err(ThermalError::TooFewBreakpoints(1))
        ));
        assert!(matches!(
            build_pwl(&[100.0, 100.0]),
            Err(ThermalError::NonIncreasingBreakpoints(_, _))
        ));
    }

    #[test]
    fn pwl_overestimates_convex_curve() {
        let pwl = build_pwl(&DEFAULT_PWL_BREAKPOINTS).unwrap();
        for i in 0..=10_000 {
            let theta = 180.0 * i as f64 / 10_000.0;
            assert!(
                pwl.evaluate(theta) >= aging_factor_exact(theta) - 1e-12,
                "underestimate at {theta}"
            );
        }
    }

    #[test]
    fn linearized_coefficients_match_formulas() {
        let params = pilot_params();
        let pwl = build_pwl(&DEFAULT_PWL_BREAKPOINTS).unwrap();
        let ambient = vec![30.0; 24];
        let lin = linearize(&params, &pwl, &ambient, 1.0);

        // k11 = 1, tau = 3, Dt = 1 -> gamma1 = 3/4.
        assert!((lin.gamma1 - 0.75).abs() < 1e-15);
        // gamma2 = gamma1 * Dt * dThTO * n * R / (k11 tau (1+R) lN).
        let expected_gamma2 = 0.75 * 55.0 * 0.8 * 5.0 / (3.0 * 6.0) / 9.0e-4;
        assert!((lin.gamma2 - expected_gamma2).abs() / expected_gamma2 < 1e-14);
        for (k, a) in pwl.slopes.iter().enumerate() {
            assert_eq!(lin.alpha1[k], *a);
            assert!((lin.alpha2[k] - a * 25.0 * 0.8 / 9.0e-4).abs() < 1e-9 * lin.alpha2[k].abs());
            let expected_beta = a * 25.0 * 0.2 - pwl.intercepts[k];
            assert!((lin.beta[k] - expected_beta).abs() < 1e-12);
        }
        // Zero-slope segment degenerates to a constant row.
        let flat = PwlSegments {
            breakpoints: vec![0.0, 1.0],
            slopes: vec![0.0],
            intercepts: vec![2.5],
        };
        let lin0 = linearize(&params, &flat, &ambient, 1.0);
        assert_eq!(lin0.alpha1[0], 0.0);
        assert_eq!(lin0.alpha2[0], 0.0);
        assert_eq!(lin0.beta[0], -2.5);
    }

    #[test]
    fn recursion_and_linearized_recursion_are_same_affine_map() {
        // Replacing the bracket by its tangent and substituting into the
        // exact step must reproduce gamma/delta exactly.
        let params = pilot_params();
        let pwl = build_pwl(&DEFAULT_PWL_BREAKPOINTS).unwrap();
        let ambient = [27.0, 31.5, 18.0];
        let lin = linearize(&params, &pwl, &ambient, 1.0);
        let l_n = params.rated_current_sq_pu;
        for (t, amb) in ambient.iter().enumerate() {
            for l in [0.0, 0.4 * l_n, l_n, 1.7 * l_n] {
                let h_prev = 61.0;
                let bracket_affine = (params.oil_exponent * params.loss_ratio
                    / ((1.0 + params.loss_ratio) * l_n))
                    * l
                    + (1.0 + (1.0 - params.oil_exponent) * params.loss_ratio)
                        / (1.0 + params.loss_ratio);
                let gamma1 = 0.75;
                let step_taylor = gamma1 * h_prev
                    + (1.0 - gamma1) * (params.top_oil_rise_rated_c * bracket_affine + amb);
                let step_coeffs = lin.gamma1 * h_prev + lin.gamma2 * l + lin.delta[t];
                assert!((step_taylor - step_coeffs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_oil_step_fixed_points() {
        let params = pilot_params();
        // Rated load, 30 °C ambient: steady state at 85 °C stays put.
        let next = top_oil_step_exact(85.0, 1.0, 30.0, &params, 1.0);
        assert!((next - 85.0).abs() < 1e-12);
        // Zero load converges to ambient + 55 * (1/6)^0.8.
        let mut theta = 85.0;
        for _ in 0..400 {
            theta = top_oil_step_exact(theta, 0.0, 30.0, &params, 1.0);
        }
        assert!((theta - 43.11721657679817).abs() < 1e-9);
        // Single step from 85 °C with K² = 1.2.
        let stepped = top_oil_step_exact(85.0, 1.2, 30.0, &params, 1.0);
        assert!((stepped - 86.80464593528325).abs() < 1e-12);
    }

    #[test]
    fn initial_condition_matches_fixed_point() {
        let params = pilot_params();
        assert!((top_oil_initial(&params, 30.0, 9.0e-4) - 85.0).abs() < 1e-12);
        assert!((top_oil_initial(&params, 30.0, 0.0) - 43.11721657679817).abs() < 1e-12);
        // Constant-input recursion converges to the same value.
        let init = top_oil_initial(&params, 22.0, 0.5 * 9.0e-4);
        let next = top_oil_step_exact(init, 0.5, 22.0, &params, 1.0);
        assert!((next - init).abs() < 1e-9);
    }

    #[test]
    fn hot_spot_rise_values() {
        let params = pilot_params();
        assert_eq!(hot_spot_rise_exact(1.0, &params), 25.0);
        assert_eq!(hot_spot_rise_exact(0.0, &params), 0.0);
        assert!((hot_spot_rise_exact(2.0, &params) - 43.527528164806206).abs() < 1e-12);
    }

    #[test]
    fn simulation_at_rated_load_consumes_life_at_unit_rate() {
        let params = pilot_params();
        let current = vec![9.0e-4; 24];
        let ambient = vec![30.0; 24];
        let traj = simulate_exact(&params, &current, &ambient, 85.0, 1.0).unwrap();
        for s in &traj.states {
            assert!((s.hot_spot_c - 110.0).abs() < 1e-12);
            assert!((s.aging_factor - 1.0).abs() < 1e-12);
        }
        assert!((traj.loss_of_life_h - 24.0).abs() < 1e-9);
    }

    #[test]
    fn simulation_at_zero_load() {
        let params = pilot_params();
        let current = vec![0.0; 24];
        let ambient = vec![30.0; 24];
        let init = top_oil_initial(&params, 30.0, 0.0);
        let traj = simulate_exact(&params, &current, &ambient, init, 1.0).unwrap();
        let theta = 43.11721657679817;
        for s in &traj.states {
            assert!((s.hot_spot_c - theta).abs() < 1e-9);
        }
        // 24 * F(43.117...) computed directly from the exponential.
        assert!((traj.loss_of_life_h - 0.00604690670811657).abs() < 1e-12);
    }

    #[test]
    fn step_load_tracks_ode_solution() {
        // Half load to rated load at hour 12; the backward-Euler recursion
        // must stay close to the continuous first-order response.
        let params = pilot_params();
        let l_n = params.rated_current_sq_pu;
        let mut current = vec![0.5 * l_n; 12];
        current.extend(vec![l_n; 12]);
        let ambient = vec![30.0; 24];
        let init = top_oil_initial(&params, 30.0, 0.5 * l_n);
        let traj = simulate_exact(&params, &current, &ambient, init, 1.0).unwrap();

        let theta_half = init; // 65.735...
        let steady = 85.0;
        let tau = 3.0;
        let mut max_dev = 0.0f64;
        for (t, s) in traj.states.iter().enumerate() {
            let analytic = if t < 12 {
                theta_half
            } else {
                let hours_since_step = (t - 12 + 1) as f64;
                steady + (theta_half - steady) * (-hours_since_step / tau).exp()
            };
            max_dev = max_dev.max((s.top_oil_c - analytic).abs());
        }
        assert!(max_dev < 1.5, "max deviation {max_dev} °C");
        // The frozen analytic bound for this step size.
        assert!((max_dev - 1.0402140522571557).abs() < 1e-9);
    }

    #[test]
    fn simulation_rejects_mismatched_series() {
        let params = pilot_params();
        assert!(matches!(
            simulate_exact(&params, &[0.0; 3], &[30.0; 4], 50.0, 1.0),
            Err(ThermalError::SeriesLength { .. })
        ));
    }

    #[test]
    fn periodic_initial_condition_is_a_fixed_point() {
        let params = pilot_params();
        let l_n = params.rated_current_sq_pu;
        let current: Vec<f64> = (0..24)
            .map(|t| l_n * (0.3 + 0.5 * ((t as f64) * std::f64::consts::PI / 12.0).sin().abs()))
            .collect();
        let ambient: Vec<f64> = (0..24).map(|t| 22.0 + 8.0 * (t as f64 / 24.0)).collect();
        let init = periodic_initial_top_oil(&params, &current, &ambient, 1.0).unwrap();
        let traj = simulate_exact(&params, &current, &ambient, init, 1.0).unwrap();
        assert!((traj.states.last().unwrap().top_oil_c - init).abs() < 1e-9);
    }

    #[test]
    fn error_report_zero_at_rated_and_known_at_zero_load() {
        let params = pilot_params();
        let pwl = build_pwl(&DEFAULT_PWL_BREAKPOINTS).unwrap();
        let l_n = params.rated_current_sq_pu;

        let at_rated = linearization_error_report(&params, &pwl, &[l_n], &[60.0]);
        assert!(at_rated.max_oil_drive_error_c < 1e-12);
        assert!(at_rated.max_hot_spot_rise_error_c < 1e-12);

        // At l = 0 the tangent keeps the (1-m) term: error = 0.2 * 25 = 5 °C.
        let at_zero = linearization_error_report(&params, &pwl, &[0.0], &[60.0]);
        assert!((at_zero.max_hot_spot_rise_error_c - 5.0).abs() < 1e-12);

        // PWL overestimates strictly between breakpoints.
        let mid = pwl.evaluate(115.0) - aging_factor_exact(115.0);
        assert!(mid > 0.0);
    }

    proptest! {
        #[test]
        fn aging_factor_strictly_increasing(a in -100.0..300.0f64, gap in 1e-6..50.0f64) {
            prop_assert!(aging_factor_exact(a + gap) > aging_factor_exact(a));
        }

        #[test]
        fn loss_of_life_monotone_in_current(
            base in proptest::collection::vec(0.0..1.5e-3f64, 24),
            bump_at in 0usize..24,
            bump in 0.0..1e-3f64,
        ) {
            let params = pilot_params();
            let ambient = vec![25.0; 24];
            let init = top_oil_initial(&params, 25.0, base[0]);
            let lo = simulate_exact(&params, &base, &ambient, init, 1.0).unwrap();
            let mut hi_series = base.clone();
            hi_series[bump_at] += bump;
            let hi = simulate_exact(&params, &hi_series, &ambient, init, 1.0).unwrap();
            prop_assert!(hi.loss_of_life_h >= lo.loss_of_life_h - 1e-12);
        }

        #[test]
        fn constant_input_converges_geometrically(
            start in -20.0..150.0f64,
            k_sq in 0.0..2.0f64,
            amb in -10.0..40.0f64,
        ) {
            let params = pilot_params();
            let target = top_oil_initial(&params, amb, k_sq * params.rated_current_sq_pu);
            let mut theta = start;
            let mut prev_gap = (theta - target).abs();
            for _ in 0..8 {
                theta = top_oil_step_exact(theta, k_sq, amb, &params, 1.0);
                let gap = (theta - target).abs();
                prop_assert!(gap <= 0.75 * prev_gap + 1e-12);
                prev_gap = gap;
            }
        }
    }
}
