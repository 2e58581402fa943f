//! Bandwidth-separation reductions.
//!
//! Each [`Ordering`] replaces the fast loops by their algebraic equilibrium and
//! keeps a two-state slow model: `(i_d, dv2)` when the DVC is slowest and
//! `(δ, x_int,pll)` when the PLL is slowest. Grid resistance is neglected in
//! every reduced model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::model::{rhs_full, FullState};
use crate::ode::{integrate_plain, OdeOptions};
use crate::params::{BandwidthSpec, SystemParams};
use crate::scalar::{c, Scalar};

/// Minimal `cos δ` for the fast-DVC map.
pub const COS_DELTA_TOLERANCE: f64 = 1e-6;
/// Minimal `λ(δ)` for the slow-PLL dynamics.
pub const LAMBDA_TOLERANCE: f64 = 1e-9;
/// Default bandwidth ratio above which a reduction is trusted.
pub const SEPARATION_THRESHOLD: f64 = 7.0;

/// Which loops are treated as fast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    /// PLL fast, DVC slow, TVC disabled.
    PllFastDvcSlow,
    /// DVC fast, PLL slow, TVC disabled.
    DvcFastPllSlow,
    /// PLL and TVC fast, DVC slow.
    PllTvcFastDvcSlow,
    /// TVC and DVC fast, PLL slow.
    TvcDvcFastPllSlow,
}

/// Which loop carries the two slow states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlowLoop {
    Dvc,
    Pll,
}

impl Ordering {
    pub const ALL: [Ordering; 4] = [
        Ordering::PllFastDvcSlow,
        Ordering::DvcFastPllSlow,
        Ordering::PllTvcFastDvcSlow,
        Ordering::TvcDvcFastPllSlow,
    ];

    pub fn slow_loop(self) -> SlowLoop {
        match self {
            Ordering::PllFastDvcSlow | Ordering::PllTvcFastDvcSlow => SlowLoop::Dvc,
            Ordering::DvcFastPllSlow | Ordering::TvcDvcFastPllSlow => SlowLoop::Pll,
        }
    }

    pub fn uses_tvc(self) -> bool {
        matches!(self, Ordering::PllTvcFastDvcSlow | Ordering::TvcDvcFastPllSlow)
    }

    /// Names of the two slow coordinates.
    pub fn labels(self) -> [&'static str; 2] {
        match self.slow_loop() {
            SlowLoop::Dvc => ["i_d", "dv2"],
            SlowLoop::Pll => ["delta", "x_int_pll"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ordering::PllFastDvcSlow => "pll-fast-dvc-slow",
            Ordering::DvcFastPllSlow => "dvc-fast-pll-slow",
            Ordering::PllTvcFastDvcSlow => "pll-tvc-fast-dvc-slow",
            Ordering::TvcDvcFastPllSlow => "tvc-dvc-fast-pll-slow",
        }
    }

    /// Slow coordinates of a full state.
    pub fn project<T: Scalar>(self, s: &FullState<T>) -> [T; 2] {
        match self.slow_loop() {
            SlowLoop::Dvc => [s.i_d, s.dv2],
            SlowLoop::Pll => [s.delta, s.x_int_pll],
        }
    }

    /// Full state on the slow manifold: fast coordinates from the algebraic maps.
    pub fn reconstruct<T: Scalar>(self, z: [T; 2], prm: &SystemParams<T>) -> Result<FullState<T>> {
        match self.slow_loop() {
            SlowLoop::Dvc => {
                let delta = alg_pll_fast(z[0], prm)?;
                let i_q = if self.uses_tvc() {
                    alg_tvc(delta, prm)
                } else {
                    prm.i_q_fixed
                };
                Ok(FullState::new(delta, T::zero(), z[0], z[1], i_q))
            }
            SlowLoop::Pll => {
                let i_q = if self.uses_tvc() {
                    alg_tvc(z[0], prm)
                } else {
                    prm.i_q_fixed
                };
                let i_d = alg_dvc_fast(z[0], i_q, prm)?;
                Ok(FullState::new(z[0], z[1], i_d, T::zero(), i_q))
            }
        }
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ordering {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ordering::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Ordering::ALL.iter().map(|o| o.name()).collect();
                format!("unknown ordering `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// An ordering together with how well the bandwidths separate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthOrdering {
    pub ordering: Ordering,
    /// Smallest ratio between a fast-loop bandwidth and the slow-loop bandwidth.
    pub separation_ratio: f64,
    /// True when the ratio is below the threshold: results are indicative only.
    pub advisory: bool,
}

impl BandwidthOrdering {
    /// Classifies `bw` with the given separation threshold.
    ///
    /// With TVC enabled the TVC loop must be faster than the slow loop.
    pub fn classify<T: Scalar>(bw: &BandwidthSpec<T>, threshold: f64) -> Result<Self> {
        bw.validate()?;
        let pll = bw.omega_pll.to_f64_lossy();
        let dvc = bw.omega_dvc.to_f64_lossy();
        let (ordering, fast, slow) = match bw.omega_tvc.map(|w| w.to_f64_lossy()) {
            None if pll >= dvc => (Ordering::PllFastDvcSlow, pll, dvc),
            None => (Ordering::DvcFastPllSlow, dvc, pll),
            Some(tvc) if pll >= dvc => (Ordering::PllTvcFastDvcSlow, pll.min(tvc), dvc),
            Some(tvc) => (Ordering::TvcDvcFastPllSlow, dvc.min(tvc), pll),
        };
        if fast < slow {
            return Err(ModelError::InvalidParameter {
                name: "omega_tvc",
                reason: format!(
                    "TVC bandwidth {fast:.4} rad/s is below the slow loop ({slow:.4} rad/s); \
                     no reduction treats TVC as slow"
                ),
            });
        }
        let separation_ratio = fast / slow;
        Ok(Self {
            ordering,
            separation_ratio,
            advisory: separation_ratio < threshold,
        })
    }
}

// ---------------------------------------------------------------------------
// Algebraic maps

/// Fast-PLL equilibrium `δ = asin(X_g i_d / U_g)` on the principal branch.
pub fn alg_pll_fast<T: Scalar>(i_d: T, prm: &SystemParams<T>) -> Result<T> {
    let s = prm.x_g * i_d / prm.u_g;
    if !(s.abs() <= T::one()) {
        return Err(ModelError::PllFastNoSolution {
            lhs: (prm.x_g * i_d).abs().to_f64_lossy(),
            u_g: prm.u_g.to_f64_lossy(),
        });
    }
    Ok(s.asin())
}

/// Fast-DVC equilibrium `i_d = (P_in + i_q U_g sin δ)/(U_g cos δ)`.
pub fn alg_dvc_fast<T: Scalar>(delta: T, i_q: T, prm: &SystemParams<T>) -> Result<T> {
    let (sd, cd) = delta.sin_cos();
    if !(cd > c(COS_DELTA_TOLERANCE)) {
        return Err(ModelError::DvcFastInvalid {
            cos_delta: cd.to_f64_lossy(),
            tolerance: COS_DELTA_TOLERANCE,
        });
    }
    Ok((prm.p_in + i_q * prm.u_g * sd) / (prm.u_g * cd))
}

/// Fast-TVC equilibrium `i_q = −k_v/(k_v X_g + 1)·(V_t,ref − U_g cos δ)`.
pub fn alg_tvc<T: Scalar>(delta: T, prm: &SystemParams<T>) -> T {
    -prm.k_v / (prm.k_v * prm.x_g + T::one()) * (prm.v_t_ref - prm.u_g * delta.cos())
}

// ---------------------------------------------------------------------------
// Shape functions

fn sqrt_term<T: Scalar>(i_d: T, prm: &SystemParams<T>) -> Result<T> {
    let u2 = prm.u_g * prm.u_g;
    let r = u2 - (prm.x_g * i_d) * (prm.x_g * i_d);
    // Tolerate rounding at the domain edge i_d = U_g/X_g.
    if r < -c::<T>(8.0) * T::epsilon() * u2 {
        return Err(ModelError::Domain {
            function: "p(i_d)",
            detail: format!("|X_g i_d| = {} exceeds U_g = {}", (prm.x_g * i_d).abs(), prm.u_g),
        });
    }
    Ok(r.max(T::zero()).sqrt())
}

/// Output power with the PLL at its fast equilibrium:
/// `p(i_d) = i_d√(U_g² − (X_g i_d)²) − i_d i_q X_g`.
pub fn p_of_id<T: Scalar>(i_d: T, i_q: T, prm: &SystemParams<T>) -> Result<T> {
    Ok(i_d * sqrt_term(i_d, prm)? - i_d * i_q * prm.x_g)
}

/// Output power with PLL and TVC at their fast equilibria:
/// `p′(i_d) = [i_d√(U_g² − (X_g i_d)²) + k_v X_g V_t,ref i_d]/(1 + k_v X_g)`.
pub fn p_prime_of_id<T: Scalar>(i_d: T, prm: &SystemParams<T>) -> Result<T> {
    let kx = prm.k_v * prm.x_g;
    Ok((i_d * sqrt_term(i_d, prm)? + kx * prm.v_t_ref * i_d) / (T::one() + kx))
}

/// `h(δ) = (U_g²/2) sin 2δ − i_q X_g U_g sin δ`; equilibria satisfy `h = X_g P_in`.
pub fn h_of_delta<T: Scalar>(delta: T, i_q: T, prm: &SystemParams<T>) -> T {
    let two = c::<T>(2.0);
    prm.u_g * prm.u_g / two * (two * delta).sin() - i_q * prm.x_g * prm.u_g * delta.sin()
}

/// `h′(δ) = [(U_g²/2) sin 2δ + k_v X_g V_t,ref U_g sin δ]/(1 + k_v X_g)`.
pub fn h_prime_of_delta<T: Scalar>(delta: T, prm: &SystemParams<T>) -> T {
    let kx = prm.k_v * prm.x_g;
    (h_of_delta(delta, T::zero(), prm) + kx * prm.v_t_ref * prm.u_g * delta.sin()) / (T::one() + kx)
}

/// `λ(δ) = U_g cos δ − k_p,pll (L_g/ω_s)(P_in + i_q U_g sin δ)`.
pub fn lambda_of_delta<T: Scalar>(delta: T, i_q: T, prm: &SystemParams<T>) -> T {
    let (sd, cd) = delta.sin_cos();
    prm.u_g * cd - prm.k_p_pll * prm.l_over_ws() * (prm.p_in + i_q * prm.u_g * sd)
}

// ---------------------------------------------------------------------------
// Validity

/// The three conditions for a stable fast-PLL equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PllFastClause {
    /// `i_d < U_g/X_g`: the fast equilibrium exists.
    Existence,
    /// `i_d < √(U_g² − (X_g i_d)²)/(ζ_pll L_g/ω_s)`.
    IntegralDamping,
    /// `i_d < 1/(ω_pll L_g/ω_s)`: the PLL loop gain stays positive.
    LoopGain,
}

impl fmt::Display for PllFastClause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PllFastClause::Existence => "i_d < U_g/X_g",
            PllFastClause::IntegralDamping => "i_d < sqrt(U_g^2 - (X_g i_d)^2)/(zeta_pll L_g/w_s)",
            PllFastClause::LoopGain => "i_d < 1/(w_pll L_g/w_s)",
        })
    }
}

/// First violated fast-PLL clause at `i_d`, if any.
pub fn pll_fast_validity<T: Scalar>(i_d: T, prm: &SystemParams<T>) -> Option<PllFastClause> {
    if !(i_d < prm.u_g / prm.x_g) {
        return Some(PllFastClause::Existence);
    }
    let l = prm.l_over_ws();
    let root = (prm.u_g * prm.u_g - (prm.x_g * i_d) * (prm.x_g * i_d)).sqrt();
    if !(i_d < root / (prm.zeta_pll * l)) {
        return Some(PllFastClause::IntegralDamping);
    }
    if !(i_d < T::one() / (prm.omega_pll() * l)) {
        return Some(PllFastClause::LoopGain);
    }
    None
}

/// Fast-subsystem condition violated at a reduced state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidityIssue {
    PllFast(PllFastClause),
    /// `cos δ` at or below [`COS_DELTA_TOLERANCE`].
    DvcFastCos,
}

impl fmt::Display for ValidityIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidityIssue::PllFast(c) => write!(f, "fast PLL invalid: {c} violated"),
            ValidityIssue::DvcFastCos => f.write_str("fast DVC invalid: cos(delta) <= 0"),
        }
    }
}

/// Slow-state derivatives with the fast-subsystem validity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedRates<T> {
    pub rates: [T; 2],
    pub issue: Option<ValidityIssue>,
}

/// Right-hand side of the reduced model for `ordering` at slow state `z`.
pub fn rhs_reduced<T: Scalar>(
    ordering: Ordering,
    z: [T; 2],
    prm: &SystemParams<T>,
) -> Result<ReducedRates<T>> {
    match ordering.slow_loop() {
        SlowLoop::Dvc => {
            let [i_d, dv2] = z;
            let p = if ordering.uses_tvc() {
                p_prime_of_id(i_d, prm)
            } else {
                p_of_id(i_d, prm.i_q_fixed, prm)
            }
            .map_err(|_| ModelError::PllFastNoSolution {
                lhs: (prm.x_g * i_d).abs().to_f64_lossy(),
                u_g: prm.u_g.to_f64_lossy(),
            })?;
            let r = prm.dc_gain() * (prm.p_in - p);
            Ok(ReducedRates {
                rates: [prm.k_p_dvc * r + prm.k_i_dvc * dv2, r],
                issue: pll_fast_validity(i_d, prm).map(ValidityIssue::PllFast),
            })
        }
        SlowLoop::Pll => {
            let [delta, x] = z;
            let (sd, cd) = delta.sin_cos();
            let (i_q, h) = if ordering.uses_tvc() {
                (alg_tvc(delta, prm), h_prime_of_delta(delta, prm))
            } else {
                (prm.i_q_fixed, h_of_delta(delta, prm.i_q_fixed, prm))
            };
            let lam = lambda_of_delta(delta, i_q, prm);
            if !(lam > c(LAMBDA_TOLERANCE)) {
                return Err(ModelError::LambdaSingular {
                    lambda: lam.to_f64_lossy(),
                    delta: delta.to_f64_lossy(),
                });
            }
            let mismatch = prm.x_g * prm.p_in - h;
            let load = prm.l_over_ws() * (prm.p_in + i_q * prm.u_g * sd);
            Ok(ReducedRates {
                rates: [
                    (prm.k_p_pll * mismatch + prm.u_g * cd * x) / lam,
                    prm.k_i_pll * (mismatch + load * x) / lam,
                ],
                issue: (!(cd > c(COS_DELTA_TOLERANCE))).then_some(ValidityIssue::DvcFastCos),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Boundary-layer corrections

/// Initial-value correction of the slow states for the fast transient, with
/// the boundary-layer term of the composite approximation.
///
/// The reduced model started at `apply(z0)` tracks the full slow states after
/// the fast transient has decayed; adding [`Self::layer_term`] to it also
/// tracks them during the transient.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLayerCorrection<T> {
    /// Subtract from the projected slow initial state.
    pub offset: [T; 2],
    /// Decay rate of the fast transient, 1/s.
    pub decay_rate: T,
    /// Boundary-layer term on a uniform grid of step `layer_dt` starting at 0;
    /// empty when the term is the exponential `offset·exp(−decay_rate·t)`.
    pub layer: Vec<[T; 2]>,
    pub layer_dt: T,
}

impl<T: Scalar> BoundaryLayerCorrection<T> {
    pub fn zero(decay_rate: T) -> Self {
        Self {
            offset: [T::zero(); 2],
            decay_rate,
            layer: Vec::new(),
            layer_dt: T::zero(),
        }
    }

    /// Corrected slow initial state.
    pub fn apply(&self, z: [T; 2]) -> [T; 2] {
        [z[0] - self.offset[0], z[1] - self.offset[1]]
    }

    /// Boundary-layer term `t` seconds after the event; equals `offset` at 0
    /// and vanishes once the fast transient has decayed.
    pub fn layer_term(&self, t: T) -> [T; 2] {
        if t < T::zero() {
            return [T::zero(); 2];
        }
        if self.layer.is_empty() {
            let w = (-self.decay_rate * t).exp();
            return [self.offset[0] * w, self.offset[1] * w];
        }
        let pos = t / self.layer_dt;
        let k = pos.floor().to_usize().unwrap_or(usize::MAX);
        if k + 1 >= self.layer.len() {
            return [T::zero(); 2];
        }
        let w = pos - T::lit(k as f64);
        let (a, b) = (self.layer[k], self.layer[k + 1]);
        [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
    }

    pub fn magnitude(&self) -> T {
        self.offset[0].abs().max(self.offset[1].abs())
    }
}

/// Correction for starting the reduced model at the projection of
/// `full_initial`, with `prm` the parameters in force right after `t = 0`.
///
/// DVC-slow orderings use the closed-form first-order correction of the fast
/// PLL transient. PLL-slow orderings integrate the fast DVC (and TVC)
/// transient with the PLL states frozen and accumulate the induced drift of
/// the PLL rates by trapezoidal quadrature over 10 fast time constants.
pub fn boundary_layer_correction<T: Scalar>(
    ordering: Ordering,
    full_initial: &FullState<T>,
    prm: &SystemParams<T>,
) -> Result<BoundaryLayerCorrection<T>> {
    match ordering.slow_loop() {
        SlowLoop::Dvc => dvc_slow_correction(ordering, full_initial, prm),
        SlowLoop::Pll => pll_slow_correction(ordering, full_initial, prm),
    }
}

fn dvc_slow_correction<T: Scalar>(
    ordering: Ordering,
    s: &FullState<T>,
    prm: &SystemParams<T>,
) -> Result<BoundaryLayerCorrection<T>> {
    let i_d = s.i_d;
    if let Some(clause) = pll_fast_validity(i_d, prm) {
        return Err(ModelError::InvalidState(format!(
            "boundary-layer correction needs a valid fast PLL: {clause} violated at i_d = {i_d}"
        )));
    }
    let delta_bar = alg_pll_fast(i_d, prm)?;
    let (sb, cb) = delta_bar.sin_cos();
    let den = T::one() - prm.k_p_pll * prm.l_over_ws() * i_d;
    let eps = den / prm.omega_pll();
    let a = prm.u_g * cb;
    let decay_rate = a / eps;
    let i_q = if ordering.uses_tvc() {
        alg_tvc(delta_bar, prm)
    } else {
        prm.i_q_fixed
    };
    // −∂p/∂δ at the slow manifold times the integral of (δ − δ̄) over the layer.
    let sens = i_d * prm.u_g * sb + i_q * prm.u_g * cb;
    let integral = sens * (s.delta - delta_bar) / a;
    Ok(BoundaryLayerCorrection {
        offset: [
            -eps * prm.omega_dvc() * integral,
            -eps * prm.dc_gain() * integral,
        ],
        decay_rate,
        layer: Vec::new(),
        layer_dt: T::zero(),
    })
}

fn pll_slow_correction<T: Scalar>(
    ordering: Ordering,
    s: &FullState<T>,
    prm: &SystemParams<T>,
) -> Result<BoundaryLayerCorrection<T>> {
    let tvc = ordering.uses_tvc();
    let delta = s.delta;
    let (sd, cd) = delta.sin_cos();
    if !(cd > c(COS_DELTA_TOLERANCE)) {
        return Err(ModelError::DvcFastInvalid {
            cos_delta: cd.to_f64_lossy(),
            tolerance: COS_DELTA_TOLERANCE,
        });
    }
    let i_q_bar = if tvc { alg_tvc(delta, prm) } else { prm.i_q_fixed };
    let i_d_bar = alg_dvc_fast(delta, i_q_bar, prm)?;

    // Slowest fast mode: DVC poles s² + ω a s + ζ ω² a with a = U_g cos δ,
    // and the TVC pole ω_tvc (1 + k_v X_g).
    let w = prm.omega_dvc();
    let a = prm.u_g * cd;
    let disc = w * w * a * a - c::<T>(4.0) * prm.zeta_dvc * w * w * a;
    let mut decay = if disc >= T::zero() {
        (w * a - disc.sqrt()) / c(2.0)
    } else {
        w * a / c(2.0)
    };
    if tvc {
        decay = decay.min(prm.omega_tvc * (T::one() + prm.k_v * prm.x_g));
    }
    if !(decay > T::zero()) {
        return Err(ModelError::InvalidState(format!(
            "fast subsystem not decaying at delta = {delta}"
        )));
    }
    let tau_max = c::<T>(10.0) / decay;

    let mut frozen = *prm;
    frozen.r_g = T::zero();
    let x = s.x_int_pll;
    let pll_rates = |i_d: T, i_q: T| -> Result<[T; 2]> {
        let st = FullState::new(delta, x, i_d, T::zero(), i_q);
        let r = rhs_full(&st, &frozen, false)?;
        Ok([r[0], r[1]])
    };
    let base = pll_rates(i_d_bar, i_q_bar)?;

    // Fast states: i_d, dv2, i_q with (δ, x) frozen.
    let fast = |_t: T, y: &[T; 3]| -> Result<[T; 3]> {
        let p = y[0] * prm.u_g * cd - y[2] * prm.u_g * sd;
        let r = frozen.dc_gain() * (prm.p_in - p);
        let diq = if tvc {
            let v_td = prm.u_g * cd - y[2] * prm.x_g;
            prm.omega_tvc * (-y[2] + prm.k_v * (v_td - prm.v_t_ref))
        } else {
            T::zero()
        };
        Ok([prm.k_i_dvc * y[1] + prm.k_p_dvc * r, r, diq])
    };
    let y0 = [s.i_d, s.dv2, if tvc { s.i_q } else { prm.i_q_fixed }];
    let opts = OdeOptions {
        dense: true,
        rtol: c(1e-10),
        atol: c(1e-12),
        ..OdeOptions::default()
    };
    let sol = integrate_plain(fast, T::zero(), y0, tau_max, &opts);
    if let crate::ode::Status::RhsError { error, .. } = &sol.status {
        return Err(error.clone());
    }
    let (_, y_end) = sol.last();
    let dev = |y: &[T; 3]| {
        (y[0] - i_d_bar).abs().max(y[1].abs()).max((y[2] - i_q_bar).abs())
    };
    let initial_dev = dev(&y0);
    let remaining = dev(&y_end);
    if !sol.status.is_ok() || remaining > c::<T>(1e-3) * initial_dev + c::<T>(1e-12) {
        return Err(ModelError::QuadratureNotConverged {
            tau_max: tau_max.to_f64_lossy(),
            remaining: remaining.to_f64_lossy(),
        });
    }
    if initial_dev == T::zero() {
        return Ok(BoundaryLayerCorrection::zero(decay));
    }

    // Trapezoid on a uniform grid of the dense output.
    let n = 4000usize;
    let dt = tau_max / T::lit(n as f64);
    let g = |t: T| -> Result<[T; 2]> {
        let y = sol.sample(t);
        let r = pll_rates(y[0], y[2])?;
        Ok([r[0] - base[0], r[1] - base[1]])
    };
    let mut acc = [T::zero(); 2];
    let mut cumulative = Vec::with_capacity(n + 1);
    cumulative.push(acc);
    let mut prev = g(T::zero())?;
    for k in 1..=n {
        let cur = g(dt * T::lit(k as f64))?;
        for i in 0..2 {
            acc[i] = acc[i] + (prev[i] + cur[i]) * dt / c(2.0);
        }
        cumulative.push(acc);
        prev = cur;
    }
    // Layer term −∫_t^∞ g = ∫_0^t g − ∫_0^∞ g.
    let layer = cumulative
        .iter()
        .map(|c| [c[0] - acc[0], c[1] - acc[1]])
        .collect();
    Ok(BoundaryLayerCorrection {
        offset: [-acc[0], -acc[1]],
        decay_rate: decay,
        layer,
        layer_dt: dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn prm(pll: f64, dvc: f64, tvc: Option<f64>) -> SystemParams<f64> {
        SystemParams::reference(&BandwidthSpec::from_hz(pll, dvc, tvc)).unwrap()
    }

    #[test]
    fn pll_fast_map_examples() {
        let p = prm(15.0, 2.0, None);
        assert_eq!(alg_pll_fast(0.0, &p).unwrap(), 0.0);
        assert!((alg_pll_fast(1.0 / 0.47, &p).unwrap() - PI / 2.0).abs() < 1e-7);
        let d = alg_pll_fast(1.0, &p).unwrap();
        assert!((d - 0.48934).abs() < 1e-4);
        assert!((d.to_degrees() - 28.03).abs() < 0.01);
        assert!(matches!(
            alg_pll_fast(2.2, &p),
            Err(ModelError::PllFastNoSolution { .. })
        ));
    }

    #[test]
    fn dvc_fast_map_examples() {
        let p = prm(2.0, 15.0, None);
        assert!((alg_dvc_fast(0.0, 0.0, &p).unwrap() - 1.0).abs() < 1e-15);
        let v = alg_dvc_fast(30f64.to_radians(), -0.5, &p).unwrap();
        assert!((v - (1.0 - 0.25) / 0.75f64.sqrt()).abs() < 1e-12);
        assert!((v - 0.8660).abs() < 1e-4);
        assert!(alg_dvc_fast(89.999999f64.to_radians(), 0.0, &p).is_err());
    }

    #[test]
    fn tvc_map_examples() {
        let mut p = prm(15.0, 2.0, Some(20.0));
        assert!((alg_tvc(0.0, &p) - 0.19588).abs() < 1e-4);
        let d = (p.v_t_ref / p.u_g).acos();
        assert!(alg_tvc(d, &p).abs() < 1e-15);
        p.k_v = 0.0;
        assert_eq!(alg_tvc(0.3, &p), 0.0);
    }

    #[test]
    fn shape_function_examples() {
        let p = prm(15.0, 2.0, Some(20.0));
        assert!((h_of_delta(PI / 4.0, 0.0, &p) - 0.5).abs() < 1e-15);
        let id_max = 1.0 / (2f64.sqrt() * 0.47);
        assert!((p_of_id(id_max, 0.0, &p).unwrap() - 1.0 / 0.94).abs() < 1e-12);
        let hp = h_prime_of_delta(80.3f64.to_radians(), &p);
        assert!((hp - 0.4724).abs() < 5e-4, "{hp}");
        assert!(p_of_id(3.0, 0.0, &p).is_err());
    }

    #[test]
    fn primed_shapes_match_substituted_tvc() {
        let p = prm(15.0, 2.0, Some(20.0));
        for k in 1..40 {
            let d = k as f64 * 0.035;
            let hp = h_prime_of_delta(d, &p);
            assert!((hp - h_of_delta(d, alg_tvc(d, &p), &p)).abs() < 1e-14);
            let i_d = k as f64 * 0.05;
            let delta = alg_pll_fast(i_d, &p).unwrap();
            let pp = p_prime_of_id(i_d, &p).unwrap();
            assert!((pp - p_of_id(i_d, alg_tvc(delta, &p), &p).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn validity_examples() {
        let p = prm(15.0, 2.0, None);
        assert_eq!(pll_fast_validity(0.0, &p), None);
        assert_eq!(pll_fast_validity(1.0 / 0.47, &p), Some(PllFastClause::Existence));
        // Independent evaluation at i_d = 2.
        let l = 0.47 / (2.0 * PI * 50.0);
        let c1 = 2.0 < 1.0 / 0.47;
        let c2 = 2.0 < (1.0f64 - 0.94f64.powi(2)).sqrt() / (0.25 * l);
        let c3 = 2.0 < 1.0 / (2.0 * PI * 15.0 * l);
        let expect = if !c1 {
            Some(PllFastClause::Existence)
        } else if !c2 {
            Some(PllFastClause::IntegralDamping)
        } else if !c3 {
            Some(PllFastClause::LoopGain)
        } else {
            None
        };
        assert_eq!(pll_fast_validity(2.0, &p), expect);
    }

    #[test]
    fn dvc_slow_rate_example() {
        let p = prm(15.0, 2.0, None);
        let r = rhs_reduced(Ordering::PllFastDvcSlow, [1.0, 0.0], &p).unwrap();
        let expect = 2.0 / (p.c_dc / p.omega_s) * (1.0 - (1.0 - 0.47f64.powi(2)).sqrt());
        assert!((r.rates[1] - expect).abs() < 1e-12);
        assert!((r.rates[0] - p.k_p_dvc * expect).abs() < 1e-12);
        assert!(r.issue.is_none());
    }

    #[test]
    fn pll_slow_matches_full_on_manifold() {
        // With R_g = 0 and i_d on the fast-DVC manifold the full PLL rates
        // coincide with the reduced ones.
        for (ord, tvc) in [
            (Ordering::DvcFastPllSlow, None),
            (Ordering::TvcDvcFastPllSlow, Some(20.0)),
        ] {
            let mut p = prm(2.0, 15.0, tvc);
            p.r_g = 0.0;
            for &(d, x) in &[(0.3, 0.0), (0.7, 0.4), (1.1, -0.6)] {
                let s = ord.reconstruct([d, x], &p).unwrap();
                let f = rhs_full(&s, &p, false).unwrap();
                let r = rhs_reduced(ord, [d, x], &p).unwrap();
                assert!((f[0] - r.rates[0]).abs() < 1e-10, "{ord} {f:?} {:?}", r.rates);
                assert!((f[1] - r.rates[1]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lambda_singularity_reported() {
        let p = prm(2.0, 15.0, None);
        assert!(matches!(
            rhs_reduced(Ordering::DvcFastPllSlow, [PI / 2.0, 0.0], &p),
            Err(ModelError::LambdaSingular { .. })
        ));
    }

    #[test]
    fn ordering_classification() {
        let b = BandwidthOrdering::classify(&BandwidthSpec::from_hz(15.0, 2.0, None), 7.0).unwrap();
        assert_eq!(b.ordering, Ordering::PllFastDvcSlow);
        assert!((b.separation_ratio - 7.5).abs() < 1e-12);
        assert!(!b.advisory);
        let b = BandwidthOrdering::classify(&BandwidthSpec::from_hz(2.0, 8.0, None), 7.0).unwrap();
        assert_eq!(b.ordering, Ordering::DvcFastPllSlow);
        assert!(b.advisory);
        let b =
            BandwidthOrdering::classify(&BandwidthSpec::from_hz(2.0, 15.0, Some(20.0)), 7.0).unwrap();
        assert_eq!(b.ordering, Ordering::TvcDvcFastPllSlow);
        assert!(BandwidthOrdering::classify(&BandwidthSpec::from_hz(15.0, 2.0, Some(1.0)), 7.0).is_err());
        for o in Ordering::ALL {
            assert_eq!(o.name().parse::<Ordering>().unwrap(), o);
        }
    }

    #[test]
    fn correction_vanishes_on_slow_manifold() {
        let p = prm(15.0, 2.0, None);
        let s = Ordering::PllFastDvcSlow.reconstruct([1.1, 0.1], &p).unwrap();
        let bl = boundary_layer_correction(Ordering::PllFastDvcSlow, &s, &p).unwrap();
        assert!(bl.magnitude() < 1e-15);
        let p = prm(2.0, 15.0, None);
        let s = Ordering::DvcFastPllSlow.reconstruct([0.6, 0.05], &p).unwrap();
        let bl = boundary_layer_correction(Ordering::DvcFastPllSlow, &s, &p).unwrap();
        assert!(bl.magnitude() < 1e-12, "{bl:?}");
    }

    #[test]
    fn pll_slow_correction_matches_linear_estimate() {
        // For small deviations dv2 is the integral of the DVC power error, so
        // ∫(i_d − ī_d)dt = dv2(0)/(2/(C/ω_s)·U_g cos δ) exactly; the correction is
        // that integral times ∂(dδ/dt)/∂i_d.
        let p = prm(2.0, 15.0, None);
        let mut s = Ordering::DvcFastPllSlow.reconstruct([0.6, 0.0], &p).unwrap();
        let i_bar = s.i_d;
        s.i_d += 1e-4;
        s.dv2 = 2e-4;
        let bl = boundary_layer_correction(Ordering::DvcFastPllSlow, &s, &p).unwrap();
        let integral = s.dv2 / (p.dc_gain() * p.u_g * s.delta.cos());
        let mut q = p;
        q.r_g = 0.0;
        let h = 1e-6;
        let f = |i: f64| rhs_full(&FullState::new(s.delta, 0.0, i, 0.0, 0.0), &q, false).unwrap();
        let dfd = (f(i_bar + h)[0] - f(i_bar - h)[0]) / (2.0 * h);
        let est = -dfd * integral;
        assert!((bl.offset[0] - est).abs() < 0.02 * est.abs(), "{} vs {est}", bl.offset[0]);
    }
}
