//! System parameters, loop bandwidths and PI gain design.
//!
//! All electrical quantities are per-unit on the converter base. The grid
//! inductance term `L_g/ω_s` that appears in the dq-frame voltage equations is
//! evaluated as `X_g/ω_s` (in pu, `X_g` and `L_g` coincide numerically).

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::scalar::{c, Scalar};

/// Rectangular current limiter and DC-chopper clamp band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits<T> {
    /// Per-axis current limit, pu.
    pub i_limit: T,
    /// Lower DC-link voltage clamp, pu.
    pub v_dc_min: T,
    /// Upper DC-link voltage clamp, pu.
    pub v_dc_max: T,
}

impl<T: Scalar> Limits<T> {
    pub fn validate(&self, v_dc_ref: T) -> Result<()> {
        if !(self.i_limit > T::zero()) {
            return Err(invalid("i_limit", "must be positive"));
        }
        if !(T::zero() < self.v_dc_min && self.v_dc_min < v_dc_ref && v_dc_ref < self.v_dc_max) {
            return Err(invalid(
                "v_dc_min/v_dc_max",
                format!(
                    "requires 0 < v_dc_min < V_dc,ref < v_dc_max, got {} < {} < {}",
                    self.v_dc_min, v_dc_ref, self.v_dc_max
                ),
            ));
        }
        Ok(())
    }
}

/// Closed-loop bandwidths of the three outer loops, rad/s.
///
/// `omega_tvc = None` means terminal-voltage control is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSpec<T> {
    pub omega_pll: T,
    pub omega_dvc: T,
    pub omega_tvc: Option<T>,
}

impl<T: Scalar> BandwidthSpec<T> {
    /// Builds a spec from frequencies in Hz.
    pub fn from_hz(pll_hz: T, dvc_hz: T, tvc_hz: Option<T>) -> Self {
        let tau = T::TAU();
        Self {
            omega_pll: tau * pll_hz,
            omega_dvc: tau * dvc_hz,
            omega_tvc: tvc_hz.map(|f| tau * f),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, format!("bandwidth must be positive and finite, got {v}")))
            }
        };
        check("omega_pll", self.omega_pll)?;
        check("omega_dvc", self.omega_dvc)?;
        if let Some(w) = self.omega_tvc {
            check("omega_tvc", w)?;
        }
        Ok(())
    }

    pub fn tvc_enabled(&self) -> bool {
        self.omega_tvc.is_some()
    }
}

/// PI gains of the PLL and DVC loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gains<T> {
    pub k_p_pll: T,
    pub k_i_pll: T,
    pub k_p_dvc: T,
    pub k_i_dvc: T,
}

/// Designs the PLL and DVC PI gains from the requested bandwidths.
///
/// The PLL is the overdamped design `k_p = ω_pll`, `k_i = ζ_pll·k_p`; the DVC is
/// the second-order design `k_p = (C/ω_s)/2·ω_dvc`, `k_i = ζ_dvc·(C/ω_s)/2·ω_dvc²`.
pub fn gains_from_bandwidths<T: Scalar>(
    bw: &BandwidthSpec<T>,
    c_dc: T,
    omega_s: T,
    zeta_pll: T,
    zeta_dvc: T,
) -> Result<Gains<T>> {
    bw.validate()?;
    if !(c_dc > T::zero()) {
        return Err(invalid("c_dc", "must be positive"));
    }
    if !(omega_s > T::zero()) {
        return Err(invalid("omega_s", "must be positive"));
    }
    let half_c = c_dc / omega_s / c(2.0);
    let k_p_pll = bw.omega_pll;
    Ok(Gains {
        k_p_pll,
        k_i_pll: zeta_pll * k_p_pll,
        k_p_dvc: half_c * bw.omega_dvc,
        k_i_dvc: zeta_dvc * half_c * bw.omega_dvc * bw.omega_dvc,
    })
}

/// Grid, controller, limiter and base quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams<T> {
    /// Grid voltage magnitude, pu.
    pub u_g: T,
    /// Grid reactance, pu.
    pub x_g: T,
    /// Grid resistance, pu. Only the full model uses it.
    pub r_g: T,
    /// Fundamental angular frequency, rad/s.
    pub omega_s: T,
    pub p_in: T,
    pub c_dc: T,
    pub v_dc_ref: T,
    pub k_p_pll: T,
    pub k_i_pll: T,
    /// `k_i,pll / k_p,pll`.
    pub zeta_pll: T,
    pub k_p_dvc: T,
    pub k_i_dvc: T,
    pub zeta_dvc: T,
    /// TVC low-pass cut-off, rad/s.
    pub omega_tvc: T,
    /// Droop coefficient, pu.
    pub k_v: T,
    pub v_t_ref: T,
    /// q-axis current held when TVC is disabled.
    pub i_q_fixed: T,
    pub limits: Limits<T>,
}

impl<T: Scalar> SystemParams<T> {
    /// Nominal simulation parameters of the reference 1 MVA system
    /// (SCR 2.1 weak grid), with gains designed for `bw`.
    pub fn reference(bw: &BandwidthSpec<T>) -> Result<Self> {
        let mut p = Self {
            u_g: T::one(),
            x_g: c(0.47),
            r_g: c(0.002),
            omega_s: T::TAU() * c(50.0),
            p_in: T::one(),
            c_dc: c(12.5),
            v_dc_ref: c(2.5),
            k_p_pll: T::zero(),
            k_i_pll: T::zero(),
            zeta_pll: c(0.25),
            k_p_dvc: T::zero(),
            k_i_dvc: T::zero(),
            zeta_dvc: c(0.25),
            omega_tvc: T::zero(),
            k_v: c(2.0),
            v_t_ref: c(0.81),
            i_q_fixed: T::zero(),
            limits: Limits {
                i_limit: c(2.5),
                v_dc_min: c(2.0),
                v_dc_max: c(3.0),
            },
        };
        p.set_bandwidths(bw)?;
        Ok(p)
    }

    /// Redesigns every gain for `bw`. Without TVC the previous `omega_tvc` is
    /// left untouched.
    pub fn set_bandwidths(&mut self, bw: &BandwidthSpec<T>) -> Result<()> {
        let g = gains_from_bandwidths(bw, self.c_dc, self.omega_s, self.zeta_pll, self.zeta_dvc)?;
        self.k_p_pll = g.k_p_pll;
        self.k_i_pll = g.k_i_pll;
        self.k_p_dvc = g.k_p_dvc;
        self.k_i_dvc = g.k_i_dvc;
        if let Some(w) = bw.omega_tvc {
            self.omega_tvc = w;
        }
        Ok(())
    }

    pub fn with_bandwidths(mut self, bw: &BandwidthSpec<T>) -> Result<Self> {
        self.set_bandwidths(bw)?;
        Ok(self)
    }

    /// `L_g/ω_s`, evaluated as `X_g/ω_s`.
    #[inline]
    pub fn l_over_ws(&self) -> T {
        self.x_g / self.omega_s
    }

    /// `C_dc/ω_s`.
    #[inline]
    pub fn c_over_ws(&self) -> T {
        self.c_dc / self.omega_s
    }

    /// `2/(C_dc/ω_s)`, the gain from power imbalance to `d(Δv_dc²)/dt`.
    #[inline]
    pub fn dc_gain(&self) -> T {
        c::<T>(2.0) / self.c_over_ws()
    }

    /// PLL bandwidth implied by the gains (`ω_pll = k_p,pll`).
    #[inline]
    pub fn omega_pll(&self) -> T {
        self.k_p_pll
    }

    /// DVC bandwidth implied by the gains (`ω_dvc = 2/(C/ω_s)·k_p,dvc`).
    #[inline]
    pub fn omega_dvc(&self) -> T {
        self.dc_gain() * self.k_p_dvc
    }

    /// `k_vX_g/(k_vX_g + 1)`, the TVC blending weight.
    #[inline]
    pub fn tvc_weight(&self) -> T {
        let kx = self.k_v * self.x_g;
        kx / (kx + T::one())
    }

    /// Bandwidths recovered from the gains.
    pub fn bandwidths(&self, tvc_enabled: bool) -> BandwidthSpec<T> {
        BandwidthSpec {
            omega_pll: self.omega_pll(),
            omega_dvc: self.omega_dvc(),
            omega_tvc: tvc_enabled.then_some(self.omega_tvc),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, format!("must be positive and finite, got {v}")))
            }
        };
        positive("u_g", self.u_g)?;
        positive("x_g", self.x_g)?;
        positive("c_dc", self.c_dc)?;
        positive("omega_s", self.omega_s)?;
        positive("v_dc_ref", self.v_dc_ref)?;
        positive("k_p_pll", self.k_p_pll)?;
        positive("k_p_dvc", self.k_p_dvc)?;
        if self.r_g < T::zero() {
            return Err(invalid("r_g", "must be non-negative"));
        }
        if self.k_v < T::zero() {
            return Err(invalid("k_v", "must be non-negative"));
        }
        let zeta = self.k_i_pll / self.k_p_pll;
        if (zeta - self.zeta_pll).abs() > c::<T>(1e-6) * self.zeta_pll.abs().max(T::one()) {
            return Err(invalid(
                "zeta_pll",
                format!("k_i,pll/k_p,pll = {zeta} does not match zeta_pll = {}", self.zeta_pll),
            ));
        }
        self.limits.validate(self.v_dc_ref)
    }

    /// Converts every field to another scalar type.
    pub fn cast<U: Scalar>(&self) -> SystemParams<U> {
        let f = |x: T| U::lit(x.to_f64_lossy());
        SystemParams {
            u_g: f(self.u_g),
            x_g: f(self.x_g),
            r_g: f(self.r_g),
            omega_s: f(self.omega_s),
            p_in: f(self.p_in),
            c_dc: f(self.c_dc),
            v_dc_ref: f(self.v_dc_ref),
            k_p_pll: f(self.k_p_pll),
            k_i_pll: f(self.k_i_pll),
            zeta_pll: f(self.zeta_pll),
            k_p_dvc: f(self.k_p_dvc),
            k_i_dvc: f(self.k_i_dvc),
            zeta_dvc: f(self.zeta_dvc),
            omega_tvc: f(self.omega_tvc),
            k_v: f(self.k_v),
            v_t_ref: f(self.v_t_ref),
            i_q_fixed: f(self.i_q_fixed),
            limits: Limits {
                i_limit: f(self.limits.i_limit),
                v_dc_min: f(self.limits.v_dc_min),
                v_dc_max: f(self.limits.v_dc_max),
            },
        }
    }
}

fn invalid(name: &'static str, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn gains(pll_hz: f64, dvc_hz: f64) -> Gains<f64> {
        let bw = BandwidthSpec::from_hz(pll_hz, dvc_hz, None);
        gains_from_bandwidths(&bw, 12.5, 2.0 * PI * 50.0, 0.25, 0.25).unwrap()
    }

    #[test]
    fn pll_gains_for_15_hz() {
        let g = gains(15.0, 2.0);
        assert!((g.k_p_pll - 94.2478).abs() < 1e-3);
        assert!((g.k_i_pll - 23.5619).abs() < 1e-3);
    }

    #[test]
    #[allow(clippy::approx_constant)] // the tabulated gain, not π/4
    fn dvc_gains_for_2_hz() {
        let g = gains(15.0, 2.0);
        assert!((g.k_p_dvc - 0.25).abs() < 1e-12);
        assert!((g.k_i_dvc - 0.785398).abs() < 1e-6);
    }

    #[test]
    fn unit_pll_bandwidth_is_identity() {
        let bw = BandwidthSpec {
            omega_pll: 1.0,
            omega_dvc: 1.0,
            omega_tvc: None,
        };
        let g = gains_from_bandwidths(&bw, 12.5, 314.0, 0.3, 0.25).unwrap();
        assert_eq!(g.k_p_pll, 1.0);
        assert_eq!(g.k_i_pll, 0.3);
    }

    #[test]
    fn non_positive_bandwidth_rejected() {
        for bad in [0.0, -1.0, f64::NAN] {
            let bw = BandwidthSpec {
                omega_pll: bad,
                omega_dvc: 1.0,
                omega_tvc: None,
            };
            assert!(matches!(
                gains_from_bandwidths(&bw, 12.5, 314.0, 0.25, 0.25),
                Err(ModelError::InvalidParameter { .. })
            ));
        }
        let bw = BandwidthSpec {
            omega_pll: 1.0,
            omega_dvc: 1.0,
            omega_tvc: Some(0.0),
        };
        assert!(bw.validate().is_err());
    }

    #[test]
    fn reference_params_round_trip_bandwidths() {
        let bw = BandwidthSpec::<f64>::from_hz(15.0, 2.0, Some(20.0));
        let p = SystemParams::reference(&bw).unwrap();
        p.validate().unwrap();
        let back = p.bandwidths(true);
        assert!((back.omega_pll - bw.omega_pll).abs() < 1e-12);
        assert!((back.omega_dvc - bw.omega_dvc).abs() < 1e-9);
        assert_eq!(back.omega_tvc, bw.omega_tvc);
        assert!((p.k_i_pll / p.k_p_pll - p.zeta_pll).abs() < 1e-15);
    }

    #[test]
    fn limits_validation() {
        let bw = BandwidthSpec::from_hz(15.0, 2.0, None);
        let mut p = SystemParams::reference(&bw).unwrap();
        p.limits.v_dc_max = 2.4;
        assert!(p.validate().is_err());
        p.limits.v_dc_max = 3.0;
        p.limits.i_limit = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn f32_instantiation() {
        let bw = BandwidthSpec::<f32>::from_hz(15.0, 2.0, None);
        let p = SystemParams::<f32>::reference(&bw).unwrap();
        assert!((p.k_p_dvc - 0.25).abs() < 1e-6);
        let q: SystemParams<f64> = p.cast();
        assert!((q.k_p_pll - 94.2478).abs() < 1e-3);
    }
}
