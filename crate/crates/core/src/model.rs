//! Full-order outer-loop model: PLL, DC-voltage control and terminal-voltage
//! control driving an ideal controlled current source into an inductive grid.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::SystemParams;
use crate::scalar::{c, Scalar};

/// Smallest admissible `|1 − k_p,pll·L·i_d|` before the PLL loop is declared singular.
pub const PLL_LOOP_TOLERANCE: f64 = 1e-9;

/// The five dynamic states of the converter.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FullState<T> {
    /// PLL angle minus grid angle, rad.
    pub delta: T,
    /// PLL integrator, rad/s.
    pub x_int_pll: T,
    /// d-axis current, pu.
    pub i_d: T,
    /// `v_dc² − V_dc,ref²`, pu².
    pub dv2: T,
    /// q-axis current, pu.
    pub i_q: T,
}

impl<T: Scalar> FullState<T> {
    pub const DIM: usize = 5;
    pub const LABELS: [&'static str; 5] = ["delta", "x_int_pll", "i_d", "dv2", "i_q"];

    pub fn new(delta: T, x_int_pll: T, i_d: T, dv2: T, i_q: T) -> Self {
        Self {
            delta,
            x_int_pll,
            i_d,
            dv2,
            i_q,
        }
    }

    #[inline]
    pub fn to_array(self) -> [T; 5] {
        [self.delta, self.x_int_pll, self.i_d, self.dv2, self.i_q]
    }

    #[inline]
    pub fn from_array(a: [T; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Checks finiteness and `v_dc² ≥ 0`.
    pub fn validate(&self, params: &SystemParams<T>) -> Result<()> {
        if !self.is_finite() {
            return Err(ModelError::InvalidState(format!("non-finite state {self:?}")));
        }
        if self.dv2 < -params.v_dc_ref * params.v_dc_ref {
            return Err(ModelError::InvalidState(format!(
                "dv2 = {} implies negative v_dc²",
                self.dv2
            )));
        }
        Ok(())
    }

    /// DC-link voltage implied by `dv2`.
    pub fn v_dc(&self, params: &SystemParams<T>) -> T {
        (self.dv2 + params.v_dc_ref * params.v_dc_ref).max(T::zero()).sqrt()
    }
}

/// Electrical quantities evaluated alongside the state derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terminal<T> {
    /// Active power delivered to the grid, pu.
    pub p: T,
    pub v_td: T,
    pub v_tq: T,
    /// `dδ/dt`, rad/s.
    pub delta_dot: T,
}

/// Resolves the PLL algebraic loop and returns `(dδ/dt, v_t,q)`.
#[inline]
fn pll_rates<T: Scalar>(s: &FullState<T>, prm: &SystemParams<T>) -> Result<(T, T)> {
    let l = prm.l_over_ws();
    let den = T::one() - prm.k_p_pll * l * s.i_d;
    if !(den.abs() > c(PLL_LOOP_TOLERANCE)) {
        return Err(ModelError::PllLoopSingular {
            denominator: den.to_f64_lossy(),
            i_d: s.i_d.to_f64_lossy(),
            i_d_bound: (T::one() / (prm.k_p_pll * l)).to_f64_lossy(),
        });
    }
    let a = prm.x_g * s.i_d + s.i_q * prm.r_g - prm.u_g * s.delta.sin();
    let delta_dot = (prm.k_p_pll * a + s.x_int_pll) / den;
    let v_tq = a + s.i_d * delta_dot * l;
    Ok((delta_dot, v_tq))
}

/// Active power injected at the grid voltage source plus resistive loss.
#[inline]
pub fn active_power<T: Scalar>(s: &FullState<T>, prm: &SystemParams<T>) -> T {
    let (sd, cd) = s.delta.sin_cos();
    s.i_d * prm.u_g * cd - s.i_q * prm.u_g * sd + (s.i_d * s.i_d + s.i_q * s.i_q) * prm.r_g
}

/// Terminal voltage, power and PLL frequency deviation at `s`.
pub fn terminal<T: Scalar>(s: &FullState<T>, prm: &SystemParams<T>) -> Result<Terminal<T>> {
    let (delta_dot, v_tq) = pll_rates(s, prm)?;
    let v_td = prm.u_g * s.delta.cos() + s.i_d * prm.r_g - s.i_q * prm.x_g
        + s.i_q * delta_dot * prm.l_over_ws();
    Ok(Terminal {
        p: active_power(s, prm),
        v_td,
        v_tq,
        delta_dot,
    })
}

/// Time derivatives `(dδ, dx_int,pll, di_d, d(dv2), di_q)`.
///
/// With `tvc_enabled = false`, `di_q/dt = 0` and `i_q` is left untouched.
pub fn rhs_full<T: Scalar>(
    s: &FullState<T>,
    prm: &SystemParams<T>,
    tvc_enabled: bool,
) -> Result<[T; 5]> {
    let (delta_dot, v_tq) = pll_rates(s, prm)?;
    let x_dot = prm.k_i_pll * v_tq;

    let r = prm.dc_gain() * (prm.p_in - active_power(s, prm));
    let i_d_dot = prm.k_i_dvc * s.dv2 + prm.k_p_dvc * r;

    let i_q_dot = if tvc_enabled {
        let v_td = prm.u_g * s.delta.cos() + s.i_d * prm.r_g - s.i_q * prm.x_g
            + s.i_q * delta_dot * prm.l_over_ws();
        prm.omega_tvc * (-s.i_q + prm.k_v * (v_td - prm.v_t_ref))
    } else {
        T::zero()
    };
    Ok([delta_dot, x_dot, i_d_dot, r, i_q_dot])
}

/// Which limiters engaged in [`apply_limits`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SaturationFlags {
    pub i_d: bool,
    pub i_q: bool,
    /// DC chopper clamp (either side of the band).
    pub dc: bool,
}

impl SaturationFlags {
    pub fn any(&self) -> bool {
        self.i_d || self.i_q || self.dc
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            i_d: self.i_d || o.i_d,
            i_q: self.i_q || o.i_q,
            dc: self.dc || o.dc,
        }
    }
}

/// Per-axis current clamp and DC-voltage chopper clamp.
pub fn apply_limits<T: Scalar>(
    s: &FullState<T>,
    prm: &SystemParams<T>,
) -> (FullState<T>, SaturationFlags) {
    let lim = &prm.limits;
    let mut out = *s;
    let mut f = SaturationFlags::default();
    let clamp = |v: T, lo: T, hi: T, flag: &mut bool| {
        if v > hi {
            *flag = true;
            hi
        } else if v < lo {
            *flag = true;
            lo
        } else {
            v
        }
    };
    out.i_d = clamp(s.i_d, -lim.i_limit, lim.i_limit, &mut f.i_d);
    out.i_q = clamp(s.i_q, -lim.i_limit, lim.i_limit, &mut f.i_q);
    let (lo, hi) = dv2_band(prm);
    out.dv2 = clamp(s.dv2, lo, hi, &mut f.dc);
    (out, f)
}

/// `dv2` interval equivalent to the DC-voltage clamp band.
pub fn dv2_band<T: Scalar>(prm: &SystemParams<T>) -> (T, T) {
    let v2 = prm.v_dc_ref * prm.v_dc_ref;
    let lim = &prm.limits;
    (lim.v_dc_min * lim.v_dc_min - v2, lim.v_dc_max * lim.v_dc_max - v2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::BandwidthSpec;

    fn prm(tvc: bool) -> SystemParams<f64> {
        let bw = BandwidthSpec::from_hz(15.0, 2.0, tvc.then_some(20.0));
        SystemParams::reference(&bw).unwrap()
    }

    /// Independent transcription: resolve the PLL loop by fixed-point iteration
    /// on `v_tq` instead of the closed form.
    fn oracle(s: &FullState<f64>, p: &SystemParams<f64>, tvc: bool) -> [f64; 5] {
        let l = p.x_g / p.omega_s;
        let mut dd = 0.0;
        for _ in 0..200 {
            let vtq = p.x_g * s.i_d + s.i_q * p.r_g - p.u_g * s.delta.sin() + s.i_d * dd * l;
            dd = p.k_p_pll * vtq + s.x_int_pll;
        }
        let vtq = p.x_g * s.i_d + s.i_q * p.r_g - p.u_g * s.delta.sin() + s.i_d * dd * l;
        let pw = s.i_d * p.u_g * s.delta.cos() - s.i_q * p.u_g * s.delta.sin()
            + (s.i_d.powi(2) + s.i_q.powi(2)) * p.r_g;
        let ddv = 2.0 / (p.c_dc / p.omega_s) * (p.p_in - pw);
        let vtd = p.u_g * s.delta.cos() + s.i_d * p.r_g - s.i_q * p.x_g + s.i_q * dd * l;
        let diq = if tvc {
            p.omega_tvc * (-s.i_q + (vtd - p.v_t_ref) * p.k_v)
        } else {
            0.0
        };
        [
            dd,
            p.k_i_pll * vtq,
            p.k_i_dvc * s.dv2 + p.k_p_dvc * ddv,
            ddv,
            diq,
        ]
    }

    #[test]
    fn origin_derivatives() {
        let p = prm(false);
        let d = rhs_full(&FullState::default(), &p, false).unwrap();
        assert_eq!(d[0], 0.0);
        assert!((d[3] - 2.0 / (p.c_dc / p.omega_s)).abs() < 1e-12);
        assert!(d[3] > 0.0);
    }

    #[test]
    fn matches_fixed_point_transcription() {
        for tvc in [false, true] {
            let p = prm(tvc);
            let s = FullState::new(0.61, -0.3, 1.1, 0.4, -0.2);
            let a = rhs_full(&s, &p, tvc).unwrap();
            let b = oracle(&s, &p, tvc);
            for k in 0..5 {
                assert!((a[k] - b[k]).abs() <= 1e-12 * b[k].abs().max(1.0), "{k}: {a:?} {b:?}");
            }
        }
    }

    #[test]
    fn singular_loop_reported() {
        let p = prm(false);
        let i_d = 1.0 / (p.k_p_pll * p.l_over_ws());
        let s = FullState::new(0.0, 0.0, i_d, 0.0, 0.0);
        assert!(matches!(
            rhs_full(&s, &p, false),
            Err(ModelError::PllLoopSingular { .. })
        ));
    }

    #[test]
    fn balanced_state_is_rest() {
        // v_tq = 0, p = P_in with R_g = 0 and i_q = 0.
        let mut p = prm(false);
        p.r_g = 0.0;
        let i_d: f64 = 1.22;
        let delta = (p.x_g * i_d / p.u_g).asin();
        p.p_in = i_d * p.u_g * delta.cos();
        let d = rhs_full(&FullState::new(delta, 0.0, i_d, 0.0, 0.0), &p, false).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-12), "{d:?}");
    }

    #[test]
    fn power_balance_identity() {
        let p = prm(true);
        let s = FullState::new(0.3, 0.1, 0.9, -0.2, 0.3);
        let d = rhs_full(&s, &p, true).unwrap();
        let t = terminal(&s, &p).unwrap();
        assert!((d[3] * p.c_over_ws() / 2.0 - (p.p_in - t.p)).abs() < 1e-14);
        assert!((t.delta_dot - (p.k_p_pll * t.v_tq + s.x_int_pll)).abs() < 1e-10);
    }

    #[test]
    fn limiter_examples() {
        let p = prm(false);
        let s = FullState::new(0.0, 0.0, 2.4, 0.0, 0.0);
        let (o, f) = apply_limits(&s, &p);
        assert_eq!(o, s);
        assert!(!f.any());

        let (o, f) = apply_limits(&FullState::new(0.0, 0.0, 3.0, 0.0, -2.6), &p);
        assert_eq!(o.i_d, 2.5);
        assert_eq!(o.i_q, -2.5);
        assert!(f.i_d && f.i_q && !f.dc);

        let dv2 = 3.2f64.powi(2) - 6.25;
        let (o, f) = apply_limits(&FullState::new(0.0, 0.0, 0.0, dv2, 0.0), &p);
        assert!((o.dv2 - 2.75).abs() < 1e-15);
        assert!(f.dc);
        assert!((o.v_dc(&p) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn f32_rhs_close_to_f64() {
        let p64 = prm(true);
        let p32: SystemParams<f32> = p64.cast();
        let s = FullState::new(0.61, -0.3, 1.1, 0.4, -0.2);
        let s32 = FullState::new(0.61f32, -0.3, 1.1, 0.4, -0.2);
        let a = rhs_full(&s, &p64, true).unwrap();
        let b = rhs_full(&s32, &p32, true).unwrap();
        for k in 0..5 {
            assert!((a[k] - b[k] as f64).abs() < 1e-3 * a[k].abs().max(1.0));
        }
    }
}
