//! Equilibria of the reduced and full models and their linear classification.

use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::model::{rhs_full, FullState};
use crate::params::SystemParams;
use crate::reduced::{
    alg_pll_fast, alg_tvc, h_of_delta, h_prime_of_delta, p_of_id, p_prime_of_id, rhs_reduced,
    Ordering, SlowLoop,
};
use crate::scalar::{c, Scalar};

/// Coordinate tolerance of the scalar root finder.
pub const ROOT_TOLERANCE: f64 = 1e-12;
/// SEP and UEP closer than this are reported as a saddle-node.
pub const SADDLE_NODE_TOLERANCE: f64 = 1e-9;
/// Required max-norm residual of [`full_equilibrium`].
pub const FULL_RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Stable/unstable equilibrium pair of a reduced model.
///
/// Coordinates are the slow states of the corresponding ordering:
/// `(i_d, dv2)` or `(δ, x_int,pll)`. When `exists` is false both points are
/// set to the curve maximum and `margin` is negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumPair<T> {
    pub slow_loop: SlowLoop,
    pub sep: [T; 2],
    pub uep: [T; 2],
    pub exists: bool,
    /// Curve maximum minus the target (`P_in` or `X_g P_in`).
    pub margin: T,
    /// SEP and UEP have merged.
    pub saddle_node: bool,
    /// Location of the curve maximum.
    pub argmax: T,
}

/// Minimal grid voltage for an equilibrium with `i_q = 0`: `√(2 P_in X_g)`.
pub fn existence_threshold<T: Scalar>(prm: &SystemParams<T>) -> T {
    (c::<T>(2.0) * prm.p_in * prm.x_g).max(T::zero()).sqrt()
}

/// Golden-section search for the maximiser of a unimodal `f` on `[a, b]`.
pub fn golden_max<T: Scalar>(mut f: impl FnMut(T) -> Result<T>, a: T, b: T) -> Result<T> {
    let g = (c::<T>(5.0).sqrt() - T::one()) / c(2.0);
    let (mut a, mut b) = (a, b);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    let tol = c::<T>(ROOT_TOLERANCE);
    for _ in 0..200 {
        if (b - a).abs() <= tol * (T::one() + a.abs().max(b.abs())) {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2)?;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1)?;
        }
    }
    Ok((a + b) / c(2.0))
}

/// Root of `f` on `[lo, hi]` by alternating secant (regula falsi) and
/// bisection steps. Requires a sign change or a zero endpoint.
pub fn bracketed_root<T: Scalar>(
    mut f: impl FnMut(T) -> Result<T>,
    lo: T,
    hi: T,
    tol: T,
) -> Result<T> {
    let (mut a, mut b) = (lo, hi);
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa == T::zero() {
        return Ok(a);
    }
    if fb == T::zero() {
        return Ok(b);
    }
    let fail = |a: T, b: T, fa: T, fb: T, it| ModelError::RootNotConverged {
        lo: a.to_f64_lossy(),
        hi: b.to_f64_lossy(),
        f_lo: fa.to_f64_lossy(),
        f_hi: fb.to_f64_lossy(),
        iterations: it,
    };
    if fa.signum() == fb.signum() {
        return Err(fail(a, b, fa, fb, 0));
    }
    for it in 0..400 {
        // In single precision `tol` may be below the spacing of floats here.
        let floor = T::epsilon() * c(4.0) * a.abs().max(b.abs());
        if (b - a).abs() <= tol.max(floor) {
            return Ok(if fa.abs() < fb.abs() { a } else { b });
        }
        let mid = (a + b) / c(2.0);
        let x = if it % 2 == 0 {
            let s = b - fb * (b - a) / (fb - fa);
            if s > a.min(b) && s < a.max(b) {
                s
            } else {
                mid
            }
        } else {
            mid
        };
        let fx = f(x)?;
        if fx == T::zero() {
            return Ok(x);
        }
        if fx.signum() == fa.signum() {
            a = x;
            fa = fx;
        } else {
            b = x;
            fb = fx;
        }
    }
    Err(fail(a, b, fa, fb, 400))
}

fn pair_on_curve<T: Scalar>(
    slow_loop: SlowLoop,
    f: impl Fn(T) -> Result<T> + Copy,
    target: T,
    lo: T,
    hi: T,
) -> Result<EquilibriumPair<T>> {
    let argmax = golden_max(f, lo, hi)?;
    let fmax = f(argmax)?;
    let margin = fmax - target;
    let tol = c::<T>(ROOT_TOLERANCE);
    let point = |v: T| [v, T::zero()];
    if margin < T::zero() {
        return Ok(EquilibriumPair {
            slow_loop,
            sep: point(argmax),
            uep: point(argmax),
            exists: false,
            margin,
            saddle_node: false,
            argmax,
        });
    }
    let g = |x: T| f(x).map(|v| v - target);
    // When the curve does not cross the target before the domain edge (for
    // instance P_in = 0, or a TVC-lifted curve), the edge is the equilibrium
    // bound.
    let root = |a: T, b: T, edge: T| -> Result<T> {
        if margin == T::zero() {
            Ok(argmax)
        } else if g(edge)? >= T::zero() {
            Ok(edge)
        } else {
            bracketed_root(g, a, b, tol)
        }
    };
    let sep = root(lo, argmax, lo)?;
    let uep = root(argmax, hi, hi)?;
    Ok(EquilibriumPair {
        slow_loop,
        sep: point(sep),
        uep: point(uep),
        exists: true,
        margin,
        saddle_node: (uep - sep).abs() < c(SADDLE_NODE_TOLERANCE),
        argmax,
    })
}

/// Equilibria of the DVC-slow models: `p(i_d) = P_in`, or `p′(i_d) = P_in`
/// with fast TVC.
pub fn find_dvc_equilibria<T: Scalar>(
    prm: &SystemParams<T>,
    use_tvc: bool,
) -> Result<EquilibriumPair<T>> {
    let edge = prm.u_g / prm.x_g;
    let f = move |i: T| {
        if use_tvc {
            p_prime_of_id(i, prm)
        } else {
            p_of_id(i, prm.i_q_fixed, prm)
        }
    };
    let mut pair = pair_on_curve(SlowLoop::Dvc, f, prm.p_in, T::zero(), edge)?;
    if !pair.exists {
        pair.margin = pair.margin.min(-T::epsilon());
    }
    Ok(pair)
}

/// Equilibria of the PLL-slow models: `h(δ) = X_g P_in`, or `h′(δ) = X_g P_in`
/// with fast TVC, searched on `[0, π/2]`.
pub fn find_pll_equilibria<T: Scalar>(
    prm: &SystemParams<T>,
    use_tvc: bool,
) -> Result<EquilibriumPair<T>> {
    let f = move |d: T| {
        Ok(if use_tvc {
            h_prime_of_delta(d, prm)
        } else {
            h_of_delta(d, prm.i_q_fixed, prm)
        })
    };
    pair_on_curve(
        SlowLoop::Pll,
        f,
        prm.x_g * prm.p_in,
        T::zero(),
        T::FRAC_PI_2(),
    )
}

/// Equilibrium pair of the reduced model for `ordering`.
pub fn find_equilibria<T: Scalar>(
    ordering: Ordering,
    prm: &SystemParams<T>,
) -> Result<EquilibriumPair<T>> {
    match ordering.slow_loop() {
        SlowLoop::Dvc => find_dvc_equilibria(prm, ordering.uses_tvc()),
        SlowLoop::Pll => find_pll_equilibria(prm, ordering.uses_tvc()),
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve_linear<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if !(a[piv][col].abs() > T::epsilon() * c(1e-3)) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let m = a[r][col] / a[col][col];
            for k in col..n {
                let v = a[col][k];
                a[r][k] = a[r][k] - m * v;
            }
            b[r] = b[r] - m * b[col];
        }
    }
    let mut x = vec![T::zero(); n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for k in r + 1..n {
            s = s - a[r][k] * x[k];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}


/// Damped Newton iteration on `f(x) = 0` with a central-difference Jacobian.
///
/// Returns the best iterate and its max-norm residual; stops early once the
/// residual is below `tol` or no damped step reduces it.
pub fn newton<T: Scalar>(
    f: impl Fn(&[T]) -> Result<Vec<T>>,
    x0: Vec<T>,
    tol: T,
    max_iter: usize,
) -> Result<(Vec<T>, T)> {
    let n = x0.len();
    let mut x = x0;
    let mut r = f(&x)?;
    let mut rn = crate::scalar::max_abs(&r);
    for _ in 0..max_iter {
        if rn < tol {
            break;
        }
        let mut jac = vec![vec![T::zero(); n]; n];
        for j in 0..n {
            let h = T::epsilon().cbrt() * x[j].abs().max(T::one());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] = x[j] + h;
            xm[j] = x[j] - h;
            let fp = f(&xp)?;
            let fm = f(&xm)?;
            for i in 0..n {
                jac[i][j] = (fp[i] - fm[i]) / (h + h);
            }
        }
        let neg: Vec<T> = r.iter().map(|v| -*v).collect();
        let Some(dx) = solve_linear(jac, neg) else {
            break;
        };
        let mut step = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            let xt: Vec<T> = x.iter().zip(&dx).map(|(a, d)| *a + step * *d).collect();
            if let Ok(rt) = f(&xt) {
                let rtn = crate::scalar::max_abs(&rt);
                if rtn.is_finite() && rtn < rn {
                    x = xt;
                    r = rt;
                    rn = rtn;
                    accepted = true;
                    break;
                }
            }
            step = step / c(2.0);
        }
        if !accepted {
            break;
        }
    }
    Ok((x, rn))
}

/// Equilibrium of the full five-state model, seeded from the reduced SEP.
///
/// Without TVC `i_q` is held at `i_q_fixed` and only four states are solved.
pub fn full_equilibrium<T: Scalar>(prm: &SystemParams<T>, tvc_enabled: bool) -> Result<FullState<T>> {
    let pair = find_dvc_equilibria(prm, tvc_enabled)?;
    if !pair.exists {
        return Err(ModelError::NoEquilibrium {
            detail: format!(
                "reduced power curve peaks {} below P_in = {} at U_g = {}",
                (-pair.margin).to_f64_lossy(),
                prm.p_in,
                prm.u_g
            ),
            threshold: existence_threshold(prm).to_f64_lossy(),
        });
    }
    let i_d = pair.sep[0];
    let delta = alg_pll_fast(i_d, prm)?;
    let i_q = if tvc_enabled {
        alg_tvc(delta, prm)
    } else {
        prm.i_q_fixed
    };
    let seed = FullState::new(delta, T::zero(), i_d, T::zero(), i_q);
    let tol = c::<T>(FULL_RESIDUAL_TOLERANCE) * c(1e-2);
    let n = if tvc_enabled { 5 } else { 4 };
    let to_state = |v: &[T]| {
        FullState::new(
            v[0],
            v[1],
            v[2],
            v[3],
            if tvc_enabled { v[4] } else { prm.i_q_fixed },
        )
    };
    let f = |v: &[T]| -> Result<Vec<T>> {
        let d = rhs_full(&to_state(v), prm, tvc_enabled)?;
        Ok(d[..n].to_vec())
    };
    let x0 = seed.to_array()[..n].to_vec();
    let (sol, res) = newton(f, x0, tol, 60)?;
    if !(res < c(FULL_RESIDUAL_TOLERANCE)) {
        return Err(ModelError::NewtonNotConverged {
            residual: res.to_f64_lossy(),
            iterations: 60,
        });
    }
    Ok(to_state(&sol))
}

/// Linear type of an equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquilibriumKind {
    /// All eigenvalues real and negative.
    StableNode,
    /// All real parts negative, some complex pair.
    StableFocus,
    /// Exactly one eigenvalue with positive real part, the rest negative.
    Saddle,
    /// More than one unstable direction.
    Unstable,
    /// Some eigenvalue on the imaginary axis within tolerance.
    NonHyperbolic,
}

impl EquilibriumKind {
    pub fn is_stable(self) -> bool {
        matches!(self, EquilibriumKind::StableNode | EquilibriumKind::StableFocus)
    }
}

impl fmt::Display for EquilibriumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EquilibriumKind::StableNode => "stable node",
            EquilibriumKind::StableFocus => "stable focus",
            EquilibriumKind::Saddle => "saddle",
            EquilibriumKind::Unstable => "unstable",
            EquilibriumKind::NonHyperbolic => "non-hyperbolic",
        })
    }
}

/// Eigen-analysis of an equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub kind: EquilibriumKind,
    /// Sorted by real part, ascending.
    pub eigenvalues: Vec<Complex64>,
    /// Row-major Jacobian.
    pub jacobian: Vec<Vec<f64>>,
    /// Two eigenvalues coincide within tolerance: eigenvectors may be unreliable.
    pub near_defective: bool,
}

impl Classification {
    /// Real eigenvalue with the largest real part and its eigenvector, for saddles.
    pub fn eigenvector(&self, lambda: f64) -> Option<Vec<f64>> {
        eigenvector(&self.jacobian, lambda)
    }
}

/// Central-difference Jacobian of `f` at `x`.
pub fn jacobian<T: Scalar, const N: usize>(
    f: impl Fn(&[T; N]) -> Result<[T; N]>,
    x: &[T; N],
) -> Result<[[T; N]; N]> {
    let mut j = [[T::zero(); N]; N];
    for k in 0..N {
        let h = T::epsilon().cbrt() * x[k].abs().max(T::one());
        let mut xp = *x;
        let mut xm = *x;
        xp[k] = x[k] + h;
        xm[k] = x[k] - h;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        for i in 0..N {
            j[i][k] = (fp[i] - fm[i]) / (h + h);
        }
    }
    Ok(j)
}

/// Classifies an equilibrium of `ẋ = f(x)` from its Jacobian eigenvalues.
///
/// `residual_tol` bounds the max-norm of `f(point)`.
pub fn classify_equilibrium<T: Scalar, const N: usize>(
    point: &[T; N],
    f: impl Fn(&[T; N]) -> Result<[T; N]>,
    residual_tol: f64,
) -> Result<Classification> {
    let r = f(point)?;
    let res = crate::scalar::max_abs(&r).to_f64_lossy();
    if !(res <= residual_tol) {
        return Err(ModelError::NotAnEquilibrium { residual: res });
    }
    let j = jacobian(&f, point)?;
    let rows: Vec<Vec<f64>> = j
        .iter()
        .map(|row| row.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    Ok(classify_matrix(rows))
}

/// Classifies a Jacobian given row-major.
pub fn classify_matrix(rows: Vec<Vec<f64>>) -> Classification {
    let n = rows.len();
    let m = DMatrix::from_fn(n, n, |i, k| rows[i][k]);
    let mut eig: Vec<Complex64> = m.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap_or(std::cmp::Ordering::Equal).then(a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal)));
    let scale = eig.iter().map(|z| z.norm()).fold(1e-300, f64::max);
    let zero_tol = 1e-9 * scale.max(1.0);
    let near_defective = eig
        .windows(2)
        .any(|w| (w[0] - w[1]).norm() < 1e-6 * scale.max(1.0));
    let pos = eig.iter().filter(|z| z.re > zero_tol).count();
    let neg = eig.iter().filter(|z| z.re < -zero_tol).count();
    let kind = if pos + neg < n {
        EquilibriumKind::NonHyperbolic
    } else if pos == 0 {
        if eig.iter().all(|z| z.im.abs() <= zero_tol) {
            EquilibriumKind::StableNode
        } else {
            EquilibriumKind::StableFocus
        }
    } else if pos == 1 {
        EquilibriumKind::Saddle
    } else {
        EquilibriumKind::Unstable
    };
    Classification {
        kind,
        eigenvalues: eig,
        jacobian: rows,
        near_defective,
    }
}

/// Unit eigenvector of a real eigenvalue `lambda` of `jac` (null vector of
/// `J − λI` by inverse iteration).
pub fn eigenvector(jac: &[Vec<f64>], lambda: f64) -> Option<Vec<f64>> {
    let n = jac.len();
    let shift = lambda + 1e-10 * lambda.abs().max(1.0);
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|k| jac[i][k] - if i == k { shift } else { 0.0 }).collect())
        .collect();
    let mut v = vec![1.0; n];
    for (i, x) in v.iter_mut().enumerate() {
        *x += 0.1 * i as f64;
    }
    for _ in 0..8 {
        let w = solve_linear(a.clone(), v.clone())?;
        let nrm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(nrm > 0.0 && nrm.is_finite()) {
            return None;
        }
        v = w.into_iter().map(|x| x / nrm).collect();
    }
    Some(v)
}

/// Classification of a reduced-model equilibrium.
pub fn classify_reduced<T: Scalar>(
    ordering: Ordering,
    point: [T; 2],
    prm: &SystemParams<T>,
) -> Result<Classification> {
    classify_equilibrium(
        &point,
        |z: &[T; 2]| rhs_reduced(ordering, *z, prm).map(|r| r.rates),
        1e-8,
    )
}

/// Classification of the full-model equilibrium (four states without TVC).
pub fn classify_full<T: Scalar>(
    point: &FullState<T>,
    prm: &SystemParams<T>,
    tvc_enabled: bool,
) -> Result<Classification> {
    let tol = 1e-8;
    if tvc_enabled {
        classify_equilibrium(&point.to_array(), |v| rhs_full(&FullState::from_array(*v), prm, true), tol)
    } else {
        let a = point.to_array();
        let iq = point.i_q;
        classify_equilibrium(
            &[a[0], a[1], a[2], a[3]],
            |v: &[T; 4]| {
                let d = rhs_full(&FullState::new(v[0], v[1], v[2], v[3], iq), prm, false)?;
                Ok([d[0], d[1], d[2], d[3]])
            },
            tol,
        )
    }
}
