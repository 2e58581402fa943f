//! Adaptive Dormand–Prince 5(4) integrator with dense output.
//!
//! States are fixed-size arrays. A post-step hook sees every accepted step and
//! may modify the state (limiters) or stop the run. Failures never panic: the
//! trajectory up to the failure is returned with a [`Status`] diagnostic.

use crate::error::ModelError;
use crate::scalar::{c, Scalar};

/// Tolerances and step limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions<T> {
    pub rtol: T,
    pub atol: T,
    /// Initial step; estimated when `None`.
    pub h_init: Option<T>,
    /// Largest step; unbounded when `None`.
    pub h_max: Option<T>,
    pub max_steps: usize,
    /// Keep interpolation coefficients for [`Solution::sample`].
    pub dense: bool,
}

impl<T: Scalar> Default for OdeOptions<T> {
    fn default() -> Self {
        Self {
            rtol: c(1e-8),
            atol: c(1e-10),
            h_init: None,
            h_max: None,
            max_steps: 2_000_000,
            dense: false,
        }
    }
}

/// What the post-step hook asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    Stop,
}

/// How an integration ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Completed,
    /// The hook requested a stop.
    Stopped,
    /// The step size fell below the resolvable minimum.
    StepUnderflow { t: f64, h: f64 },
    /// The right-hand side failed and step reduction could not avoid it.
    RhsError { t: f64, error: ModelError },
    MaxSteps { t: f64 },
}

impl Status {
    pub fn is_ok(&self) -> bool {
        matches!(self, Status::Completed | Status::Stopped)
    }
}

/// Accepted steps of one integration.
#[derive(Debug, Clone)]
pub struct Solution<T, const N: usize> {
    pub t: Vec<T>,
    pub y: Vec<[T; N]>,
    /// Per-step interpolation data (`t.len() − 1` entries) when requested.
    dense: Vec<[[T; N]; 5]>,
    pub status: Status,
    pub rejected: usize,
}

impl<T: Scalar, const N: usize> Solution<T, N> {
    pub fn last(&self) -> (T, [T; N]) {
        (*self.t.last().expect("non-empty"), *self.y.last().expect("non-empty"))
    }

    pub fn has_dense(&self) -> bool {
        !self.dense.is_empty() || self.t.len() < 2
    }

    /// Dense-output evaluation at `t` (clamped to the integrated range).
    ///
    /// Panics if the solution was produced without `dense = true`.
    pub fn sample(&self, t: T) -> [T; N] {
        assert!(self.has_dense(), "solution has no dense output");
        let n = self.t.len();
        if n == 1 || t <= self.t[0] {
            return self.y[0];
        }
        if t >= self.t[n - 1] {
            return self.y[n - 1];
        }
        let k = match self.t.binary_search_by(|p| p.partial_cmp(&t).expect("finite time")) {
            Ok(k) => return self.y[k],
            Err(k) => k - 1,
        };
        let h = self.t[k + 1] - self.t[k];
        let th = (t - self.t[k]) / h;
        let th1 = T::one() - th;
        let r = &self.dense[k];
        let mut out = [T::zero(); N];
        for i in 0..N {
            out[i] = r[0][i] + th * (r[1][i] + th1 * (r[2][i] + th * (r[3][i] + th1 * r[4][i])));
        }
        out
    }
}

struct Tableau<T> {
    c: [T; 6],
    a: [[T; 6]; 7],
    e: [T; 7],
    d: [T; 7],
}

fn tableau<T: Scalar>() -> Tableau<T> {
    let z = T::zero();
    Tableau {
        c: [z, c(0.2), c(0.3), c(0.8), c(8.0 / 9.0), T::one()],
        a: [
            [z; 6],
            [c(0.2), z, z, z, z, z],
            [c(3.0 / 40.0), c(9.0 / 40.0), z, z, z, z],
            [c(44.0 / 45.0), c(-56.0 / 15.0), c(32.0 / 9.0), z, z, z],
            [
                c(19372.0 / 6561.0),
                c(-25360.0 / 2187.0),
                c(64448.0 / 6561.0),
                c(-212.0 / 729.0),
                z,
                z,
            ],
            [
                c(9017.0 / 3168.0),
                c(-355.0 / 33.0),
                c(46732.0 / 5247.0),
                c(49.0 / 176.0),
                c(-5103.0 / 18656.0),
                z,
            ],
            [
                c(35.0 / 384.0),
                z,
                c(500.0 / 1113.0),
                c(125.0 / 192.0),
                c(-2187.0 / 6784.0),
                c(11.0 / 84.0),
            ],
        ],
        e: [
            c(71.0 / 57600.0),
            z,
            c(-71.0 / 16695.0),
            c(71.0 / 1920.0),
            c(-17253.0 / 339200.0),
            c(22.0 / 525.0),
            c(-1.0 / 40.0),
        ],
        d: [
            c(-12715105075.0 / 11282082432.0),
            z,
            c(87487479700.0 / 32700410799.0),
            c(-10690763975.0 / 1880347072.0),
            c(701980252875.0 / 199316789632.0),
            c(-1453857185.0 / 822651844.0),
            c(69997945.0 / 29380423.0),
        ],
    }
}

fn finite<T: Scalar, const N: usize>(v: &[T; N]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn err_norm<T: Scalar, const N: usize>(
    err: &[T; N],
    y0: &[T; N],
    y1: &[T; N],
    o: &OdeOptions<T>,
) -> T {
    let mut s = T::zero();
    for i in 0..N {
        let sc = o.atol + o.rtol * y0[i].abs().max(y1[i].abs());
        let r = err[i] / sc;
        s = s + r * r;
    }
    (s / T::lit(N as f64)).sqrt()
}

/// Integrates `y' = f(t, y)` from `t0` to `t1 > t0`.
///
/// `hook(t, &mut y)` runs after each accepted step; any modification it makes
/// is kept and the stored sample reflects it.
pub fn integrate<T, const N: usize, F, H>(
    mut f: F,
    t0: T,
    y0: [T; N],
    t1: T,
    opts: &OdeOptions<T>,
    mut hook: H,
) -> Solution<T, N>
where
    T: Scalar,
    F: FnMut(T, &[T; N]) -> Result<[T; N], ModelError>,
    H: FnMut(T, &mut [T; N]) -> StepControl,
{
    let tb = tableau::<T>();
    let mut sol = Solution {
        t: vec![t0],
        y: vec![y0],
        dense: Vec::new(),
        status: Status::Completed,
        rejected: 0,
    };
    if !(t1 > t0) {
        return sol;
    }
    let span = t1 - t0;
    let h_max = opts.h_max.unwrap_or(span).min(span);
    let mut t = t0;
    let mut y = y0;
    let mut k1 = match f(t, &y) {
        Ok(k) if finite(&k) => k,
        Ok(_) => {
            sol.status = Status::RhsError {
                t: t.to_f64_lossy(),
                error: ModelError::InvalidState("non-finite derivative".into()),
            };
            return sol;
        }
        Err(e) => {
            sol.status = Status::RhsError {
                t: t.to_f64_lossy(),
                error: e,
            };
            return sol;
        }
    };
    let mut h = opts
        .h_init
        .unwrap_or_else(|| initial_step(&mut f, t, &y, &k1, opts, h_max))
        .min(h_max);
    let mut steps = 0usize;
    let mut last_reject = false;
    let mut last_error: Option<ModelError> = None;

    loop {
        if steps >= opts.max_steps {
            sol.status = Status::MaxSteps { t: t.to_f64_lossy() };
            return sol;
        }
        let remaining = t1 - t;
        // Stretch the last step to land exactly on t1.
        let last = h >= remaining * c(0.999_999);
        if last {
            h = remaining;
        }
        let h_min = c::<T>(16.0) * T::epsilon() * t.abs().max(span);
        if h < h_min {
            sol.status = match last_error.take() {
                Some(error) => Status::RhsError {
                    t: t.to_f64_lossy(),
                    error,
                },
                None => Status::StepUnderflow {
                    t: t.to_f64_lossy(),
                    h: h.to_f64_lossy(),
                },
            };
            return sol;
        }

        // Stages.
        let mut k = [[T::zero(); N]; 7];
        k[0] = k1;
        let mut failed = false;
        for s in 1..7 {
            let mut ys = y;
            for i in 0..N {
                let mut acc = T::zero();
                for j in 0..s {
                    acc = acc + tb.a[s][j] * k[j][i];
                }
                ys[i] = y[i] + h * acc;
            }
            let ts = if s == 6 { t + h } else { t + tb.c[s] * h };
            match f(ts, &ys) {
                Ok(v) if finite(&v) => k[s] = v,
                Ok(_) => {
                    failed = true;
                    break;
                }
                Err(e) => {
                    last_error = Some(e);
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            sol.rejected += 1;
            h = h * c(0.25);
            last_reject = true;
            continue;
        }
        let mut y_new = y;
        let mut err = [T::zero(); N];
        for i in 0..N {
            let mut acc = T::zero();
            let mut e = T::zero();
            for j in 0..6 {
                acc = acc + tb.a[6][j] * k[j][i];
            }
            for j in 0..7 {
                e = e + tb.e[j] * k[j][i];
            }
            y_new[i] = y[i] + h * acc;
            err[i] = h * e;
        }
        let en = err_norm(&err, &y, &y_new, opts);
        if !en.is_finite() || en > T::one() {
            sol.rejected += 1;
            let fac = if en.is_finite() {
                (c::<T>(0.9) * en.powf(c(-0.2))).max(c(0.2))
            } else {
                c(0.2)
            };
            h = h * fac;
            last_reject = true;
            continue;
        }
        last_error = None;
        steps += 1;

        if opts.dense {
            let mut r = [[T::zero(); N]; 5];
            for i in 0..N {
                let ydiff = y_new[i] - y[i];
                let bspl = h * k[0][i] - ydiff;
                r[0][i] = y[i];
                r[1][i] = ydiff;
                r[2][i] = bspl;
                r[3][i] = ydiff - h * k[6][i] - bspl;
                let mut d = T::zero();
                for j in 0..7 {
                    d = d + tb.d[j] * k[j][i];
                }
                r[4][i] = h * d;
            }
            sol.dense.push(r);
        }

        let t_new = if last { t1 } else { t + h };
        let before = y_new;
        let ctl = hook(t_new, &mut y_new);
        t = t_new;
        y = y_new;
        sol.t.push(t);
        sol.y.push(y);
        if ctl == StepControl::Stop {
            sol.status = Status::Stopped;
            return sol;
        }
        if last {
            return sol;
        }
        if before == y_new {
            k1 = k[6];
        } else {
            match f(t, &y) {
                Ok(v) if finite(&v) => k1 = v,
                Ok(_) => {
                    sol.status = Status::RhsError {
                        t: t.to_f64_lossy(),
                        error: ModelError::InvalidState("non-finite derivative".into()),
                    };
                    return sol;
                }
                Err(error) => {
                    sol.status = Status::RhsError {
                        t: t.to_f64_lossy(),
                        error,
                    };
                    return sol;
                }
            }
        }
        let mut fac = (c::<T>(0.9) * en.max(c(1e-10)).powf(c(-0.2))).min(c(10.0)).max(c(0.2));
        if last_reject {
            fac = fac.min(T::one());
        }
        last_reject = false;
        h = (h * fac).min(h_max);
    }
}

/// Integrates without a hook.
pub fn integrate_plain<T, const N: usize, F>(
    f: F,
    t0: T,
    y0: [T; N],
    t1: T,
    opts: &OdeOptions<T>,
) -> Solution<T, N>
where
    T: Scalar,
    F: FnMut(T, &[T; N]) -> Result<[T; N], ModelError>,
{
    integrate(f, t0, y0, t1, opts, |_, _| StepControl::Continue)
}

/// Starting step from the usual two-evaluation heuristic.
fn initial_step<T, const N: usize, F>(
    f: &mut F,
    t: T,
    y: &[T; N],
    f0: &[T; N],
    o: &OdeOptions<T>,
    h_max: T,
) -> T
where
    T: Scalar,
    F: FnMut(T, &[T; N]) -> Result<[T; N], ModelError>,
{
    let scale = |i: usize| o.atol + o.rtol * y[i].abs();
    let rms = |v: &dyn Fn(usize) -> T| {
        let mut s = T::zero();
        for i in 0..N {
            let r = v(i);
            s = s + r * r;
        }
        (s / T::lit(N as f64)).sqrt()
    };
    let d0 = rms(&|i| y[i] / scale(i));
    let d1 = rms(&|i| f0[i] / scale(i));
    let small = c::<T>(1e-5);
    let mut h0 = if d0 < small || d1 < small {
        c(1e-6)
    } else {
        c::<T>(0.01) * d0 / d1
    };
    h0 = h0.min(h_max);
    let mut y1 = *y;
    for i in 0..N {
        y1[i] = y[i] + h0 * f0[i];
    }
    let d2 = match f(t + h0, &y1) {
        Ok(f1) if finite(&f1) => rms(&|i| (f1[i] - f0[i]) / scale(i)) / h0,
        _ => return h0 * c(0.01),
    };
    let dm = d1.max(d2);
    let h1 = if dm <= c(1e-15) {
        (h0 * c(1e-3)).max(c(1e-6))
    } else {
        (c::<T>(0.01) / dm).powf(c(0.2))
    };
    (c::<T>(100.0) * h0).min(h1).min(h_max)
}
