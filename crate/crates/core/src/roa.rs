//! Regions of attraction of the two-state reduced models.
//!
//! The boundary of a region is the stable manifold of the saddle (UEP),
//! traced by backward integration from the saddle along its stable
//! eigenvector. Together with the edges of a domain box it forms a polygon
//! used for membership tests. A brute-force grid of forward simulations
//! serves as an independent oracle.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibria::{classify_equilibrium, find_equilibria, find_dvc_equilibria, EquilibriumKind};
use crate::error::{ModelError, Result};
use crate::model::{dv2_band, rhs_full, FullState};
use crate::ode::{integrate, OdeOptions, StepControl};
use crate::params::{BandwidthSpec, SystemParams};
use crate::reduced::{
    pll_fast_validity, rhs_reduced, BandwidthOrdering, Ordering, SlowLoop, COS_DELTA_TOLERANCE,
    SEPARATION_THRESHOLD,
};
use crate::scalar::Scalar;

/// A planar system whose region of attraction can be computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RoaSystem {
    /// A reduced model: `(i_d, dv2)` or `(δ, x_int,pll)`.
    Reduced { ordering: Ordering },
    /// The PLL alone with `i_d` held fixed: `(δ, x_int,pll)`.
    PllAlone { i_d: f64 },
}

impl RoaSystem {
    pub fn labels(&self) -> [&'static str; 2] {
        match self {
            RoaSystem::Reduced { ordering } => ordering.labels(),
            RoaSystem::PllAlone { .. } => ["delta", "x_int_pll"],
        }
    }

    /// Right-hand side at `z`.
    pub fn rhs(&self, z: [f64; 2], prm: &SystemParams<f64>) -> Result<[f64; 2]> {
        match *self {
            RoaSystem::Reduced { ordering } => rhs_reduced(ordering, z, prm).map(|r| r.rates),
            RoaSystem::PllAlone { i_d } => {
                let s = FullState::new(z[0], z[1], i_d, 0.0, prm.i_q_fixed);
                let r = rhs_full(&s, prm, false)?;
                Ok([r[0], r[1]])
            }
        }
    }

    /// Stable and unstable equilibria `(sep, uep)`.
    pub fn equilibria(&self, prm: &SystemParams<f64>) -> Result<([f64; 2], [f64; 2])> {
        match *self {
            RoaSystem::Reduced { ordering } => {
                let pair = find_equilibria(ordering, prm)?;
                if !pair.exists {
                    return Err(ModelError::NoEquilibrium {
                        detail: format!("reduced {ordering} model has no SEP/UEP pair"),
                        threshold: crate::equilibria::existence_threshold(prm),
                    });
                }
                Ok((pair.sep, pair.uep))
            }
            RoaSystem::PllAlone { i_d } => {
                let s = (prm.x_g * i_d + prm.r_g * prm.i_q_fixed) / prm.u_g;
                if !(s.abs() < 1.0) {
                    return Err(ModelError::PllFastNoSolution {
                        lhs: (prm.x_g * i_d).abs(),
                        u_g: prm.u_g,
                    });
                }
                let d = s.asin();
                Ok(([d, 0.0], [std::f64::consts::PI - d, 0.0]))
            }
        }
    }

    /// Default domain box: three SEP–UEP spans around the SEP in the first
    /// coordinate, clipped to where the model is defined; the physical DC
    /// band for `dv2`, or ±3 spans scaled by `k_p,pll U_g` for `x_int,pll`.
    pub fn default_box(&self, prm: &SystemParams<f64>, sep: [f64; 2], uep: [f64; 2]) -> RoaBox {
        let span = (uep[0] - sep[0]).abs().max(1e-3);
        let (lo1, hi1) = match self {
            RoaSystem::Reduced { ordering } if ordering.slow_loop() == SlowLoop::Dvc => dv2_band(prm),
            _ => {
                let w = 3.0 * span * prm.k_p_pll * prm.u_g;
                (-w, w)
            }
        };
        RoaBox {
            lo: [sep[0] - 3.0 * span, lo1],
            hi: [sep[0] + 3.0 * span, hi1],
        }
        .intersect(&self.domain(prm))
    }

    /// Where the model is defined: `i_d < U_g/X_g` for a fast PLL,
    /// `cos δ > 0` for a fast DVC.
    pub fn domain(&self, prm: &SystemParams<f64>) -> RoaBox {
        let inf = f64::INFINITY;
        let mut b = RoaBox {
            lo: [-inf, -inf],
            hi: [inf, inf],
        };
        if let RoaSystem::Reduced { ordering } = self {
            match ordering.slow_loop() {
                SlowLoop::Dvc => b.hi[0] = prm.u_g / prm.x_g * (1.0 - 1e-9),
                SlowLoop::Pll => {
                    let edge = COS_DELTA_TOLERANCE.acos();
                    b.lo[0] = -edge;
                    b.hi[0] = edge;
                }
            }
        }
        b
    }

    /// Period of the field in the first coordinate: `2π` in `δ` for the PLL
    /// alone, none for the reduced models (their domain is narrower).
    pub fn period(&self) -> Option<f64> {
        match self {
            RoaSystem::PllAlone { .. } => Some(std::f64::consts::TAU),
            RoaSystem::Reduced { .. } => None,
        }
    }

    /// Slowest loop bandwidth of the planar system, rad/s.
    fn slow_bandwidth(&self, prm: &SystemParams<f64>) -> f64 {
        match self {
            RoaSystem::Reduced { ordering } => match ordering.slow_loop() {
                SlowLoop::Dvc => prm.omega_dvc(),
                SlowLoop::Pll => prm.omega_pll(),
            },
            RoaSystem::PllAlone { .. } => prm.omega_pll(),
        }
    }
}

impl fmt::Display for RoaSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoaSystem::Reduced { ordering } => write!(f, "{ordering}"),
            RoaSystem::PllAlone { i_d } => write!(f, "pll-alone(i_d={i_d})"),
        }
    }
}

/// Axis-aligned rectangle in slow coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoaBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl RoaBox {
    pub fn width(&self) -> [f64; 2] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1]]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    /// Smallest box containing both.
    pub fn union(&self, o: &RoaBox) -> RoaBox {
        RoaBox {
            lo: [self.lo[0].min(o.lo[0]), self.lo[1].min(o.lo[1])],
            hi: [self.hi[0].max(o.hi[0]), self.hi[1].max(o.hi[1])],
        }
    }

    fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        let w = self.width();
        [(p[0] - self.lo[0]) / w[0], (p[1] - self.lo[1]) / w[1]]
    }

    /// Centre of cell `(i, j)` of an `nx × ny` grid.
    pub fn cell_center(&self, nx: usize, ny: usize, i: usize, j: usize) -> [f64; 2] {
        let w = self.width();
        [
            self.lo[0] + (i as f64 + 0.5) * w[0] / nx as f64,
            self.lo[1] + (j as f64 + 0.5) * w[1] / ny as f64,
        ]
    }

    /// Box grown by `factor` widths on every side.
    pub fn enlarged(&self, factor: f64) -> RoaBox {
        let w = self.width();
        RoaBox {
            lo: [self.lo[0] - factor * w[0], self.lo[1] - factor * w[1]],
            hi: [self.hi[0] + factor * w[0], self.hi[1] + factor * w[1]],
        }
    }

    pub fn intersect(&self, o: &RoaBox) -> RoaBox {
        RoaBox {
            lo: [self.lo[0].max(o.lo[0]), self.lo[1].max(o.lo[1])],
            hi: [self.hi[0].min(o.hi[0]), self.hi[1].min(o.hi[1])],
        }
    }

    pub fn area(&self) -> f64 {
        let w = self.width();
        w[0] * w[1]
    }
}

/// A constraint `coordinate < value` (or `>`) bounding where the fast
/// subsystem is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityLine {
    pub coordinate: usize,
    pub value: f64,
    /// Valid side is below `value`.
    pub below: bool,
    pub label: String,
}

impl ValidityLine {
    pub fn admits(&self, p: [f64; 2]) -> bool {
        if self.below {
            p[self.coordinate] < self.value
        } else {
            p[self.coordinate] > self.value
        }
    }
}

/// Manifold tracing settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoaOptions {
    /// Domain box; [`RoaSystem::default_box`] when `None`.
    pub bbox: Option<RoaBox>,
    /// Cap on the arc length of each branch, in box-normalised units.
    pub arc_length_cap: f64,
    /// Initial offset from the UEP along the stable eigenvector, box-normalised.
    pub eta: f64,
    /// Curve tolerance in box-normalised units; membership is indeterminate
    /// within twice this distance of the boundary.
    pub tolerance: f64,
}

impl Default for RoaOptions {
    fn default() -> Self {
        Self {
            bbox: None,
            arc_length_cap: 50.0,
            eta: 1e-5,
            tolerance: 1e-3,
        }
    }
}

/// Region-of-attraction boundary: the two stable-manifold branches of the UEP.
#[derive(Debug, Clone, PartialEq)]
pub struct RoaBoundary {
    pub system: RoaSystem,
    pub sep: [f64; 2],
    pub uep: [f64; 2],
    /// Both branches start at the UEP.
    pub branches: Branches,
    /// A branch ended before leaving the box (arc-length cap or solver failure).
    pub truncated: [bool; 2],
    pub bbox: RoaBox,
    pub tolerance: f64,
    /// Fast-subsystem validity constraints in these coordinates.
    pub validity_lines: Vec<ValidityLine>,
    /// Enlarged box used for membership.
    pub outer: RoaBox,
    /// Branches traced within `outer`.
    pub extended: Branches,
    /// The field repeats with this period in the first coordinate; the
    /// region is then also bounded by the branches shifted one period
    /// towards the SEP.
    pub period: Option<f64>,
    /// SEP side of each boundary curve, normalised to `outer`; the region is
    /// their intersection.
    polygons: Vec<Vec<[f64; 2]>>,
}

/// Membership verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Membership {
    Inside,
    Outside,
    Indeterminate,
}

impl fmt::Display for Membership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Membership::Inside => "inside",
            Membership::Outside => "outside",
            Membership::Indeterminate => "indeterminate",
        })
    }
}

fn validity_lines(system: &RoaSystem, prm: &SystemParams<f64>, bbox: &RoaBox) -> Vec<ValidityLine> {
    match system {
        RoaSystem::Reduced { ordering } => match ordering.slow_loop() {
            SlowLoop::Dvc => {
                let mut v = vec![ValidityLine {
                    coordinate: 0,
                    value: prm.u_g / prm.x_g,
                    below: true,
                    label: "fast PLL equilibrium exists: i_d < U_g/X_g".into(),
                }];
                // First i_d (from the SEP side) where a fast-PLL clause fails.
                let (lo, hi) = (bbox.lo[0].max(0.0), prm.u_g / prm.x_g);
                let n = 2000;
                let mut prev = lo;
                for k in 1..=n {
                    let i_d = lo + (hi - lo) * k as f64 / n as f64;
                    if let Some(clause) = pll_fast_validity(i_d, prm) {
                        let (mut a, mut b) = (prev, i_d);
                        for _ in 0..60 {
                            let m = 0.5 * (a + b);
                            if pll_fast_validity(m, prm).is_some() {
                                b = m;
                            } else {
                                a = m;
                            }
                        }
                        if b < v[0].value {
                            v.push(ValidityLine {
                                coordinate: 0,
                                value: b,
                                below: true,
                                label: format!("fast PLL valid: {clause}"),
                            });
                        }
                        break;
                    }
                    prev = i_d;
                }
                v
            }
            SlowLoop::Pll => vec![ValidityLine {
                coordinate: 0,
                value: std::f64::consts::FRAC_PI_2,
                below: true,
                label: "fast DVC stable: cos(delta) > 0".into(),
            }],
        },
        RoaSystem::PllAlone { .. } => Vec::new(),
    }
}

/// Traces the stable manifold of the UEP of `system` in both directions.
///
/// Each branch is integrated backward in time from `uep ± η·v_s` until it
/// leaves the box or exceeds the arc-length cap; a solver failure truncates
/// the branch and sets its flag. Membership uses the same branches traced in
/// a box enlarged within the model's domain, since a branch may leave the
/// box and re-enter it.
pub fn trace_stable_manifold<T: Scalar>(
    system: RoaSystem,
    prm: &SystemParams<T>,
    opts: &RoaOptions,
) -> Result<RoaBoundary> {
    let prm = prm.cast::<f64>();
    let (sep, uep) = system.equilibria(&prm)?;
    let bbox = opts.bbox.unwrap_or_else(|| system.default_box(&prm, sep, uep));
    let f = |z: [f64; 2]| system.rhs(z, &prm);
    let (branches, truncated) = trace_planar(f, uep, &bbox, opts)?;
    let outer = bbox.enlarged(OUTER_FACTOR).intersect(&system.domain(&prm));
    let w = bbox.width();
    let cap = opts.arc_length_cap * (1.0 + 2.0 * OUTER_FACTOR);
    let (extended, _) = trace_planar(
        f,
        uep,
        &outer,
        &RoaOptions {
            arc_length_cap: cap,
            eta: opts.eta * (outer.width()[0] / w[0]).min(outer.width()[1] / w[1]),
            ..*opts
        },
    )?;
    let period = system.period();
    let polygons = boundary_images(uep, sep, period)
        .into_iter()
        .map(|dx| {
            close_on_perimeter(
                extended[0]
                    .iter()
                    .rev()
                    .chain(extended[1].iter().skip(1))
                    .map(|p| outer.normalize([p[0] + dx, p[1]]))
                    .collect(),
                outer.normalize(sep),
            )
        })
        .collect();
    Ok(RoaBoundary {
        system,
        sep,
        uep,
        validity_lines: validity_lines(&system, &prm, &bbox),
        branches,
        truncated,
        bbox,
        tolerance: opts.tolerance,
        period,
        polygons,
        outer,
        extended,
    })
}

/// Shifts of the traced manifold that bound the region: itself, and for a
/// periodic field its copy one period towards the SEP.
fn boundary_images(uep: [f64; 2], sep: [f64; 2], period: Option<f64>) -> Vec<f64> {
    match period {
        Some(p) => vec![0.0, (sep[0] - uep[0]).signum() * p],
        None => vec![0.0],
    }
}

/// The two branches of a stable manifold, each starting at the saddle.
pub type Branches = [Vec<[f64; 2]>; 2];

/// Enlargement of the domain box, in box widths per side, used for membership.
const OUTER_FACTOR: f64 = 4.5;

/// Stable-manifold branches of the saddle `uep` of the planar field `f`,
/// traced backward in time within `bbox`. Both branches start at `uep`.
pub fn trace_planar<F>(
    f: F,
    uep: [f64; 2],
    bbox: &RoaBox,
    opts: &RoaOptions,
) -> Result<(Branches, [bool; 2])>
where
    F: Fn([f64; 2]) -> Result<[f64; 2]>,
{
    let cls = classify_equilibrium(&uep, |z: &[f64; 2]| f(*z), 1e-7)?;
    if cls.kind != EquilibriumKind::Saddle {
        return Err(ModelError::NotASaddle {
            eigenvalues: format!("{:?}", cls.eigenvalues),
        });
    }
    let lambda_s = cls.eigenvalues[0].re;
    let v = cls.eigenvector(lambda_s).ok_or_else(|| ModelError::NotASaddle {
        eigenvalues: format!("{:?} (no stable eigenvector)", cls.eigenvalues),
    })?;
    let w = bbox.width();
    let step = opts.eta / (v[0] / w[0]).abs().max((v[1] / w[1]).abs());
    let mut branches: Branches = [Vec::new(), Vec::new()];
    let mut truncated = [false; 2];
    for (b, sign) in [1.0, -1.0].into_iter().enumerate() {
        let z0 = [uep[0] + sign * step * v[0], uep[1] + sign * step * v[1]];
        let (mut pts, left) = trace_backward(&f, z0, bbox, opts.arc_length_cap, lambda_s.abs());
        pts.insert(0, uep);
        truncated[b] = !left;
        branches[b] = pts;
    }
    Ok((branches, truncated))
}

/// Backward orbit from `z0` until it leaves `bbox` (last point clipped to the
/// box edge) or exceeds `arc_cap` box-normalised length. Returns the samples
/// and whether the orbit left the box.
fn trace_backward<F>(f: &F, z0: [f64; 2], bbox: &RoaBox, arc_cap: f64, rate: f64) -> (Vec<[f64; 2]>, bool)
where
    F: Fn([f64; 2]) -> Result<[f64; 2]>,
{
    let ode = OdeOptions {
        rtol: 1e-10,
        atol: 1e-12,
        h_max: Some(0.2 / rate),
        max_steps: 50_000,
        ..OdeOptions::default()
    };
    let mut arc = 0.0;
    let mut prev = bbox.normalize(z0);
    let mut left = false;
    let sol = integrate(
        |_, z| f(*z).map(|r| [-r[0], -r[1]]),
        0.0,
        z0,
        1e4 / rate,
        &ode,
        |_, z| {
            let n = bbox.normalize(*z);
            arc += ((n[0] - prev[0]).powi(2) + (n[1] - prev[1]).powi(2)).sqrt();
            prev = n;
            if !bbox.contains(*z) {
                left = true;
                StepControl::Stop
            } else if arc > arc_cap {
                StepControl::Stop
            } else {
                StepControl::Continue
            }
        },
    );
    let mut pts = sol.y;
    if left && pts.len() >= 2 {
        let k = pts.len() - 1;
        pts[k] = clip_to_box(bbox, pts[k - 1], pts[k]);
    }
    (pts, left)
}

/// Point where the segment from `a` (inside) to `b` (outside) crosses the box.
fn clip_to_box(bbox: &RoaBox, a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let mut t = 1.0f64;
    for i in 0..2 {
        let d = b[i] - a[i];
        if b[i] > bbox.hi[i] && d != 0.0 {
            t = t.min((bbox.hi[i] - a[i]) / d);
        }
        if b[i] < bbox.lo[i] && d != 0.0 {
            t = t.min((bbox.lo[i] - a[i]) / d);
        }
    }
    let t = t.clamp(0.0, 1.0);
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Perimeter coordinate in `[0, 4)` of a point on the unit square, counter-
/// clockwise from the origin; interior points are first moved to the nearest edge.
fn to_perimeter(p: [f64; 2]) -> ([f64; 2], f64) {
    let [x, y] = [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)];
    let d = [y, 1.0 - x, 1.0 - y, x];
    let edge = (0..4)
        .min_by(|&a, &b| d[a].total_cmp(&d[b]))
        .expect("four edges");
    match edge {
        0 => ([x, 0.0], x),
        1 => ([1.0, y], 1.0 + y),
        2 => ([x, 1.0], 2.0 + (1.0 - x)),
        _ => ([0.0, y], (3.0 + (1.0 - y)) % 4.0),
    }
}

/// Closes the curve `core` (unit-square coordinates, both ends on or near
/// the perimeter) along the perimeter in whichever direction encloses `probe`.
fn close_on_perimeter(core: Vec<[f64; 2]>, probe: [f64; 2]) -> Vec<[f64; 2]> {
    let (end1, s_from) = to_perimeter(*core.last().expect("non-empty curve"));
    let (end0, s_to) = to_perimeter(core[0]);
    let corners = [(0.0, [0.0, 0.0]), (1.0, [1.0, 0.0]), (2.0, [1.0, 1.0]), (3.0, [0.0, 1.0])];

    let walk = |ccw: bool| -> Vec<[f64; 2]> {
        let mut poly = core.clone();
        poly.push(end1);
        let span = if ccw {
            (s_to - s_from).rem_euclid(4.0)
        } else {
            (s_from - s_to).rem_euclid(4.0)
        };
        let mut cs: Vec<(f64, [f64; 2])> = corners
            .iter()
            .map(|&(s, c)| {
                let d = if ccw {
                    (s - s_from).rem_euclid(4.0)
                } else {
                    (s_from - s).rem_euclid(4.0)
                };
                (d, c)
            })
            .filter(|(d, _)| *d > 0.0 && *d < span)
            .collect();
        cs.sort_by(|a, b| a.0.total_cmp(&b.0));
        poly.extend(cs.into_iter().map(|(_, c)| c));
        poly.push(end0);
        poly
    };
    let a = walk(true);
    let b = walk(false);
    match (winding(&a, probe) != 0, winding(&b, probe) != 0) {
        (true, false) => a,
        (false, true) => b,
        _ => {
            if polygon_area(&a) <= polygon_area(&b) {
                a
            } else {
                b
            }
        }
    }
}

fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Winding number of closed polygon `poly` around `p`.
fn winding(poly: &[[f64; 2]], p: [f64; 2]) -> i32 {
    let n = poly.len();
    let mut w = 0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1]);
        if a[1] <= p[1] {
            if b[1] > p[1] && cross > 0.0 {
                w += 1;
            }
        } else if b[1] <= p[1] && cross < 0.0 {
            w -= 1;
        }
    }
    w
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let l2 = d[0] * d[0] + d[1] * d[1];
    let t = if l2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * d[0] - p[0], a[1] + t * d[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

impl RoaBoundary {
    /// Box-normalised distance from `p` to the manifold branches.
    pub fn distance_to_boundary(&self, p: [f64; 2]) -> f64 {
        let q = self.bbox.normalize(p);
        let mut d = f64::INFINITY;
        for dx in boundary_images(self.uep, self.sep, self.period) {
            let n = |a: [f64; 2]| self.bbox.normalize([a[0] + dx, a[1]]);
            for w in self.extended.iter().flat_map(|b| b.windows(2)) {
                d = d.min(segment_distance(q, n(w[0]), n(w[1])));
            }
        }
        d
    }

    /// Grid-counted area of the region inside the box (`n × n` cells).
    pub fn area(&self, bbox: &RoaBox, n: usize) -> f64 {
        let inside = (0..n * n)
            .into_par_iter()
            .filter(|k| in_roa(bbox.cell_center(n, n, k % n, k / n), self) == Membership::Inside)
            .count();
        inside as f64 / (n * n) as f64 * bbox.area()
    }

    /// Samples of both branches as `(branch, s0, s1)` rows.
    pub fn points(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        self.branches
            .iter()
            .enumerate()
            .flat_map(|(b, pts)| pts.iter().map(move |p| (b, *p)))
    }
}

/// Membership of `point` in the region bounded by `boundary` and its box:
/// indeterminate within twice the curve tolerance of a branch, outside
/// beyond the box.
pub fn in_roa(point: [f64; 2], boundary: &RoaBoundary) -> Membership {
    if boundary.distance_to_boundary(point) <= 2.0 * boundary.tolerance {
        return Membership::Indeterminate;
    }
    if !boundary.bbox.contains(point) {
        return Membership::Outside;
    }
    let q = boundary.outer.normalize(point);
    if boundary.polygons.iter().all(|poly| winding(poly, q) != 0) {
        Membership::Inside
    } else {
        Membership::Outside
    }
}

/// Grid oracle settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub bbox: RoaBox,
    pub nx: usize,
    pub ny: usize,
    /// Simulated time per cell; derived from the slow bandwidth and the SEP
    /// decay rate when `None`.
    pub horizon: Option<f64>,
    /// Max-norm convergence radius around the SEP.
    pub ball: f64,
}

impl GridSpec {
    pub fn new(bbox: RoaBox, n: usize) -> Self {
        Self {
            bbox,
            nx: n,
            ny: n,
            horizon: None,
            ball: 1e-3,
        }
    }
}

/// Brute-force membership grid, row-major with `i` (first coordinate) fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RoaGrid {
    pub spec: GridSpec,
    pub horizon: f64,
    pub cells: Vec<Membership>,
}

impl RoaGrid {
    pub fn get(&self, i: usize, j: usize) -> Membership {
        self.cells[j * self.spec.nx + i]
    }
}

/// Integrates the planar system forward from every cell centre and marks the
/// cell inside when it enters the convergence ball, outside when it leaves
/// the model's domain or a box ten times the grid's, indeterminate otherwise.
pub fn brute_force_roa<T: Scalar>(
    system: RoaSystem,
    prm: &SystemParams<T>,
    grid: &GridSpec,
) -> Result<RoaGrid> {
    let prm = prm.cast::<f64>();
    let (sep, _) = system.equilibria(&prm)?;
    let cls = classify_equilibrium(&sep, |z: &[f64; 2]| system.rhs(*z, &prm), 1e-7)?;
    let decay = cls
        .eigenvalues
        .iter()
        .map(|z| -z.re)
        .fold(f64::INFINITY, f64::min);
    let horizon = grid
        .horizon
        .unwrap_or_else(|| (20.0 / system.slow_bandwidth(&prm)).max(25.0 / decay.max(1e-6)));
    let outer = grid.bbox.enlarged(OUTER_FACTOR);
    let ode = OdeOptions::<f64> {
        rtol: 1e-8,
        atol: 1e-10,
        ..OdeOptions::default()
    };
    let cells = (0..grid.nx * grid.ny)
        .into_par_iter()
        .map(|k| {
            let z0 = grid.bbox.cell_center(grid.nx, grid.ny, k % grid.nx, k / grid.nx);
            let mut verdict = Membership::Indeterminate;
            let sol = integrate(
                |_, z| system.rhs(*z, &prm),
                0.0,
                z0,
                horizon,
                &ode,
                |_, z| {
                    if (z[0] - sep[0]).abs().max((z[1] - sep[1]).abs()) <= grid.ball {
                        verdict = Membership::Inside;
                        StepControl::Stop
                    } else if !outer.contains(*z) {
                        verdict = Membership::Outside;
                        StepControl::Stop
                    } else {
                        StepControl::Continue
                    }
                },
            );
            match sol.status {
                crate::ode::Status::RhsError { .. } | crate::ode::Status::StepUnderflow { .. } => {
                    if verdict == Membership::Indeterminate {
                        Membership::Outside
                    } else {
                        verdict
                    }
                }
                _ => verdict,
            }
        })
        .collect();
    Ok(RoaGrid {
        spec: *grid,
        horizon,
        cells,
    })
}

/// Agreement between the manifold test and the grid oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    /// Cells where both verdicts are determinate.
    pub compared: usize,
    pub agree: usize,
    pub indeterminate: usize,
}

impl Agreement {
    pub fn fraction(&self) -> f64 {
        if self.compared == 0 {
            0.0
        } else {
            self.agree as f64 / self.compared as f64
        }
    }
}

pub fn oracle_agreement(boundary: &RoaBoundary, grid: &RoaGrid) -> Agreement {
    let s = &grid.spec;
    let mut a = Agreement {
        compared: 0,
        agree: 0,
        indeterminate: 0,
    };
    for j in 0..s.ny {
        for i in 0..s.nx {
            let g = grid.get(i, j);
            let m = in_roa(s.bbox.cell_center(s.nx, s.ny, i, j), boundary);
            if g == Membership::Indeterminate || m == Membership::Indeterminate {
                a.indeterminate += 1;
                continue;
            }
            a.compared += 1;
            if g == m {
                a.agree += 1;
            }
        }
    }
    a
}

/// Per-loop composition of regions for one bandwidth configuration.
#[derive(Debug, Clone)]
pub struct CompositeRoa {
    pub ordering: BandwidthOrdering,
    /// Region of the slowest loop in its own coordinates.
    pub slow: RoaBoundary,
    /// Validity conditions of the fast loop(s) in slow coordinates.
    pub fast_validity: Vec<ValidityLine>,
    /// Bandwidth separation below the threshold: the composition is only advisory.
    pub advisory: bool,
    params: SystemParams<f64>,
}

impl CompositeRoa {
    /// Grid-counted area (`n × n` cells of `bbox`) of the slow-loop region
    /// cut by the fast-loop validity constraints.
    pub fn area(&self, bbox: &RoaBox, n: usize) -> f64 {
        let inside = (0..n * n)
            .into_par_iter()
            .filter(|k| {
                let z = bbox.cell_center(n, n, k % n, k / n);
                self.fast_validity.iter().all(|l| l.admits(z))
                    && in_roa(z, &self.slow) == Membership::Inside
            })
            .count();
        inside as f64 / (n * n) as f64 * bbox.area()
    }

    /// Membership of a full state: the conjunction of the slow-loop region,
    /// the fast-loop validity constraints and, when the PLL is the fast loop,
    /// the PLL-alone region at the state's `i_d`.
    pub fn contains(&self, s: &FullState<f64>) -> Result<Membership> {
        let ordering = self.ordering.ordering;
        let z = ordering.project(s);
        if !self.fast_validity.iter().all(|l| l.admits(z)) {
            return Ok(Membership::Outside);
        }
        let slow = in_roa(z, &self.slow);
        if slow != Membership::Inside {
            return Ok(slow);
        }
        match ordering.slow_loop() {
            SlowLoop::Pll => Ok(Membership::Inside),
            SlowLoop::Dvc => {
                let pll = trace_stable_manifold(
                    RoaSystem::PllAlone { i_d: s.i_d },
                    &self.params,
                    &RoaOptions::default(),
                )?;
                Ok(in_roa([s.delta, s.x_int_pll], &pll))
            }
        }
    }
}

/// Composite region for the bandwidths `bw`.
pub fn composite_roa<T: Scalar>(
    prm: &SystemParams<T>,
    bw: &BandwidthSpec<T>,
    opts: &RoaOptions,
) -> Result<CompositeRoa> {
    let ordering = BandwidthOrdering::classify(bw, SEPARATION_THRESHOLD)?;
    let bw64 = BandwidthSpec {
        omega_pll: bw.omega_pll.to_f64_lossy(),
        omega_dvc: bw.omega_dvc.to_f64_lossy(),
        omega_tvc: bw.omega_tvc.map(|w| w.to_f64_lossy()),
    };
    let params = prm.cast::<f64>().with_bandwidths(&bw64)?;
    let slow = trace_stable_manifold(
        RoaSystem::Reduced {
            ordering: ordering.ordering,
        },
        &params,
        opts,
    )?;
    Ok(CompositeRoa {
        advisory: ordering.advisory,
        fast_validity: slow.validity_lines.clone(),
        slow,
        ordering,
        params,
    })
}

/// Lowest grid voltage at which the DVC-slow reduced model still has an
/// equilibrium pair; `√(2 P_in X_g)` without TVC, lower with it.
pub fn voltage_threshold<T: Scalar>(prm: &SystemParams<T>, tvc: bool) -> Result<f64> {
    let mut p = prm.cast::<f64>();
    let exists = |p: &SystemParams<f64>| find_dvc_equilibria(p, tvc).map(|e| e.exists);
    let (mut lo, mut hi) = (1e-3, p.u_g.max(1.0) * 4.0);
    p.u_g = hi;
    if !exists(&p)? {
        return Err(ModelError::NoEquilibrium {
            detail: format!("no equilibrium even at U_g = {hi}"),
            threshold: crate::equilibria::existence_threshold(&p),
        });
    }
    for _ in 0..80 {
        let m = 0.5 * (lo + hi);
        p.u_g = m;
        if exists(&p)? {
            hi = m;
        } else {
            lo = m;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prm(pll: f64, dvc: f64, tvc: Option<f64>) -> SystemParams<f64> {
        SystemParams::reference(&BandwidthSpec::from_hz(pll, dvc, tvc)).unwrap()
    }

    const DVC_SLOW: RoaSystem = RoaSystem::Reduced {
        ordering: Ordering::PllFastDvcSlow,
    };
    const PLL_SLOW: RoaSystem = RoaSystem::Reduced {
        ordering: Ordering::DvcFastPllSlow,
    };

    #[test]
    fn dvc_slow_boundary_through_uep() {
        let p = prm(15.0, 2.0, None);
        let b = trace_stable_manifold(DVC_SLOW, &p, &RoaOptions::default()).unwrap();
        assert!((b.uep[0] - 1.74).abs() < 0.01, "{:?}", b.uep);
        assert_eq!(b.uep[1], 0.0);
        for br in &b.branches {
            assert_eq!(br[0], b.uep);
            assert!(br.len() > 10);
        }
        assert_eq!(in_roa(b.sep, &b), Membership::Inside);
        assert_eq!(in_roa(b.uep, &b), Membership::Indeterminate);
        assert_eq!(in_roa([2.1, 2.5], &b), Membership::Outside);
    }

    #[test]
    fn pll_slow_boundary_through_uep() {
        let p = prm(2.0, 15.0, None);
        let b = trace_stable_manifold(PLL_SLOW, &p, &RoaOptions::default()).unwrap();
        assert!((b.uep[0].to_degrees() - 55.0).abs() < 1.0);
        assert_eq!(b.uep[1], 0.0);
        assert_eq!(in_roa(b.sep, &b), Membership::Inside);
        assert_eq!(in_roa(b.uep, &b), Membership::Indeterminate);
        assert_eq!(b.validity_lines[0].value, std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn branches_follow_reverse_flow() {
        let p = prm(15.0, 2.0, None);
        let b = trace_stable_manifold(DVC_SLOW, &p, &RoaOptions::default()).unwrap();
        let w = b.bbox.width();
        for br in &b.branches {
            for pair in br[1..br.len() - 1].windows(2) {
                let f = DVC_SLOW.rhs(pair[0], &p).unwrap();
                let d = [(pair[1][0] - pair[0][0]) / w[0], (pair[1][1] - pair[0][1]) / w[1]];
                let g = [-f[0] / w[0], -f[1] / w[1]];
                let nd = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let ng = (g[0] * g[0] + g[1] * g[1]).sqrt();
                if nd < 1e-9 || ng < 1e-12 {
                    continue;
                }
                let cos = (d[0] * g[0] + d[1] * g[1]) / (nd * ng);
                assert!(cos > 0.9, "chord not along reverse flow: cos = {cos}");
            }
        }
    }

    #[test]
    fn pll_alone_region() {
        let p = prm(15.0, 2.0, None);
        let b = trace_stable_manifold(RoaSystem::PllAlone { i_d: 1.0 }, &p, &RoaOptions::default())
            .unwrap();
        let ds = (0.47f64).asin();
        assert!((b.sep[0] - ds).abs() < 1e-3);
        assert!((b.uep[0] - (std::f64::consts::PI - ds)).abs() < 1e-3);
        assert_eq!(in_roa(b.sep, &b), Membership::Inside);
        // The box spans more than one period: past the shifted saddle is outside.
        let beyond = [b.uep[0] - std::f64::consts::TAU - 0.3, 0.0];
        assert!(b.bbox.contains(beyond));
        assert_eq!(in_roa(beyond, &b), Membership::Outside);
        let g = brute_force_roa(b.system, &p, &GridSpec::new(b.bbox, 30)).unwrap();
        let a = oracle_agreement(&b, &g);
        assert!(a.fraction() >= 0.97, "{a:?}");
    }

    #[test]
    fn pll_alone_without_equilibrium_is_an_error() {
        let p = prm(15.0, 2.0, None);
        let e = trace_stable_manifold(RoaSystem::PllAlone { i_d: 3.0 }, &p, &RoaOptions::default());
        assert!(e.is_err());
    }

    #[test]
    fn linear_saddle_manifold_is_the_y_axis() {
        let bbox = RoaBox {
            lo: [-1.0, -1.0],
            hi: [1.0, 1.0],
        };
        let (branches, truncated) =
            trace_planar(|z| Ok([z[0], -z[1]]), [0.0, 0.0], &bbox, &RoaOptions::default()).unwrap();
        assert_eq!(truncated, [false, false]);
        let ends: Vec<f64> = branches.iter().map(|b| b.last().unwrap()[1]).collect();
        assert!(ends.iter().any(|&y| (y - 1.0).abs() < 1e-9), "{ends:?}");
        assert!(ends.iter().any(|&y| (y + 1.0).abs() < 1e-9), "{ends:?}");
        for p in branches.iter().flatten() {
            assert!(p[0].abs() < 1e-12, "{p:?}");
        }
        let spiral = trace_planar(|z| Ok([-z[0], -z[1]]), [0.0, 0.0], &bbox, &RoaOptions::default());
        assert!(matches!(spiral, Err(ModelError::NotASaddle { .. })));
    }

    #[test]
    fn large_current_is_outside() {
        // Slow DVC at 0.4 Hz under a 2 Hz PLL with fast TVC.
        let p = prm(2.0, 0.4, Some(20.0));
        let sys = RoaSystem::Reduced {
            ordering: Ordering::PllTvcFastDvcSlow,
        };
        let b = trace_stable_manifold(sys, &p, &RoaOptions::default()).unwrap();
        assert_eq!(in_roa([2.2, 0.0], &b), Membership::Outside);
        assert_eq!(in_roa(b.sep, &b), Membership::Inside);
    }

    #[test]
    fn grid_oracle_agrees_on_coarse_grid() {
        let p = prm(15.0, 2.0, None);
        let b = trace_stable_manifold(DVC_SLOW, &p, &RoaOptions::default()).unwrap();
        let g = brute_force_roa(DVC_SLOW, &p, &GridSpec::new(b.bbox, 20)).unwrap();
        let a = oracle_agreement(&b, &g);
        assert!(a.fraction() >= 0.97, "{a:?}");
        let (i, j) = (
            ((b.sep[0] - b.bbox.lo[0]) / b.bbox.width()[0] * 20.0) as usize,
            ((b.sep[1] - b.bbox.lo[1]) / b.bbox.width()[1] * 20.0) as usize,
        );
        assert_eq!(g.get(i, j), Membership::Inside);
    }

    #[test]
    fn polygon_helpers() {
        let sq = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert_eq!(winding(&sq, [0.5, 0.5]).abs(), 1);
        assert_eq!(winding(&sq, [1.5, 0.5]), 0);
        assert!((polygon_area(&sq) - 1.0).abs() < 1e-15);
        assert_eq!(to_perimeter([0.5, 0.0]).1, 0.5);
        assert_eq!(to_perimeter([1.0, 0.5]).1, 1.5);
        assert_eq!(to_perimeter([0.5, 1.0]).1, 2.5);
        assert_eq!(to_perimeter([0.0, 0.5]).1, 3.5);
        let c = clip_to_box(
            &RoaBox {
                lo: [0.0, 0.0],
                hi: [1.0, 1.0],
            },
            [0.5, 0.5],
            [1.5, 0.5],
        );
        assert_eq!(c, [1.0, 0.5]);
    }

    #[test]
    fn voltage_thresholds() {
        let p = prm(15.0, 2.0, Some(20.0));
        let u0 = voltage_threshold(&p, false).unwrap();
        assert!((u0 - (2.0f64 * 0.47).sqrt()).abs() < 1e-6);
        let u1 = voltage_threshold(&p, true).unwrap();
        assert!(u1 < u0, "{u1} vs {u0}");
    }
}
