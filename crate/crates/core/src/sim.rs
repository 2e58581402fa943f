//! Scenario simulation of the full and reduced models, stability verdicts and
//! critical-clearing-time search.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::equilibria::{find_equilibria, full_equilibrium};
use crate::error::{ModelError, Result};
use crate::model::{apply_limits, rhs_full, terminal, FullState, SaturationFlags, Terminal};
use crate::ode::{integrate, OdeOptions, Status, StepControl};
use crate::params::SystemParams;
use crate::reduced::{boundary_layer_correction, rhs_reduced, Ordering, ValidityIssue};
use crate::scalar::Scalar;
use crate::scenarios::{apply_event, EventContext, InitialCondition, OperatingMode, Scenario};

/// `|δ|` beyond which the angle counts as unbounded, rad.
pub const DELTA_BOUND: f64 = 4.0 * std::f64::consts::PI;
/// Distance from the SEP beyond which the angle has slipped a pole, rad.
pub const SLIP_BOUND: f64 = std::f64::consts::PI;
/// Max-norm radius of the convergence ball around the SEP.
pub const CONVERGENCE_BALL: f64 = 1e-3;
/// Fraction of the simulated span examined by the tail tests.
pub const TAIL_FRACTION: f64 = 0.1;
/// Time share of the tail with the DC clamp engaged that counts as persistent.
pub const DC_CLAMP_SHARE: f64 = 0.5;
/// Default clearing-time resolution of [`cct_search`], s.
pub const CCT_RESOLUTION: f64 = 5e-3;

/// Which model a run integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Full,
    /// Two-state reduced model; with `correction` the slow states are shifted
    /// by the boundary-layer correction at every event.
    Reduced { ordering: Ordering, correction: bool },
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Full => f.write_str("full"),
            ModelKind::Reduced { ordering, correction } => {
                write!(f, "reduced({ordering}{})", if *correction { ", corrected" } else { "" })
            }
        }
    }
}

/// Run settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions<T> {
    pub model: ModelKind,
    pub ode: OdeOptions<T>,
}

impl<T: Scalar> Default for SimOptions<T> {
    fn default() -> Self {
        Self {
            model: ModelKind::Full,
            ode: OdeOptions::default(),
        }
    }
}

impl<T: Scalar> SimOptions<T> {
    pub fn reduced(ordering: Ordering, correction: bool) -> Self {
        Self {
            model: ModelKind::Reduced { ordering, correction },
            ..Self::default()
        }
    }
}

/// An event as it happened in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMark {
    pub time: f64,
    pub label: String,
    /// Index of the sample carrying the post-event state.
    pub sample: usize,
}

/// Per-sample annotations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleFlags {
    pub saturation: SaturationFlags,
    /// Reduced runs only: fast-subsystem condition violated at this sample.
    pub validity: Option<ValidityIssue>,
}

/// Time history of a run. Reduced runs store the reconstructed full state of
/// every sample in `states` and their slow coordinates in `reduced`.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub t: Vec<T>,
    pub states: Vec<FullState<T>>,
    pub reduced: Option<Vec<[T; 2]>>,
    /// Corrected reduced runs: slow coordinates of the composite approximation
    /// (outer solution plus the boundary-layer terms of every event).
    pub composite: Option<Vec<[T; 2]>>,
    pub terminal: Vec<Terminal<T>>,
    pub flags: Vec<SampleFlags>,
    pub events: Vec<EventMark>,
    pub model: ModelKind,
    /// First abnormal integration status, or `Completed`/`Stopped`.
    pub status: Status,
    /// Parameters and loop switches after the last event.
    pub final_mode: OperatingMode<T>,
    /// Stable equilibrium of the final mode, if one exists.
    pub sep: Option<FullState<T>>,
    /// `di_d/dt` at the last sample.
    pub final_id_rate: Option<T>,
    /// Largest boundary-layer offset applied (corrected reduced runs).
    pub max_correction: Option<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn last_state(&self) -> FullState<T> {
        *self.states.last().expect("non-empty trajectory")
    }

    /// Labels of the events attached to sample `k`.
    pub fn event_labels(&self, k: usize) -> Vec<&str> {
        self.events
            .iter()
            .filter(|e| e.sample == k)
            .map(|e| e.label.as_str())
            .collect()
    }

    /// Writes the trajectory as CSV:
    /// `t,delta,x_int_pll,i_d,dv2,i_q,p,v_td,v_tq,events`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,delta,x_int_pll,i_d,dv2,i_q,p,v_td,v_tq,events")?;
        for k in 0..self.len() {
            let s = &self.states[k];
            let m = &self.terminal[k];
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                self.t[k],
                s.delta,
                s.x_int_pll,
                s.i_d,
                s.dv2,
                s.i_q,
                m.p,
                m.v_td,
                m.v_tq,
                self.event_labels(k).join(";")
            )?;
        }
        Ok(())
    }
}

/// Stable, unstable or unresolved within the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Stable,
    Unstable,
    Undetermined,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Why a verdict was reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictReason {
    ConvergedToSep,
    CurrentLimitHitAndDiverged,
    DcClampEngagedPersistently,
    /// `|δ|` exceeded [`DELTA_BOUND`] or slipped more than [`SLIP_BOUND`] from the SEP.
    DeltaUnbounded,
    HorizonExhausted,
    /// The reduced model left its domain of existence (loss of the fast equilibrium).
    ModelBreakdown,
    /// The integrator failed before the horizon.
    SolverFailure,
}

impl fmt::Display for VerdictReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictReason::ConvergedToSep => "converged-to-SEP",
            VerdictReason::CurrentLimitHitAndDiverged => "current-limit-hit-and-diverged",
            VerdictReason::DcClampEngagedPersistently => "dc-clamp-engaged-persistently",
            VerdictReason::DeltaUnbounded => "delta-unbounded",
            VerdictReason::HorizonExhausted => "horizon-exhausted",
            VerdictReason::ModelBreakdown => "model-breakdown",
            VerdictReason::SolverFailure => "solver-failure",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub outcome: Outcome,
    pub reason: VerdictReason,
}

impl StabilityVerdict {
    fn new(outcome: Outcome, reason: VerdictReason) -> Self {
        Self { outcome, reason }
    }

    pub fn is_stable(&self) -> bool {
        self.outcome == Outcome::Stable
    }
}

impl fmt::Display for StabilityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verdict={} reason={}", self.outcome, self.reason)
    }
}

/// Trajectory with its verdict.
#[derive(Debug, Clone)]
pub struct SimulationResult<T> {
    pub trajectory: Trajectory<T>,
    pub verdict: StabilityVerdict,
}

/// Integrator state of one run: full 5-state or reduced 2-state.
enum Engine<T> {
    Full,
    Reduced {
        ordering: Ordering,
        correction: bool,
        z: [T; 2],
    },
}

struct Recorder<T> {
    t: Vec<T>,
    states: Vec<FullState<T>>,
    reduced: Vec<[T; 2]>,
    flags: Vec<SampleFlags>,
    /// Mode in force for each sample (index into `modes`).
    mode_of: Vec<usize>,
    modes: Vec<OperatingMode<T>>,
    events: Vec<EventMark>,
}

impl<T: Scalar> Recorder<T> {
    /// Replaces the last sample (same time) or appends a new one.
    fn put(&mut self, t: T, s: FullState<T>, z: Option<[T; 2]>, f: SampleFlags) {
        let mode = self.modes.len() - 1;
        if self.t.last() == Some(&t) {
            let k = self.t.len() - 1;
            self.states[k] = s;
            if let Some(z) = z {
                self.reduced[k] = z;
            }
            self.flags[k] = f;
            self.mode_of[k] = mode;
        } else {
            self.t.push(t);
            self.states.push(s);
            if let Some(z) = z {
                self.reduced.push(z);
            }
            self.flags.push(f);
            self.mode_of.push(mode);
        }
    }
}

/// Initial full state and mode before any event.
fn initial_conditions<T: Scalar>(
    sc: &Scenario,
    base: &SystemParams<T>,
) -> Result<(FullState<T>, OperatingMode<T>)> {
    let params = sc.params(base)?;
    let mode = OperatingMode {
        params,
        tvc_enabled: sc.tvc_enabled(),
    };
    let s = match sc.initial {
        InitialCondition::Equilibrium => full_equilibrium(&params, mode.tvc_enabled)?,
        InitialCondition::State {
            delta,
            x_int_pll,
            i_d,
            dv2,
            i_q,
        } => {
            let s = FullState::new(
                T::lit(delta),
                T::lit(x_int_pll),
                T::lit(i_d),
                T::lit(dv2),
                T::lit(i_q),
            );
            s.validate(&params)?;
            s
        }
    };
    Ok((s, mode))
}

/// Runs `scenario` from its initial condition through every event to the
/// horizon and classifies the result.
///
/// Events at the same instant are applied in schedule order; the sample at an
/// event time holds the post-event state. Limiter clamps act at accepted-step
/// boundaries. Integration stops early once `|δ|` exceeds [`DELTA_BOUND`]:
/// past a pole slip the unlimited PLL integrator drives the frequency up
/// without bound and the run would only burn steps.
pub fn simulate_scenario<T: Scalar>(
    scenario: &Scenario,
    base: &SystemParams<T>,
    opts: &SimOptions<T>,
) -> Result<SimulationResult<T>> {
    scenario.validate()?;
    let (s0, mode0) = initial_conditions(scenario, base)?;
    let ctx = EventContext::for_scenario(scenario, &mode0.params);

    let mut engine = match opts.model {
        ModelKind::Full => Engine::Full,
        ModelKind::Reduced { ordering, correction } => {
            if ordering.uses_tvc() != mode0.tvc_enabled {
                return Err(ModelError::InvalidParameter {
                    name: "ordering",
                    reason: format!(
                        "{ordering} {} terminal-voltage control but scenario `{}` {}",
                        if ordering.uses_tvc() { "needs" } else { "excludes" },
                        scenario.name,
                        if mode0.tvc_enabled { "enables it" } else { "has none" }
                    ),
                });
            }
            let z = ordering.project(&s0);
            Engine::Reduced {
                ordering,
                correction,
                z,
            }
        }
    };

    let mut rec = Recorder {
        t: Vec::new(),
        states: Vec::new(),
        reduced: Vec::new(),
        flags: Vec::new(),
        mode_of: Vec::new(),
        modes: vec![mode0],
        events: Vec::new(),
    };
    let mut full = s0;
    let z0 = match &engine {
        Engine::Reduced { z, .. } => Some(*z),
        Engine::Full => None,
    };
    rec.put(T::zero(), full, z0, SampleFlags::default());

    let horizon = T::lit(scenario.horizon);
    let mut status = Status::Completed;
    let mut max_correction: Option<T> = None;
    let mut layers: Vec<(T, crate::reduced::BoundaryLayerCorrection<T>)> = Vec::new();
    let mut ev = 0;
    let mut t = T::zero();

    loop {
        // Apply every event scheduled at the current time.
        let mut fired = false;
        while ev < scenario.events.len() && T::lit(scenario.events[ev].time) <= t {
            let e = &scenario.events[ev];
            let mode = *rec.modes.last().expect("mode");
            let (s_new, m_new) = apply_event(&e.kind, &full, &mode, &ctx)?;
            full = s_new;
            rec.modes.push(m_new);
            rec.events.push(EventMark {
                time: e.time,
                label: e.kind.label(),
                sample: rec.t.len() - 1,
            });
            fired = true;
            ev += 1;
        }
        if fired {
            let mode = *rec.modes.last().expect("mode");
            match &mut engine {
                Engine::Full => {
                    let (s, f) = apply_limits(&full, &mode.params);
                    full = s;
                    rec.put(t, full, None, SampleFlags { saturation: f, validity: None });
                }
                Engine::Reduced {
                    ordering,
                    correction,
                    z,
                } => {
                    let mut zn = ordering.project(&full);
                    if *correction {
                        let c = boundary_layer_correction(*ordering, &full, &mode.params)?;
                        zn = c.apply(zn);
                        let m = c.magnitude();
                        max_correction = Some(max_correction.map_or(m, |o: T| o.max(m)));
                        layers.push((t, c));
                    }
                    *z = zn;
                    match ordering.reconstruct(zn, &mode.params) {
                        Ok(s) => {
                            full = s;
                            rec.put(t, full, Some(zn), SampleFlags::default());
                        }
                        Err(e) => {
                            status = Status::RhsError {
                                t: t.to_f64_lossy(),
                                error: e,
                            };
                            break;
                        }
                    }
                }
            }
        }
        if t >= horizon {
            break;
        }
        let t_next = scenario
            .events
            .get(ev)
            .map(|e| T::lit(e.time).min(horizon))
            .unwrap_or(horizon);
        if t_next <= t {
            break;
        }
        let mode = *rec.modes.last().expect("mode");
        let seg_status = match &mut engine {
            Engine::Full => run_full_segment(&mut rec, &mode, t, t_next, &full, &opts.ode),
            Engine::Reduced { ordering, z, .. } => {
                run_reduced_segment(&mut rec, *ordering, &mode, t, t_next, *z, &opts.ode, z)
            }
        };
        full = *rec.states.last().expect("sample");
        t = *rec.t.last().expect("sample");
        match seg_status {
            Status::Completed => {}
            other => {
                status = other;
                break;
            }
        }
    }

    let final_mode = *rec.modes.last().expect("mode");
    let sep = match opts.model {
        ModelKind::Full => full_equilibrium(&final_mode.params, final_mode.tvc_enabled).ok(),
        ModelKind::Reduced { ordering, .. } => find_equilibria(ordering, &final_mode.params)
            .ok()
            .filter(|p| p.exists)
            .and_then(|p| ordering.reconstruct(p.sep, &final_mode.params).ok()),
    };
    let last = *rec.states.last().expect("sample");
    let final_id_rate = match opts.model {
        ModelKind::Full => rhs_full(&last, &final_mode.params, final_mode.tvc_enabled)
            .ok()
            .map(|r| r[2]),
        ModelKind::Reduced { ordering, .. } => match ordering.slow_loop() {
            crate::reduced::SlowLoop::Dvc => {
                rhs_reduced(ordering, ordering.project(&last), &final_mode.params)
                    .ok()
                    .map(|r| r.rates[0])
            }
            crate::reduced::SlowLoop::Pll => None,
        },
    };
    let terminal = rec
        .states
        .iter()
        .zip(&rec.mode_of)
        .map(|(s, &m)| {
            terminal(s, &rec.modes[m].params).unwrap_or(Terminal {
                p: T::nan(),
                v_td: T::nan(),
                v_tq: T::nan(),
                delta_dot: T::nan(),
            })
        })
        .collect();
    let composite = (!layers.is_empty()).then(|| {
        rec.t
            .iter()
            .zip(&rec.reduced)
            .map(|(&t, z)| {
                layers.iter().fold(*z, |acc, (te, c)| {
                    let l = c.layer_term(t - *te);
                    [acc[0] + l[0], acc[1] + l[1]]
                })
            })
            .collect()
    });
    let trajectory = Trajectory {
        reduced: (!rec.reduced.is_empty()).then_some(rec.reduced),
        composite,
        t: rec.t,
        states: rec.states,
        terminal,
        flags: rec.flags,
        events: rec.events,
        model: opts.model,
        status,
        final_mode,
        sep,
        final_id_rate,
        max_correction,
    };
    let verdict = classify_stability(&trajectory, trajectory.sep.as_ref(), &final_mode.params);
    Ok(SimulationResult {
        trajectory,
        verdict,
    })
}

fn unbounded<T: Scalar>(delta: T) -> bool {
    !(delta.abs().to_f64_lossy() <= DELTA_BOUND)
}

fn run_full_segment<T: Scalar>(
    rec: &mut Recorder<T>,
    mode: &OperatingMode<T>,
    t0: T,
    t1: T,
    s0: &FullState<T>,
    ode: &OdeOptions<T>,
) -> Status {
    let prm = mode.params;
    let tvc = mode.tvc_enabled;
    let mut flags = Vec::new();
    let sol = integrate(
        |_, y| rhs_full(&FullState::from_array(*y), &prm, tvc),
        t0,
        s0.to_array(),
        t1,
        ode,
        |_, y| {
            let (s, f) = apply_limits(&FullState::from_array(*y), &prm);
            *y = s.to_array();
            flags.push(f);
            if unbounded(s.delta) {
                StepControl::Stop
            } else {
                StepControl::Continue
            }
        },
    );
    for (k, (&t, y)) in sol.t.iter().zip(&sol.y).enumerate().skip(1) {
        let saturation = flags.get(k - 1).copied().unwrap_or_default();
        rec.put(t, FullState::from_array(*y), None, SampleFlags { saturation, validity: None });
    }
    sol.status
}

#[allow(clippy::too_many_arguments)]
fn run_reduced_segment<T: Scalar>(
    rec: &mut Recorder<T>,
    ordering: Ordering,
    mode: &OperatingMode<T>,
    t0: T,
    t1: T,
    z0: [T; 2],
    ode: &OdeOptions<T>,
    z_out: &mut [T; 2],
) -> Status {
    let prm = mode.params;
    let mut samples: Vec<(FullState<T>, SampleFlags)> = Vec::new();
    let mut sol = integrate(
        |_, z| rhs_reduced(ordering, *z, &prm).map(|r| r.rates),
        t0,
        z0,
        t1,
        ode,
        |_, z| {
            let Ok(s) = ordering.reconstruct(*z, &prm) else {
                return StepControl::Stop;
            };
            let (clamped, saturation) = apply_limits(&s, &prm);
            *z = ordering.project(&clamped);
            let s = ordering.reconstruct(*z, &prm).unwrap_or(clamped);
            let validity = rhs_reduced(ordering, *z, &prm).ok().and_then(|r| r.issue);
            samples.push((s, SampleFlags { saturation, validity }));
            if unbounded(s.delta) {
                StepControl::Stop
            } else {
                StepControl::Continue
            }
        },
    );
    // A failed reconstruction stops the hook without a recorded sample.
    if samples.len() + 1 < sol.t.len() {
        let n = samples.len() + 1;
        sol.t.truncate(n);
        sol.y.truncate(n);
        let t = sol.t[n - 1].to_f64_lossy();
        sol.status = Status::RhsError {
            t,
            error: ModelError::PllFastNoSolution {
                lhs: f64::NAN,
                u_g: prm.u_g.to_f64_lossy(),
            },
        };
    }
    for (k, &t) in sol.t.iter().enumerate().skip(1) {
        let (s, f) = samples[k - 1];
        rec.put(t, s, Some(sol.y[k]), f);
    }
    *z_out = *sol.y.last().expect("sample");
    sol.status
}

/// Verdict for a finished trajectory against the stable equilibrium `sep`.
///
/// Checks, in order: reduced-model breakdown; DC clamp engaged for more than
/// half of the tail; the d-axis current pinned at its limit while still
/// pushing outward; `|δ|` beyond [`DELTA_BOUND`] or a pole slip of more than
/// [`SLIP_BOUND`] from the SEP; convergence of the whole tail into the
/// [`CONVERGENCE_BALL`] (angles modulo 2π). Anything else is undetermined.
pub fn classify_stability<T: Scalar>(
    traj: &Trajectory<T>,
    sep: Option<&FullState<T>>,
    prm: &SystemParams<T>,
) -> StabilityVerdict {
    use Outcome::*;
    use VerdictReason::*;
    if traj.is_empty() {
        return StabilityVerdict::new(Undetermined, HorizonExhausted);
    }
    let reduced = matches!(traj.model, ModelKind::Reduced { .. });
    if reduced && matches!(traj.status, Status::RhsError { .. }) {
        return StabilityVerdict::new(Unstable, ModelBreakdown);
    }

    let t_end = traj.t[traj.len() - 1].to_f64_lossy();
    let t_start = traj.t[0].to_f64_lossy();
    let t_tail = t_end - TAIL_FRACTION * (t_end - t_start);
    let first_tail = traj
        .t
        .iter()
        .position(|t| t.to_f64_lossy() >= t_tail)
        .unwrap_or(traj.len() - 1);

    let mut clamped = 0.0;
    for k in first_tail.max(1)..traj.len() {
        if traj.flags[k].saturation.dc {
            clamped += (traj.t[k] - traj.t[k - 1]).to_f64_lossy();
        }
    }
    let tail_span = t_end - traj.t[first_tail.max(1) - 1].to_f64_lossy();
    if tail_span > 0.0 && clamped > DC_CLAMP_SHARE * tail_span {
        return StabilityVerdict::new(Unstable, DcClampEngagedPersistently);
    }

    let last = traj.last_state();
    if let Some(rate) = traj.final_id_rate {
        let at_limit = last.i_d.abs() >= prm.limits.i_limit;
        if at_limit && (rate * last.i_d.signum()).to_f64_lossy() > 0.0 {
            return StabilityVerdict::new(Unstable, CurrentLimitHitAndDiverged);
        }
    }

    let slipped = |s: &FullState<T>| {
        unbounded(s.delta)
            || sep.is_some_and(|e| (s.delta - e.delta).abs().to_f64_lossy() > SLIP_BOUND)
    };
    if traj.states.iter().any(slipped) {
        return StabilityVerdict::new(Unstable, DeltaUnbounded);
    }

    if traj.status.is_ok() {
        if let Some(e) = sep {
            let within = traj.states[first_tail..]
                .iter()
                .all(|s| distance(s, e).to_f64_lossy() <= CONVERGENCE_BALL);
            if within {
                return StabilityVerdict::new(Stable, ConvergedToSep);
            }
        }
        StabilityVerdict::new(Undetermined, HorizonExhausted)
    } else {
        StabilityVerdict::new(Undetermined, SolverFailure)
    }
}

/// Max-norm distance between full states with `δ` compared modulo 2π.
pub fn distance<T: Scalar>(a: &FullState<T>, b: &FullState<T>) -> T {
    let d = [
        crate::scalar::wrap_angle(a.delta - b.delta),
        a.x_int_pll - b.x_int_pll,
        a.i_d - b.i_d,
        a.dv2 - b.dv2,
        a.i_q - b.i_q,
    ];
    crate::scalar::max_abs(&d)
}

/// Slow-coordinate discrepancy between a full and a reduced run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionError {
    /// Largest absolute error per slow coordinate.
    pub max_abs: [f64; 2],
    /// Range (max − min) of each slow coordinate over the full run.
    pub range: [f64; 2],
    /// Number of compared samples.
    pub samples: usize,
}

impl ReductionError {
    /// Largest error as a fraction of its coordinate range.
    pub fn relative(&self) -> f64 {
        (0..2)
            .map(|i| self.max_abs[i] / self.range[i].max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// Slow coordinates of a reduced run at time `t`, linearly interpolated;
/// the composite approximation when the run was corrected.
pub fn reduced_at<T: Scalar>(traj: &Trajectory<T>, t: f64) -> Option<[f64; 2]> {
    let z = traj.composite.as_ref().or(traj.reduced.as_ref())?;
    let ts = &traj.t;
    let last = ts.len() - 1;
    if t < ts[0].to_f64_lossy() || t > ts[last].to_f64_lossy() {
        return None;
    }
    let k = ts.partition_point(|x| x.to_f64_lossy() <= t).clamp(1, last.max(1));
    if last == 0 {
        return Some([z[0][0].to_f64_lossy(), z[0][1].to_f64_lossy()]);
    }
    let (t0, t1) = (ts[k - 1].to_f64_lossy(), ts[k].to_f64_lossy());
    let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
    let f = |i: usize| {
        let a = z[k - 1][i].to_f64_lossy();
        a + w * (z[k][i].to_f64_lossy() - a)
    };
    Some([f(0), f(1)])
}

/// Compares the slow coordinates of `full` with the reduced run `reduced`
/// at the full run's samples in `[t_from, t_to]`, skipping `[e, e + skip]`
/// after every event `e` (the boundary layers).
pub fn reduction_error<T: Scalar>(
    full: &Trajectory<T>,
    reduced: &Trajectory<T>,
    ordering: Ordering,
    t_from: f64,
    t_to: f64,
    skip: f64,
) -> ReductionError {
    let mut max_abs = [0.0f64; 2];
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut samples = 0;
    for (k, s) in full.states.iter().enumerate() {
        let zf = ordering.project(s).map(|v| v.to_f64_lossy());
        for i in 0..2 {
            lo[i] = lo[i].min(zf[i]);
            hi[i] = hi[i].max(zf[i]);
        }
        let t = full.t[k].to_f64_lossy();
        if t < t_from || t > t_to || full.events.iter().any(|e| t >= e.time && t <= e.time + skip) {
            continue;
        }
        if let Some(zr) = reduced_at(reduced, t) {
            for i in 0..2 {
                max_abs[i] = max_abs[i].max((zf[i] - zr[i]).abs());
            }
            samples += 1;
        }
    }
    ReductionError {
        max_abs,
        range: [hi[0] - lo[0], hi[1] - lo[1]],
        samples,
    }
}

/// One tested clearing time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CctProbe {
    pub t_clear: f64,
    pub verdict: StabilityVerdict,
}

/// Result of a clearing-time bisection.
#[derive(Debug, Clone, PartialEq)]
pub struct CctResult {
    /// Largest tested clearing time with a stable verdict, s.
    pub cct: f64,
    /// Smallest tested clearing time without a stable verdict, s.
    pub first_unstable: f64,
    /// Every probe, sorted by clearing time.
    pub trace: Vec<CctProbe>,
}

impl CctResult {
    /// Every probe below the CCT is stable and every probe above it is not.
    pub fn is_monotone(&self) -> bool {
        self.trace
            .iter()
            .all(|p| p.verdict.is_stable() == (p.t_clear <= self.cct))
    }
}

/// Bisects the clearing time of `template`'s first fault clearance on the
/// grid `t_lo + k·resolution` (with `t_hi` as the last point). Undetermined
/// verdicts count as not stable.
pub fn cct_search<T: Scalar>(
    template: &Scenario,
    base: &SystemParams<T>,
    opts: &SimOptions<T>,
    t_lo: f64,
    t_hi: f64,
    resolution: f64,
) -> Result<CctResult> {
    if !(t_lo >= 0.0 && t_hi > t_lo && resolution > 0.0) {
        return Err(ModelError::CctBracket {
            detail: format!(
                "need 0 <= t_lo < t_hi and resolution > 0, got [{t_lo}, {t_hi}] step {resolution}"
            ),
        });
    }
    let n = ((t_hi - t_lo) / resolution - 1e-9).ceil().max(1.0) as usize;
    let time = |k: usize| if k == n { t_hi } else { t_lo + k as f64 * resolution };
    let probe = |k: usize| -> Result<CctProbe> {
        let t_clear = time(k);
        let sc = template.with_clear_time(t_clear)?;
        let r = simulate_scenario(&sc, base, opts)?;
        Ok(CctProbe {
            t_clear,
            verdict: r.verdict,
        })
    };
    let (lo, hi) = rayon::join(|| probe(0), || probe(n));
    let (lo, hi) = (lo?, hi?);
    if !lo.verdict.is_stable() || hi.verdict.is_stable() {
        return Err(ModelError::CctBracket {
            detail: format!(
                "t_lo = {} gives {}, t_hi = {} gives {}",
                lo.t_clear, lo.verdict, hi.t_clear, hi.verdict
            ),
        });
    }
    let mut trace = vec![lo, hi];
    let (mut a, mut b) = (0usize, n);
    while b - a > 1 {
        let mid = a + (b - a) / 2;
        let p = probe(mid)?;
        trace.push(p);
        if p.verdict.is_stable() {
            a = mid;
        } else {
            b = mid;
        }
    }
    trace.sort_by(|x, y| x.t_clear.total_cmp(&y.t_clear));
    Ok(CctResult {
        cct: time(a),
        first_unstable: time(b),
        trace,
    })
}
