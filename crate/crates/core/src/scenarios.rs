//! Declarative fault scenarios and the builtin experiment catalog.
//!
//! Scenario files are TOML; unknown keys are rejected. Example:
//!
//! ```toml
//! name = "fig3"
//! horizon = 40.0
//! sag_convention = "drop-to"
//!
//! [bandwidth]
//! pll_hz = 15.0
//! dvc_hz = 2.0
//!
//! [[events]]
//! kind = "voltage-sag"
//! time = 0.0
//! depth = 0.9
//!
//! [[events]]
//! kind = "fault-clear"
//! time = 0.16
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::model::FullState;
use crate::params::{BandwidthSpec, SystemParams};
use crate::scalar::Scalar;

/// Default simulated time, s. The slowest closed-loop mode of the reference
/// system decays at roughly 0.25 1/s, so shorter runs cannot settle into the
/// convergence ball.
pub const DEFAULT_HORIZON: f64 = 40.0;

/// How the depth of a voltage sag maps to the faulted grid voltage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SagConvention {
    /// `U_g = depth · U_nominal` ("a 0.9 pu sag" leaves 0.9 pu).
    #[default]
    DropTo,
    /// `U_g = (1 − depth) · U_nominal` ("a 0.9 pu sag" leaves 0.1 pu).
    DropBy,
}

/// Which gains a runtime bandwidth switch recomputes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchGains {
    /// Proportional and integral gains both follow the design rule.
    #[default]
    Both,
    /// Only proportional gains change; integral gains are kept.
    ProportionalOnly,
}

/// Bandwidths in Hz, as scenarios are written.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthHz {
    pub pll_hz: f64,
    pub dvc_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tvc_hz: Option<f64>,
}

impl BandwidthHz {
    pub fn new(pll_hz: f64, dvc_hz: f64, tvc_hz: Option<f64>) -> Self {
        Self {
            pll_hz,
            dvc_hz,
            tvc_hz,
        }
    }

    pub fn spec<T: Scalar>(&self) -> BandwidthSpec<T> {
        BandwidthSpec::from_hz(
            T::lit(self.pll_hz),
            T::lit(self.dvc_hz),
            self.tvc_hz.map(T::lit),
        )
    }
}

/// Optional replacements of reference parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_dc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_dc_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_pll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_dvc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_t_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_q_fixed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_dc_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_dc_max: Option<f64>,
}

impl ParamOverrides {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply<T: Scalar>(&self, p: &mut SystemParams<T>) {
        let set = |dst: &mut T, v: Option<f64>| {
            if let Some(v) = v {
                *dst = T::lit(v);
            }
        };
        set(&mut p.u_g, self.u_g);
        set(&mut p.x_g, self.x_g);
        set(&mut p.r_g, self.r_g);
        set(&mut p.p_in, self.p_in);
        set(&mut p.c_dc, self.c_dc);
        set(&mut p.v_dc_ref, self.v_dc_ref);
        set(&mut p.zeta_pll, self.zeta_pll);
        set(&mut p.zeta_dvc, self.zeta_dvc);
        set(&mut p.k_v, self.k_v);
        set(&mut p.v_t_ref, self.v_t_ref);
        set(&mut p.i_q_fixed, self.i_q_fixed);
        set(&mut p.limits.i_limit, self.i_limit);
        set(&mut p.limits.v_dc_min, self.v_dc_min);
        set(&mut p.limits.v_dc_max, self.v_dc_max);
    }
}

/// Starting point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    /// The full-model equilibrium of the pre-event parameters.
    #[default]
    Equilibrium,
    /// An explicit full state.
    State {
        delta: f64,
        x_int_pll: f64,
        i_d: f64,
        dv2: f64,
        i_q: f64,
    },
}

/// What happens at an event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    /// Grid voltage drops; see [`SagConvention`]. `depth ∈ (0, 1]`.
    VoltageSag { depth: f64 },
    /// Grid voltage returns to its pre-fault value.
    FaultClear,
    /// Grid phase steps so that `δ += dphi_deg`; `dphi_deg ∈ (−180, 180]`.
    PhaseJump { dphi_deg: f64 },
    /// Input power changes to `p_new`, pu.
    PowerStep { p_new: f64 },
    /// Loop bandwidths change; `None` keeps a loop's current bandwidth.
    BandwidthSwitch {
        pll_hz: Option<f64>,
        dvc_hz: Option<f64>,
        tvc_hz: Option<f64>,
    },
    /// Terminal-voltage control on (i_q follows its filter) or off (i_q frozen).
    TvcToggle { on: bool },
}

impl EventKind {
    pub fn label(&self) -> String {
        match self {
            EventKind::VoltageSag { depth } => format!("voltage-sag({depth})"),
            EventKind::FaultClear => "fault-clear".into(),
            EventKind::PhaseJump { dphi_deg } => format!("phase-jump({dphi_deg}deg)"),
            EventKind::PowerStep { p_new } => format!("power-step({p_new})"),
            EventKind::BandwidthSwitch {
                pll_hz,
                dvc_hz,
                tvc_hz,
            } => {
                let f = |n: &str, v: &Option<f64>| v.map(|v| format!("{n}={v}Hz"));
                let parts: Vec<String> = [f("pll", pll_hz), f("dvc", dvc_hz), f("tvc", tvc_hz)]
                    .into_iter()
                    .flatten()
                    .collect();
                format!("bandwidth-switch({})", parts.join(" "))
            }
            EventKind::TvcToggle { on } => format!("tvc-{}", if *on { "on" } else { "off" }),
        }
    }
}

/// A timed event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "EventDoc", try_from = "EventDoc")]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

impl Event {
    pub fn new(time: f64, kind: EventKind) -> Self {
        Self { time, kind }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind.label(), self.time)
    }
}

/// File representation of [`Event`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum EventDoc {
    VoltageSag {
        time: f64,
        depth: f64,
    },
    FaultClear {
        time: f64,
    },
    PhaseJump {
        time: f64,
        dphi_deg: f64,
    },
    PowerStep {
        time: f64,
        p_new: f64,
    },
    BandwidthSwitch {
        time: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pll_hz: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dvc_hz: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tvc_hz: Option<f64>,
    },
    TvcToggle {
        time: f64,
        on: bool,
    },
}

impl From<Event> for EventDoc {
    fn from(e: Event) -> Self {
        let time = e.time;
        match e.kind {
            EventKind::VoltageSag { depth } => EventDoc::VoltageSag { time, depth },
            EventKind::FaultClear => EventDoc::FaultClear { time },
            EventKind::PhaseJump { dphi_deg } => EventDoc::PhaseJump { time, dphi_deg },
            EventKind::PowerStep { p_new } => EventDoc::PowerStep { time, p_new },
            EventKind::BandwidthSwitch {
                pll_hz,
                dvc_hz,
                tvc_hz,
            } => EventDoc::BandwidthSwitch {
                time,
                pll_hz,
                dvc_hz,
                tvc_hz,
            },
            EventKind::TvcToggle { on } => EventDoc::TvcToggle { time, on },
        }
    }
}

impl From<EventDoc> for Event {
    fn from(d: EventDoc) -> Self {
        match d {
            EventDoc::VoltageSag { time, depth } => Event::new(time, EventKind::VoltageSag { depth }),
            EventDoc::FaultClear { time } => Event::new(time, EventKind::FaultClear),
            EventDoc::PhaseJump { time, dphi_deg } => {
                Event::new(time, EventKind::PhaseJump { dphi_deg })
            }
            EventDoc::PowerStep { time, p_new } => Event::new(time, EventKind::PowerStep { p_new }),
            EventDoc::BandwidthSwitch {
                time,
                pll_hz,
                dvc_hz,
                tvc_hz,
            } => Event::new(
                time,
                EventKind::BandwidthSwitch {
                    pll_hz,
                    dvc_hz,
                    tvc_hz,
                },
            ),
            EventDoc::TvcToggle { time, on } => Event::new(time, EventKind::TvcToggle { on }),
        }
    }
}

/// A named experiment: configuration, initial condition and event schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Simulated time, s.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub sag_convention: SagConvention,
    #[serde(default)]
    pub switch_gains: SwitchGains,
    pub bandwidth: BandwidthHz,
    #[serde(default, skip_serializing_if = "ParamOverrides::is_empty")]
    pub overrides: ParamOverrides,
    #[serde(default)]
    pub initial: InitialCondition,
    #[serde(default)]
    pub events: Vec<Event>,
}

fn default_horizon() -> f64 {
    DEFAULT_HORIZON
}

fn scenario_err(name: &str, msg: impl fmt::Display) -> ModelError {
    ModelError::Scenario(format!("scenario `{name}`: {msg}"))
}

impl Scenario {
    pub fn new(name: impl Into<String>, bandwidth: BandwidthHz) -> Self {
        Self {
            name: name.into(),
            description: String::new(),
            horizon: DEFAULT_HORIZON,
            sag_convention: SagConvention::default(),
            switch_gains: SwitchGains::default(),
            bandwidth,
            overrides: ParamOverrides::default(),
            initial: InitialCondition::Equilibrium,
            events: Vec::new(),
        }
    }

    pub fn describe(mut self, d: &str) -> Self {
        self.description = d.into();
        self
    }

    pub fn event(mut self, time: f64, kind: EventKind) -> Self {
        self.events.push(Event::new(time, kind));
        self
    }

    pub fn tvc_enabled(&self) -> bool {
        self.bandwidth.tvc_hz.is_some()
    }

    /// Checks event ordering, horizon and event payload ranges.
    pub fn validate(&self) -> Result<()> {
        let n = &self.name;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(scenario_err(n, format!("horizon must be positive, got {}", self.horizon)));
        }
        self.bandwidth.spec::<f64>().validate()?;
        let mut prev = 0.0;
        for e in &self.events {
            if !(e.time >= prev && e.time.is_finite()) {
                return Err(scenario_err(
                    n,
                    format!("event times must be non-negative and non-decreasing at {e}"),
                ));
            }
            prev = e.time;
            match e.kind {
                EventKind::VoltageSag { depth } if !(depth > 0.0 && depth <= 1.0) => {
                    return Err(scenario_err(n, format!("sag depth {depth} outside (0, 1]")));
                }
                EventKind::PhaseJump { dphi_deg } if !(dphi_deg > -180.0 && dphi_deg <= 180.0) => {
                    return Err(scenario_err(n, format!("phase jump {dphi_deg} deg outside (-180, 180]")));
                }
                EventKind::PowerStep { p_new } if !p_new.is_finite() => {
                    return Err(scenario_err(n, "power step must be finite"));
                }
                EventKind::BandwidthSwitch {
                    pll_hz,
                    dvc_hz,
                    tvc_hz,
                } => {
                    for v in [pll_hz, dvc_hz, tvc_hz].into_iter().flatten() {
                        if !(v > 0.0 && v.is_finite()) {
                            return Err(scenario_err(n, format!("bandwidth {v} Hz must be positive")));
                        }
                    }
                }
                _ => {}
            }
        }
        if self.horizon < prev {
            return Err(scenario_err(
                n,
                format!("horizon {} precedes the last event at {prev}", self.horizon),
            ));
        }
        Ok(())
    }

    /// Parses and validates a TOML document.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(s).map_err(|e| ModelError::Scenario(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    /// Reference parameters with this scenario's overrides and gains.
    pub fn params<T: Scalar>(&self, base: &SystemParams<T>) -> Result<SystemParams<T>> {
        let mut p = *base;
        self.overrides.apply(&mut p);
        p.set_bandwidths(&self.bandwidth.spec())?;
        p.validate()?;
        Ok(p)
    }

    /// Time of the first fault clearance.
    pub fn clear_time(&self) -> Option<f64> {
        self.events
            .iter()
            .find(|e| e.kind == EventKind::FaultClear)
            .map(|e| e.time)
    }

    /// Copy with the first fault clearance moved to `t_clear`, events re-sorted
    /// (stable) and the horizon extended if needed.
    pub fn with_clear_time(&self, t_clear: f64) -> Result<Self> {
        let mut s = self.clone();
        let e = s
            .events
            .iter_mut()
            .find(|e| e.kind == EventKind::FaultClear)
            .ok_or_else(|| scenario_err(&self.name, "has no fault-clear event"))?;
        e.time = t_clear;
        s.events
            .sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap_or(std::cmp::Ordering::Equal));
        if s.horizon < t_clear {
            s.horizon = t_clear + DEFAULT_HORIZON;
        }
        s.validate()?;
        Ok(s)
    }
}

/// Parameters and loop switches in force between events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingMode<T> {
    pub params: SystemParams<T>,
    pub tvc_enabled: bool,
}

/// Scenario-level settings needed to interpret events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventContext {
    /// Grid voltage before any fault, restored by [`EventKind::FaultClear`].
    pub u_nominal: f64,
    pub sag_convention: SagConvention,
    pub switch_gains: SwitchGains,
}

impl EventContext {
    pub fn for_scenario<T: Scalar>(sc: &Scenario, prm: &SystemParams<T>) -> Self {
        Self {
            u_nominal: prm.u_g.to_f64_lossy(),
            sag_convention: sc.sag_convention,
            switch_gains: sc.switch_gains,
        }
    }
}

/// Applies one event. States are continuous except for the `δ` step of a
/// phase jump; integrator states are carried over unchanged by bandwidth
/// switches.
pub fn apply_event<T: Scalar>(
    event: &EventKind,
    state: &FullState<T>,
    mode: &OperatingMode<T>,
    ctx: &EventContext,
) -> Result<(FullState<T>, OperatingMode<T>)> {
    let mut s = *state;
    let mut m = *mode;
    match *event {
        EventKind::VoltageSag { depth } => {
            let left = match ctx.sag_convention {
                SagConvention::DropTo => depth,
                SagConvention::DropBy => 1.0 - depth,
            };
            m.params.u_g = T::lit(left * ctx.u_nominal);
        }
        EventKind::FaultClear => m.params.u_g = T::lit(ctx.u_nominal),
        EventKind::PhaseJump { dphi_deg } => s.delta = s.delta + T::lit(dphi_deg.to_radians()),
        EventKind::PowerStep { p_new } => m.params.p_in = T::lit(p_new),
        EventKind::BandwidthSwitch {
            pll_hz,
            dvc_hz,
            tvc_hz,
        } => {
            let cur = m.params.bandwidths(false);
            let hz = |v: f64| T::TAU() * T::lit(v);
            let bw = BandwidthSpec {
                omega_pll: pll_hz.map(hz).unwrap_or(cur.omega_pll),
                omega_dvc: dvc_hz.map(hz).unwrap_or(cur.omega_dvc),
                omega_tvc: tvc_hz.map(hz),
            };
            let old = m.params;
            m.params.set_bandwidths(&bw)?;
            if ctx.switch_gains == SwitchGains::ProportionalOnly {
                m.params.k_i_pll = old.k_i_pll;
                m.params.k_i_dvc = old.k_i_dvc;
                m.params.zeta_pll = m.params.k_i_pll / m.params.k_p_pll;
            }
        }
        EventKind::TvcToggle { on } => m.tvc_enabled = on,
    }
    Ok((s, m))
}

fn sag_clear(name: &str, bw: BandwidthHz, depth: f64, t_clear: f64) -> Scenario {
    Scenario::new(name, bw)
        .event(0.0, EventKind::VoltageSag { depth })
        .event(t_clear, EventKind::FaultClear)
}

/// Every builtin scenario, in catalog order.
pub fn builtin_scenarios() -> Vec<Scenario> {
    let pll_fast = BandwidthHz::new(15.0, 2.0, None);
    let dvc_fast = BandwidthHz::new(2.0, 15.0, None);
    let mut v = vec![
        sag_clear("fig3", pll_fast, 0.9, 0.16)
            .describe("0.9 pu sag cleared at t_fault; PLL 15 Hz, DVC 2 Hz, no TVC"),
        sag_clear("fig5", dvc_fast, 0.9, 0.20)
            .describe("0.9 pu sag cleared at t_fault; PLL 2 Hz, DVC 15 Hz, no TVC"),
        sag_clear("fig7a", BandwidthHz::new(15.0, 2.0, Some(20.0)), 0.6, 0.77)
            .describe("0.6 pu sag with fast TVC (20 Hz, k_v = 2); PLL 15 Hz, DVC 2 Hz"),
        sag_clear("fig7b", BandwidthHz::new(2.0, 15.0, Some(20.0)), 0.6, 0.10)
            .describe("0.6 pu sag with fast TVC (20 Hz, k_v = 2); PLL 2 Hz, DVC 15 Hz"),
        sag_clear("fig8b", BandwidthHz::new(16.0, 2.0, Some(0.3)), 0.9, 0.24)
            .describe("0.9 pu sag cleared at 0.24 s; slow TVC 0.3 Hz, PLL 16 Hz, DVC 2 Hz"),
        sag_clear("fig8c", BandwidthHz::new(16.0, 2.0, Some(0.3)), 0.9, 0.24)
            .event(
                0.35,
                EventKind::BandwidthSwitch {
                    pll_hz: Some(0.4),
                    dvc_hz: None,
                    tvc_hz: None,
                },
            )
            .describe("as fig8b, PLL bandwidth switched to 0.4 Hz at 0.35 s"),
        Scenario::new("fig10", BandwidthHz::new(16.0, 2.0, Some(20.0)))
            .event(0.0, EventKind::VoltageSag { depth: 0.9 })
            .describe("0.9 pu sag never cleared; fast TVC 20 Hz, PLL 16 Hz, DVC 2 Hz"),
        sag_clear("fig11b", BandwidthHz::new(2.0, 15.0, Some(20.0)), 0.6, 0.10)
            .describe("0.6 pu sag cleared at 0.1 s; TVC 20 Hz, PLL 2 Hz, DVC 15 Hz"),
        sag_clear("fig11c", BandwidthHz::new(2.0, 15.0, Some(20.0)), 0.6, 0.10)
            .event(
                0.10,
                EventKind::BandwidthSwitch {
                    pll_hz: None,
                    dvc_hz: Some(0.4),
                    tvc_hz: None,
                },
            )
            .describe("as fig11b, DVC bandwidth switched to 0.4 Hz at clearance"),
    ];
    for deg in [15.0, 19.0, 21.0, 25.0, 48.0] {
        v.push(
            Scenario::new(format!("fig13-jump-{deg}"), BandwidthHz::new(1.0, 8.0, None))
                .event(0.0, EventKind::PhaseJump { dphi_deg: deg })
                .describe("grid phase jump; PLL 1 Hz, DVC 8 Hz, no TVC"),
        );
    }
    for p0 in [0.0, 0.2, 0.45] {
        let mut s = Scenario::new(format!("fig16-step-{p0}"), BandwidthHz::new(18.0, 3.0, None))
            .event(0.0, EventKind::PowerStep { p_new: 1.0 })
            .describe("input power step to 1 pu; PLL 18 Hz, DVC 3 Hz, no TVC");
        s.overrides.p_in = Some(p0);
        v.push(s);
    }
    let mut restart = Scenario::new("fig18-restart", BandwidthHz::new(0.5, 3.0, Some(20.0)))
        .event(0.0, EventKind::PowerStep { p_new: 1.0 })
        .describe("restart from i_d = 0 with v_dc at its 3 pu clamp; power steps 0 -> 1 pu");
    restart.overrides.p_in = Some(0.0);
    restart.initial = InitialCondition::State {
        delta: 0.0,
        x_int_pll: 0.0,
        i_d: 0.0,
        dv2: 2.75,
        i_q: 0.0,
    };
    v.push(restart);
    v.push(Scenario::new("steady", pll_fast).describe("no events"));
    v
}

/// Looks up a builtin scenario by name.
pub fn builtin(name: &str) -> Option<Scenario> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_is_valid_and_unique() {
        let all = builtin_scenarios();
        for s in &all {
            s.validate().unwrap();
        }
        let mut names: Vec<_> = all.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), all.len());
        for n in [
            "fig3", "fig5", "fig7a", "fig7b", "fig8b", "fig8c", "fig10", "fig11b", "fig11c",
            "fig13-jump-15", "fig13-jump-19", "fig13-jump-21", "fig13-jump-25", "fig13-jump-48",
            "fig16-step-0", "fig16-step-0.2", "fig16-step-0.45", "fig18-restart", "steady",
        ] {
            assert!(builtin(n).is_some(), "{n}");
        }
    }

    #[test]
    fn round_trip_every_entry() {
        for s in builtin_scenarios() {
            let text = s.to_toml_string();
            let back = Scenario::from_toml_str(&text).unwrap();
            assert_eq!(back, s, "{text}");
        }
    }

    #[test]
    fn fig3_and_restart_shape() {
        let s = builtin("fig3").unwrap();
        assert_eq!(s.bandwidth, BandwidthHz::new(15.0, 2.0, None));
        assert_eq!(s.events[0].kind, EventKind::VoltageSag { depth: 0.9 });
        assert_eq!(s.clear_time(), Some(0.16));
        let r = builtin("fig18-restart").unwrap();
        match r.initial {
            InitialCondition::State { dv2, .. } => assert_eq!(dv2, 3.0f64 * 3.0 - 2.5 * 2.5),
            _ => panic!(),
        }
        assert!(builtin("steady").unwrap().events.is_empty());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = "name = \"x\"\nhorizon = 1.0\ncolour = 3\n[bandwidth]\npll_hz = 1.0\ndvc_hz = 2.0\n";
        let e = Scenario::from_toml_str(bad).unwrap_err().to_string();
        assert!(e.contains("colour") && e.contains("line"), "{e}");
        let bad_event = "name = \"x\"\n[bandwidth]\npll_hz = 1.0\ndvc_hz = 2.0\n[[events]]\nkind = \"fault-clear\"\ntime = 1.0\ndepth = 0.3\n";
        assert!(Scenario::from_toml_str(bad_event).is_err());
    }

    #[test]
    fn validation_rules() {
        let mut s = builtin("fig3").unwrap();
        s.events.swap(0, 1);
        assert!(s.validate().is_err());
        let mut s = builtin("fig3").unwrap();
        s.horizon = 0.1;
        assert!(s.validate().is_err());
        let s = Scenario::new("x", BandwidthHz::new(1.0, 1.0, None))
            .event(0.0, EventKind::VoltageSag { depth: 1.5 });
        assert!(s.validate().is_err());
    }

    #[test]
    fn clear_time_moves() {
        let s = builtin("fig3").unwrap().with_clear_time(0.2).unwrap();
        assert_eq!(s.clear_time(), Some(0.2));
        assert!(builtin("steady").unwrap().with_clear_time(0.2).is_err());
    }

    fn mode() -> (FullState<f64>, OperatingMode<f64>, EventContext) {
        let p = SystemParams::reference(&BandwidthSpec::from_hz(16.0, 2.0, Some(0.3))).unwrap();
        let s = FullState::new(0.6, 0.01, 1.2, 0.1, 0.05);
        let ctx = EventContext {
            u_nominal: 1.0,
            sag_convention: SagConvention::DropBy,
            switch_gains: SwitchGains::Both,
        };
        (s, OperatingMode { params: p, tvc_enabled: true }, ctx)
    }

    #[test]
    fn event_application() {
        let (s, m, mut ctx) = mode();
        let (s2, m2) = apply_event(&EventKind::PhaseJump { dphi_deg: 25.0 }, &s, &m, &ctx).unwrap();
        assert!((s2.delta - s.delta - 0.4363).abs() < 1e-4);
        assert_eq!((s2.i_d, s2.dv2, s2.x_int_pll, s2.i_q), (s.i_d, s.dv2, s.x_int_pll, s.i_q));
        assert_eq!(m2, m);

        let (_, m2) = apply_event(&EventKind::VoltageSag { depth: 0.9 }, &s, &m, &ctx).unwrap();
        assert!((m2.params.u_g - 0.1).abs() < 1e-15);
        ctx.sag_convention = SagConvention::DropTo;
        let (_, m2) = apply_event(&EventKind::VoltageSag { depth: 0.9 }, &s, &m, &ctx).unwrap();
        assert!((m2.params.u_g - 0.9).abs() < 1e-15);
        let (_, m3) = apply_event(&EventKind::FaultClear, &s, &m2, &ctx).unwrap();
        assert_eq!(m3.params.u_g, 1.0);

        let (_, m2) = apply_event(&EventKind::TvcToggle { on: false }, &s, &m, &ctx).unwrap();
        assert!(!m2.tvc_enabled);
        let (_, m2) = apply_event(&EventKind::PowerStep { p_new: 0.3 }, &s, &m, &ctx).unwrap();
        assert_eq!(m2.params.p_in, 0.3);
    }

    #[test]
    fn bandwidth_switch_recomputes_gains() {
        let (s, m, mut ctx) = mode();
        let ev = EventKind::BandwidthSwitch {
            pll_hz: Some(0.4),
            dvc_hz: None,
            tvc_hz: None,
        };
        let (s2, m2) = apply_event(&ev, &s, &m, &ctx).unwrap();
        assert_eq!(s2, s);
        let w = std::f64::consts::TAU * 0.4;
        assert!((m2.params.k_p_pll - w).abs() < 1e-12);
        assert!((m2.params.k_i_pll - 0.25 * w).abs() < 1e-12);
        assert!((m2.params.k_p_dvc - m.params.k_p_dvc).abs() < 1e-15);
        assert_eq!(m2.params.omega_tvc, m.params.omega_tvc);

        ctx.switch_gains = SwitchGains::ProportionalOnly;
        let (_, m3) = apply_event(&ev, &s, &m, &ctx).unwrap();
        assert!((m3.params.k_p_pll - w).abs() < 1e-12);
        assert_eq!(m3.params.k_i_pll, m.params.k_i_pll);
        m3.params.validate().unwrap();
    }
}
