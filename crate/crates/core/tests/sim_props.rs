use gflstab::model::dv2_band;
use gflstab::ode::OdeOptions;
use gflstab::params::{BandwidthSpec, SystemParams};
use gflstab::reduced::Ordering;
use gflstab::scenarios::{
    apply_event, builtin, builtin_scenarios, Event, EventContext, EventKind, OperatingMode, Scenario,
};
use gflstab::sim::{
    cct_search, distance, reduction_error, simulate_scenario, Outcome, SimOptions, VerdictReason,
};
use gflstab::model::FullState;
use gflstab::Params;
use proptest::prelude::*;

fn base() -> Params {
    SystemParams::reference(&BandwidthSpec::from_hz(15.0, 2.0, None)).unwrap()
}

fn run(sc: &Scenario) -> gflstab::SimulationResult {
    simulate_scenario(sc, &base(), &SimOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_are_bit_identical(t_clear in 0.01f64..0.4, name in prop::sample::select(vec!["fig3", "fig5", "fig7b", "fig8b"])) {
        let sc = builtin(name).unwrap().with_clear_time(t_clear).unwrap();
        let (a, b) = (run(&sc), run(&sc));
        prop_assert_eq!(&a.trajectory.t, &b.trajectory.t);
        prop_assert_eq!(&a.trajectory.states, &b.trajectory.states);
        prop_assert_eq!(a.verdict, b.verdict);
    }

    #[test]
    fn limiters_bound_every_sample(depth in 0.2f64..0.95, t_clear in 0.02f64..1.0) {
        let mut sc = builtin("fig8b").unwrap().with_clear_time(t_clear).unwrap();
        sc.events[0].kind = EventKind::VoltageSag { depth };
        sc.horizon = 5.0;
        let r = run(&sc);
        let p = sc.params(&base()).unwrap();
        let (lo, hi) = dv2_band(&p);
        for s in &r.trajectory.states {
            prop_assert!(s.i_d.abs() <= p.limits.i_limit && s.i_q.abs() <= p.limits.i_limit);
            prop_assert!(s.dv2 >= lo && s.dv2 <= hi, "dv2 = {} outside [{}, {}]", s.dv2, lo, hi);
        }
    }

    #[test]
    fn clearing_before_cct_is_stable(u in 0.0f64..1.0) {
        let sc = builtin("fig3").unwrap();
        let cct = cct_search(&sc, &base(), &SimOptions::default(), 0.0, 0.5, 0.01).unwrap().cct;
        let r = run(&sc.with_clear_time(u * cct).unwrap());
        prop_assert_eq!(r.verdict.outcome, Outcome::Stable);
    }

    #[test]
    fn events_keep_state_continuous(
        delta in -1.0f64..1.0, x in -2.0f64..2.0, i_d in 0.0f64..1.5, dv2 in -0.5f64..0.5, i_q in -0.3f64..0.3,
        kind in prop_oneof![
            (0.1f64..1.0).prop_map(|depth| EventKind::VoltageSag { depth }),
            Just(EventKind::FaultClear),
            (0.0f64..1.2).prop_map(|p_new| EventKind::PowerStep { p_new }),
            (0.3f64..20.0, 0.3f64..20.0).prop_map(|(pll_hz, dvc_hz)| EventKind::BandwidthSwitch { pll_hz: Some(pll_hz), dvc_hz: Some(dvc_hz), tvc_hz: None }),
            any::<bool>().prop_map(|on| EventKind::TvcToggle { on }),
        ],
    ) {
        let s = FullState::new(delta, x, i_d, dv2, i_q);
        let mode = OperatingMode { params: SystemParams::reference(&BandwidthSpec::from_hz(15.0, 2.0, Some(20.0))).unwrap(), tvc_enabled: true };
        let sc = builtin("fig7a").unwrap();
        let ctx = EventContext::for_scenario(&sc, &mode.params);
        let (s2, _) = apply_event(&kind, &s, &mode, &ctx).unwrap();
        prop_assert_eq!(s2, s);
    }

    #[test]
    fn phase_jump_shifts_only_delta(delta in -1.0f64..1.0, dphi_deg in -60.0f64..60.0) {
        let s = FullState::new(delta, 0.3, 1.0, 0.1, 0.0);
        let mode = OperatingMode { params: base(), tvc_enabled: false };
        let ctx = EventContext::for_scenario(&builtin("fig3").unwrap(), &mode.params);
        let (s2, m2) = apply_event(&EventKind::PhaseJump { dphi_deg }, &s, &mode, &ctx).unwrap();
        prop_assert!((s2.delta - delta - dphi_deg.to_radians()).abs() < 1e-15);
        prop_assert_eq!((s2.x_int_pll, s2.i_d, s2.dv2, s2.i_q), (s.x_int_pll, s.i_d, s.dv2, s.i_q));
        prop_assert_eq!(m2, mode);
    }

    #[test]
    fn scenario_files_round_trip(
        horizon in 1.0f64..60.0,
        events in prop::collection::vec((0.0f64..10.0, prop_oneof![
            (0.1f64..1.0).prop_map(|depth| EventKind::VoltageSag { depth }),
            Just(EventKind::FaultClear),
            (-90.0f64..90.0).prop_map(|dphi_deg| EventKind::PhaseJump { dphi_deg }),
            (0.0f64..1.2).prop_map(|p_new| EventKind::PowerStep { p_new }),
            (prop::option::of(0.3f64..20.0), prop::option::of(0.3f64..20.0)).prop_map(|(pll_hz, dvc_hz)| EventKind::BandwidthSwitch { pll_hz, dvc_hz, tvc_hz: None }),
        ]), 0..6),
    ) {
        let mut sc = builtin("fig3").unwrap();
        sc.horizon = horizon;
        sc.events = events.into_iter().map(|(t, k)| Event::new(t.min(horizon), k)).collect();
        sc.events.sort_by(|a, b| a.time.total_cmp(&b.time));
        let back = Scenario::from_toml_str(&sc.to_toml_string()).unwrap();
        prop_assert_eq!(back, sc);
    }
}

#[test]
fn catalog_round_trips() {
    for sc in builtin_scenarios() {
        assert_eq!(Scenario::from_toml_str(&sc.to_toml_string()).unwrap(), sc, "{}", sc.name);
    }
}

#[test]
fn tightening_tolerances_moves_the_result_little() {
    let mut sc = builtin("fig5").unwrap().with_clear_time(0.15).unwrap();
    sc.horizon = 3.0;
    let rtol = 1e-8;
    let coarse = SimOptions { ode: OdeOptions { rtol, atol: 1e-10, ..OdeOptions::default() }, ..SimOptions::default() };
    let fine = SimOptions { ode: OdeOptions { rtol: rtol / 2.0, atol: 5e-11, ..OdeOptions::default() }, ..SimOptions::default() };
    let a = simulate_scenario(&sc, &base(), &coarse).unwrap().trajectory.last_state();
    let b = simulate_scenario(&sc, &base(), &fine).unwrap().trajectory.last_state();
    let scale = a.to_array().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    // Ten times the coarse run's per-step error allowance.
    assert!(distance(&a, &b) < 10.0 * rtol * scale, "{}", distance(&a, &b));
}

#[test]
fn cct_trace_is_monotone() {
    for name in ["fig3", "fig5", "fig7b"] {
        let r = cct_search(&builtin(name).unwrap(), &base(), &SimOptions::default(), 0.0, 1.0, 0.005).unwrap();
        assert!(r.is_monotone(), "{name}: {:?}", r.trace);
        assert!((r.first_unstable - r.cct - 0.005).abs() < 1e-9);
    }
}

#[test]
fn late_clearance_loses_synchronism() {
    let r = run(&builtin("fig8b").unwrap().with_clear_time(0.40).unwrap());
    assert_eq!(r.verdict.outcome, Outcome::Unstable);
    let r = run(&builtin("fig3").unwrap().with_clear_time(0.30).unwrap());
    assert_eq!(r.verdict.outcome, Outcome::Unstable);
}

#[test]
fn sustained_sag_rides_through_with_fast_tvc() {
    let r = run(&builtin("fig10").unwrap());
    assert!(r.verdict.is_stable(), "{}", r.verdict);
    let sep = r.trajectory.sep.unwrap();
    assert!(sep.i_q < 0.0, "TVC injects reactive current: {sep:?}");
}

#[test]
fn phase_jump_matrix_under_slow_pll() {
    let verdict = |n: &str| run(&builtin(n).unwrap()).verdict.outcome;
    assert_eq!(verdict("fig13-jump-15"), Outcome::Stable);
    assert_eq!(verdict("fig13-jump-21"), Outcome::Stable);
    assert_eq!(verdict("fig13-jump-25"), Outcome::Unstable);
    assert_eq!(verdict("fig13-jump-48"), Outcome::Unstable);
}

#[test]
fn restart_from_charged_link_recovers() {
    let r = run(&builtin("fig18-restart").unwrap());
    assert!(r.verdict.is_stable(), "{}", r.verdict);
}

#[test]
fn losing_power_entirely_slips() {
    let r = run(&builtin("fig16-step-0").unwrap());
    assert_eq!(r.verdict.outcome, Outcome::Unstable);
    assert_eq!(r.verdict.reason, VerdictReason::DeltaUnbounded);
}

#[test]
fn reduced_model_tracks_full_model_after_clearance() {
    let sc = builtin("fig5").unwrap();
    let full = run(&sc).trajectory;
    let red = simulate_scenario(&sc, &base(), &SimOptions::reduced(Ordering::DvcFastPllSlow, false))
        .unwrap()
        .trajectory;
    let skip = 5.0 / (2.0 * std::f64::consts::PI * 15.0);
    let e = reduction_error(&full, &red, Ordering::DvcFastPllSlow, 0.0, sc.horizon, skip);
    assert!(e.relative() <= 0.10, "{e:?}");
}

#[test]
fn reduced_ordering_must_match_tvc() {
    let sc = builtin("fig3").unwrap();
    assert!(simulate_scenario(&sc, &base(), &SimOptions::reduced(Ordering::PllTvcFastDvcSlow, false)).is_err());
}

#[test]
fn trajectory_csv_has_header_and_rows() {
    let r = run(&builtin("fig3").unwrap());
    let mut buf = Vec::new();
    r.trajectory.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,delta,x_int_pll,i_d,dv2,i_q,p,v_td,v_tq,events");
    assert_eq!(lines.count(), r.trajectory.len());
    assert!(text.contains("voltage-sag"));
}
