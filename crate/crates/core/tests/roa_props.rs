use gflstab::equilibria::full_equilibrium;
use gflstab::model::FullState;
use gflstab::ode::{integrate, OdeOptions, StepControl};
use gflstab::params::{BandwidthSpec, SystemParams};
use gflstab::reduced::Ordering;
use gflstab::roa::{
    brute_force_roa, composite_roa, in_roa, oracle_agreement, trace_stable_manifold, voltage_threshold,
    GridSpec, Membership, RoaBoundary, RoaOptions, RoaSystem,
};
use gflstab::Params;

fn reference(pll: f64, dvc: f64, tvc: Option<f64>) -> Params {
    SystemParams::reference(&BandwidthSpec::from_hz(pll, dvc, tvc)).unwrap()
}

fn reduced(o: Ordering) -> RoaSystem {
    RoaSystem::Reduced { ordering: o }
}

/// Forward run from `z0`: whether it enters the 1e-3 ball around `sep`.
fn converges(sys: RoaSystem, p: &Params, z0: [f64; 2], sep: [f64; 2], horizon: f64) -> bool {
    let mut hit = false;
    integrate(
        |_, z| sys.rhs(*z, p),
        0.0,
        z0,
        horizon,
        &OdeOptions::default(),
        |_, z| {
            hit = (z[0] - sep[0]).abs().max((z[1] - sep[1]).abs()) <= 1e-3;
            if hit {
                StepControl::Stop
            } else {
                StepControl::Continue
            }
        },
    );
    hit
}

fn check_forward_invariance(sys: RoaSystem, p: &Params) {
    let b: RoaBoundary = trace_stable_manifold(sys, p, &RoaOptions::default()).unwrap();
    let horizon = 4.0 * brute_force_roa(sys, p, &GridSpec::new(b.bbox, 1)).unwrap().horizon;
    let w = b.bbox.width();
    let norm = |q: [f64; 2]| [(q[0] - b.bbox.lo[0]) / w[0], (q[1] - b.bbox.lo[1]) / w[1]];
    let raw = |n: [f64; 2]| [b.bbox.lo[0] + n[0] * w[0], b.bbox.lo[1] + n[1] * w[1]];
    let mut checked = 0;
    for branch in &b.extended {
        let interior: Vec<usize> = (1..branch.len() - 1)
            .filter(|&k| norm(branch[k]).iter().all(|v| *v > 0.02 && *v < 0.98))
            .collect();
        let step = (interior.len() / 12).max(1);
        for &k in interior.iter().step_by(step) {
            let (a, m, c) = (norm(branch[k - 1]), norm(branch[k]), norm(branch[k + 1]));
            let t = [c[0] - a[0], c[1] - a[1]];
            let l = (t[0] * t[0] + t[1] * t[1]).sqrt();
            if l == 0.0 {
                continue;
            }
            let nrm = [-t[1] / l, t[0] / l];
            let probe = |s: f64| raw([m[0] + s * nrm[0], m[1] + s * nrm[1]]);
            let sign = match in_roa(probe(0.01), &b) {
                Membership::Inside => 1.0,
                Membership::Outside => -1.0,
                Membership::Indeterminate => continue,
            };
            let inward = probe(sign * 1e-4);
            let outward = probe(-sign * 1e-4);
            assert!(converges(sys, p, inward, b.sep, horizon), "{sys}: inward nudge at {:?} diverged", branch[k]);
            assert!(!converges(sys, p, outward, b.sep, horizon), "{sys}: outward nudge at {:?} converged", branch[k]);
            checked += 1;
        }
    }
    assert!(checked >= 6, "{sys}: only {checked} boundary points checked");
}

#[test]
fn boundary_is_forward_invariant_pll_fast() {
    check_forward_invariance(reduced(Ordering::PllFastDvcSlow), &reference(15.0, 2.0, None));
}

#[test]
fn boundary_is_forward_invariant_dvc_fast() {
    check_forward_invariance(reduced(Ordering::DvcFastPllSlow), &reference(2.0, 15.0, None));
}

#[test]
fn boundary_is_forward_invariant_with_tvc() {
    check_forward_invariance(reduced(Ordering::PllTvcFastDvcSlow), &reference(15.0, 2.0, Some(20.0)));
}

#[test]
fn oracle_agrees_for_every_ordering() {
    for (pll, dvc, tvc, o) in [
        (15.0, 2.0, None, Ordering::PllFastDvcSlow),
        (2.0, 15.0, None, Ordering::DvcFastPllSlow),
        (15.0, 2.0, Some(20.0), Ordering::PllTvcFastDvcSlow),
        (2.0, 15.0, Some(20.0), Ordering::TvcDvcFastPllSlow),
    ] {
        let p = reference(pll, dvc, tvc);
        let b = trace_stable_manifold(reduced(o), &p, &RoaOptions::default()).unwrap();
        let g = brute_force_roa(reduced(o), &p, &GridSpec::new(b.bbox, 40)).unwrap();
        let a = oracle_agreement(&b, &g);
        assert!(a.fraction() >= 0.97, "{o}: {a:?}");
    }
}

#[test]
fn uep_orderings_of_the_comparison_table() {
    let p = reference(15.0, 2.0, Some(20.0));
    let opts = RoaOptions::default();
    let dvc = trace_stable_manifold(reduced(Ordering::PllFastDvcSlow), &p, &opts).unwrap();
    let dvc_tvc = trace_stable_manifold(reduced(Ordering::PllTvcFastDvcSlow), &p, &opts).unwrap();
    assert!(dvc.uep[0] < dvc_tvc.uep[0] && dvc_tvc.uep[0] < p.u_g / p.x_g);

    let q = reference(2.0, 15.0, Some(20.0));
    let pll = trace_stable_manifold(reduced(Ordering::DvcFastPllSlow), &q, &opts).unwrap();
    let pll_tvc = trace_stable_manifold(reduced(Ordering::TvcDvcFastPllSlow), &q, &opts).unwrap();
    let i_d = full_equilibrium(&q, false).unwrap().i_d;
    let alone = trace_stable_manifold(RoaSystem::PllAlone { i_d }, &q, &opts).unwrap();
    assert!(pll.uep[0] < pll_tvc.uep[0] && pll_tvc.uep[0] < alone.uep[0]);
    assert!(alone.uep[0] > std::f64::consts::FRAC_PI_2);
}

#[test]
fn fast_tvc_enlarges_the_regions() {
    let opts = RoaOptions::default();
    for (pll, dvc) in [(15.0, 2.0), (2.0, 15.0)] {
        let plain = composite_roa(&reference(pll, dvc, None), &BandwidthSpec::from_hz(pll, dvc, None), &opts).unwrap();
        let tvc = composite_roa(
            &reference(pll, dvc, Some(20.0)),
            &BandwidthSpec::from_hz(pll, dvc, Some(20.0)),
            &opts,
        )
        .unwrap();
        let common = plain.slow.bbox.union(&tvc.slow.bbox);
        assert!(tvc.area(&common, 100) >= plain.area(&common, 100));
    }
    let p = reference(15.0, 2.0, Some(20.0));
    assert!(voltage_threshold(&p, true).unwrap() < voltage_threshold(&p, false).unwrap());
}

#[test]
fn composite_membership() {
    let p = reference(15.0, 2.0, None);
    let c = composite_roa(&p, &BandwidthSpec::from_hz(15.0, 2.0, None), &RoaOptions::default()).unwrap();
    assert!(!c.advisory);
    let sep = full_equilibrium(&p, false).unwrap();
    assert_eq!(c.contains(&sep).unwrap(), Membership::Inside);
    let far_angle = FullState { delta: sep.delta + 3.0, ..sep };
    assert_eq!(c.contains(&far_angle).unwrap(), Membership::Outside);
    let big_current = FullState { i_d: 2.2, ..sep };
    assert_eq!(c.contains(&big_current).unwrap(), Membership::Outside);

    let q = reference(2.0, 15.0, None);
    let c = composite_roa(&q, &BandwidthSpec::from_hz(2.0, 15.0, None), &RoaOptions::default()).unwrap();
    let sep = full_equilibrium(&q, false).unwrap();
    assert_eq!(c.contains(&sep).unwrap(), Membership::Inside);
    let past_quarter = FullState { delta: 1.6, x_int_pll: 0.0, ..sep };
    assert_eq!(c.contains(&past_quarter).unwrap(), Membership::Outside);

    let close = composite_roa(&q, &BandwidthSpec::from_hz(2.0, 6.0, None), &RoaOptions::default()).unwrap();
    assert!(close.advisory);
}

#[test]
fn pll_diverges_beyond_the_current_limit_line() {
    let p = reference(15.0, 2.0, None);
    let i_d = 1.01 * p.u_g / p.x_g;
    let sys = RoaSystem::PllAlone { i_d };
    assert!(sys.equilibria(&p).is_err());
    let sol = integrate(
        |_, z| sys.rhs(*z, &p),
        0.0,
        [std::f64::consts::FRAC_PI_2, 0.0],
        2.0,
        &OdeOptions::default(),
        |_, z| {
            if z[0].abs() > 4.0 * std::f64::consts::PI {
                StepControl::Stop
            } else {
                StepControl::Continue
            }
        },
    );
    assert!(sol.y.last().unwrap()[0].abs() > 4.0 * std::f64::consts::PI);
}

#[test]
fn sep_cell_converges() {
    let p = reference(15.0, 2.0, None);
    let sys = reduced(Ordering::PllFastDvcSlow);
    let b = trace_stable_manifold(sys, &p, &RoaOptions::default()).unwrap();
    let g = brute_force_roa(sys, &p, &GridSpec::new(b.bbox, 21)).unwrap();
    let w = b.bbox.width();
    let i = ((b.sep[0] - b.bbox.lo[0]) / w[0] * 21.0) as usize;
    let j = ((b.sep[1] - b.bbox.lo[1]) / w[1] * 21.0) as usize;
    assert_eq!(g.get(i, j), Membership::Inside);
}
