//! Subcommand implementations. Each writes its files into the output
//! directory and returns whether any run hit a solver failure.

use std::f64::consts::PI;

use anyhow::{bail, Context, Result};
use gflstab::equilibria::{
    classify_full, classify_reduced, existence_threshold, find_equilibria, full_equilibrium, Classification,
};
use gflstab::params::SystemParams;
use gflstab::reduced::{BandwidthOrdering, Ordering, SlowLoop, SEPARATION_THRESHOLD};
use gflstab::roa::{
    brute_force_roa, oracle_agreement, trace_stable_manifold, voltage_threshold, GridSpec, RoaOptions, RoaSystem,
};
use gflstab::scenarios::{EventKind, Scenario};
use gflstab::sim::{
    cct_search, reduction_error, simulate_scenario, CctProbe, CctResult, ModelKind, Outcome, VerdictReason,
};
use gflstab::{Params, SimOptions, SimulationResult};
use rayon::prelude::*;

use crate::config::{ModelChoice, RoaKind, RunConfig, SweepAxes, SweepOutput};
use crate::output::{angle, boundary_rows, coord, OutputDir};

/// How a command ended, for the exit status.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Status {
    pub solver_failure: bool,
}

fn strings<const N: usize>(v: [&str; N]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Reference parameters designed for the scenario's bandwidths.
fn base_params(sc: &Scenario) -> Result<Params> {
    Ok(SystemParams::reference(&sc.bandwidth.spec())?)
}

fn ordering_for(cfg: &RunConfig, sc: &Scenario) -> Result<BandwidthOrdering> {
    let mut b = BandwidthOrdering::classify(&sc.bandwidth.spec::<f64>(), SEPARATION_THRESHOLD)?;
    if let Some(o) = cfg.ordering {
        if o.uses_tvc() != sc.tvc_enabled() {
            bail!("ordering {o} does not match the scenario's TVC setting");
        }
        b.ordering = o;
    }
    Ok(b)
}

/// The models `cfg` asks for, with their file-name tags.
fn models(cfg: &RunConfig, sc: &Scenario) -> Result<Vec<(&'static str, SimOptions)>> {
    let reduced = || -> Result<SimOptions> { Ok(SimOptions::reduced(ordering_for(cfg, sc)?.ordering, cfg.correction)) };
    Ok(match cfg.model {
        ModelChoice::Full => vec![("full", SimOptions::default())],
        ModelChoice::Reduced => vec![("reduced", reduced()?)],
        ModelChoice::Both => vec![("full", SimOptions::default()), ("reduced", reduced()?)],
    })
}

/// Fast-loop bandwidth of the ordering, Hz.
fn fast_hz(sc: &Scenario, o: Ordering) -> f64 {
    match o.slow_loop() {
        SlowLoop::Dvc => sc.bandwidth.pll_hz,
        SlowLoop::Pll => sc.bandwidth.dvc_hz,
    }
}

fn verdict_line(tag: &str, r: &SimulationResult) -> String {
    format!("{tag}: {}", r.verdict)
}

pub fn simulate(cfg: &RunConfig, sc: &Scenario, out: &mut OutputDir) -> Result<Status> {
    let base = base_params(sc)?;
    let mut status = Status::default();
    let mut runs = Vec::new();
    for (tag, opts) in models(cfg, sc)? {
        let r = simulate_scenario(sc, &base, &opts).with_context(|| format!("{tag} run of `{}`", sc.name))?;
        out.trajectory(&format!("trajectory_{tag}.csv"), &r.trajectory)?;
        println!("{}", verdict_line(tag, &r));
        let last = r.trajectory.last_state();
        println!(
            "{tag}: t_end = {} s, {}, i_d = {:.6}, dv2 = {:.6}, i_q = {:.6}, {} samples",
            r.trajectory.t.last().copied().unwrap_or(0.0),
            coord("delta", last.delta, cfg.degrees),
            last.i_d,
            last.dv2,
            last.i_q,
            r.trajectory.len()
        );
        status.solver_failure |= r.verdict.reason == VerdictReason::SolverFailure;
        runs.push((tag, r));
    }
    let mut summary = String::new();
    for (tag, r) in &runs {
        summary += &format!(
            "[{tag}]\nmodel = \"{}\"\noutcome = \"{}\"\nreason = \"{}\"\nsamples = {}\n\n",
            r.trajectory.model,
            r.verdict.outcome,
            r.verdict.reason,
            r.trajectory.len()
        );
    }
    if let [(_, full), (_, red)] = &runs[..] {
        let ModelKind::Reduced { ordering, .. } = red.trajectory.model else {
            unreachable!("second run is reduced")
        };
        let skip = 5.0 / (2.0 * PI * fast_hz(sc, ordering));
        let e = reduction_error(&full.trajectory, &red.trajectory, ordering, 0.0, sc.horizon, skip);
        let [l0, l1] = ordering.labels();
        println!(
            "max slow-coordinate deviation ({ordering}, boundary layers of {skip:.4} s skipped): {l0} {:.6}, {l1} {:.6}; {:.2}% of range",
            e.max_abs[0],
            e.max_abs[1],
            100.0 * e.relative()
        );
        summary += &format!(
            "[deviation]\nordering = \"{ordering}\"\nskip_s = {skip}\nmax_abs = [{}, {}]\nrange = [{}, {}]\nrelative = {}\n",
            e.max_abs[0],
            e.max_abs[1],
            e.range[0],
            e.range[1],
            e.relative()
        );
    }
    out.text("summary.toml", &summary)?;
    Ok(status)
}

fn cct_rows(trace: &[CctProbe]) -> Vec<Vec<String>> {
    trace
        .iter()
        .map(|p| vec![p.t_clear.to_string(), p.verdict.outcome.to_string(), p.verdict.reason.to_string()])
        .collect()
}

/// Decimal places needed to print multiples of `resolution`.
fn decimals(resolution: f64) -> usize {
    (-resolution.log10() - 1e-9).ceil().max(0.0) as usize
}

pub fn cct(cfg: &RunConfig, sc: &Scenario, out: &mut OutputDir) -> Result<Status> {
    let base = base_params(sc)?;
    let c = cfg.cct;
    if sc.clear_time().is_none() {
        bail!("scenario `{}` has no fault-clear event to move", sc.name);
    }
    let digits = decimals(c.resolution);
    let mut status = Status::default();
    for (tag, opts) in models(cfg, sc)? {
        let file = format!("cct_trace_{tag}.csv");
        let header = strings(["t_clear", "outcome", "reason"]);
        let at_hi = simulate_scenario(&sc.with_clear_time(c.t_hi)?, &base, &opts)?;
        if at_hi.verdict.is_stable() {
            let probe = CctProbe {
                t_clear: c.t_hi,
                verdict: at_hi.verdict,
            };
            out.table(&file, &header, cct_rows(&[probe]), Some("t_clear"), &["outcome"])?;
            println!("{tag}: no CCT in range: stable at t_hi = {} s", c.t_hi);
            continue;
        }
        let r: CctResult = cct_search(sc, &base, &opts, c.t_lo, c.t_hi, c.resolution)?;
        status.solver_failure |= r.trace.iter().any(|p| p.verdict.reason == VerdictReason::SolverFailure);
        out.table(&file, &header, cct_rows(&r.trace), Some("t_clear"), &["outcome"])?;
        println!(
            "{tag}: cct = {:.digits$} s (first unstable {:.digits$} s, resolution {} s, {} probes)",
            r.cct,
            r.first_unstable,
            c.resolution,
            r.trace.len()
        );
        if !r.is_monotone() {
            println!("{tag}: warning: verdicts are not monotone in the clearing time");
        }
    }
    Ok(status)
}

pub fn roa(cfg: &RunConfig, sc: &Scenario, out: &mut OutputDir) -> Result<Status> {
    let p = sc.params(&base_params(sc)?)?;
    let system = match cfg.roa.kind {
        RoaKind::Slow => {
            let b = ordering_for(cfg, sc)?;
            if b.advisory {
                println!(
                    "advisory: bandwidth separation {:.2} is below {SEPARATION_THRESHOLD}",
                    b.separation_ratio
                );
            }
            RoaSystem::Reduced { ordering: b.ordering }
        }
        RoaKind::PllAlone => {
            let i_d = match cfg.roa.i_d {
                Some(v) => v,
                None => full_equilibrium(&p, sc.tvc_enabled())?.i_d,
            };
            RoaSystem::PllAlone { i_d }
        }
    };
    let b = trace_stable_manifold(system, &p, &RoaOptions::default())?;
    let [l0, l1] = system.labels();
    let show = |z: [f64; 2]| format!("{}, {}", coord(l0, z[0], cfg.degrees), coord(l1, z[1], cfg.degrees));
    println!("system: {system}");
    println!("sep: {}", show(b.sep));
    println!("uep: {}", show(b.uep));
    println!(
        "box: {l0} [{:.6}, {:.6}], {l1} [{:.6}, {:.6}]",
        b.bbox.lo[0], b.bbox.hi[0], b.bbox.lo[1], b.bbox.hi[1]
    );
    for (k, t) in b.truncated.iter().enumerate() {
        if *t {
            println!("branch {k} truncated before leaving the box");
        }
    }
    out.table(
        "roa_boundary.csv",
        &strings(["curve", "branch", l0, l1]),
        boundary_rows(&b),
        Some(l0),
        &[l1],
    )?;
    let lines: Vec<String> = b
        .validity_lines
        .iter()
        .map(|l| format!("{} {} {} ({})", l.coordinate, if l.below { "<" } else { ">" }, l.value, l.label))
        .collect();
    let mut notes = Vec::new();
    if !lines.is_empty() {
        notes.push(format!("validity: {}", lines.join("; ")));
    }
    if let Some(period) = b.period {
        let shift = (b.sep[0] - b.uep[0]).signum() * period;
        notes.push(format!("periodic in {l0}: the region is also bounded by the branches shifted by {shift}"));
        println!("periodic in {l0}: region bounded by the manifold and its copy shifted by {}", angle(shift, cfg.degrees));
    }
    if !notes.is_empty() {
        out.note("roa_boundary.csv", notes.join("; "));
    }
    println!("area in box: {:.6}", b.area(&b.bbox, 200));
    if cfg.roa.grid > 0 {
        let n = cfg.roa.grid;
        let g = brute_force_roa(system, &p, &GridSpec::new(b.bbox, n))?;
        let a = oracle_agreement(&b, &g);
        let rows = (0..n * n).map(|k| {
            let (i, j) = (k % n, k / n);
            let z = b.bbox.cell_center(n, n, i, j);
            vec![
                i.to_string(),
                j.to_string(),
                z[0].to_string(),
                z[1].to_string(),
                g.get(i, j).to_string(),
                gflstab::roa::in_roa(z, &b).to_string(),
            ]
        });
        out.table(
            "roa_grid.csv",
            &strings(["i", "j", l0, l1, "oracle", "boundary"]),
            rows,
            Some(l0),
            &[l1],
        )?;
        println!(
            "grid {n}x{n} (horizon {:.3} s): agreement {:.2}% of {} determinate cells, {} indeterminate",
            g.horizon,
            100.0 * a.fraction(),
            a.compared,
            a.indeterminate
        );
    }
    Ok(Status::default())
}

/// One sweep cell: axis values applied to a copy of the template.
fn apply_cell(template: &Scenario, axes: &[(&str, &[f64])], values: &[f64]) -> Result<Scenario> {
    let mut sc = template.clone();
    for ((name, _), &v) in axes.iter().zip(values) {
        let event = |sc: &mut Scenario, f: &dyn Fn(&mut EventKind) -> bool| -> Result<()> {
            if !sc.events.iter_mut().any(|e| f(&mut e.kind)) {
                bail!("sweep axis `{name}` needs a matching event in scenario `{}`", sc.name);
            }
            Ok(())
        };
        match *name {
            "pll_hz" => sc.bandwidth.pll_hz = v,
            "dvc_hz" => sc.bandwidth.dvc_hz = v,
            "tvc_hz" => sc.bandwidth.tvc_hz = Some(v),
            "sag_depth" => event(&mut sc, &|k| match k {
                EventKind::VoltageSag { depth } => {
                    *depth = v;
                    true
                }
                _ => false,
            })?,
            "phase_jump_deg" => event(&mut sc, &|k| match k {
                EventKind::PhaseJump { dphi_deg } => {
                    *dphi_deg = v;
                    true
                }
                _ => false,
            })?,
            "p_new" => event(&mut sc, &|k| match k {
                EventKind::PowerStep { p_new } => {
                    *p_new = v;
                    true
                }
                _ => false,
            })?,
            "clear_time" => sc = sc.with_clear_time(v)?,
            other => unreachable!("unknown axis {other}"),
        }
    }
    sc.validate()?;
    Ok(sc)
}

/// Cartesian product of the axes, last axis fastest.
fn grid(axes: &[(&str, &[f64])]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, (_, values)| {
        acc.into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut row = prefix.clone();
                    row.push(*v);
                    row
                })
            })
            .collect()
    })
}

fn sweep_cell(cfg: &RunConfig, sc: &Scenario, model: &str) -> Result<Vec<String>> {
    let base = base_params(sc)?;
    let opts = match model {
        "full" => SimOptions::default(),
        _ => SimOptions::reduced(ordering_for(cfg, sc)?.ordering, cfg.correction),
    };
    match cfg.sweep.as_ref().map(|s| s.output).unwrap_or_default() {
        SweepOutput::Verdict => {
            let r = simulate_scenario(sc, &base, &opts)?;
            Ok(vec![r.verdict.outcome.to_string(), r.verdict.reason.to_string()])
        }
        SweepOutput::Cct => {
            let c = cfg.cct;
            if simulate_scenario(&sc.with_clear_time(c.t_hi)?, &base, &opts)?.verdict.is_stable() {
                return Ok(vec!["none".into(), "none".into()]);
            }
            let r = cct_search(sc, &base, &opts, c.t_lo, c.t_hi, c.resolution)?;
            Ok(vec![r.cct.to_string(), r.first_unstable.to_string()])
        }
    }
}

pub fn sweep(cfg: &RunConfig, sc: &Scenario, out: &mut OutputDir, workers: usize) -> Result<Status> {
    let axes_cfg: &SweepAxes = cfg.sweep.as_ref().context("sweep needs a [sweep] table in the config")?;
    axes_cfg.validate()?;
    let axes = axes_cfg.axes();
    let cells = grid(&axes);
    let scenarios: Vec<Scenario> = cells
        .iter()
        .map(|v| apply_cell(sc, &axes, v))
        .collect::<Result<_>>()?;
    let model_tags: Vec<&str> = match cfg.model {
        ModelChoice::Full => vec!["full"],
        ModelChoice::Reduced => vec!["reduced"],
        ModelChoice::Both => vec!["full", "reduced"],
    };
    let jobs: Vec<(usize, &str)> = (0..cells.len())
        .flat_map(|k| model_tags.iter().map(move |m| (k, *m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    // Indexed parallel collect keeps the row order independent of scheduling.
    let results: Vec<Vec<String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(k, m)| {
                sweep_cell(cfg, &scenarios[k], m).unwrap_or_else(|e| vec!["error".into(), format!("{e:#}")])
            })
            .collect()
    });
    let output = axes_cfg.output;
    let mut header: Vec<String> = axes.iter().map(|(n, _)| n.to_string()).collect();
    header.push("model".into());
    header.extend(match output {
        SweepOutput::Verdict => strings(["outcome", "reason"]),
        SweepOutput::Cct => strings(["cct", "first_unstable"]),
    });
    let rows: Vec<Vec<String>> = jobs
        .iter()
        .zip(&results)
        .map(|(&(k, m), r)| {
            let mut row: Vec<String> = cells[k].iter().map(|v| v.to_string()).collect();
            row.push(m.into());
            row.extend(r.iter().cloned());
            row
        })
        .collect();
    let errors = results.iter().filter(|r| r[0] == "error").count();
    let solver_failure = results.iter().any(|r| r.get(1).is_some_and(|s| s == "solver-failure"));
    let first_axis = axes[0].0;
    let y = match output {
        SweepOutput::Verdict => "outcome",
        SweepOutput::Cct => "cct",
    };
    out.table("sweep.csv", &header, rows.clone(), Some(first_axis), &[y])?;
    println!("rows = {} ({} cells x {} model(s), {workers} workers)", rows.len(), cells.len(), model_tags.len());
    if output == SweepOutput::Verdict {
        for o in [Outcome::Stable, Outcome::Unstable, Outcome::Undetermined] {
            let n = results.iter().filter(|r| r[0] == o.to_string()).count();
            println!("{o}: {n}");
        }
    }
    if errors > 0 {
        println!("errors: {errors} (see the reason column)");
    }
    Ok(Status { solver_failure })
}

pub fn validate_reduction(cfg: &RunConfig, sc: &Scenario, out: &mut OutputDir) -> Result<Status> {
    let v = &cfg.validate;
    let ordering = ordering_for(cfg, sc)?.ordering;
    let mut template = sc.clone();
    if let Some(t) = v.clear_time {
        if template.clear_time().is_some() {
            template = template.with_clear_time(t)?;
        }
    }
    template.horizon = v.horizon.max(template.events.last().map_or(0.0, |e| e.time));
    let f0 = fast_hz(sc, ordering);
    let fast = if v.fast_hz.is_empty() { vec![f0, 2.0 * f0] } else { v.fast_hz.clone() };
    let mut rows = Vec::new();
    let mut prev: Option<f64> = None;
    let mut status = Status::default();
    println!("ordering: {ordering}");
    for &f in &fast {
        let mut s = template.clone();
        match ordering.slow_loop() {
            SlowLoop::Dvc => s.bandwidth.pll_hz = f,
            SlowLoop::Pll => s.bandwidth.dvc_hz = f,
        }
        let sep = BandwidthOrdering::classify(&s.bandwidth.spec::<f64>(), SEPARATION_THRESHOLD)?;
        if sep.ordering.slow_loop() != ordering.slow_loop() {
            bail!("fast bandwidth {f} Hz does not keep the {ordering} ordering");
        }
        let base = base_params(&s)?;
        let run = |o: &SimOptions| simulate_scenario(&s, &base, o);
        let full = run(&SimOptions::default())?;
        let plain = run(&SimOptions::reduced(ordering, false))?;
        let corrected = run(&SimOptions::reduced(ordering, true))?;
        for r in [&full, &plain, &corrected] {
            status.solver_failure |= r.verdict.reason == VerdictReason::SolverFailure;
        }
        let skip = v.skip_time_constants / (2.0 * PI * f);
        let outer = reduction_error(&full.trajectory, &plain.trajectory, ordering, 0.0, s.horizon, skip).relative();
        let early = reduction_error(&full.trajectory, &plain.trajectory, ordering, 0.0, v.window, 0.0).relative();
        let early_c = reduction_error(&full.trajectory, &corrected.trajectory, ordering, 0.0, v.window, 0.0).relative();
        let ratio = prev.map(|p| outer / p);
        prev = Some(outer);
        println!(
            "fast {f} Hz: separation {:.2}{}, error {:.4}% of range{}; first {} s: {:.4}% -> {:.4}% corrected ({})",
            sep.separation_ratio,
            if sep.advisory { " (advisory)" } else { "" },
            100.0 * outer,
            ratio.map_or(String::new(), |r| format!(", ratio to previous {r:.3}")),
            v.window,
            100.0 * early,
            100.0 * early_c,
            if early_c < early { "smaller" } else { "not smaller" }
        );
        rows.push(vec![
            f.to_string(),
            sep.separation_ratio.to_string(),
            sep.advisory.to_string(),
            outer.to_string(),
            ratio.map_or(String::new(), |r| r.to_string()),
            early.to_string(),
            early_c.to_string(),
        ]);
    }
    out.table(
        "reduction.csv",
        &strings([
            "fast_hz",
            "separation_ratio",
            "advisory",
            "relative_error",
            "ratio_to_previous",
            "early_error",
            "early_error_corrected",
        ]),
        rows,
        Some("fast_hz"),
        &["relative_error"],
    )?;
    Ok(status)
}

fn max_real(c: &Classification) -> f64 {
    c.eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn equilibria(cfg: &RunConfig, sc: &Scenario, out: &mut OutputDir) -> Result<Status> {
    let p = sc.params(&base_params(sc)?)?;
    let tvc = sc.tvc_enabled();
    let mut rows = Vec::new();
    let full = full_equilibrium(&p, tvc);
    match &full {
        Ok(s) => {
            let c = classify_full(s, &p, tvc)?;
            println!(
                "full: {}, x_int_pll = {:.6}, i_d = {:.6}, dv2 = {:.3e}, i_q = {:.6} ({}, max Re(lambda) = {:.4})",
                coord("delta", s.delta, cfg.degrees),
                s.x_int_pll,
                s.i_d,
                s.dv2,
                s.i_q,
                c.kind,
                max_real(&c)
            );
            rows.push(vec![
                "full".into(),
                "sep".into(),
                "delta".into(),
                s.delta.to_string(),
                "i_d".into(),
                s.i_d.to_string(),
                c.kind.to_string(),
                max_real(&c).to_string(),
            ]);
        }
        Err(e) => println!("full: no equilibrium: {e}"),
    }
    let orderings: Vec<Ordering> = Ordering::ALL.into_iter().filter(|o| o.uses_tvc() == tvc).collect();
    for o in orderings {
        let e = find_equilibria(o, &p)?;
        let [l0, l1] = o.labels();
        if !e.exists {
            println!("{o}: no equilibrium pair (curve maximum short by {:.6})", -e.margin);
            continue;
        }
        for (name, z) in [("sep", e.sep), ("uep", e.uep)] {
            let c = classify_reduced(o, z, &p)?;
            println!(
                "{o} {name}: {}, {} ({}, max Re(lambda) = {:.4})",
                coord(l0, z[0], cfg.degrees),
                coord(l1, z[1], cfg.degrees),
                c.kind,
                max_real(&c)
            );
            rows.push(vec![
                o.to_string(),
                name.into(),
                l0.into(),
                z[0].to_string(),
                l1.into(),
                z[1].to_string(),
                c.kind.to_string(),
                max_real(&c).to_string(),
            ]);
        }
        if o.slow_loop() == SlowLoop::Pll {
            println!("{o} uep angle: {}", angle(e.uep[0], true));
        }
    }
    println!("grid-voltage threshold (i_q = 0): {:.6} pu", existence_threshold(&p));
    println!("grid-voltage threshold (DVC-slow model): {:.6} pu", voltage_threshold(&p, tvc)?);
    out.table(
        "equilibria.csv",
        &strings(["system", "point", "coord0", "value0", "coord1", "value1", "kind", "max_real_eigenvalue"]),
        rows,
        None,
        &[],
    )?;
    Ok(Status::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_row_major() {
        let a = [1.0, 2.0];
        let b = [10.0, 20.0, 30.0];
        let g = grid(&[("x", &a), ("y", &b)]);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], vec![1.0, 10.0]);
        assert_eq!(g[1], vec![1.0, 20.0]);
        assert_eq!(g[5], vec![2.0, 30.0]);
    }

    #[test]
    fn cells_change_the_named_event() {
        let sc = gflstab::scenarios::builtin("fig3").unwrap();
        let d = [0.6];
        let t = [0.1];
        let c = apply_cell(&sc, &[("sag_depth", &d), ("clear_time", &t)], &[0.6, 0.1]).unwrap();
        assert_eq!(c.events[0].kind, EventKind::VoltageSag { depth: 0.6 });
        assert_eq!(c.clear_time(), Some(0.1));
        let j = [10.0];
        assert!(apply_cell(&sc, &[("phase_jump_deg", &j)], &[10.0]).is_err());
    }

    #[test]
    fn decimals_cover_the_resolution() {
        assert_eq!(decimals(0.005), 3);
        assert_eq!(decimals(0.01), 2);
        assert_eq!(decimals(1.0), 0);
    }
}
