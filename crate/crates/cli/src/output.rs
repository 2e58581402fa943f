//! CSV emission and read-back, and the machine-readable axes descriptor.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gflstab::model::FullState;
use gflstab::roa::RoaBoundary;
use gflstab::Trajectory;
use serde::Serialize;

/// Collects the files a command writes and their column descriptions.
pub struct OutputDir {
    pub dir: PathBuf,
    files: Vec<FileAxes>,
    written: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Column {
    pub name: String,
    pub unit: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileAxes {
    pub file: String,
    pub columns: Vec<Column>,
    /// Suggested plot axes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub y: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Unit of a column, by name.
pub fn unit_of(column: &str) -> &'static str {
    match column {
        "t" | "t_clear" | "cct" | "first_unstable" | "clear_time" => "s",
        "delta" | "x_int_pll" => "rad",
        "pll_hz" | "dvc_hz" | "tvc_hz" | "fast_hz" => "Hz",
        "phase_jump_deg" => "deg",
        "i_d" | "i_q" | "dv2" | "p" | "v_td" | "v_tq" | "sag_depth" | "p_new" => "pu",
        _ => "",
    }
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            written: Vec::new(),
        })
    }

    fn register(&mut self, file: &str, columns: &[String], x: Option<&str>, y: &[&str], note: Option<String>) {
        self.written.push(file.into());
        self.files.push(FileAxes {
            file: file.into(),
            columns: columns
                .iter()
                .map(|c| Column {
                    name: c.clone(),
                    unit: unit_of(c),
                })
                .collect(),
            x: x.map(Into::into),
            y: y.iter().map(|s| s.to_string()).collect(),
            note,
        });
    }

    /// Writes a table through the csv writer.
    pub fn table(
        &mut self,
        file: &str,
        header: &[String],
        rows: impl IntoIterator<Item = Vec<String>>,
        x: Option<&str>,
        y: &[&str],
    ) -> Result<()> {
        let path = self.dir.join(file);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        self.register(file, header, x, y, None);
        Ok(())
    }

    pub fn trajectory(&mut self, file: &str, traj: &Trajectory) -> Result<()> {
        let path = self.dir.join(file);
        let f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        let mut w = BufWriter::new(f);
        traj.write_csv(&mut w)?;
        w.flush()?;
        let header: Vec<String> = TRAJECTORY_HEADER.iter().map(|s| s.to_string()).collect();
        self.register(
            file,
            &header,
            Some("t"),
            &["delta", "i_d", "dv2"],
            Some(format!("model {}", traj.model)),
        );
        Ok(())
    }

    pub fn note(&mut self, file: &str, note: String) {
        if let Some(f) = self.files.iter_mut().find(|f| f.file == file) {
            f.note = Some(note);
        }
    }

    pub fn text(&mut self, file: &str, body: &str) -> Result<()> {
        let path = self.dir.join(file);
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(file.into());
        Ok(())
    }

    /// Every file written so far, in order.
    pub fn file_names(&self) -> Vec<String> {
        self.written.clone()
    }

    /// Writes `axes.json` describing every CSV written so far.
    pub fn finish(&mut self) -> Result<()> {
        let body = serde_json::to_string_pretty(&serde_json::json!({
            "angle_unit": "rad",
            "files": self.files,
        }))?;
        self.text("axes.json", &(body + "\n"))
    }
}

pub const TRAJECTORY_HEADER: [&str; 10] = ["t", "delta", "x_int_pll", "i_d", "dv2", "i_q", "p", "v_td", "v_tq", "events"];

/// A trajectory CSV read back.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub t: Vec<f64>,
    pub states: Vec<FullState<f64>>,
    /// `p, v_td, v_tq` per sample.
    pub terminal: Vec<[f64; 3]>,
    pub events: Vec<Vec<String>>,
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryTable> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    if r.headers()?.iter().ne(TRAJECTORY_HEADER) {
        bail!("{}: not a trajectory file (header {:?})", path.display(), r.headers()?);
    }
    let mut out = TrajectoryTable {
        t: Vec::new(),
        states: Vec::new(),
        terminal: Vec::new(),
        events: Vec::new(),
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: Vec<f64> = (0..9)
            .map(|k| rec[k].parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}: row {}", path.display(), line + 2))?;
        out.t.push(v[0]);
        out.states.push(FullState::new(v[1], v[2], v[3], v[4], v[5]));
        out.terminal.push([v[6], v[7], v[8]]);
        out.events
            .push(rec[9].split(';').filter(|s| !s.is_empty()).map(String::from).collect());
    }
    Ok(out)
}

/// Boundary CSV rows: `(curve, branch, s0, s1)` with curve `inner` (clipped
/// to the box) or `extended`.
pub fn boundary_rows(b: &RoaBoundary) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (curve, set) in [("inner", &b.branches), ("extended", &b.extended)] {
        for (k, branch) in set.iter().enumerate() {
            for p in branch {
                rows.push(vec![curve.into(), k.to_string(), p[0].to_string(), p[1].to_string()]);
            }
        }
    }
    rows
}

/// Boundary CSV read back: `[inner, extended]`, each with two branches.
pub type BoundaryCurves = [[Vec<[f64; 2]>; 2]; 2];

pub fn read_boundary(path: &Path) -> Result<BoundaryCurves> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out: BoundaryCurves = Default::default();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let ctx = || format!("{}: row {}", path.display(), line + 2);
        let curve = match &rec[0] {
            "inner" => 0,
            "extended" => 1,
            other => bail!("{}: unknown curve `{other}`", ctx()),
        };
        let branch: usize = rec[1].parse().with_context(ctx)?;
        if branch > 1 {
            bail!("{}: branch {branch} out of range", ctx());
        }
        let p = [rec[2].parse().with_context(ctx)?, rec[3].parse().with_context(ctx)?];
        out[curve][branch].push(p);
    }
    Ok(out)
}

/// Angle for display.
pub fn angle(v: f64, degrees: bool) -> String {
    if degrees {
        format!("{:.3} deg", v.to_degrees())
    } else {
        format!("{v:.6} rad")
    }
}

/// A slow coordinate for display, converting angles when asked.
pub fn coord(label: &str, v: f64, degrees: bool) -> String {
    if label == "delta" {
        format!("{label} = {}", angle(v, degrees))
    } else {
        format!("{label} = {v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gflstab::params::{BandwidthSpec, SystemParams};
    use gflstab::reduced::Ordering;
    use gflstab::roa::{trace_stable_manifold, RoaOptions, RoaSystem};
    use gflstab::scenarios::builtin;
    use gflstab::sim::{simulate_scenario, SimOptions};

    #[test]
    fn trajectory_csv_reads_back_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let sc = builtin("fig3").unwrap();
        let base = SystemParams::reference(&BandwidthSpec::from_hz(15.0, 2.0, None)).unwrap();
        let r = simulate_scenario(&sc, &base, &SimOptions::default()).unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.trajectory("t.csv", &r.trajectory).unwrap();
        let back = read_trajectory(&dir.path().join("t.csv")).unwrap();
        assert_eq!(back.t, r.trajectory.t);
        assert_eq!(back.states, r.trajectory.states);
        for (k, m) in r.trajectory.terminal.iter().enumerate() {
            assert_eq!(back.terminal[k], [m.p, m.v_td, m.v_tq]);
        }
        let labelled: Vec<_> = back.events.iter().filter(|e| !e.is_empty()).collect();
        assert_eq!(labelled.len(), r.trajectory.events.len());
    }

    #[test]
    fn boundary_csv_reads_back_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = SystemParams::reference(&BandwidthSpec::from_hz(15.0, 2.0, None)).unwrap();
        let b = trace_stable_manifold(
            RoaSystem::Reduced {
                ordering: Ordering::PllFastDvcSlow,
            },
            &p,
            &RoaOptions::default(),
        )
        .unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        let header: Vec<String> = ["curve", "branch", "i_d", "dv2"].iter().map(|s| s.to_string()).collect();
        out.table("b.csv", &header, boundary_rows(&b), Some("i_d"), &["dv2"]).unwrap();
        let back = read_boundary(&dir.path().join("b.csv")).unwrap();
        assert_eq!(back[0], b.branches);
        assert_eq!(back[1], b.extended);
    }

    #[test]
    fn units_by_column() {
        assert_eq!(unit_of("delta"), "rad");
        assert_eq!(unit_of("t_clear"), "s");
        assert_eq!(unit_of("outcome"), "");
    }
}
