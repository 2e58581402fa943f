//! Run configuration: TOML file, command-line overrides and the resolved form
//! recorded in run manifests.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gflstab::reduced::Ordering;
use gflstab::scenarios::{builtin, builtin_scenarios, BandwidthHz, ParamOverrides, Scenario};
use serde::{Deserialize, Serialize};

/// Which model(s) a command integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    #[default]
    Full,
    Reduced,
    Both,
}

/// A scenario given by builtin name or file path, or written inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    Named(String),
    Inline(Box<Scenario>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CctConfig {
    pub t_lo: f64,
    pub t_hi: f64,
    pub resolution: f64,
}

impl Default for CctConfig {
    fn default() -> Self {
        Self {
            t_lo: 0.0,
            t_hi: 1.5,
            resolution: gflstab::sim::CCT_RESOLUTION,
        }
    }
}

/// Phase plane to trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoaKind {
    /// Slow loop of the scenario's bandwidth ordering.
    #[default]
    Slow,
    /// PLL alone with `i_d` frozen at `roa.i_d` (default: the SEP value).
    PllAlone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoaConfig {
    pub kind: RoaKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_d: Option<f64>,
    /// Oracle grid cells per side; 0 skips the grid.
    pub grid: usize,
}

impl Default for RoaConfig {
    fn default() -> Self {
        Self {
            kind: RoaKind::Slow,
            i_d: None,
            grid: 100,
        }
    }
}

/// What each sweep cell reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepOutput {
    #[default]
    Verdict,
    Cct,
}

/// Sweep axes; an absent axis keeps the scenario's value, an empty one is an error.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub output: SweepOutput,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pll_hz: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dvc_hz: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tvc_hz: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sag_depth: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clear_time: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_jump_deg: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_new: Option<Vec<f64>>,
}

impl SweepAxes {
    /// Present axes in row-major order (last axis fastest).
    pub fn axes(&self) -> Vec<(&'static str, &[f64])> {
        [
            ("pll_hz", &self.pll_hz),
            ("dvc_hz", &self.dvc_hz),
            ("tvc_hz", &self.tvc_hz),
            ("sag_depth", &self.sag_depth),
            ("clear_time", &self.clear_time),
            ("phase_jump_deg", &self.phase_jump_deg),
            ("p_new", &self.p_new),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.as_deref().map(|v| (n, v)))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let axes = self.axes();
        if axes.is_empty() {
            bail!("sweep needs at least one axis");
        }
        for (name, values) in axes {
            if values.is_empty() {
                bail!("sweep axis `{name}` is empty");
            }
            if values.iter().any(|v| !v.is_finite()) {
                bail!("sweep axis `{name}` has a non-finite value");
            }
        }
        Ok(())
    }
}

/// Fast-loop bandwidths and windows of the reduction check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    /// Fast-loop bandwidths to compare; the scenario's value and twice it when empty.
    pub fast_hz: Vec<f64>,
    /// Clearing time applied to the scenario, s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clear_time: Option<f64>,
    pub horizon: f64,
    /// Initial window for the boundary-layer check, s.
    pub window: f64,
    /// Boundary layers skipped after each event, in fast time constants.
    pub skip_time_constants: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            fast_hz: Vec::new(),
            clear_time: Some(0.1),
            horizon: 2.0,
            window: 0.05,
            skip_time_constants: 5.0,
        }
    }
}

/// Everything a command needs. Command-line flags override file values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSource>,
    pub model: ModelChoice,
    /// Reduced-model ordering; classified from the bandwidths when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ordering: Option<Ordering>,
    /// Boundary-layer correction for reduced runs.
    pub correction: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Display angles in degrees; CSV files stay in radians.
    pub degrees: bool,
    /// Replaces the scenario's bandwidths.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<BandwidthHz>,
    /// Merged over the scenario's own overrides.
    pub params: ParamOverrides,
    pub cct: CctConfig,
    pub roa: RoaConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
    pub validate: ValidateConfig,
}

/// Tool identity recorded in manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Written next to every run's outputs; `--config manifest.toml` replays it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    pub tool: ToolInfo,
    pub config: RunConfig,
}

impl RunConfig {
    /// Reads a config file or a run manifest (its `config` table).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if value.contains_key("tool") && value.contains_key("config") {
            let m: Manifest = toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
            return Ok(m.config);
        }
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Scenario with the bandwidth and parameter overrides folded in.
    pub fn resolve_scenario(&self) -> Result<Scenario> {
        let src = self
            .scenario
            .as_ref()
            .ok_or_else(|| anyhow!("no scenario given (use --scenario or `scenario` in the config)"))?;
        let mut sc = match src {
            ScenarioSource::Inline(sc) => (**sc).clone(),
            ScenarioSource::Named(name) => load_scenario(name)?,
        };
        if let Some(bw) = self.bandwidth {
            sc.bandwidth = bw;
        }
        merge_overrides(&mut sc.overrides, &self.params);
        sc.validate()?;
        Ok(sc)
    }

    /// Copy with the scenario inlined and overrides folded into it, so the
    /// manifest replays without the original files.
    pub fn resolved(&self, sc: &Scenario) -> Self {
        Self {
            scenario: Some(ScenarioSource::Inline(Box::new(sc.clone()))),
            bandwidth: None,
            params: ParamOverrides::default(),
            ..self.clone()
        }
    }
}

/// A builtin scenario by name, else a TOML file.
pub fn load_scenario(name_or_path: &str) -> Result<Scenario> {
    if let Some(sc) = builtin(name_or_path) {
        return Ok(sc);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        let names: Vec<String> = builtin_scenarios().into_iter().map(|s| s.name).collect();
        bail!(
            "`{name_or_path}` is neither a builtin scenario nor a file (builtins: {})",
            names.join(", ")
        );
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Scenario::from_toml_str(&text).with_context(|| format!("in scenario file {}", path.display()))
}

fn merge_overrides(dst: &mut ParamOverrides, src: &ParamOverrides) {
    macro_rules! merge {
        ($($f:ident),*) => { $( if src.$f.is_some() { dst.$f = src.$f; } )* };
    }
    merge!(u_g, x_g, r_g, p_in, c_dc, v_dc_ref, zeta_pll, zeta_dvc, k_v, v_t_ref, i_q_fixed, i_limit, v_dc_min, v_dc_max);
}
