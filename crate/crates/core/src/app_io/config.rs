use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::profile::{synthesize_profile, SyntheticProfileSpec};
use super::results::read_profile_csv;
use crate::dae_engine::{CurrentProfile, Integrator, ObserverGain};
use crate::error::{Error, Result};
use crate::linalg::RankTolerance;
use crate::observability::{AnalysisOptions, AnalysisPoint, MAX_ORDER};
use crate::observer::{
    CertifyOptions, GainRanges, SocRegion, DEFAULT_BETA, DEFAULT_LIPSCHITZ_SAMPLES,
    DEFAULT_SAFETY_FACTOR,
};
use crate::ocv_cell::{CellParams, OcvModel};
use crate::pack_model::{assemble_system, rest_socs, PackSystem, PackTopology};

/// Margin added around the scenario SOCs when no Lipschitz region is given.
pub const REGION_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pack: PackSection,
    pub scenario: ScenarioSection,
    /// Absent for simulate-only configs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackSection {
    pub ns: usize,
    pub np: usize,
    #[serde(default)]
    pub include_rc: bool,
    #[serde(default = "OcvModel::graphite_nmc")]
    pub ocv: OcvModel,
    /// Module-major: cell `i` of module `j` at position `j * np + i`.
    pub cells: Vec<CellSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSection {
    /// Ohmic resistance (ohm).
    pub r: f64,
    /// Capacity (A s).
    pub q: f64,
    #[serde(default)]
    pub r_rc: f64,
    #[serde(default)]
    pub c_rc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub initial_soc: Vec<f64>,
    /// Observer start; defaults to `initial_soc`.
    #[serde(default)]
    pub estimate_initial_soc: Option<Vec<f64>>,
    pub profile: ProfileSource,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub integrator: Integrator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSource {
    /// `t,I` CSV, relative to the config file.
    Csv(PathBuf),
    Synthetic(SyntheticProfileSpec),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSection {
    /// Gain rows (`n_state x n_outputs`); exclusive with `gain_path`.
    #[serde(default)]
    pub gain: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_path: Option<PathBuf>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub lipschitz_region: Option<SocRegion>,
    #[serde(default = "default_lipschitz_samples")]
    pub lipschitz_samples: usize,
    #[serde(default = "default_safety")]
    pub safety_factor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub ranges: GainRanges,
}

/// Gain file: `{"k": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainFile {
    pub k: Vec<Vec<f64>>,
}

impl GainFile {
    pub fn from_gain(gain: &ObserverGain) -> Self {
        GainFile {
            k: gain
                .k
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }

    pub fn to_gain(&self) -> Result<ObserverGain> {
        let cols = self.k.first().map_or(0, Vec::len);
        if self.k.iter().any(|r| r.len() != cols) {
            return cfg("k", "rows have different lengths");
        }
        let flat: Vec<f64> = self.k.iter().flatten().copied().collect();
        Ok(ObserverGain::new(DMatrix::from_row_slice(
            self.k.len(),
            cols,
            &flat,
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_order")]
    pub gamma_max: usize,
    #[serde(default = "default_order")]
    pub delta_max: usize,
    #[serde(default)]
    pub tolerance: RankTolerance,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub point: PointSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSection {
    #[serde(default)]
    pub soc: SocChoice,
    /// `I, I', I'', ...` at the point.
    #[serde(default = "default_input")]
    pub current_derivatives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SocChoice {
    Named(NamedPoint),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedPoint {
    /// The scenario's initial SOCs.
    Initial,
    /// Per-module rest equilibrium at the scenario's initial charge.
    Rest,
}

impl Default for SocChoice {
    fn default() -> Self {
        SocChoice::Named(NamedPoint::Initial)
    }
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_lipschitz_samples() -> usize {
    DEFAULT_LIPSCHITZ_SAMPLES
}
fn default_safety() -> f64 {
    DEFAULT_SAFETY_FACTOR
}
fn default_budget() -> usize {
    256
}
fn default_order() -> usize {
    4
}
fn default_radius() -> f64 {
    AnalysisOptions::default().radius
}
fn default_samples() -> usize {
    AnalysisOptions::default().samples
}
fn default_input() -> Vec<f64> {
    vec![0.0]
}

impl Default for PointSection {
    fn default() -> Self {
        PointSection {
            soc: SocChoice::default(),
            current_derivatives: default_input(),
        }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            gamma_max: default_order(),
            delta_max: default_order(),
            tolerance: RankTolerance::default(),
            radius: default_radius(),
            samples: default_samples(),
            seed: 0,
            point: PointSection::default(),
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub dt: Option<f64>,
    /// Replaces every seed in the config.
    pub seed: Option<u64>,
    /// Relative rank-tolerance factor.
    pub tolerance: Option<f64>,
}

/// Reads, validates and normalizes a config. Relative paths resolve against
/// the config's directory; the gain file is inlined.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    RunConfig::from_json(&text, base)
}

fn cfg<T>(path: impl Into<String>, message: impl Into<String>) -> Result<T> {
    Err(Error::config(path, message))
}

fn check_socs(path: &str, socs: &[f64], n: usize) -> Result<()> {
    if socs.len() != n {
        return cfg(
            path,
            format!("expected {n} values (ns * np), found {}", socs.len()),
        );
    }
    for (k, z) in socs.iter().enumerate() {
        if !(z.is_finite() && *z > 0.0 && *z < 1.0) {
            return cfg(
                format!("{path}[{k}]"),
                format!("SOC must lie in (0, 1), got {z}"),
            );
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path,
                message: e.into_inner().to_string(),
            }
        })?;
        config.normalize(base_dir)?;
        Ok(config)
    }

    fn normalize(&mut self, base_dir: &Path) -> Result<()> {
        let resolve = |p: &Path| -> PathBuf {
            let joined = if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            };
            std::path::absolute(&joined).unwrap_or(joined)
        };
        if let ProfileSource::Csv(p) = &mut self.scenario.profile {
            *p = resolve(p);
            if !p.is_file() {
                return cfg("scenario.profile.csv", format!("{} not found", p.display()));
            }
        }
        if self.scenario.estimate_initial_soc.is_none() {
            self.scenario.estimate_initial_soc = Some(self.scenario.initial_soc.clone());
        }
        self.validate_scenario()?;
        if let Some(obs) = &mut self.observer {
            match (&obs.gain, obs.gain_path.take()) {
                (Some(_), Some(_)) => {
                    return cfg(
                        "observer.gain_path",
                        "give either `gain` or `gain_path`, not both",
                    )
                }
                (None, Some(p)) => {
                    let p = resolve(&p);
                    let file: GainFile = super::results::read_json(&p).map_err(|e| {
                        Error::config("observer.gain_path", format!("{}: {e}", p.display()))
                    })?;
                    obs.gain = Some(file.k);
                }
                _ => {}
            }
            if obs.lipschitz_region.is_none() {
                let z0 = &self.scenario.initial_soc;
                let zh = self.scenario.estimate_initial_soc.as_ref().unwrap();
                let lower = z0
                    .iter()
                    .zip(zh)
                    .map(|(a, b)| (a.min(*b) - REGION_MARGIN).max(0.01))
                    .collect();
                let upper = z0
                    .iter()
                    .zip(zh)
                    .map(|(a, b)| (a.max(*b) + REGION_MARGIN).min(0.99))
                    .collect();
                obs.lipschitz_region = Some(SocRegion { lower, upper });
            }
        }
        self.validate()
    }

    fn validate_scenario(&self) -> Result<()> {
        let n = self.pack.ns * self.pack.np;
        check_socs("scenario.initial_soc", &self.scenario.initial_soc, n)?;
        if let Some(z) = &self.scenario.estimate_initial_soc {
            check_socs("scenario.estimate_initial_soc", z, n)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pack;
        if p.ns == 0 || p.np == 0 {
            return cfg("pack", "ns and np must be at least 1");
        }
        if p.cells.len() != p.ns * p.np {
            return cfg(
                "pack.cells",
                format!(
                    "ns * np = {} but {} cells are listed",
                    p.ns * p.np,
                    p.cells.len()
                ),
            );
        }
        self.topology_unchecked()
            .validate()
            .map_err(|e| Error::config("pack", e.to_string()))?;
        self.validate_scenario()?;
        let s = &self.scenario;
        if !(s.dt.is_finite() && s.dt > 0.0) {
            return cfg("scenario.dt", format!("must be positive, got {}", s.dt));
        }
        if !(s.horizon.is_finite() && s.horizon >= s.dt) {
            return cfg(
                "scenario.horizon",
                format!("must be at least dt, got {}", s.horizon),
            );
        }
        if let ProfileSource::Synthetic(spec) = &s.profile {
            spec.validate("scenario.profile.synthetic")?;
        }
        if let Some(obs) = &self.observer {
            let rows = p.ns * p.np * if p.include_rc { 3 } else { 2 };
            let cols = 1 + p.ns * (p.np - 1);
            match &obs.gain {
                None => return cfg("observer.gain", "missing (give `gain` or `gain_path`)"),
                Some(k) => {
                    if k.len() != rows || k.iter().any(|r| r.len() != cols) {
                        return cfg(
                            "observer.gain",
                            format!("expected {rows} rows of {cols} entries"),
                        );
                    }
                    if k.iter().flatten().any(|v| !v.is_finite()) {
                        return cfg("observer.gain", "entries must be finite");
                    }
                }
            }
            if !(obs.beta.is_finite() && obs.beta >= 0.0) {
                return cfg("observer.beta", "must be non-negative");
            }
            if obs.lipschitz_samples == 0 {
                return cfg("observer.lipschitz_samples", "must be at least 1");
            }
            if obs.safety_factor.is_nan() || obs.safety_factor < 1.0 {
                return cfg("observer.safety_factor", "must be at least 1");
            }
            if obs.budget == 0 {
                return cfg("observer.budget", "must be at least 1");
            }
            if let Some(region) = &obs.lipschitz_region {
                region
                    .validate(p.ns * p.np)
                    .map_err(|e| Error::config("observer.lipschitz_region", e.to_string()))?;
            }
        }
        let a = &self.analysis;
        if a.gamma_max > MAX_ORDER || a.delta_max > MAX_ORDER {
            return cfg(
                "analysis",
                format!("order bounds must not exceed {MAX_ORDER}"),
            );
        }
        if !(a.radius.is_finite() && a.radius >= 0.0) {
            return cfg("analysis.radius", "must be non-negative");
        }
        if a.point.current_derivatives.is_empty() {
            return cfg("analysis.point.current_derivatives", "needs at least I(t0)");
        }
        if let SocChoice::Explicit(z) = &a.point.soc {
            check_socs("analysis.point.soc", z, p.ns * p.np)?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(dt) = o.dt {
            self.scenario.dt = dt;
        }
        if let Some(seed) = o.seed {
            if let ProfileSource::Synthetic(spec) = &mut self.scenario.profile {
                spec.seed = seed;
            }
            if let Some(obs) = &mut self.observer {
                obs.seed = seed;
            }
            self.analysis.seed = seed;
        }
        if let Some(factor) = o.tolerance {
            self.analysis.tolerance = RankTolerance::Relative { factor };
        }
        self.validate()
    }

    fn topology_unchecked(&self) -> PackTopology {
        let p = &self.pack;
        let cells = p
            .cells
            .iter()
            .map(|c| CellParams {
                r_ohmic: c.r,
                r_rc: c.r_rc,
                c_rc: c.c_rc,
                q_capacity: c.q,
                ocv: p.ocv,
            })
            .collect();
        PackTopology {
            ns: p.ns,
            np: p.np,
            include_rc: p.include_rc,
            cells,
        }
    }

    pub fn topology(&self) -> Result<PackTopology> {
        let t = self.topology_unchecked();
        t.validate()?;
        Ok(t)
    }

    pub fn system(&self) -> Result<PackSystem> {
        assemble_system(&self.topology()?)
    }

    fn differential(&self, socs: &[f64]) -> DVector<f64> {
        let t = self.topology_unchecked();
        let mut s = DVector::zeros(t.n_diff());
        s.rows_mut(0, socs.len()).copy_from_slice(socs);
        s
    }

    /// Initial differential state (RC voltages at zero).
    pub fn initial_state(&self) -> DVector<f64> {
        self.differential(&self.scenario.initial_soc)
    }

    pub fn estimate_initial_state(&self) -> DVector<f64> {
        let z = self
            .scenario
            .estimate_initial_soc
            .as_deref()
            .unwrap_or(&self.scenario.initial_soc);
        self.differential(z)
    }

    pub fn profile(&self) -> Result<CurrentProfile> {
        match &self.scenario.profile {
            ProfileSource::Csv(p) => read_profile_csv(p),
            ProfileSource::Synthetic(spec) => synthesize_profile(spec),
            ProfileSource::Constant(i) => Ok(CurrentProfile::constant(*i)),
        }
    }

    pub fn observer_section(&self) -> Result<&ObserverSection> {
        self.observer
            .as_ref()
            .ok_or_else(|| Error::config("observer", "section is required for this command"))
    }

    pub fn gain(&self) -> Result<ObserverGain> {
        let obs = self.observer_section()?;
        let k = obs
            .gain
            .clone()
            .ok_or_else(|| Error::config("observer.gain", "missing"))?;
        GainFile { k }.to_gain()
    }

    pub fn lipschitz_region(&self) -> Result<SocRegion> {
        self.observer_section()?
            .lipschitz_region
            .clone()
            .ok_or_else(|| Error::config("observer.lipschitz_region", "missing"))
    }

    pub fn certify_options(&self) -> Result<CertifyOptions> {
        let obs = self.observer_section()?;
        Ok(CertifyOptions {
            beta: obs.beta,
            samples: obs.lipschitz_samples,
            safety_factor: obs.safety_factor,
        })
    }

    pub fn analysis_options(&self) -> AnalysisOptions {
        AnalysisOptions {
            tolerance: self.analysis.tolerance,
            radius: self.analysis.radius,
            samples: self.analysis.samples,
            seed: self.analysis.seed,
        }
    }

    pub fn analysis_point(&self) -> Result<AnalysisPoint> {
        let z = match &self.analysis.point.soc {
            SocChoice::Named(NamedPoint::Initial) => self.scenario.initial_soc.clone(),
            SocChoice::Named(NamedPoint::Rest) => {
                rest_socs(&self.topology()?, &self.scenario.initial_soc)?
            }
            SocChoice::Explicit(z) => z.clone(),
        };
        Ok(AnalysisPoint::new(
            self.differential(&z),
            self.analysis.point.current_derivatives.clone(),
        ))
    }

    /// The normalized config as pretty JSON; loading it gives back `self`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
