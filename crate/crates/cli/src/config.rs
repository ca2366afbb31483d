//! JSON run configuration. Lengths are in wavelengths; the wavelength itself is 1.

use std::path::{Path, PathBuf};

use ddpol_core::bench::{Axis, Method, PilotConfig, Scenario, SweepConfig};
use ddpol_core::channel::PilotKind;
use ddpol_core::cpd::CpdOptions;
use ddpol_core::ctd::DodOptions;
use ddpol_core::manifolds::ArrayGeometry;
use serde::Deserialize;

use crate::CliError;

fn half() -> f64 {
    0.5
}

fn default_trials() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    pub mx: usize,
    pub my: usize,
    pub mr: usize,
    #[serde(default = "half")]
    pub dx: f64,
    #[serde(default = "half")]
    pub dy: f64,
    #[serde(default = "half")]
    pub dr: f64,
}

impl GeometryBlock {
    pub fn to_geometry(self) -> Result<ArrayGeometry, CliError> {
        ArrayGeometry::new(self.mx, self.my, self.mr, self.dx, self.dy, self.dr, 1.0)
            .map_err(|e| CliError::config("geometry", e))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub summary: Option<PathBuf>,
    #[serde(default)]
    pub trials: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryBlock,
    pub scenario: Scenario,
    /// Required by `sweep` only.
    #[serde(default)]
    pub axis: Option<Axis>,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub pilot: Option<PilotConfig>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Master seed used when `--seed` is absent; `sweep` always takes `--seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub als: CpdOptions,
    #[serde(default)]
    pub dod: DodOptions,
    #[serde(default)]
    pub output: OutputBlock,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            CliError::Config { field, message: e.into_inner().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config { field: "--config".into(), message: format!("{}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    pub fn pilot_or(&self, kind: PilotKind) -> PilotConfig {
        self.pilot.unwrap_or(PilotConfig { kind, n: None })
    }

    /// Validated sweep configuration plus advisory warnings.
    pub fn to_sweep(&self) -> Result<(SweepConfig, Vec<String>), CliError> {
        let geometry = self.geometry.to_geometry()?;
        let axis = self
            .axis
            .clone()
            .ok_or_else(|| CliError::Config { field: "axis".into(), message: "a sweep axis is required".into() })?;
        let pilot = self
            .pilot
            .ok_or_else(|| CliError::Config { field: "pilot".into(), message: "a pilot block is required".into() })?;
        let cfg = SweepConfig {
            geometry,
            scenario: self.scenario,
            axis,
            methods: self.methods.clone(),
            pilot,
            trials: self.trials,
            als: self.als,
            dod: self.dod,
        };
        let warnings = cfg.validate().map_err(|e| CliError::from_core("", e))?;
        Ok((cfg, warnings))
    }
}
