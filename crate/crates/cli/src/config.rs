use std::path::Path;

use serde::{Deserialize, Serialize};

use bess_core::dual::{Basis, MartingaleFamily, PathwiseSettings, SearchBudget};
use bess_core::hjb::ControlMesh;
use bess_core::market::DiffusionPreset;
use bess_core::model::{ModelParams, RegimeCriterion, TimeGrid};
use bess_core::regime::ExperimentConfig;
use bess_core::smoothing::SmoothingMode;

use crate::error::CliError;

/// Everything a run depends on. A manifest written by a run is itself a
/// valid config and reproduces that run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for every stochastic step (paths, pilot grids, candidates).
    pub seed: Option<u64>,
    /// Initial charge per battery; `C / 2` when absent.
    pub y0: Option<Vec<f64>>,
    pub model: ModelSection,
    pub time: TimeSection,
    pub market: DiffusionPreset,
    pub simulation: SimulationSection,
    pub solver: SolverSection,
    pub dual: DualSection,
    pub policy: PolicySection,
    /// Its own `seed` field is replaced by the master seed.
    pub regime: ExperimentConfig,
    /// Provenance, filled in when the manifest is written.
    pub manifest: Option<ManifestInfo>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            y0: None,
            model: ModelSection::default(),
            time: TimeSection::default(),
            market: DiffusionPreset::LogGbm {
                x0: vec![0.0, 0.0],
                log_drift: vec![0.0, 0.05],
                vol: vec![0.2, 0.3],
            },
            simulation: SimulationSection::default(),
            solver: SolverSection::default(),
            dual: DualSection::default(),
            policy: PolicySection::default(),
            regime: ExperimentConfig::default(),
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub capacity: f64,
    pub max_rate: f64,
    pub batteries: usize,
    pub gamma: f64,
    /// Adds the U-shaped penalty on charge and rate to the running reward.
    pub phi_hat: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            capacity: 1.0,
            max_rate: 1.0,
            batteries: 1,
            gamma: 0.0,
            phi_hat: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSection {
    pub t0: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self {
            t0: 0.0,
            horizon: 1.0,
            steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n_paths: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { n_paths: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// Smoothing width, in units of charge.
    pub eps: f64,
    /// When non-empty, `solve` also runs the refinement study over these widths.
    pub eps_schedule: Vec<f64>,
    pub smoothing: SmoothingMode,
    pub mesh: ControlMesh,
    pub charge_nodes: usize,
    /// Nodes per running-average axis; defaults to `charge_nodes` when `gamma != 0`.
    pub average_nodes: Option<usize>,
    pub factor_nodes: usize,
    pub min_half_width: f64,
    pub pilot_paths: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            eps: 0.1,
            eps_schedule: vec![],
            smoothing: SmoothingMode::Ramp,
            mesh: ControlMesh::default(),
            charge_nodes: 21,
            average_nodes: None,
            factor_nodes: 15,
            min_half_width: 0.5,
            pilot_paths: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualSection {
    pub k: usize,
    pub pieces: usize,
    pub basis: Vec<Basis>,
    pub components: Vec<usize>,
    /// Fixed coefficients; zeros when empty and no search is configured.
    pub theta: Vec<f64>,
    pub search: Option<SearchBudget>,
    pub max_iter: usize,
    pub tol: f64,
    pub projection_sweeps: usize,
}

impl Default for DualSection {
    fn default() -> Self {
        let s = PathwiseSettings::default();
        Self {
            k: 1,
            pieces: 1,
            basis: vec![Basis::Constant],
            components: vec![1],
            theta: vec![],
            search: None,
            max_iter: s.max_iter,
            tol: s.tol,
            projection_sweeps: s.projection_sweeps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Zero,
    #[default]
    Threshold,
    Hjb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub kind: PolicyKind,
    /// Threshold prices; 0.9 and 1.1 times the initial price when absent.
    pub charge_below: Option<f64>,
    pub discharge_above: Option<f64>,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Threshold,
            charge_below: None,
            discharge_above: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInfo {
    pub command: String,
    pub bess_core: String,
    pub bess_cli: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn params(&self) -> Result<ModelParams, CliError> {
        let m = &self.model;
        ModelParams::new(m.capacity, m.max_rate, m.batteries, m.gamma).map_err(CliError::from_setup)
    }

    pub fn time_grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.time.t0, self.time.horizon, self.time.steps).map_err(CliError::from_setup)
    }

    pub fn criterion(&self) -> Result<RegimeCriterion, CliError> {
        Ok(RegimeCriterion::from_params(&self.params()?, self.model.phi_hat))
    }

    pub fn initial_charge(&self) -> Result<Vec<f64>, CliError> {
        let params = self.params()?;
        let y0 = self
            .y0
            .clone()
            .unwrap_or_else(|| vec![0.5 * params.capacity; params.batteries]);
        if y0.len() != params.batteries {
            return Err(CliError::Config(format!(
                "y0 has {} entries for {} batteries",
                y0.len(),
                params.batteries
            )));
        }
        if y0.iter().any(|y| !(0.0..=params.capacity).contains(y)) {
            return Err(CliError::Config(format!("y0 = {y0:?} outside [0, capacity]")));
        }
        Ok(y0)
    }

    pub fn require_seed(&self, command: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config(format!("`{command}` is stochastic: set `seed` in the config or pass --seed")))
    }

    pub fn family(&self) -> MartingaleFamily {
        MartingaleFamily {
            k: self.dual.k,
            pieces: self.dual.pieces,
            basis: self.dual.basis.clone(),
            components: self.dual.components.clone(),
            batteries: self.model.batteries,
        }
    }

    pub fn pathwise(&self) -> PathwiseSettings {
        PathwiseSettings {
            max_iter: self.dual.max_iter,
            tol: self.dual.tol,
            projection_sweeps: self.dual.projection_sweeps,
        }
    }

    pub fn average_nodes(&self) -> Option<usize> {
        (self.model.gamma != 0.0).then(|| self.solver.average_nodes.unwrap_or(self.solver.charge_nodes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\ncapacty = 2.0\n").is_err());
        assert!(toml::from_str::<RunConfig>("[market]\npreset = \"heston\"\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            y0 = [0.25]
            [model]
            capacity = 2.0
            [market]
            preset = "constant"
            x0 = [0.0, 0.5]
            drift = [0.0, 0.0]
            diffusion = [[0.0, 0.0], [0.0, 0.0]]
            [solver]
            eps_schedule = [0.2, 0.1, 0.05]
            mesh = { explicit = [-1.0, 0.0, 1.0] }
            [dual]
            basis = ["constant", "log-price"]
            search = { coordinate = { step = 0.5, min_step = 0.1, max_evals = 20 } }
            [policy]
            kind = "hjb"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.model.capacity, 2.0);
        assert_eq!(cfg.solver.mesh, ControlMesh::Explicit(vec![-1.0, 0.0, 1.0]));
        assert_eq!(cfg.policy.kind, PolicyKind::Hjb);
        assert_eq!(cfg.initial_charge().unwrap(), vec![0.25]);
        assert_eq!(cfg.family().dim(), 2);
    }

    #[test]
    fn bad_initial_charge() {
        let cfg = RunConfig {
            y0: Some(vec![1.5]),
            ..Default::default()
        };
        assert!(matches!(cfg.initial_charge(), Err(CliError::Config(_))));
    }
}
