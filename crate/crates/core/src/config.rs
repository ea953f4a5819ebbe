//! TOML run configuration of the command-line front end.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::IntegrateOptions;
use crate::error::{Error, Result};
use crate::filter::FilterModel;
use crate::optimize::{NelderMeadOptions, SwapParam};
use crate::qubit::FieldMap;
use crate::sequence::{NoiseModel, RunMode, SequenceConfig, TwoIonProcess, World};
use crate::thermometry::{FitOptions, Transition};
use crate::trap::{calibrate, SecularTargets, TrapGeometry, TrapLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrapConfig {
    pub layout: TrapLayout,
    pub targets: SecularTargets,
    /// Trap voltage of the LIZ well used for calibration (V).
    pub u_c: f64,
    /// Previously calibrated geometry; calibrated on the fly when absent.
    pub geometry: Option<PathBuf>,
}

impl Default for TrapConfig {
    fn default() -> Self {
        Self {
            layout: TrapLayout::default(),
            targets: SecularTargets::default(),
            u_c: -6.0,
            geometry: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SwapStudy {
    /// Programmed durations to sweep (µs); empty runs `sequence.swap.duration` only.
    pub sweep: Vec<f64>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub free: Vec<SwapParam>,
    pub nelder_mead: NelderMeadOptions,
    /// Objective added for candidates that do not exchange the ions.
    pub no_swap_penalty: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            free: vec![SwapParam::UdPeak],
            nelder_mead: NelderMeadOptions {
                max_evaluations: 60,
                restarts: 0,
                ..Default::default()
            },
            no_swap_penalty: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TomographyConfig {
    pub process: TwoIonProcess,
    pub shots: usize,
    pub mode: RunMode,
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self {
            process: TwoIonProcess::Swap,
            shots: 1000,
            mode: RunMode::Logical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReorderConfig {
    pub shots: usize,
    pub mode: RunMode,
    /// Target body duration (ms) reported next to the simulated one.
    pub budget_ms: f64,
}

impl Default for ReorderConfig {
    fn default() -> Self {
        Self {
            shots: 2500,
            mode: RunMode::Logical,
            budget_ms: 5.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldMapConfig {
    /// Injected field; `x_liz` is replaced by the LIZ center.
    pub injected: FieldMap,
    pub segments: Vec<usize>,
    /// Echo hold times (µs), increasing.
    pub holds: Vec<f64>,
    pub shots: usize,
}

impl Default for FieldMapConfig {
    fn default() -> Self {
        Self {
            injected: FieldMap::default(),
            segments: vec![21, 22, 23, 24, 25],
            holds: (1..=10).map(|k| 10.0 * k as f64).collect(),
            shots: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub path: PathBuf,
    pub transition: Transition,
    #[serde(default)]
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RabiFitConfig {
    pub data: Vec<DataFile>,
    pub fit: FitOptions,
}

/// Everything a command needs. Every table is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub trap: TrapConfig,
    pub filter: FilterModel,
    pub swap_study: SwapStudy,
    pub optimize: OptimizeConfig,
    pub sequence: SequenceConfig,
    pub noise: NoiseModel,
    pub integrate: IntegrateOptions,
    pub tomography: TomographyConfig,
    pub reorder: ReorderConfig,
    pub field_map: FieldMapConfig,
    pub rabi_fit: RabiFitConfig,
}

impl RunConfig {
    /// Parses a TOML file. Relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(g) = cfg.trap.geometry.as_mut() {
            resolve(g);
        }
        for d in &mut cfg.rabi_fit.data {
            resolve(&mut d.path);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks parameter invariants and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.sequence.validate()?;
        self.noise.validate()?;
        if !(self.integrate.dt > 0.0) {
            return Err(Error::Config("integrate.dt must be positive".into()));
        }
        let mut files: Vec<&PathBuf> = self.rabi_fit.data.iter().map(|d| &d.path).collect();
        files.extend(self.trap.geometry.iter());
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("{} does not exist", f.display())));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Loads the stored geometry or calibrates a fresh one.
    pub fn geometry(&self) -> Result<TrapGeometry> {
        match &self.trap.geometry {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                let value: serde_json::Value = serde_json::from_str(&text)?;
                // Accept both bare geometries and command output envelopes.
                let inner = value.get("result").and_then(|r| r.get("geometry")).cloned().unwrap_or(value);
                let g: TrapGeometry = serde_json::from_value(inner)?;
                g.validate()?;
                Ok(g)
            }
            None => calibrate(&self.trap.layout, &self.trap.targets, self.trap.u_c),
        }
    }

    pub fn world(&self, geometry: TrapGeometry) -> World {
        let mut w = World::new(geometry);
        w.noise = self.noise;
        w.config = self.sequence.clone();
        w.filter = self.filter;
        w.integrate = self.integrate;
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[sequence.swap]\nbogus = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml("[tomography]\nshots = 10\n").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn missing_data_file_is_a_config_error() {
        let c = RunConfig::from_toml("[[rabi_fit.data]]\npath = \"/nonexistent.csv\"\ntransition = \"bsb\"\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
