//! Run configuration as TOML with one table per concern. Every section and
//! key is optional and falls back to the defaults below; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowSolveSettings;
use crate::geometry::LatticeLayout;
use crate::materials::{
    read_property_csv, ContinuationSchedule, DiameterRange, ProjectionParams, PropertyTable,
    SyntheticBcc,
};
use crate::metrics::MetricsSettings;
use crate::mma::MmaSettings;
use crate::model::{DomainSettings, PhysicalParams};
use crate::optimizer::OptimizerSettings;
use crate::sensitivity::{ObjectiveSettings, Pipeline};

/// Lattice geometry and property source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeSettings {
    /// Smallest strut diameter, m.
    pub d_min: f64,
    /// Largest strut diameter, m.
    pub d_max: f64,
    /// Stacked cell layers through the fluid layer thickness.
    pub n_layers_z: usize,
    /// Projected indicator below which a cell is built as lattice.
    pub threshold: f64,
    /// Property table CSV; the synthetic BCC model is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub property_table: Option<PathBuf>,
    /// Samples of the synthetic table.
    pub synthetic_samples: usize,
    /// Facets around each strut in STL exports.
    pub stl_sides: usize,
}

impl Default for LatticeSettings {
    fn default() -> Self {
        Self {
            d_min: 0.3e-3,
            d_max: 1.3e-3,
            n_layers_z: 2,
            threshold: 0.5,
            property_table: None,
            synthetic_samples: 21,
            stl_sides: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundarySettings {
    /// Inlet gauge pressure, Pa (outlet at 0 Pa).
    pub p_in: f64,
}

impl Default for BoundarySettings {
    fn default() -> Self {
        Self { p_in: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    /// Seed of the random sample generator.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Random-design validation harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSettings {
    pub n: usize,
    /// Range of the per-sample void probability.
    pub void_min: f64,
    pub void_max: f64,
    /// Fixed void probability overriding the range.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub void_probability: Option<f64>,
    /// CSV of externally computed metrics for correlation, one row per sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external_results: Option<PathBuf>,
}

impl Default for SamplingSettings {
    fn default() -> Self {
        Self {
            n: 30,
            void_min: 0.2,
            void_max: 0.8,
            void_probability: None,
            external_results: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationConfig {
    pub physics: PhysicalParams,
    pub domain: DomainSettings,
    pub lattice: LatticeSettings,
    pub boundary: BoundarySettings,
    pub continuation: ContinuationSchedule,
    pub projection: ProjectionParams,
    pub objective: ObjectiveSettings,
    pub optimizer: OptimizerSettings,
    pub mma: MmaSettings,
    pub flow: FlowSolveSettings,
    pub metrics: MetricsSettings,
    pub run: RunSettings,
    pub sampling: SamplingSettings,
}

impl OptimizationConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = toml::from_str(&s).map_err(|e| Error::parse(path, e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        self.continuation.validate()?;
        self.projection.validate()?;
        self.objective.validate()?;
        self.mma.validate()?;
        self.flow.validate()?;
        if !(self.boundary.p_in > 0.0 && self.boundary.p_in.is_finite()) {
            return Err(Error::Config("boundary.p_in must be positive".into()));
        }
        DiameterRange::new(self.lattice.d_min, self.lattice.d_max)?;
        if self.lattice.n_layers_z == 0
            || self.lattice.stl_sides < 3
            || self.lattice.synthetic_samples < 2
        {
            return Err(Error::Config(
                "lattice: n_layers_z >= 1, stl_sides >= 3, synthetic_samples >= 2".into(),
            ));
        }
        if !(self.lattice.threshold > 0.0 && self.lattice.threshold < 1.0) {
            return Err(Error::Config("lattice.threshold must lie in (0, 1)".into()));
        }
        let s = &self.sampling;
        if !(0.0 <= s.void_min && s.void_min <= s.void_max && s.void_max <= 1.0) {
            return Err(Error::Config(
                "sampling needs 0 <= void_min <= void_max <= 1".into(),
            ));
        }
        if let Some(p) = s.void_probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(
                    "sampling.void_probability must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn diameters(&self) -> Result<DiameterRange<f64>> {
        DiameterRange::new(self.lattice.d_min, self.lattice.d_max)
    }

    pub fn lattice_layout(&self) -> Result<LatticeLayout> {
        Ok(LatticeLayout {
            range: self.diameters()?,
            n_layers_z: self.lattice.n_layers_z,
            threshold: self.lattice.threshold,
            projection: self.projection,
        })
    }

    /// Property table from the configured CSV or the synthetic model.
    pub fn property_table(&self) -> Result<PropertyTable<f64>> {
        let range = self.diameters()?;
        match &self.lattice.property_table {
            Some(path) => PropertyTable::new(read_property_csv(path)?, range),
            None => {
                let p = &self.physics;
                let syn = SyntheticBcc {
                    mu_f: p.mu_f,
                    rho_f: p.rho_f,
                    k_f: p.k_f,
                    k_s: p.k_s,
                };
                syn.table(self.domain.cell_size, range, self.lattice.synthetic_samples)
            }
        }
    }

    /// Problem at inlet pressure `p_in`.
    pub fn pipeline(&self, p_in: f64) -> Result<Pipeline> {
        Pipeline::new(
            &self.physics,
            &self.domain,
            p_in,
            self.property_table()?,
            self.projection,
            self.objective,
            self.flow,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = OptimizationConfig::from_toml_str("").unwrap();
        assert_eq!(c.physics.mu_f, 1.004e-3);
        assert_eq!(c.physics.q_s, 1e5);
        assert_eq!(2.0 * c.physics.h_t, 5e-3);
        assert_eq!(2.0 * c.physics.h_b, 1e-3);
        assert_eq!(c.continuation.q_k_stages, vec![1.0, 5.0, 10.0, 50.0]);
        assert_eq!(c.objective.p_norm, 10.0);
        assert_eq!(c.optimizer.iterations, 200);
    }

    #[test]
    fn round_trip_is_identity() {
        let src = r#"
[physics]
q_s = 5e4
[domain]
cell_size = 1.25e-3
side_walls = "slip"
[lattice]
d_max = 0.6e-3
property_table = "props.csv"
[boundary]
p_in = 1.0
[continuation]
q_k_stages = [1.0, 3.0]
q_f_stages = [20.0, 1.0]
stage_length = 7
[sampling]
void_probability = 0.0
[run]
seed = 99
"#;
        let a = OptimizationConfig::from_toml_str(src).unwrap();
        let text = a.to_toml_string().unwrap();
        let b = OptimizationConfig::from_toml_str(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            b.lattice.property_table.as_deref(),
            Some(Path::new("props.csv"))
        );
        assert_eq!(b.domain.mesh_refinement, 4);
        let d = OptimizationConfig::default();
        assert_eq!(
            OptimizationConfig::from_toml_str(&d.to_toml_string().unwrap()).unwrap(),
            d
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(OptimizationConfig::from_toml_str("[physics]\nmu = 1.0\n").is_err());
        assert!(OptimizationConfig::from_toml_str("[nonsense]\n").is_err());
        assert!(OptimizationConfig::from_toml_str("[boundary]\np_in = -1.0\n").is_err());
        assert!(OptimizationConfig::from_toml_str("[lattice]\nd_min = 2e-3\n").is_err());
    }
}
