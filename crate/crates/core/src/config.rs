//! Declarative run configuration: one TOML file describes the grid,
//! acquisition, dataset, flow, optimizers, and study parameters of an
//! experiment. Unknown keys are rejected so silent typos cannot change
//! a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowArchitecture, OptimizerConfig};
use crate::grid::{AcquisitionGeometry, GridSpec};
use crate::inversion::FwiConfig;
use crate::phantom::TissueTable;
use crate::wavesim::{make_tone_burst, SourceWavelet};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dt: f64,
    pub nt: usize,
    pub sponge_width: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            dx: 0.5e-3,
            dt: 1.1e-7,
            nt: 800,
            sponge_width: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub n_receivers: usize,
    pub n_sources: usize,
    /// Ring radius in grid cells around the center.
    pub ring_radius: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            n_receivers: 64,
            n_sources: 16,
            ring_radius: 23.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveletSection {
    pub center_frequency: f64,
    pub n_cycles: usize,
    pub amplitude: f64,
}

impl Default for WaveletSection {
    fn default() -> Self {
        Self {
            center_frequency: 4.0e5,
            n_cycles: 3,
            amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueSection {
    /// (name, velocity m/s, density kg/m3) per soft-tissue class.
    pub classes: Vec<(String, f64, f64)>,
    pub water_velocity: f64,
    pub water_density: f64,
    pub bone_velocity: f64,
    pub bone_density: f64,
}

impl Default for TissueSection {
    fn default() -> Self {
        let t = TissueTable::brain_default();
        Self {
            classes: t.classes,
            water_velocity: t.water.0,
            water_density: t.water.1,
            bone_velocity: t.bone.0,
            bone_density: t.bone.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_pairs: usize,
    /// Colored-noise RMS relative to each record's RMS.
    pub noise_level: f64,
    /// Candidate per-pair source counts, cycled over pairs.
    pub source_counts: Vec<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            noise_level: 0.01,
            source_counts: vec![8, 16],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub n_scales: usize,
    pub n_blocks_per_scale: usize,
    pub hidden_channels: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            n_scales: 3,
            n_blocks_per_scale: 4,
            hidden_channels: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            batch_size: o.batch_size,
            epochs: 30,
            grad_clip: o.grad_clip,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FwiSection {
    pub max_iterations: usize,
    pub max_wall_seconds: f64,
    pub box_lo: f64,
    pub box_hi: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub batch_size_sources: usize,
    pub max_shrinks: usize,
    pub max_gradient_calls_per_source: usize,
}

impl Default for FwiSection {
    fn default() -> Self {
        let f = FwiConfig::default();
        Self {
            max_iterations: f.max_iterations,
            max_wall_seconds: f.max_wall_seconds,
            box_lo: f.box_bounds.0,
            box_hi: f.box_bounds.1,
            shrink: f.shrink,
            sufficient_decrease: f.sufficient_decrease,
            batch_size_sources: f.batch_size_sources,
            max_shrinks: f.max_shrinks,
            max_gradient_calls_per_source: f.max_gradient_calls_per_source,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UqSection {
    pub n_post: usize,
    pub calibration_bins: usize,
    /// Source-subset sizes for the contraction study, ascending.
    pub source_subsets: Vec<usize>,
    /// Posterior sample counts for the sample-count sweep, ascending.
    pub sweep_counts: Vec<usize>,
    /// Test phantoms generated for the study subcommands.
    pub test_phantoms: usize,
}

impl Default for UqSection {
    fn default() -> Self {
        Self {
            n_post: 128,
            calibration_bins: 10,
            source_subsets: vec![4, 8, 16],
            sweep_counts: vec![1, 4, 16, 64, 128],
            test_phantoms: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub master_seed: u64,
    pub workers: usize,
    /// Additive interior velocity shift (m/s) applied to starting
    /// models, for sensitivity studies.
    pub interior_shift: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            master_seed: 1234,
            workers: 1,
            interior_shift: 0.0,
        }
    }
}

/// Complete experiment description.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSection,
    pub geometry: GeometrySection,
    pub wavelet: WaveletSection,
    pub tissue: TissueSection,
    pub dataset: DatasetSection,
    pub flow: FlowSection,
    pub optimizer: OptimizerSection,
    pub fwi: FwiSection,
    pub uq: UqSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec().validate()?;
        self.tissue_table().validate()?;
        let g = &self.geometry;
        if g.n_sources == 0 || g.n_receivers == 0 {
            return Err(Error::Config("geometry needs sources and receivers".into()));
        }
        if g.ring_radius <= 0.0
            || g.ring_radius >= (self.grid.nx.min(self.grid.ny) as f64 - 1.0) / 2.0
        {
            return Err(Error::Config(format!(
                "ring radius {} does not fit a {}x{} grid",
                g.ring_radius, self.grid.nx, self.grid.ny
            )));
        }
        self.flow_architecture().validate()?;
        self.optimizer_config().validate()?;
        self.fwi_config().validate()?;
        if self.dataset.source_counts.is_empty()
            || self.dataset.source_counts.iter().any(|&c| c == 0 || c > g.n_sources)
        {
            return Err(Error::Config(format!(
                "dataset source counts {:?} must be in 1..={}",
                self.dataset.source_counts, g.n_sources
            )));
        }
        if !(0.0..1.0).contains(&self.dataset.noise_level) {
            return Err(Error::Config("noise level must be in [0, 1)".into()));
        }
        let u = &self.uq;
        if u.n_post < 2 || u.calibration_bins < 2 {
            return Err(Error::Config(
                "uq needs n_post >= 2 and at least two calibration bins".into(),
            ));
        }
        if !u.source_subsets.windows(2).all(|w| w[0] < w[1])
            || u.source_subsets.iter().any(|&s| s == 0 || s > g.n_sources)
        {
            return Err(Error::Config(format!(
                "source subsets {:?} must be ascending and within 1..={}",
                u.source_subsets, g.n_sources
            )));
        }
        if u.sweep_counts.is_empty() || !u.sweep_counts.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("sweep counts must be ascending".into()));
        }
        if u.test_phantoms == 0 {
            return Err(Error::Config("need at least one test phantom".into()));
        }
        if self.run.workers == 0 {
            return Err(Error::Config("worker count must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            nx: self.grid.nx,
            ny: self.grid.ny,
            dx: self.grid.dx,
            dt: self.grid.dt,
            nt: self.grid.nt,
            sponge_width: self.grid.sponge_width,
        }
    }

    pub fn geometry(&self) -> Result<AcquisitionGeometry> {
        AcquisitionGeometry::ring_array(
            &self.grid_spec(),
            self.geometry.n_receivers,
            self.geometry.n_sources,
            self.geometry.ring_radius,
        )
    }

    pub fn wavelet(&self) -> Result<SourceWavelet> {
        make_tone_burst(
            self.wavelet.center_frequency,
            self.wavelet.n_cycles,
            &self.grid_spec(),
            self.wavelet.amplitude,
        )
    }

    pub fn tissue_table(&self) -> TissueTable {
        TissueTable {
            classes: self.tissue.classes.clone(),
            water: (self.tissue.water_velocity, self.tissue.water_density),
            bone: (self.tissue.bone_velocity, self.tissue.bone_density),
        }
    }

    pub fn flow_architecture(&self) -> FlowArchitecture {
        FlowArchitecture {
            nx: self.grid.nx,
            ny: self.grid.ny,
            n_scales: self.flow.n_scales,
            n_blocks_per_scale: self.flow.n_blocks_per_scale,
            hidden_channels: self.flow.hidden_channels,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.optimizer.learning_rate,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            epsilon: self.optimizer.epsilon,
            batch_size: self.optimizer.batch_size,
            epochs: self.optimizer.epochs,
            grad_clip: self.optimizer.grad_clip,
        }
    }

    pub fn fwi_config(&self) -> FwiConfig {
        FwiConfig {
            max_iterations: self.fwi.max_iterations,
            max_wall_seconds: self.fwi.max_wall_seconds,
            box_bounds: (self.fwi.box_lo, self.fwi.box_hi),
            shrink: self.fwi.shrink,
            sufficient_decrease: self.fwi.sufficient_decrease,
            batch_size_sources: self.fwi.batch_size_sources,
            max_shrinks: self.fwi.max_shrinks,
            initial_step: None,
            epoch_seed: self.run.master_seed,
            max_gradient_calls_per_source: self.fwi.max_gradient_calls_per_source,
        }
    }
}
