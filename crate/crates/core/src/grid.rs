//! Grid, acoustic model, and acquisition geometry types.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular 2D grid with explicit time stepping parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cell count along x.
    pub nx: usize,
    /// Cell count along y.
    pub ny: usize,
    /// Grid spacing in meters.
    pub dx: f64,
    /// Time step in seconds.
    pub dt: f64,
    /// Number of time steps recorded.
    pub nt: usize,
    /// Width of the absorbing sponge layer in cells.
    pub sponge_width: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 1 || self.ny < 1 || self.nt < 1 {
            return Err(Error::Config(format!(
                "grid dimensions must be >= 1, got {}x{} nt={}",
                self.nx, self.ny, self.nt
            )));
        }
        if !(self.dx > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config(format!(
                "dx and dt must be positive, got dx={} dt={}",
                self.dx, self.dt
            )));
        }
        if 2 * self.sponge_width >= self.nx.min(self.ny) {
            return Err(Error::Config(format!(
                "sponge width {} leaves no interior on a {}x{} grid",
                self.sponge_width, self.nx, self.ny
            )));
        }
        Ok(())
    }

    /// Total cell count.
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// True if (ix, iy) lies strictly inside the non-sponge interior.
    pub fn in_interior(&self, ix: usize, iy: usize) -> bool {
        let w = self.sponge_width;
        ix >= w && ix < self.nx - w && iy >= w && iy < self.ny - w
    }
}

/// Per-cell acoustic velocity and density on a [`GridSpec`] grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    pub velocity: Array2<f64>,
    pub density: Array2<f64>,
    pub spec: GridSpec,
}

impl AcousticModel {
    /// Build a model, validating field shapes, positivity, and finiteness.
    pub fn new(velocity: Array2<f64>, density: Array2<f64>, spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let want = (spec.nx, spec.ny);
        if velocity.dim() != want || density.dim() != want {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", want.0, want.1),
                found: format!("{:?} / {:?}", velocity.dim(), density.dim()),
            });
        }
        if velocity.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config("velocity must be finite and positive".into()));
        }
        if density.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::Config("density must be finite and positive".into()));
        }
        Ok(Self {
            velocity,
            density,
            spec,
        })
    }

    /// Homogeneous model, mostly for tests and smoke runs.
    pub fn homogeneous(spec: GridSpec, velocity: f64, density: f64) -> Result<Self> {
        Self::new(
            Array2::from_elem((spec.nx, spec.ny), velocity),
            Array2::from_elem((spec.nx, spec.ny), density),
            spec,
        )
    }

    pub fn max_velocity(&self) -> f64 {
        self.velocity.iter().cloned().fold(f64::MIN, f64::max)
    }

    /// Squared slowness 1/c², the parameterization gradients are taken in.
    pub fn squared_slowness(&self) -> Array2<f64> {
        self.velocity.mapv(|c| 1.0 / (c * c))
    }

    /// Replace velocity from a squared-slowness field, keeping density.
    pub fn with_squared_slowness(&self, mu: &Array2<f64>) -> Result<Self> {
        let velocity = mu.mapv(|m| 1.0 / m.sqrt());
        Self::new(velocity, self.density.clone(), self.spec)
    }

    /// Replace the velocity field, keeping density and grid.
    pub fn with_velocity(&self, velocity: Array2<f64>) -> Result<Self> {
        Self::new(velocity, self.density.clone(), self.spec)
    }

    /// True if every velocity lies in [v_min, v_max].
    pub fn within_bounds(&self, v_min: f64, v_max: f64) -> bool {
        self.velocity.iter().all(|&v| v >= v_min && v <= v_max)
    }
}

/// Transducer layout: receiver ring plus the subset that fires as sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    /// Grid coordinates (ix, iy) of every receiver.
    pub receiver_positions: Vec<(usize, usize)>,
    /// Grid coordinates of every source.
    pub source_positions: Vec<(usize, usize)>,
    /// Indices into `source_positions` that fire in this experiment.
    pub active_sources: Vec<usize>,
}

impl AcquisitionGeometry {
    /// Validate positions against a grid: all inside the non-sponge interior,
    /// active indices in range.
    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        if self.receiver_positions.is_empty() {
            return Err(Error::Config("geometry needs at least one receiver".into()));
        }
        for &(ix, iy) in self
            .receiver_positions
            .iter()
            .chain(self.source_positions.iter())
        {
            if ix >= spec.nx || iy >= spec.ny || !spec.in_interior(ix, iy) {
                return Err(Error::Config(format!(
                    "transducer at ({ix},{iy}) is outside the grid interior"
                )));
            }
        }
        for &s in &self.active_sources {
            if s >= self.source_positions.len() {
                return Err(Error::Config(format!(
                    "active source index {s} out of range ({} sources)",
                    self.source_positions.len()
                )));
            }
        }
        Ok(())
    }

    pub fn n_receivers(&self) -> usize {
        self.receiver_positions.len()
    }

    /// Circular transducer array: `n_receivers` evenly spaced on a ring of
    /// `radius` cells around the grid center, with every k-th receiver also
    /// acting as a source (k chosen so that `n_sources` of them fire).
    /// Mirrors the layout where sources are a subset of the receivers.
    pub fn ring_array(
        spec: &GridSpec,
        n_receivers: usize,
        n_sources: usize,
        radius: f64,
    ) -> Result<Self> {
        if n_receivers == 0 || n_sources == 0 || n_sources > n_receivers {
            return Err(Error::Config(format!(
                "invalid ring array: {n_receivers} receivers, {n_sources} sources"
            )));
        }
        let cx = (spec.nx - 1) as f64 / 2.0;
        let cy = (spec.ny - 1) as f64 / 2.0;
        let mut receivers = Vec::with_capacity(n_receivers);
        for i in 0..n_receivers {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / n_receivers as f64;
            let ix = (cx + radius * theta.cos()).round() as isize;
            let iy = (cy + radius * theta.sin()).round() as isize;
            if ix < 0 || iy < 0 {
                return Err(Error::Config("ring radius exceeds grid".into()));
            }
            let pos = (ix as usize, iy as usize);
            // rounding can collide on coarse grids; nudge along the ring
            if receivers.contains(&pos) {
                return Err(Error::Config(format!(
                    "ring of {n_receivers} receivers collides at radius {radius}; use a larger radius or fewer receivers"
                )));
            }
            receivers.push(pos);
        }
        let stride = n_receivers / n_sources;
        let sources: Vec<(usize, usize)> =
            (0..n_sources).map(|i| receivers[i * stride]).collect();
        let geom = Self {
            receiver_positions: receivers,
            source_positions: sources,
            active_sources: (0..n_sources).collect(),
        };
        geom.validate(spec)?;
        Ok(geom)
    }

    /// Restrict the active sources to the first `n` of the full source list.
    pub fn with_first_sources(&self, n: usize) -> Self {
        let mut g = self.clone();
        g.active_sources = (0..n.min(self.source_positions.len())).collect();
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec {
            nx: 64,
            ny: 64,
            dx: 0.5e-3,
            dt: 1.0e-7,
            nt: 100,
            sponge_width: 8,
        }
    }

    #[test]
    fn ring_array_sources_are_receivers() {
        let g = AcquisitionGeometry::ring_array(&spec(), 64, 16, 22.0).unwrap();
        assert_eq!(g.receiver_positions.len(), 64);
        assert_eq!(g.source_positions.len(), 16);
        for s in &g.source_positions {
            assert!(g.receiver_positions.contains(s));
        }
    }

    #[test]
    fn geometry_rejects_sponge_positions() {
        let g = AcquisitionGeometry {
            receiver_positions: vec![(1, 32)],
            source_positions: vec![],
            active_sources: vec![],
        };
        assert!(g.validate(&spec()).is_err());
    }

    #[test]
    fn model_rejects_nonpositive_velocity() {
        let s = spec();
        let v = Array2::from_elem((64, 64), 0.0);
        let d = Array2::from_elem((64, 64), 1000.0);
        assert!(AcousticModel::new(v, d, s).is_err());
    }

    #[test]
    fn model_rejects_wrong_shape() {
        let s = spec();
        let v = Array2::from_elem((32, 64), 1500.0);
        let d = Array2::from_elem((32, 64), 1000.0);
        assert!(matches!(
            AcousticModel::new(v, d, s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn spec_rejects_oversized_sponge() {
        let mut s = spec();
        s.sponge_width = 32;
        assert!(s.validate().is_err());
    }
}
