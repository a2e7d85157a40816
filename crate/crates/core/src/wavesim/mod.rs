//! Variable-density acoustic wave propagation and its adjoint.
//!
//! Solves `(1/(rho c^2)) u_tt - div((1/rho) grad u) = q` on a regular 2D
//! grid with an explicit second-order-in-time scheme, a flux-form
//! second-order spatial operator, and an exponential sponge boundary.
//! The spatial operator is symmetric and the damping is diagonal, so the
//! adjoint pass below is the exact transpose of the linearized forward
//! time loop — gradients agree with finite differences to truncation
//! error, not just to discretization order.
//!
//! Gradients are taken with respect to squared slowness `mu = 1/c^2`
//! with density held fixed; use [`velocity_gradient`] to chain-rule a
//! squared-slowness gradient onto velocity.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{AcousticModel, AcquisitionGeometry, GridSpec};

/// Cap on stored forward-field history (`nx*ny*nt*8` bytes) before
/// [`adjoint_gradient`] refuses to run. Desk-scale grids are far below
/// this; full-scale 3D-era grids need checkpointing this solver does not
/// implement.
pub const DEFAULT_HISTORY_CAP: usize = 2 << 30;

/// Bytes of forward history one adjoint computation must hold.
pub fn history_bytes(spec: &GridSpec) -> usize {
    spec.nx * spec.ny * spec.nt * 8
}

/// Time-domain source signature injected at a transducer cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceWavelet {
    /// One sample per time step, length `nt`.
    pub samples: Vec<f64>,
    /// Center frequency in Hz.
    pub center_frequency: f64,
    /// Number of carrier cycles inside the burst.
    pub n_cycles: usize,
}

/// Receiver-by-time pressure traces for one source firing.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    /// Shape (nt, n_receivers), time-major.
    pub traces: Array2<f64>,
    /// Which source produced this record.
    pub source_index: usize,
}

impl ShotRecord {
    pub fn new(traces: Array2<f64>, source_index: usize) -> Result<Self> {
        if traces.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: "shot record traces".into(),
            });
        }
        Ok(Self {
            traces,
            source_index,
        })
    }

    pub fn nt(&self) -> usize {
        self.traces.dim().0
    }

    pub fn n_receivers(&self) -> usize {
        self.traces.dim().1
    }

    /// Root-mean-square amplitude over all samples.
    pub fn rms(&self) -> f64 {
        let n = self.traces.len() as f64;
        (self.traces.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
    }
}

/// Hann-windowed sine burst: `n_cycles` of carrier `f0` under a raised
/// cosine spanning the burst, zero afterwards.
pub fn make_tone_burst(
    f0: f64,
    n_cycles: usize,
    spec: &GridSpec,
    amplitude: f64,
) -> Result<SourceWavelet> {
    if f0 <= 0.0 {
        return Err(Error::Config(format!("center frequency must be > 0, got {f0}")));
    }
    if n_cycles < 1 {
        return Err(Error::Config("burst needs at least one cycle".into()));
    }
    let burst_len = n_cycles as f64 / f0;
    let record_len = spec.nt as f64 * spec.dt;
    if burst_len > record_len {
        return Err(Error::Config(format!(
            "burst of {burst_len:.3e} s does not fit a {record_len:.3e} s record"
        )));
    }
    let mut samples = vec![0.0; spec.nt];
    for (k, s) in samples.iter_mut().enumerate() {
        let t = k as f64 * spec.dt;
        if t <= burst_len {
            let carrier = (2.0 * std::f64::consts::PI * f0 * t).sin();
            let window = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t / burst_len).cos());
            *s = amplitude * carrier * window;
        }
    }
    Ok(SourceWavelet {
        samples,
        center_frequency: f0,
        n_cycles,
    })
}

/// Largest stable time step for the 2D scheme: `safety * dx / (v_max * sqrt(2))`.
pub fn check_cfl(model: &AcousticModel, spec: &GridSpec, safety: f64) -> Result<f64> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::Config(format!("CFL safety must be in (0,1], got {safety}")));
    }
    Ok(safety * spec.dx / (model.max_velocity() * std::f64::consts::SQRT_2))
}

fn require_stable(model: &AcousticModel, spec: &GridSpec) -> Result<()> {
    let max_dt = check_cfl(model, spec, 1.0)?;
    if spec.dt > max_dt {
        return Err(Error::CflViolation {
            dt: spec.dt,
            max_dt,
        });
    }
    Ok(())
}

/// Precomputed per-cell coefficients shared by forward and adjoint loops.
struct Coefficients {
    /// dt^2 / M with M = 1/(rho c^2); multiplies the spatial term and source.
    a: Array2<f64>,
    /// Edge buoyancy between (i,j) and (i+1,j): shape (nx-1, ny).
    bx: Array2<f64>,
    /// Edge buoyancy between (i,j) and (i,j+1): shape (nx, ny-1).
    by: Array2<f64>,
    /// Sponge damping factor per cell, 1 in the interior.
    g: Array2<f64>,
    /// c^2 per cell; converts the mass-coefficient gradient to squared slowness.
    c2: Array2<f64>,
    inv_dx2: f64,
}

impl Coefficients {
    fn build(model: &AcousticModel) -> Self {
        let spec = model.spec;
        let (nx, ny) = (spec.nx, spec.ny);
        let buoyancy = model.density.mapv(|r| 1.0 / r);
        let a = Array2::from_shape_fn((nx, ny), |(i, j)| {
            let c = model.velocity[[i, j]];
            spec.dt * spec.dt * model.density[[i, j]] * c * c
        });
        let bx = Array2::from_shape_fn((nx - 1, ny), |(i, j)| {
            0.5 * (buoyancy[[i, j]] + buoyancy[[i + 1, j]])
        });
        let by = Array2::from_shape_fn((nx, ny - 1), |(i, j)| {
            0.5 * (buoyancy[[i, j]] + buoyancy[[i, j + 1]])
        });
        let g = sponge_profile(&spec);
        let c2 = model.velocity.mapv(|c| c * c);
        Self {
            a,
            bx,
            by,
            g,
            c2,
            inv_dx2: 1.0 / (spec.dx * spec.dx),
        }
    }
}

/// Exponential sponge: cells within `sponge_width` of an edge are scaled
/// by `exp(-(0.6 * depth)^2)` every step, where `depth` ramps from 0 at
/// the interior interface to 1 at the outermost cell.
fn sponge_profile(spec: &GridSpec) -> Array2<f64> {
    let w = spec.sponge_width;
    Array2::from_shape_fn((spec.nx, spec.ny), |(i, j)| {
        let dist = i
            .min(spec.nx - 1 - i)
            .min(j)
            .min(spec.ny - 1 - j);
        if w == 0 || dist >= w {
            1.0
        } else {
            let depth = (w - dist) as f64 / w as f64;
            (-(0.6 * depth).powi(2)).exp()
        }
    })
}

/// Flux-form variable-density Laplacian `div(b grad u)` with zero-flux
/// boundary edges; symmetric by construction.
fn laplacian(co: &Coefficients, u: &Array2<f64>, out: &mut Array2<f64>) {
    let (nx, ny) = u.dim();
    out.fill(0.0);
    let us = u.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    let bys = co.by.as_slice().expect("standard layout");
    let bxs = co.bx.as_slice().expect("standard layout");
    for i in 0..nx {
        let row = i * ny;
        let brow = i * (ny - 1);
        for j in 0..ny - 1 {
            let k = row + j;
            let f = bys[brow + j] * (us[k + 1] - us[k]);
            os[k] += f;
            os[k + 1] -= f;
        }
    }
    for i in 0..nx - 1 {
        let r0 = i * ny;
        let r1 = r0 + ny;
        for j in 0..ny {
            let f = bxs[r0 + j] * (us[r1 + j] - us[r0 + j]);
            os[r0 + j] += f;
            os[r1 + j] -= f;
        }
    }
    for v in os.iter_mut() {
        *v *= co.inv_dx2;
    }
}

/// Explicit time stepper for the damped scheme. One instance per shot.
pub struct Propagator {
    co: Coefficients,
    spec: GridSpec,
    prev: Array2<f64>,
    cur: Array2<f64>,
    scratch: Array2<f64>,
    step_index: usize,
}

impl Propagator {
    pub fn new(model: &AcousticModel) -> Result<Self> {
        require_stable(model, &model.spec)?;
        let spec = model.spec;
        Ok(Self {
            co: Coefficients::build(model),
            spec,
            prev: Array2::zeros((spec.nx, spec.ny)),
            cur: Array2::zeros((spec.nx, spec.ny)),
            scratch: Array2::zeros((spec.nx, spec.ny)),
            step_index: 0,
        })
    }

    /// Advance one step, injecting `amplitude` at `source` (grid cell).
    /// When `history` is provided, the pre-damping Verlet increment
    /// `a * (Lu + q)` is appended to it (used for gradient assembly).
    pub fn step(
        &mut self,
        source: Option<(usize, usize)>,
        amplitude: f64,
        mut history: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        laplacian(&self.co, &self.cur, &mut self.scratch);
        let a = self.co.a.as_slice().expect("layout");
        let v = self.scratch.as_slice_mut().expect("layout");
        for (vk, ak) in v.iter_mut().zip(a.iter()) {
            *vk *= ak;
        }
        if let Some((si, sj)) = source {
            let k = si * self.spec.ny + sj;
            v[k] += a[k] * amplitude;
        }
        if let Some(h) = history.as_deref_mut() {
            h.extend_from_slice(v);
        }
        let g = self.co.g.as_slice().expect("layout");
        let p = self.prev.as_slice_mut().expect("layout");
        let c = self.cur.as_slice_mut().expect("layout");
        for k in 0..c.len() {
            let t = 2.0 * c[k] - p[k] + v[k];
            p[k] = g[k] * c[k];
            c[k] = g[k] * t;
        }
        self.step_index += 1;
        if self.step_index % 64 == 0 && !self.cur.iter().all(|x| x.is_finite()) {
            return Err(Error::Instability {
                step: self.step_index,
            });
        }
        Ok(())
    }

    /// Wavefield after the most recent step.
    pub fn current(&self) -> &Array2<f64> {
        &self.cur
    }

    /// Wavefield one step back (damped).
    pub fn previous(&self) -> &Array2<f64> {
        &self.prev
    }

    /// Discrete leapfrog energy; exactly conserved by the undamped
    /// interior scheme and non-increasing once the source is off.
    pub fn energy(&mut self) -> f64 {
        laplacian(&self.co, &self.prev, &mut self.scratch);
        let dt2 = self.spec.dt * self.spec.dt;
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for ((c, p), (a, l)) in self
            .cur
            .iter()
            .zip(self.prev.iter())
            .zip(self.co.a.iter().zip(self.scratch.iter()))
        {
            let m = dt2 / a; // M = 1/(rho c^2)
            let du = c - p;
            kinetic += 0.5 * m * du * du / dt2;
            potential -= 0.5 * c * l;
        }
        kinetic + potential
    }
}

fn source_cell(geom: &AcquisitionGeometry, source_index: usize) -> Result<(usize, usize)> {
    if !geom.active_sources.contains(&source_index) {
        return Err(Error::Config(format!(
            "source {source_index} is not in the active set"
        )));
    }
    geom.source_positions
        .get(source_index)
        .copied()
        .ok_or_else(|| Error::Config(format!("source index {source_index} out of range")))
}

fn validate_wavelet(wavelet: &SourceWavelet, spec: &GridSpec) -> Result<()> {
    if wavelet.samples.len() != spec.nt {
        return Err(Error::ShapeMismatch {
            expected: format!("wavelet of {} samples", spec.nt),
            found: format!("{}", wavelet.samples.len()),
        });
    }
    if wavelet.samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "source wavelet".into(),
        });
    }
    Ok(())
}

fn run_forward(
    model: &AcousticModel,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    source_index: usize,
    mut history: Option<&mut Vec<f64>>,
) -> Result<ShotRecord> {
    let spec = model.spec;
    geom.validate(&spec)?;
    validate_wavelet(wavelet, &spec)?;
    let src = source_cell(geom, source_index)?;
    let mut prop = Propagator::new(model)?;
    let nr = geom.n_receivers();
    let mut traces = Array2::zeros((spec.nt, nr));
    for n in 0..spec.nt {
        prop.step(Some(src), wavelet.samples[n], history.as_deref_mut())?;
        let cur = prop.current();
        for (r, &(ix, iy)) in geom.receiver_positions.iter().enumerate() {
            traces[[n, r]] = cur[[ix, iy]];
        }
    }
    if !traces.iter().all(|v| v.is_finite()) {
        return Err(Error::Instability { step: spec.nt });
    }
    Ok(ShotRecord {
        traces,
        source_index,
    })
}

/// Solve the wave equation for one source and record at the receivers.
/// Deterministic given inputs.
pub fn simulate_forward(
    model: &AcousticModel,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    source_index: usize,
) -> Result<ShotRecord> {
    run_forward(model, geom, wavelet, source_index, None)
}

/// Apply the Jacobian of [`simulate_forward`] with respect to squared
/// slowness (density fixed) to a model-space direction: the Born
/// scattering of the background wavefield by `dmu`, recorded at the
/// receivers.
pub fn linearized_forward(
    model: &AcousticModel,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    source_index: usize,
    dmu: &Array2<f64>,
) -> Result<ShotRecord> {
    let spec = model.spec;
    if dmu.dim() != (spec.nx, spec.ny) {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, {}) direction", spec.nx, spec.ny),
            found: format!("{:?}", dmu.dim()),
        });
    }
    check_history_cap(&spec)?;
    let n = spec.nx * spec.ny;
    let mut history = Vec::with_capacity(n * spec.nt);
    run_forward(model, geom, wavelet, source_index, Some(&mut history))?;
    let co = Coefficients::build(model);
    let g = co.g.as_slice().expect("layout");
    let a = co.a.as_slice().expect("layout");
    let c2 = co.c2.as_slice().expect("layout");
    let dmu_s = dmu
        .as_standard_layout()
        .as_slice()
        .expect("layout")
        .to_vec();
    let mut dp = vec![0.0f64; n];
    let mut dc = Array2::<f64>::zeros((spec.nx, spec.ny));
    let mut lap = Array2::<f64>::zeros((spec.nx, spec.ny));
    let mut traces = Array2::<f64>::zeros((spec.nt, geom.n_receivers()));
    for step in 0..spec.nt {
        laplacian(&co, &dc, &mut lap);
        let v = &history[step * n..(step + 1) * n];
        let dcs = dc.as_slice_mut().expect("layout");
        let l = lap.as_slice().expect("layout");
        for k in 0..n {
            let dv = a[k] * l[k] - dmu_s[k] * c2[k] * v[k];
            let t = 2.0 * dcs[k] - dp[k] + dv;
            dp[k] = g[k] * dcs[k];
            dcs[k] = g[k] * t;
        }
        for (r, &(ix, iy)) in geom.receiver_positions.iter().enumerate() {
            traces[[step, r]] = dc[[ix, iy]];
        }
    }
    if !traces.iter().all(|v| v.is_finite()) {
        return Err(Error::Instability { step: spec.nt });
    }
    Ok(ShotRecord {
        traces,
        source_index,
    })
}

/// Apply the transposed Jacobian of [`simulate_forward`] (with respect to
/// squared slowness, density fixed) to a data-space residual.
///
/// Runs the forward pass storing the Verlet increments, then the exact
/// transpose of the linearized time loop driven by the time-reversed
/// residual injected at the receivers, and accumulates the zero-lag
/// correlation against the stored increments.
pub fn adjoint_gradient(
    model: &AcousticModel,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    source_index: usize,
    residual: &ShotRecord,
) -> Result<Array2<f64>> {
    let spec = model.spec;
    let nr = geom.n_receivers();
    if residual.traces.dim() != (spec.nt, nr) {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, {nr}) residual", spec.nt),
            found: format!("{:?}", residual.traces.dim()),
        });
    }
    check_history_cap(&spec)?;
    let mut history = Vec::with_capacity(spec.nx * spec.ny * spec.nt);
    run_forward(model, geom, wavelet, source_index, Some(&mut history))?;
    backward_pass(model, geom, &residual.traces, &history)
}

/// One forward solve shared between the data misfit and its gradient:
/// returns `(1/2 ||F q - y||^2, J^T (F q - y))` with the gradient in
/// squared-slowness units.
pub fn misfit_and_gradient(
    model: &AcousticModel,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    source_index: usize,
    observed: &ShotRecord,
) -> Result<(f64, Array2<f64>)> {
    let spec = model.spec;
    let nr = geom.n_receivers();
    if observed.traces.dim() != (spec.nt, nr) {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, {nr}) observed record", spec.nt),
            found: format!("{:?}", observed.traces.dim()),
        });
    }
    check_history_cap(&spec)?;
    let mut history = Vec::with_capacity(spec.nx * spec.ny * spec.nt);
    let synth = run_forward(model, geom, wavelet, source_index, Some(&mut history))?;
    let residual = &synth.traces - &observed.traces;
    let misfit = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
    let grad = backward_pass(model, geom, &residual, &history)?;
    Ok((misfit, grad))
}

fn check_history_cap(spec: &GridSpec) -> Result<()> {
    let need = history_bytes(spec);
    if need > DEFAULT_HISTORY_CAP {
        return Err(Error::HistoryTooLarge {
            bytes: need,
            cap: DEFAULT_HISTORY_CAP,
        });
    }
    Ok(())
}

fn backward_pass(
    model: &AcousticModel,
    geom: &AcquisitionGeometry,
    residual: &Array2<f64>,
    history: &[f64],
) -> Result<Array2<f64>> {
    let spec = model.spec;
    let co = Coefficients::build(model);
    let (nx, ny) = (spec.nx, spec.ny);
    let n = nx * ny;
    let mut psi_p = vec![0.0f64; n];
    let mut psi_c = vec![0.0f64; n];
    let mut weighted = Array2::<f64>::zeros((nx, ny));
    let mut lap = Array2::<f64>::zeros((nx, ny));
    let mut grad = vec![0.0f64; n];
    let g = co.g.as_slice().expect("layout");
    let a = co.a.as_slice().expect("layout");
    let c2 = co.c2.as_slice().expect("layout");

    for j in (0..spec.nt).rev() {
        // transpose of the state transition
        {
            let w = weighted.as_slice_mut().expect("layout");
            for k in 0..n {
                w[k] = a[k] * g[k] * psi_c[k];
            }
        }
        laplacian(&co, &weighted, &mut lap);
        let l = lap.as_slice().expect("layout");
        for k in 0..n {
            let gc = g[k] * psi_c[k];
            let np = -gc;
            let nc = g[k] * psi_p[k] + 2.0 * gc + l[k];
            psi_p[k] = np;
            psi_c[k] = nc;
        }
        // transpose of receiver sampling
        for (r, &(ix, iy)) in geom.receiver_positions.iter().enumerate() {
            psi_c[ix * ny + iy] += residual[[j, r]];
        }
        // gradient accumulation against the stored increment at step j
        let v = &history[j * n..(j + 1) * n];
        for k in 0..n {
            grad[k] -= c2[k] * v[k] * g[k] * psi_c[k];
        }
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::Instability { step: 0 });
    }
    Array2::from_shape_vec((nx, ny), grad)
        .map_err(|e| Error::Config(format!("gradient shape: {e}")))
}

/// Chain-rule a squared-slowness gradient to a velocity gradient:
/// `d mu / d c = -2 / c^3`.
pub fn velocity_gradient(grad_mu: &Array2<f64>, model: &AcousticModel) -> Array2<f64> {
    let mut out = grad_mu.clone();
    out.zip_mut_with(&model.velocity, |gm, &c| {
        *gm *= -2.0 / (c * c * c);
    });
    out
}

/// Band-limited Gaussian noise with the wavelet's frequency content:
/// seeded white noise convolved with the burst, scaled so its RMS equals
/// `level * reference_rms`. Deterministic given the seed.
pub fn make_colored_noise(
    spec: &GridSpec,
    n_receivers: usize,
    wavelet: &SourceWavelet,
    level: f64,
    reference_rms: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    if level < 0.0 {
        return Err(Error::Config(format!("noise level must be >= 0, got {level}")));
    }
    let nt = spec.nt;
    let mut out = Array2::<f64>::zeros((nt, n_receivers));
    if level == 0.0 {
        return Ok(out);
    }
    // truncate the kernel to the burst support
    let support = wavelet
        .samples
        .iter()
        .rposition(|&v| v != 0.0)
        .map_or(0, |p| p + 1);
    let kernel = &wavelet.samples[..support.max(1)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    for r in 0..n_receivers {
        let white: Vec<f64> = (0..nt).map(|_| normal.sample(&mut rng)).collect();
        for t in 0..nt {
            let mut acc = 0.0;
            let kmax = kernel.len().min(t + 1);
            for (k, &kv) in kernel.iter().enumerate().take(kmax) {
                acc += kv * white[t - k];
            }
            out[[t, r]] = acc;
        }
    }
    let raw_rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if raw_rms > 0.0 {
        let scale = level * reference_rms / raw_rms;
        out.mapv_inplace(|v| v * scale);
    }
    Ok(out)
}
