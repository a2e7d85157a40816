//! Physics-informed data summaries and the full-waveform inversion
//! baseline.
//!
//! The summary image reduces all shot records to one gradient-shaped
//! field: the misfit gradient at a fixed starting model, summed over
//! sources. FWI minimizes the same misfit directly with projected
//! gradient descent and a backtracking line search.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::grid::{AcousticModel, AcquisitionGeometry};
use crate::wavesim::{misfit_and_gradient, velocity_gradient, ShotRecord, SourceWavelet};

/// Gradient-shaped compression of a full set of shot records, evaluated
/// at a fixed starting model.
#[derive(Debug, Clone)]
pub struct SummaryImage {
    /// Misfit gradient in velocity units, shape (nx, ny).
    pub values: Array2<f64>,
    /// How many sources contributed.
    pub source_count_used: usize,
    /// Fingerprint of the starting model the summary was evaluated at.
    pub starting_model_id: String,
}

/// Fingerprint a model so summaries carry their starting-model provenance.
pub fn model_fingerprint(model: &AcousticModel) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |bits: u64| {
        h ^= bits;
        h = h.wrapping_mul(0x1000_0000_01b3).rotate_left(23);
    };
    for v in model.velocity.iter().chain(model.density.iter()) {
        mix(v.to_bits());
    }
    mix(model.spec.nx as u64);
    mix(model.spec.ny as u64);
    format!("{h:016x}")
}

fn check_observed(
    geom: &AcquisitionGeometry,
    observed: &[ShotRecord],
    nt: usize,
) -> Result<()> {
    if observed.len() != geom.active_sources.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} shot records", geom.active_sources.len()),
            found: format!("{}", observed.len()),
        });
    }
    for (rec, &src) in observed.iter().zip(geom.active_sources.iter()) {
        if rec.source_index != src {
            return Err(Error::Config(format!(
                "shot record for source {} found where source {src} was expected",
                rec.source_index
            )));
        }
        if rec.traces.dim() != (nt, geom.n_receivers()) {
            return Err(Error::ShapeMismatch {
                expected: format!("({nt}, {})", geom.n_receivers()),
                found: format!("{:?}", rec.traces.dim()),
            });
        }
    }
    Ok(())
}

/// Sum of per-source adjoint gradients of the data misfit, evaluated at
/// `x0`, in fixed source order. Per-source work may run in parallel; the
/// reduction is ordered, so the result is bit-identical for any worker
/// count.
pub fn compute_summary(
    x0: &AcousticModel,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    observed: &[ShotRecord],
) -> Result<SummaryImage> {
    geom.validate(&x0.spec)?;
    check_observed(geom, observed, x0.spec.nt)?;
    let per_source: Result<Vec<Array2<f64>>> = geom
        .active_sources
        .par_iter()
        .zip(observed.par_iter())
        .map(|(&src, obs)| {
            let (_, grad_mu) = misfit_and_gradient(x0, geom, wavelet, src, obs)?;
            Ok(velocity_gradient(&grad_mu, x0))
        })
        .collect();
    let mut values = Array2::<f64>::zeros((x0.spec.nx, x0.spec.ny));
    for g in per_source? {
        values += &g;
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "summary image".into(),
        });
    }
    Ok(SummaryImage {
        values,
        source_count_used: geom.active_sources.len(),
        starting_model_id: model_fingerprint(x0),
    })
}

/// Parameters of the projected-gradient FWI baseline.
#[derive(Debug, Clone)]
pub struct FwiConfig {
    pub max_iterations: usize,
    pub max_wall_seconds: f64,
    /// Velocity box (v_min, v_max) every iterate is projected into.
    pub box_bounds: (f64, f64),
    /// Line-search step shrink factor, in (0, 1).
    pub shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
    /// Sources per stochastic step; 0 means full batch.
    pub batch_size_sources: usize,
    /// Line-search attempts before declaring the iteration stalled.
    pub max_shrinks: usize,
    /// First trial step length; None picks one from the gradient scale.
    pub initial_step: Option<f64>,
    /// Seed for the per-epoch source permutation (mini-batch mode).
    pub epoch_seed: u64,
    /// Budget of gradient evaluations per source.
    pub max_gradient_calls_per_source: usize,
}

impl Default for FwiConfig {
    fn default() -> Self {
        Self {
            max_iterations: 60,
            max_wall_seconds: 600.0,
            box_bounds: (1500.0, 2800.0),
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            batch_size_sources: 0,
            max_shrinks: 12,
            initial_step: None,
            epoch_seed: 0,
            max_gradient_calls_per_source: 40,
        }
    }
}

impl FwiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.box_bounds.0 >= self.box_bounds.1 || self.box_bounds.0 <= 0.0 {
            return Err(Error::Config(format!(
                "box bounds must satisfy 0 < v_min < v_max, got {:?}",
                self.box_bounds
            )));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config(format!(
                "shrink factor must be in (0,1), got {}",
                self.shrink
            )));
        }
        if self.sufficient_decrease <= 0.0 {
            return Err(Error::Config(
                "sufficient-decrease constant must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Why an FWI run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FwiStatus {
    Converged,
    MaxIterations,
    WallClock,
    Stalled,
    GradientBudget,
}

/// One row of the optimization trace.
#[derive(Debug, Clone, Copy)]
pub struct FwiIterate {
    pub iteration: usize,
    /// Full-batch data misfit after this iteration.
    pub misfit: f64,
    pub step_length: f64,
    pub accepted: bool,
    /// Velocity extremes of the iterate, for box-constraint audits.
    pub velocity_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct FwiResult {
    pub model: AcousticModel,
    pub misfit_history: Vec<FwiIterate>,
    pub status: FwiStatus,
    pub gradient_calls: usize,
}

fn clamp_velocity(v: &mut Array2<f64>, bounds: (f64, f64)) {
    v.mapv_inplace(|x| x.clamp(bounds.0, bounds.1));
}

fn velocity_range(model: &AcousticModel) -> (f64, f64) {
    model.velocity.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(lo, hi), &v| (lo.min(v), hi.max(v)),
    )
}

/// Misfit over a set of sources, summed in index order.
fn batch_misfit(
    model: &AcousticModel,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    observed: &[ShotRecord],
    batch: &[usize],
) -> Result<f64> {
    let parts: Result<Vec<f64>> = batch
        .par_iter()
        .map(|&k| {
            let src = geom.active_sources[k];
            let rec = crate::wavesim::simulate_forward(model, geom, wavelet, src)?;
            Ok(0.5
                * rec
                    .traces
                    .iter()
                    .zip(observed[k].traces.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>())
        })
        .collect();
    Ok(parts?.iter().sum())
}

/// Misfit and velocity-space gradient over a batch, ordered reduction.
fn batch_misfit_and_gradient(
    model: &AcousticModel,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    observed: &[ShotRecord],
    batch: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let parts: Result<Vec<(f64, Array2<f64>)>> = batch
        .par_iter()
        .map(|&k| {
            let src = geom.active_sources[k];
            let (f, g_mu) = misfit_and_gradient(model, geom, wavelet, src, &observed[k])?;
            Ok((f, velocity_gradient(&g_mu, model)))
        })
        .collect();
    let mut misfit = 0.0;
    let mut grad = Array2::<f64>::zeros((model.spec.nx, model.spec.ny));
    for (f, g) in parts? {
        misfit += f;
        grad += &g;
    }
    Ok((misfit, grad))
}

/// Projected gradient descent on velocity with backtracking line search.
/// Accepted steps never increase the misfit of the batch they were
/// evaluated on; with full batches (the default) the recorded history is
/// non-increasing. Every iterate stays inside the box bounds.
pub fn fwi_reconstruct(
    x0: &AcousticModel,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    observed: &[ShotRecord],
    config: &FwiConfig,
) -> Result<FwiResult> {
    config.validate()?;
    geom.validate(&x0.spec)?;
    check_observed(geom, observed, x0.spec.nt)?;
    let started = Instant::now();
    let n_src = geom.active_sources.len();
    let full_batch: Vec<usize> = (0..n_src).collect();
    let batch_size = if config.batch_size_sources == 0 {
        n_src
    } else {
        config.batch_size_sources.min(n_src)
    };

    let mut velocity = x0.velocity.clone();
    clamp_velocity(&mut velocity, config.box_bounds);
    let mut model = x0.with_velocity(velocity)?;

    let mut history = Vec::new();
    let mut full_misfit = batch_misfit(&model, geom, wavelet, observed, &full_batch)?;
    history.push(FwiIterate {
        iteration: 0,
        misfit: full_misfit,
        step_length: 0.0,
        accepted: true,
        velocity_range: velocity_range(&model),
    });

    let mut gradient_calls = 0usize;
    let budget = config.max_gradient_calls_per_source * n_src;
    let mut alpha: Option<f64> = config.initial_step;
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(config.epoch_seed);
    let mut order: Vec<usize> = Vec::new();
    let mut status = FwiStatus::MaxIterations;

    for iteration in 1..=config.max_iterations {
        if started.elapsed().as_secs_f64() > config.max_wall_seconds {
            status = FwiStatus::WallClock;
            break;
        }
        if gradient_calls + batch_size > budget {
            status = FwiStatus::GradientBudget;
            break;
        }
        let batch: Vec<usize> = if batch_size == n_src {
            full_batch.clone()
        } else {
            if order.len() < batch_size {
                order = full_batch.clone();
                order.shuffle(&mut epoch_rng);
            }
            order.drain(..batch_size).collect()
        };

        let (f_batch, grad) =
            batch_misfit_and_gradient(&model, geom, wavelet, observed, &batch)?;
        gradient_calls += batch.len();
        let g_max = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if g_max == 0.0 || f_batch == 0.0 {
            status = FwiStatus::Converged;
            break;
        }
        let mut step = alpha.unwrap_or_else(|| {
            0.05 * (config.box_bounds.1 - config.box_bounds.0) / g_max
        });

        let mut accepted = false;
        for _ in 0..=config.max_shrinks {
            let mut trial_v = &model.velocity - &(step * &grad);
            clamp_velocity(&mut trial_v, config.box_bounds);
            let trial = model.with_velocity(trial_v)?;
            let f_trial = batch_misfit(&trial, geom, wavelet, observed, &batch)?;
            let moved: f64 = grad
                .iter()
                .zip(model.velocity.iter().zip(trial.velocity.iter()))
                .map(|(g, (old, new))| g * (old - new))
                .sum();
            if f_trial <= f_batch - config.sufficient_decrease * moved {
                model = trial;
                accepted = true;
                full_misfit = if batch.len() == n_src {
                    f_trial
                } else {
                    batch_misfit(&model, geom, wavelet, observed, &full_batch)?
                };
                break;
            }
            step *= config.shrink;
        }
        history.push(FwiIterate {
            iteration,
            misfit: full_misfit,
            step_length: step,
            accepted,
            velocity_range: velocity_range(&model),
        });
        if !accepted {
            status = FwiStatus::Stalled;
            break;
        }
        alpha = Some(step * 2.0);

        let prev = history[history.len() - 2].misfit;
        if prev > 0.0 && ((prev - full_misfit) / prev).abs() < 1e-6 {
            status = FwiStatus::Converged;
            break;
        }
    }

    Ok(FwiResult {
        model,
        misfit_history: history,
        status,
        gradient_calls,
    })
}

/// Add a constant to the velocity inside the masked region, leaving
/// density and all other cells untouched.
pub fn shift_interior(
    x0: &AcousticModel,
    interior_mask: &Array2<bool>,
    delta: f64,
) -> Result<AcousticModel> {
    if interior_mask.dim() != x0.velocity.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x0.velocity.dim()),
            found: format!("{:?}", interior_mask.dim()),
        });
    }
    let mut velocity = x0.velocity.clone();
    for ((i, j), &inside) in interior_mask.indexed_iter() {
        if inside {
            velocity[[i, j]] += delta;
        }
    }
    x0.with_velocity(velocity)
}
