//! Adam training loop for the conditional flow. Minibatches are
//! reshuffled each epoch from a seeded generator, training fields carry
//! a fresh seeded noise floor each epoch, activation normalizations
//! take their scales from the first batch, and the returned parameters
//! are the best-validation snapshot. A non-finite loss aborts training
//! and hands back the last good snapshot.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seeds;

use super::layers::{squeeze, Tensor};
use super::{
    backward_internal, block_forward, condition_pyramid, field_to_tensor, forward_internal,
    FlowArchitecture, FlowCache, FlowGrads, FlowParameters,
};

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Rescale each batch gradient to this Euclidean norm when it is
    /// larger; None disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 20,
            grad_clip: Some(100.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epoch count must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters (last good snapshot on abort).
    pub params: FlowParameters,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// True when a non-finite loss stopped training early.
    pub aborted: bool,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    cfg: OptimizerConfig,
}

impl Adam {
    fn new(params: &FlowParameters, cfg: OptimizerConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            cfg,
        }
    }

    fn step(&mut self, params: &mut FlowParameters, grads: &FlowGrads) {
        self.t += 1;
        let b1c = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (ti, p) in params.tensors_mut().into_iter().enumerate() {
            let g = &grads.tensors()[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for k in 0..p.len() {
                m[k] = self.cfg.beta1 * m[k] + (1.0 - self.cfg.beta1) * g[k];
                v[k] = self.cfg.beta2 * v[k] + (1.0 - self.cfg.beta2) * g[k] * g[k];
                let mh = m[k] / b1c;
                let vh = v[k] / b2c;
                p[k] -= self.cfg.learning_rate * mh / (vh.sqrt() + self.cfg.epsilon);
            }
        }
    }
}

/// Noise floor, in normalized field units, added to every training
/// field each epoch. Fields whose cells are constant across the
/// training set would otherwise admit unbounded likelihood, which makes
/// inverse sampling unstable.
const AUGMENT_STD: f64 = 0.03;

/// Normalized sample ready for the flow: field tensor plus the
/// condition pyramid at every scale.
type Prepared = (Tensor, Vec<Tensor>);

fn augmented_fields(train_set: &[Prepared], seed: u64, epoch: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "augment", epoch as u64));
    train_set
        .iter()
        .map(|(x, _)| {
            let mut t = x.clone();
            for v in &mut t.data {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *v += AUGMENT_STD * eps;
            }
            t
        })
        .collect()
}

fn prepare_pairs(
    params: &FlowParameters,
    pairs: &[(Array2<f64>, Array2<f64>)],
) -> Result<Vec<Prepared>> {
    pairs
        .iter()
        .map(|(x, cond)| {
            let xn = params.normalize_field(x);
            let cn = params.normalize_condition(cond);
            let xt = field_to_tensor(&xn, &params.arch, "field")?;
            let ct = field_to_tensor(&cn, &params.arch, "condition")?;
            Ok((xt, condition_pyramid(&ct, params.arch.n_scales)))
        })
        .collect()
}

/// Walks the first batch through the flow, fixing each uninitialized
/// activation normalization from the statistics of its own inputs.
fn init_actnorms(params: &mut FlowParameters, batch: &[Prepared]) {
    let n_scales = params.arch.n_scales;
    let mut acts: Vec<Tensor> = batch.iter().map(|(x, _)| x.clone()).collect();
    for s in 0..n_scales {
        for a in &mut acts {
            *a = squeeze(a);
        }
        for b in 0..params.scales[s].len() {
            if !params.scales[s][b].norm.initialized {
                params.scales[s][b].norm.init_from(&acts);
            }
            let block = &params.scales[s][b];
            for (k, a) in acts.iter_mut().enumerate() {
                let cond = &batch[k].1[s];
                let (out, _) = block_forward(block, a, cond, None);
                *a = out;
            }
        }
        if s + 1 < n_scales {
            for a in &mut acts {
                let keep = a.c / 2;
                let plane = a.h * a.w;
                let mut t = Tensor::zeros(keep, a.h, a.w);
                t.data.copy_from_slice(&a.data[..keep * plane]);
                *a = t;
            }
        }
    }
}

fn mean_loss_prepared(params: &FlowParameters, set: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for (k, (x, pyramid)) in set.iter().enumerate() {
        let out = forward_internal(params, x, pyramid, None)?;
        let l = 0.5 * out.latent.norm_sq() - out.log_det;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { sample: k });
        }
        total += l;
    }
    Ok(total / set.len() as f64)
}

fn population_stats(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0u64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    let std = (m2 / n as f64).sqrt();
    (mean, std.max(1e-12))
}

/// Trains a flow on (field, condition) pairs in physical units;
/// normalization statistics are taken from the training set and stored
/// in the returned parameters.
pub fn train(
    arch: FlowArchitecture,
    train_pairs: &[(Array2<f64>, Array2<f64>)],
    val_pairs: &[(Array2<f64>, Array2<f64>)],
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    opt.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and validation sets".into(),
        ));
    }
    let mut params = FlowParameters::identity_init(arch, seeds::derive(seed, "flow-init", 0))?;
    let (fm, fs) = population_stats(train_pairs.iter().flat_map(|(x, _)| x.iter().copied()));
    let (cm, cs) = population_stats(train_pairs.iter().flat_map(|(_, c)| c.iter().copied()));
    params.field_mean = fm;
    params.field_std = fs;
    params.cond_mean = cm;
    params.cond_std = cs;

    let train_set = prepare_pairs(&params, train_pairs)?;
    let val_set = prepare_pairs(&params, val_pairs)?;
    let first = opt.batch_size.min(train_set.len());
    let first_fields = augmented_fields(&train_set[..first], seed, 0);
    let first_batch: Vec<Prepared> = first_fields
        .into_iter()
        .zip(train_set[..first].iter())
        .map(|(x, (_, pyramid))| (x, pyramid.clone()))
        .collect();
    init_actnorms(&mut params, &first_batch);

    let mut adam = Adam::new(&params, *opt);
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut log = Vec::with_capacity(opt.epochs);
    let start = Instant::now();
    let n = train_set.len();

    for epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "epoch-shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let fields = augmented_fields(&train_set, seed, epoch);
        let mut loss_sum = 0.0;
        let mut aborted = false;
        for chunk in order.chunks(opt.batch_size) {
            let mut grads = FlowGrads::zeros_like(&params);
            let inv_b = 1.0 / chunk.len() as f64;
            let mut batch_ok = true;
            for &idx in chunk {
                let (x, pyramid) = (&fields[idx], &train_set[idx].1);
                let mut cache = FlowCache::empty(&params.arch);
                let out = match forward_internal(&params, x, pyramid, Some(&mut cache)) {
                    Ok(o) => o,
                    Err(_) => {
                        batch_ok = false;
                        break;
                    }
                };
                let l = 0.5 * out.latent.norm_sq() - out.log_det;
                if !l.is_finite() {
                    batch_ok = false;
                    break;
                }
                loss_sum += l;
                let dz: Vec<f64> = out.latent.values.iter().map(|z| z * inv_b).collect();
                backward_internal(&params, &cache, &dz, -inv_b, &mut grads);
            }
            if !batch_ok {
                aborted = true;
                break;
            }
            if let Some(clip) = opt.grad_clip {
                let norm = grads.norm_sq().sqrt();
                if norm > clip {
                    grads.scale_by(clip / norm);
                }
            }
            adam.step(&mut params, &grads);
        }
        if aborted {
            return Ok(TrainOutcome {
                params: best_params,
                log,
                best_epoch,
                aborted: true,
            });
        }
        let train_loss = loss_sum / n as f64;
        let val_loss = match mean_loss_prepared(&params, &val_set) {
            Ok(v) => v,
            Err(_) => {
                return Ok(TrainOutcome {
                    params: best_params,
                    log,
                    best_epoch,
                    aborted: true,
                });
            }
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }
    Ok(TrainOutcome {
        params: best_params,
        log,
        best_epoch,
        aborted: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{forward_normalize, loss, FlowParameters, LatentVector};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny_arch() -> FlowArchitecture {
        FlowArchitecture {
            nx: 8,
            ny: 8,
            n_scales: 1,
            n_blocks_per_scale: 2,
            hidden_channels: 8,
        }
    }

    /// Fields strongly driven by their conditions: x = 0.8 c + 0.2 eps,
    /// both in arbitrary physical-looking units.
    fn synthetic_pairs(n: usize, seed: u64) -> Vec<(Array2<f64>, Array2<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let cond = Array2::from_shape_fn((8, 8), |_| {
                    10.0 + 4.0 * rng.sample::<f64, _>(StandardNormal)
                });
                let x = cond.mapv(|c| {
                    0.8 * (c - 10.0) + 0.2 * 4.0 * rng.sample::<f64, _>(StandardNormal) + 50.0
                });
                (x, cond)
            })
            .collect()
    }

    fn quick_opt(epochs: usize) -> OptimizerConfig {
        OptimizerConfig {
            epochs,
            ..OptimizerConfig::default()
        }
    }

    fn normalized(params: &FlowParameters, pairs: &[(Array2<f64>, Array2<f64>)]) -> Vec<(Array2<f64>, Array2<f64>)> {
        pairs
            .iter()
            .map(|(x, c)| (params.normalize_field(x), params.normalize_condition(c)))
            .collect()
    }

    #[test]
    fn training_loss_decreases_over_the_first_three_epochs() {
        let train_pairs = synthetic_pairs(48, 10);
        let val_pairs = synthetic_pairs(12, 11);
        let out = train(tiny_arch(), &train_pairs, &val_pairs, &quick_opt(4), 99).unwrap();
        assert!(!out.aborted);
        assert_eq!(out.log.len(), 4);
        assert!(out.log[0].train_loss > out.log[1].train_loss);
        assert!(out.log[1].train_loss > out.log[2].train_loss);
        assert!(out.log.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));
        let mut last = 0.0;
        for e in &out.log {
            assert!(e.wall_seconds >= last);
            last = e.wall_seconds;
        }
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let train_pairs = synthetic_pairs(24, 20);
        let val_pairs = synthetic_pairs(8, 21);
        let a = train(tiny_arch(), &train_pairs, &val_pairs, &quick_opt(3), 7).unwrap();
        let b = train(tiny_arch(), &train_pairs, &val_pairs, &quick_opt(3), 7).unwrap();
        assert_eq!(a.params, b.params);
        let losses = |o: &TrainOutcome| -> Vec<(f64, f64)> {
            o.log.iter().map(|e| (e.train_loss, e.val_loss)).collect()
        };
        assert_eq!(losses(&a), losses(&b));
        let c = train(tiny_arch(), &train_pairs, &val_pairs, &quick_opt(3), 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn trained_flow_prefers_matched_conditions_over_shuffled_ones() {
        let train_pairs = synthetic_pairs(64, 30);
        let val_pairs = synthetic_pairs(16, 31);
        let out = train(tiny_arch(), &train_pairs, &val_pairs, &quick_opt(12), 5).unwrap();
        let matched = normalized(&out.params, &val_pairs);
        let mut rotated = matched.clone();
        let first_cond = rotated[0].1.clone();
        for k in 0..rotated.len() - 1 {
            rotated[k].1 = rotated[k + 1].1.clone();
        }
        let last = rotated.len() - 1;
        rotated[last].1 = first_cond;
        let l_matched = loss(&out.params, &matched).unwrap();
        let l_rotated = loss(&out.params, &rotated).unwrap();
        assert!(
            l_matched + 1.0 < l_rotated,
            "matched {l_matched:.3} should beat shuffled {l_rotated:.3}"
        );
    }

    #[test]
    fn more_training_data_does_not_hurt_validation_loss() {
        let val_pairs = synthetic_pairs(16, 41);
        let mut small = Vec::new();
        let mut large = Vec::new();
        for seed in 0..3u64 {
            let pool = synthetic_pairs(64, 100 + seed);
            let s = train(tiny_arch(), &pool[..16], &val_pairs, &quick_opt(8), seed).unwrap();
            let l = train(tiny_arch(), &pool[..64], &val_pairs, &quick_opt(8), seed).unwrap();
            small.push(s.log.last().unwrap().val_loss);
            large.push(l.log.last().unwrap().val_loss);
        }
        small.sort_by(f64::total_cmp);
        large.sort_by(f64::total_cmp);
        assert!(
            large[1] <= small[1] + 0.5,
            "median val loss grew with more data: {:?} vs {:?}",
            large,
            small
        );
    }

    #[test]
    fn actnorm_initialization_standardizes_the_first_batch() {
        let train_pairs = synthetic_pairs(16, 50);
        let val_pairs = synthetic_pairs(4, 51);
        let out = train(tiny_arch(), &train_pairs, &val_pairs, &quick_opt(1), 3).unwrap();
        for blocks in &out.params.scales {
            for b in blocks {
                assert!(b.norm.initialized);
            }
        }
    }

    #[test]
    fn divergent_training_aborts_with_the_last_good_snapshot() {
        let train_pairs = synthetic_pairs(24, 60);
        let val_pairs = synthetic_pairs(8, 61);
        let opt = OptimizerConfig {
            learning_rate: 1e18,
            epochs: 30,
            grad_clip: None,
            ..OptimizerConfig::default()
        };
        let out = train(tiny_arch(), &train_pairs, &val_pairs, &opt, 1).unwrap();
        assert!(out.aborted);
        let probe = normalized(&out.params, &val_pairs);
        assert!(loss(&out.params, &probe).unwrap().is_finite());
    }

    #[test]
    fn best_validation_snapshot_is_returned() {
        let train_pairs = synthetic_pairs(32, 70);
        let val_pairs = synthetic_pairs(8, 71);
        let out = train(tiny_arch(), &train_pairs, &val_pairs, &quick_opt(6), 9).unwrap();
        let best_logged = out
            .log
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        let probe = normalized(&out.params, &val_pairs);
        let actual = loss(&out.params, &probe).unwrap();
        assert!((actual - best_logged).abs() < 1e-9);
        assert_eq!(out.log[out.best_epoch].val_loss, best_logged);
    }

    #[test]
    fn sampling_from_a_trained_flow_tracks_the_condition() {
        let train_pairs = synthetic_pairs(64, 80);
        let val_pairs = synthetic_pairs(16, 81);
        let out = train(tiny_arch(), &train_pairs, &val_pairs, &quick_opt(12), 13).unwrap();
        let params = &out.params;
        let probe = synthetic_pairs(4, 82);
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for (truth, cond) in &probe {
            let cn = params.normalize_condition(cond);
            let mut mean = Array2::<f64>::zeros((8, 8));
            let n_draws = 16;
            for _ in 0..n_draws {
                let z = LatentVector::standard_normal(params.arch.latent_dim(), &mut rng);
                let xn = crate::flow::inverse_sample(params, &z, &cn).unwrap();
                mean = mean + params.denormalize_field(&xn);
            }
            mean /= n_draws as f64;
            let err = (&mean - truth).mapv(f64::abs).mean().unwrap();
            let marginal_err = (truth - 50.0).mapv(f64::abs).mean().unwrap();
            assert!(
                err < marginal_err,
                "posterior mean error {err:.3} vs marginal spread {marginal_err:.3}"
            );
        }
        let m = forward_normalize(params, &params.normalize_field(&probe[0].0), &params.normalize_condition(&probe[0].1)).unwrap();
        assert!(m.log_det.is_finite());
    }
}
