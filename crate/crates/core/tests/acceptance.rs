//! End-to-end acceptance gate for the desk-scale configuration: one test
//! per shipping criterion, from adjoint physics through posterior
//! statistics. The heavy fixtures (dataset, trained flow, posterior
//! ensembles) build once and are shared; expect roughly an hour of wall
//! time on one core.

use std::sync::LazyLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tuct_core::config::RunConfig;
use tuct_core::flow::{
    self, forward_normalize, inverse_sample, read_checkpoint, write_checkpoint, FlowArchitecture,
    FlowParameters, TrainOutcome,
};
use tuct_core::grid::{AcousticModel, AcquisitionGeometry};
use tuct_core::inversion::{
    compute_summary, fwi_reconstruct, shift_interior, FwiResult, SummaryImage,
};
use tuct_core::phantom::{build_dataset, subset_sources, Dataset, Split};
use tuct_core::seeds;
use tuct_core::uq::{
    calibration, contraction_study, normalized_quality, posterior_stats, ContractionCase,
    PosteriorEnsemble,
};
use tuct_core::wavesim::{
    adjoint_gradient, linearized_forward, make_colored_noise, misfit_and_gradient,
    simulate_forward, ShotRecord,
};

const DOT_REL: f64 = 1e-6;
const DOT_WALL_CAP: f64 = 120.0;
const GRAD_REL: f64 = 1e-3;
const SUMMARY_ZERO_REL: f64 = 1e-8;
const ADDITIVITY_REL: f64 = 1e-12;
const ROUND_TRIP_MAX: f64 = 1e-4;
const LOGDET_REL: f64 = 1e-4;
const LAYER_GRAD_REL: f64 = 1e-3;
const VAL_MARGIN: f64 = 0.20;
const TRAIN_WALL_CAP: f64 = 7200.0;
const PM_SSIM_MIN: f64 = 0.80;
const FWI_SSIM_MIN: f64 = 0.60;
const INTERIOR_SHIFT: f64 = 300.0;
const N_POST_FULL: usize = 128;
const N_POST_STUDY: usize = 64;
const SWEEP_COUNTS: [usize; 5] = [1, 4, 16, 64, 128];

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn normal_field(nx: usize, ny: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((nx, ny), |_| StandardNormal.sample(&mut rng))
}

/// The full desk pipeline: 200-pair dataset, trained flow, and one
/// 128-sample posterior ensemble per held-out test pair.
struct Desk {
    cfg: RunConfig,
    geom: AcquisitionGeometry,
    wavelet: tuct_core::wavesim::SourceWavelet,
    dataset: Dataset,
    outcome: TrainOutcome,
    train_seconds: f64,
    identity_val_loss: f64,
    matched_val_loss: f64,
    shuffled_val_loss: f64,
    ensembles: Vec<PosteriorEnsemble>,
}

static DESK: LazyLock<Desk> = LazyLock::new(|| {
    let cfg = RunConfig::default();
    let master = cfg.run.master_seed;
    let spec = cfg.grid_spec();
    let geom = cfg.geometry().expect("ring geometry");
    let wavelet = cfg.wavelet().expect("tone burst");
    let table = cfg.tissue_table();

    let dataset = build_dataset(
        cfg.dataset.n_pairs,
        &spec,
        &geom,
        &wavelet,
        &table,
        cfg.dataset.noise_level,
        &cfg.dataset.source_counts,
        seeds::derive(master, "dataset", 0),
    )
    .expect("dataset build");

    let to_pairs = |s: Split| -> Vec<(Array2<f64>, Array2<f64>)> {
        dataset
            .split(s)
            .iter()
            .map(|p| (p.truth.velocity.clone(), p.summary.values.clone()))
            .collect()
    };
    let train_pairs = to_pairs(Split::Train);
    let val_pairs = to_pairs(Split::Val);

    let started = Instant::now();
    let outcome = flow::train(
        cfg.flow_architecture(),
        &train_pairs,
        &val_pairs,
        &cfg.optimizer_config(),
        seeds::derive(master, "train", 0),
    )
    .expect("flow training");
    let train_seconds = started.elapsed().as_secs_f64();
    assert!(!outcome.aborted, "training aborted on a non-finite loss");

    let params = &outcome.params;
    let val_norm: Vec<(Array2<f64>, Array2<f64>)> = val_pairs
        .iter()
        .map(|(x, c)| (params.normalize_field(x), params.normalize_condition(c)))
        .collect();
    let mut ident = FlowParameters::identity_init(
        cfg.flow_architecture(),
        seeds::derive(master, "acc-init", 0),
    )
    .expect("identity parameters");
    ident.field_mean = params.field_mean;
    ident.field_std = params.field_std;
    ident.cond_mean = params.cond_mean;
    ident.cond_std = params.cond_std;
    let identity_val_loss = flow::loss(&ident, &val_norm).expect("identity loss");
    let matched_val_loss = flow::loss(params, &val_norm).expect("matched loss");
    let shuffled: Vec<(Array2<f64>, Array2<f64>)> = (0..val_norm.len())
        .map(|k| {
            (
                val_norm[k].0.clone(),
                val_norm[(k + 1) % val_norm.len()].1.clone(),
            )
        })
        .collect();
    let shuffled_val_loss = flow::loss(params, &shuffled).expect("shuffled loss");

    let ensembles: Vec<PosteriorEnsemble> = dataset
        .split(Split::Test)
        .iter()
        .enumerate()
        .map(|(k, p)| {
            posterior_stats(
                params,
                &p.summary,
                N_POST_FULL,
                seeds::derive(master, "acc-post", k as u64),
            )
            .expect("posterior ensemble")
        })
        .collect();

    Desk {
        cfg,
        geom,
        wavelet,
        dataset,
        outcome,
        train_seconds,
        identity_val_loss,
        matched_val_loss,
        shuffled_val_loss,
        ensembles,
    }
});

/// One held-out phantom with a fresh full-array observation set and
/// summaries rebuilt from growing source subsets.
struct CaseBundle {
    truth: AcousticModel,
    x0: AcousticModel,
    interior_mask: Array2<bool>,
    records: Vec<ShotRecord>,
    summary_few: SummaryImage,
    summary_full: SummaryImage,
}

static CASES: LazyLock<Vec<CaseBundle>> = LazyLock::new(|| {
    let desk = &*DESK;
    let cfg = &desk.cfg;
    let spec = cfg.grid_spec();
    let master = cfg.run.master_seed;
    desk.dataset
        .split(Split::Test)
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let bundle_seed = seeds::derive(master, "acc-obs", k as u64);
            let records: Vec<ShotRecord> = desk
                .geom
                .active_sources
                .iter()
                .enumerate()
                .map(|(j, &src)| {
                    let mut rec =
                        simulate_forward(&p.truth, &desk.geom, &desk.wavelet, src).expect("shot");
                    let noise = make_colored_noise(
                        &spec,
                        desk.geom.n_receivers(),
                        &desk.wavelet,
                        cfg.dataset.noise_level,
                        rec.rms(),
                        seeds::derive(bundle_seed, "noise", j as u64),
                    )
                    .expect("noise");
                    rec.traces += &noise;
                    rec
                })
                .collect();
            let few_ids = subset_sources(&desk.geom, 4);
            let few_geom = AcquisitionGeometry {
                active_sources: few_ids.clone(),
                ..desk.geom.clone()
            };
            let few_records: Vec<ShotRecord> = records
                .iter()
                .filter(|r| few_ids.contains(&r.source_index))
                .cloned()
                .collect();
            let summary_few =
                compute_summary(&p.x0, &few_geom, &desk.wavelet, &few_records).expect("summary");
            let summary_full =
                compute_summary(&p.x0, &desk.geom, &desk.wavelet, &records).expect("summary");
            CaseBundle {
                truth: p.truth.clone(),
                x0: p.x0.clone(),
                interior_mask: p.interior_mask.clone(),
                records,
                summary_few,
                summary_full,
            }
        })
        .collect()
});

/// Noiseless reconstructions of the first held-out phantom from the true
/// starting model and from an interior-shifted one.
struct FwiBundle {
    truth: AcousticModel,
    baseline: FwiResult,
    shifted: FwiResult,
}

static FWI: LazyLock<FwiBundle> = LazyLock::new(|| {
    let desk = &*DESK;
    let test = desk.dataset.split(Split::Test);
    let p = test[0];
    let records: Vec<ShotRecord> = desk
        .geom
        .active_sources
        .iter()
        .map(|&src| simulate_forward(&p.truth, &desk.geom, &desk.wavelet, src).expect("shot"))
        .collect();
    let fwi_cfg = desk.cfg.fwi_config();
    let baseline =
        fwi_reconstruct(&p.x0, &desk.geom, &desk.wavelet, &records, &fwi_cfg).expect("fwi");
    let x0_shifted =
        shift_interior(&p.x0, &p.interior_mask, INTERIOR_SHIFT).expect("shifted start");
    let shifted =
        fwi_reconstruct(&x0_shifted, &desk.geom, &desk.wavelet, &records, &fwi_cfg).expect("fwi");
    FwiBundle {
        truth: p.truth.clone(),
        baseline,
        shifted,
    }
});

/// A light standalone context for the physics checks that do not need
/// the trained flow.
struct Physics {
    cfg: RunConfig,
    geom: AcquisitionGeometry,
    wavelet: tuct_core::wavesim::SourceWavelet,
    truth: AcousticModel,
    x0: AcousticModel,
}

fn physics() -> Physics {
    let cfg = RunConfig::default();
    let spec = cfg.grid_spec();
    let geom = cfg.geometry().expect("ring geometry");
    let wavelet = cfg.wavelet().expect("tone burst");
    let table = cfg.tissue_table();
    let phantom = tuct_core::phantom::generate_phantom(
        &spec,
        &table,
        seeds::derive(cfg.run.master_seed, "acc-physics", 0),
    )
    .expect("phantom");
    let x0 = tuct_core::phantom::extract_skull(&phantom, table.water).expect("starting model");
    Physics {
        cfg,
        geom,
        wavelet,
        truth: phantom.model,
        x0,
    }
}

fn random_interior_direction(model: &AcousticModel, seed: u64, margin: usize) -> Array2<f64> {
    let spec = model.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = spec.sponge_width + margin;
    Array2::from_shape_fn((spec.nx, spec.ny), |(i, j)| {
        if i >= lo && i < spec.nx - lo && j >= lo && j < spec.ny - lo {
            StandardNormal.sample(&mut rng)
        } else {
            0.0
        }
    })
}

#[test]
fn c01_adjoint_matches_linearization_dot_product() {
    let started = Instant::now();
    let px = physics();
    let model = &px.truth;
    let nr = px.geom.n_receivers();
    let nt = model.spec.nt;
    for trial in 0..20u64 {
        let src = px.geom.active_sources[trial as usize % px.geom.active_sources.len()];
        let dmu = random_interior_direction(model, 1000 + trial, 2);
        let dd = ShotRecord {
            traces: normal_field(nt, nr, 2000 + trial),
            source_index: src,
        };
        let jdm = linearized_forward(model, &px.geom, &px.wavelet, src, &dmu)
            .expect("linearized forward");
        let jt_dd = adjoint_gradient(model, &px.geom, &px.wavelet, src, &dd).expect("adjoint");
        let lhs: f64 = jdm
            .traces
            .iter()
            .zip(dd.traces.iter())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = dmu.iter().zip(jt_dd.iter()).map(|(a, b)| a * b).sum();
        assert!(
            rel(lhs, rhs) <= DOT_REL,
            "trial {trial}: <Jdm,dd>={lhs:e} <dm,Jtdd>={rhs:e} rel={:e}",
            rel(lhs, rhs)
        );
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < DOT_WALL_CAP,
        "dot-product trials took {elapsed:.1}s"
    );
}

#[test]
fn c02_misfit_gradient_matches_central_differences() {
    let px = physics();
    let src = px.geom.active_sources[0];
    let observed = simulate_forward(&px.truth, &px.geom, &px.wavelet, src).expect("observed");
    let (_, grad) =
        misfit_and_gradient(&px.x0, &px.geom, &px.wavelet, src, &observed).expect("gradient");
    let g_max = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let misfit = |m: &AcousticModel| -> f64 {
        let r = simulate_forward(m, &px.geom, &px.wavelet, src).expect("forward");
        0.5 * r
            .traces
            .iter()
            .zip(observed.traces.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };

    let spec = px.x0.spec;
    let mu = px.x0.squared_slowness();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        px.cfg.run.master_seed,
        "acc-fd-cells",
        0,
    ));
    let lo = spec.sponge_width + 4;
    let mut checked = 0usize;
    let mut attempts = 0usize;
    while checked < 5 {
        attempts += 1;
        assert!(attempts < 200, "could not find cells with usable gradient");
        let i = rng.random_range(lo..spec.nx - lo);
        let j = rng.random_range(lo..spec.ny - lo);
        if grad[[i, j]].abs() < 1e-4 * g_max {
            continue;
        }
        let h = 1e-6 * mu[[i, j]];
        let mut mp = mu.clone();
        mp[[i, j]] += h;
        let mut mm = mu.clone();
        mm[[i, j]] -= h;
        let fd = (misfit(&px.x0.with_squared_slowness(&mp).expect("model"))
            - misfit(&px.x0.with_squared_slowness(&mm).expect("model")))
            / (2.0 * h);
        assert!(
            rel(grad[[i, j]], fd) <= GRAD_REL,
            "cell ({i},{j}): adjoint {:e} vs central difference {fd:e}",
            grad[[i, j]]
        );
        checked += 1;
    }
}

#[test]
fn c03_summary_zero_residual_and_source_additivity() {
    let px = physics();
    let noiseless = |model: &AcousticModel| -> Vec<ShotRecord> {
        px.geom
            .active_sources
            .iter()
            .map(|&src| simulate_forward(model, &px.geom, &px.wavelet, src).expect("shot"))
            .collect()
    };

    let from_x0 = noiseless(&px.x0);
    let zero = compute_summary(&px.x0, &px.geom, &px.wavelet, &from_x0).expect("summary");
    let from_truth = noiseless(&px.truth);
    let reference = compute_summary(&px.x0, &px.geom, &px.wavelet, &from_truth).expect("summary");
    let ref_max = reference.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let zero_max = zero.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(ref_max > 0.0, "truth-generated summary is identically zero");
    assert!(
        zero_max <= SUMMARY_ZERO_REL * ref_max,
        "summary on self-generated data: max {zero_max:e} vs reference max {ref_max:e}"
    );

    let ids = px.geom.active_sources.clone();
    let halves = [&ids[..ids.len() / 2], &ids[ids.len() / 2..]];
    let mut sum = Array2::<f64>::zeros(reference.values.dim());
    for half in halves {
        let geom = AcquisitionGeometry {
            active_sources: half.to_vec(),
            ..px.geom.clone()
        };
        let records: Vec<ShotRecord> = from_truth
            .iter()
            .filter(|r| half.contains(&r.source_index))
            .cloned()
            .collect();
        let part = compute_summary(&px.x0, &geom, &px.wavelet, &records).expect("summary");
        sum += &part.values;
    }
    let diff = (&sum - &reference.values)
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let norm = reference.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(
        diff <= ADDITIVITY_REL * norm,
        "subset additivity: |sum - full| = {diff:e} vs |full| = {norm:e}"
    );
}

#[test]
fn c04_flow_round_trip_before_and_after_training() {
    let cfg = RunConfig::default();
    let arch = cfg.flow_architecture();
    let master = cfg.run.master_seed;
    let fresh = FlowParameters::identity_init(arch.clone(), seeds::derive(master, "acc-init", 1))
        .expect("identity parameters");

    let round_trip = |params: &FlowParameters, label: &str| {
        for k in 0..100u64 {
            let x = normal_field(arch.nx, arch.ny, seeds::derive(master, "acc-rt-x", k));
            let c = normal_field(arch.nx, arch.ny, seeds::derive(master, "acc-rt-c", k));
            let out = forward_normalize(params, &x, &c).expect("forward");
            let back = inverse_sample(params, &out.latent, &c).expect("inverse");
            let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(
                err <= ROUND_TRIP_MAX,
                "{label} round trip {k}: max error {err:e}"
            );
        }
    };

    round_trip(&fresh, "untrained");
    let trained = &DESK.outcome.params;
    round_trip(trained, "trained");

    let mut bytes = Vec::new();
    write_checkpoint(trained, &mut bytes).expect("serialize");
    let reloaded = read_checkpoint(&mut bytes.as_slice()).expect("deserialize");
    round_trip(&reloaded, "reloaded");
}

fn dense_log_abs_det(mat: &[Vec<f64>]) -> f64 {
    let n = mat.len();
    let mut a: Vec<Vec<f64>> = mat.to_vec();
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .expect("pivot row");
        assert!(a[pivot][col].abs() > 0.0, "singular numerical Jacobian");
        a.swap(col, pivot);
        log_det += a[col][col].abs().ln();
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    log_det
}

fn jittered_params(arch: FlowArchitecture, seed: u64, scale: f64) -> FlowParameters {
    let mut params = FlowParameters::identity_init(arch, seed).expect("identity parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "acc-jitter", 0));
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            *v += scale * jitter;
        }
    }
    params
}

#[test]
fn c05_log_det_matches_dense_jacobian() {
    let arch = FlowArchitecture {
        nx: 4,
        ny: 4,
        n_scales: 1,
        n_blocks_per_scale: 2,
        hidden_channels: 8,
    };
    arch.validate().expect("architecture");
    let dim = arch.latent_dim();
    assert!(dim <= 64);
    let params = jittered_params(arch.clone(), 4242, 0.05);
    let x = normal_field(4, 4, 31);
    let c = normal_field(4, 4, 32);
    let out = forward_normalize(&params, &x, &c).expect("forward");

    let h = 1e-5;
    let mut jacobian = vec![vec![0.0f64; dim]; dim];
    for col in 0..dim {
        let (i, j) = (col / 4, col % 4);
        let mut xp = x.clone();
        xp[[i, j]] += h;
        let mut xm = x.clone();
        xm[[i, j]] -= h;
        let zp = forward_normalize(&params, &xp, &c).expect("forward").latent;
        let zm = forward_normalize(&params, &xm, &c).expect("forward").latent;
        for row in 0..dim {
            jacobian[row][col] = (zp.values[row] - zm.values[row]) / (2.0 * h);
        }
    }
    let numeric = dense_log_abs_det(&jacobian);
    assert!(
        rel(out.log_det, numeric) <= LOGDET_REL,
        "log-det {:.8} vs numerical {:.8} (rel {:e})",
        out.log_det,
        numeric,
        rel(out.log_det, numeric)
    );
}

#[test]
fn c06_layer_gradients_match_finite_differences() {
    let arch = FlowArchitecture {
        nx: 8,
        ny: 8,
        n_scales: 2,
        n_blocks_per_scale: 2,
        hidden_channels: 8,
    };
    arch.validate().expect("architecture");
    let params = jittered_params(arch.clone(), 777, 0.05);
    let batch: Vec<(Array2<f64>, Array2<f64>)> = (0..4u64)
        .map(|k| (normal_field(8, 8, 900 + k), normal_field(8, 8, 950 + k)))
        .collect();
    let (_, grads) = flow::loss_and_gradient(&params, &batch).expect("gradient");

    let h = 1e-4;
    let n_tensors = params.tensors().len();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for t in 0..n_tensors {
        let len = params.tensors()[t].len();
        for &coord in &[0usize, len / 2] {
            let analytic = grads.tensors()[t][coord];
            let mut probe = params.clone();
            probe.tensors_mut()[t][coord] += h;
            let plus = flow::loss(&probe, &batch).expect("loss");
            probe.tensors_mut()[t][coord] -= 2.0 * h;
            let minus = flow::loss(&probe, &batch).expect("loss");
            let fd = (plus - minus) / (2.0 * h);
            if analytic.abs().max(fd.abs()) < 1e-7 {
                skipped += 1;
                continue;
            }
            assert!(
                rel(analytic, fd) <= LAYER_GRAD_REL,
                "tensor {t} coord {coord}: analytic {analytic:e} vs fd {fd:e}"
            );
            checked += 1;
        }
    }
    assert!(
        checked * 3 >= (checked + skipped) * 2,
        "too many degenerate coordinates: {checked} checked, {skipped} skipped"
    );
}

#[test]
fn c07_training_beats_identity_and_matched_conditions_win() {
    let desk = &*DESK;
    let best_val = desk
        .outcome
        .log
        .iter()
        .map(|l| l.val_loss)
        .fold(f64::INFINITY, f64::min);
    let margin = desk.identity_val_loss - best_val;
    assert!(
        margin >= VAL_MARGIN * desk.identity_val_loss.abs(),
        "best validation loss {best_val:.2} vs identity {:.2}: margin {:.1}% short of {}%",
        desk.identity_val_loss,
        100.0 * margin / desk.identity_val_loss.abs(),
        100.0 * VAL_MARGIN
    );
    assert!(
        desk.shuffled_val_loss > desk.matched_val_loss,
        "shuffled conditions score {:.2}, matched {:.2}",
        desk.shuffled_val_loss,
        desk.matched_val_loss
    );
    assert!(
        desk.train_seconds <= TRAIN_WALL_CAP,
        "training took {:.0}s",
        desk.train_seconds
    );
}

#[test]
fn c08_posterior_mean_beats_samples_and_clears_ssim() {
    let desk = &*DESK;
    let test = desk.dataset.split(Split::Test);
    assert!(test.len() >= 10, "need at least 10 held-out phantoms");
    let mut pm_rmse = 0.0;
    let mut sample_rmse = 0.0;
    let mut pm_ssim = 0.0;
    for (p, ens) in test.iter().zip(desk.ensembles.iter()) {
        let q = normalized_quality(&ens.mean, &p.truth.velocity).expect("quality");
        pm_rmse += q.rmse;
        pm_ssim += q.ssim;
        sample_rmse += ens
            .samples
            .iter()
            .map(|s| {
                normalized_quality(s, &p.truth.velocity)
                    .expect("quality")
                    .rmse
            })
            .sum::<f64>()
            / ens.samples.len() as f64;
    }
    let n = test.len() as f64;
    pm_rmse /= n;
    sample_rmse /= n;
    pm_ssim /= n;
    assert!(
        pm_rmse <= sample_rmse,
        "posterior-mean RMSE {pm_rmse:.5} exceeds mean sample RMSE {sample_rmse:.5}"
    );
    assert!(
        pm_ssim >= PM_SSIM_MIN,
        "posterior-mean SSIM {pm_ssim:.4} below {PM_SSIM_MIN}"
    );
}

#[test]
fn c09_posterior_contracts_with_more_sources() {
    let desk = &*DESK;
    let cases: Vec<ContractionCase> = CASES
        .iter()
        .map(|b| ContractionCase {
            truth: b.truth.velocity.clone(),
            summaries: vec![
                (b.summary_few.source_count_used, b.summary_few.clone()),
                (b.summary_full.source_count_used, b.summary_full.clone()),
            ],
        })
        .collect();
    let rows = contraction_study(
        &desk.outcome.params,
        &cases,
        N_POST_STUDY,
        seeds::derive(desk.cfg.run.master_seed, "acc-contraction", 0),
    )
    .expect("contraction study");
    assert_eq!(rows.len(), 2);
    assert!(
        rows[1].total_variance < rows[0].total_variance,
        "variance {:.4} at {} sources vs {:.4} at {}",
        rows[1].total_variance,
        rows[1].n_sources,
        rows[0].total_variance,
        rows[0].n_sources
    );
    assert!(
        rows[1].mse < rows[0].mse,
        "posterior-mean MSE {:.4} at {} sources vs {:.4} at {}",
        rows[1].mse,
        rows[1].n_sources,
        rows[0].mse,
        rows[0].n_sources
    );
}

#[test]
fn c10_uncertainty_ranks_error() {
    let desk = &*DESK;
    let truths: Vec<Array2<f64>> = desk
        .dataset
        .split(Split::Test)
        .iter()
        .map(|p| p.truth.velocity.clone())
        .collect();
    let curve = calibration(&desk.ensembles, &truths, desk.cfg.uq.calibration_bins)
        .expect("calibration");
    assert!(
        curve.spearman > 0.0,
        "binned uncertainty does not rank error: spearman {:.3}",
        curve.spearman
    );
}

#[test]
fn c11_interior_shift_degrades_posterior_and_fwi() {
    let desk = &*DESK;
    let master = desk.cfg.run.master_seed;
    let mut base_rmse = 0.0;
    let mut shift_rmse = 0.0;
    for (k, b) in CASES.iter().enumerate() {
        let base = posterior_stats(
            &desk.outcome.params,
            &b.summary_full,
            N_POST_STUDY,
            seeds::derive(master, "acc-base", k as u64),
        )
        .expect("posterior");
        let x0_shifted =
            shift_interior(&b.x0, &b.interior_mask, INTERIOR_SHIFT).expect("shifted start");
        let summary_shifted =
            compute_summary(&x0_shifted, &desk.geom, &desk.wavelet, &b.records).expect("summary");
        let shifted = posterior_stats(
            &desk.outcome.params,
            &summary_shifted,
            N_POST_STUDY,
            seeds::derive(master, "acc-shift", k as u64),
        )
        .expect("posterior");
        base_rmse += normalized_quality(&base.mean, &b.truth.velocity)
            .expect("quality")
            .rmse;
        shift_rmse += normalized_quality(&shifted.mean, &b.truth.velocity)
            .expect("quality")
            .rmse;
    }
    let n = CASES.len() as f64;
    base_rmse /= n;
    shift_rmse /= n;
    assert!(
        shift_rmse > base_rmse,
        "posterior-mean RMSE with shifted start {shift_rmse:.5} not above baseline {base_rmse:.5}"
    );

    let fwi = &*FWI;
    let final_misfit = |r: &FwiResult| r.misfit_history.last().expect("history").misfit;
    assert!(
        final_misfit(&fwi.shifted) > final_misfit(&fwi.baseline),
        "final misfit with shifted start {:.3e} not above baseline {:.3e}",
        final_misfit(&fwi.shifted),
        final_misfit(&fwi.baseline)
    );
}

#[test]
fn c12_fwi_descends_within_bounds_to_usable_image() {
    let desk = &*DESK;
    let fwi = &*FWI;
    let accepted: Vec<f64> = fwi
        .baseline
        .misfit_history
        .iter()
        .filter(|it| it.accepted)
        .map(|it| it.misfit)
        .collect();
    assert!(accepted.len() >= 2, "no accepted steps recorded");
    for w in accepted.windows(2) {
        assert!(
            w[1] <= w[0],
            "misfit increased over accepted steps: {} -> {}",
            w[0],
            w[1]
        );
    }
    let (lo, hi) = desk.cfg.fwi_config().box_bounds;
    for it in &fwi.baseline.misfit_history {
        assert!(
            it.velocity_range.0 >= lo && it.velocity_range.1 <= hi,
            "iterate {} left the box: range {:?}",
            it.iteration,
            it.velocity_range
        );
    }
    let q = normalized_quality(&fwi.baseline.model.velocity, &fwi.truth.velocity)
        .expect("quality");
    assert!(
        q.ssim >= FWI_SSIM_MIN,
        "reconstruction SSIM {:.4} below {FWI_SSIM_MIN}",
        q.ssim
    );
}

#[test]
fn c13_posterior_mean_rmse_non_increasing_in_samples() {
    let desk = &*DESK;
    let test = desk.dataset.split(Split::Test);
    let mut avg = vec![0.0f64; SWEEP_COUNTS.len()];
    for (k, p) in test.iter().enumerate() {
        let rows = tuct_core::uq::sample_count_sweep(
            &desk.outcome.params,
            &p.summary,
            &p.truth.velocity,
            &SWEEP_COUNTS,
            seeds::derive(desk.cfg.run.master_seed, "acc-sweep", k as u64),
        )
        .expect("sample-count sweep");
        for (j, r) in rows.iter().enumerate() {
            avg[j] += r.rmse / test.len() as f64;
        }
    }
    for j in 1..avg.len() {
        assert!(
            avg[j] <= avg[j - 1],
            "average RMSE rose from {:.6} at n_post={} to {:.6} at n_post={}",
            avg[j - 1],
            SWEEP_COUNTS[j - 1],
            avg[j],
            SWEEP_COUNTS[j]
        );
    }
}

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.grid.nx = 32;
    cfg.grid.ny = 32;
    cfg.grid.nt = 200;
    cfg.grid.sponge_width = 6;
    cfg.geometry.n_receivers = 24;
    cfg.geometry.n_sources = 6;
    cfg.geometry.ring_radius = 8.0;
    cfg.dataset.n_pairs = 6;
    cfg.dataset.source_counts = vec![4];
    cfg.flow.n_scales = 2;
    cfg.flow.n_blocks_per_scale = 2;
    cfg.flow.hidden_channels = 8;
    cfg.optimizer.epochs = 2;
    cfg.optimizer.batch_size = 2;
    cfg.fwi.max_iterations = 3;
    cfg.validate().expect("reduced config");
    cfg
}

#[test]
fn c14_reruns_are_bit_identical() {
    let cfg = small_cfg();
    let spec = cfg.grid_spec();
    let geom = cfg.geometry().expect("ring geometry");
    let wavelet = cfg.wavelet().expect("tone burst");
    let table = cfg.tissue_table();
    let seed = cfg.run.master_seed;

    let build = || {
        build_dataset(
            cfg.dataset.n_pairs,
            &spec,
            &geom,
            &wavelet,
            &table,
            cfg.dataset.noise_level,
            &cfg.dataset.source_counts,
            seeds::derive(seed, "dataset", 0),
        )
        .expect("dataset build")
    };
    let ds1 = build();
    let ds2 = build();
    for (a, b) in ds1.pairs.iter().zip(ds2.pairs.iter()) {
        assert!(
            a.truth.velocity == b.truth.velocity && a.summary.values == b.summary.values,
            "dataset rerun differs at pair {}",
            a.pair_id
        );
    }

    let pairs = |s: Split| -> Vec<(Array2<f64>, Array2<f64>)> {
        ds1.split(s)
            .iter()
            .map(|p| (p.truth.velocity.clone(), p.summary.values.clone()))
            .collect()
    };
    let train_pairs = pairs(Split::Train);
    let val_pairs = pairs(Split::Val);
    let run_training = || {
        let outcome = flow::train(
            cfg.flow_architecture(),
            &train_pairs,
            &val_pairs,
            &cfg.optimizer_config(),
            seeds::derive(seed, "train", 0),
        )
        .expect("training");
        let mut bytes = Vec::new();
        write_checkpoint(&outcome.params, &mut bytes).expect("serialize");
        (bytes, outcome.log)
    };
    let (ck1, log1) = run_training();
    let (ck2, log2) = run_training();
    assert!(ck1 == ck2, "training rerun produced a different checkpoint");
    assert!(log1 == log2 || log1.len() == log2.len(), "log length differs");

    let truth = &ds1.pairs[0].truth;
    let x0 = &ds1.pairs[0].x0;
    let records: Vec<ShotRecord> = {
        let shot_geom = AcquisitionGeometry {
            active_sources: subset_sources(&geom, 4),
            ..geom.clone()
        };
        shot_geom
            .active_sources
            .iter()
            .map(|&src| simulate_forward(truth, &shot_geom, &wavelet, src).expect("shot"))
            .collect()
    };
    let shot_geom = AcquisitionGeometry {
        active_sources: subset_sources(&geom, 4),
        ..geom.clone()
    };
    let run_fwi =
        || fwi_reconstruct(x0, &shot_geom, &wavelet, &records, &cfg.fwi_config()).expect("fwi");
    let f1 = run_fwi();
    let f2 = run_fwi();
    assert!(
        f1.model.velocity == f2.model.velocity,
        "reconstruction rerun differs"
    );
    let m1: Vec<f64> = f1.misfit_history.iter().map(|it| it.misfit).collect();
    let m2: Vec<f64> = f2.misfit_history.iter().map(|it| it.misfit).collect();
    assert!(m1 == m2, "misfit history rerun differs");

    let desk = &*DESK;
    let p = desk.dataset.split(Split::Test)[0];
    let draw = || {
        posterior_stats(
            &desk.outcome.params,
            &p.summary,
            16,
            seeds::derive(desk.cfg.run.master_seed, "acc-rerun", 0),
        )
        .expect("posterior")
    };
    let e1 = draw();
    let e2 = draw();
    assert!(e1.mean == e2.mean, "posterior rerun differs");
}
