use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::time::Instant;

use ndarray::Array2;
use tuct_core::config::RunConfig;
use tuct_core::flow::{self, FlowParameters};
use tuct_core::grid::AcquisitionGeometry;
use tuct_core::inversion::compute_summary;
use tuct_core::phantom::{build_dataset, subset_sources, Split};
use tuct_core::seeds;
use tuct_core::uq::{self, posterior_stats};
use tuct_core::wavesim::{make_colored_noise, simulate_forward, ShotRecord};

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let mut cfg = RunConfig::default();
    cfg.flow.hidden_channels = env_usize("TUNE_HIDDEN", cfg.flow.hidden_channels);
    cfg.flow.n_blocks_per_scale = env_usize("TUNE_BLOCKS", cfg.flow.n_blocks_per_scale);
    cfg.flow.n_scales = env_usize("TUNE_SCALES", cfg.flow.n_scales);
    cfg.optimizer.epochs = env_usize("TUNE_EPOCHS", cfg.optimizer.epochs);
    let n_post = env_usize("TUNE_NPOST", 64);
    let master = cfg.run.master_seed;

    let spec = cfg.grid_spec();
    let geom = cfg.geometry().unwrap();
    let wavelet = cfg.wavelet().unwrap();
    let table = cfg.tissue_table();

    let t0 = Instant::now();
    let ds = build_dataset(
        cfg.dataset.n_pairs,
        &spec,
        &geom,
        &wavelet,
        &table,
        cfg.dataset.noise_level,
        &cfg.dataset.source_counts,
        seeds::derive(master, "dataset", 0),
    )
    .unwrap();
    eprintln!("dataset: {:.1}s", t0.elapsed().as_secs_f64());

    let to_pairs = |s: Split| -> Vec<(Array2<f64>, Array2<f64>)> {
        ds.split(s)
            .iter()
            .map(|p| (p.truth.velocity.clone(), p.summary.values.clone()))
            .collect()
    };
    let train_pairs = to_pairs(Split::Train);
    let val_pairs = to_pairs(Split::Val);

    let arch = cfg.flow_architecture();
    eprintln!(
        "arch: scales {} blocks {} hidden {} -> {} params",
        arch.n_scales,
        arch.n_blocks_per_scale,
        arch.hidden_channels,
        arch.param_count()
    );
    let ckpt = std::env::var("TUNE_CKPT").unwrap_or_else(|_| "/tmp/tune.nfc".into());
    let params = if std::env::var("TUNE_LOAD").is_ok() {
        let mut r = BufReader::new(File::open(&ckpt).unwrap());
        let p = flow::read_checkpoint(&mut r).unwrap();
        eprintln!("loaded checkpoint {ckpt}");
        p
    } else {
        let t1 = Instant::now();
        let outcome = flow::train(
            arch.clone(),
            &train_pairs,
            &val_pairs,
            &cfg.optimizer_config(),
            seeds::derive(master, "train", 0),
        )
        .unwrap();
        for l in &outcome.log {
            eprintln!(
                "epoch {:3} train {:10.2} val {:10.2} ({:.1}s)",
                l.epoch, l.train_loss, l.val_loss, l.wall_seconds
            );
        }
        let best_val = outcome
            .log
            .iter()
            .map(|l| l.val_loss)
            .fold(f64::INFINITY, f64::min);
        eprintln!(
            "training: {:.1}s, best epoch {}, best val {:.2}, aborted {}",
            t1.elapsed().as_secs_f64(),
            outcome.best_epoch,
            best_val,
            outcome.aborted
        );
        let mut w = BufWriter::new(File::create(&ckpt).unwrap());
        flow::write_checkpoint(&outcome.params, &mut w).unwrap();
        eprintln!("saved checkpoint {ckpt}");
        outcome.params
    };
    let params = &params;
    let best_val = flow::loss(
        params,
        &val_pairs
            .iter()
            .map(|(x, c)| (params.normalize_field(x), params.normalize_condition(c)))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let mut ident =
        FlowParameters::identity_init(arch.clone(), seeds::derive(master, "flow-init", 0)).unwrap();
    ident.field_mean = params.field_mean;
    ident.field_std = params.field_std;
    ident.cond_mean = params.cond_mean;
    ident.cond_std = params.cond_std;
    let val_norm: Vec<(Array2<f64>, Array2<f64>)> = val_pairs
        .iter()
        .map(|(x, c)| (params.normalize_field(x), params.normalize_condition(c)))
        .collect();
    let ident_loss = flow::loss(&ident, &val_norm).unwrap();
    eprintln!(
        "identity val loss {:.2}, best val {:.2}, margin {:.1}%",
        ident_loss,
        best_val,
        100.0 * (ident_loss - best_val) / ident_loss.abs()
    );

    let matched = flow::loss(params, &val_norm).unwrap();
    let shuffled_pairs: Vec<(Array2<f64>, Array2<f64>)> = (0..val_norm.len())
        .map(|k| {
            (
                val_norm[k].0.clone(),
                val_norm[(k + 1) % val_norm.len()].1.clone(),
            )
        })
        .collect();
    let shuffled = flow::loss(params, &shuffled_pairs).unwrap();
    eprintln!("matched val {matched:.2} shuffled val {shuffled:.2}");

    let test = ds.split(Split::Test);
    let t2 = Instant::now();
    let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut ensembles = Vec::new();
    let mut truths = Vec::new();
    for (k, p) in test.iter().enumerate() {
        let ens = posterior_stats(
            params,
            &p.summary,
            n_post,
            seeds::derive(master, "tune-post", k as u64),
        )
        .unwrap();
        let q = uq::normalized_quality(&ens.mean, &p.truth.velocity).unwrap();
        let q0 = uq::normalized_quality(&p.x0.velocity, &p.truth.velocity).unwrap();
        let sample_rmse = ens
            .samples
            .iter()
            .map(|s| uq::normalized_quality(s, &p.truth.velocity).unwrap().rmse)
            .sum::<f64>()
            / ens.samples.len() as f64;
        let (lo, hi) = ens.samples.iter().flat_map(|s| s.iter()).fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        );
        eprintln!(
            "test {k}: n_src {} PM ssim {:.4} rmse {:.5} | x0 ssim {:.4} rmse {:.5} | sample rmse {:.5} range [{lo:.0}, {hi:.0}]",
            p.source_count, q.ssim, q.rmse, q0.ssim, q0.rmse, sample_rmse
        );
        sums.0 += q.ssim;
        sums.1 += q.rmse;
        sums.2 += q0.ssim;
        sums.3 += q0.rmse;
        sums.4 += sample_rmse;
        truths.push(p.truth.velocity.clone());
        ensembles.push(ens);
    }
    let n = test.len() as f64;
    eprintln!(
        "TEST AVG: PM ssim {:.4} rmse {:.5} | x0 ssim {:.4} rmse {:.5} | sample rmse {:.5} ({:.1}s)",
        sums.0 / n,
        sums.1 / n,
        sums.2 / n,
        sums.3 / n,
        sums.4 / n,
        t2.elapsed().as_secs_f64()
    );

    let curve = uq::calibration(&ensembles, &truths, cfg.uq.calibration_bins).unwrap();
    eprintln!("calibration spearman {:.3}", curve.spearman);

    let t3 = Instant::now();
    let mut pooled = [(0.0, 0.0), (0.0, 0.0)];
    for (k, p) in test.iter().take(5).enumerate() {
        let bundle_seed = seeds::derive(master, "tune-obs", k as u64);
        let records: Vec<ShotRecord> = geom
            .active_sources
            .iter()
            .enumerate()
            .map(|(j, &src)| {
                let mut rec = simulate_forward(&p.truth, &geom, &wavelet, src).unwrap();
                let noise = make_colored_noise(
                    &spec,
                    geom.n_receivers(),
                    &wavelet,
                    cfg.dataset.noise_level,
                    rec.rms(),
                    seeds::derive(bundle_seed, "noise", j as u64),
                )
                .unwrap();
                rec.traces += &noise;
                rec
            })
            .collect();
        for (slot, n_src) in [(0usize, 4usize), (1, 16)] {
            let ids = subset_sources(&geom, n_src);
            let sub_geom = AcquisitionGeometry {
                active_sources: ids.clone(),
                ..geom.clone()
            };
            let sub_records: Vec<ShotRecord> = records
                .iter()
                .filter(|r| ids.contains(&r.source_index))
                .cloned()
                .collect();
            let summary = compute_summary(&p.x0, &sub_geom, &wavelet, &sub_records).unwrap();
            let ens = posterior_stats(
                params,
                &summary,
                n_post,
                seeds::derive(master, "tune-contract", (2 * k + slot) as u64),
            )
            .unwrap();
            let var_sum: f64 = ens.variance.iter().sum();
            let mse = (&ens.mean - &p.truth.velocity).mapv(|d| d * d).mean().unwrap();
            pooled[slot].0 += var_sum / 5.0;
            pooled[slot].1 += mse / 5.0;
        }
    }
    for (slot, n_src) in [(0usize, 4usize), (1, 16)] {
        eprintln!(
            "contraction n_src {n_src:2}: variance {:.4e} pm-mse {:.4e}",
            pooled[slot].0, pooled[slot].1
        );
    }
    eprintln!(
        "contraction passes: variance {} pm-mse {} ({:.1}s)",
        pooled[1].0 < pooled[0].0,
        pooled[1].1 < pooled[0].1,
        t3.elapsed().as_secs_f64()
    );

    let sweep_counts: Vec<usize> = cfg.uq.sweep_counts.clone();
    let mut sweep_avg = vec![0.0; sweep_counts.len()];
    for (k, p) in test.iter().enumerate() {
        let rows = uq::sample_count_sweep(
            params,
            &p.summary,
            &p.truth.velocity,
            &sweep_counts,
            seeds::derive(master, "tune-sweep", k as u64),
        )
        .unwrap();
        for (j, r) in rows.iter().enumerate() {
            sweep_avg[j] += r.rmse / n;
        }
    }
    for (c, r) in sweep_counts.iter().zip(sweep_avg.iter()) {
        eprintln!("sweep n_post {c:3}: avg rmse {r:.5}");
    }
}
