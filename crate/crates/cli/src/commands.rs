//! Subcommand implementations: each one reads its inputs, runs the
//! corresponding library pipeline, and writes artifacts into the run
//! directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde_json::json;

use tuct_core::config::RunConfig;
use tuct_core::flow::{self, FlowParameters};
use tuct_core::grid::{AcousticModel, AcquisitionGeometry, GridSpec};
use tuct_core::inversion::{compute_summary, fwi_reconstruct, shift_interior, SummaryImage};
use tuct_core::io::{self, GridFile};
use tuct_core::phantom::{
    build_dataset, extract_skull, generate_phantom, subset_sources, Split,
};
use tuct_core::seeds;
use tuct_core::uq::{
    calibration, contraction_study, normalized_quality, posterior_stats, sample_count_sweep,
    ContractionCase, SweepRow,
};
use tuct_core::wavesim::{make_colored_noise, simulate_forward, ShotRecord, SourceWavelet};
use tuct_core::{Error, Result};

use crate::run_dir::RunDir;

/// Everything a subcommand needs: the parsed configuration, the effective
/// master seed, and the run directory to write into.
pub struct Ctx {
    pub cfg: RunConfig,
    pub master_seed: u64,
    pub dir: RunDir,
}

fn write_model(dir: &mut RunDir, name: &str, model: &AcousticModel) -> Result<()> {
    let grid = GridFile::stacked(&[&model.velocity, &model.density], model.spec.dx)?;
    io::write_grid(&grid, &dir.output(&format!("{name}.grd")))?;
    io::write_pgm(&model.velocity, &dir.output(&format!("{name}.pgm")))?;
    Ok(())
}

fn read_model(path: &Path, spec: GridSpec) -> Result<AcousticModel> {
    let grid = io::read_grid(path)?;
    if grid.n_channels() < 2 {
        return Err(Error::ShapeMismatch {
            expected: "2 channels (velocity, density)".into(),
            found: format!("{} channels in {}", grid.n_channels(), path.display()),
        });
    }
    if (grid.dx - spec.dx).abs() > 1e-9 * spec.dx {
        return Err(Error::Config(format!(
            "grid spacing {} in {} does not match configured {}",
            grid.dx,
            path.display(),
            spec.dx
        )));
    }
    AcousticModel::new(grid.channel(0), grid.channel(1), spec)
}

fn write_summary(dir: &mut RunDir, name: &str, summary: &SummaryImage, dx: f64) -> Result<()> {
    io::write_field(&summary.values, dx, &dir.output(&format!("{name}.grd")))?;
    io::write_pgm(&summary.values, &dir.output(&format!("{name}.pgm")))?;
    let meta = json!({
        "source_count_used": summary.source_count_used,
        "starting_model_id": summary.starting_model_id,
    });
    std::fs::write(
        dir.output(&format!("{name}.meta.json")),
        serde_json::to_string_pretty(&meta).expect("literal json"),
    )?;
    Ok(())
}

/// Read a summary grid plus its provenance sidecar if one sits next to it.
fn read_summary(path: &Path) -> Result<SummaryImage> {
    let (values, _) = io::read_field(path)?;
    let meta_path = path.with_extension("meta.json");
    let (source_count_used, starting_model_id) = match std::fs::read_to_string(&meta_path) {
        Ok(text) => {
            let meta: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
            (
                meta["source_count_used"].as_u64().unwrap_or(0) as usize,
                meta["starting_model_id"]
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
            )
        }
        Err(_) => (
            0,
            path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
        ),
    };
    Ok(SummaryImage {
        values,
        source_count_used,
        starting_model_id,
    })
}

fn read_shots(dir: &Path) -> Result<Vec<ShotRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "sht"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .sht shot files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| io::read_shot(p)).collect()
}

/// Geometry whose active sources are exactly the ones the records came from.
fn geometry_for_records(cfg: &RunConfig, records: &[ShotRecord]) -> Result<AcquisitionGeometry> {
    let mut geom = cfg.geometry()?;
    geom.active_sources = records.iter().map(|r| r.source_index).collect();
    Ok(geom)
}

fn require_matching_grid(params: &FlowParameters, spec: &GridSpec) -> Result<()> {
    if params.arch.nx != spec.nx || params.arch.ny != spec.ny {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} checkpoint fields", params.arch.nx, params.arch.ny),
            found: format!("{}x{} configured grid", spec.nx, spec.ny),
        });
    }
    Ok(())
}

fn mask_to_field(mask: &Array2<bool>) -> Array2<f64> {
    mask.mapv(|b| if b { 1.0 } else { 0.0 })
}

pub fn phantom(ctx: &mut Ctx, index: usize) -> Result<()> {
    let spec = ctx.cfg.grid_spec();
    let table = ctx.cfg.tissue_table();
    let seed = seeds::derive(ctx.master_seed, "phantom-cli", index as u64);
    let ph = generate_phantom(&spec, &table, seed)?;
    let mut x0 = extract_skull(&ph, table.water)?;
    if ctx.cfg.run.interior_shift != 0.0 {
        x0 = shift_interior(&x0, &ph.interior_mask, ctx.cfg.run.interior_shift)?;
    }
    write_model(&mut ctx.dir, "truth", &ph.model)?;
    write_model(&mut ctx.dir, "start", &x0)?;
    let masks = GridFile::stacked(
        &[
            &mask_to_field(&ph.skull_mask),
            &mask_to_field(&ph.interior_mask),
        ],
        spec.dx,
    )?;
    io::write_grid(&masks, &ctx.dir.output("masks.grd"))?;
    ctx.dir.record("phantom_index", json!(index));
    ctx.dir.record("phantom_seed", json!(seed));
    ctx.dir
        .record("interior_shift", json!(ctx.cfg.run.interior_shift));
    println!(
        "phantom {index} on a {}x{} grid: truth.grd, start.grd, masks.grd",
        spec.nx, spec.ny
    );
    Ok(())
}

pub fn simulate(ctx: &mut Ctx, model_path: &Path, sources: Option<usize>) -> Result<()> {
    let spec = ctx.cfg.grid_spec();
    let mut geom = ctx.cfg.geometry()?;
    if let Some(n) = sources {
        geom = geom.with_first_sources(n);
    }
    let wavelet = ctx.cfg.wavelet()?;
    let model = read_model(model_path, spec)?;
    let noise_level = ctx.cfg.dataset.noise_level;
    let master = ctx.master_seed;
    let records: Vec<ShotRecord> = geom
        .active_sources
        .par_iter()
        .enumerate()
        .map(|(k, &src)| {
            let mut rec = simulate_forward(&model, &geom, &wavelet, src)?;
            if noise_level > 0.0 {
                let noise = make_colored_noise(
                    &spec,
                    geom.n_receivers(),
                    &wavelet,
                    noise_level,
                    rec.rms(),
                    seeds::derive(master, "noise", k as u64),
                )?;
                rec.traces += &noise;
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    for rec in &records {
        io::write_shot(
            rec,
            &ctx.dir.output(&format!("shots/shot_{:03}.sht", rec.source_index)),
        )?;
    }
    ctx.dir.record("n_shots", json!(records.len()));
    ctx.dir.record("noise_level", json!(noise_level));
    println!(
        "simulated {} shots ({} receivers, {} time steps)",
        records.len(),
        geom.n_receivers(),
        spec.nt
    );
    Ok(())
}

pub fn summarize(ctx: &mut Ctx, start: &Path, shots: &Path) -> Result<()> {
    let spec = ctx.cfg.grid_spec();
    let wavelet = ctx.cfg.wavelet()?;
    let records = read_shots(shots)?;
    let geom = geometry_for_records(&ctx.cfg, &records)?;
    let x0 = read_model(start, spec)?;
    let summary = compute_summary(&x0, &geom, &wavelet, &records)?;
    write_summary(&mut ctx.dir, "summary", &summary, spec.dx)?;
    ctx.dir
        .record("source_count_used", json!(summary.source_count_used));
    ctx.dir
        .record("starting_model_id", json!(summary.starting_model_id));
    println!(
        "summary from {} shots at model {}",
        summary.source_count_used, summary.starting_model_id
    );
    Ok(())
}

pub fn fwi(ctx: &mut Ctx, start: &Path, shots: &Path) -> Result<()> {
    let spec = ctx.cfg.grid_spec();
    let wavelet = ctx.cfg.wavelet()?;
    let records = read_shots(shots)?;
    let geom = geometry_for_records(&ctx.cfg, &records)?;
    let x0 = read_model(start, spec)?;
    let result = fwi_reconstruct(&x0, &geom, &wavelet, &records, &ctx.cfg.fwi_config())?;
    write_model(&mut ctx.dir, "recon", &result.model)?;
    let rows: Vec<Vec<String>> = result
        .misfit_history
        .iter()
        .map(|it| {
            vec![
                it.iteration.to_string(),
                it.misfit.to_string(),
                it.step_length.to_string(),
                it.accepted.to_string(),
                it.velocity_range.0.to_string(),
                it.velocity_range.1.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &ctx.dir.output("history.csv"),
        &[
            "iteration",
            "misfit",
            "step_length",
            "accepted",
            "velocity_min",
            "velocity_max",
        ],
        &rows,
    )?;
    let final_misfit = result.misfit_history.last().map(|it| it.misfit);
    ctx.dir.record("status", json!(format!("{:?}", result.status)));
    ctx.dir.record("gradient_calls", json!(result.gradient_calls));
    ctx.dir.record("final_misfit", json!(final_misfit));
    println!(
        "fwi finished: {:?} after {} iterations, {} gradient calls",
        result.status,
        result.misfit_history.len(),
        result.gradient_calls
    );
    Ok(())
}

pub fn train(ctx: &mut Ctx) -> Result<()> {
    let spec = ctx.cfg.grid_spec();
    let geom = ctx.cfg.geometry()?;
    let wavelet = ctx.cfg.wavelet()?;
    let table = ctx.cfg.tissue_table();
    let dataset = build_dataset(
        ctx.cfg.dataset.n_pairs,
        &spec,
        &geom,
        &wavelet,
        &table,
        ctx.cfg.dataset.noise_level,
        &ctx.cfg.dataset.source_counts,
        seeds::derive(ctx.master_seed, "dataset", 0),
    )?;
    let as_pairs = |split: Split| -> Vec<(Array2<f64>, Array2<f64>)> {
        dataset
            .split(split)
            .iter()
            .map(|p| (p.truth.velocity.clone(), p.summary.values.clone()))
            .collect()
    };
    let train_pairs = as_pairs(Split::Train);
    let val_pairs = as_pairs(Split::Val);
    println!(
        "dataset ready: {} train / {} val / {} test pairs",
        train_pairs.len(),
        val_pairs.len(),
        dataset.split(Split::Test).len()
    );
    let outcome = flow::train(
        ctx.cfg.flow_architecture(),
        &train_pairs,
        &val_pairs,
        &ctx.cfg.optimizer_config(),
        seeds::derive(ctx.master_seed, "train", 0),
    )?;
    flow::save_checkpoint(&outcome.params, &ctx.dir.output("flow.nfc"))?;
    let rows: Vec<Vec<String>> = outcome
        .log
        .iter()
        .map(|l| {
            vec![
                l.epoch.to_string(),
                l.train_loss.to_string(),
                l.val_loss.to_string(),
                l.wall_seconds.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &ctx.dir.output("training_log.csv"),
        &["epoch", "train_loss", "val_loss", "wall_seconds"],
        &rows,
    )?;

    let mut test_rows = Vec::new();
    for pair in dataset.split(Split::Test) {
        let stem = format!("test/pair_{:04}", pair.pair_id);
        write_model(&mut ctx.dir, &format!("{stem}_truth"), &pair.truth)?;
        write_model(&mut ctx.dir, &format!("{stem}_start"), &pair.x0)?;
        write_summary(&mut ctx.dir, &format!("{stem}_summary"), &pair.summary, spec.dx)?;
        test_rows.push(vec![
            pair.pair_id.to_string(),
            pair.source_count.to_string(),
            pair.seed.to_string(),
        ]);
    }
    io::write_csv(
        &ctx.dir.output("test/pairs.csv"),
        &["pair_id", "source_count", "seed"],
        &test_rows,
    )?;

    let best = &outcome.log[outcome.best_epoch];
    ctx.dir.record("n_train", json!(train_pairs.len()));
    ctx.dir.record("n_val", json!(val_pairs.len()));
    ctx.dir.record("n_test", json!(test_rows.len()));
    ctx.dir.record("best_epoch", json!(outcome.best_epoch));
    ctx.dir.record("best_val_loss", json!(best.val_loss));
    ctx.dir.record("aborted", json!(outcome.aborted));
    ctx.dir
        .record("param_count", json!(outcome.params.arch.param_count()));
    if outcome.aborted {
        println!(
            "training aborted after epoch {}; kept the best checkpoint from epoch {}",
            outcome.log.len().saturating_sub(1),
            outcome.best_epoch
        );
    }
    println!(
        "trained {} epochs; best epoch {} with validation loss {:.4}",
        outcome.log.len(),
        outcome.best_epoch,
        best.val_loss
    );
    Ok(())
}

pub fn sample(
    ctx: &mut Ctx,
    checkpoint: &Path,
    summary_path: &Path,
    n_post: Option<usize>,
) -> Result<()> {
    let spec = ctx.cfg.grid_spec();
    let params = flow::load_checkpoint(checkpoint)?;
    require_matching_grid(&params, &spec)?;
    let summary = read_summary(summary_path)?;
    let n_post = n_post.unwrap_or(ctx.cfg.uq.n_post);
    let ensemble = posterior_stats(
        &params,
        &summary,
        n_post,
        seeds::derive(ctx.master_seed, "sample", 0),
    )?;
    io::write_field(&ensemble.mean, spec.dx, &ctx.dir.output("mean.grd"))?;
    io::write_pgm(&ensemble.mean, &ctx.dir.output("mean.pgm"))?;
    io::write_field(&ensemble.variance, spec.dx, &ctx.dir.output("variance.grd"))?;
    io::write_pgm(&ensemble.variance, &ctx.dir.output("variance.pgm"))?;
    for (k, s) in ensemble.samples.iter().enumerate() {
        io::write_field(s, spec.dx, &ctx.dir.output(&format!("samples/sample_{k:03}.grd")))?;
    }
    ctx.dir.record("n_post", json!(n_post));
    ctx.dir.record("condition_id", json!(ensemble.condition_id));
    println!(
        "drew {} posterior samples conditioned on {}",
        n_post, ensemble.condition_id
    );
    Ok(())
}

pub fn evaluate(reconstruction: &Path, truth: &Path, out_dir: Option<&Path>) -> Result<()> {
    let rec = io::read_grid(reconstruction)?.channel(0);
    let tru = io::read_grid(truth)?.channel(0);
    let q = normalized_quality(&rec, &tru)?;
    println!(
        "{}",
        json!({"psnr": q.psnr, "ssim": q.ssim, "rmse": q.rmse})
    );
    if let Some(dir) = out_dir {
        let mut run = RunDir::create(Some(dir), "evaluate", "evaluate")?;
        io::write_csv(
            &run.output("metrics.csv"),
            &["psnr", "ssim", "rmse"],
            &[vec![q.psnr.to_string(), q.ssim.to_string(), q.rmse.to_string()]],
        )?;
        run.record("reconstruction", json!(reconstruction.display().to_string()));
        run.record("truth", json!(truth.display().to_string()));
        run.finish()?;
    }
    Ok(())
}

/// One held-out experiment for the study subcommands: a fresh phantom,
/// its starting model, and noisy observations from every source.
struct TestCase {
    truth: AcousticModel,
    x0: AcousticModel,
    observed: Vec<ShotRecord>,
}

fn build_test_case(
    cfg: &RunConfig,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    master: u64,
    k: usize,
) -> Result<TestCase> {
    let spec = cfg.grid_spec();
    let table = cfg.tissue_table();
    let case_seed = seeds::derive(master, "test-phantom", k as u64);
    let ph = generate_phantom(&spec, &table, seeds::derive(case_seed, "phantom", 0))?;
    let mut x0 = extract_skull(&ph, table.water)?;
    if cfg.run.interior_shift != 0.0 {
        x0 = shift_interior(&x0, &ph.interior_mask, cfg.run.interior_shift)?;
    }
    let noise_level = cfg.dataset.noise_level;
    let mut observed = Vec::with_capacity(geom.active_sources.len());
    for (j, &src) in geom.active_sources.iter().enumerate() {
        let mut rec = simulate_forward(&ph.model, geom, wavelet, src)?;
        if noise_level > 0.0 {
            let noise = make_colored_noise(
                &spec,
                geom.n_receivers(),
                wavelet,
                noise_level,
                rec.rms(),
                seeds::derive(case_seed, "noise", j as u64),
            )?;
            rec.traces += &noise;
        }
        observed.push(rec);
    }
    Ok(TestCase {
        truth: ph.model,
        x0,
        observed,
    })
}

pub fn contraction(ctx: &mut Ctx, checkpoint: &Path, n_post: Option<usize>) -> Result<()> {
    let spec = ctx.cfg.grid_spec();
    let params = flow::load_checkpoint(checkpoint)?;
    require_matching_grid(&params, &spec)?;
    let geom = ctx.cfg.geometry()?;
    let wavelet = ctx.cfg.wavelet()?;
    let n_post = n_post.unwrap_or(ctx.cfg.uq.n_post);
    let subsets = ctx.cfg.uq.source_subsets.clone();
    let record_of: HashMap<usize, usize> = geom
        .active_sources
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i))
        .collect();
    let cfg = &ctx.cfg;
    let master = ctx.master_seed;
    let cases: Vec<ContractionCase> = (0..cfg.uq.test_phantoms)
        .into_par_iter()
        .map(|k| {
            let tc = build_test_case(cfg, &geom, &wavelet, master, k)?;
            let summaries = subsets
                .iter()
                .map(|&n| {
                    let sub = AcquisitionGeometry {
                        active_sources: subset_sources(&geom, n),
                        ..geom.clone()
                    };
                    let obs: Vec<ShotRecord> = sub
                        .active_sources
                        .iter()
                        .map(|s| tc.observed[record_of[s]].clone())
                        .collect();
                    let summary = compute_summary(&tc.x0, &sub, &wavelet, &obs)?;
                    Ok((n, summary))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ContractionCase {
                truth: tc.truth.velocity.clone(),
                summaries,
            })
        })
        .collect::<Result<_>>()?;
    let rows = contraction_study(&params, &cases, n_post, master)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_sources.to_string(),
                r.total_variance.to_string(),
                r.mse.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &ctx.dir.output("contraction.csv"),
        &["n_sources", "total_variance", "mse"],
        &csv_rows,
    )?;
    ctx.dir.record("n_post", json!(n_post));
    ctx.dir.record("n_cases", json!(cases.len()));
    for r in &rows {
        println!(
            "{:>3} sources: total variance {:.6e}, posterior-mean mse {:.6e}",
            r.n_sources, r.total_variance, r.mse
        );
    }
    Ok(())
}

pub fn calibrate(ctx: &mut Ctx, checkpoint: &Path, n_post: Option<usize>) -> Result<()> {
    let spec = ctx.cfg.grid_spec();
    let params = flow::load_checkpoint(checkpoint)?;
    require_matching_grid(&params, &spec)?;
    let geom = ctx.cfg.geometry()?;
    let wavelet = ctx.cfg.wavelet()?;
    let n_post = n_post.unwrap_or(ctx.cfg.uq.n_post);
    let cfg = &ctx.cfg;
    let master = ctx.master_seed;
    let per_case: Vec<_> = (0..cfg.uq.test_phantoms)
        .into_par_iter()
        .map(|k| {
            let tc = build_test_case(cfg, &geom, &wavelet, master, k)?;
            let summary = compute_summary(&tc.x0, &geom, &wavelet, &tc.observed)?;
            let ensemble = posterior_stats(
                &params,
                &summary,
                n_post,
                seeds::derive(master, "calibration", k as u64),
            )?;
            Ok((ensemble, tc.truth.velocity))
        })
        .collect::<Result<_>>()?;
    let (ensembles, truths): (Vec<_>, Vec<_>) = per_case.into_iter().unzip();
    let curve = calibration(&ensembles, &truths, cfg.uq.calibration_bins)?;
    let csv_rows: Vec<Vec<String>> = curve
        .bins
        .iter()
        .map(|b| {
            vec![
                b.mean_uncertainty.to_string(),
                b.mean_error.to_string(),
                b.cells.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &ctx.dir.output("calibration.csv"),
        &["mean_uncertainty", "mean_error", "cells"],
        &csv_rows,
    )?;
    ctx.dir.record("n_post", json!(n_post));
    ctx.dir.record("spearman", json!(curve.spearman));
    println!("{}", json!({"spearman": curve.spearman, "bins": curve.bins.len()}));
    Ok(())
}

pub fn sweep_npost(ctx: &mut Ctx, checkpoint: &Path) -> Result<()> {
    let spec = ctx.cfg.grid_spec();
    let params = flow::load_checkpoint(checkpoint)?;
    require_matching_grid(&params, &spec)?;
    let geom = ctx.cfg.geometry()?;
    let wavelet = ctx.cfg.wavelet()?;
    let cfg = &ctx.cfg;
    let master = ctx.master_seed;
    let counts = cfg.uq.sweep_counts.clone();
    let per_phantom: Vec<Vec<SweepRow>> = (0..cfg.uq.test_phantoms)
        .into_par_iter()
        .map(|k| {
            let tc = build_test_case(cfg, &geom, &wavelet, master, k)?;
            let summary = compute_summary(&tc.x0, &geom, &wavelet, &tc.observed)?;
            sample_count_sweep(
                &params,
                &summary,
                &tc.truth.velocity,
                &counts,
                seeds::derive(master, "sweep", k as u64),
            )
        })
        .collect::<Result<_>>()?;
    let n_cases = per_phantom.len() as f64;
    let averaged: Vec<SweepRow> = (0..counts.len())
        .map(|j| SweepRow {
            n_post: counts[j],
            psnr: per_phantom.iter().map(|rows| rows[j].psnr).sum::<f64>() / n_cases,
            ssim: per_phantom.iter().map(|rows| rows[j].ssim).sum::<f64>() / n_cases,
            rmse: per_phantom.iter().map(|rows| rows[j].rmse).sum::<f64>() / n_cases,
        })
        .collect();
    let avg_rows: Vec<Vec<String>> = averaged
        .iter()
        .map(|r| {
            vec![
                r.n_post.to_string(),
                r.psnr.to_string(),
                r.ssim.to_string(),
                r.rmse.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &ctx.dir.output("sweep.csv"),
        &["n_post", "psnr", "ssim", "rmse"],
        &avg_rows,
    )?;
    let detail_rows: Vec<Vec<String>> = per_phantom
        .iter()
        .enumerate()
        .flat_map(|(k, rows)| {
            rows.iter().map(move |r| {
                vec![
                    k.to_string(),
                    r.n_post.to_string(),
                    r.psnr.to_string(),
                    r.ssim.to_string(),
                    r.rmse.to_string(),
                ]
            })
        })
        .collect();
    io::write_csv(
        &ctx.dir.output("sweep_detail.csv"),
        &["phantom", "n_post", "psnr", "ssim", "rmse"],
        &detail_rows,
    )?;
    ctx.dir.record("n_cases", json!(per_phantom.len()));
    for r in &averaged {
        println!(
            "n_post {:>4}: psnr {:.2} dB, ssim {:.4}, rmse {:.6e}",
            r.n_post, r.psnr, r.ssim, r.rmse
        );
    }
    Ok(())
}
