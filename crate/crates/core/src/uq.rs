//! Posterior statistics, image-quality metrics, calibration curves, and
//! data-contraction / sample-count studies for flow posteriors.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{inverse_sample, FlowParameters, LatentVector};
use crate::inversion::SummaryImage;
use crate::seeds;

/// Posterior samples in physical units with their pointwise moments.
#[derive(Debug, Clone)]
pub struct PosteriorEnsemble {
    pub samples: Vec<Array2<f64>>,
    pub mean: Array2<f64>,
    /// Unbiased pointwise variance.
    pub variance: Array2<f64>,
    pub condition_id: String,
}

/// Reconstruction quality relative to a ground-truth field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub n_post_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBin {
    pub mean_uncertainty: f64,
    pub mean_error: f64,
    pub cells: usize,
}

/// Equal-count binning of pooled cells by predicted uncertainty, with
/// the rank correlation between bin uncertainty and bin error.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
    pub spearman: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionRow {
    pub n_sources: usize,
    /// Sum of the pointwise posterior variance over all cells, averaged
    /// across cases.
    pub total_variance: f64,
    /// Mean squared error of the posterior mean, averaged across cases.
    pub mse: f64,
}

/// One test case for the contraction study: ground truth plus summaries
/// rebuilt from growing source subsets.
#[derive(Debug, Clone)]
pub struct ContractionCase {
    pub truth: Array2<f64>,
    /// (sources used, summary) in strictly increasing source order.
    pub summaries: Vec<(usize, SummaryImage)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub n_post: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

/// Computes moments for an already materialized set of samples.
pub fn ensemble_from_samples(
    samples: Vec<Array2<f64>>,
    condition_id: String,
) -> Result<PosteriorEnsemble> {
    if samples.len() < 2 {
        return Err(Error::Config(
            "posterior statistics need at least two samples".into(),
        ));
    }
    let shape = samples[0].dim();
    if samples.iter().any(|s| s.dim() != shape) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", shape.0, shape.1),
            found: "mixed sample shapes".into(),
        });
    }
    let n = samples.len() as f64;
    let mut mean = Array2::<f64>::zeros(shape);
    for s in &samples {
        mean += s;
    }
    mean /= n;
    let mut variance = Array2::<f64>::zeros(shape);
    for s in &samples {
        variance += &(s - &mean).mapv(|d| d * d);
    }
    variance /= n - 1.0;
    Ok(PosteriorEnsemble {
        samples,
        mean,
        variance,
        condition_id,
    })
}

/// Draws `n_post` posterior samples conditioned on a summary image and
/// returns them with pointwise mean and unbiased variance.
pub fn posterior_stats(
    params: &FlowParameters,
    summary: &SummaryImage,
    n_post: usize,
    seed: u64,
) -> Result<PosteriorEnsemble> {
    if n_post < 2 {
        return Err(Error::Config(
            "posterior statistics need at least two samples".into(),
        ));
    }
    let cond = params.normalize_condition(&summary.values);
    let dim = params.arch.latent_dim();
    let samples: Vec<Array2<f64>> = (0..n_post)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "posterior", k as u64));
            let z = LatentVector::standard_normal(dim, &mut rng);
            let x = inverse_sample(params, &z, &cond)?;
            Ok(params.denormalize_field(&x))
        })
        .collect::<Result<Vec<_>>>()?;
    let condition_id = format!(
        "{}:{}sources",
        summary.starting_model_id, summary.source_count_used
    );
    ensemble_from_samples(samples, condition_id)
}

fn gaussian_window() -> [f64; 121] {
    let sigma = 1.5;
    let mut w = [0.0; 121];
    let mut total = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let di = i as f64 - 5.0;
            let dj = j as f64 - 5.0;
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            w[i * 11 + j] = v;
            total += v;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean structural similarity over all fully interior 11x11 Gaussian
/// windows, with stabilizers c1=(0.01 L)^2, c2=(0.03 L)^2 for dynamic
/// range L.
fn ssim(a: &Array2<f64>, b: &Array2<f64>, dynamic_range: f64) -> f64 {
    let (nx, ny) = a.dim();
    let w = gaussian_window();
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ci in 5..nx - 5 {
        for cj in 5..ny - 5 {
            let mut ma = 0.0;
            let mut mb = 0.0;
            for i in 0..11 {
                for j in 0..11 {
                    let wv = w[i * 11 + j];
                    ma += wv * a[(ci + i - 5, cj + j - 5)];
                    mb += wv * b[(ci + i - 5, cj + j - 5)];
                }
            }
            let mut va = 0.0;
            let mut vb = 0.0;
            let mut cov = 0.0;
            for i in 0..11 {
                for j in 0..11 {
                    let wv = w[i * 11 + j];
                    let da = a[(ci + i - 5, cj + j - 5)] - ma;
                    let db = b[(ci + i - 5, cj + j - 5)] - mb;
                    va += wv * da * da;
                    vb += wv * db * db;
                    cov += wv * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// PSNR, SSIM, and RMSE of a reconstruction against the truth, using the
/// truth's dynamic range as the peak and stabilizer scale.
pub fn quality(reconstruction: &Array2<f64>, truth: &Array2<f64>) -> Result<QualityReport> {
    if reconstruction.dim() != truth.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.dim().0, truth.dim().1),
            found: format!("{}x{}", reconstruction.dim().0, reconstruction.dim().1),
        });
    }
    let (nx, ny) = truth.dim();
    if nx < 11 || ny < 11 {
        return Err(Error::GridTooSmall { nx, ny, min: 11 });
    }
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range.is_finite() && range > 0.0) {
        return Err(Error::Config(
            "truth field has no dynamic range for quality metrics".into(),
        ));
    }
    let n = (nx * ny) as f64;
    let mse = reconstruction
        .iter()
        .zip(truth.iter())
        .map(|(r, t)| (r - t) * (r - t))
        .sum::<f64>()
        / n;
    let rmse = mse.sqrt();
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    };
    Ok(QualityReport {
        psnr,
        ssim: ssim(reconstruction, truth, range),
        rmse,
        n_post_used: 1,
    })
}

/// Rescales both fields by the truth's range onto [0, 1] and evaluates
/// [`quality`] there, the convention used for all reported tables.
pub fn normalized_quality(
    reconstruction: &Array2<f64>,
    truth: &Array2<f64>,
) -> Result<QualityReport> {
    if reconstruction.dim() != truth.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.dim().0, truth.dim().1),
            found: format!("{}x{}", reconstruction.dim().0, reconstruction.dim().1),
        });
    }
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range.is_finite() && range > 0.0) {
        return Err(Error::Config(
            "truth field has no dynamic range for quality metrics".into(),
        ));
    }
    let unit = |f: &Array2<f64>| f.mapv(|v| (v - lo) / range);
    quality(&unit(reconstruction), &unit(truth))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut j = k;
        while j + 1 < n && values[order[j + 1]] == values[order[k]] {
            j += 1;
        }
        let avg = (k + j) as f64 / 2.0;
        for &idx in &order[k..=j] {
            ranks[idx] = avg;
        }
        k = j + 1;
    }
    ranks
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Pools cells from all ensembles, bins them by posterior standard
/// deviation into equal-count bins, and reports per-bin mean uncertainty
/// against mean absolute error of the posterior mean.
pub fn calibration(
    ensembles: &[PosteriorEnsemble],
    truths: &[Array2<f64>],
    n_bins: usize,
) -> Result<CalibrationCurve> {
    if n_bins < 2 {
        return Err(Error::Config("calibration needs at least two bins".into()));
    }
    if ensembles.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} truth fields", ensembles.len()),
            found: format!("{}", truths.len()),
        });
    }
    let mut pool: Vec<(f64, f64)> = Vec::new();
    for (e, t) in ensembles.iter().zip(truths.iter()) {
        if e.mean.dim() != t.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", e.mean.dim().0, e.mean.dim().1),
                found: format!("{}x{}", t.dim().0, t.dim().1),
            });
        }
        for ((v, m), tv) in e.variance.iter().zip(e.mean.iter()).zip(t.iter()) {
            pool.push((v.sqrt(), (m - tv).abs()));
        }
    }
    if pool.is_empty() || pool.len() < n_bins {
        return Err(Error::EmptyPool);
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pool.len();
    let mut bins = Vec::with_capacity(n_bins);
    for k in 0..n_bins {
        let lo = k * n / n_bins;
        let hi = (k + 1) * n / n_bins;
        let cells = hi - lo;
        let slice = &pool[lo..hi];
        let mu = slice.iter().map(|c| c.0).sum::<f64>() / cells as f64;
        let me = slice.iter().map(|c| c.1).sum::<f64>() / cells as f64;
        bins.push(CalibrationBin {
            mean_uncertainty: mu,
            mean_error: me,
            cells,
        });
    }
    let unc: Vec<f64> = bins.iter().map(|b| b.mean_uncertainty).collect();
    let err: Vec<f64> = bins.iter().map(|b| b.mean_error).collect();
    Ok(CalibrationCurve {
        bins,
        spearman: spearman(&unc, &err),
    })
}

/// Seed used for one (case, subset) posterior in the contraction study;
/// exposed so single posteriors can be reproduced outside the study.
pub fn contraction_seed(seed: u64, case: usize, subset: usize, n_subsets: usize) -> u64 {
    seeds::derive(seed, "contraction", (case * n_subsets + subset) as u64)
}

/// For each source-subset size, samples posteriors for every case and
/// averages total posterior variance and posterior-mean MSE.
pub fn contraction_study(
    params: &FlowParameters,
    cases: &[ContractionCase],
    n_post: usize,
    seed: u64,
) -> Result<Vec<ContractionRow>> {
    if cases.is_empty() {
        return Err(Error::Config("contraction study needs cases".into()));
    }
    let subsets: Vec<usize> = cases[0].summaries.iter().map(|(n, _)| *n).collect();
    if !subsets.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config(
            "source subsets must be strictly increasing".into(),
        ));
    }
    for c in cases {
        let these: Vec<usize> = c.summaries.iter().map(|(n, _)| *n).collect();
        if these != subsets {
            return Err(Error::Config(
                "every case must provide the same source subsets".into(),
            ));
        }
    }
    let mut rows = Vec::with_capacity(subsets.len());
    for (j, &n_sources) in subsets.iter().enumerate() {
        let mut total_variance = 0.0;
        let mut mse = 0.0;
        for (k, case) in cases.iter().enumerate() {
            let ens = posterior_stats(
                params,
                &case.summaries[j].1,
                n_post,
                contraction_seed(seed, k, j, subsets.len()),
            )?;
            total_variance += ens.variance.sum();
            let n = case.truth.len() as f64;
            mse += ens
                .mean
                .iter()
                .zip(case.truth.iter())
                .map(|(m, t)| (m - t) * (m - t))
                .sum::<f64>()
                / n;
        }
        rows.push(ContractionRow {
            n_sources,
            total_variance: total_variance / cases.len() as f64,
            mse: mse / cases.len() as f64,
        });
    }
    Ok(rows)
}

/// Quality of the running posterior mean at each sample count; larger
/// counts extend the smaller counts' samples rather than redrawing.
pub fn sample_count_sweep(
    params: &FlowParameters,
    summary: &SummaryImage,
    truth: &Array2<f64>,
    counts: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() || counts[0] == 0 {
        return Err(Error::Config("sample counts must be positive".into()));
    }
    if !counts.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config(
            "sample counts must be strictly increasing".into(),
        ));
    }
    let cond = params.normalize_condition(&summary.values);
    let dim = params.arch.latent_dim();
    let max = *counts.last().unwrap();
    let samples: Vec<Array2<f64>> = (0..max)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "sweep-sample", k as u64));
            let z = LatentVector::standard_normal(dim, &mut rng);
            let x = inverse_sample(params, &z, &cond)?;
            Ok(params.denormalize_field(&x))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(counts.len());
    let mut running = Array2::<f64>::zeros(truth.dim());
    let mut used = 0usize;
    for &c in counts {
        while used < c {
            running += &samples[used];
            used += 1;
        }
        let mean = running.mapv(|v| v / used as f64);
        let q = normalized_quality(&mean, truth)?;
        rows.push(SweepRow {
            n_post: c,
            psnr: q.psnr,
            ssim: q.ssim,
            rmse: q.rmse,
        });
    }
    Ok(rows)
}
