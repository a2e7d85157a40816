//! Synthetic acoustic head phantoms and training-set assembly.
//!
//! A phantom is a randomized elliptical skull ring at bone values, water
//! outside, and a smooth-blob interior quantized to a small set of soft
//! tissue values. The same tissue table drives intensity quantization
//! (`quantize_kmeans`) and starting-model construction (`extract_skull`).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{AcousticModel, AcquisitionGeometry, GridSpec};
use crate::inversion::{compute_summary, SummaryImage};
use crate::seeds;
use crate::wavesim::{make_colored_noise, simulate_forward, SourceWavelet};

/// Acoustic values for the modeled tissue classes plus the two boundary
/// materials (water outside the head, bone for the skull).
#[derive(Debug, Clone, PartialEq)]
pub struct TissueTable {
    /// (name, velocity m/s, density kg/m3), one entry per soft-tissue class.
    pub classes: Vec<(String, f64, f64)>,
    /// (velocity, density) of the coupling medium.
    pub water: (f64, f64),
    /// (velocity, density) of the skull.
    pub bone: (f64, f64),
}

impl TissueTable {
    /// Grey matter, white matter, and blood, with water coupling and
    /// cortical-bone skull values.
    pub fn brain_default() -> Self {
        Self {
            classes: vec![
                ("grey_matter".into(), 1505.0, 1044.5),
                ("white_matter".into(), 1552.0, 1041.5),
                ("blood".into(), 1578.0, 1049.8),
            ],
            water: (1500.0, 1000.0),
            bone: (2800.0, 1850.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("tissue table has no classes".into()));
        }
        let mut velocities: Vec<f64> = self.classes.iter().map(|c| c.1).collect();
        velocities.push(self.water.0);
        velocities.push(self.bone.0);
        let densities = self.classes.iter().map(|c| c.2);
        if velocities.iter().any(|&v| v <= 0.0)
            || densities.clone().any(|d| d <= 0.0)
            || self.water.1 <= 0.0
            || self.bone.1 <= 0.0
        {
            return Err(Error::Config("tissue values must be positive".into()));
        }
        let mut class_v: Vec<f64> = self.classes.iter().map(|c| c.1).collect();
        class_v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if class_v.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("class velocities must be distinct".into()));
        }
        Ok(())
    }

    /// Class indices ordered by ascending velocity.
    fn velocity_rank(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.classes.len()).collect();
        idx.sort_by(|&a, &b| self.classes[a].1.partial_cmp(&self.classes[b].1).unwrap());
        idx
    }

    /// Velocity range spanned by all materials, used as box bounds.
    pub fn velocity_bounds(&self) -> (f64, f64) {
        let mut lo = self.water.0.min(self.bone.0);
        let mut hi = self.water.0.max(self.bone.0);
        for c in &self.classes {
            lo = lo.min(c.1);
            hi = hi.max(c.1);
        }
        (lo, hi)
    }
}

/// Ground-truth model together with the region masks that produced it.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub model: AcousticModel,
    pub skull_mask: Array2<bool>,
    pub interior_mask: Array2<bool>,
    pub seed: u64,
}

/// Draw a random phantom: jittered, wobbled elliptical skull ring at bone
/// values, water exterior, and a blob-textured interior assigned to the
/// tissue classes. Deterministic given the seed.
pub fn generate_phantom(spec: &GridSpec, table: &TissueTable, seed: u64) -> Result<Phantom> {
    table.validate()?;
    spec.validate()?;
    if spec.nx < 32 || spec.ny < 32 {
        return Err(Error::GridTooSmall {
            nx: spec.nx,
            ny: spec.ny,
            min: 32,
        });
    }
    let half = spec.nx.min(spec.ny) as f64 / 2.0;
    let usable = half - spec.sponge_width as f64 - 2.0;
    if usable < 6.0 {
        return Err(Error::GridTooSmall {
            nx: spec.nx,
            ny: spec.ny,
            min: 2 * (spec.sponge_width + 8),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cx = spec.nx as f64 / 2.0 + rng.random_range(-2.0..2.0);
    let cy = spec.ny as f64 / 2.0 + rng.random_range(-2.0..2.0);
    let max_semi = usable / 1.06 - 1.0;
    let a = rng.random_range(0.82..1.0) * max_semi;
    let b = rng.random_range(0.82..1.0) * max_semi;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let thickness = rng.random_range(0.10..0.18);
    let (w1, w2) = (rng.random_range(0.0..0.05), rng.random_range(0.0..0.03));
    let (ph1, ph2) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );

    let (ct, st) = (theta.cos(), theta.sin());
    let radius = Array2::from_shape_fn((spec.nx, spec.ny), |(i, j)| {
        let dx = i as f64 - cx;
        let dy = j as f64 - cy;
        let u = (ct * dx + st * dy) / a;
        let v = (-st * dx + ct * dy) / b;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let wobble = 1.0 + w1 * (2.0 * phi + ph1).cos() + w2 * (3.0 * phi + ph2).cos();
        rho / wobble
    });

    let mut skull_mask = Array2::from_elem((spec.nx, spec.ny), false);
    let mut interior_mask = skull_mask.clone();
    for ((i, j), &r) in radius.indexed_iter() {
        if r <= 1.0 - thickness {
            interior_mask[[i, j]] = true;
        } else if r <= 1.0 {
            skull_mask[[i, j]] = true;
        }
    }

    // smooth interior texture from random Gaussian blobs
    let n_blobs = rng.random_range(6..12);
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let bi = cx + rng.random_range(-0.8..0.8) * a;
        let bj = cy + rng.random_range(-0.8..0.8) * b;
        let sigma: f64 = rng.random_range(2.0..6.0);
        let amp = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        blobs.push((bi, bj, 2.0 * sigma * sigma, amp));
    }
    let mut texture = Array2::<f64>::zeros((spec.nx, spec.ny));
    for ((i, j), t) in texture.indexed_iter_mut() {
        for &(bi, bj, s2, amp) in &blobs {
            let d2 = (i as f64 - bi).powi(2) + (j as f64 - bj).powi(2);
            *t += amp * (-d2 / s2).exp();
        }
    }

    // split the interior intensity range at randomized quantiles
    let mut interior_vals: Vec<f64> = texture
        .iter()
        .zip(interior_mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&t, _)| t)
        .collect();
    interior_vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let q = |frac: f64| -> f64 {
        let idx = ((interior_vals.len() - 1) as f64 * frac).round() as usize;
        interior_vals[idx]
    };
    let lo = q(rng.random_range(0.25..0.40));
    let hi = q(rng.random_range(0.60..0.75));
    let ranked = table.velocity_rank();

    let mut velocity = Array2::from_elem((spec.nx, spec.ny), table.water.0);
    let mut density = Array2::from_elem((spec.nx, spec.ny), table.water.1);
    for ((i, j), &t) in texture.indexed_iter() {
        if skull_mask[[i, j]] {
            velocity[[i, j]] = table.bone.0;
            density[[i, j]] = table.bone.1;
        } else if interior_mask[[i, j]] {
            let class = if t <= lo {
                ranked[0]
            } else if t <= hi {
                ranked[1.min(ranked.len() - 1)]
            } else {
                ranked[2.min(ranked.len() - 1)]
            };
            velocity[[i, j]] = table.classes[class].1;
            density[[i, j]] = table.classes[class].2;
        }
    }

    Ok(Phantom {
        model: AcousticModel::new(velocity, density, *spec)?,
        skull_mask,
        interior_mask,
        seed,
    })
}

/// Result of intensity quantization: the acoustic model plus the cluster
/// diagnostics needed to audit the fit.
#[derive(Debug, Clone)]
pub struct QuantizeOutcome {
    pub model: AcousticModel,
    /// Per-cell class index into `TissueTable::classes`.
    pub labels: Array2<usize>,
    /// Final cluster centroids in intensity units, ascending.
    pub centroids: Vec<f64>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub objective_trace: Vec<f64>,
}

/// Lloyd's algorithm on scalar intensities, mapping centroid rank to
/// tissue-class velocity rank. Operates on the sorted value multiset, so
/// the outcome is exactly invariant to cell ordering.
pub fn quantize_kmeans(
    intensity: &Array2<f64>,
    k: usize,
    table: &TissueTable,
    spec: &GridSpec,
    seed: u64,
) -> Result<QuantizeOutcome> {
    table.validate()?;
    if k != table.classes.len() {
        return Err(Error::Config(format!(
            "k = {k} does not match the {} tissue classes",
            table.classes.len()
        )));
    }
    if intensity.dim() != (spec.nx, spec.ny) {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, {})", spec.nx, spec.ny),
            found: format!("{:?}", intensity.dim()),
        });
    }
    if intensity.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "intensity image".into(),
        });
    }

    let mut sorted: Vec<f64> = intensity.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::DegenerateInput {
            distinct: distinct.len(),
            k,
        });
    }

    // prefix sums over the sorted values make cluster statistics exact
    // functions of the multiset
    let n = sorted.len();
    let mut prefix = vec![0.0f64; n + 1];
    let mut prefix2 = vec![0.0f64; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
        prefix2[i + 1] = prefix2[i] + v * v;
    }

    // seeded init: k distinct sorted values at random distinct positions
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = std::collections::BTreeSet::new();
    while picks.len() < k {
        picks.insert(rng.random_range(0..distinct.len()));
    }
    let mut centroids: Vec<f64> = picks.into_iter().map(|i| distinct[i]).collect();

    let mut trace = Vec::new();
    for _ in 0..100 {
        // cluster c owns sorted[bounds[c]..bounds[c+1]]
        let mut bounds = vec![0usize; k + 1];
        bounds[k] = n;
        for c in 1..k {
            let mid = 0.5 * (centroids[c - 1] + centroids[c]);
            bounds[c] = sorted.partition_point(|&v| v < mid).max(bounds[c - 1]);
        }
        let mut wcss = 0.0;
        let mut moved: f64 = 0.0;
        for c in 0..k {
            let (lo, hi) = (bounds[c], bounds[c + 1]);
            if hi > lo {
                let count = (hi - lo) as f64;
                let sum = prefix[hi] - prefix[lo];
                let sum2 = prefix2[hi] - prefix2[lo];
                let mean = sum / count;
                wcss += sum2 - 2.0 * mean * sum + count * mean * mean;
                moved = moved.max((mean - centroids[c]).abs());
                centroids[c] = mean;
            }
        }
        trace.push(wcss);
        if moved < 1e-6 {
            break;
        }
    }
    centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let ranked = table.velocity_rank();
    let assign = |v: f64| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &ctr) in centroids.iter().enumerate() {
            let d = (v - ctr).abs();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        ranked[best]
    };
    let labels = intensity.mapv(assign);
    let velocity = labels.mapv(|c| table.classes[c].1);
    let density = labels.mapv(|c| table.classes[c].2);
    Ok(QuantizeOutcome {
        model: AcousticModel::new(velocity, density, *spec)?,
        labels,
        centroids,
        objective_trace: trace,
    })
}

/// Starting model: keep skull and exterior, overwrite the interior with a
/// constant fill.
pub fn extract_skull(phantom: &Phantom, interior_fill: (f64, f64)) -> Result<AcousticModel> {
    let mut velocity = phantom.model.velocity.clone();
    let mut density = phantom.model.density.clone();
    for ((i, j), &inside) in phantom.interior_mask.indexed_iter() {
        if inside {
            velocity[[i, j]] = interior_fill.0;
            density[[i, j]] = interior_fill.1;
        }
    }
    AcousticModel::new(velocity, density, phantom.model.spec)
}

/// Which portion of the dataset a pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One training example: ground truth, its starting model, and the
/// physics-informed summary of the simulated observations.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub pair_id: usize,
    pub truth: AcousticModel,
    pub x0: AcousticModel,
    pub interior_mask: Array2<bool>,
    pub summary: SummaryImage,
    pub split: Split,
    pub seed: u64,
    pub source_count: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<DatasetPair>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&DatasetPair> {
        self.pairs.iter().filter(|p| p.split == which).collect()
    }
}

/// 90/5/5 split sizes with at least one validation and test pair.
pub fn split_sizes(n_pairs: usize) -> (usize, usize, usize) {
    let val = ((n_pairs as f64 * 0.05).round() as usize).max(1);
    let test = val;
    (n_pairs - val - test, val, test)
}

fn split_of(pair_id: usize, n_pairs: usize) -> Split {
    let (train, val, _) = split_sizes(n_pairs);
    if pair_id < train {
        Split::Train
    } else if pair_id < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Evenly spaced subset of the active sources, keeping index order.
pub fn subset_sources(geom: &AcquisitionGeometry, n: usize) -> Vec<usize> {
    let total = geom.active_sources.len();
    if n >= total {
        return geom.active_sources.clone();
    }
    (0..n)
        .map(|k| geom.active_sources[k * total / n])
        .collect()
}

/// Build `n_pairs` (truth, summary) examples: sample a phantom, simulate
/// shots from a randomized subset of the sources, add colored noise,
/// extract the skull starting model, and reduce the observations to the
/// summary image. Pairs are independent and deterministic in `seed`, so
/// parallel and serial builds agree bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    n_pairs: usize,
    spec: &GridSpec,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    table: &TissueTable,
    noise_level: f64,
    source_counts: &[usize],
    seed: u64,
) -> Result<Dataset> {
    if n_pairs < 3 {
        return Err(Error::Config(format!(
            "need at least 3 pairs for a train/val/test split, got {n_pairs}"
        )));
    }
    if source_counts.is_empty() {
        return Err(Error::Config("source_counts must be non-empty".into()));
    }
    let pairs: Result<Vec<DatasetPair>> = (0..n_pairs)
        .into_par_iter()
        .map(|pair_id| {
            build_pair(
                pair_id,
                n_pairs,
                spec,
                geom,
                wavelet,
                table,
                noise_level,
                source_counts,
                seed,
            )
            .map_err(|e| e.for_pair(pair_id))
        })
        .collect();
    Ok(Dataset { pairs: pairs? })
}

#[allow(clippy::too_many_arguments)]
fn build_pair(
    pair_id: usize,
    n_pairs: usize,
    spec: &GridSpec,
    geom: &AcquisitionGeometry,
    wavelet: &SourceWavelet,
    table: &TissueTable,
    noise_level: f64,
    source_counts: &[usize],
    seed: u64,
) -> Result<DatasetPair> {
    let pair_seed = seeds::derive(seed, "pair", pair_id as u64);
    let phantom = generate_phantom(spec, table, seeds::derive(pair_seed, "phantom", 0))?;

    let mut count_rng = ChaCha8Rng::seed_from_u64(seeds::derive(pair_seed, "nsrc", 0));
    let n_src = source_counts[count_rng.random_range(0..source_counts.len())];
    let shot_geom = AcquisitionGeometry {
        active_sources: subset_sources(geom, n_src),
        ..geom.clone()
    };

    let mut observed = Vec::with_capacity(shot_geom.active_sources.len());
    for (k, &src) in shot_geom.active_sources.iter().enumerate() {
        let mut rec = simulate_forward(&phantom.model, &shot_geom, wavelet, src)?;
        if noise_level > 0.0 {
            let noise = make_colored_noise(
                spec,
                shot_geom.n_receivers(),
                wavelet,
                noise_level,
                rec.rms(),
                seeds::derive(pair_seed, "noise", k as u64),
            )?;
            rec.traces += &noise;
        }
        observed.push(rec);
    }

    let x0 = extract_skull(&phantom, table.water)?;
    let summary = compute_summary(&x0, &shot_geom, wavelet, &observed)?;
    Ok(DatasetPair {
        pair_id,
        truth: phantom.model,
        x0,
        interior_mask: phantom.interior_mask,
        summary,
        split: split_of(pair_id, n_pairs),
        seed: pair_seed,
        source_count: n_src,
    })
}
