//! Conditional normalizing flow mapping velocity fields to Gaussian
//! latents given a physics summary image. Multi-scale: each scale
//! squeezes space into channels, runs blocks of activation
//! normalization, a fixed channel permutation, and a conditional affine
//! coupling, then factors half the channels out into the latent vector.
//! All arithmetic is f64; checkpoints store f32 tensors.

mod layers;
pub mod train;

pub use layers::Tensor;
pub use train::{train, EpochLog, OptimizerConfig, TrainOutcome};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::nfc;
use crate::seeds;

use layers::{avg_pool2, ensure_finite, squeeze, unsqueeze, ActNorm, CouplingCache, CouplingNet, SCALE_CLAMP};

/// Channel permutations are architecture-determined, never stored: the
/// same shapes always produce the same shuffles, so checkpoints omit
/// them and remain portable across training seeds.
const PERMUTATION_SEED: u64 = 0x5058_494d_5245_5031;

const CHECKPOINT_VERSION: u32 = 1;

/// Shape hyperparameters of the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowArchitecture {
    pub nx: usize,
    pub ny: usize,
    pub n_scales: usize,
    pub n_blocks_per_scale: usize,
    pub hidden_channels: usize,
}

impl FlowArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 || self.n_blocks_per_scale == 0 || self.hidden_channels == 0 {
            return Err(Error::Config(
                "flow needs at least one scale, one block, and one hidden channel".into(),
            ));
        }
        let div = 1usize << self.n_scales;
        if self.nx == 0 || self.ny == 0 || self.nx % div != 0 || self.ny % div != 0 {
            return Err(Error::Config(format!(
                "field shape {}x{} must be divisible by 2^{} for {} scales",
                self.nx, self.ny, self.n_scales, self.n_scales
            )));
        }
        Ok(())
    }

    /// Channels entering the blocks at a scale: 4, 8, 16, ...
    pub fn channels_at(&self, scale: usize) -> usize {
        4 << scale
    }

    /// Spatial side lengths at a scale.
    pub fn spatial_at(&self, scale: usize) -> (usize, usize) {
        (self.nx >> (scale + 1), self.ny >> (scale + 1))
    }

    pub fn latent_dim(&self) -> usize {
        self.nx * self.ny
    }

    /// (channels, h, w) of each latent chunk, one per scale; every scale
    /// but the last contributes its factored-out half, the last scale
    /// contributes everything.
    pub fn latent_chunk_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..self.n_scales)
            .map(|s| {
                let c = self.channels_at(s);
                let (h, w) = self.spatial_at(s);
                if s + 1 < self.n_scales {
                    (c / 2, h, w)
                } else {
                    (c, h, w)
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden_channels;
        let mut total = 0;
        for s in 0..self.n_scales {
            let c = self.channels_at(s);
            let per_block = 2 * c
                + ((c / 2 + 1) * h * 9 + h)
                + (h * h * 9 + h)
                + (h * c * 9 + c);
            total += self.n_blocks_per_scale * per_block;
        }
        total
    }
}

/// One block: normalize, permute channels, conditionally couple.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm: ActNorm,
    pub perm: Vec<usize>,
    pub perm_inv: Vec<usize>,
    pub net: CouplingNet,
}

/// Trainable state of the flow plus the normalization statistics the
/// training set fixed for fields and conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowParameters {
    pub arch: FlowArchitecture,
    pub scales: Vec<Vec<Block>>,
    pub field_mean: f64,
    pub field_std: f64,
    pub cond_mean: f64,
    pub cond_std: f64,
}

/// Latent-space point, flattened across all scale chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub values: Vec<f64>,
}

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn standard_normal(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            values: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Result of pushing one field through the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    pub latent: LatentVector,
    pub log_det: f64,
}

fn permutation_for(scale: usize, block: usize, channels: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        PERMUTATION_SEED,
        "channel-perm",
        (scale * 1024 + block) as u64,
    ));
    let mut perm: Vec<usize> = (0..channels).collect();
    for i in (1..channels).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

impl FlowParameters {
    /// Fresh parameters: hidden convolutions small random, final
    /// convolutions zero, so the whole flow starts as the identity up to
    /// its fixed relabelings and has zero log-det everywhere.
    pub fn identity_init(arch: FlowArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut scales = Vec::with_capacity(arch.n_scales);
        for s in 0..arch.n_scales {
            let c = arch.channels_at(s);
            let mut blocks = Vec::with_capacity(arch.n_blocks_per_scale);
            for b in 0..arch.n_blocks_per_scale {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                    seed,
                    "coupling-init",
                    (s * 1024 + b) as u64,
                ));
                let fan_in = (c / 2 + 1) * 9;
                let scale0 = 0.1 / (fan_in as f64).sqrt();
                let net = CouplingNet::new(c / 2, 1, arch.hidden_channels, || {
                    let g: f64 = rng.sample(StandardNormal);
                    g * scale0
                });
                let perm = permutation_for(s, b, c);
                let perm_inv = invert_permutation(&perm);
                blocks.push(Block {
                    norm: ActNorm::identity(c),
                    perm,
                    perm_inv,
                    net,
                });
            }
            scales.push(blocks);
        }
        Ok(Self {
            arch,
            scales,
            field_mean: 0.0,
            field_std: 1.0,
            cond_mean: 0.0,
            cond_std: 1.0,
        })
    }

    pub fn normalize_field(&self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| (v - self.field_mean) / self.field_std)
    }

    pub fn denormalize_field(&self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| v * self.field_std + self.field_mean)
    }

    pub fn normalize_condition(&self, c: &Array2<f64>) -> Array2<f64> {
        c.mapv(|v| (v - self.cond_mean) / self.cond_std)
    }

    /// Parameter tensors in checkpoint order, one flat slice each.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for blocks in &mut self.scales {
            for b in blocks {
                out.push(&mut b.norm.log_scale);
                out.push(&mut b.norm.bias);
                out.push(&mut b.net.c1.weight);
                out.push(&mut b.net.c1.bias);
                out.push(&mut b.net.c2.weight);
                out.push(&mut b.net.c2.bias);
                out.push(&mut b.net.c3.weight);
                out.push(&mut b.net.c3.bias);
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for blocks in &self.scales {
            for b in blocks {
                out.push(&b.norm.log_scale);
                out.push(&b.norm.bias);
                out.push(&b.net.c1.weight);
                out.push(&b.net.c1.bias);
                out.push(&b.net.c2.weight);
                out.push(&b.net.c2.bias);
                out.push(&b.net.c3.weight);
                out.push(&b.net.c3.bias);
            }
        }
        out
    }
}

fn field_to_tensor(x: &Array2<f64>, arch: &FlowArchitecture, what: &str) -> Result<Tensor> {
    if x.dim() != (arch.nx, arch.ny) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} of shape {}x{}", what, arch.nx, arch.ny),
            found: format!("{}x{}", x.dim().0, x.dim().1),
        });
    }
    let mut t = Tensor::zeros(1, arch.nx, arch.ny);
    for ((i, j), &v) in x.indexed_iter() {
        *t.at_mut(0, i, j) = v;
    }
    Ok(t)
}

fn tensor_to_field(t: &Tensor) -> Array2<f64> {
    debug_assert_eq!(t.c, 1);
    Array2::from_shape_fn((t.h, t.w), |(i, j)| t.at(0, i, j))
}

/// Condition downsampled by mean pooling to each scale's resolution.
pub(crate) fn condition_pyramid(cond: &Tensor, n_scales: usize) -> Vec<Tensor> {
    let mut levels = Vec::with_capacity(n_scales);
    let mut cur = avg_pool2(cond);
    for s in 0..n_scales {
        if s > 0 {
            cur = avg_pool2(&cur);
        }
        levels.push(cur.clone());
    }
    levels
}

fn apply_perm(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.c, t.h, t.w);
    let plane = t.h * t.w;
    for (k, &p) in perm.iter().enumerate() {
        out.data[k * plane..(k + 1) * plane].copy_from_slice(&t.data[p * plane..(p + 1) * plane]);
    }
    out
}

fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let plane = t.h * t.w;
    let mut a = Tensor::zeros(first, t.h, t.w);
    let mut b = Tensor::zeros(t.c - first, t.h, t.w);
    a.data.copy_from_slice(&t.data[..first * plane]);
    b.data.copy_from_slice(&t.data[first * plane..]);
    (a, b)
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut out = Tensor::zeros(a.c + b.c, a.h, a.w);
    out.data[..a.data.len()].copy_from_slice(&a.data);
    out.data[a.data.len()..].copy_from_slice(&b.data);
    out
}

pub(crate) struct BlockCache {
    norm_in: Tensor,
    coupling: CouplingCache,
    xb: Tensor,
    s: Tensor,
}

pub(crate) struct FlowCache {
    blocks: Vec<Vec<BlockCache>>,
}

impl FlowCache {
    fn empty(arch: &FlowArchitecture) -> Self {
        Self {
            blocks: (0..arch.n_scales).map(|_| Vec::new()).collect(),
        }
    }
}

fn block_forward(
    block: &Block,
    t: &Tensor,
    cond: &Tensor,
    cache: Option<&mut Vec<BlockCache>>,
) -> (Tensor, f64) {
    let (normed, mut logdet) = block.norm.forward(t);
    let permuted = apply_perm(&normed, &block.perm);
    let half = permuted.c / 2;
    let (xa, xb) = split_channels(&permuted, half);
    let (shift, cc) = block.net.forward(&xa, cond);
    let mut s = Tensor::zeros(half, t.h, t.w);
    for (sv, &rv) in s.data.iter_mut().zip(cc.raw.data.iter()) {
        let sc = SCALE_CLAMP * (rv / SCALE_CLAMP).tanh();
        *sv = sc.exp();
        logdet += sc;
    }
    let mut yb = Tensor::zeros(half, t.h, t.w);
    for k in 0..yb.data.len() {
        yb.data[k] = s.data[k] * xb.data[k] + shift.data[k];
    }
    let out = concat_channels(&xa, &yb);
    if let Some(list) = cache {
        list.push(BlockCache {
            norm_in: t.clone(),
            coupling: cc,
            xb,
            s,
        });
    }
    (out, logdet)
}

fn block_inverse(block: &Block, y: &Tensor, cond: &Tensor) -> Tensor {
    let half = y.c / 2;
    let (ya, yb) = split_channels(y, half);
    let (shift, cc) = block.net.forward(&ya, cond);
    let mut xb = Tensor::zeros(half, y.h, y.w);
    for k in 0..xb.data.len() {
        let s = (SCALE_CLAMP * (cc.raw.data[k] / SCALE_CLAMP).tanh()).exp();
        xb.data[k] = (yb.data[k] - shift.data[k]) / s;
    }
    let permuted = concat_channels(&ya, &xb);
    let normed = apply_perm(&permuted, &block.perm_inv);
    block.norm.inverse(&normed)
}

pub(crate) fn forward_internal(
    params: &FlowParameters,
    x: &Tensor,
    cond_pyramid: &[Tensor],
    mut cache: Option<&mut FlowCache>,
) -> Result<FlowOutput> {
    let arch = &params.arch;
    let mut latent = Vec::with_capacity(arch.latent_dim());
    let mut logdet = 0.0;
    let mut t = x.clone();
    for (s, blocks) in params.scales.iter().enumerate() {
        t = squeeze(&t);
        let cond = &cond_pyramid[s];
        for block in blocks {
            let slot = cache.as_deref_mut().map(|c| &mut c.blocks[s]);
            let (out, ld) = block_forward(block, &t, cond, slot);
            t = out;
            logdet += ld;
        }
        ensure_finite(&t, &format!("scale {s} output"))?;
        if s + 1 < arch.n_scales {
            let (keep, out) = split_channels(&t, t.c / 2);
            latent.extend_from_slice(&out.data);
            t = keep;
        } else {
            latent.extend_from_slice(&t.data);
        }
    }
    if !logdet.is_finite() {
        return Err(Error::NonFinite {
            location: "log-determinant".into(),
        });
    }
    Ok(FlowOutput {
        latent: LatentVector { values: latent },
        log_det: logdet,
    })
}

/// Maps a normalized field and condition to (latent, log_det).
pub fn forward_normalize(
    params: &FlowParameters,
    x: &Array2<f64>,
    cond: &Array2<f64>,
) -> Result<FlowOutput> {
    let xt = field_to_tensor(x, &params.arch, "field")?;
    let ct = field_to_tensor(cond, &params.arch, "condition")?;
    let pyramid = condition_pyramid(&ct, params.arch.n_scales);
    forward_internal(params, &xt, &pyramid, None)
}

/// Maps a latent point back to a normalized field under the condition.
pub fn inverse_sample(
    params: &FlowParameters,
    z: &LatentVector,
    cond: &Array2<f64>,
) -> Result<Array2<f64>> {
    let arch = &params.arch;
    if z.dim() != arch.latent_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("latent of dimension {}", arch.latent_dim()),
            found: format!("{}", z.dim()),
        });
    }
    let ct = field_to_tensor(cond, arch, "condition")?;
    let pyramid = condition_pyramid(&ct, arch.n_scales);
    let shapes = arch.latent_chunk_shapes();
    let mut offsets = Vec::with_capacity(shapes.len() + 1);
    offsets.push(0usize);
    for &(c, h, w) in &shapes {
        offsets.push(offsets.last().unwrap() + c * h * w);
    }
    let mut t: Option<Tensor> = None;
    for s in (0..arch.n_scales).rev() {
        let (c, h, w) = shapes[s];
        let chunk = &z.values[offsets[s]..offsets[s + 1]];
        let mut chunk_t = Tensor::zeros(c, h, w);
        chunk_t.data.copy_from_slice(chunk);
        let mut cur = match t.take() {
            Some(keep) => concat_channels(&keep, &chunk_t),
            None => chunk_t,
        };
        for block in params.scales[s].iter().rev() {
            cur = block_inverse(block, &cur, &pyramid[s]);
        }
        ensure_finite(&cur, &format!("scale {s} inverse"))?;
        t = Some(unsqueeze(&cur));
    }
    Ok(tensor_to_field(&t.unwrap()))
}

/// Mean over the batch of 1/2 |z|^2 - log_det on normalized pairs.
pub fn loss(params: &FlowParameters, batch: &[(Array2<f64>, Array2<f64>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("loss needs a non-empty batch".into()));
    }
    let mut total = 0.0;
    for (k, (x, cond)) in batch.iter().enumerate() {
        let out = forward_normalize(params, x, cond)?;
        let l = 0.5 * out.latent.norm_sq() - out.log_det;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { sample: k });
        }
        total += l;
    }
    Ok(total / batch.len() as f64)
}

/// Mean batch loss together with its gradient for every parameter
/// tensor, in checkpoint order. Takes normalized pairs like [`loss`].
pub fn loss_and_gradient(
    params: &FlowParameters,
    batch: &[(Array2<f64>, Array2<f64>)],
) -> Result<(f64, FlowGrads)> {
    if batch.is_empty() {
        return Err(Error::Config("loss needs a non-empty batch".into()));
    }
    let mut grads = FlowGrads::zeros_like(params);
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (k, (x, cond)) in batch.iter().enumerate() {
        let xt = field_to_tensor(x, &params.arch, "field")?;
        let ct = field_to_tensor(cond, &params.arch, "condition")?;
        let pyramid = condition_pyramid(&ct, params.arch.n_scales);
        let mut cache = FlowCache::empty(&params.arch);
        let out = forward_internal(params, &xt, &pyramid, Some(&mut cache))?;
        let l = 0.5 * out.latent.norm_sq() - out.log_det;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { sample: k });
        }
        total += l;
        let dz: Vec<f64> = out.latent.values.iter().map(|z| z * inv).collect();
        backward_internal(params, &cache, &dz, -inv, &mut grads);
    }
    Ok((total * inv, grads))
}

/// Gradient buffers matching [`FlowParameters`] in checkpoint order.
pub struct FlowGrads {
    tensors: Vec<Vec<f64>>,
}

impl FlowGrads {
    pub fn zeros_like(params: &FlowParameters) -> Self {
        Self {
            tensors: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn scale_by(&mut self, f: f64) {
        for t in &mut self.tensors {
            for v in t {
                *v *= f;
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    fn block_slices(&mut self, scale_sizes: &[usize], s: usize, b: usize) -> &mut [Vec<f64>] {
        let mut idx = 0;
        for (si, &n) in scale_sizes.iter().enumerate() {
            if si == s {
                idx += b * 8;
                break;
            }
            idx += n * 8;
        }
        &mut self.tensors[idx..idx + 8]
    }
}

/// Backward pass through a cached forward: seeds are the per-sample
/// latent gradient and the log-det coefficient; parameter gradients
/// accumulate into `grads`.
pub(crate) fn backward_internal(
    params: &FlowParameters,
    cache: &FlowCache,
    dz: &[f64],
    dlogdet: f64,
    grads: &mut FlowGrads,
) {
    let arch = &params.arch;
    let shapes = arch.latent_chunk_shapes();
    let mut offsets = Vec::with_capacity(shapes.len() + 1);
    offsets.push(0usize);
    for &(c, h, w) in &shapes {
        offsets.push(offsets.last().unwrap() + c * h * w);
    }
    let scale_sizes: Vec<usize> = params.scales.iter().map(|b| b.len()).collect();
    let mut dt: Option<Tensor> = None;
    for s in (0..arch.n_scales).rev() {
        let (c, h, w) = shapes[s];
        let mut chunk = Tensor::zeros(c, h, w);
        chunk
            .data
            .copy_from_slice(&dz[offsets[s]..offsets[s + 1]]);
        let mut cur = match dt.take() {
            Some(keep) => concat_channels(&keep, &chunk),
            None => chunk,
        };
        for (b, block) in params.scales[s].iter().enumerate().rev() {
            let bc = &cache.blocks[s][b];
            let half = cur.c / 2;
            let (dya, dyb) = split_channels(&cur, half);
            // yb = s*xb + shift, s = exp(C tanh(raw/C))
            let mut dxb = Tensor::zeros(half, cur.h, cur.w);
            let mut draw = Tensor::zeros(half, cur.h, cur.w);
            for k in 0..dyb.data.len() {
                let sv = bc.s.data[k];
                dxb.data[k] = dyb.data[k] * sv;
                let sc = sv.ln();
                let gate = 1.0 - (sc / SCALE_CLAMP) * (sc / SCALE_CLAMP);
                draw.data[k] = (dyb.data[k] * bc.xb.data[k] * sv + dlogdet) * gate;
            }
            let gslices = grads.block_slices(&scale_sizes, s, b);
            let mut net_grads = layers::CouplingNetGrads {
                w1: std::mem::take(&mut gslices[2]),
                b1: std::mem::take(&mut gslices[3]),
                w2: std::mem::take(&mut gslices[4]),
                b2: std::mem::take(&mut gslices[5]),
                w3: std::mem::take(&mut gslices[6]),
                b3: std::mem::take(&mut gslices[7]),
            };
            let dxa_net = block
                .net
                .backward(&bc.coupling, &draw, &dyb, half, &mut net_grads);
            gslices[2] = net_grads.w1;
            gslices[3] = net_grads.b1;
            gslices[4] = net_grads.w2;
            gslices[5] = net_grads.b2;
            gslices[6] = net_grads.w3;
            gslices[7] = net_grads.b3;
            let mut dperm = Tensor::zeros(cur.c, cur.h, cur.w);
            let plane = cur.h * cur.w;
            for k in 0..half {
                for p in 0..plane {
                    dperm.data[k * plane + p] = dya.data[k * plane + p] + dxa_net.data[k * plane + p];
                }
            }
            for k in 0..half {
                for p in 0..plane {
                    dperm.data[(half + k) * plane + p] = dxb.data[k * plane + p];
                }
            }
            let mut dnormed = Tensor::zeros(cur.c, cur.h, cur.w);
            for (k, &p) in block.perm.iter().enumerate() {
                dnormed.data[p * plane..(p + 1) * plane]
                    .copy_from_slice(&dperm.data[k * plane..(k + 1) * plane]);
            }
            let gslices = grads.block_slices(&scale_sizes, s, b);
            let (gls, gb) = {
                let (a, rest) = gslices.split_at_mut(1);
                (&mut a[0], &mut rest[0])
            };
            cur = block.norm.backward(&bc.norm_in, &dnormed, dlogdet, gls, gb);
        }
        // gradient with respect to this scale's input, which is the
        // kept half of the previous scale (or the field itself at s=0)
        dt = Some(unsqueeze(&cur));
    }
    let _ = dt;
}

/// Draws a standard-normal latent of the architecture's dimension.
pub fn sample_latent(arch: &FlowArchitecture, rng: &mut impl Rng) -> LatentVector {
    LatentVector::standard_normal(arch.latent_dim(), rng)
}

/// Writes parameters as an NFC1 checkpoint (f32 tensors).
pub fn save_checkpoint(params: &FlowParameters, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)
}

pub fn write_checkpoint(params: &FlowParameters, w: &mut impl Write) -> Result<()> {
    nfc::write_header(w)?;
    let arch = &params.arch;
    let meta = [
        CHECKPOINT_VERSION as f64,
        arch.nx as f64,
        arch.ny as f64,
        arch.n_scales as f64,
        arch.n_blocks_per_scale as f64,
        arch.hidden_channels as f64,
    ];
    nfc::write_tensor(w, &[meta.len()], &meta)?;
    let stats = [
        params.field_mean,
        params.field_std,
        params.cond_mean,
        params.cond_std,
    ];
    nfc::write_tensor(w, &[4], &stats)?;
    let flags: Vec<f64> = params
        .scales
        .iter()
        .flat_map(|blocks| blocks.iter().map(|b| f64::from(u8::from(b.norm.initialized))))
        .collect();
    nfc::write_tensor(w, &[flags.len()], &flags)?;
    for t in params.tensors() {
        nfc::write_tensor(w, &[t.len()], t)?;
    }
    Ok(())
}

/// Reads an NFC1 checkpoint back into parameters, rebuilding the fixed
/// permutations from the architecture.
pub fn load_checkpoint(path: &Path) -> Result<FlowParameters> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<FlowParameters> {
    nfc::read_header(r)?;
    let (_, meta) = nfc::read_tensor(r)?;
    if meta.len() != 6 {
        return Err(Error::Config(format!(
            "checkpoint metadata has {} entries, expected 6",
            meta.len()
        )));
    }
    if meta[0] as u32 != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            meta[0]
        )));
    }
    let arch = FlowArchitecture {
        nx: meta[1] as usize,
        ny: meta[2] as usize,
        n_scales: meta[3] as usize,
        n_blocks_per_scale: meta[4] as usize,
        hidden_channels: meta[5] as usize,
    };
    let mut params = FlowParameters::identity_init(arch, 0)?;
    let (_, stats) = nfc::read_tensor(r)?;
    if stats.len() != 4 {
        return Err(Error::Config("checkpoint stats must have 4 entries".into()));
    }
    params.field_mean = stats[0];
    params.field_std = stats[1];
    params.cond_mean = stats[2];
    params.cond_std = stats[3];
    let (_, flags) = nfc::read_tensor(r)?;
    let n_blocks = arch.n_scales * arch.n_blocks_per_scale;
    if flags.len() != n_blocks {
        return Err(Error::Config(format!(
            "checkpoint has {} init flags, expected {}",
            flags.len(),
            n_blocks
        )));
    }
    for (k, blocks) in params.scales.iter_mut().enumerate() {
        for (b, block) in blocks.iter_mut().enumerate() {
            block.norm.initialized = flags[k * arch.n_blocks_per_scale + b] != 0.0;
        }
    }
    for t in params.tensors_mut() {
        let (shape, data) = nfc::read_tensor(r)?;
        if shape != [t.len()] {
            return Err(Error::ShapeMismatch {
                expected: format!("tensor of {} values", t.len()),
                found: format!("{shape:?}"),
            });
        }
        *t = data;
    }
    Ok(params)
}
