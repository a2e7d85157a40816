//! Building blocks of the conditional flow: channel-major tensors,
//! space-to-channel squeezing, 3x3 convolutions, activation
//! normalization, and the affine-coupling sub-network. Every layer
//! provides a closed-form backward pass; the tests in this crate hold
//! them to central finite differences.

use crate::error::{Error, Result};

/// Dense (channels, height, width) array in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut() -> f64) -> Self {
        Self {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| f()).collect(),
        }
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.h + i) * self.w + j]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, i: usize, j: usize) -> &mut f64 {
        &mut self.data[(c * self.h + i) * self.w + j]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Space-to-channel: each 2x2 spatial block becomes 4 channels.
/// Volume-preserving relabeling, zero log-det.
pub fn squeeze(x: &Tensor) -> Tensor {
    debug_assert!(x.h % 2 == 0 && x.w % 2 == 0);
    let (c, h, w) = (x.c, x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(4 * c, h, w);
    for ci in 0..c {
        for di in 0..2 {
            for dj in 0..2 {
                let co = ci * 4 + di * 2 + dj;
                for i in 0..h {
                    for j in 0..w {
                        *out.at_mut(co, i, j) = x.at(ci, 2 * i + di, 2 * j + dj);
                    }
                }
            }
        }
    }
    out
}

/// Channel-to-space inverse of [`squeeze`].
pub fn unsqueeze(y: &Tensor) -> Tensor {
    debug_assert!(y.c % 4 == 0);
    let (c, h, w) = (y.c / 4, y.h * 2, y.w * 2);
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        for di in 0..2 {
            for dj in 0..2 {
                let co = ci * 4 + di * 2 + dj;
                for i in 0..y.h {
                    for j in 0..y.w {
                        *out.at_mut(ci, 2 * i + di, 2 * j + dj) = y.at(co, i, j);
                    }
                }
            }
        }
    }
    out
}

/// 2x2 mean pooling, used to bring the condition to each scale's
/// resolution.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    debug_assert!(x.h % 2 == 0 && x.w % 2 == 0);
    let mut out = Tensor::zeros(x.c, x.h / 2, x.w / 2);
    for c in 0..x.c {
        for i in 0..out.h {
            for j in 0..out.w {
                *out.at_mut(c, i, j) = 0.25
                    * (x.at(c, 2 * i, 2 * j)
                        + x.at(c, 2 * i + 1, 2 * j)
                        + x.at(c, 2 * i, 2 * j + 1)
                        + x.at(c, 2 * i + 1, 2 * j + 1));
            }
        }
    }
    out
}

/// Same-padded 3x3 convolution. Weights are [out][in][3][3] row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3x3 {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            weight: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
            in_ch,
            out_ch,
        }
    }

    #[inline]
    fn w_at(&self, o: usize, c: usize, di: usize, dj: usize) -> f64 {
        self.weight[((o * self.in_ch + c) * 3 + di) * 3 + dj]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_ch);
        let (h, w) = (x.h, x.w);
        let mut y = Tensor::zeros(self.out_ch, h, w);
        for o in 0..self.out_ch {
            let yo = &mut y.data[o * h * w..(o + 1) * h * w];
            yo.fill(self.bias[o]);
            for c in 0..self.in_ch {
                let xc = x.plane(c);
                for di in 0..3usize {
                    for dj in 0..3usize {
                        let wv = self.w_at(o, c, di, dj);
                        if wv == 0.0 {
                            continue;
                        }
                        // y[i][j] += wv * x[i+di-1][j+dj-1]
                        let i0 = 1usize.saturating_sub(di);
                        let i1 = h - (di.saturating_sub(1));
                        let j0 = 1usize.saturating_sub(dj);
                        let j1 = w - (dj.saturating_sub(1));
                        for i in i0..i1 {
                            let si = i + di - 1;
                            let yrow = i * w;
                            let xrow = si * w;
                            for j in j0..j1 {
                                yo[yrow + j] += wv * xc[xrow + j + dj - 1];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `gw`/`gb` and returns the
    /// input gradient.
    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        gw: &mut [f64],
        gb: &mut [f64],
    ) -> Tensor {
        let (h, w) = (x.h, x.w);
        let mut dx = Tensor::zeros(self.in_ch, h, w);
        for o in 0..self.out_ch {
            let dyo = dy.plane(o);
            gb[o] += dyo.iter().sum::<f64>();
            for c in 0..self.in_ch {
                let xc = x.plane(c);
                let dxc = &mut dx.data[c * h * w..(c + 1) * h * w];
                for di in 0..3usize {
                    for dj in 0..3usize {
                        let i0 = 1usize.saturating_sub(di);
                        let i1 = h - (di.saturating_sub(1));
                        let j0 = 1usize.saturating_sub(dj);
                        let j1 = w - (dj.saturating_sub(1));
                        let mut acc = 0.0;
                        let wv = self.w_at(o, c, di, dj);
                        for i in i0..i1 {
                            let si = i + di - 1;
                            let yrow = i * w;
                            let xrow = si * w;
                            for j in j0..j1 {
                                let g = dyo[yrow + j];
                                acc += g * xc[xrow + j + dj - 1];
                                if wv != 0.0 {
                                    dxc[xrow + j + dj - 1] += wv * g;
                                }
                            }
                        }
                        gw[((o * self.in_ch + c) * 3 + di) * 3 + dj] += acc;
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel affine normalization y = exp(log_scale) * x + bias with
/// exact log-det contribution h*w*sum(log_scale).
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub log_scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub initialized: bool,
}

impl ActNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            log_scale: vec![0.0; channels],
            bias: vec![0.0; channels],
            initialized: false,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, f64) {
        let mut y = x.clone();
        let mut logdet = 0.0;
        let area = (x.h * x.w) as f64;
        for c in 0..x.c {
            let s = self.log_scale[c].exp();
            let b = self.bias[c];
            for v in &mut y.data[c * x.h * x.w..(c + 1) * x.h * x.w] {
                *v = s * *v + b;
            }
            logdet += area * self.log_scale[c];
        }
        (y, logdet)
    }

    pub fn inverse(&self, y: &Tensor) -> Tensor {
        let mut x = y.clone();
        for c in 0..y.c {
            let s = self.log_scale[c].exp();
            let b = self.bias[c];
            for v in &mut x.data[c * y.h * y.w..(c + 1) * y.h * y.w] {
                *v = (*v - b) / s;
            }
        }
        x
    }

    /// dlogdet is the loss sensitivity to this layer's log-det term.
    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        dlogdet: f64,
        g_log_scale: &mut [f64],
        g_bias: &mut [f64],
    ) -> Tensor {
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        let area = (x.h * x.w) as f64;
        for c in 0..x.c {
            let s = self.log_scale[c].exp();
            let lo = c * x.h * x.w;
            let hi = lo + x.h * x.w;
            let mut gls = dlogdet * area;
            let mut gb = 0.0;
            for k in lo..hi {
                let g = dy.data[k];
                dx.data[k] = g * s;
                gls += g * s * x.data[k];
                gb += g;
            }
            g_log_scale[c] += gls;
            g_bias[c] += gb;
        }
        dx
    }

    /// Data-dependent init: set scale/bias so this batch of inputs comes
    /// out zero-mean, unit-std per channel.
    pub fn init_from(&mut self, batch: &[Tensor]) {
        let c = self.log_scale.len();
        for ch in 0..c {
            let mut n = 0usize;
            let mut mean = 0.0;
            for t in batch {
                for &v in t.plane(ch) {
                    mean += v;
                    n += 1;
                }
            }
            mean /= n as f64;
            let mut var = 0.0;
            for t in batch {
                for &v in t.plane(ch) {
                    var += (v - mean) * (v - mean);
                }
            }
            let std = (var / n as f64).sqrt().max(1e-6);
            self.log_scale[ch] = -std.ln();
            self.bias[ch] = -mean / std;
        }
        self.initialized = true;
    }
}

/// Bound on coupling log-scales, applied as a tanh soft clamp. Keeps
/// the worst-case gain of each inverse step at e^1 so that sampling far
/// from the training manifold cannot cascade into overflow.
pub const SCALE_CLAMP: f64 = 1.0;

/// Three-convolution scale/shift network of an affine coupling layer.
/// Takes the passive half concatenated with the scale-matched condition
/// and emits per-element (raw_scale, shift) pairs for the active half.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingNet {
    pub c1: Conv3x3,
    pub c2: Conv3x3,
    pub c3: Conv3x3,
}

/// Intermediates one coupling forward pass keeps for its backward pass.
pub struct CouplingCache {
    pub net_in: Tensor,
    pub a1: Tensor,
    pub a2: Tensor,
    pub raw: Tensor,
}

impl CouplingNet {
    /// `half` is the channel count of each coupling half; the network
    /// input is the passive half plus `cond_ch` condition channels.
    pub fn new(half: usize, cond_ch: usize, hidden: usize, mut init: impl FnMut() -> f64) -> Self {
        let mut c1 = Conv3x3::zeros(half + cond_ch, hidden);
        let mut c2 = Conv3x3::zeros(hidden, hidden);
        // final layer stays zero so a fresh flow is the identity
        let c3 = Conv3x3::zeros(hidden, 2 * half);
        for v in c1.weight.iter_mut().chain(c2.weight.iter_mut()) {
            *v = init();
        }
        Self { c1, c2, c3 }
    }

    /// Returns the shift tensor plus a cache whose `raw` field holds the
    /// pre-clamp scale logits.
    pub fn forward(&self, xa: &Tensor, cond: &Tensor) -> (Tensor, CouplingCache) {
        debug_assert_eq!(xa.h, cond.h);
        let mut net_in = Tensor::zeros(xa.c + cond.c, xa.h, xa.w);
        net_in.data[..xa.data.len()].copy_from_slice(&xa.data);
        net_in.data[xa.data.len()..].copy_from_slice(&cond.data);
        let mut a1 = self.c1.forward(&net_in);
        for v in &mut a1.data {
            *v = v.tanh();
        }
        let mut a2 = self.c2.forward(&a1);
        for v in &mut a2.data {
            *v = v.tanh();
        }
        let out = self.c3.forward(&a2);
        let half = xa.c;
        let plane = xa.h * xa.w;
        let mut raw = Tensor::zeros(half, xa.h, xa.w);
        let mut shift = Tensor::zeros(half, xa.h, xa.w);
        raw.data.copy_from_slice(&out.data[..half * plane]);
        shift.data.copy_from_slice(&out.data[half * plane..]);
        (
            shift,
            CouplingCache {
                net_in,
                a1,
                a2,
                raw,
            },
        )
    }

    /// Backward from gradients on (raw_scale, shift) to the passive-half
    /// input gradient; condition gradients are discarded.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cache: &CouplingCache,
        draw: &Tensor,
        dshift: &Tensor,
        half: usize,
        grads: &mut CouplingNetGrads,
    ) -> Tensor {
        let (h, w) = (draw.h, draw.w);
        let plane = h * w;
        let mut dout = Tensor::zeros(2 * half, h, w);
        dout.data[..half * plane].copy_from_slice(&draw.data);
        dout.data[half * plane..].copy_from_slice(&dshift.data);
        let mut da2 = self
            .c3
            .backward(&cache.a2, &dout, &mut grads.w3, &mut grads.b3);
        for (d, a) in da2.data.iter_mut().zip(cache.a2.data.iter()) {
            *d *= 1.0 - a * a;
        }
        let mut da1 = self
            .c2
            .backward(&cache.a1, &da2, &mut grads.w2, &mut grads.b2);
        for (d, a) in da1.data.iter_mut().zip(cache.a1.data.iter()) {
            *d *= 1.0 - a * a;
        }
        let dnet_in = self
            .c1
            .backward(&cache.net_in, &da1, &mut grads.w1, &mut grads.b1);
        let mut dxa = Tensor::zeros(half, h, w);
        dxa.data.copy_from_slice(&dnet_in.data[..half * plane]);
        dxa
    }
}

/// Gradient buffers matching a [`CouplingNet`].
pub struct CouplingNetGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl CouplingNetGrads {
    pub fn zeros_like(net: &CouplingNet) -> Self {
        Self {
            w1: vec![0.0; net.c1.weight.len()],
            b1: vec![0.0; net.c1.bias.len()],
            w2: vec![0.0; net.c2.weight.len()],
            b2: vec![0.0; net.c2.bias.len()],
            w3: vec![0.0; net.c3.weight.len()],
            b3: vec![0.0; net.c3.bias.len()],
        }
    }
}

pub fn ensure_finite(t: &Tensor, location: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: location.into(),
        })
    }
}
