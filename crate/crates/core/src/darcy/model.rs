//! Patch-token attention regressor with a hand-written reverse pass.
//!
//! All trainable tensors live in one flat vector; a [`Layout`] maps every
//! [`ParamGroup`] to its slice. Gradients use the same layout, which keeps
//! the optimizer, checkpoints and phase-2 masking trivial.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::softmax::{row_softmax, row_softmax_backward};
use crate::error::{shape, usage, Result};
use crate::linalg::Matrix;

use super::{patchify, unpatchify};

/// Channels of the first convolution in the optional encoder.
pub const CONV_HIDDEN_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// One linear map from patch pixels to `d`.
    Linear,
    /// Two same-padded 3×3 convolutions (tanh between), then per-patch
    /// flattening of `d / patch²` output channels.
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    EmbedW,
    EmbedB,
    Conv1K,
    Conv1B,
    Conv2K,
    Conv2B,
    Pos,
    Wq,
    Wk,
    Wv,
    Dec1W,
    Dec1B,
    Dec2W,
    Dec2B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub grid: usize,
    pub patch: usize,
    pub d: usize,
    pub r: usize,
    pub encoder: EncoderKind,
}

impl ModelDims {
    pub fn tokens(&self) -> usize {
        let side = self.grid / self.patch;
        side * side
    }

    pub fn pixels(&self) -> usize {
        self.patch * self.patch
    }

    pub fn hidden(&self) -> usize {
        2 * self.d
    }

    pub fn conv_out_channels(&self) -> usize {
        self.d / self.pixels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    group: ParamGroup,
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub dims: ModelDims,
    slots: Vec<Slot>,
    len: usize,
}

impl Layout {
    pub fn new(dims: ModelDims) -> Result<Self> {
        if dims.patch == 0 || dims.grid == 0 || !dims.grid.is_multiple_of(dims.patch) {
            return Err(usage(format!(
                "patch size {} must divide grid {}",
                dims.patch, dims.grid
            )));
        }
        if dims.d == 0 || dims.r == 0 {
            return Err(usage("d and r must be positive"));
        }
        let (t, p, d, r, hid) = (dims.tokens(), dims.pixels(), dims.d, dims.r, dims.hidden());
        let mut shapes = Vec::new();
        match dims.encoder {
            EncoderKind::Linear => {
                shapes.push((ParamGroup::EmbedW, p, d));
                shapes.push((ParamGroup::EmbedB, 1, d));
            }
            EncoderKind::Conv => {
                if d % p != 0 {
                    return Err(usage(format!(
                        "conv encoder needs d ({d}) divisible by patch pixels ({p})"
                    )));
                }
                let c2 = dims.conv_out_channels();
                shapes.push((ParamGroup::Conv1K, CONV_HIDDEN_CHANNELS, 9));
                shapes.push((ParamGroup::Conv1B, 1, CONV_HIDDEN_CHANNELS));
                shapes.push((ParamGroup::Conv2K, c2, CONV_HIDDEN_CHANNELS * 9));
                shapes.push((ParamGroup::Conv2B, 1, c2));
            }
        }
        shapes.extend([
            (ParamGroup::Pos, t, d),
            (ParamGroup::Wq, d, r),
            (ParamGroup::Wk, d, r),
            (ParamGroup::Wv, d, d),
            (ParamGroup::Dec1W, d, hid),
            (ParamGroup::Dec1B, 1, hid),
            (ParamGroup::Dec2W, hid, p),
            (ParamGroup::Dec2B, 1, p),
        ]);
        let mut slots = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (group, rows, cols) in shapes {
            slots.push(Slot {
                group,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        }
        Ok(Self {
            dims,
            slots,
            len: offset,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.slots.iter().map(|s| s.group)
    }

    fn slot(&self, group: ParamGroup) -> &Slot {
        self.slots
            .iter()
            .find(|s| s.group == group)
            .expect("parameter group not present in this layout")
    }

    pub fn has(&self, group: ParamGroup) -> bool {
        self.slots.iter().any(|s| s.group == group)
    }

    pub fn range(&self, group: ParamGroup) -> core::ops::Range<usize> {
        let s = self.slot(group);
        s.offset..s.offset + s.rows * s.cols
    }

    pub fn shape(&self, group: ParamGroup) -> (usize, usize) {
        let s = self.slot(group);
        (s.rows, s.cols)
    }

    pub fn matrix(&self, params: &[f64], group: ParamGroup) -> Matrix {
        let (rows, cols) = self.shape(group);
        Matrix::from_vec(rows, cols, params[self.range(group)].to_vec()).expect("layout shape")
    }
}

/// Which parameter gradients a backward pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    Full,
    /// Only `(W_Q, W_K)`; every other entry is left untouched.
    QueryKeyOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarcyModel {
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl DarcyModel {
    /// Initialization: uniform `±1/√fan_in` weights, zero biases, positional
    /// bias `N(0, 0.02²)`.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        let layout = Layout::new(dims)?;
        let mut params = vec![0.0; layout.len()];
        for slot in layout.slots.clone() {
            let range = slot.offset..slot.offset + slot.rows * slot.cols;
            let fan_in = match slot.group {
                ParamGroup::EmbedW | ParamGroup::Wq | ParamGroup::Wk | ParamGroup::Wv => slot.rows,
                ParamGroup::Dec1W | ParamGroup::Dec2W => slot.rows,
                ParamGroup::Conv1K | ParamGroup::Conv2K => slot.cols,
                ParamGroup::Pos => {
                    for v in &mut params[range] {
                        *v = 0.02 * rng.sample::<f64, _>(StandardNormal);
                    }
                    continue;
                }
                _ => continue,
            };
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for v in &mut params[range] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { layout, params })
    }

    pub fn dims(&self) -> ModelDims {
        self.layout.dims
    }

    pub fn group(&self, group: ParamGroup) -> Matrix {
        self.layout.matrix(&self.params, group)
    }

    pub fn group_slice(&self, group: ParamGroup) -> &[f64] {
        &self.params[self.layout.range(group)]
    }

    pub fn group_slice_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        let range = self.layout.range(group);
        &mut self.params[range]
    }

    /// `‖W_Q‖²_F + ‖W_K‖²_F`.
    pub fn qk_norm_sq(&self) -> f64 {
        [ParamGroup::Wq, ParamGroup::Wk]
            .iter()
            .flat_map(|&g| self.group_slice(g))
            .map(|v| v * v)
            .sum()
    }

    /// Predicted (normalized) pressure field for a normalized permeability.
    pub fn predict(&self, field: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward(field)?;
        let dims = self.dims();
        unpatchify(&cache.out, dims.grid, dims.patch)
    }

    pub fn forward(&self, field: &[f64]) -> Result<ForwardCache> {
        let dims = self.dims();
        let n = dims.grid;
        if field.len() != n * n {
            return Err(shape(format!(
                "input field has {} values, expected {}",
                field.len(),
                n * n
            )));
        }
        let l = &self.layout;
        let p = &self.params;
        let (encoder, x) = match dims.encoder {
            EncoderKind::Linear => {
                let patches = patchify(field, n, dims.patch)?;
                let mut x = patches.matmul(&l.matrix(p, ParamGroup::EmbedW))?;
                x.add_row_broadcast(&p[l.range(ParamGroup::EmbedB)])?;
                (EncoderCache::Linear { patches }, x)
            }
            EncoderKind::Conv => {
                let c2 = dims.conv_out_channels();
                let mut c1 = conv_same(
                    field,
                    1,
                    n,
                    &p[l.range(ParamGroup::Conv1K)],
                    &p[l.range(ParamGroup::Conv1B)],
                    CONV_HIDDEN_CHANNELS,
                );
                c1.iter_mut().for_each(|v| *v = libm::tanh(*v));
                let c2_out = conv_same(
                    &c1,
                    CONV_HIDDEN_CHANNELS,
                    n,
                    &p[l.range(ParamGroup::Conv2K)],
                    &p[l.range(ParamGroup::Conv2B)],
                    c2,
                );
                let x = channels_to_tokens(&c2_out, c2, n, dims.patch);
                (
                    EncoderCache::Conv {
                        input: field.to_vec(),
                        c1,
                    },
                    x,
                )
            }
        };
        let xh = x.add(&l.matrix(p, ParamGroup::Pos))?;
        let wq = l.matrix(p, ParamGroup::Wq);
        let wk = l.matrix(p, ParamGroup::Wk);
        let wv = l.matrix(p, ParamGroup::Wv);
        let q = xh.matmul(&wq)?;
        let k = xh.matmul(&wk)?;
        let m = q.matmul_t(&k)?.scale(1.0 / libm::sqrt(dims.d as f64));
        let s = row_softmax(&m, 1.0)?;
        let v = xh.matmul(&wv)?;
        let a = s.matmul(&v)?;
        let mut z1 = a.matmul(&l.matrix(p, ParamGroup::Dec1W))?;
        z1.add_row_broadcast(&p[l.range(ParamGroup::Dec1B)])?;
        let hidden = z1.map(libm::tanh);
        let mut out = hidden.matmul(&l.matrix(p, ParamGroup::Dec2W))?;
        out.add_row_broadcast(&p[l.range(ParamGroup::Dec2B)])?;
        Ok(ForwardCache {
            encoder,
            xh,
            q,
            k,
            s,
            v,
            a,
            hidden,
            out,
        })
    }

    /// Accumulates `∂ℓ/∂θ` into `grad` given `d_out = ∂ℓ/∂(output tokens)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &Matrix,
        mode: BackwardMode,
        grad: &mut [f64],
    ) -> Result<()> {
        let dims = self.dims();
        let l = &self.layout;
        let p = &self.params;
        if grad.len() != l.len() {
            return Err(usage("gradient buffer does not match the parameter layout"));
        }
        if d_out.shape() != cache.out.shape() {
            return Err(shape("output gradient has the wrong shape"));
        }
        let full = mode == BackwardMode::Full;
        let inv_sqrt_d = 1.0 / libm::sqrt(dims.d as f64);

        // decoder
        let w2 = l.matrix(p, ParamGroup::Dec2W);
        let w1 = l.matrix(p, ParamGroup::Dec1W);
        if full {
            add_into(
                grad,
                l.range(ParamGroup::Dec2W),
                &cache.hidden.t_matmul(d_out)?,
            );
            add_vec(grad, l.range(ParamGroup::Dec2B), &d_out.col_sums());
        }
        let d_hidden = d_out.matmul_t(&w2)?;
        let mut d_z1 = d_hidden;
        for (g, hv) in d_z1.as_mut_slice().iter_mut().zip(cache.hidden.as_slice()) {
            *g *= 1.0 - hv * hv;
        }
        if full {
            add_into(grad, l.range(ParamGroup::Dec1W), &cache.a.t_matmul(&d_z1)?);
            add_vec(grad, l.range(ParamGroup::Dec1B), &d_z1.col_sums());
        }
        let d_a = d_z1.matmul_t(&w1)?;

        // attention
        let d_s = d_a.matmul_t(&cache.v)?;
        let d_m = row_softmax_backward(&cache.s, &d_s, 1.0).scale(inv_sqrt_d);
        let d_q = d_m.matmul(&cache.k)?;
        let d_k = d_m.t_matmul(&cache.q)?;
        add_into(grad, l.range(ParamGroup::Wq), &cache.xh.t_matmul(&d_q)?);
        add_into(grad, l.range(ParamGroup::Wk), &cache.xh.t_matmul(&d_k)?);
        if !full {
            return Ok(());
        }
        let d_v = cache.s.t_matmul(&d_a)?;
        add_into(grad, l.range(ParamGroup::Wv), &cache.xh.t_matmul(&d_v)?);
        let mut d_xh = d_v.matmul_t(&l.matrix(p, ParamGroup::Wv))?;
        d_xh.add_assign(&d_q.matmul_t(&l.matrix(p, ParamGroup::Wq))?)?;
        d_xh.add_assign(&d_k.matmul_t(&l.matrix(p, ParamGroup::Wk))?)?;
        add_into(grad, l.range(ParamGroup::Pos), &d_xh);

        // encoder
        match &cache.encoder {
            EncoderCache::Linear { patches } => {
                add_into(grad, l.range(ParamGroup::EmbedW), &patches.t_matmul(&d_xh)?);
                add_vec(grad, l.range(ParamGroup::EmbedB), &d_xh.col_sums());
            }
            EncoderCache::Conv { input, c1 } => {
                let n = dims.grid;
                let c2 = dims.conv_out_channels();
                let d_c2 = tokens_to_channels(&d_xh, c2, n, dims.patch);
                let mut d_c1 = vec![0.0; c1.len()];
                let (k2r, b2r) = (l.range(ParamGroup::Conv2K), l.range(ParamGroup::Conv2B));
                let mut gk2 = vec![0.0; k2r.len()];
                let mut gb2 = vec![0.0; b2r.len()];
                conv_same_backward(
                    c1,
                    CONV_HIDDEN_CHANNELS,
                    n,
                    &p[k2r.clone()],
                    c2,
                    &d_c2,
                    &mut gk2,
                    &mut gb2,
                    Some(&mut d_c1),
                );
                for (g, v) in d_c1.iter_mut().zip(c1) {
                    *g *= 1.0 - v * v;
                }
                let (k1r, b1r) = (l.range(ParamGroup::Conv1K), l.range(ParamGroup::Conv1B));
                let mut gk1 = vec![0.0; k1r.len()];
                let mut gb1 = vec![0.0; b1r.len()];
                conv_same_backward(
                    input,
                    1,
                    n,
                    &p[k1r.clone()],
                    CONV_HIDDEN_CHANNELS,
                    &d_c1,
                    &mut gk1,
                    &mut gb1,
                    None,
                );
                for (range, g) in [(k2r, gk2), (b2r, gb2), (k1r, gk1), (b1r, gb1)] {
                    for (dst, src) in grad[range].iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
            }
        }
        Ok(())
    }

    /// Mean squared error over pixels for one sample and the corresponding
    /// output-token gradient, scaled by `weight`.
    pub fn sample_loss_and_grad(
        &self,
        field: &[f64],
        target: &[f64],
        weight: f64,
        mode: BackwardMode,
        grad: &mut [f64],
    ) -> Result<f64> {
        let dims = self.dims();
        let cache = self.forward(field)?;
        let target_tokens = patchify(target, dims.grid, dims.patch)?;
        let npix = (dims.grid * dims.grid) as f64;
        let mut d_out = cache.out.sub(&target_tokens)?;
        let loss = d_out.frobenius_sq() / npix;
        d_out.scale_mut(2.0 * weight / npix);
        self.backward(&cache, &d_out, mode, grad)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderCache {
    Linear { patches: Matrix },
    Conv { input: Vec<f64>, c1: Vec<f64> },
}

/// Intermediates kept by [`DarcyModel::forward`] for the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub encoder: EncoderCache,
    pub xh: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub s: Matrix,
    pub v: Matrix,
    pub a: Matrix,
    pub hidden: Matrix,
    /// Output tokens, `t × patch²`.
    pub out: Matrix,
}

fn add_into(grad: &mut [f64], range: core::ops::Range<usize>, m: &Matrix) {
    add_vec(grad, range, m.as_slice());
}

fn add_vec(grad: &mut [f64], range: core::ops::Range<usize>, v: &[f64]) {
    for (g, x) in grad[range].iter_mut().zip(v) {
        *g += x;
    }
}

/// Zero-padded 3×3 convolution; `input` is `ci × n × n`, kernel row `o` holds
/// `[c][di][dj]` weights.
fn conv_same(
    input: &[f64],
    ci: usize,
    n: usize,
    kernel: &[f64],
    bias: &[f64],
    co: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; co * n * n];
    for o in 0..co {
        for i in 0..n {
            for j in 0..n {
                let mut acc = bias[o];
                for c in 0..ci {
                    for di in 0..3 {
                        let ii = i as isize + di as isize - 1;
                        if ii < 0 || ii >= n as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j as isize + dj as isize - 1;
                            if jj < 0 || jj >= n as isize {
                                continue;
                            }
                            acc += kernel[o * ci * 9 + c * 9 + di * 3 + dj]
                                * input[c * n * n + ii as usize * n + jj as usize];
                        }
                    }
                }
                out[o * n * n + i * n + j] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_same_backward(
    input: &[f64],
    ci: usize,
    n: usize,
    kernel: &[f64],
    co: usize,
    d_out: &[f64],
    d_kernel: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut Vec<f64>>,
) {
    for o in 0..co {
        for i in 0..n {
            for j in 0..n {
                let g = d_out[o * n * n + i * n + j];
                d_bias[o] += g;
                for c in 0..ci {
                    for di in 0..3 {
                        let ii = i as isize + di as isize - 1;
                        if ii < 0 || ii >= n as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j as isize + dj as isize - 1;
                            if jj < 0 || jj >= n as isize {
                                continue;
                            }
                            let idx_in = c * n * n + ii as usize * n + jj as usize;
                            let idx_k = o * ci * 9 + c * 9 + di * 3 + dj;
                            d_kernel[idx_k] += g * input[idx_in];
                            if let Some(d_in) = d_input.as_deref_mut() {
                                d_in[idx_in] += g * kernel[idx_k];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Token `(pi, pj)` gets features `c · patch² + (ii · patch + jj)`.
fn channels_to_tokens(ch: &[f64], channels: usize, n: usize, patch: usize) -> Matrix {
    let side = n / patch;
    let pix = patch * patch;
    Matrix::from_fn(side * side, channels * pix, |tok, f| {
        let (pi, pj) = (tok / side, tok % side);
        let (c, within) = (f / pix, f % pix);
        let (ii, jj) = (within / patch, within % patch);
        ch[c * n * n + (pi * patch + ii) * n + pj * patch + jj]
    })
}

fn tokens_to_channels(tokens: &Matrix, channels: usize, n: usize, patch: usize) -> Vec<f64> {
    let side = n / patch;
    let pix = patch * patch;
    let mut ch = vec![0.0; channels * n * n];
    for tok in 0..side * side {
        let (pi, pj) = (tok / side, tok % side);
        for f in 0..channels * pix {
            let (c, within) = (f / pix, f % pix);
            let (ii, jj) = (within / patch, within % patch);
            ch[c * n * n + (pi * patch + ii) * n + pj * patch + jj] = tokens[(tok, f)];
        }
    }
    ch
}
