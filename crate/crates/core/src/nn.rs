//! Small convolutional U-Net with hand-written reverse-mode gradients and an
//! Adam optimizer. Complex data enters as stacked real channels, `re` then
//! `im` per coil.
//!
//! Summation order is fixed: convolutions accumulate over input channels in
//! ascending order, then kernel rows, then kernel columns; weight gradients
//! are row-major dot products. Results are therefore bit-stable across runs
//! on the same platform.

use serde::{Deserialize, Serialize};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{RandomStream, C64};

/// Real channel stack, `channels × height × width`, row-major planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    fn same_grid(&self, other: &Tensor) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Split complex planes into `[re_0, im_0, re_1, im_1, …]`.
pub fn complex_to_channels(planes: &[&[C64]], height: usize, width: usize) -> Result<Tensor> {
    let n = height * width;
    let mut out = Tensor::zeros(2 * planes.len(), height, width);
    for (k, plane) in planes.iter().enumerate() {
        if plane.len() != n {
            return Err(Error::shape(format!("plane of {} values for {height}x{width}", plane.len())));
        }
        let (re, rest) = out.data[2 * k * n..].split_at_mut(n);
        let im = &mut rest[..n];
        for (i, v) in plane.iter().enumerate() {
            re[i] = v.re;
            im[i] = v.im;
        }
    }
    Ok(out)
}

/// Inverse of [`complex_to_channels`]; returns one flat buffer per complex plane.
pub fn channels_to_complex(t: &Tensor) -> Result<Vec<Vec<C64>>> {
    if t.channels % 2 != 0 {
        return Err(Error::shape(format!(
            "{} channels cannot pair into complex planes",
            t.channels
        )));
    }
    Ok((0..t.channels / 2)
        .map(|k| {
            t.plane(2 * k)
                .iter()
                .zip(t.plane(2 * k + 1))
                .map(|(&re, &im)| C64::new(re, im))
                .collect()
        })
        .collect())
}

/// Network layout. `depth` counts 2× downsamplings; each scale runs
/// `convs_per_scale` 3×3 convolutions; a final 3×3 convolution maps to
/// `out_channels` without activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub convs_per_scale: usize,
    pub residual: bool,
    pub relu: bool,
}

impl Architecture {
    /// Two-scale U-Net-lite (16 → 32 channels, two convolutions per scale).
    pub fn unet_lite(in_channels: usize, out_channels: usize, residual: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            width: 16,
            depth: 1,
            convs_per_scale: 2,
            residual,
            relu: true,
        }
    }

    pub fn with_width(self, width: usize) -> Self {
        Self { width, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.convs_per_scale > 0 && self.width == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if self.depth > 0 && self.convs_per_scale == 0 {
            return Err(Error::invalid("downsampling needs at least one convolution per scale"));
        }
        if self.residual && self.in_channels != self.out_channels {
            return Err(Error::invalid("residual connection needs in_channels == out_channels"));
        }
        Ok(())
    }

    /// `(in, out)` channels of every convolution, in execution order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let (n, w) = (self.convs_per_scale, self.width);
        let mut shapes = Vec::new();
        let mut ch = self.in_channels;
        let mut skips = Vec::new();
        for level in 0..self.depth {
            for _ in 0..n {
                shapes.push((ch, w << level));
                ch = w << level;
            }
            skips.push(ch);
        }
        for _ in 0..n {
            shapes.push((ch, w << self.depth));
            ch = w << self.depth;
        }
        for level in (0..self.depth).rev() {
            ch += skips[level];
            for _ in 0..n {
                shapes.push((ch, w << level));
                ch = w << level;
            }
        }
        shapes.push((ch, self.out_channels));
        shapes
    }

    /// Pixels at each image border that can see the zero padding.
    pub fn boundary_halo(&self) -> usize {
        let n = self.convs_per_scale;
        let mut halo = 0usize;
        for level in 0..self.depth {
            halo += n << level;
            // pooling alignment can add one pixel at the coarser scale
            halo += 1 << level;
        }
        halo += n << self.depth;
        for level in (0..self.depth).rev() {
            halo += (1 << level) + (n << level);
        }
        halo + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × in × 3 × 3`, row-major
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    pub arch: Architecture,
    pub layers: Vec<ConvLayer>,
}

/// Gradients laid out exactly like [`CnnParams::layers`].
pub type CnnGrads = CnnParams;

impl CnnParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| ConvLayer::zeros(i, o))
                .collect(),
        })
    }

    /// Kaiming-uniform hidden layers (`±sqrt(6 / fan_in)`), zero biases and a
    /// zero final layer.
    pub fn init(arch: Architecture, rng: &mut RandomStream) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let last = p.layers.len() - 1;
        for layer in &mut p.layers[..last] {
            let bound = (6.0 / (layer.in_channels * 9) as f64).sqrt();
            for w in &mut layer.kernel {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch).expect("architecture already validated")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }

    /// Parameter slices in storage order: kernel then bias, layer by layer.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.kernel.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.kernel.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over the parameter bits; ties a tape to the exact weights used.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in self.slices() {
            for v in s {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ActivationTape {
    fingerprint: u64,
    input: Tensor,
    conv_inputs: Vec<Tensor>,
    conv_outputs: Vec<Tensor>,
}

impl ActivationTape {
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

/// Shifted copies of every input plane, one column per (channel, tap):
/// `cols[p, i·9 + t] = input_i[p + offset(t)]`, zero outside the grid.
fn im2col(input: &Tensor) -> DMatrix<f64> {
    let (h, w) = (input.height, input.width);
    let n = h * w;
    let mut cols = DMatrix::<f64>::zeros(n, input.channels * 9);
    for i in 0..input.channels {
        let src = input.plane(i);
        for t in 0..9 {
            let col = cols.column_mut(i * 9 + t);
            let dst = col.data.into_slice_mut();
            shift_into(dst, src, t, h, w, false);
        }
    }
    cols
}

/// `dst[y][x] (+)= src[y+ky-1][x+kx-1]` for tap `t = 3·ky + kx`; with
/// `transpose` the roles swap and values are accumulated.
#[inline]
fn shift_into(dst: &mut [f64], src: &[f64], t: usize, h: usize, w: usize, transpose: bool) {
    let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let len = x1 - x0;
        if transpose {
            // dst is the input-gradient plane, src the column
            let d = &mut dst[sy * w + sx0..sy * w + sx0 + len];
            for (a, b) in d.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                *a += b;
            }
        } else {
            dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + len]);
        }
    }
}

/// 3×3 same-padding convolution as `cols · Kᵀ`. Channel-major planes are
/// exactly the column-major layout of an `(H·W) × C` matrix, and the
/// `out × in × 9` kernel is the column-major layout of `Kᵀ`.
fn conv_forward(layer: &ConvLayer, input: &Tensor) -> Tensor {
    let n = input.height * input.width;
    let cols = im2col(input);
    let kt = DMatrix::from_column_slice(layer.in_channels * 9, layer.out_channels, &layer.kernel);
    let mut out = cols * kt;
    for (o, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(layer.bias[o]);
    }
    debug_assert_eq!(out.len(), layer.out_channels * n);
    Tensor {
        channels: layer.out_channels,
        height: input.height,
        width: input.width,
        data: out.data.into(),
    }
}

/// Returns the gradient w.r.t. the layer input and accumulates weight and
/// bias gradients into `grad`.
fn conv_backward(layer: &ConvLayer, input: &Tensor, grad_out: &Tensor, grad: &mut ConvLayer) -> Tensor {
    let (h, w) = (input.height, input.width);
    let n = h * w;
    let cols = im2col(input);
    let g = DMatrix::from_column_slice(n, layer.out_channels, &grad_out.data);
    let gk = cols.tr_mul(&g);
    for (a, b) in grad.kernel.iter_mut().zip(gk.as_slice()) {
        *a += b;
    }
    for (o, col) in g.column_iter().enumerate() {
        grad.bias[o] += col.sum();
    }
    let k = DMatrix::from_row_slice(layer.out_channels, layer.in_channels * 9, &layer.kernel);
    let gcols = g * k;
    let mut grad_in = Tensor::zeros(layer.in_channels, h, w);
    for i in 0..layer.in_channels {
        let dst = &mut grad_in.data[i * n..(i + 1) * n];
        for t in 0..9 {
            shift_into(dst, gcols.column(i * 9 + t).as_slice(), t, h, w, true);
        }
    }
    grad_in
}

fn avg_pool(t: &Tensor) -> Tensor {
    let (h, w) = (t.height / 2, t.width / 2);
    let mut out = Tensor::zeros(t.channels, h, w);
    for c in 0..t.channels {
        let src = t.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let a = 2 * y * t.width + 2 * x;
                dst[y * w + x] = 0.25 * (src[a] + src[a + 1] + src[a + t.width] + src[a + t.width + 1]);
            }
        }
    }
    out
}

fn avg_pool_backward(g: &Tensor) -> Tensor {
    let (h, w) = (g.height * 2, g.width * 2);
    let mut out = Tensor::zeros(g.channels, h, w);
    for c in 0..g.channels {
        let src = g.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * src[(y / 2) * g.width + x / 2];
            }
        }
    }
    out
}

fn upsample(t: &Tensor) -> Tensor {
    let (h, w) = (t.height * 2, t.width * 2);
    let mut out = Tensor::zeros(t.channels, h, w);
    for c in 0..t.channels {
        let src = t.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * t.width + x / 2];
            }
        }
    }
    out
}

fn upsample_backward(g: &Tensor) -> Tensor {
    let (h, w) = (g.height / 2, g.width / 2);
    let mut out = Tensor::zeros(g.channels, h, w);
    for c in 0..g.channels {
        let src = g.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let a = 2 * y * g.width + 2 * x;
                dst[y * w + x] = src[a] + src[a + 1] + src[a + g.width] + src[a + g.width + 1];
            }
        }
    }
    out
}

fn concat(a: Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data;
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

fn split(t: Tensor, first: usize) -> (Tensor, Tensor) {
    let n = t.height * t.width;
    let mut data = t.data;
    let rest = data.split_off(first * n);
    (
        Tensor {
            channels: first,
            height: t.height,
            width: t.width,
            data,
        },
        Tensor {
            channels: t.channels - first,
            height: t.height,
            width: t.width,
            data: rest,
        },
    )
}

fn relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn relu_backward(g: &mut Tensor, out: &Tensor) {
    for (d, &o) in g.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn cnn_forward(params: &CnnParams, input: &Tensor) -> Result<(Tensor, ActivationTape)> {
    let arch = &params.arch;
    if input.channels != arch.in_channels {
        return Err(Error::shape(format!(
            "network expects {} input channels, got {}",
            arch.in_channels, input.channels
        )));
    }
    let factor = 1usize << arch.depth;
    if input.height % factor != 0 || input.width % factor != 0 || input.height < 2 * factor || input.width < 2 * factor {
        return Err(Error::shape(format!(
            "{}x{} input is not divisible by 2^{} with room for a 3x3 kernel",
            input.height, input.width, arch.depth
        )));
    }

    let n = arch.convs_per_scale;
    let mut tape = ActivationTape {
        fingerprint: params.fingerprint(),
        input: input.clone(),
        conv_inputs: Vec::with_capacity(params.layers.len()),
        conv_outputs: Vec::with_capacity(params.layers.len()),
    };
    let mut li = 0;
    let mut run = |x: Tensor, act: bool, tape: &mut ActivationTape| -> Tensor {
        let mut y = conv_forward(&params.layers[li], &x);
        if act && arch.relu {
            relu_inplace(&mut y);
        }
        li += 1;
        tape.conv_inputs.push(x);
        tape.conv_outputs.push(y.clone());
        y
    };

    let mut x = input.clone();
    let mut skips = Vec::with_capacity(arch.depth);
    for _ in 0..arch.depth {
        for _ in 0..n {
            x = run(x, true, &mut tape);
        }
        let pooled = avg_pool(&x);
        skips.push(x);
        x = pooled;
    }
    for _ in 0..n {
        x = run(x, true, &mut tape);
    }
    for level in (0..arch.depth).rev() {
        x = concat(upsample(&x), &skips[level]);
        for _ in 0..n {
            x = run(x, true, &mut tape);
        }
    }
    let mut out = run(x, false, &mut tape);
    if arch.residual {
        for (o, &i) in out.data.iter_mut().zip(&input.data) {
            *o += i;
        }
    }
    Ok((out, tape))
}

pub fn cnn_backward(params: &CnnParams, tape: &ActivationTape, grad_out: &Tensor) -> Result<(CnnGrads, Tensor)> {
    let arch = &params.arch;
    if tape.fingerprint != params.fingerprint() || tape.conv_inputs.len() != params.layers.len() {
        return Err(Error::StaleTape);
    }
    if grad_out.channels != arch.out_channels || !grad_out.same_grid(&tape.input) {
        return Err(Error::shape("output gradient does not match the recorded forward pass"));
    }
    let n = arch.convs_per_scale;
    let mut grads = params.zeros_like();
    let mut li = params.layers.len();

    let mut back = |g: Tensor, act: bool, grads: &mut CnnGrads| -> Tensor {
        li -= 1;
        let mut g = g;
        if act && arch.relu {
            relu_backward(&mut g, &tape.conv_outputs[li]);
        }
        conv_backward(&params.layers[li], &tape.conv_inputs[li], &g, &mut grads.layers[li])
    };

    let mut g = back(grad_out.clone(), false, &mut grads);
    let mut skip_grads: Vec<Option<Tensor>> = vec![None; arch.depth];
    for level in 0..arch.depth {
        for _ in 0..n {
            g = back(g, true, &mut grads);
        }
        let up_channels = arch.width << (level + 1);
        let (g_up, g_skip) = split(g, up_channels);
        skip_grads[level] = Some(g_skip);
        g = upsample_backward(&g_up);
    }
    for _ in 0..n {
        g = back(g, true, &mut grads);
    }
    for level in (0..arch.depth).rev() {
        let mut gl = avg_pool_backward(&g);
        if let Some(gs) = skip_grads[level].take() {
            for (a, b) in gl.data.iter_mut().zip(&gs.data) {
                *a += b;
            }
        }
        g = gl;
        for _ in 0..n {
            g = back(g, true, &mut grads);
        }
    }
    if arch.residual {
        for (a, b) in g.data.iter_mut().zip(&grad_out.data) {
            *a += b;
        }
    }
    Ok((grads, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Bias-corrected Adam over parameter slices visited in a fixed order.
/// Fails without touching anything if a gradient is non-finite.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    let total: usize = params.iter().map(|p| p.len()).sum();
    let gtotal: usize = grads.iter().map(|g| g.len()).sum();
    if params.len() != grads.len() || total != gtotal || total != state.len() {
        return Err(Error::shape(format!(
            "adam: {total} parameters, {gtotal} gradients, {} moments",
            state.len()
        )));
    }
    if let Some(pos) = grads.iter().flat_map(|g| g.iter()).position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {pos}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut idx = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::shape("adam: slice length mismatch"));
        }
        for (x, &gi) in p.iter_mut().zip(g.iter()) {
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *x -= lr * mhat / (vhat.sqrt() + state.eps);
            idx += 1;
        }
    }
    Ok(())
}

impl CnnParams {
    pub fn adam_step(&mut self, grads: &CnnGrads, state: &mut AdamState, lr: f64) -> Result<()> {
        let g = grads.slices();
        adam_step(&mut self.slices_mut(), &g, state, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct-loop convolution, kept as an oracle for the GEMM path.
    fn direct_conv_forward(layer: &ConvLayer, input: &Tensor) -> Tensor {
        let (h, w) = (input.height, input.width);
        let n = h * w;
        let mut out = Tensor::zeros(layer.out_channels, h, w);
        for o in 0..layer.out_channels {
            let plane = &mut out.data[o * n..(o + 1) * n];
            plane.fill(layer.bias[o]);
            for i in 0..layer.in_channels {
                let src = &input.data[i * n..(i + 1) * n];
                let k = &layer.kernel[(o * layer.in_channels + i) * 9..][..9];
                accumulate_taps(plane, src, k, h, w);
            }
        }
        out
    }

    /// `dst[y][x] += Σ_{ky,kx} k[ky][kx] · src[y+ky-1][x+kx-1]` with zero padding.
    #[inline]
    fn accumulate_taps(dst: &mut [f64], src: &[f64], k: &[f64], h: usize, w: usize) {
        for ky in 0..3 {
            let y0 = if ky == 0 { 1 } else { 0 };
            let y1 = if ky == 2 { h - 1 } else { h };
            for y in y0..y1 {
                let sy = y + ky - 1;
                let drow = &mut dst[y * w..(y + 1) * w];
                let srow = &src[sy * w..(sy + 1) * w];
                let (k0, k1, k2) = (k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
                // centre tap over the full row, left/right taps over the shifted ranges
                for (d, s) in drow.iter_mut().zip(srow) {
                    *d += k1 * s;
                }
                for (d, s) in drow[1..].iter_mut().zip(&srow[..w - 1]) {
                    *d += k0 * s;
                }
                for (d, s) in drow[..w - 1].iter_mut().zip(&srow[1..]) {
                    *d += k2 * s;
                }
            }
        }
    }

    /// Transposed taps: `dst[y+ky-1][x+kx-1] += k[ky][kx] · src[y][x]`.
    #[inline]
    fn scatter_taps(dst: &mut [f64], src: &[f64], k: &[f64], h: usize, w: usize) {
        for ky in 0..3 {
            let y0 = if ky == 0 { 1 } else { 0 };
            let y1 = if ky == 2 { h - 1 } else { h };
            for y in y0..y1 {
                let sy = y + ky - 1;
                let grow = &src[y * w..(y + 1) * w];
                let drow = &mut dst[sy * w..(sy + 1) * w];
                let (k0, k1, k2) = (k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
                for (d, g) in drow.iter_mut().zip(grow) {
                    *d += k1 * g;
                }
                for (d, g) in drow[..w - 1].iter_mut().zip(&grow[1..]) {
                    *d += k0 * g;
                }
                for (d, g) in drow[1..].iter_mut().zip(&grow[..w - 1]) {
                    *d += k2 * g;
                }
            }
        }
    }

    /// Returns the gradient w.r.t. the layer input and accumulates weight and
    /// bias gradients into `grad`.
    fn direct_conv_backward(layer: &ConvLayer, input: &Tensor, grad_out: &Tensor, grad: &mut ConvLayer) -> Tensor {
        let (h, w) = (input.height, input.width);
        let n = h * w;
        let mut grad_in = Tensor::zeros(layer.in_channels, h, w);
        for o in 0..layer.out_channels {
            let g = &grad_out.data[o * n..(o + 1) * n];
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..layer.in_channels {
                let src = &input.data[i * n..(i + 1) * n];
                let kidx = (o * layer.in_channels + i) * 9;
                let gk = &mut grad.kernel[kidx..kidx + 9];
                for ky in 0..3 {
                    let y0 = if ky == 0 { 1 } else { 0 };
                    let y1 = if ky == 2 { h - 1 } else { h };
                    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let grow = &g[y * w..(y + 1) * w];
                        let srow = &src[sy * w..(sy + 1) * w];
                        a1 += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        a0 += grow[1..].iter().zip(&srow[..w - 1]).map(|(a, b)| a * b).sum::<f64>();
                        a2 += grow[..w - 1].iter().zip(&srow[1..]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gk[ky * 3] += a0;
                    gk[ky * 3 + 1] += a1;
                    gk[ky * 3 + 2] += a2;
                }
                let k = &layer.kernel[kidx..kidx + 9];
                scatter_taps(&mut grad_in.data[i * n..(i + 1) * n], g, k, h, w);
            }
        }
        grad_in
    }

    use crate::numerics::seeded_rng;

    fn random_tensor(rng: &mut RandomStream, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.standard_normal()).collect()).unwrap()
    }

    fn randomize(p: &mut CnnParams, rng: &mut RandomStream, scale: f64) {
        for s in p.slices_mut() {
            for v in s.iter_mut() {
                *v = scale * rng.standard_normal();
            }
        }
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn gemm_convolution_matches_direct_loops() {
        let mut rng = seeded_rng(11);
        for &(cin, cout, h, w) in &[(1, 1, 1, 1), (2, 3, 5, 7), (4, 2, 8, 3)] {
            let mut layer = ConvLayer::zeros(cin, cout);
            for v in layer.kernel.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.standard_normal();
            }
            let x = random_tensor(&mut rng, cin, h, w);
            let g = random_tensor(&mut rng, cout, h, w);
            let a = conv_forward(&layer, &x);
            let b = direct_conv_forward(&layer, &x);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
            let (mut ga, mut gb) = (ConvLayer::zeros(cin, cout), ConvLayer::zeros(cin, cout));
            let ia = conv_backward(&layer, &x, &g, &mut ga);
            let ib = direct_conv_backward(&layer, &x, &g, &mut gb);
            let pairs = ia.data.iter().zip(&ib.data);
            let pairs = pairs.chain(ga.kernel.iter().zip(&gb.kernel)).chain(ga.bias.iter().zip(&gb.bias));
            for (u, v) in pairs {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn channel_round_trip_and_layout() {
        let mut rng = seeded_rng(0);
        let a: Vec<C64> = (0..64).map(|_| rng.complex_normal()).collect();
        let b: Vec<C64> = (0..64).map(|_| rng.complex_normal()).collect();
        let t = complex_to_channels(&[&a, &b], 8, 8).unwrap();
        assert_eq!(t.channels, 4);
        assert_eq!(t.plane(2)[5], b[5].re);
        let back = channels_to_complex(&t).unwrap();
        assert_eq!(back, vec![a.clone(), b]);

        let real: Vec<C64> = a.iter().map(|v| C64::new(v.re, 0.0)).collect();
        let t = complex_to_channels(&[&real], 8, 8).unwrap();
        assert!(t.plane(1).iter().all(|&v| v == 0.0));

        let rotated: Vec<C64> = a.iter().map(|v| v * C64::i()).collect();
        let t0 = complex_to_channels(&[&a], 8, 8).unwrap();
        let t1 = complex_to_channels(&[&rotated], 8, 8).unwrap();
        for i in 0..64 {
            assert_eq!(t1.plane(0)[i], -t0.plane(1)[i]);
            assert_eq!(t1.plane(1)[i], t0.plane(0)[i]);
        }

        assert!(channels_to_complex(&Tensor::zeros(3, 8, 8)).is_err());
    }

    #[test]
    fn default_denoiser_fits_parameter_budget() {
        let p = CnnParams::zeros(Architecture::unet_lite(2, 2, false)).unwrap();
        assert!(p.param_count() <= 50_000, "{}", p.param_count());
        assert_eq!(p.layers.len(), 7);
        assert_eq!(p.layers.last().unwrap().out_channels, 2);
    }

    #[test]
    fn zero_weights_with_residual_is_identity() {
        let mut rng = seeded_rng(1);
        let p = CnnParams::init(Architecture::unet_lite(4, 4, true), &mut rng).unwrap();
        let x = random_tensor(&mut rng, 4, 16, 16);
        let (y, _) = cnn_forward(&p, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_indivisible_input() {
        let p = CnnParams::zeros(Architecture::unet_lite(2, 2, false)).unwrap();
        assert!(cnn_forward(&p, &Tensor::zeros(2, 15, 16)).is_err());
        assert!(cnn_forward(&p, &Tensor::zeros(3, 16, 16)).is_err());
    }

    #[test]
    fn translation_covariance_away_from_the_border() {
        let mut rng = seeded_rng(2);
        let arch = Architecture::unet_lite(2, 2, false).with_width(4);
        let mut p = CnnParams::init(arch, &mut rng).unwrap();
        randomize(&mut p, &mut rng, 0.3);
        let (h, w) = (32, 32);
        let x = random_tensor(&mut rng, 2, h, w);
        let mut shifted = Tensor::zeros(2, h, w);
        for c in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    shifted.plane_mut(c)[((y + 2) % h) * w + (xx + 2) % w] = x.plane(c)[y * w + xx];
                }
            }
        }
        let (a, _) = cnn_forward(&p, &x).unwrap();
        let (b, _) = cnn_forward(&p, &shifted).unwrap();
        // measure the widest border band that carries a mismatch
        let mut width_seen = 0;
        for c in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    let (ys, xs) = ((y + 2) % h, (xx + 2) % w);
                    let d = (a.plane(c)[y * w + xx] - b.plane(c)[ys * w + xs]).abs();
                    if d > 1e-10 {
                        let dist = [y, h - 1 - y, xx, w - 1 - xx].into_iter().min().unwrap();
                        width_seen = width_seen.max(dist + 1);
                    }
                }
            }
        }
        // mismatch comes only from zero padding (shift adds 2 pixels of wrap)
        let halo = arch.boundary_halo() + 2;
        assert!(width_seen <= halo, "mismatch band {width_seen} exceeds halo {halo}");
        assert!(width_seen < h / 2, "no interior left to compare");
    }

    #[test]
    fn default_init_output_is_finite() {
        for seed in 0..100 {
            let mut rng = seeded_rng(seed);
            let mut p = CnnParams::init(Architecture::unet_lite(2, 2, false), &mut rng).unwrap();
            // give the zero final layer the same init so the check is not vacuous
            let last = p.layers.len() - 1;
            let bound = (6.0 / (p.layers[last].in_channels * 9) as f64).sqrt();
            for v in &mut p.layers[last].kernel {
                *v = rng.uniform_range(-bound, bound);
            }
            let x = random_tensor(&mut rng, 2, 16, 16);
            let (y, _) = cnn_forward(&p, &x).unwrap();
            assert!(y.data.iter().all(|v| v.is_finite()));
            assert!(y.data.iter().any(|v| *v != 0.0));
        }
    }

    fn check_gradients(arch: Architecture, h: usize, w: usize, seed: u64, tol: f64) {
        let mut rng = seeded_rng(seed);
        let mut p = CnnParams::zeros(arch).unwrap();
        randomize(&mut p, &mut rng, 0.4);
        let x = random_tensor(&mut rng, arch.in_channels, h, w);
        let probe = random_tensor(&mut rng, arch.out_channels, h, w);
        let loss = |p: &CnnParams, x: &Tensor| -> f64 {
            let (y, _) = cnn_forward(p, x).unwrap();
            dot(&y, &probe)
        };
        let (_, tape) = cnn_forward(&p, &x).unwrap();
        let (grads, gin) = cnn_backward(&p, &tape, &probe).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let n_slices = p.slices().len();
        for s in 0..n_slices {
            let len = p.slices()[s].len();
            for i in 0..len {
                let mut pp = p.clone();
                pp.slices_mut()[s][i] += eps;
                let mut pm = p.clone();
                pm.slices_mut()[s][i] -= eps;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * eps);
                let an = grads.slices()[s][i];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-2));
            }
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps);
            worst = worst.max((fd - gin.data[i]).abs() / fd.abs().max(gin.data[i].abs()).max(1e-2));
        }
        assert!(worst <= tol, "worst relative gradient error {worst}");
    }

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        let arch = Architecture {
            in_channels: 2,
            out_channels: 2,
            width: 3,
            depth: 0,
            convs_per_scale: 1,
            residual: false,
            relu: true,
        };
        check_gradients(arch, 8, 8, 3, 1e-6);
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        let arch = Architecture::unet_lite(2, 2, true).with_width(2);
        check_gradients(arch, 8, 8, 4, 1e-5);
        let deep = Architecture {
            depth: 2,
            ..Architecture::unet_lite(4, 2, false).with_width(2)
        };
        check_gradients(deep, 8, 8, 5, 1e-5);
    }

    #[test]
    fn linear_net_input_gradient_is_transposed_convolution() {
        let arch = Architecture {
            in_channels: 2,
            out_channels: 3,
            width: 0,
            depth: 0,
            convs_per_scale: 0,
            residual: false,
            relu: false,
        };
        let mut rng = seeded_rng(6);
        let mut p = CnnParams::zeros(arch).unwrap();
        randomize(&mut p, &mut rng, 1.0);
        let x = random_tensor(&mut rng, 2, 8, 8);
        let g = random_tensor(&mut rng, 3, 8, 8);
        let (_, tape) = cnn_forward(&p, &x).unwrap();
        let (_, gin) = cnn_backward(&p, &tape, &g).unwrap();
        // brute-force correlation transpose: gin[i][y][x] = Σ_o Σ_k w[o,i,k] g[o][y-dy][x-dx]
        let layer = &p.layers[0];
        for i in 0..2 {
            for y in 0..8i64 {
                for xx in 0..8i64 {
                    let mut acc = 0.0;
                    for o in 0..3 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (oy, ox) = (y - (ky - 1), xx - (kx - 1));
                                if (0..8).contains(&oy) && (0..8).contains(&ox) {
                                    acc += layer.kernel[(o * 2 + i) * 9 + (ky * 3 + kx) as usize]
                                        * g.plane(o)[(oy * 8 + ox) as usize];
                                }
                            }
                        }
                    }
                    assert!((acc - gin.plane(i)[(y * 8 + xx) as usize]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = seeded_rng(7);
        let p = CnnParams::init(Architecture::unet_lite(2, 2, false).with_width(4), &mut rng).unwrap();
        let x = random_tensor(&mut rng, 2, 8, 8);
        let (_, tape) = cnn_forward(&p, &x).unwrap();
        let (g, gin) = cnn_backward(&p, &tape, &Tensor::zeros(2, 8, 8)).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(gin.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = seeded_rng(8);
        let mut p = CnnParams::init(Architecture::unet_lite(2, 2, false).with_width(4), &mut rng).unwrap();
        let x = random_tensor(&mut rng, 2, 8, 8);
        let (_, tape) = cnn_forward(&p, &x).unwrap();
        p.layers[0].bias[0] += 1.0;
        assert!(matches!(cnn_backward(&p, &tape, &Tensor::zeros(2, 8, 8)), Err(Error::StaleTape)));
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut rng = seeded_rng(9);
        let mut p = CnnParams::init(Architecture::unet_lite(2, 2, false).with_width(4), &mut rng).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(p.param_count());
        p.adam_step(&p.zeros_like(), &mut state, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_scalar_steps_by_hand() {
        // step 1: m̂ = g, v̂ = g², Δ = −lr·g/(|g| + ε)
        // step 2 with g2: m = 0.9·0.1·g1 + 0.1·g2, v = 0.999·0.001·g1² + 0.001·g2²
        let (g1, g2, lr) = (0.5f64, -2.0f64, 0.01);
        let mut x = [1.0f64];
        let mut state = AdamState::new(1);
        adam_step(&mut [&mut x[..]], &[&[g1][..]], &mut state, lr).unwrap();
        let want1 = 1.0 - lr * g1 / (g1.abs() + 1e-8);
        assert!((x[0] - want1).abs() < 1e-15);
        adam_step(&mut [&mut x[..]], &[&[g2][..]], &mut state, lr).unwrap();
        let m = 0.9 * 0.1 * g1 + 0.1 * g2;
        let v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64 * 0.999);
        let want2 = want1 - lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((x[0] - want2).abs() < 1e-14);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut x = [1.0f64, 2.0];
        let mut state = AdamState::new(2);
        let err = adam_step(&mut [&mut x[..]], &[&[0.1, f64::NAN][..]], &mut state, 1e-3);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(x, [1.0, 2.0]);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn adam_runs_are_bit_reproducible() {
        let run = || {
            let mut rng = seeded_rng(10);
            let arch = Architecture::unet_lite(2, 2, false).with_width(4);
            let mut p = CnnParams::init(arch, &mut rng).unwrap();
            let mut state = AdamState::new(p.param_count());
            for _ in 0..10 {
                let x = random_tensor(&mut rng, 2, 8, 8);
                let (y, tape) = cnn_forward(&p, &x).unwrap();
                let g = Tensor::from_vec(2, 8, 8, y.data.iter().zip(&x.data).map(|(a, b)| a - b).collect()).unwrap();
                let (grads, _) = cnn_backward(&p, &tape, &g).unwrap();
                p.adam_step(&grads, &mut state, 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
