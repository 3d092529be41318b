//! Layers with hand-written backward passes. Activations are channel-first:
//! video features `(C, T, H, W)`, image features `(C, H, W)`, vectors `(N,)`.
//! Parameters live in a [`ParamSet`] and are referenced by name.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;

use super::params::ParamSet;
use crate::rng::{hash_str, rng_for};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

/// Range of output positions whose input index `o * stride + k - pad` lands in `0..len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = if in_len + pad > k {
        ((in_len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

impl Conv3d {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn output_dims(&self, t: usize, h: usize, w: usize) -> [usize; 3] {
        let out = |n: usize, i: usize| (n + 2 * self.padding[i] - self.kernel[i]) / self.stride[i] + 1;
        [out(t, 0), out(h, 1), out(w, 2)]
    }

    fn geometry(&self, x: &ArrayD<f64>) -> ([usize; 3], [usize; 3]) {
        let s = x.shape();
        assert_eq!(s.len(), 4, "{}: expected (C, T, H, W) input", self.name);
        assert_eq!(s[0], self.in_channels, "{}: channel mismatch", self.name);
        let input = [s[1], s[2], s[3]];
        (input, self.output_dims(input[0], input[1], input[2]))
    }

    /// Calls `f(out_offset, in_offset, count, in_stride)` for every contiguous
    /// run of output rows touched by kernel tap `(kt, kh, kw)`.
    fn for_each_row(
        &self,
        input: [usize; 3],
        output: [usize; 3],
        tap: [usize; 3],
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let [it_n, ih_n, iw_n] = input;
        let [ot_n, oh_n, ow_n] = output;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let [kt, kh, kw] = tap;
        let (t_lo, t_hi) = valid_range(ot_n, it_n, st, kt, pt);
        let (h_lo, h_hi) = valid_range(oh_n, ih_n, sh, kh, ph);
        let (w_lo, w_hi) = valid_range(ow_n, iw_n, sw, kw, pw);
        if w_lo >= w_hi {
            return;
        }
        for ot in t_lo..t_hi {
            let it = ot * st + kt - pt;
            for oh in h_lo..h_hi {
                let ih = oh * sh + kh - ph;
                let out_off = (ot * oh_n + oh) * ow_n + w_lo;
                let in_off = (it * ih_n + ih) * iw_n + w_lo * sw + kw - pw;
                f(out_off, in_off, w_hi - w_lo);
            }
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &ArrayD<f64>) -> ArrayD<f64> {
        let (input, output) = self.geometry(x);
        let weight = params.get(&self.weight_name());
        let bias = params.get(&self.bias_name());
        let w = weight.as_slice().expect("contiguous weight");
        let xs = x.as_slice().expect("contiguous input");
        let in_vol = input[0] * input[1] * input[2];
        let out_vol = output[0] * output[1] * output[2];
        let [kt_n, kh_n, kw_n] = self.kernel;
        let k_vol = kt_n * kh_n * kw_n;
        let sw = self.stride[2];

        let mut out = vec![0.0; self.out_channels * out_vol];
        for (co, out_c) in out.chunks_mut(out_vol).enumerate() {
            out_c.fill(bias[co]);
            for ci in 0..self.in_channels {
                let x_c = &xs[ci * in_vol..(ci + 1) * in_vol];
                let w_base = (co * self.in_channels + ci) * k_vol;
                for kt in 0..kt_n {
                    for kh in 0..kh_n {
                        for kw in 0..kw_n {
                            let wv = w[w_base + (kt * kh_n + kh) * kw_n + kw];
                            self.for_each_row(input, output, [kt, kh, kw], |o, i, n| {
                                let dst = &mut out_c[o..o + n];
                                if sw == 1 {
                                    for (d, s) in dst.iter_mut().zip(&x_c[i..i + n]) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for (k, d) in dst.iter_mut().enumerate() {
                                        *d += wv * x_c[i + k * sw];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[self.out_channels, output[0], output[1], output[2]]), out)
            .expect("conv output shape")
    }

    pub fn backward(&self, params: &ParamSet, x: &ArrayD<f64>, grad_out: &ArrayD<f64>, grads: &mut ParamSet) -> ArrayD<f64> {
        let (input, output) = self.geometry(x);
        let weight = params.get(&self.weight_name());
        let w = weight.as_slice().expect("contiguous weight");
        let xs = x.as_slice().expect("contiguous input");
        let gy = grad_out.as_slice().expect("contiguous grad");
        let in_vol = input[0] * input[1] * input[2];
        let out_vol = output[0] * output[1] * output[2];
        let [kt_n, kh_n, kw_n] = self.kernel;
        let k_vol = kt_n * kh_n * kw_n;
        let sw = self.stride[2];

        let mut gx = vec![0.0; self.in_channels * in_vol];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; self.out_channels];
        for co in 0..self.out_channels {
            let gy_c = &gy[co * out_vol..(co + 1) * out_vol];
            gb[co] = gy_c.iter().sum();
            for ci in 0..self.in_channels {
                let x_c = &xs[ci * in_vol..(ci + 1) * in_vol];
                let gx_c = &mut gx[ci * in_vol..(ci + 1) * in_vol];
                let w_base = (co * self.in_channels + ci) * k_vol;
                for kt in 0..kt_n {
                    for kh in 0..kh_n {
                        for kw in 0..kw_n {
                            let widx = w_base + (kt * kh_n + kh) * kw_n + kw;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            self.for_each_row(input, output, [kt, kh, kw], |o, i, n| {
                                let g = &gy_c[o..o + n];
                                for (k, gv) in g.iter().enumerate() {
                                    let idx = i + k * sw;
                                    acc += gv * x_c[idx];
                                    gx_c[idx] += wv * gv;
                                }
                            });
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        accumulate(grads, &self.weight_name(), &gw);
        accumulate(grads, &self.bias_name(), &gb);
        ArrayD::from_shape_vec(x.raw_dim(), gx).expect("conv input grad shape")
    }

    fn init(&self, params: &mut ParamSet, seed: u64) {
        let fan_in = self.in_channels * self.kernel.iter().product::<usize>();
        let shape = [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ];
        init_pair(params, seed, &self.weight_name(), &shape, &self.bias_name(), self.out_channels, fan_in);
    }
}

/// Transposed 2D convolution without padding: `out = (in - 1) * stride + kernel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn output_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel
    }

    pub fn forward(&self, params: &ParamSet, x: &ArrayD<f64>) -> ArrayD<f64> {
        let s = x.shape();
        assert_eq!(s.len(), 3, "{}: expected (C, H, W) input", self.name);
        assert_eq!(s[0], self.in_channels, "{}: channel mismatch", self.name);
        let (h, w) = (s[1], s[2]);
        let (oh, ow) = (self.output_size(h), self.output_size(w));
        let weight = params.get(&self.weight_name());
        let bias = params.get(&self.bias_name());
        let mut out = ArrayD::zeros(IxDyn(&[self.out_channels, oh, ow]));
        for co in 0..self.out_channels {
            out.index_axis_mut(ndarray::Axis(0), co).fill(bias[co]);
        }
        let k = self.kernel;
        for ci in 0..self.in_channels {
            for i in 0..h {
                for j in 0..w {
                    let xv = x[[ci, i, j]];
                    for co in 0..self.out_channels {
                        for ki in 0..k {
                            for kj in 0..k {
                                out[[co, i * self.stride + ki, j * self.stride + kj]] += xv * weight[[ci, co, ki, kj]];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, params: &ParamSet, x: &ArrayD<f64>, grad_out: &ArrayD<f64>, grads: &mut ParamSet) -> ArrayD<f64> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let weight = params.get(&self.weight_name());
        let k = self.kernel;
        let mut gx = ArrayD::zeros(x.raw_dim());
        let mut gw = ArrayD::zeros(weight.raw_dim());
        for ci in 0..self.in_channels {
            for i in 0..h {
                for j in 0..w {
                    let xv = x[[ci, i, j]];
                    let mut acc = 0.0;
                    for co in 0..self.out_channels {
                        for ki in 0..k {
                            for kj in 0..k {
                                let g = grad_out[[co, i * self.stride + ki, j * self.stride + kj]];
                                acc += g * weight[[ci, co, ki, kj]];
                                gw[[ci, co, ki, kj]] += g * xv;
                            }
                        }
                    }
                    gx[[ci, i, j]] = acc;
                }
            }
        }
        let gb: Vec<f64> = (0..self.out_channels)
            .map(|co| grad_out.index_axis(ndarray::Axis(0), co).sum())
            .collect();
        accumulate(grads, &self.weight_name(), gw.as_slice().expect("contiguous"));
        accumulate(grads, &self.bias_name(), &gb);
        gx
    }

    fn init(&self, params: &mut ParamSet, seed: u64) {
        let fan_in = self.in_channels * self.kernel * self.kernel / (self.stride * self.stride).max(1);
        let shape = [self.in_channels, self.out_channels, self.kernel, self.kernel];
        init_pair(params, seed, &self.weight_name(), &shape, &self.bias_name(), self.out_channels, fan_in.max(1));
    }
}

/// Fully connected layer on a flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward(&self, params: &ParamSet, x: &ArrayD<f64>) -> ArrayD<f64> {
        let xs = x.as_slice().expect("contiguous input");
        assert_eq!(xs.len(), self.in_features, "{}: input size mismatch", self.name);
        let w = params.get(&self.weight_name()).as_slice().expect("contiguous weight");
        let b = params.get(&self.bias_name());
        let out: Vec<f64> = (0..self.out_features)
            .map(|o| {
                let row = &w[o * self.in_features..(o + 1) * self.in_features];
                b[o] + row.iter().zip(xs).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(&[self.out_features]), out).expect("linear output")
    }

    pub fn backward(&self, params: &ParamSet, x: &ArrayD<f64>, grad_out: &ArrayD<f64>, grads: &mut ParamSet) -> ArrayD<f64> {
        let xs = x.as_slice().expect("contiguous input");
        let w = params.get(&self.weight_name()).as_slice().expect("contiguous weight");
        let gy = grad_out.as_slice().expect("contiguous grad");
        let mut gx = vec![0.0; self.in_features];
        let mut gw = vec![0.0; w.len()];
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * self.in_features..(o + 1) * self.in_features];
            let grow = &mut gw[o * self.in_features..(o + 1) * self.in_features];
            for i in 0..self.in_features {
                gx[i] += g * row[i];
                grow[i] += g * xs[i];
            }
        }
        accumulate(grads, &self.weight_name(), &gw);
        accumulate(grads, &self.bias_name(), gy);
        ArrayD::from_shape_vec(x.raw_dim(), gx).expect("linear input grad")
    }

    fn init(&self, params: &mut ParamSet, seed: u64) {
        init_pair(
            params,
            seed,
            &self.weight_name(),
            &[self.out_features, self.in_features],
            &self.bias_name(),
            self.out_features,
            self.in_features,
        );
    }
}

fn accumulate(grads: &mut ParamSet, name: &str, values: &[f64]) {
    let g = grads.get_mut(name);
    for (a, b) in g.as_slice_mut().expect("contiguous grad").iter_mut().zip(values) {
        *a += b;
    }
}

/// He-uniform weights and small uniform biases; each tensor's draws are keyed
/// by `(seed, name)` so identically named parameters initialise identically
/// across model variants.
fn init_pair(params: &mut ParamSet, seed: u64, wname: &str, wshape: &[usize], bname: &str, blen: usize, fan_in: usize) {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = rng_for(seed, &[hash_str(wname)]);
    let n: usize = wshape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    params.insert(wname, ArrayD::from_shape_vec(IxDyn(wshape), w).expect("weight shape"));
    let bbound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = rng_for(seed, &[hash_str(bname)]);
    let b: Vec<f64> = (0..blen).map(|_| rng.gen_range(-bbound..bbound)).collect();
    params.insert(bname, ArrayD::from_shape_vec(IxDyn(&[blen]), b).expect("bias shape"));
}

/// Mean over time and over each cell of a `grid x grid` spatial partition:
/// `(C, T, H, W) -> (C * grid * grid,)`, ordered `(c, gy, gx)`.
fn grid_pool_forward(x: &ArrayD<f64>, grid: usize) -> ArrayD<f64> {
    let s = x.shape();
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let (ch, cw) = (h / grid, w / grid);
    let norm = 1.0 / (t * ch * cw) as f64;
    let xs = x.as_slice().expect("contiguous input");
    let mut out = vec![0.0; c * grid * grid];
    for ci in 0..c {
        for ti in 0..t {
            for i in 0..h {
                let gy = i / ch;
                let row = &xs[((ci * t + ti) * h + i) * w..((ci * t + ti) * h + i + 1) * w];
                for (j, v) in row.iter().enumerate() {
                    out[(ci * grid + gy) * grid + j / cw] += v;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    ArrayD::from_shape_vec(IxDyn(&[c * grid * grid]), out).expect("pool output")
}

fn grid_pool_backward(x: &ArrayD<f64>, grid: usize, grad_out: &ArrayD<f64>) -> ArrayD<f64> {
    let s = x.shape();
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let (ch, cw) = (h / grid, w / grid);
    let norm = 1.0 / (t * ch * cw) as f64;
    let gy = grad_out.as_slice().expect("contiguous grad");
    let mut gx = vec![0.0; x.len()];
    for ci in 0..c {
        for ti in 0..t {
            for i in 0..h {
                let cell_row = (ci * grid + i / ch) * grid;
                let base = ((ci * t + ti) * h + i) * w;
                for j in 0..w {
                    gx[base + j] = gy[cell_row + j / cw] * norm;
                }
            }
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), gx).expect("pool input grad")
}

/// Offset added to the variance in [`Layer::Standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;

fn standardize_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + STANDARDIZE_EPS).sqrt();
    x.mapv(|v| (v - mean) / s)
}

fn standardize_backward(x: &ArrayD<f64>, grad_out: &ArrayD<f64>) -> ArrayD<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + STANDARDIZE_EPS).sqrt();
    let y = x.mapv(|v| (v - mean) / s);
    let g_mean = grad_out.sum() / n;
    let gy_mean = grad_out.iter().zip(y.iter()).map(|(g, y)| g * y).sum::<f64>() / n;
    let mut out = grad_out.clone();
    out.zip_mut_with(&y, |g, &yv| *g = (*g - g_mean - yv * gy_mean) / s);
    out
}

fn channel_norm_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = x.clone();
    for mut ch in out.outer_iter_mut() {
        let y = standardize_forward(&ch.to_owned());
        ch.assign(&y);
    }
    out
}

fn channel_norm_backward(x: &ArrayD<f64>, grad_out: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = grad_out.clone();
    for (mut g, xc) in out.outer_iter_mut().zip(x.outer_iter()) {
        let gx = standardize_backward(&xc.to_owned(), &g.to_owned());
        g.assign(&gx);
    }
    out
}

/// Subtract the mean over axis 1 (time of a `(C, T, H, W)` tensor). The map
/// is a symmetric projection, so it is also its own backward.
fn temporal_center(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mean = x.mean_axis(Axis(1)).expect("non-empty time axis").insert_axis(Axis(1));
    x - &mean
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv3d(Conv3d),
    ConvTranspose2d(ConvTranspose2d),
    Linear(Linear),
    Relu,
    GridPool { grid: usize },
    /// Zero mean, unit variance over all entries; no parameters.
    Standardize,
    /// [`Layer::Standardize`] applied to each slice along the leading (channel) axis.
    ChannelNorm,
    /// Removes the per-pixel temporal mean, keeping only what changes over time.
    TemporalCenter,
    Reshape(Vec<usize>),
}

impl Layer {
    pub fn forward(&self, params: &ParamSet, x: &ArrayD<f64>) -> ArrayD<f64> {
        match self {
            Layer::Conv3d(l) => l.forward(params, x),
            Layer::ConvTranspose2d(l) => l.forward(params, x),
            Layer::Linear(l) => l.forward(params, x),
            Layer::Relu => x.mapv(|v| if v < 0.0 { 0.0 } else { v }),
            Layer::GridPool { grid } => grid_pool_forward(x, *grid),
            Layer::Standardize => standardize_forward(x),
            Layer::ChannelNorm => channel_norm_forward(x),
            Layer::TemporalCenter => temporal_center(x),
            Layer::Reshape(shape) => x
                .clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape size mismatch"),
        }
    }

    /// Gradient w.r.t. the input `x`, given the output gradient. Parameter
    /// gradients are added into `grads`.
    pub fn backward(&self, params: &ParamSet, x: &ArrayD<f64>, grad_out: &ArrayD<f64>, grads: &mut ParamSet) -> ArrayD<f64> {
        match self {
            Layer::Conv3d(l) => l.backward(params, x, grad_out, grads),
            Layer::ConvTranspose2d(l) => l.backward(params, x, grad_out, grads),
            Layer::Linear(l) => l.backward(params, x, grad_out, grads),
            Layer::Relu => {
                let mut g = grad_out.clone();
                g.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                g
            }
            Layer::GridPool { grid } => grid_pool_backward(x, *grid, grad_out),
            Layer::Standardize => standardize_backward(x, grad_out),
            Layer::ChannelNorm => channel_norm_backward(x, grad_out),
            Layer::TemporalCenter => temporal_center(grad_out),
            Layer::Reshape(_) => grad_out
                .clone()
                .into_shape_with_order(x.raw_dim())
                .expect("reshape grad size mismatch"),
        }
    }

    fn init(&self, params: &mut ParamSet, seed: u64) {
        match self {
            Layer::Conv3d(l) => l.init(params, seed),
            Layer::ConvTranspose2d(l) => l.init(params, seed),
            Layer::Linear(l) => l.init(params, seed),
            _ => {}
        }
    }
}

/// Activations recorded by [`Sequential::forward`]: the input followed by every layer output.
#[derive(Debug, Clone)]
pub struct Trace(pub Vec<ArrayD<f64>>);

impl Trace {
    pub fn output(&self) -> &ArrayD<f64> {
        self.0.last().expect("trace holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub prefix: String,
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            layers: Vec::new(),
        }
    }

    /// Name for the next parameterised layer.
    pub fn next_name(&self) -> String {
        format!("{}.{}", self.prefix, self.layers.len())
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn init(&self, params: &mut ParamSet, seed: u64) {
        for layer in &self.layers {
            layer.init(params, seed);
        }
    }

    pub fn forward(&self, params: &ParamSet, x: ArrayD<f64>) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let y = layer.forward(params, acts.last().expect("non-empty"));
            acts.push(y);
        }
        Trace(acts)
    }

    /// Output only, without keeping intermediate activations.
    pub fn infer(&self, params: &ParamSet, x: ArrayD<f64>) -> ArrayD<f64> {
        self.layers.iter().fold(x, |acc, layer| layer.forward(params, &acc))
    }

    pub fn backward(&self, params: &ParamSet, trace: &Trace, grad_out: ArrayD<f64>, grads: &mut ParamSet) -> ArrayD<f64> {
        let mut g = grad_out;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(params, &trace.0[k], &g, grads);
        }
        g
    }
}
