//! Minimal reverse-mode layer engine for NCHW feature maps.
//!
//! Every layer splits into a `forward` that returns its output plus a cache,
//! and a `backward` that consumes the cache and an upstream gradient,
//! accumulates parameter gradients into [`Param::grad`], and returns the
//! gradient with respect to its input. Caches are owned by the caller so one
//! layer can be run on several batches before any backward pass.

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;

use crate::tensor::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

/// Named traversal over parameters and buffers, used by the optimizer and
/// the checkpoint writer. Names are dot-joined paths such as
/// `backbone.enc0.conv1.weight`.
pub trait Module<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorKind, &ArrayD<F>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut ArrayD<F>)) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, t| {
            if kind == TensorKind::Param {
                n += t.len();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// PyTorch-style default initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
fn uniform<F: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::lit(rng.gen_range(-bound..bound)))
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Stride-1, "same"-padded 2-D convolution with an odd square kernel.
/// The weight is stored flattened as `[out, in * k * k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<F> {
    cols: Vec<Array2<F>>,
    h: usize,
    w: usize,
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, bias: bool, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::new(uniform(&[out_ch, fan_in], fan_in, rng));
        let bias = bias.then(|| Param::new(uniform(&[out_ch], fan_in, rng)));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn weight_matrix(&self) -> ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("conv weight is 2-D")
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let hw = h * w;
        let x = x.as_standard_layout();
        let wmat = self.weight_matrix();
        let mut out = Array4::zeros((b, self.out_ch, h, w));
        let mut cols = Vec::with_capacity(b);
        for i in 0..b {
            let xi = x.index_axis(Axis(0), i);
            let col = if self.kernel == 1 {
                xi.to_owned().into_shape_with_order((c, hw)).expect("contiguous")
            } else {
                im2col(&xi, self.kernel)
            };
            let mut oi = out
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.out_ch, hw))
                .expect("contiguous");
            gemm(F::one(), &wmat, &col.view(), F::zero(), &mut oi);
            if let Some(bias) = &self.bias {
                for (mut row, &bv) in oi.outer_iter_mut().zip(bias.value.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
            cols.push(col);
        }
        (out, ConvCache { cols, h, w })
    }

    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &Array4<F>, need_dx: bool) -> Option<Array4<F>> {
        let b = dy.dim().0;
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let dy = dy.as_standard_layout();
        let mut dx = need_dx.then(|| Array4::zeros((b, self.in_ch, h, w)));
        let wmat = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D");
        let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
        let mut dcol = (need_dx && self.kernel > 1).then(|| Array2::zeros((self.in_ch * self.kernel * self.kernel, hw)));
        for i in 0..b {
            let dyi = dy
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.out_ch, hw))
                .expect("contiguous");
            gemm(F::one(), &dyi, &cache.cols[i].t(), F::one(), &mut dw);
            if let Some(bias) = &mut self.bias {
                let mut g = bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
                g += &dyi.sum_axis(Axis(1));
            }
            if let Some(dx) = dx.as_mut() {
                let mut dxi = dx.index_axis_mut(Axis(0), i);
                if self.kernel == 1 {
                    let mut dst = dxi.into_shape_with_order((self.in_ch, hw)).expect("contiguous");
                    gemm(F::one(), &wmat.t(), &dyi, F::zero(), &mut dst);
                } else {
                    let dcol = dcol.as_mut().expect("allocated when need_dx");
                    gemm(F::one(), &wmat.t(), &dyi, F::zero(), &mut dcol.view_mut());
                    col2im_add(dcol, self.kernel, dxi.as_slice_mut().expect("contiguous"), self.in_ch, h, w);
                }
            }
        }
        dx
    }
}

impl<F: Real> Module<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorKind, &ArrayD<F>)) {
        f(join(prefix, "weight"), TensorKind::Param, &self.weight.value);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), TensorKind::Param, &b.value);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Unfolds a `[c, h, w]` map into `[c * k * k, h * w]` patch columns with zero padding.
pub fn im2col<F: Real>(x: &ArrayView3<F>, k: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let hw = h * w;
    let p = (k / 2) as isize;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut col = Array2::zeros((c * k * k, hw));
    let cs = col.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let plane = &xs[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cs[row * hw..(row + 1) * hw];
                let dxo = kx as isize - p;
                let x0 = (-dxo).max(0) as usize;
                let x1 = (w as isize - dxo).min(w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..sy as usize * w + w];
                    let sx0 = (x0 as isize + dxo) as usize;
                    let sx1 = (x1 as isize + dxo) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[sx0..sx1]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch columns back onto a `[c, h, w]` map, adding.
pub fn col2im_add<F: Real>(col: &Array2<F>, k: usize, out: &mut [F], c: usize, h: usize, w: usize) {
    let hw = h * w;
    let p = (k / 2) as isize;
    let cs = col.as_slice().expect("standard layout");
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * hw..(row + 1) * hw];
                let dxo = kx as isize - p;
                let x0 = (-dxo).max(0) as usize;
                let x1 = (w as isize - dxo).min(w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w;
                    let sx0 = (x0 as isize + dxo) as usize;
                    let dst = &mut plane[base + sx0..base + sx0 + (x1 - x0)];
                    for (d, &s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over the batch and spatial axes.
/// Train mode normalizes with batch statistics and updates the running
/// estimates (unbiased variance); eval mode uses the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: ArrayD<F>,
    pub running_var: ArrayD<F>,
    pub momentum: F,
    pub eps: F,
}

#[derive(Clone, Debug)]
pub struct BnCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
    mode: Mode,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: F::lit(0.1),
            eps: F::lit(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> (Array4<F>, BnCache<F>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm channels");
        let hw = h * w;
        let n = b * hw;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut xhat = Array4::zeros((b, c, h, w));
        let mut inv_std = Array1::zeros(c);
        {
            let xh = xhat.as_slice_mut().expect("standard layout");
            for ch in 0..c {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut sum = F::zero();
                        for i in 0..b {
                            sum += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<F>();
                        }
                        let mean = sum / F::usize(n);
                        let mut sq = F::zero();
                        for i in 0..b {
                            for &v in &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                                let d = v - mean;
                                sq += d * d;
                            }
                        }
                        let var = sq / F::usize(n);
                        let unbiased = if n > 1 { sq / F::usize(n - 1) } else { var };
                        let m = self.momentum;
                        self.running_mean[ch] = (F::one() - m) * self.running_mean[ch] + m * mean;
                        self.running_var[ch] = (F::one() - m) * self.running_var[ch] + m * unbiased;
                        (mean, var)
                    }
                    Mode::Eval => (self.running_mean[ch], self.running_var[ch]),
                };
                let is = F::one() / (var + self.eps).sqrt();
                inv_std[ch] = is;
                for i in 0..b {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    for (o, &v) in xh[r.clone()].iter_mut().zip(&xs[r]) {
                        *o = (v - mean) * is;
                    }
                }
            }
        }
        let mut y = xhat.clone();
        {
            let ys = y.as_slice_mut().expect("standard layout");
            for ch in 0..c {
                let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
                for i in 0..b {
                    for v in &mut ys[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        *v = *v * g + be;
                    }
                }
            }
        }
        (y, BnCache { xhat, inv_std, mode })
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = dy.dim();
        let hw = h * w;
        let n = F::usize(b * hw);
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut dx = Array4::zeros((b, c, h, w));
        let dxs = dx.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for i in 0..b {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (&g, &xv) in dys[r.clone()].iter().zip(&xh[r]) {
                    sum_dy += g;
                    sum_dy_xhat += g * xv;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let gamma = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            for i in 0..b {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                match cache.mode {
                    Mode::Train => {
                        let k = gamma * is / n;
                        for ((o, &g), &xv) in dxs[r.clone()].iter_mut().zip(&dys[r.clone()]).zip(&xh[r]) {
                            *o = k * (n * g - sum_dy - xv * sum_dy_xhat);
                        }
                    }
                    Mode::Eval => {
                        let k = gamma * is;
                        for (o, &g) in dxs[r.clone()].iter_mut().zip(&dys[r]) {
                            *o = k * g;
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<F: Real> Module<F> for BatchNorm2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorKind, &ArrayD<F>)) {
        f(join(prefix, "weight"), TensorKind::Param, &self.gamma.value);
        f(join(prefix, "bias"), TensorKind::Param, &self.beta.value);
        f(join(prefix, "running_mean"), TensorKind::Buffer, &self.running_mean);
        f(join(prefix, "running_var"), TensorKind::Buffer, &self.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.gamma);
        f(join(prefix, "bias"), &mut self.beta);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

// ---------------------------------------------------------------------------
// Conv -> BN -> ReLU unit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvBnRelu<F> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
}

#[derive(Clone, Debug)]
pub struct ConvBnReluCache<F> {
    conv: ConvCache<F>,
    bn: BnCache<F>,
    out: Array4<F>,
}

impl<F: Real> ConvBnRelu<F> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(in_ch, out_ch, kernel, false, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> (Array4<F>, ConvBnReluCache<F>) {
        let (y, conv) = self.conv.forward(x);
        let (mut y, bn) = self.bn.forward(&y, mode);
        relu_inplace(&mut y);
        let cache = ConvBnReluCache {
            conv,
            bn,
            out: y.clone(),
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &ConvBnReluCache<F>, dy: &Array4<F>, need_dx: bool) -> Option<Array4<F>> {
        let d = relu_backward(&cache.out, dy);
        let d = self.bn.backward(&cache.bn, &d);
        self.conv.backward(&cache.conv, &d, need_dx)
    }
}

impl<F: Real> Module<F> for ConvBnRelu<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorKind, &ArrayD<F>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        self.bn.visit_buffers_mut(&join(prefix, "bn"), f);
    }
}

// ---------------------------------------------------------------------------
// Parameter-free ops
// ---------------------------------------------------------------------------

pub fn relu_inplace<F: Real>(x: &mut Array4<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward<F: Real>(out: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut d = dy.to_owned();
    ndarray::Zip::from(&mut d).and(out).for_each(|g, &o| {
        if o <= F::zero() {
            *g = F::zero();
        }
    });
    d
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the winning
/// offset (0..4, row-major within the window) for every output cell.
pub fn maxpool2<F: Real>(x: &Array4<F>) -> (Array4<F>, Vec<u8>) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((b, c, oh, ow));
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for i in 0..b {
        for ch in 0..c {
            let plane = x.slice(s![i, ch, .., ..]);
            let mut op = out.slice_mut(s![i, ch, .., ..]);
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = plane[[2 * y, 2 * xx]];
                    let mut at = 0u8;
                    for (k, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = plane[[2 * y + dy, 2 * xx + dx]];
                        if v > best {
                            best = v;
                            at = k as u8 + 1;
                        }
                    }
                    op[[y, xx]] = best;
                    arg.push(at);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<F: Real>(dy: &Array4<F>, arg: &[u8], h: usize, w: usize) -> Array4<F> {
    let (b, c, oh, ow) = dy.dim();
    let mut dx = Array4::zeros((b, c, h, w));
    let mut k = 0;
    for i in 0..b {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let a = arg[k] as usize;
                    k += 1;
                    dx[[i, ch, 2 * y + a / 2, 2 * xx + a % 2]] += dy[[i, ch, y, xx]];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); b * c * 4 * h * w];
    for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
        for (y, row) in plane.chunks_exact(w).enumerate() {
            let (top, bottom) = dst[4 * y * w..4 * (y + 1) * w].split_at_mut(2 * w);
            for (pair, &v) in top.chunks_exact_mut(2).zip(row) {
                pair[0] = v;
                pair[1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    Array4::from_shape_vec((b, c, 2 * h, 2 * w), out).expect("shape")
}

pub fn upsample2_backward<F: Real>(dy: &Array4<F>) -> Array4<F> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let dy = dy.as_standard_layout();
    let src = dy.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); b * c * h * w];
    for (plane, dst) in src.chunks_exact(h2 * w2).zip(out.chunks_exact_mut(h * w)) {
        for (y, drow) in dst.chunks_exact_mut(w).enumerate() {
            let r0 = &plane[2 * y * w2..(2 * y + 1) * w2];
            let r1 = &plane[(2 * y + 1) * w2..(2 * y + 2) * w2];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
            }
        }
    }
    Array4::from_shape_vec((b, c, h, w), out).expect("shape")
}

pub fn concat_channels<F: Real>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .expect("matching spatial shape")
        .as_standard_layout()
        .into_owned()
}

pub fn split_channels<F: Real>(d: &Array4<F>, first: usize) -> (Array4<F>, Array4<F>) {
    (
        d.slice(s![.., ..first, .., ..]).as_standard_layout().into_owned(),
        d.slice(s![.., first.., .., ..]).as_standard_layout().into_owned(),
    )
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// Affine map on row vectors: `y = x · Wᵀ + b`, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(uniform(&[output, input], input, rng)),
            bias: Param::new(uniform(&[output], input, rng)),
        }
    }

    pub fn zeroed(input: usize, output: usize) -> Self {
        Linear {
            weight: Param::new(ArrayD::zeros(IxDyn(&[output, input]))),
            bias: Param::new(ArrayD::zeros(IxDyn(&[output]))),
        }
    }

    pub fn weight_matrix(&self) -> ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D")
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let w = self.weight_matrix();
        let mut y = Array2::zeros((x.nrows(), w.nrows()));
        gemm(F::one(), &x.view(), &w.t(), F::zero(), &mut y.view_mut());
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-D");
        y += &b;
        y
    }

    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
        gemm(F::one(), &dy.t(), &x.view(), F::one(), &mut dw);
        let mut db = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
        db += &dy.sum_axis(Axis(0));
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D");
        let mut dx = Array2::zeros((dy.nrows(), w.ncols()));
        gemm(F::one(), &dy.view(), &w, F::zero(), &mut dx.view_mut());
        dx
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorKind, &ArrayD<F>)) {
        f(join(prefix, "weight"), TensorKind::Param, &self.weight.value);
        f(join(prefix, "bias"), TensorKind::Param, &self.bias.value);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct 3x3 "same" convolution used as an independent reference.
    fn naive_conv(x: &Array4<f64>, w: &Array2<f64>, cout: usize, k: usize) -> Array4<f64> {
        let (b, c, h, wd) = x.dim();
        let p = (k / 2) as isize;
        Array4::from_shape_fn((b, cout, h, wd), |(i, o, y, xx)| {
            let mut acc = 0.0;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize {
                            acc += w[[o, (ci * k + ky) * k + kx]] * x[[i, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f64>::new(3, 4, 3, false, &mut rng);
        let x = rand4((2, 3, 5, 6), &mut rng);
        let (y, _) = conv.forward(&x);
        let w = conv.weight_matrix().to_owned();
        let reference = naive_conv(&x, &w, 4, 3);
        for (a, b) in y.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array3::from_shape_fn((2, 4, 5), |_| rng.gen_range(-1.0..1.0));
        let col = im2col(&x.view(), 3);
        let g = Array2::from_shape_fn(col.dim(), |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = (&col * &g).sum();
        let mut back = vec![0.0; 2 * 4 * 5];
        col2im_add(&g, 3, &mut back, 2, 4, 5);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn finite_diff_check(f: &mut dyn FnMut(&Array4<f64>) -> f64, x: &Array4<f64>, grad: &Array4<f64>) {
        let h = 1e-5;
        for idx in [0usize, 7, 13, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "idx {idx}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn conv_bn_relu_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut unit = ConvBnRelu::<f64>::new(2, 3, 3, &mut rng);
        let x = rand4((2, 2, 4, 4), &mut rng);
        let probe = rand4((2, 3, 4, 4), &mut rng);
        let (_, cache) = unit.forward(&x, Mode::Train);
        let dx = unit.backward(&cache, &probe, true).unwrap();
        let mut f = |x: &Array4<f64>| {
            let mut u = unit.clone();
            let (y, _) = u.forward(x, Mode::Train);
            (&y * &probe).sum()
        };
        finite_diff_check(&mut f, &x, &dx);
    }

    #[test]
    fn pooling_and_upsampling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand4((1, 2, 4, 4), &mut rng);
        let (y, arg) = maxpool2(&x);
        let probe = rand4(y.dim(), &mut rng);
        let dx = maxpool2_backward(&probe, &arg, 4, 4);
        finite_diff_check(&mut |x| (&maxpool2(x).0 * &probe).sum(), &x, &dx);

        let probe = rand4((1, 2, 8, 8), &mut rng);
        let dx = upsample2_backward(&probe);
        finite_diff_check(&mut |x| (&upsample2(x) * &probe).sum(), &x, &dx);
    }

    #[test]
    fn batchnorm_running_stats_follow_momentum() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward(&x, Mode::Train);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_transpose_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let dy = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let dx = lin.backward(&x, &dy);
        let expect_dx = dy.dot(&lin.weight_matrix());
        assert!((&dx - &expect_dx).iter().all(|v| v.abs() < 1e-12));
        let dw = lin.weight.grad.clone().into_dimensionality::<Ix2>().unwrap();
        assert!((&dw - &dy.t().dot(&x)).iter().all(|v| v.abs() < 1e-12));
    }
}
