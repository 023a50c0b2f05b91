//! The four trainable parts: U-Net backbone, segmentation head, projection
//! head and the concat discriminator, bundled as [`ModelBundle`].
//!
//! Feature maps are NCHW: logits are `[B, 1, H, W]`, projections `[B, D, H, W]`.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, join, maxpool2, maxpool2_backward, split_channels, upsample2, upsample2_backward, Conv2d,
    ConvBnRelu, ConvBnReluCache, ConvCache, Linear, Mode, Module, Param, TensorKind,
};
use crate::tensor::Real;

pub const IMAGE_CHANNELS: usize = 3;

/// Architecture hyperparameters. `base_width` is also the feature dimension D
/// shared by the segmentation and projection heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_width: usize,
    pub disc_hidden_width: usize,
    pub disc_hidden_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            base_width: 16,
            disc_hidden_width: 512,
            disc_hidden_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("backbone depth must be >= 2, got {}", self.depth)));
        }
        if self.base_width == 0 || self.disc_hidden_width == 0 || self.disc_hidden_layers == 0 {
            return Err(Error::Config("widths and layer counts must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.base_width
    }
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DoubleConv<F> {
    pub first: ConvBnRelu<F>,
    pub second: ConvBnRelu<F>,
}

#[derive(Clone, Debug)]
pub struct DoubleConvCache<F>(ConvBnReluCache<F>, ConvBnReluCache<F>);

impl<F: Real> DoubleConv<F> {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        DoubleConv {
            first: ConvBnRelu::new(in_ch, out_ch, 3, rng),
            second: ConvBnRelu::new(out_ch, out_ch, 3, rng),
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: Mode) -> (Array4<F>, DoubleConvCache<F>) {
        let (h, c1) = self.first.forward(x, mode);
        let (y, c2) = self.second.forward(&h, mode);
        (y, DoubleConvCache(c1, c2))
    }

    fn backward(&mut self, cache: &DoubleConvCache<F>, dy: &Array4<F>, need_dx: bool) -> Option<Array4<F>> {
        let d = self.second.backward(&cache.1, dy, true).expect("inner gradient");
        self.first.backward(&cache.0, &d, need_dx)
    }
}

impl<F: Real> Module<F> for DoubleConv<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorKind, &ArrayD<F>)) {
        self.first.visit(&join(prefix, "conv1"), f);
        self.second.visit(&join(prefix, "conv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.first.visit_params_mut(&join(prefix, "conv1"), f);
        self.second.visit_params_mut(&join(prefix, "conv2"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        self.first.visit_buffers_mut(&join(prefix, "conv1"), f);
        self.second.visit_buffers_mut(&join(prefix, "conv2"), f);
    }
}

/// U-Net encoder-decoder. Level `l` has `base_width * 2^l` channels; the
/// decoder upsamples (nearest), concatenates the skip connection and applies
/// a double 3x3 conv. Output has `base_width` channels at input resolution.
#[derive(Clone, Debug)]
pub struct Backbone<F> {
    encoder: Vec<DoubleConv<F>>,
    decoder: Vec<DoubleConv<F>>,
    base_width: usize,
    forward_passes: usize,
}

#[derive(Clone, Debug)]
pub struct BackboneCache<F> {
    encoder: Vec<DoubleConvCache<F>>,
    decoder: Vec<Option<DoubleConvCache<F>>>,
    pool_args: Vec<Vec<u8>>,
    sizes: Vec<(usize, usize)>,
}

impl<F: Real> Backbone<F> {
    pub fn new(base_width: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let width = |l: usize| base_width << l;
        let encoder = (0..depth)
            .map(|l| DoubleConv::new(if l == 0 { IMAGE_CHANNELS } else { width(l - 1) }, width(l), rng))
            .collect();
        let decoder = (0..depth - 1)
            .map(|l| DoubleConv::new(width(l + 1) + width(l), width(l), rng))
            .collect();
        Backbone {
            encoder,
            decoder,
            base_width,
            forward_passes: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn out_channels(&self) -> usize {
        self.base_width
    }

    /// Number of forward passes executed so far (instrumentation hook).
    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    pub fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let stride = 1usize << (self.depth() - 1);
        if c != IMAGE_CHANNELS {
            return Err(Error::Shape(format!("expected {IMAGE_CHANNELS} input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {stride} (2^(depth-1) for depth {})",
                self.depth()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<(Array4<F>, BackboneCache<F>)> {
        self.check_input(x)?;
        self.forward_passes += 1;
        let depth = self.depth();
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(depth - 1);
        let mut cache = BackboneCache {
            encoder: Vec::with_capacity(depth),
            decoder: vec![None; depth - 1],
            pool_args: Vec::with_capacity(depth - 1),
            sizes: Vec::with_capacity(depth),
        };
        for l in 0..depth {
            cache.sizes.push((h.dim().2, h.dim().3));
            let (y, c) = self.encoder[l].forward(&h, mode);
            cache.encoder.push(c);
            if l + 1 < depth {
                let (pooled, arg) = maxpool2(&y);
                cache.pool_args.push(arg);
                skips.push(y);
                h = pooled;
            } else {
                h = y;
            }
        }
        for l in (0..depth - 1).rev() {
            let merged = concat_channels(&upsample2(&h), &skips[l]);
            let (y, c) = self.decoder[l].forward(&merged, mode);
            cache.decoder[l] = Some(c);
            h = y;
        }
        Ok((h, cache))
    }

    pub fn backward(&mut self, cache: &BackboneCache<F>, d_features: &Array4<F>) {
        let depth = self.depth();
        let mut d = d_features.clone();
        let mut d_skips = Vec::with_capacity(depth - 1);
        for l in 0..depth - 1 {
            let c = cache.decoder[l].as_ref().expect("decoder cache");
            let d_merged = self.decoder[l].backward(c, &d, true).expect("decoder input gradient");
            let (d_up, d_skip) = split_channels(&d_merged, self.base_width << (l + 1));
            d_skips.push(d_skip);
            d = upsample2_backward(&d_up);
        }
        for l in (0..depth).rev() {
            if l + 1 < depth {
                let (h, w) = cache.sizes[l];
                d = maxpool2_backward(&d, &cache.pool_args[l], h, w) + &d_skips[l];
            }
            match self.encoder[l].backward(&cache.encoder[l], &d, l > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

impl<F: Real> Module<F> for Backbone<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorKind, &ArrayD<F>)) {
        for (l, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("enc{l}")), f);
        }
        for (l, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("dec{l}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (l, b) in self.encoder.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("enc{l}")), f);
        }
        for (l, b) in self.decoder.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("dec{l}")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        for (l, b) in self.encoder.iter_mut().enumerate() {
            b.visit_buffers_mut(&join(prefix, &format!("enc{l}")), f);
        }
        for (l, b) in self.decoder.iter_mut().enumerate() {
            b.visit_buffers_mut(&join(prefix, &format!("dec{l}")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Concat critic `T(a, b)`: `[a; b]` through ReLU hidden layers to one
/// unsquashed score. Argument order matters.
#[derive(Clone, Debug)]
pub struct Discriminator<F> {
    pub hidden: Vec<Linear<F>>,
    pub output: Linear<F>,
    feature_dim: usize,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorCache<F> {
    inputs: Vec<Array2<F>>,
    activations: Vec<Array2<F>>,
}

impl<F: Real> Discriminator<F> {
    pub fn new(feature_dim: usize, hidden_width: usize, hidden_layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut hidden = Vec::with_capacity(hidden_layers);
        let mut input = 2 * feature_dim;
        for _ in 0..hidden_layers {
            hidden.push(Linear::new(input, hidden_width, rng));
            input = hidden_width;
        }
        Discriminator {
            hidden,
            output: Linear::new(input, 1, rng),
            feature_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Zeroes the final layer, which makes `T` identically zero.
    pub fn zero_output_layer(&mut self) {
        let input = self.output.weight.value.shape()[1];
        self.output = Linear::zeroed(input, 1);
    }

    /// Scores row pairs `(a[i], b[i])`.
    pub fn forward(&self, a: &Array2<F>, b: &Array2<F>) -> Result<(Array1<F>, DiscriminatorCache<F>)> {
        if a.ncols() != self.feature_dim || b.ncols() != self.feature_dim || a.nrows() != b.nrows() {
            return Err(Error::Shape(format!(
                "discriminator expects two n x {} inputs, got {:?} and {:?}",
                self.feature_dim,
                a.dim(),
                b.dim()
            )));
        }
        let mut x = ndarray::concatenate(Axis(1), &[a.view(), b.view()])
            .expect("same rows")
            .as_standard_layout()
            .into_owned();
        let mut cache = DiscriminatorCache {
            inputs: Vec::with_capacity(self.hidden.len() + 1),
            activations: Vec::with_capacity(self.hidden.len()),
        };
        for layer in &self.hidden {
            let mut y = layer.forward(&x);
            y.mapv_inplace(|v| v.max(F::zero()));
            cache.inputs.push(x);
            cache.activations.push(y.clone());
            x = y;
        }
        let out = self.output.forward(&x).column(0).to_owned();
        cache.inputs.push(x);
        Ok((out, cache))
    }

    pub fn score(&self, a: &ArrayView1<F>, b: &ArrayView1<F>) -> Result<F> {
        let a = a.to_owned().insert_axis(Axis(0));
        let b = b.to_owned().insert_axis(Axis(0));
        Ok(self.forward(&a, &b)?.0[0])
    }

    /// Accumulates parameter gradients and returns `(d_a, d_b)`.
    pub fn backward(&mut self, cache: &DiscriminatorCache<F>, d_scores: &Array1<F>) -> (Array2<F>, Array2<F>) {
        let n = d_scores.len();
        let dy = d_scores.to_owned().into_shape_with_order((n, 1)).expect("column");
        let last = cache.inputs.len() - 1;
        let mut d = self.output.backward(&cache.inputs[last], &dy);
        for l in (0..self.hidden.len()).rev() {
            ndarray::Zip::from(&mut d).and(&cache.activations[l]).for_each(|g, &a| {
                if a <= F::zero() {
                    *g = F::zero();
                }
            });
            d = self.hidden[l].backward(&cache.inputs[l], &d);
        }
        let dim = self.feature_dim;
        (
            d.slice(ndarray::s![.., ..dim]).to_owned(),
            d.slice(ndarray::s![.., dim..]).to_owned(),
        )
    }
}

impl<F: Real> Module<F> for Discriminator<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorKind, &ArrayD<F>)) {
        for (i, l) in self.hidden.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{i}")), f);
        }
        self.output.visit(&join(prefix, "out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &format!("fc{i}")), f);
        }
        self.output.visit_params_mut(&join(prefix, "out"), f);
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Backbone,
    SegHead,
    ProjHead,
    Discriminator,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Backbone, Part::SegHead, Part::ProjHead, Part::Discriminator];

    pub fn name(self) -> &'static str {
        match self {
            Part::Backbone => "backbone",
            Part::SegHead => "seg_head",
            Part::ProjHead => "proj_head",
            Part::Discriminator => "discriminator",
        }
    }

    /// Part owning a dotted tensor name.
    pub fn of(name: &str) -> Option<Part> {
        let head = name.split('.').next()?;
        Part::ALL.into_iter().find(|p| p.name() == head)
    }
}

#[derive(Clone, Debug)]
pub struct ModelBundle<F> {
    pub config: ModelConfig,
    pub backbone: Backbone<F>,
    /// 1x1 conv D -> 1 producing logits.
    pub seg_head: Conv2d<F>,
    /// 1x1 conv D -> D (no bias), batch norm, ReLU.
    pub proj_head: ConvBnRelu<F>,
    pub discriminator: Discriminator<F>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    pub logits: Array4<F>,
    pub projections: Option<Array4<F>>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    backbone: BackboneCache<F>,
    seg: ConvCache<F>,
    proj: Option<ConvBnReluCache<F>>,
}

impl<F: Real> ModelBundle<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim();
        let backbone = Backbone::new(config.base_width, config.depth, &mut rng);
        let seg_head = Conv2d::new(d, 1, 1, true, &mut rng);
        let proj_head = ConvBnRelu::new(d, d, 1, &mut rng);
        let discriminator = Discriminator::new(d, config.disc_hidden_width, config.disc_hidden_layers, &mut rng);
        Ok(ModelBundle {
            config: config.clone(),
            backbone,
            seg_head,
            proj_head,
            discriminator,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Backbone plus both heads from one shared backbone pass.
    pub fn forward_all(&mut self, images: &Array4<F>, mode: Mode) -> Result<(ForwardOutput<F>, ForwardCache<F>)> {
        let (features, backbone) = self.backbone.forward(images, mode)?;
        let (logits, seg) = self.seg_head.forward(&features);
        let (proj, proj_cache) = self.proj_head.forward(&features, mode);
        Ok((
            ForwardOutput {
                logits,
                projections: Some(proj),
            },
            ForwardCache {
                backbone,
                seg,
                proj: Some(proj_cache),
            },
        ))
    }

    /// Backbone and segmentation head only; the projection head is not run.
    pub fn forward_seg(&mut self, images: &Array4<F>, mode: Mode) -> Result<(ForwardOutput<F>, ForwardCache<F>)> {
        let (features, backbone) = self.backbone.forward(images, mode)?;
        let (logits, seg) = self.seg_head.forward(&features);
        Ok((
            ForwardOutput {
                logits,
                projections: None,
            },
            ForwardCache {
                backbone,
                seg,
                proj: None,
            },
        ))
    }

    /// Evaluation-mode logits.
    pub fn predict_logits(&mut self, images: &Array4<F>) -> Result<Array4<F>> {
        Ok(self.forward_seg(images, Mode::Eval)?.0.logits)
    }

    /// Backpropagates upstream gradients on the logits and/or projections
    /// into the heads and the backbone, accumulating parameter gradients.
    pub fn backward(&mut self, cache: &ForwardCache<F>, d_logits: Option<&Array4<F>>, d_proj: Option<&Array4<F>>) {
        let mut d_features: Option<Array4<F>> = None;
        if let Some(dl) = d_logits {
            d_features = self.seg_head.backward(&cache.seg, dl, true);
        }
        if let Some(dp) = d_proj {
            let pc = cache.proj.as_ref().expect("projection head was not run in this forward pass");
            let d = self.proj_head.backward(pc, dp, true).expect("projection input gradient");
            d_features = Some(match d_features {
                Some(acc) => acc + &d,
                None => d,
            });
        }
        if let Some(d) = d_features {
            self.backbone.backward(&cache.backbone, &d);
        }
    }

    pub fn part_param_count(&self, part: Part) -> usize {
        let mut n = 0;
        self.visit("", &mut |name, kind, t| {
            if kind == TensorKind::Param && Part::of(&name) == Some(part) {
                n += t.len();
            }
        });
        n
    }
}

impl<F: Real> Module<F> for ModelBundle<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorKind, &ArrayD<F>)) {
        self.backbone.visit(&join(prefix, Part::Backbone.name()), f);
        self.seg_head.visit(&join(prefix, Part::SegHead.name()), f);
        self.proj_head.visit(&join(prefix, Part::ProjHead.name()), f);
        self.discriminator.visit(&join(prefix, Part::Discriminator.name()), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.backbone.visit_params_mut(&join(prefix, Part::Backbone.name()), f);
        self.seg_head.visit_params_mut(&join(prefix, Part::SegHead.name()), f);
        self.proj_head.visit_params_mut(&join(prefix, Part::ProjHead.name()), f);
        self.discriminator.visit_params_mut(&join(prefix, Part::Discriminator.name()), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        self.backbone.visit_buffers_mut(&join(prefix, Part::Backbone.name()), f);
        self.proj_head.visit_buffers_mut(&join(prefix, Part::ProjHead.name()), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn images(b: usize, size: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, 3, size, size), |_| rng.gen_range(0.0..1.0))
    }

    fn small() -> ModelConfig {
        ModelConfig {
            depth: 3,
            base_width: 16,
            disc_hidden_width: 32,
            disc_hidden_layers: 2,
        }
    }

    #[test]
    fn backbone_output_shape() {
        let mut bundle = ModelBundle::<f64>::new(&small(), 0).unwrap();
        let (f, _) = bundle.backbone.forward(&images(1, 64, 1), Mode::Train).unwrap();
        assert_eq!(f.dim(), (1, 16, 64, 64));
        assert!(bundle.param_count() > 0);
    }

    #[test]
    fn forward_all_shapes_and_single_backbone_pass() {
        let mut bundle = ModelBundle::<f32>::new(&small(), 0).unwrap();
        let x = images(2, 64, 2).mapv(|v| v as f32);
        let before = bundle.backbone.forward_passes();
        let (out, _) = bundle.forward_all(&x, Mode::Train).unwrap();
        assert_eq!(bundle.backbone.forward_passes(), before + 1);
        assert_eq!(out.logits.dim(), (2, 1, 64, 64));
        assert_eq!(out.projections.unwrap().dim(), (2, 16, 64, 64));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut bundle = ModelBundle::<f64>::new(&small(), 0).unwrap();
        let err = bundle.forward_all(&images(1, 30, 1), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut bundle = ModelBundle::<f32>::new(&small(), 4).unwrap();
        let x = images(2, 32, 3).mapv(|v| v as f32);
        bundle.forward_all(&x, Mode::Train).unwrap();
        let (a, _) = bundle.forward_all(&x, Mode::Eval).unwrap();
        let (b, _) = bundle.forward_all(&x, Mode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.projections, b.projections);
    }

    #[test]
    fn projection_head_is_nonnegative() {
        let mut bundle = ModelBundle::<f64>::new(&small(), 1).unwrap();
        let (out, _) = bundle.forward_all(&images(2, 16, 5), Mode::Train).unwrap();
        assert!(out.projections.unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn discriminator_shapes_and_zero_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut disc = Discriminator::<f64>::new(4, 16, 2, &mut rng);
        let a = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let (s, _) = disc.forward(&a, &b).unwrap();
        assert_eq!(s.len(), 3);
        let (swapped, _) = disc.forward(&b, &a).unwrap();
        assert!(s.iter().zip(swapped.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
        disc.zero_output_layer();
        let (z, _) = disc.forward(&a, &b).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn part_lookup_by_name() {
        assert_eq!(Part::of("backbone.enc0.conv1.conv.weight"), Some(Part::Backbone));
        assert_eq!(Part::of("discriminator.out.bias"), Some(Part::Discriminator));
        assert_eq!(Part::of("nothing"), None);
    }
}
