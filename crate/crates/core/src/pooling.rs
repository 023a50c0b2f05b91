//! Pseudo-labels and masked class pooling of projection maps into
//! `(z_s, z_t, z_s_neg)` triples.
//!
//! Projection maps for one image are `[D, H, W]` views; masks are `[H, W]`
//! with values 0/1. An all-zero selection pools to `None` (the EMPTY value),
//! and a pair with any EMPTY component contributes no triples.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView2, ArrayView3, ArrayViewMut3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::losses::{PooledPairTriple, TripleGrad};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Mean,
    Max,
    RandomPixels,
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingKind::Mean => "mean",
            PoolingKind::Max => "max",
            PoolingKind::RandomPixels => "random_pixels",
        })
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(PoolingKind::Mean),
            "max" => Ok(PoolingKind::Max),
            "random_pixels" | "random" => Ok(PoolingKind::RandomPixels),
            other => Err(Error::Config(format!(
                "unknown pooling '{other}' (expected mean, max or random_pixels)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingStrategy {
    pub kind: PoolingKind,
    /// Pixels sampled per target image; only used by `RandomPixels`.
    pub n_pixels: usize,
}

impl Default for PoolingStrategy {
    fn default() -> Self {
        PoolingStrategy {
            kind: PoolingKind::Mean,
            n_pixels: 4,
        }
    }
}

impl PoolingStrategy {
    pub fn new(kind: PoolingKind, n_pixels: usize) -> Result<Self> {
        let s = PoolingStrategy { kind, n_pixels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pixels == 0 {
            return Err(Error::Config("pooling_n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Hard mask `logit > 0` (equivalently `sigmoid(logit) > 0.5`). The result is
/// a plain byte mask and carries no gradient.
pub fn pseudo_label<F: Real>(logits: &ArrayView2<F>) -> Mask {
    logits.mapv(|l| u8::from(l > F::zero()))
}

fn check<F>(p: &ArrayView3<F>, mask: &Mask) -> Result<()> {
    let (_, h, w) = p.dim();
    if (h, w) != mask.dim() {
        return Err(Error::Shape(format!(
            "projection map {:?} vs mask {:?}",
            p.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

/// How a pooled vector was produced; enough to route its gradient back.
#[derive(Clone, Debug, PartialEq)]
pub enum PoolTrace {
    /// Mean over pixels where `mask == selected`.
    Mean { selected: u8, count: usize },
    /// Per-channel flat pixel index of the maximum.
    Max { argmax: Vec<usize> },
    /// A single pixel at a flat index.
    Pixel { index: usize },
}

fn mean_where<F: Real>(p: &ArrayView3<F>, mask: &Mask, selected: u8) -> Option<(Array1<F>, PoolTrace)> {
    let d = p.dim().0;
    let mut acc = Array1::<F>::zeros(d);
    let mut count = 0usize;
    for ((y, x), &m) in mask.indexed_iter() {
        if m == selected {
            count += 1;
            for c in 0..d {
                acc[c] += p[[c, y, x]];
            }
        }
    }
    (count > 0).then(|| {
        acc.mapv_inplace(|v| v / F::usize(count));
        (acc, PoolTrace::Mean { selected, count })
    })
}

fn max_where<F: Real>(p: &ArrayView3<F>, mask: &Mask, selected: u8) -> Option<(Array1<F>, PoolTrace)> {
    let (d, _, w) = p.dim();
    let mut best: Option<(Array1<F>, Vec<usize>)> = None;
    for ((y, x), &m) in mask.indexed_iter() {
        if m != selected {
            continue;
        }
        let flat = y * w + x;
        match &mut best {
            None => best = Some(((0..d).map(|c| p[[c, y, x]]).collect(), vec![flat; d])),
            Some((vals, arg)) => {
                for c in 0..d {
                    let v = p[[c, y, x]];
                    if v > vals[c] {
                        vals[c] = v;
                        arg[c] = flat;
                    }
                }
            }
        }
    }
    best.map(|(v, argmax)| (v, PoolTrace::Max { argmax }))
}

/// Channel-wise mean of `p` over pixels with `mask == 1`; `None` when the mask is empty.
pub fn masked_mean_pool<F: Real>(p: &ArrayView3<F>, mask: &Mask) -> Result<Option<Array1<F>>> {
    check(p, mask)?;
    Ok(mean_where(p, mask, 1).map(|(v, _)| v))
}

/// Channel-wise maximum of `p` over pixels with `mask == 1`; `None` when the mask is empty.
pub fn masked_max_pool<F: Real>(p: &ArrayView3<F>, mask: &Mask) -> Result<Option<Array1<F>>> {
    check(p, mask)?;
    Ok(max_where(p, mask, 1).map(|(v, _)| v))
}

fn sample_positions<R: Rng + ?Sized>(mask: &Mask, n: usize, rng: &mut R) -> Vec<usize> {
    let w = mask.dim().1;
    let positions: Vec<usize> = mask
        .indexed_iter()
        .filter(|(_, &m)| m == 1)
        .map(|((y, x), _)| y * w + x)
        .collect();
    let k = n.min(positions.len());
    rand::seq::index::sample(rng, positions.len(), k)
        .into_iter()
        .map(|i| positions[i])
        .collect()
}

fn pixel<F: Real>(p: &ArrayView3<F>, flat: usize) -> Array1<F> {
    let w = p.dim().2;
    p.slice(ndarray::s![.., flat / w, flat % w]).to_owned()
}

/// Uniformly samples `min(n, |mask|)` distinct masked positions and returns
/// their projection vectors.
pub fn random_pixel_sample<F: Real, R: Rng + ?Sized>(
    p: &ArrayView3<F>,
    mask: &Mask,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Array1<F>>> {
    check(p, mask)?;
    Ok(sample_positions(mask, n, rng).into_iter().map(|i| pixel(p, i)).collect())
}

/// A triple together with the pooling records for each component.
#[derive(Clone, Debug)]
pub struct TracedTriple<F> {
    pub triple: PooledPairTriple<F>,
    pub source_pos: PoolTrace,
    pub source_neg: PoolTrace,
    pub target: PoolTrace,
}

/// Builds the MI triples for one source/target image pair.
pub fn build_triples<F: Real, R: Rng + ?Sized>(
    src_p: &ArrayView3<F>,
    src_mask_gt: &Mask,
    tgt_p: &ArrayView3<F>,
    tgt_pseudo_mask: &Mask,
    strategy: &PoolingStrategy,
    rng: &mut R,
) -> Result<Vec<PooledPairTriple<F>>> {
    Ok(build_triples_traced(src_p, src_mask_gt, tgt_p, tgt_pseudo_mask, strategy, rng)?
        .into_iter()
        .map(|t| t.triple)
        .collect())
}

pub fn build_triples_traced<F: Real, R: Rng + ?Sized>(
    src_p: &ArrayView3<F>,
    src_mask_gt: &Mask,
    tgt_p: &ArrayView3<F>,
    tgt_pseudo_mask: &Mask,
    strategy: &PoolingStrategy,
    rng: &mut R,
) -> Result<Vec<TracedTriple<F>>> {
    check(src_p, src_mask_gt)?;
    check(tgt_p, tgt_pseudo_mask)?;
    if src_p.dim().0 != tgt_p.dim().0 {
        return Err(Error::Shape(format!(
            "source has {} channels, target has {}",
            src_p.dim().0,
            tgt_p.dim().0
        )));
    }
    strategy.validate()?;
    let source_pool = |selected| match strategy.kind {
        PoolingKind::Max => max_where(src_p, src_mask_gt, selected),
        PoolingKind::Mean | PoolingKind::RandomPixels => mean_where(src_p, src_mask_gt, selected),
    };
    let (Some((z_s, source_pos)), Some((z_s_neg, source_neg))) = (source_pool(1), source_pool(0)) else {
        return Ok(Vec::new());
    };
    let targets: Vec<(Array1<F>, PoolTrace)> = match strategy.kind {
        PoolingKind::Mean => mean_where(tgt_p, tgt_pseudo_mask, 1).into_iter().collect(),
        PoolingKind::Max => max_where(tgt_p, tgt_pseudo_mask, 1).into_iter().collect(),
        PoolingKind::RandomPixels => sample_positions(tgt_pseudo_mask, strategy.n_pixels, rng)
            .into_iter()
            .map(|i| (pixel(tgt_p, i), PoolTrace::Pixel { index: i }))
            .collect(),
    };
    Ok(targets
        .into_iter()
        .map(|(z_t, target)| TracedTriple {
            triple: PooledPairTriple {
                z_s: z_s.clone(),
                z_t,
                z_s_neg: z_s_neg.clone(),
            },
            source_pos: source_pos.clone(),
            source_neg: source_neg.clone(),
            target,
        })
        .collect())
}

/// Adds the gradient of a pooled vector back onto its `[D, H, W]` map.
pub fn scatter_pool_grad<F: Real>(trace: &PoolTrace, mask: &Mask, dz: &Array1<F>, dp: &mut ArrayViewMut3<F>) {
    let (d, _, w) = dp.dim();
    match trace {
        PoolTrace::Mean { selected, count } => {
            let scale = F::one() / F::usize(*count);
            for ((y, x), &m) in mask.indexed_iter() {
                if m == *selected {
                    for c in 0..d {
                        dp[[c, y, x]] += dz[c] * scale;
                    }
                }
            }
        }
        PoolTrace::Max { argmax } => {
            for (c, &flat) in argmax.iter().enumerate() {
                dp[[c, flat / w, flat % w]] += dz[c];
            }
        }
        PoolTrace::Pixel { index } => {
            for c in 0..d {
                dp[[c, index / w, index % w]] += dz[c];
            }
        }
    }
}

/// Routes triple gradients into source and target projection-map gradients.
pub fn scatter_triple_grad<F: Real>(
    traced: &TracedTriple<F>,
    grad: &TripleGrad<F>,
    src_mask: &Mask,
    tgt_mask: &Mask,
    d_src: &mut ArrayViewMut3<F>,
    d_tgt: &mut ArrayViewMut3<F>,
) {
    scatter_pool_grad(&traced.source_pos, src_mask, &grad.z_s, d_src);
    scatter_pool_grad(&traced.source_neg, src_mask, &grad.z_s_neg, d_src);
    scatter_pool_grad(&traced.target, tgt_mask, &grad.z_t, d_tgt);
}
