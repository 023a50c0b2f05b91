//! Segmentation loss (dice + BCE on logits) and the Jensen-Shannon mutual
//! information estimator over pooled representation triples.
//!
//! Every loss comes in a value-only form and a `*_with_grad` form returning
//! the analytic gradient with respect to its continuous input.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::model::Discriminator;
use crate::tensor::Real;

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// `log(1 + e^x)` via `max(x, 0) + log(1 + e^-|x|)`.
#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn check_shapes<F>(a: &ArrayView2<F>, mask: &Mask) -> Result<()> {
    if a.dim() != mask.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", a.dim(), mask.dim())));
    }
    Ok(())
}

/// `1 - (2 Σ p t + ε) / (Σ p + Σ t + ε)` for one image.
pub fn dice_loss<F: Real>(probs: &ArrayView2<F>, target: &Mask) -> Result<F> {
    Ok(dice_loss_with_grad(probs, target)?.0)
}

pub fn dice_loss_with_grad<F: Real>(probs: &ArrayView2<F>, target: &Mask) -> Result<(F, Array2<F>)> {
    check_shapes(probs, target)?;
    let eps = F::lit(DICE_EPS);
    let two = F::lit(2.0);
    let mut inter = F::zero();
    let mut denom = eps;
    for (&p, &t) in probs.iter().zip(target.iter()) {
        let t = F::from_u8(t).unwrap_or_else(F::zero);
        inter += p * t;
        denom += p + t;
    }
    let num = two * inter + eps;
    let loss = F::one() - num / denom;
    let grad = ndarray::Zip::from(probs)
        .and(target)
        .map_collect(|_, &t| -(two * F::from_u8(t).unwrap_or_else(F::zero) * denom - num) / (denom * denom));
    Ok((loss, grad))
}

/// Mean over pixels of `sp(l) - t·l`.
pub fn bce_loss<F: Real>(logits: &ArrayView2<F>, target: &Mask) -> Result<F> {
    Ok(bce_loss_with_grad(logits, target)?.0)
}

pub fn bce_loss_with_grad<F: Real>(logits: &ArrayView2<F>, target: &Mask) -> Result<(F, Array2<F>)> {
    check_shapes(logits, target)?;
    let n = F::usize(logits.len().max(1));
    let mut total = F::zero();
    for (&l, &t) in logits.iter().zip(target.iter()) {
        total += softplus(l) - if t > 0 { l } else { F::zero() };
    }
    let grad = ndarray::Zip::from(logits)
        .and(target)
        .map_collect(|&l, &t| (sigmoid(l) - if t > 0 { F::one() } else { F::zero() }) / n);
    Ok((total / n, grad))
}

/// `dice_loss(sigmoid(logits)) + bce_loss(logits)`, equal weights.
pub fn seg_loss<F: Real>(logits: &ArrayView2<F>, target: &Mask) -> Result<F> {
    Ok(seg_loss_with_grad(logits, target)?.0)
}

pub fn seg_loss_with_grad<F: Real>(logits: &ArrayView2<F>, target: &Mask) -> Result<(F, Array2<F>)> {
    let probs = logits.mapv(sigmoid);
    let (dice, d_probs) = dice_loss_with_grad(&probs.view(), target)?;
    let (bce, d_bce) = bce_loss_with_grad(logits, target)?;
    let grad = ndarray::Zip::from(&d_probs)
        .and(&probs)
        .and(&d_bce)
        .map_collect(|&dp, &p, &db| dp * p * (F::one() - p) + db);
    Ok((dice + bce, grad))
}

/// Batched segmentation loss on `[B, 1, H, W]` logits: dice is computed per
/// image and averaged, BCE is the mean over every pixel in the batch.
pub fn seg_loss_batch<F: Real>(logits: &Array4<F>, targets: &[&Mask]) -> Result<(F, Array4<F>)> {
    let (b, c, h, w) = logits.dim();
    if c != 1 || b != targets.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} target masks",
            logits.dim(),
            targets.len()
        )));
    }
    if b == 0 {
        return Err(Error::EmptyInput("segmentation batch"));
    }
    let bf = F::usize(b);
    let mut total = F::zero();
    let mut grad = Array4::zeros((b, 1, h, w));
    for (i, target) in targets.iter().enumerate() {
        let l = logits.index_axis(Axis(0), i).index_axis_move(Axis(0), 0);
        let (loss, g) = seg_loss_with_grad(&l, target)?;
        total += loss;
        grad.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&(g / bf));
    }
    Ok((total / bf, grad))
}

/// One MI training unit: source-nuclei, target-nuclei and source-background
/// pooled vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledPairTriple<F> {
    pub z_s: Array1<F>,
    pub z_t: Array1<F>,
    pub z_s_neg: Array1<F>,
}

impl<F: Real> PooledPairTriple<F> {
    pub fn dim(&self) -> usize {
        self.z_s.len()
    }

    pub fn is_valid(&self) -> bool {
        let d = self.dim();
        self.z_t.len() == d
            && self.z_s_neg.len() == d
            && self
                .z_s
                .iter()
                .chain(self.z_t.iter())
                .chain(self.z_s_neg.iter())
                .all(|v| v.is_finite())
    }
}

/// Gradients of an objective with respect to each component of a triple.
#[derive(Clone, Debug)]
pub struct TripleGrad<F> {
    pub z_s: Array1<F>,
    pub z_t: Array1<F>,
    pub z_s_neg: Array1<F>,
}

/// JSD estimate from critic scores:
/// `mean_i [ -sp(-T_pos[i]) - sp(T_neg[i]) ]`, with its gradient
/// with respect to each score.
pub fn jsd_from_scores<F: Real>(pos: &Array1<F>, neg: &Array1<F>) -> Result<(F, Array1<F>, Array1<F>)> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("JSD estimate needs at least one triple"));
    }
    if pos.len() != neg.len() {
        return Err(Error::Shape(format!("{} positive vs {} negative scores", pos.len(), neg.len())));
    }
    let n = F::usize(pos.len());
    let value = pos
        .iter()
        .zip(neg.iter())
        .map(|(&tp, &tn)| -softplus(-tp) - softplus(tn))
        .sum::<F>()
        / n;
    let d_pos = pos.mapv(|tp| sigmoid(-tp) / n);
    let d_neg = neg.mapv(|tn| -sigmoid(tn) / n);
    Ok((value, d_pos, d_neg))
}

fn stack<F: Real>(rows: impl Iterator<Item = Array1<F>>, d: usize) -> Array2<F> {
    let rows: Vec<Array1<F>> = rows.collect();
    let mut m = Array2::zeros((rows.len(), d));
    for (mut dst, src) in m.outer_iter_mut().zip(rows) {
        dst.assign(&src);
    }
    m
}

fn check_triples<F: Real>(triples: &[PooledPairTriple<F>], disc: &Discriminator<F>) -> Result<()> {
    if triples.is_empty() {
        return Err(Error::EmptyInput("JSD estimate needs at least one triple"));
    }
    let d = disc.feature_dim();
    if let Some(bad) = triples.iter().find(|t| t.z_s.len() != d || t.z_t.len() != d || t.z_s_neg.len() != d) {
        return Err(Error::Shape(format!(
            "triple of dimension {} does not match discriminator dimension {d}",
            bad.dim()
        )));
    }
    Ok(())
}

/// Jensen-Shannon MI lower bound over a batch of triples. Positive pairs are
/// `(z_s, z_t)`, negative pairs `(z_s_neg, z_t)`, one negative per positive.
pub fn jsd_mi_estimate<F: Real>(triples: &[PooledPairTriple<F>], disc: &Discriminator<F>) -> Result<F> {
    check_triples(triples, disc)?;
    let d = disc.feature_dim();
    let zs = stack(triples.iter().map(|t| t.z_s.clone()), d);
    let zt = stack(triples.iter().map(|t| t.z_t.clone()), d);
    let zn = stack(triples.iter().map(|t| t.z_s_neg.clone()), d);
    let (pos, _) = disc.forward(&zs, &zt)?;
    let (neg, _) = disc.forward(&zn, &zt)?;
    Ok(jsd_from_scores(&pos, &neg)?.0)
}

/// Evaluates the estimate and backpropagates `upstream · ∂Î` into the
/// discriminator's parameter gradients. Returns the estimate and the
/// gradients of `upstream · Î` with respect to every triple component.
pub fn jsd_mi_backward<F: Real>(
    triples: &[PooledPairTriple<F>],
    disc: &mut Discriminator<F>,
    upstream: F,
) -> Result<(F, Vec<TripleGrad<F>>)> {
    check_triples(triples, disc)?;
    let d = disc.feature_dim();
    let zs = stack(triples.iter().map(|t| t.z_s.clone()), d);
    let zt = stack(triples.iter().map(|t| t.z_t.clone()), d);
    let zn = stack(triples.iter().map(|t| t.z_s_neg.clone()), d);
    let (pos, pos_cache) = disc.forward(&zs, &zt)?;
    let (neg, neg_cache) = disc.forward(&zn, &zt)?;
    let (value, d_pos, d_neg) = jsd_from_scores(&pos, &neg)?;
    let (d_zs, d_zt_pos) = disc.backward(&pos_cache, &(d_pos * upstream));
    let (d_zn, d_zt_neg) = disc.backward(&neg_cache, &(d_neg * upstream));
    let grads = (0..triples.len())
        .map(|i| TripleGrad {
            z_s: d_zs.row(i).to_owned(),
            z_t: &d_zt_pos.row(i) + &d_zt_neg.row(i),
            z_s_neg: d_zn.row(i).to_owned(),
        })
        .collect();
    Ok((value, grads))
}
