//! Oracle suites shared by the integration tests and the acceptance runner.
//! Each suite returns a [`SuiteResult`] instead of panicking so that the
//! acceptance runner can report every criterion.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mani::data::{InstanceMap, Mask};
use mani::losses::{bce_loss, bce_loss_with_grad, dice_loss, dice_loss_with_grad, jsd_from_scores, jsd_mi_backward, jsd_mi_estimate, seg_loss, seg_loss_with_grad, PooledPairTriple};
use mani::metrics::{aji, dice_score, panoptic};
use mani::model::Discriminator;
use mani::nn::{ConvBnRelu, Mode, Module};
use mani::pooling::{build_triples, masked_max_pool, masked_mean_pool, PoolingKind, PoolingStrategy};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error, so that exactly-zero gradients
/// compare in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;
pub const GRAD_INSTANCES: usize = 25;
/// Central differences are only valid away from ReLU kinks. Instances whose
/// pre-activations lie closer than this to zero are redrawn, since a probe of
/// size `FD_STEP` could cross the kink and report a one-sided slope.
pub const KINK_MARGIN: f64 = 0.02;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate of `x`.
fn check_coords(x: &mut [f64], analytic: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(x);
        x[i] = orig - FD_STEP;
        let down = f(x);
        x[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * scale
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Array2::from_shape_fn((h, w), |_| u8::from(rng.gen_bool(p)))
}

fn small_shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..7), rng.gen_range(2..7))
}

pub fn grad_dice(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let (h, w) = small_shape(&mut rng);
        let mut probs = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.01..0.99));
        let t = random_mask(&mut rng, h, w, 0.4);
        let (_, g) = dice_loss_with_grad(&probs.view(), &t).unwrap();
        let x = probs.as_slice_mut().unwrap();
        worst = worst.max(check_coords(x, g.as_slice().unwrap(), &mut |v| {
            dice_loss(&Array2::from_shape_vec((h, w), v.to_vec()).unwrap().view(), &t).unwrap()
        }));
    }
    worst
}

fn grad_logit_loss(
    seed: u64,
    with_grad: fn(&ndarray::ArrayView2<f64>, &Mask) -> mani::Result<(f64, Array2<f64>)>,
    value: fn(&ndarray::ArrayView2<f64>, &Mask) -> mani::Result<f64>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let (h, w) = small_shape(&mut rng);
        let mut logits = Array2::from_shape_fn((h, w), |_| normal(&mut rng, 2.0));
        let t = random_mask(&mut rng, h, w, 0.4);
        let (_, g) = with_grad(&logits.view(), &t).unwrap();
        let x = logits.as_slice_mut().unwrap();
        worst = worst.max(check_coords(x, g.as_slice().unwrap(), &mut |v| {
            value(&Array2::from_shape_vec((h, w), v.to_vec()).unwrap().view(), &t).unwrap()
        }));
    }
    worst
}

pub fn grad_bce(seed: u64) -> f64 {
    grad_logit_loss(seed, bce_loss_with_grad::<f64>, bce_loss::<f64>)
}

pub fn grad_seg(seed: u64) -> f64 {
    grad_logit_loss(seed, seg_loss_with_grad::<f64>, seg_loss::<f64>)
}

/// Gradient of `c · mean_pool(p, mask)`; the analytic gradient is `c / |mask|`
/// on selected pixels.
pub fn grad_mean_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let (h, w) = small_shape(&mut rng);
        let d = rng.gen_range(1..6);
        let mut p = Array3::from_shape_fn((d, h, w), |_| normal(&mut rng, 1.0));
        let mut mask = random_mask(&mut rng, h, w, 0.5);
        mask[[rng.gen_range(0..h), rng.gen_range(0..w)]] = 1;
        let c = Array1::from_shape_fn(d, |_| normal(&mut rng, 1.0));
        let count = mask.iter().filter(|&&m| m == 1).count() as f64;
        let analytic = Array3::from_shape_fn((d, h, w), |(k, y, x)| if mask[[y, x]] == 1 { c[k] / count } else { 0.0 });
        let x = p.as_slice_mut().unwrap();
        worst = worst.max(check_coords(x, analytic.as_slice().unwrap(), &mut |v| {
            let p = Array3::from_shape_vec((d, h, w), v.to_vec()).unwrap();
            masked_mean_pool(&p.view(), &mask).unwrap().unwrap().dot(&c)
        }));
    }
    worst
}

fn random_triples(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<PooledPairTriple<f64>> {
    (0..n)
        .map(|_| PooledPairTriple {
            z_s: Array1::from_shape_fn(d, |_| normal(rng, scale)),
            z_t: Array1::from_shape_fn(d, |_| normal(rng, scale)),
            z_s_neg: Array1::from_shape_fn(d, |_| normal(rng, scale)),
        })
        .collect()
}

fn random_discriminator(rng: &mut ChaCha8Rng, d: usize, weight_scale: f64) -> Discriminator<f64> {
    let width = rng.gen_range(2..10);
    let layers = rng.gen_range(1..3);
    let mut disc = Discriminator::<f64>::new(d, width, layers, rng);
    disc.visit_params_mut("", &mut |_, p| p.value.mapv_inplace(|v| v * weight_scale));
    disc
}

/// Gradients of the JSD estimate with respect to every triple component and
/// every discriminator parameter.
pub fn grad_jsd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let (triples, mut disc) = loop {
            let d = rng.gen_range(1..5);
            let n = rng.gen_range(1..5);
            let triples = random_triples(&mut rng, n, d, 1.0);
            let disc = random_discriminator(&mut rng, d, 2.0);
            // The second hidden layer sees perturbations amplified by the first.
            if critic_kink_distance(&triples, &disc) > 2.5 * KINK_MARGIN {
                break (triples, disc);
            }
        };
        let d = disc.feature_dim();
        disc.zero_grad();
        let (_, grads) = jsd_mi_backward(&triples, &mut disc, 1.0).unwrap();

        // Triple components, flattened as [z_s | z_t | z_s_neg] per triple.
        let mut flat: Vec<f64> = Vec::new();
        let mut analytic: Vec<f64> = Vec::new();
        for (t, g) in triples.iter().zip(&grads) {
            for (v, a) in [(&t.z_s, &g.z_s), (&t.z_t, &g.z_t), (&t.z_s_neg, &g.z_s_neg)] {
                flat.extend(v.iter());
                analytic.extend(a.iter());
            }
        }
        let rebuild = |v: &[f64]| -> Vec<PooledPairTriple<f64>> {
            v.chunks(3 * d)
                .map(|c| PooledPairTriple {
                    z_s: Array1::from(c[..d].to_vec()),
                    z_t: Array1::from(c[d..2 * d].to_vec()),
                    z_s_neg: Array1::from(c[2 * d..].to_vec()),
                })
                .collect()
        };
        worst = worst.max(check_coords(&mut flat, &analytic, &mut |v| {
            jsd_mi_estimate(&rebuild(v), &disc).unwrap()
        }));

        // Discriminator parameters.
        let mut params: Vec<f64> = Vec::new();
        let mut pgrads: Vec<f64> = Vec::new();
        disc.visit_params_mut("", &mut |_, p| {
            params.extend(p.value.iter());
            pgrads.extend(p.grad.iter());
        });
        let template = disc.clone();
        worst = worst.max(check_coords(&mut params, &pgrads, &mut |v| {
            let mut probe = template.clone();
            let mut k = 0;
            probe.visit_params_mut("", &mut |_, p| {
                for x in p.value.iter_mut() {
                    *x = v[k];
                    k += 1;
                }
            });
            jsd_mi_estimate(&triples, &probe).unwrap()
        }));
    }
    worst
}

/// Weights of the 1x1 projection convolution, through batch norm and ReLU,
/// under the objective `Σ c ⊙ proj(x)`.
pub fn grad_projection_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let (x, mut head) = loop {
            let d = rng.gen_range(2..5);
            let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
            let x = Array4::from_shape_fn((2, d, h, w), |_| normal(&mut rng, 1.0));
            let head = ConvBnRelu::<f64>::new(d, d, 1, &mut rng);
            if head_kink_distance(&head, &x) > KINK_MARGIN {
                break (x, head);
            }
        };
        let c = Array4::from_shape_fn(x.dim(), |_| normal(&mut rng, 1.0));
        let (_, cache) = head.forward(&x, Mode::Train);
        head.zero_grad();
        head.backward(&cache, &c, false);
        let analytic: Vec<f64> = head.conv.weight.grad.iter().copied().collect();
        let mut weights: Vec<f64> = head.conv.weight.value.iter().copied().collect();
        let template = head.clone();
        worst = worst.max(check_coords(&mut weights, &analytic, &mut |v| {
            let mut probe = template.clone();
            probe.conv.weight.value.iter_mut().zip(v).for_each(|(d, &s)| *d = s);
            let (y, _) = probe.forward(&x, Mode::Train);
            (&y * &c).sum()
        }));
    }
    worst
}

/// Smallest |pre-activation| of any hidden critic unit over the positive and
/// negative pairs.
fn critic_kink_distance(triples: &[PooledPairTriple<f64>], disc: &Discriminator<f64>) -> f64 {
    let mut nearest = f64::INFINITY;
    for t in triples {
        for first in [&t.z_s, &t.z_s_neg] {
            let mut x = ndarray::concatenate(ndarray::Axis(0), &[first.view(), t.z_t.view()])
                .unwrap()
                .insert_axis(ndarray::Axis(0));
            for layer in &disc.hidden {
                let pre = layer.forward(&x);
                nearest = pre.iter().fold(nearest, |m, v| m.min(v.abs()));
                x = pre.mapv(|v| v.max(0.0));
            }
        }
    }
    nearest
}

/// Smallest |batch-norm output| entering the ReLU.
fn head_kink_distance(head: &ConvBnRelu<f64>, x: &Array4<f64>) -> f64 {
    let mut probe = head.clone();
    let (y, _) = probe.conv.forward(x);
    let (pre, _) = probe.bn.forward(&y, Mode::Train);
    pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

pub fn gradient_suite() -> SuiteResult {
    let checks: [(&str, fn(u64) -> f64); 6] = [
        ("dice", grad_dice),
        ("bce", grad_bce),
        ("seg", grad_seg),
        ("mean_pool", grad_mean_pool),
        ("jsd", grad_jsd),
        ("proj_head", grad_projection_head),
    ];
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, f) in checks {
        let worst = f(1000);
        passed &= worst <= FD_REL_TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    SuiteResult {
        name: "gradient suite",
        passed,
        detail: format!(
            "max rel err ({} instances each, step {FD_STEP:e}, tol {FD_REL_TOL:e}): {}",
            GRAD_INSTANCES,
            parts.join(", ")
        ),
    }
}

// ---------------------------------------------------------------------------
// JSD bound
// ---------------------------------------------------------------------------

pub const JSD_DRAWS: usize = 1000;

pub fn jsd_bound_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    let mut max_value = f64::NEG_INFINITY;
    for k in 0..JSD_DRAWS {
        let d = rng.gen_range(1..9);
        let n = rng.gen_range(1..9);
        // Vary magnitudes so that scores reach the saturated regime too.
        let scale = [0.1, 1.0, 10.0][k % 3];
        let triples = random_triples(&mut rng, n, d, scale);
        let disc = random_discriminator(&mut rng, d, [0.5, 1.0, 4.0][k % 3]);
        max_value = max_value.max(jsd_mi_estimate(&triples, &disc).unwrap());
    }
    let bound_ok = max_value <= 0.0;

    let mut zero_err = 0.0f64;
    for _ in 0..20 {
        let d = rng.gen_range(1..9);
        let n = rng.gen_range(1..9);
        let triples = random_triples(&mut rng, n, d, 3.0);
        let mut disc = random_discriminator(&mut rng, d, 1.0);
        disc.zero_output_layer();
        let v = jsd_mi_estimate(&triples, &disc).unwrap();
        zero_err = zero_err.max((v + 2.0 * std::f64::consts::LN_2).abs());
    }
    let zero_ok = zero_err <= 1e-9;

    let sweep: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.05).collect();
    let value = |tp: f64, tn: f64| jsd_from_scores(&Array1::from(vec![tp]), &Array1::from(vec![tn])).unwrap().0;
    let mut mono_ok = true;
    for &fixed in &[-5.0, 0.0, 5.0] {
        let pos: Vec<f64> = sweep.iter().map(|&t| value(t, fixed)).collect();
        let neg: Vec<f64> = sweep.iter().map(|&t| value(fixed, t)).collect();
        mono_ok &= pos.windows(2).all(|w| w[1] >= w[0]);
        mono_ok &= neg.windows(2).all(|w| w[1] <= w[0]);
    }
    SuiteResult {
        name: "JSD bound suite",
        passed: bound_ok && zero_ok && mono_ok,
        detail: format!(
            "max over {JSD_DRAWS} draws {max_value:.3e} (<= 0: {bound_ok}); zero-output |err| {zero_err:.1e} (tol 1e-9); monotone sweeps: {mono_ok}"
        ),
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

pub const POOL_INSTANCES: usize = 200;
pub const POOL_TOL: f64 = 1e-12;

/// Per-pixel reference loop for both pooling modes.
fn reference_pool(p: &Array3<f64>, mask: &Mask, max: bool) -> Option<Vec<f64>> {
    let (d, h, w) = p.dim();
    let mut out = vec![if max { f64::NEG_INFINITY } else { 0.0 }; d];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 1 {
                continue;
            }
            count += 1;
            for k in 0..d {
                if max {
                    out[k] = out[k].max(p[[k, y, x]]);
                } else {
                    out[k] += p[[k, y, x]];
                }
            }
        }
    }
    if count == 0 {
        return None;
    }
    if !max {
        out.iter_mut().for_each(|v| *v /= count as f64);
    }
    Some(out)
}

pub fn pooling_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let mut worst = 0.0f64;
    let mut mismatched_presence = 0usize;
    let mut empty_cases = 0usize;
    for _ in 0..POOL_INSTANCES {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let d = rng.gen_range(1..8);
        let p = Array3::from_shape_fn((d, h, w), |_| normal(&mut rng, 3.0));
        let density = [0.0, 0.05, 0.5, 1.0][rng.gen_range(0..4)];
        let mask = random_mask(&mut rng, h, w, density);
        for max in [false, true] {
            let got = if max { masked_max_pool(&p.view(), &mask) } else { masked_mean_pool(&p.view(), &mask) }.unwrap();
            match (got, reference_pool(&p, &mask, max)) {
                (Some(g), Some(r)) => {
                    for (a, b) in g.iter().zip(&r) {
                        worst = worst.max((a - b).abs());
                    }
                }
                (None, None) => empty_cases += 1,
                _ => mismatched_presence += 1,
            }
        }
    }

    // Degenerate-mask skip rule: any empty component yields no triple.
    let p = Array3::from_shape_fn((3, 4, 4), |(k, y, x)| (k * 16 + y * 4 + x) as f64);
    let full = Mask::from_elem((4, 4), 1);
    let empty = Mask::zeros((4, 4));
    let mut half = Mask::zeros((4, 4));
    half.slice_mut(ndarray::s![..2, ..]).fill(1);
    let mut skip_ok = true;
    for kind in [PoolingKind::Mean, PoolingKind::Max, PoolingKind::RandomPixels] {
        let s = PoolingStrategy { kind, n_pixels: 4 };
        let mut n = |sm: &Mask, tm: &Mask| build_triples(&p.view(), sm, &p.view(), tm, &s, &mut rng).unwrap().len();
        skip_ok &= n(&full, &half) == 0; // no source background
        skip_ok &= n(&empty, &half) == 0; // no source nuclei
        skip_ok &= n(&half, &empty) == 0; // no target nuclei
        skip_ok &= n(&half, &half) == if kind == PoolingKind::RandomPixels { 4 } else { 1 };
    }
    SuiteResult {
        name: "pooling oracle suite",
        passed: worst <= POOL_TOL && mismatched_presence == 0 && skip_ok && empty_cases > 0,
        detail: format!(
            "{POOL_INSTANCES} instances x {{mean,max}}: max |err| {worst:.1e} (tol {POOL_TOL:e}), {empty_cases} empty-mask cases agree, presence mismatches {mismatched_presence}; skip rule: {skip_ok}"
        ),
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

pub const METRIC_MAPS: usize = 100;
pub const METRIC_TOL: f64 = 1e-9;

/// Random instance map made of up to `max_inst` axis-aligned blobs; later
/// blobs overwrite earlier ones and vanished labels are compacted away.
pub fn random_instance_map(rng: &mut ChaCha8Rng, h: usize, w: usize, max_inst: usize) -> InstanceMap {
    let mut m = InstanceMap::zeros((h, w));
    let n = rng.gen_range(0..=max_inst);
    for label in 1..=n as u32 {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (bh, bw) = (rng.gen_range(1..=h.min(10)), rng.gen_range(1..=w.min(10)));
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                if rng.gen_bool(0.85) {
                    m[[y, x]] = label;
                }
            }
        }
    }
    m
}

/// Perturbs a map so that predictions overlap ground truth imperfectly.
fn perturb(rng: &mut ChaCha8Rng, gt: &InstanceMap, max_inst: usize) -> InstanceMap {
    let (h, w) = gt.dim();
    let mut m = gt.clone();
    let shift = (rng.gen_range(0..3), rng.gen_range(0..3));
    for ((y, x), v) in m.indexed_iter_mut() {
        let (sy, sx) = (y.saturating_sub(shift.0), x.saturating_sub(shift.1));
        *v = gt[[sy, sx]];
        if rng.gen_bool(0.1) {
            *v = rng.gen_range(0..=max_inst as u32 + 2);
        }
    }
    let _ = (h, w);
    m
}

type PixelSets = BTreeMap<u32, BTreeSet<(usize, usize)>>;

fn pixel_sets(m: &InstanceMap) -> PixelSets {
    let mut s: PixelSets = BTreeMap::new();
    for ((y, x), &v) in m.indexed_iter() {
        if v > 0 {
            s.entry(v).or_default().insert((y, x));
        }
    }
    s
}

pub fn oracle_dice(pred: &Mask, gt: &Mask) -> f64 {
    let p: BTreeSet<_> = pred.indexed_iter().filter(|(_, &v)| v > 0).map(|(i, _)| i).collect();
    let g: BTreeSet<_> = gt.indexed_iter().filter(|(_, &v)| v > 0).map(|(i, _)| i).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

pub fn oracle_aji(gt: &InstanceMap, pred: &InstanceMap) -> f64 {
    let (g, p) = (pixel_sets(gt), pixel_sets(pred));
    if g.is_empty() && p.is_empty() {
        return 1.0;
    }
    if g.is_empty() || p.is_empty() {
        return 0.0;
    }
    let mut used: BTreeSet<u32> = BTreeSet::new();
    let (mut inter, mut union) = (0usize, 0usize);
    for (_, gs) in &g {
        let mut best: Option<(u32, f64)> = None;
        for (&pl, ps) in &p {
            if used.contains(&pl) {
                continue;
            }
            let i = gs.intersection(ps).count();
            if i == 0 {
                continue;
            }
            let iou = i as f64 / gs.union(ps).count() as f64;
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((pl, iou));
            }
        }
        match best {
            Some((pl, _)) => {
                used.insert(pl);
                inter += gs.intersection(&p[&pl]).count();
                union += gs.union(&p[&pl]).count();
            }
            None => union += gs.len(),
        }
    }
    for (pl, ps) in &p {
        if !used.contains(pl) {
            union += ps.len();
        }
    }
    inter as f64 / union as f64
}

pub fn oracle_panoptic(gt: &InstanceMap, pred: &InstanceMap) -> (f64, f64, f64) {
    let (g, p) = (pixel_sets(gt), pixel_sets(pred));
    if g.is_empty() && p.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let mut matches = Vec::new();
    for gs in g.values() {
        for ps in p.values() {
            let iou = gs.intersection(ps).count() as f64 / gs.union(ps).count() as f64;
            if iou > 0.5 {
                matches.push(iou);
            }
        }
    }
    let tp = matches.len() as f64;
    let fp = p.len() as f64 - tp;
    let fn_ = g.len() as f64 - tp;
    let dq = tp / (tp + fp / 2.0 + fn_ / 2.0);
    let sq = if matches.is_empty() { 0.0 } else { matches.iter().sum::<f64>() / tp };
    (dq, sq, dq * sq)
}

pub fn metrics_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let mut worst = 0.0f64;
    let mut pq_identity_err = 0.0f64;
    let mut identity_ok = true;
    for k in 0..METRIC_MAPS {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let gt = random_instance_map(&mut rng, h, w, 6);
        let pred = if k % 10 == 0 { InstanceMap::zeros((h, w)) } else { perturb(&mut rng, &gt, 6) };
        let (gm, pm) = (gt.mapv(|v| u8::from(v > 0)), pred.mapv(|v| u8::from(v > 0)));
        let pan = panoptic(&gt, &pred).unwrap();
        let (dq, sq, pq) = oracle_panoptic(&gt, &pred);
        for (a, b) in [
            (dice_score(&pm, &gm).unwrap(), oracle_dice(&pm, &gm)),
            (aji(&gt, &pred).unwrap(), oracle_aji(&gt, &pred)),
            (pan.dq, dq),
            (pan.sq, sq),
            (pan.pq, pq),
        ] {
            worst = worst.max((a - b).abs());
        }
        pq_identity_err = pq_identity_err.max((pan.pq - pan.dq * pan.sq).abs());

        let same = panoptic(&gt, &gt).unwrap();
        identity_ok &= dice_score(&gm, &gm).unwrap() == 1.0
            && aji(&gt, &gt).unwrap() == 1.0
            && same.dq == 1.0
            && same.sq == 1.0
            && same.pq == 1.0;
    }
    SuiteResult {
        name: "metrics oracle suite",
        passed: worst <= METRIC_TOL && identity_ok && pq_identity_err <= METRIC_TOL,
        detail: format!(
            "{METRIC_MAPS} maps <= 32x32, <= 6 instances: max |err| vs oracles {worst:.1e} (tol {METRIC_TOL:e}); identity exactly 1.0: {identity_ok}; max |pq - dq*sq| {pq_identity_err:.1e}"
        ),
    }
}
