//! Training objective: weighted cross-entropy, weighted binary cross-entropy,
//! Lovász-softmax and their four-way combination over the prediction heads.
//!
//! Each loss is a single fused tape node whose local gradient is computed
//! alongside the value.

use crate::autodiff::Var;
use crate::data::gt::{derive_gt_eg, derive_gt_loc};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::net::PredictionSet;
use crate::tensor::{sigmoid, Axis, Shape, Tensor};

fn check_target(op: &'static str, s: Shape, target: &LabelMap) -> Result<()> {
    if (target.n(), target.height(), target.width()) != (s.n, s.h, s.w) {
        return Err(Error::invalid(
            op,
            format!(
                "target {}×{}×{} does not match scores {s}",
                target.n(),
                target.height(),
                target.width()
            ),
        ));
    }
    Ok(())
}

/// `Σ w[g]·(−log softmax(z)[g]) / Σ w[g]` over all pixels.
pub fn weighted_ce<'t>(logits: Var<'t>, target: &LabelMap, class_weights: &[f64]) -> Result<Var<'t>> {
    let s = logits.shape();
    check_target("weighted_ce", s, target)?;
    if class_weights.len() != s.c {
        return Err(Error::invalid(
            "weighted_ce",
            format!("{} class weights for {} classes", class_weights.len(), s.c),
        ));
    }
    target.check_classes(s.c)?;
    let z = logits.value();
    let plane = s.plane();
    let mut grad = Tensor::zeros(s);
    let (mut num, mut den) = (0.0, 0.0);
    for n in 0..s.n {
        for p in 0..plane {
            let at = |c: usize| (n * s.c + c) * plane + p;
            let g = usize::from(target.data()[n * plane + p]);
            let m = (0..s.c).map(|c| z.data()[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..s.c).map(|c| (z.data()[at(c)] - m).exp()).sum();
            let log_z = m + total.ln();
            let w = class_weights[g];
            num += w * (log_z - z.data()[at(g)]);
            den += w;
            for c in 0..s.c {
                let prob = (z.data()[at(c)] - log_z).exp();
                grad.data_mut()[at(c)] = w * (prob - f64::from(u8::from(c == g)));
            }
        }
    }
    if den <= 0.0 {
        return Err(Error::invalid("weighted_ce", "total class weight is zero"));
    }
    let grad = grad.scale(1.0 / den);
    logits.tape().scalar_fn(logits, num / den, grad)
}

/// Weight applied to positive pixels: `#neg / #pos`, or 1 when either side is empty.
pub fn positive_weight(target: &LabelMap) -> f64 {
    let pos = target.data().iter().filter(|&&v| v != 0).count();
    let neg = target.len() - pos;
    if pos == 0 || neg == 0 {
        1.0
    } else {
        neg as f64 / pos as f64
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sigmoid cross-entropy of a one-channel logit map against a binary target,
/// positives weighted by [`positive_weight`], averaged over pixels.
pub fn binary_weighted_ce<'t>(logits: Var<'t>, target: &LabelMap) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.c != 1 {
        return Err(Error::invalid("binary_weighted_ce", format!("expected one channel, got {s}")));
    }
    check_target("binary_weighted_ce", s, target)?;
    target.check_classes(2)?;
    let pw = positive_weight(target);
    let z = logits.value();
    let count = s.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(s);
    for (i, (&zi, &y)) in z.data().iter().zip(target.data()).enumerate() {
        let sig = sigmoid(zi);
        let (l, g) = if y != 0 {
            (pw * softplus(-zi), pw * (sig - 1.0))
        } else {
            (softplus(zi), sig)
        };
        loss += l;
        grad.data_mut()[i] = g / count;
    }
    logits.tape().scalar_fn(logits, loss / count, grad)
}

/// Gradient of the Lovász extension of the Jaccard loss at an indicator
/// vector sorted by decreasing error.
fn jaccard_steps(fg_sorted: &[bool]) -> Vec<f64> {
    let total = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut fg_seen, mut bg_seen) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            fg_seen += 1.0;
        } else {
            bg_seen += 1.0;
        }
        let jac = 1.0 - (total - fg_seen) / (total + bg_seen);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász-softmax over class probabilities `(n, C, h, w)`, averaged over the
/// classes that occur in `target` (the whole batch is one pixel set).
pub fn lovasz_softmax<'t>(probs: Var<'t>, target: &LabelMap) -> Result<Var<'t>> {
    let s = probs.shape();
    check_target("lovasz_softmax", s, target)?;
    target.check_classes(s.c)?;
    let p = probs.value();
    let plane = s.plane();
    let pixels = s.n * plane;
    let index = |c: usize, i: usize| ((i / plane) * s.c + c) * plane + i % plane;
    let present: Vec<usize> = (0..s.c)
        .filter(|&c| target.data().iter().any(|&g| usize::from(g) == c))
        .collect();
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    let k = present.len().max(1) as f64;
    for &c in &present {
        let fg: Vec<bool> = target.data().iter().map(|&g| usize::from(g) == c).collect();
        let err: Vec<f64> = (0..pixels)
            .map(|i| {
                let f = if fg[i] { 1.0 } else { 0.0 };
                (f - p.data()[index(c, i)]).abs()
            })
            .collect();
        let mut order: Vec<usize> = (0..pixels).collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]));
        let fg_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
        let steps = jaccard_steps(&fg_sorted);
        for (rank, &i) in order.iter().enumerate() {
            loss += err[i] * steps[rank] / k;
            let sign = if fg[i] { -1.0 } else { 1.0 };
            grad.data_mut()[index(c, i)] = sign * steps[rank] / k;
        }
    }
    probs.tape().scalar_fn(probs, loss, grad)
}

/// Inverse-log-frequency weights `1 / ln(1.02 + p_k)`; classes that never
/// occur receive the largest weight among those that do.
pub fn class_weights_from_freq(maps: &[&LabelMap], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for m in maps {
        m.check_classes(num_classes)?;
        for &v in m.data() {
            counts[usize::from(v)] += 1;
        }
        total += m.len() as u64;
    }
    if total == 0 {
        return Err(Error::invalid("class weights", "no labelled pixels"));
    }
    let mut weights: Vec<Option<f64>> = counts
        .iter()
        .map(|&n| (n > 0).then(|| 1.0 / (1.02 + n as f64 / total as f64).ln()))
        .collect();
    let max = weights.iter().flatten().cloned().fold(f64::MIN, f64::max);
    Ok(weights.iter_mut().map(|w| w.unwrap_or(max)).collect())
}

/// Semantic labels with their derived location and edge masks.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet {
    pub sem: LabelMap,
    pub loc: LabelMap,
    pub eg: LabelMap,
}

impl GroundTruthSet {
    pub fn from_semantic(sem: LabelMap, edge_radius: usize) -> Self {
        let loc = derive_gt_loc(&sem);
        let eg = derive_gt_eg(&sem, edge_radius);
        GroundTruthSet { sem, loc, eg }
    }
}

/// Individual terms of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub eg: f64,
    pub sem2: f64,
    pub sem_ce: f64,
    pub sem_lovasz: f64,
    pub total: f64,
}

/// `λ·L_loc + L_eg + L_sem2 + L_sem` with `L_sem = CE + Lovász`. Auxiliary
/// maps are resized bilinearly to the label resolution first.
pub fn total_loss<'t>(
    preds: &PredictionSet<'t>,
    gt: &GroundTruthSet,
    class_weights: &[f64],
    lambda_loc: f64,
) -> Result<(Var<'t>, LossBreakdown)> {
    let (h, w) = (gt.sem.height(), gt.sem.width());
    let loc = binary_weighted_ce(preds.loc.resize(h, w)?, &gt.loc)?;
    let eg = binary_weighted_ce(preds.edge.resize(h, w)?, &gt.eg)?;
    let sem2 = weighted_ce(preds.sem2.resize(h, w)?, &gt.sem, class_weights)?;
    let sem_ce = weighted_ce(preds.sem, &gt.sem, class_weights)?;
    let sem_lovasz = lovasz_softmax(preds.sem.softmax(Axis::Channel), &gt.sem)?;
    let total = loc
        .scale(lambda_loc)
        .add(eg)?
        .add(sem2)?
        .add(sem_ce.add(sem_lovasz)?)?;
    let item = |v: Var<'_>| v.value().data()[0];
    let breakdown = LossBreakdown {
        loc: item(loc),
        eg: item(eg),
        sem2: item(sem2),
        sem_ce: item(sem_ce),
        sem_lovasz: item(sem_lovasz),
        total: item(total),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss {breakdown:?}")));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{all_coordinates, grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(h: usize, w: usize, c: u8, r: &mut impl Rng) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|_| r.gen_range(0..c)).collect()).unwrap()
    }

    #[test]
    fn ce_examples() {
        let tape = Tape::new();
        let t = LabelMap::new(1, 1, vec![0]).unwrap();
        let uniform = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let v = weighted_ce(uniform, &t, &[1.0, 1.0]).unwrap().value().item().unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let sure = tape.leaf(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![800.0, 0.0]).unwrap());
        assert_eq!(weighted_ce(sure, &t, &[1.0, 1.0]).unwrap().value().item().unwrap(), 0.0);
        let bad = LabelMap::new(1, 1, vec![2]).unwrap();
        assert!(matches!(weighted_ce(uniform, &bad, &[1.0, 1.0]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn ce_matches_per_pixel_formula() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::random_uniform(Shape::new(1, 3, 2, 2), -2.0, 2.0, &mut r);
        let t = labels(2, 2, 3, &mut r);
        let w = [0.5, 2.0, 1.25];
        let tape = Tape::new();
        let got = weighted_ce(tape.leaf(z.clone()), &t, &w).unwrap().value().item().unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..2 {
            for x in 0..2 {
                let g = usize::from(t.get(0, y, x));
                let e: Vec<f64> = (0..3).map(|c| z.at(0, c, y, x).exp()).collect();
                num += w[g] * -(e[g] / e.iter().sum::<f64>()).ln();
                den += w[g];
            }
        }
        assert!((got - num / den).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::new();
        let t = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let zero = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        let v = binary_weighted_ce(zero, &t).unwrap().value().item().unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let sat = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-20.0, 20.0]).unwrap());
        assert!(binary_weighted_ce(sat, &t).unwrap().value().item().unwrap() < 1e-6);

        let mut r = ChaCha8Rng::seed_from_u64(2);
        let t = LabelMap::new(3, 3, vec![0, 1, 0, 0, 0, 0, 0, 1, 0]).unwrap();
        assert_eq!(positive_weight(&t), 3.5);
        let z = Tensor::random_uniform(Shape::new(1, 1, 3, 3), -3.0, 3.0, &mut r);
        let got = binary_weighted_ce(tape.leaf(z.clone()), &t).unwrap().value().item().unwrap();
        let want: f64 = z
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                if y == 1 {
                    -3.5 * p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 9.0;
        assert!((got - want).abs() < 1e-12);
    }

    /// Lovász extension as `∫₀^∞ Δ({i : m_i ≥ t}) dt` with
    /// `Δ(M) = |M| / |fg ∪ M|`, summed piecewise over the distinct error levels.
    fn lovasz_oracle(p: &Tensor, t: &LabelMap) -> f64 {
        let s = p.shape();
        let pixels: Vec<(usize, usize, usize)> = (0..s.n)
            .flat_map(|n| (0..s.h).flat_map(move |y| (0..s.w).map(move |x| (n, y, x))))
            .collect();
        let mut total = 0.0;
        let mut present = 0;
        for c in 0..s.c {
            let fg: Vec<bool> = pixels.iter().map(|&(n, y, x)| usize::from(t.get(n, y, x)) == c).collect();
            if !fg.contains(&true) {
                continue;
            }
            present += 1;
            let m: Vec<f64> = pixels
                .iter()
                .zip(&fg)
                .map(|(&(n, y, x), &f)| ((f as u8 as f64) - p.at(n, c, y, x)).abs())
                .collect();
            let mut levels = m.clone();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            let mut prev = 0.0;
            for &level in &levels {
                let set: Vec<usize> = (0..m.len()).filter(|&i| m[i] >= level).collect();
                let union = (0..m.len()).filter(|&i| fg[i] || set.contains(&i)).count();
                total += (level - prev) * set.len() as f64 / union as f64;
                prev = level;
            }
        }
        total / present as f64
    }

    #[test]
    fn lovasz_examples() {
        let tape = Tape::new();
        let t = LabelMap::new(1, 1, vec![0]).unwrap();
        let half = tape.leaf(Tensor::full(Shape::new(1, 2, 1, 1), 0.5));
        assert!((lovasz_softmax(half, &t).unwrap().value().item().unwrap() - 0.5).abs() < 1e-15);
        let t = LabelMap::new(1, 3, vec![0, 2, 1]).unwrap();
        let mut onehot = Tensor::zeros(Shape::new(1, 3, 1, 3));
        for x in 0..3 {
            onehot.set(0, usize::from(t.get(0, 0, x)), 0, x, 1.0);
        }
        assert_eq!(lovasz_softmax(tape.leaf(onehot), &t).unwrap().value().item().unwrap(), 0.0);
    }

    #[test]
    fn lovasz_matches_extension_integral() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = r.gen_range(2..=3);
            let z = Tensor::random_uniform(Shape::new(1, c, 2, 3), -3.0, 3.0, &mut r);
            let p = crate::tensor::softmax_axis(&z, Axis::Channel);
            let t = labels(2, 3, c as u8, &mut r);
            let tape = Tape::new();
            let got = lovasz_softmax(tape.leaf(p.clone()), &t).unwrap().value().item().unwrap();
            assert!((got - lovasz_oracle(&p, &t)).abs() < 1e-10);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::random_uniform(Shape::new(1, 3, 2, 3), -2.0, 2.0, &mut r);
        let t = labels(2, 3, 3, &mut r);
        let b = LabelMap::new(2, 3, vec![1, 0, 0, 1, 1, 0]).unwrap();
        let zb = Tensor::random_uniform(Shape::new(1, 1, 2, 3), -2.0, 2.0, &mut r);
        let params = [z, zb];
        let coords = all_coordinates(&params);
        let w = [0.7, 1.3, 2.0];
        let report = grad_check(&params, &coords, 1e-4, |_, v| {
            let ce = weighted_ce(v[0], &t, &w)?;
            let lv = lovasz_softmax(v[0].softmax(Axis::Channel), &t)?;
            let bce = binary_weighted_ce(v[1], &b)?;
            ce.add(lv)?.add(bce)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn class_weight_formula() {
        let m = LabelMap::new(1, 4, vec![0, 1, 0, 1]).unwrap();
        let w = class_weights_from_freq(&[&m], 3).unwrap();
        assert!((w[0] - 1.0 / 1.52f64.ln()).abs() < 1e-12);
        assert!((w[0] - 2.388).abs() < 1e-3);
        assert_eq!(w[0], w[1]);
        assert_eq!(w[2], w[0]);
        let all = LabelMap::filled(2, 2, 0);
        assert!((class_weights_from_freq(&[&all], 2).unwrap()[0] - 1.422).abs() < 1e-3);
        let skew = LabelMap::new(1, 4, vec![0, 0, 0, 1]).unwrap();
        let w = class_weights_from_freq(&[&skew], 2).unwrap();
        assert!(w[1] > w[0]);
        assert!(class_weights_from_freq(&[], 2).is_err());
    }
}
