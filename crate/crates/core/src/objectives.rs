//! Loss functions with closed-form gradients.
//!
//! Each loss comes as a value function and a `*_with_grad` twin returning the
//! gradient with respect to the model output it consumes. The training loop
//! injects those gradients into the tape, so anything excluded by an
//! availability mask receives an exact zero.

use crate::anatomy::{LabelAvailability, LandmarkSet, StructureLayout};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::Scalar;

/// Soft Dice smoothing constant.
pub const DICE_EPS: f64 = 1e-6;
/// Probability clamp for binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm<T> {
    pub name: String,
    pub value: T,
    pub weight: T,
}

/// Weighted sum of named components; `total == sum(weight * value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub total: T,
    pub terms: Vec<LossTerm<T>>,
}

impl<T: Scalar> LossValue<T> {
    pub fn from_terms(terms: Vec<LossTerm<T>>) -> Self {
        let total = terms.iter().map(|t| t.weight * t.value).sum();
        Self { total, terms }
    }

    pub fn single(name: &str, value: T) -> Self {
        Self::from_terms(vec![LossTerm { name: name.into(), value, weight: T::one() }])
    }

    pub fn component(&self, name: &str) -> Option<T> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// Adds another value term-by-term (matching names merge).
    pub fn accumulate(&mut self, other: &LossValue<T>) {
        for t in &other.terms {
            match self.terms.iter_mut().find(|s| s.name == t.name) {
                Some(s) => s.value += t.value,
                None => self.terms.push(t.clone()),
            }
        }
        self.total = self.terms.iter().map(|t| t.weight * t.value).sum();
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self::from_terms(
            self.terms.iter().map(|t| LossTerm { name: t.name.clone(), value: t.value * factor, weight: t.weight }).collect(),
        )
    }
}

/// Mean squared error over included rows of flat `[x0, y0, x1, y1, ..]`
/// buffers. Excluded rows of `target` are never read.
pub(crate) fn masked_mse_raw<T: Scalar>(pred: &[T], target: &[T], mask: &[bool]) -> Result<(T, Vec<T>)> {
    if pred.len() != 2 * mask.len() || target.len() != pred.len() {
        return Err(Error::Shape(format!(
            "masked mse: pred {} / target {} values for {} nodes",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let included = mask.iter().filter(|&&m| m).count();
    if included == 0 {
        return Err(Error::InvalidInput("masked mse: mask selects no nodes".into()));
    }
    let n = T::from_usize(2 * included).unwrap();
    let two = T::lit(2.0);
    let mut sum = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..2 {
            let d = pred[2 * i + c] - target[2 * i + c];
            sum += d * d;
            grad[2 * i + c] = two * d / n;
        }
    }
    Ok((sum / n, grad))
}

fn check_same_layout<T: Scalar>(pred: &LandmarkSet<T>, target: &LandmarkSet<T>, mask: &[bool]) -> Result<()> {
    if pred.layout() != target.layout() || mask.len() != pred.coords().len() {
        return Err(Error::Shape(format!(
            "prediction ({} rows), target ({} rows) and mask ({}) disagree",
            pred.coords().len(),
            target.coords().len(),
            mask.len()
        )));
    }
    Ok(())
}

/// Mean of squared coordinate errors over the `2 * |mask|` included entries.
pub fn masked_landmark_mse<T: Scalar>(
    pred: &LandmarkSet<T>,
    target: &LandmarkSet<T>,
    mask: &[bool],
) -> Result<LossValue<T>> {
    masked_landmark_mse_with_grad(pred, target, mask).map(|(v, _)| v)
}

/// Loss plus gradient with respect to the flat prediction buffer.
pub fn masked_landmark_mse_with_grad<T: Scalar>(
    pred: &LandmarkSet<T>,
    target: &LandmarkSet<T>,
    mask: &[bool],
) -> Result<(LossValue<T>, Vec<T>)> {
    check_same_layout(pred, target, mask)?;
    let (v, g) = masked_mse_raw(&pred.flat(), &target.flat(), mask)?;
    Ok((LossValue::single("mse", v), g))
}

pub(crate) fn soft_dice_raw<T: Scalar>(prob: &[T], target: &[bool]) -> (T, Vec<T>) {
    let eps = T::lit(DICE_EPS);
    let mut s = T::zero();
    let mut g = T::zero();
    let mut inter = T::zero();
    for (&p, &t) in prob.iter().zip(target) {
        s += p;
        if t {
            g += T::one();
            inter += p;
        }
    }
    if s + g < eps {
        // Empty prediction and empty target: perfect agreement.
        return (T::zero(), vec![T::zero(); prob.len()]);
    }
    let denom = s + g + eps;
    let two = T::lit(2.0);
    let loss = T::one() - two * inter / denom;
    let d2 = denom * denom;
    let grad = target
        .iter()
        .map(|&t| {
            let gt = if t { T::one() } else { T::zero() };
            -two * (gt * denom - inter) / d2
        })
        .collect();
    (loss, grad)
}

fn check_probabilities<T: Scalar>(prob: &[T]) -> Result<()> {
    if let Some(p) = prob.iter().find(|&&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// `1 - 2 sum(p g) / (sum(p) + sum(g) + eps)`; zero when both maps are empty.
pub fn soft_dice_binary<T: Scalar>(prob: &Grid<T>, target: &BinaryMask) -> Result<T> {
    soft_dice_binary_with_grad(prob, target).map(|(v, _)| v)
}

pub fn soft_dice_binary_with_grad<T: Scalar>(prob: &Grid<T>, target: &BinaryMask) -> Result<(T, Vec<T>)> {
    prob.check_dims(target, "soft dice")?;
    check_probabilities(prob.data())?;
    Ok(soft_dice_raw(prob.data(), target.data()))
}

pub(crate) fn bce_raw<T: Scalar>(prob: &[T], target: &[bool]) -> (T, Vec<T>) {
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    let n = T::from_usize(prob.len().max(1)).unwrap();
    let mut sum = T::zero();
    let grad = prob
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let clamped = p < lo || p > hi;
            let q = p.max(lo).min(hi);
            if t {
                sum -= q.ln();
                if clamped {
                    T::zero()
                } else {
                    -T::one() / (q * n)
                }
            } else {
                sum -= (T::one() - q).ln();
                if clamped {
                    T::zero()
                } else {
                    T::one() / ((T::one() - q) * n)
                }
            }
        })
        .collect();
    (sum / n, grad)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn binary_cross_entropy<T: Scalar>(prob: &Grid<T>, target: &BinaryMask) -> Result<T> {
    prob.check_dims(target, "bce")?;
    check_probabilities(prob.data())?;
    Ok(bce_raw(prob.data(), target.data()).0)
}

/// Per-structure BCE + soft Dice summed over available structures.
///
/// `probs[k]` and `targets[k]` follow the layout's structure order. Targets of
/// unavailable structures may be `None` and are never read.
pub fn het_pixel_loss<T: Scalar>(
    layout: &StructureLayout,
    probs: &[Grid<T>],
    targets: &[Option<BinaryMask>],
    avail: LabelAvailability,
) -> Result<LossValue<T>> {
    het_pixel_loss_with_grad(layout, probs, targets, avail).map(|(v, _)| v)
}

/// Also returns `d loss / d probs[k]`, all-zero for excluded structures.
pub fn het_pixel_loss_with_grad<T: Scalar>(
    layout: &StructureLayout,
    probs: &[Grid<T>],
    targets: &[Option<BinaryMask>],
    avail: LabelAvailability,
) -> Result<(LossValue<T>, Vec<Vec<T>>)> {
    let k = layout.num_structures();
    if probs.len() != k || targets.len() != k {
        return Err(Error::Shape(format!(
            "expected {k} probability maps and targets, got {} and {}",
            probs.len(),
            targets.len()
        )));
    }
    for s in avail.iter() {
        if layout.block(s).is_none() {
            return Err(Error::StructureNotInLayout(s));
        }
    }
    let mut bce_total = T::zero();
    let mut dice_total = T::zero();
    let mut grads = Vec::with_capacity(k);
    for (idx, s) in layout.structures().enumerate() {
        let prob = &probs[idx];
        if !avail.contains(s) {
            grads.push(vec![T::zero(); prob.data().len()]);
            continue;
        }
        let target = targets[idx]
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("missing target map for available structure {s}")))?;
        prob.check_dims(target, "het pixel loss")?;
        check_probabilities(prob.data())?;
        let (b, gb) = bce_raw(prob.data(), target.data());
        let (d, gd) = soft_dice_raw(prob.data(), target.data());
        bce_total += b;
        dice_total += d;
        grads.push(gb.iter().zip(&gd).map(|(&x, &y)| x + y).collect());
    }
    let value = LossValue::from_terms(vec![
        LossTerm { name: "bce".into(), value: bce_total, weight: T::one() },
        LossTerm { name: "dice".into(), value: dice_total, weight: T::one() },
    ]);
    Ok((value, grads))
}

/// Channel-wise softmax over `K` maps of equal size.
pub fn softmax_maps<T: Scalar>(logits: &[Grid<T>]) -> Vec<Vec<T>> {
    let n = logits[0].data().len();
    let k = logits.len();
    let mut out = vec![vec![T::zero(); n]; k];
    for px in 0..n {
        let m = logits.iter().map(|l| l.data()[px]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for c in 0..k {
            let e = (logits[c].data()[px] - m).exp();
            out[c][px] = e;
            z += e;
        }
        for o in out.iter_mut() {
            o[px] /= z;
        }
    }
    out
}

/// Cross-entropy plus the mean soft Dice loss of the foreground classes.
/// `logits[0]` is background; `target` holds labels in `[0, K)`.
pub fn multiclass_loss<T: Scalar>(logits: &[Grid<T>], target: &Grid<u8>) -> Result<LossValue<T>> {
    multiclass_loss_with_grad(logits, target).map(|(v, _)| v)
}

pub fn multiclass_loss_with_grad<T: Scalar>(logits: &[Grid<T>], target: &Grid<u8>) -> Result<(LossValue<T>, Vec<Vec<T>>)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::InvalidInput("multiclass loss needs at least two classes".into()));
    }
    for l in logits {
        l.check_dims(target, "multiclass loss")?;
    }
    if let Some(&bad) = target.data().iter().find(|&&y| y as usize >= k) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {k} classes")));
    }
    let n = target.data().len();
    let nf = T::from_usize(n).unwrap();
    let probs = softmax_maps(logits);
    let tiny = T::min_positive_value();
    let mut ce = T::zero();
    // d loss / d softmax, per class.
    let mut dprob = vec![vec![T::zero(); n]; k];
    let mut grad = vec![vec![T::zero(); n]; k];
    for (px, &y) in target.data().iter().enumerate() {
        ce -= probs[y as usize][px].max(tiny).ln();
        for (c, g) in grad.iter_mut().enumerate() {
            let onehot = if c == y as usize { T::one() } else { T::zero() };
            g[px] = (probs[c][px] - onehot) / nf;
        }
    }
    ce /= nf;
    let fg = T::from_usize(k - 1).unwrap();
    let mut dice = T::zero();
    for c in 1..k {
        let mask: Vec<bool> = target.data().iter().map(|&y| y as usize == c).collect();
        let (d, g) = soft_dice_raw(&probs[c], &mask);
        dice += d / fg;
        for (dp, gv) in dprob[c].iter_mut().zip(g) {
            *dp = gv / fg;
        }
    }
    // Chain the Dice term through the softmax Jacobian.
    for px in 0..n {
        let dot: T = (0..k).map(|c| probs[c][px] * dprob[c][px]).sum();
        for c in 0..k {
            grad[c][px] += probs[c][px] * (dprob[c][px] - dot);
        }
    }
    let value = LossValue::from_terms(vec![
        LossTerm { name: "ce".into(), value: ce, weight: T::one() },
        LossTerm { name: "dice".into(), value: dice, weight: T::one() },
    ]);
    Ok((value, grad))
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal.
pub fn kl_latent<T: Scalar>(mu: &[T], logvar: &[T]) -> Result<T> {
    kl_latent_with_grad(mu, logvar).map(|(v, _, _)| v)
}

/// Returns the divergence and its gradients for `mu` and `logvar`.
pub fn kl_latent_with_grad<T: Scalar>(mu: &[T], logvar: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape(format!("mu has {} dims, logvar {}", mu.len(), logvar.len())));
    }
    if mu.iter().chain(logvar).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite latent statistics".into()));
    }
    let half = T::lit(0.5);
    let mut kl = T::zero();
    let mut gl = Vec::with_capacity(logvar.len());
    for (&m, &lv) in mu.iter().zip(logvar) {
        let e = lv.exp();
        kl += -half * (T::one() + lv - m * m - e);
        gl.push(half * (e - T::one()));
    }
    Ok((kl, mu.to_vec(), gl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{build_layout, Structure};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn set(layout: &Arc<StructureLayout>, rows: &[[f64; 2]]) -> LandmarkSet<f64> {
        LandmarkSet::new(Arc::clone(layout), rows.to_vec()).unwrap()
    }

    #[test]
    fn masked_mse_examples() {
        let layout = Arc::new(build_layout(&[("L", 3)]).unwrap());
        let zero = set(&layout, &[[0.0, 0.0]; 3]);
        let same = masked_landmark_mse(&zero, &zero, &[true; 3]).unwrap();
        assert_eq!(same.total, 0.0);

        let off = set(&layout, &[[0.0, 0.0], [0.0, 0.0], [5.0, -2.0]]);
        assert_eq!(masked_landmark_mse(&off, &zero, &[true, true, false]).unwrap().total, 0.0);

        let pred = set(&layout, &[[0.0, 0.0], [1.0, 1.0], [9.0, 9.0]]);
        let (v, g) = masked_landmark_mse_with_grad(&pred, &zero, &[true, true, false]).unwrap();
        assert_eq!(v.total, 0.5);
        assert_eq!(&g[4..], &[0.0, 0.0]);
    }

    #[test]
    fn masked_mse_errors() {
        let layout = Arc::new(build_layout(&[("L", 2)]).unwrap());
        let a = set(&layout, &[[0.0, 0.0]; 2]);
        assert!(masked_landmark_mse(&a, &a, &[false, false]).is_err());
        assert!(masked_landmark_mse(&a, &a, &[true]).is_err());
    }

    #[test]
    fn full_mask_equals_plain_mse() {
        let layout = Arc::new(build_layout(&[("L", 3), ("H", 2)]).unwrap());
        let p = set(&layout, &[[0.1, 0.2], [0.3, 0.5], [0.9, 0.1], [0.4, 0.4], [0.2, 0.8]]);
        let t = set(&layout, &[[0.0, 0.2], [0.2, 0.1], [0.5, 0.5], [0.4, 0.1], [0.3, 0.3]]);
        let plain: f64 = p.flat().iter().zip(t.flat()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 10.0;
        assert_eq!(masked_landmark_mse(&p, &t, &[true; 5]).unwrap().total, plain);
    }

    fn grid(h: usize, w: usize, v: Vec<f64>) -> Grid<f64> {
        Grid::from_vec(h, w, v).unwrap()
    }

    fn mask(h: usize, w: usize, v: &[u8]) -> BinaryMask {
        Grid::from_vec(h, w, v.iter().map(|&x| x != 0).collect()).unwrap()
    }

    #[test]
    fn soft_dice_examples() {
        let t = mask(2, 2, &[1, 0, 1, 0]);
        let perfect = soft_dice_binary(&grid(2, 2, vec![1.0, 0.0, 1.0, 0.0]), &t).unwrap();
        assert!(perfect < 1e-6);
        let none = soft_dice_binary(&grid(2, 2, vec![0.0; 4]), &t).unwrap();
        assert!((none - 1.0).abs() < 1e-12);
        let half = soft_dice_binary(&grid(2, 2, vec![0.5; 4]), &t).unwrap();
        assert_abs_diff_eq!(half, 1.0 - 2.0 / (4.0 + DICE_EPS), epsilon = 1e-15);
        let empty = soft_dice_binary(&grid(2, 2, vec![0.0; 4]), &mask(2, 2, &[0; 4])).unwrap();
        assert_eq!(empty, 0.0);
        assert!(soft_dice_binary(&grid(2, 2, vec![1.5, 0.0, 0.0, 0.0]), &t).is_err());
        assert!(soft_dice_binary(&grid(1, 4, vec![0.5; 4]), &t).is_err());
    }

    #[test]
    fn het_pixel_loss_examples() {
        let layout = build_layout(&[("L", 3), ("H", 3), ("C", 3)]).unwrap();
        let t = mask(2, 2, &[1, 1, 0, 0]);
        let junk = grid(2, 2, vec![0.9, 0.1, 0.3, 0.7]);
        let lungs = LabelAvailability::new(&[Structure::Lungs]);

        let exact = vec![grid(2, 2, vec![1.0, 1.0, 0.0, 0.0]), junk.clone(), junk.clone()];
        let v = het_pixel_loss(&layout, &exact, &[Some(t.clone()), None, None], lungs).unwrap();
        assert!(v.total < 1e-5, "{v:?}");

        let uniform = vec![grid(2, 2, vec![0.5; 4]), junk.clone(), junk.clone()];
        let v = het_pixel_loss(&layout, &uniform, &[Some(t.clone()), None, None], lungs).unwrap();
        assert_abs_diff_eq!(v.component("bce").unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(v.total, std::f64::consts::LN_2 + 0.5, epsilon = 1e-6);
        assert!((v.total - 1.1931).abs() < 1e-4);

        let lh = LabelAvailability::new(&[Structure::Lungs, Structure::Heart]);
        let h = mask(2, 2, &[0, 1, 0, 1]);
        let both = het_pixel_loss(&layout, &uniform, &[Some(t.clone()), Some(h.clone()), None], lh).unwrap();
        let only_h = het_pixel_loss(
            &layout,
            &uniform,
            &[None, Some(h), None],
            LabelAvailability::new(&[Structure::Heart]),
        )
        .unwrap();
        assert_abs_diff_eq!(both.total, v.total + only_h.total, epsilon = 1e-12);

        assert!(het_pixel_loss(&layout, &uniform, &[None, None, None], lungs).is_err());
    }

    #[test]
    fn multiclass_examples() {
        let target = Grid::from_vec(2, 2, vec![0u8, 1, 1, 0]).unwrap();
        let sat: Vec<Grid<f64>> = (0..2u8)
            .map(|c| target.map(|&y| if y == c { 60.0 } else { -60.0 }))
            .collect();
        assert!(multiclass_loss(&sat, &target).unwrap().total < 1e-6);

        let uniform = vec![grid(2, 2, vec![0.0; 4]), grid(2, 2, vec![0.0; 4])];
        let v = multiclass_loss(&uniform, &target).unwrap();
        assert_abs_diff_eq!(v.component("ce").unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);

        let background = Grid::from_vec(2, 2, vec![0u8; 4]).unwrap();
        let confident: Vec<Grid<f64>> = vec![grid(2, 2, vec![60.0; 4]), grid(2, 2, vec![-60.0; 4])];
        let v = multiclass_loss(&confident, &background).unwrap();
        assert_eq!(v.component("dice").unwrap(), 0.0);

        let bad = Grid::from_vec(2, 2, vec![0u8, 2, 0, 0]).unwrap();
        assert!(multiclass_loss(&uniform, &bad).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_latent(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_latent(&[1.0], &[0.0]).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(kl_latent(&[0.0], &[1.0]).unwrap(), -0.5 * (2.0 - std::f64::consts::E), epsilon = 1e-15);
        assert!((kl_latent::<f64>(&[0.0], &[1.0]).unwrap() - 0.3591).abs() < 1e-4);
        assert!(kl_latent(&[f64::NAN], &[0.0]).is_err());
        assert!(kl_latent(&[0.0, 1.0], &[0.0]).is_err());
    }

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut p = x.to_vec();
        p[i] += h;
        let mut m = x.to_vec();
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    #[test]
    fn multiclass_gradient_matches_finite_differences() {
        let target = Grid::from_vec(3, 3, vec![0u8, 1, 2, 2, 1, 0, 0, 0, 1]).unwrap();
        let flat: Vec<f64> = (0..27).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        let to_maps = |v: &[f64]| -> Vec<Grid<f64>> { v.chunks(9).map(|c| grid(3, 3, c.to_vec())).collect() };
        let (_, g) = multiclass_loss_with_grad(&to_maps(&flat), &target).unwrap();
        let g: Vec<f64> = g.concat();
        for i in 0..27 {
            let num = fd(|v| multiclass_loss(&to_maps(v), &target).unwrap().total, &flat, i);
            assert!((num - g[i]).abs() < 1e-7, "index {i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mu = [0.3, -1.2, 0.0];
        let lv = [0.1, -0.5, 0.7];
        let (_, gm, gl) = kl_latent_with_grad(&mu, &lv).unwrap();
        for i in 0..3 {
            assert!((fd(|m| kl_latent(m, &lv).unwrap(), &mu, i) - gm[i]).abs() < 1e-7);
            assert!((fd(|l| kl_latent(&mu, l).unwrap(), &lv, i) - gl[i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn soft_dice_in_unit_interval(p in proptest::collection::vec(0.0f64..=1.0, 9),
                                      t in proptest::collection::vec(any::<bool>(), 9)) {
            let d = soft_dice_raw(&p, &t).0;
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn soft_dice_symmetric_on_binary_inputs(a in proptest::collection::vec(any::<bool>(), 12),
                                                b in proptest::collection::vec(any::<bool>(), 12)) {
            let pa: Vec<f64> = a.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            let pb: Vec<f64> = b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            prop_assert!((soft_dice_raw(&pa, &b).0 - soft_dice_raw(&pb, &a).0).abs() < 1e-12);
        }

        #[test]
        fn masked_mse_full_availability_reduces_to_mse(v in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let (pred, target) = v.split_at(6);
            let (m, _) = masked_mse_raw(pred, target, &[true; 3]).unwrap();
            let plain = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 6.0;
            prop_assert_eq!(m, plain);
        }
    }
}
