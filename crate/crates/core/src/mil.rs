//! Multi-instance heads: a logistic regression shared over feature-map
//! positions gives one probability per patch, a bag is scored by its most
//! probable patch, and bags are fitted with (class-weighted) cross-entropy.
//! The multi-label variant runs one such problem per label.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before `log`.
pub const PROB_CLAMP: f64 = 1e-12;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression over channels, shared across positions: one row of
/// weights per label.
#[derive(Clone, Debug, PartialEq)]
pub struct MilHead {
    /// `[C_labels, C_feat]`
    pub weight: Tensor,
    /// `[C_labels]`
    pub bias: Tensor,
}

impl MilHead {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 {
            return Err(shape_err!(
                "head weight must be [labels, features], got {s:?}"
            ));
        }
        if bias.shape() != [s[0]] {
            return Err(shape_err!(
                "head bias must be [{}], got {:?}",
                s[0],
                bias.shape()
            ));
        }
        Ok(Self { weight, bias })
    }

    /// Single-label head from a weight vector and scalar bias.
    pub fn binary(weight: &[f64], bias: f64) -> Result<Self> {
        Self::new(
            Tensor::from_vec(&[1, weight.len()], weight.to_vec())?,
            Tensor::from_vec(&[1], vec![bias])?,
        )
    }

    pub fn labels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Per-patch probabilities `[C_labels, K]`, patches flattened row-major from
/// a `rows x cols` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProbabilities {
    p: Tensor,
    grid: (usize, usize),
}

impl PatchProbabilities {
    pub fn new(p: Tensor, grid: (usize, usize)) -> Result<Self> {
        let p = match p.rank() {
            1 => {
                let k = p.len();
                p.reshape(&[1, k])?
            }
            2 => p,
            _ => return Err(shape_err!("patch probabilities must be [K] or [C,K]")),
        };
        if p.shape()[1] != grid.0 * grid.1 {
            return Err(shape_err!(
                "{} patches do not fill a {}x{} grid",
                p.shape()[1],
                grid.0,
                grid.1
            ));
        }
        Ok(Self { p, grid })
    }

    /// Single-label bag from a flat list of patch probabilities laid out in one row.
    pub fn from_slice(p: &[f64]) -> Result<Self> {
        if p.is_empty() {
            return Err(arg_err!("a bag needs at least one patch"));
        }
        Self::new(Tensor::from_vec(&[1, p.len()], p.to_vec())?, (1, p.len()))
    }

    pub fn labels(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.p.shape()[1]
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn tensor(&self) -> &Tensor {
        &self.p
    }

    pub fn class(&self, c: usize) -> &[f64] {
        self.p.slice_data(c)
    }

    /// `max_k p[c, k]` and its lowest-index argmax.
    pub fn max_patch(&self, c: usize) -> (usize, f64) {
        argmax(self.class(c))
    }

    /// Patch grid of label `c` as a `[rows, cols]` tensor.
    pub fn heatmap(&self, c: usize) -> Tensor {
        Tensor::from_vec(&[self.grid.0, self.grid.1], self.class(c).to_vec())
            .expect("grid validated at construction")
    }
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Image id plus one binary label per class (length 1 for the single-label task).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledBag {
    pub id: u64,
    pub labels: Vec<u8>,
}

impl LabeledBag {
    pub fn new(id: u64, labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() || labels.iter().any(|&y| y > 1) {
            return Err(arg_err!(
                "labels must be a nonempty 0/1 vector, got {labels:?}"
            ));
        }
        Ok(Self { id, labels })
    }
}

/// `p[c, k] = sigmoid(w[c] . F[:, k] + b[c])` over `features [C_feat, R, Cc]`.
pub fn patch_probs(features: &Tensor, head: &MilHead) -> Result<PatchProbabilities> {
    let (cf, rows, cols) = feature_dims(features, head)?;
    let k = rows * cols;
    let f = features.data();
    let w = head.weight.data();
    let mut p = Vec::with_capacity(head.labels() * k);
    for c in 0..head.labels() {
        let wc = &w[c * cf..(c + 1) * cf];
        let b = head.bias.data()[c];
        for pos in 0..k {
            let z: f64 = (0..cf).map(|ch| wc[ch] * f[ch * k + pos]).sum::<f64>() + b;
            p.push(sigmoid(z));
        }
    }
    PatchProbabilities::new(Tensor::from_vec(&[head.labels(), k], p)?, (rows, cols))
}

fn feature_dims(features: &Tensor, head: &MilHead) -> Result<(usize, usize, usize)> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(shape_err!("features must be [C_feat, R, Cc], got {s:?}"));
    }
    if s[0] != head.features() {
        return Err(shape_err!(
            "features have {} channels, head expects {}",
            s[0],
            head.features()
        ));
    }
    Ok((s[0], s[1], s[2]))
}

pub struct HeadGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub features: Tensor,
}

/// Backpropagates `dL/dp` through the sigmoid and the shared logistic regression.
pub fn patch_probs_backward(
    grad_p: &Tensor,
    probs: &PatchProbabilities,
    features: &Tensor,
    head: &MilHead,
) -> Result<HeadGrads> {
    let (cf, _, _) = feature_dims(features, head)?;
    if grad_p.shape() != probs.tensor().shape() {
        return Err(shape_err!(
            "grad {:?} does not match probabilities {:?}",
            grad_p.shape(),
            probs.tensor().shape()
        ));
    }
    let k = probs.patches();
    let f = features.data();
    let w = head.weight.data();
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; head.labels()];
    let mut gf = vec![0.0; f.len()];
    for c in 0..head.labels() {
        let pc = probs.class(c);
        let gc = grad_p.slice_data(c);
        for pos in 0..k {
            if gc[pos] == 0.0 {
                continue;
            }
            let gz = gc[pos] * pc[pos] * (1.0 - pc[pos]);
            gb[c] += gz;
            for ch in 0..cf {
                gw[c * cf + ch] += gz * f[ch * k + pos];
                gf[ch * k + pos] += gz * w[c * cf + ch];
            }
        }
    }
    Ok(HeadGrads {
        weight: Tensor::from_vec(head.weight.shape(), gw)?,
        bias: Tensor::from_vec(head.bias.shape(), gb)?,
        features: Tensor::from_vec(features.shape(), gf)?,
    })
}

/// `p(y = 1 | I)`: the largest patch probability of the first label.
pub fn bag_prob(p: &PatchProbabilities) -> f64 {
    p.max_patch(0).1
}

/// Per-class loss weights `w(c) = N / #{n : y_n = c}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        negative: 1.0,
        positive: 1.0,
    };

    pub fn for_label(&self, y: u8) -> f64 {
        if y == 1 {
            self.positive
        } else {
            self.negative
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            negative: self.negative * k,
            positive: self.positive * k,
        }
    }
}

pub fn class_weights(labels: &[u8]) -> Result<ClassWeights> {
    let n = labels.len();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.iter().filter(|&&y| y == 0).count();
    if pos + neg != n {
        return Err(arg_err!("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(arg_err!(
            "class weights need both classes present ({pos} positive, {neg} negative)"
        ));
    }
    Ok(ClassWeights {
        negative: n as f64 / neg as f64,
        positive: n as f64 / pos as f64,
    })
}

/// One weight pair per label, from label vectors of equal length.
pub fn multilabel_class_weights(labels: &[Vec<u8>]) -> Result<Vec<ClassWeights>> {
    let c = labels
        .first()
        .ok_or_else(|| arg_err!("no label vectors"))?
        .len();
    if labels.iter().any(|l| l.len() != c) {
        return Err(arg_err!("label vectors differ in length"));
    }
    (0..c)
        .map(|ci| {
            let col: Vec<u8> = labels.iter().map(|l| l[ci]).collect();
            class_weights(&col).map_err(|e| arg_err!("label {ci}: {e}"))
        })
        .collect()
}

/// Loss value and `dL/dp` for every bag, shaped like its probabilities.
#[derive(Clone, Debug)]
pub struct BagLoss {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// `-w * log p(y | I)` for one (bag, label) with max pooling; returns the
/// term and writes its (sub)gradient into `grad` at the argmax patch.
fn mil_term(p: &[f64], y: u8, weight: f64, grad: &mut [f64]) -> f64 {
    let (k, pmax) = argmax(p);
    let q = if y == 1 { pmax } else { 1.0 - pmax };
    let clamped = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    // d(-log q)/dpmax; zero where the clamp is active
    if clamped == q {
        grad[k] = if y == 1 { -weight / q } else { weight / q };
    }
    -weight * clamped.ln()
}

fn check_bag(p: &PatchProbabilities, labels: usize) -> Result<()> {
    if p.labels() != labels {
        return Err(shape_err!(
            "bag has {} label rows but {} labels",
            p.labels(),
            labels
        ));
    }
    if p.tensor().data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patch probability".into()));
    }
    Ok(())
}

/// `L = -sum_n log p(y = y_n | I_n)`.
pub fn mil_loss(bags: &[(PatchProbabilities, u8)]) -> Result<BagLoss> {
    weighted_mil_loss(bags, &ClassWeights::UNIT)
}

/// `L = -sum_n w(y_n) log p(y = y_n | I_n)`.
pub fn weighted_mil_loss(
    bags: &[(PatchProbabilities, u8)],
    weights: &ClassWeights,
) -> Result<BagLoss> {
    if bags.is_empty() {
        return Err(arg_err!("loss over an empty set of bags"));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(bags.len());
    for (p, y) in bags {
        check_bag(p, 1)?;
        let mut g = vec![0.0; p.patches()];
        value += mil_term(p.class(0), *y, weights.for_label(*y), &mut g);
        grads.push(Tensor::from_vec(&[1, p.patches()], g)?);
    }
    Ok(BagLoss { value, grads })
}

/// Sum over bags and labels of independent max-pooled MIL terms, optionally
/// scaled by per-label class weights.
pub fn miml_loss(
    bags: &[(PatchProbabilities, Vec<u8>)],
    weights: Option<&[ClassWeights]>,
) -> Result<BagLoss> {
    if bags.is_empty() {
        return Err(arg_err!("loss over an empty set of bags"));
    }
    let c = bags[0].1.len();
    if let Some(w) = weights {
        if w.len() != c {
            return Err(shape_err!("{} weight pairs for {c} labels", w.len()));
        }
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(bags.len());
    for (p, y) in bags {
        if y.len() != c {
            return Err(shape_err!(
                "label vector of length {} (expected {c})",
                y.len()
            ));
        }
        check_bag(p, c)?;
        let k = p.patches();
        let mut g = vec![0.0; c * k];
        for ci in 0..c {
            let w = weights.map_or(1.0, |w| w[ci].for_label(y[ci]));
            value += mil_term(p.class(ci), y[ci], w, &mut g[ci * k..(ci + 1) * k]);
        }
        grads.push(Tensor::from_vec(&[c, k], g)?);
    }
    Ok(BagLoss { value, grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(p: &[f64]) -> PatchProbabilities {
        PatchProbabilities::from_slice(p).unwrap()
    }

    #[test]
    fn sigmoid_head_cases() {
        let f =
            Tensor::from_vec(&[2, 2, 2], vec![0.3, -1.0, 2.0, 0.0, 1.5, 0.2, -0.7, 4.0]).unwrap();
        let p = patch_probs(&f, &MilHead::binary(&[0.0, 0.0], 0.0).unwrap()).unwrap();
        assert!(p.class(0).iter().all(|&v| v == 0.5));
        let p = patch_probs(&f, &MilHead::binary(&[0.0, 0.0], 20.0).unwrap()).unwrap();
        assert!(p.class(0).iter().all(|&v| (1.0 - v).abs() < 1e-8));
        let single = Tensor::from_vec(&[2, 1, 1], vec![1.0, 2.0]).unwrap();
        let p = patch_probs(&single, &MilHead::binary(&[0.5, -0.25], 0.1).unwrap()).unwrap();
        assert!((p.class(0)[0] - 0.52498).abs() < 1e-5);
        assert!(patch_probs(&single, &MilHead::binary(&[1.0], 0.0).unwrap()).is_err());
    }

    #[test]
    fn bag_prob_is_max() {
        assert_eq!(bag_prob(&bag(&[0.1, 0.9, 0.3])), 0.9);
        assert_eq!(bag_prob(&bag(&[0.4])), 0.4);
        assert_eq!(bag_prob(&bag(&[0.3, 0.1, 0.9])), 0.9);
        assert!(PatchProbabilities::from_slice(&[]).is_err());
    }

    #[test]
    fn mil_loss_examples() {
        let l = mil_loss(&[(bag(&[0.2, 0.7]), 1)]).unwrap();
        assert!((l.value - 0.356674943938732).abs() < 1e-9);
        assert_eq!(l.grads[0].data()[0], 0.0);
        let l = mil_loss(&[(bag(&[0.2, 0.7]), 0)]).unwrap();
        assert!((l.value - 1.2039728043259361).abs() < 1e-9);
        let l = mil_loss(&[(bag(&[1.0 - 1e-12]), 1)]).unwrap();
        assert!(l.value.abs() < 1e-11);
        assert!(mil_loss(&[]).is_err());
    }

    #[test]
    fn saturated_probability_is_clamped() {
        let l = mil_loss(&[(bag(&[1.0]), 0)]).unwrap();
        assert!((l.value - (-(PROB_CLAMP).ln())).abs() < 1e-9);
        assert_eq!(l.grads[0].data()[0], 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let l = mil_loss(&[(bag(&[0.6, 0.6, 0.2]), 1)]).unwrap();
        assert!(l.grads[0].data()[0] != 0.0);
        assert_eq!(l.grads[0].data()[1], 0.0);
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&[1, 0, 0, 0, 0]).unwrap();
        assert_eq!((w.positive, w.negative), (5.0, 1.25));
        let w = class_weights(&[1, 1, 0, 0]).unwrap();
        assert_eq!((w.positive, w.negative), (2.0, 2.0));
        assert!(class_weights(&[0, 0, 0]).is_err());
        assert!(class_weights(&[1, 2]).is_err());
    }

    #[test]
    fn weighted_loss_examples() {
        let bags = vec![(bag(&[0.2, 0.7]), 1), (bag(&[0.1, 0.4]), 0)];
        let plain = mil_loss(&bags).unwrap();
        let unit = weighted_mil_loss(&bags, &ClassWeights::UNIT).unwrap();
        assert_eq!(plain.value.to_bits(), unit.value.to_bits());
        let w = ClassWeights {
            negative: 1.25,
            positive: 5.0,
        };
        let one = weighted_mil_loss(&bags[..1], &w).unwrap();
        assert!((one.value - 5.0 * 0.356674943938732).abs() < 1e-9);
        let l1 = weighted_mil_loss(&bags, &w).unwrap();
        let l2 = weighted_mil_loss(&bags, &w.scaled(2.0)).unwrap();
        assert!((l2.value - 2.0 * l1.value).abs() < 1e-12);
    }

    #[test]
    fn miml_examples() {
        let p = PatchProbabilities::new(
            Tensor::from_vec(&[2, 3], vec![0.1, 0.6, 0.3, 0.2, 0.05, 0.1]).unwrap(),
            (1, 3),
        )
        .unwrap();
        let l = miml_loss(&[(p, vec![1, 0])], None).unwrap();
        assert!((l.value - 0.7339691750802004).abs() < 1e-9);
        let nonzero = l.grads[0].data().iter().filter(|&&g| g != 0.0).count();
        assert_eq!(nonzero, 2);

        let quiet = PatchProbabilities::new(Tensor::full(&[3, 4], 1e-6).unwrap(), (2, 2)).unwrap();
        let l = miml_loss(&[(quiet, vec![0, 0, 0])], None).unwrap();
        assert!(l.value < 1e-5);
    }

    #[test]
    fn miml_single_label_reduces_to_mil() {
        let w = ClassWeights {
            negative: 1.5,
            positive: 3.0,
        };
        let bags = vec![(bag(&[0.2, 0.7, 0.5]), 1u8), (bag(&[0.3, 0.1, 0.2]), 0u8)];
        let single = weighted_mil_loss(&bags, &w).unwrap();
        let multi: Vec<_> = bags.iter().map(|(p, y)| (p.clone(), vec![*y])).collect();
        let m = miml_loss(&multi, Some(&[w])).unwrap();
        assert_eq!(single.value.to_bits(), m.value.to_bits());
        for (a, b) in single.grads.iter().zip(&m.grads) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let f = Tensor::from_vec(
            &[3, 2, 2],
            (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let head = MilHead::new(
            Tensor::from_vec(&[2, 3], vec![0.4, -0.3, 0.8, -0.5, 0.2, 0.1]).unwrap(),
            Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap(),
        )
        .unwrap();
        let g = Tensor::from_vec(&[2, 4], vec![0.3, -1.0, 0.5, 0.7, 0.2, 0.0, -0.4, 1.1]).unwrap();
        let loss = |f: &Tensor, h: &MilHead| patch_probs(f, h).unwrap().tensor().dot(&g).unwrap();
        let p = patch_probs(&f, &head).unwrap();
        let grads = patch_probs_backward(&g, &p, &f, &head).unwrap();
        let eps = 1e-6;
        for i in 0..f.len() {
            let mut a = f.clone();
            a.data_mut()[i] += eps;
            let mut b = f.clone();
            b.data_mut()[i] -= eps;
            let fd = (loss(&a, &head) - loss(&b, &head)) / (2.0 * eps);
            assert!((fd - grads.features.data()[i]).abs() < 1e-8);
        }
        for i in 0..head.weight.len() {
            let mut a = head.clone();
            a.weight.data_mut()[i] += eps;
            let mut b = head.clone();
            b.weight.data_mut()[i] -= eps;
            let fd = (loss(&f, &a) - loss(&f, &b)) / (2.0 * eps);
            assert!((fd - grads.weight.data()[i]).abs() < 1e-8);
        }
    }
}
