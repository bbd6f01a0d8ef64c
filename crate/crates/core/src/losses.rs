//! Training objectives as fused graph operations.
//!
//! Each loss computes its value and its gradient with respect to the single
//! input in one pass (in f64), and records a node whose backward rule scales
//! that gradient by the incoming adjoint. Label value [`INVALID`] is masked
//! everywhere.

use crate::autodiff::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::voxel::INVALID;

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
const LOG_FLOOR: f64 = 1e-30;

struct Fused<T> {
    name: &'static str,
    grad: Vec<T>,
}

impl<T: Scalar> Backward<T> for Fused<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let s = grad[0];
        vec![Some(self.grad.iter().map(|&d| d * s).collect())]
    }
}

fn record<T: Scalar>(g: &mut Graph<T>, name: &'static str, input: Var, value: f64, grad: Vec<f64>) -> Var {
    let grad = grad.into_iter().map(T::lit).collect();
    g.record(Tensor::scalar(T::lit(value)), vec![input], Box::new(Fused { name, grad }))
}

fn class_columns<T: Scalar>(g: &Graph<T>, op: &'static str, x: Var, labels: &[u8]) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() < 2 {
        return Err(Error::shape(op, format!("expected [C, N...], got {:?}", s)));
    }
    let c = s[0];
    let n: usize = s[1..].iter().product();
    if n != labels.len() {
        return Err(Error::shape(op, format!("{} labels for {} entries", labels.len(), n)));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l != INVALID && l as usize >= c) {
        return Err(Error::OutOfBounds {
            op,
            index: i,
            detail: format!("label {l} with {c} classes"),
        });
    }
    Ok((c, n))
}

/// Mean binary cross-entropy over entries with `mask[i]`, probabilities
/// clamped to `[eps, 1 - eps]`. An empty mask gives zero loss and gradient.
pub fn bce<T: Scalar>(g: &mut Graph<T>, probs: Var, targets: &[u8], mask: &[bool]) -> Result<Var> {
    let n = g.value(probs).numel();
    if targets.len() != n || mask.len() != n {
        return Err(Error::shape(
            "bce",
            format!("{} probabilities, {} targets, {} mask entries", n, targets.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![0.0; n];
    if count == 0 {
        log::warn!("bce: empty mask, loss is zero");
        return Ok(record(g, "bce", probs, 0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for (i, &p) in g.value(probs).data().iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let p = p.as_f64();
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let y = if targets[i] != 0 { 1.0 } else { 0.0 };
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
            grad[i] = -(y / pc - (1.0 - y) / (1.0 - pc)) * inv;
        }
    }
    Ok(record(g, "bce", probs, loss * inv, grad))
}

/// Mean negative log-softmax of the true class, over the leading class axis
/// of `[C, N...]` logits.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let (c, n) = class_columns(g, "cross_entropy", logits, labels)?;
    let valid = labels.iter().filter(|&&l| l != INVALID).count();
    let mut grad = vec![0.0; c * n];
    if valid == 0 {
        log::warn!("cross_entropy: no valid labels, loss is zero");
        return Ok(record(g, "cross_entropy", logits, 0.0, grad));
    }
    let inv = 1.0 / valid as f64;
    let x = g.value(logits).data();
    let mut loss = 0.0;
    let mut col = vec![0.0; c];
    for i in 0..n {
        let l = labels[i];
        if l == INVALID {
            continue;
        }
        for k in 0..c {
            col[k] = x[k * n + i].as_f64();
        }
        let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = col.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - col[l as usize];
        for k in 0..c {
            let p = (col[k] - lse).exp();
            grad[k * n + i] = (p - if k == l as usize { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok(record(g, "cross_entropy", logits, loss * inv, grad))
}

/// Gradient of the Jaccard loss extension along a ground-truth sequence
/// sorted by decreasing error.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let total = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&f| {
            if f {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jac = 1.0 - (total - cum_fg) / (total + cum_bg);
            let d = jac - prev;
            prev = jac;
            d
        })
        .collect()
}

/// Lovász-softmax over `[C, N...]` probabilities, averaged over the classes
/// present in the valid labels.
pub fn lovasz_softmax<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let (c, n) = class_columns(g, "lovasz_softmax", probs, labels)?;
    let p = g.value(probs).data();
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != INVALID).collect();
    let mut grad = vec![0.0; c * n];
    let mut loss = 0.0;
    let mut present = 0usize;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(valid.len());
    for k in 0..c {
        if !valid.iter().any(|&i| labels[i] as usize == k) {
            continue;
        }
        present += 1;
        order.clear();
        for &i in &valid {
            let fg = labels[i] as usize == k;
            let pk = p[k * n + i].as_f64();
            order.push((if fg { 1.0 - pk } else { pk }, i));
        }
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let fg_sorted: Vec<bool> = order.iter().map(|&(_, i)| labels[i] as usize == k).collect();
        let lg = lovasz_grad(&fg_sorted);
        for ((&(e, i), &d), &fg) in order.iter().zip(&lg).zip(&fg_sorted) {
            loss += e * d;
            grad[k * n + i] = if fg { -d } else { d };
        }
    }
    if present == 0 {
        log::warn!("lovasz_softmax: no valid labels, loss is zero");
        return Ok(record(g, "lovasz_softmax", probs, 0.0, grad));
    }
    let inv = 1.0 / present as f64;
    grad.iter_mut().for_each(|d| *d *= inv);
    Ok(record(g, "lovasz_softmax", probs, loss * inv, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalMode {
    /// One term per class over the class distribution.
    Sem,
    /// A single occupied-vs-empty term with `p_occ = 1 - p[0]`.
    Geo,
}

/// Scene-class affinity loss over `[C, N...]` probabilities.
pub fn scal<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[u8], mode: ScalMode) -> Result<Var> {
    let (c, n) = class_columns(g, "scal", probs, labels)?;
    let p = g.value(probs).data();
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != INVALID).collect();
    let mut grad = vec![0.0; c * n];
    let mut loss = 0.0;
    let mut present = 0usize;
    let classes: Vec<usize> = match mode {
        ScalMode::Sem => (0..c).collect(),
        ScalMode::Geo => vec![1],
    };
    // per-entry probability and target of the current class, and d(prob)/d(input row 0 or k)
    let mut pv = vec![0.0; valid.len()];
    let mut yv = vec![0.0; valid.len()];
    for &k in &classes {
        for (j, &i) in valid.iter().enumerate() {
            let (pk, yk) = match mode {
                ScalMode::Sem => (p[k * n + i].as_f64(), labels[i] as usize == k),
                ScalMode::Geo => (1.0 - p[i].as_f64(), labels[i] != 0),
            };
            pv[j] = pk;
            yv[j] = if yk { 1.0 } else { 0.0 };
        }
        let sum_y: f64 = yv.iter().sum();
        if sum_y == 0.0 {
            continue;
        }
        present += 1;
        let sum_p: f64 = pv.iter().sum();
        let tp: f64 = pv.iter().zip(&yv).map(|(p, y)| p * y).sum();
        let neg_y = valid.len() as f64 - sum_y;
        let tn: f64 = pv.iter().zip(&yv).map(|(p, y)| (1.0 - p) * (1.0 - y)).sum();
        // d(term)/d(p_j) accumulated per valid entry
        let mut dp = vec![0.0; valid.len()];
        if sum_p > 0.0 {
            if tp > LOG_FLOOR {
                loss += (tp / sum_p).ln();
                for j in 0..valid.len() {
                    dp[j] += yv[j] / tp - 1.0 / sum_p;
                }
            } else {
                loss += LOG_FLOOR.ln();
            }
        }
        if tp > LOG_FLOOR {
            loss += (tp / sum_y).ln();
            for j in 0..valid.len() {
                dp[j] += yv[j] / tp;
            }
        } else {
            loss += LOG_FLOOR.ln();
        }
        if neg_y > 0.0 {
            if tn > LOG_FLOOR {
                loss += (tn / neg_y).ln();
                for j in 0..valid.len() {
                    dp[j] -= (1.0 - yv[j]) / tn;
                }
            } else {
                loss += LOG_FLOOR.ln();
            }
        }
        for (j, &i) in valid.iter().enumerate() {
            match mode {
                ScalMode::Sem => grad[k * n + i] -= dp[j],
                ScalMode::Geo => grad[i] += dp[j],
            }
        }
    }
    if present == 0 {
        return Ok(record(g, "scal", probs, 0.0, grad));
    }
    let inv = 1.0 / present as f64;
    grad.iter_mut().for_each(|d| *d *= inv);
    Ok(record(g, "scal", probs, -loss * inv, grad))
}

/// The three terms of the completion loss.
#[derive(Debug, Clone, Copy)]
pub struct SscTerms {
    pub scal_sem: Var,
    pub scal_geo: Var,
    pub ce: Var,
    pub total: Var,
}

/// `scal_sem(probs) + scal_geo(probs) + ce(logits)`; `probs` must be the
/// softmax of `logits` over the class axis.
pub fn ssc_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, probs: Var, labels: &[u8]) -> Result<SscTerms> {
    let scal_sem = scal(g, probs, labels, ScalMode::Sem)?;
    let scal_geo = scal(g, probs, labels, ScalMode::Geo)?;
    let ce = cross_entropy(g, logits, labels)?;
    let s = g.add(scal_sem, scal_geo)?;
    let total = g.add(s, ce)?;
    Ok(SscTerms {
        scal_sem,
        scal_geo,
        ce,
        total,
    })
}

/// Every training objective of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub geo: Var,
    pub occ: Var,
    pub sem: Var,
    pub ssc: Var,
    pub total: Var,
}

/// Scalar values of a [`LossReport`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub geo: f64,
    pub occ: f64,
    pub sem: f64,
    pub ssc: f64,
    pub total: f64,
}

impl LossReport {
    /// `total = geo + occ + sem + ssc`.
    pub fn new<T: Scalar>(g: &mut Graph<T>, geo: Var, occ: Var, sem: Var, ssc: Var) -> Result<Self> {
        let a = g.add(geo, occ)?;
        let b = g.add(a, sem)?;
        let total = g.add(b, ssc)?;
        Ok(Self {
            geo,
            occ,
            sem,
            ssc,
            total,
        })
    }

    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            geo: v(self.geo),
            occ: v(self.occ),
            sem: v(self.sem),
            ssc: v(self.ssc),
            total: v(self.total),
        }
    }
}
