//! The saliency-guided training objective.
//!
//! ```text
//! total = alpha * xent(y) + (1 - alpha) * (sla + sce)
//! sla   = lambda * 2^tau * JS(y || y~) + (1 - lambda) * 2^tau * JS(y' || y~')
//! sce   = lambda * T(z, z~, z~') + (1 - lambda) * T(z', z~', z~)
//! T(a, p, n) = mean_i max(cs(a_i, p_i) - cs(a_i, n_i) + mu, 0)
//! ```
//!
//! `JS` is computed on temperature-scaled softmax distributions and averaged
//! over the batch; `cs` is cosine distance; `mu` is the detached mean cosine
//! distance between `z` and `z'` (or the per-row distance, see [`MarginMode`]).
//! All logarithms are natural, so `JS <= ln 2`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four views of one batch, in the order original, salient-preserving,
/// fully degraded, salient-degrading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quad<T> {
    pub base: T,
    pub tilde: T,
    pub prime: T,
    pub tilde_prime: T,
}

impl<T> Quad<T> {
    pub fn as_array(&self) -> [&T; 4] {
        [&self.base, &self.tilde, &self.prime, &self.tilde_prime]
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> Quad<U> {
        Quad {
            base: f(self.base),
            tilde: f(self.tilde),
            prime: f(self.prime),
            tilde_prime: f(self.tilde_prime),
        }
    }

    pub fn try_map<U, E>(self, mut f: impl FnMut(T) -> std::result::Result<U, E>) -> std::result::Result<Quad<U>, E> {
        Ok(Quad {
            base: f(self.base)?,
            tilde: f(self.tilde)?,
            prime: f(self.prime)?,
            tilde_prime: f(self.tilde_prime)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Softmax temperature for the alignment terms, `>= 1`.
    pub tau: f64,
    /// Salient vs. non-salient weighting, shared by the alignment and contrastive terms.
    pub lambda: f64,
    /// Classification vs. saliency trade-off.
    pub alpha: f64,
    /// Smoothing added inside the KL logarithm.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: 2.0,
            lambda: 0.5,
            alpha: 0.5,
            epsilon: 1e-12,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau", format!("{} must be >= 1", self.tau)));
        }
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} outside [0, 1]")));
            }
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid("epsilon", format!("{} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    #[default]
    BatchMean,
    PerRow,
}

// ---- plain-slice reference routines ----------------------------------------

fn check_dist(p: &[f64], q: &[f64], eps: f64) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "divergence",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    Ok(())
}

/// `sum_k p_k ln((p_k + eps) / (q_k + eps))`.
pub fn kl_div(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    check_dist(p, q, eps)?;
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| a * ((a + eps) / (b + eps)).ln())
        .sum())
}

pub fn js_div(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    check_dist(p, q, eps)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl_div(p, &m, eps)? + 0.5 * kl_div(q, &m, eps)?)
}

/// `1 - a.b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_distance",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(Error::ZeroNorm { what: "cosine_distance lhs", row: 0 });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm { what: "cosine_distance rhs", row: 0 });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

// ---- differentiable building blocks ----------------------------------------

fn batch_dims(g: &Graph, v: Var, what: &'static str) -> Result<(usize, usize)> {
    let t = g.value(v);
    t.dims2().ok_or_else(|| Error::InvalidShape {
        shape: t.shape().to_vec(),
        reason: format!("{what} must be (batch, width)"),
    })
}

fn same_shape(g: &Graph, vars: &[Var], op: &'static str) -> Result<()> {
    let first = g.value(vars[0]).shape();
    for &v in &vars[1..] {
        let s = g.value(v).shape();
        if s != first {
            return Err(Error::ShapeMismatch {
                op,
                left: first.to_vec(),
                right: s.to_vec(),
            });
        }
    }
    Ok(())
}

/// Row-wise `softmax(logits / tau)`.
pub fn softmax_with_temperature(g: &mut Graph, logits: Var, tau: f64) -> Result<Var> {
    if !(tau >= 1.0) {
        return Err(Error::invalid("tau", format!("{tau} must be >= 1")));
    }
    let (_, classes) = batch_dims(g, logits, "logits")?;
    if classes < 2 {
        return Err(Error::invalid("logits", "need at least two classes"));
    }
    if !g.value(logits).is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let scaled = if tau == 1.0 { logits } else { g.mul_scalar(logits, 1.0 / tau)? };
    g.softmax_rows(scaled)
}

/// Per-row KL divergence of `(B, C)` distributions; shape `(B)`.
pub fn kl_rows(g: &mut Graph, p: Var, q: Var, eps: f64) -> Result<Var> {
    same_shape(g, &[p, q], "kl_div")?;
    let ps = g.add_scalar(p, eps)?;
    let qs = g.add_scalar(q, eps)?;
    let lp = g.log(ps)?;
    let lq = g.log(qs)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    g.sum_axis(terms, 1)
}

/// Per-row Jensen-Shannon divergence; shape `(B)`.
pub fn js_rows(g: &mut Graph, p: Var, q: Var, eps: f64) -> Result<Var> {
    same_shape(g, &[p, q], "js_div")?;
    let pq = g.add(p, q)?;
    let m = g.mul_scalar(pq, 0.5)?;
    let kp = kl_rows(g, p, m, eps)?;
    let kq = kl_rows(g, q, m, eps)?;
    let both = g.add(kp, kq)?;
    g.mul_scalar(both, 0.5)
}

/// Saliency-based logit alignment over the four logit batches.
pub fn sla_loss(g: &mut Graph, y: &Quad<Var>, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    same_shape(g, &[y.base, y.tilde, y.prime, y.tilde_prime], "sla_loss")?;
    let p = y.try_map(|v| softmax_with_temperature(g, v, w.tau))?;
    let scale = 2f64.powf(w.tau);
    let salient = js_rows(g, p.base, p.tilde, w.epsilon)?;
    let salient = g.mean(salient)?;
    let degraded = js_rows(g, p.prime, p.tilde_prime, w.epsilon)?;
    let degraded = g.mean(degraded)?;
    let a = g.mul_scalar(salient, w.lambda * scale)?;
    let b = g.mul_scalar(degraded, (1.0 - w.lambda) * scale)?;
    g.add(a, b)
}

fn check_rows_nonzero(g: &Graph, v: Var, what: &'static str) -> Result<()> {
    let t = g.value(v);
    let (rows, _) = t.dims2().expect("checked by caller");
    for r in 0..rows {
        if t.row(r).iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroNorm { what, row: r });
        }
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Per-row cosine distance of `(B, D)` batches; shape `(B)`.
pub fn cosine_distance_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    batch_dims(g, a, "embedding")?;
    same_shape(g, &[a, b], "cosine_distance")?;
    check_rows_nonzero(g, a, "embedding")?;
    check_rows_nonzero(g, b, "embedding")?;
    let ab = g.mul(a, b)?;
    let dot = g.sum_axis(ab, 1)?;
    let aa = g.mul(a, a)?;
    let na2 = g.sum_axis(aa, 1)?;
    let bb = g.mul(b, b)?;
    let nb2 = g.sum_axis(bb, 1)?;
    let prod = g.mul(na2, nb2)?;
    let norms = g.sqrt(prod)?;
    let cos = g.div(dot, norms)?;
    let neg = g.neg(cos)?;
    g.add_scalar(neg, 1.0)
}

/// Triplet margin between anchor and fully degraded embeddings, cut from the graph.
///
/// `BatchMean` yields a one-element tensor, `PerRow` one value per row.
pub fn dynamic_margin(g: &mut Graph, z: Var, z_prime: Var, mode: MarginMode) -> Result<Var> {
    let d = cosine_distance_rows(g, z, z_prime)?;
    let m = match mode {
        MarginMode::BatchMean => g.mean(d)?,
        MarginMode::PerRow => d,
    };
    g.detach(m)
}

/// `mean_i max(cs(a_i, p_i) - cs(a_i, n_i) + margin, 0)`.
pub fn triplet_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, margin: Var) -> Result<Var> {
    same_shape(g, &[anchor, positive, negative], "triplet_loss")?;
    if let Some(m) = g.value(margin).data().iter().find(|m| !(**m >= 0.0)) {
        return Err(Error::invalid("margin", format!("{m} must be >= 0")));
    }
    let dp = cosine_distance_rows(g, anchor, positive)?;
    let dn = cosine_distance_rows(g, anchor, negative)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add(diff, margin)?;
    let hinge = g.clamp_min(shifted, 0.0)?;
    g.mean(hinge)
}

/// Saliency-guided contrastive embedding loss with the margin derived from `z`.
pub fn sce_loss(g: &mut Graph, z: &Quad<Var>, lambda: f64, mode: MarginMode) -> Result<Var> {
    let mu = dynamic_margin(g, z.base, z.prime, mode)?;
    sce_loss_with_margin(g, z, lambda, mu)
}

/// [`sce_loss`] with a caller-supplied margin.
pub fn sce_loss_with_margin(g: &mut Graph, z: &Quad<Var>, lambda: f64, margin: Var) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", format!("{lambda} outside [0, 1]")));
    }
    same_shape(g, &[z.base, z.tilde, z.prime, z.tilde_prime], "sce_loss")?;
    let forward = triplet_loss(g, z.base, z.tilde, z.tilde_prime, margin)?;
    let inverse = triplet_loss(g, z.prime, z.tilde_prime, z.tilde, margin)?;
    let a = g.mul_scalar(forward, lambda)?;
    let b = g.mul_scalar(inverse, 1.0 - lambda)?;
    g.add(a, b)
}

/// Mean negative log-likelihood of untempered softmax.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = batch_dims(g, logits, "logits")?;
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: vec![rows],
            right: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if !g.value(logits).is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut onehot = vec![0.0; rows * classes];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * classes + l] = 1.0;
    }
    let onehot = g.constant(Tensor::new(vec![rows, classes], onehot)?);
    let ls = g.log_softmax_rows(logits)?;
    let picked = g.mul(ls, onehot)?;
    let total = g.sum(picked)?;
    g.mul_scalar(total, -1.0 / rows as f64)
}

/// Scalar values of each objective component, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub xent: f64,
    pub sla: f64,
    pub sce: f64,
    pub total: f64,
}

pub struct SageLoss {
    pub total: Var,
    pub report: LossReport,
}

/// The composite objective. Cross-entropy sees only the unaugmented logits.
pub fn sage_loss(
    g: &mut Graph,
    y: &Quad<Var>,
    z: &Quad<Var>,
    labels: &[usize],
    w: &LossWeights,
    mode: MarginMode,
) -> Result<SageLoss> {
    let mu = dynamic_margin(g, z.base, z.prime, mode)?;
    sage_loss_with_margin(g, y, z, labels, w, mu)
}

/// [`sage_loss`] with a caller-supplied contrastive margin.
pub fn sage_loss_with_margin(
    g: &mut Graph,
    y: &Quad<Var>,
    z: &Quad<Var>,
    labels: &[usize],
    w: &LossWeights,
    margin: Var,
) -> Result<SageLoss> {
    w.validate()?;
    let xent = cross_entropy(g, y.base, labels)?;
    let sla = sla_loss(g, y, w)?;
    let sce = sce_loss_with_margin(g, z, w.lambda, margin)?;
    let guidance = g.add(sla, sce)?;
    let a = g.mul_scalar(xent, w.alpha)?;
    let b = g.mul_scalar(guidance, 1.0 - w.alpha)?;
    let total = g.add(a, b)?;
    let item = |v: Var| g.value(v).data()[0];
    let report = LossReport {
        xent: item(xent),
        sla: item(sla),
        sce: item(sce),
        total: item(total),
    };
    Ok(SageLoss { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_multi;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        mat(rows, cols, &(0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    fn scalar_of(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn tempered_softmax_examples() {
        let mut g = Graph::new();
        let l = g.constant(mat(2, 2, &[0.0, 0.0, 2.0, 0.0]));
        let p = softmax_with_temperature(&mut g, l, 2.0).unwrap();
        let v = g.value(p).data().to_vec();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        let e = std::f64::consts::E;
        assert!((v[2] - e / (e + 1.0)).abs() < 1e-12);
        assert!((v[3] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((v[2] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn tempered_softmax_rejects_bad_input() {
        let mut g = Graph::new();
        let l = g.constant(mat(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(softmax_with_temperature(&mut g, l, 1.0), Err(Error::NonFinite(_))));
        let ok = g.constant(mat(1, 2, &[0.0, 1.0]));
        assert!(softmax_with_temperature(&mut g, ok, 0.5).is_err());
    }

    #[test]
    fn kl_examples() {
        assert!(kl_div(&[0.3, 0.7], &[0.3, 0.7], 1e-12).unwrap().abs() < 1e-9);
        // 0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5)
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        let v = kl_div(&[0.9, 0.1], &[0.5, 0.5], 1e-12).unwrap();
        assert!((v - expected).abs() < 1e-10);
        assert!((v - 0.36806).abs() < 1e-4);
        assert!(kl_div(&[1.0], &[0.5, 0.5], 1e-12).is_err());
    }

    #[test]
    fn js_disjoint_supports_reach_ln2() {
        let v = js_div(&[1.0, 0.0], &[0.0, 1.0], 1e-12).unwrap();
        assert!((v - LN2).abs() < 1e-9);
    }

    #[test]
    fn graph_and_slice_divergences_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random_mat(&mut rng, 5, 4);
        let other = random_mat(&mut rng, 5, 4);
        let mut g = Graph::new();
        let a = g.constant(logits);
        let b = g.constant(other);
        let p = softmax_with_temperature(&mut g, a, 1.0).unwrap();
        let q = softmax_with_temperature(&mut g, b, 1.0).unwrap();
        let js = js_rows(&mut g, p, q, 1e-12).unwrap();
        let kl = kl_rows(&mut g, p, q, 1e-12).unwrap();
        for r in 0..5 {
            let (pr, qr) = (g.value(p).row(r), g.value(q).row(r));
            assert!((g.value(js).data()[r] - js_div(pr, qr, 1e-12).unwrap()).abs() < 1e-14);
            assert!((g.value(kl).data()[r] - kl_div(pr, qr, 1e-12).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn sla_examples() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let y = g.constant(mat(2, 2, &[0.0, 0.0, 1.0, -1.0]));
        let yp = g.constant(mat(2, 2, &[2.0, 0.0, 0.5, 0.5]));
        let quad = Quad { base: y, tilde: y, prime: yp, tilde_prime: yp };
        let l = sla_loss(&mut g, &quad, &w).unwrap();
        assert_eq!(scalar_of(&g, l), 0.0);

        // tau = 2: y' = (2, 0) -> softmax((1, 0)); y~' = (0, 2) -> softmax((0, 1))
        let zero = g.constant(mat(1, 2, &[0.0, 0.0]));
        let a = g.constant(mat(1, 2, &[2.0, 0.0]));
        let b = g.constant(mat(1, 2, &[0.0, 2.0]));
        let quad = Quad { base: zero, tilde: zero, prime: a, tilde_prime: b };
        let l = sla_loss(&mut g, &quad, &w).unwrap();
        let e = std::f64::consts::E;
        let (s10, s01) = ([e / (e + 1.0), 1.0 / (e + 1.0)], [1.0 / (e + 1.0), e / (e + 1.0)]);
        let expected = 0.5 * 4.0 * js_div(&s10, &s01, 1e-12).unwrap();
        assert!((scalar_of(&g, l) - expected).abs() < 1e-12);
    }

    #[test]
    fn sla_lambda_one_ignores_degraded_pair() {
        let w = LossWeights { lambda: 1.0, ..LossWeights::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let y = g.constant(random_mat(&mut rng, 3, 2));
        let yt = g.constant(random_mat(&mut rng, 3, 2));
        let a = g.constant(random_mat(&mut rng, 3, 2));
        let b = g.constant(random_mat(&mut rng, 3, 2));
        let l1 = sla_loss(&mut g, &Quad { base: y, tilde: yt, prime: a, tilde_prime: b }, &w).unwrap();
        let l2 = sla_loss(&mut g, &Quad { base: y, tilde: yt, prime: a, tilde_prime: a }, &w).unwrap();
        assert_eq!(scalar_of(&g, l1), scalar_of(&g, l2));
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn zero_embedding_rows_rejected() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let b = g.constant(mat(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        assert!(matches!(
            cosine_distance_rows(&mut g, a, b),
            Err(Error::ZeroNorm { row: 1, .. })
        ));
    }

    #[test]
    fn margin_examples() {
        let mut g = Graph::new();
        let z = g.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 1.0]), true);
        let m = dynamic_margin(&mut g, z, z, MarginMode::BatchMean).unwrap();
        assert!(scalar_of(&g, m).abs() < 1e-15);

        // rows with cosine distances 0.4 and 0.8 against the x axis
        let row = |d: f64| {
            let c: f64 = 1.0 - d;
            [c, (1.0 - c * c).sqrt()]
        };
        let (r1, r2) = (row(0.4), row(0.8));
        let a = g.leaf(mat(2, 2, &[1.0, 0.0, 1.0, 0.0]), true);
        let b = g.leaf(mat(2, 2, &[r1[0], r1[1], r2[0], r2[1]]), true);
        let m = dynamic_margin(&mut g, a, b, MarginMode::BatchMean).unwrap();
        assert!((scalar_of(&g, m) - 0.6).abs() < 1e-12);
        let per_row = dynamic_margin(&mut g, a, b, MarginMode::PerRow).unwrap();
        assert_eq!(g.value(per_row).shape(), &[2]);

        // detached: no gradient reaches the embeddings
        assert!(!g.requires_grad(m));
        let s = g.sum(m).unwrap();
        let extra = g.sum(a).unwrap();
        let l = g.add(s, extra).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(b).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 4]);
    }

    /// Embedding rows at prescribed cosine distances from the anchor (1, 0, 0).
    fn at_distance(d: f64, side: f64) -> [f64; 3] {
        let c = 1.0 - d;
        [c, side * (1.0 - c * c).sqrt(), 0.0]
    }

    fn triplet_value(dp: f64, dn: f64, mu: f64) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(mat(1, 3, &[1.0, 0.0, 0.0]));
        let p = g.constant(mat(1, 3, &at_distance(dp, 1.0)));
        let n = g.constant(mat(1, 3, &at_distance(dn, -1.0)));
        let m = g.constant(Tensor::scalar(mu));
        let l = triplet_loss(&mut g, a, p, n, m).unwrap();
        scalar_of(&g, l)
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_value(0.2, 0.9, 0.5), 0.0);
        assert!((triplet_value(0.6, 0.1, 0.3) - 0.8).abs() < 1e-12);
        // anchor == positive, negative beyond the margin
        assert_eq!(triplet_value(0.0, 0.7, 0.5), 0.0);
    }

    #[test]
    fn sce_all_identical_is_zero() {
        let mut g = Graph::new();
        let z = g.constant(mat(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]));
        let quad = Quad { base: z, tilde: z, prime: z, tilde_prime: z };
        let l = sce_loss(&mut g, &quad, 0.5, MarginMode::BatchMean).unwrap();
        assert_eq!(scalar_of(&g, l), 0.0);
    }

    /// Independent scalar-loop recomputation of the contrastive loss.
    fn sce_oracle(z: [&Tensor; 4], lambda: f64) -> f64 {
        let rows = z[0].dims2().unwrap().0;
        let cs = |a: &[f64], b: &[f64]| {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for i in 0..a.len() {
                dot += a[i] * b[i];
                na += a[i] * a[i];
                nb += b[i] * b[i];
            }
            1.0 - dot / (na.sqrt() * nb.sqrt())
        };
        let mut mu = 0.0;
        for r in 0..rows {
            mu += cs(z[0].row(r), z[2].row(r));
        }
        mu /= rows as f64;
        let mut fwd = 0.0;
        let mut inv = 0.0;
        for r in 0..rows {
            let (a, t, p, tp) = (z[0].row(r), z[1].row(r), z[2].row(r), z[3].row(r));
            fwd += (cs(a, t) - cs(a, tp) + mu).max(0.0);
            inv += (cs(p, tp) - cs(p, t) + mu).max(0.0);
        }
        lambda * fwd / rows as f64 + (1.0 - lambda) * inv / rows as f64
    }

    #[test]
    fn sce_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for lambda in [0.5, 1.0, 0.2] {
            let ts: Vec<Tensor> = (0..4).map(|_| random_mat(&mut rng, 4, 8)).collect();
            let mut g = Graph::new();
            let v: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let quad = Quad { base: v[0], tilde: v[1], prime: v[2], tilde_prime: v[3] };
            let l = sce_loss(&mut g, &quad, lambda, MarginMode::BatchMean).unwrap();
            let expected = sce_oracle([&ts[0], &ts[1], &ts[2], &ts[3]], lambda);
            assert!((scalar_of(&g, l) - expected).abs() < 1e-10);
            if lambda == 1.0 {
                let mu = dynamic_margin(&mut g, v[0], v[2], MarginMode::BatchMean).unwrap();
                let fwd = triplet_loss(&mut g, v[0], v[1], v[3], mu).unwrap();
                assert_eq!(scalar_of(&g, l), scalar_of(&g, fwd));
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let u = g.constant(mat(2, 2, &[0.3, 0.3, -1.0, -1.0]));
        let l = cross_entropy(&mut g, u, &[0, 1]).unwrap();
        assert!((scalar_of(&g, l) - LN2).abs() < 1e-12);
        let s = g.constant(mat(1, 2, &[10.0, 0.0]));
        let l = cross_entropy(&mut g, s, &[0]).unwrap();
        let expected = (1.0 + (-10f64).exp()).ln();
        assert!((scalar_of(&g, l) - expected).abs() < 1e-15);
        assert!((scalar_of(&g, l) - 4.54e-5).abs() < 1e-7);
        assert!(matches!(
            cross_entropy(&mut g, s, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_permutation_equivariance() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 3, &[0.1, 2.0, -1.0, 0.5, 0.4, 3.0]));
        let b = g.constant(mat(2, 3, &[-1.0, 0.1, 2.0, 3.0, 0.5, 0.4]));
        // permutation class k -> (k + 1) mod 3
        let la = cross_entropy(&mut g, a, &[1, 2]).unwrap();
        let lb = cross_entropy(&mut g, b, &[2, 0]).unwrap();
        assert!((scalar_of(&g, la) - scalar_of(&g, lb)).abs() < 1e-15);
    }

    fn random_quad(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> [Tensor; 4] {
        std::array::from_fn(|_| random_mat(rng, rows, cols))
    }

    #[test]
    fn sage_degenerate_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = random_quad(&mut rng, 4, 2);
        let z = random_quad(&mut rng, 4, 6);
        let labels = [0, 1, 1, 0];
        let mut g = Graph::new();
        let yv: Vec<Var> = y.iter().map(|t| g.constant(t.clone())).collect();
        let zv: Vec<Var> = z.iter().map(|t| g.constant(t.clone())).collect();
        let yq = Quad { base: yv[0], tilde: yv[1], prime: yv[2], tilde_prime: yv[3] };
        let zq = Quad { base: zv[0], tilde: zv[1], prime: zv[2], tilde_prime: zv[3] };
        let w = LossWeights { alpha: 1.0, ..LossWeights::default() };
        let out = sage_loss(&mut g, &yq, &zq, &labels, &w, MarginMode::BatchMean).unwrap();
        let xent = cross_entropy(&mut g, yv[0], &labels).unwrap();
        assert_eq!(out.report.total, scalar_of(&g, xent));

        let same_y = Quad { base: yv[0], tilde: yv[0], prime: yv[0], tilde_prime: yv[0] };
        let same_z = Quad { base: zv[0], tilde: zv[0], prime: zv[0], tilde_prime: zv[0] };
        let w = LossWeights::default();
        let out = sage_loss(&mut g, &same_y, &same_z, &labels, &w, MarginMode::BatchMean).unwrap();
        assert_eq!(out.report.sla, 0.0);
        assert_eq!(out.report.sce, 0.0);
        assert_eq!(out.report.total, 0.5 * out.report.xent);
    }

    #[test]
    fn sage_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = random_quad(&mut rng, 4, 2);
        let z = random_quad(&mut rng, 4, 5);
        let labels = [1, 0, 0, 1];
        let w = LossWeights::default();
        // freeze the margin at the unperturbed point: it is detached in the analytic pass
        let mu = {
            let mut g = Graph::new();
            let a = g.constant(z[0].clone());
            let b = g.constant(z[2].clone());
            let m = dynamic_margin(&mut g, a, b, MarginMode::BatchMean).unwrap();
            g.value(m).clone()
        };
        let inputs: Vec<Tensor> = y.iter().chain(z.iter()).cloned().collect();
        let err = grad_check_multi(
            |g, v| {
                let yq = Quad { base: v[0], tilde: v[1], prime: v[2], tilde_prime: v[3] };
                let zq = Quad { base: v[4], tilde: v[5], prime: v[6], tilde_prime: v[7] };
                let m = g.constant(mu.clone());
                Ok(sage_loss_with_margin(g, &yq, &zq, &labels, &w, m)?.total)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn sce_scale_invariance(seed in 0u64..500, row in 0usize..3, which in 0usize..4, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random_quad(&mut rng, 3, 4);
            let eval = |z: &[Tensor; 4]| {
                let mut g = Graph::new();
                let v: Vec<Var> = z.iter().map(|t| g.constant(t.clone())).collect();
                let q = Quad { base: v[0], tilde: v[1], prime: v[2], tilde_prime: v[3] };
                let l = sce_loss(&mut g, &q, 0.5, MarginMode::BatchMean).unwrap();
                g.value(l).data()[0]
            };
            let before = eval(&z);
            let mut scaled = z.clone();
            for v in &mut scaled[which].data_mut()[row * 4..(row + 1) * 4] {
                *v *= c;
            }
            prop_assert!((eval(&scaled) - before).abs() < 1e-9);
        }

        #[test]
        fn components_non_negative(seed in 0u64..500, alpha in 0.0f64..1.0, lambda in 0.0f64..1.0, tau in 1.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random_quad(&mut rng, 3, 3);
            let z = random_quad(&mut rng, 3, 4);
            let mut g = Graph::new();
            let yv: Vec<Var> = y.iter().map(|t| g.constant(t.clone())).collect();
            let zv: Vec<Var> = z.iter().map(|t| g.constant(t.clone())).collect();
            let yq = Quad { base: yv[0], tilde: yv[1], prime: yv[2], tilde_prime: yv[3] };
            let zq = Quad { base: zv[0], tilde: zv[1], prime: zv[2], tilde_prime: zv[3] };
            let w = LossWeights { tau, lambda, alpha, epsilon: 1e-12 };
            let r = sage_loss(&mut g, &yq, &zq, &[0, 2, 1], &w, MarginMode::BatchMean).unwrap().report;
            prop_assert!(r.xent >= 0.0 && r.sla >= -1e-12 && r.sce >= 0.0 && r.total >= -1e-12);
        }

        #[test]
        fn triplet_hinge_inactive_when_separated(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dp: f64 = rng.random_range(0.0..0.5);
            let mu: f64 = rng.random_range(0.0..0.5);
            let dn = dp + mu + rng.random_range(0.01..0.5);
            prop_assert_eq!(triplet_value(dp, dn, mu), 0.0);
        }
    }
}
