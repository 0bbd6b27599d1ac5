//! Training and attack objectives.
//!
//! KL notation: `KL(A, B)` as written in the method table is evaluated as
//! `KL(B || A)` with `B` the reference and `A` the distribution being
//! optimized. KL helpers take `(reference, trainee)`. [`kl_div`] reads the
//! reference by value; [`kl_div_joint`] differentiates both, which is used when
//! the reference is the student itself or the teacher evaluated on `x'`.
//!
//! All batch reductions are arithmetic means over examples.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensorcore::{log_softmax_values, softmax_values, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{method}: missing block {block}")]
    MissingBlock {
        method: &'static str,
        block: &'static str,
    },
    #[error("huber threshold must be positive, got {0}")]
    InvalidDelta(f64),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid hyperparameter {name} = {value}")]
    InvalidHyper { name: &'static str, value: f64 },
    #[error("logit blocks disagree: {0}")]
    Shape(String),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Rows of the method table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Sat,
    Trades,
    Ard,
    Iad,
    Rslad,
    Mtard,
    Mmard,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sat,
        Method::Trades,
        Method::Ard,
        Method::Iad,
        Method::Rslad,
        Method::Mtard,
        Method::Mmard,
    ];

    /// Methods that learn from a pretrained teacher.
    pub const DISTILLATION: [Method; 5] = [
        Method::Ard,
        Method::Iad,
        Method::Rslad,
        Method::Mtard,
        Method::Mmard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sat => "sat",
            Method::Trades => "trades",
            Method::Ard => "ard",
            Method::Iad => "iad",
            Method::Rslad => "rslad",
            Method::Mtard => "mtard",
            Method::Mmard => "mmard",
        }
    }

    pub fn needs_teacher(self) -> bool {
        !matches!(self, Method::Sat | Method::Trades)
    }

    /// Trade-off weight used when none is configured.
    pub fn default_alpha(self) -> f64 {
        match self {
            Method::Rslad => 5.0 / 6.0,
            Method::Mtard => 0.5,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| LossError::UnknownMethod(s.to_string()))
    }
}

/// Outer objective selector plus hyperparameters; `inner_override` swaps in
/// another method's inner objective.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec<T = f64> {
    pub method: Method,
    pub inner_override: Option<Method>,
    pub alpha: T,
    pub beta: T,
    pub lambda: T,
    pub tau: T,
    pub huber_delta: T,
}

impl<T: Scalar> MethodSpec<T> {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            inner_override: None,
            alpha: T::lit(method.default_alpha()),
            beta: T::one(),
            lambda: T::lit(6.0),
            tau: T::one(),
            huber_delta: T::one(),
        }
    }

    pub fn with_alpha(mut self, alpha: T) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_inner(mut self, inner: Method) -> Self {
        self.inner_override = Some(inner);
        self
    }

    pub fn inner_method(&self) -> Method {
        self.inner_override.unwrap_or(self.method)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > T::zero()) {
            return Err(LossError::InvalidTemperature(self.tau.as_f64()));
        }
        if !(self.huber_delta > T::zero()) {
            return Err(LossError::InvalidDelta(self.huber_delta.as_f64()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(LossError::InvalidHyper {
                    name,
                    value: v.as_f64(),
                });
            }
        }
        Ok(())
    }
}

/// Logit blocks for one batch, as nodes of a single graph.
///
/// `teacher_adv` doubles as `T_adv(x')` for MTARD, whose clean teacher
/// supplies `clean_teacher_nat`.
#[derive(Clone, Debug, Default)]
pub struct BatchOutputs {
    pub student_nat: Option<NodeId>,
    pub student_adv: Option<NodeId>,
    pub teacher_nat: Option<NodeId>,
    pub teacher_adv: Option<NodeId>,
    pub clean_teacher_nat: Option<NodeId>,
    pub labels: Vec<usize>,
}

impl BatchOutputs {
    fn blocks(&self) -> [(&'static str, Option<NodeId>); 5] {
        [
            ("S(x)", self.student_nat),
            ("S(x')", self.student_adv),
            ("T(x)", self.teacher_nat),
            ("T(x')", self.teacher_adv),
            ("T_nat(x)", self.clean_teacher_nat),
        ]
    }

    fn validate<T: Scalar>(&self, g: &Graph<T>) -> Result<(), LossError> {
        let mut shape: Option<&[usize]> = None;
        for (name, id) in self.blocks() {
            let Some(id) = id else { continue };
            let s = g.try_value(id)?.shape();
            if s.len() != 2 {
                return Err(LossError::Shape(format!("{name} has shape {s:?}, expected [N, C]")));
            }
            match shape {
                Some(prev) if prev != s => {
                    return Err(LossError::Shape(format!("{name} has shape {s:?}, expected {prev:?}")))
                }
                _ => shape = Some(s),
            }
        }
        if let Some(s) = shape {
            if s[0] != self.labels.len() {
                return Err(LossError::Shape(format!(
                    "{} labels for a batch of {}",
                    self.labels.len(),
                    s[0]
                )));
            }
            check_labels(&self.labels, s[1])?;
        }
        Ok(())
    }
}

fn require(block: Option<NodeId>, method: Method, name: &'static str) -> Result<NodeId, LossError> {
    block.ok_or(LossError::MissingBlock {
        method: method.name(),
        block: name,
    })
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), LossError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = T::one();
    }
    Tensor::from_parts(vec![labels.len(), classes], data)
}

fn two_dims<T: Scalar>(g: &Graph<T>, id: NodeId, what: &str) -> Result<(usize, usize), LossError> {
    let s = g.try_value(id)?.shape();
    match s {
        [n, c] => Ok((*n, *c)),
        _ => Err(LossError::Shape(format!("{what} has shape {s:?}, expected [N, C]"))),
    }
}

/// Mean cross entropy of `softmax(logits / tau)` against integer labels.
pub fn cross_entropy_tau<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[usize],
    tau: T,
) -> Result<NodeId, LossError> {
    let (n, c) = two_dims(g, logits, "logits")?;
    if labels.len() != n {
        return Err(LossError::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    check_labels(labels, c)?;
    let y = g.constant(one_hot(labels, c));
    let ls = g.log_softmax(logits, tau)?;
    let picked = g.mul(y, ls)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -T::one() / T::lit(n as f64))?)
}

pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId, LossError> {
    cross_entropy_tau(g, logits, labels, T::one())
}

/// Per-example `KL(softmax(reference/tau) || softmax(trainee/tau))`, shape `[N]`.
/// The reference is read by value and never differentiated.
pub fn kl_div_rows<T: Scalar>(
    g: &mut Graph<T>,
    reference: NodeId,
    trainee: NodeId,
    tau: T,
) -> Result<NodeId, LossError> {
    if !(tau > T::zero()) {
        return Err(LossError::InvalidTemperature(tau.as_f64()));
    }
    let r = g.try_value(reference)?.clone();
    let (n, c) = two_dims(g, trainee, "trainee logits")?;
    if r.shape() != [n, c] {
        return Err(LossError::Shape(format!(
            "reference {:?} vs trainee {:?}",
            r.shape(),
            [n, c]
        )));
    }
    let p = softmax_values(&r, tau);
    let log_p = log_softmax_values(&r, tau);
    let neg_entropy: Vec<T> = p
        .data()
        .chunks(c)
        .zip(log_p.data().chunks(c))
        .map(|(pr, lr)| pr.iter().zip(lr).map(|(&a, &b)| a * b).sum())
        .collect();
    let neg_entropy = g.constant(Tensor::from_parts(vec![n], neg_entropy));
    let p = g.constant(p);
    let log_q = g.log_softmax(trainee, tau)?;
    let cross = g.mul(p, log_q)?;
    let cross = g.sum_rows(cross)?;
    Ok(g.sub(neg_entropy, cross)?)
}

/// Per-example KL divergence differentiated through both arguments, for terms
/// where the reference is the student itself.
pub fn kl_div_rows_joint<T: Scalar>(g: &mut Graph<T>, reference: NodeId, trainee: NodeId, tau: T) -> Result<NodeId, LossError> {
    if !(tau > T::zero()) {
        return Err(LossError::InvalidTemperature(tau.as_f64()));
    }
    let (n, c) = two_dims(g, trainee, "trainee logits")?;
    if g.try_value(reference)?.shape() != [n, c] {
        return Err(LossError::Shape(format!(
            "reference {:?} vs trainee {:?}",
            g.value(reference).shape(),
            [n, c]
        )));
    }
    let p = g.softmax(reference, tau)?;
    let log_p = g.log_softmax(reference, tau)?;
    let log_q = g.log_softmax(trainee, tau)?;
    let d = g.sub(log_p, log_q)?;
    let terms = g.mul(p, d)?;
    Ok(g.sum_rows(terms)?)
}

/// Batch mean of [`kl_div_rows_joint`].
pub fn kl_div_joint<T: Scalar>(g: &mut Graph<T>, reference: NodeId, trainee: NodeId, tau: T) -> Result<NodeId, LossError> {
    let rows = kl_div_rows_joint(g, reference, trainee, tau)?;
    Ok(g.mean(rows)?)
}

/// Batch-mean KL divergence; see [`kl_div_rows`].
pub fn kl_div<T: Scalar>(g: &mut Graph<T>, reference: NodeId, trainee: NodeId, tau: T) -> Result<NodeId, LossError> {
    let rows = kl_div_rows(g, reference, trainee, tau)?;
    Ok(g.mean(rows)?)
}

/// Huber loss of a scalar pair.
pub fn huber<T: Scalar>(a: T, b: T, delta: T) -> Result<T, LossError> {
    if !(delta > T::zero()) {
        return Err(LossError::InvalidDelta(delta.as_f64()));
    }
    let d = (a - b).abs();
    let half = T::lit(0.5);
    Ok(if d <= delta {
        half * d * d
    } else {
        delta * (d - half * delta)
    })
}

/// Elementwise Huber loss between two same-shape nodes, built as
/// `0.5 q^2 + delta (|a-b| - q)` with `q = min(|a-b|, delta)`.
pub fn huber_nodes<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId, delta: T) -> Result<NodeId, LossError> {
    if !(delta > T::zero()) {
        return Err(LossError::InvalidDelta(delta.as_f64()));
    }
    let d = g.sub(a, b)?;
    let ad = g.abs(d)?;
    let q = g.clamp(ad, T::zero(), delta)?;
    let q2 = g.square(q)?;
    let quad = g.scale(q2, T::lit(0.5))?;
    let excess = g.sub(ad, q)?;
    let lin = g.scale(excess, delta)?;
    Ok(g.add(quad, lin)?)
}

const DEGENERATE_NORM: f64 = 1e-12;

/// Cosine between two raw vectors; zero when either has norm below 1e-12.
pub fn normalized_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    let eps = T::lit(DEGENERATE_NORM);
    if na < eps || nb < eps {
        return T::zero();
    }
    a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>() / (na * nb)
}

/// Angle at the label vertex between `pred_nat - y` and `pred_adv - y`, as a
/// cosine, for probability vectors and a one-hot label.
pub fn psi<T: Scalar>(pred_nat: &[T], pred_adv: &[T], label: usize) -> Result<T, LossError> {
    if pred_nat.len() != pred_adv.len() {
        return Err(LossError::Shape(format!(
            "prediction lengths {} and {}",
            pred_nat.len(),
            pred_adv.len()
        )));
    }
    check_labels(&[label], pred_nat.len())?;
    let diff = |p: &[T]| -> Vec<T> {
        p.iter()
            .enumerate()
            .map(|(j, &v)| if j == label { v - T::one() } else { v })
            .collect()
    };
    Ok(normalized_dot(&diff(pred_nat), &diff(pred_adv)))
}

/// Per-example ψ on softmax(τ=1) predictions, shape `[N]`, differentiable
/// through both logit blocks away from the degenerate locus.
pub fn psi_rows<T: Scalar>(
    g: &mut Graph<T>,
    nat_logits: NodeId,
    adv_logits: NodeId,
    labels: &[usize],
) -> Result<NodeId, LossError> {
    let (n, c) = two_dims(g, nat_logits, "natural logits")?;
    if g.try_value(adv_logits)?.shape() != [n, c] || labels.len() != n {
        return Err(LossError::Shape("psi blocks disagree".into()));
    }
    check_labels(labels, c)?;
    let y = g.constant(one_hot(labels, c));
    let pn = g.softmax(nat_logits, T::one())?;
    let pa = g.softmax(adv_logits, T::one())?;
    let dn = g.sub(pn, y)?;
    let da = g.sub(pa, y)?;
    let prod = g.mul(dn, da)?;
    let dots = g.sum_rows(prod)?;
    let dn2 = g.square(dn)?;
    let sn = g.sum_rows(dn2)?;
    let da2 = g.square(da)?;
    let sa = g.sum_rows(da2)?;

    // Degenerate rows get a unit pad under the sqrt and a zero mask.
    let floor = T::lit(DEGENERATE_NORM * DEGENERATE_NORM);
    let mask: Vec<T> = g
        .value(sn)
        .data()
        .iter()
        .zip(g.value(sa).data())
        .map(|(&a, &b)| if a < floor || b < floor { T::zero() } else { T::one() })
        .collect();
    let pad: Vec<T> = mask.iter().map(|&m| T::one() - m).collect();
    let pad = g.constant(Tensor::from_parts(vec![n], pad));
    let mask = g.constant(Tensor::from_parts(vec![n], mask));
    let sn = g.add(sn, pad)?;
    let sa = g.add(sa, pad)?;
    let norms2 = g.mul(sn, sa)?;
    let norms = g.sqrt(norms2)?;
    let cos = g.div(dots, norms)?;
    Ok(g.mul(mask, cos)?)
}

/// Batch-mean Huber distance between teacher and student ψ. The teacher side is
/// detached; the student side is differentiable through `S(x)` and `S(x')`.
pub fn trd_loss<T: Scalar>(g: &mut Graph<T>, batch: &BatchOutputs, delta: T) -> Result<NodeId, LossError> {
    batch.validate(g)?;
    let m = Method::Mmard;
    let tn = require(batch.teacher_nat, m, "T(x)")?;
    let ta = require(batch.teacher_adv, m, "T(x')")?;
    let sn = require(batch.student_nat, m, "S(x)")?;
    let sa = require(batch.student_adv, m, "S(x')")?;
    let tn = g.detach(tn)?;
    let ta = g.detach(ta)?;
    let psi_t = psi_rows(g, tn, ta, &batch.labels)?;
    let psi_s = psi_rows(g, sn, sa, &batch.labels)?;
    let h = huber_nodes(g, psi_t, psi_s, delta)?;
    Ok(g.mean(h)?)
}

/// `a * x + b * y` for scalar nodes.
fn blend<T: Scalar>(g: &mut Graph<T>, a: T, x: NodeId, b: T, y: NodeId) -> Result<NodeId, LossError> {
    let x = g.scale(x, a)?;
    let y = g.scale(y, b)?;
    Ok(g.add(x, y)?)
}

/// Outer minimization objective for `spec.method`.
pub fn outer_loss<T: Scalar>(g: &mut Graph<T>, spec: &MethodSpec<T>, batch: &BatchOutputs) -> Result<NodeId, LossError> {
    spec.validate()?;
    batch.validate(g)?;
    let m = spec.method;
    let y = &batch.labels;
    let one = T::one();
    let tau = spec.tau;
    match m {
        Method::Sat => {
            let sa = require(batch.student_adv, m, "S(x')")?;
            cross_entropy(g, sa, y)
        }
        Method::Trades => {
            let sn = require(batch.student_nat, m, "S(x)")?;
            let sa = require(batch.student_adv, m, "S(x')")?;
            let ce = cross_entropy(g, sn, y)?;
            let kl = kl_div_rows_joint(g, sn, sa, one)?;
            let kl = g.mean(kl)?;
            blend(g, one, ce, spec.lambda, kl)
        }
        Method::Ard => {
            let sn = require(batch.student_nat, m, "S(x)")?;
            let sa = require(batch.student_adv, m, "S(x')")?;
            let tn = require(batch.teacher_nat, m, "T(x)")?;
            let ce = cross_entropy_tau(g, sn, y, tau)?;
            let kl = kl_div(g, tn, sa, tau)?;
            blend(g, one - spec.alpha, ce, spec.alpha * tau * tau, kl)
        }
        Method::Iad => {
            let sn = require(batch.student_nat, m, "S(x)")?;
            let sa = require(batch.student_adv, m, "S(x')")?;
            let tn = require(batch.teacher_nat, m, "T(x)")?;
            let ta = require(batch.teacher_adv, m, "T(x')")?;
            let n = y.len();
            let t_adv = softmax_values(g.value(ta), one);
            let c = t_adv.last_dim();
            let w: Vec<T> = y
                .iter()
                .enumerate()
                .map(|(i, &l)| t_adv.data()[i * c + l].powf(spec.beta))
                .collect();
            let rest: Vec<T> = w.iter().map(|&v| one - v).collect();
            let w = g.constant(Tensor::from_parts(vec![n], w));
            let rest = g.constant(Tensor::from_parts(vec![n], rest));
            let from_teacher = kl_div_rows(g, tn, sa, tau)?;
            let from_self = kl_div_rows_joint(g, sn, sa, tau)?;
            let a = g.dot(w, from_teacher)?;
            let b = g.dot(rest, from_self)?;
            let inv_n = one / T::lit(n as f64);
            blend(g, inv_n, a, inv_n, b)
        }
        Method::Rslad => {
            let sn = require(batch.student_nat, m, "S(x)")?;
            let sa = require(batch.student_adv, m, "S(x')")?;
            let tn = require(batch.teacher_nat, m, "T(x)")?;
            let nat = kl_div(g, tn, sn, one)?;
            let adv = kl_div(g, tn, sa, one)?;
            blend(g, one - spec.alpha, nat, spec.alpha, adv)
        }
        Method::Mtard => {
            let sn = require(batch.student_nat, m, "S(x)")?;
            let sa = require(batch.student_adv, m, "S(x')")?;
            let tc = require(batch.clean_teacher_nat, m, "T_nat(x)")?;
            let ta = require(batch.teacher_adv, m, "T_adv(x')")?;
            let nat = kl_div(g, tc, sn, one)?;
            let adv = kl_div(g, ta, sa, one)?;
            blend(g, spec.alpha, nat, one - spec.alpha, adv)
        }
        Method::Mmard => {
            let sa = require(batch.student_adv, m, "S(x')")?;
            let ta = require(batch.teacher_adv, m, "T(x')")?;
            let kl = kl_div_joint(g, ta, sa, one)?;
            if spec.alpha == T::zero() {
                return Ok(kl);
            }
            let trd = trd_loss(g, batch, spec.huber_delta)?;
            blend(g, one, kl, spec.alpha, trd)
        }
    }
}

/// Inner maximization objective of `spec.inner_method()`. Natural-input
/// references are read by value; MMARD's `T(x')` is differentiated, so when it
/// is computed from `x'` the gradient reaches `x'` through the teacher as well.
pub fn inner_objective<T: Scalar>(
    g: &mut Graph<T>,
    spec: &MethodSpec<T>,
    batch: &BatchOutputs,
) -> Result<NodeId, LossError> {
    spec.validate()?;
    batch.validate(g)?;
    let m = spec.inner_method();
    let sa = require(batch.student_adv, m, "S(x')")?;
    match m {
        Method::Sat | Method::Ard | Method::Iad | Method::Mtard => cross_entropy(g, sa, &batch.labels),
        Method::Trades => {
            let sn = require(batch.student_nat, m, "S(x)")?;
            kl_div(g, sn, sa, T::one())
        }
        Method::Rslad => {
            let tn = require(batch.teacher_nat, m, "T(x)")?;
            kl_div(g, tn, sa, T::one())
        }
        Method::Mmard => {
            let ta = require(batch.teacher_adv, m, "T(x')")?;
            kl_div_joint(g, ta, sa, T::one())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::grad_check;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn scalar(g: &Graph<f64>, id: NodeId) -> f64 {
        g.value(id).item().unwrap()
    }

    #[test]
    fn ce_of_uniform_is_ln2() {
        let mut g = Graph::new();
        let z = g.leaf(t(&[1, 2], &[0.0, 0.0]));
        let l = cross_entropy(&mut g, z, &[0]).unwrap();
        assert!((scalar(&g, l) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_confident_correct_is_zero() {
        let mut g = Graph::new();
        let z = g.leaf(t(&[1, 2], &[30.0, -30.0]));
        let l = cross_entropy(&mut g, z, &[0]).unwrap();
        assert!(scalar(&g, l) <= 1e-12);
    }

    #[test]
    fn ce_mean_invariance() {
        let mut g = Graph::new();
        let one = g.leaf(t(&[1, 3], &[0.2, -1.0, 0.7]));
        let two = g.leaf(t(&[2, 3], &[0.2, -1.0, 0.7, 0.2, -1.0, 0.7]));
        let a = cross_entropy(&mut g, one, &[2]).unwrap();
        let b = cross_entropy(&mut g, two, &[2, 2]).unwrap();
        assert!((scalar(&g, a) - scalar(&g, b)).abs() < 1e-15);
    }

    #[test]
    fn ce_label_out_of_range() {
        let mut g = Graph::new();
        let z = g.leaf(t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(
            cross_entropy(&mut g, z, &[2]).unwrap_err(),
            LossError::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn kl_identical_is_zero() {
        let mut g = Graph::new();
        let r = g.constant(t(&[2, 3], &[0.3, -2.0, 1.1, 4.0, 0.0, -0.5]));
        let s = g.leaf(t(&[2, 3], &[0.3, -2.0, 1.1, 4.0, 0.0, -0.5]));
        let kl = kl_div(&mut g, r, s, 1.0).unwrap();
        assert!(scalar(&g, kl).abs() <= 1e-12);
    }

    #[test]
    fn kl_onehot_vs_uniform_is_ln2() {
        let mut g = Graph::new();
        let r = g.constant(t(&[1, 2], &[50.0, -50.0]));
        let s = g.leaf(t(&[1, 2], &[0.0, 0.0]));
        let kl = kl_div(&mut g, r, s, 1.0).unwrap();
        assert!((scalar(&g, kl) - LN_2).abs() <= 1e-12);
    }

    #[test]
    fn kl_gradient_only_reaches_trainee() {
        let mut g = Graph::new();
        let r = g.leaf(t(&[1, 2], &[1.0, -1.0]));
        let s = g.leaf(t(&[1, 2], &[0.0, 0.5]));
        let kl = kl_div(&mut g, r, s, 2.0).unwrap();
        let grads = g.backward(kl).unwrap();
        assert!(grads.get(r).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(s).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let mut g = Graph::new();
        let r = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let s = g.leaf(t(&[1, 3], &[0.0, 0.5, 0.1]));
        assert!(matches!(kl_div(&mut g, r, s, 1.0), Err(LossError::Shape(_))));
        let s2 = g.leaf(t(&[1, 2], &[0.0, 0.5]));
        assert!(matches!(kl_div(&mut g, r, s2, 0.0), Err(LossError::InvalidTemperature(_))));
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(3.0, 3.0, 1.0).unwrap(), 0.0);
        assert_eq!(huber(0.0, 0.5, 1.0).unwrap(), 0.125);
        assert_eq!(huber(0.0, 2.0, 1.0).unwrap(), 1.5);
        assert!(matches!(huber(0.0, 2.0, 0.0), Err(LossError::InvalidDelta(_))));
    }

    #[test]
    fn huber_nodes_matches_scalar() {
        let a = [0.0, 0.3, -2.0, 1.0];
        let b = [0.5, 0.3, 0.1, -0.9];
        let mut g = Graph::new();
        let an = g.leaf(t(&[4], &a));
        let bn = g.leaf(t(&[4], &b));
        let h = huber_nodes(&mut g, an, bn, 1.0).unwrap();
        for i in 0..4 {
            let want = huber(a[i], b[i], 1.0).unwrap();
            assert!((g.value(h).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn psi_examples() {
        let p = [0.2f64, 0.5, 0.3];
        assert!((psi(&p, &p, 0).unwrap() - 1.0).abs() < 1e-15);
        // pred - y along (-1,1,0) and (-1,0,1)
        let nat = [0.6f64, 0.4, 0.0];
        let adv = [0.7, 0.0, 0.3];
        assert!((psi(&nat, &adv, 0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(psi(&[1.0, 0.0, 0.0], &adv, 0).unwrap(), 0.0);
        assert!(psi(&p, &p, 3).is_err());
    }

    #[test]
    fn psi_rows_matches_plain_kernel() {
        let nat = t(&[2, 3], &[0.1, 1.2, -0.3, 2.0, -1.0, 0.5]);
        let adv = t(&[2, 3], &[-0.4, 0.8, 0.9, 0.0, 0.0, 0.3]);
        let labels = [1, 0];
        let mut g = Graph::new();
        let n = g.leaf(nat.clone());
        let a = g.leaf(adv.clone());
        let rows = psi_rows(&mut g, n, a, &labels).unwrap();
        let pn = softmax_values(&nat, 1.0);
        let pa = softmax_values(&adv, 1.0);
        for i in 0..2 {
            let want = psi(&pn.data()[i * 3..i * 3 + 3], &pa.data()[i * 3..i * 3 + 3], labels[i]).unwrap();
            assert!((g.value(rows).data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn psi_rows_degenerate_row_has_zero_value_and_gradient() {
        let mut g = Graph::new();
        // Row 0 saturates to the one-hot label in f64.
        let n = g.leaf(t(&[2, 2], &[800.0, 0.0, 0.2, 0.1]));
        let a = g.leaf(t(&[2, 2], &[0.1, 0.3, -0.2, 0.4]));
        let rows = psi_rows(&mut g, n, a, &[0, 1]).unwrap();
        assert_eq!(g.value(rows).data()[0], 0.0);
        let s = g.sum(rows).unwrap();
        let grads = g.backward(s).unwrap();
        let gn = grads.get(n).unwrap().data();
        assert_eq!(&gn[..2], &[0.0, 0.0]);
    }

    fn four_blocks(g: &mut Graph<f64>, seed: u64) -> BatchOutputs {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut block = |g: &mut Graph<f64>, leaf: bool| {
            let v: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tns = t(&[4, 3], &v);
            if leaf {
                g.leaf(tns)
            } else {
                g.constant(tns)
            }
        };
        BatchOutputs {
            student_nat: Some(block(g, true)),
            student_adv: Some(block(g, true)),
            teacher_nat: Some(block(g, false)),
            teacher_adv: Some(block(g, false)),
            clean_teacher_nat: Some(block(g, false)),
            labels: vec![0, 2, 1, 2],
        }
    }

    #[test]
    fn trd_of_teacher_against_itself_is_zero() {
        let mut g = Graph::new();
        let b = four_blocks(&mut g, 1);
        let same = BatchOutputs {
            student_nat: b.teacher_nat,
            student_adv: b.teacher_adv,
            ..b.clone()
        };
        let l = trd_loss(&mut g, &same, 1.0).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn trd_single_example_is_huber_of_psis() {
        let mut g = Graph::new();
        let sn = g.leaf(t(&[1, 3], &[0.3, -0.2, 0.5]));
        let sa = g.leaf(t(&[1, 3], &[-0.6, 0.9, 0.1]));
        let tn = g.constant(t(&[1, 3], &[1.5, -0.7, 0.2]));
        let ta = g.constant(t(&[1, 3], &[0.4, 0.6, -1.1]));
        let b = BatchOutputs {
            student_nat: Some(sn),
            student_adv: Some(sa),
            teacher_nat: Some(tn),
            teacher_adv: Some(ta),
            clean_teacher_nat: None,
            labels: vec![0],
        };
        let l = trd_loss(&mut g, &b, 1.0).unwrap();
        let pv = |id| softmax_values(g.value(id), 1.0).into_data();
        let pt = psi(&pv(tn), &pv(ta), 0).unwrap();
        let ps = psi(&pv(sn), &pv(sa), 0).unwrap();
        assert!((scalar(&g, l) - huber(pt, ps, 1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn trd_student_gradient_matches_finite_differences() {
        let sa = t(&[2, 3], &[-0.6, 0.9, 0.1, 0.2, 0.3, -0.8]);
        let tn = t(&[2, 3], &[1.5, -0.7, 0.2, 0.0, 1.0, -1.0]);
        let ta = t(&[2, 3], &[0.4, 0.6, -1.1, -0.3, 0.1, 0.9]);
        let x = t(&[2, 3], &[0.3, -0.2, 0.5, 1.1, -0.4, 0.0]);
        // psi ignores the label logit, so mix coordinates to avoid exact zeros.
        let mix = t(&[3, 3], &[0.9, -0.3, 0.4, 0.2, 1.1, -0.5, -0.6, 0.7, 0.8]);
        let err = grad_check(
            |g, u| {
                let m = g.constant(mix.clone());
                let sn = g.matmul(u, m)?;
                let b = BatchOutputs {
                    student_nat: Some(sn),
                    student_adv: Some(g.constant(sa.clone())),
                    teacher_nat: Some(g.constant(tn.clone())),
                    teacher_adv: Some(g.constant(ta.clone())),
                    clean_teacher_nat: None,
                    labels: vec![0, 2],
                };
                trd_loss(g, &b, 0.05).map_err(|e| match e {
                    LossError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn mmard_alpha_zero_is_pure_kl() {
        let mut g = Graph::new();
        let b = four_blocks(&mut g, 2);
        let spec = MethodSpec::new(Method::Mmard).with_alpha(0.0);
        let outer = outer_loss(&mut g, &spec, &b).unwrap();
        let kl = kl_div(&mut g, b.teacher_adv.unwrap(), b.student_adv.unwrap(), 1.0).unwrap();
        assert_eq!(scalar(&g, outer).to_bits(), scalar(&g, kl).to_bits());
    }

    #[test]
    fn mmard_inner_equals_its_distillation_term() {
        let mut g = Graph::new();
        let b = four_blocks(&mut g, 3);
        let spec = MethodSpec::new(Method::Mmard).with_alpha(0.0);
        let inner = inner_objective(&mut g, &spec, &b).unwrap();
        let outer = outer_loss(&mut g, &spec, &b).unwrap();
        assert_eq!(scalar(&g, inner).to_bits(), scalar(&g, outer).to_bits());
    }

    #[test]
    fn sat_outer_is_ce_on_adversarial() {
        let mut g = Graph::new();
        let b = four_blocks(&mut g, 4);
        let outer = outer_loss(&mut g, &MethodSpec::new(Method::Sat), &b).unwrap();
        let ce = cross_entropy(&mut g, b.student_adv.unwrap(), &b.labels).unwrap();
        assert_eq!(scalar(&g, outer), scalar(&g, ce));
    }

    #[test]
    fn ard_inner_is_ce_on_adversarial() {
        let mut g = Graph::new();
        let b = four_blocks(&mut g, 5);
        let inner = inner_objective(&mut g, &MethodSpec::new(Method::Ard), &b).unwrap();
        let ce = cross_entropy(&mut g, b.student_adv.unwrap(), &b.labels).unwrap();
        assert_eq!(scalar(&g, inner), scalar(&g, ce));
    }

    #[test]
    fn rslad_half_is_mean_of_terms() {
        let mut g = Graph::new();
        let b = four_blocks(&mut g, 6);
        let spec = MethodSpec::new(Method::Rslad).with_alpha(0.5);
        let outer = outer_loss(&mut g, &spec, &b).unwrap();
        let tn = b.teacher_nat.unwrap();
        let k1 = kl_div(&mut g, tn, b.student_nat.unwrap(), 1.0).unwrap();
        let k2 = kl_div(&mut g, tn, b.student_adv.unwrap(), 1.0).unwrap();
        let want = 0.5 * (scalar(&g, k1) + scalar(&g, k2));
        assert!((scalar(&g, outer) - want).abs() < 1e-15);
    }

    #[test]
    fn trades_inner_at_natural_point_is_zero() {
        let mut g = Graph::new();
        let z = g.leaf(t(&[2, 3], &[0.1, 0.2, 0.3, -1.0, 2.0, 0.0]));
        let b = BatchOutputs {
            student_nat: Some(z),
            student_adv: Some(z),
            labels: vec![0, 1],
            ..Default::default()
        };
        let v = inner_objective(&mut g, &MethodSpec::new(Method::Trades), &b).unwrap();
        assert!(scalar(&g, v).abs() <= 1e-12);
    }

    #[test]
    fn missing_block_names_method_and_block() {
        let mut g = Graph::new();
        let mut b = four_blocks(&mut g, 7);
        b.clean_teacher_nat = None;
        let err = outer_loss(&mut g, &MethodSpec::new(Method::Mtard), &b).unwrap_err();
        assert_eq!(err.to_string(), "mtard: missing block T_nat(x)");
        let b2 = BatchOutputs {
            student_adv: b.student_adv,
            labels: b.labels.clone(),
            ..Default::default()
        };
        let err = inner_objective(&mut g, &MethodSpec::new(Method::Rslad), &b2).unwrap_err();
        assert_eq!(err.to_string(), "rslad: missing block T(x)");
    }

    #[test]
    fn every_row_is_finite_both_ways() {
        for m in Method::ALL {
            let mut g = Graph::new();
            let b = four_blocks(&mut g, 8);
            let spec = MethodSpec::new(m);
            let o = outer_loss(&mut g, &spec, &b).unwrap();
            let i = inner_objective(&mut g, &spec, &b).unwrap();
            assert!(scalar(&g, o).is_finite() && scalar(&g, i).is_finite(), "{m}");
        }
    }

    #[test]
    fn inner_override_switches_objective() {
        let mut g = Graph::new();
        let b = four_blocks(&mut g, 9);
        let plain = MethodSpec::new(Method::Ard);
        let over = MethodSpec::new(Method::Ard).with_inner(Method::Mmard);
        let a = inner_objective(&mut g, &plain, &b).unwrap();
        let c = inner_objective(&mut g, &over, &b).unwrap();
        let m = inner_objective(&mut g, &MethodSpec::new(Method::Mmard), &b).unwrap();
        assert_ne!(scalar(&g, a), scalar(&g, c));
        assert_eq!(scalar(&g, c), scalar(&g, m));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nature".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn binary_psi_is_constant(a in 0.001f64..0.999, b in 0.001f64..0.999, label in 0usize..2) {
            // With two classes every pred - y is a multiple of (-1, 1).
            let v = psi(&[a, 1.0 - a], &[b, 1.0 - b], label).unwrap();
            prop_assert!((v - 1.0).abs() < 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(v in prop::collection::vec(-8.0f64..8.0, 12), tau in 0.5f64..4.0) {
            let mut g = Graph::new();
            let r = g.constant(t(&[2, 3], &v[..6]));
            let s = g.leaf(t(&[2, 3], &v[6..]));
            let kl = kl_div(&mut g, r, s, tau).unwrap();
            prop_assert!(scalar(&g, kl) >= -1e-12);
        }

        #[test]
        fn normalized_dot_is_scale_invariant(
            a in prop::collection::vec(-1.0f64..1.0, 4),
            b in prop::collection::vec(-1.0f64..1.0, 4),
            s in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            prop_assume!(b.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let c = normalized_dot(&a, &b);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
            let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
            prop_assert!((normalized_dot(&scaled, &b) - c).abs() < 1e-12);
        }
    }
}
