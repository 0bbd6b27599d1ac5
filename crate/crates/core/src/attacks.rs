//! L∞ attacks: projection, FGSM, PGD with random start, and the CW margin attack.
//!
//! Every attack ascends the batch-mean objective with signed gradient steps
//! (`sign(0) = 0`). Model parameters and all reference distributions enter the
//! graph as constants, so only the perturbed input receives gradient.

use rand::Rng;
use thiserror::Error;

use crate::losses::{self, BatchOutputs, LossError, Method, MethodSpec};
use crate::models::{Model, ModelError};
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("invalid attack spec: {0}")]
    InvalidSpec(String),
    #[error("objective {objective} requires a {model} model")]
    MissingModel {
        objective: String,
        model: &'static str,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    Cw,
}

/// Quantity the attack ascends.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective<T = f64> {
    /// Cross entropy of the attacked model.
    Ce,
    /// `KL(f(x) || f(x'))` of the attacked model against its own natural prediction.
    TradesKl,
    /// `min(max_{j≠y} z_j − z_y, 0)`.
    CwMargin,
    /// A method's inner maximization objective.
    Inner(MethodSpec<T>),
}

impl<T: Scalar> Objective<T> {
    fn describe(&self) -> String {
        match self {
            Objective::Ce => "ce".into(),
            Objective::TradesKl => "trades_kl".into(),
            Objective::CwMargin => "cw_margin".into(),
            Objective::Inner(spec) => format!("{} inner", spec.inner_method()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec<T = f64> {
    pub family: AttackFamily,
    pub eps: T,
    pub step: T,
    pub steps: usize,
    pub random_start: T,
    pub objective: Objective<T>,
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> AttackSpec<T> {
    pub fn pgd(eps: T, step: T, steps: usize, random_start: T, objective: Objective<T>) -> Self {
        Self {
            family: AttackFamily::Pgd,
            eps,
            step,
            steps,
            random_start,
            objective,
            lo: T::zero(),
            hi: T::one(),
        }
    }

    /// Single full-radius step, no random start.
    pub fn fgsm(eps: T, objective: Objective<T>) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            step: eps,
            steps: 1,
            random_start: T::zero(),
            ..Self::pgd(eps, eps, 1, T::zero(), objective)
        }
    }

    pub fn cw(eps: T, step: T, steps: usize, random_start: T) -> Self {
        Self {
            family: AttackFamily::Cw,
            ..Self::pgd(eps, step, steps, random_start, Objective::CwMargin)
        }
    }

    pub fn with_range(mut self, lo: T, hi: T) -> Self {
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::InvalidSpec(m));
        if !(self.eps >= T::zero()) || !self.eps.is_finite() {
            return bad(format!("eps must be >= 0, got {}", self.eps));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.step > T::zero()) && self.eps > T::zero() {
            return bad(format!("step must be > 0, got {}", self.step));
        }
        if !(self.random_start >= T::zero()) {
            return bad(format!("random start must be >= 0, got {}", self.random_start));
        }
        if !(self.lo < self.hi) {
            return bad(format!("clamp range [{}, {}] is empty", self.lo, self.hi));
        }
        if let Objective::Inner(spec) = &self.objective {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Models an attack may consult. `teacher` is the robust teacher; the clean
/// teacher is never needed by an inner objective.
#[derive(Clone, Copy, Debug)]
pub struct AttackModels<'a, T = f64> {
    pub attacked: &'a Model<T>,
    pub teacher: Option<&'a Model<T>>,
}

impl<'a, T> AttackModels<'a, T> {
    pub fn new(attacked: &'a Model<T>) -> Self {
        Self {
            attacked,
            teacher: None,
        }
    }

    pub fn with_teacher(mut self, teacher: &'a Model<T>) -> Self {
        self.teacher = Some(teacher);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch<T = f64> {
    pub x: Tensor<T>,
    pub x_adv: Tensor<T>,
    /// Objective value at the start of each step. For the margin objective this
    /// is the uncapped mean margin.
    pub trace: Vec<T>,
}

/// Componentwise clip of `x_cand` into `[x − eps, x + eps] ∩ [lo, hi]`.
pub fn project_linf<T: Scalar>(x_cand: &Tensor<T>, x: &Tensor<T>, eps: T, lo: T, hi: T) -> Result<Tensor<T>, AttackError> {
    if x_cand.shape() != x.shape() {
        return Err(AttackError::Shape(format!(
            "candidate {:?} vs input {:?}",
            x_cand.shape(),
            x.shape()
        )));
    }
    let data = x_cand
        .data()
        .iter()
        .zip(x.data())
        .map(|(&c, &o)| c.max(o - eps).min(o + eps).max(lo).min(hi))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = T::one();
    }
    Tensor::from_parts(vec![labels.len(), classes], data)
}

/// Mean over the batch of `max_{j≠y} z_j − z_y`, shape `[1]`, uncapped.
pub fn margin_node<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId, AttackError> {
    let shape = g.try_value(logits)?.shape().to_vec();
    let [n, c] = shape[..] else {
        return Err(AttackError::Shape(format!("logits {shape:?}")));
    };
    if labels.len() != n {
        return Err(AttackError::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(LossError::LabelOutOfRange { label, classes: c }.into());
    }
    let y = one_hot::<T>(labels, c);
    let mask = y.map(|v| v * T::lit(-1e30));
    let y = g.constant(y);
    let mask = g.constant(mask);
    let picked = g.mul(y, logits)?;
    let zy = g.sum_rows(picked)?;
    let others = g.add(logits, mask)?;
    let best_other = g.row_max(others)?;
    let m = g.sub(best_other, zy)?;
    Ok(g.mean(m)?)
}

/// Values fixed for the whole attack.
struct References<T> {
    student_nat: Option<Tensor<T>>,
    teacher_nat: Option<Tensor<T>>,
}

fn references<T: Scalar>(
    models: &AttackModels<'_, T>,
    objective: &Objective<T>,
    x: &Tensor<T>,
) -> Result<References<T>, AttackError> {
    let mut refs = References {
        student_nat: None,
        teacher_nat: None,
    };
    let teacher = |model: &'static str| {
        models.teacher.ok_or_else(|| AttackError::MissingModel {
            objective: objective.describe(),
            model,
        })
    };
    match objective {
        Objective::TradesKl => refs.student_nat = Some(models.attacked.logits(x)?),
        Objective::Inner(spec) => match spec.inner_method() {
            Method::Trades => refs.student_nat = Some(models.attacked.logits(x)?),
            Method::Rslad => refs.teacher_nat = Some(teacher("teacher")?.logits(x)?),
            Method::Mmard => {
                teacher("teacher")?;
            }
            _ => {}
        },
        _ => {}
    }
    Ok(refs)
}

/// Objective value and gradient w.r.t. `x_adv`.
fn objective_grad<T: Scalar>(
    models: &AttackModels<'_, T>,
    objective: &Objective<T>,
    refs: &References<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
) -> Result<(T, Tensor<T>), AttackError> {
    let mut g = Graph::new();
    let xa = g.leaf(x_adv.clone());
    let params = models.attacked.bind(&mut g, false);
    let sa = models.attacked.forward(&mut g, &params, xa)?;
    let (root, report) = match objective {
        Objective::Ce => {
            let l = losses::cross_entropy(&mut g, sa, y)?;
            (l, l)
        }
        Objective::TradesKl => {
            let sn = g.constant(refs.student_nat.clone().expect("computed above"));
            let l = losses::kl_div(&mut g, sn, sa, T::one())?;
            (l, l)
        }
        Objective::CwMargin => {
            let m = margin_node(&mut g, sa, y)?;
            let r = g.relu(m)?;
            let capped = g.sub(m, r)?;
            (capped, m)
        }
        Objective::Inner(spec) => {
            let mut batch = BatchOutputs {
                student_adv: Some(sa),
                labels: y.to_vec(),
                ..Default::default()
            };
            batch.student_nat = refs.student_nat.clone().map(|t| g.constant(t));
            batch.teacher_nat = refs.teacher_nat.clone().map(|t| g.constant(t));
            if spec.inner_method() == Method::Mmard {
                let teacher = models.teacher.expect("checked in references");
                let tp = teacher.bind(&mut g, false);
                batch.teacher_adv = Some(teacher.forward(&mut g, &tp, xa)?);
            }
            let l = losses::inner_objective(&mut g, spec, &batch)?;
            (l, l)
        }
    };
    let value = g.value(report).data()[0];
    let grad = g
        .backward(root)?
        .take(xa)
        .unwrap_or_else(|| Tensor::zeros(x_adv.shape().to_vec()));
    Ok((value, grad))
}

fn check_inputs<T: Scalar>(models: &AttackModels<'_, T>, x: &Tensor<T>, y: &[usize]) -> Result<(), AttackError> {
    let input = models.attacked.arch().input_shape();
    if x.rank() != input.len() + 1 || x.shape()[1..] != input[..] {
        return Err(ModelError::InputShape {
            expected: input,
            got: x.shape().to_vec(),
        }
        .into());
    }
    if x.shape()[0] != y.len() {
        return Err(AttackError::Shape(format!(
            "{} labels for a batch of {}",
            y.len(),
            x.shape()[0]
        )));
    }
    Ok(())
}

/// Shared signed-ascent loop. `x_adv` is the already projected starting point.
fn ascend<T: Scalar>(
    models: &AttackModels<'_, T>,
    spec: &AttackSpec<T>,
    objective: &Objective<T>,
    x: &Tensor<T>,
    y: &[usize],
    mut x_adv: Tensor<T>,
) -> Result<AdversarialBatch<T>, AttackError> {
    let refs = references(models, objective, x)?;
    let mut trace = Vec::with_capacity(spec.steps);
    for _ in 0..spec.steps {
        let (value, grad) = objective_grad(models, objective, &refs, &x_adv, y)?;
        trace.push(value);
        let cand = x_adv
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &d)| v + spec.step * d.sign0())
            .collect();
        let cand = Tensor::from_parts(x.shape().to_vec(), cand);
        x_adv = project_linf(&cand, x, spec.eps, spec.lo, spec.hi)?;
    }
    Ok(AdversarialBatch {
        x: x.clone(),
        x_adv,
        trace,
    })
}

fn random_start<T: Scalar, R: Rng + ?Sized>(
    spec: &AttackSpec<T>,
    x: &Tensor<T>,
    rng: &mut R,
) -> Result<Tensor<T>, AttackError> {
    let r0 = spec.random_start.as_f64();
    let start = if r0 > 0.0 {
        let data = x.data().iter().map(|&v| v + T::lit(rng.random_range(-r0..=r0))).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    } else {
        x.clone()
    };
    project_linf(&start, x, spec.eps, spec.lo, spec.hi)
}

fn expect_family<T: Scalar>(spec: &AttackSpec<T>, family: AttackFamily) -> Result<(), AttackError> {
    spec.validate()?;
    if spec.family != family {
        return Err(AttackError::InvalidSpec(format!(
            "expected a {family:?} spec, got {:?}",
            spec.family
        )));
    }
    Ok(())
}

/// Multi-step PGD from a uniformly perturbed start.
pub fn pgd_attack<T: Scalar, R: Rng + ?Sized>(
    models: &AttackModels<'_, T>,
    spec: &AttackSpec<T>,
    x: &Tensor<T>,
    y: &[usize],
    rng: &mut R,
) -> Result<AdversarialBatch<T>, AttackError> {
    expect_family(spec, AttackFamily::Pgd)?;
    check_inputs(models, x, y)?;
    let start = random_start(spec, x, rng)?;
    ascend(models, spec, &spec.objective, x, y, start)
}

pub fn fgsm_attack<T: Scalar>(
    models: &AttackModels<'_, T>,
    spec: &AttackSpec<T>,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<AdversarialBatch<T>, AttackError> {
    expect_family(spec, AttackFamily::Fgsm)?;
    check_inputs(models, x, y)?;
    let one_step = AttackSpec {
        step: spec.eps,
        steps: 1,
        ..spec.clone()
    };
    let start = project_linf(x, x, spec.eps, spec.lo, spec.hi)?;
    ascend(models, &one_step, &spec.objective, x, y, start)
}

/// PGD on the capped logit margin; the configured objective is ignored.
pub fn cw_linf_attack<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    spec: &AttackSpec<T>,
    x: &Tensor<T>,
    y: &[usize],
    rng: &mut R,
) -> Result<AdversarialBatch<T>, AttackError> {
    expect_family(spec, AttackFamily::Cw)?;
    let models = AttackModels::new(model);
    check_inputs(&models, x, y)?;
    let start = random_start(spec, x, rng)?;
    ascend(&models, spec, &Objective::CwMargin, x, y, start)
}

/// Dispatches on `spec.family`.
pub fn attack<T: Scalar, R: Rng + ?Sized>(
    models: &AttackModels<'_, T>,
    spec: &AttackSpec<T>,
    x: &Tensor<T>,
    y: &[usize],
    rng: &mut R,
) -> Result<AdversarialBatch<T>, AttackError> {
    match spec.family {
        AttackFamily::Fgsm => fgsm_attack(models, spec, x, y),
        AttackFamily::Pgd => pgd_attack(models, spec, x, y, rng),
        AttackFamily::Cw => cw_linf_attack(models.attacked, spec, x, y, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ArchSpec, Param};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    /// Linear 2-class model with logits `x · w + b`.
    fn linear(w: [[f64; 2]; 2], b: [f64; 2]) -> Model {
        let params = vec![
            Param {
                name: "fc0.weight".into(),
                value: t(&[2, 2], &[w[0][0], w[0][1], w[1][0], w[1][1]]),
            },
            Param {
                name: "fc0.bias".into(),
                value: t(&[2], &b),
            },
        ];
        Model::from_params(ArchSpec::mlp(&[2, 2]), params).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn projection_examples() {
        let x = t(&[3], &[0.5, 0.02, 0.4]);
        let c = t(&[3], &[0.9, -0.2, 0.45]);
        let p = project_linf(&c, &x, 0.1, 0.0, 1.0).unwrap();
        assert_eq!(p.data()[0], 0.5 + 0.1);
        assert_eq!(p.data()[1], 0.0);
        assert_eq!(p.data()[2], 0.45);
        let again = project_linf(&p, &x, 0.1, 0.0, 1.0).unwrap();
        assert!(again.bit_eq(&p));
        assert!(project_linf(&t(&[2], &[0.0, 0.0]), &x, 0.1, 0.0, 1.0).is_err());
    }

    #[test]
    fn zero_radius_is_identity() {
        let m: Model = build_model(&ArchSpec::mlp(&[2, 8, 3]), 4).unwrap();
        let x = t(&[2, 2], &[0.3, 0.6, 0.9, 0.1]);
        let y = [0, 2];
        let models = AttackModels::new(&m);
        let pgd = AttackSpec::pgd(0.0, 0.01, 5, 0.001, Objective::Ce);
        assert!(pgd_attack(&models, &pgd, &x, &y, &mut rng()).unwrap().x_adv.bit_eq(&x));
        let cw = AttackSpec::cw(0.0, 0.01, 5, 0.001);
        assert!(cw_linf_attack(&m, &cw, &x, &y, &mut rng()).unwrap().x_adv.bit_eq(&x));
    }

    #[test]
    fn fgsm_equals_single_step_pgd() {
        let m: Model = build_model(&ArchSpec::mlp(&[2, 8, 3]), 5).unwrap();
        let x = t(&[3, 2], &[0.3, 0.6, 0.9, 0.1, 0.5, 0.5]);
        let y = [0, 2, 1];
        let models = AttackModels::new(&m);
        for obj in [Objective::Ce, Objective::TradesKl, Objective::CwMargin] {
            let f = fgsm_attack(&models, &AttackSpec::fgsm(0.07, obj.clone()), &x, &y).unwrap();
            let p = pgd_attack(&models, &AttackSpec::pgd(0.07, 0.07, 1, 0.0, obj), &x, &y, &mut rng()).unwrap();
            assert!(f.x_adv.bit_eq(&p.x_adv));
        }
    }

    #[test]
    fn linear_ce_step_follows_analytic_sign() {
        // d CE / d x = (p - y) · Wᵀ; for y = 0 the sign per coordinate is sign(w_j1 - w_j0).
        let m = linear([[1.0, -2.0], [0.5, 0.5]], [0.0, 0.0]);
        let x = t(&[1, 2], &[0.5, 0.5]);
        let spec = AttackSpec::pgd(0.1, 0.03, 1, 0.0, Objective::Ce);
        let out = pgd_attack(&AttackModels::new(&m), &spec, &x, &[0], &mut rng()).unwrap();
        assert_eq!(out.x_adv.data(), &[0.5 - 0.03, 0.5]);
    }

    #[test]
    fn linear_cw_step_follows_margin_gradient() {
        // margin = z1 - z0, gradient w·1 - w·0 per coordinate.
        let m = linear([[2.0, 1.0], [-1.0, 1.0]], [1.0, 0.0]);
        let x = t(&[1, 2], &[0.5, 0.5]);
        let spec = AttackSpec::cw(0.1, 0.04, 1, 0.0);
        let out = cw_linf_attack(&m, &spec, &x, &[0], &mut rng()).unwrap();
        assert_eq!(out.x_adv.data(), &[0.5 - 0.04, 0.5 + 0.04]);
    }

    #[test]
    fn constant_logits_leave_input_in_place() {
        let m = linear([[0.0, 0.0], [0.0, 0.0]], [1.0, 1.0]);
        let x = t(&[1, 2], &[0.2, 0.8]);
        let out = fgsm_attack(&AttackModels::new(&m), &AttackSpec::fgsm(0.1, Objective::Ce), &x, &[1]).unwrap();
        assert!(out.x_adv.bit_eq(&x));
    }

    #[test]
    fn misclassified_point_keeps_invariants_under_cw() {
        let m = linear([[1.0, -1.0], [1.0, -1.0]], [0.0, 0.0]);
        let x = t(&[1, 2], &[0.5, 0.5]);
        let spec = AttackSpec::cw(0.1, 0.02, 5, 0.001);
        let out = cw_linf_attack(&m, &spec, &x, &[1], &mut rng()).unwrap();
        assert!(out.trace.iter().all(|&v| v > 0.0));
        assert!(out.x_adv.max_abs_diff(&x).unwrap() <= 0.1 + 1e-12);
    }

    #[test]
    fn inner_objective_needs_teacher() {
        let m: Model = build_model(&ArchSpec::mlp(&[2, 4, 2]), 1).unwrap();
        let x = t(&[1, 2], &[0.5, 0.5]);
        for method in [Method::Rslad, Method::Mmard] {
            let spec = AttackSpec::pgd(0.1, 0.02, 2, 0.0, Objective::Inner(MethodSpec::new(method)));
            let err = pgd_attack(&AttackModels::new(&m), &spec, &x, &[0], &mut rng()).unwrap_err();
            assert!(matches!(err, AttackError::MissingModel { .. }), "{err}");
        }
    }

    #[test]
    fn mmard_and_rslad_inner_paths_differ() {
        let s: Model = build_model(&ArchSpec::mlp(&[2, 8, 3]), 1).unwrap();
        let te: Model = build_model(&ArchSpec::mlp(&[2, 8, 3]), 2).unwrap().frozen();
        let xs: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).fract()).collect();
        let x = t(&[32, 2], &xs);
        let y: Vec<usize> = (0..32).map(|i| i % 3).collect();
        let models = AttackModels::new(&s).with_teacher(&te);
        let run = |m| {
            let spec = AttackSpec::pgd(0.3, 0.075, 10, 0.001, Objective::Inner(MethodSpec::new(m)));
            pgd_attack(&models, &spec, &x, &y, &mut rng()).unwrap()
        };
        let (a, b) = (run(Method::Mmard), run(Method::Rslad));
        assert_ne!(a.trace, b.trace);
        assert!(!a.x_adv.bit_eq(&b.x_adv));
    }

    #[test]
    fn family_mismatch_rejected() {
        let m: Model = build_model(&ArchSpec::mlp(&[2, 4, 2]), 1).unwrap();
        let x = t(&[1, 2], &[0.5, 0.5]);
        let spec = AttackSpec::fgsm(0.1, Objective::Ce);
        assert!(pgd_attack(&AttackModels::new(&m), &spec, &x, &[0], &mut rng()).is_err());
        let bad = AttackSpec::pgd(0.1, 0.02, 0, 0.0, Objective::<f64>::Ce);
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn outputs_stay_in_ball_and_range(
            seed in 0u64..1000,
            eps in 0.0f64..0.4,
            steps in 1usize..6,
            xs in prop::collection::vec(0.0f64..1.0, 6),
            family in 0usize..3,
        ) {
            let m: Model = build_model(&ArchSpec::mlp(&[2, 6, 3]), seed).unwrap();
            let before = m.checksum();
            let x = t(&[3, 2], &xs);
            let y = [0, 1, 2];
            let spec = match family {
                0 => AttackSpec::fgsm(eps, Objective::Ce),
                1 => AttackSpec::pgd(eps, eps / 4.0 + 1e-3, steps, 0.001, Objective::TradesKl),
                _ => AttackSpec::cw(eps, eps / 4.0 + 1e-3, steps, 0.001),
            };
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let out = attack(&AttackModels::new(&m), &spec, &x, &y, &mut r).unwrap();
            prop_assert!(out.x_adv.max_abs_diff(&x).unwrap() <= eps + 1e-12);
            prop_assert!(out.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(m.checksum(), before);

            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let again = attack(&AttackModels::new(&m), &spec, &x, &y, &mut r2).unwrap();
            prop_assert!(again.x_adv.bit_eq(&out.x_adv));
        }
    }
}
