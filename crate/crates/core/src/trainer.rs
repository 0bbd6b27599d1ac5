//! Teacher pretraining and adversarial robustness distillation.
//!
//! Every run draws from one seed through independent ChaCha streams: model
//! initialization, batch order, training attacks and evaluation attacks.
//! Adversarial inputs are plain tensors by the time the outer step runs, so
//! no gradient flows through their construction.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attacks::{pgd_attack, AttackError, AttackModels, AttackSpec, Objective};
use crate::datasets::DatasetBundle;
use crate::evalbench::evaluate_tensor;
use crate::losses::{self, BatchOutputs, LossError, Method, MethodSpec};
use crate::models::{build_model, save_checkpoint, ArchSpec, CheckpointError, Model, ModelError};
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, Tensor, TensorError};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_ATTACK: u64 = 2;
/// Evaluation streams start here; see `evalbench`.
pub(crate) const STREAM_EVAL: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{method} needs a {which} teacher")]
    MissingTeacher { method: Method, which: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure at epoch {epoch}, batch {batch}: {detail}")]
    Numeric {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("run record has no evaluated epoch")]
    EmptyRecord,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed run record: {0}")]
    Record(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn non_finite(e: &TensorError) -> bool {
    matches!(
        e,
        TensorError::NonFinite { .. } | TensorError::NonFiniteOutput { .. } | TensorError::NonFiniteGradient(_)
    )
}

impl TrainError {
    fn is_numeric(&self) -> bool {
        match self {
            TrainError::Tensor(e)
            | TrainError::Loss(LossError::Tensor(e))
            | TrainError::Attack(AttackError::Tensor(e))
            | TrainError::Attack(AttackError::Loss(LossError::Tensor(e)))
            | TrainError::Model(ModelError::Tensor(e))
            | TrainError::Attack(AttackError::Model(ModelError::Tensor(e))) => non_finite(e),
            _ => false,
        }
    }

    fn at(self, epoch: usize, batch: usize) -> Self {
        if self.is_numeric() {
            TrainError::Numeric {
                epoch,
                batch,
                detail: self.to_string(),
            }
        } else {
            self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Cosine,
    /// Multiply by `factor` at each milestone epoch (0-based, applies from that epoch on).
    Step { milestones: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    /// Divide by 10 at 75% and 90% of training.
    pub fn natural(epochs: usize) -> Self {
        LrSchedule::Step {
            milestones: vec![(epochs * 3).div_ceil(4), (epochs * 9).div_ceil(10)],
            factor: 0.1,
        }
    }

    pub fn lr<T: Scalar>(&self, epoch: usize, total: usize, lr0: T) -> Result<T, TrainError> {
        match self {
            LrSchedule::Cosine => cosine_lr(epoch, total, lr0),
            LrSchedule::Step { milestones, factor } => {
                if epoch >= total {
                    return Err(TrainError::Config(format!("epoch {epoch} outside 0..{total}")));
                }
                let hits = milestones.iter().filter(|&&m| epoch >= m).count();
                Ok(lr0 * T::lit(factor.powi(hits as i32)))
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Cosine => f.write_str("cosine"),
            LrSchedule::Step { milestones, factor } => {
                let ms: Vec<String> = milestones.iter().map(|m| m.to_string()).collect();
                write!(f, "step:{}:{factor}", ms.join("/"))
            }
        }
    }
}

impl FromStr for LrSchedule {
    type Err = TrainError;
    /// `cosine` or `step:<m1>/<m2>/...:<factor>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TrainError::Config(format!("unrecognized schedule {s:?}"));
        if s == "cosine" {
            return Ok(LrSchedule::Cosine);
        }
        let rest = s.strip_prefix("step:").ok_or_else(bad)?;
        let (ms, factor) = rest.rsplit_once(':').ok_or_else(bad)?;
        let milestones = if ms.is_empty() {
            Vec::new()
        } else {
            ms.split('/')
                .map(|m| m.parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()?
        };
        let factor: f64 = factor.parse().map_err(|_| bad())?;
        if !(factor > 0.0) {
            return Err(bad());
        }
        Ok(LrSchedule::Step { milestones, factor })
    }
}

/// `lr0 · 0.5 · (1 + cos(π · epoch / total))` for `0 <= epoch < total`.
pub fn cosine_lr<T: Scalar>(epoch: usize, total: usize, lr0: T) -> Result<T, TrainError> {
    if epoch >= total {
        return Err(TrainError::Config(format!("epoch {epoch} outside 0..{total}")));
    }
    let frac = T::lit(epoch as f64 / total as f64);
    Ok(lr0 * T::lit(0.5) * (T::one() + (T::lit(std::f64::consts::PI) * frac).cos()))
}

/// Classical momentum with weight decay folded into the gradient:
/// `g = grad + wd·p; v = m·v + g; p = p − lr·v`.
pub fn sgd_update<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Shape(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(TrainError::Shape(format!(
                "param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let d = gv + weight_decay * *pv;
            *vv = momentum * *vv + d;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherMode {
    Natural,
    Sat,
    Trades,
}

impl FromStr for TeacherMode {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "natural" => Ok(TeacherMode::Natural),
            "sat" => Ok(TeacherMode::Sat),
            "trades" => Ok(TeacherMode::Trades),
            _ => Err(TrainError::Config(format!("invalid mode {s:?} (natural, sat or trades)"))),
        }
    }
}

impl fmt::Display for TeacherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherMode::Natural => "natural",
            TeacherMode::Sat => "sat",
            TeacherMode::Trades => "trades",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T = f64> {
    pub arch: ArchSpec,
    /// Objective for `distill`; `train_teacher` reads only `lambda`.
    pub method: MethodSpec<T>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    pub schedule: LrSchedule,
    /// Training attack; its objective is replaced by the method's inner objective.
    pub attack: AttackSpec<T>,
    /// Per-epoch robustness check used for checkpoint selection.
    pub eval_attack: AttackSpec<T>,
    pub seed: u64,
    pub eval_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl<T: Scalar> TrainConfig<T> {
    /// Small-scale defaults: 60 epochs, batch 64, lr 0.1 cosine, momentum 0.9,
    /// weight decay 2e-4, ε = margin/4, PGD-10 with step ε/4 for training and
    /// PGD-20 on the TRADES KL objective for evaluation.
    pub fn desk(arch: ArchSpec, method: Method, margin: f64) -> Self {
        let eps = T::lit(0.25 * margin);
        let step = eps / T::lit(4.0);
        let r0 = T::lit(0.001);
        Self {
            arch,
            method: MethodSpec::new(method),
            epochs: 60,
            batch: 64,
            lr: T::lit(0.1),
            momentum: T::lit(0.9),
            weight_decay: T::lit(2e-4),
            schedule: LrSchedule::Cosine,
            attack: AttackSpec::pgd(eps, step, 10, r0, Objective::Ce),
            eval_attack: AttackSpec::pgd(eps, step, 20, r0, Objective::TradesKl),
            seed: 0,
            eval_every: 1,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.lr > T::zero()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= T::zero()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        self.arch.validate()?;
        self.method.validate()?;
        self.attack.validate()?;
        self.eval_attack.validate()?;
        Ok(())
    }
}

/// One CSV row. Epochs are 1-based; unevaluated epochs have no accuracies and
/// natural training has no inner objective.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub outer_loss: f64,
    pub inner_obj: Option<f64>,
    pub clean_acc: Option<f64>,
    pub pgdt_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
}

const RUN_HEADER: [&str; 6] = ["epoch", "lr", "outer_loss", "inner_obj", "clean_acc", "pgdt_acc"];

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

impl RunRecord {
    /// Epoch with the highest PGD_T accuracy, earliest on ties.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for r in &self.rows {
            if let Some(acc) = r.pgdt_acc {
                if best.is_none_or(|(_, b)| acc > b) {
                    best = Some((r.epoch, acc));
                }
            }
        }
        best.map(|(e, _)| e)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(RUN_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                fmt_num(r.lr),
                fmt_num(r.outer_loss),
                fmt_opt(r.inner_obj),
                fmt_opt(r.clean_acc),
                fmt_opt(r.pgdt_acc),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| TrainError::Record(e.to_string()))?;
        if header.iter().ne(RUN_HEADER) {
            return Err(TrainError::Record(format!("unexpected header {header:?}")));
        }
        let num = |s: &str| -> Result<f64, TrainError> {
            s.parse().map_err(|_| TrainError::Record(format!("bad number {s:?}")))
        };
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| TrainError::Record(e.to_string()))?;
            rows.push(EpochRow {
                epoch: rec[0].parse().map_err(|_| TrainError::Record(format!("bad epoch {:?}", &rec[0])))?,
                lr: num(&rec[1])?,
                outer_loss: num(&rec[2])?,
                inner_obj: opt(&rec[3])?,
                clean_acc: opt(&rec[4])?,
                pgdt_acc: opt(&rec[5])?,
            });
        }
        Ok(RunRecord { rows })
    }
}

/// Checkpoint of the best PGD_T epoch among `checkpoints` (`(epoch, model)`).
pub fn select_best<'a, T>(record: &RunRecord, checkpoints: &'a [(usize, Model<T>)]) -> Result<&'a Model<T>, TrainError> {
    let epoch = record.best_epoch().ok_or(TrainError::EmptyRecord)?;
    checkpoints
        .iter()
        .find(|(e, _)| *e == epoch)
        .map(|(_, m)| m)
        .ok_or_else(|| TrainError::Record(format!("no checkpoint for epoch {epoch}")))
}

/// Teachers consulted by a distillation run. `robust` supplies `T(x)` and
/// `T(x')`; `clean` supplies `T_nat(x)` for MTARD.
#[derive(Clone, Copy, Debug, Default)]
pub struct Teachers<'a, T = f64> {
    pub robust: Option<&'a Model<T>>,
    pub clean: Option<&'a Model<T>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T = f64> {
    pub best: Model<T>,
    pub last: Model<T>,
    pub record: RunRecord,
}

/// What one outer step optimizes.
#[derive(Clone, Debug)]
enum StepKind<T> {
    Natural,
    Adversarial(MethodSpec<T>),
}

#[derive(Default)]
struct Needs {
    student_nat: bool,
    teacher_nat: bool,
    teacher_adv: bool,
    clean_nat: bool,
}

impl Needs {
    fn add(&mut self, m: Method, outer: bool) {
        match (m, outer) {
            (Method::Sat, _) | (Method::Ard | Method::Iad | Method::Mtard, false) => {}
            (Method::Trades, _) => self.student_nat = true,
            (Method::Ard, true) => {
                self.student_nat = true;
                self.teacher_nat = true;
            }
            (Method::Iad, true) => {
                self.student_nat = true;
                self.teacher_nat = true;
                self.teacher_adv = true;
            }
            (Method::Rslad, _) => {
                self.student_nat |= outer;
                self.teacher_nat = true;
            }
            (Method::Mtard, true) => {
                self.student_nat = true;
                self.teacher_adv = true;
                self.clean_nat = true;
            }
            (Method::Mmard, _) => {
                self.student_nat |= outer;
                self.teacher_nat |= outer;
                self.teacher_adv = true;
            }
        }
    }
}

pub(crate) struct StepResult<T> {
    pub outer: T,
    pub inner: Option<T>,
    pub grads: Vec<Tensor<T>>,
}

/// Loss and parameter gradients for one batch with `x_adv` held constant.
pub(crate) fn outer_step<T: Scalar>(
    student: &Model<T>,
    spec: &MethodSpec<T>,
    teachers: Teachers<'_, T>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
) -> Result<StepResult<T>, TrainError> {
    let mut needs = Needs::default();
    needs.add(spec.method, true);
    needs.add(spec.inner_method(), false);
    let robust = || {
        teachers.robust.ok_or(TrainError::MissingTeacher {
            method: spec.method,
            which: "robust",
        })
    };

    let mut g = Graph::new();
    let params = student.bind(&mut g, true);
    let mut batch = BatchOutputs {
        labels: y.to_vec(),
        ..Default::default()
    };
    let xa = g.constant(x_adv.clone());
    batch.student_adv = Some(student.forward(&mut g, &params, xa)?);
    if needs.student_nat {
        let xn = g.constant(x.clone());
        batch.student_nat = Some(student.forward(&mut g, &params, xn)?);
    }
    if needs.teacher_nat {
        batch.teacher_nat = Some(g.constant(robust()?.logits(x)?));
    }
    if needs.teacher_adv {
        batch.teacher_adv = Some(g.constant(robust()?.logits(x_adv)?));
    }
    if needs.clean_nat {
        let clean = teachers.clean.ok_or(TrainError::MissingTeacher {
            method: spec.method,
            which: "clean",
        })?;
        batch.clean_teacher_nat = Some(g.constant(clean.logits(x)?));
    }
    let inner = losses::inner_objective(&mut g, spec, &batch)?;
    let outer = losses::outer_loss(&mut g, spec, &batch)?;
    finish_step(&g, outer, Some(inner), &params)
}

fn natural_step<T: Scalar>(student: &Model<T>, x: &Tensor<T>, y: &[usize]) -> Result<StepResult<T>, TrainError> {
    let mut g = Graph::new();
    let params = student.bind(&mut g, true);
    let xn = g.constant(x.clone());
    let z = student.forward(&mut g, &params, xn)?;
    let loss = losses::cross_entropy(&mut g, z, y)?;
    finish_step(&g, loss, None, &params)
}

fn finish_step<T: Scalar>(
    g: &Graph<T>,
    outer: crate::tensorcore::NodeId,
    inner: Option<crate::tensorcore::NodeId>,
    params: &[crate::tensorcore::NodeId],
) -> Result<StepResult<T>, TrainError> {
    let mut grads = g.backward(outer)?;
    let grads = params
        .iter()
        .map(|&p| grads.take(p).expect("trainable parameter"))
        .collect();
    Ok(StepResult {
        outer: g.value(outer).data()[0],
        inner: inner.map(|i| g.value(i).data()[0]),
        grads,
    })
}

fn check_data<T: Scalar>(arch: &ArchSpec, data: &DatasetBundle, what: &str) -> Result<(), TrainError> {
    if arch.input_shape() != data.sample_shape() {
        return Err(TrainError::Shape(format!(
            "{what} expects inputs {:?}, data has {:?}",
            arch.input_shape(),
            data.sample_shape()
        )));
    }
    if arch.classes() != data.classes {
        return Err(TrainError::Shape(format!(
            "{what} has {} classes, data has {}",
            arch.classes(),
            data.classes
        )));
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), TrainError> {
    fs::write(path, contents).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run<T: Scalar>(
    cfg: &TrainConfig<T>,
    objective: StepKind<T>,
    teachers: Teachers<'_, T>,
    train: &DatasetBundle,
    test: &DatasetBundle,
) -> Result<TrainOutput<T>, TrainError> {
    cfg.validate()?;
    check_data::<T>(&cfg.arch, train, "student")?;
    check_data::<T>(&cfg.arch, test, "student")?;
    for (t, name) in [(teachers.robust, "robust teacher"), (teachers.clean, "clean teacher")] {
        if let Some(t) = t {
            check_data::<T>(t.arch(), train, name)?;
        }
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.clone(),
            source,
        })?;
    }

    let mut student: Model<T> = build_model(&cfg.arch, cfg.seed)?;
    let mut velocity: Vec<Tensor<T>> = student
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape().to_vec()))
        .collect();
    let stream = |s| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(s);
        r
    };
    let mut shuffle_rng = stream(STREAM_SHUFFLE);
    let mut attack_rng = stream(STREAM_ATTACK);
    let x_train: Tensor<T> = train.features.cast();
    let x_test: Tensor<T> = test.features.cast();
    let inner_attack = match &objective {
        StepKind::Natural => None,
        StepKind::Adversarial(spec) => Some(AttackSpec {
            objective: Objective::Inner(spec.clone()),
            ..cfg.attack.clone()
        }),
    };

    let mut record = RunRecord::default();
    let mut snapshots = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for e in 0..cfg.epochs {
        let epoch = e + 1;
        let lr = cfg.schedule.lr(e, cfg.epochs, cfg.lr)?;
        order.shuffle(&mut shuffle_rng);
        let (mut outer_sum, mut inner_sum) = (0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let step = (|| {
                let xb = x_train.select_rows(idx)?;
                let yb: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                let step = match (&objective, &inner_attack) {
                    (StepKind::Adversarial(spec), Some(attack)) => {
                        let mut models = AttackModels::new(&student);
                        models.teacher = teachers.robust;
                        let adv = pgd_attack(&models, attack, &xb, &yb, &mut attack_rng)?;
                        outer_step(&student, spec, teachers, &xb, &adv.x_adv, &yb)?
                    }
                    _ => natural_step(&student, &xb, &yb)?,
                };
                let mut values: Vec<Tensor<T>> = student.params().iter().map(|p| p.value.clone()).collect();
                sgd_update(&mut values, &step.grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
                if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
                    return Err(TrainError::Numeric {
                        epoch,
                        batch: b + 1,
                        detail: format!("parameter {} became non-finite", student.params()[bad].name),
                    });
                }
                student.set_params(values)?;
                Ok::<_, TrainError>(step)
            })()
            .map_err(|err| err.at(epoch, b + 1))?;
            let w = idx.len() as f64;
            outer_sum += step.outer.as_f64() * w;
            inner_sum += step.inner.map_or(0.0, |v| v.as_f64()) * w;
        }
        let n = train.len() as f64;
        let mut row = EpochRow {
            epoch,
            lr: lr.as_f64(),
            outer_loss: outer_sum / n,
            inner_obj: matches!(objective, StepKind::Adversarial(_)).then_some(inner_sum / n),
            clean_acc: None,
            pgdt_acc: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            row.clean_acc = Some(evaluate_tensor(&student, &x_test, &test.labels, None, cfg.seed)?);
            row.pgdt_acc = Some(evaluate_tensor(
                &student,
                &x_test,
                &test.labels,
                Some(&cfg.eval_attack),
                cfg.seed,
            )?);
            snapshots.push((epoch, student.clone()));
        }
        record.rows.push(row);
    }

    let best = select_best(&record, &snapshots)?.clone();
    if let Some(dir) = &cfg.out_dir {
        write_file(&dir.join("run.csv"), &record.to_csv())?;
        save_checkpoint(&best, &dir.join("best.ckpt"))?;
        save_checkpoint(&student, &dir.join("last.ckpt"))?;
    }
    Ok(TrainOutput {
        best,
        last: student,
        record,
    })
}

/// Natural, SAT or TRADES training from scratch.
pub fn train_teacher<T: Scalar>(
    cfg: &TrainConfig<T>,
    mode: TeacherMode,
    train: &DatasetBundle,
    test: &DatasetBundle,
) -> Result<TrainOutput<T>, TrainError> {
    let objective = match mode {
        TeacherMode::Natural => StepKind::Natural,
        TeacherMode::Sat => StepKind::Adversarial(MethodSpec::new(Method::Sat)),
        TeacherMode::Trades => StepKind::Adversarial(MethodSpec {
            lambda: cfg.method.lambda,
            ..MethodSpec::new(Method::Trades)
        }),
    };
    run(cfg, objective, Teachers::default(), train, test)
}

/// Adversarial distillation of a fresh student with `cfg.method`.
pub fn distill<T: Scalar>(
    cfg: &TrainConfig<T>,
    teachers: Teachers<'_, T>,
    train: &DatasetBundle,
    test: &DatasetBundle,
) -> Result<TrainOutput<T>, TrainError> {
    let m = cfg.method.method;
    let needs_robust = m.needs_teacher()
        || matches!(cfg.method.inner_method(), Method::Rslad | Method::Mmard);
    if needs_robust && teachers.robust.is_none() {
        return Err(TrainError::MissingTeacher { method: m, which: "robust" });
    }
    if m == Method::Mtard && teachers.clean.is_none() {
        return Err(TrainError::MissingTeacher { method: m, which: "clean" });
    }
    let frozen = |t: Option<&Model<T>>| t.map(|t| t.clone().frozen());
    let robust = frozen(teachers.robust);
    let clean = frozen(teachers.clean);
    let teachers = Teachers {
        robust: robust.as_ref(),
        clean: clean.as_ref(),
    };
    run(cfg, StepKind::Adversarial(cfg.method.clone()), teachers, train, test)
}
