//! Robustness evaluation, study grids and report files.
//!
//! A report directory holds `report.csv` (the source of truth),
//! `report.svg` (clean vs PGD_T bars per row) and `settings.cfg` (attack
//! settings and dataset metadata). There is no AutoAttack column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::attacks::{attack, AttackError, AttackModels, AttackSpec, Objective};
use crate::datasets::DatasetBundle;
use crate::losses::{Method, MethodSpec};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::tensorcore::Tensor;
use crate::trainer::{distill, fmt_num, Teachers, TrainConfig, TrainError, STREAM_EVAL};

const EVAL_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("run {method} / {teacher} failed: {source}")]
    Run {
        method: String,
        teacher: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error("invalid study: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed report: {0}")]
    Parse(String),
}

impl EvalError {
    /// The training failure behind a failed run, if any.
    pub fn train_error(&self) -> Option<&TrainError> {
        match self {
            EvalError::Run { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Class predictions, ties broken toward the lowest index.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accuracy on `(x, y)`, optionally after attacking each test point. Work is
/// split into fixed chunks with their own random streams, so the result does
/// not depend on thread count.
pub fn evaluate_tensor<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &[usize],
    spec: Option<&AttackSpec<T>>,
    seed: u64,
) -> Result<f64, AttackError> {
    let n = y.len();
    if x.shape().first() != Some(&n) {
        return Err(AttackError::Shape(format!("{n} labels for inputs {:?}", x.shape())));
    }
    let chunks: Vec<(usize, usize)> = (0..n).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(n))).collect();
    let correct = chunks
        .par_iter()
        .enumerate()
        .map(|(k, &(s, e))| {
            let xb = x.slice_rows(s, e)?;
            let yb = &y[s..e];
            let input = match spec {
                None => xb,
                Some(spec) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((STREAM_EVAL << 32) | k as u64);
                    attack(&AttackModels::new(model), spec, &xb, yb, &mut rng)?.x_adv
                }
            };
            let pred = predict(&model.logits(&input)?);
            Ok(pred.iter().zip(yb).filter(|(p, t)| p == t).count())
        })
        .collect::<Result<Vec<usize>, AttackError>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / n as f64)
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &DatasetBundle,
    spec: Option<&AttackSpec<T>>,
    seed: u64,
) -> Result<f64, EvalError> {
    Ok(evaluate_tensor(model, &data.features.cast(), &data.labels, spec, seed)?)
}

/// The evaluation attacks, all sharing one radius.
#[derive(Clone, Debug, PartialEq)]
pub struct Battery<T = f64> {
    pub fgsm: AttackSpec<T>,
    pub pgd_s: AttackSpec<T>,
    pub pgd_t: AttackSpec<T>,
    pub cw: AttackSpec<T>,
}

impl<T: Scalar> Battery<T> {
    /// FGSM plus `steps`-step PGD_S (cross entropy), PGD_T (TRADES KL) and
    /// CW∞, step `eps/4`, random start 0.001.
    pub fn new(eps: T, steps: usize) -> Self {
        let step = eps / T::lit(4.0);
        let r0 = T::lit(0.001);
        Self {
            fgsm: AttackSpec::fgsm(eps, Objective::Ce),
            pgd_s: AttackSpec::pgd(eps, step, steps, r0, Objective::Ce),
            pgd_t: AttackSpec::pgd(eps, step, steps, r0, Objective::TradesKl),
            cw: AttackSpec::cw(eps, step, steps, r0),
        }
    }

    pub fn settings(&self) -> BTreeMap<String, String> {
        let mut s = BTreeMap::new();
        s.insert("eps".into(), self.pgd_t.eps.to_string());
        s.insert("step".into(), self.pgd_t.step.to_string());
        s.insert("steps".into(), self.pgd_t.steps.to_string());
        s.insert("random_start".into(), self.pgd_t.random_start.to_string());
        s.insert("autoattack".into(), "omitted".into());
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub clean: f64,
    pub fgsm: f64,
    pub pgd_s: f64,
    pub pgd_t: f64,
    pub cw: f64,
}

impl Scores {
    fn values(&self) -> [f64; 5] {
        [self.clean, self.fgsm, self.pgd_s, self.pgd_t, self.cw]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self {
            clean: v[0],
            fgsm: v[1],
            pgd_s: v[2],
            pgd_t: v[3],
            cw: v[4],
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let (a, b) = (self.values(), other.values());
        Self::from_values(std::array::from_fn(|i| f(a[i], b[i])))
    }
}

pub fn run_battery<T: Scalar>(
    model: &Model<T>,
    data: &DatasetBundle,
    battery: &Battery<T>,
    seed: u64,
) -> Result<Scores, EvalError> {
    let x = data.features.cast();
    let y = &data.labels;
    let acc = |spec: Option<&AttackSpec<T>>| evaluate_tensor(model, &x, y, spec, seed);
    Ok(Scores {
        clean: acc(None)?,
        fgsm: acc(Some(&battery.fgsm))?,
        pgd_s: acc(Some(&battery.pgd_s))?,
        pgd_t: acc(Some(&battery.pgd_t))?,
        cw: acc(Some(&battery.cw))?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub teacher: String,
    pub student: String,
    pub seed: u64,
    pub scores: Scores,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Attack settings and dataset metadata shared by every row.
    pub settings: BTreeMap<String, String>,
}

const REPORT_HEADER: [&str; 9] = ["method", "teacher", "student", "seed", "clean", "fgsm", "pgd_s", "pgd_t", "cw"];

impl EvalReport {
    pub fn new(battery_settings: BTreeMap<String, String>, data: &DatasetBundle) -> Self {
        let mut settings = battery_settings;
        for (k, v) in &data.meta {
            settings.insert(format!("data.{k}"), v.clone());
        }
        Self {
            rows: Vec::new(),
            settings,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.teacher.clone(), r.student.clone(), r.seed.to_string()];
            rec.extend(r.scores.values().map(fmt_num));
            w.write_record(rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<EvalRow>, EvalError> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| EvalError::Parse(e.to_string()))?;
        if header.iter().ne(REPORT_HEADER) {
            return Err(EvalError::Parse(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| EvalError::Parse(e.to_string()))?;
            if rec.len() != REPORT_HEADER.len() {
                return Err(EvalError::Parse(format!("row with {} fields", rec.len())));
            }
            let num = |i: usize| -> Result<f64, EvalError> {
                rec[i]
                    .parse()
                    .map_err(|_| EvalError::Parse(format!("bad {} value {:?}", REPORT_HEADER[i], &rec[i])))
            };
            rows.push(EvalRow {
                method: rec[0].to_string(),
                teacher: rec[1].to_string(),
                student: rec[2].to_string(),
                seed: rec[3]
                    .parse()
                    .map_err(|_| EvalError::Parse(format!("bad seed {:?}", &rec[3])))?,
                scores: Scores::from_values([num(4)?, num(5)?, num(6)?, num(7)?, num(8)?]),
            });
        }
        Ok(rows)
    }

    /// Grouped bars of clean and PGD_T accuracy, one `<g class="row">` per row.
    pub fn to_svg(&self) -> String {
        let (bar, gap, height, top, left) = (14.0, 18.0, 200.0, 20.0, 40.0);
        let values = self.rows.iter().flat_map(|r| [r.scores.clean, r.scores.pgd_t]);
        let (lo, hi) = values.fold((0.0f64, 1.0f64), |(l, h), v| (l.min(v), h.max(v)));
        let y = |v: f64| top + (hi - v) / (hi - lo) * height;
        let width = left + self.rows.len() as f64 * (2.0 * bar + gap) + gap;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="9">"#,
            top + height + 60.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{z}" x2="{width}" y2="{z}" stroke="black"/>"#,
            z = y(0.0)
        );
        for (i, r) in self.rows.iter().enumerate() {
            let x0 = left + gap + i as f64 * (2.0 * bar + gap);
            let label = xml_escape(&format!("{} / {}", r.method, r.teacher));
            let _ = writeln!(s, r#"<g class="row" data-label="{label}">"#);
            for (k, (v, colour)) in [(r.scores.clean, "#4c78a8"), (r.scores.pgd_t, "#e45756")].into_iter().enumerate() {
                let (a, b) = (y(v.max(0.0)), y(v.min(0.0)));
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{a}" width="{bar}" height="{}" fill="{colour}"/>"#,
                    x0 + k as f64 * bar,
                    b - a
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{x0}" y="{}" transform="rotate(45 {x0} {})">{label}</text>"#,
                top + height + 12.0,
                top + height + 12.0
            );
            s.push_str("</g>\n");
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, report.to_csv()).map_err(io_err(&csv_path))?;
    let svg_path = dir.join("report.svg");
    fs::write(&svg_path, report.to_svg()).map_err(io_err(&svg_path))?;
    let cfg_path = dir.join("settings.cfg");
    let text: String = report.settings.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    fs::write(&cfg_path, text).map_err(io_err(&cfg_path))?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<EvalReport, EvalError> {
    let csv_path = dir.join("report.csv");
    let rows = EvalReport::rows_from_csv(&fs::read_to_string(&csv_path).map_err(io_err(&csv_path))?)?;
    let cfg_path = dir.join("settings.cfg");
    let mut settings = BTreeMap::new();
    for line in fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?.lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            settings.insert(k.to_string(), v.to_string());
        }
    }
    Ok(EvalReport { rows, settings })
}

/// Inputs shared by every run of a study. Each run starts from `train_cfg`
/// with its method replaced and writes under `train_cfg.out_dir/<run label>`.
pub struct Study<'a, T = f64> {
    pub train_cfg: TrainConfig<T>,
    pub battery: Battery<T>,
    pub train: &'a DatasetBundle,
    pub test: &'a DatasetBundle,
    /// Clean teacher for MTARD runs.
    pub clean_teacher: Option<&'a Model<T>>,
}

struct RunSpec<'a, T> {
    label: String,
    teacher_tag: String,
    teacher: &'a Model<T>,
    method: MethodSpec<T>,
}

impl<T: Scalar> Study<'_, T> {
    fn run_grid(&self, runs: &[RunSpec<'_, T>]) -> Result<Vec<EvalRow>, EvalError> {
        runs.par_iter()
            .map(|r| {
                let fail = |e: TrainError| EvalError::Run {
                    method: r.label.clone(),
                    teacher: r.teacher_tag.clone(),
                    source: Box::new(e),
                };
                let mut cfg = self.train_cfg.clone();
                cfg.method = r.method.clone();
                cfg.out_dir = cfg
                    .out_dir
                    .as_ref()
                    .map(|d| d.join(format!("{}-{}", sanitize(&r.label), sanitize(&r.teacher_tag))));
                let teachers = Teachers {
                    robust: Some(r.teacher),
                    clean: self.clean_teacher,
                };
                let out = distill(&cfg, teachers, self.train, self.test).map_err(fail)?;
                let scores = run_battery(&out.best, self.test, &self.battery, cfg.seed)?;
                Ok(EvalRow {
                    method: r.label.clone(),
                    teacher: r.teacher_tag.clone(),
                    student: cfg.arch.to_string(),
                    seed: cfg.seed,
                    scores,
                })
            })
            .collect()
    }

    fn report(&self, rows: Vec<EvalRow>) -> EvalReport {
        let mut report = EvalReport::new(self.battery.settings(), self.test);
        report.settings.insert("epochs".into(), self.train_cfg.epochs.to_string());
        report.rows = rows;
        report
    }

    fn spec(&self, method: Method) -> MethodSpec<T> {
        MethodSpec {
            method,
            alpha: T::lit(method.default_alpha()),
            inner_override: None,
            ..self.train_cfg.method.clone()
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' })
        .collect()
}

/// Every method distilled from every teacher, followed by one `average` row per method.
pub fn saturation_study<T: Scalar>(
    study: &Study<'_, T>,
    teachers: &[(String, Model<T>)],
    methods: &[Method],
) -> Result<EvalReport, EvalError> {
    if teachers.len() < 2 {
        return Err(EvalError::Config("saturation study needs at least two teachers".into()));
    }
    if methods.is_empty() {
        return Err(EvalError::Config("no methods given".into()));
    }
    let runs: Vec<RunSpec<'_, T>> = methods
        .iter()
        .flat_map(|&m| {
            teachers.iter().map(move |(tag, t)| RunSpec {
                label: m.to_string(),
                teacher_tag: tag.clone(),
                teacher: t,
                method: study.spec(m),
            })
        })
        .collect();
    let mut rows = study.run_grid(&runs)?;
    for &m in methods {
        let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.method == m.name()).collect();
        let k = mine.len() as f64;
        let sum = mine
            .iter()
            .fold(Scores::default(), |acc, r| acc.zip(&r.scores, |a, b| a + b));
        let avg = EvalRow {
            method: m.to_string(),
            teacher: "average".into(),
            student: study.train_cfg.arch.to_string(),
            seed: study.train_cfg.seed,
            scores: sum.zip(&sum, |a, _| a / k),
        };
        rows.push(avg);
    }
    Ok(study.report(rows))
}

/// For each outer method: the vanilla run, the run with the MMARD inner
/// objective (`<m>+mmard`) and their difference (`<m>+mmard:delta`, may be negative).
pub fn combination_study<T: Scalar>(
    study: &Study<'_, T>,
    teacher: (&str, &Model<T>),
    methods: &[Method],
) -> Result<EvalReport, EvalError> {
    if methods.is_empty() {
        return Err(EvalError::Config("no methods given".into()));
    }
    let mut runs = Vec::new();
    for &m in methods {
        runs.push(RunSpec {
            label: m.to_string(),
            teacher_tag: teacher.0.to_string(),
            teacher: teacher.1,
            method: study.spec(m),
        });
        runs.push(RunSpec {
            label: format!("{m}+mmard"),
            teacher_tag: teacher.0.to_string(),
            teacher: teacher.1,
            method: study.spec(m).with_inner(Method::Mmard),
        });
    }
    let done = study.run_grid(&runs)?;
    let mut rows = Vec::new();
    for pair in done.chunks(2) {
        let delta = EvalRow {
            method: format!("{}:delta", pair[1].method),
            scores: pair[1].scores.zip(&pair[0].scores, |a, b| a - b),
            ..pair[1].clone()
        };
        rows.extend([pair[0].clone(), pair[1].clone(), delta]);
    }
    Ok(study.report(rows))
}

pub const DEFAULT_ALPHAS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

/// One MMARD run per trade-off weight, labelled `mmard@alpha=<a>`.
pub fn alpha_sweep<T: Scalar>(study: &Study<'_, T>, teacher: (&str, &Model<T>), alphas: &[T]) -> Result<EvalReport, EvalError> {
    if alphas.is_empty() {
        return Err(EvalError::Config("no alpha values given".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a >= T::zero())) {
        return Err(EvalError::Config(format!("alpha must be >= 0, got {a}")));
    }
    let runs: Vec<RunSpec<'_, T>> = alphas
        .iter()
        .map(|&a| RunSpec {
            label: format!("mmard@alpha={a}"),
            teacher_tag: teacher.0.to_string(),
            teacher: teacher.1,
            method: study.spec(Method::Mmard).with_alpha(a),
        })
        .collect();
    let rows = study.run_grid(&runs)?;
    Ok(study.report(rows))
}
