use std::fs;
use std::path::{Path, PathBuf};

use crate::attacks::{AttackSpec, Objective};
use crate::datasets::{gen_blob_grid, gen_blob_patches, gen_two_moons, read_dataset, write_dataset, DatasetBundle, Split};
use crate::evalbench::{
    alpha_sweep, combination_study, run_battery, saturation_study, write_report, Battery, EvalReport, EvalRow, Study,
};
use crate::losses::{Method, MethodSpec};
use crate::models::{load_checkpoint, ArchSpec, Model};
use crate::trainer::{distill, train_teacher, LrSchedule, TeacherMode, Teachers, TrainConfig};

use super::config::split_list;
use super::{CliError, Command, Config};

const STUDY_METHODS: &str = "ard,iad,rslad,mmard";

fn default_out(command: Command, cfg: &Config) -> String {
    match command {
        Command::GenData => cfg.raw("data_dir").to_string(),
        Command::TrainTeacher => "runs/teacher".into(),
        Command::Distill => "runs/distill".into(),
        Command::Evaluate => "runs/eval".into(),
        Command::StudySaturation => "runs/saturation".into(),
        Command::StudyCombination => "runs/combination".into(),
        Command::StudyAlpha => "runs/alpha".into(),
    }
}

fn data_paths(cfg: &Config) -> (PathBuf, PathBuf) {
    let dir = PathBuf::from(cfg.raw("data_dir"));
    (dir.join("train.mmds"), dir.join("test.mmds"))
}

fn generate(cfg: &Config) -> Result<(DatasetBundle, DatasetBundle), CliError> {
    let seed: u64 = cfg.get("seed")?;
    let noise = cfg.float("noise")?;
    let (n_train, n_test) = (cfg.usize("n_train")?, cfg.usize("n_test")?);
    let dataset = cfg.raw("dataset");
    if dataset == "two-moons" {
        let both = (
            gen_two_moons(n_train, noise, seed, Split::Train)?,
            gen_two_moons(n_test, noise, seed, Split::Test)?,
        );
        return Ok(both);
    }
    let classes = cfg.usize("classes")?;
    let spacing = cfg.float("spacing")?;
    let per_class = |key: &str| {
        let n = cfg.usize(key)?;
        if n < classes {
            Err(CliError::key(key, format!("need at least one sample per class ({classes})")))
        } else {
            Ok(n / classes)
        }
    };
    let gen = if dataset == "blobs" { gen_blob_grid } else { gen_blob_patches };
    Ok((
        gen(classes, per_class("n_train")?, spacing, noise, seed, Split::Train)?,
        gen(classes, per_class("n_test")?, spacing, noise, seed, Split::Test)?,
    ))
}

fn load_data(cfg: &Config) -> Result<(DatasetBundle, DatasetBundle), CliError> {
    let (train, test) = data_paths(cfg);
    for p in [&train, &test] {
        if !p.exists() {
            return Err(CliError::io(p, &"dataset file not found (run gen-data first)"));
        }
    }
    Ok((read_dataset(&train)?, read_dataset(&test)?))
}

fn load_model(path: &str, key: &str) -> Result<Model, CliError> {
    if path.is_empty() {
        return Err(CliError::key(key, "required key is missing"));
    }
    let p = Path::new(path);
    if !p.exists() {
        return Err(CliError::io(p, &format!("{key} checkpoint not found")));
    }
    Ok(load_checkpoint(p)?)
}

fn auto_arch(data: &DatasetBundle, teacher: bool) -> String {
    let c = data.classes;
    match data.sample_shape() {
        [d] if teacher => format!("mlp:{d}-64-64-{c}"),
        [d] => format!("mlp:{d}-32-32-{c}"),
        [ch, h, w] if teacher => format!("cnn:{ch}x{h}x{w}:16-32:{c}"),
        [ch, h, w] => format!("cnn:{ch}x{h}x{w}:8-16:{c}"),
        other => format!("mlp:{}-32-32-{c}", other.iter().product::<usize>()),
    }
}

/// Replace every `auto` value with its concrete setting for this command.
fn resolve(command: Command, cfg: &mut Config, train: &DatasetBundle) -> Result<(), CliError> {
    let margin = train.margin();
    if cfg.is_auto("eps") {
        let m = margin.ok_or_else(|| CliError::key("eps", "dataset has no margin metadata; set eps explicitly"))?;
        cfg.resolve("eps", 0.25 * m);
    }
    if cfg.is_auto("step") {
        cfg.resolve("step", cfg.float("eps")? / 4.0);
    }
    if cfg.is_auto("arch") {
        cfg.resolve("arch", auto_arch(train, false));
    }
    if cfg.is_auto("teacher_arch") {
        cfg.resolve("teacher_arch", auto_arch(train, true));
    }
    if cfg.is_auto("epochs") {
        cfg.resolve("epochs", if command == Command::StudySaturation { 10 } else { 60 });
    }
    if cfg.is_auto("schedule") {
        let natural = command == Command::TrainTeacher && cfg.get::<TeacherMode>("mode")? == TeacherMode::Natural;
        let s = if natural {
            LrSchedule::natural(cfg.usize("epochs")?)
        } else {
            LrSchedule::Cosine
        };
        cfg.resolve("schedule", s);
    }
    if cfg.is_auto("alpha") {
        let alpha = cfg.opt_method("method")?.unwrap_or(Method::Mmard).default_alpha();
        cfg.resolve("alpha", alpha);
    }
    if cfg.is_auto("methods") {
        cfg.resolve("methods", STUDY_METHODS);
    }
    if cfg.is_auto("out") {
        let out = default_out(command, cfg);
        cfg.resolve("out", out);
    }
    Ok(())
}

fn resolve_classes(cfg: &mut Config) -> Result<(), CliError> {
    let two_moons = cfg.raw("dataset") == "two-moons";
    if cfg.is_auto("classes") {
        cfg.resolve("classes", if two_moons { 2 } else { 3 });
    } else if two_moons && cfg.usize("classes")? != 2 {
        return Err(CliError::key("classes", "two-moons has exactly 2 classes"));
    }
    Ok(())
}

fn method_spec(cfg: &Config, method: Method) -> Result<MethodSpec<f64>, CliError> {
    let spec = MethodSpec {
        method,
        inner_override: cfg.opt_method("inner")?,
        alpha: cfg.float("alpha")?,
        beta: cfg.float("beta")?,
        lambda: cfg.float("lambda")?,
        tau: cfg.float("tau")?,
        huber_delta: cfg.float("delta")?,
    };
    Ok(spec)
}

fn train_config(cfg: &Config, arch_key: &str, method: MethodSpec<f64>) -> Result<TrainConfig<f64>, CliError> {
    let arch: ArchSpec = cfg.get(arch_key)?;
    let (eps, step, r0) = (cfg.float("eps")?, cfg.float("step")?, cfg.float("random_start")?);
    let tc = TrainConfig {
        arch,
        method,
        epochs: cfg.usize("epochs")?,
        batch: cfg.usize("batch")?,
        lr: cfg.float("lr")?,
        momentum: cfg.float("momentum")?,
        weight_decay: cfg.float("weight_decay")?,
        schedule: cfg.get("schedule")?,
        attack: AttackSpec::pgd(eps, step, cfg.usize("train_steps")?, r0, Objective::Ce),
        eval_attack: AttackSpec::pgd(eps, step, cfg.usize("eval_steps")?, r0, Objective::TradesKl),
        seed: cfg.get("seed")?,
        eval_every: cfg.usize("eval_every")?,
        out_dir: Some(PathBuf::from(cfg.raw("out"))),
    };
    tc.validate()?;
    Ok(tc)
}

fn battery(cfg: &Config) -> Result<Battery<f64>, CliError> {
    let mut b = Battery::new(cfg.float("eps")?, cfg.usize("eval_steps")?);
    let (step, r0) = (cfg.float("step")?, cfg.float("random_start")?);
    for spec in [&mut b.pgd_s, &mut b.pgd_t, &mut b.cw] {
        spec.step = step;
        spec.random_start = r0;
    }
    for spec in [&b.fgsm, &b.pgd_s, &b.pgd_t, &b.cw] {
        spec.validate().map_err(|e| CliError::key("eps", e))?;
    }
    Ok(b)
}

fn prepare_out(cfg: &Config) -> Result<PathBuf, CliError> {
    let out = PathBuf::from(cfg.raw("out"));
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, &e))?;
    let path = out.join("resolved.cfg");
    fs::write(&path, cfg.render()).map_err(|e| CliError::io(&path, &e))?;
    Ok(out)
}

fn study_teachers(cfg: &Config) -> Result<Vec<(String, Model)>, CliError> {
    let paths: Vec<&str> = split_list(cfg.raw("teachers")).collect();
    if paths.len() < 2 {
        return Err(CliError::key("teachers", "saturation study needs at least two checkpoints"));
    }
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let m = load_model(p, "teachers")?;
            Ok((format!("t{}:{}", i + 1, m.arch()), m))
        })
        .collect()
}

/// Run `command` under `cfg`; returns the output directory.
pub fn dispatch(command: Command, mut cfg: Config) -> Result<PathBuf, CliError> {
    resolve_classes(&mut cfg)?;
    if command == Command::GenData {
        let (train, test) = generate(&cfg)?;
        resolve(command, &mut cfg, &train)?;
        let out = prepare_out(&cfg)?;
        let (train_path, test_path) = data_paths(&cfg);
        write_dataset(&train, &train_path)?;
        write_dataset(&test, &test_path)?;
        return Ok(out);
    }

    let (train, test) = load_data(&cfg)?;
    resolve(command, &mut cfg, &train)?;
    match command {
        Command::GenData => unreachable!(),
        Command::TrainTeacher => {
            let mode: TeacherMode = cfg.get("mode")?;
            let tc = train_config(&cfg, "teacher_arch", method_spec(&cfg, Method::Trades)?)?;
            let out = prepare_out(&cfg)?;
            train_teacher(&tc, mode, &train, &test)?;
            Ok(out)
        }
        Command::Distill => {
            let method = cfg.require_method("method")?;
            let spec = method_spec(&cfg, method)?;
            let tc = train_config(&cfg, "arch", spec)?;
            let robust = load_model(cfg.raw("teacher"), "teacher")?;
            let clean = match (method, cfg.raw("clean_teacher")) {
                (Method::Mtard, p) => Some(load_model(p, "clean_teacher")?),
                (_, "") => None,
                (_, p) => Some(load_model(p, "clean_teacher")?),
            };
            let out = prepare_out(&cfg)?;
            let teachers = Teachers {
                robust: Some(&robust),
                clean: clean.as_ref(),
            };
            distill(&tc, teachers, &train, &test)?;
            Ok(out)
        }
        Command::Evaluate => {
            let student = load_model(cfg.raw("student"), "student")?;
            let b = battery(&cfg)?;
            let seed = cfg.get("seed")?;
            let out = prepare_out(&cfg)?;
            let scores = run_battery(&student, &test, &b, seed)?;
            let mut report = EvalReport::new(b.settings(), &test);
            let method = cfg.opt_method("method")?;
            report.rows.push(EvalRow {
                method: method.map_or("model".into(), |m| m.to_string()),
                teacher: if method.is_some_and(Method::needs_teacher) {
                    cfg.raw("teacher").to_string()
                } else {
                    "-".into()
                },
                student: student.arch().to_string(),
                seed,
                scores,
            });
            write_report(&report, &out)?;
            Ok(out)
        }
        Command::StudySaturation | Command::StudyCombination | Command::StudyAlpha => {
            let methods = cfg.methods("methods")?;
            let needs_clean = command != Command::StudyAlpha && methods.contains(&Method::Mtard);
            let clean = match cfg.raw("clean_teacher") {
                "" if needs_clean => return Err(CliError::key("clean_teacher", "required by mtard")),
                "" => None,
                p => Some(load_model(p, "clean_teacher")?),
            };
            let base = method_spec(&cfg, Method::Mmard)?;
            let teachers = if command == Command::StudySaturation {
                study_teachers(&cfg)?
            } else {
                vec![("teacher".to_string(), load_model(cfg.raw("teacher"), "teacher")?)]
            };
            let study = Study {
                train_cfg: train_config(&cfg, "arch", base)?,
                battery: battery(&cfg)?,
                train: &train,
                test: &test,
                clean_teacher: clean.as_ref(),
            };
            let out = prepare_out(&cfg)?;
            let (tag, t) = (&teachers[0].0, &teachers[0].1);
            let report = match command {
                Command::StudySaturation => saturation_study(&study, &teachers, &methods)?,
                Command::StudyCombination => combination_study(&study, (tag, t), &methods)?,
                _ => alpha_sweep(&study, (tag, t), &cfg.floats("alphas")?)?,
            };
            write_report(&report, &out)?;
            Ok(out)
        }
    }
}
