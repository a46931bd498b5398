//! Subcommand implementations. Each writes its artifacts under the
//! configured output directory and returns a short summary for stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchmoe::data::{self, CsvSchema};
use patchmoe::metrics::MetricsReport;
use patchmoe::model::{cka_pairs, train, ModelConfig, PatchMoe, StepLog, Target, Task};
use patchmoe::numerics::{grad_check, GradCheckConfig, Tape, Tensor, Var};
use patchmoe::params::Bound;
use patchmoe::preprocess::SeriesBatch;
use patchmoe::router::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::pipeline::{self, EvalSet};

/// Largest model the finite-difference check accepts.
pub const GRADCHECK_MAX_PARAMS: usize = 100_000;

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_path(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| cfg.out_dir().join("checkpoint"), Path::to_path_buf)
}

/// The per-step loss log as written to `loss.csv`.
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut csv = String::from("step,task_loss,l_tem,l_cha,total\n");
    for l in log {
        let _ = writeln!(csv, "{},{:.16e},{:.16e},{:.16e},{:.16e}", l.step, l.task_loss, l.l_tem, l.l_cha, l.total);
    }
    csv
}

pub fn train_cmd(cfg: &RunConfig) -> Result<String> {
    let ds = pipeline::prepare(cfg)?;
    let dir = out_dir(cfg)?;
    write(&dir.join("config.txt"), &cfg.echo())?;
    let mut model = PatchMoe::new(ds.model.clone())?;
    let tc = cfg.train_config()?;
    let outcome = train(&mut model, &ds.train, &ds.val, &tc)?;

    write(&dir.join("loss.csv"), &loss_csv(&outcome.log))?;
    checkpoint::save(&dir.join("checkpoint"), &model)?;
    if let Some(best) = &outcome.best_params {
        let mut b = model.clone();
        for (name, t) in best {
            b.params_mut().set(name, t.clone())?;
        }
        checkpoint::save(&dir.join("best"), &b)?;
    }
    let mut report = pipeline::evaluate(&model, cfg, &ds.val_set, None, "validation")?;
    if let (Some(step), Some(v)) = (outcome.best_step, outcome.best_val) {
        report.set_count("training", "best_step", step as u64);
        report.set("training", "best_val_loss", v)?;
    }
    report.set_count("training", "steps", outcome.log.len() as u64);
    report.set_count("training", "train_samples", ds.train.len() as u64);
    write(&dir.join("val_metrics.json"), &report.to_json())?;
    let last = outcome.log.last().map_or(f64::NAN, |l| l.total);
    Ok(format!(
        "trained {} steps on {} samples, last total loss {last:.6e}; artifacts in {}",
        outcome.log.len(),
        ds.train.len(),
        dir.display()
    ))
}

fn load_for(cfg: &RunConfig, ck: Option<&Path>, model_cfg: &ModelConfig) -> Result<PatchMoe> {
    let path = checkpoint_path(cfg, ck);
    checkpoint::load(&path, model_cfg).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Test-split metrics, written to `test_metrics.json`.
pub fn eval_cmd(cfg: &RunConfig, ck: Option<&Path>) -> Result<MetricsReport> {
    let ds = pipeline::prepare(cfg)?;
    let model = load_for(cfg, ck, &ds.model)?;
    let report = pipeline::evaluate(&model, cfg, &ds.test_set, Some(&ds.val_set), "test")?;
    write(&out_dir(cfg)?.join("test_metrics.json"), &report.to_json())?;
    Ok(report)
}

fn fmt_row(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(",")
}

/// Evaluation plus task-specific predictions. `task` must match the
/// configured task.
pub fn predict_cmd(cfg: &RunConfig, task: &str, ck: Option<&Path>) -> Result<String> {
    if cfg.get("task") != task {
        bail!("config key `task` is `{}`, this command needs task={task}", cfg.get("task"));
    }
    let ds = pipeline::prepare(cfg)?;
    let model = load_for(cfg, ck, &ds.model)?;
    let report = pipeline::evaluate(&model, cfg, &ds.test_set, Some(&ds.val_set), "test")?;
    let dir = out_dir(cfg)?;
    write(&dir.join("test_metrics.json"), &report.to_json())?;
    let (file, text) = match (&ds.test_set, ds.model.task) {
        (EvalSet::Series(seg), Task::Forecast { .. }) => {
            let mut s = String::from("window,channel,step,forecast,actual\n");
            let lb = ds.model.lookback;
            for (w, &(st, e)) in seg.windows.iter().enumerate() {
                let f = model.predict(&seg.series.slice(st, st + lb)?)?;
                for c in 0..f.rows() {
                    for h in 0..f.cols() {
                        writeln!(s, "{w},{c},{h},{}", fmt_row([f.get(c, h), seg.series.values.get(c, st + lb + h)]))?;
                    }
                }
                debug_assert_eq!(st + lb + f.cols(), e);
            }
            ("forecast.csv", s)
        }
        (EvalSet::Series(seg), Task::Impute) => {
            let ratio = cfg.f64("mask_ratio")?;
            let mut s = String::from("window,channel,step,imputed,actual\n");
            for (w, &(st, e)) in seg.windows.iter().enumerate() {
                let x = seg.series.slice(st, e)?;
                let m = data::apply_mask(&x, ratio, pipeline::mask_seed(cfg.u64("seed")?, 2, w))?;
                let y = model.predict(&m)?;
                for c in 0..x.channels() {
                    for t in 0..x.len() {
                        if !m.observed(c, t) {
                            writeln!(s, "{w},{c},{t},{}", fmt_row([y.get(c, t), x.values.get(c, t)]))?;
                        }
                    }
                }
            }
            ("imputed.csv", s)
        }
        (EvalSet::Series(seg), Task::Anomaly) => {
            let scores = pipeline::anomaly_scores(&model, seg)?;
            let th = report.num("test", "threshold").unwrap_or(f64::INFINITY);
            let mut s = String::from("step,score,flag,label\n");
            for (t, sc) in scores.iter().enumerate() {
                if let Some(sc) = sc {
                    let label = seg.labels.as_ref().map_or(String::new(), |l| u8::from(l[t]).to_string());
                    writeln!(s, "{t},{sc:.16e},{},{label}", u8::from(*sc > th))?;
                }
            }
            ("scores.csv", s)
        }
        (EvalSet::Instances(v), Task::Classify { .. }) => {
            let mut s = String::from("instance,predicted,label\n");
            for (i, (b, l)) in v.iter().enumerate() {
                let y = model.predict(b)?;
                let row = y.row(0);
                let best = (0..row.len()).fold(0, |bi, j| if row[j] > row[bi] { j } else { bi });
                writeln!(s, "{i},{best},{l}")?;
            }
            ("predictions.csv", s)
        }
        _ => bail!("test set does not match task {task}"),
    };
    write(&dir.join(file), &text)?;
    Ok(report.to_json())
}

/// The window routing and CKA inspect: the last `lookback` rows of
/// `input`, or the first test window.
fn probe_input(cfg: &RunConfig, input: Option<&Path>, model_cfg: &ModelConfig) -> Result<SeriesBatch> {
    let lb = model_cfg.lookback;
    let x = match input {
        Some(p) => {
            let schema = CsvSchema {
                timestamp: cfg.bool("csv_timestamp")?,
                label_column: None,
            };
            let b = data::load_csv(p, &schema).with_context(|| format!("loading {}", p.display()))?;
            if b.len() < lb {
                bail!("{} has {} rows, need at least lookback={lb}", p.display(), b.len());
            }
            b.slice(b.len() - lb, b.len())?
        }
        None => match pipeline::prepare(cfg)?.test_set {
            EvalSet::Series(seg) => {
                let &(s, _) = seg.windows.first().context("test split has no windows")?;
                seg.series.slice(s, s + lb)?
            }
            EvalSet::Instances(v) => v.into_iter().next().context("no test instances")?.0,
        },
    };
    if x.channels() != model_cfg.channels {
        bail!("input has {} channels, model expects {}", x.channels(), model_cfg.channels);
    }
    Ok(x)
}

fn model_config_for(cfg: &RunConfig) -> Result<ModelConfig> {
    Ok(pipeline::prepare(cfg)?.model)
}

/// Writes `routing.csv`: one row per selected expert of every token.
pub fn inspect_routing_cmd(cfg: &RunConfig, ck: Option<&Path>, input: Option<&Path>) -> Result<String> {
    let mc = model_config_for(cfg)?;
    let model = load_for(cfg, ck, &mc)?;
    let x = probe_input(cfg, input, &mc)?;
    let trace = model.forward(&x, Mode::Inference, 0)?;
    let n = model.layout().n;
    let mut s = String::from("layer,channel,patch,expert,weight\n");
    let mut rows = 0;
    for (l, g) in trace.gates.iter().enumerate() {
        for (tok, (sel, w)) in g.selected.iter().zip(&g.weights).enumerate() {
            for (e, wt) in sel.iter().zip(w) {
                writeln!(s, "{l},{},{},{e},{wt:.16e}", tok / n, tok % n)?;
                rows += 1;
            }
        }
    }
    let path = out_dir(cfg)?.join("routing.csv");
    write(&path, &s)?;
    Ok(format!("{rows} routing rows written to {}", path.display()))
}

/// Writes `cka.json`: a value per layer pair, or the reason it has none.
pub fn cka_cmd(cfg: &RunConfig, ck: Option<&Path>, input: Option<&Path>) -> Result<String> {
    let mc = model_config_for(cfg)?;
    let model = load_for(cfg, ck, &mc)?;
    let x = probe_input(cfg, input, &mc)?;
    let trace = model.forward(&x, Mode::Inference, 0)?;
    let reps: Vec<Tensor> = trace.x_e.iter().map(|t| t.flatten()).collect();
    let mut report = MetricsReport::new();
    for (pair, v) in cka_pairs(&reps) {
        match v {
            Ok(v) => report.set("cka", &pair, v)?,
            Err(e) => report.set_text("cka", &pair, &format!("error: {e}")),
        }
    }
    let json = report.to_json();
    write(&out_dir(cfg)?.join("cka.json"), &json)?;
    Ok(json)
}

/// Keys the gradient check starts from before user settings apply.
pub const GRADCHECK_BASE: &[(&str, &str)] = &[
    ("lookback", "48"),
    ("layers", "2"),
    ("d", "8"),
    ("heads", "2"),
    ("patch_len", "12"),
    ("stride", "12"),
    ("num_routed", "4"),
    ("top_k", "2"),
    ("d_ff", "16"),
    ("horizon", "8"),
    ("num_classes", "3"),
    ("synth_channels", "3"),
];

pub fn gradcheck_base() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in GRADCHECK_BASE {
        cfg.set(k, v).expect("declared key");
    }
    cfg
}

fn random_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub struct GradcheckOutcome {
    pub passed: bool,
    pub text: String,
}

/// Finite-difference check of the full training loss for each listed task.
pub fn gradcheck_cmd(cfg: &RunConfig, tasks: &[&str], corrupt: Option<&str>) -> Result<GradcheckOutcome> {
    let mut text = String::new();
    let mut passed = true;
    for &task in tasks {
        let mut c = cfg.clone();
        c.set("task", task)?;
        let mc = c.model_config(c.usize("synth_channels")?)?;
        let model = PatchMoe::new(mc.clone())?;
        let np = model.params().num_values();
        if np > GRADCHECK_MAX_PARAMS {
            bail!("{task}: model has {np} parameters, gradient check allows at most {GRADCHECK_MAX_PARAMS}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mc.seed.wrapping_add(17));
        let (n, t) = (mc.channels, mc.lookback);
        let x = SeriesBatch::unnamed(random_tensor(n, t, &mut rng))?;
        let target = match mc.task {
            Task::Forecast { horizon } => Target::Series(random_tensor(n, horizon, &mut rng)),
            Task::Impute => Target::Masked {
                values: random_tensor(n, t, &mut rng),
                mask: (0..n * t).map(|_| rng.random_bool(0.25)).collect(),
            },
            Task::Anomaly => Target::Series(random_tensor(n, t, &mut rng)),
            Task::Classify { num_classes } => Target::Class(rng.random_range(0..num_classes)),
        };
        let f = |tape: &mut Tape, vars: &[Var]| {
            if let Some(op) = corrupt {
                tape.corrupt_backward(op);
            }
            let p = Bound::from_vars(vars.to_vec());
            let fw = model.forward_tape(tape, &p, &x, Mode::Training)?;
            Ok(model.loss_tape(tape, &fw, &target)?.total)
        };
        let gc = GradCheckConfig {
            seed: mc.seed,
            ..Default::default()
        };
        let report = grad_check(f, &model.params().to_named(), &gc)?;
        writeln!(text, "{task}: {np} parameters in {} groups, tolerance {:e}", report.params.len(), gc.rel_tol)?;
        for p in &report.params {
            writeln!(
                text,
                "  {} {} entries worst_rel_err={:.3e} (analytic {:.6e}, numeric {:.6e}) {}",
                p.name,
                p.entries,
                p.worst_rel_err,
                p.analytic,
                p.numeric,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        passed &= report.passed();
    }
    writeln!(text, "{}", if passed { "gradient check passed" } else { "gradient check FAILED" })?;
    Ok(GradcheckOutcome { passed, text })
}
