//! Training step, evaluation and the full training run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use thiserror::Error;

use crate::augment::{strong_augment, weak_augment, AugPolicy, Image};
use crate::config::{ConfigError, SslLossKind, TrainConfig};
use crate::data::{batch_stream, DataError, Dataset, ImageSet, LabeledSplit, SslBatch};
use crate::ema::{ema_init, ema_update, Ema};
use crate::losses::{
    argmax, cosine_ssl_loss, mse_ssl_loss, one_hot, pseudo_label_loss, softmax_ssl_loss, supervised_loss,
    weight_decay_term, LossError, LossReport, SslLoss, StopGrad,
};
use crate::metrics::{read_log, run_stats, MetricLog, MetricRow, MetricsError, RunStats, LAST_WINDOW};
use crate::model::checkpoint::Checkpoint;
use crate::model::{images_to_batch, real, Arch, Gradients, ModelBundle, ModelError, ModelSpec, ParamGroup, Real};
use crate::optim::{sgd_step, LrSchedule, OptimError, OptimizerState};
use crate::rng::{stream_rng, Stream};

/// State dumped when training halts on a non-finite value.
#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub step: u64,
    pub reason: String,
    pub report: Option<LossReport>,
    /// L2 gradient norm per parameter group.
    pub grad_norms: Vec<(ParamGroup, f64)>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: {}", self.step, self.reason)?;
        if let Some(r) = &self.report {
            write!(
                f,
                "\n  l_l={} l_p={} l_s={} l_wd={} total={} mask_rate={}",
                r.l_l, r.l_p, r.l_s, r.l_wd, r.total, r.mask_rate
            )?;
        }
        for (g, n) in &self.grad_norms {
            write!(f, "\n  |grad θ_{g}| = {n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training halted on a non-finite value at {0}")]
    NonFinite(Box<Diagnostic>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Augmented tensors of one step.
#[derive(Debug, Clone)]
pub struct StepInputs<T> {
    pub step: u64,
    /// Weakly augmented labeled images.
    pub labeled: Array4<T>,
    pub labels: Vec<usize>,
    /// Weak and strong views of the same unlabeled images.
    pub weak: Array4<T>,
    pub strong: Array4<T>,
}

/// Augment one batch. All randomness comes from the (seed, step) augmentation
/// stream, consumed in a fixed order: labeled images, then for each unlabeled
/// image its weak view followed by its strong view.
pub fn prepare_inputs<T: Real>(ds: &Dataset, batch: &SslBatch, policy: &AugPolicy, seed: u64) -> StepInputs<T> {
    let mut rng = stream_rng(seed, Stream::Augment, batch.step);
    let labeled: Vec<Image> = batch
        .labeled
        .iter()
        .map(|&i| weak_augment(&ds.train.image(i), &mut rng))
        .collect();
    let mut weak = Vec::with_capacity(batch.unlabeled.len());
    let mut strong = Vec::with_capacity(batch.unlabeled.len());
    for &u in &batch.unlabeled {
        let img = ds.pool_image(u);
        weak.push(weak_augment(&img, &mut rng));
        strong.push(strong_augment(&img, policy, &mut rng));
    }
    StepInputs {
        step: batch.step,
        labeled: images_to_batch(&labeled),
        labels: batch.labels.clone(),
        weak: images_to_batch(&weak),
        strong: images_to_batch(&strong),
    }
}

/// Teacher-side outputs on the weak view: features `z` and logits `g(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs<T> {
    pub features: Array2<T>,
    pub logits: Array2<T>,
}

/// Forward pass of the weak unlabeled view. No tape is recorded, so nothing
/// downstream can send gradient into it.
pub fn teacher_outputs<T: Real>(
    model: &mut ModelBundle<T>,
    weak: &Array4<T>,
    update_stats: bool,
) -> Result<TeacherOutputs<T>, ModelError> {
    let features = model.forward_features_train(weak, update_stats)?;
    let logits = model.forward_logits(&features)?;
    Ok(TeacherOutputs { features, logits })
}

/// Loss value and parameter gradient of one step.
#[derive(Debug, Clone)]
pub struct StepGradients<T> {
    pub report: LossReport,
    pub total: T,
    pub grads: Gradients<T>,
}

/// Feature loss selected by the config.
pub fn ssl_loss<T: Real>(cfg: &TrainConfig, projected: &Array2<T>, z: &StopGrad<T>) -> Result<SslLoss<T>, LossError> {
    match cfg.ssl_loss_kind {
        SslLossKind::Cosine => cosine_ssl_loss(projected, z),
        SslLossKind::Mse => mse_ssl_loss(projected, z),
        SslLossKind::SoftmaxCe => softmax_ssl_loss(projected, z, cfg.softmax_temperature),
    }
}

/// Total loss `l_l + l_p + w_s l_s + l_wd` and its gradient.
///
/// Forward passes run in train mode in the order labeled-weak, unlabeled-weak,
/// unlabeled-strong; running statistics are updated when `update_stats` is
/// set. `teacher` replaces the weak-view pass with given outputs.
pub fn loss_and_gradients<T: Real>(
    model: &mut ModelBundle<T>,
    inputs: &StepInputs<T>,
    cfg: &TrainConfig,
    update_stats: bool,
    teacher: Option<&TeacherOutputs<T>>,
) -> Result<StepGradients<T>, TrainError> {
    let labels = one_hot::<T>(&inputs.labels, model.num_classes());
    let (f_l, tape_l) = model.forward_features_tape(&inputs.labeled, update_stats)?;
    let logits_l = model.forward_logits(&f_l)?;
    let sup = supervised_loss(&labels, &logits_l)?;

    let computed;
    let teacher = match teacher {
        Some(t) => t,
        None => {
            computed = teacher_outputs(model, &inputs.weak, update_stats)?;
            &computed
        }
    };

    let (v, tape_s) = model.forward_features_tape(&inputs.strong, update_stats)?;
    let q = model.forward_logits(&v)?;
    let hv = model.project(&v)?;

    let (l_p, dq, mask_rate) = if cfg.enable_pseudo_label_loss {
        let pl = pseudo_label_loss(&StopGrad::new(teacher.logits.clone()), &q, cfg.tau)?;
        (pl.value, pl.grad, pl.mask_rate)
    } else {
        (T::zero(), Array2::zeros(q.raw_dim()), 0.0)
    };
    let ssl = ssl_loss(cfg, &hv, &StopGrad::new(teacher.features.clone()))?;
    let w_s = real::<T>(cfg.w_s);
    let l_wd = weight_decay_term(&model.params, cfg.w_d);
    let total = sup.value + l_p + w_s * ssl.value + l_wd;

    let mut grads = model.params.zeros_like();
    let df_l = model.backward_logits(&f_l, &sup.grad, &mut grads);
    model.backward_features(tape_l, &df_l, &mut grads);
    let mut dv = model.backward_logits(&v, &dq, &mut grads);
    if cfg.w_s != 0.0 {
        let dhv = ssl.grad.mapv(|g| g * w_s);
        dv += &model.backward_project(&v, &dhv, &mut grads);
    }
    model.backward_features(tape_s, &dv, &mut grads);
    grads.add_scaled_params(&model.params, real(cfg.w_d));

    let f = |x: T| x.to_f64().unwrap();
    Ok(StepGradients {
        report: LossReport {
            l_l: f(sup.value),
            l_p: f(l_p),
            l_s: f(ssl.value),
            l_wd: f(l_wd),
            total: f(total),
            mask_rate,
            degenerate: ssl.degenerate,
        },
        total,
        grads,
    })
}

/// Model, optimizer and EMA state plus the step counter.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: ModelBundle<T>,
    pub opt: OptimizerState<T>,
    pub ema: Ema<T>,
    /// Completed gradient updates.
    pub step: u64,
}

/// Model description implied by a config.
pub fn model_spec(cfg: &TrainConfig, input_size: usize) -> Result<ModelSpec, TrainError> {
    let arch = Arch::from_name(&cfg.arch, cfg.feature_dim)?;
    if arch.feature_dim() != cfg.feature_dim {
        return Err(ConfigError::Invalid {
            key: "feature_dim",
            message: format!("{} has feature width {}, config says {}", cfg.arch, arch.feature_dim(), cfg.feature_dim),
        }
        .into());
    }
    let mut spec = ModelSpec::new(arch, cfg.num_classes);
    spec.input_size = input_size;
    spec.projection_bias = cfg.projection_bias;
    Ok(spec)
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig, spec: ModelSpec) -> Self {
        let model = ModelBundle::build(spec, cfg.seed);
        Self::from_model(cfg, model)
    }

    pub fn from_model(cfg: &TrainConfig, model: ModelBundle<T>) -> Self {
        Self {
            opt: OptimizerState::new(&model.params, cfg.sgd_momentum),
            ema: ema_init(&model.params, cfg.ema_momentum),
            model,
            step: 0,
        }
    }
}

fn diagnostic<T: Real>(step: u64, reason: String, report: Option<LossReport>, state: Option<(&Gradients<T>, &ModelBundle<T>)>) -> TrainError {
    let grad_norms = match state {
        Some((g, m)) => ParamGroup::ALL
            .iter()
            .map(|&grp| (grp, g.group_norm(&m.params, grp).to_f64().unwrap()))
            .collect(),
        None => Vec::new(),
    };
    TrainError::NonFinite(Box::new(Diagnostic {
        step,
        reason,
        report,
        grad_norms,
    }))
}

/// One gradient update at learning rate `lr_at(step)`, followed by the EMA update.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    inputs: &StepInputs<T>,
    cfg: &TrainConfig,
    schedule: &LrSchedule,
) -> Result<LossReport, TrainError> {
    let lr = schedule.lr_at(state.step)?;
    let sg = match loss_and_gradients(&mut state.model, inputs, cfg, true, None) {
        Err(TrainError::Loss(LossError::NonFinite(what))) => {
            return Err(diagnostic::<T>(state.step, format!("non-finite {what}"), None, None));
        }
        other => other?,
    };
    if !sg.report.total.is_finite() || !sg.grads.is_finite() {
        let reason = if sg.report.total.is_finite() { "non-finite gradient" } else { "non-finite total loss" };
        return Err(diagnostic(state.step, reason.into(), Some(sg.report), Some((&sg.grads, &state.model))));
    }
    sgd_step(&mut state.model.params, &sg.grads, &mut state.opt, lr)?;
    ema_update(&mut state.ema, &state.model.params);
    state.step += 1;
    Ok(sg.report)
}

/// Top-1 error (fraction) of the EMA weights on `test`, in eval mode. The
/// live weights are not touched.
pub fn evaluate<T: Real>(state: &TrainState<T>, test: &ImageSet, batch_size: usize) -> Result<f64, TrainError> {
    if test.is_empty() || !test.has_labels() {
        return Err(TrainError::EmptyTestSet);
    }
    let mut wrong = 0usize;
    let bs = batch_size.max(1);
    let mut start = 0;
    while start < test.len() {
        let end = (start + bs).min(test.len());
        let images: Vec<Image> = (start..end).map(|i| test.image(i)).collect();
        let logits = state.model.eval_logits_with(&state.ema.shadow, &images_to_batch::<T>(&images))?;
        for (row, i) in logits.rows().into_iter().zip(start..end) {
            if argmax(row) != test.labels[i] {
                wrong += 1;
            }
        }
        start = end;
    }
    Ok(wrong as f64 / test.len() as f64)
}

/// Store parameters, norm state, EMA shadow, velocity, step and config hash.
pub fn save_checkpoint<T: Real>(state: &TrainState<T>, cfg: &TrainConfig, path: &Path) -> Result<(), TrainError> {
    let mut ck = Checkpoint::new(state.step, cfg.digest());
    ck.push_params("param", &state.model.params);
    ck.push_norm(&state.model.norm);
    ck.push_params("ema", &state.ema.shadow);
    for (p, v) in state.model.params.iter().zip(&state.opt.velocity.tensors) {
        ck.push(format!("velocity/{}", p.name), v);
    }
    ck.save(path)?;
    Ok(())
}

/// Restore a checkpoint written by [`save_checkpoint`] for the same config.
pub fn load_checkpoint<T: Real>(state: &mut TrainState<T>, cfg: &TrainConfig, path: &Path) -> Result<(), TrainError> {
    let ck = Checkpoint::load(path)?;
    if ck.config_hash != cfg.digest() {
        return Err(TrainError::Resume(format!(
            "{} was written for a different config",
            path.display()
        )));
    }
    ck.restore_params("param", &mut state.model.params)?;
    ck.restore_norm(&mut state.model.norm)?;
    ck.restore_params("ema", &mut state.ema.shadow)?;
    let mut velocity = state.model.params.clone();
    ck.restore_params("velocity", &mut velocity)?;
    for (slot, p) in state.opt.velocity.tensors.iter_mut().zip(velocity.iter()) {
        *slot = p.value.clone();
    }
    state.step = ck.step;
    Ok(())
}

/// Options of [`run`] that are not part of the training config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from `latest.ckpt` in the output directory if present.
    pub resume: bool,
    /// Stop (with a checkpoint) after this many completed steps.
    pub stop_after: Option<u64>,
    /// Print evaluation progress to stderr.
    pub progress: bool,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const POLICY_FILE: &str = "policy.txt";
pub const SPLIT_FILE: &str = "split.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub steps: u64,
    /// `None` when the run stopped before its first evaluation.
    pub stats: Option<RunStats>,
    pub finished: bool,
}

/// Augmentation policy of a config, filling Cutout with the dataset mean.
pub fn policy_for(cfg: &TrainConfig, ds: &Dataset) -> AugPolicy {
    AugPolicy {
        ops_per_image: cfg.ops_per_image,
        cutout_fraction: cfg.cutout_fraction as f32,
        ..AugPolicy::rand_augment(ds.train.channel_mean())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Train for `cfg.total_steps` updates, evaluating every `eval_every()` steps
/// and at the end. Writes the config snapshot, policy and split before step 0,
/// then the metric log and checkpoints.
pub fn run(cfg: &TrainConfig, ds: &Dataset, split: &LabeledSplit, opts: &RunOptions) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    let out = &opts.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let policy = policy_for(cfg, ds);
    policy.validate().map_err(|e| ConfigError::Invalid {
        key: "cutout_fraction",
        message: e.to_string(),
    })?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    write_text(&out.join(POLICY_FILE), &policy.to_text())?;
    write_text(&out.join(SPLIT_FILE), &split.to_text())?;

    let spec = model_spec(cfg, ds.image_size())?;
    let mut state = TrainState::<f32>::new(cfg, spec);
    let latest = out.join(LATEST_CHECKPOINT);
    let metrics_path = out.join(METRICS_FILE);
    let mut log = if opts.resume && latest.exists() {
        load_checkpoint(&mut state, cfg, &latest)?;
        MetricLog::reopen(&metrics_path, state.step)?
    } else {
        MetricLog::create(&metrics_path)?
    };

    let total = cfg.total_steps as u64;
    let schedule = LrSchedule::new(cfg.eta0, cfg.gamma, total);
    let eval_every = cfg.eval_every() as u64;
    let log_every = cfg.log_every() as u64;
    let ckpt_every = cfg.checkpoint_interval as u64;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut stream = batch_stream(ds, split, cfg, cfg.seed);
    let started = Instant::now();

    while state.step < stop {
        let k = state.step;
        let batch = stream.batch_at(k);
        let inputs = prepare_inputs::<f32>(ds, &batch, &policy, cfg.seed);
        let lr = schedule.lr_at(k)?;
        let report = train_step(&mut state, &inputs, cfg, &schedule)?;
        let done = state.step;
        let eval_now = done % eval_every == 0 || done == total;
        if eval_now || done % log_every == 0 {
            let eval_error = if eval_now {
                Some(evaluate(&state, &ds.test, cfg.eval_batch_size)? * 100.0)
            } else {
                None
            };
            log.append_row(&MetricRow {
                step: done,
                l_l: report.l_l,
                l_p: report.l_p,
                l_s: report.l_s,
                mask_rate: report.mask_rate,
                lr,
                wall_time_s: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
                eval_error,
                ema: eval_now,
            })?;
            if opts.progress {
                if let Some(e) = eval_error {
                    eprintln!("step {done}/{total}  error {e:.2}%  mask {:.2}  l_l {:.4}", report.mask_rate, report.l_l);
                }
            }
        }
        if ckpt_every > 0 && done % ckpt_every == 0 {
            save_checkpoint(&state, cfg, &latest)?;
        }
    }

    let finished = state.step == total;
    if finished {
        save_checkpoint(&state, cfg, &out.join(FINAL_CHECKPOINT))?;
    } else {
        save_checkpoint(&state, cfg, &latest)?;
    }
    let rows = read_log(&metrics_path)?;
    let stats = match run_stats(&rows, LAST_WINDOW) {
        Ok(s) => Some(s),
        Err(MetricsError::NoEvaluations) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(RunSummary {
        out_dir: out.clone(),
        steps: state.step,
        stats,
        finished,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::data::{make_split, synthetic_shapes, SyntheticSpec};

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = preset("desk-synthetic").unwrap();
        cfg.feature_dim = 16;
        cfg.batch_size_labeled = 4;
        cfg.mu = 2;
        cfg.num_labels = 9;
        cfg.synthetic_train_size = 60;
        cfg.synthetic_test_size = 30;
        cfg.eval_batch_size = 16;
        cfg.record_wall_time = false;
        cfg
    }

    fn tiny_data(cfg: &TrainConfig) -> (Dataset, LabeledSplit) {
        let ds = synthetic_shapes(&SyntheticSpec {
            train_size: cfg.synthetic_train_size,
            test_size: cfg.synthetic_test_size,
            ..SyntheticSpec::default()
        });
        let split = make_split(&ds.train.labels, 3, cfg.num_labels, cfg.fold).unwrap();
        (ds, split)
    }

    fn inputs_for(cfg: &TrainConfig, ds: &Dataset, split: &LabeledSplit, k: u64) -> StepInputs<f32> {
        let mut stream = batch_stream(ds, split, cfg, cfg.seed);
        prepare_inputs(ds, &stream.batch_at(k), &policy_for(cfg, ds), cfg.seed)
    }

    #[test]
    fn input_shapes_follow_config() {
        let cfg = tiny_cfg();
        let (ds, split) = tiny_data(&cfg);
        let inp = inputs_for(&cfg, &ds, &split, 0);
        assert_eq!(inp.labeled.dim(), (4, 3, 32, 32));
        assert_eq!(inp.weak.dim(), (8, 3, 32, 32));
        assert_eq!(inp.strong.dim(), (8, 3, 32, 32));
        let again = inputs_for(&cfg, &ds, &split, 0);
        assert_eq!(inp.strong, again.strong);
    }

    #[test]
    fn disabled_pseudo_label_loss_reports_zero() {
        let mut cfg = tiny_cfg();
        cfg.enable_pseudo_label_loss = false;
        cfg.tau = 0.0;
        let (ds, split) = tiny_data(&cfg);
        let mut state = TrainState::<f32>::new(&cfg, model_spec(&cfg, 32).unwrap());
        let schedule = LrSchedule::new(cfg.eta0, cfg.gamma, 10);
        for k in 0..3 {
            let r = train_step(&mut state, &inputs_for(&cfg, &ds, &split, k), &cfg, &schedule).unwrap();
            assert_eq!(r.l_p, 0.0);
            assert_eq!(r.mask_rate, 0.0);
        }
        assert_eq!(state.step, 3);
    }

    #[test]
    fn repeated_batch_loss_decreases() {
        let cfg = tiny_cfg();
        let (ds, split) = tiny_data(&cfg);
        let mut state = TrainState::<f32>::new(&cfg, model_spec(&cfg, 32).unwrap());
        let schedule = LrSchedule::new(cfg.eta0, cfg.gamma, 100);
        let inp = inputs_for(&cfg, &ds, &split, 0);
        let first = train_step(&mut state, &inp, &cfg, &schedule).unwrap().total;
        let mut last = first;
        for _ in 0..49 {
            last = train_step(&mut state, &inp, &cfg, &schedule).unwrap().total;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn untrained_model_near_chance_and_evaluation_is_pure() {
        let mut cfg = tiny_cfg();
        cfg.synthetic_test_size = 300;
        let (ds, _) = tiny_data(&cfg);
        let state = TrainState::<f32>::new(&cfg, model_spec(&cfg, 32).unwrap());
        let before = state.model.params.fingerprint();
        let e1 = evaluate(&state, &ds.test, 64).unwrap();
        let e2 = evaluate(&state, &ds.test, 7).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(state.model.params.fingerprint(), before);
        // chance is 2/3; an untrained net may favour one class, so allow up to 1
        let sigma = (2.0f64 / 9.0 / 300.0).sqrt();
        assert!(e1 > 2.0 / 3.0 - 3.0 * sigma, "{e1}");
        assert!(matches!(evaluate(&state, &ImageSet::new(32, 32, 3), 8), Err(TrainError::EmptyTestSet)));
    }

    #[test]
    fn nan_input_halts_with_diagnostic() {
        let cfg = tiny_cfg();
        let (ds, split) = tiny_data(&cfg);
        let mut state = TrainState::<f32>::new(&cfg, model_spec(&cfg, 32).unwrap());
        let schedule = LrSchedule::new(cfg.eta0, cfg.gamma, 10);
        let mut inp = inputs_for(&cfg, &ds, &split, 0);
        inp.labeled[[0, 0, 0, 0]] = f32::NAN;
        let before = state.model.params.clone();
        let err = train_step(&mut state, &inp, &cfg, &schedule).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite(_)));
        assert!(err.to_string().contains("non-finite"));
        assert_eq!(state.model.params, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn run_logs_two_evaluations_for_ten_steps() {
        let mut cfg = tiny_cfg();
        cfg.total_steps = 10;
        cfg.eval_interval = 5;
        cfg.log_interval = 100;
        let (ds, split) = tiny_data(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out_dir: dir.path().to_path_buf(),
            ..RunOptions::default()
        };
        let summary = run(&cfg, &ds, &split, &opts).unwrap();
        assert!(summary.finished);
        let rows = read_log(&dir.path().join(METRICS_FILE)).unwrap();
        let evals: Vec<u64> = rows.iter().filter(|r| r.eval_error.is_some()).map(|r| r.step).collect();
        assert_eq!(evals, vec![5, 10]);
        let stats = summary.stats.unwrap();
        assert!(stats.min_error <= stats.last_median);
        for f in [CONFIG_FILE, POLICY_FILE, SPLIT_FILE, METRICS_FILE, FINAL_CHECKPOINT] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn checkpoint_restores_state() {
        let cfg = tiny_cfg();
        let (ds, split) = tiny_data(&cfg);
        let mut state = TrainState::<f32>::new(&cfg, model_spec(&cfg, 32).unwrap());
        let schedule = LrSchedule::new(cfg.eta0, cfg.gamma, 10);
        for k in 0..2 {
            train_step(&mut state, &inputs_for(&cfg, &ds, &split, k), &cfg, &schedule).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&state, &cfg, &p).unwrap();
        let mut fresh = TrainState::<f32>::new(&cfg, model_spec(&cfg, 32).unwrap());
        load_checkpoint(&mut fresh, &cfg, &p).unwrap();
        assert_eq!(fresh.step, 2);
        assert_eq!(fresh.model.params, state.model.params);
        assert_eq!(fresh.model.norm, state.model.norm);
        assert_eq!(fresh.ema, state.ema);
        assert_eq!(fresh.opt, state.opt);
        let mut other = cfg.clone();
        other.w_s = 3.0;
        assert!(matches!(load_checkpoint(&mut fresh, &other, &p), Err(TrainError::Resume(_))));
    }
}
