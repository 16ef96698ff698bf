//! Fine-tuning: unseen-domain inclusion, classification and regression heads
//! on the mean-pooled encoder output, and forecasting through the
//! pre-trained decoder with a prefix mask.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{crop_at, prepare, Corpus, DomainSpec, Label, PreparedSample, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    cross_entropy_with_grad, regression_mse_with_grad, total_loss_graph, LossReport, DEFAULT_NCC_LAMBDA,
};
use crate::masking::MaskPlan;
use crate::matrix::Matrix;
use crate::model::Model;
use crate::optim::{layer_scale, lr_at, AdamW, AdamWConfig};
use crate::params::Gradients;
use crate::training::{derive_seed, par_map, split_indices, thread_pool};

pub const CLS_W: &str = "head.cls.w";
pub const CLS_B: &str = "head.cls.b";
pub const REG_W: &str = "head.reg.w";
pub const REG_B: &str = "head.reg.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Classification {
        num_classes: usize,
    },
    Regression {
        target_dim: usize,
    },
    /// `context` and `horizon` in time points; `context` must be a multiple
    /// of the patch size.
    Forecasting {
        context: usize,
        horizon: usize,
    },
}

impl TaskSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            TaskSpec::Classification { .. } => "cls",
            TaskSpec::Regression { .. } => "reg",
            TaskSpec::Forecasting { .. } => "fcst",
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        match *self {
            TaskSpec::Classification { num_classes } if num_classes < 2 => {
                Err(Error::Config("classification needs at least two classes".into()))
            }
            TaskSpec::Regression { target_dim: 0 } => Err(Error::Config("regression target dimension is zero".into())),
            TaskSpec::Forecasting { horizon: 0, .. } => Err(Error::Config("forecast horizon must be positive".into())),
            TaskSpec::Forecasting { context, .. } if context == 0 || context % patch_size != 0 => Err(Error::Config(
                format!("forecast context {context} is not a positive multiple of patch size {patch_size}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub layer_decay: f64,
    pub weight_decay: f64,
    pub drop_path: f64,
    pub label_smoothing: f64,
    pub ncc_lambda: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.1,
            layer_decay: 0.75,
            weight_decay: 0.05,
            drop_path: 0.1,
            label_smoothing: 0.1,
            ncc_lambda: DEFAULT_NCC_LAMBDA,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, v) in [
            ("layer decay", self.layer_decay),
            ("drop path", self.drop_path),
            ("label smoothing", self.label_smoothing),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.drop_path >= 1.0 {
            return Err(Error::Config("drop path rate must be below 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("warmup and validation fractions must lie in [0, 1)".into()));
        }
        if self.ncc_lambda < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("λ and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Registers `spec` in the model. A known name with new variates is
/// extended; a known name with nothing new is a logged no-op (`false`).
pub fn include_domain<R: Rng + ?Sized>(model: &mut Model, spec: &DomainSpec, rng: &mut R) -> Result<bool> {
    match model.registry.get(&spec.name) {
        None => {
            model.register_domain(spec.clone(), rng)?;
            Ok(true)
        }
        Some(existing) => {
            let missing: Vec<String> =
                spec.variates.iter().filter(|v| !existing.variates.contains(v)).cloned().collect();
            if missing.is_empty() {
                log::debug!("domain `{}` is already registered with this catalogue", spec.name);
                return Ok(false);
            }
            model.extend_domain(&spec.name, &missing, rng)?;
            Ok(true)
        }
    }
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Adds the linear head for `task` if it is missing.
pub fn ensure_head<R: Rng + ?Sized>(model: &mut Model, task: &TaskSpec, rng: &mut R) -> Result<()> {
    let d = model.config.encoder.dim;
    let (w, b, out) = match *task {
        TaskSpec::Classification { num_classes } => (CLS_W, CLS_B, num_classes),
        TaskSpec::Regression { target_dim } => (REG_W, REG_B, target_dim),
        TaskSpec::Forecasting { .. } => return Ok(()),
    };
    if let Some(id) = model.params.id(w) {
        let shape = model.params.value(id).shape();
        if shape != (d, out) {
            return Err(Error::Shape(format!("existing head {w} is {shape:?}, task needs {:?}", (d, out))));
        }
        return Ok(());
    }
    model.params.insert(w, xavier(d, out, rng))?;
    model.params.insert(b, Matrix::zeros(1, out))?;
    Ok(())
}

/// Global token `h*`: mean of the encoder outputs over all valid tokens.
pub fn pooled_graph(
    g: &mut Graph,
    model: &Model,
    sample: &PreparedSample,
    domain: &str,
    slots: &[Option<usize>],
    drop: Option<&[(f64, f64)]>,
) -> Result<Var> {
    let cfg = model.tokeniser();
    let a = crate::tokeniser::assemble_graph(g, &model.params, &model.registry, &cfg, sample, domain, slots)?;
    let visible: Vec<usize> = (0..a.token_validity.len()).filter(|&i| a.token_validity[i]).collect();
    if visible.is_empty() {
        return Err(Error::NoValidTokens(format!("sample of domain `{domain}`")));
    }
    let h = model.encode_graph(g, a.tokens, &visible, drop)?;
    Ok(g.mean_rows(h))
}

fn head_graph(g: &mut Graph, model: &Model, pooled: Var, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(&model.params, model.params.require(w)?);
    let bv = g.param(&model.params, model.params.require(b)?);
    let y = g.matmul(pooled, wv);
    Ok(g.add_row(y, bv))
}

fn full_slots(subset: &[usize]) -> Vec<Option<usize>> {
    subset.iter().copied().map(Some).collect()
}

/// Class logits (`1 × C`) without masking.
pub fn classify_forward(
    model: &Model,
    sample: &PreparedSample,
    domain: &str,
    variate_subset: &[usize],
) -> Result<Matrix> {
    let mut g = Graph::new();
    let h = pooled_graph(&mut g, model, sample, domain, &full_slots(variate_subset), None)?;
    let y = head_graph(&mut g, model, h, CLS_W, CLS_B)?;
    Ok(g.value(y).clone())
}

/// Regression output (`1 × target_dim`) without masking.
pub fn regress_forward(
    model: &Model,
    sample: &PreparedSample,
    domain: &str,
    variate_subset: &[usize],
) -> Result<Matrix> {
    let mut g = Graph::new();
    let h = pooled_graph(&mut g, model, sample, domain, &full_slots(variate_subset), None)?;
    let y = head_graph(&mut g, model, h, REG_W, REG_B)?;
    Ok(g.value(y).clone())
}

/// A crop of `context + ceil(horizon / P)·P` points, normalised with the
/// per-variate mean and σ of the context part only.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastWindow {
    pub window: PreparedSample,
    pub context: usize,
    pub horizon: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn window_len(context: usize, horizon: usize, patch: usize) -> usize {
    context + horizon.div_ceil(patch) * patch
}

/// Cuts a forecast window at `offset` and normalises it by context stats.
pub fn forecast_window(
    series: &Matrix,
    context: usize,
    horizon: usize,
    patch: usize,
    offset: usize,
) -> Result<ForecastWindow> {
    if horizon == 0 {
        return Err(Error::Invalid("forecast horizon must be positive".into()));
    }
    if context == 0 || context % patch != 0 {
        return Err(Error::Config(format!(
            "forecast context {context} is not a positive multiple of patch size {patch}"
        )));
    }
    let len = window_len(context, horizon, patch);
    let (v, t) = series.shape();
    if offset + context > t {
        return Err(Error::Shape(format!("series of {t} points cannot hold a context of {context} at {offset}")));
    }
    let mut values = Matrix::zeros(v, len);
    let avail = (t - offset).min(len);
    let mut time_validity = vec![false; len];
    time_validity[..avail].fill(true);
    let mut mean = Vec::with_capacity(v);
    let mut std = Vec::with_capacity(v);
    for r in 0..v {
        let src = &series.row(r)[offset..offset + avail];
        let ctx = &src[..context];
        let mu = ctx.iter().sum::<f64>() / context as f64;
        let var = ctx.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / context as f64;
        let sd = if var.sqrt() <= f64::EPSILON * mu.abs().max(1.0) { 1.0 } else { var.sqrt() };
        for (o, x) in values.row_mut(r).iter_mut().zip(src) {
            *o = (x - mu) / sd;
        }
        mean.push(mu);
        std.push(sd);
    }
    Ok(ForecastWindow {
        window: PreparedSample { values, time_validity, crop_offset: offset },
        context,
        horizon,
        mean,
        std,
    })
}

/// Prefix plan: context patches visible, horizon patches masked.
pub fn forecast_plan(variates: usize, window: &ForecastWindow, patch: usize) -> MaskPlan {
    let patches = window.window.len() / patch;
    MaskPlan::prefix(variates, patches, window.context / patch)
}

/// Normalised prediction (`V × horizon`) for a prepared window. Values in
/// the horizon part of the window never reach the encoder.
pub fn forecast_normalized(
    model: &Model,
    window: &ForecastWindow,
    domain: &str,
    variate_subset: &[usize],
) -> Result<Matrix> {
    let p = model.config.patch_size;
    let plan = forecast_plan(variate_subset.len(), window, p);
    let full = model.forward_reconstruct(&window.window, domain, variate_subset, &plan)?;
    let (c, h) = (window.context, window.horizon);
    Ok(Matrix::from_fn(full.rows(), h, |r, t| full.get(r, c + t)))
}

/// Predicts `horizon` points after `context` (`V × C`, raw scale).
pub fn forecast(
    model: &Model,
    context: &Matrix,
    domain: &str,
    variate_subset: &[usize],
    horizon: usize,
) -> Result<Matrix> {
    let p = model.config.patch_size;
    let w = forecast_window(context, context.cols(), horizon, p, 0)?;
    let pred = forecast_normalized(model, &w, domain, variate_subset)?;
    Ok(Matrix::from_fn(pred.rows(), pred.cols(), |r, t| pred.get(r, t) * w.std[r] + w.mean[r]))
}

/// Repeats the last context value over the horizon.
pub fn persistence_forecast(window: &ForecastWindow) -> Matrix {
    let v = window.window.num_variates();
    Matrix::from_fn(v, window.horizon, |r, _| window.window.values.get(r, window.context - 1))
}

/// Mean squared error between `pred` and the true horizon of `window`
/// (normalised scale, valid points only).
pub fn horizon_mse(window: &ForecastWindow, pred: &Matrix) -> Result<f64> {
    let (c, h) = (window.context, window.horizon);
    if pred.cols() != h || pred.rows() != window.window.num_variates() {
        return Err(Error::Shape(format!("prediction {:?} for horizon {h}", pred.shape())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..pred.rows() {
        for t in 0..h {
            if window.window.time_validity[c + t] {
                let d = pred.get(r, t) - window.window.values.get(r, c + t);
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoValidTokens("forecast horizon has no observed points".into()));
    }
    Ok(sum / n as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// `1 − SS_res / SS_tot` pooled over target dimensions, each centred on its
/// own mean over the evaluation set.
pub fn r_squared(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape("R² needs matching, non-empty prediction and truth sets".into()));
    }
    let dims = truth[0].len();
    let n = truth.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for d in 0..dims {
        let mean = truth.iter().map(|t| t[d]).sum::<f64>() / n;
        for (p, t) in pred.iter().zip(truth) {
            ss_res += (t[d] - p[d]).powi(2);
            ss_tot += (t[d] - mean).powi(2);
        }
    }
    if ss_tot == 0.0 {
        return Err(Error::Invalid("R² is undefined for a constant target".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// One line of the evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// Writes `task,metric,value,seed`.
pub fn write_report(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("task,metric,value,seed\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.task, r.metric, r.value, r.seed));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-block `(attention, mlp)` keep factors for stochastic depth; the
/// drop rate grows linearly to `rate` at the last block.
pub fn drop_scales<R: Rng + ?Sized>(layers: usize, rate: f64, rng: &mut R) -> Vec<(f64, f64)> {
    (0..layers)
        .map(|i| {
            let p = if layers > 1 { rate * i as f64 / (layers - 1) as f64 } else { rate };
            let mut draw = || if p > 0.0 && rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) };
            (draw(), draw())
        })
        .collect()
}

struct TaskItem {
    domain: String,
    subset: Vec<usize>,
    sample: PreparedSample,
    label: Option<Label>,
    forecast: Option<ForecastWindow>,
}

fn class_of(label: &Option<Label>) -> Result<usize> {
    match label {
        Some(Label::Class(c)) => Ok(*c),
        _ => Err(Error::Data { entry: "sample".into(), message: "classification needs a class label".into() }),
    }
}

fn target_of(label: &Option<Label>) -> Result<&[f64]> {
    match label {
        Some(Label::Target(t)) => Ok(t),
        _ => Err(Error::Data { entry: "sample".into(), message: "regression needs a target label".into() }),
    }
}

fn make_item<R: Rng + ?Sized>(
    model: &Model,
    task: &TaskSpec,
    s: &TimeSeriesSample,
    rng: &mut R,
    random_crop: bool,
) -> Result<TaskItem> {
    let p = model.config.patch_size;
    let (sample, forecast) = match *task {
        TaskSpec::Forecasting { context, horizon } => {
            let len = window_len(context, horizon, p);
            let t = s.len();
            if t < context + horizon {
                return Err(Error::Data {
                    entry: s.domain.name.clone(),
                    message: format!("series of {t} points is shorter than context + horizon = {}", context + horizon),
                });
            }
            let max_off = t.saturating_sub(len).min(t - context - horizon);
            let off = if random_crop { rng.random_range(0..=max_off) } else { max_off };
            let w = forecast_window(&s.values, context, horizon, p, off)?;
            (w.window.clone(), Some(w))
        }
        _ => {
            let normalized = crate::corpus::normalize_channelwise(s);
            let cfg = model.tokeniser();
            let prepared = if random_crop || normalized.len() <= cfg.context_length {
                prepare(&normalized, cfg.context_length, p, rng)?
            } else {
                crop_at(&normalized, cfg.context_length, (normalized.len() - cfg.context_length) / 2)
            };
            (prepared, None)
        }
    };
    Ok(TaskItem {
        domain: s.domain.name.clone(),
        subset: s.variate_subset.clone(),
        sample,
        label: s.label.clone(),
        forecast,
    })
}

fn task_step(
    model: &Model,
    task: &TaskSpec,
    item: &TaskItem,
    cfg: &FinetuneConfig,
    drop: &[(f64, f64)],
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let slots = full_slots(&item.subset);
    let drop = if cfg.drop_path > 0.0 { Some(drop) } else { None };
    let loss = match task {
        TaskSpec::Classification { .. } => {
            let h = pooled_graph(&mut g, model, &item.sample, &item.domain, &slots, drop)?;
            let y = head_graph(&mut g, model, h, CLS_W, CLS_B)?;
            let (l, grad) = cross_entropy_with_grad(g.value(y), class_of(&item.label)?, cfg.label_smoothing)?;
            (g.objective(y, l, grad), l)
        }
        TaskSpec::Regression { .. } => {
            let h = pooled_graph(&mut g, model, &item.sample, &item.domain, &slots, drop)?;
            let y = head_graph(&mut g, model, h, REG_W, REG_B)?;
            let (l, grad) = regression_mse_with_grad(g.value(y), target_of(&item.label)?)?;
            (g.objective(y, l, grad), l)
        }
        TaskSpec::Forecasting { .. } => {
            let w = item.forecast.as_ref().expect("forecast window");
            let plan = forecast_plan(item.subset.len(), w, model.config.patch_size);
            let r = model.reconstruct_graph(&mut g, &item.sample, &item.domain, &slots, &plan, drop)?;
            let (node, report): (Var, LossReport) = total_loss_graph(
                &mut g,
                r.prediction,
                &item.sample.values,
                &r.point_validity,
                model.config.patch_size,
                cfg.ncc_lambda,
            )?;
            (node, report.total)
        }
    };
    if !loss.1.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    Ok((loss.1, g.backward(loss.0, model.params.len())))
}

/// Result of [`finetune`].
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub report: Vec<MetricRow>,
}

fn task_samples<'a>(corpus: &'a Corpus, domain: Option<&str>) -> Vec<&'a TimeSeriesSample> {
    corpus.samples.iter().filter(|s| domain.is_none_or(|d| s.domain.name == d)).collect()
}

fn prepare_model(ckpt: &Checkpoint, corpus: &Corpus, task: &TaskSpec, seed: u64) -> Result<Model> {
    let mut model = ckpt.model.clone();
    task.validate(model.config.patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[10]));
    for d in &corpus.domains {
        include_domain(&mut model, d, &mut rng)?;
    }
    ensure_head(&mut model, task, &mut rng)?;
    Ok(model)
}

/// Fine-tunes on the samples of `domain` (all samples if `None`) and
/// reports held-out metrics.
pub fn finetune(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    domain: Option<&str>,
    task: &TaskSpec,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let mut model = prepare_model(ckpt, corpus, task, cfg.seed)?;
    let samples = task_samples(corpus, domain);
    if samples.is_empty() {
        return Err(Error::Config("no samples for the fine-tuning task".into()));
    }
    let (train, val) = split_indices(samples.len(), cfg.val_fraction, cfg.seed);
    let layers = model.config.encoder.layers;
    let mut optimizer = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let pool = thread_pool()?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[11, epoch as u64])),
        );
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            let mut drops = Vec::with_capacity(chunk.len());
            for (k, &i) in chunk.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[12, step as u64, k as u64]));
                items.push(make_item(&model, task, samples[i], &mut rng, true)?);
                drops.push(drop_scales(layers, cfg.drop_path, &mut rng));
            }
            let indexed: Vec<usize> = (0..items.len()).collect();
            let m = &model;
            let results = pool
                .install(|| par_map(&indexed, |&k| task_step(m, task, &items[k], cfg, &drops[k])))
                .map_err(|e| match e {
                    Error::Diverged { .. } => Error::Diverged { step },
                    other => other,
                })?;
            let n = results.len() as f64;
            let mut grads = Gradients::new(model.params.len());
            let mut batch_loss = 0.0;
            for (l, g) in &results {
                grads.merge(g);
                batch_loss += l;
            }
            grads.scale(1.0 / n);
            let lr = lr_at(step, total, cfg.lr, cfg.warmup_fraction)?;
            let decay = cfg.layer_decay;
            optimizer
                .update(&mut model.params, &grads, lr, &|name| layer_scale(name, layers, decay))
                .map_err(|_| Error::Diverged { step })?;
            sum += batch_loss / n;
            step += 1;
        }
        let mean = sum / per_epoch as f64;
        log::info!("fine-tune epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let eval_idx = if val.is_empty() { &train } else { &val };
    let eval_samples: Vec<&TimeSeriesSample> = eval_idx.iter().map(|&i| samples[i]).collect();
    let report = pool.install(|| evaluate_samples(&model, task, &eval_samples, cfg.seed))?;
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            model,
            optimizer: None,
            train_state: ckpt.train_state.clone(),
            task: Some(task.clone()),
        },
        epoch_losses,
        report,
    })
}

/// Held-out metrics of `model` on `samples`.
pub fn evaluate_samples(
    model: &Model,
    task: &TaskSpec,
    samples: &[&TimeSeriesSample],
    seed: u64,
) -> Result<Vec<MetricRow>> {
    if samples.is_empty() {
        return Err(Error::Config("no evaluation samples".into()));
    }
    let items: Vec<TaskItem> = samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[13, k as u64]));
            make_item(model, task, s, &mut rng, false)
        })
        .collect::<Result<_>>()?;
    let row = |metric: &str, value: f64| MetricRow { task: task.tag().into(), metric: metric.into(), value, seed };
    match task {
        TaskSpec::Classification { .. } => {
            let preds = par_map(&items, |it| {
                let logits = classify_forward(model, &it.sample, &it.domain, &it.subset)?;
                let z = logits.row(0);
                Ok((0..z.len()).fold(0, |best, j| if z[j] > z[best] { j } else { best }))
            })?;
            let truth: Vec<usize> = items.iter().map(|it| class_of(&it.label)).collect::<Result<_>>()?;
            Ok(vec![row("ACC", accuracy(&preds, &truth))])
        }
        TaskSpec::Regression { .. } => {
            let preds =
                par_map(&items, |it| Ok(regress_forward(model, &it.sample, &it.domain, &it.subset)?.into_vec()))?;
            let truth: Vec<Vec<f64>> =
                items.iter().map(|it| target_of(&it.label).map(<[f64]>::to_vec)).collect::<Result<_>>()?;
            let mse = preds
                .iter()
                .zip(&truth)
                .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64)
                .sum::<f64>()
                / truth.len() as f64;
            Ok(vec![row("R2", r_squared(&preds, &truth)?), row("MSE", mse)])
        }
        TaskSpec::Forecasting { .. } => {
            let scores = par_map(&items, |it| {
                let w = it.forecast.as_ref().expect("forecast window");
                let pred = forecast_normalized(model, w, &it.domain, &it.subset)?;
                Ok((horizon_mse(w, &pred)?, horizon_mse(w, &persistence_forecast(w))?))
            })?;
            let n = scores.len() as f64;
            let mse = scores.iter().map(|s| s.0).sum::<f64>() / n;
            let base = scores.iter().map(|s| s.1).sum::<f64>() / n;
            Ok(vec![row("MSE", mse), row("MSE_persistence", base)])
        }
    }
}

/// Evaluates a checkpoint on the held-out split of `corpus` (the same split
/// [`finetune`] uses for the seed). Missing heads or domains are added with
/// seeded initialisation, so an untrained checkpoint scores at chance.
pub fn evaluate(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    domain: Option<&str>,
    task: &TaskSpec,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let model = prepare_model(ckpt, corpus, task, seed)?;
    let samples = task_samples(corpus, domain);
    if samples.is_empty() {
        return Err(Error::Config("no samples for the evaluation task".into()));
    }
    let (train, val) = split_indices(samples.len(), val_fraction, seed);
    let idx = if val.is_empty() { train } else { val };
    let eval: Vec<&TimeSeriesSample> = idx.iter().map(|&i| samples[i]).collect();
    thread_pool()?.install(|| evaluate_samples(&model, task, &eval, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        let mut cfg = ModelConfig::tiny();
        cfg.patch_size = 4;
        cfg.context_length = 16;
        let mut m = Model::new(cfg, 0).unwrap();
        m.register_domain(DomainSpec::with_count("d", 2).unwrap(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m
    }

    fn sample() -> PreparedSample {
        PreparedSample::full(Matrix::from_fn(2, 16, |r, c| ((r * 5 + c) as f64 * 0.4).sin()))
    }

    #[test]
    fn include_new_domain_leaves_others_untouched() {
        let mut m = model();
        let before = m.params.clone();
        let plan = MaskPlan::all_visible(2, 4);
        let out_before = m.forward_reconstruct(&sample(), "d", &[0, 1], &plan).unwrap();
        let spec = DomainSpec::with_count("new", 32).unwrap();
        assert!(include_domain(&mut m, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
        for (id, name, value) in before.iter() {
            assert_eq!(m.params.value(id), value, "{name}");
        }
        assert_eq!(m.forward_reconstruct(&sample(), "d", &[0, 1], &plan).unwrap(), out_before);
        assert_eq!(m.variate_embeddings("new").unwrap().shape(), (32, 32));
        assert!(!include_domain(&mut m, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());

        let mut a = model();
        let mut b = model();
        include_domain(&mut a, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        include_domain(&mut b, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.variate_embeddings("new").unwrap(), b.variate_embeddings("new").unwrap());
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut m = model();
        let task = TaskSpec::Classification { num_classes: 3 };
        ensure_head(&mut m, &task, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let id = m.params.id(CLS_W).unwrap();
        m.params.replace(id, Matrix::zeros(32, 3));
        let z = classify_forward(&m, &sample(), "d", &[0, 1]).unwrap();
        assert_eq!(z.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_ignores_padded_variates_and_duplicates() {
        let mut m = model();
        ensure_head(&mut m, &TaskSpec::Regression { target_dim: 2 }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = sample();
        let mut g = Graph::new();
        let a = pooled_graph(&mut g, &m, &s, "d", &[Some(0), Some(1)], None).unwrap();
        let a = g.value(a).clone();
        let padded = crate::training::pad_variates(&s, 3);
        let mut g = Graph::new();
        let b = pooled_graph(&mut g, &m, &padded, "d", &[Some(0), Some(1), None], None).unwrap();
        assert_eq!(&a, g.value(b));
        let y = regress_forward(&m, &s, "d", &[0, 1]).unwrap();
        assert_eq!(y.shape(), (1, 2));
    }

    #[test]
    fn r_squared_of_constant_mean_predictor_is_zero() {
        let truth = vec![vec![1.0], vec![2.0], vec![3.0]];
        let mean = vec![vec![2.0]; 3];
        assert!(r_squared(&mean, &truth).unwrap().abs() < 1e-15);
        assert!(r_squared(&vec![vec![0.0]; 3], &truth).unwrap() < 0.0);
        assert_eq!(r_squared(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn forecast_ignores_horizon_values() {
        let m = model();
        let series = Matrix::from_fn(2, 24, |r, c| ((r + c) as f64 * 0.3).cos());
        let w = forecast_window(&series, 8, 6, 4, 0).unwrap();
        assert_eq!(w.window.len(), 16);
        let a = forecast_normalized(&m, &w, "d", &[0, 1]).unwrap();
        assert_eq!(a.shape(), (2, 6));
        let mut w2 = w.clone();
        for c in 8..16 {
            w2.window.values.set(0, c, 50.0);
            w2.window.values.set(1, c, -50.0);
        }
        assert_eq!(forecast_normalized(&m, &w2, "d", &[0, 1]).unwrap(), a);
        assert!(forecast_window(&series, 6, 4, 4, 0).is_err());
        assert!(forecast_window(&series, 8, 0, 4, 0).is_err());
        let raw = forecast(&m, &Matrix::from_fn(2, 8, |_, c| c as f64), "d", &[0, 1], 3).unwrap();
        assert_eq!(raw.shape(), (2, 3));
    }

    #[test]
    fn drop_scales_are_unbiased_per_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20000;
        let mut mean = [0.0; 4];
        for _ in 0..n {
            for (i, (a, _)) in drop_scales(4, 0.3, &mut rng).into_iter().enumerate() {
                mean[i] += a / n as f64;
            }
        }
        assert_eq!(drop_scales(4, 0.0, &mut rng), vec![(1.0, 1.0); 4]);
        for m in mean {
            assert!((m - 1.0).abs() < 0.03, "{m}");
        }
    }
}
