//! Multi-domain pre-training: batch assembly with variate padding, dual
//! masking per sample, per-sample loss normalisation, AdamW with a warmup +
//! cosine schedule, resumable state and the loss-history CSV.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{prepare, Corpus, PreparedSample, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_loss_graph, LossReport, DEFAULT_NCC_LAMBDA};
use crate::masking::{draw_dual_mask, MaskPlan, MaskScheme, DEFAULT_MASK_RATIO};
use crate::matrix::Matrix;
use crate::model::{DropScales, Model};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::Gradients;

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "MDTS_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub ncc_lambda: f64,
    pub seed: u64,
    /// Fraction of the corpus held out for validation.
    pub val_fraction: f64,
    /// Optional per-domain sampling weights; unlisted domains weigh 1.
    pub domain_weights: BTreeMap<String, f64>,
    /// Pins the masking scheme instead of the 75/25 draw.
    pub force_scheme: Option<MaskScheme>,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.05,
            mask_ratio: DEFAULT_MASK_RATIO,
            ncc_lambda: DEFAULT_NCC_LAMBDA,
            seed: 0,
            val_fraction: 0.1,
            domain_weights: BTreeMap::new(),
            force_scheme: None,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.ncc_lambda < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("λ and weight decay must be non-negative".into()));
        }
        if self.domain_weights.values().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("domain weights must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..AdamWConfig::default() }
    }
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub mse: f64,
    pub ncc: f64,
    pub total: f64,
    pub lr: f64,
}

/// Everything needed to resume a run at an optimiser-step boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Optimiser steps completed.
    pub step: usize,
    pub total_steps: usize,
    /// Mean batch loss of every completed step.
    pub step_losses: Vec<LossReport>,
    pub step_lrs: Vec<f64>,
    pub history: Vec<HistoryRow>,
}

/// A batch padded to `V̄` variates.
#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub max_variates: usize,
}

#[derive(Clone, Debug)]
pub struct BatchItem {
    pub domain: String,
    /// `V̄ × T̄`; padded rows are zero.
    pub sample: PreparedSample,
    /// Catalogue index per row, `None` for padding.
    pub slots: Vec<Option<usize>>,
    pub plan: MaskPlan,
}

/// Deterministic seed from a base seed and a tag path (SplitMix64 mixing).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &t in tags.iter().chain(std::iter::once(&0x5eed)) {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15 ^ t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z = x ^ (x >> 31);
    }
    z
}

/// Appends `extra` zero rows (batch-padding variates).
pub fn pad_variates(sample: &PreparedSample, variates: usize) -> PreparedSample {
    let (v, t) = sample.values.shape();
    let mut data = sample.values.as_slice().to_vec();
    data.resize(variates.max(v) * t, 0.0);
    PreparedSample {
        values: Matrix::from_vec(variates.max(v), t, data),
        time_validity: sample.time_validity.clone(),
        crop_offset: sample.crop_offset,
    }
}

/// Crops/pads each sample, draws its dual mask, and pads everything to the
/// widest sample in the batch. `rngs[i]` drives crop and mask of sample `i`.
pub fn assemble_batch(
    samples: &[&TimeSeriesSample],
    model: &Model,
    mask_ratio: f64,
    force: Option<MaskScheme>,
    rngs: &mut [ChaCha8Rng],
) -> Result<Batch> {
    let cfg = model.tokeniser();
    let max_variates = samples.iter().map(|s| s.num_variates()).max().unwrap_or(0);
    let mut items = Vec::with_capacity(samples.len());
    for (s, rng) in samples.iter().zip(rngs.iter_mut()) {
        if !model.registry.contains(&s.domain.name) {
            return Err(Error::UnknownDomain(s.domain.name.clone()));
        }
        let prepared = prepare(s, cfg.context_length, cfg.patch_size, rng)?;
        let plan = draw_dual_mask(s.num_variates(), cfg.num_patches(), mask_ratio, force, rng)?;
        let mut slots: Vec<Option<usize>> = s.variate_subset.iter().copied().map(Some).collect();
        slots.resize(max_variates, None);
        items.push(BatchItem {
            domain: s.domain.name.clone(),
            sample: pad_variates(&prepared, max_variates),
            slots,
            plan: plan.padded_to(max_variates),
        });
    }
    Ok(Batch { items, max_variates })
}

/// Loss and parameter gradients of one reconstruction.
pub fn reconstruction_step(
    model: &Model,
    item: &BatchItem,
    lambda: f64,
    drop: Option<&DropScales>,
) -> Result<(LossReport, Gradients)> {
    let mut g = Graph::new();
    let r = model.reconstruct_graph(&mut g, &item.sample, &item.domain, &item.slots, &item.plan, drop)?;
    let (loss, report) = total_loss_graph(
        &mut g,
        r.prediction,
        &item.sample.values,
        &r.point_validity,
        model.config.patch_size,
        lambda,
    )?;
    if !report.total.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    Ok((report, g.backward(loss, model.params.len())))
}

/// Runs `f` on every item in parallel and returns results in item order.
pub(crate) fn par_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    items.par_iter().map(&f).collect()
}

/// Sums per-sample gradients in order and averages the reports.
pub(crate) fn reduce(results: Vec<(LossReport, Gradients)>, num_params: usize) -> (LossReport, Gradients) {
    let n = results.len() as f64;
    let mut grads = Gradients::new(num_params);
    let (mut mse, mut ncc, mut total, mut lambda) = (0.0, 0.0, 0.0, 0.0);
    for (r, g) in &results {
        grads.merge(g);
        mse += r.mse;
        ncc += r.ncc;
        total += r.total;
        lambda = r.lambda;
    }
    grads.scale(1.0 / n);
    (LossReport { mse: mse / n, ncc: ncc / n, total: total / n, lambda }, grads)
}

/// Worker-thread pool sized from [`WORKERS_ENV`] (all cores if unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            v.trim().parse::<usize>().map_err(|_| Error::Config(format!("{WORKERS_ENV}={v} is not a thread count")))?
        }
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Seeded 90/10-style split of sample indices into (train, validation).
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1])));
    let n_val = if n > 1 { ((n as f64 * val_fraction).round() as usize).min(n - 1) } else { 0 };
    let mut val = idx.split_off(n - n_val);
    let mut train = idx;
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Pre-training driver; resumable at any optimiser step.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            optimizer: AdamW::new(config.adamw()),
            state: TrainState {
                config,
                step: 0,
                total_steps: 0,
                step_losses: Vec::new(),
                step_lrs: Vec::new(),
                history: Vec::new(),
            },
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let state =
            ckpt.train_state.ok_or_else(|| Error::Config("checkpoint carries no training state to resume".into()))?;
        let optimizer = ckpt.optimizer.unwrap_or_else(|| AdamW::new(state.config.adamw()));
        Ok(Self { model: ckpt.model, optimizer, state })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            train_state: Some(self.state.clone()),
            task: None,
        }
    }

    fn steps_per_epoch(&self, train: usize) -> usize {
        train.div_ceil(self.state.config.batch_size)
    }

    /// Training order for `epoch`: a seeded permutation, or a weighted draw
    /// with replacement when domain weights are set.
    fn epoch_order(&self, corpus: &Corpus, train: &[usize], epoch: usize) -> Vec<usize> {
        let cfg = &self.state.config;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, epoch as u64]));
        if cfg.domain_weights.is_empty() {
            let mut order = train.to_vec();
            order.shuffle(&mut rng);
            return order;
        }
        let weights: Vec<f64> =
            train.iter().map(|&i| *cfg.domain_weights.get(&corpus.samples[i].domain.name).unwrap_or(&1.0)).collect();
        let total: f64 = weights.iter().sum();
        (0..train.len())
            .map(|_| {
                let mut u = rng.random::<f64>() * total;
                for (k, w) in weights.iter().enumerate() {
                    if u < *w {
                        return train[k];
                    }
                    u -= w;
                }
                train[train.len() - 1]
            })
            .collect()
    }

    /// Mean reconstruction loss on `indices` with per-sample masks fixed by
    /// the seed, so epochs are comparable.
    pub fn evaluate(&self, corpus: &Corpus, indices: &[usize]) -> Result<Option<LossReport>> {
        if indices.is_empty() {
            return Ok(None);
        }
        let cfg = &self.state.config;
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let mut rng = [ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, i as u64]))];
            let batch = assemble_batch(&[&corpus.samples[i]], &self.model, cfg.mask_ratio, cfg.force_scheme, &mut rng)?;
            out.push(batch.items.into_iter().next().expect("one item"));
        }
        let reports = par_map(&out, |item| {
            let mut g = Graph::new();
            let r = self.model.reconstruct_graph(&mut g, &item.sample, &item.domain, &item.slots, &item.plan, None)?;
            let pred = g.value(r.prediction);
            crate::losses::total_loss(
                &item.sample.values,
                pred,
                &r.point_validity,
                self.model.config.patch_size,
                cfg.ncc_lambda,
            )
        })?;
        let n = reports.len() as f64;
        Ok(Some(LossReport {
            mse: reports.iter().map(|r| r.mse).sum::<f64>() / n,
            ncc: reports.iter().map(|r| r.ncc).sum::<f64>() / n,
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
            lambda: cfg.ncc_lambda,
        }))
    }

    /// Trains until `stop_at` optimiser steps (or the end of the schedule).
    /// The corpus should already be channel-wise normalised.
    pub fn run(&mut self, corpus: &Corpus, stop_at: Option<usize>) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        for s in &corpus.samples {
            if !self.model.registry.contains(&s.domain.name) {
                return Err(Error::UnknownDomain(s.domain.name.clone()));
            }
        }
        let cfg = self.state.config.clone();
        let (train, val) = split_indices(corpus.len(), cfg.val_fraction, cfg.seed);
        let per_epoch = self.steps_per_epoch(train.len());
        let total = per_epoch * cfg.epochs;
        if self.state.total_steps == 0 {
            self.state.total_steps = total;
        } else if self.state.total_steps != total {
            return Err(Error::Config(format!(
                "resumed schedule has {total} steps but the checkpoint was started with {}",
                self.state.total_steps
            )));
        }
        let end = stop_at.unwrap_or(total).min(total);
        let pool = thread_pool()?;
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();
        while self.state.step < end {
            let step = self.state.step;
            let epoch = step / per_epoch;
            if epoch != order_epoch {
                order = self.epoch_order(corpus, &train, epoch);
                order_epoch = epoch;
            }
            let b = step % per_epoch;
            let chosen = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let samples: Vec<&TimeSeriesSample> = chosen.iter().map(|&i| &corpus.samples[i]).collect();
            let mut rngs: Vec<ChaCha8Rng> = chosen
                .iter()
                .enumerate()
                .map(|(k, &i)| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[4, step as u64, k as u64, i as u64])))
                .collect();
            let batch = assemble_batch(&samples, &self.model, cfg.mask_ratio, cfg.force_scheme, &mut rngs)?;
            let model = &self.model;
            let results = pool
                .install(|| par_map(&batch.items, |item| reconstruction_step(model, item, cfg.ncc_lambda, None)))
                .map_err(|e| match e {
                    Error::Diverged { .. } => Error::Diverged { step },
                    other => other,
                })?;
            let (report, grads) = reduce(results, self.model.params.len());
            let lr = lr_at(step, total, cfg.lr, cfg.warmup_fraction)?;
            self.optimizer
                .update(&mut self.model.params, &grads, lr, &|_| 1.0)
                .map_err(|_| Error::Diverged { step })?;
            self.state.step_losses.push(report);
            self.state.step_lrs.push(lr);
            self.state.step += 1;
            log::debug!("step {step} loss {:.6} lr {lr:.3e}", report.total);

            if self.state.step % per_epoch == 0 {
                let losses = &self.state.step_losses[self.state.step - per_epoch..];
                let n = losses.len() as f64;
                let row = |split: &str, r: LossReport| HistoryRow {
                    epoch,
                    split: split.into(),
                    mse: r.mse,
                    ncc: r.ncc,
                    total: r.total,
                    lr,
                };
                let train_report = LossReport {
                    mse: losses.iter().map(|r| r.mse).sum::<f64>() / n,
                    ncc: losses.iter().map(|r| r.ncc).sum::<f64>() / n,
                    total: losses.iter().map(|r| r.total).sum::<f64>() / n,
                    lambda: cfg.ncc_lambda,
                };
                self.state.history.push(row("train", train_report));
                if let Some(v) = pool.install(|| self.evaluate(corpus, &val))? {
                    self.state.history.push(row("val", v));
                }
                log::info!("epoch {epoch}: train total {:.6}", train_report.total);
            }
        }
        Ok(())
    }
}

/// Pre-trains `model` on the channel-wise normalised `corpus`.
pub fn pretrain(model: Model, corpus: &Corpus, config: TrainConfig) -> Result<(Checkpoint, Vec<HistoryRow>)> {
    let normalized = corpus.normalized();
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(&normalized, None)?;
    let history = trainer.state.history.clone();
    Ok((trainer.checkpoint(), history))
}

/// Writes `epoch,split,mse,ncc,total,lr`.
pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = String::from("epoch,split,mse,ncc,total,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.split, r.mse, r.ncc, r.total, r.lr));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a history file written by [`write_history`].
pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data { entry: path.display().to_string(), message: e.to_string() })?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Data { entry: path.display().to_string(), message: e.to_string() }))
        .collect()
}
