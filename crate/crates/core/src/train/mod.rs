//! Optimization loop: step-wise learning-rate schedule, AdamW updates,
//! periodic evaluation, checkpointing and the ablation harness.

mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use optim::AdamW;

use crate::data::{batch_iterator, SampleSource};
use crate::depth::{DepthMap, Sample, ValidRange};
use crate::error::{FdctError, Result};
use crate::graph::Graph;
use crate::losses::{total_loss_with_grad, LossBundle, LossConfig};
use crate::metrics::{aggregate, MetricsReport, PixelStats};
use crate::model::{tensor_to_depths, Checkpoint, FdctConfig, FdctNetwork, TrainingState};
use crate::tensor::Tensor;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const STEP_LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// 0-based epochs at whose start the rate is multiplied by `lr_factor`.
    pub milestone_epochs: Vec<usize>,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            milestone_epochs: vec![5, 15, 25, 35],
            lr_factor: 0.5,
            epochs: 40,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
            eval_every: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FdctError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be >= 0", self.initial_lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor {} must lie in (0, 1)", self.lr_factor));
        }
        if self.milestone_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "milestones {:?} must be strictly increasing",
                self.milestone_epochs
            ));
        }
        if self
            .milestone_epochs
            .last()
            .is_some_and(|m| *m >= self.epochs)
        {
            return bad(format!(
                "milestones {:?} must be below epochs ({})",
                self.milestone_epochs, self.epochs
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0)
        {
            return bad("optimizer constants out of range".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be > 0".into());
        }
        Ok(())
    }

    pub fn optimizer(&self, net: &FdctNetwork) -> AdamW {
        AdamW::new(
            net.params(),
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        )
    }
}

/// `initial_lr * lr_factor^(milestones <= epoch)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(FdctError::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    let passed = cfg.milestone_epochs.iter().filter(|m| **m <= epoch).count();
    Ok(cfg.initial_lr * cfg.lr_factor.powi(passed as i32))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean loss over the samples that had valid pixels, before the update.
    pub loss: LossBundle,
    pub grad_norm: f64,
    /// Whether parameters were updated.
    pub updated: bool,
}

fn batch_id(batch: &[Sample]) -> String {
    batch
        .iter()
        .map(|s| s.id.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

/// Forward pass and loss of a batch plus the gradient with respect to the
/// `(1, N, H, W)` prediction.
pub fn batch_loss(
    pred: &[DepthMap],
    batch: &[Sample],
    loss_cfg: &LossConfig,
    range: ValidRange,
) -> Result<(LossBundle, Vec<f64>)> {
    let mut acc = LossBundle::default();
    let mut grads = Vec::with_capacity(batch.len());
    let mut active = 0usize;
    for (p, s) in pred.iter().zip(batch) {
        let (b, g) = total_loss_with_grad(p, &s.gt_depth, &s.mask, range, loss_cfg)?;
        if b.active {
            active += 1;
            acc.total += b.total;
            acc.huber += b.huber;
            acc.ssim_term += b.ssim_term;
            acc.smooth += b.smooth;
            acc.valid_pixel_count += b.valid_pixel_count;
        }
        grads.push((b.active, g));
    }
    let mut seed = Vec::with_capacity(grads.iter().map(|(_, g)| g.len()).sum());
    if active > 0 {
        let inv = 1.0 / active as f64;
        acc.total *= inv;
        acc.huber *= inv;
        acc.ssim_term *= inv;
        acc.smooth *= inv;
        acc.active = true;
    }
    for (is_active, g) in grads {
        let scale = if is_active { 1.0 / active as f64 } else { 0.0 };
        seed.extend(g.into_iter().map(|v| v * scale));
    }
    Ok((acc, seed))
}

/// One optimization step on `batch`; parameters are untouched when no sample
/// has valid pixels.
pub fn train_step(
    net: &mut FdctNetwork,
    opt: &mut AdamW,
    batch: &[Sample],
    loss_cfg: &LossConfig,
    range: ValidRange,
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(FdctError::Input("empty batch".into()));
    }
    let pairs: Vec<_> = batch.iter().map(|s| (&s.rgb, &s.raw_depth)).collect();
    let input = net.prepare_inputs(&pairs)?;
    let non_finite = || FdctError::NonFiniteLoss {
        batch_id: batch_id(batch),
    };
    let (loss, mut grads) = {
        let mut g = Graph::new(net.params());
        let out = net.forward_graph(&mut g, &input)?;
        let pred = tensor_to_depths(g.value(out)).map_err(|_| non_finite())?;
        let (loss, seed) = batch_loss(&pred, batch, loss_cfg, range)?;
        if !loss.total.is_finite() || seed.iter().any(|v| !v.is_finite()) {
            return Err(non_finite());
        }
        if !loss.active {
            return Ok(StepOutcome {
                loss,
                grad_norm: 0.0,
                updated: false,
            });
        }
        let seed = Tensor::from_vec(g.shape(out), seed.into_iter().map(|v| v as f32).collect());
        (loss, g.backward(out, seed))
    };
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(non_finite());
    }
    if let Some(clip) = grad_clip {
        if grad_norm > clip {
            let s = (clip / grad_norm) as f32;
            grads.grads.iter_mut().flatten().for_each(|v| *v *= s);
        }
    }
    opt.step(net.params_mut(), &grads, lr);
    Ok(StepOutcome {
        loss,
        grad_norm,
        updated: true,
    })
}

/// Pooled metrics of `net` on `source`, with predictions clamped to
/// `[0, depth_max]`, plus per-sample statistics.
pub fn evaluate<S: SampleSource + ?Sized>(
    net: &FdctNetwork,
    source: &S,
    range: ValidRange,
    batch_size: usize,
) -> Result<(MetricsReport, Vec<(String, PixelStats)>)> {
    let dmax = net.config().depth_max;
    evaluate_with(source, range, batch_size, |batch| {
        let pairs: Vec<_> = batch.iter().map(|s| (&s.rgb, &s.raw_depth)).collect();
        Ok(net
            .predict_batch(&pairs)?
            .into_iter()
            .map(|d| d.clamped(0.0, dmax))
            .collect())
    })
}

/// Metrics of an arbitrary per-batch predictor, e.g. the raw sensor depth.
pub fn evaluate_with<S: SampleSource + ?Sized>(
    source: &S,
    range: ValidRange,
    batch_size: usize,
    mut predict: impl FnMut(&[Sample]) -> Result<Vec<DepthMap>>,
) -> Result<(MetricsReport, Vec<(String, PixelStats)>)> {
    let mut per_sample = Vec::with_capacity(source.len());
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = chunk
            .iter()
            .map(|i| source.sample(*i))
            .collect::<Result<Vec<_>>>()?;
        let preds = predict(&batch)?;
        for (p, s) in preds.iter().zip(&batch) {
            per_sample.push((
                s.id.clone(),
                PixelStats::from_maps(p, &s.gt_depth, &s.mask, range)?,
            ));
        }
    }
    let stats: Vec<PixelStats> = per_sample.iter().map(|(_, s)| *s).collect();
    Ok((aggregate(&stats), per_sample))
}

/// Copy-raw-depth baseline metrics.
pub fn evaluate_raw_depth<S: SampleSource + ?Sized>(
    source: &S,
    range: ValidRange,
) -> Result<(MetricsReport, Vec<(String, PixelStats)>)> {
    evaluate_with(source, range, 8, |batch| {
        Ok(batch.iter().map(|s| s.raw_depth.clone()).collect())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean batch loss over the epoch's active steps.
    pub train_loss: Option<f64>,
    pub val: Option<MetricsReport>,
}

/// One line of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub huber: f64,
    pub ssim_term: f64,
    pub smooth: f64,
    pub valid_pixels: usize,
    pub grad_norm: f64,
    pub updated: bool,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for checkpoints, history and the step log.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many global steps (the run can be resumed later).
    pub max_steps: Option<u64>,
    pub resume: Option<Checkpoint>,
    pub range: ValidRange,
    pub eval_batch_size: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// Steps run by this call.
    pub steps: Vec<StepRecord>,
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
    pub best_rmse: Option<f64>,
}

/// Trains `net` for `cfg.epochs` epochs over `train`, evaluating on `val`
/// every `cfg.eval_every` epochs and after the final one.
pub fn fit<T: SampleSource + ?Sized, V: SampleSource + ?Sized>(
    net: &mut FdctNetwork,
    train: &T,
    val: Option<&V>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    opts: FitOptions,
) -> Result<FitOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train.is_empty() {
        return Err(FdctError::Dataset("training set is empty".into()));
    }
    let range = opts.range;
    let mut opt = cfg.optimizer(net);
    let mut state = TrainingState {
        epoch: 0,
        batch_in_epoch: 0,
        global_step: 0,
        shuffle_seed: cfg.seed,
        history: Vec::new(),
    };
    if let Some(ck) = &opts.resume {
        ck.load_into(net)?;
        if let Some(o) = &ck.optimizer {
            opt = AdamW::from_state(net.params(), o)?;
        }
        if let Some(t) = &ck.training {
            state = t.clone();
        }
    }

    let out_dir = opts.out_dir.as_deref();
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| FdctError::io(dir, e))?;
            let path = dir.join(STEP_LOG_FILE);
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(&path)
                .map_err(|e| FdctError::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };

    let mut best_rmse = state
        .history
        .iter()
        .filter_map(|r| r.val.as_ref().and_then(|v| v.rmse))
        .fold(None, |acc: Option<f64>, x| {
            Some(acc.map_or(x, |a| a.min(x)))
        });
    let mut best = None;
    let mut steps = Vec::new();
    let eval_bs = opts.eval_batch_size.unwrap_or(cfg.batch_size);

    let snapshot = |net: &FdctNetwork, opt: &AdamW, state: &TrainingState| {
        let mut ck = Checkpoint::from_network(net);
        ck.optimizer = Some(opt.state());
        ck.training = Some(state.clone());
        ck
    };

    'epochs: while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_at(cfg, epoch)?;
        let mut loss_sum = 0.0;
        let mut active_steps = 0usize;
        for batch in batch_iterator(train, cfg.batch_size, state.shuffle_seed, epoch)?
            .skip(state.batch_in_epoch)
        {
            if opts.max_steps.is_some_and(|m| state.global_step >= m) {
                break 'epochs;
            }
            let batch = batch?;
            let out = train_step(net, &mut opt, &batch, loss_cfg, range, lr, cfg.grad_clip)?;
            state.global_step += 1;
            state.batch_in_epoch += 1;
            if out.loss.active {
                loss_sum += out.loss.total;
                active_steps += 1;
            }
            let rec = StepRecord {
                epoch,
                step: state.global_step,
                lr,
                total: out.loss.total,
                huber: out.loss.huber,
                ssim_term: out.loss.ssim_term,
                smooth: out.loss.smooth,
                valid_pixels: out.loss.valid_pixel_count,
                grad_norm: out.grad_norm,
                updated: out.updated,
            };
            log::debug!("epoch {epoch} step {} loss {:.6}", rec.step, rec.total);
            if let Some((w, path)) = log.as_mut() {
                let line = serde_json::to_string(&rec).expect("step record serializes");
                writeln!(w, "{line}").map_err(|e| FdctError::io(path.as_path(), e))?;
            }
            steps.push(rec);
        }
        let is_last = epoch + 1 == cfg.epochs;
        let val_report = match val {
            Some(v) if !v.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || is_last) => {
                Some(evaluate(net, v, range, eval_bs)?.0)
            }
            _ => None,
        };
        let train_loss = (active_steps > 0).then(|| loss_sum / active_steps as f64);
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train loss {} val rmse {}",
            train_loss.map_or("-".into(), |l| format!("{l:.5}")),
            val_report
                .as_ref()
                .and_then(|r| r.rmse)
                .map_or("-".into(), |r| format!("{r:.5}"))
        );
        state.history.push(EpochRecord {
            epoch,
            lr,
            steps: state.batch_in_epoch,
            train_loss,
            val: val_report.clone(),
        });
        state.epoch += 1;
        state.batch_in_epoch = 0;

        let ck = snapshot(net, &opt, &state);
        if let Some(rmse) = val_report.and_then(|r| r.rmse) {
            if best_rmse.is_none_or(|b| rmse < b) {
                best_rmse = Some(rmse);
                if let Some(dir) = out_dir {
                    ck.save(dir.join(BEST_CHECKPOINT))?;
                }
                best = Some(ck.clone());
            }
        }
        if let Some(dir) = out_dir {
            ck.save(dir.join(LAST_CHECKPOINT))?;
            write_history(&dir.join(HISTORY_FILE), &state.history)?;
        }
    }

    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| FdctError::io(&path, e))?;
    }
    let last = snapshot(net, &opt, &state);
    if let Some(dir) = out_dir {
        last.save(dir.join(LAST_CHECKPOINT))?;
        write_history(&dir.join(HISTORY_FILE), &state.history)?;
    }
    Ok(FitOutcome {
        history: state.history,
        steps,
        last,
        best,
        best_rmse,
    })
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(history).expect("history serializes");
    let mut f = File::create(path).map_err(|e| FdctError::io(path, e))?;
    f.write_all(json.as_bytes())
        .map_err(|e| FdctError::io(path, e))
}

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub model: FdctConfig,
    pub loss: LossConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub parameter_count: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Trains every variant from the same seed on the same data; a failing
/// variant becomes a row carrying its error.
pub fn run_ablation<T: SampleSource + ?Sized, V: SampleSource + ?Sized>(
    grid: &[AblationVariant],
    train: &T,
    val: &V,
    cfg: &TrainConfig,
    range: ValidRange,
) -> Vec<AblationRow> {
    grid.iter()
        .map(|variant| {
            let run = || -> Result<(usize, FitOutcome)> {
                let mut net = FdctNetwork::new(variant.model.clone(), cfg.seed)?;
                let count = net.count_parameters();
                let opts = FitOptions {
                    range,
                    ..FitOptions::default()
                };
                Ok((
                    count,
                    fit(&mut net, train, Some(val), cfg, &variant.loss, opts)?,
                ))
            };
            match run() {
                Ok((count, out)) => AblationRow {
                    name: variant.name.clone(),
                    parameter_count: Some(count),
                    final_train_loss: out.history.last().and_then(|r| r.train_loss),
                    metrics: out.history.iter().rev().find_map(|r| r.val.clone()),
                    error: None,
                },
                Err(e) => {
                    log::warn!("variant {} failed: {e}", variant.name);
                    AblationRow {
                        name: variant.name.clone(),
                        parameter_count: FdctNetwork::new(variant.model.clone(), cfg.seed)
                            .ok()
                            .map(|n| n.count_parameters()),
                        final_train_loss: None,
                        metrics: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

/// Aligned text table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(7);
    let mut out = format!(
        "{:<name_w$} {:>10} {}\n",
        "variant",
        "params",
        MetricsReport::table_header()
    );
    for r in rows {
        let params = r.parameter_count.map_or("-".into(), |c| c.to_string());
        match (&r.metrics, &r.error) {
            (_, Some(err)) => {
                out.push_str(&format!("{:<name_w$} {params:>10} failed: {err}\n", r.name))
            }
            (Some(m), None) => out.push_str(&format!(
                "{:<name_w$} {params:>10} {}\n",
                r.name,
                m.table_row()
            )),
            (None, None) => out.push_str(&format!("{:<name_w$} {params:>10} -\n", r.name)),
        }
    }
    out
}
