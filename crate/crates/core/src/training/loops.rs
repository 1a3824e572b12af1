use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;

use super::checkpoint::{Checkpoint, RngState};
use super::optim::{adam_step, clip_grad_norm, cosine_lr, OptimState};
use crate::bayesnet::{init_network, snapshot_posterior, NetConfig, NetworkParams, PriorSnapshot};
use crate::error::{Error, Result};
use crate::losses::{supervised_loss, ukt_loss, HyperParams, LossBreakdown, SupervisedExample, UktExample};
use crate::operators::{ProjectionOperator, Sinogram};
use crate::phantoms::{Dataset, DatasetRecord};
use crate::seed::{derive_seed, rng_from};

const STREAM_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_UKT: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub hyper: HyperParams,
    pub grad_clip: f64,
    /// Adaptation iterations per measurement.
    pub ukt_steps: usize,
    pub ukt_lr: f64,
    /// Anneal the adaptation rate from `ukt_lr` to `lr_min` instead of holding it.
    pub ukt_cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr_max: 1e-3,
            lr_min: 1e-5,
            seed: 0,
            hyper: HyperParams::default(),
            grad_clip: 10.0,
            ukt_steps: 200,
            ukt_lr: 1e-4,
            ukt_cosine: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min) {
            return Err(Error::Config(format!(
                "learning rates need lr_max >= lr_min > 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if !(self.ukt_lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config(
                "adaptation rate and clipping norm must be positive".into(),
            ));
        }
        self.hyper.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Supervised,
    Ukt,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Supervised => "supervised",
            Phase::Ukt => "ukt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub phase: Phase,
    /// Measurement index during per-measurement adaptation.
    pub sample: Option<usize>,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!("phase={}", self.phase.name());
        if let Some(i) = self.sample {
            s += &format!(" sample={i}");
        }
        let l = &self.loss;
        s += &format!(
            " step={} lr={:.6e} fidelity_or_nll={:.9e} trace={:.9e} tv={:.9e} kl={:.9e} total={:.9e} grad_norm={:.6e}",
            self.step, self.lr, l.fidelity_or_nll, l.trace, l.tv, l.kl, l.total, self.grad_norm
        );
        s
    }
}

/// Append-only training log: one `key=value` line per step, mirrored in memory.
pub struct TrainLog {
    file: Option<(PathBuf, File)>,
    offset: u64,
    records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self {
            file: None,
            offset: 0,
            records: Vec::new(),
        }
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let offset = file.metadata().map_err(|e| Error::io(path, e))?.len();
        Ok(Self {
            file: Some((path.to_path_buf(), file)),
            offset,
            records: Vec::new(),
        })
    }

    pub fn record(&mut self, r: LogRecord) -> Result<()> {
        let line = r.to_line() + "\n";
        if let Some((path, f)) = &mut self.file {
            f.write_all(line.as_bytes()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.offset += line.len() as u64;
        self.records.push(r);
        Ok(())
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }
}

struct Prepared {
    x: Option<Vec<f64>>,
    y: Sinogram,
    x0: Vec<f64>,
}

fn prepare(ds: &Dataset, r: &DatasetRecord) -> Result<Prepared> {
    Ok(Prepared {
        x: r.ground_truth_f64(),
        y: r.sinogram(ds.n_angles, ds.n_detectors)?,
        x0: r.fbp_init_f64(),
    })
}

fn check_finite(loss: &LossBreakdown, phase: Phase, step: u64) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{} loss is not finite at step {step}: {loss:?}",
            phase.name()
        )))
    }
}

/// Supervised first phase. `resume` continues a saved run from its step counter.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    ds: &Dataset,
    op: &Arc<ProjectionOperator>,
    net: &NetConfig,
    cfg: &TrainConfig,
    config_text: &str,
    log: &mut TrainLog,
    resume: Option<Checkpoint>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if !ds.kind.has_ground_truth() || ds.records.iter().any(|r| r.ground_truth.is_none()) {
        return Err(Error::Data(format!(
            "supervised training needs ground truth, dataset is {}",
            ds.kind.name()
        )));
    }
    if ds.records.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    ds.check_operator(op)?;
    let (mut params, mut optim, mut rng) = match resume {
        Some(c) => {
            if c.geometry_hash != op.geometry_hash() {
                return Err(Error::GeometryMismatch {
                    expected_from: "checkpoint",
                    got_from: "configured",
                    expected: c.geometry_hash,
                    got: op.geometry_hash(),
                });
            }
            (c.params, c.optim, c.rng.restore())
        }
        None => {
            let p: NetworkParams<f32> = init_network(net, &mut rng_from(derive_seed(cfg.seed, &[STREAM_INIT])))?;
            let o = OptimState::new(&p, cfg.lr_max);
            (p, o, rng_from(derive_seed(cfg.seed, &[STREAM_NOISE])))
        }
    };
    let data = ds.records.iter().map(|r| prepare(ds, r)).collect::<Result<Vec<_>>>()?;
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;
    while optim.step < total {
        let step = optim.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = (0..n).collect();
            order.shuffle(&mut rng_from(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch])));
            order_epoch = epoch;
        }
        let b = (step % per_epoch) as usize * cfg.batch_size;
        let batch: Vec<SupervisedExample<'_>> = order[b..(b + cfg.batch_size).min(n)]
            .iter()
            .map(|&i| SupervisedExample {
                id: i as u64,
                x_true: data[i].x.as_deref().expect("checked above"),
                y: &data[i].y,
                x0: &data[i].x0,
            })
            .collect();
        let lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)?;
        let (loss, grads) = supervised_loss(&params, &batch, op, &cfg.hyper, &mut rng, true)?;
        check_finite(&loss, Phase::Supervised, step)?;
        let mut grads = grads.expect("requested");
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        adam_step(&mut params, &grads, &mut optim, lr)?;
        log.record(LogRecord {
            phase: Phase::Supervised,
            sample: None,
            step,
            lr,
            loss,
            grad_norm,
        })?;
    }
    let prior = Some(snapshot_posterior(&params));
    Ok(Checkpoint {
        config_text: config_text.to_string(),
        geometry_hash: op.geometry_hash(),
        params,
        prior,
        optim,
        rng: RngState::capture(&rng),
        log_offset: log.offset(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMode {
    /// Reset to the first-phase optimum for every measurement; one checkpoint each.
    PerMeasurement,
    /// One adaptation over the summed objective of all measurements.
    Batch,
}

#[allow(clippy::too_many_arguments)]
fn adapt_run(
    base: &Checkpoint,
    prior: &PriorSnapshot,
    examples: &[UktExample<'_>],
    op: &Arc<ProjectionOperator>,
    cfg: &TrainConfig,
    stream: u64,
    sample: Option<usize>,
    config_text: &str,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    let mut params = base.params.clone();
    let mut optim = OptimState::new(&params, cfg.ukt_lr);
    let mut rng = rng_from(derive_seed(cfg.seed, &[STREAM_UKT, stream]));
    let steps = cfg.ukt_steps as u64;
    for step in 0..steps {
        let lr = if cfg.ukt_cosine {
            cosine_lr(step, steps, cfg.ukt_lr, cfg.lr_min.min(cfg.ukt_lr))?
        } else {
            cfg.ukt_lr
        };
        let (loss, grads) = ukt_loss(&params, examples, op, Some(prior), &cfg.hyper, &mut rng, true)?;
        check_finite(&loss, Phase::Ukt, step)?;
        let mut grads = grads.expect("requested");
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        adam_step(&mut params, &grads, &mut optim, lr)?;
        log.record(LogRecord {
            phase: Phase::Ukt,
            sample,
            step,
            lr,
            loss,
            grad_norm,
        })?;
    }
    let (loss, _) = ukt_loss(&params, examples, op, Some(prior), &cfg.hyper, &mut rng, false)?;
    check_finite(&loss, Phase::Ukt, steps)?;
    log.record(LogRecord {
        phase: Phase::Ukt,
        sample,
        step: steps,
        lr: 0.0,
        loss,
        grad_norm: 0.0,
    })?;
    Ok(Checkpoint {
        config_text: config_text.to_string(),
        geometry_hash: base.geometry_hash,
        params,
        prior: Some(prior.clone()),
        optim,
        rng: RngState::capture(&rng),
        log_offset: log.offset(),
    })
}

/// Unsupervised adaptation from the measurements of `ds` alone; ground truth is stripped
/// before use. Each run logs one line per step plus a final evaluation at `step = ukt_steps`.
#[allow(clippy::too_many_arguments)]
pub fn ukt_adapt(
    base: &Checkpoint,
    ds: &Dataset,
    op: &Arc<ProjectionOperator>,
    cfg: &TrainConfig,
    mode: AdaptMode,
    config_text: &str,
    log: &mut TrainLog,
) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    let prior = base
        .prior
        .as_ref()
        .ok_or_else(|| Error::Data("checkpoint carries no prior snapshot; run the supervised phase first".into()))?;
    if ds.records.is_empty() {
        return Err(Error::InvalidArgument("no measurements to adapt to".into()));
    }
    if base.geometry_hash != ds.geometry_hash {
        return Err(Error::GeometryMismatch {
            expected_from: "checkpoint",
            got_from: "dataset",
            expected: base.geometry_hash,
            got: ds.geometry_hash,
        });
    }
    ds.check_operator(op)?;
    let data = ds
        .records
        .iter()
        .map(|r| prepare(ds, &r.without_ground_truth()))
        .collect::<Result<Vec<_>>>()?;
    let examples: Vec<UktExample<'_>> = data
        .iter()
        .enumerate()
        .map(|(i, d)| UktExample {
            id: i as u64,
            y: &d.y,
            x0: &d.x0,
        })
        .collect();
    match mode {
        AdaptMode::PerMeasurement => examples
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                adapt_run(
                    base,
                    prior,
                    std::slice::from_ref(ex),
                    op,
                    cfg,
                    i as u64,
                    Some(i),
                    config_text,
                    log,
                )
            })
            .collect(),
        AdaptMode::Batch => Ok(vec![adapt_run(
            base,
            prior,
            &examples,
            op,
            cfg,
            u64::MAX,
            None,
            config_text,
            log,
        )?]),
    }
}
