//! Seeded training with the six-head objective, per-epoch decay and checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::eval::{evaluate, mean_sigmoid};
use crate::harness::optim::Adam;
use crate::loss::total_loss;
use crate::metrics::Overlap;
use crate::model::SegModel;
use crate::synth::{augment, CirrusSample, Dataset, Split};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const BEST_CHECKPOINT: &str = "best.gsa";
pub const LAST_CHECKPOINT: &str = "last.gsa";

/// A sample resampled to the training resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: usize,
    /// `[1, side, side]`.
    pub image: Tensor,
    /// Consensus, `[1, side, side]`.
    pub target: Tensor,
}

fn resample(t: &Tensor, side: usize) -> Result<Tensor> {
    let s = t.dim(t.ndim() - 1);
    if s == side {
        Ok(t.clone())
    } else if s.is_multiple_of(side) {
        t.downsample_area(s / side)
    } else {
        t.resize_bilinear(side, side)
    }
}

pub fn prepare_sample(id: usize, sample: &CirrusSample, side: usize) -> Result<Prepared> {
    let size = sample.size();
    let image = resample(&sample.image, side)?.reshape(&[1, side, side])?;
    let target = resample(&sample.consensus.y, side)?
        .map(|v| v.clamp(0.0, 1.0))
        .reshape(&[1, side, side])?;
    debug_assert_eq!(sample.image.shape(), &[size, size]);
    Ok(Prepared { id, image, target })
}

pub fn load_prepared(dataset: &Dataset, split: Split, side: usize, limit: Option<usize>) -> Result<Vec<Prepared>> {
    let mut ids = dataset.manifest.ids(split);
    if let Some(n) = limit {
        ids.truncate(n);
    }
    ids.into_iter()
        .map(|id| prepare_sample(id, &dataset.load(id)?, side))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// Pooled IoU of the training-batch predictions.
    pub train_iou: f64,
    /// Pooled IoU over the validation split; `NaN` when it is empty.
    pub val_iou: f64,
    pub val_dice: f64,
    pub val_coverage_kl: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    /// One-based epoch whose weights are in `best`.
    pub best_epoch: usize,
    pub best: SegModel,
    pub last: SegModel,
    /// Learning rate the next epoch would use.
    pub final_lr: f64,
    pub run_dir: Option<PathBuf>,
}

struct MetricsCsv(fs::File);

impl MetricsCsv {
    fn create(path: &Path) -> Result<Self> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "epoch,lr,train_loss,train_iou,val_iou,val_dice,val_coverage_kl,seconds")?;
        Ok(MetricsCsv(f))
    }

    fn append(&mut self, m: &EpochMetrics, seconds: f64) -> Result<()> {
        writeln!(
            self.0,
            "{},{},{},{},{},{},{},{:.3}",
            m.epoch, m.lr, m.train_loss, m.train_iou, m.val_iou, m.val_dice, m.val_coverage_kl, seconds
        )?;
        self.0.flush()?;
        Ok(())
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            epoch,
            loss: f64::NAN,
        },
        e => e,
    }
}

/// Trains one model on prepared samples. With `run_dir`, writes the config snapshot,
/// the metrics CSV and the best/last checkpoints there.
pub fn train_on(cfg: &TrainConfig, train: &[Prepared], val: &[Prepared], run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    for p in train.iter().chain(val) {
        if p.image.shape() != [1, cfg.side, cfg.side] {
            return Err(Error::shape("training sample", &[1, cfg.side, cfg.side], p.image.shape()));
        }
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let mut model = SegModel::new(model_cfg)?;
    let mut adam = Adam::new(model.store(), cfg.adam, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut csv = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            cfg.save(&dir.join(CONFIG_FILE))?;
            Some(MetricsCsv::create(&dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, SegModel)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen, mut overlap) = (0.0, 0usize, Overlap::default());
        for batch in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, tgt) = augment(&train[i].image, &train[i].target, &mut rng, &cfg.augment)?;
                images.push(img.reshape(&[1, 1, cfg.side, cfg.side])?);
                targets.push(tgt.reshape(&[1, 1, cfg.side, cfg.side])?);
            }
            let x = Tensor::stack_batch(&images)?;
            let y = Tensor::stack_batch(&targets)?;
            let tape = Tape::new();
            let out = model.forward(&tape, &x).map_err(|e| diverged(epoch + 1, e))?;
            let heads = out.all();
            let objective = total_loss(&heads, &y, &cfg.loss).map_err(|e| diverged(epoch + 1, e))?;
            let value = objective.loss.value().data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    loss: value,
                });
            }
            let pred = mean_sigmoid(&out.attention)?;
            overlap = overlap + Overlap::count(pred.data(), y.data(), cfg.threshold)?;
            if !objective.all_ignored {
                let grads = tape.backward(&objective.loss)?;
                drop(out);
                adam.update(model.store_mut(), &grads, lr)?;
            }
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let report = if val.is_empty() {
            None
        } else {
            Some(evaluate(std::slice::from_ref(&model), val, cfg.threshold, cfg.batch_size)?)
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            train_iou: overlap.iou(),
            val_iou: report.as_ref().map_or(f64::NAN, |r| r.iou),
            val_dice: report.as_ref().map_or(f64::NAN, |r| r.dice),
            val_coverage_kl: report.as_ref().map_or(f64::NAN, |r| r.coverage_kl),
        };
        log::info!(
            "epoch {:>3} lr {:.3e} loss {:.5} train_iou {:.4} val_iou {:.4}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_iou,
            m.val_iou
        );
        let score = if val.is_empty() { -m.train_loss } else { m.val_iou };
        history.push(m);
        let improved = best.as_ref().is_none_or(|(s, _, _)| score > *s);
        if improved {
            best = Some((score, epoch + 1, model.clone()));
        }
        if let Some(dir) = run_dir {
            let ckpt = Checkpoint {
                optimizer: Some(adam.clone()),
                epoch: epoch + 1,
                config: Some(cfg.clone()),
                history: history.clone(),
                ..Checkpoint::from_model(&model)
            };
            ckpt.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                ckpt.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if let Some(c) = csv.as_mut() {
            c.append(history.last().unwrap(), started.elapsed().as_secs_f64())?;
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best: best_model,
        last: model,
        final_lr: cfg.lr_at(cfg.epochs),
        run_dir: run_dir.map(Path::to_path_buf),
    })
}

/// Trains one model on the dataset named in the config, writing into `cfg.run_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    let train = load_prepared(&dataset, Split::Train, cfg.side, cfg.max_train_samples)?;
    let val = load_prepared(&dataset, Split::Val, cfg.side, None)?;
    train_on(cfg, &train, &val, Some(&cfg.run_dir))
}

/// Trains `cfg.ensemble` members with seeds `seed, seed + 1, …` into
/// `run_dir/member_<k>`, after writing the shared config snapshot to `run_dir`.
pub fn train_ensemble(cfg: &TrainConfig) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    let train = load_prepared(&dataset, Split::Train, cfg.side, cfg.max_train_samples)?;
    let val = load_prepared(&dataset, Split::Val, cfg.side, None)?;
    fs::create_dir_all(&cfg.run_dir)?;
    cfg.save(&cfg.run_dir.join(CONFIG_FILE))?;
    (0..cfg.ensemble)
        .map(|k| {
            let member = TrainConfig {
                seed: cfg.seed + k as u64,
                run_dir: cfg.run_dir.join(format!("member_{k}")),
                ..cfg.clone()
            };
            log::info!("training ensemble member {k} (seed {})", member.seed);
            train_on(&member, &train, &val, Some(&member.run_dir))
        })
        .collect()
}
