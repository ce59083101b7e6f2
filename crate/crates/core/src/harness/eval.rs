//! Scoring a model or an ensemble over a set of prepared samples.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::autograd::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::harness::train::Prepared;
use crate::harness::worker_threads;
use crate::loss::MAJORITY_MIN;
use crate::metrics::{coverage, coverage_kl, mean_stderr, Overlap, DEFAULT_COVERAGE_BINS};
use crate::model::{average, SegModel};
use crate::tensor::Tensor;

/// Mean of the sigmoid of attention-head logits.
pub fn mean_sigmoid(logits: &[Var<'_>]) -> Result<Tensor> {
    let probs: Vec<Tensor> = logits.iter().map(|l| l.value().map(sigmoid)).collect();
    average(&probs)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: usize,
    pub iou: f64,
    pub dice: f64,
    pub coverage_pred: f64,
    pub coverage_target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    /// Pixel counts pooled over every image.
    pub overlap: Overlap,
    /// IoU of the pooled counts.
    pub iou: f64,
    pub dice: f64,
    pub mean_image_iou: f64,
    pub coverage_kl: f64,
}

impl EvalReport {
    pub fn line(&self) -> String {
        format!(
            "images={} iou={:.4} dice={:.4} mean_image_iou={:.4} coverage_kl={:.4}",
            self.images.len(),
            self.iou,
            self.dice,
            self.mean_image_iou,
            self.coverage_kl
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("image_id,iou,dice,coverage_pred,coverage_target\n");
        for r in &self.images {
            writeln!(s, "{},{},{},{},{}", r.id, r.iou, r.dice, r.coverage_pred, r.coverage_target).unwrap();
        }
        fs::write(path, s)?;
        Ok(())
    }
}

/// Ensemble probabilities for each sample, `[1, side, side]` each, in input order.
pub fn predict_all(models: &[SegModel], samples: &[Prepared], batch: usize) -> Result<Vec<Tensor>> {
    if models.is_empty() {
        return Err(Error::invalid("no models to evaluate"));
    }
    let batch = batch.max(1);
    let run = |chunk: &[Prepared]| -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(chunk.len());
        for group in chunk.chunks(batch) {
            let items = group
                .iter()
                .map(|p| {
                    let s = p.image.shape();
                    p.image.reshape(&[1, s[0], s[1], s[2]])
                })
                .collect::<Result<Vec<_>>>()?;
            let x = Tensor::stack_batch(&items)?;
            let preds = models
                .iter()
                .map(|m| m.predict_any_size(&x))
                .collect::<Result<Vec<_>>>()?;
            let p = average(&preds)?;
            for b in 0..group.len() {
                let item = p.batch_item(b);
                let s = item.shape().to_vec();
                out.push(item.reshape(&s[1..])?);
            }
        }
        Ok(out)
    };
    let threads = worker_threads().min(samples.len().div_ceil(batch)).max(1);
    if threads == 1 {
        return run(samples);
    }
    let per = samples.len().div_ceil(threads).div_ceil(batch) * batch;
    let parts: Vec<Result<Vec<Tensor>>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples.chunks(per).map(|c| s.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scores probability maps against consensus targets.
pub fn score(ids: &[usize], preds: &[Tensor], targets: &[Tensor], threshold: f64) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    if preds.len() != targets.len() || ids.len() != preds.len() {
        return Err(Error::invalid("predictions, targets and ids differ in length"));
    }
    let mut images = Vec::with_capacity(preds.len());
    let mut pooled = Overlap::default();
    for ((&id, p), t) in ids.iter().zip(preds).zip(targets) {
        if p.shape() != t.shape() {
            return Err(Error::shape("evaluate", t.shape(), p.shape()));
        }
        let o = Overlap::count(p.data(), t.data(), threshold)?;
        pooled = pooled + o;
        images.push(ImageScore {
            id,
            iou: o.iou(),
            dice: o.dice(),
            coverage_pred: coverage(p.data(), threshold),
            coverage_target: coverage(t.data(), MAJORITY_MIN),
        });
    }
    let cp: Vec<f64> = images.iter().map(|r| r.coverage_pred).collect();
    let ct: Vec<f64> = images.iter().map(|r| r.coverage_target).collect();
    Ok(EvalReport {
        overlap: pooled,
        iou: pooled.iou(),
        dice: pooled.dice(),
        mean_image_iou: images.iter().map(|r| r.iou).sum::<f64>() / images.len() as f64,
        coverage_kl: coverage_kl(&cp, &ct, DEFAULT_COVERAGE_BINS)?,
        images,
    })
}

/// Scores the pixel-wise mean prediction of `models` on `samples`.
pub fn evaluate(models: &[SegModel], samples: &[Prepared], threshold: f64, batch: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let preds = predict_all(models, samples, batch)?;
    let ids: Vec<usize> = samples.iter().map(|p| p.id).collect();
    let targets: Vec<Tensor> = samples.iter().map(|p| p.target.clone()).collect();
    score(&ids, &preds, &targets, threshold)
}

/// Mean and standard error across reports, e.g. one per split or per member.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub iou: (f64, f64),
    pub dice: (f64, f64),
    pub coverage_kl: (f64, f64),
}

impl Aggregate {
    pub fn line(&self) -> String {
        format!(
            "runs={} iou={:.4}±{:.4} dice={:.4}±{:.4} coverage_kl={:.4}±{:.4}",
            self.count, self.iou.0, self.iou.1, self.dice.0, self.dice.1, self.coverage_kl.0, self.coverage_kl.1
        )
    }
}

pub fn aggregate(reports: &[EvalReport]) -> Aggregate {
    let of = |f: fn(&EvalReport) -> f64| mean_stderr(&reports.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        count: reports.len(),
        iou: of(|r| r.iou),
        dice: of(|r| r.dice),
        coverage_kl: of(|r| r.coverage_kl),
    }
}
