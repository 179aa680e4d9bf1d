//! Training loop, prediction, and evaluation on synthetic splits.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use freqscan::autodiff::Tape;
use freqscan::checkpoint::{load_matching, read_checkpoint, write_checkpoint};
use freqscan::detect::{assign_targets, total_loss, BBox, DetectionTarget, Detector, LossBreakdown};
use freqscan::eval::{decode_detections, evaluate, LevelPrediction, Metrics};
use freqscan::nn::{cosine_lr, Adam, Binder, GradStore, ParamStore};
use freqscan::vssm::Backbone;
use freqscan::{Scalar, Tensor4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::data::{gen_dataset, SyntheticScene, Splits, NUM_CLASSES};

/// Shared shape of every metrics JSON the harness writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: String,
    pub split: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub lr: f64,
    pub val: Option<Metrics>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub test: Metrics,
    pub param_count: usize,
    pub hsfa_params: usize,
    pub run_dir: PathBuf,
    /// Final parameters, widened to `f64`.
    pub params: ParamStore<f64>,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_checkpoint(&mut bytes.as_slice())?)
}

/// Decoded detections for every scene, using frozen parameters.
pub fn predict<T: Scalar>(
    det: &Detector,
    store: &ParamStore<T>,
    scenes: &[SyntheticScene],
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<BBox>>> {
    let levels = det.levels();
    let hw = (det.config.backbone.height, det.config.backbone.width);
    scenes
        .iter()
        .map(|s| {
            let tape = Tape::new();
            let bind = Binder::frozen(&tape, store);
            let outs = det.forward(&bind, tape.constant(s.tensor::<T>(false)))?;
            let preds: Vec<LevelPrediction> = outs
                .iter()
                .map(|o| LevelPrediction { cls: o.cls.value().cast(), reg: o.reg.value().cast(), ctr: o.ctr.value().cast() })
                .collect();
            Ok(decode_detections(&preds, &levels, hw, score_thresh, nms_iou)?)
        })
        .collect()
}

pub fn evaluate_scenes<T: Scalar>(
    det: &Detector,
    store: &ParamStore<T>,
    scenes: &[SyntheticScene],
    cfg: &RunConfig,
) -> Result<(Metrics, Vec<Vec<BBox>>)> {
    let preds = predict(det, store, scenes, cfg.train.score_thresh, cfg.train.nms_iou)?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    Ok((evaluate(&preds, &gts, NUM_CLASSES)?, preds))
}

/// Detector for `cfg` with every parameter taken from `checkpoint`.
pub fn load_detector(cfg: &RunConfig, checkpoint: &Path) -> Result<(Detector, ParamStore<f64>)> {
    let det = Detector::new(cfg.detector_config())?;
    let mut store: ParamStore<f64> = det.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    let loaded = load_matching(&mut store, &load_checkpoint::<f64>(checkpoint)?);
    if loaded.len() != store.len() {
        let missing: Vec<&str> = store.names().filter(|n| !loaded.iter().any(|l| l == n)).take(5).collect();
        bail!(
            "{} does not match the configured model: {} of {} parameters missing or mis-shaped (e.g. {})",
            checkpoint.display(),
            store.len() - loaded.len(),
            store.len(),
            missing.join(", ")
        );
    }
    Ok((det, store))
}

#[derive(Serialize)]
struct StepLog {
    step: usize,
    epoch: usize,
    loss: f64,
    lr: f64,
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    step: usize,
    scenes: Vec<(u64, bool)>,
    losses: Vec<LossBreakdown>,
    config: &'a RunConfig,
}

/// Trains per `cfg`, writing checkpoints, logs, and metrics into the run
/// directory. Progress lines go to stderr when `verbose`.
pub fn train(cfg: &RunConfig, verbose: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = gen_dataset(cfg.train.data_seed, cfg.train.dataset_size, cfg.train.image_size)?;
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, &splits, verbose),
        Precision::F64 => train_typed::<f64>(cfg, &splits, verbose),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, splits: &Splits, verbose: bool) -> Result<TrainOutcome> {
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
    let det = Detector::new(cfg.detector_config())?;
    let mut store: ParamStore<T> = det.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    let param_count = store.num_elements();
    let hsfa_params = Backbone::hsfa_census(&store);
    let mut adam = Adam::new(cfg.adam());
    let levels = det.levels();
    let targets: Vec<[DetectionTarget; 2]> = splits
        .train
        .iter()
        .map(|s| Ok([assign_targets(&s.boxes, &levels)?, assign_targets(&s.flipped_boxes(), &levels)?]))
        .collect::<Result<_>>()?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    order_rng.set_stream(1);
    let n = splits.train.len();
    let bs = cfg.train.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = (steps_per_epoch * cfg.train.epochs) as u64;
    let mut step_log = BufWriter::new(File::create(run_dir.join("steps.jsonl"))?);
    let (mut history, mut step_losses) = (Vec::new(), Vec::new());
    let mut step = 0usize;
    for epoch in 1..=cfg.train.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let mut sums = LossBreakdown::default();
        let mut lr = 0.0;
        for batch in order.chunks(bs) {
            let flips: Vec<bool> = batch.iter().map(|_| cfg.train.flip && order_rng.gen_bool(0.5)).collect();
            let batch_pos: usize = batch.iter().zip(&flips).map(|(&i, &f)| targets[i][f as usize].num_pos).sum();
            let mut acc: Option<GradStore<T>> = None;
            let mut parts = Vec::with_capacity(batch.len());
            let mut batch_loss = LossBreakdown::default();
            for (&i, &flip) in batch.iter().zip(&flips) {
                let tgt = &targets[i][flip as usize];
                let tape = Tape::new();
                let bind = Binder::new(&tape, &store);
                let outs = det.forward(&bind, tape.constant(splits.train[i].tensor::<T>(flip)))?;
                let (loss, lb) = total_loss(&outs, std::slice::from_ref(tgt), cfg.loss.lambda_reg, cfg.loss.lambda_ctr)?;
                parts.push(lb);
                // per-image losses are normalised by their own positives; reweight to the batch count
                let w = tgt.num_pos.max(1) as f64 / batch_pos.max(1) as f64;
                batch_loss.cls += w * lb.cls;
                batch_loss.reg += w * lb.reg;
                batch_loss.ctr += w * lb.ctr;
                batch_loss.total += w * lb.total;
                if !lb.total.is_finite() {
                    break;
                }
                let grads = tape.backward_with_seed(loss, &Tensor4::scalar(T::lit(w)))?;
                let g = bind.collect(&grads);
                match acc.as_mut() {
                    Some(a) => a.accumulate(&g),
                    None => acc = Some(g),
                }
            }
            let finite = batch_loss.total.is_finite() && acc.as_ref().is_some_and(|a| a.is_finite());
            if !finite {
                let dump = NanDump {
                    epoch,
                    step,
                    scenes: batch.iter().zip(&flips).map(|(&i, &f)| (splits.train[i].index, f)).collect(),
                    losses: parts,
                    config: cfg,
                };
                let path = run_dir.join("nan_dump.json");
                write_json(&path, &dump)?;
                bail!("non-finite loss at epoch {epoch}, step {step}; batch written to {}", path.display());
            }
            lr = cosine_lr(cfg.optim.lr, step as u64, total_steps);
            adam.step(&mut store, acc.as_ref().expect("non-empty batch"), lr)?;
            serde_json::to_writer(&mut step_log, &StepLog { step, epoch, loss: batch_loss.total, lr })?;
            step_log.write_all(b"\n")?;
            step_losses.push(batch_loss.total);
            let f = batch.len() as f64 / n as f64;
            sums.cls += f * batch_loss.cls;
            sums.reg += f * batch_loss.reg;
            sums.ctr += f * batch_loss.ctr;
            sums.total += f * batch_loss.total;
            step += 1;
        }
        if cfg.output.save_checkpoints {
            save_checkpoint(&run_dir.join("checkpoint.bin"), &store)?;
        }
        let val = if cfg.train.eval_val_each_epoch && !splits.val.is_empty() {
            Some(evaluate_scenes(&det, &store, &splits.val, cfg)?.0)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            loss: sums.total,
            cls: sums.cls,
            reg: sums.reg,
            ctr: sums.ctr,
            lr,
            val,
            seconds: started.elapsed().as_secs_f64(),
        };
        if verbose {
            eprintln!(
                "epoch {:>3}  loss {:.4} (cls {:.4} reg {:.4} ctr {:.4})  lr {:.2e}{}  {:.1}s",
                epoch,
                rec.loss,
                rec.cls,
                rec.reg,
                rec.ctr,
                lr,
                rec.val.map(|m| format!("  val AP50 {:.3}", m.ap50)).unwrap_or_default(),
                rec.seconds
            );
        }
        history.push(rec);
        write_json(&run_dir.join("history.json"), &history)?;
    }
    step_log.flush()?;
    let (test, _) = evaluate_scenes(&det, &store, &splits.test, cfg)?;
    let report = MetricsReport { run: cfg.output.dir.clone(), split: "test".into(), metrics: test };
    write_json(&run_dir.join("metrics.json"), &report)?;
    Ok(TrainOutcome { history, step_losses, test, param_count, hsfa_params, run_dir, params: store.cast() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_flattens_metric_columns() {
        let r = MetricsReport { run: "r".into(), split: "test".into(), metrics: Metrics::default() };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["AP50", "AP60", "AP70", "mAP", "AR50", "AR60", "AR70", "mAR", "run", "split"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
