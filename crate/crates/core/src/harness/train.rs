//! The training loop: seeded shuffling, batch-parallel per-sample graphs,
//! Adam with a milestone learning-rate schedule, per-epoch dev evaluation,
//! best-checkpoint tracking, and a deterministic metrics log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use super::evals::decode_split;
use super::{io_err, parallel_map, thread_count, total_loss_of, HarnessError, Result, RunConfig};
use crate::data::{load_split, manifest_path, read_manifest};
use crate::kvfile::KvWriter;
use crate::loss::GlossSequence;
use crate::model::{save_checkpoint, Model};
use crate::rng::Rng;
use crate::tensor::{adam_step, AdamState, OptimConfig, ParamId, Scalar, Session, TensorData};

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub wer: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_wer: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub records: Vec<EpochRecord>,
}

pub const METRICS_FILE: &str = "metrics.txt";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.effective";
pub const BEST_CHECKPOINT_DIR: &str = "best";

/// Temporal-scale jitter: with probability `prob`, resample the frame count
/// by a factor in [1-scale, 1+scale] (nearest-neighbor frames, re-rounded
/// to a multiple of 4). Skipped when the result could no longer fit the
/// label's CTC alignment.
fn jitter_video(
    video: &TensorData<f32>,
    label: &GlossSequence,
    prob: f64,
    scale: f64,
    rng: &mut Rng,
) -> TensorData<f32> {
    let roll = rng.uniform();
    let factor = 1.0 + rng.range(-scale, scale);
    if roll >= prob {
        return video.clone();
    }
    let shape = video.shape().to_vec();
    let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let stretched = ((t as f64 * factor / 4.0).round() as usize).max(1) * 4;
    if stretched == t || stretched / 4 < label.min_frames() {
        return video.clone();
    }
    let plane = h * w;
    let mut out = vec![0f32; c * stretched * plane];
    let src_data = video.data();
    for ci in 0..c {
        for tj in 0..stretched {
            let src_t = (tj * t / stretched).min(t - 1);
            let src = &src_data[(ci * t + src_t) * plane..][..plane];
            out[(ci * stretched + tj) * plane..][..plane].copy_from_slice(src);
        }
    }
    TensorData::new(vec![c, stretched, h, w], out)
}

fn is_finite_loss<F: Scalar>(v: F) -> bool {
    v.is_finite()
}

pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    quiet: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = read_manifest(&manifest_path(data_dir))?;
    if manifest.vocab_size() != cfg.model.vocab_size {
        return Err(HarnessError::VocabMismatch {
            data: manifest.vocab_size(),
            model: cfg.model.vocab_size,
        });
    }
    let train_split = load_split(&manifest, data_dir, "train")?;
    let dev_split = load_split(&manifest, data_dir, "dev")?;

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut echo = KvWriter::new();
    cfg.write_kv(&mut echo);
    fs::write(out_dir.join(EFFECTIVE_CONFIG_FILE), echo.finish())
        .map_err(|e| io_err(out_dir, e))?;

    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.params());
    let threads = thread_count(cfg.threads, cfg.batch_size);
    let eval_threads = thread_count(cfg.threads, dev_split.videos.len());

    let mut best_wer = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let optim = OptimConfig {
            lr: cfg.lr_at(epoch),
            ..cfg.optim
        };

        let mut order: Vec<usize> = (0..train_split.videos.len()).collect();
        Rng::derive(cfg.seed, &format!("shuffle.{epoch}")).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            // materialize the (possibly jittered) inputs first so workers
            // only compute
            let items: Vec<(TensorData<f32>, &GlossSequence, &str)> = batch
                .iter()
                .map(|&i| {
                    let mut rng = Rng::derive(cfg.seed, &format!("jitter.{epoch}.{i}"));
                    let v = jitter_video(
                        &train_split.videos[i],
                        &train_split.labels[i],
                        cfg.jitter_prob,
                        cfg.jitter_scale,
                        &mut rng,
                    );
                    (v, &train_split.labels[i], train_split.ids[i].as_str())
                })
                .collect();

            type SampleGrads = Vec<(ParamId, Vec<f32>)>;
            let model_ref = &model;
            let loss_cfg = &cfg.loss;
            let results: Vec<Result<(f64, SampleGrads)>> =
                parallel_map(&items, threads, |_, (video, label, _)| {
                    let mut s = Session::train(model_ref.params());
                    let loss = total_loss_of(model_ref, &mut s, video, label, loss_cfg)?;
                    let value = s.graph.data(loss)[0];
                    s.graph.backward(loss)?;
                    Ok((value.to_f64(), s.take_param_grads()))
                });

            let scale = 1.0 / batch.len() as f32;
            for (slot, result) in results.into_iter().enumerate() {
                let (value, grads) = result?;
                if !is_finite_loss(value) {
                    return Err(HarnessError::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                        sample: items[slot].2.to_string(),
                    });
                }
                loss_sum += value;
                seen += 1;
                for (pid, g) in grads {
                    model.params_mut().accumulate(pid, &g, scale);
                }
            }
            adam_step(model.params_mut(), &mut adam, &optim)?;
        }

        let (summary, _) = decode_split(&model, &dev_split, eval_threads)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            wer: summary.wer,
            del_rate: summary.del_rate,
            ins_rate: summary.ins_rate,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        if !quiet {
            println!(
                "epoch {:>3}  lr {:<9.6}  loss {:<10.6}  dev wer {:.4}  del {:.4}  ins {:.4}  ({:.1}s)",
                epoch, optim.lr, record.train_loss, record.wer, record.del_rate, record.ins_rate,
                record.seconds
            );
        }
        if record.wer < best_wer {
            best_wer = record.wer;
            best_epoch = epoch;
            save_checkpoint(&out_dir.join(BEST_CHECKPOINT_DIR), &model)?;
        }
        records.push(record);
        if cfg.stop_wer.is_some_and(|target| best_wer <= target) {
            stopped_early = true;
            break;
        }
    }

    let outcome = TrainOutcome {
        best_wer,
        best_epoch,
        epochs_run: records.len(),
        stopped_early,
        records,
    };
    fs::write(out_dir.join(METRICS_FILE), render_metrics(&outcome))
        .map_err(|e| io_err(out_dir, e))?;
    Ok(outcome)
}

/// The reproducibility contract covers this text: identical (seed, config,
/// dataset) must yield identical bytes, so wall times stay out of it.
pub fn render_metrics(outcome: &TrainOutcome) -> String {
    let mut out = String::from("# per-epoch training metrics\n");
    for r in &outcome.records {
        let _ = writeln!(
            out,
            "epoch = {} loss {} wer {} del {} ins {}",
            r.epoch, r.train_loss, r.wer, r.del_rate, r.ins_rate
        );
    }
    let _ = writeln!(out, "best_epoch = {}", outcome.best_epoch);
    let _ = writeln!(out, "best_wer = {}", outcome.best_wer);
    let _ = writeln!(out, "epochs_run = {}", outcome.epochs_run);
    let _ = writeln!(out, "stopped_early = {}", outcome.stopped_early);
    out
}
