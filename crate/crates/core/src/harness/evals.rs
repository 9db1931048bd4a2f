//! Evaluation: greedy decoding of a split, corpus WER, and the per-sample
//! report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{io_err, parallel_map, thread_count, HarnessError, Result};
use crate::data::{load_split, manifest_path, read_manifest, LoadedSplit};
use crate::kvfile::KvWriter;
use crate::loss::{edit_alignment, greedy_decode, wer, EditAlignment, GlossSequence, WerSummary};
use crate::model::{load_checkpoint, Model};
use crate::tensor::{Session, TensorData};

#[derive(Clone, Debug)]
pub struct SampleEval {
    pub id: String,
    pub reference: GlossSequence,
    pub hypothesis: GlossSequence,
    pub counts: EditAlignment,
}

/// Decode one video with the BiLSTM head (argmax decoding is invariant to
/// the log-softmax, so raw logits are decoded directly).
pub fn decode_video(model: &Model<f32>, video: &TensorData<f32>) -> Result<GlossSequence> {
    let mut s = Session::inference(model.params());
    let out = model.forward(&mut s, video)?;
    Ok(greedy_decode(s.graph.value(out.logits_global)))
}

pub fn decode_split(
    model: &Model<f32>,
    split: &LoadedSplit,
    threads: usize,
) -> Result<(WerSummary, Vec<SampleEval>)> {
    let hyps: Vec<Result<GlossSequence>> =
        parallel_map(&split.videos, threads, |_, v| decode_video(model, v));
    let mut rows = Vec::with_capacity(hyps.len());
    let mut pairs = Vec::with_capacity(hyps.len());
    for ((hyp, reference), id) in hyps.into_iter().zip(&split.labels).zip(&split.ids) {
        let hypothesis = hyp?;
        rows.push(SampleEval {
            id: id.clone(),
            reference: reference.clone(),
            hypothesis: hypothesis.clone(),
            counts: edit_alignment(reference, &hypothesis),
        });
        pairs.push((reference.clone(), hypothesis));
    }
    let summary = wer(&pairs)
        .ok_or_else(|| HarnessError::BadRun("evaluation references are all empty".into()))?;
    Ok((summary, rows))
}

pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "summary.txt";

fn ids_of(seq: &GlossSequence) -> String {
    if seq.is_empty() {
        "-".to_string()
    } else {
        seq.ids()
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// One line per sample plus a closing summary line; a machine-readable
/// key/value summary lands alongside.
pub fn write_report(dir: &Path, rows: &[SampleEval], summary: &WerSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut text = String::new();
    for r in rows {
        let _ = writeln!(
            text,
            "{} ref={} hyp={} sub={} ins={} del={}",
            r.id,
            ids_of(&r.reference),
            ids_of(&r.hypothesis),
            r.counts.substitutions,
            r.counts.insertions,
            r.counts.deletions,
        );
    }
    let _ = writeln!(
        text,
        "corpus wer={} del={} ins={}",
        summary.wer, summary.del_rate, summary.ins_rate
    );
    fs::write(dir.join(REPORT_FILE), text).map_err(|e| io_err(dir, e))?;

    let mut kv = KvWriter::new();
    kv.put("samples", rows.len())
        .put("wer", summary.wer)
        .put("del_rate", summary.del_rate)
        .put("ins_rate", summary.ins_rate)
        .put("substitutions", summary.substitutions)
        .put("insertions", summary.insertions)
        .put("deletions", summary.deletions)
        .put("ref_len", summary.ref_len);
    fs::write(dir.join(SUMMARY_FILE), kv.finish()).map_err(|e| io_err(dir, e))
}

/// Load a checkpoint, evaluate one split of a dataset, optionally write the
/// report, and return the summary.
pub fn evaluate_checkpoint(
    ckpt_dir: &Path,
    data_dir: &Path,
    split: &str,
    report_dir: Option<&Path>,
    threads: usize,
) -> Result<(WerSummary, Vec<SampleEval>)> {
    let model = load_checkpoint::<f32>(ckpt_dir)?;
    let manifest = read_manifest(&manifest_path(data_dir))?;
    if manifest.vocab_size() != model.config().vocab_size {
        return Err(HarnessError::VocabMismatch {
            data: manifest.vocab_size(),
            model: model.config().vocab_size,
        });
    }
    let loaded = load_split(&manifest, data_dir, split)?;
    let threads = thread_count(threads, loaded.videos.len());
    let (summary, rows) = decode_split(&model, &loaded, threads)?;
    if let Some(dir) = report_dir {
        write_report(dir, &rows, &summary)?;
    }
    Ok((summary, rows))
}
