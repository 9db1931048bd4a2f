//! Training objective and evaluation: CTC, self-distillation, decoding, WER.

mod ctc;
mod wer;

pub use ctc::{ctc_bruteforce_prob, ctc_loss};
pub use wer::{edit_alignment, levenshtein_oracle, wer, EditAlignment, WerSummary};

use thiserror::Error;

use crate::tensor::{Graph, Scalar, TensorData, TensorError, Var};

/// Reserved non-emission label id.
pub const BLANK: usize = 0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LossError {
    #[error("gloss id {0} collides with the blank id")]
    BlankGlossId(usize),
    #[error("gloss id {id} outside vocabulary of size {vocab}")]
    GlossOutOfVocab { id: usize, vocab: usize },
    #[error(
        "target of length {target_len} (needing {min_frames} frames with repeats) \
         cannot align to {frames} frames"
    )]
    TargetTooLong {
        target_len: usize,
        min_frames: usize,
        frames: usize,
    },
    #[error("teacher of {teacher} frames cannot align to student of {student} frames")]
    IncompatibleLengths { teacher: usize, student: usize },
    #[error("teacher and student shapes differ: {teacher:?} vs {student:?}")]
    LogitShapeMismatch {
        teacher: Vec<usize>,
        student: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// An ordered gloss id sequence over `[1, V]`; the blank id 0 never appears.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GlossSequence {
    ids: Vec<usize>,
}

impl GlossSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i == BLANK) {
            return Err(LossError::BlankGlossId(bad));
        }
        Ok(GlossSequence { ids })
    }

    pub fn empty() -> Self {
        GlossSequence { ids: Vec::new() }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Minimum frame count any CTC alignment needs: one per label plus one
    /// separating blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        let repeats = self.ids.windows(2).filter(|w| w[0] == w[1]).count();
        self.ids.len() + repeats
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma1: 1.0,
            gamma2: 25.0,
            tau: 1.0,
        }
    }
}

/// KL(softmax(teacher/tau) || softmax(student/tau)), meaned over frames.
/// The teacher side is detached: no gradient reaches it.
pub fn kl_distill<F: Scalar>(
    g: &mut Graph<F>,
    teacher_logits: Var,
    student_logits: Var,
    tau: f64,
) -> Result<Var> {
    let ts = g.shape(teacher_logits).to_vec();
    let ss = g.shape(student_logits).to_vec();
    if ts != ss || ts.len() != 2 {
        return Err(LossError::LogitShapeMismatch {
            teacher: ts,
            student: ss,
        });
    }
    let frames = ts[0] as f64;
    let t_det = g.detach(teacher_logits);
    let t_scaled = g.scale(t_det, 1.0 / tau);
    let log_p = g.log_softmax(t_scaled, 1)?;
    let p = g.exp(log_p);
    let s_scaled = g.scale(student_logits, 1.0 / tau);
    let log_q = g.log_softmax(s_scaled, 1)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum_all(terms);
    Ok(g.scale(total, 1.0 / frames))
}

/// Nearest-neighbor repeat/subsample of the teacher rows to the student's
/// frame count. Lengths must divide one another.
pub fn align_lengths<F: Scalar>(
    g: &mut Graph<F>,
    teacher: Var,
    student_frames: usize,
) -> Result<Var> {
    let shape = g.shape(teacher).to_vec();
    if shape.len() != 2 {
        return Err(LossError::LogitShapeMismatch {
            teacher: shape,
            student: vec![student_frames],
        });
    }
    let t_a = shape[0];
    let t_b = student_frames;
    if t_a == t_b {
        return Ok(teacher);
    }
    if t_a == 0 || t_b == 0 || (!t_a.is_multiple_of(t_b) && !t_b.is_multiple_of(t_a)) {
        return Err(LossError::IncompatibleLengths {
            teacher: t_a,
            student: t_b,
        });
    }
    let indices: Vec<usize> = (0..t_b).map(|j| j * t_a / t_b).collect();
    Ok(g.select_rows(teacher, &indices)?)
}

/// The combined objective over the three logit heads. The BiLSTM head is
/// both CTC-supervised and the distillation teacher of the two 1D-CNN heads.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits_local1: Var,
    logits_local2: Var,
    logits_global: Var,
    target: &GlossSequence,
    cfg: &LossConfig,
) -> Result<Var> {
    let lp1 = g.log_softmax(logits_local1, 1)?;
    let lp2 = g.log_softmax(logits_local2, 1)?;
    let lpg = g.log_softmax(logits_global, 1)?;
    let c1 = ctc_loss(g, lp1, target)?;
    let c2 = ctc_loss(g, lp2, target)?;
    let cg = ctc_loss(g, lpg, target)?;
    let c12 = g.add(c1, c2)?;
    let ctc_sum = g.add(c12, cg)?;

    let t1 = align_lengths(g, logits_global, g.shape(logits_local1)[0])?;
    let kl1 = kl_distill(g, t1, logits_local1, cfg.tau)?;
    let kl2 = kl_distill(g, logits_global, logits_local2, cfg.tau)?;
    let kl_sum = g.add(kl1, kl2)?;

    let weighted_ctc = g.scale(ctc_sum, cfg.gamma1);
    let weighted_kl = g.scale(kl_sum, cfg.gamma2);
    Ok(g.add(weighted_ctc, weighted_kl)?)
}

/// Best-path CTC decoding: per-frame argmax (ties break toward the lower
/// id), collapse consecutive repeats, drop blanks.
pub fn greedy_decode<F: Scalar>(log_probs: &TensorData<F>) -> GlossSequence {
    let shape = log_probs.shape();
    assert_eq!(shape.len(), 2, "expected [frames, classes]");
    let (frames, classes) = (shape[0], shape[1]);
    let data = log_probs.data();
    let mut out = Vec::new();
    let mut prev = BLANK;
    for t in 0..frames {
        let row = &data[t * classes..(t + 1) * classes];
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    GlossSequence { ids: out }
}
