//! Building blocks of the recognizer: backbone stages, long-term motion
//! aggregation, orientational decoupling, motion purification, and the two
//! coupling mechanisms.

use super::{DecoupleOp, ModelError, Result};
use crate::tensor::{Graph, Padding, ParamId, PoolKind, Scalar, Session, Var};

/// One backbone stage: stride-2 3x3 conv then stride-1 3x3 conv, each
/// followed by ReLU, applied per frame (temporal kernel extent 1).
pub struct StageParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

impl StageParams {
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Result<Var> {
        let w1 = s.param(self.conv1_w);
        let b1 = s.param(self.conv1_b);
        let y = s
            .graph
            .conv(x, w1, Some(b1), &[1, 2, 2], Padding::Zero(vec![0, 1, 1]))?;
        let y = s.graph.relu(y);
        let w2 = s.param(self.conv2_w);
        let b2 = s.param(self.conv2_b);
        let y = s
            .graph
            .conv(y, w2, Some(b2), &[1, 1, 1], Padding::Zero(vec![0, 1, 1]))?;
        Ok(s.graph.relu(y))
    }
}

/// Long-term motion aggregation over a temporal context of 2n+1 frames.
///
/// Channels are first compressed C -> C/r; per context offset i != 0 the
/// difference (center - shifted_i) isolates moving regions; a shared
/// three-layer 1x3x3 conv block refines each difference map; the 2n maps
/// are fused back to C/r, restored to C, and added to the input. Every conv
/// after the differencing is bias-free, so temporally constant input passes
/// through unchanged.
pub struct LmaParams {
    pub compress_w: ParamId,
    pub compress_b: ParamId,
    pub block_w: [ParamId; 3],
    pub fuse_w: ParamId,
    pub restore_w: ParamId,
    pub half_window: usize,
}

/// Difference maps of a compressed feature block against its temporal
/// context, stacked along the time axis in offset order (-n..-1, 1..n).
/// Replicate padding makes edge frames compare against themselves.
pub fn temporal_context_diffs<F: Scalar>(
    g: &mut Graph<F>,
    compressed: Var,
    half_window: usize,
) -> Result<Var> {
    let t = g.shape(compressed)[1];
    let n = half_window;
    let padded = g.pad_replicate(compressed, 1, n, n)?;
    let mut shifts = Vec::with_capacity(2 * n);
    for i in -(n as isize)..=(n as isize) {
        if i == 0 {
            continue;
        }
        shifts.push(g.slice(padded, 1, (n as isize + i) as usize, t)?);
    }
    let stacked = g.concat(1, &shifts)?;
    let center = vec![compressed; 2 * n];
    let tiled = g.concat(1, &center)?;
    Ok(g.sub(tiled, stacked)?)
}

impl LmaParams {
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let (t, h, w) = (shape[1], shape[2], shape[3]);
        let n = self.half_window;

        let cw = s.param(self.compress_w);
        let cb = s.param(self.compress_b);
        let compressed = s.graph.conv(x, cw, Some(cb), &[1, 1, 1], Padding::None)?;
        let cr = s.graph.shape(compressed)[0];

        let mut y = temporal_context_diffs(&mut s.graph, compressed, n)?;
        for (i, wid) in self.block_w.iter().enumerate() {
            let wv = s.param(*wid);
            y = s
                .graph
                .conv(y, wv, None, &[1, 1, 1], Padding::Zero(vec![0, 1, 1]))?;
            if i + 1 < self.block_w.len() {
                y = s.graph.relu(y);
            }
        }
        // regroup the stacked time axis into the channel axis:
        // [C/r, 2n*T, H, W] -> [2n*C/r, T, H, W]
        let viewed = s.graph.reshape(y, &[cr, 2 * n, t, h, w])?;
        let swapped = s.graph.permute(viewed, &[1, 0, 2, 3, 4])?;
        let grouped = s.graph.reshape(swapped, &[2 * n * cr, t, h, w])?;

        let fw = s.param(self.fuse_w);
        let fused = s.graph.conv(grouped, fw, None, &[1, 1, 1], Padding::None)?;
        let rw = s.param(self.restore_w);
        let restored = s.graph.conv(fused, rw, None, &[1, 1, 1], Padding::None)?;
        Ok(s.graph.add(x, restored)?)
    }
}

/// Decoupled orientation components of a feature block.
#[derive(Copy, Clone, Debug)]
pub struct DecoupledVars {
    /// Horizontal component, height pooled away: `[C, T, W]`.
    pub h: Var,
    /// Vertical component, width pooled away: `[C, T, H]`.
    pub v: Var,
}

/// Project `[C, T, H, W]` features onto horizontal and vertical components
/// by pooling one spatial axis away.
pub fn decouple<F: Scalar>(g: &mut Graph<F>, x: Var, op: DecoupleOp) -> Result<DecoupledVars> {
    let pair = match op {
        DecoupleOp::Avg => DecoupledVars {
            h: g.pool_full(x, 2, PoolKind::Avg)?,
            v: g.pool_full(x, 3, PoolKind::Avg)?,
        },
        DecoupleOp::Max => DecoupledVars {
            h: g.pool_full(x, 2, PoolKind::Max)?,
            v: g.pool_full(x, 3, PoolKind::Max)?,
        },
        DecoupleOp::AvgMax => {
            let ha = g.pool_full(x, 2, PoolKind::Avg)?;
            let hm = g.pool_full(x, 2, PoolKind::Max)?;
            let va = g.pool_full(x, 3, PoolKind::Avg)?;
            let vm = g.pool_full(x, 3, PoolKind::Max)?;
            DecoupledVars {
                h: g.add(ha, hm)?,
                v: g.add(va, vm)?,
            }
        }
        DecoupleOp::None => {
            return Err(ModelError::BadConfig(
                "decouple called with operator `none`".into(),
            ))
        }
    };
    Ok(pair)
}

/// Purification of one orientation component (the horizontal and vertical
/// paths carry separate instances). A `[C, T, L]` component is treated as a
/// 2-d image over (T, L).
pub struct PurifyParams {
    pub mp1_w: ParamId,
    pub mp1_b: ParamId,
    pub mp_norm_gain: ParamId,
    pub mp_norm_shift: ParamId,
    pub mp2_w: ParamId,
    pub mp2_b: ParamId,
    pub ffn1_w: ParamId,
    pub ffn1_b: ParamId,
    pub ffn_norm_gain: ParamId,
    pub ffn_norm_shift: ParamId,
    pub ffn2_w: ParamId,
    pub ffn2_b: ParamId,
    /// Stride-2 fusion conv from the previous stage's component (cascaded
    /// mode only).
    pub down: Option<(ParamId, ParamId)>,
}

pub const NORM_EPS: f64 = 1e-5;

impl PurifyParams {
    /// Two 3x3 same-padding convs with layer norm + ReLU between, plus the
    /// residual connection around them.
    pub fn mp_block<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Result<Var> {
        let w1 = s.param(self.mp1_w);
        let b1 = s.param(self.mp1_b);
        let y = s
            .graph
            .conv(x, w1, Some(b1), &[1, 1], Padding::Zero(vec![1, 1]))?;
        let gain = s.param(self.mp_norm_gain);
        let shift = s.param(self.mp_norm_shift);
        let y = s.graph.layer_norm(y, 0, gain, shift, NORM_EPS)?;
        let y = s.graph.relu(y);
        let w2 = s.param(self.mp2_w);
        let b2 = s.param(self.mp2_b);
        let y = s
            .graph
            .conv(y, w2, Some(b2), &[1, 1], Padding::Zero(vec![1, 1]))?;
        Ok(s.graph.add(x, y)?)
    }

    /// Channel FFN (1x1 convs C -> C_hid -> C with norm + ReLU between) with
    /// a residual connection so zero-initialized branches preserve features.
    pub fn ffn<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Result<Var> {
        let w1 = s.param(self.ffn1_w);
        let b1 = s.param(self.ffn1_b);
        let y = s.graph.conv(x, w1, Some(b1), &[1, 1], Padding::None)?;
        let gain = s.param(self.ffn_norm_gain);
        let shift = s.param(self.ffn_norm_shift);
        let y = s.graph.layer_norm(y, 0, gain, shift, NORM_EPS)?;
        let y = s.graph.relu(y);
        let w2 = s.param(self.ffn2_w);
        let b2 = s.param(self.ffn2_b);
        let y = s.graph.conv(y, w2, Some(b2), &[1, 1], Padding::None)?;
        Ok(s.graph.add(x, y)?)
    }

    /// Full purification of one component. In cascaded mode the previous
    /// stage's purified component is downsampled (stride 2 on the last
    /// axis) and fused in before the blocks.
    pub fn purify<F: Scalar>(&self, s: &mut Session<F>, x: Var, prev: Option<Var>) -> Result<Var> {
        let mut cur = x;
        if let Some(p) = prev {
            let (dw, db) = self.down.ok_or_else(|| {
                ModelError::BadConfig("cascade fusion requested without fusion parameters".into())
            })?;
            let l_prev = *s.graph.shape(p).last().unwrap();
            let l_cur = *s.graph.shape(x).last().unwrap();
            if l_prev != 2 * l_cur {
                return Err(ModelError::CascadeExtentMismatch {
                    prev: l_prev,
                    current: l_cur,
                });
            }
            let wv = s.param(dw);
            let bv = s.param(db);
            let down = s.graph.conv(p, wv, Some(bv), &[1, 2], Padding::None)?;
            cur = s.graph.add(down, cur)?;
        }
        let cur = self.mp_block(s, cur)?;
        self.ffn(s, cur)
    }
}

/// Orientation-aware purification over both components.
pub struct OmpParams {
    pub h: PurifyParams,
    pub v: PurifyParams,
}

impl OmpParams {
    pub fn forward<F: Scalar>(
        &self,
        s: &mut Session<F>,
        pair: DecoupledVars,
        prev: Option<DecoupledVars>,
    ) -> Result<DecoupledVars> {
        Ok(DecoupledVars {
            h: self.h.purify(s, pair.h, prev.map(|p| p.h))?,
            v: self.v.purify(s, pair.v, prev.map(|p| p.v))?,
        })
    }
}

/// Add the purified components back onto the stage features, broadcast
/// across the pooled axis and scaled by learnable gains (zero-initialized,
/// so a fresh model preserves the original features exactly).
pub fn stage_couple<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    pair: DecoupledVars,
    gain_h: Var,
    gain_v: Var,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let h4 = g.reshape(pair.h, &[c, t, 1, w])?;
    let v4 = g.reshape(pair.v, &[c, t, h, 1])?;
    let th = g.mul(h4, gain_h)?;
    let tv = g.mul(v4, gain_v)?;
    let y = g.add(x, th)?;
    Ok(g.add(y, tv)?)
}

/// Pool each decoupled component down to `[C_i, T]`, map through the
/// per-stage projection `[D, C_i]`, and sum across stages into `[D, T]`.
pub fn cross_stage_couple<F: Scalar>(
    g: &mut Graph<F>,
    pairs: &[DecoupledVars],
    projections: &[Var],
) -> Result<Var> {
    assert_eq!(pairs.len(), projections.len());
    let mut acc: Option<Var> = None;
    let mut frames: Option<usize> = None;
    for (pair, &proj) in pairs.iter().zip(projections) {
        let t = g.shape(pair.h)[1];
        if let Some(t0) = frames {
            if t0 != t {
                return Err(ModelError::BadConfig(format!(
                    "cross-stage frame counts differ: {t0} vs {t}"
                )));
            }
        }
        frames = Some(t);
        let ph = g.pool_full(pair.h, 2, PoolKind::Avg)?;
        let pv = g.pool_full(pair.v, 2, PoolKind::Avg)?;
        let sum = g.add(ph, pv)?;
        let mapped = g.matmul(proj, sum)?;
        acc = Some(match acc {
            Some(a) => g.add(a, mapped)?,
            None => mapped,
        });
    }
    acc.ok_or_else(|| ModelError::BadConfig("cross-stage coupling with no decoupled stages".into()))
}
