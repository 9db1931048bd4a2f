//! Temporal head: two kernel-5 1D conv + max-pool blocks for local modeling
//! at T/2 and T/4 rates, a single-layer BiLSTM for global modeling, and one
//! classifier shared by all three logit outputs.

use super::Result;
use crate::tensor::{Padding, ParamId, PoolKind, Scalar, Session, TensorData, Var};

pub struct LstmParams {
    /// `[input, 4*hidden]`, gate order i, f, g, o.
    pub w_input: ParamId,
    /// `[hidden, 4*hidden]`.
    pub w_hidden: ParamId,
    /// `[4*hidden]`.
    pub bias: ParamId,
    pub hidden: usize,
}

pub struct HeadParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub lstm_fwd: LstmParams,
    pub lstm_bwd: LstmParams,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

pub struct HeadOutputs {
    /// `[T/2, V+1]` from the first 1D-CNN.
    pub logits_local1: Var,
    /// `[T/4, V+1]` from the second 1D-CNN.
    pub logits_local2: Var,
    /// `[T/4, V+1]` from the BiLSTM.
    pub logits_global: Var,
}

impl HeadParams {
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, frames: Var) -> Result<HeadOutputs> {
        // frames: [T, d] -> channels-first [d, T]
        let seq = s.graph.permute(frames, &[1, 0])?;
        let w1 = s.param(self.conv1_w);
        let b1 = s.param(self.conv1_b);
        let c1 = s
            .graph
            .conv(seq, w1, Some(b1), &[1], Padding::Zero(vec![2]))?;
        let r1 = s.graph.relu(c1);
        let p1 = s.graph.pool_window(r1, 1, 2, 2, PoolKind::Max)?;
        let f1 = s.graph.permute(p1, &[1, 0])?;
        let logits_local1 = self.classify(s, f1)?;

        let w2 = s.param(self.conv2_w);
        let b2 = s.param(self.conv2_b);
        let c2 = s
            .graph
            .conv(p1, w2, Some(b2), &[1], Padding::Zero(vec![2]))?;
        let r2 = s.graph.relu(c2);
        let p2 = s.graph.pool_window(r2, 1, 2, 2, PoolKind::Max)?;
        let f2 = s.graph.permute(p2, &[1, 0])?;
        let logits_local2 = self.classify(s, f2)?;

        let states = self.bilstm(s, f2)?;
        let logits_global = self.classify(s, states)?;
        Ok(HeadOutputs {
            logits_local1,
            logits_local2,
            logits_global,
        })
    }

    /// The shared classifier; every head goes through this one weight/bias.
    fn classify<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Result<Var> {
        let w = s.param(self.classifier_w);
        let b = s.param(self.classifier_b);
        let y = s.graph.matmul(x, w)?;
        Ok(s.graph.add(y, b)?)
    }

    /// Forward and backward passes over the sequence; per-step hidden states
    /// concatenated into `[T, 2*hidden]`.
    fn bilstm<F: Scalar>(&self, s: &mut Session<F>, seq: Var) -> Result<Var> {
        let t = s.graph.shape(seq)[0];
        let fwd = lstm_direction(s, seq, &self.lstm_fwd, false)?;
        let bwd = lstm_direction(s, seq, &self.lstm_bwd, true)?;
        let mut rows = Vec::with_capacity(t);
        for i in 0..t {
            rows.push(s.graph.concat(1, &[fwd[i], bwd[i]])?);
        }
        Ok(s.graph.concat(0, &rows)?)
    }
}

/// Run one LSTM direction over `seq` (`[T, input]`), returning the hidden
/// state per time step in sequence order.
pub fn lstm_direction<F: Scalar>(
    s: &mut Session<F>,
    seq: Var,
    p: &LstmParams,
    reverse: bool,
) -> Result<Vec<Var>> {
    let t = s.graph.shape(seq)[0];
    let h = p.hidden;
    let mut hv = s.graph.constant(TensorData::zeros(&[1, h]));
    let mut cv = s.graph.constant(TensorData::zeros(&[1, h]));
    let w_in = s.param(p.w_input);
    let w_hid = s.param(p.w_hidden);
    let bias = s.param(p.bias);
    let steps: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    let mut out: Vec<Option<Var>> = vec![None; t];
    for &ti in &steps {
        let x_t = s.graph.slice(seq, 0, ti, 1)?;
        let (nh, nc) = lstm_cell(s, x_t, hv, cv, w_in, w_hid, bias, h)?;
        hv = nh;
        cv = nc;
        out[ti] = Some(hv);
    }
    Ok(out.into_iter().map(|v| v.unwrap()).collect())
}

/// One LSTM cell step on `[1, input]`, returning (hidden, cell).
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell<F: Scalar>(
    s: &mut Session<F>,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    w_input: Var,
    w_hidden: Var,
    bias: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let gi = s.graph.matmul(x_t, w_input)?;
    let gh = s.graph.matmul(h_prev, w_hidden)?;
    let lin = s.graph.add(gi, gh)?;
    let gates = s.graph.add(lin, bias)?;
    let i_raw = s.graph.slice(gates, 1, 0, hidden)?;
    let f_raw = s.graph.slice(gates, 1, hidden, hidden)?;
    let g_raw = s.graph.slice(gates, 1, 2 * hidden, hidden)?;
    let o_raw = s.graph.slice(gates, 1, 3 * hidden, hidden)?;
    let i_g = s.graph.sigmoid(i_raw);
    let f_g = s.graph.sigmoid(f_raw);
    let g_g = s.graph.tanh_act(g_raw);
    let o_g = s.graph.sigmoid(o_raw);
    let keep = s.graph.mul(f_g, c_prev)?;
    let write = s.graph.mul(i_g, g_g)?;
    let c = s.graph.add(keep, write)?;
    let c_act = s.graph.tanh_act(c);
    let h = s.graph.mul(o_g, c_act)?;
    Ok((h, c))
}
