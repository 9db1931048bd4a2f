//! Named parameter storage, graph binding, and the Adam update.
//!
//! Parameters live outside any computation graph. Each forward pass binds
//! them into a fresh graph as leaves (once per parameter, so weight sharing
//! is sharing of the bound node), and after backward the node gradients are
//! pulled back and summed into the per-parameter buffers. This keeps graphs
//! per-sample and lets batches run on independent graphs in parallel.

use super::{Graph, Result, Scalar, TensorData, TensorError, Var};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: TensorData<F>,
    pub grad: Vec<F>,
    /// Set once a graph has contributed a gradient since the last reset.
    pub grad_seen: bool,
}

pub struct ParamSet<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: TensorData<F>) -> ParamId {
        let n = value.numel();
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad: vec![F::ZERO; n],
            grad_seen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &TensorData<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut TensorData<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn grad(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::ZERO);
            e.grad_seen = false;
        }
    }

    /// Add a per-sample gradient contribution, scaled by `scale`.
    pub fn accumulate(&mut self, id: ParamId, grad: &[F], scale: F) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(e.grad.len(), grad.len());
        for (dst, &g) in e.grad.iter_mut().zip(grad) {
            *dst += g * scale;
        }
        e.grad_seen = true;
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Cast every parameter to another precision (used by the checking build).
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: vec![G::ZERO; e.value.numel()],
                    grad_seen: false,
                })
                .collect(),
        }
    }
}

/// A computation graph plus lazy parameter bindings into it.
pub struct Session<'p, F: Scalar> {
    pub graph: Graph<F>,
    params: &'p ParamSet<F>,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'p, F: Scalar> Session<'p, F> {
    pub fn train(params: &'p ParamSet<F>) -> Self {
        Session {
            graph: Graph::new(),
            bound: vec![None; params.len()],
            params,
            train: true,
        }
    }

    pub fn inference(params: &'p ParamSet<F>) -> Self {
        Session {
            graph: Graph::inference(),
            bound: vec![None; params.len()],
            params,
            train: false,
        }
    }

    /// Bind the parameter into the graph (at most once per session).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.value(id).clone(), self.train);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Pull node gradients out after backward, in parameter order.
    pub fn take_param_grads(&self) -> Vec<(ParamId, Vec<F>)> {
        let mut out = Vec::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = self.graph.grad(*v) {
                    out.push((ParamId(i), g.to_vec()));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// First/second moment buffers per parameter plus the step counter.
pub struct AdamState<F: Scalar> {
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        AdamState {
            step: 0,
            m: params
                .entries
                .iter()
                .map(|e| vec![F::ZERO; e.value.numel()])
                .collect(),
            v: params
                .entries
                .iter()
                .map(|e| vec![F::ZERO; e.value.numel()])
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Weight decay is the classic coupled
/// L2 form, added to the gradient before the moment updates. Gradients are
/// zeroed afterwards.
pub fn adam_step<F: Scalar>(
    params: &mut ParamSet<F>,
    state: &mut AdamState<F>,
    cfg: &OptimConfig,
) -> Result<()> {
    for e in &params.entries {
        if !e.grad_seen {
            return Err(TensorError::MissingGrad(e.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let one_m_b1 = F::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = F::from_f64(1.0 - cfg.beta2);
    let wd = F::from_f64(cfg.weight_decay);
    let eps = F::from_f64(cfg.eps);
    let corr1 = F::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let corr2 = F::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr = F::from_f64(cfg.lr);
    for (pi, e) in params.entries.iter_mut().enumerate() {
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for (((theta, g0), mi), vi) in e
            .value
            .data_mut()
            .iter_mut()
            .zip(e.grad.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = *g0 + wd * *theta;
            *mi = b1 * *mi + one_m_b1 * g;
            *vi = b2 * *vi + one_m_b2 * g * g;
            let mhat = *mi / corr1;
            let vhat = *vi / corr2;
            *theta -= lr * mhat / (vhat.sqrt() + eps);
        }
        e.grad.fill(F::ZERO);
        e.grad_seen = false;
    }
    Ok(())
}
