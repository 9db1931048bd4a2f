//! Differentiable tensor operations.
//!
//! Every method validates shapes, computes the forward value, and (when any
//! input tracks gradients) records a backward rule on the tape. Convolutions
//! of rank 1..3 share one implementation that pads missing leading spatial
//! axes with extent-1 dummies.

use super::graph::{Graph, Node, Var};
use super::{axis_split, strides_of, Result, Scalar, TensorData, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub enum Padding {
    /// Zero padding with per-axis amounts (applied on both sides).
    Zero(Vec<usize>),
    /// Edge-replicate padding with per-axis amounts.
    Replicate(Vec<usize>),
    /// No padding.
    None,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Check that `b` broadcasts to `a` (right-aligned; axes equal or 1).
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    let off = a.len() - b.len();
    b.iter()
        .enumerate()
        .all(|(i, &e)| e == 1 || e == a[off + i])
}

/// Visit (a_flat, b_flat) pairs for `b` broadcast over `a`.
fn broadcast_pairs(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let ra = a_shape.len();
    let rb = b_shape.len();
    let bs = strides_of(b_shape);
    let mut bstride = vec![0usize; ra];
    for i in 0..rb {
        if b_shape[i] != 1 {
            bstride[ra - rb + i] = bs[i];
        }
    }
    let n: usize = a_shape.iter().product();
    let mut coords = vec![0usize; ra];
    let mut ib = 0usize;
    for ia in 0..n {
        f(ia, ib);
        for ax in (0..ra).rev() {
            coords[ax] += 1;
            ib += bstride[ax];
            if coords[ax] < a_shape[ax] {
                break;
            }
            coords[ax] = 0;
            ib -= bstride[ax] * a_shape[ax];
        }
    }
}

fn elementwise_shapes<F: Scalar>(op: &'static str, g: &Graph<F>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if !broadcast_ok(sa, sb) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

impl<F: Scalar> Graph<F> {
    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, BinKind::Mul)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: fn(F, F) -> F,
        kind: BinKind,
    ) -> Result<Var> {
        elementwise_shapes(name, self, a, b)?;
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let same = a_shape == b_shape;
        let out = {
            let (ad, bd) = (self.data(a), self.data(b));
            let mut out = Vec::with_capacity(ad.len());
            if same {
                out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            } else if bd.len() == 1 {
                let y = bd[0];
                out.extend(ad.iter().map(|&x| f(x, y)));
            } else {
                out.resize(ad.len(), F::ZERO);
                broadcast_pairs(&a_shape, &b_shape, |ia, ib| out[ia] = f(ad[ia], bd[ib]));
            }
            TensorData::new(a_shape.clone(), out)
        };
        let needs = self.any_requires(&[a, b]);
        Ok(self.push_op(out, needs, || {
            Box::new(
                move |_node: &Node<F>, gout: &[F], prefix: &mut [Node<F>]| match kind {
                    BinKind::Add | BinKind::Sub => {
                        if prefix[a.0].requires_grad {
                            prefix[a.0].accumulate(gout.iter().copied());
                        }
                        if prefix[b.0].requires_grad {
                            let sign = if kind == BinKind::Sub {
                                -F::ONE
                            } else {
                                F::ONE
                            };
                            let bshape = prefix[b.0].value.shape().to_vec();
                            if bshape == a_shape {
                                prefix[b.0].accumulate(gout.iter().map(|&g| sign * g));
                            } else {
                                let mut gb = vec![F::ZERO; prefix[b.0].value.numel()];
                                broadcast_pairs(&a_shape, &bshape, |ia, ib| {
                                    gb[ib] += sign * gout[ia];
                                });
                                prefix[b.0].accumulate(gb.into_iter());
                            }
                        }
                    }
                    BinKind::Mul => {
                        let bshape = prefix[b.0].value.shape().to_vec();
                        if prefix[a.0].requires_grad {
                            let mut ga = vec![F::ZERO; gout.len()];
                            {
                                let bd = prefix[b.0].value.data();
                                if bshape == a_shape {
                                    for ((d, &g), &y) in ga.iter_mut().zip(gout).zip(bd) {
                                        *d = g * y;
                                    }
                                } else {
                                    broadcast_pairs(&a_shape, &bshape, |ia, ib| {
                                        ga[ia] = gout[ia] * bd[ib];
                                    });
                                }
                            }
                            prefix[a.0].accumulate(ga.into_iter());
                        }
                        if prefix[b.0].requires_grad {
                            let mut gb = vec![F::ZERO; prefix[b.0].value.numel()];
                            {
                                let ad = prefix[a.0].value.data();
                                broadcast_pairs(&a_shape, &bshape, |ia, ib| {
                                    gb[ib] += gout[ia] * ad[ia];
                                });
                            }
                            prefix[b.0].accumulate(gb.into_iter());
                        }
                    }
                },
            )
        }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let value = TensorData::new(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|&v| v * cf).collect(),
        );
        let needs = self.any_requires(&[x]);
        self.push_op(value, needs, || {
            Box::new(move |_node, gout, prefix| {
                prefix[x.0].accumulate(gout.iter().map(|&g| g * cf));
            })
        })
    }

    // ── matmul ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::InnerDimMismatch { lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let needs = self.any_requires(&[a, b]);
        Ok(self.push_op(TensorData::new(vec![m, n], out), needs, || {
            Box::new(move |_node, gout, prefix| {
                if prefix[a.0].requires_grad {
                    let mut ga = vec![F::ZERO; m * k];
                    {
                        let bd = prefix[b.0].value.data();
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    prefix[a.0].accumulate(ga.into_iter());
                }
                if prefix[b.0].requires_grad {
                    let mut gb = vec![F::ZERO; k * n];
                    {
                        let ad = prefix[a.0].value.data();
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                let brow = &mut gb[p * n..(p + 1) * n];
                                for (o, &g) in brow.iter_mut().zip(grow) {
                                    *o += av * g;
                                }
                            }
                        }
                    }
                    prefix[b.0].accumulate(gb.into_iter());
                }
            })
        }))
    }

    // ── convolution ─────────────────────────────────────────────────

    /// N-d convolution, rank 1..3.
    ///
    /// `x`: `[C_in, S...]`, `kernel`: `[C_out, C_in, K...]`, output
    /// `[C_out, O...]` with `O = (S + 2p - K) / stride + 1` per axis.
    pub fn conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: &[usize],
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let rank = xs.len().saturating_sub(1);
        if !(1..=3).contains(&rank) || ks.len() != rank + 2 || stride.len() != rank {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: format!("rank {} input {:?} kernel {:?}", rank, xs, ks),
            });
        }
        if ks[1] != xs[0] {
            return Err(TensorError::ChannelMismatch {
                input: xs[0],
                kernel: ks[1],
            });
        }
        let (mode_rep, pad_amt) = match &padding {
            Padding::Zero(p) => (false, p.clone()),
            Padding::Replicate(p) => (true, p.clone()),
            Padding::None => (false, vec![0; rank]),
        };
        if pad_amt.len() != rank {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: format!("padding amounts {:?} for rank {}", pad_amt, rank),
            });
        }
        // Normalize to 3 spatial axes (leading dummies of extent 1).
        let lead = 3 - rank;
        let mut dims = ConvDims {
            co: ks[0],
            ci: xs[0],
            s: [1; 3],
            k: [1; 3],
            o: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
            replicate: mode_rep,
        };
        for i in 0..rank {
            dims.s[lead + i] = xs[1 + i];
            dims.k[lead + i] = ks[2 + i];
            dims.stride[lead + i] = stride[i];
            dims.pad[lead + i] = pad_amt[i];
        }
        for ax in 0..3 {
            let padded = dims.s[ax] + 2 * dims.pad[ax];
            if dims.k[ax] > padded {
                return Err(TensorError::KernelTooLarge {
                    kernel: ks[2..].to_vec(),
                    input: xs[1..].to_vec(),
                });
            }
            dims.o[ax] = (padded - dims.k[ax]) / dims.stride[ax] + 1;
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [dims.co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv bias",
                    lhs: vec![dims.co],
                    rhs: bs.to_vec(),
                });
            }
        }
        let out_data = {
            let xd = self.data(x);
            let kd = self.data(kernel);
            let bd = bias.map(|b| self.data(b).to_vec());
            conv_forward(&dims, xd, kd, bd.as_deref())
        };
        let mut out_shape = vec![dims.co];
        out_shape.extend_from_slice(&dims.o[lead..]);
        let mut parents = vec![x, kernel];
        if let Some(b) = bias {
            parents.push(b);
        }
        let needs = self.any_requires(&parents);
        Ok(
            self.push_op(TensorData::new(out_shape, out_data), needs, || {
                Box::new(move |_node, gout, prefix| {
                    if prefix[x.0].requires_grad {
                        let gx = {
                            let kd = prefix[kernel.0].value.data();
                            conv_backward_input(&dims, kd, gout)
                        };
                        prefix[x.0].accumulate(gx.into_iter());
                    }
                    if prefix[kernel.0].requires_grad {
                        let gk = {
                            let xd = prefix[x.0].value.data();
                            conv_backward_kernel(&dims, xd, gout)
                        };
                        prefix[kernel.0].accumulate(gk.into_iter());
                    }
                    if let Some(b) = bias {
                        if prefix[b.0].requires_grad {
                            let osz = dims.o[0] * dims.o[1] * dims.o[2];
                            let gb: Vec<F> = (0..dims.co)
                                .map(|co| {
                                    let mut acc = F::ZERO;
                                    for &g in &gout[co * osz..(co + 1) * osz] {
                                        acc += g;
                                    }
                                    acc
                                })
                                .collect();
                            prefix[b.0].accumulate(gb.into_iter());
                        }
                    }
                })
            }),
        )
    }

    // ── pooling ─────────────────────────────────────────────────────

    /// Pool an entire axis away; the output drops that axis.
    pub fn pool_full(&mut self, x: Var, axis: usize, kind: PoolKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "pool",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        if ext == 0 {
            return Err(TensorError::Invalid {
                op: "pool",
                msg: "empty axis".into(),
            });
        }
        let mut out = vec![F::ZERO; outer * inner];
        let mut arg = vec![
            0usize;
            if kind == PoolKind::Max {
                outer * inner
            } else {
                0
            }
        ];
        {
            let xd = self.data(x);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * ext * inner + i;
                    match kind {
                        PoolKind::Avg => {
                            let mut acc = F::ZERO;
                            for j in 0..ext {
                                acc += xd[base + j * inner];
                            }
                            out[o * inner + i] = acc / F::from_f64(ext as f64);
                        }
                        PoolKind::Max => {
                            let mut best = xd[base];
                            let mut bj = 0;
                            for j in 1..ext {
                                let v = xd[base + j * inner];
                                if v > best {
                                    best = v;
                                    bj = j;
                                }
                            }
                            out[o * inner + i] = best;
                            arg[o * inner + i] = bj;
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.any_requires(&[x]);
        Ok(self.push_op(TensorData::new(out_shape, out), needs, || {
            Box::new(move |_node, gout, prefix| {
                let mut gx = vec![F::ZERO; outer * ext * inner];
                match kind {
                    PoolKind::Avg => {
                        let w = F::ONE / F::from_f64(ext as f64);
                        for o in 0..outer {
                            for i in 0..inner {
                                let g = gout[o * inner + i] * w;
                                let base = o * ext * inner + i;
                                for j in 0..ext {
                                    gx[base + j * inner] += g;
                                }
                            }
                        }
                    }
                    PoolKind::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let j = arg[o * inner + i];
                                gx[o * ext * inner + j * inner + i] += gout[o * inner + i];
                            }
                        }
                    }
                }
                prefix[x.0].accumulate(gx.into_iter());
            })
        }))
    }

    /// Windowed pooling along one axis (kernel `size`, step `stride`).
    pub fn pool_window(
        &mut self,
        x: Var,
        axis: usize,
        size: usize,
        stride: usize,
        kind: PoolKind,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "pool",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        if size == 0 || stride == 0 || size > ext {
            return Err(TensorError::Invalid {
                op: "pool",
                msg: format!("window {}x{} does not fit extent {}", size, stride, ext),
            });
        }
        let out_ext = (ext - size) / stride + 1;
        let mut out = vec![F::ZERO; outer * out_ext * inner];
        let mut arg = vec![0usize; if kind == PoolKind::Max { out.len() } else { 0 }];
        {
            let xd = self.data(x);
            for o in 0..outer {
                for w in 0..out_ext {
                    for i in 0..inner {
                        let base = o * ext * inner + (w * stride) * inner + i;
                        let oi = o * out_ext * inner + w * inner + i;
                        match kind {
                            PoolKind::Avg => {
                                let mut acc = F::ZERO;
                                for j in 0..size {
                                    acc += xd[base + j * inner];
                                }
                                out[oi] = acc / F::from_f64(size as f64);
                            }
                            PoolKind::Max => {
                                let mut best = xd[base];
                                let mut bj = 0;
                                for j in 1..size {
                                    let v = xd[base + j * inner];
                                    if v > best {
                                        best = v;
                                        bj = j;
                                    }
                                }
                                out[oi] = best;
                                arg[oi] = bj;
                            }
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = out_ext;
        let needs = self.any_requires(&[x]);
        Ok(self.push_op(TensorData::new(out_shape, out), needs, || {
            Box::new(move |_node, gout, prefix| {
                let mut gx = vec![F::ZERO; outer * ext * inner];
                for o in 0..outer {
                    for w in 0..out_ext {
                        for i in 0..inner {
                            let oi = o * out_ext * inner + w * inner + i;
                            let base = o * ext * inner + (w * stride) * inner + i;
                            match kind {
                                PoolKind::Avg => {
                                    let g = gout[oi] / F::from_f64(size as f64);
                                    for j in 0..size {
                                        gx[base + j * inner] += g;
                                    }
                                }
                                PoolKind::Max => {
                                    gx[base + arg[oi] * inner] += gout[oi];
                                }
                            }
                        }
                    }
                }
                prefix[x.0].accumulate(gx.into_iter());
            })
        }))
    }

    // ── activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > F::ZERO { v } else { F::ZERO },
            |y, g| {
                if y > F::ZERO {
                    g
                } else {
                    F::ZERO
                }
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| F::ONE / (F::ONE + (-v).exp()),
            |y, g| g * y * (F::ONE - y),
        )
    }

    pub fn tanh_act(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |y, g| g * (F::ONE - y * y))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |y, g| g * y)
    }

    fn unary(&mut self, x: Var, f: fn(F) -> F, df: fn(F, F) -> F) -> Var {
        let value = TensorData::new(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|&v| f(v)).collect(),
        );
        let needs = self.any_requires(&[x]);
        self.push_op(value, needs, || {
            Box::new(move |node: &Node<F>, gout: &[F], prefix: &mut [Node<F>]| {
                let y = node.value.data();
                prefix[x.0].accumulate(y.iter().zip(gout).map(|(&y, &g)| df(y, g)));
            })
        })
    }

    // ── normalization ───────────────────────────────────────────────

    /// Layer normalization over one axis followed by a per-position affine
    /// map (`gain`, `shift` of shape `[extent]`).
    pub fn layer_norm(
        &mut self,
        x: Var,
        axis: usize,
        gain: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "layer_norm",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "empty axis".into(),
            });
        }
        for (name, v) in [("gain", gain), ("shift", shift)] {
            if self.shape(v) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![n],
                    rhs: self.shape(v).to_vec(),
                });
            }
            let _ = name;
        }
        let lanes = outer * inner;
        let epsf = F::from_f64(eps);
        let mut out = vec![F::ZERO; shape.iter().product()];
        let mut mu = vec![F::ZERO; lanes];
        let mut istd = vec![F::ZERO; lanes];
        {
            let xd = self.data(x);
            let gd = self.data(gain);
            let sd = self.data(shift);
            let nf = F::from_f64(n as f64);
            for o in 0..outer {
                for i in 0..inner {
                    let lane = o * inner + i;
                    let base = o * n * inner + i;
                    let mut m = F::ZERO;
                    for j in 0..n {
                        m += xd[base + j * inner];
                    }
                    m = m / nf;
                    let mut v = F::ZERO;
                    for j in 0..n {
                        let d = xd[base + j * inner] - m;
                        v += d * d;
                    }
                    v = v / nf;
                    let is = F::ONE / (v + epsf).sqrt();
                    mu[lane] = m;
                    istd[lane] = is;
                    for j in 0..n {
                        let xh = (xd[base + j * inner] - m) * is;
                        out[base + j * inner] = gd[j] * xh + sd[j];
                    }
                }
            }
        }
        let needs = self.any_requires(&[x, gain, shift]);
        Ok(self.push_op(TensorData::new(shape, out), needs, || {
            Box::new(move |_node, gout, prefix| {
                let nf = F::from_f64(n as f64);
                let mut gx = vec![F::ZERO; outer * n * inner];
                let mut ggain = vec![F::ZERO; n];
                let mut gshift = vec![F::ZERO; n];
                {
                    let xd = prefix[x.0].value.data();
                    let gaind = prefix[gain.0].value.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let lane = o * inner + i;
                            let base = o * n * inner + i;
                            let (m, is) = (mu[lane], istd[lane]);
                            let mut m1 = F::ZERO;
                            let mut m2 = F::ZERO;
                            for j in 0..n {
                                let idx = base + j * inner;
                                let xh = (xd[idx] - m) * is;
                                let gh = gout[idx] * gaind[j];
                                m1 += gh;
                                m2 += gh * xh;
                                ggain[j] += gout[idx] * xh;
                                gshift[j] += gout[idx];
                            }
                            m1 = m1 / nf;
                            m2 = m2 / nf;
                            for j in 0..n {
                                let idx = base + j * inner;
                                let xh = (xd[idx] - m) * is;
                                let gh = gout[idx] * gaind[j];
                                gx[idx] = (gh - m1 - xh * m2) * is;
                            }
                        }
                    }
                }
                if prefix[x.0].requires_grad {
                    prefix[x.0].accumulate(gx.into_iter());
                }
                if prefix[gain.0].requires_grad {
                    prefix[gain.0].accumulate(ggain.into_iter());
                }
                if prefix[shift.0].requires_grad {
                    prefix[shift.0].accumulate(gshift.into_iter());
                }
            })
        }))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "log_softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "log_softmax",
                msg: "empty axis".into(),
            });
        }
        let mut out = vec![F::ZERO; shape.iter().product()];
        {
            let xd = self.data(x);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut m = xd[base];
                    for j in 1..n {
                        m = m.maximum(xd[base + j * inner]);
                    }
                    let mut z = F::ZERO;
                    for j in 0..n {
                        z += (xd[base + j * inner] - m).exp();
                    }
                    let lz = z.ln();
                    for j in 0..n {
                        out[base + j * inner] = xd[base + j * inner] - m - lz;
                    }
                }
            }
        }
        let needs = self.any_requires(&[x]);
        Ok(self.push_op(TensorData::new(shape, out), needs, || {
            Box::new(move |node: &Node<F>, gout: &[F], prefix: &mut [Node<F>]| {
                let y = node.value.data();
                let mut gx = vec![F::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut gsum = F::ZERO;
                        for j in 0..n {
                            gsum += gout[base + j * inner];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx[idx] = gout[idx] - y[idx].exp() * gsum;
                        }
                    }
                }
                prefix[x.0].accumulate(gx.into_iter());
            })
        }))
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![F::ZERO; outer * total * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for (pi, &p) in parts.iter().enumerate() {
                let e = extents[pi];
                let pd = self.data(p);
                let src = &pd[o * e * inner..(o + 1) * e * inner];
                let dst = &mut out[o * total * inner + off * inner..][..e * inner];
                dst.copy_from_slice(src);
                off += e;
            }
        }
        let parts_vec = parts.to_vec();
        let needs = self.any_requires(parts);
        Ok(self.push_op(TensorData::new(out_shape, out), needs, || {
            Box::new(move |_node, gout, prefix| {
                let mut off = 0usize;
                for (pi, &p) in parts_vec.iter().enumerate() {
                    let e = extents[pi];
                    if prefix[p.0].requires_grad {
                        let mut gp = vec![F::ZERO; outer * e * inner];
                        for o in 0..outer {
                            let src = &gout[o * total * inner + off * inner..][..e * inner];
                            gp[o * e * inner..(o + 1) * e * inner].copy_from_slice(src);
                        }
                        prefix[p.0].accumulate(gp.into_iter());
                    }
                    off += e;
                }
            })
        }))
    }

    /// Contiguous slice `[start, start+len)` along one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        if start + len > ext || len == 0 {
            return Err(TensorError::SliceOutOfRange {
                start,
                len,
                extent: ext,
            });
        }
        let mut out = vec![F::ZERO; outer * len * inner];
        {
            let xd = self.data(x);
            for o in 0..outer {
                let src = &xd[o * ext * inner + start * inner..][..len * inner];
                out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let needs = self.any_requires(&[x]);
        Ok(self.push_op(TensorData::new(out_shape, out), needs, || {
            Box::new(move |_node, gout, prefix| {
                let mut gx = vec![F::ZERO; outer * ext * inner];
                for o in 0..outer {
                    let dst = &mut gx[o * ext * inner + start * inner..][..len * inner];
                    let src = &gout[o * len * inner..(o + 1) * len * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                prefix[x.0].accumulate(gx.into_iter());
            })
        }))
    }

    /// Edge-replicate padding along one axis. The gradient of a padded
    /// position flows back into the edge position it copied.
    pub fn pad_replicate(
        &mut self,
        x: Var,
        axis: usize,
        before: usize,
        after: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "pad",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        if ext == 0 {
            return Err(TensorError::Invalid {
                op: "pad",
                msg: "empty axis has no edge".into(),
            });
        }
        let new_ext = ext + before + after;
        let mut out = vec![F::ZERO; outer * new_ext * inner];
        {
            let xd = self.data(x);
            for o in 0..outer {
                for j in 0..new_ext {
                    let src = j.saturating_sub(before).min(ext - 1);
                    let s = &xd[o * ext * inner + src * inner..][..inner];
                    out[o * new_ext * inner + j * inner..][..inner].copy_from_slice(s);
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = new_ext;
        let needs = self.any_requires(&[x]);
        Ok(self.push_op(TensorData::new(out_shape, out), needs, || {
            Box::new(move |_node, gout, prefix| {
                let mut gx = vec![F::ZERO; outer * ext * inner];
                for o in 0..outer {
                    for j in 0..new_ext {
                        let src = j.saturating_sub(before).min(ext - 1);
                        let dst = &mut gx[o * ext * inner + src * inner..][..inner];
                        let gsrc = &gout[o * new_ext * inner + j * inner..][..inner];
                        for (d, &g) in dst.iter_mut().zip(gsrc) {
                            *d += g;
                        }
                    }
                }
                prefix[x.0].accumulate(gx.into_iter());
            })
        }))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!(
                    "{:?} -> {:?} changes element count",
                    self.shape(x),
                    new_shape
                ),
            });
        }
        let value = TensorData::new(new_shape.to_vec(), self.data(x).to_vec());
        let needs = self.any_requires(&[x]);
        Ok(self.push_op(value, needs, || {
            Box::new(move |_node, gout, prefix| {
                prefix[x.0].accumulate(gout.iter().copied());
            })
        }))
    }

    /// Permute axes; `perm[d]` names the input axis that becomes output axis `d`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{:?} is not a permutation of rank {}", perm, rank),
            });
        }
        let in_strides = strides_of(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n: usize = shape.iter().product();
        let mut out = vec![F::ZERO; n];
        let mut src_index = vec![0usize; n];
        {
            let xd = self.data(x);
            let mut coords = vec![0usize; rank];
            let mut ix = 0usize;
            for (oi, slot) in out.iter_mut().enumerate() {
                *slot = xd[ix];
                src_index[oi] = ix;
                for ax in (0..rank).rev() {
                    coords[ax] += 1;
                    ix += map_strides[ax];
                    if coords[ax] < out_shape[ax] {
                        break;
                    }
                    coords[ax] = 0;
                    ix -= map_strides[ax] * out_shape[ax];
                }
            }
        }
        let needs = self.any_requires(&[x]);
        Ok(self.push_op(TensorData::new(out_shape, out), needs, || {
            Box::new(move |_node, gout, prefix| {
                let mut gx = vec![F::ZERO; n];
                for (oi, &ix) in src_index.iter().enumerate() {
                    gx[ix] += gout[oi];
                }
                prefix[x.0].accumulate(gx.into_iter());
            })
        }))
    }

    /// Gather rows of a 2-d tensor; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "select_rows",
                msg: format!("expected rank 2, got {:?}", shape),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::SliceOutOfRange {
                start: bad,
                len: 1,
                extent: rows,
            });
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        {
            let xd = self.data(x);
            for &r in indices {
                out.extend_from_slice(&xd[r * cols..(r + 1) * cols]);
            }
        }
        let idx = indices.to_vec();
        let needs = self.any_requires(&[x]);
        Ok(self.push_op(
            TensorData::new(vec![indices.len(), cols], out),
            needs,
            || {
                Box::new(move |_node, gout, prefix| {
                    let mut gx = vec![F::ZERO; rows * cols];
                    for (j, &r) in idx.iter().enumerate() {
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        let src = &gout[j * cols..(j + 1) * cols];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    prefix[x.0].accumulate(gx.into_iter());
                })
            },
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = F::ZERO;
        for &v in self.data(x) {
            acc += v;
        }
        let n = self.value(x).numel();
        let needs = self.any_requires(&[x]);
        self.push_op(TensorData::scalar(acc), needs, || {
            Box::new(move |_node, gout, prefix| {
                let g = gout[0];
                prefix[x.0].accumulate(std::iter::repeat_n(g, n));
            })
        })
    }
}

#[derive(Copy, Clone, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

// ── convolution kernels ─────────────────────────────────────────────

#[derive(Copy, Clone)]
struct ConvDims {
    co: usize,
    ci: usize,
    s: [usize; 3],
    k: [usize; 3],
    o: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    replicate: bool,
}

impl ConvDims {
    /// 1x1 kernel, unit stride, no padding: the lowering is the identity,
    /// so the input itself serves as the column matrix.
    fn is_pointwise(&self) -> bool {
        !self.replicate && self.k == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Output positions along `ax` whose input index `o*stride - pad + k`
    /// falls inside the unpadded input. Returns an empty range when none do.
    fn valid(&self, ax: usize, k: usize) -> std::ops::Range<usize> {
        let (s, st, p) = (self.s[ax], self.stride[ax], self.pad[ax]);
        let lo = if p > k { (p - k).div_ceil(st) } else { 0 };
        let hi_num = s + p;
        if hi_num <= k {
            return 0..0;
        }
        let hi = ((hi_num - 1 - k) / st + 1).min(self.o[ax]);
        lo.min(self.o[ax])..hi
    }

    fn in_size(&self) -> usize {
        self.s[0] * self.s[1] * self.s[2]
    }

    fn out_size(&self) -> usize {
        self.o[0] * self.o[1] * self.o[2]
    }
}

/// Dot product with independent accumulators so the FP reduction chain
/// does not serialize.
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::ZERO; 8];
    let n8 = a.len() / 8 * 8;
    for (ca, cb) in a[..n8].chunks_exact(8).zip(b[..n8].chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut s = F::ZERO;
    for (&x, &y) in a[n8..].iter().zip(&b[n8..]) {
        s += x * y;
    }
    for v in acc {
        s += v;
    }
    s
}

/// For each spatial kernel offset and output position: the input spatial
/// index it reads, or -1 when it falls into zero padding. Lets the hot
/// convolutions run as one lowering pass plus a matrix product.
fn conv_index_table(d: &ConvDims) -> Vec<i64> {
    let osz = d.out_size();
    let ksz = d.k[0] * d.k[1] * d.k[2];
    let mut table = vec![-1i64; ksz * osz];
    let (in1, in2) = (d.s[1] * d.s[2], d.s[2]);
    let (on1, on2) = (d.o[1] * d.o[2], d.o[2]);
    for k0 in 0..d.k[0] {
        for k1 in 0..d.k[1] {
            for k2 in 0..d.k[2] {
                let k = (k0 * d.k[1] + k1) * d.k[2] + k2;
                let row = &mut table[k * osz..(k + 1) * osz];
                let r0 = d.valid(0, k0);
                let r1 = d.valid(1, k1);
                let r2 = d.valid(2, k2);
                if r2.is_empty() {
                    continue;
                }
                for o0 in r0.clone() {
                    let i0 = o0 * d.stride[0] + k0 - d.pad[0];
                    for o1 in r1.clone() {
                        let i1 = o1 * d.stride[1] + k1 - d.pad[1];
                        let base_o = o0 * on1 + o1 * on2;
                        let base_i = (i0 * in1 + i1 * in2) as i64;
                        for o2 in r2.clone() {
                            let i2 = o2 * d.stride[2] + k2 - d.pad[2];
                            row[base_o + o2] = base_i + i2 as i64;
                        }
                    }
                }
            }
        }
    }
    table
}

/// Lower the input into `[ci * ksz, osz]` following the index table.
fn im2col<F: Scalar>(d: &ConvDims, x: &[F], table: &[i64]) -> Vec<F> {
    let osz = d.out_size();
    let isz = d.in_size();
    let ksz = d.k[0] * d.k[1] * d.k[2];
    let mut col = vec![F::ZERO; d.ci * ksz * osz];
    for ci in 0..d.ci {
        let xese = &x[ci * isz..(ci + 1) * isz];
        let dst_base = ci * ksz * osz;
        for (dst, &src) in col[dst_base..dst_base + ksz * osz].iter_mut().zip(table) {
            if src >= 0 {
                *dst = xese[src as usize];
            }
        }
    }
    col
}

fn conv_forward<F: Scalar>(d: &ConvDims, x: &[F], w: &[F], bias: Option<&[F]>) -> Vec<F> {
    let osz = d.out_size();
    let ksz = d.k[0] * d.k[1] * d.k[2];
    let mut out = vec![F::ZERO; d.co * osz];
    if d.replicate {
        let isz = d.in_size();
        for co in 0..d.co {
            if let Some(b) = bias {
                out[co * osz..(co + 1) * osz].fill(b[co]);
            }
            for ci in 0..d.ci {
                let xese = &x[ci * isz..(ci + 1) * isz];
                let wbase = (co * d.ci + ci) * ksz;
                for k0 in 0..d.k[0] {
                    for k1 in 0..d.k[1] {
                        for k2 in 0..d.k[2] {
                            let wv = w[wbase + (k0 * d.k[1] + k1) * d.k[2] + k2];
                            conv_tap_replicate(
                                d,
                                xese,
                                wv,
                                [k0, k1, k2],
                                &mut out[co * osz..(co + 1) * osz],
                            );
                        }
                    }
                }
            }
        }
        return out;
    }
    let col_store;
    let col: &[F] = if d.is_pointwise() {
        x
    } else {
        let table = conv_index_table(d);
        col_store = im2col(d, x, &table);
        &col_store
    };
    let kdim = d.ci * ksz;
    for co in 0..d.co {
        let orow = &mut out[co * osz..(co + 1) * osz];
        if let Some(b) = bias {
            orow.fill(b[co]);
        }
        let wrow = &w[co * kdim..(co + 1) * kdim];
        for (kk, &wv) in wrow.iter().enumerate() {
            let crow = &col[kk * osz..(kk + 1) * osz];
            for (o, &c) in orow.iter_mut().zip(crow) {
                *o += wv * c;
            }
        }
    }
    out
}

/// One kernel tap, replicate padding: input index clamps to the edge.
fn conv_tap_replicate<F: Scalar>(d: &ConvDims, x: &[F], wv: F, k: [usize; 3], out: &mut [F]) {
    let (in1, in2) = (d.s[1] * d.s[2], d.s[2]);
    let (on1, on2) = (d.o[1] * d.o[2], d.o[2]);
    let clamp = |o: usize, ax: usize, kk: usize| -> usize {
        let raw = (o * d.stride[ax] + kk) as isize - d.pad[ax] as isize;
        raw.clamp(0, d.s[ax] as isize - 1) as usize
    };
    for o0 in 0..d.o[0] {
        let i0 = clamp(o0, 0, k[0]);
        for o1 in 0..d.o[1] {
            let i1 = clamp(o1, 1, k[1]);
            let xrow = &x[i0 * in1 + i1 * in2..][..d.s[2]];
            let orow = &mut out[o0 * on1 + o1 * on2..][..d.o[2]];
            for (o2, o) in orow.iter_mut().enumerate() {
                *o += wv * xrow[clamp(o2, 2, k[2])];
            }
        }
    }
}

fn conv_backward_input<F: Scalar>(d: &ConvDims, w: &[F], gout: &[F]) -> Vec<F> {
    let osz = d.out_size();
    let isz = d.in_size();
    let ksz = d.k[0] * d.k[1] * d.k[2];
    let mut gx = vec![F::ZERO; d.ci * isz];
    if d.replicate {
        let (in1, in2) = (d.s[1] * d.s[2], d.s[2]);
        let (on1, on2) = (d.o[1] * d.o[2], d.o[2]);
        let clamp = |o: usize, ax: usize, kk: usize| -> usize {
            let raw = (o * d.stride[ax] + kk) as isize - d.pad[ax] as isize;
            raw.clamp(0, d.s[ax] as isize - 1) as usize
        };
        for co in 0..d.co {
            let grow_all = &gout[co * osz..(co + 1) * osz];
            for ci in 0..d.ci {
                let gslab = &mut gx[ci * isz..(ci + 1) * isz];
                let wbase = (co * d.ci + ci) * ksz;
                for k0 in 0..d.k[0] {
                    for k1 in 0..d.k[1] {
                        for k2 in 0..d.k[2] {
                            let wv = w[wbase + (k0 * d.k[1] + k1) * d.k[2] + k2];
                            for o0 in 0..d.o[0] {
                                let i0 = clamp(o0, 0, k0);
                                for o1 in 0..d.o[1] {
                                    let i1 = clamp(o1, 1, k1);
                                    let grow = &grow_all[o0 * on1 + o1 * on2..][..d.o[2]];
                                    let xrow = &mut gslab[i0 * in1 + i1 * in2..][..d.s[2]];
                                    for (o2, &g) in grow.iter().enumerate() {
                                        xrow[clamp(o2, 2, k2)] += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        return gx;
    }
    // gcol = w^T (.) gout, then fold the columns back onto input positions
    let kdim = d.ci * ksz;
    if d.is_pointwise() {
        // the lowering is the identity: accumulate straight into gx
        for co in 0..d.co {
            let grow = &gout[co * osz..(co + 1) * osz];
            let wrow = &w[co * kdim..(co + 1) * kdim];
            for (kk, &wv) in wrow.iter().enumerate() {
                let xrow = &mut gx[kk * osz..(kk + 1) * osz];
                for (c, &g) in xrow.iter_mut().zip(grow) {
                    *c += wv * g;
                }
            }
        }
        return gx;
    }
    let table = conv_index_table(d);
    let mut gcol = vec![F::ZERO; kdim * osz];
    for co in 0..d.co {
        let grow = &gout[co * osz..(co + 1) * osz];
        let wrow = &w[co * kdim..(co + 1) * kdim];
        for (kk, &wv) in wrow.iter().enumerate() {
            let crow = &mut gcol[kk * osz..(kk + 1) * osz];
            for (c, &g) in crow.iter_mut().zip(grow) {
                *c += wv * g;
            }
        }
    }
    for ci in 0..d.ci {
        let gslab = &mut gx[ci * isz..(ci + 1) * isz];
        let src_base = ci * ksz * osz;
        for (&src, &g) in table.iter().zip(&gcol[src_base..src_base + ksz * osz]) {
            if src >= 0 {
                gslab[src as usize] += g;
            }
        }
    }
    gx
}

fn conv_backward_kernel<F: Scalar>(d: &ConvDims, x: &[F], gout: &[F]) -> Vec<F> {
    let osz = d.out_size();
    let isz = d.in_size();
    let ksz = d.k[0] * d.k[1] * d.k[2];
    let mut gw = vec![F::ZERO; d.co * d.ci * ksz];
    if d.replicate {
        let (in1, in2) = (d.s[1] * d.s[2], d.s[2]);
        let (on1, on2) = (d.o[1] * d.o[2], d.o[2]);
        let clamp = |o: usize, ax: usize, kk: usize| -> usize {
            let raw = (o * d.stride[ax] + kk) as isize - d.pad[ax] as isize;
            raw.clamp(0, d.s[ax] as isize - 1) as usize
        };
        for co in 0..d.co {
            let grow_all = &gout[co * osz..(co + 1) * osz];
            for ci in 0..d.ci {
                let xese = &x[ci * isz..(ci + 1) * isz];
                let wbase = (co * d.ci + ci) * ksz;
                for k0 in 0..d.k[0] {
                    for k1 in 0..d.k[1] {
                        for k2 in 0..d.k[2] {
                            let mut acc = F::ZERO;
                            for o0 in 0..d.o[0] {
                                let i0 = clamp(o0, 0, k0);
                                for o1 in 0..d.o[1] {
                                    let i1 = clamp(o1, 1, k1);
                                    let grow = &grow_all[o0 * on1 + o1 * on2..][..d.o[2]];
                                    let xrow = &xese[i0 * in1 + i1 * in2..][..d.s[2]];
                                    for (o2, &g) in grow.iter().enumerate() {
                                        acc += g * xrow[clamp(o2, 2, k2)];
                                    }
                                }
                            }
                            gw[wbase + (k0 * d.k[1] + k1) * d.k[2] + k2] = acc;
                        }
                    }
                }
            }
        }
        return gw;
    }
    // gw[co][kk] = <gout[co], col[kk]>
    let col_store;
    let col: &[F] = if d.is_pointwise() {
        x
    } else {
        let table = conv_index_table(d);
        col_store = im2col(d, x, &table);
        &col_store
    };
    let kdim = d.ci * ksz;
    for co in 0..d.co {
        let grow = &gout[co * osz..(co + 1) * osz];
        let wrow = &mut gw[co * kdim..(co + 1) * kdim];
        for (kk, slot) in wrow.iter_mut().enumerate() {
            *slot = dot(grow, &col[kk * osz..(kk + 1) * osz]);
        }
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::super::{Graph, TensorData};
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> TensorData<f64> {
        TensorData::from_f64s(shape, v)
    }

    #[test]
    fn add_basic() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(t64(&[2], &[1.0, 2.0]), false);
        let b = g.leaf(t64(&[2], &[3.0, 4.0]), false);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn sub_self_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(t64(&[3], &[1.5, -2.0, 7.0]), false);
        let c = g.sub(a, a).unwrap();
        assert_eq!(g.data(c), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mul_product_rule() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(t64(&[1], &[2.0]), true);
        let b = g.leaf(t64(&[1], &[3.0]), true);
        let c = g.mul(a, b).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn incompatible_shapes_error_names_both() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(TensorData::zeros(&[2, 3]), false);
        let b = g.leaf(TensorData::zeros(&[4]), false);
        match g.add(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn broadcast_gradient_conservation_exact() {
        // loss = sum(a + broadcast(b)): grad(b) must equal grad(a) summed
        // over the broadcast axes, exactly.
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = g.leaf(t64(&[1, 3], &[0.5, 0.5, 0.5]), true);
        let s = g.add(a, b).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 6]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_identity_and_inner() {
        let mut g: Graph<f64> = Graph::new();
        let i = g.leaf(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let m = g.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.leaf(t64(&[1, 2], &[1.0, 2.0]), false);
        let b = g.leaf(t64(&[2, 1], &[3.0, 4.0]), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_grad_against_ones() {
        // d sum(a x b) / d a with b = [[1],[1]] is [[1, 1]].
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(t64(&[1, 2], &[5.0, -2.0]), true);
        let b = g.leaf(t64(&[2, 1], &[1.0, 1.0]), false);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(TensorData::zeros(&[2, 3]), false);
        let b = g.leaf(TensorData::zeros(&[4, 2]), false);
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::InnerDimMismatch { .. })
        ));
    }

    #[test]
    fn conv1d_edge_detector() {
        // x=[1,2,3], k=[1,0,-1], zero pad 1, stride 1 -> [-2,-2,2]
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[1, 3], &[1.0, 2.0, 3.0]), false);
        let k = g.leaf(t64(&[1, 1, 3], &[1.0, 0.0, -1.0]), false);
        let y = g.conv(x, k, None, &[1], Padding::Zero(vec![1])).unwrap();
        assert_eq!(g.data(y), &[-2.0, -2.0, 2.0]);
    }

    #[test]
    fn conv_zero_kernel_no_bias_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            t64(&[2, 4, 4], &(0..32).map(|i| i as f64).collect::<Vec<_>>()),
            false,
        );
        let k = g.leaf(TensorData::zeros(&[3, 2, 3, 3]), false);
        let y = g
            .conv(x, k, None, &[1, 1], Padding::Zero(vec![1, 1]))
            .unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_free_conv_of_zero_input_is_zero_bit_exact() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(TensorData::<f32>::zeros(&[2, 5, 5]), false);
        let kd: Vec<f64> = (0..2 * 2 * 9).map(|i| (i as f64 - 17.0) * 0.13).collect();
        let k = g.leaf(TensorData::<f32>::from_f64s(&[2, 2, 3, 3], &kd), false);
        let y = g
            .conv(x, k, None, &[1, 1], Padding::Zero(vec![1, 1]))
            .unwrap();
        assert!(g.data(y).iter().all(|v| v.to_bits() == 0f32.to_bits()));
    }

    #[test]
    fn log_softmax_normalizes_random_inputs() {
        let mut rng = crate::rng::Rng::new(77);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..15).map(|_| rng.range(-30.0, 30.0)).collect();
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(t64(&[3, 5], &vals), false);
            let y = g.log_softmax(x, 1).unwrap();
            for row in g.data(y).chunks(5) {
                let total: f64 = row.iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-9, "sum = {total}");
            }
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || -> Vec<u64> {
            let mut rng = crate::rng::Rng::new(31);
            let xv: Vec<f64> = (0..24).map(|_| rng.range(-1.0, 1.0)).collect();
            let kv: Vec<f64> = (0..2 * 2 * 3).map(|_| rng.range(-1.0, 1.0)).collect();
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(t64(&[2, 12], &xv), true);
            let k = g.leaf(t64(&[2, 2, 3], &kv), true);
            let c = g.conv(x, k, None, &[1], Padding::Zero(vec![1])).unwrap();
            let a = g.tanh_act(c);
            let p = g.pool_window(a, 1, 2, 2, PoolKind::Max).unwrap();
            let sq = g.mul(p, p).unwrap();
            let loss = g.sum_all(sq);
            g.backward(loss).unwrap();
            g.grad(x)
                .unwrap()
                .iter()
                .chain(g.grad(k).unwrap())
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn conv2d_same_padding_preserves_shape() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(TensorData::zeros(&[1, 8, 8]), false);
        let k = g.leaf(TensorData::zeros(&[4, 1, 5, 5]), false);
        let y = g
            .conv(x, k, None, &[1, 1], Padding::Zero(vec![2, 2]))
            .unwrap();
        assert_eq!(g.shape(y), &[4, 8, 8]);
    }

    #[test]
    fn conv_channel_mismatch_and_kernel_too_large() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(TensorData::zeros(&[2, 4]), false);
        let k = g.leaf(TensorData::zeros(&[1, 3, 3]), false);
        assert!(matches!(
            g.conv(x, k, None, &[1], Padding::None),
            Err(TensorError::ChannelMismatch { .. })
        ));
        let k2 = g.leaf(TensorData::zeros(&[1, 2, 5]), false);
        assert!(matches!(
            g.conv(x, k2, None, &[1], Padding::None),
            Err(TensorError::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn conv_stride2_downsamples_last_axis() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            t64(&[1, 2, 8], &(0..16).map(|i| i as f64).collect::<Vec<_>>()),
            false,
        );
        let k = g.leaf(t64(&[1, 1, 1, 2], &[1.0, 1.0]), false);
        let y = g.conv(x, k, None, &[1, 2], Padding::None).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4]);
        assert_eq!(g.data(y)[0], 1.0); // 0 + 1
    }

    #[test]
    fn pool_examples() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[4], &[1.0, 3.0, 5.0, 7.0]), false);
        let m = g.pool_full(x, 0, PoolKind::Avg).unwrap();
        assert_eq!(g.data(m), &[4.0]);

        let y = g.leaf(t64(&[4], &[1.0, 5.0, 2.0, 4.0]), false);
        let p = g.pool_window(y, 0, 2, 2, PoolKind::Max).unwrap();
        assert_eq!(g.data(p), &[5.0, 4.0]);
    }

    #[test]
    fn avg_pool_gradient_distributes() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[4], &[1.0, 3.0, 5.0, 7.0]), true);
        let m = g.pool_full(x, 0, PoolKind::Avg).unwrap();
        let loss = g.sum_all(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn max_pool_grad_first_argmax_on_tie() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[3], &[2.0, 2.0, 1.0]), true);
        let m = g.pool_full(x, 0, PoolKind::Max).unwrap();
        let loss = g.sum_all(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn activation_examples() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[3], &[-1.0, 0.0, 2.0]), false);
        let r = g.relu(x);
        assert_eq!(g.data(r), &[0.0, 0.0, 2.0]);

        let z = g.leaf(t64(&[1], &[0.0]), true);
        let s = g.sigmoid(z);
        assert_eq!(g.data(s), &[0.5]);
        let t = g.tanh_act(z);
        assert_eq!(g.data(t), &[0.0]);
        let loss = g.sum_all(t);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[1.0]);
    }

    #[test]
    fn layer_norm_two_points() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[2], &[1.0, 3.0]), false);
        let gain = g.leaf(t64(&[2], &[1.0, 1.0]), false);
        let shift = g.leaf(t64(&[2], &[0.0, 0.0]), false);
        let y = g.layer_norm(x, 0, gain, shift, 0.0).unwrap();
        let d = g.data(y);
        assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_slice_gives_shift() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[3], &[5.0, 5.0, 5.0]), false);
        let gain = g.leaf(t64(&[3], &[2.0, 2.0, 2.0]), false);
        let shift = g.leaf(t64(&[3], &[0.7, 0.7, 0.7]), false);
        let y = g.layer_norm(x, 0, gain, shift, 1e-5).unwrap();
        for &v in g.data(y) {
            assert!((v - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn log_softmax_examples() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[2], &[0.0, 0.0]), false);
        let y = g.log_softmax(x, 0).unwrap();
        let ln2 = 2.0f64.ln();
        assert!((g.data(y)[0] + ln2).abs() < 1e-12);

        let big = g.leaf(t64(&[2], &[1000.0, 0.0]), false);
        let yb = g.log_softmax(big, 0).unwrap();
        let d = g.data(yb);
        assert!(d[0].abs() < 1e-9 && (d[1] + 1000.0).abs() < 1e-6);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn concat_slice_pad_examples() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(t64(&[2], &[1.0, 2.0]), false);
        let b = g.leaf(t64(&[1], &[3.0]), false);
        let c = g.concat(0, &[a, b]).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0]);

        let p = g.leaf(t64(&[2], &[5.0, 6.0]), false);
        let padded = g.pad_replicate(p, 0, 1, 1).unwrap();
        assert_eq!(g.data(padded), &[5.0, 5.0, 6.0, 6.0]);

        // complementary slices concatenated reproduce the input
        let x = g.leaf(t64(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]), false);
        let s1 = g.slice(x, 0, 0, 2).unwrap();
        let s2 = g.slice(x, 0, 2, 3).unwrap();
        let back = g.concat(0, &[s1, s2]).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn slice_out_of_range() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(TensorData::zeros(&[4]), false);
        assert!(matches!(
            g.slice(x, 0, 3, 2),
            Err(TensorError::SliceOutOfRange { .. })
        ));
    }

    #[test]
    fn empty_axis_ops_error_instead_of_panicking() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(TensorData::zeros(&[2, 0]), false);
        assert!(matches!(
            g.pad_replicate(x, 1, 1, 1),
            Err(TensorError::Invalid { .. })
        ));
        assert!(matches!(
            g.log_softmax(x, 1),
            Err(TensorError::Invalid { .. })
        ));
        assert!(matches!(
            g.pool_full(x, 1, PoolKind::Avg),
            Err(TensorError::Invalid { .. })
        ));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let t = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.data(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = g.permute(t, &[1, 0]).unwrap();
        assert_eq!(g.data(back), g.data(x));
        let loss = g.sum_all(back);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(TensorData::full(&[2, 2], 3.0), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_square_power_rule() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[1], &[3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[1], &[2.0]), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn select_rows_gather_scatter() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = g.select_rows(x, &[0, 0, 1, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2]);
        assert_eq!(g.data(y), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
    }
}
