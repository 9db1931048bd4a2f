//! The 64-bit finite-difference suite: every primitive op and every model
//! block at micro shapes, plus the full micro model end to end.

use std::time::Instant;

use crate::loss::{ctc_loss, kl_distill, GlossSequence, LossConfig};
use crate::model::{
    cross_stage_couple, decouple, lstm_cell, stage_couple, DecoupleOp, DecoupledVars, Model,
    ModelConfig,
};
use crate::rng::Rng;
use crate::tensor::{finite_diff_check, Padding, PoolKind, Session, TensorData, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> TensorData<f64> {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.range(lo, hi)).collect();
    TensorData::from_f64s(shape, &vals)
}

type ModelBuild = dyn Fn(&Model<f64>, &mut Session<'_, f64>, &[Var]) -> Var;

/// Check a scalar function of (bound model parameters, extra leaf inputs)
/// against central differences over both.
fn check_model_path(model: &mut Model<f64>, inputs: &[TensorData<f64>], build: &ModelBuild) -> f64 {
    let (param_grads, input_grads) = {
        let m: &Model<f64> = model;
        let mut s = Session::train(m.params());
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| s.graph.leaf(t.clone(), true))
            .collect();
        let loss = build(m, &mut s, &vars);
        assert_eq!(s.graph.value(loss).numel(), 1);
        s.graph.backward(loss).unwrap();
        let pg = s.take_param_grads();
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| s.graph.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        (pg, ig)
    };

    let eval = |model: &Model<f64>, probe: &[TensorData<f64>]| -> f64 {
        let mut s = Session::inference(model.params());
        let vars: Vec<Var> = probe
            .iter()
            .map(|t| s.graph.leaf(t.clone(), false))
            .collect();
        let loss = build(model, &mut s, &vars);
        s.graph.data(loss)[0]
    };

    let mut worst = 0.0f64;
    let mut compare = |analytic: f64, numeric: f64| {
        let denom = 1.0f64.max(analytic.abs()).max(numeric.abs());
        worst = worst.max((analytic - numeric).abs() / denom);
    };

    let mut probe = inputs.to_vec();
    for (ti, grads) in input_grads.iter().enumerate() {
        for ci in 0..grads.len() {
            let orig = probe[ti].data()[ci];
            probe[ti].data_mut()[ci] = orig + STEP;
            let up = eval(model, &probe);
            probe[ti].data_mut()[ci] = orig - STEP;
            let down = eval(model, &probe);
            probe[ti].data_mut()[ci] = orig;
            compare(grads[ci], (up - down) / (2.0 * STEP));
        }
    }
    for (pid, grads) in &param_grads {
        for ci in 0..grads.len() {
            let orig = model.params().value(*pid).data()[ci];
            model.params_mut().value_mut(*pid).data_mut()[ci] = orig + STEP;
            let up = eval(model, &probe);
            model.params_mut().value_mut(*pid).data_mut()[ci] = orig - STEP;
            let down = eval(model, &probe);
            model.params_mut().value_mut(*pid).data_mut()[ci] = orig;
            compare(grads[ci], (up - down) / (2.0 * STEP));
        }
    }
    worst
}

fn micro_model(seed: u64, cascaded: bool) -> Model<f64> {
    let mut cfg = ModelConfig::micro();
    cfg.omp_cascaded = cascaded;
    Model::new(cfg, seed).unwrap()
}

fn sum_pair(s: &mut Session<'_, f64>, pair: DecoupledVars) -> Var {
    let hsq = s.graph.mul(pair.h, pair.h).unwrap();
    let hs = s.graph.sum_all(hsq);
    let vsq = s.graph.mul(pair.v, pair.v).unwrap();
    let vs = s.graph.sum_all(vsq);
    s.graph.add(hs, vs).unwrap()
}

type CheckFn = Box<dyn Fn() -> f64>;

/// The full catalogue; names are what `--module` matches against.
pub fn catalogue() -> Vec<(&'static str, CheckFn)> {
    vec![
        (
            "elementwise",
            Box::new(|| {
                let a = rand_tensor(&[3, 4], 1, -1.0, 1.0);
                let b = rand_tensor(&[1, 4], 2, -1.0, 1.0);
                finite_diff_check(&[a, b], STEP, |g, v| {
                    let s = g.add(v[0], v[1]).unwrap();
                    let m = g.mul(s, v[0]).unwrap();
                    let d = g.sub(m, v[1]).unwrap();
                    let sq = g.mul(d, d).unwrap();
                    g.sum_all(sq)
                })
            }) as CheckFn,
        ),
        (
            "matmul",
            Box::new(|| {
                let a = rand_tensor(&[3, 4], 3, -1.0, 1.0);
                let b = rand_tensor(&[4, 2], 4, -1.0, 1.0);
                finite_diff_check(&[a, b], STEP, |g, v| {
                    let p = g.matmul(v[0], v[1]).unwrap();
                    let sq = g.mul(p, p).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "conv1d",
            Box::new(|| {
                let x = rand_tensor(&[2, 9], 5, -1.0, 1.0);
                let k = rand_tensor(&[3, 2, 5], 6, -0.5, 0.5);
                let b = rand_tensor(&[3], 7, -0.5, 0.5);
                finite_diff_check(&[x, k, b], STEP, |g, v| {
                    let y = g
                        .conv(v[0], v[1], Some(v[2]), &[1], Padding::Zero(vec![2]))
                        .unwrap();
                    let sq = g.mul(y, y).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "conv2d",
            Box::new(|| {
                let x = rand_tensor(&[2, 6, 6], 8, -1.0, 1.0);
                let k = rand_tensor(&[3, 2, 3, 3], 9, -0.5, 0.5);
                finite_diff_check(&[x, k], STEP, |g, v| {
                    let y = g
                        .conv(v[0], v[1], None, &[2, 2], Padding::Zero(vec![1, 1]))
                        .unwrap();
                    let sq = g.mul(y, y).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "conv3d",
            Box::new(|| {
                let x = rand_tensor(&[2, 3, 4, 4], 10, -1.0, 1.0);
                let k = rand_tensor(&[2, 2, 1, 3, 3], 11, -0.5, 0.5);
                finite_diff_check(&[x, k], STEP, |g, v| {
                    let y = g
                        .conv(v[0], v[1], None, &[1, 1, 1], Padding::Zero(vec![0, 1, 1]))
                        .unwrap();
                    let sq = g.mul(y, y).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "conv_replicate",
            Box::new(|| {
                let x = rand_tensor(&[1, 7], 12, -1.0, 1.0);
                let k = rand_tensor(&[2, 1, 3], 13, -0.5, 0.5);
                finite_diff_check(&[x, k], STEP, |g, v| {
                    let y = g
                        .conv(v[0], v[1], None, &[1], Padding::Replicate(vec![1]))
                        .unwrap();
                    let sq = g.mul(y, y).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "pool",
            Box::new(|| {
                let x = rand_tensor(&[3, 8, 2], 14, -1.0, 1.0);
                let e1 = finite_diff_check(std::slice::from_ref(&x), STEP, |g, v| {
                    let y = g.pool_full(v[0], 1, PoolKind::Avg).unwrap();
                    let sq = g.mul(y, y).unwrap();
                    g.sum_all(sq)
                });
                let e2 = finite_diff_check(std::slice::from_ref(&x), STEP, |g, v| {
                    let y = g.pool_full(v[0], 1, PoolKind::Max).unwrap();
                    let sq = g.mul(y, y).unwrap();
                    g.sum_all(sq)
                });
                let e3 = finite_diff_check(&[x], STEP, |g, v| {
                    let y = g.pool_window(v[0], 1, 2, 2, PoolKind::Max).unwrap();
                    let sq = g.mul(y, y).unwrap();
                    g.sum_all(sq)
                });
                e1.max(e2).max(e3)
            }),
        ),
        (
            "layer_norm",
            Box::new(|| {
                let x = rand_tensor(&[3, 4], 15, -1.0, 1.0);
                let gain = rand_tensor(&[3], 16, 0.5, 1.5);
                let shift = rand_tensor(&[3], 17, -0.5, 0.5);
                finite_diff_check(&[x, gain, shift], STEP, |g, v| {
                    let y = g.layer_norm(v[0], 0, v[1], v[2], 1e-5).unwrap();
                    let sq = g.mul(y, y).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "log_softmax",
            Box::new(|| {
                let x = rand_tensor(&[4, 5], 18, -2.0, 2.0);
                finite_diff_check(&[x], STEP, |g, v| {
                    let y = g.log_softmax(v[0], 1).unwrap();
                    let sq = g.mul(y, y).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "concat_slice_pad",
            Box::new(|| {
                let x = rand_tensor(&[2, 5], 19, -1.0, 1.0);
                finite_diff_check(&[x], STEP, |g, v| {
                    let padded = g.pad_replicate(v[0], 1, 2, 2).unwrap();
                    let a = g.slice(padded, 1, 0, 4).unwrap();
                    let b = g.slice(padded, 1, 4, 5).unwrap();
                    let c = g.concat(1, &[a, b]).unwrap();
                    let sq = g.mul(c, c).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "lstm_cell",
            Box::new(|| {
                let mut model = micro_model(20, true);
                let x = rand_tensor(&[1, 4], 21, -1.0, 1.0);
                let h0 = rand_tensor(&[1, 2], 22, -0.5, 0.5);
                let c0 = rand_tensor(&[1, 2], 23, -0.5, 0.5);
                check_model_path(&mut model, &[x, h0, c0], &|m, s, v| {
                    let l = &m.head_params().lstm_fwd;
                    let wi = s.param(l.w_input);
                    let wh = s.param(l.w_hidden);
                    let b = s.param(l.bias);
                    let (h, c) = lstm_cell(s, v[0], v[1], v[2], wi, wh, b, l.hidden).unwrap();
                    let hsq = s.graph.mul(h, h).unwrap();
                    let csq = s.graph.mul(c, c).unwrap();
                    let hs = s.graph.sum_all(hsq);
                    let cs = s.graph.sum_all(csq);
                    s.graph.add(hs, cs).unwrap()
                })
            }),
        ),
        (
            "lma",
            Box::new(|| {
                let mut model = micro_model(24, true);
                let x = rand_tensor(&[2, 6, 4, 4], 25, -1.0, 1.0);
                check_model_path(&mut model, &[x], &|m, s, v| {
                    let y = m
                        .lma_at(2)
                        .expect("stage 2 aggregates")
                        .forward(s, v[0])
                        .unwrap();
                    let sq = s.graph.mul(y, y).unwrap();
                    s.graph.sum_all(sq)
                })
            }),
        ),
        (
            "decouple",
            Box::new(|| {
                let x = rand_tensor(&[2, 3, 4, 5], 26, -1.0, 1.0);
                let e_avg = finite_diff_check(std::slice::from_ref(&x), STEP, |g, v| {
                    let pair = decouple(g, v[0], DecoupleOp::Avg).unwrap();
                    let hsq = g.mul(pair.h, pair.h).unwrap();
                    let hsum = g.sum_all(hsq);
                    let vsq = g.mul(pair.v, pair.v).unwrap();
                    let vsum = g.sum_all(vsq);
                    g.add(hsum, vsum).unwrap()
                });
                let e_max = finite_diff_check(&[x], STEP, |g, v| {
                    let pair = decouple(g, v[0], DecoupleOp::AvgMax).unwrap();
                    let hsq = g.mul(pair.h, pair.h).unwrap();
                    let hsum = g.sum_all(hsq);
                    let vsq = g.mul(pair.v, pair.v).unwrap();
                    let vsum = g.sum_all(vsq);
                    g.add(hsum, vsum).unwrap()
                });
                e_avg.max(e_max)
            }),
        ),
        (
            "mp_block",
            Box::new(|| {
                let mut model = micro_model(27, true);
                let x = rand_tensor(&[2, 3, 4], 28, -1.0, 1.0);
                check_model_path(&mut model, &[x], &|m, s, v| {
                    let omp = m.omp_at(2).expect("stage 2 purifies");
                    let y = omp.h.mp_block(s, v[0]).unwrap();
                    let sq = s.graph.mul(y, y).unwrap();
                    s.graph.sum_all(sq)
                })
            }),
        ),
        (
            "ffn",
            Box::new(|| {
                let mut model = micro_model(29, true);
                let x = rand_tensor(&[2, 3, 4], 30, -1.0, 1.0);
                check_model_path(&mut model, &[x], &|m, s, v| {
                    let omp = m.omp_at(2).expect("stage 2 purifies");
                    let y = omp.v.ffn(s, v[0]).unwrap();
                    let sq = s.graph.mul(y, y).unwrap();
                    s.graph.sum_all(sq)
                })
            }),
        ),
        (
            "omp",
            Box::new(|| {
                let mut model = micro_model(31, false);
                let h = rand_tensor(&[2, 4, 4], 32, -1.0, 1.0);
                let v = rand_tensor(&[2, 4, 4], 33, -1.0, 1.0);
                let plain = check_model_path(&mut model, &[h.clone(), v.clone()], &|m, s, vars| {
                    let omp = m.omp_at(2).unwrap();
                    let out = omp
                        .forward(
                            s,
                            DecoupledVars {
                                h: vars[0],
                                v: vars[1],
                            },
                            None,
                        )
                        .unwrap();
                    sum_pair(s, out)
                });
                let mut model = micro_model(34, true);
                let ph = rand_tensor(&[2, 4, 8], 35, -1.0, 1.0);
                let pv = rand_tensor(&[2, 4, 8], 36, -1.0, 1.0);
                let cascaded = check_model_path(&mut model, &[h, v, ph, pv], &|m, s, vars| {
                    let omp = m.omp_at(3).unwrap();
                    let out = omp
                        .forward(
                            s,
                            DecoupledVars {
                                h: vars[0],
                                v: vars[1],
                            },
                            Some(DecoupledVars {
                                h: vars[2],
                                v: vars[3],
                            }),
                        )
                        .unwrap();
                    sum_pair(s, out)
                });
                plain.max(cascaded)
            }),
        ),
        (
            "stage_couple",
            Box::new(|| {
                let x = rand_tensor(&[2, 3, 4, 5], 37, -1.0, 1.0);
                let h = rand_tensor(&[2, 3, 5], 38, -1.0, 1.0);
                let v = rand_tensor(&[2, 3, 4], 39, -1.0, 1.0);
                let gh = rand_tensor(&[1], 40, -0.5, 0.5);
                let gv = rand_tensor(&[1], 41, -0.5, 0.5);
                finite_diff_check(&[x, h, v, gh, gv], STEP, |g, vars| {
                    let out = stage_couple(
                        g,
                        vars[0],
                        DecoupledVars {
                            h: vars[1],
                            v: vars[2],
                        },
                        vars[3],
                        vars[4],
                    )
                    .unwrap();
                    let sq = g.mul(out, out).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "cross_stage_couple",
            Box::new(|| {
                let h1 = rand_tensor(&[2, 3, 4], 42, -1.0, 1.0);
                let v1 = rand_tensor(&[2, 3, 6], 43, -1.0, 1.0);
                let p1 = rand_tensor(&[3, 2], 44, -0.5, 0.5);
                let h2 = rand_tensor(&[4, 3, 2], 45, -1.0, 1.0);
                let v2 = rand_tensor(&[4, 3, 3], 46, -1.0, 1.0);
                let p2 = rand_tensor(&[3, 4], 47, -0.5, 0.5);
                finite_diff_check(&[h1, v1, p1, h2, v2, p2], STEP, |g, v| {
                    let out = cross_stage_couple(
                        g,
                        &[
                            DecoupledVars { h: v[0], v: v[1] },
                            DecoupledVars { h: v[3], v: v[4] },
                        ],
                        &[v[2], v[5]],
                    )
                    .unwrap();
                    let sq = g.mul(out, out).unwrap();
                    g.sum_all(sq)
                })
            }),
        ),
        (
            "ctc",
            Box::new(|| {
                let logits = rand_tensor(&[6, 4], 48, -1.0, 1.0);
                let target = GlossSequence::new(vec![1, 3, 1]).unwrap();
                finite_diff_check(&[logits], 1e-6, |g, v| {
                    let lp = g.log_softmax(v[0], 1).unwrap();
                    ctc_loss(g, lp, &target).unwrap()
                })
            }),
        ),
        (
            "kl",
            Box::new(|| {
                // the teacher is under stop-gradient, so the checked function
                // holds it fixed and differentiates the student side only
                let teacher = rand_tensor(&[3, 4], 49, -1.0, 1.0);
                let student = rand_tensor(&[3, 4], 50, -1.0, 1.0);
                finite_diff_check(&[student], STEP, |g, v| {
                    let t = g.constant(teacher.clone());
                    kl_distill(g, t, v[0], 1.5).unwrap()
                })
            }),
        ),
        (
            "full_model",
            Box::new(|| {
                let mut model = micro_model(51, true);
                let video = rand_tensor(&[2, 8, 16, 16], 52, 0.0, 1.0);
                let target = GlossSequence::new(vec![1, 2]).unwrap();
                let cfg = LossConfig {
                    gamma1: 1.0,
                    gamma2: 2.0,
                    tau: 1.0,
                };
                // stop-gradient again: the distillation teacher is frozen at its
                // unperturbed value so central differences probe exactly the
                // function the backward pass differentiates
                let teacher0 = {
                    let mut s = Session::inference(model.params());
                    let out = model.forward(&mut s, &video).unwrap();
                    s.graph.value(out.logits_global).clone()
                };
                check_model_path(&mut model, &[], &move |m, s, _| {
                    let out = m.forward(s, &video).unwrap();
                    let lp1 = s.graph.log_softmax(out.logits_local1, 1).unwrap();
                    let lp2 = s.graph.log_softmax(out.logits_local2, 1).unwrap();
                    let lpg = s.graph.log_softmax(out.logits_global, 1).unwrap();
                    let c1 = ctc_loss(&mut s.graph, lp1, &target).unwrap();
                    let c2 = ctc_loss(&mut s.graph, lp2, &target).unwrap();
                    let cg = ctc_loss(&mut s.graph, lpg, &target).unwrap();
                    let c12 = s.graph.add(c1, c2).unwrap();
                    let ctc_sum = s.graph.add(c12, cg).unwrap();

                    let frozen = s.graph.constant(teacher0.clone());
                    let frames1 = s.graph.shape(out.logits_local1)[0];
                    let t1 = crate::loss::align_lengths(&mut s.graph, frozen, frames1).unwrap();
                    let kl1 = kl_distill(&mut s.graph, t1, out.logits_local1, cfg.tau).unwrap();
                    let kl2 = kl_distill(&mut s.graph, frozen, out.logits_local2, cfg.tau).unwrap();
                    let kl_sum = s.graph.add(kl1, kl2).unwrap();

                    let wc = s.graph.scale(ctc_sum, cfg.gamma1);
                    let wk = s.graph.scale(kl_sum, cfg.gamma2);
                    s.graph.add(wc, wk).unwrap()
                })
            }),
        ),
    ]
}

/// Run the suite, optionally restricted to checks whose name contains
/// `filter`. Results come back in catalogue order.
pub fn run_suite(filter: Option<&str>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (name, f) in catalogue() {
        if let Some(m) = filter {
            if !name.contains(m) {
                continue;
            }
        }
        let start = Instant::now();
        let err = f();
        out.push(CheckResult {
            name,
            max_rel_err: err,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_checks_pass() {
        for r in run_suite(Some("conv")) {
            assert!(r.passed(), "{} err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn filter_restricts_targets() {
        let all = run_suite(None).len();
        let one = run_suite(Some("lma")).len();
        assert!(one < all && one >= 1);
    }
}
