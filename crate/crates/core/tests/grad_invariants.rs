//! Gradient invariants: conv / pool / layer-norm / log-softmax / LSTM-cell
//! backward rules agree with central finite differences (h = 1e-5, 64-bit)
//! across at least ten random seeds each.

use cslr_core::rng::Rng;
use cslr_core::tensor::{finite_diff_check, Padding, PoolKind, TensorData};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> TensorData<f64> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.range(lo, hi)).collect();
    TensorData::from_f64s(shape, &vals)
}

#[test]
fn conv_gradients_across_seeds() {
    for seed in 0..10u64 {
        let mut rng = Rng::new(1000 + seed);
        let x = rand(&[2, 5, 6], &mut rng, -1.0, 1.0);
        let k = rand(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
        let b = rand(&[3], &mut rng, -0.5, 0.5);
        let err = finite_diff_check(&[x, k, b], H, |g, v| {
            let y = g
                .conv(v[0], v[1], Some(v[2]), &[1, 2], Padding::Zero(vec![1, 1]))
                .unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum_all(sq)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn pool_gradients_across_seeds() {
    for seed in 0..10u64 {
        let mut rng = Rng::new(2000 + seed);
        let x = rand(&[2, 6, 3], &mut rng, -1.0, 1.0);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let err = finite_diff_check(&[x.clone()], H, |g, v| {
                let y = g.pool_full(v[0], 1, kind).unwrap();
                let w = g.pool_window(v[0], 1, 2, 2, kind).unwrap();
                let ys = g.mul(y, y).unwrap();
                let ws = g.mul(w, w).unwrap();
                let a = g.sum_all(ys);
                let b = g.sum_all(ws);
                g.add(a, b).unwrap()
            });
            assert!(err < TOL, "seed {seed} {kind:?}: {err}");
        }
    }
}

#[test]
fn layer_norm_gradients_across_seeds() {
    for seed in 0..10u64 {
        let mut rng = Rng::new(3000 + seed);
        let x = rand(&[3, 4], &mut rng, -2.0, 2.0);
        let gain = rand(&[3], &mut rng, 0.5, 1.5);
        let shift = rand(&[3], &mut rng, -0.5, 0.5);
        let err = finite_diff_check(&[x, gain, shift], H, |g, v| {
            let y = g.layer_norm(v[0], 0, v[1], v[2], 1e-5).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum_all(sq)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn log_softmax_gradients_across_seeds() {
    for seed in 0..10u64 {
        let mut rng = Rng::new(4000 + seed);
        let x = rand(&[4, 6], &mut rng, -3.0, 3.0);
        let err = finite_diff_check(&[x], H, |g, v| {
            let y = g.log_softmax(v[0], 1).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum_all(sq)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn lstm_cell_gradients_across_seeds() {
    // the cell built from primitives: gates = x W_i + h W_h + b, then the
    // usual sigmoid/tanh plumbing
    for seed in 0..10u64 {
        let mut rng = Rng::new(5000 + seed);
        let hidden = 3usize;
        let x = rand(&[1, 4], &mut rng, -1.0, 1.0);
        let h0 = rand(&[1, hidden], &mut rng, -0.5, 0.5);
        let c0 = rand(&[1, hidden], &mut rng, -0.5, 0.5);
        let wi = rand(&[4, 4 * hidden], &mut rng, -0.5, 0.5);
        let wh = rand(&[hidden, 4 * hidden], &mut rng, -0.5, 0.5);
        let b = rand(&[4 * hidden], &mut rng, -0.3, 0.3);
        let err = finite_diff_check(&[x, h0, c0, wi, wh, b], H, |g, v| {
            let gi = g.matmul(v[0], v[3]).unwrap();
            let gh = g.matmul(v[1], v[4]).unwrap();
            let lin = g.add(gi, gh).unwrap();
            let gates = g.add(lin, v[5]).unwrap();
            let i_raw = g.slice(gates, 1, 0, hidden).unwrap();
            let f_raw = g.slice(gates, 1, hidden, hidden).unwrap();
            let g_raw = g.slice(gates, 1, 2 * hidden, hidden).unwrap();
            let o_raw = g.slice(gates, 1, 3 * hidden, hidden).unwrap();
            let i_g = g.sigmoid(i_raw);
            let f_g = g.sigmoid(f_raw);
            let g_g = g.tanh_act(g_raw);
            let o_g = g.sigmoid(o_raw);
            let keep = g.mul(f_g, v[2]).unwrap();
            let write = g.mul(i_g, g_g).unwrap();
            let c = g.add(keep, write).unwrap();
            let c_act = g.tanh_act(c);
            let h = g.mul(o_g, c_act).unwrap();
            let hs = g.mul(h, h).unwrap();
            let cs = g.mul(c, c).unwrap();
            let a = g.sum_all(hs);
            let b2 = g.sum_all(cs);
            g.add(a, b2).unwrap()
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}
