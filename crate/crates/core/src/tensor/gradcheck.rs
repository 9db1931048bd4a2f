//! Finite-difference gradient checking.
//!
//! Runs a scalar-valued tensor function twice per input coordinate (central
//! differences) and compares against the analytic gradient from backward.
//! Always use `f64` here; the step size is far below `f32` resolution.

use super::{Graph, Scalar, TensorData, Var};

/// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
///
/// `build` must construct the computation from the given leaf variables
/// (bound in the order of `inputs`) and return the scalar loss.
pub fn finite_diff_check<F: Scalar>(
    inputs: &[TensorData<F>],
    h: f64,
    mut build: impl FnMut(&mut Graph<F>, &[Var]) -> Var,
) -> f64 {
    // analytic gradients
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(
        g.value(loss).numel(),
        1,
        "gradient check target must be scalar"
    );
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|gr| gr.iter().map(|x| x.to_f64()).collect())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let eval =
        |inputs: &[TensorData<F>], build: &mut dyn FnMut(&mut Graph<F>, &[Var]) -> Var| -> f64 {
            let mut g = Graph::inference();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let loss = build(&mut g, &vars);
            g.data(loss)[0].to_f64()
        };

    let mut worst = 0.0f64;
    let mut probe: Vec<TensorData<F>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci].to_f64();
            probe[ti].data_mut()[ci] = F::from_f64(orig + h);
            let up = eval(&probe, &mut build);
            probe[ti].data_mut()[ci] = F::from_f64(orig - h);
            let down = eval(&probe, &mut build);
            probe[ti].data_mut()[ci] = F::from_f64(orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][ci];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
