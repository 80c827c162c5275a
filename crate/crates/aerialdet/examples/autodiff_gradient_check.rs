//! Reverse-mode differentiation on the rank-4 tensor graph, verified two
//! ways: once by probing a single weight with central differences by hand,
//! and once with the library's exhaustive gradient checker.
//!
//! Run with: cargo run --example autodiff_gradient_check

use aerialdet::numerics::{grad_check, ConvSpec, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aerialdet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // A small convolution / ReLU / max-pool pipeline ending in a scalar.
    let x0 = Tensor::randn([1, 3, 8, 8], 1.0, &mut rng);
    let w0 = Tensor::randn([4, 3, 3, 3], 0.5, &mut rng);
    let b0 = Tensor::zeros([1, 4, 1, 1]);

    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let w = g.leaf(w0.clone());
    let b = g.leaf(b0.clone());
    let y = g.conv2d(x, w, b, ConvSpec::same(3, 1))?;
    let y = g.relu(y);
    let y = g.max_pool2d(y, 2, 2)?;
    let loss = g.sum(y);
    println!("forward: loss = {:.6}", g.scalar_value(loss));

    // One reverse sweep gives the gradient with respect to every leaf.
    let grads = g.backward_scalar(loss)?;
    let analytic = grads.wrt(w).expect("weight gradient").data()[0];
    println!("analytic  dloss/dw[0] = {analytic:+.6}");

    // The same derivative, probed numerically: f(w + eps) - f(w - eps) / 2eps.
    let eps = 1e-6;
    let probe = |delta: f64| -> aerialdet::Result<f64> {
        let mut w_bumped = w0.clone();
        w_bumped.data_mut()[0] += delta;
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let w = g.leaf(w_bumped);
        let b = g.leaf(b0.clone());
        let y = g.conv2d(x, w, b, ConvSpec::same(3, 1))?;
        let y = g.relu(y);
        let y = g.max_pool2d(y, 2, 2)?;
        let loss = g.sum(y);
        Ok(g.scalar_value(loss))
    };
    let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
    println!("numeric   dloss/dw[0] = {numeric:+.6}");

    // The checker repeats that probe for every element of every input.
    let report = grad_check(
        |g, vars| {
            let y = g.conv2d(vars[0], vars[1], vars[2], ConvSpec::same(3, 1))?;
            let y = g.relu(y);
            let y = g.max_pool2d(y, 2, 2)?;
            Ok(g.sum(y))
        },
        &[x0, w0, b0],
        eps,
    )?;
    println!(
        "grad_check: {} elements checked, max relative error {:.3e}",
        report.elements_checked, report.max_rel_err
    );
    assert!(report.passes(1e-4), "gradient mismatch: {report:?}");
    println!("every analytic gradient matches its central difference");
    Ok(())
}
