use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central finite-difference check of d(sum(f(x) * probe))/dx for every input entry.
fn check<F>(input: Tensor, f: F, tol: f64)
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let g = Graph::new();
        let x = g.constant(input.clone());
        f(&g, x).shape()
    };
    let probe = Tensor::randn(probe_shape, 1.0, &mut rng);
    let eval = |x: &Tensor| -> f64 {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let y = f(&g, xv).value();
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let x = g.param(input.clone());
    let y = f(&g, x);
    let p = g.constant(probe.clone());
    let loss = y.mul(p).sum();
    let grads = g.backward(loss);
    let analytic = grads.wrt(x);
    let h = 1e-5;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (1.0f64).max(a.abs()).max(numeric.abs());
        assert!(err < tol, "entry {i}: analytic {a} numeric {numeric}");
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

#[test]
fn unary_gradients() {
    for f in [
        Unary::Sigmoid,
        Unary::Silu,
        Unary::Softplus,
        Unary::SmoothAbs(0.1),
        Unary::Exp,
        Unary::Square,
        Unary::Affine(2.5, -1.0),
        Unary::LeakyRelu(0.2),
    ] {
        check(rand_tensor(&[2, 3], 1), move |_, x| x.unary(f), 1e-6);
    }
    check(rand_tensor(&[6], 2).map(|v| v.abs() + 0.5), |_, x| x.ln(), 1e-6);
}

#[test]
fn binary_gradients() {
    let other = rand_tensor(&[2, 2, 3, 3], 3);
    let o = other.map(|v| v.abs() + 0.5);
    check(
        rand_tensor(&[2, 2, 3, 3], 4),
        move |g, x| {
            let c = g.constant(o.clone());
            let q = x.mul(c).add(x).sub(c);
            q.div(c.add(x.square()))
        },
        1e-6,
    );
}

#[test]
fn conv_and_structure_gradients() {
    let w = rand_tensor(&[3, 2, 3, 3], 5);
    let b = rand_tensor(&[3], 6);
    check(
        rand_tensor(&[2, 2, 6, 6], 7),
        move |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = x.conv2d(wv, 2, 1).add_bias(bv).silu().upsample2x();
            let s = y.slice_channels(1, 2);
            Var::concat(&[y, s])
        },
        1e-6,
    );
}

#[test]
fn weight_gradient_of_conv() {
    let x = rand_tensor(&[2, 2, 5, 5], 8);
    check(
        rand_tensor(&[3, 2, 3, 3], 9),
        move |g, w| g.constant(x.clone()).conv2d(w, 1, 1).square(),
        1e-6,
    );
}

#[test]
fn batch_norm_gradients() {
    let gamma = rand_tensor(&[3], 10);
    let beta = rand_tensor(&[3], 11);
    check(
        rand_tensor(&[2, 3, 3, 3], 12),
        move |g, x| {
            let (y, _) = x.batch_norm_op(
                g.constant(gamma.clone()),
                g.constant(beta.clone()),
                BatchNormStats::Batch,
                1e-5,
            );
            y
        },
        1e-5,
    );
    let gamma = rand_tensor(&[3], 13);
    check(
        rand_tensor(&[2, 3, 2, 2], 14),
        move |g, x| {
            let (y, _) = x.batch_norm_op(
                g.constant(gamma.clone()),
                g.constant(Tensor::zeros(vec![3])),
                BatchNormStats::Running {
                    mean: &[0.1, 0.2, 0.3],
                    var: &[1.0, 2.0, 0.5],
                },
                1e-5,
            );
            y
        },
        1e-6,
    );
}

#[test]
fn pooling_linear_and_reductions() {
    let w = rand_tensor(&[4, 3], 15);
    let b = rand_tensor(&[4], 16);
    check(
        rand_tensor(&[2, 3, 4, 4], 17),
        move |g, x| {
            x.global_avg_pool()
                .linear(g.constant(w.clone()), g.constant(b.clone()))
                .sigmoid()
        },
        1e-6,
    );
    check(rand_tensor(&[3, 1, 4, 5], 18), |_, x| x.sum_per_sample().square(), 1e-6);
}

#[test]
fn blur_diff_gram_gate() {
    check(rand_tensor(&[1, 2, 7, 6], 19), |_, x| x.gaussian_blur(1.3), 1e-6);
    check(rand_tensor(&[2, 1, 5, 4], 20), |_, x| x.diff_w().square(), 1e-6);
    check(rand_tensor(&[2, 1, 5, 4], 26), |_, x| x.diff_h().reshape(vec![2, 1, 16, 1]), 1e-6);
    check(rand_tensor(&[2, 3, 3, 2], 21), |_, x| x.gram(), 1e-6);
    let gate = rand_tensor(&[2, 1, 3, 3], 22);
    check(
        rand_tensor(&[2, 4, 3, 3], 23),
        move |g, x| x.mul_channel(g.constant(gate.clone())),
        1e-6,
    );
    let feats = rand_tensor(&[2, 4, 3, 3], 24);
    check(
        rand_tensor(&[2, 1, 3, 3], 25),
        move |g, gate| g.constant(feats.clone()).mul_channel(gate.sigmoid()),
        1e-6,
    );
}

#[test]
fn shared_subexpressions_accumulate() {
    let g = Graph::new();
    let x = g.param(Tensor::new(vec![1], vec![3.0]));
    let y = x.mul(x).add(x); // x² + x
    let gr = g.backward(y.sum());
    assert!((gr.wrt(x).item() - 7.0).abs() < 1e-12);
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let c = g.constant(Tensor::ones(vec![2]));
    let x = g.param(Tensor::ones(vec![2]));
    let gr = g.backward(c.mul(x).sum());
    assert!(gr.get(c).is_none());
    assert!(gr.get(x).is_some());
}
