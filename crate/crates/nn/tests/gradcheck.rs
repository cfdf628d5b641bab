//! Central finite differences against the analytic backward pass of every op.

use htc_nn::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, InstanceNorm};
use htc_nn::{concat_channels, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Checks d(loss)/d(input_i) for every element of every input.
fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss);
    let eval = |ins: &[Tensor<f64>]| {
        let g = Graph::new();
        let vars: Vec<_> = ins.iter().map(|t| g.variable(t.clone())).collect();
        build(&g, &vars).item()
    };
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            assert!(
                err < 1e-4 || (a - numeric).abs() < 1e-7,
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Random projection so every output element contributes to the loss.
fn project<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&y.shape(), &mut rng, -1.0, 1.0);
    y.mul(g.constant(w)).sum()
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 1, 3, 3], &mut rng, 0.1, 0.9);
    let b = random(&[2, 1, 3, 3], &mut rng, -0.9, 0.9);
    check(vec![a.clone(), b.clone()], |g, v| {
        let y = v[0].add(v[1]).mul(v[0]).sub(v[1].scale(0.3)).add_scalar(0.2);
        project(g, y, 2)
    });
    check(vec![a.clone(), b.clone()], |g, v| {
        let y = v[0].ln_clamped(1e-7).add(v[1].tanh()).add(v[1].sigmoid());
        project(g, y, 3)
    });
    check(vec![b.clone()], |g, v| {
        let y = v[0].relu().add(v[0].leaky_relu(0.2)).add(v[0].abs()).add(v[0].clamp(-0.5, 0.5));
        project(g, y, 4)
    });
    check(vec![a.clone()], |_, v| v[0].one_minus().mean());
}

#[test]
fn lerp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random(&[1, 1, 4, 4], &mut rng, 0.0, 1.0);
    let w = random(&[1, 1, 4, 4], &mut rng, 0.05, 0.95);
    let t = random(&[1, 1, 4, 4], &mut rng, 0.0, 1.0);
    check(vec![s, w, t], |g, v| project(g, v[0].lerp(v[1], v[2]), 6));
}

#[test]
fn conv2d_strided_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0), (7, 1, 3)] {
        let x = random(&[2, 2, 7, 6], &mut rng, -1.0, 1.0);
        let w = random(&[3, 2, k, k], &mut rng, -0.5, 0.5);
        let b = random(&[3], &mut rng, -0.5, 0.5);
        check(vec![x, w, b], |g, v| project(g, v[0].conv2d(v[1], Some(v[2]), stride, pad), 8));
    }
}

#[test]
fn conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &(k, stride, pad, op) in &[(3, 2, 1, 1), (3, 1, 1, 0), (2, 2, 0, 0)] {
        let x = random(&[2, 2, 3, 4], &mut rng, -1.0, 1.0);
        let w = random(&[2, 3, k, k], &mut rng, -0.5, 0.5);
        let b = random(&[3], &mut rng, -0.5, 0.5);
        check(vec![x, w, b], |g, v| {
            project(g, v[0].conv_transpose2d(v[1], Some(v[2]), stride, pad, op), 10)
        });
    }
}

#[test]
fn conv_transpose_output_size() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 16, 16]));
    let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    assert_eq!(x.conv_transpose2d(w, None, 2, 1, 1).shape(), vec![1, 2, 32, 32]);
}

#[test]
fn normalisation_and_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
    let s = random(&[3], &mut rng, 0.5, 1.5);
    let t = random(&[3], &mut rng, -0.5, 0.5);
    check(vec![x.clone(), s.clone(), t.clone()], |g, v| {
        project(g, v[0].instance_norm(1e-5).channel_affine(v[1], v[2]), 12)
    });
    check(vec![x, s, t], |g, v| project(g, v[0].batch_norm(1e-5).channel_affine(v[1], v[2]), 13));
}

#[test]
fn pooling_slicing_softmax_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
    let y = random(&[2, 2, 4, 4], &mut rng, -1.0, 1.0);
    check(vec![x.clone()], |g, v| project(g, v[0].max_pool2(), 15));
    check(vec![x.clone(), y], |g, v| project(g, concat_channels(&[v[0], v[1]]), 16));
    check(vec![x.clone()], |g, v| project(g, v[0].slice_channels(1, 2), 17));
    check(vec![x], |g, v| project(g, v[0].softmax_channels().slice_channels(0, 1), 18));
}

#[test]
fn softmax_normalises_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let g = Graph::<f64>::new();
    let x = g.constant(random(&[1, 2, 3, 3], &mut rng, -5.0, 5.0));
    let y = x.softmax_channels().value();
    for p in 0..9 {
        assert!((y.data()[p] + y.data()[9 + p] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layers_bind_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut ps = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut ps, "c", 1, 2, 3, 1, 1, true, 1.0, &mut rng);
    let up = ConvTranspose2d::new(&mut ps, "u", 2, 1, 3, 2, 1, 1, true, &mut rng);
    let norm = InstanceNorm::new(&mut ps, "n", 2);
    let bn = BatchNorm2d::new(&mut ps, "b", 1);
    let x = random(&[2, 1, 4, 4], &mut rng, 0.0, 1.0);

    let loss_of = |ps: &ParamStore<f64>| {
        let g = Graph::new();
        let h = conv.forward(&g, ps, g.constant(x.clone()));
        let h = norm.forward(&g, ps, h).relu();
        let (h, _) = bn.forward(&g, ps, up.forward(&g, ps, h), true);
        h.tanh().mean().item()
    };
    let g = Graph::new();
    let h = conv.forward(&g, &ps, g.constant(x.clone()));
    let h = norm.forward(&g, &ps, h).relu();
    let (h, _) = bn.forward(&g, &ps, up.forward(&g, &ps, h), true);
    let loss = h.tanh().mean();
    let grads = g.backward(loss);
    assert!(grads.param(&ps, bn.running_mean).is_none(), "running stats are frozen");
    for idx in [conv.weight, up.weight, norm.gamma, bn.beta] {
        let analytic = grads.param(&ps, idx).unwrap().clone();
        for i in 0..analytic.len() {
            let mut plus = ps.clone();
            plus.get_mut(idx).data_mut()[i] += 1e-6;
            let mut minus = ps.clone();
            minus.get_mut(idx).data_mut()[i] -= 1e-6;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / 2e-6;
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-4 * (a.abs() + numeric.abs()) + 1e-8,
                "{} [{i}]: {a} vs {numeric}",
                ps.name(idx)
            );
        }
    }
}
