//! Central-difference checks of every tape operation in double precision.

use std::sync::Arc;

use heteroseg_autograd::{Tape64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    let n = shape.iter().product();
    Tensor64::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(weights * f(inputs))` and compares analytic gradients of each
/// input against central differences.
fn check(inputs: Vec<Tensor64>, f: impl Fn(&mut Tape64, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor64], weights: Option<&Tensor64>| -> (f64, Option<Tensor64>, Vec<Vec<f64>>) {
        let mut tape = Tape64::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let w = weights.cloned().unwrap_or_else(|| {
            let n = tape.value(out).numel();
            Tensor64::from_vec(&[n], (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect()).unwrap()
        });
        let value: f64 = tape.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let grad_out = w.data().to_vec();
        let loss = tape.external_loss(out, value, grad_out);
        let mut grads = tape.backward(loss);
        let g = vars.iter().map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).numel()])).collect();
        (value, Some(w), g)
    };
    let (_, w, analytic) = eval(&inputs, None);
    let w = w.unwrap();
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        // Probe a subset of coordinates to keep the test fast.
        let n = input.numel();
        for _ in 0..n.min(25) {
            let i = rng.random_range(0..n);
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * h);
            let an = analytic[k][i];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                "input {k} index {i}: finite difference {fd} vs analytic {an}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    check(vec![a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul(d, v[1]);
        let e = t.exp(m);
        let sg = t.sigmoid(e);
        t.scale(sg, 3.0)
    });
    // Keep inputs away from the kink.
    let a = a.map(|x| if x.abs() < 0.05 { 0.3 } else { x });
    check(vec![a.clone()], |t, v| t.relu(v[0]));
    check(vec![a], |t, v| t.leaky_relu(v[0], 0.1));
}

#[test]
fn conv2d_all_geometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
        let x = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        check(vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    }
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 2, 3, 3], &mut rng);
    let b = random(&[2, 1, 3, 3], &mut rng);
    check(vec![a.clone(), b], |t, v| {
        let c = t.concat_channels(v[0], v[1]);
        t.upsample2(c)
    });
    check(vec![a], |t, v| t.global_avg_pool(v[0]));
}

#[test]
fn linear_and_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 5, 3], &mut rng);
    let w = random(&[3, 4], &mut rng);
    let b = random(&[4], &mut rng);
    check(vec![x.clone(), w, b], |t, v| t.linear(v[0], v[1], Some(v[2])));
    let op: Arc<Vec<f64>> = Arc::new((0..25).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect());
    check(vec![x], move |t, v| {
        let p = t.graph_prop(v[0], &op);
        let r = t.reshape(p, &[10, 3]);
        t.scale(r, 0.5)
    });
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let mut tape = Tape64::new();
    let x = tape.constant(Tensor64::full(&[3], 2.0));
    let w = tape.param(Tensor64::full(&[3], 1.5));
    let y = tape.mul(x, w);
    let loss = tape.external_loss(y, 0.0, vec![1.0; 3]);
    let grads = tape.backward(loss);
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap(), &[2.0, 2.0, 2.0]);
}
