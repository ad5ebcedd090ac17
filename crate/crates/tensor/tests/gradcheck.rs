//! Central finite-difference checks of every differentiable op.

use gridsr_tensor::{index, Graph, Mode, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(f(inputs) * probe)` and compares the analytic gradient of every
/// input with central differences.
fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let loss_of = |ins: &[Tensor], probe: Option<&Tensor>| -> (f64, Option<Tensor>) {
        let mut g = Graph::new(&store, Mode::Train);
        let vars: Vec<Var> = ins.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let y = f(&mut g, &vars).unwrap();
        let shape = g.shape(y).to_vec();
        let p = probe.cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let pv = g.input(p);
        let prod = g.mul(y, pv).unwrap();
        let mean = g.mean(prod);
        let n = g.value(prod).len() as f32;
        let loss = g.scale(mean, n);
        (g.value(loss).data()[0] as f64, Some(Tensor::zeros(&shape)))
    };
    // probe with the output's shape
    let (_, shape_probe) = loss_of(&inputs, None);
    let probe = random(shape_probe.unwrap().shape(), &mut rng);

    let mut g = Graph::new(&store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let y = f(&mut g, &vars).unwrap();
    let pv = g.input(probe.clone());
    let prod = g.mul(y, pv).unwrap();
    let mean = g.mean(prod);
    let n = g.value(prod).len() as f32;
    let loss = g.scale(mean, n);
    let grads = g.backward(loss).unwrap();

    let h = 1e-2f32;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.input(*var).expect("input gradient").clone();
        for j in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let fd = (loss_of(&plus, Some(&probe)).0 - loss_of(&minus, Some(&probe)).0) / (2.0 * h as f64);
            let an = analytic.data()[j] as f64;
            let tol = 5e-3 + 2e-2 * fd.abs().max(an.abs());
            assert!((fd - an).abs() <= tol, "input {k} elem {j}: analytic {an} vs fd {fd}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn conv2d_3x3_padded() {
    let mut r = rng();
    let ins = vec![random(&[2, 2, 4, 5], &mut r), random(&[3, 2, 3, 3], &mut r), random(&[3], &mut r)];
    check(ins, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1));
}

#[test]
fn conv2d_1x1_and_unpadded() {
    let mut r = rng();
    let ins = vec![random(&[2, 3, 3, 3], &mut r), random(&[2, 3, 1, 1], &mut r)];
    check(ins, |g, v| g.conv2d(v[0], v[1], None, 0));
    let ins = vec![random(&[1, 1, 5, 5], &mut r), random(&[2, 1, 3, 3], &mut r)];
    check(ins, |g, v| g.conv2d(v[0], v[1], None, 0));
}

#[test]
fn matmul_all_transpose_combinations() {
    let mut r = rng();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { random(&[2, 4, 3], &mut r) } else { random(&[2, 3, 4], &mut r) };
        let b = if tb { random(&[2, 5, 4], &mut r) } else { random(&[2, 4, 5], &mut r) };
        check(vec![a, b], move |g, v| g.matmul(v[0], v[1], ta, tb));
    }
}

#[test]
fn matmul_with_shared_rhs_and_lhs() {
    let mut r = rng();
    check(vec![random(&[3, 2, 4], &mut r), random(&[4, 2], &mut r)], |g, v| g.matmul(v[0], v[1], false, false));
    check(vec![random(&[2, 4], &mut r), random(&[3, 4, 5], &mut r)], |g, v| g.matmul(v[0], v[1], false, false));
}

#[test]
fn broadcast_binary_ops() {
    let mut r = rng();
    check(vec![random(&[2, 3, 4], &mut r), random(&[3, 1], &mut r)], |g, v| g.add(v[0], v[1]));
    check(vec![random(&[2, 3, 4], &mut r), random(&[4], &mut r)], |g, v| g.mul(v[0], v[1]));
    check(vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)], |g, v| g.sub(v[0], v[1]));
}

#[test]
fn unary_ops() {
    let mut r = rng();
    check(vec![random(&[10], &mut r)], |g, v| Ok(g.gelu(v[0])));
    check(vec![random(&[10], &mut r)], |g, v| Ok(g.exp(v[0])));
    check(vec![random(&[10], &mut r)], |g, v| {
        let s = g.square(v[0]);
        let s = g.add_scalar(s, 0.5);
        Ok(g.sqrt(s))
    });
    check(vec![random(&[10], &mut r)], |g, v| {
        let s = g.scale(v[0], 3.0);
        Ok(g.leaky_relu(s, 0.1))
    });
}

#[test]
fn normalizations() {
    let mut r = rng();
    check(vec![random(&[3, 6], &mut r), random(&[6], &mut r), random(&[6], &mut r)], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check(vec![random(&[4, 5], &mut r)], |g, v| Ok(g.softmax(v[0])));
    check(vec![random(&[4, 5], &mut r)], |g, v| Ok(g.l2_normalize(v[0], 1e-6)));
}

#[test]
fn batch_norm_train_mode() {
    let mut store = ParamStore::new();
    let bn = gridsr_tensor::nn::BatchNorm2d::new(&mut store, "bn", 2);
    let mut r = rng();
    let x = random(&[3, 2, 2, 2], &mut r);
    let probe = random(&[3, 2, 2, 2], &mut r);
    let loss = |x: &Tensor| {
        let mut g = Graph::new(&store, Mode::Train);
        let xv = g.input_with_grad(x.clone());
        let y = bn.forward(&mut g, xv).unwrap();
        let p = g.input(probe.clone());
        let m = g.mul(y, p).unwrap();
        let l = g.mean(m);
        let grads = g.backward(l).unwrap();
        (g.value(l).data()[0], grads.input(xv).unwrap().clone())
    };
    let (_, an) = loss(&x);
    for j in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[j] += 1e-2;
        let mut m = x.clone();
        m.data_mut()[j] -= 1e-2;
        let fd = (loss(&p).0 - loss(&m).0) / 2e-2;
        assert!((fd - an.data()[j]).abs() < 3e-3, "elem {j}: {fd} vs {}", an.data()[j]);
    }
}

#[test]
fn pooling_concat_and_gathers() {
    let mut r = rng();
    check(vec![random(&[1, 2, 4, 4], &mut r)], |g, v| g.max_pool2(v[0]));
    check(vec![random(&[1, 2, 4, 6], &mut r)], |g, v| g.avg_pool2(v[0]));
    check(vec![random(&[2, 1, 3], &mut r), random(&[2, 2, 3], &mut r)], |g, v| g.concat(&[v[0], v[1]], 1));
    check(vec![random(&[1, 8, 2, 2], &mut r)], |g, v| {
        let m = index::pixel_shuffle(g.shape(v[0]), 2)?;
        g.gather(v[0], m)
    });
    check(vec![random(&[1, 4, 4, 2], &mut r)], |g, v| {
        let m = index::window_partition(g.shape(v[0]), 2, 1)?;
        g.gather(v[0], m)
    });
    check(vec![random(&[1, 1, 3, 3], &mut r)], |g, v| {
        let m = index::pad2d(g.shape(v[0]), 1, 0, 2, 1)?;
        g.gather(v[0], m)
    });
}
