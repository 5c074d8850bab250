//! Finite-difference verification of every differentiable op, in f64.

use ndarray::{ArrayD, IxDyn};
use picsynth_grad::gradcheck::{check_against, max_rel_error};
use picsynth_grad::nn::{BatchNorm2d, Linear, ParamStore};
use picsynth_grad::{concat, conv2d, conv_transpose2d, cross_entropy, stack0, Graph, RandomSource, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_arr(rng: &mut RandomSource, shape: &[usize]) -> ArrayD<f64> {
    rng.normal_array(shape, 1.0)
}

/// Checks d(scalar f(x))/dx against central differences.
fn check_unary<F>(shape: &[usize], seed: u64, f: F) -> f64
where
    F: for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>,
{
    let mut rng = RandomSource::new(seed);
    let x0 = rand_arr(&mut rng, shape);
    let g = Graph::new();
    let x = g.leaf(x0.clone());
    let loss = f(x).sum_all();
    let grads = g.backward(loss);
    let analytic = grads.wrt(x).unwrap().clone();
    check_against(&x0, &analytic, EPS, |xp| {
        let g = Graph::new();
        let x = g.leaf(xp.clone());
        f(x).sum_all().scalar()
    })
}

#[test]
fn elementwise_op_gradients() {
    // Squares downstream make the check sensitive to wrong chain rules.
    assert!(check_unary(&[3, 4], 1, |x| x.exp().square()) < TOL);
    assert!(check_unary(&[3, 4], 2, |x| x.tanh().square()) < TOL);
    assert!(check_unary(&[3, 4], 3, |x| x.relu().square()) < 1e-5);
    assert!(check_unary(&[3, 4], 4, |x| x.leaky_relu(0.2).square()) < 1e-5);
    assert!(check_unary(&[3, 4], 5, |x| x.abs().square()) < 1e-5);
    assert!(check_unary(&[3, 4], 6, |x| x.square().add_s(1.0).sqrt()) < TOL);
    assert!(check_unary(&[3, 4], 7, |x| x.square().add_s(0.5).recip()) < TOL);
    assert!(check_unary(&[3, 4], 8, |x| x.softplus().square()) < TOL);
    assert!(check_unary(&[3, 4], 9, |x| x.mul_s(3.5).add_s(-1.0).square()) < TOL);
    assert!(check_unary(&[3, 4], 10, |x| x.neg().exp()) < TOL);
    assert!(check_unary(&[2, 3], 11, |x| x.mean_all()) < TOL);
}

#[test]
fn binary_op_gradients() {
    let mut rng = RandomSource::new(42);
    let a0 = rand_arr(&mut rng, &[4, 3]);
    let b0 = rand_arr(&mut rng, &[4, 3]);
    for side in 0..2 {
        let run = |av: &ArrayD<f64>, bv: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
            let g = Graph::new();
            let a = g.leaf(av.clone());
            let b = g.leaf(bv.clone());
            let loss = a.mul(b).add(a.sub(b).square()).sum_all();
            let grads = g.backward(loss);
            (
                loss.scalar(),
                grads.wrt(a).unwrap().clone(),
                grads.wrt(b).unwrap().clone(),
            )
        };
        let (_, da, db) = run(&a0, &b0);
        let (x0, analytic) = if side == 0 { (&a0, da) } else { (&b0, db) };
        let err = check_against(x0, &analytic, EPS, |xp| {
            if side == 0 {
                run(xp, &b0).0
            } else {
                run(&a0, xp).0
            }
        });
        assert!(err < TOL, "side {side} err {err}");
    }
}

#[test]
fn matmul_and_linear_gradients() {
    assert!(
        check_unary(&[3, 4], 21, |x| {
            let g = x.graph();
            let w = g.constant(RandomSource::new(7).normal_array(&[4, 2], 1.0));
            x.matmul(w).square()
        }) < TOL
    );
    // Through a Linear layer (weight path).
    let mut rng = RandomSource::new(22);
    let mut ps = ParamStore::<f64>::new();
    let lin = Linear::new(&mut ps, "lin", 4, 3, &mut rng);
    let x0 = rand_arr(&mut rng, &[5, 4]);
    let w0 = ps.get(lin.w).clone();
    let g = Graph::new();
    let x = g.constant(x0.clone());
    let loss = lin.forward(&g, &ps, x).square().sum_all();
    let grads = g.backward(loss);
    let dw = grads
        .param_grads()
        .find(|(pid, _)| *pid == lin.w)
        .unwrap()
        .1
        .clone();
    let err = check_against(&w0, &dw, EPS, |wp| {
        ps.set(lin.w, wp.clone());
        let g = Graph::new();
        let x = g.constant(x0.clone());
        let v = lin.forward(&g, &ps, x).square().sum_all().scalar();
        ps.set(lin.w, w0.clone());
        v
    });
    assert!(err < TOL, "linear weight grad err {err}");
}

#[test]
fn shape_op_gradients() {
    assert!(check_unary(&[2, 3, 4, 4], 31, |x| x.crop2d(1, 3, 0, 2).square()) < TOL);
    assert!(check_unary(&[2, 2, 3, 3], 32, |x| x.upsample_nearest2().square()) < TOL);
    assert!(check_unary(&[2, 2, 4, 4], 33, |x| x.avg_pool2().square()) < TOL);
    assert!(check_unary(&[2, 3, 4, 4], 34, |x| x.spatial_mean().square()) < TOL);
    assert!(check_unary(&[2, 3, 4, 4], 35, |x| x.channel_mean().square()) < TOL);
    assert!(check_unary(&[3], 36, |x| x.broadcast_c(2, 3, 3).square()) < TOL);
    assert!(check_unary(&[2, 3], 37, |x| x.broadcast_nc(4, 4).square()) < TOL);
    assert!(check_unary(&[2, 6], 38, |x| x.reshape(&[3, 4]).square()) < TOL);
    assert!(check_unary(&[3, 4], 39, |x| x.transpose2().square()) < TOL);
    assert!(
        check_unary(&[2, 2, 4, 4], 40, |x| {
            let parts = [x.crop2d(0, 2, 0, 4), x.crop2d(2, 4, 0, 4)];
            concat(&parts, 2).square()
        }) < TOL
    );
    assert!(
        check_unary(&[2, 3], 41, |x| {
            let parts = [x.square(), x.mul_s(2.0)];
            stack0(&parts).square()
        }) < TOL
    );
}

#[test]
fn mask_and_outer_gradients() {
    // outer_channel: embeddings side and mask side.
    let mut rng = RandomSource::new(51);
    let e0 = rand_arr(&mut rng, &[2, 3]);
    let m0 = rand_arr(&mut rng, &[2, 1, 4, 4]);
    let run = |ev: &ArrayD<f64>, mv: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
        let g = Graph::new();
        let e = g.leaf(ev.clone());
        let m = g.leaf(mv.clone());
        let loss = e.outer_channel(m).square().sum_all();
        let grads = g.backward(loss);
        (
            loss.scalar(),
            grads.wrt(e).unwrap().clone(),
            grads.wrt(m).unwrap().clone(),
        )
    };
    let (_, de, dm) = run(&e0, &m0);
    assert!(check_against(&e0, &de, EPS, |ep| run(ep, &m0).0) < TOL);
    assert!(check_against(&m0, &dm, EPS, |mp| run(&e0, mp).0) < TOL);

    // mul_mask both sides.
    let x0 = rand_arr(&mut rng, &[2, 3, 4, 4]);
    let k0 = rand_arr(&mut rng, &[2, 1, 4, 4]);
    let run2 = |xv: &ArrayD<f64>, kv: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
        let g = Graph::new();
        let x = g.leaf(xv.clone());
        let k = g.leaf(kv.clone());
        let loss = x.mul_mask(k).square().sum_all();
        let grads = g.backward(loss);
        (
            loss.scalar(),
            grads.wrt(x).unwrap().clone(),
            grads.wrt(k).unwrap().clone(),
        )
    };
    let (_, dx, dk) = run2(&x0, &k0);
    assert!(check_against(&x0, &dx, EPS, |xp| run2(xp, &k0).0) < TOL);
    assert!(check_against(&k0, &dk, EPS, |kp| run2(&x0, kp).0) < TOL);
}

#[test]
fn conv2d_gradients_all_inputs() {
    let mut rng = RandomSource::new(61);
    let x0 = rand_arr(&mut rng, &[2, 3, 6, 6]);
    let w0 = rand_arr(&mut rng, &[4, 3, 3, 3]);
    let b0 = rand_arr(&mut rng, &[4]);
    for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
        let run = |xv: &ArrayD<f64>,
                   wv: &ArrayD<f64>,
                   bv: &ArrayD<f64>|
         -> (f64, ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
            let g = Graph::new();
            let x = g.leaf(xv.clone());
            let w = g.leaf(wv.clone());
            let b = g.leaf(bv.clone());
            let loss = conv2d(x, w, Some(b), stride, pad).square().sum_all();
            let grads = g.backward(loss);
            (
                loss.scalar(),
                grads.wrt(x).unwrap().clone(),
                grads.wrt(w).unwrap().clone(),
                grads.wrt(b).unwrap().clone(),
            )
        };
        let (_, dx, dw, db) = run(&x0, &w0, &b0);
        assert!(
            check_against(&x0, &dx, EPS, |xp| run(xp, &w0, &b0).0) < TOL,
            "conv2d dx s={stride} p={pad}"
        );
        assert!(
            check_against(&w0, &dw, EPS, |wp| run(&x0, wp, &b0).0) < TOL,
            "conv2d dw s={stride} p={pad}"
        );
        assert!(
            check_against(&b0, &db, EPS, |bp| run(&x0, &w0, bp).0) < TOL,
            "conv2d db s={stride} p={pad}"
        );
    }
}

#[test]
fn conv_transpose2d_gradients_all_inputs() {
    let mut rng = RandomSource::new(71);
    let x0 = rand_arr(&mut rng, &[2, 3, 4, 4]);
    let w0 = rand_arr(&mut rng, &[3, 2, 4, 4]);
    let b0 = rand_arr(&mut rng, &[2]);
    for (stride, pad) in [(2usize, 1usize), (1, 0)] {
        let run = |xv: &ArrayD<f64>,
                   wv: &ArrayD<f64>,
                   bv: &ArrayD<f64>|
         -> (f64, ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
            let g = Graph::new();
            let x = g.leaf(xv.clone());
            let w = g.leaf(wv.clone());
            let b = g.leaf(bv.clone());
            let loss = conv_transpose2d(x, w, Some(b), stride, pad)
                .square()
                .sum_all();
            let grads = g.backward(loss);
            (
                loss.scalar(),
                grads.wrt(x).unwrap().clone(),
                grads.wrt(w).unwrap().clone(),
                grads.wrt(b).unwrap().clone(),
            )
        };
        let (_, dx, dw, db) = run(&x0, &w0, &b0);
        assert!(
            check_against(&x0, &dx, EPS, |xp| run(xp, &w0, &b0).0) < TOL,
            "convT dx s={stride} p={pad}"
        );
        assert!(
            check_against(&w0, &dw, EPS, |wp| run(&x0, wp, &b0).0) < TOL,
            "convT dw s={stride} p={pad}"
        );
        assert!(
            check_against(&b0, &db, EPS, |bp| run(&x0, &w0, bp).0) < TOL,
            "convT db s={stride} p={pad}"
        );
    }
}

#[test]
fn conv_transpose_matches_upsampling_shape() {
    let g = Graph::<f64>::new();
    let x = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 4, 4])));
    let w = g.constant(ArrayD::zeros(IxDyn(&[3, 5, 4, 4])));
    let y = conv_transpose2d(x, w, None, 2, 1);
    assert_eq!(y.shape(), vec![1, 5, 8, 8]);
}

#[test]
fn batchnorm_gradients_training_mode() {
    let mut rng = RandomSource::new(81);
    let mut ps = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut ps, "bn", 3);
    let x0 = rand_arr(&mut rng, &[4, 3, 3, 3]);
    let run = |xv: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
        // Reset buffers so each probe sees the same store state.
        ps.set(bn.running_mean, ArrayD::zeros(IxDyn(&[3])));
        ps.set(bn.running_var, ArrayD::ones(IxDyn(&[3])));
        let g = Graph::new();
        let x = g.leaf(xv.clone());
        let y = bn.forward(&g, &ps, x, true);
        let loss = y.square().add(y.exp()).sum_all();
        let grads = g.backward(loss);
        (loss.scalar(), grads.wrt(x).unwrap().clone())
    };
    let (_, dx) = run(&x0);
    let err = check_against(&x0, &dx, EPS, |xp| run(xp).0);
    assert!(err < 1e-5, "batchnorm input grad err {err}");
}

#[test]
fn batchnorm_normalizes_and_tracks_running_stats() {
    let mut rng = RandomSource::new(82);
    let mut ps = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut ps, "bn", 2);
    let x0 = rng.normal_array::<f64>(&[8, 2, 4, 4], 3.0) + 5.0;
    let g = Graph::new();
    let x = g.constant(x0.clone());
    let y = bn.forward(&g, &ps, x, true);
    let yv = y.value();
    for c in 0..2 {
        let mut mean = 0.0;
        let mut count = 0;
        for n in 0..8 {
            for i in 0..4 {
                for j in 0..4 {
                    mean += yv[[n, c, i, j]];
                    count += 1;
                }
            }
        }
        mean /= count as f64;
        assert!(mean.abs() < 1e-9, "channel {c} not centered: {mean}");
    }
    // One update moved the buffers toward the batch stats.
    let rm = ps.get(bn.running_mean).clone();
    assert!(rm.iter().all(|&v| v > 0.1), "running mean not updated: {rm}");
}

#[test]
fn cross_entropy_gradient_and_value() {
    let mut rng = RandomSource::new(91);
    let x0 = rand_arr(&mut rng, &[4, 5]);
    let targets = vec![0usize, 3, 2, 4];
    let run = |xv: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
        let g = Graph::new();
        let x = g.leaf(xv.clone());
        let loss = cross_entropy(x, &targets);
        let grads = g.backward(loss);
        (loss.scalar(), grads.wrt(x).unwrap().clone())
    };
    let (v, dx) = run(&x0);
    assert!(v > 0.0);
    let err = check_against(&x0, &dx, EPS, |xp| run(xp).0);
    assert!(err < TOL, "cross entropy grad err {err}");

    // Uniform logits -> loss = ln(K).
    let g = Graph::<f64>::new();
    let x = g.constant(ArrayD::zeros(IxDyn(&[2, 5])));
    let loss = cross_entropy(x, &[1, 2]);
    assert!((loss.scalar() - (5.0f64).ln()).abs() < 1e-12);
}

#[test]
fn adam_moves_parameters_toward_minimum() {
    let mut rng = RandomSource::new(101);
    let mut ps = ParamStore::<f64>::new();
    let w = ps.add(
        "w",
        picsynth_grad::nn::ParamKind::Weight,
        rng.normal_array(&[4], 2.0),
    );
    let mut opt = picsynth_grad::optim::Adam::new(0.05, 0.9, 0.999);
    for _ in 0..400 {
        let g = Graph::new();
        let wv = ps.var(&g, w);
        let loss = wv.square().sum_all();
        let grads = g.backward(loss);
        opt.step(&ps, &grads);
    }
    let final_norm: f64 = ps.get(w).iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(final_norm < 1e-2, "Adam failed to minimize: |w| = {final_norm}");
}

#[test]
fn finite_diff_self_test() {
    // The checker itself: quadratic has exact gradient 2x.
    let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
    let numeric = picsynth_grad::gradcheck::finite_diff(&x, 1e-6, |v| v.mapv(|u| u * u).sum());
    let analytic = x.mapv(|v| 2.0 * v);
    assert!(max_rel_error(&analytic, &numeric) < 1e-8);
}
