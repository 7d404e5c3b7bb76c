use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct evaluation of the correlation sum, zero outside the volume.
fn conv_oracle(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    [b, c, x, y, z]: [usize; 5],
    co: usize,
    spec: &KernelSpec,
) -> Vec<f64> {
    let [ex, ey, ez] = spec.extent;
    let [dx, dy, dz] = spec.dilation;
    let mut out = vec![0.0; b * co * x * y * z];
    for bi in 0..b {
        for o in 0..co {
            for i in 0..x {
                for j in 0..y {
                    for k in 0..z {
                        let mut acc = bias[o];
                        for ci in 0..c {
                            for a in 0..ex {
                                for bb in 0..ey {
                                    for cc in 0..ez {
                                        let si = i as isize + (a as isize - (ex / 2) as isize) * dx as isize;
                                        let sj = j as isize + (bb as isize - (ey / 2) as isize) * dy as isize;
                                        let sk = k as isize + (cc as isize - (ez / 2) as isize) * dz as isize;
                                        if si < 0
                                            || sj < 0
                                            || sk < 0
                                            || si >= x as isize
                                            || sj >= y as isize
                                            || sk >= z as isize
                                        {
                                            continue;
                                        }
                                        let src =
                                            (((bi * c + ci) * x + si as usize) * y + sj as usize) * z + sk as usize;
                                        let w = (((o * c + ci) * ex + a) * ey + bb) * ez + cc;
                                        acc += weight[w] * input[src];
                                    }
                                }
                            }
                        }
                        out[(((bi * co + o) * x + i) * y + j) * z + k] = acc;
                    }
                }
            }
        }
    }
    out
}

fn run_conv<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, spec: &KernelSpec) -> Tensor<T> {
    let mut g = Graph::new();
    let i = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let o = g.conv(i, w, b, spec).unwrap();
    g.value(o).clone()
}

/// Central finite differences against the analytic gradient of every
/// parameter. `build` maps parameter handles to a scalar loss.
fn grad_check(params: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();

    let eval = |ps: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).data()[0]
    };
    let h = 1e-6;
    for (pi, p) in params.iter().enumerate() {
        let stride = (p.len() / 40).max(1);
        for idx in (0..p.len()).step_by(stride) {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[idx] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[pi].data()[idx];
            let tol = 1e-6 * (1.0 + numeric.abs());
            assert!((numeric - a).abs() < tol, "param {pi} index {idx}: analytic {a}, numeric {numeric}");
        }
    }
}

/// Scalar projection `Σ r·y` so every output element carries a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(g.shape(y), &mut rng);
    let r = g.constant(r);
    let m = g.mul(y, r).unwrap();
    g.sum(m)
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 3, 5, 6, 4], &mut rng);
    for spec in [KernelSpec::intra_slice(2).unwrap(), KernelSpec::inter_slice(1).unwrap()] {
        let taps = spec.taps();
        let mut w = Tensor::zeros(&[3, 3, spec.extent[0], spec.extent[1], spec.extent[2]]);
        for c in 0..3 {
            w.data_mut()[(c * 3 + c) * taps + taps / 2] = 1.0;
        }
        let y = run_conv(&x, &w, &Tensor::zeros(&[3]), &spec);
        assert_eq!(y.max_abs_diff(&x), 0.0);
        let y32 = run_conv(&x.cast::<f32>(), &w.cast(), &Tensor::zeros(&[3]), &spec);
        assert!(y32.cast::<f64>().max_abs_diff(&x) < 1e-6);
    }
}

#[test]
fn conv_rejects_mismatched_channels_and_nan() {
    let mut g = Graph::<f32>::new();
    let spec = KernelSpec::intra_slice(1).unwrap();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4, 2]));
    let w = g.param(Tensor::zeros(&[3, 4, 3, 3, 1]));
    let b = g.param(Tensor::zeros(&[3]));
    assert!(matches!(g.conv(x, w, b, &spec), Err(Error::Shape(_))));
    let mut bad = Tensor::zeros(&[1, 4, 4, 4, 2]);
    bad.data_mut()[5] = f32::NAN;
    let x = g.constant(bad);
    assert!(matches!(g.conv(x, w, b, &spec), Err(Error::NonFinite(_))));
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for spec in [
        KernelSpec::intra_slice(1).unwrap(),
        KernelSpec::intra_slice(3).unwrap(),
        KernelSpec::inter_slice(2).unwrap(),
        KernelSpec::new([3, 1, 3], [1, 1, 1]).unwrap(),
    ] {
        let [ex, ey, ez] = spec.extent;
        let params =
            [random(&[2, 3, 5, 4, 3], &mut rng), random(&[2, 3, ex, ey, ez], &mut rng), random(&[2], &mut rng)];
        grad_check(&params, |g, v| {
            let y = g.conv(v[0], v[1], v[2], &spec).unwrap();
            project(g, y, 3)
        });
    }
}

#[test]
fn prelu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = [random(&[2, 3, 3, 3, 2], &mut rng), random(&[3], &mut rng)];
    grad_check(&params, |g, v| {
        let y = g.prelu(v[0], v[1]).unwrap();
        project(g, y, 5)
    });
}

#[test]
fn batch_norm_gradients_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = [random(&[3, 2, 3, 3, 2], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    for mode in [Mode::Train, Mode::Infer] {
        grad_check(&params, |g, v| {
            let mut st = BatchNormState::new(2);
            st.mean = vec![0.1, -0.2];
            st.var = vec![0.5, 1.5];
            let y = g.batch_norm(v[0], v[1], v[2], &mut st, mode).unwrap();
            project(g, y, 7)
        });
    }
}

#[test]
fn batch_norm_running_stats() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(&[2, 1, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
    let gamma = g.param(Tensor::full(&[1], 1.0));
    let beta = g.param(Tensor::zeros(&[1]));
    let mut st = BatchNormState::new(1);
    let y = g.batch_norm(x, gamma, beta, &mut st, Mode::Train).unwrap();
    // batch mean 3, biased variance 3.5, unbiased 14/3
    assert!((st.mean[0] - 0.1 * 3.0).abs() < 1e-12);
    assert!((st.var[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);
    let out = g.value(y).data();
    assert!((out.iter().sum::<f64>()).abs() < 1e-12);
    let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
    assert!((var - 3.5 / (3.5 + 1e-5)).abs() < 1e-9);

    let mut fresh = BatchNormState::<f64>::uninitialized(1);
    assert!(matches!(g.batch_norm(x, gamma, beta, &mut fresh, Mode::Infer), Err(Error::UninitializedStats)));
    g.batch_norm(x, gamma, beta, &mut fresh, Mode::Train).unwrap();
    assert!((fresh.mean[0] - 3.0).abs() < 1e-12);
    g.batch_norm(x, gamma, beta, &mut fresh, Mode::Infer).unwrap();
}

#[test]
fn max_pool_values_and_gradients() {
    let mut g = Graph::<f64>::new();
    let data: Vec<f64> = (0..9).map(|v| v as f64 - 4.0).collect();
    let x = g.constant(Tensor::from_vec(&[1, 1, 3, 3, 1], data).unwrap());
    let y = g.downsample2d(x).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2, 1]);
    // Windows that reach the zero padding take max(·, 0).
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = [random(&[2, 2, 5, 4, 3], &mut rng)];
    grad_check(&params, |g, v| {
        let y = g.downsample2d(v[0]).unwrap();
        project(g, y, 9)
    });
}

#[test]
fn upsample_reproduces_linear_ramps_in_the_interior() {
    let (n, f) = (6, 4);
    let data: Vec<f64> = (0..n * n).map(|i| 2.0 * (i / n) as f64 - 0.5 * (i % n) as f64).collect();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(&[1, 1, n, n, 1], data).unwrap());
    let y = g.upsample2d(x, f).unwrap();
    let out = g.value(y).data();
    let m = n * f;
    for i in f / 2..m - f / 2 {
        for j in f / 2..m - f / 2 {
            let sx = (i as f64 + 0.5) / f as f64 - 0.5;
            let sy = (j as f64 + 0.5) / f as f64 - 0.5;
            assert!((out[i * m + j] - (2.0 * sx - 0.5 * sy)).abs() < 1e-12);
        }
    }
}

#[test]
fn upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = [random(&[1, 2, 3, 4, 2], &mut rng)];
    for f in [1, 2, 4] {
        grad_check(&params, |g, v| {
            let y = g.upsample2d(v[0], f).unwrap();
            project(g, y, 11)
        });
    }
}

#[test]
fn softmax_concat_pad_crop_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = [random(&[2, 2, 3, 3, 2], &mut rng), random(&[2, 1, 3, 3, 2], &mut rng)];
    grad_check(&params, |g, v| {
        let c = g.concat_channels(&[v[1], v[0]]).unwrap();
        let s = g.softmax_channels(c).unwrap();
        let p = g.pad_spatial(s, [4, 5, 3]).unwrap();
        let q = g.crop_spatial(p, [2, 5, 2]).unwrap();
        project(g, q, 13)
    });
}

#[test]
fn dice_loss_value_and_gradient() {
    let mut g = Graph::<f64>::new();
    // Perfect prediction: loss 0.
    let target = vec![1.0, 0.0, 1.0, 0.0];
    let p = Tensor::from_vec(&[1, 2, 2, 2, 1], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let pv = g.constant(p);
    let l = g.dice_loss(pv, &target).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-12);

    let bad = g.constant(Tensor::full(&[1, 2, 2, 2, 1], 0.7));
    assert!(g.dice_loss(bad, &target).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = [random(&[2, 2, 3, 2, 2], &mut rng)];
    let target: Vec<f64> = (0..24).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    grad_check(&params, |g, v| {
        let s = g.softmax_channels(v[0]).unwrap();
        g.dice_loss(s, &target).unwrap()
    });
}

#[test]
fn unused_params_get_zero_gradients_and_grads_accumulate() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::full(&[2], 3.0));
    let unused = g.param(Tensor::full(&[3], 1.0));
    let s = g.sum(a);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 3]);
    g.zero_grad();
    assert!(g.grad(a).is_none());
    let v = g.param(Tensor::full(&[2], 1.0));
    assert!(g.backward(v).is_err());
}

fn conv_case() -> impl Strategy<Value = ([usize; 5], usize, KernelSpec, u64)> {
    (
        1usize..3,
        1usize..6,
        1usize..7,
        1usize..9,
        1usize..8,
        1usize..6,
        prop_oneof![
            (1usize..4).prop_map(|d| KernelSpec::intra_slice(d).unwrap()),
            (1usize..4).prop_map(|d| KernelSpec::inter_slice(d).unwrap()),
        ],
        any::<u64>(),
    )
        .prop_map(|(b, c, x, y, z, co, spec, seed)| ([b, c, x, y, z], co, spec, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_sum((shape, co, spec, seed) in conv_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, &mut rng);
        let w = random(&[co, shape[1], spec.extent[0], spec.extent[1], spec.extent[2]], &mut rng);
        let b = random(&[co], &mut rng);
        let expect = conv_oracle(x.data(), w.data(), b.data(), shape, co, &spec);
        let got = run_conv(&x, &w, &b, &spec);
        for (a, e) in got.data().iter().zip(&expect) {
            prop_assert!((a - e).abs() < 1e-12);
        }
        let got32 = run_conv(&x.cast::<f32>(), &w.cast(), &b.cast(), &spec);
        for (a, e) in got32.data().iter().zip(&expect) {
            prop_assert!((*a as f64 - e).abs() < 1e-4 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn conv_backward_matches_f64((shape, co, spec, seed) in conv_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, &mut rng);
        let w = random(&[co, shape[1], spec.extent[0], spec.extent[1], spec.extent[2]], &mut rng);
        let b = random(&[co], &mut rng);
        let grads = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, single: bool| {
            let mut out = Vec::new();
            if single {
                let mut g = Graph::<f32>::new();
                let v = [g.param(x.cast()), g.param(w.cast()), g.param(b.cast())];
                let y = g.conv(v[0], v[1], v[2], &spec).unwrap();
                let y = g.sum(y);
                g.backward(y).unwrap();
                for p in v { out.push(g.grad(p).unwrap().cast::<f64>()); }
            } else {
                let mut g = Graph::<f64>::new();
                let v = [g.param(x.clone()), g.param(w.clone()), g.param(b.clone())];
                let y = g.conv(v[0], v[1], v[2], &spec).unwrap();
                let y = g.sum(y);
                g.backward(y).unwrap();
                for p in v { out.push(g.grad(p).unwrap().clone()); }
            }
            out
        };
        let g64 = grads(&x, &w, &b, false);
        let g32 = grads(&x, &w, &b, true);
        for (a, e) in g32.iter().zip(&g64) {
            let scale = e.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(a.max_abs_diff(e) < 1e-4 * scale);
        }
    }

    #[test]
    fn conv_is_linear_in_input((shape, co, spec, seed) in conv_case(), alpha in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = random(&shape, &mut rng);
        let x2 = random(&shape, &mut rng);
        let w = random(&[co, shape[1], spec.extent[0], spec.extent[1], spec.extent[2]], &mut rng);
        let zero = Tensor::zeros(&[co]);
        let mix = Tensor::from_vec(&shape, x1.data().iter().zip(x2.data()).map(|(a, b)| alpha * a + b).collect()).unwrap();
        let y1 = run_conv(&x1, &w, &zero, &spec);
        let y2 = run_conv(&x2, &w, &zero, &spec);
        let ym = run_conv(&mix, &w, &zero, &spec);
        for ((m, a), b) in ym.data().iter().zip(y1.data()).zip(y2.data()) {
            prop_assert!((m - (alpha * a + b)).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_commutes_with_shifts(seed in any::<u64>(), d in 1usize..4, shift in 1usize..3, intra in any::<bool>()) {
        // A shifted input with a zero border yields the shifted output away
        // from the border.
        let spec = if intra { KernelSpec::intra_slice(d).unwrap() } else { KernelSpec::inter_slice(d).unwrap() };
        let [x, y, z] = [14, 14, 14];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&[2, 2, spec.extent[0], spec.extent[1], spec.extent[2]], &mut rng);
        let bias = Tensor::zeros(&[2]);
        let mut base = Tensor::zeros(&[1, 2, x, y, z]);
        let margin = 7;
        let idx = |c: usize, i: usize, j: usize, k: usize| ((c * x + i) * y + j) * z + k;
        for c in 0..2 { for i in 0..x { for j in 0..y { for k in 0..z {
            if i < x - margin && j < y - margin && k < z - margin {
                base.data_mut()[idx(c, i, j, k)] = rng.random_range(-1.0..1.0);
            }
        }}}}
        let mut moved = Tensor::zeros(&[1, 2, x, y, z]);
        for c in 0..2 { for i in 0..x - shift { for j in 0..y - shift { for k in 0..z - shift {
            moved.data_mut()[idx(c, i + shift, j + shift, k + shift)] = base.data()[idx(c, i, j, k)];
        }}}}
        let y0 = run_conv(&base, &w, &bias, &spec);
        let y1 = run_conv(&moved, &w, &bias, &spec);
        for c in 0..2 { for i in 0..x - shift { for j in 0..y - shift { for k in 0..z - shift {
            prop_assert!((y1.data()[idx(c, i + shift, j + shift, k + shift)] - y0.data()[idx(c, i, j, k)]).abs() < 1e-12);
        }}}}
    }

    #[test]
    fn forward_and_backward_are_deterministic((shape, co, spec, seed) in conv_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, &mut rng).cast::<f32>();
        let w = random(&[co, shape[1], spec.extent[0], spec.extent[1], spec.extent[2]], &mut rng).cast::<f32>();
        let run = || {
            let mut g = Graph::<f32>::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let bv = g.param(Tensor::zeros(&[co]));
            let y = g.conv(xv, wv, bv, &spec).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            (g.value(y).clone(), g.grad(xv).unwrap().clone(), g.grad(wv).unwrap().clone())
        };
        prop_assert!(run() == run());
    }
}
