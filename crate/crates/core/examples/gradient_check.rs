//! Reverse-mode gradients of a small anisotropic block compared with
//! central finite differences in f64.
//!
//! cargo run --example gradient_check

use aniso_cascade::autodiff::{BatchNormState, Graph, KernelSpec, Mode, Var};
use aniso_cascade::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn block(g: &mut Graph<f64>, p: &[Var], target: &[f64]) -> Var {
    let intra = KernelSpec::intra_slice(2).unwrap();
    let inter = KernelSpec::inter_slice(1).unwrap();
    let mut bn = BatchNormState::new(2);
    let h = g.conv(p[0], p[1], p[2], &intra).unwrap();
    let h = g.batch_norm(h, p[3], p[4], &mut bn, Mode::Train).unwrap();
    let h = g.prelu(h, p[5]).unwrap();
    let h = g.conv(h, p[6], p[7], &inter).unwrap();
    let prob = g.softmax_channels(h).unwrap();
    g.dice_loss(prob, target).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let params = vec![
        rand(&[2, 3, 6, 6, 4]),
        rand(&[2, 3, 3, 3, 1]),
        rand(&[2]),
        rand(&[2]),
        rand(&[2]),
        Tensor::full(&[2], 0.25),
        rand(&[2, 2, 1, 1, 3]),
        rand(&[2]),
    ];
    let target: Vec<f64> = (0..2 * 6 * 6 * 4).map(|i| (i % 5 == 0) as u8 as f64).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = block(&mut g, &vars, &target);
    g.backward(loss).unwrap();
    println!("loss {:.6}, graph of {} nodes", g.value(loss).data()[0], g.len());

    let eval = |ps: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let l = block(&mut g, &vars, &target);
        g.value(l).data()[0]
    };
    let h = 1e-6;
    let names = ["input", "w_intra", "b_intra", "gamma", "beta", "slope", "w_inter", "b_inter"];
    for (i, name) in names.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap().data()[0];
        let mut plus = params.clone();
        plus[i].data_mut()[0] += h;
        let mut minus = params.clone();
        minus[i].data_mut()[0] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        println!("{name:>8}[0]: analytic {analytic:+.8e}  numeric {numeric:+.8e}");
    }
}
