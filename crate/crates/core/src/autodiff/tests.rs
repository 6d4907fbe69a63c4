use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{CrossEntropy, Embedding, LayerNorm, ScaleNorm};

/// Builds `sum(weights ⊙ f(inputs))` so every output coordinate matters.
pub(crate) fn weighted<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Var<'t> {
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    out.mul(w).unwrap().sum()
}

/// Central finite differences against the tape for every input coordinate.
/// Returns the worst `|fd - ad| / max(|fd|, |ad|, floor)`, where the floor is
/// 1e-8 or 1e-4 of the largest gradient entry, whichever is larger; below
/// that, central differences at eps = 1e-5 are dominated by rounding.
pub(crate) fn max_rel_err(
    inputs: &[Tensor],
    f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).unwrap()).collect();

    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let eps = 1e-5;
    let scale = analytic
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-4 * scale).max(1e-8);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let ad = analytic[i].data()[j];
            worst = worst.max((fd - ad).abs() / fd.abs().max(ad.abs()).max(floor));
        }
    }
    worst
}

pub(crate) fn check_op(shapes: &[&[usize]], f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
    for point in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| Tensor::randn(s, 1.0, &mut rng))
            .collect();
        let err = max_rel_err(&inputs, f);
        assert!(err < 1e-6, "point {point}: relative error {err:e}");
    }
}

#[test]
fn sum_gives_ones() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
    tape.backward(x.sum()).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gives_two_x() {
    let tape = Tape::new();
    let data = vec![1.0, -2.0, 3.5, 0.25];
    let x = tape.param(Tensor::vector(data.clone()));
    tape.backward(x.mul(x).unwrap().sum()).unwrap();
    let g = tape.grad(x).unwrap();
    for (g, x) in g.data().iter().zip(&data) {
        assert_eq!(*g, 2.0 * x);
    }
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(tape.backward(x.silu()), Err(Error::NonScalarLoss(vec![2])));
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(tape.backward(c.sum()), Err(Error::DetachedGraph));
    let loss = x.sum();
    tape.backward(loss).unwrap();
    assert_eq!(tape.backward(loss), Err(Error::BackwardTwice));
}

#[test]
fn unreached_leaf_has_zero_grad_and_constants_have_none() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0]));
    let y = tape.param(Tensor::vector(vec![2.0]));
    let c = tape.constant(Tensor::vector(vec![3.0]));
    tape.backward(x.mul(c).unwrap().sum()).unwrap();
    assert_eq!(tape.grad(y).unwrap().data(), &[0.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn gradient_accumulates_across_uses() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![3.0]));
    let y = x.add(x).unwrap().mul(x).unwrap(); // 2x^2
    tape.backward(y.sum()).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[12.0]);
}

#[test]
fn fd_elementwise_ops() {
    check_op(&[&[3, 4], &[3, 4]], &|t, v| {
        weighted(t, v[0].add(v[1]).unwrap(), 1)
    });
    check_op(&[&[3, 4], &[3, 4]], &|t, v| {
        weighted(t, v[0].sub(v[1]).unwrap(), 2)
    });
    check_op(&[&[3, 4], &[3, 4]], &|t, v| {
        weighted(t, v[0].mul(v[1]).unwrap(), 3)
    });
    check_op(&[&[5]], &|t, v| weighted(t, v[0].exp(), 4));
    check_op(&[&[5]], &|t, v| weighted(t, v[0].sigmoid(), 5));
    check_op(&[&[2, 5]], &|t, v| weighted(t, v[0].silu(), 6));
    check_op(&[&[2, 5]], &|t, v| weighted(t, v[0].scale(-0.7), 7));
}

#[test]
fn fd_broadcast_ops() {
    check_op(&[&[4, 3], &[3]], &|t, v| {
        weighted(t, v[0].add_row(v[1]).unwrap(), 8)
    });
    check_op(&[&[4, 3], &[3]], &|t, v| {
        weighted(t, v[0].mul_row(v[1]).unwrap(), 9)
    });
    check_op(&[&[4, 3], &[4]], &|t, v| {
        weighted(t, v[0].mul_col(v[1]).unwrap(), 10)
    });
    check_op(&[&[4, 3], &[1]], &|t, v| {
        weighted(t, v[0].mul_scalar(v[1]).unwrap(), 11)
    });
    check_op(&[&[4, 3]], &|t, v| weighted(t, v[0].mean_rows(), 12));
}

#[test]
fn fd_matmul_softmax_select() {
    check_op(&[&[3, 4], &[4, 2]], &|t, v| {
        weighted(t, v[0].matmul(v[1]).unwrap(), 13)
    });
    check_op(&[&[3, 5]], &|t, v| {
        weighted(t, v[0].softmax_lastdim().unwrap(), 14)
    });
    check_op(&[&[4, 2]], &|t, v| {
        let p = v[0].softmax_lastdim().unwrap();
        weighted(t, p.select_cols(&[0, 1, 1, 0]).unwrap(), 15)
    });
}

#[test]
fn fd_causal_convolution() {
    check_op(&[&[7, 3], &[7, 3]], &|t, v| {
        weighted(t, v[0].causal_convolve(v[1]).unwrap(), 16)
    });
}

#[test]
fn fd_norms_embedding_and_loss() {
    check_op(&[&[3, 5], &[5], &[5]], &|t, v| {
        weighted(t, LayerNorm::apply(v[0], v[1], v[2]).unwrap(), 17)
    });
    check_op(&[&[3, 5], &[1]], &|t, v| {
        weighted(t, ScaleNorm::apply(v[0], v[1]).unwrap(), 18)
    });
    check_op(&[&[4, 3]], &|t, v| {
        weighted(t, Embedding::apply(v[0], &[2, 0, 2, 3]).unwrap(), 19)
    });
    check_op(&[&[4, 5]], &|_, v| {
        CrossEntropy::apply(v[0], &[1, 4, 0, 2], &[true, false, true, true]).unwrap()
    });
}

#[test]
fn fd_composite_chain() {
    // A small network mixing most ops, as used by the layers above.
    check_op(&[&[6, 3], &[3, 3], &[3], &[6, 3]], &|t, v| {
        let h = v[3].causal_convolve(v[0]).unwrap().silu();
        let lin = h.matmul(v[1]).unwrap().add_row(v[2]).unwrap();
        let p = lin.softmax_lastdim().unwrap();
        let c = p.select_cols(&[0, 2, 1, 1, 0, 2]).unwrap();
        weighted(t, lin.mul_col(c).unwrap().add(v[0]).unwrap().silu(), 20)
    });
}

#[test]
fn corrupted_rule_is_visible_to_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::randn(&[4], 1.0, &mut rng);
    let tape = Tape::new();
    tape.corrupt_backward("silu");
    let v = tape.param(x.clone());
    tape.backward(weighted(&tape, v.silu(), 22)).unwrap();
    let bad = tape.grad(v).unwrap();
    let good = {
        let tape = Tape::new();
        let v = tape.param(x);
        tape.backward(weighted(&tape, v.silu(), 22)).unwrap();
        tape.grad(v).unwrap()
    };
    for (b, g) in bad.data().iter().zip(good.data()) {
        assert!((b - 1.5 * g).abs() < 1e-12);
    }
}

#[test]
fn forward_outputs_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let tape = Tape::new();
        let x = tape.param(Tensor::randn(&[5, 4], 30.0 * rng.random::<f64>(), &mut rng));
        let y = x.silu().softmax_lastdim().unwrap().exp().sigmoid();
        assert!(y.value().is_finite());
    }
}
