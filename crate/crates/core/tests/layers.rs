mod common;

use common::{max_abs_diff, naive_conv3d, numeric_grad, rel_err, uniform};
use proptest::prelude::*;
use resattnet::layers::{softmax_cross_entropy, BatchNorm3d, Conv3d, Linear, MaxPool3d, Mode};
use resattnet::{Shape, Tensor};

const H: f64 = 1e-5;

fn with_data(shape: Shape, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn conv_three_kernels_match_loop_oracle() {
    let x = uniform(Shape::new(1, 2, 5, 5, 5), 1);
    for (i, k) in [1usize, 2, 3].into_iter().enumerate() {
        let mut conv = Conv3d::<f64>::new(2, 3, k, 1, 1, 10 + i as u64).unwrap();
        conv.bias = uniform(Shape::vector(3), 20 + i as u64);
        let (os, want) = naive_conv3d(&x, &conv.weight, conv.bias.data(), 1, 1);
        let got = conv.forward(&x).unwrap();
        assert_eq!(got.shape(), os);
        assert!(max_abs_diff(got.data(), &want) < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn conv_forward_matches_oracle(
        n in 1usize..3, c_in in 1usize..4, c_out in 1usize..4, k in 1usize..4,
        stride in 1usize..3, pad_frac in 0usize..3, d in 3usize..8, h in 3usize..8, w in 3usize..9,
        seed in any::<u64>(),
    ) {
        let pad = pad_frac.min(k - 1);
        let x = uniform(Shape::new(n, c_in, d, h, w), seed);
        let mut conv = Conv3d::<f64>::new(c_in, c_out, k, stride, pad, seed ^ 1).unwrap();
        conv.bias = uniform(Shape::vector(c_out), seed ^ 2);
        let (os, want) = naive_conv3d(&x, &conv.weight, conv.bias.data(), stride, pad);
        let got = conv.forward(&x).unwrap();
        prop_assert_eq!(got.shape(), os);
        prop_assert!(max_abs_diff(got.data(), &want) < 1e-10);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
        let x = uniform(Shape::new(2, 2, 4, 4, 4), 3);
        let conv = Conv3d::<f64>::new(2, 2, 3, stride, pad, 4).unwrap();
        let y = conv.forward(&x).unwrap();
        let r = uniform(y.shape(), 5);
        let g = conv.backward(&x, &r, true).unwrap();

        let fx = numeric_grad(x.data(), H, |v| weighted_sum(&conv.forward(&with_data(x.shape(), v)).unwrap(), &r));
        assert!(rel_err(g.input.as_ref().unwrap().data(), &fx) < 1e-6);
        let fw = numeric_grad(conv.weight.data(), H, |v| {
            let c = Conv3d::from_parts(with_data(conv.weight.shape(), v), conv.bias.clone(), stride, pad).unwrap();
            weighted_sum(&c.forward(&x).unwrap(), &r)
        });
        assert!(rel_err(g.params[0].data(), &fw) < 1e-6);
        let fb = numeric_grad(conv.bias.data(), H, |v| {
            let c = Conv3d::from_parts(conv.weight.clone(), with_data(conv.bias.shape(), v), stride, pad).unwrap();
            weighted_sum(&c.forward(&x).unwrap(), &r)
        });
        assert!(rel_err(g.params[1].data(), &fb) < 1e-6);
    }
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let x = uniform(Shape::new(2, 2, 3, 3, 3), 6);
    let mut bn = BatchNorm3d::<f64>::new(2);
    bn.gamma = uniform(Shape::vector(2), 7);
    bn.beta = uniform(Shape::vector(2), 8);
    let (y, cache) = bn.forward(&x, Mode::Train).unwrap();
    let r = uniform(y.shape(), 9);
    let g = bn.backward(&cache, &r).unwrap();

    let loss = |bn: &BatchNorm3d<f64>, x: &Tensor<f64>| weighted_sum(&bn.forward(x, Mode::Train).unwrap().0, &r);
    let fx = numeric_grad(x.data(), H, |v| loss(&bn, &with_data(x.shape(), v)));
    assert!(rel_err(g.input.as_ref().unwrap().data(), &fx) < 1e-6);
    let fg = numeric_grad(bn.gamma.data(), H, |v| {
        let mut b = bn.clone();
        b.gamma = with_data(bn.gamma.shape(), v);
        loss(&b, &x)
    });
    assert!(rel_err(g.params[0].data(), &fg) < 1e-6);
    let fb = numeric_grad(bn.beta.data(), H, |v| {
        let mut b = bn.clone();
        b.beta = with_data(bn.beta.shape(), v);
        loss(&b, &x)
    });
    assert!(rel_err(g.params[1].data(), &fb) < 1e-6);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let x = uniform(Shape::new(3, 4, 1, 1, 2), 10);
    let mut fc = Linear::<f64>::new(8, 2, 11).unwrap();
    fc.bias = uniform(Shape::vector(2), 12);
    let y = fc.forward(&x).unwrap();
    let r = uniform(y.shape(), 13);
    let g = fc.backward(&x, &r).unwrap();

    let fx = numeric_grad(x.data(), H, |v| weighted_sum(&fc.forward(&with_data(x.shape(), v)).unwrap(), &r));
    assert!(rel_err(g.input.as_ref().unwrap().data(), &fx) < 1e-6);
    let fw = numeric_grad(fc.weight.data(), H, |v| {
        let mut l = fc.clone();
        l.weight = with_data(fc.weight.shape(), v);
        weighted_sum(&l.forward(&x).unwrap(), &r)
    });
    assert!(rel_err(g.params[0].data(), &fw) < 1e-6);
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    // distinct values spaced well beyond h keep every window untied
    let shape = Shape::new(2, 2, 4, 4, 4);
    let mut vals: Vec<f64> = (0..shape.numel()).map(|i| i as f64 * 0.01).collect();
    let perm = uniform(shape, 14);
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| perm.data()[a].total_cmp(&perm.data()[b]));
    let shuffled: Vec<f64> = idx.iter().map(|&i| vals[i]).collect();
    vals = shuffled;
    let x = with_data(shape, &vals);
    let pool = MaxPool3d::default();
    let (y, cache) = pool.forward(&x).unwrap();
    let r = uniform(y.shape(), 15);
    let gx = pool.backward(&cache, &r).unwrap();
    let fx = numeric_grad(x.data(), H, |v| weighted_sum(&pool.forward(&with_data(shape, v)).unwrap().0, &r));
    assert!(rel_err(gx.data(), &fx) < 1e-6);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let logits = uniform(Shape::matrix(4, 2), 16).scale(3.0);
    let labels = [0, 1, 1, 0];
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let fx = numeric_grad(logits.data(), H, |v| {
        softmax_cross_entropy(&with_data(logits.shape(), v), &labels).unwrap().0
    });
    assert!(rel_err(g.data(), &fx) < 1e-6);
}

#[test]
fn cross_entropy_value_matches_log_softmax() {
    let logits = uniform(Shape::matrix(4, 2), 17);
    let labels = [1, 0, 0, 1];
    let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
    let want: f64 = logits
        .data()
        .chunks(2)
        .zip(labels)
        .map(|(row, l)| -(row[l].exp() / (row[0].exp() + row[1].exp())).ln())
        .sum::<f64>()
        / 4.0;
    assert!((loss - want).abs() < 1e-14);
}

#[test]
fn wide_rows_match_oracle_and_finite_differences() {
    // output rows wider than 8 take the widest vector path
    for (shape, c_out, stride, pad, k) in [
        (Shape::new(2, 3, 4, 5, 33), 5usize, 1usize, 1usize, 3usize),
        (Shape::new(1, 2, 5, 4, 40), 6, 2, 1, 3),
        (Shape::new(1, 1, 3, 3, 21), 9, 1, 0, 1),
        (Shape::new(2, 4, 3, 3, 18), 2, 2, 0, 1),
    ] {
        let x = uniform(shape, 30);
        let mut conv = Conv3d::<f64>::new(shape.c, c_out, k, stride, pad, 31).unwrap();
        conv.bias = uniform(Shape::vector(c_out), 32);
        let (os, want) = naive_conv3d(&x, &conv.weight, conv.bias.data(), stride, pad);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), os);
        assert!(max_abs_diff(y.data(), &want) < 1e-10, "{shape}");

        let r = uniform(os, 33);
        let g = conv.backward(&x, &r, true).unwrap();
        // the loss is linear in each argument, so differences are exact up to rounding
        let fw = numeric_grad(conv.weight.data(), 1e-3, |v| {
            let c = Conv3d::from_parts(with_data(conv.weight.shape(), v), conv.bias.clone(), stride, pad).unwrap();
            weighted_sum(&c.forward(&x).unwrap(), &r)
        });
        assert!(rel_err(g.params[0].data(), &fw) < 1e-6, "{shape} weight");
        let fx = numeric_grad(x.data(), 1e-3, |v| weighted_sum(&conv.forward(&with_data(shape, v)).unwrap(), &r));
        assert!(rel_err(g.input.as_ref().unwrap().data(), &fx) < 1e-6, "{shape} input");
    }
}
