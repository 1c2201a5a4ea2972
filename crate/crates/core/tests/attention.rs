mod common;

use common::{max_abs_diff, naive_attention, naive_conv3d, numeric_grad, rel_err, rows, uniform};
use proptest::prelude::*;
use resattnet::attention::SelfAttention3d;
use resattnet::blocks::ResidualBlock;
use resattnet::layers::{BatchNorm3d, Mode};
use resattnet::{Shape, Tensor};

fn channels_by_space(x: &Tensor<f64>, n: usize) -> Vec<Vec<f64>> {
    let s = x.shape();
    (0..s.c).map(|c| x.channel(n, c).to_vec()).collect()
}

fn randomized(c: usize, c_attn: usize, seed: u64) -> SelfAttention3d<f64> {
    let mut att = SelfAttention3d::<f64>::with_bottleneck(c, c_attn, seed).unwrap();
    att.w_f = uniform(att.w_f.shape(), seed + 1);
    att.w_g = uniform(att.w_g.shape(), seed + 2);
    att.w_h = uniform(att.w_h.shape(), seed + 3);
    att.w_v = uniform(att.w_v.shape(), seed + 4);
    att
}

#[test]
fn forward_matches_double_loop_oracle() {
    let x = uniform(Shape::new(1, 2, 2, 2, 2), 1);
    let att = randomized(2, 1, 10);
    let (o, maps) = att.forward(&x).unwrap();
    let (want_o, want_beta) = naive_attention(&channels_by_space(&x, 0), &rows(&att.w_f), &rows(&att.w_g), &rows(&att.w_h), &rows(&att.w_v));
    assert!(max_abs_diff(o.data(), &want_o.concat()) < 1e-10);
    assert!(max_abs_diff(&maps[0].a.data, &want_beta.concat()) < 1e-10);
}

#[test]
fn gradients_match_finite_differences() {
    let x = uniform(Shape::new(1, 2, 2, 2, 2), 2);
    let att = randomized(2, 2, 20);
    let (o, _) = att.forward(&x).unwrap();
    let r = uniform(o.shape(), 3);
    let g = att.backward(&x, &r).unwrap();
    let loss = |a: &SelfAttention3d<f64>, x: &Tensor<f64>| -> f64 {
        a.forward(x).unwrap().0.data().iter().zip(r.data()).map(|(p, q)| p * q).sum()
    };
    let fx = numeric_grad(x.data(), 1e-5, |v| loss(&att, &Tensor::from_vec(x.shape(), v.to_vec()).unwrap()));
    assert!(rel_err(g.input.as_ref().unwrap().data(), &fx) < 1e-6);
    type Slot = fn(&mut SelfAttention3d<f64>) -> &mut Tensor<f64>;
    let slots: [Slot; 4] = [|a| &mut a.w_f, |a| &mut a.w_g, |a| &mut a.w_h, |a| &mut a.w_v];
    for (i, slot) in slots.iter().enumerate() {
        let mut base = att.clone();
        let w = slot(&mut base).clone();
        let fw = numeric_grad(w.data(), 1e-5, |v| {
            let mut a = att.clone();
            *slot(&mut a) = Tensor::from_vec(w.shape(), v.to_vec()).unwrap();
            loss(&a, &x)
        });
        assert!(rel_err(g.params[i].data(), &fw) < 1e-6, "parameter {i}");
    }
}

fn conv_bn_relu_oracle(x: &Tensor<f64>, conv: &resattnet::layers::Conv3d<f64>, bn: &BatchNorm3d<f64>) -> Tensor<f64> {
    let (s, z) = naive_conv3d(x, &conv.weight, conv.bias.data(), conv.stride, conv.padding);
    let per = s.spatial_len();
    let y: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / per) % s.c;
            let norm = (v - bn.running_mean.data()[c]) / (bn.running_var.data()[c] + bn.eps).sqrt();
            (bn.gamma.data()[c] * norm + bn.beta.data()[c]).max(0.0)
        })
        .collect();
    Tensor::from_vec(s, y).unwrap()
}

#[test]
fn unit_gamma_block_is_residual_plus_attention() {
    let x = uniform(Shape::new(1, 3, 3, 3, 3), 4);
    let mut block = ResidualBlock::<f64>::new(3, 3, 1, true, |s| s.len() as u64 * 31).unwrap();
    for (i, bn) in [&mut block.conv1.bn, &mut block.conv2.bn].into_iter().enumerate() {
        bn.running_mean = uniform(Shape::vector(3), 40 + i as u64).scale(0.1);
        bn.running_var = uniform(Shape::vector(3), 50 + i as u64).map(|v| 1.0 + 0.5 * v);
        bn.gamma = uniform(Shape::vector(3), 60 + i as u64).map(|v| 1.0 + 0.3 * v);
    }
    let mut att = randomized(3, 1, 70);
    att.set_gamma(1.0);
    block.attention = Some(att.clone());
    let (y, _) = block.forward(&x, Mode::Eval).unwrap();

    let h = conv_bn_relu_oracle(&x, &block.conv1.conv, &block.conv1.bn);
    let r = conv_bn_relu_oracle(&h, &block.conv2.conv, &block.conv2.bn);
    let (o, _) = naive_attention(&channels_by_space(&r, 0), &rows(&att.w_f), &rows(&att.w_g), &rows(&att.w_h), &rows(&att.w_v));
    let want: Vec<f64> = x.data().iter().zip(r.data()).zip(o.concat()).map(|((a, b), c)| a + b + c).collect();
    assert!(max_abs_diff(y.data(), &want) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn attention_columns_are_distributions(
        c in 1usize..9, d in 1usize..4, h in 1usize..4, w in 1usize..4, n in 1usize..3,
        scale in 0.1f64..20.0, seed in any::<u64>(),
    ) {
        let x = uniform(Shape::new(n, c, d, h, w), seed).scale(scale);
        let att = randomized(c, (c / 2).max(1), seed ^ 0x55);
        let (_, maps) = att.forward(&x).unwrap();
        for m in &maps {
            let a = &m.a;
            prop_assert!(a.data.iter().all(|&v| v >= 0.0));
            for j in 0..a.cols {
                let col: f64 = (0..a.rows).map(|i| a.get(i, j)).sum();
                prop_assert!((col - 1.0).abs() < 1e-6);
            }
        }
    }
}
