#![allow(dead_code)]

use resattnet::{Init, Shape, Tensor};

pub fn uniform(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    max_abs_diff(a, b) / norm(a).max(norm(b)).max(1e-12)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Direct seven-deep loop convolution, zero padding, NCDHW.
pub fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> (Shape, Vec<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.d;
    let out_len = |n: usize| (n + 2 * pad - k) / stride + 1;
    let os = Shape::new(xs.n, ws.n, out_len(xs.d), out_len(xs.h), out_len(xs.w));
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..os.n {
        for co in 0..os.c {
            for od in 0..os.d {
                for oh in 0..os.h {
                    for ow in 0..os.w {
                        let mut acc = b[co];
                        for ci in 0..xs.c {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (od * stride + kd) as isize - pad as isize;
                                        let ih = (oh * stride + kh) as isize - pad as isize;
                                        let iw = (ow * stride + kw) as isize - pad as isize;
                                        if id < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                        if id >= xs.d || ih >= xs.h || iw >= xs.w {
                                            continue;
                                        }
                                        acc += x.at(n, ci, id, ih, iw) * w.at(co, ci, kd, kh, kw);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    (os, out)
}

/// Attention output for one sample: materializes f, g, h and loops over
/// every (i, j) pair. `x` is C × N, weights are row-major.
pub fn naive_attention(x: &[Vec<f64>], wf: &[Vec<f64>], wg: &[Vec<f64>], wh: &[Vec<f64>], wv: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = x[0].len();
    let project = |w: &[Vec<f64>]| -> Vec<Vec<f64>> {
        w.iter()
            .map(|row| (0..n).map(|j| row.iter().zip(x).map(|(a, xc)| a * xc[j]).sum()).collect())
            .collect()
    };
    let (f, g, h) = (project(wf), project(wg), project(wh));
    // beta[i][j]: weight of location i when producing location j
    let mut beta = vec![vec![0.0; n]; n];
    for j in 0..n {
        let s: Vec<f64> = (0..n).map(|i| (0..f.len()).map(|c| f[c][i] * g[c][j]).sum()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        for i in 0..n {
            beta[i][j] = (s[i] - m).exp() / z;
        }
    }
    let mut o = vec![vec![0.0; n]; wv.len()];
    for j in 0..n {
        let zj: Vec<f64> = (0..h.len()).map(|c| (0..n).map(|i| beta[i][j] * h[c][i]).sum()).collect();
        for (co, row) in wv.iter().enumerate() {
            o[co][j] = row.iter().zip(&zj).map(|(a, b)| a * b).sum();
        }
    }
    (o, beta)
}

/// Rows of a (rows, cols, 1, 1, 1) weight tensor.
pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let s = t.shape();
    t.data().chunks(s.numel() / s.n).map(|r| r.to_vec()).collect()
}

/// Pair-counting AUC: fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn pair_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

use resattnet::layers::Mode;
use resattnet::model::{BlockKind, ConvSpec, Downsample, StageSpec};
use resattnet::{ArchitectureSpec, Model};

/// Largest relative logit difference between ResAttNet-18 with every gamma
/// at zero and ResNet-18 carrying the same weights, over `inputs` inputs.
pub fn gamma_zero_logit_gap(inputs: usize, dims: [usize; 3]) -> f64 {
    let plain = Model::<f64>::build(&ArchitectureSpec::preset("resnet18", 1.0).unwrap(), dims, 3).unwrap();
    let mut att = Model::<f64>::build(&ArchitectureSpec::preset("resattnet18", 1.0).unwrap(), dims, 99).unwrap();
    let copied = att.copy_shared_from(&plain);
    assert_eq!(copied, plain.state_tensors().len());
    assert!(att.attention_layers_mut().iter().all(|a| a.gamma() == 0.0));
    let mut worst = 0.0f64;
    for i in 0..inputs {
        let x = uniform(Shape::new(1, 1, dims[0], dims[1], dims[2]), 1000 + i as u64);
        let mode = if i % 2 == 0 { Mode::Eval } else { Mode::Train };
        let mut batch = x.clone();
        if mode == Mode::Train {
            // batch statistics need more than one value per channel at 1³
            batch = Tensor::stack(&[&x, &uniform(x.shape(), 2000 + i as u64)]).unwrap();
        }
        let a = att.forward(&batch, mode).unwrap();
        let b = plain.forward(&batch, mode).unwrap();
        worst = worst.max(rel_err(a.data(), b.data()));
    }
    worst
}

/// Small residual-attention network whose stem has three channels.
pub fn three_channel_model(seed: u64) -> Model<f64> {
    let spec = ArchitectureSpec {
        name: "probe".into(),
        in_channels: 1,
        stem: vec![ConvSpec { channels: 3, kernel: 3, stride: 1 }],
        stages: vec![StageSpec {
            block: BlockKind::ResAtt,
            blocks: 1,
            channels: 4,
            stride: 2,
            downsample: Downsample::StridedConv,
        }],
        num_classes: 2,
    };
    let mut m = Model::<f64>::build(&spec, [6, 6, 6], seed).unwrap();
    for a in m.attention_layers_mut() {
        a.set_gamma(0.8);
    }
    m
}

/// Grad-CAM map built with explicit loops from finite-difference
/// derivatives of the class logit with respect to the layer activations.
pub fn gradcam_oracle(model: &Model<f64>, x: &Tensor<f64>, class: usize, layer: &str) -> Vec<f64> {
    let idx = model.layer_index(layer).unwrap();
    let acts = model.activations_at(x, layer, Mode::Eval).unwrap();
    let s = acts.shape();
    let dlogit = numeric_grad(acts.data(), 1e-5, |v| {
        let a = Tensor::from_vec(s, v.to_vec()).unwrap();
        model.forward_from(idx, &a, Mode::Eval).unwrap().data()[class]
    });
    let z = s.spatial_len();
    let mut map = vec![0.0; z];
    for k in 0..s.c {
        let mut alpha = 0.0;
        for v in 0..z {
            alpha += dlogit[k * z + v];
        }
        alpha /= z as f64;
        for v in 0..z {
            map[v] += alpha * acts.data()[k * z + v];
        }
    }
    map.into_iter().map(|m| m.max(0.0)).collect()
}
