//! Central finite-difference checks of every backward pass, in f64.
//!
//! Each case projects a layer's output onto a fixed random tensor to get a
//! scalar loss, then compares the analytic gradient of every parameter and
//! the input against `(L(x + h) - L(x - h)) / 2h` on a seeded sample of
//! entries. The reported error is
//! `max|a - n| / max(max|a|, max|n|, 1e-12)` over all sampled entries.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::SelfAttention3d;
use crate::error::Result;
use crate::layers::{softmax_cross_entropy, BatchNorm3d, Conv3d, Linear, MaxPool3d, Mode};
use crate::model::{param_seed, ArchitectureSpec, Model};
use crate::tensor::{Init, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Entries checked per tensor (all of them when the tensor is smaller).
    pub samples_per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            samples_per_tensor: 12,
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

/// Deliberate backward-pass defects, to show the harness catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Scales the analytic conv weight gradient by 1.001.
    ConvBackward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub layer: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>14} {:>8}  status\n", "layer", "max_rel_err", "checked");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>14.3e} {:>8}  {}",
                r.layer,
                r.max_rel_error,
                r.checked,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / max_abs(analytic).max(max_abs(numeric)).max(1e-12)
}

type LossFn<'a> = Box<dyn Fn(&[Tensor<f64>]) -> Result<f64> + 'a>;
type GradFn<'a> = Box<dyn Fn(&[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> + 'a>;

/// A scalar function of some tensors and its claimed gradient.
pub struct Case<'a> {
    pub name: String,
    pub vars: Vec<Tensor<f64>>,
    pub loss: LossFn<'a>,
    pub grads: GradFn<'a>,
}

/// Compares analytic and numeric gradients of one case.
pub fn check_case(case: &Case, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let analytic = (case.grads)(&case.vars)?;
    let mut vars = case.vars.clone();
    let (mut a_all, mut n_all) = (Vec::new(), Vec::new());
    for (vi, g) in analytic.iter().enumerate() {
        let len = vars[vi].len();
        let picks = sample(rng, len, cfg.samples_per_tensor.min(len)).into_vec();
        for j in picks {
            let orig = vars[vi].data()[j];
            vars[vi].data_mut()[j] = orig + cfg.step;
            let plus = (case.loss)(&vars)?;
            vars[vi].data_mut()[j] = orig - cfg.step;
            let minus = (case.loss)(&vars)?;
            vars[vi].data_mut()[j] = orig;
            a_all.push(g.data()[j]);
            n_all.push((plus - minus) / (2.0 * cfg.step));
        }
    }
    let err = relative_error(&a_all, &n_all);
    Ok(GradcheckRow {
        layer: case.name.clone(),
        max_rel_error: err,
        checked: a_all.len(),
        passed: err < cfg.tolerance,
    })
}

fn normal(shape: Shape, seed: u64, std: f64) -> Tensor<f64> {
    Tensor::create(shape, Init::Normal { seed, mean: 0.0, std }).expect("valid shape")
}

fn projection(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.dot(r).expect("projection shapes agree")
}

fn conv_case<'a>(name: &str, stride: usize, seed: u64, fault: Fault) -> Case<'a> {
    let x = normal(Shape::new(2, 2, 5, 6, 7), param_seed(seed, name), 1.0);
    let w = normal(Shape::new(3, 2, 3, 3, 3), param_seed(seed, &format!("{name}.w")), 0.3);
    let b = normal(Shape::vector(3), param_seed(seed, &format!("{name}.b")), 0.3);
    let out = Conv3d::from_parts(w.clone(), b.clone(), stride, 1)
        .and_then(|c| c.output_shape(x.shape()))
        .expect("fixed geometry is valid");
    let r = normal(out, param_seed(seed, &format!("{name}.r")), 1.0);
    let r2 = r.clone();
    Case {
        name: name.to_string(),
        vars: vec![w, b, x],
        loss: Box::new(move |v| {
            let conv = Conv3d::from_parts(v[0].clone(), v[1].clone(), stride, 1)?;
            Ok(projection(&conv.forward(&v[2])?, &r))
        }),
        grads: Box::new(move |v| {
            let conv = Conv3d::from_parts(v[0].clone(), v[1].clone(), stride, 1)?;
            let mut g = conv.backward(&v[2], &r2, true)?;
            if fault == Fault::ConvBackward {
                g.params[0] = g.params[0].scale(1.001);
            }
            let mut out = g.params;
            out.push(g.input.expect("requested"));
            Ok(out)
        }),
    }
}

fn batchnorm_case<'a>(seed: u64) -> Case<'a> {
    let x = normal(Shape::new(2, 3, 3, 4, 2), param_seed(seed, "bn.x"), 2.0).map(|v| v + 0.5);
    let gamma = normal(Shape::vector(3), param_seed(seed, "bn.gamma"), 1.0);
    let beta = normal(Shape::vector(3), param_seed(seed, "bn.beta"), 1.0);
    let r = normal(x.shape(), param_seed(seed, "bn.r"), 1.0);
    let r2 = r.clone();
    let layer = |v: &[Tensor<f64>]| {
        let mut bn = BatchNorm3d::new(3);
        bn.gamma = v[0].clone();
        bn.beta = v[1].clone();
        bn
    };
    Case {
        name: "batchnorm3d".into(),
        vars: vec![gamma, beta, x],
        loss: Box::new(move |v| Ok(projection(&layer(v).forward(&v[2], Mode::Train)?.0, &r))),
        grads: Box::new(move |v| {
            let bn = layer(v);
            let (_, cache) = bn.forward(&v[2], Mode::Train)?;
            let g = bn.backward(&cache, &r2)?;
            let mut out = g.params;
            out.push(g.input.expect("batchnorm returns an input gradient"));
            Ok(out)
        }),
    }
}

fn linear_case<'a>(seed: u64) -> Case<'a> {
    let x = normal(Shape::new(3, 4, 1, 1, 2), param_seed(seed, "fc.x"), 1.0);
    let w = normal(Shape::matrix(3, 8), param_seed(seed, "fc.w"), 0.5);
    let b = normal(Shape::vector(3), param_seed(seed, "fc.b"), 0.5);
    let r = normal(Shape::matrix(3, 3), param_seed(seed, "fc.r"), 1.0);
    let r2 = r.clone();
    let layer = |v: &[Tensor<f64>]| Linear {
        weight: v[0].clone(),
        bias: v[1].clone(),
    };
    Case {
        name: "fc".into(),
        vars: vec![w, b, x],
        loss: Box::new(move |v| Ok(projection(&layer(v).forward(&v[2])?, &r))),
        grads: Box::new(move |v| {
            let g = layer(v).backward(&v[2], &r2)?;
            let mut out = g.params;
            out.push(g.input.expect("fc returns an input gradient"));
            Ok(out)
        }),
    }
}

fn maxpool_case<'a>(seed: u64) -> Case<'a> {
    // distinct values spaced far beyond the step, so no window has a near tie
    let shape = Shape::new(2, 2, 4, 6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, "pool.x"));
    let perm = sample(&mut rng, shape.numel(), shape.numel()).into_vec();
    let x = Tensor::from_vec(shape, perm.iter().map(|&p| p as f64 * 0.01 - 1.0).collect()).expect("sized");
    let pool = MaxPool3d::default();
    let out = pool.output_shape(shape).expect("fixed geometry is valid");
    let r = normal(out, param_seed(seed, "pool.r"), 1.0);
    let r2 = r.clone();
    Case {
        name: "maxpool3d".into(),
        vars: vec![x],
        loss: Box::new(move |v| Ok(projection(&pool.forward(&v[0])?.0, &r))),
        grads: Box::new(move |v| {
            let (_, cache) = pool.forward(&v[0])?;
            Ok(vec![pool.backward(&cache, &r2)?])
        }),
    }
}

fn softmax_ce_case<'a>(seed: u64) -> Case<'a> {
    let logits = normal(Shape::matrix(5, 3), param_seed(seed, "ce.logits"), 2.0);
    let labels = vec![0, 2, 1, 1, 0];
    let labels2 = labels.clone();
    Case {
        name: "softmax_cross_entropy".into(),
        vars: vec![logits],
        loss: Box::new(move |v| Ok(softmax_cross_entropy(&v[0], &labels)?.0)),
        grads: Box::new(move |v| Ok(vec![softmax_cross_entropy(&v[0], &labels2)?.1])),
    }
}

/// `y = x + gamma * o(x)` with gamma away from zero.
fn attention_case<'a>(seed: u64) -> Case<'a> {
    let x = normal(Shape::new(2, 8, 2, 3, 2), param_seed(seed, "attn.x"), 1.0);
    let proto = SelfAttention3d::<f64>::new(8, param_seed(seed, "attn")).expect("valid channels");
    let mut vars = vec![
        proto.w_f.clone(),
        proto.w_g.clone(),
        proto.w_h.clone(),
        proto.w_v.clone(),
        Tensor::scalar(0.7),
    ];
    vars.push(x.clone());
    let r = normal(x.shape(), param_seed(seed, "attn.r"), 1.0);
    let r2 = r.clone();
    let layer = move |v: &[Tensor<f64>]| {
        let mut a = proto.clone();
        a.w_f = v[0].clone();
        a.w_g = v[1].clone();
        a.w_h = v[2].clone();
        a.w_v = v[3].clone();
        a.gamma = v[4].clone();
        a
    };
    let layer2 = layer.clone();
    Case {
        name: "self_attention".into(),
        vars,
        loss: Box::new(move |v| {
            let a = layer(v);
            let (o, _) = a.forward(&v[5])?;
            let mut y = v[5].clone();
            y.axpy(a.gamma(), &o)?;
            Ok(projection(&y, &r))
        }),
        grads: Box::new(move |v| {
            let a = layer2(v);
            let (o, _) = a.forward(&v[5])?;
            let g = a.backward(&v[5], &r2.scale(a.gamma()))?;
            let mut out = g.params;
            out[4] = Tensor::scalar(r2.dot(&o)?);
            let mut dx = r2.clone();
            dx.add_assign(g.input.as_ref().expect("attention returns an input gradient"))?;
            out.push(dx);
            Ok(out)
        }),
    }
}

/// Whole micro ResAttNet (stem, one block per stage, attention in the last
/// two stages with nonzero gamma, head) under softmax cross-entropy in
/// train mode, on a (2, 1, 8, 8, 8) input.
fn network_case<'a>(seed: u64) -> Result<Case<'a>> {
    let mut spec = ArchitectureSpec::preset("micro-resattnet", 0.125)?;
    // keep 2x2x2 maps in the attention stages so attention is not trivial
    spec.stages[2].stride = 1;
    spec.stages[3].stride = 1;
    let mut model = Model::<f64>::build(&spec, [8, 8, 8], param_seed(seed, "net"))?;
    for (i, a) in model.attention_layers_mut().into_iter().enumerate() {
        a.set_gamma(0.5 + 0.25 * i as f64);
    }
    let x = normal(Shape::new(2, 1, 8, 8, 8), param_seed(seed, "net.x"), 1.0);
    let labels = [0usize, 1];
    let mut vars: Vec<Tensor<f64>> = model.params().into_iter().cloned().collect();
    vars.push(x);
    let with_params = move |v: &[Tensor<f64>]| {
        let mut m = model.clone();
        for (p, src) in m.params_mut().into_iter().zip(v) {
            *p = src.clone();
        }
        m
    };
    let with_params2 = with_params.clone();
    Ok(Case {
        name: "micro_network".into(),
        vars,
        loss: Box::new(move |v| {
            let m = with_params(v);
            let logits = m.forward(v.last().expect("input"), Mode::Train)?;
            Ok(softmax_cross_entropy(&logits, &labels)?.0)
        }),
        grads: Box::new(move |v| {
            let m = with_params2(v);
            let trace = m.forward_trace(v.last().expect("input"), Mode::Train)?;
            let (_, g) = softmax_cross_entropy(trace.logits(), &labels)?;
            let grads = m.backward(&trace, &g, true)?;
            let mut out = grads.params;
            out.push(grads.input.expect("requested"));
            Ok(out)
        }),
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    run_gradcheck_with(cfg, Fault::None)
}

pub fn run_gradcheck_with(cfg: &GradcheckConfig, fault: Fault) -> Result<GradcheckReport> {
    let s = cfg.seed;
    let cases = vec![
        conv_case("conv3d_stride1", 1, s, fault),
        conv_case("conv3d_stride2", 2, s, fault),
        batchnorm_case(s),
        linear_case(s),
        maxpool_case(s),
        softmax_ce_case(s),
        attention_case(s),
        network_case(s)?,
    ];
    let mut rows = Vec::with_capacity(cases.len());
    for case in &cases {
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(s, &case.name));
        rows.push(check_case(case, cfg, &mut rng)?);
    }
    Ok(GradcheckReport {
        seed: s,
        step: cfg.step,
        tolerance: cfg.tolerance,
        passed: rows.iter().all(|r| r.passed),
        rows,
    })
}
