//! Self-attention over the spatial locations of a 3D feature map.
//!
//! Features of one sample form a `C x N` matrix (N = D·H·W locations, which
//! is exactly the NCDHW memory of that sample). Keys, queries and values are
//! 1×1×1 convolutions, i.e. channel-mixing matrices:
//!
//! ```text
//! f = W_f x,  g = W_g x,  h = W_h x                 (C_attn x N each)
//! a[i][j] = exp(f_i · g_j) / Σ_i exp(f_i · g_j)     (column-stochastic)
//! o_j     = W_v Σ_i a[i][j] h_i                     (C x N)
//! ```
//!
//! The blending scalar `gamma` lives here but is applied by the residual
//! block: `y = x + r(x) + gamma * o(r(x))`.

use crate::error::{Error, Result};
use crate::layers::{LayerGradients, Parameterized};
use crate::tensor::{matmul, Element, Init, Matrix, Shape, Tensor};

/// Bottleneck width for keys/queries/values: `C / 8`, at least 1.
pub fn attention_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention3d<T> {
    /// (C_attn, C, 1, 1, 1)
    pub w_f: Tensor<T>,
    pub w_g: Tensor<T>,
    pub w_h: Tensor<T>,
    /// (C, C_attn, 1, 1, 1)
    pub w_v: Tensor<T>,
    /// Scalar blend weight, starts at exactly 0.
    pub gamma: Tensor<T>,
}

/// Column-stochastic attention matrix of one sample, `N x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    pub a: Matrix<T>,
}

struct SampleState<T> {
    x: Matrix<T>,
    f: Matrix<T>,
    g: Matrix<T>,
    h: Matrix<T>,
    a: Matrix<T>,
    z: Matrix<T>,
}

fn as_matrix<T: Element>(t: &Tensor<T>) -> Matrix<T> {
    let s = t.shape();
    Matrix {
        rows: s.n,
        cols: s.c,
        data: t.data().to_vec(),
    }
}

fn add_into<T: Element>(acc: &mut [T], m: &Matrix<T>) {
    for (a, &v) in acc.iter_mut().zip(&m.data) {
        *a += v;
    }
}

/// Softmax down each column, max-shifted.
fn column_softmax<T: Element>(s: &Matrix<T>) -> Matrix<T> {
    let (n_i, n_j) = (s.rows, s.cols);
    let mut max = vec![f64::NEG_INFINITY; n_j];
    for i in 0..n_i {
        for (m, v) in max.iter_mut().zip(s.row(i)) {
            *m = m.max(v.as_f64());
        }
    }
    let mut e = vec![0.0f64; n_i * n_j];
    let mut z = vec![0.0f64; n_j];
    for i in 0..n_i {
        for j in 0..n_j {
            let v = (s.data[i * n_j + j].as_f64() - max[j]).exp();
            e[i * n_j + j] = v;
            z[j] += v;
        }
    }
    Matrix {
        rows: n_i,
        cols: n_j,
        data: e
            .iter()
            .enumerate()
            .map(|(k, v)| T::from_f64(v / z[k % n_j]))
            .collect(),
    }
}

impl<T: Element> SelfAttention3d<T> {
    /// Kaiming-style weights with the default `C / 8` bottleneck; gamma = 0.
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        Self::with_bottleneck(channels, attention_channels(channels), seed)
    }

    pub fn with_bottleneck(channels: usize, c_attn: usize, seed: u64) -> Result<Self> {
        if channels == 0 || c_attn == 0 {
            return Err(Error::InvalidArgument(format!(
                "self-attention needs positive channels (C={channels}, C_attn={c_attn})"
            )));
        }
        let init = |rows: usize, cols: usize, salt: u64| {
            Tensor::create(
                Shape::matrix(rows, cols),
                Init::Normal {
                    seed: seed.wrapping_add(salt),
                    mean: 0.0,
                    std: (1.0 / cols as f64).sqrt(),
                },
            )
        };
        Ok(SelfAttention3d {
            w_f: init(c_attn, channels, 1)?,
            w_g: init(c_attn, channels, 2)?,
            w_h: init(c_attn, channels, 3)?,
            w_v: init(channels, c_attn, 4)?,
            gamma: Tensor::scalar(T::zero()),
        })
    }

    pub fn channels(&self) -> usize {
        self.w_f.shape().c
    }

    pub fn attn_channels(&self) -> usize {
        self.w_f.shape().n
    }

    pub fn gamma(&self) -> T {
        self.gamma.data()[0]
    }

    pub fn set_gamma(&mut self, value: T) {
        self.gamma.data_mut()[0] = value;
    }

    fn check(&self, feat: &Tensor<T>) -> Result<()> {
        if feat.shape().c != self.channels() {
            return Err(Error::DimensionMismatch {
                op: "self_attention",
                detail: format!(
                    "feature map {} has {} channels, attention expects {}",
                    feat.shape(),
                    feat.shape().c,
                    self.channels()
                ),
            });
        }
        Ok(())
    }

    fn sample_state(&self, feat: &Tensor<T>, n: usize) -> Result<SampleState<T>> {
        let s = feat.shape();
        let len = s.c * s.spatial_len();
        let x = Matrix::from_vec(s.c, s.spatial_len(), feat.data()[n * len..(n + 1) * len].to_vec())?;
        let f = matmul(&as_matrix(&self.w_f), &x)?;
        let g = matmul(&as_matrix(&self.w_g), &x)?;
        let h = matmul(&as_matrix(&self.w_h), &x)?;
        let logits = matmul(&f.transpose(), &g)?;
        let a = column_softmax(&logits);
        let z = matmul(&h, &a)?;
        Ok(SampleState { x, f, g, h, a, z })
    }

    /// Attention output `o` (same shape as `feat`) and one map per sample.
    pub fn forward(&self, feat: &Tensor<T>) -> Result<(Tensor<T>, Vec<AttentionMap<T>>)> {
        self.check(feat)?;
        let s = feat.shape();
        let mut out = Vec::with_capacity(feat.len());
        let mut maps = Vec::with_capacity(s.n);
        let w_v = as_matrix(&self.w_v);
        for n in 0..s.n {
            let st = self.sample_state(feat, n)?;
            let o = matmul(&w_v, &st.z)?;
            out.extend_from_slice(&o.data);
            maps.push(AttentionMap { a: st.a });
        }
        let out = Tensor::from_vec(s, out)?;
        out.debug_check_finite("self_attention_forward");
        Ok((out, maps))
    }

    /// Gradients for (w_f, w_g, w_h, w_v, gamma) and the input. The gamma
    /// slot is zero: gamma does not enter `o`, the residual block fills it.
    pub fn backward(&self, feat: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LayerGradients<T>> {
        self.check(feat)?;
        let s = feat.shape();
        if grad_out.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "self_attention_backward",
                left: grad_out.shape(),
                right: s,
            });
        }
        let locs = s.spatial_len();
        let w_f = as_matrix(&self.w_f);
        let w_g = as_matrix(&self.w_g);
        let w_h = as_matrix(&self.w_h);
        let w_v = as_matrix(&self.w_v);
        let (w_f_t, w_g_t, w_h_t, w_v_t) = (w_f.transpose(), w_g.transpose(), w_h.transpose(), w_v.transpose());
        let mut d_wf = Tensor::zeros(self.w_f.shape());
        let mut d_wg = Tensor::zeros(self.w_g.shape());
        let mut d_wh = Tensor::zeros(self.w_h.shape());
        let mut d_wv = Tensor::zeros(self.w_v.shape());
        let mut dx = Vec::with_capacity(feat.len());
        let per = s.c * locs;
        for n in 0..s.n {
            let st = self.sample_state(feat, n)?;
            let d_o = Matrix::from_vec(s.c, locs, grad_out.data()[n * per..(n + 1) * per].to_vec())?;
            add_into(d_wv.data_mut(), &matmul(&d_o, &st.z.transpose())?);
            let d_z = matmul(&w_v_t, &d_o)?;
            let d_h = matmul(&d_z, &st.a.transpose())?;
            let d_a = matmul(&st.h.transpose(), &d_z)?;
            // softmax Jacobian, column by column
            let mut col_dot = vec![T::zero(); locs];
            for i in 0..locs {
                for j in 0..locs {
                    col_dot[j] += st.a.get(i, j) * d_a.get(i, j);
                }
            }
            let mut d_s = Matrix::zeros(locs, locs);
            for i in 0..locs {
                for j in 0..locs {
                    d_s.set(i, j, st.a.get(i, j) * (d_a.get(i, j) - col_dot[j]));
                }
            }
            let d_f = matmul(&st.g, &d_s.transpose())?;
            let d_g = matmul(&st.f, &d_s)?;
            let x_t = st.x.transpose();
            add_into(d_wf.data_mut(), &matmul(&d_f, &x_t)?);
            add_into(d_wg.data_mut(), &matmul(&d_g, &x_t)?);
            add_into(d_wh.data_mut(), &matmul(&d_h, &x_t)?);
            let mut d_x = matmul(&w_f_t, &d_f)?;
            add_into(&mut d_x.data, &matmul(&w_g_t, &d_g)?);
            add_into(&mut d_x.data, &matmul(&w_h_t, &d_h)?);
            dx.extend_from_slice(&d_x.data);
        }
        Ok(LayerGradients {
            params: vec![d_wf, d_wg, d_wh, d_wv, Tensor::zeros(Shape::scalar())],
            input: Some(Tensor::from_vec(s, dx)?),
        })
    }
}

impl<T: Element> Parameterized<T> for SelfAttention3d<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.w_f, &self.w_g, &self.w_h, &self.w_v, &self.gamma]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w_f, &mut self.w_g, &mut self.w_h, &mut self.w_v, &mut self.gamma]
    }

    fn param_names(&self) -> Vec<&'static str> {
        vec!["w_f", "w_g", "w_h", "w_v", "gamma"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Init::Normal { seed, mean: 0.0, std: 1.0 }).unwrap()
    }

    #[test]
    fn bottleneck_width() {
        assert_eq!(attention_channels(4), 1);
        assert_eq!(attention_channels(64), 8);
        assert_eq!(attention_channels(70), 8);
        let att = SelfAttention3d::<f32>::new(16, 0).unwrap();
        assert_eq!(att.gamma(), 0.0);
        assert_eq!(att.w_v.shape(), Shape::matrix(16, 2));
    }

    #[test]
    fn singleton_map_is_one() {
        let att = SelfAttention3d::<f64>::new(3, 5).unwrap();
        let x = random(Shape::new(1, 3, 1, 1, 1), 1);
        let (o, maps) = att.forward(&x).unwrap();
        assert_eq!(maps[0].a.data, vec![1.0]);
        // o = W_v (W_h x)
        let h = matmul(&as_matrix(&att.w_h), &as_matrix(&x).transpose()).unwrap();
        let expected = matmul(&as_matrix(&att.w_v), &h).unwrap();
        for (a, b) in o.data().iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_keys_give_uniform_map() {
        let mut att = SelfAttention3d::<f64>::new(2, 9).unwrap();
        att.w_f = Tensor::zeros(att.w_f.shape());
        att.w_g = Tensor::zeros(att.w_g.shape());
        let x = random(Shape::new(1, 2, 2, 1, 2), 4);
        let (o, maps) = att.forward(&x).unwrap();
        assert!(maps[0].a.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        // every location receives W_v (mean_i h_i)
        for c in 0..2 {
            let ch = o.channel(0, c);
            assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let att = SelfAttention3d::<f64>::new(4, 0).unwrap();
        assert!(att.forward(&random(Shape::new(1, 3, 2, 2, 2), 0)).is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let att = SelfAttention3d::<f64>::new(2, 3).unwrap();
        let x = random(Shape::new(1, 2, 2, 2, 2), 8);
        let grads = att.backward(&x, &Tensor::zeros(x.shape())).unwrap();
        assert!(grads.params.iter().all(|t| t.max_abs() == 0.0));
        assert_eq!(grads.input.unwrap().max_abs(), 0.0);
    }
}
