use super::{LayerGradients, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{dot, Element, Init, Shape, Tensor};

/// Fully connected layer over flattened per-sample features.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// (out, in)
    pub weight: Tensor<T>,
    /// (out)
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, seed: u64) -> Result<Self> {
        let weight = Tensor::create(
            Shape::matrix(out_features, in_features),
            Init::Normal {
                seed,
                mean: 0.0,
                std: (2.0 / in_features.max(1) as f64).sqrt(),
            },
        )?;
        Ok(Linear {
            weight,
            bias: Tensor::zeros(Shape::vector(out_features)),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n
    }

    fn features_of(&self, x: &Tensor<T>) -> Result<usize> {
        let s = x.shape();
        let f = s.c * s.spatial_len();
        if f != self.in_features() {
            return Err(Error::DimensionMismatch {
                op: "fc",
                detail: format!("input {s} has {f} features per sample, layer expects {}", self.in_features()),
            });
        }
        Ok(f)
    }

    /// Returns logits shaped (N, out, 1, 1, 1).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.features_of(x)?;
        let n = x.shape().n;
        let k = self.out_features();
        let mut out = Tensor::zeros(Shape::matrix(n, k));
        for i in 0..n {
            let row = &x.data()[i * f..(i + 1) * f];
            for j in 0..k {
                let w = &self.weight.data()[j * f..(j + 1) * f];
                out.data_mut()[i * k + j] = dot(w, row) + self.bias.data()[j];
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LayerGradients<T>> {
        let f = self.features_of(x)?;
        let n = x.shape().n;
        let k = self.out_features();
        if grad_out.shape() != Shape::matrix(n, k) {
            return Err(Error::ShapeMismatch {
                op: "fc_backward",
                left: grad_out.shape(),
                right: Shape::matrix(n, k),
            });
        }
        let g = grad_out.data();
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = Tensor::zeros(self.bias.shape());
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let row = &x.data()[i * f..(i + 1) * f];
            for j in 0..k {
                let gv = g[i * k + j];
                db.data_mut()[j] += gv;
                crate::tensor::axpy(&mut dw.data_mut()[j * f..(j + 1) * f], gv, row);
                let w = &self.weight.data()[j * f..(j + 1) * f];
                crate::tensor::axpy(&mut dx.data_mut()[i * f..(i + 1) * f], gv, w);
            }
        }
        Ok(LayerGradients {
            params: vec![dw, db],
            input: Some(dx),
        })
    }
}

impl<T: Element> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn param_names(&self) -> Vec<&'static str> {
        vec!["weight", "bias"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_zero_input() {
        let mut fc = Linear::<f64>::new(3, 3, 0).unwrap();
        fc.weight = Tensor::zeros(Shape::matrix(3, 3));
        for i in 0..3 {
            fc.weight.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1, 1), vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(fc.forward(&x).unwrap().data(), x.data());

        let fc = Linear::<f64> {
            bias: Tensor::from_vec(Shape::vector(2), vec![0.1, -0.3]).unwrap(),
            ..Linear::new(4, 2, 1).unwrap()
        };
        let zero = Tensor::zeros(Shape::new(2, 1, 1, 2, 2));
        assert_eq!(fc.forward(&zero).unwrap().data(), &[0.1, -0.3, 0.1, -0.3]);
    }

    #[test]
    fn feature_mismatch_is_error() {
        let fc = Linear::<f32>::new(4, 2, 0).unwrap();
        assert!(fc.forward(&Tensor::zeros(Shape::new(1, 3, 1, 1, 1))).is_err());
    }
}
