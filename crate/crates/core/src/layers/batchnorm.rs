use super::{LayerGradients, Mode, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{sum_and_dot_f64, sum_f64_by, Element, Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over (N, D, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub mode: Mode,
    pub x_hat: Tensor<T>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

impl<T: Element> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        let v = Shape::vector(channels);
        BatchNorm3d {
            gamma: Tensor::full(v, T::one()),
            beta: Tensor::zeros(v),
            running_mean: Tensor::zeros(v),
            running_var: Tensor::full(v, T::one()),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().c != self.channels() {
            return Err(Error::DimensionMismatch {
                op: "batchnorm3d",
                detail: format!("input {} has {} channels, layer has {}", x.shape(), x.shape().c, self.channels()),
            });
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("batchnorm eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        self.check_input(x)?;
        let s = x.shape();
        let channels = s.c;
        let count = s.n * s.spatial_len();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        let mut var_unbiased = vec![0.0; channels];
        match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batchnorm3d in train mode needs >= 2 values per channel, input {s} has {count}"
                    )));
                }
                for c in 0..channels {
                    let sum: f64 = (0..s.n).map(|n| sum_f64_by(x.channel(n, c), |v| v)).sum();
                    let mu = sum / count as f64;
                    let sq: f64 = (0..s.n)
                        .map(|n| {
                            sum_f64_by(x.channel(n, c), |v| {
                                let d = v - mu;
                                d * d
                            })
                        })
                        .sum();
                    mean[c] = mu;
                    var[c] = sq / count as f64;
                    var_unbiased[c] = sq / (count - 1) as f64;
                }
            }
            Mode::Eval => {
                for c in 0..channels {
                    mean[c] = self.running_mean.data()[c].as_f64();
                    var[c] = self.running_var.data()[c].as_f64();
                }
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(s);
        let mut y = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..channels {
                let g = self.gamma.data()[c];
                let b = self.beta.data()[c];
                let mu = mean[c];
                let is = inv_std[c];
                let src = x.channel(n, c);
                let xh = x_hat.channel_mut(n, c);
                for (h, v) in xh.iter_mut().zip(src) {
                    *h = T::from_f64((v.as_f64() - mu) * is);
                }
                for (o, &h) in y.channel_mut(n, c).iter_mut().zip(x_hat.channel(n, c)) {
                    *o = g * h + b;
                }
            }
        }
        y.debug_check_finite("batchnorm3d_forward");
        Ok((
            y,
            BatchNormCache {
                mode,
                x_hat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
            },
        ))
    }

    /// Folds a train-mode forward's batch statistics into the running ones.
    pub fn update_running_stats(&mut self, cache: &BatchNormCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = T::from_f64((1.0 - m) * rm.as_f64() + m * cache.batch_mean[c]);
            let rv = &mut self.running_var.data_mut()[c];
            *rv = T::from_f64((1.0 - m) * rv.as_f64() + m * cache.batch_var_unbiased[c]);
        }
    }

    /// Train-mode forward that also updates the running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let (y, cache) = self.forward(x, Mode::Train)?;
        self.update_running_stats(&cache);
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &BatchNormCache<T>, grad_out: &Tensor<T>) -> Result<LayerGradients<T>> {
        let s = cache.x_hat.shape();
        if grad_out.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "batchnorm3d_backward",
                left: grad_out.shape(),
                right: s,
            });
        }
        let channels = s.c;
        let count = (s.n * s.spatial_len()) as f64;
        let mut d_gamma = Tensor::zeros(self.gamma.shape());
        let mut d_beta = Tensor::zeros(self.beta.shape());
        let mut dx = Tensor::zeros(s);
        for c in 0..channels {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for n in 0..s.n {
                let (a, b) = sum_and_dot_f64(grad_out.channel(n, c), cache.x_hat.channel(n, c));
                sum_dy += a;
                sum_dy_xhat += b;
            }
            d_gamma.data_mut()[c] = T::from_f64(sum_dy_xhat);
            d_beta.data_mut()[c] = T::from_f64(sum_dy);
            let scale = self.gamma.data()[c].as_f64() * cache.inv_std[c];
            for n in 0..s.n {
                let g = grad_out.channel(n, c);
                let h = cache.x_hat.channel(n, c);
                let out = dx.channel_mut(n, c);
                match cache.mode {
                    Mode::Train => {
                        let (mean_dy, mean_dy_xhat) = (sum_dy / count, sum_dy_xhat / count);
                        for ((o, &gv), &hv) in out.iter_mut().zip(g).zip(h) {
                            *o = T::from_f64(scale * (gv.as_f64() - mean_dy - hv.as_f64() * mean_dy_xhat));
                        }
                    }
                    Mode::Eval => {
                        for i in 0..out.len() {
                            out[i] = T::from_f64(scale * g[i].as_f64());
                        }
                    }
                }
            }
        }
        Ok(LayerGradients {
            params: vec![d_gamma, d_beta],
            input: Some(dx),
        })
    }

    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

impl<T: Element> Parameterized<T> for BatchNorm3d<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn param_names(&self) -> Vec<&'static str> {
        vec!["gamma", "beta"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let bn = BatchNorm3d::<f64>::new(3);
        let x = Tensor::create(Shape::new(2, 3, 3, 4, 2), Init::Normal { seed: 9, mean: 4.0, std: 3.0 }).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.channel(n, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn eval_mode_constant_input_gives_beta() {
        let mut bn = BatchNorm3d::<f64>::new(2);
        bn.running_mean = Tensor::full(Shape::vector(2), 5.0);
        bn.running_var = Tensor::full(Shape::vector(2), 1.0);
        bn.beta = Tensor::from_vec(Shape::vector(2), vec![0.25, -1.5]).unwrap();
        let x = Tensor::full(Shape::new(1, 2, 2, 2, 2), 5.0);
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        assert!(y.channel(0, 0).iter().all(|&v| v == 0.25));
        assert!(y.channel(0, 1).iter().all(|&v| v == -1.5));
    }

    #[test]
    fn single_value_channel_rejected_in_train_mode() {
        let bn = BatchNorm3d::<f32>::new(1);
        let x = Tensor::full(Shape::new(1, 1, 1, 1, 1), 1.0);
        assert!(bn.forward(&x, Mode::Train).is_err());
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut bn = BatchNorm3d::<f64>::new(1);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward_train(&x).unwrap();
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(bn.running_var.data()[0] >= 0.0);
    }
}
