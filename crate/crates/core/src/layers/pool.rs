use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// 3D max pooling with cubic window `kernel` and step `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool3d {
    pub kernel: usize,
    pub stride: usize,
}

impl Default for MaxPool3d {
    fn default() -> Self {
        MaxPool3d { kernel: 2, stride: 2 }
    }
}

/// Flat input index of each output's winning voxel.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub input_shape: Shape,
    pub argmax: Vec<usize>,
}

impl MaxPool3d {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.spatial().iter().any(|&v| v < self.kernel) {
            return Err(Error::InvalidArgument(format!(
                "maxpool3d kernel {} exceeds spatial dims of input {input}",
                self.kernel
            )));
        }
        let out = |v: usize| (v - self.kernel) / self.stride + 1;
        Ok(input.with_spatial([out(input.d), out(input.h), out(input.w)]))
    }

    pub fn forward<T: Element>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache)> {
        let s = x.shape();
        let os = self.output_shape(s)?;
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0usize; os.numel()];
        let (k, st) = (self.kernel, self.stride);
        let mut o = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.spatial_len();
                let vol = x.channel(n, c);
                for od in 0..os.d {
                    for oh in 0..os.h {
                        for ow in 0..os.w {
                            let mut best = T::neg_infinity();
                            let mut best_idx = usize::MAX;
                            // strict '>' keeps the first voxel in scan order on ties
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let i = ((od * st + kd) * s.h + oh * st + kh) * s.w + ow * st + kw;
                                        if vol[i] > best || best_idx == usize::MAX {
                                            best = vol[i];
                                            best_idx = i;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[o] = best;
                            argmax[o] = base + best_idx;
                            o += 1;
                        }
                    }
                }
            }
        }
        Ok((
            out,
            MaxPoolCache {
                input_shape: s,
                argmax,
            },
        ))
    }

    pub fn backward<T: Element>(&self, cache: &MaxPoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.len() != cache.argmax.len() {
            return Err(Error::ShapeMismatch {
                op: "maxpool3d_backward",
                left: grad_out.shape(),
                right: self.output_shape(cache.input_shape)?,
            });
        }
        let mut dx = Tensor::zeros(cache.input_shape);
        let d = dx.data_mut();
        for (&i, &g) in cache.argmax.iter().zip(grad_out.data()) {
            d[i] += g;
        }
        Ok(dx)
    }
}

/// Averages each (n, c) volume to a single value.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let count = T::from_f64(s.spatial_len() as f64);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            out.data_mut()[n * s.c + c] = x.channel(n, c).iter().copied().sum::<T>() / count;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Element>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let expected = Shape::new(input_shape.n, input_shape.c, 1, 1, 1);
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            left: grad_out.shape(),
            right: expected,
        });
    }
    let count = T::from_f64(input_shape.spatial_len() as f64);
    let mut dx = Tensor::zeros(input_shape);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = grad_out.data()[n * input_shape.c + c] / count;
            dx.channel_mut(n, c).fill(g);
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_cell_max() {
        // [[1,2],[3,4]] in every depth slice, second slice offset by 4
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2, 2), vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let (y, cache) = MaxPool3d::default().forward(&x).unwrap();
        assert_eq!(y.data(), &[8.0]);
        assert_eq!(cache.argmax, vec![7]);
    }

    #[test]
    fn constant_volume_routes_to_first_voxel() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 4, 4, 4), 2.0);
        let pool = MaxPool3d::default();
        let (y, cache) = pool.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
        let g = Tensor::full(y.shape(), 1.0);
        let dx = pool.backward(&cache, &g).unwrap();
        for d in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    let expected = if d % 2 == 0 && h % 2 == 0 && w % 2 == 0 { 1.0 } else { 0.0 };
                    assert_eq!(dx.at(0, 0, d, h, w), expected);
                }
            }
        }
    }

    #[test]
    fn floor_halving_and_too_small_error() {
        let pool = MaxPool3d::default();
        assert_eq!(pool.output_shape(Shape::new(1, 1, 5, 7, 2)).unwrap().spatial(), [2, 3, 1]);
        assert!(pool.output_shape(Shape::new(1, 1, 1, 4, 4)).is_err());
    }

    #[test]
    fn global_pool_roundtrip() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1, 2), vec![1., 3., 2., 6.]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.0, 4.0]);
        let g = Tensor::from_vec(Shape::new(1, 2, 1, 1, 1), vec![2.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool_backward(x.shape(), &g).unwrap().data(), &[1., 1., 2., 2.]);
    }
}
