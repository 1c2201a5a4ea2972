//! Composite blocks: conv-BN-ReLU units and the residual block with an
//! optional self-attention branch on the end of its residual function.

use crate::attention::SelfAttention3d;
use crate::error::Result;
use crate::layers::{relu_backward, BatchNorm3d, BatchNormCache, Conv3d, LayerGradients, Mode, Parameterized};
use crate::tensor::{Element, Tensor};

/// 3D convolution, batch normalization, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
}

#[derive(Debug, Clone)]
pub struct ConvUnitCache<T> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
    output: Tensor<T>,
}

impl<T: Element> ConvUnitCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl<T: Element> ConvUnit<T> {
    /// `kernel`-sized same-padding convolution with the given stride.
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, seed: u64) -> Result<Self> {
        Ok(ConvUnit {
            conv: Conv3d::new(c_in, c_out, kernel, stride, kernel / 2, seed)?,
            bn: BatchNorm3d::new(c_out),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ConvUnitCache<T>)> {
        let z = self.conv.forward(x)?;
        let (b, bn) = self.bn.forward(&z, mode)?;
        let y = b.relu();
        Ok((
            y.clone(),
            ConvUnitCache {
                input: x.clone(),
                bn,
                output: y,
            },
        ))
    }

    pub fn commit(&mut self, cache: &ConvUnitCache<T>) {
        self.bn.update_running_stats(&cache.bn);
    }

    /// Param order: conv weight, conv bias, bn gamma, bn beta.
    pub fn backward(&self, cache: &ConvUnitCache<T>, grad_out: &Tensor<T>, need_input: bool) -> Result<LayerGradients<T>> {
        let g = relu_backward(&cache.output, grad_out);
        let bn = self.bn.backward(&cache.bn, &g)?;
        let dz = bn.input.expect("batchnorm always returns an input gradient");
        let conv = self.conv.backward(&cache.input, &dz, need_input)?;
        let mut params = conv.params;
        params.extend(bn.params);
        Ok(LayerGradients {
            params,
            input: conv.input,
        })
    }
}

impl<T: Element> Parameterized<T> for ConvUnit<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }

    fn param_names(&self) -> Vec<&'static str> {
        vec!["conv.weight", "conv.bias", "bn.gamma", "bn.beta"]
    }
}

/// 1×1×1 strided convolution plus BN on the skip path, used when the block
/// changes channel count or resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
}

#[derive(Debug, Clone)]
struct ProjectionCache<T> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
}

/// `y = s(x) + r(x) [+ gamma * o(r(x))]` where `r` is two conv units and
/// `s` is the identity or a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: ConvUnit<T>,
    pub conv2: ConvUnit<T>,
    pub projection: Option<Projection<T>>,
    pub attention: Option<SelfAttention3d<T>>,
}

#[derive(Debug, Clone)]
pub struct ResidualCache<T> {
    c1: ConvUnitCache<T>,
    c2: ConvUnitCache<T>,
    proj: Option<ProjectionCache<T>>,
    /// attention output o(r(x)), kept for d(gamma)
    attn_out: Option<Tensor<T>>,
}

impl<T: Element> ResidualBlock<T> {
    /// Seeds for the sub-layers come from `seed_for(suffix)` so that a
    /// plain and an attention variant of the same block share weights.
    pub fn new(
        c_in: usize,
        c_out: usize,
        stride: usize,
        attention: bool,
        seed_for: impl Fn(&str) -> u64,
    ) -> Result<Self> {
        let projection = if stride != 1 || c_in != c_out {
            Some(Projection {
                conv: Conv3d::new(c_in, c_out, 1, stride, 0, seed_for("projection.conv.weight"))?,
                bn: BatchNorm3d::new(c_out),
            })
        } else {
            None
        };
        let attention = if attention {
            Some(SelfAttention3d::new(c_out, seed_for("attention"))?)
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1: ConvUnit::new(c_in, c_out, 3, stride, seed_for("conv1.conv.weight"))?,
            conv2: ConvUnit::new(c_out, c_out, 3, 1, seed_for("conv2.conv.weight"))?,
            projection,
            attention,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ResidualCache<T>)> {
        let (h, c1) = self.conv1.forward(x, mode)?;
        let (r, c2) = self.conv2.forward(&h, mode)?;
        let (skip, proj) = match &self.projection {
            Some(p) => {
                let z = p.conv.forward(x)?;
                let (s, bn) = p.bn.forward(&z, mode)?;
                (s, Some(ProjectionCache { input: x.clone(), bn }))
            }
            None => (x.clone(), None),
        };
        let mut y = skip.add(&r)?;
        let attn_out = match &self.attention {
            Some(att) => {
                let (o, _) = att.forward(&r)?;
                y.axpy(att.gamma(), &o)?;
                Some(o)
            }
            None => None,
        };
        Ok((y, ResidualCache { c1, c2, proj, attn_out }))
    }

    pub fn commit(&mut self, cache: &ResidualCache<T>) {
        self.conv1.commit(&cache.c1);
        self.conv2.commit(&cache.c2);
        if let (Some(p), Some(pc)) = (&mut self.projection, &cache.proj) {
            p.bn.update_running_stats(&pc.bn);
        }
    }

    /// Param order: conv1 (4), conv2 (4), projection conv/bn (4) if any,
    /// attention (w_f, w_g, w_h, w_v, gamma) if any.
    pub fn backward(&self, cache: &ResidualCache<T>, grad_out: &Tensor<T>, need_input: bool) -> Result<LayerGradients<T>> {
        let mut dr = grad_out.clone();
        let mut attn_grads = None;
        if let (Some(att), Some(o)) = (&self.attention, &cache.attn_out) {
            let r = cache.c2.output();
            let mut g = att.backward(r, &grad_out.scale(att.gamma()))?;
            g.params[4] = Tensor::scalar(grad_out.dot(o)?);
            dr.add_assign(g.input.as_ref().expect("attention input gradient"))?;
            attn_grads = Some(g.params);
        }
        let g2 = self.conv2.backward(&cache.c2, &dr, true)?;
        let dh = g2.input.expect("requested");
        let g1 = self.conv1.backward(&cache.c1, &dh, need_input)?;

        let mut params = g1.params;
        params.extend(g2.params);
        let mut dx = g1.input;
        match (&self.projection, &cache.proj) {
            (Some(p), Some(pc)) => {
                let bn = p.bn.backward(&pc.bn, grad_out)?;
                let dz = bn.input.expect("batchnorm always returns an input gradient");
                let conv = p.conv.backward(&pc.input, &dz, need_input)?;
                params.extend(conv.params);
                params.extend(bn.params);
                if let (Some(dx), Some(ds)) = (dx.as_mut(), conv.input.as_ref()) {
                    dx.add_assign(ds)?;
                }
            }
            _ => {
                if let Some(dx) = dx.as_mut() {
                    dx.add_assign(grad_out)?;
                }
            }
        }
        if let Some(a) = attn_grads {
            params.extend(a);
        }
        Ok(LayerGradients { params, input: dx })
    }

    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        let mut b = self.conv1.bn.buffers();
        b.extend(self.conv2.bn.buffers());
        if let Some(p) = &self.projection {
            b.extend(p.bn.buffers());
        }
        b
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut b = self.conv1.bn.buffers_mut();
        b.extend(self.conv2.bn.buffers_mut());
        if let Some(p) = &mut self.projection {
            b.extend(p.bn.buffers_mut());
        }
        b
    }

    pub fn buffer_names(&self) -> Vec<&'static str> {
        let mut n = vec![
            "conv1.bn.running_mean",
            "conv1.bn.running_var",
            "conv2.bn.running_mean",
            "conv2.bn.running_var",
        ];
        if self.projection.is_some() {
            n.extend(["projection.bn.running_mean", "projection.bn.running_var"]);
        }
        n
    }
}

impl<T: Element> Parameterized<T> for ResidualBlock<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        if let Some(pr) = &self.projection {
            p.extend(pr.conv.params());
            p.extend(pr.bn.params());
        }
        if let Some(a) = &self.attention {
            p.extend(a.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        if let Some(pr) = &mut self.projection {
            p.extend(pr.conv.params_mut());
            p.extend(pr.bn.params_mut());
        }
        if let Some(a) = &mut self.attention {
            p.extend(a.params_mut());
        }
        p
    }

    fn param_names(&self) -> Vec<&'static str> {
        let mut n = vec![
            "conv1.conv.weight",
            "conv1.conv.bias",
            "conv1.bn.gamma",
            "conv1.bn.beta",
            "conv2.conv.weight",
            "conv2.conv.bias",
            "conv2.bn.gamma",
            "conv2.bn.beta",
        ];
        if self.projection.is_some() {
            n.extend([
                "projection.conv.weight",
                "projection.conv.bias",
                "projection.bn.gamma",
                "projection.bn.beta",
            ]);
        }
        if self.attention.is_some() {
            n.extend([
                "attention.w_f",
                "attention.w_g",
                "attention.w_h",
                "attention.w_v",
                "attention.gamma",
            ]);
        }
        n
    }
}
