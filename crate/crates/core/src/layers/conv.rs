//! Direct 3D cross-correlation.
//!
//! Inputs are zero-padded and each W row is split into `stride` phases, so
//! the taps `ow * s + kw` of a strided row become a contiguous run. Kernels
//! work on fixed-width lane blocks of one output row held in registers.
//! Each output element accumulates bias, then (c_in, kd, kh, kw) in
//! ascending order, independent of threading and of the instruction set
//! picked at runtime.

use rayon::prelude::*;

use super::{LayerGradients, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{Element, Init, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    /// (c_out, c_in, k, k, k)
    pub weight: Tensor<T>,
    /// (c_out)
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Padded planes with phase-split rows. Padded position `x` of a row sits
/// at `(x % s) * wq + x / s`; every phase carries `slack` trailing zeros so
/// full lane blocks can be read past the end of a row.
struct Phased<T> {
    data: Vec<T>,
    d: usize,
    h: usize,
    s: usize,
    wq: usize,
}

impl<T: Element> Phased<T> {
    fn zeros(planes: usize, d: usize, h: usize, w: usize, s: usize, slack: usize) -> Self {
        let wq = w.div_ceil(s) + slack;
        Phased {
            data: vec![T::zero(); planes * d * h * s * wq],
            d,
            h,
            s,
            wq,
        }
    }

    fn from_tensor(x: &Tensor<T>, p: usize, s: usize, slack: usize) -> Self {
        let xs = x.shape();
        let mut out = Phased::zeros(xs.n * xs.c, xs.d + 2 * p, xs.h + 2 * p, xs.w + 2 * p, s, slack);
        let wq = out.wq;
        for plane in 0..xs.n * xs.c {
            let src = &x.data()[plane * xs.spatial_len()..][..xs.spatial_len()];
            for z in 0..xs.d {
                for y in 0..xs.h {
                    let row = out.row_mut(plane, z + p, y + p);
                    let line = &src[(z * xs.h + y) * xs.w..][..xs.w];
                    for_each_phase(xs.w, p, s, |x0, ph, q0| {
                        for (dst, &v) in row[ph * wq + q0..].iter_mut().zip(line[x0..].iter().step_by(s)) {
                            *dst = v;
                        }
                    });
                }
            }
        }
        out
    }

    fn row_len(&self) -> usize {
        self.s * self.wq
    }

    fn plane_len(&self) -> usize {
        self.d * self.h * self.row_len()
    }

    fn row(&self, plane: usize, z: usize, y: usize) -> &[T] {
        let rl = self.row_len();
        &self.data[plane * self.plane_len() + (z * self.h + y) * rl..][..rl]
    }

    fn row_mut(&mut self, plane: usize, z: usize, y: usize) -> &mut [T] {
        let rl = self.row_len();
        let start = plane * self.plane_len() + (z * self.h + y) * rl;
        &mut self.data[start..start + rl]
    }
}

/// Splits a row of `w` unpadded positions by phase: calls `f(x0, phase, q0)`
/// where `x0` is the first position of that phase and `q0` its slot.
fn for_each_phase(w: usize, pad: usize, s: usize, mut f: impl FnMut(usize, usize, usize)) {
    for x0 in 0..s.min(w) {
        let xp = x0 + pad;
        f(x0, xp % s, xp / s);
    }
}

/// Output rows padded with zeros to a multiple of `lanes`.
fn pad_rows<T: Element>(g: &[T], rows: usize, w: usize, lanes: usize) -> (Vec<T>, usize) {
    let wq = w.div_ceil(lanes) * lanes;
    let mut out = vec![T::zero(); rows * wq];
    for r in 0..rows {
        out[r * wq..r * wq + w].copy_from_slice(&g[r * w..(r + 1) * w]);
    }
    (out, wq)
}

/// Largest supported kernel edge.
pub const MAX_KERNEL: usize = 5;

fn lanes_for(w: usize, k: usize) -> usize {
    if k > 3 {
        return 4;
    }
    match w {
        0..=4 => 4,
        5..=8 => 8,
        _ => 16,
    }
}

/// Output channels computed together by the forward kernel.
const CO_BLOCK: usize = 4;

struct Geometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    s: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn plane_out(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn kvol(&self) -> usize {
        self.k * self.k * self.k
    }
}

// Lane updates are written one block per call: LLVM then keeps each block
// in a vector register instead of vectorizing across blocks.

#[inline(always)]
fn lane_axpy<T: Element, const L: usize>(acc: &mut [T; L], w: T, src: &[T; L]) {
    for j in 0..L {
        acc[j] += w * src[j];
    }
}

#[inline(always)]
fn lane_mul_add<T: Element, const L: usize>(acc: &mut [T; L], a: &[T; L], b: &[T; L]) {
    for j in 0..L {
        acc[j] += a[j] * b[j];
    }
}

#[inline(always)]
fn lane_add<T: Element, const L: usize>(dst: &mut [T; L], src: &[T; L]) {
    for j in 0..L {
        dst[j] += src[j];
    }
}

/// `acc[b] += w[b] * src` for each of `B` lane blocks.
#[inline(always)]
fn lanes_axpy<T: Element, const L: usize, const B: usize>(acc: &mut [[T; L]; B], w: [T; B], src: &[T; L]) {
    for b in 0..B {
        lane_axpy(&mut acc[b], w[b], src);
    }
}

#[inline(never)]
fn lane_sum<T: Element, const L: usize>(lane: &[T; L]) -> T {
    let mut sum = T::zero();
    for &v in lane {
        sum += v;
    }
    sum
}

struct FwdArgs<'a, T> {
    geo: &'a Geometry,
    xp: &'a Phased<T>,
    weight: &'a [T],
    bias: &'a [T],
}

#[inline(always)]
fn fwd_impl<T: Element, const L: usize, const B: usize>(a: &FwdArgs<T>, n: usize, co0: usize, out: &mut [T]) {
    let g = a.geo;
    let (k, s, wq) = (g.k, g.s, a.xp.wq);
    let plane = g.plane_out();
    let wstride = g.c_in * g.kvol();
    for od in 0..g.od {
        for oh in 0..g.oh {
            let mut c0 = 0;
            while c0 < g.ow {
                let len = (g.ow - c0).min(L);
                let mut acc: [[T; L]; B] = std::array::from_fn(|b| [a.bias[co0 + b]; L]);
                for ci in 0..g.c_in {
                    let pl = n * g.c_in + ci;
                    for kd in 0..k {
                        for kh in 0..k {
                            let row = a.xp.row(pl, od * s + kd, oh * s + kh);
                            let wo = ((ci * k + kd) * k + kh) * k;
                            let wrows: [&[T]; B] = std::array::from_fn(|b| &a.weight[(co0 + b) * wstride + wo..][..k]);
                            for kw in 0..k {
                                let start = (kw % s) * wq + kw / s + c0;
                                let src: &[T; L] = row[start..start + L].try_into().unwrap();
                                let wv: [T; B] = std::array::from_fn(|b| wrows[b][kw]);
                                lanes_axpy::<T, L, B>(&mut acc, wv, src);
                            }
                        }
                    }
                }
                let base = (od * g.oh + oh) * g.ow + c0;
                for b in 0..B {
                    let lane: [T; L] = acc[b];
                    out[b * plane + base..][..len].copy_from_slice(&lane[..len]);
                }
                c0 += L;
            }
        }
    }
}

struct DwArgs<'a, T> {
    geo: &'a Geometry,
    n: usize,
    xp: &'a Phased<T>,
    /// grad rows padded to `gw`
    g: &'a [T],
    gw: usize,
}

/// Weight gradient of output channel `co`; `dw` is its (c_in, k, k, k) block.
/// All `K×K` (kh, kw) taps of a depth slice accumulate together (`KK = K*K`
/// lane blocks) so each gradient load feeds every tap.
#[inline(always)]
fn dw_impl<T: Element, const L: usize, const K: usize, const KK: usize>(a: &DwArgs<T>, co: usize, dw: &mut [T]) {
    let g = a.geo;
    let (s, wq) = (g.s, a.xp.wq);
    let offs: [usize; K] = std::array::from_fn(|kw| (kw % s) * wq + kw / s);
    for ci in 0..g.c_in {
        for kd in 0..K {
            let mut acc = [[T::zero(); L]; KK];
            for n in 0..a.n {
                let pl = n * g.c_in + ci;
                for od in 0..g.od {
                    for oh in 0..g.oh {
                        let grow = &a.g[(((n * g.c_out + co) * g.od + od) * g.oh + oh) * a.gw..][..a.gw];
                        let xrows: [&[T]; K] = std::array::from_fn(|kh| a.xp.row(pl, od * s + kd, oh * s + kh));
                        for c0 in (0..a.gw).step_by(L) {
                            let gc: &[T; L] = grow[c0..c0 + L].try_into().unwrap();
                            for kh in 0..K {
                                for kw in 0..K {
                                    let x0 = offs[kw] + c0;
                                    lane_mul_add(&mut acc[kh * K + kw], gc, xrows[kh][x0..x0 + L].try_into().unwrap());
                                }
                            }
                        }
                    }
                }
            }
            for (t, lane) in acc.iter().enumerate() {
                dw[(ci * K + kd) * KK + t] = lane_sum(lane);
            }
        }
    }
}

struct DxArgs<'a, T> {
    geo: &'a Geometry,
    weight: &'a [T],
    g: &'a [T],
    gw: usize,
    /// layout of the padded, phase-split input gradient
    h: usize,
    wq: usize,
}

/// Input gradient of plane (n, ci) in the phase-split padded layout, with
/// the `K×K` (kh, kw) taps of a depth slice accumulated together.
#[inline(always)]
fn dx_impl<T: Element, const L: usize, const K: usize, const KK: usize>(a: &DxArgs<T>, n: usize, ci: usize, plane: &mut [T]) {
    let g = a.geo;
    let (s, wq) = (g.s, a.wq);
    let rl = s * wq;
    let offs: [usize; K] = std::array::from_fn(|kw| (kw % s) * wq + kw / s);
    for od in 0..g.od {
        for oh in 0..g.oh {
            for kd in 0..K {
                for c0 in (0..a.gw).step_by(L) {
                    let mut acc = [[T::zero(); L]; KK];
                    for co in 0..g.c_out {
                        let wv: &[T; KK] = a.weight[((co * g.c_in + ci) * K + kd) * KK..][..KK].try_into().unwrap();
                        let gc: &[T; L] = a.g[(((n * g.c_out + co) * g.od + od) * g.oh + oh) * a.gw + c0..][..L]
                            .try_into()
                            .unwrap();
                        for t in 0..KK {
                            lane_axpy(&mut acc[t], wv[t], gc);
                        }
                    }
                    for kh in 0..K {
                        let row = &mut plane[((od * s + kd) * a.h + oh * s + kh) * rl..][..rl];
                        for kw in 0..K {
                            let x0 = offs[kw] + c0;
                            let dst: &mut [T; L] = (&mut row[x0..x0 + L]).try_into().unwrap();
                            lane_add(dst, &acc[kh * K + kw]);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Isa {
    Base,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn isa() -> Isa {
    static ISA: std::sync::OnceLock<Isa> = std::sync::OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                return Isa::Avx512;
            }
            if std::is_x86_feature_detected!("avx2") {
                return Isa::Avx2;
            }
        }
        Isa::Base
    })
}

/// Generates per-ISA entry points for a kernel. The wrapped bodies only use
/// separate multiplies and adds, so every variant rounds identically.
macro_rules! multiversion {
    ($name:ident, $imp:ident, <$($c:ident),*>, ($($arg:ident: $ty:ty),*)) => {
        fn $name<T: Element, $(const $c: usize),*>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f")]
                unsafe fn v512<T: Element, $(const $c: usize),*>($($arg: $ty),*) {
                    $imp::<T, $($c),*>($($arg),*)
                }
                #[target_feature(enable = "avx2")]
                unsafe fn v256<T: Element, $(const $c: usize),*>($($arg: $ty),*) {
                    $imp::<T, $($c),*>($($arg),*)
                }
                match isa() {
                    // SAFETY: the feature was detected at runtime.
                    Isa::Avx512 => return unsafe { v512::<T, $($c),*>($($arg),*) },
                    Isa::Avx2 => return unsafe { v256::<T, $($c),*>($($arg),*) },
                    Isa::Base => {}
                }
            }
            $imp::<T, $($c),*>($($arg),*)
        }
    };
}

multiversion!(fwd_kernel, fwd_impl, <L, B>, (a: &FwdArgs<T>, n: usize, co0: usize, out: &mut [T]));
multiversion!(dw_kernel, dw_impl, <L, K, KK>, (a: &DwArgs<T>, co: usize, dw: &mut [T]));
multiversion!(dx_kernel, dx_impl, <L, K, KK>, (a: &DxArgs<T>, n: usize, ci: usize, plane: &mut [T]));

/// Backward kernels are specialized on the kernel size.
macro_rules! by_kernel_size {
    ($k:expr, $lanes:expr, $kernel:ident, ($($arg:expr),*)) => {
        match ($k, $lanes) {
            (1, 4) => $kernel::<T, 4, 1, 1>($($arg),*),
            (1, 8) => $kernel::<T, 8, 1, 1>($($arg),*),
            (1, _) => $kernel::<T, 16, 1, 1>($($arg),*),
            (2, 4) => $kernel::<T, 4, 2, 4>($($arg),*),
            (2, 8) => $kernel::<T, 8, 2, 4>($($arg),*),
            (2, _) => $kernel::<T, 16, 2, 4>($($arg),*),
            (3, 4) => $kernel::<T, 4, 3, 9>($($arg),*),
            (3, 8) => $kernel::<T, 8, 3, 9>($($arg),*),
            (3, _) => $kernel::<T, 16, 3, 9>($($arg),*),
            (4, _) => $kernel::<T, 4, 4, 16>($($arg),*),
            (5, _) => $kernel::<T, 4, 5, 25>($($arg),*),
            (k, _) => unreachable!("kernel size {k} rejected at construction"),
        }
    };
}

fn fwd_dispatch<T: Element, const B: usize>(lanes: usize, a: &FwdArgs<T>, n: usize, co0: usize, out: &mut [T]) {
    match lanes {
        4 => fwd_kernel::<T, 4, B>(a, n, co0, out),
        8 => fwd_kernel::<T, 8, B>(a, n, co0, out),
        _ => fwd_kernel::<T, 16, B>(a, n, co0, out),
    }
}

impl<T: Element> Conv3d<T> {
    /// Kaiming-normal weights (fan-in scaling) and zero bias.
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        seed: u64,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kernel == 0 || kernel > MAX_KERNEL || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv3d needs positive channels and stride and a kernel of 1..={MAX_KERNEL} \
                 (c_in={c_in}, c_out={c_out}, k={kernel}, s={stride})"
            )));
        }
        let fan_in = (c_in * kernel * kernel * kernel) as f64;
        let weight = Tensor::create(
            Shape::new(c_out, c_in, kernel, kernel, kernel),
            Init::Normal {
                seed,
                mean: 0.0,
                std: (2.0 / fan_in).sqrt(),
            },
        )?;
        Ok(Conv3d {
            weight,
            bias: Tensor::zeros(Shape::vector(c_out)),
            stride,
            padding,
        })
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.d != ws.h || ws.h != ws.w || ws.d == 0 || ws.d > MAX_KERNEL {
            return Err(Error::InvalidArgument(format!(
                "conv3d kernel must be cubic with edge 1..={MAX_KERNEL}, got {ws}"
            )));
        }
        if bias.shape() != Shape::vector(ws.n) {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                left: bias.shape(),
                right: Shape::vector(ws.n),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv3d stride must be positive".into()));
        }
        Ok(Conv3d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().d
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels() {
            return Err(Error::DimensionMismatch {
                op: "conv3d",
                detail: format!(
                    "input {input} has {} channels, kernel expects {}",
                    input.c,
                    self.in_channels()
                ),
            });
        }
        let k = self.kernel() as i64;
        let p = self.padding as i64;
        let s = self.stride as i64;
        let out = |len: usize| (len as i64 + 2 * p - k).div_euclid(s) + 1;
        let dims = [out(input.d), out(input.h), out(input.w)];
        if dims.iter().any(|&v| v < 1) {
            return Err(Error::OutputUnderflow { op: "conv3d", dims });
        }
        Ok(Shape::new(
            input.n,
            self.out_channels(),
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
        ))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        let geo = self.geometry(out_shape);
        let lanes = lanes_for(geo.ow, geo.k);
        let xp = Phased::from_tensor(x, self.padding, self.stride, lanes);
        let args = FwdArgs {
            geo: &geo,
            xp: &xp,
            weight: self.weight.data(),
            bias: self.bias.data(),
        };
        let plane = geo.plane_out();
        let mut out = Tensor::zeros(out_shape);
        if plane > 0 {
            out.data_mut()
                .par_chunks_mut(geo.c_out * plane)
                .enumerate()
                .for_each(|(n, sample)| {
                    sample
                        .par_chunks_mut(CO_BLOCK * plane)
                        .enumerate()
                        .for_each(|(blk, planes)| {
                            let co0 = blk * CO_BLOCK;
                            if planes.len() == CO_BLOCK * plane {
                                fwd_dispatch::<T, CO_BLOCK>(lanes, &args, n, co0, planes);
                            } else {
                                for (i, p) in planes.chunks_mut(plane).enumerate() {
                                    fwd_dispatch::<T, 1>(lanes, &args, n, co0 + i, p);
                                }
                            }
                        });
                });
        }
        out.debug_check_finite("conv3d_forward");
        Ok(out)
    }

    fn geometry(&self, out: Shape) -> Geometry {
        Geometry {
            c_in: self.in_channels(),
            c_out: self.out_channels(),
            k: self.kernel(),
            s: self.stride,
            od: out.d,
            oh: out.h,
            ow: out.w,
        }
    }

    /// Gradients for (weight, bias) and, when `need_input`, the input.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        need_input: bool,
    ) -> Result<LayerGradients<T>> {
        let out_shape = self.output_shape(x.shape())?;
        if grad_out.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                op: "conv3d_backward",
                left: grad_out.shape(),
                right: out_shape,
            });
        }
        let xs = x.shape();
        let geo = self.geometry(out_shape);
        let lanes = lanes_for(geo.ow, geo.k);
        let plane_out = geo.plane_out();
        let (gq, gw) = pad_rows(grad_out.data(), xs.n * geo.c_out * geo.od * geo.oh, geo.ow, lanes);

        let mut grad_b = Tensor::zeros(self.bias.shape());
        for (co, gb) in grad_b.data_mut().iter_mut().enumerate() {
            for n in 0..xs.n {
                *gb += grad_out.channel(n, co).iter().copied().sum::<T>();
            }
        }

        let kvol = geo.kvol();
        let mut grad_w = Tensor::zeros(self.weight.shape());
        if plane_out > 0 {
            let xp = Phased::from_tensor(x, self.padding, self.stride, lanes);
            let args = DwArgs {
                geo: &geo,
                n: xs.n,
                xp: &xp,
                g: &gq,
                gw,
            };
            grad_w
                .data_mut()
                .par_chunks_mut(geo.c_in * kvol)
                .enumerate()
                .for_each(|(co, dw)| by_kernel_size!(geo.k, lanes, dw_kernel, (&args, co, dw)));
        }

        let input = if need_input {
            let p = self.padding;
            let mut dxp = Phased::<T>::zeros(xs.n * geo.c_in, xs.d + 2 * p, xs.h + 2 * p, xs.w + 2 * p, geo.s, lanes);
            let plane_len = dxp.plane_len();
            let args = DxArgs {
                geo: &geo,
                weight: self.weight.data(),
                g: &gq,
                gw,
                h: dxp.h,
                wq: dxp.wq,
            };
            if plane_out > 0 && plane_len > 0 {
                dxp.data
                    .par_chunks_mut(plane_len)
                    .enumerate()
                    .for_each(|(idx, plane)| {
                        let (n, ci) = (idx / geo.c_in, idx % geo.c_in);
                        by_kernel_size!(geo.k, lanes, dx_kernel, (&args, n, ci, plane))
                    });
            }
            let mut dx = Tensor::zeros(xs);
            let (s, wq) = (dxp.s, dxp.wq);
            for plane in 0..xs.n * geo.c_in {
                let dst = &mut dx.data_mut()[plane * xs.spatial_len()..][..xs.spatial_len()];
                for z in 0..xs.d {
                    for y in 0..xs.h {
                        let row = dxp.row(plane, z + p, y + p);
                        let line = &mut dst[(z * xs.h + y) * xs.w..][..xs.w];
                        for_each_phase(xs.w, p, s, |x0, ph, q0| {
                            for (v, &src) in line[x0..].iter_mut().step_by(s).zip(&row[ph * wq + q0..]) {
                                *v = src;
                            }
                        });
                    }
                }
            }
            Some(dx)
        } else {
            None
        };

        Ok(LayerGradients {
            params: vec![grad_w, grad_b],
            input,
        })
    }
}

impl<T: Element> Parameterized<T> for Conv3d<T> {
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
