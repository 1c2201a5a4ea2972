//! 3D Grad-CAM: channel weights are the spatial mean of the class logit's
//! gradient w.r.t. a feature map, and the heatmap is the ReLU of the
//! weighted channel sum, upsampled trilinearly to the input grid.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_volume, BoundingBox, RawVolume};
use crate::error::{Error, Result};
use crate::layers::{softmax, Mode};
use crate::model::Model;
use crate::tensor::{trilinear_upsample, Element, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCamResult {
    pub layer_name: String,
    pub class_index: usize,
    /// Per-channel weights a_k.
    pub weights: Vec<f64>,
    /// (1, 1, D', H', W') at the layer's resolution.
    pub heatmap: Tensor<f64>,
    /// (1, 1, D, H, W) at the input resolution.
    pub upsampled: Tensor<f64>,
    /// Voxels per channel of the layer map.
    pub z: usize,
    /// Pre-softmax score of the explained class.
    pub logit: f64,
    pub probability: f64,
}

/// Weights and heatmap from one sample's activations `A` and logit
/// gradients `dA`, both (1, K, D', H', W').
pub fn combine<T: Element>(activations: &Tensor<T>, grads: &Tensor<T>) -> Result<(Vec<f64>, Tensor<f64>)> {
    let s = activations.shape();
    if grads.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "gradcam",
            left: s,
            right: grads.shape(),
        });
    }
    if s.n != 1 {
        return Err(Error::InvalidArgument(format!("gradcam explains one sample at a time, got batch {}", s.n)));
    }
    let z = s.spatial_len();
    let weights: Vec<f64> = (0..s.c)
        .map(|k| grads.channel(0, k).iter().map(|g| g.as_f64()).sum::<f64>() / z as f64)
        .collect();
    let mut map = vec![0.0f64; z];
    for (k, &a) in weights.iter().enumerate() {
        for (m, v) in map.iter_mut().zip(activations.channel(0, k)) {
            *m += a * v.as_f64();
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    let [d, h, w] = s.spatial();
    Ok((weights, Tensor::from_vec(Shape::new(1, 1, d, h, w), map)?))
}

/// Explains `class_index` for a single input (1, C, D, H, W) at the named
/// feature layer, with the model in eval mode.
pub fn compute_gradcam<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    class_index: usize,
    layer_name: &str,
) -> Result<GradCamResult> {
    let classes = model.spec().num_classes;
    if class_index >= classes {
        return Err(Error::LabelOutOfRange {
            label: class_index,
            classes,
        });
    }
    if x.shape().n != 1 {
        return Err(Error::InvalidArgument(format!("gradcam explains one sample at a time, got batch {}", x.shape().n)));
    }
    let idx = model.layer_index(layer_name)?;
    let features = model.feature_layer_names();
    if !features.iter().any(|n| n == layer_name) {
        return Err(Error::UnknownLayer {
            name: layer_name.to_string(),
            available: features,
        });
    }
    let trace = model.forward_trace(x, Mode::Eval)?;
    let logits = trace.logits();
    let mut onehot = Tensor::zeros(logits.shape());
    onehot.data_mut()[class_index] = T::one();
    let grads = model.grad_at_layer(&trace, &onehot, idx)?;
    let acts = trace.output(idx);
    let (weights, heatmap) = combine(acts, &grads)?;
    let upsampled = trilinear_upsample(&heatmap, x.shape().spatial())?;
    Ok(GradCamResult {
        layer_name: layer_name.to_string(),
        class_index,
        weights,
        z: acts.shape().spatial_len(),
        heatmap,
        upsampled,
        logit: logits.data()[class_index].as_f64(),
        probability: softmax(logits).data()[class_index].as_f64(),
    })
}

/// Smallest set of highest-valued voxels of the upsampled map holding at
/// least `top_fraction` of its total mass, as (d, h, w). Equal values are
/// taken in coordinate order. An all-zero map yields no voxels.
pub fn peak_region(result: &GradCamResult, top_fraction: f64) -> Result<Vec<[usize; 3]>> {
    mass_region(&result.upsampled, top_fraction)
}

pub fn mass_region(map: &Tensor<f64>, top_fraction: f64) -> Result<Vec<[usize; 3]>> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("top fraction must lie in (0, 1], got {top_fraction}")));
    }
    let [_, h, w] = map.shape().spatial();
    let vals = map.channel(0, 0);
    let mut order: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > 0.0).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| vals[i]).sum();
    let target = top_fraction * total;
    let mut acc = 0.0;
    let mut out = Vec::new();
    for i in order {
        if acc >= target {
            break;
        }
        acc += vals[i];
        out.push([i / (h * w), (i / w) % h, i % w]);
    }
    Ok(out)
}

/// Overlap between a voxel set and a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxOverlap {
    pub inside: usize,
    /// Share of the region's voxels inside the box.
    pub fraction_inside: f64,
    /// Region-vs-box intersection over union, in voxels.
    pub iou: f64,
}

pub fn overlap(region: &[[usize; 3]], bbox: &BoundingBox) -> BoxOverlap {
    let inside = region.iter().filter(|p| bbox.contains(**p)).count();
    let union = region.len() + bbox.volume() - inside;
    BoxOverlap {
        inside,
        fraction_inside: if region.is_empty() { 0.0 } else { inside as f64 / region.len() as f64 },
        iou: inside as f64 / union as f64,
    }
}

/// Upsampled map scaled to [0, 1] by its maximum; a zero map stays zero.
pub fn normalized_volume(result: &GradCamResult) -> RawVolume {
    let data = result.upsampled.data();
    let max = data.iter().cloned().fold(0.0f64, f64::max);
    let scaled = data
        .iter()
        .map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
        .collect();
    RawVolume::new(result.upsampled.shape().spatial(), scaled).expect("dims come from the tensor")
}

/// A 2-D cut through a (D, H, W) volume, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Axial (fixed d), coronal (fixed h) and sagittal (fixed w) center slices.
pub fn center_slices(vol: &RawVolume) -> [Slice; 3] {
    let [d, h, w] = vol.dims;
    let at = |z: usize, y: usize, x: usize| vol.data[(z * h + y) * w + x];
    let (cd, ch, cw) = (d / 2, h / 2, w / 2);
    let axial = Slice {
        rows: h,
        cols: w,
        data: (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| at(cd, y, x)).collect(),
    };
    let coronal = Slice {
        rows: d,
        cols: w,
        data: (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| at(z, ch, x)).collect(),
    };
    let sagittal = Slice {
        rows: d,
        cols: h,
        data: (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| at(z, y, cw)).collect(),
    };
    [axial, coronal, sagittal]
}

fn heat_color(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// RGB montage of the three center slices: the background volume in gray
/// with the heatmap blended on top in proportion to its value.
pub fn render_montage(heat: &RawVolume, background: Option<&RawVolume>) -> Result<(u32, u32, Vec<u8>)> {
    if let Some(bg) = background {
        if bg.dims != heat.dims {
            return Err(Error::DimensionMismatch {
                op: "montage",
                detail: format!("background {:?} vs heatmap {:?}", bg.dims, heat.dims),
            });
        }
    }
    let hs = center_slices(heat);
    let bs = background.map(center_slices);
    let max_dim = heat.dims.iter().copied().max().unwrap_or(1).max(1);
    let scale = (128 / max_dim).max(1);
    let gap = 2;
    let height = hs.iter().map(|s| s.rows).max().unwrap_or(0) * scale;
    let width = hs.iter().map(|s| s.cols * scale).sum::<usize>() + gap * (hs.len() - 1);
    let mut img = vec![0u8; width * height * 3];
    let mut x0 = 0;
    for (k, s) in hs.iter().enumerate() {
        let (lo, hi) = match &bs {
            Some(b) => b[k].data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v))),
            None => (0.0, 1.0),
        };
        for r in 0..s.rows {
            for c in 0..s.cols {
                let hv = s.data[r * s.cols + c];
                let gray = match &bs {
                    Some(b) if hi > lo => (b[k].data[r * s.cols + c] - lo) / (hi - lo),
                    _ => 0.0,
                };
                let heat = heat_color(hv);
                let alpha = 0.6 * hv.clamp(0.0, 1.0);
                let px: [u8; 3] = std::array::from_fn(|i| ((gray * (1.0 - alpha) + heat[i] * alpha) * 255.0).round() as u8);
                // flip rows so the first slice index is at the bottom
                let row0 = (s.rows - 1 - r) * scale + (height - s.rows * scale);
                for dy in 0..scale {
                    for dx in 0..scale {
                        let o = ((row0 + dy) * width + x0 + c * scale + dx) * 3;
                        img[o..o + 3].copy_from_slice(&px);
                    }
                }
            }
        }
        x0 += s.cols * scale + gap;
    }
    Ok((width as u32, height as u32, img))
}

/// Writes the normalized heatmap volume (container chosen by extension)
/// and a PNG montage. Returns the normalized volume.
pub fn export_heatmap(
    result: &GradCamResult,
    background: Option<&RawVolume>,
    volume_path: &Path,
    montage_path: &Path,
) -> Result<RawVolume> {
    let vol = normalized_volume(result);
    write_volume(volume_path, &vol)?;
    let (w, h, rgb) = render_montage(&vol, background)?;
    if let Some(parent) = montage_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(montage_path).map_err(|e| Error::io(montage_path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::io(montage_path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result_from(map: Tensor<f64>) -> GradCamResult {
        GradCamResult {
            layer_name: "x".into(),
            class_index: 1,
            weights: vec![1.0],
            z: map.len(),
            heatmap: map.clone(),
            upsampled: map,
            logit: 0.0,
            probability: 0.5,
        }
    }

    #[test]
    fn ones_give_unit_map() {
        let a = Tensor::<f64>::full(Shape::new(1, 1, 2, 2, 2), 1.0);
        let (w, l) = combine(&a, &a).unwrap();
        assert_eq!(w, vec![1.0]);
        assert!(l.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn negative_gradient_clamps_to_zero() {
        let a = Tensor::<f64>::full(Shape::new(1, 1, 2, 2, 2), 1.0);
        let g = Tensor::<f64>::full(a.shape(), -0.5);
        let (w, l) = combine(&a, &g).unwrap();
        assert!(w[0] < 0.0);
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn peak_region_examples() {
        let mut m = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 3, 4));
        m.data_mut()[17] = 2.0;
        assert_eq!(peak_region(&result_from(m.clone()), 0.3).unwrap(), vec![[1, 1, 1]]);
        assert_eq!(peak_region(&result_from(m), 1.0).unwrap(), vec![[1, 1, 1]]);
        let u = Tensor::<f64>::full(Shape::new(1, 1, 2, 2, 2), 0.5);
        assert_eq!(peak_region(&result_from(u.clone()), 1.0).unwrap().len(), 8);
        assert_eq!(peak_region(&result_from(u), 0.25).unwrap(), vec![[0, 0, 0], [0, 0, 1]]);
        assert!(peak_region(&result_from(Tensor::zeros(Shape::new(1, 1, 2, 2, 2))), 0.5).unwrap().is_empty());
    }

    #[test]
    fn zero_and_constant_normalization() {
        let z = normalized_volume(&result_from(Tensor::zeros(Shape::new(1, 1, 2, 2, 2))));
        assert!(z.data.iter().all(|&v| v == 0.0));
        let c = normalized_volume(&result_from(Tensor::full(Shape::new(1, 1, 2, 2, 2), 3.5)));
        assert!(c.data.iter().all(|&v| v == 1.0));
    }
}
