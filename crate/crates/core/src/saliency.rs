//! Grad-CAM saliency volumes, region mass, and slice export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::CropBox;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::optim::batch_input;
use crate::tensor::{resample_trilinear, Tensor};

/// Default fraction of saliency mass a region needs to count as highlighted.
pub const DEFAULT_HIGHLIGHT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `(D, H, W)`, non-negative, aligned with the input grid; its maximum is 1
    /// unless the map is all zero.
    pub volume: Tensor<f32>,
    pub layer: String,
    /// Class whose score was explained: true for glaucoma.
    pub predicted_glaucoma: bool,
    pub logit: f64,
    /// Maximum of the upsampled map before scaling to [0, 1].
    pub max_before_normalization: f64,
    pub all_zero: bool,
}

/// `ReLU(sum_c alpha_c A_c)` with `alpha_c` the spatial mean of the score
/// gradient on channel `c`. Both tensors are `(D, H, W, C)` or
/// `(1, D, H, W, C)`; the result is `(D, H, W)`.
pub fn class_activation(activation: &Tensor<f32>, gradient: &Tensor<f32>) -> Result<Tensor<f64>> {
    if activation.dims() != gradient.dims() {
        return Err(Error::shape(format!(
            "activation {:?} and gradient {:?} differ",
            activation.dims(),
            gradient.dims()
        )));
    }
    let dims = match activation.dims() {
        [1, d, h, w, c] | [d, h, w, c] => [*d, *h, *w, *c],
        other => return Err(Error::shape(format!("expected (D, H, W, C) activation, got {other:?}"))),
    };
    let [d, h, w, c] = dims;
    let voxels = d * h * w;
    let mut alpha = vec![0.0f64; c];
    for (i, &g) in gradient.data().iter().enumerate() {
        alpha[i % c] += g as f64;
    }
    for a in &mut alpha {
        *a /= voxels as f64;
    }
    let cam = activation
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().zip(&alpha).map(|(&a, &w)| a as f64 * w).sum::<f64>().max(0.0))
        .collect();
    Tensor::from_vec(vec![d, h, w], cam)
}

/// Grad-CAM for one `(D, H, W)` volume at `layer`. The explained score is the
/// logit when the network predicts glaucoma (p >= 0.5) and the negated logit
/// otherwise. The map is upsampled trilinearly to the input grid and scaled
/// so its maximum is 1; an all-zero map is flagged rather than rejected.
pub fn grad_cam(net: &Network, x: &Tensor<f32>, layer: &str) -> Result<SaliencyMap> {
    let target = match *x.dims() {
        [d, h, w] => [d, h, w],
        _ => return Err(Error::shape(format!("grad_cam expects one (D, H, W) volume, got {:?}", x.dims()))),
    };
    let info = net.layer(layer).ok_or_else(|| Error::config(format!("unknown layer {layer:?}")))?;
    if !info.is_convolutional() {
        return Err(Error::config(format!("layer {layer:?} is not convolutional")));
    }
    let (out, cache) = net.forward_train(&batch_input(&[x])?, &[layer])?;
    let logit = out.predictions[0].logit;
    let predicted_glaucoma = out.predictions[0].p_glaucoma >= 0.5;
    let sign = if predicted_glaucoma { 1.0 } else { -1.0 };
    let activation = out.captured.into_iter().next().expect("captured layer").1;
    let dscore = Tensor::from_vec(vec![1, 1], vec![sign])?;
    let (_, grad) = net.backward(cache, &dscore, Some(layer))?;
    let cam = class_activation(&activation, &grad.expect("captured gradient"))?;
    let mut up = resample_trilinear(&cam, target)?;
    let max = up.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let all_zero = max <= 0.0;
    if !all_zero {
        up.scale_in_place(1.0 / max);
    }
    Ok(SaliencyMap {
        volume: up.cast(),
        layer: layer.to_string(),
        predicted_glaucoma,
        logit,
        max_before_normalization: max,
        all_zero,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    #[serde(rename = "box")]
    pub region: CropBox,
    /// Share of total saliency inside the box, in [0, 1].
    pub mass_fraction: f64,
    pub highlighted: bool,
    pub threshold: f64,
}

/// Saliency mass inside and outside `region`, summed in f64.
pub fn split_mass(map: &Tensor<f32>, region: &CropBox) -> Result<(f64, f64)> {
    let [d, h, w] = match *map.dims() {
        [d, h, w] => [d, h, w],
        _ => return Err(Error::shape(format!("saliency map must be (D, H, W), got {:?}", map.dims()))),
    };
    region.check_within([d, h, w])?;
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    for (i, &v) in map.data().iter().enumerate() {
        let (z, y, x) = (i / (h * w), i / w % h, i % w);
        if region.contains(z, y, x) {
            inside += v as f64;
        } else {
            outside += v as f64;
        }
    }
    Ok((inside, outside))
}

/// Fraction of the map's mass inside `region` (0 for an all-zero map), and
/// whether it reaches `threshold`.
pub fn region_mass(map: &SaliencyMap, region: &CropBox, threshold: f64) -> Result<RegionReport> {
    let (inside, outside) = split_mass(&map.volume, region)?;
    let total = inside + outside;
    let mass_fraction = if total > 0.0 { (inside / total).clamp(0.0, 1.0) } else { 0.0 };
    Ok(RegionReport { region: *region, mass_fraction, highlighted: total > 0.0 && mass_fraction >= threshold, threshold })
}

/// Voxel `(z, y, x)` of the largest value (first on ties).
pub fn argmax_voxel(v: &Tensor<f32>) -> [usize; 3] {
    let i = v.argmax();
    let (h, w) = (v.dims()[1], v.dims()[2]);
    [i / (h * w), i / w % h, i % w]
}

/// Pixel rows of one slice: axis 0 gives (H, W), axis 1 (D, W), axis 2 (D, H).
fn slice(v: &Tensor<f32>, axis: usize, index: usize) -> Result<(usize, usize, Vec<f32>)> {
    let dims = v.dims();
    if axis > 2 {
        return Err(Error::Axis { axis, rank: 3 });
    }
    if index >= dims[axis] {
        return Err(Error::Index(format!("slice {index} on axis {axis} with extent {}", dims[axis])));
    }
    let [d, h, w] = [dims[0], dims[1], dims[2]];
    let at = |z: usize, y: usize, x: usize| v.data()[(z * h + y) * w + x];
    let (rows, cols) = match axis {
        0 => (h, w),
        1 => (d, w),
        _ => (d, h),
    };
    let mut px = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            px.push(match axis {
                0 => at(index, r, c),
                1 => at(r, index, c),
                _ => at(r, c, index),
            });
        }
    }
    Ok((rows, cols, px))
}

/// Strength of the red overlay at saliency 1.
const OVERLAY: f64 = 0.6;

fn to_byte(x: f64) -> u8 {
    x.round().clamp(0.0, 255.0) as u8
}

/// Encode one slice as a binary graymap (the volume alone) and a binary
/// pixmap (the volume with saliency blended toward red). Gray levels span
/// the volume's global minimum to maximum.
pub fn encode_slice(map: &Tensor<f32>, volume: &Tensor<f32>, axis: usize, index: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if map.dims() != volume.dims() || volume.rank() != 3 {
        return Err(Error::shape(format!("map {:?} and volume {:?} must match", map.dims(), volume.dims())));
    }
    let (lo, hi) = (volume.min_value() as f64, volume.max_value() as f64);
    let (rows, cols, vpx) = slice(volume, axis, index)?;
    let (_, _, spx) = slice(map, axis, index)?;
    let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    let mut ppm = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for (&v, &s) in vpx.iter().zip(&spx) {
        let g = if hi > lo { 255.0 * (v as f64 - lo) / (hi - lo) } else { 0.0 };
        let a = OVERLAY * (s as f64).clamp(0.0, 1.0);
        let gray = to_byte(g);
        pgm.push(gray);
        let base = gray as f64;
        let red = to_byte(base + (255.0 - base) * a);
        let other = to_byte(base * (1.0 - a));
        ppm.extend_from_slice(&[red, other, other]);
    }
    Ok((pgm, ppm))
}

/// Write `<prefix>_a<axis>_<index>.pgm` and `.ppm` for each index; returns
/// the written paths.
pub fn export_slices(
    map: &SaliencyMap,
    volume: &Tensor<f32>,
    axis: usize,
    indices: &[usize],
    dir: impl AsRef<Path>,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for &i in indices {
        let (pgm, ppm) = encode_slice(&map.volume, volume, axis, i)?;
        for (ext, bytes) in [("pgm", pgm), ("ppm", ppm)] {
            let path = dir.join(format!("{prefix}_a{axis}_{i:03}.{ext}"));
            fs::write(&path, bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(vec![16, 32, 32], (0..16 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn small_net(seed: u64) -> Network {
        Network::build(NetworkConfig::new(1, [16, 32, 32], seed)).unwrap()
    }

    #[test]
    fn single_active_channel_peaks_at_its_maximum() {
        let mut act = vec![0.0f32; 4 * 5 * 6 * 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in act.iter_mut().skip(1).step_by(3) {
            *v = rng.random_range(0.0..1.0);
        }
        let a = Tensor::from_vec(vec![1, 4, 5, 6, 3], act).unwrap();
        let g = Tensor::<f32>::full(vec![1, 4, 5, 6, 3], 0.25).unwrap();
        let cam = class_activation(&a, &g).unwrap();
        let channel: Vec<f32> = a.data().iter().skip(1).step_by(3).copied().collect();
        let best = channel.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        assert_eq!(cam.argmax(), best);
        for (c, &v) in cam.data().iter().zip(&channel) {
            assert!((c - 0.25 * v as f64).abs() < 1e-7);
        }
    }

    #[test]
    fn maps_are_non_negative_and_normalized() {
        let net = small_net(1);
        for seed in 0..3 {
            let m = grad_cam(&net, &random_volume(seed), net.default_saliency_layer()).unwrap();
            assert_eq!(m.volume.dims(), &[16, 32, 32]);
            assert!(m.volume.data().iter().all(|&v| v >= 0.0));
            if !m.all_zero {
                assert_eq!(m.volume.max_value(), 1.0);
            }
            assert_eq!(grad_cam(&net, &random_volume(seed), net.default_saliency_layer()).unwrap(), m);
        }
    }

    #[test]
    fn unknown_or_non_conv_layer_rejected() {
        let net = small_net(0);
        let x = random_volume(0);
        assert!(matches!(grad_cam(&net, &x, "nope"), Err(Error::Config(_))));
        assert!(matches!(grad_cam(&net, &x, "pool4"), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_survives_positive_head_scaling() {
        let net = small_net(2);
        let x = random_volume(3);
        let layer = net.default_saliency_layer().to_string();
        let base = grad_cam(&net, &x, &layer).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let c: f32 = rng.random_range(0.1..10.0);
            let mut scaled = net.clone();
            for name in ["dense37.weight", "dense37.bias"] {
                scaled.params_mut().get_mut(name).unwrap().scale_in_place(c);
            }
            let m = grad_cam(&scaled, &x, &layer).unwrap();
            assert_eq!(argmax_voxel(&m.volume), argmax_voxel(&base.volume));
        }
    }

    fn map_of(v: Tensor<f32>) -> SaliencyMap {
        SaliencyMap {
            all_zero: v.max_value() == 0.0,
            volume: v,
            layer: "x".into(),
            predicted_glaucoma: true,
            logit: 0.0,
            max_before_normalization: 1.0,
        }
    }

    #[test]
    fn region_mass_cases() {
        let uniform = map_of(Tensor::full(vec![8, 8, 8], 1.0).unwrap());
        let full = CropBox::full([8, 8, 8]);
        assert_eq!(region_mass(&uniform, &full, 0.5).unwrap().mass_fraction, 1.0);
        let eighth = CropBox::new([0, 4], [4, 8], [2, 6]).unwrap();
        let r = region_mass(&uniform, &eighth, 0.5).unwrap();
        assert!((r.mass_fraction - 0.125).abs() < 1e-6 && !r.highlighted);
        let zero = map_of(Tensor::zeros(vec![8, 8, 8]).unwrap());
        let r = region_mass(&zero, &full, 0.5).unwrap();
        assert_eq!((r.mass_fraction, r.highlighted), (0.0, false));
        let outside = CropBox::new([0, 9], [0, 1], [0, 1]).unwrap();
        assert!(matches!(region_mass(&uniform, &outside, 0.5), Err(Error::Box(_))));
    }

    #[test]
    fn inside_plus_outside_is_total() {
        let m = random_volume(4);
        let b = CropBox::new([3, 11], [5, 20], [0, 17]).unwrap();
        let (i, o) = split_mass(&m, &b).unwrap();
        let mut brute = 0.0;
        for z in 3..11 {
            for y in 5..20 {
                for x in 0..17 {
                    brute += m.get(&[z, y, x]).unwrap() as f64;
                }
            }
        }
        assert!((i - brute).abs() < 1e-9);
        let total: f64 = m.data().iter().map(|&v| v as f64).sum();
        assert!((i + o - total).abs() < 1e-9);
    }

    #[test]
    fn upsampled_peak_stays_near_coarse_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            // Background below 0.3 with one dominant peak at 1.
            let mut vals: Vec<f64> = (0..147).map(|_| rng.random_range(0.0..0.3)).collect();
            vals[rng.random_range(0..147)] = 1.0;
            let coarse = Tensor::from_vec(vec![3, 7, 7], vals).unwrap();
            let up = resample_trilinear(&coarse, [16, 32, 32]).unwrap();
            let ci = coarse.unravel(coarse.argmax());
            let ui = up.unravel(up.argmax());
            for k in 0..3 {
                let (n0, n1) = (coarse.dims()[k] as f64, up.dims()[k] as f64);
                let mapped = ui[k] as f64 * (n0 - 1.0) / (n1 - 1.0);
                assert!((mapped - ci[k] as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn golden_two_by_two_slice() {
        let volume = Tensor::from_vec(vec![1, 2, 2], vec![0.0f32, 1.0, 2.0, 4.0]).unwrap();
        let map = Tensor::from_vec(vec![1, 2, 2], vec![0.0f32, 1.0, 0.5, 0.0]).unwrap();
        let (pgm, ppm) = encode_slice(&map, &volume, 0, 0).unwrap();
        // Gray: 0, 63.75 -> 64, 127.5 -> 128, 255.
        let mut want = b"P5\n2 2\n255\n".to_vec();
        want.extend_from_slice(&[0, 64, 128, 255]);
        assert_eq!(pgm, want);
        // Red blend a = 0.6 s: (64 + 191 * 0.6, 64 * 0.4) = (178.6, 25.6); (128 + 127 * 0.3, 128 * 0.7) = (166.1, 89.6).
        let mut want = b"P6\n2 2\n255\n".to_vec();
        want.extend_from_slice(&[0, 0, 0, 179, 26, 26, 166, 90, 90, 255, 255, 255]);
        assert_eq!(ppm, want);
    }

    #[test]
    fn zero_map_gives_plain_gray_and_bad_index_errors() {
        let volume = random_volume(6);
        let zero = map_of(Tensor::zeros(vec![16, 32, 32]).unwrap());
        let (pgm, ppm) = encode_slice(&zero.volume, &volume, 1, 5).unwrap();
        let gray = &pgm[pgm.len() - 16 * 32..];
        let rgb = &ppm[ppm.len() - 3 * 16 * 32..];
        for (g, px) in gray.iter().zip(rgb.chunks_exact(3)) {
            assert_eq!(px, &[*g, *g, *g]);
        }
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(export_slices(&zero, &volume, 0, &[16], dir.path(), "s"), Err(Error::Index(_))));
        assert!(matches!(export_slices(&zero, &volume, 3, &[0], dir.path(), "s"), Err(Error::Axis { .. })));
        let paths = export_slices(&zero, &volume, 2, &[0, 31], dir.path(), "s").unwrap();
        assert_eq!(paths.len(), 4);
        assert_eq!(fs::read(&paths[0]).unwrap(), encode_slice(&zero.volume, &volume, 2, 0).unwrap().0);
    }
}
