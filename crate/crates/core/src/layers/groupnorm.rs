//! Group normalization over (D, H, W, channels-in-group) per sample.

use serde::{Deserialize, Serialize};

use super::{bvc, expect_rank, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// `gcd(8, channels)`, which always divides the channel count.
pub fn default_groups(channels: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    gcd(8, channels).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupNormSpec {
    pub channels: usize,
    pub groups: usize,
    pub epsilon: f64,
}

impl GroupNormSpec {
    pub fn new(channels: usize, groups: usize, epsilon: f64) -> Result<Self> {
        if channels == 0 || groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::config("group norm epsilon must be positive"));
        }
        Ok(GroupNormSpec { channels, groups, epsilon })
    }

    pub fn with_default_groups(channels: usize) -> Result<Self> {
        Self::new(channels, default_groups(channels), DEFAULT_EPSILON)
    }
}

/// Statistics kept from the forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache<T: Scalar = f32> {
    pub spec: GroupNormSpec,
    /// Normalized input before the affine transform.
    pub x_hat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per (sample, group).
    pub inv_std: Vec<T>,
}

pub fn groupnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &GroupNormSpec,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<(Tensor<T>, GroupNormCache<T>)> {
    expect_rank(x, 5, "groupnorm")?;
    let (b, voxels, c) = bvc(x.dims());
    if c != spec.channels {
        return Err(Error::shape(format!(
            "groupnorm expects {} channels, got {c}",
            spec.channels
        )));
    }
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape("groupnorm scale/shift length must equal channel count"));
    }
    let cpg = c / spec.groups;
    let count = (voxels * cpg) as f64;
    let src = x.data();
    let mut x_hat = vec![T::zero(); src.len()];
    let mut out = vec![T::zero(); src.len()];
    let mut inv_std = Vec::with_capacity(b * spec.groups);

    for bi in 0..b {
        let sample = &src[bi * voxels * c..(bi + 1) * voxels * c];
        let mut sums = vec![0.0f64; spec.groups];
        for row in sample.chunks_exact(c) {
            for (ch, &v) in row.iter().enumerate() {
                sums[ch / cpg] += v.to_f64();
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / count).collect();
        let mut sq = vec![0.0f64; spec.groups];
        for row in sample.chunks_exact(c) {
            for (ch, &v) in row.iter().enumerate() {
                let dev = v.to_f64() - means[ch / cpg];
                sq[ch / cpg] += dev * dev;
            }
        }
        let istd: Vec<f64> = sq.iter().map(|s| 1.0 / (s / count + spec.epsilon).sqrt()).collect();
        inv_std.extend(istd.iter().map(|&v| T::from_f64(v)));

        let base = bi * voxels * c;
        for (r, row) in sample.chunks_exact(c).enumerate() {
            for (ch, &v) in row.iter().enumerate() {
                let g = ch / cpg;
                let xh = T::from_f64((v.to_f64() - means[g]) * istd[g]);
                let idx = base + r * c + ch;
                x_hat[idx] = xh;
                out[idx] = scale.data()[ch] * xh + shift.data()[ch];
            }
        }
    }

    let dims = x.dims().to_vec();
    Ok((
        Tensor::from_vec(dims.clone(), out)?,
        GroupNormCache { spec: *spec, x_hat: Tensor::from_vec(dims, x_hat)?, inv_std },
    ))
}

/// Gradients for "input", "scale" and "shift". The input gradient is routed
/// through both the group mean and the group variance.
pub fn groupnorm_backward<T: Scalar>(
    cache: &GroupNormCache<T>,
    scale: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    if upstream.shape() != cache.x_hat.shape() {
        return Err(Error::shape(format!(
            "groupnorm upstream {:?} does not match {:?}",
            upstream.shape(),
            cache.x_hat.shape()
        )));
    }
    let spec = cache.spec;
    let (b, voxels, c) = bvc(upstream.dims());
    let cpg = c / spec.groups;
    let count = (voxels * cpg) as f64;
    let dy = upstream.data();
    let xh = cache.x_hat.data();

    let mut dscale = vec![0.0f64; c];
    let mut dshift = vec![0.0f64; c];
    let mut dx = vec![T::zero(); dy.len()];

    for bi in 0..b {
        let range = bi * voxels * c..(bi + 1) * voxels * c;
        let (dys, xhs) = (&dy[range.clone()], &xh[range.clone()]);
        // Per-group means of dxhat and dxhat * xhat.
        let mut m1 = vec![0.0f64; spec.groups];
        let mut m2 = vec![0.0f64; spec.groups];
        for (drow, xrow) in dys.chunks_exact(c).zip(xhs.chunks_exact(c)) {
            for ch in 0..c {
                let (g, xv) = (drow[ch].to_f64(), xrow[ch].to_f64());
                dscale[ch] += g * xv;
                dshift[ch] += g;
                let dxh = g * scale.data()[ch].to_f64();
                m1[ch / cpg] += dxh;
                m2[ch / cpg] += dxh * xv;
            }
        }
        for v in m1.iter_mut().chain(m2.iter_mut()) {
            *v /= count;
        }
        let dst = &mut dx[range];
        for (r, (drow, xrow)) in dys.chunks_exact(c).zip(xhs.chunks_exact(c)).enumerate() {
            for ch in 0..c {
                let grp = ch / cpg;
                let istd = cache.inv_std[bi * spec.groups + grp].to_f64();
                let dxh = drow[ch].to_f64() * scale.data()[ch].to_f64();
                dst[r * c + ch] =
                    T::from_f64(istd * (dxh - m1[grp] - xrow[ch].to_f64() * m2[grp]));
            }
        }
    }

    Ok(LayerGrads {
        input: Tensor::from_vec(upstream.dims().to_vec(), dx)?,
        params: vec![
            ("scale", Tensor::from_vec(vec![c], dscale.into_iter().map(T::from_f64).collect())?),
            ("shift", Tensor::from_vec(vec![c], dshift.into_iter().map(T::from_f64).collect())?),
        ],
    })
}
