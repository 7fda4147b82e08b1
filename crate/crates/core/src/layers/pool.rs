//! Unpadded 3D max pooling. Axes with a window larger than one use stride 2,
//! the rest stride 1.

use serde::{Deserialize, Serialize};

use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: [usize; 3],
}

impl PoolSpec {
    pub fn new(window: [usize; 3]) -> Result<Self> {
        if window.iter().any(|&w| w == 0) {
            return Err(Error::config(format!("pool window must be positive, got {window:?}")));
        }
        Ok(PoolSpec { window })
    }

    pub fn stride(&self) -> [usize; 3] {
        self.window.map(|w| if w > 1 { 2 } else { 1 })
    }

    /// Output spatial extents, or `None` if some axis is smaller than the window.
    pub fn output_extents(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let stride = self.stride();
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] < self.window[a] {
                return None;
            }
            out[a] = (input[a] - self.window[a]) / stride[a] + 1;
        }
        Some(out)
    }
}

/// Flat input offsets of each output's maximum.
#[derive(Clone, Debug)]
pub struct PoolCache {
    pub input_dims: Vec<usize>,
    pub argmax: Vec<usize>,
}

pub fn maxpool3d_forward<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, PoolCache)> {
    expect_rank(x, 5, "maxpool3d")?;
    let dims = x.dims();
    let [b, d, h, w, c] = [dims[0], dims[1], dims[2], dims[3], dims[4]];
    let [od, oh, ow] = spec.output_extents([d, h, w]).ok_or_else(|| {
        Error::shape(format!("volume {:?} is smaller than pool window {:?}", &dims[1..4], spec.window))
    })?;
    let [sd, sh, sw] = spec.stride();
    let [wd, wh, ww] = spec.window;
    let src = x.data();
    let n_out = b * od * oh * ow * c;
    let mut out = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    let mut best = vec![T::zero(); c];
    let mut best_at = vec![0usize; c];

    for bi in 0..b {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut first = true;
                    for dz in 0..wd {
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let off = (((bi * d + z * sd + dz) * h + y * sh + dy) * w
                                    + xx * sw
                                    + dx)
                                    * c;
                                let row = &src[off..off + c];
                                if first {
                                    best.copy_from_slice(row);
                                    for (ch, slot) in best_at.iter_mut().enumerate() {
                                        *slot = off + ch;
                                    }
                                    first = false;
                                } else {
                                    for ch in 0..c {
                                        // Strict comparison keeps the first maximum in scan order.
                                        if row[ch] > best[ch] {
                                            best[ch] = row[ch];
                                            best_at[ch] = off + ch;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out.extend_from_slice(&best);
                    argmax.extend_from_slice(&best_at);
                }
            }
        }
    }

    Ok((
        Tensor::from_vec(vec![b, od, oh, ow, c], out)?,
        PoolCache { input_dims: dims.to_vec(), argmax },
    ))
}

/// Scatter the upstream gradient onto the recorded maxima.
pub fn maxpool3d_backward<T: Scalar>(cache: &PoolCache, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.len() != cache.argmax.len() {
        return Err(Error::shape("maxpool3d upstream does not match the cached output"));
    }
    let mut dx = Tensor::zeros(cache.input_dims.clone())?;
    let buf = dx.data_mut();
    for (&at, &g) in cache.argmax.iter().zip(upstream.data()) {
        buf[at] += g;
    }
    Ok(dx)
}
