//! Stride-1 "same"-padded 3D convolution via im2col and GEMM.

use serde::{Deserialize, Serialize};

use super::{expect_rank, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (k_d, k_h, k_w); every extent odd so zero padding is symmetric.
    pub kernel: [usize; 3],
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config("convolution channel counts must be positive"));
        }
        if kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::config(format!("kernel extents must be odd, got {kernel:?}")));
        }
        Ok(ConvSpec { in_channels, out_channels, kernel })
    }

    pub fn weight_dims(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [kd, kh, kw, self.in_channels, self.out_channels]
    }

    /// Rows of the im2col matrix: one per kernel tap and input channel.
    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }

    fn check(&self, x: &Tensor<impl Scalar>) -> Result<()> {
        expect_rank(x, 5, "conv3d")?;
        if x.dims()[4] != self.in_channels {
            return Err(Error::shape(format!(
                "conv3d expects {} input channels, got {}",
                self.in_channels,
                x.dims()[4]
            )));
        }
        Ok(())
    }
}

/// Gather every kernel window into a row of a (voxels x patch_len) matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec) -> Vec<T> {
    let [b, d, h, w, c] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3], x.dims()[4]];
    let [kd, kh, kw] = spec.kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let k = spec.patch_len();
    let src = x.data();
    let mut col = vec![T::zero(); b * d * h * w * k];
    let mut row = 0;
    for bi in 0..b {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let dst = &mut col[row * k..(row + 1) * k];
                    let mut tap = 0;
                    for dz in 0..kd {
                        let sz = z as isize + dz as isize - pd;
                        for dy in 0..kh {
                            let sy = y as isize + dy as isize - ph;
                            for dx in 0..kw {
                                let sx = xx as isize + dx as isize - pw;
                                if sz >= 0
                                    && sy >= 0
                                    && sx >= 0
                                    && (sz as usize) < d
                                    && (sy as usize) < h
                                    && (sx as usize) < w
                                {
                                    let off = (((bi * d + sz as usize) * h + sy as usize) * w
                                        + sx as usize)
                                        * c;
                                    dst[tap * c..(tap + 1) * c].copy_from_slice(&src[off..off + c]);
                                }
                                tap += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

/// Scatter-add the rows of a column-gradient matrix back onto the input grid.
fn col2im<T: Scalar>(dcol: &[T], dims: &[usize], spec: &ConvSpec) -> Vec<T> {
    let [b, d, h, w, c] = [dims[0], dims[1], dims[2], dims[3], dims[4]];
    let [kd, kh, kw] = spec.kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let k = spec.patch_len();
    let mut dx = vec![T::zero(); b * d * h * w * c];
    let mut row = 0;
    for bi in 0..b {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let src = &dcol[row * k..(row + 1) * k];
                    let mut tap = 0;
                    for dz in 0..kd {
                        let sz = z as isize + dz as isize - pd;
                        for dy in 0..kh {
                            let sy = y as isize + dy as isize - ph;
                            for dxk in 0..kw {
                                let sx = xx as isize + dxk as isize - pw;
                                if sz >= 0
                                    && sy >= 0
                                    && sx >= 0
                                    && (sz as usize) < d
                                    && (sy as usize) < h
                                    && (sx as usize) < w
                                {
                                    let off = (((bi * d + sz as usize) * h + sy as usize) * w
                                        + sx as usize)
                                        * c;
                                    for (o, &g) in
                                        dx[off..off + c].iter_mut().zip(&src[tap * c..(tap + 1) * c])
                                    {
                                        *o += g;
                                    }
                                }
                                tap += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    dx
}

fn check_params<T: Scalar>(spec: &ConvSpec, weights: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<()> {
    if weights.dims() != spec.weight_dims() {
        return Err(Error::shape(format!(
            "conv3d weights {:?} do not match {:?}",
            weights.shape(),
            spec.weight_dims()
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != spec.out_channels {
            return Err(Error::shape(format!(
                "conv3d bias has {} entries, expected {}",
                bias.len(),
                spec.out_channels
            )));
        }
    }
    Ok(())
}

/// Cross-correlation with zero "same" padding and stride 1.
///
/// `weights` has shape (k_d, k_h, k_w, C_i, C_o) and `bias` has C_o entries.
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    spec.check(x)?;
    check_params(spec, weights, Some(bias))?;
    let dims = x.dims();
    let m = dims[0] * dims[1] * dims[2] * dims[3];
    let (k, co) = (spec.patch_len(), spec.out_channels);

    let mut out = Vec::with_capacity(m * co);
    for _ in 0..m {
        out.extend_from_slice(bias.data());
    }
    let owned;
    let col: &[T] = if spec.is_pointwise() {
        x.data()
    } else {
        owned = im2col(x, spec);
        &owned
    };
    gemm(MatRef::new(col, m, k), MatRef::new(weights.data(), k, co), T::one(), &mut out);
    Tensor::from_vec(vec![dims[0], dims[1], dims[2], dims[3], co], out)
}

/// Gradients for input ("input"), "weight" and "bias" given the upstream
/// gradient of the forward output.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    spec.check(x)?;
    check_params(spec, weights, None)?;
    let dims = x.dims();
    let expect = [dims[0], dims[1], dims[2], dims[3], spec.out_channels];
    if upstream.dims() != expect {
        return Err(Error::shape(format!(
            "conv3d upstream {:?} does not match output {:?}",
            upstream.shape(),
            expect
        )));
    }
    let m = dims[0] * dims[1] * dims[2] * dims[3];
    let (k, co) = (spec.patch_len(), spec.out_channels);
    let dy = upstream.data();

    let mut db = vec![T::zero(); co];
    for row in dy.chunks_exact(co) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }

    let owned;
    let col: &[T] = if spec.is_pointwise() {
        x.data()
    } else {
        owned = im2col(x, spec);
        &owned
    };
    let mut dw = vec![T::zero(); k * co];
    gemm(MatRef::new(col, m, k).t(), MatRef::new(dy, m, co), T::zero(), &mut dw);

    let mut dcol = vec![T::zero(); m * k];
    gemm(MatRef::new(dy, m, co), MatRef::new(weights.data(), k, co).t(), T::zero(), &mut dcol);
    let dx = if spec.is_pointwise() { dcol } else { col2im(&dcol, dims, spec) };

    Ok(LayerGrads {
        input: Tensor::from_vec(dims.to_vec(), dx)?,
        params: vec![
            ("weight", Tensor::from_vec(spec.weight_dims().to_vec(), dw)?),
            ("bias", Tensor::from_vec(vec![co], db)?),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Direct seven-loop cross-correlation used as an independent oracle.
    fn naive_conv(x: &Tensor<f64>, spec: &ConvSpec, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [bn, d, h, wd, ci] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3], x.dims()[4]];
        let [kd, kh, kw] = spec.kernel;
        let co = spec.out_channels;
        let mut out = Tensor::zeros(vec![bn, d, h, wd, co]).unwrap();
        for bi in 0..bn {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        for o in 0..co {
                            let mut acc = b.data()[o];
                            for dz in 0..kd {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let sz = z as isize + dz as isize - (kd / 2) as isize;
                                        let sy = y as isize + dy as isize - (kh / 2) as isize;
                                        let sx = xx as isize + dx as isize - (kw / 2) as isize;
                                        if sz < 0 || sy < 0 || sx < 0 {
                                            continue;
                                        }
                                        let (sz, sy, sx) = (sz as usize, sy as usize, sx as usize);
                                        if sz >= d || sy >= h || sx >= wd {
                                            continue;
                                        }
                                        for i in 0..ci {
                                            acc += x.get(&[bi, sz, sy, sx, i]).unwrap()
                                                * w.get(&[dz, dy, dx, i, o]).unwrap();
                                        }
                                    }
                                }
                            }
                            out.set(&[bi, z, y, xx, o], acc).unwrap();
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_selects_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 2, 3, 3, 2], &mut rng);
        let spec = ConvSpec::new(2, 1, [1, 1, 1]).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![1]).unwrap();
        let y = conv3d_forward(&x, &spec, &w, &b).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, x.data()[i * 2 + 1]);
        }
    }

    #[test]
    fn ones_kernel_on_constant_interior() {
        let spec = ConvSpec::new(1, 1, [1, 3, 3]).unwrap();
        let x = Tensor::<f64>::full(vec![1, 1, 3, 3, 1], 1.0).unwrap();
        let w = Tensor::full(vec![1, 3, 3, 1, 1], 1.0).unwrap();
        let b = Tensor::zeros(vec![1]).unwrap();
        let y = conv3d_forward(&x, &spec, &w, &b).unwrap();
        assert_eq!(y.get(&[0, 0, 1, 1, 0]).unwrap(), 9.0);
        // Corners see four in-bounds taps.
        assert_eq!(y.get(&[0, 0, 0, 0, 0]).unwrap(), 4.0);
    }

    #[test]
    fn zero_weights_give_bias() {
        let spec = ConvSpec::new(3, 2, [3, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 2, 2, 3], &mut rng);
        let w = Tensor::zeros(spec.weight_dims().to_vec()).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.25, -3.0]).unwrap();
        let y = conv3d_forward(&x, &spec, &w, &b).unwrap();
        for pair in y.data().chunks(2) {
            assert_eq!(pair, &[0.25, -3.0]);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kernel in [[1, 3, 3], [3, 1, 1], [5, 5, 5], [1, 1, 1], [3, 3, 3]] {
            let spec = ConvSpec::new(2, 3, kernel).unwrap();
            let x = random(&[2, 4, 5, 3, 2], &mut rng);
            let w = random(&spec.weight_dims(), &mut rng);
            let b = random(&[3], &mut rng);
            let fast = conv3d_forward(&x, &spec, &w, &b).unwrap();
            let slow = naive_conv(&x, &spec, &w, &b);
            assert!(max_relative_error(fast.data(), slow.data(), 1e-9) < 1e-12, "{kernel:?}");
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let spec = ConvSpec::new(2, 1, [1, 1, 1]).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 1, 1, 1, 3]).unwrap();
        let w = Tensor::zeros(vec![1, 1, 1, 2, 1]).unwrap();
        let b = Tensor::zeros(vec![1]).unwrap();
        assert!(matches!(conv3d_forward(&x, &spec, &w, &b), Err(Error::Shape(_))));
        assert!(ConvSpec::new(1, 1, [2, 3, 3]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::new(2, 2, [1, 3, 3]).unwrap();
        let x = random(&[1, 2, 3, 3, 2], &mut rng);
        let w = random(&spec.weight_dims(), &mut rng);
        let dy = Tensor::zeros(vec![1, 2, 3, 3, 2]).unwrap();
        let g = conv3d_backward(&x, &spec, &w, &dy).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.param("weight").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.param("bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_pointwise_weight_grad() {
        let spec = ConvSpec::new(1, 1, [1, 1, 1]).unwrap();
        let x = Tensor::<f64>::from_vec(vec![1, 1, 1, 1, 1], vec![1.5]).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![0.7]).unwrap();
        let dy = Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![-2.0]).unwrap();
        let g = conv3d_backward(&x, &spec, &w, &dy).unwrap();
        assert_eq!(g.param("weight").unwrap().data(), &[1.5 * -2.0]);
        assert_eq!(g.param("bias").unwrap().data(), &[-2.0]);
        assert!((g.input.data()[0] - 0.7 * -2.0f64).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::new(2, 2, [1, 3, 3]).unwrap();
        let x = random(&[2, 4, 4, 4, 2], &mut rng);
        let w = random(&spec.weight_dims(), &mut rng);
        let b = random(&[2], &mut rng);
        let probe = random(&[2, 4, 4, 4, 2], &mut rng);
        let loss = |y: &Tensor<f64>| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let g = conv3d_backward(&x, &spec, &w, &probe).unwrap();

        let nx = finite_diff_grad(|x| loss(&conv3d_forward(x, &spec, &w, &b).unwrap()), &x, 1e-6)
            .unwrap();
        assert!(max_relative_error(nx.data(), g.input.data(), 1e-6) < 1e-4);
        let nw = finite_diff_grad(|w| loss(&conv3d_forward(&x, &spec, w, &b).unwrap()), &w, 1e-6)
            .unwrap();
        assert!(max_relative_error(nw.data(), g.param("weight").unwrap().data(), 1e-6) < 1e-4);
        let nb = finite_diff_grad(|b| loss(&conv3d_forward(&x, &spec, &w, b).unwrap()), &b, 1e-6)
            .unwrap();
        assert!(max_relative_error(nb.data(), g.param("bias").unwrap().data(), 1e-6) < 1e-4);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn same_padding_preserves_spatial_extents(
            d in 1usize..6, h in 1usize..6, w in 1usize..6,
            kd in 0usize..3, kh in 0usize..3, kw in 0usize..3,
            ci in 1usize..3, co in 1usize..3,
        ) {
            let spec = ConvSpec::new(ci, co, [2 * kd + 1, 2 * kh + 1, 2 * kw + 1]).unwrap();
            let x = Tensor::<f32>::full(vec![1, d, h, w, ci], 0.5).unwrap();
            let wt = Tensor::full(spec.weight_dims().to_vec(), 0.1).unwrap();
            let b = Tensor::zeros(vec![co]).unwrap();
            let y = conv3d_forward(&x, &spec, &wt, &b).unwrap();
            prop_assert_eq!(y.dims(), &[1, d, h, w, co]);
        }
    }
}
