//! Global average pooling and the fully connected head.

use super::{bvc, expect_rank, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Mean over (D, H, W) per channel: (B, D, H, W, C) -> (B, C).
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 5, "global_avg_pool")?;
    let (b, voxels, c) = bvc(x.dims());
    let mut out = vec![T::zero(); b * c];
    let n = T::from_f64(voxels as f64);
    for bi in 0..b {
        let acc = &mut out[bi * c..(bi + 1) * c];
        for row in x.data()[bi * voxels * c..(bi + 1) * voxels * c].chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a / n;
        }
    }
    Tensor::from_vec(vec![b, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_dims: &[usize], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, voxels, c) = bvc(input_dims);
    if upstream.dims() != [b, c] {
        return Err(Error::shape("global_avg_pool upstream must be (B, C)"));
    }
    let n = T::from_f64(voxels as f64);
    let mut dx = Vec::with_capacity(b * voxels * c);
    for bi in 0..b {
        let row: Vec<T> = upstream.data()[bi * c..(bi + 1) * c].iter().map(|&g| g / n).collect();
        for _ in 0..voxels {
            dx.extend_from_slice(&row);
        }
    }
    Tensor::from_vec(input_dims.to_vec(), dx)
}

/// Affine map (B, F) x (F, O) + bias(O) -> (B, O).
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 2, "dense")?;
    expect_rank(weights, 2, "dense weights")?;
    let (b, f) = (x.dims()[0], x.dims()[1]);
    let o = weights.dims()[1];
    if weights.dims()[0] != f {
        return Err(Error::shape(format!(
            "dense expects {} features, got {f}",
            weights.dims()[0]
        )));
    }
    if bias.len() != o {
        return Err(Error::shape("dense bias length must equal output width"));
    }
    let mut out = Vec::with_capacity(b * o);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm(MatRef::new(x.data(), b, f), MatRef::new(weights.data(), f, o), T::one(), &mut out);
    Tensor::from_vec(vec![b, o], out)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let (b, f) = (x.dims()[0], x.dims()[1]);
    let o = weights.dims()[1];
    if upstream.dims() != [b, o] {
        return Err(Error::shape("dense upstream must be (B, O)"));
    }
    let dy = upstream.data();
    let mut dw = vec![T::zero(); f * o];
    gemm(MatRef::new(x.data(), b, f).t(), MatRef::new(dy, b, o), T::zero(), &mut dw);
    let mut db = vec![T::zero(); o];
    for row in dy.chunks_exact(o) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    let mut dx = vec![T::zero(); b * f];
    gemm(MatRef::new(dy, b, o), MatRef::new(weights.data(), f, o).t(), T::zero(), &mut dx);
    Ok(LayerGrads {
        input: Tensor::from_vec(vec![b, f], dx)?,
        params: vec![
            ("weight", Tensor::from_vec(vec![f, o], dw)?),
            ("bias", Tensor::from_vec(vec![o], db)?),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error, reduce, ReduceOp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn gap_constant_and_single_voxel() {
        let x = Tensor::full(vec![2, 2, 3, 2, 3], 1.5f64).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));

        let one = Tensor::from_vec(vec![1, 1, 1, 1, 3], vec![0.1f64, -2.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&one).unwrap().data(), one.data());
    }

    #[test]
    fn gap_matches_reduce_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // Dyadic values keep both summation orders exact.
        let dims = [2, 2, 2, 4, 3];
        let n: usize = dims.iter().product();
        let x = Tensor::from_vec(
            dims.to_vec(),
            (0..n).map(|_| rng.random_range(-64i32..64) as f64 / 8.0).collect(),
        )
        .unwrap();
        let fast = global_avg_pool(&x).unwrap();
        let oracle = reduce(ReduceOp::Mean, &x, &[1, 2, 3], false).unwrap();
        assert_eq!(fast.data(), oracle.data());
    }

    #[test]
    fn gap_backward_spreads_uniformly() {
        let dx = global_avg_pool_backward(&[1, 2, 2, 1, 2], &Tensor::from_vec(vec![1, 2], vec![4.0f64, 8.0]).unwrap())
            .unwrap();
        assert_eq!(dx.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn dense_zero_weights_and_identity() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::zeros(vec![3, 1]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![0.3]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[0.3, 0.3]);

        let x1 = Tensor::from_vec(vec![2, 1], vec![-1.5f64, 2.5]).unwrap();
        let w1 = Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let b1 = Tensor::zeros(vec![1]).unwrap();
        assert_eq!(dense_forward(&x1, &w1, &b1).unwrap().data(), x1.data());

        let bad = Tensor::zeros(vec![4, 1]).unwrap();
        assert!(matches!(dense_forward(&x, &bad, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random(&[3, 5], &mut rng);
        let w = random(&[5, 1], &mut rng);
        let b = random(&[1], &mut rng);
        let probe = random(&[3, 1], &mut rng);
        let loss = |y: &Tensor<f64>| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let g = dense_backward(&x, &w, &probe).unwrap();
        let nx = finite_diff_grad(|x| loss(&dense_forward(x, &w, &b).unwrap()), &x, 1e-6).unwrap();
        let nw = finite_diff_grad(|w| loss(&dense_forward(&x, w, &b).unwrap()), &w, 1e-6).unwrap();
        let nb = finite_diff_grad(|b| loss(&dense_forward(&x, &w, b).unwrap()), &b, 1e-6).unwrap();
        assert!(max_relative_error(nx.data(), g.input.data(), 1e-8) < 1e-6);
        assert!(max_relative_error(nw.data(), g.param("weight").unwrap().data(), 1e-8) < 1e-6);
        assert!(max_relative_error(nb.data(), g.param("bias").unwrap().data(), 1e-8) < 1e-6);
    }
}
