//! Spatial feature statistics and adaptive renormalization.
//!
//! These are the primitives every piece of style alignment builds on: per
//! sample, per channel mean/std over the spatial extent, instance
//! normalization against those statistics, and the two-input form that
//! renormalizes one tensor to another's statistics.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Default numerical stabilizer, applied inside the square root.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-sample, per-channel spatial statistics.
///
/// `sigma` is `sqrt(population variance + epsilon)`, so it is always at least
/// `sqrt(epsilon)` and degenerate (constant) inputs stay well defined.
#[derive(Debug, Clone)]
pub struct SpatialStats {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub epsilon: f64,
}

fn check_input(x: &ImageTensor, epsilon: f64) -> Result<()> {
    let (_, _, h, w) = x.dims();
    if h * w == 0 {
        return Err(Error::InvalidDimension("empty spatial extent".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !x.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput("spatial_stats input".into()));
    }
    Ok(())
}

/// Mean and stabilized standard deviation over the spatial dims of each
/// `(sample, channel)` slice. Variance uses the population divisor `H*W`.
pub fn spatial_stats(x: &ImageTensor, epsilon: f64) -> Result<SpatialStats> {
    check_input(x, epsilon)?;
    let (n, c, h, w) = x.dims();
    let count = (h * w) as f64;
    let mut mu = Array2::zeros((n, c));
    let mut sigma = Array2::zeros((n, c));
    for i in 0..n {
        for j in 0..c {
            let slice = x.data().slice(ndarray::s![i, j, .., ..]);
            let mean = slice.sum() / count;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            mu[[i, j]] = mean;
            sigma[[i, j]] = (var + epsilon).sqrt();
        }
    }
    Ok(SpatialStats { mu, sigma, epsilon })
}

/// Instance normalization: `(x - mu) / sigma` per sample and channel.
pub fn instance_norm(x: &ImageTensor, epsilon: f64) -> Result<ImageTensor> {
    let stats = spatial_stats(x, epsilon)?;
    let (n, c, _, _) = x.dims();
    let mut out = x.data().clone();
    for i in 0..n {
        for j in 0..c {
            let mu = stats.mu[[i, j]];
            let sd = stats.sigma[[i, j]];
            out.slice_mut(ndarray::s![i, j, .., ..])
                .mapv_inplace(|v| (v - mu) / sd);
        }
    }
    ImageTensor::new(out)
}

/// Renormalize `x` so that its per-channel spatial statistics match `y`'s:
/// `sigma(y) * instance_norm(x) + mu(y)`.
///
/// `x` and `y` must agree on sample and channel counts; spatial extents are
/// free to differ.
pub fn art_bn(x: &ImageTensor, y: &ImageTensor, epsilon: f64) -> Result<ImageTensor> {
    let (nx, cx, _, _) = x.dims();
    let (ny, cy, _, _) = y.dims();
    if nx != ny || cx != cy {
        return Err(Error::ShapeMismatch(format!(
            "art_bn needs matching (N, C); got ({nx}, {cx}) vs ({ny}, {cy})"
        )));
    }
    let y_stats = spatial_stats(y, epsilon)?;
    let normalized = instance_norm(x, epsilon)?;
    let mut out = normalized.into_data();
    for i in 0..nx {
        for j in 0..cx {
            let mu = y_stats.mu[[i, j]];
            let sd = y_stats.sigma[[i, j]];
            out.slice_mut(ndarray::s![i, j, .., ..])
                .mapv_inplace(|v| sd * v + mu);
        }
    }
    ImageTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256PlusPlus;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array4};

    fn tensor_2x2(values: [[f64; 2]; 2]) -> ImageTensor {
        ImageTensor::new(array![[
            [[values[0][0], values[0][1]], [values[1][0], values[1][1]]]
        ]])
        .unwrap()
    }

    fn random_tensor(dims: (usize, usize, usize, usize), seed: u64) -> ImageTensor {
        let mut rng = Xoshiro256PlusPlus::new(seed);
        let mut data = Array4::zeros(dims);
        data.mapv_inplace(|_| rng.standard_normal());
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn stats_of_known_patch() {
        // [[1,3],[5,7]]: mean 4, population variance 5.
        let x = tensor_2x2([[1.0, 3.0], [5.0, 7.0]]);
        let s = spatial_stats(&x, 1e-5).unwrap();
        assert_abs_diff_eq!(s.mu[[0, 0]], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sigma[[0, 0]], (5.0 + 1e-5f64).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.sigma[[0, 0]], 2.23607, epsilon = 1e-5);
    }

    #[test]
    fn stats_of_constant_input() {
        let x = ImageTensor::full((2, 3, 4, 4), 1.75).unwrap();
        let s = spatial_stats(&x, 1e-5).unwrap();
        for &m in s.mu.iter() {
            assert_abs_diff_eq!(m, 1.75, epsilon = 1e-15);
        }
        for &sd in s.sigma.iter() {
            assert_abs_diff_eq!(sd, 1e-5f64.sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn translated_sample_shifts_mean_only() {
        // Dyadic entries so that adding 10 is exact in binary floating point.
        let mut data = Array4::zeros((2, 2, 4, 4));
        let mut rng = Xoshiro256PlusPlus::new(11);
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let v = (rng.below(16) as f64) * 0.25;
                    data[[0, c, y, x]] = v;
                    data[[1, c, y, x]] = v + 10.0;
                }
            }
        }
        let s = spatial_stats(&ImageTensor::new(data).unwrap(), 1e-5).unwrap();
        for c in 0..2 {
            assert_eq!(s.mu[[1, c]], s.mu[[0, c]] + 10.0);
            assert_eq!(s.sigma[[1, c]], s.sigma[[0, c]]);
        }
    }

    #[test]
    fn empty_spatial_extent_is_rejected() {
        let bad = Array4::<f64>::zeros((1, 1, 0, 4));
        assert!(ImageTensor::new(bad).is_err());
        let x = tensor_2x2([[1.0, 2.0], [3.0, 4.0]]);
        assert!(matches!(spatial_stats(&x, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn instance_norm_of_known_patch() {
        let x = tensor_2x2([[1.0, 3.0], [5.0, 7.0]]);
        let out = instance_norm(&x, 1e-5).unwrap();
        let expected = [[-1.3416, -0.4472], [0.4472, 1.3416]];
        for y in 0..2 {
            for xx in 0..2 {
                assert_abs_diff_eq!(
                    out.data()[[0, 0, y, xx]],
                    expected[y][xx],
                    epsilon = 1e-3
                );
            }
        }
    }

    #[test]
    fn instance_norm_constant_is_zero() {
        let x = ImageTensor::full((1, 2, 3, 3), 42.0).unwrap();
        let out = instance_norm(&x, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let x = random_tensor((2, 4, 8, 8), 3);
        let out = instance_norm(&x, 1e-5).unwrap();
        let s = spatial_stats(&out, 1e-5).unwrap();
        for &m in s.mu.iter() {
            assert!(m.abs() <= 1e-5, "mean {m}");
        }
        for &sd in s.sigma.iter() {
            assert!((sd - 1.0).abs() <= 1e-3, "sigma {sd}");
        }
    }

    #[test]
    fn instance_norm_is_idempotent() {
        let x = random_tensor((1, 3, 6, 6), 17);
        let once = instance_norm(&x, 1e-5).unwrap();
        let twice = instance_norm(&once, 1e-5).unwrap();
        for (a, b) in once.data().iter().zip(twice.data().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-3);
        }
    }

    #[test]
    fn art_bn_self_is_identity() {
        let x = random_tensor((1, 3, 5, 5), 5);
        let out = art_bn(&x, &x, 1e-5).unwrap();
        for (a, b) in out.data().iter().zip(x.data().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-3);
        }
    }

    #[test]
    fn art_bn_constant_input_becomes_target_mean() {
        let x = ImageTensor::full((1, 2, 4, 4), -3.0).unwrap();
        let y = random_tensor((1, 2, 6, 6), 23);
        let y_stats = spatial_stats(&y, 1e-5).unwrap();
        let out = art_bn(&x, &y, 1e-5).unwrap();
        for c in 0..2 {
            for v in out.data().slice(ndarray::s![0, c, .., ..]).iter() {
                assert_abs_diff_eq!(*v, y_stats.mu[[0, c]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn art_bn_transfers_statistics() {
        let x = random_tensor((2, 8, 16, 16), 101);
        let y = random_tensor((2, 8, 16, 16), 202);
        let out = art_bn(&x, &y, 1e-5).unwrap();
        let sy = spatial_stats(&y, 1e-5).unwrap();
        let so = spatial_stats(&out, 1e-5).unwrap();
        for (a, b) in so.mu.iter().zip(sy.mu.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
        for (a, b) in so.sigma.iter().zip(sy.sigma.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn art_bn_allows_different_spatial_extents() {
        let x = random_tensor((1, 3, 4, 4), 7);
        let y = random_tensor((1, 3, 9, 9), 8);
        let out = art_bn(&x, &y, 1e-5).unwrap();
        assert_eq!(out.dims(), (1, 3, 4, 4));
    }

    #[test]
    fn art_bn_rejects_channel_mismatch() {
        let x = random_tensor((1, 3, 4, 4), 1);
        let y = random_tensor((1, 4, 4, 4), 2);
        assert!(matches!(art_bn(&x, &y, 1e-5), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn shape_preservation_and_determinism() {
        let x = random_tensor((2, 3, 7, 5), 55);
        let y = random_tensor((2, 3, 6, 6), 56);
        let a = art_bn(&x, &y, 1e-5).unwrap();
        let b = art_bn(&x, &y, 1e-5).unwrap();
        assert_eq!(a.dims(), x.dims());
        assert_eq!(a, b);
        let n = instance_norm(&x, 1e-5).unwrap();
        assert_eq!(n.dims(), x.dims());
    }
}
