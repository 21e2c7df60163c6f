//! Small numeric helpers shared across modules.

/// `n` evenly spaced values from `start` to `end` inclusive; a single point
/// yields `[start]`.
pub(crate) fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

/// Sinusoidal embedding of a scalar position: `dim/2` sine channels followed
/// by `dim/2` cosine channels with geometric frequencies `10000^(-2i/dim)`.
pub(crate) fn sinusoidal_embedding(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64 / half as f64) * 10000f64.ln()).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_endpoints() {
        let v = linspace(0.0, 1.0, 5);
        assert_eq!(v, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(linspace(3.0, 9.0, 1), vec![3.0]);
    }

    #[test]
    fn sinusoid_is_bounded_and_position_sensitive() {
        let a = sinusoidal_embedding(3.0, 16);
        let b = sinusoidal_embedding(4.0, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
        // Zero position: all sines 0, all cosines 1.
        let z = sinusoidal_embedding(0.0, 8);
        assert_eq!(&z[..4], &[0.0; 4]);
        assert_eq!(&z[4..], &[1.0; 4]);
    }
}
