//! Differentiable layer kernels for the toy noise predictor.
//!
//! Every forward returns the cache its backward needs. Parameters arrive as
//! ndarray views into the flat parameter vector; gradients are written into
//! mutable views of an equally shaped flat buffer. Convolutions go through
//! im2col so the heavy lifting is a single matrix product.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut1, ArrayViewMut2, ArrayViewMut4};

pub(crate) fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub(crate) fn dsilu(v: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-v).exp());
    sig * (1.0 + v * (1.0 - sig))
}

pub(crate) fn silu_arr(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(silu)
}

/// `dy * silu'(x)` evaluated at the cached pre-activation.
pub(crate) fn silu_backward(dy: &Array3<f64>, pre: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| *d *= dsilu(p));
    dx
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, same-size output, square kernel)
// ---------------------------------------------------------------------------

/// Column matrix `[cin*kh*kw, h*w]` of the padded input.
pub(crate) fn im2col(x: &Array3<f64>, kh: usize, kw: usize, pad: usize) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::zeros((cin * kh * kw, h * w));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    for x_pos in 0..w {
                        let sx = x_pos + kx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        col[[row, y * w + x_pos]] = x[[c, sy - pad, sx - pad]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f64>, cin: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Array3<f64> {
    let mut dx = Array3::zeros((cin, h, w));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    for x_pos in 0..w {
                        let sx = x_pos + kx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        dx[[c, sy - pad, sx - pad]] += dcol[[row, y * w + x_pos]];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) struct ConvCache {
    pub col: Array2<f64>,
    pub in_dims: (usize, usize, usize),
}

/// Same-size convolution; the kernel must be square with odd side.
pub(crate) fn conv2d(x: &Array3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>) -> (Array3<f64>, ConvCache) {
    let (cout, cin, kh, kw) = w.dim();
    debug_assert_eq!(cin, x.dim().0);
    let (_, h, width) = x.dim();
    let pad = kh / 2;
    let col = im2col(x, kh, kw, pad);
    let w_mat = w.into_shape_with_order((cout, cin * kh * kw)).unwrap();
    let mut y_mat = w_mat.dot(&col);
    for (o, mut row) in y_mat.rows_mut().into_iter().enumerate() {
        row += b[o];
    }
    let y = y_mat.into_shape_with_order((cout, h, width)).unwrap();
    (
        y,
        ConvCache {
            col,
            in_dims: x.dim(),
        },
    )
}

pub(crate) fn conv2d_backward(
    dy: &Array3<f64>,
    cache: &ConvCache,
    w: ArrayView4<f64>,
    mut dw: ArrayViewMut4<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array3<f64> {
    let (cout, cin, kh, kw) = w.dim();
    let (_, h, width) = cache.in_dims;
    let dy_mat = dy
        .view()
        .into_shape_with_order((cout, h * width))
        .unwrap();
    let col_t = cache.col.t();
    let dw_mat = dy_mat.dot(&col_t);
    {
        let mut dw_flat = dw
            .view_mut()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        dw_flat += &dw_mat;
    }
    for (o, row) in dy_mat.rows().into_iter().enumerate() {
        db[o] += row.sum();
    }
    let w_mat = w.into_shape_with_order((cout, cin * kh * kw)).unwrap();
    let dcol = w_mat.t().dot(&dy_mat);
    col2im(&dcol, cin, h, width, kh, kw, kh / 2)
}

// ---------------------------------------------------------------------------
// Instance normalization with affine parameters
// ---------------------------------------------------------------------------

pub(crate) struct NormCache {
    /// Normalized values before the affine map.
    pub xhat: Array3<f64>,
    pub sigma: Vec<f64>,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Per-channel spatial normalization followed by a learned scale and shift.
pub(crate) fn instance_norm_affine(
    x: &Array3<f64>,
    g: ArrayView1<f64>,
    b: ArrayView1<f64>,
) -> (Array3<f64>, NormCache) {
    let (c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut xhat = x.clone();
    let mut sigma = vec![0.0; c];
    for ch in 0..c {
        let mut slice = xhat.slice_mut(s![ch, .., ..]);
        let mean = slice.sum() / m;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let sd = (var + NORM_EPS).sqrt();
        slice.mapv_inplace(|v| (v - mean) / sd);
        sigma[ch] = sd;
    }
    let mut y = xhat.clone();
    for ch in 0..c {
        let (gc, bc) = (g[ch], b[ch]);
        y.slice_mut(s![ch, .., ..]).mapv_inplace(|v| gc * v + bc);
    }
    (y, NormCache { xhat, sigma })
}

pub(crate) fn instance_norm_affine_backward(
    dy: &Array3<f64>,
    cache: &NormCache,
    g: ArrayView1<f64>,
    mut dg: ArrayViewMut1<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    let m = (h * w) as f64;
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        let dy_c = dy.slice(s![ch, .., ..]);
        let xhat_c = cache.xhat.slice(s![ch, .., ..]);
        dg[ch] += dy_c.iter().zip(xhat_c.iter()).map(|(a, b)| a * b).sum::<f64>();
        db[ch] += dy_c.sum();
        let gc = g[ch];
        let mean_dxhat = gc * dy_c.sum() / m;
        let mean_dxhat_xhat =
            gc * dy_c.iter().zip(xhat_c.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
        let sd = cache.sigma[ch];
        let mut dx_c = dx.slice_mut(s![ch, .., ..]);
        for ((d, &dyv), &xh) in dx_c.iter_mut().zip(dy_c.iter()).zip(xhat_c.iter()) {
            *d = (gc * dyv - mean_dxhat - xh * mean_dxhat_xhat) / sd;
        }
    }
    dx
}

pub(crate) struct ColNormStats {
    pub sigma: Vec<f64>,
}

/// Standard deviations (with the shared epsilon inside the root) per column
/// of a token matrix, matching the statistics the attention module uses.
pub(crate) fn column_sigmas(x: &Array2<f64>) -> ColNormStats {
    let (rows, cols) = x.dim();
    let m = rows as f64;
    let mut sigma = vec![0.0; cols];
    for c in 0..cols {
        let col = x.slice(s![.., c]);
        let mean = col.sum() / m;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        sigma[c] = (var + NORM_EPS).sqrt();
    }
    ColNormStats { sigma }
}

/// Backward of per-column instance normalization given the normalized output
/// `xhat` and the cached column sigmas.
pub(crate) fn column_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    stats: &ColNormStats,
) -> Array2<f64> {
    let (rows, cols) = dy.dim();
    let m = rows as f64;
    let mut dx = Array2::zeros((rows, cols));
    for c in 0..cols {
        let dy_c = dy.slice(s![.., c]);
        let xh_c = xhat.slice(s![.., c]);
        let mean_dy = dy_c.sum() / m;
        let mean_dy_xh = dy_c.iter().zip(xh_c.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
        let sd = stats.sigma[c];
        for r in 0..rows {
            dx[[r, c]] = (dy_c[r] - mean_dy - xh_c[r] * mean_dy_xh) / sd;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Softmax rows (shared by the attention backward)
// ---------------------------------------------------------------------------

/// Backward through row-wise softmax: `ds = a * (da - rowsum(da * a))`.
pub(crate) fn softmax_rows_backward(da: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(da.dim());
    for r in 0..da.nrows() {
        let dot: f64 = da
            .row(r)
            .iter()
            .zip(a.row(r).iter())
            .map(|(x, y)| x * y)
            .sum();
        for c in 0..da.ncols() {
            ds[[r, c]] = a[[r, c]] * (da[[r, c]] - dot);
        }
    }
    ds
}

// ---------------------------------------------------------------------------
// Pooling / upsampling
// ---------------------------------------------------------------------------

pub(crate) fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for yy in 0..h / 2 {
            for xx in 0..w / 2 {
                y[[ch, yy, xx]] = 0.25
                    * (x[[ch, 2 * yy, 2 * xx]]
                        + x[[ch, 2 * yy, 2 * xx + 1]]
                        + x[[ch, 2 * yy + 1, 2 * xx]]
                        + x[[ch, 2 * yy + 1, 2 * xx + 1]]);
            }
        }
    }
    y
}

pub(crate) fn avg_pool2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let v = dy[[ch, yy, xx]] * 0.25;
                dx[[ch, 2 * yy, 2 * xx]] = v;
                dx[[ch, 2 * yy, 2 * xx + 1]] = v;
                dx[[ch, 2 * yy + 1, 2 * xx]] = v;
                dx[[ch, 2 * yy + 1, 2 * xx + 1]] = v;
            }
        }
    }
    dx
}

pub(crate) fn upsample_nearest2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for yy in 0..h * 2 {
            for xx in 0..w * 2 {
                y[[ch, yy, xx]] = x[[ch, yy / 2, xx / 2]];
            }
        }
    }
    y
}

pub(crate) fn upsample_nearest2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                dx[[ch, yy / 2, xx / 2]] += dy[[ch, yy, xx]];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Token reshaping
// ---------------------------------------------------------------------------

/// `[C, H, W]` feature map to `[H*W, C]` token matrix (row-major tokens).
pub(crate) fn to_tokens(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut t = Array2::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                t[[y * w + xx, ch]] = x[[ch, y, xx]];
            }
        }
    }
    t
}

pub(crate) fn from_tokens(t: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = t.ncols();
    let mut x = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                x[[ch, y, xx]] = t[[y * w + xx, ch]];
            }
        }
    }
    x
}

/// `dW += a^T . b` into a mutable view.
pub(crate) fn accumulate_matmul_t(mut dw: ArrayViewMut2<f64>, a: ArrayView2<f64>, b: ArrayView2<f64>) {
    let prod = a.t().dot(&b);
    dw += &prod;
}
