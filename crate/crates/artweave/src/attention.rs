//! Attention kernels: scaled dot-product attention, style-aligned shared
//! attention over concatenated semantic/target keys and values, and the
//! decoupled text fusion that adds a separately projected text branch onto
//! the image branch.
//!
//! Token matrices are `[rows, features]`. For renormalization the feature
//! axis is treated as the channel axis and the token axis as the spatial
//! axis, so statistics are per feature across tokens.

use ndarray::{s, Array2, Array4};

use crate::core_stats;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Query/key/value projections with a head count.
///
/// `d_k` is the common column count of `q` and `k`; `d_h` is the column
/// count of `v`. Both must be divisible by `heads`.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub heads: usize,
}

impl AttentionProjections {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>, heads: usize) -> Result<Self> {
        let p = Self { q, k, v, heads };
        p.validate()?;
        Ok(p)
    }

    pub fn d_k(&self) -> usize {
        self.q.ncols()
    }

    pub fn d_h(&self) -> usize {
        self.v.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::ShapeMismatch("heads must be positive".into()));
        }
        if self.q.ncols() != self.k.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "q has d_k = {}, k has d_k = {}",
                self.q.ncols(),
                self.k.ncols()
            )));
        }
        if self.k.nrows() != self.v.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "k has {} rows, v has {} rows",
                self.k.nrows(),
                self.v.nrows()
            )));
        }
        if self.q.ncols() % self.heads != 0 || self.v.ncols() % self.heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "d_k = {} and d_h = {} must be divisible by heads = {}",
                self.q.ncols(),
                self.v.ncols(),
                self.heads
            )));
        }
        if self.q.nrows() == 0 || self.k.nrows() == 0 || self.q.ncols() == 0 || self.v.ncols() == 0
        {
            return Err(Error::ShapeMismatch("empty projection matrix".into()));
        }
        Ok(())
    }
}

/// Which side's statistics win when both semantic and target projections are
/// present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArtBnDirection {
    /// Target queries/keys are renormalized to the semantic statistics.
    #[default]
    TargetToSemantic,
    /// Semantic keys are renormalized to the target statistics; target
    /// projections stay raw. Kept for experimentation.
    SemanticToTarget,
}

/// Knobs for [`build_style_aligned_with`].
#[derive(Debug, Clone, Copy)]
pub struct StyleAlignOptions {
    /// Weight of the semantic keys in `[0, 1]`. At 1 the semantic stack is
    /// used as-is; at 0 the semantic stream is fully masked and the set
    /// behaves exactly like a target-only one.
    pub semantic_scale: f64,
    pub epsilon: f64,
    pub direction: ArtBnDirection,
    /// Diagnostic switch; `false` leaves queries and keys raw so the block
    /// collapses to vanilla attention.
    pub normalize: bool,
}

impl Default for StyleAlignOptions {
    fn default() -> Self {
        Self {
            semantic_scale: 1.0,
            epsilon: core_stats::DEFAULT_EPSILON,
            direction: ArtBnDirection::TargetToSemantic,
            normalize: true,
        }
    }
}

/// The preassembled inputs of one shared-attention call.
#[derive(Debug, Clone)]
pub struct StyleAlignedSet {
    pub target: AttentionProjections,
    pub semantic: Option<AttentionProjections>,
    /// Renormalized target query.
    pub q_hat_t: Array2<f64>,
    /// Renormalized target key.
    pub k_hat_t: Array2<f64>,
    /// Shared key stack: semantic rows first, then the target rows.
    pub k_ts: Array2<f64>,
    /// Shared value stack, rows matching `k_ts`.
    pub v_ts: Array2<f64>,
    pub semantic_scale: f64,
}

impl StyleAlignedSet {
    /// Number of semantic rows at the top of the shared stacks.
    pub fn semantic_rows(&self) -> usize {
        self.semantic.as_ref().map_or(0, |s| s.k.nrows())
    }
}

/// View a `[rows, features]` matrix as a `[1, features, rows, 1]` tensor so
/// the spatial-statistics ops apply per feature across tokens.
fn matrix_as_channel_tensor(m: &Array2<f64>) -> Result<ImageTensor> {
    let (rows, cols) = m.dim();
    let mut t = Array4::zeros((1, cols, rows, 1));
    for r in 0..rows {
        for c in 0..cols {
            t[[0, c, r, 0]] = m[[r, c]];
        }
    }
    ImageTensor::new(t)
}

fn channel_tensor_as_matrix(t: &ImageTensor) -> Array2<f64> {
    let (_, cols, rows, _) = t.dims();
    let mut m = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            m[[r, c]] = t.data()[[0, c, r, 0]];
        }
    }
    m
}

/// Per-feature instance normalization of a token matrix.
fn feature_norm(m: &Array2<f64>, epsilon: f64) -> Result<Array2<f64>> {
    let t = matrix_as_channel_tensor(m)?;
    Ok(channel_tensor_as_matrix(&core_stats::instance_norm(
        &t, epsilon,
    )?))
}

/// Renormalize token matrix `x` to the per-feature statistics of `y`.
fn feature_art_bn(x: &Array2<f64>, y: &Array2<f64>, epsilon: f64) -> Result<Array2<f64>> {
    let tx = matrix_as_channel_tensor(x)?;
    let ty = matrix_as_channel_tensor(y)?;
    Ok(channel_tensor_as_matrix(&core_stats::art_bn(
        &tx, &ty, epsilon,
    )?))
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    logits
}

fn head_slice(m: &Array2<f64>, head: usize, heads: usize) -> Array2<f64> {
    let width = m.ncols() / heads;
    m.slice(s![.., head * width..(head + 1) * width]).to_owned()
}

/// Per-head attention weights for arbitrary query/key stacks, with an
/// optional additive logit bias per key row.
fn attention_weights_for(
    q: &Array2<f64>,
    k: &Array2<f64>,
    heads: usize,
    key_bias: Option<(usize, f64)>,
) -> Vec<Array2<f64>> {
    let head_dim = q.ncols() / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    (0..heads)
        .map(|h| {
            let qh = head_slice(q, h, heads);
            let kh = head_slice(k, h, heads);
            let mut logits = qh.dot(&kh.t());
            logits.mapv_inplace(|v| v * scale);
            if let Some((n_biased, bias)) = key_bias {
                for mut row in logits.rows_mut() {
                    for v in row.iter_mut().take(n_biased) {
                        *v += bias;
                    }
                }
            }
            softmax_rows(logits)
        })
        .collect()
}

fn weighted_values(weights: &[Array2<f64>], v: &Array2<f64>, heads: usize) -> Array2<f64> {
    let m_q = weights[0].nrows();
    let head_dim = v.ncols() / heads;
    let mut out = Array2::zeros((m_q, v.ncols()));
    for (h, w) in weights.iter().enumerate() {
        let vh = head_slice(v, h, heads);
        let oh = w.dot(&vh);
        out.slice_mut(s![.., h * head_dim..(h + 1) * head_dim])
            .assign(&oh);
    }
    out
}

/// `softmax(QK^T / sqrt(d)) V`, computed per head with row-max subtraction
/// and the heads concatenated. `d` is the per-head key width.
pub fn scaled_dot_attention(p: &AttentionProjections) -> Result<Array2<f64>> {
    p.validate()?;
    let weights = attention_weights_for(&p.q, &p.k, p.heads, None);
    Ok(weighted_values(&weights, &p.v, p.heads))
}

/// Per-head attention weight matrices of [`scaled_dot_attention`], exposed
/// for diagnostics.
pub fn scaled_dot_attention_weights(p: &AttentionProjections) -> Result<Vec<Array2<f64>>> {
    p.validate()?;
    Ok(attention_weights_for(&p.q, &p.k, p.heads, None))
}

/// Assemble the style-aligned query/key/value stacks with default options
/// (full semantic scale comes from the argument, normalization on).
pub fn build_style_aligned(
    target: &AttentionProjections,
    semantic: Option<&AttentionProjections>,
    semantic_scale: f64,
    epsilon: f64,
) -> Result<StyleAlignedSet> {
    build_style_aligned_with(
        target,
        semantic,
        &StyleAlignOptions {
            semantic_scale,
            epsilon,
            ..StyleAlignOptions::default()
        },
    )
}

/// Assemble the style-aligned stacks.
///
/// With a semantic input at positive scale, target queries and keys are
/// renormalized across features to the semantic statistics (or the reverse,
/// per `direction`) and the shared stacks concatenate the semantic rows above
/// the target rows. Without a semantic input -- or at scale zero, which masks
/// the semantic rows entirely -- queries and keys are instance-normalized on
/// their own, reproducing the target-only path.
pub fn build_style_aligned_with(
    target: &AttentionProjections,
    semantic: Option<&AttentionProjections>,
    opts: &StyleAlignOptions,
) -> Result<StyleAlignedSet> {
    target.validate()?;
    if !(0.0..=1.0).contains(&opts.semantic_scale) {
        return Err(Error::Domain(format!(
            "semantic_scale must lie in [0, 1], got {}",
            opts.semantic_scale
        )));
    }
    if opts.epsilon <= 0.0 {
        return Err(Error::Domain(format!(
            "epsilon must be > 0, got {}",
            opts.epsilon
        )));
    }
    if let Some(sem) = semantic {
        sem.validate()?;
        if sem.q.ncols() != target.d_k() || sem.v.ncols() != target.d_h() {
            return Err(Error::ShapeMismatch(format!(
                "semantic (d_k, d_h) = ({}, {}) does not match target ({}, {})",
                sem.q.ncols(),
                sem.v.ncols(),
                target.d_k(),
                target.d_h()
            )));
        }
    }

    // Scale zero masks every semantic key, so the renormalization must be the
    // target-only one for the reduction to be exact.
    let style_active = semantic.is_some() && opts.semantic_scale > 0.0;

    let (q_hat_t, k_hat_t, semantic_k_rows) = if !opts.normalize {
        let sem_k = semantic.map(|s| s.k.clone());
        (target.q.clone(), target.k.clone(), sem_k)
    } else if style_active {
        let sem = semantic.unwrap();
        match opts.direction {
            ArtBnDirection::TargetToSemantic => (
                feature_art_bn(&target.q, &sem.q, opts.epsilon)?,
                feature_art_bn(&target.k, &sem.k, opts.epsilon)?,
                Some(sem.k.clone()),
            ),
            ArtBnDirection::SemanticToTarget => (
                target.q.clone(),
                target.k.clone(),
                Some(feature_art_bn(&sem.k, &target.k, opts.epsilon)?),
            ),
        }
    } else {
        let sem_k = semantic.map(|s| s.k.clone());
        (
            feature_norm(&target.q, opts.epsilon)?,
            feature_norm(&target.k, opts.epsilon)?,
            sem_k,
        )
    };

    let (k_ts, v_ts) = match (semantic, semantic_k_rows) {
        (Some(sem), Some(sem_k)) => {
            let mut k_ts = Array2::zeros((sem_k.nrows() + k_hat_t.nrows(), k_hat_t.ncols()));
            k_ts.slice_mut(s![..sem_k.nrows(), ..]).assign(&sem_k);
            k_ts.slice_mut(s![sem_k.nrows().., ..]).assign(&k_hat_t);
            let mut v_ts = Array2::zeros((sem.v.nrows() + target.v.nrows(), target.v.ncols()));
            v_ts.slice_mut(s![..sem.v.nrows(), ..]).assign(&sem.v);
            v_ts.slice_mut(s![sem.v.nrows().., ..]).assign(&target.v);
            (k_ts, v_ts)
        }
        _ => (k_hat_t.clone(), target.v.clone()),
    };

    Ok(StyleAlignedSet {
        target: target.clone(),
        semantic: semantic.cloned(),
        q_hat_t,
        k_hat_t,
        k_ts,
        v_ts,
        semantic_scale: opts.semantic_scale,
    })
}

fn shared_logit_bias(set: &StyleAlignedSet) -> Option<(usize, f64)> {
    let rows = set.semantic_rows();
    if rows == 0 {
        return None;
    }
    let bias = if set.semantic_scale == 0.0 {
        f64::NEG_INFINITY
    } else {
        set.semantic_scale.ln()
    };
    Some((rows, bias))
}

/// Shared attention: the renormalized target query attends over the joint
/// semantic/target key and value stacks. Semantic key columns carry an
/// additive `ln(semantic_scale)` logit bias; scale zero masks them entirely.
pub fn shared_attention(set: &StyleAlignedSet) -> Result<Array2<f64>> {
    let heads = set.target.heads;
    let weights = attention_weights_for(&set.q_hat_t, &set.k_ts, heads, shared_logit_bias(set));
    Ok(weighted_values(&weights, &set.v_ts, heads))
}

/// Per-head weight matrices of [`shared_attention`]; columns are ordered
/// semantic rows first.
pub fn shared_attention_weights(set: &StyleAlignedSet) -> Result<Vec<Array2<f64>>> {
    Ok(attention_weights_for(
        &set.q_hat_t,
        &set.k_ts,
        set.target.heads,
        shared_logit_bias(set),
    ))
}

/// Result of fusing the text branch onto the image branch.
#[derive(Debug, Clone)]
pub struct FusedAttentionOutput {
    pub z_prime: Array2<f64>,
    pub z_double_prime: Array2<f64>,
    pub text_scale: f64,
}

/// Add a separately projected text cross-attention branch onto the image
/// branch output: `Z'' = Z' + text_scale * softmax(Q K^T / sqrt(d)) V`, with
/// the text branch single-headed over its own projections.
pub fn decoupled_cross_attention(
    z_prime: &Array2<f64>,
    text_q: &Array2<f64>,
    text_k: &Array2<f64>,
    text_v: &Array2<f64>,
    text_scale: f64,
) -> Result<FusedAttentionOutput> {
    if text_scale < 0.0 {
        return Err(Error::Domain(format!(
            "text_scale must be >= 0, got {text_scale}"
        )));
    }
    if text_k.nrows() != text_v.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "text k has {} rows, text v has {} rows",
            text_k.nrows(),
            text_v.nrows()
        )));
    }
    if text_q.nrows() != z_prime.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "text q has {} rows, image branch has {} rows",
            text_q.nrows(),
            z_prime.nrows()
        )));
    }
    if text_q.ncols() != text_k.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "text q has {} cols, text k has {} cols",
            text_q.ncols(),
            text_k.ncols()
        )));
    }
    if text_v.ncols() != z_prime.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "text v has {} cols, image branch has {} cols",
            text_v.ncols(),
            z_prime.ncols()
        )));
    }

    let z_double_prime = if text_scale == 0.0 {
        z_prime.clone()
    } else {
        let weights = attention_weights_for(text_q, text_k, 1, None);
        let branch = weighted_values(&weights, text_v, 1);
        z_prime + &(text_scale * &branch)
    };

    Ok(FusedAttentionOutput {
        z_prime: z_prime.clone(),
        z_double_prime,
        text_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256PlusPlus;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Xoshiro256PlusPlus) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.standard_normal())
    }

    fn random_projections(
        m_q: usize,
        m_k: usize,
        d_k: usize,
        d_h: usize,
        heads: usize,
        rng: &mut Xoshiro256PlusPlus,
    ) -> AttentionProjections {
        AttentionProjections::new(
            random_matrix(m_q, d_k, rng),
            random_matrix(m_k, d_k, rng),
            random_matrix(m_k, d_h, rng),
            heads,
        )
        .unwrap()
    }

    /// Double-loop softmax-weighted sum, sharing no code with the kernel.
    fn brute_force_attention(
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
        bias_rows: usize,
        bias: f64,
    ) -> Array2<f64> {
        let d = q.ncols() as f64;
        let mut out = Array2::zeros((q.nrows(), v.ncols()));
        for i in 0..q.nrows() {
            let mut logits = vec![0.0; k.nrows()];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for t in 0..q.ncols() {
                    dot += q[[i, t]] * k[[j, t]];
                }
                *logit = dot / d.sqrt() + if j < bias_rows { bias } else { 0.0 };
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for c in 0..v.ncols() {
                    out[[i, c]] += e / sum * v[[j, c]];
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_the_single_value_row() {
        let mut rng = Xoshiro256PlusPlus::new(1);
        let q = random_matrix(5, 4, &mut rng);
        let k = random_matrix(1, 4, &mut rng);
        let v = random_matrix(1, 8, &mut rng);
        let p = AttentionProjections::new(q, k, v.clone(), 1).unwrap();
        let out = scaled_dot_attention(&p).unwrap();
        for i in 0..5 {
            for c in 0..8 {
                assert_abs_diff_eq!(out[[i, c]], v[[0, c]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_average_the_values() {
        let q = Array2::zeros((3, 4));
        let k = array![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]];
        let v = array![[2.0, 4.0], [6.0, 8.0]];
        // Zero queries give equal logits for both keys.
        let p = AttentionProjections::new(q, k, v, 1).unwrap();
        let out = scaled_dot_attention(&p).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(out[[i, 0]], 4.0, epsilon = 1e-12);
            assert_abs_diff_eq!(out[[i, 1]], 6.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = Xoshiro256PlusPlus::new(1234);
        let p = random_projections(4, 6, 8, 16, 1, &mut rng);
        let expected = brute_force_attention(&p.q, &p.k, &p.v, 0, 0.0);
        let out = scaled_dot_attention(&p).unwrap();
        for (a, b) in out.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = Xoshiro256PlusPlus::new(9);
        let p = random_projections(7, 5, 8, 8, 2, &mut rng);
        for w in scaled_dot_attention_weights(&p).unwrap() {
            for row in w.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn multi_head_matches_per_head_direct_computation() {
        let mut rng = Xoshiro256PlusPlus::new(77);
        let heads = 2;
        let p = random_projections(5, 6, 8, 12, heads, &mut rng);
        let out = scaled_dot_attention(&p).unwrap();
        for h in 0..heads {
            let qh = head_slice(&p.q, h, heads);
            let kh = head_slice(&p.k, h, heads);
            let vh = head_slice(&p.v, h, heads);
            let direct = brute_force_attention(&qh, &kh, &vh, 0, 0.0);
            let got = head_slice(&out, h, heads);
            for (a, b) in got.iter().zip(direct.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn key_permutation_leaves_output_unchanged() {
        let mut rng = Xoshiro256PlusPlus::new(31);
        let p = random_projections(4, 6, 8, 8, 1, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut k2 = Array2::zeros((6, 8));
        let mut v2 = Array2::zeros((6, 8));
        for (dst, &src) in perm.iter().enumerate() {
            k2.row_mut(dst).assign(&p.k.row(src));
            v2.row_mut(dst).assign(&p.v.row(src));
        }
        let p2 = AttentionProjections::new(p.q.clone(), k2, v2, 1).unwrap();
        let a = scaled_dot_attention(&p).unwrap();
        let b = scaled_dot_attention(&p2).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let q = Array2::zeros((2, 4));
        let k = Array2::zeros((3, 6));
        let v = Array2::zeros((3, 4));
        assert!(matches!(
            AttentionProjections::new(q, k, v, 1),
            Err(Error::ShapeMismatch(_))
        ));
        let q = Array2::zeros((2, 4));
        let k = Array2::zeros((3, 4));
        let v = Array2::zeros((2, 4));
        assert!(AttentionProjections::new(q, k, v, 1).is_err());
        let q = Array2::zeros((2, 6));
        let k = Array2::zeros((3, 6));
        let v = Array2::zeros((3, 6));
        assert!(AttentionProjections::new(q, k, v, 4).is_err());
    }

    #[test]
    fn absent_semantic_normalizes_target_stacks() {
        let mut rng = Xoshiro256PlusPlus::new(5);
        let target = random_projections(5, 5, 8, 8, 1, &mut rng);
        let set = build_style_aligned(&target, None, 1.0, 1e-5).unwrap();
        let expected_k = feature_norm(&target.k, 1e-5).unwrap();
        assert_eq!(set.k_ts, expected_k);
        assert_eq!(set.v_ts, target.v);
        assert_eq!(set.semantic_rows(), 0);
    }

    #[test]
    fn stack_row_counts_concatenate() {
        let mut rng = Xoshiro256PlusPlus::new(6);
        let target = random_projections(5, 5, 8, 8, 1, &mut rng);
        let semantic = random_projections(3, 3, 8, 8, 1, &mut rng);
        let set = build_style_aligned(&target, Some(&semantic), 1.0, 1e-5).unwrap();
        assert_eq!(set.k_ts.nrows(), 8);
        assert_eq!(set.v_ts.nrows(), 8);
        assert_eq!(set.semantic_rows(), 3);
    }

    #[test]
    fn semantic_equal_to_target_is_near_identity() {
        let mut rng = Xoshiro256PlusPlus::new(7);
        let target = random_projections(6, 6, 8, 8, 1, &mut rng);
        let set = build_style_aligned(&target, Some(&target), 1.0, 1e-5).unwrap();
        for (a, b) in set.q_hat_t.iter().zip(target.q.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-3);
        }
    }

    #[test]
    fn scale_out_of_range_is_rejected() {
        let mut rng = Xoshiro256PlusPlus::new(8);
        let target = random_projections(4, 4, 8, 8, 1, &mut rng);
        assert!(matches!(
            build_style_aligned(&target, None, 1.5, 1e-5),
            Err(Error::Domain(_))
        ));
        assert!(build_style_aligned(&target, None, -0.1, 1e-5).is_err());
    }

    #[test]
    fn semantic_dim_mismatch_is_rejected() {
        let mut rng = Xoshiro256PlusPlus::new(12);
        let target = random_projections(4, 4, 8, 8, 1, &mut rng);
        let semantic = random_projections(4, 4, 6, 8, 1, &mut rng);
        assert!(matches!(
            build_style_aligned(&target, Some(&semantic), 1.0, 1e-5),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn scale_zero_equals_target_only_path() {
        let mut rng = Xoshiro256PlusPlus::new(40);
        let target = random_projections(5, 5, 8, 8, 1, &mut rng);
        let semantic = random_projections(4, 4, 8, 8, 1, &mut rng);
        let masked = build_style_aligned(&target, Some(&semantic), 0.0, 1e-5).unwrap();
        let absent = build_style_aligned(&target, None, 0.0, 1e-5).unwrap();
        // The masked stack still carries the semantic rows.
        assert_eq!(masked.k_ts.nrows(), 9);
        let a = shared_attention(&masked).unwrap();
        let b = shared_attention(&absent).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn scale_one_matches_brute_force_over_concatenated_stack() {
        let mut rng = Xoshiro256PlusPlus::new(41);
        for _ in 0..10 {
            let target = random_projections(5, 5, 8, 16, 1, &mut rng);
            let semantic = random_projections(3, 3, 8, 16, 1, &mut rng);
            let set = build_style_aligned(&target, Some(&semantic), 1.0, 1e-5).unwrap();
            let expected = brute_force_attention(&set.q_hat_t, &set.k_ts, &set.v_ts, 0, 0.0);
            let out = shared_attention(&set).unwrap();
            for (a, b) in out.iter().zip(expected.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn normalization_off_reduces_to_plain_attention() {
        let mut rng = Xoshiro256PlusPlus::new(42);
        let target = random_projections(6, 6, 8, 8, 2, &mut rng);
        let set = build_style_aligned_with(
            &target,
            None,
            &StyleAlignOptions {
                normalize: false,
                ..StyleAlignOptions::default()
            },
        )
        .unwrap();
        let a = shared_attention(&set).unwrap();
        let b = scaled_dot_attention(&target).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn semantic_mass_is_monotone_in_scale() {
        let mut rng = Xoshiro256PlusPlus::new(43);
        let target = random_projections(5, 5, 8, 8, 1, &mut rng);
        let semantic = random_projections(4, 4, 8, 8, 1, &mut rng);
        let mut last_mass = -1.0;
        for scale in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let set = build_style_aligned(&target, Some(&semantic), scale, 1e-5).unwrap();
            let mass: f64 = shared_attention_weights(&set)
                .unwrap()
                .iter()
                .map(|w| w.slice(s![.., ..set.semantic_rows()]).sum())
                .sum();
            assert!(
                mass >= last_mass,
                "semantic mass decreased: {mass} < {last_mass} at scale {scale}"
            );
            last_mass = mass;
        }
    }

    #[test]
    fn direction_switch_transfers_statistics_the_other_way() {
        let mut rng = Xoshiro256PlusPlus::new(44);
        let target = random_projections(8, 8, 4, 4, 1, &mut rng);
        let semantic = random_projections(6, 6, 4, 4, 1, &mut rng);
        let set = build_style_aligned_with(
            &target,
            Some(&semantic),
            &StyleAlignOptions {
                direction: ArtBnDirection::SemanticToTarget,
                ..StyleAlignOptions::default()
            },
        )
        .unwrap();
        // Target projections stay raw.
        assert_eq!(set.q_hat_t, target.q);
        assert_eq!(set.k_hat_t, target.k);
        // Semantic rows of the stack now carry the target's statistics.
        let sem_part = set.k_ts.slice(s![..6, ..]).to_owned();
        let expected = feature_art_bn(&semantic.k, &target.k, 1e-5).unwrap();
        assert_eq!(sem_part, expected);
    }

    #[test]
    fn text_scale_zero_returns_image_branch_exactly() {
        let mut rng = Xoshiro256PlusPlus::new(45);
        let z = random_matrix(5, 8, &mut rng);
        let tq = random_matrix(5, 8, &mut rng);
        let tk = random_matrix(3, 8, &mut rng);
        let tv = random_matrix(3, 8, &mut rng);
        let fused = decoupled_cross_attention(&z, &tq, &tk, &tv, 0.0).unwrap();
        assert_eq!(fused.z_double_prime, z);
    }

    #[test]
    fn single_text_token_contributes_its_value_row() {
        let mut rng = Xoshiro256PlusPlus::new(46);
        let z = random_matrix(4, 6, &mut rng);
        let tq = random_matrix(4, 8, &mut rng);
        let tk = random_matrix(1, 8, &mut rng);
        let tv = random_matrix(1, 6, &mut rng);
        let scale = 0.7;
        let fused = decoupled_cross_attention(&z, &tq, &tk, &tv, scale).unwrap();
        for i in 0..4 {
            for c in 0..6 {
                assert_abs_diff_eq!(
                    fused.z_double_prime[[i, c]],
                    z[[i, c]] + scale * tv[[0, c]],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn text_branch_composes_with_plain_attention() {
        let mut rng = Xoshiro256PlusPlus::new(47);
        let z = random_matrix(5, 12, &mut rng);
        let tq = random_matrix(5, 8, &mut rng);
        let tk = random_matrix(4, 8, &mut rng);
        let tv = random_matrix(4, 12, &mut rng);
        let fused = decoupled_cross_attention(&z, &tq, &tk, &tv, 1.0).unwrap();
        let branch =
            scaled_dot_attention(&AttentionProjections::new(tq, tk, tv, 1).unwrap()).unwrap();
        for ((a, b), c) in fused.z_double_prime.iter().zip(z.iter()).zip(branch.iter()) {
            assert_abs_diff_eq!(*a, b + c, epsilon = 1e-6);
        }
    }

    #[test]
    fn reduction_chain_collapses_to_vanilla_self_attention() {
        let mut rng = Xoshiro256PlusPlus::new(48);
        let target = random_projections(6, 6, 8, 8, 1, &mut rng);
        let set = build_style_aligned_with(
            &target,
            None,
            &StyleAlignOptions {
                normalize: false,
                ..StyleAlignOptions::default()
            },
        )
        .unwrap();
        let z_prime = shared_attention(&set).unwrap();
        let tq = random_matrix(6, 8, &mut rng);
        let tk = random_matrix(2, 8, &mut rng);
        let tv = random_matrix(2, 8, &mut rng);
        let fused = decoupled_cross_attention(&z_prime, &tq, &tk, &tv, 0.0).unwrap();
        let vanilla = scaled_dot_attention(&target).unwrap();
        for (a, b) in fused.z_double_prime.iter().zip(vanilla.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }
}
