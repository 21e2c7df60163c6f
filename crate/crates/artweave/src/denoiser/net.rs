//! Parameter layout and the taped forward/backward pass of the U-Net.
//!
//! The network: stem conv, `depth` encoder residual stages with average-pool
//! downsampling, two middle residual stages, mirrored decoder stages with
//! nearest upsampling and skip concatenation, and a normalized output conv.
//! Attention parameters exist at every stage so the parameter count depends
//! only on the config; a stage's attention runs when its spatial size is
//! listed in `attn_resolutions`.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView4};

use crate::attention::{
    build_style_aligned_with, scaled_dot_attention_weights, shared_attention,
    shared_attention_weights, AttentionProjections, StyleAlignOptions,
};
use crate::core_stats::DEFAULT_EPSILON;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Xoshiro256PlusPlus};
use crate::util::sinusoidal_embedding;

use super::layers::*;
use super::{CrossArtContext, DenoiserConfig, SemanticProjections};

const TAG_PARAM_INIT: u64 = 0x7061_7261;

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum SegKind {
    /// Convolution weight; He-initialized from the fan-in.
    ConvW { fan_in: usize },
    /// Output convolution weight; He-initialized then damped.
    OutConvW { fan_in: usize },
    /// Dense or projection weight with `1/sqrt(fan_in)` initialization.
    Linear { fan_in: usize },
    Bias,
    Gamma,
}

#[derive(Debug, Clone)]
pub(crate) struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    pub kind: SegKind,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Stage {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    /// Number of halvings between input resolution and this stage.
    pub level: usize,
}

/// Stage list in forward order: encoders, two middle stages, decoders.
pub(crate) fn stage_plan(config: &DenoiserConfig) -> Vec<Stage> {
    let d = config.depth;
    let ch = |i: usize| config.base_channels << i;
    let mut stages = Vec::new();
    for i in 0..d {
        stages.push(Stage {
            name: format!("enc{i}"),
            cin: if i == 0 { ch(0) } else { ch(i - 1) },
            cout: ch(i),
            level: i,
        });
    }
    stages.push(Stage {
        name: "mid0".into(),
        cin: ch(d - 1),
        cout: ch(d),
        level: d,
    });
    stages.push(Stage {
        name: "mid1".into(),
        cin: ch(d),
        cout: ch(d),
        level: d,
    });
    for i in (0..d).rev() {
        stages.push(Stage {
            name: format!("dec{i}"),
            cin: ch(i + 1) + ch(i),
            cout: ch(i),
            level: i,
        });
    }
    stages
}

impl ParamLayout {
    pub fn of(config: &DenoiserConfig) -> Self {
        let ted = config.time_embed_dim;
        let d_text = crate::encoders::D_TEXT;
        let d_img = crate::encoders::D_IMAGE;
        let c0 = config.base_channels;
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |segments: &mut Vec<Segment>, name: String, shape: Vec<usize>, kind: SegKind| {
            let len: usize = shape.iter().product();
            segments.push(Segment {
                name,
                offset,
                len,
                shape,
                kind,
            });
            offset += len;
        };

        push(&mut segments, "time_mlp.w1".into(), vec![ted, ted], SegKind::Linear { fan_in: ted });
        push(&mut segments, "time_mlp.b1".into(), vec![ted], SegKind::Bias);
        push(&mut segments, "time_mlp.w2".into(), vec![ted, ted], SegKind::Linear { fan_in: ted });
        push(&mut segments, "time_mlp.b2".into(), vec![ted], SegKind::Bias);
        push(&mut segments, "img_cond.w".into(), vec![ted, d_img], SegKind::Linear { fan_in: d_img });
        push(&mut segments, "conv_in.w".into(), vec![c0, 3, 3, 3], SegKind::ConvW { fan_in: 27 });
        push(&mut segments, "conv_in.b".into(), vec![c0], SegKind::Bias);

        for stage in stage_plan(config) {
            let (cin, cout, n) = (stage.cin, stage.cout, &stage.name);
            push(&mut segments, format!("{n}.norm1.g"), vec![cin], SegKind::Gamma);
            push(&mut segments, format!("{n}.norm1.b"), vec![cin], SegKind::Bias);
            push(&mut segments, format!("{n}.conv1.w"), vec![cout, cin, 3, 3], SegKind::ConvW { fan_in: cin * 9 });
            push(&mut segments, format!("{n}.conv1.b"), vec![cout], SegKind::Bias);
            push(&mut segments, format!("{n}.temb.w"), vec![cout, ted], SegKind::Linear { fan_in: ted });
            push(&mut segments, format!("{n}.temb.b"), vec![cout], SegKind::Bias);
            push(&mut segments, format!("{n}.norm2.g"), vec![cout], SegKind::Gamma);
            push(&mut segments, format!("{n}.norm2.b"), vec![cout], SegKind::Bias);
            push(&mut segments, format!("{n}.conv2.w"), vec![cout, cout, 3, 3], SegKind::ConvW { fan_in: cout * 9 });
            push(&mut segments, format!("{n}.conv2.b"), vec![cout], SegKind::Bias);
            if cin != cout {
                push(&mut segments, format!("{n}.skip.w"), vec![cout, cin, 1, 1], SegKind::ConvW { fan_in: cin });
                push(&mut segments, format!("{n}.skip.b"), vec![cout], SegKind::Bias);
            }
            push(&mut segments, format!("{n}.attn.norm.g"), vec![cout], SegKind::Gamma);
            push(&mut segments, format!("{n}.attn.norm.b"), vec![cout], SegKind::Bias);
            for proj in ["w_q", "w_k", "w_v", "w_tq"] {
                push(&mut segments, format!("{n}.attn.{proj}"), vec![cout, cout], SegKind::Linear { fan_in: cout });
            }
            for proj in ["w_tk", "w_tv"] {
                push(&mut segments, format!("{n}.attn.{proj}"), vec![d_text, cout], SegKind::Linear { fan_in: d_text });
            }
            push(&mut segments, format!("{n}.attn.w_o"), vec![cout, cout], SegKind::Linear { fan_in: cout });
            push(&mut segments, format!("{n}.attn.b_o"), vec![cout], SegKind::Bias);
        }

        push(&mut segments, "out.norm.g".into(), vec![c0], SegKind::Gamma);
        push(&mut segments, "out.norm.b".into(), vec![c0], SegKind::Bias);
        push(&mut segments, "out.conv.w".into(), vec![3, c0, 3, 3], SegKind::OutConvW { fan_in: c0 * 9 });
        push(&mut segments, "out.conv.b".into(), vec![3], SegKind::Bias);

        ParamLayout {
            segments,
            total: offset,
        }
    }

    pub fn seg(&self, name: &str) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown parameter segment '{name}'"))
    }

    /// Seeded initial parameter vector.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = Xoshiro256PlusPlus::new(derive_seed(seed, TAG_PARAM_INIT));
        let mut params = vec![0.0; self.total];
        for seg in &self.segments {
            let out = &mut params[seg.offset..seg.offset + seg.len];
            match seg.kind {
                SegKind::ConvW { fan_in } => {
                    let scale = (2.0 / fan_in as f64).sqrt();
                    for v in out.iter_mut() {
                        *v = rng.standard_normal() * scale;
                    }
                }
                SegKind::OutConvW { fan_in } => {
                    let scale = 0.1 * (2.0 / fan_in as f64).sqrt();
                    for v in out.iter_mut() {
                        *v = rng.standard_normal() * scale;
                    }
                }
                SegKind::Linear { fan_in } => {
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    for v in out.iter_mut() {
                        *v = rng.standard_normal() * scale;
                    }
                }
                SegKind::Bias => {}
                SegKind::Gamma => out.fill(1.0),
            }
        }
        params
    }
}

/// Read-only parameter access by segment name.
pub(crate) struct Params<'a> {
    pub layout: &'a ParamLayout,
    pub data: &'a [f64],
}

impl<'a> Params<'a> {
    fn raw(&self, name: &str) -> (&'a [f64], &Segment) {
        let seg = self.layout.seg(name);
        (&self.data[seg.offset..seg.offset + seg.len], seg)
    }

    pub fn v1(&self, name: &str) -> ArrayView1<'a, f64> {
        let (d, seg) = self.raw(name);
        ArrayView1::from_shape(seg.shape[0], d).unwrap()
    }

    pub fn v2(&self, name: &str) -> ArrayView2<'a, f64> {
        let (d, seg) = self.raw(name);
        ArrayView2::from_shape((seg.shape[0], seg.shape[1]), d).unwrap()
    }

    pub fn v4(&self, name: &str) -> ArrayView4<'a, f64> {
        let (d, seg) = self.raw(name);
        ArrayView4::from_shape(
            (seg.shape[0], seg.shape[1], seg.shape[2], seg.shape[3]),
            d,
        )
        .unwrap()
    }
}

/// Gradient accumulation buffer with the same layout.
pub(crate) struct GradBuf<'a> {
    pub layout: &'a ParamLayout,
    pub data: &'a mut [f64],
}

impl GradBuf<'_> {
    fn range(&self, name: &str) -> std::ops::Range<usize> {
        let seg = self.layout.seg(name);
        seg.offset..seg.offset + seg.len
    }

    /// Two disjoint mutable segment views; `first` must precede `second`.
    pub fn pair(&mut self, first: &str, second: &str) -> (&mut [f64], &mut [f64]) {
        let a = self.range(first);
        let b = self.range(second);
        debug_assert!(a.end <= b.start);
        let (left, right) = self.data.split_at_mut(b.start);
        (&mut left[a.clone()], &mut right[..b.len()])
    }

    pub fn one(&mut self, name: &str) -> &mut [f64] {
        let r = self.range(name);
        &mut self.data[r]
    }

    pub fn add2(&mut self, name: &str, value: &Array2<f64>) {
        let seg = self.layout.seg(name);
        debug_assert_eq!(seg.shape, value.shape().to_vec());
        let out = self.one(name);
        for (o, v) in out.iter_mut().zip(value.iter()) {
            *o += v;
        }
    }

    pub fn add1(&mut self, name: &str, value: &Array1<f64>) {
        let out = self.one(name);
        for (o, v) in out.iter_mut().zip(value.iter()) {
            *o += v;
        }
    }
}

// ---------------------------------------------------------------------------
// Caches
// ---------------------------------------------------------------------------

pub(crate) struct ResCache {
    norm1: NormCache,
    act1_pre: Array3<f64>,
    conv1: ConvCache,
    norm2: NormCache,
    act2_pre: Array3<f64>,
    conv2: ConvCache,
    skip: Option<ConvCache>,
}

pub(crate) struct TextCache {
    tq: Array2<f64>,
    tv: Array2<f64>,
    weights: Array2<f64>,
}

pub(crate) struct AttnCache {
    norm: NormCache,
    phi: Array2<f64>,
    q_hat: Array2<f64>,
    k_hat: Array2<f64>,
    q_sig: ColNormStats,
    k_sig: ColNormStats,
    v: Array2<f64>,
    attn_w: Vec<Array2<f64>>,
    text: Option<TextCache>,
    z_dp: Array2<f64>,
    h: usize,
    w: usize,
}

pub(crate) struct StageTape {
    res: ResCache,
    attn: Option<AttnCache>,
}

pub(crate) struct NetTape {
    sin_emb: Array1<f64>,
    mlp_h_pre: Array1<f64>,
    mlp_h_act: Array1<f64>,
    temb: Array1<f64>,
    pooled_img: Option<Array1<f64>>,
    conv_in: ConvCache,
    stages: Vec<StageTape>,
    out_norm: NormCache,
    out_act_pre: Array3<f64>,
    out_conv: ConvCache,
}

pub(crate) struct ForwardOutput {
    pub eps: Array3<f64>,
    pub captured: Option<Vec<SemanticProjections>>,
    pub tape: Option<NetTape>,
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

pub(crate) fn attn_active(config: &DenoiserConfig, level: usize, h: usize, w: usize) -> bool {
    let hh = h >> level;
    let ww = w >> level;
    config.attn_resolutions.contains(&hh) && config.attn_resolutions.contains(&ww)
}

/// Number of attention layers that run for an input of the given size.
pub(crate) fn active_attention_count(config: &DenoiserConfig, h: usize, w: usize) -> usize {
    stage_plan(config)
        .iter()
        .filter(|st| attn_active(config, st.level, h, w))
        .count()
}

fn linear_vec(w: ArrayView2<f64>, x: &Array1<f64>, b: Option<ArrayView1<f64>>) -> Array1<f64> {
    let mut y = w.dot(x);
    if let Some(b) = b {
        y += &b;
    }
    y
}

fn time_embedding(
    p: &Params,
    t: usize,
    ctx: &CrossArtContext,
) -> (Array1<f64>, Array1<f64>, Array1<f64>, Option<Array1<f64>>, Array1<f64>) {
    let ted = p.v1("time_mlp.b1").len();
    let sin = Array1::from_vec(sinusoidal_embedding(t as f64, ted));
    let h_pre = linear_vec(p.v2("time_mlp.w1"), &sin, Some(p.v1("time_mlp.b1")));
    let h_act = h_pre.mapv(silu);
    let mut temb = linear_vec(p.v2("time_mlp.w2"), &h_act, Some(p.v1("time_mlp.b2")));
    let pooled = ctx.image_embedding.as_ref().map(|emb| {
        let m = emb.embedding.nrows() as f64;
        let mut pooled = Array1::zeros(emb.embedding.ncols());
        for row in emb.embedding.rows() {
            pooled += &row;
        }
        pooled /= m;
        pooled
    });
    if let Some(pooled) = &pooled {
        temb += &p.v2("img_cond.w").dot(pooled);
    }
    (sin, h_pre, h_act, pooled, temb)
}

fn resblock_forward(
    p: &Params,
    stage: &Stage,
    x: &Array3<f64>,
    temb: &Array1<f64>,
) -> (Array3<f64>, ResCache) {
    let n = &stage.name;
    let (xn1, norm1) = instance_norm_affine(
        x,
        p.v1(&format!("{n}.norm1.g")),
        p.v1(&format!("{n}.norm1.b")),
    );
    let a1 = silu_arr(&xn1);
    let (mut c1, conv1) = conv2d(
        &a1,
        p.v4(&format!("{n}.conv1.w")),
        p.v1(&format!("{n}.conv1.b")),
    );
    let temb_act = temb.mapv(silu);
    let tproj = linear_vec(
        p.v2(&format!("{n}.temb.w")),
        &temb_act,
        Some(p.v1(&format!("{n}.temb.b"))),
    );
    for (ch, mut plane) in c1.outer_iter_mut().enumerate() {
        plane += tproj[ch];
    }
    let (xn2, norm2) = instance_norm_affine(
        &c1,
        p.v1(&format!("{n}.norm2.g")),
        p.v1(&format!("{n}.norm2.b")),
    );
    let a2 = silu_arr(&xn2);
    let (c2, conv2) = conv2d(
        &a2,
        p.v4(&format!("{n}.conv2.w")),
        p.v1(&format!("{n}.conv2.b")),
    );
    let (skip_out, skip) = if stage.cin == stage.cout {
        (x.clone(), None)
    } else {
        let (sx, sc) = conv2d(
            x,
            p.v4(&format!("{n}.skip.w")),
            p.v1(&format!("{n}.skip.b")),
        );
        (sx, Some(sc))
    };
    (
        skip_out + &c2,
        ResCache {
            norm1,
            act1_pre: xn1,
            conv1,
            norm2,
            act2_pre: xn2,
            conv2,
            skip,
        },
    )
}

struct AttnForward {
    out: Array3<f64>,
    cache: Option<AttnCache>,
    captured: Option<SemanticProjections>,
}

fn attn_block_forward(
    p: &Params,
    stage: &Stage,
    x: &Array3<f64>,
    ctx: &CrossArtContext,
    semantic: Option<&SemanticProjections>,
    record: bool,
    want_tape: bool,
) -> Result<AttnForward> {
    let n = &stage.name;
    let heads = ctx_heads(ctx, stage.cout)?;
    let (_, h, w) = x.dim();
    let (xn, norm) = instance_norm_affine(
        x,
        p.v1(&format!("{n}.attn.norm.g")),
        p.v1(&format!("{n}.attn.norm.b")),
    );
    let phi = to_tokens(&xn);
    let q = phi.dot(&p.v2(&format!("{n}.attn.w_q")));
    let k = phi.dot(&p.v2(&format!("{n}.attn.w_k")));
    let v = phi.dot(&p.v2(&format!("{n}.attn.w_v")));

    let captured = record.then(|| SemanticProjections {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
    });

    let target = AttentionProjections::new(q, k, v.clone(), heads)?;
    let semantic_proj = match semantic {
        Some(sp) => {
            if sp.q.ncols() != stage.cout || sp.v.ncols() != stage.cout {
                return Err(Error::Context(format!(
                    "semantic cache at stage {n} has width {} but the layer expects {}",
                    sp.q.ncols(),
                    stage.cout
                )));
            }
            Some(AttentionProjections::new(
                sp.q.clone(),
                sp.k.clone(),
                sp.v.clone(),
                heads,
            )?)
        }
        None => None,
    };
    let opts = StyleAlignOptions {
        semantic_scale: ctx.guidance.semantic_scale,
        epsilon: DEFAULT_EPSILON,
        direction: ctx.artbn_direction,
        normalize: ctx.style_normalization,
    };
    let set = build_style_aligned_with(&target, semantic_proj.as_ref(), &opts)?;
    let z_prime = shared_attention(&set)?;

    let text_scale = ctx.guidance.text_scale;
    let text_emb = &ctx.text_embedding.embedding;
    let (z_dp, text_cache) = if text_scale > 0.0 {
        let tq = phi.dot(&p.v2(&format!("{n}.attn.w_tq")));
        let tk = text_emb.dot(&p.v2(&format!("{n}.attn.w_tk")));
        let tv = text_emb.dot(&p.v2(&format!("{n}.attn.w_tv")));
        let fused = crate::attention::decoupled_cross_attention(&z_prime, &tq, &tk, &tv, text_scale)?;
        let text_cache = if want_tape {
            let weights = scaled_dot_attention_weights(&AttentionProjections::new(
                tq.clone(),
                tk,
                tv.clone(),
                1,
            )?)?
            .remove(0);
            Some(TextCache {
                tq,
                tv,
                weights,
            })
        } else {
            None
        };
        (fused.z_double_prime, text_cache)
    } else {
        (z_prime.clone(), None)
    };

    let mut y_tok = z_dp.dot(&p.v2(&format!("{n}.attn.w_o")));
    let b_o = p.v1(&format!("{n}.attn.b_o"));
    for mut row in y_tok.rows_mut() {
        row += &b_o;
    }
    let out = x + &from_tokens(&y_tok, h, w);

    let cache = if want_tape {
        if semantic.is_some() || !ctx.style_normalization {
            return Err(Error::Context(
                "taped attention supports only the normalized target-only path".into(),
            ));
        }
        let attn_w = shared_attention_weights(&set)?;
        Some(AttnCache {
            norm,
            q_sig: column_sigmas(&set.target.q),
            k_sig: column_sigmas(&set.target.k),
            phi,
            q_hat: set.q_hat_t,
            k_hat: set.k_hat_t,
            v,
            attn_w,
            text: text_cache,
            z_dp,
            h,
            w,
        })
    } else {
        None
    };

    Ok(AttnForward {
        out,
        cache,
        captured,
    })
}

fn ctx_heads(ctx: &CrossArtContext, channels: usize) -> Result<usize> {
    if channels % ctx.heads != 0 {
        return Err(Error::Context(format!(
            "channel count {channels} not divisible by {} heads",
            ctx.heads
        )));
    }
    Ok(ctx.heads)
}

/// Diagnostic plain self-attention block: direct per-head softmax attention
/// with no renormalization and no text branch, sharing only the weights.
fn attn_block_vanilla(p: &Params, stage: &Stage, x: &Array3<f64>, heads: usize) -> Array3<f64> {
    let n = &stage.name;
    let (_, h, w) = x.dim();
    let (xn, _) = instance_norm_affine(
        x,
        p.v1(&format!("{n}.attn.norm.g")),
        p.v1(&format!("{n}.attn.norm.b")),
    );
    let phi = to_tokens(&xn);
    let q = phi.dot(&p.v2(&format!("{n}.attn.w_q")));
    let k = phi.dot(&p.v2(&format!("{n}.attn.w_k")));
    let v = phi.dot(&p.v2(&format!("{n}.attn.w_v")));
    let m = phi.nrows();
    let c = q.ncols();
    let hd = c / heads;
    let mut z = Array2::zeros((m, c));
    for head in 0..heads {
        let cols = head * hd..(head + 1) * hd;
        for i in 0..m {
            let mut logits = vec![0.0; m];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in cols.clone() {
                    dot += q[[i, d]] * k[[j, d]];
                }
                *logit = dot / (hd as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                let wgt = e / denom;
                for d in cols.clone() {
                    z[[i, d]] += wgt * v[[j, d]];
                }
            }
        }
    }
    let mut y_tok = z.dot(&p.v2(&format!("{n}.attn.w_o")));
    let b_o = p.v1(&format!("{n}.attn.b_o"));
    for mut row in y_tok.rows_mut() {
        row += &b_o;
    }
    x + &from_tokens(&y_tok, h, w)
}

/// Full forward over one sample. `record` captures raw q/k/v at every active
/// attention layer; `want_tape` retains the caches the backward needs.
pub(crate) fn forward_single(
    config: &DenoiserConfig,
    layout: &ParamLayout,
    params: &[f64],
    x: &Array3<f64>,
    t: usize,
    ctx: &CrossArtContext,
    record: bool,
    want_tape: bool,
    vanilla: bool,
) -> Result<ForwardOutput> {
    let p = Params {
        layout,
        data: params,
    };
    let (_, h, w) = x.dim();
    let plan = stage_plan(config);

    let expected = active_attention_count(config, h, w);
    if let Some(sem) = &ctx.semantic_features {
        if record {
            return Err(Error::Context(
                "a recording pass must not itself consume semantic features".into(),
            ));
        }
        if sem.len() != expected {
            return Err(Error::Context(format!(
                "semantic cache has {} layers but {} attention layers are active",
                sem.len(),
                expected
            )));
        }
    }

    let (sin_emb, mlp_h_pre, mlp_h_act, pooled_img, temb) = time_embedding(&p, t, ctx);

    let (mut cur, conv_in_cache) = conv2d(x, p.v4("conv_in.w"), p.v1("conv_in.b"));
    let mut skips: Vec<Array3<f64>> = Vec::with_capacity(config.depth);
    let mut stages_tape: Vec<StageTape> = Vec::new();
    let mut captured: Vec<SemanticProjections> = Vec::new();
    let mut sem_idx = 0usize;

    let mut run_stage = |stage: &Stage,
                         cur: Array3<f64>,
                         sem_idx: &mut usize,
                         captured: &mut Vec<SemanticProjections>,
                         stages_tape: &mut Vec<StageTape>|
     -> Result<Array3<f64>> {
        let (after_res, res_cache) = resblock_forward(&p, stage, &cur, &temb);
        let active = attn_active(config, stage.level, h, w);
        let (out, attn_cache) = if active {
            if vanilla {
                let heads = ctx_heads(ctx, stage.cout)?;
                (attn_block_vanilla(&p, stage, &after_res, heads), None)
            } else {
                let semantic = ctx
                    .semantic_features
                    .as_ref()
                    .map(|sem| &sem[*sem_idx]);
                let fwd =
                    attn_block_forward(&p, stage, &after_res, ctx, semantic, record, want_tape)?;
                *sem_idx += 1;
                if let Some(cap) = fwd.captured {
                    captured.push(cap);
                }
                (fwd.out, fwd.cache)
            }
        } else {
            (after_res, None)
        };
        if want_tape {
            stages_tape.push(StageTape {
                res: res_cache,
                attn: attn_cache,
            });
        }
        Ok(out)
    };

    let mut stage_iter = plan.iter();
    for _ in 0..config.depth {
        let stage = stage_iter.next().unwrap();
        cur = run_stage(stage, cur, &mut sem_idx, &mut captured, &mut stages_tape)?;
        skips.push(cur.clone());
        cur = avg_pool2(&cur);
    }
    for _ in 0..2 {
        let stage = stage_iter.next().unwrap();
        cur = run_stage(stage, cur, &mut sem_idx, &mut captured, &mut stages_tape)?;
    }
    for i in (0..config.depth).rev() {
        let stage = stage_iter.next().unwrap();
        let up = upsample_nearest2(&cur);
        let skip = &skips[i];
        let mut cat = Array3::zeros((up.dim().0 + skip.dim().0, up.dim().1, up.dim().2));
        cat.slice_mut(s![..up.dim().0, .., ..]).assign(&up);
        cat.slice_mut(s![up.dim().0.., .., ..]).assign(skip);
        cur = run_stage(stage, cat, &mut sem_idx, &mut captured, &mut stages_tape)?;
    }

    let (out_n, out_norm) = instance_norm_affine(&cur, p.v1("out.norm.g"), p.v1("out.norm.b"));
    let out_act = silu_arr(&out_n);
    let (eps, out_conv) = conv2d(&out_act, p.v4("out.conv.w"), p.v1("out.conv.b"));

    Ok(ForwardOutput {
        eps,
        captured: record.then_some(captured),
        tape: want_tape.then_some(NetTape {
            sin_emb,
            mlp_h_pre,
            mlp_h_act,
            temb,
            pooled_img,
            conv_in: conv_in_cache,
            stages: stages_tape,
            out_norm,
            out_act_pre: out_n,
            out_conv,
        }),
    })
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

fn conv_backward_into(
    grads: &mut GradBuf,
    name: &str,
    dy: &Array3<f64>,
    cache: &ConvCache,
    w: ArrayView4<f64>,
) -> Array3<f64> {
    let (dw_slice, db_slice) = grads.pair(&format!("{name}.w"), &format!("{name}.b"));
    let seg_shape = w.dim();
    let dw = ndarray::ArrayViewMut4::from_shape(seg_shape, dw_slice).unwrap();
    let db = ndarray::ArrayViewMut1::from_shape(seg_shape.0, db_slice).unwrap();
    conv2d_backward(dy, cache, w, dw, db)
}

fn norm_backward_into(
    grads: &mut GradBuf,
    g_name: &str,
    b_name: &str,
    dy: &Array3<f64>,
    cache: &NormCache,
    g: ArrayView1<f64>,
) -> Array3<f64> {
    let (dg_slice, db_slice) = grads.pair(g_name, b_name);
    let dg = ndarray::ArrayViewMut1::from_shape(dg_slice.len(), dg_slice).unwrap();
    let db = ndarray::ArrayViewMut1::from_shape(db_slice.len(), db_slice).unwrap();
    instance_norm_affine_backward(dy, cache, g, dg, db)
}

fn resblock_backward(
    p: &Params,
    grads: &mut GradBuf,
    stage: &Stage,
    cache: &ResCache,
    temb: &Array1<f64>,
    dtemb: &mut Array1<f64>,
    dy: &Array3<f64>,
) -> Array3<f64> {
    let n = &stage.name;
    // out = skip(x) + conv2(a2)
    let da2_full = conv_backward_into(
        grads,
        &format!("{n}.conv2"),
        dy,
        &cache.conv2,
        p.v4(&format!("{n}.conv2.w")),
    );
    let dxn2 = silu_backward(&da2_full, &cache.act2_pre);
    let dc1 = norm_backward_into(
        grads,
        &format!("{n}.norm2.g"),
        &format!("{n}.norm2.b"),
        &dxn2,
        &cache.norm2,
        p.v1(&format!("{n}.norm2.g")),
    );
    // Time projection: per-channel bias added to conv1 output.
    let cout = dc1.dim().0;
    let mut dtproj = Array1::zeros(cout);
    for ch in 0..cout {
        dtproj[ch] = dc1.slice(s![ch, .., ..]).sum();
    }
    let temb_act = temb.mapv(silu);
    {
        let (dw_slice, db_slice) = grads.pair(&format!("{n}.temb.w"), &format!("{n}.temb.b"));
        let mut dw =
            ndarray::ArrayViewMut2::from_shape((cout, temb.len()), dw_slice).unwrap();
        for i in 0..cout {
            for j in 0..temb.len() {
                dw[[i, j]] += dtproj[i] * temb_act[j];
            }
        }
        for (o, v) in db_slice.iter_mut().zip(dtproj.iter()) {
            *o += v;
        }
    }
    let dtemb_act = p.v2(&format!("{n}.temb.w")).t().dot(&dtproj);
    for j in 0..temb.len() {
        dtemb[j] += dtemb_act[j] * dsilu(temb[j]);
    }

    let da1 = conv_backward_into(
        grads,
        &format!("{n}.conv1"),
        &dc1,
        &cache.conv1,
        p.v4(&format!("{n}.conv1.w")),
    );
    let dxn1 = silu_backward(&da1, &cache.act1_pre);
    let mut dx = norm_backward_into(
        grads,
        &format!("{n}.norm1.g"),
        &format!("{n}.norm1.b"),
        &dxn1,
        &cache.norm1,
        p.v1(&format!("{n}.norm1.g")),
    );
    match &cache.skip {
        Some(skip_cache) => {
            let dskip = conv_backward_into(
                grads,
                &format!("{n}.skip"),
                dy,
                skip_cache,
                p.v4(&format!("{n}.skip.w")),
            );
            dx += &dskip;
        }
        None => dx += dy,
    }
    dx
}

fn attn_block_backward(
    p: &Params,
    grads: &mut GradBuf,
    stage: &Stage,
    cache: &AttnCache,
    text_emb: &Array2<f64>,
    text_scale: f64,
    heads: usize,
    dy: &Array3<f64>,
) -> Array3<f64> {
    let n = &stage.name;
    let c = stage.cout;
    let dy_tok = to_tokens(dy);

    // Output projection.
    let dz_dp = dy_tok.dot(&p.v2(&format!("{n}.attn.w_o")).t());
    {
        let (dw_slice, db_slice) = grads.pair(&format!("{n}.attn.w_o"), &format!("{n}.attn.b_o"));
        let dw = ndarray::ArrayViewMut2::from_shape((c, c), dw_slice).unwrap();
        accumulate_matmul_t(dw, cache.z_dp.view(), dy_tok.view());
        for j in 0..c {
            db_slice[j] += dy_tok.column(j).sum();
        }
    }

    let mut dphi: Array2<f64> = Array2::zeros(cache.phi.dim());
    let dz_prime;

    if let Some(text) = &cache.text {
        // Text branch: z_dp = z' + ts * At . Tv
        let db = &dz_dp * text_scale;
        let dat = db.dot(&text.tv.t());
        let dtv = text.weights.t().dot(&db);
        let dst = softmax_rows_backward(&dat, &text.weights);
        let scale = 1.0 / (c as f64).sqrt();
        let tk = text_emb.dot(&p.v2(&format!("{n}.attn.w_tk")));
        let dtq = dst.dot(&tk) * scale;
        let dtk = dst.t().dot(&text.tq) * scale;
        grads.add2(
            &format!("{n}.attn.w_tq"),
            &cache.phi.t().dot(&dtq),
        );
        dphi += &dtq.dot(&p.v2(&format!("{n}.attn.w_tq")).t());
        grads.add2(&format!("{n}.attn.w_tk"), &text_emb.t().dot(&dtk));
        grads.add2(&format!("{n}.attn.w_tv"), &text_emb.t().dot(&dtv));
        dz_prime = dz_dp;
    } else {
        dz_prime = dz_dp;
    }

    // Image branch per head: z'_h = A_h . V_h with normalized q/k.
    let hd = c / heads;
    let head_scale = 1.0 / (hd as f64).sqrt();
    let mut dq_hat = Array2::zeros(cache.q_hat.dim());
    let mut dk_hat = Array2::zeros(cache.k_hat.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let a = &cache.attn_w[h];
        let dz_h = dz_prime.slice(s![.., lo..hi]).to_owned();
        let v_h = cache.v.slice(s![.., lo..hi]).to_owned();
        let da = dz_h.dot(&v_h.t());
        let dv_h = a.t().dot(&dz_h);
        dv.slice_mut(s![.., lo..hi]).assign(&dv_h);
        let ds = softmax_rows_backward(&da, a);
        let q_h = cache.q_hat.slice(s![.., lo..hi]).to_owned();
        let k_h = cache.k_hat.slice(s![.., lo..hi]).to_owned();
        dq_hat
            .slice_mut(s![.., lo..hi])
            .assign(&(&ds.dot(&k_h) * head_scale));
        dk_hat
            .slice_mut(s![.., lo..hi])
            .assign(&(&ds.t().dot(&q_h) * head_scale));
    }

    let dq = column_norm_backward(&dq_hat, &cache.q_hat, &cache.q_sig);
    let dk = column_norm_backward(&dk_hat, &cache.k_hat, &cache.k_sig);

    grads.add2(&format!("{n}.attn.w_q"), &cache.phi.t().dot(&dq));
    grads.add2(&format!("{n}.attn.w_k"), &cache.phi.t().dot(&dk));
    grads.add2(&format!("{n}.attn.w_v"), &cache.phi.t().dot(&dv));
    dphi += &dq.dot(&p.v2(&format!("{n}.attn.w_q")).t());
    dphi += &dk.dot(&p.v2(&format!("{n}.attn.w_k")).t());
    dphi += &dv.dot(&p.v2(&format!("{n}.attn.w_v")).t());

    let dxn = from_tokens(&dphi, cache.h, cache.w);
    let mut dx = norm_backward_into(
        grads,
        &format!("{n}.attn.norm.g"),
        &format!("{n}.attn.norm.b"),
        &dxn,
        &cache.norm,
        p.v1(&format!("{n}.attn.norm.g")),
    );
    dx += dy; // residual
    dx
}

/// Backpropagate `d_eps` through a taped forward, accumulating parameter
/// gradients. Returns nothing; input gradients are discarded.
pub(crate) fn backward_single(
    config: &DenoiserConfig,
    layout: &ParamLayout,
    params: &[f64],
    ctx: &CrossArtContext,
    tape: &NetTape,
    d_eps: &Array3<f64>,
    grad_data: &mut [f64],
) {
    let p = Params {
        layout,
        data: params,
    };
    let mut grads = GradBuf {
        layout,
        data: grad_data,
    };
    let plan = stage_plan(config);
    let heads = ctx.heads;
    let text_emb = &ctx.text_embedding.embedding;
    let (_, h, w) = tape.conv_in.in_dims;

    // Output head.
    let d_out_act = conv_backward_into(&mut grads, "out.conv", d_eps, &tape.out_conv, p.v4("out.conv.w"));
    let d_out_n = silu_backward(&d_out_act, &tape.out_act_pre);
    let mut dcur = norm_backward_into(
        &mut grads,
        "out.norm.g",
        "out.norm.b",
        &d_out_n,
        &tape.out_norm,
        p.v1("out.norm.g"),
    );

    let mut dtemb = Array1::zeros(tape.temb.len());
    let mut dskips: Vec<Option<Array3<f64>>> = vec![None; config.depth];

    // Decoder stages backward (they were the last `depth` stages).
    let n_stages = plan.len();
    let mut tape_idx = n_stages;
    for i in 0..config.depth {
        tape_idx -= 1;
        let stage = &plan[tape_idx];
        let st = &tape.stages[tape_idx];
        if let Some(attn) = &st.attn {
            dcur = attn_block_backward(
                &p,
                &mut grads,
                stage,
                attn,
                text_emb,
                ctx.guidance.text_scale,
                heads,
                &dcur,
            );
        }
        let dcat = resblock_backward(&p, &mut grads, stage, &st.res, &tape.temb, &mut dtemb, &dcur);
        let c_deep = stage.cin - (config.base_channels << i);
        let d_up = dcat.slice(s![..c_deep, .., ..]).to_owned();
        dskips[i] = Some(dcat.slice(s![c_deep.., .., ..]).to_owned());
        dcur = upsample_nearest2_backward(&d_up);
    }

    // Middle stages.
    for _ in 0..2 {
        tape_idx -= 1;
        let stage = &plan[tape_idx];
        let st = &tape.stages[tape_idx];
        if let Some(attn) = &st.attn {
            dcur = attn_block_backward(
                &p,
                &mut grads,
                stage,
                attn,
                text_emb,
                ctx.guidance.text_scale,
                heads,
                &dcur,
            );
        }
        dcur = resblock_backward(&p, &mut grads, stage, &st.res, &tape.temb, &mut dtemb, &dcur);
    }

    // Encoder stages, deepest first.
    for i in (0..config.depth).rev() {
        tape_idx -= 1;
        let stage = &plan[tape_idx];
        let st = &tape.stages[tape_idx];
        dcur = avg_pool2_backward(&dcur);
        if let Some(ds) = dskips[i].take() {
            dcur += &ds;
        }
        if let Some(attn) = &st.attn {
            dcur = attn_block_backward(
                &p,
                &mut grads,
                stage,
                attn,
                text_emb,
                ctx.guidance.text_scale,
                heads,
                &dcur,
            );
        }
        dcur = resblock_backward(&p, &mut grads, stage, &st.res, &tape.temb, &mut dtemb, &dcur);
    }
    debug_assert_eq!(tape_idx, 0);
    debug_assert_eq!(dcur.dim(), (config.base_channels, h, w));

    let _ = conv_backward_into(&mut grads, "conv_in", &dcur, &tape.conv_in, p.v4("conv_in.w"));

    // Time/conditioning embedding backward.
    if let Some(pooled) = &tape.pooled_img {
        let dw_slice = grads.one("img_cond.w");
        let mut dw =
            ndarray::ArrayViewMut2::from_shape((dtemb.len(), pooled.len()), dw_slice).unwrap();
        for i in 0..dtemb.len() {
            for j in 0..pooled.len() {
                dw[[i, j]] += dtemb[i] * pooled[j];
            }
        }
    }
    let dh_act = p.v2("time_mlp.w2").t().dot(&dtemb);
    {
        let (dw_slice, db_slice) = grads.pair("time_mlp.w2", "time_mlp.b2");
        let mut dw = ndarray::ArrayViewMut2::from_shape(
            (dtemb.len(), tape.mlp_h_act.len()),
            dw_slice,
        )
        .unwrap();
        for i in 0..dtemb.len() {
            for j in 0..tape.mlp_h_act.len() {
                dw[[i, j]] += dtemb[i] * tape.mlp_h_act[j];
            }
        }
        for (o, v) in db_slice.iter_mut().zip(dtemb.iter()) {
            *o += v;
        }
    }
    let mut dh_pre = dh_act;
    for (d, &pre) in dh_pre.iter_mut().zip(tape.mlp_h_pre.iter()) {
        *d *= dsilu(pre);
    }
    let (dw_slice, db_slice) = grads.pair("time_mlp.w1", "time_mlp.b1");
    let mut dw =
        ndarray::ArrayViewMut2::from_shape((dh_pre.len(), tape.sin_emb.len()), dw_slice).unwrap();
    for i in 0..dh_pre.len() {
        for j in 0..tape.sin_emb.len() {
            dw[[i, j]] += dh_pre[i] * tape.sin_emb[j];
        }
    }
    for (o, v) in db_slice.iter_mut().zip(dh_pre.iter()) {
        *o += v;
    }
}
