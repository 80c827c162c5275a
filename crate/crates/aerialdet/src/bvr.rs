//! Key-point attention over pyramid features.
//!
//! A light point head predicts, per grid cell, how much the cell looks like
//! an object center or corner plus sub-pixel offsets for both. The top-k
//! corner cells become *keys*; every grid cell is a *query* that attends to
//! those keys with a similarity mixing appearance (scaled dot product of
//! learned query/key projections) and geometry (an affine map of a sin/cos
//! embedding of the relative displacement). The attention-weighted value
//! projections of the key features are added to the query feature, so the
//! head degenerates to the identity when the value projection is zero.
//!
//! The whole enhancement is differentiable with respect to features, corner
//! offsets, and every projection; key *selection* is a hard top-k and
//! deliberately carries no gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{CustomOp, Graph, Var};
use crate::numerics::ops;
use crate::numerics::tensor::{ConvSpec, Tensor};

/// Hard cap on keys per image; dense aerial scenes need more than the usual
/// default of 50, but not unboundedly many.
pub const MAX_KEYS: usize = 400;

/// Sizing of the point head and the attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BvrConfig {
    /// Feature channels `d` of the enhanced (master) representation.
    pub channels: usize,
    /// Dimension `d_a` of the query/key projections.
    pub attn_dim: usize,
    /// Dimension `d_g` of the location embedding; two axes x sin/cos, so it
    /// must be divisible by 4.
    pub embed_dim: usize,
    /// Keys kept per image (clamped to the grid size, capped at [`MAX_KEYS`]).
    pub top_k: usize,
    /// Longest period of the geometric embedding, in grid units.
    pub max_period: f64,
}

impl Default for BvrConfig {
    fn default() -> BvrConfig {
        BvrConfig {
            channels: 256,
            attn_dim: 64,
            embed_dim: 64,
            top_k: 50,
            max_period: 1000.0,
        }
    }
}

impl BvrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.attn_dim == 0 {
            return Err(Error::invalid("channels and attn_dim must be >= 1"));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(Error::invalid(format!(
                "embed_dim must be a positive multiple of 4, got {}",
                self.embed_dim
            )));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        if self.top_k > MAX_KEYS {
            return Err(Error::invalid(format!("top_k {} exceeds the cap of {MAX_KEYS}", self.top_k)));
        }
        if !(self.max_period > 0.0) {
            return Err(Error::invalid("max_period must be positive"));
        }
        Ok(())
    }
}

/// Learned parameters: point-head convolutions plus attention projections.
#[derive(Clone, Debug)]
pub struct BvrParams {
    /// Two shared 3x3 trunk convolutions (d -> d).
    pub trunk_w1: Tensor,
    pub trunk_b1: Tensor,
    pub trunk_w2: Tensor,
    pub trunk_b2: Tensor,
    /// Score sub-network: 1x1 conv d -> 2 (center, corner).
    pub score_w: Tensor,
    pub score_b: Tensor,
    /// Offset sub-network: 1x1 conv d -> 4 (center dx,dy then corner dx,dy).
    pub offset_w: Tensor,
    pub offset_b: Tensor,
    /// Query/key projections, (attn_dim, d, 1, 1).
    pub tq: Tensor,
    pub tk: Tensor,
    /// Value projection, (d, d, 1, 1).
    pub tv: Tensor,
    /// Affine head on the location embedding: weights (1, embed_dim, 1, 1)
    /// and scalar bias.
    pub geo_w: Tensor,
    pub geo_b: Tensor,
}

impl BvrParams {
    pub fn init(cfg: &BvrConfig, rng: &mut impl Rng) -> Result<BvrParams> {
        cfg.validate()?;
        let d = cfg.channels;
        let trunk_std = (1.0 / (9 * d) as f64).sqrt();
        let proj_std = (1.0 / d as f64).sqrt();
        Ok(BvrParams {
            trunk_w1: Tensor::randn([d, d, 3, 3], trunk_std, rng),
            trunk_b1: Tensor::zeros([1, d, 1, 1]),
            trunk_w2: Tensor::randn([d, d, 3, 3], trunk_std, rng),
            trunk_b2: Tensor::zeros([1, d, 1, 1]),
            score_w: Tensor::randn([2, d, 1, 1], proj_std, rng),
            score_b: Tensor::zeros([1, 2, 1, 1]),
            offset_w: Tensor::randn([4, d, 1, 1], proj_std, rng),
            offset_b: Tensor::zeros([1, 4, 1, 1]),
            tq: Tensor::randn([cfg.attn_dim, d, 1, 1], proj_std, rng),
            tk: Tensor::randn([cfg.attn_dim, d, 1, 1], proj_std, rng),
            tv: Tensor::randn([d, d, 1, 1], proj_std, rng),
            geo_w: Tensor::randn([1, cfg.embed_dim, 1, 1], (1.0 / cfg.embed_dim as f64).sqrt(), rng),
            geo_b: Tensor::zeros([1, 1, 1, 1]),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BvrVars {
        BvrVars {
            trunk_w1: g.leaf(self.trunk_w1.clone()),
            trunk_b1: g.leaf(self.trunk_b1.clone()),
            trunk_w2: g.leaf(self.trunk_w2.clone()),
            trunk_b2: g.leaf(self.trunk_b2.clone()),
            score_w: g.leaf(self.score_w.clone()),
            score_b: g.leaf(self.score_b.clone()),
            offset_w: g.leaf(self.offset_w.clone()),
            offset_b: g.leaf(self.offset_b.clone()),
            tq: g.leaf(self.tq.clone()),
            tk: g.leaf(self.tk.clone()),
            tv: g.leaf(self.tv.clone()),
            geo_w: g.leaf(self.geo_w.clone()),
            geo_b: g.leaf(self.geo_b.clone()),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("bvr.trunk_w1".into(), &mut self.trunk_w1),
            ("bvr.trunk_b1".into(), &mut self.trunk_b1),
            ("bvr.trunk_w2".into(), &mut self.trunk_w2),
            ("bvr.trunk_b2".into(), &mut self.trunk_b2),
            ("bvr.score_w".into(), &mut self.score_w),
            ("bvr.score_b".into(), &mut self.score_b),
            ("bvr.offset_w".into(), &mut self.offset_w),
            ("bvr.offset_b".into(), &mut self.offset_b),
            ("bvr.tq".into(), &mut self.tq),
            ("bvr.tk".into(), &mut self.tk),
            ("bvr.tv".into(), &mut self.tv),
            ("bvr.geo_w".into(), &mut self.geo_w),
            ("bvr.geo_b".into(), &mut self.geo_b),
        ]
    }
}

/// Graph handles created by [`BvrParams::bind`].
#[derive(Clone, Copy, Debug)]
pub struct BvrVars {
    pub trunk_w1: Var,
    pub trunk_b1: Var,
    pub trunk_w2: Var,
    pub trunk_b2: Var,
    pub score_w: Var,
    pub score_b: Var,
    pub offset_w: Var,
    pub offset_b: Var,
    pub tq: Var,
    pub tk: Var,
    pub tv: Var,
    pub geo_w: Var,
    pub geo_b: Var,
}

impl BvrVars {
    pub fn ordered(&self) -> [(&'static str, Var); 13] {
        [
            ("bvr.trunk_w1", self.trunk_w1),
            ("bvr.trunk_b1", self.trunk_b1),
            ("bvr.trunk_w2", self.trunk_w2),
            ("bvr.trunk_b2", self.trunk_b2),
            ("bvr.score_w", self.score_w),
            ("bvr.score_b", self.score_b),
            ("bvr.offset_w", self.offset_w),
            ("bvr.offset_b", self.offset_b),
            ("bvr.tq", self.tq),
            ("bvr.tk", self.tk),
            ("bvr.tv", self.tv),
            ("bvr.geo_w", self.geo_w),
            ("bvr.geo_b", self.geo_b),
        ]
    }
}

/// The four per-cell prediction maps of the point head.
#[derive(Clone, Copy, Debug)]
pub struct PointHeadOutput {
    /// (N, 1, H, W) center-ness scores.
    pub center_scores: Var,
    /// (N, 1, H, W) corner-ness scores; ranking source for key selection.
    pub corner_scores: Var,
    /// (N, 2, H, W) sub-pixel center offsets in cell units (dx, dy).
    pub center_offsets: Var,
    /// (N, 2, H, W) sub-pixel corner offsets in cell units (dx, dy).
    pub corner_offsets: Var,
}

/// The selected key points of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySet {
    /// Unrefined (x, y) grid cells the keys were gathered at.
    pub cells: Vec<(usize, usize)>,
    /// Cell positions refined by the corner sub-pixel offsets.
    pub positions: Vec<(f64, f64)>,
    /// Corner-ness scores, non-increasing.
    pub scores: Vec<f64>,
    /// Feature vectors gathered at the unrefined cells.
    pub features: Vec<Vec<f64>>,
}

impl KeySet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Two shared 3x3 convolutions (ReLU) feeding the score and offset
/// sub-networks.
pub fn point_head_forward(g: &mut Graph, feature: Var, vars: &BvrVars) -> Result<PointHeadOutput> {
    let h1 = g.conv2d(feature, vars.trunk_w1, vars.trunk_b1, ConvSpec::same(3, 1))?;
    let h1 = g.relu(h1);
    let h2 = g.conv2d(h1, vars.trunk_w2, vars.trunk_b2, ConvSpec::same(3, 1))?;
    let h2 = g.relu(h2);
    let scores = g.conv2d(h2, vars.score_w, vars.score_b, ConvSpec::pointwise(1))?;
    let offsets = g.conv2d(h2, vars.offset_w, vars.offset_b, ConvSpec::pointwise(1))?;
    Ok(PointHeadOutput {
        center_scores: g.slice_channels(scores, 0, 1)?,
        corner_scores: g.slice_channels(scores, 1, 1)?,
        center_offsets: g.slice_channels(offsets, 0, 2)?,
        corner_offsets: g.slice_channels(offsets, 2, 2)?,
    })
}

/// Pick the `k` highest corner-score cells per image (all cells when the
/// grid has fewer), ties broken toward the earlier row-major index.
///
/// Positions are the cells refined by the corner offsets; features are
/// gathered at the unrefined cells. Selection reads values only — it is not
/// differentiable.
pub fn select_top_k_keys(
    corner_scores: &Tensor,
    corner_offsets: &Tensor,
    feature: &Tensor,
    k: usize,
) -> Result<Vec<KeySet>> {
    if k == 0 {
        return Err(Error::invalid("key count k must be >= 1"));
    }
    let [n, _, h, w] = feature.shape();
    if h == 0 || w == 0 {
        return Err(Error::invalid("key selection on an empty grid"));
    }
    if corner_scores.shape() != [n, 1, h, w] {
        return Err(Error::shape("corner score channels", 1, corner_scores.shape()[1], "select_top_k_keys"));
    }
    if corner_offsets.shape() != [n, 2, h, w] {
        return Err(Error::shape("corner offset channels", 2, corner_offsets.shape()[1], "select_top_k_keys"));
    }

    let d = feature.channels();
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut order: Vec<usize> = (0..h * w).collect();
        order.sort_by(|&a, &b_| {
            let sa = corner_scores.at(b, 0, a / w, a % w);
            let sb = corner_scores.at(b, 0, b_ / w, b_ % w);
            sb.total_cmp(&sa).then(a.cmp(&b_))
        });
        let take = k.min(h * w);
        let mut set = KeySet {
            cells: Vec::with_capacity(take),
            positions: Vec::with_capacity(take),
            scores: Vec::with_capacity(take),
            features: Vec::with_capacity(take),
        };
        for &idx in order.iter().take(take) {
            let (y, x) = (idx / w, idx % w);
            set.cells.push((x, y));
            set.positions.push((
                x as f64 + corner_offsets.at(b, 0, y, x),
                y as f64 + corner_offsets.at(b, 1, y, x),
            ));
            set.scores.push(corner_scores.at(b, 0, y, x));
            set.features.push((0..d).map(|c| feature.at(b, c, y, x)).collect());
        }
        debug_assert!(set.scores.windows(2).all(|p| p[0] >= p[1]));
        out.push(set);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// similarity pieces (pure, vector-level)

/// Interleaved sin/cos embedding of a 2-D position over geometrically spaced
/// periods: for frequency index t, lambda_t = max_period^(t/T) with
/// T = d_g/4, and the layout per frequency is
/// [sin(x/l), cos(x/l), sin(y/l), cos(y/l)].
pub fn location_embedding(pos: (f64, f64), d_g: usize, max_period: f64) -> Result<Vec<f64>> {
    if d_g == 0 || d_g % 4 != 0 {
        return Err(Error::invalid(format!("embedding dim must be a positive multiple of 4, got {d_g}")));
    }
    if !(max_period > 0.0) {
        return Err(Error::invalid("max_period must be positive"));
    }
    let t_count = d_g / 4;
    let mut out = vec![0.0; d_g];
    for t in 0..t_count {
        let lambda = max_period.powf(t as f64 / t_count as f64);
        let (sx, cx) = (pos.0 / lambda).sin_cos();
        let (sy, cy) = (pos.1 / lambda).sin_cos();
        out[4 * t] = sx;
        out[4 * t + 1] = cx;
        out[4 * t + 2] = sy;
        out[4 * t + 3] = cy;
    }
    Ok(out)
}

/// d(w . embedding(delta))/d(delta) for the geometric attention term.
fn embedding_dot_grad(w: &[f64], delta: (f64, f64), max_period: f64) -> (f64, f64) {
    let t_count = w.len() / 4;
    let (mut ddx, mut ddy) = (0.0, 0.0);
    for t in 0..t_count {
        let lambda = max_period.powf(t as f64 / t_count as f64);
        let (sx, cx) = (delta.0 / lambda).sin_cos();
        let (sy, cy) = (delta.1 / lambda).sin_cos();
        ddx += (w[4 * t] * cx - w[4 * t + 1] * sx) / lambda;
        ddy += (w[4 * t + 2] * cy - w[4 * t + 3] * sy) / lambda;
    }
    (ddx, ddy)
}

/// `m` is (rows, cols, 1, 1): out[r] = sum_c m[r,c] * v[c].
fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let [rows, cols, _, _] = m.shape();
    debug_assert_eq!(cols, v.len());
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += m.at(r, c, 0, 0) * v[c];
        }
        out[r] = acc;
    }
    out
}

/// Transpose apply: out[c] = sum_r m[r,c] * v[r].
fn matvec_t(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let [rows, cols, _, _] = m.shape();
    debug_assert_eq!(rows, v.len());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += m.at(r, c, 0, 0) * v[r];
        }
    }
    out
}

/// Scaled dot product of the projected query and key features:
/// (T_q fq . T_k fk) / sqrt(d_a).
pub fn appearance_similarity(tq: &Tensor, tk: &Tensor, fq: &[f64], fk: &[f64]) -> Result<f64> {
    let [da, d, _, _] = tq.shape();
    if tk.shape() != tq.shape() {
        return Err(Error::shape("projection rows", da, tk.shape()[0], "query vs key projection"));
    }
    if fq.len() != d || fk.len() != d {
        return Err(Error::shape("feature dim", d, fq.len().max(fk.len()), "appearance_similarity"));
    }
    let q = matvec(tq, fq);
    let k = matvec(tk, fk);
    let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
    Ok(dot / (da as f64).sqrt())
}

/// Affine map of the location embedding of the relative displacement
/// `gk - gq`; depends on that difference only.
pub fn geometric_similarity(
    geo_w: &[f64],
    geo_b: f64,
    gq: (f64, f64),
    gk: (f64, f64),
    max_period: f64,
) -> Result<f64> {
    let e = location_embedding((gk.0 - gq.0, gk.1 - gq.1), geo_w.len(), max_period)?;
    Ok(geo_w.iter().zip(&e).map(|(w, x)| w * x).sum::<f64>() + geo_b)
}

/// Enhance one query feature against a key set (the per-query form of the
/// attention; the map-level path in [`bvr_head_forward`] matches it).
///
/// An empty key set degenerates to the skip connection and logs a warning.
pub fn bvr_enhance(
    fq: &[f64],
    gq: (f64, f64),
    keys: &KeySet,
    params: &BvrParams,
    cfg: &BvrConfig,
) -> Result<Vec<f64>> {
    if keys.is_empty() {
        log::warn!("empty key set at query {gq:?}: enhancement degenerates to the skip connection");
        return Ok(fq.to_vec());
    }
    let mut logits = Vec::with_capacity(keys.len());
    for j in 0..keys.len() {
        let sa = appearance_similarity(&params.tq, &params.tk, fq, &keys.features[j])?;
        let sg = geometric_similarity(
            params.geo_w.data(),
            params.geo_b.data()[0],
            gq,
            keys.positions[j],
            cfg.max_period,
        )?;
        logits.push(sa + sg);
    }
    let attn = ops::softmax(&logits)?;
    let mut out = fq.to_vec();
    for j in 0..keys.len() {
        let v = matvec(&params.tv, &keys.features[j]);
        for c in 0..out.len() {
            out[c] += attn[j] * v[c];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// map-level attention (the differentiable composite)

struct KeyContext {
    fks: Vec<Vec<f64>>,
    kvecs: Vec<Vec<f64>>,
    vvecs: Vec<Vec<f64>>,
    pos: Vec<(f64, f64)>,
}

fn key_context(
    feature: &Tensor,
    corner_offsets: &Tensor,
    cells: &[(usize, usize)],
    tk: &Tensor,
    tv: &Tensor,
    b: usize,
) -> KeyContext {
    let d = feature.channels();
    let mut ctx = KeyContext {
        fks: Vec::with_capacity(cells.len()),
        kvecs: Vec::with_capacity(cells.len()),
        vvecs: Vec::with_capacity(cells.len()),
        pos: Vec::with_capacity(cells.len()),
    };
    for &(x, y) in cells {
        let fk: Vec<f64> = (0..d).map(|c| feature.at(b, c, y, x)).collect();
        ctx.kvecs.push(matvec(tk, &fk));
        ctx.vvecs.push(matvec(tv, &fk));
        ctx.pos.push((
            x as f64 + corner_offsets.at(b, 0, y, x),
            y as f64 + corner_offsets.at(b, 1, y, x),
        ));
        ctx.fks.push(fk);
    }
    ctx
}

fn check_attention_shapes(
    feature: &Tensor,
    corner_offsets: &Tensor,
    tq: &Tensor,
    tk: &Tensor,
    tv: &Tensor,
    geo_w: &Tensor,
    cells: &[Vec<(usize, usize)>],
) -> Result<()> {
    let [n, d, h, w] = feature.shape();
    if corner_offsets.shape() != [n, 2, h, w] {
        return Err(Error::shape("corner offset channels", 2, corner_offsets.shape()[1], "attention input"));
    }
    let da = tq.shape()[0];
    if tq.shape() != [da, d, 1, 1] || tk.shape() != [da, d, 1, 1] {
        return Err(Error::shape("projection columns", d, tq.shape()[1], "query/key projection vs feature channels"));
    }
    if tv.shape() != [d, d, 1, 1] {
        return Err(Error::shape("value projection rows", d, tv.shape()[0], "value projection"));
    }
    let dg = geo_w.channels();
    if dg == 0 || dg % 4 != 0 {
        return Err(Error::invalid(format!("geometric head width must be a positive multiple of 4, got {dg}")));
    }
    if cells.len() != n {
        return Err(Error::shape("batch", n, cells.len(), "key cells per image"));
    }
    for per_image in cells {
        for &(x, y) in per_image {
            if x >= w || y >= h {
                return Err(Error::invalid(format!("key cell ({x}, {y}) outside {w}x{h} grid")));
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn enhance_forward(
    feature: &Tensor,
    corner_offsets: &Tensor,
    tq: &Tensor,
    tk: &Tensor,
    tv: &Tensor,
    geo_w: &Tensor,
    geo_b: &Tensor,
    cells: &[Vec<(usize, usize)>],
    max_period: f64,
) -> Result<Tensor> {
    check_attention_shapes(feature, corner_offsets, tq, tk, tv, geo_w, cells)?;
    let [n, d, h, w] = feature.shape();
    let da = tq.shape()[0];
    let scale = (da as f64).sqrt();
    let gw = geo_w.data();
    let gb = geo_b.data()[0];

    let mut out = feature.clone();
    for b in 0..n {
        if cells[b].is_empty() {
            continue; // skip connection only
        }
        let ctx = key_context(feature, corner_offsets, &cells[b], tk, tv, b);
        for y in 0..h {
            for x in 0..w {
                let fq: Vec<f64> = (0..d).map(|c| feature.at(b, c, y, x)).collect();
                let q = matvec(tq, &fq);
                let mut logits = Vec::with_capacity(ctx.pos.len());
                for j in 0..ctx.pos.len() {
                    let dot: f64 = q.iter().zip(&ctx.kvecs[j]).map(|(a, b)| a * b).sum();
                    let delta = (ctx.pos[j].0 - x as f64, ctx.pos[j].1 - y as f64);
                    let e = location_embedding(delta, gw.len(), max_period)?;
                    let sg: f64 = gw.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() + gb;
                    logits.push(dot / scale + sg);
                }
                let attn = ops::softmax(&logits)?;
                for j in 0..attn.len() {
                    for c in 0..d {
                        *out.at_mut(b, c, y, x) += attn[j] * ctx.vvecs[j][c];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Attention weights per image, query (row-major), and key — for inspecting
/// normalization; matches the weights used by the enhancement exactly.
pub fn attention_weights(
    feature: &Tensor,
    corner_offsets: &Tensor,
    params: &BvrParams,
    cells: &[Vec<(usize, usize)>],
    cfg: &BvrConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    check_attention_shapes(feature, corner_offsets, &params.tq, &params.tk, &params.tv, &params.geo_w, cells)?;
    let [n, d, h, w] = feature.shape();
    let scale = (params.tq.shape()[0] as f64).sqrt();
    let gw = params.geo_w.data();
    let gb = params.geo_b.data()[0];

    let mut all = Vec::with_capacity(n);
    for b in 0..n {
        let ctx = key_context(feature, corner_offsets, &cells[b], &params.tk, &params.tv, b);
        let mut per_query = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                if ctx.pos.is_empty() {
                    per_query.push(Vec::new());
                    continue;
                }
                let fq: Vec<f64> = (0..d).map(|c| feature.at(b, c, y, x)).collect();
                let q = matvec(&params.tq, &fq);
                let mut logits = Vec::with_capacity(ctx.pos.len());
                for j in 0..ctx.pos.len() {
                    let dot: f64 = q.iter().zip(&ctx.kvecs[j]).map(|(a, b)| a * b).sum();
                    let delta = (ctx.pos[j].0 - x as f64, ctx.pos[j].1 - y as f64);
                    let e = location_embedding(delta, gw.len(), cfg.max_period)?;
                    let sg: f64 = gw.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() + gb;
                    logits.push(dot / scale + sg);
                }
                per_query.push(ops::softmax(&logits)?);
            }
        }
        all.push(per_query);
    }
    Ok(all)
}

/// The recorded composite op: forward is [`enhance_forward`], backward is the
/// hand-derived reverse pass below.
#[derive(Debug)]
struct BvrEnhanceOp {
    feature: Var,
    corner_offsets: Var,
    tq: Var,
    tk: Var,
    tv: Var,
    geo_w: Var,
    geo_b: Var,
    cells: Vec<Vec<(usize, usize)>>,
    max_period: f64,
}

impl CustomOp for BvrEnhanceOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.feature, self.corner_offsets, self.tq, self.tk, self.tv, self.geo_w, self.geo_b]
    }

    fn name(&self) -> &'static str {
        "bvr_enhance"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let [feature, corner_offsets, tq, tk, tv, geo_w, geo_b] =
            [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5], inputs[6]];
        let [n, d, h, w] = feature.shape();
        let da = tq.shape()[0];
        let scale = (da as f64).sqrt();
        let gw = geo_w.data();
        let gb = geo_b.data()[0];

        let mut gfeat = Tensor::zeros(feature.shape());
        let mut goff = Tensor::zeros(corner_offsets.shape());
        let mut gtq = Tensor::zeros(tq.shape());
        let mut gtk = Tensor::zeros(tk.shape());
        let mut gtv = Tensor::zeros(tv.shape());
        let mut ggeo_w = Tensor::zeros(geo_w.shape());
        let mut ggeo_b = Tensor::zeros(geo_b.shape());

        for b in 0..n {
            let cells = &self.cells[b];
            if cells.is_empty() {
                // pure skip connection
                for c in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            *gfeat.at_mut(b, c, y, x) += grad_out.at(b, c, y, x);
                        }
                    }
                }
                continue;
            }
            let ctx = key_context(feature, corner_offsets, cells, tk, tv, b);
            let k = cells.len();
            // accumulated over queries, resolved into tk/tv/feature after
            let mut dkvec = vec![vec![0.0; da]; k];
            let mut dvvec = vec![vec![0.0; d]; k];

            for y in 0..h {
                for x in 0..w {
                    let fq: Vec<f64> = (0..d).map(|c| feature.at(b, c, y, x)).collect();
                    let q = matvec(tq, &fq);
                    let mut logits = Vec::with_capacity(k);
                    let mut deltas = Vec::with_capacity(k);
                    for j in 0..k {
                        let dot: f64 = q.iter().zip(&ctx.kvecs[j]).map(|(a, b)| a * b).sum();
                        let delta = (ctx.pos[j].0 - x as f64, ctx.pos[j].1 - y as f64);
                        let e = location_embedding(delta, gw.len(), self.max_period)?;
                        let sg: f64 = gw.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() + gb;
                        logits.push(dot / scale + sg);
                        deltas.push(delta);
                    }
                    let attn = ops::softmax(&logits)?;

                    let gq_up: Vec<f64> = (0..d).map(|c| grad_out.at(b, c, y, x)).collect();
                    // skip connection
                    for c in 0..d {
                        *gfeat.at_mut(b, c, y, x) += gq_up[c];
                    }
                    // d attn_j = g . V_j, then softmax backward to d logit_j
                    let dattn: Vec<f64> = (0..k)
                        .map(|j| gq_up.iter().zip(&ctx.vvecs[j]).map(|(a, b)| a * b).sum())
                        .collect();
                    let inner: f64 = attn.iter().zip(&dattn).map(|(a, b)| a * b).sum();
                    let dlogit: Vec<f64> = (0..k).map(|j| attn[j] * (dattn[j] - inner)).collect();

                    // appearance path: dq, and per-key dk accumulation
                    let mut dq = vec![0.0; da];
                    for j in 0..k {
                        let dl = dlogit[j];
                        if dl != 0.0 {
                            for a in 0..da {
                                dq[a] += dl * ctx.kvecs[j][a] / scale;
                                dkvec[j][a] += dl * q[a] / scale;
                            }
                        }
                        // value path
                        let aj = attn[j];
                        for c in 0..d {
                            dvvec[j][c] += aj * gq_up[c];
                        }
                        // geometric path: embedding weights, bias, offsets
                        let e = location_embedding(deltas[j], gw.len(), self.max_period)?;
                        for (gi, ei) in e.iter().enumerate() {
                            *ggeo_w.at_mut(0, gi, 0, 0) += dl * ei;
                        }
                        *ggeo_b.at_mut(0, 0, 0, 0) += dl;
                        let (ddx, ddy) = embedding_dot_grad(gw, deltas[j], self.max_period);
                        let (cx, cy) = cells[j];
                        *goff.at_mut(b, 0, cy, cx) += dl * ddx;
                        *goff.at_mut(b, 1, cy, cx) += dl * ddy;
                    }
                    // dq -> tq and the query feature
                    for a in 0..da {
                        if dq[a] != 0.0 {
                            for c in 0..d {
                                *gtq.at_mut(a, c, 0, 0) += dq[a] * fq[c];
                                *gfeat.at_mut(b, c, y, x) += tq.at(a, c, 0, 0) * dq[a];
                            }
                        }
                    }
                }
            }

            // resolve per-key accumulators into tk/tv and the key features
            for j in 0..k {
                let (cx, cy) = cells[j];
                let dfk_k = matvec_t(tk, &dkvec[j]);
                let dfk_v = matvec_t(tv, &dvvec[j]);
                for c in 0..d {
                    *gfeat.at_mut(b, c, cy, cx) += dfk_k[c] + dfk_v[c];
                }
                for a in 0..da {
                    if dkvec[j][a] != 0.0 {
                        for c in 0..d {
                            *gtk.at_mut(a, c, 0, 0) += dkvec[j][a] * ctx.fks[j][c];
                        }
                    }
                }
                for r in 0..d {
                    if dvvec[j][r] != 0.0 {
                        for c in 0..d {
                            *gtv.at_mut(r, c, 0, 0) += dvvec[j][r] * ctx.fks[j][c];
                        }
                    }
                }
            }
        }
        Ok(vec![gfeat, goff, gtq, gtk, gtv, ggeo_w, ggeo_b])
    }
}

/// Record the attention enhancement on the graph.
///
/// `cells` fixes the (already selected) key cells per image; gradients flow
/// to the feature map, the corner offsets, and every projection, but not to
/// the selection itself.
pub fn bvr_enhance_map(
    g: &mut Graph,
    feature: Var,
    corner_offsets: Var,
    vars: &BvrVars,
    cells: Vec<Vec<(usize, usize)>>,
    cfg: &BvrConfig,
) -> Result<Var> {
    cfg.validate()?;
    let value = enhance_forward(
        g.value(feature),
        g.value(corner_offsets),
        g.value(vars.tq),
        g.value(vars.tk),
        g.value(vars.tv),
        g.value(vars.geo_w),
        g.value(vars.geo_b),
        &cells,
        cfg.max_period,
    )?;
    let op = BvrEnhanceOp {
        feature,
        corner_offsets,
        tq: vars.tq,
        tk: vars.tk,
        tv: vars.tv,
        geo_w: vars.geo_w,
        geo_b: vars.geo_b,
        cells,
        max_period: cfg.max_period,
    };
    Ok(g.custom(Box::new(op), value))
}

/// Result of the full head: the enhanced map plus everything the point head
/// produced along the way.
#[derive(Clone, Debug)]
pub struct BvrHeadOut {
    pub enhanced: Var,
    pub point: PointHeadOutput,
    pub keys: Vec<KeySet>,
}

/// Point head, key selection, and attention enhancement in one pass. The
/// output feature map has the same shape as the input.
pub fn bvr_head_forward(g: &mut Graph, feature: Var, vars: &BvrVars, cfg: &BvrConfig) -> Result<BvrHeadOut> {
    cfg.validate()?;
    if g.value(feature).channels() != cfg.channels {
        return Err(Error::shape(
            "feature channels",
            cfg.channels,
            g.value(feature).channels(),
            "bvr_head_forward",
        ));
    }
    let point = point_head_forward(g, feature, vars)?;
    let keys = select_top_k_keys(
        g.value(point.corner_scores),
        g.value(point.corner_offsets),
        g.value(feature),
        cfg.top_k,
    )?;
    let cells: Vec<Vec<(usize, usize)>> = keys.iter().map(|k| k.cells.clone()).collect();
    let enhanced = bvr_enhance_map(g, feature, point.corner_offsets, vars, cells, cfg)?;
    Ok(BvrHeadOut { enhanced, point, keys })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BvrConfig {
        BvrConfig { channels: 3, attn_dim: 2, embed_dim: 4, top_k: 4, max_period: 100.0 }
    }

    fn identity_proj(d: usize) -> Tensor {
        let mut t = Tensor::zeros([d, d, 1, 1]);
        for i in 0..d {
            *t.at_mut(i, i, 0, 0) = 1.0;
        }
        t
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = small_cfg();
        cfg.embed_dim = 6;
        assert!(cfg.validate().is_err());
        cfg.embed_dim = 4;
        cfg.top_k = 0;
        assert!(cfg.validate().is_err());
        cfg.top_k = MAX_KEYS + 1;
        assert!(cfg.validate().is_err());
        cfg.top_k = MAX_KEYS;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn embedding_of_origin_is_alternating_zero_one() {
        let e = location_embedding((0.0, 0.0), 8, 1000.0).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_hits_sine_one_at_each_frequency() {
        let d_g = 16;
        let max_period: f64 = 1000.0;
        let t_count = d_g / 4;
        for t in 0..t_count {
            let lambda = max_period.powf(t as f64 / t_count as f64);
            let e = location_embedding((lambda * std::f64::consts::FRAC_PI_2, 0.0), d_g, max_period).unwrap();
            assert_abs_diff_eq!(e[4 * t], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(e[4 * t + 1], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn embedding_rejects_dims_not_divisible_by_four() {
        assert!(location_embedding((1.0, 2.0), 6, 1000.0).is_err());
        assert!(location_embedding((1.0, 2.0), 0, 1000.0).is_err());
    }

    #[test]
    fn appearance_similarity_identity_unit_basis_is_half() {
        let d = 4;
        let tq = identity_proj(d);
        let tk = identity_proj(d);
        let e0 = vec![1.0, 0.0, 0.0, 0.0];
        let s = appearance_similarity(&tq, &tk, &e0, &e0).unwrap();
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-12); // dot 1 over sqrt(4)
    }

    #[test]
    fn appearance_similarity_zero_query_projection_is_zero() {
        let tq = Tensor::zeros([2, 3, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tk = Tensor::randn([2, 3, 1, 1], 1.0, &mut rng);
        let s = appearance_similarity(&tq, &tk, &[1.0, -2.0, 0.5], &[0.3, 0.1, 4.0]).unwrap();
        assert_abs_diff_eq!(s, 0.0);
    }

    #[test]
    fn appearance_similarity_is_bilinear_under_identity() {
        let d = 3;
        let tq = identity_proj(d);
        let tk = identity_proj(d);
        let fq = [1.0, 2.0, -1.0];
        let fk = [0.5, -0.5, 2.0];
        let base = appearance_similarity(&tq, &tk, &fq, &fk).unwrap();
        let fq2: Vec<f64> = fq.iter().map(|v| 2.0 * v).collect();
        let fk3: Vec<f64> = fk.iter().map(|v| 3.0 * v).collect();
        let scaled = appearance_similarity(&tq, &tk, &fq2, &fk3).unwrap();
        assert_abs_diff_eq!(scaled, 6.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn geometric_similarity_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..120 {
            let gq = (rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0));
            let gk = (rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0));
            let t = (rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0));
            let a = geometric_similarity(&w, 0.25, gq, gk, 1000.0).unwrap();
            let b = geometric_similarity(&w, 0.25, (gq.0 + t.0, gq.1 + t.1), (gk.0 + t.0, gk.1 + t.1), 1000.0).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn geometric_similarity_zero_head_is_zero() {
        let s = geometric_similarity(&[0.0; 8], 0.0, (3.0, 4.0), (-1.0, 7.0), 1000.0).unwrap();
        assert_abs_diff_eq!(s, 0.0);
    }

    #[test]
    fn geometric_similarity_matches_naive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = -0.7;
        for _ in 0..50 {
            let gq = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
            let gk = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
            let got = geometric_similarity(&w, b, gq, gk, 500.0).unwrap();
            let e = location_embedding((gk.0 - gq.0, gk.1 - gq.1), 12, 500.0).unwrap();
            let want: f64 = w.iter().zip(&e).map(|(a, x)| a * x).sum::<f64>() + b;
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    fn toy_maps(rng: &mut ChaCha8Rng, n: usize, d: usize, h: usize, w: usize) -> (Tensor, Tensor, Tensor) {
        let feature = Tensor::randn([n, d, h, w], 1.0, rng);
        let scores = Tensor::randn([n, 1, h, w], 1.0, rng);
        let offsets = Tensor::randn([n, 2, h, w], 0.3, rng);
        (feature, scores, offsets)
    }

    #[test]
    fn top_k_matches_brute_force_sort_on_small_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..30 {
            let h = 1 + (trial % 16);
            let w = 1 + ((trial * 7) % 16);
            let (feature, scores, offsets) = toy_maps(&mut rng, 1, 2, h, w);
            let k = 1 + (trial % 9);
            let keys = select_top_k_keys(&scores, &offsets, &feature, k).unwrap();
            let set = &keys[0];

            // brute force: stable sort of (score, row-major idx)
            let mut all: Vec<(f64, usize)> = (0..h * w)
                .map(|i| (scores.at(0, 0, i / w, i % w), i))
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<(usize, usize)> = all.iter().take(k.min(h * w)).map(|&(_, i)| (i % w, i / w)).collect();
            assert_eq!(set.cells, want, "grid {h}x{w} k {k}");
            assert!(set.scores.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn top_k_ties_prefer_earlier_row_major_cells() {
        let scores = Tensor::filled([1, 1, 2, 3], 1.0);
        let offsets = Tensor::zeros([1, 2, 2, 3]);
        let feature = Tensor::zeros([1, 2, 2, 3]);
        let keys = select_top_k_keys(&scores, &offsets, &feature, 4).unwrap();
        assert_eq!(keys[0].cells, vec![(0, 0), (1, 0), (2, 0), (0, 1)]);
    }

    #[test]
    fn top_k_larger_than_grid_selects_every_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (feature, scores, offsets) = toy_maps(&mut rng, 1, 2, 2, 2);
        let keys = select_top_k_keys(&scores, &offsets, &feature, 50).unwrap();
        assert_eq!(keys[0].len(), 4);
    }

    #[test]
    fn top_k_positions_are_refined_features_gathered_at_cells() {
        let mut scores = Tensor::zeros([1, 1, 2, 2]);
        *scores.at_mut(0, 0, 1, 0) = 5.0; // strict max at (x=0, y=1)
        let mut offsets = Tensor::zeros([1, 2, 2, 2]);
        *offsets.at_mut(0, 0, 1, 0) = 0.25;
        *offsets.at_mut(0, 1, 1, 0) = -0.5;
        let mut feature = Tensor::zeros([1, 2, 2, 2]);
        *feature.at_mut(0, 0, 1, 0) = 7.0;
        *feature.at_mut(0, 1, 1, 0) = -3.0;

        let keys = select_top_k_keys(&scores, &offsets, &feature, 1).unwrap();
        assert_eq!(keys[0].cells, vec![(0, 1)]);
        assert_eq!(keys[0].positions, vec![(0.25, 0.5)]);
        assert_eq!(keys[0].features, vec![vec![7.0, -3.0]]);
    }

    #[test]
    fn top_k_rejects_zero_k() {
        let t = Tensor::zeros([1, 1, 2, 2]);
        let o = Tensor::zeros([1, 2, 2, 2]);
        let f = Tensor::zeros([1, 2, 2, 2]);
        assert!(select_top_k_keys(&t, &o, &f, 0).is_err());
    }

    fn params_for(cfg: &BvrConfig, seed: u64) -> BvrParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BvrParams::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn enhance_with_zero_value_projection_is_bitwise_identity() {
        let cfg = small_cfg();
        let mut params = params_for(&cfg, 17);
        params.tv = Tensor::zeros([cfg.channels, cfg.channels, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let feature = Tensor::randn([2, cfg.channels, 5, 5], 1.0, &mut rng);

        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let fv = g.leaf(feature.clone());
        let out = bvr_head_forward(&mut g, fv, &vars, &cfg).unwrap();
        assert_eq!(g.value(out.enhanced).data(), feature.data());
    }

    #[test]
    fn single_key_gets_attention_weight_one() {
        let cfg = small_cfg();
        let params = params_for(&cfg, 19);
        let keys = KeySet {
            cells: vec![(1, 1)],
            positions: vec![(1.3, 0.9)],
            scores: vec![2.0],
            features: vec![vec![0.4, -1.0, 2.0]],
        };
        let fq = [1.0, 0.5, -0.25];
        let out = bvr_enhance(&fq, (0.0, 0.0), &keys, &params, &cfg).unwrap();
        let v = matvec(&params.tv, &keys.features[0]);
        for c in 0..3 {
            assert_abs_diff_eq!(out[c], fq[c] + v[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn twin_keys_split_attention_evenly() {
        let cfg = small_cfg();
        let params = params_for(&cfg, 23);
        let shared = vec![0.4, -1.0, 2.0];
        let keys = KeySet {
            cells: vec![(1, 1), (2, 2)],
            positions: vec![(3.0, 4.0), (3.0, 4.0)], // identical geometry
            scores: vec![1.0, 1.0],
            features: vec![shared.clone(), shared.clone()],
        };
        let fq = [1.0, 0.5, -0.25];
        let out = bvr_enhance(&fq, (0.0, 0.0), &keys, &params, &cfg).unwrap();
        // same logits -> weights (0.5, 0.5); result equals the single-key sum
        let v = matvec(&params.tv, &shared);
        for c in 0..3 {
            assert_abs_diff_eq!(out[c], fq[c] + v[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_key_set_returns_query_unchanged() {
        let cfg = small_cfg();
        let params = params_for(&cfg, 29);
        let keys = KeySet { cells: vec![], positions: vec![], scores: vec![], features: vec![] };
        let fq = [1.0, 2.0, 3.0];
        let out = bvr_enhance(&fq, (5.0, 5.0), &keys, &params, &cfg).unwrap();
        assert_eq!(out, fq.to_vec());
    }

    /// The map-level composite must agree with looping the per-query form
    /// over every cell — the straight-line oracle of the whole enhancement.
    #[test]
    fn map_level_enhancement_matches_per_query_loop() {
        let cfg = BvrConfig { channels: 3, attn_dim: 2, embed_dim: 8, top_k: 5, max_period: 50.0 };
        let params = params_for(&cfg, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let feature = Tensor::randn([2, 3, 4, 4], 1.0, &mut rng);

        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let fv = g.leaf(feature.clone());
        let out = bvr_head_forward(&mut g, fv, &vars, &cfg).unwrap();
        let enhanced = g.value(out.enhanced);

        for b in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let fq: Vec<f64> = (0..3).map(|c| feature.at(b, c, y, x)).collect();
                    let want = bvr_enhance(&fq, (x as f64, y as f64), &out.keys[b], &params, &cfg).unwrap();
                    for c in 0..3 {
                        assert_abs_diff_eq!(enhanced.at(b, c, y, x), want[c], epsilon = 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one_everywhere() {
        let cfg = small_cfg();
        let params = params_for(&cfg, 37);
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let feature = Tensor::randn([2, 3, 6, 6], 2.0, &mut rng);
        let offsets = Tensor::randn([2, 2, 6, 6], 0.5, &mut rng);
        let cells = vec![vec![(0, 0), (5, 5), (2, 3)], vec![(1, 4), (4, 1)]];
        let weights = attention_weights(&feature, &offsets, &params, &cells, &cfg).unwrap();
        for per_image in &weights {
            assert_eq!(per_image.len(), 36);
            for per_query in per_image {
                let s: f64 = per_query.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "sum {s}");
                assert!(per_query.iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn head_output_shape_and_determinism() {
        let cfg = small_cfg();
        let params = params_for(&cfg, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let feature = Tensor::randn([1, 3, 5, 7], 1.0, &mut rng);

        let run = || {
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let fv = g.leaf(feature.clone());
            let out = bvr_head_forward(&mut g, fv, &vars, &cfg).unwrap();
            g.value(out.enhanced).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.shape(), [1, 3, 5, 7]);
        assert_eq!(a, b);
    }

    #[test]
    fn point_head_zero_score_weights_give_uniform_scores() {
        let cfg = small_cfg();
        let mut params = params_for(&cfg, 43);
        params.score_w = Tensor::zeros([2, cfg.channels, 1, 1]);
        params.score_b = Tensor::zeros([1, 2, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let feature = Tensor::randn([1, 3, 4, 4], 1.0, &mut rng);

        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let fv = g.leaf(feature);
        let out = point_head_forward(&mut g, fv, &vars).unwrap();
        assert!(g.value(out.center_scores).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.corner_scores).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out.center_offsets).shape(), [1, 2, 4, 4]);
        assert_eq!(g.value(out.corner_offsets).shape(), [1, 2, 4, 4]);
    }

    #[test]
    fn point_head_scores_pass_grad_check_wrt_shared_convs() {
        let cfg = small_cfg();
        let params = params_for(&cfg, 47);
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let feature = Tensor::randn([1, 3, 4, 4], 1.0, &mut rng);

        let inputs = vec![params.trunk_w1.clone(), params.trunk_w2.clone()];
        let report = grad_check(
            move |g, vars| {
                let full = params.bind(g);
                let v = BvrVars { trunk_w1: vars[0], trunk_w2: vars[1], ..full };
                let fv = g.leaf(feature.clone());
                let out = point_head_forward(g, fv, &v)?;
                // combine both score maps so a single root covers them
                g.add(out.center_scores, out.corner_scores)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {:?}", report.worst);
    }

    /// Full head on a 1 x d x 6 x 6 instance with k = 4, checked against
    /// central differences for every input and parameter.
    #[test]
    fn full_head_passes_grad_check() {
        let cfg = BvrConfig { channels: 3, attn_dim: 2, embed_dim: 4, top_k: 4, max_period: 100.0 };
        let params = params_for(&cfg, 53);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let feature = Tensor::randn([1, 3, 6, 6], 1.0, &mut rng);

        let inputs = vec![
            feature,
            params.trunk_w1.clone(),
            params.trunk_b1.clone(),
            params.trunk_w2.clone(),
            params.trunk_b2.clone(),
            params.score_w.clone(),
            params.score_b.clone(),
            params.offset_w.clone(),
            params.offset_b.clone(),
            params.tq.clone(),
            params.tk.clone(),
            params.tv.clone(),
            params.geo_w.clone(),
            params.geo_b.clone(),
        ];
        let report = grad_check(
            move |g, vars| {
                let v = BvrVars {
                    trunk_w1: vars[1],
                    trunk_b1: vars[2],
                    trunk_w2: vars[3],
                    trunk_b2: vars[4],
                    score_w: vars[5],
                    score_b: vars[6],
                    offset_w: vars[7],
                    offset_b: vars[8],
                    tq: vars[9],
                    tk: vars[10],
                    tv: vars[11],
                    geo_w: vars[12],
                    geo_b: vars[13],
                };
                let out = bvr_head_forward(g, vars[0], &v, &cfg)?;
                Ok(out.enhanced)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {:?}", report.worst);
    }

    proptest! {
        /// Every sin/cos pair of the embedding lies on the unit circle.
        #[test]
        fn embedding_pairs_lie_on_unit_circle(
            px in -2000.0f64..2000.0,
            py in -2000.0f64..2000.0,
        ) {
            let e = location_embedding((px, py), 16, 1000.0).unwrap();
            for t in 0..4 {
                let sx = e[4 * t];
                let cx = e[4 * t + 1];
                let sy = e[4 * t + 2];
                let cy = e[4 * t + 3];
                prop_assert!((sx * sx + cx * cx - 1.0).abs() < 1e-12);
                prop_assert!((sy * sy + cy * cy - 1.0).abs() < 1e-12);
            }
        }
    }
}
