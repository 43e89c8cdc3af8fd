//! Token layout, frame attention, reconstruction-guided causal global
//! attention, and the KV-cache read/write path.
//!
//! The attention mask is never materialised. A query token of a source view
//! may attend to source-view keys only; a target-view query attends to every
//! source key plus the keys of its own view (in multi-target mode targets are
//! isolated from each other, otherwise the single target sees itself).
//! Disallowed logits behave exactly like an additive `-inf` mask: they are
//! excluded from the softmax support.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::real::{gemm, Real, Strides};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ViewRole {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MaskMode {
    /// At most one target view (training and joint-forward default).
    SingleTarget,
    /// Any number of targets, each isolated from the others.
    MultiTarget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ViewSpan {
    pub role: ViewRole,
    pub start: usize,
    pub len: usize,
    /// Uses the dedicated first-view camera and register embeddings.
    pub special: bool,
}

impl ViewSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenLayout {
    views: Vec<ViewSpan>,
    total: usize,
    mode: MaskMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Each view attends to its own tokens only.
    Frame,
    /// Cross-view attention under the causal source/target mask.
    Global,
}

/// Query rows that share one admissible key set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Vec<Range<usize>>,
    pub keys: Vec<Range<usize>>,
}

impl AttnGroup {
    pub fn query_count(&self) -> usize {
        self.queries.iter().map(|r| r.len()).sum()
    }

    pub fn key_count(&self) -> usize {
        self.keys.iter().map(|r| r.len()).sum()
    }
}

impl TokenLayout {
    /// Views laid out contiguously in the given order. The first source view
    /// is flagged special.
    pub fn new(views: &[(ViewRole, usize)], mode: MaskMode) -> Result<Self> {
        let targets = views.iter().filter(|(r, _)| *r == ViewRole::Target).count();
        if mode == MaskMode::SingleTarget && targets > 1 {
            return Err(Error::invalid(format!("{targets} target views in single-target mode")));
        }
        let mut spans = Vec::with_capacity(views.len());
        let mut start = 0;
        let mut seen_source = false;
        for &(role, len) in views {
            let special = role == ViewRole::Source && !seen_source;
            seen_source |= role == ViewRole::Source;
            spans.push(ViewSpan { role, start, len, special });
            start += len;
        }
        Ok(TokenLayout { views: spans, total: start, mode })
    }

    /// `n_sources` source views followed by `n_targets` target views, each of
    /// `tokens_per_view` tokens.
    pub fn sources_then_targets(n_sources: usize, n_targets: usize, tokens_per_view: usize, mode: MaskMode) -> Result<Self> {
        let mut v = vec![(ViewRole::Source, tokens_per_view); n_sources];
        v.extend(core::iter::repeat_n((ViewRole::Target, tokens_per_view), n_targets));
        Self::new(&v, mode)
    }

    pub fn views(&self) -> &[ViewSpan] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn sources(&self) -> impl Iterator<Item = &ViewSpan> {
        self.views.iter().filter(|v| v.role == ViewRole::Source)
    }

    pub fn targets(&self) -> impl Iterator<Item = &ViewSpan> {
        self.views.iter().filter(|v| v.role == ViewRole::Target)
    }

    pub fn source_token_count(&self) -> usize {
        self.sources().map(|v| v.len).sum()
    }

    pub fn view_of(&self, token: usize) -> Option<usize> {
        self.views.iter().position(|v| v.range().contains(&token))
    }

    /// The implicit mask entry for query `i` and key `j`.
    pub fn allowed(&self, kind: AttentionKind, i: usize, j: usize) -> bool {
        let (Some(vi), Some(vj)) = (self.view_of(i), self.view_of(j)) else {
            return false;
        };
        match kind {
            AttentionKind::Frame => vi == vj,
            AttentionKind::Global => {
                let (ri, rj) = (self.views[vi].role, self.views[vj].role);
                if ri == ViewRole::Source && rj == ViewRole::Target {
                    return false;
                }
                !(self.mode == MaskMode::MultiTarget && ri == ViewRole::Target && rj == ViewRole::Target && vi != vj)
            }
        }
    }

    /// Partition of the query rows into groups with identical admissible keys.
    pub fn groups(&self, kind: AttentionKind) -> Result<Vec<AttnGroup>> {
        let mut groups = Vec::new();
        match kind {
            AttentionKind::Frame => {
                for v in self.views.iter().filter(|v| v.len > 0) {
                    groups.push(AttnGroup { queries: vec![v.range()], keys: vec![v.range()] });
                }
            }
            AttentionKind::Global => {
                let source_ranges: Vec<Range<usize>> = self.sources().filter(|v| v.len > 0).map(|v| v.range()).collect();
                if !source_ranges.is_empty() {
                    groups.push(AttnGroup { queries: source_ranges.clone(), keys: source_ranges.clone() });
                }
                let target_ranges: Vec<Range<usize>> = self.targets().filter(|v| v.len > 0).map(|v| v.range()).collect();
                for t in &target_ranges {
                    let mut keys = source_ranges.clone();
                    match self.mode {
                        MaskMode::MultiTarget => keys.push(t.clone()),
                        MaskMode::SingleTarget => keys.extend(target_ranges.iter().cloned()),
                    }
                    groups.push(AttnGroup { queries: vec![t.clone()], keys });
                }
            }
        }
        for g in &groups {
            if g.key_count() == 0 {
                return Err(Error::EmptyAttentionRow { row: g.queries.first().map_or(0, |r| r.start) });
            }
        }
        Ok(groups)
    }
}

fn gather_rows<T: Real>(src: &[T], row_stride: usize, col_offset: usize, width: usize, ranges: &[Range<usize>], out: &mut Vec<T>) {
    out.clear();
    for r in ranges {
        for row in r.clone() {
            let base = row * row_stride + col_offset;
            out.extend_from_slice(&src[base..base + width]);
        }
    }
}

fn scatter_rows_add<T: Real>(dst: &mut [T], row_stride: usize, col_offset: usize, width: usize, ranges: &[Range<usize>], src: &[T]) {
    let mut i = 0;
    for r in ranges {
        for row in r.clone() {
            let base = row * row_stride + col_offset;
            for (d, s) in dst[base..base + width].iter_mut().zip(&src[i * width..(i + 1) * width]) {
                *d += *s;
            }
            i += 1;
        }
    }
}

/// Multi-head scaled dot-product attention of `r` queries over `m` keys.
/// `q`, `k`, `v` and `out` are row-major with `dim` columns, heads laid out
/// as consecutive `dim / heads` column blocks. When `probs` is given, it
/// receives the `heads x r x m` attention weights. Returns the flop count.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    r: usize,
    m: usize,
    dim: usize,
    heads: usize,
    out: &mut [T],
    mut probs: Option<&mut Vec<T>>,
) -> u64 {
    let dh = dim / heads;
    let scale = T::c(1.0 / num_traits::Float::sqrt(dh as f64));
    if let Some(p) = probs.as_deref_mut() {
        p.clear();
        p.resize(heads * r * m, T::zero());
    }
    if r == 0 {
        return 0;
    }
    let mut scores = vec![T::zero(); r * m];
    for h in 0..heads {
        let off = h * dh;
        gemm(r, dh, m, scale, &q[off..], Strides::row_major(dim), &k[off..], Strides::transposed(dim), T::zero(), &mut scores, Strides::row_major(m));
        for row in scores.chunks_mut(m) {
            softmax_in_place(row);
        }
        gemm(r, m, dh, T::one(), &scores, Strides::row_major(m), &v[off..], Strides::row_major(dim), T::zero(), &mut out[off..], Strides::row_major(dim));
        if let Some(p) = probs.as_deref_mut() {
            p[h * r * m..(h + 1) * r * m].copy_from_slice(&scores);
        }
    }
    4 * (r * m * dim) as u64
}

/// Numerically stable softmax over one row of admissible logits.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    for x in row.iter_mut() {
        *x = (*x - max).fast_exp();
    }
    // Eight partial sums keep the reduction vectorizable.
    let mut acc = [T::zero(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    for &x in chunks.remainder() {
        acc[0] += x;
    }
    let inv = T::one() / acc.iter().copied().sum::<T>();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Gradients of [`attend`] given its saved weights. Accumulates into `dq`,
/// `dk` and `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    r: usize,
    m: usize,
    dim: usize,
    heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    if r == 0 {
        return;
    }
    let dh = dim / heads;
    let scale = T::c(1.0 / num_traits::Float::sqrt(dh as f64));
    let mut dp = vec![T::zero(); r * m];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * r * m..(h + 1) * r * m];
        // dV += P^T dO
        gemm(m, r, dh, T::one(), p, Strides::transposed(m), &dout[off..], Strides::row_major(dim), T::one(), &mut dv[off..], Strides::row_major(dim));
        // dP = dO V^T
        gemm(r, dh, m, T::one(), &dout[off..], Strides::row_major(dim), &v[off..], Strides::transposed(dim), T::zero(), &mut dp, Strides::row_major(m));
        for (dp_row, p_row) in dp.chunks_mut(m).zip(p.chunks(m)) {
            let dot: T = dp_row.iter().zip(p_row).map(|(a, b)| *a * *b).sum();
            for (d, pp) in dp_row.iter_mut().zip(p_row) {
                *d = *pp * (*d - dot) * scale;
            }
        }
        gemm(r, m, dh, T::one(), &dp, Strides::row_major(m), &k[off..], Strides::row_major(dim), T::one(), &mut dq[off..], Strides::row_major(dim));
        gemm(m, r, dh, T::one(), &dp, Strides::transposed(m), &q[off..], Strides::row_major(dim), T::one(), &mut dk[off..], Strides::row_major(dim));
    }
}

/// Saved state of a grouped attention forward pass.
#[derive(Debug, Clone, Default)]
pub struct GroupedAttentionCache<T> {
    pub groups: Vec<AttnGroup>,
    pub probs: Vec<Vec<T>>,
}

/// Attention over a fused `n x 3*dim` QKV buffer (`[q | k | v]` per row).
/// Writes `n x dim` head-concatenated outputs. Returns the flop count.
pub fn grouped_attention<T: Real>(
    qkv: &[T],
    dim: usize,
    heads: usize,
    groups: &[AttnGroup],
    out: &mut [T],
    mut cache: Option<&mut GroupedAttentionCache<T>>,
) -> u64 {
    let stride = 3 * dim;
    let (mut qb, mut kb, mut vb) = (Vec::new(), Vec::new(), Vec::new());
    let mut flops = 0;
    if let Some(c) = cache.as_deref_mut() {
        c.groups = groups.to_vec();
        c.probs.clear();
    }
    for g in groups {
        let (r, m) = (g.query_count(), g.key_count());
        gather_rows(qkv, stride, 0, dim, &g.queries, &mut qb);
        gather_rows(qkv, stride, dim, dim, &g.keys, &mut kb);
        gather_rows(qkv, stride, 2 * dim, dim, &g.keys, &mut vb);
        let mut ob = vec![T::zero(); r * dim];
        let mut probs = Vec::new();
        flops += attend(&qb, &kb, &vb, r, m, dim, heads, &mut ob, cache.is_some().then_some(&mut probs));
        let mut i = 0;
        for range in &g.queries {
            for row in range.clone() {
                out[row * dim..(row + 1) * dim].copy_from_slice(&ob[i * dim..(i + 1) * dim]);
                i += 1;
            }
        }
        if let Some(c) = cache.as_deref_mut() {
            c.probs.push(probs);
        }
    }
    flops
}

/// Backward of [`grouped_attention`]; accumulates into `dqkv` (`n x 3*dim`).
pub fn grouped_attention_backward<T: Real>(
    qkv: &[T],
    dim: usize,
    heads: usize,
    cache: &GroupedAttentionCache<T>,
    dout: &[T],
    dqkv: &mut [T],
) {
    let stride = 3 * dim;
    let (mut qb, mut kb, mut vb, mut db) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (g, probs) in cache.groups.iter().zip(&cache.probs) {
        let (r, m) = (g.query_count(), g.key_count());
        gather_rows(qkv, stride, 0, dim, &g.queries, &mut qb);
        gather_rows(qkv, stride, dim, dim, &g.keys, &mut kb);
        gather_rows(qkv, stride, 2 * dim, dim, &g.keys, &mut vb);
        gather_rows(dout, dim, 0, dim, &g.queries, &mut db);
        let mut dq = vec![T::zero(); r * dim];
        let mut dk = vec![T::zero(); m * dim];
        let mut dv = vec![T::zero(); m * dim];
        attend_backward(&qb, &kb, &vb, probs, &db, r, m, dim, heads, &mut dq, &mut dk, &mut dv);
        scatter_rows_add(dqkv, stride, 0, dim, &g.queries, &dq);
        scatter_rows_add(dqkv, stride, dim, dim, &g.keys, &dk);
        scatter_rows_add(dqkv, stride, 2 * dim, dim, &g.keys, &dv);
    }
}

/// Scaled dot-product attention on separate `n x dim` Q, K, V tensors under
/// the layout's mask, without projections.
pub fn scaled_attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    layout: &TokenLayout,
    kind: AttentionKind,
    dim: usize,
    heads: usize,
) -> Result<Vec<T>> {
    let n = layout.len();
    check_attention_shapes(n, dim, heads, &[q.len(), k.len(), v.len()])?;
    let mut qkv = vec![T::zero(); n * 3 * dim];
    for i in 0..n {
        qkv[i * 3 * dim..i * 3 * dim + dim].copy_from_slice(&q[i * dim..(i + 1) * dim]);
        qkv[i * 3 * dim + dim..i * 3 * dim + 2 * dim].copy_from_slice(&k[i * dim..(i + 1) * dim]);
        qkv[i * 3 * dim + 2 * dim..(i + 1) * 3 * dim].copy_from_slice(&v[i * dim..(i + 1) * dim]);
    }
    let groups = layout.groups(kind)?;
    let mut out = vec![T::zero(); n * dim];
    grouped_attention(&qkv, dim, heads, &groups, &mut out, None);
    Ok(out)
}

fn check_attention_shapes(n: usize, dim: usize, heads: usize, lens: &[usize]) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::shape(format!("dim {dim} not divisible by {heads} heads")));
    }
    if lens.iter().any(|&l| l != n * dim) {
        return Err(Error::shape(format!("expected {n}x{dim} tensors, got lengths {lens:?}")));
    }
    Ok(())
}

/// Borrowed weights of one multi-head attention layer. `w_qkv` is
/// `dim x 3*dim`, `w_out` is `dim x dim` (row-major, input-major).
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a, T> {
    pub w_qkv: &'a [T],
    pub b_qkv: &'a [T],
    pub w_out: &'a [T],
    pub b_out: &'a [T],
}

impl<T: Real> AttentionWeights<'_, T> {
    /// Fused QKV projection of `n x dim` tokens.
    pub fn project_qkv(&self, x: &[T], n: usize, dim: usize) -> Vec<T> {
        let mut qkv = vec![T::zero(); n * 3 * dim];
        crate::real::mm_nn(n, dim, 3 * dim, x, self.w_qkv, T::zero(), &mut qkv);
        for row in qkv.chunks_mut(3 * dim) {
            for (a, b) in row.iter_mut().zip(self.b_qkv) {
                *a += *b;
            }
        }
        qkv
    }

    pub fn project_out(&self, heads_out: &[T], n: usize, dim: usize) -> Vec<T> {
        let mut y = vec![T::zero(); n * dim];
        crate::real::mm_nn(n, dim, dim, heads_out, self.w_out, T::zero(), &mut y);
        for row in y.chunks_mut(dim) {
            for (a, b) in row.iter_mut().zip(self.b_out) {
                *a += *b;
            }
        }
        y
    }
}

/// QKV projection, masked multi-head attention and output projection.
pub fn multi_head_attention<T: Real>(
    x: &[T],
    layout: &TokenLayout,
    kind: AttentionKind,
    weights: AttentionWeights<'_, T>,
    dim: usize,
    heads: usize,
) -> Result<Vec<T>> {
    let n = layout.len();
    check_attention_shapes(n, dim, heads, &[x.len()])?;
    if weights.w_qkv.len() != dim * 3 * dim || weights.b_qkv.len() != 3 * dim || weights.w_out.len() != dim * dim || weights.b_out.len() != dim {
        return Err(Error::shape("attention weight shapes"));
    }
    let qkv = weights.project_qkv(x, n, dim);
    let groups = layout.groups(kind)?;
    let mut heads_out = vec![T::zero(); n * dim];
    grouped_attention(&qkv, dim, heads, &groups, &mut heads_out, None);
    Ok(weights.project_out(&heads_out, n, dim))
}

/// Global attention under the causal source/target mask.
pub fn masked_global_attention<T: Real>(
    x: &[T],
    layout: &TokenLayout,
    weights: AttentionWeights<'_, T>,
    dim: usize,
    heads: usize,
) -> Result<Vec<T>> {
    multi_head_attention(x, layout, AttentionKind::Global, weights, dim, heads)
}

/// Per-view self-attention; no information crosses view boundaries.
pub fn frame_attention<T: Real>(
    x: &[T],
    layout: &TokenLayout,
    weights: AttentionWeights<'_, T>,
    dim: usize,
    heads: usize,
) -> Result<Vec<T>> {
    multi_head_attention(x, layout, AttentionKind::Frame, weights, dim, heads)
}

/// Cached source keys and values of one global attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedBlock<T> {
    /// `n_source_tokens x dim`.
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

/// Source-view keys and values of every global attention block: the
/// implicit scene representation that target queries read from.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCache<T = f32> {
    blocks: Vec<CachedBlock<T>>,
    layout: TokenLayout,
    source_poses: Vec<CameraPose>,
    fingerprint: u64,
    dim: usize,
    sealed: bool,
}

impl<T: Real> SceneCache<T> {
    /// Empty, unsealed cache for the given source layout.
    pub fn new(layout: TokenLayout, dim: usize, fingerprint: u64) -> Self {
        SceneCache { blocks: Vec::new(), layout, source_poses: Vec::new(), fingerprint, dim, sealed: false }
    }

    pub fn push_block(&mut self, keys: Vec<T>, values: Vec<T>) -> Result<()> {
        if self.sealed {
            return Err(Error::invalid("cache is sealed"));
        }
        let expect = self.layout.source_token_count() * self.dim;
        if keys.len() != expect || values.len() != expect {
            return Err(Error::shape(format!("cached block has {} / {} entries, expected {expect}", keys.len(), values.len())));
        }
        self.blocks.push(CachedBlock { keys, values });
        Ok(())
    }

    pub fn set_source_poses(&mut self, poses: Vec<CameraPose>) -> Result<()> {
        if self.sealed {
            return Err(Error::invalid("cache is sealed"));
        }
        self.source_poses = poses;
        Ok(())
    }

    pub fn seal(mut self) -> Self {
        self.sealed = true;
        self
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn blocks(&self) -> &[CachedBlock<T>] {
        &self.blocks
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn source_poses(&self) -> &[CameraPose] {
        &self.source_poses
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_count(&self) -> usize {
        self.layout.source_token_count()
    }

    /// Hash of every cached key/value entry.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(self.fingerprint);
        for b in &self.blocks {
            for x in b.keys.iter().chain(&b.values) {
                h.mix(x.f64().to_bits());
            }
        }
        h.finish()
    }

    pub fn check(&self, model_fingerprint: u64) -> Result<()> {
        if !self.sealed {
            return Err(Error::UnsealedCache);
        }
        if self.fingerprint != model_fingerprint {
            return Err(Error::StaleCache { cache: self.fingerprint, model: model_fingerprint });
        }
        Ok(())
    }

    /// Rebuilds a sealed cache from stored parts (deserialisation).
    pub fn from_parts(layout: TokenLayout, dim: usize, fingerprint: u64, blocks: Vec<CachedBlock<T>>, source_poses: Vec<CameraPose>) -> Result<Self> {
        let mut c = SceneCache::new(layout, dim, fingerprint);
        for b in blocks {
            c.push_block(b.keys, b.values)?;
        }
        c.source_poses = source_poses;
        Ok(c.seal())
    }
}

/// Seals per-block source keys/values recorded by a source-only forward.
pub fn build_kv_cache<T: Real>(
    source_kv_per_block: Vec<(Vec<T>, Vec<T>)>,
    layout: TokenLayout,
    dim: usize,
    fingerprint: u64,
    source_poses: Vec<CameraPose>,
) -> Result<SceneCache<T>> {
    if layout.targets().next().is_some() {
        return Err(Error::invalid("a scene cache holds source views only"));
    }
    let mut cache = SceneCache::new(layout, dim, fingerprint);
    for (k, v) in source_kv_per_block {
        cache.push_block(k, v)?;
    }
    cache.set_source_poses(source_poses)?;
    Ok(cache.seal())
}

/// Target-token attention reading source keys/values from the cache:
/// `softmax(Q_t [K_s'; K_t]^T / sqrt(d)) [V_s'; V_t]`. `target_qkv` is the
/// fused `r x 3*dim` projection of the target tokens. Returns the head
/// outputs (`r x dim`) and, optionally, the attention weights.
pub fn query_with_cache<T: Real>(
    target_qkv: &[T],
    cache: &SceneCache<T>,
    block_index: usize,
    heads: usize,
    model_fingerprint: u64,
    probs: Option<&mut Vec<T>>,
) -> Result<(Vec<T>, u64)> {
    cache.check(model_fingerprint)?;
    let dim = cache.dim;
    if target_qkv.len() % (3 * dim) != 0 {
        return Err(Error::shape("target qkv width"));
    }
    let r = target_qkv.len() / (3 * dim);
    let block = cache
        .blocks
        .get(block_index)
        .ok_or_else(|| Error::invalid(format!("cache has no block {block_index}")))?;
    if r == 0 {
        return Ok((Vec::new(), 0));
    }
    let s = cache.token_count();
    let m = s + r;
    let mut q = Vec::with_capacity(r * dim);
    let mut k = Vec::with_capacity(m * dim);
    let mut v = Vec::with_capacity(m * dim);
    k.extend_from_slice(&block.keys);
    v.extend_from_slice(&block.values);
    for row in target_qkv.chunks(3 * dim) {
        q.extend_from_slice(&row[..dim]);
        k.extend_from_slice(&row[dim..2 * dim]);
        v.extend_from_slice(&row[2 * dim..]);
    }
    let mut out = vec![T::zero(); r * dim];
    let flops = attend(&q, &k, &v, r, m, dim, heads, &mut out, probs);
    Ok((out, flops))
}

/// FNV-1a, used for weight fingerprints and cache content hashes.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv64 {
    pub const fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_u64(&mut self, x: u64) {
        self.write(&x.to_le_bytes());
    }

    /// Word-at-a-time FNV step for bulk data. Each step is a bijection of
    /// the state, so changing any single word changes the digest.
    pub fn mix(&mut self, x: u64) {
        self.0 ^= x;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> TokenLayout {
        TokenLayout::new(&[(ViewRole::Source, 3), (ViewRole::Source, 2), (ViewRole::Target, 3)], MaskMode::SingleTarget).unwrap()
    }

    #[test]
    fn mask_rule() {
        let l = layout();
        assert!(l.views()[0].special && !l.views()[1].special);
        assert!(l.allowed(AttentionKind::Global, 0, 4));
        assert!(!l.allowed(AttentionKind::Global, 0, 5));
        assert!(l.allowed(AttentionKind::Global, 6, 0));
        assert!(l.allowed(AttentionKind::Global, 6, 7));
        assert!(!l.allowed(AttentionKind::Frame, 0, 3));
        for i in 0..l.len() {
            assert!((0..l.len()).any(|j| l.allowed(AttentionKind::Global, i, j)));
        }
    }

    #[test]
    fn multi_target_isolation_rule() {
        let l = TokenLayout::sources_then_targets(2, 2, 2, MaskMode::MultiTarget).unwrap();
        assert!(!l.allowed(AttentionKind::Global, 4, 6));
        assert!(l.allowed(AttentionKind::Global, 4, 5));
        assert!(TokenLayout::sources_then_targets(2, 2, 2, MaskMode::SingleTarget).is_err());
    }

    #[test]
    fn single_key_returns_value() {
        let l = TokenLayout::new(&[(ViewRole::Source, 1)], MaskMode::SingleTarget).unwrap();
        let q = [0.3, -1.0];
        let k = [2.0, 0.5];
        let v = [0.7, -0.2];
        let out = scaled_attention(&q, &k, &v, &l, AttentionKind::Global, 2, 1).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn probabilities_are_row_stochastic() {
        let n = 8;
        let dim = 4;
        let x: Vec<f64> = (0..n * dim * 3).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let groups = layout().groups(AttentionKind::Global).unwrap();
        let mut out = vec![0.0; n * dim];
        let mut cache = GroupedAttentionCache::default();
        grouped_attention(&x, dim, 2, &groups, &mut out, Some(&mut cache));
        for (g, p) in cache.groups.iter().zip(&cache.probs) {
            let m = g.key_count();
            for row in p.chunks(m) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unsealed_and_stale_caches_are_rejected() {
        let l = TokenLayout::sources_then_targets(1, 0, 2, MaskMode::SingleTarget).unwrap();
        let mut c = SceneCache::<f64>::new(l.clone(), 2, 7);
        c.push_block(vec![0.0; 4], vec![0.0; 4]).unwrap();
        let qkv = vec![0.1; 6];
        assert_eq!(query_with_cache(&qkv, &c, 0, 1, 7, None).unwrap_err(), Error::UnsealedCache);
        let c = c.seal();
        assert!(matches!(query_with_cache(&qkv, &c, 0, 1, 8, None), Err(Error::StaleCache { .. })));
        let (out, _) = query_with_cache(&[], &c, 0, 1, 7, None).unwrap();
        assert!(out.is_empty());
        assert!(build_kv_cache::<f64>(vec![], TokenLayout::sources_then_targets(1, 1, 2, MaskMode::SingleTarget).unwrap(), 2, 0, vec![]).is_err());
    }
}
