//! Attention-level numerics for cross-panel consistency.
//!
//! Everything here operates on plain token tensors: scaled dot-product
//! attention, the cross-panel blocks of the attention matrix, reciprocal
//! (min of both directions) scores, their running average across blocks
//! and steps, high-confidence correspondence extraction, and the value
//! mixing that blends a bottom-panel token toward its top-panel partner.
//! Queries and keys are never modified, so layout is preserved.

pub mod diagnostics;
pub mod morphology;
pub mod otsu;

use std::ops::Range;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub use morphology::morphological_filter;
pub use otsu::otsu_threshold;

/// Histogram resolution used when thresholding correspondence scores.
pub const OTSU_BINS: usize = 256;

/// Per-block attention tensors partitioned into text tokens and the two
/// image sub-panels (top: reference, bottom: scene).
#[derive(Debug, Clone)]
pub struct AttentionView {
    heads: usize,
    d_head: usize,
    image_token_range: Range<usize>,
    panel_tokens: usize,
    q: Array3<f32>,
    k: Array3<f32>,
    v: Array3<f32>,
}

impl AttentionView {
    /// Builds a view over `(heads, tokens, d_head)` tensors. The image
    /// token range must span exactly `2 * panel_tokens` positions: the
    /// top sub-panel first, then the bottom.
    pub fn new(
        q: Array3<f32>,
        k: Array3<f32>,
        v: Array3<f32>,
        image_token_range: Range<usize>,
        panel_tokens: usize,
    ) -> Result<Self> {
        if q.dim() != k.dim() || q.dim() != v.dim() {
            return Err(Error::ShapeMismatch(format!(
                "Q {:?}, K {:?}, V {:?} must share one shape",
                q.dim(),
                k.dim(),
                v.dim()
            )));
        }
        let (heads, tokens, d_head) = q.dim();
        if heads == 0 || d_head == 0 {
            return Err(Error::Contract("heads and d_head must be positive".into()));
        }
        if image_token_range.len() != 2 * panel_tokens {
            return Err(Error::Contract(format!(
                "image token range {image_token_range:?} must cover 2 * {panel_tokens} tokens"
            )));
        }
        if image_token_range.end > tokens {
            return Err(Error::Contract(format!(
                "image token range {image_token_range:?} exceeds sequence length {tokens}"
            )));
        }
        Ok(Self { heads, d_head, image_token_range, panel_tokens, q, k, v })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn tokens(&self) -> usize {
        self.q.dim().1
    }

    pub fn image_token_range(&self) -> Range<usize> {
        self.image_token_range.clone()
    }

    /// Tokens per sub-panel (`P`).
    pub fn panel_tokens(&self) -> usize {
        self.panel_tokens
    }

    pub fn queries(&self) -> &Array3<f32> {
        &self.q
    }

    pub fn keys(&self) -> &Array3<f32> {
        &self.k
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.v
    }

    /// Replaces the value tensor; queries and keys stay fixed.
    pub fn set_values(&mut self, v: Array3<f32>) -> Result<()> {
        if v.dim() != self.q.dim() {
            return Err(Error::ShapeMismatch(format!(
                "replacement values {:?} must match {:?}",
                v.dim(),
                self.q.dim()
            )));
        }
        self.v = v;
        Ok(())
    }

    /// Absolute sequence index of top-panel token `u`.
    pub fn top_index(&self, u: usize) -> usize {
        self.image_token_range.start + u
    }

    /// Absolute sequence index of bottom-panel token `v`.
    pub fn bottom_index(&self, v: usize) -> usize {
        self.image_token_range.start + self.panel_tokens + v
    }
}

/// Running average of reciprocal scores across transformer blocks and
/// denoising steps, indexed `[top token u, bottom token v]`.
#[derive(Debug, Clone)]
pub struct ReciprocalState {
    m_bar: Array2<f32>,
    momentum: f32,
    updates: u64,
}

impl ReciprocalState {
    pub fn new(panel_tokens: usize, momentum: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Contract(format!(
                "momentum must be in [0, 1], got {momentum}"
            )));
        }
        Ok(Self {
            m_bar: Array2::zeros((panel_tokens, panel_tokens)),
            momentum,
            updates: 0,
        })
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    /// Number of observations folded in; zero means uninitialized.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn panel_tokens(&self) -> usize {
        self.m_bar.nrows()
    }

    pub fn m_bar(&self) -> &Array2<f32> {
        &self.m_bar
    }

    /// Folds one reciprocal score matrix into the running average. The
    /// first observation initializes the average; afterwards
    /// `m_bar <- momentum * m_bar + (1 - momentum) * m`.
    pub fn update_ema(&mut self, m: &Array2<f32>) -> Result<()> {
        if m.dim() != self.m_bar.dim() {
            return Err(Error::ShapeMismatch(format!(
                "observation {:?} must match state {:?}",
                m.dim(),
                self.m_bar.dim()
            )));
        }
        if m.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Contract(
                "reciprocal scores must lie in [0, 1]".into(),
            ));
        }
        if self.updates == 0 {
            self.m_bar.assign(m);
        } else {
            let mu = f64::from(self.momentum);
            ndarray::Zip::from(&mut self.m_bar).and(m).for_each(|old, &new| {
                *old = (mu * f64::from(*old) + (1.0 - mu) * f64::from(new)) as f32;
            });
        }
        self.updates += 1;
        Ok(())
    }
}

/// One selected bottom token with its strongest top-panel partner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrespondenceEntry {
    pub bottom: usize,
    pub top: usize,
    pub score: f32,
}

/// Selected bottom tokens, their argmax top partners, and the mixing
/// weight to apply.
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    entries: Vec<CorrespondenceEntry>,
    lambda: f32,
    grid: (usize, usize),
}

impl CorrespondenceMap {
    pub fn entries(&self) -> &[CorrespondenceEntry] {
        &self.entries
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    /// Token-grid shape `(rows, cols)` of one sub-panel.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d_head))` per head.
///
/// Rows are normalized with 64-bit accumulation; each output row sums to
/// one within 1e-6.
pub fn compute_attention(q: &Array3<f32>, k: &Array3<f32>) -> Result<Array3<f32>> {
    if q.dim() != k.dim() {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?} and K {:?} must match",
            q.dim(),
            k.dim()
        )));
    }
    let (heads, n, d_head) = q.dim();
    if d_head == 0 {
        return Err(Error::Contract("d_head must be at least 1".into()));
    }
    if q.iter().chain(k.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Contract("attention inputs must be finite".into()));
    }

    let scale = 1.0 / (d_head as f64).sqrt();
    let mut attention = Array3::<f32>::zeros((heads, n, n));
    let mut logits = vec![0.0f64; n];
    for h in 0..heads {
        for i in 0..n {
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0f64;
                for t in 0..d_head {
                    dot += f64::from(q[[h, i, t]]) * f64::from(k[[h, j, t]]);
                }
                *logit = dot * scale;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for logit in logits.iter_mut() {
                *logit = (*logit - max).exp();
                sum += *logit;
            }
            for (j, &e) in logits.iter().enumerate() {
                attention[[h, i, j]] = (e / sum) as f32;
            }
        }
    }
    Ok(attention)
}

/// Extracts the head-averaged cross-panel blocks of a joint attention
/// matrix: `A_tb[u, v]` is attention from top token `u` to bottom token
/// `v`, and `A_bt[v, u]` the reverse direction.
pub fn extract_cross_blocks(
    attention: &Array3<f32>,
    view: &AttentionView,
) -> Result<(Array2<f32>, Array2<f32>)> {
    let (heads, rows, cols) = attention.dim();
    if rows != cols {
        return Err(Error::ShapeMismatch(format!(
            "attention must be square per head, got {rows}x{cols}"
        )));
    }
    if heads != view.heads() {
        return Err(Error::ShapeMismatch(format!(
            "attention has {heads} heads, view has {}",
            view.heads()
        )));
    }
    let range = view.image_token_range();
    if range.end > rows {
        return Err(Error::Contract(format!(
            "image token range {range:?} out of bounds for {rows} tokens"
        )));
    }

    let p = view.panel_tokens();
    let top = range.start;
    let bottom = range.start + p;
    let head_norm = 1.0 / heads as f64;
    let mut a_tb = Array2::<f32>::zeros((p, p));
    let mut a_bt = Array2::<f32>::zeros((p, p));
    for u in 0..p {
        for v in 0..p {
            let mut tb = 0.0f64;
            let mut bt = 0.0f64;
            for h in 0..heads {
                tb += f64::from(attention[[h, top + u, bottom + v]]);
                bt += f64::from(attention[[h, bottom + v, top + u]]);
            }
            a_tb[[u, v]] = (tb * head_norm) as f32;
            a_bt[[v, u]] = (bt * head_norm) as f32;
        }
    }
    Ok((a_tb, a_bt))
}

/// Reciprocal attention scores: `M[u, v] = min(A_tb[u, v], A_bt[v, u])`,
/// the elementwise min of mutual attention between the panels.
pub fn reciprocal_scores(a_tb: &Array2<f32>, a_bt: &Array2<f32>) -> Result<Array2<f32>> {
    if a_tb.dim() != a_bt.dim() || a_tb.nrows() != a_tb.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "cross blocks must be square and equal-shaped, got {:?} and {:?}",
            a_tb.dim(),
            a_bt.dim()
        )));
    }
    let p = a_tb.nrows();
    Ok(Array2::from_shape_fn((p, p), |(u, v)| {
        a_tb[[u, v]].min(a_bt[[v, u]])
    }))
}

/// Selects high-confidence bottom tokens from the averaged reciprocal
/// scores and pairs each with its argmax top partner.
///
/// Selection thresholds the per-bottom-token column maxima with Otsu,
/// reshapes the surviving set to the token grid, and cleans it with a
/// binary opening. A degenerate histogram yields an empty map, which
/// makes the downstream value mixing a no-op. Argmax ties go to the
/// lowest top index.
pub fn build_correspondence(
    state: &ReciprocalState,
    grid: (usize, usize),
    lambda: f32,
) -> Result<CorrespondenceMap> {
    if state.updates() == 0 {
        return Err(Error::Contract(
            "correspondence requires at least one reciprocal observation".into(),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let p = state.panel_tokens();
    if grid.0 * grid.1 != p {
        return Err(Error::ShapeMismatch(format!(
            "grid {grid:?} does not cover {p} panel tokens"
        )));
    }

    let empty = |grid, lambda| CorrespondenceMap { entries: Vec::new(), lambda, grid };
    if p < 2 {
        return Ok(empty(grid, lambda));
    }

    let m_bar = state.m_bar();
    let scores: Vec<f32> = (0..p)
        .map(|v| (0..p).map(|u| m_bar[[u, v]]).fold(f32::NEG_INFINITY, f32::max))
        .collect();

    let threshold = match otsu_threshold(&scores, OTSU_BINS) {
        Ok(t) => t,
        Err(Error::DegenerateHistogram) => return Ok(empty(grid, lambda)),
        Err(e) => return Err(e),
    };

    let raw_mask = Array2::from_shape_fn(grid, |(r, c)| {
        f64::from(scores[r * grid.1 + c]) > threshold
    });
    let mask = morphological_filter(&raw_mask);

    let mut entries = Vec::new();
    for v in 0..p {
        if !mask[(v / grid.1, v % grid.1)] {
            continue;
        }
        let mut best = 0usize;
        for u in 1..p {
            if m_bar[[u, v]] > m_bar[[best, v]] {
                best = u;
            }
        }
        entries.push(CorrespondenceEntry { bottom: v, top: best, score: m_bar[[best, v]] });
    }
    Ok(CorrespondenceMap { entries, lambda, grid })
}

/// Soft value update: for each selected bottom token `v` with partner
/// `u*`, every head's value row becomes
/// `lambda * V[v] + (1 - lambda) * V[u*]`. All other rows — text tokens,
/// the top panel, unselected bottom tokens — pass through bit-identical.
pub fn mix_values(
    values: &Array3<f32>,
    map: &CorrespondenceMap,
    view: &AttentionView,
) -> Result<Array3<f32>> {
    if values.dim() != view.queries().dim() {
        return Err(Error::ShapeMismatch(format!(
            "values {:?} must match view tensors {:?}",
            values.dim(),
            view.queries().dim()
        )));
    }
    let p = view.panel_tokens();
    let (heads, _, d_head) = values.dim();
    let lambda = map.lambda();
    let mut mixed = values.clone();
    for entry in map.entries() {
        if entry.bottom >= p || entry.top >= p {
            return Err(Error::Contract(format!(
                "correspondence entry ({}, {}) out of range for P={p}",
                entry.bottom, entry.top
            )));
        }
        let dst = view.bottom_index(entry.bottom);
        let src = view.top_index(entry.top);
        for h in 0..heads {
            for t in 0..d_head {
                mixed[[h, dst, t]] =
                    lambda * values[[h, dst, t]] + (1.0 - lambda) * values[[h, src, t]];
            }
        }
    }
    Ok(mixed)
}
