//! Attention primitives over small token grids.
//!
//! The grid is m x m tokens in row-major order, token `i` sitting at
//! `(x_i, y_i) = (i % m, i / m)`. A binary neighborhood mask `M` keeps
//! attention local, and a pseudo-score matrix `P` places a column-dependent
//! negative score at every masked position, so that after the row softmax the
//! mass remaining on real positions differs per row — absolute position leaks
//! into the row sums.
//!
//! Temporal attention over a two-step token pair is causal: the first step
//! passes through untouched, only the second step attends (to both steps, one
//! spatial position at a time). Causal relation mining is a projection-free
//! cross attention between the two long-range grids.

use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD, Axis};
use thiserror::Error;

use crate::nn::{softmax_rows, softmax_rows_backward, Linear, ParamSet};

/// Token grid features, `m^2 x D`.
pub type TokenGrid = Array2<f64>;

/// Time-ordered pair of token grids (t = 1, t = 2).
pub type TemporalTokenPair = (TokenGrid, TokenGrid);

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("decay rate gamma must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("shape mismatch in {context}: {details}")]
    ShapeMismatch { context: &'static str, details: String },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("feature dimension {d} not divisible by {heads} heads")]
    HeadSplit { d: usize, heads: usize },
    #[error("row sums not strictly decreasing between rows {row} and {next}: {a} <= {b}")]
    MonotonicityViolation { row: usize, next: usize, a: f64, b: f64 },
}

/// Square token-grid geometry: side `m`, squared-distance neighborhood
/// threshold `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    pub m: usize,
    pub r: usize,
}

impl GridGeometry {
    pub fn new(m: usize, r: usize) -> Self {
        assert!(m >= 1, "grid side must be at least 1");
        Self { m, r }
    }

    pub fn token_count(&self) -> usize {
        self.m * self.m
    }

    /// Row-major coordinates of token `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.m, i / self.m)
    }
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self { m: 2, r: 1 }
    }
}

/// Binary neighborhood mask: `M(i, j) = 1` iff the squared grid distance
/// between tokens i and j is at most `r`.
pub fn build_neighborhood_mask(geom: &GridGeometry) -> Array2<f64> {
    let n = geom.token_count();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (xi, yi) = geom.coords(i);
        let (xj, yj) = geom.coords(j);
        let dx = xi as i64 - xj as i64;
        let dy = yi as i64 - yj as i64;
        if (dx * dx + dy * dy) as usize <= geom.r {
            1.0
        } else {
            0.0
        }
    })
}

/// Pseudo-score matrix: `-j * gamma` at masked positions, zero on the
/// neighborhood. Column 0 contributes a literal zero even when masked.
pub fn build_pseudo_matrix(geom: &GridGeometry, gamma: f64) -> Result<Array2<f64>, AttentionError> {
    if !(gamma > 0.0) {
        return Err(AttentionError::InvalidGamma(gamma));
    }
    Ok(pseudo_matrix_unchecked(geom, gamma))
}

fn pseudo_matrix_unchecked(geom: &GridGeometry, gamma: f64) -> Array2<f64> {
    let mask = build_neighborhood_mask(geom);
    let n = geom.token_count();
    Array2::from_shape_fn((n, n), |(i, j)| if mask[[i, j]] == 1.0 { 0.0 } else { -(j as f64) * gamma })
}

/// The mask/pseudo pair fed to masked pseudo-attention.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub mask: Array2<f64>,
    pub pseudo: Array2<f64>,
    pub gamma: f64,
}

impl MaskPair {
    /// Build both matrices for a geometry. `gamma = 0` is allowed here (all
    /// pseudo scores zero) so degenerate configurations can be analyzed;
    /// [`build_pseudo_matrix`] itself rejects it.
    pub fn new(geom: &GridGeometry, gamma: f64) -> Result<Self, AttentionError> {
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(AttentionError::InvalidGamma(gamma));
        }
        Ok(Self {
            mask: build_neighborhood_mask(geom),
            pseudo: pseudo_matrix_unchecked(geom, gamma),
            gamma,
        })
    }
}

fn check_finite(name: &'static str, a: &Array2<f64>) -> Result<(), AttentionError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AttentionError::NonFinite(name))
    }
}

/// Output of [`masked_pseudo_attention`]: the aggregated tokens, the
/// mask-multiplied attention matrix, and the softmax rows kept for backward.
pub struct MpaOutput {
    pub out: TokenGrid,
    /// Softmax rows multiplied by the mask; exact zeros at masked positions.
    pub a_tilde: Array2<f64>,
    /// Full softmax rows (real + pseudo mass), kept for backward.
    pub a_full: Array2<f64>,
}

/// `S = (Q K^T / sqrt(d_k)) .* M + P`, row softmax over the full row, then
/// `.* M` before aggregating the values.
pub fn masked_pseudo_attention(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    masks: &MaskPair,
    d_k: usize,
) -> Result<MpaOutput, AttentionError> {
    let n = masks.mask.nrows();
    if q.nrows() != n || k.nrows() != n || v.nrows() != n {
        return Err(AttentionError::ShapeMismatch {
            context: "masked_pseudo_attention",
            details: format!(
                "mask is {n}x{n} but token rows are q={}, k={}, v={}",
                q.nrows(),
                k.nrows(),
                v.nrows()
            ),
        });
    }
    if q.ncols() != k.ncols() {
        return Err(AttentionError::ShapeMismatch {
            context: "masked_pseudo_attention",
            details: format!("q has {} columns, k has {}", q.ncols(), k.ncols()),
        });
    }
    check_finite("q", q)?;
    check_finite("k", k)?;
    check_finite("v", v)?;

    let scale = 1.0 / (d_k as f64).sqrt();
    let scores = q.dot(&k.t()) * scale * &masks.mask + &masks.pseudo;
    let a_full = softmax_rows(&scores);
    let a_tilde = &a_full * &masks.mask;
    let out = a_tilde.dot(v);
    Ok(MpaOutput { out, a_tilde, a_full })
}

/// Gradients of a scalar loss w.r.t. q, k, v given the upstream gradient on
/// the output (and optionally directly on `a_tilde`).
pub fn masked_pseudo_attention_backward(
    fwd: &MpaOutput,
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    masks: &MaskPair,
    d_k: usize,
    d_out: &TokenGrid,
    d_a_tilde: Option<&Array2<f64>>,
) -> (TokenGrid, TokenGrid, TokenGrid) {
    let scale = 1.0 / (d_k as f64).sqrt();
    let d_v = fwd.a_tilde.t().dot(d_out);
    let mut d_at = d_out.dot(&v.t());
    if let Some(extra) = d_a_tilde {
        d_at += extra;
    }
    let d_a_full = d_at * &masks.mask;
    let d_scores = softmax_rows_backward(&fwd.a_full, &d_a_full);
    let d_qk = d_scores * &masks.mask * scale;
    let d_q = d_qk.dot(k);
    let d_k_grad = d_qk.t().dot(q);
    (d_q, d_k_grad, d_v)
}

/// How the row sums of an identical-input sequence behaved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    StrictlyDecreasing,
    /// gamma = 0: every row carries the same real mass, no position signal.
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub row_sums: Vec<f64>,
    pub verdict: Monotonicity,
}

/// Feed an identical-input sequence (all pairwise scores zero) through masked
/// pseudo-attention and return the per-row real-attention mass.
///
/// For gamma > 0 the sums must strictly decrease with the row index; a
/// violation is an error naming the offending row pair. gamma = 0 is reported
/// as degenerate.
pub fn position_monotonicity_check(
    gamma: f64,
    geom: &GridGeometry,
) -> Result<MonotonicityReport, AttentionError> {
    let masks = MaskPair::new(geom, gamma)?;
    let n = geom.token_count();
    // Identical tokens: every real score equals the same constant; zero keeps
    // the closed form exact.
    let x = Array2::zeros((n, 4));
    let fwd = masked_pseudo_attention(&x, &x, &x, &masks, 4)?;
    let row_sums: Vec<f64> = fwd.a_tilde.sum_axis(Axis(1)).to_vec();
    if gamma == 0.0 {
        return Ok(MonotonicityReport { row_sums, verdict: Monotonicity::Degenerate });
    }
    for i in 0..n.saturating_sub(1) {
        if row_sums[i] <= row_sums[i + 1] {
            return Err(AttentionError::MonotonicityViolation {
                row: i,
                next: i + 1,
                a: row_sums[i],
                b: row_sums[i + 1],
            });
        }
    }
    Ok(MonotonicityReport { row_sums, verdict: Monotonicity::StrictlyDecreasing })
}

/// Query/key/value per-token projections of one attention site.
#[derive(Debug, Clone)]
pub struct AttnProjections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub heads: usize,
}

impl AttnProjections {
    pub fn zeros(d: usize, heads: usize) -> Self {
        Self { query: Linear::zeros(d, d), key: Linear::zeros(d, d), value: Linear::zeros(d, d), heads }
    }

    pub fn init<R: rand::Rng>(d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            heads,
        }
    }

    pub fn head_dim(&self, d: usize) -> Result<usize, AttentionError> {
        if d % self.heads != 0 {
            return Err(AttentionError::HeadSplit { d, heads: self.heads });
        }
        Ok(d / self.heads)
    }
}

impl ParamSet for AttnProjections {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        visit_scoped(&self.query, "query", f);
        visit_scoped(&self.key, "key", f);
        visit_scoped(&self.value, "value", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        visit_scoped_mut(&mut self.query, "query", f);
        visit_scoped_mut(&mut self.key, "key", f);
        visit_scoped_mut(&mut self.value, "value", f);
    }
}

/// Prefix a child parameter set's tensor names.
pub fn visit_scoped(child: &dyn ParamSet, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
    child.visit(&mut |name, view| f(&format!("{prefix}.{name}"), view));
}

pub fn visit_scoped_mut(
    child: &mut dyn ParamSet,
    prefix: &str,
    f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>),
) {
    child.visit_mut(&mut |name, view| f(&format!("{prefix}.{name}"), view));
}

/// One grid attended to itself (or a cross pair) through the projections,
/// head by head. Cache holds everything backward needs.
pub struct ProjectedAttnCache {
    q: TokenGrid,
    k: TokenGrid,
    v: TokenGrid,
    per_head: Vec<MpaOutput>,
}

/// Masked pseudo-attention with query taken from `x_q` and key/value from
/// `x_kv`, after the per-token projections. `x_q == x_kv` is the
/// self-attention case.
pub fn projected_masked_attention(
    x_q: &TokenGrid,
    x_kv: &TokenGrid,
    projs: &AttnProjections,
    masks: &MaskPair,
) -> Result<(TokenGrid, ProjectedAttnCache), AttentionError> {
    let d = x_q.ncols();
    let dk = projs.head_dim(d)?;
    let q = projs.query.forward(x_q);
    let k = projs.key.forward(x_kv);
    let v = projs.value.forward(x_kv);
    let mut out = Array2::zeros((x_q.nrows(), d));
    let mut per_head = Vec::with_capacity(projs.heads);
    for h in 0..projs.heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let fwd = masked_pseudo_attention(
            &q.slice(cols).to_owned(),
            &k.slice(cols).to_owned(),
            &v.slice(cols).to_owned(),
            masks,
            dk,
        )?;
        out.slice_mut(cols).assign(&fwd.out);
        per_head.push(fwd);
    }
    Ok((out, ProjectedAttnCache { q, k, v, per_head }))
}

/// Backward for [`projected_masked_attention`]. Accumulates projection
/// gradients into `grad` and returns `(d_x_q, d_x_kv)`.
pub fn projected_masked_attention_backward(
    x_q: &TokenGrid,
    x_kv: &TokenGrid,
    projs: &AttnProjections,
    masks: &MaskPair,
    cache: &ProjectedAttnCache,
    d_out: &TokenGrid,
    grad: &mut AttnProjections,
) -> (TokenGrid, TokenGrid) {
    let d = x_q.ncols();
    let dk = d / projs.heads;
    let mut d_q = Array2::zeros(cache.q.dim());
    let mut d_k = Array2::zeros(cache.k.dim());
    let mut d_v = Array2::zeros(cache.v.dim());
    for (h, fwd) in cache.per_head.iter().enumerate() {
        let cols = s![.., h * dk..(h + 1) * dk];
        let (dq, dkh, dv) = masked_pseudo_attention_backward(
            fwd,
            &cache.q.slice(cols).to_owned(),
            &cache.k.slice(cols).to_owned(),
            &cache.v.slice(cols).to_owned(),
            masks,
            dk,
            &d_out.slice(cols).to_owned(),
            None,
        );
        d_q.slice_mut(cols).assign(&dq);
        d_k.slice_mut(cols).assign(&dkh);
        d_v.slice_mut(cols).assign(&dv);
    }
    let d_x_q = projs.query.backward(x_q, &d_q, &mut grad.query);
    let mut d_x_kv = projs.key.backward(x_kv, &d_k, &mut grad.key);
    d_x_kv += &projs.value.backward(x_kv, &d_v, &mut grad.value);
    (d_x_q, d_x_kv)
}

/// Spatial attention over a temporal pair: each time step attends to itself
/// under the mask/pseudo pair, with shared projections.
pub fn spatial_attention(
    pair: &TemporalTokenPair,
    masks: &MaskPair,
    projs: &AttnProjections,
) -> Result<(TemporalTokenPair, (ProjectedAttnCache, ProjectedAttnCache)), AttentionError> {
    let (y1, c1) = projected_masked_attention(&pair.0, &pair.0, projs, masks)?;
    let (y2, c2) = projected_masked_attention(&pair.1, &pair.1, projs, masks)?;
    Ok(((y1, y2), (c1, c2)))
}

pub fn spatial_attention_backward(
    pair: &TemporalTokenPair,
    masks: &MaskPair,
    projs: &AttnProjections,
    cache: &(ProjectedAttnCache, ProjectedAttnCache),
    d_pair: &TemporalTokenPair,
    grad: &mut AttnProjections,
) -> TemporalTokenPair {
    let (dq1, dkv1) =
        projected_masked_attention_backward(&pair.0, &pair.0, projs, masks, &cache.0, &d_pair.0, grad);
    let (dq2, dkv2) =
        projected_masked_attention_backward(&pair.1, &pair.1, projs, masks, &cache.1, &d_pair.1, grad);
    (dq1 + dkv1, dq2 + dkv2)
}

/// Per-position softmax weights of the second-step attention, kept for
/// backward: row p holds the (t=1, t=2) weights at spatial position p, per head.
pub struct TemporalCache {
    q2: TokenGrid,
    k1: TokenGrid,
    k2: TokenGrid,
    v1: TokenGrid,
    v2: TokenGrid,
    /// (position, head) -> [w1, w2]
    weights: Vec<Vec<[f64; 2]>>,
}

/// Causal temporal attention: the first token passes through unchanged; the
/// second token at each spatial position attends to the two tokens at that
/// position only. No mask, no pseudo scores.
pub fn temporal_causal_attention(
    pair: &TemporalTokenPair,
    projs: &AttnProjections,
) -> Result<(TemporalTokenPair, TemporalCache), AttentionError> {
    let (g1, g2) = pair;
    if g1.dim() != g2.dim() {
        return Err(AttentionError::ShapeMismatch {
            context: "temporal_causal_attention",
            details: format!("{:?} vs {:?}", g1.dim(), g2.dim()),
        });
    }
    let (n, d) = g1.dim();
    let dk = projs.head_dim(d)?;
    let scale = 1.0 / (dk as f64).sqrt();

    let q2 = projs.query.forward(g2);
    let k1 = projs.key.forward(g1);
    let k2 = projs.key.forward(g2);
    let v1 = projs.value.forward(g1);
    let v2 = projs.value.forward(g2);

    let mut out2 = Array2::zeros((n, d));
    let mut weights = vec![vec![[0.0; 2]; projs.heads]; n];
    for p in 0..n {
        for h in 0..projs.heads {
            let span = h * dk..(h + 1) * dk;
            let mut l1 = 0.0;
            let mut l2 = 0.0;
            for j in span.clone() {
                l1 += q2[[p, j]] * k1[[p, j]];
                l2 += q2[[p, j]] * k2[[p, j]];
            }
            l1 *= scale;
            l2 *= scale;
            let max = l1.max(l2);
            let e1 = (l1 - max).exp();
            let e2 = (l2 - max).exp();
            let w1 = e1 / (e1 + e2);
            let w2 = e2 / (e1 + e2);
            weights[p][h] = [w1, w2];
            for j in span {
                out2[[p, j]] = w1 * v1[[p, j]] + w2 * v2[[p, j]];
            }
        }
    }
    let out1 = g1.clone();
    Ok(((out1, out2), TemporalCache { q2, k1, k2, v1, v2, weights }))
}

/// Backward for [`temporal_causal_attention`]. Accumulates projection
/// gradients into `grad`, returns gradients on the input pair.
pub fn temporal_causal_attention_backward(
    pair: &TemporalTokenPair,
    projs: &AttnProjections,
    cache: &TemporalCache,
    d_pair: &TemporalTokenPair,
    grad: &mut AttnProjections,
) -> TemporalTokenPair {
    let (g1, g2) = pair;
    let (n, d) = g1.dim();
    let dk = d / projs.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (d_out1, d_out2) = d_pair;

    let mut d_q2 = Array2::zeros((n, d));
    let mut d_k1 = Array2::zeros((n, d));
    let mut d_k2 = Array2::zeros((n, d));
    let mut d_v1 = Array2::zeros((n, d));
    let mut d_v2 = Array2::zeros((n, d));

    for p in 0..n {
        for h in 0..projs.heads {
            let span = h * dk..(h + 1) * dk;
            let [w1, w2] = cache.weights[p][h];
            let mut dw1 = 0.0;
            let mut dw2 = 0.0;
            for j in span.clone() {
                let g = d_out2[[p, j]];
                dw1 += g * cache.v1[[p, j]];
                dw2 += g * cache.v2[[p, j]];
                d_v1[[p, j]] += w1 * g;
                d_v2[[p, j]] += w2 * g;
            }
            // Softmax over two logits.
            let dot = dw1 * w1 + dw2 * w2;
            let dl1 = w1 * (dw1 - dot) * scale;
            let dl2 = w2 * (dw2 - dot) * scale;
            for j in span {
                d_q2[[p, j]] += dl1 * cache.k1[[p, j]] + dl2 * cache.k2[[p, j]];
                d_k1[[p, j]] += dl1 * cache.q2[[p, j]];
                d_k2[[p, j]] += dl2 * cache.q2[[p, j]];
            }
        }
    }

    // t=1 output is the t=1 input.
    let mut d_g1 = d_out1.clone();
    d_g1 += &projs.key.backward(g1, &d_k1, &mut grad.key);
    d_g1 += &projs.value.backward(g1, &d_v1, &mut grad.value);
    let mut d_g2 = projs.query.backward(g2, &d_q2, &mut grad.query);
    d_g2 += &projs.key.backward(g2, &d_k2, &mut grad.key);
    d_g2 += &projs.value.backward(g2, &d_v2, &mut grad.value);
    (d_g1, d_g2)
}

pub struct CrmCache {
    /// Row-stochastic attention matrix.
    pub a: Array2<f64>,
}

/// Causal relation mining: projection-free cross attention between the two
/// long-range grids, applied to their sum.
pub fn causal_relation_mining(
    y_for2: &TokenGrid,
    y_back2: &TokenGrid,
    d_k: usize,
) -> Result<(TokenGrid, CrmCache), AttentionError> {
    if y_for2.dim() != y_back2.dim() {
        return Err(AttentionError::ShapeMismatch {
            context: "causal_relation_mining",
            details: format!("{:?} vs {:?}", y_for2.dim(), y_back2.dim()),
        });
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let logits = y_for2.dot(&y_back2.t()) * scale;
    let a = softmax_rows(&logits);
    let out = a.dot(&(y_for2 + y_back2));
    Ok((out, CrmCache { a }))
}

pub fn causal_relation_mining_backward(
    y_for2: &TokenGrid,
    y_back2: &TokenGrid,
    d_k: usize,
    cache: &CrmCache,
    d_out: &TokenGrid,
) -> (TokenGrid, TokenGrid) {
    let scale = 1.0 / (d_k as f64).sqrt();
    let sum = y_for2 + y_back2;
    let d_a = d_out.dot(&sum.t());
    let d_sum = cache.a.t().dot(d_out);
    let d_logits = softmax_rows_backward(&cache.a, &d_a);
    let d_for = &d_sum + &(d_logits.dot(y_back2) * scale);
    let d_back = &d_sum + &(d_logits.t().dot(y_for2) * scale);
    (d_for, d_back)
}
