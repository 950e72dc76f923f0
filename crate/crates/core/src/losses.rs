//! Loss formulas of both branches, expressed over [`Var`]s.
//!
//! Imbalanced branch: LDAM margins `Δ_j = H / n_j^(1/4)` subtracted from the
//! ground-truth logit before a softmax cross-entropy, with optional deferred
//! class-balanced weights.
//!
//! Contrastive branch, per episode:
//! - metric loss: cross-entropy over `softmax(−‖f(x) − c_j‖)` against the
//!   support prototypes `c_j` in embedding space;
//! - intra-branch: `−log exp(s_pos/τ) / Σ_{n≠pos} exp(s_n/τ)` over cosine
//!   similarities to projected prototypes;
//! - inter-branch: same numerator, denominator over projected head instances.
//!
//! Both contrastive denominators exclude the positive unless
//! `include_positive` is set, so those losses can go negative.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Per-class LDAM margins.
#[derive(Debug, Clone, PartialEq)]
pub struct Margins(Vec<f64>);

impl Margins {
    pub fn zeros(classes: usize) -> Self {
        Self(vec![0.0; classes])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn ldam_margins(counts: &[usize], h: f64) -> Margins {
    Margins(counts.iter().map(|&n| h / (n as f64).sqrt().sqrt()).collect())
}

/// Softmax with max subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class probabilities with the margin subtracted from the label's logit only.
pub fn ldam_probabilities(z: &[f64], label: usize, margins: &Margins) -> Result<Vec<f64>> {
    if label >= z.len() || margins.len() != z.len() {
        return Err(Error::Invalid(format!(
            "label {label} with {} logits and {} margins",
            z.len(),
            margins.len()
        )));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite logit {bad}")));
    }
    let mut shifted = z.to_vec();
    shifted[label] = z[label] - margins.0[label];
    Ok(softmax(&shifted))
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(y) => Err(Error::Invalid(format!("label {y} out of range for {classes} classes"))),
        None => Ok(()),
    }
}

fn matrix_dims(v: Var<'_>, what: &str) -> Result<(usize, usize)> {
    match v.shape().as_slice() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Invalid(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

/// Mean over the batch of `w_y · (−log p_y)` with LDAM probabilities.
///
/// `class_weights = None` means every weight is 1.
pub fn imbalanced_loss<'t>(
    logits: Var<'t>,
    labels: &[usize],
    margins: &Margins,
    class_weights: Option<&[f64]>,
) -> Result<Var<'t>> {
    let (b, c) = matrix_dims(logits, "logits")?;
    if b == 0 {
        return Err(Error::Invalid("imbalanced loss of an empty batch".into()));
    }
    if labels.len() != b || margins.len() != c {
        return Err(Error::Invalid(format!(
            "{} labels and {} margins for logits of shape [{b}, {c}]",
            labels.len(),
            margins.len()
        )));
    }
    check_labels(labels, c)?;
    let tape = logits.tape();
    let mut shift = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        shift[i * c + y] = margins.0[y];
    }
    let adjusted = logits.sub(tape.constant(Tensor::new(&[b, c], shift)?))?;
    let truth: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let per_sample = adjusted.logsumexp()?.sub(adjusted.gather(&truth, &[b])?)?;
    let per_sample = match class_weights {
        None => per_sample,
        Some(w) => {
            if w.len() != c {
                return Err(Error::Invalid(format!("{} class weights for {c} classes", w.len())));
            }
            let ws = labels.iter().map(|&y| w[y]).collect();
            per_sample.mul(tape.constant(Tensor::from_vec(ws)))?
        }
    };
    Ok(per_sample.mean()?)
}

/// Deferred re-weighting: `w_j ∝ (1 − β) / (1 − β^{n_j})`, scaled to mean 1.
pub fn drw_class_weights(counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Invalid(format!("beta must be in [0, 1), got {beta}")));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powi(n as i32)))
        .collect();
    let total: f64 = raw.iter().sum();
    let scale = counts.len() as f64 / total;
    Ok(raw.into_iter().map(|w| w * scale).collect())
}

/// Class means of `support` rows grouped by episode-local label: `[N, e]`.
pub fn prototypes<'t>(support: Var<'t>, labels: &[usize], n_classes: usize) -> Result<Var<'t>> {
    let (s, _) = matrix_dims(support, "support embeddings")?;
    if labels.len() != s {
        return Err(Error::Invalid(format!("{} labels for {s} support rows", labels.len())));
    }
    check_labels(labels, n_classes)?;
    let mut counts = vec![0usize; n_classes];
    labels.iter().for_each(|&y| counts[y] += 1);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!("class {empty} has no support samples")));
    }
    let mut avg = vec![0.0; n_classes * s];
    for (i, &y) in labels.iter().enumerate() {
        avg[y * s + i] = 1.0 / counts[y] as f64;
    }
    let avg = support.tape().constant(Tensor::new(&[n_classes, s], avg)?);
    Ok(avg.matmul(support)?)
}

/// Euclidean distances from each query row to each prototype row, `[Q, N]`.
pub fn distance_matrix<'t>(queries: Var<'t>, prototypes: Var<'t>) -> Result<Var<'t>> {
    let (q, e) = matrix_dims(queries, "queries")?;
    let (n, e2) = matrix_dims(prototypes, "prototypes")?;
    if e != e2 {
        return Err(Error::Invalid(format!("query width {e} vs prototype width {e2}")));
    }
    let mut cells = Vec::with_capacity(q * n);
    for i in 0..q {
        let row = queries.row(i)?;
        for k in 0..n {
            cells.push(row.squared_l2_distance(prototypes.row(k)?)?.sqrt()?);
        }
    }
    Ok(queries.tape().concat_rows(&cells)?.reshape(&[q, n])?)
}

/// `softmax(−d(query, c_k))` over prototypes, `[N]`.
pub fn metric_probabilities<'t>(query: Var<'t>, prototypes: Var<'t>) -> Result<Var<'t>> {
    let e = query.shape();
    let neg = distance_matrix(query.reshape(&[1, e.iter().product()])?, prototypes)?
        .neg()?
        .reshape(&[prototypes.shape()[0]])?;
    let lse = neg.logsumexp()?;
    Ok(neg.sub(lse)?.exp()?)
}

/// Mean cross-entropy of queries against their own prototype.
pub fn metric_loss<'t>(queries: Var<'t>, prototypes: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (q, _) = matrix_dims(queries, "queries")?;
    let (n, _) = matrix_dims(prototypes, "prototypes")?;
    if labels.len() != q || q == 0 {
        return Err(Error::Invalid(format!("{} labels for {q} queries", labels.len())));
    }
    check_labels(labels, n)?;
    let logits = distance_matrix(queries, prototypes)?.neg()?;
    let truth: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * n + y).collect();
    Ok(logits.logsumexp()?.sub(logits.gather(&truth, &[q])?)?.mean()?)
}

/// `u·v / (‖u‖ ‖v‖)`. Errors on a zero-norm argument.
pub fn cosine_similarity<'t>(u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let nu = u.l2_norm()?;
    let nv = v.l2_norm()?;
    if nu.item()? == 0.0 || nv.item()? == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero-norm vector".into()));
    }
    Ok(u.dot(v)?.div(nu.mul(nv)?)?)
}

fn normalize_rows<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let (m, _) = matrix_dims(x, "rows")?;
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let r = x.row(i)?;
        let norm = r.l2_norm()?;
        if norm.item()? == 0.0 {
            return Err(Error::Invalid(format!("row {i} has zero norm")));
        }
        rows.push(r.div(norm)?);
    }
    Ok(x.tape().concat_rows(&rows)?)
}

/// Cosine similarity of every row of `a` with every row of `b`, `[m, n]`.
pub fn cosine_matrix<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(normalize_rows(a)?.matmul(normalize_rows(b)?.transpose()?)?)
}

/// Intra-branch contrastive loss against projected prototypes.
pub fn intra_cl<'t>(
    queries: Var<'t>,
    labels: &[usize],
    prototypes: Var<'t>,
    tau: f64,
    include_positive: bool,
) -> Result<Var<'t>> {
    let (q, _) = matrix_dims(queries, "query projections")?;
    let (n, _) = matrix_dims(prototypes, "projected prototypes")?;
    if n < 2 {
        return Err(Error::Invalid("intra-CL undefined for single-class episodes".into()));
    }
    if labels.len() != q || q == 0 {
        return Err(Error::Invalid(format!("{} labels for {q} queries", labels.len())));
    }
    check_labels(labels, n)?;
    let sims = cosine_matrix(queries, prototypes)?.scalar_mul(1.0 / tau)?;
    let mut per_query = Vec::with_capacity(q);
    for (i, &j) in labels.iter().enumerate() {
        let positive = sims.at(i * n + j)?;
        let denom: Vec<usize> = (0..n)
            .filter(|&k| include_positive || k != j)
            .map(|k| i * n + k)
            .collect();
        let lse = sims.gather(&denom, &[denom.len()])?.logsumexp()?;
        per_query.push(lse.sub(positive)?);
    }
    Ok(queries.tape().concat_rows(&per_query)?.mean()?)
}

/// Result of [`inter_cl`]; `skipped` is set when there were no head instances
/// and the loss was taken as 0.
#[derive(Debug, Clone, Copy)]
pub struct InterOutcome<'t> {
    pub loss: Var<'t>,
    pub skipped: bool,
}

/// Inter-branch contrastive loss: queries against their projected prototype,
/// contrasted with projected head instances.
pub fn inter_cl<'t>(
    queries: Var<'t>,
    labels: &[usize],
    prototypes: Var<'t>,
    heads: Option<Var<'t>>,
    tau: f64,
    include_positive: bool,
) -> Result<InterOutcome<'t>> {
    let tape: &'t Tape = queries.tape();
    let (q, _) = matrix_dims(queries, "query projections")?;
    let (n, _) = matrix_dims(prototypes, "projected prototypes")?;
    if labels.len() != q || q == 0 {
        return Err(Error::Invalid(format!("{} labels for {q} queries", labels.len())));
    }
    check_labels(labels, n)?;
    let heads = match heads {
        Some(h) if matrix_dims(h, "head projections")?.0 > 0 => h,
        _ => {
            return Ok(InterOutcome {
                loss: tape.scalar(0.0),
                skipped: true,
            })
        }
    };
    let inv_tau = 1.0 / tau;
    let pos_sims = cosine_matrix(queries, prototypes)?.scalar_mul(inv_tau)?;
    let head_lse = cosine_matrix(queries, heads)?.scalar_mul(inv_tau)?.logsumexp()?;
    let mut per_query = Vec::with_capacity(q);
    for (i, &j) in labels.iter().enumerate() {
        let positive = pos_sims.at(i * n + j)?;
        let heads_i = head_lse.at(i)?;
        let lse = if include_positive {
            tape.concat_rows(&[positive, heads_i])?.logsumexp()?
        } else {
            heads_i
        };
        per_query.push(lse.sub(positive)?);
    }
    Ok(InterOutcome {
        loss: tape.concat_rows(&per_query)?.mean()?,
        skipped: false,
    })
}

/// `L_m + L_intra + λ·L_inter`.
pub fn colb_loss<'t>(l_m: Var<'t>, l_intra: Var<'t>, l_inter: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    Ok(l_m.add(l_intra)?.add(l_inter.scalar_mul(lambda)?)?)
}

/// Parabolic branch weight `1 − (T / T_max)²` for epochs `1..=T_max`.
pub fn alpha_schedule(epoch: usize, t_max: usize) -> Result<f64> {
    if epoch == 0 || epoch > t_max {
        return Err(Error::Invalid(format!("epoch {epoch} outside 1..={t_max}")));
    }
    let r = epoch as f64 / t_max as f64;
    Ok(1.0 - r * r)
}

/// `α·L_imb + (1 − α)·L_con`.
pub fn total_loss<'t>(l_imb: Var<'t>, l_con: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    Ok(l_imb.scalar_mul(alpha)?.add(l_con.scalar_mul(1.0 - alpha)?)?)
}

/// Scalar record of one training step's loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_imb: f64,
    pub l_m: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_con: f64,
    pub alpha: f64,
    pub total: f64,
    /// No head instances were available, so `l_inter` was taken as 0.
    pub inter_skipped: bool,
}

impl LossBreakdown {
    /// Largest deviation from `l_con = l_m + l_intra + λ·l_inter` and
    /// `total = α·l_imb + (1 − α)·l_con`.
    pub fn invariant_error(&self, lambda: f64) -> f64 {
        let con = self.l_m + self.l_intra + lambda * self.l_inter;
        let total = self.alpha * self.l_imb + (1.0 - self.alpha) * self.l_con;
        (con - self.l_con).abs().max((total - self.total).abs())
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_imb,
            self.l_m,
            self.l_intra,
            self.l_inter,
            self.l_con,
            self.alpha,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
