//! Graph-free reference formulas used as test oracles.
//!
//! Everything here works on plain slices, evaluates each formula in the most
//! literal order (no max subtraction, no fused reductions), and shares no code
//! with [`crate::losses`] or [`crate::diffcore`].

/// A formula's value with the intermediate terms it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    pub terms: Vec<(String, f64)>,
}

impl OracleResult {
    pub fn term(&self, id: &str) -> Option<f64> {
        self.terms.iter().find(|(k, _)| k == id).map(|(_, v)| *v)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// Cosine similarity written out term by term.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

/// LDAM probabilities for one sample. Terms `p{j}` are the probabilities;
/// `value` is `−ln p_y`.
pub fn oracle_ldam_probs(z: &[f64], y: usize, margins: &[f64]) -> OracleResult {
    let shifted = (z[y] - margins[y]).exp();
    let mut others = 0.0;
    for (k, &zk) in z.iter().enumerate() {
        if k != y {
            others += zk.exp();
        }
    }
    let denom = shifted + others;
    let mut terms = Vec::with_capacity(z.len());
    for (j, &zj) in z.iter().enumerate() {
        let p = if j == y { shifted / denom } else { zj.exp() / denom };
        terms.push((format!("p{j}"), p));
    }
    OracleResult {
        value: -(shifted / denom).ln(),
        terms,
    }
}

/// `exp(−d_j) / Σ_k exp(−d_k)`. Terms `p{j}`; `value` is their sum.
pub fn oracle_metric_probs(distances: &[f64]) -> OracleResult {
    let denom: f64 = distances.iter().map(|d| (-d).exp()).sum();
    let terms: Vec<(String, f64)> = distances
        .iter()
        .enumerate()
        .map(|(j, d)| (format!("p{j}"), (-d).exp() / denom))
        .collect();
    OracleResult {
        value: terms.iter().map(|(_, p)| p).sum(),
        terms,
    }
}

/// Intra-branch term for one query: `sims[n]` are similarities to every
/// projected prototype, `positive` indexes its own class.
pub fn oracle_intra_term(sims: &[f64], positive: usize, tau: f64, include_positive: bool) -> OracleResult {
    let numerator = (sims[positive] / tau).exp();
    let mut denominator = 0.0;
    for (n, s) in sims.iter().enumerate() {
        if n != positive || include_positive {
            denominator += (s / tau).exp();
        }
    }
    OracleResult {
        value: -(numerator / denominator).ln(),
        terms: vec![("numerator".into(), numerator), ("denominator".into(), denominator)],
    }
}

/// Inter-branch term for one query.
pub fn oracle_inter_term(positive_sim: f64, head_sims: &[f64], tau: f64, include_positive: bool) -> OracleResult {
    let numerator = (positive_sim / tau).exp();
    let mut denominator: f64 = head_sims.iter().map(|s| (s / tau).exp()).sum();
    if include_positive {
        denominator += numerator;
    }
    OracleResult {
        value: -(numerator / denominator).ln(),
        terms: vec![("numerator".into(), numerator), ("denominator".into(), denominator)],
    }
}

/// Batch-mean LDAM cross-entropy with optional class weights.
pub fn oracle_imbalanced_loss(logits: &[Vec<f64>], labels: &[usize], margins: &[f64], weights: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let w = weights.map_or(1.0, |w| w[y]);
        total += w * oracle_ldam_probs(z, y, margins).value;
    }
    total / logits.len() as f64
}

/// Class means of support vectors, grouped by local label.
pub fn oracle_prototypes(support: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let rows: Vec<Vec<f64>> = support
                .iter()
                .zip(labels)
                .filter(|(_, &y)| y == c)
                .map(|(r, _)| r.clone())
                .collect();
            mean_vector(&rows)
        })
        .collect()
}

/// Metric loss: mean over queries of `−ln p_y` with prototype probabilities.
pub fn oracle_metric_loss(queries: &[Vec<f64>], labels: &[usize], prototypes: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (q, &y) in queries.iter().zip(labels) {
        let d: Vec<f64> = prototypes.iter().map(|c| euclidean(q, c)).collect();
        total += -oracle_metric_probs(&d).terms[y].1.ln();
    }
    total / queries.len() as f64
}

pub fn oracle_intra_loss(
    queries: &[Vec<f64>],
    labels: &[usize],
    prototypes: &[Vec<f64>],
    tau: f64,
    include_positive: bool,
) -> f64 {
    let mut total = 0.0;
    for (q, &y) in queries.iter().zip(labels) {
        let sims: Vec<f64> = prototypes.iter().map(|c| cosine(q, c)).collect();
        total += oracle_intra_term(&sims, y, tau, include_positive).value;
    }
    total / queries.len() as f64
}

/// Returns 0 when there are no heads.
pub fn oracle_inter_loss(
    queries: &[Vec<f64>],
    labels: &[usize],
    prototypes: &[Vec<f64>],
    heads: &[Vec<f64>],
    tau: f64,
    include_positive: bool,
) -> f64 {
    if heads.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (q, &y) in queries.iter().zip(labels) {
        let head_sims: Vec<f64> = heads.iter().map(|h| cosine(q, h)).collect();
        total += oracle_inter_term(cosine(q, &prototypes[y]), &head_sims, tau, include_positive).value;
    }
    total / queries.len() as f64
}

/// Central-difference gradient of a plain function.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}
