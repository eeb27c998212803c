use crate::error::{Error, Result};

/// Fraction of rows of `logits` (`rows × cols`, row-major) whose first
/// maximum sits at the row's label.
pub fn accuracy(logits: &[f64], cols: usize, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Metric("accuracy of an empty evaluation set".into()));
    }
    if cols == 0 || logits.len() != labels.len() * cols {
        return Err(Error::Metric(format!(
            "{} logits do not form {} rows of {cols}",
            logits.len(),
            labels.len()
        )));
    }
    let hits = logits
        .chunks(cols)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Recall@K in both retrieval directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    /// Rows as queries (image→text).
    pub row_to_col: f64,
    /// Columns as queries (text→image).
    pub col_to_row: f64,
}

impl Recall {
    pub fn mean(&self) -> f64 {
        0.5 * (self.row_to_col + self.col_to_row)
    }
}

/// Rank of the true candidate `i` among `scores`: candidates scoring
/// higher, plus equal-scoring candidates with a lower index.
fn rank_of(scores: impl Iterator<Item = f64>, i: usize, own: f64) -> usize {
    scores
        .enumerate()
        .filter(|&(j, s)| s > own || (s == own && j < i))
        .count()
}

/// Recall@`k` on an `n × n` similarity matrix whose diagonal holds the
/// true pairs.
pub fn recall_at_k(sim: &[f64], n: usize, k: usize) -> Result<Recall> {
    if n == 0 {
        return Err(Error::Metric("recall of an empty evaluation set".into()));
    }
    if sim.len() != n * n {
        return Err(Error::Metric(format!("{} scores do not form a {n}×{n} matrix", sim.len())));
    }
    if k == 0 || k > n {
        return Err(Error::Metric(format!("k = {k} outside 1..={n}")));
    }
    let mut rows = 0;
    let mut cols = 0;
    for i in 0..n {
        let own = sim[i * n + i];
        if rank_of((0..n).map(|j| sim[i * n + j]), i, own) < k {
            rows += 1;
        }
        if rank_of((0..n).map(|j| sim[j * n + i]), i, own) < k {
            cols += 1;
        }
    }
    Ok(Recall {
        row_to_col: rows as f64 / n as f64,
        col_to_row: cols as f64 / n as f64,
    })
}

/// First round whose metric reaches `fraction` of the curve's peak.
pub fn rounds_to_fraction_of_peak(curve: &[(u32, f64)], fraction: f64) -> Result<u32> {
    let peak = curve
        .iter()
        .map(|&(_, v)| v)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or_else(|| Error::Metric("convergence of an empty curve".into()))?;
    let target = fraction * peak;
    Ok(curve
        .iter()
        .find(|&&(_, v)| v >= target)
        .map(|&(r, _)| r)
        .expect("the peak itself reaches the target"))
}

/// Keeps the points of a per-round curve that fall on epoch boundaries and
/// relabels them by epoch, so curves from methods with different rounds per
/// epoch share one axis.
pub fn epoch_curve(curve: &[(u32, f64)], rounds_per_epoch: u32) -> Result<Vec<(u32, f64)>> {
    if rounds_per_epoch == 0 {
        return Err(Error::Metric("rounds per epoch must be positive".into()));
    }
    Ok(curve
        .iter()
        .filter(|&&(r, _)| r > 0 && r % rounds_per_epoch == 0)
        .map(|&(r, v)| (r / rounds_per_epoch, v))
        .collect())
}
