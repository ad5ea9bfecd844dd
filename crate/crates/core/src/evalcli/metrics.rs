use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{softmax_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    T2v,
    V2t,
}

/// Recall at 1, 5 and 10, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    #[serde(rename = "1")]
    pub r1: f64,
    #[serde(rename = "5")]
    pub r5: f64,
    #[serde(rename = "10")]
    pub r10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r_at: RecallAt,
    pub mdr: f64,
    pub mnr: f64,
    /// `R@1 + R@5 + R@10` of this direction.
    pub rsum: f64,
    pub dsl_applied: bool,
    /// One-based rank of the true match for every query.
    pub ranks: Vec<usize>,
}

fn check_square(s: &Tensor) -> Result<usize> {
    if s.ndim() != 2 || s.shape()[0] != s.shape()[1] {
        bail!(Contract, "similarity matrix must be square, got {:?}", s.shape());
    }
    Ok(s.shape()[0])
}

/// Rank of the diagonal entry in each row. Ties count against the query.
pub fn ranks(s: &Tensor) -> Result<Vec<usize>> {
    let b = check_square(s)?;
    let d = s.data();
    Ok((0..b).map(|i| 1 + (0..b).filter(|&j| j != i && d[i * b + j] >= d[i * b + i]).count()).collect())
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Metrics with rows as queries and the diagonal as ground truth.
pub fn rank_metrics(s: &Tensor, direction: Direction, dsl_applied: bool) -> Result<RetrievalReport> {
    let r = ranks(s)?;
    let n = r.len() as f64;
    let recall = |k: usize| 100.0 * r.iter().filter(|&&x| x <= k).count() as f64 / n;
    let r_at = RecallAt { r1: recall(1), r5: recall(5), r10: recall(10) };
    let mut sorted = r.clone();
    sorted.sort_unstable();
    Ok(RetrievalReport {
        direction,
        r_at,
        mdr: median(&sorted),
        mnr: r.iter().sum::<usize>() as f64 / n,
        rsum: r_at.r1 + r_at.r5 + r_at.r10,
        dsl_applied,
        ranks: r,
    })
}

/// Default DSL temperature: 1% of the largest absolute score.
pub fn default_dsl_tau(s: &Tensor) -> f64 {
    let scale = s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale > 0.0 {
        0.01 * scale
    } else {
        0.01
    }
}

/// `S'_ij = S_ij * softmax_i(S_ij / tau)`: each column reweighted by how
/// strongly it is claimed across all queries.
pub fn dsl_adjust(s: &Tensor, tau: f64) -> Result<Tensor> {
    let b = check_square(s)?;
    if !(tau > 0.0 && tau.is_finite()) {
        bail!(Config, "DSL temperature must be positive, got {tau}");
    }
    let mut out = s.data().to_vec();
    let mut col = vec![0.0; b];
    let mut prior = vec![0.0; b];
    for j in 0..b {
        for i in 0..b {
            col[i] = s.data()[i * b + j] / tau;
        }
        softmax_into(&col, &mut prior);
        for i in 0..b {
            out[i * b + j] *= prior[i];
        }
    }
    Tensor::new([b, b], out)
}

pub fn transpose(s: &Tensor) -> Result<Tensor> {
    let b = check_square(s)?;
    Tensor::from_fn([b, b], |k| s.data()[(k % b) * b + k / b])
}

/// Mean of the largest and of the smallest `ceil(0.3 n)` weights.
pub fn top_bottom_means(w: &[f64]) -> (f64, f64) {
    if w.is_empty() {
        return (0.0, 0.0);
    }
    let k = ((3 * w.len()).div_ceil(10)).max(1);
    let mut s = w.to_vec();
    s.sort_by(f64::total_cmp);
    let bot = s[..k].iter().sum::<f64>() / k as f64;
    let top = s[s.len() - k..].iter().sum::<f64>() / k as f64;
    (top, bot)
}

/// One `attention.csv` row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub step: u64,
    pub top30: f64,
    pub bot30: f64,
}

/// Top/bottom 30% means averaged over a batch of CLS weight vectors.
pub fn attention_row(step: u64, batch: &[Vec<f64>]) -> AttentionRow {
    let n = batch.len().max(1) as f64;
    let (t, b) = batch.iter().map(|w| top_bottom_means(w)).fold((0.0, 0.0), |a, x| (a.0 + x.0, a.1 + x.1));
    AttentionRow { step, top30: t / n, bot30: b / n }
}

/// One row per step of a weight trace.
pub fn attention_stats(trace: &[(u64, Vec<Vec<f64>>)]) -> Vec<AttentionRow> {
    trace.iter().map(|(step, ws)| attention_row(*step, ws)).collect()
}
