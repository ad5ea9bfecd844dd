//! Retrieval metrics, DSL reweighting, attention statistics, reports and
//! the model-level gradient check.

mod gradcheck;
mod metrics;
mod svg;

use serde::{Deserialize, Serialize};

pub use gradcheck::{model_gradcheck, ModelGradCheck, TensorCheck};
pub use metrics::{
    attention_row, attention_stats, default_dsl_tau, dsl_adjust, rank_metrics, ranks, top_bottom_means, transpose,
    AttentionRow, Direction, RecallAt, RetrievalReport,
};
pub use svg::{heatmap, line_chart, Series};

use crate::colearning::similarity_matrix;
use crate::data::{json_hash, Dataset};
use crate::encoders::ModelParams;
use crate::error::Result;

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub dataset_hash: String,
    pub t2v: RetrievalReport,
    pub v2t: RetrievalReport,
    pub t2v_dsl: RetrievalReport,
    pub v2t_dsl: RetrievalReport,
}

impl EvalReport {
    /// Sum of the six recalls without DSL.
    pub fn rsum(&self) -> f64 {
        self.t2v.rsum + self.v2t.rsum
    }

    pub fn rsum_dsl(&self) -> f64 {
        self.t2v_dsl.rsum + self.v2t_dsl.rsum
    }
}

/// Both directions, with and without DSL, from a text-to-video matrix.
/// `tau_dsl` of `None` uses [`default_dsl_tau`] per direction.
pub fn reports_from_similarity(s: &crate::numerics::Tensor, tau_dsl: Option<f64>) -> Result<[RetrievalReport; 4]> {
    let st = transpose(s)?;
    let dsl = |m: &crate::numerics::Tensor| dsl_adjust(m, tau_dsl.unwrap_or_else(|| default_dsl_tau(m)));
    Ok([
        rank_metrics(s, Direction::T2v, false)?,
        rank_metrics(&st, Direction::V2t, false)?,
        rank_metrics(&dsl(s)?, Direction::T2v, true)?,
        rank_metrics(&dsl(&st)?, Direction::V2t, true)?,
    ])
}

/// Scores the whole dataset in one batch.
pub fn evaluate<C: Serialize>(
    params: &ModelParams,
    config: &C,
    data: &Dataset,
    tau_dsl: Option<f64>,
) -> Result<EvalReport> {
    let s = similarity_matrix(params, &data.all()?)?;
    let [t2v, v2t, t2v_dsl, v2t_dsl] = reports_from_similarity(&s, tau_dsl)?;
    Ok(EvalReport { config_hash: json_hash(config)?, dataset_hash: data.hash()?, t2v, v2t, t2v_dsl, v2t_dsl })
}
