use serde::{Deserialize, Serialize};

use super::RunReport;
use crate::election::jaccard;
use crate::error::{Error, Result};
use crate::trace_schema::FrameSet;

/// Aggregate evidence metrics over a set of runs.
///
/// EGS, TI and RR average over schema-valid candidates and are `None` when
/// there are none. Avg K averages `k_used` over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub questions: usize,
    pub candidates: usize,
    pub parsed_candidates: usize,
    /// Mean of `(v + u) / 2`: `v` is the kept share of cited entries, `u` the
    /// Jaccard overlap with the candidate's cluster consensus.
    pub egs: Option<f64>,
    pub ti: Option<f64>,
    pub rr: Option<f64>,
    pub avg_k: f64,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn compute_metrics(reports: &[RunReport]) -> Result<Metrics> {
    if reports.is_empty() {
        return Err(Error::Usage("metrics need at least one run report".into()));
    }
    let empty = FrameSet::new();
    let (mut egs, mut ti, mut rr) = (Vec::new(), Vec::new(), Vec::new());
    let mut candidates = 0;
    for report in reports {
        let election = report.final_election();
        candidates += report.candidates.len();
        for c in report.candidates.iter().filter(|c| c.trace.schema_valid) {
            let kept = c.trace.keyframes.len() as f64;
            let invalid = f64::from(c.trace.invalid_frame_count);
            let v = if kept + invalid == 0.0 { 1.0 } else { kept / (kept + invalid) };
            let consensus = election
                .ranking
                .iter()
                .find(|cl| cl.answer_canon == c.trace.answer_canon)
                .map_or(&empty, |cl| &cl.consensus_keyframes);
            let u = jaccard(&c.trace.keyframes, consensus);
            egs.push((v + u) / 2.0);
            ti.push(c.score.tau);
            rr.push(c.score.repetition());
        }
    }
    let k_total: usize = reports.iter().map(|r| r.k_used).sum();
    Ok(Metrics {
        questions: reports.len(),
        candidates,
        parsed_candidates: egs.len(),
        egs: mean(&egs),
        ti: mean(&ti),
        rr: mean(&rr),
        avg_k: k_total as f64 / reports.len() as f64,
    })
}
