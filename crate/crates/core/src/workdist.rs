//! Work distributions: branch lists with extended-real values.
//!
//! A distribution either carries explicit branches or, past the branch cap,
//! collapses to summary statistics (mean, variance, worst case). Convolution
//! models independent composition across protocol steps.

use crate::system::{ext_to_json, ExtRealJson};
use serde::{Deserialize, Serialize};

/// Branches with |count| beyond this collapse into `Summary`.
pub const BRANCH_CAP: usize = 1_000_000;

/// Branch values closer than this merge during normalization.
pub const MERGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkBranch {
    pub prob: f64,
    /// Work value, gain-positive; may be -inf (unbounded cost branch).
    pub work: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkSummary {
    pub mean: f64,
    pub variance: f64,
    pub worst_case: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkDistribution {
    Branches(Vec<WorkBranch>),
    Summary(WorkSummary),
}

impl WorkDistribution {
    /// The zero-work distribution.
    pub fn unit() -> Self {
        WorkDistribution::Branches(vec![WorkBranch { prob: 1.0, work: 0.0 }])
    }

    /// Sorts by value, merges branches within `MERGE_TOL`, drops zero-probability
    /// branches.
    pub fn from_branches(mut branches: Vec<WorkBranch>) -> Self {
        branches.retain(|b| b.prob > 0.0);
        branches.sort_by(|a, b| a.work.partial_cmp(&b.work).unwrap());
        let mut merged: Vec<WorkBranch> = Vec::with_capacity(branches.len());
        for b in branches {
            match merged.last_mut() {
                Some(last)
                    if (last.work - b.work).abs() <= MERGE_TOL
                        || (last.work == b.work) /* covers ±inf */ =>
                {
                    last.prob += b.prob;
                }
                _ => merged.push(b),
            }
        }
        if merged.is_empty() {
            return WorkDistribution::unit();
        }
        WorkDistribution::Branches(merged)
    }

    pub fn branches(&self) -> Option<&[WorkBranch]> {
        match self {
            WorkDistribution::Branches(b) => Some(b),
            WorkDistribution::Summary(_) => None,
        }
    }

    /// Minimum work value over branches with positive probability.
    pub fn worst_case(&self) -> f64 {
        match self {
            WorkDistribution::Branches(b) => b
                .iter()
                .filter(|br| br.prob > 0.0)
                .map(|br| br.work)
                .fold(f64::INFINITY, f64::min),
            WorkDistribution::Summary(s) => s.worst_case,
        }
    }

    /// Mean over finite branches, conditioned on finiteness.
    pub fn mean(&self) -> f64 {
        match self {
            WorkDistribution::Branches(b) => {
                let (mut num, mut den) = (0.0, 0.0);
                for br in b.iter().filter(|br| br.work.is_finite()) {
                    num += br.prob * br.work;
                    den += br.prob;
                }
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            }
            WorkDistribution::Summary(s) => s.mean,
        }
    }

    /// Variance over finite branches, conditioned on finiteness.
    pub fn variance(&self) -> f64 {
        match self {
            WorkDistribution::Branches(b) => {
                let m = self.mean();
                let (mut num, mut den) = (0.0, 0.0);
                for br in b.iter().filter(|br| br.work.is_finite()) {
                    num += br.prob * (br.work - m) * (br.work - m);
                    den += br.prob;
                }
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            }
            WorkDistribution::Summary(s) => s.variance,
        }
    }

    pub fn to_summary(&self) -> WorkSummary {
        WorkSummary {
            mean: self.mean(),
            variance: self.variance(),
            worst_case: self.worst_case(),
        }
    }

    /// Distribution of the sum of two independent work variables. Falls back
    /// to summary statistics past `BRANCH_CAP` (means and variances add).
    pub fn convolve(&self, other: &WorkDistribution) -> WorkDistribution {
        match (self, other) {
            (WorkDistribution::Branches(a), WorkDistribution::Branches(b)) => {
                if a.len().saturating_mul(b.len()) > BRANCH_CAP {
                    return WorkDistribution::Summary(sum_summaries(
                        self.to_summary(),
                        other.to_summary(),
                    ));
                }
                let mut out = Vec::with_capacity(a.len() * b.len());
                for x in a {
                    for y in b {
                        let work = if x.work == f64::NEG_INFINITY || y.work == f64::NEG_INFINITY {
                            f64::NEG_INFINITY
                        } else {
                            x.work + y.work
                        };
                        out.push(WorkBranch { prob: x.prob * y.prob, work });
                    }
                }
                WorkDistribution::from_branches(out)
            }
            _ => WorkDistribution::Summary(sum_summaries(self.to_summary(), other.to_summary())),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            WorkDistribution::Branches(b) => serde_json::json!({
                "branches": b.iter().map(|br| serde_json::json!({
                    "p": br.prob,
                    "w": serde_json::to_value(ext_to_json(br.work)).unwrap(),
                })).collect::<Vec<_>>(),
                "worst_case": serde_json::to_value(ext_to_json(self.worst_case())).unwrap(),
                "mean": self.mean(),
                "variance": self.variance(),
            }),
            WorkDistribution::Summary(s) => serde_json::json!({
                "summary": {
                    "mean": s.mean,
                    "variance": s.variance,
                    "worst_case": serde_json::to_value(ext_to_json(s.worst_case)).unwrap(),
                }
            }),
        }
    }
}

fn sum_summaries(a: WorkSummary, b: WorkSummary) -> WorkSummary {
    WorkSummary {
        mean: a.mean + b.mean,
        variance: a.variance + b.variance,
        worst_case: a.worst_case + b.worst_case,
    }
}

#[allow(unused)]
fn _ext_real_json_is_linked(_: ExtRealJson) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_and_merge() {
        let d = WorkDistribution::from_branches(vec![
            WorkBranch { prob: 0.5, work: 1.0 },
            WorkBranch { prob: 0.5, work: 1.0 + 1e-14 },
        ]);
        assert_eq!(d.branches().unwrap().len(), 1);
        assert!((d.mean() - 1.0).abs() < 1e-12);
        assert_eq!(WorkDistribution::unit().worst_case(), 0.0);
    }

    #[test]
    fn convolve_adds_independent_branches() {
        let a = WorkDistribution::from_branches(vec![
            WorkBranch { prob: 0.9, work: 0.0 },
            WorkBranch { prob: 0.1, work: -2.0 },
        ]);
        let b = WorkDistribution::from_branches(vec![WorkBranch { prob: 1.0, work: 1.0 }]);
        let c = a.convolve(&b);
        let br = c.branches().unwrap();
        assert_eq!(br.len(), 2);
        assert!((c.worst_case() + 1.0).abs() < 1e-12);
        assert!((c.mean() - (0.9 * 1.0 + 0.1 * -1.0)).abs() < 1e-12);
    }

    #[test]
    fn infinite_branch_handling() {
        let a = WorkDistribution::from_branches(vec![
            WorkBranch { prob: 0.99, work: 0.5 },
            WorkBranch { prob: 0.01, work: f64::NEG_INFINITY },
        ]);
        assert_eq!(a.worst_case(), f64::NEG_INFINITY);
        // conditional-on-finite mean
        assert!((a.mean() - 0.5).abs() < 1e-12);
        let c = a.convolve(&WorkDistribution::unit());
        assert_eq!(c.worst_case(), f64::NEG_INFINITY);
    }

    #[test]
    fn summary_fallback_preserves_moments() {
        let mut d = WorkDistribution::unit();
        let step = WorkDistribution::from_branches(vec![
            WorkBranch { prob: 0.5, work: 1.0 },
            WorkBranch { prob: 0.5, work: -1.0 },
        ]);
        for _ in 0..40 {
            d = d.convolve(&step);
        }
        // 2^40 branches would overflow the cap; moments still add
        match d {
            WorkDistribution::Summary(s) => {
                assert!(s.mean.abs() < 1e-9);
                assert!((s.variance - 40.0).abs() < 1e-6);
                assert!((s.worst_case + 40.0).abs() < 1e-9);
            }
            WorkDistribution::Branches(_) => panic!("expected summary fallback"),
        }
    }
}
