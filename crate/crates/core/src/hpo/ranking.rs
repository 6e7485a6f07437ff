//! Friedman test and Nemenyi critical-difference ranking across tasks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("need at least 2 methods and 2 tasks, got {methods} x {tasks}")]
    TooFewSamples { methods: usize, tasks: usize },
    #[error("ragged objective matrix at task {task}")]
    RaggedMatrix { task: usize },
    #[error("no studentized-range value tabulated for alpha={alpha}, k={k}")]
    UnsupportedAlpha { alpha: f64, k: usize },
}

/// Nemenyi q values (infinite df, already divided by sqrt(2)) for
/// k = 2..=10 methods.
const Q_ALPHA_05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
const Q_ALPHA_10: [f64; 9] = [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920];

fn q_alpha(alpha: f64, k: usize) -> Option<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_ALPHA_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_ALPHA_10
    } else {
        return None;
    };
    if (2..=10).contains(&k) {
        Some(table[k - 2])
    } else {
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdReport {
    pub methods: Vec<String>,
    /// Mean rank per method (1 is best), averaged over tasks.
    pub mean_ranks: Vec<f64>,
    pub n_tasks: usize,
    pub alpha: f64,
    pub critical_difference: f64,
    pub friedman_chi2: f64,
    pub friedman_p: f64,
    /// Maximal groups of method indices whose mean ranks lie within one
    /// critical difference (the bars of a CD diagram).
    pub groups: Vec<Vec<usize>>,
}

/// Average rank of each entry (1-based; ties share the mean rank).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Rank methods per task (lower objective is better), average the ranks,
/// and report the Friedman statistic and Nemenyi critical difference.
///
/// `objectives[task][method]` is the final test objective of the method's
/// incumbent on that task.
pub fn rank_and_cd(
    methods: &[String],
    objectives: &[Vec<f64>],
    alpha: f64,
) -> Result<CdReport, RankError> {
    let k = methods.len();
    let n = objectives.len();
    if k < 2 || n < 2 {
        return Err(RankError::TooFewSamples { methods: k, tasks: n });
    }
    for (task, row) in objectives.iter().enumerate() {
        if row.len() != k {
            return Err(RankError::RaggedMatrix { task });
        }
    }
    let q = q_alpha(alpha, k).ok_or(RankError::UnsupportedAlpha { alpha, k })?;

    let mut mean_ranks = vec![0.0; k];
    for row in objectives {
        for (j, r) in average_ranks(row).into_iter().enumerate() {
            mean_ranks[j] += r;
        }
    }
    for r in &mut mean_ranks {
        *r /= n as f64;
    }

    let kf = k as f64;
    let nf = n as f64;
    let sum_sq: f64 = mean_ranks.iter().map(|r| r * r).sum();
    let friedman_chi2 = 12.0 * nf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0) * (kf + 1.0) / 4.0);
    let chi = ChiSquared::new(kf - 1.0).expect("k >= 2");
    let friedman_p = 1.0 - chi.cdf(friedman_chi2.max(0.0));

    let critical_difference = q * (kf * (kf + 1.0) / (6.0 * nf)).sqrt();

    // CD-diagram bars: maximal runs of rank-sorted methods spanning < CD.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mean_ranks[a].partial_cmp(&mean_ranks[b]).unwrap());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..k {
        let mut group = vec![order[i]];
        for &j in order.iter().skip(i + 1) {
            if mean_ranks[j] - mean_ranks[order[i]] < critical_difference {
                group.push(j);
            } else {
                break;
            }
        }
        let covered = groups.iter().any(|g| group.iter().all(|m| g.contains(m)));
        if group.len() > 1 && !covered {
            groups.push(group);
        }
    }

    Ok(CdReport {
        methods: methods.to_vec(),
        mean_ranks,
        n_tasks: n,
        alpha,
        critical_difference,
        friedman_chi2,
        friedman_p,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn dominant_method_gets_rank_one() {
        let objectives: Vec<Vec<f64>> = (0..10).map(|t| vec![0.1 + t as f64, 0.5 + t as f64]).collect();
        let report = rank_and_cd(&names(2), &objectives, 0.05).unwrap();
        assert_eq!(report.mean_ranks, vec![1.0, 2.0]);
    }

    #[test]
    fn identical_objectives_tie_at_midrank() {
        let objectives: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0, 1.0, 1.0, 1.0]).collect();
        let report = rank_and_cd(&names(4), &objectives, 0.05).unwrap();
        for r in report.mean_ranks {
            assert!((r - 2.5).abs() < 1e-12);
        }
        assert!(report.friedman_chi2.abs() < 1e-9);
    }

    #[test]
    fn nemenyi_cd_for_four_methods_on_twenty_tasks() {
        let objectives: Vec<Vec<f64>> =
            (0..20).map(|t| vec![0.1, 0.2, 0.3, 0.4 + (t % 3) as f64 * 0.01]).collect();
        let report = rank_and_cd(&names(4), &objectives, 0.05).unwrap();
        assert!((report.critical_difference - 1.048).abs() < 1e-3, "cd {}", report.critical_difference);
    }

    #[test]
    fn average_ranks_handle_ties() {
        assert_eq!(average_ranks(&[1.0, 1.0, 3.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[5.0, 1.0, 3.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn unsupported_alpha_is_rejected() {
        let objectives: Vec<Vec<f64>> = (0..3).map(|_| vec![1.0, 2.0]).collect();
        assert!(matches!(
            rank_and_cd(&names(2), &objectives, 0.01),
            Err(RankError::UnsupportedAlpha { .. })
        ));
    }
}
