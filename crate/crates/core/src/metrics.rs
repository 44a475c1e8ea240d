//! Metrics CSV schema and the run summary.
//!
//! Floats are written with Rust's shortest round-trip formatting, so the file
//! is byte-stable across reruns and exactly recomputable by external tools.
//! Participant ids are joined with `;` inside one column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundMetrics;

/// Column order of `metrics.csv`. Every `RoundMetrics` field appears once.
pub const METRICS_HEADER: &str = "round,test_accuracy,pseudo_label_accuracy_anchor_head,\
pseudo_label_accuracy_anchor_head_qualified,pseudo_label_accuracy_classification_head,\
avg_qualified_samples,server_supervised_loss,server_contrastive_loss,overhead_percent,\
downstream_scalars,upstream_scalars,participants";

/// One CSV line (no trailing newline) for a round.
pub fn metrics_row(m: &RoundMetrics) -> String {
    let participants = m
        .participants
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";");
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        m.round,
        m.test_accuracy,
        m.pseudo_label_accuracy_anchor_head,
        m.pseudo_label_accuracy_anchor_head_qualified,
        m.pseudo_label_accuracy_classification_head,
        m.avg_qualified_samples,
        m.server_supervised_loss,
        m.server_contrastive_loss,
        m.overhead_percent,
        m.downstream_scalars,
        m.upstream_scalars,
        participants
    )
}

/// Parses one line produced by [`metrics_row`].
pub fn parse_metrics_row(line: &str) -> Result<RoundMetrics> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 12 {
        return Err(Error::ConfigParse(format!(
            "metrics row has {} fields, expected 12: {line:?}",
            fields.len()
        )));
    }
    let float = |i: usize| -> Result<f64> {
        fields[i]
            .parse()
            .map_err(|_| Error::ConfigParse(format!("bad float in metrics column {i}: {:?}", fields[i])))
    };
    let int = |i: usize| -> Result<u64> {
        fields[i]
            .parse()
            .map_err(|_| Error::ConfigParse(format!("bad integer in metrics column {i}: {:?}", fields[i])))
    };
    let participants = if fields[11].is_empty() {
        Vec::new()
    } else {
        fields[11]
            .split(';')
            .map(|s| {
                s.parse::<usize>().map_err(|_| {
                    Error::ConfigParse(format!("bad participant id: {s:?}"))
                })
            })
            .collect::<Result<Vec<usize>>>()?
    };
    Ok(RoundMetrics {
        round: int(0)? as usize,
        test_accuracy: float(1)?,
        pseudo_label_accuracy_anchor_head: float(2)?,
        pseudo_label_accuracy_anchor_head_qualified: float(3)?,
        pseudo_label_accuracy_classification_head: float(4)?,
        avg_qualified_samples: float(5)?,
        server_supervised_loss: float(6)?,
        server_contrastive_loss: float(7)?,
        overhead_percent: float(8)?,
        downstream_scalars: int(9)?,
        upstream_scalars: int(10)?,
        participants,
    })
}

/// End-of-run summary; every numeric total is a column-wise reduction of
/// `metrics.csv` except the wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub rounds_completed: usize,
    pub final_test_accuracy: f64,
    pub best_test_accuracy: f64,
    pub best_round: usize,
    pub mean_pseudo_label_accuracy_anchor_head: f64,
    pub mean_pseudo_label_accuracy_classification_head: f64,
    pub mean_qualified_samples: f64,
    pub total_downstream_scalars: u64,
    pub total_upstream_scalars: u64,
    pub wall_time_seconds: f64,
}

/// Reduces the per-round rows into the summary.
pub fn summarize(
    rows: &[RoundMetrics],
    method: &str,
    seed: u64,
    wall_time_seconds: f64,
) -> RunSummary {
    let finite_mean = |f: &dyn Fn(&RoundMetrics) -> f64| -> f64 {
        let values: Vec<f64> = rows.iter().map(f).filter(|v| v.is_finite()).collect();
        if values.is_empty() {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    };
    let (best_round, best_test_accuracy) = rows
        .iter()
        .map(|m| (m.round, m.test_accuracy))
        .fold((0, f64::NEG_INFINITY), |(br, bv), (r, v)| {
            if v > bv {
                (r, v)
            } else {
                (br, bv)
            }
        });
    RunSummary {
        method: method.to_string(),
        seed,
        rounds_completed: rows.len(),
        final_test_accuracy: rows.last().map_or(f64::NAN, |m| m.test_accuracy),
        best_test_accuracy,
        best_round,
        mean_pseudo_label_accuracy_anchor_head: finite_mean(&|m| {
            m.pseudo_label_accuracy_anchor_head
        }),
        mean_pseudo_label_accuracy_classification_head: finite_mean(&|m| {
            m.pseudo_label_accuracy_classification_head
        }),
        mean_qualified_samples: finite_mean(&|m| m.avg_qualified_samples),
        total_downstream_scalars: rows.iter().map(|m| m.downstream_scalars).sum(),
        total_upstream_scalars: rows.iter().map(|m| m.upstream_scalars).sum(),
        wall_time_seconds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row(round: usize) -> RoundMetrics {
        RoundMetrics {
            round,
            test_accuracy: 0.875,
            pseudo_label_accuracy_anchor_head: 0.9123456789012345,
            pseudo_label_accuracy_anchor_head_qualified: f64::NAN,
            pseudo_label_accuracy_classification_head: 0.5,
            avg_qualified_samples: 12.25,
            server_supervised_loss: 0.031249999999999997,
            server_contrastive_loss: f64::NAN,
            overhead_percent: 3.5,
            downstream_scalars: ets(round),
            upstream_scalars: 991,
            participants: vec![3, 7, 11],
        }
    }

    fn ets(round: usize) -> u64 {
        1000 + round as u64
    }

    #[test]
    fn header_and_rows_have_matching_field_counts() {
        let header_fields = METRICS_HEADER.split(',').count();
        let row = metrics_row(&sample_row(1));
        assert_eq!(row.split(',').count(), header_fields);
        assert_eq!(header_fields, 12);
    }

    #[test]
    fn rows_roundtrip_exactly_including_nan_markers() {
        let row = sample_row(4);
        let parsed = parse_metrics_row(&metrics_row(&row)).unwrap();
        assert_eq!(parsed.round, 4);
        assert_eq!(parsed.test_accuracy, row.test_accuracy);
        assert_eq!(
            parsed.pseudo_label_accuracy_anchor_head,
            row.pseudo_label_accuracy_anchor_head
        );
        assert!(parsed.server_contrastive_loss.is_nan());
        assert!(parsed.pseudo_label_accuracy_anchor_head_qualified.is_nan());
        assert_eq!(parsed.server_supervised_loss, row.server_supervised_loss);
        assert_eq!(parsed.participants, row.participants);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(parse_metrics_row("1,2,3").is_err());
        let mut row = metrics_row(&sample_row(1));
        row = row.replace("0.875", "zero");
        assert!(parse_metrics_row(&row).is_err());
    }

    #[test]
    fn summary_reduces_the_columns() {
        let mut rows: Vec<RoundMetrics> = (1..=5).map(sample_row).collect();
        rows[2].test_accuracy = 0.95;
        rows[4].test_accuracy = 0.11;
        let summary = summarize(&rows, "fedanchor", 9, 1.5);
        assert_eq!(summary.rounds_completed, 5);
        assert_eq!(summary.final_test_accuracy, 0.11);
        assert_eq!(summary.best_test_accuracy, 0.95);
        assert_eq!(summary.best_round, 3);
        assert_eq!(
            summary.total_downstream_scalars,
            (1..=5).map(ets).sum::<u64>()
        );
        assert_eq!(summary.total_upstream_scalars, 5 * 991);
        // NaN columns stay out of the means.
        assert_eq!(summary.mean_pseudo_label_accuracy_classification_head, 0.5);
    }
}
