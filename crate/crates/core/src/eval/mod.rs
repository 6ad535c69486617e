//! Per-frame average precision, causal streaming evaluation and the ablation grid.

mod ablation;
mod ap;
mod streaming;

use std::fmt::Write as _;

pub use ablation::{
    ablation_suite, median, run_cell, worker_threads, AblationBase, AblationCell, AblationRow,
    AblationTable, CellSummary, DEFAULT_HORIZONS, THREADS_ENV,
};
pub use ap::{average_precision, evaluate, EvalReport, ScoreTable};
pub use streaming::{
    stream_video, streaming_eval, OracleModel, StepContext, StreamingConfig, StreamingPredictor,
    StreamingResult, VideoScores,
};

/// Text table: one row per report, per-class AP columns, values in percent.
pub fn render_reports(reports: &[EvalReport], class_names: &[String]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<8} {:>7} {:>7}", "task", "frames", "mAP");
    for name in class_names {
        let _ = write!(out, " {:>8}", truncate(name, 8));
    }
    out.push('\n');
    for r in reports {
        let task = if r.horizon == 0 {
            "OAD".to_string()
        } else {
            format!("AA@{}", r.horizon)
        };
        let _ = write!(
            out,
            "{:<8} {:>7} {:>7.2}",
            task,
            r.num_frames_evaluated,
            100.0 * r.map
        );
        for ap in &r.per_class_ap {
            match ap {
                Some(v) => {
                    let _ = write!(out, " {:>8.2}", 100.0 * v);
                }
                None => {
                    let _ = write!(out, " {:>8}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

fn truncate(s: &str, n: usize) -> &str {
    s.char_indices().nth(n).map_or(s, |(i, _)| &s[..i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_table_layout() {
        let reports = [
            EvalReport {
                per_class_ap: vec![Some(0.5), None],
                map: 0.5,
                horizon: 0,
                num_frames_evaluated: 10,
            },
            EvalReport {
                per_class_ap: vec![Some(0.25), Some(1.0)],
                map: 0.625,
                horizon: 2,
                num_frames_evaluated: 8,
            },
        ];
        let text = render_reports(&reports, &["walking_quickly".into(), "b".into()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("walking_"));
        assert!(
            lines[1].starts_with("OAD") && lines[1].contains("50.00") && lines[1].ends_with('-')
        );
        assert!(lines[2].starts_with("AA@2") && lines[2].contains("62.50"));
    }
}
