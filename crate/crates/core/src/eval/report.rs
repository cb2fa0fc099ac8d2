//! Deterministic report emission: a Markdown score table with baseline,
//! collaboration, and delta rows, per-item results as JSONL, and one CSV per
//! ablation. Equal inputs produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{
    EvalError, LeaveOneOut, RoundsPoint, RunOutcome, ScalePoint, Variant, SERVER_PARTICIPANT,
};
use crate::canonical;

/// Everything a report can cover. Only `colm` rows are starred; ablation
/// sections appear when the corresponding field is set.
pub struct ReportBundle<'a> {
    pub benchmark: &'a str,
    pub baselines: &'a [RunOutcome],
    pub colm: Option<&'a RunOutcome>,
    pub leave_one_out: Option<&'a LeaveOneOut>,
    pub user_scale: Option<&'a [ScalePoint]>,
    pub rounds: Option<&'a [RoundsPoint]>,
}

#[derive(Serialize)]
struct ItemLine<'a> {
    run_id: &'a str,
    variant: String,
    item_id: &'a str,
    predictions: &'a BTreeMap<String, String>,
    scores: &'a BTreeMap<String, f64>,
}

fn baseline_client(outcome: &RunOutcome) -> Option<&str> {
    match &outcome.variant {
        Variant::Baseline { client } => Some(client.as_str()),
        Variant::Colm => None,
    }
}

fn arrow(delta: f64) -> &'static str {
    if delta > 0.0 {
        "↑"
    } else if delta < 0.0 {
        "↓"
    } else {
        "→"
    }
}

fn render_markdown(bundle: &ReportBundle) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Benchmark report: {}", bundle.benchmark);
    md.push('\n');

    let _ = writeln!(md, "## Runs");
    md.push('\n');
    for outcome in bundle.baselines.iter().chain(bundle.colm) {
        let _ = writeln!(
            md,
            "- `{}` — {} (k={}, rounds={}, early_stop={})",
            outcome.run_id,
            outcome.variant.label(),
            outcome.config.k,
            outcome.config.max_rounds,
            outcome.config.early_stop,
        );
    }
    md.push('\n');

    let _ = writeln!(md, "## Scores");
    md.push('\n');
    let _ = writeln!(
        md,
        "| Participant | {} (raw) | Agg. Score |",
        bundle.benchmark
    );
    let _ = writeln!(md, "|---|---|---|");
    for outcome in bundle.baselines {
        for (participant, aggregate) in &outcome.aggregates {
            let raw = outcome.raw_scores[participant];
            let _ = writeln!(md, "| {participant} | {raw:.2} | {aggregate:.2} |");
        }
    }
    if let Some(colm) = bundle.colm {
        for (participant, aggregate) in &colm.aggregates {
            let raw = colm.raw_scores[participant];
            let _ = writeln!(md, "| {participant}* | {raw:.2} | {aggregate:.2} |");
        }
        for baseline in bundle.baselines {
            let Some(client) = baseline_client(baseline) else {
                continue;
            };
            let (Some(before), Some(after)) =
                (baseline.aggregates.get(client), colm.aggregates.get(client))
            else {
                continue;
            };
            let delta = super::round2(after - before);
            let _ = writeln!(
                md,
                "| Δ {client} | — | {} {:.2} |",
                arrow(delta),
                delta.abs()
            );
        }
        let _ = writeln!(
            md,
            "\nRun score (mean over clients): **{:.2}**",
            colm.run_score
        );
    }

    if let Some(loo) = bundle.leave_one_out {
        md.push('\n');
        let _ = writeln!(md, "## Leave-one-out");
        md.push('\n');
        let _ = writeln!(
            md,
            "Full pool scores {:.2}; each row reruns without one client.",
            loo.full.run_score
        );
        md.push('\n');
        let _ = writeln!(md, "| Removed client | Score | Drop |");
        let _ = writeln!(md, "|---|---|---|");
        for point in &loo.points {
            let drop = loo.drop_for(&point.removed).unwrap_or(0.0);
            let _ = writeln!(
                md,
                "| {} | {:.2} | {:.2} |",
                point.removed, point.outcome.run_score, drop
            );
        }
    }

    if let Some(points) = bundle.user_scale {
        md.push('\n');
        let _ = writeln!(md, "## Expert count");
        md.push('\n');
        let _ = writeln!(md, "| k | Score | Server output |");
        let _ = writeln!(md, "|---|---|---|");
        for point in points {
            let server = point
                .outcome
                .aggregates
                .get(SERVER_PARTICIPANT)
                .copied()
                .unwrap_or(0.0);
            let _ = writeln!(
                md,
                "| {} | {:.2} | {:.2} |",
                point.k, point.outcome.run_score, server
            );
        }
    }

    if let Some(points) = bundle.rounds {
        md.push('\n');
        let _ = writeln!(md, "## Round budget");
        md.push('\n');
        let _ = writeln!(md, "| Rounds | Score |");
        let _ = writeln!(md, "|---|---|");
        for point in points {
            let _ = writeln!(md, "| {} | {:.2} |", point.rounds, point.outcome.run_score);
        }
    }

    md
}

fn render_items_jsonl(bundle: &ReportBundle) -> Result<String, EvalError> {
    let mut out = String::new();
    for outcome in bundle.baselines.iter().chain(bundle.colm) {
        for item in &outcome.items {
            let line = ItemLine {
                run_id: &outcome.run_id,
                variant: outcome.variant.label(),
                item_id: &item.item_id,
                predictions: &item.predictions,
                scores: &item.scores,
            };
            out.push_str(&canonical::to_canonical_json(&line)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Write the report files under `root/<run_id>/` and return the paths.
pub fn emit_report(
    root: &Path,
    run_id: &str,
    bundle: &ReportBundle,
) -> Result<Vec<PathBuf>, EvalError> {
    let dir = root.join(run_id);
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();

    let report_path = dir.join("report.md");
    std::fs::write(&report_path, render_markdown(bundle))?;
    written.push(report_path);

    let items_path = dir.join("items.jsonl");
    std::fs::write(&items_path, render_items_jsonl(bundle)?)?;
    written.push(items_path);

    if let Some(loo) = bundle.leave_one_out {
        let mut csv = String::from("removed,score,drop\n");
        for point in &loo.points {
            let _ = writeln!(
                csv,
                "{},{:.2},{:.2}",
                point.removed,
                point.outcome.run_score,
                loo.drop_for(&point.removed).unwrap_or(0.0)
            );
        }
        let path = dir.join("ablation_leave_one_out.csv");
        std::fs::write(&path, csv)?;
        written.push(path);
    }

    if let Some(points) = bundle.user_scale {
        let mut csv = String::from("k,score\n");
        for point in points {
            let _ = writeln!(csv, "{},{:.2}", point.k, point.outcome.run_score);
        }
        let path = dir.join("ablation_user_scale.csv");
        std::fs::write(&path, csv)?;
        written.push(path);
    }

    if let Some(points) = bundle.rounds {
        let mut csv = String::from("rounds,score\n");
        for point in points {
            let _ = writeln!(csv, "{},{:.2}", point.rounds, point.outcome.run_score);
        }
        let path = dir.join("ablation_rounds.csv");
        std::fs::write(&path, csv)?;
        written.push(path);
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::super::{ItemResult, LooPoint};
    use super::*;
    use crate::types::RunConfig;

    fn outcome(variant: Variant, scores: &[(&str, f64)], run_score: f64) -> RunOutcome {
        let aggregates: BTreeMap<String, f64> = scores
            .iter()
            .map(|(name, s)| (name.to_string(), *s))
            .collect();
        let raw_scores: BTreeMap<String, f64> = scores
            .iter()
            .map(|(name, s)| (name.to_string(), *s / 100.0))
            .collect();
        let items = vec![ItemResult {
            item_id: "q-01".to_string(),
            predictions: scores
                .iter()
                .map(|(name, _)| (name.to_string(), "The answer is (A).".to_string()))
                .collect(),
            scores: scores
                .iter()
                .map(|(name, s)| (name.to_string(), if *s > 50.0 { 1.0 } else { 0.0 }))
                .collect(),
        }];
        RunOutcome {
            run_id: format!("run-{}", variant.label().replace(':', "-")),
            benchmark: "toy-mcq".to_string(),
            variant,
            config: RunConfig::default(),
            items,
            raw_scores,
            aggregates,
            run_score,
            usage: BTreeMap::new(),
        }
    }

    fn sample_bundle_parts() -> (Vec<RunOutcome>, RunOutcome, LeaveOneOut) {
        let baselines = vec![
            outcome(
                Variant::Baseline {
                    client: "math".into(),
                },
                &[("math", 33.33)],
                33.33,
            ),
            outcome(
                Variant::Baseline {
                    client: "code".into(),
                },
                &[("code", 33.33)],
                33.33,
            ),
        ];
        let colm = outcome(
            Variant::Colm,
            &[
                ("math", 100.0),
                ("code", 100.0),
                (SERVER_PARTICIPANT, 100.0),
            ],
            100.0,
        );
        let loo = LeaveOneOut {
            full: colm.clone(),
            points: vec![LooPoint {
                removed: "math".to_string(),
                outcome: outcome(Variant::Colm, &[("code", 66.67)], 66.67),
            }],
        };
        (baselines, colm, loo)
    }

    #[test]
    fn the_report_carries_baseline_starred_and_delta_rows() {
        let (baselines, colm, loo) = sample_bundle_parts();
        let scale_points = vec![ScalePoint {
            k: 1,
            outcome: outcome(Variant::Colm, &[("math", 50.0)], 50.0),
        }];
        let rounds_points = vec![RoundsPoint {
            rounds: 0,
            outcome: outcome(Variant::Colm, &[("math", 33.33)], 33.33),
        }];
        let bundle = ReportBundle {
            benchmark: "toy-mcq",
            baselines: &baselines,
            colm: Some(&colm),
            leave_one_out: Some(&loo),
            user_scale: Some(&scale_points),
            rounds: Some(&rounds_points),
        };
        let md = render_markdown(&bundle);
        assert!(md.contains("| math | 0.33 | 33.33 |"));
        assert!(md.contains("| math* | 1.00 | 100.00 |"));
        assert!(md.contains("| server_output* | 1.00 | 100.00 |"));
        assert!(md.contains("| Δ math | — | ↑ 66.67 |"));
        assert!(md.contains("| Δ code | — | ↑ 66.67 |"));
        assert!(md.contains("## Leave-one-out"));
        assert!(md.contains("| math | 66.67 | 33.33 |"));
        assert!(md.contains("## Expert count"));
        assert!(md.contains("## Round budget"));
    }

    #[test]
    fn emission_is_deterministic_and_returns_every_path() {
        let (baselines, colm, loo) = sample_bundle_parts();
        let bundle = ReportBundle {
            benchmark: "toy-mcq",
            baselines: &baselines,
            colm: Some(&colm),
            leave_one_out: Some(&loo),
            user_scale: None,
            rounds: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let first = emit_report(dir.path(), "run-x", &bundle).unwrap();
        assert_eq!(first.len(), 3);
        let bytes_before: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let second = emit_report(dir.path(), "run-x", &bundle).unwrap();
        let bytes_after: Vec<Vec<u8>> = second.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(bytes_before, bytes_after);
        assert!(first[0].ends_with("run-x/report.md"));
        assert!(first[1].ends_with("run-x/items.jsonl"));
        assert!(first[2].ends_with("run-x/ablation_leave_one_out.csv"));
    }

    #[test]
    fn items_jsonl_has_one_canonical_line_per_run_and_item() {
        let (baselines, colm, _) = sample_bundle_parts();
        let bundle = ReportBundle {
            benchmark: "toy-mcq",
            baselines: &baselines,
            colm: Some(&colm),
            leave_one_out: None,
            user_scale: None,
            rounds: None,
        };
        let jsonl = render_items_jsonl(&bundle).unwrap();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with(r#"{"item_id":"q-01","#));
        assert!(lines[2].contains(r#""variant":"colm""#));
    }
}
