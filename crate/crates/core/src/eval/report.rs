//! Plain-text result tables and SVG loss curves.

use std::fmt::Write as _;

use super::experiment::{ExperimentReport, FoldReport};
use super::metrics::Confusion;
use crate::labels::NUM_CLASSES;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["Very Neg.", "Neg.", "Neu.", "Pos.", "Very Pos."];

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// One row per model: 5-class and 3-class accuracy and correlation,
/// averaged over folds.
pub fn metrics_table(reports: &[ExperimentReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>10} {:>10} {:>20}", "", "Accuracy", "Accuracy", "Pearson Correlation");
    let _ = writeln!(s, "{:<16} {:>10} {:>10} {:>20}", "Model", "(5 class)", "(3 class)", "(rho value)");
    let _ = writeln!(s, "{}", "=".repeat(59));
    for r in reports {
        let (a5, a3, rho) = match &r.aggregate {
            Some(a) => (pct(a.acc5), pct(a.acc3), a.rho.map_or("n/a".to_string(), |v| format!("{v:.4}"))),
            None => ("n/a".into(), "n/a".into(), "n/a".into()),
        };
        let _ = writeln!(s, "{:<16} {:>10} {:>10} {:>20}", r.model.name(), a5, a3, rho);
    }
    let _ = writeln!(s, "{}", "-".repeat(59));
    s
}

/// Mean of the fold matrices, row by row over folds where the row is populated.
pub fn mean_confusion(folds: &[FoldReport]) -> Confusion {
    let mut rows = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    let mut empty_rows = Vec::new();
    for (i, row) in rows.iter_mut().enumerate() {
        let used: Vec<&[f64; NUM_CLASSES]> = folds
            .iter()
            .filter(|f| !f.scores.confusion5.empty_rows.contains(&i))
            .map(|f| &f.scores.confusion5.rows[i])
            .collect();
        if used.is_empty() {
            empty_rows.push(i);
            continue;
        }
        for r in &used {
            for (dst, v) in row.iter_mut().zip(r.iter()) {
                *dst += v / used.len() as f64;
            }
        }
    }
    Confusion { rows, empty_rows }
}

/// Rows are actual classes, columns predictions.
pub fn confusion_table(title: &str, c: &Confusion) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title} (rows: actual, columns: predicted)");
    let _ = write!(s, "{:<10}", "");
    for name in CLASS_NAMES {
        let _ = write!(s, " {name:>10}");
    }
    let _ = writeln!(s);
    for (i, row) in c.rows.iter().enumerate() {
        let _ = write!(s, "{:<10}", CLASS_NAMES[i]);
        for v in row {
            let _ = write!(s, " {v:>10.4}");
        }
        if c.empty_rows.contains(&i) {
            let _ = write!(s, "  (no samples)");
        }
        let _ = writeln!(s);
    }
    s
}

/// Per-fold detail lines.
pub fn fold_table(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} folds", r.model.name());
    let _ = writeln!(
        s,
        "{:>4} {:<8} {:<10} {:>9} {:>9} {:>8} {:>5} {:>5} {:>6}",
        "fold", "session", "test", "acc5", "acc3", "rho", "best", "stop", "faults"
    );
    for f in &r.folds {
        let rho = f.scores.rho.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            s,
            "{:>4} {:<8} {:<10} {:>9} {:>9} {:>8} {:>5} {:>5} {:>6}",
            f.fold,
            f.held_out_session,
            f.test_speaker,
            pct(f.scores.acc5),
            pct(f.scores.acc3),
            rho,
            f.best_epoch,
            f.stop_epoch,
            f.numeric_faults
        );
    }
    if let Some(e) = &r.failure {
        let _ = writeln!(s, "incomplete: {e}");
    }
    s
}

/// Metrics table, then per-model fold detail and mean confusion matrix.
pub fn render(reports: &[ExperimentReport]) -> String {
    let mut s = metrics_table(reports);
    for r in reports {
        s.push('\n');
        s.push_str(&fold_table(r));
        s.push('\n');
        let title = format!("Confusion matrix, {}", r.model.name());
        s.push_str(&confusion_table(&title, &mean_confusion(&r.folds)));
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Per-epoch mean losses and validation accuracy of one fold.
pub fn loss_curve_svg(title: &str, fold: &FoldReport) -> String {
    let epochs: Vec<f64> = fold.epochs.iter().map(|e| e.epoch as f64).collect();
    let series: Vec<(&str, Vec<Option<f64>>)> = vec![
        ("l_val", fold.epochs.iter().map(|e| Some(e.l_val)).collect()),
        ("l_act", fold.epochs.iter().map(|e| e.l_act).collect()),
        ("l_d", fold.epochs.iter().map(|e| e.l_d).collect()),
        ("l_g", fold.epochs.iter().map(|e| e.l_g).collect()),
        ("val acc5", fold.validation_trace.iter().map(|&a| Some(a)).collect()),
    ];
    let values = series.iter().flat_map(|(_, v)| v.iter().flatten().copied()).filter(|v| v.is_finite());
    let y_max = values.fold(1.0f64, f64::max);
    let x_max = epochs.last().copied().unwrap_or(1.0).max(2.0);
    let px = |x: f64| PAD + (x - 1.0) / (x_max - 1.0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - y / y_max * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{title}</text>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">epoch {x_max}</text>"#, W - PAD - 40.0, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="4" y="{}" font-family="sans-serif" font-size="11">{y_max:.2}</text>"#, PAD + 4.0);
    let mut legend = 0;
    for (i, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = epochs
            .iter()
            .zip(ys)
            .filter_map(|(&x, y)| y.filter(|v| v.is_finite()).map(|y| format!("{:.1},{:.1}", px(x), py(y))))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#, pts.join(" "), COLORS[i]);
        let ly = PAD + 14.0 * legend as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{}">{name}</text>"#,
            W - PAD - 60.0,
            COLORS[i]
        );
        legend += 1;
    }
    s.push_str("</svg>\n");
    s
}

/// `(file name, svg)` for every fold of a report.
pub fn loss_curves(r: &ExperimentReport) -> Vec<(String, String)> {
    r.folds
        .iter()
        .map(|f| {
            let title = format!("{} fold {}", r.model.name(), f.fold);
            (format!("{}_fold{}_losses.svg", r.model.name(), f.fold), loss_curve_svg(&title, f))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::eval::experiment::{score_predictions, Aggregate};
    use crate::labels::FuzzyLabel;
    use crate::model::ModelKind;
    use crate::train::EpochSummary;

    fn perfect_fold(fold: usize) -> FoldReport {
        let targets: Vec<_> = (0..10).map(|i| FuzzyLabel::one_hot(i % 5 + 1)).collect();
        let preds: Vec<_> = targets.iter().map(|t| *t.probs()).collect();
        FoldReport {
            fold,
            held_out_session: format!("Ses{fold:02}"),
            validation_speaker: "a".into(),
            test_speaker: "b".into(),
            train_clips: 10,
            unlabeled_pool: 0,
            test_clips: 10,
            scores: score_predictions(&preds, &targets).unwrap(),
            best_epoch: 2,
            stop_epoch: 7,
            converged: true,
            validation_trace: vec![0.5, 1.0, 0.9],
            epochs: (1..=3)
                .map(|e| EpochSummary {
                    epoch: e,
                    steps: 1,
                    faults: 0,
                    l_d: None,
                    l_g: None,
                    l_val: 1.0 / e as f64,
                    l_act: None,
                    fake_score: None,
                })
                .collect(),
            steps: 3,
            numeric_faults: 0,
        }
    }

    fn report() -> ExperimentReport {
        let folds = vec![perfect_fold(1), perfect_fold(2)];
        ExperimentReport {
            model: ModelKind::BasicCnn,
            config: RunConfig::desk(ModelKind::BasicCnn, "m.jsonl"),
            build: "test".into(),
            aggregate: Aggregate::of(&folds),
            folds,
            failure: None,
        }
    }

    #[test]
    fn perfect_predictions_print_full_accuracy() {
        let text = render(&[report()]);
        let row = text.lines().find(|l| l.starts_with("BasicCNN")).unwrap();
        assert!(row.contains("100.00%"), "{row}");
        assert!(row.contains("1.0000"), "{row}");
    }

    #[test]
    fn confusion_rows_sum_to_one() {
        let c = mean_confusion(&report().folds);
        for row in c.rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-3);
        }
        let table = confusion_table("t", &c);
        assert_eq!(table.lines().count(), 7);
        assert!(table.contains("Very Pos."));
    }

    #[test]
    fn loss_curves_are_svg() {
        let curves = loss_curves(&report());
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[0].0, "BasicCNN_fold1_losses.svg");
        assert!(curves[0].1.starts_with("<svg") && curves[0].1.trim_end().ends_with("</svg>"));
        assert_eq!(curves[0].1.matches("<polyline").count(), 2);
    }
}
