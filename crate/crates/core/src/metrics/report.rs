//! Report rendering: aligned text tables with `mean ± std` percentage
//! columns, per-repetition CSV, and per-epoch loss-curve CSV.

use super::{EvalReport, MetricsError};
use crate::nn::TrainHistory;
use std::fmt::Write as _;
use std::path::Path;

/// `0.9511 ± 0.0099` renders as `95.11 ± 0.99`.
fn pm(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0)
}

/// Human-readable table over one or more reports. Sensitivity is the
/// malignant-class recall and specificity the benign-class recall; the
/// header says so explicitly since the convention varies in the wild.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut rows = vec![[
        "Model".to_string(),
        "Accuracy%".to_string(),
        "Sensitivity% (malignant recall)".to_string(),
        "Specificity% (benign recall)".to_string(),
        "AUC%".to_string(),
        "Convergence epoch".to_string(),
    ]];
    for r in reports {
        let (am, asd) = r.accuracy();
        let (sm, ssd) = r.sensitivity();
        let (pm_, psd) = r.specificity();
        let (um, usd) = r.auc();
        let (cm, csd) = r.convergence_epoch();
        rows.push([
            r.model.clone(),
            pm(am, asd),
            pm(sm, ssd),
            pm(pm_, psd),
            pm(um, usd),
            format!("{cm:.1} ± {csd:.1}"),
        ]);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let pad = widths[c] - cell.chars().count();
            let _ = write!(out, "{}{}{}", cell, " ".repeat(pad), if c + 1 < row.len() { "  " } else { "" });
        }
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    if reports.iter().any(|r| r.rows.len() == 1) {
        out.push_str("note: single repetition; ± is 0.00 by definition\n");
    }
    out
}

/// Per-repetition CSV: one raw row per repetition plus a trailing `mean`
/// and `std` row.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let mut out = String::from(
        "model,repetition,accuracy,sensitivity,specificity,auc,convergence_epoch,tp,fp,tn,fn\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
            report.model,
            r.repetition,
            r.accuracy,
            r.sensitivity,
            r.specificity,
            r.auc,
            r.convergence_epoch,
            r.confusion.tp,
            r.confusion.fp,
            r.confusion.tn,
            r.confusion.fn_,
        );
    }
    let (am, asd) = report.accuracy();
    let (sm, ssd) = report.sensitivity();
    let (pm_, psd) = report.specificity();
    let (um, usd) = report.auc();
    let (cm, csd) = report.convergence_epoch();
    let _ = writeln!(
        out,
        "{},mean,{am:.6},{sm:.6},{pm_:.6},{um:.6},{cm:.2},,,,",
        report.model
    );
    let _ = writeln!(
        out,
        "{},std,{asd:.6},{ssd:.6},{psd:.6},{usd:.6},{csd:.2},,,,",
        report.model
    );
    std::fs::write(path, out)?;
    Ok(())
}

/// Loss-curve CSV for convergence plots: `epoch,train_loss,val_loss,val_acc`,
/// one row per trained epoch (early stopping shortens it).
pub fn write_loss_curves(path: &Path, history: &TrainHistory) -> Result<(), MetricsError> {
    let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
    for e in &history.epochs {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}
