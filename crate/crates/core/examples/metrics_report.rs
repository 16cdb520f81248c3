//! Confusion matrix, per-class and macro metrics, and the report files.
//!
//! cargo run --release --example metrics_report -- [out_dir]

use dualfer::eval::{emit_report, MetricsReport, ReportFormat};

fn main() -> dualfer::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "report_demo".into()));
    let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
    let preds = [0, 0, 1, 1, 1, 1, 2, 2, 0, 2];
    let names: Vec<String> = ["happy", "sad", "surprise"].iter().map(|s| s.to_string()).collect();
    let m = MetricsReport::from_predictions(&labels, &preds, 3)?.with_class_names(&names);

    println!("confusion (rows = true class):");
    for row in &m.confusion {
        println!("  {row:?}");
    }
    for c in 0..3 {
        println!("{:>9}: P {:.3} R {:.3} F1 {:.3}", names[c], m.precision[c], m.recall[c], m.f1[c]);
    }
    println!(
        "accuracy {:.3}, macro P {:.3} R {:.3} F1 {:.3}",
        m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
    );
    for path in emit_report(&out, &m, None, None, &[ReportFormat::Json, ReportFormat::Csv])? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
