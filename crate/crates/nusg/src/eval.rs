//! Evaluation: run a model (or externally produced prediction masks in
//! bypass mode) over a record list, micro-average the confusion counts and
//! emit the CSV report with its JSON mirror.

use crate::data::{load_gray_prob, load_mask_native, load_sample, SampleRecord};
use crate::{Error, Result};
use nusg_core::blocks::Mode;
use nusg_core::metrics::{confusion, mae, ConfusionMatrix, MetricsReport, METRIC_CONVENTIONS, REPORT_CSV_HEADER};
use nusg_core::model::Model;
use nusg_core::tensor::{Graph, Tensor};
use std::path::Path;

pub const EVAL_THRESHOLD: f64 = 0.5;

/// Forward every record at `size` in eval mode and score the fused map.
pub fn evaluate_model(model: &Model<f32>, records: &[SampleRecord], size: usize) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Data("no records to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::default();
    let mut mae_sum = 0.0;
    for rec in records {
        let (img, msk) = load_sample(rec, (size, size))?;
        let x = Tensor::new(&[1, 3, size, size], img.into_data())?;
        let gt = Tensor::new(&[1, 1, size, size], msk.into_data())?;
        let mut g = Graph::new();
        let xid = g.constant(x);
        let fwd = model.forward(&mut g, xid, Mode::Eval)?;
        let fused = g.tensor(fwd.outputs.fused);
        cm += confusion(&fused, &gt, EVAL_THRESHOLD)?;
        mae_sum += mae(&fused, &gt)?;
    }
    Ok(MetricsReport::from_confusion(&cm, mae_sum / records.len() as f64))
}

/// Score prediction masks produced elsewhere: `pred_dir/<stem>.png`
/// grayscale maps (0..255 as probability), compared against each record's
/// mask at its native resolution.
pub fn evaluate_bypass(pred_dir: &Path, records: &[SampleRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Data("no records to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::default();
    let mut mae_sum = 0.0;
    for rec in records {
        let gt = load_mask_native(&rec.mask_path)?;
        let pred_path = pred_dir.join(format!("{}.png", rec.stem));
        let mut pred = load_gray_prob(&pred_path)?;
        if pred.shape() != gt.shape() {
            let [_, h, w] = gt.shape()[..] else { unreachable!() };
            pred = pred.resize_bilinear(h, w)?;
        }
        cm += confusion(&pred, &gt, EVAL_THRESHOLD)?;
        mae_sum += mae(&pred, &gt)?;
    }
    Ok(MetricsReport::from_confusion(&cm, mae_sum / records.len() as f64))
}

/// Write `path` as CSV (header, one row, convention footer) and a JSON
/// mirror next to it with the extension swapped to `.json`.
pub fn write_report(path: &Path, model_name: &str, report: &MetricsReport) -> Result<()> {
    let csv = format!(
        "{REPORT_CSV_HEADER}\n{}\n# conventions: {METRIC_CONVENTIONS}\n",
        report.csv_row(model_name)
    );
    std::fs::write(path, csv).map_err(Error::io(path))?;
    let json = serde_json::json!({
        "model": model_name,
        "recall": report.recall_pct,
        "precision": report.precision_pct,
        "miou": report.miou_pct,
        "mae": report.mae,
        "f1": report.f1_pct,
        "params_mb": report.params_mb,
        "flops_g": report.flops_g,
        "inference_s": report.inference_s,
        "conventions": METRIC_CONVENTIONS,
    });
    let json_path = path.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&json).expect("serializable"))
        .map_err(Error::io(&json_path))
}
