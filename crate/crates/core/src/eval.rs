//! Registration metrics and CSV reports.
//!
//! * pair error: end-point RMSE of the final field against the ground truth
//!   over valid pixels, in pixels
//! * CMR@t: percentage of pairs with error strictly below `t` pixels
//! * R_avg: mean pair error

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use crate::error::{Result, SomaError};
use crate::geometry::DisplacementField;
use crate::ops;

/// Thresholds of the standard report, in pixels.
pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub pair_id: String,
    /// Masked end-point RMSE in pixels.
    pub error: f64,
    /// Errors of the four image quarters (top-left, top-right, bottom-left,
    /// bottom-right); NaN-free, 0 for a quarter without valid pixels.
    pub quadrants: [f64; 4],
}

fn masked_rmse(pred: &[[f64; 2]], gt: &[[f64; 2]], mask: &[f64], keep: impl Fn(usize) -> bool) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..pred.len() {
        if mask[i] > 0.5 && keep(i) {
            let dx = pred[i][0] - gt[i][0];
            let dy = pred[i][1] - gt[i][1];
            sum += dx * dx + dy * dy;
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        ((sum / count as f64).sqrt(), count)
    }
}

fn host_parts(
    predicted: &DisplacementField,
    gt: &DisplacementField,
    mask: Option<&Tensor>,
) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>, Vec<f64>)> {
    if predicted.tensor().dims() != gt.tensor().dims() || predicted.dims().0 != 1 {
        return Err(SomaError::Shape(format!(
            "pair error needs two single-sample fields of equal shape, got {:?} and {:?}",
            predicted.tensor().dims(),
            gt.tensor().dims()
        )));
    }
    let (_, h, w) = predicted.dims();
    let mask = match mask {
        Some(m) => {
            if m.elem_count() != h * w {
                return Err(SomaError::Shape(format!(
                    "mask {:?} does not cover a {h}x{w} field",
                    m.dims()
                )));
            }
            ops::to_f64_vec(m)?
        }
        None => vec![1.0; h * w],
    };
    Ok((predicted.to_pixels(0)?, gt.to_pixels(0)?, mask))
}

/// Masked end-point RMSE of one pair, in pixels.
pub fn pair_error(predicted: &DisplacementField, gt: &DisplacementField, mask: Option<&Tensor>) -> Result<f64> {
    let (p, g, m) = host_parts(predicted, gt, mask)?;
    let (e, n) = masked_rmse(&p, &g, &m, |_| true);
    if n == 0 {
        return Err(SomaError::Degenerate("the validity mask is empty".into()));
    }
    Ok(e)
}

/// Builds the record of one pair.
pub fn evaluate_pair(
    pair_id: &str,
    predicted: &DisplacementField,
    gt: &DisplacementField,
    mask: Option<&Tensor>,
) -> Result<EvalRecord> {
    let error = pair_error(predicted, gt, mask)?;
    let (p, g, m) = host_parts(predicted, gt, mask)?;
    let (_, h, w) = predicted.dims();
    let mut quadrants = [0.0; 4];
    for (q, slot) in quadrants.iter_mut().enumerate() {
        let (top, left) = (q / 2 == 0, q % 2 == 0);
        let keep = |i: usize| ((i / w) < h / 2) == top && ((i % w) < w / 2) == left;
        *slot = masked_rmse(&p, &g, &m, keep).0;
    }
    Ok(EvalRecord {
        pair_id: pair_id.to_string(),
        error,
        quadrants,
    })
}

fn check_records(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(SomaError::Degenerate("no evaluation records".into()));
    }
    if let Some(r) = records.iter().find(|r| !r.error.is_finite() || r.error < 0.0) {
        return Err(SomaError::Invalid(format!(
            "pair {} has an invalid error {}",
            r.pair_id, r.error
        )));
    }
    Ok(())
}

/// Rounds to two decimals, the precision metrics are reported at.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Percentage of pairs with error strictly below `threshold`, two decimals.
pub fn cmr(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    check_records(records)?;
    if !(threshold > 0.0) {
        return Err(SomaError::Invalid(format!("threshold must be positive, got {threshold}")));
    }
    let hits = records.iter().filter(|r| r.error < threshold).count();
    Ok(round2(100.0 * hits as f64 / records.len() as f64))
}

/// Mean pair error.
pub fn r_avg(records: &[EvalRecord]) -> Result<f64> {
    check_records(records)?;
    Ok(records.iter().map(|r| r.error).sum::<f64>() / records.len() as f64)
}

/// One `metrics.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub threshold: f64,
    pub cmr: f64,
    pub r_avg: f64,
    pub n_pairs: usize,
}

pub const METRICS_HEADER: [&str; 5] = ["method", "threshold", "cmr", "r_avg", "n_pairs"];

/// CMR at every threshold plus R_avg for one method.
pub fn summarize(method: &str, records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<MetricRow>> {
    let avg = r_avg(records)?;
    thresholds
        .iter()
        .map(|t| {
            Ok(MetricRow {
                method: method.to_string(),
                threshold: *t,
                cmr: cmr(records, *t)?,
                r_avg: avg,
                n_pairs: records.len(),
            })
        })
        .collect()
}

/// Files written by [`write_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub errors: Vec<PathBuf>,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> SomaError + '_ {
    move |e| SomaError::load(path, e)
}

/// Writes `metrics.csv` for all methods and one `errors_<method>.csv` with
/// the raw per-pair errors of each.
pub fn write_report(
    dir: impl AsRef<Path>,
    methods: &[(String, Vec<EvalRecord>)],
    thresholds: &[f64],
) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| SomaError::io(dir, e))?;
    let metrics = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&metrics).map_err(csv_err(&metrics))?;
    w.write_record(METRICS_HEADER).map_err(csv_err(&metrics))?;
    let mut errors = Vec::new();
    for (method, records) in methods {
        for row in summarize(method, records, thresholds)? {
            w.write_record([
                row.method.clone(),
                format!("{}", row.threshold),
                format!("{:.2}", row.cmr),
                format!("{:.4}", row.r_avg),
                row.n_pairs.to_string(),
            ])
            .map_err(csv_err(&metrics))?;
        }
        let path = dir.join(format!("errors_{method}.csv"));
        let mut ew = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        ew.write_record(["pair_id", "error", "q_tl", "q_tr", "q_bl", "q_br"])
            .map_err(csv_err(&path))?;
        for r in records {
            let mut row = vec![r.pair_id.clone(), format!("{:.6}", r.error)];
            row.extend(r.quadrants.iter().map(|q| format!("{q:.6}")));
            ew.write_record(&row).map_err(csv_err(&path))?;
        }
        ew.flush().map_err(|e| SomaError::io(&path, e))?;
        errors.push(path);
    }
    w.flush().map_err(|e| SomaError::io(&metrics, e))?;
    Ok(ReportFiles { metrics, errors })
}

/// Reads `metrics.csv` back.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(SomaError::load(path, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| SomaError::load(path, format!("bad number `{}`", &rec[i])))
        };
        out.push(MetricRow {
            method: rec[0].to_string(),
            threshold: num(1)?,
            cmr: num(2)?,
            r_avg: num(3)?,
            n_pairs: num(4)? as usize,
        });
    }
    Ok(out)
}

/// Per-pixel end-point errors of a single-sample pair, row-major.
pub fn endpoint_errors(predicted: &DisplacementField, gt: &DisplacementField) -> Result<Vec<f64>> {
    let e = crate::geometry::endpoint_error(predicted, gt)?;
    ops::to_f64_vec(&e.to_dtype(DType::F64)?)
}
