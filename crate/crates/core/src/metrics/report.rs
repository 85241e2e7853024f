//! Per-patient metric tables, aggregates and CSV emission.

use std::path::Path;

use super::{dsc, jaccard, mask_region, mean_std, ncc, nmse, paired_ttest, psnr, region_mask, rmsd, ssim, Region};
use crate::data::{SegMap, Volume};
use crate::error::{Error, Result};
use crate::util::atomic_write;

pub const SYNTHESIS_METRICS: [&str; 4] = ["nmse", "psnr", "ncc", "ssim"];
pub const SEGMENTATION_METRICS: [&str; 3] = ["dsc", "jaccard", "rmsd"];

/// Predicted volumes of one variant, one per reference patient.
#[derive(Clone, Debug)]
pub struct VariantVolumes {
    pub name: String,
    pub volumes: Vec<Volume>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub patient: String,
    pub region: Region,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub variant: String,
    pub region: Region,
    pub metric: &'static str,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub p_vs_baseline: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    pub baseline: Option<String>,
    pub variants: Vec<String>,
    pub metrics: Vec<&'static str>,
}

impl MetricReport {
    /// Values of one (variant, region, metric) cell in patient order.
    pub fn values(&self, variant: &str, region: Region, metric: &str) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.region == region && r.metric == metric)
            .map(|r| (r.patient.clone(), r.value))
            .collect()
    }

    pub fn aggregate(&self, variant: &str, region: Region, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.variant == variant && a.region == region && a.metric == metric)
    }

    pub fn has_nan(&self) -> bool {
        self.rows.iter().any(|r| r.value.is_nan())
            || self
                .aggregates
                .iter()
                .any(|a| a.mean.is_nan() || a.std.is_nan() || a.p_vs_baseline.is_some_and(f64::is_nan))
    }

    fn finish(mut self) -> Result<Self> {
        for variant in &self.variants {
            for region in Region::ALL {
                for &metric in &self.metrics {
                    let vals = self.values(variant, region, metric);
                    if vals.is_empty() {
                        continue;
                    }
                    let v: Vec<f64> = vals.iter().map(|x| x.1).collect();
                    let (mean, std) = mean_std(&v);
                    let p_vs_baseline = match &self.baseline {
                        Some(b) if v.len() >= 2 => {
                            let base: Vec<f64> = self.values(b, region, metric).iter().map(|x| x.1).collect();
                            Some(paired_ttest(&v, &base)?.p)
                        }
                        _ => None,
                    };
                    self.aggregates.push(Aggregate {
                        variant: variant.clone(),
                        region,
                        metric,
                        n: v.len(),
                        mean,
                        std,
                        p_vs_baseline,
                    });
                }
            }
        }
        Ok(self)
    }
}

/// Whole-tumor rows are emitted only for patients whose ground truth holds
/// tumor; otherwise the masked reference is identically zero.
fn regions_for(seg: &SegMap) -> Vec<Region> {
    if seg.has_tumor() {
        Region::ALL.to_vec()
    } else {
        vec![Region::WholeBrain]
    }
}

/// Synthesis metrics of every variant against the reference volumes, with
/// paired t-tests against `baseline`.
pub fn build_report(
    references: &[(&Volume, &SegMap)],
    variants: &[VariantVolumes],
    baseline: Option<&str>,
) -> Result<MetricReport> {
    if let Some(b) = baseline {
        if !variants.iter().any(|v| v.name == b) {
            return Err(Error::InvalidArgument(format!(
                "baseline variant {b:?} is not being evaluated"
            )));
        }
    }
    let mut report = MetricReport {
        baseline: baseline.map(str::to_string),
        variants: variants.iter().map(|v| v.name.clone()).collect(),
        metrics: SYNTHESIS_METRICS.to_vec(),
        ..Default::default()
    };
    for var in variants {
        if var.volumes.len() != references.len() {
            return Err(Error::InvalidArgument(format!(
                "variant {} has {} volumes for {} patients",
                var.name,
                var.volumes.len(),
                references.len()
            )));
        }
        for (pred, (gt, seg)) in var.volumes.iter().zip(references) {
            if pred.patient != gt.patient || seg.patient != gt.patient {
                return Err(Error::InvalidArgument(format!(
                    "patient mismatch in variant {}: {} vs {}",
                    var.name, pred.patient, gt.patient
                )));
            }
            if pred.extents != gt.extents || seg.extents != gt.extents {
                return Err(Error::ShapeMismatch {
                    op: "build_report",
                    lhs: gt.extents.to_vec(),
                    rhs: pred.extents.to_vec(),
                });
            }
            for region in regions_for(seg) {
                let x = mask_region(&pred.data, seg, region)?;
                let y = mask_region(&gt.data, seg, region)?;
                let peak = y.iter().fold(0f32, |a, &b| a.max(b)) as f64;
                let vals = [
                    nmse(&x, &y)?,
                    psnr(&x, &y, peak)?,
                    ncc(&x, &y).unwrap_or(f64::NAN),
                    ssim(&x, &y, gt.extents)?,
                ];
                for (metric, value) in SYNTHESIS_METRICS.into_iter().zip(vals) {
                    report.rows.push(ReportRow {
                        variant: var.name.clone(),
                        patient: gt.patient.clone(),
                        region,
                        metric,
                        value,
                    });
                }
            }
        }
    }
    report.finish()
}

/// Overlap metrics of predicted against ground-truth label maps; RMSD is
/// taken between the binary region indicators.
pub fn build_segmentation_report(name: &str, pairs: &[(&SegMap, &SegMap)]) -> Result<MetricReport> {
    let mut report = MetricReport {
        variants: vec![name.to_string()],
        metrics: SEGMENTATION_METRICS.to_vec(),
        ..Default::default()
    };
    for (gt, pred) in pairs {
        if gt.patient != pred.patient || gt.extents != pred.extents {
            return Err(Error::InvalidArgument(format!(
                "segmentation of {} does not match reference {}",
                pred.patient, gt.patient
            )));
        }
        for region in regions_for(gt) {
            let g = region_mask(&gt.labels, region);
            let p = region_mask(&pred.labels, region);
            let as_f = |m: &[bool]| m.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>();
            let vals = [dsc(&g, &p)?, jaccard(&g, &p)?, rmsd(&as_f(&g), &as_f(&p))?];
            for (metric, value) in SEGMENTATION_METRICS.into_iter().zip(vals) {
                report.rows.push(ReportRow {
                    variant: name.to_string(),
                    patient: gt.patient.clone(),
                    region,
                    metric,
                    value,
                });
            }
        }
    }
    report.finish()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

pub fn write_report_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let rows = report.rows.iter().map(|r| {
        vec![
            r.variant.clone(),
            r.patient.clone(),
            r.region.to_string(),
            r.metric.to_string(),
            r.value.to_string(),
        ]
    });
    atomic_write(
        path,
        &csv_bytes(&["variant", "patient", "region", "metric", "value"], rows)?,
    )
}

pub fn write_aggregates_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let rows = report.aggregates.iter().map(|a| {
        vec![
            a.variant.clone(),
            a.region.to_string(),
            a.metric.to_string(),
            a.mean.to_string(),
            a.std.to_string(),
            a.p_vs_baseline.map(|p| p.to_string()).unwrap_or_default(),
        ]
    });
    atomic_write(
        path,
        &csv_bytes(&["variant", "region", "metric", "mean", "std", "p_vs_baseline"], rows)?,
    )
}

/// One `violin_<metric>_<region>.csv` per cell: a patient column and one
/// column per variant. Returns the written paths.
pub fn write_violin_csvs(dir: &Path, report: &MetricReport) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for &metric in &report.metrics {
        for region in Region::ALL {
            let cols: Vec<Vec<(String, f64)>> = report
                .variants
                .iter()
                .map(|v| report.values(v, region, metric))
                .collect();
            if cols.iter().all(Vec::is_empty) {
                continue;
            }
            let mut header = vec!["patient"];
            header.extend(report.variants.iter().map(String::as_str));
            let rows = (0..cols[0].len()).map(|i| {
                let mut r = vec![cols[0][i].0.clone()];
                r.extend(
                    cols.iter()
                        .map(|c| c.get(i).map(|x| x.1.to_string()).unwrap_or_default()),
                );
                r
            });
            let path = dir.join(format!("violin_{metric}_{region}.csv"));
            atomic_write(&path, &csv_bytes(&header, rows)?)?;
            written.push(path);
        }
    }
    Ok(written)
}
