//! Overlap and image-quality metrics, region masking and paired tests.
//!
//! Every function is pure and evaluates in `f64` regardless of the input
//! precision.

mod report;

pub use report::{
    build_report, build_segmentation_report, write_aggregates_csv, write_report_csv, write_violin_csvs, Aggregate,
    MetricReport, ReportRow, VariantVolumes, SEGMENTATION_METRICS, SYNTHESIS_METRICS,
};

use std::fmt;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{is_tumor, SegMap, LABEL_BACKGROUND};
use crate::error::{Error, Result};

/// PSNR reported for a zero mean squared error.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    Ok(())
}

fn nonempty(op: &'static str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{op} of empty volumes")));
    }
    Ok(())
}

fn counts(gt: &[bool], pt: &[bool]) -> (usize, usize, usize) {
    gt.iter().zip(pt).fold((0, 0, 0), |(g, p, i), (&a, &b)| {
        (g + a as usize, p + b as usize, i + (a && b) as usize)
    })
}

/// `2|G ∩ P| / (|G| + |P|)`, one when both masks are empty.
pub fn dsc(gt: &[bool], pt: &[bool]) -> Result<f64> {
    same_len("dsc", gt.len(), pt.len())?;
    let (g, p, i) = counts(gt, pt);
    Ok(if g + p == 0 {
        1.0
    } else {
        2.0 * i as f64 / (g + p) as f64
    })
}

/// `|G ∩ P| / |G ∪ P|`, one when both masks are empty.
pub fn jaccard(gt: &[bool], pt: &[bool]) -> Result<f64> {
    same_len("jaccard", gt.len(), pt.len())?;
    let (g, p, i) = counts(gt, pt);
    let u = g + p - i;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

fn mse<T: Copy + Into<f64>>(op: &'static str, x: &[T], y: &[T]) -> Result<f64> {
    same_len(op, x.len(), y.len())?;
    nonempty(op, x.len())?;
    let s: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a.into() - b.into();
            d * d
        })
        .sum();
    Ok(s / x.len() as f64)
}

pub fn rmsd<T: Copy + Into<f64>>(x: &[T], y: &[T]) -> Result<f64> {
    Ok(mse("rmsd", x, y)?.sqrt())
}

/// Mean squared voxel difference; no normalization term beyond the count.
pub fn nmse<T: Copy + Into<f64>>(x: &[T], y: &[T]) -> Result<f64> {
    mse("nmse", x, y)
}

/// `10 log10(max_i² / MSE)` in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Copy + Into<f64>>(x: &[T], y: &[T], max_i: f64) -> Result<f64> {
    if max_i.is_nan() || max_i <= 0.0 {
        return Err(Error::InvalidArgument(format!("psnr peak {max_i} must be positive")));
    }
    let m = mse("psnr", x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_i * max_i / m).log10()).min(PSNR_CAP_DB))
}

/// Pearson normalized cross-correlation.
pub fn ncc<T: Copy + Into<f64>>(x: &[T], y: &[T]) -> Result<f64> {
    same_len("ncc", x.len(), y.len())?;
    nonempty("ncc", x.len())?;
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v.into()).sum::<f64>() / n;
    let my = y.iter().map(|&v| v.into()).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a.into() - mx, b.into() - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("first"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("second"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, &c)| c * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, &c)| c * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one `h × w` slice over all fully contained windows.
pub fn ssim_slice<T: Copy + Into<f64>>(x: &[T], y: &[T], h: usize, w: usize) -> Result<f64> {
    same_len("ssim", x.len(), y.len())?;
    same_len("ssim", x.len(), h * w)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid_shape(
            "ssim",
            format!("{SSIM_WINDOW}x{SSIM_WINDOW} window does not fit a {h}x{w} slice"),
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let xf: Vec<f64> = x.iter().map(|&v| v.into()).collect();
    let yf: Vec<f64> = y.iter().map(|&v| v.into()).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&xf, h, w, &taps);
    let my = filter_valid(&yf, h, w, &taps);
    let mxx = filter_valid(&prod(&xf, &xf), h, w, &taps);
    let myy = filter_valid(&prod(&yf, &yf), h, w, &taps);
    let mxy = filter_valid(&prod(&xf, &yf), h, w, &taps);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// SSIM of a `[d, h, w]` volume as the mean over its axial slices.
pub fn ssim<T: Copy + Into<f64>>(x: &[T], y: &[T], extents: [usize; 3]) -> Result<f64> {
    let [d, h, w] = extents;
    same_len("ssim", x.len(), y.len())?;
    same_len("ssim", x.len(), d * h * w)?;
    nonempty("ssim", d)?;
    let n = h * w;
    let mut total = 0.0;
    for z in 0..d {
        total += ssim_slice(&x[z * n..(z + 1) * n], &y[z * n..(z + 1) * n], h, w)?;
    }
    Ok(total / d as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    /// Every non-background label.
    WholeBrain,
    /// Necrotic core, edema and enhancing tumor.
    WholeTumor,
}

impl Region {
    pub const ALL: [Region; 2] = [Region::WholeBrain, Region::WholeTumor];

    pub fn name(self) -> &'static str {
        match self {
            Region::WholeBrain => "whole_brain",
            Region::WholeTumor => "whole_tumor",
        }
    }

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::WholeBrain => label != LABEL_BACKGROUND,
            Region::WholeTumor => is_tumor(label),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn region_mask(labels: &[u8], region: Region) -> Vec<bool> {
    labels.iter().map(|&l| region.contains(l)).collect()
}

/// Zeroes every voxel outside `region` of the ground-truth map.
pub fn mask_region<T: Copy + Default>(vol: &[T], seg: &SegMap, region: Region) -> Result<Vec<T>> {
    same_len("mask_region", vol.len(), seg.labels.len())?;
    Ok(vol
        .iter()
        .zip(&seg.labels)
        .map(|(&v, &l)| if region.contains(l) { v } else { T::default() })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    /// Differences have zero variance but a nonzero mean.
    pub degenerate: bool,
}

/// Two-sided paired Student t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    same_len("paired_ttest", a.len(), b.len())?;
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired t-test needs at least 2 pairs, got {n}"
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                degenerate: false,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        degenerate: false,
    })
}

/// Mean and sample standard deviation (`n - 1`); the deviation of a single
/// value is reported as zero.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
