//! Metric reference implementations written directly from the definitions.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tavit_core::metrics::{dsc, jaccard, ncc, nmse, psnr, rmsd, ssim};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn ref_dsc(g: &[bool], p: &[bool]) -> f64 {
    let gs: HashSet<usize> = (0..g.len()).filter(|&i| g[i]).collect();
    let ps: HashSet<usize> = (0..p.len()).filter(|&i| p[i]).collect();
    if gs.is_empty() && ps.is_empty() {
        return 1.0;
    }
    2.0 * gs.intersection(&ps).count() as f64 / (gs.len() + ps.len()) as f64
}

pub fn ref_jaccard(g: &[bool], p: &[bool]) -> f64 {
    let gs: HashSet<usize> = (0..g.len()).filter(|&i| g[i]).collect();
    let ps: HashSet<usize> = (0..p.len()).filter(|&i| p[i]).collect();
    let u = gs.union(&ps).count();
    if u == 0 {
        return 1.0;
    }
    gs.intersection(&ps).count() as f64 / u as f64
}

pub fn ref_mse(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        s += (x[i] - y[i]) * (x[i] - y[i]);
    }
    s / x.len() as f64
}

pub fn ref_ncc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Direct 2-D weighted window sums at every fully contained position.
pub fn ref_ssim_slice(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let k = 11;
    let g: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp())
        .collect();
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            win[i * k + j] = g[i] * g[j];
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = win[i * k + j];
                    let (a, b) = (x[(r + i) * w + c + j], y[(r + i) * w + c + j]);
                    mx += wt * a;
                    my += wt * b;
                    xx += wt * a * a;
                    yy += wt * b * b;
                    xy += wt * a * b;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

pub fn ref_ssim(x: &[f64], y: &[f64], [d, h, w]: [usize; 3]) -> f64 {
    let n = h * w;
    (0..d)
        .map(|z| ref_ssim_slice(&x[z * n..(z + 1) * n], &y[z * n..(z + 1) * n], h, w))
        .sum::<f64>()
        / d as f64
}

/// Compares every metric with its reference on `cases` random small
/// volumes; returns the first disagreement.
pub fn check_random_volumes(cases: usize, seed: u64) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let ext = [r.gen_range(1..3), r.gen_range(11..15), r.gen_range(11..15)];
        let n: usize = ext.iter().product();
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let noise = r.gen_range(0.01..0.5);
        let y: Vec<f64> = x
            .iter()
            .map(|v| (v + r.gen_range(-noise..noise)).clamp(0.0, 1.0))
            .collect();
        let pg = r.gen_range(0.05..0.6);
        let pp = r.gen_range(0.05..0.6);
        let g: Vec<bool> = (0..n).map(|_| r.gen_bool(pg)).collect();
        let p: Vec<bool> = (0..n).map(|_| r.gen_bool(pp)).collect();
        let e = |m: &str, e: tavit_core::Error| format!("case {case} {m}: {e}");

        let d = dsc(&g, &p).map_err(|x| e("dsc", x))?;
        let j = jaccard(&g, &p).map_err(|x| e("jaccard", x))?;
        let mse = ref_mse(&x, &y);
        let rm = rmsd(&x, &y).map_err(|x| e("rmsd", x))?;
        let nm = nmse(&x, &y).map_err(|x| e("nmse", x))?;
        let peak = y.iter().cloned().fold(0.0, f64::max);
        let ps = psnr(&x, &y, peak).map_err(|x| e("psnr", x))?;
        let nc = ncc(&x, &y).map_err(|x| e("ncc", x))?;
        let ss = ssim(&x, &y, ext).map_err(|x| e("ssim", x))?;
        let checks = [
            ("dsc", d, ref_dsc(&g, &p), 1e-9),
            ("jaccard", j, ref_jaccard(&g, &p), 1e-9),
            ("J = DSC/(2-DSC)", j, d / (2.0 - d), 1e-12),
            ("nmse", nm, mse, 1e-9),
            ("rmsd", rm, mse.sqrt(), 1e-9),
            ("rmsd^2 = nmse", rm * rm, nm, 1e-12),
            ("psnr", ps, 10.0 * (peak * peak / mse).log10(), 1e-9),
            ("ncc", nc, ref_ncc(&x, &y), 1e-9),
            ("ssim", ss, ref_ssim(&x, &y, ext), 1e-6),
        ];
        for (name, got, want, tol) in checks {
            if !close(got, want, tol) {
                return Err(format!("case {case} {name}: {got} vs {want} (tol {tol})"));
            }
        }
    }
    Ok(())
}
