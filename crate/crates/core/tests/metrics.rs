mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tavit_core::data::{Modality, SegMap, Volume};
use tavit_core::metrics::*;
use tavit_core::Error;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn metrics_match_reference_implementations() {
    common::oracles::check_random_volumes(100, 2024).unwrap();
}

#[test]
fn overlap_examples() {
    let g = [true, true, true, true, false, false, false, false];
    let p = [false, false, true, true, true, true, false, false];
    assert_eq!(dsc(&g, &p).unwrap(), 0.5);
    assert!(close(jaccard(&g, &p).unwrap(), 1.0 / 3.0, 1e-15));
    assert_eq!(dsc(&g, &g).unwrap(), 1.0);
    assert_eq!(jaccard(&g, &g).unwrap(), 1.0);
    let not_g: Vec<bool> = g.iter().map(|b| !b).collect();
    assert_eq!(dsc(&g, &not_g).unwrap(), 0.0);
    assert_eq!(dsc(&[false; 4], &[false; 4]).unwrap(), 1.0);
    assert!(dsc(&g, &p[..4]).is_err());
}

#[test]
fn error_examples() {
    assert_eq!(rmsd(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!(close(rmsd(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5f64.sqrt(), 1e-12));
    assert!(close(rmsd(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 3.53553, 1e-5));
    assert_eq!(nmse(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap(), 0.25);
    let x = [0.3, 0.9, 0.1];
    let y = [0.1, 0.5, 0.2];
    let half: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b + (a - b) / 2.0).collect();
    assert!(close(nmse(&half, &y).unwrap(), nmse(&x, &y).unwrap() / 4.0, 1e-15));
    assert!(nmse::<f64>(&[], &[]).is_err());
}

#[test]
fn psnr_examples() {
    let y = [0.0; 4];
    let x = [0.1, -0.1, 0.1, -0.1];
    assert!(close(psnr(&x, &y, 1.0).unwrap(), 20.0, 1e-12));
    assert_eq!(psnr(&y, &y, 1.0).unwrap(), PSNR_CAP_DB);
    let gain = psnr(&x, &y, 2.0).unwrap() - psnr(&x, &y, 1.0).unwrap();
    assert!(close(gain, 20.0 * 2f64.log10(), 1e-12));
    assert!(close(gain, 6.0206, 1e-4));
    assert!(psnr(&x, &y, 0.0).is_err());
}

#[test]
fn ncc_examples() {
    let x = [1.0, -2.0, 0.5, 0.5];
    assert!(close(ncc(&x, &x).unwrap(), 1.0, 1e-15));
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!(close(ncc(&x, &neg).unwrap(), -1.0, 1e-15));
    let aff: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
    assert!(close(ncc(&x, &aff).unwrap(), 1.0, 1e-12));
    assert!(matches!(
        ncc(&[1.0, 1.0], &[0.0, 1.0]),
        Err(Error::UndefinedCorrelation(_))
    ));
}

fn textured(h: usize, w: usize, s: f64) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(h * w);
    let mut y = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (fi, fj) = (i as f64, j as f64);
            let v = (fi * 0.37 + s).sin() * (fj * 0.23 - s).cos() * 0.5 + 0.5;
            x.push(v);
            y.push(0.6 * v + 0.3 * (fi * 0.11 + fj * 0.07 + 2.0 * s).sin().powi(2));
        }
    }
    (x, y)
}

#[test]
fn ssim_matches_frozen_reference_values() {
    // Gaussian-weighted SSIM (σ = 1.5, population covariance, data range 1)
    // as computed by scikit-image 0.25.2.
    for (h, w, s, want) in [
        (16, 16, 0.0, 0.7354530964202514),
        (20, 13, 1.0, 0.8844647139648727),
        (11, 11, 2.5, 0.8885208024503113),
    ] {
        let (x, y) = textured(h, w, s);
        let got = ssim_slice(&x, &y, h, w).unwrap();
        assert!(close(got, want, 1e-6), "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn ssim_examples() {
    let (x, _) = textured(12, 12, 0.3);
    assert!(close(ssim(&x, &x, [1, 12, 12]).unwrap(), 1.0, 1e-12));
    let inv: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    assert!(ssim(&x, &inv, [1, 12, 12]).unwrap() < 1.0);
    assert!(ssim_slice(&x[..100], &x[..100], 10, 10).is_err());
}

fn handmade_seg() -> SegMap {
    SegMap::new("P000", [1, 2, 4], vec![0, 1, 2, 3, 4, 2, 0, 4]).unwrap()
}

#[test]
fn region_masks() {
    let seg = handmade_seg();
    let tumor = region_mask(&seg.labels, Region::WholeTumor);
    let union: Vec<bool> = seg.labels.iter().map(|l| [1, 3, 4].contains(l)).collect();
    assert_eq!(tumor, union);
    let brain = region_mask(&seg.labels, Region::WholeBrain);
    assert_eq!(brain, vec![false, true, true, true, true, true, false, true]);

    let vol: Vec<f64> = (1..=8).map(|v| v as f64).collect();
    let once = mask_region(&vol, &seg, Region::WholeTumor).unwrap();
    assert_eq!(once, vec![0.0, 2.0, 0.0, 4.0, 5.0, 0.0, 0.0, 8.0]);
    let masked_seg = seg.clone();
    assert_eq!(mask_region(&once, &masked_seg, Region::WholeTumor).unwrap(), once);

    let empty = SegMap::new("P000", [1, 2, 4], vec![0; 8]).unwrap();
    assert!(mask_region(&vol, &empty, Region::WholeBrain)
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn paired_ttest_matches_frozen_reference_values() {
    // scipy.stats.ttest_rel 1.15.3.
    let a = [1.1, 2.3, 2.9, 4.2, 5.0];
    let b = [0.9, 2.0, 3.1, 3.8, 4.4];
    let t = paired_ttest(&a, &b).unwrap();
    assert!(close(t.t, 1.9598237397554632, 1e-9));
    assert!(close(t.p, 0.12157920965640184, 1e-6));
    let swapped = paired_ttest(&b, &a).unwrap();
    assert!(close(swapped.p, t.p, 1e-15));
    assert!(close(swapped.t, -t.t, 1e-15));

    let a = [0.81, 0.77, 0.90, 0.65, 0.72, 0.88];
    let b = [0.79, 0.80, 0.85, 0.60, 0.70, 0.81];
    let t = paired_ttest(&a, &b).unwrap();
    assert!(close(t.t, 2.086825030920757, 1e-9));
    assert!(close(t.p, 0.09126712647457995, 1e-6));
}

#[test]
fn paired_ttest_edges() {
    let a = [0.5, 1.0, 2.0];
    let t = paired_ttest(&a, &a).unwrap();
    assert_eq!((t.p, t.degenerate), (1.0, false));
    let shifted: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
    let t = paired_ttest(&shifted, &a).unwrap();
    assert!(t.degenerate);
    assert_eq!(t.p, 0.0);
    assert!(paired_ttest(&[1.0], &[2.0]).is_err());
}

#[test]
fn mean_and_sample_std() {
    let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(m, 5.0);
    assert!(close(s, (32.0f64 / 7.0).sqrt(), 1e-12));
    assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
}

fn phantom_case(id: &str, seed: u64) -> (Volume, SegMap) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ext = [2, 12, 12];
    let n = 288;
    let labels: Vec<u8> = (0..n)
        .map(|i| {
            let (y, x) = ((i % 144) / 12, i % 12);
            match (y, x) {
                (4..=7, 4..=7) => [1, 3, 4][r.gen_range(0..3)],
                (1..=10, 1..=10) => 2,
                _ => 0,
            }
        })
        .collect();
    let vol: Vec<f32> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    (
        Volume::new(id, Modality::T1c, ext, vol).unwrap(),
        SegMap::new(id, ext, labels).unwrap(),
    )
}

fn noisy(v: &Volume, seed: u64, amp: f32) -> Volume {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = v
        .data
        .iter()
        .map(|x| (x + r.gen_range(-amp..amp)).clamp(0.0, 1.0))
        .collect();
    Volume::new(&v.patient, Modality::T1c, v.extents, data).unwrap()
}

#[test]
fn report_structure() {
    let refs: Vec<(Volume, SegMap)> = (0..4).map(|i| phantom_case(&format!("P{i:03}"), i)).collect();
    let pairs: Vec<(&Volume, &SegMap)> = refs.iter().map(|(v, s)| (v, s)).collect();
    let a = VariantVolumes {
        name: "a".into(),
        volumes: refs.iter().map(|(v, _)| noisy(v, 1, 0.1)).collect(),
    };
    let a2 = VariantVolumes {
        name: "a2".into(),
        volumes: a.volumes.clone(),
    };
    let b = VariantVolumes {
        name: "b".into(),
        volumes: refs.iter().map(|(v, _)| noisy(v, 2, 0.3)).collect(),
    };
    let rep = build_report(&pairs, &[a, a2, b], Some("a")).unwrap();
    assert_eq!(rep.rows.len(), 4 * 2 * 3 * SYNTHESIS_METRICS.len());
    for p in 0..4 {
        let id = format!("P{p:03}");
        for region in Region::ALL {
            assert!(rep.rows.iter().any(|r| r.patient == id && r.region == region));
        }
    }
    for region in Region::ALL {
        for m in SYNTHESIS_METRICS {
            for v in ["a", "a2"] {
                assert_eq!(rep.aggregate(v, region, m).unwrap().p_vs_baseline, Some(1.0));
            }
            let vals: Vec<f64> = rep.values("b", region, m).iter().map(|x| x.1).collect();
            let agg = rep.aggregate("b", region, m).unwrap();
            assert!(close(agg.mean, vals.iter().sum::<f64>() / vals.len() as f64, 1e-12));
            assert!(agg.p_vs_baseline.unwrap() < 1.0);
        }
    }
    assert!(!rep.has_nan());
    assert!(build_report(&pairs, &[], Some("a")).is_err());
}

#[test]
fn report_rejects_mismatches_and_flags_nan() {
    let refs: Vec<(Volume, SegMap)> = (0..2).map(|i| phantom_case(&format!("P{i:03}"), i)).collect();
    let pairs: Vec<(&Volume, &SegMap)> = refs.iter().map(|(v, s)| (v, s)).collect();
    let wrong = VariantVolumes {
        name: "w".into(),
        volumes: vec![refs[1].0.clone(), refs[0].0.clone()],
    };
    assert!(build_report(&pairs, &[wrong], None).is_err());
    let short = VariantVolumes {
        name: "s".into(),
        volumes: vec![refs[0].0.clone()],
    };
    assert!(build_report(&pairs, &[short], None).is_err());

    // A blank prediction stays constant under any region mask.
    let flat = VariantVolumes {
        name: "flat".into(),
        volumes: refs
            .iter()
            .map(|(v, _)| Volume::new(&v.patient, Modality::T1c, v.extents, vec![0.0; 288]).unwrap())
            .collect(),
    };
    let rep = build_report(&pairs, &[flat], None).unwrap();
    assert!(rep.has_nan());
}

#[test]
fn segmentation_report_and_csvs() {
    let (_, s0) = phantom_case("P000", 0);
    let (_, s1) = phantom_case("P001", 1);
    let mut p1 = s1.clone();
    p1.labels.iter_mut().filter(|l| **l == 4).for_each(|l| *l = 2);
    let rep = build_segmentation_report("seg", &[(&s0, &s0), (&s1, &p1)]).unwrap();
    assert_eq!(rep.rows.len(), 2 * 2 * SEGMENTATION_METRICS.len());
    let d = rep.values("seg", Region::WholeTumor, "dsc");
    assert_eq!(d[0].1, 1.0);
    assert!(d[1].1 < 1.0);

    let dir = tempfile::tempdir().unwrap();
    write_report_csv(&dir.path().join("m.csv"), &rep).unwrap();
    write_aggregates_csv(&dir.path().join("a.csv"), &rep).unwrap();
    let files = write_violin_csvs(dir.path(), &rep).unwrap();
    assert_eq!(files.len(), SEGMENTATION_METRICS.len() * 2);
    let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(text.starts_with("variant,patient,region,metric,value\n"));
    assert_eq!(text.lines().count(), 1 + rep.rows.len());
}
