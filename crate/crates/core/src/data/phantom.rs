//! Analytic brain phantoms with optional tumors.
//!
//! Each phantom is rasterized at twice the requested resolution and brought
//! down with [`bicubic_downsample`] (labels with [`downsample_labels`]), then
//! min-max normalized per volume. A bright scalp shell pins the maximum of
//! every modality, so normalization barely moves the analytic intensities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::resample::{bicubic_downsample, downsample_labels};
use super::{is_tumor, LABEL_BACKGROUND, LABEL_BRAIN, LABEL_EDEMA, LABEL_ENHANCING, LABEL_NECROTIC};
use crate::error::{Error, Result};

/// Contrast added to `T1W + FLAIR_WEIGHT * FLAIR` inside each label.
pub const ENHANCING_BOOST: f64 = 0.4;
pub const NECROTIC_DROP: f64 = -0.3;
pub const EDEMA_BOOST: f64 = 0.1;
pub const FLAIR_WEIGHT: f64 = 0.2;

const BRAIN_R: f64 = 0.86;
const SCALP_INNER: f64 = 0.92;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// In-plane extent after downsampling.
    pub size: usize,
    /// Slice count after downsampling.
    pub depth: usize,
    pub tumor_probability: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            depth: 32,
            tumor_probability: 0.9,
        }
    }
}

/// One synthetic patient, `[depth, size, size]` row-major, intensities in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub extents: [usize; 3],
    pub t1w: Vec<f32>,
    pub flair: Vec<f32>,
    pub t1c: Vec<f32>,
    pub labels: Vec<u8>,
    pub has_tumor: bool,
}

/// Intensity pair of a tissue class.
#[derive(Clone, Copy)]
struct Tissue {
    t1w: f64,
    flair: f64,
}

const VENTRICLE: Tissue = Tissue { t1w: 0.15, flair: 0.08 };
const NECROTIC: Tissue = Tissue { t1w: 0.30, flair: 0.45 };
const ENHANCING: Tissue = Tissue { t1w: 0.50, flair: 0.60 };
const EDEMA: Tissue = Tissue { t1w: 0.45, flair: 0.80 };

struct Wave {
    k: [f64; 3],
    phase: f64,
    amp: f64,
}

struct Tumor {
    center: [f64; 3],
    radius: f64,
    necrotic: f64,
    rim: f64,
    edema: f64,
    lobes: Vec<([f64; 3], f64)>,
}

impl Tumor {
    fn sample(rng: &mut ChaCha8Rng, brain: [f64; 3]) -> Self {
        let (theta, z, rho) = (
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(0.0..0.5),
        );
        let center = [rho * theta.cos() * brain[0], rho * theta.sin() * brain[1], z * brain[2]];
        let lobes = (0..3)
            .map(|_| {
                let d: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-6);
                ([d[0] / n, d[1] / n, d[2] / n], rng.gen_range(-0.2..0.2))
            })
            .collect();
        Self {
            center,
            radius: rng.gen_range(0.12..0.22),
            necrotic: rng.gen_range(0.0..0.5),
            rim: rng.gen_range(0.7..0.85),
            edema: rng.gen_range(1.3..1.7),
            lobes,
        }
    }

    /// Scaled distance from the center; the boundary is bumped along a few
    /// random directions.
    fn rho(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if r == 0.0 {
            return 0.0;
        }
        let bump: f64 = self
            .lobes
            .iter()
            .map(|(n, a)| a * (n[0] * d[0] + n[1] * d[1] + n[2] * d[2]) / r)
            .sum();
        r / (self.radius * (1.0 + bump))
    }

    fn label(&self, p: [f64; 3]) -> Option<u8> {
        let rho = self.rho(p);
        if rho < self.necrotic {
            Some(LABEL_NECROTIC)
        } else if rho < self.rim {
            Some(LABEL_ENHANCING)
        } else if rho < self.edema {
            Some(LABEL_EDEMA)
        } else {
            None
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// T1C as a fixed function of T1W, FLAIR and the label.
pub fn t1c_rule(t1w: f64, flair: f64, label: u8) -> f64 {
    let delta = match label {
        LABEL_BACKGROUND => return t1w,
        LABEL_ENHANCING => ENHANCING_BOOST,
        LABEL_NECROTIC => NECROTIC_DROP,
        LABEL_EDEMA => EDEMA_BOOST,
        _ => 0.0,
    };
    (t1w + FLAIR_WEIGHT * flair + delta).clamp(0.0, 1.0)
}

fn normalize(v: &mut [f32]) {
    let (lo, hi) = v
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

pub fn generate_phantom(seed: u64, cfg: &PhantomConfig) -> Result<Phantom> {
    if cfg.size == 0 || cfg.depth == 0 {
        return Err(Error::ZeroExtent(vec![cfg.depth, cfg.size, cfg.size]));
    }
    if !(0.0..=1.0).contains(&cfg.tumor_probability) {
        return Err(Error::InvalidArgument(format!(
            "tumor probability {} outside [0, 1]",
            cfg.tumor_probability
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hd, hs) = (2 * cfg.depth, 2 * cfg.size);
    let head = [
        rng.gen_range(0.85..0.95),
        rng.gen_range(0.88..0.98),
        rng.gen_range(0.9..1.0),
    ];
    let brain = head.map(|a| a * BRAIN_R);
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            k: [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-2.0..2.0),
            ],
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: rng.gen_range(0.01..0.035),
        })
        .collect();
    let ventricle_scale = rng.gen_range(0.8..1.2);
    let has_tumor = rng.gen_bool(cfg.tumor_probability);
    let tumor = has_tumor.then(|| Tumor::sample(&mut rng, brain));

    let n = hd * hs * hs;
    let (mut t1w, mut flair, mut t1c, mut labels) = (vec![0f32; n], vec![0f32; n], vec![0f32; n], vec![0u8; n]);
    for z in 0..hd {
        let pz = (z as f64 + 0.5) / hd as f64 * 2.0 - 1.0;
        for y in 0..hs {
            let py = (y as f64 + 0.5) / hs as f64 * 2.0 - 1.0;
            for x in 0..hs {
                let px = (x as f64 + 0.5) / hs as f64 * 2.0 - 1.0;
                let i = (z * hs + y) * hs + x;
                let r = ((px / head[0]).powi(2) + (py / head[1]).powi(2) + (pz / head[2]).powi(2)).sqrt();
                let (tw, fl, label) = if r >= 1.0 {
                    (0.0, 0.0, LABEL_BACKGROUND)
                } else if r >= SCALP_INNER {
                    (1.0, 1.0, LABEL_BACKGROUND)
                } else if r >= BRAIN_R {
                    (0.05, 0.05, LABEL_BACKGROUND)
                } else {
                    let p = [px, py, pz];
                    let tex: f64 = waves
                        .iter()
                        .map(|w| w.amp * (w.k[0] * px * 3.0 + w.k[1] * py * 3.0 + w.k[2] * pz * 3.0 + w.phase).sin())
                        .sum();
                    let white = 1.0 - smoothstep(0.45, 0.75, r / BRAIN_R);
                    let mut tissue = Tissue {
                        t1w: 0.55 + 0.12 * white + tex,
                        flair: 0.40 - 0.08 * white - 0.5 * tex,
                    };
                    let vr = |cx: f64| {
                        ((px - cx) / (0.07 * ventricle_scale)).powi(2)
                            + ((py + 0.05) / (0.2 * ventricle_scale)).powi(2)
                            + (pz / 0.25).powi(2)
                    };
                    if vr(-0.12) < 1.0 || vr(0.12) < 1.0 {
                        tissue = VENTRICLE;
                    }
                    let mut label = LABEL_BRAIN;
                    if let Some(l) = tumor.as_ref().and_then(|t| t.label(p)) {
                        label = l;
                        tissue = match l {
                            LABEL_NECROTIC => NECROTIC,
                            LABEL_ENHANCING => ENHANCING,
                            _ => EDEMA,
                        };
                    }
                    (tissue.t1w, tissue.flair, label)
                };
                t1w[i] = tw as f32;
                flair[i] = fl as f32;
                t1c[i] = t1c_rule(tw, fl, label) as f32;
                labels[i] = label;
            }
        }
    }

    let ext = [hd, hs, hs];
    let (mut t1w, extents) = bicubic_downsample(&t1w, ext)?;
    let (mut flair, _) = bicubic_downsample(&flair, ext)?;
    let (mut t1c, _) = bicubic_downsample(&t1c, ext)?;
    let (labels, _) = downsample_labels(&labels, ext)?;
    for v in [&mut t1w, &mut flair, &mut t1c] {
        normalize(v);
    }
    Ok(Phantom {
        extents,
        has_tumor: labels.iter().any(|&l| is_tumor(l)),
        t1w,
        flair,
        t1c,
        labels,
    })
}
