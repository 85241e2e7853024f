//! Factor-2 downsampling of 3-D volumes.

use crate::error::{Error, Result};

/// Cubic-convolution weights for a sample halfway between two grid points
/// with `a = -0.5`.
const HALF_TAPS: [f64; 4] = [-0.0625, 0.5625, 0.5625, -0.0625];

fn check_even(extents: [usize; 3], op: &'static str) -> Result<()> {
    if extents.contains(&0) {
        return Err(Error::ZeroExtent(extents.to_vec()));
    }
    if extents.iter().any(|e| e % 2 != 0) {
        return Err(Error::invalid_shape(op, format!("extents {extents:?} must be even")));
    }
    Ok(())
}

/// Halves one axis of a row-major array viewed as `[outer, len, inner]`.
/// Output sample `i` sits at input coordinate `2i + 0.5`; taps past the
/// border are clamped to the edge sample.
fn halve_axis(src: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let half = len / 2;
    let mut out = vec![0.0; outer * half * inner];
    for o in 0..outer {
        let s = &src[o * len * inner..(o + 1) * len * inner];
        let d = &mut out[o * half * inner..(o + 1) * half * inner];
        for i in 0..half {
            let row = &mut d[i * inner..(i + 1) * inner];
            for (t, &w) in HALF_TAPS.iter().enumerate() {
                let j = (2 * i + t).saturating_sub(1).min(len - 1);
                for (r, &v) in row.iter_mut().zip(&s[j * inner..(j + 1) * inner]) {
                    *r += w * v;
                }
            }
        }
    }
    out
}

/// Bicubic downsampling by two along every axis of a `[d, h, w]` volume,
/// clamped to `[0, 1]` afterwards.
pub fn bicubic_downsample(data: &[f32], extents: [usize; 3]) -> Result<(Vec<f32>, [usize; 3])> {
    let out = bicubic_downsample_raw(&data.iter().map(|&v| v as f64).collect::<Vec<_>>(), extents)?;
    let [d, h, w] = extents;
    Ok((
        out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        [d / 2, h / 2, w / 2],
    ))
}

/// Unclamped cubic-convolution downsampling.
pub fn bicubic_downsample_raw(data: &[f64], extents: [usize; 3]) -> Result<Vec<f64>> {
    check_even(extents, "bicubic_downsample")?;
    let [d, h, w] = extents;
    if data.len() != d * h * w {
        return Err(Error::invalid_shape(
            "bicubic_downsample",
            format!("{} values for extents {extents:?}", data.len()),
        ));
    }
    let a = halve_axis(data, d * h, w, 1);
    let b = halve_axis(&a, d, h, w / 2);
    Ok(halve_axis(&b, 1, d, (h / 2) * (w / 2)))
}

/// Label downsampling by the most frequent label of each 2×2×2 block; ties
/// go to the larger label so that thin tumor structures survive.
pub fn downsample_labels(labels: &[u8], extents: [usize; 3]) -> Result<(Vec<u8>, [usize; 3])> {
    check_even(extents, "downsample_labels")?;
    let [d, h, w] = extents;
    if labels.len() != d * h * w {
        return Err(Error::invalid_shape(
            "downsample_labels",
            format!("{} labels for extents {extents:?}", labels.len()),
        ));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::with_capacity(od * oh * ow);
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let mut counts = [0u8; 256];
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let l = labels[((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx];
                            counts[l as usize] += 1;
                        }
                    }
                }
                let best = (0..256usize).max_by_key(|&l| (counts[l], l)).unwrap_or(0);
                out.push(best as u8);
            }
        }
    }
    Ok((out, [od, oh, ow]))
}
