//! Axial slice batching for the three training stages.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::dataset::Patient;
use super::{augment_flip, seg_encode_label, to_model_range, LatentSource, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Synthesis model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Unconditioned, T1W and FLAIR input.
    MprVit,
    TavitT1w,
    TavitT1wFlair,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MprVit, Variant::TavitT1w, Variant::TavitT1wFlair];
    pub const BASELINE: Variant = Variant::TavitT1wFlair;

    pub fn name(self) -> &'static str {
        match self {
            Variant::MprVit => "mprvit",
            Variant::TavitT1w => "tavit-t1w",
            Variant::TavitT1wFlair => "tavit-t1w-flair",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Variant::TavitT1w => 1,
            _ => 2,
        }
    }

    pub fn conditioned(self) -> bool {
        self != Variant::MprVit
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown variant {s:?} (mprvit, tavit-t1w, tavit-t1w-flair)"))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// T1W and FLAIR to the encoded segmentation map.
    Segmentation,
    /// Encoded segmentation map to itself.
    Latent,
    Synthesis(Variant),
}

impl Stage {
    pub fn in_channels(self) -> usize {
        match self {
            Stage::Segmentation => 2,
            Stage::Latent => 1,
            Stage::Synthesis(v) => v.in_channels(),
        }
    }

    pub fn needs_latents(self) -> bool {
        matches!(self, Stage::Synthesis(v) if v.conditioned())
    }
}

impl LatentSource {
    /// Ground-truth latents for training and validation, predicted ones for
    /// testing.
    pub fn for_split(split: Split) -> Self {
        match split {
            Split::Train | Split::Val => LatentSource::GroundTruth,
            Split::Test => LatentSource::Predicted,
        }
    }
}

/// A stacked batch: `input[n, c, s, s]`, `target[n, 1, s, s]`, encoded
/// `seg[n, 1, s, s]`, and `latent[n, C, s/4, s/4]` for conditioned stages.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub seg: Tensor<f32>,
    pub latent: Option<Tensor<f32>>,
    /// `(patient index, slice)` of every row.
    pub keys: Vec<(usize, usize)>,
}

/// The axial slices of a group of patients, viewed through one stage.
pub struct SliceSet<'a> {
    stage: Stage,
    patients: Vec<&'a Patient>,
    latents: Option<Vec<Vec<f32>>>,
    latent_shape: [usize; 3],
    index: Vec<(usize, usize)>,
}

impl<'a> SliceSet<'a> {
    /// `latents[i]` holds `[depth, c, h, w]` values for `patients[i]`; they
    /// are required iff the stage is conditioned.
    pub fn new(patients: Vec<&'a Patient>, stage: Stage, latents: Option<(Vec<Vec<f32>>, [usize; 3])>) -> Result<Self> {
        if patients.is_empty() {
            return Err(Error::InvalidArgument("slice set needs at least one patient".into()));
        }
        let (latents, latent_shape) = match (stage.needs_latents(), latents) {
            (true, None) => {
                return Err(Error::MissingPrerequisite(format!(
                    "{stage:?} batches need segmentation latents"
                )))
            }
            (true, Some((l, shape))) => {
                if l.len() != patients.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} latent volumes for {} patients",
                        l.len(),
                        patients.len()
                    )));
                }
                for (p, v) in patients.iter().zip(&l) {
                    if v.len() != p.depth() * shape.iter().product::<usize>() {
                        return Err(Error::invalid_shape(
                            "latents",
                            format!(
                                "patient {} has {} latent values, expected depth x {shape:?}",
                                p.id,
                                v.len()
                            ),
                        ));
                    }
                }
                (Some(l), shape)
            }
            (false, _) => (None, [0; 3]),
        };
        let index = patients
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.depth()).map(move |z| (i, z)))
            .collect();
        Ok(Self {
            stage,
            patients,
            latents,
            latent_shape,
            index,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn patients(&self) -> &[&'a Patient] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &[(usize, usize)] {
        &self.index
    }

    pub fn image_size(&self) -> usize {
        self.patients[0].seg.extents[1]
    }

    /// Positions into [`Self::index`] grouped by patient.
    pub fn positions_by_patient(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.patients.len()];
        for (pos, &(p, _)) in self.index.iter().enumerate() {
            out[p].push(pos);
        }
        out
    }

    /// Keeps `k` evenly spaced slices of every patient.
    pub fn keep_even(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "must keep at least one slice per patient".into(),
            ));
        }
        let mut index = Vec::new();
        for (i, p) in self.patients.iter().enumerate() {
            let d = p.depth();
            let k = k.min(d);
            index.extend((0..k).map(|j| (i, (2 * j + 1) * d / (2 * k))));
        }
        self.index = index;
        Ok(self)
    }

    pub fn sample(&self, pos: usize) -> Sample {
        let (p, z) = self.index[pos];
        let pat = self.patients[p];
        let seg: Vec<f32> = pat
            .seg
            .slice_labels(z)
            .iter()
            .map(|&l| seg_encode_label(l).unwrap_or(-1.0))
            .collect();
        let model = |v: &[f32]| v.iter().map(|&x| to_model_range(x)).collect::<Vec<_>>();
        let (input, target) = match self.stage {
            Stage::Segmentation => (
                [model(pat.t1w.slice(z)), model(pat.flair.slice(z))].concat(),
                seg.clone(),
            ),
            Stage::Latent => (seg.clone(), seg.clone()),
            Stage::Synthesis(v) => {
                let input = if v.in_channels() == 1 {
                    model(pat.t1w.slice(z))
                } else {
                    [model(pat.t1w.slice(z)), model(pat.flair.slice(z))].concat()
                };
                (input, model(pat.t1c.slice(z)))
            }
        };
        let latent = self.latents.as_ref().map(|l| {
            let n: usize = self.latent_shape.iter().product();
            l[p][z * n..(z + 1) * n].to_vec()
        });
        Sample {
            input,
            target,
            seg,
            latent,
            width: self.image_size(),
            latent_width: self.latent_shape[2],
        }
    }

    /// Stacks the slices at `positions`, flipping each with probability one
    /// half when `flip` is given.
    pub fn batch<R: Rng>(&self, positions: &[usize], mut flip: Option<&mut R>) -> Result<Batch> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let s = self.image_size();
        let n = positions.len();
        let c = self.stage.in_channels();
        let (mut input, mut target, mut seg) = (
            Vec::with_capacity(n * c * s * s),
            Vec::with_capacity(n * s * s),
            Vec::with_capacity(n * s * s),
        );
        let mut latent = self.latents.as_ref().map(|_| Vec::new());
        for &pos in positions {
            let mut smp = self.sample(pos);
            if let Some(rng) = flip.as_deref_mut() {
                augment_flip(&mut smp, rng);
            }
            input.extend_from_slice(&smp.input);
            target.extend_from_slice(&smp.target);
            seg.extend_from_slice(&smp.seg);
            if let (Some(l), Some(v)) = (&mut latent, smp.latent) {
                l.extend_from_slice(&v);
            }
        }
        let [lc, lh, lw] = self.latent_shape;
        Ok(Batch {
            input: Tensor::from_vec(&[n, c, s, s], input)?,
            target: Tensor::from_vec(&[n, 1, s, s], target)?,
            seg: Tensor::from_vec(&[n, 1, s, s], seg)?,
            latent: latent.map(|l| Tensor::from_vec(&[n, lc, lh, lw], l)).transpose()?,
            keys: positions.iter().map(|&p| self.index[p]).collect(),
        })
    }

    /// Batches in slice order; the last batch may be short.
    pub fn batches(&self, batch_size: usize) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let positions: Vec<usize> = (0..self.len()).collect();
        Ok((0..self.len().div_ceil(batch_size)).map(move |b| {
            let end = ((b + 1) * batch_size).min(positions.len());
            self.batch::<rand_chacha::ChaCha8Rng>(&positions[b * batch_size..end], None)
        }))
    }
}
