//! Synthetic dataset: phantoms, resampling, volume files, splits and
//! slice batching.

mod batch;
mod dataset;
mod phantom;
mod resample;
mod volume_io;

pub use batch::{Batch, SliceSet, Stage, Variant};
pub use dataset::{
    dataset_hash, generate_dataset, read_latents, write_latents, Dataset, GenConfig, LatentSource, Patient,
    PatientFiles, MANIFEST_NAME,
};
pub use phantom::{
    generate_phantom, t1c_rule, Phantom, PhantomConfig, EDEMA_BOOST, ENHANCING_BOOST, FLAIR_WEIGHT, NECROTIC_DROP,
};
pub use resample::{bicubic_downsample, bicubic_downsample_raw, downsample_labels};
pub use volume_io::{read_volume, write_volume, VolumeData, VolumeFile, VOLUME_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NECROTIC: u8 = 1;
pub const LABEL_BRAIN: u8 = 2;
pub const LABEL_EDEMA: u8 = 3;
pub const LABEL_ENHANCING: u8 = 4;

/// Necrotic core, edema or enhancing tumor.
pub fn is_tumor(label: u8) -> bool {
    matches!(label, LABEL_NECROTIC | LABEL_EDEMA | LABEL_ENHANCING)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    T1w,
    Flair,
    T1c,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::T1w, Modality::Flair, Modality::T1c];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1w => "t1w",
            Modality::Flair => "flair",
            Modality::T1c => "t1c",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {s:?}")))
    }
}

fn check_extents(extents: [usize; 3], len: usize, op: &'static str) -> Result<()> {
    if extents.contains(&0) {
        return Err(Error::ZeroExtent(extents.to_vec()));
    }
    if extents.iter().product::<usize>() != len {
        return Err(Error::invalid_shape(op, format!("extents {extents:?} vs {len} values")));
    }
    Ok(())
}

/// One modality of one patient, `[d, h, w]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub patient: String,
    pub modality: Modality,
    pub extents: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(patient: &str, modality: Modality, extents: [usize; 3], data: Vec<f32>) -> Result<Self> {
        check_extents(extents, data.len(), "volume")?;
        Ok(Self {
            patient: patient.to_string(),
            modality,
            extents,
            data,
        })
    }

    pub fn slice_len(&self) -> usize {
        self.extents[1] * self.extents[2]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn to_file(&self) -> VolumeFile {
        VolumeFile {
            extents: self.extents.to_vec(),
            data: VolumeData::Intensity(self.data.clone()),
        }
    }

    pub fn from_file(file: VolumeFile, patient: &str, modality: Modality) -> Result<Self> {
        let extents = three_extents(&file.extents)?;
        match file.data {
            VolumeData::Intensity(data) => Self::new(patient, modality, extents, data),
            VolumeData::Labels(_) => Err(Error::InvalidArgument(format!(
                "expected an intensity volume for {patient}/{modality}, found labels"
            ))),
        }
    }
}

/// Label map over `{0 background, 1 necrotic, 2 brain, 3 edema, 4 enhancing}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    pub patient: String,
    pub extents: [usize; 3],
    pub labels: Vec<u8>,
}

impl SegMap {
    pub fn new(patient: &str, extents: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        check_extents(extents, labels.len(), "segmentation map")?;
        if let Some(&bad) = labels.iter().find(|&&l| l > LABEL_ENHANCING) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..=4")));
        }
        Ok(Self {
            patient: patient.to_string(),
            extents,
            labels,
        })
    }

    pub fn slice_labels(&self, z: usize) -> &[u8] {
        let n = self.extents[1] * self.extents[2];
        &self.labels[z * n..(z + 1) * n]
    }

    pub fn has_tumor(&self) -> bool {
        self.labels.iter().any(|&l| is_tumor(l))
    }

    pub fn to_file(&self) -> VolumeFile {
        VolumeFile {
            extents: self.extents.to_vec(),
            data: VolumeData::Labels(self.labels.clone()),
        }
    }

    pub fn from_file(file: VolumeFile, patient: &str) -> Result<Self> {
        let extents = three_extents(&file.extents)?;
        match file.data {
            VolumeData::Labels(labels) => Self::new(patient, extents, labels),
            VolumeData::Intensity(_) => Err(Error::InvalidArgument(format!(
                "expected a label volume for {patient}, found intensities"
            ))),
        }
    }
}

fn three_extents(e: &[usize]) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(e).map_err(|_| Error::invalid_shape("volume", format!("expected 3 extents, got {e:?}")))
}

/// Label `l` becomes `-1 + l/2`.
pub fn seg_encode_label(label: u8) -> Result<f32> {
    if label > LABEL_ENHANCING {
        return Err(Error::InvalidArgument(format!("label {label} outside 0..=4")));
    }
    Ok(-1.0 + 0.5 * label as f32)
}

/// Nearest encoded level; values beyond `[-1, 1]` snap to the end labels.
pub fn seg_decode_value(v: f32) -> u8 {
    ((v + 1.0) * 2.0).round().clamp(0.0, 4.0) as u8
}

pub fn seg_encode(labels: &[u8]) -> Result<Vec<f32>> {
    labels.iter().map(|&l| seg_encode_label(l)).collect()
}

pub fn seg_decode(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| seg_decode_value(v)).collect()
}

/// Affine map from `[0, 1]` intensities to the model range `[-1, 1]`.
pub fn to_model_range(v: f32) -> f32 {
    2.0 * v - 1.0
}

pub fn from_model_range(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Reverses the last axis of every `width`-long row in place.
pub fn flip_rows(data: &mut [f32], width: usize) {
    for row in data.chunks_exact_mut(width) {
        row.reverse();
    }
}

/// One training example, every array `[c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub seg: Vec<f32>,
    pub latent: Option<Vec<f32>>,
    pub width: usize,
    pub latent_width: usize,
}

/// With probability one half flips the inputs, target, segmentation slice
/// and latent together left to right. Returns whether it flipped.
pub fn augment_flip<R: Rng>(sample: &mut Sample, rng: &mut R) -> bool {
    if !rng.gen_bool(0.5) {
        return false;
    }
    flip_rows(&mut sample.input, sample.width);
    flip_rows(&mut sample.target, sample.width);
    flip_rows(&mut sample.seg, sample.width);
    if let Some(l) = &mut sample.latent {
        flip_rows(l, sample.latent_width);
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Largest-remainder apportionment of `n` items to `fractions`; ties in the
/// remainder go to the earlier fraction.
pub fn apportion(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fractions {fractions:?} must be non-negative"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "fractions {fractions:?} sum to {total}, not 1"
        )));
    }
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Seeded shuffle of patient ids into train/val/test by largest remainder.
pub fn split_patients(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "{} patients cannot fill 3 splits",
            ids.len()
        )));
    }
    let mut uniq = ids.to_vec();
    uniq.sort();
    uniq.dedup();
    if uniq.len() != ids.len() {
        return Err(Error::InvalidArgument("duplicate patient ids".into()));
    }
    let counts = apportion(ids.len(), &fractions)?;
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(3);
    let mut start = 0;
    for c in counts {
        let mut part = shuffled[start..start + c].to_vec();
        part.sort();
        parts.push(part);
        start += c;
    }
    let test = parts.pop().unwrap_or_default();
    let val = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(DatasetSplit { train, val, test })
}
