//! On-disk phantom datasets.
//!
//! A dataset directory holds one `TAV1` file per patient and modality plus
//! the segmentation map, and `manifest.tsv` with one row per patient:
//! `patient  split  t1w  flair  t1c  seg` (paths relative to the directory).

use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;

use super::phantom::{generate_phantom, PhantomConfig};
use super::volume_io::{read_volume, write_volume, VolumeData, VolumeFile};
use super::{split_patients, Modality, SegMap, Split, Volume};
use crate::error::{Error, Result};
use crate::util::{atomic_write, fnv64, read_file};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "patient\tsplit\tt1w\tflair\tt1c\tseg";

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub patients: usize,
    pub image_size: usize,
    pub depth: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub tumor_probability: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            patients: 64,
            image_size: 64,
            depth: 32,
            seed: 0,
            fractions: [0.75, 0.125, 0.125],
            tumor_probability: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientFiles {
    pub id: String,
    pub split: Split,
    pub t1w: String,
    pub flair: String,
    pub t1c: String,
    pub seg: String,
}

impl PatientFiles {
    fn paths(&self) -> [&str; 4] {
        [&self.t1w, &self.flair, &self.t1c, &self.seg]
    }
}

fn render_manifest(rows: &[PatientFiles]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id, r.split, r.t1w, r.flair, r.t1c, r.seg
        ));
    }
    s
}

fn parse_manifest(text: &str, path: &Path) -> Result<Vec<PatientFiles>> {
    let bad = |line: usize, what: &str| Error::Config(format!("{}:{}: {what}", path.display(), line + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(bad(0, "missing manifest header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(i, "expected 6 tab-separated fields"));
        }
        rows.push(PatientFiles {
            id: f[0].to_string(),
            split: f[1].parse()?,
            t1w: f[2].to_string(),
            flair: f[3].to_string(),
            t1c: f[4].to_string(),
            seg: f[5].to_string(),
        });
    }
    if rows.is_empty() {
        return Err(bad(0, "manifest lists no patients"));
    }
    Ok(rows)
}

fn read_manifest(dir: &Path) -> Result<Vec<PatientFiles>> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no dataset manifest at {} (run gen-data first)",
            path.display()
        )));
    }
    let bytes = read_file(&path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_manifest(text, &path)
}

/// Phantom seed of one patient.
fn patient_seed(root: u64, id: &str) -> u64 {
    fnv64(format!("{root}/{id}").as_bytes())
}

/// Writes a phantom dataset and returns its hash.
pub fn generate_dataset(dir: &Path, cfg: &GenConfig) -> Result<u64> {
    let ids: Vec<String> = (0..cfg.patients).map(|i| format!("P{i:03}")).collect();
    let split = split_patients(&ids, cfg.fractions, cfg.seed)?;
    let pcfg = PhantomConfig {
        size: cfg.image_size,
        depth: cfg.depth,
        tumor_probability: cfg.tumor_probability,
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let s = Split::ALL
            .into_iter()
            .find(|&s| split.get(s).contains(id))
            .expect("split covers every patient");
        let ph = generate_phantom(patient_seed(cfg.seed, id), &pcfg)?;
        let row = PatientFiles {
            id: id.clone(),
            split: s,
            t1w: format!("{id}_t1w.tav"),
            flair: format!("{id}_flair.tav"),
            t1c: format!("{id}_t1c.tav"),
            seg: format!("{id}_seg.tav"),
        };
        for (name, data) in [(&row.t1w, ph.t1w), (&row.flair, ph.flair), (&row.t1c, ph.t1c)] {
            let file = VolumeFile {
                extents: ph.extents.to_vec(),
                data: VolumeData::Intensity(data),
            };
            write_volume(&dir.join(name), &file)?;
        }
        let seg = VolumeFile {
            extents: ph.extents.to_vec(),
            data: VolumeData::Labels(ph.labels),
        };
        write_volume(&dir.join(&row.seg), &seg)?;
        rows.push(row);
    }
    atomic_write(&dir.join(MANIFEST_NAME), render_manifest(&rows).as_bytes())?;
    dataset_hash(dir)
}

/// FNV-1a over the manifest followed by every file it lists, in order.
pub fn dataset_hash(dir: &Path) -> Result<u64> {
    let rows = read_manifest(dir)?;
    let mut h = FnvHasher::default();
    h.write(&read_file(&dir.join(MANIFEST_NAME))?);
    for r in &rows {
        for p in r.paths() {
            h.write(&read_file(&dir.join(p))?);
        }
    }
    Ok(h.finish())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub id: String,
    pub split: Split,
    pub t1w: Volume,
    pub flair: Volume,
    pub t1c: Volume,
    pub seg: SegMap,
}

impl Patient {
    pub fn volume(&self, m: Modality) -> &Volume {
        match m {
            Modality::T1w => &self.t1w,
            Modality::Flair => &self.flair,
            Modality::T1c => &self.t1c,
        }
    }

    pub fn depth(&self) -> usize {
        self.seg.extents[0]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub patients: Vec<Patient>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let rows = read_manifest(dir)?;
        let mut patients = Vec::with_capacity(rows.len());
        for r in rows {
            let vol = |p: &str, m| Volume::from_file(read_volume(&dir.join(p))?, &r.id, m);
            let p = Patient {
                t1w: vol(&r.t1w, Modality::T1w)?,
                flair: vol(&r.flair, Modality::Flair)?,
                t1c: vol(&r.t1c, Modality::T1c)?,
                seg: SegMap::from_file(read_volume(&dir.join(&r.seg))?, &r.id)?,
                id: r.id,
                split: r.split,
            };
            if [&p.t1w, &p.flair, &p.t1c].iter().any(|v| v.extents != p.seg.extents) {
                return Err(Error::invalid_shape(
                    "dataset",
                    format!("volumes of patient {} disagree on extents", p.id),
                ));
            }
            patients.push(p);
        }
        let ext = patients[0].seg.extents;
        if ext[1] != ext[2] || patients.iter().any(|p| p.seg.extents != ext) {
            return Err(Error::invalid_shape(
                "dataset",
                "every patient must share one extent with square slices".to_string(),
            ));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            patients,
        })
    }

    pub fn image_size(&self) -> usize {
        self.patients[0].seg.extents[1]
    }

    pub fn depth(&self) -> usize {
        self.patients[0].seg.extents[0]
    }

    pub fn split(&self, s: Split) -> Vec<&Patient> {
        self.patients.iter().filter(|p| p.split == s).collect()
    }

    pub fn patient(&self, id: &str) -> Option<&Patient> {
        self.patients.iter().find(|p| p.id == id)
    }
}

/// Where the conditioning latents of a patient come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    /// Encoded ground-truth segmentation.
    GroundTruth,
    /// Encoded predicted segmentation.
    Predicted,
}

impl LatentSource {
    pub fn dir_name(self) -> &'static str {
        match self {
            LatentSource::GroundTruth => "gt",
            LatentSource::Predicted => "pred",
        }
    }
}

/// Stores per-slice latents `[depth, c, h, w]` of one patient.
pub fn write_latents(dir: &Path, patient: &str, extents: [usize; 4], data: Vec<f32>) -> Result<()> {
    let file = VolumeFile {
        extents: extents.to_vec(),
        data: VolumeData::Intensity(data),
    };
    write_volume(&dir.join(format!("{patient}.tav")), &file)
}

pub fn read_latents(dir: &Path, patient: &str) -> Result<([usize; 4], Vec<f32>)> {
    let path = dir.join(format!("{patient}.tav"));
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "latents for patient {patient} not found at {} (train the latent stage first)",
            path.display()
        )));
    }
    let f = read_volume(&path)?;
    let extents = <[usize; 4]>::try_from(f.extents.as_slice())
        .map_err(|_| Error::invalid_shape("latents", format!("expected 4 extents, got {:?}", f.extents)))?;
    match f.data {
        VolumeData::Intensity(d) => Ok((extents, d)),
        VolumeData::Labels(_) => Err(Error::InvalidArgument(format!(
            "{}: latents must be real",
            path.display()
        ))),
    }
}
