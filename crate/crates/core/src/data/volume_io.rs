//! `TAV1` volume files.
//!
//! Layout: magic `TAV1`, `u16` version, `u8` kind (0 intensity, 1 labels),
//! `u8` extent count, extents as `u32`, the payload (`f32` or `u8`), and a
//! trailing FNV-1a 64 checksum of everything before it. All integers and
//! reals are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{atomic_write, fnv64, put_f32s, read_file, Reader};

pub const VOLUME_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"TAV1";

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Intensity(Vec<f32>),
    Labels(Vec<u8>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::Intensity(v) => v.len(),
            VolumeData::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Raw contents of a volume file: any number of extents and a payload.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub extents: Vec<usize>,
    pub data: VolumeData,
}

impl VolumeFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.extents.is_empty() || self.extents.contains(&0) {
            return Err(Error::ZeroExtent(self.extents.clone()));
        }
        let count = u8::try_from(self.extents.len())
            .map_err(|_| Error::InvalidArgument(format!("{} extents do not fit the header", self.extents.len())))?;
        let n: usize = self.extents.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid_shape(
                "write_volume",
                format!(
                    "extents {:?} hold {n} values, payload has {}",
                    self.extents,
                    self.data.len()
                ),
            ));
        }
        let mut out = Vec::with_capacity(16 + 4 * self.extents.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        out.push(match self.data {
            VolumeData::Intensity(_) => 0,
            VolumeData::Labels(_) => 1,
        });
        out.push(count);
        for &e in &self.extents {
            let e = u32::try_from(e)
                .map_err(|_| Error::InvalidArgument(format!("extent {e} exceeds the u32 header field")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        match &self.data {
            VolumeData::Intensity(v) => put_f32s(&mut out, v),
            VolumeData::Labels(v) => out.extend_from_slice(v),
        }
        let sum = fnv64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "TAV1".into(),
            });
        }
        let version = r.u16("version")?;
        if version != VOLUME_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let kind = r.u8("kind")?;
        if kind > 1 {
            return Err(Error::InvalidArgument(format!(
                "{}: unknown volume kind {kind}",
                path.display()
            )));
        }
        let count = r.u8("extent count")? as usize;
        let mut extents = Vec::with_capacity(count);
        for _ in 0..count {
            extents.push(r.u32("extent")? as usize);
        }
        if extents.is_empty() || extents.contains(&0) {
            return Err(Error::ZeroExtent(extents));
        }
        let n = extents
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::ExtentOverflow {
                path: path.to_path_buf(),
                detail: format!("extents {extents:?}"),
            })?;
        let data = if kind == 0 {
            VolumeData::Intensity(r.f32s(n, "intensities")?)
        } else {
            VolumeData::Labels(r.take(n, "labels")?.to_vec())
        };
        let body_end = r.pos();
        let stored = r.u64("checksum")?;
        if r.pos() != bytes.len() {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos()),
            });
        }
        if fnv64(&bytes[..body_end]) != stored {
            return Err(Error::ChecksumMismatch {
                path: path.to_path_buf(),
            });
        }
        Ok(Self { extents, data })
    }
}

pub fn write_volume(path: &Path, file: &VolumeFile) -> Result<()> {
    atomic_write(path, &file.to_bytes()?)
}

pub fn read_volume(path: &Path) -> Result<VolumeFile> {
    VolumeFile::from_bytes(&read_file(path)?, path)
}
