//! Flat binary weight container.
//!
//! Layout, all integers little-endian:
//! magic `DKWF`, `u32` version, `u32` section count, then per section a `u32`
//! name length, UTF-8 name, `u32` rank, `u64` dims, and `f64` values.

use std::fs;
use std::path::Path;

use crate::blocks::{ClueMergeWeights, LocalSpatialWeights, OdssWeights, ResGatedWeights, StemWeights};
use crate::carafe::CarafeWeights;
use crate::error::{Error, Result};
use crate::ssm::{DiscreteSsm, Matrix, Ss2dParams};
use crate::tensor::{ConvWeights, FeatureMap, LayerNorm, NormStats};

pub const MAGIC: &[u8; 4] = b"DKWF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named sections in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    sections: Vec<Section>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    /// Adds or replaces a section.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!(
                "section `{name}` shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        let s = Section {
            name: name.to_string(),
            shape,
            data,
        };
        match self.sections.iter_mut().find(|x| x.name == name) {
            Some(slot) => *slot = s,
            None => self.sections.push(s),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::MissingSection(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail(0, "bad magic, expected DKWF"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let count = r.u32("section count")?;
        let mut file = WeightFile::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "section name")?)
                .map_err(|_| r.fail(at + 4, "section name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.fail(at, format!("section `{name}` size overflows")))?;
            let raw = r.take(
                n.checked_mul(8).ok_or_else(|| r.fail(at, "section size overflows"))?,
                "section data",
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if file.contains(&name) {
                return Err(r.fail(at, format!("duplicate section `{name}`")));
            }
            file.sections.push(Section { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes after the last section"));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    fn vector(&self, name: &str, len: Option<usize>) -> Result<Vec<f64>> {
        let s = self.get(name)?;
        if s.shape.len() != 1 || len.is_some_and(|n| s.shape[0] != n) {
            return Err(Error::dim(format!("section `{name}` has shape {:?}", s.shape)));
        }
        Ok(s.data.clone())
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.vector(name, Some(1))?[0])
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.source.into(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.bytes.len(), format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Types that can be stored under a name prefix.
pub trait WeightSet: Sized {
    fn store(&self, file: &mut WeightFile, prefix: &str) -> Result<()>;
    fn load(file: &WeightFile, prefix: &str) -> Result<Self>;
}

impl WeightSet for ConvWeights {
    fn store(&self, file: &mut WeightFile, prefix: &str) -> Result<()> {
        file.insert(
            &format!("{prefix}.kernel"),
            self.kernel.shape().to_vec(),
            self.kernel.data().to_vec(),
        )?;
        if let Some(b) = &self.bias {
            file.insert(&format!("{prefix}.bias"), vec![b.len()], b.clone())?;
        }
        let meta = [self.stride, self.padding, self.groups].map(|v| v as f64).to_vec();
        file.insert(&format!("{prefix}.meta"), vec![3], meta)
    }

    fn load(file: &WeightFile, prefix: &str) -> Result<Self> {
        let k = file.get(&format!("{prefix}.kernel"))?;
        let kernel = FeatureMap::new(k.shape.clone(), k.data.clone())?;
        let bias_name = format!("{prefix}.bias");
        let bias = if file.contains(&bias_name) {
            Some(file.vector(&bias_name, None)?)
        } else {
            None
        };
        let meta = file.vector(&format!("{prefix}.meta"), Some(3))?;
        let as_usize = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(Error::param(format!("`{prefix}.meta` holds non-integer {v}")))
            }
        };
        ConvWeights::new(kernel, bias, as_usize(meta[0])?, as_usize(meta[1])?, as_usize(meta[2])?)
    }
}

impl WeightSet for NormStats {
    fn store(&self, file: &mut WeightFile, prefix: &str) -> Result<()> {
        let c = self.mean.len();
        let data = [&self.mean, &self.variance, &self.scale, &self.shift]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        file.insert(prefix, vec![4, c], data)?;
        file.insert(&format!("{prefix}.eps"), vec![1], vec![self.epsilon])
    }

    fn load(file: &WeightFile, prefix: &str) -> Result<Self> {
        let s = file.get(prefix)?;
        if s.shape.len() != 2 || s.shape[0] != 4 {
            return Err(Error::dim(format!("norm section `{prefix}` has shape {:?}", s.shape)));
        }
        let rows: Vec<Vec<f64>> = s.data.chunks(s.shape[1]).map(<[f64]>::to_vec).collect();
        let [m, v, sc, sh]: [Vec<f64>; 4] = rows.try_into().map_err(|_| Error::dim("norm section rows"))?;
        NormStats::new(m, v, sc, sh, file.scalar(&format!("{prefix}.eps"))?)
    }
}

impl WeightSet for LayerNorm {
    fn store(&self, file: &mut WeightFile, prefix: &str) -> Result<()> {
        let data = self.scale.iter().chain(&self.shift).copied().collect();
        file.insert(prefix, vec![2, self.scale.len()], data)?;
        file.insert(&format!("{prefix}.eps"), vec![1], vec![self.epsilon])
    }

    fn load(file: &WeightFile, prefix: &str) -> Result<Self> {
        let s = file.get(prefix)?;
        if s.shape.len() != 2 || s.shape[0] != 2 {
            return Err(Error::dim(format!(
                "layer norm section `{prefix}` has shape {:?}",
                s.shape
            )));
        }
        let c = s.shape[1];
        LayerNorm::new(
            s.data[..c].to_vec(),
            s.data[c..].to_vec(),
            file.scalar(&format!("{prefix}.eps"))?,
        )
    }
}

fn store_matrix(file: &mut WeightFile, name: &str, m: &Matrix) -> Result<()> {
    file.insert(name, vec![m.rows(), m.cols()], m.data().to_vec())
}

fn load_matrix(file: &WeightFile, name: &str) -> Result<Matrix> {
    let s = file.get(name)?;
    if s.shape.len() != 2 {
        return Err(Error::dim(format!("matrix section `{name}` has shape {:?}", s.shape)));
    }
    Matrix::new(s.shape[0], s.shape[1], s.data.clone())
}

impl WeightSet for DiscreteSsm {
    fn store(&self, file: &mut WeightFile, prefix: &str) -> Result<()> {
        store_matrix(file, &format!("{prefix}.a_bar"), &self.a_bar)?;
        store_matrix(file, &format!("{prefix}.b_bar"), &self.b_bar)?;
        store_matrix(file, &format!("{prefix}.c"), &self.c)
    }

    fn load(file: &WeightFile, prefix: &str) -> Result<Self> {
        DiscreteSsm::new(
            load_matrix(file, &format!("{prefix}.a_bar"))?,
            load_matrix(file, &format!("{prefix}.b_bar"))?,
            load_matrix(file, &format!("{prefix}.c"))?,
        )
    }
}

impl WeightSet for Ss2dParams {
    fn store(&self, file: &mut WeightFile, prefix: &str) -> Result<()> {
        for (k, d) in self.directions.iter().enumerate() {
            d.store(file, &format!("{prefix}.dir{k}"))?;
        }
        Ok(())
    }

    fn load(file: &WeightFile, prefix: &str) -> Result<Self> {
        let dirs = (0..4)
            .map(|k| DiscreteSsm::load(file, &format!("{prefix}.dir{k}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            directions: dirs
                .try_into()
                .map_err(|_| Error::dim("expected four scan directions"))?,
        })
    }
}

/// Implements [`WeightSet`] for a struct by delegating to each field.
macro_rules! composite {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl WeightSet for $ty {
            fn store(&self, file: &mut WeightFile, prefix: &str) -> Result<()> {
                $( self.$field.store(file, &format!(concat!("{}.", stringify!($field)), prefix))?; )+
                Ok(())
            }

            fn load(file: &WeightFile, prefix: &str) -> Result<Self> {
                Ok(Self {
                    $( $field: WeightSet::load(file, &format!(concat!("{}.", stringify!($field)), prefix))?, )+
                })
            }
        }
    };
}

composite!(StemWeights { conv1, bn1, conv2, bn2 });
composite!(ClueMergeWeights { proj });
composite!(LocalSpatialWeights { dw, bn, pw1, pw2 });
composite!(ResGatedWeights { fc1, fc2, dw, out });
composite!(OdssWeights {
    entry,
    entry_bn,
    ls,
    ln1,
    ss2d,
    ln2,
    rg
});
composite!(CarafeWeights { compress, encode });

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn byte_layout() {
        let mut f = WeightFile::new();
        f.insert("w", vec![2], vec![1.0, -2.5]).unwrap();
        let b = f.to_bytes();
        assert_eq!(&b[..4], b"DKWF");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'w');
        assert_eq!(&b[17..21], &1u32.to_le_bytes());
        assert_eq!(&b[21..29], &2u64.to_le_bytes());
        assert_eq!(&b[29..37], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 45);
        assert_eq!(WeightFile::from_bytes(&b, "m").unwrap(), f);
    }

    #[test]
    fn rejects_corrupt_files() {
        let mut f = WeightFile::new();
        f.insert("w", vec![2], vec![1.0, 2.0]).unwrap();
        let b = f.to_bytes();
        assert!(matches!(
            WeightFile::from_bytes(b"XXXX", "m"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            WeightFile::from_bytes(&b[..40], "m"),
            Err(Error::Format { offset: 40, .. })
        ));
        let mut extra = b.clone();
        extra.push(0);
        assert!(WeightFile::from_bytes(&extra, "m").is_err());
        let mut v2 = b;
        v2[4] = 2;
        assert!(matches!(
            WeightFile::from_bytes(&v2, "m"),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!(f.insert("bad", vec![3], vec![0.0]).is_err());
        assert!(matches!(f.get("nope"), Err(Error::MissingSection(_))));
    }

    #[test]
    fn blocks_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let odss = OdssWeights::random(&mut rng, 3, 5, 2);
        let stem = StemWeights::random(&mut rng, 3, 4, 6);
        let mut f = WeightFile::new();
        odss.store(&mut f, "odss").unwrap();
        stem.store(&mut f, "stem").unwrap();
        let back = WeightFile::from_bytes(&f.to_bytes(), "m").unwrap();
        assert_eq!(OdssWeights::load(&back, "odss").unwrap(), odss);
        assert_eq!(StemWeights::load(&back, "stem").unwrap(), stem);
        assert!(matches!(
            OdssWeights::load(&back, "other"),
            Err(Error::MissingSection(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        let mut f = WeightFile::new();
        ConvWeights::zeros(2, 2, 3, 1, 1, 2, true).store(&mut f, "c").unwrap();
        f.save(&p).unwrap();
        assert_eq!(WeightFile::load(&p).unwrap(), f);
        assert_eq!(
            ConvWeights::load(&f, "c").unwrap(),
            ConvWeights::zeros(2, 2, 3, 1, 1, 2, true)
        );
    }
}
