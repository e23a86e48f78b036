//! Files: the `HGDT` tensor format, 8-bit PGM renders and JSON manifests
//! for checkpoints and pyramids.
//!
//! An `HGDT` file is the magic `HGDT`, one dtype byte (0 = f32, 1 = f64),
//! one rank byte, `rank` little-endian `u32` extents, then the row-major
//! little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpn::{Pyramid, LEVELS};
use crate::params::Parameters;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"HGDT";

/// A tensor read from disk in whatever precision it was stored.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// Returns the tensor if it is stored as `T`, without conversion.
    pub fn exact<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Format(format!(
                "stored dtype is {:?}, requested {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(self.cast())
    }
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit in one byte", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn decode_payload<T: Real>(dims: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(dims, data)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing HGDT magic".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::Format(format!("unknown dtype byte {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated extents".into()));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != numel * dtype.size() {
        return Err(Error::Format(format!(
            "payload is {} bytes, dims {dims:?} of {dtype:?} need {}",
            payload.len(),
            numel * dtype.size()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(dims, payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(dims, payload)?),
    })
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let bytes = encode_tensor(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Binary 8-bit PGM of one `h×w` map, min-max normalized to `0..=255`.
/// A constant map renders black.
pub fn pgm_bytes<T: Real>(map: &[T], h: usize, w: usize) -> Result<Vec<u8>> {
    if map.len() != h * w {
        return Err(Error::dim("pgm", "pixel count", h * w, map.len()));
    }
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|v| {
        if span > 0.0 {
            ((v.as_f64() - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Writes every channel of a `(c, h, w)` tensor as `{stem}_{i:03}.pgm`.
pub fn export_channel_pgms<T: Real>(dir: &Path, stem: &str, maps: &Tensor<T>) -> Result<Vec<PathBuf>> {
    let (c, h, w) = maps.chw()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..c)
        .map(|i| {
            let path = dir.join(format!("{stem}_{i:03}.pgm"));
            fs::write(&path, pgm_bytes(maps.channel(i), h, w)?).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub tensors: Vec<TensorEntry>,
}

pub const MANIFEST: &str = "manifest.json";

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Saves every tensor of `params` as `<name>.hgdt` next to a manifest.
pub fn save_checkpoint<T: Real>(dir: &Path, params: &dyn Parameters<T>) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, t) in params.named() {
        let file = format!("{name}.hgdt");
        save_tensor(&dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name,
            file,
            dims: t.dims().to_vec(),
            dtype: T::DTYPE,
        });
    }
    let manifest = CheckpointManifest { tensors };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads a checkpoint into an already-shaped parameter record. Every
/// member must be present with matching dims; values convert to `T`.
pub fn load_checkpoint<T: Real>(dir: &Path, params: &mut dyn Parameters<T>) -> Result<()> {
    let manifest: CheckpointManifest = read_json(&dir.join(MANIFEST))?;
    let mut failure = None;
    params.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let result = (|| {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))?;
            let loaded = load_tensor(&dir.join(&entry.file))?;
            if loaded.dims() != t.dims() {
                return Err(Error::Format(format!(
                    "`{name}` has dims {:?} on disk, {:?} in the model",
                    loaded.dims(),
                    t.dims()
                )));
            }
            *t = loaded.cast();
            Ok(())
        })();
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    failure.map_or(Ok(()), Err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevelEntry {
    pub name: String,
    pub file: String,
    pub stride: u32,
    pub dims: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidManifest {
    pub levels: Vec<PyramidLevelEntry>,
}

/// Strides of P3..P7 for two-stage detectors.
pub const TWO_STAGE_STRIDES: [u32; 5] = [4, 8, 16, 32, 64];
/// Strides of P3..P7 for one-stage detectors.
pub const ONE_STAGE_STRIDES: [u32; 5] = [8, 16, 32, 64, 128];

pub fn save_pyramid<T: Real>(dir: &Path, pyramid: &Pyramid<T>, strides: [u32; 5]) -> Result<PyramidManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut levels = Vec::new();
    for ((name, t), stride) in LEVELS.iter().zip(&pyramid.levels).zip(strides) {
        let file = format!("{name}.hgdt");
        save_tensor(&dir.join(&file), t)?;
        levels.push(PyramidLevelEntry {
            name: name.to_string(),
            file,
            stride,
            dims: t.dims().to_vec(),
            dtype: T::DTYPE,
        });
    }
    let manifest = PyramidManifest { levels };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_pyramid<T: Real>(dir: &Path) -> Result<(Pyramid<T>, [u32; 5])> {
    let manifest: PyramidManifest = read_json(&dir.join(MANIFEST))?;
    if manifest.levels.len() != 5 {
        return Err(Error::Format(format!("pyramid manifest lists {} levels", manifest.levels.len())));
    }
    let mut strides = [0; 5];
    let mut levels = Vec::with_capacity(5);
    for (i, name) in LEVELS.iter().enumerate() {
        let entry = manifest
            .levels
            .iter()
            .find(|e| e.name == *name)
            .ok_or_else(|| Error::Format(format!("pyramid manifest has no {name}")))?;
        levels.push(load_tensor(&dir.join(&entry.file))?.cast());
        strides[i] = entry.stride;
    }
    let levels: [Tensor<T>; 5] = levels.try_into().expect("five levels");
    Ok((Pyramid::new(levels)?, strides))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Conv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(vec![2, 1], &[1.0, -2.0]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..4], b"HGDT");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn round_trip_both_precisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::<f64>::uniform(vec![3, 4, 5], -1.0, 1.0, &mut rng);
        assert_eq!(decode_tensor(&encode_tensor(&t).unwrap()).unwrap(), AnyTensor::F64(t.clone()));
        let s = t.cast::<f32>();
        assert_eq!(decode_tensor(&encode_tensor(&s).unwrap()).unwrap(), AnyTensor::F32(s));
        let scalar = Tensor::scalar(2.5f64);
        assert_eq!(decode_tensor(&encode_tensor(&scalar).unwrap()).unwrap().dims(), &[] as &[usize]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(decode_tensor(b"HGDX\x01\x00").is_err());
        assert!(decode_tensor(b"HGDT\x07\x00").is_err());
        let mut b = encode_tensor(&Tensor::<f64>::zeros(vec![2])).unwrap();
        b.pop();
        assert!(decode_tensor(&b).is_err());
    }

    #[test]
    fn exact_refuses_other_precision() {
        let t = AnyTensor::F32(Tensor::zeros(vec![1]));
        assert!(t.exact::<f64>().is_err());
        assert!(t.exact::<f32>().is_ok());
    }

    #[test]
    fn pgm_is_min_max_normalized() {
        let b = pgm_bytes(&[1.0f64, 3.0, 2.0, 1.0], 2, 2).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 255, 128, 0]);
        let flat = pgm_bytes(&[4.0f64; 3], 1, 3).unwrap();
        assert!(flat[flat.len() - 3..].iter().all(|&v| v == 0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Conv::<f64>::init(3, 2, 3, 1.0, &mut rng);
        let m = save_checkpoint(dir.path(), &c).unwrap();
        assert_eq!(m.tensors.len(), 2);
        let mut back = Conv::<f64>::zeros(3, 2, 3);
        load_checkpoint(dir.path(), &mut back).unwrap();
        assert_eq!(back, c);
        let mut wrong = Conv::<f64>::zeros(3, 2, 1);
        assert!(load_checkpoint(dir.path(), &mut wrong).is_err());
    }

    #[test]
    fn pyramid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Pyramid::<f64>::random(2, 9, 7, &mut rng);
        save_pyramid(dir.path(), &p, TWO_STAGE_STRIDES).unwrap();
        let (q, strides) = load_pyramid::<f64>(dir.path()).unwrap();
        assert_eq!(q, p);
        assert_eq!(strides, TWO_STAGE_STRIDES);
    }
}
