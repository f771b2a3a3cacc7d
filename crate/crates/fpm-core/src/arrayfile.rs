//! The FPMA binary array container and the checkpoint directory layout.
//!
//! An FPMA file is: 4-byte magic "FPMA", version u16, dtype code u16
//! (1 = f64, 2 = c128 as re/im pairs, 3 = u16), ndim u16, then ndim
//! u64 dims, then the row-major payload. Every integer and float is
//! little-endian. Readers reject trailing bytes, so write-then-read is
//! a bitwise identity.
//!
//! A checkpoint is a directory holding one FPMA file per array plus a
//! `manifest.txt` of flat key=value lines naming them and carrying the
//! scalar state (exposure, upsample factor, activation slope).

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use std::fs;
use std::path::Path;

use crate::cnn::{CnnArch, CnnModel};
use crate::error::{FpmError, Result};
use crate::optics::IlluminationPattern;

pub const MAGIC: [u8; 4] = *b"FPMA";
pub const VERSION: u16 = 1;

const DTYPE_F64: u16 = 1;
const DTYPE_C128: u16 = 2;
const DTYPE_U16: u16 = 3;

/// One array in any of the supported element types.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(ArrayD<f64>),
    C128(ArrayD<Complex64>),
    U16(ArrayD<u16>),
}

impl ArrayData {
    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F64(a) => a.shape(),
            ArrayData::C128(a) => a.shape(),
            ArrayData::U16(a) => a.shape(),
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::C128(_) => "c128",
            ArrayData::U16(_) => "u16",
        }
    }

    pub fn into_f64(self) -> Result<ArrayD<f64>> {
        match self {
            ArrayData::F64(a) => Ok(a),
            other => Err(FpmError::Format(format!(
                "expected an f64 array, found {}",
                other.dtype_name()
            ))),
        }
    }

    pub fn into_c128(self) -> Result<ArrayD<Complex64>> {
        match self {
            ArrayData::C128(a) => Ok(a),
            other => Err(FpmError::Format(format!(
                "expected a c128 array, found {}",
                other.dtype_name()
            ))),
        }
    }

    pub fn into_u16(self) -> Result<ArrayD<u16>> {
        match self {
            ArrayData::U16(a) => Ok(a),
            other => Err(FpmError::Format(format!(
                "expected a u16 array, found {}",
                other.dtype_name()
            ))),
        }
    }

    fn dtype_code(&self) -> u16 {
        match self {
            ArrayData::F64(_) => DTYPE_F64,
            ArrayData::C128(_) => DTYPE_C128,
            ArrayData::U16(_) => DTYPE_U16,
        }
    }

    fn elem_bytes(code: u16) -> usize {
        match code {
            DTYPE_F64 => 8,
            DTYPE_C128 => 16,
            DTYPE_U16 => 2,
            _ => unreachable!(),
        }
    }
}

/// Serializes an array into the FPMA byte layout.
pub fn to_bytes(data: &ArrayData) -> Vec<u8> {
    let shape = data.shape();
    let code = data.dtype_code();
    let payload_len = shape.iter().product::<usize>() * ArrayData::elem_bytes(code);
    let mut out = Vec::with_capacity(10 + 8 * shape.len() + payload_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&code.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match data {
        ArrayData::F64(a) => {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        ArrayData::C128(a) => {
            for v in a.iter() {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }
        }
        ArrayData::U16(a) => {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.offset + n {
            return Err(FpmError::Format(format!(
                "file ends inside {what} at byte {}",
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses the FPMA byte layout; errors name the byte offset at fault.
pub fn from_bytes(bytes: &[u8]) -> Result<ArrayData> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4, "the magic")?;
    if magic != MAGIC {
        return Err(FpmError::Format(format!(
            "bad magic {magic:?} at byte 0, expected {MAGIC:?}"
        )));
    }
    let version = r.u16("the version")?;
    if version != VERSION {
        return Err(FpmError::Format(format!(
            "unsupported version {version} at byte 4, expected {VERSION}"
        )));
    }
    let code = r.u16("the dtype code")?;
    if !(DTYPE_F64..=DTYPE_U16).contains(&code) {
        return Err(FpmError::Format(format!(
            "unknown dtype code {code} at byte 6"
        )));
    }
    let ndim = r.u16("the rank")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let d = r.u64(&format!("dimension {i}"))?;
        shape.push(usize::try_from(d).map_err(|_| {
            FpmError::Format(format!("dimension {i} is {d}, too large for this platform"))
        })?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| {
            FpmError::Format(format!("dims {shape:?} overflow the element count"))
        })?;
    let payload_offset = r.offset;
    let expected = count * ArrayData::elem_bytes(code);
    let got = bytes.len() - payload_offset;
    if got != expected {
        return Err(FpmError::Format(format!(
            "payload at byte {payload_offset} is {got} bytes, expected {expected} for dims {shape:?}"
        )));
    }
    let payload = &bytes[payload_offset..];
    let dims = IxDyn(&shape);
    Ok(match code {
        DTYPE_F64 => {
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ArrayData::F64(ArrayD::from_shape_vec(dims, values).expect("checked length"))
        }
        DTYPE_C128 => {
            let values = payload
                .chunks_exact(16)
                .map(|c| {
                    Complex64::new(
                        f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                        f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                    )
                })
                .collect();
            ArrayData::C128(ArrayD::from_shape_vec(dims, values).expect("checked length"))
        }
        _ => {
            let values = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            ArrayData::U16(ArrayD::from_shape_vec(dims, values).expect("checked length"))
        }
    })
}

pub fn write_array(path: &Path, data: &ArrayData) -> Result<()> {
    fs::write(path, to_bytes(data))?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<ArrayData> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        FpmError::Format(msg) => FpmError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn manifest_value<'a>(
    pairs: &'a [(String, String)],
    key: &str,
    dir: &Path,
) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| {
            FpmError::Format(format!(
                "checkpoint manifest in {} is missing {key}",
                dir.display()
            ))
        })
}

fn parse_scalar<T: std::str::FromStr>(text: &str, key: &str) -> Result<T> {
    text.parse().map_err(|_| {
        FpmError::Format(format!("checkpoint key {key} has unparsable value {text:?}"))
    })
}

/// Writes the trained pattern and network into `dir` (created if absent):
/// one FPMA file per parameter plus the pattern weights, indexed by
/// `manifest.txt`.
pub fn save_checkpoint(
    dir: &Path,
    pattern: &IlluminationPattern,
    model: &CnnModel,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str("format=fpm-checkpoint-v1\n");
    manifest.push_str(&format!("upsample={}\n", model.upsample));
    manifest.push_str(&format!("leaky_slope={:.17e}\n", model.leaky_slope));
    manifest.push_str(&format!("blocks={}\n", model.blocks.len()));
    manifest.push_str(&format!("exposure_ms={:.17e}\n", pattern.exposure_ms));
    manifest.push_str("pattern=pattern.fpma\n");
    let weights = ArrayD::from_shape_vec(
        IxDyn(&[pattern.weights.len()]),
        pattern.weights.clone(),
    )
    .expect("weights shape");
    write_array(&dir.join("pattern.fpma"), &ArrayData::F64(weights))?;
    for (name, array) in model.named_params() {
        let file = format!("{name}.fpma");
        write_array(&dir.join(&file), &ArrayData::F64(array.clone()))?;
        manifest.push_str(&format!("param.{name}={file}\n"));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(IlluminationPattern, CnnModel)> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            FpmError::Format(format!("manifest line {} has no '=': {line:?}", i + 1))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let format = manifest_value(&pairs, "format", dir)?;
    if format != "fpm-checkpoint-v1" {
        return Err(FpmError::Format(format!(
            "unsupported checkpoint format {format:?}"
        )));
    }
    let upsample: usize = parse_scalar(manifest_value(&pairs, "upsample", dir)?, "upsample")?;
    let leaky_slope: f64 =
        parse_scalar(manifest_value(&pairs, "leaky_slope", dir)?, "leaky_slope")?;
    let blocks: usize = parse_scalar(manifest_value(&pairs, "blocks", dir)?, "blocks")?;
    let exposure_ms: f64 =
        parse_scalar(manifest_value(&pairs, "exposure_ms", dir)?, "exposure_ms")?;
    let pattern_file = manifest_value(&pairs, "pattern", dir)?;
    let weights = read_array(&dir.join(pattern_file))?.into_f64()?;
    if weights.ndim() != 1 {
        return Err(FpmError::Format(format!(
            "pattern array must be 1-D, got {:?}",
            weights.shape()
        )));
    }
    let pattern = IlluminationPattern {
        weights: weights.iter().copied().collect(),
        exposure_ms,
    };

    let head = read_array(&dir.join(manifest_value(&pairs, "param.head.weight", dir)?))?
        .into_f64()?;
    if head.ndim() != 4 {
        return Err(FpmError::Format(format!(
            "head weight must be 4-D, got {:?}",
            head.shape()
        )));
    }
    let arch = CnnArch {
        blocks,
        channels: head.shape()[0],
        kernel: head.shape()[2],
        leaky_slope,
    };
    let mut model = CnnModel::init(&arch, upsample, 0)
        .map_err(|e| FpmError::Format(format!("checkpoint shape is invalid: {e}")))?;
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let key = format!("param.{name}");
        let file = manifest_value(&pairs, &key, dir)?;
        let array = read_array(&dir.join(file))?.into_f64()?;
        model.set_param(&name, array)?;
    }
    Ok((pattern, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trips_are_bitwise_for_all_dtypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir = tmpdir();
        let f = ArrayData::F64(ArrayD::from_shape_simple_fn(IxDyn(&[3, 4, 2]), || {
            rng.random::<f64>()
        }));
        let c = ArrayData::C128(ArrayD::from_shape_simple_fn(IxDyn(&[64, 64]), || {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        }));
        let u = ArrayData::U16(ArrayD::from_shape_simple_fn(IxDyn(&[5]), || {
            rng.random::<u16>()
        }));
        for (name, data) in [("f.fpma", f), ("c.fpma", c), ("u.fpma", u)] {
            let path = dir.path().join(name);
            write_array(&path, &data).unwrap();
            let back = read_array(&path).unwrap();
            assert_eq!(back, data, "{name}");
            let bytes = to_bytes(&data);
            assert_eq!(fs::read(&path).unwrap(), bytes, "{name} file bytes");
        }
    }

    #[test]
    fn zero_dim_scalar_round_trips() {
        let data = ArrayData::F64(ArrayD::from_elem(IxDyn(&[]), 42.5));
        let back = from_bytes(&to_bytes(&data)).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn corrupt_files_name_the_byte_offset() {
        let data = ArrayData::F64(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let good = to_bytes(&data);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = from_bytes(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("byte 0"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let err = from_bytes(&bad_version).unwrap_err().to_string();
        assert!(err.contains("byte 4"), "{err}");

        let mut bad_dtype = good.clone();
        bad_dtype[6] = 77;
        let err = from_bytes(&bad_dtype).unwrap_err().to_string();
        assert!(err.contains("byte 6"), "{err}");

        let truncated = &good[..good.len() - 3];
        let err = from_bytes(truncated).unwrap_err().to_string();
        assert!(err.contains("byte 26"), "{err}");

        let mut trailing = good.clone();
        trailing.push(0);
        let err = from_bytes(&trailing).unwrap_err().to_string();
        assert!(err.contains("byte 26"), "{err}");

        let err = from_bytes(&good[..3]).unwrap_err().to_string();
        assert!(err.contains("magic") && err.contains("byte 3"), "{err}");
    }

    #[test]
    fn checkpoint_round_trips_pattern_and_model() {
        let dir = tmpdir();
        let arch = CnnArch {
            blocks: 2,
            channels: 8,
            kernel: 3,
            leaky_slope: 0.1,
        };
        let model = CnnModel::init(&arch, 2, 99).unwrap();
        let pattern = IlluminationPattern {
            weights: vec![0.25, 0.5, 1.0],
            exposure_ms: 183.25,
        };
        save_checkpoint(dir.path(), &pattern, &model).unwrap();
        let (p2, m2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(p2, pattern);
        assert_eq!(m2.upsample, model.upsample);
        assert_eq!(m2.leaky_slope, model.leaky_slope);
        for ((na, a), (nb, b)) in model.named_params().iter().zip(m2.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b, "param {na}");
        }
    }

    #[test]
    fn checkpoint_with_missing_key_is_rejected() {
        let dir = tmpdir();
        let arch = CnnArch {
            blocks: 1,
            channels: 4,
            kernel: 3,
            leaky_slope: 0.1,
        };
        let model = CnnModel::init(&arch, 2, 1).unwrap();
        let pattern = IlluminationPattern {
            weights: vec![1.0],
            exposure_ms: 200.0,
        };
        save_checkpoint(dir.path(), &pattern, &model).unwrap();
        let manifest = dir.path().join("manifest.txt");
        let text = fs::read_to_string(&manifest).unwrap();
        let without = text
            .lines()
            .filter(|l| !l.starts_with("exposure_ms"))
            .collect::<Vec<_>>()
            .join("\n");
        fs::write(&manifest, without).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(FpmError::Format(_))
        ));
    }
}
