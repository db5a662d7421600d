//! File formats: `NMV1` volumes, JSON checkpoints and reports, CSV curves.
//! Every write goes to a temporary sibling and is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RegistrationReport;
use crate::tensor::{Scalar, Tensor};
use crate::train::TrainingCurve;

pub const MAGIC: [u8; 4] = *b"NMV1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CURVE_HEADER: &str = "epoch,train_loss,val_loss,train_ssim,val_ssim";

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::arg("write", format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_volume<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let dtype = match T::BYTES {
        4 => DTYPE_F32,
        8 => DTYPE_F64,
        _ => unreachable!("scalar width"),
    };
    let rank = u8::try_from(t.rank()).map_err(|_| Error::arg("save_volume", "rank exceeds 255"))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + T::BYTES * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(dtype);
    out.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::arg("save_volume", "extent exceeds u32"))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        if dtype == DTYPE_F32 {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

/// A volume file's contents in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl VolumeData {
    pub fn shape(&self) -> &[usize] {
        match self {
            VolumeData::F32(t) => t.shape(),
            VolumeData::F64(t) => t.shape(),
        }
    }

    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            VolumeData::F32(t) => t.cast(),
            VolumeData::F64(t) => t.cast(),
        }
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeData> {
    let header = |n: usize| -> Result<&[u8]> {
        bytes.get(..n).ok_or(Error::Truncated {
            expected: n,
            found: bytes.len(),
        })
    };
    let magic: [u8; 4] = header(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let head = header(6)?;
    let (dtype, rank) = (head[4], head[5] as usize);
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(Error::UnknownDtype(other)),
    };
    let head_len = 6 + 4 * rank;
    let head = header(head_len)?;
    let shape: Vec<usize> = head[6..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = head_len + width * shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[head_len..];
    Ok(if dtype == DTYPE_F32 {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        VolumeData::F32(Tensor::new(shape, data)?)
    } else {
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        VolumeData::F64(Tensor::new(shape, data)?)
    })
}

pub fn save_volume<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_volume(t)?)
}

pub fn load_volume(path: &Path) -> Result<VolumeData> {
    decode_volume(&read(path)?)
}

/// Loads a volume and converts it to `T`.
pub fn load_volume_as<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(load_volume(path)?.into_tensor())
}

/// CSV with header [`CURVE_HEADER`], one row per epoch; floats use the
/// shortest representation that parses back exactly.
pub fn curve_csv(curve: &TrainingCurve) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in &curve.records {
        out += &format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.epoch, r.train_loss, r.val_loss, r.train_ssim, r.val_ssim
        );
    }
    out
}

pub fn export_curve_csv(curve: &TrainingCurve, path: &Path) -> Result<()> {
    write_atomic(path, curve_csv(curve).as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: RegistrationReport,
    pub config_hash: String,
    pub engine_version: String,
}

impl ReportFile {
    pub fn new(report: RegistrationReport, config_hash: String) -> Self {
        Self {
            report,
            config_hash,
            engine_version: ENGINE_VERSION.to_string(),
        }
    }
}

pub fn save_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let b = encode_volume(&t).unwrap();
        assert_eq!(&b[..6], b"NMV1\x01\x02");
        assert_eq!(&b[6..14], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn distinct_decode_errors() {
        let t = Tensor::<f64>::from_fn(vec![2, 2], |i| i as f64);
        let good = encode_volume(&t).unwrap();
        assert_eq!(decode_volume(&good).unwrap(), VolumeData::F64(t));

        let err = decode_volume(&good[..good.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"NIFT");
        let err = decode_volume(&bad).unwrap_err();
        assert!(err.to_string().contains("NIFT"), "{err}");

        let mut bad = good;
        bad[4] = 9;
        assert!(matches!(decode_volume(&bad), Err(Error::UnknownDtype(9))));
        assert!(matches!(decode_volume(b"NM"), Err(Error::Truncated { .. })));
    }
}
