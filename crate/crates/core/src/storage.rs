//! Versioned single-file containers.
//!
//! Layout shared by datasets (`SPCR`) and checkpoints (`SPCK`):
//!
//! ```text
//! magic [4] | version u32 | header_len u64 | JSON header | payload | crc64 u64
//! ```
//!
//! All integers are little-endian. The CRC (CRC-64/XZ) covers the payload
//! only. The header records `payload_bytes`, so a short file is reported as
//! a checksum failure rather than decoded from whatever bytes remain.

use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::acquisition::{MultiCoilKspace, SamplingMask, TrainingPair};
use crate::csm::CoilSensitivities;
use crate::error::{Error, Result};
use crate::numerics::{ComplexImage, MultiCoilImage, C64};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 4] = b"SPCR";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// Storage width of complex arrays. Arithmetic is always f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn dtype(self) -> &'static str {
        match self {
            Precision::F32 => "c64",
            Precision::F64 => "c128",
        }
    }

    fn from_dtype(s: &str) -> Result<Self> {
        match s {
            "c64" => Ok(Precision::F32),
            "c128" => Ok(Precision::F64),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }

    fn bytes_per_value(self) -> usize {
        match self {
            Precision::F32 => 8,
            Precision::F64 => 16,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!("precision must be f32 or f64, got {other:?}"))),
        }
    }
}

pub(crate) fn write_container(path: &Path, magic: &[u8; 4], header: Value, payload: &[u8]) -> Result<()> {
    let mut header = header;
    header
        .as_object_mut()
        .ok_or_else(|| Error::Format("header must be a JSON object".into()))?
        .insert("payload_bytes".into(), json!(payload.len()));
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

    let mut buf = Vec::with_capacity(24 + header_bytes.len() + payload.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(payload);
    buf.extend_from_slice(&CRC64.checksum(payload).to_le_bytes());
    write_atomic(path, &buf)
}

/// Write through a temp file in the destination directory and rename it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_container(path: &Path, magic: &[u8; 4]) -> Result<(Value, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Checksum(format!("{} is truncated ({} bytes)", path.display(), bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "{} is not a {} file",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err(Error::Checksum(format!("{} is truncated inside the header", path.display())));
    }
    let header: Value = serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Format(e.to_string()))?;
    let declared = header
        .get("payload_bytes")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format("header lacks payload_bytes".into()))? as usize;
    let rest = &body[header_len..];
    if rest.len() != declared + 8 {
        return Err(Error::Checksum(format!(
            "{}: expected {} payload+checksum bytes, found {}",
            path.display(),
            declared + 8,
            rest.len()
        )));
    }
    let (payload, tail) = rest.split_at(declared);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = CRC64.checksum(payload);
    if stored != actual {
        return Err(Error::Checksum(format!(
            "{}: stored {stored:016x}, computed {actual:016x}",
            path.display()
        )));
    }
    Ok((header, payload.to_vec()))
}

pub(crate) fn header_field<T: for<'de> Deserialize<'de>>(header: &Value, key: &str) -> Result<T> {
    let v = header
        .get(key)
        .ok_or_else(|| Error::Format(format!("header lacks {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("header field {key:?}: {e}")))
}

#[derive(Default)]
pub(crate) struct PayloadWriter {
    pub bytes: Vec<u8>,
}

impl PayloadWriter {
    pub fn complex(&mut self, values: &[C64], precision: Precision) {
        for v in values {
            match precision {
                Precision::F64 => {
                    self.bytes.extend_from_slice(&v.re.to_le_bytes());
                    self.bytes.extend_from_slice(&v.im.to_le_bytes());
                }
                Precision::F32 => {
                    self.bytes.extend_from_slice(&(v.re as f32).to_le_bytes());
                    self.bytes.extend_from_slice(&(v.im as f32).to_le_bytes());
                }
            }
        }
    }

    pub fn reals(&mut self, values: &[f64]) {
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("payload shorter than the header declares".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn complex(&mut self, n: usize, precision: Precision) -> Result<Vec<C64>> {
        let raw = self.take(n * precision.bytes_per_value())?;
        Ok(match precision {
            Precision::F64 => raw
                .chunks_exact(16)
                .map(|c| {
                    C64::new(
                        f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                        f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                    )
                })
                .collect(),
            Precision::F32 => raw
                .chunks_exact(8)
                .map(|c| {
                    C64::new(
                        f32::from_le_bytes(c[..4].try_into().expect("4 bytes")) as f64,
                        f32::from_le_bytes(c[4..].try_into().expect("4 bytes")) as f64,
                    )
                })
                .collect(),
        })
    }

    pub fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing payload bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaveOptions {
    pub seed: u64,
    pub precision: Precision,
}

impl Default for SaveOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    mask: SamplingMask,
    mask_prime: SamplingMask,
    noise_sigma: f64,
    noise_sigma_prime: f64,
    has_ground_truth: bool,
    has_true_csm: bool,
}

#[derive(Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
}

/// Header fields of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub n_pairs: usize,
    pub n_c: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub dtype: String,
    pub seed: u64,
    pub noise_sigma: f64,
}

/// Arrays per pair, in order: `y`, `y_prime`, then when present
/// `ground_truth`, `true_csm` and its `true_csm_fov` (1 inside, 0 outside).
pub fn save_dataset(pairs: &[TrainingPair], path: impl AsRef<Path>, opts: &SaveOptions) -> Result<()> {
    let first = pairs.first().ok_or_else(|| Error::invalid("cannot save an empty dataset"))?;
    let (nc, h, w) = first.shape();
    let mut payload = PayloadWriter::default();
    let mut records = Vec::with_capacity(pairs.len());
    let mut arrays = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        if pair.shape() != (nc, h, w) {
            return Err(Error::shape(format!("pair {i} has shape {:?}, expected {:?}", pair.shape(), (nc, h, w))));
        }
        let (gt, csm) = pair.references();
        payload.complex(pair.y.data().data(), opts.precision);
        payload.complex(pair.y_prime.data().data(), opts.precision);
        arrays.push(ArrayRecord { name: format!("pair{i}/y"), shape: vec![nc, h, w] });
        arrays.push(ArrayRecord { name: format!("pair{i}/y_prime"), shape: vec![nc, h, w] });
        if let Some(x) = gt {
            payload.complex(x.data(), opts.precision);
            arrays.push(ArrayRecord { name: format!("pair{i}/ground_truth"), shape: vec![h, w] });
        }
        if let Some(s) = csm {
            payload.complex(s.maps().data(), opts.precision);
            let fov: Vec<C64> = s.fov().iter().map(|&f| C64::new(f as u8 as f64, 0.0)).collect();
            payload.complex(&fov, opts.precision);
            arrays.push(ArrayRecord { name: format!("pair{i}/true_csm"), shape: vec![nc, h, w] });
            arrays.push(ArrayRecord { name: format!("pair{i}/true_csm_fov"), shape: vec![h, w] });
        }
        records.push(PairRecord {
            mask: pair.y.mask().clone(),
            mask_prime: pair.y_prime.mask().clone(),
            noise_sigma: pair.y.noise_sigma(),
            noise_sigma_prime: pair.y_prime.noise_sigma(),
            has_ground_truth: gt.is_some(),
            has_true_csm: csm.is_some(),
        });
    }
    let info = DatasetInfo {
        n_pairs: pairs.len(),
        n_c: nc,
        height: h,
        width: w,
        dtype: opts.precision.dtype().into(),
        seed: opts.seed,
        noise_sigma: first.y.noise_sigma(),
    };
    let mut header = serde_json::to_value(&info).map_err(|e| Error::Format(e.to_string()))?;
    header["content"] = json!("dataset");
    header["pairs"] = serde_json::to_value(&records).map_err(|e| Error::Format(e.to_string()))?;
    header["arrays"] = serde_json::to_value(&arrays).map_err(|e| Error::Format(e.to_string()))?;
    write_container(path.as_ref(), DATASET_MAGIC, header, &payload.bytes)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    load_dataset_with_info(path).map(|(pairs, _)| pairs)
}

pub fn load_dataset_with_info(path: impl AsRef<Path>) -> Result<(Vec<TrainingPair>, DatasetInfo)> {
    let (header, payload) = read_container(path.as_ref(), DATASET_MAGIC)?;
    if header.get("content").and_then(Value::as_str) != Some("dataset") {
        return Err(Error::Format("file does not hold a dataset".into()));
    }
    let info: DatasetInfo = serde_json::from_value(header.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let precision = Precision::from_dtype(&info.dtype)?;
    let records: Vec<PairRecord> = header_field(&header, "pairs")?;
    if records.len() != info.n_pairs {
        return Err(Error::Format("pair count disagrees with the pair records".into()));
    }
    let (nc, h, w) = (info.n_c, info.height, info.width);
    let mut reader = PayloadReader::new(&payload);
    let mut pairs = Vec::with_capacity(records.len());
    for rec in records {
        let mask = revalidate(rec.mask)?;
        let mask_prime = revalidate(rec.mask_prime)?;
        let y = MultiCoilImage::from_vec(nc, h, w, reader.complex(nc * h * w, precision)?)?;
        let yp = MultiCoilImage::from_vec(nc, h, w, reader.complex(nc * h * w, precision)?)?;
        let gt = if rec.has_ground_truth {
            Some(ComplexImage::from_vec(h, w, reader.complex(h * w, precision)?)?)
        } else {
            None
        };
        let csm = if rec.has_true_csm {
            let maps = MultiCoilImage::from_vec(nc, h, w, reader.complex(nc * h * w, precision)?)?;
            let fov = reader.complex(h * w, precision)?.iter().map(|v| v.re != 0.0).collect();
            Some(stored_maps(maps, fov, precision)?)
        } else {
            None
        };
        pairs.push(TrainingPair::new(
            MultiCoilKspace::masked(y, mask, rec.noise_sigma)?,
            MultiCoilKspace::masked(yp, mask_prime, rec.noise_sigma_prime)?,
            gt,
            csm,
        )?);
    }
    reader.finish()?;
    Ok((pairs, info))
}

fn revalidate(m: SamplingMask) -> Result<SamplingMask> {
    SamplingMask::from_lines(
        m.height(),
        m.width(),
        m.kind(),
        m.accel(),
        m.offset(),
        m.acs_lines().start,
        m.acs_count(),
        m.selected_lines().to_vec(),
    )
}

fn stored_maps(maps: MultiCoilImage, fov: Vec<bool>, precision: Precision) -> Result<CoilSensitivities> {
    match precision {
        Precision::F64 => CoilSensitivities::new(maps, fov),
        // single-precision storage breaks the 1e-8 RSS check; renormalize
        Precision::F32 => crate::csm::rss_normalize(maps, fov),
    }
}

/// Named complex arrays (reconstructions, maps) in an `SPCR` container.
pub fn save_arrays(path: impl AsRef<Path>, arrays: &[(&str, Vec<usize>, &[C64])], precision: Precision) -> Result<()> {
    let mut payload = PayloadWriter::default();
    let mut records = Vec::with_capacity(arrays.len());
    for (name, shape, data) in arrays {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("array {name} has {} values for shape {shape:?}", data.len())));
        }
        payload.complex(data, precision);
        records.push(ArrayRecord { name: name.to_string(), shape: shape.clone() });
    }
    let header = json!({
        "content": "arrays",
        "dtype": precision.dtype(),
        "arrays": serde_json::to_value(&records).map_err(|e| Error::Format(e.to_string()))?,
    });
    write_container(path.as_ref(), DATASET_MAGIC, header, &payload.bytes)
}

pub fn load_arrays(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<usize>, Vec<C64>)>> {
    let (header, payload) = read_container(path.as_ref(), DATASET_MAGIC)?;
    if header.get("content").and_then(Value::as_str) != Some("arrays") {
        return Err(Error::Format("file does not hold named arrays".into()));
    }
    let precision = Precision::from_dtype(&header_field::<String>(&header, "dtype")?)?;
    let records: Vec<ArrayRecord> = header_field(&header, "arrays")?;
    let mut reader = PayloadReader::new(&payload);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let n = r.shape.iter().product();
        out.push((r.name, r.shape, reader.complex(n, precision)?));
    }
    reader.finish()?;
    Ok(out)
}
