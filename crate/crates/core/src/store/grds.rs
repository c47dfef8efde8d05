//! The GRDS container: little-endian, write-once, streamable.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GRDS"
//! 4       2     version (u16, = 1)
//! 6       1     dtype (0 = f32, 1 = f64)
//! 7       1     flags (bit 0: params section follows the records)
//! 8       4     layer count N (u32)
//! 12      8     record count (u64)
//! 20      4     model tag length (u32)
//! 24      ..    model tag (UTF-8)
//!
//! record:
//!   id length (u16), id (UTF-8), loss (f64)
//!   4N matrices in layer-major Q, K, V, O order, each
//!     layer (u32), projection (u8: 0=Q 1=K 2=V 3=O), rows (u32), cols (u32),
//!     rows * cols values of the file dtype, row-major
//!
//! params section (only when flag bit 0 is set):
//!   "PRMS", config JSON length (u32), config JSON, value count (u64),
//!   values (f64)
//! ```
//!
//! A file with no records and an empty model tag is exactly 24 bytes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::StoreError;
use crate::gradient::{GradientBundle, Projection};
use crate::matrix::Matrix;
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: [u8; 4] = *b"GRDS";
pub const VERSION: u16 = 1;
pub const HEADER_FIXED_LEN: u64 = 24;
const PARAMS_MAGIC: [u8; 4] = *b"PRMS";
const FLAG_PARAMS: u8 = 0x01;
const RECORD_COUNT_OFFSET: u64 = 12;
const FLAGS_OFFSET: u64 = 7;

/// Storage precision of matrix payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(format!("unknown dtype '{other}' (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

/// Everything stored in one GRDS file.
#[derive(Debug, Clone, PartialEq)]
pub struct GrdsFile {
    pub version: u16,
    pub dtype: Dtype,
    pub num_layers: usize,
    pub model_tag: String,
    pub samples: Vec<GradientBundle>,
    pub params: Option<ModelParams>,
}

/// Streaming writer. The record count is patched into the header by
/// [`GrdsWriter::finish`].
pub struct GrdsWriter {
    out: BufWriter<File>,
    dtype: Dtype,
    num_layers: usize,
    shapes: Option<[(usize, usize); 4]>,
    records: u64,
    bytes: u64,
}

impl GrdsWriter {
    pub fn create(
        path: impl AsRef<Path>,
        dtype: Dtype,
        num_layers: usize,
        model_tag: &str,
    ) -> Result<Self, StoreError> {
        let num_layers_u32 =
            u32::try_from(num_layers).map_err(|_| StoreError::TooLarge("layer count"))?;
        let tag_len =
            u32::try_from(model_tag.len()).map_err(|_| StoreError::TooLarge("model tag"))?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&[dtype.code(), 0])?;
        out.write_all(&num_layers_u32.to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        out.write_all(&tag_len.to_le_bytes())?;
        out.write_all(model_tag.as_bytes())?;
        Ok(Self {
            out,
            dtype,
            num_layers,
            shapes: None,
            records: 0,
            bytes: HEADER_FIXED_LEN + model_tag.len() as u64,
        })
    }

    pub fn write(&mut self, bundle: &GradientBundle) -> Result<(), StoreError> {
        if bundle.num_layers() != self.num_layers {
            return Err(StoreError::LayerCountMismatch {
                sample_id: bundle.sample_id.clone(),
                expected: self.num_layers,
                found: bundle.num_layers(),
            });
        }
        let shapes = Projection::ALL.map(|p| bundle.shape_of(p));
        match self.shapes {
            None => self.shapes = Some(shapes),
            Some(expected) if expected != shapes => {
                return Err(StoreError::HeterogeneousShapes {
                    sample_id: bundle.sample_id.clone(),
                    expected: expected.to_vec(),
                    found: shapes.to_vec(),
                })
            }
            Some(_) => {}
        }
        let id = bundle.sample_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| StoreError::TooLarge("sample id"))?;

        let mut buf = Vec::new();
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&bundle.loss.to_le_bytes());
        for (layer, projection, m) in bundle.iter() {
            buf.extend_from_slice(&(layer as u32).to_le_bytes());
            buf.push(projection.code());
            let rows = u32::try_from(m.rows()).map_err(|_| StoreError::TooLarge("rows"))?;
            let cols = u32::try_from(m.cols()).map_err(|_| StoreError::TooLarge("cols"))?;
            buf.extend_from_slice(&rows.to_le_bytes());
            buf.extend_from_slice(&cols.to_le_bytes());
            match self.dtype {
                Dtype::F64 => {
                    for v in m.as_slice() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Dtype::F32 => {
                    for &v in m.as_slice() {
                        let x = v as f32;
                        if !x.is_finite() {
                            return Err(StoreError::NotRepresentable {
                                sample_id: bundle.sample_id.clone(),
                                layer,
                                projection,
                            });
                        }
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        self.out.write_all(&buf)?;
        self.records += 1;
        self.bytes += buf.len() as u64;
        Ok(())
    }

    /// Patches the header, syncs to disk, and returns the file size.
    pub fn finish(self) -> Result<u64, StoreError> {
        self.finish_inner(None)
    }

    /// Like [`GrdsWriter::finish`] but appends a model parameter section.
    pub fn finish_with_params(self, params: &ModelParams) -> Result<u64, StoreError> {
        self.finish_inner(Some(params))
    }

    fn finish_inner(mut self, params: Option<&ModelParams>) -> Result<u64, StoreError> {
        if let Some(p) = params {
            let config =
                serde_json::to_vec(&p.config).map_err(|e| StoreError::Params(e.to_string()))?;
            let flat = p.to_flat();
            let mut buf = Vec::with_capacity(16 + config.len() + 8 * flat.len());
            buf.extend_from_slice(&PARAMS_MAGIC);
            buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
            buf.extend_from_slice(&config);
            buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
            for v in &flat {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            self.out.write_all(&buf)?;
            self.bytes += buf.len() as u64;
        }
        self.out.flush()?;
        let mut file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(FLAGS_OFFSET))?;
        file.write_all(&[if params.is_some() { FLAG_PARAMS } else { 0 }])?;
        file.seek(SeekFrom::Start(RECORD_COUNT_OFFSET))?;
        file.write_all(&self.records.to_le_bytes())?;
        file.sync_all()?;
        Ok(self.bytes)
    }
}

/// Writes `bundles` with an empty model tag. All bundles must share the
/// layer count and per-projection shapes.
pub fn write_grds(
    path: impl AsRef<Path>,
    bundles: &[GradientBundle],
    dtype: Dtype,
) -> Result<u64, StoreError> {
    write_grds_tagged(path, bundles, dtype, "", None)
}

pub fn write_grds_tagged(
    path: impl AsRef<Path>,
    bundles: &[GradientBundle],
    dtype: Dtype,
    model_tag: &str,
    params: Option<&ModelParams>,
) -> Result<u64, StoreError> {
    let first = bundles.first().ok_or(StoreError::NoBundles)?;
    let mut w = GrdsWriter::create(path, dtype, first.num_layers(), model_tag)?;
    for b in bundles {
        w.write(b)?;
    }
    match params {
        Some(p) => w.finish_with_params(p),
        None => w.finish(),
    }
}

/// Reads and validates a whole file.
pub fn read_grds(path: impl AsRef<Path>) -> Result<GrdsFile, StoreError> {
    let mut reader = GrdsReader::open(path)?;
    let mut samples = Vec::with_capacity(reader.record_count().min(1 << 16) as usize);
    for bundle in reader.by_ref() {
        samples.push(bundle?);
    }
    let params = reader.take_params();
    Ok(GrdsFile {
        version: reader.version,
        dtype: reader.dtype,
        num_layers: reader.num_layers,
        model_tag: reader.model_tag.clone(),
        samples,
        params,
    })
}

/// Bundle-at-a-time reader. Iterating yields each record after validating
/// it; the trailer (params section or end of file) is checked after the
/// last record.
pub struct GrdsReader<R: Read> {
    src: R,
    /// Total input length when known; payload sizes are checked against it
    /// before anything is allocated.
    len: Option<u64>,
    offset: u64,
    version: u16,
    dtype: Dtype,
    flags: u8,
    num_layers: usize,
    record_count: u64,
    records_read: u64,
    model_tag: String,
    shapes: Option<[(usize, usize); 4]>,
    params: Option<ModelParams>,
    failed: bool,
}

impl GrdsReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Self::new(BufReader::new(file), Some(len))
    }
}

impl<R: Read> GrdsReader<R> {
    pub fn new(src: R, len: Option<u64>) -> Result<Self, StoreError> {
        let mut r = Self {
            src,
            len,
            offset: 0,
            version: 0,
            dtype: Dtype::F64,
            flags: 0,
            num_layers: 0,
            record_count: 0,
            records_read: 0,
            model_tag: String::new(),
            shapes: None,
            params: None,
            failed: false,
        };
        let magic: [u8; 4] = r.array()?;
        if magic != MAGIC {
            return Err(StoreError::BadMagic { found: magic });
        }
        r.version = u16::from_le_bytes(r.array()?);
        if r.version != VERSION {
            return Err(StoreError::UnsupportedVersion(r.version));
        }
        let [dtype, flags] = r.array()?;
        r.dtype = Dtype::from_code(dtype).ok_or(StoreError::UnsupportedDtype(dtype))?;
        if flags & !FLAG_PARAMS != 0 {
            return Err(StoreError::UnknownFlags(flags));
        }
        r.flags = flags;
        r.num_layers = u32::from_le_bytes(r.array()?) as usize;
        r.record_count = u64::from_le_bytes(r.array()?);
        let tag_len = u32::from_le_bytes(r.array()?) as u64;
        let tag_offset = r.offset;
        let tag = r.bytes(tag_len)?;
        r.model_tag =
            String::from_utf8(tag).map_err(|_| StoreError::BadUtf8 { offset: tag_offset })?;
        if r.record_count > 0 && r.num_layers == 0 {
            return Err(StoreError::LayerCountMismatch {
                sample_id: String::new(),
                expected: 0,
                found: 0,
            });
        }
        if r.record_count == 0 {
            r.finish_trailer()?;
        }
        Ok(r)
    }

    pub fn version(&self) -> u16 {
        self.version
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn record_count(&self) -> u64 {
        self.record_count
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    /// Parameters stored after the records; available once every record
    /// has been read.
    pub fn take_params(&mut self) -> Option<ModelParams> {
        self.params.take()
    }

    fn ensure_available(&self, n: u64) -> Result<(), StoreError> {
        match self.len {
            Some(len) if self.offset.checked_add(n).is_none_or(|end| end > len) => {
                Err(StoreError::TruncatedFile {
                    offset: self.offset,
                })
            }
            _ => Ok(()),
        }
    }

    fn bytes(&mut self, n: u64) -> Result<Vec<u8>, StoreError> {
        self.ensure_available(n)?;
        let mut buf = vec![0u8; n as usize];
        match self.src.read_exact(&mut buf) {
            Ok(()) => {
                self.offset += n;
                Ok(buf)
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(StoreError::TruncatedFile {
                offset: self.offset,
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], StoreError> {
        let v = self.bytes(N as u64)?;
        Ok(v.try_into().expect("length checked"))
    }

    fn read_record(&mut self) -> Result<GradientBundle, StoreError> {
        let id_len = u16::from_le_bytes(self.array()?) as u64;
        let id_offset = self.offset;
        let id = String::from_utf8(self.bytes(id_len)?)
            .map_err(|_| StoreError::BadUtf8 { offset: id_offset })?;
        let loss = f64::from_le_bytes(self.array()?);
        let mut layers = Vec::with_capacity(self.num_layers);
        let mut shapes = [(0, 0); 4];
        for layer in 0..self.num_layers {
            let mut mats: Vec<Matrix> = Vec::with_capacity(4);
            for projection in Projection::ALL {
                let header_offset = self.offset;
                let got_layer = u32::from_le_bytes(self.array()?) as usize;
                let [code] = self.array()?;
                if got_layer != layer || code != projection.code() {
                    return Err(StoreError::UnexpectedMatrix {
                        offset: header_offset,
                        expected: (layer, projection.code()),
                        found: (got_layer, code),
                    });
                }
                let rows = u32::from_le_bytes(self.array()?) as usize;
                let cols = u32::from_le_bytes(self.array()?) as usize;
                if rows == 0 || cols == 0 {
                    return Err(StoreError::EmptyMatrix {
                        offset: header_offset,
                    });
                }
                shapes[projection.index()] = (rows, cols);
                if layer > 0 || self.shapes.is_some() {
                    let expected = self.shapes.unwrap_or(shapes);
                    if expected[projection.index()] != (rows, cols) {
                        let mut found = expected;
                        found[projection.index()] = (rows, cols);
                        return Err(StoreError::HeterogeneousShapes {
                            sample_id: id,
                            expected: expected.to_vec(),
                            found: found.to_vec(),
                        });
                    }
                }
                let count = (rows as u64)
                    .checked_mul(cols as u64)
                    .and_then(|c| c.checked_mul(self.dtype.width() as u64))
                    .ok_or(StoreError::TooLarge("matrix payload"))?;
                let payload = self.bytes(count)?;
                let data: Vec<f64> = match self.dtype {
                    Dtype::F64 => payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                    Dtype::F32 => payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                };
                let m =
                    Matrix::new(rows, cols, data).map_err(|_| StoreError::NonFinitePayload {
                        sample_id: id.clone(),
                        layer,
                        projection,
                    })?;
                mats.push(m);
            }
            if layer == 0 && self.shapes.is_none() {
                self.shapes = Some(shapes);
            }
            let arr: [Matrix; 4] = mats.try_into().expect("four projections");
            layers.push(arr);
        }
        GradientBundle::new(id.clone(), loss, layers).map_err(|e| StoreError::InvalidBundle {
            sample_id: id,
            reason: e.to_string(),
        })
    }

    fn finish_trailer(&mut self) -> Result<(), StoreError> {
        if self.flags & FLAG_PARAMS != 0 {
            let magic: [u8; 4] = self.array()?;
            if magic != PARAMS_MAGIC {
                return Err(StoreError::Params(format!(
                    "bad params magic {:?} at offset {}",
                    magic,
                    self.offset - 4
                )));
            }
            let cfg_len = u32::from_le_bytes(self.array()?) as u64;
            let cfg: ModelConfig = serde_json::from_slice(&self.bytes(cfg_len)?)
                .map_err(|e| StoreError::Params(e.to_string()))?;
            let n = u64::from_le_bytes(self.array()?);
            let width = n.checked_mul(8).ok_or(StoreError::TooLarge("params"))?;
            let raw = self.bytes(width)?;
            let flat: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            self.params = Some(
                ModelParams::from_flat(cfg, &flat)
                    .map_err(|e| StoreError::Params(e.to_string()))?,
            );
        }
        let mut probe = [0u8; 1];
        match self.src.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(StoreError::TrailingBytes {
                offset: self.offset,
            }),
        }
    }
}

impl<R: Read> Iterator for GrdsReader<R> {
    type Item = Result<GradientBundle, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.records_read >= self.record_count {
            return None;
        }
        let result = self.read_record().and_then(|b| {
            self.records_read += 1;
            if self.records_read == self.record_count {
                self.finish_trailer()?;
            }
            Ok(b)
        });
        if result.is_err() {
            self.failed = true;
        }
        Some(result)
    }
}
