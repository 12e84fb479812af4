//! The embedding payload shared by every stage, and its on-disk formats.
//!
//! Binary layout (`TGEB`, little-endian):
//!
//! ```text
//! "TGEB" | u32 version=1 | u32 count | u32 dim | u8 flags
//! count*dim f32 features (row-major)
//! [u32 labels; count]      if flags & 1
//! [u32 cameras; count]     if flags & 2
//! [f64 timestamps; count]  if flags & 4
//! JSON provenance trailer (UTF-8, to end of file)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde_json::Value;

use crate::error::{invalid_input, Error, Result};

pub const MAGIC: &[u8; 4] = b"TGEB";
pub const VERSION: u32 = 1;

const FLAG_LABELS: u8 = 1;
const FLAG_CAMERAS: u8 = 2;
const FLAG_TIMESTAMPS: u8 = 4;

/// A matrix of d-dimensional feature rows with optional per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub features: Array2<f64>,
    pub labels: Option<Vec<u32>>,
    pub cameras: Option<Vec<u32>>,
    pub timestamps: Option<Vec<f64>>,
    pub provenance: Value,
}

impl EmbeddingBatch {
    pub fn new(features: Array2<f64>) -> Self {
        Self {
            features,
            labels: None,
            cameras: None,
            timestamps: None,
            provenance: Value::Object(Default::default()),
        }
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_cameras(mut self, cameras: Vec<u32>) -> Self {
        self.cameras = Some(cameras);
        self
    }

    pub fn with_timestamps(mut self, ts: Vec<f64>) -> Self {
        self.timestamps = Some(ts);
        self
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Checks metadata lengths and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(invalid_input(format!("{} labels for {} rows", l.len(), n)));
            }
        }
        if let Some(c) = &self.cameras {
            if c.len() != n {
                return Err(invalid_input(format!("{} camera ids for {} rows", c.len(), n)));
            }
        }
        if let Some(t) = &self.timestamps {
            if t.len() != n {
                return Err(invalid_input(format!("{} timestamps for {} rows", t.len(), n)));
            }
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(invalid_input("non-finite feature value"));
        }
        Ok(())
    }

    pub fn labels_required(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| invalid_input("embedding batch carries no labels"))
    }

    /// Rows selected by index, metadata carried along.
    pub fn select(&self, rows: &[usize]) -> Self {
        let features = self.features.select(ndarray::Axis(0), rows);
        let pick_u32 = |v: &Option<Vec<u32>>| v.as_ref().map(|v| rows.iter().map(|&i| v[i]).collect());
        Self {
            features,
            labels: pick_u32(&self.labels),
            cameras: pick_u32(&self.cameras),
            timestamps: self.timestamps.as_ref().map(|v| rows.iter().map(|&i| v[i]).collect()),
            provenance: self.provenance.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(to_u32(self.len())?)?;
        w.write_u32::<LittleEndian>(to_u32(self.dim())?)?;
        let mut flags = 0u8;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.cameras.is_some() {
            flags |= FLAG_CAMERAS;
        }
        if self.timestamps.is_some() {
            flags |= FLAG_TIMESTAMPS;
        }
        w.write_u8(flags)?;
        for &x in self.features.iter() {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
        for v in [&self.labels, &self.cameras].into_iter().flatten() {
            for &x in v {
                w.write_u32::<LittleEndian>(x)?;
            }
        }
        if let Some(ts) = &self.timestamps {
            for &t in ts {
                w.write_f64::<LittleEndian>(t)?;
            }
        }
        w.write_all(serde_json::to_string(&self.provenance)?.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, expected TGEB".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported TGEB version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let flags = r.read_u8()?;
        if flags & !(FLAG_LABELS | FLAG_CAMERAS | FLAG_TIMESTAMPS) != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
        }
        let mut data = vec![0f32; count * dim];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let features = Array2::from_shape_vec((count, dim), data.into_iter().map(f64::from).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        let read_u32s = |r: &mut R| -> Result<Vec<u32>> {
            let mut v = vec![0u32; count];
            r.read_u32_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let labels = if flags & FLAG_LABELS != 0 { Some(read_u32s(&mut r)?) } else { None };
        let cameras = if flags & FLAG_CAMERAS != 0 { Some(read_u32s(&mut r)?) } else { None };
        let timestamps = if flags & FLAG_TIMESTAMPS != 0 {
            let mut v = vec![0f64; count];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Some(v)
        } else {
            None
        };
        let mut trailer = String::new();
        r.read_to_string(&mut trailer)?;
        let provenance = if trailer.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(&trailer)?
        };
        Ok(Self { features, labels, cameras, timestamps, provenance })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Loads a TGEB file, or a CSV file when the extension is `.csv`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            return Self::read_csv(std::fs::File::open(path)?);
        }
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// CSV ingest for small files. A header row is required; the columns
    /// `label`, `camera` and `timestamp` are metadata, every other column is a feature.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (label_col, cam_col, ts_col) = (col("label"), col("camera"), col("timestamp"));
        let feature_cols: Vec<usize> = (0..headers.len())
            .filter(|&i| Some(i) != label_col && Some(i) != cam_col && Some(i) != ts_col)
            .collect();
        let mut data = Vec::new();
        let (mut labels, mut cams, mut ts) = (Vec::new(), Vec::new(), Vec::new());
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            for &c in &feature_cols {
                data.push(parse_num::<f64>(field(c), rows)?);
            }
            if let Some(c) = label_col {
                labels.push(parse_num::<u32>(field(c), rows)?);
            }
            if let Some(c) = cam_col {
                cams.push(parse_num::<u32>(field(c), rows)?);
            }
            if let Some(c) = ts_col {
                ts.push(parse_num::<f64>(field(c), rows)?);
            }
            rows += 1;
        }
        let features = Array2::from_shape_vec((rows, feature_cols.len()), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        let batch = Self {
            features,
            labels: label_col.map(|_| labels),
            cameras: cam_col.map(|_| cams),
            timestamps: ts_col.map(|_| ts),
            provenance: Value::Object(Default::default()),
        };
        batch.validate()?;
        Ok(batch)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, row: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("row {row}: cannot parse {s:?}")))
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}
