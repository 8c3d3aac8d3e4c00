//! Reading and writing embedding datasets.
//!
//! Two interchange formats:
//!
//! - FSE1, little-endian binary: bytes 0-3 ASCII `"FSE1"`, `u32` version = 1,
//!   `u32` class_count, `u32` dim, `u64` record_count, then record_count
//!   records of `[u32 class_id, dim x f32 feature]`. Readers promote the f32
//!   features to 64-bit reals.
//! - CSV, UTF-8 with LF newlines: header `class_id,f0,...,f{dim-1}`, one
//!   record per line, nonnegative integer class ids, decimal float features.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::Vec64;

use super::{DatasetClass, DatasetError, EmbeddingDataset};

const MAGIC: &[u8; 4] = b"FSE1";
const VERSION: u32 = 1;

/// On-disk dataset formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Fse1,
    Csv,
}

impl std::str::FromStr for DataFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fse1" => Ok(DataFormat::Fse1),
            "csv" => Ok(DataFormat::Csv),
            other => Err(format!("unknown dataset format {other:?} (expected fse1|csv)")),
        }
    }
}

/// Loads a dataset from a file, enforcing all dataset invariants.
pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<EmbeddingDataset, DatasetError> {
    let file = File::open(path)?;
    match format {
        DataFormat::Fse1 => read_fse1(BufReader::new(file)),
        DataFormat::Csv => read_csv(BufReader::new(file)),
    }
}

/// Writes a dataset to a file in the given format.
pub fn save_dataset(
    ds: &EmbeddingDataset,
    path: impl AsRef<Path>,
    format: DataFormat,
) -> Result<(), DatasetError> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    match format {
        DataFormat::Fse1 => write_fse1(ds, &mut writer)?,
        DataFormat::Csv => write_csv(ds, &mut writer)?,
    }
    writer.flush()?;
    Ok(())
}

struct Counted<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Counted<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], context: &'static str) -> Result<(), DatasetError> {
        let offset = self.pos;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.pos += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(DatasetError::Truncated { offset, context })
            }
            Err(e) => Err(DatasetError::Io(e)),
        }
    }

    fn read_u32(&mut self, context: &'static str) -> Result<u32, DatasetError> {
        let mut buf = [0u8; 4];
        self.read_exact_at(&mut buf, context)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_u64(&mut self, context: &'static str) -> Result<u64, DatasetError> {
        let mut buf = [0u8; 8];
        self.read_exact_at(&mut buf, context)?;
        Ok(u64::from_le_bytes(buf))
    }
}

pub(crate) fn read_fse1<R: Read>(reader: R) -> Result<EmbeddingDataset, DatasetError> {
    let mut r = Counted { inner: reader, pos: 0 };

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic { offset: 0 });
    }
    let version_offset = r.pos;
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion { got: version, offset: version_offset });
    }
    let class_count = r.read_u32("class count")?;
    let dim = r.read_u32("dimension")? as usize;
    let record_count = r.read_u64("record count")?;
    if dim == 0 {
        return Err(DatasetError::Invalid("dimension must be positive".into()));
    }

    // Group records by class id, preserving first-appearance order so a
    // write/read round trip reproduces the dataset exactly.
    let mut order: Vec<u32> = Vec::new();
    let mut by_class: std::collections::HashMap<u32, Vec<Vec64>> = std::collections::HashMap::new();
    let mut feat_buf = vec![0u8; 4 * dim];
    for _ in 0..record_count {
        let class_id = r.read_u32("record class id")?;
        r.read_exact_at(&mut feat_buf, "record features")?;
        let values: Vec<f64> = feat_buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let feature = Vec64::new(values)
            .map_err(|_| DatasetError::Invalid(format!("non-finite feature in class {class_id}")))?;
        by_class
            .entry(class_id)
            .or_insert_with(|| {
                order.push(class_id);
                Vec::new()
            })
            .push(feature);
    }

    if order.len() != class_count as usize {
        return Err(DatasetError::Invalid(format!(
            "header declares {class_count} classes but records contain {}",
            order.len()
        )));
    }

    let classes = order
        .into_iter()
        .map(|id| DatasetClass { id, features: by_class.remove(&id).expect("grouped above") })
        .collect();
    EmbeddingDataset::new(dim, classes)
}

pub(crate) fn write_fse1<W: Write>(ds: &EmbeddingDataset, writer: &mut W) -> Result<(), DatasetError> {
    writer.write_all(MAGIC)?;
    writer.write_all(&VERSION.to_le_bytes())?;
    writer.write_all(&(ds.num_classes() as u32).to_le_bytes())?;
    writer.write_all(&(ds.dim() as u32).to_le_bytes())?;
    writer.write_all(&(ds.total_features() as u64).to_le_bytes())?;
    for class in ds.classes() {
        for feature in &class.features {
            writer.write_all(&class.id.to_le_bytes())?;
            for &v in feature.iter() {
                writer.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub(crate) fn read_csv<R: BufRead>(reader: R) -> Result<EmbeddingDataset, DatasetError> {
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| DatasetError::BadHeader("<empty file>".into()))?;
    let header = header?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() < 2 || fields[0] != "class_id" {
        return Err(DatasetError::BadHeader(header.clone()));
    }
    for (i, field) in fields[1..].iter().enumerate() {
        if *field != format!("f{i}") {
            return Err(DatasetError::BadHeader(header.clone()));
        }
    }
    let dim = fields.len() - 1;

    let mut order: Vec<u32> = Vec::new();
    let mut by_class: std::collections::HashMap<u32, Vec<Vec64>> = std::collections::HashMap::new();
    for (index, line) in lines {
        let line_no = index + 1; // 1-based, header is line 1
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(DatasetError::RaggedRow {
                line: line_no,
                expected: dim + 1,
                got: fields.len(),
            });
        }
        let class_id: u32 = fields[0].parse().map_err(|_| DatasetError::BadField {
            line: line_no,
            what: "class id",
            value: fields[0].to_string(),
        })?;
        let mut values = Vec::with_capacity(dim);
        for field in &fields[1..] {
            let v: f64 = field.parse().map_err(|_| DatasetError::BadField {
                line: line_no,
                what: "feature value",
                value: field.to_string(),
            })?;
            values.push(v);
        }
        let feature = Vec64::new(values).map_err(|_| DatasetError::BadField {
            line: line_no,
            what: "feature value",
            value: "non-finite".into(),
        })?;
        by_class
            .entry(class_id)
            .or_insert_with(|| {
                order.push(class_id);
                Vec::new()
            })
            .push(feature);
    }

    let classes = order
        .into_iter()
        .map(|id| DatasetClass { id, features: by_class.remove(&id).expect("grouped above") })
        .collect();
    EmbeddingDataset::new(dim, classes)
}

pub(crate) fn write_csv<W: Write>(ds: &EmbeddingDataset, writer: &mut W) -> Result<(), DatasetError> {
    write!(writer, "class_id")?;
    for i in 0..ds.dim() {
        write!(writer, ",f{i}")?;
    }
    writeln!(writer)?;
    for class in ds.classes() {
        for feature in &class.features {
            write!(writer, "{}", class.id)?;
            for &v in feature.iter() {
                // Shortest round-trip float representation.
                write!(writer, ",{v}")?;
            }
            writeln!(writer)?;
        }
    }
    Ok(())
}
