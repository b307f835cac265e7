//! On-disk formats: image stores, label and feature tables, fold manifests.
//!
//! An image store is little-endian binary:
//!
//! ```text
//! magic    8 bytes  "MCIIMG01"
//! count    u32
//! channels u32
//! side     u32
//! count × { id_len u16, id utf-8, tag u8, channels·side·side × f32 }
//! ```
//!
//! `tag` is the visit index for longitudinal images and the diagnosis index
//! for diagnostic ones.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Fold, FeatureTable, Label, Visit, IMAGE_FEATURES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: &[u8; 8] = b"MCIIMG01";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub tag: u8,
    pub image: Tensor,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn write_images(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    let (channels, side) = match records.first().map(|r| r.image.shape()) {
        Some(&[c, h, w]) if h == w => (c, h),
        Some(shape) => {
            return Err(Error::input(format!("image store needs C×S×S images, got {shape:?}")));
        }
        None => (0, 0),
    };
    let mut out = Vec::new();
    out.extend_from_slice(IMAGE_MAGIC);
    for n in [records.len(), channels, side] {
        out.extend_from_slice(&u32::try_from(n).map_err(|_| Error::input("image store too large"))?.to_le_bytes());
    }
    for r in records {
        if r.image.shape() != [channels, side, side] {
            return Err(Error::input(format!("{}: mixed image shapes in one store", r.id)));
        }
        let id = r.id.as_bytes();
        out.extend_from_slice(&u16::try_from(id.len()).map_err(|_| Error::input("id too long"))?.to_le_bytes());
        out.extend_from_slice(id);
        out.push(r.tag);
        for &v in r.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut w = create(path)?;
    w.write_all(&out).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_images(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let bad = |m: &str| Error::input(format!("{}: {m}", path.display()));
    if cur.take(8).ok_or_else(|| bad("truncated header"))? != IMAGE_MAGIC {
        return Err(bad("not an image store"));
    }
    let mut header = [0usize; 3];
    for h in &mut header {
        *h = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    }
    let [count, channels, side] = header;
    let pixels = channels * side * side;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u16().ok_or_else(|| bad("truncated record"))? as usize;
        let id = std::str::from_utf8(cur.take(len).ok_or_else(|| bad("truncated id"))?)
            .map_err(|_| bad("id is not utf-8"))?
            .to_string();
        let tag = cur.take(1).ok_or_else(|| bad("truncated record"))?[0];
        let raw = cur.take(pixels * 4).ok_or_else(|| bad("truncated pixels"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        records.push(ImageRecord {
            id,
            tag,
            image: Tensor::new(&[channels, side, side], data)?,
        });
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(records)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_labels(path: impl AsRef<Path>, labels: &BTreeMap<String, Label>) -> Result<()> {
    let mut csv = csv::Writer::from_writer(create(path.as_ref())?);
    csv.write_record(["subject_id", "label"])?;
    for (id, label) in labels {
        csv.write_record([id.as_str(), label.name()])?;
    }
    csv.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, Label>> {
    let mut csv = csv::Reader::from_reader(open(path.as_ref())?);
    let mut labels = BTreeMap::new();
    for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let (Some(id), Some(label)) = (record.get(0), record.get(1)) else {
            return Err(Error::Parse {
                line,
                message: "expected subject_id,label".into(),
            });
        };
        let label = label.parse().map_err(|e: Error| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        labels.insert(id.to_string(), label);
    }
    Ok(labels)
}

/// Columns `subject_id, visit_code, f000 … f255`, one row per stored vector.
pub fn write_feature_cache(writer: impl Write, table: &FeatureTable) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "visit_code".to_string()];
    header.extend((0..IMAGE_FEATURES).map(|i| format!("f{i:03}")));
    csv.write_record(&header)?;
    for (id, visit, features) in table.iter() {
        let mut record = vec![id.to_string(), visit.code().to_string()];
        record.extend(features.iter().map(|v| format!("{v:?}")));
        csv.write_record(&record)?;
    }
    csv.flush().map_err(|e| Error::io("<feature cache>", e))
}

pub fn read_feature_cache(reader: impl Read) -> Result<FeatureTable> {
    let mut csv = csv::Reader::from_reader(reader);
    let header = csv.headers()?.clone();
    if header.len() != IMAGE_FEATURES + 2 || header.get(0) != Some("subject_id") || header.get(1) != Some("visit_code")
    {
        return Err(Error::Schema("subject_id, visit_code, f000..f255".into()));
    }
    let mut table = FeatureTable::new();
    for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| Error::Parse { line, message };
        let visit: Visit = record[1].parse().map_err(|e: Error| parse_err(e.to_string()))?;
        let features = record
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(format!("cannot parse {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        table.insert(&record[0], visit, features)?;
    }
    Ok(table)
}

pub fn load_feature_cache(path: impl AsRef<Path>) -> Result<FeatureTable> {
    read_feature_cache(open(path.as_ref())?)
}

pub fn save_feature_cache(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    write_feature_cache(create(path.as_ref())?, table)
}

/// Columns `fold, subject_id, role, label`.
pub fn write_fold_manifest(writer: impl Write, folds: &[Fold], labels: &BTreeMap<String, Label>) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["fold", "subject_id", "role", "label"])?;
    for fold in folds {
        for (role, ids) in [("train", &fold.train), ("val", &fold.val)] {
            for id in ids {
                let label = labels.get(id).map_or("unknown", |l| l.name());
                csv.write_record([fold.index.to_string().as_str(), id, role, label])?;
            }
        }
    }
    csv.flush().map_err(|e| Error::io("<fold manifest>", e))
}
