use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Visit, BIOMARKERS, NUM_BIOMARKERS};
use crate::error::{Error, Result};

/// One subject visit. `None` marks a value recorded as `NA` in the source.
#[derive(Clone, Debug, PartialEq)]
pub struct BiomarkerRow {
    pub subject_id: String,
    pub visit: Visit,
    pub values: [Option<f64>; NUM_BIOMARKERS],
}

impl BiomarkerRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        BIOMARKERS.iter().position(|&b| b == name).and_then(|i| self.values[i])
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

pub fn load_biomarkers(path: impl AsRef<Path>) -> Result<Vec<BiomarkerRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_biomarkers(file)
}

/// Parses a biomarker table. Columns may appear in any order; unknown
/// columns are ignored with a warning.
pub fn read_biomarkers(reader: impl Read) -> Result<Vec<BiomarkerRow>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = csv.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    };
    let subject_col = column("subject_id")?;
    let visit_col = column("visit_code")?;
    let value_cols = BIOMARKERS.iter().map(|b| column(b)).collect::<Result<Vec<_>>>()?;
    for h in header.iter() {
        if h != "subject_id" && h != "visit_code" && !BIOMARKERS.contains(&h) {
            log::warn!("ignoring unknown biomarker column {h:?}");
        }
    }

    let mut rows = Vec::new();
    for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("");
        let visit = field(visit_col).parse::<Visit>().map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let subject_id = field(subject_col).to_string();
        if subject_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty subject_id".into(),
            });
        }
        let mut values = [None; NUM_BIOMARKERS];
        for (k, &col) in value_cols.iter().enumerate() {
            let raw = field(col);
            values[k] = match raw {
                "NA" | "" => None,
                _ => match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Some(v),
                    _ => {
                        return Err(Error::Parse {
                            line,
                            message: format!("{}: cannot parse {raw:?}", BIOMARKERS[k]),
                        })
                    }
                },
            };
        }
        rows.push(BiomarkerRow {
            subject_id,
            visit,
            values,
        });
    }
    Ok(rows)
}

pub fn write_biomarkers(writer: impl Write, rows: &[BiomarkerRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id", "visit_code"];
    header.extend(BIOMARKERS);
    csv.write_record(&header)?;
    for row in rows {
        let mut record = vec![row.subject_id.clone(), row.visit.code().to_string()];
        // `{:?}` keeps the shortest representation that parses back exactly
        record.extend(row.values.iter().map(|v| v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"))));
        csv.write_record(&record)?;
    }
    csv.flush().map_err(|e| Error::io("<biomarkers>", e))?;
    Ok(())
}
