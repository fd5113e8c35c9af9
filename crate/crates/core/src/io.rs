//! CSV input and output.
//!
//! One row per point, one column per coordinate, optionally followed by a
//! weight column. A first row that does not parse as numbers is a header.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvData {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Csv(e.to_string())
}

fn parse_record(rec: &csv::StringRecord) -> Option<Vec<f64>> {
    rec.iter().map(|f| f.trim().parse::<f64>().ok()).collect()
}

/// Parses CSV text. With `weight_column`, the last column holds weights.
pub fn read_csv<R: Read>(reader: R, weight_column: bool) -> Result<CsvData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = CsvData::default();
    let mut weights = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let values = match parse_record(&rec) {
            Some(v) => v,
            None if line == 0 => {
                out.header = Some(rec.iter().map(str::to_owned).collect());
                continue;
            }
            None => {
                return Err(Error::Csv(format!(
                    "line {}: non-numeric field",
                    line + 1
                )))
            }
        };
        let mut values = values;
        if weight_column {
            let w = values.pop().filter(|_| !values.is_empty()).ok_or_else(|| {
                Error::Csv(format!("line {}: need coordinates and a weight", line + 1))
            })?;
            weights.push(w);
        }
        out.rows.push(values);
    }
    if weight_column {
        out.weights = Some(weights);
    }
    Ok(out)
}

pub fn read_csv_path(path: impl AsRef<Path>, weight_column: bool) -> Result<CsvData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(file), weight_column)
}

/// Writes rows, preceded by `header` when given. Floats use the shortest
/// representation that round-trips.
pub fn write_csv<W: Write>(writer: W, header: Option<&[String]>, rows: &[Vec<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    if let Some(h) = header {
        wtr.write_record(h).map_err(csv_err)?;
    }
    for row in rows {
        wtr.write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    wtr.flush().map_err(csv_err)
}

pub fn write_csv_path(path: impl AsRef<Path>, header: Option<&[String]>, rows: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    write_csv(std::io::BufWriter::new(file), header, rows)
}
