//! Headerless CSV files: probabilities (`n x k`), labels (one integer per
//! line) and noise matrices (`k x k`).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use noisecp::data::ProbabilityMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| CliError::Csv {
            path: path.into(),
            source,
        })
}

/// Rows of reals; blank lines are skipped.
pub fn read_real_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for record in reader(path)?.records() {
        let record = record.map_err(|source| CliError::Csv {
            path: path.into(),
            source,
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| CliError::Parse {
                    path: path.into(),
                    line,
                    message: format!("{field:?} is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_probabilities(path: &Path) -> Result<ProbabilityMatrix> {
    Ok(ProbabilityMatrix::from_rows(&read_real_rows(path)?)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for record in reader(path)?.records() {
        let record = record.map_err(|source| CliError::Csv {
            path: path.into(),
            source,
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        match record.len() {
            0 => continue,
            1 if record[0].is_empty() => continue,
            1 => labels.push(record[0].parse().map_err(|_| CliError::Parse {
                path: path.into(),
                line,
                message: format!("{:?} is not a class index", &record[0]),
            })?),
            n => {
                return Err(CliError::Parse {
                    path: path.into(),
                    line,
                    message: format!("expected one column, found {n}"),
                })
            }
        }
    }
    Ok(labels)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let rows = read_real_rows(path)?;
    let k = rows.len();
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != k) {
        return Err(CliError::Parse {
            path: path.into(),
            line: i + 1,
            message: format!("noise matrix must be {k}x{k}, row has {} entries", row.len()),
        });
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.into(),
        source,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create(path)?))
}

fn finish<W: Write>(path: &Path, mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(io_err(path))
}

pub fn write_probabilities(path: &Path, probs: &ProbabilityMatrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in probs.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|source| CliError::Csv {
                path: path.into(),
                source,
            })?;
    }
    finish(path, w)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = create(path)?;
    for y in labels {
        writeln!(w, "{y}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Serializable records with a header row.
pub fn write_records<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in records {
        w.serialize(r).map_err(|source| CliError::Csv {
            path: path.into(),
            source,
        })?;
    }
    finish(path, w)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(io::BufReader::new(file)).map_err(|source| CliError::Json {
        path: path.into(),
        source,
    })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes()).map_err(io_err(p))?;
            w.flush().map_err(io_err(p))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(text.as_bytes())
                .and_then(|_| lock.flush())
                .map_err(io_err(Path::new("<stdout>")))
        }
    }
}
