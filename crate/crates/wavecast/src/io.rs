//! CSV ingestion and output.

use std::path::Path;

use wavecast_core::data::{resolve_missing, NanPolicy, TimeSeries};
use wavecast_core::substrate::Tensor;
use wavecast_core::Error as CoreError;

use crate::error::{AppError, AppResult};

/// Reads an ETT-style file: a header row, a date or index first column,
/// and numeric channels after it. Row numbers in errors count data rows
/// from 1.
pub fn load_csv(path: &Path, policy: NanPolicy) -> AppResult<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 {
        return Err(AppError::Data(format!("{}: need a date/index column and at least one channel", path.display())));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut stamps = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != header.len() {
            return Err(CoreError::Ingestion {
                row,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            }
            .into());
        }
        stamps.push(rec[0].to_string());
        let cells = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(c, cell)| parse_cell(cell).map_err(|_| CoreError::Ingestion {
                row,
                message: format!("column {:?}: cannot parse {cell:?} as a number", names[c]),
            }))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(AppError::Data(format!("{}: no data rows", path.display())));
    }
    let rows = resolve_missing(rows, policy)?;
    let v = names.len();
    let values = Tensor::new([rows.len(), v], rows.into_iter().flatten().collect())?;
    let mut ts = TimeSeries::new(values, names)?.with_timestamps(stamps)?;
    ts.frequency = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok(ts)
}

/// Empty and NaN-like cells are missing; anything else must parse.
fn parse_cell(cell: &str) -> Result<Option<f64>, ()> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| ())?;
    Ok(v.is_finite().then_some(v))
}

fn csv_error(path: &Path, e: csv::Error) -> AppError {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => AppError::io(path, io),
            _ => unreachable!(),
        },
        _ => AppError::Data(format!("{}: {e}", path.display())),
    }
}

/// Writes named columns of equal length, with an optional leading label column.
pub fn write_columns(path: &Path, labels: Option<(&str, &[String])>, columns: &[(&str, &[f64])]) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = Vec::new();
    if let Some((name, _)) = labels {
        header.push(name);
    }
    header.extend(columns.iter().map(|c| c.0));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    let n = columns.first().map_or(0, |c| c.1.len());
    for r in 0..n {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some((_, l)) = labels {
            rec.push(l[r].clone());
        }
        rec.extend(columns.iter().map(|c| format!("{}", c.1[r])));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Writes a whole series with its timestamps (or row indices).
pub fn write_series(path: &Path, ts: &TimeSeries) -> AppResult<()> {
    let v = ts.variables();
    let cols: Vec<Vec<f64>> = (0..v).map(|c| (0..ts.len()).map(|r| ts.values.data()[r * v + c]).collect()).collect();
    let labels: Vec<String> = match &ts.timestamps {
        Some(t) => t.clone(),
        None => (0..ts.len()).map(|i| (ts.offset + i).to_string()).collect(),
    };
    let named: Vec<(&str, &[f64])> = ts.channel_names.iter().map(String::as_str).zip(cols.iter().map(Vec::as_slice)).collect();
    write_columns(path, Some(("date", &labels)), &named)
}
