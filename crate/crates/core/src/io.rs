//! File formats shared by every stage: CSV tables and JSON documents with
//! floats written at 17 significant digits so values round-trip exactly.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};

/// Shortest-width rendering with exactly 17 significant digits.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

struct ExactFloats<'a>(PrettyFormatter<'a>);

impl Formatter for ExactFloats<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(format_float(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, ExactFloats(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .expect("serializing an in-memory value cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_csv<I>(path: &Path, header: Option<&[String]>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| csv_error(path, e))?;
    }
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::parse(path, e.to_string())
    }
}

/// Raw CSV content: optional header plus string cells.
pub fn read_csv(path: &Path, has_header: bool) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = if has_header {
        r.headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    let rows = r
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))?;
    Ok((header, rows))
}

fn parse_cell<T: std::str::FromStr>(path: &Path, line: usize, cell: &str) -> Result<T> {
    cell.trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("row {line}: cannot parse `{cell}`")))
}

/// Writes `t,{prefix}0,{prefix}1,...` with one row per time step.
pub fn write_series(path: &Path, prefix: &str, x: &Array2<f64>) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..x.ncols()).map(|j| format!("{prefix}{j}")));
    let rows = x.outer_iter().enumerate().map(|(t, row)| {
        std::iter::once(t.to_string())
            .chain(row.iter().map(|&v| format_float(v)))
            .collect()
    });
    write_csv(path, Some(&header), rows)
}

/// Reads a numeric table with a header; a leading `t` column is dropped.
pub fn read_series(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let (mut header, rows) = read_csv(path, true)?;
    let skip = usize::from(header.first().is_some_and(|h| h == "t"));
    header.drain(..skip);
    let width = header.len();
    let mut values = Vec::with_capacity(rows.len() * width);
    for (i, rec) in rows.iter().enumerate() {
        if rec.len() != width + skip {
            return Err(Error::parse(
                path,
                format!(
                    "row {}: expected {} fields, found {}",
                    i + 1,
                    width + skip,
                    rec.len()
                ),
            ));
        }
        for cell in rec.iter().skip(skip) {
            values.push(parse_cell(path, i + 1, cell)?);
        }
    }
    let x = Array2::from_shape_vec((rows.len(), width), values).expect("row widths checked");
    Ok((header, x))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let header = ["t".to_string(), "e".to_string()];
    let rows = labels
        .iter()
        .enumerate()
        .map(|(t, e)| vec![t.to_string(), e.to_string()]);
    write_csv(path, Some(&header), rows)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let (header, rows) = read_csv(path, true)?;
    let col = header
        .iter()
        .position(|h| h == "e")
        .ok_or_else(|| Error::parse(path, "missing `e` column"))?;
    rows.iter()
        .enumerate()
        .map(|(i, rec)| {
            let cell = rec
                .get(col)
                .ok_or_else(|| Error::parse(path, format!("row {}: missing `e`", i + 1)))?;
            parse_cell(path, i + 1, cell)
        })
        .collect()
}

/// Headerless matrix, one row per line.
pub fn write_matrix(path: &Path, a: &Array2<f64>) -> Result<()> {
    let rows = a
        .outer_iter()
        .map(|row| row.iter().map(|&v| format_float(v)).collect());
    write_csv(path, None, rows)
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let (_, rows) = read_csv(path, false)?;
    let width = rows.first().map_or(0, |r| r.len());
    let mut values = Vec::new();
    for (i, rec) in rows.iter().enumerate() {
        if rec.len() != width {
            return Err(Error::parse(path, format!("row {}: ragged matrix", i + 1)));
        }
        for cell in rec {
            values.push(parse_cell(path, i + 1, cell)?);
        }
    }
    Ok(Array2::from_shape_vec((rows.len(), width), values).expect("row widths checked"))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
