use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DataError, RawSeries};

const STBIN_MAGIC: &[u8; 4] = b"STB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesFormat {
    /// T rows × N columns, single feature, optional header row.
    Csv,
    /// Little-endian `STB1` container.
    Stbin,
}

impl SeriesFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("stbin") | Some("bin") => Self::Stbin,
            _ => Self::Csv,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_series(path: &Path, format: SeriesFormat) -> Result<RawSeries, DataError> {
    match format {
        SeriesFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            parse_csv(&text)
        }
        SeriesFormat::Stbin => {
            let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
            parse_stbin(&bytes)
        }
    }
}

fn parse_csv(text: &str) -> Result<RawSeries, DataError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, usize> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| s.parse::<f64>().map_err(|_| c))
            .collect();
        match parsed {
            Ok(vals) => {
                if let Some(c) = vals.iter().position(|v| !v.is_finite()) {
                    return Err(DataError::Parse {
                        row: line_no,
                        col: c,
                        msg: "non-finite value".into(),
                    });
                }
                if let Some(first) = rows.first() {
                    if first.len() != vals.len() {
                        return Err(DataError::Dimension(format!(
                            "row {line_no} has {} columns, expected {}",
                            vals.len(),
                            first.len()
                        )));
                    }
                }
                rows.push(vals);
            }
            // a non-numeric first line is the header
            Err(_) if line_no == 0 => {}
            Err(c) => {
                return Err(DataError::Parse {
                    row: line_no,
                    col: c,
                    msg: format!("cannot parse {:?} as a number", cells[c]),
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(DataError::Dimension("no data rows".into()));
    }
    let (t, n) = (rows.len(), rows[0].len());
    let mut data = vec![0.0; n * t];
    for (ti, row) in rows.iter().enumerate() {
        for (ni, &v) in row.iter().enumerate() {
            data[ni * t + ti] = v;
        }
    }
    RawSeries::new(n, t, 1, data)
}

fn parse_stbin(bytes: &[u8]) -> Result<RawSeries, DataError> {
    if bytes.len() < 16 || &bytes[..4] != STBIN_MAGIC {
        return Err(DataError::Parse {
            row: 0,
            col: 0,
            msg: "missing STB1 magic".into(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, t, f) = (u32_at(4), u32_at(8), u32_at(12));
    let count = n * t * f;
    if bytes.len() != 16 + 8 * count {
        return Err(DataError::Dimension(format!(
            "header declares {count} values but payload holds {} bytes",
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    RawSeries::new(n, t, f, data)
}

pub fn save_stbin(series: &RawSeries, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(16 + 8 * series.data().len());
    buf.extend_from_slice(STBIN_MAGIC);
    for d in [series.n(), series.t(), series.f()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in series.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Writes feature 0 as T rows × N columns with a `s0,s1,...` header.
pub fn save_series_csv(series: &RawSeries, path: &Path) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = String::new();
    let header: Vec<String> = (0..series.n()).map(|i| format!("s{i}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..series.t() {
        let row: Vec<String> = (0..series.n()).map(|n| format!("{}", series.get(n, t, 0))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}
