//! File formats: similarity matrices (CSV and `SIMM` binary), dense tensors
//! as CSV, and binary PPM (P6) images.
//!
//! Binary matrix layout: the bytes `SIMM`, rows and cols as little-endian
//! `u32`, then `rows · cols` little-endian `f64` values in row-major order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;
use crate::tensor::Tensor;

pub const MATRIX_MAGIC: &[u8; 4] = b"SIMM";
const BIN_HEADER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Bin,
}

impl MatrixFormat {
    /// `.bin` and `.simm` are binary, everything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("simm") => MatrixFormat::Bin,
            _ => MatrixFormat::Csv,
        }
    }
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// `std::fs::read` with the path in the error message.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| with_path(path, e))
}

/// `std::fs::read_to_string` with the path in the error message.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| with_path(path, e))
}

/// `std::fs::write` with the path in the error message.
pub fn write_bytes(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| with_path(path, e))
}

fn parse_err<T>(msg: String) -> Result<T> {
    Err(Error::Parse(msg))
}

/// Parse comma-separated rows of reals with an optional `# rows cols` header.
pub fn matrix_from_csv(src: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut declared = None;
    let mut rows = 0usize;
    let mut cols = None;
    let mut values = Vec::new();
    for (n, line) in src.lines().enumerate() {
        let lineno = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if rows > 0 || declared.is_some() {
                return parse_err(format!("line {lineno}: header must come first"));
            }
            let dims: Vec<&str> = rest.split_whitespace().collect();
            let parsed: Option<Vec<usize>> = dims.iter().map(|d| d.parse().ok()).collect();
            match parsed.as_deref() {
                Some(&[r, c]) => declared = Some((r, c)),
                _ => return parse_err(format!("line {lineno}: expected `# rows cols`, got {line:?}")),
            }
            continue;
        }
        let start = values.len();
        for (c, cell) in line.split(',').enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| {
                Error::Parse(format!("line {lineno}, column {}: not a number: {cell:?}", c + 1))
            })?;
            values.push(v);
        }
        let width = values.len() - start;
        match cols {
            None => cols = Some(width),
            Some(w) if w != width => {
                return parse_err(format!(
                    "line {lineno}: {width} values, previous rows have {w}"
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Parse("matrix file has no rows".into()))?;
    if let Some((r, c)) = declared {
        if (r, c) != (rows, cols) {
            return parse_err(format!(
                "header declares {r}×{c} but the file holds {rows}×{cols}"
            ));
        }
    }
    Ok((rows, cols, values))
}

/// Rows of values, shortest round-trip formatting, with a `# rows cols` header.
pub fn matrix_to_csv(rows: usize, cols: usize, values: &[f64]) -> String {
    let mut out = format!("# {rows} {cols}\n");
    for r in values.chunks_exact(cols) {
        for (j, v) in r.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn matrix_to_bin(s: &SimilarityMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(BIN_HEADER + 8 * s.values().len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(s.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(s.cols() as u32).to_le_bytes());
    for v in s.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn matrix_from_bin(bytes: &[u8]) -> Result<SimilarityMatrix> {
    if bytes.len() < BIN_HEADER {
        return parse_err(format!(
            "binary matrix: expected at least {BIN_HEADER} header bytes, found {}",
            bytes.len()
        ));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return parse_err(format!("binary matrix: bad magic {:?}", &bytes[..4]));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = BIN_HEADER + 8 * rows * cols;
    if bytes.len() != expected {
        return parse_err(format!(
            "binary matrix {rows}×{cols}: expected {expected} bytes, found {}",
            bytes.len()
        ));
    }
    let values = bytes[BIN_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SimilarityMatrix::new(rows, cols, values)
}

pub fn read_matrix(path: &Path, format: MatrixFormat) -> Result<SimilarityMatrix> {
    match format {
        MatrixFormat::Bin => matrix_from_bin(&read_bytes(path)?),
        MatrixFormat::Csv => {
            let (r, c, v) = matrix_from_csv(&read_text(path)?)?;
            SimilarityMatrix::new(r, c, v)
        }
    }
}

pub fn write_matrix(path: &Path, s: &SimilarityMatrix, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Bin => write_bytes(path, matrix_to_bin(s)),
        MatrixFormat::Csv => write_bytes(path, matrix_to_csv(s.rows(), s.cols(), s.values())),
    }
}

/// A rank-2 tensor (e.g. an embedding block) as CSV.
pub fn tensor_to_csv(t: &Tensor) -> Result<String> {
    t.expect_rank(2, "tensor_to_csv")?;
    Ok(matrix_to_csv(t.shape()[0], t.shape()[1], t.data()))
}

pub fn tensor_from_csv(src: &str) -> Result<Tensor> {
    let (r, c, v) = matrix_from_csv(src)?;
    Tensor::new(vec![r, c], v)
}

/// Decode a binary PPM into an `H×W×3` tensor with values in `[0, 1]`.
pub fn ppm_decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return parse_err("ppm: truncated header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if header[0] != "P6" {
        return parse_err(format!("ppm: expected magic P6, found {:?}", header[0]));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Parse(format!("ppm: bad {what} {s:?}")))
    };
    let (w, h, maxval) = (num(&header[1], "width")?, num(&header[2], "height")?, num(&header[3], "maxval")?);
    if maxval > 65535 {
        return parse_err(format!("ppm: maxval {maxval} exceeds 65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bps;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < need {
        return parse_err(format!(
            "ppm {w}×{h}: expected {need} raster bytes, found {}",
            raster.len()
        ));
    }
    let scale = 1.0 / maxval as f64;
    let data = if bps == 1 {
        raster[..need].iter().map(|&b| b as f64 * scale).collect()
    } else {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    };
    Tensor::new(vec![h, w, 3], data)
}

/// Encode an `H×W×3` tensor with values in `[0, 1]` as an 8-bit PPM.
pub fn ppm_encode(img: &Tensor) -> Result<Vec<u8>> {
    img.expect_rank(3, "ppm_encode")?;
    if img.shape()[2] != 3 {
        return Err(Error::Dimension(format!(
            "ppm needs 3 channels, image has {}",
            img.shape()[2]
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.shape()[1], img.shape()[0]).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    ppm_decode(&read_bytes(path)?)
}
