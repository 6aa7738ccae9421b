use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{shape_err, Result};

/// Header line of the binary tensor dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
}

/// Writes `{"rows":R,"cols":C,"dtype":"f64le"}\n` followed by little-endian doubles.
pub fn write_tensor_to<W: Write>(mut w: W, m: &Matrix) -> Result<()> {
    let header = TensorHeader {
        rows: m.rows(),
        cols: m.cols(),
        dtype: "f64le".into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_from<R: BufRead>(mut r: R) -> Result<Matrix> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: TensorHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f64le" {
        return Err(shape_err(format!("unsupported dtype {}", header.dtype)));
    }
    let n = header.rows * header.cols;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::new(header.rows, header.cols, data)
}

pub fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    write_tensor_to(BufWriter::new(File::create(path)?), m)
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    read_tensor_from(BufReader::new(File::open(path)?))
}
