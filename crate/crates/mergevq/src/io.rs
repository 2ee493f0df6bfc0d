//! Binary and text artifact formats.
//!
//! * Tensor files (`.mvqt`): magic `MVQT`, one version byte (= 1), `u32`
//!   dimension count, the `u32` dimensions, then little-endian `f32` values
//!   in row-major order. All integer fields are little-endian.
//! * Source files (`.mvqs`): magic `MVQS`, `u32` merged count `k`, `u32`
//!   original count `l`, then `l` `u32` cluster-row indices (column-wise
//!   assignment form).
//! * Code files (`.codes`): one decimal codebook index per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::tome::SourceMatrix;

const TENSOR_MAGIC: &[u8; 4] = b"MVQT";
const TENSOR_VERSION: u8 = 1;
const SOURCE_MAGIC: &[u8; 4] = b"MVQS";

fn bad<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::BadFormat {
        detail: detail.into(),
    })
}

pub fn write_tensor<W: Write>(w: &mut W, dims: &[usize], data: &[f32]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return bad(format!(
            "tensor dims {:?} imply {} values, got {}",
            dims,
            expected,
            data.len()
        ));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION])?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return bad(format!("bad tensor magic {magic:?}"));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != TENSOR_VERSION {
        return bad(format!("unsupported tensor version {}", version[0]));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return bad(format!("implausible tensor rank {ndim}"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(r)? as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok((dims, data))
}

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix<f32>) -> Result<()> {
    write_tensor(w, &[m.rows(), m.cols()], m.data())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix<f32>> {
    let (dims, data) = read_tensor(r)?;
    if dims.len() != 2 {
        return bad(format!("expected rank-2 tensor, got rank {}", dims.len()));
    }
    Matrix::from_vec(dims[0], dims[1], data)
}

pub fn write_source<W: Write>(w: &mut W, s: &SourceMatrix) -> Result<()> {
    w.write_all(SOURCE_MAGIC)?;
    w.write_all(&(s.k() as u32).to_le_bytes())?;
    w.write_all(&(s.l() as u32).to_le_bytes())?;
    for &row in s.assignment() {
        w.write_all(&row.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_source<R: Read>(r: &mut R) -> Result<SourceMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SOURCE_MAGIC {
        return bad(format!("bad source magic {magic:?}"));
    }
    let k = read_u32(r)? as usize;
    let l = read_u32(r)? as usize;
    let mut assignment = Vec::with_capacity(l);
    for _ in 0..l {
        assignment.push(read_u32(r)?);
    }
    SourceMatrix::new(k, l, assignment)
}

pub fn write_codes<W: Write>(w: &mut W, indices: &[u64]) -> Result<()> {
    for &i in indices {
        writeln!(w, "{i}")?;
    }
    Ok(())
}

pub fn read_codes<R: Read>(r: R) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match trimmed.parse::<u64>() {
            Ok(v) => out.push(v),
            Err(_) => return bad(format!("line {}: not a code index: {trimmed:?}", lineno + 1)),
        }
    }
    Ok(out)
}

pub fn write_matrix_file(path: &Path, m: &Matrix<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix_file(path: &Path) -> Result<Matrix<f32>> {
    read_matrix(&mut BufReader::new(File::open(path)?))
}

pub fn write_source_file(path: &Path, s: &SourceMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_source(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn read_source_file(path: &Path) -> Result<SourceMatrix> {
    read_source(&mut BufReader::new(File::open(path)?))
}

pub fn write_codes_file(path: &Path, indices: &[u64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codes(&mut w, indices)?;
    w.flush()?;
    Ok(())
}

pub fn read_codes_file(path: &Path) -> Result<Vec<u64>> {
    read_codes(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
