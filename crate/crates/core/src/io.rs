//! Matrix, mesh and JSON file formats.
//!
//! Binary matrices use the NDBF layout: magic `NDBF`, version `u16`, rows
//! `u64`, cols `u64`, then little-endian `f64` in row-major order.

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const NDBF_MAGIC: &[u8; 4] = b"NDBF";
pub const NDBF_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 8;

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_binary(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(NDBF_MAGIC);
    out.extend_from_slice(&NDBF_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < 4 || &bytes[..4] != NDBF_MAGIC {
        return Err(Error::MagicMismatch);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse("offset 4", format!("header truncated at {} bytes", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != NDBF_VERSION {
        return Err(Error::parse("offset 4", format!("unsupported version {version}")));
    }
    let word = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("eight bytes"));
    let (rows, cols) = (word(6), word(14));
    let count = rows.checked_mul(cols).and_then(|c| c.checked_mul(8)).and_then(|b| usize::try_from(b).ok());
    let expected = count.and_then(|b| b.checked_add(HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(Error::parse(
            format!("offset {HEADER_LEN}"),
            format!("{rows}x{cols} payload does not match {} data bytes", bytes.len() - HEADER_LEN),
        ));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let data = &bytes[HEADER_LEN..];
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let o = 8 * (i * cols + j);
        f64::from_le_bytes(data[o..o + 8].try_into().expect("eight bytes"))
    }))
}

pub fn write_binary(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_binary(m))
}

pub fn read_binary(path: &Path) -> Result<DMatrix<f64>> {
    decode_binary(&fs::read(path)?)
}

/// Comma-separated rows with 17 significant digits.
pub fn encode_csv(m: &DMatrix<f64>, header: Option<&[String]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str, has_header: bool) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if (has_header && lineno == 0) || line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, cell) in line.split(',').enumerate() {
            let v = cell.trim().parse::<f64>().map_err(|_| {
                Error::parse(format!("line {}, column {}", lineno + 1, col + 1), format!("not a number: {:?}", cell.trim()))
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(format!("line {}", lineno + 1), format!("{} fields, expected {}", row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn write_csv(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    write_atomic(path, encode_csv(m, header).as_bytes())
}

pub fn read_csv(path: &Path, has_header: bool) -> Result<DMatrix<f64>> {
    decode_csv(&fs::read_to_string(path)?, has_header)
}

/// Parses an OFF triangle mesh. Comments start with `#`.
pub fn decode_off(text: &str) -> Result<TriangleMesh> {
    let mut tokens = text
        .lines()
        .enumerate()
        .flat_map(|(i, l)| l.split('#').next().unwrap_or("").split_whitespace().map(move |t| (i + 1, t)));
    match tokens.next() {
        Some((_, "OFF")) => {}
        Some((line, t)) => return Err(Error::parse(format!("line {line}"), format!("expected OFF, found {t:?}"))),
        None => return Err(Error::parse("line 1", "empty file")),
    }
    let mut next_num = |what: &str| -> Result<(usize, String)> {
        tokens.next().map(|(l, t)| (l, t.to_string())).ok_or_else(|| Error::parse("end of file", format!("missing {what}")))
    };
    let mut count = |what: &str| -> Result<usize> {
        let (l, t) = next_num(what)?;
        t.parse().map_err(|_| Error::parse(format!("line {l}"), format!("bad {what}: {t:?}")))
    };
    let nv = count("vertex count")?;
    let nf = count("face count")?;
    let _edges = count("edge count")?;
    let mut coord = |what: &str| -> Result<f64> {
        let (l, t) = next_num(what)?;
        t.parse().map_err(|_| Error::parse(format!("line {l}"), format!("bad {what}: {t:?}")))
    };
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        vertices.push([coord("coordinate")?, coord("coordinate")?, coord("coordinate")?]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let arity = coord("face arity")?;
        if arity != 3.0 {
            return Err(Error::parse("faces", format!("only triangles are supported, found arity {arity}")));
        }
        let mut f = [0usize; 3];
        for slot in &mut f {
            let v = coord("face index")?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::parse("faces", format!("bad vertex index {v}")));
            }
            *slot = v as usize;
        }
        faces.push(f);
    }
    TriangleMesh::new(vertices, faces)
}

pub fn encode_off(mesh: &TriangleMesh) -> String {
    let mut out = format!("OFF\n{} {} 0\n", mesh.vertices().len(), mesh.faces().len());
    for v in mesh.vertices() {
        out.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", v[0], v[1], v[2]));
    }
    for f in mesh.faces() {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    out
}

pub fn read_off(path: &Path) -> Result<TriangleMesh> {
    decode_off(&fs::read_to_string(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `vertex,label` CSV with a header row; labels are written as given (1-based by convention).
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_atomic(path, encode_labels(labels).as_bytes())
}

pub fn encode_labels(labels: &[usize]) -> String {
    let mut text = String::from("vertex,label\n");
    for (v, l) in labels.iter().enumerate() {
        text.push_str(&format!("{v},{l}\n"));
    }
    text
}

/// Accepts `vertex,label` rows (header optional, vertices must run 0, 1, ...) or one label per line.
pub fn decode_labels(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.chars().next().is_some_and(|c| c.is_alphabetic())) {
            continue;
        }
        let bad = |m: String| Error::parse(format!("line {}", i + 1), m);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let label = match fields.as_slice() {
            [l] => l,
            [v, l] => {
                let v: usize = v.parse().map_err(|_| bad(format!("bad vertex index {v:?}")))?;
                if v != out.len() {
                    return Err(bad(format!("vertex {v} out of order, expected {}", out.len())));
                }
                l
            }
            _ => return Err(bad(format!("expected vertex,label but found {} fields", fields.len()))),
        };
        out.push(label.parse().map_err(|_| bad(format!("bad label {label:?}")))?);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    decode_labels(&fs::read_to_string(path)?)
}
