//! Binary tensor files, parameter checkpoints and netpbm images.
//!
//! Tensor record layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "MGT1"
//! dtype   u8       1 = f64
//! rank    u32
//! dims    rank × u64
//! payload prod(dims) × f64 LE
//! ```
//!
//! A checkpoint is a `.bin` file of consecutive tensor records plus a JSON
//! manifest naming each record with its shape and byte offset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MGT1";
pub const DTYPE_F64: u8 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F64);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one record starting at `bytes[*pos]`, advancing `pos`.
pub fn decode_tensor(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<Tensor> {
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
        let end = end.ok_or_else(|| format_err(path, "truncated tensor record"))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    if take(4)? != TENSOR_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let dtype = take(1)?[0];
    if dtype != DTYPE_F64 {
        return Err(format_err(path, format!("unsupported dtype code {dtype}")));
    }
    let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
    }
    let n: usize = shape.iter().product();
    let raw = take(
        n.checked_mul(8)
            .ok_or_else(|| format_err(path, "size overflow"))?,
    )?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 8 + 64);
    encode_tensor(t, &mut bytes);
    write_bytes(path, &bytes)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = read_all(path)?;
    let mut pos = 0;
    let t = decode_tensor(&bytes, &mut pos, path)?;
    if pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub data_file: String,
    pub entries: Vec<ManifestEntry>,
}

const CHECKPOINT_FORMAT: &str = "melgraph-checkpoint/1";

/// Paths of the `(data, manifest)` pair for a checkpoint stem.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (
        stem.with_extension("bin"),
        stem.with_extension("manifest.json"),
    )
}

pub fn write_checkpoint(stem: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let (data_path, manifest_path) = checkpoint_paths(stem);
    let mut bytes = Vec::new();
    let mut manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        data_file: data_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries: Vec::with_capacity(entries.len()),
    };
    for (name, t) in entries {
        let offset = bytes.len() as u64;
        encode_tensor(t, &mut bytes);
        manifest.entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes: bytes.len() as u64 - offset,
        });
    }
    write_bytes(&data_path, &bytes)?;
    write_bytes(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn read_checkpoint(stem: &Path) -> Result<Vec<(String, Tensor)>> {
    let (data_path, manifest_path) = checkpoint_paths(stem);
    let manifest: CheckpointManifest = serde_json::from_slice(&read_all(&manifest_path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(format_err(
            &manifest_path,
            format!("unknown format {}", manifest.format),
        ));
    }
    let bytes = read_all(&data_path)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let mut pos = e.offset as usize;
            let t = decode_tensor(&bytes, &mut pos, &data_path)?;
            if t.shape() != e.shape.as_slice() {
                return Err(format_err(
                    &data_path,
                    format!("entry {} shape disagrees with manifest", e.name),
                ));
            }
            Ok((e.name.clone(), t))
        })
        .collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale binary PGM of a `[rows × cols]` matrix with values in `[0, 1]`.
/// Row 0 of the matrix is drawn at the bottom so frequency increases upward.
pub fn write_pgm(path: &Path, m: &Tensor) -> Result<()> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in (0..rows).rev() {
        bytes.extend(m.row(r).iter().map(|&v| to_byte(v)));
    }
    write_bytes(path, &bytes)
}

/// Blue→cyan→yellow→red ramp for `v` in `[0, 1]`.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Colour binary PPM from per-pixel RGB in `[0, 1]`; same orientation as
/// [`write_pgm`].
pub fn write_ppm(path: &Path, rows: usize, cols: usize, rgb: &[[f64; 3]]) -> Result<()> {
    let mut bytes = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for r in (0..rows).rev() {
        for px in &rgb[r * cols..(r + 1) * cols] {
            bytes.extend(px.iter().map(|&c| to_byte(c)));
        }
    }
    write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let mut b = Vec::new();
        encode_tensor(&t, &mut b);
        assert_eq!(&b[..4], b"MGT1");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..17], &2u64.to_le_bytes());
        assert_eq!(&b[17..25], &1u64.to_le_bytes());
        assert_eq!(&b[25..33], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 41);
    }

    #[test]
    fn checkpoint_offsets_address_records() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let entries = vec![
            ("a".to_string(), Tensor::vector(&[1.0, 2.0, 3.0])),
            ("b".to_string(), Tensor::scalar(4.0)),
        ];
        write_checkpoint(&stem, &entries).unwrap();
        let back = read_checkpoint(&stem).unwrap();
        assert_eq!(back, entries);
        let manifest: CheckpointManifest =
            serde_json::from_slice(&std::fs::read(stem.with_extension("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.entries[0].offset, 0);
        assert_eq!(manifest.entries[1].offset, manifest.entries[0].bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tensor");
        write_tensor(&p, &Tensor::vector(&[1.0, 2.0])).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_tensor_names_path() {
        let err = read_tensor(Path::new("/nonexistent/x.tensor")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.tensor"));
    }
}
