//! Binary checkpoint formats.
//!
//! A matrix block is the 8-byte magic `HEATEMB1`, little-endian `u32` rows and
//! `u32` dim, then `rows * dim` little-endian binary32 values in row-major
//! order. A single-matrix checkpoint file is exactly one block.
//!
//! A model checkpoint is the user block, then the item block, then an
//! optional aggregator section: the tag `AGGW`, a little-endian `u32` K, and
//! `K * K` binary32 values.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::aggregator::AggregatorWeights;
use crate::embedding::EmbeddingMatrix;
use crate::trainer::Model;
use crate::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"HEATEMB1";
pub const AGGREGATOR_TAG: &[u8; 4] = b"AGGW";

pub fn write_matrix<W: Write>(w: &mut W, m: &EmbeddingMatrix) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::invalid("too many rows for u32"))?;
    let dim = u32::try_from(m.dim()).map_err(|_| Error::invalid("dim too large for u32"))?;
    if !m.is_finite() {
        return Err(Error::invalid("refusing to checkpoint non-finite values"));
    }
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    write_values(w, m.as_slice())
}

fn write_values<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Maps an early EOF to a corrupt-checkpoint error.
fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::corrupt(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_values<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or_corrupt(r, &mut bytes, "matrix body")?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::corrupt("non-finite value in matrix body"));
    }
    Ok(values)
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<EmbeddingMatrix> {
    let mut magic = [0u8; 8];
    read_exact_or_corrupt(r, &mut magic, "magic")?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::corrupt("bad magic bytes"));
    }
    read_matrix_body(r)
}

fn read_matrix_body<R: Read>(r: &mut R) -> Result<EmbeddingMatrix> {
    let rows = read_u32(r, "header")? as usize;
    let dim = read_u32(r, "header")? as usize;
    if rows == 0 || dim == 0 {
        return Err(Error::corrupt(format!("degenerate shape {rows}x{dim}")));
    }
    let count = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::corrupt("shape overflows"))?;
    let values = read_values(r, count)?;
    EmbeddingMatrix::from_vec(rows, dim, values).map_err(|e| Error::corrupt(e.to_string()))
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::corrupt("trailing bytes after last section")),
    }
}

pub fn save_checkpoint(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let m = read_matrix(&mut r)?;
    expect_eof(&mut r)?;
    Ok(m)
}

pub fn write_model<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    write_matrix(w, &model.users)?;
    write_matrix(w, &model.items)?;
    if let Some(agg) = &model.aggregator {
        let m = agg.matrix();
        if !m.is_finite() {
            return Err(Error::invalid("refusing to checkpoint non-finite values"));
        }
        w.write_all(AGGREGATOR_TAG)?;
        w.write_all(&(m.dim() as u32).to_le_bytes())?;
        write_values(w, m.as_slice())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    let users = read_matrix(r)?;
    let items = read_matrix(r)?;
    if users.dim() != items.dim() {
        return Err(Error::corrupt(format!(
            "user dim {} != item dim {}",
            users.dim(),
            items.dim()
        )));
    }
    let mut tag = [0u8; 4];
    let aggregator = match r.read(&mut tag[..1])? {
        0 => None,
        _ => {
            read_exact_or_corrupt(r, &mut tag[1..], "section tag")?;
            if &tag != AGGREGATOR_TAG {
                return Err(Error::corrupt("unknown section tag"));
            }
            let k = read_u32(r, "aggregator header")? as usize;
            if k != users.dim() {
                return Err(Error::corrupt(format!(
                    "aggregator is {k}x{k} but embeddings have dim {}",
                    users.dim()
                )));
            }
            let values = read_values(r, k * k)?;
            let m = EmbeddingMatrix::from_vec(k, k, values)?;
            expect_eof(r)?;
            Some(AggregatorWeights::from_matrix(m)?)
        }
    };
    Ok(Model {
        users,
        items,
        aggregator,
    })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample() -> EmbeddingMatrix {
        EmbeddingMatrix::from_vec(
            3,
            4,
            vec![0.0, 1.0, -1.0, 0.5, -0.25, 3.5e-8, 1e30, -0.0, 7.0, 2.0, -9.5, 0.125],
        )
        .unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = sample();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bits = |m: &EmbeddingMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
        assert_eq!((back.rows(), back.dim()), (3, 4));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 + 8 + 48);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &EmbeddingMatrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(&buf[..8], b"HEATEMB1");
        assert_eq!(&buf[8..16], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[16..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn wrong_magic_is_corrupt() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &sample()).unwrap();
        buf[0] = b'X';
        let err = read_matrix(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");
    }

    #[test]
    fn short_body_is_corrupt() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MATRIX_MAGIC);
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let err = read_matrix(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");
    }

    #[test]
    fn trailing_bytes_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut buf = Vec::new();
        write_matrix(&mut buf, &sample()).unwrap();
        buf.push(0);
        std::fs::write(&path, &buf).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::CorruptCheckpoint(_)
        ));
    }

    #[test]
    fn nan_body_is_corrupt() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &sample()).unwrap();
        buf[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_matrix(&mut buf.as_slice()).unwrap_err(),
            Error::CorruptCheckpoint(_)
        ));
    }

    #[test]
    fn model_round_trip_with_and_without_aggregator() {
        let users = sample();
        let items = EmbeddingMatrix::from_vec(2, 4, vec![1.0; 8]).unwrap();
        let agg = AggregatorWeights::from_matrix(
            EmbeddingMatrix::from_vec(4, 4, (0..16).map(|v| v as f32).collect()).unwrap(),
        )
        .unwrap();
        for aggregator in [None, Some(agg)] {
            let model = Model {
                users: users.clone(),
                items: items.clone(),
                aggregator,
            };
            let mut buf = Vec::new();
            write_model(&mut buf, &model).unwrap();
            assert_eq!(read_model(&mut buf.as_slice()).unwrap(), model);
        }
    }

    #[test]
    fn model_with_bad_section_tag_is_corrupt() {
        let model = Model {
            users: sample(),
            items: sample(),
            aggregator: None,
        };
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        buf.extend_from_slice(b"NOPE");
        assert!(matches!(
            read_model(&mut buf.as_slice()).unwrap_err(),
            Error::CorruptCheckpoint(_)
        ));
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_finite_matrices(
            (rows, dim, values) in (1usize..8, 1usize..8).prop_flat_map(|(r, d)| {
                (Just(r), Just(d), proptest::collection::vec(
                    any::<f32>().prop_filter("finite", |v| v.is_finite()), r * d))
            })
        ) {
            let m = EmbeddingMatrix::from_vec(rows, dim, values).unwrap();
            let mut buf = Vec::new();
            write_matrix(&mut buf, &m).unwrap();
            let back = read_matrix(&mut buf.as_slice()).unwrap();
            let bits = |m: &EmbeddingMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&m), bits(&back));
        }
    }
}
