//! Binary formats: single workspaces (`WSPC`) and trajectory datasets
//! (`WSDS`, a counted sequence of workspace records).
//!
//! Workspace layout, all integers little-endian:
//!
//! ```text
//! magic b"WSPC" | version u16 | var_count u32
//! per variable (name-sorted):
//!     name_len u16 | name bytes | T u32 | B u32 | rank u8
//!     extents u32 x rank | payload f32, [T, B, extents...] row-major
//! trailer: CRC32 u32 over every payload byte, in variable order
//! ```
//!
//! Round-trips are bit-exact; serialization requires gap-free variables.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::workspace::{VarStore, Workspace};

pub const WORKSPACE_MAGIC: [u8; 4] = *b"WSPC";
pub const DATASET_MAGIC: [u8; 4] = *b"WSDS";
pub const FORMAT_VERSION: u16 = 1;

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::TruncatedPayload
    } else {
        Error::Io(e)
    }
}

fn read_array<const N: usize
>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(read_array(r)?))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    Ok(read_array::<1>(r)?[0])
}

/// Reads exactly `len` bytes, growing the buffer chunk by chunk so a corrupt
/// length field cannot trigger a huge upfront allocation.
fn read_bytes(r: &mut impl Read, len: u64) -> Result<Vec<u8>> {
    const CHUNK: u64 = 1 << 20;
    let mut out = Vec::new();
    let mut remaining = len;
    while remaining > 0 {
        let step = remaining.min(CHUNK) as usize;
        let start = out.len();
        out.resize(start + step, 0);
        r.read_exact(&mut out[start..]).map_err(truncated)?;
        remaining -= step as u64;
    }
    Ok(out)
}

/// Serializes a workspace. Every variable must be gap-free.
pub fn write_workspace<W: Write>(ws: &Workspace, mut w: W) -> Result<()> {
    let mut var_count = 0u32;
    for (name, series) in ws.variables() {
        if let Some(t) = series.first_gap() {
            return Err(Error::TimeGap {
                name: name.to_string(),
                t,
            });
        }
        var_count += 1;
    }

    w.write_all(&WORKSPACE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&var_count.to_le_bytes())?;

    let batch = ws.batch_size().unwrap_or(0) as u32;
    let mut crc = crc32fast::Hasher::new();
    for (name, series) in ws.variables() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(series.time_extent() as u32).to_le_bytes())?;
        w.write_all(&batch.to_le_bytes())?;
        let item_shape = series.item_shape();
        w.write_all(&[item_shape.len() as u8])?;
        for &extent in item_shape {
            w.write_all(&(extent as u32).to_le_bytes())?;
        }
        for t in 0..series.time_extent() {
            let tensor = ws.get(name, t)?;
            let mut bytes = Vec::with_capacity(tensor.numel() * 4);
            for &v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            crc.update(&bytes);
            w.write_all(&bytes)?;
        }
    }
    w.write_all(&crc.finalize().to_le_bytes())?;
    Ok(())
}

/// Deserializes a workspace written by [`write_workspace`].
pub fn read_workspace<R: Read>(mut r: R) -> Result<Workspace> {
    let magic = read_array::<4>(&mut r)?;
    if magic != WORKSPACE_MAGIC {
        return Err(Error::BadMagic { got: magic });
    }
    read_workspace_body(&mut r)
}

/// Reads everything after the magic: shared by the workspace and dataset
/// readers.
fn read_workspace_body<R: Read>(r: &mut R) -> Result<Workspace> {
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { got: version });
    }
    let var_count = read_u32(r)?;
    let mut ws = Workspace::new();
    let mut crc = crc32fast::Hasher::new();
    let mut batch: Option<u32> = None;
    for _ in 0..var_count {
        let name_len = read_u16(r)? as u64;
        let name_bytes = read_bytes(r, name_len)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("variable name is not valid UTF-8".into()))?;
        let steps = read_u32(r)?;
        let b = read_u32(r)?;
        match batch {
            None => batch = Some(b),
            Some(expected) if expected != b => {
                return Err(Error::Format(format!(
                    "variable '{name}' batch size {b} differs from {expected}"
                )));
            }
            _ => {}
        }
        let rank = read_u8(r)? as usize;
        let mut item_shape = Vec::with_capacity(rank);
        let mut item_elems: u64 = 1;
        for _ in 0..rank {
            let extent = read_u32(r)? as u64;
            item_elems = item_elems
                .checked_mul(extent)
                .ok_or_else(|| Error::Format(format!("variable '{name}' shape overflows")))?;
            item_shape.push(extent as usize);
        }
        let slice_elems = item_elems
            .checked_mul(b as u64)
            .ok_or_else(|| Error::Format(format!("variable '{name}' shape overflows")))?;
        for t in 0..steps {
            let bytes = read_bytes(r, slice_elems * 4)?;
            crc.update(&bytes);
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let mut shape = Vec::with_capacity(rank + 1);
            shape.push(b as usize);
            shape.extend_from_slice(&item_shape);
            ws.set(&name, t as usize, Tensor::from_vec(shape, data))?;
        }
        if steps == 0 {
            // A zero-extent variable still needs its shape registered.
            ws.register_empty(&name, b as usize, &item_shape)?;
        }
    }
    let stored_crc = read_u32(r)?;
    if stored_crc != crc.finalize() {
        return Err(Error::ChecksumMismatch);
    }
    Ok(ws)
}

impl Workspace {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        write_workspace(self, &mut writer)?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Workspace> {
        let file = File::open(path)?;
        read_workspace(BufReader::new(file))
    }
}

/// An on-disk collection of workspaces, e.g. recorded trajectories for
/// behavioral cloning.
#[derive(Default)]
pub struct TrajectoryDataset {
    workspaces: Vec<Workspace>,
}

impl TrajectoryDataset {
    pub fn new() -> TrajectoryDataset {
        TrajectoryDataset::default()
    }

    pub fn from_workspaces(workspaces: Vec<Workspace>) -> TrajectoryDataset {
        TrajectoryDataset { workspaces }
    }

    pub fn push(&mut self, ws: Workspace) {
        self.workspaces.push(ws);
    }

    pub fn len(&self) -> usize {
        self.workspaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workspaces.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Workspace> {
        self.workspaces.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Workspace> {
        self.workspaces.iter()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.workspaces.len() as u32).to_le_bytes())?;
        for ws in &self.workspaces {
            write_workspace(ws, &mut w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<TrajectoryDataset> {
        let magic = read_array::<4>(&mut r)?;
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic { got: magic });
        }
        let version = read_u16(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { got: version });
        }
        let count = read_u32(&mut r)?;
        let mut workspaces = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let magic = read_array::<4>(&mut r)?;
            if magic != WORKSPACE_MAGIC {
                return Err(Error::BadMagic { got: magic });
            }
            workspaces.push(read_workspace_body(&mut r)?);
        }
        Ok(TrajectoryDataset { workspaces })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        self.write_to(&mut writer)?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
        let file = File::open(path)?;
        TrajectoryDataset::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_workspace(rng: &mut StdRng) -> Workspace {
        let mut ws = Workspace::new();
        let batch = rng.gen_range(1..=8);
        let n_vars = rng.gen_range(1..=5);
        for v in 0..n_vars {
            let steps = rng.gen_range(1..=16);
            let rank = rng.gen_range(0..=2);
            let item_shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
            let item: usize = item_shape.iter().product();
            let name = match v % 3 {
                0 => format!("env/var_{v}"),
                1 => format!("agent/deep/nest_{v}"),
                _ => format!("plain_{v}"),
            };
            for t in 0..steps {
                let data: Vec<f32> = (0..batch * item).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let mut shape = vec![batch];
                shape.extend_from_slice(&item_shape);
                ws.set(&name, t, Tensor::from_vec(shape, data)).unwrap();
            }
        }
        ws
    }

    fn workspaces_bit_equal(a: &Workspace, b: &Workspace) -> bool {
        let names_a = a.variable_names();
        if names_a != b.variable_names() || a.batch_size() != b.batch_size() {
            return false;
        }
        names_a.iter().all(|name| {
            let fa = a.full(name).unwrap();
            let fb = b.full(name).unwrap();
            fa.shape() == fb.shape()
                && fa
                    .data()
                    .iter()
                    .zip(fb.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..25 {
            let ws = random_workspace(&mut rng);
            let mut buf = Vec::new();
            write_workspace(&ws, &mut buf).unwrap();
            let back = read_workspace(buf.as_slice()).unwrap();
            assert!(workspaces_bit_equal(&ws, &back));
        }
    }

    #[test]
    fn empty_workspace_round_trips() {
        let ws = Workspace::new();
        let mut buf = Vec::new();
        write_workspace(&ws, &mut buf).unwrap();
        let back = read_workspace(buf.as_slice()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn gap_refuses_to_serialize() {
        let mut ws = Workspace::new();
        ws.set("x", 0, Tensor::from_vec(vec![1], vec![1.0])).unwrap();
        ws.set("x", 2, Tensor::from_vec(vec![1], vec![1.0])).unwrap();
        let mut buf = Vec::new();
        assert!(matches!(
            write_workspace(&ws, &mut buf),
            Err(Error::TimeGap { t: 1, .. })
        ));
    }

    #[test]
    fn corrupt_magic_and_version_are_distinct_errors() {
        let mut rng = StdRng::seed_from_u64(8);
        let ws = random_workspace(&mut rng);
        let mut buf = Vec::new();
        write_workspace(&ws, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(
            read_workspace(bad_magic.as_slice()),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = buf.clone();
        bad_version[4] = 7;
        assert!(matches!(
            read_workspace(bad_version.as_slice()),
            Err(Error::UnsupportedVersion { got: 7 })
        ));
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let mut rng = StdRng::seed_from_u64(9);
        let ws = random_workspace(&mut rng);
        let mut buf = Vec::new();
        write_workspace(&ws, &mut buf).unwrap();

        let truncated = &buf[..buf.len() - 5];
        assert!(matches!(
            read_workspace(truncated),
            Err(Error::TruncatedPayload)
        ));

        // Flip one payload byte: the checksum must catch it.
        let mut corrupted = buf.clone();
        let idx = buf.len() - 8;
        corrupted[idx] ^= 0x01;
        assert!(matches!(
            read_workspace(corrupted.as_slice()),
            Err(Error::ChecksumMismatch)
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let mut rng = StdRng::seed_from_u64(10);
        let mut ds = TrajectoryDataset::new();
        for _ in 0..4 {
            ds.push(random_workspace(&mut rng));
        }
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = TrajectoryDataset::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in ds.iter().zip(back.iter()) {
            assert!(workspaces_bit_equal(a, b));
        }
    }

    #[test]
    fn dataset_rejects_workspace_magic() {
        let ws = Workspace::new();
        let mut buf = Vec::new();
        write_workspace(&ws, &mut buf).unwrap();
        assert!(matches!(
            TrajectoryDataset::read_from(buf.as_slice()),
            Err(Error::BadMagic { .. })
        ));
    }
}
