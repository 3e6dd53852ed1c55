//! Purpose-built little-endian tensor containers.
//!
//! `.vts` volume series: magic `VTS1` | u32 T | u32 X | u32 Y | u32 Z |
//! f32 tr_seconds | payload of `T*X*Y*Z` little-endian f32 in `[t][x][y][z]`
//! row-major order.
//!
//! `.lts` latent sequence: magic `LTS1` | u32 T | u32 D | payload of `T*D`
//! little-endian f32, row-major.
//!
//! `.vta` atlas: magic `VTA1` | u32 X | u32 Y | u32 Z | payload of `X*Y*Z`
//! little-endian u32 region labels, row-major.
//!
//! The subject id is not stored in the container; it is taken from the file
//! stem on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

use super::types::{LatentSequence, VolumeSeries};

const VTS_MAGIC: &[u8; 4] = b"VTS1";
const LTS_MAGIC: &[u8; 4] = b"LTS1";
const ATLAS_MAGIC: &[u8; 4] = b"VTA1";

fn subject_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn read_magic(r: &mut impl Read, path: &Path, expected: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "header truncated: field `magic`"))?;
    if &magic != expected {
        return Err(Error::format(
            path,
            format!(
                "field `magic`: expected {:?}, got {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    Ok(())
}

fn read_u32_field(r: &mut impl Read, path: &Path, field: &str) -> Result<u32> {
    r.read_u32::<LE>()
        .map_err(|_| Error::format(path, format!("header truncated: field `{field}`")))
}

/// Reads the remaining payload as little-endian f32, checking the byte count
/// is exactly `expected_values * 4`.
fn read_f32_payload(r: &mut impl Read, path: &Path, expected_values: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let expected_bytes = expected_values * 4;
    if bytes.len() != expected_bytes {
        return Err(Error::Data(format!(
            "{}: payload truncated or oversized: expected {expected_bytes} bytes, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = vec![0f32; expected_values];
    let mut cursor = &bytes[..];
    cursor
        .read_f32_into::<LE>(&mut values)
        .map_err(|e| Error::io(path, e))?;
    Ok(values)
}

/// Loads a `.vts` volume series. The subject id is the file stem.
pub fn load_volume_series(path: impl AsRef<Path>) -> Result<VolumeSeries> {
    let path = path.as_ref();
    let mut r = open_reader(path)?;
    read_magic(&mut r, path, VTS_MAGIC)?;
    let t = read_u32_field(&mut r, path, "T")? as usize;
    let x = read_u32_field(&mut r, path, "X")? as usize;
    let y = read_u32_field(&mut r, path, "Y")? as usize;
    let z = read_u32_field(&mut r, path, "Z")? as usize;
    let tr = r
        .read_f32::<LE>()
        .map_err(|_| Error::format(path, "header truncated: field `tr_seconds`"))?;
    if t == 0 {
        return Err(Error::format(path, "field `T`: must be >= 1"));
    }
    if x != y || y != z {
        return Err(Error::Dimension(format!(
            "{}: volume must be cubic, got [{x}, {y}, {z}]",
            path.display()
        )));
    }
    if x < 8 || !x.is_power_of_two() {
        return Err(Error::Dimension(format!(
            "{}: volume side must be a power of two >= 8, got {x}",
            path.display()
        )));
    }
    let values = read_f32_payload(&mut r, path, t * x * y * z)?;
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite payload value at flat index {bad}",
            path.display()
        )));
    }
    let data = Array4::from_shape_vec((t, x, y, z), values)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    VolumeSeries::new(subject_id_from_path(path), tr, data)
}

/// Writes a `.vts` volume series; bit-exact round-trip with
/// [`load_volume_series`].
pub fn save_volume_series(series: &VolumeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(VTS_MAGIC).map_err(io)?;
    let (t, x, y, z) = series.data().dim();
    for dim in [t, x, y, z] {
        w.write_u32::<LE>(dim as u32).map_err(io)?;
    }
    w.write_f32::<LE>(series.tr_seconds()).map_err(io)?;
    for &v in series.data().iter() {
        w.write_f32::<LE>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads a `.lts` latent sequence. The subject id is the file stem.
pub fn load_latent_sequence(path: impl AsRef<Path>) -> Result<LatentSequence> {
    let path = path.as_ref();
    let mut r = open_reader(path)?;
    read_magic(&mut r, path, LTS_MAGIC)?;
    let t = read_u32_field(&mut r, path, "T")? as usize;
    let d = read_u32_field(&mut r, path, "D")? as usize;
    if t == 0 || d == 0 {
        return Err(Error::format(path, "fields `T`, `D`: must be >= 1"));
    }
    let values = read_f32_payload(&mut r, path, t * d)?;
    let vectors =
        Array2::from_shape_vec((t, d), values).map_err(|e| Error::Dimension(e.to_string()))?;
    LatentSequence::new(subject_id_from_path(path), vectors)
}

pub fn save_latent_sequence(seq: &LatentSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(LTS_MAGIC).map_err(io)?;
    w.write_u32::<LE>(seq.len_t() as u32).map_err(io)?;
    w.write_u32::<LE>(seq.dim() as u32).map_err(io)?;
    for &v in seq.vectors.iter() {
        w.write_f32::<LE>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads a `.vta` atlas label volume (u32 payload, 0 = background).
pub fn load_atlas_labels(path: impl AsRef<Path>) -> Result<Array3<u32>> {
    let path = path.as_ref();
    let mut r = open_reader(path)?;
    read_magic(&mut r, path, ATLAS_MAGIC)?;
    let x = read_u32_field(&mut r, path, "X")? as usize;
    let y = read_u32_field(&mut r, path, "Y")? as usize;
    let z = read_u32_field(&mut r, path, "Z")? as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let expected = x * y * z * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: payload truncated or oversized: expected {expected} bytes, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = vec![0u32; x * y * z];
    let mut cursor = &bytes[..];
    cursor
        .read_u32_into::<LE>(&mut values)
        .map_err(|e| Error::io(path, e))?;
    Array3::from_shape_vec((x, y, z), values).map_err(|e| Error::Dimension(e.to_string()))
}

pub fn save_atlas_labels(labels: &Array3<u32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(ATLAS_MAGIC).map_err(io)?;
    let (x, y, z) = labels.dim();
    for dim in [x, y, z] {
        w.write_u32::<LE>(dim as u32).map_err(io)?;
    }
    for &v in labels.iter() {
        w.write_u32::<LE>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn random_series(seed: u64, t: usize, s: usize) -> VolumeSeries {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_fn((t, s, s, s), |_| rng.gen_range(-2.0f32..2.0));
        VolumeSeries::new(format!("subj{seed}"), 2.0, data).unwrap()
    }

    #[test]
    fn header_shape_echo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s7.vts");
        let series = random_series(7, 4, 16);
        save_volume_series(&series, &path).unwrap();
        let loaded = load_volume_series(&path).unwrap();
        assert_eq!(loaded.data().dim(), (4, 16, 16, 16));
        assert_eq!(loaded.subject_id(), "s7");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.vts");
        let series = random_series(3, 2, 8);
        save_volume_series(&series, &path).unwrap();
        let loaded = load_volume_series(&path).unwrap();
        assert_eq!(loaded.tr_seconds().to_bits(), series.tr_seconds().to_bits());
        for (a, b) in loaded.data().iter().zip(series.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_series_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.vts");
        let series =
            VolumeSeries::new("z", 1.0, Array4::<f32>::zeros((1, 8, 8, 8))).unwrap();
        save_volume_series(&series, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        // 24-byte header plus 8^3 * 4 payload bytes.
        assert_eq!(len, 24 + 2048);
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vts");
        let series = random_series(11, 2, 8);
        save_volume_series(&series, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let expected_payload = 2 * 8 * 8 * 8 * 4;
        let cut = 24 + expected_payload / 2;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_volume_series(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("expected {expected_payload} bytes")), "{msg}");
        assert!(msg.contains(&format!("found {} bytes", expected_payload / 2)), "{msg}");
    }

    #[test]
    fn bad_magic_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vts");
        std::fs::write(&path, b"XXXX\x00\x00\x00\x00").unwrap();
        let err = load_volume_series(&path).unwrap_err();
        assert!(err.to_string().contains("`magic`"), "{err}");
    }

    #[test]
    fn non_power_of_two_side_is_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.vts");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VTS1");
        for dim in [1u32, 12, 12, 12] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.extend(std::iter::repeat(0u8).take(12 * 12 * 12 * 4));
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_volume_series(&path),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn nan_payload_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.vts");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VTS1");
        for dim in [1u32, 8, 8, 8] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        for i in 0..512 {
            let v = if i == 100 { f32::NAN } else { 0.0f32 };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume_series(&path), Err(Error::Data(_))));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let series = random_series(1, 1, 8);
        let err = save_volume_series(&series, "/nonexistent-dir/x.vts").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn latent_sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l1.lts");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let vectors = Array2::from_shape_fn((6, 9), |_| rng.gen_range(-1.0f32..1.0));
        let seq = LatentSequence::new("l1", vectors).unwrap();
        save_latent_sequence(&seq, &path).unwrap();
        let loaded = load_latent_sequence(&path).unwrap();
        assert_eq!(loaded.subject_id, "l1");
        assert_eq!(loaded.vectors, seq.vectors);
    }

    #[test]
    fn atlas_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vta");
        let labels = Array3::from_shape_fn((8, 8, 8), |(x, y, z)| ((x + y + z) % 3) as u32);
        save_atlas_labels(&labels, &path).unwrap();
        assert_eq!(load_atlas_labels(&path).unwrap(), labels);
    }
}
