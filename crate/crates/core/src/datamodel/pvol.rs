//! PVOL raster files.
//!
//! Layout (little-endian, 32-byte header):
//!
//! | offset | size | field                                          |
//! |--------|------|------------------------------------------------|
//! | 0      | 4    | magic `"PVOL"`                                 |
//! | 4      | 2    | version, u16 = 1                               |
//! | 6      | 1    | dtype, u8: 0 = f32 real, 1 = u8 label, 2 = f64 |
//! | 7      | 1    | rank, u8 (2 or 3)                              |
//! | 8      | 12   | 3 x u32 extents, unused trailing = 1           |
//! | 20     | 12   | 3 x f32 spacing                                |
//! | 32     | ..   | row-major payload                              |
//!
//! dtype 2 is only used for checkpoint tensors, which need exact `f64` values.

use std::fs;
use std::path::Path;

use super::{Dims, LabelMap, Spacing, Volume};
use crate::error::{Error, Result};

pub const PVOL_HEADER_LEN: usize = 32;
const MAGIC: &[u8; 4] = b"PVOL";
const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;
const DTYPE_F64: u8 = 2;

/// A decoded PVOL file.
#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    Real(Volume),
    Label(LabelMap),
}

fn header(dtype: u8, dims: Dims, spacing: Spacing) -> Vec<u8> {
    let mut out = Vec::with_capacity(PVOL_HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(dims.rank() as u8);
    for e in dims.header_triple() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    debug_assert_eq!(out.len(), PVOL_HEADER_LEN);
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let v = Volume::new(v.dims(), v.spacing(), v.data().to_vec())?;
    let mut bytes = header(DTYPE_F32, v.dims(), v.spacing());
    bytes.reserve(v.data().len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write(path.as_ref(), &bytes)
}

pub fn save_label_map(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = header(DTYPE_U8, l.dims(), l.spacing());
    bytes.extend_from_slice(l.data());
    write(path.as_ref(), &bytes)
}

/// Writes an `f64` matrix (rows x cols) with dtype 2.
pub fn save_tensor(rows: usize, cols: usize, data: &[f64], path: impl AsRef<Path>) -> Result<()> {
    if rows * cols != data.len() {
        return Err(Error::Validation(format!(
            "tensor {rows}x{cols} does not match {} values",
            data.len()
        )));
    }
    let dims = Dims::new2(rows.max(1), cols.max(1))?;
    let mut bytes = header(DTYPE_F64, dims, super::UNIT_SPACING);
    bytes.reserve(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write(path.as_ref(), &bytes)
}

struct Header {
    dtype: u8,
    dims: Dims,
    spacing: Spacing,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < PVOL_HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {PVOL_HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected PVOL".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = bytes[6];
    if dtype > DTYPE_F64 {
        return Err(Error::Format(format!("unknown dtype code {dtype}")));
    }
    let rank = bytes[7] as usize;
    if !(2..=3).contains(&rank) {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut ext = [0usize; 3];
    let mut spacing = [0f32; 3];
    for i in 0..3 {
        let o = 8 + 4 * i;
        ext[i] = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let o = 20 + 4 * i;
        spacing[i] = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    }
    if ext[rank..].iter().any(|&e| e != 1) {
        return Err(Error::Format(format!(
            "unused trailing dims must be 1, got {ext:?} for rank {rank}"
        )));
    }
    let dims = Dims::from_slice(&ext[..rank]).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Header {
        dtype,
        dims,
        spacing,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_payload(h: &Header, payload: &[u8], elem: usize) -> Result<()> {
    let want = h.dims.len() * elem;
    if payload.len() != want {
        return Err(Error::Format(format!(
            "payload is {} bytes, dims {:?} require {want}",
            payload.len(),
            h.dims.extents()
        )));
    }
    Ok(())
}

/// Reads a volume or label map. Label maps get `num_classes = max(max value + 1, 2)`;
/// callers holding a declared class count re-validate with [`LabelMap::with_num_classes`].
pub fn load_volume(path: impl AsRef<Path>) -> Result<Raster> {
    let bytes = read(path.as_ref())?;
    let h = parse_header(&bytes)?;
    let payload = &bytes[PVOL_HEADER_LEN..];
    match h.dtype {
        DTYPE_F32 => {
            check_payload(&h, payload, 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Raster::Real(Volume::new(h.dims, h.spacing, data)?))
        }
        DTYPE_U8 => {
            check_payload(&h, payload, 1)?;
            let data = payload.to_vec();
            let m = data.iter().copied().max().unwrap_or(0) as usize + 1;
            Ok(Raster::Label(LabelMap::new(h.dims, h.spacing, data, m.max(2))?))
        }
        _ => Err(Error::Format(
            "dtype 2 holds a parameter tensor, not a volume".into(),
        )),
    }
}

/// Reads a dtype-2 tensor as `(rows, cols, data)`.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = read(path.as_ref())?;
    let h = parse_header(&bytes)?;
    if h.dtype != DTYPE_F64 || h.dims.rank() != 2 {
        return Err(Error::Format("expected a rank-2 f64 tensor".into()));
    }
    let payload = &bytes[PVOL_HEADER_LEN..];
    check_payload(&h, payload, 8)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let e = h.dims.extents();
    Ok((e[0], e[1], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::UNIT_SPACING;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.pvol");
        let v = Volume::new(Dims::new2(2, 2).unwrap(), UNIT_SPACING, vec![0., 1., 2., 3.]).unwrap();
        save_volume(&v, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), PVOL_HEADER_LEN + 4 * 4);
        assert_eq!(&bytes[..4], b"PVOL");
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 2);
        let payload: Vec<f32> = bytes[32..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(payload, vec![0., 1., 2., 3.]);
        assert_eq!(load_volume(&p).unwrap(), Raster::Real(v));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.pvol");
        let v = Volume::new(Dims::new2(2, 3).unwrap(), UNIT_SPACING, vec![0.5; 6]).unwrap();
        save_volume(&v, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.pvol");
        let v = Volume::new(Dims::new2(1, 1).unwrap(), UNIT_SPACING, vec![0.5]).unwrap();
        save_volume(&v, &p).unwrap();
        let good = fs::read(&p).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));
        let mut bad = good;
        bad[4] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_payload_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.pvol");
        let v = Volume::new(Dims::new2(1, 2).unwrap(), UNIT_SPACING, vec![0.5, 0.5]).unwrap();
        save_volume(&v, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[32..36].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn label_value_equal_to_declared_classes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pvol");
        let l = LabelMap::new(Dims::new2(1, 3).unwrap(), UNIT_SPACING, vec![0, 1, 2], 3).unwrap();
        save_label_map(&l, &p).unwrap();
        let Raster::Label(loaded) = load_volume(&p).unwrap() else {
            panic!("expected labels")
        };
        assert_eq!(loaded, l);
        assert!(matches!(loaded.with_num_classes(2), Err(Error::Validation(_))));
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pvol");
        let data = vec![1.0 / 3.0, -2.5e-300, 7.0, f64::MIN_POSITIVE, 0.1, -0.0];
        save_tensor(2, 3, &data, &p).unwrap();
        let (r, c, back) = load_tensor(&p).unwrap();
        assert_eq!((r, c), (2, 3));
        assert!(data.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(load_volume(&p).is_err());
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (
            prop::collection::vec(1usize..6, 2..=3),
            prop::array::uniform3(0.1f32..4.0),
        )
            .prop_flat_map(|(ext, spacing)| {
                let n: usize = ext.iter().product();
                prop::collection::vec(-1e6f32..1e6, n).prop_map(move |data| {
                    let dims = Dims::from_slice(&ext).unwrap();
                    let mut sp = [1.0f32; 3];
                    sp[..ext.len()].copy_from_slice(&spacing[..ext.len()]);
                    Volume::new(dims, sp, data).unwrap()
                })
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn volume_round_trip_bit_exact(v in arb_volume()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.pvol");
            save_volume(&v, &p).unwrap();
            let Raster::Real(back) = load_volume(&p).unwrap() else { panic!("dtype") };
            prop_assert_eq!(back.dims(), v.dims());
            prop_assert!(back.spacing().iter().zip(v.spacing()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
