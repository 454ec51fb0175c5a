//! The FBAG v1 feature-bag container.
//!
//! Little-endian layout:
//!
//! | field        | size          |
//! |--------------|---------------|
//! | magic `FBAG` | 4             |
//! | version = 1  | u32           |
//! | id_len       | u32           |
//! | slide_id     | id_len bytes  |
//! | N            | u32           |
//! | D            | u32           |
//! | patch_size   | u32           |
//! | coords       | N × (i32, i32)|
//! | features     | N × D × f32   |
//!
//! The file length must equal the header-implied length exactly.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tiler::PatchCoord;

pub const FBAG_MAGIC: [u8; 4] = *b"FBAG";
pub const FBAG_VERSION: u32 = 1;

/// One slide's patch features; the unit a MIL model classifies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    pub patch_size: u32,
    pub coords: Vec<PatchCoord>,
    /// N×D, one row per patch.
    pub features: Array2<f64>,
}

impl FeatureBag {
    pub fn new(
        slide_id: impl Into<String>,
        patch_size: u32,
        coords: Vec<PatchCoord>,
        features: Array2<f64>,
    ) -> Result<Self> {
        let bag = FeatureBag { slide_id: slide_id.into(), patch_size, coords, features };
        bag.validate()?;
        Ok(bag)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.features.dim();
        if n == 0 || d == 0 {
            return Err(Error::EmptyBag { n: n as u32, d: d as u32 });
        }
        if self.coords.len() != n {
            return Err(Error::Shape(format!("{} coords for {n} feature rows", self.coords.len())));
        }
        if let Some(((i, j), v)) = self.features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bag {:?} feature [{i}, {j}] = {v}", self.slide_id)));
        }
        Ok(())
    }
}

pub fn encoded_len(id_len: usize, n: usize, d: usize) -> u64 {
    24 + id_len as u64 + 8 * n as u64 + 4 * n as u64 * d as u64
}

pub fn encode_bag(bag: &FeatureBag) -> Result<Vec<u8>> {
    bag.validate()?;
    let id = bag.slide_id.as_bytes();
    let (n, d) = bag.features.dim();
    let mut buf = Vec::with_capacity(encoded_len(id.len(), n, d) as usize);
    buf.extend_from_slice(&FBAG_MAGIC);
    buf.extend_from_slice(&FBAG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&bag.patch_size.to_le_bytes());
    for c in &bag.coords {
        let x = i32::try_from(c.x).map_err(|_| Error::invalid(format!("coordinate {} exceeds i32", c.x)))?;
        let y = i32::try_from(c.y).map_err(|_| Error::invalid(format!("coordinate {} exceeds i32", c.y)))?;
        buf.extend_from_slice(&x.to_le_bytes());
        buf.extend_from_slice(&y.to_le_bytes());
    }
    for v in bag.features.iter() {
        let f = *v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("feature {v} overflows f32")));
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_bag(buf: &[u8]) -> Result<FeatureBag> {
    let actual = buf.len() as u64;
    let short = |expected: u64| Error::LengthMismatch { expected, actual };
    let mut r = Reader { buf, pos: 0 };

    let magic = r.take(4).ok_or_else(|| Error::BadMagic { expected: FBAG_MAGIC, found: buf.to_vec() })?;
    if magic != FBAG_MAGIC {
        return Err(Error::BadMagic { expected: FBAG_MAGIC, found: magic.to_vec() });
    }
    let version = r.u32().ok_or_else(|| short(8))?;
    if version != FBAG_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let id_len = r.u32().ok_or_else(|| short(12))? as usize;
    let id = r.take(id_len).ok_or_else(|| short(24 + id_len as u64))?;
    let slide_id =
        std::str::from_utf8(id).map_err(|e| Error::invalid(format!("slide_id is not UTF-8: {e}")))?.to_string();
    let header_end = 24 + id_len as u64;
    let n = r.u32().ok_or_else(|| short(header_end))?;
    let d = r.u32().ok_or_else(|| short(header_end))?;
    let patch_size = r.u32().ok_or_else(|| short(header_end))?;
    if n == 0 || d == 0 {
        return Err(Error::EmptyBag { n, d });
    }
    let expected = encoded_len(id_len, n as usize, d as usize);
    if expected != actual {
        return Err(short(expected));
    }

    let mut coords = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let b = r.take(8).expect("length checked");
        let x = i32::from_le_bytes(b[0..4].try_into().unwrap());
        let y = i32::from_le_bytes(b[4..8].try_into().unwrap());
        if x < 0 || y < 0 {
            return Err(Error::invalid(format!("negative patch coordinate ({x}, {y})")));
        }
        coords.push(PatchCoord::new(x as u32, y as u32, patch_size));
    }
    let raw = r.take(4 * n as usize * d as usize).expect("length checked");
    let values: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let features = Array2::from_shape_vec((n as usize, d as usize), values).expect("shape matches length");
    FeatureBag::new(slide_id, patch_size, coords, features)
}

pub fn write_bag(bag: &FeatureBag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: &Path) -> Result<FeatureBag> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> FeatureBag {
        FeatureBag::new("s1", 224, vec![PatchCoord::new(0, 0, 224)], array![[1.0, 2.0]]).unwrap()
    }

    #[test]
    fn tiny_bag_size_is_sum_of_fields() {
        // magic, version, id_len, "s1", N, D, patch_size, one (x, y), two f32
        let expected = 4 + 4 + 4 + 2 + 4 + 4 + 4 + 8 + 8;
        let bytes = encode_bag(&tiny()).unwrap();
        assert_eq!(bytes.len(), expected);
        assert_eq!(&bytes[..4], b"FBAG");
        assert_eq!(decode_bag(&bytes).unwrap(), tiny());
    }

    #[test]
    fn rejects_nan() {
        let mut bag = tiny();
        bag.features[[0, 1]] = f64::NAN;
        assert!(matches!(encode_bag(&bag), Err(Error::NonFinite(_))));
        assert!(FeatureBag::new("x", 1, vec![PatchCoord::new(0, 0, 1)], array![[f64::INFINITY]]).is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_bag(&tiny()).unwrap();
        bytes[..4].copy_from_slice(b"GBAF");
        assert!(matches!(decode_bag(&bytes), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_bag(b"FB"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = encode_bag(&tiny()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_bag(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn rejects_truncated_and_oversized() {
        let bag = FeatureBag::new(
            "s",
            8,
            vec![PatchCoord::new(0, 0, 8), PatchCoord::new(8, 0, 8)],
            Array2::from_elem((2, 3), 0.5),
        )
        .unwrap();
        let bytes = encode_bag(&bag).unwrap();
        // 20 feature bytes where 24 are needed
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(decode_bag(cut), Err(Error::LengthMismatch { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_bag(&longer), Err(Error::LengthMismatch { .. })));
        assert!(matches!(decode_bag(&bytes[..10]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn rejects_empty_bag() {
        let mut bytes = encode_bag(&tiny()).unwrap();
        // N lives right after the 2-byte id
        bytes[14..18].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_bag(&bytes), Err(Error::EmptyBag { n: 0, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.fbag");
        write_bag(&tiny(), &path).unwrap();
        assert_eq!(read_bag(&path).unwrap(), tiny());
        assert!(read_bag(&dir.path().join("missing.fbag")).unwrap_err().is_io());
    }
}
