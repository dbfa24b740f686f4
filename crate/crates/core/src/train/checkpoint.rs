//! `RTDA` checkpoint files: named f32 tensors behind a small header, closed
//! by a byte-sum checksum of the tensor payloads.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RTDA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Invalid("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        let mut checksum = 0u64;
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Invalid(format!("rank too high: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("extent too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                let b = v.to_le_bytes();
                checksum = b.iter().fold(checksum, |acc, &x| acc.wrapping_add(x as u64));
                out.extend_from_slice(&b);
            }
        }
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Invalid(format!("unsupported checkpoint version {version}")));
        }
        let iteration = r.u64("iteration")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        let mut checksum = 0u64;
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Invalid("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4, &format!("payload of '{name}'"))?;
            checksum = payload.iter().fold(checksum, |acc, &x| acc.wrapping_add(x as u64));
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let stored = r.u64("checksum")?;
        if stored != checksum {
            return Err(Error::Checksum {
                stored,
                computed: checksum,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { iteration, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Packs a u64 exactly into four f32 values of 16 bits each, low first.
pub fn encode_u64(v: u64) -> Tensor<f32> {
    let parts = (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect();
    Tensor::new([4], parts).expect("four parts")
}

pub fn decode_u64(t: &Tensor<f32>) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::shape("decode_u64", format!("expected [4], got {:?}", t.shape())));
    }
    let mut v = 0u64;
    for (i, &p) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&p) || p.fract() != 0.0 {
            return Err(Error::Invalid(format!("corrupt integer chunk {p}")));
        }
        v |= (p as u64) << (16 * i);
    }
    Ok(v)
}

/// Stores text as one f32 per byte.
pub fn encode_text(s: &str) -> Tensor<f32> {
    let bytes: Vec<f32> = s.bytes().map(f32::from).collect();
    Tensor::new([bytes.len()], bytes).expect("rank-1")
}

pub fn decode_text(t: &Tensor<f32>) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|&b| {
            if (0.0..256.0).contains(&b) && b.fract() == 0.0 {
                Ok(b as u8)
            } else {
                Err(Error::Invalid(format!("corrupt text byte {b}")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Invalid("stored text is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            iteration: 17,
            tensors: vec![
                ("a.weight".into(), Tensor::new([2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, -0.0]).unwrap()),
                ("b".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn layout_and_checksum() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"RTDA");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 17);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(b[20..22].try_into().unwrap()), 8);
        assert_eq!(&b[22..30], b"a.weight");
        assert_eq!(b[30], 2);
        let expected: u64 = [1.0f32, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, -0.0, 7.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .map(u64::from)
            .sum();
        assert_eq!(u64::from_le_bytes(b[b.len() - 8..].try_into().unwrap()), expected);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let b = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), b);
    }

    #[test]
    fn corruption_is_detected() {
        let b = sample().to_bytes().unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = b.clone();
        bad[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 3]), Err(Error::Truncated(_))));
    }

    #[test]
    fn integer_and_text_packing() {
        for v in [0, 1, 65_535, 65_536, u64::MAX, 0x1234_5678_9abc_def0] {
            assert_eq!(decode_u64(&encode_u64(v)).unwrap(), v);
        }
        let s = "lr_seg = 0.02\ndisc = FCD-Light&Thin\n";
        assert_eq!(decode_text(&encode_text(s)).unwrap(), s);
    }
}
