//! `SDR1` raster files: a 24-byte little-endian header followed by a
//! row-major payload of f32 image values or u8 labels.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDR1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl RasterData {
    pub fn dtype(&self) -> u32 {
        match self {
            RasterData::F32(_) => 1,
            RasterData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RasterData::F32(v) => v.len(),
            RasterData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub data: RasterData,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: RasterData) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::shape(
                "raster",
                format!("{channels}x{height}x{width} raster with {} values", data.len()),
            ));
        }
        let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Invalid(format!("raster extent {v} too large")));
        Ok(Raster {
            channels: to_u32(channels)?,
            height: to_u32(height)?,
            width: to_u32(width)?,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.channels, self.height, self.width, self.data.dtype()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.data {
            RasterData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(format!("header has {} of {HEADER_LEN} bytes", bytes.len())));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (version, channels, height, width, dtype) = (field(0), field(1), field(2), field(3), field(4));
        if version != VERSION {
            return Err(Error::Invalid(format!("unsupported raster version {version}")));
        }
        let count = (channels as usize)
            .checked_mul(height as usize)
            .and_then(|n| n.checked_mul(width as usize))
            .ok_or_else(|| Error::Invalid("raster extents overflow".into()))?;
        let elem = match dtype {
            1 => 4,
            2 => 1,
            d => return Err(Error::UnknownDtype(d)),
        };
        let payload = &bytes[HEADER_LEN..];
        let need = count * elem;
        if payload.len() < need {
            return Err(Error::Truncated(format!("payload has {} of {need} bytes", payload.len())));
        }
        if payload.len() > need {
            return Err(Error::Invalid(format!("{} trailing bytes after payload", payload.len() - need)));
        }
        let data = if dtype == 1 {
            RasterData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            RasterData::U8(payload.to_vec())
        };
        Ok(Raster {
            channels,
            height,
            width,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let r = Raster::new(3, 64, 64, RasterData::F32(vec![0.5; 3 * 64 * 64])).unwrap();
        let b = r.to_bytes();
        assert_eq!(b.len() - HEADER_LEN, 49_152);
        assert_eq!((b.len() - HEADER_LEN) / 4, 3 * 64 * 64);
        assert_eq!(&b[..4], b"SDR1");
        let words: Vec<u32> = b[4..24].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(words, vec![1, 3, 64, 64, 1]);
        assert_eq!(&b[24..28], &0.5f32.to_le_bytes());
    }

    #[test]
    fn round_trip_preserves_bits() {
        let vals = vec![f32::MIN_POSITIVE, -0.0, 1.0, 0.1, f32::from_bits(0x7fc0_0001)];
        let r = Raster::new(1, 1, 5, RasterData::F32(vals.clone())).unwrap();
        let back = Raster::from_bytes(&r.to_bytes()).unwrap();
        let RasterData::F32(got) = back.data else { panic!() };
        assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let r = Raster::new(1, 2, 3, RasterData::U8(vec![0, 1, 2, 3, 4, 255])).unwrap();
        assert_eq!(Raster::from_bytes(&r.to_bytes()).unwrap(), r);
    }

    #[test]
    fn malformed_inputs() {
        let r = Raster::new(1, 2, 2, RasterData::U8(vec![1, 2, 3, 4])).unwrap();
        let good = r.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(Raster::from_bytes(&bad).unwrap_err().to_string(), "bad magic");

        assert!(matches!(Raster::from_bytes(&good[..good.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(Raster::from_bytes(&good[..10]), Err(Error::Truncated(_))));

        let mut bad = good.clone();
        bad[20] = 9;
        assert!(matches!(Raster::from_bytes(&bad), Err(Error::UnknownDtype(9))));

        let mut bad = good.clone();
        bad.push(0);
        assert!(Raster::from_bytes(&bad).is_err());

        assert!(Raster::new(2, 2, 2, RasterData::U8(vec![0; 7])).is_err());
    }
}
