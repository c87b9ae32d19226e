//! On-disk formats: the SPHT tensor container and multichannel WAV.
//!
//! SPHT layout (all integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `SPHT` |
//! | 2 | version (u16, currently 1) |
//! | 1 | dtype (1 = f32, 2 = u8) |
//! | 1 | rank |
//! | 4 x rank | dims (u32 each) |
//! | rest | row-major payload |

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::simulator::MultichannelRecording;
use crate::SAMPLE_RATE_HZ;

pub const MAGIC: [u8; 4] = *b"SPHT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U8: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            Self::F32(_) => DTYPE_F32,
            Self::U8(_) => DTYPE_U8,
        }
    }
}

/// Dense row-major tensor. Rank 0 holds a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn element_count(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dims {dims:?} not representable")));
        }
        if element_count(&dims) != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {} values, got {}", element_count(&dims), data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn from_u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(data))
    }

    /// Converts any scalar slice to an f32 tensor.
    pub fn from_scalars<T: Scalar>(dims: Vec<usize>, data: &[T]) -> Result<Self> {
        Self::from_f32(dims, data.iter().map(|v| v.to_f64_lossy() as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::Format("expected f32 tensor, found u8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format("expected u8 tensor, found f32".into())),
        }
    }

    pub fn to_scalars<T: Scalar>(&self) -> Result<Vec<T>> {
        Ok(self.as_f32()?.iter().map(|&v| T::lit(v as f64)).collect())
    }

    /// Fails unless the dims equal `want`.
    pub fn expect_dims(&self, want: &[usize]) -> Result<()> {
        if self.dims != want {
            return Err(Error::Shape(format!("tensor dims {:?}, expected {want:?}", self.dims)));
        }
        Ok(())
    }

    pub fn header_len(rank: usize) -> usize {
        4 + 2 + 1 + 1 + 4 * rank
    }

    pub fn encoded_len(&self) -> usize {
        let elem = match self.data {
            TensorData::F32(_) => 4,
            TensorData::U8(_) => 1,
        };
        Self::header_len(self.dims.len()) + elem * self.data.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated { expected: Self::header_len(0), found: bytes.len() });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found });
        }
        if bytes.len() < Self::header_len(0) {
            return Err(Error::Truncated { expected: Self::header_len(0), found: bytes.len() });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let dtype = bytes[6];
        let rank = bytes[7] as usize;
        let header = Self::header_len(rank);
        if bytes.len() < header {
            return Err(Error::Truncated { expected: header, found: bytes.len() });
        }
        let dims: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("dims overflow".into()))?;
        let elem = match dtype {
            DTYPE_F32 => 4,
            DTYPE_U8 => 1,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        let expected = count
            .checked_mul(elem)
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| Error::Format("payload size overflow".into()))?;
        if bytes.len() < expected {
            return Err(Error::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!("{} trailing bytes after payload", bytes.len() - expected)));
        }
        let payload = &bytes[header..];
        let data = match dtype {
            DTYPE_F32 => {
                TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
            }
            _ => TensorData::U8(payload.to_vec()),
        };
        Self::new(dims, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.encode())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// WAV sample encodings supported for writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Int16,
    Int24,
    Float32,
}

/// Writes an interleaved multichannel WAV. Integer encodings round and clip
/// to the representable range.
pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, rec: &MultichannelRecording<T>, enc: WavEncoding) -> Result<()> {
    let (bits, format) = match enc {
        WavEncoding::Int16 => (16, hound::SampleFormat::Int),
        WavEncoding::Int24 => (24, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: u16::try_from(rec.channel_count()).map_err(|_| Error::Shape("too many channels for WAV".into()))?,
        sample_rate: rec.sample_rate_hz(),
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    let full = ((1i64 << (bits - 1)) - 1) as f64;
    for i in 0..rec.len() {
        for ch in rec.channels() {
            let v = ch[i].to_f64_lossy();
            match enc {
                WavEncoding::Float32 => w.write_sample(v as f32)?,
                _ => w.write_sample((v * (full + 1.0)).round().clamp(-full - 1.0, full) as i32)?,
            }
        }
    }
    w.finalize()?;
    Ok(())
}

/// Reads a WAV of any supported encoding at its native rate. Integer
/// samples map to `[-1, 1)` by dividing by `2^(bits - 1)`.
pub fn read_wav_any_rate<T: Scalar>(path: impl AsRef<Path>) -> Result<MultichannelRecording<T>> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let n = spec.channels as usize;
    if n == 0 {
        return Err(Error::Format("WAV with zero channels".into()));
    }
    let mut channels: Vec<Vec<T>> = vec![Vec::with_capacity(r.len() as usize / n); n];
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            for (i, s) in r.samples::<f32>().enumerate() {
                channels[i % n].push(T::lit(s? as f64));
            }
        }
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            for (i, s) in r.samples::<i32>().enumerate() {
                channels[i % n].push(T::lit(s? as f64 * scale));
            }
        }
        (fmt, bits) => return Err(Error::Format(format!("unsupported WAV encoding {fmt:?} {bits}-bit"))),
    }
    if channels.iter().any(|c| c.len() != channels[0].len()) {
        return Err(Error::Truncated { expected: channels[0].len() * n, found: channels.iter().map(Vec::len).sum() });
    }
    MultichannelRecording::new(spec.sample_rate, channels)
}

/// Reads a pipeline input; anything other than 48 kHz is rejected.
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<MultichannelRecording<T>> {
    let rec = read_wav_any_rate(path)?;
    if rec.sample_rate_hz() != SAMPLE_RATE_HZ {
        return Err(Error::SampleRate { found: rec.sample_rate_hz(), expected: SAMPLE_RATE_HZ });
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::from_f32(vec![], vec![-2.5]).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 8 + 4);
        assert_eq!(Tensor::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn map_byte_length() {
        // 4 magic + 2 version + 1 dtype + 1 rank + 3 * 4 dims + payload
        const MAP_BYTES: usize = 132_500;
        let t = Tensor::from_f32(vec![90, 23, 16], (0..90 * 23 * 16).map(|i| i as f32 * 0.5).collect()).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), MAP_BYTES);
        assert_eq!(t.encoded_len(), MAP_BYTES);
        assert_eq!(Tensor::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn hand_built_header() {
        let t = Tensor::from_u8(vec![2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let want = [b'S', b'P', b'H', b'T', 1, 0, 2, 2, 2, 0, 0, 0, 3, 0, 0, 0, 1, 2, 3, 4, 5, 6];
        assert_eq!(t.encode(), want);
    }

    #[test]
    fn distinct_errors() {
        let good = Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap().encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::decode(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(Tensor::decode(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(Tensor::decode(&good[..6]), Err(Error::Truncated { .. })));
        let mut dt = good.clone();
        dt[6] = 9;
        assert!(matches!(Tensor::decode(&dt), Err(Error::Format(_))));
        let mut long = good;
        long.push(0);
        assert!(matches!(Tensor::decode(&long), Err(Error::Format(_))));
        assert!(Tensor::from_f32(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn wav_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let chans: Vec<Vec<f32>> = (0..24).map(|c| (0..4800).map(|i| ((i * 31 + c * 7) % 200) as f32 / 100.0 - 1.0).collect()).collect();
        let rec = MultichannelRecording::new(48000, chans).unwrap();
        let p = dir.path().join("f.wav");
        write_wav(&p, &rec, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav::<f32>(&p).unwrap(), rec);

        // 24-bit ramp
        let ramp: Vec<f64> = (0..4800).map(|i| i as f64 / 4800.0 * 1.8 - 0.9).collect();
        let rec = MultichannelRecording::new(48000, vec![ramp.clone()]).unwrap();
        let p = dir.path().join("i24.wav");
        write_wav(&p, &rec, WavEncoding::Int24).unwrap();
        let back = read_wav::<f64>(&p).unwrap();
        let err = ramp.iter().zip(back.channel(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 2f64.powi(-23), "{err}");

        let rec = MultichannelRecording::new(44100, vec![vec![0.0f32; 10]]).unwrap();
        let p = dir.path().join("r.wav");
        write_wav(&p, &rec, WavEncoding::Int16).unwrap();
        assert!(matches!(read_wav::<f32>(&p), Err(Error::SampleRate { found: 44100, .. })));
        assert_eq!(read_wav_any_rate::<f32>(&p).unwrap().sample_rate_hz(), 44100);
    }
}
