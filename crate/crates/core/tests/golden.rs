//! Byte-exact agreement with files written by `golden/generate.py`, which
//! builds them from the format definitions without touching this crate.

use std::path::PathBuf;

use sphseg::simulator::MultichannelRecording;
use sphseg::storage::{read_wav, write_wav, Tensor, TensorData, WavEncoding};

const CHANNELS: usize = 3;
const FRAMES: usize = 6;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn read(name: &str) -> Vec<u8> {
    std::fs::read(golden(name)).unwrap()
}

#[test]
fn tensors_decode_and_reencode_bit_exactly() {
    let f32_values: Vec<f32> = (0..24).map(|i| (i as f32 - 11.0) * 0.125).collect();
    let u8_values: Vec<u8> = (0..15).map(|i| ((i * 37 + 11) % 256) as u8).collect();
    let cases = [
        ("tensor_f32.spht", Tensor::from_f32(vec![2, 3, 4], f32_values).unwrap()),
        ("tensor_u8.spht", Tensor::from_u8(vec![3, 5], u8_values).unwrap()),
        ("tensor_scalar.spht", Tensor::from_f32(vec![], vec![-2.5]).unwrap()),
    ];
    for (name, want) in cases {
        let bytes = read(name);
        let got = Tensor::decode(&bytes).unwrap();
        assert_eq!(got, want, "{name}");
        assert_eq!(want.encode(), bytes, "{name}");
        let tmp = tempfile::NamedTempFile::new().unwrap();
        want.save(tmp.path()).unwrap();
        assert_eq!(std::fs::read(tmp.path()).unwrap(), bytes, "{name}");
    }
}

fn channels(sample: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
    (0..CHANNELS).map(|c| (0..FRAMES).map(|f| sample(f * CHANNELS + c)).collect()).collect()
}

#[test]
fn wav_encodings_read_and_write_bit_exactly() {
    let int16 = |k: usize| ((k * 7919) % 65536) as f64 - 32768.0;
    let int24 = |k: usize| ((k * 1_299_709) % 16_777_216) as f64 - 8_388_608.0;
    let float = |k: usize| ((k * 37) % 201) as f64 / 128.0 - 100.0 / 128.0;
    let cases: [(&str, WavEncoding, Vec<Vec<f64>>); 3] = [
        ("pcm16.wav", WavEncoding::Int16, channels(|k| int16(k) / 32768.0)),
        ("pcm24.wav", WavEncoding::Int24, channels(|k| int24(k) / 8_388_608.0)),
        ("float32.wav", WavEncoding::Float32, channels(float)),
    ];
    for (name, enc, want) in cases {
        let rec = read_wav::<f64>(golden(name)).unwrap();
        assert_eq!(rec.channel_count(), CHANNELS);
        assert_eq!(rec.channels(), &want[..], "{name}");
        let tmp = tempfile::NamedTempFile::new().unwrap();
        write_wav(tmp.path(), &MultichannelRecording::new(48_000, want).unwrap(), enc).unwrap();
        assert_eq!(std::fs::read(tmp.path()).unwrap(), read(name), "{name}");
    }
}

#[test]
fn corrupted_golden_tensor_is_rejected() {
    let mut bytes = read("tensor_f32.spht");
    bytes.pop();
    assert!(Tensor::decode(&bytes).is_err());
    let mut bytes = read("tensor_u8.spht");
    bytes[0] = b'X';
    assert!(Tensor::decode(&bytes).is_err());
    assert!(matches!(Tensor::decode(&read("tensor_u8.spht")).unwrap().data(), TensorData::U8(_)));
}
