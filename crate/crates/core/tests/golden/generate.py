"""Writes the golden container and WAV files from first principles.

The byte layouts follow the container table in docs/formats.md and the
RIFF/WAVE WAVEFORMATEXTENSIBLE definition. Nothing here calls the Rust code.
The sample formulas are repeated in tests/golden.rs.

    python3 generate.py   # run from this directory
"""

import struct

SPHT_MAGIC = b"SPHT"


def spht(dtype, dims, payload):
    head = SPHT_MAGIC + struct.pack("<HBB", 1, dtype, len(dims))
    head += b"".join(struct.pack("<I", d) for d in dims)
    return head + payload


def f32_values(n):
    return [(i - 11) * 0.125 for i in range(n)]


def u8_values(n):
    return [(i * 37 + 11) % 256 for i in range(n)]


PCM = bytes.fromhex("0100000000001000800000aa00389b71")
FLOAT = bytes.fromhex("0300000000001000800000aa00389b71")


def wav_extensible(channels, rate, bits, subformat, data):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", 0xFFFE, channels, rate, rate * block, block, bits)
    mask = (1 << min(channels, 18)) - 1
    fmt += struct.pack("<HHI", 22, bits, mask) + subformat
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


CHANNELS, FRAMES, RATE = 3, 6, 48000


def int16_sample(k):
    return (k * 7919) % 65536 - 32768


def int24_sample(k):
    return (k * 1299709) % 16777216 - 8388608


def float_sample(k):
    return ((k * 37) % 201 - 100) / 128.0


def main():
    with open("tensor_f32.spht", "wb") as f:
        f.write(spht(1, [2, 3, 4], b"".join(struct.pack("<f", v) for v in f32_values(24))))
    with open("tensor_u8.spht", "wb") as f:
        f.write(spht(2, [3, 5], bytes(u8_values(15))))
    with open("tensor_scalar.spht", "wb") as f:
        f.write(spht(1, [], struct.pack("<f", -2.5)))

    n = CHANNELS * FRAMES
    i16 = b"".join(struct.pack("<h", int16_sample(k)) for k in range(n))
    i24 = b"".join(struct.pack("<i", int24_sample(k))[:3] for k in range(n))
    f32 = b"".join(struct.pack("<f", float_sample(k)) for k in range(n))
    for name, bits, sub, data in [("pcm16.wav", 16, PCM, i16), ("pcm24.wav", 24, PCM, i24), ("float32.wav", 32, FLOAT, f32)]:
        with open(name, "wb") as f:
            f.write(wav_extensible(CHANNELS, RATE, bits, sub, data))


if __name__ == "__main__":
    main()
