//! 8-tap Hann-windowed sinc interpolation for fractional sample positions.

use crate::scalar::Scalar;

pub const TAPS: usize = 8;
/// Index of the tap aligned with `floor(position)`.
pub const CENTER: usize = 3;

/// Interpolation kernel for one fractional position: the value at
/// `base + frac` is `sum_k taps[k] * x[base - CENTER + k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel<T> {
    /// `floor(position)`.
    pub base: isize,
    pub taps: [T; TAPS],
}

/// Windowed-sinc taps for a fractional offset in `[0, 1)`, normalized to unit
/// DC gain. `frac == 0` yields an exact unit impulse.
pub fn taps_f64(frac: f64) -> [f64; TAPS] {
    let mut t = [0.0; TAPS];
    if frac == 0.0 {
        t[CENTER] = 1.0;
        return t;
    }
    let half = (TAPS / 2) as f64;
    for (k, tap) in t.iter_mut().enumerate() {
        let u = (k as f64 - CENTER as f64) - frac;
        let sinc = if u == 0.0 { 1.0 } else { (std::f64::consts::PI * u).sin() / (std::f64::consts::PI * u) };
        let window = 0.5 * (1.0 + (std::f64::consts::PI * u / half).cos());
        *tap = sinc * window;
    }
    let sum: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= sum);
    t
}

impl<T: Scalar> Kernel<T> {
    /// Kernel that reads a signal at the (fractional) sample position `pos`.
    pub fn at(pos: f64) -> Self {
        let base = pos.floor();
        let frac = pos - base;
        // frac can round up to exactly 1.0 for tiny negative positions
        let (base, frac) = if frac >= 1.0 { (base + 1.0, 0.0) } else { (base, frac) };
        Self { base: base as isize, taps: taps_f64(frac).map(T::lit) }
    }

    /// First sample index touched by the kernel.
    #[inline]
    pub fn first(&self) -> isize {
        self.base - CENTER as isize
    }

    /// Interpolated value; samples outside `x` count as zero.
    pub fn apply(&self, x: &[T]) -> T {
        let first = self.first();
        let mut acc = T::zero();
        for (k, &h) in self.taps.iter().enumerate() {
            let i = first + k as isize;
            if i >= 0 && (i as usize) < x.len() {
                acc += h * x[i as usize];
            }
        }
        acc
    }
}

/// Accumulates `gain * x(t + shift)` for `t = start..start + out.len()` into
/// `out`, where `shift` is in samples and may be fractional. Samples outside
/// `x` are zero.
pub fn accumulate_shifted<T: Scalar>(x: &[T], start: isize, shift: f64, gain: T, out: &mut [T]) {
    accumulate_kernel(x, start, &Kernel::<T>::at(shift), gain, out);
}

/// As [`accumulate_shifted`] with a prebuilt kernel for the shift.
pub fn accumulate_kernel<T: Scalar>(x: &[T], start: isize, kernel: &Kernel<T>, gain: T, out: &mut [T]) {
    let len = out.len() as isize;
    let n = x.len() as isize;
    for (k, &h) in kernel.taps.iter().enumerate() {
        let h = h * gain;
        if h == T::zero() {
            continue;
        }
        // x index for out[t] is start + t + kernel.first() + k
        let offset = start + kernel.first() + k as isize;
        let t0 = (-offset).clamp(0, len);
        let t1 = (n - offset).clamp(0, len);
        if t0 >= t1 {
            continue;
        }
        let src = &x[(offset + t0) as usize..(offset + t1) as usize];
        for (o, &s) in out[t0 as usize..t1 as usize].iter_mut().zip(src) {
            *o += h * s;
        }
    }
}
