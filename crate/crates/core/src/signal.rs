//! Reference-frame transforms and waveform-quality measures.
//!
//! The Park transform is amplitude invariant with the q axis leading d by a
//! quarter period, so `x_abc = Re{(d + j q) e^{j theta}}`. A balanced set of
//! peak `U` whose phase a peaks at `theta` maps to `(U, 0)`.

use std::f64::consts::{FRAC_PI_3, PI};

use thiserror::Error;

const TWO_PI_3: f64 = 2.0 * FRAC_PI_3;

/// Instantaneous phase quantities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AbcFrame {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl AbcFrame {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// Balanced positive-sequence set of peak `amplitude` with phase a at
    /// angle `theta`.
    pub fn balanced(amplitude: f64, theta: f64) -> Self {
        Self {
            a: amplitude * theta.cos(),
            b: amplitude * (theta - TWO_PI_3).cos(),
            c: amplitude * (theta + TWO_PI_3).cos(),
        }
    }
}

/// Synchronous-frame components at electrical angle `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DqFrame {
    pub d: f64,
    pub q: f64,
    pub theta: f64,
}

pub fn park(abc: AbcFrame, theta: f64) -> DqFrame {
    let (s0, c0) = theta.sin_cos();
    let (s1, c1) = (theta - TWO_PI_3).sin_cos();
    let (s2, c2) = (theta + TWO_PI_3).sin_cos();
    DqFrame {
        d: (2.0 / 3.0) * (abc.a * c0 + abc.b * c1 + abc.c * c2),
        q: -(2.0 / 3.0) * (abc.a * s0 + abc.b * s1 + abc.c * s2),
        theta,
    }
}

pub fn inverse_park(d: f64, q: f64, theta: f64) -> AbcFrame {
    let phase = |angle: f64| {
        let (s, c) = angle.sin_cos();
        d * c - q * s
    };
    AbcFrame {
        a: phase(theta),
        b: phase(theta - TWO_PI_3),
        c: phase(theta + TWO_PI_3),
    }
}

/// Phase-a value of a dq quantity; cheaper than a full inverse transform.
#[inline]
pub fn phase_a(d: f64, q: f64, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    d * c - q * s
}

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("window of {samples} samples spans {periods} fundamental periods; need an integer >= 2")]
    NonIntegerPeriods { samples: usize, periods: f64 },
    #[error("sample rate {sample_hz} Hz does not resolve harmonic {max_harmonic} of {fundamental_hz} Hz")]
    BelowNyquist { sample_hz: f64, fundamental_hz: f64, max_harmonic: usize },
    #[error("fundamental component is zero")]
    ZeroFundamental,
    #[error("phase windows have different lengths")]
    LengthMismatch,
}

/// Number of whole fundamental periods in a window, or an error.
fn whole_periods(samples: usize, fundamental_hz: f64, sample_hz: f64) -> Result<usize, SignalError> {
    let periods = samples as f64 * fundamental_hz / sample_hz;
    let rounded = periods.round();
    if rounded < 2.0 || (periods - rounded).abs() > 1e-6 {
        return Err(SignalError::NonIntegerPeriods { samples, periods });
    }
    Ok(rounded as usize)
}

/// DFT coefficient at integer bin `k` of `x`, evaluated with the Goertzel
/// recurrence. Returns `(re, im)` with the DFT sign convention
/// `X[k] = sum x[n] e^{-j 2 pi k n / N}`.
pub fn goertzel(x: &[f64], k: usize) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let w = 2.0 * PI * k as f64 / n as f64;
    let (sw, cw) = w.sin_cos();
    let coeff = 2.0 * cw;
    let (mut s1, mut s2) = (0.0, 0.0);
    for &v in x {
        let s0 = v + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    // With e^{-j w N} = 1 for integer k: X[k] = e^{j w} s1 - s2.
    (cw * s1 - s2, sw * s1)
}

/// Peak amplitude of harmonic `h` in a window holding `periods` cycles.
fn harmonic_amplitude(x: &[f64], periods: usize, h: usize) -> f64 {
    let (re, im) = goertzel(x, h * periods);
    2.0 * re.hypot(im) / x.len() as f64
}

/// Total harmonic distortion in percent: RMS of harmonics 2..=max_harmonic
/// relative to the fundamental.
pub fn thd(samples: &[f64], fundamental_hz: f64, sample_hz: f64, max_harmonic: usize) -> Result<f64, SignalError> {
    if sample_hz <= 2.0 * max_harmonic as f64 * fundamental_hz {
        return Err(SignalError::BelowNyquist {
            sample_hz,
            fundamental_hz,
            max_harmonic,
        });
    }
    let periods = whole_periods(samples.len(), fundamental_hz, sample_hz)?;
    let fundamental = harmonic_amplitude(samples, periods, 1);
    let scale = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if fundamental <= 1e-12 * scale || fundamental == 0.0 {
        return Err(SignalError::ZeroFundamental);
    }
    let harmonics: f64 = (2..=max_harmonic)
        .map(|h| harmonic_amplitude(samples, periods, h).powi(2))
        .sum();
    Ok(100.0 * harmonics.sqrt() / fundamental)
}

/// Negative- over positive-sequence magnitude of the fundamental, percent.
pub fn unbalance(a: &[f64], b: &[f64], c: &[f64], fundamental_hz: f64, sample_hz: f64) -> Result<f64, SignalError> {
    if a.len() != b.len() || a.len() != c.len() {
        return Err(SignalError::LengthMismatch);
    }
    let periods = whole_periods(a.len(), fundamental_hz, sample_hz)?;
    let phasor = |x: &[f64]| goertzel(x, periods);
    let pa = phasor(a);
    let pb = phasor(b);
    let pc = phasor(c);
    // Rotation operator alpha = e^{j 2 pi / 3}.
    let (sa, ca) = TWO_PI_3.sin_cos();
    let rot = |(re, im): (f64, f64), times: i32| {
        let (s, c) = if times == 1 { (sa, ca) } else { (-sa, ca) };
        (re * c - im * s, re * s + im * c)
    };
    let pos = {
        let b1 = rot(pb, 1);
        let c2 = rot(pc, 2);
        (pa.0 + b1.0 + c2.0, pa.1 + b1.1 + c2.1)
    };
    let neg = {
        let b2 = rot(pb, 2);
        let c1 = rot(pc, 1);
        (pa.0 + b2.0 + c1.0, pa.1 + b2.1 + c1.1)
    };
    let pos_mag = pos.0.hypot(pos.1);
    let scale = a.iter().chain(b).chain(c).fold(0.0_f64, |m, v| m.max(v.abs())) * a.len() as f64;
    if pos_mag <= 1e-12 * scale || pos_mag == 0.0 {
        return Err(SignalError::ZeroFundamental);
    }
    Ok(100.0 * neg.0.hypot(neg.1) / pos_mag)
}
