//! Spectra, harmonic peak tables and damping estimates for recorded waveforms.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::emt::WaveformSet;
use crate::error::AnalysisError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Taper {
    Rectangular,
    RaisedCosine,
}

/// Uniformly sampled single-channel view.
#[derive(Debug, Clone, Copy)]
pub struct Signal<'a> {
    pub samples: &'a [f64],
    pub sample_period: f64,
    /// Time of the first sample.
    pub t0: f64,
}

impl<'a> Signal<'a> {
    pub fn new(samples: &'a [f64], sample_period: f64, t0: f64) -> Self {
        Self {
            samples,
            sample_period,
            t0,
        }
    }

    pub fn from_set(set: &'a WaveformSet, channel: &str) -> Result<Self, AnalysisError> {
        let c = set
            .channel(channel)
            .ok_or_else(|| AnalysisError::UnknownChannel(channel.to_string()))?;
        Ok(Self::new(&c.samples, set.sample_period, set.t0))
    }

    fn end(&self) -> f64 {
        self.t0 + self.samples.len() as f64 * self.sample_period
    }

    /// Sample range covering `[start, start + length)`.
    fn range(&self, start: f64, length: f64) -> Result<std::ops::Range<usize>, AnalysisError> {
        let first = ((start - self.t0) / self.sample_period - 1e-6).ceil();
        let n = (length / self.sample_period).round();
        if first < 0.0 || first + n > self.samples.len() as f64 {
            return Err(AnalysisError::WindowOutOfRange {
                start,
                end: start + length,
            });
        }
        let first = first as usize;
        Ok(first..first + n as usize)
    }
}

/// Single-sided peak-amplitude spectrum: a pure `A cos` reads `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub channel: String,
    pub unit: String,
    pub start: f64,
    /// Window length actually used (after rounding to whole cycles).
    pub length: f64,
    pub taper: Taper,
    /// Bin spacing in Hz, equal to `1 / length`.
    pub resolution: f64,
    pub amplitudes: Vec<f64>,
}

impl Spectrum {
    pub fn frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.resolution
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.amplitudes.len()).map(|k| self.frequency(k)).collect()
    }

    pub fn bin_of(&self, f: f64) -> usize {
        ((f / self.resolution).round() as usize).min(self.amplitudes.len().saturating_sub(1))
    }

    /// Amplitude of the bin nearest to `f`.
    pub fn amplitude_at(&self, f: f64) -> f64 {
        self.amplitudes.get(self.bin_of(f)).copied().unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# channel={} start_s={} length_s={} taper={:?} amplitude=peak\nfrequency_hz,amplitude_peak_{}\n",
            self.channel, self.start, self.length, self.taper, self.unit
        );
        for (k, a) in self.amplitudes.iter().enumerate() {
            let _ = writeln!(out, "{},{:.9e}", self.frequency(k), a);
        }
        out
    }
}

/// Amplitude spectrum of `signal` over `[start, start + length)`.
///
/// Rectangular windows are rounded to the nearest whole number of
/// fundamental cycles.
pub fn spectrum(
    signal: Signal<'_>,
    start: f64,
    length: f64,
    taper: Taper,
    f_nom: f64,
) -> Result<Spectrum, AnalysisError> {
    let cycle = 1.0 / f_nom;
    let length = match taper {
        Taper::Rectangular => (length / cycle).round() * cycle,
        Taper::RaisedCosine => length,
    };
    if length < 2.0 * cycle * (1.0 - 1e-9) {
        return Err(AnalysisError::WindowTooShort { length });
    }
    let range = signal.range(start, length)?;
    let n = range.len();
    let window: Vec<f64> = match taper {
        Taper::Rectangular => vec![1.0; n],
        Taper::RaisedCosine => (0..n)
            .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
            .collect(),
    };
    let gain: f64 = window.iter().sum();
    let mut buf: Vec<Complex64> = signal.samples[range]
        .iter()
        .zip(&window)
        .map(|(x, w)| Complex64::new(x * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let amplitudes = (0..=half)
        .map(|k| {
            let single = if k == 0 || (n % 2 == 0 && k == half) { 1.0 } else { 2.0 };
            single * buf[k].norm() / gain
        })
        .collect();
    Ok(Spectrum {
        channel: String::new(),
        unit: String::new(),
        start: signal.t0 + (start - signal.t0).max(0.0),
        length: n as f64 * signal.sample_period,
        taper,
        resolution: 1.0 / (n as f64 * signal.sample_period),
        amplitudes,
    })
}

/// Spectrum of a named channel of a recorded set.
pub fn channel_spectrum(
    set: &WaveformSet,
    channel: &str,
    start: f64,
    length: f64,
    taper: Taper,
    f_nom: f64,
) -> Result<Spectrum, AnalysisError> {
    let c = set
        .channel(channel)
        .ok_or_else(|| AnalysisError::UnknownChannel(channel.to_string()))?;
    let mut s = spectrum(Signal::from_set(set, channel)?, start, length, taper, f_nom)?;
    s.channel = c.name.clone();
    s.unit = c.unit.clone();
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicPeak {
    pub frequency: f64,
    pub amplitude: f64,
    /// Height above the higher of the two surrounding minima.
    pub prominence: f64,
}

/// Local maxima above `threshold * max`, sorted by frequency. The bin
/// nearest `f_nom` is always reported. The DC bin is ignored.
pub fn harmonic_peaks(spec: &Spectrum, threshold: f64, f_nom: f64) -> Vec<HarmonicPeak> {
    let a = &spec.amplitudes;
    if a.len() < 3 {
        return Vec::new();
    }
    let max = a[1..].iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let fundamental = spec.bin_of(f_nom);
    let mut out = Vec::new();
    for k in 1..a.len() {
        let left = a[k - 1];
        let right = a.get(k + 1).copied().unwrap_or(0.0);
        let is_max = a[k] > left && a[k] >= right;
        if (is_max && a[k] >= threshold * max) || k == fundamental {
            out.push(HarmonicPeak {
                frequency: spec.frequency(k),
                amplitude: a[k],
                prominence: prominence(a, k),
            });
        }
    }
    out
}

fn prominence(a: &[f64], k: usize) -> f64 {
    let mut left_min = a[k];
    for j in (1..k).rev() {
        if a[j] > a[k] {
            break;
        }
        left_min = left_min.min(a[j]);
    }
    let mut right_min = a[k];
    for &v in &a[k + 1..] {
        if v > a[k] {
            break;
        }
        right_min = right_min.min(v);
    }
    a[k] - left_min.max(right_min)
}

pub fn peaks_csv(peaks: &[HarmonicPeak], unit: &str) -> String {
    let mut out = format!("frequency_hz,amplitude_peak_{unit},prominence_{unit}\n");
    for p in peaks {
        let _ = writeln!(out, "{},{:.9e},{:.9e}", p.frequency, p.amplitude, p.prominence);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampingOptions {
    /// Band-pass half width around the centre frequency (Hz).
    pub half_bandwidth: f64,
    /// When set, a one-cycle difference `x(t) - x(t - 1/f)` removes this
    /// frequency and its harmonics before band-pass filtering.
    pub reject_fundamental: Option<f64>,
    /// Envelope points below this fraction of the maximum are left out of
    /// the fit.
    pub floor: f64,
}

impl Default for DampingOptions {
    fn default() -> Self {
        Self {
            half_bandwidth: 10.0,
            reject_fundamental: None,
            floor: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DampingEstimate {
    pub center: f64,
    /// Decay time constant (s). Negative for growing envelopes, infinite
    /// when no decay is resolvable over the record.
    pub tau: f64,
    /// Fitted exponent of the envelope (1/s).
    pub growth_rate: f64,
    /// RMS fit residual relative to the RMS envelope.
    pub residual: f64,
    pub divergent: bool,
    /// Per-cycle envelope `(time, amplitude)`.
    pub envelope: Vec<(f64, f64)>,
}

impl DampingEstimate {
    /// First time after the envelope maximum from which the envelope stays
    /// below `fraction` of that maximum.
    pub fn time_below(&self, fraction: f64) -> Option<f64> {
        let (imax, &(_, max)) = self
            .envelope
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))?;
        let limit = fraction * max;
        let last_above = self.envelope[imax..].iter().rposition(|&(_, a)| a >= limit)?;
        self.envelope.get(imax + last_above + 1).map(|&(t, _)| t)
    }
}

/// Band-passes `signal` around `f0`, takes per-cycle peak magnitudes from
/// `start` onwards and fits an exponential to them.
pub fn damping_estimate(
    signal: Signal<'_>,
    f0: f64,
    start: f64,
    options: &DampingOptions,
) -> Result<DampingEstimate, AnalysisError> {
    let dt = signal.sample_period;
    let first = signal.range(start, 0.0)?.start;
    if signal.end() - start < 5.0 / f0 {
        return Err(AnalysisError::RecordTooShort(f0));
    }
    let mut x: Vec<f64> = signal.samples[first..].to_vec();
    if let Some(f) = options.reject_fundamental {
        let lag = (1.0 / (f * dt)).round() as usize;
        if x.len() <= lag + 1 {
            return Err(AnalysisError::RecordTooShort(f0));
        }
        x = (lag..x.len()).map(|k| x[k] - x[k - lag]).collect();
    }
    let offset = signal.samples.len() - first - x.len();
    let t_first = signal.t0 + (first + offset) as f64 * dt;
    // A decay faster than the filter's own transient would be masked by
    // it. A coarse pass through a wider band estimates the decay; if the
    // nominal band is too slow for it, the band is widened for the fit.
    let rate = BandPass::new(f0, options.half_bandwidth, dt).slowest_pole;
    let coarse = envelope_fit(&x, t_first, dt, f0, 4.0 * options.half_bandwidth, 0.0, options)?;
    let decay = -coarse.growth_rate;
    let pass = if decay > 0.0 && rate < 8.0 * decay {
        let half = options.half_bandwidth * 8.0 * decay / rate;
        envelope_fit(&x, t_first, dt, f0, half, decay, options)?
    } else {
        envelope_fit(&x, t_first, dt, f0, options.half_bandwidth, 0.0, options)?
    };
    let Fit {
        growth_rate,
        residual,
        envelope,
    } = pass;
    let span = envelope.last().map_or(0.0, |e| e.0) - envelope[0].0;
    let resolvable = 0.1 / span.max(dt);
    let divergent = growth_rate > -resolvable;
    let tau = if growth_rate.abs() < resolvable {
        f64::INFINITY
    } else {
        -1.0 / growth_rate
    };
    Ok(DampingEstimate {
        center: f0,
        tau,
        growth_rate,
        residual,
        divergent,
        envelope,
    })
}

struct Fit {
    growth_rate: f64,
    residual: f64,
    envelope: Vec<(f64, f64)>,
}

fn envelope_fit(
    x: &[f64],
    t_first: f64,
    dt: f64,
    f0: f64,
    half_bandwidth: f64,
    decay: f64,
    options: &DampingOptions,
) -> Result<Fit, AnalysisError> {
    let filter = BandPass::new(f0, half_bandwidth, dt);
    let y = filter.apply(x);
    let per_cycle = (1.0 / (f0 * dt)).round().max(1.0) as usize;
    // Wait until the filter transient is about 2e-3 of the tracked decay.
    let settle = 6.0 / (filter.slowest_pole - decay).max(0.25 * filter.slowest_pole);
    let mut envelope = Vec::new();
    let mut k = (settle / dt).ceil() as usize;
    while k + per_cycle <= y.len() {
        let (j, a) = y[k..k + per_cycle]
            .iter()
            .enumerate()
            .map(|(j, v)| (j, v.abs()))
            .fold((0, 0.0), |m, c| if c.1 > m.1 { c } else { m });
        envelope.push((t_first + (k + j) as f64 * dt, a));
        k += per_cycle;
    }
    if envelope.len() < 3 {
        return Err(AnalysisError::RecordTooShort(f0));
    }
    // The response may build up before decaying; start the fit at the
    // largest envelope value in the first half of the record.
    let (imax, max) = envelope[..envelope.len().div_ceil(2)]
        .iter()
        .enumerate()
        .fold((0, 0.0), |m, (i, &(_, a))| if a > m.1 { (i, a) } else { m });
    // Points near the record's minimum are treated as noise floor.
    let min = envelope.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let cut = if 3.0 * min < 0.5 * max {
        (3.0 * min).max(options.floor * max)
    } else {
        options.floor * max
    };
    let fit: Vec<(f64, f64)> = envelope[imax..]
        .iter()
        .copied()
        .take_while(|&(_, a)| a > cut)
        .collect();
    let (growth_rate, residual) = if fit.len() >= 3 {
        exp_fit(&fit)
    } else {
        // Collapsed below the floor within a couple of cycles.
        let (t1, a1) = envelope[(imax + 1).min(envelope.len() - 1)];
        let rate = (options.floor.max(a1 / max)).ln() / (t1 - envelope[imax].0).max(dt);
        (rate, 0.0)
    };
    Ok(Fit {
        growth_rate,
        residual,
        envelope,
    })
}

/// Least-squares fit of `a = A e^(s t)` in the log domain with weights
/// `a^2`, which approximates the amplitude-domain fit. Returns `(s,
/// relative residual)`.
fn exp_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let t_ref = points[0].0;
    let (mut sw, mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(t, a) in points {
        let w = a * a;
        let t = t - t_ref;
        let y = a.ln();
        sw += w;
        st += w * t;
        sy += w * y;
        stt += w * t * t;
        sty += w * t * y;
    }
    let det = sw * stt - st * st;
    let s = (sw * sty - st * sy) / det;
    let c = (sy - s * st) / sw;
    let (mut num, mut den) = (0.0, 0.0);
    for &(t, a) in points {
        let e = a - (c + s * (t - t_ref)).exp();
        num += e * e;
        den += a * a;
    }
    (s, (num / den).sqrt())
}

/// Fourth-order Butterworth band-pass as two cascaded biquads (bilinear
/// transform with pre-warped band edges).
#[derive(Debug, Clone)]
struct BandPass {
    sections: Vec<[f64; 5]>,
    slowest_pole: f64,
}

impl BandPass {
    fn new(f0: f64, half_bandwidth: f64, dt: f64) -> Self {
        let warp = |f: f64| 2.0 / dt * (PI * f * dt).tan();
        let lo = warp((f0 - half_bandwidth).max(0.1 * f0));
        let hi = warp(f0 + half_bandwidth);
        let w0 = (lo * hi).sqrt();
        let bw = hi - lo;
        let proto = [
            Complex64::new(-0.5f64.sqrt(), 0.5f64.sqrt()),
            Complex64::new(-0.5f64.sqrt(), -0.5f64.sqrt()),
        ];
        // s^2 - p bw s + w0^2 = 0 for each prototype pole; keep the
        // upper-half-plane roots and pair each with its conjugate.
        let mut poles = Vec::new();
        for p in proto {
            let b = -p * bw;
            let disc = (b * b - 4.0 * w0 * w0).sqrt();
            for r in [(-b + disc) / 2.0, (-b - disc) / 2.0] {
                if r.im > 0.0 {
                    poles.push(r);
                }
            }
        }
        let k = 2.0 / dt;
        let z0 = Complex64::from_polar(1.0, 2.0 * PI * f0 * dt);
        let mut sections = Vec::new();
        let mut slowest = f64::INFINITY;
        for p in poles {
            slowest = slowest.min(-p.re);
            let zp = (k + p) / (k - p);
            let a1 = -2.0 * zp.re;
            let a2 = zp.norm_sqr();
            // Numerator 1 - z^-2, unit gain at f0.
            let zi = z0.inv();
            let h = (1.0 - zi * zi) / (1.0 + a1 * zi + a2 * zi * zi);
            let g = 1.0 / h.norm();
            sections.push([g, 0.0, -g, a1, a2]);
        }
        Self {
            sections,
            slowest_pole: slowest,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for &[b0, b1, b2, a1, a2] in &self.sections {
            let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
            for v in y.iter_mut() {
                let x0 = *v;
                let out = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = out;
                *v = out;
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, a: f64, dt: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| a * (2.0 * PI * f * k as f64 * dt).cos()).collect()
    }

    #[test]
    fn rectangular_window_reads_peak_amplitudes() {
        let dt = 20e-6;
        let n = 30_000;
        let x: Vec<f64> = tone(50.0, 326.6, dt, n)
            .iter()
            .zip(tone(76.0, 12.78, dt, n))
            .map(|(a, b)| a + b)
            .collect();
        let s = spectrum(Signal::new(&x, dt, 0.0), 0.0, 0.5, Taper::Rectangular, 50.0).unwrap();
        assert!((s.resolution - 2.0).abs() < 1e-9);
        assert!((s.amplitude_at(50.0) - 326.6).abs() < 326.6e-3);
        assert!((s.amplitude_at(76.0) - 12.78).abs() < 12.78e-3);
        let peaks = harmonic_peaks(&s, 0.01, 50.0);
        let f: Vec<f64> = peaks.iter().map(|p| p.frequency).collect();
        assert_eq!(f, vec![50.0, 76.0]);
    }

    #[test]
    fn window_rounds_to_whole_cycles_and_rejects_short_windows() {
        let x = vec![0.0; 10_000];
        let s = spectrum(Signal::new(&x, 1e-4, 0.0), 0.0, 0.505, Taper::Rectangular, 50.0).unwrap();
        assert!((s.length - 0.5).abs() < 1e-9);
        assert!(s.amplitudes.iter().all(|&a| a == 0.0));
        let err = spectrum(Signal::new(&x, 1e-4, 0.0), 0.0, 0.035, Taper::RaisedCosine, 50.0);
        assert!(matches!(err, Err(AnalysisError::WindowTooShort { .. })));
        let err = spectrum(Signal::new(&x, 1e-4, 0.0), 0.9, 0.2, Taper::Rectangular, 50.0);
        assert!(matches!(err, Err(AnalysisError::WindowOutOfRange { .. })));
    }

    #[test]
    fn raised_cosine_leakage_matches_window_transform() {
        let dt = 1e-4;
        let n = 5000;
        // Half a bin off: resolution is 2 Hz.
        let x = tone(77.0, 1.0, dt, n);
        let s = spectrum(Signal::new(&x, dt, 0.0), 0.0, 0.5, Taper::RaisedCosine, 50.0).unwrap();
        let delta: f64 = 0.5;
        let expected = (PI * delta).sin() / (PI * delta) / (1.0 - delta * delta);
        let got = s.amplitude_at(76.0);
        assert!((got - expected).abs() / expected < 0.01, "{got} vs {expected}");
    }

    #[test]
    fn peaks_scale_with_amplitude() {
        let dt = 2e-5;
        let n = 50_000;
        let mut x = vec![0.0; n];
        for (f, a) in [(50.0, 100.0), (475.0, 3.0), (550.0, 5.0), (600.0, 4.0)] {
            for (v, t) in x.iter_mut().zip(tone(f, a, dt, n)) {
                *v += t;
            }
        }
        let s = spectrum(Signal::new(&x, dt, 0.0), 0.0, 1.0, Taper::Rectangular, 50.0).unwrap();
        let p1 = harmonic_peaks(&s, 0.02, 50.0);
        let y: Vec<f64> = x.iter().map(|v| 7.5 * v).collect();
        let s2 = spectrum(Signal::new(&y, dt, 0.0), 0.0, 1.0, Taper::Rectangular, 50.0).unwrap();
        let p2 = harmonic_peaks(&s2, 0.02, 50.0);
        let f1: Vec<f64> = p1.iter().map(|p| p.frequency).collect();
        assert_eq!(f1, vec![50.0, 475.0, 550.0, 600.0]);
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.frequency, b.frequency);
            assert!((b.amplitude / a.amplitude - 7.5).abs() < 1e-9);
        }
    }

    fn damped(f: f64, rate: f64, dt: f64, duration: f64) -> Vec<f64> {
        let n = (duration / dt) as usize;
        (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                (rate * t).exp() * (2.0 * PI * f * t).sin()
            })
            .collect()
    }

    #[test]
    fn damping_of_constructed_exponentials() {
        let dt = 5e-5;
        for tau in [0.05, 0.5, 5.0] {
            let x = damped(76.0, -1.0 / tau, dt, 6.0);
            let d = damping_estimate(Signal::new(&x, dt, 0.0), 76.0, 0.0, &DampingOptions::default())
                .unwrap();
            assert!(!d.divergent);
            assert!((d.tau - tau).abs() / tau < 0.02, "tau {tau}: got {}", d.tau);
        }
    }

    #[test]
    fn undamped_and_growing_are_flagged() {
        let dt = 5e-5;
        let x = damped(76.0, 0.0, dt, 3.0);
        let d = damping_estimate(Signal::new(&x, dt, 0.0), 76.0, 0.0, &DampingOptions::default())
            .unwrap();
        assert!(d.divergent);
        assert!(d.tau.is_infinite());
        let x = damped(76.0, 1.0, dt, 3.0);
        let d = damping_estimate(Signal::new(&x, dt, 0.0), 76.0, 0.0, &DampingOptions::default())
            .unwrap();
        assert!(d.divergent);
        assert!((d.tau + 1.0).abs() < 0.05, "{}", d.tau);
    }

    #[test]
    fn fundamental_rejection_keeps_decay_rate() {
        let dt = 5e-5;
        let n = (4.0 / dt) as usize;
        let x: Vec<f64> = damped(76.0, -2.0, dt, 4.0)
            .iter()
            .zip(tone(50.0, 30.0, dt, n))
            .map(|(a, b)| a + b)
            .collect();
        let opts = DampingOptions {
            reject_fundamental: Some(50.0),
            ..DampingOptions::default()
        };
        let d = damping_estimate(Signal::new(&x, dt, 0.0), 76.0, 0.0, &opts).unwrap();
        assert!((d.tau - 0.5).abs() < 0.01, "{}", d.tau);
        let below = d.time_below(0.05).unwrap();
        let t_max = d.envelope[0].0;
        assert!((below - t_max - 0.5 * 20f64.ln()).abs() < 0.05, "{below}");
    }

    #[test]
    fn parseval_on_whole_cycle_window() {
        let dt = 2e-5;
        let n = 25_000;
        let x: Vec<f64> = (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                3.0 + 100.0 * (2.0 * PI * 50.0 * t).cos()
                    + 7.0 * (2.0 * PI * 76.0 * t + 0.3).sin()
                    + 2.0 * (2.0 * PI * 313.7 * t).cos()
            })
            .collect();
        let s = spectrum(Signal::new(&x, dt, 0.0), 0.0, 0.5, Taper::Rectangular, 50.0).unwrap();
        let time: f64 = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let freq: f64 = s.amplitudes[0].powi(2)
            + s.amplitudes[1..s.amplitudes.len() - 1].iter().map(|a| a * a / 2.0).sum::<f64>()
            + s.amplitudes.last().unwrap().powi(2);
        assert!((time - freq).abs() / time < 1e-3, "{time} vs {freq}");
    }

    #[test]
    fn damping_fit_unbiased_with_noise() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dt = 1e-4;
        // 40 dB below the initial tone power.
        let noise = Normal::new(0.0, 0.01 / 2f64.sqrt()).unwrap();
        for tau in [0.05, 0.1, 0.3, 1.0, 2.0, 5.0] {
            let x: Vec<f64> = damped(76.0, -1.0 / tau, dt, 8.0)
                .into_iter()
                .map(|v| v + noise.sample(&mut rng))
                .collect();
            let d = damping_estimate(Signal::new(&x, dt, 0.0), 76.0, 0.0, &DampingOptions::default())
                .unwrap();
            assert!((d.tau - tau).abs() / tau < 0.02, "tau {tau}: got {}", d.tau);
        }
    }
}
