//! Small-signal perturbation frequency scans, steady-state detection and a
//! direct nodal frequency scan for passive subnetworks.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::ScanPoint;
use crate::emt::{Probe, Simulation, WaveformSet};
use crate::error::{LinalgError, ScanError};
use crate::linalg::{EnvelopeLdl, Ordering};
use crate::network::{ElementKind, Network, Node, Shape, Source};

/// Residual above which a perturbation point is rejected.
pub const KCL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub fn suffix(self) -> &'static str {
        match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        }
    }
}

/// 1 Hz steps up to 150 Hz, 5 Hz up to 750 Hz, 50 Hz up to 5 kHz.
pub fn default_frequencies() -> Vec<f64> {
    let mut f: Vec<f64> = (1..=150).map(f64::from).collect();
    f.extend((31..=150).map(|k| 5.0 * f64::from(k)));
    f.extend((16..=100).map(|k| 50.0 * f64::from(k)));
    f
}

/// Integer frequencies `start..=end` in steps of `step`.
pub fn uniform_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| start + k as f64 * step).collect()
}

/// Peak of 1 % of the rated phase current of a three-phase bus.
pub fn default_amplitude(rated_mva: f64, v_kv: f64) -> f64 {
    0.01 * 2f64.sqrt() * rated_mva * 1e6 / (3f64.sqrt() * v_kv * 1e3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub name: String,
    /// Three-phase bus prefix; the phase suffix is appended.
    pub bus: String,
    pub phase: Phase,
    /// Element groups forming Z₁ (toward equivalent network 1).
    pub side1: Vec<String>,
    /// Element groups forming Z₂.
    pub side2: Vec<String>,
    pub frequencies: Vec<f64>,
    /// Injected peak current (A).
    pub amplitude: f64,
    /// Wait after injection start before measuring (s).
    pub settle: f64,
    pub min_periods: usize,
    /// Minimum measurement window (s); rounded up to whole periods.
    pub min_window: f64,
    pub dt: f64,
}

impl ScanPlan {
    pub fn for_point(point: &ScanPoint, amplitude: f64) -> Self {
        Self {
            name: point.name.clone(),
            bus: point.bus.clone(),
            phase: Phase::A,
            side1: point.side1.clone(),
            side2: point.side2.clone(),
            frequencies: default_frequencies(),
            amplitude,
            settle: 0.3,
            min_periods: 10,
            min_window: 0.2,
            dt: 10e-6,
        }
    }

    pub fn node(&self) -> String {
        format!("{}.{}", self.bus, self.phase.suffix())
    }

    fn injection_element(&self) -> String {
        format!("scan.{}", self.node())
    }

    /// Whole periods measured at `f`.
    pub fn periods(&self, f: f64) -> usize {
        self.min_periods.max((self.min_window * f - 1e-9).ceil() as usize).max(1)
    }

    pub fn window(&self, f: f64) -> f64 {
        self.periods(f) as f64 / f
    }

    pub fn validate(&self) -> Result<(), ScanError> {
        let bad = |m: String| Err(ScanError::InvalidPlan(m));
        if self.frequencies.is_empty() {
            return bad("no frequencies".into());
        }
        if self.frequencies.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return bad("frequencies must be positive and finite".into());
        }
        if self.frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return bad("frequencies must be strictly increasing".into());
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return bad(format!("injection amplitude {} A", self.amplitude));
        }
        if !(self.settle >= 0.0) || !(self.min_window >= 0.0) || self.min_periods == 0 {
            return bad("settle, window and periods must be non-negative, periods >= 1".into());
        }
        if !(self.dt > 0.0) {
            return bad(format!("time step {}", self.dt));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateOptions {
    /// Relative spread of per-cycle RMS values.
    pub tolerance: f64,
    pub cycles: usize,
    /// Latest acceptable settle time (s).
    pub horizon: f64,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            cycles: 5,
            horizon: 8.0,
        }
    }
}

/// Per-cycle RMS history; steady once every channel's spread over the
/// last `cycles` cycles is within tolerance.
#[derive(Debug, Clone)]
struct SteadyTracker {
    options: SteadyStateOptions,
    history: VecDeque<Vec<f64>>,
}

impl SteadyTracker {
    fn new(options: SteadyStateOptions) -> Self {
        Self {
            options,
            history: VecDeque::new(),
        }
    }

    fn push(&mut self, rms: Vec<f64>) -> bool {
        self.history.push_back(rms);
        if self.history.len() > self.options.cycles {
            self.history.pop_front();
        }
        if self.history.len() < self.options.cycles {
            return false;
        }
        (0..self.history[0].len()).all(|c| {
            let (lo, hi) = self
                .history
                .iter()
                .map(|h| h[c])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo <= self.options.tolerance * hi.abs() && hi.is_finite()
        })
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Earliest end of `cycles` consecutive fundamental cycles over which the
/// per-cycle RMS of every listed channel (all when empty) stays within
/// tolerance.
pub fn detect_steady_state(
    set: &WaveformSet,
    channels: &[&str],
    f_nom: f64,
    options: &SteadyStateOptions,
) -> Result<f64, ScanError> {
    let chans: Vec<&[f64]> = if channels.is_empty() {
        set.channels.iter().map(|c| c.samples.as_slice()).collect()
    } else {
        channels
            .iter()
            .map(|n| {
                set.channel(n)
                    .map(|c| c.samples.as_slice())
                    .ok_or_else(|| ScanError::UnknownBus(n.to_string()))
            })
            .collect::<Result<_, _>>()?
    };
    let per_cycle = (1.0 / (f_nom * set.sample_period)).round() as usize;
    let mut tracker = SteadyTracker::new(*options);
    let mut k = 0;
    while k + per_cycle <= set.len() {
        let end = set.t0 + (k + per_cycle) as f64 * set.sample_period;
        if end > options.horizon + 1e-9 {
            break;
        }
        if tracker.push(chans.iter().map(|c| rms(&c[k..k + per_cycle])).collect()) {
            return Ok(end);
        }
        k += per_cycle;
    }
    Err(ScanError::NoSteadyState {
        horizon: options.horizon,
    })
}

/// Advances `sim` cycle by cycle until the probes are steady.
pub fn run_to_steady_state(
    sim: &mut Simulation,
    probes: &[Probe],
    options: &SteadyStateOptions,
) -> Result<f64, ScanError> {
    let f_nom = sim.network().f_nom;
    let period = 1.0 / f_nom;
    let start = sim.time();
    let mut tracker = SteadyTracker::new(*options);
    let mut cycle = 0u64;
    loop {
        cycle += 1;
        let t_end = start + cycle as f64 * period;
        if t_end > options.horizon + 1e-9 {
            return Err(ScanError::NoSteadyState {
                horizon: options.horizon,
            });
        }
        let mut rec = sim.recorder(probes, 1)?;
        sim.advance_to(t_end, Some(&mut rec))?;
        let set = rec.finish(sim);
        if tracker.push(set.channels.iter().map(|c| rms(&c.samples)).collect()) {
            return Ok(sim.time());
        }
    }
}

/// Phasor (peak amplitude, phase referred to `t = 0`) of the `f` component
/// over `n_periods` periods starting at `window_start`.
pub fn single_bin_dft(
    samples: &[f64],
    sample_period: f64,
    t_first: f64,
    f: f64,
    window_start: f64,
    n_periods: usize,
) -> Result<Complex64, ScanError> {
    let k0 = ((window_start - t_first) / sample_period).round();
    let n = (n_periods as f64 / (f * sample_period)).round();
    let out_of_range = || ScanError::WindowOutOfRange {
        start: window_start,
        end: window_start + n_periods as f64 / f,
        record_start: t_first,
        record_end: t_first + samples.len() as f64 * sample_period,
    };
    if k0 < 0.0 || n < 1.0 || k0 + n > samples.len() as f64 {
        return Err(out_of_range());
    }
    let (k0, n) = (k0 as usize, n as usize);
    // Least-squares projection onto {1, cos, sin}: identical to the DFT
    // bin when the window spans whole samples, and still exact for a
    // tone at `f` when it does not.
    let mut g = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for (j, &x) in samples[k0..k0 + n].iter().enumerate() {
        let t = t_first + (k0 + j) as f64 * sample_period;
        let theta = 2.0 * PI * (f * t).fract();
        let basis = [1.0, theta.cos(), theta.sin()];
        for r in 0..3 {
            b[r] += basis[r] * x;
            for c in 0..3 {
                g[r][c] += basis[r] * basis[c];
            }
        }
    }
    let [_, c, s] = solve3(g, b).ok_or_else(out_of_range)?;
    Ok(Complex64::new(c, -s))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let p = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[p][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, p);
        b.swap(col, p);
        for r in col + 1..3 {
            let m = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= m * a[col][c];
            }
            b[r] -= m * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Perturbation,
    DirectScan,
    Interpolated,
}

impl Provenance {
    fn label(self) -> &'static str {
        match self {
            Provenance::Perturbation => "perturbation",
            Provenance::DirectScan => "direct-scan",
            Provenance::Interpolated => "interpolated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceCurve {
    /// `"Z1"` or `"Z2"`.
    pub side: String,
    pub frequencies: Vec<f64>,
    pub values: Vec<Complex64>,
    pub accepted: Vec<bool>,
    pub provenance: Provenance,
}

/// Phase in degrees wrapped to (-180, 180].
pub fn phase_deg(z: Complex64) -> f64 {
    let p = z.arg().to_degrees();
    if p <= -180.0 {
        p + 360.0
    } else {
        p
    }
}

impl ImpedanceCurve {
    pub fn new(side: &str, frequencies: Vec<f64>, values: Vec<Complex64>, provenance: Provenance) -> Self {
        let accepted = vec![true; values.len()];
        Self {
            side: side.to_string(),
            frequencies,
            values,
            accepted,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.norm()).collect()
    }

    pub fn phases_deg(&self) -> Vec<f64> {
        self.values.iter().map(|&z| phase_deg(z)).collect()
    }

    /// Accepted points only.
    pub fn accepted_only(&self) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| self.accepted[k]).collect();
        Self {
            side: self.side.clone(),
            frequencies: keep.iter().map(|&k| self.frequencies[k]).collect(),
            values: keep.iter().map(|&k| self.values[k]).collect(),
            accepted: vec![true; keep.len()],
            provenance: self.provenance,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frequency_hz,re_ohm,im_ohm,mag_ohm,phase_deg,provenance,accepted\n");
        for k in 0..self.len() {
            let z = self.values[k];
            let _ = writeln!(
                out,
                "{},{:.9e},{:.9e},{:.9e},{:.6},{},{}",
                self.frequencies[k],
                z.re,
                z.im,
                z.norm(),
                phase_deg(z),
                self.provenance.label(),
                self.accepted[k]
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedancePair {
    pub z1: ImpedanceCurve,
    pub z2: ImpedanceCurve,
}

impl ImpedancePair {
    /// Both sides on `grid`, using accepted points common to both.
    pub fn interpolate(&self, grid: &[f64]) -> Result<Self, ScanError> {
        let common: Vec<bool> = self.z1.accepted.iter().zip(&self.z2.accepted).map(|(a, b)| *a && *b).collect();
        let restrict = |c: &ImpedanceCurve| {
            let mut c = c.clone();
            c.accepted = common.clone();
            c
        };
        Ok(Self {
            z1: interpolate(&restrict(&self.z1), grid)?,
            z2: interpolate(&restrict(&self.z2), grid)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMeasurement {
    pub frequency: f64,
    pub v: Complex64,
    pub i1: Complex64,
    pub i2: Complex64,
    pub injected: Complex64,
    /// |I_inj - I1 - I2| / |I_inj|
    pub residual: f64,
    pub accepted: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub plan: String,
    /// Time at which the unperturbed network was found steady (s).
    pub steady_time: f64,
    pub measurements: Vec<PerturbationMeasurement>,
    pub pair: ImpedancePair,
}

impl ScanResult {
    pub fn rejected(&self) -> usize {
        self.measurements.iter().filter(|m| !m.accepted).count()
    }
}

/// Perturbation scan of one plan; see [`scan_points`].
pub fn scan(network: &Network, plan: &ScanPlan, steady: &SteadyStateOptions) -> Result<ScanResult, ScanError> {
    Ok(scan_points(network, std::slice::from_ref(plan), steady)?.remove(0))
}

fn plan_probes(plan: &ScanPlan) -> [Probe; 3] {
    let node = plan.node();
    [
        Probe::voltage(&node),
        Probe::GroupCurrent {
            node: node.clone(),
            groups: plan.side1.clone(),
        },
        Probe::GroupCurrent {
            node,
            groups: plan.side2.clone(),
        },
    ]
}

/// Perturbation scans of several plans sharing one steady-state run.
///
/// All plans must use the same time step. Each frequency is an
/// independent continuation of the steady snapshot; a shared
/// unperturbed continuation is subtracted before phasor extraction.
pub fn scan_points(
    network: &Network,
    plans: &[ScanPlan],
    steady: &SteadyStateOptions,
) -> Result<Vec<ScanResult>, ScanError> {
    let Some(first) = plans.first() else {
        return Ok(Vec::new());
    };
    for p in plans {
        p.validate()?;
        if p.dt != first.dt {
            return Err(ScanError::InvalidPlan("plans differ in time step".into()));
        }
    }
    let mut net = network.clone();
    for p in plans {
        let node = net
            .find_node(&p.node())
            .ok_or_else(|| ScanError::UnknownBus(p.node()))?;
        if net.element(&p.injection_element()).is_some() {
            continue;
        }
        net.add(
            p.injection_element(),
            "scan",
            ElementKind::CurrentSource {
                a: Node::GROUND,
                b: node,
                source: Source {
                    enabled: false,
                    ..Source::dc(0.0)
                },
            },
        )
        .map_err(|e| ScanError::InvalidPlan(e.to_string()))?;
    }
    let mut sim = Simulation::assemble(&net, first.dt)?;
    let mut monitored: Vec<Probe> = Vec::new();
    for p in plans {
        for ph in [Phase::A, Phase::B, Phase::C] {
            let probe = Probe::voltage(&format!("{}.{}", p.bus, ph.suffix()));
            if !monitored.contains(&probe) && net.find_node(&format!("{}.{}", p.bus, ph.suffix())).is_some() {
                monitored.push(probe);
            }
        }
    }
    for s in net.stations() {
        monitored.push(Probe::DcCurrent {
            station: s.name.clone(),
        });
    }
    let t_ss = run_to_steady_state(&mut sim, &monitored, steady)?;

    let probes: Vec<Probe> = plans.iter().flat_map(plan_probes).collect();
    let longest = plans
        .iter()
        .map(|p| p.settle + p.frequencies.iter().map(|&f| p.window(f)).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let mut base = sim.clone();
    let mut rec = base.recorder(&probes, 1)?;
    base.advance_to(t_ss + longest + 2.0 * first.dt, Some(&mut rec))?;
    let baseline = rec.finish(&base);

    plans
        .iter()
        .enumerate()
        .map(|(k, plan)| {
            let base_channels: Vec<&[f64]> = (0..3).map(|c| baseline.channels[3 * k + c].samples.as_slice()).collect();
            let measurements: Vec<PerturbationMeasurement> = plan
                .frequencies
                .par_iter()
                .map(|&f| measure(&sim, t_ss, plan, f, &baseline, &base_channels))
                .collect::<Result<_, _>>()?;
            let freqs: Vec<f64> = plan.frequencies.clone();
            let side = |name: &str, pick: fn(&PerturbationMeasurement) -> Complex64| {
                let mut c = ImpedanceCurve::new(
                    name,
                    freqs.clone(),
                    measurements.iter().map(|m| m.v / pick(m)).collect(),
                    Provenance::Perturbation,
                );
                c.accepted = measurements.iter().map(|m| m.accepted).collect();
                c
            };
            let pair = ImpedancePair {
                z1: side("Z1", |m| m.i1),
                z2: side("Z2", |m| m.i2),
            };
            Ok(ScanResult {
                plan: plan.name.clone(),
                steady_time: t_ss,
                measurements,
                pair,
            })
        })
        .collect()
}

fn measure(
    snapshot: &Simulation,
    t_ss: f64,
    plan: &ScanPlan,
    f: f64,
    baseline: &WaveformSet,
    base: &[&[f64]],
) -> Result<PerturbationMeasurement, ScanError> {
    let mut sim = snapshot.clone();
    sim.set_injection(
        &plan.injection_element(),
        Source {
            shape: Shape::Cosine {
                amplitude: plan.amplitude,
                frequency: f,
                phase: 0.0,
                t0: t_ss,
            },
            ramp_s: 0.0,
            // A smooth start avoids exciting the trapezoidal rule's
            // undamped alternation at inductive buses.
            onset_s: plan.settle / 3.0,
            enabled: true,
        },
    )?;
    let t_w = t_ss + plan.settle;
    sim.advance_to(t_w, None)?;
    let n_periods = plan.periods(f);
    let mut rec = sim.recorder(&plan_probes(plan), 1)?;
    sim.advance_to(t_w + n_periods as f64 / f + 2.0 * plan.dt, Some(&mut rec))?;
    let set = rec.finish(&sim);
    let offset = baseline.index_at(set.t0);
    let mut phasors = [Complex64::new(0.0, 0.0); 3];
    for c in 0..3 {
        let x = &set.channels[c].samples;
        let diff: Vec<f64> = x
            .iter()
            .zip(base[c].get(offset..).unwrap_or(&[]))
            .map(|(a, b)| a - b)
            .collect();
        phasors[c] = single_bin_dft(&diff, set.sample_period, set.t0, f, set.t0, n_periods)?;
    }
    let [v, i1, i2] = phasors;
    let injected = Complex64::from_polar(plan.amplitude, -2.0 * PI * (f * t_ss).fract());
    let residual = (injected - i1 - i2).norm() / injected.norm();
    let finite = [v, i1, i2].iter().all(|z| z.re.is_finite() && z.im.is_finite());
    let accepted = finite && residual < KCL_TOLERANCE && i1.norm() > 0.0 && i2.norm() > 0.0;
    let diagnostic = (!accepted).then(|| {
        if finite {
            format!("KCL residual {residual:.3e}")
        } else {
            "non-finite phasor".to_string()
        }
    });
    Ok(PerturbationMeasurement {
        frequency: f,
        v,
        i1,
        i2,
        injected,
        residual,
        accepted,
        diagnostic,
    })
}

/// Shape-preserving cubic (Fritsch-Carlson slopes) through `(x, y)`.
fn pchip(x: &[f64], y: &[f64], at: f64) -> f64 {
    let n = x.len();
    if n == 1 {
        return y[0];
    }
    let k = x.partition_point(|&v| v <= at).clamp(1, n - 1) - 1;
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let slope = |i: usize| -> f64 {
        if n == 2 {
            return delta[0];
        }
        if i == 0 || i == n - 1 {
            let (d0, d1, h0, h1) = if i == 0 {
                (delta[0], delta[1], h[0], h[1])
            } else {
                (delta[n - 2], delta[n - 3], h[n - 2], h[n - 3])
            };
            let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
            if d.signum() != d0.signum() {
                0.0
            } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
                3.0 * d0
            } else {
                d
            }
        } else {
            let (d0, d1) = (delta[i - 1], delta[i]);
            if d0 * d1 <= 0.0 {
                0.0
            } else {
                let (w1, w2) = (2.0 * h[i] + h[i - 1], h[i] + 2.0 * h[i - 1]);
                (w1 + w2) / (w1 / d0 + w2 / d1)
            }
        }
    };
    let (m0, m1) = (slope(k), slope(k + 1));
    let t = (at - x[k]) / h[k];
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * y[k]
        + (t3 - 2.0 * t2 + t) * h[k] * m0
        + (-2.0 * t3 + 3.0 * t2) * y[k + 1]
        + (t3 - t2) * h[k] * m1
}

/// Unwraps a phase sequence in degrees so that successive values differ
/// by at most 180°.
pub fn unwrap_deg(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut shift = 0.0;
    for (k, &p) in phase.iter().enumerate() {
        if k > 0 {
            let prev = phase[k - 1];
            let d = p - prev;
            if d > 180.0 {
                shift -= 360.0;
            } else if d < -180.0 {
                shift += 360.0;
            }
        }
        out.push(p + shift);
    }
    out
}

fn wrap_deg(p: f64) -> f64 {
    let w = (p + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Monotone cubic interpolation of log₁₀|Z| and unwrapped phase over
/// log frequency, using accepted points only.
pub fn interpolate(curve: &ImpedanceCurve, grid: &[f64]) -> Result<ImpedanceCurve, ScanError> {
    let src = curve.accepted_only();
    let (Some(&lo), Some(&hi)) = (src.frequencies.first(), src.frequencies.last()) else {
        return Err(ScanError::Extrapolation(grid.first().copied().unwrap_or(f64::NAN)));
    };
    if let Some(&f) = grid.iter().find(|&&f| f < lo * (1.0 - 1e-12) || f > hi * (1.0 + 1e-12)) {
        return Err(ScanError::Extrapolation(f));
    }
    let x: Vec<f64> = src.frequencies.iter().map(|f| f.ln()).collect();
    let mag: Vec<f64> = src.values.iter().map(|z| z.norm().log10()).collect();
    let ph = unwrap_deg(&src.phases_deg());
    let values = grid
        .iter()
        .map(|&f| {
            let at = f.ln().clamp(x[0], x[x.len() - 1]);
            let m = 10f64.powf(pchip(&x, &mag, at));
            let p = wrap_deg(pchip(&x, &ph, at));
            Complex64::from_polar(m, p.to_radians())
        })
        .collect();
    Ok(ImpedanceCurve::new(&curve.side, grid.to_vec(), values, Provenance::Interpolated))
}

/// Elements of `network` on one side of a three-phase bus: those of the
/// listed groups incident to the bus plus everything reachable from them
/// without crossing the bus.
pub fn side_subsystem(network: &Network, node: &str, groups: &[String]) -> Result<Network, ScanError> {
    let bus = network
        .find_node(node)
        .ok_or_else(|| ScanError::UnknownBus(node.to_string()))?;
    Ok(network.subsystem(bus, |e| groups.contains(&e.group)))
}

/// Driving-point impedance at `bus` of a linear passive network from its
/// complex nodal admittance matrix.
pub fn direct_scan(network: &Network, bus: &str, frequencies: &[f64]) -> Result<ImpedanceCurve, ScanError> {
    if let Some(s) = network.stations().first() {
        return Err(ScanError::UnsupportedElement(s.name.clone()));
    }
    let bus_node = network
        .find_node(bus)
        .ok_or_else(|| ScanError::UnknownBus(bus.to_string()))?;
    // Compact numbering of nodes touched by elements.
    let mut index = vec![usize::MAX; network.node_count()];
    let mut names = Vec::new();
    let mut touch = |n: Node, index: &mut Vec<usize>| {
        if let Some(i) = n.index() {
            if index[i] == usize::MAX {
                index[i] = names.len();
                names.push(network.node_name(n).to_string());
            }
        }
    };
    for e in network.elements() {
        for t in e.kind.terminals() {
            touch(t, &mut index);
        }
    }
    let singular = |f: f64| ScanError::Singular {
        frequency: f,
        node: bus.to_string(),
    };
    let Some(bus_idx) = bus_node.index().map(|i| index[i]).filter(|&i| i != usize::MAX) else {
        return Err(singular(frequencies.first().copied().unwrap_or(0.0)));
    };
    let n = names.len();
    let id = |node: Node| node.index().map(|i| index[i]);

    let mut edges = Vec::new();
    for e in network.elements() {
        let t: Vec<usize> = e.kind.terminals().into_iter().filter_map(id).collect();
        for a in 0..t.len() {
            for b in a + 1..t.len() {
                edges.push((t[a], t[b]));
            }
        }
    }
    let ordering = Ordering::reverse_cuthill_mckee(n, &edges);

    let values = frequencies
        .iter()
        .map(|&f| {
            let w = 2.0 * PI * f;
            let mut trip: Vec<(usize, usize, Complex64)> = Vec::new();
            let mut stamp = |terms: &[(Node, f64)], y: Complex64| {
                for (x, &(na, ca)) in terms.iter().enumerate() {
                    let Some(a) = id(na) else { continue };
                    for &(nb, cb) in &terms[x..] {
                        let Some(b) = id(nb) else { continue };
                        trip.push((a, b, y * ca * cb));
                    }
                }
            };
            let two = |a: Node, b: Node| [(a, 1.0), (b, -1.0)];
            let rl = |r: f64, l: f64| Complex64::new(r, w * l).inv();
            for e in network.elements() {
                match &e.kind {
                    ElementKind::Resistor { a, b, r } => stamp(&two(*a, *b), Complex64::new(1.0 / r, 0.0)),
                    ElementKind::RlBranch { a, b, r, l } | ElementKind::RlSource { a, b, r, l, .. } => {
                        stamp(&two(*a, *b), rl(*r, *l))
                    }
                    ElementKind::Capacitor { a, b, c } => stamp(&two(*a, *b), Complex64::new(0.0, w * c)),
                    ElementKind::Switch { a, b, r_closed, closed } => {
                        if *closed {
                            stamp(&two(*a, *b), Complex64::new(1.0 / r_closed, 0.0))
                        }
                    }
                    ElementKind::CurrentSource { .. } => {}
                    ElementKind::Transformer(t) => {
                        let inv = 1.0 / t.ratio;
                        stamp(
                            &[(t.primary.0, inv), (t.primary.1, -inv), (t.secondary.0, -1.0), (t.secondary.1, 1.0)],
                            rl(t.r, t.l),
                        );
                        if let Some(m) = &t.magnetizing {
                            stamp(&two(t.primary.0, t.primary.1), rl(0.0, m.slope_inductance(0)));
                        }
                    }
                }
            }
            let ldl = EnvelopeLdl::factor(n, &trip, &ordering, 1e-12).map_err(|e| match e {
                LinalgError::Singular { index } => ScanError::Singular {
                    frequency: f,
                    node: names[index].clone(),
                },
            })?;
            let mut rhs = vec![Complex64::new(0.0, 0.0); n];
            rhs[bus_idx] = Complex64::new(1.0, 0.0);
            let mut work = Vec::new();
            ldl.solve_in_place(&mut rhs, &mut work);
            let z = rhs[bus_idx];
            if z.re.is_finite() && z.im.is_finite() {
                Ok(z)
            } else {
                Err(singular(f))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ImpedanceCurve::new("Z1", frequencies.to_vec(), values, Provenance::DirectScan))
}
