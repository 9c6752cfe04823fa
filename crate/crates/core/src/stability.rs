//! Impedance-based resonance screening: passivity intervals, magnitude
//! intersections with phase margins, the Nyquist band screen and the
//! cable-length / short-circuit-capacity sensitivity grid.

use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{build_network, scan_point, StudyParams};
use crate::error::Error;
use crate::scan::{
    default_amplitude, scan_points, uniform_grid, unwrap_deg, ImpedanceCurve, ImpedancePair, ScanPlan, ScanResult,
    SteadyStateOptions,
};

/// Maximal runs of grid points where |phase| > 90°, as `(first, last)` Hz.
pub fn passivity_intervals(curve: &ImpedanceCurve) -> Vec<(f64, f64)> {
    let phase = curve.phases_deg();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for k in 0..=phase.len() {
        let active = k < phase.len() && phase[k].abs() > 90.0;
        match (active, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push((curve.frequencies[s], curve.frequencies[k - 1]));
                start = None;
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionRecord {
    pub frequency: f64,
    /// |Z| at the intersection (Ω).
    pub magnitude: f64,
    /// phase(Z₁) − phase(Z₂) wrapped to [0°, 360°).
    pub delta_phi: f64,
    /// 180° − min(Δφ, 360° − Δφ).
    pub phase_margin: f64,
    pub flagged: bool,
    /// Touch without crossing (even multiplicity).
    pub tangency: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenOptions {
    /// Upper frequency limit of the screen (Hz).
    pub cap: f64,
    /// Relative magnitude band around an intersection.
    pub eps_z: f64,
    /// Phase separation within this many degrees of 180° counts as reaching it.
    pub phase_tol_deg: f64,
}

impl Default for ScreenOptions {
    fn default() -> Self {
        Self {
            cap: 700.0,
            eps_z: 0.05,
            phase_tol_deg: 1.0,
        }
    }
}

/// Log-magnitude difference and unwrapped phase difference on the grid.
struct Profiles {
    f: Vec<f64>,
    m: Vec<f64>,
    dphi: Vec<f64>,
    mag1: Vec<f64>,
}

fn profiles(pair: &ImpedancePair) -> Profiles {
    let mag1 = pair.z1.magnitudes();
    let mag2 = pair.z2.magnitudes();
    let p1 = unwrap_deg(&pair.z1.phases_deg());
    let p2 = unwrap_deg(&pair.z2.phases_deg());
    Profiles {
        f: pair.z1.frequencies.clone(),
        m: mag1.iter().zip(&mag2).map(|(a, b)| a.ln() - b.ln()).collect(),
        dphi: p1.iter().zip(&p2).map(|(a, b)| a - b).collect(),
        mag1,
    }
}

fn wrap360(x: f64) -> f64 {
    let w = x.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

fn separation(delta_phi: f64) -> f64 {
    let w = wrap360(delta_phi);
    w.min(360.0 - w)
}

fn lerp(x0: f64, x1: f64, y0: f64, y1: f64, x: f64) -> f64 {
    if x1 == x0 {
        y0
    } else {
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

fn record(p: &Profiles, k: usize, f: f64, tol: f64, tangency: bool) -> IntersectionRecord {
    let j = (k + 1).min(p.f.len() - 1);
    let dphi = lerp(p.f[k], p.f[j], p.dphi[k], p.dphi[j], f);
    let magnitude = lerp(p.f[k], p.f[j], p.mag1[k].ln(), p.mag1[j].ln(), f).exp();
    let sep = separation(dphi);
    IntersectionRecord {
        frequency: f,
        magnitude,
        delta_phi: wrap360(dphi),
        phase_margin: 180.0 - sep,
        flagged: sep >= 180.0 - tol,
        tangency,
    }
}

/// Zero crossings of `ln|Z₁| − ln|Z₂|` located by linear inverse
/// interpolation, plus touch points reported as tangencies.
pub fn find_intersections(pair: &ImpedancePair, phase_tol_deg: f64) -> Vec<IntersectionRecord> {
    let p = profiles(pair);
    let n = p.f.len();
    let mut out = Vec::new();
    for k in 0..n {
        let m0 = p.m[k];
        if m0 == 0.0 {
            let left = if k > 0 { p.m[k - 1] } else { 0.0 };
            let right = if k + 1 < n { p.m[k + 1] } else { 0.0 };
            let touch = left * right > 0.0;
            out.push(record(&p, k, p.f[k], phase_tol_deg, touch));
            continue;
        }
        if k + 1 < n {
            let m1 = p.m[k + 1];
            if m0 * m1 < 0.0 {
                let f = p.f[k] + (p.f[k + 1] - p.f[k]) * m0 / (m0 - m1);
                out.push(record(&p, k, f, phase_tol_deg, false));
                continue;
            }
        }
        // A local minimum of |m| without sign change whose parabolic vertex
        // reaches zero is a touch.
        if k > 0 && k + 1 < n {
            let (a, b, c) = (p.m[k - 1], m0, p.m[k + 1]);
            if a * b > 0.0 && b * c > 0.0 && b.abs() < a.abs() && b.abs() <= c.abs() {
                let h = p.f[k + 1] - p.f[k];
                let curv = a - 2.0 * b + c;
                if curv != 0.0 {
                    let shift = 0.5 * (a - c) / curv;
                    let vertex = b - 0.25 * (a - c) * shift;
                    if vertex.abs() <= 1e-9 * (1.0 + b.abs()) || vertex * b <= 0.0 {
                        out.push(record(&p, k, p.f[k] + shift * h, phase_tol_deg, true));
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigLabel {
    pub cable_km: f64,
    pub scc1_gva: f64,
    pub scc2_gva: f64,
    pub point: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub label: Option<ConfigLabel>,
    pub options: ScreenOptions,
    pub passivity_z1: Vec<(f64, f64)>,
    pub passivity_z2: Vec<(f64, f64)>,
    pub intersections: Vec<IntersectionRecord>,
    /// Disjoint, sorted `(start, end)` Hz ranges.
    pub flagged: Vec<(f64, f64)>,
}

impl StabilityReport {
    pub fn is_stable(&self) -> bool {
        self.flagged.is_empty()
    }

    /// Smallest phase margin among intersections below the cap.
    pub fn min_phase_margin(&self) -> Option<&IntersectionRecord> {
        self.intersections
            .iter()
            .filter(|r| r.frequency <= self.options.cap)
            .min_by(|a, b| a.phase_margin.total_cmp(&b.phase_margin))
    }

    /// Centre of the lowest flagged range, or else the lowest intersection
    /// whose phase margin is at most `near_margin_deg`.
    pub fn candidate(&self, near_margin_deg: f64) -> Option<f64> {
        if let Some(&(a, b)) = self.flagged.first() {
            return Some(0.5 * (a + b));
        }
        self.intersections
            .iter()
            .filter(|r| !r.tangency && r.phase_margin <= near_margin_deg)
            .map(|r| r.frequency)
            .next()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(l) = &self.label {
            let _ = writeln!(
                out,
                "{} | cable {} km | SCC1 {} GVA | SCC2 {} GVA",
                l.point, l.cable_km, l.scc1_gva, l.scc2_gva
            );
        }
        let _ = writeln!(
            out,
            "cap {} Hz | band {:.1} % | phase tolerance {} deg",
            self.options.cap,
            100.0 * self.options.eps_z,
            self.options.phase_tol_deg
        );
        let _ = writeln!(out, "{:>12} {:>12} {:>10} {:>10} {:>8}", "f_hz", "|Z|_ohm", "dphi_deg", "margin", "flag");
        for r in &self.intersections {
            let _ = writeln!(
                out,
                "{:>12.3} {:>12.3} {:>10.2} {:>10.2} {:>8}",
                r.frequency,
                r.magnitude,
                r.delta_phi,
                r.phase_margin,
                if r.flagged {
                    "yes"
                } else if r.tangency {
                    "touch"
                } else {
                    "no"
                }
            );
        }
        let _ = writeln!(out, "flagged: {}", format_ranges(&self.flagged));
        out
    }
}

/// `"86 – 91 Hz, ..."` or `"X"` when nothing is flagged.
pub fn format_ranges(ranges: &[(f64, f64)]) -> String {
    if ranges.is_empty() {
        return "X".to_string();
    }
    ranges
        .iter()
        .map(|&(a, b)| {
            if (b - a).abs() < 0.05 {
                format!("{a:.1} Hz")
            } else {
                format!("{a:.1} - {b:.1} Hz")
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Sub-interval of `[0, 1]` where the linear function `y0 + t (y1 - y0)`
/// lies in `[lo, hi]`.
fn linear_band(y0: f64, y1: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let d = y1 - y0;
    if d == 0.0 {
        return (y0 >= lo && y0 <= hi).then_some((0.0, 1.0));
    }
    let (ta, tb) = ((lo - y0) / d, (hi - y0) / d);
    let (a, b) = if ta <= tb { (ta, tb) } else { (tb, ta) };
    let (a, b) = (a.max(0.0), b.min(1.0));
    (a <= b).then_some((a, b))
}

/// Flags frequencies where the magnitudes are within the `eps_z` band and
/// the wrapped phase separation reaches 180° (within tolerance). Both
/// criteria are evaluated on the piecewise-linear interpolant of
/// `ln|Z₁/Z₂|` and the unwrapped phase difference between grid points,
/// so range endpoints are exact for that interpolant.
pub fn nyquist_screen(pair: &ImpedancePair, options: &ScreenOptions) -> StabilityReport {
    let p = profiles(pair);
    let band = (1.0 + options.eps_z).ln();
    let mut pieces: Vec<(f64, f64)> = Vec::new();
    for k in 0..p.f.len().saturating_sub(1) {
        let (f0, f1) = (p.f[k], p.f[k + 1]);
        if f0 > options.cap {
            break;
        }
        let Some((a, b)) = linear_band(p.m[k], p.m[k + 1], -band, band) else {
            continue;
        };
        // Phase windows [180 - tol, 180 + tol] + 360 j met by the segment.
        let (d0, d1) = (p.dphi[k], p.dphi[k + 1]);
        let lo = d0.min(d1) - 180.0 - options.phase_tol_deg;
        let hi = d0.max(d1) - 180.0 + options.phase_tol_deg;
        let j_min = (lo / 360.0).floor() as i64;
        let j_max = (hi / 360.0).ceil() as i64;
        for j in j_min..=j_max {
            let centre = 180.0 + 360.0 * j as f64;
            let Some((c, d)) = linear_band(d0, d1, centre - options.phase_tol_deg, centre + options.phase_tol_deg)
            else {
                continue;
            };
            let (s, e) = (a.max(c), b.min(d));
            if s <= e {
                let fs = f0 + s * (f1 - f0);
                let fe = (f0 + e * (f1 - f0)).min(options.cap);
                if fs <= fe {
                    pieces.push((fs, fe));
                }
            }
        }
    }
    pieces.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut flagged: Vec<(f64, f64)> = Vec::new();
    for (s, e) in pieces {
        match flagged.last_mut() {
            Some(last) if s <= last.1 + 1e-12 => last.1 = last.1.max(e),
            _ => flagged.push((s, e)),
        }
    }
    StabilityReport {
        label: None,
        options: *options,
        passivity_z1: passivity_intervals(&pair.z1),
        passivity_z2: passivity_intervals(&pair.z2),
        intersections: find_intersections(pair, options.phase_tol_deg)
            .into_iter()
            .filter(|r| r.frequency <= options.cap)
            .collect(),
        flagged,
    }
}

/// Direct evaluation of the screen criterion at `f` on the same
/// interpolant (used for cross-checks).
pub fn flagged_at(pair: &ImpedancePair, options: &ScreenOptions, f: f64) -> bool {
    if f > options.cap {
        return false;
    }
    let p = profiles(pair);
    let k = match p.f.iter().position(|&x| x >= f) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => return false,
    };
    let j = (k + 1).min(p.f.len() - 1);
    if f < p.f[0] {
        return false;
    }
    let m = lerp(p.f[k], p.f[j], p.m[k], p.m[j], f);
    let d = lerp(p.f[k], p.f[j], p.dphi[k], p.dphi[j], f);
    m.abs() <= (1.0 + options.eps_z).ln() && separation(d) >= 180.0 - options.phase_tol_deg
}

/// Nyquist-locus points `Z₂/Z₁` as CSV.
pub fn nyquist_csv(pair: &ImpedancePair) -> String {
    let mut out = String::from("frequency_hz,re,im\n");
    for (k, f) in pair.z1.frequencies.iter().enumerate() {
        let r: Complex64 = pair.z2.values[k] / pair.z1.values[k];
        let _ = writeln!(out, "{f},{:.9e},{:.9e}", r.re, r.im);
    }
    out
}

/// Scan settings shared by every cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSettings {
    pub frequencies: Vec<f64>,
    pub dt: f64,
    /// Injected peak current (A); `None` selects 1 % of rated current.
    pub amplitude: Option<f64>,
    pub settle: f64,
    pub min_periods: usize,
    pub min_window: f64,
    pub steady_state: SteadyStateOptions,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self {
            frequencies: crate::scan::default_frequencies(),
            dt: 10e-6,
            amplitude: None,
            settle: 0.3,
            min_periods: 10,
            min_window: 0.2,
            steady_state: SteadyStateOptions::default(),
        }
    }
}

impl ScanSettings {
    pub fn plan(&self, point: &str, params: &StudyParams) -> Result<ScanPlan, Error> {
        let sp = scan_point(point).ok_or_else(|| crate::error::ScanError::UnknownBus(point.to_string()))?;
        let amp = self
            .amplitude
            .unwrap_or_else(|| default_amplitude(params.station1.rated_power_mva, params.ac_voltage_kv));
        Ok(ScanPlan {
            frequencies: self.frequencies.clone(),
            dt: self.dt,
            settle: self.settle,
            min_periods: self.min_periods,
            min_window: self.min_window,
            ..ScanPlan::for_point(&sp, amp)
        })
    }
}

/// Uniform 1 Hz grid covering the accepted points of a scan, up to `cap`.
pub fn screen_grid(result: &ScanResult, cap: f64) -> Vec<f64> {
    let ok: Vec<f64> = result
        .pair
        .z1
        .frequencies
        .iter()
        .zip(result.pair.z1.accepted.iter().zip(&result.pair.z2.accepted))
        .filter(|(_, (a, b))| **a && **b)
        .map(|(f, _)| *f)
        .collect();
    match (ok.first(), ok.last()) {
        (Some(&lo), Some(&hi)) => uniform_grid(lo.ceil(), hi.min(cap.max(lo)).floor(), 1.0),
        _ => Vec::new(),
    }
}

/// Screens a scan result on its uniform 1 Hz grid.
pub fn screen_scan(result: &ScanResult, options: &ScreenOptions) -> Result<(ImpedancePair, StabilityReport), Error> {
    let grid = screen_grid(result, options.cap);
    let pair = result.pair.interpolate(&grid)?;
    let report = nyquist_screen(&pair, options);
    Ok((pair, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub cable_km: Vec<f64>,
    pub scc1_gva: Vec<f64>,
    pub points: Vec<String>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            cable_km: vec![160.0, 80.0, 40.0],
            scc1_gva: vec![10.0, 4.7],
            points: vec!["point1".into(), "point2".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CellOutcome {
    Screened {
        report: StabilityReport,
        pair: ImpedancePair,
        rejected_points: usize,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub cable_km: f64,
    pub scc1_gva: f64,
    pub point: String,
    pub outcome: CellOutcome,
}

impl SweepCell {
    pub fn report(&self) -> Option<&StabilityReport> {
        match &self.outcome {
            CellOutcome::Screened { report, .. } => Some(report),
            CellOutcome::Failed { .. } => None,
        }
    }

    pub fn summary(&self) -> String {
        match &self.outcome {
            CellOutcome::Screened { report, .. } => format_ranges(&report.flagged),
            CellOutcome::Failed { error } => format!("failed: {error}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub axes: SweepAxes,
    /// Row-major over (cable length, SCC₁), then scan point.
    pub cells: Vec<SweepCell>,
}

impl SensitivityTable {
    pub fn cell(&self, cable_km: f64, scc1_gva: f64, point: &str) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.cable_km == cable_km && c.scc1_gva == scc1_gva && c.point == point)
    }

    /// One row per (length, SCC₁), one column per point.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:>10} {:>10}", "cable_km", "scc1_gva");
        for p in &self.axes.points {
            let _ = write!(out, " | {p:>24}");
        }
        out.push('\n');
        for &l in &self.axes.cable_km {
            for &s in &self.axes.scc1_gva {
                let _ = write!(out, "{l:>10} {s:>10}");
                for p in &self.axes.points {
                    let text = self.cell(l, s, p).map(SweepCell::summary).unwrap_or_default();
                    let _ = write!(out, " | {text:>24}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cable_km,scc1_gva,point,status,flagged_ranges,min_phase_margin_deg,min_margin_hz\n");
        for c in &self.cells {
            let (status, margin, at) = match c.report().and_then(|r| r.min_phase_margin()) {
                Some(r) => ("screened", format!("{:.3}", r.phase_margin), format!("{:.3}", r.frequency)),
                None if c.report().is_some() => ("screened", String::new(), String::new()),
                None => ("failed", String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},\"{}\",{},{}",
                c.cable_km,
                c.scc1_gva,
                c.point,
                status,
                c.summary(),
                margin,
                at
            );
        }
        out
    }
}

fn cell_params(base: &StudyParams, cable_km: f64, scc1_gva: f64) -> StudyParams {
    StudyParams {
        ac_cable_length_km: cable_km,
        scc1_gva,
        ..base.clone()
    }
}

fn run_cell(
    base: &StudyParams,
    cable_km: f64,
    scc1_gva: f64,
    points: &[String],
    settings: &ScanSettings,
    screen: &ScreenOptions,
) -> Vec<SweepCell> {
    let params = cell_params(base, cable_km, scc1_gva);
    let fail = |e: String| {
        points
            .iter()
            .map(|p| SweepCell {
                cable_km,
                scc1_gva,
                point: p.clone(),
                outcome: CellOutcome::Failed { error: e.clone() },
            })
            .collect::<Vec<_>>()
    };
    let plans: Result<Vec<ScanPlan>, Error> = points.iter().map(|p| settings.plan(p, &params)).collect();
    let results = plans.and_then(|plans| {
        let net = build_network(&params)?;
        Ok(scan_points(&net, &plans, &settings.steady_state)?)
    });
    let results = match results {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    points
        .iter()
        .zip(results)
        .map(|(p, r)| {
            let outcome = match screen_scan(&r, screen) {
                Ok((pair, mut report)) => {
                    report.label = Some(ConfigLabel {
                        cable_km,
                        scc1_gva,
                        scc2_gva: params.scc2_gva,
                        point: p.clone(),
                    });
                    CellOutcome::Screened {
                        report,
                        pair,
                        rejected_points: r.rejected(),
                    }
                }
                Err(e) => CellOutcome::Failed { error: e.to_string() },
            };
            SweepCell {
                cable_km,
                scc1_gva,
                point: p.clone(),
                outcome,
            }
        })
        .collect()
}

/// Scans and screens every (cable length, SCC₁) combination at every
/// point. Cells run independently; a failing cell is recorded, not fatal.
pub fn sensitivity_grid(
    base: &StudyParams,
    axes: &SweepAxes,
    settings: &ScanSettings,
    screen: &ScreenOptions,
) -> SensitivityTable {
    let combos: Vec<(f64, f64)> = axes
        .cable_km
        .iter()
        .flat_map(|&l| axes.scc1_gva.iter().map(move |&s| (l, s)))
        .collect();
    let cells = combos
        .par_iter()
        .map(|&(l, s)| run_cell(base, l, s, &axes.points, settings, screen))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    SensitivityTable {
        axes: axes.clone(),
        cells,
    }
}
