//! Declarative studies: TOML scenario files, validation, staged execution
//! and result artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, DampingEstimate, DampingOptions, HarmonicPeak, Signal, Spectrum, Taper};
use crate::benchmark::{build_network, scan_point, StudyParams, PHASES};
use crate::emt::{Event, EventKind, ParameterChange, Probe, Simulation, WaveformSet, DEFAULT_FAULT_RESISTANCE};
use crate::error::ScenarioError;
use crate::network::Network;
use crate::scan::{scan_points, uniform_grid, ScanResult, SteadyStateOptions};
use crate::stability::{
    nyquist_csv, screen_scan, sensitivity_grid, CellOutcome, ScanSettings, ScreenOptions, SensitivityTable,
    StabilityReport, SweepAxes,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DT: f64 = 20e-6;
pub const DEFAULT_SCAN_DT: f64 = 10e-6;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_scan_dt() -> f64 {
    DEFAULT_SCAN_DT
}
fn one() -> usize {
    1
}
fn default_points() -> Vec<String> {
    vec!["point1".into(), "point2".into()]
}
fn default_frequencies() -> Vec<f64> {
    crate::scan::default_frequencies()
}
fn default_settle() -> f64 {
    0.3
}
fn default_min_periods() -> usize {
    10
}
fn default_min_window() -> f64 {
    0.2
}
fn default_steady_tolerance() -> f64 {
    1e-3
}
fn default_steady_cycles() -> usize {
    5
}
fn default_horizon() -> f64 {
    8.0
}
fn default_cap() -> f64 {
    700.0
}
fn default_eps() -> f64 {
    0.05
}
fn default_phase_tol() -> f64 {
    1.0
}
fn default_near_margin() -> f64 {
    30.0
}
fn default_length() -> f64 {
    0.5
}
fn default_threshold() -> f64 {
    0.01
}
fn default_half_bandwidth() -> f64 {
    10.0
}
fn default_floor() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_fault_resistance() -> f64 {
    DEFAULT_FAULT_RESISTANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    /// Time step of time-domain runs (s).
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    /// Length of the time-domain run (s); no run when absent.
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Keep every n-th solver step in the recorded waveforms.
    #[serde(default = "one")]
    pub record_every: usize,
    /// Directory for artifacts, relative to the scenario file.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub network: StudyParams,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    /// Recorded channels; empty selects the default set.
    #[serde(default)]
    pub probes: Vec<Probe>,
    #[serde(default)]
    pub scan: Option<ScanSection>,
    #[serde(default)]
    pub screen: ScreenSection,
    #[serde(default)]
    pub analyses: Analyses,
    #[serde(default)]
    pub sweep: Option<SweepAxes>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventType {
    FaultApply,
    FaultClear,
    BreakerOpen,
    Deblock,
    ImpedanceStep,
    ResistanceStep,
    PowerOrderStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub time_s: f64,
    /// Node, element, element group or station.
    pub target: String,
    pub kind: EventType,
    /// Fault resistance (Ω).
    #[serde(default = "default_fault_resistance")]
    pub resistance_ohm: f64,
    /// New series resistance (Ω) of an impedance or resistance step.
    #[serde(default)]
    pub r_ohm: Option<f64>,
    /// New series inductance (H) of an impedance step.
    #[serde(default)]
    pub l_h: Option<f64>,
    /// New active power order (MW).
    #[serde(default)]
    pub mw: Option<f64>,
}

impl EventSpec {
    pub fn to_event(&self) -> Result<Event, String> {
        let need = |v: Option<f64>, k: &str| v.ok_or_else(|| format!("`{k}` is required for {:?}", self.kind));
        let kind = match self.kind {
            EventType::FaultApply => EventKind::FaultApply {
                resistance: self.resistance_ohm,
            },
            EventType::FaultClear => EventKind::FaultClear,
            EventType::BreakerOpen => EventKind::BreakerOpen,
            EventType::Deblock => EventKind::Deblock,
            EventType::ImpedanceStep => EventKind::ParameterStep {
                change: ParameterChange::Impedance {
                    r: need(self.r_ohm, "r_ohm")?,
                    l: need(self.l_h, "l_h")?,
                },
            },
            EventType::ResistanceStep => EventKind::ParameterStep {
                change: ParameterChange::Resistance {
                    r: need(self.r_ohm, "r_ohm")?,
                },
            },
            EventType::PowerOrderStep => EventKind::ParameterStep {
                change: ParameterChange::PowerOrder { mw: need(self.mw, "mw")? },
            },
        };
        Ok(Event::new(self.time_s, self.target.clone(), kind))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start_hz: f64,
    pub end_hz: f64,
    pub step_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    #[serde(default = "default_points")]
    pub points: Vec<String>,
    #[serde(default = "default_frequencies")]
    pub frequencies_hz: Vec<f64>,
    /// Uniform grids appended to the frequency list and then cleared.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grids: Vec<GridSpec>,
    #[serde(default = "default_scan_dt")]
    pub dt_s: f64,
    /// Injected peak current (A); 1 % of rated current when absent.
    #[serde(default)]
    pub amplitude_a: Option<f64>,
    #[serde(default = "default_settle")]
    pub settle_s: f64,
    #[serde(default = "default_min_periods")]
    pub min_periods: usize,
    #[serde(default = "default_min_window")]
    pub min_window_s: f64,
    #[serde(default = "default_steady_tolerance")]
    pub steady_tolerance: f64,
    #[serde(default = "default_steady_cycles")]
    pub steady_cycles: usize,
    #[serde(default = "default_horizon")]
    pub steady_horizon_s: f64,
}

impl ScanSection {
    pub fn settings(&self) -> ScanSettings {
        ScanSettings {
            frequencies: self.frequencies_hz.clone(),
            dt: self.dt_s,
            amplitude: self.amplitude_a,
            settle: self.settle_s,
            min_periods: self.min_periods,
            min_window: self.min_window_s,
            steady_state: SteadyStateOptions {
                tolerance: self.steady_tolerance,
                cycles: self.steady_cycles,
                horizon: self.steady_horizon_s,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenSection {
    #[serde(default = "default_cap")]
    pub cap_hz: f64,
    #[serde(default = "default_eps")]
    pub eps_z: f64,
    #[serde(default = "default_phase_tol")]
    pub phase_tolerance_deg: f64,
    /// Intersections with at most this phase margin are resonance
    /// candidates when nothing is flagged.
    #[serde(default = "default_near_margin")]
    pub near_margin_deg: f64,
}

impl Default for ScreenSection {
    fn default() -> Self {
        Self {
            cap_hz: default_cap(),
            eps_z: default_eps(),
            phase_tolerance_deg: default_phase_tol(),
            near_margin_deg: default_near_margin(),
        }
    }
}

impl ScreenSection {
    pub fn options(&self) -> ScreenOptions {
        ScreenOptions {
            cap: self.cap_hz,
            eps_z: self.eps_z,
            phase_tol_deg: self.phase_tolerance_deg,
        }
    }
}

/// Where an analysis window starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowStart {
    /// Absolute start (s).
    #[serde(default)]
    pub start_s: Option<f64>,
    /// Marker label prefix (e.g. `"fault-clear"`); the window starts
    /// `offset_s` after the first matching marker.
    #[serde(default)]
    pub after: Option<String>,
    /// Offset after the marker (s); one fundamental cycle when absent.
    #[serde(default)]
    pub offset_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaperSpec {
    Rectangular,
    RaisedCosine,
}

impl From<TaperSpec> for Taper {
    fn from(t: TaperSpec) -> Self {
        match t {
            TaperSpec::Rectangular => Taper::Rectangular,
            TaperSpec::RaisedCosine => Taper::RaisedCosine,
        }
    }
}

fn default_taper() -> TaperSpec {
    TaperSpec::Rectangular
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSpec {
    pub name: String,
    pub channel: String,
    #[serde(flatten)]
    pub window: WindowStart,
    #[serde(default = "default_length")]
    pub length_s: f64,
    #[serde(default = "default_taper")]
    pub taper: TaperSpec,
    /// Peak detection threshold as a fraction of the largest amplitude.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingSpec {
    pub name: String,
    pub channel: String,
    #[serde(flatten)]
    pub window: WindowStart,
    /// Fixed centre frequency (Hz).
    #[serde(default)]
    pub frequency_hz: Option<f64>,
    /// Use the resonance candidate of this scan point's screen.
    #[serde(default)]
    pub from_screen: Option<String>,
    /// Use the largest non-fundamental peak of this spectrum.
    #[serde(default)]
    pub from_spectrum: Option<String>,
    #[serde(default = "default_half_bandwidth")]
    pub half_bandwidth_hz: f64,
    #[serde(default = "default_true")]
    pub reject_fundamental: bool,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Analyses {
    #[serde(default)]
    pub spectra: Vec<SpectrumSpec>,
    #[serde(default)]
    pub damping: Vec<DampingSpec>,
}

impl Analyses {
    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty() && self.damping.is_empty()
    }
}

/// Probes recorded when the scenario lists none.
pub fn default_probes() -> Vec<Probe> {
    let mut p: Vec<Probe> = ["p1", "p2"]
        .iter()
        .flat_map(|bus| PHASES.iter().map(move |ph| Probe::voltage(&format!("{bus}.{ph}"))))
        .collect();
    for st in ["mmc1", "mmc2"] {
        p.push(Probe::DcVoltage { station: st.into() });
        p.push(Probe::DcCurrent { station: st.into() });
        p.push(Probe::ActivePower { station: st.into() });
    }
    p
}

fn semantic(key: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Semantic {
        key: key.into(),
        reason: reason.into(),
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.chars().rev().take_while(|&c| c != '\n').count() + 1;
    (line, column)
}

impl Scenario {
    /// Parses, applies defaults and validates.
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let parse_error = |e: toml::de::Error| {
            let (line, column) = e.span().map_or((0, 0), |r| line_column(text, r.start));
            ScenarioError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        };
        // The typed pass reports positions; the merged pass layers partial
        // station tables over the study defaults instead of the bare
        // converter defaults.
        let _: Scenario = toml::from_str(text).map_err(parse_error)?;
        let mut doc: toml::Table = text.parse().map_err(parse_error)?;
        let defaults = toml::Value::try_from(StudyParams::default()).map_err(|e| semantic("network", e.to_string()))?;
        let mut network = defaults;
        if let Some(user) = doc.remove("network") {
            merge(&mut network, user);
        }
        doc.insert("network".into(), network);
        let mut s: Scenario = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| semantic("network", e.message().to_string()))?;
        s.resolve();
        s.validate()?;
        Ok(s)
    }

    fn resolve(&mut self) {
        if self.probes.is_empty() {
            self.probes = default_probes();
        }
        if let Some(scan) = &mut self.scan {
            for g in std::mem::take(&mut scan.grids) {
                scan.frequencies_hz.extend(uniform_grid(g.start_hz, g.end_hz, g.step_hz));
            }
            scan.frequencies_hz.sort_by(f64::total_cmp);
            scan.frequencies_hz.dedup();
        }
        let f_nom = self.network.frequency_hz;
        for w in self
            .analyses
            .spectra
            .iter_mut()
            .map(|s| &mut s.window)
            .chain(self.analyses.damping.iter_mut().map(|d| &mut d.window))
        {
            if w.after.is_some() && w.offset_s.is_none() {
                w.offset_s = Some(1.0 / f_nom);
            }
        }
    }

    /// Overrides the time step of runs and scans.
    pub fn override_dt(&mut self, dt: f64) -> Result<(), ScenarioError> {
        self.dt_s = dt;
        if let Some(scan) = &mut self.scan {
            scan.dt_s = dt;
        }
        self.validate()
    }

    pub fn network(&self) -> Result<Network, ScenarioError> {
        build_network(&self.network).map_err(|e| semantic("network", e.to_string()))
    }

    pub fn events(&self) -> Result<Vec<Event>, ScenarioError> {
        let mut ev: Vec<Event> = self
            .events
            .iter()
            .enumerate()
            .map(|(k, e)| e.to_event().map_err(|r| semantic(format!("events[{k}]"), r)))
            .collect::<Result<_, _>>()?;
        ev.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(ev)
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.probes.iter().map(Probe::channel_name).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(semantic(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if !(self.dt_s > 0.0) {
            return Err(semantic("dt_s", "must be positive"));
        }
        if self.record_every == 0 {
            return Err(semantic("record_every", "must be at least 1"));
        }
        for (key, st) in [("network.station1", &self.network.station1), ("network.station2", &self.network.station2)] {
            st.validate().map_err(|r| semantic(key, r))?;
        }
        let net = self.network()?;
        if let Some(d) = self.duration_s {
            if !(d > 0.0) {
                return Err(semantic("duration_s", "must be positive"));
            }
        }
        for (k, e) in self.events.iter().enumerate() {
            match self.duration_s {
                None => return Err(semantic(format!("events[{k}]"), "events require `duration_s`")),
                Some(d) if !(e.time_s >= 0.0 && e.time_s < d) => {
                    return Err(semantic(
                        format!("events[{k}].time_s"),
                        format!("{} s lies outside [0, {d}) s", e.time_s),
                    ))
                }
                _ => {}
            }
        }
        let events = self.events()?;
        let mut sim = Simulation::assemble(&net, self.dt_s).map_err(|e| semantic("network", e.to_string()))?;
        sim.schedule(&events).map_err(|e| semantic("events", e.to_string()))?;
        sim.recorder(&self.probes, self.record_every)
            .map_err(|e| semantic("probes", e.to_string()))?;

        let channels = self.channel_names();
        let spectrum_names: Vec<&str> = self.analyses.spectra.iter().map(|s| s.name.as_str()).collect();
        let mut names = BTreeMap::new();
        for (k, s) in self.analyses.spectra.iter().enumerate() {
            let key = format!("analyses.spectra[{k}]");
            self.check_analysis(&key, &s.name, &s.channel, &s.window, &channels)?;
            if !(s.length_s > 0.0) || !(0.0..=1.0).contains(&s.threshold) {
                return Err(semantic(key, "length_s must be positive and threshold within [0, 1]"));
            }
            if names.insert(s.name.clone(), ()).is_some() {
                return Err(semantic(format!("{key}.name"), "duplicate analysis name"));
            }
        }
        for (k, d) in self.analyses.damping.iter().enumerate() {
            let key = format!("analyses.damping[{k}]");
            self.check_analysis(&key, &d.name, &d.channel, &d.window, &channels)?;
            if names.insert(d.name.clone(), ()).is_some() {
                return Err(semantic(format!("{key}.name"), "duplicate analysis name"));
            }
            let sources = [d.frequency_hz.is_some(), d.from_screen.is_some(), d.from_spectrum.is_some()];
            if sources.iter().filter(|&&x| x).count() != 1 {
                return Err(semantic(
                    key,
                    "exactly one of `frequency_hz`, `from_screen`, `from_spectrum` is required",
                ));
            }
            if let Some(p) = &d.from_screen {
                let scanned = self.scan.as_ref().is_some_and(|s| s.points.contains(p));
                if !scanned {
                    return Err(semantic(format!("{key}.from_screen"), format!("point `{p}` is not scanned")));
                }
            }
            if let Some(s) = &d.from_spectrum {
                if !spectrum_names.contains(&s.as_str()) {
                    return Err(semantic(format!("{key}.from_spectrum"), format!("no spectrum named `{s}`")));
                }
            }
            if !(d.half_bandwidth_hz > 0.0) {
                return Err(semantic(format!("{key}.half_bandwidth_hz"), "must be positive"));
            }
        }
        if let Some(scan) = &self.scan {
            self.check_scan(scan)?;
        }
        let sc = &self.screen;
        if !(sc.cap_hz > 0.0 && sc.eps_z >= 0.0 && sc.phase_tolerance_deg >= 0.0 && sc.near_margin_deg >= 0.0) {
            return Err(semantic("screen", "cap must be positive, tolerances non-negative"));
        }
        if let Some(ax) = &self.sweep {
            if ax.cable_km.is_empty() || ax.scc1_gva.is_empty() || ax.points.is_empty() {
                return Err(semantic("sweep", "every axis needs at least one value"));
            }
            if ax.cable_km.iter().chain(&ax.scc1_gva).any(|v| !(*v > 0.0)) {
                return Err(semantic("sweep", "axis values must be positive"));
            }
            for p in &ax.points {
                if scan_point(p).is_none() {
                    return Err(semantic("sweep.points", format!("unknown scan point `{p}`")));
                }
            }
            if self.scan.is_none() {
                return Err(semantic("sweep", "a sweep needs a [scan] section for its scan settings"));
            }
        }
        Ok(())
    }

    fn check_analysis(
        &self,
        key: &str,
        name: &str,
        channel: &str,
        w: &WindowStart,
        channels: &[String],
    ) -> Result<(), ScenarioError> {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(semantic(format!("{key}.name"), "use letters, digits, '-' or '_'"));
        }
        let Some(duration) = self.duration_s else {
            return Err(semantic(key, "analyses require `duration_s`"));
        };
        if !channels.iter().any(|c| c == channel) {
            return Err(semantic(format!("{key}.channel"), format!("`{channel}` is not a recorded channel")));
        }
        match (w.start_s, &w.after) {
            (Some(t), None) if t >= 0.0 && t < duration => Ok(()),
            (Some(_), None) => Err(semantic(format!("{key}.start_s"), "must lie within the run")),
            (None, Some(_)) => Ok(()),
            _ => Err(semantic(key, "exactly one of `start_s`, `after` is required")),
        }
    }

    fn check_scan(&self, scan: &ScanSection) -> Result<(), ScenarioError> {
        for p in &scan.points {
            if scan_point(p).is_none() {
                return Err(semantic("scan.points", format!("unknown scan point `{p}`")));
            }
        }
        if scan.frequencies_hz.is_empty() || scan.frequencies_hz.iter().any(|f| !(*f > 0.0)) {
            return Err(semantic("scan.frequencies_hz", "frequencies must be positive and non-empty"));
        }
        if !(scan.dt_s > 0.0) {
            return Err(semantic("scan.dt_s", "must be positive"));
        }
        for p in &scan.points {
            let plan = scan
                .settings()
                .plan(p, &self.network)
                .map_err(|e| semantic("scan", e.to_string()))?;
            plan.validate().map_err(|e| semantic("scan", e.to_string()))?;
        }
        Ok(())
    }

    /// Canonical JSON of the resolved scenario (defaults included, output
    /// directory excluded).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }

    /// SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_toml(&text)
}

/// Output directory named by a scenario file, relative to the file.
pub fn output_dir_for(path: &Path, scenario: &Scenario) -> Option<PathBuf> {
    let dir = scenario.output_dir.as_ref()?;
    Some(path.parent().unwrap_or(Path::new(".")).join(dir))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub run: bool,
    pub scan: bool,
    pub analyses: bool,
    pub sweep: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        run: true,
        scan: true,
        analyses: true,
        sweep: true,
    };
    pub const SCAN: Stages = Stages {
        run: false,
        scan: true,
        analyses: false,
        sweep: false,
    };
    pub const SWEEP: Stages = Stages {
        run: false,
        scan: false,
        analyses: false,
        sweep: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub kind: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub ok: bool,
    pub error: Option<String>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub tool_version: String,
    pub schema_version: u32,
    pub scenario_name: String,
    pub scenario_hash: String,
    /// Resolved scenario with every default applied.
    pub scenario: Scenario,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
}

impl ResultManifest {
    pub fn success(&self) -> bool {
        self.stages.iter().all(|s| s.ok)
    }

    pub fn failed_stages(&self) -> Vec<&StageRecord> {
        self.stages.iter().filter(|s| !s.ok).collect()
    }

    /// Manifest JSON with wall-clock fields zeroed.
    pub fn payload_json(&self) -> String {
        let mut m = self.clone();
        m.stages.iter_mut().for_each(|s| s.wall_clock_s = 0.0);
        serde_json::to_string_pretty(&m).unwrap_or_default()
    }

    pub fn artifact(&self, kind: &str) -> impl Iterator<Item = &Artifact> {
        let kind = kind.to_string();
        self.artifacts.iter().filter(move |a| a.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub name: String,
    pub channel: String,
    pub unit: String,
    pub window_start_s: f64,
    pub window_length_s: f64,
    pub peaks: Vec<HarmonicPeak>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DampingResult {
    pub name: String,
    pub channel: String,
    pub frequency_hz: f64,
    pub window_start_s: f64,
    pub tau_s: f64,
    pub growth_rate: f64,
    pub residual: f64,
    pub divergent: bool,
    /// Time after the envelope maximum until it stays below 5 % of it (s).
    pub time_to_5_percent_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenSummary {
    pub point: String,
    pub steady_time_s: f64,
    pub rejected_points: usize,
    pub flagged: Vec<(f64, f64)>,
    pub candidate_hz: Option<f64>,
}

/// Everything a study computes, embedded in `results.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyResults {
    pub screens: Vec<ScreenSummary>,
    pub spectra: Vec<SpectrumResult>,
    pub damping: Vec<DampingResult>,
    pub sweep_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub file: String,
    pub x: String,
    pub y: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<PlotSeries>,
}

/// In-memory outputs of a study, alongside the files written.
#[derive(Debug, Clone, Default)]
pub struct StudyOutput {
    pub waveforms: Option<WaveformSet>,
    pub scans: Vec<ScanResult>,
    pub reports: Vec<StabilityReport>,
    pub spectra: Vec<Spectrum>,
    pub damping: Vec<DampingEstimate>,
    pub sweep: Option<SensitivityTable>,
    pub results: StudyResults,
}

struct Writer {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
    plots: Vec<PlotSpec>,
}

impl Writer {
    fn write(&mut self, name: &str, kind: &str, bytes: &[u8]) -> Result<(), ScenarioError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            kind: kind.to_string(),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn plot(&mut self, title: &str, x_label: &str, y_label: &str, log_x: bool, series: Vec<PlotSeries>) {
        self.plots.push(PlotSpec {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x,
            series,
        });
    }
}

fn series(file: &str, x: &str, y: &str, label: &str) -> PlotSeries {
    PlotSeries {
        file: file.into(),
        x: x.into(),
        y: y.into(),
        label: label.into(),
    }
}

fn window_start(w: &WindowStart, set: &WaveformSet) -> Result<f64, String> {
    if let Some(t) = w.start_s {
        return Ok(t);
    }
    let label = w.after.as_deref().unwrap_or_default();
    set.markers
        .iter()
        .find(|m| m.label.starts_with(label))
        .map(|m| m.time + w.offset_s.unwrap_or(0.0))
        .ok_or_else(|| format!("no event marker matching `{label}`"))
}

fn largest_off_fundamental(peaks: &[HarmonicPeak], f_nom: f64) -> Option<f64> {
    peaks
        .iter()
        .filter(|p| (p.frequency - f_nom).abs() > 0.1 * f_nom)
        .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))
        .map(|p| p.frequency)
}

struct StageTimer<'a> {
    stages: &'a mut Vec<StageRecord>,
}

impl StageTimer<'_> {
    fn record<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T, String>) -> Option<T> {
        let t = Instant::now();
        let r = f();
        let (ok, error, value) = match r {
            Ok(v) => (true, None, Some(v)),
            Err(e) => (false, Some(e), None),
        };
        self.stages.push(StageRecord {
            name: name.to_string(),
            ok,
            error,
            wall_clock_s: t.elapsed().as_secs_f64(),
        });
        value
    }
}

/// Executes the selected stages of a validated scenario in order (runs,
/// scans and screens, analyses, sweep) and writes artifacts to `out`.
/// Stage failures are recorded in the manifest; only I/O failures abort.
pub fn run_study(scenario: &Scenario, out: &Path, stages: Stages) -> Result<(ResultManifest, StudyOutput), ScenarioError> {
    fs::create_dir_all(out).map_err(|source| ScenarioError::Io {
        path: out.display().to_string(),
        source,
    })?;
    let mut w = Writer {
        dir: out.to_path_buf(),
        artifacts: Vec::new(),
        plots: Vec::new(),
    };
    let mut records = Vec::new();
    let mut output = StudyOutput::default();
    let f_nom = scenario.network.frequency_hz;
    let mut pending: Vec<(String, String, Vec<u8>)> = Vec::new();

    {
        let mut timer = StageTimer { stages: &mut records };
        let validation = timer.record("validate", || {
            let net = scenario.network().map_err(|e| e.to_string())?;
            let record = serde_json::json!({
                "nodes": net.node_count(),
                "elements": net.elements().len(),
                "stations": net.stations().iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
                "isolated_nodes": net.isolated_nodes(),
            });
            Ok((net, serde_json::to_string_pretty(&record).unwrap_or_default()))
        });
        let Some((net, record)) = validation else {
            return finish(scenario, w, records, output);
        };
        w.write("network.json", "network-validation", record.as_bytes())?;

        if stages.run {
            if let Some(duration) = scenario.duration_s {
                let set = timer.record("run", || {
                    let events = scenario.events().map_err(|e| e.to_string())?;
                    let mut sim = Simulation::assemble(&net, scenario.dt_s).map_err(|e| e.to_string())?;
                    sim.schedule(&events).map_err(|e| e.to_string())?;
                    let mut rec = sim.recorder(&scenario.probes, scenario.record_every).map_err(|e| e.to_string())?;
                    sim.advance_to(duration, Some(&mut rec)).map_err(|e| e.to_string())?;
                    Ok(rec.finish(&sim))
                });
                if let Some(set) = set {
                    pending.push(("waveforms.csv".into(), "waveform-csv".into(), set.to_csv().into_bytes()));
                    pending.push(("waveforms.wfs".into(), "waveform-binary".into(), set.to_bytes()));
                    output.waveforms = Some(set);
                }
            }
        }

        if stages.scan {
            if let Some(scan) = &scenario.scan {
                let settings = scan.settings();
                let results = timer.record("scan", || {
                    let plans = scan
                        .points
                        .iter()
                        .map(|p| settings.plan(p, &scenario.network))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| e.to_string())?;
                    scan_points(&net, &plans, &settings.steady_state).map_err(|e| e.to_string())
                });
                if let Some(results) = results {
                    let opts = scenario.screen.options();
                    let mut screened = Vec::new();
                    let mut reports = Vec::new();
                    for (p, r) in scan.points.iter().zip(&results) {
                        pending.push((format!("impedance_{p}_z1.csv"), "impedance-csv".into(), r.pair.z1.to_csv().into_bytes()));
                        pending.push((format!("impedance_{p}_z2.csv"), "impedance-csv".into(), r.pair.z2.to_csv().into_bytes()));
                        let screen = timer.record(&format!("screen:{p}"), || {
                            screen_scan(r, &opts).map_err(|e| e.to_string())
                        });
                        if let Some((pair, mut report)) = screen {
                            report.label = Some(crate::stability::ConfigLabel {
                                cable_km: scenario.network.ac_cable_length_km,
                                scc1_gva: scenario.network.scc1_gva,
                                scc2_gva: scenario.network.scc2_gva,
                                point: p.clone(),
                            });
                            pending.push((format!("stability_{p}.json"), "stability-json".into(), report.to_json().into_bytes()));
                            pending.push((format!("stability_{p}.txt"), "stability-text".into(), report.to_text().into_bytes()));
                            pending.push((format!("nyquist_{p}.csv"), "nyquist-csv".into(), nyquist_csv(&pair).into_bytes()));
                            output.results.screens.push(ScreenSummary {
                                point: p.clone(),
                                steady_time_s: r.steady_time,
                                rejected_points: r.rejected(),
                                flagged: report.flagged.clone(),
                                candidate_hz: report.candidate(scenario.screen.near_margin_deg),
                            });
                            screened.push(p.clone());
                            reports.push(report);
                        }
                    }
                    for p in &scan.points {
                        w.plot(
                            &format!("Impedance magnitude at {p}"),
                            "frequency (Hz)",
                            "|Z| (ohm)",
                            true,
                            vec![
                                series(&format!("impedance_{p}_z1.csv"), "frequency_hz", "mag_ohm", "Z1"),
                                series(&format!("impedance_{p}_z2.csv"), "frequency_hz", "mag_ohm", "Z2"),
                            ],
                        );
                        w.plot(
                            &format!("Impedance phase at {p}"),
                            "frequency (Hz)",
                            "phase (deg)",
                            true,
                            vec![
                                series(&format!("impedance_{p}_z1.csv"), "frequency_hz", "phase_deg", "Z1"),
                                series(&format!("impedance_{p}_z2.csv"), "frequency_hz", "phase_deg", "Z2"),
                            ],
                        );
                    }
                    for p in &screened {
                        w.plot(
                            &format!("Nyquist locus Z2/Z1 at {p}"),
                            "real",
                            "imaginary",
                            false,
                            vec![series(&format!("nyquist_{p}.csv"), "re", "im", "Z2/Z1")],
                        );
                    }
                    output.scans = results;
                    output.reports = reports;
                }
            }
        }

        if stages.analyses && !scenario.analyses.is_empty() {
            let mut spectra_peaks: BTreeMap<String, Vec<HarmonicPeak>> = BTreeMap::new();
            for s in &scenario.analyses.spectra {
                let r = timer.record(&format!("spectrum:{}", s.name), || {
                    let set = output.waveforms.as_ref().ok_or("no waveform record")?;
                    let start = window_start(&s.window, set)?;
                    let spec = analysis::channel_spectrum(set, &s.channel, start, s.length_s, s.taper.into(), f_nom)
                        .map_err(|e| e.to_string())?;
                    let peaks = analysis::harmonic_peaks(&spec, s.threshold, f_nom);
                    Ok((spec, peaks))
                });
                if let Some((spec, peaks)) = r {
                    pending.push((format!("spectrum_{}.csv", s.name), "spectrum-csv".into(), spec.to_csv().into_bytes()));
                    pending.push((
                        format!("peaks_{}.csv", s.name),
                        "peak-table".into(),
                        analysis::peaks_csv(&peaks, &spec.unit).into_bytes(),
                    ));
                    w.plot(
                        &format!("Amplitude spectrum {}", s.name),
                        "frequency (Hz)",
                        &format!("peak amplitude ({})", spec.unit),
                        false,
                        vec![series(&format!("spectrum_{}.csv", s.name), "frequency_hz", "amplitude", &s.channel)],
                    );
                    output.results.spectra.push(SpectrumResult {
                        name: s.name.clone(),
                        channel: s.channel.clone(),
                        unit: spec.unit.clone(),
                        window_start_s: spec.start,
                        window_length_s: spec.length,
                        peaks: peaks.clone(),
                    });
                    spectra_peaks.insert(s.name.clone(), peaks);
                    output.spectra.push(spec);
                }
            }
            for d in &scenario.analyses.damping {
                let r = timer.record(&format!("damping:{}", d.name), || {
                    let set = output.waveforms.as_ref().ok_or("no waveform record")?;
                    let f0 = if let Some(f) = d.frequency_hz {
                        f
                    } else if let Some(p) = &d.from_screen {
                        output
                            .results
                            .screens
                            .iter()
                            .find(|s| &s.point == p)
                            .ok_or_else(|| format!("no screen result for `{p}`"))?
                            .candidate_hz
                            .ok_or_else(|| format!("screen at `{p}` has no resonance candidate"))?
                    } else {
                        let name = d.from_spectrum.as_deref().unwrap_or_default();
                        let peaks = spectra_peaks.get(name).ok_or_else(|| format!("spectrum `{name}` unavailable"))?;
                        largest_off_fundamental(peaks, f_nom)
                            .ok_or_else(|| format!("spectrum `{name}` has no non-fundamental peak"))?
                    };
                    let start = window_start(&d.window, set)?;
                    let signal = Signal::from_set(set, &d.channel).map_err(|e| e.to_string())?;
                    let opts = DampingOptions {
                        half_bandwidth: d.half_bandwidth_hz,
                        reject_fundamental: d.reject_fundamental.then_some(f_nom),
                        floor: d.floor,
                    };
                    let est = analysis::damping_estimate(signal, f0, start, &opts).map_err(|e| e.to_string())?;
                    Ok((est, start))
                });
                if let Some((est, start)) = r {
                    let env: String = std::iter::once("time_s,envelope\n".to_string())
                        .chain(est.envelope.iter().map(|(t, a)| format!("{t},{a:.9e}\n")))
                        .collect();
                    pending.push((format!("envelope_{}.csv", d.name), "damping-envelope".into(), env.into_bytes()));
                    w.plot(
                        &format!("Decay envelope {}", d.name),
                        "time (s)",
                        "envelope",
                        false,
                        vec![series(&format!("envelope_{}.csv", d.name), "time_s", "envelope", &d.channel)],
                    );
                    let peak_time = est
                        .envelope
                        .iter()
                        .max_by(|a, b| a.1.total_cmp(&b.1))
                        .map_or(start, |e| e.0);
                    output.results.damping.push(DampingResult {
                        name: d.name.clone(),
                        channel: d.channel.clone(),
                        frequency_hz: est.center,
                        window_start_s: start,
                        tau_s: est.tau,
                        growth_rate: est.growth_rate,
                        residual: est.residual,
                        divergent: est.divergent,
                        time_to_5_percent_s: est.time_below(0.05).map(|t| t - peak_time),
                    });
                    output.damping.push(est);
                }
            }
        }

        if stages.sweep {
            if let (Some(axes), Some(scan)) = (&scenario.sweep, &scenario.scan) {
                let table = timer.record("sweep", || {
                    let t = run_sweep(scenario, axes, &scan.settings());
                    let failed: Vec<String> = t
                        .cells
                        .iter()
                        .filter_map(|c| match &c.outcome {
                            CellOutcome::Failed { error } => {
                                Some(format!("{} km / {} GVA / {}: {error}", c.cable_km, c.scc1_gva, c.point))
                            }
                            _ => None,
                        })
                        .collect();
                    Ok((t, failed))
                });
                if let Some((table, failed)) = table {
                    pending.push(("sweep.txt".into(), "sweep-table".into(), table.to_text().into_bytes()));
                    pending.push(("sweep.csv".into(), "sweep-table".into(), table.to_csv().into_bytes()));
                    pending.push((
                        "sweep.json".into(),
                        "sweep-json".into(),
                        serde_json::to_string_pretty(&table).unwrap_or_default().into_bytes(),
                    ));
                    output.results.sweep_cells = table.cells.len();
                    if !failed.is_empty() {
                        timer.stages.push(StageRecord {
                            name: "sweep-cells".into(),
                            ok: false,
                            error: Some(failed.join("; ")),
                            wall_clock_s: 0.0,
                        });
                    }
                    output.sweep = Some(table);
                }
            }
        }
    }

    for (name, kind, bytes) in pending {
        w.write(&name, &kind, &bytes)?;
    }
    let results = serde_json::to_string_pretty(&output.results).unwrap_or_default();
    w.write("results.json", "results-json", results.as_bytes())?;
    finish(scenario, w, records, output)
}

fn finish(
    scenario: &Scenario,
    mut w: Writer,
    stages: Vec<StageRecord>,
    output: StudyOutput,
) -> Result<(ResultManifest, StudyOutput), ScenarioError> {
    if !w.plots.is_empty() {
        let plots = serde_json::to_string_pretty(&w.plots).unwrap_or_default();
        w.write("plots.json", "plot-manifest", plots.as_bytes())?;
    }
    let manifest = ResultManifest {
        tool_version: TOOL_VERSION.to_string(),
        schema_version: SCHEMA_VERSION,
        scenario_name: scenario.name.clone(),
        scenario_hash: scenario.hash(),
        scenario: scenario.clone(),
        stages,
        artifacts: w.artifacts.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).unwrap_or_default();
    let path = w.dir.join("manifest.json");
    fs::write(&path, json).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok((manifest, output))
}

/// Sensitivity grid over the scenario's network, scan and screen settings.
pub fn run_sweep(scenario: &Scenario, axes: &SweepAxes, settings: &ScanSettings) -> SensitivityTable {
    sensitivity_grid(&scenario.network, axes, settings, &scenario.screen.options())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\n";

    #[test]
    fn defaults_applied_and_hash_stable() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(s.dt_s, DEFAULT_DT);
        assert_eq!(s.network.ac_cable_length_km, 160.0);
        assert_eq!(s.network.station1.inner_current_control_time_constant_s, 0.01);
        assert!(!s.probes.is_empty());
        let explicit = Scenario::from_toml("schema_version = 1\ndt_s = 2e-5\n[network]\nscc1_gva = 10.0\n").unwrap();
        assert_eq!(s.hash(), explicit.hash());
        let other = Scenario::from_toml("schema_version = 1\ndt_s = 1e-5\n").unwrap();
        assert_ne!(s.hash(), other.hash());
        let moved = Scenario::from_toml("schema_version = 1\noutput_dir = \"elsewhere\"\n").unwrap();
        assert_eq!(s.hash(), moved.hash());
    }

    #[test]
    fn partial_station_table_keeps_study_defaults() {
        let s = Scenario::from_toml(
            "schema_version = 1\n[network.station1]\ninner_current_control_time_constant_s = 0.02\n",
        )
        .unwrap();
        let d = StudyParams::default();
        assert_eq!(s.network.station1.control_role, d.station1.control_role);
        assert_eq!(s.network.station1.control.active_power_mw, 1000.0);
        assert_eq!(s.network.station1.inner_current_control_time_constant_s, 0.02);
        assert_eq!(s.network.station2, d.station2);
    }

    #[test]
    fn parse_error_has_position() {
        let err = Scenario::from_toml("schema_version = 1\n[network]\nscc1_gva = = 3\n").unwrap_err();
        match err {
            ScenarioError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 1);
            }
            e => panic!("{e}"),
        }
        let err = Scenario::from_toml("schema_version = 1\n[network]\nscc_one = 3\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let key = |text: &str| match Scenario::from_toml(text).unwrap_err() {
            ScenarioError::Semantic { key, .. } => key,
            e => panic!("{e}"),
        };
        let ev = "schema_version = 1\nduration_s = 1.0\n[[events]]\ntime_s = 2.0\ntarget = \"p1.a\"\nkind = \"fault-apply\"\n";
        assert_eq!(key(ev), "events[0].time_s");
        assert_eq!(key("schema_version = 2\n"), "schema_version");
        let tgt = "schema_version = 1\nduration_s = 1.0\n[[events]]\ntime_s = 0.5\ntarget = \"nowhere\"\nkind = \"fault-apply\"\n";
        assert_eq!(key(tgt), "events");
        let tc = "schema_version = 1\n[network.station1]\ninner_current_control_time_constant_s = -1.0\n";
        assert_eq!(key(tc), "network.station1");
        let ch = "schema_version = 1\nduration_s = 1.0\n[[analyses.spectra]]\nname = \"s\"\nchannel = \"v(x)\"\nstart_s = 0.1\n";
        assert_eq!(key(ch), "analyses.spectra[0].channel");
        let damp = "schema_version = 1\nduration_s = 1.0\n[[analyses.damping]]\nname = \"d\"\nchannel = \"v(p2.a)\"\nstart_s = 0.1\n";
        assert_eq!(key(damp), "analyses.damping[0]");
    }

    #[test]
    fn scan_grids_merge() {
        let s = Scenario::from_toml(
            "schema_version = 1\n[scan]\npoints = [\"point1\"]\nfrequencies_hz = [75.0]\n[[scan.grids]]\nstart_hz = 70.0\nend_hz = 80.0\nstep_hz = 5.0\n",
        )
        .unwrap();
        assert_eq!(s.scan.unwrap().frequencies_hz, vec![70.0, 75.0, 80.0]);
    }

    #[test]
    fn empty_study_writes_validation_only() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario::from_toml(MINIMAL).unwrap();
        let (m, _) = run_study(&s, dir.path(), Stages::ALL).unwrap();
        assert!(m.success());
        assert_eq!(m.stages.len(), 1);
        let kinds: Vec<&str> = m.artifacts.iter().map(|a| a.kind.as_str()).collect();
        assert_eq!(kinds, vec!["network-validation", "results-json"]);
        for a in &m.artifacts {
            assert!(fs::metadata(dir.path().join(&a.path)).unwrap().len() > 0);
        }
        assert!(dir.path().join("manifest.json").exists());
    }
}
