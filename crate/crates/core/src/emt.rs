//! Fixed-step companion-model nodal solver with trapezoidal integration.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{GridError, SolverError};
use crate::linalg::{EnvelopeLdl, Ordering};
use crate::mmc::{MmcStation, StationMeasurements};
use crate::network::{Characteristic, ElementKind, Network, Node, Source};

/// Default fault resistance (Ω).
pub const DEFAULT_FAULT_RESISTANCE: f64 = 0.1;

const PIVOT_TOL: f64 = 1e-14;
const NONE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParameterChange {
    /// New series R-L of a branch or source (Ω, H).
    Impedance { r: f64, l: f64 },
    Resistance { r: f64 },
    /// New active power order of a power-controlled station (MW).
    PowerOrder { mw: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    /// Target is a node; a resistive branch to ground is closed.
    FaultApply { resistance: f64 },
    /// Target is a faulted node; the branch opens at the next current zero.
    FaultClear,
    /// Target is an element, an element group or a station.
    ParameterStep { change: ParameterChange },
    /// Target is a switch; it opens at the next current zero.
    BreakerOpen,
    InjectionStart,
    InjectionStop,
    /// Releases a latched protection block of a station.
    Deblock,
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::FaultApply { .. } => "fault-apply",
            EventKind::FaultClear => "fault-clear",
            EventKind::ParameterStep { .. } => "parameter-step",
            EventKind::BreakerOpen => "breaker-open",
            EventKind::InjectionStart => "injection-start",
            EventKind::InjectionStop => "injection-stop",
            EventKind::Deblock => "deblock",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub target: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl Event {
    pub fn new(time: f64, target: impl Into<String>, kind: EventKind) -> Self {
        Self {
            time,
            target: target.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub time: f64,
    pub label: String,
}

/// What a waveform channel measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Probe {
    /// Node voltage to ground.
    Voltage { node: String },
    /// Current leaving `node` into the named element.
    Current { element: String, node: String },
    /// Current leaving `node` into every element of the listed groups.
    GroupCurrent { node: String, groups: Vec<String> },
    /// Current entering a station at its DC+ terminal.
    DcCurrent { station: String },
    /// Pole-to-pole DC voltage of a station.
    DcVoltage { station: String },
    /// Summed capacitor voltage of one arm (0..3 upper, 3..6 lower).
    ArmCapacitor { station: String, arm: usize },
    /// Active power out of a station's AC terminals.
    ActivePower { station: String },
}

impl Probe {
    pub fn voltage(node: &str) -> Self {
        Probe::Voltage { node: node.into() }
    }

    pub fn current(element: &str, node: &str) -> Self {
        Probe::Current {
            element: element.into(),
            node: node.into(),
        }
    }

    pub fn channel_name(&self) -> String {
        match self {
            Probe::Voltage { node } => format!("v({node})"),
            Probe::Current { element, node } => format!("i({node}->{element})"),
            Probe::GroupCurrent { node, groups } => format!("i({node}->{})", groups.join("+")),
            Probe::DcCurrent { station } => format!("idc({station})"),
            Probe::DcVoltage { station } => format!("vdc({station})"),
            Probe::ArmCapacitor { station, arm } => format!("vcap({station}.{arm})"),
            Probe::ActivePower { station } => format!("p({station})"),
        }
    }

    pub fn unit(&self) -> &'static str {
        match self {
            Probe::Voltage { .. } | Probe::DcVoltage { .. } | Probe::ArmCapacitor { .. } => "V",
            Probe::Current { .. } | Probe::GroupCurrent { .. } | Probe::DcCurrent { .. } => "A",
            Probe::ActivePower { .. } => "W",
        }
    }

    fn reference(&self) -> String {
        match self {
            Probe::Voltage { node } => node.clone(),
            Probe::Current { element, .. } => element.clone(),
            Probe::GroupCurrent { groups, .. } => groups.join("+"),
            Probe::DcCurrent { station }
            | Probe::DcVoltage { station }
            | Probe::ArmCapacitor { station, .. }
            | Probe::ActivePower { station } => station.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub unit: String,
    /// Bus or branch the channel refers to.
    pub reference: String,
    pub samples: Vec<f64>,
}

/// Uniformly sampled multi-channel record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformSet {
    pub sample_period: f64,
    /// Time of the first sample.
    pub t0: f64,
    pub channels: Vec<Channel>,
    pub markers: Vec<Marker>,
}

const WAVEFORM_MAGIC: &[u8; 4] = b"WFS1";

impl WaveformSet {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.samples.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.sample_period
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// Index of the first sample at or after `t`.
    pub fn index_at(&self, t: f64) -> usize {
        let k = ((t - self.t0) / self.sample_period - 1e-9).ceil();
        k.max(0.0) as usize
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s");
        for c in &self.channels {
            let _ = write!(out, ",{} [{}]", c.name, c.unit);
        }
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{:e}", self.time(k));
            for c in &self.channels {
                let _ = write!(out, ",{:e}", c.samples[k]);
            }
            out.push('\n');
        }
        out
    }

    /// Little-endian columnar binary encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.len() * self.channels.len());
        out.extend_from_slice(WAVEFORM_MAGIC);
        out.extend_from_slice(&(self.channels.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.sample_period.to_le_bytes());
        out.extend_from_slice(&self.t0.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for c in &self.channels {
            put_str(&mut out, &c.name);
            put_str(&mut out, &c.unit);
            put_str(&mut out, &c.reference);
        }
        out.extend_from_slice(&(self.markers.len() as u32).to_le_bytes());
        for m in &self.markers {
            out.extend_from_slice(&m.time.to_le_bytes());
            put_str(&mut out, &m.label);
        }
        for c in &self.channels {
            for x in &c.samples {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Option<&[u8]> {
            if cur.len() < n {
                return None;
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Some(head)
        };
        if take(4)? != WAVEFORM_MAGIC {
            return None;
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let f64_of = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
        let n_ch = u32_of(take(4)?) as usize;
        let n = u64::from_le_bytes(take(8)?.try_into().ok()?) as usize;
        let sample_period = f64_of(take(8)?);
        let t0 = f64_of(take(8)?);
        let mut channels = Vec::with_capacity(n_ch);
        for _ in 0..n_ch {
            let mut strs = Vec::new();
            for _ in 0..3 {
                let len = u32_of(take(4)?) as usize;
                strs.push(String::from_utf8(take(len)?.to_vec()).ok()?);
            }
            channels.push(Channel {
                reference: strs.pop()?,
                unit: strs.pop()?,
                name: strs.pop()?,
                samples: Vec::with_capacity(n),
            });
        }
        let n_m = u32_of(take(4)?) as usize;
        let mut markers = Vec::with_capacity(n_m);
        for _ in 0..n_m {
            let time = f64_of(take(8)?);
            let len = u32_of(take(4)?) as usize;
            let label = String::from_utf8(take(len)?.to_vec()).ok()?;
            markers.push(Marker { time, label });
        }
        for c in channels.iter_mut() {
            for _ in 0..n {
                c.samples.push(f64_of(take(8)?));
            }
        }
        Some(Self {
            sample_period,
            t0,
            channels,
            markers,
        })
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn write_binary(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()
    }
}

/// Up to four (node, coefficient) pairs; the branch voltage is `Σ c·v`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Terms {
    idx: [usize; 4],
    coef: [f64; 4],
    len: usize,
}

impl Terms {
    fn new(pairs: &[(Node, f64)]) -> Self {
        let mut t = Terms {
            idx: [NONE; 4],
            coef: [0.0; 4],
            len: 0,
        };
        for &(n, c) in pairs {
            if let Some(i) = n.index() {
                t.idx[t.len] = i;
                t.coef[t.len] = c;
                t.len += 1;
            }
        }
        t
    }

    fn two(a: Node, b: Node) -> Self {
        Self::new(&[(a, 1.0), (b, -1.0)])
    }

    #[inline]
    fn voltage(&self, v: &[f64]) -> f64 {
        let mut u = 0.0;
        for k in 0..self.len {
            u += self.coef[k] * v[self.idx[k]];
        }
        u
    }

    fn coefficient_at(&self, node: usize) -> f64 {
        (0..self.len)
            .filter(|&k| self.idx[k] == node)
            .map(|k| self.coef[k])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum BranchKind {
    /// `i = G (u + e)`.
    Resistive { r: f64 },
    /// Series R-L with EMF: `u + e = R i + L di/dt`.
    Rl { r: f64, l: f64 },
    Capacitor { c: f64 },
    /// Piecewise-linear flux/current inductor.
    Magnetizing {
        curve: Characteristic,
        segment: usize,
        flux: f64,
    },
    Open,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    terms: Terms,
    kind: BranchKind,
    g: f64,
    /// `2L/Δt - R` for R-L branches.
    k: f64,
    i: f64,
    /// Current at the previous step, for zero-crossing detection.
    prev_i: f64,
    u: f64,
    e: f64,
    e_next: f64,
    source: Option<Source>,
    /// Branch restored when an open switch or arm closes again.
    closed_kind: Option<BranchKind>,
}

impl Branch {
    fn new(terms: Terms, kind: BranchKind) -> Self {
        Branch {
            terms,
            kind,
            g: 0.0,
            k: 0.0,
            i: 0.0,
            prev_i: 0.0,
            u: 0.0,
            e: 0.0,
            e_next: 0.0,
            source: None,
            closed_kind: None,
        }
    }

    fn refresh_conductance(&mut self, dt: f64) {
        match &self.kind {
            BranchKind::Resistive { r } => {
                self.g = 1.0 / r;
                self.k = 0.0;
            }
            BranchKind::Rl { r, l } => {
                self.g = 1.0 / (2.0 * l / dt + r);
                self.k = 2.0 * l / dt - r;
            }
            BranchKind::Capacitor { c } => self.g = 2.0 * c / dt,
            BranchKind::Magnetizing { curve, segment, .. } => {
                self.g = dt / (2.0 * curve.slope_inductance(*segment));
            }
            BranchKind::Open => self.g = 0.0,
        }
    }

    /// History source such that `i(n+1) = G u(n+1) + h`.
    #[inline]
    fn history(&self, dt: f64) -> f64 {
        match &self.kind {
            BranchKind::Resistive { .. } => self.g * self.e_next,
            BranchKind::Rl { .. } => self.g * (self.e_next + self.u + self.e + self.k * self.i),
            BranchKind::Capacitor { .. } => -self.g * self.u - self.i,
            BranchKind::Magnetizing {
                curve,
                segment,
                flux,
            } => {
                let s = *segment;
                let lk = curve.slope_inductance(s);
                let offset = (curve.current[s] - curve.flux[s] / lk).copysign(*flux);
                let offset = if s == 0 { 0.0 } else { offset };
                (flux + 0.5 * dt * self.u) / lk + offset
            }
            BranchKind::Open => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Injection {
    a: usize,
    b: usize,
    source: Source,
    value: f64,
}

#[derive(Debug, Clone)]
struct StationRuntime {
    model: MmcStation,
    ac: [usize; 3],
    dc_pos: usize,
    dc_neg: usize,
    /// Upper a, b, c then lower a, b, c.
    arms: [usize; 6],
    star: [usize; 3],
}

#[derive(Debug, Clone)]
enum ResolvedProbe {
    Voltage(usize),
    BranchSum(Vec<(usize, f64)>, Vec<(usize, f64)>),
    DcCurrent(usize),
    DcVoltage(usize),
    ArmCapacitor(usize, usize),
    ActivePower(usize),
}

/// Complete solver state; cloning yields an independent continuation.
#[derive(Debug, Clone)]
pub struct Simulation {
    dt: f64,
    time: f64,
    steps: u64,
    network: Arc<Network>,
    branches: Vec<Branch>,
    /// Branch indices of every network element.
    element_branches: Vec<Vec<usize>>,
    /// Injection index of current-source elements.
    element_injection: Vec<Option<usize>>,
    injections: Vec<Injection>,
    stations: Vec<StationRuntime>,
    /// (node, branch) of applied faults.
    faults: Vec<(usize, usize)>,
    /// Branches waiting for a current zero to open, with marker labels.
    armed: Vec<(usize, String)>,
    v: Vec<f64>,
    rhs: Vec<f64>,
    work: Vec<f64>,
    ordering: Arc<Ordering>,
    factor: Option<Arc<EnvelopeLdl<f64>>>,
    epoch: u64,
    factored_epoch: u64,
    events: VecDeque<Event>,
    markers: Vec<Marker>,
}

fn grid_err(e: GridError) -> SolverError {
    SolverError::IncompatibleEvent {
        kind: "parameter-step".into(),
        target: e.to_string(),
    }
}

impl Simulation {
    /// Builds companions for every element and factors the nodal matrix.
    pub fn assemble(network: &Network, dt: f64) -> Result<Self, SolverError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SolverError::InvalidTimeStep(dt));
        }
        let n = network.node_count();
        let mut branches = Vec::new();
        let mut element_branches = Vec::new();
        let mut element_injection = Vec::new();
        let mut injections = Vec::new();
        for e in network.elements() {
            let mut ids = Vec::new();
            let mut inj = None;
            let mut push = |b: Branch| {
                branches.push(b);
                ids.push(branches.len() - 1);
            };
            match &e.kind {
                ElementKind::Resistor { a, b, r } => {
                    push(Branch::new(Terms::two(*a, *b), BranchKind::Resistive { r: *r }));
                }
                ElementKind::RlBranch { a, b, r, l } => push(Branch::new(Terms::two(*a, *b), rl_kind(*r, *l))),
                ElementKind::Capacitor { a, b, c } => {
                    push(Branch::new(Terms::two(*a, *b), BranchKind::Capacitor { c: *c }));
                }
                ElementKind::RlSource { a, b, r, l, source } => {
                    let mut br = Branch::new(Terms::two(*a, *b), rl_kind(*r, *l));
                    br.source = Some(source.clone());
                    push(br);
                }
                ElementKind::Transformer(t) => {
                    let n_inv = 1.0 / t.ratio;
                    let terms = Terms::new(&[
                        (t.primary.0, n_inv),
                        (t.primary.1, -n_inv),
                        (t.secondary.0, -1.0),
                        (t.secondary.1, 1.0),
                    ]);
                    push(Branch::new(terms, rl_kind(t.r, t.l)));
                    if let Some(curve) = &t.magnetizing {
                        push(Branch::new(
                            Terms::two(t.primary.0, t.primary.1),
                            BranchKind::Magnetizing {
                                curve: curve.clone(),
                                segment: 0,
                                flux: 0.0,
                            },
                        ));
                    }
                }
                ElementKind::Switch { a, b, r_closed, closed } => {
                    let on = BranchKind::Resistive { r: *r_closed };
                    let mut br = Branch::new(Terms::two(*a, *b), if *closed { on.clone() } else { BranchKind::Open });
                    br.closed_kind = Some(on);
                    push(br);
                }
                ElementKind::CurrentSource { a, b, source } => {
                    injections.push(Injection {
                        a: a.index().unwrap_or(NONE),
                        b: b.index().unwrap_or(NONE),
                        source: source.clone(),
                        value: 0.0,
                    });
                    inj = Some(injections.len() - 1);
                }
            }
            element_branches.push(ids);
            element_injection.push(inj);
        }

        let mut stations = Vec::new();
        for spec in network.stations() {
            let model = MmcStation::new(&spec.name, &spec.params);
            let b = model.base;
            let mut arms = [0; 6];
            for k in 0..3 {
                let mut up = Branch::new(Terms::two(spec.dc_pos, spec.ac[k]), rl_kind(b.r_arm, b.l_arm));
                up.closed_kind = Some(up.kind.clone());
                branches.push(up);
                arms[k] = branches.len() - 1;
                let mut lo = Branch::new(Terms::two(spec.ac[k], spec.dc_neg), rl_kind(b.r_arm, b.l_arm));
                lo.closed_kind = Some(lo.kind.clone());
                branches.push(lo);
                arms[k + 3] = branches.len() - 1;
            }
            let mut star = [0; 3];
            for (k, s) in star.iter_mut().enumerate() {
                branches.push(Branch::new(
                    Terms::two(spec.ac[k], Node::GROUND),
                    rl_kind(spec.params.star_point_reactor_ohm, spec.params.star_point_reactor_h),
                ));
                *s = branches.len() - 1;
            }
            let e0 = model.arms.map(|a| a.inserted_voltage());
            for (k, &bi) in arms.iter().enumerate() {
                branches[bi].e = -e0[k];
                branches[bi].e_next = -e0[k];
            }
            let idx = |node: Node| node.index().unwrap_or(NONE);
            stations.push(StationRuntime {
                model,
                ac: spec.ac.map(idx),
                dc_pos: idx(spec.dc_pos),
                dc_neg: idx(spec.dc_neg),
                arms,
                star,
            });
        }

        for br in branches.iter_mut() {
            if let Some(src) = &br.source {
                br.e = src.value(0.0);
            }
            br.refresh_conductance(dt);
        }

        check_connectivity(network, n)?;

        let mut edges = Vec::new();
        for br in &branches {
            let t = &br.terms;
            for x in 0..t.len {
                for y in (x + 1)..t.len {
                    edges.push((t.idx[x], t.idx[y]));
                }
            }
        }
        let ordering = Ordering::reverse_cuthill_mckee(n, &edges);

        let mut sim = Simulation {
            dt,
            time: 0.0,
            steps: 0,
            network: Arc::new(network.clone()),
            branches,
            element_branches,
            element_injection,
            injections,
            stations,
            faults: Vec::new(),
            armed: Vec::new(),
            v: vec![0.0; n],
            rhs: vec![0.0; n],
            work: Vec::with_capacity(n),
            ordering: Arc::new(ordering),
            factor: None,
            epoch: 0,
            factored_epoch: u64::MAX,
            events: VecDeque::new(),
            markers: Vec::new(),
        };
        sim.refactor()?;
        Ok(sim)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn node_voltages(&self) -> &[f64] {
        &self.v
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    /// Replaces the waveform of a current-source element.
    pub fn set_injection(&mut self, element: &str, source: Source) -> Result<(), SolverError> {
        let k = self
            .network
            .element_index(element)
            .and_then(|i| self.element_injection[i])
            .ok_or_else(|| SolverError::UnknownTarget(element.to_string()))?;
        self.injections[k].source = source;
        Ok(())
    }

    pub fn station(&self, name: &str) -> Option<&MmcStation> {
        self.stations.iter().map(|s| &s.model).find(|m| m.name == name)
    }

    /// Conductance of a network element's first companion branch.
    pub fn companion_conductance(&self, element: &str) -> Option<f64> {
        let idx = self.network.element_index(element)?;
        self.element_branches[idx].first().map(|&b| self.branches[b].g)
    }

    /// Sets node voltages at t = 0 and makes every branch history
    /// consistent with them (branch currents stay zero).
    pub fn set_initial_voltages(&mut self, values: &[(&str, f64)]) -> Result<(), SolverError> {
        for &(name, x) in values {
            let i = self
                .network
                .find_node(name)
                .and_then(|n| n.index())
                .ok_or_else(|| SolverError::UnknownTarget(name.to_string()))?;
            self.v[i] = x;
        }
        for br in self.branches.iter_mut() {
            br.u = br.terms.voltage(&self.v);
        }
        Ok(())
    }

    fn refactor(&mut self) -> Result<(), SolverError> {
        let n = self.v.len();
        let mut trip = Vec::with_capacity(4 * self.branches.len());
        for br in &self.branches {
            if br.g == 0.0 {
                continue;
            }
            let t = &br.terms;
            for x in 0..t.len {
                trip.push((t.idx[x], t.idx[x], br.g * t.coef[x] * t.coef[x]));
                for y in (x + 1)..t.len {
                    trip.push((t.idx[x], t.idx[y], br.g * t.coef[x] * t.coef[y]));
                }
            }
        }
        let fac = EnvelopeLdl::factor(n, &trip, &self.ordering, PIVOT_TOL).map_err(|e| {
            let crate::error::LinalgError::Singular { index } = e;
            SolverError::Singular {
                node: self.network.node_name(node_at(index)).to_string(),
            }
        })?;
        self.factor = Some(Arc::new(fac));
        self.factored_epoch = self.epoch;
        Ok(())
    }

    fn bump_epoch(&mut self) {
        self.epoch += 1;
    }

    /// Queues events; they must be sorted and not earlier than the last queued.
    pub fn schedule(&mut self, events: &[Event]) -> Result<(), SolverError> {
        let mut last = self.events.back().map_or(f64::NEG_INFINITY, |e| e.time);
        for ev in events {
            if ev.time < last {
                return Err(SolverError::UnsortedEvents);
            }
            self.validate_event(ev)?;
            last = ev.time;
            self.events.push_back(ev.clone());
        }
        Ok(())
    }

    fn validate_event(&self, ev: &Event) -> Result<(), SolverError> {
        let net = &self.network;
        let incompatible = || SolverError::IncompatibleEvent {
            kind: ev.kind.label().into(),
            target: ev.target.clone(),
        };
        match &ev.kind {
            EventKind::FaultApply { resistance } => {
                let node = net.find_node(&ev.target).ok_or_else(|| SolverError::UnknownTarget(ev.target.clone()))?;
                if node.is_ground() || !(*resistance > 0.0) {
                    return Err(incompatible());
                }
            }
            EventKind::FaultClear => {
                net.find_node(&ev.target).ok_or_else(|| SolverError::UnknownTarget(ev.target.clone()))?;
            }
            EventKind::ParameterStep { change } => match change {
                ParameterChange::PowerOrder { .. } => {
                    net.station_index(&ev.target).ok_or_else(|| SolverError::UnknownTarget(ev.target.clone()))?;
                }
                _ => {
                    let targets = self.parameter_targets(&ev.target);
                    if targets.is_empty() {
                        return Err(SolverError::UnknownTarget(ev.target.clone()));
                    }
                    for i in targets {
                        let ok = matches!(
                            (&net.elements()[i].kind, change),
                            (ElementKind::RlSource { .. } | ElementKind::RlBranch { .. }, ParameterChange::Impedance { .. })
                                | (ElementKind::Resistor { .. } | ElementKind::Switch { .. }, ParameterChange::Resistance { .. })
                        );
                        if !ok {
                            return Err(incompatible());
                        }
                    }
                }
            },
            EventKind::BreakerOpen => {
                let i = net.element_index(&ev.target).ok_or_else(|| SolverError::UnknownTarget(ev.target.clone()))?;
                if !matches!(net.elements()[i].kind, ElementKind::Switch { .. }) {
                    return Err(incompatible());
                }
            }
            EventKind::InjectionStart | EventKind::InjectionStop => {
                let i = net.element_index(&ev.target).ok_or_else(|| SolverError::UnknownTarget(ev.target.clone()))?;
                if self.element_injection[i].is_none() {
                    return Err(incompatible());
                }
            }
            EventKind::Deblock => {
                net.station_index(&ev.target).ok_or_else(|| SolverError::UnknownTarget(ev.target.clone()))?;
            }
        }
        Ok(())
    }

    /// Elements matched by name, or else by group.
    fn parameter_targets(&self, target: &str) -> Vec<usize> {
        if let Some(i) = self.network.element_index(target) {
            return vec![i];
        }
        self.network
            .elements()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == target)
            .map(|(i, _)| i)
            .collect()
    }

    /// Applies every queued event due by the end of the next step.
    pub fn apply_due_events(&mut self) -> Result<(), SolverError> {
        let horizon = self.time + self.dt * (1.0 - 1e-9);
        while self.events.front().is_some_and(|e| e.time <= horizon) {
            let ev = self.events.pop_front().unwrap();
            self.apply_event(&ev)?;
        }
        Ok(())
    }

    fn apply_event(&mut self, ev: &Event) -> Result<(), SolverError> {
        let t = ev.time;
        match &ev.kind {
            EventKind::FaultApply { resistance } => {
                let node = self.network.find_node(&ev.target).and_then(|n| n.index()).unwrap();
                if let Some(&(_, b)) = self.faults.iter().find(|(n, _)| *n == node) {
                    let br = &mut self.branches[b];
                    br.kind = BranchKind::Resistive { r: *resistance };
                    br.refresh_conductance(self.dt);
                    self.armed.retain(|(x, _)| *x != b);
                } else {
                    let mut br = Branch::new(
                        Terms {
                            idx: [node, NONE, NONE, NONE],
                            coef: [1.0, 0.0, 0.0, 0.0],
                            len: 1,
                        },
                        BranchKind::Resistive { r: *resistance },
                    );
                    br.u = self.v[node];
                    br.refresh_conductance(self.dt);
                    self.branches.push(br);
                    self.faults.push((node, self.branches.len() - 1));
                }
                self.bump_epoch();
            }
            EventKind::FaultClear => {
                let node = self.network.find_node(&ev.target).and_then(|n| n.index());
                let fault = self.faults.iter().find(|(n, _)| Some(*n) == node).map(|f| f.1);
                if let Some(b) = fault {
                    if self.branches[b].kind != BranchKind::Open {
                        self.armed.push((b, format!("fault-open {}", ev.target)));
                    }
                }
            }
            EventKind::ParameterStep { change } => match change {
                ParameterChange::PowerOrder { mw } => {
                    let s = self.network.station_index(&ev.target).unwrap();
                    self.stations[s].model.p_order_mw = *mw;
                }
                _ => {
                    for i in self.parameter_targets(&ev.target) {
                        self.step_parameter(i, change).map_err(grid_err)?;
                    }
                    self.bump_epoch();
                }
            },
            EventKind::BreakerOpen => {
                let i = self.network.element_index(&ev.target).unwrap();
                let b = self.element_branches[i][0];
                if self.branches[b].kind != BranchKind::Open {
                    self.armed.push((b, format!("breaker-open {}", ev.target)));
                }
            }
            EventKind::InjectionStart | EventKind::InjectionStop => {
                let i = self.network.element_index(&ev.target).unwrap();
                let k = self.element_injection[i].unwrap();
                self.injections[k].source.enabled = matches!(ev.kind, EventKind::InjectionStart);
            }
            EventKind::Deblock => {
                let s = self.network.station_index(&ev.target).unwrap();
                self.stations[s].model.deblock();
                let arms = self.stations[s].arms;
                for b in arms {
                    self.close_branch(b);
                }
                self.bump_epoch();
            }
        }
        self.markers.push(Marker {
            time: t,
            label: format!("{} {}", ev.kind.label(), ev.target),
        });
        Ok(())
    }

    fn step_parameter(&mut self, element: usize, change: &ParameterChange) -> Result<(), GridError> {
        let dt = self.dt;
        let b = self.element_branches[element][0];
        let br = &mut self.branches[b];
        match *change {
            ParameterChange::Impedance { r, l } => {
                if r < 0.0 || l < 0.0 || (r == 0.0 && l == 0.0) {
                    return Err(GridError::NonPositive { name: "impedance", value: r.max(l) });
                }
                br.kind = rl_kind(r, l);
            }
            ParameterChange::Resistance { r } => {
                if !(r > 0.0) {
                    return Err(GridError::NonPositive { name: "resistance", value: r });
                }
                if br.kind == BranchKind::Open {
                    br.closed_kind = Some(BranchKind::Resistive { r });
                } else {
                    br.kind = BranchKind::Resistive { r };
                }
            }
            ParameterChange::PowerOrder { .. } => {}
        }
        br.refresh_conductance(dt);
        Ok(())
    }

    fn close_branch(&mut self, b: usize) {
        let br = &mut self.branches[b];
        if br.kind == BranchKind::Open {
            if let Some(k) = br.closed_kind.clone() {
                br.kind = k;
                br.i = 0.0;
                br.refresh_conductance(self.dt);
            }
        }
    }

    fn open_branch(&mut self, b: usize) {
        let br = &mut self.branches[b];
        if br.kind != BranchKind::Open {
            if br.closed_kind.is_none() {
                br.closed_kind = Some(br.kind.clone());
            }
            br.kind = BranchKind::Open;
            br.i = 0.0;
            br.g = 0.0;
        }
    }

    /// Advances the solution by one time step.
    pub fn step(&mut self) -> Result<(), SolverError> {
        self.apply_due_events()?;
        let dt = self.dt;
        let t1 = (self.steps + 1) as f64 * dt;

        for br in self.branches.iter_mut() {
            if let Some(src) = &br.source {
                br.e_next = src.value(t1);
            }
        }
        if self.epoch != self.factored_epoch {
            self.refactor()?;
        }

        self.rhs.iter_mut().for_each(|x| *x = 0.0);
        for inj in self.injections.iter_mut() {
            inj.value = inj.source.value(t1);
            if inj.a != NONE {
                self.rhs[inj.a] -= inj.value;
            }
            if inj.b != NONE {
                self.rhs[inj.b] += inj.value;
            }
        }
        for br in &self.branches {
            let h = br.history(dt);
            if h != 0.0 {
                let t = &br.terms;
                for x in 0..t.len {
                    self.rhs[t.idx[x]] -= t.coef[x] * h;
                }
            }
        }
        let mut rhs = std::mem::take(&mut self.rhs);
        self.factor.as_ref().unwrap().solve_in_place(&mut rhs, &mut self.work);
        self.rhs = rhs;
        std::mem::swap(&mut self.v, &mut self.rhs);
        for (i, x) in self.v.iter().enumerate() {
            if !x.is_finite() {
                return Err(SolverError::Divergence {
                    node: self.network.node_name(node_at(i)).to_string(),
                    time: t1,
                });
            }
        }

        let mut topology_changed = false;
        for br in self.branches.iter_mut() {
            let u1 = br.terms.voltage(&self.v);
            let h = br.history(dt);
            let u0 = br.u;
            br.prev_i = br.i;
            br.i = if br.kind == BranchKind::Open { 0.0 } else { br.g * u1 + h };
            if let BranchKind::Magnetizing { curve, segment, flux } = &mut br.kind {
                *flux += 0.5 * dt * (u0 + u1);
                let s = curve.segment_of(*flux);
                if s != *segment {
                    *segment = s;
                    topology_changed = true;
                }
            }
            br.u = u1;
            br.e = br.e_next;
        }
        if topology_changed {
            for br in self.branches.iter_mut() {
                if matches!(br.kind, BranchKind::Magnetizing { .. }) {
                    br.refresh_conductance(dt);
                }
            }
            self.bump_epoch();
        }

        // breakers waiting for a current zero
        let mut k = 0;
        while k < self.armed.len() {
            let (b, _) = self.armed[k];
            let br = &self.branches[b];
            let (i0, i1) = (br.prev_i, br.i);
            if i0 * i1 <= 0.0 {
                let frac = if i0 != i1 { i0.abs() / (i0.abs() + i1.abs()) } else { 1.0 };
                let (_, label) = self.armed.swap_remove(k);
                self.markers.push(Marker {
                    time: t1 - dt + frac * dt,
                    label,
                });
                self.open_branch(b);
                self.bump_epoch();
            } else {
                k += 1;
            }
        }

        for s in 0..self.stations.len() {
            let rt = &self.stations[s];
            let volt = |i: usize| if i == NONE { 0.0 } else { self.v[i] };
            let meas = StationMeasurements {
                v_ac: rt.ac.map(volt),
                v_dc_pos: volt(rt.dc_pos),
                v_dc_neg: volt(rt.dc_neg),
                arm_currents: rt.arms.map(|b| self.branches[b].i),
            };
            let was_open = rt.model.arm_open();
            let rt = &mut self.stations[s];
            let e = rt.model.update(&meas, t1, dt);
            let now_open = rt.model.arm_open();
            let arms = rt.arms;
            for k in 0..6 {
                self.branches[arms[k]].e_next = -e[k];
            }
            for k in 0..6 {
                if now_open[k] != was_open[k] {
                    if now_open[k] {
                        self.open_branch(arms[k]);
                    } else {
                        self.close_branch(arms[k]);
                    }
                    self.bump_epoch();
                }
            }
        }

        self.steps += 1;
        self.time = t1;
        Ok(())
    }

    fn resolve_probe(&self, p: &Probe) -> Result<ResolvedProbe, SolverError> {
        let net = &self.network;
        let node_of = |name: &str| -> Result<usize, SolverError> {
            net.find_node(name)
                .and_then(|n| n.index())
                .ok_or_else(|| SolverError::UnknownProbe(format!("node `{name}`")))
        };
        let station_of = |name: &str| {
            net.station_index(name)
                .ok_or_else(|| SolverError::UnknownProbe(format!("station `{name}`")))
        };
        Ok(match p {
            Probe::Voltage { node } => ResolvedProbe::Voltage(node_of(node)?),
            Probe::Current { element, node } => {
                let n = node_of(node)?;
                let i = net
                    .element_index(element)
                    .ok_or_else(|| SolverError::UnknownProbe(format!("element `{element}`")))?;
                let (b, inj) = self.element_terms(&[i], n);
                ResolvedProbe::BranchSum(b, inj)
            }
            Probe::GroupCurrent { node, groups } => {
                let n = node_of(node)?;
                let ids: Vec<usize> = net
                    .elements()
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| groups.contains(&e.group))
                    .map(|(i, _)| i)
                    .collect();
                let (mut b, inj) = self.element_terms(&ids, n);
                for rt in &self.stations {
                    if groups.contains(&net.stations()[self.station_pos(rt)].group) {
                        for &br in rt.arms.iter().chain(&rt.star) {
                            let c = self.branches[br].terms.coefficient_at(n);
                            if c != 0.0 {
                                b.push((br, c));
                            }
                        }
                    }
                }
                if ids.is_empty() && b.is_empty() {
                    return Err(SolverError::UnknownProbe(format!("groups {groups:?}")));
                }
                ResolvedProbe::BranchSum(b, inj)
            }
            Probe::DcCurrent { station } => ResolvedProbe::DcCurrent(station_of(station)?),
            Probe::DcVoltage { station } => ResolvedProbe::DcVoltage(station_of(station)?),
            Probe::ArmCapacitor { station, arm } => {
                if *arm >= 6 {
                    return Err(SolverError::UnknownProbe(format!("arm {arm}")));
                }
                ResolvedProbe::ArmCapacitor(station_of(station)?, *arm)
            }
            Probe::ActivePower { station } => ResolvedProbe::ActivePower(station_of(station)?),
        })
    }

    fn station_pos(&self, rt: &StationRuntime) -> usize {
        self.network.station_index(&rt.model.name).unwrap()
    }

    fn element_terms(&self, elements: &[usize], node: usize) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
        let mut b = Vec::new();
        let mut inj = Vec::new();
        for &i in elements {
            for &br in &self.element_branches[i] {
                let c = self.branches[br].terms.coefficient_at(node);
                if c != 0.0 {
                    b.push((br, c));
                }
            }
            if let Some(k) = self.element_injection[i] {
                let src = &self.injections[k];
                if src.a == node {
                    inj.push((k, 1.0));
                }
                if src.b == node {
                    inj.push((k, -1.0));
                }
            }
        }
        (b, inj)
    }

    fn sample(&self, p: &ResolvedProbe) -> f64 {
        match p {
            ResolvedProbe::Voltage(i) => self.v[*i],
            ResolvedProbe::BranchSum(b, inj) => {
                b.iter().map(|&(k, c)| c * self.branches[k].i).sum::<f64>()
                    + inj.iter().map(|&(k, c)| c * self.injections[k].value).sum::<f64>()
            }
            ResolvedProbe::DcCurrent(s) => self.stations[*s].model.i_dc,
            ResolvedProbe::DcVoltage(s) => {
                let rt = &self.stations[*s];
                let volt = |i: usize| if i == NONE { 0.0 } else { self.v[i] };
                volt(rt.dc_pos) - volt(rt.dc_neg)
            }
            ResolvedProbe::ArmCapacitor(s, a) => self.stations[*s].model.arms[*a].v_cap_sum,
            ResolvedProbe::ActivePower(s) => self.stations[*s].model.p_meas,
        }
    }

    /// Creates a recorder sampling `probes` every `every` steps.
    pub fn recorder(&self, probes: &[Probe], every: usize) -> Result<Recorder, SolverError> {
        let resolved = probes.iter().map(|p| self.resolve_probe(p)).collect::<Result<Vec<_>, _>>()?;
        Ok(Recorder {
            probes: resolved,
            every: every.max(1),
            counter: 0,
            set: WaveformSet {
                sample_period: self.dt * every.max(1) as f64,
                t0: 0.0,
                channels: probes
                    .iter()
                    .map(|p| Channel {
                        name: p.channel_name(),
                        unit: p.unit().to_string(),
                        reference: p.reference(),
                        samples: Vec::new(),
                    })
                    .collect(),
                markers: Vec::new(),
            },
        })
    }

    /// Steps until `t_end`, recording into `rec` if given.
    pub fn advance_to(&mut self, t_end: f64, mut rec: Option<&mut Recorder>) -> Result<(), SolverError> {
        let n_end = (t_end / self.dt + 1e-6).floor() as u64;
        while self.steps < n_end {
            self.step()?;
            if let Some(r) = rec.as_deref_mut() {
                r.capture(self);
            }
        }
        Ok(())
    }
}

/// Collects probe samples during a run.
#[derive(Debug, Clone)]
pub struct Recorder {
    probes: Vec<ResolvedProbe>,
    every: usize,
    counter: usize,
    set: WaveformSet,
}

impl Recorder {
    pub fn capture(&mut self, sim: &Simulation) {
        if self.counter % self.every == 0 {
            if self.set.channels.first().is_none_or(|c| c.samples.is_empty()) {
                self.set.t0 = sim.time;
            }
            for (p, c) in self.probes.iter().zip(self.set.channels.iter_mut()) {
                c.samples.push(sim.sample(p));
            }
        }
        self.counter += 1;
    }

    pub fn finish(mut self, sim: &Simulation) -> WaveformSet {
        self.set.markers = sim.markers.clone();
        if self.set.is_empty() {
            self.set.t0 = sim.time + sim.dt;
        }
        self.set
    }
}

fn rl_kind(r: f64, l: f64) -> BranchKind {
    if l > 0.0 {
        BranchKind::Rl { r, l }
    } else {
        BranchKind::Resistive { r }
    }
}

fn node_at(index: usize) -> Node {
    Node::from_index(index)
}

/// Every node must reach ground through elements (transformers couple
/// their windings magnetically only).
fn check_connectivity(network: &Network, n: usize) -> Result<(), SolverError> {
    let mut parent: Vec<usize> = (0..=n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let id = |node: Node| node.index().unwrap_or(n);
    let union = |p: &mut Vec<usize>, a: Node, b: Node| {
        let (ra, rb) = (find(p, id(a)), find(p, id(b)));
        if ra != rb {
            p[ra] = rb;
        }
    };
    for e in network.elements() {
        match &e.kind {
            ElementKind::Transformer(t) => {
                union(&mut parent, t.primary.0, t.primary.1);
                union(&mut parent, t.secondary.0, t.secondary.1);
            }
            ElementKind::CurrentSource { .. } => {}
            ElementKind::Switch { closed: false, .. } => {}
            kind => {
                let t = kind.terminals();
                union(&mut parent, t[0], t[1]);
            }
        }
    }
    for s in network.stations() {
        for k in 0..3 {
            union(&mut parent, s.ac[k], Node::GROUND);
            union(&mut parent, s.ac[k], s.dc_pos);
            union(&mut parent, s.ac[k], s.dc_neg);
        }
    }
    let root = find(&mut parent, n);
    let floating: Vec<String> = (0..n)
        .filter(|&i| find(&mut parent, i) != root)
        .map(|i| network.node_name(node_at(i)).to_string())
        .collect();
    if floating.is_empty() {
        Ok(())
    } else {
        Err(SolverError::FloatingNodes { nodes: floating })
    }
}

/// Assembles, schedules and runs a network for `duration` seconds.
pub fn run(
    network: &Network,
    events: &[Event],
    duration: f64,
    probes: &[Probe],
    dt: f64,
) -> Result<WaveformSet, SolverError> {
    let mut sim = Simulation::assemble(network, dt)?;
    sim.schedule(events)?;
    let mut rec = sim.recorder(probes, 1)?;
    sim.advance_to(duration, Some(&mut rec))?;
    Ok(rec.finish(&sim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Source;

    fn rl_circuit() -> Network {
        let mut net = Network::new(50.0);
        let n1 = net.node("n1");
        net.add(
            "src",
            "",
            ElementKind::RlSource {
                a: Node::GROUND,
                b: n1,
                r: 0.5,
                l: 0.01,
                source: Source::dc(1.0),
            },
        )
        .unwrap();
        net.add("load", "", ElementKind::Resistor { a: n1, b: Node::GROUND, r: 0.5 }).unwrap();
        net
    }

    fn rl_max_error(dt: f64) -> f64 {
        let w = run(&rl_circuit(), &[], 0.05, &[Probe::current("load", "n1")], dt).unwrap();
        let c = &w.channels[0];
        (0..w.len())
            .map(|k| (c.samples[k] - (1.0 - (-100.0 * w.time(k)).exp())).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn ohms_law() {
        let mut net = Network::new(50.0);
        let a = net.node("a");
        net.add("r", "", ElementKind::Resistor { a, b: Node::GROUND, r: 2.0 }).unwrap();
        net.add("i", "", ElementKind::CurrentSource { a: Node::GROUND, b: a, source: Source::dc(1.0) }).unwrap();
        let w = run(&net, &[], 1e-3, &[Probe::voltage("a")], 1e-4).unwrap();
        assert!((w.channels[0].samples[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn companion_conductances() {
        let mut net = Network::new(50.0);
        let a = net.node("a");
        net.add("l", "", ElementKind::RlBranch { a, b: Node::GROUND, r: 0.0, l: 1.0 }).unwrap();
        net.add("c", "", ElementKind::Capacitor { a, b: Node::GROUND, c: 1e-6 }).unwrap();
        let sim = Simulation::assemble(&net, 1e-3).unwrap();
        assert!((sim.companion_conductance("l").unwrap() - 5e-4).abs() < 1e-15);
        assert!((sim.companion_conductance("c").unwrap() - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn rl_step_second_order() {
        let e1 = rl_max_error(1e-4);
        let e2 = rl_max_error(5e-5);
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn lc_energy_conserved() {
        let mut net = Network::new(50.0);
        let a = net.node("a");
        net.add("l", "", ElementKind::RlBranch { a, b: Node::GROUND, r: 0.0, l: 1e-3 }).unwrap();
        net.add("c", "", ElementKind::Capacitor { a, b: Node::GROUND, c: 1e-6 }).unwrap();
        let dt = 1e-6;
        let mut sim = Simulation::assemble(&net, dt).unwrap();
        sim.set_initial_voltages(&[("a", 1.0)]).unwrap();
        let probes = [Probe::voltage("a"), Probe::current("l", "a")];
        let mut rec = sim.recorder(&probes, 1).unwrap();
        let period = 2.0 * std::f64::consts::PI * (1e-3f64 * 1e-6).sqrt();
        sim.advance_to(100.0 * period, Some(&mut rec)).unwrap();
        let w = rec.finish(&sim);
        let e0 = 0.5 * 1e-6;
        let mut drift = 0.0f64;
        for k in 0..w.len() {
            let v = w.channels[0].samples[k];
            let i = w.channels[1].samples[k];
            let e = 0.5 * 1e-6 * v * v + 0.5 * 1e-3 * i * i;
            drift = drift.max(((e - e0) / e0).abs());
        }
        assert!(drift < 1e-6, "drift {drift}");
        // period from downward zero crossings
        let v = &w.channels[0].samples;
        let crossings: Vec<f64> = (1..v.len())
            .filter(|&k| v[k - 1] > 0.0 && v[k] <= 0.0)
            .map(|k| w.time(k - 1) + dt * v[k - 1] / (v[k - 1] - v[k]))
            .collect();
        let measured = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
        assert!((measured - 198.7e-6).abs() < 0.1e-6, "{measured}");
    }

    #[test]
    fn zero_sources_zero_trajectory() {
        let mut net = rl_circuit();
        if let ElementKind::RlSource { source, .. } = &mut net.elements_mut()[0].kind {
            *source = Source::dc(0.0);
        }
        let w = run(&net, &[], 0.01, &[Probe::voltage("n1")], 1e-4).unwrap();
        assert!(w.channels[0].samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_duration_is_empty() {
        let w = run(&rl_circuit(), &[], 0.0, &[Probe::voltage("n1")], 1e-4).unwrap();
        assert!(w.is_empty());
        assert_eq!(w.channels.len(), 1);
    }

    #[test]
    fn floating_node_named() {
        let mut net = rl_circuit();
        let x = net.node("x");
        let y = net.node("y");
        net.add("iso", "", ElementKind::Resistor { a: x, b: y, r: 1.0 }).unwrap();
        match Simulation::assemble(&net, 1e-4) {
            Err(SolverError::FloatingNodes { nodes }) => assert_eq!(nodes, ["x", "y"]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Simulation::assemble(&rl_circuit(), 0.0), Err(SolverError::InvalidTimeStep(_))));
    }

    fn fault_circuit() -> Network {
        let mut net = Network::new(50.0);
        let a = net.node("a");
        net.add(
            "src",
            "thev",
            ElementKind::RlSource {
                a: Node::GROUND,
                b: a,
                r: 1.6,
                l: 0.05,
                source: Source::cosine(1000.0, 50.0, 0.0),
            },
        )
        .unwrap();
        net.add("load", "", ElementKind::Resistor { a, b: Node::GROUND, r: 100.0 }).unwrap();
        net
    }

    #[test]
    fn fault_opens_at_current_zero() {
        let events = [
            Event::new(0.1, "a", EventKind::FaultApply { resistance: DEFAULT_FAULT_RESISTANCE }),
            Event::new(0.1513, "a", EventKind::FaultClear),
        ];
        let dt = 20e-6;
        let mut sim = Simulation::assemble(&fault_circuit(), dt).unwrap();
        sim.schedule(&events).unwrap();
        let mut rec = sim.recorder(&[Probe::voltage("a")], 1).unwrap();
        sim.advance_to(0.2, Some(&mut rec)).unwrap();
        let w = rec.finish(&sim);
        let open = w.markers.iter().find(|m| m.label.starts_with("fault-open")).unwrap();
        assert!(open.time > 0.1513 && open.time < 0.1513 + 0.011, "{}", open.time);
        // the fault current is the node voltage over the fault resistance
        let k = w.index_at(open.time) - 1;
        let v = &w.channels[0].samples;
        let i_before = v[k] / DEFAULT_FAULT_RESISTANCE;
        let i_clear = v[w.index_at(0.1513)] / DEFAULT_FAULT_RESISTANCE;
        // linear interpolation across the zero places the opening within one step
        assert!(i_before.abs() < 0.02 * i_clear.abs().max(1.0) || i_before.abs() < 200.0);
        let labels: Vec<_> = w.markers.iter().map(|m| m.label.as_str()).collect();
        assert_eq!(labels[0], "fault-apply a");
        // the post-fault voltage recovers to the unfaulted division
        let tail = v[v.len() - 1000..].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(tail > 900.0, "{tail}");
    }

    #[test]
    fn parameter_step_and_validation() {
        let events = [Event::new(
            0.05,
            "thev",
            EventKind::ParameterStep {
                change: ParameterChange::Impedance { r: 3.4, l: 0.1 },
            },
        )];
        let dt = 20e-6;
        let mut sim = Simulation::assemble(&fault_circuit(), dt).unwrap();
        let g0 = sim.companion_conductance("src").unwrap();
        sim.schedule(&events).unwrap();
        sim.advance_to(0.06, None).unwrap();
        assert!(sim.companion_conductance("src").unwrap() < g0);
        assert!(sim.epoch() >= 1);

        let mut sim = Simulation::assemble(&fault_circuit(), dt).unwrap();
        assert!(matches!(
            sim.schedule(&[Event::new(0.1, "nope", EventKind::BreakerOpen)]),
            Err(SolverError::UnknownTarget(_))
        ));
        assert!(matches!(
            sim.schedule(&[Event::new(0.1, "load", EventKind::BreakerOpen)]),
            Err(SolverError::IncompatibleEvent { .. })
        ));
        let unsorted = [
            Event::new(0.2, "a", EventKind::FaultClear),
            Event::new(0.1, "a", EventKind::FaultClear),
        ];
        assert!(matches!(sim.schedule(&unsorted), Err(SolverError::UnsortedEvents)));
    }

    #[test]
    fn empty_schedule_matches_plain_run() {
        let probes = [Probe::voltage("a")];
        let a = run(&fault_circuit(), &[], 0.05, &probes, 20e-6).unwrap();
        let mut sim = Simulation::assemble(&fault_circuit(), 20e-6).unwrap();
        sim.schedule(&[]).unwrap();
        let mut rec = sim.recorder(&probes, 1).unwrap();
        sim.advance_to(0.05, Some(&mut rec)).unwrap();
        assert_eq!(a.to_bytes(), rec.finish(&sim).to_bytes());
    }

    #[test]
    fn waveform_binary_roundtrip() {
        let mut w = run(&fault_circuit(), &[], 0.01, &[Probe::voltage("a"), Probe::current("load", "a")], 1e-4).unwrap();
        w.markers.push(Marker { time: 0.005, label: "x".into() });
        let back = WaveformSet::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back, w);
        let csv = w.to_csv();
        assert!(csv.starts_with("time_s,v(a) [V],i(a->load) [A]\n"));
        assert_eq!(csv.lines().count(), w.len() + 1);
    }

    #[test]
    fn saturating_inductor_refactors() {
        let mut net = Network::new(50.0);
        let a = net.node("a");
        let curve = Characteristic::new(&[(0.0, 0.0), (1.0, 0.01), (1.5, 10.0)]).unwrap();
        net.add(
            "src",
            "",
            ElementKind::RlSource {
                a: Node::GROUND,
                b: a,
                r: 1.0,
                l: 1e-3,
                source: Source::cosine(2.0 * 314.159, 50.0, 0.0),
            },
        )
        .unwrap();
        let p = net.node("p");
        net.add(
            "tf",
            "",
            ElementKind::Transformer(crate::network::TransformerUnit {
                primary: (a, Node::GROUND),
                secondary: (p, Node::GROUND),
                ratio: 1.0,
                r: 1.0,
                l: 1e-3,
                magnetizing: Some(curve),
            }),
        )
        .unwrap();
        net.add("rl", "", ElementKind::Resistor { a: p, b: Node::GROUND, r: 1e6 }).unwrap();
        let mut sim = Simulation::assemble(&net, 20e-6).unwrap();
        sim.advance_to(0.1, None).unwrap();
        // a 2 p.u. flux excursion must cross the knee repeatedly
        assert!(sim.epoch() >= 4, "{}", sim.epoch());
    }
}
