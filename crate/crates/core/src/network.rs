//! Element graph shared by the time-domain solver and the frequency scans.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::mmc::MmcParams;

/// Node handle. Ground is a distinguished node that never enters the
/// nodal matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Node(u32);

impl Node {
    pub const GROUND: Node = Node(u32::MAX);

    pub fn index(self) -> Option<usize> {
        (self != Node::GROUND).then_some(self.0 as usize)
    }

    pub fn from_index(index: usize) -> Node {
        Node(index as u32)
    }

    pub fn is_ground(self) -> bool {
        self == Node::GROUND
    }
}

/// Time function driving an independent source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Dc(f64),
    /// `amplitude * cos(2π f (t - t0) + phase)`
    Cosine {
        amplitude: f64,
        frequency: f64,
        phase: f64,
        t0: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub shape: Shape,
    /// Linear ramp from zero over this many seconds (0 = none).
    pub ramp_s: f64,
    /// Raised-cosine onset over this many seconds after the shape's `t0`
    /// (0 = none).
    #[serde(default)]
    pub onset_s: f64,
    pub enabled: bool,
}

impl Source {
    pub fn dc(value: f64) -> Self {
        Self {
            shape: Shape::Dc(value),
            ramp_s: 0.0,
            onset_s: 0.0,
            enabled: true,
        }
    }

    pub fn cosine(amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self {
            shape: Shape::Cosine {
                amplitude,
                frequency,
                phase,
                t0: 0.0,
            },
            ramp_s: 0.0,
            onset_s: 0.0,
            enabled: true,
        }
    }

    pub fn with_ramp(mut self, ramp_s: f64) -> Self {
        self.ramp_s = ramp_s;
        self
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    pub fn value(&self, t: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let (base, t0) = match self.shape {
            Shape::Dc(v) => (v, 0.0),
            Shape::Cosine {
                amplitude,
                frequency,
                phase,
                t0,
            } => (amplitude * (2.0 * PI * frequency * (t - t0) + phase).cos(), t0),
        };
        let mut scale = 1.0;
        if self.ramp_s > 0.0 && t < self.ramp_s {
            scale *= (t / self.ramp_s).max(0.0);
        }
        if self.onset_s > 0.0 && t - t0 < self.onset_s {
            scale *= 0.5 - 0.5 * (PI * ((t - t0) / self.onset_s).max(0.0)).cos();
        }
        base * scale
    }
}

/// Piecewise-linear, odd-symmetric flux/current characteristic in physical
/// units (Wb-turns, A). The stored points cover the positive half including
/// the origin; the last slope extends beyond the final point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Characteristic {
    pub flux: Vec<f64>,
    pub current: Vec<f64>,
}

impl Characteristic {
    /// Validates and builds a characteristic. Points must start at the origin
    /// and increase strictly in both coordinates.
    pub fn new(points: &[(f64, f64)]) -> Result<Self, GridError> {
        if points.len() < 2 {
            return Err(GridError::InvalidCurve("need at least two points".into()));
        }
        if points[0] != (0.0, 0.0) {
            return Err(GridError::InvalidCurve("curve must pass through (0, 0)".into()));
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(GridError::InvalidCurve(format!(
                    "points ({}, {}) -> ({}, {}) are not strictly increasing",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(GridError::InvalidCurve("non-finite point".into()));
        }
        Ok(Self {
            flux: points.iter().map(|p| p.0).collect(),
            current: points.iter().map(|p| p.1).collect(),
        })
    }

    pub fn segments(&self) -> usize {
        self.flux.len() - 1
    }

    /// Segment index containing `|flux|`.
    pub fn segment_of(&self, flux: f64) -> usize {
        let a = flux.abs();
        let last = self.segments() - 1;
        (0..last).find(|&k| a < self.flux[k + 1]).unwrap_or(last)
    }

    /// Incremental inductance of segment `k` (Wb/A).
    pub fn slope_inductance(&self, k: usize) -> f64 {
        (self.flux[k + 1] - self.flux[k]) / (self.current[k + 1] - self.current[k])
    }

    /// Current on segment `k` extended linearly, honoring odd symmetry.
    pub fn current_on_segment(&self, k: usize, flux: f64) -> f64 {
        let a = flux.abs();
        let i = self.current[k] + (a - self.flux[k]) / self.slope_inductance(k);
        i.copysign(flux)
    }

    pub fn current_at(&self, flux: f64) -> f64 {
        self.current_on_segment(self.segment_of(flux), flux)
    }

    /// The first linear segment extended to infinity.
    pub fn linearized(&self) -> Self {
        Self {
            flux: self.flux[..2].to_vec(),
            current: self.current[..2].to_vec(),
        }
    }
}

/// One single-phase two-winding transformer unit.
///
/// The leakage branch is referred to the secondary; the magnetizing branch
/// sits across the primary winding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerUnit {
    pub primary: (Node, Node),
    pub secondary: (Node, Node),
    /// Turns ratio primary/secondary.
    pub ratio: f64,
    pub r: f64,
    pub l: f64,
    pub magnetizing: Option<Characteristic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ElementKind {
    Resistor {
        a: Node,
        b: Node,
        r: f64,
    },
    /// Series R-L branch; current flows `a -> b`.
    RlBranch {
        a: Node,
        b: Node,
        r: f64,
        l: f64,
    },
    Capacitor {
        a: Node,
        b: Node,
        c: f64,
    },
    /// EMF in series with R-L. With current `i` flowing `a -> b`:
    /// `v_a - v_b = R i + L di/dt - e(t)`.
    RlSource {
        a: Node,
        b: Node,
        r: f64,
        l: f64,
        source: Source,
    },
    Transformer(TransformerUnit),
    /// Resistive switch (faults, breakers).
    Switch {
        a: Node,
        b: Node,
        r_closed: f64,
        closed: bool,
    },
    /// Independent current source pushing current from `a` into `b`.
    CurrentSource {
        a: Node,
        b: Node,
        source: Source,
    },
}

impl ElementKind {
    /// Terminal nodes, grounds included.
    pub fn terminals(&self) -> Vec<Node> {
        match self {
            ElementKind::Resistor { a, b, .. }
            | ElementKind::RlBranch { a, b, .. }
            | ElementKind::Capacitor { a, b, .. }
            | ElementKind::RlSource { a, b, .. }
            | ElementKind::Switch { a, b, .. }
            | ElementKind::CurrentSource { a, b, .. } => vec![*a, *b],
            ElementKind::Transformer(t) => {
                vec![t.primary.0, t.primary.1, t.secondary.0, t.secondary.1]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub name: String,
    /// Subsystem label used to split a network at a bus (e.g. `"ac_cable"`).
    pub group: String,
    pub kind: ElementKind,
}

/// MMC station placement in the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSpec {
    pub name: String,
    pub group: String,
    /// Converter-side AC phase nodes.
    pub ac: [Node; 3],
    pub dc_pos: Node,
    pub dc_neg: Node,
    pub params: MmcParams,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Network {
    pub f_nom: f64,
    node_names: Vec<String>,
    node_lookup: BTreeMap<String, Node>,
    elements: Vec<Element>,
    stations: Vec<StationSpec>,
}

impl Network {
    pub fn new(f_nom: f64) -> Self {
        Self {
            f_nom,
            ..Self::default()
        }
    }

    /// Returns the node called `name`, creating it on first use.
    /// The names `"0"` and `"gnd"` denote ground.
    pub fn node(&mut self, name: &str) -> Node {
        if name == "0" || name == "gnd" {
            return Node::GROUND;
        }
        if let Some(&n) = self.node_lookup.get(name) {
            return n;
        }
        let n = Node(self.node_names.len() as u32);
        self.node_names.push(name.to_string());
        self.node_lookup.insert(name.to_string(), n);
        n
    }

    pub fn find_node(&self, name: &str) -> Option<Node> {
        if name == "0" || name == "gnd" {
            return Some(Node::GROUND);
        }
        self.node_lookup.get(name).copied()
    }

    pub fn node_name(&self, node: Node) -> &str {
        match node.index() {
            Some(i) => &self.node_names[i],
            None => "gnd",
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        kind: ElementKind,
    ) -> Result<usize, GridError> {
        let name = name.into();
        if self.element_index(&name).is_some() {
            return Err(GridError::DuplicateElement(name));
        }
        self.elements.push(Element {
            name,
            group: group.into(),
            kind,
        });
        Ok(self.elements.len() - 1)
    }

    pub fn add_station(&mut self, spec: StationSpec) -> Result<usize, GridError> {
        if self.stations.iter().any(|s| s.name == spec.name) {
            return Err(GridError::DuplicateElement(spec.name));
        }
        self.stations.push(spec);
        Ok(self.stations.len() - 1)
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn elements_mut(&mut self) -> &mut [Element] {
        &mut self.elements
    }

    pub fn element_index(&self, name: &str) -> Option<usize> {
        self.elements.iter().position(|e| e.name == name)
    }

    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }

    pub fn stations(&self) -> &[StationSpec] {
        &self.stations
    }

    pub fn stations_mut(&mut self) -> &mut [StationSpec] {
        &mut self.stations
    }

    pub fn station_index(&self, name: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.name == name)
    }

    /// Elements incident to `node` (excluding sources of zero extent).
    pub fn incident(&self, node: Node) -> Vec<usize> {
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind.terminals().contains(&node))
            .map(|(i, _)| i)
            .collect()
    }

    /// Copy of the network restricted to the subsystem seen from `bus`
    /// through the incident elements selected by `keep_incident`.
    ///
    /// The walk starts at the selected incident elements and spreads through
    /// every element sharing a non-ground node, without passing back through
    /// `bus`. Stations reached this way are kept too.
    pub fn subsystem(&self, bus: Node, keep_incident: impl Fn(&Element) -> bool) -> Network {
        let n_el = self.elements.len();
        let mut keep_el = vec![false; n_el];
        let mut keep_st = vec![false; self.stations.len()];
        let mut node_seen = vec![false; self.node_count()];
        let mut stack: Vec<Node> = Vec::new();
        if let Some(i) = bus.index() {
            node_seen[i] = true;
        }
        for (i, e) in self.elements.iter().enumerate() {
            if e.kind.terminals().contains(&bus) && keep_incident(e) {
                keep_el[i] = true;
                stack.extend(e.kind.terminals());
            }
        }
        while let Some(node) = stack.pop() {
            let Some(idx) = node.index() else { continue };
            if node_seen[idx] {
                continue;
            }
            node_seen[idx] = true;
            for (i, e) in self.elements.iter().enumerate() {
                if !keep_el[i] && e.kind.terminals().contains(&node) {
                    keep_el[i] = true;
                    stack.extend(e.kind.terminals());
                }
            }
            for (i, s) in self.stations.iter().enumerate() {
                let nodes = [s.ac[0], s.ac[1], s.ac[2], s.dc_pos, s.dc_neg];
                if !keep_st[i] && nodes.contains(&node) {
                    keep_st[i] = true;
                    stack.extend(nodes);
                }
            }
        }
        let mut out = Network::new(self.f_nom);
        out.node_names = self.node_names.clone();
        out.node_lookup = self.node_lookup.clone();
        out.elements = self
            .elements
            .iter()
            .zip(&keep_el)
            .filter(|(_, &k)| k)
            .map(|(e, _)| e.clone())
            .collect();
        out.stations = self
            .stations
            .iter()
            .zip(&keep_st)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s.clone())
            .collect();
        out
    }

    /// Names of nodes that no element touches.
    pub fn isolated_nodes(&self) -> Vec<String> {
        let mut used = vec![false; self.node_count()];
        for e in &self.elements {
            for t in e.kind.terminals() {
                if let Some(i) = t.index() {
                    used[i] = true;
                }
            }
        }
        for s in &self.stations {
            for t in [s.ac[0], s.ac[1], s.ac[2], s.dc_pos, s.dc_neg] {
                if let Some(i) = t.index() {
                    used[i] = true;
                }
            }
        }
        used.iter()
            .enumerate()
            .filter(|(_, &u)| !u)
            .map(|(i, _)| self.node_names[i].clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_aliases() {
        let mut net = Network::new(50.0);
        assert_eq!(net.node("0"), Node::GROUND);
        assert_eq!(net.node("gnd"), Node::GROUND);
        let a = net.node("a");
        assert_eq!(net.node("a"), a);
        assert_eq!(net.node_count(), 1);
    }

    #[test]
    fn characteristic_rejects_non_monotone() {
        assert!(Characteristic::new(&[(0.0, 0.0), (1.0, 1.0), (0.9, 2.0)]).is_err());
        assert!(Characteristic::new(&[(0.1, 0.0), (1.0, 1.0)]).is_err());
        let c = Characteristic::new(&[(0.0, 0.0), (1.0, 0.01), (2.0, 1.0)]).unwrap();
        assert_eq!(c.current_at(0.0), 0.0);
        assert!((c.current_at(-0.5) + 0.005).abs() < 1e-15);
        assert_eq!(c.segment_of(1.5), 1);
        assert_eq!(c.segment_of(-3.0), 1);
    }

    #[test]
    fn subsystem_stops_at_bus() {
        let mut net = Network::new(50.0);
        let a = net.node("a");
        let bus = net.node("bus");
        let c = net.node("c");
        net.add("left", "g1", ElementKind::Resistor { a, b: bus, r: 1.0 }).unwrap();
        net.add("left_gnd", "g1", ElementKind::Resistor { a, b: Node::GROUND, r: 1.0 }).unwrap();
        net.add("right", "g2", ElementKind::Resistor { a: bus, b: c, r: 1.0 }).unwrap();
        net.add("right_gnd", "g2", ElementKind::Resistor { a: c, b: Node::GROUND, r: 1.0 }).unwrap();
        let sub = net.subsystem(bus, |e| e.group == "g1");
        let names: Vec<_> = sub.elements().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["left", "left_gnd"]);
    }
}
