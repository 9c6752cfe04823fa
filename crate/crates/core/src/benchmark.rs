//! Two-area AC network linked by an AC cable and a point-to-point MMC HVDC
//! link, built from study-level parameters.
//!
//! ```text
//! thev1 -- p1 ==== AC cable ==== p2 -- TF1 -- s1 [MMC1] == DC cable == [MMC2] s2 -- TF2 -- p3 -- thev2
//!          |                     |
//!       reactor1              reactor2
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::grid::{
    build_cable, build_transformer, compensation_for_length, default_magnetization_curve, thevenin_from_scc,
    CableConfig, SaturableTransformer, ShuntReactor, REACTOR_QUALITY,
};
use crate::mmc::{ControlRole, MmcParams};
use crate::network::{ElementKind, Network, Node, Source, StationSpec};

pub const PHASES: [&str; 3] = ["a", "b", "c"];

/// Network-level study inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyParams {
    pub frequency_hz: f64,
    pub ac_voltage_kv: f64,
    pub scc1_gva: f64,
    pub scc2_gva: f64,
    pub x_r_ratio: f64,
    pub ac_cable_length_km: f64,
    pub ac_cable_r_ohm_per_km: f64,
    pub ac_cable_l_mh_per_km: f64,
    pub ac_cable_c_uf_per_km: f64,
    /// Sections of the AC cable ladder; 0 selects the default.
    pub ac_cable_sections: usize,
    /// Shunt reactor per cable end (H); absent selects the length lookup,
    /// 0 removes the reactors.
    pub shunt_reactor_h: Option<f64>,
    pub reactor_quality: f64,
    pub dc_cable_length_km: f64,
    pub dc_cable_sections: usize,
    pub tf1_saturation: bool,
    pub tf2_saturation: bool,
    /// (flux p.u., current p.u.) points of the TF1/TF2 magnetizing curve.
    pub magnetization_curve: Vec<(f64, f64)>,
    /// Source ramp from zero at start-up (s).
    pub source_ramp_s: f64,
    pub station1: MmcParams,
    pub station2: MmcParams,
}

impl Default for StudyParams {
    fn default() -> Self {
        let mut station1 = MmcParams::default();
        station1.control_role = ControlRole::PowerControl;
        station1.control.active_power_mw = 1000.0;
        let mut station2 = MmcParams::default();
        station2.control_role = ControlRole::DcVoltageControl;
        Self {
            frequency_hz: 50.0,
            ac_voltage_kv: 400.0,
            scc1_gva: 10.0,
            scc2_gva: 10.0,
            x_r_ratio: 10.0,
            ac_cable_length_km: 160.0,
            ac_cable_r_ohm_per_km: crate::grid::DEFAULT_CABLE_R_PER_KM,
            ac_cable_l_mh_per_km: crate::grid::DEFAULT_CABLE_L_PER_KM,
            ac_cable_c_uf_per_km: crate::grid::DEFAULT_CABLE_C_PER_KM,
            ac_cable_sections: 0,
            shunt_reactor_h: None,
            reactor_quality: REACTOR_QUALITY,
            dc_cable_length_km: 100.0,
            dc_cable_sections: 0,
            tf1_saturation: true,
            tf2_saturation: false,
            magnetization_curve: default_magnetization_curve(),
            source_ramp_s: 0.5,
            station1,
            station2,
        }
    }
}

impl StudyParams {
    pub fn ac_cable(&self) -> CableConfig {
        let mut c = CableConfig::ac(self.ac_cable_length_km);
        c.r_per_km = self.ac_cable_r_ohm_per_km;
        c.l_per_km = self.ac_cable_l_mh_per_km;
        c.c_per_km = self.ac_cable_c_uf_per_km;
        if self.ac_cable_sections > 0 {
            c.n_sections = self.ac_cable_sections;
        }
        c
    }

    pub fn dc_cable(&self) -> CableConfig {
        let mut c = CableConfig::dc(self.dc_cable_length_km);
        if self.dc_cable_sections > 0 {
            c.n_sections = self.dc_cable_sections;
        }
        c
    }

    /// Shunt reactor per cable end, if any.
    pub fn shunt_reactor(&self) -> Option<ShuntReactor> {
        let l = match self.shunt_reactor_h {
            Some(l) if l > 0.0 => Some(l),
            Some(_) => None,
            None => compensation_for_length(self.ac_cable_length_km),
        }?;
        Some(ShuntReactor::with_quality(l, self.reactor_quality, self.frequency_hz))
    }
}

/// Injection point and the element groups on each side of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub name: String,
    /// Bus prefix; the phase suffix is appended (e.g. `p1` → `p1.a`).
    pub bus: String,
    /// Groups forming the AC-side subsystem Z₁.
    pub side1: Vec<String>,
    /// Groups forming the remainder Z₂.
    pub side2: Vec<String>,
}

fn groups(g: &[&str]) -> Vec<String> {
    g.iter().map(|s| s.to_string()).collect()
}

/// Point 1: between equivalent network 1 and the AC cable.
pub fn point1() -> ScanPoint {
    ScanPoint {
        name: "point1".into(),
        bus: "p1".into(),
        side1: groups(&["thevenin1"]),
        side2: groups(&["reactor1", "ac_cable"]),
    }
}

/// Point 2: between the AC cable and converter station 1.
pub fn point2() -> ScanPoint {
    ScanPoint {
        name: "point2".into(),
        bus: "p2".into(),
        side1: groups(&["ac_cable", "reactor2"]),
        side2: groups(&["tf1"]),
    }
}

pub fn scan_point(name: &str) -> Option<ScanPoint> {
    match name {
        "point1" | "1" => Some(point1()),
        "point2" | "2" => Some(point2()),
        _ => None,
    }
}

fn phase_nodes(net: &mut Network, prefix: &str) -> [Node; 3] {
    PHASES.map(|ph| net.node(&format!("{prefix}.{ph}")))
}

fn add_thevenin(
    net: &mut Network,
    name: &str,
    bus: [Node; 3],
    v_kv: f64,
    scc: f64,
    xr: f64,
    f: f64,
    ramp: f64,
) -> Result<(), GridError> {
    let th = thevenin_from_scc(v_kv, scc, xr, f)?;
    for (k, ph) in PHASES.iter().enumerate() {
        net.add(
            format!("{name}.{ph}"),
            name,
            ElementKind::RlSource {
                a: Node::GROUND,
                b: bus[k],
                r: th.r_series,
                l: th.l_series,
                source: Source::cosine(th.emf_peak(), f, -2.0 * PI / 3.0 * k as f64).with_ramp(ramp),
            },
        )?;
    }
    Ok(())
}

fn transformer_for(p: &MmcParams, curve: &[(f64, f64)], saturation: bool) -> SaturableTransformer {
    SaturableTransformer {
        rated_mva: p.rated_power_mva,
        v_primary_kv: p.ac_primary_voltage_kv,
        v_secondary_kv: p.ac_secondary_voltage_kv,
        leakage_pu: p.transformer_reactance_pu,
        resistance_pu: p.transformer_resistance_pu,
        magnetization: curve.to_vec(),
        saturation_enabled: saturation,
    }
}

/// Builds the full benchmark network.
pub fn build_network(p: &StudyParams) -> Result<Network, GridError> {
    let f = p.frequency_hz;
    let mut net = Network::new(f);
    let p1 = phase_nodes(&mut net, "p1");
    let p2 = phase_nodes(&mut net, "p2");
    let s1 = phase_nodes(&mut net, "s1");
    let s2 = phase_nodes(&mut net, "s2");
    let p3 = phase_nodes(&mut net, "p3");
    let (dc1p, dc1n) = (net.node("dc1.p"), net.node("dc1.n"));
    let (dc2p, dc2n) = (net.node("dc2.p"), net.node("dc2.n"));

    add_thevenin(&mut net, "thevenin1", p1, p.ac_voltage_kv, p.scc1_gva, p.x_r_ratio, f, p.source_ramp_s)?;

    let reactor = p.shunt_reactor();
    let ac = build_cable(p.ac_cable())?;
    for (k, ph) in PHASES.iter().enumerate() {
        ac.attach(&mut net, &format!("cable.{ph}"), "ac_cable", p1[k], p2[k])?;
        if let Some(r) = reactor {
            for (name, bus) in [("reactor1", p1[k]), ("reactor2", p2[k])] {
                net.add(
                    format!("{name}.{ph}"),
                    name,
                    ElementKind::RlBranch {
                        a: bus,
                        b: Node::GROUND,
                        r: r.r_loss,
                        l: r.l_shunt,
                    },
                )?;
            }
        }
    }

    let tf1 = build_transformer(&transformer_for(&p.station1, &p.magnetization_curve, p.tf1_saturation), f)?;
    tf1.attach(&mut net, "tf1", "tf1", p2, s1)?;
    net.add_station(StationSpec {
        name: "mmc1".into(),
        group: "mmc1".into(),
        ac: s1,
        dc_pos: dc1p,
        dc_neg: dc1n,
        params: p.station1.clone(),
    })?;

    let dc = build_cable(p.dc_cable())?;
    dc.attach(&mut net, "dccable.p", "dc_cable", dc1p, dc2p)?;
    dc.attach(&mut net, "dccable.n", "dc_cable", dc1n, dc2n)?;

    net.add_station(StationSpec {
        name: "mmc2".into(),
        group: "mmc2".into(),
        ac: s2,
        dc_pos: dc2p,
        dc_neg: dc2n,
        params: p.station2.clone(),
    })?;
    let tf2 = build_transformer(&transformer_for(&p.station2, &p.magnetization_curve, p.tf2_saturation), f)?;
    tf2.attach(&mut net, "tf2", "tf2", p3, s2)?;

    add_thevenin(&mut net, "thevenin2", p3, p.ac_voltage_kv, p.scc2_gva, p.x_r_ratio, f, p.source_ramp_s)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_case_topology() {
        let net = build_network(&StudyParams::default()).unwrap();
        assert_eq!(net.stations().len(), 2);
        assert!(net.element("reactor1.a").is_some());
        assert!(net.element("thevenin2.c").is_some());
        assert!(net.isolated_nodes().is_empty());
        let p = StudyParams {
            ac_cable_length_km: 10.0,
            ..StudyParams::default()
        };
        let net = build_network(&p).unwrap();
        assert!(net.element("reactor1.a").is_none());
    }
}
