//! Averaged switching-function MMC station.
//!
//! Each arm is a series R-L branch with a controlled EMF `m·vCΣ`, where
//! `vCΣ` is the arm's summed submodule capacitor voltage. Control runs once
//! per solver step after the electrical solution and sets the arm EMFs used
//! in the following step.

use std::f64::consts::{FRAC_PI_3, PI};

use serde::{Deserialize, Serialize};

const TWO_PI_3: f64 = 2.0 * FRAC_PI_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlRole {
    /// Regulates active and reactive power at the converter terminals.
    PowerControl,
    /// Regulates the DC pole-to-pole voltage and reactive power.
    DcVoltageControl,
}

/// Station parameters. Field names follow the converter data sheet so that
/// scenario files can be compared against it key by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmcParams {
    pub rated_power_mva: f64,
    pub ac_primary_voltage_kv: f64,
    pub ac_secondary_voltage_kv: f64,
    pub frequency_hz: f64,
    pub dc_pole_to_pole_voltage_kv: f64,
    pub transformer_reactance_pu: f64,
    pub transformer_resistance_pu: f64,
    pub mmc_arm_inductance_pu: f64,
    pub capacitor_energy_in_each_submodule_kj_per_mva: f64,
    pub number_of_submodules_per_arm: u32,
    pub conduction_losses_of_each_igbt_diode_ohm: f64,
    pub star_point_reactor_ohm: f64,
    pub star_point_reactor_h: f64,
    pub inner_current_control_time_constant_s: f64,
    pub dc_current_maximum_limit_protection_pu: f64,
    pub protection_enabled: bool,
    pub protection_confirmation_delay_s: f64,
    pub control_role: ControlRole,
    pub control: ControlTuning,
}

/// Controller settings not fixed by the converter data sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlTuning {
    /// Active power order, positive = injection into the AC network (MW).
    pub active_power_mw: f64,
    pub reactive_power_mvar: f64,
    pub pll_bandwidth_hz: f64,
    pub pll_damping: f64,
    /// Outer loop bandwidth as a fraction of 1/T_c.
    pub outer_bandwidth_ratio: f64,
    pub current_limit_pu: f64,
    pub circulating_current_suppression: bool,
    /// Cut-off of the first-order filter on the grid-voltage feed-forward (Hz).
    pub voltage_feedforward_filter_hz: f64,
    /// Time at which the outer loops are released (s).
    pub release_time_s: f64,
    /// Ramp of the DC voltage and power orders after start / release (s).
    pub ramp_time_s: f64,
}

impl Default for ControlTuning {
    fn default() -> Self {
        Self {
            active_power_mw: 0.0,
            reactive_power_mvar: 0.0,
            pll_bandwidth_hz: 20.0,
            pll_damping: 0.7,
            outer_bandwidth_ratio: 0.1,
            current_limit_pu: 1.1,
            circulating_current_suppression: true,
            voltage_feedforward_filter_hz: 1000.0,
            release_time_s: 0.8,
            ramp_time_s: 0.5,
        }
    }
}

impl Default for MmcParams {
    fn default() -> Self {
        Self {
            rated_power_mva: 1000.0,
            ac_primary_voltage_kv: 400.0,
            ac_secondary_voltage_kv: 320.0,
            frequency_hz: 50.0,
            dc_pole_to_pole_voltage_kv: 640.0,
            transformer_reactance_pu: 0.18,
            transformer_resistance_pu: 0.001,
            mmc_arm_inductance_pu: 0.15,
            capacitor_energy_in_each_submodule_kj_per_mva: 40.0,
            number_of_submodules_per_arm: 400,
            conduction_losses_of_each_igbt_diode_ohm: 0.001,
            star_point_reactor_ohm: 7700.0,
            star_point_reactor_h: 6500.0,
            inner_current_control_time_constant_s: 0.01,
            dc_current_maximum_limit_protection_pu: 6.0,
            protection_enabled: true,
            protection_confirmation_delay_s: 0.02,
            control_role: ControlRole::PowerControl,
            control: ControlTuning::default(),
        }
    }
}

impl MmcParams {
    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            ("rated_power_mva", self.rated_power_mva),
            ("ac_primary_voltage_kv", self.ac_primary_voltage_kv),
            ("ac_secondary_voltage_kv", self.ac_secondary_voltage_kv),
            ("frequency_hz", self.frequency_hz),
            ("dc_pole_to_pole_voltage_kv", self.dc_pole_to_pole_voltage_kv),
            ("transformer_reactance_pu", self.transformer_reactance_pu),
            ("transformer_resistance_pu", self.transformer_resistance_pu),
            ("mmc_arm_inductance_pu", self.mmc_arm_inductance_pu),
            (
                "capacitor_energy_in_each_submodule_kj_per_mva",
                self.capacitor_energy_in_each_submodule_kj_per_mva,
            ),
            ("number_of_submodules_per_arm", self.number_of_submodules_per_arm as f64),
            (
                "conduction_losses_of_each_igbt_diode_ohm",
                self.conduction_losses_of_each_igbt_diode_ohm,
            ),
            ("star_point_reactor_ohm", self.star_point_reactor_ohm),
            ("star_point_reactor_h", self.star_point_reactor_h),
            (
                "inner_current_control_time_constant_s",
                self.inner_current_control_time_constant_s,
            ),
            ("protection_confirmation_delay_s", self.protection_confirmation_delay_s),
            ("pll_bandwidth_hz", self.control.pll_bandwidth_hz),
            ("pll_damping", self.control.pll_damping),
            ("outer_bandwidth_ratio", self.control.outer_bandwidth_ratio),
            ("current_limit_pu", self.control.current_limit_pu),
            ("voltage_feedforward_filter_hz", self.control.voltage_feedforward_filter_hz),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("`{name}` must be positive, got {v}"));
            }
        }
        if !(self.dc_current_maximum_limit_protection_pu > 1.0) {
            return Err(format!(
                "`dc_current_maximum_limit_protection_pu` must exceed 1 p.u., got {}",
                self.dc_current_maximum_limit_protection_pu
            ));
        }
        Ok(())
    }
}

/// Ohmic and per-unit bases derived from [`MmcParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseQuantities {
    /// Converter-side impedance base (Ω).
    pub z_base: f64,
    /// Equivalent arm capacitance (F).
    pub c_arm: f64,
    /// Arm inductance (H).
    pub l_arm: f64,
    /// Transformer leakage inductance, converter side (H).
    pub l_leak: f64,
    /// Arm resistance from device conduction losses (Ω).
    pub r_arm: f64,
    /// Peak phase voltage base, converter side (V).
    pub v_base: f64,
    /// Peak phase current base, converter side (A).
    pub i_base: f64,
    /// DC current base S/V_dc (A).
    pub i_dc_base: f64,
    pub v_dc: f64,
    pub omega: f64,
}

pub fn derive_base_quantities(p: &MmcParams) -> BaseQuantities {
    let s = p.rated_power_mva * 1e6;
    let v_sec = p.ac_secondary_voltage_kv * 1e3;
    let v_dc = p.dc_pole_to_pole_voltage_kv * 1e3;
    let omega = 2.0 * PI * p.frequency_hz;
    let z_base = v_sec * v_sec / s;
    let w_arm = p.capacitor_energy_in_each_submodule_kj_per_mva * 1e3 * p.rated_power_mva / 6.0;
    BaseQuantities {
        z_base,
        c_arm: 2.0 * w_arm / (v_dc * v_dc),
        l_arm: p.mmc_arm_inductance_pu * z_base / omega,
        l_leak: p.transformer_reactance_pu * z_base / omega,
        r_arm: p.number_of_submodules_per_arm as f64 * p.conduction_losses_of_each_igbt_diode_ohm,
        v_base: v_sec * (2.0f64 / 3.0).sqrt(),
        i_base: s * 2.0f64.sqrt() / (3.0f64.sqrt() * v_sec),
        i_dc_base: s / v_dc,
        v_dc,
        omega,
    }
}

/// Blocked-arm conduction state (diode-bridge equivalent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmConduction {
    /// Switching-function operation.
    Active,
    /// Positive current through the upper diodes: capacitors inserted.
    Charging,
    /// Negative current through the bypass diodes.
    Bypassing,
    /// Both diodes reverse-biased; the arm is open.
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    /// Sum of the arm's submodule capacitor voltages (V).
    pub v_cap_sum: f64,
    /// Insertion index in [0, 1].
    pub modulation: f64,
    /// Arm current, positive from DC+ towards DC- (A).
    pub current: f64,
    pub conduction: ArmConduction,
}

impl ArmState {
    pub fn charged(v_cap_sum: f64) -> Self {
        Self {
            v_cap_sum,
            modulation: 0.0,
            current: 0.0,
            conduction: ArmConduction::Active,
        }
    }

    /// Voltage the arm inserts against its current.
    pub fn inserted_voltage(&self) -> f64 {
        match self.conduction {
            ArmConduction::Active => self.modulation * self.v_cap_sum,
            ArmConduction::Charging => self.v_cap_sum,
            ArmConduction::Bypassing | ArmConduction::Open => 0.0,
        }
    }

    fn effective_modulation(&self) -> f64 {
        match self.conduction {
            ArmConduction::Active => self.modulation,
            ArmConduction::Charging => 1.0,
            ArmConduction::Bypassing | ArmConduction::Open => 0.0,
        }
    }

    /// Capacitor update over one step with trapezoidal current averaging.
    /// The stored energy changes by exactly `m·vCΣ·ī·Δt` to first order.
    pub fn integrate(&mut self, new_current: f64, c_arm: f64, dt: f64) {
        let m = self.effective_modulation();
        let i_avg = 0.5 * (self.current + new_current);
        self.v_cap_sum += dt * m * i_avg / c_arm;
        self.current = new_current;
    }
}

/// Norton equivalent of an arm for one solver step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NortonCompanion {
    /// Companion conductance (S); zero for an open arm.
    pub conductance: f64,
    /// Current source in parallel, positive in the arm current direction (A).
    pub current: f64,
}

/// Trapezoidal companion of an arm (R, L in series with the inserted EMF).
///
/// `v_prev` is the terminal voltage (DC+ side minus DC- side) and `e_prev`
/// the inserted voltage at the previous step; `e_next` is the voltage to be
/// inserted during the step.
pub fn arm_interface(
    state: &ArmState,
    r: f64,
    l: f64,
    dt: f64,
    v_prev: f64,
    e_prev: f64,
    e_next: f64,
) -> NortonCompanion {
    if state.conduction == ArmConduction::Open {
        return NortonCompanion {
            conductance: 0.0,
            current: 0.0,
        };
    }
    let k = 2.0 * l / dt - r;
    let g = 1.0 / (2.0 * l / dt + r);
    NortonCompanion {
        conductance: g,
        current: g * (-e_next + (v_prev - e_prev) + k * state.current),
    }
}

/// Synchronous-reference-frame PLL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pll {
    pub theta: f64,
    pub omega: f64,
    integrator: f64,
    kp: f64,
    ki: f64,
    omega_nom: f64,
    v_norm: f64,
}

impl Pll {
    /// `bandwidth_hz` is the natural frequency of the linearized loop.
    pub fn new(f_nom: f64, bandwidth_hz: f64, damping: f64, v_norm: f64) -> Self {
        let wn = 2.0 * PI * bandwidth_hz;
        Self {
            theta: 0.0,
            omega: 2.0 * PI * f_nom,
            integrator: 0.0,
            kp: 2.0 * damping * wn,
            ki: wn * wn,
            omega_nom: 2.0 * PI * f_nom,
            v_norm,
        }
    }

    /// Advances the loop with the phase voltages sampled at the end of the
    /// step; returns the angle for the next step.
    pub fn step(&mut self, v_abc: [f64; 3], dt: f64) -> f64 {
        let (alpha, beta) = clarke(v_abc);
        let vq = -alpha * self.theta.sin() + beta * self.theta.cos();
        // amplitude normalization keeps the loop gain fixed during ramp-up
        let err = vq / alpha.hypot(beta).max(0.1 * self.v_norm);
        self.integrator += self.ki * err * dt;
        self.omega = self.omega_nom + self.kp * err + self.integrator;
        self.theta = (self.theta + self.omega * dt).rem_euclid(2.0 * PI);
        self.theta
    }

    pub fn frequency_hz(&self) -> f64 {
        self.omega / (2.0 * PI)
    }
}

/// Amplitude-invariant Clarke transform (zero sequence dropped).
pub fn clarke(x: [f64; 3]) -> (f64, f64) {
    (
        (2.0 * x[0] - x[1] - x[2]) / 3.0,
        (x[1] - x[2]) / 3.0f64.sqrt(),
    )
}

/// Park transform at angle `theta` (peak-amplitude convention).
pub fn park(x: [f64; 3], theta: f64) -> (f64, f64) {
    let (alpha, beta) = clarke(x);
    let (s, c) = theta.sin_cos();
    (alpha * c + beta * s, -alpha * s + beta * c)
}

pub fn inverse_park(d: f64, q: f64, theta: f64) -> [f64; 3] {
    [
        d * theta.cos() - q * theta.sin(),
        d * (theta - TWO_PI_3).cos() - q * (theta - TWO_PI_3).sin(),
        d * (theta + TWO_PI_3).cos() - q * (theta + TWO_PI_3).sin(),
    ]
}

/// PI regulator with clamped output and conditional-integration anti-windup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pi {
    pub kp: f64,
    pub ki: f64,
    pub integrator: f64,
    pub limit: f64,
}

impl Pi {
    pub fn new(kp: f64, ki: f64, limit: f64) -> Self {
        Self {
            kp,
            ki,
            integrator: 0.0,
            limit,
        }
    }

    pub fn step(&mut self, err: f64, dt: f64) -> f64 {
        let candidate = self.integrator + self.ki * err * dt;
        let out = self.kp * err + candidate;
        if out.abs() <= self.limit || out.signum() != err.signum() {
            self.integrator = candidate;
        }
        (self.kp * err + self.integrator).clamp(-self.limit, self.limit)
    }

    pub fn reset(&mut self) {
        self.integrator = 0.0;
    }
}

/// dq current controller with modulus-optimum gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerCurrentControl {
    pub d: Pi,
    pub q: Pi,
    pub l_eq: f64,
    pub r_eq: f64,
    pub omega: f64,
}

impl InnerCurrentControl {
    /// `k_p = L_eq/T_c`, `k_i = R_eq/T_c`: the PI zero cancels the plant
    /// pole, leaving a first-order closed loop with time constant `T_c`.
    pub fn new(l_eq: f64, r_eq: f64, t_c: f64, omega: f64, v_limit: f64) -> Self {
        Self {
            d: Pi::new(l_eq / t_c, r_eq / t_c, v_limit),
            q: Pi::new(l_eq / t_c, r_eq / t_c, v_limit),
            l_eq,
            r_eq,
            omega,
        }
    }

    /// Converter EMF reference (d, q) for current flowing out of the
    /// converter through `L_eq`, given the feed-forward voltage.
    pub fn step(&mut self, i_ref: (f64, f64), i_meas: (f64, f64), v_ff: (f64, f64), dt: f64) -> (f64, f64) {
        let ud = self.d.step(i_ref.0 - i_meas.0, dt);
        let uq = self.q.step(i_ref.1 - i_meas.1, dt);
        (
            v_ff.0 + ud - self.omega * self.l_eq * i_meas.1,
            v_ff.1 + uq + self.omega * self.l_eq * i_meas.0,
        )
    }
}

/// Active current that delivers `p` watts at d-axis voltage `v_d` (peak).
pub fn power_to_current(p: f64, v_d: f64) -> f64 {
    p / (1.5 * v_d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterControl {
    pub role: ControlRole,
    pub main: Pi,
    pub reactive: Pi,
}

/// Measurements consumed by the outer loops, per unit of station ratings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterMeasurements {
    pub p_pu: f64,
    pub q_pu: f64,
    /// Mean arm capacitor-sum voltage over the DC rating.
    pub v_dc_pu: f64,
    pub v_d_pu: f64,
    /// Power drawn from the DC side.
    pub p_dc_pu: f64,
}

impl OuterControl {
    /// PI gains place the loop bandwidth at `bandwidth` rad/s. For DC
    /// voltage control the station imposes the DC voltage through its arm
    /// voltages and the loop holds the capacitor voltage; `dc_time_constant`
    /// is the stored-energy constant (s) seen by the regulator.
    pub fn new(role: ControlRole, bandwidth: f64, dc_time_constant: f64, limit: f64) -> Self {
        let main = match role {
            ControlRole::PowerControl => Pi::new(0.1, bandwidth, limit),
            ControlRole::DcVoltageControl => {
                let kp = dc_time_constant * bandwidth;
                Pi::new(kp, kp * bandwidth / 4.0, limit)
            }
        };
        Self {
            role,
            main,
            reactive: Pi::new(0.1, bandwidth, limit),
        }
    }

    /// Current references (d, q) in p.u. of the peak phase current base.
    pub fn step(&mut self, p_ref_pu: f64, q_ref_pu: f64, v_dc_ref_pu: f64, m: OuterMeasurements, dt: f64) -> (f64, f64) {
        let vd = m.v_d_pu.max(0.1);
        let id = match self.role {
            ControlRole::PowerControl => {
                let ff = p_ref_pu / vd;
                ff + self.main.step(p_ref_pu - m.p_pu, dt)
            }
            ControlRole::DcVoltageControl => m.p_dc_pu / vd - self.main.step(v_dc_ref_pu - m.v_dc_pu, dt),
        };
        let iq = -q_ref_pu / vd - self.reactive.step(q_ref_pu - m.q_pu, dt);
        (id, iq)
    }

    pub fn reset(&mut self) {
        self.main.reset();
        self.reactive.reset();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtectionMode {
    Normal,
    Pickup,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtectionState {
    pub mode: ProtectionMode,
    pub pickup_time: f64,
}

impl Default for ProtectionState {
    fn default() -> Self {
        Self {
            mode: ProtectionMode::Normal,
            pickup_time: 0.0,
        }
    }
}

/// DC overcurrent protection with confirmation delay; blocking latches.
pub fn protection_step(
    i_dc_pu: f64,
    state: ProtectionState,
    limit_pu: f64,
    confirmation_s: f64,
    enabled: bool,
    t: f64,
) -> ProtectionState {
    if !enabled {
        return ProtectionState::default();
    }
    let over = i_dc_pu.abs() > limit_pu;
    match state.mode {
        ProtectionMode::Blocked => state,
        ProtectionMode::Normal if over => ProtectionState {
            mode: ProtectionMode::Pickup,
            pickup_time: t,
        },
        ProtectionMode::Normal => state,
        ProtectionMode::Pickup if !over => ProtectionState::default(),
        ProtectionMode::Pickup if t - state.pickup_time >= confirmation_s - 1e-12 => ProtectionState {
            mode: ProtectionMode::Blocked,
            pickup_time: state.pickup_time,
        },
        ProtectionMode::Pickup => state,
    }
}

/// Electrical quantities handed to a station after each solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationMeasurements {
    /// Converter-side phase voltages to ground (V).
    pub v_ac: [f64; 3],
    pub v_dc_pos: f64,
    pub v_dc_neg: f64,
    /// Upper arms a, b, c then lower arms a, b, c; positive towards DC-.
    pub arm_currents: [f64; 6],
}

impl StationMeasurements {
    /// AC current out of the converter into each phase node.
    pub fn ac_currents(&self) -> [f64; 3] {
        let a = &self.arm_currents;
        [a[0] - a[3], a[1] - a[4], a[2] - a[5]]
    }

    /// Current entering the converter at the DC+ terminal.
    pub fn dc_current(&self) -> f64 {
        self.arm_currents[..3].iter().sum()
    }
}

/// Run-time state of one station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmcStation {
    pub name: String,
    pub params: MmcParams,
    pub base: BaseQuantities,
    pub arms: [ArmState; 6],
    pub pll: Pll,
    pub inner: InnerCurrentControl,
    pub outer: OuterControl,
    pub circulating: [Pi; 2],
    pub protection: ProtectionState,
    /// Filtered grid voltage (d, q) used for feed-forward.
    pub v_ff: (f64, f64),
    /// Filtered d-axis voltage used by the outer loops.
    pub v_d_slow: f64,
    /// Latest current references (p.u.).
    pub i_ref_pu: (f64, f64),
    /// Latest measured AC current (d, q) in p.u.
    pub i_meas_pu: (f64, f64),
    /// Latest measured P, Q (W, var) and DC current (A).
    pub p_meas: f64,
    pub q_meas: f64,
    pub i_dc: f64,
    /// Outer-loop order overrides applied by parameter events.
    pub p_order_mw: f64,
    /// Capacitor voltage loop feeding the DC current reference (A).
    pub energy: Pi,
    /// Zero-sequence (DC) leg current loop.
    pub zero_sequence: Pi,
    /// Filtered mean capacitor-sum voltage (p.u. of V_dc).
    pub v_cap_pu: f64,
    /// Filtered pole-to-pole DC voltage (V).
    pub v_dc_filtered: f64,
}

impl MmcStation {
    pub fn new(name: &str, params: &MmcParams) -> Self {
        let base = derive_base_quantities(params);
        let t_c = params.inner_current_control_time_constant_s;
        let l_eq = base.l_arm / 2.0;
        let r_eq = base.r_arm / 2.0;
        let outer_bw = params.control.outer_bandwidth_ratio / t_c;
        // stored-energy constant of the six arms
        let tau_dc = 6.0 * base.c_arm * base.v_dc * base.v_dc / (params.rated_power_mva * 1e6);
        let w_e = 2.0 * PI * 3.0;
        let kp_e = 2.0 * base.c_arm * base.v_dc * w_e;
        let kp_0 = base.l_arm / 0.005;
        Self {
            name: name.to_string(),
            params: params.clone(),
            base,
            arms: [ArmState::charged(base.v_dc); 6],
            pll: Pll::new(
                params.frequency_hz,
                params.control.pll_bandwidth_hz,
                params.control.pll_damping,
                base.v_base,
            ),
            inner: InnerCurrentControl::new(l_eq, r_eq, t_c, base.omega, 2.0 * base.v_base),
            outer: OuterControl::new(params.control_role, outer_bw, tau_dc, params.control.current_limit_pu),
            circulating: {
                let kp = 2.0 * base.l_arm / 0.005;
                let ki = kp / 0.02;
                [Pi::new(kp, ki, 0.1 * base.v_dc); 2]
            },
            protection: ProtectionState::default(),
            v_ff: (0.0, 0.0),
            v_d_slow: base.v_base,
            i_ref_pu: (0.0, 0.0),
            i_meas_pu: (0.0, 0.0),
            p_meas: 0.0,
            q_meas: 0.0,
            i_dc: 0.0,
            p_order_mw: params.control.active_power_mw,
            energy: Pi::new(kp_e, kp_e * w_e / 4.0, 0.3 * base.i_dc_base),
            zero_sequence: Pi::new(kp_0, kp_0 / 0.02, 0.1 * base.v_dc),
            v_cap_pu: 1.0,
            v_dc_filtered: 0.0,
        }
    }

    pub fn is_blocked(&self) -> bool {
        self.protection.mode == ProtectionMode::Blocked
    }

    /// Releases a latched block.
    pub fn deblock(&mut self) {
        self.protection = ProtectionState::default();
        for arm in self.arms.iter_mut() {
            arm.conduction = ArmConduction::Active;
        }
        self.inner.d.reset();
        self.inner.q.reset();
        self.energy.reset();
        self.zero_sequence.reset();
    }

    fn ramp(&self, t: f64) -> f64 {
        let r = self.params.control.ramp_time_s;
        if r > 0.0 {
            (t / r).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }

    /// Updates capacitor voltages and controls with the solution at `t`.
    /// Returns the arm EMFs (inserted voltages) for the next step.
    pub fn update(&mut self, meas: &StationMeasurements, t: f64, dt: f64) -> [f64; 6] {
        let b = self.base;
        for (arm, &i) in self.arms.iter_mut().zip(&meas.arm_currents) {
            arm.integrate(i, b.c_arm, dt);
        }
        self.i_dc = meas.dc_current();
        let v_dc_meas = meas.v_dc_pos - meas.v_dc_neg;
        self.v_dc_filtered += (1.0 - (-2.0 * PI * 200.0 * dt).exp()) * (v_dc_meas - self.v_dc_filtered);
        let v_mean = self.arms.iter().map(|a| a.v_cap_sum).sum::<f64>() / 6.0;
        self.v_cap_pu += (1.0 - (-2.0 * PI * 25.0 * dt).exp()) * (v_mean / b.v_dc - self.v_cap_pu);

        let theta = self.pll.theta;
        let i_ac = meas.ac_currents();
        let (vd, vq) = park(meas.v_ac, theta);
        let (id, iq) = park(i_ac, theta);
        self.i_meas_pu = (id / b.i_base, iq / b.i_base);
        self.p_meas = 1.5 * (vd * id + vq * iq);
        self.q_meas = 1.5 * (vq * id - vd * iq);

        let a_ff = 1.0 - (-2.0 * PI * self.params.control.voltage_feedforward_filter_hz * dt).exp();
        self.v_ff.0 += a_ff * (vd - self.v_ff.0);
        self.v_ff.1 += a_ff * (vq - self.v_ff.1);
        let a_slow = 1.0 - (-20.0 * dt).exp();
        self.v_d_slow += a_slow * (vd - self.v_d_slow);

        self.protection = protection_step(
            self.i_dc / b.i_dc_base,
            self.protection,
            self.params.dc_current_maximum_limit_protection_pu,
            self.params.protection_confirmation_delay_s,
            self.params.protection_enabled,
            t,
        );

        if self.is_blocked() {
            self.update_blocked(meas);
            self.pll.step(meas.v_ac, dt);
            return self.arm_voltages();
        }

        let s = self.params.rated_power_mva * 1e6;
        let ctl = &self.params.control;
        let dc_role = self.params.control_role == ControlRole::DcVoltageControl;
        let released = t >= ctl.release_time_s;
        let i_ref = if released || dc_role {
            let since = t - ctl.release_time_s;
            let order_ramp = if ctl.ramp_time_s > 0.0 {
                (since / ctl.ramp_time_s).min(1.0)
            } else {
                1.0
            };
            let m = OuterMeasurements {
                p_pu: self.p_meas / s,
                q_pu: self.q_meas / s,
                v_dc_pu: self.v_cap_pu,
                v_d_pu: self.v_d_slow / b.v_base,
                p_dc_pu: v_dc_meas * self.i_dc / s,
            };
            self.outer.step(
                order_ramp * self.p_order_mw * 1e6 / s,
                order_ramp * ctl.reactive_power_mvar * 1e6 / s,
                1.0,
                m,
                dt,
            )
        } else {
            self.outer.reset();
            (0.0, 0.0)
        };
        let lim = ctl.current_limit_pu;
        let mag = i_ref.0.hypot(i_ref.1);
        let i_ref = if mag > lim {
            (i_ref.0 * lim / mag, i_ref.1 * lim / mag)
        } else {
            i_ref
        };
        self.i_ref_pu = i_ref;

        let e_dq = self.inner.step(
            (i_ref.0 * b.i_base, i_ref.1 * b.i_base),
            (id, iq),
            self.v_ff,
            dt,
        );

        let theta_next = self.pll.step(meas.v_ac, dt);
        let e_diff = inverse_park(e_dq.0, e_dq.1, theta_next + b.omega * dt * 0.5);

        let u_circ = if ctl.circulating_current_suppression {
            let i_dc3 = self.i_dc / 3.0;
            let circ = [
                0.5 * (meas.arm_currents[0] + meas.arm_currents[3]) - i_dc3,
                0.5 * (meas.arm_currents[1] + meas.arm_currents[4]) - i_dc3,
                0.5 * (meas.arm_currents[2] + meas.arm_currents[5]) - i_dc3,
            ];
            // circulating currents form a negative-sequence set at 2ω
            let (cd, cq) = park(circ, -2.0 * theta);
            let ud = self.circulating[0].step(-cd, dt);
            let uq = self.circulating[1].step(-cq, dt);
            inverse_park(ud, uq, -2.0 * theta_next)
        } else {
            [0.0; 3]
        };

        // the DC-voltage station imposes the pole voltage; the other follows
        // it and draws the DC current that keeps its capacitors charged
        let (half_dc, u_zero) = if dc_role {
            (0.5 * b.v_dc * self.ramp(t), 0.0)
        } else {
            let v = self.v_dc_filtered.max(0.1 * b.v_dc);
            let i0_ref = self.p_meas / (3.0 * v) + self.energy.step(1.0 - self.v_cap_pu, dt);
            let u0 = self.zero_sequence.step(i0_ref - self.i_dc / 3.0, dt);
            (0.5 * self.v_dc_filtered, u0)
        };
        for k in 0..3 {
            let upper = half_dc - e_diff[k] - u_circ[k] - u_zero;
            let lower = half_dc + e_diff[k] - u_circ[k] - u_zero;
            // compensated modulation: divide by the measured capacitor sum
            let vu = self.arms[k].v_cap_sum.max(0.1 * b.v_dc);
            let vl = self.arms[k + 3].v_cap_sum.max(0.1 * b.v_dc);
            self.arms[k].modulation = (upper / vu).clamp(0.0, 1.0);
            self.arms[k + 3].modulation = (lower / vl).clamp(0.0, 1.0);
        }
        self.arm_voltages()
    }

    fn arm_voltages(&self) -> [f64; 6] {
        let mut e = [0.0; 6];
        for (out, arm) in e.iter_mut().zip(&self.arms) {
            *out = arm.inserted_voltage();
        }
        e
    }

    /// Diode-bridge conduction logic for blocked arms.
    fn update_blocked(&mut self, meas: &StationMeasurements) {
        for k in 0..6 {
            let (hi, lo) = if k < 3 {
                (meas.v_dc_pos, meas.v_ac[k])
            } else {
                (meas.v_ac[k - 3], meas.v_dc_neg)
            };
            let v_arm = hi - lo;
            let arm = &mut self.arms[k];
            let i = arm.current;
            arm.conduction = match arm.conduction {
                ArmConduction::Active => {
                    if i > 0.0 {
                        ArmConduction::Charging
                    } else {
                        ArmConduction::Bypassing
                    }
                }
                ArmConduction::Charging if i <= 0.0 => ArmConduction::Open,
                ArmConduction::Bypassing if i >= 0.0 => ArmConduction::Open,
                ArmConduction::Open if v_arm > arm.v_cap_sum => ArmConduction::Charging,
                ArmConduction::Open if v_arm < 0.0 => ArmConduction::Bypassing,
                other => other,
            };
            if arm.conduction == ArmConduction::Open {
                arm.current = 0.0;
            }
        }
    }

    /// Conduction state of every arm (open arms are removed from the matrix).
    pub fn arm_open(&self) -> [bool; 6] {
        let mut out = [false; 6];
        for (o, a) in out.iter_mut().zip(&self.arms) {
            *o = a.conduction == ArmConduction::Open;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_one() -> MmcParams {
        MmcParams::default()
    }

    #[test]
    fn base_quantities_match_data_sheet() {
        let b = derive_base_quantities(&table_one());
        assert!((b.c_arm * 1e6 - 32.55).abs() < 5e-3, "{}", b.c_arm);
        assert!((b.l_arm * 1e3 - 48.89).abs() < 5e-3, "{}", b.l_arm);
        assert!((b.l_leak * 1e3 - 58.67).abs() < 5e-3);
        assert!((b.z_base - 102.4).abs() < 1e-9);
        assert!((b.r_arm - 0.4).abs() < 1e-12);
        let mut p = table_one();
        p.capacitor_energy_in_each_submodule_kj_per_mva = 0.0;
        assert_eq!(derive_base_quantities(&p).c_arm, 0.0);
        assert!(p.validate().is_err());
        assert!(table_one().validate().is_ok());
    }

    #[test]
    fn arm_capacitor_dynamics() {
        let c = 32.55e-6;
        let mut arm = ArmState::charged(640e3);
        arm.integrate(100.0, c, 1e-3);
        assert_eq!(arm.v_cap_sum, 640e3);
        assert_eq!(arm.inserted_voltage(), 0.0);

        let mut arm = ArmState::charged(640e3);
        arm.modulation = 0.5;
        arm.current = 100.0;
        let dt = 1e-6;
        arm.integrate(100.0, c, dt);
        let rate = (arm.v_cap_sum - 640e3) / dt;
        assert!((rate - 1.536e6).abs() / 1.536e6 < 1e-3, "{rate}");
    }

    #[test]
    fn arm_energy_bookkeeping() {
        let c = 32.55e-6;
        let dt = 20e-6;
        let mut arm = ArmState::charged(640e3);
        arm.modulation = 0.37;
        arm.current = 850.0;
        let v0 = arm.v_cap_sum;
        let e0 = 0.5 * c * v0 * v0;
        arm.integrate(870.0, c, dt);
        let v1 = arm.v_cap_sum;
        let e1 = 0.5 * c * v1 * v1;
        // power absorbed with the mid-step capacitor voltage
        let p = 0.37 * 0.5 * (v0 + v1) * 0.5 * (850.0 + 870.0);
        assert!(((e1 - e0) - p * dt).abs() < 1e-9 * e0);
    }

    #[test]
    fn open_arm_has_no_companion() {
        let mut arm = ArmState::charged(640e3);
        arm.conduction = ArmConduction::Open;
        let nc = arm_interface(&arm, 0.4, 0.05, 20e-6, 1e5, 0.0, 0.0);
        assert_eq!(nc.conductance, 0.0);
        assert_eq!(nc.current, 0.0);
        let arm = ArmState::charged(640e3);
        let nc = arm_interface(&arm, 0.0, 1.0, 1e-3, 0.0, 0.0, 0.0);
        assert!((nc.conductance - 5e-4).abs() < 1e-15);
    }

    /// Discrete simulation of the inner loop on its design plant
    /// L di/dt = u - R i (feed-forward cancels the grid voltage exactly).
    fn inner_step_response(t_c: f64) -> f64 {
        let b = derive_base_quantities(&table_one());
        let (l, r) = (b.l_arm / 2.0, b.r_arm / 2.0);
        let mut ctl = InnerCurrentControl::new(l, r, t_c, 0.0, 1e9);
        let dt = 10e-6;
        let mut i = 0.0;
        let mut t = 0.0;
        let target = 1000.0;
        loop {
            let (u, _) = ctl.step((target, 0.0), (i, 0.0), (0.0, 0.0), dt);
            // exact ZOH update of the RL plant
            let a = (-r / l * dt).exp();
            i = a * i + (1.0 - a) * u / r;
            t += dt;
            if i >= (1.0 - (-1.0f64).exp()) * target {
                return t;
            }
        }
    }

    #[test]
    fn inner_loop_time_constant() {
        let t63 = inner_step_response(0.01);
        assert!((t63 - 0.01).abs() < 0.05 * 0.01, "{t63}");
        let t63 = inner_step_response(0.02);
        assert!((t63 - 0.02).abs() < 0.05 * 0.02, "{t63}");
    }

    #[test]
    fn zero_error_keeps_integrator() {
        let mut ctl = InnerCurrentControl::new(0.02, 0.2, 0.01, 0.0, 1e9);
        ctl.d.integrator = 12.5;
        let out = ctl.step((5.0, 0.0), (5.0, 0.0), (0.0, 0.0), 1e-5);
        assert_eq!(ctl.d.integrator, 12.5);
        assert_eq!(out.0, 12.5);
    }

    #[test]
    fn power_order_to_current() {
        let b = derive_base_quantities(&table_one());
        let id = power_to_current(1000e6, b.v_base);
        assert!((id / b.i_base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outer_loop_zero_error_holds_reference() {
        let mut o = OuterControl::new(ControlRole::DcVoltageControl, 10.0, 0.16, 1.1);
        o.main.integrator = 0.4;
        let m = OuterMeasurements {
            p_pu: 0.0,
            q_pu: 0.0,
            v_dc_pu: 1.0,
            v_d_pu: 1.0,
            p_dc_pu: 0.0,
        };
        let (id, _) = o.step(0.0, 0.0, 1.0, m, 1e-5);
        assert!((id + 0.4).abs() < 1e-12);
    }

    fn balanced(t: f64, f: f64, v: f64) -> [f64; 3] {
        let w = 2.0 * PI * f * t;
        [v * w.cos(), v * (w - TWO_PI_3).cos(), v * (w + TWO_PI_3).cos()]
    }

    #[test]
    fn pll_locks_to_balanced_set() {
        let v = 261e3;
        let mut pll = Pll::new(50.0, 20.0, 0.7, v);
        pll.theta = 1.0;
        let dt = 20e-6;
        let mut t = 0.0;
        while t < 0.3 {
            t += dt;
            pll.step(balanced(t, 50.0, v), dt);
        }
        let target = (2.0 * PI * 50.0 * (t + dt)).rem_euclid(2.0 * PI);
        let err = (pll.theta - target + PI).rem_euclid(2.0 * PI) - PI;
        assert!(err.abs() < 0.01, "phase error {err}");
        assert!((pll.frequency_hz() - 50.0).abs() < 0.01);
    }

    #[test]
    fn pll_tracks_frequency_step() {
        let v = 261e3;
        let mut pll = Pll::new(50.0, 20.0, 0.7, v);
        let dt = 20e-6;
        let mut t = 0.0;
        let mut phase = 0.0;
        let w55 = 2.0 * PI * 55.0;
        while t < 0.3 {
            t += dt;
            phase += 2.0 * PI * 50.0 * dt;
            let p = phase;
            pll.step([v * p.cos(), v * (p - TWO_PI_3).cos(), v * (p + TWO_PI_3).cos()], dt);
        }
        // five loop time constants 1/(ζ ωn)
        let settle = 5.0 / (0.7 * 2.0 * PI * 20.0);
        let t_step = t;
        while t < t_step + settle {
            t += dt;
            phase += w55 * dt;
            let p = phase;
            pll.step([v * p.cos(), v * (p - TWO_PI_3).cos(), v * (p + TWO_PI_3).cos()], dt);
        }
        assert!((pll.frequency_hz() - 55.0).abs() < 0.05, "{}", pll.frequency_hz());
    }

    #[test]
    fn pll_free_runs_on_frozen_input() {
        let mut pll = Pll::new(50.0, 20.0, 0.7, 1.0);
        pll.theta = 0.0;
        let dt = 1e-4;
        // zero input: no correction, angle advances at the estimate
        let w = pll.omega;
        pll.step([0.0; 3], dt);
        assert!((pll.theta - w * dt).abs() < 1e-12);
    }

    #[test]
    fn protection_transitions() {
        let (lim, conf) = (6.0, 0.02);
        let mut s = ProtectionState::default();
        let dt = 1e-4;
        let mut t = 0.0;
        while t < 0.0205 {
            s = protection_step(6.1, s, lim, conf, true, t);
            t += dt;
        }
        assert_eq!(s.mode, ProtectionMode::Blocked);
        // latched even when current recovers
        s = protection_step(0.0, s, lim, conf, true, t);
        assert_eq!(s.mode, ProtectionMode::Blocked);

        let mut s = ProtectionState::default();
        for k in 0..10_000 {
            s = protection_step(5.9, s, lim, conf, true, k as f64 * dt);
        }
        assert_eq!(s.mode, ProtectionMode::Normal);

        // dropout before confirmation
        let mut s = protection_step(7.0, ProtectionState::default(), lim, conf, true, 0.0);
        assert_eq!(s.mode, ProtectionMode::Pickup);
        s = protection_step(1.0, s, lim, conf, true, 0.01);
        assert_eq!(s.mode, ProtectionMode::Normal);

        let mut s = ProtectionState::default();
        for k in 0..1000 {
            s = protection_step(50.0, s, lim, conf, false, k as f64 * dt);
            assert_eq!(s.mode, ProtectionMode::Normal);
        }
    }

    #[test]
    fn park_roundtrip() {
        let x = inverse_park(3.0, -1.5, 0.7);
        let (d, q) = park(x, 0.7);
        assert!((d - 3.0).abs() < 1e-12 && (q + 1.5).abs() < 1e-12);
    }
}
