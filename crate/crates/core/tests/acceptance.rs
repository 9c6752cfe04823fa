//! End-to-end acceptance checks. Each test prints one PASS/FAIL line with
//! the measured quantities; the expensive studies are shared.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resonance_core::analysis::{self, DampingEstimate, DampingOptions, HarmonicPeak, Signal, Taper};
use resonance_core::benchmark::scan_point;
use resonance_core::emt::{run, Probe, Simulation};
use resonance_core::network::{ElementKind, Network, Node, Source};
use resonance_core::scan::{
    direct_scan, phase_deg, side_subsystem, single_bin_dft, unwrap_deg, ImpedanceCurve, ImpedancePair, Provenance,
};
use resonance_core::scenario::{load_scenario, run_study, ResultManifest, Scenario, Stages, StudyOutput};
use resonance_core::stability::{nyquist_screen, ScreenOptions, SensitivityTable, StabilityReport};

const F_NOM: f64 = 50.0;

fn scenario(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    load_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct Study {
    dir: tempfile::TempDir,
    manifest: ResultManifest,
    output: StudyOutput,
}

fn study(name: &str, stages: Stages) -> Study {
    let s = scenario(name);
    let dir = tempfile::tempdir().unwrap();
    let (manifest, output) = run_study(&s, dir.path(), stages).unwrap();
    for st in manifest.failed_stages() {
        println!("{name}: stage {} failed: {:?}", st.name, st.error);
    }
    Study { dir, manifest, output }
}

fn report(name: &str, pass: bool, detail: &str) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

static BASE_A: OnceLock<Study> = OnceLock::new();
static BASE_B: OnceLock<Study> = OnceLock::new();
static SWEEP: OnceLock<SensitivityTable> = OnceLock::new();
static WEAK_LONG: OnceLock<Study> = OnceLock::new();
static WEAK_LONG_SLOW: OnceLock<Study> = OnceLock::new();

fn base_a() -> &'static Study {
    BASE_A.get_or_init(|| study("base_case.toml", Stages::ALL))
}

fn sweep() -> &'static SensitivityTable {
    SWEEP.get_or_init(|| {
        let s = study("sensitivity_sweep.toml", Stages::SWEEP);
        s.output.sweep.expect("sweep table")
    })
}

fn weak_long() -> &'static Study {
    WEAK_LONG.get_or_init(|| study("weak_long_fault.toml", Stages::ALL))
}

fn weak_long_slow() -> &'static Study {
    WEAK_LONG_SLOW.get_or_init(|| study("weak_long_fault_slow_control.toml", Stages::ALL))
}

#[test]
fn scan_matches_direct_solution() {
    let s = scenario("base_case.toml");
    let net = s.network().unwrap();
    let study = base_a();
    let mut worst = (0.0f64, 0.0f64);
    let mut checked = 0;
    let mut failures = Vec::new();
    for r in &study.output.scans {
        let point = scan_point(&r.plan).expect("scan point");
        let node = format!("{}.a", point.bus);
        let sub = side_subsystem(&net, &node, &point.side1).unwrap();
        let z1 = &r.pair.z1;
        let freqs: Vec<f64> = z1.frequencies.clone();
        let direct = direct_scan(&sub, &node, &freqs).unwrap();
        for (k, &f) in freqs.iter().enumerate() {
            if !z1.accepted[k] || f > 750.0 {
                continue;
            }
            let (zs, zd) = (z1.values[k], direct.values[k]);
            let mag = (zs.norm() - zd.norm()).abs() / zd.norm();
            let mut ph = (phase_deg(zs) - phase_deg(zd)).abs();
            if ph > 180.0 {
                ph = 360.0 - ph;
            }
            worst = (worst.0.max(mag), worst.1.max(ph));
            checked += 1;
            if mag > 0.02 || ph > 2.0 {
                failures.push(format!("{} {} Hz: {:.2} % {:.2} deg", point.name, f, 100.0 * mag, ph));
            }
        }
    }
    report(
        "scan_matches_direct_solution",
        checked > 0 && failures.is_empty(),
        &format!(
            "{checked} points, worst {:.3} % / {:.3} deg; {}",
            100.0 * worst.0,
            worst.1,
            if failures.is_empty() { "none outside 2 % / 2 deg".to_string() } else { failures.join(", ") }
        ),
    );
}

fn cell_reports(t: &SensitivityTable, l: f64, s: f64) -> Vec<&StabilityReport> {
    t.axes
        .points
        .iter()
        .filter_map(|p| t.cell(l, s, p).and_then(|c| c.report()))
        .collect()
}

/// Lowest flagged centre or near-flagged intersection over the cell's points.
fn cell_candidate(t: &SensitivityTable, l: f64, s: f64, near: f64) -> Option<f64> {
    cell_reports(t, l, s)
        .iter()
        .filter_map(|r| r.candidate(near))
        .min_by(f64::total_cmp)
}

fn lowest_intersection(r: &StabilityReport) -> Option<f64> {
    r.intersections.iter().filter(|x| !x.tangency).map(|x| x.frequency).next()
}

fn near_margin() -> f64 {
    scenario("sensitivity_sweep.toml").screen.near_margin_deg
}

#[test]
fn sweep_trends() {
    let t = sweep();
    println!("{}", t.to_text());
    let near = near_margin();
    let failed: Vec<String> = t
        .cells
        .iter()
        .filter(|c| c.report().is_none())
        .map(|c| format!("{} km/{} GVA/{}", c.cable_km, c.scc1_gva, c.point))
        .collect();
    let strong = cell_candidate(t, 160.0, 10.0, near);
    let weak = cell_candidate(t, 160.0, 4.7, near);
    let a = matches!((weak, strong), (Some(w), Some(s)) if w < s);
    let mut b = true;
    let mut b_detail = Vec::new();
    for &scc in &t.axes.scc1_gva {
        for p in &t.axes.points {
            let f: Vec<Option<f64>> = [160.0, 80.0, 40.0]
                .iter()
                .map(|&l| t.cell(l, scc, p).and_then(|c| c.report()).and_then(lowest_intersection))
                .collect();
            let ok = match (f[0], f[1], f[2]) {
                (Some(x), Some(y), Some(z)) => x < y && y < z,
                _ => false,
            };
            b &= ok;
            b_detail.push(format!(
                "{p}@{scc}: {}",
                f.iter().map(|x| x.map_or("-".into(), |v| format!("{v:.1}"))).collect::<Vec<_>>().join(" < ")
            ));
        }
    }
    let c = cell_reports(t, 40.0, 10.0).len() == t.axes.points.len()
        && cell_reports(t, 40.0, 10.0).iter().all(|r| r.flagged.is_empty());
    report(
        "sweep_trends",
        failed.is_empty() && a && b && c,
        &format!(
            "failed cells {failed:?}; (a) 160 km candidate {weak:?} Hz at 4.7 GVA vs {strong:?} Hz at 10 GVA: {a}; \
             (b) lowest intersections 160/80/40 km [{}]: {b}; (c) 40 km / 10 GVA unflagged: {c}",
            b_detail.join("; ")
        ),
    );
}

fn clearance_time(set: &resonance_core::emt::WaveformSet) -> f64 {
    set.markers
        .iter()
        .find(|m| m.label.starts_with("fault-clear"))
        .map(|m| m.time)
        .expect("fault-clear marker")
}

fn peaks_of<'a>(study: &'a Study, name: &str) -> &'a [HarmonicPeak] {
    &study
        .output
        .results
        .spectra
        .iter()
        .find(|s| s.name == name)
        .unwrap_or_else(|| panic!("spectrum {name}"))
        .peaks
}

fn damping_at(study: &Study, channel: &str, f0: f64) -> (DampingEstimate, f64) {
    let set = study.output.waveforms.as_ref().expect("waveforms");
    let clear = clearance_time(set);
    let est = analysis::damping_estimate(
        Signal::from_set(set, channel).unwrap(),
        f0,
        clear + 1.0 / F_NOM,
        &DampingOptions {
            reject_fundamental: Some(F_NOM),
            ..DampingOptions::default()
        },
    )
    .unwrap();
    (est, clear)
}

/// Screen candidate of the weak/long cell and the matching peak at Point 2.
fn weak_long_resonance() -> (Option<f64>, Option<f64>) {
    let candidate = cell_candidate(sweep(), 160.0, 4.7, near_margin());
    let peak = candidate.and_then(|c| {
        peaks_of(weak_long(), "p2-after-clearance")
            .iter()
            .filter(|p| (p.frequency - F_NOM).abs() > 1.0 && (p.frequency - c).abs() <= 5.0)
            .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))
            .map(|p| p.frequency)
    });
    (candidate, peak)
}

#[test]
fn fault_response_matches_screen() {
    let (candidate, peak) = weak_long_resonance();
    let Some(f) = peak else {
        report(
            "fault_response_matches_screen",
            false,
            &format!("screen candidate {candidate:?} Hz has no post-clearance peak within 5 Hz at Point 2"),
        );
        return;
    };
    let (est, clear) = damping_at(weak_long(), "v(p2.a)", f);
    let below = est.time_below(0.05);
    let finite = !est.divergent && est.tau.is_finite() && est.tau > 0.0;
    let fast = below.is_some_and(|t| t - clear <= 5.0);
    report(
        "fault_response_matches_screen",
        finite && fast,
        &format!(
            "candidate {:.1} Hz, peak {f:.1} Hz, tau {:.4} s, below 5 % {:?} s after clearance",
            candidate.unwrap_or(f64::NAN),
            est.tau,
            below.map(|t| t - clear)
        ),
    );
}

fn same_peak(a: &HarmonicPeak, b: &HarmonicPeak, resolution: f64) -> bool {
    (a.frequency - b.frequency).abs() <= resolution + 1e-9
}

#[test]
fn protection_adds_harmonics() {
    let on = study("strong_short_protection_on.toml", Stages::ALL);
    let off = study("strong_short_protection_off.toml", Stages::ALL);
    let blocked: Vec<&str> = on
        .output
        .waveforms
        .as_ref()
        .map(|w| w.markers.iter().filter(|m| m.label.contains("block")).map(|m| m.label.as_str()).collect())
        .unwrap_or_default();
    let mut lines = Vec::new();
    let (mut any_extra, mut consistent) = (false, true);
    for name in ["p2-during-fault", "p2-after-clearance"] {
        let p_on = peaks_of(&on, name);
        let p_off = peaks_of(&off, name);
        let res = on.output.spectra.iter().find(|s| s.channel == "v(p2.a)").map_or(2.0, |s| s.resolution);
        let extra: Vec<f64> = p_on
            .iter()
            .filter(|p| !p_off.iter().any(|q| same_peak(p, q, res)))
            .map(|p| p.frequency)
            .collect();
        let subset = p_off.iter().all(|q| p_on.iter().any(|p| same_peak(p, q, res)));
        let ordered = p_off
            .iter()
            .filter(|q| (q.frequency - F_NOM).abs() > 1.0)
            .all(|q| p_on.iter().filter(|p| same_peak(p, q, res)).all(|p| p.amplitude >= q.amplitude));
        any_extra |= !extra.is_empty();
        consistent &= subset && ordered;
        lines.push(format!(
            "{name}: enabled {:?} Hz, disabled {:?} Hz, extra {extra:?}, subset {subset}, amplitude order {ordered}",
            p_on.iter().map(|p| p.frequency).collect::<Vec<_>>(),
            p_off.iter().map(|p| p.frequency).collect::<Vec<_>>()
        ));
    }
    lines.push(format!("protection markers {blocked:?}"));
    report("protection_adds_harmonics", any_extra && consistent, &lines.join("; "));
}

#[test]
fn slower_current_control_prolongs_oscillation() {
    let (_, peak) = weak_long_resonance();
    let Some(f) = peak else {
        report("slower_current_control_prolongs_oscillation", false, "no resonance peak to track");
        return;
    };
    let (fast, _) = damping_at(weak_long(), "v(p2.a)", f);
    let (slow, _) = damping_at(weak_long_slow(), "v(p2.a)", f);
    let ratio = slow.tau / fast.tau;
    report(
        "slower_current_control_prolongs_oscillation",
        !fast.divergent && ratio >= 1.2,
        &format!("at {f:.1} Hz tau {:.4} s (T_c 10 ms) vs {:.4} s (T_c 20 ms), ratio {ratio:.3}", fast.tau, slow.tau),
    );
}

fn rl_max_error(dt: f64) -> f64 {
    let mut net = Network::new(F_NOM);
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
    let w = run(&net, &[], 0.05, &[Probe::current("load", "n1")], dt).unwrap();
    let c = &w.channels[0];
    (0..w.len())
        .map(|k| (c.samples[k] - (1.0 - (-100.0 * w.time(k)).exp())).abs())
        .fold(0.0, f64::max)
}

fn lc_energy_drift() -> f64 {
    let (l, c) = (1e-3, 1e-6);
    let mut net = Network::new(F_NOM);
    let a = net.node("a");
    net.add("l", "", ElementKind::RlBranch { a, b: Node::GROUND, r: 0.0, l }).unwrap();
    net.add("c", "", ElementKind::Capacitor { a, b: Node::GROUND, c }).unwrap();
    let mut sim = Simulation::assemble(&net, 1e-6).unwrap();
    sim.set_initial_voltages(&[("a", 1.0)]).unwrap();
    let mut rec = sim.recorder(&[Probe::voltage("a"), Probe::current("l", "a")], 1).unwrap();
    let period = 2.0 * PI * (l * c).sqrt();
    sim.advance_to(100.0 * period, Some(&mut rec)).unwrap();
    let w = rec.finish(&sim);
    let e0 = 0.5 * c;
    (0..w.len())
        .map(|k| {
            let (v, i) = (w.channels[0].samples[k], w.channels[1].samples[k]);
            ((0.5 * c * v * v + 0.5 * l * i * i - e0) / e0).abs()
        })
        .fold(0.0, f64::max)
}

fn dft_error() -> f64 {
    let dt = 10e-6;
    let mut worst = 0.0f64;
    for &(f, amp, phase, periods) in &[(76.0, 12.78e3, 0.3, 38usize), (50.0, 326.6e3, -1.1, 25), (600.0, 1.0, 2.0, 60)] {
        let n = (periods as f64 / (f * dt)).round() as usize;
        let x: Vec<f64> = (0..n).map(|k| amp * (2.0 * PI * f * k as f64 * dt + phase).cos()).collect();
        let z = single_bin_dft(&x, dt, 0.0, f, 0.0, periods).unwrap();
        let exact = Complex64::from_polar(amp, phase);
        worst = worst.max((z - exact).norm() / amp);
    }
    worst
}

fn parseval_error() -> f64 {
    let dt = 50e-6;
    let n = (0.5 / dt) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            326.6 * (2.0 * PI * 50.0 * t).cos() + 12.78 * (2.0 * PI * 76.0 * t + 0.4).sin() + 3.0 + rng.gen_range(-5.0..5.0)
        })
        .collect();
    let spec = analysis::spectrum(Signal::new(&x, dt, 0.0), 0.0, 0.5, Taper::Rectangular, F_NOM).unwrap();
    let time_energy: f64 = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let last = spec.amplitudes.len() - 1;
    let freq_energy: f64 = spec
        .amplitudes
        .iter()
        .enumerate()
        .map(|(k, a)| if k == 0 || (n.is_multiple_of(2) && k == last) { a * a } else { 0.5 * a * a })
        .sum();
    (time_energy - freq_energy).abs() / time_energy
}

#[test]
fn numerical_core_properties() {
    let ratio = rl_max_error(1e-4) / rl_max_error(5e-5);
    let drift = lc_energy_drift();
    let dft = dft_error();
    let parseval = parseval_error();
    report(
        "numerical_core_properties",
        (3.5..=4.5).contains(&ratio) && drift < 1e-6 && dft < 1e-9 && parseval < 1e-3,
        &format!("RL error ratio {ratio:.3}, LC energy drift {drift:.2e}, DFT error {dft:.2e}, Parseval {parseval:.2e}"),
    );
}

struct SyntheticPair {
    pair: ImpedancePair,
}

/// Curves on a 1 Hz grid with magnitude crossings placed by a sinusoidal
/// log-ratio and a phase difference hovering around the half-turn.
fn synthetic_pair(rng: &mut ChaCha8Rng) -> SyntheticPair {
    let f: Vec<f64> = (1..=700).map(f64::from).collect();
    let level = rng.gen_range(0.0..5.0);
    let (mag_period, mag_shift) = (rng.gen_range(30.0..300.0), rng.gen_range(0.0..700.0));
    let amp = rng.gen_range(0.02..0.5);
    let offset = rng.gen_range(-0.8..0.8) * amp;
    let (ph_period, ph_shift) = (rng.gen_range(80.0..400.0), rng.gen_range(0.0..700.0));
    let centre = if rng.gen_bool(0.8) { 180.0 } else { rng.gen_range(120.0..170.0) };
    let swing = rng.gen_range(0.5..6.0);
    let phase1_mid = rng.gen_range(40.0..80.0);
    let z1: Vec<Complex64> = f
        .iter()
        .map(|&x| {
            let mag = (level + 0.2 * (x / 97.0).sin()).exp();
            let ph = phase1_mid + 30.0 * (2.0 * PI * x / 350.0).sin();
            Complex64::from_polar(mag, ph.to_radians())
        })
        .collect();
    let z2: Vec<Complex64> = f
        .iter()
        .zip(&z1)
        .map(|(&x, z)| {
            let m = offset + amp * (2.0 * PI * (x - mag_shift) / mag_period).sin();
            let dphi = centre + swing * (2.0 * PI * (x - ph_shift) / ph_period).sin();
            Complex64::from_polar(z.norm() * (-m).exp(), (phase_deg(*z) - dphi).to_radians())
        })
        .collect();
    SyntheticPair {
        pair: ImpedancePair {
            z1: ImpedanceCurve::new("Z1", f.clone(), z1, Provenance::Interpolated),
            z2: ImpedanceCurve::new("Z2", f, z2, Provenance::Interpolated),
        },
    }
}

/// Direct evaluation of the criterion on a 1 mHz grid; returns mismatches
/// against the screen's ranges and the number of flagged samples.
fn brute_force(p: &SyntheticPair, opts: &ScreenOptions) -> (usize, usize) {
    let z1 = &p.pair.z1;
    let z2 = &p.pair.z2;
    let m: Vec<f64> = z1.values.iter().zip(&z2.values).map(|(a, b)| a.norm().ln() - b.norm().ln()).collect();
    let u1 = unwrap_deg(&z1.phases_deg());
    let u2 = unwrap_deg(&z2.phases_deg());
    let d: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a - b).collect();
    let ranges = nyquist_screen(&p.pair, opts).flagged;
    let band = (1.0 + opts.eps_z).ln();
    let (f0, n) = (z1.frequencies[0], z1.frequencies.len());
    let mut mismatches = 0;
    let mut flagged = 0;
    let steps = ((z1.frequencies[n - 1] - f0) * 1000.0).round() as usize;
    for s in 0..=steps {
        let f = f0 + s as f64 * 1e-3;
        if f > opts.cap {
            break;
        }
        let k = ((f - f0).floor() as usize).min(n - 2);
        let t = f - z1.frequencies[k];
        let mm = m[k] + t * (m[k + 1] - m[k]);
        let dd = d[k] + t * (d[k + 1] - d[k]);
        let w = dd.rem_euclid(360.0);
        let sep = w.min(360.0 - w);
        let brute = mm.abs() <= band && sep >= 180.0 - opts.phase_tol_deg;
        let near_edge = ranges.iter().any(|&(a, b)| (f - a).abs() < 1e-7 || (f - b).abs() < 1e-7);
        let screened = ranges.iter().any(|&(a, b)| f >= a && f <= b);
        flagged += usize::from(brute);
        if brute != screened && !near_edge {
            mismatches += 1;
        }
    }
    (mismatches, flagged)
}

#[test]
fn screen_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = ScreenOptions::default();
    let mut mismatches = 0;
    let mut with_flags = 0;
    for _ in 0..50 {
        let p = synthetic_pair(&mut rng);
        let (bad, flagged) = brute_force(&p, &opts);
        mismatches += bad;
        with_flags += usize::from(flagged > 0);
    }
    report(
        "screen_matches_brute_force",
        mismatches == 0 && with_flags > 0,
        &format!("50 pairs, {with_flags} with flagged ranges, {mismatches} mismatching 1 mHz samples"),
    );
}

fn artifact_bytes(s: &Study) -> BTreeMap<String, Vec<u8>> {
    s.manifest
        .artifacts
        .iter()
        .map(|a| (a.path.clone(), fs::read(s.dir.path().join(&a.path)).unwrap()))
        .collect()
}

#[test]
fn base_case_is_reproducible() {
    let a = base_a();
    let b = BASE_B.get_or_init(|| study("base_case.toml", Stages::ALL));
    let (fa, fb) = (artifact_bytes(a), artifact_bytes(b));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let same_set = fa.keys().eq(fb.keys());
    let manifest_same = a.manifest.payload_json() == b.manifest.payload_json();
    let has_payload = fa.contains_key("waveforms.wfs") && fa.keys().any(|k| k.starts_with("stability_"));
    report(
        "base_case_is_reproducible",
        same_set && differing.is_empty() && manifest_same && has_payload,
        &format!(
            "{} artifacts compared, differing {differing:?}, manifest payload identical {manifest_same}",
            fa.len()
        ),
    );
}
