//! Acceptance checks. Each check prints one PASS/FAIL line; the process exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use peps_core::contraction::{amplitude, amplitude_bruteforce, ContractionCache};
use peps_core::ed::{exact_ground_energy, expand_peps, rayleigh_quotient};
use peps_core::gradient_opt::{run_go_with, GoSchedule};
use peps_core::lattice::{LatticeSpec, Site, SpinConfig};
use peps_core::monte_carlo::{
    enumerated_distribution, enumerated_energy, enumerated_energy_full, enumerated_gradient, run_sampling,
    sample_observable, McParams,
};
use peps_core::observables::{
    bulk_window, enumerated_correlations, quadratic_extrapolation, spin_correlation, staggered_from_correlations,
    staggered_magnetization, staggered_sign, window_pairs, FitWeights, SizePoint,
};
use peps_core::peps::PepsState;
use peps_core::simple_update::{run_simple_update, SuSchedule};
use peps_core::Result;

const SITES_4X4: f64 = 16.0;
/// Seed of the random initial tensors for every simple-update and GO run.
const INIT_SEED: u64 = 1;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, criterion: u32, label: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} criterion {criterion}: {label}: {detail}", if pass { "PASS" } else { "FAIL" });
    }

    fn error(&mut self, criterion: u32, err: peps_core::PepsError) {
        self.check(criterion, "run", false, format!("error: {err}"));
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn heisenberg_4x4() -> LatticeSpec {
    LatticeSpec::heisenberg(4, 4).expect("valid lattice")
}

fn simple_update_state(d: usize) -> Result<PepsState> {
    let init = PepsState::random_init(&heisenberg_4x4(), d, INIT_SEED)?;
    Ok(run_simple_update(&init, &SuSchedule::standard())?.0)
}

/// Desk-scale GO from the simple-update state, one walker, `Dc = 2D`.
fn optimized_state(su: &PepsState) -> Result<PepsState> {
    let d = su.bond_dim();
    let mc = McParams::new(1, 1, 2 * d, 0);
    let t0 = Instant::now();
    let (best, trace) = run_go_with(su, &GoSchedule::desk(), &mc, |r, _| {
        if r.step % 10 == 9 {
            eprintln!("  GO D={d} step {} E/N {:.5}({:.0e}) {:.0}s", r.step + 1, r.energy, r.std_error, t0.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    if let Some(r) = trace.best_record() {
        eprintln!("  GO D={d} best sampled step {} E/N {:.5}", r.step, r.energy);
    }
    Ok(best)
}

fn criterion_1(rep: &mut Report) -> Option<f64> {
    let cases = [(4, 4, 0.0, -0.57432544), (4, 6, 0.0, -0.58871445), (4, 6, 0.5, -0.47437906), (4, 6, 0.56, -0.46350353)];
    let mut e44 = None;
    for (rows, cols, j2, target) in cases {
        let spec = LatticeSpec::new(rows, cols, 1.0, j2).expect("valid lattice");
        let t0 = Instant::now();
        match exact_ground_energy(&spec, 0) {
            Ok(r) => {
                if (rows, cols) == (4, 4) {
                    e44 = Some(r.energy_per_site);
                }
                rep.check(
                    1,
                    &format!("ED {rows}x{cols} J2={j2}"),
                    within(r.energy_per_site, target, 1e-7),
                    format!("{:.10} vs {target} (tol 1e-7, {:.0}s)", r.energy_per_site, t0.elapsed().as_secs_f64()),
                );
            }
            Err(e) => rep.error(1, e),
        }
    }
    e44
}

fn criterion_2(rep: &mut Report, states: &[(usize, PepsState)]) {
    for (d, target) in [(2, -0.5456), (3, -0.5548)] {
        let Some((_, su)) = states.iter().find(|(k, _)| *k == d) else { continue };
        match enumerated_energy_full(su, 2 * d) {
            Ok(e) => {
                let e = e / SITES_4X4;
                rep.check(2, &format!("SU 4x4 D={d}"), within(e, target, 5e-3), format!("{e:.6} vs {target} (tol 5e-3)"));
            }
            Err(e) => rep.error(2, e),
        }
    }
}

fn criterion_5(rep: &mut Report) {
    let spec = LatticeSpec::heisenberg(2, 3).expect("valid lattice");
    let state = PepsState::random_init(&spec, 2, 11).expect("valid state");
    let dc_full = 16;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let spins = (0..6).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        let cfg = SpinConfig::from_spins(2, 3, spins).expect("valid config");
        let exact = amplitude_bruteforce(&state, &cfg).expect("brute force");
        let w = amplitude(&state, &cfg, dc_full).expect("boundary").value();
        worst = worst.max((w - exact).abs() / exact.abs());
    }
    rep.check(5, "(a) boundary amplitude vs brute force", worst <= 1e-9, format!("max relative error {worst:.2e} over 100 configs (tol 1e-9)"));

    let exact_energy = enumerated_energy(&state, dc_full, 0).expect("enumeration");
    let (exact_grad, _) = enumerated_gradient(&state, dc_full, 0).expect("enumeration");
    let t0 = Instant::now();
    let run = match run_sampling(&state, &McParams::new(1_000_000, 1, dc_full, 7), None, true) {
        Ok(r) => r,
        Err(e) => return rep.error(5, e),
    };
    let e = run.energy;
    rep.check(
        5,
        "(b) MC energy vs enumeration",
        (e.mean - exact_energy).abs() <= 3.0 * e.std_error,
        format!("{:.6} +- {:.1e} vs {exact_energy:.6} at M=1e6 ({:.0}s)", e.mean, e.std_error, t0.elapsed().as_secs_f64()),
    );

    let grad = run.gradient.expect("gradient requested");
    let (mut n, mut outside, mut worst_z) = (0usize, 0usize, 0.0f64);
    for ((g, s), x) in grad.gradient.iter().zip(&grad.std_error).zip(&exact_grad) {
        for ((gi, si), xi) in g.data().iter().zip(s.data()).zip(x.data()) {
            n += 1;
            let diff = (gi - xi).abs();
            let z = if *si > 0.0 { diff / si } else if diff < 1e-12 { 0.0 } else { f64::INFINITY };
            worst_z = worst_z.max(z);
            if z > 3.0 {
                outside += 1;
            }
        }
    }
    rep.check(5, "(c) MC gradient vs enumeration", outside == 0, format!("{outside} of {n} elements beyond 3 sigma, max |z| {worst_z:.2}"));

    let energy_of = |s: &PepsState| rayleigh_quotient(&spec, &expand_peps(s).expect("expansion"), Some(0)).expect("quotient");
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, x) in exact_grad.iter().enumerate() {
        for (k, xk) in x.data().iter().enumerate() {
            let mut plus = state.clone();
            plus.tensors_mut()[t].data_mut()[k] += h;
            let mut minus = state.clone();
            minus.tensors_mut()[t].data_mut()[k] -= h;
            let fd = (energy_of(&plus) - energy_of(&minus)) / (2.0 * h);
            num += (xk - fd).powi(2);
            den += fd * fd;
        }
    }
    let rel = (num / den).sqrt();
    rep.check(5, "(d) enumerated gradient vs finite differences", rel <= 1e-5, format!("relative error {rel:.2e} (tol 1e-5)"));
}

fn criterion_6(rep: &mut Report) {
    let spec = LatticeSpec::heisenberg(2, 3).expect("valid lattice");
    let state = PepsState::random_init(&spec, 2, 12).expect("valid state");
    let (basis, probs) = enumerated_distribution(&state, 16, 0).expect("enumeration");
    let samples = 1_000_000;
    let params = McParams::new(samples, 1, 16, 9);
    let histogram = |cache: &mut ContractionCache<'_>| -> Result<Vec<f64>> {
        let mut v = vec![0.0; basis.len()];
        v[basis.index(cache.config().to_bits())] = 1.0;
        Ok(v)
    };
    let t0 = Instant::now();
    match sample_observable(&state, &params, histogram) {
        Ok(bins) => {
            let mut freq = vec![0.0; basis.len()];
            for b in &bins {
                freq.iter_mut().zip(b).for_each(|(f, x)| *f += x / bins.len() as f64);
            }
            let tv = freq.iter().zip(&probs).map(|(f, p)| (f - p).abs()).sum::<f64>() / 2.0;
            rep.check(
                6,
                "sampled distribution vs W^2/Z on 2x3 D=2",
                tv < 0.01,
                format!("total variation {tv:.2e} at 1e6 samples (tol 0.01, {:.0}s)", t0.elapsed().as_secs_f64()),
            );
        }
        Err(e) => rep.error(6, e),
    }
}

fn criterion_8(rep: &mut Report) {
    let energies = [
        (8.0, -0.619013, 2e-6),
        (10.0, -0.628507, 1e-6),
        (12.0, -0.634958, 1e-6),
        (14.0, -0.639697, 5e-6),
        (16.0, -0.643330, 5e-6),
    ];
    let points: Vec<SizePoint> = energies.iter().map(|&(size, value, error)| SizePoint { size, value, error }).collect();
    for (weights, name) in [(FitWeights::Uniform, "uniform"), (FitWeights::InverseVariance, "inverse-variance")] {
        match quadratic_extrapolation(&points, weights) {
            Ok(fit) => rep.check(
                8,
                &format!("quadratic extrapolation of D=8 energies, L=8..16, {name} weights"),
                within(fit.value, -0.66977, 5e-4),
                format!("{:.6} +- {:.1e} vs -0.66977 (tol 5e-4)", fit.value, fit.error),
            ),
            Err(e) => rep.error(8, e),
        }
    }
}

fn criterion_9(rep: &mut Report) {
    for (rows, cols) in [(4, 4), (6, 6)] {
        let spec = LatticeSpec::heisenberg(rows, cols).expect("valid lattice");
        let local: Vec<[f64; 2]> = (0..spec.n_sites())
            .map(|i| if staggered_sign(spec.site(i)) > 0.0 { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        let neel = PepsState::product_state(&spec, &local).expect("product state");
        let mc = McParams::new(20, 1, 2, 0);
        for margin in 0..rows / 2 {
            let n = bulk_window(&spec, margin).expect("window").len() as f64;
            let expect = 0.25 + 0.5 / n;
            match staggered_magnetization(&neel, margin, &mc) {
                Ok((m, err)) => rep.check(
                    9,
                    &format!("Neel m_s^2 on {rows}x{cols}, margin {margin}"),
                    within(m, expect, 1e-12) && err == 0.0,
                    format!("{m:.12} vs 1/4 + 1/(2N) = {expect:.12}, N={n}"),
                ),
                Err(e) => rep.error(9, e),
            }
        }
    }
    let spec = heisenberg_4x4();
    let local: Vec<[f64; 2]> =
        (0..16).map(|i| if staggered_sign(spec.site(i)) > 0.0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let neel = PepsState::product_state(&spec, &local).expect("product state");
    let window: Vec<Site> = (0..16).map(|i| spec.site(i)).collect();
    let pairs = window_pairs(&window);
    let exact = enumerated_correlations(&neel, 2, 0, &pairs);
    let sampled = spin_correlation(&neel, &pairs, &McParams::new(20, 1, 2, 0));
    match (exact, sampled) {
        (Ok(exact), Ok(sampled)) => {
            let agree = exact.iter().zip(&sampled.values).all(|(x, s)| x == &s.mean);
            let (m, _) = staggered_from_correlations(&sampled, &window).expect("assembly");
            rep.check(
                9,
                "Neel correlations, sampled vs enumerated",
                agree && within(m, 0.25 + 0.5 / 16.0, 1e-12),
                format!("{} pairs, m_s^2 {m:.12}", pairs.len()),
            );
        }
        (Err(e), _) | (_, Err(e)) => rep.error(9, e),
    }
}

fn main() -> ExitCode {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |c: u32| wanted.is_empty() || wanted.contains(&c);
    let mut rep = Report { failed: 0 };
    let t0 = Instant::now();

    let mut ed_4x4 = None;
    if run(1) || run(4) {
        ed_4x4 = criterion_1(&mut rep);
    }
    if run(5) {
        criterion_5(&mut rep);
    }
    if run(6) {
        criterion_6(&mut rep);
    }
    if run(8) {
        criterion_8(&mut rep);
    }
    if run(9) {
        criterion_9(&mut rep);
    }

    let mut dims = BTreeSet::new();
    if run(2) || run(3) {
        dims.extend([2, 3]);
    }
    if run(4) {
        dims.extend([2, 3, 4]);
    }
    if run(7) {
        dims.insert(4);
    }
    let mut su_states = Vec::new();
    for &d in &dims {
        match simple_update_state(d) {
            Ok(s) => su_states.push((d, s)),
            Err(e) => rep.error(2, e),
        }
    }
    if run(2) {
        criterion_2(&mut rep, &su_states);
    }

    let mut go_energies = Vec::new();
    let mut go_d4 = None;
    let optimize = run(3) || run(4) || run(7);
    for (d, su) in su_states.iter().filter(|_| optimize) {
        let d = *d;
        let go = match optimized_state(su) {
            Ok(s) => s,
            Err(e) => {
                rep.error(3, e);
                continue;
            }
        };
        let energies = enumerated_energy(&go, 2 * d, 0).and_then(|g| Ok((g, enumerated_energy(su, 2 * d, 0)?)));
        match energies {
            Ok((g, s)) => {
                let (g, s) = (g / SITES_4X4, s / SITES_4X4);
                go_energies.push((d, g));
                if run(3) {
                    if let Some(target) = [(2, -0.5709), (3, -0.5736)].iter().find(|(k, _)| *k == d).map(|x| x.1) {
                        rep.check(3, &format!("GO 4x4 D={d}"), within(g, target, 2e-3), format!("{g:.6} vs {target} (tol 2e-3)"));
                    }
                    rep.check(3, &format!("GO below SU at D={d}"), g < s, format!("GO {g:.6}, SU {s:.6} (Sz=0, Dc={})", 2 * d));
                }
            }
            Err(e) => rep.error(3, e),
        }
        if d == 4 {
            go_d4 = Some(go);
        }
    }

    if run(4) {
        match ed_4x4 {
            Some(exact) if go_energies.len() == 3 => {
                let rel: Vec<f64> = go_energies.iter().map(|(_, g)| (g - exact) / exact.abs()).collect();
                let text = rel.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>().join(", ");
                rep.check(4, "relative error decreases over D=2,3,4", rel[0] > rel[1] && rel[1] > rel[2], text.clone());
                rep.check(4, "relative error at D=4", rel[2] <= 2e-3, format!("{:.2e} (tol 2e-3)", rel[2]));
            }
            _ => rep.check(4, "relative error trend", false, "missing ED or GO energies".into()),
        }
    }

    if run(7) {
        match go_d4 {
            Some(state) => {
                let cutoffs = [4, 6, 8, 12, 16];
                let energies: Result<Vec<f64>> =
                    cutoffs.iter().map(|&dc| enumerated_energy(&state, dc, 0).map(|e| e / SITES_4X4)).collect();
                match energies {
                    Ok(e) => {
                        let last = e[e.len() - 1];
                        let gaps: Vec<f64> = e.iter().map(|x| (x - last).abs()).collect();
                        let monotone = gaps.windows(2).all(|w| w[1] <= w[0]);
                        let text = cutoffs.iter().zip(&e).map(|(dc, x)| format!("Dc={dc}: {x:.8}")).collect::<Vec<_>>().join(", ");
                        rep.check(7, "energy vs Dc converges monotonically (D=4)", monotone, text);
                        rep.check(7, "|E(Dc=8) - E(Dc=16)|", gaps[2] <= 1e-4, format!("{:.2e} (tol 1e-4)", gaps[2]));
                    }
                    Err(e) => rep.error(7, e),
                }
            }
            None => rep.check(7, "Dc convergence", false, "no D=4 state".into()),
        }
    }

    println!("{} failed, {:.0}s", rep.failed, t0.elapsed().as_secs_f64());
    if rep.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
