//! Browser bindings: exact ground-state energy, simple-update energy, and
//! single amplitudes of a random PEPS. Each export has a plain Rust twin
//! returning `Result<_, String>` so it can be tested natively.

use wasm_bindgen::prelude::*;

use peps_core::contraction::{amplitude, amplitude_bruteforce};
use peps_core::ed::exact_ground_energy;
use peps_core::lattice::{LatticeSpec, SpinConfig};
use peps_core::monte_carlo::enumerated_energy_full;
use peps_core::peps::PepsState;
use peps_core::simple_update::{run_simple_update, SuSchedule};

/// Sites allowed for exact diagonalization in the page.
pub const ED_SITES: usize = 16;
/// Sites allowed for simple update, whose energy is summed over all 2^N configurations.
pub const SU_SITES: usize = 12;
pub const MAX_BOND_DIM: usize = 4;

fn spec(rows: usize, cols: usize, j2: f64, max_sites: usize) -> Result<LatticeSpec, String> {
    let s = LatticeSpec::new(rows, cols, 1.0, j2).map_err(|e| e.to_string())?;
    if s.n_sites() > max_sites {
        return Err(format!("{rows}x{cols} is too large for the page (at most {max_sites} sites)"));
    }
    Ok(s)
}

fn bond_dim(d: usize) -> Result<usize, String> {
    if d == 0 || d > MAX_BOND_DIM {
        return Err(format!("D must lie in 1..={MAX_BOND_DIM}"));
    }
    Ok(d)
}

/// Exact ground-state energy per site in the Sz = 0 sector.
pub fn exact_energy_per_site(rows: usize, cols: usize, j2: f64) -> Result<f64, String> {
    let s = spec(rows, cols, j2, ED_SITES)?;
    exact_ground_energy(&s, 0).map(|r| r.energy_per_site).map_err(|e| e.to_string())
}

/// Simple-update state from a random start; returns its energy per site and
/// the number of sweeps, as `[energy, sweeps]`.
pub fn simple_update_energy(rows: usize, cols: usize, j2: f64, d: usize, seed: u64) -> Result<Vec<f64>, String> {
    let s = spec(rows, cols, j2, SU_SITES)?;
    let d = bond_dim(d)?;
    let init = PepsState::random_init(&s, d, seed).map_err(|e| e.to_string())?;
    let (state, log) = run_simple_update(&init, &SuSchedule::standard()).map_err(|e| e.to_string())?;
    let dc = (d * d).max(2 * d);
    let e = enumerated_energy_full(&state, dc).map_err(|e| e.to_string())?;
    Ok(vec![e / s.n_sites() as f64, log.records.len() as f64])
}

/// `W(S)` of a random PEPS by boundary contraction with cutoff `dc`, next to
/// the exact brute-force value, as `[boundary, exact]`.
pub fn random_state_amplitude(rows: usize, cols: usize, d: usize, dc: usize, seed: u64, spins: &str) -> Result<Vec<f64>, String> {
    let s = spec(rows, cols, 0.0, SU_SITES)?;
    let d = bond_dim(d)?;
    let config: SpinConfig = spins.parse().map_err(|e: peps_core::PepsError| e.to_string())?;
    if (config.rows(), config.cols()) != (rows, cols) {
        return Err(format!("configuration is {}x{}, lattice is {rows}x{cols}", config.rows(), config.cols()));
    }
    let state = PepsState::random_init(&s, d, seed).map_err(|e| e.to_string())?;
    let w = amplitude(&state, &config, dc.max(1)).map_err(|e| e.to_string())?;
    let exact = amplitude_bruteforce(&state, &config).map_err(|e| e.to_string())?;
    Ok(vec![w.value(), exact])
}

#[wasm_bindgen(js_name = exactEnergy)]
pub fn exact_energy_js(rows: usize, cols: usize, j2: f64) -> Result<f64, JsError> {
    exact_energy_per_site(rows, cols, j2).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = simpleUpdate)]
pub fn simple_update_js(rows: usize, cols: usize, j2: f64, d: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    simple_update_energy(rows, cols, j2, d, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = amplitude)]
pub fn amplitude_js(rows: usize, cols: usize, d: usize, dc: usize, seed: u32, spins: &str) -> Result<Vec<f64>, JsError> {
    random_state_amplitude(rows, cols, d, dc, u64::from(seed), spins).map_err(|e| JsError::new(&e))
}
