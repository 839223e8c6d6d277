//! Exact diagonalization of the J1-J2 Hamiltonian in a fixed-Sz sector.
//!
//! Configurations are bit-coded (bit `i` set = site `i` up, row-major). The
//! sector basis is ranked with two lookup tables over the high and low halves
//! of the bit pattern, and the Hamiltonian is applied matrix-free.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contraction::amplitude_bruteforce;
use crate::error::{PepsError, Result};
use crate::lattice::{build_bonds, LatticeSpec, SpinConfig};
use crate::peps::PepsState;

/// Largest lattice the sector solver accepts.
pub const MAX_SITES: usize = 24;
/// Largest lattice for full-Hilbert-space helpers.
pub const MAX_FULL_SPACE_SITES: usize = 16;
/// Sector dimension at or below which a dense eigensolver is used instead.
const DENSE_LIMIT: usize = 400;
const LANCZOS_TOL: f64 = 1e-9;
const LANCZOS_MAX_ITER: usize = 1000;

/// A bond as a pair of bit masks.
#[derive(Clone, Copy, Debug)]
struct BitBond {
    a: u64,
    b: u64,
    coupling: f64,
}

fn bit_bonds(spec: &LatticeSpec) -> Result<Vec<BitBond>> {
    let bonds = build_bonds(spec)?;
    Ok(bonds
        .all()
        .filter(|b| b.coupling != 0.0)
        .map(|b| BitBond {
            a: 1 << spec.index(b.site_a),
            b: 1 << spec.index(b.site_b),
            coupling: b.coupling,
        })
        .collect())
}

/// Fixed-magnetization basis with O(1) ranking.
#[derive(Clone, Debug)]
pub struct SectorBasis {
    n_sites: usize,
    sz: i64,
    states: Vec<u64>,
    low_bits: usize,
    hi_table: Vec<u32>,
    lo_table: Vec<u32>,
    /// `(high bits, first index, length)` of each contiguous block.
    blocks: Vec<(u64, usize, usize)>,
}

impl SectorBasis {
    /// All configurations of `n_sites` spins with total `Sz = sz`.
    pub fn new(n_sites: usize, sz: i64) -> Result<Self> {
        if n_sites > MAX_SITES {
            return Err(PepsError::SizeGuard(format!("{n_sites} sites exceeds {MAX_SITES}")));
        }
        if n_sites % 2 != 0 {
            return Err(PepsError::InvalidArgument("sectors need an even number of sites".into()));
        }
        let n_up = n_sites as i64 / 2 + sz;
        if n_up < 0 || n_up > n_sites as i64 {
            return Err(PepsError::InvalidArgument(format!("no Sz = {sz} sector on {n_sites} sites")));
        }
        let n_up = n_up as u32;
        let low_bits = n_sites / 2;
        let high_bits = n_sites - low_bits;
        let mut states = Vec::new();
        let mut blocks = Vec::new();
        let mut hi_table = vec![u32::MAX; 1 << high_bits];
        let mut lo_table = vec![u32::MAX; 1 << low_bits];
        let mut lo_rank = vec![0u32; low_bits + 1];
        for lo in 0..(1u64 << low_bits) {
            let pc = lo.count_ones() as usize;
            lo_table[lo as usize] = lo_rank[pc];
            lo_rank[pc] += 1;
        }
        for hi in 0..(1u64 << high_bits) {
            let pc_hi = hi.count_ones();
            if pc_hi > n_up || n_up - pc_hi > low_bits as u32 {
                continue;
            }
            let start = states.len();
            hi_table[hi as usize] = start as u32;
            let need = n_up - pc_hi;
            for lo in 0..(1u64 << low_bits) {
                if lo.count_ones() == need {
                    states.push((hi << low_bits) | lo);
                }
            }
            blocks.push((hi, start, states.len() - start));
        }
        Ok(SectorBasis { n_sites, sz, states, low_bits, hi_table, lo_table, blocks })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn sz(&self) -> i64 {
        self.sz
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    /// Position of `bits` in the basis. Only valid for members of the sector.
    #[inline]
    pub fn index(&self, bits: u64) -> usize {
        let hi = (bits >> self.low_bits) as usize;
        let lo = (bits & ((1 << self.low_bits) - 1)) as usize;
        (self.hi_table[hi] + self.lo_table[lo]) as usize
    }

    pub fn contains(&self, bits: u64) -> bool {
        bits < (1u64 << self.n_sites)
            && bits.count_ones() as i64 == self.n_sites as i64 / 2 + self.sz
    }
}

/// `<S|H|S>` for a bit-coded configuration.
pub fn diagonal_element(spec: &LatticeSpec, bits: u64) -> Result<f64> {
    Ok(bit_bonds(spec)?.iter().map(|b| diag_term(b, bits)).sum())
}

#[inline]
fn diag_term(b: &BitBond, x: u64) -> f64 {
    let aligned = ((x & b.a) == 0) == ((x & b.b) == 0);
    if aligned { 0.25 * b.coupling } else { -0.25 * b.coupling }
}

/// `<bra|H|ket>` for bit-coded configurations.
pub fn matrix_element(spec: &LatticeSpec, bra: u64, ket: u64) -> Result<f64> {
    if bra == ket {
        return diagonal_element(spec, ket);
    }
    let flip = bra ^ ket;
    Ok(bit_bonds(spec)?
        .iter()
        .filter(|b| flip == (b.a | b.b) && ((ket & b.a) == 0) != ((ket & b.b) == 0))
        .map(|b| 0.5 * b.coupling)
        .sum())
}

/// Matrix-free `H` restricted to one sector.
pub struct SectorHamiltonian {
    basis: SectorBasis,
    bonds: Vec<BitBond>,
    classes: Vec<BondClass>,
}

/// Bonds `(i, i + shift)` sharing a coupling, packed so that the number of
/// anti-aligned pairs is one popcount.
#[derive(Clone, Copy, Debug)]
struct BondClass {
    shift: u32,
    mask: u64,
    count: u32,
    coupling: f64,
}

fn bond_classes(bonds: &[BitBond]) -> Vec<BondClass> {
    let mut classes: Vec<BondClass> = Vec::new();
    for b in bonds {
        let (i, j) = (b.a.trailing_zeros(), b.b.trailing_zeros());
        let (lo, hi) = (i.min(j), i.max(j));
        let shift = hi - lo;
        match classes.iter_mut().find(|c| c.shift == shift && c.coupling == b.coupling) {
            Some(c) => {
                c.mask |= 1 << lo;
                c.count += 1;
            }
            None => classes.push(BondClass { shift, mask: 1 << lo, count: 1, coupling: b.coupling }),
        }
    }
    classes
}

impl SectorHamiltonian {
    pub fn new(spec: &LatticeSpec, sz: i64) -> Result<Self> {
        let basis = SectorBasis::new(spec.n_sites(), sz)?;
        let bonds = bit_bonds(spec)?;
        let classes = bond_classes(&bonds);
        Ok(SectorHamiltonian { basis, bonds, classes })
    }

    pub fn basis(&self) -> &SectorBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Adds the contribution of the states in one high-half block to `out`,
    /// which holds exactly that block.
    fn apply_block(&self, hi: u64, start: usize, v: &[f64], out: &mut [f64]) {
        let nl = self.basis.low_bits;
        let lo_mask = (1u64 << nl) - 1;
        let states = &self.basis.states[start..start + out.len()];
        for (k, o) in out.iter_mut().enumerate() {
            let x = states[k];
            let mut d = 0.0;
            for c in &self.classes {
                let anti = ((x ^ (x >> c.shift)) & c.mask).count_ones();
                d += 0.25 * c.coupling * (c.count as f64 - 2.0 * anti as f64);
            }
            *o = d * v[start + k];
        }
        for b in &self.bonds {
            let m = b.a | b.b;
            let half = 0.5 * b.coupling;
            if m & lo_mask == m {
                // both sites in the low half: target stays in this block
                let last = start + out.len() - 1;
                for (k, o) in out.iter_mut().enumerate() {
                    let x = states[k];
                    let anti = ((x & b.a) == 0) != ((x & b.b) == 0);
                    let lo = ((x ^ m) & lo_mask) as usize;
                    let j = (start + self.basis.lo_table[lo] as usize).min(last);
                    *o += (anti as u8 as f64) * half * v[j];
                }
            } else if m & lo_mask == 0 {
                // both in the high half: the whole block maps onto another
                let (ha, hb) = (b.a >> nl, b.b >> nl);
                if ((hi & ha) == 0) == ((hi & hb) == 0) {
                    continue;
                }
                let target = self.basis.hi_table[(hi ^ ha ^ hb) as usize] as usize;
                let src = &v[target..target + out.len()];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += half * s;
                }
            } else {
                let (lo_bit, hi_bit) = if b.a & lo_mask != 0 { (b.a, b.b) } else { (b.b, b.a) };
                let hi_up = (hi & (hi_bit >> nl)) != 0;
                let target = self.basis.hi_table[(hi ^ (hi_bit >> nl)) as usize] as usize;
                let last = v.len() - 1;
                for (k, o) in out.iter_mut().enumerate() {
                    let x = states[k];
                    let anti = ((x & lo_bit) != 0) != hi_up;
                    let lo = ((x ^ lo_bit) & lo_mask) as usize;
                    let j = (target + self.basis.lo_table[lo] as usize).min(last);
                    *o += (anti as u8 as f64) * half * v[j];
                }
            }
        }
    }

    /// `out = H v`. Work is split by high-half blocks with a fixed summation
    /// order, so the result does not depend on the thread count.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.dim());
        assert_eq!(out.len(), self.dim());
        let mut chunks = Vec::with_capacity(self.basis.blocks.len());
        let mut rest = out;
        for &(hi, start, len) in &self.basis.blocks {
            let (head, tail) = rest.split_at_mut(len);
            chunks.push((hi, start, head));
            rest = tail;
        }
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            chunks.into_par_iter().for_each(|(hi, start, o)| self.apply_block(hi, start, v, o));
        }
        #[cfg(not(feature = "parallel"))]
        for (hi, start, o) in chunks {
            self.apply_block(hi, start, v, o);
        }
    }

    fn dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct EdResult {
    pub energy: f64,
    pub energy_per_site: f64,
    pub sz: i64,
    pub iterations: usize,
    pub residual: f64,
    /// Normalized ground vector in the ordering of [`SectorBasis::states`].
    pub vector: Option<Vec<f64>>,
    pub basis: SectorBasis,
}

/// Lowest eigenvalue of `H` in the `Sz = sector_sz` sector.
pub fn exact_ground_energy(spec: &LatticeSpec, sector_sz: i64) -> Result<EdResult> {
    ground_state(spec, sector_sz, false, 0)
}

/// As [`exact_ground_energy`], optionally returning the ground vector.
/// `seed` fixes the Lanczos start vector.
pub fn ground_state(spec: &LatticeSpec, sector_sz: i64, want_vector: bool, seed: u64) -> Result<EdResult> {
    spec.validate()?;
    let h = SectorHamiltonian::new(spec, sector_sz)?;
    let n_sites = spec.n_sites() as f64;
    if h.dim() <= DENSE_LIMIT {
        let eig = h.dense().symmetric_eigen();
        let (k, &energy) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .expect("non-empty sector");
        let vector = want_vector.then(|| eig.eigenvectors.column(k).iter().copied().collect());
        return Ok(EdResult {
            energy,
            energy_per_site: energy / n_sites,
            sz: sector_sz,
            iterations: 0,
            residual: 0.0,
            vector,
            basis: h.basis,
        });
    }
    let lz = lanczos(&h, seed, want_vector)?;
    Ok(EdResult {
        energy: lz.value,
        energy_per_site: lz.value / n_sites,
        sz: sector_sz,
        iterations: lz.iterations,
        residual: lz.residual,
        vector: lz.vector,
        basis: h.basis,
    })
}

struct LanczosOutcome {
    value: f64,
    iterations: usize,
    residual: f64,
    vector: Option<Vec<f64>>,
}

fn start_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn lowest_ritz(alphas: &[f64], betas: &[f64]) -> (f64, Vec<f64>) {
    let k = alphas.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = t.symmetric_eigen();
    let (j, &value) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    (value, eig.eigenvectors.column(j).iter().copied().collect())
}

/// Plain three-term Lanczos without reorthogonalization. Convergence is
/// judged by the residual estimate `beta_k |y_k|` of the lowest Ritz pair.
fn lanczos(h: &SectorHamiltonian, seed: u64, want_vector: bool) -> Result<LanczosOutcome> {
    let n = h.dim();
    let mut v = start_vector(n, seed);
    let mut v_prev = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut beta_prev = 0.0;
    let mut outcome = None;
    for it in 0..LANCZOS_MAX_ITER.min(n) {
        h.apply(&v, &mut w);
        let alpha: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        for i in 0..n {
            w[i] -= alpha * v[i] + beta_prev * v_prev[i];
        }
        let beta = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        alphas.push(alpha);
        let check = it < 20 || it % 4 == 0 || beta < 1e-12;
        if check {
            let (value, y) = lowest_ritz(&alphas, &betas);
            let residual = (beta * y[y.len() - 1]).abs();
            if residual < LANCZOS_TOL || beta < 1e-12 {
                outcome = Some((value, it + 1, residual, y));
                break;
            }
        }
        betas.push(beta);
        std::mem::swap(&mut v_prev, &mut v);
        for i in 0..n {
            v[i] = w[i] / beta;
        }
        beta_prev = beta;
    }
    let (value, iterations, residual, y) = outcome.ok_or_else(|| {
        PepsError::NoConvergence(format!("Lanczos after {LANCZOS_MAX_ITER} iterations"))
    })?;
    if !value.is_finite() {
        return Err(PepsError::NonFinite("Lanczos eigenvalue".into()));
    }
    let vector = if want_vector {
        // second pass regenerating the Krylov vectors
        let mut v = start_vector(n, seed);
        let mut v_prev = vec![0.0; n];
        let mut out = vec![0.0; n];
        for (k, &yk) in y.iter().enumerate() {
            for i in 0..n {
                out[i] += yk * v[i];
            }
            if k + 1 == y.len() {
                break;
            }
            h.apply(&v, &mut w);
            let bp = if k == 0 { 0.0 } else { betas[k - 1] };
            for i in 0..n {
                w[i] -= alphas[k] * v[i] + bp * v_prev[i];
            }
            std::mem::swap(&mut v_prev, &mut v);
            for i in 0..n {
                v[i] = w[i] / betas[k];
            }
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.iter_mut().for_each(|x| *x /= norm);
        Some(out)
    } else {
        None
    };
    Ok(LanczosOutcome { value, iterations, residual, vector })
}

/// `H psi` on the full `2^N` space (index = bit-coded configuration).
pub fn apply_full_space(spec: &LatticeSpec, psi: &[f64]) -> Result<Vec<f64>> {
    let n = spec.n_sites();
    if n > MAX_FULL_SPACE_SITES {
        return Err(PepsError::SizeGuard(format!("full space limited to {MAX_FULL_SPACE_SITES} sites")));
    }
    if psi.len() != 1 << n {
        return Err(PepsError::Shape(format!("vector has {} entries, expected 2^{n}", psi.len())));
    }
    let bonds = bit_bonds(spec)?;
    let mut out = vec![0.0; psi.len()];
    for (x, o) in out.iter_mut().enumerate() {
        let x = x as u64;
        let mut acc = 0.0;
        for b in &bonds {
            acc += diag_term(b, x) * psi[x as usize];
            if ((x & b.a) == 0) != ((x & b.b) == 0) {
                acc += 0.5 * b.coupling * psi[(x ^ (b.a | b.b)) as usize];
            }
        }
        *o = acc;
    }
    Ok(out)
}

/// `<psi|H|psi> / <psi|psi>`, optionally after projecting onto one Sz sector.
pub fn rayleigh_quotient(spec: &LatticeSpec, psi: &[f64], sector_sz: Option<i64>) -> Result<f64> {
    let projected: Vec<f64> = match sector_sz {
        None => psi.to_vec(),
        Some(sz) => {
            let n_up = spec.n_sites() as i64 / 2 + sz;
            psi.iter()
                .enumerate()
                .map(|(x, &v)| if (x as u64).count_ones() as i64 == n_up { v } else { 0.0 })
                .collect()
        }
    };
    let h_psi = apply_full_space(spec, &projected)?;
    let num: f64 = projected.iter().zip(&h_psi).map(|(a, b)| a * b).sum();
    let den: f64 = projected.iter().map(|a| a * a).sum();
    if den == 0.0 {
        return Err(PepsError::ZeroAmplitude("state has no weight in the sector".into()));
    }
    Ok(num / den)
}

/// Dense state vector of a PEPS: component `W(S)` at the bit-coded index of
/// `S`, every amplitude by brute-force contraction.
pub fn expand_peps(state: &PepsState) -> Result<Vec<f64>> {
    let spec = state.spec();
    let n = spec.n_sites();
    if n > 12 {
        return Err(PepsError::SizeGuard(format!("expansion limited to 12 sites, got {n}")));
    }
    (0..1u64 << n)
        .map(|bits| amplitude_bruteforce(state, &SpinConfig::from_bits(spec.rows, spec.cols, bits)))
        .collect()
}
