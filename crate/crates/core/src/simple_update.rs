//! Imaginary-time evolution with the simple-update environment.
//!
//! The state is held in Γ-λ form: bare site tensors plus one positive
//! diagonal per interior bond. Each bond update absorbs the λ of the
//! surrounding bonds as a mean-field environment, applies a two-site gate on
//! QR-reduced tensors, re-factorizes by SVD and strips the surrounding λ
//! again. Next-nearest-neighbour gates are routed through an intermediate
//! site with two sequential SVDs.

use std::io::Write;

use crate::error::{PepsError, Result};
use crate::lattice::{build_bonds, LatticeSpec, Site};
use crate::peps::{axis, site_dims, PepsState};
use crate::tensor::{contract, permute, qr_split, svd_truncate_cutoff, DenseTensor};

/// Relative size below which singular values are dropped.
pub const LAMBDA_CUTOFF: f64 = 1e-12;

/// `exp(-dtau * coupling * S_i.S_j)` as a tensor `[s_i, s_j, s_i', s_j']`.
pub fn trotter_gate(coupling: f64, dtau: f64) -> Result<DenseTensor> {
    if !(dtau > 0.0) || !dtau.is_finite() {
        return Err(PepsError::InvalidArgument(format!("dtau must be positive, got {dtau}")));
    }
    let t = dtau * coupling;
    let aligned = (-t / 4.0).exp();
    let triplet0 = (-t / 4.0).exp();
    let singlet = (3.0 * t / 4.0).exp();
    let diag = 0.5 * (triplet0 + singlet);
    let off = 0.5 * (triplet0 - singlet);
    let mut g = DenseTensor::zeros(&[2, 2, 2, 2]);
    g.set(&[0, 0, 0, 0], aligned);
    g.set(&[1, 1, 1, 1], aligned);
    g.set(&[0, 1, 0, 1], diag);
    g.set(&[1, 0, 1, 0], diag);
    g.set(&[0, 1, 1, 0], off);
    g.set(&[1, 0, 0, 1], off);
    Ok(g)
}

/// One λ vector per interior bond, descending, largest entry 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SuEnvironment {
    rows: usize,
    cols: usize,
    /// bond `(r,c)-(r,c+1)` at `r * (cols - 1) + c`
    horizontal: Vec<Vec<f64>>,
    /// bond `(r,c)-(r+1,c)` at `r * cols + c`
    vertical: Vec<Vec<f64>>,
}

impl SuEnvironment {
    fn uniform(spec: &LatticeSpec, state: &PepsState) -> Self {
        let (rows, cols) = (spec.rows, spec.cols);
        let mut horizontal = Vec::new();
        for r in 0..rows {
            for c in 0..cols.saturating_sub(1) {
                horizontal.push(vec![1.0; state.tensor((r, c)).dims()[axis::R]]);
            }
        }
        let mut vertical = Vec::new();
        for r in 0..rows.saturating_sub(1) {
            for c in 0..cols {
                vertical.push(vec![1.0; state.tensor((r, c)).dims()[axis::D]]);
            }
        }
        SuEnvironment { rows, cols, horizontal, vertical }
    }

    /// λ on the bond leaving `site` through `leg`, if that bond is interior.
    pub fn lambda(&self, site: Site, leg: usize) -> Option<&[f64]> {
        self.slot(site, leg).map(|(h, i)| if h { &self.horizontal[i][..] } else { &self.vertical[i][..] })
    }

    fn set_lambda(&mut self, site: Site, leg: usize, values: Vec<f64>) {
        let (h, i) = self.slot(site, leg).expect("interior bond");
        if h {
            self.horizontal[i] = values;
        } else {
            self.vertical[i] = values;
        }
    }

    fn slot(&self, (r, c): Site, leg: usize) -> Option<(bool, usize)> {
        match leg {
            axis::L if c > 0 => Some((true, r * (self.cols - 1) + c - 1)),
            axis::R if c + 1 < self.cols => Some((true, r * (self.cols - 1) + c)),
            axis::U if r > 0 => Some((false, (r - 1) * self.cols + c)),
            axis::D if r + 1 < self.rows => Some((false, r * self.cols + c)),
            _ => None,
        }
    }

    pub fn horizontal(&self) -> &[Vec<f64>] {
        &self.horizontal
    }

    pub fn vertical(&self) -> &[Vec<f64>] {
        &self.vertical
    }
}

/// Leg of `a` pointing at its nearest neighbour `b`.
fn leg_towards(a: Site, b: Site) -> Result<usize> {
    match (b.0 as i64 - a.0 as i64, b.1 as i64 - a.1 as i64) {
        (0, 1) => Ok(axis::R),
        (0, -1) => Ok(axis::L),
        (1, 0) => Ok(axis::D),
        (-1, 0) => Ok(axis::U),
        _ => Err(PepsError::InvalidArgument(format!("sites {a:?} and {b:?} are not nearest neighbours"))),
    }
}

const VIRTUAL: [usize; 4] = [axis::L, axis::R, axis::U, axis::D];

/// Γ-λ representation used during the evolution.
#[derive(Clone, Debug)]
pub struct SuState {
    spec: LatticeSpec,
    bond_dim: usize,
    gammas: Vec<DenseTensor>,
    env: SuEnvironment,
}

impl SuState {
    /// Start from a plain PEPS with all λ = 1.
    pub fn from_peps(state: &PepsState) -> Self {
        SuState {
            spec: *state.spec(),
            bond_dim: state.bond_dim(),
            gammas: state.tensors().to_vec(),
            env: SuEnvironment::uniform(state.spec(), state),
        }
    }

    pub fn environment(&self) -> &SuEnvironment {
        &self.env
    }

    pub fn bond_dim(&self) -> usize {
        self.bond_dim
    }

    pub fn gamma(&self, site: Site) -> &DenseTensor {
        &self.gammas[self.spec.index(site)]
    }

    /// Γ with the given power of λ absorbed on every leg except `skip`.
    fn dressed(&self, site: Site, skip: &[usize], power: f64) -> DenseTensor {
        let mut t = self.gamma(site).clone();
        for &leg in VIRTUAL.iter().filter(|l| !skip.contains(l)) {
            if let Some(lam) = self.env.lambda(site, leg) {
                let f: Vec<f64> = lam.iter().map(|x| x.powf(power)).collect();
                t.scale_axis(leg, &f);
            }
        }
        t
    }

    fn strip(&self, t: &mut DenseTensor, site: Site, skip: &[usize]) {
        for &leg in VIRTUAL.iter().filter(|l| !skip.contains(l)) {
            if let Some(lam) = self.env.lambda(site, leg) {
                let inv: Vec<f64> = lam.iter().map(|x| 1.0 / x).collect();
                t.scale_axis(leg, &inv);
            }
        }
    }

    /// Plain PEPS with `sqrt(λ)` absorbed on both sides of every bond, each
    /// tensor scaled to max-abs 1 and zero-padded back to the bond dimension.
    pub fn to_peps(&self) -> Result<PepsState> {
        let tensors = (0..self.spec.n_sites())
            .map(|i| {
                let site = self.spec.site(i);
                let mut t = self.dressed(site, &[], 0.5);
                let m = t.max_abs();
                if m > 0.0 {
                    t.scale(1.0 / m);
                }
                let target: Vec<usize> = site_dims(&self.spec, site, self.bond_dim)
                    .iter()
                    .zip(t.dims())
                    .map(|(&a, &b)| a.max(b))
                    .collect();
                t.pad_to(&target)
            })
            .collect::<Result<_>>()?;
        PepsState::from_tensors(self.spec, tensors)
    }

    /// Apply a two-site gate on the nearest-neighbour pair `(a, b)` and
    /// truncate the bond to `max_dim`. Returns the relative truncation error.
    pub fn bond_update(&mut self, a: Site, b: Site, gate: &DenseTensor, max_dim: usize) -> Result<f64> {
        let la = leg_towards(a, b)?;
        let lb = leg_towards(b, a)?;
        let bond_lambda = self.env.lambda(a, la).expect("interior bond").to_vec();
        let mut ta = self.dressed(a, &[la], 1.0);
        ta.scale_axis(la, &bond_lambda);
        let tb = self.dressed(b, &[lb], 1.0);

        let (qa, ra, perm_a) = reduce(&ta, la)?;
        let (qb, rb, perm_b) = reduce(&tb, lb)?;
        // theta[ka, sa, kb, sb]
        let m = contract(&ra, &[1], &rb, &[1])?;
        let theta = contract(&m, &[1, 3], gate, &[2, 3])?;
        let theta = permute(&theta, &[0, 2, 1, 3])?;
        let svd = svd_truncate_cutoff(&theta, 2, max_dim, LAMBDA_CUTOFF)?;
        let s_max = svd.singular_values[0];
        if !(s_max > 0.0) || !s_max.is_finite() {
            return Err(PepsError::NonFinite("bond update produced a vanishing spectrum".into()));
        }
        let lambda: Vec<f64> = svd.singular_values.iter().map(|s| s / s_max).collect();

        // new a: q_a[others, ka] * u[ka, sa, k] -> [others, sa, k]
        let na = contract(&qa, &[3], &svd.u, &[0])?;
        let na = restore(&permute(&na, &[0, 1, 2, 4, 3])?, &perm_a)?;
        // new b: q_b[others, kb] * vt[k, kb, sb] -> [others, k, sb]
        let nb = contract(&qb, &[3], &svd.vt, &[1])?;
        let nb = restore(&nb, &perm_b)?;
        let (mut na, mut nb) = fix_bond_sign(na, la, nb, lb);

        self.env.set_lambda(a, la, lambda);
        self.strip(&mut na, a, &[la]);
        self.strip(&mut nb, b, &[lb]);
        self.check_finite(&na, a)?;
        self.check_finite(&nb, b)?;
        let (ia, ib) = (self.spec.index(a), self.spec.index(b));
        self.gammas[ia] = na;
        self.gammas[ib] = nb;
        Ok(svd.truncation_error)
    }

    /// Apply a gate on the pair `(a, b)` that is connected through the
    /// intermediate site `via` (`a-via` and `via-b` both nearest-neighbour
    /// bonds). Both bonds are truncated to `max_dim`; returns the larger
    /// relative truncation error.
    pub fn nnn_update(&mut self, a: Site, via: Site, b: Site, gate: &DenseTensor, max_dim: usize) -> Result<f64> {
        let la = leg_towards(a, via)?;
        let lca = leg_towards(via, a)?;
        let lcb = leg_towards(via, b)?;
        let lb = leg_towards(b, via)?;
        let lam_ac = self.env.lambda(a, la).expect("interior bond").to_vec();
        let lam_cb = self.env.lambda(b, lb).expect("interior bond").to_vec();
        let mut ta = self.dressed(a, &[la], 1.0);
        ta.scale_axis(la, &lam_ac);
        let mut tb = self.dressed(b, &[lb], 1.0);
        tb.scale_axis(lb, &lam_cb);
        let tc = self.dressed(via, &[lca, lcb], 1.0);

        let (qa, ra, perm_a) = reduce(&ta, la)?;
        let (qb, rb, perm_b) = reduce(&tb, lb)?;
        let others_c: Vec<usize> = VIRTUAL.iter().copied().filter(|&l| l != lca && l != lcb).collect();
        let perm_c = [lca, lcb, others_c[0], others_c[1], axis::S];
        let c = permute(&tc, &perm_c)?;

        // [ka, sa, y, o1, o2, sc]
        let t1 = contract(&ra, &[1], &c, &[0])?;
        // [ka, sa, o1, o2, sc, kb, sb]
        let t2 = contract(&t1, &[2], &rb, &[1])?;
        // [ka, o1, o2, sc, kb, sa', sb']
        let t3 = contract(&t2, &[1, 6], gate, &[2, 3])?;
        let theta = permute(&t3, &[0, 5, 1, 2, 3, 4, 6])?;

        let svd1 = svd_truncate_cutoff(&theta, 2, max_dim, LAMBDA_CUTOFF)?;
        let s1_max = svd1.singular_values[0];
        if !(s1_max > 0.0) || !s1_max.is_finite() {
            return Err(PepsError::NonFinite("three-site update produced a vanishing spectrum".into()));
        }
        let lam1: Vec<f64> = svd1.singular_values.iter().map(|s| s / s1_max).collect();
        let mut rest = svd1.vt.clone();
        rest.scale_axis(0, &lam1);
        // rest: [x', o1, o2, sc, kb, sb]
        let svd2 = svd_truncate_cutoff(&rest, 4, max_dim, LAMBDA_CUTOFF)?;
        let s2_max = svd2.singular_values[0];
        if !(s2_max > 0.0) || !s2_max.is_finite() {
            return Err(PepsError::NonFinite("three-site update produced a vanishing spectrum".into()));
        }
        let lam2: Vec<f64> = svd2.singular_values.iter().map(|s| s / s2_max).collect();

        let na = contract(&qa, &[3], &svd1.u, &[0])?;
        let na = restore(&permute(&na, &[0, 1, 2, 4, 3])?, &perm_a)?;
        // u2: [x', o1, o2, sc, y'] -> [x', y', o1, o2, sc]
        let mut nc = permute(&svd2.u, &[0, 4, 1, 2, 3])?;
        let inv1: Vec<f64> = lam1.iter().map(|x| 1.0 / x).collect();
        nc.scale_axis(0, &inv1);
        let nc = restore(&nc, &perm_c)?;
        let nb = contract(&qb, &[3], &svd2.vt, &[1])?;
        let nb = restore(&nb, &perm_b)?;
        let (na, nc) = fix_bond_sign(na, la, nc, lca);
        let (mut nb, mut nc) = fix_bond_sign(nb, lb, nc, lcb);
        let mut na = na;

        self.env.set_lambda(a, la, lam1);
        self.env.set_lambda(b, lb, lam2);
        self.strip(&mut na, a, &[la]);
        self.strip(&mut nb, b, &[lb]);
        self.strip(&mut nc, via, &[lca, lcb]);
        for (t, s) in [(&na, a), (&nb, b), (&nc, via)] {
            self.check_finite(t, s)?;
        }
        let (ia, ib, ic) = (self.spec.index(a), self.spec.index(b), self.spec.index(via));
        self.gammas[ia] = na;
        self.gammas[ib] = nb;
        self.gammas[ic] = nc;
        Ok(svd1.truncation_error.max(svd2.truncation_error))
    }

    fn check_finite(&self, t: &DenseTensor, site: Site) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(PepsError::NonFinite(format!("simple update diverged at site {site:?}")))
        }
    }

    /// One first-order Trotter step: horizontal bonds row-major, then
    /// vertical bonds, then each diagonal bond through both intermediates
    /// with half its coupling each.
    pub fn sweep(&mut self, dtau: f64) -> Result<f64> {
        let spec = self.spec;
        let d = self.bond_dim;
        let bonds = build_bonds(&spec)?;
        let mut err: f64 = 0.0;
        let mut nn: Vec<_> = bonds.nn.iter().filter(|b| b.is_horizontal()).collect();
        nn.extend(bonds.nn.iter().filter(|b| !b.is_horizontal()));
        let nn_gate = trotter_gate(spec.j1, dtau)?;
        for b in nn {
            err = err.max(self.bond_update(b.site_a, b.site_b, &nn_gate, d)?);
        }
        if spec.j2 != 0.0 {
            let nnn_gate = trotter_gate(0.5 * spec.j2, dtau)?;
            for b in &bonds.nnn {
                let (a, c) = (b.site_a, b.site_b);
                for via in [(a.0, c.1), (c.0, a.1)] {
                    err = err.max(self.nnn_update(a, via, c, &nnn_gate, d)?);
                }
            }
        }
        Ok(err)
    }
}

/// Move `leg` and the physical axis last and QR-split off the other three
/// legs: returns `q[o1, o2, o3, k]`, `r[k, bond, s]` and the permutation.
fn reduce(t: &DenseTensor, leg: usize) -> Result<(DenseTensor, DenseTensor, [usize; 5])> {
    let others: Vec<usize> = VIRTUAL.iter().copied().filter(|&l| l != leg).collect();
    let perm = [others[0], others[1], others[2], leg, axis::S];
    let (q, r) = qr_split(&permute(t, &perm)?, 3)?;
    Ok((q, r, perm))
}

/// Undo a permutation applied with [`permute`].
fn restore(t: &DenseTensor, perm: &[usize; 5]) -> Result<DenseTensor> {
    let mut inverse = [0; 5];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    permute(t, &inverse)
}

/// Fix the sign gauge of a freshly factorized bond: the largest entry of each
/// slice of `a` along `leg_a` becomes positive, with `b` compensating.
fn fix_bond_sign(mut a: DenseTensor, leg_a: usize, mut b: DenseTensor, leg_b: usize) -> (DenseTensor, DenseTensor) {
    let k = a.dims()[leg_a];
    let mut signs = vec![1.0; k];
    for (i, s) in signs.iter_mut().enumerate() {
        let slice = a.select(leg_a, i);
        let mut best = 0.0f64;
        for &x in slice.data() {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            *s = -1.0;
        }
    }
    a.scale_axis(leg_a, &signs);
    b.scale_axis(leg_b, &signs);
    (a, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuStage {
    pub dtau: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuSchedule {
    pub stages: Vec<SuStage>,
}

impl SuSchedule {
    pub fn new(stages: Vec<SuStage>) -> Result<Self> {
        let s = SuSchedule { stages };
        s.validate()?;
        Ok(s)
    }

    /// dτ = 0.01 then 0.001, each until the relative change drops below 1e-6.
    pub fn standard() -> Self {
        SuSchedule {
            stages: vec![
                SuStage { dtau: 0.01, tol: 1e-6, max_sweeps: 20_000 },
                SuStage { dtau: 0.001, tol: 1e-6, max_sweeps: 20_000 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(PepsError::Config("empty simple-update schedule".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.dtau > 0.0) || !(s.tol > 0.0) || s.max_sweeps == 0 {
                return Err(PepsError::Config(format!("invalid stage {i}: {s:?}")));
            }
            if i > 0 && s.dtau >= self.stages[i - 1].dtau {
                return Err(PepsError::Config("dtau must strictly decrease across stages".into()));
            }
        }
        Ok(())
    }

    /// Parse `dtau:tol:max_sweeps` stages separated by commas.
    pub fn parse(text: &str) -> Result<Self> {
        let stages = text
            .split(',')
            .map(|part| {
                let fields: Vec<&str> = part.trim().split(':').collect();
                if fields.len() != 3 {
                    return Err(PepsError::Config(format!("stage `{part}` is not dtau:tol:max_sweeps")));
                }
                let bad = |f: &str| PepsError::Config(format!("bad number `{f}` in stage `{part}`"));
                Ok(SuStage {
                    dtau: fields[0].parse().map_err(|_| bad(fields[0]))?,
                    tol: fields[1].parse().map_err(|_| bad(fields[1]))?,
                    max_sweeps: fields[2].parse().map_err(|_| bad(fields[2]))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages)
    }

    /// Canonical text form, accepted by [`SuSchedule::parse`].
    pub fn to_text(&self) -> String {
        self.stages
            .iter()
            .map(|s| format!("{}:{:e}:{}", s.dtau, s.tol, s.max_sweeps))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    pub dtau: f64,
    pub max_relative_change: f64,
    pub truncation_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepLog {
    pub records: Vec<SweepRecord>,
    /// Whether each stage met its tolerance before `max_sweeps`.
    pub converged: Vec<bool>,
}

impl SweepLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sweep,dtau,max_relative_change,truncation_error")?;
        for r in &self.records {
            writeln!(w, "{},{},{:e},{:e}", r.sweep, r.dtau, r.max_relative_change, r.truncation_error)?;
        }
        Ok(())
    }
}

/// Largest relative Frobenius change between two PEPS site by site. Each
/// tensor is normalized first; a change of shape counts as 1.
fn max_relative_change(old: &[DenseTensor], new: &[DenseTensor]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(a, b)| {
            if a.dims() != b.dims() {
                return 1.0;
            }
            let (na, nb) = (a.norm(), b.norm());
            let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
            diff.sqrt()
        })
        .fold(0.0, f64::max)
}

fn snapshot(su: &SuState) -> Vec<DenseTensor> {
    (0..su.spec.n_sites()).map(|i| su.dressed(su.spec.site(i), &[], 0.5)).collect()
}

/// Run the schedule from `state` and return the evolved plain PEPS.
pub fn run_simple_update(state: &PepsState, schedule: &SuSchedule) -> Result<(PepsState, SweepLog)> {
    let (su, log) = evolve(SuState::from_peps(state), schedule)?;
    Ok((su.to_peps()?, log))
}

/// As [`run_simple_update`] but keeping the Γ-λ form.
pub fn evolve(mut su: SuState, schedule: &SuSchedule) -> Result<(SuState, SweepLog)> {
    schedule.validate()?;
    let mut log = SweepLog::default();
    let mut sweep = 0;
    let mut prev = snapshot(&su);
    for stage in &schedule.stages {
        let mut converged = false;
        for _ in 0..stage.max_sweeps {
            let err = su.sweep(stage.dtau)?;
            let now = snapshot(&su);
            let change = max_relative_change(&prev, &now);
            prev = now;
            sweep += 1;
            log.records.push(SweepRecord {
                sweep,
                dtau: stage.dtau,
                max_relative_change: change,
                truncation_error: err,
            });
            if !change.is_finite() {
                return Err(PepsError::NonFinite(format!("simple update diverged at sweep {sweep}")));
            }
            if change < stage.tol {
                converged = true;
                break;
            }
        }
        log.converged.push(converged);
    }
    Ok((su, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contraction::amplitude;
    use crate::ed::{exact_ground_energy, rayleigh_quotient};
    use crate::lattice::SpinConfig;
    use nalgebra::{Matrix4, SymmetricEigen};

    /// Every amplitude by untruncated contraction.
    fn full_vector(state: &PepsState) -> Vec<f64> {
        let spec = state.spec();
        (0..1u64 << spec.n_sites())
            .map(|b| amplitude(state, &SpinConfig::from_bits(spec.rows, spec.cols, b), 4096).unwrap().value())
            .collect()
    }

    fn gate_matrix(g: &DenseTensor) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| g.get(&[i / 2, i % 2, j / 2, j % 2]))
    }

    fn exact_energy(state: &PepsState) -> f64 {
        rayleigh_quotient(state.spec(), &full_vector(state), None).unwrap()
    }

    #[test]
    fn gate_spectrum() {
        let g = gate_matrix(&trotter_gate(1.0, 0.01).unwrap());
        let mut ev: Vec<f64> = SymmetricEigen::new(g).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<f64> = [-0.75, 0.25, 0.25, 0.25].iter().map(|l: &f64| (-0.01 * l).exp()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in ev.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gate_symmetries() {
        let g = trotter_gate(1.0, 0.3).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let v = g.get(&[i, j, k, l]);
                        assert_eq!(v, g.get(&[j, i, l, k]));
                        if i + j != k + l {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
        let small = gate_matrix(&trotter_gate(1.0, 1e-9).unwrap());
        assert!((small - Matrix4::identity()).abs().max() < 1e-8);
        assert!(trotter_gate(1.0, 0.0).is_err());
    }

    fn cluster_amplitudes(su: &SuState) -> Vec<f64> {
        full_vector(&su.to_peps().unwrap())
    }

    fn assert_proportional(a: &[f64], b: &[f64], tol: f64) {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        let sign = dot.signum();
        for (x, y) in a.iter().zip(b) {
            assert!((x / na - sign * y / nb).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_gate_preserves_amplitudes() {
        let spec = LatticeSpec::heisenberg(2, 3).unwrap();
        let state = PepsState::random_init(&spec, 2, 3).unwrap();
        let mut su = SuState::from_peps(&state);
        let before = cluster_amplitudes(&su);
        let id = trotter_gate(0.0, 0.1).unwrap();
        su.bond_update((0, 0), (0, 1), &id, 8).unwrap();
        su.bond_update((0, 1), (1, 1), &id, 8).unwrap();
        su.nnn_update((0, 0), (0, 1), (1, 1), &id, 8).unwrap();
        assert_proportional(&before, &cluster_amplitudes(&su), 1e-10);
    }

    /// Apply a gate to the full state vector on sites `i`, `j`.
    fn apply_gate_dense(psi: &[f64], n: usize, i: usize, j: usize, g: &DenseTensor) -> Vec<f64> {
        let bit = |site: usize| 1u64 << site;
        // hilbert index 0 = up = bit set
        let idx = |x: u64, site: usize| if x & bit(site) != 0 { 0 } else { 1 };
        let mut out = vec![0.0; psi.len()];
        for x in 0..(1u64 << n) {
            let (si, sj) = (idx(x, i), idx(x, j));
            for ti in 0..2 {
                for tj in 0..2 {
                    let mut y = x & !(bit(i) | bit(j));
                    if ti == 0 {
                        y |= bit(i);
                    }
                    if tj == 0 {
                        y |= bit(j);
                    }
                    out[x as usize] += g.get(&[si, sj, ti, tj]) * psi[y as usize];
                }
            }
        }
        out
    }

    #[test]
    fn untruncated_updates_match_dense_gate() {
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let state = PepsState::random_init(&spec, 2, 11).unwrap();
        let g = trotter_gate(0.8, 0.7).unwrap();
        // nearest neighbour
        let mut su = SuState::from_peps(&state);
        let before = cluster_amplitudes(&su);
        su.bond_update((0, 0), (0, 1), &g, 64).unwrap();
        let want = apply_gate_dense(&before, 4, 0, 1, &g);
        assert_proportional(&want, &cluster_amplitudes(&su), 1e-10);
        // diagonal through (0,1)
        let mut su = SuState::from_peps(&state);
        let before = cluster_amplitudes(&su);
        su.nnn_update((0, 0), (0, 1), (1, 1), &g, 64).unwrap();
        let want = apply_gate_dense(&before, 4, 0, 3, &g);
        assert_proportional(&want, &cluster_amplitudes(&su), 1e-10);
    }

    #[test]
    fn zero_coupling_nnn_is_noop() {
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let state = PepsState::random_init(&spec, 2, 5).unwrap();
        let mut su = SuState::from_peps(&state);
        let before = cluster_amplitudes(&su);
        su.nnn_update((0, 1), (0, 0), (1, 0), &trotter_gate(0.0, 0.01).unwrap(), 4).unwrap();
        assert_proportional(&before, &cluster_amplitudes(&su), 1e-10);
    }

    #[test]
    fn two_site_converges_to_singlet() {
        let spec = LatticeSpec::heisenberg(2, 1).unwrap();
        let state = PepsState::random_init(&spec, 2, 1).unwrap();
        let sched = SuSchedule::new(vec![SuStage { dtau: 0.01, tol: 1e-10, max_sweeps: 20_000 }]).unwrap();
        let (out, log) = run_simple_update(&state, &sched).unwrap();
        assert!(log.converged[0]);
        assert!((exact_energy(&out) + 0.75).abs() < 1e-8);
    }

    #[test]
    fn two_by_two_close_to_exact() {
        // at D=2 the loop keeps SU near -1.838; D=4 spans the exact state
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let state = PepsState::random_init(&spec, 4, 2).unwrap();
        let (out, _) = run_simple_update(&state, &SuSchedule::standard()).unwrap();
        let exact = exact_ground_energy(&spec, 0).unwrap().energy;
        assert!((exact_energy(&out) - exact).abs() < 1e-3, "{} vs {exact}", exact_energy(&out));
    }

    #[test]
    fn lambdas_normalized_and_positive() {
        let spec = LatticeSpec::new(3, 3, 1.0, 0.5).unwrap();
        let state = PepsState::random_init(&spec, 2, 9).unwrap();
        let mut su = SuState::from_peps(&state);
        for _ in 0..20 {
            su.sweep(0.05).unwrap();
        }
        for lam in su.environment().horizontal().iter().chain(su.environment().vertical()) {
            assert_eq!(lam[0], 1.0);
            assert!(lam.windows(2).all(|w| w[0] >= w[1]));
            assert!(lam.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn schedule_parse_and_validate() {
        let s = SuSchedule::parse("0.01:1e-6:100, 0.001:1e-7:50").unwrap();
        assert_eq!(s.stages.len(), 2);
        assert_eq!(s.stages[1].max_sweeps, 50);
        assert!(SuSchedule::parse("0.001:1e-6:10,0.01:1e-6:10").is_err());
        assert!(SuSchedule::parse("0.01:1e-6").is_err());
        assert!(SuSchedule::parse("0.01:0:10").is_err());
    }
}
