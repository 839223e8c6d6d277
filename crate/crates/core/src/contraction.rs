//! Single-layer contraction of a PEPS at a fixed spin configuration.
//!
//! Rows are absorbed into boundary MPSs (from the top, and from the bottom for
//! the environment stacks) and recompressed to bond dimension `Dc`. Every
//! intermediate is kept normalized with its magnitude moved into a log scale,
//! so amplitudes come out as `(sign, log|W|)` and never over- or underflow.
//!
//! [`ContractionCache`] holds both stacks for one configuration; a one- or
//! two-row [`Strip`] sandwiched between them yields `W`, amplitudes of
//! configurations that differ inside the strip, and the single-site
//! environments `B^{s_m}`.

use crate::error::{PepsError, Result};
use crate::lattice::{Site, SpinConfig};
use crate::peps::{axis, PepsState};
use crate::tensor::{contract, permute, qr_split, svd_truncate, DenseTensor};

/// `sign * exp(log_magnitude)`; `sign == 0` is an exact zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Amplitude {
    pub log_magnitude: f64,
    pub sign: i8,
}

impl Amplitude {
    pub const ZERO: Amplitude = Amplitude { log_magnitude: f64::NEG_INFINITY, sign: 0 };

    pub fn from_value(value: f64) -> Self {
        if value == 0.0 {
            Self::ZERO
        } else {
            Amplitude { log_magnitude: value.abs().ln(), sign: if value > 0.0 { 1 } else { -1 } }
        }
    }

    fn from_scaled(value: f64, log_scale: f64) -> Self {
        let mut a = Self::from_value(value);
        if a.sign != 0 {
            a.log_magnitude += log_scale;
        }
        a
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }

    pub fn value(&self) -> f64 {
        if self.sign == 0 {
            0.0
        } else {
            f64::from(self.sign) * self.log_magnitude.exp()
        }
    }

    /// `self / other`; `other` must be non-zero.
    pub fn ratio(&self, other: &Amplitude) -> f64 {
        debug_assert!(!other.is_zero());
        if self.sign == 0 {
            return 0.0;
        }
        f64::from(self.sign * other.sign) * (self.log_magnitude - other.log_magnitude).exp()
    }

    pub fn scaled_log(mut self, log_factor: f64) -> Self {
        if self.sign != 0 {
            self.log_magnitude += log_factor;
        }
        self
    }
}

/// Compressed row environment. Site matrices are `[left, p, right]` where
/// `p` is the open vertical bond facing the rows not yet absorbed.
#[derive(Clone, Debug)]
pub struct BoundaryMps {
    pub site_matrices: Vec<DenseTensor>,
    pub log_scale: f64,
    /// Set when the contracted network is exactly zero.
    pub is_zero: bool,
    /// Largest relative truncation error of the last compression.
    pub truncation_error: f64,
}

impl BoundaryMps {
    /// Empty environment above the first row (or below the last one).
    pub fn trivial(cols: usize) -> Self {
        BoundaryMps {
            site_matrices: vec![DenseTensor::scalar(1.0).reshape(&[1, 1, 1]).unwrap(); cols],
            log_scale: 0.0,
            is_zero: false,
            truncation_error: 0.0,
        }
    }

    pub fn max_bond(&self) -> usize {
        self.site_matrices.iter().map(|m| m.dims()[2]).max().unwrap_or(1)
    }
}

/// Which way the boundary moves through the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Top boundary absorbing the next row below; contracts the `u` legs.
    Down,
    /// Bottom boundary absorbing the next row above; contracts the `d` legs.
    Up,
}

/// Spin-fixed four-index tensors `A(l, r, u, d)` of one row.
pub fn fixed_row(state: &PepsState, config: &SpinConfig, row: usize) -> Vec<DenseTensor> {
    (0..state.cols())
        .map(|c| fixed_site(state, (row, c), config.hilbert_index((row, c))))
        .collect()
}

pub fn fixed_site(state: &PepsState, site: Site, spin_index: usize) -> DenseTensor {
    state.tensor(site).select(axis::S, spin_index)
}

fn normalize(t: &mut DenseTensor, what: &str) -> Result<Option<f64>> {
    let m = t.max_abs();
    if !m.is_finite() {
        return Err(PepsError::NonFinite(what.to_string()));
    }
    if m == 0.0 {
        return Ok(None);
    }
    t.scale(1.0 / m);
    Ok(Some(m.ln()))
}

/// Absorb one row of spin-fixed tensors and recompress to bond dimension `dc`.
pub fn row_absorb(
    bmps: &BoundaryMps,
    row: &[DenseTensor],
    dc: usize,
    direction: Direction,
) -> Result<BoundaryMps> {
    let mut out = absorb_uncompressed(bmps, row, direction)?;
    compress(&mut out, dc)?;
    Ok(out)
}

fn absorb_uncompressed(
    bmps: &BoundaryMps,
    row: &[DenseTensor],
    direction: Direction,
) -> Result<BoundaryMps> {
    if row.len() != bmps.site_matrices.len() {
        return Err(PepsError::Shape(format!(
            "row has {} columns, boundary has {}",
            row.len(),
            bmps.site_matrices.len()
        )));
    }
    let (inner, outer) = match direction {
        Direction::Down => (axis::U, axis::D),
        Direction::Up => (axis::D, axis::U),
    };
    let mut site_matrices = Vec::with_capacity(row.len());
    for (m, t) in bmps.site_matrices.iter().zip(row) {
        // [a, p, a'] x [l, r, u, d] -> [a, a', (two of l r), out]
        let x = contract(m, &[1], t, &[inner])?;
        // free axes of t in order, skipping `inner`: l, r, then `outer`
        let (a, a2) = (m.dims()[0], m.dims()[2]);
        let (l, r, o) = (t.dims()[axis::L], t.dims()[axis::R], t.dims()[outer]);
        let x = permute(&x, &[0, 2, 4, 1, 3])?;
        site_matrices.push(x.reshape(&[a * l, o, a2 * r])?);
    }
    Ok(BoundaryMps {
        site_matrices,
        log_scale: bmps.log_scale,
        is_zero: bmps.is_zero,
        truncation_error: 0.0,
    })
}

/// Left-to-right QR canonicalization followed by right-to-left SVD
/// truncation to `dc`. Skipped (tensors only normalized) when every bond
/// already fits.
fn compress(mps: &mut BoundaryMps, dc: usize) -> Result<()> {
    if dc < 1 {
        return Err(PepsError::InvalidArgument("Dc must be at least 1".into()));
    }
    if mps.is_zero {
        return Ok(());
    }
    let n = mps.site_matrices.len();
    let tensors = &mut mps.site_matrices;
    if tensors.iter().all(|t| t.dims()[2] <= dc) {
        for t in tensors.iter_mut() {
            match normalize(t, "boundary MPS")? {
                Some(l) => mps.log_scale += l,
                None => {
                    mps.is_zero = true;
                    return Ok(());
                }
            }
        }
        mps.truncation_error = 0.0;
        return Ok(());
    }
    for c in 0..n - 1 {
        let (q, r) = qr_split(&tensors[c], 2)?;
        tensors[c] = q;
        tensors[c + 1] = contract(&r, &[1], &tensors[c + 1], &[0])?;
    }
    match normalize(&mut tensors[n - 1], "boundary MPS")? {
        Some(l) => mps.log_scale += l,
        None => {
            mps.is_zero = true;
            return Ok(());
        }
    }
    let mut max_err: f64 = 0.0;
    for c in (1..n).rev() {
        let res = svd_truncate(&tensors[c], 1, dc)?;
        max_err = max_err.max(res.truncation_error);
        let mut us = res.u;
        us.scale_axis(1, &res.singular_values);
        tensors[c] = res.vt;
        tensors[c - 1] = contract(&tensors[c - 1], &[2], &us, &[0])?;
    }
    match normalize(&mut tensors[0], "boundary MPS")? {
        Some(l) => mps.log_scale += l,
        None => mps.is_zero = true,
    }
    mps.truncation_error = max_err;
    Ok(())
}

/// Contract a boundary whose open vertical legs all have dimension one.
fn close_boundary(mps: &BoundaryMps) -> Result<Amplitude> {
    if mps.is_zero {
        return Ok(Amplitude::ZERO);
    }
    let mut v = vec![1.0];
    let mut log = mps.log_scale;
    for m in &mps.site_matrices {
        let (a, p, b) = (m.dims()[0], m.dims()[1], m.dims()[2]);
        if p != 1 || a != v.len() {
            return Err(PepsError::Shape("boundary still has open vertical legs".into()));
        }
        let mut next = vec![0.0; b];
        for (i, &vi) in v.iter().enumerate() {
            for (j, nj) in next.iter_mut().enumerate() {
                *nj += vi * m.data()[i * b + j];
            }
        }
        let mx = next.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if !mx.is_finite() {
            return Err(PepsError::NonFinite("closing contraction".into()));
        }
        if mx == 0.0 {
            return Ok(Amplitude::ZERO);
        }
        next.iter_mut().for_each(|x| *x /= mx);
        log += mx.ln();
        v = next;
    }
    Ok(Amplitude::from_scaled(v[0], log))
}

fn check_config(state: &PepsState, config: &SpinConfig) -> Result<()> {
    if !config.matches(state.spec()) {
        return Err(PepsError::Shape(format!(
            "config {}x{} vs state {}x{}",
            config.rows(),
            config.cols(),
            state.rows(),
            state.cols()
        )));
    }
    Ok(())
}

/// `W(S)` by top-to-bottom row absorption and a closing contraction.
pub fn amplitude(state: &PepsState, config: &SpinConfig, dc: usize) -> Result<Amplitude> {
    check_config(state, config)?;
    let rows = state.rows();
    let mut mps = BoundaryMps::trivial(state.cols());
    for r in 0..rows {
        let row = fixed_row(state, config, r);
        mps = if r + 1 == rows {
            absorb_uncompressed(&mps, &row, Direction::Down)?
        } else {
            row_absorb(&mps, &row, dc, Direction::Down)?
        };
        if mps.is_zero {
            return Ok(Amplitude::ZERO);
        }
    }
    close_boundary(&mps)
}

/// Same network contracted from the bottom row upwards.
pub fn amplitude_bottom_up(state: &PepsState, config: &SpinConfig, dc: usize) -> Result<Amplitude> {
    check_config(state, config)?;
    let mut mps = BoundaryMps::trivial(state.cols());
    for r in (0..state.rows()).rev() {
        let row = fixed_row(state, config, r);
        mps = if r == 0 {
            absorb_uncompressed(&mps, &row, Direction::Up)?
        } else {
            row_absorb(&mps, &row, dc, Direction::Up)?
        };
        if mps.is_zero {
            return Ok(Amplitude::ZERO);
        }
    }
    close_boundary(&mps)
}

/// Exact `W(S)` by uncompressed site-by-site contraction in row-major order.
/// Independent of the boundary-MPS machinery; guarded to small networks.
pub fn amplitude_bruteforce(state: &PepsState, config: &SpinConfig) -> Result<f64> {
    check_config(state, config)?;
    if state.spec().n_sites() > 12 || state.bond_dim() > 3 {
        return Err(PepsError::SizeGuard(format!(
            "brute force limited to 12 sites and D <= 3 (got {} sites, D = {})",
            state.spec().n_sites(),
            state.bond_dim()
        )));
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Leg {
        H(usize, usize),
        V(usize, usize),
    }
    let (rows, cols) = (state.rows(), state.cols());
    let mut acc = DenseTensor::scalar(1.0);
    let mut acc_legs: Vec<Leg> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mut t = fixed_site(state, (r, c), config.hilbert_index((r, c)));
            // legs in (l, r, u, d) order; open edges removed
            let candidates = [
                (c > 0).then(|| Leg::H(r, c - 1)),
                (c + 1 < cols).then_some(Leg::H(r, c)),
                (r > 0).then(|| Leg::V(r - 1, c)),
                (r + 1 < rows).then_some(Leg::V(r, c)),
            ];
            let mut legs = Vec::new();
            for (ax, leg) in candidates.iter().enumerate().rev() {
                match leg {
                    Some(l) => legs.push(*l),
                    None => t = t.select(ax, 0),
                }
            }
            legs.reverse();
            let mut axes_acc = Vec::new();
            let mut axes_t = Vec::new();
            for (i, leg) in legs.iter().enumerate() {
                if let Some(j) = acc_legs.iter().position(|l| l == leg) {
                    axes_acc.push(j);
                    axes_t.push(i);
                }
            }
            acc = contract(&acc, &axes_acc, &t, &axes_t)?;
            acc_legs = acc_legs
                .iter()
                .enumerate()
                .filter(|(j, _)| !axes_acc.contains(j))
                .map(|(_, l)| *l)
                .chain(legs.iter().enumerate().filter(|(i, _)| !axes_t.contains(i)).map(|(_, l)| *l))
                .collect();
        }
    }
    debug_assert!(acc_legs.is_empty());
    Ok(acc.data()[0])
}

/// A normalized partial contraction and its log scale.
#[derive(Clone, Debug)]
struct Scaled {
    t: DenseTensor,
    log: f64,
    zero: bool,
}

impl Scaled {
    fn unit(rank: usize) -> Self {
        Scaled { t: DenseTensor::from_fn(&vec![1; rank], |_| 1.0), log: 0.0, zero: false }
    }

    fn from(mut t: DenseTensor, log: f64) -> Result<Self> {
        match normalize(&mut t, "strip contraction")? {
            Some(l) => Ok(Scaled { t, log: log + l, zero: false }),
            None => Ok(Scaled { t, log: 0.0, zero: true }),
        }
    }
}

/// One or two rows sandwiched between a top and a bottom boundary, with
/// left and right partial contractions computed on demand and cached.
///
/// Left partials are indexed by the cut before column `c` (`left[0]` is the
/// unit edge), right partials by the cut before column `c` from the right
/// (`right[cols]` is the unit edge). `left[..=left_ok]` and
/// `right[right_ok..]` are current.
#[derive(Clone, Debug)]
pub struct Strip {
    top: BoundaryMps,
    bottom: BoundaryMps,
    rows: Vec<Vec<DenseTensor>>,
    left: Vec<Scaled>,
    right: Vec<Scaled>,
    left_ok: usize,
    right_ok: usize,
}

impl Strip {
    pub fn new(top: BoundaryMps, rows: Vec<Vec<DenseTensor>>, bottom: BoundaryMps) -> Result<Self> {
        if rows.is_empty() || rows.len() > 2 {
            return Err(PepsError::InvalidArgument("strips hold one or two rows".into()));
        }
        let cols = top.site_matrices.len();
        let unit = Scaled::unit(rows.len() + 2);
        Ok(Strip {
            top,
            bottom,
            rows,
            left: vec![unit.clone(); cols + 1],
            right: vec![unit; cols + 1],
            left_ok: 0,
            right_ok: cols,
        })
    }

    fn ensure_left(&mut self, upto: usize) -> Result<()> {
        while self.left_ok < upto {
            let c = self.left_ok;
            let next = self.step_left(&self.left[c], c, &self.column(c))?;
            self.left[c + 1] = next;
            self.left_ok += 1;
        }
        Ok(())
    }

    fn ensure_right(&mut self, from: usize) -> Result<()> {
        while self.right_ok > from {
            let c = self.right_ok - 1;
            let next = self.step_right(&self.right[c + 1], c, &self.column(c))?;
            self.right[c] = next;
            self.right_ok -= 1;
        }
        Ok(())
    }

    pub fn cols(&self) -> usize {
        self.top.site_matrices.len()
    }

    fn column(&self, c: usize) -> Vec<&DenseTensor> {
        self.rows.iter().map(|r| &r[c]).collect()
    }

    fn edge_log(&self) -> f64 {
        self.top.log_scale + self.bottom.log_scale
    }

    fn step_left(&self, l: &Scaled, c: usize, col: &[&DenseTensor]) -> Result<Scaled> {
        if l.zero {
            return Ok(l.clone());
        }
        let top = &self.top.site_matrices[c];
        let bot = &self.bottom.site_matrices[c];
        let t = match col {
            [t1] => {
                // L[a,l,b] Top[a,u,a'] -> [l,b,u,a']
                let x = contract(&l.t, &[0], top, &[0])?;
                // with T[l,r,u,d] over (l,u) -> [b,a',r,d]
                let x = contract(&x, &[0, 2], t1, &[0, 2])?;
                // with Bot[b,d,b'] over (b,d) -> [a',r,b']
                contract(&x, &[0, 3], bot, &[0, 1])?
            }
            [t1, t2] => {
                // L[a,l1,l2,b] Top -> [l1,l2,b,u,a']
                let x = contract(&l.t, &[0], top, &[0])?;
                // T1 over (l1,u) -> [l2,b,a',r1,d1]
                let x = contract(&x, &[0, 3], t1, &[0, 2])?;
                // T2 over (l2,d1) -> [b,a',r1,r2,d2]
                let x = contract(&x, &[0, 4], t2, &[0, 2])?;
                // Bot over (b,d2) -> [a',r1,r2,b']
                contract(&x, &[0, 4], bot, &[0, 1])?
            }
            _ => unreachable!("strip rows validated in constructor"),
        };
        Scaled::from(t, l.log)
    }

    fn step_right(&self, r: &Scaled, c: usize, col: &[&DenseTensor]) -> Result<Scaled> {
        if r.zero {
            return Ok(r.clone());
        }
        let top = &self.top.site_matrices[c];
        let bot = &self.bottom.site_matrices[c];
        let t = match col {
            [t1] => {
                // Top[a,u,a'] R[a',r,b'] -> [a,u,r,b']
                let x = contract(top, &[2], &r.t, &[0])?;
                // T[l,r,u,d] over (u,r) -> [a,b',l,d]
                let x = contract(&x, &[1, 2], t1, &[2, 1])?;
                // Bot[b,d,b'] over (b',d) -> [a,l,b]
                contract(&x, &[1, 3], bot, &[2, 1])?
            }
            [t1, t2] => {
                // Top R[a',r1,r2,b'] -> [a,u,r1,r2,b']
                let x = contract(top, &[2], &r.t, &[0])?;
                // T1 over (u,r1) -> [a,r2,b',l1,d1]
                let x = contract(&x, &[1, 2], t1, &[2, 1])?;
                // T2 over (r2,d1) -> [a,b',l1,l2,d2]
                let x = contract(&x, &[1, 4], t2, &[1, 2])?;
                // Bot over (b',d2) -> [a,l1,l2,b]
                contract(&x, &[1, 4], bot, &[2, 1])?
            }
            _ => unreachable!("strip rows validated in constructor"),
        };
        Scaled::from(t, r.log)
    }

    /// Amplitude of the whole network.
    pub fn amplitude(&mut self) -> Result<Amplitude> {
        if self.top.is_zero || self.bottom.is_zero {
            return Ok(Amplitude::ZERO);
        }
        let cols = self.cols();
        self.ensure_left(cols)?;
        let full = &self.left[cols];
        if full.zero {
            return Ok(Amplitude::ZERO);
        }
        Ok(Amplitude::from_scaled(full.t.data()[0], full.log + self.edge_log()))
    }

    /// Amplitude with the tensors of columns `first..first + replacement.len()`
    /// replaced. `replacement[k]` lists one tensor per strip row.
    pub fn amplitude_with(&mut self, first: usize, replacement: &[Vec<DenseTensor>]) -> Result<Amplitude> {
        if self.top.is_zero || self.bottom.is_zero {
            return Ok(Amplitude::ZERO);
        }
        self.ensure_left(first)?;
        self.ensure_right(first + replacement.len())?;
        let mut l = self.left[first].clone();
        for (k, col) in replacement.iter().enumerate() {
            let refs: Vec<&DenseTensor> = col.iter().collect();
            l = self.step_left(&l, first + k, &refs)?;
        }
        let r = &self.right[first + replacement.len()];
        if l.zero || r.zero {
            return Ok(Amplitude::ZERO);
        }
        Ok(Amplitude::from_scaled(l.t.dot(&r.t), l.log + r.log + self.edge_log()))
    }

    /// Replace one site tensor; partials that contain it are invalidated.
    pub fn set_site(&mut self, strip_row: usize, col: usize, tensor: DenseTensor) {
        self.rows[strip_row][col] = tensor;
        self.left_ok = self.left_ok.min(col);
        self.right_ok = self.right_ok.max(col + 1);
    }

    /// `B(l, r, u, d)` at column `col` of a one-row strip: the network with
    /// that site removed. Returned normalized together with its log scale.
    pub fn environment(&mut self, col: usize) -> Result<(DenseTensor, f64)> {
        if self.rows.len() != 1 {
            return Err(PepsError::InvalidArgument("environments need a one-row strip".into()));
        }
        self.ensure_left(col)?;
        self.ensure_right(col + 1)?;
        let (l, r) = (&self.left[col], &self.right[col + 1]);
        let shape = {
            let t = &self.rows[0][col];
            t.dims().to_vec()
        };
        if l.zero || r.zero || self.top.is_zero || self.bottom.is_zero {
            return Ok((DenseTensor::zeros(&shape), 0.0));
        }
        let top = &self.top.site_matrices[col];
        let bot = &self.bottom.site_matrices[col];
        // L[a,l,b] Top[a,u,a'] -> [l,b,u,a']
        let x = contract(&l.t, &[0], top, &[0])?;
        // Bot[b,d,b'] -> [l,u,a',d,b']
        let x = contract(&x, &[1], bot, &[0])?;
        // R[a',r,b'] -> [l,u,d,r]
        let x = contract(&x, &[2, 4], &r.t, &[0, 2])?;
        let env = permute(&x, &[0, 3, 1, 2])?;
        Ok((env, l.log + r.log + self.edge_log()))
    }
}

/// Top and bottom boundary stacks for one configuration.
///
/// `top[r]` holds rows `0..r` absorbed (`top[0]` trivial); `bottom[r]` holds
/// rows `r+1..` absorbed (`bottom[rows-1]` trivial).
#[derive(Clone, Debug)]
pub struct ContractionCache<'a> {
    state: &'a PepsState,
    dc: usize,
    config: SpinConfig,
    fixed: Vec<Vec<DenseTensor>>,
    top: Vec<Option<BoundaryMps>>,
    bottom: Vec<Option<BoundaryMps>>,
}

impl<'a> ContractionCache<'a> {
    pub fn new(state: &'a PepsState, config: SpinConfig, dc: usize) -> Result<Self> {
        check_config(state, &config)?;
        if dc < 1 {
            return Err(PepsError::InvalidArgument("Dc must be at least 1".into()));
        }
        let rows = state.rows();
        let fixed = (0..rows).map(|r| fixed_row(state, &config, r)).collect();
        let mut top = vec![None; rows];
        let mut bottom = vec![None; rows];
        top[0] = Some(BoundaryMps::trivial(state.cols()));
        bottom[rows - 1] = Some(BoundaryMps::trivial(state.cols()));
        Ok(ContractionCache { state, dc, config, fixed, top, bottom })
    }

    pub fn state(&self) -> &'a PepsState {
        self.state
    }

    pub fn config(&self) -> &SpinConfig {
        &self.config
    }

    pub fn dc(&self) -> usize {
        self.dc
    }

    pub fn fixed_row(&self, r: usize) -> &[DenseTensor] {
        &self.fixed[r]
    }

    /// Spin-fixed tensor at `site` for an arbitrary spin.
    pub fn site_tensor(&self, site: Site, spin: i8) -> DenseTensor {
        fixed_site(self.state, site, usize::from(spin < 0))
    }

    /// Flip the stored spin at `site`; boundaries that contain this row are
    /// invalidated.
    pub fn set_spin(&mut self, site: Site, spin: i8) {
        if self.config.get(site) == spin {
            return;
        }
        self.config.set(site, spin);
        self.fixed[site.0][site.1] = self.site_tensor(site, spin);
        let rows = self.state.rows();
        for r in site.0 + 1..rows {
            self.top[r] = None;
        }
        for r in 0..site.0 {
            self.bottom[r] = None;
        }
    }

    pub fn top(&mut self, r: usize) -> Result<&BoundaryMps> {
        if self.top[r].is_none() {
            let mut k = r;
            while self.top[k].is_none() {
                k -= 1;
            }
            for j in k..r {
                let next = row_absorb(self.top[j].as_ref().unwrap(), &self.fixed[j], self.dc, Direction::Down)?;
                self.top[j + 1] = Some(next);
            }
        }
        Ok(self.top[r].as_ref().unwrap())
    }

    pub fn bottom(&mut self, r: usize) -> Result<&BoundaryMps> {
        if self.bottom[r].is_none() {
            let mut k = r;
            while self.bottom[k].is_none() {
                k += 1;
            }
            for j in (r..k).rev() {
                let next =
                    row_absorb(self.bottom[j + 1].as_ref().unwrap(), &self.fixed[j + 1], self.dc, Direction::Up)?;
                self.bottom[j] = Some(next);
            }
        }
        Ok(self.bottom[r].as_ref().unwrap())
    }

    /// Row `r` between `top[r]` and `bottom[r]`.
    pub fn row_strip(&mut self, r: usize) -> Result<Strip> {
        let top = self.top(r)?.clone();
        let bottom = self.bottom(r)?.clone();
        Strip::new(top, vec![self.fixed[r].clone()], bottom)
    }

    /// Rows `r` and `r + 1` between `top[r]` and `bottom[r + 1]`.
    pub fn pair_strip(&mut self, r: usize) -> Result<Strip> {
        let top = self.top(r)?.clone();
        let bottom = self.bottom(r + 1)?.clone();
        Strip::new(top, vec![self.fixed[r].clone(), self.fixed[r + 1].clone()], bottom)
    }

    /// Amplitude of a configuration that differs from the cached one only in
    /// rows `r0..=r1`: rows in between are re-absorbed onto `top[r0]` and the
    /// result is closed against `bottom[r1]`.
    pub fn amplitude_changed_rows(&mut self, other: &SpinConfig, r0: usize, r1: usize) -> Result<Amplitude> {
        let mut mps = self.top(r0)?.clone();
        for r in r0..r1 {
            mps = row_absorb(&mps, &fixed_row(self.state, other, r), self.dc, Direction::Down)?;
        }
        let bottom = self.bottom(r1)?.clone();
        let mut strip = Strip::new(mps, vec![fixed_row(self.state, other, r1)], bottom)?;
        strip.amplitude()
    }
}

/// Single-site environments `B^{s_m}(S)` for every site together with the
/// amplitude each row's strip assigns to `S`.
#[derive(Clone, Debug)]
pub struct Environments {
    /// Normalized `B(l, r, u, d)` per site (row-major).
    pub tensors: Vec<DenseTensor>,
    /// Log scale per site: the true environment is `tensor * exp(log)`.
    pub log_scales: Vec<f64>,
    /// `W(S)` as seen from each row's strip.
    pub row_amplitudes: Vec<Amplitude>,
}

impl Environments {
    /// Environment tensor with its scale applied.
    pub fn dense(&self, index: usize) -> DenseTensor {
        self.tensors[index].clone().scaled(self.log_scales[index].exp())
    }

    /// `B / W` for the site, i.e. the log-derivative of `W` with respect to
    /// the spin-selected slice of the site tensor.
    pub fn log_derivative(&self, index: usize, cols: usize) -> DenseTensor {
        let w = self.row_amplitudes[index / cols];
        let factor = f64::from(w.sign) * (self.log_scales[index] - w.log_magnitude).exp();
        self.tensors[index].clone().scaled(factor)
    }
}

/// Environments for every site using one top and one bottom stack, so the
/// full grid costs `O(rows)` row absorptions.
pub fn single_layer_environments(state: &PepsState, config: &SpinConfig, dc: usize) -> Result<Environments> {
    let mut cache = ContractionCache::new(state, config.clone(), dc)?;
    environments_from_cache(&mut cache)
}

pub fn environments_from_cache(cache: &mut ContractionCache<'_>) -> Result<Environments> {
    let (rows, cols) = (cache.state.rows(), cache.state.cols());
    let mut tensors = Vec::with_capacity(rows * cols);
    let mut log_scales = Vec::with_capacity(rows * cols);
    let mut row_amplitudes = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut strip = cache.row_strip(r)?;
        let w = strip.amplitude()?;
        if w.is_zero() {
            return Err(PepsError::ZeroAmplitude(format!("W(S) = 0 in row {r}")));
        }
        row_amplitudes.push(w);
        for c in 0..cols {
            let (t, log) = strip.environment(c)?;
            tensors.push(t);
            log_scales.push(log);
        }
    }
    Ok(Environments { tensors, log_scales, row_amplitudes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{neel_config, LatticeSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SpinConfig {
        let spins = (0..rows * cols).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        SpinConfig::from_spins(rows, cols, spins).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn amplitude_value_roundtrip() {
        for v in [3.5, -0.25, 1e-200] {
            assert!((Amplitude::from_value(v).value() - v).abs() <= 1e-13 * v.abs());
        }
        assert!(Amplitude::from_value(0.0).is_zero());
        let a = Amplitude::from_value(-6.0);
        let b = Amplitude::from_value(2.0);
        assert!((a.ratio(&b) + 3.0).abs() < 1e-14);
    }

    #[test]
    fn product_state_amplitude_is_product_of_scalars() {
        let spec = LatticeSpec::heisenberg(3, 2).unwrap();
        let local: Vec<[f64; 2]> = (0..6).map(|i| [0.5 + i as f64, -1.0 - 0.1 * i as f64]).collect();
        let state = PepsState::product_state(&spec, &local).unwrap();
        let cfg = neel_config(&spec).unwrap();
        let expected: f64 = (0..6).map(|i| local[i][cfg.hilbert_index(spec.site(i))]).product();
        let w = amplitude(&state, &cfg, 1).unwrap();
        assert!(rel(w.value(), expected) < 1e-14);
        assert!(rel(amplitude_bruteforce(&state, &cfg).unwrap(), expected) < 1e-14);
        let env = single_layer_environments(&state, &cfg, 1).unwrap();
        for i in 0..6 {
            let others: f64 = (0..6)
                .filter(|&j| j != i)
                .map(|j| local[j][cfg.hilbert_index(spec.site(j))])
                .product();
            assert!(rel(env.dense(i).data()[0], others) < 1e-13);
        }
    }

    #[test]
    fn boundary_matches_bruteforce_and_bottom_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (rows, cols, d) in [(2, 3, 2), (3, 2, 2), (3, 3, 2), (2, 2, 3)] {
            let spec = LatticeSpec::heisenberg(rows, cols).unwrap();
            let state = PepsState::random_init(&spec, d, rng.gen()).unwrap();
            for _ in 0..5 {
                let cfg = random_config(rows, cols, &mut rng);
                let exact = amplitude_bruteforce(&state, &cfg).unwrap();
                let dc = d.pow(cols as u32);
                let down = amplitude(&state, &cfg, dc).unwrap();
                let up = amplitude_bottom_up(&state, &cfg, dc).unwrap();
                assert!(rel(down.value(), exact) < 1e-10, "{rows}x{cols}");
                assert!(rel(up.value(), exact) < 1e-10);
            }
        }
    }

    #[test]
    fn single_column_never_truncates() {
        let spec = LatticeSpec::heisenberg(4, 1).unwrap();
        let state = PepsState::random_init(&spec, 3, 8).unwrap();
        let cfg = neel_config(&spec).unwrap();
        let exact = amplitude_bruteforce(&state, &cfg).unwrap();
        assert!(rel(amplitude(&state, &cfg, 1).unwrap().value(), exact) < 1e-12);
    }

    #[test]
    fn environment_identity_and_cache_ratios() {
        let spec = LatticeSpec::heisenberg(3, 3).unwrap();
        let state = PepsState::random_init(&spec, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = random_config(3, 3, &mut rng);
        let dc = 8;
        let w = amplitude(&state, &cfg, dc).unwrap();
        let env = single_layer_environments(&state, &cfg, dc).unwrap();
        for i in 0..9 {
            let site = spec.site(i);
            let a = fixed_site(&state, site, cfg.hilbert_index(site));
            let val = env.dense(i).dot(&a);
            assert!(rel(val, w.value()) < 1e-8);
        }
        // changed-row amplitudes from the cache equal fresh contractions
        let mut cache = ContractionCache::new(&state, cfg.clone(), dc).unwrap();
        let other = cfg.swapped((1, 0), (2, 1));
        let cached = cache.amplitude_changed_rows(&other, 1, 2).unwrap();
        let fresh = amplitude(&state, &other, dc).unwrap();
        assert!(rel(cached.value(), fresh.value()) < 1e-10);
        let mut strip = cache.pair_strip(1).unwrap();
        let repl = vec![
            vec![cache.site_tensor((1, 0), other.get((1, 0))), cache.site_tensor((2, 0), other.get((2, 0)))],
            vec![cache.site_tensor((1, 1), other.get((1, 1))), cache.site_tensor((2, 1), other.get((2, 1)))],
        ];
        let via_strip = strip.amplitude_with(0, &repl).unwrap();
        assert!(rel(via_strip.value(), fresh.value()) < 1e-10);
    }

    #[test]
    fn set_spin_invalidates_stacks() {
        let spec = LatticeSpec::heisenberg(3, 3).unwrap();
        let state = PepsState::random_init(&spec, 2, 15).unwrap();
        let cfg = neel_config(&LatticeSpec::heisenberg(3, 3).unwrap()).unwrap_or_else(|_| SpinConfig::all_up(3, 3));
        let mut cache = ContractionCache::new(&state, cfg.clone(), 8).unwrap();
        cache.top(2).unwrap();
        cache.bottom(0).unwrap();
        cache.set_spin((1, 1), -cfg.get((1, 1)));
        let mut flipped = cfg.clone();
        flipped.set((1, 1), -cfg.get((1, 1)));
        let mut strip = cache.row_strip(2).unwrap();
        let expected = amplitude(&state, &flipped, 8).unwrap();
        assert!(rel(strip.amplitude().unwrap().value(), expected.value()) < 1e-10);
    }

    #[test]
    fn bruteforce_guard_and_linearity() {
        let spec = LatticeSpec::heisenberg(4, 4).unwrap();
        let state = PepsState::random_init(&spec, 2, 1).unwrap();
        let cfg = neel_config(&spec).unwrap();
        assert!(matches!(amplitude_bruteforce(&state, &cfg), Err(PepsError::SizeGuard(_))));

        let spec = LatticeSpec::heisenberg(2, 3).unwrap();
        let state = PepsState::random_init(&spec, 2, 1).unwrap();
        let cfg = neel_config(&spec).unwrap();
        let mut tensors = state.clone().into_tensors();
        tensors[4].scale(2.0);
        let doubled = PepsState::from_tensors(spec, tensors).unwrap();
        let a = amplitude_bruteforce(&state, &cfg).unwrap();
        let b = amplitude_bruteforce(&doubled, &cfg).unwrap();
        assert!(rel(b, 2.0 * a) < 1e-14);
    }

    #[test]
    fn rescale_shifts_log_amplitude_by_factor_product() {
        let spec = LatticeSpec::heisenberg(3, 3).unwrap();
        let state = PepsState::random_init(&spec, 2, 21).unwrap();
        let (rescaled, factors) = state.rescale().unwrap();
        let cfg = neel_config(&LatticeSpec::heisenberg(3, 3).unwrap()).unwrap_or_else(|_| SpinConfig::all_up(3, 3));
        let a = amplitude(&state, &cfg, 4).unwrap();
        let b = amplitude(&rescaled, &cfg, 4).unwrap();
        let log_sum: f64 = factors.iter().map(|f| f.ln()).sum();
        assert_eq!(a.sign, b.sign);
        assert!((a.log_magnitude - b.log_magnitude - log_sum).abs() < 1e-10);
    }

    #[test]
    fn zero_amplitude_detected() {
        // classical Neel product state: any other configuration has W = 0
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let neel = neel_config(&spec).unwrap();
        let local: Vec<[f64; 2]> = (0..4)
            .map(|i| if neel.spins()[i] > 0 { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        let state = PepsState::product_state(&spec, &local).unwrap();
        assert_eq!(amplitude(&state, &neel, 1).unwrap().value(), 1.0);
        let other = neel.swapped((0, 0), (0, 1));
        assert!(amplitude(&state, &other, 1).unwrap().is_zero());
        assert!(amplitude_bottom_up(&state, &other, 1).unwrap().is_zero());
    }
}
