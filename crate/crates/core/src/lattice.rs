//! Open-boundary square lattice, bond lists and the J1-J2 Heisenberg couplings.
//!
//! Sites are addressed as `(row, col)` and flattened row-major. Spins are kept
//! as `±1` integers; the tensor code maps `+1 -> 0` and `-1 -> 1` when it
//! indexes a physical leg (see [`SpinConfig::hilbert_index`]).

use std::fmt;

use crate::error::{PepsError, Result};

pub type Site = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeSpec {
    pub rows: usize,
    pub cols: usize,
    pub j1: f64,
    pub j2: f64,
}

impl LatticeSpec {
    /// Validated constructor. A lattice needs at least two sites; a `2 x 1`
    /// strip (a single bond) is accepted so two-site checks can run through
    /// the same code as everything else.
    pub fn new(rows: usize, cols: usize, j1: f64, j2: f64) -> Result<Self> {
        let spec = LatticeSpec { rows, cols, j1, j2 };
        spec.validate()?;
        Ok(spec)
    }

    /// Heisenberg model (`j1 = 1`, `j2 = 0`).
    pub fn heisenberg(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, 1.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.rows * self.cols < 2 {
            return Err(PepsError::Lattice(format!(
                "{}x{} lattice has fewer than two sites",
                self.rows, self.cols
            )));
        }
        if !self.j1.is_finite() || !self.j2.is_finite() {
            return Err(PepsError::Lattice("couplings must be finite".into()));
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, site: Site) -> usize {
        site.0 * self.cols + site.1
    }

    pub fn site(&self, index: usize) -> Site {
        (index / self.cols, index % self.cols)
    }

    pub fn contains(&self, site: Site) -> bool {
        site.0 < self.rows && site.1 < self.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bond {
    pub site_a: Site,
    pub site_b: Site,
    pub coupling: f64,
}

impl Bond {
    /// Rows spanned by the bond, `(top, bottom)`.
    pub fn row_span(&self) -> (usize, usize) {
        (self.site_a.0.min(self.site_b.0), self.site_a.0.max(self.site_b.0))
    }

    pub fn is_horizontal(&self) -> bool {
        self.site_a.0 == self.site_b.0
    }
}

/// Nearest- and next-nearest-neighbour bond lists.
#[derive(Clone, Debug)]
pub struct Bonds {
    pub nn: Vec<Bond>,
    pub nnn: Vec<Bond>,
}

impl Bonds {
    pub fn all(&self) -> impl Iterator<Item = &Bond> {
        self.nn.iter().chain(self.nnn.iter())
    }
}

/// All open-boundary NN bonds (coupling `j1`) and diagonal NNN bonds
/// (coupling `j2`), each unordered pair once, sorted row-major by
/// `(site_a, site_b)` with `site_a` the earlier site.
pub fn build_bonds(spec: &LatticeSpec) -> Result<Bonds> {
    spec.validate()?;
    let mut nn = Vec::new();
    let mut nnn = Vec::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            if c + 1 < spec.cols {
                nn.push(bond(spec, (r, c), (r, c + 1), spec.j1));
            }
            if r + 1 < spec.rows {
                nn.push(bond(spec, (r, c), (r + 1, c), spec.j1));
                if c + 1 < spec.cols {
                    nnn.push(bond(spec, (r, c), (r + 1, c + 1), spec.j2));
                }
                if c > 0 {
                    nnn.push(bond(spec, (r, c), (r + 1, c - 1), spec.j2));
                }
            }
        }
    }
    let key = |b: &Bond| (spec.index(b.site_a), spec.index(b.site_b));
    nn.sort_by_key(key);
    nnn.sort_by_key(key);
    Ok(Bonds { nn, nnn })
}

fn bond(spec: &LatticeSpec, a: Site, b: Site, coupling: f64) -> Bond {
    let (site_a, site_b) = if spec.index(a) < spec.index(b) { (a, b) } else { (b, a) };
    Bond { site_a, site_b, coupling }
}

/// One definite spin assignment, `+1` for up and `-1` for down.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SpinConfig {
    rows: usize,
    cols: usize,
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn from_spins(rows: usize, cols: usize, spins: Vec<i8>) -> Result<Self> {
        if spins.len() != rows * cols {
            return Err(PepsError::Shape(format!(
                "{} spins for a {rows}x{cols} lattice",
                spins.len()
            )));
        }
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(PepsError::InvalidArgument("spins must be +1 or -1".into()));
        }
        Ok(SpinConfig { rows, cols, spins })
    }

    pub fn from_rows(rows: &[&[i8]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(PepsError::Shape("ragged spin rows".into()));
        }
        Self::from_spins(rows.len(), cols, rows.concat())
    }

    /// Decode from a bit pattern: bit `i` set means site `i` (row-major) is up.
    pub fn from_bits(rows: usize, cols: usize, bits: u64) -> Self {
        let spins = (0..rows * cols)
            .map(|i| if (bits >> i) & 1 == 1 { 1 } else { -1 })
            .collect();
        SpinConfig { rows, cols, spins }
    }

    pub fn to_bits(&self) -> u64 {
        self.spins
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 1)
            .fold(0u64, |acc, (i, _)| acc | (1 << i))
    }

    pub fn all_up(rows: usize, cols: usize) -> Self {
        SpinConfig { rows, cols, spins: vec![1; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn get(&self, site: Site) -> i8 {
        self.spins[site.0 * self.cols + site.1]
    }

    pub fn set(&mut self, site: Site, value: i8) {
        debug_assert!(value == 1 || value == -1);
        self.spins[site.0 * self.cols + site.1] = value;
    }

    /// Physical-leg index of the spin at `site`: `0` for up, `1` for down.
    pub fn hilbert_index(&self, site: Site) -> usize {
        usize::from(self.get(site) < 0)
    }

    pub fn swap(&mut self, a: Site, b: Site) {
        let (ia, ib) = (a.0 * self.cols + a.1, b.0 * self.cols + b.1);
        self.spins.swap(ia, ib);
    }

    /// Copy with the spins on `a` and `b` exchanged.
    pub fn swapped(&self, a: Site, b: Site) -> Self {
        let mut out = self.clone();
        out.swap(a, b);
        out
    }

    /// Sum of the `±1` spins (twice the total Sz).
    pub fn magnetization(&self) -> i64 {
        self.spins.iter().map(|&s| i64::from(s)).sum()
    }

    pub fn matches(&self, spec: &LatticeSpec) -> bool {
        self.rows == spec.rows && self.cols == spec.cols
    }
}

impl fmt::Debug for SpinConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpinConfig[")?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "|")?;
            }
            for c in 0..self.cols {
                write!(f, "{}", if self.get((r, c)) > 0 { '+' } else { '-' })?;
            }
        }
        write!(f, "]")
    }
}

impl fmt::Display for SpinConfig {
    /// Rows of `+`/`-` separated by `/`, the format the CLI accepts.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "/")?;
            }
            for c in 0..self.cols {
                write!(f, "{}", if self.get((r, c)) > 0 { '+' } else { '-' })?;
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for SpinConfig {
    type Err = PepsError;

    fn from_str(s: &str) -> Result<Self> {
        let rows: Vec<Vec<i8>> = s
            .trim()
            .split('/')
            .map(|row| {
                row.chars()
                    .map(|ch| match ch {
                        '+' | 'u' | 'U' => Ok(1),
                        '-' | 'd' | 'D' => Ok(-1),
                        other => Err(PepsError::InvalidArgument(format!(
                            "bad spin character {other:?}"
                        ))),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[i8]> = rows.iter().map(|r| r.as_slice()).collect();
        Self::from_rows(&refs)
    }
}

/// Checkerboard configuration with `+1` on even `row + col`.
pub fn neel_config(spec: &LatticeSpec) -> Result<SpinConfig> {
    if spec.n_sites() % 2 != 0 {
        return Err(PepsError::Lattice(format!(
            "{}x{} has an odd number of sites, no Sz=0 configuration",
            spec.rows, spec.cols
        )));
    }
    let spins = (0..spec.n_sites())
        .map(|i| {
            let (r, c) = spec.site(i);
            if (r + c) % 2 == 0 { 1 } else { -1 }
        })
        .collect();
    Ok(SpinConfig { rows: spec.rows, cols: spec.cols, spins })
}

/// Diagonal energy `sum_b J_b s_i s_j / 4` over NN and NNN bonds.
pub fn classical_energy(spec: &LatticeSpec, config: &SpinConfig) -> Result<f64> {
    if !config.matches(spec) {
        return Err(PepsError::Shape(format!(
            "config is {}x{}, lattice is {}x{}",
            config.rows, config.cols, spec.rows, spec.cols
        )));
    }
    let bonds = build_bonds(spec)?;
    Ok(bonds
        .all()
        .map(|b| b.coupling * f64::from(config.get(b.site_a) * config.get(b.site_b)) / 4.0)
        .sum())
}
