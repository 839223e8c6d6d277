//! The PEPS wave function: one rank-5 tensor `A(l, r, u, d, s)` per site, open
//! edges carrying bonds of dimension one.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PepsError, Result};
use crate::lattice::{LatticeSpec, Site};
use crate::tensor::DenseTensor;

/// Virtual/physical axis positions of a site tensor.
pub mod axis {
    pub const L: usize = 0;
    pub const R: usize = 1;
    pub const U: usize = 2;
    pub const D: usize = 3;
    pub const S: usize = 4;
}

/// Local Hilbert-space dimension (spin 1/2).
pub const PHYS_DIM: usize = 2;

const MAGIC: &[u8; 4] = b"PEPS";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PepsState {
    spec: LatticeSpec,
    bond_dim: usize,
    tensors: Vec<DenseTensor>,
}

/// Shape of the tensor at `site` for uniform interior bond dimension `d`.
pub fn site_dims(spec: &LatticeSpec, site: Site, d: usize) -> [usize; 5] {
    let (r, c) = site;
    [
        if c == 0 { 1 } else { d },
        if c + 1 == spec.cols { 1 } else { d },
        if r == 0 { 1 } else { d },
        if r + 1 == spec.rows { 1 } else { d },
        PHYS_DIM,
    ]
}

impl PepsState {
    /// Entries i.i.d. uniform on (-1, 1), reproducible from `seed`.
    pub fn random_init(spec: &LatticeSpec, bond_dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if bond_dim < 1 {
            return Err(PepsError::InvalidArgument("bond dimension must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = (0..spec.n_sites())
            .map(|i| {
                let dims = site_dims(spec, spec.site(i), bond_dim);
                DenseTensor::from_fn(&dims, |_| rng.gen_range(-1.0..1.0))
            })
            .collect();
        Self::from_tensors(*spec, tensors)
    }

    /// D = 1 product state from one local 2-vector per site (row-major).
    pub fn product_state(spec: &LatticeSpec, local: &[[f64; 2]]) -> Result<Self> {
        if local.len() != spec.n_sites() {
            return Err(PepsError::Shape(format!(
                "{} local vectors for {} sites",
                local.len(),
                spec.n_sites()
            )));
        }
        let tensors = local
            .iter()
            .map(|v| DenseTensor::new(vec![1, 1, 1, 1, PHYS_DIM], v.to_vec()))
            .collect::<Result<_>>()?;
        Self::from_tensors(*spec, tensors)
    }

    /// Validate shapes and wrap. `bond_dim` is the largest interior bond.
    pub fn from_tensors(spec: LatticeSpec, tensors: Vec<DenseTensor>) -> Result<Self> {
        spec.validate()?;
        if tensors.len() != spec.n_sites() {
            return Err(PepsError::Shape(format!(
                "{} tensors for {} sites",
                tensors.len(),
                spec.n_sites()
            )));
        }
        let mut bond_dim = 1;
        for (i, t) in tensors.iter().enumerate() {
            let (r, c) = spec.site(i);
            let d = t.dims();
            if d.len() != 5 || d[axis::S] != PHYS_DIM {
                return Err(PepsError::Shape(format!("site ({r},{c}) has dims {d:?}")));
            }
            let edge_ok = (c > 0 || d[axis::L] == 1)
                && (c + 1 < spec.cols || d[axis::R] == 1)
                && (r > 0 || d[axis::U] == 1)
                && (r + 1 < spec.rows || d[axis::D] == 1);
            if !edge_ok {
                return Err(PepsError::Shape(format!(
                    "site ({r},{c}) has open-edge bond of dimension > 1: {d:?}"
                )));
            }
            if c + 1 < spec.cols && d[axis::R] != tensors[i + 1].dims()[axis::L] {
                return Err(PepsError::Shape(format!("bond ({r},{c})-({r},{}) mismatched", c + 1)));
            }
            if r + 1 < spec.rows && d[axis::D] != tensors[i + spec.cols].dims()[axis::U] {
                return Err(PepsError::Shape(format!("bond ({r},{c})-({},{c}) mismatched", r + 1)));
            }
            if !t.is_finite() {
                return Err(PepsError::NonFinite(format!("tensor at ({r},{c})")));
            }
            if t.max_abs() == 0.0 {
                return Err(PepsError::InvalidArgument(format!("tensor at ({r},{c}) is zero")));
            }
            bond_dim = bond_dim.max(d[..4].iter().copied().max().unwrap_or(1));
        }
        Ok(PepsState { spec, bond_dim, tensors })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn bond_dim(&self) -> usize {
        self.bond_dim
    }

    pub fn rows(&self) -> usize {
        self.spec.rows
    }

    pub fn cols(&self) -> usize {
        self.spec.cols
    }

    pub fn tensor(&self, site: Site) -> &DenseTensor {
        &self.tensors[self.spec.index(site)]
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    /// Mutable access for in-place updates. Callers must keep shapes intact.
    pub fn tensors_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<DenseTensor> {
        self.tensors
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(DenseTensor::len).sum()
    }

    /// Replace the lattice couplings (the tensors do not depend on them).
    pub fn with_spec(mut self, spec: LatticeSpec) -> Result<Self> {
        if spec.rows != self.spec.rows || spec.cols != self.spec.cols {
            return Err(PepsError::Shape("lattice shape differs from the state".into()));
        }
        self.spec = spec;
        Ok(self)
    }

    /// Zero-pad every interior bond to `new_dim`, then add uniform noise of
    /// amplitude `noise * max|A|` to each tensor.
    pub fn grow_bond_dimension(&self, new_dim: usize, noise: f64, seed: u64) -> Result<Self> {
        if new_dim <= self.bond_dim {
            return Err(PepsError::InvalidArgument(format!(
                "new bond dimension {new_dim} must exceed {}",
                self.bond_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let dims = site_dims(&self.spec, self.spec.site(i), new_dim);
                let mut padded = t.pad_to(&dims)?;
                let amp = noise * t.max_abs();
                if amp > 0.0 {
                    padded.data_mut().iter_mut().for_each(|x| *x += amp * rng.gen_range(-1.0..1.0));
                }
                Ok(padded)
            })
            .collect::<Result<_>>()?;
        Self::from_tensors(self.spec, tensors)
    }

    /// Divide every tensor by its largest absolute entry. Returns the factors,
    /// so `original = rescaled * factor` site by site.
    pub fn rescale(&self) -> Result<(Self, Vec<f64>)> {
        let mut out = self.clone();
        let factors = out.rescale_in_place()?;
        Ok((out, factors))
    }

    pub fn rescale_in_place(&mut self) -> Result<Vec<f64>> {
        let mut factors = Vec::with_capacity(self.tensors.len());
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let m = t.max_abs();
            if !m.is_finite() {
                return Err(PepsError::NonFinite(format!("tensor {i}")));
            }
            if m == 0.0 {
                return Err(PepsError::InvalidArgument(format!("tensor {i} is zero")));
            }
            t.data_mut().iter_mut().for_each(|x| *x /= m);
            factors.push(m);
        }
        Ok(factors)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [FORMAT_VERSION, self.spec.rows as u32, self.spec.cols as u32, PHYS_DIM as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in &self.tensors {
            for &d in t.dims() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read a checkpoint. The file does not store couplings; `j1`/`j2` come
    /// from the caller.
    pub fn read_checkpoint<R: Read>(mut r: R, j1: f64, j2: f64) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(PepsError::Format("bad magic, not a PEPS checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(PepsError::Format(format!("unsupported format version {version}")));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        if d != PHYS_DIM {
            return Err(PepsError::Format(format!("physical dimension {d} unsupported")));
        }
        let spec = LatticeSpec::new(rows, cols, j1, j2).map_err(|e| PepsError::Format(e.to_string()))?;
        let mut tensors = Vec::with_capacity(spec.n_sites());
        for _ in 0..spec.n_sites() {
            let mut dims = Vec::with_capacity(5);
            for _ in 0..5 {
                dims.push(read_u32(&mut r)? as usize);
            }
            let len: usize = dims.iter().product();
            if len == 0 || len > 1 << 28 {
                return Err(PepsError::Format(format!("implausible tensor dims {dims:?}")));
            }
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf).map_err(truncated)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push(DenseTensor::new(dims, data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(PepsError::Format("trailing bytes after last tensor".into()));
        }
        Self::from_tensors(spec, tensors).map_err(|e| PepsError::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, j1: f64, j2: f64) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file), j1, j2)
    }
}

fn truncated(e: std::io::Error) -> PepsError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        PepsError::Format("checkpoint truncated".into())
    } else {
        PepsError::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_init_shapes_and_determinism() {
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let p = PepsState::random_init(&spec, 1, 3).unwrap();
        assert!(p.tensors().iter().all(|t| t.dims() == [1, 1, 1, 1, 2]));
        let a = PepsState::random_init(&spec, 2, 42).unwrap();
        let b = PepsState::random_init(&spec, 2, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.tensors().iter().flat_map(|t| t.data()).all(|x| x.abs() < 1.0));
        let spec = LatticeSpec::heisenberg(3, 3).unwrap();
        let p = PepsState::random_init(&spec, 2, 0).unwrap();
        assert_eq!(p.tensor((0, 0)).dims(), &[1, 2, 1, 2, 2]);
        assert_eq!(p.tensor((1, 1)).dims(), &[2, 2, 2, 2, 2]);
        assert_eq!(p.tensor((2, 2)).dims(), &[2, 1, 2, 1, 2]);
        assert!(PepsState::random_init(&spec, 0, 0).is_err());
    }

    #[test]
    fn grow_shapes() {
        let spec = LatticeSpec::heisenberg(3, 3).unwrap();
        let p = PepsState::random_init(&spec, 2, 1).unwrap();
        let g = p.grow_bond_dimension(3, 0.0, 0).unwrap();
        assert_eq!(g.bond_dim(), 3);
        assert_eq!(g.tensor((1, 1)).dims(), &[3, 3, 3, 3, 2]);
        assert_eq!(g.tensor((0, 1)).dims(), &[3, 3, 1, 3, 2]);
        assert!(p.grow_bond_dimension(2, 0.0, 0).is_err());
    }

    #[test]
    fn rescale_records_factors() {
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let p = PepsState::random_init(&spec, 2, 5).unwrap();
        let (once, _) = p.rescale().unwrap();
        let (_, factors) = once.rescale().unwrap();
        assert!(factors.iter().all(|&f| f == 1.0));
        let mut tensors = once.clone().into_tensors();
        tensors[2].scale(7.0);
        let bumped = PepsState::from_tensors(spec, tensors).unwrap();
        let (back, factors) = bumped.rescale().unwrap();
        assert!((factors[2] - 7.0).abs() < 1e-15);
        assert_eq!(factors[0], 1.0);
        for (a, b) in back.tensors()[2].data().iter().zip(once.tensors()[2].data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let spec = LatticeSpec::new(2, 3, 1.0, 0.5).unwrap();
        let p = PepsState::random_init(&spec, 3, 9).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PEPS");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let q = PepsState::read_checkpoint(buf.as_slice(), 1.0, 0.5).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let p = PepsState::random_init(&spec, 2, 9).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(PepsState::read_checkpoint(bad.as_slice(), 1.0, 0.0), Err(PepsError::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 7;
        assert!(matches!(PepsState::read_checkpoint(bad.as_slice(), 1.0, 0.0), Err(PepsError::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(PepsState::read_checkpoint(short, 1.0, 0.0), Err(PepsError::Format(_))));
    }

    #[test]
    fn mismatched_bonds_rejected() {
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let p = PepsState::random_init(&spec, 2, 9).unwrap();
        let mut tensors = p.into_tensors();
        tensors[1] = DenseTensor::from_fn(&[3, 1, 1, 2, 2], |_| 1.0);
        assert!(PepsState::from_tensors(spec, tensors).is_err());
    }
}
