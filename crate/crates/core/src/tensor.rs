//! Dense real tensors in row-major layout (last index fastest), with the
//! handful of operations the rest of the crate is built from: permutation,
//! reshaping, pairwise contraction, and truncated SVD / QR splits.
//!
//! Matrix kernels are delegated: products go through `matrixmultiply`, the
//! factorizations through `nalgebra`. Everything here is a pure function of
//! its inputs.

use nalgebra::DMatrix;

use crate::error::{PepsError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(PepsError::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        if len != data.len() {
            return Err(PepsError::Shape(format!(
                "dims {dims:?} need {len} entries, got {}",
                data.len()
            )));
        }
        Ok(DenseTensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        DenseTensor { dims: dims.to_vec(), data: vec![0.0; len] }
    }

    pub fn scalar(value: f64) -> Self {
        DenseTensor { dims: Vec::new(), data: vec![value] }
    }

    /// Fill from a function of the multi-index, visited in canonical order.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, dims);
        }
        DenseTensor { dims: dims.to_vec(), data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() {
            return Err(PepsError::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale(factor);
        self
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Multiply every slice along `axis` by the matching entry of `factors`.
    pub fn scale_axis(&mut self, axis: usize, factors: &[f64]) {
        assert_eq!(self.dims[axis], factors.len(), "axis length mismatch");
        let inner: usize = self.dims[axis + 1..].iter().product();
        let dim = self.dims[axis];
        for (chunk_idx, chunk) in self.data.chunks_mut(inner).enumerate() {
            let f = factors[chunk_idx % dim];
            chunk.iter_mut().for_each(|x| *x *= f);
        }
    }

    /// Fix `axis` to `index`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> DenseTensor {
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let dim = self.dims[axis];
        assert!(index < dim);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * dim + index) * inner;
            data.extend_from_slice(&self.data[start..start + inner]);
        }
        let mut dims = self.dims.clone();
        dims.remove(axis);
        DenseTensor { dims, data }
    }

    /// Zero-pad (or keep) every axis up to `dims`; existing entries keep their
    /// multi-index.
    pub fn pad_to(&self, dims: &[usize]) -> Result<DenseTensor> {
        if dims.len() != self.rank() || dims.iter().zip(&self.dims).any(|(n, o)| n < o) {
            return Err(PepsError::Shape(format!("cannot pad {:?} to {dims:?}", self.dims)));
        }
        let mut out = DenseTensor::zeros(dims);
        let mut idx = vec![0usize; self.rank()];
        for &v in &self.data {
            let off = out.offset(&idx);
            out.data[off] = v;
            increment(&mut idx, &self.dims);
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &DenseTensor) {
        assert_eq!(self.dims, other.dims);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    /// Full contraction `sum_i a_i b_i` of two equally shaped tensors.
    pub fn dot(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

fn increment(idx: &mut [usize], dims: &[usize]) {
    for k in (0..dims.len()).rev() {
        idx[k] += 1;
        if idx[k] < dims[k] {
            return;
        }
        idx[k] = 0;
    }
}

fn check_permutation(order: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if order.len() != rank {
        return Err(PepsError::InvalidArgument(format!(
            "permutation {order:?} has wrong length for rank {rank}"
        )));
    }
    for &o in order {
        if o >= rank || seen[o] {
            return Err(PepsError::InvalidArgument(format!("invalid permutation {order:?}")));
        }
        seen[o] = true;
    }
    Ok(())
}

/// Reorder axes: output axis `k` is input axis `order[k]`.
pub fn permute(t: &DenseTensor, order: &[usize]) -> Result<DenseTensor> {
    check_permutation(order, t.rank())?;
    Ok(permute_unchecked(t, order))
}

fn permute_unchecked(t: &DenseTensor, order: &[usize]) -> DenseTensor {
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return t.clone();
    }
    let rank = t.rank();
    let mut in_strides = vec![1usize; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * t.dims[k + 1];
    }
    let out_dims: Vec<usize> = order.iter().map(|&o| t.dims[o]).collect();
    // fuse output axes that stay adjacent in the input
    let mut dims: Vec<usize> = Vec::with_capacity(rank);
    let mut strides: Vec<usize> = Vec::with_capacity(rank);
    for (k, &o) in order.iter().enumerate() {
        if k > 0 && order[k - 1] + 1 == o {
            *dims.last_mut().unwrap() *= t.dims[o];
            *strides.last_mut().unwrap() = in_strides[o];
        } else {
            dims.push(t.dims[o]);
            strides.push(in_strides[o]);
        }
    }
    let mut data = Vec::with_capacity(t.data.len());
    let last = dims.len() - 1;
    let (n_last, s_last) = (dims[last], strides[last]);
    let mut idx = vec![0usize; last];
    let outer: usize = dims[..last].iter().product();
    let mut base = 0usize;
    for _ in 0..outer {
        if s_last == 1 {
            data.extend_from_slice(&t.data[base..base + n_last]);
        } else {
            data.extend((0..n_last).map(|j| t.data[base + j * s_last]));
        }
        for k in (0..last).rev() {
            idx[k] += 1;
            base += strides[k];
            if idx[k] < dims[k] {
                break;
            }
            base -= strides[k] * dims[k];
            idx[k] = 0;
        }
    }
    DenseTensor { dims: out_dims, data }
}

/// `c = a * b` with `a[i, p]` at `i * sa.0 + p * sa.1` and `b[p, j]` at
/// `p * sb.0 + j * sb.1`; `c` is row-major.
const NAIVE_GEMM_LIMIT: usize = 1024;

fn matmul_strided(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    if m * n * k <= NAIVE_GEMM_LIMIT {
        if sb.1 == 1 {
            for i in 0..m {
                let row = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = a[i * sa.0 + p * sa.1];
                    let bp = &b[p * sb.0..p * sb.0 + n];
                    for (cij, &bj) in row.iter_mut().zip(bp) {
                        *cij += x * bj;
                    }
                }
            }
            return c;
        }
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a[i * sa.0 + p * sa.1];
                if x == 0.0 {
                    continue;
                }
                let bp = p * sb.0;
                for (j, cij) in row.iter_mut().enumerate() {
                    *cij += x * b[bp + j * sb.1];
                }
            }
        }
        return c;
    }
    unsafe {
        // SAFETY: every index reachable through the given strides lies
        // inside `a` (m*k entries) and `b` (k*n entries); `c` is m*n.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn is_identity(order: &[usize]) -> bool {
    order.iter().enumerate().all(|(i, &o)| i == o)
}

/// Sum over paired axes. Result axes are `a`'s free axes (in order) followed
/// by `b`'s free axes.
pub fn contract(
    a: &DenseTensor,
    axes_a: &[usize],
    b: &DenseTensor,
    axes_b: &[usize],
) -> Result<DenseTensor> {
    if axes_a.len() != axes_b.len() {
        return Err(PepsError::Shape(format!(
            "contracting {} axes of a against {} axes of b",
            axes_a.len(),
            axes_b.len()
        )));
    }
    for (axes, t, name) in [(axes_a, a, "a"), (axes_b, b, "b")] {
        for (i, &ax) in axes.iter().enumerate() {
            if ax >= t.rank() {
                return Err(PepsError::InvalidArgument(format!("axis {ax} out of range for {name}")));
            }
            if axes[..i].contains(&ax) {
                return Err(PepsError::InvalidArgument(format!("repeated axis {ax} in {name}")));
            }
        }
    }
    for (&x, &y) in axes_a.iter().zip(axes_b) {
        if a.dims[x] != b.dims[y] {
            return Err(PepsError::Shape(format!(
                "axis {x} of a has dim {} but axis {y} of b has dim {}",
                a.dims[x], b.dims[y]
            )));
        }
    }
    let free_a: Vec<usize> = (0..a.rank()).filter(|i| !axes_a.contains(i)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|i| !axes_b.contains(i)).collect();
    let m: usize = free_a.iter().map(|&i| a.dims[i]).product();
    let n: usize = free_b.iter().map(|&i| b.dims[i]).product();
    let k: usize = axes_a.iter().map(|&i| a.dims[i]).product();

    // a as [free, contracted] row-major, or transposed if stored [contracted, free]
    let order_a: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
    let order_at: Vec<usize> = axes_a.iter().chain(&free_a).copied().collect();
    let (pa, sa) = if is_identity(&order_a) {
        (None, (k, 1))
    } else if is_identity(&order_at) {
        (None, (1, m))
    } else {
        (Some(permute_unchecked(a, &order_a)), (k, 1))
    };
    let order_b: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();
    let order_bt: Vec<usize> = free_b.iter().chain(axes_b).copied().collect();
    let (pb, sb) = if is_identity(&order_b) {
        (None, (n, 1))
    } else if is_identity(&order_bt) {
        (None, (1, k))
    } else {
        (Some(permute_unchecked(b, &order_b)), (n, 1))
    };
    let da = pa.as_ref().map_or(&a.data[..], |t| &t.data[..]);
    let db = pb.as_ref().map_or(&b.data[..], |t| &t.data[..]);
    let data = matmul_strided(da, sa, db, sb, m, k, n);
    let dims: Vec<usize> =
        free_a.iter().map(|&i| a.dims[i]).chain(free_b.iter().map(|&i| b.dims[i])).collect();
    Ok(DenseTensor { dims, data })
}

/// Truncated singular value decomposition of a tensor matricized with the
/// first `split` axes as rows. `u` carries the row axes plus a trailing bond,
/// `vt` a leading bond plus the column axes.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: DenseTensor,
    pub singular_values: Vec<f64>,
    pub vt: DenseTensor,
    /// `sqrt(sum discarded s^2) / sqrt(sum s^2)`.
    pub truncation_error: f64,
}

pub fn svd_truncate(t: &DenseTensor, split: usize, chi: usize) -> Result<SvdResult> {
    svd_truncate_cutoff(t, split, chi, 0.0)
}

/// As [`svd_truncate`], additionally dropping singular values below
/// `rel_cutoff * s_max`. At least one value is always kept.
pub fn svd_truncate_cutoff(
    t: &DenseTensor,
    split: usize,
    chi: usize,
    rel_cutoff: f64,
) -> Result<SvdResult> {
    if split == 0 || split >= t.rank() {
        return Err(PepsError::InvalidArgument(format!(
            "split {split} outside 1..{}",
            t.rank()
        )));
    }
    if chi == 0 {
        return Err(PepsError::InvalidArgument("chi must be at least 1".into()));
    }
    if !t.is_finite() {
        return Err(PepsError::NonFinite("svd input".into()));
    }
    let rows: usize = t.dims[..split].iter().product();
    let cols: usize = t.dims[split..].iter().product();
    let full = svd_matrix(&t.data, rows, cols)?;
    let keep_max = chi.min(full.s.len());
    let s_max = full.s.first().copied().unwrap_or(0.0);
    let mut keep = full.s[..keep_max].iter().take_while(|&&s| s > rel_cutoff * s_max).count();
    keep = keep.max(1);
    let total: f64 = full.s.iter().map(|s| s * s).sum();
    let discarded: f64 = full.s[keep..].iter().map(|s| s * s).sum();
    let truncation_error =
        if total > 0.0 { (discarded / total).sqrt().clamp(0.0, 1.0) } else { 0.0 };
    let k = full.s.len();
    let mut u = Vec::with_capacity(rows * keep);
    for r in 0..rows {
        u.extend_from_slice(&full.u[r * k..r * k + keep]);
    }
    let vt = full.vt[..keep * cols].to_vec();
    let mut u_dims = t.dims[..split].to_vec();
    u_dims.push(keep);
    let mut vt_dims = vec![keep];
    vt_dims.extend_from_slice(&t.dims[split..]);
    Ok(SvdResult {
        u: DenseTensor { dims: u_dims, data: u },
        singular_values: full.s[..keep].to_vec(),
        vt: DenseTensor { dims: vt_dims, data: vt },
        truncation_error,
    })
}

/// Thin SVD of a row-major matrix, singular values descending.
pub(crate) struct MatrixSvd {
    /// rows x k, row-major
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    /// k x cols, row-major
    pub vt: Vec<f64>,
}

pub(crate) fn svd_matrix(data: &[f64], rows: usize, cols: usize) -> Result<MatrixSvd> {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let svd = nalgebra::linalg::SVD::try_new(m, true, true, f64::EPSILON, 0)
        .ok_or_else(|| PepsError::NoConvergence(format!("SVD of {rows}x{cols} matrix")))?;
    let u = svd.u.expect("requested u");
    let vt = svd.v_t.expect("requested v_t");
    let s = svd.singular_values;
    let k = s.len();
    let mut order: Vec<usize> = (0..k).collect();
    // stable: ties keep the factorization's own order
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u_out = Vec::with_capacity(rows * k);
    for r in 0..rows {
        for &j in &order {
            u_out.push(u[(r, j)]);
        }
    }
    let mut vt_out = Vec::with_capacity(k * cols);
    for &j in &order {
        for c in 0..cols {
            vt_out.push(vt[(j, c)]);
        }
    }
    let s_out: Vec<f64> = order.iter().map(|&j| s[j].max(0.0)).collect();
    Ok(MatrixSvd { u: u_out, s: s_out, vt: vt_out })
}

/// Thin QR split with the first `split` axes as rows: `q` has orthonormal
/// columns and carries the row axes plus a trailing bond; `r` a leading bond
/// plus the column axes.
pub fn qr_split(t: &DenseTensor, split: usize) -> Result<(DenseTensor, DenseTensor)> {
    if split == 0 || split >= t.rank() {
        return Err(PepsError::InvalidArgument(format!(
            "split {split} outside 1..{}",
            t.rank()
        )));
    }
    if !t.is_finite() {
        return Err(PepsError::NonFinite("qr input".into()));
    }
    let rows: usize = t.dims[..split].iter().product();
    let cols: usize = t.dims[split..].iter().product();
    let (q, r, k) = qr_matrix(&t.data, rows, cols);
    let mut q_dims = t.dims[..split].to_vec();
    q_dims.push(k);
    let mut r_dims = vec![k];
    r_dims.extend_from_slice(&t.dims[split..]);
    Ok((DenseTensor { dims: q_dims, data: q }, DenseTensor { dims: r_dims, data: r }))
}

/// Thin QR of a row-major matrix; returns `(q rows x k, r k x cols, k)`.
pub(crate) fn qr_matrix(data: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let qr = m.qr();
    let q = qr.q();
    let r = qr.r();
    let k = rows.min(cols);
    let mut q_out = Vec::with_capacity(rows * k);
    for i in 0..rows {
        for j in 0..k {
            q_out.push(q[(i, j)]);
        }
    }
    let mut r_out = Vec::with_capacity(k * cols);
    for i in 0..k {
        for j in 0..cols {
            r_out.push(r[(i, j)]);
        }
    }
    (q_out, r_out, k)
}
