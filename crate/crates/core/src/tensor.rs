//! Dense complex tensors with named indices, plus the decompositions the
//! simulators are built on (truncated SVD, QR, Hermitian square roots).
//!
//! Data is stored row-major over the index sequence. Decompositions go
//! through LAPACK; everything else is plain index bookkeeping.

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;

use ndarray::{Array1, Array2, ArrayViewD, IxDyn, ShapeBuilder};
use ndarray_linalg::{Eigh, JobSvd, SVDDC, QR, SVD, UPLO};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Double-precision complex scalar used everywhere in the crate.
pub type C64 = Complex64;

/// Default singular-value cutoff.
pub const DEFAULT_SV_CUTOFF: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch on contracted pair ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("index position {0} repeated in contraction pairs")]
    RepeatedIndex(usize),
    #[error("index position {position} out of range for rank {rank}")]
    OutOfRange { position: usize, rank: usize },
    #[error("label collision on `{0}`")]
    LabelCollision(String),
    #[error("data length {got} does not match shape product {expected}")]
    DataLength { got: usize, expected: usize },
    #[error("index `{0}` has dimension 0")]
    ZeroDimension(String),
    #[error("left index set must be a proper nonempty subset of the indices")]
    DegenerateSplit,
    #[error("unknown index `{0}`")]
    UnknownIndex(String),
    #[error("invalid permutation")]
    InvalidPermutation,
    #[error("split dimensions do not multiply to {0}")]
    SplitMismatch(usize),
    #[error("linear algebra backend failure: {0}")]
    Linalg(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static OP_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-add counter for the current thread (contractions and
/// decompositions). Used for the coarse cost-model checks.
pub mod op_count {
    use super::OP_COUNT;

    pub fn reset() {
        OP_COUNT.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        OP_COUNT.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        OP_COUNT.with(|c| c.set(c.get().saturating_add(n)));
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexLabel {
    pub name: String,
    pub dim: usize,
}

impl IndexLabel {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }
}

impl fmt::Display for IndexLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.name, self.dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    indices: Vec<IndexLabel>,
    data: Vec<C64>,
}

#[derive(Clone, Debug)]
pub struct SvdResult {
    pub left: DenseTensor,
    pub singular_values: Vec<f64>,
    pub right: DenseTensor,
    pub discarded_weight: f64,
}

impl SvdResult {
    /// Name of the bond index shared by `left` and `right`.
    pub fn bond_name(&self) -> &str {
        &self.left.indices().last().expect("left factor has a bond index").name
    }

    /// `right` with the singular values multiplied in.
    pub fn weighted_right(&self) -> DenseTensor {
        let mut r = self.right.clone();
        let cols = r.len() / self.singular_values.len();
        for (k, s) in self.singular_values.iter().enumerate() {
            for z in &mut r.data[k * cols..(k + 1) * cols] {
                *z *= s;
            }
        }
        r
    }

    /// `left · diag(s) · right`.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        contract_shared(&self.left, &self.weighted_right())
    }
}

fn check_labels(indices: &[IndexLabel]) -> Result<()> {
    let mut seen = HashSet::new();
    for ix in indices {
        if ix.dim == 0 {
            return Err(TensorError::ZeroDimension(ix.name.clone()));
        }
        if !seen.insert(ix.name.as_str()) {
            return Err(TensorError::LabelCollision(ix.name.clone()));
        }
    }
    Ok(())
}

impl DenseTensor {
    pub fn new(indices: Vec<IndexLabel>, data: Vec<C64>) -> Result<Self> {
        check_labels(&indices)?;
        let expected: usize = indices.iter().map(|i| i.dim).product();
        if data.len() != expected {
            return Err(TensorError::DataLength { got: data.len(), expected });
        }
        Ok(Self { indices, data })
    }

    pub fn zeros(indices: Vec<IndexLabel>) -> Result<Self> {
        let n = indices.iter().map(|i| i.dim).product();
        Self::new(indices, vec![C64::new(0.0, 0.0); n])
    }

    /// Rank-0 tensor holding one number.
    pub fn scalar(value: C64) -> Self {
        Self { indices: Vec::new(), data: vec![value] }
    }

    /// Builds a tensor by evaluating `f` on every multi-index (row-major).
    pub fn from_fn(indices: Vec<IndexLabel>, mut f: impl FnMut(&[usize]) -> C64) -> Result<Self> {
        check_labels(&indices)?;
        let dims: Vec<usize> = indices.iter().map(|i| i.dim).collect();
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for k in (0..dims.len()).rev() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(Self { indices, data })
    }

    /// Identity matrix between two indices of equal dimension.
    pub fn identity(row: &str, col: &str, dim: usize) -> Result<Self> {
        Self::from_fn(vec![IndexLabel::new(row, dim), IndexLabel::new(col, dim)], |ix| {
            if ix[0] == ix[1] {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    /// Wraps a matrix whose rows run over `row_labels` and columns over
    /// `col_labels` (both row-major).
    pub fn from_matrix(mat: &Array2<C64>, row_labels: Vec<IndexLabel>, col_labels: Vec<IndexLabel>) -> Result<Self> {
        let rows: usize = row_labels.iter().map(|i| i.dim).product();
        let cols: usize = col_labels.iter().map(|i| i.dim).product();
        if mat.dim() != (rows, cols) {
            return Err(TensorError::DataLength { got: mat.len(), expected: rows * cols });
        }
        let mut indices = row_labels;
        indices.extend(col_labels);
        let data = if mat.is_standard_layout() {
            mat.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| mat.iter().cloned().collect())
        } else {
            mat.iter().cloned().collect()
        };
        Self::new(indices, data)
    }

    pub fn indices(&self) -> &[IndexLabel] {
        &self.indices
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.indices.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.indices.iter().map(|i| i.dim).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.indices.iter().position(|i| i.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.position(name).ok_or_else(|| TensorError::UnknownIndex(name.to_string()))
    }

    pub fn dim_of(&self, name: &str) -> Option<usize> {
        self.position(name).map(|p| self.indices[p].dim)
    }

    pub fn has_index(&self, name: &str) -> bool {
        self.position(name).is_some()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Entry at a multi-index.
    pub fn get(&self, idx: &[usize]) -> C64 {
        let mut flat = 0;
        for (k, ix) in self.indices.iter().enumerate() {
            flat = flat * ix.dim + idx[k];
        }
        self.data[flat]
    }

    /// Scalar value of a rank-0 (or all-dim-1) tensor.
    pub fn scalar_value(&self) -> C64 {
        self.data[0]
    }

    pub fn relabel(&mut self, old: &str, new: &str) -> Result<()> {
        if old == new {
            return Ok(());
        }
        if self.has_index(new) {
            return Err(TensorError::LabelCollision(new.to_string()));
        }
        let p = self.require(old)?;
        self.indices[p].name = new.to_string();
        Ok(())
    }

    pub fn relabeled(mut self, old: &str, new: &str) -> Result<Self> {
        self.relabel(old, new)?;
        Ok(self)
    }

    /// Reorders indices so that new position `k` holds old index `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        if perm.len() != r {
            return Err(TensorError::InvalidPermutation);
        }
        let mut seen = vec![false; r];
        for &p in perm {
            if p >= r || seen[p] {
                return Err(TensorError::InvalidPermutation);
            }
            seen[p] = true;
        }
        if perm.iter().enumerate().all(|(k, &p)| k == p) {
            return Ok(self.clone());
        }
        let data = permuted_data(&self.data, &self.dims(), perm);
        let indices = perm.iter().map(|&p| self.indices[p].clone()).collect();
        Ok(Self { indices, data })
    }

    /// Reorders indices to the given name sequence (must name every index).
    pub fn permute_names(&self, names: &[&str]) -> Result<Self> {
        if names.len() != self.rank() {
            return Err(TensorError::InvalidPermutation);
        }
        let perm = names.iter().map(|n| self.require(n)).collect::<Result<Vec<_>>>()?;
        self.permute(&perm)
    }

    /// Fuses the listed indices (in the listed order) into one index called
    /// `name`, placed where the first of them sat; other indices keep their
    /// relative order.
    pub fn fuse(&self, positions: &[usize], name: &str) -> Result<Self> {
        if positions.is_empty() {
            return Err(TensorError::DegenerateSplit);
        }
        let r = self.rank();
        let mut seen = vec![false; r];
        for &p in positions {
            if p >= r {
                return Err(TensorError::OutOfRange { position: p, rank: r });
            }
            if seen[p] {
                return Err(TensorError::RepeatedIndex(p));
            }
            seen[p] = true;
        }
        let anchor = positions[0];
        let mut perm = Vec::with_capacity(r);
        for k in 0..r {
            if k == anchor {
                perm.extend_from_slice(positions);
            } else if !seen[k] {
                perm.push(k);
            }
        }
        let t = self.permute(&perm)?;
        let fused_dim: usize = positions.iter().map(|&p| self.indices[p].dim).product();
        let mut indices = Vec::with_capacity(r - positions.len() + 1);
        for k in 0..r {
            if k == anchor {
                indices.push(IndexLabel::new(name, fused_dim));
            } else if !seen[k] {
                indices.push(self.indices[k].clone());
            }
        }
        Self::new(indices, t.data)
    }

    /// Splits the index at `position` into `labels` (row-major), the inverse of `fuse`.
    pub fn split(&self, position: usize, labels: Vec<IndexLabel>) -> Result<Self> {
        let r = self.rank();
        if position >= r {
            return Err(TensorError::OutOfRange { position, rank: r });
        }
        let d: usize = labels.iter().map(|l| l.dim).product();
        if d != self.indices[position].dim {
            return Err(TensorError::SplitMismatch(self.indices[position].dim));
        }
        let mut indices = Vec::with_capacity(r + labels.len());
        indices.extend_from_slice(&self.indices[..position]);
        indices.extend(labels);
        indices.extend_from_slice(&self.indices[position + 1..]);
        Self::new(indices, self.data.clone())
    }

    pub fn conj(&self) -> Self {
        Self { indices: self.indices.clone(), data: self.data.iter().map(|z| z.conj()).collect() }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: C64) {
        for z in &mut self.data {
            *z *= s;
        }
    }

    pub fn scaled(mut self, s: C64) -> Self {
        self.scale(s);
        self
    }

    /// Largest entry-wise difference after aligning `other`'s indices by name.
    pub fn max_abs_diff(&self, other: &DenseTensor) -> Result<f64> {
        let names: Vec<&str> = self.indices.iter().map(|i| i.name.as_str()).collect();
        let o = other.permute_names(&names)?;
        if o.dims() != self.dims() {
            return Err(TensorError::DimensionMismatch { left: self.len(), right: o.len() });
        }
        Ok(self.data.iter().zip(&o.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }

    /// Frobenius distance after aligning `other`'s indices by name.
    pub fn distance(&self, other: &DenseTensor) -> Result<f64> {
        let names: Vec<&str> = self.indices.iter().map(|i| i.name.as_str()).collect();
        let o = other.permute_names(&names)?;
        if o.dims() != self.dims() {
            return Err(TensorError::DimensionMismatch { left: self.len(), right: o.len() });
        }
        Ok(self.data.iter().zip(&o.data).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt())
    }

    /// Matrix view with rows over `left` positions (in the given order) and
    /// columns over the remaining indices in their original order.
    pub fn matricize(&self, left: &[usize]) -> Result<(Array2<C64>, Vec<IndexLabel>, Vec<IndexLabel>)> {
        let r = self.rank();
        let mut is_left = vec![false; r];
        for &p in left {
            if p >= r {
                return Err(TensorError::OutOfRange { position: p, rank: r });
            }
            if is_left[p] {
                return Err(TensorError::RepeatedIndex(p));
            }
            is_left[p] = true;
        }
        let mut perm: Vec<usize> = left.to_vec();
        perm.extend((0..r).filter(|k| !is_left[*k]));
        let t = self.permute(&perm)?;
        let row_labels: Vec<IndexLabel> = t.indices[..left.len()].to_vec();
        let col_labels: Vec<IndexLabel> = t.indices[left.len()..].to_vec();
        let rows: usize = row_labels.iter().map(|i| i.dim).product();
        let cols: usize = col_labels.iter().map(|i| i.dim).product();
        let mat = Array2::from_shape_vec((rows, cols), t.data).map_err(|e| TensorError::Linalg(e.to_string()))?;
        Ok((mat, row_labels, col_labels))
    }

    fn positions_of(&self, names: &[&str]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.require(n)).collect()
    }
}

fn permuted_data(data: &[C64], dims: &[usize], perm: &[usize]) -> Vec<C64> {
    let view = ArrayViewD::from_shape(IxDyn(dims), data).expect("shape matches data");
    let p = view.permuted_axes(IxDyn(perm));
    p.iter().cloned().collect()
}

/// Sums over the listed index pairs (position in `a`, position in `b`).
/// The result carries the unpaired indices of `a`, then those of `b`.
pub fn contract(a: &DenseTensor, b: &DenseTensor, pairs: &[(usize, usize)]) -> Result<DenseTensor> {
    let (ra, rb) = (a.rank(), b.rank());
    let mut used_a = vec![false; ra];
    let mut used_b = vec![false; rb];
    for &(pa, pb) in pairs {
        if pa >= ra {
            return Err(TensorError::OutOfRange { position: pa, rank: ra });
        }
        if pb >= rb {
            return Err(TensorError::OutOfRange { position: pb, rank: rb });
        }
        if used_a[pa] {
            return Err(TensorError::RepeatedIndex(pa));
        }
        if used_b[pb] {
            return Err(TensorError::RepeatedIndex(pb));
        }
        used_a[pa] = true;
        used_b[pb] = true;
        let (da, db) = (a.indices[pa].dim, b.indices[pb].dim);
        if da != db {
            return Err(TensorError::DimensionMismatch { left: da, right: db });
        }
    }
    let free_a: Vec<usize> = (0..ra).filter(|k| !used_a[*k]).collect();
    let free_b: Vec<usize> = (0..rb).filter(|k| !used_b[*k]).collect();
    let mut out_labels: Vec<IndexLabel> = free_a.iter().map(|&k| a.indices[k].clone()).collect();
    out_labels.extend(free_b.iter().map(|&k| b.indices[k].clone()));
    check_labels(&out_labels)?;

    let mut perm_a = free_a.clone();
    perm_a.extend(pairs.iter().map(|p| p.0));
    let mut perm_b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    perm_b.extend(free_b.iter().cloned());
    let m: usize = free_a.iter().map(|&k| a.indices[k].dim).product();
    let n: usize = free_b.iter().map(|&k| b.indices[k].dim).product();
    let k: usize = pairs.iter().map(|p| a.indices[p.0].dim).product();

    let ta = a.permute(&perm_a)?;
    let tb = b.permute(&perm_b)?;
    let ma = Array2::from_shape_vec((m, k), ta.data).map_err(|e| TensorError::Linalg(e.to_string()))?;
    let mb = Array2::from_shape_vec((k, n), tb.data).map_err(|e| TensorError::Linalg(e.to_string()))?;
    op_count::add((m as u64) * (n as u64) * (k as u64));
    let mc = ma.dot(&mb);
    let data = mc.into_raw_vec_and_offset().0;
    Ok(DenseTensor { indices: out_labels, data })
}

/// Contracts every index name shared by `a` and `b`.
pub fn contract_shared(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let pairs: Vec<(usize, usize)> = a
        .indices
        .iter()
        .enumerate()
        .filter_map(|(i, ix)| b.position(&ix.name).map(|j| (i, j)))
        .collect();
    contract(a, b, &pairs)
}

/// Contracts the named indices of `a` with the equally named indices of `b`.
pub fn contract_names(a: &DenseTensor, b: &DenseTensor, names: &[&str]) -> Result<DenseTensor> {
    let pairs = names
        .iter()
        .map(|n| Ok((a.require(n)?, b.require(n)?)))
        .collect::<Result<Vec<_>>>()?;
    contract(a, b, &pairs)
}

fn split_positions(t: &DenseTensor, left: &[&str]) -> Result<Vec<usize>> {
    if left.is_empty() || left.len() >= t.rank() {
        return Err(TensorError::DegenerateSplit);
    }
    let pos = t.positions_of(left)?;
    let mut seen = HashSet::new();
    for &p in &pos {
        if !seen.insert(p) {
            return Err(TensorError::RepeatedIndex(p));
        }
    }
    Ok(pos)
}

/// Dense SVD of a matrix: (U, s, Vh) with thin factors and descending `s`.
pub fn svd_matrix(mat: &Array2<C64>) -> Result<(Array2<C64>, Vec<f64>, Array2<C64>)> {
    let (m, n) = mat.dim();
    let k = m.min(n);
    op_count::add((m as u64) * (n as u64) * (k as u64));
    let (u, s, vt) = match mat.svddc(JobSvd::Some) {
        Ok((Some(u), s, Some(vt))) => (u, s, vt),
        _ => match mat.svd(true, true) {
            Ok((Some(u), s, Some(vt))) => {
                let u = u.slice(ndarray::s![.., ..k]).to_owned();
                let vt = vt.slice(ndarray::s![..k, ..]).to_owned();
                (u, s, vt)
            }
            Ok(_) => return Err(TensorError::Linalg("svd returned no vectors".into())),
            Err(e) => return Err(TensorError::Linalg(e.to_string())),
        },
    };
    Ok((u, s.to_vec(), vt))
}

/// Truncated SVD: keeps `min(max_rank, #{s > cutoff}, full rank)` singular
/// values (at least one). `left` names the row indices; `bond` names the
/// new index shared by the two factors. Each left singular vector is
/// phase-fixed so its largest-magnitude entry is real and positive.
pub fn svd_truncate(t: &DenseTensor, left: &[&str], max_rank: usize, cutoff: f64, bond: &str) -> Result<SvdResult> {
    if max_rank == 0 || cutoff < 0.0 {
        return Err(TensorError::DegenerateSplit);
    }
    let pos = split_positions(t, left)?;
    let (mat, row_labels, col_labels) = t.matricize(&pos)?;
    let (mut u, s, mut vt) = svd_matrix(&mat)?;
    let full = s.len();
    let above = s.iter().filter(|&&x| x > cutoff).count();
    let keep = max_rank.min(above).min(full).max(1);
    let discarded_weight: f64 = s[keep..].iter().map(|x| x * x).sum();
    fix_phases(&mut u, &mut vt, keep);
    let u = u.slice(ndarray::s![.., ..keep]).to_owned();
    let vt = vt.slice(ndarray::s![..keep, ..]).to_owned();
    let bond_label = IndexLabel::new(bond, keep);
    let left_t = DenseTensor::from_matrix(&u, row_labels, vec![bond_label.clone()])?;
    let right_t = DenseTensor::from_matrix(&vt, vec![bond_label], col_labels)?;
    Ok(SvdResult { left: left_t, singular_values: s[..keep].to_vec(), right: right_t, discarded_weight })
}

fn fix_phases(u: &mut Array2<C64>, vt: &mut Array2<C64>, keep: usize) {
    for k in 0..keep {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..u.nrows() {
            let a = u[[i, k]].norm();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if best_abs <= 0.0 {
            continue;
        }
        let z = u[[best, k]];
        let phase = z.conj() / z.norm();
        for i in 0..u.nrows() {
            u[[i, k]] *= phase;
        }
        let back = phase.conj();
        for j in 0..vt.ncols() {
            vt[[k, j]] *= back;
        }
    }
}

/// QR split: `q` carries the `left` indices plus `bond` and is an isometry
/// over `bond`; `r` carries `bond` plus the remaining indices.
pub fn qr_split(t: &DenseTensor, left: &[&str], bond: &str) -> Result<(DenseTensor, DenseTensor)> {
    let pos = split_positions(t, left)?;
    let (mat, row_labels, col_labels) = t.matricize(&pos)?;
    let (m, n) = mat.dim();
    let k = m.min(n);
    op_count::add((m as u64) * (n as u64) * (k as u64));
    let (q, r) = mat.qr().map_err(|e| TensorError::Linalg(e.to_string()))?;
    let q = q.slice(ndarray::s![.., ..k]).to_owned();
    let r = r.slice(ndarray::s![..k, ..]).to_owned();
    let bond_label = IndexLabel::new(bond, k);
    let qt = DenseTensor::from_matrix(&q, row_labels, vec![bond_label.clone()])?;
    let rt = DenseTensor::from_matrix(&r, vec![bond_label], col_labels)?;
    Ok((qt, rt))
}

/// Eigen-decomposition of a Hermitian matrix (ascending eigenvalues).
pub fn hermitian_eigh(mat: &Array2<C64>) -> Result<(Array1<f64>, Array2<C64>)> {
    let n = mat.nrows();
    op_count::add((n as u64).pow(3));
    let sym = (mat + &mat.t().mapv(|z| z.conj())).mapv(|z| z * 0.5);
    // column-major input so LAPACK sees the matrix itself rather than its transpose
    let mut f = Array2::<C64>::zeros((n, n).f());
    f.assign(&sym);
    f.eigh(UPLO::Lower).map_err(|e| TensorError::Linalg(e.to_string()))
}

/// Square root and pseudo-inverse square root of a positive semi-definite
/// matrix. Eigenvalues below `rel_cutoff` times the largest one are treated
/// as zero in the pseudo-inverse; negative eigenvalues are clamped to zero.
pub fn psd_sqrt_pair(mat: &Array2<C64>, rel_cutoff: f64) -> Result<(Array2<C64>, Array2<C64>)> {
    let (w, v) = hermitian_eigh(mat)?;
    let wmax = w.iter().cloned().fold(0.0, f64::max);
    let n = mat.nrows();
    let mut sq = Array2::<C64>::zeros((n, n));
    let mut isq = Array2::<C64>::zeros((n, n));
    for k in 0..n {
        let lam = w[k].max(0.0);
        let s = lam.sqrt();
        let inv = if wmax > 0.0 && lam > rel_cutoff * wmax { 1.0 / s } else { 0.0 };
        for i in 0..n {
            let vik = v[[i, k]];
            for j in 0..n {
                let p = vik * v[[j, k]].conj();
                sq[[i, j]] += p * s;
                isq[[i, j]] += p * inv;
            }
        }
    }
    Ok((sq, isq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, labels: &[(&str, usize)]) -> DenseTensor {
        let idx: Vec<IndexLabel> = labels.iter().map(|(n, d)| IndexLabel::new(*n, *d)).collect();
        DenseTensor::from_fn(idx, |_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn identity_contraction_returns_vector() {
        let id = DenseTensor::identity("i", "j", 2).unwrap();
        let v = DenseTensor::new(vec![IndexLabel::new("j", 2)], vec![c(0.3, 1.0), c(-2.0, 0.5)]).unwrap();
        let out = contract(&id, &v, &[(1, 0)]).unwrap();
        assert_eq!(out.data(), v.data());
        assert_eq!(out.indices()[0].name, "i");
    }

    #[test]
    fn rank_one_contraction() {
        let u = [c(1.0, 0.0), c(0.0, 2.0)];
        let v = [c(0.5, -1.0), c(2.0, 0.0), c(0.0, 1.0)];
        let w = [c(3.0, 0.0), c(-1.0, 1.0)];
        let a = DenseTensor::from_fn(vec![IndexLabel::new("a", 2), IndexLabel::new("m", 3)], |ix| u[ix[0]] * v[ix[1]]).unwrap();
        let b = DenseTensor::from_fn(vec![IndexLabel::new("m", 3), IndexLabel::new("b", 2)], |ix| v[ix[0]].conj() * w[ix[1]]).unwrap();
        let out = contract(&a, &b, &[(1, 0)]).unwrap();
        let vv: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.get(&[i, j]) - u[i] * w[j] * vv).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn contraction_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, &[("x", 3), ("y", 4), ("z", 5)]);
        let b = random_tensor(&mut rng, &[("z", 5), ("y", 4)]);
        let out = contract(&a, &b, &[(1, 1), (2, 0)]).unwrap();
        assert_eq!(out.dims(), vec![3]);
        for i in 0..3 {
            let mut acc = c(0.0, 0.0);
            for j in 0..4 {
                for k in 0..5 {
                    acc += a.get(&[i, j, k]) * b.get(&[k, j]);
                }
            }
            assert!((out.get(&[i]) - acc).norm() < 1e-12);
        }
    }

    #[test]
    fn contraction_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, &[("x", 3), ("y", 4)]);
        let b = random_tensor(&mut rng, &[("u", 3), ("v", 5)]);
        assert!(matches!(contract(&a, &b, &[(1, 0)]), Err(TensorError::DimensionMismatch { .. })));
        assert!(matches!(contract(&a, &b, &[(0, 0), (0, 1)]), Err(TensorError::RepeatedIndex(0))));
        let c2 = random_tensor(&mut rng, &[("x", 2)]);
        assert!(matches!(contract(&a, &c2, &[]), Err(TensorError::LabelCollision(_))));
    }

    #[test]
    fn svd_of_diagonal() {
        let d = [3.0, 2.0, 1.0];
        let t = DenseTensor::from_fn(vec![IndexLabel::new("r", 3), IndexLabel::new("c", 3)], |ix| {
            if ix[0] == ix[1] {
                c(d[ix[0]], 0.0)
            } else {
                c(0.0, 0.0)
            }
        })
        .unwrap();
        let res = svd_truncate(&t, &["r"], 2, 0.0, "k").unwrap();
        assert!((res.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((res.singular_values[1] - 2.0).abs() < 1e-12);
        assert!((res.discarded_weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_without_truncation_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, &[("a", 2), ("b", 3), ("c", 4)]);
        let res = svd_truncate(&t, &["c", "a"], usize::MAX, 0.0, "k").unwrap();
        assert_eq!(res.discarded_weight, 0.0);
        let back = res.reconstruct().unwrap();
        assert!(t.distance(&back).unwrap() < 1e-12 * t.frobenius_norm().max(1.0));
    }

    #[test]
    fn svd_truncation_matches_full_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tensor(&mut rng, &[("r", 8), ("c", 8)]);
        let full = svd_truncate(&t, &["r"], usize::MAX, 0.0, "k").unwrap();
        let cut = svd_truncate(&t, &["r"], 3, 0.0, "k").unwrap();
        let tail: f64 = full.singular_values[3..].iter().map(|s| s * s).sum();
        assert_eq!(full.singular_values.len(), 8);
        assert!((cut.discarded_weight - tail).abs() < 1e-10);
        let back = cut.reconstruct().unwrap();
        let err = t.distance(&back).unwrap();
        assert!((err - tail.sqrt()).abs() < 1e-10 * t.frobenius_norm());
    }

    #[test]
    fn svd_phase_fix_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&mut rng, &[("r", 5), ("c", 4)]);
        let a = svd_truncate(&t, &["r"], 4, 0.0, "k").unwrap();
        let b = svd_truncate(&t, &["r"], 4, 0.0, "k").unwrap();
        assert_eq!(a.left.data(), b.left.data());
        let (mat, _, _) = a.left.matricize(&[0]).unwrap();
        for k in 0..4 {
            let col = mat.column(k);
            let best = col.iter().cloned().max_by(|x, y| x.norm().partial_cmp(&y.norm()).unwrap()).unwrap();
            assert!(best.im.abs() < 1e-12 && best.re > 0.0);
        }
    }

    #[test]
    fn svd_rejects_degenerate_left_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_tensor(&mut rng, &[("r", 2), ("c", 2)]);
        assert!(matches!(svd_truncate(&t, &[], 2, 0.0, "k"), Err(TensorError::DegenerateSplit)));
        assert!(matches!(svd_truncate(&t, &["r", "c"], 2, 0.0, "k"), Err(TensorError::DegenerateSplit)));
        assert!(matches!(qr_split(&t, &[], "k"), Err(TensorError::DegenerateSplit)));
    }

    #[test]
    fn qr_of_identity_and_vector() {
        let id = DenseTensor::identity("r", "c", 3).unwrap();
        let (q, r) = qr_split(&id, &["r"], "k").unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((q.get(&[i, j]).norm() - expect).abs() < 1e-12);
                assert!((r.get(&[i, j]).norm() - expect).abs() < 1e-12);
            }
        }
        let v = DenseTensor::new(
            vec![IndexLabel::new("r", 3), IndexLabel::new("c", 1)],
            vec![c(3.0, 0.0), c(0.0, 4.0), c(0.0, 0.0)],
        )
        .unwrap();
        let (q, r) = qr_split(&v, &["r"], "k").unwrap();
        assert_eq!(q.dims(), vec![3, 1]);
        assert!((r.get(&[0, 0]).norm() - 5.0).abs() < 1e-12);
        assert!((q.frobenius_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn qr_isometry_on_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_tensor(&mut rng, &[("r", 6), ("c", 4)]);
        let (q, r) = qr_split(&t, &["r"], "k").unwrap();
        let qq = contract_names(&q.conj(), &q.clone().relabeled("k", "k2").unwrap(), &["r"]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((qq.get(&[i, j]) - c(expect, 0.0)).norm() < 1e-12);
            }
        }
        let back = contract_shared(&q, &r).unwrap();
        assert!(t.distance(&back).unwrap() < 1e-12 * t.frobenius_norm());
    }

    #[test]
    fn permute_fuse_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_tensor(&mut rng, &[("a", 2), ("b", 3), ("c", 4)]);
        let p = t.permute(&[2, 0, 1]).unwrap();
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
        let f = t.fuse(&[0, 1], "ab").unwrap();
        assert_eq!(f.dims(), vec![6, 4]);
        let s = f.split(0, vec![IndexLabel::new("a", 2), IndexLabel::new("b", 3)]).unwrap();
        assert_eq!(s, t);
        assert!(matches!(t.relabel_clone("a", "b"), Err(TensorError::LabelCollision(_))));
    }

    impl DenseTensor {
        fn relabel_clone(&self, old: &str, new: &str) -> Result<DenseTensor> {
            self.clone().relabeled(old, new)
        }
    }

    #[test]
    fn norm_matches_entry_sum_and_conj_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_tensor(&mut rng, &[("a", 3), ("b", 5)]);
        let mut acc = 0.0;
        for z in t.data() {
            acc += z.re * z.re + z.im * z.im;
        }
        assert!((t.frobenius_norm() - acc.sqrt()).abs() < 1e-12);
        assert_eq!(t.conj().conj(), t);
    }

    #[test]
    fn psd_sqrt_reproduces_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_tensor(&mut rng, &[("x", 5), ("y", 3)]);
        let (m, _, _) = a.matricize(&[0]).unwrap();
        let psd = m.t().mapv(|z| z.conj()).dot(&m);
        let (sq, isq) = psd_sqrt_pair(&psd, 1e-12).unwrap();
        let back = sq.dot(&sq);
        for (x, y) in back.iter().zip(psd.iter()) {
            assert!((x - y).norm() < 1e-10);
        }
        let id = sq.dot(&isq);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((id[[i, j]] - c(expect, 0.0)).norm() < 1e-8);
            }
        }
    }
}
