//! Expectation values of a PEPS: exact contraction (single-layer through the
//! amplitude vector, or double-layer boundary absorption without
//! truncation) and boundary-MPS contraction with bond dimension χ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::Site;
use crate::peps::{edge_label, phys_label, Peps};
use crate::statevector::{StateError, StateVector};
use crate::tensor::{contract_names, qr_split, svd_truncate, DenseTensor, IndexLabel, TensorError, C64};

/// Largest intermediate (in complex entries) accepted by the exact routes.
pub const DEFAULT_MAX_ELEMENTS: usize = 1 << 25;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("site {0} is not a vertex of the PEPS")]
    UnknownSite(Site),
    #[error("intermediate of {got} entries exceeds the guard of {max}")]
    SizeGuard { got: usize, max: usize },
    #[error("chi must be at least 1")]
    InvalidChi,
    #[error("norm is not positive ({0})")]
    NonPositiveNorm(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    State(#[from] StateError),
}

pub type Result<T> = std::result::Result<T, ExtractionError>;

const PAULI_Z: [C64; 4] = [C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(-1.0, 0.0)];

/// Dense amplitudes of the PEPS (qubits in sorted coordinate order).
/// Vertices are absorbed greedily, always picking the one that leaves the
/// fewest open entries (ties to the lower index).
pub fn peps_to_statevector(p: &Peps, max_elements: usize) -> Result<StateVector> {
    let g = p.graph();
    let n = g.num_vertices();
    let mut absorbed = vec![false; n];
    let mut acc = DenseTensor::scalar(C64::new(1.0, 0.0));
    for _ in 0..n {
        let mut best: Option<(usize, usize)> = None;
        for v in 0..n {
            if absorbed[v] {
                continue;
            }
            let size = size_after(p, &acc, &absorbed, v);
            if best.is_none_or(|(_, s)| size < s) {
                best = Some((v, size));
            }
        }
        let (v, size) = best.expect("unabsorbed vertex");
        if size > max_elements {
            return Err(ExtractionError::SizeGuard { got: size, max: max_elements });
        }
        let t = p.tensor(v);
        let shared: Vec<String> = g.neighbors(v).iter().filter(|(nb, _)| absorbed[*nb]).map(|(_, k)| edge_label(*k)).collect();
        let refs: Vec<&str> = shared.iter().map(|s| s.as_str()).collect();
        acc = contract_names(&acc, t, &refs)?;
        absorbed[v] = true;
    }
    let names: Vec<String> = (0..n).map(phys_label).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let acc = acc.permute_names(&refs)?;
    Ok(StateVector::from_amplitudes(g.vertices().to_vec(), acc.into_data())?)
}

fn size_after(p: &Peps, acc: &DenseTensor, absorbed: &[bool], v: usize) -> usize {
    let g = p.graph();
    let mut size = acc.len().saturating_mul(2);
    for &(nb, k) in g.neighbors(v) {
        let d = p.bond_dim(k);
        if absorbed[nb] {
            size /= d;
        } else {
            size = size.saturating_mul(d);
        }
    }
    size
}

/// `(⟨ψ|Z|ψ⟩/⟨ψ|ψ⟩, ⟨ψ|ψ⟩)` through the dense amplitude vector.
pub fn contract_exact(p: &Peps, site: Site) -> Result<(f64, f64)> {
    if p.graph().vertex_index(site).is_none() {
        return Err(ExtractionError::UnknownSite(site));
    }
    let sv = peps_to_statevector(p, DEFAULT_MAX_ELEMENTS)?;
    let norm = sv.norm().powi(2);
    if norm <= 0.0 {
        return Err(ExtractionError::NonPositiveNorm(norm));
    }
    Ok((sv.expectation_z(site)?, norm))
}

/// Direction in which the boundary MPS is swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Absorb one lattice column at a time; the boundary runs along a column.
    Columns,
    /// Absorb one lattice row at a time; the boundary runs along a row.
    Rows,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BmpsConfig {
    pub chi: usize,
    /// `None` sweeps along the longer side of the bounding rectangle.
    pub sweep_axis: Option<SweepAxis>,
    pub truncation_cutoff: f64,
    pub max_elements: usize,
}

impl BmpsConfig {
    pub fn new(chi: usize) -> Self {
        Self { chi, sweep_axis: None, truncation_cutoff: 0.0, max_elements: DEFAULT_MAX_ELEMENTS }
    }

    /// No χ truncation: the boundary keeps every nonzero singular value.
    pub fn untruncated() -> Self {
        Self::new(usize::MAX)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BmpsResult {
    pub expectation: f64,
    pub norm: f64,
    /// Relative discarded weight summed over every boundary truncation.
    pub accumulated_truncation: f64,
}

/// Double-layer view of the PEPS on its bounding rectangle, indexed by
/// (sweep position `x`, boundary position `y`). Every cell tensor carries
/// indices `p`, `xl`, `xr`, `yl`, `yh`; holes and missing bonds have
/// dimension 1.
struct Lattice {
    width: usize,
    height: usize,
    cells: Vec<DenseTensor>,
    vertex: Vec<Option<usize>>,
}

impl Lattice {
    fn new(p: &Peps, axis: SweepAxis) -> Result<Self> {
        let g = p.graph();
        let vs = g.vertices();
        let r0 = vs.iter().map(|s| s.row()).min().unwrap_or(0);
        let r1 = vs.iter().map(|s| s.row()).max().unwrap_or(0);
        let c0 = vs.iter().map(|s| s.col()).min().unwrap_or(0);
        let c1 = vs.iter().map(|s| s.col()).max().unwrap_or(0);
        let (rows, cols) = ((r1 - r0 + 1) as usize, (c1 - c0 + 1) as usize);
        let (width, height) = match axis {
            SweepAxis::Columns => (cols, rows),
            SweepAxis::Rows => (rows, cols),
        };
        let site_at = |x: i32, y: i32| match axis {
            SweepAxis::Columns => Site(r0 + y, c0 + x),
            SweepAxis::Rows => Site(r0 + x, c0 + y),
        };
        let mut cells = Vec::with_capacity(width * height);
        let mut vertex = Vec::with_capacity(width * height);
        for x in 0..width as i32 {
            for y in 0..height as i32 {
                let s = site_at(x, y);
                match g.vertex_index(s) {
                    None => {
                        let idx = ["p", "xl", "xr", "yl", "yh"].iter().map(|n| IndexLabel::new(*n, 1)).collect();
                        cells.push(DenseTensor::new(idx, vec![C64::new(1.0, 0.0)])?);
                        vertex.push(None);
                    }
                    Some(v) => {
                        let mut t = p.tensor(v).clone().relabeled(&phys_label(v), "p")?;
                        let roles = [("xl", site_at(x - 1, y)), ("xr", site_at(x + 1, y)), ("yl", site_at(x, y - 1)), ("yh", site_at(x, y + 1))];
                        for (role, nb) in roles {
                            let edge = g.vertex_index(nb).and_then(|u| g.edge_between(v, u));
                            match edge {
                                Some(k) => t.relabel(&edge_label(k), role)?,
                                None => {
                                    let mut idx = t.indices().to_vec();
                                    idx.push(IndexLabel::new(role, 1));
                                    t = DenseTensor::new(idx, t.into_data())?;
                                }
                            }
                        }
                        cells.push(t.permute_names(&["p", "xl", "xr", "yl", "yh"])?);
                        vertex.push(Some(v));
                    }
                }
            }
        }
        Ok(Self { width, height, cells, vertex })
    }

    fn cell(&self, x: usize, y: usize) -> &DenseTensor {
        &self.cells[x * self.height + y]
    }

    fn position_of(&self, v: usize) -> Option<(usize, usize)> {
        let i = self.vertex.iter().position(|&u| u == Some(v))?;
        Some((i / self.height, i % self.height))
    }

    /// Ket and bra copies of a cell with the given physical operator on the
    /// ket; the bra's indices are primed.
    fn layers(&self, x: usize, y: usize, op: Option<&[C64]>) -> Result<(DenseTensor, DenseTensor)> {
        let t = self.cell(x, y);
        let mut ket = t.clone();
        if let Some(m) = op {
            let g = DenseTensor::new(vec![IndexLabel::new("__o", 2), IndexLabel::new("p", 2)], m.to_vec())?;
            ket = contract_names(&g, &ket, &["p"])?.relabeled("__o", "p")?;
        }
        let mut bra = t.conj();
        for n in ["xl", "xr", "yl", "yh"] {
            bra.relabel(n, &format!("{n}'"))?;
        }
        Ok((ket, bra))
    }

    /// Product over the cells of one column of the squared dimension of
    /// the bond leaving it on side `side` ("xl" or "xr").
    fn out_dims(&self, x: usize, side: &str) -> Vec<usize> {
        (0..self.height).map(|y| self.cell(x, y).dim_of(side).unwrap_or(1).pow(2)).collect()
    }
}

/// Boundary MPS along `y`; tensor `y` carries `u`, `d`, `k`, `b`.
struct Boundary {
    tensors: Vec<DenseTensor>,
    log_scale: f64,
}

impl Boundary {
    fn trivial(height: usize) -> Self {
        let idx = || ["u", "d", "k", "b"].iter().map(|n| IndexLabel::new(*n, 1)).collect();
        let tensors = (0..height).map(|_| DenseTensor::new(idx(), vec![C64::new(1.0, 0.0)]).expect("unit tensor")).collect();
        Self { tensors, log_scale: 0.0 }
    }

    /// QR sweep from the bottom so every tensor below the top is a right
    /// isometry.
    fn right_canonicalize(&mut self) -> Result<()> {
        for y in (1..self.tensors.len()).rev() {
            let (q, r) = qr_split(&self.tensors[y], &["d", "k", "b"], "__n")?;
            let q = q.relabeled("__n", "u")?.permute_names(&["u", "d", "k", "b"])?;
            let prev = self.tensors[y - 1].clone().relabeled("d", "__d")?;
            let r = r.relabeled("u", "__d")?.relabeled("__n", "d")?;
            let next = contract_names(&prev, &r, &["__d"])?;
            self.tensors[y] = q;
            self.tensors[y - 1] = next.permute_names(&["u", "d", "k", "b"])?;
        }
        Ok(())
    }

    /// Absorbs column `x` (entering through `inn`, leaving through `out`)
    /// by a top-to-bottom zip-up, truncating each new bond to `chi`.
    fn absorb_column(&mut self, lat: &Lattice, x: usize, inn: &str, out: &str, cfg: &BmpsConfig) -> Result<f64> {
        self.right_canonicalize()?;
        let (inn_b, out_b) = (format!("{inn}'"), format!("{out}'"));
        let h = lat.height;
        let unit = ["nu", "cu", "ky", "by"].iter().map(|n| IndexLabel::new(*n, 1)).collect();
        let mut carry = DenseTensor::new(unit, vec![C64::new(1.0, 0.0)])?;
        let mut discarded = 0.0;
        let mut fresh = Vec::with_capacity(h);
        for y in 0..h {
            let (ket, bra) = lat.layers(x, y, None)?;
            let b = self.tensors[y].clone().relabeled("u", "cu")?;
            let t = contract_names(&carry, &b, &["cu"])?;
            let ket = ket.relabeled("yl", "ky")?.relabeled(inn, "k")?;
            let t = contract_names(&t, &ket, &["ky", "k"])?;
            let bra = bra.relabeled("yl'", "by")?.relabeled(&inn_b, "b")?;
            let t = contract_names(&t, &bra, &["by", "b", "p"])?;
            guard(t.len(), cfg.max_elements)?;
            if y + 1 == h {
                let t = t.permute_names(&["nu", "d", out, &out_b, "yh", "yh'"])?;
                let dims = t.dims();
                let idx = vec![IndexLabel::new("u", dims[0]), IndexLabel::new("k", dims[2]), IndexLabel::new("b", dims[3]), IndexLabel::new("d", 1)];
                let t = DenseTensor::new(idx, t.into_data())?.permute_names(&["u", "d", "k", "b"])?;
                fresh.push(t);
            } else {
                let svd = svd_truncate(&t, &["nu", out, &out_b], cfg.chi, cfg.truncation_cutoff, "__n")?;
                let kept: f64 = svd.singular_values.iter().map(|s| s * s).sum();
                if kept + svd.discarded_weight > 0.0 {
                    discarded += svd.discarded_weight / (kept + svd.discarded_weight);
                }
                carry = svd.weighted_right().relabeled("d", "cu")?.relabeled("__n", "nu")?.relabeled("yh", "ky")?.relabeled("yh'", "by")?;
                let left = svd.left.relabeled("nu", "u")?.relabeled(out, "k")?.relabeled(&out_b, "b")?.relabeled("__n", "d")?;
                fresh.push(left.permute_names(&["u", "d", "k", "b"])?);
            }
        }
        self.tensors = fresh;
        let last = self.tensors.last_mut().expect("nonempty boundary");
        let n = last.frobenius_norm();
        if n > 0.0 {
            last.scale(C64::new(1.0 / n, 0.0));
            self.log_scale += n.ln();
        }
        Ok(discarded)
    }

    /// Contraction of a fully absorbed boundary (all legs of dimension 1).
    fn close(&self) -> Result<C64> {
        let mut acc = DenseTensor::new(vec![IndexLabel::new("d", 1)], vec![C64::new(1.0, 0.0)])?;
        for t in &self.tensors {
            let t = t.permute_names(&["u", "d", "k", "b"])?;
            let dims = t.dims();
            let t = DenseTensor::new(vec![IndexLabel::new("d", dims[0]), IndexLabel::new("__d", dims[1] * dims[2] * dims[3])], t.into_data())?;
            acc = contract_names(&acc, &t, &["d"])?.relabeled("__d", "d")?;
        }
        Ok(acc.data().iter().sum())
    }
}

fn guard(n: usize, max: usize) -> Result<()> {
    if n > max {
        Err(ExtractionError::SizeGuard { got: n, max })
    } else {
        Ok(())
    }
}

/// Contracts column `x` between a left and a right boundary exactly, with
/// an optional operator at row `op_row`.
fn meet(lat: &Lattice, left: &Boundary, right: &Boundary, x: usize, op: Option<(usize, &[C64])>, max_elements: usize) -> Result<C64> {
    let unit = ["lu", "ky", "by", "ru"].iter().map(|n| IndexLabel::new(*n, 1)).collect();
    let mut env = DenseTensor::new(unit, vec![C64::new(1.0, 0.0)])?;
    for y in 0..lat.height {
        let o = op.and_then(|(r, m)| if r == y { Some(m) } else { None });
        let (ket, bra) = lat.layers(x, y, o)?;
        let l = left.tensors[y].clone().relabeled("u", "lu")?.relabeled("k", "xl")?.relabeled("b", "xl'")?.relabeled("d", "__ld")?;
        let r = right.tensors[y].clone().relabeled("u", "ru")?.relabeled("k", "xr")?.relabeled("b", "xr'")?.relabeled("d", "__rd")?;
        let t = contract_names(&env, &l, &["lu"])?;
        let ket = ket.relabeled("yl", "ky")?;
        let t = contract_names(&t, &ket, &["ky", "xl"])?;
        let bra = bra.relabeled("yl'", "by")?;
        let t = contract_names(&t, &bra, &["by", "xl'", "p"])?;
        guard(t.len(), max_elements)?;
        let t = contract_names(&t, &r, &["ru", "xr", "xr'"])?;
        env = t.relabeled("__ld", "lu")?.relabeled("yh", "ky")?.relabeled("yh'", "by")?.relabeled("__rd", "ru")?;
    }
    Ok(env.data().iter().sum())
}

fn choose_axis(p: &Peps, cfg: &BmpsConfig) -> SweepAxis {
    if let Some(a) = cfg.sweep_axis {
        return a;
    }
    let vs = p.graph().vertices();
    let span = |f: fn(&Site) -> i32| vs.iter().map(f).max().unwrap_or(0) - vs.iter().map(f).min().unwrap_or(0);
    if span(|s| s.col()) >= span(|s| s.row()) {
        SweepAxis::Columns
    } else {
        SweepAxis::Rows
    }
}

/// Boundary-MPS estimate of `⟨ψ|Z|ψ⟩/⟨ψ|ψ⟩`. The expectation comes from a
/// left and a right boundary meeting at the observable's column; the norm
/// from a single left-to-right sweep.
pub fn contract_bmps(p: &Peps, site: Site, cfg: &BmpsConfig) -> Result<BmpsResult> {
    if cfg.chi == 0 {
        return Err(ExtractionError::InvalidChi);
    }
    let v = p.graph().vertex_index(site).ok_or(ExtractionError::UnknownSite(site))?;
    let lat = Lattice::new(p, choose_axis(p, cfg))?;
    let (xm, ym) = lat.position_of(v).expect("vertex in lattice");
    let mut trunc = 0.0;

    let mut left = Boundary::trivial(lat.height);
    for x in 0..xm {
        trunc += left.absorb_column(&lat, x, "xl", "xr", cfg)?;
    }
    let mut right = Boundary::trivial(lat.height);
    for x in (xm + 1..lat.width).rev() {
        trunc += right.absorb_column(&lat, x, "xr", "xl", cfg)?;
    }
    let num = meet(&lat, &left, &right, xm, Some((ym, &PAULI_Z)), cfg.max_elements)?;
    let den = meet(&lat, &left, &right, xm, None, cfg.max_elements)?;

    for x in xm..lat.width {
        trunc += left.absorb_column(&lat, x, "xl", "xr", cfg)?;
    }
    let norm = (left.close()?.re.ln() + left.log_scale).exp();
    Ok(BmpsResult { expectation: (num / den).re, norm, accumulated_truncation: trunc })
}

/// Double-layer contraction without χ truncation (column-major boundary
/// absorption), for cross-checking [`contract_exact`].
pub fn contract_exact_double_layer(p: &Peps, site: Site) -> Result<(f64, f64)> {
    let r = contract_bmps(p, site, &BmpsConfig { chi: usize::MAX, sweep_axis: Some(SweepAxis::Columns), truncation_cutoff: 0.0, max_elements: DEFAULT_MAX_ELEMENTS })?;
    Ok((r.expectation, r.norm))
}

/// Upper bound on the boundary bond dimension needed for an exact
/// contraction: over every column and cut, the smaller of the products of
/// squared outgoing bond dimensions on the two sides of the cut.
pub fn full_cut_chi(p: &Peps, axis: Option<SweepAxis>) -> Result<usize> {
    let cfg = BmpsConfig { sweep_axis: axis, ..BmpsConfig::new(1) };
    let lat = Lattice::new(p, choose_axis(p, &cfg))?;
    let mut best = 1usize;
    for x in 0..lat.width {
        for side in ["xl", "xr"] {
            let d = lat.out_dims(x, side);
            for cut in 1..lat.height {
                let a: usize = d[..cut].iter().fold(1usize, |acc, &v| acc.saturating_mul(v));
                let b: usize = d[cut..].iter().fold(1usize, |acc, &v| acc.saturating_mul(v));
                best = best.max(a.min(b));
            }
        }
    }
    Ok(best)
}
