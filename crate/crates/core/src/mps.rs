//! Matrix-product-state evolution of line circuits with canonical-form
//! SVD truncation.
//!
//! Site `i` holds a tensor with indices `b{i}`, `p{i}`, `b{i+1}`; the outer
//! bonds `b0` and `b{N}` have dimension 1.

use thiserror::Error;

use crate::circuits::{Gate, OtocCircuit, Site};
use crate::statevector::{StateError, StateVector};
use crate::tensor::{contract_names, qr_split, svd_truncate, DenseTensor, IndexLabel, TensorError, C64};

/// Largest qubit count accepted by [`Mps::to_statevector`].
pub const MAX_DENSE_QUBITS: usize = 24;

#[derive(Debug, Error)]
pub enum MpsError {
    #[error("circuit geometry is not a line")]
    NotLine,
    #[error("gate on {0} and {1} is not between neighbouring chain sites")]
    NonAdjacent(Site, Site),
    #[error("site {0} is not part of the chain")]
    InactiveQubit(Site),
    #[error("{got} qubits exceed the dense conversion limit of {max}")]
    TooLarge { got: usize, max: usize },
    #[error("malformed site tensor at position {0}")]
    Malformed(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    State(#[from] StateError),
}

pub type Result<T> = std::result::Result<T, MpsError>;

fn bond(i: usize) -> String {
    format!("b{i}")
}

fn phys(i: usize) -> String {
    format!("p{i}")
}

#[derive(Clone, Debug)]
pub struct Mps {
    sites: Vec<Site>,
    tensors: Vec<DenseTensor>,
    ortho_center: Option<usize>,
}

/// Result of applying one two-qubit gate.
#[derive(Clone, Debug)]
pub struct GateOutcome {
    pub bond: usize,
    pub old_dim: usize,
    pub new_dim: usize,
    /// Kept singular values, normalized to unit 2-norm.
    pub singular_values: Vec<f64>,
    /// Discarded squared weight relative to the normalized state.
    pub discarded_weight: f64,
}

#[derive(Clone, Debug, Default)]
pub struct MpsDiagnostics {
    pub total_discarded_weight: f64,
    pub max_bond_dim: usize,
    /// Largest ratio new/old of an updated bond over all two-qubit gates.
    pub max_growth_factor: f64,
    pub two_qubit_gates: usize,
    /// Largest dimension each internal bond reached.
    pub bond_dim_peaks: Vec<usize>,
    /// Two-qubit gates applied on each internal bond.
    pub gates_per_bond: Vec<usize>,
    /// Gate applications after which a bond exceeded `2^(gates so far on it)`.
    pub gate_bound_violations: usize,
}

impl Mps {
    /// `|0…0⟩` on the given chain (sites in chain order).
    pub fn product_zero(sites: Vec<Site>) -> Self {
        let tensors = (0..sites.len())
            .map(|i| {
                DenseTensor::from_fn(vec![IndexLabel::new(bond(i), 1), IndexLabel::new(phys(i), 2), IndexLabel::new(bond(i + 1), 1)], |ix| {
                    if ix[1] == 0 {
                        C64::new(1.0, 0.0)
                    } else {
                        C64::new(0.0, 0.0)
                    }
                })
                .expect("valid product tensor")
            })
            .collect();
        Self { sites, tensors, ortho_center: Some(0) }
    }

    /// Wraps site tensors (any index order, labelled `b{i}`, `p{i}`, `b{i+1}`).
    /// No gauge is assumed.
    pub fn from_tensors(sites: Vec<Site>, tensors: Vec<DenseTensor>) -> Result<Self> {
        if sites.len() != tensors.len() {
            return Err(MpsError::Malformed(tensors.len()));
        }
        let n = sites.len();
        let mut ordered = Vec::with_capacity(n);
        for (i, t) in tensors.into_iter().enumerate() {
            let (l, p, r) = (bond(i), phys(i), bond(i + 1));
            if t.rank() != 3 || t.dim_of(&p) != Some(2) {
                return Err(MpsError::Malformed(i));
            }
            let t = t.permute_names(&[&l, &p, &r]).map_err(|_| MpsError::Malformed(i))?;
            ordered.push(t);
        }
        for i in 0..n {
            let d_left = ordered[i].dims()[0];
            let expected = if i == 0 { 1 } else { ordered[i - 1].dims()[2] };
            if d_left != expected {
                return Err(MpsError::Malformed(i));
            }
        }
        if n > 0 && ordered[n - 1].dims()[2] != 1 {
            return Err(MpsError::Malformed(n - 1));
        }
        Ok(Self { sites, tensors: ordered, ortho_center: None })
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    pub fn ortho_center(&self) -> Option<usize> {
        self.ortho_center
    }

    /// Dimensions of the `N-1` internal bonds.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors.iter().take(self.tensors.len().saturating_sub(1)).map(|t| t.dims()[2]).collect()
    }

    pub fn index_of(&self, s: Site) -> Option<usize> {
        self.sites.iter().position(|&x| x == s)
    }

    fn shift_right(&mut self, i: usize) -> Result<()> {
        let (l, p, r) = (bond(i), phys(i), bond(i + 1));
        let (q, rr) = qr_split(&self.tensors[i], &[&l, &p], "tmp")?;
        let next = contract_names(&rr, &self.tensors[i + 1], &[&r])?.relabeled("tmp", &r)?;
        self.tensors[i] = q.relabeled("tmp", &r)?;
        self.tensors[i + 1] = next;
        Ok(())
    }

    fn shift_left(&mut self, i: usize) -> Result<()> {
        let (l, p, r) = (bond(i), phys(i), bond(i + 1));
        let (q, rr) = qr_split(&self.tensors[i], &[&p, &r], "tmp")?;
        let prev = contract_names(&self.tensors[i - 1], &rr, &[&l])?.relabeled("tmp", &l)?;
        self.tensors[i] = q.relabeled("tmp", &l)?.permute_names(&[&l, &p, &r])?;
        self.tensors[i - 1] = prev;
        Ok(())
    }

    /// Brings the state to mixed-canonical form centred on `target`.
    pub fn move_center(&mut self, target: usize) -> Result<()> {
        let n = self.num_sites();
        match self.ortho_center {
            Some(c) => {
                for i in c..target {
                    self.shift_right(i)?;
                }
                for i in (target + 1..=c).rev() {
                    self.shift_left(i)?;
                }
            }
            None => {
                for i in 0..target {
                    self.shift_right(i)?;
                }
                for i in (target + 1..n).rev() {
                    self.shift_left(i)?;
                }
            }
        }
        self.ortho_center = Some(target);
        Ok(())
    }

    /// Applies a 2×2 matrix (row-major) to site `i`.
    pub fn apply_one(&mut self, i: usize, m: &[C64]) -> Result<()> {
        let p = phys(i);
        let g = DenseTensor::new(vec![IndexLabel::new("out", 2), IndexLabel::new(p.clone(), 2)], m.to_vec())?;
        let t = contract_names(&g, &self.tensors[i], &[&p])?.relabeled("out", &p)?;
        self.tensors[i] = t.permute_names(&[&bond(i), &p, &bond(i + 1)])?;
        Ok(())
    }

    /// Applies a 4×4 matrix (row-major, basis `|s_i s_{i+1}⟩`) to sites
    /// `i`, `i+1`, truncating the shared bond to `max_d` and discarding
    /// singular values at or below `cutoff`. The state is renormalized.
    pub fn apply_two(&mut self, i: usize, m: &[C64], max_d: usize, cutoff: f64) -> Result<GateOutcome> {
        self.move_center(i)?;
        let (l, pa, mid, pb, r) = (bond(i), phys(i), bond(i + 1), phys(i + 1), bond(i + 2));
        let old_dim = self.tensors[i].dims()[2];
        let blob = contract_names(&self.tensors[i], &self.tensors[i + 1], &[&mid])?;
        let g = DenseTensor::new(
            vec![IndexLabel::new("oa", 2), IndexLabel::new("ob", 2), IndexLabel::new(pa.clone(), 2), IndexLabel::new(pb.clone(), 2)],
            m.to_vec(),
        )?;
        let theta = contract_names(&g, &blob, &[&pa, &pb])?.relabeled("oa", &pa)?.relabeled("ob", &pb)?;
        let svd = svd_truncate(&theta, &[&l, &pa], max_d, cutoff, &mid)?;
        let total: f64 = svd.singular_values.iter().map(|s| s * s).sum::<f64>() + svd.discarded_weight;
        let kept: f64 = svd.singular_values.iter().map(|s| s * s).sum();
        let scale = if kept > 0.0 { 1.0 / kept.sqrt() } else { 1.0 };
        let mut out = svd.clone();
        for s in &mut out.singular_values {
            *s *= scale;
        }
        let right = out.weighted_right().permute_names(&[&mid, &pb, &r])?;
        self.tensors[i] = out.left.permute_names(&[&l, &pa, &mid])?;
        self.tensors[i + 1] = right;
        self.ortho_center = Some(i + 1);
        let discarded_weight = if total > 0.0 { svd.discarded_weight / total } else { 0.0 };
        let new_dim = out.singular_values.len();
        Ok(GateOutcome { bond: i, old_dim, new_dim, singular_values: out.singular_values, discarded_weight })
    }

    /// Applies a circuit gate. Two-qubit gates must act on neighbouring
    /// chain sites.
    pub fn apply_gate(&mut self, g: &Gate, max_d: usize, cutoff: f64) -> Result<Option<GateOutcome>> {
        let idx = g.sites.iter().map(|&s| self.index_of(s).ok_or(MpsError::InactiveQubit(s))).collect::<Result<Vec<_>>>()?;
        let m = g.kind.matrix();
        if idx.len() == 1 {
            self.apply_one(idx[0], &m)?;
            return Ok(None);
        }
        let (a, b) = (idx[0], idx[1]);
        if a.abs_diff(b) != 1 || !g.sites[0].is_adjacent(g.sites[1]) {
            return Err(MpsError::NonAdjacent(g.sites[0], g.sites[1]));
        }
        let m = if a < b { m } else { swap_qubit_order(&m) };
        self.apply_two(a.min(b), &m, max_d, cutoff).map(Some)
    }

    /// `⟨Z⟩` at `site`, normalized by the state norm.
    pub fn expectation_z(&self, site: Site) -> Result<f64> {
        let k = self.index_of(site).ok_or(MpsError::InactiveQubit(site))?;
        let z = [C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(-1.0, 0.0)];
        let num = self.sandwich(Some((k, &z)))?;
        let den = self.sandwich(None)?;
        Ok(num.re / den.re)
    }

    /// `⟨ψ|ψ⟩`.
    pub fn norm_sqr(&self) -> Result<f64> {
        Ok(self.sandwich(None)?.re)
    }

    fn sandwich(&self, op: Option<(usize, &[C64])>) -> Result<C64> {
        let mut env = DenseTensor::from_fn(vec![IndexLabel::new("b0", 1), IndexLabel::new("k0", 1)], |_| C64::new(1.0, 0.0))?;
        for (i, t) in self.tensors.iter().enumerate() {
            let (l, p, r) = (bond(i), phys(i), bond(i + 1));
            let (kl, kr) = (format!("k{i}"), format!("k{}", i + 1));
            let mut ket = t.clone();
            if let Some((k, m)) = op {
                if k == i {
                    let g = DenseTensor::new(vec![IndexLabel::new("out", 2), IndexLabel::new(p.clone(), 2)], m.to_vec())?;
                    ket = contract_names(&g, &ket, &[&p])?.relabeled("out", &p)?;
                }
            }
            let bra = t.conj().relabeled(&l, &kl)?.relabeled(&r, &kr)?;
            let e = contract_names(&env, &ket, &[&l])?;
            env = contract_names(&e, &bra, &[&kl, &p])?;
        }
        Ok(env.scalar_value())
    }

    /// Dense amplitudes in chain order (`N ≤ 24`).
    pub fn to_statevector(&self) -> Result<StateVector> {
        let n = self.num_sites();
        if n > MAX_DENSE_QUBITS {
            return Err(MpsError::TooLarge { got: n, max: MAX_DENSE_QUBITS });
        }
        let mut acc = self.tensors[0].clone();
        for i in 1..n {
            acc = contract_names(&acc, &self.tensors[i], &[&bond(i)])?;
        }
        StateVector::from_amplitudes(self.sites.clone(), acc.into_data()).map_err(MpsError::from)
    }

    /// Left-isometry error of site `i` (`‖A†A − 1‖_max` over the right bond).
    pub fn left_isometry_error(&self, i: usize) -> Result<f64> {
        let t = &self.tensors[i];
        let (l, p, r) = (bond(i), phys(i), bond(i + 1));
        let c = t.conj().relabeled(&r, "r2")?;
        let g = contract_names(t, &c, &[&l, &p])?;
        let id = DenseTensor::identity(&r, "r2", t.dim_of(&r).unwrap_or(1))?;
        Ok(g.max_abs_diff(&id)?)
    }

    /// Right-isometry error of site `i` (`‖BB† − 1‖_max` over the left bond).
    pub fn right_isometry_error(&self, i: usize) -> Result<f64> {
        let t = &self.tensors[i];
        let (l, p, r) = (bond(i), phys(i), bond(i + 1));
        let c = t.conj().relabeled(&l, "l2")?;
        let g = contract_names(t, &c, &[&p, &r])?;
        let id = DenseTensor::identity(&l, "l2", t.dim_of(&l).unwrap_or(1))?;
        Ok(g.max_abs_diff(&id)?)
    }
}

/// Re-expresses a 4×4 matrix in the basis with the two qubits exchanged.
pub fn swap_qubit_order(m: &[C64]) -> Vec<C64> {
    let sw = |k: usize| ((k & 1) << 1) | (k >> 1);
    let mut out = vec![C64::new(0.0, 0.0); 16];
    for r in 0..4 {
        for c in 0..4 {
            out[4 * sw(r) + sw(c)] = m[4 * r + c];
        }
    }
    out
}

/// Evolves `|0…0⟩` through the circuit with bond dimension capped at
/// `max_d` and singular values at or below `cutoff` discarded.
pub fn evolve_mps(c: &OtocCircuit, max_d: usize, cutoff: f64) -> Result<(Mps, MpsDiagnostics)> {
    if !c.geometry.is_line() {
        return Err(MpsError::NotLine);
    }
    let mut sites = c.active_qubits.clone();
    sites.sort_by_key(|s| s.col());
    let n = sites.len();
    let mut mps = Mps::product_zero(sites);
    let nb = n.saturating_sub(1);
    let mut diag = MpsDiagnostics { max_bond_dim: 1, max_growth_factor: 1.0, bond_dim_peaks: vec![1; nb], gates_per_bond: vec![0; nb], ..Default::default() };
    for g in &c.gates {
        if let Some(o) = mps.apply_gate(g, max_d, cutoff)? {
            diag.two_qubit_gates += 1;
            diag.total_discarded_weight += o.discarded_weight;
            diag.max_bond_dim = diag.max_bond_dim.max(o.new_dim);
            diag.max_growth_factor = diag.max_growth_factor.max(o.new_dim as f64 / o.old_dim as f64);
            diag.gates_per_bond[o.bond] += 1;
            diag.bond_dim_peaks[o.bond] = diag.bond_dim_peaks[o.bond].max(o.new_dim);
            let cnt = diag.gates_per_bond[o.bond];
            if cnt < usize::BITS as usize && o.new_dim > (1usize << cnt) {
                diag.gate_bound_violations += 1;
            }
        }
    }
    Ok((mps, diag))
}

/// `⟨Z_m⟩` of the MPS-evolved circuit state.
pub fn otoc_mps(c: &OtocCircuit, max_d: usize, cutoff: f64) -> Result<(f64, MpsDiagnostics)> {
    let (mps, diag) = evolve_mps(c, max_d, cutoff)?;
    Ok((mps.expectation_z(c.m_site)?, diag))
}
