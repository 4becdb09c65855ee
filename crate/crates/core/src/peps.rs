//! PEPS evolution on the pruned qubit graph with truncations in the gauge
//! fixed by belief-propagation (BP) messages, plus untruncated evolution,
//! final-only truncation and the exact operator-SVD construction.
//!
//! Edge `k` carries the bond index `e{k}` on both endpoint tensors; vertex
//! `v` carries the physical index `p{v}`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::{Gate, OtocCircuit, Site};
use crate::mps::swap_qubit_order;
use crate::tensor::{contract_names, psd_sqrt_pair, qr_split, svd_truncate, DenseTensor, IndexLabel, TensorError, C64, DEFAULT_SV_CUTOFF};

/// Relative eigenvalue cutoff for message pseudo-inverses.
pub const MESSAGE_PINV_CUTOFF: f64 = 1e-12;
/// Bond guard for untruncated evolution.
pub const UNTRUNCATED_MAX_BOND: usize = 128;
/// Bond guard for the operator-SVD construction.
pub const EXACT_PEPS_MAX_BOND: usize = 256;

const CHECKPOINT_MAGIC: &[u8; 8] = b"OTOCPEPS";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PepsError {
    #[error("sites {0} and {1} are not lattice neighbours")]
    NotNeighbours(Site, Site),
    #[error("duplicate vertex {0}")]
    DuplicateVertex(Site),
    #[error("site {0} is not a vertex of the graph")]
    UnknownVertex(Site),
    #[error("gate on {0} and {1} does not act on a graph edge")]
    NotAnEdge(Site, Site),
    #[error("bond dimension {got} on edge {edge} exceeds the guard of {max}")]
    BondGuard { edge: usize, got: usize, max: usize },
    #[error("malformed tensor at vertex {0}")]
    Malformed(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PepsError>;

pub fn edge_label(k: usize) -> String {
    format!("e{k}")
}

pub fn phys_label(v: usize) -> String {
    format!("p{v}")
}

/// Vertices (sorted coordinates) and lattice-neighbour edges, each edge
/// stored as `(lower, higher)` vertex index and sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QubitGraph {
    vertices: Vec<Site>,
    edges: Vec<(usize, usize)>,
    #[serde(skip)]
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl QubitGraph {
    /// Subgraph of the square lattice induced by `sites`.
    pub fn induced(sites: &[Site]) -> Result<Self> {
        let mut vertices = sites.to_vec();
        vertices.sort();
        let mut pairs = Vec::new();
        for (i, &a) in vertices.iter().enumerate() {
            for &b in &vertices[i + 1..] {
                if a.is_adjacent(b) {
                    pairs.push((a, b));
                }
            }
        }
        Self::from_edges(&vertices, &pairs)
    }

    /// Graph with an explicit edge subset; every edge must join lattice
    /// neighbours.
    pub fn from_edges(sites: &[Site], pairs: &[(Site, Site)]) -> Result<Self> {
        let mut vertices = sites.to_vec();
        vertices.sort();
        for w in vertices.windows(2) {
            if w[0] == w[1] {
                return Err(PepsError::DuplicateVertex(w[0]));
            }
        }
        let mut edges = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if !a.is_adjacent(b) {
                return Err(PepsError::NotNeighbours(a, b));
            }
            let ia = vertices.binary_search(&a).map_err(|_| PepsError::UnknownVertex(a))?;
            let ib = vertices.binary_search(&b).map_err(|_| PepsError::UnknownVertex(b))?;
            edges.push((ia.min(ib), ia.max(ib)));
        }
        edges.sort();
        edges.dedup();
        let mut g = Self { vertices, edges, adjacency: Vec::new() };
        g.rebuild_adjacency();
        Ok(g)
    }

    fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            adj[a].push((b, k));
            adj[b].push((a, k));
        }
        self.adjacency = adj;
    }

    pub fn vertices(&self) -> &[Site] {
        &self.vertices
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// `(neighbour, edge)` pairs of vertex `v`.
    pub fn neighbors(&self, v: usize) -> &[(usize, usize)] {
        &self.adjacency[v]
    }

    pub fn vertex_index(&self, s: Site) -> Option<usize> {
        self.vertices.binary_search(&s).ok()
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency.get(a)?.iter().find(|(n, _)| *n == b).map(|(_, k)| *k)
    }

    /// Connected components, each as a sorted vertex list.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.num_vertices();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut k = 0;
            while k < comp.len() {
                for &(nb, _) in &self.adjacency[comp[k]] {
                    if !seen[nb] {
                        seen[nb] = true;
                        comp.push(nb);
                    }
                }
                k += 1;
            }
            comp.sort();
            out.push(comp);
        }
        out
    }

    /// True when the graph has no cycles.
    pub fn is_forest(&self) -> bool {
        self.num_edges() + self.components().len() == self.num_vertices()
    }
}

#[derive(Clone, Debug)]
pub struct Peps {
    graph: QubitGraph,
    tensors: Vec<DenseTensor>,
}

/// `|0…0⟩` with all bonds of dimension 1.
pub fn init_product_peps(graph: &QubitGraph) -> Peps {
    let tensors = (0..graph.num_vertices())
        .map(|v| {
            let mut idx = vec![IndexLabel::new(phys_label(v), 2)];
            idx.extend(graph.neighbors(v).iter().map(|&(_, k)| IndexLabel::new(edge_label(k), 1)));
            DenseTensor::from_fn(idx, |ix| if ix[0] == 0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }).expect("valid product tensor")
        })
        .collect();
    Peps { graph: graph.clone(), tensors }
}

impl Peps {
    /// Wraps per-vertex tensors, checking labels and shared bond dimensions.
    pub fn from_tensors(graph: QubitGraph, tensors: Vec<DenseTensor>) -> Result<Self> {
        if tensors.len() != graph.num_vertices() {
            return Err(PepsError::Malformed(tensors.len()));
        }
        for (v, t) in tensors.iter().enumerate() {
            if t.rank() != graph.neighbors(v).len() + 1 || t.dim_of(&phys_label(v)) != Some(2) {
                return Err(PepsError::Malformed(v));
            }
            for &(nb, k) in graph.neighbors(v) {
                let d = t.dim_of(&edge_label(k)).ok_or(PepsError::Malformed(v))?;
                if tensors[nb].dim_of(&edge_label(k)) != Some(d) {
                    return Err(PepsError::Malformed(v));
                }
            }
            if !t.is_finite() {
                return Err(PepsError::Malformed(v));
            }
        }
        Ok(Self { graph, tensors })
    }

    pub fn graph(&self) -> &QubitGraph {
        &self.graph
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    pub fn tensor(&self, v: usize) -> &DenseTensor {
        &self.tensors[v]
    }

    pub fn bond_dim(&self, k: usize) -> usize {
        let (a, _) = self.graph.edges[k];
        self.tensors[a].dim_of(&edge_label(k)).unwrap_or(1)
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        (0..self.graph.num_edges()).map(|k| self.bond_dim(k)).collect()
    }

    pub fn max_bond_dim(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Applies a 2×2 matrix (row-major) to the physical index of `v`.
    pub fn apply_one(&mut self, v: usize, m: &[C64]) -> Result<()> {
        let p = phys_label(v);
        let g = DenseTensor::new(vec![IndexLabel::new("out", 2), IndexLabel::new(p.clone(), 2)], m.to_vec())?;
        self.tensors[v] = contract_names(&g, &self.tensors[v], &[&p])?.relabeled("out", &p)?;
        Ok(())
    }

    /// Multiplies the bond `e{k}` by `g` on the side of `a` and by `g⁻¹`
    /// on the side of `b` (a gauge transformation; the state is unchanged).
    pub fn insert_gauge(&mut self, k: usize, g: &Array2<C64>, g_inv: &Array2<C64>) -> Result<()> {
        let (a, b) = self.graph.edges[k];
        let e = edge_label(k);
        self.tensors[a] = absorb(&self.tensors[a], &e, &g.t().to_owned())?;
        self.tensors[b] = absorb(&self.tensors[b], &e, g_inv)?;
        Ok(())
    }

    fn vertex_of(&self, s: Site) -> Result<usize> {
        self.graph.vertex_index(s).ok_or(PepsError::UnknownVertex(s))
    }
}

/// Contracts the index `label` of `t` with the first index of `mat`; the
/// resulting index takes the name `label` again.
pub fn absorb(t: &DenseTensor, label: &str, mat: &Array2<C64>) -> Result<DenseTensor> {
    let d = t.dim_of(label).ok_or_else(|| TensorError::UnknownIndex(label.to_string()))?;
    let m = DenseTensor::from_matrix(mat, vec![IndexLabel::new(label, d)], vec![IndexLabel::new("__new", mat.ncols())])?;
    let pos = t.require(label)?;
    let out = contract_names(t, &m, &[label])?.relabeled("__new", label)?;
    let mut perm: Vec<usize> = (0..out.rank()).collect();
    let last = perm.pop().expect("rank ≥ 1");
    perm.insert(pos, last);
    Ok(out.permute(&perm)?)
}

/// Positive semi-definite message on one directed edge with its Hermitian
/// square root and the pseudo-inverse of that root.
#[derive(Clone, Debug)]
pub struct Message {
    pub matrix: Array2<C64>,
    pub sqrt: Array2<C64>,
    pub inv_sqrt: Array2<C64>,
}

impl Message {
    pub fn new(matrix: Array2<C64>) -> Result<Self> {
        let (sqrt, inv_sqrt) = psd_sqrt_pair(&matrix, MESSAGE_PINV_CUTOFF)?;
        Ok(Self { matrix, sqrt, inv_sqrt })
    }

    /// Diagonal message; the roots are computed directly.
    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let wmax = values.iter().cloned().fold(0.0, f64::max);
        let mut matrix = Array2::zeros((n, n));
        let mut sqrt = Array2::zeros((n, n));
        let mut inv_sqrt = Array2::zeros((n, n));
        for (i, &v) in values.iter().enumerate() {
            let v = v.max(0.0);
            matrix[[i, i]] = C64::new(v, 0.0);
            sqrt[[i, i]] = C64::new(v.sqrt(), 0.0);
            if wmax > 0.0 && v > MESSAGE_PINV_CUTOFF * wmax {
                inv_sqrt[[i, i]] = C64::new(1.0 / v.sqrt(), 0.0);
            }
        }
        Self { matrix, sqrt, inv_sqrt }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Smallest eigenvalue.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        let (w, _) = crate::tensor::hermitian_eigh(&self.matrix)?;
        Ok(w.iter().cloned().fold(f64::INFINITY, f64::min))
    }
}

/// Per-edge message pair: `[lower→higher, higher→lower]`.
#[derive(Clone, Debug)]
pub struct MessageSet {
    messages: Vec<[Message; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageInit {
    Identity,
    RandomPsd { seed: u64 },
}

impl MessageSet {
    /// Unit-trace identity messages matching the current bond dimensions.
    pub fn identity(p: &Peps) -> Self {
        let messages = (0..p.graph.num_edges())
            .map(|k| {
                let d = p.bond_dim(k);
                let m = Message::diagonal(&vec![1.0 / d as f64; d]);
                [m.clone(), m]
            })
            .collect();
        Self { messages }
    }

    /// Random positive-definite unit-trace messages.
    pub fn random_psd(p: &Peps, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut messages = Vec::with_capacity(p.graph.num_edges());
        for k in 0..p.graph.num_edges() {
            let d = p.bond_dim(k);
            let mut pair = Vec::with_capacity(2);
            for _ in 0..2 {
                let a = Array2::from_shape_fn((d, d), |_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
                let mut m = a.dot(&a.t().mapv(|z| z.conj()));
                for i in 0..d {
                    m[[i, i]] += C64::new(0.1, 0.0);
                }
                pair.push(Message::new(unit_trace(m))?);
            }
            let b = pair.pop().expect("two messages");
            let a = pair.pop().expect("two messages");
            messages.push([a, b]);
        }
        Ok(Self { messages })
    }

    pub fn new(p: &Peps, init: MessageInit) -> Result<Self> {
        match init {
            MessageInit::Identity => Ok(Self::identity(p)),
            MessageInit::RandomPsd { seed } => Self::random_psd(p, seed),
        }
    }

    /// Message on edge `k` flowing into vertex `v`.
    pub fn incoming(&self, g: &QubitGraph, v: usize, k: usize) -> &Message {
        let (a, _) = g.edges[k];
        if v == a {
            &self.messages[k][1]
        } else {
            &self.messages[k][0]
        }
    }

    /// Message on edge `k` leaving vertex `v`.
    pub fn outgoing(&self, g: &QubitGraph, v: usize, k: usize) -> &Message {
        let (a, _) = g.edges[k];
        if v == a {
            &self.messages[k][0]
        } else {
            &self.messages[k][1]
        }
    }

    pub fn edge(&self, k: usize) -> &[Message; 2] {
        &self.messages[k]
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    fn set_edge(&mut self, k: usize, pair: [Message; 2]) {
        self.messages[k] = pair;
    }
}

fn unit_trace(mut m: Array2<C64>) -> Array2<C64> {
    let tr: f64 = (0..m.nrows()).map(|i| m[[i, i]].re).sum();
    if tr > 0.0 {
        m.mapv_inplace(|z| z / tr);
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpConfig {
    pub max_d: usize,
    pub sv_cutoff: f64,
    pub bp_tolerance: f64,
    pub bp_max_iters: usize,
    pub message_init: MessageInit,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self { max_d: 4, sv_cutoff: DEFAULT_SV_CUTOFF, bp_tolerance: 1e-10, bp_max_iters: 100, message_init: MessageInit::Identity }
    }
}

impl BpConfig {
    pub fn with_max_d(max_d: usize) -> Self {
        Self { max_d, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_d < 1 {
            return Err(PepsError::Config("max_d must be at least 1".into()));
        }
        if !(self.sv_cutoff >= 0.0 && self.bp_tolerance > 0.0 && self.bp_max_iters > 0) {
            return Err(PepsError::Config("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one edge update.
#[derive(Clone, Debug)]
pub struct EdgeUpdate {
    pub edge: usize,
    pub old_dim: usize,
    pub new_dim: usize,
    /// Kept singular values, normalized to unit 2-norm.
    pub singular_values: Vec<f64>,
    /// Discarded squared weight relative to the environment-weighted
    /// two-site tensor.
    pub discarded_weight: f64,
}

/// Environment-absorbed tensor of `v`: every incoming message root except
/// the one on `skip` contracted into its bond.
fn with_environment(p: &Peps, msgs: &MessageSet, v: usize, skip: Option<usize>, inverse: bool) -> Result<DenseTensor> {
    let mut t = p.tensors[v].clone();
    for &(_, k) in p.graph.neighbors(v) {
        if Some(k) == skip {
            continue;
        }
        let m = msgs.incoming(&p.graph, v, k);
        t = absorb(&t, &edge_label(k), if inverse { &m.inv_sqrt } else { &m.sqrt })?;
    }
    Ok(t)
}

fn strip_environment(t: &DenseTensor, p: &Peps, msgs: &MessageSet, v: usize, skip: usize) -> Result<DenseTensor> {
    let mut t = t.clone();
    for &(_, k) in p.graph.neighbors(v) {
        if k == skip {
            continue;
        }
        t = absorb(&t, &edge_label(k), &msgs.incoming(&p.graph, v, k).inv_sqrt)?;
    }
    Ok(t)
}

/// QR of an environment-absorbed tensor into (isometry over the other
/// bonds, reduced tensor over `bond`, physical and `keep`). Returns `None`
/// for the isometry when the vertex has no other bonds.
fn reduce(t: &DenseTensor, phys: &str, keep: &str, bond: &str) -> Result<(Option<DenseTensor>, DenseTensor)> {
    let others: Vec<String> = t.indices().iter().map(|i| i.name.clone()).filter(|n| n != phys && n != keep).collect();
    if others.is_empty() {
        return Ok((None, t.clone()));
    }
    let refs: Vec<&str> = others.iter().map(|s| s.as_str()).collect();
    let (q, r) = qr_split(t, &refs, bond)?;
    Ok((Some(q), r))
}

fn scale_bond(t: &DenseTensor, label: &str, w: &[f64]) -> Result<DenseTensor> {
    let d = w.len();
    let mut m = Array2::zeros((d, d));
    for (i, &x) in w.iter().enumerate() {
        m[[i, i]] = C64::new(x, 0.0);
    }
    absorb(t, label, &m)
}

/// Applies an optional two-qubit gate (basis `|s_lower s_higher⟩`) on edge
/// `k` and truncates the edge in the gauge fixed by the current messages.
fn update_edge(p: &mut Peps, msgs: &mut MessageSet, k: usize, gate: Option<&[C64]>, max_d: usize, cutoff: f64) -> Result<EdgeUpdate> {
    let (a, b) = p.graph.edges[k];
    let e = edge_label(k);
    let (pa, pb) = (phys_label(a), phys_label(b));
    let old_dim = p.bond_dim(k);

    let ta = with_environment(p, msgs, a, Some(k), false)?;
    let tb = with_environment(p, msgs, b, Some(k), false)?;
    let (qa, ra) = reduce(&ta, &pa, &e, "__qa")?;
    let (qb, rb) = reduce(&tb, &pb, &e, "__qb")?;
    let mut theta = contract_names(&ra, &rb, &[&e])?;
    if let Some(m) = gate {
        let g = DenseTensor::new(
            vec![IndexLabel::new("__oa", 2), IndexLabel::new("__ob", 2), IndexLabel::new(pa.clone(), 2), IndexLabel::new(pb.clone(), 2)],
            m.to_vec(),
        )?;
        theta = contract_names(&g, &theta, &[&pa, &pb])?.relabeled("__oa", &pa)?.relabeled("__ob", &pb)?;
    }
    let norm = theta.frobenius_norm();
    if norm > 0.0 {
        theta.scale(C64::new(1.0 / norm, 0.0));
    }
    let mut left: Vec<&str> = Vec::new();
    if qa.is_some() {
        left.push("__qa");
    }
    left.push(&pa);
    let svd = svd_truncate(&theta, &left, max_d, cutoff, &e)?;
    let kept: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let total = kept + svd.discarded_weight;
    let lam: Vec<f64> = svd.singular_values.iter().map(|s| s / kept.sqrt()).collect();
    let root: Vec<f64> = lam.iter().map(|x| x.sqrt()).collect();

    let mut na = scale_bond(&svd.left, &e, &root)?;
    if let Some(q) = qa {
        na = contract_names(&q, &na, &["__qa"])?;
    }
    let mut nb = scale_bond(&svd.right, &e, &root)?;
    if let Some(q) = qb {
        nb = contract_names(&q, &nb, &["__qb"])?;
    }
    p.tensors[a] = strip_environment(&na, p, msgs, a, k)?;
    p.tensors[b] = strip_environment(&nb, p, msgs, b, k)?;

    let sum: f64 = lam.iter().sum();
    let diag: Vec<f64> = lam.iter().map(|x| x / sum).collect();
    let m = Message::diagonal(&diag);
    msgs.set_edge(k, [m.clone(), m]);
    let discarded_weight = if total > 0.0 { svd.discarded_weight / total } else { 0.0 };
    Ok(EdgeUpdate { edge: k, old_dim, new_dim: lam.len(), singular_values: lam, discarded_weight })
}

/// Applies a circuit gate. Single-qubit gates are contracted into the site
/// tensor; two-qubit gates go through the message-gauged truncation.
pub fn apply_gate_bp(p: &mut Peps, msgs: &mut MessageSet, g: &Gate, cfg: &BpConfig) -> Result<Option<EdgeUpdate>> {
    let m = g.kind.matrix();
    if g.sites.len() == 1 {
        let v = p.vertex_of(g.sites[0])?;
        p.apply_one(v, &m)?;
        return Ok(None);
    }
    let (va, vb) = (p.vertex_of(g.sites[0])?, p.vertex_of(g.sites[1])?);
    let k = p.graph.edge_between(va, vb).ok_or(PepsError::NotAnEdge(g.sites[0], g.sites[1]))?;
    let m = if va < vb { m } else { swap_qubit_order(&m) };
    update_edge(p, msgs, k, Some(&m), cfg.max_d, cfg.sv_cutoff).map(Some)
}

/// Truncates edge `k` to `cfg.max_d` in the current message gauge.
pub fn truncate_edge_bp(p: &mut Peps, msgs: &mut MessageSet, k: usize, cfg: &BpConfig) -> Result<EdgeUpdate> {
    update_edge(p, msgs, k, None, cfg.max_d, cfg.sv_cutoff)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BpReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Outgoing message of `v` along edge `k`, from the current incoming
/// messages on its other edges (unit trace).
fn message_update(p: &Peps, msgs: &MessageSet, v: usize, k: usize) -> Result<Array2<C64>> {
    let t = with_environment(p, msgs, v, Some(k), false)?;
    let e = edge_label(k);
    let pos = t.require(&e)?;
    let (mat, _, _) = t.matricize(&[pos])?;
    let (r, c) = mat.dim();
    crate::tensor::op_count::add((r * r * c) as u64);
    let m = mat.dot(&mat.t().mapv(|z| z.conj()));
    let m = (&m + &m.t().mapv(|z| z.conj())).mapv(|z| z * 0.5);
    Ok(unit_trace(m))
}

/// Jacobi iteration of the double-layer message equations until the largest
/// change of a unit-trace message drops below `cfg.bp_tolerance` or
/// `cfg.bp_max_iters` sweeps have run.
pub fn bp_converge(p: &Peps, msgs: &mut MessageSet, cfg: &BpConfig) -> Result<BpReport> {
    let ne = p.graph.num_edges();
    if ne == 0 {
        return Ok(BpReport { iterations: 0, residual: 0.0, converged: true });
    }
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.bp_max_iters {
        iterations += 1;
        let mut next = Vec::with_capacity(ne);
        residual = 0.0f64;
        for k in 0..ne {
            let (a, b) = p.graph.edges[k];
            let ab = message_update(p, msgs, a, k)?;
            let ba = message_update(p, msgs, b, k)?;
            let old = msgs.edge(k);
            for (new, o) in [(&ab, &old[0]), (&ba, &old[1])] {
                let d = (new - &o.matrix).mapv(|z| z.norm_sqr()).sum().sqrt();
                residual = residual.max(d);
            }
            next.push((ab, ba));
        }
        for (k, (ab, ba)) in next.into_iter().enumerate() {
            msgs.set_edge(k, [Message::new(ab)?, Message::new(ba)?]);
        }
        if residual < cfg.bp_tolerance {
            break;
        }
    }
    Ok(BpReport { iterations, residual, converged: residual < cfg.bp_tolerance })
}

/// Single-site reduced density matrix of `v` with every incoming message
/// acting as its environment (unit trace).
pub fn bp_reduced_density_matrix(p: &Peps, msgs: &MessageSet, v: usize) -> Result<Array2<C64>> {
    let t = with_environment(p, msgs, v, None, false)?;
    let pos = t.require(&phys_label(v))?;
    let (mat, _, _) = t.matricize(&[pos])?;
    Ok(unit_trace(mat.dot(&mat.t().mapv(|z| z.conj()))))
}

#[derive(Clone, Debug, Default)]
pub struct PepsDiagnostics {
    /// Discarded weight summed over each two-qubit layer, keyed by layer.
    pub layer_discarded: Vec<(u32, f64)>,
    pub total_discarded_weight: f64,
    pub bp_iterations: usize,
    pub bp_runs: usize,
    pub max_bp_residual: f64,
    pub max_bond_dim: usize,
    /// Two-qubit gates applied on each edge.
    pub gates_per_edge: Vec<usize>,
    /// Largest dimension each edge reached.
    pub edge_dim_peaks: Vec<usize>,
    /// Updates after which an edge exceeded `min(max_d, 4^(gates so far))`.
    pub bound_violations: usize,
}

impl PepsDiagnostics {
    fn new(ne: usize) -> Self {
        Self { max_bond_dim: 1, gates_per_edge: vec![0; ne], edge_dim_peaks: vec![1; ne], ..Default::default() }
    }

    fn record(&mut self, layer: u32, u: &EdgeUpdate, max_d: usize) {
        self.total_discarded_weight += u.discarded_weight;
        match self.layer_discarded.last_mut() {
            Some((l, w)) if *l == layer => *w += u.discarded_weight,
            _ => self.layer_discarded.push((layer, u.discarded_weight)),
        }
        self.max_bond_dim = self.max_bond_dim.max(u.new_dim);
        self.gates_per_edge[u.edge] += 1;
        self.edge_dim_peaks[u.edge] = self.edge_dim_peaks[u.edge].max(u.new_dim);
        let g = self.gates_per_edge[u.edge] as u32;
        let bound = 4usize.checked_pow(g).unwrap_or(usize::MAX).min(max_d);
        if u.new_dim > bound {
            self.bound_violations += 1;
        }
    }

    fn record_bp(&mut self, r: &BpReport) {
        self.bp_runs += 1;
        self.bp_iterations += r.iterations;
        self.max_bp_residual = self.max_bp_residual.max(r.residual);
    }
}

fn evolve(c: &OtocCircuit, cfg: &BpConfig, resync_every: usize, guard: Option<usize>) -> Result<(Peps, MessageSet, PepsDiagnostics)> {
    cfg.validate()?;
    if resync_every == 0 {
        return Err(PepsError::Config("resync_every must be at least 1".into()));
    }
    let graph = QubitGraph::induced(&c.active_qubits)?;
    let mut p = init_product_peps(&graph);
    let mut msgs = MessageSet::new(&p, cfg.message_init)?;
    let mut diag = PepsDiagnostics::new(graph.num_edges());
    let mut layers_done = 0usize;
    let mut pending: Option<u32> = None;
    for g in &c.gates {
        if let Some(l) = pending {
            if l != g.layer {
                pending = None;
                layers_done += 1;
                if layers_done % resync_every == 0 {
                    let r = bp_converge(&p, &mut msgs, cfg)?;
                    diag.record_bp(&r);
                }
            }
        }
        if let Some(u) = apply_gate_bp(&mut p, &mut msgs, g, cfg)? {
            if let Some(max) = guard {
                if u.new_dim > max {
                    return Err(PepsError::BondGuard { edge: u.edge, got: u.new_dim, max });
                }
            }
            diag.record(g.layer, &u, cfg.max_d);
            pending = Some(g.layer);
        }
    }
    let r = bp_converge(&p, &mut msgs, cfg)?;
    diag.record_bp(&r);
    Ok((p, msgs, diag))
}

/// Evolves `|0…0⟩` through the circuit, truncating every two-qubit gate to
/// `cfg.max_d` and re-converging the messages after every `resync_every`
/// two-qubit layers. The returned messages are converged on the final state.
pub fn evolve_peps_bp(c: &OtocCircuit, cfg: &BpConfig, resync_every: usize) -> Result<(Peps, MessageSet, PepsDiagnostics)> {
    evolve(c, cfg, resync_every, None)
}

/// Evolution with singular values above `sv_cutoff` all kept; fails once a
/// bond would exceed [`UNTRUNCATED_MAX_BOND`].
pub fn evolve_peps_untruncated(c: &OtocCircuit, sv_cutoff: f64) -> Result<(Peps, MessageSet, PepsDiagnostics)> {
    let cfg = BpConfig { max_d: usize::MAX, sv_cutoff, ..BpConfig::default() };
    evolve(c, &cfg, 1, Some(UNTRUNCATED_MAX_BOND))
}

/// Converges the messages, truncates every edge to `cfg.max_d` in the BP
/// gauge (edges in lexicographic order), then converges again. Returns the
/// total discarded weight.
pub fn final_truncate_bp(p: &mut Peps, msgs: &mut MessageSet, cfg: &BpConfig) -> Result<f64> {
    cfg.validate()?;
    bp_converge(p, msgs, cfg)?;
    let mut total = 0.0;
    for k in 0..p.graph.num_edges() {
        total += truncate_edge_bp(p, msgs, k, cfg)?.discarded_weight;
    }
    bp_converge(p, msgs, cfg)?;
    Ok(total)
}

/// PEPS built by splitting every two-qubit gate with an operator SVD and
/// fusing the new bond into the edge, with no truncation.
pub fn exact_peps_from_circuit(c: &OtocCircuit) -> Result<Peps> {
    let graph = QubitGraph::induced(&c.active_qubits)?;
    let mut p = init_product_peps(&graph);
    for g in &c.gates {
        let m = g.kind.matrix();
        if g.sites.len() == 1 {
            let v = p.vertex_of(g.sites[0])?;
            p.apply_one(v, &m)?;
            continue;
        }
        let (va, vb) = (p.vertex_of(g.sites[0])?, p.vertex_of(g.sites[1])?);
        let k = p.graph.edge_between(va, vb).ok_or(PepsError::NotAnEdge(g.sites[0], g.sites[1]))?;
        let (a, b) = p.graph.edges[k];
        let m = if va < vb { m } else { swap_qubit_order(&m) };
        let op = DenseTensor::new(
            vec![IndexLabel::new("oa", 2), IndexLabel::new("ob", 2), IndexLabel::new("ia", 2), IndexLabel::new("ib", 2)],
            m,
        )?;
        let svd = svd_truncate(&op, &["oa", "ia"], 4, DEFAULT_SV_CUTOFF, "__k")?;
        let e = edge_label(k);
        let new_dim = p.bond_dim(k) * svd.singular_values.len();
        if new_dim > EXACT_PEPS_MAX_BOND {
            return Err(PepsError::BondGuard { edge: k, got: new_dim, max: EXACT_PEPS_MAX_BOND });
        }
        for (v, factor, o, i) in [(a, svd.left.clone(), "oa", "ia"), (b, svd.weighted_right(), "ob", "ib")] {
            let ph = phys_label(v);
            let t = p.tensors[v].clone().relabeled(&ph, i)?;
            let t = contract_names(&factor, &t, &[i])?.relabeled(o, &ph)?;
            let pe = t.require(&e)?;
            let pk = t.require("__k")?;
            p.tensors[v] = t.fuse(&[pe, pk], &e)?;
        }
    }
    Ok(p)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    vertices: Vec<Site>,
    edges: Vec<(usize, usize)>,
    tensors: Vec<Vec<IndexLabel>>,
}

/// Writes a PEPS checkpoint: magic, format version, JSON metadata (graph
/// and per-tensor index labels), then little-endian complex data.
pub fn write_checkpoint(p: &Peps, w: &mut impl Write) -> Result<()> {
    let header = CheckpointHeader {
        vertices: p.graph.vertices.clone(),
        edges: p.graph.edges.clone(),
        tensors: p.tensors.iter().map(|t| t.indices().to_vec()).collect(),
    };
    let meta = serde_json::to_vec(&header).map_err(|e| PepsError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    for t in &p.tensors {
        for z in t.data() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Peps> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(PepsError::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(PepsError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut meta = vec![0u8; len];
    r.read_exact(&mut meta)?;
    let header: CheckpointHeader = serde_json::from_slice(&meta).map_err(|e| PepsError::Checkpoint(e.to_string()))?;
    let mut graph = QubitGraph { vertices: header.vertices, edges: header.edges, adjacency: Vec::new() };
    graph.rebuild_adjacency();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for idx in header.tensors {
        let n: usize = idx.iter().map(|i| i.dim).product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            let re = f64::from_le_bytes(b8);
            r.read_exact(&mut b8)?;
            data.push(C64::new(re, f64::from_le_bytes(b8)));
        }
        tensors.push(DenseTensor::new(idx, data)?);
    }
    Peps::from_tensors(graph, tensors)
}

/// Largest bond dimension allowed on each edge by the gate-count bound
/// `4^(two-qubit gates on the edge)`.
pub fn gate_count_bounds(c: &OtocCircuit, graph: &QubitGraph) -> BTreeMap<usize, usize> {
    let mut counts: BTreeMap<usize, u32> = (0..graph.num_edges()).map(|k| (k, 0)).collect();
    for g in &c.gates {
        if let Some((a, b)) = g.bond() {
            if let (Some(va), Some(vb)) = (graph.vertex_index(a), graph.vertex_index(b)) {
                if let Some(k) = graph.edge_between(va, vb) {
                    *counts.entry(k).or_insert(0) += 1;
                }
            }
        }
    }
    counts.into_iter().map(|(k, g)| (k, 4usize.checked_pow(g).unwrap_or(usize::MAX))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{build_instance, build_pruned_instance, haar_unitary_4, EnsembleSpec, GateFamily, GateKind, Geometry, OtocOrder};
    use crate::extraction::{contract_exact, peps_to_statevector};
    use crate::mps::Mps;
    use crate::statevector::{evolve_exact, fidelity, StateVector};

    fn sv(p: &Peps) -> StateVector {
        peps_to_statevector(p, 1 << 22).unwrap()
    }

    fn haar_gate(rng: &mut ChaCha8Rng, a: Site, b: Site) -> Gate {
        Gate { kind: GateKind::HaarTwoQubit { unitary: haar_unitary_4(rng) }, sites: vec![a, b], layer: 0 }
    }

    fn comb() -> QubitGraph {
        let mut s: Vec<Site> = (0..5).map(|c| Site(0, c)).collect();
        s.extend([Site(1, 0), Site(1, 2), Site(1, 4)]);
        QubitGraph::induced(&s).unwrap()
    }

    fn reduced_density_matrix(state: &StateVector, site: Site) -> Array2<C64> {
        let n = state.num_qubits();
        let axis = state.axis_of(site).unwrap();
        let bit = 1usize << (n - 1 - axis);
        let amp = state.amplitudes();
        let mut rho = Array2::<C64>::zeros((2, 2));
        for i in 0..amp.len() {
            if i & bit != 0 {
                continue;
            }
            let (a0, a1) = (amp[i], amp[i | bit]);
            rho[[0, 0]] += a0 * a0.conj();
            rho[[0, 1]] += a0 * a1.conj();
            rho[[1, 0]] += a1 * a0.conj();
            rho[[1, 1]] += a1 * a1.conj();
        }
        let tr = rho[[0, 0]].re + rho[[1, 1]].re;
        rho.mapv(|z| z / tr)
    }

    fn max_amp_diff(a: &StateVector, b: &StateVector) -> f64 {
        let na = a.norm();
        let nb = b.norm();
        let ov = a.inner(b).unwrap();
        let phase = if ov.norm() > 0.0 { ov / ov.norm() } else { C64::new(1.0, 0.0) };
        a.amplitudes().iter().zip(b.amplitudes()).map(|(x, y)| (x / na * phase - y / nb).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn induced_graph_edges_are_sorted_neighbours() {
        let g = QubitGraph::induced(&[Site(1, 1), Site(0, 0), Site(0, 1), Site(1, 0), Site(2, 2)]).unwrap();
        assert_eq!(g.vertices()[0], Site(0, 0));
        assert_eq!(g.num_edges(), 4);
        for w in g.edges().windows(2) {
            assert!(w[0] < w[1]);
        }
        for &(a, b) in g.edges() {
            assert!(g.vertices()[a].is_adjacent(g.vertices()[b]));
        }
        assert!(!g.is_forest());
        assert_eq!(g.components().len(), 2);
        assert!(comb().is_forest());
        assert!(QubitGraph::from_edges(&[Site(0, 0), Site(1, 1)], &[(Site(0, 0), Site(1, 1))]).is_err());
    }

    #[test]
    fn product_peps_is_the_zero_state() {
        let g = QubitGraph::induced(&[Site(0, 0), Site(0, 1), Site(1, 0), Site(1, 1), Site(1, 2)]).unwrap();
        let p = init_product_peps(&g);
        assert!(p.bond_dims().iter().all(|&d| d == 1));
        for &s in g.vertices() {
            let (z, norm) = contract_exact(&p, s).unwrap();
            assert!((z - 1.0).abs() < 1e-14);
            assert!((norm - 1.0).abs() < 1e-14);
        }
        let mut msgs = MessageSet::identity(&p);
        let r = bp_converge(&p, &mut msgs, &BpConfig::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert!(msgs.edge(0)[0].dim() == 1);
    }

    #[test]
    fn single_qubit_gate_needs_no_truncation() {
        let g = comb();
        let mut p = init_product_peps(&g);
        let mut msgs = MessageSet::identity(&p);
        let gate = Gate { kind: GateKind::SingleQubitRot { theta: 0.7, phi: 0.2 }, sites: vec![Site(0, 2)], layer: 0 };
        assert!(apply_gate_bp(&mut p, &mut msgs, &gate, &BpConfig::with_max_d(1)).unwrap().is_none());
        assert!(p.bond_dims().iter().all(|&d| d == 1));
    }

    #[test]
    fn disconnected_pairs_converge_in_one_sweep() {
        let g = QubitGraph::induced(&[Site(0, 0), Site(0, 1), Site(3, 3), Site(3, 4)]).unwrap();
        assert_eq!(g.components().len(), 2);
        let mut p = init_product_peps(&g);
        let mut msgs = MessageSet::identity(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BpConfig::with_max_d(4);
        for (a, b) in [(Site(0, 0), Site(0, 1)), (Site(3, 3), Site(3, 4))] {
            apply_gate_bp(&mut p, &mut msgs, &haar_gate(&mut rng, a, b), &cfg).unwrap();
        }
        let r = bp_converge(&p, &mut msgs, &cfg).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.residual < 1e-12);
    }

    #[test]
    fn tree_messages_give_exact_single_site_marginals() {
        let g = comb();
        let mut p = init_product_peps(&g);
        let mut msgs = MessageSet::identity(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = BpConfig::with_max_d(3);
        for _ in 0..25 {
            let k = rng.random_range(0..g.num_edges());
            let (a, b) = g.edges()[k];
            let gate = haar_gate(&mut rng, g.vertices()[a], g.vertices()[b]);
            apply_gate_bp(&mut p, &mut msgs, &gate, &cfg).unwrap();
        }
        let mut fresh = MessageSet::random_psd(&p, 3).unwrap();
        let r = bp_converge(&p, &mut fresh, &cfg).unwrap();
        assert!(r.converged, "residual {}", r.residual);
        let state = sv(&p);
        for v in 0..g.num_vertices() {
            let a = bp_reduced_density_matrix(&p, &fresh, v).unwrap();
            let b = reduced_density_matrix(&state, g.vertices()[v]);
            let d = (&a - &b).mapv(|z| z.norm()).fold(0.0f64, |m, &x| m.max(x));
            assert!(d < 1e-8, "vertex {v}: {d}");
        }
    }

    #[test]
    fn path_truncation_matches_canonical_mps() {
        let sites: Vec<Site> = (0..7).map(|c| Site(0, c)).collect();
        let g = QubitGraph::induced(&sites).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for max_d in [2usize, 3] {
            let mut p = init_product_peps(&g);
            let mut msgs = MessageSet::identity(&p);
            let mut mps = Mps::product_zero(sites.clone());
            let cfg = BpConfig::with_max_d(max_d);
            for _ in 0..30 {
                let k = rng.random_range(0..6usize);
                let gate = haar_gate(&mut rng, sites[k], sites[k + 1]);
                bp_converge(&p, &mut msgs, &cfg).unwrap();
                let a = apply_gate_bp(&mut p, &mut msgs, &gate, &cfg).unwrap().unwrap();
                let b = mps.apply_gate(&gate, max_d, DEFAULT_SV_CUTOFF).unwrap().unwrap();
                assert_eq!(a.singular_values.len(), b.singular_values.len());
                for (x, y) in a.singular_values.iter().zip(&b.singular_values) {
                    assert!((x - y).abs() < 1e-8, "{x} vs {y}");
                }
            }
            let f = fidelity(&sv(&p), &mps.to_statevector().unwrap()).unwrap();
            assert!((1.0 - f).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_gate_on_converged_state_changes_nothing() {
        let spec = EnsembleSpec { geometry: Geometry::Grid { rows: 3, cols: 3 }, depth: 3, m_site: Site(1, 1), b_site: Site(1, 2), family: GateFamily::default(), num_instances: 1, master_seed: 4 };
        let c = build_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        let cfg = BpConfig::with_max_d(3);
        let (mut p, mut msgs, _) = evolve_peps_bp(&c, &cfg, 1).unwrap();
        let before = sv(&p);
        let id: Vec<C64> = (0..16).map(|i| if i % 5 == 0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }).collect();
        for k in 0..p.graph().num_edges() {
            let d = p.bond_dim(k);
            bp_converge(&p, &mut msgs, &cfg).unwrap();
            let u = update_edge(&mut p, &mut msgs, k, Some(&id), d, 0.0).unwrap();
            assert_eq!(u.new_dim, d);
            assert!(u.discarded_weight < 1e-20);
        }
        assert!(max_amp_diff(&before, &sv(&p)) < 1e-10);
    }

    #[test]
    fn untruncated_evolution_matches_statevector() {
        let spec = EnsembleSpec { geometry: Geometry::Grid { rows: 10, cols: 10 }, depth: 5, m_site: Site(4, 4), b_site: Site(4, 5), family: GateFamily::default(), num_instances: 3, master_seed: 2 };
        for inst in 0..3 {
            let c = build_pruned_instance(&spec, OtocOrder::Otoc1, inst).unwrap();
            let (p, msgs, diag) = evolve_peps_untruncated(&c, DEFAULT_SV_CUTOFF).unwrap();
            let f = fidelity(&sv(&p), &evolve_exact(&c).unwrap()).unwrap();
            assert!((1.0 - f).abs() < 1e-8, "fidelity {f}");
            assert_eq!(diag.bound_violations, 0);
            let bounds = gate_count_bounds(&c, p.graph());
            for (k, d) in p.bond_dims().into_iter().enumerate() {
                assert!(d <= bounds[&k]);
            }
            for k in 0..msgs.len() {
                for m in msgs.edge(k) {
                    assert!(m.min_eigenvalue().unwrap() >= -1e-10);
                }
            }
        }
    }

    #[test]
    fn bond_dimension_one_gives_product_state() {
        let spec = EnsembleSpec { geometry: Geometry::Grid { rows: 10, cols: 10 }, depth: 5, m_site: Site(4, 4), b_site: Site(4, 5), family: GateFamily::default(), num_instances: 1, master_seed: 2 };
        let c = build_pruned_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        let (p, _, diag) = evolve_peps_bp(&c, &BpConfig::with_max_d(1), 1).unwrap();
        assert!(p.bond_dims().iter().all(|&d| d == 1));
        assert!(diag.total_discarded_weight > 0.0);
        let f = fidelity(&sv(&p), &evolve_exact(&c).unwrap()).unwrap();
        assert!(f < 1.0 - 1e-6);
    }

    #[test]
    fn final_truncation_above_current_bonds_is_identity() {
        let spec = EnsembleSpec { geometry: Geometry::Grid { rows: 10, cols: 10 }, depth: 5, m_site: Site(4, 4), b_site: Site(4, 5), family: GateFamily::default(), num_instances: 1, master_seed: 9 };
        let c = build_pruned_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        let (mut p, mut msgs, _) = evolve_peps_untruncated(&c, DEFAULT_SV_CUTOFF).unwrap();
        let before = sv(&p);
        let cfg = BpConfig::with_max_d(p.max_bond_dim());
        let w = final_truncate_bp(&mut p, &mut msgs, &cfg).unwrap();
        assert!(w < 1e-20);
        assert!(max_amp_diff(&before, &sv(&p)) < 1e-12);
        let cfg = BpConfig::with_max_d(2);
        final_truncate_bp(&mut p, &mut msgs, &cfg).unwrap();
        assert!(p.max_bond_dim() <= 2);
    }

    #[test]
    fn operator_svd_construction() {
        let g = QubitGraph::induced(&[Site(0, 0), Site(0, 1), Site(1, 0)]).unwrap();
        let spec = EnsembleSpec { geometry: Geometry::Grid { rows: 2, cols: 2 }, depth: 0, m_site: Site(0, 0), b_site: Site(0, 1), family: GateFamily::default(), num_instances: 1, master_seed: 0 };
        let mut c = build_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        c.active_qubits = g.vertices().to_vec();
        c.gates = vec![Gate { kind: GateKind::SingleQubitRot { theta: 0.4, phi: 0.1 }, sites: vec![Site(0, 1)], layer: 0 }];
        let p = exact_peps_from_circuit(&c).unwrap();
        assert!(p.bond_dims().iter().all(|&d| d == 1));
        c.gates.push(Gate { kind: GateKind::FSimLike { alpha: 1.0, cphase: 0.35 }, sites: vec![Site(0, 0), Site(0, 1)], layer: 1 });
        let p = exact_peps_from_circuit(&c).unwrap();
        assert!(p.max_bond_dim() <= 4);
        let f = fidelity(&sv(&p), &evolve_exact(&c).unwrap()).unwrap();
        assert!((1.0 - f).abs() < 1e-12);
    }

    #[test]
    fn operator_svd_matches_statevector_on_ten_qubits() {
        let spec = EnsembleSpec { geometry: Geometry::Grid { rows: 2, cols: 5 }, depth: 1, m_site: Site(0, 1), b_site: Site(1, 3), family: GateFamily::default(), num_instances: 1, master_seed: 5 };
        let c = build_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        assert_eq!(c.num_qubits(), 10);
        let p = exact_peps_from_circuit(&c).unwrap();
        let bounds = gate_count_bounds(&c, p.graph());
        for (k, d) in p.bond_dims().into_iter().enumerate() {
            assert!(d <= bounds[&k]);
        }
        let f = fidelity(&sv(&p), &evolve_exact(&c).unwrap()).unwrap();
        assert!((1.0 - f).abs() < 1e-8);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let spec = EnsembleSpec { geometry: Geometry::Grid { rows: 10, cols: 10 }, depth: 4, m_site: Site(4, 4), b_site: Site(4, 5), family: GateFamily::default(), num_instances: 1, master_seed: 1 };
        let c = build_pruned_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        let (p, _, _) = evolve_peps_bp(&c, &BpConfig::with_max_d(4), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(q.graph(), p.graph());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a, b);
        }
        buf[8] = 9;
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
