//! OTOC circuit ensembles: brickwall evolutions, butterfly and measurement
//! placement, geometric-lightcone pruning and per-bond gate counting.
//!
//! Layer numbering: time step `l` of U uses layer `2l` for its single-qubit
//! gates and `2l+1` for its two-qubit gates. With `L = 2T`, an Otoc1
//! circuit holds U on layers `[0, L)`, B on layer `L` and the mirrored U†
//! on `(L, 2L]`. Otoc2 appends M on `2L+1` and a second U, B, U† block
//! shifted by `2L+2`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::C64;

/// Qubit coordinate `(row, col)`; 1D lines use row 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site(pub i32, pub i32);

impl Site {
    pub fn row(self) -> i32 {
        self.0
    }

    pub fn col(self) -> i32 {
        self.1
    }

    pub fn is_adjacent(self, other: Site) -> bool {
        (self.0 - other.0).abs() + (self.1 - other.1).abs() == 1
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.0, self.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Line { width: usize },
    Grid { rows: usize, cols: usize },
}

impl Geometry {
    pub fn contains(&self, s: Site) -> bool {
        match *self {
            Geometry::Line { width } => s.0 == 0 && s.1 >= 0 && (s.1 as usize) < width,
            Geometry::Grid { rows, cols } => s.0 >= 0 && s.1 >= 0 && (s.0 as usize) < rows && (s.1 as usize) < cols,
        }
    }

    pub fn sites(&self) -> Vec<Site> {
        match *self {
            Geometry::Line { width } => (0..width as i32).map(|c| Site(0, c)).collect(),
            Geometry::Grid { rows, cols } => {
                let mut v = Vec::with_capacity(rows * cols);
                for r in 0..rows as i32 {
                    for c in 0..cols as i32 {
                        v.push(Site(r, c));
                    }
                }
                v
            }
        }
    }

    pub fn is_line(&self) -> bool {
        matches!(self, Geometry::Line { .. })
    }

    /// Human-readable description of the two-qubit layer cycle.
    pub fn layer_pattern(&self) -> &'static str {
        match self {
            Geometry::Line { .. } => "bonds (2k,2k+1) on even steps, (2k+1,2k+2) on odd steps",
            Geometry::Grid { .. } => {
                "4-cycle over (r+c)-even sites coupling to their right, down, left, up neighbour"
            }
        }
    }

    /// Two-qubit pairs of time step `step` (each pair ordered lexicographically).
    pub fn layer_pairs(&self, step: usize) -> Vec<(Site, Site)> {
        let mut pairs = Vec::new();
        match *self {
            Geometry::Line { width } => {
                let start = step % 2;
                let mut x = start;
                while x + 1 < width {
                    pairs.push((Site(0, x as i32), Site(0, x as i32 + 1)));
                    x += 2;
                }
            }
            Geometry::Grid { rows, cols } => {
                let phase = step % 4;
                for r in 0..rows as i32 {
                    for c in 0..cols as i32 {
                        let even = (r + c) % 2 == 0;
                        let pair = match phase {
                            0 if even => Some((Site(r, c), Site(r, c + 1))),
                            1 if even => Some((Site(r, c), Site(r + 1, c))),
                            2 if even => Some((Site(r, c - 1), Site(r, c))),
                            3 if even => Some((Site(r - 1, c), Site(r, c))),
                            _ => None,
                        };
                        if let Some((a, b)) = pair {
                            if self.contains(a) && self.contains(b) {
                                pairs.push((a, b));
                            }
                        }
                    }
                }
                pairs.sort();
            }
        }
        pairs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GateKind {
    /// `exp(iθ(cos φ X + sin φ Y))`.
    SingleQubitRot { theta: f64, phi: f64 },
    /// `exp(iα(π/4)(XX+YY))` followed by a conditional phase `diag(1,1,1,e^{-i·cphase})`.
    FSimLike { alpha: f64, cphase: f64 },
    /// Arbitrary 4×4 unitary, row-major in the basis `|s0 s1⟩`.
    HaarTwoQubit { unitary: [C64; 16] },
    PauliX,
    PauliZ,
}

impl GateKind {
    pub fn arity(&self) -> usize {
        match self {
            GateKind::FSimLike { .. } | GateKind::HaarTwoQubit { .. } => 2,
            _ => 1,
        }
    }

    pub fn adjoint(&self) -> GateKind {
        match self {
            GateKind::SingleQubitRot { theta, phi } => GateKind::SingleQubitRot { theta: -theta, phi: *phi },
            GateKind::FSimLike { alpha, cphase } => GateKind::FSimLike { alpha: -alpha, cphase: -cphase },
            GateKind::HaarTwoQubit { unitary } => {
                let mut u = [C64::new(0.0, 0.0); 16];
                for i in 0..4 {
                    for j in 0..4 {
                        u[i * 4 + j] = unitary[j * 4 + i].conj();
                    }
                }
                GateKind::HaarTwoQubit { unitary: u }
            }
            GateKind::PauliX => GateKind::PauliX,
            GateKind::PauliZ => GateKind::PauliZ,
        }
    }

    /// Row-major matrix: 2×2 for one-qubit kinds, 4×4 for two-qubit kinds
    /// (basis `|s0 s1⟩`, first site most significant).
    pub fn matrix(&self) -> Vec<C64> {
        let z = C64::new(0.0, 0.0);
        let one = C64::new(1.0, 0.0);
        let i = C64::new(0.0, 1.0);
        match *self {
            GateKind::SingleQubitRot { theta, phi } => {
                let (s, c) = theta.sin_cos();
                vec![
                    C64::new(c, 0.0),
                    i * s * Complex64::from_polar(1.0, -phi),
                    i * s * Complex64::from_polar(1.0, phi),
                    C64::new(c, 0.0),
                ]
            }
            GateKind::FSimLike { alpha, cphase } => {
                let ang = alpha * std::f64::consts::FRAC_PI_2;
                let (s, c) = ang.sin_cos();
                let c = C64::new(c, 0.0);
                let is = i * s;
                vec![
                    one, z, z, z, //
                    z, c, is, z, //
                    z, is, c, z, //
                    z, z, z, Complex64::from_polar(1.0, -cphase),
                ]
            }
            GateKind::HaarTwoQubit { unitary } => unitary.to_vec(),
            GateKind::PauliX => vec![z, one, one, z],
            GateKind::PauliZ => vec![one, z, z, -one],
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            GateKind::SingleQubitRot { .. } => "rot",
            GateKind::FSimLike { .. } => "fsim",
            GateKind::HaarTwoQubit { .. } => "haar",
            GateKind::PauliX => "x",
            GateKind::PauliZ => "z",
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            GateKind::SingleQubitRot { theta, phi } => vec![*theta, *phi],
            GateKind::FSimLike { alpha, cphase } => vec![*alpha, *cphase],
            GateKind::HaarTwoQubit { unitary } => unitary.iter().flat_map(|z| [z.re, z.im]).collect(),
            _ => Vec::new(),
        }
    }

    fn from_record(kind: &str, params: &[f64]) -> Result<GateKind, CircuitError> {
        let bad = || CircuitError::Format(format!("bad parameters for gate kind `{kind}`"));
        Ok(match kind {
            "rot" if params.len() == 2 => GateKind::SingleQubitRot { theta: params[0], phi: params[1] },
            "fsim" if params.len() == 2 => GateKind::FSimLike { alpha: params[0], cphase: params[1] },
            "haar" if params.len() == 32 => {
                let mut u = [C64::new(0.0, 0.0); 16];
                for (k, z) in u.iter_mut().enumerate() {
                    *z = C64::new(params[2 * k], params[2 * k + 1]);
                }
                GateKind::HaarTwoQubit { unitary: u }
            }
            "x" if params.is_empty() => GateKind::PauliX,
            "z" if params.is_empty() => GateKind::PauliZ,
            "rot" | "fsim" | "haar" | "x" | "z" => return Err(bad()),
            other => return Err(CircuitError::Format(format!("unknown gate kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub kind: GateKind,
    pub sites: Vec<Site>,
    pub layer: u32,
}

impl Gate {
    pub fn is_two_qubit(&self) -> bool {
        self.sites.len() == 2
    }

    /// Bond key with endpoints in lexicographic order.
    pub fn bond(&self) -> Option<(Site, Site)> {
        if self.sites.len() == 2 {
            let (a, b) = (self.sites[0], self.sites[1]);
            Some(if a < b { (a, b) } else { (b, a) })
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GateFamily {
    Iswap { alpha: f64, cphase: f64 },
    Haar { single_qubit_layers: bool },
}

impl Default for GateFamily {
    fn default() -> Self {
        GateFamily::Iswap { alpha: 1.0, cphase: 0.35 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtocOrder {
    Otoc1,
    Otoc2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub geometry: Geometry,
    pub depth: usize,
    pub m_site: Site,
    pub b_site: Site,
    pub family: GateFamily,
    pub num_instances: usize,
    pub master_seed: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircuitError {
    #[error("site {0} lies outside the geometry")]
    OutsideGeometry(Site),
    #[error("instance index {index} out of range ({count} instances)")]
    InstanceOutOfRange { index: usize, count: usize },
    #[error("ensemble needs at least 2 instances")]
    TooFewInstances,
    #[error("no candidate butterfly site has a usable signal (max sigma {sigma_max})")]
    NoSignal { sigma_max: f64 },
    #[error("circuit file: {0}")]
    Format(String),
    #[error("simulation failed while probing: {0}")]
    Probe(String),
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), CircuitError> {
        if !self.geometry.contains(self.m_site) {
            return Err(CircuitError::OutsideGeometry(self.m_site));
        }
        if !self.geometry.contains(self.b_site) {
            return Err(CircuitError::OutsideGeometry(self.b_site));
        }
        if self.num_instances < 2 {
            return Err(CircuitError::TooFewInstances);
        }
        Ok(())
    }
}

/// Seeded stream for one instance: ChaCha20 keyed by the master seed, with
/// the instance index as stream id.
pub fn instance_rng(master_seed: u64, instance: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(instance as u64);
    rng
}

/// Haar-random 4×4 unitary from Gram–Schmidt on a complex Gaussian matrix
/// (positive diagonal of R makes the distribution exactly Haar).
pub fn haar_unitary_4(rng: &mut impl Rng) -> [C64; 16] {
    let mut cols = [[C64::new(0.0, 0.0); 4]; 4];
    for col in cols.iter_mut() {
        for z in col.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *z = C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
        }
    }
    for j in 0..4 {
        for k in 0..j {
            let proj: C64 = (0..4).map(|i| cols[k][i].conj() * cols[j][i]).sum();
            for i in 0..4 {
                let sub = proj * cols[k][i];
                cols[j][i] -= sub;
            }
        }
        let n: f64 = cols[j].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for z in cols[j].iter_mut() {
            *z /= n;
        }
    }
    let mut u = [C64::new(0.0, 0.0); 16];
    for i in 0..4 {
        for j in 0..4 {
            u[i * 4 + j] = cols[j][i];
        }
    }
    u
}

/// Gates of U for one instance, in canonical order.
pub fn build_evolution(spec: &EnsembleSpec, instance: usize) -> Result<Vec<Gate>, CircuitError> {
    if instance >= spec.num_instances {
        return Err(CircuitError::InstanceOutOfRange { index: instance, count: spec.num_instances });
    }
    let mut rng = instance_rng(spec.master_seed, instance);
    let sites = spec.geometry.sites();
    let single_layers = match spec.family {
        GateFamily::Iswap { .. } => true,
        GateFamily::Haar { single_qubit_layers } => single_qubit_layers,
    };
    let mut gates = Vec::new();
    for step in 0..spec.depth {
        if single_layers {
            for &s in &sites {
                let theta = [0.25, 0.5, 0.75][rng.random_range(0..3usize)] * std::f64::consts::PI;
                let phi = rng.random_range(-1.0..=1.0) * std::f64::consts::PI;
                gates.push(Gate { kind: GateKind::SingleQubitRot { theta, phi }, sites: vec![s], layer: 2 * step as u32 });
            }
        }
        for (a, b) in spec.geometry.layer_pairs(step) {
            let kind = match spec.family {
                GateFamily::Iswap { alpha, cphase } => GateKind::FSimLike { alpha, cphase },
                GateFamily::Haar { .. } => GateKind::HaarTwoQubit { unitary: haar_unitary_4(&mut rng) },
            };
            gates.push(Gate { kind, sites: vec![a, b], layer: 2 * step as u32 + 1 });
        }
    }
    Ok(gates)
}

/// Role of a layer within an OTOC circuit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Evolution { copy: usize },
    Butterfly { copy: usize },
    Reverse { copy: usize },
    Measurement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtocCircuit {
    pub geometry: Geometry,
    pub depth: usize,
    pub active_qubits: Vec<Site>,
    pub gates: Vec<Gate>,
    pub m_site: Site,
    pub b_site: Site,
    pub order: OtocOrder,
    pub seed: u64,
    pub instance: usize,
}

fn canonical_sort(gates: &mut [Gate]) {
    gates.sort_by(|a, b| (a.layer, &a.sites).cmp(&(b.layer, &b.sites)));
}

/// Assembles U, B = X at the butterfly site, and U† (and for Otoc2 the
/// mid-circuit M = Z followed by a second U, B, U† block).
pub fn build_otoc_circuit(u_gates: &[Gate], spec: &EnsembleSpec, order: OtocOrder, instance: usize) -> Result<OtocCircuit, CircuitError> {
    if !spec.geometry.contains(spec.b_site) {
        return Err(CircuitError::OutsideGeometry(spec.b_site));
    }
    if !spec.geometry.contains(spec.m_site) {
        return Err(CircuitError::OutsideGeometry(spec.m_site));
    }
    let l = 2 * spec.depth as u32;
    let mut block: Vec<Gate> = u_gates.to_vec();
    block.push(Gate { kind: GateKind::PauliX, sites: vec![spec.b_site], layer: l });
    for g in u_gates.iter().rev() {
        block.push(Gate { kind: g.kind.adjoint(), sites: g.sites.clone(), layer: 2 * l - g.layer });
    }
    let mut gates = block.clone();
    if order == OtocOrder::Otoc2 {
        gates.push(Gate { kind: GateKind::PauliZ, sites: vec![spec.m_site], layer: 2 * l + 1 });
        for g in &block {
            gates.push(Gate { kind: g.kind.clone(), sites: g.sites.clone(), layer: g.layer + 2 * l + 2 });
        }
    }
    canonical_sort(&mut gates);
    Ok(OtocCircuit {
        geometry: spec.geometry,
        depth: spec.depth,
        active_qubits: spec.geometry.sites(),
        gates,
        m_site: spec.m_site,
        b_site: spec.b_site,
        order,
        seed: spec.master_seed,
        instance,
    })
}

/// Unpruned circuit for one instance.
pub fn build_instance(spec: &EnsembleSpec, order: OtocOrder, instance: usize) -> Result<OtocCircuit, CircuitError> {
    let u = build_evolution(spec, instance)?;
    build_otoc_circuit(&u, spec, order, instance)
}

/// Pruned circuit for one instance.
pub fn build_pruned_instance(spec: &EnsembleSpec, order: OtocOrder, instance: usize) -> Result<OtocCircuit, CircuitError> {
    Ok(prune_geometric_lightcones(&build_instance(spec, order, instance)?))
}

impl OtocCircuit {
    pub fn num_qubits(&self) -> usize {
        self.active_qubits.len()
    }

    pub fn stage_of(&self, layer: u32) -> Stage {
        let l = 2 * self.depth as u32;
        let (copy, local) = if layer <= 2 * l { (0, layer) } else if layer == 2 * l + 1 { return Stage::Measurement } else { (1, layer - (2 * l + 2)) };
        if local < l {
            Stage::Evolution { copy }
        } else if local == l {
            Stage::Butterfly { copy }
        } else {
            Stage::Reverse { copy }
        }
    }

    pub fn two_qubit_gate_count(&self) -> usize {
        self.gates.iter().filter(|g| g.is_two_qubit()).count()
    }

    /// Position of each active qubit in `active_qubits`.
    pub fn qubit_index(&self, s: Site) -> Option<usize> {
        self.active_qubits.binary_search(&s).ok()
    }

    fn copies(&self) -> usize {
        match self.order {
            OtocOrder::Otoc1 => 1,
            OtocOrder::Otoc2 => 2,
        }
    }
}

/// Marks gates (visited in reverse application order) in the backward cone
/// of `start`.
fn backward_cone(gates: &[Gate], idx: &[usize], start: Site, keep: &mut [bool]) {
    let mut support: HashSet<Site> = HashSet::from([start]);
    for &i in idx.iter().rev() {
        let g = &gates[i];
        if g.sites.iter().any(|s| support.contains(s)) {
            support.extend(g.sites.iter().cloned());
        } else {
            keep[i] = false;
        }
    }
}

fn forward_cone(gates: &[Gate], idx: &[usize], start: Site, keep: &mut [bool]) {
    let mut support: HashSet<Site> = HashSet::from([start]);
    for &i in idx {
        let g = &gates[i];
        if g.sites.iter().any(|s| support.contains(s)) {
            support.extend(g.sites.iter().cloned());
        } else {
            keep[i] = false;
        }
    }
}

/// Removes gates outside the geometric lightcones and then idle qubits:
/// (1) gates of each U/U† outside the cone of B, (2) gates after B outside
/// the backward cone of the final measurement, (3) gates of the first U
/// outside the forward cone of M from the initial state. Stages 1 and 2
/// leave the OTOC unchanged; stage 3 does not cancel exactly on |0…0⟩ and
/// defines the OTOC circuit that is studied.
pub fn prune_geometric_lightcones(c: &OtocCircuit) -> OtocCircuit {
    prune(c, true)
}

/// Stages 1 and 2 only, which preserve the OTOC value exactly.
pub fn prune_exact_cancellations(c: &OtocCircuit) -> OtocCircuit {
    prune(c, false)
}

fn prune(c: &OtocCircuit, redefine: bool) -> OtocCircuit {
    let n = c.gates.len();
    let mut keep = vec![true; n];
    let stages: Vec<Stage> = c.gates.iter().map(|g| c.stage_of(g.layer)).collect();
    let select = |keep: &[bool], pred: &dyn Fn(Stage) -> bool| -> Vec<usize> {
        (0..n).filter(|&i| keep[i] && pred(stages[i])).collect()
    };

    for copy in 0..c.copies() {
        let u = select(&keep, &|s| s == Stage::Evolution { copy });
        backward_cone(&c.gates, &u, c.b_site, &mut keep);
        let r = select(&keep, &|s| s == Stage::Reverse { copy });
        forward_cone(&c.gates, &r, c.b_site, &mut keep);
    }

    match c.order {
        OtocOrder::Otoc1 => {
            let r = select(&keep, &|s| s == Stage::Reverse { copy: 0 });
            backward_cone(&c.gates, &r, c.m_site, &mut keep);
        }
        OtocOrder::Otoc2 => {
            let all = select(&keep, &|s| matches!(s, Stage::Evolution { .. } | Stage::Reverse { .. }));
            let fixed = select(&keep, &|s| matches!(s, Stage::Butterfly { .. } | Stage::Measurement));
            let mut seq: Vec<usize> = all.iter().chain(fixed.iter()).cloned().collect();
            seq.sort();
            let mut tmp = keep.clone();
            backward_cone(&c.gates, &seq, c.m_site, &mut tmp);
            for &i in &all {
                keep[i] = tmp[i];
            }
        }
    }

    if redefine {
        let u0 = select(&keep, &|s| s == Stage::Evolution { copy: 0 });
        forward_cone(&c.gates, &u0, c.m_site, &mut keep);
    }

    let gates: Vec<Gate> = c.gates.iter().zip(&keep).filter(|(_, k)| **k).map(|(g, _)| g.clone()).collect();
    let mut active: BTreeSet<Site> = gates.iter().flat_map(|g| g.sites.iter().cloned()).collect();
    active.insert(c.m_site);
    active.insert(c.b_site);
    OtocCircuit { active_qubits: active.into_iter().collect(), gates, ..c.clone() }
}

/// Two-qubit gate count per bond and the maximum over bonds.
pub fn max_gates_per_bond(c: &OtocCircuit) -> (BTreeMap<(Site, Site), usize>, usize) {
    let mut counts = BTreeMap::new();
    for g in &c.gates {
        if let Some(b) = g.bond() {
            *counts.entry(b).or_insert(0) += 1;
        }
    }
    let max = counts.values().cloned().max().unwrap_or(0);
    (counts, max)
}

/// Geometric lightcone speeds and the maximal local depth for a given
/// M→B separation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightconeGeometry {
    pub c_h: f64,
    pub c_d: f64,
    pub c_1d: f64,
    pub v_mb: f64,
    pub ell_g: f64,
}

/// Direction of the M→B separation in 2D.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal,
    Diagonal,
}

pub const C_H: f64 = 0.5;
pub const C_D: f64 = 0.353_553_390_593_273_8;
pub const C_1D: f64 = 1.0;

impl LightconeGeometry {
    fn with(c: f64, v_mb: f64, depth: usize) -> Option<Self> {
        if !(0.0..=c).contains(&v_mb) {
            return None;
        }
        Some(Self { c_h: C_H, c_d: C_D, c_1d: C_1D, v_mb, ell_g: (1.0 - v_mb / c) * depth as f64 })
    }

    pub fn line(v_mb: f64, depth: usize) -> Option<Self> {
        Self::with(C_1D, v_mb, depth)
    }

    pub fn grid(orientation: Orientation, v_mb: f64, depth: usize) -> Option<Self> {
        let c = match orientation {
            Orientation::Horizontal => C_H,
            Orientation::Diagonal => C_D,
        };
        Self::with(c, v_mb, depth)
    }
}

/// Butterfly offset for a separation travelling at `v_over_c` of the
/// geometric speed for `depth` two-qubit layers.
pub fn butterfly_offset(geometry: &Geometry, orientation: Orientation, v_over_c: f64, depth: usize) -> (i32, i32) {
    let t = depth as f64;
    match geometry {
        Geometry::Line { .. } => (0, (v_over_c * C_1D * t).round() as i32),
        Geometry::Grid { .. } => match orientation {
            Orientation::Horizontal => (0, (v_over_c * C_H * t).round() as i32),
            Orientation::Diagonal => {
                let k = (v_over_c * C_D * t / std::f64::consts::SQRT_2).round() as i32;
                (k, k)
            }
        },
    }
}

/// Outcome of butterfly-site probing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BSelection {
    pub b_site: Site,
    pub sigma_max: f64,
    pub threshold: f64,
    pub candidates: Vec<BCandidate>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BCandidate {
    pub site: Site,
    pub num_qubits: usize,
    /// `None` when the pruned circuit exceeds the probe guard.
    pub sigma: Option<f64>,
    pub max_gates_per_bond: usize,
    pub total_gates: usize,
    pub survivor: bool,
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub sigma_threshold: f64,
    pub probe_instances: usize,
    pub master_seed: u64,
    pub max_probe_qubits: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { sigma_threshold: 0.3, probe_instances: 50, master_seed: 0, max_probe_qubits: 20 }
    }
}

/// Sample standard deviation (n-1 denominator).
fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Probes every site of the geometry as butterfly location, estimates the
/// OTOC spread by exact simulation, keeps the sites with spread at least
/// `sigma_threshold` times the maximum, and returns the survivor with the
/// most gates on one bond (ties broken by total gate count, then site).
pub fn select_b_location(geometry: Geometry, depth: usize, m_site: Site, family: GateFamily, cfg: &ProbeConfig) -> Result<BSelection, CircuitError> {
    if !geometry.contains(m_site) {
        return Err(CircuitError::OutsideGeometry(m_site));
    }
    let mut candidates = Vec::new();
    for site in geometry.sites() {
        let spec = EnsembleSpec { geometry, depth, m_site, b_site: site, family, num_instances: cfg.probe_instances.max(2), master_seed: cfg.master_seed };
        let first = build_pruned_instance(&spec, OtocOrder::Otoc1, 0)?;
        let n = first.num_qubits();
        let (_, max_g) = max_gates_per_bond(&first);
        let total = first.gates.len();
        let sigma = if n > cfg.max_probe_qubits {
            None
        } else {
            let mut values = Vec::with_capacity(spec.num_instances);
            for k in 0..spec.num_instances {
                let c = if k == 0 { first.clone() } else { build_pruned_instance(&spec, OtocOrder::Otoc1, k)? };
                let v = crate::statevector::otoc_exact(&c).map_err(|e| CircuitError::Probe(e.to_string()))?;
                values.push(v);
            }
            Some(sample_std(&values))
        };
        candidates.push(BCandidate { site, num_qubits: n, sigma, max_gates_per_bond: max_g, total_gates: total, survivor: false });
    }
    let sigma_max = candidates.iter().filter_map(|c| c.sigma).fold(0.0, f64::max);
    if sigma_max <= 1e-12 {
        return Err(CircuitError::NoSignal { sigma_max });
    }
    let threshold = cfg.sigma_threshold * sigma_max;
    for c in candidates.iter_mut() {
        c.survivor = c.sigma.is_some_and(|s| s >= threshold);
    }
    let best = candidates
        .iter()
        .filter(|c| c.survivor)
        .max_by(|a, b| (a.max_gates_per_bond, a.total_gates, std::cmp::Reverse(a.site)).cmp(&(b.max_gates_per_bond, b.total_gates, std::cmp::Reverse(b.site))))
        .ok_or(CircuitError::NoSignal { sigma_max })?;
    Ok(BSelection { b_site: best.site, sigma_max, threshold, candidates })
}

/// Serialized gate record of the circuit interchange format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateRecord {
    pub kind: String,
    pub params: Vec<f64>,
    pub sites: Vec<Site>,
    pub layer: u32,
}

/// Circuit interchange document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CircuitFile {
    pub geometry: Geometry,
    pub layer_pattern: String,
    pub depth: usize,
    pub active_qubits: Vec<Site>,
    pub gates: Vec<GateRecord>,
    pub m_site: Site,
    pub b_site: Site,
    pub order: OtocOrder,
    pub seed: u64,
    pub instance: usize,
}

impl OtocCircuit {
    pub fn to_file(&self) -> CircuitFile {
        let mut gates = self.gates.clone();
        canonical_sort(&mut gates);
        CircuitFile {
            geometry: self.geometry,
            layer_pattern: self.geometry.layer_pattern().to_string(),
            depth: self.depth,
            active_qubits: self.active_qubits.clone(),
            gates: gates
                .iter()
                .map(|g| GateRecord { kind: g.kind.tag().to_string(), params: g.kind.params(), sites: g.sites.clone(), layer: g.layer })
                .collect(),
            m_site: self.m_site,
            b_site: self.b_site,
            order: self.order,
            seed: self.seed,
            instance: self.instance,
        }
    }

    pub fn from_file(f: &CircuitFile) -> Result<Self, CircuitError> {
        let mut gates = Vec::with_capacity(f.gates.len());
        for r in &f.gates {
            let kind = GateKind::from_record(&r.kind, &r.params)?;
            if kind.arity() != r.sites.len() {
                return Err(CircuitError::Format(format!("gate `{}` expects {} sites", r.kind, kind.arity())));
            }
            if r.sites.len() == 2 && !r.sites[0].is_adjacent(r.sites[1]) {
                return Err(CircuitError::Format(format!("non-adjacent gate on {} {}", r.sites[0], r.sites[1])));
            }
            gates.push(Gate { kind, sites: r.sites.clone(), layer: r.layer });
        }
        Ok(OtocCircuit {
            geometry: f.geometry,
            depth: f.depth,
            active_qubits: f.active_qubits.clone(),
            gates,
            m_site: f.m_site,
            b_site: f.b_site,
            order: f.order,
            seed: f.seed,
            instance: f.instance,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("circuit serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CircuitError> {
        let f: CircuitFile = serde_json::from_str(s).map_err(|e| CircuitError::Format(e.to_string()))?;
        Self::from_file(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_spec(width: usize, depth: usize, m: i32, b: i32) -> EnsembleSpec {
        EnsembleSpec {
            geometry: Geometry::Line { width },
            depth,
            m_site: Site(0, m),
            b_site: Site(0, b),
            family: GateFamily::default(),
            num_instances: 4,
            master_seed: 11,
        }
    }

    #[test]
    fn depth_zero_is_empty() {
        let spec = line_spec(6, 0, 2, 3);
        assert!(build_evolution(&spec, 0).unwrap().is_empty());
        let c = build_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        assert_eq!(c.gates.len(), 1);
        assert_eq!(c.gates[0].kind, GateKind::PauliX);
        assert_eq!(c.gates[0].sites, vec![Site(0, 3)]);
    }

    #[test]
    fn line_brickwall_bonds() {
        let spec = line_spec(4, 2, 0, 1);
        let u = build_evolution(&spec, 0).unwrap();
        let layer1: Vec<_> = u.iter().filter(|g| g.layer == 1).map(|g| g.bond().unwrap()).collect();
        let layer3: Vec<_> = u.iter().filter(|g| g.layer == 3).map(|g| g.bond().unwrap()).collect();
        assert_eq!(layer1, vec![(Site(0, 0), Site(0, 1)), (Site(0, 2), Site(0, 3))]);
        assert_eq!(layer3, vec![(Site(0, 1), Site(0, 2))]);
        assert_eq!(u.iter().filter(|g| g.sites.len() == 1).count(), 8);
        // single-qubit layer precedes each two-qubit layer
        assert!(u.iter().filter(|g| g.sites.len() == 1).all(|g| g.layer % 2 == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = line_spec(8, 3, 2, 5);
        assert_eq!(build_evolution(&spec, 1).unwrap(), build_evolution(&spec, 1).unwrap());
        assert_ne!(build_evolution(&spec, 1).unwrap(), build_evolution(&spec, 2).unwrap());
        assert!(matches!(build_evolution(&spec, 4), Err(CircuitError::InstanceOutOfRange { .. })));
    }

    #[test]
    fn grid_pattern_covers_each_bond_once_per_cycle() {
        let g = Geometry::Grid { rows: 4, cols: 5 };
        let mut seen = BTreeMap::new();
        for step in 0..4 {
            let pairs = g.layer_pairs(step);
            let mut used = HashSet::new();
            for (a, b) in pairs {
                assert!(a.is_adjacent(b));
                assert!(used.insert(a) && used.insert(b), "qubit used twice in one layer");
                *seen.entry((a, b)).or_insert(0) += 1;
            }
        }
        // 4x5 grid has 4*4 horizontal + 3*5 vertical bonds
        assert_eq!(seen.len(), 31);
        assert!(seen.values().all(|&v| v == 1));
    }

    #[test]
    fn otoc2_has_twice_the_body_plus_measurement() {
        let spec = line_spec(7, 3, 3, 5);
        let c1 = build_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        let c2 = build_instance(&spec, OtocOrder::Otoc2, 0).unwrap();
        assert_eq!(c2.gates.len(), 2 * c1.gates.len() + 1);
        assert_eq!(c2.gates.iter().filter(|g| g.kind == GateKind::PauliX).count(), 2);
        assert_eq!(c2.gates.iter().filter(|g| g.kind == GateKind::PauliZ).count(), 1);
    }

    #[test]
    fn b_outside_geometry_rejected() {
        let spec = line_spec(5, 2, 1, 9);
        let u = build_evolution(&spec, 0).unwrap();
        assert_eq!(build_otoc_circuit(&u, &spec, OtocOrder::Otoc1, 0), Err(CircuitError::OutsideGeometry(Site(0, 9))));
    }

    #[test]
    fn far_butterfly_never_touches_m() {
        let spec = line_spec(30, 3, 5, 20);
        let c = build_pruned_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        assert!(c.gates.iter().all(|g| !g.sites.contains(&Site(0, 5))));
        assert!(c.active_qubits.contains(&Site(0, 5)));
    }

    #[test]
    fn pruning_is_idempotent() {
        for (depth, b) in [(4, 6), (6, 8), (5, 4)] {
            for order in [OtocOrder::Otoc1, OtocOrder::Otoc2] {
                let spec = line_spec(16, depth, 5, b);
                let c = build_pruned_instance(&spec, order, 0).unwrap();
                assert_eq!(prune_geometric_lightcones(&c), c);
            }
        }
        let spec = EnsembleSpec {
            geometry: Geometry::Grid { rows: 8, cols: 8 },
            depth: 6,
            m_site: Site(3, 3),
            b_site: Site(3, 5),
            family: GateFamily::default(),
            num_instances: 2,
            master_seed: 1,
        };
        let c = build_pruned_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        assert_eq!(prune_geometric_lightcones(&c), c);
    }

    #[test]
    fn gate_counts_per_bond() {
        let spec = line_spec(6, 0, 1, 2);
        let c = build_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        assert_eq!(max_gates_per_bond(&c).1, 0);
        let mut gates = Vec::new();
        for layer in 0..8 {
            gates.push(Gate { kind: GateKind::FSimLike { alpha: 1.0, cphase: 0.35 }, sites: vec![Site(2, 3), Site(2, 4)], layer: 2 * layer + 1 });
            gates.push(Gate { kind: GateKind::FSimLike { alpha: 1.0, cphase: 0.35 }, sites: vec![Site(1, 3), Site(2, 3)], layer: 2 * layer + 1 });
        }
        gates.truncate(15);
        let c = OtocCircuit { gates, ..c };
        let (counts, max) = max_gates_per_bond(&c);
        assert_eq!(max, 8);
        assert_eq!(counts[&(Site(2, 3), Site(2, 4))], 8);
    }

    #[test]
    fn file_roundtrip_is_byte_stable() {
        let spec = EnsembleSpec { family: GateFamily::Haar { single_qubit_layers: true }, ..line_spec(8, 3, 3, 5) };
        let c = build_pruned_instance(&spec, OtocOrder::Otoc1, 1).unwrap();
        let s = c.to_json();
        let back = OtocCircuit::from_json(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), s);
    }

    #[test]
    fn haar_gate_is_unitary_and_adjoint_inverts() {
        let mut rng = instance_rng(3, 0);
        let u = haar_unitary_4(&mut rng);
        let k = GateKind::HaarTwoQubit { unitary: u };
        for kind in [k, GateKind::FSimLike { alpha: 0.7, cphase: 0.35 }, GateKind::SingleQubitRot { theta: 0.75 * 3.14, phi: -1.1 }] {
            let m = kind.matrix();
            let a = kind.adjoint().matrix();
            let d = if m.len() == 16 { 4 } else { 2 };
            for i in 0..d {
                for j in 0..d {
                    let mut acc = C64::new(0.0, 0.0);
                    for l in 0..d {
                        acc += a[i * d + l] * m[l * d + j];
                    }
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((acc - C64::new(expect, 0.0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn alpha_changes_only_entangler_parameters() {
        let a = EnsembleSpec {
            geometry: Geometry::Grid { rows: 5, cols: 5 },
            depth: 4,
            m_site: Site(2, 2),
            b_site: Site(2, 3),
            family: GateFamily::Iswap { alpha: 1.0, cphase: 0.35 },
            num_instances: 2,
            master_seed: 5,
        };
        let b = EnsembleSpec { family: GateFamily::Iswap { alpha: 0.25, cphase: 0.35 }, ..a.clone() };
        let ga = build_pruned_instance(&a, OtocOrder::Otoc1, 1).unwrap();
        let gb = build_pruned_instance(&b, OtocOrder::Otoc1, 1).unwrap();
        assert_eq!(ga.active_qubits, gb.active_qubits);
        assert_eq!(ga.gates.len(), gb.gates.len());
        for (x, y) in ga.gates.iter().zip(&gb.gates) {
            assert_eq!(x.sites, y.sites);
            match (&x.kind, &y.kind) {
                (GateKind::FSimLike { alpha: p, .. }, GateKind::FSimLike { alpha: q, .. }) => assert_eq!(p * 0.25, *q),
                _ => assert_eq!(x.kind, y.kind),
            }
        }
    }

    #[test]
    fn lightcone_geometry() {
        let g = LightconeGeometry::line(0.6, 10).unwrap();
        assert!((g.ell_g - 4.0).abs() < 1e-12);
        assert!((C_D - C_H / std::f64::consts::SQRT_2).abs() < 1e-15);
        assert!(LightconeGeometry::grid(Orientation::Horizontal, 0.6, 4).is_none());
    }
}
