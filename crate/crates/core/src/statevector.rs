//! Dense state-vector simulation: the reference for OTOC values, fidelities
//! and spread probing.
//!
//! Qubit `k` of `qubits` (sorted coordinates) is axis `k` of the amplitude
//! array in row-major order, i.e. bit `N-1-k` of the flat index.

use std::io::{Read, Write};

use thiserror::Error;

use crate::circuits::{Gate, OtocCircuit, OtocOrder, Site};
use crate::tensor::C64;

/// Default qubit-count guard (2^28 amplitudes, 4 GiB).
pub const DEFAULT_MAX_QUBITS: usize = 28;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("{got} qubits exceed the state-vector guard of {max}")]
    TooManyQubits { got: usize, max: usize },
    #[error("circuit order is {got:?}, expected {expected:?}")]
    WrongOrder { got: OtocOrder, expected: OtocOrder },
    #[error("gate touches inactive qubit {0}")]
    InactiveQubit(Site),
    #[error("qubit sets differ")]
    QubitMismatch,
    #[error("amplitude file: {0}")]
    Io(#[from] std::io::Error),
    #[error("amplitude file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    qubits: Vec<Site>,
    amplitudes: Vec<C64>,
}

impl StateVector {
    /// `|0…0⟩` on the given (sorted, distinct) qubits.
    pub fn zero_state(qubits: Vec<Site>) -> Result<Self, StateError> {
        Self::zero_state_with_guard(qubits, DEFAULT_MAX_QUBITS)
    }

    pub fn zero_state_with_guard(mut qubits: Vec<Site>, max_qubits: usize) -> Result<Self, StateError> {
        qubits.sort();
        qubits.dedup();
        if qubits.len() > max_qubits {
            return Err(StateError::TooManyQubits { got: qubits.len(), max: max_qubits });
        }
        let mut amplitudes = vec![C64::new(0.0, 0.0); 1usize << qubits.len()];
        amplitudes[0] = C64::new(1.0, 0.0);
        Ok(Self { qubits, amplitudes })
    }

    /// Wraps raw amplitudes (row-major over the sorted qubit list).
    pub fn from_amplitudes(mut qubits: Vec<Site>, amplitudes: Vec<C64>) -> Result<Self, StateError> {
        let sorted = {
            let mut q = qubits.clone();
            q.sort();
            q.dedup();
            q
        };
        if sorted != qubits || amplitudes.len() != 1usize << qubits.len() {
            qubits.sort();
            return Err(StateError::Format("amplitude count or qubit order mismatch".into()));
        }
        Ok(Self { qubits, amplitudes })
    }

    pub fn num_qubits(&self) -> usize {
        self.qubits.len()
    }

    pub fn qubits(&self) -> &[Site] {
        &self.qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn axis_of(&self, s: Site) -> Option<usize> {
        self.qubits.binary_search(&s).ok()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Applies a 2×2 matrix (row-major) to `axis`.
    pub fn apply_one(&mut self, axis: usize, m: &[C64]) {
        let n = self.num_qubits();
        let stride = 1usize << (n - 1 - axis);
        let len = self.amplitudes.len();
        let mut base = 0;
        while base < len {
            for i in base..base + stride {
                let a0 = self.amplitudes[i];
                let a1 = self.amplitudes[i + stride];
                self.amplitudes[i] = m[0] * a0 + m[1] * a1;
                self.amplitudes[i + stride] = m[2] * a0 + m[3] * a1;
            }
            base += 2 * stride;
        }
    }

    /// Applies a 4×4 matrix (row-major, basis `|s_a s_b⟩`) to axes `a`, `b`.
    pub fn apply_two(&mut self, a: usize, b: usize, m: &[C64]) {
        let n = self.num_qubits();
        let sa = 1usize << (n - 1 - a);
        let sb = 1usize << (n - 1 - b);
        let len = self.amplitudes.len();
        for i in 0..len {
            if i & sa != 0 || i & sb != 0 {
                continue;
            }
            let idx = [i, i | sb, i | sa, i | sa | sb];
            let v = idx.map(|k| self.amplitudes[k]);
            for (r, &k) in idx.iter().enumerate() {
                self.amplitudes[k] = m[4 * r] * v[0] + m[4 * r + 1] * v[1] + m[4 * r + 2] * v[2] + m[4 * r + 3] * v[3];
            }
        }
    }

    pub fn apply_gate(&mut self, g: &Gate) -> Result<(), StateError> {
        let m = g.kind.matrix();
        let axes = g.sites.iter().map(|&s| self.axis_of(s).ok_or(StateError::InactiveQubit(s))).collect::<Result<Vec<_>, _>>()?;
        match axes.len() {
            1 => self.apply_one(axes[0], &m),
            _ => self.apply_two(axes[0], axes[1], &m),
        }
        Ok(())
    }

    /// `⟨Z⟩` at `site`, normalized by the state norm.
    pub fn expectation_z(&self, site: Site) -> Result<f64, StateError> {
        let axis = self.axis_of(site).ok_or(StateError::InactiveQubit(site))?;
        let bit = 1usize << (self.num_qubits() - 1 - axis);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (i, z) in self.amplitudes.iter().enumerate() {
            let p = z.norm_sqr();
            norm += p;
            acc += if i & bit == 0 { p } else { -p };
        }
        Ok(acc / norm)
    }

    pub fn inner(&self, other: &StateVector) -> Result<C64, StateError> {
        if self.qubits != other.qubits {
            return Err(StateError::QubitMismatch);
        }
        Ok(self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a.conj() * b).sum())
    }

    /// Writes the 8-byte little-endian qubit count followed by interleaved
    /// little-endian `(re, im)` doubles.
    pub fn write_amplitudes(&self, w: &mut impl Write) -> Result<(), StateError> {
        w.write_all(&(self.num_qubits() as u64).to_le_bytes())?;
        for z in &self.amplitudes {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump written by `write_amplitudes`; `qubits` supplies the
    /// coordinate labels (the dump itself only carries the count).
    pub fn read_amplitudes(r: &mut impl Read, qubits: Vec<Site>) -> Result<Self, StateError> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        let n = u64::from_le_bytes(head) as usize;
        if n != qubits.len() || n > 40 {
            return Err(StateError::Format(format!("header says {n} qubits, {} labels given", qubits.len())));
        }
        let mut amps = Vec::with_capacity(1 << n);
        let mut buf = [0u8; 16];
        for _ in 0..(1usize << n) {
            r.read_exact(&mut buf)?;
            let re = f64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(buf[8..].try_into().expect("8 bytes"));
            amps.push(C64::new(re, im));
        }
        Self::from_amplitudes(qubits, amps)
    }
}

/// Runs the whole gate list on `|0…0⟩` over the circuit's active qubits.
pub fn evolve_exact(c: &OtocCircuit) -> Result<StateVector, StateError> {
    evolve_exact_with_guard(c, DEFAULT_MAX_QUBITS)
}

pub fn evolve_exact_with_guard(c: &OtocCircuit, max_qubits: usize) -> Result<StateVector, StateError> {
    let mut psi = StateVector::zero_state_with_guard(c.active_qubits.clone(), max_qubits)?;
    for g in &c.gates {
        psi.apply_gate(g)?;
    }
    Ok(psi)
}

/// `⟨φ|Z_m|φ⟩` with `|φ⟩ = U†BU|0⟩`.
pub fn otoc_exact(c: &OtocCircuit) -> Result<f64, StateError> {
    if c.order != OtocOrder::Otoc1 {
        return Err(StateError::WrongOrder { got: c.order, expected: OtocOrder::Otoc1 });
    }
    evolve_exact(c)?.expectation_z(c.m_site)
}

/// `⟨φ|Z_m|φ⟩` with `|φ⟩ = U†BU · M · U†BU|0⟩`.
pub fn otoc2_exact(c: &OtocCircuit) -> Result<f64, StateError> {
    if c.order != OtocOrder::Otoc2 {
        return Err(StateError::WrongOrder { got: c.order, expected: OtocOrder::Otoc2 });
    }
    evolve_exact(c)?.expectation_z(c.m_site)
}

/// `|⟨a|b⟩|² / (⟨a|a⟩⟨b|b⟩)`.
pub fn fidelity(a: &StateVector, b: &StateVector) -> Result<f64, StateError> {
    let ov = a.inner(b)?;
    let na = a.inner(a)?.re;
    let nb = b.inner(b)?.re;
    Ok(ov.norm_sqr() / (na * nb))
}
