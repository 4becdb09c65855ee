//! `otoc` experiment harness: ensemble generation, simulation sweeps and
//! metric reports over CSV results.

use crate::circuits::{
    butterfly_offset, build_pruned_instance, max_gates_per_bond, select_b_location, EnsembleSpec, GateFamily, Geometry, OtocCircuit,
    OtocOrder, Orientation, ProbeConfig, Site,
};
use crate::extraction::{contract_bmps, contract_exact, contract_exact_double_layer, peps_to_statevector, BmpsConfig, ExtractionError, DEFAULT_MAX_ELEMENTS};
use crate::metrics::{
    bootstrap_snr, fit_exponential, required_d_for_target, snr, snr_uncorrelated_baseline, EnsembleResults, InstanceRecord,
    DEFAULT_BOOTSTRAP_BATCHES, DEFAULT_BOOTSTRAP_BATCH_SIZE,
};
use crate::mps::evolve_mps;
use crate::peps::{evolve_peps_bp, evolve_peps_untruncated, final_truncate_bp, BpConfig, MessageSet, Peps};
use crate::statevector::{evolve_exact_with_guard, fidelity, StateVector};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "OTOC_WORKERS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CSV_HEADER: &str = "ensemble_hash,instance,method,D,chi,alpha,exact,approx,fidelity,discarded_weight,runtime_s,bp_iters";

const SOURCES: &[&str] = &[
    include_str!("tensor.rs"),
    include_str!("circuits.rs"),
    include_str!("statevector.rs"),
    include_str!("mps.rs"),
    include_str!("peps.rs"),
    include_str!("extraction.rs"),
    include_str!("metrics.rs"),
    include_str!("cli.rs"),
];

/// SHA-256 over the library sources compiled into this binary.
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    for s in SOURCES {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    hex::encode(h.finalize())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Parser, Debug)]
#[command(name = "otoc", version, about = "Tensor-network OTOC simulation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a pruned circuit ensemble and its manifest.
    Gen(GenArgs),
    /// Simulate an ensemble and write result rows.
    Run(RunArgs),
    /// Summarize result rows into SNR tables and fits.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyArg {
    Iswap,
    Haar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OrientationArg {
    Horizontal,
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Otoc1,
    Otoc2,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    /// Line geometry.
    #[arg(long = "1d", conflicts_with = "two_d", required_unless_present = "two_d")]
    pub one_d: bool,
    /// Square-grid geometry.
    #[arg(long = "2d")]
    pub two_d: bool,
    #[arg(long)]
    pub depth: usize,
    /// Line width (default 5·depth + 8).
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub rows: usize,
    #[arg(long, default_value_t = 10)]
    pub cols: usize,
    /// Measurement site as `row,col` (default near the centre).
    #[arg(long, value_parser = parse_site)]
    pub m: Option<Site>,
    /// Butterfly site as `row,col`.
    #[arg(long, value_parser = parse_site, conflicts_with_all = ["vmb", "select_b"])]
    pub b: Option<Site>,
    /// Butterfly placement as a fraction of the geometric speed.
    #[arg(long, conflicts_with = "select_b")]
    pub vmb: Option<f64>,
    #[arg(long, value_enum, default_value_t = OrientationArg::Horizontal)]
    pub orientation: OrientationArg,
    /// Choose the butterfly site by exact OTOC-spread probing.
    #[arg(long)]
    pub select_b: bool,
    #[arg(long, default_value_t = 0.3)]
    pub sigma_threshold: f64,
    #[arg(long, default_value_t = 50)]
    pub probe_instances: usize,
    #[arg(long, default_value_t = 20)]
    pub probe_max_qubits: usize,
    #[arg(long, value_enum, default_value_t = FamilyArg::Iswap)]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.35)]
    pub cphase: f64,
    /// Interleave Haar single-qubit layers in the Haar family.
    #[arg(long)]
    pub haar_single_qubit_layers: bool,
    #[arg(long, value_enum, default_value_t = OrderArg::Otoc1)]
    pub order: OrderArg,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Exact,
    Mps,
    PepsBp,
    PepsUntruncatedFinal,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Mps => "mps",
            Method::PepsBp => "peps-bp",
            Method::PepsUntruncatedFinal => "peps-untruncated-final",
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Ensemble directory written by `gen`.
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Bond dimensions: comma list, `a..b` ranges, or `inf`.
    #[arg(long = "bond-dims", short = 'D', default_value = "inf", value_parser = parse_dims)]
    pub bond_dims: Dims,
    /// Boundary-MPS dimensions: comma list, `a..b` ranges, or `inf` for exact extraction.
    #[arg(long, default_value = "inf", value_parser = parse_dims)]
    pub chi: Dims,
    #[arg(long)]
    pub out: PathBuf,
    /// Record wall-clock runtimes (otherwise 0 for byte-stable output).
    #[arg(long)]
    pub timing: bool,
    #[arg(long, default_value_t = 1e-14)]
    pub sv_cutoff: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub bp_tolerance: f64,
    #[arg(long, default_value_t = 100)]
    pub bp_max_iters: usize,
    /// Re-converge messages after this many two-qubit layers.
    #[arg(long, default_value_t = 1)]
    pub resync: usize,
    /// Largest qubit count for state-vector oracle and fidelity.
    #[arg(long, default_value_t = 24)]
    pub exact_max_qubits: usize,
    /// Largest intermediate tensor for dense contractions.
    #[arg(long, default_value_t = DEFAULT_MAX_ELEMENTS)]
    pub max_elements: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Result CSV files written by `run`.
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// Target SNR values for the required-D table.
    #[arg(long, default_value = "5,10", value_delimiter = ',')]
    pub targets: Vec<f64>,
    /// Ensemble directory, for the gate-count prediction column.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_BATCHES)]
    pub batches: usize,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A list of dimensions; `None` entries stand for `inf`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dims(pub Vec<Option<usize>>);

pub fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let mut v = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part == "inf" {
            v.push(None);
        } else if let Some((a, b)) = part.split_once("..") {
            let a: usize = a.parse().map_err(|e| format!("{part}: {e}"))?;
            let b: usize = b.parse().map_err(|e| format!("{part}: {e}"))?;
            if a > b {
                return Err(format!("empty range {part}"));
            }
            v.extend((a..=b).map(Some));
        } else {
            v.push(Some(part.parse().map_err(|e| format!("{part}: {e}"))?));
        }
    }
    if v.is_empty() || v.contains(&Some(0)) {
        return Err("dimensions must be a non-empty list of positive values".into());
    }
    Ok(Dims(v))
}

pub fn parse_site(s: &str) -> std::result::Result<Site, String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected row,col, got {s}"))?;
    Ok(Site(r.trim().parse().map_err(|e| format!("{s}: {e}"))?, c.trim().parse().map_err(|e| format!("{s}: {e}"))?))
}

fn dim_str(d: Option<usize>) -> String {
    d.map_or_else(|| "inf".into(), |v| v.to_string())
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Per-instance entry of the ensemble manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub instance: usize,
    pub file: String,
    pub sha256: String,
    pub num_qubits: usize,
    pub max_gates_per_bond: usize,
    pub two_qubit_gates: usize,
}

/// Full record of a generated ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub code_hash: String,
    pub ensemble_hash: String,
    pub spec: EnsembleSpec,
    pub order: OtocOrder,
    pub v_mb_over_c: Option<f64>,
    pub b_selection: Option<SelectionSummary>,
    pub instances: Vec<ManifestInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub sigma_threshold: f64,
    pub probe_instances: usize,
    pub sigma_max: f64,
    pub survivors: usize,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let s = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// Loads every circuit and checks its hash against the manifest.
    pub fn load_circuits(&self, dir: &Path) -> Result<Vec<OtocCircuit>> {
        self.instances
            .iter()
            .map(|mi| {
                let bytes = fs::read(dir.join(&mi.file)).with_context(|| format!("reading {}", mi.file))?;
                if sha256_hex(&bytes) != mi.sha256 {
                    bail!("hash mismatch for {}", mi.file);
                }
                Ok(OtocCircuit::from_json(std::str::from_utf8(&bytes)?)?)
            })
            .collect()
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.spec.family {
            GateFamily::Iswap { alpha, .. } => Some(alpha),
            GateFamily::Haar { .. } => None,
        }
    }
}

/// Short content hash of the ensemble definition.
pub fn ensemble_hash(spec: &EnsembleSpec, order: OtocOrder) -> String {
    let body = serde_json::to_string(&(spec, order)).expect("spec serializes");
    sha256_hex(body.as_bytes())[..16].to_string()
}

pub fn main_with_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let workers = std::env::var(WORKERS_ENV).ok().map(|v| v.parse::<usize>()).transpose().context(WORKERS_ENV)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder.build()?;
    pool.install(|| match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| ()),
        Command::Run(a) => cmd_run(a).map(|_| ()),
        Command::Report(a) => cmd_report(a),
    })
}

fn gen_spec(a: &GenArgs) -> Result<(EnsembleSpec, Option<SelectionSummary>)> {
    let t = a.depth as i32;
    let geometry = if a.one_d {
        Geometry::Line { width: a.width.unwrap_or(5 * a.depth + 8) }
    } else {
        Geometry::Grid { rows: a.rows, cols: a.cols }
    };
    let m_site = a.m.unwrap_or(match geometry {
        Geometry::Line { .. } => Site(0, 2 * t + 3),
        Geometry::Grid { rows, cols } => Site((rows as i32 - 1) / 2, (cols as i32 - 1) / 2),
    });
    let family = match a.family {
        FamilyArg::Iswap => GateFamily::Iswap { alpha: a.alpha, cphase: a.cphase },
        FamilyArg::Haar => GateFamily::Haar { single_qubit_layers: a.haar_single_qubit_layers },
    };
    let orientation = match a.orientation {
        OrientationArg::Horizontal => Orientation::Horizontal,
        OrientationArg::Diagonal => Orientation::Diagonal,
    };
    let mut selection = None;
    let b_site = if let Some(b) = a.b {
        b
    } else if a.select_b {
        let cfg = ProbeConfig { sigma_threshold: a.sigma_threshold, probe_instances: a.probe_instances, master_seed: a.seed, max_probe_qubits: a.probe_max_qubits };
        let sel = select_b_location(geometry, a.depth, m_site, family, &cfg)?;
        let survivors = sel.candidates.iter().filter(|c| c.survivor).count();
        write_selection_map(&a.out, &sel.candidates)?;
        selection = Some(SelectionSummary { sigma_threshold: a.sigma_threshold, probe_instances: a.probe_instances, sigma_max: sel.sigma_max, survivors });
        sel.b_site
    } else {
        let v = a.vmb.unwrap_or(0.6);
        let (dr, dc) = butterfly_offset(&geometry, orientation, v, a.depth);
        Site(m_site.0 + dr, m_site.1 + dc)
    };
    let spec = EnsembleSpec { geometry, depth: a.depth, m_site, b_site, family, num_instances: a.instances, master_seed: a.seed };
    spec.validate()?;
    Ok((spec, selection))
}

fn write_selection_map(out: &Path, candidates: &[crate::circuits::BCandidate]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut s = String::from("row,col,num_qubits,sigma,max_gates_per_bond,total_gates,survivor\n");
    for c in candidates {
        writeln!(s, "{},{},{},{},{},{},{}", c.site.0, c.site.1, c.num_qubits, opt_f64(c.sigma), c.max_gates_per_bond, c.total_gates, c.survivor)?;
    }
    fs::write(out.join("b_selection.csv"), s)?;
    Ok(())
}

/// Writes one circuit file per instance plus the manifest.
pub fn cmd_gen(a: &GenArgs) -> Result<Manifest> {
    let (spec, b_selection) = gen_spec(a)?;
    let order = match a.order {
        OrderArg::Otoc1 => OtocOrder::Otoc1,
        OrderArg::Otoc2 => OtocOrder::Otoc2,
    };
    let circuits_dir = a.out.join("circuits");
    fs::create_dir_all(&circuits_dir)?;
    let built: Vec<(usize, OtocCircuit)> =
        (0..spec.num_instances).into_par_iter().map(|i| build_pruned_instance(&spec, order, i).map(|c| (i, c))).collect::<std::result::Result<_, _>>()?;
    let mut instances = Vec::with_capacity(built.len());
    for (i, c) in &built {
        let file = format!("circuits/instance_{i:04}.json");
        let body = c.to_json();
        fs::write(a.out.join(&file), &body)?;
        let (_, max_g) = max_gates_per_bond(c);
        instances.push(ManifestInstance { instance: *i, file, sha256: sha256_hex(body.as_bytes()), num_qubits: c.num_qubits(), max_gates_per_bond: max_g, two_qubit_gates: c.two_qubit_gate_count() });
    }
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        code_hash: code_hash(),
        ensemble_hash: ensemble_hash(&spec, order),
        v_mb_over_c: if a.b.is_none() && !a.select_b { Some(a.vmb.unwrap_or(0.6)) } else { None },
        spec,
        order,
        b_selection,
        instances,
    };
    fs::write(a.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let ns: Vec<usize> = manifest.instances.iter().map(|m| m.num_qubits).collect();
    let gs: Vec<usize> = manifest.instances.iter().map(|m| m.max_gates_per_bond).collect();
    println!(
        "ensemble {} : {} instances, m={} b={}, N={}..{}, max gates/bond={}..{}",
        manifest.ensemble_hash,
        ns.len(),
        manifest.spec.m_site,
        manifest.spec.b_site,
        ns.iter().min().unwrap_or(&0),
        ns.iter().max().unwrap_or(&0),
        gs.iter().min().unwrap_or(&0),
        gs.iter().max().unwrap_or(&0)
    );
    Ok(manifest)
}

/// One result row of a simulation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub ensemble_hash: String,
    pub instance: usize,
    pub method: String,
    pub d: Option<usize>,
    pub chi: Option<usize>,
    pub alpha: Option<f64>,
    pub exact: Option<f64>,
    pub approx: f64,
    pub fidelity: Option<f64>,
    pub discarded_weight: f64,
    pub runtime_s: f64,
    pub bp_iters: usize,
}

impl ResultRow {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.ensemble_hash,
            self.instance,
            self.method,
            self.d.map_or_else(|| if self.method == "exact" { String::new() } else { "inf".into() }, |v| v.to_string()),
            dim_str(self.chi),
            opt_f64(self.alpha),
            opt_f64(self.exact),
            self.approx,
            opt_f64(self.fidelity),
            self.discarded_weight,
            self.runtime_s,
            self.bp_iters
        )
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, s)?;
    Ok(())
}

fn parse_opt_dim(s: &str) -> Result<Option<usize>> {
    match s {
        "inf" | "" => Ok(None),
        v => Ok(Some(v.parse()?)),
    }
}

fn parse_opt_f64(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        Ok(Some(s.parse()?))
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        bail!("unexpected header in {}", path.display());
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let r = rec?;
        rows.push(ResultRow {
            ensemble_hash: r[0].to_string(),
            instance: r[1].parse()?,
            method: r[2].to_string(),
            d: parse_opt_dim(&r[3])?,
            chi: parse_opt_dim(&r[4])?,
            alpha: parse_opt_f64(&r[5])?,
            exact: parse_opt_f64(&r[6])?,
            approx: r[7].parse()?,
            fidelity: parse_opt_f64(&r[8])?,
            discarded_weight: r[9].parse()?,
            runtime_s: r[10].parse()?,
            bp_iters: r[11].parse()?,
        });
    }
    Ok(rows)
}

struct Oracle {
    state: Option<StateVector>,
    value: Option<f64>,
}

fn oracle(c: &OtocCircuit, max_qubits: usize) -> Result<Oracle> {
    if c.num_qubits() > max_qubits {
        return Ok(Oracle { state: None, value: None });
    }
    let psi = evolve_exact_with_guard(c, max_qubits)?;
    let value = psi.expectation_z(c.m_site)?;
    Ok(Oracle { state: Some(psi), value: Some(value) })
}

fn peps_value(p: &Peps, site: Site, chi: Option<usize>, max_elements: usize) -> Result<f64> {
    match chi {
        None => match contract_exact(p, site) {
            Ok((v, _)) => Ok(v),
            Err(ExtractionError::SizeGuard { .. }) => Ok(contract_exact_double_layer(p, site)?.0),
            Err(e) => Err(e.into()),
        },
        Some(chi) => Ok(contract_bmps(p, site, &BmpsConfig { max_elements, ..BmpsConfig::new(chi) })?.expectation),
    }
}

fn peps_fidelity(p: &Peps, o: &Oracle, max_elements: usize) -> Option<f64> {
    let psi = o.state.as_ref()?;
    let sv = peps_to_statevector(p, max_elements).ok()?;
    fidelity(psi, &sv).ok()
}

fn bp_config(a: &RunArgs, d: usize) -> BpConfig {
    BpConfig { sv_cutoff: a.sv_cutoff, bp_tolerance: a.bp_tolerance, bp_max_iters: a.bp_max_iters, ..BpConfig::with_max_d(d) }
}

fn run_instance(a: &RunArgs, m: &Manifest, c: &OtocCircuit) -> Result<Vec<ResultRow>> {
    let o = oracle(c, a.exact_max_qubits)?;
    let base = ResultRow {
        ensemble_hash: m.ensemble_hash.clone(),
        instance: c.instance,
        method: a.method.tag().into(),
        d: None,
        chi: None,
        alpha: m.alpha(),
        exact: o.value,
        approx: 0.0,
        fidelity: None,
        discarded_weight: 0.0,
        runtime_s: 0.0,
        bp_iters: 0,
    };
    let clock = |t: Instant| if a.timing { t.elapsed().as_secs_f64() } else { 0.0 };
    let mut rows = Vec::new();
    match a.method {
        Method::Exact => {
            let t = Instant::now();
            let v = o.value.ok_or_else(|| anyhow!("instance {} has {} qubits, above the exact guard", c.instance, c.num_qubits()))?;
            rows.push(ResultRow { approx: v, fidelity: Some(1.0), runtime_s: clock(t), ..base });
        }
        Method::Mps => {
            for &d in &a.bond_dims.0 {
                let t = Instant::now();
                let (mps, diag) = evolve_mps(c, d.unwrap_or(usize::MAX), a.sv_cutoff)?;
                let v = mps.expectation_z(c.m_site)?;
                let runtime = clock(t);
                let f = o.state.as_ref().and_then(|psi| mps.to_statevector().ok().and_then(|sv| fidelity(psi, &sv).ok()));
                rows.push(ResultRow { d, approx: v, fidelity: f, discarded_weight: diag.total_discarded_weight, runtime_s: runtime, ..base.clone() });
            }
        }
        Method::PepsBp => {
            for &d in &a.bond_dims.0 {
                let t = Instant::now();
                let (p, _, diag) = match d {
                    Some(d) => evolve_peps_bp(c, &bp_config(a, d), a.resync)?,
                    None => evolve_peps_untruncated(c, a.sv_cutoff)?,
                };
                let evolve_time = clock(t);
                let f = peps_fidelity(&p, &o, a.max_elements);
                for &chi in &a.chi.0 {
                    let t = Instant::now();
                    let v = peps_value(&p, c.m_site, chi, a.max_elements)?;
                    rows.push(ResultRow {
                        d,
                        chi,
                        approx: v,
                        fidelity: f,
                        discarded_weight: diag.total_discarded_weight,
                        runtime_s: evolve_time + clock(t),
                        bp_iters: diag.bp_iterations,
                        ..base.clone()
                    });
                }
            }
        }
        Method::PepsUntruncatedFinal => {
            let t = Instant::now();
            let (p0, m0, diag) = evolve_peps_untruncated(c, a.sv_cutoff)?;
            let evolve_time = clock(t);
            for &d in &a.bond_dims.0 {
                let t = Instant::now();
                let mut p = p0.clone();
                let mut msgs: MessageSet = m0.clone();
                let discarded = match d {
                    Some(d) => final_truncate_bp(&mut p, &mut msgs, &bp_config(a, d))?,
                    None => 0.0,
                };
                let trunc_time = clock(t);
                let f = peps_fidelity(&p, &o, a.max_elements);
                for &chi in &a.chi.0 {
                    let t = Instant::now();
                    let v = peps_value(&p, c.m_site, chi, a.max_elements)?;
                    rows.push(ResultRow {
                        d,
                        chi,
                        approx: v,
                        fidelity: f,
                        discarded_weight: discarded,
                        runtime_s: evolve_time + trunc_time + clock(t),
                        bp_iters: diag.bp_iterations,
                        ..base.clone()
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Simulates every instance (in parallel) and writes rows sorted by
/// (instance, D, χ).
pub fn cmd_run(a: &RunArgs) -> Result<Vec<ResultRow>> {
    let m = Manifest::load(&a.ensemble)?;
    let circuits = m.load_circuits(&a.ensemble)?;
    let per: Vec<Vec<ResultRow>> = circuits.par_iter().map(|c| run_instance(a, &m, c)).collect::<Result<_>>()?;
    let rows: Vec<ResultRow> = per.into_iter().flatten().collect();
    write_results(&a.out, &rows)?;
    Ok(rows)
}

type CellKey = (String, Option<usize>, Option<usize>);

fn dim_key(d: Option<usize>) -> usize {
    d.unwrap_or(usize::MAX)
}

/// Summary statistics of one (method, D, χ) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub method: String,
    pub d: Option<usize>,
    pub chi: Option<usize>,
    pub instances: usize,
    pub snr: Option<f64>,
    pub bootstrap_mean: Option<f64>,
    pub bootstrap_std: Option<f64>,
    pub mean_abs_error: f64,
    pub mean_infidelity: Option<f64>,
}

pub fn summarize(rows: &[ResultRow], batches: usize, batch_size: usize, seed: u64) -> Result<Vec<CellSummary>> {
    let mut cells: BTreeMap<(String, usize, usize), (CellKey, Vec<&ResultRow>)> = BTreeMap::new();
    for r in rows {
        cells.entry((r.method.clone(), dim_key(r.d), dim_key(r.chi))).or_insert_with(|| ((r.method.clone(), r.d, r.chi), Vec::new())).1.push(r);
    }
    let mut out = Vec::new();
    for ((method, d, chi), rs) in cells.into_values() {
        let with_oracle: Vec<&&ResultRow> = rs.iter().filter(|r| r.exact.is_some()).collect();
        let records: Vec<InstanceRecord> = with_oracle
            .iter()
            .map(|r| InstanceRecord {
                instance: r.instance,
                exact: r.exact.unwrap_or(f64::NAN),
                approx: r.approx,
                method: r.method.clone(),
                d: r.d,
                chi: r.chi,
                runtime_s: r.runtime_s,
                discarded_weight: r.discarded_weight,
                fidelity: r.fidelity,
            })
            .collect();
        let ens = EnsembleResults::new("", records)?;
        let s = if ens.len() >= 2 { snr(&ens.exact(), &ens.approx()).ok() } else { None };
        let boot = if ens.len() >= batch_size.max(2) { bootstrap_snr(&ens, batches, batch_size, seed).ok() } else { None };
        out.push(CellSummary {
            method,
            d,
            chi,
            instances: ens.len(),
            snr: s,
            bootstrap_mean: boot.as_ref().map(|b| b.mean),
            bootstrap_std: boot.as_ref().map(|b| b.std),
            mean_abs_error: ens.mean_abs_error(),
            mean_infidelity: ens.mean_infidelity(),
        });
    }
    Ok(out)
}

/// Writes `summary.csv`, one `snr_<method>.csv` heatmap per method,
/// `required_d.csv` and `fits.csv` into the output directory.
pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.results {
        rows.extend(read_results(p)?);
    }
    if rows.is_empty() {
        bail!("no result rows to report");
    }
    let cells = summarize(&rows, a.batches, a.batch_size, a.seed)?;
    fs::create_dir_all(&a.out)?;

    let mut s = String::from("method,D,chi,instances,snr,bootstrap_mean,bootstrap_std,mean_abs_error,mean_infidelity\n");
    for c in &cells {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.method,
            dim_str(c.d),
            dim_str(c.chi),
            c.instances,
            opt_f64(c.snr),
            opt_f64(c.bootstrap_mean),
            opt_f64(c.bootstrap_std),
            c.mean_abs_error,
            opt_f64(c.mean_infidelity)
        )?;
    }
    fs::write(a.out.join("summary.csv"), &s)?;
    print!("{s}");
    if let Some(n) = cells.iter().map(|c| c.instances).filter(|&n| n >= 3).max() {
        println!("uncorrelated SNR baseline at m={n}: {}", snr_uncorrelated_baseline(n)?);
    }

    let mut by_method: BTreeMap<&str, Vec<&CellSummary>> = BTreeMap::new();
    for c in &cells {
        by_method.entry(c.method.as_str()).or_default().push(c);
    }
    for (method, cs) in &by_method {
        let mut chis: Vec<usize> = cs.iter().map(|c| dim_key(c.chi)).collect();
        chis.sort_unstable();
        chis.dedup();
        let mut ds: Vec<usize> = cs.iter().map(|c| dim_key(c.d)).collect();
        ds.sort_unstable();
        ds.dedup();
        let label = |k: usize| if k == usize::MAX { "inf".to_string() } else { k.to_string() };
        let mut h = String::from("D");
        for &chi in &chis {
            write!(h, ",{}", label(chi))?;
        }
        h.push('\n');
        for &d in &ds {
            h.push_str(&label(d));
            for &chi in &chis {
                let v = cs.iter().find(|c| dim_key(c.d) == d && dim_key(c.chi) == chi).and_then(|c| c.snr);
                write!(h, ",{}", opt_f64(v))?;
            }
            h.push('\n');
        }
        fs::write(a.out.join(format!("snr_{method}.csv")), h)?;
    }

    let gate_pred = match &a.ensemble {
        Some(dir) => {
            let m = Manifest::load(dir)?;
            let g = m.instances.iter().map(|i| i.max_gates_per_bond).max().unwrap_or(0);
            let base: f64 = if m.spec.geometry.is_line() { 2.0 } else { 4.0 };
            Some((g, base.powi(g as i32)))
        }
        None => None,
    };
    let mut req = String::from("method,chi,target,required_D,max_gates_per_bond,gate_count_D\n");
    let mut fits = String::from("method,chi,quantity,rate,prefactor,r2\n");
    for (method, cs) in &by_method {
        let mut by_chi: BTreeMap<usize, Vec<&CellSummary>> = BTreeMap::new();
        for c in cs.iter().filter(|c| c.d.is_some()) {
            by_chi.entry(dim_key(c.chi)).or_default().push(c);
        }
        for (chi, mut col) in by_chi {
            col.sort_by_key(|c| dim_key(c.d));
            let chi_s = if chi == usize::MAX { "inf".to_string() } else { chi.to_string() };
            let pts: Vec<(f64, f64)> = col.iter().filter_map(|c| c.snr.map(|s| (c.d.unwrap_or(0) as f64, s))).collect();
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().cloned().unzip();
            for &target in &a.targets {
                let r = required_d_for_target(&xs, &ys, target).ok();
                let (g, gd) = gate_pred.map_or((String::new(), String::new()), |(g, d)| (g.to_string(), d.to_string()));
                writeln!(req, "{method},{chi_s},{target},{},{g},{gd}", opt_f64(r))?;
            }
            if let Ok(f) = fit_exponential(&xs, &ys) {
                writeln!(fits, "{method},{chi_s},snr,{},{},{}", f.rate, f.prefactor, f.r2)?;
            }
            let inf: Vec<(f64, f64)> = col.iter().filter_map(|c| c.mean_infidelity.filter(|v| *v > 0.0).map(|v| (c.d.unwrap_or(0) as f64, v))).collect();
            let (xi, yi): (Vec<f64>, Vec<f64>) = inf.into_iter().unzip();
            if let Ok(f) = fit_exponential(&xi, &yi) {
                writeln!(fits, "{method},{chi_s},infidelity,{},{},{}", f.rate, f.prefactor, f.r2)?;
            }
        }
    }
    fs::write(a.out.join("required_d.csv"), req)?;
    fs::write(a.out.join("fits.csv"), fits)?;
    Ok(())
}
