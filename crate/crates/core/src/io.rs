//! Instance and certificate files, generators, and the JSONL trace format.
//!
//! Instances are JSON documents:
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "n": 2,
//!   "m": 1,
//!   "objective": {"kind": "identity"},
//!   "constraints": [
//!     {"b": 1.0, "q": {"nrows": 2, "ncols": 1, "triplets": [[0, 0, 1.0]]}}
//!   ]
//! }
//! ```
//!
//! `objective` may also be `{"kind": "c_matrix", "lower": [..]}` or
//! `{"kind": "c_inv_sqrt", "lower": [..]}` with the row-major lower triangle,
//! and defaults to the identity when omitted. Constraint `i` is `Q_i Q_iᵀ`.
//!
//! Certificates refer to the normalized instance (identity objective,
//! `b = 1`): a packing certificate is `x` with `Σ x_i B_i ⪯ I`, a covering
//! certificate is `Y ⪰ 0` with `B_i • Y >= 1`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decision::{
    verify_covering, verify_packing, IterationRecord, OutcomeKind, RunInfo, TraceSink,
};
use crate::error::{PsdpError, Result};
use crate::linalg::{FactoredPSD, SparseFactor, SymMatrix};
use crate::normalize::{NormalizedInstance, Objective, RawConstraint, RawInstance};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Identity,
    CMatrix { lower: Vec<f64> },
    CInvSqrt { lower: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub nrows: usize,
    pub ncols: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub b: f64,
    pub q: FactorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFileUnchecked {
    format_version: u32,
    n: usize,
    m: usize,
    #[serde(default = "identity_objective")]
    objective: ObjectiveSpec,
    constraints: Vec<ConstraintSpec>,
}

fn identity_objective() -> ObjectiveSpec {
    ObjectiveSpec::Identity
}

/// Validated on deserialization, so semantic errors carry the position of
/// the offending document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceFileUnchecked")]
pub struct InstanceFile {
    pub format_version: u32,
    pub n: usize,
    pub m: usize,
    pub objective: ObjectiveSpec,
    pub constraints: Vec<ConstraintSpec>,
}

impl TryFrom<InstanceFileUnchecked> for InstanceFile {
    type Error = String;

    fn try_from(f: InstanceFileUnchecked) -> std::result::Result<Self, String> {
        if f.format_version != FORMAT_VERSION {
            return Err(format!("unsupported format_version {}", f.format_version));
        }
        if f.n == 0 {
            return Err("n must be positive".into());
        }
        if f.m != f.constraints.len() {
            return Err(format!("m = {} but {} constraints given", f.m, f.constraints.len()));
        }
        if f.m == 0 {
            return Err("at least one constraint is required".into());
        }
        let packed_len = f.n * (f.n + 1) / 2;
        match &f.objective {
            ObjectiveSpec::Identity => {}
            ObjectiveSpec::CMatrix { lower } | ObjectiveSpec::CInvSqrt { lower } => {
                if lower.len() != packed_len {
                    return Err(format!(
                        "objective lower triangle has {} entries, expected {packed_len}",
                        lower.len()
                    ));
                }
            }
        }
        for (i, c) in f.constraints.iter().enumerate() {
            if !(c.b > 0.0) {
                return Err(format!("constraint {i}: b must be positive, got {}", c.b));
            }
            if c.q.nrows != f.n {
                return Err(format!("constraint {i}: q has {} rows, expected {}", c.q.nrows, f.n));
            }
            SparseFactor::from_triplets(c.q.nrows, c.q.ncols, c.q.triplets.iter().copied())
                .map_err(|e| format!("constraint {i}: {e}"))?;
        }
        Ok(InstanceFile {
            format_version: f.format_version,
            n: f.n,
            m: f.m,
            objective: f.objective,
            constraints: f.constraints,
        })
    }
}

impl InstanceFile {
    pub fn from_raw(raw: &RawInstance) -> Self {
        let objective = match raw.objective() {
            Objective::Identity => ObjectiveSpec::Identity,
            Objective::Matrix(c) => ObjectiveSpec::CMatrix {
                lower: c.to_packed_lower(),
            },
            Objective::InvSqrt(c) => ObjectiveSpec::CInvSqrt {
                lower: c.to_packed_lower(),
            },
        };
        let constraints = raw
            .constraints()
            .iter()
            .map(|c| {
                let q = c.a.factor();
                ConstraintSpec {
                    b: c.b,
                    q: FactorSpec {
                        nrows: q.nrows(),
                        ncols: q.ncols(),
                        triplets: q.triplets().collect(),
                    },
                }
            })
            .collect();
        InstanceFile {
            format_version: FORMAT_VERSION,
            n: raw.dim(),
            m: raw.num_constraints(),
            objective,
            constraints,
        }
    }

    pub fn to_raw(&self) -> Result<RawInstance> {
        let objective = match &self.objective {
            ObjectiveSpec::Identity => Objective::Identity,
            ObjectiveSpec::CMatrix { lower } => {
                Objective::Matrix(SymMatrix::from_packed_lower(self.n, lower)?)
            }
            ObjectiveSpec::CInvSqrt { lower } => {
                Objective::InvSqrt(SymMatrix::from_packed_lower(self.n, lower)?)
            }
        };
        let constraints = self
            .constraints
            .iter()
            .map(|c| {
                let q = SparseFactor::from_triplets(c.q.nrows, c.q.ncols, c.q.triplets.iter().copied())?;
                Ok(RawConstraint {
                    a: FactoredPSD::new(q),
                    b: c.b,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        RawInstance::new(self.n, objective, constraints)
    }
}

pub fn parse_instance(text: &str) -> Result<RawInstance> {
    let file: InstanceFile = serde_json::from_str(text)?;
    file.to_raw()
}

/// Pretty-printed JSON; floats use the shortest representation that parses
/// back to the same bits.
pub fn write_instance(raw: &RawInstance) -> String {
    let mut s = serde_json::to_string_pretty(&InstanceFile::from_raw(raw)).expect("serializable");
    s.push('\n');
    s
}

/// SHA-256 of the compact canonical serialization, hex encoded.
pub fn instance_hash(raw: &RawInstance) -> String {
    let canonical = serde_json::to_vec(&InstanceFile::from_raw(raw)).expect("serializable");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    Identity,
    Basis,
    DiagonalLp,
    RandomFactored,
}

impl std::str::FromStr for GenKind {
    type Err = PsdpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(GenKind::Identity),
            "basis" => Ok(GenKind::Basis),
            "diagonal_lp" | "diagonal-lp" => Ok(GenKind::DiagonalLp),
            "random_factored" | "random-factored" => Ok(GenKind::RandomFactored),
            other => Err(PsdpError::InvalidParameter(format!("unknown instance kind `{other}`"))),
        }
    }
}

/// Density of the random factors.
pub const RANDOM_FACTOR_DENSITY: f64 = 0.3;

/// Deterministic test instances with identity objective and `b = 1`.
///
/// * `identity`: a single `A = I_n` (optimum 1); `m` is ignored.
/// * `basis`: `A_i = e_i e_iᵀ` for `i < n` (optimum `n`); `m` is ignored.
/// * `diagonal_lp`: `m` diagonal matrices with entries uniform in `(0.1, 2]`.
/// * `random_factored`: `m` square factors with 30% standard-normal entries.
pub fn gen_instance(kind: GenKind, n: usize, m: usize, seed: u64) -> Result<RawInstance> {
    if n == 0 {
        return Err(PsdpError::InvalidParameter("n must be positive".into()));
    }
    if matches!(kind, GenKind::DiagonalLp | GenKind::RandomFactored) && m == 0 {
        return Err(PsdpError::InvalidParameter("m must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<SparseFactor> = match kind {
        GenKind::Identity => vec![SparseFactor::identity(n)],
        GenKind::Basis => (0..n)
            .map(|i| SparseFactor::from_triplets(n, 1, [(i, 0, 1.0)]))
            .collect::<Result<_>>()?,
        GenKind::DiagonalLp => (0..m)
            .map(|_| {
                let trips: Vec<_> = (0..n)
                    .map(|r| (r, r, (2.0 - rng.random_range(0.0f64..1.9)).sqrt()))
                    .collect();
                SparseFactor::from_triplets(n, n, trips)
            })
            .collect::<Result<_>>()?,
        GenKind::RandomFactored => (0..m)
            .map(|i| {
                let mut trips = Vec::new();
                for c in 0..n {
                    for r in 0..n {
                        if rng.random_bool(RANDOM_FACTOR_DENSITY) {
                            let v: f64 = rng.sample(StandardNormal);
                            trips.push((r, c, v));
                        }
                    }
                }
                if trips.iter().all(|t| t.2 == 0.0) {
                    trips = vec![(i % n, 0, 1.0)];
                }
                SparseFactor::from_triplets(n, n, trips)
            })
            .collect::<Result<_>>()?,
    };
    let constraints = factors
        .into_iter()
        .map(|q| RawConstraint {
            a: FactoredPSD::new(q),
            b: 1.0,
        })
        .collect();
    RawInstance::new(n, Objective::Identity, constraints)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CertificateBody {
    Packing { x: Vec<f64> },
    /// Row-major lower triangle of `Y`.
    Covering { y_lower: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub format_version: u32,
    pub instance_hash: String,
    pub eps: f64,
    pub objective: f64,
    #[serde(flatten)]
    pub body: CertificateBody,
}

impl CertificateFile {
    pub fn packing(raw: &RawInstance, eps: f64, x: Vec<f64>) -> Self {
        CertificateFile {
            format_version: FORMAT_VERSION,
            instance_hash: instance_hash(raw),
            eps,
            objective: x.iter().sum(),
            body: CertificateBody::Packing { x },
        }
    }

    pub fn covering(raw: &RawInstance, eps: f64, y: &SymMatrix) -> Self {
        CertificateFile {
            format_version: FORMAT_VERSION,
            instance_hash: instance_hash(raw),
            eps,
            objective: y.trace(),
            body: CertificateBody::Covering {
                y_lower: y.to_packed_lower(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            CertificateBody::Packing { .. } => "packing",
            CertificateBody::Covering { .. } => "covering",
        }
    }
}

/// Outcome of checking a certificate against its instance.
#[derive(Clone, Debug, PartialEq)]
pub struct CertificateCheck {
    pub kind: &'static str,
    pub valid: bool,
    pub objective: f64,
    /// Packing: spectral violation. Covering: `min_i B_i • Y - 1`.
    pub margin: f64,
    pub reason: Option<String>,
}

/// Parses a certificate without checking it.
pub fn parse_certificate(text: &str) -> Result<CertificateFile> {
    Ok(serde_json::from_str(text)?)
}

/// Checks the hash, the recorded objective, and feasibility at `tol`.
pub fn check_certificate(
    raw: &RawInstance,
    norm: &NormalizedInstance,
    cert: &CertificateFile,
    tol: f64,
) -> Result<CertificateCheck> {
    let mut reason = None;
    if cert.instance_hash != instance_hash(raw) {
        reason = Some("instance hash does not match".to_string());
    }
    let shape_ok = match &cert.body {
        CertificateBody::Packing { x } => x.len() == norm.num_constraints(),
        CertificateBody::Covering { y_lower } => y_lower.len() == norm.dim() * (norm.dim() + 1) / 2,
    };
    if !shape_ok {
        return Ok(CertificateCheck {
            kind: cert.kind(),
            valid: false,
            objective: cert.objective,
            margin: f64::NAN,
            reason: reason.or_else(|| Some("certificate shape does not match the instance".into())),
        });
    }
    let (kind, feasible, objective, margin) = match &cert.body {
        CertificateBody::Packing { x } => {
            let c = verify_packing(norm, x, tol)?;
            ("packing", c.feasible, c.objective, c.violation)
        }
        CertificateBody::Covering { y_lower } => {
            let y = SymMatrix::from_packed_lower(norm.dim(), y_lower)?;
            let c = verify_covering(norm, &y, tol)?;
            ("covering", c.feasible, c.objective, c.min_slack)
        }
    };
    if reason.is_none() && !feasible {
        reason = Some(format!("{kind} point is not feasible at tolerance {tol:e}"));
    }
    if reason.is_none() && (objective - cert.objective).abs() > tol * objective.abs().max(1.0) {
        reason = Some(format!(
            "recorded objective {} differs from recomputed {objective}",
            cert.objective
        ));
    }
    Ok(CertificateCheck {
        kind,
        valid: reason.is_none(),
        objective,
        margin,
        reason,
    })
}

/// Parses and checks in one step; any failure is a `CertificateMismatch`.
pub fn load_certificate(
    text: &str,
    raw: &RawInstance,
    norm: &NormalizedInstance,
    tol: f64,
) -> Result<CertificateFile> {
    let cert = parse_certificate(text)?;
    let check = check_certificate(raw, norm, &cert, tol)?;
    match check.reason {
        None => Ok(cert),
        Some(r) => Err(PsdpError::CertificateMismatch(r)),
    }
}

/// One line of a JSONL trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub run: usize,
    pub goal: f64,
    pub n: usize,
    pub eps: f64,
    #[serde(rename = "B_size")]
    pub b_size: usize,
    #[serde(flatten)]
    pub record: IterationRecord,
    /// Packed lower triangle of `(1/ε) Σ δ_i A_i`; absent on a terminal
    /// infeasible iteration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<Vec<f64>>,
}

/// Streams iteration records as JSON lines. Write errors are held until
/// [`finish`](JsonlTraceWriter::finish).
pub struct JsonlTraceWriter<W: Write> {
    out: W,
    run: usize,
    info: Option<RunInfo>,
    error: Option<std::io::Error>,
}

impl<W: Write> JsonlTraceWriter<W> {
    pub fn new(out: W) -> Self {
        JsonlTraceWriter {
            out,
            run: 0,
            info: None,
            error: None,
        }
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> TraceSink for JsonlTraceWriter<W> {
    fn begin_run(&mut self, info: &RunInfo) {
        self.info = Some(info.clone());
    }

    fn record(&mut self, rec: &IterationRecord, gain: Option<&SymMatrix>) {
        if self.error.is_some() {
            return;
        }
        let (goal, n, eps) = self
            .info
            .as_ref()
            .map_or((1.0, 0, 0.0), |i| (i.goal, i.n, i.eps));
        let line = TraceLine {
            run: self.run,
            goal,
            n,
            eps,
            b_size: rec.b_set.len(),
            record: rec.clone(),
            gain: gain.map(|g| g.to_packed_lower()),
        };
        let res = serde_json::to_writer(&mut self.out, &line)
            .map_err(std::io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    fn end_run(&mut self, _kind: OutcomeKind) {
        self.run += 1;
    }
}

/// Reads a JSONL trace; blank lines are skipped. Errors report the line.
pub fn read_trace(text: &str) -> Result<Vec<TraceLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<TraceLine>(l).map_err(|e| PsdpError::Parse {
                line: i + 1,
                column: e.column(),
                message: PsdpError::from(e).to_string(),
            })
        })
        .collect()
}

/// Gain matrices of each run, in order, as `(n, gains)`.
pub fn trace_gain_sequences(lines: &[TraceLine]) -> Result<Vec<(usize, Vec<SymMatrix>)>> {
    let mut runs: Vec<(usize, usize, Vec<SymMatrix>)> = Vec::new();
    for l in lines {
        if runs.last().map(|r| r.0) != Some(l.run) {
            runs.push((l.run, l.n, Vec::new()));
        }
        if let Some(g) = &l.gain {
            let run = runs.last_mut().expect("pushed above");
            run.2.push(SymMatrix::from_packed_lower(l.n, g)?);
        }
    }
    Ok(runs.into_iter().map(|(_, n, g)| (n, g)).collect())
}
