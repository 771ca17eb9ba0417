//! Constraint sets: membership tests and, where the geometry allows, the exact
//! Euclidean set distance as a differentiable batch op.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, OracleFailure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum ConstraintSet {
    /// Axis-aligned box `lo <= x <= hi`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `inner <= |x_i| <= outer` for both coordinates and `x1 x2 > 0`:
    /// the boxes `[inner, outer]^2` and `[-outer, -inner]^2`.
    TwoBoxes { inner: f64, outer: f64 },
    L2Ball { dim: usize, radius: f64 },
    /// `normal . x + offset = 0`, membership up to distance `tol`.
    Hyperplane {
        normal: Vec<f64>,
        offset: f64,
        tol: f64,
    },
    External(Arc<ExternalOracle>),
}

impl ConstraintSet {
    pub fn new_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<ConstraintSet> {
        let c = ConstraintSet::Box { lo, hi };
        c.validate()?;
        Ok(c)
    }

    pub fn two_boxes(inner: f64, outer: f64) -> Result<ConstraintSet> {
        let c = ConstraintSet::TwoBoxes { inner, outer };
        c.validate()?;
        Ok(c)
    }

    pub fn ball(dim: usize, radius: f64) -> Result<ConstraintSet> {
        let c = ConstraintSet::L2Ball { dim, radius };
        c.validate()?;
        Ok(c)
    }

    pub fn hyperplane(normal: Vec<f64>, offset: f64, tol: f64) -> Result<ConstraintSet> {
        let c = ConstraintSet::Hyperplane {
            normal,
            offset,
            tol,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn external(oracle: ExternalOracle) -> ConstraintSet {
        ConstraintSet::External(Arc::new(oracle))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self {
            ConstraintSet::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return bad(format!("box bounds of length {} and {}", lo.len(), hi.len()));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                    return bad("box needs lo < hi componentwise".into());
                }
            }
            ConstraintSet::TwoBoxes { inner, outer } => {
                if !(0.0 <= *inner && inner < outer) {
                    return bad(format!("two boxes need 0 <= inner < outer, got {inner}, {outer}"));
                }
            }
            ConstraintSet::L2Ball { dim, radius } => {
                if *dim == 0 || !(*radius > 0.0) {
                    return bad(format!("ball needs d >= 1 and radius > 0, got {dim}, {radius}"));
                }
            }
            ConstraintSet::Hyperplane { normal, tol, offset } => {
                let n2: f64 = normal.iter().map(|v| v * v).sum();
                if normal.is_empty() || !(n2 > 0.0) || !offset.is_finite() {
                    return bad("hyperplane needs a nonzero normal".into());
                }
                if !(*tol >= 0.0) {
                    return bad(format!("hyperplane tolerance must be >= 0, got {tol}"));
                }
            }
            ConstraintSet::External(o) => {
                if o.dim == 0 {
                    return bad("oracle dimension must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintSet::Box { .. } => "box",
            ConstraintSet::TwoBoxes { .. } => "two_boxes",
            ConstraintSet::L2Ball { .. } => "ball",
            ConstraintSet::Hyperplane { .. } => "hyperplane",
            ConstraintSet::External(_) => "external_oracle",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConstraintSet::Box { lo, .. } => lo.len(),
            ConstraintSet::TwoBoxes { .. } => 2,
            ConstraintSet::L2Ball { dim, .. } => *dim,
            ConstraintSet::Hyperplane { normal, .. } => normal.len(),
            ConstraintSet::External(o) => o.dim,
        }
    }

    pub fn has_distance(&self) -> bool {
        !matches!(self, ConstraintSet::External(_))
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::shape(
                "constraint",
                format!("{} expects d = {}, got {got}", self.name(), self.dim()),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        self.check_dim(x.len())?;
        Ok(match self {
            ConstraintSet::Box { lo, hi } => {
                x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| l <= v && v <= h)
            }
            ConstraintSet::TwoBoxes { inner, outer } => {
                let ok = |v: f64| *inner <= v.abs() && v.abs() <= *outer;
                ok(x[0]) && ok(x[1]) && x[0] * x[1] > 0.0
            }
            ConstraintSet::L2Ball { radius, .. } => norm(x) <= *radius,
            ConstraintSet::Hyperplane { tol, .. } => self.distance_value(x)? <= *tol,
            ConstraintSet::External(o) => {
                let t = Tensor::from_parts(vec![1, x.len()], x.to_vec());
                o.query(&t)?[0]
            }
        })
    }

    /// Membership of every row of `x: [B, d]`. An external oracle receives the
    /// whole batch in one exchange.
    pub fn contains_batch(&self, x: &Tensor) -> Result<Vec<bool>> {
        if x.rank() != 2 {
            return Err(Error::shape("constraint", format!("batch of shape {:?}", x.shape())));
        }
        self.check_dim(x.cols())?;
        if let ConstraintSet::External(o) = self {
            return o.query(x);
        }
        (0..x.rows()).map(|r| self.contains(x.row(r))).collect()
    }

    /// Exact Euclidean distance `inf_{z in C} |x - z|`, zero inside.
    pub fn distance_value(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(match self {
            ConstraintSet::Box { lo, hi } => box_distance(x, lo, hi),
            ConstraintSet::TwoBoxes { inner, outer } => {
                let (a, b) = self.two_box_distances(x, *inner, *outer);
                a.min(b)
            }
            ConstraintSet::L2Ball { radius, .. } => (norm(x) - radius).max(0.0),
            ConstraintSet::Hyperplane { normal, offset, .. } => {
                let r: f64 = normal.iter().zip(x).map(|(n, v)| n * v).sum::<f64>() + offset;
                r.abs() / norm(normal)
            }
            ConstraintSet::External(_) => {
                return Err(Error::DistanceUnavailable(self.name().into()))
            }
        })
    }

    fn two_box_distances(&self, x: &[f64], inner: f64, outer: f64) -> (f64, f64) {
        (
            box_distance(x, &[inner, inner], &[outer, outer]),
            box_distance(x, &[-outer, -outer], &[-inner, -inner]),
        )
    }

    /// Per-row distance of `x: [B, d]` as a `[B]` Var on `tape`.
    ///
    /// For two boxes the smaller box distance is taken row by row, with ties
    /// going to the first box.
    pub fn distance(&self, tape: &Tape, x: &Var) -> Result<Var> {
        if x.value().rank() != 2 {
            return Err(Error::shape("distance", format!("batch of shape {:?}", x.shape())));
        }
        self.check_dim(x.value().cols())?;
        match self {
            ConstraintSet::Box { lo, hi } => box_distance_var(tape, x, lo, hi),
            ConstraintSet::TwoBoxes { inner, outer } => {
                let (i, o) = (*inner, *outer);
                let d1 = box_distance_var(tape, x, &[i, i], &[o, o])?;
                let d2 = box_distance_var(tape, x, &[-o, -o], &[-i, -i])?;
                let first: Vec<f64> = d1
                    .value()
                    .data()
                    .iter()
                    .zip(d2.value().data())
                    .map(|(a, b)| if a <= b { 1.0 } else { 0.0 })
                    .collect();
                let second = first.iter().map(|m| 1.0 - m).collect();
                let n = first.len();
                let a = tape.mul(&d1, &Var::constant(Tensor::from_parts(vec![n], first)))?;
                let b = tape.mul(&d2, &Var::constant(Tensor::from_parts(vec![n], second)))?;
                tape.add(&a, &b)
            }
            ConstraintSet::L2Ball { radius, .. } => {
                let r = tape.sqrt(&tape.sum_rows(&tape.square(x)?)?)?;
                tape.relu(&tape.add_scalar(&r, -radius)?)
            }
            ConstraintSet::Hyperplane { normal, offset, .. } => {
                let d = normal.len();
                let n = Var::constant(Tensor::from_parts(vec![d, 1], normal.clone()));
                let rows = x.value().rows();
                let dot = tape.reshape(&tape.matmul(x, &n)?, vec![rows])?;
                let r = tape.abs(&tape.add_scalar(&dot, *offset)?)?;
                tape.scale(&r, 1.0 / norm(normal))
            }
            ConstraintSet::External(_) => Err(Error::DistanceUnavailable(self.name().into())),
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn box_distance(x: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| {
            let e = (l - v).max(0.0) + (v - h).max(0.0);
            e * e
        })
        .sum::<f64>()
        .sqrt()
}

// sqrt(sum(relu(lo - x)^2 + relu(x - hi)^2)); at most one of the two is nonzero
fn box_distance_var(tape: &Tape, x: &Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
    let d = lo.len();
    let neg_lo = Var::constant(Tensor::from_parts(vec![d], lo.iter().map(|v| -v).collect()));
    let neg_hi = Var::constant(Tensor::from_parts(vec![d], hi.iter().map(|v| -v).collect()));
    let below = tape.relu(&tape.neg(&tape.broadcast_add(x, &neg_lo)?)?)?;
    let above = tape.relu(&tape.broadcast_add(x, &neg_hi)?)?;
    let sq = tape.add(&tape.square(&below)?, &tape.square(&above)?)?;
    tape.sqrt(&tape.sum_rows(&sq)?)
}

/// A membership oracle behind a child process (`sh -c <command>`).
///
/// Wire protocol: one request line per point, coordinates as comma-separated
/// decimals with 17 significant digits; the reply is one line per point,
/// `0` or `1`, in request order. A batch is written and flushed at once.
/// A failed exchange restarts the process; after `max_attempts` failures the
/// error carries the raw bytes received in the last attempt.
pub struct ExternalOracle {
    command: String,
    dim: usize,
    timeout: Duration,
    max_attempts: u32,
    process: Mutex<Option<OracleProcess>>,
}

impl fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalOracle")
            .field("command", &self.command)
            .field("dim", &self.dim)
            .field("timeout", &self.timeout)
            .field("max_attempts", &self.max_attempts)
            .finish()
    }
}

struct OracleProcess {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<Vec<u8>>,
}

impl OracleProcess {
    fn spawn(command: &str) -> std::io::Result<OracleProcess> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut buf = Vec::new();
                match reader.read_until(b'\n', &mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(_) => {
                        if tx.send(buf).is_err() {
                            break;
                        }
                    }
                }
            }
        });
        Ok(OracleProcess {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl Drop for OracleProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct Failure {
    kind: OracleFailure,
    detail: String,
    raw: Vec<u8>,
}

impl ExternalOracle {
    pub fn new(command: impl Into<String>, dim: usize) -> ExternalOracle {
        ExternalOracle {
            command: command.into(),
            dim,
            timeout: Duration::from_secs(10),
            max_attempts: 1,
            process: Mutex::new(None),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> ExternalOracle {
        self.timeout = timeout;
        self
    }

    pub fn with_max_attempts(mut self, attempts: u32) -> ExternalOracle {
        self.max_attempts = attempts.max(1);
        self
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    /// Membership bits for the rows of `x`, in order.
    pub fn query(&self, x: &Tensor) -> Result<Vec<bool>> {
        if x.rank() != 2 || x.cols() != self.dim {
            return Err(Error::shape(
                "oracle",
                format!("expects [B, {}], got {:?}", self.dim, x.shape()),
            ));
        }
        let mut guard = self.process.lock().unwrap_or_else(|p| p.into_inner());
        let mut last = None;
        for _ in 0..self.max_attempts {
            if guard.is_none() {
                match OracleProcess::spawn(&self.command) {
                    Ok(p) => *guard = Some(p),
                    Err(e) => {
                        last = Some(Failure {
                            kind: OracleFailure::Io,
                            detail: format!("spawn `{}`: {e}", self.command),
                            raw: Vec::new(),
                        });
                        continue;
                    }
                }
            }
            match exchange(guard.as_mut().unwrap(), x, self.timeout) {
                Ok(bits) => return Ok(bits),
                Err(f) => {
                    // the process state is unknown after a failure
                    *guard = None;
                    last = Some(f);
                }
            }
        }
        let f = last.expect("at least one attempt");
        Err(Error::Oracle {
            kind: f.kind,
            attempts: self.max_attempts,
            detail: f.detail,
            raw: f.raw,
        })
    }
}

fn request_text(x: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..x.rows() {
        let line: Vec<String> = x.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn exchange(p: &mut OracleProcess, x: &Tensor, timeout: Duration) -> Result<Vec<bool>, Failure> {
    // drop stale replies from an earlier batch
    while p.lines.try_recv().is_ok() {}
    let req = request_text(x);
    if let Err(e) = p.stdin.write_all(req.as_bytes()).and_then(|_| p.stdin.flush()) {
        return Err(Failure {
            kind: OracleFailure::ProcessExit,
            detail: format!("writing request: {e}"),
            raw: Vec::new(),
        });
    }
    let mut raw = Vec::new();
    let mut bits = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        match p.lines.recv_timeout(timeout) {
            Ok(line) => {
                raw.extend_from_slice(&line);
                let body = line.strip_suffix(b"\n").unwrap_or(&line);
                let body = body.strip_suffix(b"\r").unwrap_or(body);
                match body {
                    b"1" => bits.push(true),
                    b"0" => bits.push(false),
                    _ => {
                        return Err(Failure {
                            kind: OracleFailure::Malformed,
                            detail: format!("reply {i} is not `0` or `1`"),
                            raw,
                        })
                    }
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(Failure {
                    kind: OracleFailure::Timeout,
                    detail: format!("no reply for point {i} within {timeout:?}"),
                    raw,
                })
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Failure {
                    kind: OracleFailure::ProcessExit,
                    detail: format!("stdout closed after {i} of {} replies", x.rows()),
                    raw,
                })
            }
        }
    }
    Ok(bits)
}
