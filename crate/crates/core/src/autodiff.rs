//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations in execution order; [`Tape::backward`]
//! replays them in reverse, visiting every node once. Operations whose inputs
//! are all untracked produce untracked (constant) results and are not recorded,
//! so the same forward code serves both training and inference.
//!
//! Every recorded value is checked for finiteness: a NaN or infinity aborts the
//! operation with [`Error::NonFinite`] naming the op.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_nt, matmul_tn_acc, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub type NodeId = usize;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// A value, optionally tracked by a tape node.
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<(u64, NodeId)>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node.map(|(_, id)| id))
            .finish()
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node.map(|(_, id)| id)
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, no tape node: contributes no gradient downstream.
    pub fn detach(&self) -> Var {
        Var {
            value: Rc::clone(&self.value),
            node: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Matmul,
    Affine,
    Tanh,
    Relu,
    Sum,
    Mean,
    Square,
    ScalarMul,
    AddScalar,
    Concat,
    Slice,
    BroadcastAdd,
    Exp,
    Log,
    Sqrt,
    Abs,
    Sin,
    Cos,
    SumRows,
    Reshape,
    GatherRows,
    ClampMin,
    GaussianLogPdf,
}

/// Deliberate gradient corruption, used only by the gradient-check mutation
/// fixture to prove the checks can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    FlipGaussianLogPdfSign,
}

enum Aux {
    None,
    Scalar(f64),
    Range { start: usize, end: usize },
    Indices(Vec<usize>),
    Widths(Vec<usize>),
    /// Constant action for the Gaussian log-density.
    Action(Rc<Tensor>),
}

struct Node {
    kind: OpKind,
    inputs: Vec<Var>,
    out: Rc<Tensor>,
    aux: Aux,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        let (tape, id) = v.node?;
        if tape != self.tape_id {
            return None;
        }
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    fault: Option<GradFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: GradFault) -> Tape {
        Tape {
            fault: Some(fault),
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        let out = Rc::new(value);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            kind: OpKind::Leaf,
            inputs: Vec::new(),
            out: Rc::clone(&out),
            aux: Aux::None,
        });
        Var {
            value: out,
            node: Some((self.id, id)),
        }
    }

    fn check_owned(&self, v: &Var) -> Result<()> {
        match v.node {
            Some((tape, _)) if tape != self.id => Err(Error::InvalidArgument(
                "variable belongs to a different tape".into(),
            )),
            _ => Ok(()),
        }
    }

    fn record(&self, kind: OpKind, inputs: &[&Var], value: Tensor, aux: Aux) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("{kind:?} (input shapes {:?})", shapes(inputs)),
            });
        }
        for v in inputs {
            self.check_owned(v)?;
        }
        let out = Rc::new(value);
        if !inputs.iter().any(|v| v.is_tracked()) {
            return Ok(Var {
                value: out,
                node: None,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            kind,
            inputs: inputs.iter().map(|v| (*v).clone()).collect(),
            out: Rc::clone(&out),
            aux,
        });
        Ok(Var {
            value: out,
            node: Some((self.id, id)),
        })
    }

    fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        Tape::same_shape("add", a, b)?;
        let v = a.value().zip_map(b.value(), |x, y| x + y);
        self.record(OpKind::Add, &[a, b], v, Aux::None)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        Tape::same_shape("sub", a, b)?;
        let v = a.value().zip_map(b.value(), |x, y| x - y);
        self.record(OpKind::Sub, &[a, b], v, Aux::None)
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        Tape::same_shape("mul", a, b)?;
        let v = a.value().zip_map(b.value(), |x, y| x * y);
        self.record(OpKind::Mul, &[a, b], v, Aux::None)
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k, n) = matmul_dims("matmul", a, b)?;
        let mut out = vec![0.0; m * n];
        matmul_acc(a.value().data(), b.value().data(), &mut out, m, k, n);
        self.record(OpKind::Matmul, &[a, b], Tensor::from_parts(vec![m, n], out), Aux::None)
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn affine(&self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let (m, k, n) = matmul_dims("affine", x, w)?;
        if b.shape() != [n] {
            return Err(Error::shape(
                "affine",
                format!("bias {:?} for output width {n}", b.shape()),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(b.value().data());
        }
        matmul_acc(x.value().data(), w.value().data(), &mut out, m, k, n);
        self.record(OpKind::Affine, &[x, w, b], Tensor::from_parts(vec![m, n], out), Aux::None)
    }

    pub fn tanh(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[a], a.value().map(f64::tanh), Aux::None)
    }

    pub fn relu(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Relu, &[a], a.value().map(|x| x.max(0.0)), Aux::None)
    }

    pub fn exp(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Exp, &[a], a.value().map(f64::exp), Aux::None)
    }

    pub fn log(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Log, &[a], a.value().map(f64::ln), Aux::None)
    }

    /// Square root; the gradient at zero is taken as zero.
    pub fn sqrt(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Sqrt, &[a], a.value().map(f64::sqrt), Aux::None)
    }

    /// Absolute value; the gradient at zero is taken as zero.
    pub fn abs(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Abs, &[a], a.value().map(f64::abs), Aux::None)
    }

    pub fn sin(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Sin, &[a], a.value().map(f64::sin), Aux::None)
    }

    pub fn cos(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Cos, &[a], a.value().map(f64::cos), Aux::None)
    }

    pub fn square(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Square, &[a], a.value().map(|x| x * x), Aux::None)
    }

    pub fn scale(&self, a: &Var, c: f64) -> Result<Var> {
        self.record(OpKind::ScalarMul, &[a], a.value().map(|x| x * c), Aux::Scalar(c))
    }

    pub fn neg(&self, a: &Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: &Var, c: f64) -> Result<Var> {
        self.record(OpKind::AddScalar, &[a], a.value().map(|x| x + c), Aux::None)
    }

    /// `max(a, floor)` elementwise; gradient passes only where `a > floor`.
    pub fn clamp_min(&self, a: &Var, floor: f64) -> Result<Var> {
        self.record(
            OpKind::ClampMin,
            &[a],
            a.value().map(|x| x.max(floor)),
            Aux::Scalar(floor),
        )
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self, a: &Var) -> Result<Var> {
        self.record(OpKind::Sum, &[a], Tensor::scalar(a.value().sum()), Aux::None)
    }

    pub fn mean(&self, a: &Var) -> Result<Var> {
        let n = a.value().len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(a.value().sum() / n as f64);
        self.record(OpKind::Mean, &[a], v, Aux::None)
    }

    /// Row sums of a matrix: `[m, n] -> [m]`.
    pub fn sum_rows(&self, a: &Var) -> Result<Var> {
        if a.value().rank() != 2 {
            return Err(Error::shape("sum_rows", format!("{:?}", a.shape())));
        }
        let m = a.value().rows();
        let v: Vec<f64> = (0..m).map(|i| a.value().row(i).iter().sum()).collect();
        self.record(OpKind::SumRows, &[a], Tensor::from_parts(vec![m], v), Aux::None)
    }

    /// Adds a row vector `b[n]` to every row of `a[m, n]`.
    pub fn broadcast_add(&self, a: &Var, b: &Var) -> Result<Var> {
        let av = a.value();
        if av.rank() != 2 || b.shape() != [av.cols()] {
            return Err(Error::shape(
                "broadcast_add",
                format!("{:?} + {:?}", a.shape(), b.shape()),
            ));
        }
        let n = av.cols();
        let bv = b.value().data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        self.record(
            OpKind::BroadcastAdd,
            &[a, b],
            Tensor::from_parts(av.shape().to_vec(), data),
            Aux::None,
        )
    }

    /// Concatenates along the last axis. All parts must be rank 1, or all
    /// rank 2 with equal row counts.
    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let rank = first.value().rank();
        if rank == 0 || rank > 2 || parts.iter().any(|p| p.value().rank() != rank) {
            return Err(Error::shape("concat", format!("shapes {:?}", shapes(parts))));
        }
        let rows = if rank == 2 { first.value().rows() } else { 1 };
        if parts.iter().any(|p| rank == 2 && p.value().rows() != rows) {
            return Err(Error::shape("concat", format!("row counts {:?}", shapes(parts))));
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.value().cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.value().row(r));
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        self.record(
            OpKind::Concat,
            parts,
            Tensor::from_parts(shape, data),
            Aux::Widths(widths),
        )
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let av = a.value();
        let rank = av.rank();
        if rank == 0 || rank > 2 || start > end || end > av.cols() {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} of {:?}", a.shape()),
            ));
        }
        let rows = if rank == 2 { av.rows() } else { 1 };
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let shape = if rank == 2 {
            vec![rows, end - start]
        } else {
            vec![end - start]
        };
        self.record(
            OpKind::Slice,
            &[a],
            Tensor::from_parts(shape, data),
            Aux::Range { start, end },
        )
    }

    pub fn reshape(&self, a: &Var, shape: Vec<usize>) -> Result<Var> {
        let v = a.value().reshape(shape)?;
        self.record(OpKind::Reshape, &[a], v, Aux::None)
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&self, a: &Var, idx: &[usize]) -> Result<Var> {
        let av = a.value();
        if av.rank() != 2 || idx.iter().any(|&i| i >= av.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("indices out of range for {:?}", a.shape()),
            ));
        }
        let v = av.select_rows(idx);
        self.record(OpKind::GatherRows, &[a], v, Aux::Indices(idx.to_vec()))
    }

    /// Per-row diagonal Gaussian log-density `log N(u_b | mu_b, diag(sigma^2))`.
    ///
    /// `u` is a constant action `[B, d]`; `mu` is `[B, d]`; `sigma` is either
    /// shared `[d]` or per-row `[B, d]`. Returns `[B]`.
    pub fn gaussian_log_pdf_rows(&self, u: &Tensor, mu: &Var, sigma: &Var) -> Result<Var> {
        let mv = mu.value();
        if mv.rank() != 2 || u.shape() != mv.shape() {
            return Err(Error::shape(
                "gaussian_log_pdf",
                format!("action {:?} vs mean {:?}", u.shape(), mu.shape()),
            ));
        }
        let (b, d) = (mv.rows(), mv.cols());
        let shared = match sigma.shape() {
            [n] if *n == d => true,
            [r, c] if *r == b && *c == d => false,
            s => {
                return Err(Error::shape(
                    "gaussian_log_pdf",
                    format!("sigma {s:?} for mean {:?}", mu.shape()),
                ))
            }
        };
        let sv = sigma.value().data();
        if let Some(s) = sv.iter().find(|&&s| s <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian_log_pdf requires sigma > 0, got {s}"
            )));
        }
        let mut out = Vec::with_capacity(b);
        for r in 0..b {
            let ur = u.row(r);
            let mr = mv.row(r);
            let sr = if shared { sv } else { &sv[r * d..(r + 1) * d] };
            let mut acc = 0.0;
            for j in 0..d {
                let z = (ur[j] - mr[j]) / sr[j];
                acc += -sr[j].ln() - HALF_LN_2PI - 0.5 * z * z;
            }
            out.push(acc);
        }
        self.record(
            OpKind::GaussianLogPdf,
            &[mu, sigma],
            Tensor::from_parts(vec![b], out),
            Aux::Action(Rc::new(u.clone())),
        )
    }

    /// Scalar diagonal Gaussian log-density of a single action `u[d]`.
    pub fn gaussian_log_pdf(&self, u: &Tensor, mu: &Var, sigma: &Var) -> Result<Var> {
        let d = u.len();
        if u.shape() != [d] || mu.shape() != [d] || sigma.shape() != [d] {
            return Err(Error::shape(
                "gaussian_log_pdf",
                format!("u {:?}, mu {:?}, sigma {:?}", u.shape(), mu.shape(), sigma.shape()),
            ));
        }
        let u2 = u.reshape(vec![1, d])?;
        let mu2 = self.reshape(mu, vec![1, d])?;
        let rows = self.gaussian_log_pdf_rows(&u2, &mu2, sigma)?;
        self.sum(&rows)
    }

    /// Reverse pass from a scalar loss. Returns the gradient for every node
    /// reachable from `loss`; unreachable or untracked values have none.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !loss.value().is_scalar_like() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        self.check_owned(loss)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let Some((_, root)) = loss.node else {
            return Ok(Gradients {
                tape_id: self.id,
                grads,
            });
        };
        grads[root] = Some(Tensor::from_parts(loss.shape().to_vec(), vec![1.0]));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let inp = &node.inputs;
        match node.kind {
            OpKind::Leaf => {}
            OpKind::Add => {
                accumulate(grads, &inp[0], || g.clone());
                accumulate(grads, &inp[1], || g.clone());
            }
            OpKind::Sub => {
                accumulate(grads, &inp[0], || g.clone());
                accumulate(grads, &inp[1], || g.map(|x| -x));
            }
            OpKind::Mul => {
                accumulate(grads, &inp[0], || g.zip_map(inp[1].value(), |a, b| a * b));
                accumulate(grads, &inp[1], || g.zip_map(inp[0].value(), |a, b| a * b));
            }
            OpKind::Matmul | OpKind::Affine => {
                let a = inp[0].value();
                let w = inp[1].value();
                let (m, k, n) = (a.rows(), a.cols(), w.cols());
                accumulate(grads, &inp[0], || {
                    Tensor::from_parts(vec![m, k], matmul_nt(gd, w.data(), m, k, n))
                });
                accumulate(grads, &inp[1], || {
                    let mut out = vec![0.0; k * n];
                    matmul_tn_acc(a.data(), gd, &mut out, m, k, n);
                    Tensor::from_parts(vec![k, n], out)
                });
                if node.kind == OpKind::Affine {
                    accumulate(grads, &inp[2], || col_sums(g));
                }
            }
            OpKind::Tanh => {
                accumulate(grads, &inp[0], || g.zip_map(&node.out, |g, y| g * (1.0 - y * y)));
            }
            OpKind::Relu => {
                accumulate(grads, &inp[0], || {
                    g.zip_map(inp[0].value(), |g, x| if x > 0.0 { g } else { 0.0 })
                });
            }
            OpKind::Exp => {
                accumulate(grads, &inp[0], || g.zip_map(&node.out, |g, y| g * y));
            }
            OpKind::Log => {
                accumulate(grads, &inp[0], || g.zip_map(inp[0].value(), |g, x| g / x));
            }
            OpKind::Sqrt => {
                accumulate(grads, &inp[0], || {
                    g.zip_map(&node.out, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                });
            }
            OpKind::Abs => {
                accumulate(grads, &inp[0], || {
                    g.zip_map(inp[0].value(), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                });
            }
            OpKind::Sin => {
                accumulate(grads, &inp[0], || g.zip_map(inp[0].value(), |g, x| g * x.cos()));
            }
            OpKind::Cos => {
                accumulate(grads, &inp[0], || g.zip_map(inp[0].value(), |g, x| -g * x.sin()));
            }
            OpKind::Square => {
                accumulate(grads, &inp[0], || g.zip_map(inp[0].value(), |g, x| 2.0 * x * g));
            }
            OpKind::ScalarMul => {
                let Aux::Scalar(c) = node.aux else { unreachable!() };
                accumulate(grads, &inp[0], || g.map(|x| x * c));
            }
            OpKind::AddScalar | OpKind::Reshape => {
                accumulate(grads, &inp[0], || {
                    Tensor::from_parts(inp[0].shape().to_vec(), gd.to_vec())
                });
            }
            OpKind::ClampMin => {
                let Aux::Scalar(floor) = node.aux else { unreachable!() };
                accumulate(grads, &inp[0], || {
                    g.zip_map(inp[0].value(), |g, x| if x > floor { g } else { 0.0 })
                });
            }
            OpKind::Sum => {
                accumulate(grads, &inp[0], || Tensor::full(inp[0].shape(), gd[0]));
            }
            OpKind::Mean => {
                let n = inp[0].value().len() as f64;
                accumulate(grads, &inp[0], || Tensor::full(inp[0].shape(), gd[0] / n));
            }
            OpKind::SumRows => {
                accumulate(grads, &inp[0], || {
                    let (m, n) = (inp[0].value().rows(), inp[0].value().cols());
                    let mut out = Vec::with_capacity(m * n);
                    for &gi in gd {
                        out.extend(std::iter::repeat_n(gi, n));
                    }
                    Tensor::from_parts(vec![m, n], out)
                });
            }
            OpKind::BroadcastAdd => {
                accumulate(grads, &inp[0], || g.clone());
                accumulate(grads, &inp[1], || col_sums(g));
            }
            OpKind::Concat => {
                let Aux::Widths(widths) = &node.aux else { unreachable!() };
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total.max(1);
                let mut offset = 0;
                for (part, &w) in inp.iter().zip(widths) {
                    accumulate(grads, part, || {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        Tensor::from_parts(part.shape().to_vec(), out)
                    });
                    offset += w;
                }
            }
            OpKind::Slice => {
                let Aux::Range { start, end } = node.aux else { unreachable!() };
                accumulate(grads, &inp[0], || {
                    let src = inp[0].value();
                    let cols = src.cols();
                    let rows = src.len() / cols.max(1);
                    let w = end - start;
                    let mut out = vec![0.0; src.len()];
                    for r in 0..rows {
                        out[r * cols + start..r * cols + end]
                            .copy_from_slice(&gd[r * w..(r + 1) * w]);
                    }
                    Tensor::from_parts(src.shape().to_vec(), out)
                });
            }
            OpKind::GatherRows => {
                let Aux::Indices(idx) = &node.aux else { unreachable!() };
                accumulate(grads, &inp[0], || {
                    let src = inp[0].value();
                    let cols = src.cols();
                    let mut out = vec![0.0; src.len()];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            out[i * cols + j] += gd[k * cols + j];
                        }
                    }
                    Tensor::from_parts(src.shape().to_vec(), out)
                });
            }
            OpKind::GaussianLogPdf => {
                let Aux::Action(u) = &node.aux else { unreachable!() };
                let sign = match self.fault {
                    Some(GradFault::FlipGaussianLogPdfSign) => -1.0,
                    None => 1.0,
                };
                let mu = inp[0].value();
                let sigma = inp[1].value();
                let (b, d) = (mu.rows(), mu.cols());
                let shared = sigma.rank() == 1;
                let sv = sigma.data();
                let sig = |r: usize, j: usize| if shared { sv[j] } else { sv[r * d + j] };
                accumulate(grads, &inp[0], || {
                    let mut out = Vec::with_capacity(b * d);
                    for r in 0..b {
                        for j in 0..d {
                            let s = sig(r, j);
                            out.push(sign * gd[r] * (u.row(r)[j] - mu.row(r)[j]) / (s * s));
                        }
                    }
                    Tensor::from_parts(vec![b, d], out)
                });
                accumulate(grads, &inp[1], || {
                    let mut out = vec![0.0; sv.len()];
                    for r in 0..b {
                        for j in 0..d {
                            let s = sig(r, j);
                            let diff = u.row(r)[j] - mu.row(r)[j];
                            let gv = sign * gd[r] * (-1.0 / s + diff * diff / (s * s * s));
                            if shared {
                                out[j] += gv;
                            } else {
                                out[r * d + j] += gv;
                            }
                        }
                    }
                    Tensor::from_parts(sigma.shape().to_vec(), out)
                });
            }
        }
        Ok(())
    }
}

fn shapes(vars: &[&Var]) -> Vec<Vec<usize>> {
    vars.iter().map(|v| v.shape().to_vec()).collect()
}

fn matmul_dims(op: &'static str, a: &Var, b: &Var) -> Result<(usize, usize, usize)> {
    let (av, bv) = (a.value(), b.value());
    if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
        return Err(Error::shape(
            op,
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok((av.rows(), av.cols(), bv.cols()))
}

fn col_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::from_parts(vec![n], out)
}

fn accumulate(grads: &mut [Option<Tensor>], input: &Var, contrib: impl FnOnce() -> Tensor) {
    let Some((_, id)) = input.node else { return };
    let c = contrib();
    match &mut grads[id] {
        Some(existing) => {
            let sum = existing.zip_map(&c, |a, b| a + b);
            *existing = sum;
        }
        slot @ None => *slot = Some(c),
    }
}
