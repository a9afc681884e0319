//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is a Wengert list: every primitive appends one node holding its
//! forward value and the identifiers of its inputs, so the node order is a
//! topological order. [`Tape::backward`] walks the list once in reverse.

mod tensor;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use thiserror::Error;

use crate::special;

pub(crate) use tensor::gemm;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not describe {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable does not belong to this tape")]
    NotOnTape,
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Matmul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    ClampSt { x: usize, lo: f64, hi: f64 },
    Dropout { x: usize, mask: Vec<f64> },
    Lgamma(usize),
    Digamma(usize),
    Detach,
    Columns { x: usize, index: Vec<usize> },
    Rows { x: usize, start: usize },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if `var` is a trainable leaf that
    /// the output does not depend on.
    pub fn wrt(&self, var: Var) -> Result<&Tensor, AutodiffError> {
        if var.tape != self.tape {
            return Err(AutodiffError::NotOnTape);
        }
        self.grads
            .get(var.index)
            .and_then(Option::as_ref)
            .ok_or(AutodiffError::NotOnTape)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, var: Var) -> Result<usize, AutodiffError> {
        if var.tape == self.id && var.index < self.nodes.len() {
            Ok(var.index)
        } else {
            Err(AutodiffError::NotOnTape)
        }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    /// A differentiable leaf (parameter or input whose gradient is wanted).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(ia) || self.needs(ib);
        self.push_checked(name, value, op(ia, ib), needs)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let value = self.nodes[ix].value.map(f);
        let needs = self.needs(ix);
        self.push_checked(name, value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Adds a length-`cols` row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        let (ix, ir) = (self.index(x)?, self.index(row)?);
        let (vx, vr) = (&self.nodes[ix].value, &self.nodes[ir].value);
        let (rows, cols) = vx.dims2();
        if vr.len() != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: vx.shape().to_vec(),
                right: vr.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for r in 0..rows {
            for (v, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(vr.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let needs = self.needs(ix) || self.needs(ir);
        self.push_checked("add_row", value, Op::AddRow(ix, ir), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let ((m, k), (k2, n)) = (va.dims2(), vb.dims2());
        if va.shape().len() != 2 || vb.shape().len() != 2 || k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            va.data(),
            (k as isize, 1),
            vb.data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let value = Tensor::matrix(m, n, out)?;
        let needs = self.needs(ia) || self.needs(ib);
        self.push_checked("matmul", value, Op::Matmul(ia, ib), needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(ix))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(ix))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.unary("exp", x, f64::exp, Op::Exp(ix))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.unary("log", x, f64::ln, Op::Log(ix))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.unary("square", x, |v| v * v, Op::Square(ix))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.unary("scale", x, |v| v * factor, Op::Scale(ix, factor))
    }

    pub fn add_scalar(&mut self, x: Var, shift: f64) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.unary("add_scalar", x, |v| v + shift, Op::AddScalar(ix))
    }

    /// `factor · x + shift`.
    pub fn affine(&mut self, x: Var, factor: f64, shift: f64) -> Result<Var, AutodiffError> {
        let scaled = self.scale(x, factor)?;
        self.add_scalar(scaled, shift)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let total: f64 = self.nodes[ix].value.data().iter().sum();
        let needs = self.needs(ix);
        self.push_checked("sum", Tensor::scalar(total), Op::Sum(ix), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let mean = v.data().iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(ix);
        self.push_checked("mean", Tensor::scalar(mean), Op::Mean(ix), needs)
    }

    /// Forward `clamp(x, lo, hi)`; gradient passes only where `lo ≤ x ≤ hi`.
    pub fn clamp_st(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.unary(
            "clamp_st",
            x,
            |v| v.clamp(lo, hi),
            Op::ClampSt { x: ix, lo, hi },
        )
    }

    /// Inverted dropout: each element is kept with probability `keep` and
    /// scaled by `1/keep`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        keep: f64,
        rng: &mut R,
    ) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(AutodiffError::Domain {
                op: "dropout",
                value: keep,
            });
        }
        let n = self.nodes[ix].value.len();
        let mask: Vec<f64> = if keep >= 1.0 {
            vec![1.0; n]
        } else {
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let v = &self.nodes[ix].value;
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let needs = self.needs(ix);
        self.push_checked("dropout", value, Op::Dropout { x: ix, mask }, needs)
    }

    fn check_positive(&self, op: &'static str, ix: usize) -> Result<(), AutodiffError> {
        match self.nodes[ix]
            .value
            .data()
            .iter()
            .find(|&&v| v <= 0.0 || !v.is_finite())
        {
            Some(&value) => Err(AutodiffError::Domain { op, value }),
            None => Ok(()),
        }
    }

    pub fn lgamma(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.check_positive("lgamma", ix)?;
        self.unary("lgamma", x, special::lgamma_unchecked, Op::Lgamma(ix))
    }

    pub fn digamma(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        self.check_positive("digamma", ix)?;
        self.unary("digamma", x, special::digamma_unchecked, Op::Digamma(ix))
    }

    /// Identity forward; blocks all gradient flow into `x`.
    pub fn detach(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let value = self.nodes[ix].value.clone();
        Ok(self.push(value, Op::Detach, false))
    }

    /// Selects the given columns of a matrix, in order.
    pub fn columns(&mut self, x: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let (rows, cols) = v.dims2();
        if let Some(&bad) = index.iter().find(|&&c| c >= cols) {
            return Err(AutodiffError::ShapeMismatch {
                op: "columns",
                left: v.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            let row = v.row(r);
            data.extend(index.iter().map(|&c| row[c]));
        }
        let value = Tensor::matrix(rows, index.len(), data)?;
        let needs = self.needs(ix);
        let op = Op::Columns {
            x: ix,
            index: index.to_vec(),
        };
        Ok(self.push(value, op, needs))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let (rows, cols) = v.dims2();
        if len == 0 || start + len > rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "rows",
                left: v.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::matrix(len, cols, data)?;
        let needs = self.needs(ix);
        Ok(self.push(value, Op::Rows { x: ix, start }, needs))
    }

    /// Same values under a new shape with the same number of elements.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let data = self.nodes[ix].value.data().to_vec();
        let value = Tensor::new(shape.to_vec(), data)?;
        let needs = self.needs(ix);
        Ok(self.push(value, Op::Reshape(ix), needs))
    }

    /// Gradients of the scalar `output` with respect to all nodes that need them.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        let out = self.index(output)?;
        let out_value = &self.nodes[out].value;
        if !out_value.is_scalar() {
            return Err(AutodiffError::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[out].needs_grad {
            grads[out] = Some(Tensor::filled(out_value.shape(), 1.0));
        }
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let send = |j: usize, contribution: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let zip_map = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, zip_map(g, val(*b), &|gv, bv| gv * bv), grads);
                }
                if self.needs(*b) {
                    send(*b, zip_map(g, val(*a), &|gv, av| gv * av), grads);
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    send(*a, zip_map(g, val(*b), &|gv, bv| gv / bv), grads);
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q_over_b = zip_map(&node.value, val(*b), &|q, bv| q / bv);
                    send(*b, zip_map(g, &q_over_b, &|gv, t| -gv * t), grads);
                }
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone(), grads);
                if self.needs(*row) {
                    let (rows, cols) = g.dims2();
                    let mut acc = vec![0.0; cols];
                    for r in 0..rows {
                        for (a, v) in acc.iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                    let shape = val(*row).shape().to_vec();
                    send(*row, Tensor::new(shape, acc).expect("row shape"), grads);
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ((m, k), (_, n)) = (va.dims2(), vb.dims2());
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        (n as isize, 1),
                        vb.data(),
                        (1, n as isize),
                        &mut da,
                        false,
                    );
                    send(*a, Tensor::matrix(m, k, da).expect("shape"), grads);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        va.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        &mut db,
                        false,
                    );
                    send(*b, Tensor::matrix(k, n, db).expect("shape"), grads);
                }
            }
            Op::Relu(x) => {
                send(
                    *x,
                    zip_map(g, val(*x), &|gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                    grads,
                );
            }
            Op::Sigmoid(x) => {
                send(
                    *x,
                    zip_map(g, &node.value, &|gv, y| gv * y * (1.0 - y)),
                    grads,
                );
            }
            Op::Exp(x) => send(*x, zip_map(g, &node.value, &|gv, y| gv * y), grads),
            Op::Log(x) => send(*x, zip_map(g, val(*x), &|gv, xv| gv / xv), grads),
            Op::Square(x) => send(*x, zip_map(g, val(*x), &|gv, xv| 2.0 * gv * xv), grads),
            Op::Scale(x, factor) => send(*x, g.map(|v| v * factor), grads),
            Op::AddScalar(x) => send(*x, g.clone(), grads),
            Op::Sum(x) => {
                let gv = g.data()[0];
                send(*x, Tensor::filled(val(*x).shape(), gv), grads);
            }
            Op::Mean(x) => {
                let v = val(*x);
                let gv = g.data()[0] / v.len() as f64;
                send(*x, Tensor::filled(v.shape(), gv), grads);
            }
            Op::ClampSt { x, lo, hi } => {
                let pass = |gv: f64, xv: f64| if xv >= *lo && xv <= *hi { gv } else { 0.0 };
                send(*x, zip_map(g, val(*x), &pass), grads);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                send(
                    *x,
                    Tensor::new(g.shape().to_vec(), data).expect("shape"),
                    grads,
                );
            }
            Op::Lgamma(x) => {
                let d = |gv: f64, xv: f64| gv * special::digamma_unchecked(xv);
                send(*x, zip_map(g, val(*x), &d), grads);
            }
            Op::Digamma(x) => {
                let d = |gv: f64, xv: f64| gv * special::trigamma_unchecked(xv);
                send(*x, zip_map(g, val(*x), &d), grads);
            }
            Op::Columns { x, index } => {
                if self.needs(*x) {
                    let src = val(*x);
                    let (rows, cols) = src.dims2();
                    let width = index.len();
                    let mut acc = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for (j, &c) in index.iter().enumerate() {
                            acc[r * cols + c] += g.data()[r * width + j];
                        }
                    }
                    send(
                        *x,
                        Tensor::new(src.shape().to_vec(), acc).expect("shape"),
                        grads,
                    );
                }
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                send(
                    *x,
                    Tensor::new(shape, g.data().to_vec()).expect("shape"),
                    grads,
                );
            }
            Op::Rows { x, start } => {
                if self.needs(*x) {
                    let src = val(*x);
                    let (_, cols) = src.dims2();
                    let mut acc = vec![0.0; src.len()];
                    acc[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    send(
                        *x,
                        Tensor::new(src.shape().to_vec(), acc).expect("shape"),
                        grads,
                    );
                }
            }
        }
    }
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over the coordinates of
/// `x`, where `numeric` is a central difference with the given step.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(input)?.clone();

    let eval = |point: Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let v = tape.param(point);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
