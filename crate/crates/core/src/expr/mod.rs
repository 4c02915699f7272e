//! Scalar arithmetic expressions over `(t, x1..xd, v)`.
//!
//! Problem coefficients arrive as strings. They are parsed once into an
//! [`ast::Node`] tree and compiled into a flat postfix program that the
//! Monte-Carlo loops evaluate millions of times. Every operation checks its
//! result for finiteness, so a NaN or infinity never reaches an average.

pub mod ast;
mod parser;

use serde::{Serialize, Serializer};
use smallvec::{smallvec, SmallVec};
use thiserror::Error;

use crate::scalar::{powi, Real};
use ast::{BinOp, Func, Node};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at column {position}: expected {}, found {found}", expected.join(" or "))]
    Syntax {
        position: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("`{function}` takes {expected} argument(s), got {found} (column {position})")]
    Arity {
        function: &'static str,
        expected: usize,
        found: usize,
        position: usize,
    },
    #[error("unknown identifier `{name}` at column {position}: {reason}")]
    UnknownIdentifier { name: String, position: usize, reason: String },
    #[error("empty expression")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error in `{node}`: {reason}")]
    Domain { node: String, reason: &'static str },
    #[error("non-finite value produced by `{node}`")]
    NonFinite { node: String },
    #[error("bad bindings: {0}")]
    Binding(String),
}

/// Values substituted for the free variables of an expression.
#[derive(Debug, Clone, Copy)]
pub struct Bindings<'a, F> {
    pub t: F,
    pub x: &'a [F],
    pub v: Option<F>,
}

impl<'a, F: Real> Bindings<'a, F> {
    pub fn new(t: F, x: &'a [F]) -> Self {
        Self { t, x, v: None }
    }

    pub fn with_v(t: F, x: &'a [F], v: F) -> Self {
        Self { t, x, v: Some(v) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    T,
    V,
    X(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    PowI(i32),
    Call(Func),
}

/// A parsed, dimension-checked and compiled expression.
#[derive(Debug, Clone)]
pub struct Expression {
    source: String,
    root: Node,
    dim: usize,
    uses_t: bool,
    uses_v: bool,
    uses_x: bool,
    ops: Vec<Op>,
    // Rendered subexpression per op, for error reports.
    op_text: Vec<String>,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.root == other.root
    }
}

impl Serialize for Expression {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl std::fmt::Display for Expression {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.source)
    }
}

fn compile(node: &Node, ops: &mut Vec<Op>, text: &mut Vec<String>) {
    match node {
        Node::Num(v) => ops.push(Op::Const(*v)),
        Node::T => ops.push(Op::T),
        Node::V => ops.push(Op::V),
        Node::X(i) => ops.push(Op::X(*i)),
        Node::Neg(a) => {
            compile(a, ops, text);
            ops.push(Op::Neg);
        }
        Node::Bin(BinOp::Pow, a, b) if matches!(**b, Node::Num(e) if e.fract() == 0.0 && e.abs() <= 64.0) => {
            compile(a, ops, text);
            let Node::Num(e) = **b else { unreachable!() };
            ops.push(Op::PowI(e as i32));
        }
        Node::Bin(op, a, b) => {
            compile(a, ops, text);
            compile(b, ops, text);
            ops.push(match op {
                BinOp::Add => Op::Add,
                BinOp::Sub => Op::Sub,
                BinOp::Mul => Op::Mul,
                BinOp::Div => Op::Div,
                BinOp::Pow => Op::Pow,
            });
        }
        Node::Call(func, args) => {
            for a in args {
                compile(a, ops, text);
            }
            ops.push(Op::Call(*func));
        }
    }
    while text.len() < ops.len() {
        text.push(node.to_string());
    }
}

/// Lane count of [`Expression::eval_batch`].
pub const LANES: usize = 64;

/// Structure-of-arrays bindings for `n` points: `t[k]`, coordinate `i` of
/// point `k` at `x[i * n + k]`, and optionally `v[k]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchBindings<'a, F> {
    pub t: &'a [F],
    pub x: &'a [F],
    pub v: Option<&'a [F]>,
}

#[inline]
fn apply_func<F: Real>(func: Func, args: &[F]) -> Result<F, &'static str> {
    let a = args[0];
    Ok(match func {
        Func::Exp => a.exp(),
        Func::Log => {
            if a <= F::zero() {
                return Err("log of a non-positive number");
            }
            a.ln()
        }
        Func::Sin => a.sin(),
        Func::Cos => a.cos(),
        Func::Tanh => a.tanh(),
        Func::Sqrt => {
            if a < F::zero() {
                return Err("sqrt of a negative number");
            }
            a.sqrt()
        }
        Func::Abs => a.abs(),
        Func::Min => a.min(args[1]),
        Func::Max => a.max(args[1]),
        Func::Clip => {
            let (lo, hi) = (args[1], args[2]);
            if lo > hi {
                return Err("clip with lower bound above upper bound");
            }
            a.max(lo).min(hi)
        }
    })
}

impl Expression {
    /// Parses `source` over `t`, `x1..x{dim}` and, when `allow_v`, `v`.
    pub fn parse(source: &str, dim: usize, allow_v: bool) -> Result<Self, ExprError> {
        if source.trim().is_empty() {
            return Err(ExprError::Empty);
        }
        let root = parser::Parser::parse(source, dim, allow_v)?;
        Ok(Self::from_node(source.trim().to_string(), root, dim))
    }

    /// Builds an expression from an already constructed tree.
    pub fn from_node(source: String, root: Node, dim: usize) -> Self {
        let (mut uses_t, mut uses_v, mut uses_x) = (false, false, false);
        root.visit(&mut |n| match n {
            Node::T => uses_t = true,
            Node::V => uses_v = true,
            Node::X(i) => {
                assert!(*i < dim, "variable index beyond dimension");
                uses_x = true
            }
            _ => {}
        });
        let mut ops = Vec::new();
        let mut op_text = Vec::new();
        compile(&root, &mut ops, &mut op_text);
        Self { source, root, dim, uses_t, uses_v, uses_x, ops, op_text }
    }

    pub fn constant(value: f64, dim: usize) -> Self {
        Self::from_node(format!("{value:?}"), Node::Num(value), dim)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Node {
        &self.root
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn uses_v(&self) -> bool {
        self.uses_v
    }

    pub fn uses_t(&self) -> bool {
        self.uses_t
    }

    pub fn uses_x(&self) -> bool {
        self.uses_x
    }

    /// True when the expression references no variable at all.
    pub fn is_constant(&self) -> bool {
        !(self.uses_t || self.uses_v || self.uses_x)
    }

    /// Value of a variable-free expression.
    pub fn constant_value(&self) -> Option<f64> {
        if !self.is_constant() {
            return None;
        }
        self.eval(&Bindings::<f64>::new(0.0, &vec![0.0; self.dim])).ok()
    }

    /// Canonical rendering; parses back to the same tree.
    pub fn pretty(&self) -> String {
        self.root.to_string()
    }

    pub fn eval_at<F: Real>(&self, t: F, x: &[F], v: Option<F>) -> Result<F, EvalError> {
        self.eval(&Bindings { t, x, v })
    }

    /// Evaluates in the scalar type `F`.
    pub fn eval<F: Real>(&self, b: &Bindings<'_, F>) -> Result<F, EvalError> {
        if b.x.len() != self.dim {
            return Err(EvalError::Binding(format!("expected {} state components, got {}", self.dim, b.x.len())));
        }
        let mut stack: SmallVec<[F; 16]> = SmallVec::new();
        for (k, op) in self.ops.iter().enumerate() {
            let value = match *op {
                Op::Const(c) => F::lit(c),
                Op::T => b.t,
                Op::X(i) => b.x[i],
                Op::V => b.v.ok_or_else(|| EvalError::Binding("expression uses `v` but no value was bound".into()))?,
                Op::Neg => {
                    let a = stack.pop().expect("stack");
                    -a
                }
                Op::PowI(e) => {
                    let a = stack.pop().expect("stack");
                    if a == F::zero() && e < 0 {
                        return Err(self.domain(k, "zero raised to a negative power"));
                    }
                    powi(a, e)
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => {
                    let r = stack.pop().expect("stack");
                    let l = stack.pop().expect("stack");
                    match *op {
                        Op::Add => l + r,
                        Op::Sub => l - r,
                        Op::Mul => l * r,
                        Op::Div => {
                            if r == F::zero() {
                                return Err(self.domain(k, "division by zero"));
                            }
                            l / r
                        }
                        _ => {
                            let p = l.powf(r);
                            if p.is_nan() {
                                return Err(self.domain(k, "negative base with non-integer exponent"));
                            }
                            if l == F::zero() && r < F::zero() {
                                return Err(self.domain(k, "zero raised to a negative power"));
                            }
                            p
                        }
                    }
                }
                Op::Call(func) => self.call(k, func, &mut stack)?,
            };
            if !value.is_finite() {
                return Err(EvalError::NonFinite { node: self.op_text[k].clone() });
            }
            stack.push(value);
        }
        Ok(stack.pop().expect("compiled program leaves one value"))
    }

    fn domain(&self, k: usize, reason: &'static str) -> EvalError {
        EvalError::Domain { node: self.op_text[k].clone(), reason }
    }

    #[inline]
    fn call<F: Real>(&self, k: usize, func: Func, stack: &mut SmallVec<[F; 16]>) -> Result<F, EvalError> {
        let base = stack.len() - func.arity();
        let out = apply_func(func, &stack[base..]).map_err(|reason| self.domain(k, reason))?;
        stack.truncate(base);
        Ok(out)
    }

    /// Evaluates `n = out.len() <= LANES` points at once; lane `k` gives
    /// exactly the result of [`Expression::eval`] at point `k`.
    pub fn eval_batch<F: Real>(&self, b: &BatchBindings<'_, F>, out: &mut [F]) -> Result<(), EvalError> {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just detected.
            return unsafe { self.eval_batch_avx2(b, out) };
        }
        self.eval_batch_impl(b, out)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    fn eval_batch_avx2<F: Real>(&self, b: &BatchBindings<'_, F>, out: &mut [F]) -> Result<(), EvalError> {
        self.eval_batch_impl(b, out)
    }

    #[inline(always)]
    fn eval_batch_impl<F: Real>(&self, b: &BatchBindings<'_, F>, out: &mut [F]) -> Result<(), EvalError> {
        let n = out.len();
        assert!(n <= LANES, "batch larger than {LANES}");
        if b.t.len() != n || b.x.len() != self.dim * n || b.v.is_some_and(|v| v.len() != n) {
            return Err(EvalError::Binding("batch bindings do not match the lane count".into()));
        }
        let mut buf: SmallVec<[F; 4 * LANES]> = smallvec![F::zero(); self.stack_depth() * n];
        let mut sp = 0;
        for (k, op) in self.ops.iter().enumerate() {
            let push = |buf: &mut [F], sp: usize, src: &[F]| buf[sp * n..(sp + 1) * n].copy_from_slice(src);
            match *op {
                Op::Const(c) => {
                    buf[sp * n..(sp + 1) * n].fill(F::lit(c));
                    sp += 1;
                }
                Op::T => {
                    push(&mut buf, sp, b.t);
                    sp += 1;
                }
                Op::X(i) => {
                    push(&mut buf, sp, &b.x[i * n..(i + 1) * n]);
                    sp += 1;
                }
                Op::V => match b.v {
                    Some(v) => {
                        push(&mut buf, sp, v);
                        sp += 1;
                    }
                    None => return Err(EvalError::Binding("expression uses `v` but no value was bound".into())),
                },
                Op::Neg => {
                    for lane in buf[(sp - 1) * n..sp * n].iter_mut() {
                        *lane = -*lane;
                    }
                }
                Op::PowI(e) => {
                    let a = &mut buf[(sp - 1) * n..sp * n];
                    if e < 0 && a.iter().any(|&lane| lane == F::zero()) {
                        return Err(self.domain(k, "zero raised to a negative power"));
                    }
                    for lane in a.iter_mut() {
                        *lane = powi(*lane, e);
                    }
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => {
                    sp -= 1;
                    let (lo, hi) = buf.split_at_mut(sp * n);
                    let (l, r) = (&mut lo[(sp - 1) * n..], &hi[..n]);
                    match *op {
                        Op::Add => l.iter_mut().zip(r).for_each(|(a, &c)| *a = *a + c),
                        Op::Sub => l.iter_mut().zip(r).for_each(|(a, &c)| *a = *a - c),
                        Op::Mul => l.iter_mut().zip(r).for_each(|(a, &c)| *a = *a * c),
                        Op::Div => {
                            if r.iter().any(|&c| c == F::zero()) {
                                return Err(self.domain(k, "division by zero"));
                            }
                            l.iter_mut().zip(r).for_each(|(a, &c)| *a = *a / c);
                        }
                        _ => {
                            for (a, &c) in l.iter_mut().zip(r) {
                                let p = a.powf(c);
                                if p.is_nan() {
                                    return Err(self.domain(k, "negative base with non-integer exponent"));
                                }
                                if *a == F::zero() && c < F::zero() {
                                    return Err(self.domain(k, "zero raised to a negative power"));
                                }
                                *a = p;
                            }
                        }
                    }
                }
                Op::Call(func) => {
                    let arity = func.arity();
                    let base = sp - arity;
                    let mut res = [F::zero(); LANES];
                    let mut args = [F::zero(); 3];
                    for lane in 0..n {
                        for (j, arg) in args[..arity].iter_mut().enumerate() {
                            *arg = buf[(base + j) * n + lane];
                        }
                        res[lane] = apply_func(func, &args[..arity]).map_err(|reason| self.domain(k, reason))?;
                    }
                    sp = base + 1;
                    push(&mut buf, base, &res[..n]);
                }
            }
            if buf[(sp - 1) * n..sp * n].iter().any(|v| !v.is_finite()) {
                return Err(EvalError::NonFinite { node: self.op_text[k].clone() });
            }
        }
        out.copy_from_slice(&buf[..n]);
        Ok(())
    }

    /// Largest operand stack the compiled program reaches.
    fn stack_depth(&self) -> usize {
        let (mut sp, mut depth) = (0usize, 0usize);
        for op in &self.ops {
            match *op {
                Op::Const(_) | Op::T | Op::X(_) | Op::V => sp += 1,
                Op::Neg | Op::PowI(_) => {}
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => sp -= 1,
                Op::Call(func) => sp = sp + 1 - func.arity(),
            }
            depth = depth.max(sp);
        }
        depth
    }

    /// Central finite-difference gradient in `x`.
    pub fn gradient_fd<F: Real>(&self, b: &Bindings<'_, F>, step: F) -> Result<Vec<F>, EvalError> {
        if !(step > F::zero()) {
            return Err(EvalError::Binding("finite-difference step must be positive".into()));
        }
        let mut x = b.x.to_vec();
        let two_h = step + step;
        (0..x.len())
            .map(|i| {
                let xi = x[i];
                x[i] = xi + step;
                let up = self.eval(&Bindings { t: b.t, x: &x, v: b.v })?;
                x[i] = xi - step;
                let down = self.eval(&Bindings { t: b.t, x: &x, v: b.v })?;
                x[i] = xi;
                Ok((up - down) / two_h)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, d: usize, t: f64, x: &[f64], v: Option<f64>) -> Result<f64, EvalError> {
        Expression::parse(src, d, true).unwrap().eval_at(t, x, v)
    }

    #[test]
    fn batch_matches_scalar_lanes() {
        let sources = ["x1^2 + x2^2", "sin(v) + x1*x2 - t", "clip(v, -1, 1)^3 / (1 + x2^2)", "exp(-t)*max(x1, x2)", "-x1^-2"];
        let n = 37;
        let t: Vec<f64> = (0..n).map(|k| 0.01 * k as f64).collect();
        let x: Vec<f64> = (0..2 * n).map(|k| ((k * 7919) % 101) as f64 / 13.0 - 3.7).collect();
        let v: Vec<f64> = (0..n).map(|k| (k as f64 - 18.0) / 5.0).collect();
        for src in sources {
            let e = Expression::parse(src, 2, true).unwrap();
            let mut out = vec![0.0; n];
            e.eval_batch(&BatchBindings { t: &t, x: &x, v: Some(&v) }, &mut out).unwrap();
            for k in 0..n {
                let xk = [x[k], x[n + k]];
                let want = e.eval(&Bindings::with_v(t[k], &xk, v[k])).unwrap();
                assert_eq!(out[k].to_bits(), want.to_bits(), "{src} lane {k}");
            }
        }
        let e = Expression::parse("1 / (x1 - 2)", 1, false).unwrap();
        let mut out = [0.0; 3];
        let err = e.eval_batch(&BatchBindings { t: &[0.0; 3], x: &[1.0, 2.0, 3.0], v: None }, &mut out);
        assert!(matches!(err, Err(EvalError::Domain { .. })));
        assert!(e.eval_batch(&BatchBindings { t: &[0.0; 2], x: &[1.0, 2.0, 3.0], v: None }, &mut out[..2]).is_err());
    }

    #[test]
    fn evaluates_basic_examples() {
        assert_eq!(ev("x1^2 + x2^2", 2, 0.0, &[1.0, 2.0], None).unwrap(), 5.0);
        assert_eq!(ev("exp(-t)*x1", 1, 0.0, &[3.0], None).unwrap(), 3.0);
        assert_eq!(ev("clip(v,-2,2)^3", 1, 0.0, &[0.0], Some(5.0)).unwrap(), 8.0);
        assert_eq!(ev("min(x1, x2)", 2, 0.0, &[3.0, -1.0], None).unwrap(), -1.0);
    }

    #[test]
    fn incomplete_binary_op_reports_column() {
        match Expression::parse("x1 +", 1, false) {
            Err(ExprError::Syntax { position, .. }) => assert_eq!(position, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("2^3^2", 1, 0.0, &[0.0], None).unwrap(), 512.0);
        assert_eq!(ev("-2^2", 1, 0.0, &[0.0], None).unwrap(), -4.0);
        assert_eq!(ev("2^-1", 1, 0.0, &[0.0], None).unwrap(), 0.5);
        assert_eq!(ev("8/4/2", 1, 0.0, &[0.0], None).unwrap(), 1.0);
        assert_eq!(ev("1-2-3", 1, 0.0, &[0.0], None).unwrap(), -4.0);
        assert_eq!(ev("1+2*3", 1, 0.0, &[0.0], None).unwrap(), 7.0);
        assert_eq!(ev("-x1*2", 1, 0.0, &[3.0], None).unwrap(), -6.0);
        assert_eq!(ev("1.5e1 + .5", 1, 0.0, &[0.0], None).unwrap(), 15.5);
    }

    #[test]
    fn rejects_bad_identifiers_and_arity() {
        assert!(matches!(Expression::parse("v + 1", 1, false), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(Expression::parse("x3", 2, true), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(Expression::parse("x0", 2, true), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(Expression::parse("foo(1)", 2, true), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(Expression::parse("y", 2, true), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(Expression::parse("min(1)", 2, true), Err(ExprError::Arity { expected: 2, found: 1, .. })));
        assert!(matches!(Expression::parse("clip(v, 1)", 2, true), Err(ExprError::Arity { .. })));
        assert!(matches!(Expression::parse("x1 2", 2, true), Err(ExprError::Syntax { position: 4, .. })));
        assert!(matches!(Expression::parse("(x1", 2, true), Err(ExprError::Syntax { .. })));
        assert!(matches!(Expression::parse("1e999", 2, true), Err(ExprError::Syntax { .. })));
        assert!(matches!(Expression::parse("  ", 2, true), Err(ExprError::Empty)));
    }

    #[test]
    fn domain_errors_name_the_node() {
        match ev("1/x1", 1, 0.0, &[0.0], None) {
            Err(EvalError::Domain { node, .. }) => assert_eq!(node, "1.0 / x1"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(ev("log(x1)", 1, 0.0, &[-1.0], None), Err(EvalError::Domain { .. })));
        assert!(matches!(ev("sqrt(x1)", 1, 0.0, &[-1.0], None), Err(EvalError::Domain { .. })));
        assert!(matches!(ev("x1^0.5", 1, 0.0, &[-1.0], None), Err(EvalError::Domain { .. })));
        assert!(matches!(ev("exp(x1)", 1, 0.0, &[1000.0], None), Err(EvalError::NonFinite { .. })));
        assert!(matches!(ev("v", 1, 0.0, &[1.0], None), Err(EvalError::Binding(_))));
        assert!(matches!(ev("x1", 1, 0.0, &[1.0, 2.0], None), Err(EvalError::Binding(_))));
    }

    #[test]
    fn fd_gradient_examples() {
        let e = Expression::parse("x1^2", 1, false).unwrap();
        let g = e.gradient_fd(&Bindings::<f64>::new(0.0, &[3.0]), 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let e = Expression::parse("x1*x2", 2, false).unwrap();
        let g = e.gradient_fd(&Bindings::<f64>::new(0.0, &[2.0, 5.0]), 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
        let e = Expression::parse("7", 3, false).unwrap();
        assert_eq!(e.gradient_fd(&Bindings::<f64>::new(0.0, &[1.0, -2.0, 4.0]), 1e-5).unwrap(), vec![0.0; 3]);
        assert!(e.gradient_fd(&Bindings::<f64>::new(0.0, &[1.0, -2.0, 4.0]), 0.0).is_err());
    }

    #[test]
    fn constants_are_detected() {
        let e = Expression::parse("sqrt(2)", 3, false).unwrap();
        assert!(e.is_constant());
        assert_eq!(e.constant_value(), Some(2f64.sqrt()));
        assert!(!Expression::parse("0*x1", 3, false).unwrap().is_constant());
    }

    #[test]
    fn evaluates_in_f32() {
        let e = Expression::parse("x1^2 + t", 1, false).unwrap();
        assert_eq!(e.eval_at(1.0f32, &[2.0f32], None).unwrap(), 5.0f32);
    }

    #[test]
    fn pretty_print_is_minimal() {
        let e = Expression::parse("((x1 + 2) * (x2)) ^ (-(3))", 2, false).unwrap();
        assert_eq!(e.pretty(), "((x1 + 2.0) * x2) ^ -3.0");
        let e = Expression::parse("a", 1, false);
        assert!(e.is_err());
    }
}
