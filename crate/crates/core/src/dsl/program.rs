//! Symbol resolution, constant folding and stack-machine evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use super::ast::{BinOp, Expr, ExprKind, ParseError, ParseErrorKind, Pos};
use super::dual::{Dual, Dual2, Scalar};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{func} is undefined at {value}")]
    Domain { func: &'static str, value: f64 },
    #[error("division by zero")]
    DivisionByZero,
    #[error("expected {expected} bindings, got {got}")]
    Bindings { expected: usize, got: usize },
}

/// Raised by `abs`, `min`, `max` and `norm` when evaluated exactly at a kink.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalFlags {
    pub nonsmooth: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
enum Node {
    Const(f64),
    Slot(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    PowI(Box<Node>, i32),
    PowF(Box<Node>, f64),
    Fn1(Func, Box<Node>),
    Norm(Vec<Node>),
    Min(Vec<Node>),
    Max(Vec<Node>),
}

/// A user-defined function: a body over the components of one vector symbol.
#[derive(Clone, Debug)]
pub struct NamedFn {
    pub body: Expr,
    pub param: String,
    pub arity: usize,
}

/// Names visible to an expression while compiling.
#[derive(Clone, Debug, Default)]
pub struct Symbols {
    scalars: BTreeMap<String, usize>,
    vectors: BTreeMap<String, Vec<usize>>,
    functions: BTreeMap<String, NamedFn>,
    n_slots: usize,
}

impl Symbols {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares `name1..nameN` as consecutive slots plus the group `name`.
    pub fn vector(mut self, name: &str, n: usize) -> Self {
        let slots: Vec<usize> = (0..n).map(|i| self.n_slots + i).collect();
        for (i, &s) in slots.iter().enumerate() {
            self.scalars.insert(format!("{name}{}", i + 1), s);
        }
        self.vectors.insert(name.to_string(), slots);
        self.n_slots += n;
        self
    }

    pub fn scalar(mut self, name: &str) -> Self {
        self.scalars.insert(name.to_string(), self.n_slots);
        self.n_slots += 1;
        self
    }

    pub fn function(mut self, name: &str, f: NamedFn) -> Self {
        self.functions.insert(name.to_string(), f);
        self
    }

    pub fn with_functions(mut self, fns: &BTreeMap<String, NamedFn>) -> Self {
        for (k, v) in fns {
            self.functions.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }
}

struct Resolver<'a> {
    syms: &'a Symbols,
    // Overrides used while inlining a named function body.
    locals: Vec<BTreeMap<String, Node>>,
    depth: usize,
}

fn unknown(pos: Pos, msg: String) -> ParseError {
    ParseError { kind: ParseErrorKind::UnknownSymbol, pos, msg }
}

fn arity(pos: Pos, msg: String) -> ParseError {
    ParseError { kind: ParseErrorKind::Arity, pos, msg }
}

impl Resolver<'_> {
    fn lookup(&self, name: &str) -> Option<Node> {
        if let Some(frame) = self.locals.last() {
            // Inside a function body only its parameter and constants are visible.
            return frame.get(name).cloned().or_else(|| constant(name));
        }
        if let Some(&s) = self.syms.scalars.get(name) {
            return Some(Node::Slot(s));
        }
        constant(name)
    }

    fn vector_group(&self, name: &str) -> Option<Vec<Node>> {
        if let Some(frame) = self.locals.last() {
            let mut comps = Vec::new();
            let mut i = 1;
            while let Some(n) = frame.get(&format!("{name}{i}")) {
                comps.push(n.clone());
                i += 1;
            }
            return if comps.is_empty() { None } else { Some(comps) };
        }
        self.syms
            .vectors
            .get(name)
            .map(|slots| slots.iter().map(|&s| Node::Slot(s)).collect())
    }

    fn args(&mut self, args: &[Expr]) -> Result<Vec<Node>, ParseError> {
        let mut out = Vec::new();
        for a in args {
            if let ExprKind::Sym(name) = &a.kind {
                if self.lookup(name).is_none() {
                    if let Some(comps) = self.vector_group(name) {
                        out.extend(comps);
                        continue;
                    }
                }
            }
            out.push(self.resolve(a)?);
        }
        Ok(out)
    }

    fn resolve(&mut self, e: &Expr) -> Result<Node, ParseError> {
        Ok(match &e.kind {
            ExprKind::Num(v) => Node::Const(*v),
            ExprKind::Sym(name) => self
                .lookup(name)
                .ok_or_else(|| unknown(e.pos, format!("unknown symbol '{name}'")))?,
            ExprKind::Neg(a) => Node::Neg(Box::new(self.resolve(a)?)),
            ExprKind::Bin(op, a, b) => {
                Node::Bin(*op, Box::new(self.resolve(a)?), Box::new(self.resolve(b)?))
            }
            ExprKind::Call(name, args) => {
                let resolved = self.args(args)?;
                if let Some(f) = Func::from_name(name) {
                    if resolved.len() != 1 {
                        return Err(arity(
                            e.pos,
                            format!("{name} takes 1 argument, got {}", resolved.len()),
                        ));
                    }
                    Node::Fn1(f, Box::new(resolved.into_iter().next().unwrap()))
                } else if name == "norm" || name == "min" || name == "max" {
                    let min_args = if name == "norm" { 1 } else { 2 };
                    if resolved.len() < min_args {
                        return Err(arity(
                            e.pos,
                            format!("{name} takes at least {min_args} arguments"),
                        ));
                    }
                    match name.as_str() {
                        "norm" => Node::Norm(resolved),
                        "min" => Node::Min(resolved),
                        _ => Node::Max(resolved),
                    }
                } else if let Some(f) = self.syms.functions.get(name) {
                    if resolved.len() != f.arity {
                        return Err(arity(
                            e.pos,
                            format!("{name} takes {} arguments, got {}", f.arity, resolved.len()),
                        ));
                    }
                    if self.depth > 16 {
                        return Err(arity(e.pos, format!("{name}: recursion too deep")));
                    }
                    let frame: BTreeMap<String, Node> = resolved
                        .into_iter()
                        .enumerate()
                        .map(|(i, n)| (format!("{}{}", f.param, i + 1), n))
                        .collect();
                    let body = f.body.clone();
                    self.locals.push(frame);
                    self.depth += 1;
                    let out = self.resolve(&body);
                    self.depth -= 1;
                    self.locals.pop();
                    out?
                } else {
                    return Err(unknown(e.pos, format!("unknown function '{name}'")));
                }
            }
        })
    }
}

fn constant(name: &str) -> Option<Node> {
    match name {
        "pi" => Some(Node::Const(std::f64::consts::PI)),
        "inf" => Some(Node::Const(f64::INFINITY)),
        _ => None,
    }
}

fn fold(n: Node) -> Node {
    match n {
        Node::Neg(a) => match fold(*a) {
            Node::Const(v) => Node::Const(-v),
            a => Node::Neg(Box::new(a)),
        },
        Node::Bin(op, a, b) => {
            let a = fold(*a);
            let b = fold(*b);
            match (op, &a, &b) {
                (BinOp::Pow, _, Node::Const(p)) => {
                    let p = *p;
                    if let Node::Const(base) = a {
                        return Node::Const(base.powf(p));
                    }
                    if p.fract() == 0.0 && p.abs() <= 64.0 {
                        Node::PowI(Box::new(a), p as i32)
                    } else {
                        Node::PowF(Box::new(a), p)
                    }
                }
                (_, Node::Const(x), Node::Const(y)) if op != BinOp::Pow => Node::Const(match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Pow => unreachable!(),
                }),
                _ => Node::Bin(op, Box::new(a), Box::new(b)),
            }
        }
        Node::PowI(a, p) => Node::PowI(Box::new(fold(*a)), p),
        Node::PowF(a, p) => Node::PowF(Box::new(fold(*a)), p),
        Node::Fn1(f, a) => Node::Fn1(f, Box::new(fold(*a))),
        Node::Norm(xs) => Node::Norm(xs.into_iter().map(fold).collect()),
        Node::Min(xs) => Node::Min(xs.into_iter().map(fold).collect()),
        Node::Max(xs) => Node::Max(xs.into_iter().map(fold).collect()),
        other => other,
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(f64),
    Slot(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    PowI(i32),
    PowF(f64),
    Fn1(Func),
    Norm(usize),
    Min(usize),
    Max(usize),
}

/// A compiled expression: a postfix program over numbered slots.
#[derive(Clone, Debug)]
pub struct Program {
    ops: Arc<[Op]>,
    n_slots: usize,
    max_stack: usize,
    source: Expr,
}

fn emit(n: &Node, ops: &mut Vec<Op>) {
    match n {
        Node::Const(v) => ops.push(Op::Const(*v)),
        Node::Slot(s) => ops.push(Op::Slot(*s)),
        Node::Neg(a) => {
            emit(a, ops);
            ops.push(Op::Neg);
        }
        Node::Bin(op, a, b) => {
            emit(a, ops);
            emit(b, ops);
            ops.push(match op {
                BinOp::Add => Op::Add,
                BinOp::Sub => Op::Sub,
                BinOp::Mul => Op::Mul,
                BinOp::Div => Op::Div,
                BinOp::Pow => Op::Pow,
            });
        }
        Node::PowI(a, p) => {
            emit(a, ops);
            ops.push(Op::PowI(*p));
        }
        Node::PowF(a, p) => {
            emit(a, ops);
            ops.push(Op::PowF(*p));
        }
        Node::Fn1(f, a) => {
            emit(a, ops);
            ops.push(Op::Fn1(*f));
        }
        Node::Norm(xs) | Node::Min(xs) | Node::Max(xs) => {
            for x in xs {
                emit(x, ops);
            }
            ops.push(match n {
                Node::Norm(_) => Op::Norm(xs.len()),
                Node::Min(_) => Op::Min(xs.len()),
                _ => Op::Max(xs.len()),
            });
        }
    }
}

fn stack_depth(ops: &[Op]) -> usize {
    let mut depth: isize = 0;
    let mut max = 0isize;
    for op in ops {
        depth += match op {
            Op::Const(_) | Op::Slot(_) => 1,
            Op::Neg | Op::PowI(_) | Op::PowF(_) | Op::Fn1(_) => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => -1,
            Op::Norm(k) | Op::Min(k) | Op::Max(k) => 1 - *k as isize,
        };
        max = max.max(depth);
    }
    max as usize
}

impl Program {
    pub fn compile(e: &Expr, syms: &Symbols) -> Result<Program, ParseError> {
        let mut r = Resolver { syms, locals: Vec::new(), depth: 0 };
        let node = fold(r.resolve(e)?);
        let mut ops = Vec::new();
        emit(&node, &mut ops);
        let max_stack = stack_depth(&ops);
        Ok(Program { ops: ops.into(), n_slots: syms.n_slots(), max_stack, source: e.clone() })
    }

    pub fn source(&self) -> &Expr {
        &self.source
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    /// The value when the program reads no slots at all.
    pub fn as_constant(&self) -> Option<f64> {
        match *self.ops {
            [Op::Const(v)] => Some(v),
            _ => None,
        }
    }

    pub fn eval<S: Scalar>(&self, slots: &[S], flags: &mut EvalFlags) -> Result<S, EvalError> {
        if slots.len() < self.n_slots {
            return Err(EvalError::Bindings { expected: self.n_slots, got: slots.len() });
        }
        let mut stack: Vec<S> = Vec::with_capacity(self.max_stack);
        for op in self.ops.iter() {
            match *op {
                Op::Const(v) => stack.push(S::cst(v)),
                Op::Slot(s) => stack.push(slots[s]),
                Op::Neg => {
                    let a = stack.pop().unwrap();
                    stack.push(-a);
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => {
                    let b = stack.pop().unwrap();
                    let a = stack.pop().unwrap();
                    stack.push(match op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => a * b,
                        Op::Div => {
                            if b.re() == 0.0 {
                                return Err(EvalError::DivisionByZero);
                            }
                            a / b
                        }
                        _ => {
                            if a.re() <= 0.0 {
                                return Err(EvalError::Domain { func: "pow", value: a.re() });
                            }
                            (b * a.ln()).exp()
                        }
                    });
                }
                Op::PowI(p) => {
                    let a = stack.pop().unwrap();
                    if p < 0 && a.re() == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    stack.push(a.powi(p));
                }
                Op::PowF(p) => {
                    let a = stack.pop().unwrap();
                    if a.re() < 0.0 {
                        return Err(EvalError::Domain { func: "pow", value: a.re() });
                    }
                    if a.re() == 0.0 {
                        if p < 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        if p < 1.0 && !a.is_const() {
                            flags.nonsmooth = true;
                            stack.push(S::cst(0.0));
                            continue;
                        }
                    }
                    stack.push(a.powf(p));
                }
                Op::Fn1(f) => {
                    let a = stack.pop().unwrap();
                    stack.push(match f {
                        Func::Sin => a.sin(),
                        Func::Cos => a.cos(),
                        Func::Exp => a.exp(),
                        Func::Log => {
                            if a.re() <= 0.0 {
                                return Err(EvalError::Domain { func: "log", value: a.re() });
                            }
                            a.ln()
                        }
                        Func::Sqrt => {
                            if a.re() < 0.0 {
                                return Err(EvalError::Domain { func: "sqrt", value: a.re() });
                            }
                            if a.re() == 0.0 && !a.is_const() {
                                flags.nonsmooth = true;
                                S::cst(0.0)
                            } else {
                                a.sqrt()
                            }
                        }
                        Func::Abs => {
                            if a.re() == 0.0 {
                                if !a.is_const() {
                                    flags.nonsmooth = true;
                                }
                                S::cst(0.0)
                            } else {
                                a.abs()
                            }
                        }
                    });
                }
                Op::Norm(k) => {
                    let start = stack.len() - k;
                    let mut acc = S::cst(0.0);
                    for &x in &stack[start..] {
                        acc = acc + x * x;
                    }
                    stack.truncate(start);
                    if acc.re() == 0.0 {
                        flags.nonsmooth = true;
                        stack.push(S::cst(0.0));
                    } else {
                        stack.push(acc.sqrt());
                    }
                }
                Op::Min(k) | Op::Max(k) => {
                    let start = stack.len() - k;
                    let is_min = matches!(op, Op::Min(_));
                    let mut best = stack[start];
                    for &x in &stack[start + 1..] {
                        if x.re() == best.re() {
                            flags.nonsmooth = true;
                        }
                        let better = if is_min { x.re() < best.re() } else { x.re() > best.re() };
                        if better {
                            best = x;
                        }
                    }
                    stack.truncate(start);
                    stack.push(best);
                }
            }
        }
        Ok(stack.pop().unwrap_or(S::cst(0.0)))
    }

    pub fn eval_f64(&self, slots: &[f64]) -> Result<f64, EvalError> {
        self.eval(slots, &mut EvalFlags::default())
    }

    /// Value and directional derivative along `seed`.
    pub fn eval_dual(
        &self,
        slots: &[f64],
        seed: &[f64],
        flags: &mut EvalFlags,
    ) -> Result<(f64, f64), EvalError> {
        let duals: Vec<Dual<f64>> = slots
            .iter()
            .enumerate()
            .map(|(i, &x)| Dual::new(x, seed.get(i).copied().unwrap_or(0.0)))
            .collect();
        let r = self.eval(&duals, flags)?;
        Ok((r.re, r.eps))
    }

    /// Value, gradient and Hessian over the first `n` slots; the remaining
    /// slots are held fixed.
    pub fn jet2(
        &self,
        slots: &[f64],
        n: usize,
        flags: &mut EvalFlags,
    ) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>), EvalError> {
        let mut grad = vec![0.0; n];
        let mut hess = vec![vec![0.0; n]; n];
        let mut value = 0.0;
        let mut buf: Vec<Dual2> = slots.iter().map(|&x| Dual2::cst(x)).collect();
        for a in 0..n {
            for b in a..n {
                for (i, d) in buf.iter_mut().enumerate() {
                    let inner = if i == a { 1.0 } else { 0.0 };
                    let outer = if i == b { 1.0 } else { 0.0 };
                    *d = Dual::new(Dual::new(slots[i], inner), Dual::new(outer, 0.0));
                }
                let r = self.eval(&buf, flags)?;
                value = r.re.re;
                grad[a] = r.re.eps;
                grad[b] = r.eps.re;
                hess[a][b] = r.eps.eps;
                hess[b][a] = r.eps.eps;
            }
        }
        if n == 0 {
            value = self.eval_f64(slots)?;
        }
        Ok((value, grad, hess))
    }
}

/// Parses and compiles in one step.
pub fn compile_str(text: &str, syms: &Symbols) -> Result<Program, ParseError> {
    Program::compile(&super::ast::parse(text)?, syms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::ast::parse;

    fn xs(n: usize) -> Symbols {
        Symbols::new().vector("x", n)
    }

    #[test]
    fn dual_of_square() {
        let p = compile_str("x1^2", &xs(1)).unwrap();
        let (v, d) = p.eval_dual(&[3.0], &[1.0], &mut EvalFlags::default()).unwrap();
        assert_eq!((v, d), (9.0, 6.0));
    }

    #[test]
    fn dual_of_sine() {
        let p = compile_str("sin(x1)", &xs(1)).unwrap();
        let x = std::f64::consts::FRAC_PI_4;
        let (v, d) = p.eval_dual(&[x], &[1.0], &mut EvalFlags::default()).unwrap();
        let h = std::f64::consts::SQRT_2 / 2.0;
        assert!((v - h).abs() < 1e-15 && (d - h).abs() < 1e-15);
    }

    #[test]
    fn vector_symbols_expand_inside_calls() {
        let p = compile_str("norm(x)", &xs(3)).unwrap();
        assert!((p.eval_f64(&[1.0, 2.0, 2.0]).unwrap() - 3.0).abs() < 1e-15);
        assert!(compile_str("x + 1", &xs(2)).is_err());
    }

    #[test]
    fn named_function_inlines_its_body() {
        let f0 = NamedFn { body: parse("(v1^4 + v2^4)^(1/4)").unwrap(), param: "v".into(), arity: 2 };
        let syms = Symbols::new().vector("x", 2).vector("v", 2).function("F0", f0);
        let p = compile_str("1/norm(x) * F0(v)", &syms).unwrap();
        let val = p.eval_f64(&[3.0, 4.0, 1.0, 1.0]).unwrap();
        assert!((val - 2f64.powf(0.25) / 5.0).abs() < 1e-15);
    }

    #[test]
    fn resolution_errors() {
        let e = compile_str("x3 + 1", &xs(2)).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownSymbol);
        let e = compile_str("sin(x1, x2)", &xs(2)).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Arity);
        let e = compile_str("foo(x1)", &xs(2)).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownSymbol);
    }

    #[test]
    fn eval_domain_errors() {
        let p = compile_str("log(x1)", &xs(1)).unwrap();
        assert!(matches!(p.eval_f64(&[-1.0]), Err(EvalError::Domain { func: "log", .. })));
        let p = compile_str("1/x1", &xs(1)).unwrap();
        assert_eq!(p.eval_f64(&[0.0]), Err(EvalError::DivisionByZero));
        let p = compile_str("sqrt(x1)", &xs(1)).unwrap();
        assert!(p.eval_f64(&[-0.5]).is_err());
    }

    #[test]
    fn abs_kink_is_flagged() {
        let p = compile_str("abs(x1)", &xs(1)).unwrap();
        let mut flags = EvalFlags::default();
        let (v, d) = p.eval_dual(&[0.0], &[1.0], &mut flags).unwrap();
        assert_eq!((v, d), (0.0, 0.0));
        assert!(flags.nonsmooth);
        let mut flags = EvalFlags::default();
        let (_, d) = p.eval_dual(&[-2.0], &[1.0], &mut flags).unwrap();
        assert_eq!(d, -1.0);
        assert!(!flags.nonsmooth);
    }

    #[test]
    fn hessian_of_product() {
        let p = compile_str("x1^2 * x2 + sin(x2)", &xs(2)).unwrap();
        let (v, g, h) = p.jet2(&[2.0, 0.5], 2, &mut EvalFlags::default()).unwrap();
        assert!((v - (2.0 + 0.5f64.sin())).abs() < 1e-14);
        assert!((g[0] - 2.0).abs() < 1e-14);
        assert!((g[1] - (4.0 + 0.5f64.cos())).abs() < 1e-14);
        assert!((h[0][0] - 1.0).abs() < 1e-14);
        assert!((h[0][1] - 4.0).abs() < 1e-14);
        assert!((h[1][1] + 0.5f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn constant_folding() {
        let p = compile_str("(1/4) * 8 + pi - pi", &xs(0)).unwrap();
        assert_eq!(p.as_constant(), Some(2.0));
    }
}
