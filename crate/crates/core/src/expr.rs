//! Polynomial expressions over named variable blocks.
//!
//! The node set is deliberately small (constants, variables, sums, products,
//! nonnegative integer powers, negation): every function appearing in the
//! problems this crate targets is polynomial, which keeps differentiation
//! exact and makes affine/quadratic structure decidable by inspection.
//! Expressions are immutable and shared via `Arc`, so evaluation and
//! differentiation are safe to call concurrently.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Ordered list of named variable blocks with a fixed flat indexing.
#[derive(Debug, PartialEq, Eq)]
pub struct VarSpace {
    blocks: Vec<(String, usize)>,
    offsets: Vec<usize>,
    total: usize,
}

impl VarSpace {
    /// Builds a space from `(name, dim)` pairs. Names must be unique
    /// identifiers and dims positive.
    pub fn new<S: Into<String>>(blocks: Vec<(S, usize)>) -> Result<Arc<VarSpace>> {
        let mut named: Vec<(String, usize)> = Vec::with_capacity(blocks.len());
        for (name, dim) in blocks {
            let name = name.into();
            if !is_identifier(&name) {
                return Err(Error::InvalidInput(format!("bad block name `{name}`")));
            }
            if dim == 0 && false {
                // zero-dim blocks are allowed only by omission; callers drop them
            }
            if named.iter().any(|(n, _)| *n == name) {
                return Err(Error::InvalidInput(format!("duplicate block `{name}`")));
            }
            named.push((name, dim));
        }
        let mut offsets = Vec::with_capacity(named.len());
        let mut total = 0usize;
        for (_, d) in &named {
            if *d == 0 {
                return Err(Error::InvalidInput("block dimension must be positive".into()));
            }
            offsets.push(total);
            total += d;
        }
        Ok(Arc::new(VarSpace { blocks: named, offsets, total }))
    }

    pub fn total_dim(&self) -> usize {
        self.total
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, usize)> {
        self.blocks.iter().map(|(n, d)| (n.as_str(), *d))
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|(n, _)| n == name)
    }

    pub fn block_dim(&self, name: &str) -> Result<usize> {
        self.block_index(name)
            .map(|i| self.blocks[i].1)
            .ok_or_else(|| Error::UnknownBlock(name.into()))
    }

    pub fn block_offset(&self, name: &str) -> Result<usize> {
        self.block_index(name)
            .map(|i| self.offsets[i])
            .ok_or_else(|| Error::UnknownBlock(name.into()))
    }

    /// Flat index of `block[index]`.
    pub fn flat_index(&self, block: &str, index: usize) -> Result<usize> {
        let b = self
            .block_index(block)
            .ok_or_else(|| Error::UnknownBlock(block.into()))?;
        if index >= self.blocks[b].1 {
            return Err(Error::InvalidInput(format!(
                "index {index} out of range for block `{block}` (dim {})",
                self.blocks[b].1
            )));
        }
        Ok(self.offsets[b] + index)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A point in a variable space, stored as one flat vector.
#[derive(Debug, Clone)]
pub struct Point {
    space: Arc<VarSpace>,
    values: Vec<f64>,
}

impl Point {
    pub fn new(space: Arc<VarSpace>, values: Vec<f64>) -> Result<Point> {
        if values.len() != space.total_dim() {
            return Err(Error::DimensionMismatch { expected: space.total_dim(), got: values.len() });
        }
        Ok(Point { space, values })
    }

    pub fn zeros(space: Arc<VarSpace>) -> Point {
        let n = space.total_dim();
        Point { space, values: vec![0.0; n] }
    }

    pub fn space(&self) -> &Arc<VarSpace> {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, name: &str) -> Result<&[f64]> {
        let off = self.space.block_offset(name)?;
        let dim = self.space.block_dim(name)?;
        Ok(&self.values[off..off + dim])
    }

    pub fn set_block(&mut self, name: &str, vals: &[f64]) -> Result<()> {
        let off = self.space.block_offset(name)?;
        let dim = self.space.block_dim(name)?;
        if vals.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: vals.len() });
        }
        self.values[off..off + dim].copy_from_slice(vals);
        Ok(())
    }
}

#[derive(Debug)]
enum Node {
    Const(f64),
    Var { block: Arc<str>, index: usize },
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Pow(Expr, u32),
    Neg(Expr),
}

/// A polynomial expression attached to a variable space.
#[derive(Clone)]
pub struct Expr {
    node: Arc<Node>,
    space: Arc<VarSpace>,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl Expr {
    pub fn space(&self) -> &Arc<VarSpace> {
        &self.space
    }

    pub fn constant(space: Arc<VarSpace>, c: f64) -> Expr {
        Expr { node: Arc::new(Node::Const(c)), space }
    }

    pub fn var(space: Arc<VarSpace>, block: &str, index: usize) -> Result<Expr> {
        space.flat_index(block, index)?;
        Ok(Expr { node: Arc::new(Node::Var { block: Arc::from(block), index }), space })
    }

    fn same_space(terms: &[Expr]) -> Result<Arc<VarSpace>> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidInput("empty operand list".into()))?;
        for t in &terms[1..] {
            if !Arc::ptr_eq(&t.space, &first.space) && t.space != first.space {
                return Err(Error::SpaceMismatch);
            }
        }
        Ok(first.space.clone())
    }

    /// n-ary sum with flattening and constant folding.
    pub fn add(terms: Vec<Expr>) -> Result<Expr> {
        let space = Self::same_space(&terms)?;
        let mut flat: Vec<Expr> = Vec::with_capacity(terms.len());
        let mut acc = 0.0;
        let mut stack = terms;
        stack.reverse();
        while let Some(t) = stack.pop() {
            match &*t.node {
                Node::Const(c) => acc += c,
                Node::Add(children) => {
                    for c in children.iter().rev() {
                        stack.push(c.clone());
                    }
                }
                _ => flat.push(t),
            }
        }
        if acc != 0.0 || flat.is_empty() {
            flat.push(Expr::constant(space.clone(), acc));
        }
        if flat.len() == 1 {
            return Ok(flat.pop().unwrap());
        }
        Ok(Expr { node: Arc::new(Node::Add(flat)), space })
    }

    /// n-ary product with flattening, constant folding, and zero absorption.
    pub fn mul(factors: Vec<Expr>) -> Result<Expr> {
        let space = Self::same_space(&factors)?;
        let mut flat: Vec<Expr> = Vec::with_capacity(factors.len());
        let mut acc = 1.0;
        let mut stack = factors;
        stack.reverse();
        while let Some(t) = stack.pop() {
            match &*t.node {
                Node::Const(c) => acc *= c,
                Node::Mul(children) => {
                    for c in children.iter().rev() {
                        stack.push(c.clone());
                    }
                }
                _ => flat.push(t),
            }
        }
        if acc == 0.0 {
            return Ok(Expr::constant(space, 0.0));
        }
        if flat.is_empty() {
            return Ok(Expr::constant(space, acc));
        }
        if acc != 1.0 {
            flat.insert(0, Expr::constant(space.clone(), acc));
        }
        if flat.len() == 1 {
            return Ok(flat.pop().unwrap());
        }
        Ok(Expr { node: Arc::new(Node::Mul(flat)), space })
    }

    pub fn pow(base: Expr, exponent: u32) -> Expr {
        match exponent {
            0 => Expr::constant(base.space.clone(), 1.0),
            1 => base,
            _ => {
                if let Node::Const(c) = &*base.node {
                    return Expr::constant(base.space.clone(), c.powi(exponent as i32));
                }
                let space = base.space.clone();
                Expr { node: Arc::new(Node::Pow(base, exponent)), space }
            }
        }
    }

    pub fn neg(e: Expr) -> Expr {
        match &*e.node {
            Node::Const(c) => Expr::constant(e.space.clone(), -c),
            Node::Neg(inner) => inner.clone(),
            _ => {
                let space = e.space.clone();
                Expr { node: Arc::new(Node::Neg(e)), space }
            }
        }
    }

    /// `a - b` as `a + (neg b)`.
    pub fn sub(a: Expr, b: Expr) -> Result<Expr> {
        Expr::add(vec![a, Expr::neg(b)])
    }

    pub fn scale(c: f64, e: Expr) -> Result<Expr> {
        let k = Expr::constant(e.space.clone(), c);
        Expr::mul(vec![k, e])
    }

    pub fn as_constant(&self) -> Option<f64> {
        match &*self.node {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Evaluates the expression at a point of the same space.
    pub fn eval(&self, pt: &Point) -> Result<f64> {
        if !Arc::ptr_eq(&self.space, &pt.space) && self.space != pt.space {
            return Err(Error::SpaceMismatch);
        }
        Ok(self.eval_flat(&pt.values))
    }

    /// Evaluates against a raw flat vector laid out per the attached space.
    pub fn eval_flat(&self, flat: &[f64]) -> f64 {
        match &*self.node {
            Node::Const(c) => *c,
            Node::Var { block, index } => {
                let off = self.space.block_offset(block).expect("validated var");
                flat[off + index]
            }
            Node::Add(ts) => ts.iter().map(|t| t.eval_flat(flat)).sum(),
            Node::Mul(ts) => ts.iter().map(|t| t.eval_flat(flat)).product(),
            Node::Pow(b, k) => b.eval_flat(flat).powi(*k as i32),
            Node::Neg(e) => -e.eval_flat(flat),
        }
    }

    /// Exact partial derivative with respect to `block[index]`.
    pub fn deriv(&self, block: &str, index: usize) -> Result<Expr> {
        self.space.flat_index(block, index)?;
        Ok(self.deriv_inner(block, index))
    }

    fn deriv_inner(&self, block: &str, index: usize) -> Expr {
        let space = self.space.clone();
        match &*self.node {
            Node::Const(_) => Expr::constant(space, 0.0),
            Node::Var { block: b, index: i } => {
                if &**b == block && *i == index {
                    Expr::constant(space, 1.0)
                } else {
                    Expr::constant(space, 0.0)
                }
            }
            Node::Add(ts) => {
                let ds = ts.iter().map(|t| t.deriv_inner(block, index)).collect();
                Expr::add(ds).expect("same space")
            }
            Node::Mul(ts) => {
                // product rule over the factor list
                let mut terms = Vec::with_capacity(ts.len());
                for (i, _) in ts.iter().enumerate() {
                    let mut fs: Vec<Expr> = ts.to_vec();
                    fs[i] = fs[i].deriv_inner(block, index);
                    terms.push(Expr::mul(fs).expect("same space"));
                }
                Expr::add(terms).expect("same space")
            }
            Node::Pow(b, k) => {
                let db = b.deriv_inner(block, index);
                let kk = Expr::constant(space, *k as f64);
                Expr::mul(vec![kk, Expr::pow(b.clone(), k - 1), db]).expect("same space")
            }
            Node::Neg(e) => Expr::neg(e.deriv_inner(block, index)),
        }
    }

    /// Gradient with respect to one block, evaluated at `pt`.
    pub fn grad(&self, block: &str, pt: &Point) -> Result<Vec<f64>> {
        let dim = self.space.block_dim(block)?;
        let mut out = Vec::with_capacity(dim);
        for i in 0..dim {
            out.push(self.deriv(block, i)?.eval(pt)?);
        }
        Ok(out)
    }

    /// Gradient with respect to the full flat vector.
    pub fn grad_full(&self, pt: &Point) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.space.total_dim());
        let names: Vec<String> = self.space.blocks().map(|(n, _)| n.to_string()).collect();
        for name in names {
            out.extend(self.grad(&name, pt)?);
        }
        Ok(out)
    }

    /// Mixed second derivative matrix d²e / d(blockA) d(blockB), rows indexed
    /// by blockA, evaluated at `pt`. Differentiation order is normalized by
    /// flat index, so `hessian(A, B)` is exactly the transpose of
    /// `hessian(B, A)` (identical expression trees entrywise).
    pub fn hessian(&self, block_a: &str, block_b: &str, pt: &Point) -> Result<DMatrix<f64>> {
        let da = self.space.block_dim(block_a)?;
        let db = self.space.block_dim(block_b)?;
        let mut h = DMatrix::zeros(da, db);
        for i in 0..da {
            let fi = self.space.flat_index(block_a, i)?;
            for j in 0..db {
                let fj = self.space.flat_index(block_b, j)?;
                let d2 = if fi <= fj {
                    self.deriv(block_a, i)?.deriv(block_b, j)?
                } else {
                    self.deriv(block_b, j)?.deriv(block_a, i)?
                };
                h[(i, j)] = d2.eval(pt)?;
            }
        }
        Ok(h)
    }

    /// Total degree of the polynomial restricted to the given block's
    /// variables (all other blocks treated as constants).
    pub fn degree_in_block(&self, block: &str) -> u32 {
        match &*self.node {
            Node::Const(_) => 0,
            Node::Var { block: b, .. } => u32::from(&**b == block),
            Node::Add(ts) => ts.iter().map(|t| t.degree_in_block(block)).max().unwrap_or(0),
            Node::Mul(ts) => ts.iter().map(|t| t.degree_in_block(block)).sum(),
            Node::Pow(b, k) => b.degree_in_block(block).saturating_mul(*k),
            Node::Neg(e) => e.degree_in_block(block),
        }
    }

    /// Total degree over all variables.
    pub fn degree(&self) -> u32 {
        match &*self.node {
            Node::Const(_) => 0,
            Node::Var { .. } => 1,
            Node::Add(ts) => ts.iter().map(|t| t.degree()).max().unwrap_or(0),
            Node::Mul(ts) => ts.iter().map(|t| t.degree()).sum(),
            Node::Pow(b, k) => b.degree().saturating_mul(*k),
            Node::Neg(e) => e.degree(),
        }
    }

    pub fn uses_block(&self, block: &str) -> bool {
        self.degree_in_block(block) > 0
    }

    /// Replaces every variable of `block` by the given numeric values.
    /// The result lives in the same space; the block simply no longer occurs.
    pub fn substitute_block(&self, block: &str, values: &[f64]) -> Result<Expr> {
        let dim = self.space.block_dim(block)?;
        if values.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: values.len() });
        }
        Ok(self.substitute_inner(block, values))
    }

    fn substitute_inner(&self, block: &str, values: &[f64]) -> Expr {
        let space = self.space.clone();
        match &*self.node {
            Node::Const(_) => self.clone(),
            Node::Var { block: b, index } => {
                if &**b == block {
                    Expr::constant(space, values[*index])
                } else {
                    self.clone()
                }
            }
            Node::Add(ts) => {
                Expr::add(ts.iter().map(|t| t.substitute_inner(block, values)).collect())
                    .expect("same space")
            }
            Node::Mul(ts) => {
                Expr::mul(ts.iter().map(|t| t.substitute_inner(block, values)).collect())
                    .expect("same space")
            }
            Node::Pow(b, k) => Expr::pow(b.substitute_inner(block, values), *k),
            Node::Neg(e) => Expr::neg(e.substitute_inner(block, values)),
        }
    }

    /// Moves the expression to another space. Every block the expression
    /// actually references must exist there with at least the needed indices.
    pub fn lift_to(&self, space: &Arc<VarSpace>) -> Result<Expr> {
        self.check_vars_exist(space)?;
        Ok(self.rebind(space))
    }

    fn check_vars_exist(&self, space: &Arc<VarSpace>) -> Result<()> {
        match &*self.node {
            Node::Const(_) => Ok(()),
            Node::Var { block, index } => space.flat_index(block, *index).map(|_| ()),
            Node::Add(ts) | Node::Mul(ts) => {
                ts.iter().try_for_each(|t| t.check_vars_exist(space))
            }
            Node::Pow(b, _) => b.check_vars_exist(space),
            Node::Neg(e) => e.check_vars_exist(space),
        }
    }

    fn rebind(&self, space: &Arc<VarSpace>) -> Expr {
        let node = match &*self.node {
            Node::Const(c) => Node::Const(*c),
            Node::Var { block, index } => Node::Var { block: block.clone(), index: *index },
            Node::Add(ts) => Node::Add(ts.iter().map(|t| t.rebind(space)).collect()),
            Node::Mul(ts) => Node::Mul(ts.iter().map(|t| t.rebind(space)).collect()),
            Node::Pow(b, k) => Node::Pow(b.rebind(space), *k),
            Node::Neg(e) => Node::Neg(e.rebind(space)),
        };
        Expr { node: Arc::new(node), space: space.clone() }
    }

    /// Renames a block, producing an expression on the given target space
    /// (which must contain the new name with the same dimension).
    pub fn rename_block(&self, from: &str, to: &str, space: &Arc<VarSpace>) -> Result<Expr> {
        let dim = self.space.block_dim(from)?;
        if space.block_dim(to)? != dim {
            return Err(Error::InvalidInput(format!(
                "rename target `{to}` has a different dimension"
            )));
        }
        let renamed = self.rename_inner(from, to);
        renamed.lift_to(space)
    }

    fn rename_inner(&self, from: &str, to: &str) -> Expr {
        let space = self.space.clone();
        let node = match &*self.node {
            Node::Const(c) => Node::Const(*c),
            Node::Var { block, index } => {
                let block = if &**block == from { Arc::from(to) } else { block.clone() };
                Node::Var { block, index: *index }
            }
            Node::Add(ts) => Node::Add(ts.iter().map(|t| t.rename_inner(from, to)).collect()),
            Node::Mul(ts) => Node::Mul(ts.iter().map(|t| t.rename_inner(from, to)).collect()),
            Node::Pow(b, k) => Node::Pow(b.rename_inner(from, to), *k),
            Node::Neg(e) => Node::Neg(e.rename_inner(from, to)),
        };
        Expr { node: Arc::new(node), space }
    }

    /// Borrowed structural view for pattern matching.
    pub fn view(&self) -> ExprView<'_> {
        match &*self.node {
            Node::Const(c) => ExprView::Const(*c),
            Node::Var { block, index } => ExprView::Var { block, index: *index },
            Node::Add(ts) => ExprView::Add(ts),
            Node::Mul(ts) => ExprView::Mul(ts),
            Node::Pow(b, k) => ExprView::Pow(b, *k),
            Node::Neg(e) => ExprView::Neg(e),
        }
    }

    /// Compiles to a flat postfix program for fast repeated evaluation.
    pub fn compile(&self) -> CompiledExpr {
        let mut ops = Vec::new();
        self.emit(&mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Var(_) => depth += 1,
                Op::Add(n) | Op::Mul(n) => depth = depth + 1 - *n as usize,
                Op::Pow(_) | Op::Neg => {}
            }
            max_depth = max_depth.max(depth);
        }
        CompiledExpr { ops, stack_cap: max_depth.max(1) }
    }

    fn emit(&self, ops: &mut Vec<Op>) {
        match &*self.node {
            Node::Const(c) => ops.push(Op::Const(*c)),
            Node::Var { block, index } => {
                let off = self.space.block_offset(block).expect("validated var");
                ops.push(Op::Var(off + index));
            }
            Node::Add(ts) => {
                for t in ts {
                    t.emit(ops);
                }
                ops.push(Op::Add(ts.len() as u32));
            }
            Node::Mul(ts) => {
                for t in ts {
                    t.emit(ops);
                }
                ops.push(Op::Mul(ts.len() as u32));
            }
            Node::Pow(b, k) => {
                b.emit(ops);
                ops.push(Op::Pow(*k));
            }
            Node::Neg(e) => {
                e.emit(ops);
                ops.push(Op::Neg);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.node {
            Node::Const(c) => write!(f, "(const {c})"),
            Node::Var { block, index } => write!(f, "(var {block} {index})"),
            Node::Add(ts) => {
                write!(f, "(+")?;
                for t in ts {
                    write!(f, " {t}")?;
                }
                write!(f, ")")
            }
            Node::Mul(ts) => {
                write!(f, "(*")?;
                for t in ts {
                    write!(f, " {t}")?;
                }
                write!(f, ")")
            }
            Node::Pow(b, k) => write!(f, "(pow {b} {k})"),
            Node::Neg(e) => write!(f, "(neg {e})"),
        }
    }
}

/// Structural view of an expression node.
#[derive(Debug)]
pub enum ExprView<'a> {
    Const(f64),
    Var { block: &'a str, index: usize },
    Add(&'a [Expr]),
    Mul(&'a [Expr]),
    Pow(&'a Expr, u32),
    Neg(&'a Expr),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Var(usize),
    Add(u32),
    Mul(u32),
    Pow(u32),
    Neg,
}

/// Flat postfix form of an expression; index-resolved, no name lookups.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    stack_cap: usize,
}

impl CompiledExpr {
    pub fn stack_capacity(&self) -> usize {
        self.stack_cap
    }

    /// Evaluates against a flat value vector using a caller-provided stack.
    pub fn eval(&self, flat: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        for op in &self.ops {
            match *op {
                Op::Const(c) => stack.push(c),
                Op::Var(i) => stack.push(flat[i]),
                Op::Add(n) => {
                    let at = stack.len() - n as usize;
                    let mut s = 0.0;
                    for v in stack.drain(at..) {
                        s += v;
                    }
                    stack.push(s);
                }
                Op::Mul(n) => {
                    let at = stack.len() - n as usize;
                    let mut s = 1.0;
                    for v in stack.drain(at..) {
                        s *= v;
                    }
                    stack.push(s);
                }
                Op::Pow(k) => {
                    let v = stack.last_mut().unwrap();
                    *v = v.powi(k as i32);
                }
                Op::Neg => {
                    let v = stack.last_mut().unwrap();
                    *v = -*v;
                }
            }
        }
        stack.pop().unwrap()
    }
}

/// Parses the prefix s-expression format over `{+, *, neg, pow, const, var}`.
pub fn parse(text: &str, space: &Arc<VarSpace>) -> Result<Expr> {
    let mut p = Parser { bytes: text.as_bytes(), pos: 0, space };
    let e = p.parse_expr()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return Err(Error::Parse { pos: p.pos, msg: "trailing input".into() });
    }
    Ok(e)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    space: &'a Arc<VarSpace>,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, b: u8) -> Result<()> {
        self.skip_ws();
        if self.pos < self.bytes.len() && self.bytes[self.pos] == b {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Parse {
                pos: self.pos,
                msg: format!("expected `{}`", b as char),
            })
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c.is_ascii_whitespace() || c == b'(' || c == b')' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse { pos: self.pos, msg: "expected a token".into() });
        }
        Ok(std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii"))
    }

    fn at_close(&mut self) -> bool {
        self.skip_ws();
        self.pos < self.bytes.len() && self.bytes[self.pos] == b')'
    }

    fn parse_expr(&mut self) -> Result<Expr> {
        self.expect(b'(')?;
        let start = self.pos;
        let head = self.token()?;
        let e = match head {
            "+" | "*" => {
                let mut args = Vec::new();
                while !self.at_close() {
                    if self.pos >= self.bytes.len() {
                        return Err(Error::Parse { pos: self.pos, msg: "unbalanced `(`".into() });
                    }
                    args.push(self.parse_expr()?);
                }
                if args.is_empty() {
                    return Err(Error::Parse { pos: start, msg: format!("`{head}` needs operands") });
                }
                if head == "+" {
                    Expr::add(args).map_err(|e| self.lift_err(start, e))?
                } else {
                    Expr::mul(args).map_err(|e| self.lift_err(start, e))?
                }
            }
            "neg" => Expr::neg(self.parse_expr()?),
            "pow" => {
                let base = self.parse_expr()?;
                let tpos = self.pos;
                let t = self.token()?;
                let k: u32 = t.parse().map_err(|_| Error::Parse {
                    pos: tpos,
                    msg: format!("exponent must be a nonnegative integer, got `{t}`"),
                })?;
                Expr::pow(base, k)
            }
            "const" => {
                let tpos = self.pos;
                let t = self.token()?;
                let c: f64 = t
                    .parse()
                    .map_err(|_| Error::Parse { pos: tpos, msg: format!("bad number `{t}`") })?;
                if !c.is_finite() {
                    return Err(Error::Parse {
                        pos: tpos,
                        msg: format!("constants must be finite, got `{t}`"),
                    });
                }
                Expr::constant(self.space.clone(), c)
            }
            "var" => {
                let bpos = self.pos;
                let block = self.token()?.to_string();
                let ipos = self.pos;
                let it = self.token()?;
                let index: usize = it.parse().map_err(|_| Error::Parse {
                    pos: ipos,
                    msg: format!("bad index `{it}`"),
                })?;
                Expr::var(self.space.clone(), &block, index)
                    .map_err(|e| self.lift_err(bpos, e))?
            }
            other => {
                return Err(Error::Parse { pos: start, msg: format!("unknown symbol `{other}`") })
            }
        };
        self.expect(b')')
            .map_err(|_| Error::Parse { pos: self.pos, msg: "unbalanced `(`".into() })?;
        Ok(e)
    }

    fn lift_err(&self, pos: usize, e: Error) -> Error {
        match e {
            Error::Parse { .. } => e,
            other => Error::Parse { pos, msg: other.to_string() },
        }
    }
}

/// Linear-form extraction: writes `e` as `constant + sum coeff[i] * flat[i]`
/// when `e` is affine over the whole space.
pub fn affine_form(e: &Expr) -> Option<(Vec<f64>, f64)> {
    if e.degree() > 1 {
        return None;
    }
    let space = e.space();
    let zero = Point::zeros(space.clone());
    let c0 = e.eval(&zero).ok()?;
    let coeffs = e.grad_full(&zero).ok()?;
    Some((coeffs, c0))
}

/// Quadratic-form extraction over the whole space:
/// `e = 0.5 w'Hw + g'w + c` with constant `H`; `None` if degree > 2.
pub fn quadratic_form(e: &Expr) -> Option<(DMatrix<f64>, Vec<f64>, f64)> {
    if e.degree() > 2 {
        return None;
    }
    let space = e.space();
    let zero = Point::zeros(space.clone());
    let c = e.eval(&zero).ok()?;
    let g = e.grad_full(&zero).ok()?;
    let n = space.total_dim();
    let mut h = DMatrix::zeros(n, n);
    let names: Vec<(String, usize)> =
        space.blocks().map(|(n, d)| (n.to_string(), d)).collect();
    let mut row = 0usize;
    for (bi, di) in &names {
        for i in 0..*di {
            let dei = e.deriv(bi, i).ok()?;
            let mut col = 0usize;
            for (bj, dj) in &names {
                for j in 0..*dj {
                    h[(row, col)] = dei.deriv(bj, j).ok()?.eval(&zero).ok()?;
                    col += 1;
                }
            }
            row += 1;
        }
    }
    Some((h, g, c))
}

/// Per-expression cache of compiled derivative programs keyed by flat index.
pub struct DerivCache {
    base: Expr,
    derivs: HashMap<usize, Expr>,
}

impl DerivCache {
    pub fn new(base: Expr) -> DerivCache {
        DerivCache { base, derivs: HashMap::new() }
    }

    pub fn deriv(&mut self, block: &str, index: usize) -> Result<&Expr> {
        let flat = self.base.space().flat_index(block, index)?;
        if !self.derivs.contains_key(&flat) {
            let d = self.base.deriv(block, index)?;
            self.derivs.insert(flat, d);
        }
        Ok(&self.derivs[&flat])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space_xy() -> Arc<VarSpace> {
        VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap()
    }

    fn space_xu() -> Arc<VarSpace> {
        VarSpace::new(vec![("x", 1), ("u", 2)]).unwrap()
    }

    /// (x-1)^2 + (y-1)^2 over (x, y)
    fn upper_objective(s: &Arc<VarSpace>) -> Expr {
        let x = Expr::var(s.clone(), "x", 0).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let m1 = Expr::constant(s.clone(), -1.0);
        let a = Expr::pow(Expr::add(vec![x, m1.clone()]).unwrap(), 2);
        let b = Expr::pow(Expr::add(vec![y, m1]).unwrap(), 2);
        Expr::add(vec![a, b]).unwrap()
    }

    fn pt(s: &Arc<VarSpace>, vals: &[f64]) -> Point {
        Point::new(s.clone(), vals.to_vec()).unwrap()
    }

    // central finite differences, the independent derivative oracle
    fn fd_grad(e: &Expr, block: &str, at: &Point, h: f64) -> Vec<f64> {
        let dim = e.space().block_dim(block).unwrap();
        let off = e.space().block_offset(block).unwrap();
        let mut out = Vec::with_capacity(dim);
        for i in 0..dim {
            let mut plus = at.clone();
            let mut minus = at.clone();
            plus.values_mut()[off + i] += h;
            minus.values_mut()[off + i] -= h;
            out.push((e.eval(&plus).unwrap() - e.eval(&minus).unwrap()) / (2.0 * h));
        }
        out
    }

    #[test]
    fn eval_examples() {
        let s = space_xy();
        let e = upper_objective(&s);
        assert_eq!(e.eval(&pt(&s, &[0.0, 1.0])).unwrap(), 1.0);

        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let negy = Expr::neg(y);
        assert_eq!(negy.eval(&pt(&s, &[0.0, 1.0])).unwrap(), -1.0);

        // x(u1-u2) - 1 at (x,u) = (0,(0,1))
        let su = space_xu();
        let x = Expr::var(su.clone(), "x", 0).unwrap();
        let u1 = Expr::var(su.clone(), "u", 0).unwrap();
        let u2 = Expr::var(su.clone(), "u", 1).unwrap();
        let e = Expr::add(vec![
            Expr::mul(vec![x, Expr::sub(u1, u2).unwrap()]).unwrap(),
            Expr::constant(su.clone(), -1.0),
        ])
        .unwrap();
        assert_eq!(e.eval(&pt(&su, &[0.0, 0.0, 1.0])).unwrap(), -1.0);
    }

    #[test]
    fn grad_examples() {
        let s = space_xy();
        let x = Expr::var(s.clone(), "x", 0).unwrap();
        let sq = Expr::pow(
            Expr::add(vec![x, Expr::constant(s.clone(), -1.0)]).unwrap(),
            2,
        );
        assert_eq!(sq.grad("x", &pt(&s, &[0.0, 0.0])).unwrap(), vec![-2.0]);

        // u1(x+y-1) + u2(-x+y-1) over (x,y,u), gradient in u at (x,y) = (0,1)
        let s3 = VarSpace::new(vec![("x", 1), ("y", 1), ("u", 2)]).unwrap();
        let x = Expr::var(s3.clone(), "x", 0).unwrap();
        let y = Expr::var(s3.clone(), "y", 0).unwrap();
        let u1 = Expr::var(s3.clone(), "u", 0).unwrap();
        let u2 = Expr::var(s3.clone(), "u", 1).unwrap();
        let m1 = Expr::constant(s3.clone(), -1.0);
        let t1 = Expr::mul(vec![
            u1,
            Expr::add(vec![x.clone(), y.clone(), m1.clone()]).unwrap(),
        ])
        .unwrap();
        let t2 = Expr::mul(vec![
            u2,
            Expr::add(vec![Expr::neg(x), y, m1]).unwrap(),
        ])
        .unwrap();
        let e = Expr::add(vec![t1, t2]).unwrap();
        let g = e.grad("u", &pt(&s3, &[0.0, 1.0, 0.3, 0.7])).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);

        // y^3 at y = -3: oracle first, then the frozen value 27
        let sy = VarSpace::new(vec![("y", 1)]).unwrap();
        let y3 = Expr::pow(Expr::var(sy.clone(), "y", 0).unwrap(), 3);
        let at = pt(&sy, &[-3.0]);
        let fd = fd_grad(&y3, "y", &at, 1e-6);
        let sym = y3.grad("y", &at).unwrap();
        assert!((sym[0] - fd[0]).abs() / fd[0].abs() <= 1e-5);
        assert_eq!(sym, vec![27.0]);
    }

    #[test]
    fn hessian_examples() {
        let s = space_xy();
        let e = upper_objective(&s);
        let h = e.hessian("x", "x", &pt(&s, &[0.3, -0.2])).unwrap();
        assert_eq!(h[(0, 0)], 2.0);

        let s3 = VarSpace::new(vec![("x", 1), ("y", 1), ("u", 2)]).unwrap();
        let y = Expr::var(s3.clone(), "y", 0).unwrap();
        let u1 = Expr::var(s3.clone(), "u", 0).unwrap();
        let x = Expr::var(s3.clone(), "x", 0).unwrap();
        let lin = Expr::add(vec![
            Expr::neg(y.clone()),
            Expr::mul(vec![
                u1.clone(),
                Expr::add(vec![x, y.clone(), Expr::constant(s3.clone(), -1.0)]).unwrap(),
            ])
            .unwrap(),
        ])
        .unwrap();
        let h = lin.hessian("y", "y", &pt(&s3, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(h[(0, 0)], 0.0);

        // u1 * y^3, d2/dy2 = 6*u1*y = -18 at (y, u1) = (-3, 1)
        let su = VarSpace::new(vec![("y", 1), ("u", 1)]).unwrap();
        let e = Expr::mul(vec![
            Expr::var(su.clone(), "u", 0).unwrap(),
            Expr::pow(Expr::var(su.clone(), "y", 0).unwrap(), 3),
        ])
        .unwrap();
        let h = e.hessian("y", "y", &pt(&su, &[-3.0, 1.0])).unwrap();
        assert_eq!(h[(0, 0)], -18.0);
    }

    #[test]
    fn hessian_mixed_transpose() {
        let s = VarSpace::new(vec![("x", 2), ("y", 2)]).unwrap();
        let x0 = Expr::var(s.clone(), "x", 0).unwrap();
        let x1 = Expr::var(s.clone(), "x", 1).unwrap();
        let y0 = Expr::var(s.clone(), "y", 0).unwrap();
        let y1 = Expr::var(s.clone(), "y", 1).unwrap();
        let e = Expr::add(vec![
            Expr::mul(vec![x0.clone(), y1.clone(), y1.clone()]).unwrap(),
            Expr::mul(vec![x1, Expr::pow(y0, 2)]).unwrap(),
            Expr::mul(vec![x0, y1]).unwrap(),
        ])
        .unwrap();
        let at = pt(&s, &[1.3, -0.4, 0.7, 2.1]);
        let hxy = e.hessian("x", "y", &at).unwrap();
        let hyx = e.hessian("y", "x", &at).unwrap();
        assert_eq!(hxy, hyx.transpose());
    }

    #[test]
    fn parse_examples() {
        let s = space_xy();
        let text = "(+ (pow (+ (var x 0) (const -1)) 2) (pow (+ (var y 0) (const -1)) 2))";
        let e = parse(text, &s).unwrap();
        assert_eq!(e.eval(&pt(&s, &[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(e.eval(&pt(&s, &[0.5, 0.5])).unwrap(), 0.5);

        let z = parse("(const 0)", &s).unwrap();
        assert_eq!(z.as_constant(), Some(0.0));

        let err = parse("(+ (var x 0)", &s).unwrap_err();
        match err {
            Error::Parse { pos, .. } => assert_eq!(pos, 12),
            other => panic!("expected parse error, got {other:?}"),
        }

        assert!(matches!(parse("(sin (var x 0))", &s), Err(Error::Parse { .. })));
        assert!(matches!(parse("(var w 0)", &s), Err(Error::Parse { .. })));
    }

    #[test]
    fn print_parse_roundtrip() {
        let s = VarSpace::new(vec![("x", 2), ("y", 1)]).unwrap();
        let x0 = Expr::var(s.clone(), "x", 0).unwrap();
        let x1 = Expr::var(s.clone(), "x", 1).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let e = Expr::add(vec![
            Expr::mul(vec![Expr::constant(s.clone(), 2.5), x0.clone(), y.clone()]).unwrap(),
            Expr::neg(Expr::pow(x1, 4)),
            Expr::pow(Expr::add(vec![x0, y, Expr::constant(s.clone(), 0.125)]).unwrap(), 2),
        ])
        .unwrap();
        let text = e.to_string();
        let back = parse(&text, &s).unwrap();
        for k in 0..100 {
            let t = k as f64;
            let v = [t.sin() * 2.0, (t * 0.7).cos(), t.fract() - 0.5];
            let p = pt(&s, &v);
            assert!((e.eval(&p).unwrap() - back.eval(&p).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn compiled_matches_tree() {
        let s = VarSpace::new(vec![("x", 2), ("y", 2)]).unwrap();
        let x0 = Expr::var(s.clone(), "x", 0).unwrap();
        let y1 = Expr::var(s.clone(), "y", 1).unwrap();
        let e = Expr::add(vec![
            Expr::pow(Expr::sub(x0.clone(), y1.clone()).unwrap(), 3),
            Expr::mul(vec![x0, y1, Expr::constant(s.clone(), -0.5)]).unwrap(),
            Expr::constant(s.clone(), 7.25),
        ])
        .unwrap();
        let c = e.compile();
        let mut stack = Vec::with_capacity(c.stack_capacity());
        let v = [0.3, -1.2, 4.0, 0.9];
        assert_eq!(c.eval(&v, &mut stack), e.eval_flat(&v));
    }

    #[test]
    fn substitution_and_rename() {
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let x = Expr::var(s.clone(), "x", 0).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let e = Expr::mul(vec![x, Expr::pow(y, 2)]).unwrap();
        let fixed = e.substitute_block("x", &[3.0]).unwrap();
        assert!(!fixed.uses_block("x"));
        assert_eq!(fixed.eval(&pt(&s, &[99.0, 2.0])).unwrap(), 12.0);

        let sz = VarSpace::new(vec![("x", 1), ("z", 1)]).unwrap();
        let renamed = e.rename_block("y", "z", &sz).unwrap();
        assert_eq!(
            renamed
                .eval(&Point::new(sz.clone(), vec![3.0, 2.0]).unwrap())
                .unwrap(),
            12.0
        );
    }

    #[test]
    fn degree_queries() {
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let x = Expr::var(s.clone(), "x", 0).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let e = Expr::mul(vec![x.clone(), Expr::pow(y.clone(), 3)]).unwrap();
        assert_eq!(e.degree_in_block("x"), 1);
        assert_eq!(e.degree_in_block("y"), 3);
        assert_eq!(e.degree(), 4);
        let aff = Expr::add(vec![Expr::mul(vec![x, y.clone()]).unwrap(), y]).unwrap();
        assert_eq!(aff.degree_in_block("y"), 1);
    }
}
