//! A small expression language for model coefficients.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?            right associative
//! atom    := number | 'x' '[' int ']' | 'm1' '[' int ']' | 'm2'
//!          | func '(' expr ')' | '(' expr ')'
//! func    := exp | log | tanh | sin | cos | abs | sqrt
//! ```
//!
//! `x[k]` is the k-th coordinate of the particle position, `m1[k]` the k-th
//! coordinate of the mean of the measure and `m2` its second moment
//! `∫|y|^2 μ(dy)`. A leading minus in front of a literal is folded into the
//! literal.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{sq_norm, EmpiricalMeasure};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at byte {offset}: expected {}, found {found}", expected.join(" or "))]
    Syntax {
        offset: usize,
        expected: Vec<&'static str>,
        found: String,
    },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
}

impl ParseError {
    pub fn offset(&self) -> Option<usize> {
        match self {
            Self::Empty => None,
            Self::Syntax { offset, .. } | Self::UnknownIdentifier { offset, .. } => Some(*offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("sqrt of negative value {0}")]
    SqrtDomain(f64),
    #[error("non-finite result")]
    NonFinite,
    #[error("{var}[{index}] out of range for dimension {dim}")]
    Index {
        var: &'static str,
        index: usize,
        dim: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            Self::Add => '+',
            Self::Sub => '-',
            Self::Mul => '*',
            Self::Div => '/',
            Self::Pow => '^',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            Self::Add | Self::Sub => 1,
            Self::Mul | Self::Div => 2,
            Self::Pow => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Tanh,
    Sin,
    Cos,
    Abs,
    Sqrt,
}

impl Func {
    const ALL: [Func; 7] = [
        Func::Exp,
        Func::Log,
        Func::Tanh,
        Func::Sin,
        Func::Cos,
        Func::Abs,
        Func::Sqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Tanh => "tanh",
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Abs => "abs",
            Self::Sqrt => "sqrt",
        }
    }

    fn lookup(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    fn apply(self, v: f64) -> Result<f64, EvalError> {
        Ok(match self {
            Self::Exp => v.exp(),
            Self::Log if v <= 0.0 => return Err(EvalError::LogDomain(v)),
            Self::Log => v.ln(),
            Self::Tanh => v.tanh(),
            Self::Sin => v.sin(),
            Self::Cos => v.cos(),
            Self::Abs => v.abs(),
            Self::Sqrt if v < 0.0 => return Err(EvalError::SqrtDomain(v)),
            Self::Sqrt => v.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// `x[k]`
    State(usize),
    /// `m1[k]`
    Mean(usize),
    /// `m2`
    SecondMoment,
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Linear statistics of a measure visible to expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFeatures {
    pub m1: Vec<f64>,
    pub m2: f64,
}

impl MeasureFeatures {
    pub fn of(mu: &EmpiricalMeasure) -> Self {
        Self {
            m1: mu.mean(),
            m2: mu.second_moment(),
        }
    }

    /// Features of the measure whose atoms are the flat `n * dim` slice.
    pub fn of_atoms(dim: usize, atoms: &[f64]) -> Self {
        let n = atoms.len() / dim;
        let mut m1 = vec![0.0; dim];
        let mut m2 = 0.0;
        for a in atoms.chunks_exact(dim) {
            for (acc, v) in m1.iter_mut().zip(a) {
                *acc += v;
            }
            m2 += sq_norm(a);
        }
        m1.iter_mut().for_each(|v| *v /= n as f64);
        Self {
            m1,
            m2: m2 / n as f64,
        }
    }
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Self::Binary(op, ..) => op.precedence(),
            Self::Neg(_) => 3,
            _ => 5,
        }
    }

    pub fn eval(&self, x: &[f64], f: &MeasureFeatures) -> Result<f64, EvalError> {
        match self {
            Self::Num(v) => Ok(*v),
            Self::State(k) => x.get(*k).copied().ok_or(EvalError::Index {
                var: "x",
                index: *k,
                dim: x.len(),
            }),
            Self::Mean(k) => f.m1.get(*k).copied().ok_or(EvalError::Index {
                var: "m1",
                index: *k,
                dim: f.m1.len(),
            }),
            Self::SecondMoment => Ok(f.m2),
            Self::Neg(e) => Ok(-e.eval(x, f)?),
            Self::Call(func, e) => func.apply(e.eval(x, f)?),
            Self::Binary(op, l, r) => {
                let (a, b) = (l.eval(x, f)?, r.eval(x, f)?);
                Ok(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div if b == 0.0 => return Err(EvalError::DivisionByZero),
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                })
            }
        }
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Self::Neg(e) | Self::Call(_, e) => e.visit(f),
            Self::Binary(_, l, r) => {
                l.visit(f);
                r.visit(f);
            }
            _ => {}
        }
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Num(v) if v.is_sign_negative() => write!(f, "(-{:?})", v.abs()),
            Self::Num(v) => write!(f, "{v:?}"),
            Self::State(k) => write!(f, "x[{k}]"),
            Self::Mean(k) => write!(f, "m1[{k}]"),
            Self::SecondMoment => f.write_str("m2"),
            Self::Neg(e) => {
                f.write_str("-")?;
                write_child(f, e, e.precedence() < 3)
            }
            Self::Call(func, e) => write!(f, "{}({e})", func.name()),
            Self::Binary(BinOp::Pow, l, r) => {
                write_child(f, l, l.precedence() <= 4)?;
                f.write_str("^")?;
                write_child(f, r, r.precedence() < 3)
            }
            Self::Binary(op, l, r) => {
                let p = op.precedence();
                write_child(f, l, l.precedence() < p)?;
                write!(f, "{}", op.symbol())?;
                write_child(f, r, r.precedence() <= p)
            }
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// A parsed coefficient together with the source it was parsed from.
///
/// Serializes as its printed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CoefficientExpr {
    root: Expr,
}

impl CoefficientExpr {
    pub fn parse(src: &str) -> Result<Self, ParseError> {
        Parser::new(src).parse().map(|root| Self { root })
    }

    pub fn constant(v: f64) -> Self {
        Self { root: Expr::Num(v) }
    }

    pub fn root(&self) -> &Expr {
        &self.root
    }

    /// Evaluates and rejects non-finite results.
    pub fn eval(&self, x: &[f64], f: &MeasureFeatures) -> Result<f64, EvalError> {
        let v = self.root.eval(x, f)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    pub fn eval_measure(&self, x: &[f64], mu: &EmpiricalMeasure) -> Result<f64, EvalError> {
        self.eval(x, &MeasureFeatures::of(mu))
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.root, Expr::Num(_))
    }

    pub fn uses_state(&self) -> bool {
        let mut found = false;
        self.root.visit(&mut |e| found |= matches!(e, Expr::State(_)));
        found
    }

    /// Largest `x[k]` and `m1[k]` index referenced, if any.
    pub fn max_indices(&self) -> (Option<usize>, Option<usize>) {
        let (mut xs, mut ms) = (None, None);
        self.root.visit(&mut |e| match e {
            Expr::State(k) => xs = xs.max(Some(*k)),
            Expr::Mean(k) => ms = ms.max(Some(*k)),
            _ => {}
        });
        (xs, ms)
    }
}

impl fmt::Display for CoefficientExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

impl std::str::FromStr for CoefficientExpr {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, ParseError> {
        Self::parse(s)
    }
}

impl TryFrom<String> for CoefficientExpr {
    type Error = ParseError;
    fn try_from(s: String) -> Result<Self, ParseError> {
        Self::parse(&s)
    }
}

impl From<CoefficientExpr> for String {
    fn from(e: CoefficientExpr) -> Self {
        e.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::End => "end of input".into(),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_start: usize,
}

const OPERAND: &[&str] = &["number", "identifier", "`(`", "`-`"];

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            pos: 0,
            tok: Tok::End,
            tok_start: 0,
        }
    }

    fn parse(mut self) -> Result<Expr, ParseError> {
        if self.src.trim().is_empty() {
            return Err(ParseError::Empty);
        }
        self.advance()?;
        let e = self.expr()?;
        if self.tok != Tok::End {
            return Err(self.unexpected(&["operator", "end of input"]));
        }
        Ok(e)
    }

    fn unexpected(&self, expected: &[&'static str]) -> ParseError {
        ParseError::Syntax {
            offset: self.tok_start,
            expected: expected.to_vec(),
            found: self.tok.describe(),
        }
    }

    fn advance(&mut self) -> Result<(), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_start = self.pos;
        let Some(&c) = bytes.get(self.pos) else {
            self.tok = Tok::End;
            return Ok(());
        };
        if c.is_ascii_digit() || c == b'.' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
                self.pos += 1;
            }
            if matches!(bytes.get(self.pos), Some(b'e' | b'E')) {
                let mut look = self.pos + 1;
                if matches!(bytes.get(look), Some(b'+' | b'-')) {
                    look += 1;
                }
                if bytes.get(look).is_some_and(u8::is_ascii_digit) {
                    self.pos = look;
                    while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                }
            }
            let text = &self.src[start..self.pos];
            let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                offset: start,
                expected: vec!["number"],
                found: format!("`{text}`"),
            })?;
            if !value.is_finite() {
                return Err(ParseError::Syntax {
                    offset: start,
                    expected: vec!["finite number"],
                    found: format!("`{text}`"),
                });
            }
            self.tok = Tok::Num(value);
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                self.pos += 1;
            }
            self.tok = Tok::Ident(self.src[start..self.pos].to_string());
        } else if b"+-*/^()[]".contains(&c) {
            self.pos += 1;
            self.tok = Tok::Sym(c as char);
        } else {
            let ch = self.src[self.pos..].chars().next().unwrap_or('?');
            return Err(ParseError::Syntax {
                offset: self.pos,
                expected: OPERAND.to_vec(),
                found: format!("`{ch}`"),
            });
        }
        Ok(())
    }

    fn eat(&mut self, c: char) -> Result<bool, ParseError> {
        if self.tok == Tok::Sym(c) {
            self.advance()?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn expect(&mut self, c: char, what: &'static str) -> Result<(), ParseError> {
        if self.eat(c)? {
            Ok(())
        } else {
            Err(self.unexpected(&[what]))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Sym('+') => BinOp::Add,
                Tok::Sym('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance()?;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.tok {
                Tok::Sym('*') => BinOp::Mul,
                Tok::Sym('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.advance()?;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-')? {
            return Ok(match self.unary()? {
                Expr::Num(v) => Expr::Num(-v),
                e => Expr::Neg(Box::new(e)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat('^')? {
            let exp = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn index(&mut self) -> Result<usize, ParseError> {
        self.expect('[', "`[`")?;
        let k = match self.tok {
            Tok::Num(v) if v >= 0.0 && v.fract() == 0.0 && v < 1e9 => v as usize,
            _ => return Err(self.unexpected(&["non-negative integer index"])),
        };
        self.advance()?;
        self.expect(']', "`]`")?;
        Ok(k)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match std::mem::replace(&mut self.tok, Tok::End) {
            Tok::Num(v) => {
                self.advance()?;
                Ok(Expr::Num(v))
            }
            Tok::Sym('(') => {
                self.advance()?;
                let e = self.expr()?;
                self.expect(')', "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let start = self.tok_start;
                self.advance()?;
                match name.as_str() {
                    "x" => Ok(Expr::State(self.index()?)),
                    "m1" => Ok(Expr::Mean(self.index()?)),
                    "m2" => Ok(Expr::SecondMoment),
                    other => match Func::lookup(other) {
                        Some(func) => {
                            self.expect('(', "`(`")?;
                            let arg = self.expr()?;
                            self.expect(')', "`)`")?;
                            Ok(Expr::Call(func, Box::new(arg)))
                        }
                        None => Err(ParseError::UnknownIdentifier {
                            offset: start,
                            name: name.clone(),
                        }),
                    },
                }
            }
            other => {
                self.tok = other;
                Err(self.unexpected(OPERAND))
            }
        }
    }
}
