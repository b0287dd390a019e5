//! Closed-form expression grammar for boundary data and custom level sets.
//!
//! Grammar (usual precedence, `^` right-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | var | const | func '(' expr ')' | '(' expr ')'
//! var    := x1..x4 | x | y | z | w
//! const  := pi | e
//! func   := sin cos tan exp log sqrt sinh cosh tanh abs
//! ```
//!
//! Expressions are differentiated symbolically, so gradients and Hessians of
//! boundary data are exact up to round-off.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unexpected character '{ch}' at column {col}")]
    BadChar { ch: char, col: usize },
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unexpected token '{tok}' at column {col}")]
    Unexpected { tok: String, col: usize },
    #[error("unknown identifier '{0}'")]
    UnknownIdent(String),
    #[error("variable '{name}' out of range for dimension {dim}")]
    VarOutOfRange { name: String, dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Sinh,
    Cosh,
    Tanh,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sqrt" => Func::Sqrt,
            "sinh" => Func::Sinh,
            "cosh" => Func::Cosh,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tan => v.tan(),
            Func::Exp => v.exp(),
            Func::Log => v.ln(),
            Func::Sqrt => v.sqrt(),
            Func::Sinh => v.sinh(),
            Func::Cosh => v.cosh(),
            Func::Tanh => v.tanh(),
            Func::Abs => v.abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Arc<Expr>),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    Pow(Arc<Expr>, Arc<Expr>),
    Call(Func, Arc<Expr>),
}

use Expr::*;

fn c(v: f64) -> Expr {
    Const(v)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => c(x + y),
        (Const(x), _) if *x == 0.0 => b,
        (_, Const(y)) if *y == 0.0 => a,
        _ => Add(Arc::new(a), Arc::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => c(x - y),
        (_, Const(y)) if *y == 0.0 => a,
        (Const(x), _) if *x == 0.0 => neg(b),
        _ => Sub(Arc::new(a), Arc::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => c(x * y),
        (Const(x), _) | (_, Const(x)) if *x == 0.0 => c(0.0),
        (Const(x), _) if *x == 1.0 => b,
        (_, Const(y)) if *y == 1.0 => a,
        _ => Mul(Arc::new(a), Arc::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => c(x / y),
        (Const(x), _) if *x == 0.0 => c(0.0),
        (_, Const(y)) if *y == 1.0 => a,
        _ => Div(Arc::new(a), Arc::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Const(x) => c(-x),
        Neg(inner) => (*inner).clone(),
        _ => Neg(Arc::new(a)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => c(x.powf(*y)),
        (_, Const(y)) if *y == 0.0 => c(1.0),
        (_, Const(y)) if *y == 1.0 => a,
        _ => Pow(Arc::new(a), Arc::new(b)),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    match a {
        Const(x) => c(f.apply(x)),
        _ => Call(f, Arc::new(a)),
    }
}

impl Expr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Const(v) => *v,
            Var(i) => x[*i],
            Neg(a) => -a.eval(x),
            Add(a, b) => a.eval(x) + b.eval(x),
            Sub(a, b) => a.eval(x) - b.eval(x),
            Mul(a, b) => a.eval(x) * b.eval(x),
            Div(a, b) => a.eval(x) / b.eval(x),
            Pow(a, b) => {
                let base = a.eval(x);
                match b.as_ref() {
                    Const(e) if e.fract() == 0.0 && e.abs() < 64.0 => base.powi(*e as i32),
                    _ => base.powf(b.eval(x)),
                }
            }
            Call(f, a) => f.apply(a.eval(x)),
        }
    }

    /// Symbolic partial derivative with respect to variable `k`.
    pub fn diff(&self, k: usize) -> Expr {
        match self {
            Const(_) => c(0.0),
            Var(i) => c(if *i == k { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(k)),
            Add(a, b) => add(a.diff(k), b.diff(k)),
            Sub(a, b) => sub(a.diff(k), b.diff(k)),
            Mul(a, b) => add(
                mul(a.diff(k), (**b).clone()),
                mul((**a).clone(), b.diff(k)),
            ),
            Div(a, b) => {
                let num = sub(
                    mul(a.diff(k), (**b).clone()),
                    mul((**a).clone(), b.diff(k)),
                );
                div(num, pow((**b).clone(), c(2.0)))
            }
            Pow(a, b) => {
                if let Const(e) = b.as_ref() {
                    mul(mul(c(*e), pow((**a).clone(), c(e - 1.0))), a.diff(k))
                } else {
                    // d(a^b) = a^b (b' ln a + b a'/a)
                    let term = add(
                        mul(b.diff(k), call(Func::Log, (**a).clone())),
                        div(mul((**b).clone(), a.diff(k)), (**a).clone()),
                    );
                    mul(self.clone(), term)
                }
            }
            Call(f, a) => {
                let inner = (**a).clone();
                let da = a.diff(k);
                if da == c(0.0) {
                    return c(0.0);
                }
                let outer = match f {
                    Func::Sin => call(Func::Cos, inner),
                    Func::Cos => neg(call(Func::Sin, inner)),
                    Func::Tan => pow(div(c(1.0), call(Func::Cos, inner)), c(2.0)),
                    Func::Exp => self.clone(),
                    Func::Log => div(c(1.0), inner),
                    Func::Sqrt => div(c(0.5), self.clone()),
                    Func::Sinh => call(Func::Cosh, inner),
                    Func::Cosh => call(Func::Sinh, inner),
                    Func::Tanh => sub(c(1.0), pow(self.clone(), c(2.0))),
                    Func::Abs => div(inner.clone(), self.clone()),
                };
                mul(outer, da)
            }
        }
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Const(_) => None,
            Var(i) => Some(*i),
            Neg(a) | Call(_, a) => a.max_var(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => {
                match (a.max_var(), b.max_var()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                }
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Const(v) => write!(f, "{v}"),
            Var(i) => write!(f, "x{}", i + 1),
            Neg(a) => write!(f, "(-{a})"),
            Add(a, b) => write!(f, "({a} + {b})"),
            Sub(a, b) => write!(f, "({a} - {b})"),
            Mul(a, b) => write!(f, "({a} * {b})"),
            Div(a, b) => write!(f, "({a} / {b})"),
            Pow(a, b) => write!(f, "({a} ^ {b})"),
            Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        let col = i + 1;
        if ch.is_whitespace() {
            i += 1;
        } else if ch.is_ascii_digit() || ch == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| ExprError::BadChar { ch, col })?;
            out.push((Tok::Num(v), col));
        } else if ch.is_ascii_alphabetic() || ch == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), col));
        } else if "+-*/^()".contains(ch) {
            out.push((Tok::Op(ch), col));
            i += 1;
        } else {
            return Err(ExprError::BadChar { ch, col });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn next(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect_close(&mut self) -> Result<(), ExprError> {
        match self.next() {
            Some((Tok::Op(')'), _)) => Ok(()),
            Some((t, col)) => Err(ExprError::Unexpected { tok: format!("{t:?}"), col }),
            None => Err(ExprError::UnexpectedEnd),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' { Add(Arc::new(lhs), Arc::new(rhs)) } else { Sub(Arc::new(lhs), Arc::new(rhs)) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' { Mul(Arc::new(lhs), Arc::new(rhs)) } else { Div(Arc::new(lhs), Arc::new(rhs)) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Neg(Arc::new(self.unary()?)));
        }
        if let Some(Tok::Op('+')) = self.peek() {
            self.pos += 1;
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Pow(Arc::new(base), Arc::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.next() {
            Some((Tok::Num(v), _)) => Ok(Const(v)),
            Some((Tok::Op('('), _)) => {
                let e = self.expr()?;
                self.expect_close()?;
                Ok(e)
            }
            Some((Tok::Ident(name), col)) => {
                if let Some(f) = Func::from_name(&name) {
                    match self.next() {
                        Some((Tok::Op('('), _)) => {}
                        Some((t, col)) => return Err(ExprError::Unexpected { tok: format!("{t:?}"), col }),
                        None => return Err(ExprError::UnexpectedEnd),
                    }
                    let arg = self.expr()?;
                    self.expect_close()?;
                    return Ok(Call(f, Arc::new(arg)));
                }
                let var = match name.as_str() {
                    "pi" => return Ok(Const(std::f64::consts::PI)),
                    "e" => return Ok(Const(std::f64::consts::E)),
                    "x" => Some(0),
                    "y" => Some(1),
                    "z" => Some(2),
                    "w" => Some(3),
                    s if s.len() == 2 && s.starts_with('x') => {
                        s[1..].parse::<usize>().ok().filter(|k| *k >= 1).map(|k| k - 1)
                    }
                    _ => None,
                };
                let _ = col;
                match var {
                    Some(i) if i < self.dim => Ok(Var(i)),
                    Some(_) => Err(ExprError::VarOutOfRange { name, dim: self.dim }),
                    None => Err(ExprError::UnknownIdent(name)),
                }
            }
            Some((t, col)) => Err(ExprError::Unexpected { tok: format!("{t:?}"), col }),
            None => Err(ExprError::UnexpectedEnd),
        }
    }
}

/// Parses `src` as a function of `dim` coordinates.
pub fn parse(src: &str, dim: usize) -> Result<Expr, ExprError> {
    let toks = tokenize(src)?;
    let mut p = Parser { toks, pos: 0, dim };
    let e = p.expr()?;
    if let Some((t, col)) = p.toks.get(p.pos).cloned() {
        return Err(ExprError::Unexpected { tok: format!("{t:?}"), col });
    }
    Ok(e)
}

/// An expression together with its symbolic gradient and Hessian.
#[derive(Clone, Debug)]
pub struct CompiledExpr {
    pub source: String,
    pub dim: usize,
    value: Expr,
    grad: Vec<Expr>,
    hess: Vec<Vec<Expr>>,
}

impl CompiledExpr {
    pub fn new(src: &str, dim: usize) -> Result<Self, ExprError> {
        let value = parse(src, dim)?;
        let grad: Vec<Expr> = (0..dim).map(|k| value.diff(k)).collect();
        let hess = (0..dim)
            .map(|i| (0..dim).map(|j| grad[i].diff(j)).collect())
            .collect();
        Ok(Self { source: src.to_string(), dim, value, grad, hess })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.value.eval(x)
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.grad) {
            *o = g.eval(x);
        }
    }

    pub fn hessian_entry(&self, x: &[f64], i: usize, j: usize) -> f64 {
        self.hess[i][j].eval(x)
    }
}
