//! Scalar expressions over `x1..xd` with exact symbolic differentiation.
//!
//! Expressions are small trees built from constants, coordinate variables,
//! the unary functions `neg, exp, log, sin, cos, sqrt`, the binary operators
//! `+ - * /` and integer powers. Differentiation is closed over this node set,
//! so every tensor entry downstream is assembled from exact derivatives.
//!
//! Variables are stored 0-based (`x1` is `Var(0)`); the textual syntax is
//! 1-based.

mod compile;
mod parse;

use std::fmt;
use std::ops;

use thiserror::Error;

pub use compile::Compiled;
pub use parse::{parse, ParseError};

/// Unary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    pub(crate) fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "exp" => UnaryOp::Exp,
            "log" => UnaryOp::Log,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "sqrt" => UnaryOp::Sqrt,
            _ => return None,
        })
    }
}

/// Binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
        }
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Coordinate `x_{k+1}` for `Var(k)`.
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Integer power.
    Powi(Box<Expr>, i32),
}

/// Failure while evaluating an expression at a point.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("log of non-positive value {arg} in `{node}`")]
    LogDomain { node: String, arg: f64 },
    #[error("sqrt of negative value {arg} in `{node}`")]
    SqrtDomain { node: String, arg: f64 },
    #[error("division by zero in `{node}`")]
    DivByZero { node: String },
    #[error("non-finite result in `{node}`")]
    Overflow { node: String },
    #[error("variable x{} used at a point of dimension {dim}", .index + 1)]
    VariableOutOfRange { index: usize, dim: usize },
}

impl Expr {
    pub fn constant(v: f64) -> Self {
        Expr::Const(v)
    }

    pub fn var(axis: usize) -> Self {
        Expr::Var(axis)
    }

    pub fn zero() -> Self {
        Expr::Const(0.0)
    }

    pub fn one() -> Self {
        Expr::Const(1.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    /// Applies a unary function with light constant folding.
    pub fn apply(op: UnaryOp, arg: Expr) -> Expr {
        match (op, arg) {
            (UnaryOp::Neg, Expr::Const(v)) => Expr::Const(-v),
            (UnaryOp::Neg, Expr::Unary(UnaryOp::Neg, inner)) => *inner,
            (op, arg) => Expr::Unary(op, Box::new(arg)),
        }
    }

    pub fn exp(self) -> Expr {
        Expr::apply(UnaryOp::Exp, self)
    }

    pub fn ln(self) -> Expr {
        Expr::apply(UnaryOp::Log, self)
    }

    pub fn sin(self) -> Expr {
        Expr::apply(UnaryOp::Sin, self)
    }

    pub fn cos(self) -> Expr {
        Expr::apply(UnaryOp::Cos, self)
    }

    pub fn sqrt(self) -> Expr {
        Expr::apply(UnaryOp::Sqrt, self)
    }

    pub fn powi(self, n: i32) -> Expr {
        match (n, &self) {
            (0, _) => Expr::one(),
            (1, _) => self,
            (_, Expr::Const(v)) => {
                let r = v.powi(n);
                if r.is_finite() && !(*v == 0.0 && n < 0) {
                    Expr::Const(r)
                } else {
                    Expr::Powi(Box::new(self), n)
                }
            }
            _ => Expr::Powi(Box::new(self), n),
        }
    }

    fn binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
        use BinaryOp::*;
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            let r = match op {
                Add => Some(x + y),
                Sub => Some(x - y),
                Mul => Some(x * y),
                Div if y != 0.0 => Some(x / y),
                Div => None,
            };
            if let Some(r) = r.filter(|r| r.is_finite()) {
                return Expr::Const(r);
            }
        }
        match op {
            Add if a.is_zero() => b,
            Add if b.is_zero() => a,
            Sub if b.is_zero() => a,
            Sub if a.is_zero() => -b,
            Mul if a.is_zero() || b.is_zero() => Expr::zero(),
            Mul if a.is_one() => b,
            Mul if b.is_one() => a,
            Div if b.is_one() => a,
            _ => Expr::Binary(op, Box::new(a), Box::new(b)),
        }
    }

    /// Largest 0-based variable index appearing in the tree.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(k) => Some(*k),
            Expr::Unary(_, a) | Expr::Powi(a, _) => a.max_var(),
            Expr::Binary(_, a, b) => match (a.max_var(), b.max_var()) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
        }
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Unary(_, a) | Expr::Powi(a, _) => 1 + a.size(),
            Expr::Binary(_, a, b) => 1 + a.size() + b.size(),
        }
    }

    /// Partial derivative with respect to the 0-based `axis`.
    pub fn differentiate(&self, axis: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Var(k) => {
                if *k == axis {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Expr::Unary(op, a) => {
                let da = a.differentiate(axis);
                if da.is_zero() {
                    return Expr::zero();
                }
                let a = (**a).clone();
                match op {
                    UnaryOp::Neg => -da,
                    UnaryOp::Exp => a.exp() * da,
                    UnaryOp::Log => da / a,
                    UnaryOp::Sin => a.cos() * da,
                    UnaryOp::Cos => -(a.sin() * da),
                    UnaryOp::Sqrt => da / (Expr::constant(2.0) * a.sqrt()),
                }
            }
            Expr::Binary(op, a, b) => {
                let da = a.differentiate(axis);
                let db = b.differentiate(axis);
                let (a, b) = ((**a).clone(), (**b).clone());
                match op {
                    BinaryOp::Add => da + db,
                    BinaryOp::Sub => da - db,
                    BinaryOp::Mul => da * b + a * db,
                    BinaryOp::Div => {
                        if db.is_zero() {
                            da / b
                        } else {
                            (da * b.clone() - a * db) / b.powi(2)
                        }
                    }
                }
            }
            Expr::Powi(a, n) => {
                let da = a.differentiate(axis);
                if da.is_zero() {
                    return Expr::zero();
                }
                Expr::constant(*n as f64) * (**a).clone().powi(n - 1) * da
            }
        }
    }

    /// Gradient as `dim` expressions.
    pub fn gradient(&self, dim: usize) -> Vec<Expr> {
        (0..dim).map(|i| self.differentiate(i)).collect()
    }

    /// Hessian in row-major order, `dim * dim` expressions. Only the upper
    /// triangle is differentiated; the lower one is mirrored.
    pub fn hessian(&self, dim: usize) -> Vec<Expr> {
        let grad = self.gradient(dim);
        let mut out = vec![Expr::zero(); dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let e = grad[i].differentiate(j);
                out[j * dim + i] = e.clone();
                out[i * dim + j] = e;
            }
        }
        out
    }

    /// Evaluates the tree at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, EvalError> {
        match self {
            Expr::Const(v) => Ok(*v),
            Expr::Var(k) => x.get(*k).copied().ok_or(EvalError::VariableOutOfRange {
                index: *k,
                dim: x.len(),
            }),
            Expr::Unary(op, a) => {
                let v = a.evaluate(x)?;
                let r = match op {
                    UnaryOp::Neg => -v,
                    UnaryOp::Exp => v.exp(),
                    UnaryOp::Log => {
                        if !(v > 0.0) {
                            return Err(EvalError::LogDomain {
                                node: self.to_string(),
                                arg: v,
                            });
                        }
                        v.ln()
                    }
                    UnaryOp::Sin => v.sin(),
                    UnaryOp::Cos => v.cos(),
                    UnaryOp::Sqrt => {
                        if v < 0.0 {
                            return Err(EvalError::SqrtDomain {
                                node: self.to_string(),
                                arg: v,
                            });
                        }
                        v.sqrt()
                    }
                };
                self.finite(r)
            }
            Expr::Binary(op, a, b) => {
                let u = a.evaluate(x)?;
                let v = b.evaluate(x)?;
                let r = match op {
                    BinaryOp::Add => u + v,
                    BinaryOp::Sub => u - v,
                    BinaryOp::Mul => u * v,
                    BinaryOp::Div => {
                        if v == 0.0 {
                            return Err(EvalError::DivByZero {
                                node: self.to_string(),
                            });
                        }
                        u / v
                    }
                };
                self.finite(r)
            }
            Expr::Powi(a, n) => {
                let v = a.evaluate(x)?;
                if v == 0.0 && *n < 0 {
                    return Err(EvalError::DivByZero {
                        node: self.to_string(),
                    });
                }
                self.finite(v.powi(*n))
            }
        }
    }

    fn finite(&self, r: f64) -> Result<f64, EvalError> {
        if r.is_finite() {
            Ok(r)
        } else {
            Err(EvalError::Overflow {
                node: self.to_string(),
            })
        }
    }

    /// Flattens the tree into a stack program for hot loops.
    pub fn compile(&self) -> Compiled {
        Compiled::new(self)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => {
                if v.is_sign_negative() {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Var(k) => write!(f, "x{}", k + 1),
            Expr::Unary(UnaryOp::Neg, a) => write!(f, "(-{a})"),
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Powi(a, n) => {
                if matches!(**a, Expr::Powi(..)) {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                if *n < 0 {
                    write!(f, "^({n})")
                } else {
                    write!(f, "^{n}")
                }
            }
        }
    }
}

impl ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::binary(BinaryOp::Add, self, rhs)
    }
}

impl ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::binary(BinaryOp::Sub, self, rhs)
    }
}

impl ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::binary(BinaryOp::Mul, self, rhs)
    }
}

impl ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::binary(BinaryOp::Div, self, rhs)
    }
}

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::apply(UnaryOp::Neg, self)
    }
}

/// Sum of expressions; the empty sum is the zero node.
pub fn sum<I: IntoIterator<Item = Expr>>(terms: I) -> Expr {
    terms.into_iter().fold(Expr::zero(), |acc, t| acc + t)
}
