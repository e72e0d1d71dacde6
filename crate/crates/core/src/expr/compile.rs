use super::{BinaryOp, EvalError, Expr, UnaryOp};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Var(usize),
    Unary(UnaryOp),
    Binary(BinaryOp),
    Powi(i32),
}

/// Postfix stack program equivalent to an [`Expr`].
///
/// Evaluation performs the same IEEE operations in the same order as the
/// tree walk, so results are bit-identical. On any domain or overflow fault
/// the tree is re-evaluated to produce the detailed [`EvalError`].
#[derive(Debug, Clone)]
pub struct Compiled {
    ops: Vec<Op>,
    max_stack: usize,
    max_var: Option<usize>,
    source: Expr,
}

const INLINE_STACK: usize = 32;

impl Compiled {
    pub fn new(expr: &Expr) -> Self {
        let mut ops = Vec::with_capacity(expr.size());
        let mut depth = 0usize;
        let mut max_stack = 0usize;
        emit(expr, &mut ops, &mut depth, &mut max_stack);
        Compiled {
            ops,
            max_stack,
            max_var: expr.max_var(),
            source: expr.clone(),
        }
    }

    pub fn source(&self) -> &Expr {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Constant value if the program is a single literal.
    pub fn as_const(&self) -> Option<f64> {
        self.source.as_const()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64, EvalError> {
        if let Some(k) = self.max_var {
            if k >= x.len() {
                return self.source.evaluate(x);
            }
        }
        let r = if self.max_stack <= INLINE_STACK {
            let mut stack = [0.0f64; INLINE_STACK];
            self.run(x, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.max_stack];
            self.run(x, &mut stack)
        };
        match r {
            Some(v) => Ok(v),
            None => self.source.evaluate(x),
        }
    }

    fn run(&self, x: &[f64], stack: &mut [f64]) -> Option<f64> {
        let mut top = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(v) => {
                    stack[top] = v;
                    top += 1;
                }
                Op::Var(k) => {
                    stack[top] = x[k];
                    top += 1;
                }
                Op::Unary(u) => {
                    let v = stack[top - 1];
                    let r = match u {
                        UnaryOp::Neg => -v,
                        UnaryOp::Exp => v.exp(),
                        UnaryOp::Log => {
                            if !(v > 0.0) {
                                return None;
                            }
                            v.ln()
                        }
                        UnaryOp::Sin => v.sin(),
                        UnaryOp::Cos => v.cos(),
                        UnaryOp::Sqrt => {
                            if v < 0.0 {
                                return None;
                            }
                            v.sqrt()
                        }
                    };
                    if !r.is_finite() {
                        return None;
                    }
                    stack[top - 1] = r;
                }
                Op::Binary(b) => {
                    let v = stack[top - 1];
                    let u = stack[top - 2];
                    top -= 1;
                    let r = match b {
                        BinaryOp::Add => u + v,
                        BinaryOp::Sub => u - v,
                        BinaryOp::Mul => u * v,
                        BinaryOp::Div => {
                            if v == 0.0 {
                                return None;
                            }
                            u / v
                        }
                    };
                    if !r.is_finite() {
                        return None;
                    }
                    stack[top - 1] = r;
                }
                Op::Powi(n) => {
                    let v = stack[top - 1];
                    if v == 0.0 && n < 0 {
                        return None;
                    }
                    let r = v.powi(n);
                    if !r.is_finite() {
                        return None;
                    }
                    stack[top - 1] = r;
                }
            }
        }
        Some(stack[0])
    }
}

fn emit(e: &Expr, ops: &mut Vec<Op>, depth: &mut usize, max: &mut usize) {
    match e {
        Expr::Const(v) => {
            ops.push(Op::Const(*v));
            push(depth, max);
        }
        Expr::Var(k) => {
            ops.push(Op::Var(*k));
            push(depth, max);
        }
        Expr::Unary(op, a) => {
            emit(a, ops, depth, max);
            ops.push(Op::Unary(*op));
        }
        Expr::Powi(a, n) => {
            emit(a, ops, depth, max);
            ops.push(Op::Powi(*n));
        }
        Expr::Binary(op, a, b) => {
            emit(a, ops, depth, max);
            emit(b, ops, depth, max);
            ops.push(Op::Binary(*op));
            *depth -= 1;
        }
    }
}

fn push(depth: &mut usize, max: &mut usize) {
    *depth += 1;
    *max = (*max).max(*depth);
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn matches_tree_bitwise() {
        let srcs = [
            "(x1^4 + x2^4)/4 + x1*x2/2",
            "exp(-x1)*sin(x2) + cos(x1*x2) - sqrt(1 + x2^2)",
            "log(3 + x1) / (1 + x2^2)^(-2)",
        ];
        for src in srcs {
            let e = parse(src, 2).unwrap();
            let c = e.compile();
            for k in 0..50 {
                let x = [-1.0 + 0.04 * k as f64, 0.7 - 0.03 * k as f64];
                assert_eq!(
                    c.evaluate(&x).unwrap().to_bits(),
                    e.evaluate(&x).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn faults_fall_back_to_detailed_errors() {
        let e = parse("x2 + log(x1 - 1)", 2).unwrap();
        assert_eq!(e.compile().evaluate(&[0.5, 0.0]), e.evaluate(&[0.5, 0.0]));
        let e = parse("1/x1", 1).unwrap();
        assert!(matches!(
            e.compile().evaluate(&[0.0]),
            Err(EvalError::DivByZero { .. })
        ));
        let e = parse("x2", 2).unwrap();
        assert!(matches!(
            e.compile().evaluate(&[0.0]),
            Err(EvalError::VariableOutOfRange { .. })
        ));
    }

    #[test]
    fn deep_trees_use_heap_stack() {
        let mut e = Expr::var(0);
        for _ in 0..40 {
            e = Expr::one() + e * Expr::constant(0.5);
        }
        let mut right = Expr::var(0);
        for _ in 0..40 {
            right = Expr::var(0) + right;
        }
        let c = right.compile();
        assert!(c.max_stack > INLINE_STACK);
        assert_eq!(c.evaluate(&[1.0]).unwrap(), 41.0);
        assert_eq!(e.compile().evaluate(&[2.0]).unwrap(), e.evaluate(&[2.0]).unwrap());
    }
}
