//! Recursive-descent parser for the expression grammar:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | '+' unary | power
//! power   := atom ('^' exponent)?
//! exponent:= ['-'] INT | '(' ['-'] INT ')'
//! atom    := NUMBER | 'x'INDEX | FUNC '(' expr ')' | '(' expr ')'
//! FUNC    := exp | log | sin | cos | sqrt
//! ```

use thiserror::Error;

use super::{Expr, UnaryOp};

const MAX_DEPTH: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: expected {expected}, found `{found}`")]
pub struct ParseError {
    pub offset: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64, bool),
    Ident(String),
    Sym(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
    text: String,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == b'.' {
            let mut integral = true;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                integral = false;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    integral = false;
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let value: f64 = text.parse().map_err(|_| ParseError {
                offset: start,
                expected: "number".into(),
                found: text.into(),
            })?;
            out.push(Token {
                tok: Tok::Num(value, integral),
                offset: start,
                text: text.into(),
            });
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let text = &src[start..i];
            out.push(Token {
                tok: Tok::Ident(text.into()),
                offset: start,
                text: text.into(),
            });
        } else if b"+-*/^(),".contains(&c) {
            i += 1;
            out.push(Token {
                tok: Tok::Sym(c as char),
                offset: start,
                text: (c as char).to_string(),
            });
        } else {
            let ch = src[start..].chars().next().unwrap_or('?');
            return Err(ParseError {
                offset: start,
                expected: "operator, number, identifier or parenthesis".into(),
                found: ch.to_string(),
            });
        }
    }
    out.push(Token {
        tok: Tok::End,
        offset: src.len(),
        text: "end of input".into(),
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    dim: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> ParseError {
        let t = self.peek();
        ParseError {
            offset: t.offset,
            expected: expected.into(),
            found: t.text.clone(),
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek().tok == Tok::Sym(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("`{c}`")))
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.error("shallower nesting"));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let mut acc = self.term()?;
        loop {
            if self.eat('+') {
                acc = acc + self.term()?;
            } else if self.eat('-') {
                acc = acc - self.term()?;
            } else {
                break;
            }
        }
        self.depth -= 1;
        Ok(acc)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            if self.eat('*') {
                acc = acc * self.unary()?;
            } else if self.eat('/') {
                acc = acc / self.unary()?;
            } else {
                break;
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let e = if self.eat('-') {
            -self.unary()?
        } else if self.eat('+') {
            self.unary()?
        } else {
            self.power()?
        };
        self.depth -= 1;
        Ok(e)
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if !self.eat('^') {
            return Ok(base);
        }
        let paren = self.eat('(');
        let negative = self.eat('-');
        let t = self.peek().clone();
        let n = match t.tok {
            Tok::Num(v, true) if v <= i32::MAX as f64 => v as i32,
            _ => return Err(self.error("integer exponent")),
        };
        self.bump();
        if paren {
            self.expect(')')?;
        }
        Ok(base.powi(if negative { -n } else { n }))
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let t = self.peek().clone();
        match &t.tok {
            Tok::Num(v, _) => {
                self.bump();
                Ok(Expr::Const(*v))
            }
            Tok::Sym('(') => {
                self.bump();
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(op) = UnaryOp::from_name(name) {
                    self.bump();
                    self.expect('(')?;
                    if self.peek().tok == Tok::Sym(')') {
                        return Err(ParseError {
                            offset: t.offset,
                            expected: format!("one argument for `{name}`"),
                            found: "()".into(),
                        });
                    }
                    let arg = self.expr()?;
                    if self.peek().tok == Tok::Sym(',') {
                        return Err(ParseError {
                            offset: self.peek().offset,
                            expected: format!("one argument for `{name}`"),
                            found: ",".into(),
                        });
                    }
                    self.expect(')')?;
                    return Ok(Expr::apply(op, arg));
                }
                match variable_index(name) {
                    Some(k) if k >= 1 && k <= self.dim => {
                        self.bump();
                        Ok(Expr::Var(k - 1))
                    }
                    Some(_) => Err(ParseError {
                        offset: t.offset,
                        expected: format!("variable x1..x{}", self.dim),
                        found: name.clone(),
                    }),
                    None => Err(ParseError {
                        offset: t.offset,
                        expected: "variable or function name".into(),
                        found: name.clone(),
                    }),
                }
            }
            _ => Err(self.error("number, variable, function or `(`")),
        }
    }
}

fn variable_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(digits.parse().unwrap_or(usize::MAX))
}

/// Parses `source` as a function of `x1..x{dimension}`.
pub fn parse(source: &str, dimension: usize) -> Result<Expr, ParseError> {
    if dimension == 0 {
        return Err(ParseError {
            offset: 0,
            expected: "dimension >= 1".into(),
            found: "0".into(),
        });
    }
    let toks = lex(source)?;
    let mut p = Parser {
        toks,
        pos: 0,
        dim: dimension,
        depth: 0,
    };
    let e = p.expr()?;
    if p.peek().tok != Tok::End {
        return Err(p.error("operator or end of input"));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_unknown_identifier() {
        let err = parse("x1 + foo(x2)", 2).unwrap_err();
        assert_eq!(err.offset, 5);
        assert_eq!(err.found, "foo");
    }

    #[test]
    fn rejects_arity_mismatch() {
        assert!(parse("exp(x1, x2)", 2).is_err());
        assert!(parse("sin()", 2).is_err());
    }

    #[test]
    fn rejects_non_integer_exponent() {
        let err = parse("x1^2.5", 1).unwrap_err();
        assert_eq!(err.offset, 3);
        assert_eq!(err.found, "2.5");
        assert!(parse("x1^x2", 2).is_err());
        assert!(parse("x1^1e3", 1).is_err());
    }

    #[test]
    fn precedence_and_signs() {
        let e = parse("-x1^2 + 2*x2/4 - -1", 2).unwrap();
        assert_eq!(e.evaluate(&[3.0, 2.0]).unwrap(), -9.0 + 1.0 + 1.0);
        let e = parse("x1^-2 + x1^(-1)", 1).unwrap();
        assert_eq!(e.evaluate(&[2.0]).unwrap(), 0.75);
        let e = parse("1.5e-1 * .5e1", 1).unwrap();
        assert!((e.evaluate(&[0.0]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn offsets_stay_within_input() {
        for src in ["", "(", "x1 +", "exp(", "1e", "x0", "x1 x2", "@"] {
            let err = parse(src, 2).unwrap_err();
            assert!(err.offset <= src.len(), "{src}: {err}");
        }
    }

    #[test]
    fn deep_nesting_is_an_error_not_a_crash() {
        let src = "(".repeat(10_000) + "x1" + &")".repeat(10_000);
        assert!(parse(&src, 1).is_err());
        let src = "-".repeat(10_000) + "x1";
        assert!(parse(&src, 1).is_err());
    }

    proptest! {
        #[test]
        fn parser_is_total(src in "[ -~]{0,40}") {
            if let Err(e) = parse(&src, 3) {
                prop_assert!(e.offset <= src.len());
            }
        }

        #[test]
        fn parser_is_total_on_grammar_soup(src in "(x1|x2|exp|log|\\(|\\)|\\^|-|\\*|/|\\+|2|0\\.5|,){0,30}") {
            if let Err(e) = parse(&src, 2) {
                prop_assert!(e.offset <= src.len());
            }
        }
    }
}
