//! Symbolic integer expressions used for buffer sizes and work sizes.
//!
//! Grammar (usual precedence, left associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | '(' expr ')' | integer | identifier
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub type Params = BTreeMap<String, i64>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error in `{expr}`: {msg}")]
    Syntax { expr: String, msg: String },
    #[error("unbound parameter `{0}`")]
    UnboundParameter(String),
    #[error("`{expr}` evaluates to {value}, expected a positive integer")]
    NonPositiveResult { expr: String, value: i64 },
    #[error("inexact division {lhs} / {rhs}")]
    InexactDivision { lhs: i64, rhs: i64 },
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Node {
    Lit(i64),
    Var(String),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

/// A parsed expression. Equality is on the source text.
#[derive(Clone)]
pub struct Expr {
    text: String,
    root: Node,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for Expr {}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.text)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        let tokens = tokenize(text)?;
        let mut p = Parser { text, tokens, at: 0 };
        let root = p.expr()?;
        if p.at != p.tokens.len() {
            return Err(p.error("trailing input"));
        }
        Ok(Expr { text: text.trim().to_string(), root })
    }

    pub fn literal(v: i64) -> Self {
        Expr { text: v.to_string(), root: Node::Lit(v) }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Names of all parameters referenced, sorted.
    pub fn variables(&self) -> Vec<String> {
        fn walk(n: &Node, out: &mut Vec<String>) {
            match n {
                Node::Lit(_) => {}
                Node::Var(v) => out.push(v.clone()),
                Node::Neg(a) => walk(a, out),
                Node::Bin(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out.sort();
        out.dedup();
        out
    }

    pub fn eval(&self, params: &Params) -> Result<i64, ExprError> {
        eval_node(&self.root, params)
    }

    /// Like [`Expr::eval`] but rejects results `<= 0`.
    pub fn eval_positive(&self, params: &Params) -> Result<i64, ExprError> {
        let value = self.eval(params)?;
        if value <= 0 {
            return Err(ExprError::NonPositiveResult { expr: self.text.clone(), value });
        }
        Ok(value)
    }
}

/// Evaluates `expr` against `params`.
pub fn eval_expr(expr: &str, params: &Params) -> Result<i64, ExprError> {
    Expr::parse(expr)?.eval(params)
}

fn eval_node(n: &Node, params: &Params) -> Result<i64, ExprError> {
    match n {
        Node::Lit(v) => Ok(*v),
        Node::Var(name) => params.get(name).copied().ok_or_else(|| ExprError::UnboundParameter(name.clone())),
        Node::Neg(a) => eval_node(a, params)?.checked_neg().ok_or(ExprError::Overflow),
        Node::Bin(op, a, b) => {
            let l = eval_node(a, params)?;
            let r = eval_node(b, params)?;
            match op {
                Op::Add => l.checked_add(r).ok_or(ExprError::Overflow),
                Op::Sub => l.checked_sub(r).ok_or(ExprError::Overflow),
                Op::Mul => l.checked_mul(r).ok_or(ExprError::Overflow),
                Op::Div => {
                    if r == 0 {
                        return Err(ExprError::DivisionByZero);
                    }
                    if l % r != 0 {
                        return Err(ExprError::InexactDivision { lhs: l, rhs: r });
                    }
                    l.checked_div(r).ok_or(ExprError::Overflow)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Int(i64),
    Ident(String),
    Sym(char),
}

fn tokenize(text: &str) -> Result<Vec<Tok>, ExprError> {
    let syntax = |msg: String| ExprError::Syntax { expr: text.to_string(), msg };
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<i64>().map_err(|_| ExprError::Overflow)?;
            out.push(Tok::Int(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/()".contains(c) {
            out.push(Tok::Sym(c));
            i += 1;
        } else {
            return Err(syntax(format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    text: &'a str,
    tokens: Vec<Tok>,
    at: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> ExprError {
        ExprError::Syntax { expr: self.text.to_string(), msg: msg.to_string() }
    }

    fn peek_sym(&self) -> Option<char> {
        match self.tokens.get(self.at) {
            Some(Tok::Sym(c)) => Some(*c),
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_sym() {
            self.at += 1;
            let rhs = self.term()?;
            let op = if c == '+' { Op::Add } else { Op::Sub };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.factor()?;
        while let Some(c @ ('*' | '/')) = self.peek_sym() {
            self.at += 1;
            let rhs = self.factor()?;
            let op = if c == '*' { Op::Mul } else { Op::Div };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Node, ExprError> {
        let tok = self.tokens.get(self.at).cloned().ok_or_else(|| self.error("unexpected end of input"))?;
        self.at += 1;
        match tok {
            Tok::Int(v) => Ok(Node::Lit(v)),
            Tok::Ident(name) => Ok(Node::Var(name)),
            Tok::Sym('-') => Ok(Node::Neg(Box::new(self.factor()?))),
            Tok::Sym('(') => {
                let inner = self.expr()?;
                if self.peek_sym() != Some(')') {
                    return Err(self.error("expected `)`"));
                }
                self.at += 1;
                Ok(inner)
            }
            Tok::Sym(c) => Err(self.error(&format!("unexpected `{c}`"))),
        }
    }
}

/// On-disk form: either a JSON integer or a string expression.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawExpr {
    Int(i64),
    Text(String),
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match RawExpr::deserialize(d)? {
            RawExpr::Int(v) => Ok(Expr::literal(v)),
            RawExpr::Text(t) => Expr::parse(&t).map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, i64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn product_of_parameters() {
        assert_eq!(eval_expr("M*N", &params(&[("M", 4), ("N", 4)])), Ok(16));
    }

    #[test]
    fn bare_literal() {
        assert_eq!(eval_expr("1024", &Params::new()), Ok(1024));
    }

    #[test]
    fn unbound_parameter() {
        assert_eq!(eval_expr("M*N", &params(&[("M", 4)])), Err(ExprError::UnboundParameter("N".into())));
    }

    #[test]
    fn precedence_and_parens() {
        let p = params(&[("A", 3), ("B", 5)]);
        assert_eq!(eval_expr("A+B*2", &p), Ok(13));
        assert_eq!(eval_expr("(A+B)*2", &p), Ok(16));
        assert_eq!(eval_expr("A-B-1", &p), Ok(-3));
        assert_eq!(eval_expr("-A*-2", &p), Ok(6));
        assert_eq!(eval_expr("B*B/5", &p), Ok(5));
    }

    #[test]
    fn division_must_be_exact() {
        assert_eq!(eval_expr("7/2", &Params::new()), Err(ExprError::InexactDivision { lhs: 7, rhs: 2 }));
        assert_eq!(eval_expr("7/0", &Params::new()), Err(ExprError::DivisionByZero));
    }

    #[test]
    fn non_positive_rejected_when_required() {
        let e = Expr::parse("M").unwrap();
        assert!(matches!(e.eval_positive(&params(&[("M", 0)])), Err(ExprError::NonPositiveResult { value: 0, .. })));
    }

    #[test]
    fn syntax_errors() {
        for bad in ["", "M*", "(M", "M N", "M$2", "*3"] {
            assert!(matches!(Expr::parse(bad), Err(ExprError::Syntax { .. })), "{bad}");
        }
    }

    #[test]
    fn overflow_is_reported() {
        assert_eq!(eval_expr("9223372036854775807+1", &Params::new()), Err(ExprError::Overflow));
    }

    #[test]
    fn variables_listed() {
        assert_eq!(Expr::parse("M*K+M").unwrap().variables(), vec!["K".to_string(), "M".to_string()]);
    }
}
