//! A small expression language for user Hamiltonians.
//!
//! Grammar (standard precedence, `^` right-associative):
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := unary (("*" | "/") unary)*
//! unary  := ("+" | "-") unary | power
//! power  := atom ("^" unary)?
//! atom   := number | x1 | x2 | pi | e | func "(" expr ")" | "(" expr ")"
//! func   := sin | cos | exp | sqrt | ln
//! ```
//!
//! Expressions are evaluated on second-order jets, so gradients and
//! Hessians are exact up to round-off.

use std::f64::consts::{E, PI};

use super::{Domain, Hamiltonian, Smoothness, Sym2, Vec2};
use crate::error::{MixlabError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Ln,
}

/// Value, gradient and Hessian of a function of `(x₁, x₂)` at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 2],
    /// `[∂₁₁, ∂₁₂, ∂₂₂]`
    pub h: [f64; 3],
}

impl Jet {
    fn constant(v: f64) -> Self {
        Jet { v, g: [0.0; 2], h: [0.0; 3] }
    }

    fn var(i: usize, x: Vec2) -> Self {
        let mut g = [0.0; 2];
        g[i] = 1.0;
        Jet { v: x[i], g, h: [0.0; 3] }
    }

    fn is_constant(&self) -> bool {
        self.g == [0.0; 2] && self.h == [0.0; 3]
    }

    /// Composition with a scalar function given its value and first two derivatives.
    fn chain(&self, f: f64, df: f64, d2f: f64) -> Self {
        let g = self.g;
        Jet {
            v: f,
            g: [df * g[0], df * g[1]],
            h: [
                d2f * g[0] * g[0] + df * self.h[0],
                d2f * g[0] * g[1] + df * self.h[1],
                d2f * g[1] * g[1] + df * self.h[2],
            ],
        }
    }

    fn add(&self, o: &Jet, s: f64) -> Self {
        Jet {
            v: self.v + s * o.v,
            g: [self.g[0] + s * o.g[0], self.g[1] + s * o.g[1]],
            h: [self.h[0] + s * o.h[0], self.h[1] + s * o.h[1], self.h[2] + s * o.h[2]],
        }
    }

    fn mul(&self, o: &Jet) -> Self {
        let (a, b) = (self, o);
        Jet {
            v: a.v * b.v,
            g: [a.v * b.g[0] + b.v * a.g[0], a.v * b.g[1] + b.v * a.g[1]],
            h: [
                a.v * b.h[0] + b.v * a.h[0] + 2.0 * a.g[0] * b.g[0],
                a.v * b.h[1] + b.v * a.h[1] + a.g[0] * b.g[1] + a.g[1] * b.g[0],
                a.v * b.h[2] + b.v * a.h[2] + 2.0 * a.g[1] * b.g[1],
            ],
        }
    }

    fn recip(&self) -> Self {
        let u = self.v;
        self.chain(1.0 / u, -1.0 / (u * u), 2.0 / (u * u * u))
    }

    fn powf(&self, p: f64) -> Self {
        let u = self.v;
        if p == 0.0 {
            return Jet::constant(1.0);
        }
        let f = u.powf(p);
        let df = p * u.powf(p - 1.0);
        let d2f = if p == 1.0 { 0.0 } else { p * (p - 1.0) * u.powf(p - 2.0) };
        self.chain(f, df, d2f)
    }

    fn ln(&self) -> Self {
        let u = self.v;
        self.chain(u.ln(), 1.0 / u, -1.0 / (u * u))
    }

    fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
}

impl Expr {
    pub fn eval(&self, x: Vec2) -> f64 {
        match self {
            Expr::Num(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, b) => {
                let (a, b) = (a.eval(x), b.eval(x));
                if b.fract() == 0.0 && b.abs() < 64.0 {
                    a.powi(b as i32)
                } else {
                    a.powf(b)
                }
            }
            Expr::Call(f, a) => {
                let u = a.eval(x);
                match f {
                    Func::Sin => u.sin(),
                    Func::Cos => u.cos(),
                    Func::Exp => u.exp(),
                    Func::Sqrt => u.sqrt(),
                    Func::Ln => u.ln(),
                }
            }
        }
    }

    pub fn jet(&self, x: Vec2) -> Jet {
        match self {
            Expr::Num(c) => Jet::constant(*c),
            Expr::Var(i) => Jet::var(*i, x),
            Expr::Neg(a) => Jet::constant(0.0).add(&a.jet(x), -1.0),
            Expr::Add(a, b) => a.jet(x).add(&b.jet(x), 1.0),
            Expr::Sub(a, b) => a.jet(x).add(&b.jet(x), -1.0),
            Expr::Mul(a, b) => a.jet(x).mul(&b.jet(x)),
            Expr::Div(a, b) => a.jet(x).mul(&b.jet(x).recip()),
            Expr::Pow(a, b) => {
                let (a, b) = (a.jet(x), b.jet(x));
                if b.is_constant() {
                    if b.v.fract() == 0.0 && b.v.abs() < 64.0 && a.v <= 0.0 {
                        // integer powers of non-positive bases: repeated products
                        int_pow(&a, b.v as i32)
                    } else {
                        a.powf(b.v)
                    }
                } else {
                    b.mul(&a.ln()).exp()
                }
            }
            Expr::Call(f, a) => {
                let a = a.jet(x);
                let u = a.v;
                match f {
                    Func::Sin => a.chain(u.sin(), u.cos(), -u.sin()),
                    Func::Cos => a.chain(u.cos(), -u.sin(), -u.cos()),
                    Func::Exp => a.exp(),
                    Func::Sqrt => a.powf(0.5),
                    Func::Ln => a.ln(),
                }
            }
        }
    }
}

fn int_pow(a: &Jet, n: i32) -> Jet {
    let mut acc = Jet::constant(1.0);
    for _ in 0..n.unsigned_abs() {
        acc = acc.mul(a);
    }
    if n < 0 {
        acc.recip()
    } else {
        acc
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(MixlabError::Parse { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek_char() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek_char(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    /// Next significant char, with the Unicode minus and multiplication
    /// signs folded into their ASCII forms.
    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.peek_char().map(|c| match c {
            '−' => '-',
            '·' | '×' => '*',
            c => c,
        })
    }

    fn bump(&mut self) {
        if let Some(c) = self.peek_char() {
            self.pos += c.len_utf8();
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some('+') => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some('-') => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some('*') => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some('/') => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some('-') => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some('+') => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some('(') => {
                self.bump();
                let e = self.expr()?;
                if self.peek() != Some(')') {
                    return self.err("expected `)`");
                }
                self.bump();
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while let Some(c) = self.peek_char() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let ident = &self.src[start..self.pos];
                let func = match ident {
                    "x1" | "x" => return Ok(Expr::Var(0)),
                    "x2" | "y" => return Ok(Expr::Var(1)),
                    "pi" => return Ok(Expr::Num(PI)),
                    "e" => return Ok(Expr::Num(E)),
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "exp" => Func::Exp,
                    "sqrt" => Func::Sqrt,
                    "ln" | "log" => Func::Ln,
                    _ => {
                        self.pos = start;
                        return self.err(format!("unknown identifier `{ident}`"));
                    }
                };
                if self.peek() != Some('(') {
                    return self.err(format!("expected `(` after `{ident}`"));
                }
                self.bump();
                let arg = self.expr()?;
                if self.peek() != Some(')') {
                    return self.err("expected `)`");
                }
                self.bump();
                Ok(Expr::Call(func, Box::new(arg)))
            }
            Some(c) => self.err(format!("unexpected character `{c}`")),
            None => self.err("unexpected end of input"),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < bytes.len() && (bytes[self.pos] == b'+' || bytes[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        match self.src[start..self.pos].parse::<f64>() {
            Ok(v) => Ok(Expr::Num(v)),
            Err(_) => {
                self.pos = start;
                self.err("malformed number")
            }
        }
    }
}

pub fn parse(src: &str) -> Result<Expr> {
    let mut p = Parser { src, pos: 0 };
    let e = p.expr()?;
    if p.peek().is_some() {
        return p.err("trailing input");
    }
    Ok(e)
}

/// A Hamiltonian given by a parsed formula in `x1`, `x2`.
#[derive(Clone, Debug)]
pub struct ExprField {
    source: String,
    expr: Expr,
    domain: Domain,
}

impl ExprField {
    pub fn parse(src: &str) -> Result<Self> {
        Ok(ExprField { source: src.trim().to_string(), expr: parse(src)?, domain: Domain::Torus })
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn jet(&self, x: Vec2) -> Jet {
        self.expr.jet(x)
    }
}

impl Hamiltonian for ExprField {
    fn name(&self) -> String {
        format!("expr:{}", self.source)
    }

    fn domain(&self) -> Domain {
        self.domain
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::C3
    }

    fn value(&self, x: Vec2) -> f64 {
        self.expr.eval(x)
    }

    fn gradient(&self, x: Vec2) -> Vec2 {
        self.expr.jet(x).g
    }

    fn hessian(&self, x: Vec2) -> Sym2 {
        let h = self.expr.jet(x).h;
        Sym2 { xx: h[0], xy: h[1], yy: h[2] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + b.abs())
    }

    #[test]
    fn precedence_and_associativity() {
        let e = parse("1 + 2*3^2^0.5 - 4/2").unwrap();
        let expect = 1.0 + 2.0 * 3f64.powf(2f64.powf(0.5)) - 2.0;
        assert!(close(e.eval([0.0, 0.0]), expect));
        let e = parse("-x1^2").unwrap();
        assert!(close(e.eval([3.0, 0.0]), -9.0));
        let e = parse("2 − pi·e").unwrap();
        assert!(close(e.eval([0.0, 0.0]), 2.0 - PI * E));
        assert!(close(parse("1.5e-3*x2").unwrap().eval([0.0, 2.0]), 3e-3));
    }

    #[test]
    fn jets_match_analytic_derivatives() {
        let f = ExprField::parse("(x1^2+x2^2)/2 + (x1^2+x2^2)^2/4").unwrap();
        let x = [0.3, -0.7];
        let r2: f64 = x[0] * x[0] + x[1] * x[1];
        let j = f.jet(x);
        assert!(close(j.v, r2 / 2.0 + r2 * r2 / 4.0));
        assert!(close(j.g[0], x[0] * (1.0 + r2)));
        assert!(close(j.g[1], x[1] * (1.0 + r2)));
        assert!(close(j.h[0], 1.0 + r2 + 2.0 * x[0] * x[0]));
        assert!(close(j.h[1], 2.0 * x[0] * x[1]));
        assert!(close(j.h[2], 1.0 + r2 + 2.0 * x[1] * x[1]));

        let g = ExprField::parse("exp(sin(x1))*cos(x2) + sqrt(2+x1) - ln(3+x2)").unwrap();
        let x = [0.4, 1.1];
        let j = g.jet(x);
        let h = 1e-5;
        for i in 0..2 {
            let mut p = x;
            let mut m = x;
            p[i] += h;
            m[i] -= h;
            let d = (g.value(p) - g.value(m)) / (2.0 * h);
            assert!((d - j.g[i]).abs() < 1e-8);
        }
        let mut p = x;
        let mut m = x;
        p[0] += h;
        m[0] -= h;
        let dxx = (g.value(p) - 2.0 * g.value(x) + g.value(m)) / (h * h);
        assert!((dxx - j.h[0]).abs() < 1e-4);
    }

    #[test]
    fn parse_errors_report_position() {
        match parse("sin(x1") {
            Err(MixlabError::Parse { .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse("foo(x1)") {
            Err(MixlabError::Parse { pos, .. }) => assert_eq!(pos, 0),
            other => panic!("{other:?}"),
        }
        assert!(parse("1 +").is_err());
        assert!(parse("x1 x2").is_err());
    }
}
