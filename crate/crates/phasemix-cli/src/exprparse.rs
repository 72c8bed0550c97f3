//! Parser for coefficient expression strings.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := factor (('*' | '/') factor)*
//! factor  := unary ('^' signed-integer)?
//! unary   := '-' unary | primary
//! primary := number | 'I' digits | func '(' ... ')' | '(' expr ')'
//! func    := exp | sin | cos | bump
//! ```
//!
//! `I1..In` are the action coordinates (1-based). `bump(e, center, width)`
//! is the smooth compactly supported profile `psi((e - center)/width)` with
//! `psi(u) = exp(-1/(1-u^2))` inside `|u| < 1` and zero outside. Parse
//! errors carry the 1-based column of the offending token.

use anyhow::{anyhow, bail, Result};
use phasemix::expr::{self, Expr};
use std::sync::Arc;

pub fn parse_expr(src: &str, dim: usize) -> Result<Arc<Expr>> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
        dim,
        text: src,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        bail!(p.error("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    dim: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> anyhow::Error {
        self.error_at(self.pos, msg)
    }

    fn error_at(&self, pos: usize, msg: &str) -> anyhow::Error {
        anyhow!(
            "expression parse error at column {}: {} (in `{}`)",
            pos + 1,
            msg,
            self.text
        )
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Arc<Expr>> {
        let mut acc = self.term()?;
        loop {
            if self.eat(b'+') {
                acc = expr::add(acc, self.term()?);
            } else if self.eat(b'-') {
                acc = expr::sub(acc, self.term()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<Arc<Expr>> {
        let mut acc = self.factor()?;
        loop {
            if self.eat(b'*') {
                acc = expr::mul(acc, self.factor()?);
            } else if self.eat(b'/') {
                acc = expr::div(acc, self.factor()?);
            } else {
                return Ok(acc);
            }
        }
    }

    // Negation binds looser than the power: `-I1^2` is `-(I1^2)`.
    fn factor(&mut self) -> Result<Arc<Expr>> {
        if self.eat(b'-') {
            return Ok(expr::neg(self.factor()?));
        }
        let base = self.primary()?;
        if self.eat(b'^') {
            let n = self.integer()?;
            return Ok(expr::pow(base, n));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Arc<Expr>> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::constant(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            _ => Err(self.error("expected a number, coordinate, function, or `(`")),
        }
    }

    fn integer(&mut self) -> Result<i32> {
        self.skip_ws();
        let start = self.pos;
        if self.src.get(self.pos) == Some(&b'-') {
            self.pos += 1;
        }
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        self.text[start..self.pos]
            .parse()
            .map_err(|_| self.error("expected an integer exponent"))
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit()
                || matches!(self.src[self.pos], b'.' | b'e' | b'E')
                || (matches!(self.src[self.pos], b'+' | b'-')
                    && self.pos > start
                    && matches!(self.src[self.pos - 1], b'e' | b'E')))
        {
            self.pos += 1;
        }
        self.text[start..self.pos]
            .parse()
            .map_err(|_| self.error("malformed number"))
    }

    fn ident(&mut self) -> Result<Arc<Expr>> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = &self.text[start..self.pos];
        if let Some(rest) = name.strip_prefix('I') {
            if let Ok(idx) = rest.parse::<usize>() {
                if idx == 0 || idx > self.dim {
                    return Err(self.error_at(
                        start,
                        &format!("coordinate {name} out of range for dimension {}", self.dim),
                    ));
                }
                return Ok(Expr::coord(idx - 1));
            }
        }
        match name {
            "exp" | "sin" | "cos" => {
                self.expect(b'(')?;
                let arg = self.expr()?;
                self.expect(b')')?;
                Ok(match name {
                    "exp" => expr::exp(arg),
                    "sin" => expr::sin(arg),
                    _ => expr::cos(arg),
                })
            }
            "bump" => {
                self.expect(b'(')?;
                let arg = self.expr()?;
                self.expect(b',')?;
                let center = self.signed_number()?;
                self.expect(b',')?;
                let width = self.signed_number()?;
                self.expect(b')')?;
                if width <= 0.0 {
                    return Err(self.error("bump width must be > 0"));
                }
                Ok(expr::bump(arg, center, width))
            }
            "pi" => Ok(Expr::constant(std::f64::consts::PI)),
            other => Err(self.error_at(
                start,
                &format!(
                    "unknown identifier `{other}` (expected I1..I{}, exp, sin, cos, bump, pi)",
                    self.dim
                ),
            )),
        }
    }

    fn signed_number(&mut self) -> Result<f64> {
        if self.eat(b'-') {
            Ok(-self.number()?)
        } else {
            self.number()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_arithmetic() {
        let e = parse_expr("0.5*(I1^2 + I2^2)", 2).unwrap();
        assert!((e.evaluate(&[1.0, 2.0]) - 2.5).abs() < 1e-15);
        let e = parse_expr("1 - 2*I1/4", 1).unwrap();
        assert!((e.evaluate(&[2.0]) - 0.0).abs() < 1e-15);
        let e = parse_expr("-I1^2", 1).unwrap();
        assert_eq!(e.evaluate(&[3.0]), -9.0);
    }

    #[test]
    fn parses_functions() {
        let e = parse_expr("exp(-I1) * sin(I1) + cos(0)", 1).unwrap();
        let x = 0.7f64;
        assert!((e.evaluate(&[x]) - ((-x).exp() * x.sin() + 1.0)).abs() < 1e-15);
        let e = parse_expr("bump((I1-1)^2 + I2^2, 0, 0.25)", 2).unwrap();
        assert!(e.evaluate(&[1.0, 0.0]) > 0.0);
        assert_eq!(e.evaluate(&[2.0, 0.0]), 0.0);
    }

    #[test]
    fn errors_carry_positions() {
        let err = parse_expr("I3 + 1", 2).unwrap_err().to_string();
        assert!(err.contains("column 1"), "{err}");
        let err = parse_expr("1 + * 2", 1).unwrap_err().to_string();
        assert!(err.contains("column 5"), "{err}");
        assert!(parse_expr("sick(I1)", 1).is_err());
        assert!(parse_expr("1 2", 1).is_err());
    }

    #[test]
    fn scientific_notation() {
        let e = parse_expr("1e-3 * I1 + 2.5E2", 1).unwrap();
        assert!((e.evaluate(&[2.0]) - (0.002 + 250.0)).abs() < 1e-12);
    }
}
