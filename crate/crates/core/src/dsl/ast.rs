//! Expression syntax: tokenizer, recursive-descent parser and printer.
//!
//! Precedence, from tightest: `^` (right associative), unary `-`, `* /`,
//! `+ -`. A unary minus binds looser than `^`, so `-x^2` is `-(x^2)`; the
//! exponent itself may carry a sign (`x^-2`).

use std::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    UnknownSymbol,
    Arity,
}

#[derive(Clone, Debug, Error, PartialEq)]
#[error("{kind:?} error at {pos}: {msg}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub pos: Pos,
    pub msg: String,
}

impl ParseError {
    pub fn syntax(pos: Pos, msg: impl Into<String>) -> Self {
        ParseError { kind: ParseErrorKind::Syntax, pos, msg: msg.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

#[derive(Clone, Debug)]
pub enum ExprKind {
    Num(f64),
    Sym(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(String, Vec<Expr>),
}

/// A parsed expression. Equality is structural and ignores source positions.
#[derive(Clone, Debug)]
pub struct Expr {
    pub kind: ExprKind,
    pub pos: Pos,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        match (&self.kind, &other.kind) {
            (ExprKind::Num(a), ExprKind::Num(b)) => a.to_bits() == b.to_bits(),
            (ExprKind::Sym(a), ExprKind::Sym(b)) => a == b,
            (ExprKind::Neg(a), ExprKind::Neg(b)) => a == b,
            (ExprKind::Bin(o1, a1, b1), ExprKind::Bin(o2, a2, b2)) => {
                o1 == o2 && a1 == a2 && b1 == b2
            }
            (ExprKind::Call(n1, a1), ExprKind::Call(n2, a2)) => n1 == n2 && a1 == a2,
            _ => false,
        }
    }
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr { kind: ExprKind::Num(v), pos: Pos::default() }
    }

    pub fn sym(name: &str) -> Expr {
        Expr { kind: ExprKind::Sym(name.to_string()), pos: Pos::default() }
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr { kind: ExprKind::Bin(op, Box::new(a), Box::new(b)), pos: Pos::default() }
    }

    pub fn call(name: &str, args: Vec<Expr>) -> Expr {
        Expr { kind: ExprKind::Call(name.to_string(), args), pos: Pos::default() }
    }

    /// Renames symbols through `f`; symbols mapped to `None` are kept.
    pub fn rename(&self, f: &dyn Fn(&str) -> Option<String>) -> Expr {
        let kind = match &self.kind {
            ExprKind::Num(v) => ExprKind::Num(*v),
            ExprKind::Sym(s) => ExprKind::Sym(f(s).unwrap_or_else(|| s.clone())),
            ExprKind::Neg(a) => ExprKind::Neg(Box::new(a.rename(f))),
            ExprKind::Bin(op, a, b) => {
                ExprKind::Bin(*op, Box::new(a.rename(f)), Box::new(b.rename(f)))
            }
            ExprKind::Call(n, args) => {
                ExprKind::Call(n.clone(), args.iter().map(|a| a.rename(f)).collect())
            }
        };
        Expr { kind, pos: self.pos }
    }

    /// Every symbol name referenced, in first-occurrence order.
    pub fn symbols(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut Vec<String>) {
        match &self.kind {
            ExprKind::Num(_) => {}
            ExprKind::Sym(s) => {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
            ExprKind::Neg(a) => a.collect_symbols(out),
            ExprKind::Bin(_, a, b) => {
                a.collect_symbols(out);
                b.collect_symbols(out);
            }
            ExprKind::Call(_, args) => args.iter().for_each(|a| a.collect_symbols(out)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    src: &'a str,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, line: usize, col: usize) -> Self {
        Lexer { chars: src.char_indices().peekable(), src, line, col }
    }

    fn bump(&mut self) -> Option<(usize, char)> {
        let c = self.chars.next();
        if let Some((_, ch)) = c {
            if ch == '\n' {
                self.line += 1;
                self.col = 1;
            } else {
                self.col += 1;
            }
        }
        c
    }

    fn tokens(mut self) -> Result<Vec<(Tok, Pos)>, ParseError> {
        let mut out = Vec::new();
        loop {
            while matches!(self.chars.peek(), Some((_, c)) if c.is_whitespace()) {
                self.bump();
            }
            let pos = Pos { line: self.line, col: self.col };
            let Some(&(start, c)) = self.chars.peek() else {
                out.push((Tok::End, pos));
                return Ok(out);
            };
            if c.is_ascii_digit() || c == '.' {
                let mut end = start;
                let mut prev = ' ';
                while let Some(&(i, ch)) = self.chars.peek() {
                    let exp_sign = (ch == '+' || ch == '-') && (prev == 'e' || prev == 'E');
                    if ch.is_ascii_digit() || ch == '.' || ch == 'e' || ch == 'E' || exp_sign {
                        end = i + ch.len_utf8();
                        prev = ch;
                        self.bump();
                    } else {
                        break;
                    }
                }
                let text = &self.src[start..end];
                let v: f64 = text
                    .parse()
                    .map_err(|_| ParseError::syntax(pos, format!("malformed number '{text}'")))?;
                out.push((Tok::Num(v), pos));
            } else if c.is_ascii_alphabetic() || c == '_' {
                let mut end = start;
                while let Some(&(i, ch)) = self.chars.peek() {
                    if ch.is_ascii_alphanumeric() || ch == '_' {
                        end = i + ch.len_utf8();
                        self.bump();
                    } else {
                        break;
                    }
                }
                out.push((Tok::Ident(self.src[start..end].to_string()), pos));
            } else {
                self.bump();
                let tok = match c {
                    '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ',' => Tok::Comma,
                    _ => return Err(ParseError::syntax(pos, format!("unexpected character '{c}'"))),
                };
                out.push((tok, pos));
            }
        }
    }
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn next(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        let (t, pos) = self.next();
        if t == tok {
            Ok(())
        } else {
            Err(ParseError::syntax(pos, format!("expected {what}, found {t:?}")))
        }
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.multiplicative()?;
        while let Tok::Op(c @ ('+' | '-')) = *self.peek() {
            let pos = self.pos();
            self.next();
            let rhs = self.multiplicative()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr { kind: ExprKind::Bin(op, Box::new(lhs), Box::new(rhs)), pos };
        }
        Ok(lhs)
    }

    fn multiplicative(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Tok::Op(c @ ('*' | '/')) = *self.peek() {
            let pos = self.pos();
            self.next();
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr { kind: ExprKind::Bin(op, Box::new(lhs), Box::new(rhs)), pos };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Op('-') {
            let pos = self.pos();
            self.next();
            let inner = self.unary()?;
            return Ok(Expr { kind: ExprKind::Neg(Box::new(inner)), pos });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if *self.peek() == Tok::Op('^') {
            let pos = self.pos();
            self.next();
            let exponent = self.unary()?;
            return Ok(Expr {
                kind: ExprKind::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)),
                pos,
            });
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let (tok, pos) = self.next();
        match tok {
            Tok::Num(v) => Ok(Expr { kind: ExprKind::Num(v), pos }),
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    self.next();
                    let mut args = Vec::new();
                    if *self.peek() != Tok::RParen {
                        loop {
                            args.push(self.additive()?);
                            if *self.peek() == Tok::Comma {
                                self.next();
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(Tok::RParen, "')'")?;
                    Ok(Expr { kind: ExprKind::Call(name, args), pos })
                } else {
                    Ok(Expr { kind: ExprKind::Sym(name), pos })
                }
            }
            Tok::LParen => {
                let inner = self.additive()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(inner)
            }
            other => Err(ParseError::syntax(pos, format!("unexpected token {other:?}"))),
        }
    }
}

/// Parses a single expression.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    parse_at(text, 1, 1)
}

/// Parses with positions offset to a location inside a larger document.
pub fn parse_at(text: &str, line: usize, col: usize) -> Result<Expr, ParseError> {
    let toks = Lexer::new(text, line, col).tokens()?;
    let mut p = Parser { toks, at: 0 };
    let e = p.additive()?;
    if *p.peek() != Tok::End {
        return Err(ParseError::syntax(p.pos(), format!("trailing input {:?}", p.peek())));
    }
    Ok(e)
}

fn fmt_num(v: f64) -> String {
    if v < 0.0 || (v == 0.0 && v.is_sign_negative()) {
        format!("(-{})", -v)
    } else {
        format!("{v}")
    }
}

impl Expr {
    fn write(&self, out: &mut String, parent: u8, right_of: bool) {
        match &self.kind {
            ExprKind::Num(v) => out.push_str(&fmt_num(*v)),
            ExprKind::Sym(s) => out.push_str(s),
            ExprKind::Neg(a) => {
                // unary minus sits between * / and ^
                let needs = parent > 3 || (parent == 3 && right_of);
                if needs {
                    out.push('(');
                }
                out.push('-');
                a.write(out, 3, false);
                if needs {
                    out.push(')');
                }
            }
            ExprKind::Bin(op, a, b) => {
                let p = op.precedence();
                let needs = p < parent || (p == parent && right_of && *op != BinOp::Pow)
                    || (p == parent && !right_of && *op == BinOp::Pow);
                if needs {
                    out.push('(');
                }
                // ^ is right associative: the left operand of ^ must be atomic.
                let left_parent = if *op == BinOp::Pow { 5 } else { p };
                a.write(out, left_parent, false);
                if *op == BinOp::Pow {
                    out.push('^');
                } else {
                    out.push(' ');
                    out.push_str(op.symbol());
                    out.push(' ');
                }
                b.write(out, if *op == BinOp::Pow { 3 } else { p }, true);
                if needs {
                    out.push(')');
                }
            }
            ExprKind::Call(name, args) => {
                out.push_str(name);
                out.push('(');
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    a.write(out, 0, false);
                }
                out.push(')');
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write(&mut s, 0, false);
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_of_sine() {
        let e = parse("sin(x1)^2").unwrap();
        match e.kind {
            ExprKind::Bin(BinOp::Pow, base, exp) => {
                assert!(matches!(base.kind, ExprKind::Call(ref n, _) if n == "sin"));
                assert_eq!(*exp, Expr::num(2.0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        assert_eq!(parse("-x^2").unwrap(), parse("-(x^2)").unwrap());
        assert_eq!(parse("2^3^2").unwrap(), parse("2^(3^2)").unwrap());
        assert_eq!(parse("x^-2").unwrap(), parse("x^(-2)").unwrap());
    }

    #[test]
    fn ell4_norm_expression() {
        let e = parse("(v1^4 + v2^4)^(1/4)").unwrap();
        assert_eq!(e.symbols(), vec!["v1".to_string(), "v2".to_string()]);
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let err = parse("1 +\n  * 2").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Syntax);
        assert_eq!(err.pos, Pos { line: 2, col: 3 });
        assert!(parse("sin(x1").is_err());
        assert!(parse("x1 $ 2").is_err());
    }

    #[test]
    fn printing_reparses_to_same_tree() {
        for s in [
            "1 - (2 - 3)",
            "a / (b * c)",
            "(a ^ b) ^ c",
            "-(a + b) * c",
            "2 * -x",
            "1/norm(x) * F0(v)",
            "exp(2*x1)*(1 + x1^2)",
            "1e-8 + 0.25",
        ] {
            let e = parse(s).unwrap();
            let printed = e.to_string();
            assert_eq!(parse(&printed).unwrap(), e, "{s} -> {printed}");
        }
    }
}
