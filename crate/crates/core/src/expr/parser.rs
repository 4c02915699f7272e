//! Recursive-descent parser.
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | 't' | 'v' | 'x'k | name '(' sum (',' sum)* ')' | '(' sum ')'
//! ```

use super::ast::{BinOp, Func, Node};
use super::ExprError;

#[derive(Debug, Clone, PartialEq)]
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
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(source: &'a str) -> Result<Vec<(Tok, usize)>, ExprError> {
        let mut lx = Lexer { src: source.as_bytes(), pos: 0 };
        let mut out = Vec::new();
        loop {
            while lx.pos < lx.src.len() && lx.src[lx.pos].is_ascii_whitespace() {
                lx.pos += 1;
            }
            let start = lx.pos;
            let Some(&c) = lx.src.get(lx.pos) else {
                out.push((Tok::End, start + 1));
                return Ok(out);
            };
            let tok = match c {
                b'0'..=b'9' | b'.' => lx.number()?,
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                    while lx.pos < lx.src.len() && (lx.src[lx.pos].is_ascii_alphanumeric() || lx.src[lx.pos] == b'_') {
                        lx.pos += 1;
                    }
                    Tok::Ident(String::from_utf8_lossy(&lx.src[start..lx.pos]).into_owned())
                }
                b'+' | b'-' | b'*' | b'/' | b'^' => {
                    lx.pos += 1;
                    Tok::Op(c as char)
                }
                b'(' => {
                    lx.pos += 1;
                    Tok::LParen
                }
                b')' => {
                    lx.pos += 1;
                    Tok::RParen
                }
                b',' => {
                    lx.pos += 1;
                    Tok::Comma
                }
                _ => {
                    return Err(ExprError::Syntax {
                        position: start + 1,
                        expected: vec!["number".into(), "identifier".into(), "operator".into()],
                        found: (c as char).to_string(),
                    })
                }
            };
            out.push((tok, start + 1));
        }
    }

    fn number(&mut self) -> Result<Tok, ExprError> {
        let start = self.pos;
        let digits = |lx: &mut Self| {
            let s = lx.pos;
            while lx.pos < lx.src.len() && lx.src[lx.pos].is_ascii_digit() {
                lx.pos += 1;
            }
            lx.pos - s
        };
        let mut n = digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            n += digits(self);
        }
        let bad = |pos: usize, found: String| ExprError::Syntax {
            position: pos + 1,
            expected: vec!["digit".into()],
            found,
        };
        if n == 0 {
            return Err(bad(start, ".".into()));
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                let found = self.src.get(self.pos).map(|&c| (c as char).to_string()).unwrap_or_else(|| "end of input".into());
                return Err(bad(self.pos.max(save), found));
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let value: f64 = text.parse().map_err(|_| bad(start, text.into()))?;
        if !value.is_finite() {
            return Err(ExprError::Syntax {
                position: start + 1,
                expected: vec!["finite number".into()],
                found: text.into(),
            });
        }
        Ok(Tok::Num(value))
    }
}

pub(super) struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
    dim: usize,
    allow_v: bool,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(v) => format!("{v}"),
        Tok::Ident(s) => s.clone(),
        Tok::Op(c) => c.to_string(),
        Tok::LParen => "(".into(),
        Tok::RParen => ")".into(),
        Tok::Comma => ",".into(),
        Tok::End => "end of input".into(),
    }
}

impl Parser {
    pub(super) fn parse(source: &str, dim: usize, allow_v: bool) -> Result<Node, ExprError> {
        let mut p = Parser { toks: Lexer::tokens(source)?, at: 0, dim, allow_v };
        let node = p.sum()?;
        match p.peek() {
            Tok::End => Ok(node),
            _ => Err(p.unexpected(&["operator", "end of input"])),
        }
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn position(&self) -> usize {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn unexpected(&self, expected: &[&str]) -> ExprError {
        ExprError::Syntax {
            position: self.position(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: describe(self.peek()),
        }
    }

    fn sum(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn product(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if *self.peek() == Tok::Op('-') {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.primary()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        let position = self.position();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Node::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.sum()?;
                if *self.peek() != Tok::RParen {
                    return Err(self.unexpected(&[")"]));
                }
                self.bump();
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                if *self.peek() == Tok::LParen {
                    return self.call(&name, position);
                }
                self.variable(&name, position)
            }
            _ => Err(self.unexpected(&["number", "identifier", "("])),
        }
    }

    fn variable(&self, name: &str, position: usize) -> Result<Node, ExprError> {
        match name {
            "t" => Ok(Node::T),
            "v" if self.allow_v => Ok(Node::V),
            "v" => Err(ExprError::UnknownIdentifier {
                name: name.into(),
                position,
                reason: "solution value `v` is not allowed here".into(),
            }),
            _ => {
                let index = name
                    .strip_prefix('x')
                    .filter(|k| !k.is_empty() && !k.starts_with('0') && k.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|k| k.parse::<usize>().ok());
                match index {
                    Some(k) if k <= self.dim => Ok(Node::X(k - 1)),
                    Some(k) => Err(ExprError::UnknownIdentifier {
                        name: name.into(),
                        position,
                        reason: format!("index {k} exceeds dimension {}", self.dim),
                    }),
                    None => Err(ExprError::UnknownIdentifier {
                        name: name.into(),
                        position,
                        reason: if Func::from_name(name).is_some() {
                            "function used without arguments".into()
                        } else {
                            "expected t, v or x1..xd".into()
                        },
                    }),
                }
            }
        }
    }

    fn call(&mut self, name: &str, position: usize) -> Result<Node, ExprError> {
        let Some(func) = Func::from_name(name) else {
            return Err(ExprError::UnknownIdentifier {
                name: name.into(),
                position,
                reason: "unknown function".into(),
            });
        };
        self.bump(); // '('
        let mut args = vec![self.sum()?];
        while *self.peek() == Tok::Comma {
            self.bump();
            args.push(self.sum()?);
        }
        if *self.peek() != Tok::RParen {
            return Err(self.unexpected(&[",", ")"]));
        }
        self.bump();
        if args.len() != func.arity() {
            return Err(ExprError::Arity {
                function: func.name(),
                expected: func.arity(),
                found: args.len(),
                position,
            });
        }
        Ok(Node::Call(func, args))
    }
}
