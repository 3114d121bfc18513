use thiserror::Error;

use super::{ArithOp, CmpOp, Expr, Scope, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {offset}: expected {expected}, found {found}")]
pub struct SyntaxError {
    pub offset: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Int(String),
    Real(String),
    Str(String),
    Ident(String),
    Dot,
    LParen,
    RParen,
    Comma,
    Bang,
    AndAnd,
    OrOr,
    Cmp(CmpOp),
    Arith(ArithOp),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Int(s) | Tok::Real(s) => format!("number `{s}`"),
            Tok::Str(_) => "string literal".into(),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Dot => "`.`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Bang => "`!`".into(),
            Tok::AndAnd => "`&&`".into(),
            Tok::OrOr => "`||`".into(),
            Tok::Cmp(op) => format!("`{}`", op.symbol()),
            Tok::Arith(op) => format!("`{}`", op.symbol()),
            Tok::Eof => "end of input".into(),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err(&self, offset: usize, expected: &str, found: String) -> SyntaxError {
        SyntaxError {
            offset,
            expected: expected.to_owned(),
            found,
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek_at(&self, n: usize) -> Option<u8> {
        self.src.as_bytes().get(self.pos + n).copied()
    }

    fn tokens(mut self) -> Result<Vec<(usize, Tok)>, SyntaxError> {
        let mut out = Vec::new();
        loop {
            while self.peek().is_some_and(char::is_whitespace) {
                self.pos += self.peek().unwrap().len_utf8();
            }
            let start = self.pos;
            let Some(c) = self.peek() else {
                out.push((start, Tok::Eof));
                return Ok(out);
            };
            let tok = match c {
                '(' => self.single(Tok::LParen),
                ')' => self.single(Tok::RParen),
                ',' => self.single(Tok::Comma),
                '.' => self.single(Tok::Dot),
                '+' => self.single(Tok::Arith(ArithOp::Add)),
                '-' => self.single(Tok::Arith(ArithOp::Sub)),
                '*' => self.single(Tok::Arith(ArithOp::Mul)),
                '/' => self.single(Tok::Arith(ArithOp::Div)),
                '!' => {
                    if self.peek_at(1) == Some(b'=') {
                        self.pos += 2;
                        Tok::Cmp(CmpOp::Ne)
                    } else {
                        self.single(Tok::Bang)
                    }
                }
                '&' | '|' => {
                    if self.peek_at(1) != Some(c as u8) {
                        let want = if c == '&' { "`&&`" } else { "`||`" };
                        return Err(self.err(start, want, format!("`{c}`")));
                    }
                    self.pos += 2;
                    if c == '&' {
                        Tok::AndAnd
                    } else {
                        Tok::OrOr
                    }
                }
                '<' | '>' => {
                    let eq = self.peek_at(1) == Some(b'=');
                    self.pos += if eq { 2 } else { 1 };
                    Tok::Cmp(match (c, eq) {
                        ('<', false) => CmpOp::Lt,
                        ('<', true) => CmpOp::Le,
                        ('>', false) => CmpOp::Gt,
                        _ => CmpOp::Ge,
                    })
                }
                '=' => match (self.peek_at(1), self.peek_at(2)) {
                    (Some(b'='), _) => {
                        self.pos += 2;
                        Tok::Cmp(CmpOp::Eq)
                    }
                    (Some(b'?'), Some(b'=')) => {
                        self.pos += 3;
                        Tok::Cmp(CmpOp::Identical)
                    }
                    (Some(b'!'), Some(b'=')) => {
                        self.pos += 3;
                        Tok::Cmp(CmpOp::NotIdentical)
                    }
                    _ => return Err(self.err(start, "`==`, `=?=` or `=!=`", "`=`".into())),
                },
                '"' | '\'' => self.string(c)?,
                c if c.is_ascii_digit() => self.number()?,
                c if c.is_ascii_alphabetic() || c == '_' => {
                    while self
                        .peek()
                        .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_')
                    {
                        self.pos += 1;
                    }
                    Tok::Ident(self.src[start..self.pos].to_owned())
                }
                other => return Err(self.err(start, "expression", format!("`{other}`"))),
            };
            out.push((start, tok));
        }
    }

    fn single(&mut self, t: Tok) -> Tok {
        self.pos += 1;
        t
    }

    fn string(&mut self, quote: char) -> Result<Tok, SyntaxError> {
        let start = self.pos;
        self.pos += 1;
        let mut s = String::new();
        loop {
            let Some(c) = self.peek() else {
                return Err(self.err(self.pos, &format!("closing `{quote}`"), "end of input".into()));
            };
            self.pos += c.len_utf8();
            match c {
                c if c == quote => return Ok(Tok::Str(s)),
                '\\' => {
                    let Some(e) = self.peek() else {
                        return Err(self.err(self.pos, "escape character", "end of input".into()));
                    };
                    self.pos += e.len_utf8();
                    s.push(match e {
                        'n' => '\n',
                        't' => '\t',
                        '\\' | '"' | '\'' => e,
                        other => {
                            return Err(self.err(
                                self.pos - other.len_utf8(),
                                "one of \\n \\t \\\\ \\\" \\'",
                                format!("`\\{other}`"),
                            ))
                        }
                    });
                }
                c => s.push(c),
            }
            debug_assert!(self.pos > start);
        }
    }

    fn number(&mut self) -> Result<Tok, SyntaxError> {
        let start = self.pos;
        let digits = |lx: &mut Self| {
            while lx.peek().is_some_and(|c| c.is_ascii_digit()) {
                lx.pos += 1;
            }
        };
        digits(self);
        let mut real = false;
        if self.peek() == Some('.') && self.peek_at(1).is_some_and(|b| b.is_ascii_digit()) {
            real = true;
            self.pos += 1;
            digits(self);
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let mut n = 1;
            if matches!(self.peek_at(1), Some(b'+' | b'-')) {
                n = 2;
            }
            if !self.peek_at(n).is_some_and(|b| b.is_ascii_digit()) {
                return Err(self.err(self.pos + n, "exponent digits", "malformed number".into()));
            }
            real = true;
            self.pos += n;
            digits(self);
        }
        let text = self.src[start..self.pos].to_owned();
        Ok(if real { Tok::Real(text) } else { Tok::Int(text) })
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    idx: usize,
}

fn keyword(t: &Tok) -> Option<String> {
    match t {
        Tok::Ident(s) => Some(s.to_ascii_lowercase()),
        _ => None,
    }
}

const RESERVED: &[&str] = &["true", "false", "undefined", "error", "is", "isnt", "not"];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.idx].1
    }

    fn offset(&self) -> usize {
        self.toks[self.idx].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.idx].1.clone();
        if self.idx + 1 < self.toks.len() {
            self.idx += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &str) -> Result<T, SyntaxError> {
        Err(SyntaxError {
            offset: self.offset(),
            expected: expected.to_owned(),
            found: self.peek().describe(),
        })
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<(), SyntaxError> {
        if *self.peek() == t {
            self.bump();
            Ok(())
        } else {
            self.fail(what)
        }
    }

    fn or(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.and()?;
        while *self.peek() == Tok::OrOr {
            self.bump();
            let rhs = self.and()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.equality()?;
        while *self.peek() == Tok::AndAnd {
            self.bump();
            let rhs = self.equality()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn equality_op(&mut self) -> Option<CmpOp> {
        match self.peek() {
            Tok::Cmp(op) if op.is_equality() => {
                let op = *op;
                self.bump();
                Some(op)
            }
            t => match keyword(t).as_deref() {
                Some("isnt") => {
                    self.bump();
                    Some(CmpOp::Isnt)
                }
                Some("is") => {
                    self.bump();
                    // `is not` is sugar for `=!=`
                    if keyword(self.peek()).as_deref() == Some("not") {
                        self.bump();
                        Some(CmpOp::NotIdentical)
                    } else {
                        Some(CmpOp::Is)
                    }
                }
                _ => None,
            },
        }
    }

    fn equality(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.relational()?;
        while let Some(op) = self.equality_op() {
            let rhs = self.relational()?;
            lhs = Expr::Cmp(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn relational(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.additive()?;
        while let Tok::Cmp(op @ (CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge)) = *self.peek() {
            self.bump();
            let rhs = self.additive()?;
            lhs = Expr::Cmp(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.multiplicative()?;
        while let Tok::Arith(op @ (ArithOp::Add | ArithOp::Sub)) = *self.peek() {
            self.bump();
            let rhs = self.multiplicative()?;
            lhs = Expr::Arith(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn multiplicative(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.unary()?;
        while let Tok::Arith(op @ (ArithOp::Mul | ArithOp::Div)) = *self.peek() {
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Arith(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, SyntaxError> {
        match self.peek() {
            Tok::Bang => {
                self.bump();
                Ok(Expr::Not(Box::new(self.unary()?)))
            }
            Tok::Arith(ArithOp::Sub) => {
                self.bump();
                match self.peek().clone() {
                    Tok::Int(digits) => {
                        let at = self.offset();
                        self.bump();
                        number_literal(&format!("-{digits}"), false, at)
                    }
                    Tok::Real(digits) => {
                        let at = self.offset();
                        self.bump();
                        number_literal(&format!("-{digits}"), true, at)
                    }
                    _ => Ok(Expr::Neg(Box::new(self.unary()?))),
                }
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, SyntaxError> {
        let at = self.offset();
        match self.peek().clone() {
            Tok::Int(digits) => {
                self.bump();
                number_literal(&digits, false, at)
            }
            Tok::Real(digits) => {
                self.bump();
                number_literal(&digits, true, at)
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Expr::Literal(Value::Str(s)))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.or()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Expr::Paren(Box::new(inner)))
            }
            Tok::Ident(name) => {
                let lower = name.to_ascii_lowercase();
                match lower.as_str() {
                    "true" | "false" | "undefined" | "error" => {
                        self.bump();
                        return Ok(Expr::Literal(match lower.as_str() {
                            "true" => Value::Boolean(true),
                            "false" => Value::Boolean(false),
                            "undefined" => Value::Undefined,
                            _ => Value::Error,
                        }));
                    }
                    "is" | "isnt" | "not" => return self.fail("expression"),
                    _ => {}
                }
                self.bump();
                if *self.peek() == Tok::LParen {
                    self.bump();
                    let mut args = Vec::new();
                    if *self.peek() != Tok::RParen {
                        loop {
                            args.push(self.or()?);
                            if *self.peek() == Tok::Comma {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(Tok::RParen, "`,` or `)`")?;
                    return Ok(Expr::Call { name, args });
                }
                let scope = match lower.as_str() {
                    "my" => Some(Scope::My),
                    "target" => Some(Scope::Target),
                    _ => None,
                };
                if let (Some(scope), Tok::Dot) = (scope, self.peek()) {
                    self.bump();
                    return match self.peek().clone() {
                        Tok::Ident(attr) if !RESERVED.contains(&attr.to_ascii_lowercase().as_str()) => {
                            self.bump();
                            Ok(Expr::AttrRef {
                                scope: Some(scope),
                                name: attr,
                            })
                        }
                        _ => self.fail("attribute name"),
                    };
                }
                Ok(Expr::AttrRef { scope: None, name })
            }
            _ => self.fail("expression"),
        }
    }
}

fn number_literal(text: &str, real: bool, at: usize) -> Result<Expr, SyntaxError> {
    let bad = || SyntaxError {
        offset: at,
        expected: "representable number".into(),
        found: format!("`{text}`"),
    };
    let v = if real {
        let r: f64 = text.parse().map_err(|_| bad())?;
        if !r.is_finite() {
            return Err(bad());
        }
        Value::Real(r)
    } else {
        Value::Integer(text.parse().map_err(|_| bad())?)
    };
    Ok(Expr::Literal(v))
}

/// Parses one expression. The whole input must be consumed.
pub fn parse(text: &str) -> Result<Expr, SyntaxError> {
    let toks = Lexer { src: text, pos: 0 }.tokens()?;
    let mut p = Parser { toks, idx: 0 };
    let e = p.or()?;
    if *p.peek() != Tok::Eof {
        return p.fail("operator or end of input");
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classad::{DESIRED_SITES_EXPR, P5_START_EXPR};

    #[test]
    fn desired_sites_expression_is_three_arg_call() {
        let e = parse(DESIRED_SITES_EXPR).unwrap();
        let Expr::Call { name, args } = e else {
            panic!("expected call, got {e:?}")
        };
        assert_eq!(name, "ifthenelse");
        assert_eq!(args.len(), 3);
        assert_eq!(
            args[0],
            Expr::Cmp(
                CmpOp::NotIdentical,
                Box::new(Expr::attr("DESIRED_Sites")),
                Box::new(Expr::Literal(Value::Undefined))
            )
        );
        assert_eq!(args[2], Expr::Literal(Value::Undefined));
    }

    #[test]
    fn start_expression_is_or_of_two_not_identical() {
        let e = parse(P5_START_EXPR).unwrap();
        let Expr::Paren(inner) = e else { panic!() };
        let Expr::Or(l, r) = *inner else { panic!() };
        assert!(matches!(*l, Expr::Cmp(CmpOp::NotIdentical, ..)));
        assert!(matches!(*r, Expr::Cmp(CmpOp::NotIdentical, ..)));
        let Expr::Cmp(_, _, site) = *l else { unreachable!() };
        assert_eq!(*site, Expr::literal("T2_CH_CERN_P5"));
    }

    #[test]
    fn literal_true() {
        assert_eq!(parse("true").unwrap(), Expr::Literal(Value::Boolean(true)));
        assert_eq!(parse("TRUE").unwrap(), Expr::Literal(Value::Boolean(true)));
    }

    #[test]
    fn dangling_operator_reports_offset() {
        let e = parse("1 +").unwrap_err();
        assert_eq!(e.offset, 3);
        assert_eq!(e.found, "end of input");
    }

    #[test]
    fn other_syntax_errors() {
        assert_eq!(parse("").unwrap_err().offset, 0);
        assert_eq!(parse("(a").unwrap_err().offset, 2);
        assert_eq!(parse("a = b").unwrap_err().offset, 2);
        assert_eq!(parse("a & b").unwrap_err().offset, 2);
        assert_eq!(parse("'abc").unwrap_err().offset, 4);
        assert_eq!(parse("a b").unwrap_err().offset, 2);
        assert_eq!(parse("f(a,)").unwrap_err().offset, 4);
        assert_eq!(parse("MY.true").unwrap_err().offset, 3);
        assert_eq!(parse("1e").unwrap_err().offset, 2);
        assert_eq!(parse("99999999999999999999").unwrap_err().offset, 0);
        assert_eq!(parse("a # b").unwrap_err().offset, 2);
    }

    #[test]
    fn precedence_and_associativity() {
        let e = parse("a || b && c == 1 + 2 * 3").unwrap();
        assert_eq!(e.to_string(), "a || b && c == 1 + 2 * 3");
        let Expr::Or(_, r) = e else { panic!() };
        let Expr::And(_, r) = *r else { panic!() };
        let Expr::Cmp(CmpOp::Eq, _, r) = *r else { panic!() };
        assert!(matches!(*r, Expr::Arith(ArithOp::Add, ..)));
        let e = parse("1 - 2 - 3").unwrap();
        let Expr::Arith(ArithOp::Sub, l, _) = e else { panic!() };
        assert!(matches!(*l, Expr::Arith(ArithOp::Sub, ..)));
    }

    #[test]
    fn is_forms_and_scopes() {
        assert!(matches!(parse("x is undefined").unwrap(), Expr::Cmp(CmpOp::Is, ..)));
        assert!(matches!(parse("x isnt undefined").unwrap(), Expr::Cmp(CmpOp::Isnt, ..)));
        assert!(matches!(parse("x IS NOT undefined").unwrap(), Expr::Cmp(CmpOp::NotIdentical, ..)));
        assert_eq!(
            parse("TARGET.Cpus").unwrap(),
            Expr::AttrRef {
                scope: Some(Scope::Target),
                name: "Cpus".into()
            }
        );
        assert_eq!(parse("My.x").unwrap().to_string(), "MY.x");
        // a bare `my` is an ordinary attribute
        assert_eq!(parse("my").unwrap(), Expr::attr("my"));
    }

    #[test]
    fn negative_numbers_fold() {
        assert_eq!(parse("-5").unwrap(), Expr::literal(-5i64));
        assert_eq!(parse("-9223372036854775808").unwrap(), Expr::literal(i64::MIN));
        assert_eq!(parse("- 2.5e1").unwrap(), Expr::literal(-25.0));
        assert!(matches!(parse("-x").unwrap(), Expr::Neg(_)));
        assert_eq!(parse("3 - -5").unwrap().to_string(), "3 - -5");
    }

    #[test]
    fn quoted_strings() {
        assert_eq!(parse(r#""a\"b""#).unwrap(), Expr::literal("a\"b"));
        assert_eq!(parse(r"'it\'s'").unwrap(), Expr::literal("it's"));
        assert_eq!(parse("'T2_CH_CERN_P5'").unwrap(), parse("\"T2_CH_CERN_P5\"").unwrap());
    }
}
