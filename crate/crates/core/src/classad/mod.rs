//! A small ClassAd-style expression language: literals, attribute references,
//! boolean and comparison algebra with three-valued logic, and the handful of
//! functions needed by frontend match policies.
//!
//! ```
//! use vacsim::classad::{parse, evaluate, AttributeSet, Value};
//!
//! let start = parse("GLIDEIN_CMSSite =!= 'T2_CH_CERN_P5' || WMAgent_AgentName =!= UNDEFINED").unwrap();
//! let mut slot = AttributeSet::new();
//! slot.set("GLIDEIN_CMSSite", "T2_CH_CERN_P5");
//! assert_eq!(evaluate(&start, &slot, &AttributeSet::new()), Value::Boolean(false));
//! ```

mod eval;
mod parse;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use eval::{evaluate, matches};
pub use parse::{parse, SyntaxError};

/// Frontend match expression restricting jobs to the sites they desire.
pub const DESIRED_SITES_EXPR: &str = "ifthenelse(DESIRED_Sites is not undefined, \
     stringListMember(GLIDEIN_CMSSite, DESIRED_Sites), undefined)";

/// Slot START expression admitting only agent-submitted (Production and
/// Tier-0) jobs on the P5 site.
pub const P5_START_EXPR: &str =
    "(GLIDEIN_CMSSite =!= 'T2_CH_CERN_P5' || WMAgent_AgentName =!= UNDEFINED)";

/// Result of evaluating an expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Boolean(bool),
    Integer(i64),
    Real(f64),
    Str(String),
    Undefined,
    Error,
}

impl Value {
    pub fn is_true(&self) -> bool {
        matches!(self, Value::Boolean(true))
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    /// `=?=` semantics: same variant and same value, strings compared
    /// case-sensitively, no numeric promotion.
    pub fn identical(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Boolean(a), Value::Boolean(b)) => a == b,
            (Value::Integer(a), Value::Integer(b)) => a == b,
            (Value::Real(a), Value::Real(b)) => a == b || (a.is_nan() && b.is_nan()),
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Undefined, Value::Undefined) => true,
            (Value::Error, Value::Error) => true,
            _ => false,
        }
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Boolean(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Integer(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Boolean(b) => write!(f, "{b}"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write_real(f, *r),
            Value::Str(s) => write_quoted(f, s),
            Value::Undefined => f.write_str("undefined"),
            Value::Error => f.write_str("error"),
        }
    }
}

fn write_real(f: &mut fmt::Formatter<'_>, r: f64) -> fmt::Result {
    if r.is_finite() {
        // Debug is the shortest representation that parses back to the same bits.
        write!(f, "{r:?}")
    } else {
        f.write_str("error")
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

/// Explicit ad prefix on an attribute reference (`MY.x`, `TARGET.x`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    My,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    /// `=?=`
    Identical,
    /// `=!=`
    NotIdentical,
    Is,
    Isnt,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Identical => "=?=",
            CmpOp::NotIdentical => "=!=",
            CmpOp::Is => "is",
            CmpOp::Isnt => "isnt",
        }
    }

    fn is_equality(self) -> bool {
        !matches!(self, CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ArithOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
            ArithOp::Div => "/",
        }
    }
}

/// Expression syntax tree. `Paren` is kept so that printing a parsed tree
/// reproduces its grouping.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    AttrRef { scope: Option<Scope>, name: String },
    Not(Box<Expr>),
    Neg(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    Arith(ArithOp, Box<Expr>, Box<Expr>),
    Call { name: String, args: Vec<Expr> },
    Paren(Box<Expr>),
}

impl Expr {
    pub fn literal(v: impl Into<Value>) -> Expr {
        Expr::Literal(v.into())
    }

    pub fn attr(name: impl Into<String>) -> Expr {
        Expr::AttrRef {
            scope: None,
            name: name.into(),
        }
    }

    /// Binding strength used by the printer; higher binds tighter.
    fn precedence(&self) -> u8 {
        match self {
            Expr::Or(..) => 1,
            Expr::And(..) => 2,
            Expr::Cmp(op, ..) if op.is_equality() => 3,
            Expr::Cmp(..) => 4,
            Expr::Arith(ArithOp::Add | ArithOp::Sub, ..) => 5,
            Expr::Arith(..) => 6,
            Expr::Not(_) | Expr::Neg(_) => 7,
            Expr::Literal(Value::Integer(i)) if *i < 0 => 7,
            Expr::Literal(Value::Real(r)) if r.is_sign_negative() => 7,
            _ => 8,
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, child: &Expr, min_prec: u8) -> fmt::Result {
    if child.precedence() < min_prec {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

fn write_binary(f: &mut fmt::Formatter<'_>, op: &str, prec: u8, l: &Expr, r: &Expr) -> fmt::Result {
    write_child(f, l, prec)?;
    write!(f, " {op} ")?;
    write_child(f, r, prec + 1)
}

/// Canonical form: double-quoted strings, single spaces around binary
/// operators, parentheses only where the tree requires them.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(v) => write!(f, "{v}"),
            Expr::AttrRef { scope, name } => match scope {
                Some(Scope::My) => write!(f, "MY.{name}"),
                Some(Scope::Target) => write!(f, "TARGET.{name}"),
                None => f.write_str(name),
            },
            Expr::Not(e) => {
                f.write_str("!")?;
                write_child(f, e, 7)
            }
            Expr::Neg(e) => {
                f.write_str("-")?;
                // keep `-5` from folding into a negative literal on re-parse
                if matches!(**e, Expr::Literal(Value::Integer(_) | Value::Real(_))) {
                    write!(f, "({e})")
                } else {
                    write_child(f, e, 7)
                }
            }
            Expr::Or(l, r) => write_binary(f, "||", 1, l, r),
            Expr::And(l, r) => write_binary(f, "&&", 2, l, r),
            Expr::Cmp(op, l, r) => write_binary(f, op.symbol(), self.precedence(), l, r),
            Expr::Arith(op, l, r) => write_binary(f, op.symbol(), self.precedence(), l, r),
            Expr::Call { name, args } => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            Expr::Paren(e) => write!(f, "({e})"),
        }
    }
}

/// Expressions serialize as their canonical source text.
impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Calls `f` with the lowercase form of `name`, avoiding an allocation for
/// the short names attribute lookups use.
fn with_folded<R>(name: &str, f: impl FnOnce(&str) -> R) -> R {
    if !name.bytes().any(|b| b.is_ascii_uppercase()) {
        return f(name);
    }
    let mut buf = [0u8; 64];
    match buf.get_mut(..name.len()) {
        Some(dst) => {
            dst.copy_from_slice(name.as_bytes());
            dst.make_ascii_lowercase();
            f(std::str::from_utf8(dst).expect("ASCII case folding keeps UTF-8 valid"))
        }
        None => f(&name.to_ascii_lowercase()),
    }
}

/// Attribute map playing the role of a job ad or a slot ad. Keys are
/// case-insensitive; the spelling of the first insertion is kept for display.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeSet {
    entries: BTreeMap<String, (String, Expr)>,
}

impl AttributeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, expr: Expr) {
        let name = name.into();
        let key = name.to_ascii_lowercase();
        match self.entries.get_mut(&key) {
            Some(slot) => slot.1 = expr,
            None => {
                self.entries.insert(key, (name, expr));
            }
        }
    }

    pub fn set(&mut self, name: impl Into<String>, value: impl Into<Value>) {
        self.insert(name, Expr::Literal(value.into()));
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.set(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Expr> {
        with_folded(name, |k| self.entries.get(k)).map(|(_, e)| e)
    }

    pub fn contains(&self, name: &str) -> bool {
        with_folded(name, |k| self.entries.contains_key(k))
    }

    pub fn remove(&mut self, name: &str) -> Option<Expr> {
        self.entries.remove(&name.to_ascii_lowercase()).map(|(_, e)| e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Expr)> {
        self.entries.values().map(|(n, e)| (n.as_str(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_names_are_case_insensitive() {
        let mut ad = AttributeSet::new();
        ad.set("GLIDEIN_CMSSite", "T2_CH_CERN_P5");
        assert!(ad.contains("glidein_cmssite"));
        ad.set("glidein_cmssite", "other");
        assert_eq!(ad.len(), 1);
        assert_eq!(ad.iter().next().unwrap().0, "GLIDEIN_CMSSite");
        assert_eq!(ad.get("GLIDEIN_CMSSITE"), Some(&Expr::literal("other")));
    }

    #[test]
    fn canonical_printing_uses_double_quotes() {
        let e = parse(P5_START_EXPR).unwrap();
        assert_eq!(
            e.to_string(),
            "(GLIDEIN_CMSSite =!= \"T2_CH_CERN_P5\" || WMAgent_AgentName =!= undefined)"
        );
        let e = parse(DESIRED_SITES_EXPR).unwrap();
        assert_eq!(
            e.to_string(),
            "ifthenelse(DESIRED_Sites =!= undefined, stringListMember(GLIDEIN_CMSSite, DESIRED_Sites), undefined)"
        );
    }

    #[test]
    fn printer_inserts_required_parentheses() {
        let e = Expr::And(
            Box::new(Expr::Or(Box::new(Expr::attr("a")), Box::new(Expr::attr("b")))),
            Box::new(Expr::attr("c")),
        );
        assert_eq!(e.to_string(), "(a || b) && c");
        let e = Expr::Arith(
            ArithOp::Sub,
            Box::new(Expr::literal(1i64)),
            Box::new(Expr::Arith(
                ArithOp::Sub,
                Box::new(Expr::literal(2i64)),
                Box::new(Expr::literal(3i64)),
            )),
        );
        assert_eq!(e.to_string(), "1 - (2 - 3)");
    }

    #[test]
    fn string_escapes_print() {
        assert_eq!(Value::from("a\"b\\c").to_string(), r#""a\"b\\c""#);
    }
}
