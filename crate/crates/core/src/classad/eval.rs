use std::cmp::Ordering;

use super::{ArithOp, AttributeSet, CmpOp, Expr, Scope, Value};

/// Attribute indirections deeper than this evaluate to `Error`, which keeps
/// self-referencing ads from recursing forever.
const MAX_DEPTH: usize = 64;

/// Evaluates `e` with attribute references resolved in `my` first, then in
/// `target`. Total: every failure mode is reported as `Value::Error`.
pub fn evaluate(e: &Expr, my: &AttributeSet, target: &AttributeSet) -> Value {
    eval(e, my, target, 0)
}

/// Bilateral match: the job's requirements and the slot's START must both be
/// exactly `true`. `undefined` and `error` are no-match.
pub fn matches(job_requirements: &Expr, slot_start: &Expr, job: &AttributeSet, slot: &AttributeSet) -> bool {
    evaluate(job_requirements, job, slot).is_true() && evaluate(slot_start, slot, job).is_true()
}

fn eval(e: &Expr, my: &AttributeSet, target: &AttributeSet, depth: usize) -> Value {
    if depth > MAX_DEPTH {
        return Value::Error;
    }
    let d = depth + 1;
    match e {
        Expr::Literal(v) => v.clone(),
        Expr::Paren(inner) => eval(inner, my, target, d),
        Expr::AttrRef { scope, name } => match scope {
            Some(Scope::My) => lookup_in(my, target, name, d),
            Some(Scope::Target) => lookup_in(target, my, name, d),
            None => {
                if my.contains(name) {
                    lookup_in(my, target, name, d)
                } else {
                    lookup_in(target, my, name, d)
                }
            }
        },
        Expr::Not(inner) => match eval(inner, my, target, d) {
            Value::Boolean(b) => Value::Boolean(!b),
            Value::Undefined => Value::Undefined,
            _ => Value::Error,
        },
        Expr::Neg(inner) => match eval(inner, my, target, d) {
            Value::Integer(i) => i.checked_neg().map_or(Value::Error, Value::Integer),
            Value::Real(r) => Value::Real(-r),
            Value::Undefined => Value::Undefined,
            _ => Value::Error,
        },
        Expr::And(l, r) => {
            let (l, r) = (truth(&eval(l, my, target, d)), truth(&eval(r, my, target, d)));
            use Truth::*;
            match (l, r) {
                (Err, _) | (_, Err) => Value::Error,
                (False, _) | (_, False) => Value::Boolean(false),
                (Undef, _) | (_, Undef) => Value::Undefined,
                (True, True) => Value::Boolean(true),
            }
        }
        Expr::Or(l, r) => {
            let (l, r) = (truth(&eval(l, my, target, d)), truth(&eval(r, my, target, d)));
            use Truth::*;
            match (l, r) {
                (Err, _) | (_, Err) => Value::Error,
                (True, _) | (_, True) => Value::Boolean(true),
                (Undef, _) | (_, Undef) => Value::Undefined,
                (False, False) => Value::Boolean(false),
            }
        }
        Expr::Cmp(op, l, r) => compare(*op, &eval(l, my, target, d), &eval(r, my, target, d)),
        Expr::Arith(op, l, r) => arith(*op, &eval(l, my, target, d), &eval(r, my, target, d)),
        Expr::Call { name, args } => call(name, args, my, target, d),
    }
}

/// An attribute found in `ad` is evaluated with `ad` as MY and `other` as TARGET.
fn lookup_in(ad: &AttributeSet, other: &AttributeSet, name: &str, depth: usize) -> Value {
    match ad.get(name) {
        Some(e) => eval(e, ad, other, depth),
        None => Value::Undefined,
    }
}

#[derive(Clone, Copy)]
enum Truth {
    True,
    False,
    Undef,
    Err,
}

fn truth(v: &Value) -> Truth {
    match v {
        Value::Boolean(true) => Truth::True,
        Value::Boolean(false) => Truth::False,
        Value::Undefined => Truth::Undef,
        _ => Truth::Err,
    }
}

fn compare(op: CmpOp, l: &Value, r: &Value) -> Value {
    match op {
        CmpOp::Identical | CmpOp::Is => return Value::Boolean(l.identical(r)),
        CmpOp::NotIdentical | CmpOp::Isnt => return Value::Boolean(!l.identical(r)),
        _ => {}
    }
    if matches!(l, Value::Error) || matches!(r, Value::Error) {
        return Value::Error;
    }
    if matches!(l, Value::Undefined) || matches!(r, Value::Undefined) {
        return Value::Undefined;
    }
    let ord = match (l, r) {
        (Value::Integer(a), Value::Integer(b)) => Some(a.cmp(b)),
        (Value::Integer(_) | Value::Real(_), Value::Integer(_) | Value::Real(_)) => {
            as_real(l).partial_cmp(&as_real(r))
        }
        // string comparison is case-insensitive, as in ClassAd `==`
        (Value::Str(a), Value::Str(b)) => Some(a.to_lowercase().cmp(&b.to_lowercase())),
        (Value::Boolean(a), Value::Boolean(b)) => {
            return match op {
                CmpOp::Eq => Value::Boolean(a == b),
                CmpOp::Ne => Value::Boolean(a != b),
                _ => Value::Error,
            }
        }
        _ => return Value::Error,
    };
    let Some(ord) = ord else {
        // NaN compares unequal to everything
        return match op {
            CmpOp::Ne => Value::Boolean(true),
            _ => Value::Boolean(false),
        };
    };
    Value::Boolean(match op {
        CmpOp::Eq => ord == Ordering::Equal,
        CmpOp::Ne => ord != Ordering::Equal,
        CmpOp::Lt => ord == Ordering::Less,
        CmpOp::Le => ord != Ordering::Greater,
        CmpOp::Gt => ord == Ordering::Greater,
        CmpOp::Ge => ord != Ordering::Less,
        _ => unreachable!("identity operators handled above"),
    })
}

fn as_real(v: &Value) -> f64 {
    match v {
        Value::Integer(i) => *i as f64,
        Value::Real(r) => *r,
        _ => f64::NAN,
    }
}

fn arith(op: ArithOp, l: &Value, r: &Value) -> Value {
    if matches!(l, Value::Error) || matches!(r, Value::Error) {
        return Value::Error;
    }
    if matches!(l, Value::Undefined) || matches!(r, Value::Undefined) {
        return Value::Undefined;
    }
    match (l, r) {
        (Value::Integer(a), Value::Integer(b)) => {
            let out = match op {
                ArithOp::Add => a.checked_add(*b),
                ArithOp::Sub => a.checked_sub(*b),
                ArithOp::Mul => a.checked_mul(*b),
                ArithOp::Div => a.checked_div(*b),
            };
            out.map_or(Value::Error, Value::Integer)
        }
        (Value::Integer(_) | Value::Real(_), Value::Integer(_) | Value::Real(_)) => {
            let (a, b) = (as_real(l), as_real(r));
            let out = match op {
                ArithOp::Add => a + b,
                ArithOp::Sub => a - b,
                ArithOp::Mul => a * b,
                ArithOp::Div if b == 0.0 => return Value::Error,
                ArithOp::Div => a / b,
            };
            Value::Real(out)
        }
        _ => Value::Error,
    }
}

fn call(name: &str, args: &[Expr], my: &AttributeSet, target: &AttributeSet, depth: usize) -> Value {
    match name.to_ascii_lowercase().as_str() {
        "ifthenelse" => {
            let [cond, then, otherwise] = args else {
                return Value::Error;
            };
            match eval(cond, my, target, depth) {
                Value::Boolean(true) => eval(then, my, target, depth),
                Value::Boolean(false) => eval(otherwise, my, target, depth),
                Value::Undefined => Value::Undefined,
                _ => Value::Error,
            }
        }
        "stringlistmember" => {
            let [item, list] = args else {
                return Value::Error;
            };
            let (item, list) = (eval(item, my, target, depth), eval(list, my, target, depth));
            match (&item, &list) {
                (Value::Error, _) | (_, Value::Error) => Value::Error,
                (Value::Undefined, _) | (_, Value::Undefined) => Value::Undefined,
                (Value::Str(s), Value::Str(l)) => Value::Boolean(l.split(',').any(|m| m.trim() == s)),
                _ => Value::Error,
            }
        }
        _ => Value::Error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classad::{parse, DESIRED_SITES_EXPR, P5_START_EXPR};

    fn ev(src: &str, my: &AttributeSet, target: &AttributeSet) -> Value {
        evaluate(&parse(src).unwrap(), my, target)
    }

    fn empty() -> AttributeSet {
        AttributeSet::new()
    }

    #[test]
    fn start_expr_rejects_agentless_job_on_p5() {
        let slot = empty().with("GLIDEIN_CMSSite", "T2_CH_CERN_P5");
        assert_eq!(ev(P5_START_EXPR, &slot, &empty()), Value::Boolean(false));
    }

    #[test]
    fn desired_sites_guard_returns_undefined() {
        let slot = empty().with("GLIDEIN_CMSSite", "T2_CH_CERN_P5");
        assert_eq!(ev(DESIRED_SITES_EXPR, &empty(), &slot), Value::Undefined);
    }

    #[test]
    fn undefined_propagates_through_equality() {
        assert_eq!(ev("x == x", &empty(), &empty()), Value::Undefined);
        assert_eq!(ev("x =?= x", &empty(), &empty()), Value::Boolean(true));
    }

    #[test]
    fn string_list_member_trims() {
        assert_eq!(ev("stringListMember('B', 'A, B ,C')", &empty(), &empty()), Value::Boolean(true));
        assert_eq!(ev("stringListMember('b', 'A, B ,C')", &empty(), &empty()), Value::Boolean(false));
        assert_eq!(ev("stringListMember('B', x)", &empty(), &empty()), Value::Undefined);
        assert_eq!(ev("stringListMember('B', 3)", &empty(), &empty()), Value::Error);
        assert_eq!(ev("stringListMember('B')", &empty(), &empty()), Value::Error);
    }

    #[test]
    fn three_valued_and_or() {
        let e = empty();
        assert_eq!(ev("false && x", &e, &e), Value::Boolean(false));
        assert_eq!(ev("x && false", &e, &e), Value::Boolean(false));
        assert_eq!(ev("true && x", &e, &e), Value::Undefined);
        assert_eq!(ev("true || x", &e, &e), Value::Boolean(true));
        assert_eq!(ev("false || x", &e, &e), Value::Undefined);
        assert_eq!(ev("false || error", &e, &e), Value::Error);
        assert_eq!(ev("false && error", &e, &e), Value::Error);
        assert_eq!(ev("true && 1", &e, &e), Value::Error);
        assert_eq!(ev("!x", &e, &e), Value::Undefined);
        assert_eq!(ev("!3", &e, &e), Value::Error);
    }

    #[test]
    fn comparisons() {
        let e = empty();
        assert_eq!(ev("1 < 1.5", &e, &e), Value::Boolean(true));
        assert_eq!(ev("2 == 2.0", &e, &e), Value::Boolean(true));
        assert_eq!(ev("2 =?= 2.0", &e, &e), Value::Boolean(false));
        assert_eq!(ev("'abc' == 'ABC'", &e, &e), Value::Boolean(true));
        assert_eq!(ev("'abc' =?= 'ABC'", &e, &e), Value::Boolean(false));
        assert_eq!(ev("'a' < 1", &e, &e), Value::Error);
        assert_eq!(ev("true < false", &e, &e), Value::Error);
        assert_eq!(ev("true != false", &e, &e), Value::Boolean(true));
        assert_eq!(ev("error == 1", &e, &e), Value::Error);
        assert_eq!(ev("error =!= error", &e, &e), Value::Boolean(false));
        assert_eq!(ev("error is error", &e, &e), Value::Boolean(true));
        assert_eq!(ev("undefined isnt 1", &e, &e), Value::Boolean(true));
    }

    #[test]
    fn arithmetic() {
        let e = empty();
        assert_eq!(ev("1 + 2 * 3", &e, &e), Value::Integer(7));
        assert_eq!(ev("7 / 2", &e, &e), Value::Integer(3));
        assert_eq!(ev("1 / 0", &e, &e), Value::Error);
        assert_eq!(ev("1.0 / 0", &e, &e), Value::Error);
        assert_eq!(ev("1 + 0.5", &e, &e), Value::Real(1.5));
        assert_eq!(ev("9223372036854775807 + 1", &e, &e), Value::Error);
        assert_eq!(ev("-x", &e, &e), Value::Undefined);
        assert_eq!(ev("1 + 'a'", &e, &e), Value::Error);
    }

    #[test]
    fn ifthenelse_branches() {
        let e = empty();
        assert_eq!(ev("ifthenelse(true, 1, 2)", &e, &e), Value::Integer(1));
        assert_eq!(ev("ifthenelse(false, 1, 2)", &e, &e), Value::Integer(2));
        assert_eq!(ev("ifthenelse(x, 1, 2)", &e, &e), Value::Undefined);
        assert_eq!(ev("ifthenelse(3, 1, 2)", &e, &e), Value::Error);
        assert_eq!(ev("IfThenElse(true, 1)", &e, &e), Value::Error);
        assert_eq!(ev("nosuchfn(1)", &e, &e), Value::Error);
    }

    #[test]
    fn resolution_order_and_scopes() {
        let my = empty().with("x", 1i64);
        let target = empty().with("x", 2i64).with("y", 3i64);
        assert_eq!(ev("x", &my, &target), Value::Integer(1));
        assert_eq!(ev("TARGET.x", &my, &target), Value::Integer(2));
        assert_eq!(ev("MY.y", &my, &target), Value::Undefined);
        assert_eq!(ev("y", &my, &target), Value::Integer(3));
    }

    #[test]
    fn attribute_evaluates_in_its_own_ad() {
        // y lives in the target ad and refers to x: resolved from the target first
        let mut target = empty().with("x", 10i64);
        target.insert("y", parse("x + 1").unwrap());
        let my = empty().with("x", 100i64);
        assert_eq!(ev("y", &my, &target), Value::Integer(11));
    }

    #[test]
    fn self_reference_is_error() {
        let mut ad = empty();
        ad.insert("loop", parse("loop").unwrap());
        assert_eq!(ev("loop", &ad, &empty()), Value::Error);
    }

    #[test]
    fn trivial_policy_matches() {
        let t = Expr::literal(true);
        assert!(matches(&t, &t, &empty(), &empty()));
        assert!(!matches(&t, &Expr::literal(Value::Undefined), &empty(), &empty()));
    }
}
