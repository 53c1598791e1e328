use std::cmp::Ordering;
use std::collections::HashMap;

use super::{BinaryOp, TypedExpr, TypedKind};
use crate::table::{ColumnVector, Value};

/// Source of cell values for one row.
pub trait RowAccess {
    fn column(&self, index: usize, name: &str) -> Value;
}

impl RowAccess for [Value] {
    fn column(&self, index: usize, _name: &str) -> Value {
        self[index].clone()
    }
}

impl RowAccess for Vec<Value> {
    fn column(&self, index: usize, _name: &str) -> Value {
        self[index].clone()
    }
}

impl RowAccess for HashMap<String, Value> {
    fn column(&self, _index: usize, name: &str) -> Value {
        self.get(name).cloned().unwrap_or(Value::Null)
    }
}

/// Row `row` of a set of columns laid out in schema order.
pub struct TableRow<'a> {
    pub columns: &'a [ColumnVector],
    pub row: usize,
}

impl RowAccess for TableRow<'_> {
    fn column(&self, index: usize, _name: &str) -> Value {
        self.columns[index].value(self.row)
    }
}

fn float(x: f64) -> Value {
    if x.is_nan() {
        Value::Null
    } else {
        Value::Float(x)
    }
}

/// Evaluates with strict null propagation. `and`/`or` follow three-valued
/// logic; division by zero, overflow and NaN results yield null.
pub fn eval<R: RowAccess + ?Sized>(e: &TypedExpr, row: &R) -> Value {
    match &e.kind {
        TypedKind::Const(v) => v.clone(),
        TypedKind::Column { index, name } => row.column(*index, name),
        TypedKind::ToFloat(inner) => match eval(inner, row) {
            Value::Int(i) => Value::Float(i as f64),
            other => other,
        },
        TypedKind::Neg(inner) => match eval(inner, row) {
            Value::Int(i) => i.checked_neg().map_or(Value::Null, Value::Int),
            Value::Float(x) => Value::Float(-x),
            _ => Value::Null,
        },
        TypedKind::Not(inner) => match eval(inner, row) {
            Value::Bool(b) => Value::Bool(!b),
            _ => Value::Null,
        },
        TypedKind::Arith(op, l, r) => arith(*op, eval(l, row), eval(r, row)),
        TypedKind::Cmp(op, l, r) => compare(*op, &eval(l, row), &eval(r, row)),
        TypedKind::And(l, r) => match (eval(l, row), eval(r, row)) {
            (Value::Bool(false), _) | (_, Value::Bool(false)) => Value::Bool(false),
            (Value::Bool(true), Value::Bool(true)) => Value::Bool(true),
            _ => Value::Null,
        },
        TypedKind::Or(l, r) => match (eval(l, row), eval(r, row)) {
            (Value::Bool(true), _) | (_, Value::Bool(true)) => Value::Bool(true),
            (Value::Bool(false), Value::Bool(false)) => Value::Bool(false),
            _ => Value::Null,
        },
        TypedKind::CosDist(a, b) => match (eval(a, row), eval(b, row)) {
            (Value::FVec(a), Value::FVec(b)) => cos_dist(&a, &b).map_or(Value::Null, Value::Float),
            _ => Value::Null,
        },
        TypedKind::Len(inner) => match eval(inner, row) {
            Value::Text(s) => Value::Int(s.chars().count() as i64),
            Value::Bytes(b) => Value::Int(b.len() as i64),
            _ => Value::Null,
        },
        TypedKind::Abs(inner) => match eval(inner, row) {
            Value::Int(i) => i.checked_abs().map_or(Value::Null, Value::Int),
            Value::Float(x) => Value::Float(x.abs()),
            _ => Value::Null,
        },
        TypedKind::Min(args) | TypedKind::Max(args) => {
            let want_min = matches!(e.kind, TypedKind::Min(_));
            let mut best: Option<Value> = None;
            for a in args {
                let v = eval(a, row);
                if v.is_null() {
                    return Value::Null;
                }
                best = Some(match best {
                    None => v,
                    Some(b) => {
                        let ord = numeric_cmp(&v, &b);
                        let take = if want_min {
                            ord == Some(Ordering::Less)
                        } else {
                            ord == Some(Ordering::Greater)
                        };
                        if take {
                            v
                        } else {
                            b
                        }
                    }
                });
            }
            best.unwrap_or(Value::Null)
        }
    }
}

fn numeric_cmp(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Some(x.cmp(y)),
        (Value::Float(x), Value::Float(y)) => x.partial_cmp(y),
        _ => None,
    }
}

fn arith(op: BinaryOp, l: Value, r: Value) -> Value {
    match (l, r) {
        (Value::Int(a), Value::Int(b)) => match op {
            BinaryOp::Add => a.checked_add(b),
            BinaryOp::Sub => a.checked_sub(b),
            BinaryOp::Mul => a.checked_mul(b),
            BinaryOp::Div => a.checked_div(b),
            _ => None,
        }
        .map_or(Value::Null, Value::Int),
        (Value::Float(a), Value::Float(b)) => match op {
            BinaryOp::Add => float(a + b),
            BinaryOp::Sub => float(a - b),
            BinaryOp::Mul => float(a * b),
            BinaryOp::Div if b == 0.0 => Value::Null,
            BinaryOp::Div => float(a / b),
            _ => Value::Null,
        },
        _ => Value::Null,
    }
}

fn compare(op: BinaryOp, l: &Value, r: &Value) -> Value {
    let ord = match (l, r) {
        (Value::Null, _) | (_, Value::Null) => return Value::Null,
        (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
        (Value::Float(a), Value::Float(b)) => a.partial_cmp(b),
        (Value::Text(a), Value::Text(b)) => Some(a.cmp(b)),
        (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
        (Value::Bytes(a), Value::Bytes(b)) => Some(a.cmp(b)),
        (Value::FVec(a), Value::FVec(b)) => {
            let equal = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y);
            if equal {
                Some(Ordering::Equal)
            } else {
                None
            }
        }
        _ => return Value::Null,
    };
    Value::Bool(match op {
        BinaryOp::Lt => ord == Some(Ordering::Less),
        BinaryOp::Le => matches!(ord, Some(Ordering::Less | Ordering::Equal)),
        BinaryOp::Gt => ord == Some(Ordering::Greater),
        BinaryOp::Ge => matches!(ord, Some(Ordering::Greater | Ordering::Equal)),
        BinaryOp::Eq => ord == Some(Ordering::Equal),
        BinaryOp::Ne => ord != Some(Ordering::Equal),
        _ => return Value::Null,
    })
}

/// `1 - dot(a, b) / (|a| |b|)` computed in binary64, clamped to `[0, 2]`.
/// `None` when either norm is zero or the inputs are not finite.
pub fn cos_dist(a: &[f32], b: &[f32]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let d = 1.0 - dot / (na.sqrt() * nb.sqrt());
    if d.is_nan() {
        None
    } else {
        Some(d.clamp(0.0, 2.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse, typecheck, Params};
    use crate::table::{ColumnType, Field, Schema};

    fn schema() -> Schema {
        Schema::with_attributes(vec![
            Field::new("a", ColumnType::Int64, true),
            Field::new("b", ColumnType::Bool, true),
            Field::new("v", ColumnType::FVec(2), true),
        ])
        .unwrap()
    }

    fn run(src: &str, a: Value, b: Value) -> Value {
        let s = schema();
        let t = typecheck(&parse(src).unwrap(), &s, &Params::new()).unwrap();
        let mut row = vec![Value::Null; 5];
        row.extend([a, b, Value::FVec(vec![1.0, 0.0])]);
        eval(&t, &row)
    }

    #[test]
    fn cosine_distance_reference_points() {
        assert!(cos_dist(&[0.3, -1.2, 5.0], &[0.3, -1.2, 5.0]).unwrap().abs() < 1e-6);
        assert_eq!(cos_dist(&[1.0, 0.0], &[0.0, 1.0]), Some(1.0));
        assert_eq!(cos_dist(&[1.0, 0.0], &[-1.0, 0.0]), Some(2.0));
        assert_eq!(cos_dist(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn null_propagation_and_three_valued_logic() {
        assert_eq!(run("a > 1", Value::Null, Value::Null), Value::Null);
        assert_eq!(run("a + 1", Value::Null, Value::Null), Value::Null);
        assert_eq!(run("b and false", Value::Null, Value::Null), Value::Bool(false));
        assert_eq!(run("b or true", Value::Null, Value::Null), Value::Bool(true));
        assert_eq!(run("b and true", Value::Null, Value::Null), Value::Null);
        assert_eq!(run("b or false", Value::Null, Value::Null), Value::Null);
        assert_eq!(run("not b", Value::Null, Value::Null), Value::Null);
    }

    #[test]
    fn runtime_failures_become_null() {
        assert_eq!(run("a / 0", Value::Int(5), Value::Null), Value::Null);
        assert_eq!(run("a / 0.0", Value::Int(5), Value::Null), Value::Null);
        assert_eq!(run("a * a", Value::Int(i64::MAX), Value::Null), Value::Null);
        assert_eq!(run("a / 2", Value::Int(7), Value::Null), Value::Int(3));
        assert_eq!(run("a + 0.5", Value::Int(1), Value::Null), Value::Float(1.5));
        assert_eq!(run("cos_dist(v, [0, 0])", Value::Null, Value::Null), Value::Null);
    }

    #[test]
    fn builtins() {
        assert_eq!(run("min(a, 3, 2)", Value::Int(7), Value::Null), Value::Int(2));
        assert_eq!(run("max(a, 2.5)", Value::Int(1), Value::Null), Value::Float(2.5));
        assert_eq!(run("abs(-a)", Value::Int(4), Value::Null), Value::Int(4));
        assert_eq!(run("len('héllo')", Value::Null, Value::Null), Value::Int(5));
        assert_eq!(run("v == [1, 0]", Value::Null, Value::Null), Value::Bool(true));
        assert_eq!(run("cos_dist(v, [0, 1])", Value::Null, Value::Null), Value::Float(1.0));
    }

    #[test]
    fn map_rows() {
        let s = schema();
        let t = typecheck(&parse("a >= 2").unwrap(), &s, &Params::new()).unwrap();
        let mut row = HashMap::new();
        row.insert("a".to_string(), Value::Int(2));
        assert_eq!(eval(&t, &row), Value::Bool(true));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cos_dist_symmetric_and_bounded(
                a in proptest::collection::vec(-100.0f32..100.0, 8),
                b in proptest::collection::vec(-100.0f32..100.0, 8),
            ) {
                let (x, y) = (cos_dist(&a, &b), cos_dist(&b, &a));
                prop_assert_eq!(x.is_some(), y.is_some());
                if let (Some(x), Some(y)) = (x, y) {
                    prop_assert!((x - y).abs() <= 1e-9);
                    prop_assert!((0.0..=2.0).contains(&x));
                }
            }

            #[test]
            fn ranking_is_scale_invariant(
                rows in proptest::collection::vec(proptest::collection::vec(-10.0f32..10.0, 4), 2..20),
                t in proptest::collection::vec(0.5f32..10.0, 4),
                c in prop_oneof![Just(2.0f32), Just(0.5f32), Just(4.0f32), Just(8.0f32)],
            ) {
                let scaled: Vec<f32> = t.iter().map(|x| x * c).collect();
                let rank = |target: &[f32]| {
                    let mut idx: Vec<usize> = (0..rows.len()).collect();
                    let d: Vec<f64> = rows.iter().map(|r| cos_dist(r, target).unwrap_or(f64::INFINITY)).collect();
                    idx.sort_by(|&i, &j| d[i].total_cmp(&d[j]).then(i.cmp(&j)));
                    idx
                };
                prop_assert_eq!(rank(&t), rank(&scaled));
            }
        }
    }
}
