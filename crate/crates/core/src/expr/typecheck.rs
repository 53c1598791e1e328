use std::collections::BTreeMap;

use super::{BinaryOp, Expr, Literal, UnaryOp};
use crate::error::{Error, Result};
use crate::table::{ColumnType, Schema, Value};

/// Parameter bindings by name (without the `@`).
pub type Params = BTreeMap<String, Value>;

/// Expression with every node's type resolved, columns bound to schema
/// indices and parameters substituted.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedExpr {
    pub ty: ColumnType,
    pub kind: TypedKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TypedKind {
    Const(Value),
    Column { index: usize, name: String },
    ToFloat(Box<TypedExpr>),
    Neg(Box<TypedExpr>),
    Not(Box<TypedExpr>),
    Arith(BinaryOp, Box<TypedExpr>, Box<TypedExpr>),
    Cmp(BinaryOp, Box<TypedExpr>, Box<TypedExpr>),
    And(Box<TypedExpr>, Box<TypedExpr>),
    Or(Box<TypedExpr>, Box<TypedExpr>),
    CosDist(Box<TypedExpr>, Box<TypedExpr>),
    Len(Box<TypedExpr>),
    Abs(Box<TypedExpr>),
    Min(Vec<TypedExpr>),
    Max(Vec<TypedExpr>),
}

fn typed(ty: ColumnType, kind: TypedKind) -> TypedExpr {
    TypedExpr { ty, kind }
}

fn mismatch(context: &str, left: impl ToString, right: impl ToString) -> Error {
    Error::TypeMismatch {
        context: context.to_string(),
        left: left.to_string(),
        right: right.to_string(),
    }
}

fn to_float(e: TypedExpr) -> TypedExpr {
    if e.ty == ColumnType::Int64 {
        typed(ColumnType::Float64, TypedKind::ToFloat(Box::new(e)))
    } else {
        e
    }
}

/// Brings two numeric operands to a common type.
fn unify_numeric(l: TypedExpr, r: TypedExpr) -> (TypedExpr, TypedExpr) {
    if l.ty == r.ty {
        (l, r)
    } else {
        (to_float(l), to_float(r))
    }
}

pub fn typecheck(expr: &Expr, schema: &Schema, params: &Params) -> Result<TypedExpr> {
    match expr {
        Expr::Literal(lit) => Ok(match lit {
            Literal::Int(i) => typed(ColumnType::Int64, TypedKind::Const(Value::Int(*i))),
            Literal::Float(x) => typed(ColumnType::Float64, TypedKind::Const(Value::Float(*x))),
            Literal::Bool(b) => typed(ColumnType::Bool, TypedKind::Const(Value::Bool(*b))),
            Literal::Text(s) => typed(ColumnType::Utf8, TypedKind::Const(Value::Text(s.clone()))),
            Literal::Vector(v) => typed(
                ColumnType::FVec(v.len() as u32),
                TypedKind::Const(Value::FVec(v.iter().map(|x| *x as f32).collect())),
            ),
        }),
        Expr::Column(name) => {
            let index = schema
                .index_of(name)
                .ok_or_else(|| Error::UnknownColumn(name.clone()))?;
            Ok(typed(
                schema.fields()[index].ty,
                TypedKind::Column {
                    index,
                    name: name.clone(),
                },
            ))
        }
        Expr::Param(name) => {
            let v = params
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let ty = v.column_type().ok_or_else(|| Error::BadParam {
                name: name.clone(),
                reason: "null parameters are not allowed".into(),
            })?;
            Ok(typed(ty, TypedKind::Const(v.clone())))
        }
        Expr::Unary(op, inner) => {
            let e = typecheck(inner, schema, params)?;
            match op {
                UnaryOp::Neg if e.ty.is_numeric() => Ok(typed(e.ty, TypedKind::Neg(Box::new(e)))),
                UnaryOp::Neg => Err(mismatch("unary '-'", e.ty, "numeric")),
                UnaryOp::Not if e.ty == ColumnType::Bool => {
                    Ok(typed(ColumnType::Bool, TypedKind::Not(Box::new(e))))
                }
                UnaryOp::Not => Err(mismatch("'not'", e.ty, "bool")),
            }
        }
        Expr::Binary(op, l, r) => {
            let l = typecheck(l, schema, params)?;
            let r = typecheck(r, schema, params)?;
            binary(*op, l, r)
        }
        Expr::Call(name, args) => {
            let args: Vec<TypedExpr> = args
                .iter()
                .map(|a| typecheck(a, schema, params))
                .collect::<Result<_>>()?;
            call(name, args)
        }
    }
}

fn binary(op: BinaryOp, l: TypedExpr, r: TypedExpr) -> Result<TypedExpr> {
    let ctx = format!("'{}'", op.symbol());
    if op.is_arithmetic() {
        if !(l.ty.is_numeric() && r.ty.is_numeric()) {
            return Err(mismatch(&ctx, l.ty, r.ty));
        }
        let (l, r) = unify_numeric(l, r);
        return Ok(typed(l.ty, TypedKind::Arith(op, Box::new(l), Box::new(r))));
    }
    match op {
        BinaryOp::And | BinaryOp::Or => {
            if l.ty != ColumnType::Bool || r.ty != ColumnType::Bool {
                return Err(mismatch(&ctx, l.ty, r.ty));
            }
            let kind = if op == BinaryOp::And {
                TypedKind::And(Box::new(l), Box::new(r))
            } else {
                TypedKind::Or(Box::new(l), Box::new(r))
            };
            Ok(typed(ColumnType::Bool, kind))
        }
        _ => {
            let (l, r) = if l.ty.is_numeric() && r.ty.is_numeric() {
                unify_numeric(l, r)
            } else {
                (l, r)
            };
            let equality = matches!(op, BinaryOp::Eq | BinaryOp::Ne);
            match (l.ty, r.ty) {
                (ColumnType::FVec(a), ColumnType::FVec(b)) if equality && a != b => {
                    return Err(Error::DimMismatch {
                        context: ctx,
                        left: a,
                        right: b,
                    })
                }
                (a, b) if a != b => return Err(mismatch(&ctx, a, b)),
                (ColumnType::Int64 | ColumnType::Float64 | ColumnType::Utf8, _) => {}
                (_, _) if equality => {}
                (a, b) => return Err(mismatch(&ctx, a, b)),
            }
            Ok(typed(ColumnType::Bool, TypedKind::Cmp(op, Box::new(l), Box::new(r))))
        }
    }
}

fn arity(name: &str, args: &[TypedExpr], ok: bool, wanted: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(mismatch(
            &format!("{name}() arity"),
            format!("{} arguments", args.len()),
            wanted,
        ))
    }
}

fn call(name: &str, mut args: Vec<TypedExpr>) -> Result<TypedExpr> {
    match name {
        "cos_dist" => {
            arity(name, &args, args.len() == 2, "2 arguments")?;
            let b = args.pop().expect("two args");
            let a = args.pop().expect("two args");
            match (a.ty, b.ty) {
                (ColumnType::FVec(da), ColumnType::FVec(db)) if da != db => Err(Error::DimMismatch {
                    context: "cos_dist()".into(),
                    left: da,
                    right: db,
                }),
                (ColumnType::FVec(_), ColumnType::FVec(_)) => Ok(typed(
                    ColumnType::Float64,
                    TypedKind::CosDist(Box::new(a), Box::new(b)),
                )),
                (x, y) => Err(mismatch("cos_dist()", x, y)),
            }
        }
        "len" => {
            arity(name, &args, args.len() == 1, "1 argument")?;
            let a = args.pop().expect("one arg");
            match a.ty {
                ColumnType::Utf8 | ColumnType::Bytes => {
                    Ok(typed(ColumnType::Int64, TypedKind::Len(Box::new(a))))
                }
                other => Err(mismatch("len()", other, "utf8 or bytes")),
            }
        }
        "abs" => {
            arity(name, &args, args.len() == 1, "1 argument")?;
            let a = args.pop().expect("one arg");
            if !a.ty.is_numeric() {
                return Err(mismatch("abs()", a.ty, "numeric"));
            }
            Ok(typed(a.ty, TypedKind::Abs(Box::new(a))))
        }
        "min" | "max" => {
            arity(name, &args, args.len() >= 2, "at least 2 arguments")?;
            if let Some(bad) = args.iter().find(|a| !a.ty.is_numeric()) {
                return Err(mismatch(&format!("{name}()"), bad.ty, "numeric"));
            }
            let any_float = args.iter().any(|a| a.ty == ColumnType::Float64);
            let args: Vec<TypedExpr> = if any_float {
                args.into_iter().map(to_float).collect()
            } else {
                args
            };
            let ty = args[0].ty;
            Ok(typed(
                ty,
                if name == "min" {
                    TypedKind::Min(args)
                } else {
                    TypedKind::Max(args)
                },
            ))
        }
        other => Err(Error::UnknownFunction(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::table::Field;

    fn schema() -> Schema {
        Schema::with_attributes(vec![
            Field::new("size", ColumnType::Int64, true),
            Field::new("score", ColumnType::Float64, true),
            Field::new("caption", ColumnType::Utf8, true),
            Field::new("embed", ColumnType::FVec(64), true),
            Field::new("ok", ColumnType::Bool, true),
        ])
        .unwrap()
    }

    fn check(src: &str, params: &Params) -> Result<TypedExpr> {
        typecheck(&parse(src).unwrap(), &schema(), params)
    }

    #[test]
    fn comparison_types_to_bool() {
        assert_eq!(check("size > 1000", &Params::new()).unwrap().ty, ColumnType::Bool);
        assert_eq!(check("size + score", &Params::new()).unwrap().ty, ColumnType::Float64);
        assert_eq!(check("size * 2", &Params::new()).unwrap().ty, ColumnType::Int64);
        assert_eq!(check("caption < 'm'", &Params::new()).unwrap().ty, ColumnType::Bool);
        assert_eq!(check("max(size, 2.5)", &Params::new()).unwrap().ty, ColumnType::Float64);
        assert_eq!(check("len(caption)", &Params::new()).unwrap().ty, ColumnType::Int64);
    }

    #[test]
    fn ill_typed_expressions() {
        assert!(matches!(check("caption > 5", &Params::new()), Err(Error::TypeMismatch { .. })));
        assert!(matches!(check("ok < true", &Params::new()), Err(Error::TypeMismatch { .. })));
        assert!(matches!(check("size and ok", &Params::new()), Err(Error::TypeMismatch { .. })));
        assert!(matches!(check("not size", &Params::new()), Err(Error::TypeMismatch { .. })));
        assert!(matches!(check("missing > 1", &Params::new()), Err(Error::UnknownColumn(_))));
        assert!(matches!(check("@nope > 1", &Params::new()), Err(Error::UnknownParam(_))));
        assert!(matches!(check("frob(size)", &Params::new()), Err(Error::UnknownFunction(_))));
        assert!(matches!(check("abs(size, size)", &Params::new()), Err(Error::TypeMismatch { .. })));
    }

    #[test]
    fn vector_dimensions_must_agree() {
        let mut p = Params::new();
        p.insert("t".into(), Value::FVec(vec![0.0; 32]));
        assert!(matches!(
            check("cos_dist(embed, @t)", &p),
            Err(Error::DimMismatch { left: 64, right: 32, .. })
        ));
        p.insert("t".into(), Value::FVec(vec![0.0; 64]));
        assert_eq!(check("cos_dist(embed, @t)", &p).unwrap().ty, ColumnType::Float64);
        assert!(matches!(check("embed == [1, 2]", &p), Err(Error::DimMismatch { .. })));
    }
}
