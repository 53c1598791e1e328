//! Random expression generator and the naive evaluator it is checked
//! against.

use std::fs;

use dfkit_core::engine::{Engine, EtlSource};
use dfkit_core::expr::Params;
use dfkit_core::fixture::{write_tar, TarEntry};
use dfkit_core::storage::Storage;
use dfkit_core::table::{Dataset, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Clone, Copy, PartialEq, Debug)]
enum Ty {
    Int,
    Float,
    Bool,
    Text,
}

#[derive(Debug)]
enum Node {
    Col(&'static str),
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
    Neg(Box<Node>),
    Not(Box<Node>),
    Bin(&'static str, Box<Node>, Box<Node>),
    Call(&'static str, Vec<Node>),
}

/// A generated expression with its static type.
struct Gen {
    node: Node,
    ty: Ty,
}

fn gen(rng: &mut ChaCha8Rng, want: Ty, depth: u32) -> Gen {
    let leaf = depth == 0 || rng.gen_bool(0.3);
    let node = match want {
        Ty::Int if leaf => {
            if rng.gen_bool(0.5) {
                Node::Col("a")
            } else {
                Node::Int(rng.gen_range(-20..=20))
            }
        }
        Ty::Int => match rng.gen_range(0..5) {
            0 => Node::Neg(Box::new(gen(rng, Ty::Int, depth - 1).node)),
            1 => {
                let op = ["+", "-", "*", "/"][rng.gen_range(0..4)];
                Node::Bin(op, bx(rng, Ty::Int, depth), bx(rng, Ty::Int, depth))
            }
            2 => Node::Call("abs", vec![gen(rng, Ty::Int, depth - 1).node]),
            3 => Node::Call(
                if rng.gen_bool(0.5) { "min" } else { "max" },
                (0..rng.gen_range(2..4)).map(|_| gen(rng, Ty::Int, depth - 1).node).collect(),
            ),
            _ => Node::Call("len", vec![gen(rng, Ty::Text, depth - 1).node]),
        },
        Ty::Float if leaf => {
            if rng.gen_bool(0.5) {
                Node::Col("b")
            } else {
                Node::Float(rng.gen_range(-40..=40) as f64 / 4.0)
            }
        }
        Ty::Float => match rng.gen_range(0..4) {
            0 => Node::Neg(Box::new(gen(rng, Ty::Float, depth - 1).node)),
            1 => {
                let op = ["+", "-", "*", "/"][rng.gen_range(0..4)];
                let (l, r) = mixed_numeric(rng, depth);
                Node::Bin(op, Box::new(l), Box::new(r))
            }
            2 => Node::Call("abs", vec![gen(rng, Ty::Float, depth - 1).node]),
            _ => {
                let (l, r) = mixed_numeric(rng, depth);
                Node::Call(if rng.gen_bool(0.5) { "min" } else { "max" }, vec![l, r])
            }
        },
        Ty::Bool if leaf => {
            if rng.gen_bool(0.6) {
                Node::Col("d")
            } else {
                Node::Bool(rng.gen_bool(0.5))
            }
        }
        Ty::Bool => match rng.gen_range(0..5) {
            0 => Node::Not(Box::new(gen(rng, Ty::Bool, depth - 1).node)),
            1 => Node::Bin(
                if rng.gen_bool(0.5) { "and" } else { "or" },
                bx(rng, Ty::Bool, depth),
                bx(rng, Ty::Bool, depth),
            ),
            2 => {
                let (l, r) = mixed_numeric(rng, depth);
                Node::Bin(cmp_op(rng), Box::new(l), Box::new(r))
            }
            3 => Node::Bin(cmp_op(rng), bx(rng, Ty::Text, depth), bx(rng, Ty::Text, depth)),
            _ => Node::Bin(
                if rng.gen_bool(0.5) { "==" } else { "!=" },
                bx(rng, Ty::Bool, depth),
                bx(rng, Ty::Bool, depth),
            ),
        },
        Ty::Text => {
            if rng.gen_bool(0.5) {
                Node::Col("c")
            } else {
                Node::Text(random_text(rng))
            }
        }
    };
    Gen { node, ty: want }
}

fn bx(rng: &mut ChaCha8Rng, ty: Ty, depth: u32) -> Box<Node> {
    Box::new(gen(rng, ty, depth - 1).node)
}

/// Two numeric operands of which at least one is float.
fn mixed_numeric(rng: &mut ChaCha8Rng, depth: u32) -> (Node, Node) {
    let other = if rng.gen_bool(0.5) { Ty::Int } else { Ty::Float };
    let f = gen(rng, Ty::Float, depth - 1).node;
    let o = gen(rng, other, depth - 1).node;
    if rng.gen_bool(0.5) {
        (f, o)
    } else {
        (o, f)
    }
}

fn cmp_op(rng: &mut ChaCha8Rng) -> &'static str {
    ["<", "<=", ">", ">=", "==", "!="][rng.gen_range(0..6)]
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(0..4)).map(|_| ['a', 'b', 'c', 'é'][rng.gen_range(0..4)]).collect()
}

fn render(n: &Node) -> String {
    match n {
        Node::Col(c) => c.to_string(),
        Node::Int(i) if *i < 0 => format!("(-{})", -i),
        Node::Int(i) => i.to_string(),
        Node::Float(x) if *x < 0.0 => format!("(-{:?})", -x),
        Node::Float(x) => format!("{x:?}"),
        Node::Bool(b) => b.to_string(),
        Node::Text(s) => format!("'{s}'"),
        Node::Neg(x) => format!("(-{})", render(x)),
        Node::Not(x) => format!("(not {})", render(x)),
        Node::Bin(op, l, r) => format!("({} {op} {})", render(l), render(r)),
        Node::Call(f, args) => format!("{f}({})", args.iter().map(render).collect::<Vec<_>>().join(", ")),
    }
}

/// Oracle values.
#[derive(Clone, Debug, PartialEq)]
enum V {
    Null,
    I(i64),
    F(f64),
    B(bool),
    T(String),
}

struct Row {
    a: V,
    b: V,
    c: V,
    d: V,
}

fn promote(v: &V) -> Option<f64> {
    match v {
        V::I(i) => Some(*i as f64),
        V::F(x) => Some(*x),
        _ => None,
    }
}

fn not_nan(x: f64) -> V {
    if x.is_nan() {
        V::Null
    } else {
        V::F(x)
    }
}

fn eval(n: &Node, row: &Row) -> V {
    match n {
        Node::Col("a") => row.a.clone(),
        Node::Col("b") => row.b.clone(),
        Node::Col("c") => row.c.clone(),
        Node::Col(_) => row.d.clone(),
        Node::Int(i) => V::I(*i),
        Node::Float(x) => V::F(*x),
        Node::Bool(b) => V::B(*b),
        Node::Text(s) => V::T(s.clone()),
        Node::Neg(x) => match eval(x, row) {
            V::I(i) => i.checked_neg().map_or(V::Null, V::I),
            V::F(x) => V::F(-x),
            _ => V::Null,
        },
        Node::Not(x) => match eval(x, row) {
            V::B(b) => V::B(!b),
            _ => V::Null,
        },
        Node::Bin(op, l, r) => {
            let (l, r) = (eval(l, row), eval(r, row));
            match *op {
                "and" => match (l, r) {
                    (V::B(false), _) | (_, V::B(false)) => V::B(false),
                    (V::B(true), V::B(true)) => V::B(true),
                    _ => V::Null,
                },
                "or" => match (l, r) {
                    (V::B(true), _) | (_, V::B(true)) => V::B(true),
                    (V::B(false), V::B(false)) => V::B(false),
                    _ => V::Null,
                },
                _ if l == V::Null || r == V::Null => V::Null,
                "+" | "-" | "*" | "/" => match (&l, &r) {
                    (V::I(a), V::I(b)) => match *op {
                        "+" => a.checked_add(*b),
                        "-" => a.checked_sub(*b),
                        "*" => a.checked_mul(*b),
                        _ => a.checked_div(*b),
                    }
                    .map_or(V::Null, V::I),
                    _ => {
                        let (a, b) = (promote(&l).unwrap(), promote(&r).unwrap());
                        match *op {
                            "+" => not_nan(a + b),
                            "-" => not_nan(a - b),
                            "*" => not_nan(a * b),
                            _ if b == 0.0 => V::Null,
                            _ => not_nan(a / b),
                        }
                    }
                },
                cmp => {
                    let ord = match (&l, &r) {
                        (V::I(a), V::I(b)) => a.partial_cmp(b),
                        (V::T(a), V::T(b)) => a.partial_cmp(b),
                        (V::B(a), V::B(b)) => a.partial_cmp(b),
                        _ => promote(&l).unwrap().partial_cmp(&promote(&r).unwrap()),
                    };
                    use std::cmp::Ordering::*;
                    V::B(match cmp {
                        "<" => ord == Some(Less),
                        "<=" => matches!(ord, Some(Less | Equal)),
                        ">" => ord == Some(Greater),
                        ">=" => matches!(ord, Some(Greater | Equal)),
                        "==" => ord == Some(Equal),
                        _ => ord != Some(Equal),
                    })
                }
            }
        }
        Node::Call(f, args) => {
            let vals: Vec<V> = args.iter().map(|a| eval(a, row)).collect();
            match *f {
                "len" => match &vals[0] {
                    V::T(s) => V::I(s.chars().count() as i64),
                    _ => V::Null,
                },
                "abs" => match &vals[0] {
                    V::I(i) => i.checked_abs().map_or(V::Null, V::I),
                    V::F(x) => V::F(x.abs()),
                    _ => V::Null,
                },
                _ => {
                    if vals.contains(&V::Null) {
                        return V::Null;
                    }
                    let any_float = vals.iter().any(|v| matches!(v, V::F(_)));
                    let want_min = *f == "min";
                    if any_float {
                        let mut best = promote(&vals[0]).unwrap();
                        for v in &vals[1..] {
                            let x = promote(v).unwrap();
                            if (want_min && x < best) || (!want_min && x > best) {
                                best = x;
                            }
                        }
                        V::F(best)
                    } else {
                        let ints = vals.iter().map(|v| match v {
                            V::I(i) => *i,
                            _ => unreachable!(),
                        });
                        V::I(if want_min { ints.min().unwrap() } else { ints.max().unwrap() })
                    }
                }
            }
        }
    }
}

fn to_v(v: &Value) -> V {
    match v {
        Value::Null => V::Null,
        Value::Int(i) => V::I(*i),
        Value::Float(x) => V::F(*x),
        Value::Bool(b) => V::B(*b),
        Value::Text(s) => V::T(s.clone()),
        other => panic!("unexpected {other:?}"),
    }
}

fn close(engine: &V, oracle: &V) -> bool {
    match (engine, oracle) {
        (V::F(a), V::F(b)) => a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs()),
        _ => engine == oracle,
    }
}

fn random_rows(dir: &std::path::Path, rng: &mut ChaCha8Rng, n: usize) -> Dataset {
    let entries: Vec<TarEntry> = (0..n).map(|i| TarEntry::file(&format!("r{i:04}.bin"), vec![1])).collect();
    let archive = dir.join("rows.tar");
    fs::write(&archive, write_tar(&entries)).unwrap();
    let mut lines = String::new();
    for i in 0..n {
        let maybe = |rng: &mut ChaCha8Rng, v: serde_json::Value| if rng.gen_bool(0.1) { json!(null) } else { v };
        let a = json!(rng.gen_range(-1000i64..1000));
        let b = json!(rng.gen_range(-4000i64..4000) as f64 / 8.0 + 0.0625);
        let c = json!(random_text(rng));
        let d = json!(rng.gen_bool(0.5));
        let row = json!({
            "key": format!("r{i:04}"),
            "a": maybe(rng, a),
            "b": maybe(rng, b),
            "c": maybe(rng, c),
            "d": maybe(rng, d),
        });
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    let sidecar = dir.join("rows.jsonl");
    fs::write(&sidecar, lines).unwrap();
    Engine::direct(Storage::default())
        .etl_build(
            &[EtlSource::new(archive.to_string_lossy(), Some(sidecar.to_string_lossy().into_owned()))],
            false,
        )
        .unwrap()
}

/// Runs `exprs` random filters and as many mutations over `rows` random
/// rows, panicking on the first disagreement. Returns the total number of
/// rows kept by the filters.
pub fn check_random_expressions(dir: &std::path::Path, seed: u64, rows: usize, exprs: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = random_rows(dir, &mut rng, rows);
    let col = |name: &str| -> Vec<V> { ds.column(name).unwrap().values().iter().map(to_v).collect() };
    let (a, b, c, d) = (col("a"), col("b"), col("c"), col("d"));
    let uids = ds.column("_uid").unwrap().values();
    let table: Vec<Row> = (0..ds.row_count())
        .map(|i| Row {
            a: a[i].clone(),
            b: b[i].clone(),
            c: c[i].clone(),
            d: d[i].clone(),
        })
        .collect();
    let engine = Engine::direct(Storage::default());

    let mut kept_total = 0;
    for n in 0..exprs {
        // Filters.
        let g = gen(&mut rng, Ty::Bool, 4);
        let src = render(&g.node);
        let out = engine.filter(&ds, &src, &Params::new()).unwrap_or_else(|e| panic!("{src}: {e}"));
        let expected: Vec<Value> = table
            .iter()
            .zip(&uids)
            .filter(|(r, _)| eval(&g.node, r) == V::B(true))
            .map(|(_, u)| u.clone())
            .collect();
        assert_eq!(out.column("_uid").unwrap().values(), expected, "filter {src}");
        kept_total += expected.len();

        // Mutations of every type.
        let ty = [Ty::Int, Ty::Float, Ty::Bool, Ty::Text][n % 4];
        let g = gen(&mut rng, ty, 4);
        assert_eq!(g.ty, ty);
        let src = render(&g.node);
        let out = engine.mutate(&ds, "out", &src, &Params::new()).unwrap_or_else(|e| panic!("{src}: {e}"));
        for (i, got) in out.column("out").unwrap().values().iter().enumerate() {
            let want = eval(&g.node, &table[i]);
            assert!(close(&to_v(got), &want), "mutate {src} row {i}: engine {got:?}, oracle {want:?}");
        }
    }
    assert!(kept_total > 0, "generated filters never kept a row");
    kept_total
}
