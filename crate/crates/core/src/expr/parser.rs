use super::lexer::{lex, Tok};
use super::{BinaryOp, Expr, Literal, UnaryOp};
use crate::error::{Error, Result};

const KEYWORDS: [&str; 5] = ["and", "or", "not", "true", "false"];

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

pub fn parse(src: &str) -> Result<Expr> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
    };
    let e = p.or_expr()?;
    match p.peek() {
        Tok::Eof => Ok(e),
        _ => Err(p.error("operator or end of input")),
    }
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> Error {
        Error::Syntax {
            offset: self.offset(),
            expected: expected.to_string(),
            found: self.peek().describe(),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<()> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(expected))
        }
    }

    fn or_expr(&mut self) -> Result<Expr> {
        let mut left = self.and_expr()?;
        while self.is_keyword("or") {
            self.bump();
            let right = self.and_expr()?;
            left = Expr::binary(BinaryOp::Or, left, right);
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr> {
        let mut left = self.not_expr()?;
        while self.is_keyword("and") {
            self.bump();
            let right = self.not_expr()?;
            left = Expr::binary(BinaryOp::And, left, right);
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr> {
        if self.is_keyword("not") {
            self.bump();
            let inner = self.not_expr()?;
            return Ok(Expr::Unary(UnaryOp::Not, Box::new(inner)));
        }
        self.cmp_expr()
    }

    fn cmp_op(&self) -> Option<BinaryOp> {
        Some(match self.peek() {
            Tok::Lt => BinaryOp::Lt,
            Tok::Le => BinaryOp::Le,
            Tok::Gt => BinaryOp::Gt,
            Tok::Ge => BinaryOp::Ge,
            Tok::EqEq => BinaryOp::Eq,
            Tok::Ne => BinaryOp::Ne,
            _ => return None,
        })
    }

    fn cmp_expr(&mut self) -> Result<Expr> {
        let left = self.add_expr()?;
        let Some(op) = self.cmp_op() else {
            return Ok(left);
        };
        self.bump();
        let right = self.add_expr()?;
        if self.cmp_op().is_some() {
            return Err(self.error("'and', 'or' or ')' (comparisons do not chain)"));
        }
        Ok(Expr::binary(op, left, right))
    }

    fn add_expr(&mut self) -> Result<Expr> {
        let mut left = self.mul_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => return Ok(left),
            };
            self.bump();
            let right = self.mul_expr()?;
            left = Expr::binary(op, left, right);
        }
    }

    fn mul_expr(&mut self) -> Result<Expr> {
        let mut left = self.unary_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => return Ok(left),
            };
            self.bump();
            let right = self.unary_expr()?;
            left = Expr::binary(op, left, right);
        }
    }

    fn unary_expr(&mut self) -> Result<Expr> {
        if *self.peek() == Tok::Minus {
            self.bump();
            let inner = self.unary_expr()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        const EXPECTED: &str = "number, string, identifier, @parameter, '(' or '['";
        match self.peek().clone() {
            Tok::Int(i) => {
                self.bump();
                Ok(Expr::Literal(Literal::Int(i)))
            }
            Tok::Float(x) => {
                self.bump();
                Ok(Expr::Literal(Literal::Float(x)))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Expr::Literal(Literal::Text(s)))
            }
            Tok::Param(p) => {
                self.bump();
                Ok(Expr::Param(p))
            }
            Tok::LParen => {
                self.bump();
                let e = self.or_expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::LBracket => self.vector(),
            Tok::Ident(name) => match name.as_str() {
                "true" => {
                    self.bump();
                    Ok(Expr::Literal(Literal::Bool(true)))
                }
                "false" => {
                    self.bump();
                    Ok(Expr::Literal(Literal::Bool(false)))
                }
                kw if KEYWORDS.contains(&kw) => Err(self.error(EXPECTED)),
                _ => {
                    self.bump();
                    if *self.peek() == Tok::LParen {
                        self.bump();
                        let mut args = Vec::new();
                        if *self.peek() != Tok::RParen {
                            loop {
                                args.push(self.or_expr()?);
                                if *self.peek() == Tok::Comma {
                                    self.bump();
                                } else {
                                    break;
                                }
                            }
                        }
                        self.expect(Tok::RParen, "',' or ')'")?;
                        Ok(Expr::Call(name, args))
                    } else {
                        Ok(Expr::Column(name))
                    }
                }
            },
            _ => Err(self.error(EXPECTED)),
        }
    }

    fn vector(&mut self) -> Result<Expr> {
        self.bump();
        let mut items = Vec::new();
        loop {
            let negative = if *self.peek() == Tok::Minus {
                self.bump();
                true
            } else {
                false
            };
            let x = match self.peek() {
                Tok::Int(i) => *i as f64,
                Tok::Float(x) => *x,
                _ => return Err(self.error("number")),
            };
            self.bump();
            items.push(if negative { -x } else { x });
            match self.peek() {
                Tok::Comma => {
                    self.bump();
                }
                Tok::RBracket => {
                    self.bump();
                    return Ok(Expr::Literal(Literal::Vector(items)));
                }
                _ => return Err(self.error("',' or ']'")),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_from_workflow() {
        assert_eq!(
            parse("size > 1000").unwrap(),
            Expr::binary(BinaryOp::Gt, Expr::col("size"), Expr::int(1000))
        );
    }

    #[test]
    fn precedence() {
        assert_eq!(
            parse("a + b * c").unwrap(),
            Expr::binary(
                BinaryOp::Add,
                Expr::col("a"),
                Expr::binary(BinaryOp::Mul, Expr::col("b"), Expr::col("c"))
            )
        );
        assert_eq!(
            parse("not a > 1 and b or c").unwrap().to_string(),
            "(((not (a > 1)) and b) or c)"
        );
        assert_eq!(parse("--x - -1").unwrap().to_string(), "((-(-x)) - (-1))");
        assert_eq!(parse("a - b - c").unwrap().to_string(), "((a - b) - c)");
    }

    #[test]
    fn calls_and_params() {
        assert_eq!(
            parse("cos_dist(embed, @target)").unwrap(),
            Expr::Call(
                "cos_dist".into(),
                vec![Expr::col("embed"), Expr::Param("target".into())]
            )
        );
        assert_eq!(parse("f()").unwrap(), Expr::Call("f".into(), vec![]));
    }

    #[test]
    fn literals() {
        assert_eq!(parse("1.5e3").unwrap(), Expr::Literal(Literal::Float(1500.0)));
        assert_eq!(parse("'it\\'s'").unwrap(), Expr::Literal(Literal::Text("it's".into())));
        assert_eq!(parse("\"a\\nb\"").unwrap(), Expr::Literal(Literal::Text("a\nb".into())));
        assert_eq!(parse("[1, -2.5]").unwrap(), Expr::Literal(Literal::Vector(vec![1.0, -2.5])));
        assert_eq!(parse("false").unwrap(), Expr::Literal(Literal::Bool(false)));
    }

    fn syntax_offset(src: &str) -> usize {
        match parse(src) {
            Err(Error::Syntax { offset, .. }) => offset,
            other => panic!("expected syntax error for {src:?}, got {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        assert_eq!(syntax_offset("size >"), 6);
        assert_eq!(syntax_offset("a < b < c"), 6);
        assert_eq!(syntax_offset("(a + 1"), 6);
        assert_eq!(syntax_offset("a = 1"), 2);
        assert_eq!(syntax_offset("'open"), 5);
        assert_eq!(syntax_offset("1 2"), 2);
        assert_eq!(syntax_offset("99999999999999999999"), 0);
        assert_eq!(syntax_offset("a and"), 5);
        assert_eq!(syntax_offset("12abc"), 2);
        assert_eq!(syntax_offset("@"), 1);
        assert_eq!(syntax_offset("1e999"), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_expr() -> impl Strategy<Value = Expr> {
            let leaf = prop_oneof![
                (0i64..1_000_000).prop_map(|i| Expr::Literal(Literal::Int(i))),
                (0.0f64..1e6).prop_map(|x| Expr::Literal(Literal::Float(x))),
                any::<bool>().prop_map(|b| Expr::Literal(Literal::Bool(b))),
                "[a-z '\"\\\\\n]{0,6}".prop_map(|s| Expr::Literal(Literal::Text(s))),
                proptest::collection::vec(-10.0f64..10.0, 1..4).prop_map(|v| Expr::Literal(Literal::Vector(v))),
                "[a-z_][a-z0-9_]{0,5}"
                    .prop_filter("keyword", |s| !KEYWORDS.contains(&s.as_str()))
                    .prop_map(Expr::Column),
                "[a-z][a-z0-9]{0,3}".prop_map(Expr::Param),
            ];
            leaf.prop_recursive(4, 32, 3, |inner| {
                let ops = prop_oneof![
                    Just(BinaryOp::Add), Just(BinaryOp::Sub), Just(BinaryOp::Mul), Just(BinaryOp::Div),
                    Just(BinaryOp::Lt), Just(BinaryOp::Le), Just(BinaryOp::Gt), Just(BinaryOp::Ge),
                    Just(BinaryOp::Eq), Just(BinaryOp::Ne), Just(BinaryOp::And), Just(BinaryOp::Or),
                ];
                prop_oneof![
                    (ops, inner.clone(), inner.clone()).prop_map(|(op, l, r)| Expr::binary(op, l, r)),
                    inner.clone().prop_map(|e| Expr::Unary(UnaryOp::Neg, Box::new(e))),
                    inner.clone().prop_map(|e| Expr::Unary(UnaryOp::Not, Box::new(e))),
                    ("[a-z]{1,6}".prop_filter("keyword", |s| !KEYWORDS.contains(&s.as_str())),
                     proptest::collection::vec(inner, 0..3))
                        .prop_map(|(n, args)| Expr::Call(n, args)),
                ]
            })
        }

        proptest! {
            #[test]
            fn print_parse_fixpoint(e in arb_expr()) {
                let printed = e.to_string();
                let reparsed = parse(&printed).unwrap();
                prop_assert_eq!(&reparsed, &e);
                prop_assert_eq!(reparsed.to_string(), printed);
            }
        }
    }
}
