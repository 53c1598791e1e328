use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(super) enum Tok {
    Int(i64),
    Float(f64),
    Str(String),
    Ident(String),
    Param(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
    Eof,
}

impl Tok {
    pub(super) fn describe(&self) -> String {
        match self {
            Tok::Int(i) => format!("integer {i}"),
            Tok::Float(x) => format!("number {x}"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Ident(s) => format!("{s:?}"),
            Tok::Param(p) => format!("@{p}"),
            Tok::Eof => "end of input".into(),
            other => format!("{:?}", symbol(other)),
        }
    }
}

fn symbol(t: &Tok) -> &'static str {
    match t {
        Tok::LParen => "(",
        Tok::RParen => ")",
        Tok::LBracket => "[",
        Tok::RBracket => "]",
        Tok::Comma => ",",
        Tok::Plus => "+",
        Tok::Minus => "-",
        Tok::Star => "*",
        Tok::Slash => "/",
        Tok::Lt => "<",
        Tok::Le => "<=",
        Tok::Gt => ">",
        Tok::Ge => ">=",
        Tok::EqEq => "==",
        Tok::Ne => "!=",
        _ => "?",
    }
}

fn syntax(offset: usize, expected: &str, found: &str) -> Error {
    Error::Syntax {
        offset,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Tokens paired with their starting byte offset.
pub(super) fn lex(src: &str) -> Result<Vec<(Tok, usize)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let tok = match c {
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'[' => Tok::LBracket,
            b']' => Tok::RBracket,
            b',' => Tok::Comma,
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'<' | b'>' | b'=' | b'!' => {
                let next_eq = bytes.get(i + 1) == Some(&b'=');
                let t = match (c, next_eq) {
                    (b'<', true) => Tok::Le,
                    (b'<', false) => Tok::Lt,
                    (b'>', true) => Tok::Ge,
                    (b'>', false) => Tok::Gt,
                    (b'=', true) => Tok::EqEq,
                    (b'!', true) => Tok::Ne,
                    _ => {
                        return Err(syntax(
                            start,
                            if c == b'=' { "'=='" } else { "'!='" },
                            &format!("{:?}", c as char),
                        ))
                    }
                };
                if next_eq {
                    i += 1;
                }
                t
            }
            b'0'..=b'9' | b'.' => {
                let (tok, end) = lex_number(src, start)?;
                out.push((tok, start));
                i = end;
                continue;
            }
            b'"' | b'\'' => {
                let (s, end) = lex_string(src, start)?;
                out.push((Tok::Str(s), start));
                i = end;
                continue;
            }
            b'@' => {
                let end = ident_end(bytes, i + 1);
                if end == i + 1 || bytes[i + 1].is_ascii_digit() {
                    return Err(syntax(i + 1, "parameter name", &found_at(src, i + 1)));
                }
                out.push((Tok::Param(src[i + 1..end].to_string()), start));
                i = end;
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let end = ident_end(bytes, i);
                out.push((Tok::Ident(src[i..end].to_string()), start));
                i = end;
                continue;
            }
            _ => return Err(syntax(start, "expression", &found_at(src, start))),
        };
        out.push((tok, start));
        i += 1;
    }
    out.push((Tok::Eof, src.len()));
    Ok(out)
}

fn found_at(src: &str, i: usize) -> String {
    match src[i..].chars().next() {
        Some(c) => format!("{c:?}"),
        None => "end of input".into(),
    }
}

fn ident_end(bytes: &[u8], mut i: usize) -> usize {
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
        i += 1;
    }
    i
}

fn lex_number(src: &str, start: usize) -> Result<(Tok, usize)> {
    let b = src.as_bytes();
    let mut i = start;
    let digits = |i: &mut usize| {
        let s = *i;
        while *i < b.len() && b[*i].is_ascii_digit() {
            *i += 1;
        }
        *i - s
    };
    let int_digits = digits(&mut i);
    let mut is_float = false;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        is_float = true;
        if digits(&mut i) == 0 && int_digits == 0 {
            return Err(syntax(start, "number", "'.'"));
        }
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let save = i;
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        if digits(&mut i) == 0 {
            return Err(syntax(save, "exponent digits", &found_at(src, i.min(b.len()))));
        }
        is_float = true;
    }
    if i < b.len() && (b[i].is_ascii_alphabetic() || b[i] == b'_') {
        return Err(syntax(i, "operator or end of number", &found_at(src, i)));
    }
    let text = &src[start..i];
    let tok = if is_float {
        let x: f64 = text
            .parse()
            .map_err(|_| syntax(start, "number", &format!("{text:?}")))?;
        if !x.is_finite() {
            return Err(syntax(start, "finite number", &format!("{text:?}")));
        }
        Tok::Float(x)
    } else {
        Tok::Int(
            text.parse()
                .map_err(|_| syntax(start, "integer within int64 range", &format!("{text:?}")))?,
        )
    };
    Ok((tok, i))
}

fn lex_string(src: &str, start: usize) -> Result<(String, usize)> {
    let quote = src.as_bytes()[start] as char;
    let mut out = String::new();
    let mut chars = src[start + 1..].char_indices();
    while let Some((off, c)) = chars.next() {
        let pos = start + 1 + off;
        match c {
            c if c == quote => return Ok((out, pos + 1)),
            '\\' => {
                let Some((_, e)) = chars.next() else {
                    break;
                };
                out.push(match e {
                    'n' => '\n',
                    't' => '\t',
                    'r' => '\r',
                    '0' => '\0',
                    '\\' => '\\',
                    '\'' => '\'',
                    '"' => '"',
                    other => {
                        return Err(syntax(pos, "escape sequence", &format!("'\\{other}'")))
                    }
                });
            }
            c => out.push(c),
        }
    }
    Err(syntax(src.len(), &format!("closing {quote}"), "end of input"))
}
