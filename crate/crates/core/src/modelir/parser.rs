//! Tokenizer and statement parser for the model syntax.
//!
//! ```text
//! F =~ y1 + 0.8*y2 + NA*y3     loadings
//! F ~ G + 0.5*H                 latent regressions
//! y1 ~~ y2                      covariances (0* removes a default)
//! y2 | 12*t1 + t2 + 16*t3       thresholds, numeric prefix anchors
//! y2 ~ 1                        intercept
//! ```
//!
//! Statements end at a newline or `;`; `#` starts a comment.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Op(&'static str),
    End,
}

#[derive(Debug, Clone, PartialEq)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            let push = |out: &mut Vec<Token>, tok| out.push(Token { tok, line, column });
            if c == '#' {
                break;
            }
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == ';' {
                push(&mut out, Tok::End);
                i += 1;
                continue;
            }
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            if two == "=~" || two == "~~" {
                push(&mut out, Tok::Op(if two == "=~" { "=~" } else { "~~" }));
                i += 2;
                continue;
            }
            match c {
                '~' => {
                    push(&mut out, Tok::Op("~"));
                    i += 1;
                    continue;
                }
                '|' => {
                    push(&mut out, Tok::Op("|"));
                    i += 1;
                    continue;
                }
                '+' => {
                    push(&mut out, Tok::Op("+"));
                    i += 1;
                    continue;
                }
                '*' => {
                    push(&mut out, Tok::Op("*"));
                    i += 1;
                    continue;
                }
                _ => {}
            }
            let starts_number = c.is_ascii_digit()
                || ((c == '-' || c == '.')
                    && chars
                        .get(i + 1)
                        .is_some_and(|d| d.is_ascii_digit() || *d == '.'));
            if starts_number {
                let mut j = i + 1;
                while j < chars.len() {
                    let d = chars[j];
                    let exp_sign = (d == '-' || d == '+') && matches!(chars[j - 1], 'e' | 'E');
                    if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                        j += 1;
                    } else {
                        break;
                    }
                }
                let s: String = chars[i..j].iter().collect();
                let v: f64 = s
                    .parse()
                    .map_err(|_| err(line, column, format!("malformed number `{s}`")))?;
                push(&mut out, Tok::Number(v));
                i = j;
                continue;
            }
            if c.is_alphabetic() || c == '_' || c == '.' {
                let mut j = i + 1;
                while j < chars.len()
                    && (chars[j].is_alphanumeric() || chars[j] == '_' || chars[j] == '.')
                {
                    j += 1;
                }
                push(&mut out, Tok::Ident(chars[i..j].iter().collect()));
                i = j;
                continue;
            }
            return Err(err(line, column, format!("unexpected character `{c}`")));
        }
        out.push(Token {
            tok: Tok::End,
            line,
            column: chars.len() + 1,
        });
    }
    Ok(out)
}

/// Coefficient modifier written as `c*` or `NA*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Modifier {
    Fixed(f64),
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Name(String),
    /// The constant `1` (intercept).
    One,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub modifier: Option<Modifier>,
    pub target: Target,
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Measure,
    Regress,
    Covary,
    Threshold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Statement {
    pub lhs: String,
    pub op: Operator,
    pub terms: Vec<Term>,
    pub line: usize,
    pub column: usize,
}

/// Split model text into statements.
pub fn parse_statements(text: &str) -> Result<Vec<Statement>> {
    let toks = tokenize(text)?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if toks[i].tok == Tok::End {
            i += 1;
            continue;
        }
        let start = &toks[i];
        let lhs = match &start.tok {
            Tok::Ident(s) => s.clone(),
            other => {
                return Err(err(
                    start.line,
                    start.column,
                    format!("expected a variable name, found {}", show(other)),
                ))
            }
        };
        i += 1;
        let op_tok = &toks[i];
        let op = match op_tok.tok {
            Tok::Op("=~") => Operator::Measure,
            Tok::Op("~") => Operator::Regress,
            Tok::Op("~~") => Operator::Covary,
            Tok::Op("|") => Operator::Threshold,
            ref other => {
                return Err(err(
                    op_tok.line,
                    op_tok.column,
                    format!("expected `=~`, `~`, `~~` or `|`, found {}", show(other)),
                ))
            }
        };
        i += 1;
        let mut terms = Vec::new();
        loop {
            let t0 = &toks[i];
            let (mut modifier, mut target) = (None, None);
            match &t0.tok {
                Tok::Number(v) => {
                    if toks[i + 1].tok == Tok::Op("*") {
                        modifier = Some(Modifier::Fixed(*v));
                        i += 2;
                    } else if *v == 1.0 {
                        target = Some(Target::One);
                        i += 1;
                    } else {
                        return Err(err(
                            t0.line,
                            t0.column,
                            format!("number {v} must be followed by `*`"),
                        ));
                    }
                }
                Tok::Ident(s) if s == "NA" && toks[i + 1].tok == Tok::Op("*") => {
                    modifier = Some(Modifier::Free);
                    i += 2;
                }
                Tok::Ident(s) if toks[i + 1].tok == Tok::Op("*") => {
                    return Err(err(
                        t0.line,
                        t0.column,
                        format!("coefficient label `{s}` is not supported; equality constraints cannot be declared"),
                    ));
                }
                _ => {}
            }
            if target.is_none() {
                let t = &toks[i];
                target = Some(match &t.tok {
                    Tok::Ident(s) => Target::Name(s.clone()),
                    Tok::Number(v) if *v == 1.0 => Target::One,
                    other => {
                        return Err(err(
                            t.line,
                            t.column,
                            format!("expected a term, found {}", show(other)),
                        ))
                    }
                });
                i += 1;
            }
            terms.push(Term {
                modifier,
                target: target.expect("term target set above"),
                line: t0.line,
                column: t0.column,
            });
            let sep = &toks[i];
            match sep.tok {
                Tok::Op("+") => i += 1,
                Tok::End => {
                    i += 1;
                    break;
                }
                ref other => {
                    return Err(err(
                        sep.line,
                        sep.column,
                        format!("expected `+` or end of statement, found {}", show(other)),
                    ))
                }
            }
        }
        out.push(Statement {
            lhs,
            op,
            terms,
            line: start.line,
            column: start.column,
        });
    }
    Ok(out)
}

fn show(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Number(v) => format!("`{v}`"),
        Tok::Op(o) => format!("`{o}`"),
        Tok::End => "end of statement".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statement_kinds() {
        let s = parse_statements(
            "f =~ a + 0.5*b + NA*c # note\ng ~ f; a ~~ 0*b\na | 12*t1 + t2\na ~ 1",
        )
        .unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].op, Operator::Measure);
        assert_eq!(s[0].terms[1].modifier, Some(Modifier::Fixed(0.5)));
        assert_eq!(s[0].terms[2].modifier, Some(Modifier::Free));
        assert_eq!(s[1].op, Operator::Regress);
        assert_eq!(s[2].op, Operator::Covary);
        assert_eq!(s[2].line, 2);
        assert_eq!(s[3].terms[0].modifier, Some(Modifier::Fixed(12.0)));
        assert_eq!(s[4].terms[0].target, Target::One);
    }

    #[test]
    fn negative_and_exponent_numbers() {
        let s = parse_statements("f =~ a + -1.5e-1*b").unwrap();
        assert_eq!(s[0].terms[1].modifier, Some(Modifier::Fixed(-0.15)));
    }

    #[test]
    fn error_position() {
        let e = parse_statements("f =~ a\ng =~ b + + c").unwrap_err();
        assert_eq!(
            e,
            Error::Parse {
                line: 2,
                column: 10,
                message: "expected a term, found `+`".into()
            }
        );
        let e = parse_statements("f =~ a + lam*b").unwrap_err();
        assert!(
            matches!(
                e,
                Error::Parse {
                    line: 1,
                    column: 10,
                    ..
                }
            ),
            "{e:?}"
        );
        let e = parse_statements("f := a").unwrap_err();
        assert!(
            matches!(
                e,
                Error::Parse {
                    line: 1,
                    column: 3,
                    ..
                }
            ),
            "{e:?}"
        );
    }
}
