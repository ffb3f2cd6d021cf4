//! S-expression syntax for group and von Neumann algebra expressions.
//!
//! Group grammar:
//!   atom  := trivial | Z | (cyclic n) | (free-group n) | (amenable n|inf) | (property-t)
//!   expr  := atom | (product expr expr) | (amalgam expr expr over expr)
//!
//! Von Neumann grammar:
//!   vn := (hyperfinite REF) | (diffuse) | (amalgam-vn vn vn over vn-base)
//!       | (corner vn p/q) | (group expr)
//! where vn-base is (hyperfinite REF) or (diffuse), and REF names an
//! algebra or tensor-sequence document resolved by the caller.
//!
//! Sugar is desugared during parsing, so the parsed tree is already the
//! calculus-level normal form; printing emits canonical forms that re-parse
//! to the same tree.

use crate::dims::{DimError, GroupExpr, HyperfiniteSpec, Order, VnExpr};
use crate::rational::{format_rational, parse_rational, Rational};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Pos {
    line: usize,
    column: usize,
}

impl Pos {
    fn err(self, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    LParen,
    RParen,
    Atom(String),
}

fn tokenize(text: &str) -> Vec<(Token, Pos)> {
    let mut out = Vec::new();
    let mut line = 1usize;
    let mut column = 1usize;
    let mut atom_start: Option<(usize, Pos)> = None;
    let bytes: Vec<char> = text.chars().collect();
    let flush = |start: &mut Option<(usize, Pos)>, end: usize, out: &mut Vec<(Token, Pos)>| {
        if let Some((s, pos)) = start.take() {
            out.push((Token::Atom(bytes[s..end].iter().collect()), pos));
        }
    };
    for (i, &ch) in bytes.iter().enumerate() {
        match ch {
            '(' => {
                flush(&mut atom_start, i, &mut out);
                out.push((Token::LParen, Pos { line, column }));
            }
            ')' => {
                flush(&mut atom_start, i, &mut out);
                out.push((Token::RParen, Pos { line, column }));
            }
            c if c.is_whitespace() => flush(&mut atom_start, i, &mut out),
            _ => {
                if atom_start.is_none() {
                    atom_start = Some((i, Pos { line, column }));
                }
            }
        }
        if ch == '\n' {
            line += 1;
            column = 1;
        } else {
            column += 1;
        }
    }
    flush(&mut atom_start, bytes.len(), &mut out);
    out
}

/// Generic s-expression tree with source positions.
#[derive(Clone, Debug, PartialEq)]
enum Sexpr {
    Atom(String, Pos),
    List(Vec<Sexpr>, Pos),
}

impl Sexpr {
    fn pos(&self) -> Pos {
        match self {
            Sexpr::Atom(_, p) | Sexpr::List(_, p) => *p,
        }
    }
}

fn parse_sexpr(text: &str) -> Result<Sexpr, ParseError> {
    let tokens = tokenize(text);
    let mut iter = tokens.into_iter().peekable();
    let root = parse_node(&mut iter)?;
    if let Some((_, pos)) = iter.next() {
        return Err(pos.err("trailing input after expression"));
    }
    Ok(root)
}

fn parse_node(
    iter: &mut std::iter::Peekable<std::vec::IntoIter<(Token, Pos)>>,
) -> Result<Sexpr, ParseError> {
    match iter.next() {
        None => Err(Pos { line: 1, column: 1 }.err("empty input")),
        Some((Token::Atom(a), pos)) => Ok(Sexpr::Atom(a, pos)),
        Some((Token::RParen, pos)) => Err(pos.err("unexpected ')'")),
        Some((Token::LParen, pos)) => {
            let mut items = Vec::new();
            loop {
                match iter.peek() {
                    None => return Err(pos.err("unclosed '('")),
                    Some((Token::RParen, _)) => {
                        iter.next();
                        return Ok(Sexpr::List(items, pos));
                    }
                    Some(_) => items.push(parse_node(iter)?),
                }
            }
        }
    }
}

fn expect_atom(e: &Sexpr, what: &str) -> Result<(String, Pos), ParseError> {
    match e {
        Sexpr::Atom(a, p) => Ok((a.clone(), *p)),
        Sexpr::List(_, p) => Err(p.err(format!("expected {what}, found a list"))),
    }
}

fn parse_count(e: &Sexpr, what: &str) -> Result<u64, ParseError> {
    let (a, p) = expect_atom(e, what)?;
    a.parse::<u64>()
        .map_err(|_| p.err(format!("expected {what} as a positive integer, found '{a}'")))
}

fn group_from_sexpr(e: &Sexpr) -> Result<GroupExpr, ParseError> {
    match e {
        Sexpr::Atom(a, p) => match a.as_str() {
            "trivial" => Ok(GroupExpr::trivial()),
            "Z" => Ok(GroupExpr::z()),
            other => Err(p.err(format!(
                "unknown group atom '{other}' (expected trivial or Z)"
            ))),
        },
        Sexpr::List(items, p) => {
            let Some(head) = items.first() else {
                return Err(p.err("empty list is not a group expression"));
            };
            let (head_name, head_pos) = expect_atom(head, "a form name")?;
            let arity = |n: usize| -> Result<(), ParseError> {
                if items.len() - 1 != n {
                    Err(p.err(format!(
                        "'{head_name}' takes {n} argument{}, found {}",
                        if n == 1 { "" } else { "s" },
                        items.len() - 1
                    )))
                } else {
                    Ok(())
                }
            };
            match head_name.as_str() {
                "cyclic" => {
                    arity(1)?;
                    let n = parse_count(&items[1], "a cyclic group order")?;
                    GroupExpr::cyclic(n).map_err(|e| items[1].pos().err(e.to_string()))
                }
                "free-group" => {
                    arity(1)?;
                    let n = parse_count(&items[1], "a free group rank")?;
                    GroupExpr::free_group(n).map_err(|e| items[1].pos().err(e.to_string()))
                }
                "amenable" => {
                    arity(1)?;
                    let (a, ap) = expect_atom(&items[1], "an order (positive integer or inf)")?;
                    if a == "inf" {
                        Ok(GroupExpr::Amenable(Order::Infinite))
                    } else {
                        let n = a.parse::<u64>().map_err(|_| {
                            ap.err(format!("expected a positive integer or 'inf', found '{a}'"))
                        })?;
                        GroupExpr::cyclic(n).map_err(|e| ap.err(e.to_string()))
                    }
                }
                "property-t" => {
                    arity(0)?;
                    Ok(GroupExpr::PropertyT)
                }
                "product" => {
                    arity(2)?;
                    let g1 = group_from_sexpr(&items[1])?;
                    let g2 = group_from_sexpr(&items[2])?;
                    GroupExpr::product(g1, g2).map_err(|e| match e {
                        DimError::ProductFiniteChild { which } => {
                            items[which].pos().err(e.to_string())
                        }
                        other => p.err(other.to_string()),
                    })
                }
                "amalgam" => {
                    if items.len() != 5 {
                        return Err(p.err(
                            "'amalgam' takes the form (amalgam expr expr over expr)".to_string(),
                        ));
                    }
                    let (kw, kw_pos) = expect_atom(&items[3], "the keyword 'over'")?;
                    if kw != "over" {
                        return Err(kw_pos.err(format!("expected 'over', found '{kw}'")));
                    }
                    let g1 = group_from_sexpr(&items[1])?;
                    let g2 = group_from_sexpr(&items[2])?;
                    let h = group_from_sexpr(&items[4])?;
                    GroupExpr::amalgam(g1, g2, h).map_err(|e| match e {
                        DimError::ImproperAmalgam { which } => {
                            items[which].pos().err(e.to_string())
                        }
                        other => p.err(other.to_string()),
                    })
                }
                other => Err(head_pos.err(format!("unknown group form '{other}'"))),
            }
        }
    }
}

pub fn parse_group_expr(text: &str) -> Result<GroupExpr, ParseError> {
    group_from_sexpr(&parse_sexpr(text)?)
}

/// Canonical printing; `parse_group_expr` inverts it.
pub fn print_group_expr(g: &GroupExpr) -> String {
    match g {
        GroupExpr::Amenable(Order::Finite(1)) => "trivial".to_string(),
        GroupExpr::Amenable(Order::Infinite) => "Z".to_string(),
        GroupExpr::Amenable(Order::Finite(n)) => format!("(cyclic {n})"),
        GroupExpr::PropertyT => "(property-t)".to_string(),
        GroupExpr::Product(g1, g2) => {
            format!("(product {} {})", print_group_expr(g1), print_group_expr(g2))
        }
        GroupExpr::Amalgam { g1, g2, h } => format!(
            "(amalgam {} {} over {})",
            print_group_expr(g1),
            print_group_expr(g2),
            print_group_expr(h)
        ),
    }
}

/// Surface-level von Neumann expression: hyperfinite leaves are unresolved
/// document references until `resolve_vn_expr` supplies their contents.
#[derive(Clone, Debug, PartialEq)]
pub enum VnAst {
    HyperfiniteRef(String),
    Diffuse,
    AmalgamVn {
        m1: Box<VnAst>,
        m2: Box<VnAst>,
        base: Box<VnAst>,
    },
    Corner {
        inner: Box<VnAst>,
        trace_p: Rational,
    },
    Group(GroupExpr),
}

fn vn_from_sexpr(e: &Sexpr) -> Result<VnAst, ParseError> {
    let Sexpr::List(items, p) = e else {
        return Err(e
            .pos()
            .err("a von Neumann expression is parenthesized, e.g. (diffuse)"));
    };
    let Some(head) = items.first() else {
        return Err(p.err("empty list is not a von Neumann expression"));
    };
    let (head_name, head_pos) = expect_atom(head, "a form name")?;
    match head_name.as_str() {
        "diffuse" => {
            if items.len() != 1 {
                return Err(p.err("'diffuse' takes no arguments"));
            }
            Ok(VnAst::Diffuse)
        }
        "hyperfinite" => {
            if items.len() != 2 {
                return Err(p.err("'hyperfinite' takes one document reference"));
            }
            let (name, _) = expect_atom(&items[1], "a document reference")?;
            Ok(VnAst::HyperfiniteRef(name))
        }
        "amalgam-vn" => {
            if items.len() != 5 {
                return Err(
                    p.err("'amalgam-vn' takes the form (amalgam-vn vn vn over base)".to_string())
                );
            }
            let (kw, kw_pos) = expect_atom(&items[3], "the keyword 'over'")?;
            if kw != "over" {
                return Err(kw_pos.err(format!("expected 'over', found '{kw}'")));
            }
            let m1 = vn_from_sexpr(&items[1])?;
            let m2 = vn_from_sexpr(&items[2])?;
            let base = vn_from_sexpr(&items[4])?;
            if !matches!(base, VnAst::HyperfiniteRef(_) | VnAst::Diffuse) {
                return Err(items[4]
                    .pos()
                    .err("the amalgam base must be hyperfinite: (hyperfinite REF) or (diffuse)"));
            }
            Ok(VnAst::AmalgamVn {
                m1: Box::new(m1),
                m2: Box::new(m2),
                base: Box::new(base),
            })
        }
        "corner" => {
            if items.len() != 3 {
                return Err(p.err("'corner' takes the form (corner vn p/q)"));
            }
            let inner = vn_from_sexpr(&items[1])?;
            let (frac, fp) = expect_atom(&items[2], "a trace value p/q")?;
            let trace_p = parse_rational(&frac).map_err(|e| fp.err(e.to_string()))?;
            use num_traits::{One, Signed};
            if !trace_p.is_positive() || trace_p > Rational::one() {
                return Err(fp.err(format!(
                    "corner trace {} is outside (0, 1]",
                    format_rational(&trace_p)
                )));
            }
            Ok(VnAst::Corner {
                inner: Box::new(inner),
                trace_p,
            })
        }
        "group" => {
            if items.len() != 2 {
                return Err(p.err("'group' takes one group expression"));
            }
            Ok(VnAst::Group(group_from_sexpr(&items[1])?))
        }
        other => Err(head_pos.err(format!("unknown von Neumann form '{other}'"))),
    }
}

pub fn parse_vn_expr(text: &str) -> Result<VnAst, ParseError> {
    vn_from_sexpr(&parse_sexpr(text)?)
}

pub fn print_vn_expr(e: &VnAst) -> String {
    match e {
        VnAst::HyperfiniteRef(name) => format!("(hyperfinite {name})"),
        VnAst::Diffuse => "(diffuse)".to_string(),
        VnAst::AmalgamVn { m1, m2, base } => format!(
            "(amalgam-vn {} {} over {})",
            print_vn_expr(m1),
            print_vn_expr(m2),
            print_vn_expr(base)
        ),
        VnAst::Corner { inner, trace_p } => {
            format!("(corner {} {})", print_vn_expr(inner), format_rational(trace_p))
        }
        VnAst::Group(g) => format!("(group {})", print_group_expr(g)),
    }
}

/// Replaces every hyperfinite reference with its loaded document. The loader
/// maps a reference name to document text; the library itself does no file
/// IO.
pub fn resolve_vn_expr(
    ast: &VnAst,
    loader: &mut dyn FnMut(&str) -> Result<String, String>,
) -> Result<VnExpr, DimError> {
    let load_spec = |name: &str,
                     loader: &mut dyn FnMut(&str) -> Result<String, String>|
     -> Result<HyperfiniteSpec, DimError> {
        let text = loader(name).map_err(|message| DimError::Ref {
            name: name.to_string(),
            message,
        })?;
        HyperfiniteSpec::from_json(&text).map_err(|e| match e {
            DimError::Ref { message, .. } => DimError::Ref {
                name: name.to_string(),
                message,
            },
            other => other,
        })
    };
    match ast {
        VnAst::HyperfiniteRef(name) => Ok(VnExpr::Hyperfinite(load_spec(name, loader)?)),
        VnAst::Diffuse => Ok(VnExpr::Hyperfinite(HyperfiniteSpec::diffuse())),
        VnAst::AmalgamVn { m1, m2, base } => {
            let m1 = resolve_vn_expr(m1, loader)?;
            let m2 = resolve_vn_expr(m2, loader)?;
            let base = match &**base {
                VnAst::HyperfiniteRef(name) => load_spec(name, loader)?,
                VnAst::Diffuse => HyperfiniteSpec::diffuse(),
                _ => return Err(DimError::BaseNotHyperfinite),
            };
            Ok(VnExpr::AmalgamVn {
                m1: Box::new(m1),
                m2: Box::new(m2),
                base,
            })
        }
        VnAst::Corner { inner, trace_p } => Ok(VnExpr::Corner {
            inner: Box::new(resolve_vn_expr(inner, loader)?),
            trace_p: trace_p.clone(),
        }),
        VnAst::Group(g) => Ok(VnExpr::Group(g.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dims::{delta0_vn, DimValue};
    use crate::rational::rat;
    use proptest::prelude::*;

    #[test]
    fn parses_basic_group_forms() {
        assert_eq!(parse_group_expr("trivial").unwrap(), GroupExpr::trivial());
        assert_eq!(parse_group_expr("Z").unwrap(), GroupExpr::z());
        assert_eq!(
            parse_group_expr("(cyclic 5)").unwrap(),
            GroupExpr::Amenable(Order::Finite(5))
        );
        assert_eq!(
            parse_group_expr("(amenable inf)").unwrap(),
            GroupExpr::z()
        );
        assert_eq!(
            parse_group_expr("(free-group 2)").unwrap(),
            GroupExpr::amalgam(GroupExpr::z(), GroupExpr::z(), GroupExpr::trivial()).unwrap()
        );
        assert_eq!(
            parse_group_expr("(amalgam (cyclic 2) (cyclic 3) over trivial)").unwrap(),
            GroupExpr::amalgam(
                GroupExpr::cyclic(2).unwrap(),
                GroupExpr::cyclic(3).unwrap(),
                GroupExpr::trivial()
            )
            .unwrap()
        );
        assert_eq!(
            parse_group_expr("(product Z Z)").unwrap(),
            GroupExpr::product(GroupExpr::z(), GroupExpr::z()).unwrap()
        );
    }

    #[test]
    fn rejects_bad_group_syntax_with_position() {
        let err = parse_group_expr("(cyclic x)").unwrap_err();
        assert_eq!((err.line, err.column), (1, 9));
        let err = parse_group_expr("(amalgam Z Z over Z)").unwrap_err();
        assert!(err.message.contains("proper amalgam"));
        let err = parse_group_expr("(product (cyclic 2) Z)").unwrap_err();
        assert_eq!((err.line, err.column), (1, 10));
        assert!(err.message.contains("infinite"));
        let err = parse_group_expr("(amalgam Z Z Z)").unwrap_err();
        assert!(err.message.contains("over"));
        let err = parse_group_expr("(cyclic 2) Z").unwrap_err();
        assert!(err.message.contains("trailing"));
        let err = parse_group_expr("(cyclic 2").unwrap_err();
        assert!(err.message.contains("unclosed"));
        let err = parse_group_expr("\n  (nonsense 1)").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn parses_vn_forms_and_resolves() {
        let ast = parse_vn_expr(
            "(corner (amalgam-vn (diffuse) (diffuse) over (hyperfinite base.json)) 1/2)",
        )
        .unwrap();
        let alg_json = r#"{"blocks":[{"dim":1,"weight":"1/2"},{"dim":1,"weight":"1/2"}],"diffuse":"0"}"#;
        let mut loader = |name: &str| -> Result<String, String> {
            if name == "base.json" {
                Ok(alg_json.to_string())
            } else {
                Err(format!("no such document '{name}'"))
            }
        };
        let e = resolve_vn_expr(&ast, &mut loader).unwrap();
        let r = delta0_vn(&e).unwrap();
        // inner 2 - 1/2 = 3/2, corner at 1/2: 1 - 4 + 4 * 3/2 = 3
        assert_eq!(r.delta0, DimValue::exact(rat(3, 1)));

        let missing = parse_vn_expr("(hyperfinite nope.json)").unwrap();
        assert!(resolve_vn_expr(&missing, &mut loader).is_err());
    }

    #[test]
    fn rejects_bad_vn_syntax() {
        assert!(parse_vn_expr("diffuse").is_err());
        let err = parse_vn_expr("(amalgam-vn (diffuse) (diffuse) over (corner (diffuse) 1/2))")
            .unwrap_err();
        assert!(err.message.contains("hyperfinite"));
        let err = parse_vn_expr("(corner (diffuse) 3/2)").unwrap_err();
        assert!(err.message.contains("outside"));
        let err = parse_vn_expr("(corner (diffuse) 0)").unwrap_err();
        assert!(err.message.contains("outside"));
    }

    fn arb_group() -> impl Strategy<Value = GroupExpr> {
        let leaf = prop_oneof![
            Just(GroupExpr::trivial()),
            Just(GroupExpr::z()),
            (2u64..50).prop_map(|n| GroupExpr::cyclic(n).unwrap()),
            Just(GroupExpr::PropertyT),
        ];
        leaf.prop_recursive(4, 32, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_filter_map("finite factor", |(a, b)| {
                    GroupExpr::product(a, b).ok()
                }),
                (inner.clone(), inner.clone(), inner).prop_filter_map(
                    "improper amalgam",
                    |(a, b, h)| GroupExpr::amalgam(a, b, h).ok()
                ),
            ]
        })
    }

    proptest! {
        #[test]
        fn group_print_parse_round_trip(g in arb_group()) {
            let printed = print_group_expr(&g);
            let back = parse_group_expr(&printed).unwrap();
            prop_assert_eq!(back, g);
        }
    }

    fn arb_vn() -> impl Strategy<Value = VnAst> {
        let leaf = prop_oneof![
            Just(VnAst::Diffuse),
            "[a-z][a-z0-9_.-]{0,12}".prop_map(VnAst::HyperfiniteRef),
            arb_group().prop_map(VnAst::Group),
        ];
        leaf.prop_recursive(3, 24, 2, |inner| {
            let base = prop_oneof![
                Just(VnAst::Diffuse),
                "[a-z][a-z0-9_.-]{0,12}".prop_map(VnAst::HyperfiniteRef),
            ];
            prop_oneof![
                (inner.clone(), inner.clone(), base).prop_map(|(m1, m2, b)| VnAst::AmalgamVn {
                    m1: Box::new(m1),
                    m2: Box::new(m2),
                    base: Box::new(b),
                }),
                (inner, (1i64..40), (40i64..80)).prop_map(|(e, p, q)| VnAst::Corner {
                    inner: Box::new(e),
                    trace_p: rat(p, q),
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn vn_print_parse_round_trip(e in arb_vn()) {
            let printed = print_vn_expr(&e);
            let back = parse_vn_expr(&printed).unwrap();
            prop_assert_eq!(back, e);
        }
    }
}
