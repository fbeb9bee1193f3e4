//! Structure queries over synthesized programs: static counts, a small
//! predicate language over those counts, and ensemble-averaged estimates.

use std::fmt;

use thiserror::Error;

use crate::gp::{BASE_KERNELS, OPERATORS};
use crate::sexpr::{Atom, Expr};

/// Co-block frequency at or above which two columns are declared dependent.
pub const DEPENDENCE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("unknown base kernel `{0}` (expected one of const, wn, lin, se, per)")]
    UnknownKernel(String),
    #[error("unknown operator `{0}` (expected one of +, *, cp)")]
    UnknownOperator(String),
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("program {index} has no column {column}")]
    MissingColumn { index: usize, column: usize },
}

fn count_tag(e: &Expr, tag: &str) -> usize {
    usize::from(e.tag() == tag) + e.children().map(|c| count_tag(c, tag)).sum::<usize>()
}

/// Number of base-kernel nodes with the given tag.
pub fn count_kernels(e: &Expr, kernel: &str) -> Result<usize, QueryError> {
    if !BASE_KERNELS.contains(&kernel) {
        return Err(QueryError::UnknownKernel(kernel.to_string()));
    }
    Ok(count_tag(e, kernel))
}

/// Number of composition nodes with the given operator tag.
pub fn count_operators(e: &Expr, op: &str) -> Result<usize, QueryError> {
    if !OPERATORS.contains(&op) {
        return Err(QueryError::UnknownOperator(op.to_string()));
    }
    Ok(count_tag(e, op))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
}

impl Cmp {
    fn holds(self, a: usize, b: usize) -> bool {
        match self {
            Cmp::Gt => a > b,
            Cmp::Ge => a >= b,
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Eq => a == b,
            Cmp::Ne => a != b,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Eq => "==",
            Cmp::Ne => "!=",
        }
    }
}

/// A boolean property of a kernel program, built from tag counts.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Const(bool),
    Count { tag: String, cmp: Cmp, value: usize },
    Not(Box<Predicate>),
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
}

impl Predicate {
    pub fn eval(&self, e: &Expr) -> bool {
        match self {
            Predicate::Const(b) => *b,
            Predicate::Count { tag, cmp, value } => cmp.holds(count_tag(e, tag), *value),
            Predicate::Not(p) => !p.eval(e),
            Predicate::And(a, b) => a.eval(e) && b.eval(e),
            Predicate::Or(a, b) => a.eval(e) || b.eval(e),
        }
    }

    /// `tag > 0`.
    pub fn has(tag: &str) -> Predicate {
        Predicate::Count {
            tag: tag.to_string(),
            cmp: Cmp::Gt,
            value: 0,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Const(b) => write!(f, "{b}"),
            Predicate::Count { tag, cmp, value } => write!(f, "{tag}{}{value}", cmp.symbol()),
            Predicate::Not(p) => write!(f, "not ({p})"),
            Predicate::And(a, b) => write!(f, "({a} and {b})"),
            Predicate::Or(a, b) => write!(f, "({a} or {b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{msg} at offset {offset}")]
pub struct PredicateError {
    pub offset: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Num(usize),
    Cmp(Cmp),
    Open,
    Close,
    And,
    Or,
    Not,
}

fn tokenize(s: &str) -> Result<Vec<(usize, Tok)>, PredicateError> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let two = s.get(i..i + 2);
        let tok = match (c, two) {
            ('(', _) => Tok::Open,
            (')', _) => Tok::Close,
            (_, Some(">=")) => Tok::Cmp(Cmp::Ge),
            (_, Some("<=")) => Tok::Cmp(Cmp::Le),
            (_, Some("==")) => Tok::Cmp(Cmp::Eq),
            (_, Some("!=")) => Tok::Cmp(Cmp::Ne),
            (_, Some("&&")) => Tok::And,
            (_, Some("||")) => Tok::Or,
            ('>', _) => Tok::Cmp(Cmp::Gt),
            ('<', _) => Tok::Cmp(Cmp::Lt),
            ('=', _) => Tok::Cmp(Cmp::Eq),
            ('!', _) => Tok::Not,
            ('+', _) | ('*', _) => Tok::Word(c.to_string()),
            _ if c.is_ascii_digit() => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let n = s[start..i].parse().map_err(|_| PredicateError {
                    offset: start,
                    msg: "count too large".into(),
                })?;
                out.push((start, Tok::Num(n)));
                continue;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let w = &s[start..i];
                out.push((
                    start,
                    match w {
                        "and" => Tok::And,
                        "or" => Tok::Or,
                        "not" => Tok::Not,
                        _ => Tok::Word(w.to_string()),
                    },
                ));
                continue;
            }
            _ => {
                return Err(PredicateError {
                    offset: start,
                    msg: format!("unexpected character `{c}`"),
                })
            }
        };
        i += match tok {
            Tok::Cmp(Cmp::Ge | Cmp::Le | Cmp::Ne) | Tok::And | Tok::Or => 2,
            Tok::Cmp(Cmp::Eq) if two == Some("==") => 2,
            _ => 1,
        };
        out.push((start, tok));
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, PredicateError> {
        Err(PredicateError {
            offset: self.offset(),
            msg: msg.into(),
        })
    }

    fn or(&mut self) -> Result<Predicate, PredicateError> {
        let mut lhs = self.and()?;
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            lhs = Predicate::Or(Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Predicate, PredicateError> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            lhs = Predicate::And(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Predicate, PredicateError> {
        if self.peek() == Some(&Tok::Not) {
            self.pos += 1;
            return Ok(Predicate::Not(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn tag(&mut self) -> Result<String, PredicateError> {
        match self.peek() {
            Some(Tok::Word(w)) if BASE_KERNELS.contains(&w.as_str()) || OPERATORS.contains(&w.as_str()) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            Some(Tok::Word(w)) => self.err(format!("unknown tag `{w}`")),
            _ => self.err("expected a kernel or operator tag"),
        }
    }

    fn atom(&mut self) -> Result<Predicate, PredicateError> {
        match self.peek() {
            Some(Tok::Open) => {
                self.pos += 1;
                let p = self.or()?;
                if self.peek() != Some(&Tok::Close) {
                    return self.err("expected `)`");
                }
                self.pos += 1;
                Ok(p)
            }
            Some(Tok::Word(w)) if w == "true" || w == "false" => {
                let b = w == "true";
                self.pos += 1;
                Ok(Predicate::Const(b))
            }
            Some(Tok::Word(w)) if w == "has" => {
                self.pos += 1;
                Ok(Predicate::has(&self.tag()?))
            }
            Some(Tok::Word(_)) => {
                let tag = self.tag()?;
                let Some(Tok::Cmp(cmp)) = self.peek().cloned() else {
                    return Ok(Predicate::has(&tag));
                };
                self.pos += 1;
                match self.peek() {
                    Some(Tok::Num(v)) => {
                        let value = *v;
                        self.pos += 1;
                        Ok(Predicate::Count { tag, cmp, value })
                    }
                    _ => self.err("expected a count"),
                }
            }
            None => self.err("unexpected end of property"),
            _ => self.err("expected a property"),
        }
    }
}

/// Parse `per>0 or cp>0`, `has lin and not (wn >= 2)`, `true`, ...
pub fn parse_predicate(s: &str) -> Result<Predicate, PredicateError> {
    let mut p = Parser {
        toks: tokenize(s)?,
        pos: 0,
        end: s.len(),
    };
    let pred = p.or()?;
    if p.pos != p.toks.len() {
        return p.err("trailing input");
    }
    Ok(pred)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedProperty {
    pub name: String,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {source}")]
pub struct PropertyFileError {
    pub line: usize,
    pub source: PredicateError,
}

/// One property per line, `name: predicate` or a bare predicate (named by
/// its own text). Blank lines and `#` comments are skipped.
pub fn parse_property_file(text: &str) -> Result<Vec<NamedProperty>, PropertyFileError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, body, shift) = match line.split_once(':') {
            Some((n, b)) => (n.trim().to_string(), b, n.len() + 1),
            None => (line.to_string(), line, 0),
        };
        let predicate = parse_predicate(body).map_err(|mut source| {
            source.offset += shift;
            PropertyFileError { line: i + 1, source }
        })?;
        out.push(NamedProperty { name, predicate });
    }
    Ok(out)
}

/// Fraction of programs satisfying the predicate.
pub fn estimate_property<'a>(programs: impl IntoIterator<Item = &'a Expr>, p: &Predicate) -> Result<f64, QueryError> {
    let (hits, total) = programs
        .into_iter()
        .fold((0usize, 0usize), |(h, t), e| (h + usize::from(p.eval(e)), t + 1));
    if total == 0 {
        return Err(QueryError::EmptyEnsemble);
    }
    Ok(hits as f64 / total as f64)
}

/// 0-based block index holding `column` (0-based) in a mixture program.
fn block_of(program: &Expr, column: usize) -> Option<usize> {
    program.children().position(|b| {
        b.atoms().any(|a| match a {
            Atom::List(cols) => cols.iter().any(|c| c.as_count() == Some(column as u64 + 1)),
            Atom::Num(_) => a.as_count() == Some(column as u64 + 1),
            Atom::Sym(_) => false,
        })
    })
}

/// Fraction of mixture programs placing the two columns (0-based) in one block.
pub fn mixture_same_block<'a>(
    programs: impl IntoIterator<Item = &'a Expr>,
    col_a: usize,
    col_b: usize,
) -> Result<f64, QueryError> {
    let mut hits = 0;
    let mut total = 0;
    for (index, p) in programs.into_iter().enumerate() {
        let a = block_of(p, col_a).ok_or(QueryError::MissingColumn { index, column: col_a + 1 })?;
        let b = block_of(p, col_b).ok_or(QueryError::MissingColumn { index, column: col_b + 1 })?;
        hits += usize::from(a == b);
        total += 1;
    }
    if total == 0 {
        return Err(QueryError::EmptyEnsemble);
    }
    Ok(hits as f64 / total as f64)
}

pub fn declares_dependence(probability: f64) -> bool {
    probability >= DEPENDENCE_THRESHOLD
}

/// Property name to estimated probability, in query order.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<(String, f64)>,
}

impl Report {
    pub fn aligned(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("property".len());
        let mut out = format!("{:<width$}  probability\n", "property");
        for (name, p) in &self.rows {
            out.push_str(&format!("{name:<width$}  {p:.4}\n"));
        }
        out
    }

    pub fn key_values(&self) -> String {
        self.rows.iter().map(|(n, p)| format!("{n}={p}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sexpr::parse;

    const OVERVIEW: &str = "(+ (* (+ (wn (gamma 49.5)) (const (gamma 250.9))) \
                            (+ (per (gamma 13.2) (gamma 8.6)) (+ (lin (gamma 1.2)) (lin (gamma 4.9))))) \
                            (wn (gamma 0.1)))";

    fn e(s: &str) -> Expr {
        parse(s).unwrap()
    }

    #[test]
    fn counts_on_overview_program() {
        let p = e(OVERVIEW);
        let k = |t| count_kernels(&p, t).unwrap();
        let o = |t| count_operators(&p, t).unwrap();
        assert_eq!((k("per"), k("lin"), k("wn"), k("const"), k("se")), (1, 2, 2, 1, 0));
        assert_eq!((o("+"), o("*"), o("cp")), (4, 1, 0));
    }

    #[test]
    fn counts_trivial_cases() {
        let se = e("(se (gamma 1))");
        for t in BASE_KERNELS {
            assert_eq!(count_kernels(&se, t).unwrap(), usize::from(t == "se"));
        }
        for op in OPERATORS {
            assert_eq!(count_operators(&se, op).unwrap(), 0);
        }
        assert_eq!(count_operators(&e("(cp (gamma 5) (lin (gamma 1)) (se (gamma 1)))"), "cp").unwrap(), 1);
        let mut deep = e("(lin (gamma 1))");
        for _ in 0..6 {
            deep = Expr::with_children("+", vec![e("(lin (gamma 1))"), deep]);
        }
        assert_eq!(count_kernels(&deep, "lin").unwrap(), 7);
        assert!(matches!(count_kernels(&se, "+"), Err(QueryError::UnknownKernel(_))));
        assert!(matches!(count_operators(&se, "lin"), Err(QueryError::UnknownOperator(_))));
    }

    #[test]
    fn predicate_parsing_and_evaluation() {
        let p = e(OVERVIEW);
        let yes = ["per>0 or cp>0", "has lin and not has se", "lin == 2", "lin>=2 && wn<3", "!(cp > 0)", "true", "per", "(+>3)"];
        for s in yes {
            assert!(parse_predicate(s).unwrap().eval(&p), "{s}");
        }
        let no = ["cp>0", "false", "lin != 2", "se or cp", "not per"];
        for s in no {
            assert!(!parse_predicate(s).unwrap().eval(&p), "{s}");
        }
        let pred = parse_predicate("has lin and (per>0 or wn<=1)").unwrap();
        assert_eq!(parse_predicate(&pred.to_string()).unwrap(), pred);
    }

    #[test]
    fn predicate_errors_report_offsets() {
        let err = parse_predicate("per>0 or bogus>1").unwrap_err();
        assert_eq!(err.offset, 9);
        assert_eq!(parse_predicate("per>").unwrap_err().offset, 4);
        assert_eq!(parse_predicate("(per>0").unwrap_err().offset, 6);
        assert_eq!(parse_predicate("per>0 $").unwrap_err().offset, 6);
        assert_eq!(parse_predicate("per>0 lin").unwrap_err().offset, 6);
    }

    #[test]
    fn property_files() {
        let props = parse_property_file("# structures\nwhite noise: wn>0\nlinear: lin>0\nper>0\nchange point: cp>0\n").unwrap();
        assert_eq!(props.len(), 4);
        assert_eq!(props[2].name, "per>0");
        let err = parse_property_file("a: lin>0\nb: lin>>0\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert_eq!(err.source.offset, 7);
    }

    #[test]
    fn estimates() {
        let progs = vec![e("(per (gamma 1) (gamma 1))"), e("(lin (gamma 1))"), e("(+ (per (gamma 1) (gamma 2)) (wn (gamma 1)))")];
        let has_per = parse_predicate("per>0").unwrap();
        assert!((estimate_property(&progs, &has_per).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let mut rev = progs.clone();
        rev.reverse();
        assert_eq!(estimate_property(&rev, &has_per).unwrap(), estimate_property(&progs, &has_per).unwrap());
        assert_eq!(estimate_property(&progs, &Predicate::Const(true)).unwrap(), 1.0);
        assert_eq!(estimate_property(&progs[1..2], &has_per).unwrap(), 0.0);
        assert_eq!(estimate_property(&[], &has_per), Err(QueryError::EmptyEnsemble));
    }

    #[test]
    fn co_block_frequency() {
        let fig5 = e("(partition (block (1) (cluster 10 (var 1 (normal 0 1)))) (block (2 3) (cluster 10 (var 2 (normal 0 1)) (var 3 (poisson 1)))))");
        let split = e("(partition (block (1) (cluster 10 (var 1 (normal 0 1)))) (block (2) (cluster 10 (var 2 (normal 0 1)))) (block (3) (cluster 10 (var 3 (poisson 1)))))");
        assert_eq!(mixture_same_block([&fig5], 0, 1).unwrap(), 0.0);
        assert_eq!(mixture_same_block([&fig5], 1, 2).unwrap(), 1.0);
        assert_eq!(mixture_same_block([&fig5, &split], 1, 2).unwrap(), 0.5);
        assert!(matches!(mixture_same_block([&fig5], 0, 5), Err(QueryError::MissingColumn { column: 6, .. })));
        assert!(declares_dependence(0.8) && !declares_dependence(0.79));
    }

    #[test]
    fn report_formats() {
        let r = Report {
            rows: vec![("white noise".into(), 0.25), ("lin".into(), 1.0)],
        };
        assert_eq!(r.aligned(), "property     probability\nwhite noise  0.2500\nlin          1.0000\n");
        assert_eq!(r.key_values(), "white noise=0.25\nlin=1\n");
    }
}
