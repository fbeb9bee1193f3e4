//! Tagged s-expressions: the program representation shared by every DSL.
//!
//! An [`Expr`] is a phrase tag followed by an ordered mix of sub-expressions
//! and atoms. Only sub-expressions are addressable; atoms are payloads of the
//! node that carries them, so resampling `(gamma 0.5)` means replacing the
//! whole node.

use std::fmt;

use thiserror::Error;

/// Scalar payload of an expression node.
#[derive(Debug, Clone, PartialEq)]
pub enum Atom {
    Num(f64),
    Sym(String),
    /// Untagged list of atoms, e.g. the column list `(2 3)` of a mixture block.
    List(Vec<Atom>),
}

impl Atom {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Atom::Num(v) => Some(*v),
            _ => None,
        }
    }

    /// Nonnegative integer view of a numeric atom.
    pub fn as_count(&self) -> Option<u64> {
        match self {
            Atom::Num(v) if *v >= 0.0 && v.fract() == 0.0 && *v < 9.0e15 => Some(*v as u64),
            _ => None,
        }
    }

    pub fn as_sym(&self) -> Option<&str> {
        match self {
            Atom::Sym(s) => Some(s),
            _ => None,
        }
    }
}

/// One entry after the tag: either a nested expression or an atom.
#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Expr(Expr),
    Atom(Atom),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    tag: String,
    items: Vec<Item>,
}

/// Position of a tagged node: 1-based child indices from the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Address(pub Vec<usize>);

impl Address {
    pub fn root() -> Self {
        Address(Vec::new())
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, index: usize) -> Self {
        let mut path = self.0.clone();
        path.push(index);
        Address(path)
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, idx) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{idx}")?;
        }
        write!(f, ")")
    }
}

impl Expr {
    pub fn new(tag: impl Into<String>, items: Vec<Item>) -> Self {
        let tag = tag.into();
        assert!(!tag.is_empty(), "expression tag must be nonempty");
        Expr { tag, items }
    }

    pub fn leaf(tag: impl Into<String>) -> Self {
        Expr::new(tag, Vec::new())
    }

    pub fn with_children(tag: impl Into<String>, children: Vec<Expr>) -> Self {
        Expr::new(tag, children.into_iter().map(Item::Expr).collect())
    }

    pub fn with_atoms(tag: impl Into<String>, atoms: Vec<Atom>) -> Self {
        Expr::new(tag, atoms.into_iter().map(Item::Atom).collect())
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn children(&self) -> impl Iterator<Item = &Expr> + '_ {
        self.items.iter().filter_map(|it| match it {
            Item::Expr(e) => Some(e),
            Item::Atom(_) => None,
        })
    }

    pub fn atoms(&self) -> impl Iterator<Item = &Atom> + '_ {
        self.items.iter().filter_map(|it| match it {
            Item::Atom(a) => Some(a),
            Item::Expr(_) => None,
        })
    }

    pub fn child_count(&self) -> usize {
        self.children().count()
    }

    /// 1-based child lookup.
    pub fn child(&self, index: usize) -> Option<&Expr> {
        if index == 0 {
            return None;
        }
        self.children().nth(index - 1)
    }

    fn child_mut(&mut self, index: usize) -> Option<&mut Expr> {
        if index == 0 {
            return None;
        }
        self.items
            .iter_mut()
            .filter_map(|it| match it {
                Item::Expr(e) => Some(e),
                Item::Atom(_) => None,
            })
            .nth(index - 1)
    }

    /// Number of tagged nodes, root included.
    pub fn node_count(&self) -> usize {
        1 + self.children().map(Expr::node_count).sum::<usize>()
    }

    /// Every addressable node in preorder.
    pub fn addresses(&self) -> Vec<Address> {
        let mut out = Vec::with_capacity(self.node_count());
        self.collect_addresses(Address::root(), &mut out);
        out
    }

    fn collect_addresses(&self, here: Address, out: &mut Vec<Address>) {
        out.push(here.clone());
        for (i, c) in self.children().enumerate() {
            c.collect_addresses(here.child(i + 1), out);
        }
    }

    /// Preorder walk over `(address, node)` pairs.
    pub fn nodes(&self) -> Vec<(Address, &Expr)> {
        let mut out = Vec::new();
        let mut stack = vec![(Address::root(), self)];
        while let Some((addr, e)) = stack.pop() {
            let kids: Vec<_> = e.children().enumerate().collect();
            for (i, c) in kids.into_iter().rev() {
                stack.push((addr.child(i + 1), c));
            }
            out.push((addr, e));
        }
        out
    }

    /// The subtree at `a`; the root address yields the whole expression.
    pub fn subexpr(&self, a: &Address) -> Option<&Expr> {
        let mut cur = self;
        for &idx in &a.0 {
            cur = cur.child(idx)?;
        }
        Some(cur)
    }

    /// Copy of `self` with the subtree at `a` replaced.
    pub fn replace_at(&self, a: &Address, sub: Expr) -> Option<Expr> {
        let mut out = self.clone();
        let mut cur = &mut out;
        for &idx in &a.0 {
            cur = cur.child_mut(idx)?;
        }
        *cur = sub;
        Some(out)
    }

    /// Cut the subtree at `a`, reporting the nonterminal that produced it.
    pub fn sever<C: TagContext>(
        &self,
        ctx: &C,
        a: &Address,
    ) -> Option<(C::Nonterminal, ExprWithHole<C::Nonterminal>)> {
        self.subexpr(a)?;
        let nonterminal = match a.0.split_last() {
            None => ctx.start(),
            Some((&last, parent_path)) => {
                let parent = self.subexpr(&Address(parent_path.to_vec()))?;
                ctx.child_nonterminal(parent.tag(), last)?
            }
        };
        let context = self.replace_at(a, Expr::leaf(HOLE_TAG))?;
        Some((
            nonterminal,
            ExprWithHole {
                context,
                hole: a.clone(),
                nonterminal,
            },
        ))
    }
}

const HOLE_TAG: &str = "□";

/// Grammar-side knowledge needed by tree surgery: which nonterminal sits at
/// each child slot and which tags a nonterminal can produce.
pub trait TagContext {
    type Nonterminal: Copy + Eq + fmt::Debug;

    fn start(&self) -> Self::Nonterminal;
    /// Nonterminal of the `index`-th (1-based) child under a node tagged `parent_tag`.
    fn child_nonterminal(&self, parent_tag: &str, index: usize) -> Option<Self::Nonterminal>;
    fn produces(&self, nonterminal: Self::Nonterminal, tag: &str) -> bool;
}

/// An expression with exactly one hole left by [`Expr::sever`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExprWithHole<N> {
    context: Expr,
    hole: Address,
    nonterminal: N,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("tag `{tag}` cannot fill a hole of nonterminal {nonterminal}")]
pub struct FillError {
    pub tag: String,
    pub nonterminal: String,
}

impl<N: Copy + Eq + fmt::Debug> ExprWithHole<N> {
    pub fn hole(&self) -> &Address {
        &self.hole
    }

    pub fn nonterminal(&self) -> N {
        self.nonterminal
    }

    pub fn fill<C: TagContext<Nonterminal = N>>(&self, ctx: &C, sub: Expr) -> Result<Expr, FillError> {
        if !ctx.produces(self.nonterminal, sub.tag()) {
            return Err(FillError {
                tag: sub.tag().to_string(),
                nonterminal: format!("{:?}", self.nonterminal),
            });
        }
        Ok(self
            .context
            .replace_at(&self.hole, sub)
            .expect("hole address is valid by construction"))
    }
}

impl<N> fmt::Display for ExprWithHole<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.context.fmt(f)
    }
}

/// Canonical numeral: integers without a decimal point, otherwise the
/// shortest string that parses back to the same `f64`.
pub fn format_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else if x.abs() >= 1e-5 && x.abs() < 1e15 {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Num(v) => f.write_str(&format_num(*v)),
            Atom::Sym(s) => f.write_str(s),
            Atom::List(xs) => {
                f.write_str("(")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    x.fmt(f)?;
                }
                f.write_str(")")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}", self.tag)?;
        for it in &self.items {
            match it {
                Item::Expr(e) => write!(f, " {e}")?,
                Item::Atom(a) => write!(f, " {a}")?,
            }
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unbalanced parentheses at offset {0}")]
    Unbalanced(usize),
    #[error("empty list at offset {0}")]
    EmptyList(usize),
    #[error("malformed numeric literal `{text}` at offset {offset}")]
    BadNumber { text: String, offset: usize },
    #[error("expected a tag at offset {0}")]
    ExpectedTag(usize),
    #[error("expected `(` at offset {0}")]
    ExpectedOpen(usize),
    #[error("nested list inside an atom list at offset {0}")]
    NestedAtomList(usize),
    #[error("trailing input at offset {0}")]
    Trailing(usize),
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Unbalanced(o)
            | ParseError::EmptyList(o)
            | ParseError::ExpectedTag(o)
            | ParseError::ExpectedOpen(o)
            | ParseError::NestedAtomList(o)
            | ParseError::Trailing(o) => *o,
            ParseError::BadNumber { offset, .. } => *offset,
        }
    }
}

impl std::str::FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

/// Parse one s-expression; surrounding whitespace is ignored.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    check_balance(text)?;
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(ParseError::Trailing(p.pos));
    }
    Ok(e)
}

fn check_balance(text: &str) -> Result<(), ParseError> {
    let mut depth = 0usize;
    for (i, b) in text.bytes().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => {
                if depth == 0 {
                    return Err(ParseError::Unbalanced(i));
                }
                depth -= 1;
            }
            _ => {}
        }
    }
    if depth > 0 {
        return Err(ParseError::Unbalanced(text.len()));
    }
    Ok(())
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

enum Token<'a> {
    Open,
    Close,
    Word(&'a str),
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<(usize, Token<'a>)> {
        self.skip_ws();
        let start = self.pos;
        match self.src.get(start)? {
            b'(' => Some((start, Token::Open)),
            b')' => Some((start, Token::Close)),
            _ => {
                let mut end = start;
                while end < self.src.len()
                    && !self.src[end].is_ascii_whitespace()
                    && self.src[end] != b'('
                    && self.src[end] != b')'
                {
                    end += 1;
                }
                // Token boundaries fall on ASCII bytes, so this slice is valid UTF-8.
                let word = std::str::from_utf8(&self.src[start..end]).expect("utf8 boundary");
                Some((start, Token::Word(word)))
            }
        }
    }

    fn advance(&mut self, tok: &Token<'_>) {
        self.pos += match tok {
            Token::Open | Token::Close => 1,
            Token::Word(w) => w.len(),
        };
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let (open_at, tok) = self.peek().ok_or(ParseError::ExpectedOpen(self.src.len()))?;
        if !matches!(tok, Token::Open) {
            return Err(ParseError::ExpectedOpen(open_at));
        }
        self.advance(&tok);
        let (at, head) = self.peek().ok_or(ParseError::Unbalanced(self.src.len()))?;
        let tag = match head {
            Token::Close => return Err(ParseError::EmptyList(open_at)),
            Token::Open => return Err(ParseError::ExpectedTag(at)),
            Token::Word(w) => {
                if looks_numeric(w) {
                    return Err(ParseError::ExpectedTag(at));
                }
                w.to_string()
            }
        };
        self.advance(&head);
        let mut items = Vec::new();
        loop {
            let (at, tok) = self.peek().ok_or(ParseError::Unbalanced(self.src.len()))?;
            match tok {
                Token::Close => {
                    self.advance(&tok);
                    break;
                }
                Token::Word(w) => {
                    self.advance(&tok);
                    items.push(Item::Atom(word_atom(w, at)?));
                }
                Token::Open => {
                    // A list whose head is numeric is an atom list, otherwise a sub-expression.
                    let save = self.pos;
                    self.advance(&tok);
                    let head = self.peek();
                    self.pos = save;
                    match head {
                        Some((_, Token::Word(w))) if looks_numeric(w) => {
                            items.push(Item::Atom(self.atom_list()?));
                        }
                        _ => items.push(Item::Expr(self.expr()?)),
                    }
                }
            }
        }
        Ok(Expr { tag, items })
    }

    fn atom_list(&mut self) -> Result<Atom, ParseError> {
        let (_, open) = self.peek().expect("caller saw `(`");
        self.advance(&open);
        let mut xs = Vec::new();
        loop {
            let (at, tok) = self.peek().ok_or(ParseError::Unbalanced(self.src.len()))?;
            match tok {
                Token::Close => {
                    self.advance(&tok);
                    return Ok(Atom::List(xs));
                }
                Token::Open => return Err(ParseError::NestedAtomList(at)),
                Token::Word(w) => {
                    self.advance(&tok);
                    xs.push(word_atom(w, at)?);
                }
            }
        }
    }
}

fn looks_numeric(w: &str) -> bool {
    let b = w.as_bytes();
    match b.first() {
        Some(c) if c.is_ascii_digit() => true,
        Some(b'.') => b.get(1).is_some_and(u8::is_ascii_digit),
        Some(b'-') | Some(b'+') => match b.get(1) {
            Some(c) if c.is_ascii_digit() => true,
            Some(b'.') => b.get(2).is_some_and(u8::is_ascii_digit),
            _ => false,
        },
        _ => false,
    }
}

fn word_atom(w: &str, offset: usize) -> Result<Atom, ParseError> {
    if looks_numeric(w) {
        match w.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Atom::Num(v)),
            _ => Err(ParseError::BadNumber {
                text: w.to_string(),
                offset,
            }),
        }
    } else {
        Ok(Atom::Sym(w.to_string()))
    }
}
