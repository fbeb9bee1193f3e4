//! Tagged probabilistic context-free grammars with random terminal symbols.
//!
//! Every production emits a unique tag, so "parsing" an expression against a
//! grammar is tag dispatch. Terminal productions `(T s)` draw the symbol `s`
//! from a [`TerminalDist`], which may be a discrete table or a continuous
//! density (the GP DSL uses a gamma density for its parameters).

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::sexpr::{Atom, Expr, Item, TagContext};

const NORMALIZATION_TOL: f64 = 1e-12;

/// Default bound on nested expansions while sampling.
pub const DEFAULT_MAX_DEPTH: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NonterminalId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalDist {
    /// Finite table of symbols with probabilities.
    Discrete(Vec<(String, f64)>),
    /// Gamma density with shape and rate; samples below `floor` are redrawn.
    Gamma { shape: f64, rate: f64, floor: f64 },
}

impl TerminalDist {
    pub fn gamma(shape: f64, rate: f64) -> Self {
        TerminalDist::Gamma {
            shape,
            rate,
            floor: 1e-9,
        }
    }

    pub fn discrete<S: Into<String>>(table: impl IntoIterator<Item = (S, f64)>) -> Self {
        TerminalDist::Discrete(table.into_iter().map(|(s, p)| (s.into(), p)).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Atom {
        match self {
            TerminalDist::Discrete(table) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (sym, p) in table {
                    acc += p;
                    if u < acc {
                        return Atom::Sym(sym.clone());
                    }
                }
                Atom::Sym(table.last().expect("nonempty discrete table").0.clone())
            }
            TerminalDist::Gamma { shape, rate, floor } => {
                let g = Gamma::new(*shape, 1.0 / rate).expect("valid gamma parameters");
                loop {
                    let v: f64 = g.sample(rng);
                    if v >= *floor {
                        return Atom::Num(v);
                    }
                }
            }
        }
    }

    pub fn log_density(&self, atom: &Atom) -> f64 {
        match (self, atom) {
            (TerminalDist::Discrete(table), Atom::Sym(s)) => table
                .iter()
                .find(|(sym, _)| sym == s)
                .map_or(f64::NEG_INFINITY, |(_, p)| p.ln()),
            (TerminalDist::Gamma { shape, rate, .. }, Atom::Num(v)) => {
                gamma_log_density(*shape, *rate, *v)
            }
            _ => f64::NEG_INFINITY,
        }
    }
}

pub fn gamma_log_density(shape: f64, rate: f64, v: f64) -> f64 {
    if v <= 0.0 || !v.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * v.ln() - rate * v
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleBody {
    /// `(T N_1 ... N_h)`
    Children(Vec<NonterminalId>),
    /// `(T s)` with `s` drawn from the distribution.
    Terminal(TerminalDist),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: NonterminalId,
    pub tag: String,
    pub prob: f64,
    pub body: RuleBody,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    names: Vec<String>,
    rules: Vec<Rule>,
    start: NonterminalId,
    by_tag: HashMap<String, usize>,
    by_lhs: Vec<Vec<usize>>,
    max_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammarError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("grammar has no start symbol")]
    NoStart,
    #[error("unknown nonterminal `{0}`")]
    UnknownNonterminal(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error("sampling exceeded the recursion depth guard of {0}; the grammar is probably not consistent")]
    DepthExceeded(usize),
    #[error("nonterminal {0} has no productions")]
    NoProductions(String),
}

/// Incremental grammar construction by nonterminal name.
#[derive(Debug, Default)]
pub struct GrammarBuilder {
    names: Vec<String>,
    rules: Vec<Rule>,
    start: Option<String>,
}

impl GrammarBuilder {
    fn intern(&mut self, name: &str) -> NonterminalId {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return NonterminalId(i);
        }
        self.names.push(name.to_string());
        NonterminalId(self.names.len() - 1)
    }

    pub fn start(mut self, name: &str) -> Self {
        self.intern(name);
        self.start = Some(name.to_string());
        self
    }

    pub fn rule(mut self, lhs: &str, tag: &str, prob: f64, children: &[&str]) -> Self {
        let lhs = self.intern(lhs);
        let kids = children.iter().map(|c| self.intern(c)).collect();
        self.rules.push(Rule {
            lhs,
            tag: tag.to_string(),
            prob,
            body: RuleBody::Children(kids),
        });
        self
    }

    pub fn terminal(mut self, lhs: &str, tag: &str, prob: f64, dist: TerminalDist) -> Self {
        let lhs = self.intern(lhs);
        self.rules.push(Rule {
            lhs,
            tag: tag.to_string(),
            prob,
            body: RuleBody::Terminal(dist),
        });
        self
    }

    pub fn build(self) -> Result<Grammar, GrammarError> {
        let start_name = self.start.ok_or(GrammarError::NoStart)?;
        let start = NonterminalId(
            self.names
                .iter()
                .position(|n| *n == start_name)
                .expect("start was interned"),
        );
        let mut by_tag = HashMap::new();
        let mut by_lhs = vec![Vec::new(); self.names.len()];
        for (i, r) in self.rules.iter().enumerate() {
            // First occurrence wins; duplicates surface in `validate`.
            by_tag.entry(r.tag.clone()).or_insert(i);
            by_lhs[r.lhs.0].push(i);
        }
        Ok(Grammar {
            names: self.names,
            rules: self.rules,
            start,
            by_tag,
            by_lhs,
            max_depth: DEFAULT_MAX_DEPTH,
        })
    }
}

/// One problem found by [`Grammar::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RuleMass { nonterminal: String, sum: f64 },
    TerminalMass { tag: String, sum: f64 },
    BadProbability { tag: String, prob: f64 },
    DuplicateTag(String),
    NoProductions(String),
    Unreachable(String),
    NonTerminating(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RuleMass { nonterminal, sum } => {
                write!(f, "P for {nonterminal} sums to {sum}")
            }
            Violation::TerminalMass { tag, sum } => write!(f, "Q for {tag} sums to {sum}"),
            Violation::BadProbability { tag, prob } => {
                write!(f, "P({tag}) = {prob} is outside (0, 1]")
            }
            Violation::DuplicateTag(t) => write!(f, "duplicate tag {t}"),
            Violation::NoProductions(n) => write!(f, "nonterminal {n} has no productions"),
            Violation::Unreachable(n) => write!(f, "useless symbol {n} (unreachable from start)"),
            Violation::NonTerminating(n) => {
                write!(f, "useless symbol {n} (no terminating derivation)")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "grammar is valid");
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

impl Grammar {
    pub fn builder() -> GrammarBuilder {
        GrammarBuilder::default()
    }

    pub fn with_max_depth(mut self, max_depth: usize) -> Self {
        self.max_depth = max_depth;
        self
    }

    pub fn start_symbol(&self) -> NonterminalId {
        self.start
    }

    pub fn nonterminal(&self, name: &str) -> Option<NonterminalId> {
        self.names.iter().position(|n| n == name).map(NonterminalId)
    }

    pub fn name(&self, id: NonterminalId) -> &str {
        &self.names[id.0]
    }

    pub fn nonterminal_count(&self) -> usize {
        self.names.len()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rules_for(&self, id: NonterminalId) -> impl Iterator<Item = &Rule> + '_ {
        self.by_lhs[id.0].iter().map(move |&i| &self.rules[i])
    }

    pub fn rule_by_tag(&self, tag: &str) -> Option<&Rule> {
        self.by_tag.get(tag).map(|&i| &self.rules[i])
    }

    /// Return a copy whose terminal distributions are replaced by `f`.
    pub fn map_terminals(&self, mut f: impl FnMut(&str, &TerminalDist) -> TerminalDist) -> Self {
        let mut g = self.clone();
        for r in &mut g.rules {
            if let RuleBody::Terminal(d) = &r.body {
                r.body = RuleBody::Terminal(f(&r.tag, d));
            }
        }
        g
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.rules {
            *seen.entry(&r.tag).or_default() += 1;
            if !(r.prob > 0.0 && r.prob <= 1.0) {
                violations.push(Violation::BadProbability {
                    tag: r.tag.clone(),
                    prob: r.prob,
                });
            }
            if let RuleBody::Terminal(TerminalDist::Discrete(table)) = &r.body {
                let sum: f64 = table.iter().map(|(_, p)| p).sum();
                if (sum - 1.0).abs() > NORMALIZATION_TOL {
                    violations.push(Violation::TerminalMass {
                        tag: r.tag.clone(),
                        sum,
                    });
                }
            }
        }
        for (tag, count) in seen {
            if count > 1 {
                violations.push(Violation::DuplicateTag(tag.to_string()));
            }
        }
        for (i, name) in self.names.iter().enumerate() {
            if self.by_lhs[i].is_empty() {
                violations.push(Violation::NoProductions(name.clone()));
                continue;
            }
            let sum: f64 = self.rules_for(NonterminalId(i)).map(|r| r.prob).sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                violations.push(Violation::RuleMass {
                    nonterminal: name.clone(),
                    sum,
                });
            }
        }

        let mut reachable = vec![false; self.names.len()];
        let mut stack = vec![self.start];
        reachable[self.start.0] = true;
        while let Some(n) = stack.pop() {
            for r in self.rules_for(n) {
                if let RuleBody::Children(kids) = &r.body {
                    for k in kids {
                        if !reachable[k.0] {
                            reachable[k.0] = true;
                            stack.push(*k);
                        }
                    }
                }
            }
        }

        let mut terminates = vec![false; self.names.len()];
        loop {
            let mut changed = false;
            for r in &self.rules {
                if terminates[r.lhs.0] {
                    continue;
                }
                let ok = match &r.body {
                    RuleBody::Terminal(_) => true,
                    RuleBody::Children(kids) => kids.iter().all(|k| terminates[k.0]),
                };
                if ok {
                    terminates[r.lhs.0] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        for (i, name) in self.names.iter().enumerate() {
            if !reachable[i] {
                violations.push(Violation::Unreachable(name.clone()));
            }
            if !terminates[i] && !self.by_lhs[i].is_empty() {
                violations.push(Violation::NonTerminating(name.clone()));
            }
        }
        ValidationReport { violations }
    }

    pub fn sample<R: Rng + ?Sized>(&self, from: NonterminalId, rng: &mut R) -> Result<Expr, SampleError> {
        self.sample_with_logp(from, rng).map(|(e, _)| e)
    }

    /// Draw an expression together with the log probability (density) of the
    /// choices made while drawing it.
    pub fn sample_with_logp<R: Rng + ?Sized>(
        &self,
        from: NonterminalId,
        rng: &mut R,
    ) -> Result<(Expr, f64), SampleError> {
        struct Frame<'g> {
            tag: &'g str,
            kids: &'g [NonterminalId],
            done: Vec<Expr>,
        }
        let mut logp = 0.0;
        let mut stack: Vec<Frame<'_>> = Vec::new();
        let mut pending = from;
        loop {
            if stack.len() >= self.max_depth {
                return Err(SampleError::DepthExceeded(self.max_depth));
            }
            let rule = self.choose_rule(pending, rng)?;
            logp += rule.prob.ln();
            let mut node = match &rule.body {
                RuleBody::Terminal(dist) => {
                    let atom = dist.sample(rng);
                    logp += dist.log_density(&atom);
                    Some(Expr::with_atoms(rule.tag.clone(), vec![atom]))
                }
                RuleBody::Children(kids) if kids.is_empty() => Some(Expr::leaf(rule.tag.clone())),
                RuleBody::Children(kids) => {
                    stack.push(Frame {
                        tag: &rule.tag,
                        kids,
                        done: Vec::with_capacity(kids.len()),
                    });
                    None
                }
            };
            // Fold finished nodes into their parents.
            while let Some(n) = node.take() {
                let Some(top) = stack.last_mut() else {
                    return Ok((n, logp));
                };
                top.done.push(n);
                if top.done.len() == top.kids.len() {
                    let f = stack.pop().expect("nonempty");
                    node = Some(Expr::with_children(f.tag, f.done));
                }
            }
            let top = stack.last().expect("an unfinished frame remains");
            pending = top.kids[top.done.len()];
        }
    }

    fn choose_rule<R: Rng + ?Sized>(&self, nt: NonterminalId, rng: &mut R) -> Result<&Rule, SampleError> {
        let idx = &self.by_lhs[nt.0];
        if idx.is_empty() {
            return Err(SampleError::NoProductions(self.names[nt.0].clone()));
        }
        let total: f64 = idx.iter().map(|&i| self.rules[i].prob).sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for &i in idx {
            acc += self.rules[i].prob;
            if u < acc {
                return Ok(&self.rules[i]);
            }
        }
        Ok(&self.rules[*idx.last().expect("nonempty")])
    }

    /// Log of the product of rule probabilities and terminal densities along
    /// the parse of `e` from `from`; `-inf` when `e` is not derivable.
    pub fn expand_logdensity(&self, from: NonterminalId, e: &Expr) -> f64 {
        let Some(rule) = self.rule_by_tag(e.tag()) else {
            return f64::NEG_INFINITY;
        };
        if rule.lhs != from {
            return f64::NEG_INFINITY;
        }
        match &rule.body {
            RuleBody::Terminal(dist) => {
                let mut atoms = e.atoms();
                match (atoms.next(), atoms.next(), e.child_count()) {
                    (Some(a), None, 0) => rule.prob.ln() + dist.log_density(a),
                    _ => f64::NEG_INFINITY,
                }
            }
            RuleBody::Children(kids) => {
                if e.child_count() != kids.len() || e.atoms().next().is_some() {
                    return f64::NEG_INFINITY;
                }
                let mut lp = rule.prob.ln();
                for (k, c) in kids.iter().zip(e.children()) {
                    lp += self.expand_logdensity(*k, c);
                    if lp == f64::NEG_INFINITY {
                        break;
                    }
                }
                lp
            }
        }
    }

    pub fn prior_logdensity(&self, e: &Expr) -> f64 {
        self.expand_logdensity(self.start, e)
    }

    /// Probability that a derivation from each nonterminal finishes within a
    /// given structural depth, for depths `0..=max_depth`. Terminal-symbol
    /// productions `(T s)` add no depth; every other production adds one.
    pub fn termination_by_depth(&self, max_depth: usize) -> Vec<Vec<f64>> {
        let n = self.names.len();
        // Depth-free terminal productions terminate immediately.
        let base: Vec<f64> = (0..n)
            .map(|i| {
                self.rules_for(NonterminalId(i))
                    .filter(|r| matches!(r.body, RuleBody::Terminal(_)))
                    .map(|r| r.prob)
                    .sum()
            })
            .collect();
        let mut table = vec![base.clone()];
        for d in 0..max_depth {
            let prev = &table[d];
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    base[i]
                        + self
                            .rules_for(NonterminalId(i))
                            .filter_map(|r| match &r.body {
                                RuleBody::Children(kids) => {
                                    Some(r.prob * kids.iter().map(|k| prev[k.0]).product::<f64>())
                                }
                                RuleBody::Terminal(_) => None,
                            })
                            .sum::<f64>()
                })
                .collect();
            table.push(next);
        }
        table
    }

    /// Every expression derivable from `from` with its log probability, for
    /// grammars whose language is finite and whose terminals are discrete.
    /// Returns `None` if the language is infinite, has more than `limit`
    /// members, or uses a continuous terminal.
    pub fn enumerate_language(&self, from: NonterminalId, limit: usize) -> Option<Vec<(Expr, f64)>> {
        self.enumerate_inner(from, limit, 0)
    }

    fn enumerate_inner(&self, from: NonterminalId, limit: usize, depth: usize) -> Option<Vec<(Expr, f64)>> {
        if depth > self.names.len() {
            return None;
        }
        let mut out = Vec::new();
        for r in self.rules_for(from) {
            match &r.body {
                RuleBody::Terminal(TerminalDist::Discrete(table)) => {
                    for (sym, p) in table {
                        out.push((
                            Expr::with_atoms(r.tag.clone(), vec![Atom::Sym(sym.clone())]),
                            r.prob.ln() + p.ln(),
                        ));
                    }
                }
                RuleBody::Terminal(_) => return None,
                RuleBody::Children(kids) => {
                    let mut partial: Vec<(Vec<Expr>, f64)> = vec![(Vec::new(), r.prob.ln())];
                    for k in kids {
                        let sub = self.enumerate_inner(*k, limit, depth + 1)?;
                        let mut grown = Vec::with_capacity(partial.len() * sub.len());
                        for (prefix, lp) in &partial {
                            for (e, slp) in &sub {
                                let mut v = prefix.clone();
                                v.push(e.clone());
                                grown.push((v, lp + slp));
                            }
                        }
                        if grown.len() > limit {
                            return None;
                        }
                        partial = grown;
                    }
                    out.extend(
                        partial
                            .into_iter()
                            .map(|(kids, lp)| (Expr::new(r.tag.clone(), kids.into_iter().map(Item::Expr).collect()), lp)),
                    );
                }
            }
            if out.len() > limit {
                return None;
            }
        }
        Some(out)
    }

    /// Expectation matrix of the equivalent normal-form grammar.
    ///
    /// Each production `N -> (T N_1 .. N_h)` with `h >= 1` becomes `N -> [T] R`
    /// where `[T]` is a fresh nonterminal emitting the tag and `R` is `N_1` when
    /// `h = 1`, otherwise a fresh nonterminal for the sequence `N_1 .. N_h`,
    /// itself split as `N_1 <N_2 .. N_h>` until pairs remain. Sequence
    /// nonterminals are shared between productions with the same tail.
    /// Terminal productions and childless productions contribute nothing.
    pub fn expectation_matrix(&self) -> ExpectationMatrix {
        let mut labels: Vec<String> = self.names.clone();
        // (row, column, weight) triples.
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        let mut seq_ids: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut pending: Vec<(usize, Vec<usize>)> = Vec::new();

        let mut seq_id = |seq: &[usize], labels: &mut Vec<String>, pending: &mut Vec<(usize, Vec<usize>)>| -> usize {
            if let Some(&id) = seq_ids.get(seq) {
                return id;
            }
            let label = format!(
                "<{}>",
                seq.iter().map(|&i| labels[i].clone()).collect::<Vec<_>>().join(" ")
            );
            labels.push(label);
            let id = labels.len() - 1;
            seq_ids.insert(seq.to_vec(), id);
            pending.push((id, seq.to_vec()));
            id
        };

        for r in &self.rules {
            let RuleBody::Children(kids) = &r.body else { continue };
            if kids.is_empty() {
                continue;
            }
            labels.push(format!("[{}]", r.tag));
            let tag_nt = labels.len() - 1;
            entries.push((r.lhs.0, tag_nt, r.prob));
            let rest = if kids.len() == 1 {
                kids[0].0
            } else {
                let seq: Vec<usize> = kids.iter().map(|k| k.0).collect();
                seq_id(&seq, &mut labels, &mut pending)
            };
            entries.push((r.lhs.0, rest, r.prob));
        }
        while let Some((id, seq)) = pending.pop() {
            if seq.len() == 2 {
                entries.push((id, seq[0], 1.0));
                entries.push((id, seq[1], 1.0));
            } else {
                entries.push((id, seq[0], 1.0));
                let tail = seq_id(&seq[1..], &mut labels, &mut pending);
                entries.push((id, tail, 1.0));
            }
        }

        let n = labels.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, j, w) in entries {
            m[(i, j)] += w;
        }
        ExpectationMatrix { labels, matrix: m }
    }

    /// Expectation matrix over the grammar's own nonterminals:
    /// `m_ij = sum_k p_ik * (occurrences of N_j in production k of N_i)`.
    pub fn direct_expectation_matrix(&self) -> ExpectationMatrix {
        let n = self.names.len();
        let mut m = DMatrix::zeros(n, n);
        for r in &self.rules {
            if let RuleBody::Children(kids) = &r.body {
                for k in kids {
                    m[(r.lhs.0, k.0)] += r.prob;
                }
            }
        }
        ExpectationMatrix {
            labels: self.names.clone(),
            matrix: m,
        }
    }

    pub fn check_consistency(&self) -> ConsistencyReport {
        let normal_form = self.expectation_matrix().spectrum();
        let direct = self.direct_expectation_matrix().spectrum();
        ConsistencyReport {
            consistent: normal_form.radius < 1.0,
            normal_form,
            direct,
        }
    }

    /// Text form accepted by [`Grammar::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = format!("start {}\n", self.names[self.start.0]);
        for r in &self.rules {
            out.push_str(&format!(
                "rule {} {} {}",
                self.names[r.lhs.0],
                r.tag,
                crate::sexpr::format_num(r.prob)
            ));
            match &r.body {
                RuleBody::Children(kids) => {
                    for k in kids {
                        out.push(' ');
                        out.push_str(&self.names[k.0]);
                    }
                }
                RuleBody::Terminal(TerminalDist::Gamma { shape, rate, .. }) => {
                    out.push_str(&format!(
                        " ~ gamma {} {}",
                        crate::sexpr::format_num(*shape),
                        crate::sexpr::format_num(*rate)
                    ));
                }
                RuleBody::Terminal(TerminalDist::Discrete(table)) => {
                    out.push_str(" ~ discrete");
                    for (s, p) in table {
                        out.push_str(&format!(" {}={}", s, crate::sexpr::format_num(*p)));
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parse the line-oriented grammar format:
    ///
    /// ```text
    /// # comment
    /// start K
    /// rule K + 0.5 K K
    /// rule K leaf 0.5 H
    /// rule H gamma 1 ~ gamma 1 1
    /// rule S sym 1 ~ discrete a=0.5 b=0.5
    /// ```
    pub fn from_text(text: &str) -> Result<Grammar, GrammarError> {
        let mut b = Grammar::builder();
        let mut has_start = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| GrammarError::Syntax {
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let words: Vec<&str> = line.split_whitespace().collect();
            match words[0] {
                "start" => {
                    if words.len() != 2 {
                        return Err(err("expected `start <nonterminal>`"));
                    }
                    b = b.start(words[1]);
                    has_start = true;
                }
                "rule" => {
                    if words.len() < 4 {
                        return Err(err("expected `rule <lhs> <tag> <prob> ...`"));
                    }
                    let prob: f64 = words[3].parse().map_err(|_| err("bad probability"))?;
                    let rest = &words[4..];
                    if rest.first() == Some(&"~") {
                        let dist = parse_terminal(&rest[1..]).map_err(|m| err(&m))?;
                        b = b.terminal(words[1], words[2], prob, dist);
                    } else {
                        b = b.rule(words[1], words[2], prob, rest);
                    }
                }
                other => return Err(err(&format!("unknown directive `{other}`"))),
            }
        }
        if !has_start {
            return Err(GrammarError::NoStart);
        }
        b.build()
    }

    /// Short content hash of the text form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_terminal(words: &[&str]) -> Result<TerminalDist, String> {
    match words.first() {
        Some(&"gamma") => {
            if words.len() != 3 {
                return Err("expected `~ gamma <shape> <rate>`".into());
            }
            let shape: f64 = words[1].parse().map_err(|_| "bad gamma shape")?;
            let rate: f64 = words[2].parse().map_err(|_| "bad gamma rate")?;
            if !(shape > 0.0 && rate > 0.0) {
                return Err("gamma parameters must be positive".into());
            }
            Ok(TerminalDist::gamma(shape, rate))
        }
        Some(&"discrete") => {
            let mut table = Vec::new();
            for w in &words[1..] {
                let (sym, p) = w.split_once('=').ok_or("expected `symbol=prob`")?;
                let p: f64 = p.parse().map_err(|_| "bad discrete probability")?;
                table.push((sym.to_string(), p));
            }
            if table.is_empty() {
                return Err("empty discrete table".into());
            }
            Ok(TerminalDist::Discrete(table))
        }
        _ => Err("expected `gamma` or `discrete` after `~`".into()),
    }
}

impl TagContext for Grammar {
    type Nonterminal = NonterminalId;

    fn start(&self) -> NonterminalId {
        self.start
    }

    fn child_nonterminal(&self, parent_tag: &str, index: usize) -> Option<NonterminalId> {
        match &self.rule_by_tag(parent_tag)?.body {
            RuleBody::Children(kids) if index >= 1 => kids.get(index - 1).copied(),
            _ => None,
        }
    }

    fn produces(&self, nonterminal: NonterminalId, tag: &str) -> bool {
        self.rule_by_tag(tag).is_some_and(|r| r.lhs == nonterminal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationMatrix {
    pub labels: Vec<String>,
    pub matrix: DMatrix<f64>,
}

/// How the spectral radius was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadiusMethod {
    PowerIteration,
    Eigensolver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub radius: f64,
    /// Moduli of all eigenvalues, largest first.
    pub moduli: Vec<f64>,
    pub method: RadiusMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    /// Spectrum of the normal-form expectation matrix; decides consistency.
    pub normal_form: Spectrum,
    /// Spectrum of the matrix over the original nonterminals.
    pub direct: Spectrum,
    pub consistent: bool,
}

impl ConsistencyReport {
    pub fn radius(&self) -> f64 {
        self.normal_form.radius
    }
}

impl ExpectationMatrix {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn entry(&self, row: &str, col: &str) -> Option<f64> {
        Some(self.matrix[(self.index(row)?, self.index(col)?)])
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn spectrum(&self) -> Spectrum {
        let moduli = eigen_moduli(&self.matrix);
        match power_iteration(&self.matrix) {
            Some(radius) => Spectrum {
                radius,
                moduli,
                method: RadiusMethod::PowerIteration,
            },
            None => Spectrum {
                radius: moduli.first().copied().unwrap_or(0.0),
                moduli,
                method: RadiusMethod::Eigensolver,
            },
        }
    }
}

fn eigen_moduli(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut moduli: Vec<f64> = m
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    moduli
}

/// Perron root of a nonnegative matrix by power iteration from the all-ones
/// vector. Returns `None` when the iteration does not settle (several
/// eigenvalues share the top modulus), leaving the eigensolver to decide.
fn power_iteration(m: &DMatrix<f64>) -> Option<f64> {
    let n = m.nrows();
    if n == 0 {
        return Some(0.0);
    }
    let mut v = nalgebra::DVector::from_element(n, 1.0 / n as f64);
    let mut prev = f64::NAN;
    let mut stable = 0;
    for _ in 0..20_000 {
        let w = m * &v;
        let norm: f64 = w.iter().map(|x| x.abs()).sum();
        if norm == 0.0 {
            return Some(0.0);
        }
        let est = norm / v.iter().map(|x| x.abs()).sum::<f64>();
        v = w / norm;
        if (est - prev).abs() <= 1e-14 * est.max(1e-300) {
            stable += 1;
            if stable >= 5 {
                return Some(est);
            }
        } else {
            stable = 0;
        }
        prev = est;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sexpr::{parse, Address};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn branching(p_leaf: f64) -> Grammar {
        Grammar::builder()
            .start("K")
            .rule("K", "a", p_leaf, &[])
            .rule("K", "+", 1.0 - p_leaf, &["K", "K"])
            .build()
            .unwrap()
    }

    #[test]
    fn unnormalized_rules_are_reported() {
        let g = Grammar::builder()
            .start("K")
            .rule("K", "+", 0.5, &["K", "K"])
            .rule("K", "c", 0.4, &[])
            .build()
            .unwrap();
        let report = g.validate();
        assert!(!report.is_valid());
        let text = report.violations[0].to_string();
        assert!(text.starts_with("P for K sums to 0.9"), "{text}");
    }

    #[test]
    fn useless_symbols_are_reported() {
        let g = Grammar::builder()
            .start("K")
            .rule("K", "c", 1.0, &[])
            .rule("X", "x", 1.0, &[])
            .build()
            .unwrap();
        let report = g.validate();
        assert_eq!(report.violations, vec![Violation::Unreachable("X".into())]);
        assert_eq!(report.violations[0].to_string(), "useless symbol X (unreachable from start)");

        let g = Grammar::builder()
            .start("K")
            .rule("K", "loop", 1.0, &["K"])
            .build()
            .unwrap();
        assert!(g
            .validate()
            .violations
            .contains(&Violation::NonTerminating("K".into())));
    }

    #[test]
    fn duplicate_tags_and_bad_tables() {
        let g = Grammar::builder()
            .start("K")
            .rule("K", "c", 0.5, &[])
            .terminal("K", "c", 0.5, TerminalDist::discrete([("x", 0.3), ("y", 0.3)]))
            .build()
            .unwrap();
        let v = g.validate().violations;
        assert!(v.contains(&Violation::DuplicateTag("c".into())));
        assert!(v.iter().any(|x| matches!(x, Violation::TerminalMass { .. })));
    }

    #[test]
    fn degenerate_grammar_always_samples_leaf() {
        let g = Grammar::builder().start("K").rule("K", "leaf", 1.0, &[]).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(g.sample(g.start_symbol(), &mut rng).unwrap().to_string(), "(leaf)");
        }
    }

    #[test]
    fn depth_guard_trips_on_supercritical_grammar() {
        let g = branching(0.01).with_max_depth(50);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tripped = false;
        for _ in 0..20 {
            if let Err(SampleError::DepthExceeded(50)) = g.sample(g.start_symbol(), &mut rng) {
                tripped = true;
                break;
            }
        }
        assert!(tripped);
    }

    #[test]
    fn sampled_logp_matches_density() {
        let g = branching(0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (e, lp) = g.sample_with_logp(g.start_symbol(), &mut rng).unwrap();
            assert!((g.prior_logdensity(&e) - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn density_is_additive_over_children() {
        let g = branching(0.6);
        let e = parse("(+ (a) (+ (a) (a)))").unwrap();
        let want = 0.4f64.ln() + 0.6f64.ln() + (0.4f64.ln() + 0.6f64.ln() + 0.6f64.ln());
        assert!((g.prior_logdensity(&e) - want).abs() < 1e-12);
        assert_eq!(g.prior_logdensity(&parse("(b)").unwrap()), f64::NEG_INFINITY);
        assert_eq!(g.prior_logdensity(&parse("(+ (a))").unwrap()), f64::NEG_INFINITY);
    }

    #[test]
    fn branching_radius_by_hand() {
        // K -> a | (+ K K)_{0.6}: the direct matrix is [1.2]; the normal form
        // K -> [+] <K K>, <K K> -> K K squares the cycle into 0.6 * 2.
        let r = branching(0.4).check_consistency();
        assert!((r.direct.radius - 1.2).abs() < 1e-12);
        assert!((r.normal_form.radius - 1.2f64.sqrt()).abs() < 1e-9);
        assert!(!r.consistent);

        let r = Grammar::builder().start("K").rule("K", "a", 1.0, &[]).build().unwrap().check_consistency();
        assert_eq!(r.radius(), 0.0);
        assert!(r.consistent);
    }

    #[test]
    fn non_recursive_grammar_is_nilpotent() {
        let g = Grammar::builder()
            .start("S")
            .rule("S", "s", 1.0, &["A", "B"])
            .rule("A", "a", 1.0, &["B"])
            .rule("B", "b", 1.0, &[])
            .build()
            .unwrap();
        let r = g.check_consistency();
        assert_eq!(r.radius(), 0.0);
        // Defective zero eigenvalues come back from the Schur form with O(sqrt(eps)) noise.
        assert!(r.normal_form.moduli.iter().all(|&x| x < 1e-6));
    }

    #[test]
    fn enumeration_of_finite_language() {
        let g = Grammar::builder()
            .start("S")
            .rule("S", "s", 1.0, &["K", "K"])
            .rule("K", "a", 0.5, &[])
            .rule("K", "b", 0.5, &[])
            .build()
            .unwrap();
        let lang = g.enumerate_language(g.start_symbol(), 100).unwrap();
        assert_eq!(lang.len(), 4);
        let total: f64 = lang.iter().map(|(_, lp)| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(branching(0.5).enumerate_language(NonterminalId(0), 1000).is_none());
    }

    #[test]
    fn text_format_round_trips() {
        let g = Grammar::builder()
            .start("K")
            .rule("K", "+", 0.25, &["K", "K"])
            .rule("K", "leaf", 0.5, &["H"])
            .terminal("K", "sym", 0.25, TerminalDist::discrete([("x", 0.5), ("y", 0.5)]))
            .terminal("H", "gamma", 1.0, TerminalDist::gamma(1.0, 1.0))
            .build()
            .unwrap();
        let text = g.to_text();
        let back = Grammar::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.fingerprint(), g.fingerprint());
        assert!(matches!(
            Grammar::from_text("start K\nrule K a zero"),
            Err(GrammarError::Syntax { line: 2, .. })
        ));
        assert!(matches!(Grammar::from_text("rule K a 1"), Err(GrammarError::NoStart)));
    }

    #[test]
    fn sever_and_fill_through_grammar() {
        let g = branching(0.5);
        let e = parse("(+ (a) (+ (a) (a)))").unwrap();
        let (nt, hole) = e.sever(&g, &Address::root()).unwrap();
        assert_eq!(nt, g.start_symbol());
        assert_eq!(hole.to_string(), "(□)");
        let (nt, hole) = e.sever(&g, &Address(vec![2])).unwrap();
        assert_eq!(g.name(nt), "K");
        assert_eq!(hole.to_string(), "(+ (a) (□))");
        assert!(e.sever(&g, &Address(vec![3])).is_none());
        assert!(hole.fill(&g, parse("(zzz)").unwrap()).is_err());
    }
}
