//! The synthesis engine: prior initialization, the sever/resimulate/accept
//! transition over parse trees, independent chains, and ensembles.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::grammar::{Grammar, RuleBody, SampleError};
use crate::sexpr::{parse, Address, Expr, ParseError};

/// Default number of prior draws tried before giving up on initialization.
pub const DEFAULT_RETRY_BUDGET: usize = 1_000_000;

/// Scores programs against a dataset.
pub trait LikelihoodModel: Sync {
    type Data: ?Sized + Sync;

    /// Log-likelihood of `program`; `-inf` encodes zero likelihood.
    fn log_likelihood(&self, program: &Expr, data: &Self::Data) -> f64;

    /// Log of a finite upper bound on the likelihood for this dataset.
    fn log_bound(&self, data: &Self::Data) -> f64;
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no prior draw with nonzero likelihood after {0} attempts")]
    RetryBudgetExhausted(usize),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Which nodes a transition may pick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveFilter {
    All,
    /// Nodes produced by non-terminal productions (kernel structure).
    Structure,
    /// Nodes produced by terminal-symbol productions (parameters).
    Parameters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveSchedule {
    Uniform,
    /// Repeating blocks of structure-only steps followed by parameter-only steps.
    Alternating { structure_steps: usize, param_steps: usize },
}

impl MoveSchedule {
    pub fn filter_at(&self, step: usize) -> MoveFilter {
        match *self {
            MoveSchedule::Uniform => MoveFilter::All,
            MoveSchedule::Alternating {
                structure_steps,
                param_steps,
            } => {
                let period = structure_steps + param_steps;
                if period == 0 || step % period < structure_steps {
                    MoveFilter::Structure
                } else {
                    MoveFilter::Parameters
                }
            }
        }
    }
}

impl fmt::Display for MoveSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MoveSchedule::Uniform => f.write_str("uniform"),
            MoveSchedule::Alternating {
                structure_steps,
                param_steps,
            } => write!(f, "alternating:{structure_steps}:{param_steps}"),
        }
    }
}

impl std::str::FromStr for MoveSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "uniform" {
            return Ok(MoveSchedule::Uniform);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["alternating", a, b] => Ok(MoveSchedule::Alternating {
                structure_steps: a.parse().map_err(|_| format!("bad step count `{a}`"))?,
                param_steps: b.parse().map_err(|_| format!("bad step count `{b}`"))?,
            }),
            _ => Err(format!("unknown schedule `{s}` (use `uniform` or `alternating:S:P`)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub proposal: Expr,
    pub proposal_loglik: f64,
    pub log_accept_ratio: f64,
    pub address: Address,
}

/// One MCMC trajectory.
#[derive(Debug, Clone)]
pub struct Chain {
    pub current: Expr,
    pub current_loglik: f64,
    pub steps_taken: usize,
    pub accepts: usize,
    pub rng: ChaCha8Rng,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        if self.steps_taken == 0 {
            0.0
        } else {
            self.accepts as f64 / self.steps_taken as f64
        }
    }
}

/// Binds a grammar, a likelihood model and a dataset.
pub struct Synthesizer<'a, L: LikelihoodModel> {
    pub grammar: &'a Grammar,
    pub likelihood: &'a L,
    pub data: &'a L::Data,
    pub retry_budget: usize,
}

impl<'a, L: LikelihoodModel> Synthesizer<'a, L> {
    pub fn new(grammar: &'a Grammar, likelihood: &'a L, data: &'a L::Data) -> Self {
        Synthesizer {
            grammar,
            likelihood,
            data,
            retry_budget: DEFAULT_RETRY_BUDGET,
        }
    }

    pub fn with_retry_budget(mut self, budget: usize) -> Self {
        self.retry_budget = budget;
        self
    }

    pub fn loglik(&self, e: &Expr) -> f64 {
        self.likelihood.log_likelihood(e, self.data)
    }

    /// Draw from the prior until the likelihood is nonzero. Returns the
    /// program, its log-likelihood, and the number of draws used.
    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Expr, f64, usize), SynthError> {
        for attempt in 1..=self.retry_budget {
            let e = self.grammar.sample(self.grammar.start_symbol(), rng)?;
            let ll = self.loglik(&e);
            if ll > f64::NEG_INFINITY {
                return Ok((e, ll, attempt));
            }
        }
        Err(SynthError::RetryBudgetExhausted(self.retry_budget))
    }

    /// Addresses eligible under `filter`.
    pub fn eligible(&self, e: &Expr, filter: MoveFilter) -> Vec<Address> {
        match filter {
            MoveFilter::All => e.addresses(),
            _ => e
                .nodes()
                .into_iter()
                .filter(|(_, node)| {
                    let terminal = self
                        .grammar
                        .rule_by_tag(node.tag())
                        .is_some_and(|r| matches!(r.body, RuleBody::Terminal(_)));
                    (filter == MoveFilter::Parameters) == terminal
                })
                .map(|(a, _)| a)
                .collect(),
        }
    }

    /// Sever a uniformly chosen eligible node, regrow it from the prior, and
    /// score the result. `None` when no node is eligible.
    pub fn propose<R: Rng + ?Sized>(
        &self,
        e: &Expr,
        loglik: f64,
        filter: MoveFilter,
        rng: &mut R,
    ) -> Result<Option<Proposal>, SynthError> {
        let nodes = self.eligible(e, filter);
        if nodes.is_empty() {
            return Ok(None);
        }
        let address = nodes[rng.random_range(0..nodes.len())].clone();
        let (nt, hole) = e.sever(self.grammar, &address).expect("eligible address is valid");
        let sub = self.grammar.sample(nt, rng)?;
        let proposal = hole.fill(self.grammar, sub).expect("sampled subtree matches its nonterminal");
        let proposal_loglik = self.loglik(&proposal);
        let new_count = self.eligible(&proposal, filter).len();
        let log_accept_ratio =
            (nodes.len() as f64).ln() - (new_count as f64).ln() + proposal_loglik - loglik;
        Ok(Some(Proposal {
            proposal,
            proposal_loglik,
            log_accept_ratio,
            address,
        }))
    }

    /// One Metropolis-Hastings step; returns whether the proposal was accepted.
    pub fn transition(&self, chain: &mut Chain, filter: MoveFilter) -> Result<bool, SynthError> {
        chain.steps_taken += 1;
        let Some(p) = self.propose(&chain.current, chain.current_loglik, filter, &mut chain.rng)? else {
            return Ok(false);
        };
        let u: f64 = chain.rng.random();
        if p.log_accept_ratio >= 0.0 || u.ln() < p.log_accept_ratio {
            chain.current = p.proposal;
            chain.current_loglik = p.proposal_loglik;
            chain.accepts += 1;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn start_chain(&self, seed: u64) -> Result<Chain, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (current, current_loglik, _) = self.initialize(&mut rng)?;
        Ok(Chain {
            current,
            current_loglik,
            steps_taken: 0,
            accepts: 0,
            rng,
        })
    }

    pub fn run_chain(&self, seed: u64, steps: usize, schedule: MoveSchedule) -> Result<Chain, SynthError> {
        let mut chain = self.start_chain(seed)?;
        for step in 0..steps {
            self.transition(&mut chain, schedule.filter_at(step))?;
        }
        Ok(chain)
    }

    /// Exact one-step transition distribution from `e`, for grammars whose
    /// language from every nonterminal is finite with discrete terminals.
    /// Keys are printed programs. `None` if enumeration is impossible.
    pub fn exact_transition(&self, e: &Expr, filter: MoveFilter) -> Option<BTreeMap<String, f64>> {
        let ll = self.loglik(e);
        let nodes = self.eligible(e, filter);
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        let mut moved = 0.0;
        if nodes.is_empty() {
            out.insert(e.to_string(), 1.0);
            return Some(out);
        }
        let pick = 1.0 / nodes.len() as f64;
        for a in &nodes {
            let (nt, hole) = e.sever(self.grammar, a)?;
            for (sub, lp) in self.grammar.enumerate_language(nt, 100_000)? {
                let next = hole.fill(self.grammar, sub).ok()?;
                let next_ll = self.loglik(&next);
                let ratio = (nodes.len() as f64).ln() - (self.eligible(&next, filter).len() as f64).ln()
                    + next_ll
                    - ll;
                let accept = ratio.min(0.0).exp();
                let mass = pick * lp.exp() * accept;
                *out.entry(next.to_string()).or_default() += mass;
                moved += mass;
            }
        }
        *out.entry(e.to_string()).or_default() += 1.0 - moved;
        Some(out)
    }
}

/// A kernel the chain runner can drive: initialization, one step, scoring.
pub trait ChainKernel: Sync {
    type State: Send;

    fn init(&self, rng: &mut ChaCha8Rng) -> Result<Self::State, SynthError>;
    /// Advance one step; the step index lets kernels follow a schedule.
    fn step(&self, state: &mut Self::State, step: usize, rng: &mut ChaCha8Rng) -> Result<bool, SynthError>;
    fn member(&self, state: &Self::State) -> Member;
}

/// A [`Synthesizer`] driven by a move schedule.
pub struct ScheduledSynthesizer<'a, L: LikelihoodModel> {
    pub synth: Synthesizer<'a, L>,
    pub schedule: MoveSchedule,
}

impl<L: LikelihoodModel> ChainKernel for ScheduledSynthesizer<'_, L> {
    type State = (Expr, f64);

    fn init(&self, rng: &mut ChaCha8Rng) -> Result<Self::State, SynthError> {
        let (e, ll, _) = self.synth.initialize(rng)?;
        Ok((e, ll))
    }

    fn step(&self, state: &mut Self::State, step: usize, rng: &mut ChaCha8Rng) -> Result<bool, SynthError> {
        let Some(p) = self.synth.propose(&state.0, state.1, self.schedule.filter_at(step), rng)? else {
            return Ok(false);
        };
        let u: f64 = rng.random();
        if p.log_accept_ratio >= 0.0 || u.ln() < p.log_accept_ratio {
            *state = (p.proposal, p.proposal_loglik);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn member(&self, state: &Self::State) -> Member {
        Member {
            program: state.0.clone(),
            log_prior: self.synth.grammar.prior_logdensity(&state.0),
            log_lik: state.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub chains: usize,
    pub steps: usize,
    pub seed: u64,
    pub schedule: MoveSchedule,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            chains: 60,
            steps: 2000,
            seed: 0,
            schedule: MoveSchedule::Uniform,
        }
    }
}

/// Generator of chain `index`: the run seed's ChaCha key, on its own stream.
pub fn chain_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Run independent chains in parallel and keep each chain's final state.
pub fn run_chains<K: ChainKernel>(kernel: &K, chains: usize, steps: usize, seed: u64) -> Result<Vec<(Member, ChainStats)>, SynthError> {
    if chains == 0 {
        return Err(SynthError::Config("chains must be at least 1".into()));
    }
    (0..chains)
        .into_par_iter()
        .map(|i| {
            let mut rng = chain_rng(seed, i);
            let mut state = kernel.init(&mut rng)?;
            let mut accepts = 0;
            for step in 0..steps {
                if kernel.step(&mut state, step, &mut rng)? {
                    accepts += 1;
                }
            }
            Ok((kernel.member(&state), ChainStats { steps, accepts }))
        })
        .collect()
}

/// Run the grammar-based synthesis loop and collect an ensemble.
pub fn synthesize<L: LikelihoodModel>(
    grammar: &Grammar,
    likelihood: &L,
    data: &L::Data,
    config: &SynthConfig,
    dsl: &str,
) -> Result<Ensemble, SynthError> {
    let kernel = ScheduledSynthesizer {
        synth: Synthesizer::new(grammar, likelihood, data),
        schedule: config.schedule,
    };
    let results = run_chains(&kernel, config.chains, config.steps, config.seed)?;
    Ok(Ensemble::from_runs(
        results,
        Provenance {
            dsl: dsl.to_string(),
            seed: config.seed,
            chains: config.chains,
            steps: config.steps,
            schedule: config.schedule.to_string(),
            grammar_hash: grammar.fingerprint(),
            extra: BTreeMap::new(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChainStats {
    pub steps: usize,
    pub accepts: usize,
}

/// One synthesized program with its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub program: Expr,
    pub log_prior: f64,
    pub log_lik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub dsl: String,
    pub seed: u64,
    pub chains: usize,
    pub steps: usize,
    pub schedule: String,
    pub grammar_hash: String,
    /// Further DSL-specific header fields, written in key order.
    pub extra: BTreeMap<String, String>,
}

/// Final programs of independent chains.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Member>,
    pub provenance: Provenance,
    pub stats: Vec<ChainStats>,
}

#[derive(Debug, Error)]
pub enum EnsembleFormatError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Program { line: usize, source: ParseError },
    #[error("missing header field `{0}`")]
    MissingField(&'static str),
}

impl Ensemble {
    pub fn from_runs(runs: Vec<(Member, ChainStats)>, provenance: Provenance) -> Self {
        let (members, stats) = runs.into_iter().unzip();
        Ensemble {
            members,
            provenance,
            stats,
        }
    }

    pub fn programs(&self) -> impl Iterator<Item = &Expr> + '_ {
        self.members.iter().map(|m| &m.program)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let steps: usize = self.stats.iter().map(|s| s.steps).sum();
        let accepts: usize = self.stats.iter().map(|s| s.accepts).sum();
        if steps == 0 {
            0.0
        } else {
            accepts as f64 / steps as f64
        }
    }

    /// Text envelope: `#key: value` header lines followed by one
    /// `logprior<TAB>loglik<TAB>program` line per member.
    pub fn to_text(&self) -> String {
        let p = &self.provenance;
        let mut out = String::new();
        out.push_str(&format!("#dsl: {}\n", p.dsl));
        out.push_str(&format!("#seed: {}\n", p.seed));
        out.push_str(&format!("#chains: {}\n", p.chains));
        out.push_str(&format!("#steps: {}\n", p.steps));
        out.push_str(&format!("#schedule: {}\n", p.schedule));
        out.push_str(&format!("#grammar-hash: {}\n", p.grammar_hash));
        let accepts: Vec<String> = self.stats.iter().map(|s| s.accepts.to_string()).collect();
        out.push_str(&format!("#accepts: {}\n", accepts.join(",")));
        for (k, v) in &p.extra {
            out.push_str(&format!("#{k}: {v}\n"));
        }
        for m in &self.members {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                format_score(m.log_prior),
                format_score(m.log_lik),
                m.program
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Ensemble, EnsembleFormatError> {
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut members = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.split_once(':').ok_or(EnsembleFormatError::Line {
                    line: lineno,
                    msg: "header lines look like `#key: value`".into(),
                })?;
                header.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let bad = |msg: &str| EnsembleFormatError::Line {
                line: lineno,
                msg: msg.to_string(),
            };
            let lp = parse_score(fields.next().ok_or_else(|| bad("missing log-prior"))?)
                .ok_or_else(|| bad("bad log-prior"))?;
            let ll = parse_score(fields.next().ok_or_else(|| bad("missing log-likelihood"))?)
                .ok_or_else(|| bad("bad log-likelihood"))?;
            let prog = fields.next().ok_or_else(|| bad("missing program"))?;
            let program = parse(prog).map_err(|source| EnsembleFormatError::Program { line: lineno, source })?;
            members.push(Member {
                program,
                log_prior: lp,
                log_lik: ll,
            });
        }
        let field = |k: &'static str| header.get(k).cloned().ok_or(EnsembleFormatError::MissingField(k));
        let num = |k: &'static str| -> Result<u64, EnsembleFormatError> {
            field(k)?.parse().map_err(|_| EnsembleFormatError::Line {
                line: 0,
                msg: format!("header `{k}` is not an integer"),
            })
        };
        let steps = num("steps")? as usize;
        let stats = match header.get("accepts") {
            Some(s) if !s.is_empty() => s
                .split(',')
                .map(|a| {
                    a.parse().map(|accepts| ChainStats { steps, accepts }).map_err(|_| EnsembleFormatError::Line {
                        line: 0,
                        msg: "bad accepts list".into(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            _ => Vec::new(),
        };
        Ok(Ensemble {
            members,
            provenance: Provenance {
                dsl: field("dsl")?,
                seed: num("seed")?,
                chains: num("chains")? as usize,
                steps,
                schedule: header.get("schedule").cloned().unwrap_or_else(|| "uniform".into()),
                grammar_hash: field("grammar-hash")?,
                extra: header
                    .iter()
                    .filter(|(k, _)| !KNOWN_HEADER.contains(&k.as_str()))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
            },
            stats,
        })
    }
}

const KNOWN_HEADER: [&str; 7] = ["dsl", "seed", "chains", "steps", "schedule", "grammar-hash", "accepts"];

fn format_score(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        // Debug formatting of f64 is the shortest exact round-trip form.
        format!("{x:?}")
    }
}

fn parse_score(s: &str) -> Option<f64> {
    if s == "-inf" {
        Some(f64::NEG_INFINITY)
    } else {
        s.parse().ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sexpr::parse;

    struct Table(Vec<(&'static str, f64)>);

    impl LikelihoodModel for Table {
        type Data = ();
        fn log_likelihood(&self, program: &Expr, _: &()) -> f64 {
            let s = program.to_string();
            self.0
                .iter()
                .find(|(p, _)| *p == s)
                .map_or(f64::NEG_INFINITY, |(_, l)| l.ln())
        }
        fn log_bound(&self, _: &()) -> f64 {
            self.0.iter().map(|(_, l)| l.ln()).fold(f64::NEG_INFINITY, f64::max)
        }
    }

    struct Flat;
    impl LikelihoodModel for Flat {
        type Data = ();
        fn log_likelihood(&self, _: &Expr, _: &()) -> f64 {
            0.0
        }
        fn log_bound(&self, _: &()) -> f64 {
            0.0
        }
    }

    fn two_leaves() -> Grammar {
        Grammar::builder()
            .start("K")
            .rule("K", "a", 0.5, &[])
            .rule("K", "b", 0.5, &[])
            .build()
            .unwrap()
    }

    #[test]
    fn acceptance_ratio_on_two_leaves() {
        let g = two_leaves();
        let lik = Table(vec![("(a)", 1.0), ("(b)", 3.0)]);
        let s = Synthesizer::new(&g, &lik, &());
        let a = parse("(a)").unwrap();
        let b = parse("(b)").unwrap();
        let ta = s.exact_transition(&a, MoveFilter::All).unwrap();
        let tb = s.exact_transition(&b, MoveFilter::All).unwrap();
        // Proposal picks b with prob 1/2; accept 1 from a, 1/3 from b.
        assert!((ta["(b)"] - 0.5).abs() < 1e-12);
        assert!((tb["(a)"] - 0.5 / 3.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut saw_up = false;
        for _ in 0..50 {
            let p = s.propose(&a, 0.0, MoveFilter::All, &mut rng).unwrap().unwrap();
            if p.proposal == b {
                assert!((p.log_accept_ratio - 3f64.ln()).abs() < 1e-12);
                saw_up = true;
            } else {
                assert_eq!(p.log_accept_ratio, 0.0);
            }
        }
        assert!(saw_up);
    }

    #[test]
    fn identical_proposal_always_accepts() {
        let g = Grammar::builder().start("K").rule("K", "only", 1.0, &[]).build().unwrap();
        let s = Synthesizer::new(&g, &Flat, &());
        let mut chain = s.start_chain(1).unwrap();
        for _ in 0..20 {
            assert!(s.transition(&mut chain, MoveFilter::All).unwrap());
        }
        assert_eq!(chain.accepts, 20);
        assert_eq!(chain.steps_taken, 20);
    }

    #[test]
    fn initialization_retries_geometrically() {
        // Half the language has zero likelihood: mean draws should be 2.
        let g = two_leaves();
        let lik = Table(vec![("(a)", 1.0)]);
        let s = Synthesizer::new(&g, &lik, &());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let total: usize = (0..n).map(|_| s.initialize(&mut rng).unwrap().2).sum();
        let mean = total as f64 / n as f64;
        // Geometric(1/2): sd of a draw is sqrt(2), so 4 SE is about 0.04.
        assert!((mean - 2.0).abs() < 0.04, "mean retries {mean}");
    }

    #[test]
    fn exhausted_retry_budget_is_an_error() {
        let g = two_leaves();
        let lik = Table(vec![]);
        let s = Synthesizer::new(&g, &lik, &()).with_retry_budget(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(s.initialize(&mut rng), Err(SynthError::RetryBudgetExhausted(1))));
    }

    #[test]
    fn schedules_parse_and_alternate() {
        let s: MoveSchedule = "alternating:2:3".parse().unwrap();
        let filters: Vec<_> = (0..6).map(|i| s.filter_at(i)).collect();
        assert_eq!(
            filters,
            vec![
                MoveFilter::Structure,
                MoveFilter::Structure,
                MoveFilter::Parameters,
                MoveFilter::Parameters,
                MoveFilter::Parameters,
                MoveFilter::Structure
            ]
        );
        assert_eq!(s.to_string().parse::<MoveSchedule>().unwrap(), s);
        assert!("sideways".parse::<MoveSchedule>().is_err());
    }

    #[test]
    fn steps_zero_gives_prior_draws_and_is_deterministic() {
        let g = two_leaves();
        let lik = Table(vec![("(a)", 1.0), ("(b)", 2.0)]);
        let cfg = SynthConfig {
            chains: 8,
            steps: 0,
            seed: 42,
            schedule: MoveSchedule::Uniform,
        };
        let e1 = synthesize(&g, &lik, &(), &cfg, "micro").unwrap();
        let e2 = synthesize(&g, &lik, &(), &cfg, "micro").unwrap();
        assert_eq!(e1.len(), 8);
        assert_eq!(e1.to_text(), e2.to_text());
        assert!(e1.members.iter().all(|m| m.log_lik > f64::NEG_INFINITY));
    }

    #[test]
    fn ensemble_text_round_trips() {
        let g = two_leaves();
        let lik = Table(vec![("(a)", 0.3), ("(b)", 2.0)]);
        let cfg = SynthConfig {
            chains: 5,
            steps: 10,
            seed: 9,
            schedule: MoveSchedule::Uniform,
        };
        let mut e = synthesize(&g, &lik, &(), &cfg, "micro").unwrap();
        e.provenance.extra.insert("rows".into(), "12".into());
        let back = Ensemble::from_text(&e.to_text()).unwrap();
        assert_eq!(back, e);
        assert!(matches!(
            Ensemble::from_text("#dsl: gp\n"),
            Err(EnsembleFormatError::MissingField(_))
        ));
    }

    #[test]
    fn zero_chains_rejected() {
        let g = two_leaves();
        let cfg = SynthConfig {
            chains: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(synthesize(&g, &Flat, &(), &cfg, "x"), Err(SynthError::Config(_))));
    }
}
