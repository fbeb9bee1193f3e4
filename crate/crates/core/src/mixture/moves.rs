//! Metropolis-Hastings moves over mixture programs.
//!
//! Every move proposes a new program together with the log densities of the
//! forward and reverse proposals, and is accepted with the usual ratio
//! against prior times likelihood. Moves that would break an invariant
//! (a weight dropping below 1, a missing destination) are rejected in place.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use super::program::{dirichlet_log_density, ln_factorial, sample_dirichlet, Block, Cluster, Dist, Hyper, MixtureProgram};
use super::table::{ColumnType, Table};
use crate::synthesis::{run_chains, ChainKernel, Ensemble, Member, Provenance, SynthError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MoveKind {
    Column,
    SplitMerge,
    Weight,
    Parameter,
    Refresh,
}

const MOVE_TABLE: [(MoveKind, f64); 5] = [
    (MoveKind::Column, 0.2),
    (MoveKind::SplitMerge, 0.15),
    (MoveKind::Weight, 0.15),
    (MoveKind::Parameter, 0.3),
    (MoveKind::Refresh, 0.2),
];

/// A block with its cached log prior plus log likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBlock {
    pub block: Block,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub blocks: Vec<ScoredBlock>,
    pub n: usize,
}

impl MixtureState {
    pub fn program(&self) -> MixtureProgram {
        MixtureProgram {
            blocks: self.blocks.iter().map(|b| b.block.clone()).collect(),
            n: self.n,
        }
    }

    pub fn log_joint(&self, m: usize) -> f64 {
        -ln_factorial(m) + self.blocks.iter().map(|b| b.score).sum::<f64>()
    }
}

struct Candidate {
    blocks: Vec<Block>,
    log_q_fwd: f64,
    log_q_rev: f64,
}

/// Weighted sufficient statistics of one column.
#[derive(Debug, Clone)]
enum Stats {
    Numeric { w: f64, mean: f64, sd: f64 },
    Count { w: f64, mean: f64 },
    Nominal { w: f64, counts: Vec<f64> },
}

impl Stats {
    fn weight(&self) -> f64 {
        match self {
            Stats::Numeric { w, .. } | Stats::Count { w, .. } | Stats::Nominal { w, .. } => *w,
        }
    }
}

fn ln_normal(x: f64, mean: f64, sd: f64) -> f64 {
    -0.5 * (2.0 * PI).ln() - sd.ln() - (x - mean).powi(2) / (2.0 * sd * sd)
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// The mixture synthesizer: a [`ChainKernel`] whose step is a sweep of
/// randomly chosen MH moves.
pub struct MixtureSampler<'a> {
    pub table: &'a Table,
    pub hyper: Hyper,
    pub moves_per_step: usize,
    /// Largest cluster count proposed for a fresh block.
    pub max_fresh_clusters: usize,
    col_sd: Vec<f64>,
}

impl<'a> MixtureSampler<'a> {
    pub fn new(table: &'a Table, hyper: Hyper) -> Self {
        let col_sd = (0..table.schema().len())
            .map(|c| {
                let xs: Vec<f64> = table.column(c).flatten().collect();
                let n = xs.len().max(1) as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                var.sqrt().max(1e-6)
            })
            .collect();
        MixtureSampler {
            table,
            hyper,
            moves_per_step: 10,
            max_fresh_clusters: 4,
            col_sd,
        }
    }

    fn n(&self) -> usize {
        self.table.n_rows()
    }

    fn m(&self) -> usize {
        self.table.schema().len()
    }

    fn ty(&self, col: usize) -> ColumnType {
        self.table.schema().ty(col)
    }

    pub fn score(&self, block: &Block) -> f64 {
        block.log_prior(self.n(), &self.hyper) + block.loglik(self.table)
    }

    pub fn scored(&self, blocks: Vec<Block>) -> MixtureState {
        MixtureState {
            blocks: blocks
                .into_iter()
                .map(|block| ScoredBlock {
                    score: self.score(&block),
                    block,
                })
                .collect(),
            n: self.n(),
        }
    }

    /// One block per column, each a single cluster of weight `n` with
    /// parameters drawn from the prior.
    pub fn initial<R: Rng + ?Sized>(&self, rng: &mut R) -> MixtureState {
        let blocks = (0..self.m())
            .map(|c| Block {
                columns: vec![c],
                clusters: vec![Cluster {
                    weight: self.n(),
                    dists: vec![Dist::sample_prior(self.ty(c), &self.hyper, rng)],
                }],
            })
            .collect();
        self.scored(blocks)
    }

    /// Propose and accept or reject one move of the given kind.
    pub fn apply<R: Rng + ?Sized>(&self, state: &mut MixtureState, kind: MoveKind, rng: &mut R) -> bool {
        let blocks: Vec<Block> = state.blocks.iter().map(|b| b.block.clone()).collect();
        let cand = match kind {
            MoveKind::Column => self.column_move(&blocks, rng),
            MoveKind::SplitMerge => {
                if rng.random_bool(0.5) {
                    self.split(&blocks, rng)
                } else {
                    self.merge(&blocks, rng)
                }
            }
            MoveKind::Weight => self.weight_move(&blocks, rng),
            MoveKind::Parameter => self.param_move(&blocks, rng),
            MoveKind::Refresh => self.refresh_move(&blocks, rng),
        };
        let Some(cand) = cand else {
            return false;
        };
        let mut cache: BTreeMap<Vec<usize>, Vec<&ScoredBlock>> = BTreeMap::new();
        for sb in &state.blocks {
            cache.entry(sb.block.columns.clone()).or_default().push(sb);
        }
        let new_blocks: Vec<ScoredBlock> = cand
            .blocks
            .into_iter()
            .map(|block| {
                let reuse = cache
                    .get(&block.columns)
                    .and_then(|v| v.iter().find(|sb| sb.block == block))
                    .map(|sb| sb.score);
                ScoredBlock {
                    score: reuse.unwrap_or_else(|| self.score(&block)),
                    block,
                }
            })
            .collect();
        let old: f64 = state.blocks.iter().map(|b| b.score).sum();
        let new: f64 = new_blocks.iter().map(|b| b.score).sum();
        let log_alpha = new - old + cand.log_q_rev - cand.log_q_fwd;
        if log_alpha.is_nan() {
            return false;
        }
        let u: f64 = rng.random();
        if log_alpha >= 0.0 || u.ln() < log_alpha {
            state.blocks = new_blocks;
            true
        } else {
            false
        }
    }

    pub fn random_kind<R: Rng + ?Sized>(rng: &mut R) -> MoveKind {
        let mut u: f64 = rng.random();
        for (k, p) in MOVE_TABLE {
            if u < p {
                return k;
            }
            u -= p;
        }
        MoveKind::Parameter
    }

    pub fn sweep<R: Rng + ?Sized>(&self, state: &mut MixtureState, rng: &mut R) -> usize {
        (0..self.moves_per_step)
            .filter(|_| {
                let kind = Self::random_kind(rng);
                self.apply(state, kind, rng)
            })
            .count()
    }

    fn column_stats<'r>(&self, col: usize, weights: impl Iterator<Item = (f64, f64)> + 'r) -> Stats {
        match self.ty(col) {
            ColumnType::Numeric => {
                let (mut w, mut s1, mut s2) = (0.0, 0.0, 0.0);
                for (x, r) in weights {
                    w += r;
                    s1 += r * x;
                    s2 += r * x * x;
                }
                let mean = if w > 0.0 { s1 / w } else { 0.0 };
                let var = if w > 0.0 { (s2 / w - mean * mean).max(0.0) } else { 0.0 };
                Stats::Numeric {
                    w,
                    mean,
                    sd: var.sqrt().max(1e-6),
                }
            }
            ColumnType::Count => {
                let (mut w, mut s1) = (0.0, 0.0);
                for (x, r) in weights {
                    w += r;
                    s1 += r * x;
                }
                Stats::Count {
                    w,
                    mean: if w > 0.0 { s1 / w } else { 0.0 },
                }
            }
            ColumnType::Nominal(q) => {
                let mut counts = vec![0.0; q];
                let mut w = 0.0;
                for (x, r) in weights {
                    w += r;
                    counts[x as usize - 1] += r;
                }
                Stats::Nominal { w, counts }
            }
        }
    }

    /// Draw a distribution near the statistics, or from the prior when the
    /// statistics carry less than one row of weight.
    fn propose_dist<R: Rng + ?Sized>(&self, col: usize, stats: &Stats, rng: &mut R) -> Dist {
        if stats.weight() < 1.0 {
            return Dist::sample_prior(self.ty(col), &self.hyper, rng);
        }
        match stats {
            Stats::Numeric { w, mean, sd } => {
                let (m_sd, tau) = numeric_scales(*w, *sd);
                Dist::Normal {
                    mean: mean + m_sd * gauss(rng),
                    sd: (sd.ln() + tau * gauss(rng)).exp(),
                }
            }
            Stats::Count { w, mean } => {
                let (center, tau) = count_scales(*w, *mean);
                Dist::Poisson {
                    rate: (center + tau * gauss(rng)).exp(),
                }
            }
            Stats::Nominal { counts, .. } => {
                let conc: Vec<f64> = counts.iter().map(|c| c + 1.0).collect();
                Dist::Categorical(sample_dirichlet(&conc, rng))
            }
        }
    }

    fn dist_logq(&self, d: &Dist, stats: &Stats) -> f64 {
        if stats.weight() < 1.0 {
            return d.log_prior(&self.hyper);
        }
        match (d, stats) {
            (Dist::Normal { mean: v, sd: y }, Stats::Numeric { w, mean, sd }) => {
                let (m_sd, tau) = numeric_scales(*w, *sd);
                // Measured in (v, y^2), like the prior.
                ln_normal(*v, *mean, m_sd) + ln_normal(y.ln(), sd.ln(), tau) - 2f64.ln() - 2.0 * y.ln()
            }
            (Dist::Poisson { rate }, Stats::Count { w, mean }) => {
                let (center, tau) = count_scales(*w, *mean);
                ln_normal(rate.ln(), center, tau) - rate.ln()
            }
            (Dist::Categorical(p), Stats::Nominal { counts, .. }) => {
                let conc: Vec<f64> = counts.iter().map(|c| c + 1.0).collect();
                dirichlet_log_density(p, &conc)
            }
            _ => f64::NEG_INFINITY,
        }
    }

    /// Per-cluster statistics of `col`, weighting rows by the block's
    /// cluster posterior.
    fn responsibility_stats(&self, block: &Block, col: usize) -> Vec<Stats> {
        let n = self.n();
        let post: Vec<Vec<f64>> = self.table.rows().iter().map(|r| block.cluster_posterior(r, n)).collect();
        (0..block.clusters.len())
            .map(|j| {
                self.column_stats(
                    col,
                    self.table
                        .rows()
                        .iter()
                        .zip(&post)
                        .filter_map(move |(r, p)| r[col].map(|x| (x, p[j]))),
                )
            })
            .collect()
    }

    /// Rows ordered by the mean standardized value of their present cells in
    /// `columns`; rows with no present cell sort as zero.
    fn row_order(&self, columns: &[usize]) -> Vec<usize> {
        let means: Vec<f64> = columns
            .iter()
            .map(|&c| {
                let xs: Vec<f64> = self.table.column(c).flatten().collect();
                xs.iter().sum::<f64>() / xs.len().max(1) as f64
            })
            .collect();
        let keys: Vec<f64> = self
            .table
            .rows()
            .iter()
            .map(|r| {
                let (mut s, mut k) = (0.0, 0.0);
                for (i, &c) in columns.iter().enumerate() {
                    if let Some(x) = r[c] {
                        s += (x - means[i]) / self.col_sd[c];
                        k += 1.0;
                    }
                }
                if k > 0.0 {
                    s / k
                } else {
                    0.0
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
        order
    }

    /// Per-chunk, per-column statistics of consecutive runs of `order`
    /// sized by `weights`.
    fn chunk_stats(&self, columns: &[usize], order: &[usize], weights: &[usize]) -> Vec<Vec<Stats>> {
        let rows = self.table.rows();
        let mut lo = 0;
        weights
            .iter()
            .map(|&s| {
                let chunk = &order[lo..lo + s];
                lo += s;
                columns
                    .iter()
                    .map(|&c| self.column_stats(c, chunk.iter().filter_map(|&i| rows[i][c].map(|x| (x, 1.0)))))
                    .collect()
            })
            .collect()
    }

    fn fresh_cap(&self) -> usize {
        self.max_fresh_clusters.min(self.n()).max(1)
    }

    /// Propose a whole block over `columns`: a cluster count, a uniform
    /// composition of `n`, parameters informed by consecutive chunks of the
    /// data-ordered rows, then a uniform shuffle of the clusters.
    pub fn propose_block<R: Rng + ?Sized>(&self, columns: &[usize], rng: &mut R) -> Block {
        let n = self.n();
        let t = rng.random_range(1..=self.fresh_cap());
        let mut cuts: Vec<usize> = sample_indices(rng, n - 1, t - 1).into_iter().map(|i| i + 1).collect();
        cuts.sort_unstable();
        let mut weights = Vec::with_capacity(t);
        let mut prev = 0;
        for c in cuts.into_iter().chain([n]) {
            weights.push(c - prev);
            prev = c;
        }
        let order = self.row_order(columns);
        let stats = self.chunk_stats(columns, &order, &weights);
        let mut clusters: Vec<Cluster> = weights
            .iter()
            .zip(&stats)
            .map(|(&weight, st)| Cluster {
                weight,
                dists: columns.iter().zip(st).map(|(&c, s)| self.propose_dist(c, s, rng)).collect(),
            })
            .collect();
        for i in (1..clusters.len()).rev() {
            let j = rng.random_range(0..=i);
            clusters.swap(i, j);
        }
        Block {
            columns: columns.to_vec(),
            clusters,
        }
    }

    /// Log density of [`Self::propose_block`] producing `block`.
    pub fn block_logq(&self, block: &Block) -> f64 {
        let n = self.n();
        let t = block.clusters.len();
        if t > self.fresh_cap() {
            return f64::NEG_INFINITY;
        }
        let order = self.row_order(&block.columns);
        let base = -(self.fresh_cap() as f64).ln() - ln_binomial(n - 1, t - 1) - ln_factorial(t);
        let terms: Vec<f64> = permutations(t)
            .into_iter()
            .map(|perm| {
                let weights: Vec<usize> = perm.iter().map(|&i| block.clusters[i].weight).collect();
                let stats = self.chunk_stats(&block.columns, &order, &weights);
                perm.iter()
                    .zip(&stats)
                    .map(|(&i, st)| {
                        block.clusters[i]
                            .dists
                            .iter()
                            .zip(st)
                            .map(|(d, s)| self.dist_logq(d, s))
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        base + super::program::log_sum_exp(&terms)
    }

    /// Replace one block's clusters wholesale with a fresh proposal.
    fn refresh_move<R: Rng + ?Sized>(&self, blocks: &[Block], rng: &mut R) -> Option<Candidate> {
        let b = rng.random_range(0..blocks.len());
        let nb = self.propose_block(&blocks[b].columns, rng);
        let log_q_fwd = self.block_logq(&nb);
        let log_q_rev = self.block_logq(&blocks[b]);
        let mut out = blocks.to_vec();
        out[b] = nb;
        Some(Candidate {
            blocks: out,
            log_q_fwd,
            log_q_rev,
        })
    }

    fn column_move<R: Rng + ?Sized>(&self, blocks: &[Block], rng: &mut R) -> Option<Candidate> {
        let m = self.m();
        if m < 2 {
            return None;
        }
        let col = rng.random_range(0..m);
        let a = blocks.iter().position(|b| b.columns.contains(&col)).expect("partition covers every column");
        let k = blocks.len();
        let fresh_allowed = blocks[a].columns.len() > 1;
        let opts_fwd = k - 1 + usize::from(fresh_allowed);
        if opts_fwd == 0 {
            return None;
        }
        let choice = rng.random_range(0..opts_fwd);
        let (reduced, removed) = remove_column(&blocks[a], col);

        let mut out: Vec<Block> = Vec::with_capacity(k + 1);
        let mut log_q_fwd = -(opts_fwd as f64).ln();
        let dest_block;
        if choice < k - 1 {
            let b = if choice < a { choice } else { choice + 1 };
            let stats = self.responsibility_stats(&blocks[b], col);
            let dists: Vec<Dist> = stats.iter().map(|st| self.propose_dist(col, st, rng)).collect();
            log_q_fwd += dists.iter().zip(&stats).map(|(d, st)| self.dist_logq(d, st)).sum::<f64>();
            dest_block = insert_column(&blocks[b], col, dists);
            for (i, blk) in blocks.iter().enumerate() {
                if i != a && i != b {
                    out.push(blk.clone());
                }
            }
        } else {
            dest_block = self.propose_block(&[col], rng);
            log_q_fwd += self.block_logq(&dest_block);
            for (i, blk) in blocks.iter().enumerate() {
                if i != a {
                    out.push(blk.clone());
                }
            }
        }
        let opts_rev = {
            let k_new = out.len() + 1 + usize::from(reduced.is_some());
            k_new - 1 + usize::from(dest_block.columns.len() > 1)
        };
        let mut log_q_rev = -(opts_rev as f64).ln();
        match &reduced {
            Some(r) => {
                let stats = self.responsibility_stats(r, col);
                log_q_rev += removed.iter().zip(&stats).map(|(d, st)| self.dist_logq(d, st)).sum::<f64>();
            }
            None => log_q_rev += self.block_logq(&blocks[a]),
        }
        out.push(dest_block);
        out.extend(reduced);
        canonicalize(&mut out);
        Some(Candidate {
            blocks: out,
            log_q_fwd,
            log_q_rev,
        })
    }

    /// Proposal for the parameters of a new cluster: half prior, half
    /// centered on a uniformly chosen row.
    fn new_cluster_dists<R: Rng + ?Sized>(&self, block: &Block, rng: &mut R) -> Vec<Dist> {
        if rng.random_bool(0.5) {
            return block
                .columns
                .iter()
                .map(|&c| Dist::sample_prior(self.ty(c), &self.hyper, rng))
                .collect();
        }
        let row = &self.table.rows()[rng.random_range(0..self.n())];
        block
            .columns
            .iter()
            .map(|&c| match row[c] {
                Some(x) => self.sample_near(c, x, rng),
                None => Dist::sample_prior(self.ty(c), &self.hyper, rng),
            })
            .collect()
    }

    fn new_cluster_logq(&self, block: &Block, dists: &[Dist]) -> f64 {
        let prior: f64 = dists.iter().map(|d| d.log_prior(&self.hyper)).sum();
        let rows: Vec<f64> = self
            .table
            .rows()
            .iter()
            .map(|row| {
                block
                    .columns
                    .iter()
                    .zip(dists)
                    .map(|(&c, d)| match row[c] {
                        Some(x) => self.near_logq(c, x, d),
                        None => d.log_prior(&self.hyper),
                    })
                    .sum()
            })
            .collect();
        let near = super::program::log_sum_exp(&rows) - (self.n() as f64).ln();
        super::program::log_sum_exp(&[prior, near]) - 2f64.ln()
    }

    fn near_scales(&self, col: usize) -> (f64, f64) {
        let sd = self.col_sd[col];
        (sd / 4.0, (sd / 2.0).ln())
    }

    fn sample_near<R: Rng + ?Sized>(&self, col: usize, x: f64, rng: &mut R) -> Dist {
        match self.ty(col) {
            ColumnType::Numeric => {
                let (m_sd, ln_y) = self.near_scales(col);
                Dist::Normal {
                    mean: x + m_sd * gauss(rng),
                    sd: (ln_y + 0.7 * gauss(rng)).exp(),
                }
            }
            ColumnType::Count => Dist::Poisson {
                rate: ((x + 0.5).ln() + 0.5 * gauss(rng)).exp(),
            },
            ColumnType::Nominal(q) => Dist::Categorical(sample_dirichlet(&near_conc(q, x), rng)),
        }
    }

    fn near_logq(&self, col: usize, x: f64, d: &Dist) -> f64 {
        match d {
            Dist::Normal { mean, sd } => {
                let (m_sd, ln_y) = self.near_scales(col);
                ln_normal(*mean, x, m_sd) + ln_normal(sd.ln(), ln_y, 0.7) - 2f64.ln() - 2.0 * sd.ln()
            }
            Dist::Poisson { rate } => ln_normal(rate.ln(), (x + 0.5).ln(), 0.5) - rate.ln(),
            Dist::Categorical(w) => dirichlet_log_density(w, &near_conc(w.len(), x)),
        }
    }

    /// Take `u` weight from a cluster with weight at least 2 and give it to a
    /// new cluster inserted at a uniform position.
    fn split<R: Rng + ?Sized>(&self, blocks: &[Block], rng: &mut R) -> Option<Candidate> {
        let k = blocks.len();
        let b = rng.random_range(0..k);
        let block = &blocks[b];
        let eligible: Vec<usize> = (0..block.clusters.len()).filter(|&j| block.clusters[j].weight >= 2).collect();
        if eligible.is_empty() {
            return None;
        }
        let j = eligible[rng.random_range(0..eligible.len())];
        let s = block.clusters[j].weight;
        let u = rng.random_range(1..s);
        let dists = self.new_cluster_dists(block, rng);
        let t = block.clusters.len();
        let pos = rng.random_range(0..=t);
        let mut nb = block.clone();
        nb.clusters[j].weight -= u;
        let q_new = self.new_cluster_logq(block, &dists);
        nb.clusters.insert(pos, Cluster { weight: u, dists });
        let log_q_fwd = -(k as f64).ln() - (eligible.len() as f64).ln() - ((s - 1) as f64).ln() + q_new - ((t + 1) as f64).ln();
        let log_q_rev = -(k as f64).ln() - ((t + 1) as f64).ln() - (t as f64).ln();
        let mut out = blocks.to_vec();
        out[b] = nb;
        Some(Candidate {
            blocks: out,
            log_q_fwd,
            log_q_rev,
        })
    }

    /// Remove a cluster and give its weight to another one.
    fn merge<R: Rng + ?Sized>(&self, blocks: &[Block], rng: &mut R) -> Option<Candidate> {
        let k = blocks.len();
        let b = rng.random_range(0..k);
        let block = &blocks[b];
        let t = block.clusters.len();
        if t < 2 {
            return None;
        }
        let p = rng.random_range(0..t);
        let mut r = rng.random_range(0..t - 1);
        if r >= p {
            r += 1;
        }
        let mut nb = block.clone();
        let removed = nb.clusters.remove(p);
        let r_new = if r > p { r - 1 } else { r };
        nb.clusters[r_new].weight += removed.weight;
        let eligible = nb.clusters.iter().filter(|c| c.weight >= 2).count();
        let s_r = nb.clusters[r_new].weight;
        let log_q_fwd = -(k as f64).ln() - (t as f64).ln() - ((t - 1) as f64).ln();
        let log_q_rev = -(k as f64).ln() - (eligible as f64).ln() - ((s_r - 1) as f64).ln()
            + self.new_cluster_logq(&nb, &removed.dists)
            - (t as f64).ln();
        let mut out = blocks.to_vec();
        out[b] = nb;
        Some(Candidate {
            blocks: out,
            log_q_fwd,
            log_q_rev,
        })
    }

    /// Move `delta` weight between two clusters of one block.
    fn weight_move<R: Rng + ?Sized>(&self, blocks: &[Block], rng: &mut R) -> Option<Candidate> {
        let multi: Vec<usize> = (0..blocks.len()).filter(|&b| blocks[b].clusters.len() >= 2).collect();
        if multi.is_empty() {
            return None;
        }
        let b = multi[rng.random_range(0..multi.len())];
        let t = blocks[b].clusters.len();
        let i = rng.random_range(0..t);
        let mut j = rng.random_range(0..t - 1);
        if j >= i {
            j += 1;
        }
        let delta = if rng.random_bool(0.5) {
            rng.random_range(1..=5)
        } else {
            rng.random_range(1..=self.n())
        };
        if blocks[b].clusters[i].weight <= delta {
            return None;
        }
        let mut out = blocks.to_vec();
        out[b].clusters[i].weight -= delta;
        out[b].clusters[j].weight += delta;
        Some(Candidate {
            blocks: out,
            log_q_fwd: 0.0,
            log_q_rev: 0.0,
        })
    }

    /// Random-walk perturbation of one distribution's parameters.
    fn param_move<R: Rng + ?Sized>(&self, blocks: &[Block], rng: &mut R) -> Option<Candidate> {
        let b = rng.random_range(0..blocks.len());
        let j = rng.random_range(0..blocks[b].clusters.len());
        let v = rng.random_range(0..blocks[b].columns.len());
        let scale = [0.02, 0.1, 0.5][rng.random_range(0..3)];
        let old = &blocks[b].clusters[j].dists[v];
        let (new, log_q_fwd, log_q_rev) = match old {
            Dist::Normal { mean, sd } => {
                if rng.random_bool(0.5) {
                    (
                        Dist::Normal {
                            mean: mean + scale * sd * gauss(rng),
                            sd: *sd,
                        },
                        0.0,
                        0.0,
                    )
                } else {
                    let y = (sd.ln() + scale * gauss(rng)).exp();
                    (Dist::Normal { mean: *mean, sd: y }, -2.0 * y.ln(), -2.0 * sd.ln())
                }
            }
            Dist::Poisson { rate } => {
                let r = (rate.ln() + scale * gauss(rng)).exp();
                (Dist::Poisson { rate: r }, -r.ln(), -rate.ln())
            }
            Dist::Categorical(w) => {
                let c = 2.0 / (scale * scale);
                let conc = |p: &[f64]| p.iter().map(|x| c * x + 0.5).collect::<Vec<f64>>();
                let nw = sample_dirichlet(&conc(w), rng);
                let fwd = dirichlet_log_density(&nw, &conc(w));
                let rev = dirichlet_log_density(w, &conc(&nw));
                (Dist::Categorical(nw), fwd, rev)
            }
        };
        if !new_is_valid(&new) {
            return None;
        }
        let mut out = blocks.to_vec();
        out[b].clusters[j].dists[v] = new;
        Some(Candidate {
            blocks: out,
            log_q_fwd,
            log_q_rev,
        })
    }
}

fn new_is_valid(d: &Dist) -> bool {
    match d {
        Dist::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && *sd > 0.0,
        Dist::Poisson { rate } => rate.is_finite() && *rate > 0.0,
        Dist::Categorical(w) => w.iter().all(|&x| x > 0.0 && x.is_finite()),
    }
}

fn numeric_scales(w: f64, sd: f64) -> (f64, f64) {
    (2.0 * sd / w.max(1.0).sqrt(), (2.0 / (2.0 * w.max(1.0)).sqrt()).max(0.05))
}

fn count_scales(w: f64, mean: f64) -> (f64, f64) {
    let w = w.max(1.0);
    ((mean + 0.5 / w).ln(), 2.0 / (w * mean + 1.0).sqrt() + 0.02)
}

fn near_conc(q: usize, x: f64) -> Vec<f64> {
    (1..=q).map(|i| if i as f64 == x { 5.0 } else { 1.0 }).collect()
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn permutations(t: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; t], &mut out);
    out
}

/// Drop `col` from a block, returning the rest (if any column remains) and
/// the removed distribution of each cluster.
fn remove_column(block: &Block, col: usize) -> (Option<Block>, Vec<Dist>) {
    let i = block.columns.iter().position(|&c| c == col).expect("column in block");
    let mut b = block.clone();
    b.columns.remove(i);
    let removed = b.clusters.iter_mut().map(|c| c.dists.remove(i)).collect();
    ((!b.columns.is_empty()).then_some(b), removed)
}

fn insert_column(block: &Block, col: usize, dists: Vec<Dist>) -> Block {
    let i = block.columns.partition_point(|&c| c < col);
    let mut b = block.clone();
    b.columns.insert(i, col);
    for (c, d) in b.clusters.iter_mut().zip(dists) {
        c.dists.insert(i, d);
    }
    b
}

/// Blocks ordered by their smallest column, columns ascending within a block.
pub fn canonicalize(blocks: &mut [Block]) {
    blocks.sort_by_key(|b| b.columns[0]);
}

impl ChainKernel for MixtureSampler<'_> {
    type State = MixtureState;

    fn init(&self, rng: &mut ChaCha8Rng) -> Result<MixtureState, SynthError> {
        Ok(self.initial(rng))
    }

    fn step(&self, state: &mut MixtureState, _step: usize, rng: &mut ChaCha8Rng) -> Result<bool, SynthError> {
        Ok(self.sweep(state, rng) > 0)
    }

    fn member(&self, state: &MixtureState) -> Member {
        let p = state.program();
        Member {
            program: p.to_expr(),
            log_prior: p.log_prior(&self.hyper),
            log_lik: p.blocks.iter().map(|b| b.loglik(self.table)).sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixtureConfig {
    pub chains: usize,
    /// Sweeps per chain.
    pub steps: usize,
    pub seed: u64,
    pub moves_per_step: usize,
    pub hyper: Hyper,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            chains: 20,
            steps: 2000,
            seed: 0,
            moves_per_step: 10,
            hyper: Hyper::default(),
        }
    }
}

/// Short digest identifying the model a mixture ensemble was drawn under.
pub fn model_fingerprint(table: &Table, hyper: &Hyper) -> String {
    let text = format!("{}|{:?}", table.schema().to_compact(), hyper);
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn mixture_synthesize(table: &Table, config: &MixtureConfig) -> Result<Ensemble, SynthError> {
    let mut sampler = MixtureSampler::new(table, config.hyper);
    sampler.moves_per_step = config.moves_per_step;
    let runs = run_chains(&sampler, config.chains, config.steps, config.seed)?;
    let mut extra = BTreeMap::new();
    extra.insert("schema".to_string(), table.schema().to_compact());
    extra.insert("rows".to_string(), table.n_rows().to_string());
    Ok(Ensemble::from_runs(
        runs,
        Provenance {
            dsl: "mixture".into(),
            seed: config.seed,
            chains: config.chains,
            steps: config.steps,
            schedule: format!("sweep:{}", config.moves_per_step),
            grammar_hash: model_fingerprint(table, &config.hyper),
            extra,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::table::TableSchema;
    use rand::SeedableRng;

    fn nominal_table(rows: &[[f64; 1]]) -> Table {
        let s = TableSchema::from_compact("c:nominal(2)").unwrap();
        Table::new(s, rows.iter().map(|r| r.iter().map(|&x| Some(x)).collect()).collect()).unwrap()
    }

    fn check_invariants(state: &MixtureState, m: usize, n: usize) {
        let mut seen = vec![0; m];
        for sb in &state.blocks {
            assert_eq!(sb.block.total_weight(), n);
            assert!(sb.block.columns.windows(2).all(|w| w[0] < w[1]));
            for c in &sb.block.columns {
                seen[*c] += 1;
            }
            for cl in &sb.block.clusters {
                assert!(cl.weight >= 1);
                assert_eq!(cl.dists.len(), sb.block.columns.len());
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    fn mixed_table(rng: &mut ChaCha8Rng, n: usize) -> Table {
        let s = TableSchema::from_compact("a:numeric,b:count,c:nominal(3),d:numeric").unwrap();
        let rows = (0..n)
            .map(|_| {
                let z = rng.random_bool(0.5);
                let a = if z { 3.0 } else { -3.0 } + gauss(rng);
                let b = if z { rng.random_range(0..3) } else { rng.random_range(5..9) } as f64;
                let c = if z { 1.0 } else { rng.random_range(2..=3) as f64 };
                let d = gauss(rng);
                let miss = |v: f64, rng: &mut ChaCha8Rng| if rng.random_bool(0.1) { None } else { Some(v) };
                vec![miss(a, rng), miss(b, rng), miss(c, rng), miss(d, rng)]
            })
            .collect();
        Table::new(s, rows).unwrap()
    }

    #[test]
    fn invariants_survive_many_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let table = mixed_table(&mut rng, 30);
        let sampler = MixtureSampler::new(&table, Hyper::default());
        let mut state = sampler.initial(&mut rng);
        for _ in 0..3000 {
            let kind = MixtureSampler::random_kind(&mut rng);
            sampler.apply(&mut state, kind, &mut rng);
            check_invariants(&state, 4, 30);
        }
        let p = state.program();
        p.validate(table.schema()).unwrap();
        for sb in &state.blocks {
            assert!((sb.score - sampler.score(&sb.block)).abs() < 1e-9);
        }
    }

    #[test]
    fn fresh_proposal_density_is_normalized_over_structures() {
        // n = 3 nominal rows, q = 2: sum the discrete part over t and
        // compositions and integrate the weights by quadrature.
        let table = nominal_table(&[[1.0], [2.0], [2.0]]);
        let mut sampler = MixtureSampler::new(&table, Hyper::default());
        sampler.max_fresh_clusters = 2;
        let grid = 400;
        let mut total = 0.0;
        for t in 1..=2usize {
            let comps: Vec<Vec<usize>> = if t == 1 { vec![vec![3]] } else { vec![vec![1, 2], vec![2, 1]] };
            for comp in comps {
                let cell = |ws: &[f64]| {
                    let block = Block {
                        columns: vec![0],
                        clusters: comp
                            .iter()
                            .zip(ws)
                            .map(|(&weight, &p)| Cluster {
                                weight,
                                dists: vec![Dist::Categorical(vec![p, 1.0 - p])],
                            })
                            .collect(),
                    };
                    sampler.block_logq(&block).exp()
                };
                let h = 1.0 / grid as f64;
                let mut s = 0.0;
                if t == 1 {
                    for i in 0..grid {
                        s += cell(&[(i as f64 + 0.5) * h]) * h;
                    }
                } else {
                    for i in 0..grid {
                        for j in 0..grid {
                            s += cell(&[(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]) * h * h;
                        }
                    }
                }
                total += s;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn fresh_blocks_are_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = mixed_table(&mut rng, 40);
        let sampler = MixtureSampler::new(&table, Hyper::default());
        for c in 0..4 {
            for _ in 0..50 {
                let b = sampler.propose_block(&[c], &mut rng);
                assert_eq!(b.total_weight(), 40);
                assert!(sampler.block_logq(&b).is_finite());
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_single_column_has_one_block() {
        let table = nominal_table(&[[1.0], [2.0], [2.0], [1.0]]);
        let cfg = MixtureConfig {
            chains: 3,
            steps: 50,
            seed: 4,
            ..MixtureConfig::default()
        };
        let a = mixture_synthesize(&table, &cfg).unwrap();
        let b = mixture_synthesize(&table, &cfg).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        for p in a.programs() {
            assert_eq!(p.child_count(), 1);
        }
    }
}
