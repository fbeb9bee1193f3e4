use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use super::table::{check_row, ColumnType, Table, TableError, TableSchema};
use crate::sexpr::{Atom, Expr, Item};

/// Statistical constants of the distribution priors.
///
/// Normal parameters get a normal-inverse-gamma prior over `(v, y^2)`,
/// Poisson rates a `gamma(nu, xi)` prior, and categorical weights a
/// symmetric `Dirichlet(kappa)` prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub eta: f64,
    pub xi: f64,
    pub nu: f64,
    pub kappa: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            eta: 0.0,
            xi: 1.0,
            nu: 1.0,
            kappa: 1.0,
        }
    }
}

/// A primitive distribution over one cell. `Normal::sd` is the standard
/// deviation; categorical weights are indexed by category `1..=q`.
#[derive(Debug, Clone, PartialEq)]
pub enum Dist {
    Normal { mean: f64, sd: f64 },
    Poisson { rate: f64 },
    Categorical(Vec<f64>),
}

pub fn ln_factorial(k: usize) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

impl Dist {
    pub fn fits(&self, ty: ColumnType) -> bool {
        match (self, ty) {
            (Dist::Normal { sd, .. }, ColumnType::Numeric) => *sd > 0.0,
            (Dist::Poisson { rate }, ColumnType::Count) => *rate > 0.0,
            (Dist::Categorical(w), ColumnType::Nominal(q)) => {
                w.len() == q && w.iter().all(|&x| x > 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
            _ => false,
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match self {
            Dist::Normal { mean, sd } => -0.5 * (2.0 * PI * sd * sd).ln() - (x - mean).powi(2) / (2.0 * sd * sd),
            Dist::Poisson { rate } => x * rate.ln() - rate - ln_gamma(x + 1.0),
            Dist::Categorical(w) => {
                let i = x as usize;
                if i >= 1 && i <= w.len() {
                    w[i - 1].ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Prior log density. Normal parameters are measured in `(v, y^2)`.
    pub fn log_prior(&self, h: &Hyper) -> f64 {
        match self {
            Dist::Normal { mean, sd } => {
                let var = sd * sd;
                0.5 * (h.lambda / (2.0 * PI * var)).ln() + h.alpha * h.beta.ln() - ln_gamma(h.alpha)
                    - (h.alpha + 1.0) * var.ln()
                    - (2.0 * h.beta + h.lambda * (mean - h.eta).powi(2)) / (2.0 * var)
            }
            Dist::Poisson { rate } => h.nu * h.xi.ln() + (h.nu - 1.0) * rate.ln() - h.xi * rate - ln_gamma(h.nu),
            Dist::Categorical(w) => dirichlet_log_density(w, &vec![h.kappa; w.len()]),
        }
    }

    pub fn sample_prior<R: Rng + ?Sized>(ty: ColumnType, h: &Hyper, rng: &mut R) -> Dist {
        match ty {
            ColumnType::Numeric => {
                let precision = Gamma::new(h.alpha, 1.0 / h.beta).expect("positive constants").sample(rng);
                let var = (1.0 / precision).max(1e-300);
                let mean = Normal::new(h.eta, (var / h.lambda).sqrt()).expect("finite").sample(rng);
                Dist::Normal { mean, sd: var.sqrt() }
            }
            ColumnType::Count => {
                let rate = Gamma::new(h.nu, 1.0 / h.xi).expect("positive constants").sample(rng);
                Dist::Poisson { rate: rate.max(1e-300) }
            }
            ColumnType::Nominal(q) => Dist::Categorical(sample_dirichlet(&vec![h.kappa; q], rng)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Dist::Normal { mean, sd } => Normal::new(*mean, *sd).expect("positive sd").sample(rng),
            Dist::Poisson { rate } => Poisson::new(*rate).expect("positive rate").sample(rng),
            Dist::Categorical(w) => (WeightedIndex::new(w).expect("positive weights").sample(rng) + 1) as f64,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Dist::Normal { mean, .. } => *mean,
            Dist::Poisson { rate } => *rate,
            Dist::Categorical(w) => w.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum(),
        }
    }

    fn to_expr(&self) -> Expr {
        match self {
            Dist::Normal { mean, sd } => Expr::with_atoms("normal", vec![Atom::Num(*mean), Atom::Num(*sd)]),
            Dist::Poisson { rate } => Expr::with_atoms("poisson", vec![Atom::Num(*rate)]),
            Dist::Categorical(w) => Expr::with_atoms("categorical", w.iter().map(|&x| Atom::Num(x)).collect()),
        }
    }

    fn from_expr(e: &Expr) -> Result<Dist, MixtureError> {
        let mut nums = Vec::new();
        for a in e.atoms() {
            match a {
                Atom::Num(v) => nums.push(*v),
                // Accept the grammar's `(normal (x y))` spelling too.
                Atom::List(xs) => nums.extend(xs.iter().filter_map(Atom::as_num)),
                Atom::Sym(s) => return Err(MixtureError::Structure(format!("unexpected symbol `{s}` in {e}"))),
            }
        }
        if e.child_count() > 0 {
            return Err(MixtureError::Structure(format!("distribution {e} has nested expressions")));
        }
        match (e.tag(), nums.as_slice()) {
            ("normal", [mean, sd]) => Ok(Dist::Normal { mean: *mean, sd: *sd }),
            ("poisson", [rate]) => Ok(Dist::Poisson { rate: *rate }),
            ("categorical", w) if !w.is_empty() => Ok(Dist::Categorical(w.to_vec())),
            _ => Err(MixtureError::Structure(format!("malformed distribution {e}"))),
        }
    }
}

pub fn dirichlet_log_density(w: &[f64], conc: &[f64]) -> f64 {
    let total: f64 = conc.iter().sum();
    ln_gamma(total) - conc.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + w.iter().zip(conc).map(|(x, a)| (a - 1.0) * x.ln()).sum::<f64>()
}

pub fn sample_dirichlet<R: Rng + ?Sized>(conc: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = conc
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive concentration").sample(rng))
            .collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && g.iter().all(|&x| x > 0.0) {
            return g.into_iter().map(|x| x / total).collect();
        }
    }
}

/// One mixture component: an integer weight and a distribution per column of
/// the enclosing block, in block column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub weight: usize,
    pub dists: Vec<Dist>,
}

/// A group of dependent columns (0-based indices) and its mixture components.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub columns: Vec<usize>,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("malformed program: {0}")]
    Structure(String),
    #[error("program does not match the table schema: {0}")]
    Schema(String),
    #[error("program weights sum to {program} but the table has {table} rows")]
    RowCount { program: usize, table: usize },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error(transparent)]
    Table(#[from] TableError),
}

impl Block {
    /// Log of the block's contribution to the prior:
    /// `(l - 1)! prod_j [(s_j - 1)! prod_v Prior(D)] / n!`.
    pub fn log_prior(&self, n: usize, h: &Hyper) -> f64 {
        ln_factorial(self.columns.len() - 1) - ln_factorial(n)
            + self
                .clusters
                .iter()
                .map(|c| ln_factorial(c.weight - 1) + c.dists.iter().map(|d| d.log_prior(h)).sum::<f64>())
                .sum::<f64>()
    }

    /// Log of `(s_j / n) prod_v Lik(D)(x)` for each cluster; missing cells
    /// are skipped.
    pub fn cluster_logweights(&self, row: &[Option<f64>], n: usize) -> Vec<f64> {
        self.clusters
            .iter()
            .map(|c| {
                let mut lw = (c.weight as f64 / n as f64).ln();
                for (d, &col) in c.dists.iter().zip(&self.columns) {
                    if let Some(x) = row[col] {
                        lw += d.log_density(x);
                    }
                }
                lw
            })
            .collect()
    }

    pub fn row_logdensity(&self, row: &[Option<f64>], n: usize) -> f64 {
        log_sum_exp(&self.cluster_logweights(row, n))
    }

    pub fn loglik(&self, table: &Table) -> f64 {
        let n = table.n_rows();
        table.rows().iter().map(|r| self.row_logdensity(r, n)).sum()
    }

    /// Exact posterior over clusters given the row's present cells.
    pub fn cluster_posterior(&self, row: &[Option<f64>], n: usize) -> Vec<f64> {
        let lw = self.cluster_logweights(row, n);
        let z = log_sum_exp(&lw);
        lw.iter().map(|l| (l - z).exp()).collect()
    }

    pub fn total_weight(&self) -> usize {
        self.clusters.iter().map(|c| c.weight).sum()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// A validated program of the mixture DSL.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureProgram {
    pub blocks: Vec<Block>,
    /// Row count the integer weights are tied to.
    pub n: usize,
}

impl MixtureProgram {
    /// Parse and validate against a schema.
    pub fn from_expr(e: &Expr, schema: &TableSchema) -> Result<Self, MixtureError> {
        let bad = |msg: String| MixtureError::Structure(msg);
        if e.tag() != "partition" || e.atoms().next().is_some() {
            return Err(bad(format!("expected (partition B ...), found `{}`", e.tag())));
        }
        let mut blocks = Vec::new();
        for b in e.children() {
            if b.tag() != "block" {
                return Err(bad(format!("expected block, found `{}`", b.tag())));
            }
            let mut atoms = b.atoms();
            let columns = match (atoms.next(), atoms.next()) {
                (Some(Atom::List(cols)), None) => cols
                    .iter()
                    .map(|a| {
                        a.as_count()
                            .filter(|&c| c >= 1)
                            .map(|c| c as usize - 1)
                            .ok_or_else(|| bad(format!("bad column index {a}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                (Some(Atom::Num(c)), None) if *c >= 1.0 && c.fract() == 0.0 => vec![*c as usize - 1],
                _ => return Err(bad("block needs one column list".into())),
            };
            let mut clusters = Vec::new();
            for c in b.children() {
                if c.tag() != "cluster" {
                    return Err(bad(format!("expected cluster, found `{}`", c.tag())));
                }
                let mut atoms = c.atoms();
                let weight = match (atoms.next().and_then(Atom::as_count), atoms.next()) {
                    (Some(s), None) if s >= 1 => s as usize,
                    _ => return Err(bad(format!("cluster weight must be a positive integer in {c}"))),
                };
                let mut dists = Vec::new();
                for (v, &col) in c.children().zip(&columns) {
                    let mut atoms = v.atoms();
                    let a = match (v.tag(), atoms.next().and_then(Atom::as_count), atoms.next(), v.child_count()) {
                        ("var", Some(a), None, 1) => a as usize,
                        _ => return Err(bad(format!("expected (var a D), found {v}"))),
                    };
                    if a != col + 1 {
                        return Err(bad(format!("var {a} out of block order (expected {})", col + 1)));
                    }
                    dists.push(Dist::from_expr(v.child(1).expect("one child"))?);
                }
                if dists.len() != columns.len() || c.child_count() != columns.len() {
                    return Err(bad(format!("cluster has {} vars for {} block columns", c.child_count(), columns.len())));
                }
                clusters.push(Cluster { weight, dists });
            }
            if clusters.is_empty() {
                return Err(bad("block without clusters".into()));
            }
            blocks.push(Block { columns, clusters });
        }
        let n = blocks.first().map(Block::total_weight).unwrap_or(0);
        let p = MixtureProgram { blocks, n };
        p.validate(schema)?;
        Ok(p)
    }

    pub fn parse(text: &str, schema: &TableSchema) -> Result<Self, MixtureError> {
        let e = crate::sexpr::parse(text).map_err(|err| MixtureError::Structure(err.to_string()))?;
        MixtureProgram::from_expr(&e, schema)
    }

    pub fn validate(&self, schema: &TableSchema) -> Result<(), MixtureError> {
        let m = schema.len();
        let mut seen = vec![false; m];
        for b in &self.blocks {
            if b.columns.is_empty() {
                return Err(MixtureError::Structure("empty block".into()));
            }
            for &c in &b.columns {
                if c >= m {
                    return Err(MixtureError::Schema(format!("column {} does not exist (m = {m})", c + 1)));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(MixtureError::Structure(format!("column {} appears in two blocks", c + 1)));
                }
            }
            if b.total_weight() != self.n {
                return Err(MixtureError::Structure(format!(
                    "block weights sum to {} but another block sums to {}",
                    b.total_weight(),
                    self.n
                )));
            }
            for cl in &b.clusters {
                if cl.weight == 0 || cl.dists.len() != b.columns.len() {
                    return Err(MixtureError::Structure("malformed cluster".into()));
                }
                for (d, &c) in cl.dists.iter().zip(&b.columns) {
                    if !d.fits(schema.ty(c)) {
                        return Err(MixtureError::Schema(format!(
                            "{} does not fit column {} of type {}",
                            d.to_expr(),
                            c + 1,
                            schema.ty(c)
                        )));
                    }
                }
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(MixtureError::Structure(format!("column {} is in no block", c + 1)));
        }
        Ok(())
    }

    pub fn to_expr(&self) -> Expr {
        Expr::with_children(
            "partition",
            self.blocks
                .iter()
                .map(|b| {
                    let cols = Atom::List(b.columns.iter().map(|&c| Atom::Num((c + 1) as f64)).collect());
                    let mut items = vec![Item::Atom(cols)];
                    items.extend(b.clusters.iter().map(|cl| {
                        let mut it = vec![Item::Atom(Atom::Num(cl.weight as f64))];
                        it.extend(cl.dists.iter().zip(&b.columns).map(|(d, &c)| {
                            Item::Expr(Expr::new(
                                "var",
                                vec![Item::Atom(Atom::Num((c + 1) as f64)), Item::Expr(d.to_expr())],
                            ))
                        }));
                        Item::Expr(Expr::new("cluster", it))
                    }));
                    Expr::new("block", items)
                })
                .collect(),
        )
    }

    pub fn m(&self) -> usize {
        self.blocks.iter().map(|b| b.columns.len()).sum()
    }

    pub fn block_of(&self, col: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.columns.contains(&col))
    }

    pub fn same_block(&self, a: usize, b: usize) -> bool {
        self.block_of(a).is_some() && self.block_of(a) == self.block_of(b)
    }

    pub fn log_prior(&self, h: &Hyper) -> f64 {
        -ln_factorial(self.m()) + self.blocks.iter().map(|b| b.log_prior(self.n, h)).sum::<f64>()
    }

    pub fn loglik(&self, table: &Table) -> Result<f64, MixtureError> {
        self.check_table(table)?;
        Ok(self.blocks.iter().map(|b| b.loglik(table)).sum())
    }

    pub fn check_table(&self, table: &Table) -> Result<(), MixtureError> {
        self.validate(table.schema())?;
        if table.n_rows() != self.n {
            return Err(MixtureError::RowCount {
                program: self.n,
                table: table.n_rows(),
            });
        }
        Ok(())
    }

    /// Log density of one partially observed row.
    pub fn logpdf(&self, row: &[Option<f64>]) -> f64 {
        self.blocks.iter().map(|b| b.row_logdensity(row, self.n)).sum()
    }

    /// Draw one row: conditioned cells are copied, the rest are sampled from
    /// a cluster drawn from its exact posterior given the block's
    /// conditioned cells.
    pub fn simulate<R: Rng + ?Sized>(&self, conditions: &[Option<f64>], rng: &mut R) -> Vec<f64> {
        let mut out: Vec<f64> = vec![0.0; conditions.len()];
        for b in &self.blocks {
            let post = b.cluster_posterior(conditions, self.n);
            let j = WeightedIndex::new(&post).expect("posterior has mass").sample(rng);
            for (d, &c) in b.clusters[j].dists.iter().zip(&b.columns) {
                out[c] = conditions[c].unwrap_or_else(|| d.sample(rng));
            }
        }
        out
    }

    pub fn check_conditions(&self, schema: &TableSchema, conditions: &[Option<f64>]) -> Result<(), MixtureError> {
        check_row(schema, conditions, 1)?;
        Ok(())
    }
}
