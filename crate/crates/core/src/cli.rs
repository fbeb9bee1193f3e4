//! Command-line front end: ingestion, synthesis runs, queries, forecasting,
//! simulation, density evaluation and translation.
//!
//! Every command writes its human-readable report to the supplied writer and
//! its data products to files, so a command's outputs are a pure function of
//! its inputs and seed.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gp::{ensemble_forecast, gp_grammar, gp_heldout_loglik, GpLikelihood, Kernel, Standardizer, TimeSeries};
use crate::grammar::Grammar;
use crate::mixture::{format_row, mixture_synthesize, log_sum_exp, MixtureConfig, MixtureProgram, Row, Table, TableSchema};
use crate::queries::{declares_dependence, mixture_same_block, parse_predicate, parse_property_file, estimate_property, Report};
use crate::sexpr::{format_num, parse, Expr};
use crate::synthesis::{synthesize, Ensemble, MoveSchedule, SynthConfig};
use crate::translate::{gp_to_venture, mixture_to_venture};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 1 for semantic failures, 2 for usage, IO and malformed input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            _ => 2,
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "progsynth", version, about = "Bayesian synthesis of probabilistic programs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a grammar and report the spectral radius of its expectation matrix.
    CheckGrammar {
        /// `gp` for the built-in kernel grammar, or a grammar file.
        grammar: String,
    },
    /// Run synthesis chains and write an ensemble file.
    Synth(SynthArgs),
    /// Estimate structure probabilities from an ensemble.
    Query(QueryArgs),
    /// Pooled posterior-predictive forecast from a GP ensemble.
    Forecast(ForecastArgs),
    /// Sample rows from a mixture ensemble.
    Simulate(SimulateArgs),
    /// Ensemble-averaged log-density of table rows.
    Logpdf(LogpdfArgs),
    /// Emit Venture source for an ensemble or a single program.
    Translate(TranslateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dsl {
    Gp,
    Mixture,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub dsl: Dsl,
    /// CSV data: `x,y` for gp; names line plus types line for mixture.
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to 60 for gp and 20 for mixture.
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// `uniform` or `alternating:S:P` (gp only).
    #[arg(long)]
    pub schedule: Option<String>,
    /// Rescale xs to [0, 1] and ys to zero mean, unit variance (gp only).
    #[arg(long)]
    pub standardize: bool,
    /// Mixture moves per sweep.
    #[arg(long, default_value_t = 10)]
    pub moves: usize,
    #[arg(long, default_value = "ensemble.txt")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct QueryArgs {
    pub ensemble: PathBuf,
    /// Property such as `per>0 or cp>0`; repeatable.
    #[arg(long = "property", short = 'p')]
    pub properties: Vec<String>,
    /// File of `label: property` lines.
    #[arg(long)]
    pub properties_file: Option<PathBuf>,
    /// Two mixture column names (or 1-based indices) to test for dependence.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub pair: Option<Vec<String>>,
    /// Print `label=probability` lines instead of a table.
    #[arg(long)]
    pub kv: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ForecastArgs {
    pub ensemble: PathBuf,
    /// Training series the ensemble was synthesized on.
    pub train: PathBuf,
    /// Probe grid `start:end:count`.
    #[arg(long)]
    pub probe: Option<String>,
    /// Held-out series; scored, and used as probes when no grid is given.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "forecast.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    pub ensemble: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub rows: usize,
    /// Conditions `name=value,name=value`.
    #[arg(long)]
    pub given: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "simulated.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct LogpdfArgs {
    pub ensemble: PathBuf,
    /// Rows to score, with the same two-line header as the training table.
    pub rows: PathBuf,
    #[arg(long, default_value = "logpdf.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TranslateArgs {
    /// Ensemble file, or a file holding one program.
    pub input: PathBuf,
    /// Compact schema `name:type,...`, needed for a lone mixture program.
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long, default_value = "venture")]
    pub out: PathBuf,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn say(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::CheckGrammar { grammar } => cmd_check_grammar(&grammar, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Query(a) => cmd_query(&a, out),
        Command::Forecast(a) => cmd_forecast(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Logpdf(a) => cmd_logpdf(&a, out),
        Command::Translate(a) => cmd_translate(&a, out),
    }
}

pub fn cmd_check_grammar(spec: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let grammar = if spec == "gp" {
        gp_grammar()
    } else {
        Grammar::from_text(&read(Path::new(spec))?).map_err(|e| CliError::Input(format!("{spec}: {e}")))?
    };
    let validation = grammar.validate();
    let mut report = format!("grammar: {spec}\nvalidation: {}\n", validation.to_string().trim_end());
    let consistency = grammar.check_consistency();
    let nf = &consistency.normal_form;
    let moduli: Vec<String> = nf.moduli.iter().filter(|&&m| m > 1e-6).map(|m| format!("{m:.8}")).collect();
    let _ = writeln!(report, "normal-form matrix: {0}x{0}", grammar.expectation_matrix().labels.len());
    let _ = writeln!(report, "spectral radius: {:.8}", nf.radius);
    let _ = writeln!(report, "spectral radius (original nonterminals): {:.8}", consistency.direct.radius);
    let _ = writeln!(report, "nonzero eigenvalue moduli: {}", moduli.join(" "));
    let ok = validation.is_valid() && consistency.consistent;
    let _ = writeln!(report, "consistent: {}", if consistency.consistent { "yes" } else { "no" });
    say(out, &report)?;
    if ok {
        Ok(())
    } else if !validation.is_valid() {
        Err(CliError::Failed("grammar is not valid".into()))
    } else {
        Err(CliError::Failed("grammar is not consistent (spectral radius >= 1)".into()))
    }
}

/// Read a two-column `x,y` series. Columns named `x` and `y` are used when
/// present, otherwise the first two.
pub fn parse_series_csv(text: &str) -> Result<TimeSeries, CliError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(input)?.clone();
    let find = |name: &str, fallback: usize| headers.iter().position(|h| h.eq_ignore_ascii_case(name)).unwrap_or(fallback);
    let (cx, cy) = (find("x", 0), find("y", 1));
    if headers.len() < 2 {
        return Err(CliError::Input("series CSV needs `x` and `y` columns".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(input)?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |c: usize| -> Result<f64, CliError> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                CliError::Input(format!("line {line}, column {} (`{}`): `{raw}` is not a number", c + 1, &headers[c]))
            })
        };
        xs.push(cell(cx)?);
        ys.push(cell(cy)?);
    }
    TimeSeries::new(xs, ys).map_err(input)
}

fn summarize(ens: &Ensemble) -> String {
    let joint: Vec<f64> = ens.members.iter().map(|m| m.log_prior + m.log_lik).collect();
    let mean = joint.iter().sum::<f64>() / joint.len().max(1) as f64;
    let best = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    format!(
        "programs: {}\nacceptance rate: {:.4}\nmean log joint: {mean:.4}\nmax log joint: {best:.4}\n",
        ens.len(),
        ens.acceptance_rate()
    )
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = read(&a.data)?;
    let ensemble = match a.dsl {
        Dsl::Gp => {
            let mut ts = parse_series_csv(&text)?;
            if a.standardize {
                ts = Standardizer::fit(&ts).apply(&ts);
            }
            let schedule: MoveSchedule = match &a.schedule {
                Some(s) => s.parse().map_err(|e| CliError::Usage(format!("--schedule: {e}")))?,
                None => MoveSchedule::Uniform,
            };
            let config = SynthConfig {
                chains: a.chains.unwrap_or(60),
                steps: a.steps,
                seed: a.seed,
                schedule,
            };
            let mut ens = synthesize(&gp_grammar(), &GpLikelihood, &ts, &config, "gp")
                .map_err(|e| CliError::Failed(e.to_string()))?;
            ens.provenance.extra.insert("rows".into(), ts.len().to_string());
            ens.provenance.extra.insert("standardize".into(), a.standardize.to_string());
            ens
        }
        Dsl::Mixture => {
            if a.standardize || a.schedule.is_some() {
                return Err(CliError::Usage("--standardize and --schedule apply to gp only".into()));
            }
            let table = Table::from_csv(&text).map_err(input)?;
            let config = MixtureConfig {
                chains: a.chains.unwrap_or(20),
                steps: a.steps,
                seed: a.seed,
                moves_per_step: a.moves,
                ..MixtureConfig::default()
            };
            mixture_synthesize(&table, &config).map_err(|e| CliError::Failed(e.to_string()))?
        }
    };
    write_file(&a.out, &ensemble.to_text())?;
    say(out, &format!("{}wrote {}\n", summarize(&ensemble), a.out.display()))
}

pub fn load_ensemble(path: &Path) -> Result<Ensemble, CliError> {
    Ensemble::from_text(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn ensemble_schema(ens: &Ensemble) -> Result<TableSchema, CliError> {
    if ens.provenance.dsl != "mixture" {
        return Err(CliError::Usage(format!("expected a mixture ensemble, found dsl `{}`", ens.provenance.dsl)));
    }
    let s = ens
        .provenance
        .extra
        .get("schema")
        .ok_or_else(|| CliError::Input("mixture ensemble has no `schema` header".into()))?;
    TableSchema::from_compact(s).map_err(input)
}

fn mixture_programs(ens: &Ensemble, schema: &TableSchema) -> Result<Vec<MixtureProgram>, CliError> {
    ens.programs()
        .map(|e| MixtureProgram::from_expr(e, schema).map_err(input))
        .collect()
}

fn column_index(schema: &TableSchema, key: &str) -> Result<usize, CliError> {
    if let Some(i) = schema.index(key) {
        return Ok(i);
    }
    key.parse::<usize>()
        .ok()
        .filter(|&i| i >= 1 && i <= schema.len())
        .map(|i| i - 1)
        .ok_or_else(|| CliError::Input(format!("unknown column `{key}`")))
}

pub fn cmd_query(a: &QueryArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ens = load_ensemble(&a.ensemble)?;
    if ens.is_empty() {
        return Err(CliError::Input("ensemble is empty".into()));
    }
    let mut rows = Vec::new();
    let mut verdict = None;
    if let Some(pair) = &a.pair {
        let schema = ensemble_schema(&ens)?;
        let (i, j) = (column_index(&schema, &pair[0])?, column_index(&schema, &pair[1])?);
        let p = mixture_same_block(ens.programs(), i, j).map_err(input)?;
        let label = format!("same-block({},{})", schema.columns()[i].name, schema.columns()[j].name);
        rows.push((label, p));
        verdict = Some(declares_dependence(p));
    }
    let mut props = Vec::new();
    for s in &a.properties {
        let pred = parse_predicate(s).map_err(|e| CliError::Input(format!("property `{s}`: {e}")))?;
        props.push((s.clone(), pred));
    }
    if let Some(path) = &a.properties_file {
        let file = parse_property_file(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        props.extend(file.into_iter().map(|p| (p.name, p.predicate)));
    }
    if !props.is_empty() && ens.provenance.dsl != "gp" {
        return Err(CliError::Usage("properties apply to gp ensembles; use --pair for mixtures".into()));
    }
    for (name, pred) in props {
        rows.push((name, estimate_property(ens.programs(), &pred).map_err(input)?));
    }
    if rows.is_empty() {
        return Err(CliError::Usage("give --property, --properties-file or --pair".into()));
    }
    let report = Report { rows };
    let mut text = if a.kv { report.key_values() } else { report.aligned() };
    if let Some(dep) = verdict {
        text.push_str(if a.kv { "dependent=" } else { "dependent: " });
        text.push_str(if dep { "yes\n" } else { "no\n" });
    }
    say(out, &text)
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("--probe expects start:end:count, found `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [s, e, n] = parts.as_slice() else {
        return Err(bad());
    };
    let (s, e): (f64, f64) = (s.parse().map_err(|_| bad())?, e.parse().map_err(|_| bad())?);
    let n: usize = n.parse().map_err(|_| bad())?;
    Ok(match n {
        0 => return Err(bad()),
        1 => vec![s],
        _ => (0..n).map(|i| s + (e - s) * i as f64 / (n - 1) as f64).collect(),
    })
}

pub fn cmd_forecast(a: &ForecastArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ens = load_ensemble(&a.ensemble)?;
    if ens.provenance.dsl != "gp" {
        return Err(CliError::Usage(format!("expected a gp ensemble, found dsl `{}`", ens.provenance.dsl)));
    }
    let kernels: Vec<Kernel> = ens
        .programs()
        .map(|e| Kernel::from_expr(e).map_err(input))
        .collect::<Result<_, _>>()?;
    let train = parse_series_csv(&read(&a.train)?)?;
    let heldout = a.heldout.as_deref().map(|p| read(p).and_then(|t| parse_series_csv(&t))).transpose()?;
    let probes = match (&a.probe, &heldout) {
        (Some(spec), _) => parse_grid(spec)?,
        (None, Some(h)) => h.xs().to_vec(),
        (None, None) => return Err(CliError::Usage("give --probe or --heldout".into())),
    };
    let standardize = ens.provenance.extra.get("standardize").is_some_and(|v| v == "true");
    let st = if standardize {
        Standardizer::fit(&train)
    } else {
        Standardizer {
            x_min: 0.0,
            x_span: 1.0,
            y_mean: 0.0,
            y_sd: 1.0,
        }
    };
    let train_s = st.apply(&train);
    let probes_s: Vec<f64> = probes.iter().map(|&x| st.x(x)).collect();
    let fc = ensemble_forecast(&kernels, &train_s, &probes_s).map_err(|e| CliError::Failed(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let draws: Vec<Vec<f64>> = fc.members.iter().map(|m| m.sample(&mut rng)).collect();

    let mut csv = String::from("x,mean,var");
    for i in 0..draws.len() {
        let _ = write!(csv, ",member{}", i + 1);
    }
    csv.push('\n');
    for (j, x) in probes.iter().enumerate() {
        let _ = write!(csv, "{x},{},{}", st.y_back(fc.mean[j]), fc.var[j] * st.y_sd * st.y_sd);
        for d in &draws {
            let _ = write!(csv, ",{}", st.y_back(d[j]));
        }
        csv.push('\n');
    }
    write_file(&a.out, &csv)?;
    let mut report = format!("members: {}\nprobes: {}\nwrote {}\n", kernels.len(), probes.len(), a.out.display());
    if let Some(h) = heldout {
        let h_s = st.apply(&h);
        let shift = h.len() as f64 * st.y_sd.ln();
        let scores = kernels
            .iter()
            .map(|k| gp_heldout_loglik(k, &train_s, &h_s).map(|l| l - shift))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Failed(e.to_string()))?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let pooled = log_sum_exp(&scores) - (scores.len() as f64).ln();
        let _ = writeln!(report, "heldout log-likelihood (member mean): {mean:.6}");
        let _ = writeln!(report, "heldout log-likelihood (pooled): {pooled:.6}");
    }
    say(out, &report)
}

fn parse_conditions(spec: Option<&str>, schema: &TableSchema) -> Result<Row, CliError> {
    let mut row: Row = vec![None; schema.len()];
    for part in spec.unwrap_or("").split(',').filter(|p| !p.trim().is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("condition `{part}` should look like name=value")))?;
        let col = schema
            .index(name.trim())
            .ok_or_else(|| CliError::Input(format!("condition on unknown column `{}`", name.trim())))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("condition `{part}`: not a number")))?;
        row[col] = Some(v);
    }
    Ok(row)
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ens = load_ensemble(&a.ensemble)?;
    let schema = ensemble_schema(&ens)?;
    let programs = mixture_programs(&ens, &schema)?;
    if programs.is_empty() {
        return Err(CliError::Input("ensemble is empty".into()));
    }
    let cond = parse_conditions(a.given.as_deref(), &schema)?;
    programs[0].check_conditions(&schema, &cond).map_err(input)?;
    let usable: Vec<&MixtureProgram> = programs.iter().filter(|p| p.logpdf(&cond).is_finite()).collect();
    if usable.is_empty() {
        return Err(CliError::Failed("conditions have zero density under every program".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let rows: Vec<Row> = (0..a.rows)
        .map(|_| {
            let p = usable[rng.random_range(0..usable.len())];
            p.simulate(&cond, &mut rng).into_iter().map(Some).collect()
        })
        .collect();
    let mut csv = String::new();
    let names: Vec<&str> = schema.columns().iter().map(|c| c.name.as_str()).collect();
    let types: Vec<String> = schema.columns().iter().map(|c| c.ty.to_string()).collect();
    let _ = writeln!(csv, "{}\n{}", names.join(","), types.join(","));
    for r in &rows {
        let _ = writeln!(csv, "{}", format_row(r));
    }
    write_file(&a.out, &csv)?;
    say(out, &format!("rows: {}\nprograms used: {}\nwrote {}\n", rows.len(), usable.len(), a.out.display()))
}

pub fn cmd_logpdf(a: &LogpdfArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ens = load_ensemble(&a.ensemble)?;
    let schema = ensemble_schema(&ens)?;
    let programs = mixture_programs(&ens, &schema)?;
    if programs.is_empty() {
        return Err(CliError::Input("ensemble is empty".into()));
    }
    let given = Table::from_csv(&read(&a.rows)?).map_err(input)?;
    let map: Vec<usize> = schema
        .columns()
        .iter()
        .map(|c| {
            given
                .schema()
                .index(&c.name)
                .ok_or_else(|| CliError::Input(format!("rows file lacks column `{}`", c.name)))
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<Row> = given.rows().iter().map(|r| map.iter().map(|&c| r[c]).collect()).collect();
    let table = Table::new(schema, rows).map_err(input)?;
    let k = programs.len() as f64;
    let mut csv = String::from("row,logpdf,sd\n");
    let mut total = 0.0;
    for (i, row) in table.rows().iter().enumerate() {
        let ls: Vec<f64> = programs.iter().map(|p| p.logpdf(row)).collect();
        let mean = ls.iter().sum::<f64>() / k;
        let sd = (ls.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / k).sqrt();
        total += mean;
        let _ = writeln!(csv, "{},{},{}", i + 1, format_num(mean), format_num(sd));
    }
    write_file(&a.out, &csv)?;
    let n = table.n_rows() as f64;
    say(
        out,
        &format!("rows: {}\nmean logpdf: {:.6}\nwrote {}\n", table.n_rows(), total / n, a.out.display()),
    )
}

fn translate_one(e: &Expr, schema: Option<&TableSchema>) -> Result<String, CliError> {
    if e.tag() == "partition" {
        let schema = schema.ok_or_else(|| CliError::Usage("a mixture program needs --schema".into()))?;
        let p = MixtureProgram::from_expr(e, schema).map_err(input)?;
        Ok(mixture_to_venture(&p).text)
    } else {
        gp_to_venture(e).map(|t| t.text).map_err(input)
    }
}

pub fn cmd_translate(a: &TranslateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = read(&a.input)?;
    let explicit = a
        .schema
        .as_deref()
        .map(TableSchema::from_compact)
        .transpose()
        .map_err(input)?;
    let mut written = Vec::new();
    if text.trim_start().starts_with('#') {
        let ens = load_ensemble(&a.input)?;
        let schema = match explicit {
            Some(s) => Some(s),
            None if ens.provenance.dsl == "mixture" => Some(ensemble_schema(&ens)?),
            None => None,
        };
        let width = ens.len().to_string().len().max(3);
        for (i, e) in ens.programs().enumerate() {
            let path = a.out.join(format!("program_{:0width$}.vnts", i + 1));
            write_file(&path, &translate_one(e, schema.as_ref())?)?;
            written.push(path);
        }
    } else {
        let e = parse(&text).map_err(|err| CliError::Input(format!("{}: {err}", a.input.display())))?;
        let stem = a.input.file_stem().map_or("program".into(), |s| s.to_string_lossy().into_owned());
        let path = a.out.join(format!("{stem}.vnts"));
        write_file(&path, &translate_one(&e, explicit.as_ref())?)?;
        written.push(path);
    }
    let mut report = String::new();
    for p in written {
        let _ = writeln!(report, "wrote {}", p.display());
    }
    say(out, &report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series_csv(ts: &TimeSeries) -> String {
        let mut s = String::from("x,y\n");
        for (x, y) in ts.xs().iter().zip(ts.ys()) {
            let _ = writeln!(s, "{x},{y}");
        }
        s
    }

    #[test]
    fn series_csv_round_trip_and_errors() {
        let ts = TimeSeries::new(vec![0.0, 1.5, 3.0], vec![1.0, -2.25, 0.5]).unwrap();
        assert_eq!(parse_series_csv(&series_csv(&ts)).unwrap(), ts);
        let swapped = parse_series_csv("y,x\n1,0\n2,1\n").unwrap();
        assert_eq!(swapped.xs(), &[0.0, 1.0]);
        let err = parse_series_csv("x,y\n1,2\n3,oops\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 3, column 2"), "{err}");
        assert!(parse_series_csv("x,y\n").is_err());
    }

    #[test]
    fn probe_grids() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("2:9:1").unwrap(), vec![2.0]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn conditions() {
        let schema = TableSchema::from_compact("a:numeric,b:count").unwrap();
        assert_eq!(parse_conditions(Some("b=3"), &schema).unwrap(), vec![None, Some(3.0)]);
        assert_eq!(parse_conditions(None, &schema).unwrap(), vec![None, None]);
        let err = parse_conditions(Some("zz=1"), &schema).unwrap_err();
        assert!(err.to_string().contains("zz"));
        assert_eq!(column_index(&schema, "2").unwrap(), 1);
        assert!(column_index(&schema, "3").is_err());
    }

    #[test]
    fn check_grammar_exit_codes() {
        let mut buf = Vec::new();
        cmd_check_grammar("gp", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("spectral radius: 0.78512481"), "{text}");
        let err = cmd_check_grammar("/nonexistent/grammar.txt", &mut Vec::new()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
