//! Command-line front end: loads model files, dispatches to the library, and
//! emits every result in one of two formats derived from the same records —
//! `records` (line-oriented `record=<kind> key=value ...` with a stable field
//! order, meant for scripts and tests) and `human` (the default).
//!
//! Exit codes: 0 for results, 1 for FAIL-type verdicts (richness or bounds
//! failures, a violated contour-energy bound), 2 for usage and parse errors,
//! 3 for exceeded enumeration caps, 4 for internal errors.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num::{BigInt, BigRational, Zero};

use crate::contours::{
    contour_energy, contour_to_text, enumerate_contours, peierls_estimate, Contour, ContourContext,
};
use crate::exact::{bounds_check, frozen_collar_histogram, z_exact};
use crate::expansion::{
    contour_partition, decay_diagnostic, free_energy_truncated, stable_phases,
    DEFAULT_STABILITY_TOLERANCE,
};
use crate::geometry::{Region, Site};
use crate::groundstates::{find_ground_states, GroundStateSet};
use crate::hp::Hp;
use crate::model::{
    check_richness, model_to_text, parse_model, BoundaryCondition, Model, PeriodicState,
    RichnessCaps, RichnessMethod, RichnessVerdict,
};
use crate::reduction::{block_reduce, choose_block};
use crate::{Error, Result};

/// Default period cap for the ground-state search behind boundary labels.
const DEFAULT_LCAP: i64 = 2;

/// Default cap on patterns per torus during the ground-state search.
const DEFAULT_MAX_PATTERNS: u64 = 1_000_000;

/// Default cap on target spins for block reduction.
const DEFAULT_MAX_SPINS: usize = 4096;

#[derive(Parser, Debug)]
#[command(
    name = "contourlab",
    about = "Contour ensembles, ground states and cluster expansions for periodic lattice models",
    disable_version_flag = true
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Indented key-value blocks.
    Human,
    /// One `record=<kind> key=value ...` line per record.
    Records,
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Path to a model file.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Largest period per axis tried by the ground-state search.
    #[arg(long, default_value_t = DEFAULT_LCAP)]
    lcap: i64,
    /// Most spin patterns examined per torus by the ground-state search.
    #[arg(long, default_value_t = DEFAULT_MAX_PATTERNS)]
    max_patterns: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a model file and check the richness assumption.
    Validate {
        #[command(flatten)]
        model: ModelArg,
        /// Collar width; defaults to the model's declared value.
        #[arg(long)]
        collar: Option<u64>,
    },
    /// Enumerate the periodic ground states.
    Groundstates {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Recode the model onto blocks so every ground state becomes constant.
    Reduce {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        search: SearchArgs,
        /// Block side; must be a multiple of every ground-state period.
        #[arg(long)]
        block: Option<i64>,
        /// Largest admissible block-pattern alphabet.
        #[arg(long, default_value_t = DEFAULT_MAX_SPINS)]
        max_spins: usize,
        /// Write the reduced model file here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate contours up to a support size.
    Contours {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        search: SearchArgs,
        /// Largest support size enumerated.
        #[arg(long, default_value_t = 9)]
        kmax: usize,
        /// Restrict to one surrounding ground-state label.
        #[arg(long)]
        sign: Option<String>,
    },
    /// Estimate the Peierls constant min Φ/|supp| up to a support size.
    Peierls {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        search: SearchArgs,
        /// Largest support size enumerated.
        #[arg(long, default_value_t = 9)]
        kmax: usize,
    },
    /// Exact partition function by brute-force enumeration.
    Zexact {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        search: SearchArgs,
        /// Box side lengths, e.g. `5` or `5,4`.
        #[arg(long, value_name = "LENS", conflicts_with = "torus")]
        r#box: Option<String>,
        /// Torus periods, e.g. `8` or `8,6`.
        #[arg(long, value_name = "LENS")]
        torus: Option<String>,
        /// Boundary condition: `free` or a ground-state label.
        #[arg(long, default_value = "free")]
        bc: String,
        /// Inverse temperature, as an integer, fraction or decimal.
        #[arg(long)]
        beta: String,
        /// Additionally pin this many outer rings of a box to the boundary
        /// state, restricting the sum to the collar-conditioned ensemble.
        #[arg(long, default_value_t = 0)]
        collar: u64,
    },
    /// Partition function resummed over compatible contour families.
    Zcontour {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        search: SearchArgs,
        /// Box side lengths, e.g. `5` or `5,4`.
        #[arg(long, value_name = "LENS")]
        r#box: String,
        /// Ground-state label on the boundary.
        #[arg(long)]
        bc: String,
        /// Inverse temperature.
        #[arg(long)]
        beta: String,
    },
    /// Truncated polymer series for the specific free energy.
    Freeenergy {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        search: SearchArgs,
        /// Inverse temperature.
        #[arg(long)]
        beta: String,
        /// Truncation order: largest total polymer support size.
        #[arg(long, default_value_t = 9)]
        kmax: usize,
        /// Restrict to one ground-state label.
        #[arg(long)]
        sign: Option<String>,
    },
    /// Classify ground states as stable or metastable.
    Phases {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        search: SearchArgs,
        /// Inverse temperature.
        #[arg(long)]
        beta: String,
        /// Truncation order for the free energies.
        #[arg(long, default_value_t = 9)]
        kmax: usize,
        /// Free-energy tolerance per site for the stable set.
        #[arg(long, default_value_t = DEFAULT_STABILITY_TOLERANCE)]
        tolerance: f64,
    },
    /// Exact connected correlations against distance, with a decay fit.
    Correlate {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        search: SearchArgs,
        /// Box side length.
        #[arg(long)]
        r#box: i64,
        /// Ground-state label on the boundary.
        #[arg(long)]
        bc: String,
        /// Inverse temperature.
        #[arg(long)]
        beta: String,
        /// Comma-separated distances, at least three.
        #[arg(long)]
        distances: String,
        /// Comma-separated observable values, one per spin; defaults to
        /// `1,-1` for two-spin models.
        #[arg(long)]
        obs: Option<String>,
    },
    /// Measure the volume and boundary partition-function bounds.
    Bounds {
        #[command(flatten)]
        model: ModelArg,
        /// Inverse temperature.
        #[arg(long)]
        beta: String,
        /// Comma-separated window sides.
        #[arg(long, default_value = "3,4")]
        sides: String,
    },
}

/// One emitted record: a kind plus ordered key-value fields.
struct Record {
    kind: &'static str,
    fields: Vec<(&'static str, String)>,
}

impl Record {
    fn new(kind: &'static str) -> Self {
        Record {
            kind,
            fields: Vec::new(),
        }
    }

    fn field(mut self, key: &'static str, value: impl ToString) -> Self {
        self.fields.push((key, value.to_string()));
        self
    }
}

fn render(records: &[Record], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Records => {
            for r in records {
                let _ = write!(out, "record={}", r.kind);
                for (k, v) in &r.fields {
                    if v.is_empty() || v.contains(' ') {
                        let _ = write!(out, " {k}=\"{v}\"");
                    } else {
                        let _ = write!(out, " {k}={v}");
                    }
                }
                out.push('\n');
            }
        }
        Format::Human => {
            for (i, r) in records.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                let _ = writeln!(out, "{}", r.kind);
                let width = r.fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                for (k, v) in &r.fields {
                    let _ = writeln!(out, "  {k:width$}  {v}");
                }
            }
        }
    }
    out
}

/// Parses an inverse temperature given as `8`, `1/2` or `0.25`, exactly.
fn parse_beta(s: &str) -> Result<BigRational> {
    let bad = |s: &str| Error::BadInput(format!("cannot read {s} as an inverse temperature"));
    let value = if let Some((a, b)) = s.split_once('/') {
        let num: BigInt = a.trim().parse().map_err(|_| bad(s))?;
        let den: BigInt = b.trim().parse().map_err(|_| bad(s))?;
        if den.is_zero() {
            return Err(bad(s));
        }
        BigRational::new(num, den)
    } else if let Some((a, b)) = s.trim().split_once('.') {
        let (negative, a) = match a.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, a),
        };
        let digits = |t: &str| t.bytes().all(|c| c.is_ascii_digit());
        if !digits(a) || b.is_empty() || !digits(b) {
            return Err(bad(s));
        }
        let whole: BigInt = if a.is_empty() {
            BigInt::zero()
        } else {
            a.parse().map_err(|_| bad(s))?
        };
        let frac: BigInt = b.parse().map_err(|_| bad(s))?;
        let scale = BigInt::from(10u32).pow(b.len() as u32);
        let magnitude = BigRational::new(whole * &scale + frac, scale);
        if negative {
            -magnitude
        } else {
            magnitude
        }
    } else {
        BigRational::from(s.trim().parse::<BigInt>().map_err(|_| bad(s))?)
    };
    if value < BigRational::zero() {
        return Err(Error::BadInput(
            "the inverse temperature must be nonnegative".into(),
        ));
    }
    Ok(value)
}

/// Parses `5` (repeated per axis) or a comma list with one entry per axis.
fn parse_lens(s: &str, dim: usize) -> Result<Vec<i64>> {
    let parts: Vec<&str> = s.split(',').collect();
    let mut lens = Vec::with_capacity(dim);
    for p in &parts {
        lens.push(p.trim().parse::<i64>().map_err(|_| {
            Error::BadInput(format!("cannot read {s} as side lengths"))
        })?);
    }
    if lens.len() == 1 && dim > 1 {
        return Ok(vec![lens[0]; dim]);
    }
    if lens.len() != dim {
        return Err(Error::BadInput(format!(
            "{} side lengths given for {dim} dimensions",
            lens.len()
        )));
    }
    Ok(lens)
}

fn parse_i64_list(s: &str, what: &str) -> Result<Vec<i64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<i64>()
                .map_err(|_| Error::BadInput(format!("cannot read {s} as {what}")))
        })
        .collect()
}

fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}

fn ground_states(model: &Model, search: &SearchArgs) -> Result<GroundStateSet> {
    find_ground_states(model, search.lcap, search.max_patterns)
}

fn state_by_label<'a>(set: &'a GroundStateSet, label: &str) -> Result<&'a PeriodicState> {
    set.states.iter().find(|s| s.label == label).ok_or_else(|| {
        let known: Vec<&str> = set.states.iter().map(|s| s.label.as_str()).collect();
        Error::BadInput(format!(
            "unknown ground-state label {label}; found: {}",
            known.join(", ")
        ))
    })
}

fn fmt_lens(lens: &[i64]) -> String {
    lens.iter()
        .map(i64::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x < 0.0 {
            "-inf".into()
        } else {
            "inf".into()
        }
    } else {
        format!("{x}")
    }
}

fn fmt_option<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".into(), T::to_string)
}

fn model_record(model: &Model) -> Record {
    Record::new("model")
        .field("dim", model.dim())
        .field("offsets", model.num_offsets())
        .field("spins", model.spin_names().join(","))
        .field("terms", model.terms().len())
        .field("collar", model.collar())
        .field("finite", model.all_finite())
}

fn richness_records(model: &Model, report: &crate::model::RichnessReport) -> Vec<Record> {
    let verdict = match report.verdict {
        RichnessVerdict::Pass => "pass",
        RichnessVerdict::Fail => "fail",
        RichnessVerdict::Unknown => "unknown",
    };
    let method = match &report.method {
        RichnessMethod::AllFinite => "all-finite".to_string(),
        RichnessMethod::NeutralSpin(s) => format!("neutral-spin:{s}"),
        RichnessMethod::WindowSearch {
            windows_checked,
            configs_checked,
        } => format!("window-search:{windows_checked}:{configs_checked}"),
    };
    let mut out = vec![Record::new("richness")
        .field("collar", report.collar)
        .field("verdict", verdict)
        .field("method", method)];
    if let Some(w) = &report.witness {
        let assignment = w
            .sites
            .iter()
            .zip(&w.spins)
            .map(|(s, &sp)| format!("{s}={}", model.spin_name(sp)))
            .collect::<Vec<_>>()
            .join(" ");
        out.push(
            Record::new("witness")
                .field("sites", w.sites.len())
                .field("kept", w.kept_sites.len())
                .field("assignment", assignment),
        );
    }
    out
}

fn contour_pool(ctx: &ContourContext, sign: &str, kmax: usize) -> Result<Vec<Contour>> {
    let mut out = Vec::new();
    for sub in 0..ctx.model().num_offsets() {
        let anchor = Site::new(vec![0; ctx.model().dim()], sub);
        out.extend(enumerate_contours(ctx, sign, kmax, &anchor)?);
    }
    out.sort();
    Ok(out)
}

/// Runs one parsed invocation, writing the rendered report to `out`; returns
/// the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> i32 {
    let format = cli.format;
    match dispatch(cli.command) {
        Ok((records, code)) => {
            let _ = out.write_all(render(&records, format).as_bytes());
            code
        }
        Err(e) => {
            let code = match e {
                Error::CapExceeded { .. } => 3,
                Error::Internal(_) | Error::Io(_) => 4,
                _ => 2,
            };
            let records = vec![Record::new("error")
                .field("code", code)
                .field("message", e.to_string())];
            let _ = out.write_all(render(&records, format).as_bytes());
            code
        }
    }
}

fn dispatch(command: Command) -> Result<(Vec<Record>, i32)> {
    match command {
        Command::Validate { model, collar } => {
            let m = load_model(&model.model)?;
            let n = collar.unwrap_or_else(|| m.collar());
            let report = check_richness(&m, n, &RichnessCaps::default())?;
            let mut records = vec![model_record(&m)];
            records.extend(richness_records(&m, &report));
            let code = i32::from(report.verdict == RichnessVerdict::Fail);
            Ok((records, code))
        }
        Command::Groundstates { model, search } => {
            let m = load_model(&model.model)?;
            let set = ground_states(&m, &search)?;
            let mut records = vec![Record::new("groundstates")
                .field("count", set.states.len())
                .field("energy", &set.specific_energy)
                .field("lcap", set.lcap)
                .field("complete", !set.maybe_incomplete)];
            for st in &set.states {
                let periods = st
                    .periods
                    .iter()
                    .map(i64::to_string)
                    .collect::<Vec<_>>()
                    .join(",");
                let spins = st
                    .spins
                    .iter()
                    .map(|&s| m.spin_name(s).to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                records.push(
                    Record::new("groundstate")
                        .field("label", &st.label)
                        .field("periods", periods)
                        .field("constant", st.is_constant().is_some())
                        .field("spins", spins),
                );
            }
            Ok((records, 0))
        }
        Command::Reduce {
            model,
            search,
            block,
            max_spins,
            out,
        } => {
            let m = load_model(&model.model)?;
            let set = ground_states(&m, &search)?;
            let l = block.unwrap_or_else(|| choose_block(&m, &set.states));
            let red = block_reduce(&m, &set.states, l, max_spins)?;
            let mut records = vec![Record::new("reduce")
                .field("block", red.l)
                .field("source_spins", red.source.num_spins())
                .field("target_spins", red.target.num_spins())
                .field("states", red.state_map.len())];
            for (st, spin) in &red.state_map {
                records.push(
                    Record::new("statemap")
                        .field("label", &st.label)
                        .field("target", red.target.spin_name(*spin)),
                );
            }
            if let Some(path) = out {
                std::fs::write(&path, model_to_text(&red.target))?;
                records.push(Record::new("written").field("path", path.display()));
            }
            Ok((records, 0))
        }
        Command::Contours {
            model,
            search,
            kmax,
            sign,
        } => {
            let m = load_model(&model.model)?;
            let set = ground_states(&m, &search)?;
            let ctx = ContourContext::new(&m, &set.states)?;
            let labels: Vec<String> = match sign {
                Some(s) => {
                    state_by_label(&set, &s)?;
                    vec![s]
                }
                None => set.states.iter().map(|s| s.label.clone()).collect(),
            };
            let mut records = Vec::new();
            for label in &labels {
                let pool = contour_pool(&ctx, label, kmax)?;
                records.push(
                    Record::new("contours")
                        .field("sign", label)
                        .field("kmax", kmax)
                        .field("count", pool.len()),
                );
                for c in &pool {
                    records.push(
                        Record::new("contour")
                            .field("sign", &c.sign)
                            .field("size", c.size())
                            .field("interiors", c.interiors.len())
                            .field("phi", contour_energy(&ctx, c)?)
                            .field("text", contour_to_text(&m, c)),
                    );
                }
            }
            Ok((records, 0))
        }
        Command::Peierls {
            model,
            search,
            kmax,
        } => {
            let m = load_model(&model.model)?;
            let set = ground_states(&m, &search)?;
            let ctx = ContourContext::new(&m, &set.states)?;
            let report = peierls_estimate(&ctx, kmax)?;
            let mut records = vec![Record::new("peierls")
                .field("kmax", report.kmax)
                .field("contours", report.contours_checked)
                .field("tau", fmt_option(&report.tau_hat))
                .field("violated", report.violated())];
            if let Some(w) = &report.witness {
                records.push(
                    Record::new("peierls-witness")
                        .field("size", w.size())
                        .field("phi", fmt_option(&report.witness_energy))
                        .field("text", contour_to_text(&m, w)),
                );
            }
            Ok((records, i32::from(report.violated())))
        }
        Command::Zexact {
            model,
            search,
            r#box,
            torus,
            bc,
            beta,
            collar,
        } => {
            let m = load_model(&model.model)?;
            let beta = parse_beta(&beta)?;
            let (region, where_) = match (&r#box, &torus) {
                (Some(lens), None) => {
                    let lens = parse_lens(lens, m.dim())?;
                    (
                        Region::cell_box(&lens, m.num_offsets())?,
                        format!("box:{}", fmt_lens(&lens)),
                    )
                }
                (None, Some(lens)) => {
                    let lens = parse_lens(lens, m.dim())?;
                    (
                        Region::torus(&lens, m.num_offsets())?,
                        format!("torus:{}", fmt_lens(&lens)),
                    )
                }
                _ => {
                    return Err(Error::BadInput(
                        "give exactly one of --box and --torus".into(),
                    ))
                }
            };
            let condition = if bc == "free" {
                BoundaryCondition::Free
            } else {
                let set = ground_states(&m, &search)?;
                BoundaryCondition::State(state_by_label(&set, &bc)?.clone())
            };
            let record = if collar > 0 {
                let state = match &condition {
                    BoundaryCondition::State(s) => s,
                    _ => {
                        return Err(Error::BadInput(
                            "--collar needs a ground-state boundary label".into(),
                        ))
                    }
                };
                let hist = frozen_collar_histogram(&m, &region, state, collar)?;
                let mut hp = Hp::new();
                let ln = hist.ln_z(&mut hp, &beta)?;
                Record::new("zexact")
                    .field("region", where_)
                    .field("bc", &bc)
                    .field("beta", &beta)
                    .field("collar", collar)
                    .field("route", "histogram")
                    .field("lnz", fmt_f64(crate::hp::to_f64(&ln)))
                    .field("lnz_text", format!("{ln}"))
                    .field("count", hist.total())
                    .field("warning", "-")
            } else {
                let r = z_exact(&m, &region, &condition, &beta)?;
                Record::new("zexact")
                    .field("region", where_)
                    .field("bc", &bc)
                    .field("beta", &beta)
                    .field("collar", 0)
                    .field("route", r.route.as_str())
                    .field("lnz", fmt_f64(r.ln_z_f64))
                    .field("lnz_text", &r.ln_z_text)
                    .field("count", fmt_option(&r.count))
                    .field("warning", r.warning.as_deref().unwrap_or("-"))
            };
            Ok((vec![record], 0))
        }
        Command::Zcontour {
            model,
            search,
            r#box,
            bc,
            beta,
        } => {
            let m = load_model(&model.model)?;
            let beta = parse_beta(&beta)?;
            let lens = parse_lens(&r#box, m.dim())?;
            let region = Region::cell_box(&lens, m.num_offsets())?;
            let set = ground_states(&m, &search)?;
            state_by_label(&set, &bc)?;
            let ctx = ContourContext::new(&m, &set.states)?;
            let r = contour_partition(&ctx, &region, &bc, &beta)?;
            let records = vec![Record::new("zcontour")
                .field("region", format!("box:{}", fmt_lens(&lens)))
                .field("bc", &bc)
                .field("beta", &beta)
                .field("lnz", fmt_f64(r.ln_z_f64))
                .field("lnz_text", format!("{}", r.ln_z))
                .field("families", r.families)
                .field("pool", r.pool_size)
                .field("base", &r.base_energy)];
            Ok((records, 0))
        }
        Command::Freeenergy {
            model,
            search,
            beta,
            kmax,
            sign,
        } => {
            let m = load_model(&model.model)?;
            let beta = parse_beta(&beta)?;
            let set = ground_states(&m, &search)?;
            let ctx = ContourContext::new(&m, &set.states)?;
            let labels: Vec<String> = match sign {
                Some(s) => {
                    state_by_label(&set, &s)?;
                    vec![s]
                }
                None => set.states.iter().map(|s| s.label.clone()).collect(),
            };
            let mut records = Vec::new();
            for label in &labels {
                let r = free_energy_truncated(&ctx, label, &beta, kmax)?;
                records.push(
                    Record::new("freeenergy")
                        .field("label", &r.label)
                        .field("order", r.order)
                        .field("ground", &r.ground_energy)
                        .field("f", fmt_f64(r.free_energy_f64))
                        .field("terms", r.polymer_terms)
                        .field("tau", fmt_option(&r.tau_hat.map(fmt_f64)))
                        .field("threshold", fmt_f64(r.threshold))
                        .field("converged", r.converged),
                );
            }
            Ok((records, 0))
        }
        Command::Phases {
            model,
            search,
            beta,
            kmax,
            tolerance,
        } => {
            let m = load_model(&model.model)?;
            let beta = parse_beta(&beta)?;
            let set = ground_states(&m, &search)?;
            let ctx = ContourContext::new(&m, &set.states)?;
            let r = stable_phases(&ctx, &beta, kmax, tolerance)?;
            let mut records = vec![Record::new("phases")
                .field("stable", r.stable.join(","))
                .field("tolerance", fmt_f64(r.tolerance))
                .field("order", r.order)
                .field("tau", fmt_option(&r.tau_hat.map(fmt_f64)))
                .field("converged", r.converged)];
            for e in &r.entries {
                records.push(
                    Record::new("phase")
                        .field("label", &e.label)
                        .field("f", fmt_f64(e.free_energy))
                        .field("gap", fmt_f64(e.gap))
                        .field("stable", e.stable),
                );
            }
            Ok((records, 0))
        }
        Command::Correlate {
            model,
            search,
            r#box,
            bc,
            beta,
            distances,
            obs,
        } => {
            let m = load_model(&model.model)?;
            let beta = parse_beta(&beta)?;
            let set = ground_states(&m, &search)?;
            let state = state_by_label(&set, &bc)?;
            let ds = parse_i64_list(&distances, "distances")?;
            let observable = match obs {
                Some(s) => parse_i64_list(&s, "observable values")?,
                None if m.num_spins() == 2 => vec![1, -1],
                None => {
                    return Err(Error::BadInput(
                        "give --obs with one value per spin for models with more than two spins"
                            .into(),
                    ))
                }
            };
            let r = decay_diagnostic(&m, state, &beta, r#box, &ds, &observable)?;
            let mut records = Vec::new();
            for p in &r.points {
                records.push(
                    Record::new("correlation")
                        .field("distance", p.distance)
                        .field("value", fmt_f64(p.correlation))
                        .field("ln", fmt_f64(p.ln_abs)),
                );
            }
            records.push(
                Record::new("decay")
                    .field("slope", fmt_option(&r.slope.map(fmt_f64)))
                    .field("intercept", fmt_option(&r.intercept.map(fmt_f64)))
                    .field("residual", fmt_option(&r.residual_norm.map(fmt_f64)))
                    .field("note", r.note.as_deref().unwrap_or("-")),
            );
            Ok((records, 0))
        }
        Command::Bounds { model, beta, sides } => {
            let m = load_model(&model.model)?;
            let beta = parse_beta(&beta)?;
            let sides = parse_i64_list(&sides, "window sides")?;
            let r = bounds_check(&m, &beta, &sides)?;
            let mut records = vec![Record::new("bounds")
                .field("pass", r.pass)
                .field("c", fmt_f64(r.measured_c))
                .field("ratio", fmt_f64(r.ratio_constant))
                .field("instances", r.instances)
                .field("zeros", r.zero_partitions)
                .field("witness", r.witness.as_deref().unwrap_or("-"))];
            records.extend(richness_records(&m, &r.richness));
            Ok((records, i32::from(!r.pass)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_strings_parse_exactly() {
        assert_eq!(parse_beta("2").unwrap(), BigRational::from(BigInt::from(2)));
        assert_eq!(
            parse_beta("1/2").unwrap(),
            BigRational::new(BigInt::from(1), BigInt::from(2))
        );
        assert_eq!(
            parse_beta("0.25").unwrap(),
            BigRational::new(BigInt::from(1), BigInt::from(4))
        );
        assert_eq!(parse_beta("0.5").unwrap(), parse_beta("1/2").unwrap());
        assert!(parse_beta("-1").is_err());
        assert!(parse_beta("x").is_err());
        assert!(parse_beta("1/0").is_err());
    }

    #[test]
    fn lens_strings_expand_per_axis() {
        assert_eq!(parse_lens("5", 2).unwrap(), vec![5, 5]);
        assert_eq!(parse_lens("5,4", 2).unwrap(), vec![5, 4]);
        assert!(parse_lens("5,4,3", 2).is_err());
        assert!(parse_lens("a", 2).is_err());
    }

    #[test]
    fn records_quote_spaced_values() {
        let recs = vec![Record::new("demo")
            .field("plain", "x")
            .field("spaced", "a b")];
        let text = render(&recs, Format::Records);
        assert_eq!(text, "record=demo plain=x spaced=\"a b\"\n");
        let human = render(&recs, Format::Human);
        assert!(human.starts_with("demo\n"));
        assert!(human.contains("plain"));
    }
}
