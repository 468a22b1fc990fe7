//! `twc`: command-line front end for the bounded-treewidth circuit toolkit.
//!
//! Exit codes: 0 = success (or a true decision), 1 = a false decision from
//! `equiv`/`reach`, 2 = any input, parse, or processing error.

use std::collections::BTreeMap;
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::RngCore;
use serde_json::{json, Map, Value};

use twcircuit::circuit::{parse_circuit, serialize_circuit, Formula};
use twcircuit::field::FieldSpec;
use twcircuit::gen::{gen_instance, GenConfig, Shape};
use twcircuit::poly::{equiv_exact, equiv_random, expand, ExpandOptions};
use twcircuit::reach::{solve_reach_telemetry, ReachInstance};
use twcircuit::td::{
    balance_td, parse_gr, parse_td, root_with_output, serialize_td, Graph, TreeDecomposition,
};
use twcircuit::traceback::{brent_balance, traceback, TracebackConfig, TracebackMode};
use twcircuit::transforms::{arithmetize, dearithmetize, md_transform, preprocess};
use twcircuit::width_sim::width_simulate;
use twcircuit::Circuit;

#[derive(Parser)]
#[command(name = "twc", version, about = "Bounded-treewidth circuit toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Expand,
    Random,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Exact identity; requires a multiplicatively disjoint circuit.
    Md,
    /// Exact identity, preserving syntactic multilinearity.
    Sm,
    /// Pointwise agreement over GF(2).
    Gf2,
    /// Pointwise agreement over GF(p); give p with --field.
    Gfp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ShapeArg {
    Arith,
    Md,
    Sm,
    Bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a circuit and optionally check a decomposition against it.
    Validate {
        circuit: PathBuf,
        td: Option<PathBuf>,
    },
    /// Report size, depth, degree, and decomposition statistics.
    Stats {
        circuit: PathBuf,
        td: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Expand a circuit into its polynomial.
    Expand {
        circuit: PathBuf,
        /// exact, gf2, or a prime modulus.
        #[arg(long, default_value = "exact")]
        field: String,
        /// Abort when any intermediate polynomial exceeds this many terms.
        #[arg(long)]
        max_size: Option<usize>,
    },
    /// Decide whether two circuits compute the same polynomial.
    Equiv {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Expand)]
        method: Method,
        /// Field for expansion (exact, gf2, or a prime) or the prime modulus
        /// for random trials.
        #[arg(long)]
        field: Option<String>,
        #[arg(long, default_value_t = 20)]
        trials: u32,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_size: Option<usize>,
    },
    /// Balance a tree decomposition to logarithmic depth.
    BalanceTd {
        /// Graph (.gr) or circuit file the decomposition belongs to.
        input: PathBuf,
        td: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Buffer a circuit so every bag gate's cone is bag-aligned.
    Preprocess {
        circuit: PathBuf,
        td: PathBuf,
        #[arg(long)]
        out_circuit: Option<PathBuf>,
        #[arg(long)]
        out_td: Option<PathBuf>,
    },
    /// Flatten a circuit into an equivalent formula along its decomposition.
    Flatten {
        circuit: PathBuf,
        td: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Prime modulus for --mode gfp.
        #[arg(long)]
        field: Option<u64>,
        /// Hard cap on intermediate formula sizes.
        #[arg(long)]
        max_size: Option<u64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Restructure a formula to logarithmic depth.
    Brent {
        formula: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Translate a boolean circuit to GF(2) arithmetic.
    Arith {
        circuit: PathBuf,
        td: PathBuf,
        #[arg(long)]
        out_circuit: Option<PathBuf>,
        #[arg(long)]
        out_td: Option<PathBuf>,
    },
    /// Translate a GF(2) formula back to boolean gates.
    Dearith {
        formula: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Rewrite a leveled circuit into a multiplicatively disjoint one.
    MdTransform {
        circuit: PathBuf,
        #[arg(long)]
        out_circuit: Option<PathBuf>,
        #[arg(long)]
        out_td: Option<PathBuf>,
    },
    /// Re-level a circuit along a decomposition, keeping levels narrow.
    WidthSim {
        circuit: PathBuf,
        td: PathBuf,
        #[arg(long)]
        json: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Decide directed reachability via the circuit pipeline.
    Reach {
        graph: PathBuf,
        td: PathBuf,
        s: u32,
        t: u32,
        #[arg(long)]
        telemetry: bool,
    },
    /// Generate a seeded random circuit with a matching decomposition.
    Gen {
        #[arg(long, default_value_t = 30)]
        gates: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        vars: usize,
        #[arg(long, value_enum, default_value_t = ShapeArg::Arith)]
        shape: ShapeArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_circuit: Option<PathBuf>,
        #[arg(long)]
        out_td: Option<PathBuf>,
    },
}

fn main() {
    // Die quietly instead of panicking when stdout closes early (`twc ... | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let code = match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    };
    std::process::exit(code);
}

type CmdResult = Result<i32, Box<dyn Error>>;

fn read_circuit(path: &Path) -> Result<Circuit, Box<dyn Error>> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok(parse_circuit(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn read_formula(path: &Path) -> Result<Formula, Box<dyn Error>> {
    let c = read_circuit(path)?;
    // The on-disk format shares repeated variable leaves; split them back out.
    Ok(Formula::from_circuit_splitting_leaves(c)
        .map_err(|e| format!("{}: {e}", path.display()))?)
}

fn read_td(path: &Path) -> Result<TreeDecomposition, Box<dyn Error>> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok(parse_td(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn read_graph(path: &Path, directed: bool) -> Result<Graph, Box<dyn Error>> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok(parse_gr(&text, directed).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Box<dyn Error>> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| format!("cannot write {}: {e}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Field argument: `exact`, `gf2`, or a prime written in decimal.
fn parse_field(arg: &str) -> Result<FieldSpec, Box<dyn Error>> {
    match arg {
        "exact" => Ok(FieldSpec::ExactInteger),
        "gf2" | "2" => Ok(FieldSpec::Gf2),
        other => {
            let p: u64 = other.parse().map_err(|_| format!("bad field {other}"))?;
            Ok(FieldSpec::gfp(p)?)
        }
    }
}

fn expand_options(max_size: Option<usize>) -> ExpandOptions {
    match max_size {
        Some(max_terms) => ExpandOptions { max_terms },
        None => ExpandOptions::default(),
    }
}

/// Print a report as canonical JSON (sorted keys) or `key value` lines.
fn print_report(map: Map<String, Value>, as_json: bool) {
    if as_json {
        println!("{}", Value::Object(map));
    } else {
        for (k, v) in &map {
            println!("{k} {v}");
        }
    }
}

fn dispatch(cmd: Cmd) -> CmdResult {
    match cmd {
        Cmd::Validate { circuit, td } => {
            let c = read_circuit(&circuit)?;
            if let Some(td_path) = td {
                let td = read_td(&td_path)?;
                let violations = td.validate(&Graph::of_circuit(&c));
                if !violations.is_empty() {
                    for v in violations {
                        eprintln!("violation: {v}");
                    }
                    return Err("decomposition does not fit the circuit".into());
                }
            }
            println!("ok");
            Ok(0)
        }
        Cmd::Stats { circuit, td, json } => {
            let c = read_circuit(&circuit)?;
            let mut m = Map::new();
            m.insert("size_ops".into(), json!(c.size_ops()));
            m.insert("size_total".into(), json!(c.size_total()));
            m.insert("depth".into(), json!(c.depth()));
            m.insert(
                "formal_degree".into(),
                json!(u64::try_from(c.formal_degree()).unwrap_or(u64::MAX)),
            );
            m.insert("mult_chain_length".into(), json!(c.mult_chain_length()));
            m.insert("is_md".into(), json!(c.is_multiplicatively_disjoint()));
            m.insert("is_sm".into(), json!(c.is_syntactically_multilinear()));
            if let Ok(levels) = c.infer_levels() {
                let mut per_level: BTreeMap<u32, usize> = BTreeMap::new();
                for l in levels {
                    *per_level.entry(l).or_default() += 1;
                }
                let width = per_level.values().copied().max().unwrap_or(0);
                m.insert("circuit_width".into(), json!(width));
            }
            if let Some(td_path) = td {
                let td = read_td(&td_path)?;
                m.insert("td_width".into(), json!(td.width()));
                m.insert("td_depth".into(), json!(td.depth()));
            }
            print_report(m, json);
            Ok(0)
        }
        Cmd::Expand { circuit, field, max_size } => {
            let c = read_circuit(&circuit)?;
            let spec = parse_field(&field)?;
            let poly = expand(&c, &spec, expand_options(max_size))?;
            println!("{poly}");
            Ok(0)
        }
        Cmd::Equiv { a, b, method, field, trials, seed, max_size } => {
            let ca = read_circuit(&a)?;
            let cb = read_circuit(&b)?;
            let equal = match method {
                Method::Expand => {
                    let spec = parse_field(field.as_deref().unwrap_or("exact"))?;
                    equiv_exact(&ca, &cb, &spec, expand_options(max_size))?
                }
                Method::Random => {
                    let p: u64 = match field.as_deref() {
                        Some(f) => f.parse().map_err(|_| format!("bad prime {f}"))?,
                        None => (1 << 31) - 1,
                    };
                    let seed = seed.unwrap_or_else(|| rand::thread_rng().next_u64());
                    println!("# seed {seed}");
                    equiv_random(&ca, &cb, p, trials, seed)?
                }
            };
            println!("{}", if equal { "equivalent" } else { "not equivalent" });
            Ok(if equal { 0 } else { 1 })
        }
        Cmd::BalanceTd { input, td, out } => {
            let g = if input.extension().is_some_and(|e| e == "gr") {
                read_graph(&input, false)?
            } else {
                Graph::of_circuit(&read_circuit(&input)?)
            };
            let td = read_td(&td)?;
            let balanced = balance_td(&g, &td)?;
            emit(out.as_deref(), &serialize_td(&balanced))?;
            Ok(0)
        }
        Cmd::Preprocess { circuit, td, out_circuit, out_td } => {
            let c = read_circuit(&circuit)?;
            let td = read_td(&td)?;
            let rooted = root_with_output(&td, &c);
            let pair = preprocess(&c, &rooted)?;
            emit(out_circuit.as_deref(), &serialize_circuit(&pair.circuit)?)?;
            emit(out_td.as_deref(), &serialize_td(&pair.td))?;
            Ok(0)
        }
        Cmd::Flatten { circuit, td, mode, field, max_size, out } => {
            let c = read_circuit(&circuit)?;
            let td = read_td(&td)?;
            let tb_mode = match mode {
                Mode::Md => TracebackMode::MdExact,
                Mode::Sm => TracebackMode::SynMultilinear,
                Mode::Gf2 => TracebackMode::FiniteField(2),
                Mode::Gfp => {
                    let p = field.ok_or("--mode gfp needs --field <p>")?;
                    FieldSpec::gfp(p)?;
                    TracebackMode::FiniteField(p)
                }
            };
            let mut cfg = TracebackConfig::new(tb_mode);
            if let Some(cap) = max_size {
                cfg.max_formula_size = cap;
            }
            let rooted = root_with_output(&td, &c);
            let pair = preprocess(&c, &rooted)?;
            let f = traceback(&pair, &cfg)?;
            emit(out.as_deref(), &serialize_circuit(f.circuit())?)?;
            Ok(0)
        }
        Cmd::Brent { formula, out } => {
            let f = read_formula(&formula)?;
            let balanced = brent_balance(&f);
            emit(out.as_deref(), &serialize_circuit(balanced.circuit())?)?;
            Ok(0)
        }
        Cmd::Arith { circuit, td, out_circuit, out_td } => {
            let c = read_circuit(&circuit)?;
            let td = read_td(&td)?;
            let (ac, atd) = arithmetize(&c, &td)?;
            emit(out_circuit.as_deref(), &serialize_circuit(&ac)?)?;
            emit(out_td.as_deref(), &serialize_td(&atd))?;
            Ok(0)
        }
        Cmd::Dearith { formula, out } => {
            let f = read_formula(&formula)?;
            let b = dearithmetize(&f)?;
            emit(out.as_deref(), &serialize_circuit(b.circuit())?)?;
            Ok(0)
        }
        Cmd::MdTransform { circuit, out_circuit, out_td } => {
            let mut c = read_circuit(&circuit)?;
            let levels = c.infer_levels()?;
            c.set_levels(levels)?;
            let (out, td) = md_transform(&c)?;
            emit(out_circuit.as_deref(), &serialize_circuit(&out)?)?;
            emit(out_td.as_deref(), &serialize_td(&td))?;
            Ok(0)
        }
        Cmd::WidthSim { circuit, td, json, out } => {
            let c = read_circuit(&circuit)?;
            let td = read_td(&td)?;
            let rooted = root_with_output(&td, &c);
            let pair = preprocess(&c, &rooted)?;
            let report = width_simulate(&pair)?;
            let mut m = Map::new();
            m.insert("width".into(), json!(report.width));
            m.insert("size_total".into(), json!(report.size_total));
            let levels = report.output.levels().map(|l| l.iter().max().map_or(0, |&m| m + 1));
            m.insert("levels".into(), json!(levels.unwrap_or(0)));
            m.insert("td_width".into(), json!(pair.td.width()));
            m.insert("td_depth".into(), json!(pair.td.depth()));
            print_report(m, json);
            if let Some(path) = out {
                emit(Some(&path), &serialize_circuit(&report.output)?)?;
            }
            Ok(0)
        }
        Cmd::Reach { graph, td, s, t, telemetry } => {
            let g = read_graph(&graph, true)?;
            let td = read_td(&td)?;
            let inst = ReachInstance::new(g, s, t, td)?;
            let (reachable, tele) = solve_reach_telemetry(&inst)?;
            if telemetry {
                let mut m = Map::new();
                m.insert("arith_td_width".into(), json!(tele.arith_td_width));
                m.insert("balanced_td_depth".into(), json!(tele.balanced_td_depth));
                m.insert("balanced_td_width".into(), json!(tele.balanced_td_width));
                m.insert("budget_k".into(), json!(tele.eval.budget.k));
                m.insert("budget_max_monomials".into(), json!(tele.eval.budget.max_monomials));
                m.insert("budget_max_z_vars".into(), json!(tele.eval.budget.max_z_vars));
                m.insert("circuit_gates".into(), json!(tele.circuit_gates));
                m.insert("circuit_td_width".into(), json!(tele.circuit_td_width));
                m.insert("frames_evaluated".into(), json!(tele.eval.frames_evaluated));
                m.insert(
                    "max_frame_coefficient_bits".into(),
                    json!(tele.eval.max_frame_coefficient_bits),
                );
                m.insert("max_frame_z_vars".into(), json!(tele.eval.max_frame_z_vars));
                m.insert("max_live_frames".into(), json!(tele.eval.max_live_frames));
                m.insert("or_chain_growth".into(), json!(tele.or_chain_growth));
                println!("{}", Value::Object(m));
            }
            println!("{}", if reachable { "reachable" } else { "unreachable" });
            Ok(if reachable { 0 } else { 1 })
        }
        Cmd::Gen { gates, k, vars, shape, seed, out_circuit, out_td } => {
            let seed = seed.unwrap_or_else(|| rand::thread_rng().next_u64());
            println!("# seed {seed}");
            let shape = match shape {
                ShapeArg::Arith => Shape::Arith,
                ShapeArg::Md => Shape::Md,
                ShapeArg::Sm => Shape::Sm,
                ShapeArg::Bool => Shape::Bool,
            };
            let cfg = GenConfig { gates, k, vars, shape, seed };
            let (c, td) = gen_instance(&cfg);
            emit(out_circuit.as_deref(), &serialize_circuit(&c)?)?;
            emit(out_td.as_deref(), &serialize_td(&td))?;
            Ok(0)
        }
    }
}
