//! Command-line harness for the convex training pipeline.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use convexnet::arrangements::{enumerate_first_layer, enumerate_second_layer, Mode, DEFAULT_BUDGET};
use convexnet::baseline::{Optimizer, SgdConfig};
use convexnet::convex_program::{BlockKey, ConvexProgram, ConvexVariables, ProgramSpec};
use convexnet::data::{gen_dataset, DatasetSpec, LabelColumn};
use convexnet::experiment::{
    arrangements, convex_pipeline, emit_boundary_grid, run_experiment, ArrangementConfig, BaselineConfig,
    ExperimentConfig, LowRankConfig, ModelConfig, StageError,
};
use convexnet::loss::Loss;
use convexnet::network::{ParallelNet, Regularizer};
use convexnet::recovery::{recover_network, verify_equivalence};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "convexnet", version, about = "Exact convex training of three-layer parallel ReLU networks")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CONVEXNET_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset as CSV (columns x0..x{d-1}, y).
    Gen {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the teacher network as JSON.
        #[arg(long)]
        teacher_out: Option<PathBuf>,
    },
    /// Enumerate activation patterns and write them as JSON.
    Enumerate {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and solve the convex program, certify and recover.
    Solve {
        #[command(flatten)]
        exp: ExpArgs,
        #[command(flatten)]
        outs: Outputs,
        /// Save the solved block variables.
        #[arg(long)]
        vars_out: Option<PathBuf>,
        /// Save the solver trace as CSV.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Rebuild the program for a config and recover the network from saved variables.
    Recover {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        vars: PathBuf,
        #[arg(long)]
        net_out: PathBuf,
    },
    /// Convex pipeline against multi-seed SGD baselines.
    Compare {
        #[command(flatten)]
        exp: ExpArgs,
        #[command(flatten)]
        outs: Outputs,
        /// Sub-network counts for the baselines.
        #[arg(long, value_delimiter = ',', default_value = "5,20,40")]
        ks: Vec<usize>,
        /// Number of SGD seeds per K.
        #[arg(long, default_value_t = 5)]
        trials: u64,
        #[arg(long, default_value_t = 5000)]
        epochs: usize,
        #[arg(long, default_value_t = 0.005)]
        lr: f64,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, value_enum, default_value_t = Opt::Adam)]
        optimizer: Opt,
        #[arg(long, default_value_t = 1.0)]
        init_scale: f64,
    },
    /// Low-rank training and the sandwich check.
    Lowrank {
        #[command(flatten)]
        exp: ExpArgs,
        #[command(flatten)]
        outs: Outputs,
        /// Truncation rank.
        #[arg(long)]
        rank: Option<usize>,
        /// Lipschitz constant of the loss.
        #[arg(long, default_value_t = 1.0)]
        lipschitz: f64,
        /// Singular spectrum as CSV.
        #[arg(long)]
        spectrum_out: Option<PathBuf>,
    },
    /// Score a saved two-input network on a grid (CSV x,y,score).
    Boundary {
        #[arg(long)]
        net: PathBuf,
        /// xmin,xmax,ymin,ymax
        #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [-1.5, 1.5, -1.5, 1.5])]
        bounds: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        /// Append a constant 1 input (networks trained on spiral data with bias).
        #[arg(long)]
        bias: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    Spiral,
    Teacher,
    Lowrank,
    Csv,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Opt {
    Sgd,
    Adam,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LossArg {
    Squared,
    L2Norm,
    Logistic,
    Hinge,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Squared => Loss::Squared,
            LossArg::L2Norm => Loss::L2Norm,
            LossArg::Logistic => Loss::Logistic,
            LossArg::Hinge => Loss::Hinge,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long, value_enum)]
    dataset: Option<Kind>,
    #[arg(long, default_value_t = 30)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Teacher sub-networks.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rank kept by the low-rank generator.
    #[arg(long)]
    r: Option<usize>,
    /// Spiral without the constant bias column.
    #[arg(long)]
    no_bias: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Label column: name or 0-based index.
    #[arg(long, default_value = "y")]
    label: String,
    #[arg(long)]
    standardize: bool,
    #[arg(long, default_value_t = 3)]
    m1: usize,
    #[arg(long, default_value_t = 1)]
    m2: usize,
}

impl DataArgs {
    fn spec(&self) -> Result<DatasetSpec> {
        let kind = match (self.dataset, &self.csv) {
            (Some(k), _) => k,
            (None, Some(_)) => Kind::Csv,
            (None, None) => bail!("pass --dataset, --csv or --config"),
        };
        Ok(match kind {
            Kind::Spiral => DatasetSpec::Spiral {
                n: self.n,
                noise: self.noise,
                seed: self.seed,
                bias: !self.no_bias,
            },
            Kind::Teacher => DatasetSpec::Teacher {
                n: self.n,
                d: self.d,
                k: self.k,
                m1: self.m1,
                m2: self.m2,
                noise: self.noise,
                seed: self.seed,
            },
            Kind::Lowrank => DatasetSpec::Lowrank {
                n: self.n,
                d: self.d,
                r: self.r.unwrap_or(self.d / 2),
                seed: self.seed,
                teacher_k: self.k,
                noise: self.noise,
            },
            Kind::Csv => DatasetSpec::Csv {
                path: self.csv.clone().ok_or_else(|| anyhow!("--csv is required for csv data"))?,
                label_column: match self.label.parse::<usize>() {
                    Ok(i) => LabelColumn::Index(i),
                    Err(_) => LabelColumn::Name(self.label.clone()),
                },
                header: None,
                standardize: self.standardize,
            },
        })
    }
}

#[derive(Args, Debug, Clone)]
struct ExpArgs {
    /// Experiment config (JSON); other flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = LossArg::Squared)]
    loss: LossArg,
    /// Sample arrangements from this many random networks instead of enumerating.
    #[arg(long)]
    sampled: Option<usize>,
    /// Distinct second-layer patterns to sample (default: same as --sampled).
    #[arg(long)]
    sampled_second: Option<usize>,
    #[arg(long, default_value_t = 0)]
    arr_seed: u64,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    /// One shared pattern per block instead of one per neuron.
    #[arg(long)]
    shared: bool,
    #[arg(long)]
    reduce_symmetry: bool,
    #[arg(long)]
    prune_empty: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol_gap: Option<f64>,
}

impl ExpArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: ExperimentConfig = serde_json::from_str(&text).context("parsing config")?;
            return Ok(cfg);
        }
        let mut cfg = ExperimentConfig {
            dataset: self.data.spec()?,
            model: ModelConfig {
                m1: self.data.m1,
                m2: self.data.m2,
                beta: self.beta,
                loss: self.loss.into(),
            },
            arrangements: match self.sampled {
                Some(count) => ArrangementConfig::Sampled {
                    count,
                    second: self.sampled_second,
                    seed: self.arr_seed,
                },
                None => ArrangementConfig::Exact {
                    budget: self.budget,
                    ordered: !self.shared,
                },
            },
            program: Default::default(),
            solver: Default::default(),
            recover: Default::default(),
            baseline: Vec::new(),
            lowrank: None,
            verify: Default::default(),
        };
        cfg.program.reduce_symmetry = self.reduce_symmetry;
        cfg.program.prune_empty = self.prune_empty;
        if let Some(it) = self.max_iters {
            cfg.solver.max_iters = it;
        }
        if let Some(g) = self.tol_gap {
            cfg.solver.tol_gap = g;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct Outputs {
    /// Results JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recovered network JSON.
    #[arg(long)]
    net_out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => write_text(p, &text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// Exit status for a finished pipeline: 0 iff every check passed.
fn status(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        eprintln!("verification failed");
        ExitCode::from(1)
    }
}

fn run_pipeline(cfg: &ExperimentConfig, outs: &Outputs) -> Result<ExitCode> {
    let outcome = run_experiment(cfg).map_err(stage_error)?;
    if let Some(p) = &outs.net_out {
        write_text(p, &outcome.net.to_json()?)?;
    }
    emit(&outcome.results, outs.out.as_deref())?;
    Ok(status(outcome.passed))
}

fn stage_error(e: StageError) -> anyhow::Error {
    anyhow::Error::new(e)
}

fn save_vars(path: &Path, vars: &ConvexVariables<f64>, d: usize, m1: usize) -> Result<()> {
    let doc = json!({ "d": d, "m1": m1, "keys": vars.keys, "flat": vars.to_flat() });
    write_text(path, &serde_json::to_string(&doc)?)
}

fn load_vars(path: &Path) -> Result<ConvexVariables<f64>> {
    let doc: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let keys: Vec<BlockKey> = serde_json::from_value(doc["keys"].clone())?;
    let flat: Vec<f64> = serde_json::from_value(doc["flat"].clone())?;
    let d = doc["d"].as_u64().ok_or_else(|| anyhow!("missing d"))? as usize;
    let m1 = doc["m1"].as_u64().ok_or_else(|| anyhow!("missing m1"))? as usize;
    Ok(ConvexVariables::from_flat(keys, d, m1, &flat)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { data, out, teacher_out } => {
            let spec = data.spec()?;
            let ds = gen_dataset(&spec, (data.m1, data.m2)).map_err(|e| stage_error(StageError { stage: "ingest", source: e }))?;
            ds.write_csv(create(&out)?)?;
            if let (Some(p), Some(net)) = (teacher_out, &ds.teacher) {
                write_text(&p, &net.to_json()?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Enumerate { exp, out } => {
            let cfg = exp.config()?;
            let ds = gen_dataset(&cfg.dataset, (cfg.model.m1, cfg.model.m2))
                .map_err(|e| stage_error(StageError { stage: "ingest", source: e }))?;
            let doc = match cfg.arrangements {
                ArrangementConfig::Exact { budget, .. } => {
                    let first = enumerate_first_layer(ds.x.view(), Mode::Exact { budget })?;
                    let second = enumerate_second_layer(ds.x.view(), &first, cfg.model.m1, Mode::Exact { budget })?;
                    json!({
                        "first": serde_json::from_str::<Value>(&first.to_json()?)?,
                        "second": serde_json::from_str::<Value>(&second.to_json()?)?,
                    })
                }
                ArrangementConfig::Sampled { .. } => {
                    let arr = arrangements(ds.x.view(), cfg.model.m1, &cfg.arrangements)?;
                    json!({
                        "first": serde_json::from_str::<Value>(&arr.grid.patterns.to_json()?)?,
                        "tuples": arr.grid.tuples,
                        "second": serde_json::from_str::<Value>(&arr.second.to_json()?)?,
                    })
                }
            };
            write_text(&out, &serde_json::to_string_pretty(&doc)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Solve {
            exp,
            outs,
            vars_out,
            trace_out,
        } => {
            let cfg = exp.config()?;
            if vars_out.is_none() && trace_out.is_none() {
                return run_pipeline(&cfg, &outs);
            }
            let ds = gen_dataset(&cfg.dataset, (cfg.model.m1, cfg.model.m2))
                .map_err(|e| stage_error(StageError { stage: "ingest", source: e }))?;
            let run = convex_pipeline(&ds.x, &ds.y, &cfg).map_err(stage_error)?;
            if let Some(p) = vars_out {
                save_vars(&p, &run.vars, run.program.d(), run.program.m1())?;
            }
            if let Some(p) = trace_out {
                run.trace.write_csv(create(&p)?)?;
            }
            if let Some(p) = &outs.net_out {
                write_text(p, &run.net.to_json()?)?;
            }
            let passed = run.trace.constraint_total <= cfg.solver.tol_constraint && run.rel_gap <= cfg.verify.max_rel_gap;
            let doc = json!({
                "schema_version": convexnet::experiment::SCHEMA_VERSION,
                "config": cfg,
                "convex": {
                    "objective": run.objective,
                    "lower_bound": run.lower_bound,
                    "rel_gap": run.rel_gap,
                    "constraint_total": run.trace.constraint_total,
                },
                "recovery": run.recovery,
                "timings": run.timings,
                "passed": passed,
            });
            emit(&doc, outs.out.as_deref())?;
            Ok(status(passed))
        }
        Command::Recover { exp, vars, net_out } => {
            let cfg = exp.config()?;
            let ds = gen_dataset(&cfg.dataset, (cfg.model.m1, cfg.model.m2))
                .map_err(|e| stage_error(StageError { stage: "ingest", source: e }))?;
            let arr = arrangements(ds.x.view(), cfg.model.m1, &cfg.arrangements)?;
            let spec = ProgramSpec {
                m2: cfg.model.m2,
                beta: cfg.model.beta,
                loss: cfg.model.loss,
            };
            let prog = ConvexProgram::build(ds.x, ds.y, arr.grid, arr.second, arr.signs, spec, cfg.program)?;
            let vars = load_vars(&vars)?;
            if vars.keys != prog.blocks() {
                bail!("saved variables do not match the rebuilt program");
            }
            let net = recover_network(&prog, &vars, &cfg.recover)?;
            let report = verify_equivalence(&prog, &vars, &net)?;
            write_text(&net_out, &net.to_json()?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            exp,
            outs,
            ks,
            trials,
            epochs,
            lr,
            batch,
            optimizer,
            init_scale,
        } => {
            let mut cfg = exp.config()?;
            if cfg.baseline.is_empty() {
                let optimizer = match optimizer {
                    Opt::Adam => Optimizer::adam(),
                    Opt::Sgd => Optimizer::Sgd { momentum: 0.9 },
                };
                cfg.baseline = ks
                    .iter()
                    .map(|&k| BaselineConfig {
                        sgd: SgdConfig {
                            optimizer,
                            lr,
                            batch: batch.unwrap_or(usize::MAX),
                            epochs,
                            seed: 0,
                            reg: Regularizer::Path,
                            beta: cfg.model.beta,
                            init_scale,
                            k,
                            loss: cfg.model.loss,
                        },
                        seeds: (0..trials).collect(),
                    })
                    .collect();
            }
            run_pipeline(&cfg, &outs)
        }
        Command::Lowrank {
            exp,
            outs,
            rank,
            lipschitz,
            spectrum_out,
        } => {
            let mut cfg = exp.config()?;
            if cfg.lowrank.is_none() || rank.is_some() {
                let r = match (rank, &cfg.dataset) {
                    (Some(r), _) => r,
                    (None, DatasetSpec::Lowrank { r, .. }) => *r,
                    _ => bail!("pass --rank"),
                };
                cfg.lowrank = Some(LowRankConfig { r, lipschitz });
            }
            let outcome = run_experiment(&cfg).map_err(stage_error)?;
            if let (Some(p), Some(rep)) = (spectrum_out, &outcome.lowrank) {
                rep.write_spectrum_csv(create(&p)?)?;
            }
            if let Some(p) = &outs.net_out {
                write_text(p, &outcome.net.to_json()?)?;
            }
            emit(&outcome.results, outs.out.as_deref())?;
            Ok(status(outcome.passed))
        }
        Command::Boundary {
            net,
            bounds,
            resolution,
            bias,
            out,
        } => {
            let net = ParallelNet::<f64>::from_json(&fs::read_to_string(&net)?)?;
            let rows = emit_boundary_grid(&net, (bounds[0], bounds[1], bounds[2], bounds[3]), resolution, bias)?;
            let mut w = create(&out)?;
            writeln!(w, "x,y,score")?;
            for (a, b, s) in rows {
                writeln!(w, "{a},{b},{s}")?;
            }
            w.flush()?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("warning: {e}");
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            match e.downcast_ref::<StageError>() {
                Some(se) => eprintln!("{}", json!({ "stage": se.stage, "error": se.source.to_string() })),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(2)
        }
    }
}
