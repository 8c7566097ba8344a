//! End-to-end pipeline: dataset, arrangements, convex program, solve,
//! certificate, recovery, optional SGD baselines and low-rank study.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::arrangements::{
    all_sign_patterns, enumerate_first_layer, enumerate_second_layer, sample_network_arrangements, ActivationPattern,
    ArrangementSet, FirstLayerGrid, Mode, SignPattern, Source, DEFAULT_BUDGET,
};
use crate::baseline::{train_seeds, SgdConfig};
use crate::convex_program::{ConvexProgram, ConvexVariables, ProgramOptions, ProgramSpec};
use crate::data::{gen_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::loss::Loss;
use crate::lowrank::{bound_factor, transfer_objective, truncate, LowRankReport};
use crate::network::{ParallelNet, Regularizer};
use crate::recovery::{recover_network, verify_equivalence, RecoverOptions, RecoveryReport};
use crate::solver::{duality_gap, solve, SolveOptions, SolveTrace};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub m1: usize,
    pub m2: usize,
    pub beta: f64,
    #[serde(default)]
    pub loss: Loss,
}

fn default_budget() -> usize {
    DEFAULT_BUDGET
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrangementConfig {
    /// Exact enumeration. `ordered` gives each first-layer neuron its own
    /// pattern; otherwise all neurons of a block share one.
    Exact {
        #[serde(default = "default_budget")]
        budget: usize,
        #[serde(default = "default_true")]
        ordered: bool,
    },
    /// `count` distinct first-layer tuples and `second` (default `count`)
    /// distinct second-layer patterns realized by random networks.
    Sampled {
        count: usize,
        #[serde(default)]
        second: Option<usize>,
        seed: u64,
    },
}

fn default_true() -> bool {
    true
}

impl Default for ArrangementConfig {
    fn default() -> Self {
        ArrangementConfig::Exact {
            budget: DEFAULT_BUDGET,
            ordered: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub sgd: SgdConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankConfig {
    pub r: usize,
    /// Lipschitz constant `R` of the loss in the bound factor.
    #[serde(default = "one")]
    pub lipschitz: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub max_rel_gap: f64,
    pub max_recovery_diff: f64,
    /// Slack in the convex-versus-SGD ordering.
    pub ordering_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            max_rel_gap: 1e-3,
            max_recovery_diff: 1e-6,
            ordering_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub arrangements: ArrangementConfig,
    #[serde(default)]
    pub program: ProgramOptions,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub recover: RecoverOptions,
    #[serde(default)]
    pub baseline: Vec<BaselineConfig>,
    #[serde(default)]
    pub lowrank: Option<LowRankConfig>,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.m1 == 0 || self.model.m2 == 0 || !(self.model.beta > 0.0) {
            return Err(Error::InvalidArgument("model needs m1, m2 >= 1 and beta > 0".into()));
        }
        self.solver.validate()?;
        for b in &self.baseline {
            b.sgd.validate()?;
        }
        Ok(())
    }

    /// Baselines use the model's `beta` and loss with the path regularizer
    /// so that their objectives are comparable to the convex one.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.baseline {
            b.sgd.beta = self.model.beta;
            b.sgd.loss = self.model.loss;
            b.sgd.reg = Regularizer::Path;
        }
        out
    }
}

/// A pipeline error tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

fn at<T>(stage: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError { stage, source })
}

/// Arrangement sets and sign patterns for one data matrix.
#[derive(Clone, Debug)]
pub struct Arrangements {
    pub grid: FirstLayerGrid,
    pub second: ArrangementSet,
    pub signs: Vec<SignPattern>,
    /// True when the program is equivalent to the non-convex problem.
    pub exact: bool,
}

/// Builds the arrangement data for `x`. With `m1 = 1` and exact mode the
/// second-layer input `relu(X w1) w2` already has a fixed sign per block, so
/// the all-ones second-layer pattern with the `+` sign covers every
/// sub-network and the enumeration of the second layer is skipped.
pub fn arrangements(x: ArrayView2<f64>, m1: usize, config: &ArrangementConfig) -> Result<Arrangements> {
    let n = x.nrows();
    match *config {
        ArrangementConfig::Exact { budget, ordered } => {
            let first = enumerate_first_layer(x, Mode::Exact { budget })?;
            let grid = if ordered && m1 > 1 {
                FirstLayerGrid::ordered(&first, m1)
            } else {
                FirstLayerGrid::shared(&first, m1)
            };
            if grid.is_empty() {
                return Err(Error::EmptyFirstSet);
            }
            let (second, signs) = if m1 == 1 {
                let ones = ActivationPattern::from_bits(&vec![true; n]);
                (
                    ArrangementSet::from_patterns(n, vec![ones], Source::Exact)?,
                    vec![SignPattern::new(vec![1])?],
                )
            } else {
                (enumerate_second_layer(x, &first, m1, Mode::Exact { budget })?, all_sign_patterns(m1))
            };
            Ok(Arrangements {
                grid,
                second,
                signs,
                exact: ordered || m1 == 1,
            })
        }
        ArrangementConfig::Sampled { count, second, seed } => {
            let (grid, second) = sample_network_arrangements(x, m1, count, second.unwrap_or(count), seed)?;
            Ok(Arrangements {
                grid,
                second,
                signs: all_sign_patterns(m1),
                exact: false,
            })
        }
    }
}

/// Everything produced by solving one convex program.
#[derive(Clone, Debug)]
pub struct ConvexRun {
    pub program: ConvexProgram<f64>,
    pub vars: ConvexVariables<f64>,
    pub trace: SolveTrace,
    pub objective: f64,
    pub rel_gap: f64,
    pub lower_bound: f64,
    pub net: ParallelNet<f64>,
    pub recovery: RecoveryReport,
    pub exact: bool,
    pub timings: BTreeMap<String, f64>,
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, key: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *timings.entry(key.to_string()).or_default() += t.elapsed().as_secs_f64();
    out
}

/// Enumerate, build, solve, certify and recover on `(x, y)`.
pub fn convex_pipeline(
    x: &Array2<f64>,
    y: &Array1<f64>,
    config: &ExperimentConfig,
) -> std::result::Result<ConvexRun, StageError> {
    let mut timings = BTreeMap::new();
    let model = config.model;
    let arr = at(
        "enumerate",
        timed(&mut timings, "enumerate", || arrangements(x.view(), model.m1, &config.arrangements)),
    )?;
    let spec = ProgramSpec {
        m2: model.m2,
        beta: model.beta,
        loss: model.loss,
    };
    let exact = arr.exact;
    let program = at(
        "build",
        timed(&mut timings, "build", || {
            ConvexProgram::build(x.clone(), y.clone(), arr.grid, arr.second, arr.signs, spec, config.program)
        }),
    )?;
    let (vars, trace) = at("solve", timed(&mut timings, "solve", || solve(&program, &config.solver)))?;
    let cert = at("certify", timed(&mut timings, "certify", || duality_gap(&program, &vars)))?;
    let (net, recovery) = at(
        "recover",
        timed(&mut timings, "recover", || {
            let net = recover_network(&program, &vars, &config.recover)?;
            let report = verify_equivalence(&program, &vars, &net)?;
            Ok((net, report))
        }),
    )?;
    Ok(ConvexRun {
        objective: cert.primal,
        rel_gap: cert.rel_gap,
        lower_bound: cert.lower_bound,
        program,
        vars,
        trace,
        net,
        recovery,
        exact,
        timings,
    })
}

/// Output of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub results: Value,
    pub passed: bool,
    pub dataset: Dataset,
    pub net: ParallelNet<f64>,
    pub lowrank: Option<LowRankReport>,
}

/// Fraction of samples where `sign(f) == sign(y)` (zero counts as wrong).
pub fn sign_accuracy(f: &Array1<f64>, y: &Array1<f64>) -> f64 {
    if f.is_empty() {
        return 1.0;
    }
    let hits = f.iter().zip(y.iter()).filter(|(a, b)| **a * **b > 0.0).count();
    hits as f64 / f.len() as f64
}

pub fn run_experiment(config: &ExperimentConfig) -> std::result::Result<ExperimentOutcome, StageError> {
    at("config", config.validate())?;
    let config = config.resolved();
    let model = config.model;
    let t_ingest = Instant::now();
    let data = at("ingest", gen_dataset(&config.dataset, (model.m1, model.m2)))?;
    let ingest_secs = t_ingest.elapsed().as_secs_f64();
    let run = convex_pipeline(&data.x, &data.y, &config)?;
    let mut timings = run.timings.clone();
    timings.insert("ingest".into(), ingest_secs);

    let mut checks: BTreeMap<&'static str, bool> = BTreeMap::new();
    checks.insert("constraints", run.trace.constraint_total <= config.solver.tol_constraint);
    checks.insert("rel_gap", run.rel_gap <= config.verify.max_rel_gap);
    let scale = 1.0 + run.objective.abs();
    checks.insert(
        "recovery",
        run.recovery.max_output_diff <= config.verify.max_recovery_diff * scale
            && run.recovery.reg_cost_diff <= config.verify.max_recovery_diff * scale,
    );

    let fit = if run.net.num_subnets() == 0 {
        Array1::zeros(data.x.nrows())
    } else {
        at("recover", run.net.forward(data.x.view()))?
    };
    let net_objective = at(
        "recover",
        transfer_objective(&run.net, data.x.view(), data.y.view(), model.beta, model.loss),
    )?;

    let mut sgd = Vec::new();
    let t_sgd = Instant::now();
    for b in &config.baseline {
        let dims = [data.x.ncols(), model.m1, model.m2];
        let runs = at("baseline", train_seeds(&dims, data.x.view(), data.y.view(), &b.sgd, &b.seeds))?;
        let finals: Vec<f64> = runs.iter().map(|(_, h)| h.final_objective()).collect();
        let min = finals.iter().copied().fold(f64::INFINITY, f64::min);
        if run.exact {
            checks.insert("ordering", checks.get("ordering").copied().unwrap_or(true) && run.objective <= min + config.verify.ordering_tol);
        }
        sgd.push(json!({
            "k": b.sgd.k,
            "seeds": b.seeds,
            "finals": finals,
            "min": min,
            "gap": min - run.objective,
        }));
    }
    if !config.baseline.is_empty() {
        timings.insert("baseline".into(), t_sgd.elapsed().as_secs_f64());
    }

    let mut lowrank_report = None;
    let mut lowrank_json = Value::Null;
    if let Some(lr) = config.lowrank {
        let t = Instant::now();
        let report = lowrank_study(&data, &config, &run, lr)?;
        checks.insert("sandwich", report.sandwich_holds().unwrap_or(false));
        checks.insert(
            "lowrank_rel_gap",
            report.gap_hat.unwrap_or(1.0) <= config.verify.max_rel_gap,
        );
        lowrank_json = json!({
            "report": report,
            "holds": report.sandwich_holds(),
        });
        lowrank_report = Some(report);
        timings.insert("lowrank".into(), t.elapsed().as_secs_f64());
    }

    let passed = checks.values().all(|&v| v);
    let (m, p1, p2) = run.program.grid_dims();
    let results = json!({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "dataset": { "n": data.x.nrows(), "d": data.x.ncols() },
        "arrangements": {
            "exact": run.exact,
            "signs": m,
            "first_tuples": p1,
            "first_patterns": run.program.grid().patterns.len(),
            "second_patterns": p2,
            "blocks": run.program.num_blocks(),
            "variables": run.program.num_variables(),
        },
        "convex": {
            "objective": run.objective,
            "lower_bound": run.lower_bound,
            "rel_gap": run.rel_gap,
            "constraint_total": run.trace.constraint_total,
            "iterations": run.trace.rows.last().map_or(0, |r| r.iter),
            "converged": run.trace.converged,
            "active_blocks": run.trace.active_blocks,
        },
        "recovery": {
            "report": run.recovery,
            "network_objective": net_objective,
            "train_sign_accuracy": sign_accuracy(&fit, &data.y),
        },
        "sgd": sgd,
        "sandwich": lowrank_json,
        "timings": timings,
        "checks": checks,
        "passed": passed,
    });
    Ok(ExperimentOutcome {
        results,
        passed,
        dataset: data,
        net: run.net,
        lowrank: lowrank_report,
    })
}

/// Trains on the rank-`r` truncation of `X` and transfers the recovered
/// network back to `X`; `full` is the run on the original data.
pub fn lowrank_study(
    data: &Dataset,
    config: &ExperimentConfig,
    full: &ConvexRun,
    lr: LowRankConfig,
) -> std::result::Result<LowRankReport, StageError> {
    let model = config.model;
    let (x_hat, sigma) = at("lowrank", truncate(data.x.view(), lr.r))?;
    let run = convex_pipeline(&x_hat, &data.y, config)?;
    let p_r = at(
        "lowrank",
        transfer_objective(&run.net, data.x.view(), data.y.view(), model.beta, model.loss),
    )?;
    let sigma_next = sigma.get(lr.r).copied().unwrap_or(0.0);
    Ok(LowRankReport {
        factor: bound_factor(model.beta, model.m1, model.m2, lr.lipschitz, sigma_next),
        sigma,
        r: lr.r,
        p_hat: run.objective,
        p_r,
        p_star: Some(full.objective),
        gap_hat: Some(run.rel_gap),
        gap_star: Some(full.rel_gap),
        first_patterns_full: Some(full.program.grid().patterns.len()),
        first_patterns_truncated: run.program.grid().patterns.len(),
    })
}

/// Scores `net` on a `resolution x resolution` grid over
/// `[xmin, xmax] x [ymin, ymax]`; with `bias` a constant 1 is appended to each
/// point. Rows are `(x, y, score)`, x varying fastest.
pub fn emit_boundary_grid(
    net: &ParallelNet<f64>,
    bounds: (f64, f64, f64, f64),
    resolution: usize,
    bias: bool,
) -> Result<Vec<(f64, f64, f64)>> {
    let width = if bias { 3 } else { 2 };
    if net.input_dim() != width {
        return Err(Error::DimensionMismatch(format!(
            "boundary grid needs input width {width}, network has {}",
            net.input_dim()
        )));
    }
    if resolution == 0 {
        return Ok(Vec::new());
    }
    let (xmin, xmax, ymin, ymax) = bounds;
    let coord = |lo: f64, hi: f64, k: usize| {
        if resolution == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * k as f64 / (resolution - 1) as f64
        }
    };
    let mut pts = Array2::zeros((resolution * resolution, width));
    for a in 0..resolution {
        for b in 0..resolution {
            let row = a * resolution + b;
            pts[[row, 0]] = coord(xmin, xmax, b);
            pts[[row, 1]] = coord(ymin, ymax, a);
            if bias {
                pts[[row, 2]] = 1.0;
            }
        }
    }
    let scores = if net.num_subnets() == 0 {
        Array1::zeros(pts.nrows())
    } else {
        net.forward(pts.view())?
    };
    Ok(pts
        .outer_iter()
        .zip(scores.iter())
        .map(|(p, &s)| (p[0], p[1], s))
        .collect())
}
