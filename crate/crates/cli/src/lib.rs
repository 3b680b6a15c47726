//! Runner behind the `rcl` binary: configuration, presets, artifacts and
//! parallel sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rcl_core::constraints::{build_system, check_mechanism, Mechanism};
use rcl_core::market::{
    cara_optimal, delegation_value, log_optimal, relative_entropy, tilted_density, verify_budget_optimality,
    Direction, DriftFile, DriftSpec, MarketModel,
};
use rcl_core::menu::{equivalence_check, extract_mechanism, solve_menu, DEFAULT_TIE_TOL};
use rcl_core::model::{Instance, RawInstance, UtilitySpec};
use rcl_core::presets::{build_preset, random_candidates, PresetName, PresetParams};
use rcl_core::solver::{grid_oracle, solve_mechanism, SolveOptions, TraceRow, ORACLE_HARD_CAP};
use rcl_core::transform::{
    ae_check, from_utility_units, to_utility_units, UtilityUnitsInstance, AE_DEFAULT_MARGIN, AE_DEFAULT_Z_MAX,
};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_CANDIDATES: usize = 6;
/// Environment variable capping the number of sweep threads.
pub const THREADS_ENV: &str = "RCL_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    Menu,
    Equivalence,
    Market,
    AeCheck,
    Oracle,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Menu => "menu",
            Command::Equivalence => "equivalence",
            Command::Market => "market",
            Command::AeCheck => "ae-check",
            Command::Oracle => "oracle",
        }
    }
}

/// One run. In a sweep file this is a JSON object with the same field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub instance: Option<PathBuf>,
    pub out: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub levels: Option<usize>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub nodes: Option<usize>,
    #[serde(default)]
    pub candidates: Option<usize>,
    #[serde(default)]
    pub z_max: Option<f64>,
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default)]
    pub utility: Option<UtilitySpec>,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl RunConfig {
    pub fn new(command: Command, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            preset: None,
            instance: None,
            out: out.into(),
            seed: DEFAULT_SEED,
            max_iters: None,
            tol: None,
            levels: None,
            beta: None,
            alpha: None,
            nodes: None,
            candidates: None,
            z_max: None,
            margin: None,
            utility: None,
        }
    }

    fn preset_params(&self) -> PresetParams {
        PresetParams {
            alpha: self.alpha,
            beta: self.beta,
            nodes: self.nodes,
            ..PresetParams::default()
        }
    }

    fn solve_options(&self) -> SolveOptions {
        let mut opts = SolveOptions {
            seed: self.seed,
            ..SolveOptions::default()
        };
        if let Some(n) = self.max_iters {
            opts.max_iters = n;
        }
        if let Some(t) = self.tol {
            opts.tol = t;
        }
        opts
    }

    fn source(&self) -> String {
        match (&self.preset, &self.instance) {
            (Some(p), _) => format!("preset:{p}"),
            (None, Some(path)) => format!(
                "instance:{}",
                path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
            ),
            (None, None) => "default".into(),
        }
    }

    fn load_instance(&self) -> anyhow::Result<Instance> {
        match (&self.preset, &self.instance) {
            (Some(_), Some(_)) => bail!("give either --preset or --instance, not both"),
            (None, None) => bail!("{} needs --preset or --instance", self.command.as_str()),
            (Some(name), None) => {
                let preset: PresetName = name.parse()?;
                Ok(build_preset(preset, &self.preset_params())?)
            }
            (None, Some(path)) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Instance::from_json(&text).with_context(|| format!("loading instance {}", path.display()))
            }
        }
    }
}

/// How a run ended when no input error occurred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    /// The solver did not reach its tolerance or a certificate failed.
    NonConvergence,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::NonConvergence => 2,
        }
    }
}

/// Input errors map to exit code 1.
pub fn exit_code(result: &anyhow::Result<Outcome>) -> i32 {
    match result {
        Ok(o) => o.exit_code(),
        Err(_) => 1,
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'static str,
    source: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    instance: Option<&'a RawInstance>,
    result: T,
}

const SUMMARY_HEADER: &str = "type_label,atom,c_value,x_value,ir_slack,min_ic_slack\n";
const TRACE_HEADER: &str = "iter,value,max_violation\n";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-type, per-atom rows with the utility levels, transfers and slacks of
/// `mech`.
pub fn summary_csv(uu: &UtilityUnitsInstance, mech: &Mechanism) -> anyhow::Result<String> {
    let sys = build_system(uu);
    let report = check_mechanism(&sys, mech, rcl_core::constraints::DEFAULT_TOL)?;
    let mut out = String::from(SUMMARY_HEADER);
    for (j, ty) in uu.base.types.iter().enumerate() {
        let c = mech.contract(j);
        let x = from_utility_units(uu, c)?;
        for (i, atom) in uu.base.states.atoms.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(&ty.label),
                csv_field(atom),
                c[i],
                x[i],
                report.ir_slack(j),
                report.min_ic_slack(j)
            )?;
        }
    }
    Ok(out)
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.iter, r.value, r.max_violation);
    }
    out
}

/// Read a summary written by [`summary_csv`] back into a mechanism.
pub fn parse_summary(text: &str, n_types: usize, n_atoms: usize) -> anyhow::Result<Mechanism> {
    let mut rows = text.lines();
    if rows.next() != Some(SUMMARY_HEADER.trim_end()) {
        bail!("unexpected summary header");
    }
    let mut assignment = vec![Vec::with_capacity(n_atoms); n_types];
    for (k, line) in rows.enumerate() {
        let fields: Vec<&str> = line.rsplitn(5, ',').collect();
        let c: f64 = fields
            .get(3)
            .ok_or_else(|| anyhow!("short summary row {k}"))?
            .parse()
            .with_context(|| format!("summary row {k}"))?;
        let j = k / n_atoms;
        if j >= n_types {
            bail!("summary has more than {n_types} x {n_atoms} rows");
        }
        assignment[j].push(c);
    }
    Ok(Mechanism::new(assignment)?)
}

fn write_artifacts(out: &Path, result_json: &str, trace: &str, summary: &str) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, body) in [("result.json", result_json), ("trace.csv", trace), ("summary.csv", summary)] {
        let path = out.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn to_json<T: Serialize>(config: &RunConfig, instance: Option<&RawInstance>, result: T) -> anyhow::Result<String> {
    let env = Envelope {
        command: config.command.as_str(),
        source: config.source(),
        seed: config.seed,
        instance,
        result,
    };
    Ok(serde_json::to_string_pretty(&env)? + "\n")
}

/// Execute one configuration and write its artifacts into `config.out`.
pub fn run(config: &RunConfig) -> anyhow::Result<Outcome> {
    match config.command {
        Command::Solve => run_solve(config),
        Command::Oracle => run_oracle(config),
        Command::Menu => run_menu(config),
        Command::Equivalence => run_equivalence(config),
        Command::Market => run_market(config),
        Command::AeCheck => run_ae_check(config),
    }
}

fn run_solve(config: &RunConfig) -> anyhow::Result<Outcome> {
    let inst = config.load_instance()?;
    let uu = to_utility_units(&inst)?;
    let res = solve_mechanism(&uu, &config.solve_options())?;
    let summary = summary_csv(&uu, &res.mechanism)?;
    let json = to_json(config, Some(&inst.to_raw()), &res)?;
    write_artifacts(&config.out, &json, &trace_csv(&res.trace), &summary)?;
    Ok(if res.converged {
        Outcome::Success
    } else {
        Outcome::NonConvergence
    })
}

fn run_oracle(config: &RunConfig) -> anyhow::Result<Outcome> {
    let inst = config.load_instance()?;
    let uu = to_utility_units(&inst)?;
    let levels = config.levels.unwrap_or(DEFAULT_LEVELS);
    let res = grid_oracle(&uu, levels, ORACLE_HARD_CAP)?;
    let summary = summary_csv(&uu, &res.result.mechanism)?;
    let json = to_json(config, Some(&inst.to_raw()), &res)?;
    write_artifacts(&config.out, &json, TRACE_HEADER, &summary)?;
    Ok(Outcome::Success)
}

fn candidates(config: &RunConfig, uu: &UtilityUnitsInstance) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    random_candidates(&mut rng, uu, config.candidates.unwrap_or(DEFAULT_CANDIDATES))
}

fn run_menu(config: &RunConfig) -> anyhow::Result<Outcome> {
    let inst = config.load_instance()?;
    let uu = to_utility_units(&inst)?;
    let cand = candidates(config, &uu);
    let sol = solve_menu(&cand, &uu)?;
    let mech = extract_mechanism(&sol.menu, &uu, DEFAULT_TIE_TOL)?;
    #[derive(Serialize)]
    struct MenuResult<'a> {
        candidates: &'a [Vec<f64>],
        #[serde(flatten)]
        solution: &'a rcl_core::menu::MenuSolution,
        mechanism: &'a Mechanism,
    }
    let json = to_json(
        config,
        Some(&inst.to_raw()),
        MenuResult {
            candidates: &cand,
            solution: &sol,
            mechanism: &mech,
        },
    )?;
    write_artifacts(&config.out, &json, TRACE_HEADER, &summary_csv(&uu, &mech)?)?;
    Ok(Outcome::Success)
}

fn run_equivalence(config: &RunConfig) -> anyhow::Result<Outcome> {
    let inst = config.load_instance()?;
    let uu = to_utility_units(&inst)?;
    let cand = candidates(config, &uu);
    let report = equivalence_check(&cand, &uu)?;
    let summary = summary_csv(&uu, &report.witness_mechanism)?;
    let json = to_json(config, Some(&inst.to_raw()), &report)?;
    write_artifacts(&config.out, &json, TRACE_HEADER, &summary)?;
    Ok(if report.passed {
        Outcome::Success
    } else {
        Outcome::NonConvergence
    })
}

/// Input for the `market` command: a drift file plus optional endowments.
#[derive(Clone, Debug, Deserialize)]
struct MarketInput {
    #[serde(flatten)]
    drifts: DriftFile,
    #[serde(default)]
    e_a: Option<Vec<f64>>,
    #[serde(default)]
    e_p: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct MarketRow {
    label: String,
    normalizer: f64,
    entropy_pq: f64,
    entropy_qp: f64,
    cara_utility: f64,
    cara_oracle_gap: f64,
    log_utility: f64,
    log_oracle_gap: f64,
    delegation_value: f64,
    cara_claim: Vec<f64>,
    log_claim: Vec<f64>,
}

#[derive(Serialize)]
struct MarketReport {
    horizon: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    alpha: f64,
    beta: f64,
    e_a: Vec<f64>,
    e_p: Vec<f64>,
    types: Vec<MarketRow>,
}

/// Grid size of the multiplier scan in the budget oracle.
const MARKET_ORACLE_GRID: usize = 200;

fn run_market(config: &RunConfig) -> anyhow::Result<Outcome> {
    let (model, e_a, e_p) = match (&config.preset, &config.instance) {
        (Some(_), Some(_)) => bail!("give either --preset or --instance, not both"),
        (Some(name), None) => {
            let preset: PresetName = name.parse()?;
            if !matches!(preset, PresetName::CaraHedging | PresetName::LogDelegation) {
                bail!("market runs on cara_hedging or log_delegation, not {name}");
            }
            (default_market(config.nodes.unwrap_or(20))?, None, None)
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let input: MarketInput =
                serde_json::from_str(&text).with_context(|| format!("parsing drift file {}", path.display()))?;
            (input.drifts.into_model()?, input.e_a, input.e_p)
        }
        (None, None) => (default_market(config.nodes.unwrap_or(20))?, None, None),
    };
    let m = model.len();
    let e_a = e_a.unwrap_or_else(|| vec![1.0; m]);
    let e_p = e_p.unwrap_or_else(|| vec![1.0; m]);
    let alpha = config.alpha.unwrap_or(0.5);
    let beta = config.beta.unwrap_or(0.5);
    let mut types = Vec::new();
    for (k, f) in model.drift_types.iter().enumerate() {
        let d = tilted_density(&model, k)?;
        let cara = cara_optimal(&model, k, &e_a, alpha)?;
        let log = log_optimal(&model, k, &e_a)?;
        types.push(MarketRow {
            label: f.label.clone(),
            normalizer: d.normalizer,
            entropy_pq: relative_entropy(&d, Direction::PQ),
            entropy_qp: relative_entropy(&d, Direction::QP),
            cara_utility: cara.utility,
            cara_oracle_gap: verify_budget_optimality(&model, k, &e_a, &UtilitySpec::cara(alpha), MARKET_ORACLE_GRID)?,
            log_utility: log.utility,
            log_oracle_gap: verify_budget_optimality(&model, k, &e_a, &UtilitySpec::log(), MARKET_ORACLE_GRID)?,
            delegation_value: delegation_value(&model, k, &vec![0.0; m], beta, &e_a, &e_p, &UtilitySpec::linear())?,
            cara_claim: cara.x_star,
            log_claim: log.x_star,
        });
    }
    let mut summary = String::from(SUMMARY_HEADER);
    for (k, row) in types.iter().enumerate() {
        for i in 0..m {
            let x = row.cara_claim[i] - e_a[i];
            // Utility levels of the CARA claim; no constraint system here.
            let c = -(-alpha * row.cara_claim[i]).exp_m1();
            writeln!(summary, "{},{},{},{},,", csv_field(&model.drift_types[k].label), model.nodes[i], c, x)?;
        }
    }
    let report = MarketReport {
        horizon: model.horizon,
        nodes: model.nodes.clone(),
        weights: model.weights.clone(),
        alpha,
        beta,
        e_a,
        e_p,
        types,
    };
    let json = to_json(config, None, &report)?;
    write_artifacts(&config.out, &json, TRACE_HEADER, &summary)?;
    Ok(Outcome::Success)
}

fn default_market(nodes: usize) -> anyhow::Result<MarketModel> {
    Ok(MarketModel::gauss_hermite(
        1.0,
        nodes,
        &[
            DriftSpec::Zero { label: "neutral".into() },
            DriftSpec::ClampedLinear {
                label: "bull".into(),
                slope: 0.3,
                support: 1.5,
            },
            DriftSpec::ClampedLinear {
                label: "bear".into(),
                slope: -0.3,
                support: 1.5,
            },
        ],
    )?)
}

fn run_ae_check(config: &RunConfig) -> anyhow::Result<Outcome> {
    let u = match (&config.utility, &config.preset, &config.instance) {
        (Some(u), None, None) => u.clone(),
        (None, Some(_), None) | (None, None, Some(_)) => config.load_instance()?.u,
        _ => bail!("ae-check needs exactly one of --utility, --preset or --instance"),
    };
    let report = ae_check(
        &u,
        config.z_max.unwrap_or(AE_DEFAULT_Z_MAX),
        config.margin.unwrap_or(AE_DEFAULT_MARGIN),
    )?;
    #[derive(Serialize)]
    struct AeResult<'a> {
        utility: &'a UtilitySpec,
        #[serde(flatten)]
        report: &'a rcl_core::transform::AeReport,
    }
    let json = to_json(config, None, AeResult { utility: &u, report: &report })?;
    write_artifacts(&config.out, &json, TRACE_HEADER, SUMMARY_HEADER)?;
    Ok(Outcome::Success)
}

/// A batch of runs for [`run_sweep`].
#[derive(Clone, Debug, Deserialize)]
pub struct SweepFile {
    pub runs: Vec<RunConfig>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepEntry {
    pub out: PathBuf,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Thread count for sweeps: `RCL_THREADS` if set to a positive integer,
/// otherwise rayon's default.
pub fn sweep_threads() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => {
            let n: usize = s
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV}={s:?} is not a positive integer"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be positive");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

/// Run every configuration in parallel. Results come back in input order;
/// each run writes only into its own output directory.
pub fn run_sweep(runs: &[RunConfig], threads: Option<usize>) -> anyhow::Result<Vec<SweepEntry>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    Ok(pool.install(|| {
        runs.par_iter()
            .map(|cfg| {
                let result = run(cfg);
                SweepEntry {
                    out: cfg.out.clone(),
                    exit_code: exit_code(&result),
                    error: result.err().map(|e| format!("{e:#}")),
                }
            })
            .collect()
    }))
}
