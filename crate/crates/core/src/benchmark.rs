//! Seeded benchmark suites on the standard synthetic population.
//!
//! Every suite expands into a list of independent training runs. Runs may
//! execute on worker threads, but results are always aggregated in run-index
//! order, so the emitted CSV is byte-identical across machines and thread
//! counts.
//!
//! Within one seed every method sees the same dataset, split and initial
//! weights; comparisons are paired per seed and a suite's predicate holds when
//! it is satisfied in at least 80% of the seeds (4 of 5).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodingConfig, Family};
use crate::error::{Error, Result};
use crate::synth::{self, PopulationSpec, Protocol, SplitSpec};
use crate::trainer::{self, relative_drops, Architecture, TrainConfig, TrainData};

pub const SPEC_VERSION: u32 = 1;
pub const RUNS_HEADER: &str =
    "run,seed,protocol,family,sigma,lambda,mask_side,status,train_mae,test_mae,test_epsilon";
pub const SUMMARY_HEADER: &str = "method,protocol,sigma,lambda,mask_side,runs,mean_mae,std_mae";
/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "ORDINALENC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Suite {
    EncodingsSe,
    EncodingsRs,
    SigmaSweep,
    Maskout,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::EncodingsSe,
        Suite::EncodingsRs,
        Suite::SigmaSweep,
        Suite::Maskout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::EncodingsSe => "encodings-se",
            Suite::EncodingsRs => "encodings-rs",
            Suite::SigmaSweep => "sigma-sweep",
            Suite::Maskout => "maskout",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown suite '{s}' (expected encodings-se, encodings-rs, sigma-sweep or maskout)"
                ))
            })
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything that defines the benchmark problem. The standard instance is
/// pinned by [`BenchmarkSpec::standard`] and versioned by `version`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub version: u32,
    /// Population template; `seed` is replaced per benchmark seed.
    pub population: PopulationSpec,
    pub architecture: Architecture,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub aux_start_epoch: usize,
    /// Fraction of images (RS) or subjects (SE) held out for testing.
    pub test_fraction: f64,
    /// Correlation width used by the encoding comparisons, per protocol.
    pub sigma_se: f64,
    pub sigma_rs: f64,
    /// Grid scanned by the sigma sweep.
    pub sigma_grid: Vec<f64>,
    /// Families swept over the grid; the sweep's predicate must hold for each.
    #[serde(default = "default_sweep_families")]
    pub sweep_families: Vec<Family>,
    /// Maskout weight compared against the lambda = 0 baseline.
    pub lambda: f64,
    /// Hole side of the Maskout run the predicate is evaluated on.
    pub mask_side: usize,
    /// Additional hole sides reported by the Maskout suite.
    pub extra_mask_sides: Vec<usize>,
    pub flip_avg: bool,
    /// Train each family at the gradient magnitude of its unnormalized loss
    /// (see [`summed_loss_scale`]) instead of the per-pair mean.
    pub summed_loss_scale: bool,
}

fn default_sweep_families() -> Vec<Family> {
    vec![Family::Ldl, Family::SoftRank]
}

/// Ratio between the summed pairwise loss `(1/2) sum_k` and the per-pair mean
/// used by [`crate::loss`]: `K/2` for soft-ranking, `(K-1)/2` for
/// hard-ranking, 1 for LDL (whose loss is already a single sum over K).
pub fn summed_loss_scale(family: Family, max_age: usize) -> f64 {
    match family {
        Family::Ldl => 1.0,
        Family::HardRank => (max_age - 1) as f64 / 2.0,
        Family::SoftRank => max_age as f64 / 2.0,
    }
}

impl BenchmarkSpec {
    pub fn standard() -> BenchmarkSpec {
        BenchmarkSpec {
            version: SPEC_VERSION,
            population: PopulationSpec {
                n_subjects: 400,
                images_min: 3,
                images_max: 8,
                max_age: 101,
                cluster_width: 3,
                noise: 0.5,
                identity_scale: 0.5,
                age_shift: 3.0,
                monotone_channels: 3,
                age_channels: 6,
                c_in: 8,
                height: 7,
                width: 7,
                embedding_seed: 2019,
                seed: 0,
            },
            architecture: Architecture {
                hidden: 32,
                depth: 1,
            },
            epochs: 60,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 64,
            aux_start_epoch: 10,
            test_fraction: 0.2,
            sigma_se: 2.0,
            sigma_rs: 0.4,
            sigma_grid: vec![0.4, 1.0, 2.0, 3.6, 6.0],
            sweep_families: default_sweep_families(),
            lambda: 0.3,
            mask_side: 4,
            extra_mask_sides: vec![3, 5],
            flip_avg: true,
            summed_loss_scale: true,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        if self.sigma_grid.is_empty() {
            return Err(Error::InvalidConfig("sigma grid is empty".into()));
        }
        if self.sweep_families.is_empty() || self.sweep_families.contains(&Family::HardRank) {
            return Err(Error::InvalidConfig("sweep families must be LDL and/or soft-ranking".into()));
        }
        if self.sigma_grid.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("sigma grid values must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig("test fraction must be in (0, 1)".into()));
        }
        self.train_config(
            EncodingConfig::new(Family::SoftRank, self.population.max_age, self.sigma_se)?,
            self.lambda,
            self.mask_side,
            0,
        )
        .validate()
    }

    pub fn train_config(&self, encoding: EncodingConfig, lambda: f64, mask_side: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_drops: relative_drops(self.epochs, &[0.8, 0.9], 0.1),
            lambda,
            aux_start_epoch: self.aux_start_epoch,
            mask_side,
            seed,
            encoding,
            flip_avg: self.flip_avg,
            loss_scale: if self.summed_loss_scale {
                summed_loss_scale(encoding.family, encoding.max_age)
            } else {
                1.0
            },
            progress: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub index: usize,
    /// Benchmark seed index (0-based).
    pub seed: u64,
    pub protocol: Protocol,
    pub family: Family,
    pub sigma: f64,
    pub lambda: f64,
    pub mask_side: usize,
}

impl RunSpec {
    fn method(&self) -> String {
        format!("{}", self.family)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: RunSpec,
    pub status: RunStatus,
    pub train_mae: f64,
    pub test_mae: f64,
    pub test_epsilon: f64,
}

impl RunResult {
    pub fn ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// Seeds used for data generation, splitting and initialization of seed `s`.
pub fn derived_seed(base: u64, s: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(s)
}

/// Expands a suite into its runs.
pub fn plan(suite: Suite, spec: &BenchmarkSpec, seeds: u64) -> Vec<RunSpec> {
    let mut runs = Vec::new();
    let mut push = |seed, protocol, family, sigma, lambda, mask_side| {
        runs.push(RunSpec {
            index: runs.len(),
            seed,
            protocol,
            family,
            sigma,
            lambda,
            mask_side,
        })
    };
    for seed in 0..seeds {
        match suite {
            Suite::EncodingsSe | Suite::EncodingsRs => {
                let (protocol, sigma) = if suite == Suite::EncodingsSe {
                    (Protocol::SubjectExclusive, spec.sigma_se)
                } else {
                    (Protocol::RandomSplit, spec.sigma_rs)
                };
                for family in Family::ALL {
                    let s = if family == Family::HardRank { 0.0 } else { sigma };
                    push(seed, protocol, family, s, 0.0, spec.mask_side);
                }
            }
            Suite::SigmaSweep => {
                for &family in &spec.sweep_families {
                    for protocol in [Protocol::RandomSplit, Protocol::SubjectExclusive] {
                        for &sigma in &spec.sigma_grid {
                            push(seed, protocol, family, sigma, 0.0, spec.mask_side);
                        }
                    }
                }
            }
            Suite::Maskout => {
                let p = Protocol::SubjectExclusive;
                push(seed, p, Family::SoftRank, spec.sigma_se, 0.0, spec.mask_side);
                push(seed, p, Family::SoftRank, spec.sigma_se, spec.lambda, spec.mask_side);
                for &side in &spec.extra_mask_sides {
                    push(seed, p, Family::SoftRank, spec.sigma_se, spec.lambda, side);
                }
            }
        }
    }
    runs
}

/// Trains and evaluates one run. Training failures are captured in the
/// result rather than propagated.
pub fn execute_run(spec: &BenchmarkSpec, base_seed: u64, run: &RunSpec) -> RunResult {
    let mut result = RunResult {
        run: run.clone(),
        status: RunStatus::Ok,
        train_mae: f64::NAN,
        test_mae: f64::NAN,
        test_epsilon: f64::NAN,
    };
    match try_run(spec, base_seed, run) {
        Ok((train_mae, test_mae, test_eps)) => {
            result.train_mae = train_mae;
            result.test_mae = test_mae;
            result.test_epsilon = test_eps;
        }
        Err(e) => result.status = RunStatus::Failed(e.to_string()),
    }
    result
}

fn try_run(spec: &BenchmarkSpec, base_seed: u64, run: &RunSpec) -> Result<(f64, f64, f64)> {
    let seed = derived_seed(base_seed, run.seed);
    let population = PopulationSpec {
        seed,
        ..spec.population.clone()
    };
    let dataset = synth::generate(&population)?;
    let split = SplitSpec {
        protocol: run.protocol,
        test_fraction: spec.test_fraction,
        folds: 1,
        seed,
    };
    let fold = synth::split(&dataset, &split)?.remove(0);
    let enc = EncodingConfig::new(run.family, population.max_age, run.sigma)?;
    let cfg = spec.train_config(enc, run.lambda, run.mask_side, seed);
    let data = TrainData {
        samples: &dataset.samples,
        train: &fold.train,
        val: &[],
        test: &fold.test,
    };
    let (_, report) = trainer::train(spec.architecture, data, &cfg)?;
    let test = report
        .test
        .ok_or_else(|| Error::Contract("run produced no test metrics".into()))?;
    let train_mae = report.epochs.last().map_or(f64::NAN, |e| e.train_mae);
    Ok((train_mae, test.mae, test.epsilon_error))
}

/// Worker count from `ORDINALENC_THREADS`, defaulting to the machine's
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Executes `runs` on up to `threads` workers; results are in run order.
pub fn execute(spec: &BenchmarkSpec, base_seed: u64, runs: &[RunSpec], threads: usize) -> Result<Vec<RunResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        runs.par_iter()
            .map(|r| execute_run(spec, base_seed, r))
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedVerdict {
    pub seed: u64,
    pub holds: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub description: String,
    /// `None` for suites without an acceptance predicate.
    pub verdicts: Option<Vec<SeedVerdict>>,
    pub required: usize,
    pub holds: bool,
}

/// Seeds that must satisfy a per-seed predicate: 80% of them, rounded up.
pub fn required_seeds(seeds: u64) -> usize {
    ((seeds as f64) * 0.8).ceil() as usize
}

fn mae_of<'a>(results: &'a [RunResult], seed: u64, pick: impl Fn(&RunSpec) -> bool + 'a) -> Option<f64> {
    results
        .iter()
        .find(|r| r.run.seed == seed && pick(&r.run))
        .filter(|r| r.ok())
        .map(|r| r.test_mae)
}

/// Index of the smallest value; ties go to the first (smallest sigma).
fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            return None;
        }
        if best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn evaluate_predicate(suite: Suite, spec: &BenchmarkSpec, results: &[RunResult], seeds: u64) -> Predicate {
    let required = required_seeds(seeds);
    let verdicts: Option<Vec<SeedVerdict>> = match suite {
        Suite::EncodingsRs => None,
        Suite::EncodingsSe => Some(
            (0..seeds)
                .map(|seed| {
                    let get = |f: Family| mae_of(results, seed, move |r| r.family == f);
                    match (get(Family::SoftRank), get(Family::Ldl), get(Family::HardRank)) {
                        (Some(s), Some(l), Some(h)) => SeedVerdict {
                            seed,
                            holds: s <= l && s <= h,
                            detail: format!("soft={s:.4} ldl={l:.4} hard={h:.4}"),
                        },
                        _ => SeedVerdict {
                            seed,
                            holds: false,
                            detail: "missing run".into(),
                        },
                    }
                })
                .collect(),
        ),
        Suite::SigmaSweep => Some(
            (0..seeds)
                .map(|seed| {
                    let best = |f: Family, p: Protocol| -> Option<f64> {
                        let curve: Option<Vec<f64>> = spec
                            .sigma_grid
                            .iter()
                            .map(|&s| {
                                mae_of(results, seed, move |r| r.family == f && r.protocol == p && r.sigma == s)
                            })
                            .collect();
                        curve.and_then(|c| argmin(&c)).map(|i| spec.sigma_grid[i])
                    };
                    let mut holds = true;
                    let mut detail = Vec::new();
                    for &f in &spec.sweep_families {
                        match (best(f, Protocol::RandomSplit), best(f, Protocol::SubjectExclusive)) {
                            (Some(rs), Some(se)) => {
                                holds &= rs < se;
                                detail.push(format!("{f}: best_sigma_rs={rs} best_sigma_se={se}"));
                            }
                            _ => {
                                holds = false;
                                detail.push(format!("{f}: missing run"));
                            }
                        }
                    }
                    SeedVerdict {
                        seed,
                        holds,
                        detail: detail.join("; "),
                    }
                })
                .collect(),
        ),
        Suite::Maskout => Some(
            (0..seeds)
                .map(|seed| {
                    let base = mae_of(results, seed, |r| r.lambda == 0.0);
                    let side = spec.mask_side;
                    let lambda = spec.lambda;
                    let masked =
                        mae_of(results, seed, move |r| r.lambda == lambda && r.mask_side == side);
                    match (base, masked) {
                        (Some(b), Some(m)) => SeedVerdict {
                            seed,
                            holds: m < b,
                            detail: format!("baseline={b:.4} maskout_{side}x{side}={m:.4}"),
                        },
                        _ => SeedVerdict {
                            seed,
                            holds: false,
                            detail: "missing run".into(),
                        },
                    }
                })
                .collect(),
        ),
    };
    let description = match suite {
        Suite::EncodingsSe => "soft-ranking MAE <= LDL and <= hard-ranking (SE)".to_string(),
        Suite::EncodingsRs => "informational (no predicate)".to_string(),
        Suite::SigmaSweep => format!(
            "MAE-minimizing sigma under RS < under SE, for each of {}",
            spec.sweep_families.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(", ")
        ),
        Suite::Maskout => format!(
            "maskout lambda={} side={} MAE < lambda=0 baseline (SE)",
            spec.lambda, spec.mask_side
        ),
    };
    let holds = match &verdicts {
        None => true,
        Some(v) => v.iter().filter(|v| v.holds).count() >= required,
    };
    Predicate {
        description,
        verdicts,
        required,
        holds,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub seeds: u64,
    pub results: Vec<RunResult>,
    pub predicate: Predicate,
    pub failed_runs: usize,
}

impl SuiteOutcome {
    /// More than 20% of runs failing makes the whole suite a failure.
    pub fn too_many_failures(&self) -> bool {
        self.failed_runs * 5 > self.results.len()
    }

    pub fn success(&self) -> bool {
        self.predicate.holds && !self.too_many_failures()
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from(RUNS_HEADER);
        out.push('\n');
        for r in &self.results {
            let status = match &r.status {
                RunStatus::Ok => "ok",
                RunStatus::Failed(_) => "failed",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                r.run.index,
                r.run.seed,
                r.run.protocol,
                r.run.method(),
                r.run.sigma,
                r.run.lambda,
                r.run.mask_side,
                status,
                r.train_mae,
                r.test_mae,
                r.test_epsilon
            );
        }
        out
    }

    /// Mean and sample standard deviation of test MAE per configuration, in
    /// first-appearance order.
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        let mut rows: Vec<SummaryRow> = Vec::new();
        for r in &self.results {
            let key = (r.run.method(), r.run.protocol, r.run.sigma, r.run.lambda, r.run.mask_side);
            let pos = rows.iter().position(|row| {
                (row.method.clone(), row.protocol, row.sigma, row.lambda, row.mask_side) == key
            });
            let row = match pos {
                Some(p) => &mut rows[p],
                None => {
                    rows.push(SummaryRow {
                        method: key.0,
                        protocol: key.1,
                        sigma: key.2,
                        lambda: key.3,
                        mask_side: key.4,
                        maes: Vec::new(),
                    });
                    rows.last_mut().unwrap()
                }
            };
            if r.ok() {
                row.maes.push(r.test_mae);
            }
        }
        rows
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for row in self.summary_rows() {
            let (mean, std) = row.mean_std();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{:.6}",
                row.method,
                row.protocol,
                row.sigma,
                row.lambda,
                row.mask_side,
                row.maes.len(),
                mean,
                std
            );
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "suite: {} ({} seeds)", self.suite, self.seeds);
        for row in self.summary_rows() {
            let (mean, std) = row.mean_std();
            let _ = writeln!(
                out,
                "  {:<5} {} sigma={:<4} lambda={:<4} side={}  MAE {:.4} ± {:.4}  (n={})",
                row.method,
                row.protocol,
                row.sigma,
                row.lambda,
                row.mask_side,
                mean,
                std,
                row.maes.len()
            );
        }
        let _ = writeln!(out, "predicate: {}", self.predicate.description);
        if let Some(v) = &self.predicate.verdicts {
            for sv in v {
                let _ = writeln!(
                    out,
                    "  seed {}: {} ({})",
                    sv.seed,
                    if sv.holds { "holds" } else { "fails" },
                    sv.detail
                );
            }
            let n = v.iter().filter(|s| s.holds).count();
            let _ = writeln!(out, "  {n}/{} seeds hold, {} required", v.len(), self.predicate.required);
        }
        let _ = writeln!(out, "failed runs: {}/{}", self.failed_runs, self.results.len());
        let _ = writeln!(out, "result: {}", if self.success() { "PASS" } else { "FAIL" });
        out
    }

    /// Writes `runs.csv`, `summary.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("runs.csv", self.runs_csv()),
            ("summary.csv", self.summary_csv()),
            ("summary.txt", self.summary_text()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub protocol: Protocol,
    pub sigma: f64,
    pub lambda: f64,
    pub mask_side: usize,
    pub maes: Vec<f64>,
}

impl SummaryRow {
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.maes.len();
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let mean = self.maes.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (self.maes.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        (mean, std)
    }
}

/// Plans, executes and judges a suite.
pub fn run_suite(suite: Suite, spec: &BenchmarkSpec, seeds: u64, base_seed: u64, threads: usize) -> Result<SuiteOutcome> {
    spec.validate()?;
    if seeds == 0 {
        return Err(Error::InvalidConfig("benchmark needs at least one seed".into()));
    }
    let runs = plan(suite, spec, seeds);
    let results = execute(spec, base_seed, &runs, threads)?;
    let failed_runs = results.iter().filter(|r| !r.ok()).count();
    let predicate = evaluate_predicate(suite, spec, &results, seeds);
    Ok(SuiteOutcome {
        suite,
        seeds,
        results,
        predicate,
        failed_runs,
    })
}
