mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ordinalenc::benchmark::{self, BenchmarkSpec, Suite};
use ordinalenc::encoding::{encode, AgeLabel, EncodingConfig, Family, DEFAULT_MAX_AGE};
use ordinalenc::gradcheck::{self, DEFAULT_TOLERANCE};
use ordinalenc::metrics::{self, csv_row, CSV_HEADER};
use ordinalenc::synth::{self, PopulationSpec, Protocol, SplitSpec};
use ordinalenc::trainer::{self, TrainData};
use ordinalenc::{Error, ModelParams};

/// Ordinal age encodings (LDL, hard-ranking, soft-ranking) with Maskout
/// regularization on synthetic multi-image subjects.
///
/// Any subcommand accepts `--config FILE`, a key=value file whose keys are
/// that subcommand's long flag names; flags on the command line win.
#[derive(Debug, Parser)]
#[command(name = "ordinalenc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the target vector of an age as `k,value` CSV.
    Encode(EncodeArgs),
    /// Finite-difference check of loss and model gradients.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train on one fold of a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Run a benchmark suite over several seeds.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// ldl, hard or soft.
    #[arg(long)]
    family: Family,
    /// Age in years, 1..=max-age.
    #[arg(long, allow_negative_numbers = true)]
    age: i64,
    /// Correlation width; ignored by hard-ranking.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_AGE)]
    max_age: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check a single family; all three by default.
    #[arg(long)]
    family: Option<Family>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random draws per suite.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Offset added to the analytic gradients (negative control).
    #[arg(long, default_value_t = 0.0, hide = true, allow_negative_numbers = true)]
    perturb: f64,
}

#[derive(Debug, Clone, Args)]
struct PopulationArgs {
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long)]
    images_min: Option<usize>,
    #[arg(long)]
    images_max: Option<usize>,
    /// Largest age K.
    #[arg(long)]
    max_age: Option<usize>,
    /// Images of a subject lie within this many years of its base age.
    #[arg(long)]
    cluster_width: Option<usize>,
    /// Per-cell noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Standard deviation of identity-vector components.
    #[arg(long)]
    identity_scale: Option<f64>,
    /// Standard deviation (years) of the per-subject apparent age shift.
    #[arg(long)]
    age_shift: Option<f64>,
    #[arg(long)]
    monotone_channels: Option<usize>,
    #[arg(long)]
    age_channels: Option<usize>,
    #[arg(long)]
    c_in: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Seed of the age embedding; datasets sharing it pose the same problem.
    #[arg(long)]
    embedding_seed: Option<u64>,
}

impl PopulationArgs {
    fn apply(&self, p: &mut PopulationSpec) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { p.$f = v; } )* };
        }
        set!(
            n_subjects, images_min, images_max, max_age, cluster_width, noise, identity_scale,
            age_shift, monotone_channels, age_channels, c_in, height, width, embedding_seed
        );
    }
}

#[derive(Debug, Clone, Args)]
struct TrainingArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the Maskout losses.
    #[arg(long)]
    lambda: Option<f64>,
    /// Epoch (0-based) at which the auxiliary branches start.
    #[arg(long)]
    aux_start_epoch: Option<usize>,
    /// Side of the erased square.
    #[arg(long)]
    mask_side: Option<usize>,
    /// Backbone output channels.
    #[arg(long)]
    hidden: Option<usize>,
    /// Backbone layers (1 or 2).
    #[arg(long)]
    depth: Option<usize>,
    /// Predict from the input only, without averaging in its mirror image.
    #[arg(long)]
    no_flip_avg: bool,
    /// Train ranking families on the per-pair mean loss gradient instead of
    /// the summed one.
    #[arg(long)]
    no_summed_loss_scale: bool,
}

impl TrainingArgs {
    fn apply(&self, s: &mut BenchmarkSpec) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        set!(epochs, lr, momentum, weight_decay, batch_size, lambda, aux_start_epoch, mask_side);
        if let Some(h) = self.hidden {
            s.architecture.hidden = h;
        }
        if let Some(d) = self.depth {
            s.architecture.depth = d;
        }
        if self.no_flip_avg {
            s.flip_avg = false;
        }
        if self.no_summed_loss_scale {
            s.summed_loss_scale = false;
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    population: PopulationArgs,
    /// rs (random image split) or se (subject-exclusive).
    #[arg(long, default_value = "se")]
    protocol: Protocol,
    /// 1 for a single holdout, otherwise k-fold.
    #[arg(long, default_value_t = 1)]
    folds: usize,
    /// Held-out fraction for a single holdout.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EncodingArgs {
    #[arg(long, default_value = "soft")]
    family: Family,
    /// Correlation width; defaults to the benchmark's SE value.
    #[arg(long)]
    sigma: Option<f64>,
}

impl EncodingArgs {
    fn config(&self, max_age: usize) -> Result<EncodingConfig, Error> {
        let sigma = match (self.family, self.sigma) {
            (_, Some(s)) => s,
            (Family::HardRank, None) => 0.0,
            (_, None) => BenchmarkSpec::standard().sigma_se,
        };
        EncodingConfig::new(self.family, max_age, sigma)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt and report.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[command(flatten)]
    encoding: EncodingArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Suppress the per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    encoding: EncodingArgs,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// test, train or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Lower edges of age bands for per-band MAE, e.g. 1,21,41,61.
    #[arg(long, value_delimiter = ',')]
    bands: Vec<usize>,
    #[arg(long)]
    no_flip_avg: bool,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    /// encodings-se, encodings-rs, sigma-sweep or maskout.
    #[arg(long)]
    suite: Suite,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Directory for runs.csv, summary.csv and summary.txt.
    #[arg(long)]
    out: PathBuf,
    /// Base seed; seed i of the suite derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    population: PopulationArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long)]
    sigma_se: Option<f64>,
    #[arg(long)]
    sigma_rs: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    sigma_grid: Option<Vec<f64>>,
    /// Extra hole sides reported by the maskout suite.
    #[arg(long, value_delimiter = ',')]
    extra_mask_sides: Option<Vec<usize>>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

/// Exit status for a library error.
fn status_of(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => 1,
        _ => 2,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(status_of(&e))
}

fn cmd_encode(a: EncodeArgs) -> Result<ExitCode, Error> {
    let cfg = EncodingConfig::new(a.family, a.max_age, a.sigma)?;
    let age = AgeLabel::new(a.age, a.max_age)?;
    let t = encode(age, &cfg)?;
    println!("k,value");
    for (i, v) in t.values.iter().enumerate() {
        println!("{},{v}", i + 1);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode, Error> {
    let families: Vec<Family> = match a.family {
        Some(f) => vec![f],
        None => Family::ALL.to_vec(),
    };
    let results = gradcheck::run_all(&families, a.seed, a.trials, a.perturb)?;
    let mut ok = true;
    let mut worst = 0.0f64;
    for r in &results {
        let pass = r.discrepancy.within(DEFAULT_TOLERANCE);
        ok &= pass;
        worst = worst.max(r.discrepancy.worst_rel);
        println!(
            "{:<6} {:<5} trials={} compared={} worst_rel={:.3e} worst_abs_small={:.3e} {}",
            r.suite,
            r.family.name(),
            r.trials,
            r.discrepancy.compared,
            r.discrepancy.worst_rel,
            r.discrepancy.worst_abs_small,
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!("worst relative error {worst:.3e} (threshold {DEFAULT_TOLERANCE:e})");
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_gen_data(a: GenDataArgs) -> Result<ExitCode, Error> {
    let mut pop = BenchmarkSpec::standard().population;
    a.population.apply(&mut pop);
    pop.seed = a.seed;
    let ds = synth::generate(&pop)?;
    let split = SplitSpec {
        protocol: a.protocol,
        test_fraction: a.test_fraction,
        folds: a.folds,
        seed: a.seed,
    };
    synth::save_dataset(&ds, &split, &a.out)?;
    eprintln!(
        "wrote {} samples of {} subjects to {}",
        ds.samples.len(),
        ds.subjects.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn fold_of(stored: &synth::StoredDataset, fold: usize) -> Result<synth::Fold, Error> {
    let mut folds = stored.folds();
    if fold >= folds.len() {
        return Err(Error::InvalidConfig(format!(
            "fold {fold} out of range, dataset has {}",
            folds.len()
        )));
    }
    Ok(folds.swap_remove(fold))
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode, Error> {
    let stored = synth::load_dataset(&a.data)?;
    let fold = fold_of(&stored, a.fold)?;
    let enc = a.encoding.config(stored.dataset.spec.max_age)?;
    let mut spec = BenchmarkSpec::standard();
    a.training.apply(&mut spec);
    let mut cfg = spec.train_config(enc, spec.lambda, spec.mask_side, a.seed);
    cfg.progress = !a.quiet;
    let data = TrainData {
        samples: &stored.dataset.samples,
        train: &fold.train,
        val: &fold.test,
        test: &fold.test,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (params, report) = match trainer::train(spec.architecture, data, &cfg) {
        Ok(v) => v,
        Err(Error::Diverged {
            epoch,
            step,
            last_good,
        }) => {
            let path = a.out.join("last_good.ckpt");
            last_good.save(&path)?;
            eprintln!(
                "error: training diverged at epoch {epoch} step {step}; last finite parameters in {}",
                path.display()
            );
            return Ok(ExitCode::from(1));
        }
        Err(e) => return Err(e),
    };
    params.save(&a.out.join("model.ckpt"))?;
    let report_path = a.out.join("report.json");
    std::fs::write(&report_path, report.to_json()?).map_err(|e| Error::io(&report_path, e))?;
    if let Some(t) = &report.test {
        eprintln!("test n={} mae={:.4} epsilon_error={:.4}", t.n, t.mae, t.epsilon_error);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode, Error> {
    let stored = synth::load_dataset(&a.data)?;
    let params = ModelParams::load(&a.checkpoint)?;
    let enc = a.encoding.config(stored.dataset.spec.max_age)?;
    if params.dims.d != enc.logit_len() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint {} has {} logits per head, {} with K={} needs {}",
            a.checkpoint.display(),
            params.dims.d,
            enc.family,
            enc.max_age,
            enc.logit_len()
        )));
    }
    let fold = fold_of(&stored, a.fold)?;
    let idx: Vec<usize> = match a.split.as_str() {
        "test" => fold.test,
        "train" => fold.train,
        "all" => (0..stored.dataset.samples.len()).collect(),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown split '{other}' (expected test, train or all)"
            )))
        }
    };
    let preds = trainer::predictions(&params, &stored.dataset.samples, &idx, &enc, !a.no_flip_avg)?;
    println!("{CSV_HEADER}");
    let row = |m: &str, v: f64| println!("{}", csv_row(m, &a.split, a.fold, v));
    row("n", preds.len() as f64);
    row("mae", metrics::mae(&preds)?);
    row("epsilon_error", metrics::epsilon_error(&preds)?);
    if !a.bands.is_empty() {
        let table = metrics::mae_by_age_band(&preds, &a.bands, enc.max_age)?;
        for b in &table.bands {
            row(&format!("mae_band_{}_{}", b.lo, b.hi), b.mae.unwrap_or(f64::NAN));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<ExitCode, Error> {
    let mut spec = BenchmarkSpec::standard();
    a.population.apply(&mut spec.population);
    a.training.apply(&mut spec);
    if let Some(s) = a.sigma_se {
        spec.sigma_se = s;
    }
    if let Some(s) = a.sigma_rs {
        spec.sigma_rs = s;
    }
    if let Some(g) = a.sigma_grid {
        spec.sigma_grid = g;
    }
    if let Some(m) = a.extra_mask_sides {
        spec.extra_mask_sides = m;
    }
    if let Some(t) = a.test_fraction {
        spec.test_fraction = t;
    }
    let outcome = benchmark::run_suite(a.suite, &spec, a.seeds, a.seed, benchmark::thread_budget())?;
    outcome.write(&a.out)?;
    let spec_path = a.out.join("spec.json");
    let spec_json = spec.to_json()?;
    std::fs::write(&spec_path, spec_json + "\n").map_err(|e| Error::io(&spec_path, e))?;
    print!("{}", outcome.summary_text());
    Ok(if outcome.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// Long flags of `sub`, each paired with whether it is a switch.
fn known_flags(sub: &str) -> Option<Vec<(String, bool)>> {
    let cmd = Cli::command();
    let sc = cmd.find_subcommand(sub)?;
    Some(
        sc.get_arguments()
            .filter_map(|a| {
                let long = a.get_long()?;
                Some((long.to_string(), !a.get_action().takes_values()))
            })
            .filter(|(l, _)| l != "help" && l != "version")
            .collect(),
    )
}

fn parse_args() -> Result<Cli, ExitCode> {
    let mut args: Vec<String> = std::env::args().collect();
    let config_path = config::take_config_flag(&mut args).map_err(|m| {
        eprintln!("error: {m}");
        ExitCode::from(2)
    })?;
    if let Some(path) = config_path {
        let entries = config::load(Path::new(&path)).map_err(|m| {
            eprintln!("error: {m}");
            ExitCode::from(2)
        })?;
        let sub = args.iter().skip(1).find(|a| !a.starts_with('-')).cloned();
        let known = sub.as_deref().and_then(known_flags);
        let Some(known) = known else {
            eprintln!("error: --config needs a valid subcommand");
            return Err(ExitCode::from(2));
        };
        config::splice(&mut args, &entries, &known).map_err(|m| {
            eprintln!("error: {path}: {m}");
            ExitCode::from(2)
        })?;
    }
    let cmd = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|c| c.args_override_self(true));
    let matches = cmd.try_get_matches_from(args).map_err(|e| {
        let _ = e.print();
        ExitCode::from(if e.use_stderr() { 2 } else { 0 })
    })?;
    Cli::from_arg_matches(&matches).map_err(|e| {
        let _ = e.print();
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = match parse_args() {
        Ok(c) => c,
        Err(code) => return code,
    };
    let result = match cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    result.unwrap_or_else(fail)
}
