//! `fmpca`: data generation, model fitting, prediction, model comparison,
//! the replicated benchmark and standalone protocol runs.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures. Non-convergence within `--max-iter` is not an error;
//! it is reported in the outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use fmpca::benchmark::{self, BenchmarkConfig, CvConfig};
use fmpca::datagen::{self, SimConfig};
use fmpca::fed::{self, FedConfig, FedRunConfig, Federation, InMemoryBus, PayloadKind};
use fmpca::mpca::{self, MpcaConfig, MpcaModel, RankTarget, Tolerance};
use fmpca::prognostics::{self, Family, ProgModel, RegressionParty};
use fmpca::{linalg, tensor, tnsr, Error, ExecMode, Result, Tensor};

#[derive(Parser)]
#[command(name = "fmpca", version, about = "Federated multilinear PCA and degradation prognostics")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic heat-transfer degradation dataset.
    GenData(GenArgs),
    /// Fit MPCA features and a prognostic model on a dataset.
    Fit(FitArgs),
    /// Predict time to failure for one tensor.
    Predict(PredictArgs),
    /// Compare two fitted model directories.
    Compare(CompareArgs),
    /// Run the replicated prognostics benchmark.
    Benchmark(BenchArgs),
    /// Run the federated protocol from a run configuration.
    FedRun(FedRunArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Simulation config (JSON); unspecified fields take the full-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the 11×11×5 desk preset instead of the full-scale defaults.
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    #[arg(long)]
    assets: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Central,
    Federated,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Normal,
    Lognormal,
    Sev,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Normal => Family::Normal,
            FamilyArg::Lognormal => Family::Lognormal,
            FamilyArg::Sev => Family::Sev,
        }
    }
}

#[derive(Args)]
struct RankArgs {
    /// Fixed ranks, e.g. 3,3,2.
    #[arg(long, value_delimiter = ',', conflicts_with = "variation")]
    ranks: Option<Vec<usize>>,
    /// Fraction of variation kept per mode (default 0.97). Ranks are then
    /// lowered until the feature count leaves two degrees of freedom.
    #[arg(long)]
    variation: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset directory with manifest.csv.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "central")]
    mode: Mode,
    /// Assets per user, in manifest order (federated mode; default one user).
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<usize>>,
    #[command(flatten)]
    ranks: RankArgs,
    /// Convergence threshold as a multiple of the initial scatter.
    #[arg(long, default_value_t = 1e-6)]
    eta: f64,
    /// Read --eta as an absolute scatter increase.
    #[arg(long)]
    eta_absolute: bool,
    #[arg(long, default_value_t = mpca::DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Seed for the protocol's masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "lognormal")]
    family: FamilyArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// TNSR file with one degradation tensor.
    #[arg(long)]
    tensor: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark config (JSON); defaults to the desk-scale design.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variation: Option<f64>,
    /// Select the variation target by 10-fold cross-validation.
    #[arg(long)]
    cv: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FedRunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Fit(a) => fit(a, exec),
        Command::Predict(a) => predict(a),
        Command::Compare(a) => compare(a),
        Command::Benchmark(a) => bench(a, exec),
        Command::FedRun(a) => fed_run(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gen_data(args: GenArgs, exec: ExecMode) -> Result<()> {
    let mut cfg = match (&args.config, args.desk) {
        (Some(path), _) => read_json::<SimConfig>(path)?,
        (None, true) => SimConfig::desk(125, 0),
        (None, false) => SimConfig::default(),
    };
    if let Some(n) = args.assets {
        cfg.asset_count = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let data = datagen::generate_dataset(&cfg, exec)?;
    datagen::write_dataset(&args.out, &data)?;
    println!(
        "wrote {} assets of {:?} to {} (ttf ranks {:?})",
        data.assets.len(),
        cfg.frame_dims(),
        args.out.display(),
        data.generator.ranks
    );
    Ok(())
}

fn tolerance(eta: f64, absolute: bool) -> Tolerance {
    if absolute {
        Tolerance::Absolute(eta)
    } else {
        Tolerance::Relative(eta)
    }
}

fn split_users(tensors: &[Tensor], ttfs: &[f64], split: &[usize]) -> Result<Vec<(u32, Vec<Tensor>, Vec<f64>)>> {
    if split.iter().sum::<usize>() != tensors.len() || split.contains(&0) {
        return Err(Error::Config(format!(
            "split {split:?} must be positive and sum to the {} training assets",
            tensors.len()
        )));
    }
    let mut start = 0;
    Ok(split
        .iter()
        .enumerate()
        .map(|(d, &n)| {
            let part = (d as u32 + 1, tensors[start..start + n].to_vec(), ttfs[start..start + n].to_vec());
            start += n;
            part
        })
        .collect())
}

fn fit(args: FitArgs, exec: ExecMode) -> Result<()> {
    let assets = prognostics::load_manifest(&args.dataset)?;
    let tensors: Vec<Tensor> = assets.iter().map(|a| a.tensor.clone()).collect();
    let ttfs: Vec<f64> = assets.iter().map(|a| a.ttf).collect();
    let family = Family::from(args.family);
    let eta = tolerance(args.eta, args.eta_absolute);
    let cap = tensors.len().saturating_sub(2);
    fs::create_dir_all(&args.out)?;

    let (model, prog, extra) = match args.mode {
        Mode::Central => {
            let ranks = match (&args.ranks.ranks, args.ranks.variation) {
                (Some(r), _) => r.clone(),
                (None, q) => benchmark::cap_ranks(&mpca::choose_ranks_with(&tensors, q.unwrap_or(0.97), exec)?, cap),
            };
            let config = MpcaConfig { ranks: RankTarget::Fixed(ranks), eta, max_iter: args.max_iter, exec };
            let model = mpca::mpca_fit(&tensors, &config)?;
            let features = mpca::project_features_with(&tensors, &model, false, exec)?;
            let prog = prognostics::lls_fit(&features, &ttfs, family)?;
            (model, prog, json!({ "mode": "central", "users": [tensors.len()] }))
        }
        Mode::Federated => {
            let split = args.split.clone().unwrap_or_else(|| vec![tensors.len()]);
            let users = split_users(&tensors, &ttfs, &split)?;
            let data: Vec<(u32, Vec<Tensor>)> = users.iter().map(|u| (u.0, u.1.clone())).collect();
            let mut cfg = FedConfig { eta, max_iter: args.max_iter, seed: args.seed, exec, ..FedConfig::new(RankTarget::Fixed(vec![])) };
            let ranks = match (&args.ranks.ranks, args.ranks.variation) {
                (Some(r), _) => r.clone(),
                (None, q) => {
                    let mut probe = Federation::new(data.clone())?;
                    let q = q.unwrap_or(0.97);
                    let chosen = fed::fed_choose_ranks(&mut probe.users, &mut probe.server, &mut probe.bus, q, &cfg)?;
                    benchmark::cap_ranks(&chosen, cap)
                }
            };
            cfg.ranks = RankTarget::Fixed(ranks);
            let mut federation = Federation::new(data)?;
            let outcome = federation.run_mpca(&cfg)?;
            federation.bus.export_jsonl(&args.out.join("messages.jsonl"))?;
            let audit = federation.audit(&PayloadKind::MPCA)?;

            let parties: Vec<RegressionParty> = outcome
                .features
                .iter()
                .zip(&users)
                .map(|((id, f), u)| RegressionParty { id: *id, features: f.clone(), ttfs: u.2.clone() })
                .collect();
            let mut bus = InMemoryBus::new();
            let prog = prognostics::fed_lls_fit(&parties, family, &mut bus, args.seed, &cfg.mask)?;
            bus.export_jsonl(&args.out.join("regression_messages.jsonl"))?;
            let extra = json!({
                "mode": "federated",
                "users": split,
                "messages": audit.messages,
                "audit_clean": audit.is_clean(),
            });
            (outcome.model(), prog, extra)
        }
    };
    model.save(&args.out.join("mpca"))?;
    prog.save(&args.out.join("prog_model.json"))?;
    let mut summary = json!({
        "ranks": model.ranks(),
        "iterations_run": model.iterations_run,
        "converged": model.converged,
        "scatter_history": model.scatter_history,
        "family": prog.family,
        "sigma": prog.sigma,
    });
    summary.as_object_mut().expect("object").extend(extra.as_object().expect("object").clone());
    write_json(&args.out.join("fit.json"), &summary)?;
    println!(
        "fitted ranks {:?} in {} iterations (converged: {}); model written to {}",
        model.ranks(),
        model.iterations_run,
        model.converged,
        args.out.display()
    );
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let model = MpcaModel::load(&args.model.join("mpca"))?;
    let prog = ProgModel::load(&args.model.join("prog_model.json"))?;
    let x = tnsr::read_file(&args.tensor)?;
    if x.dims() != model.dims() {
        return Err(Error::DimMismatch(format!("tensor dims {:?}, model expects {:?}", x.dims(), model.dims())));
    }
    let y = tensor::multi_mode_project(&x, &model.projection, true)?;
    let p = prognostics::predict_ttf(&prog, &y)?;
    println!("{}", json!({ "location": p.location, "scale": p.scale, "point": p.point }));
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let (ma, mb) = (MpcaModel::load(&args.a.join("mpca"))?, MpcaModel::load(&args.b.join("mpca"))?);
    if ma.ranks() != mb.ranks() || ma.dims() != mb.dims() {
        return Err(Error::Config(format!(
            "models differ in shape: dims {:?}/{:?}, ranks {:?}/{:?}",
            ma.dims(),
            mb.dims(),
            ma.ranks(),
            mb.ranks()
        )));
    }
    let per_mode: Vec<f64> = ma
        .projection
        .factors()
        .iter()
        .zip(mb.projection.factors())
        .map(|(a, b)| linalg::max_abs_diff_up_to_sign(a, b))
        .collect();
    let mean_dev = ma.mean.data().iter().zip(mb.mean.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scatter_dev = ma
        .scatter_history
        .iter()
        .zip(&mb.scatter_history)
        .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let mut report = json!({
        "factor_deviation": per_mode,
        "max_factor_deviation": per_mode.iter().copied().fold(0.0, f64::max),
        "mean_deviation": mean_dev,
        "scatter_history_max_rel_diff": scatter_dev,
        "iterations": [ma.iterations_run, mb.iterations_run],
    });
    let (pa, pb) = (args.a.join("prog_model.json"), args.b.join("prog_model.json"));
    if pa.exists() && pb.exists() {
        let (pa, pb) = (ProgModel::load(&pa)?, ProgModel::load(&pb)?);
        // features may differ in sign with the factors, so compare magnitudes
        let beta = pa.beta1.iter().zip(&pb.beta1).map(|(a, b)| (a.abs() - b.abs()).abs()).fold(0.0, f64::max);
        report["beta0_abs_diff"] = json!((pa.beta0 - pb.beta0).abs());
        report["beta1_max_abs_diff_up_to_sign"] = json!(beta);
        report["sigma_abs_diff"] = json!((pa.sigma - pb.sigma).abs());
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench(args: BenchArgs, exec: ExecMode) -> Result<()> {
    let (mut cfg, base) = match &args.config {
        Some(path) => (
            BenchmarkConfig::load(path)?,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (BenchmarkConfig::default(), PathBuf::from(".")),
    };
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.sim.seed = s;
    }
    if let Some(q) = args.variation {
        cfg.variation = q;
    }
    if args.cv {
        cfg.cv.get_or_insert_with(CvConfig::default);
    }
    cfg.validate()?;
    let assets = benchmark::benchmark_assets(&cfg, &base, exec)?;
    let report = benchmark::run_benchmark(&cfg, &assets, exec)?;
    report.write(&args.out)?;
    println!("# rank selection: {}", report.rank_selection);
    println!("{:<10} {:>10} {:>10} {:>10} {:>10} {:>6}", "method", "median", "q1", "q3", "iqr", "n");
    for s in &report.summary {
        println!(
            "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>6}",
            s.method.to_string(),
            s.median,
            s.q1,
            s.q3,
            s.iqr,
            s.n
        );
    }
    if let Some(gap) = report.max_rel_diffs().into_iter().reduce(f64::max) {
        println!("max relative fmpca/combined prediction gap: {gap:.3e}");
    }
    Ok(())
}

fn fed_run(args: FedRunArgs, exec: ExecMode) -> Result<()> {
    let run = FedRunConfig::load(&args.config)?;
    let cfg = run.fed_config(exec)?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut federation = Federation::new(run.load_users(&base)?)?;
    let outcome = federation.run_mpca(&cfg)?;
    fs::create_dir_all(&args.out)?;
    federation.bus.export_jsonl(&args.out.join("messages.jsonl"))?;
    outcome.model().save(&args.out.join("mpca"))?;
    let audit = federation.audit(&PayloadKind::MPCA)?;
    let leaks: Vec<_> = audit
        .leaks
        .iter()
        .map(|l| json!({ "seq": l.seq, "owner": l.owner, "what": l.what }))
        .collect();
    let summary = json!({
        "users": federation.users.iter().map(|u| json!({"id": u.id(), "samples": u.sample_count()})).collect::<Vec<_>>(),
        "ranks": outcome.projection.ranks(),
        "iterations_run": outcome.iterations_run,
        "converged": outcome.converged,
        "scatter_history": outcome.scatter_history,
        "messages": audit.messages,
        "audit_clean": audit.is_clean(),
        "disallowed_kinds": audit.disallowed.iter().map(|d| d.1.as_str()).collect::<Vec<_>>(),
        "leaks": leaks,
    });
    write_json(&args.out.join("run.json"), &summary)?;
    println!(
        "{} users, ranks {:?}, {} messages, audit {}",
        federation.users.len(),
        outcome.projection.ranks(),
        audit.messages,
        if audit.is_clean() { "clean" } else { "FLAGGED" }
    );
    Ok(())
}
