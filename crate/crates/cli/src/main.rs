//! Command-line front end: simulate -> fit/select -> covnet/compare/embed.
//!
//! Every subcommand is reproducible from its flag set and seed, and every
//! CSV output starts with a metadata comment line carrying the tool version,
//! the seed, and a hash of the invocation. Exit codes: 0 on success, 2 when
//! a fit stopped at the iteration cap without converging (outputs are still
//! written), 1 on any error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use fuselvm::baselines::{compare_on_community, CovMethod};
use fuselvm::data::load_dataset;
use fuselvm::inference::{fit, get_embeddings, infer_posteriors, FitOptions, SavedModel};
use fuselvm::predictive::{
    degree_difference, inter_covariance, intra_covariance, threshold_network, to_correlation,
    write_matrix_csv, CorrelationNetwork,
};
use fuselvm::selection::select_rank;
use fuselvm::simulate::{
    simulate_classes, simulate_community, simulate_sweep, ClassesConfig, CommunityConfig,
    SweepConfig,
};

#[derive(Debug, Parser)]
#[command(name = "fuselvm", version, about = "Multi-source count-data fusion with a multinomial-Gaussian latent variable model")]
struct Cli {
    /// Worker thread cap (overrides the FUSELVM_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model at a fixed latent rank and write model, trace, and embeddings.
    Fit(FitArgs),
    /// Sweep candidate ranks and select one by BIC.
    Select(SelectArgs),
    /// Generate a synthetic dataset with ground truth.
    Simulate(SimulateArgs),
    /// Export correlation networks (and degree differences between two models).
    Covnet(CovnetArgs),
    /// Compare covariance estimators on fresh community simulations.
    Compare(CompareArgs),
    /// Recompute posterior-mean embeddings for a saved model on a dataset.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
struct FitCommon {
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative ELBO tolerance for the outer loop.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Outer iteration cap.
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Expansion-point fixed-point tolerance.
    #[arg(long, default_value_t = 1e-6)]
    inner_tol: f64,
    /// Inner iteration cap.
    #[arg(long, default_value_t = 50)]
    max_inner_iters: usize,
    /// Diagonal jitter for covariance factorizations.
    #[arg(long, default_value_t = 1e-8)]
    jitter: f64,
}

impl FitCommon {
    fn options(&self) -> FitOptions {
        FitOptions {
            max_outer_iters: self.max_iters,
            rel_tol: self.tol,
            max_inner_iters: self.max_inner_iters,
            inner_tol: self.inner_tol,
            jitter: self.jitter,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Latent rank.
    #[arg(long, conflicts_with = "rank_file")]
    rank: Option<usize>,
    /// File holding the rank (as written by `select`).
    #[arg(long)]
    rank_file: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: FitCommon,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Candidate ranks: `lo:hi`, `lo:hi:step`, or a comma list.
    #[arg(long)]
    ranks: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: FitCommon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Classes,
    Community,
    Sweep,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Latent dimension override.
    #[arg(long)]
    dz: Option<usize>,
    /// Per-species dimensions, comma separated (community) or single (sweep).
    #[arg(long)]
    dims: Option<String>,
    /// Replicates per condition.
    #[arg(long)]
    replicates: Option<usize>,
    /// Poisson rate for totals (community).
    #[arg(long)]
    rate: Option<f64>,
    /// Fixed total count per observation (classes).
    #[arg(long)]
    total: Option<u64>,
    /// Stack the classes into one condition (classes).
    #[arg(long)]
    pool: bool,
    /// Poisson rates for the sweep grid, comma separated.
    #[arg(long)]
    rates: Option<String>,
    /// Loading-entry standard deviation (default `1/sqrt(d_z)`).
    #[arg(long)]
    theta_scale: Option<f64>,
}

#[derive(Debug, Args)]
struct CovnetArgs {
    /// Fitted model JSON; pass twice to also get degree differences.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    /// Build per-species networks (intra) or one stacked network (inter).
    #[arg(long, default_value = "intra")]
    scope: String,
    /// Threshold signed correlations instead of magnitudes.
    #[arg(long)]
    signed: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Simulation preset (community only).
    #[arg(long, default_value = "community")]
    preset: String,
    /// Number of realizations.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Comma-separated subset of empirical, ledoit_wolf, proposed.
    #[arg(long, default_value = "empirical,ledoit_wolf,proposed")]
    methods: String,
    /// Latent rank for the proposed model.
    #[arg(long, default_value_t = 5)]
    rank: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
    #[command(flatten)]
    common: FitCommon,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: FitCommon,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    configure_threads(cli.threads);
    let meta = MetaLine::new(&cli);
    match run(cli, &meta) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads(flag: Option<usize>) {
    let from_env = std::env::var("FUSELVM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = flag.or(from_env) {
        if n >= 1 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// The `# fuselvm <version> seed=<seed> flags=<hash>` comment prefixed to
/// every CSV output.
struct MetaLine {
    line: String,
}

impl MetaLine {
    fn new(cli: &Cli) -> Self {
        let seed = match &cli.command {
            Command::Fit(a) => a.common.seed,
            Command::Select(a) => a.common.seed,
            Command::Simulate(a) => a.seed,
            Command::Covnet(a) => a.seed,
            Command::Compare(a) => a.common.seed,
            Command::Embed(a) => a.common.seed,
        };
        let digest = Sha256::digest(format!("{cli:?}").as_bytes());
        let hash = &hex::encode(digest)[..8];
        MetaLine {
            line: format!("# fuselvm {} seed={seed} flags={hash}", env!("CARGO_PKG_VERSION")),
        }
    }

    fn write_csv(&self, path: &Path, body: &str) -> Result<()> {
        let content = format!("{}\n{}", self.line, body);
        std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn run(cli: Cli, meta: &MetaLine) -> Result<ExitCode> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args, meta),
        Command::Select(args) => cmd_select(args, meta),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Covnet(args) => cmd_covnet(args, meta),
        Command::Compare(args) => cmd_compare(args, meta),
        Command::Embed(args) => cmd_embed(args, meta),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn embeddings_csv(embeddings: &DMatrix<f64>) -> String {
    let d_z = embeddings.ncols();
    let mut body = String::from("sample");
    for j in 0..d_z {
        let _ = write!(body, ",z{j}");
    }
    body.push('\n');
    for i in 0..embeddings.nrows() {
        let _ = write!(body, "{i}");
        for j in 0..d_z {
            let _ = write!(body, ",{}", embeddings[(i, j)]);
        }
        body.push('\n');
    }
    body
}

fn cmd_fit(args: FitArgs, meta: &MetaLine) -> Result<ExitCode> {
    let rank = match (args.rank, &args.rank_file) {
        (Some(r), _) => r,
        (None, Some(path)) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .trim()
            .parse()
            .context("rank file does not contain an integer")?,
        (None, None) => bail!("one of --rank or --rank-file is required"),
    };
    let data = load_dataset(&args.data)?;
    ensure_dir(&args.out)?;
    let model = fit(&data, rank, &args.common.options())?;

    std::fs::write(args.out.join("model.json"), model.saved().to_json()?)
        .with_context(|| format!("writing {}", args.out.join("model.json").display()))?;

    let mut trace_body = String::from("iteration,elbo\n");
    for (t, v) in model.report.elbo_trace.iter().enumerate() {
        let _ = writeln!(trace_body, "{t},{v}");
    }
    meta.write_csv(&args.out.join("elbo.csv"), &trace_body)?;

    for k in 0..data.n_conditions() {
        let embeddings = get_embeddings(&model, k)?;
        meta.write_csv(
            &args.out.join(format!("embeddings_k{k}.csv")),
            &embeddings_csv(&embeddings),
        )?;
    }

    if model.report.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "warning: stopped at {} iterations without converging (outputs written)",
            model.report.iterations
        );
        Ok(ExitCode::from(2))
    }
}

fn parse_ranks(spec: &str) -> Result<Vec<usize>> {
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let (lo, hi, step) = match parts.as_slice() {
            [lo, hi] => (lo.parse()?, hi.parse()?, 1usize),
            [lo, hi, step] => (lo.parse()?, hi.parse()?, step.parse()?),
            _ => bail!("rank spec '{spec}' is not lo:hi or lo:hi:step"),
        };
        if step == 0 || hi < lo {
            bail!("rank spec '{spec}' is empty");
        }
        Ok((lo..=hi).step_by(step).collect())
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<usize>().map_err(Into::into))
            .collect()
    }
}

fn cmd_select(args: SelectArgs, meta: &MetaLine) -> Result<ExitCode> {
    let ranks = parse_ranks(&args.ranks)?;
    let data = load_dataset(&args.data)?;
    ensure_dir(&args.out)?;
    let sweep = select_rank(&data, &ranks, &args.common.options())?;

    let mut body = Vec::new();
    sweep.write_csv(&mut body)?;
    meta.write_csv(&args.out.join("sweep.csv"), &String::from_utf8(body)?)?;
    std::fs::write(
        args.out.join("selected_rank.txt"),
        format!("{}\n", sweep.selected),
    )?;
    println!("selected rank {}", sweep.selected);
    Ok(ExitCode::SUCCESS)
}

fn parse_list<T: std::str::FromStr>(spec: &str, what: &str) -> Result<Vec<T>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| anyhow::anyhow!("invalid {what} entry '{s}'"))
        })
        .collect()
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    ensure_dir(&args.out)?;
    match args.preset {
        Preset::Classes => {
            let mut cfg = ClassesConfig {
                seed: args.seed,
                pool: args.pool,
                theta_scale: args.theta_scale,
                ..Default::default()
            };
            if let Some(d_z) = args.dz {
                cfg.d_z = d_z;
            }
            if let Some(n) = args.replicates {
                cfg.samples_per_class = n;
            }
            if let Some(total) = args.total {
                cfg.total_count = total;
            }
            if let Some(dims) = &args.dims {
                let parsed: Vec<usize> = parse_list(dims, "dims")?;
                if parsed.len() != 1 {
                    bail!("the classes preset has a single observation space");
                }
                cfg.obs_dim = parsed[0];
            }
            let (data, truth) = simulate_classes(&cfg)?;
            data.write_to_dir(&args.out)?;
            std::fs::write(args.out.join("truth.json"), truth.to_json()?)?;
        }
        Preset::Community => {
            let mut cfg = CommunityConfig {
                seed: args.seed,
                theta_scale: args.theta_scale,
                ..Default::default()
            };
            if let Some(d_z) = args.dz {
                cfg.d_z = d_z;
            }
            if let Some(n) = args.replicates {
                cfg.replicates = n;
            }
            if let Some(rate) = args.rate {
                cfg.poisson_rate = rate;
            }
            if let Some(dims) = &args.dims {
                cfg.dims = parse_list(dims, "dims")?;
            }
            let (data, truth) = simulate_community(&cfg)?;
            data.write_to_dir(&args.out)?;
            std::fs::write(args.out.join("truth.json"), truth.to_json()?)?;
        }
        Preset::Sweep => {
            let mut cfg = SweepConfig {
                seed: args.seed,
                theta_scale: args.theta_scale,
                ..Default::default()
            };
            if let Some(d_z) = args.dz {
                cfg.d_z = d_z;
            }
            if let Some(n) = args.replicates {
                cfg.replicates = n;
            }
            let rates: Vec<f64> = parse_list(
                args.rates.as_deref().unwrap_or("10,100,1000"),
                "rates",
            )?;
            let dims: Vec<usize> = parse_list(args.dims.as_deref().unwrap_or("128"), "dims")?;
            for point in simulate_sweep(&cfg, &rates, &dims)? {
                let sub = args.out.join(format!("rate{}_dim{}", point.rate, point.dim));
                ensure_dir(&sub)?;
                point.dataset.write_to_dir(&sub)?;
                std::fs::write(sub.join("truth.json"), point.truth.to_json()?)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> Result<SavedModel> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SavedModel::from_json(&text)?)
}

fn cmd_covnet(args: CovnetArgs, meta: &MetaLine) -> Result<ExitCode> {
    if args.model.is_empty() || args.model.len() > 2 {
        bail!("pass --model once or twice");
    }
    let scope_inter = match args.scope.as_str() {
        "intra" => false,
        "inter" => true,
        other => bail!("unknown scope '{other}' (expected intra or inter)"),
    };
    ensure_dir(&args.out)?;
    let models: Vec<SavedModel> = args
        .model
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<_>>()?;

    // networks[m] maps a block tag (per condition, per species or stacked)
    // to its thresholded network.
    let mut networks: Vec<Vec<(String, CorrelationNetwork)>> = Vec::new();
    for (mi, model) in models.iter().enumerate() {
        let mut blocks = Vec::new();
        for k in 0..model.params.conditions.len() {
            if scope_inter {
                let labels: Vec<String> = model
                    .meta
                    .species_labels
                    .iter()
                    .zip(&model.meta.feature_labels)
                    .flat_map(|(sp, feats)| feats.iter().map(move |f| format!("{sp}:{f}")))
                    .collect();
                let mg = inter_covariance(&model.params, k)?;
                let corr = to_correlation(&mg.covariance)?;
                let net = threshold_network(&corr, args.threshold, &labels, args.signed)?;
                let tag = format!("k{k}_inter");
                write_network(meta, &args.out, mi, &tag, &corr, &labels, &net)?;
                blocks.push((tag, net));
            } else {
                for l in 0..model.params.conditions[k].theta.len() {
                    let labels = model.meta.feature_labels[l].clone();
                    let mg = intra_covariance(&model.params, k, l)?;
                    let corr = to_correlation(&mg.covariance)?;
                    let net = threshold_network(&corr, args.threshold, &labels, args.signed)?;
                    let tag = format!("k{k}_l{l}");
                    write_network(meta, &args.out, mi, &tag, &corr, &labels, &net)?;
                    blocks.push((tag, net));
                }
            }
        }
        networks.push(blocks);
    }

    if networks.len() == 2 {
        let (a, b) = (&networks[0], &networks[1]);
        if a.len() != b.len() {
            bail!("models have different network structure");
        }
        for ((tag, net_a), (tag_b, net_b)) in a.iter().zip(b) {
            if tag != tag_b {
                bail!("models have mismatched blocks ({tag} vs {tag_b})");
            }
            let report = degree_difference(net_a, net_b)?;
            let mut body = Vec::new();
            report.write_csv(&mut body)?;
            meta.write_csv(
                &args.out.join(format!("degree_diff_{tag}.csv")),
                &String::from_utf8(body)?,
            )?;
            println!(
                "{tag}: {} vertices gained degree, {} lost, {} unchanged",
                report.increased, report.decreased, report.unchanged
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_network(
    meta: &MetaLine,
    out: &Path,
    model_index: usize,
    tag: &str,
    corr: &DMatrix<f64>,
    labels: &[String],
    net: &CorrelationNetwork,
) -> Result<()> {
    let mut corr_body = Vec::new();
    write_matrix_csv(&mut corr_body, labels, corr)?;
    meta.write_csv(
        &out.join(format!("corr_m{model_index}_{tag}.csv")),
        &String::from_utf8(corr_body)?,
    )?;

    let mut edges = Vec::new();
    net.write_edges_csv(&mut edges)?;
    meta.write_csv(
        &out.join(format!("edges_m{model_index}_{tag}.csv")),
        &String::from_utf8(edges)?,
    )?;

    let mut degrees = Vec::new();
    net.write_degrees_csv(&mut degrees)?;
    meta.write_csv(
        &out.join(format!("degree_m{model_index}_{tag}.csv")),
        &String::from_utf8(degrees)?,
    )?;
    Ok(())
}

fn cmd_compare(args: CompareArgs, meta: &MetaLine) -> Result<ExitCode> {
    if args.preset != "community" {
        bail!("compare supports only the community preset");
    }
    let methods: Vec<CovMethod> = args
        .methods
        .split(',')
        .map(|s| CovMethod::parse(s.trim()).map_err(Into::into))
        .collect::<Result<_>>()?;
    let mut cfg = CommunityConfig {
        seed: args.common.seed,
        ..Default::default()
    };
    if let Some(dims) = &args.dims {
        cfg.dims = parse_list(dims, "dims")?;
    }
    if let Some(n) = args.replicates {
        cfg.replicates = n;
    }
    if let Some(rate) = args.rate {
        cfg.poisson_rate = rate;
    }
    ensure_dir(&args.out)?;
    let report = compare_on_community(&cfg, args.seeds, &methods, args.rank, &args.common.options())?;
    let mut body = Vec::new();
    report.write_csv(&mut body)?;
    meta.write_csv(&args.out.join("compare.csv"), &String::from_utf8(body)?)?;
    for m in &report.methods {
        println!(
            "{}: covariance RMSE {:.4} +/- {:.4}",
            m.method.name(),
            m.covariance_mean(),
            m.covariance_std()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_embed(args: EmbedArgs, meta: &MetaLine) -> Result<ExitCode> {
    let model = load_model(&args.model)?;
    let data = load_dataset(&args.data)?;
    if model.meta.fingerprint != data.fingerprint() {
        bail!("model fingerprint does not match the dataset");
    }
    ensure_dir(&args.out)?;
    let posteriors = infer_posteriors(&model.params, &data, &args.common.options())?;
    for (k, samples) in posteriors.samples.iter().enumerate() {
        let d_z = model.params.d_z;
        let mut embeddings = DMatrix::zeros(samples.len(), d_z);
        for (i, post) in samples.iter().enumerate() {
            for j in 0..d_z {
                embeddings[(i, j)] = post.m[j];
            }
        }
        meta.write_csv(
            &args.out.join(format!("embeddings_k{k}.csv")),
            &embeddings_csv(&embeddings),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}
