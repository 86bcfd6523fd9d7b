//! `pcdnf`: dataset generation, training, denoising, evaluation and error
//! maps from the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pcdnf::config::RunConfig;
use pcdnf::dataset::{load_corpus, read_point_cloud, write_corpus, write_xyz, ShapeKind, DEFAULT_NOISE_LEVELS};
use pcdnf::inference::denoise_cloud;
use pcdnf::metrics::{
    angular_errors, chamfer_distance, export_error_map, normal_rmse, point_to_surface, MetricsReport, MetricsRow,
    SurfaceReference, DEFAULT_ERROR_CAP_DEG,
};
use pcdnf::network::NetworkParams;
use pcdnf::training::train_from;
use pcdnf::PointCloud;

#[derive(Parser)]
#[command(name = "pcdnf", version, about = "Joint point cloud denoising and normal filtering")]
struct Cli {
    /// Global seed (default 0, or the config file's seed for `train`).
    #[arg(long, global = true, env = "PCDNF_SEED")]
    seed: Option<u64>,
    /// Worker threads for patch evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

impl Cli {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample clean shapes, add noise, write `.xyz` files and a manifest.
    GenData(GenData),
    /// Train a network on a generated corpus.
    Train(Train),
    /// Denoise a cloud; writes iter1.xyz, iter2.xyz, ...
    Denoise(Denoise),
    /// Compare predictions with a clean cloud and write a metrics CSV.
    Eval(Eval),
    /// Write per-point normal errors as a colored `.xyz`.
    Errormap(Errormap),
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_delimiter = ',', default_values_t = ShapeKind::ALL.map(|k| k.to_string()))]
    shapes: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    n_points: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_NOISE_LEVELS)]
    noise_levels: Vec<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Train {
    /// Corpus directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Extra `key=value` overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training history CSV (default: next to the checkpoint).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct Denoise {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    iterations: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    /// One or more predictions; the i-th is reported as iteration i.
    #[arg(long, num_args = 1.., required = true)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Generator shape for closed-form P2S; otherwise the clean cloud is the reference.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    noise_level: Option<f64>,
}

#[derive(Args)]
struct Errormap {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Error mapped to pure red, degrees.
    #[arg(long, default_value_t = DEFAULT_ERROR_CAP_DEG)]
    cap: f64,
}

fn comment_block(pairs: &[(String, String)]) -> String {
    pairs.iter().fold(String::new(), |mut s, (k, v)| {
        writeln!(s, "# {k} = {v}").expect("string write");
        s
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(cli: &Cli, args: &GenData) -> Result<()> {
    let shapes = args
        .shapes
        .iter()
        .map(|s| s.parse::<ShapeKind>())
        .collect::<pcdnf::Result<Vec<_>>>()?;
    let manifest = write_corpus(&args.out_dir, &shapes, args.n_points, &args.noise_levels, cli.seed())?;
    println!(
        "wrote {} noisy and {} clean clouds to {}",
        manifest.entries.len(),
        shapes.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn train(cli: &Cli, args: &Train) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
        cfg.set(k, v)?;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let (_, corpus) = load_corpus(&args.data)?;
    let samples: Vec<_> = corpus.into_iter().map(|(_, s)| s).collect();

    let ckpt = &args.out_checkpoint;
    let params = NetworkParams::init(&cfg.net, cfg.net.init_seed);
    let every = cfg.train.checkpoint_every;
    let (params, history) = train_from(params, &samples, &cfg.train, &cfg.net, &cfg.loss, |rec, p| {
        eprintln!("epoch {} lr {:e} loss {:.6}", rec.epoch, rec.lr, rec.terms.loss);
        if every > 0 && (rec.epoch + 1) % every == 0 {
            p.save(ckpt.with_extension(format!("epoch{}.json", rec.epoch + 1)), &cfg.net)?;
        }
        Ok(())
    })?;
    params.save(ckpt, &cfg.net)?;
    let history_path = args.history.clone().unwrap_or_else(|| ckpt.with_extension("history.csv"));
    write_text(&history_path, &(comment_block(&cfg.pairs()) + &history.to_csv()))?;
    println!("saved {}", ckpt.display());
    Ok(())
}

fn denoise(cli: &Cli, args: &Denoise) -> Result<()> {
    let cloud = read_point_cloud(&args.input)?;
    let (params, net) = NetworkParams::load(&args.checkpoint)?;
    let outputs = denoise_cloud(&cloud, &params, &net, args.iterations, cli.seed())?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (i, c) in outputs.iter().enumerate() {
        write_xyz(args.out.join(format!("iter{}.xyz", i + 1)), c)?;
    }
    let run = RunConfig {
        net,
        ..RunConfig::default()
    };
    let mut pairs = vec![
        ("input".to_string(), args.input.display().to_string()),
        ("checkpoint".to_string(), args.checkpoint.display().to_string()),
        ("iterations".to_string(), args.iterations.to_string()),
    ];
    // Network keys only; training keys do not apply here.
    pairs.extend(run.pairs().into_iter().take(8));
    pairs.push(("seed".into(), cli.seed().to_string()));
    write_text(&args.out.join("denoise.txt"), &comment_block(&pairs))?;
    println!("wrote {} iterations to {}", outputs.len(), args.out.display());
    Ok(())
}

fn eval(cli: &Cli, args: &Eval) -> Result<()> {
    let clean = read_point_cloud(&args.clean)?;
    let shape = args.shape.as_deref().map(str::parse::<ShapeKind>).transpose()?;
    let mut report = MetricsReport {
        config: vec![
            ("clean".into(), args.clean.display().to_string()),
            (
                "p2s_reference".into(),
                shape.map_or("clean cloud".to_string(), |k| format!("analytic {k}")),
            ),
            ("seed".into(), cli.seed().to_string()),
        ],
        rows: Vec::new(),
    };
    for (i, path) in args.pred.iter().enumerate() {
        let pred = read_point_cloud(path)?;
        report.config.push((format!("pred{}", i + 1), path.display().to_string()));
        let p2s = match shape {
            Some(k) => point_to_surface(&pred, SurfaceReference::Analytic(k))?,
            None => point_to_surface(&pred, SurfaceReference::Cloud(&clean))?,
        };
        let rmse = match (pred.normals(), clean.normals()) {
            (Some(a), Some(b)) => normal_rmse(a, b)?,
            _ => f64::NAN,
        };
        report.rows.push(MetricsRow {
            shape: shape.map_or("unknown".to_string(), |k| k.to_string()),
            noise_level: args.noise_level.unwrap_or(f64::NAN),
            iteration: i + 1,
            cd: chamfer_distance(&pred, &clean)?,
            p2s,
            rmse_deg: rmse,
        });
    }
    report.write_csv(&args.report)?;
    println!("wrote {}", args.report.display());
    Ok(())
}

fn errormap(_cli: &Cli, args: &Errormap) -> Result<()> {
    let pred = read_point_cloud(&args.pred)?;
    let clean = read_point_cloud(&args.clean)?;
    let (Some(a), Some(b)) = (pred.normals(), clean.normals()) else {
        bail!("both clouds need normals for an error map");
    };
    let errors = angular_errors(a, b)?;
    let colored = PointCloud::new(pred.points().to_vec())?;
    export_error_map(&colored, &errors, args.cap, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Denoise(a) => denoise(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Errormap(a) => errormap(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
