use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cisod_core::bench::{self, EvalOptions, Tolerance};
use cisod_core::codec::{self, CodecBackend, CodecConfig, QpLevel};
use cisod_core::dataset::{self, Normalization};
use cisod_core::imageio;
use cisod_core::net::{shape_contract, NetworkConfig, SodNet};
use cisod_core::train::{self, Phase, TrainConfig};

const TOY_PRIOR: &str = include_str!("../../../configs/toy_prior.toml");
const TOY_TARGET: &str = include_str!("../../../configs/toy_target.toml");
const TOY_ABLATION: &str = include_str!("../../../configs/toy_target_ablation.toml");

#[derive(Parser)]
#[command(name = "cisod", version, about = "Salient object detection on compressed images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Block-transform codec.
    #[command(subcommand)]
    Codec(CodecCmd),
    /// Compressed benchmark construction.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Network inspection.
    #[command(subcommand)]
    Net(NetCmd),
    /// Two-phase training.
    Train {
        #[arg(value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        config: PathBuf,
        /// Overrides `max_steps` from the config.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluation, plots and report comparison.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Desk-scale end-to-end run on a synthetic corpus.
    Toy(ToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Prior,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Internal,
    External,
}

#[derive(Args)]
struct CodecArgs {
    #[arg(long, value_enum, default_value = "internal")]
    backend: BackendArg,
    /// Shell template for the external backend with `{input}`, `{output}`
    /// and `{qp}` placeholders.
    #[arg(long)]
    command: Option<String>,
}

impl CodecArgs {
    fn config(&self) -> Result<CodecConfig> {
        let backend = match self.backend {
            BackendArg::Internal => CodecBackend::InternalBlockCodec,
            BackendArg::External => CodecBackend::ExternalHevcAdapter {
                command: self.command.clone().context("--backend external needs --command")?,
            },
        };
        Ok(CodecConfig {
            backend,
            ..CodecConfig::default()
        })
    }
}

#[derive(Subcommand)]
enum CodecCmd {
    /// Compresses one image or every image of a directory.
    Compress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        qp: u8,
        #[command(flatten)]
        codec: CodecArgs,
    },
    /// PSNR between two RGB images.
    Psnr { a: PathBuf, b: PathBuf },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Renders a synthetic corpus (`clean/` and `gt/`).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Training benchmark: one random level per image.
    BuildTrain {
        #[command(flatten)]
        build: BuildArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Test benchmark: every image at every level.
    BuildTest {
        #[command(flatten)]
        build: BuildArgs,
    },
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    /// Benchmarks are written to `<out>/<name>/<qp>/<id>.png`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    name: String,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Subcommand)]
enum NetCmd {
    /// Parameter count and feature shapes for a square input.
    Summary {
        /// Network or training config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Scores a checkpoint on one or more benchmarks.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        benchmarks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        image_size: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Skip scoring the clean originals.
        #[arg(long)]
        no_clean: bool,
        /// Also write `robustness.png` next to the report.
        #[arg(long)]
        plot: bool,
    },
    /// Robustness curves of a report directory.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deltas of reports against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.005)]
        tol_s: f64,
        #[arg(long, default_value_t = 0.005)]
        tol_f: f64,
        #[arg(long, default_value_t = 0.005)]
        tol_mae: f64,
        /// Exit with status 2 when a regression is flagged.
        #[arg(long)]
        fail_on_regression: bool,
    },
    /// Node-assignment maps of the graph reasoning block as PNGs.
    DumpGraphs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    train_images: usize,
    #[arg(long, default_value_t = 10)]
    test_images: usize,
    #[arg(long, default_value_t = 300)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also train the target without prior losses and self-masking and
    /// compare both reports.
    #[arg(long)]
    ablation: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Codec(cmd) => codec_cmd(cmd),
        Command::Dataset(cmd) => dataset_cmd(cmd),
        Command::Net(NetCmd::Summary { config, size }) => net_summary(config.as_deref(), size),
        Command::Train {
            phase,
            config,
            max_steps,
            output_dir,
        } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            let wanted = match phase {
                PhaseArg::Prior => Phase::Prior,
                PhaseArg::Target => Phase::Target,
            };
            if cfg.phase != wanted {
                bail!("{} is a {:?}-phase config", config.display(), cfg.phase);
            }
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            cfg.validate()?;
            let outcome = train::run(&cfg)?;
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            if let Some(best) = outcome.best_checkpoint {
                println!("best checkpoint:  {}", best.display());
            }
            println!("scalar log:       {}", cfg.output_dir.join(train::LOG_FILE).display());
            Ok(())
        }
        Command::Bench(cmd) => bench_cmd(cmd),
        Command::Toy(args) => toy(&args),
    }
}

fn codec_cmd(cmd: CodecCmd) -> Result<()> {
    match cmd {
        CodecCmd::Compress {
            input,
            output,
            qp,
            codec: args,
        } => {
            let cfg = args.config()?;
            let qp = QpLevel::new(qp);
            cfg.check_qp(qp)?;
            if input.is_dir() {
                let written = codec::compress_dir(&input, &output, qp, &cfg)?;
                println!("{} images written to {}", written.len(), output.display());
            } else {
                let img = imageio::load_rgb(&input)?;
                let out = codec::compress(&img, qp, &cfg)?;
                imageio::save_rgb(&out, &output)?;
                println!("{} (PSNR {:.2} dB)", output.display(), codec::psnr(&img, &out)?);
            }
            Ok(())
        }
        CodecCmd::Psnr { a, b } => {
            println!("{:.4}", codec::psnr(&imageio::load_rgb(&a)?, &imageio::load_rgb(&b)?)?);
            Ok(())
        }
    }
}

fn dataset_cmd(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Synth { out, count, size, seed } => {
            let (clean, gt) = dataset::make_synthetic_corpus(count, size, seed, &out)?;
            println!("images: {}\nmasks:  {}", clean.display(), gt.display());
        }
        DatasetCmd::BuildTrain { build, seed } => {
            let m = dataset::build_train_benchmark(
                &build.images,
                &build.masks,
                &build.out,
                &build.name,
                &build.codec.config()?,
                seed,
            )?;
            println!("{} entries in {}", m.entries.len(), m.root.display());
        }
        DatasetCmd::BuildTest { build } => {
            let m = dataset::build_test_benchmark(
                &build.images,
                &build.masks,
                &build.out,
                &build.name,
                &build.codec.config()?,
            )?;
            println!("{} entries in {}", m.entries.len(), m.root.display());
        }
    }
    Ok(())
}

/// Reads a network config from either a training config (its `[network]`
/// table) or a bare network config.
fn network_config(path: &Path) -> Result<NetworkConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let table = match value.get("network") {
        Some(toml::Value::Table(t)) => t.clone(),
        _ => value,
    };
    let cfg: NetworkConfig = table.try_into().with_context(|| format!("network config in {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn net_summary(config: Option<&Path>, size: usize) -> Result<()> {
    let mut cfg = config.map(network_config).transpose()?.unwrap_or_default();
    cfg.pretrained_weights_path = None;
    let net = SodNet::new(&cfg)?;
    println!("backbone   {:?}", cfg.backbone);
    println!("parameters {}", net.store.num_parameters());
    println!("input      3x{size}x{size}");
    for (name, shape) in shape_contract(&cfg, size)? {
        let dims: Vec<String> = shape.iter().map(ToString::to_string).collect();
        println!("{name:<10} {}", dims.join("x"));
    }
    Ok(())
}

fn bench_cmd(cmd: BenchCmd) -> Result<()> {
    match cmd {
        BenchCmd::Eval {
            ckpt,
            benchmarks,
            out,
            image_size,
            batch_size,
            no_clean,
            plot,
        } => {
            let opts = EvalOptions {
                image_size,
                batch_size,
                normalization: Normalization::default(),
                include_clean: !no_clean,
            };
            let report = bench::evaluate(&ckpt, &benchmarks, &opts)?;
            bench::write_report(&report, &out)?;
            print!("{}", bench::format_table(&report.aggregate));
            if !report.meta.complete {
                eprintln!("report INCOMPLETE: {} entries missing", report.meta.missing.len());
            }
            if plot {
                bench::emit_robustness_plot(&report.aggregate, &out.join("robustness.png"))?;
            }
            println!("report written to {}", out.display());
        }
        BenchCmd::Plot { report, out } => {
            let r = bench::read_report(&report)?;
            let path = out.unwrap_or_else(|| report.join("robustness.png"));
            bench::emit_robustness_plot(&r.aggregate, &path)?;
            println!("{}", path.display());
        }
        BenchCmd::Compare {
            reports,
            tol_s,
            tol_f,
            tol_mae,
            fail_on_regression,
        } => {
            let loaded = reports.iter().map(|r| bench::read_report(r)).collect::<Result<Vec<_>, _>>()?;
            let tol = Tolerance {
                s_m: tol_s,
                f_max: tol_f,
                mae: tol_mae,
            };
            let cmp = bench::compare(&loaded, &tol)?;
            print!("{}", cmp.format());
            let flagged = cmp.regressions().count();
            println!("{flagged} regression(s) beyond tolerance");
            if fail_on_regression && flagged > 0 {
                std::process::exit(2);
            }
        }
        BenchCmd::DumpGraphs { ckpt, images, out, size } => {
            let files = bench::dump_graphs(&ckpt, &images, size, &out)?;
            println!("{} maps written to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn toy_config(template: &str, manifest: &Path, out: &Path, steps: u64, seed: u64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_toml_str(template)?;
    cfg.manifest = manifest.to_path_buf();
    cfg.output_dir = out.to_path_buf();
    cfg.max_steps = Some(steps);
    cfg.seed = seed;
    cfg.network.seed = seed;
    Ok(cfg)
}

fn split_corpus(clean: &Path, gt: &Path, n_train: usize, root: &Path) -> Result<[(PathBuf, PathBuf); 2]> {
    let images = imageio::list_images(clean)?;
    let dirs = [root.join("train"), root.join("test")];
    for d in &dirs {
        std::fs::create_dir_all(d.join("images"))?;
        std::fs::create_dir_all(d.join("masks"))?;
    }
    for (i, img) in images.iter().enumerate() {
        let name = img.file_name().context("image without file name")?;
        let d = &dirs[usize::from(i >= n_train)];
        std::fs::copy(img, d.join("images").join(name))?;
        std::fs::copy(gt.join(name), d.join("masks").join(name))?;
    }
    Ok(dirs.map(|d| (d.join("images"), d.join("masks"))))
}

fn toy(args: &ToyArgs) -> Result<()> {
    let out = &args.out;
    let (clean, gt) = dataset::make_synthetic_corpus(
        args.train_images + args.test_images,
        64,
        args.seed,
        &out.join("corpus"),
    )?;
    let [(train_img, train_gt), (test_img, test_gt)] = split_corpus(&clean, &gt, args.train_images, &out.join("split"))?;
    let bench_root = out.join("bench");
    let codec = CodecConfig::default();
    dataset::build_train_benchmark(&train_img, &train_gt, &bench_root, "toy-tr", &codec, args.seed)?;
    dataset::build_test_benchmark(&test_img, &test_gt, &bench_root, "toy-te", &codec)?;
    let train_manifest = bench_root.join("toy-tr");
    let runs = out.join("runs");

    let prior_cfg = toy_config(TOY_PRIOR, &train_manifest, &runs.join("prior"), args.steps, args.seed)?;
    let prior = train::run(&prior_cfg)?;
    let mut variants = vec![("full", TOY_TARGET)];
    if args.ablation {
        variants.push(("ablation", TOY_ABLATION));
    }
    let opts = EvalOptions {
        image_size: 64,
        batch_size: 10,
        normalization: Normalization::default(),
        include_clean: true,
    };
    let mut report_dirs = Vec::new();
    for (name, template) in variants {
        let mut cfg = toy_config(template, &train_manifest, &runs.join(name), args.steps, args.seed)?;
        cfg.prior_checkpoint = Some(prior.final_checkpoint.clone());
        let outcome = train::run(&cfg)?;
        let report = bench::evaluate(&outcome.final_checkpoint, &[bench_root.join("toy-te")], &opts)?;
        let dir = out.join("reports").join(name);
        bench::write_report(&report, &dir)?;
        bench::emit_robustness_plot(&report.aggregate, &dir.join("robustness.png"))?;
        println!("== {name} ==\n{}", bench::format_table(&report.aggregate));
        report_dirs.push(dir);
    }
    if report_dirs.len() > 1 {
        let loaded = report_dirs.iter().map(|d| bench::read_report(d)).collect::<Result<Vec<_>, _>>()?;
        print!("{}", bench::compare(&loaded, &Tolerance::default())?.format());
    }
    println!("outputs in {}", out.display());
    Ok(())
}
