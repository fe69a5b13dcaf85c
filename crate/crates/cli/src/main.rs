use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dslic_core::autodiff::toy_optimize_with;
use dslic_core::config::parse_size;
use dslic_core::pipeline::random_patch;
use dslic_core::sweep::{objectness_table, run_sweep, RESULTS_HEADER};
use dslic_core::{
    fixtures, grad_check, load_scenes, read_image, reconstruct, run_slic, train_patch, write_image, Error, Functional,
    Image, SceneSpec, SlicConfig, SweepSpec, TrainConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;
const EXIT_ALL_EXCLUDED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "dslic", version, about = "Differentiable SLIC superpixels and adversarial patch training")]
struct Cli {
    /// Seed for every random choice (probe picks, noise, patch init, EOT).
    #[arg(long, global = true, env = "DSLIC_SEED")]
    seed: Option<u64>,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Directory for outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Flat key=value training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cluster an image and write the clustered image, assignment and centroids.
    Cluster(ClusterArgs),
    /// Compare the analytic SLIC gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Optimize an image so that its clustering matches a target.
    Toy(ToyArgs),
    /// Train one adversarial patch.
    Train(TrainArgs),
    /// Train a grid of patches over K, omega, alpha and seed.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SlicArgs {
    /// Number of superpixels.
    #[arg(long)]
    k: usize,
    /// Spatial weight.
    #[arg(long, default_value_t = 0.1)]
    omega: f64,
    #[arg(long, default_value_t = 10)]
    max_iters: usize,
    /// Merge disconnected cluster fragments after convergence.
    #[arg(long)]
    connectivity: bool,
}

impl SlicArgs {
    fn config(&self, seed: u64) -> SlicConfig {
        SlicConfig {
            max_iters: self.max_iters,
            seed,
            enforce_connectivity: self.connectivity,
            ..SlicConfig::new(self.k, self.omega)
        }
    }
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    slic: SlicArgs,
    /// Clustered image path (PNG if it ends in .png, PPM otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    input: Option<PathBuf>,
    /// Use seeded uniform noise of this size, e.g. 16x16.
    #[arg(long)]
    random: Option<String>,
    #[command(flatten)]
    slic: SlicArgs,
    #[arg(long, default_value_t = 64)]
    probes: usize,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Pass when the largest relative error is at most this.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Target for the pixel MSE functional; seeded noise when omitted.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Check the plain sum of the clustered image instead of the MSE.
    #[arg(long)]
    sum: bool,
}

#[derive(Args, Debug)]
struct ToyArgs {
    /// Starting image; seeded noise when omitted.
    #[arg(long)]
    start: Option<PathBuf>,
    /// Target image; the built-in still life clustered with --k when omitted.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Size of the built-in target.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 200)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    omega: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Step size in units of N/2, so 1.0 moves each cluster mean onto its
    /// target mean in one step.
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    /// Number of evenly spaced clustered frames to write under frames/.
    #[arg(long, default_value_t = 0)]
    frames: usize,
    /// Write original, target, trained and clustered images.
    #[arg(long)]
    panels: bool,
}

#[derive(Args, Debug)]
struct TrainOverrides {
    /// Directory holding scenes.csv; the built-in desk scenes when omitted.
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Patch size, e.g. 64x64.
    #[arg(long)]
    patch_size: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainOverrides,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: TrainOverrides,
    /// K values as a list (500,600) or an inclusive range (500:4000:100).
    #[arg(long, default_value = "500:4000:100")]
    k_values: String,
    #[arg(long, default_value = "0.1,1,10")]
    omegas: String,
    #[arg(long, default_value = "0,2.5")]
    alphas: String,
    /// Seeds to run; defaults to the global seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Write 0 in the wall_s column so reruns produce identical bytes.
    #[arg(long)]
    no_wall_clock: bool,
}

enum Failure {
    Usage(String),
    Core(Error),
    CheckFailed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::CheckFailed(_) => EXIT_CHECK_FAILED,
            Failure::Core(e) => match e {
                Error::AllProbesExcluded(_) => EXIT_ALL_EXCLUDED,
                Error::Io { .. }
                | Error::MalformedHeader(_)
                | Error::UnsupportedFormat(_)
                | Error::InvalidImage(_)
                | Error::Parse { .. }
                | Error::BadCheckpoint(_)
                | Error::PatchOutsideScene => EXIT_IO,
                _ => EXIT_USAGE,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::CheckFailed(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::Io {
        path: cli.out_dir.clone(),
        source: e,
    })?;
    match &cli.command {
        Command::Cluster(a) => cluster(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::Toy(a) => toy(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Sweep(a) => sweep(cli, a),
    }
}

fn seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

fn size_arg(v: &str) -> Result<(usize, usize), Failure> {
    match parse_size(v) {
        Some((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Failure::Usage(format!("expected a size like 16x16, got {v:?}"))),
    }
}

fn noise_image(h: usize, w: usize, seed: u64) -> Image {
    random_patch(h, w, seed)
}

fn cluster(cli: &Cli, a: &ClusterArgs) -> CmdResult {
    let img = read_image(&a.input)?;
    let state = run_slic(&img, &a.slic.config(seed(cli)))?;
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("clustered.png"));
    write_image(&reconstruct(&img, &state)?, &out)?;
    state.write_assignment_csv(cli.out_dir.join("assignment.csv"))?;
    state.write_centroids_csv(cli.out_dir.join("centroids.csv"))?;
    println!("objective={}", state.objective());
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> CmdResult {
    let seed = seed(cli);
    let img = match (&a.input, &a.random) {
        (Some(p), _) => read_image(p)?,
        (None, Some(s)) => {
            let (h, w) = size_arg(s)?;
            noise_image(h, w, seed)
        }
        (None, None) => return Err(Failure::Usage("one of --input or --random is required".into())),
    };
    let functional = if a.sum {
        Functional::Sum
    } else {
        let target = match &a.target {
            Some(p) => read_image(p)?,
            None => noise_image(img.height(), img.width(), seed.wrapping_add(1)),
        };
        Functional::PixelMse(target)
    };
    let report = grad_check(&img, &a.slic.config(seed), a.probes, a.eps, &functional)?;
    report.write_csv(cli.out_dir.join("gradcheck.csv"))?;
    println!("{}", report.summary());
    if report.max_rel_err <= a.tol {
        Ok(())
    } else {
        Err(Failure::CheckFailed(format!(
            "max_rel_err {:e} exceeds tolerance {:e}",
            report.max_rel_err, a.tol
        )))
    }
}

fn toy(cli: &Cli, a: &ToyArgs) -> CmdResult {
    let seed = seed(cli);
    let cfg = SlicConfig { seed, ..SlicConfig::new(a.k, a.omega) };
    let target = match &a.target {
        Some(p) => read_image(p)?,
        None => {
            let (h, w) = size_arg(&a.size)?;
            let photo = fixtures::toy_photo(h, w);
            reconstruct(&photo, &run_slic(&photo, &cfg)?)?
        }
    };
    let start = match &a.start {
        Some(p) => read_image(p)?,
        None => noise_image(target.height(), target.width(), seed),
    };
    if a.steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    if a.frames > a.steps {
        return Err(Failure::Usage(format!("--frames {} exceeds --steps {}", a.frames, a.steps)));
    }
    let frame_dir = cli.out_dir.join("frames");
    if a.frames > 0 {
        std::fs::create_dir_all(&frame_dir).map_err(|e| Error::Io {
            path: frame_dir.clone(),
            source: e,
        })?;
    }
    // frame i is taken after step (i+1)·steps/frames
    let checkpoints: Vec<usize> = (1..=a.frames).map(|i| i * a.steps / a.frames).collect();
    let lr = a.lr * start.pixel_count() as f64 / 2.0;
    let run = toy_optimize_with(&start, &target, &cfg, a.steps, lr, |step, _, clustered| {
        if checkpoints.contains(&step) {
            write_image(clustered, frame_dir.join(format!("step_{step:05}.ppm")))?;
        }
        Ok(())
    })?;

    let mut csv = String::from("step,loss\n");
    for (i, l) in run.trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&cli.out_dir.join("toy_trace.csv"), &csv)?;
    if a.panels {
        write_image(&start, cli.out_dir.join("original.png"))?;
        write_image(&target, cli.out_dir.join("target.png"))?;
        write_image(&run.image, cli.out_dir.join("trained.png"))?;
        write_image(&run.clustered, cli.out_dir.join("clustered.png"))?;
    }
    let (first, last) = (run.trace[0], *run.trace.last().unwrap());
    let ratio = if first > 0.0 { last / first } else { 0.0 };
    println!("steps={} initial_loss={first} final_loss={last} ratio={ratio}", a.steps);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn base_config(cli: &Cli, o: &TrainOverrides) -> Result<TrainConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = o.k {
        cfg.slic.k = k;
    }
    if let Some(w) = o.omega {
        cfg.slic.omega = w;
    }
    if let Some(a) = o.alpha {
        cfg.alpha = a;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.lr = lr;
    }
    if let Some(s) = &o.patch_size {
        (cfg.patch_height, cfg.patch_width) = size_arg(s)?;
    }
    Ok(cfg)
}

fn scenes(o: &TrainOverrides) -> Result<Vec<SceneSpec>, Failure> {
    Ok(match &o.scenes {
        Some(dir) => load_scenes(dir)?,
        None => fixtures::desk_scenes(),
    })
}

fn train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let cfg = base_config(cli, &a.common)?;
    cfg.validate()?;
    let scenes = scenes(&a.common)?;
    let report = train_patch(&scenes, &cfg)?;
    let out = &cli.out_dir;
    write_image(&report.clustered_patch, out.join("patch.png"))?;
    write_image(&report.raw_patch, out.join("raw_patch.ppm"))?;
    report.optimizer.save(out.join("optimizer.bin"))?;
    write_text(&out.join("trace.csv"), &report.trace_csv())?;
    write_text(&out.join("train_config.txt"), &cfg.to_flat_text())?;
    let last = report.last();
    println!(
        "epochs={} loss={} l_obj={} l_tv={} lr={} initial_obj={} final_obj={}",
        report.epochs.len(),
        last.loss,
        last.l_obj,
        last.l_tv,
        last.lr,
        report.initial_obj,
        report.final_obj
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(flag: &str, v: &str) -> Result<Vec<T>, Failure> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| Failure::Usage(format!("bad value {s:?} in --{flag}"))))
        .collect()
}

fn parse_k_values(v: &str) -> Result<Vec<usize>, Failure> {
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        [lo, hi, step] => {
            let [lo, hi, step] = [lo, hi, step].map(|s| s.trim().parse::<usize>());
            match (lo, hi, step) {
                (Ok(lo), Ok(hi), Ok(step)) if step > 0 && lo <= hi => Ok((lo..=hi).step_by(step).collect()),
                _ => Err(Failure::Usage(format!("bad range {v:?} in --k-values, expected lo:hi:step"))),
            }
        }
        [_] => parse_list("k-values", v),
        _ => Err(Failure::Usage(format!("bad --k-values {v:?}"))),
    }
}

fn sweep(cli: &Cli, a: &SweepArgs) -> CmdResult {
    let base = base_config(cli, &a.common)?;
    let spec = SweepSpec {
        k_values: parse_k_values(&a.k_values)?,
        omega_values: parse_list("omegas", &a.omegas)?,
        alpha_values: parse_list("alphas", &a.alphas)?,
        seeds: match &a.seeds {
            Some(s) => parse_list("seeds", s)?,
            None => vec![base.seed],
        },
        base,
    };
    spec.validate()?;
    let scenes = scenes(&a.common)?;

    let path = cli.out_dir.join("results.csv");
    let io = |e: std::io::Error| Error::Io {
        path: path.clone(),
        source: e,
    };
    let mut out = BufWriter::new(File::create(&path).map_err(io)?);
    writeln!(out, "{RESULTS_HEADER}").map_err(io)?;
    out.flush().map_err(io)?;
    let chunk = cli.jobs.unwrap_or_else(rayon::current_num_threads);
    let mut rows = run_sweep(&spec, &scenes, chunk, |row| {
        let mut row = row.clone();
        if a.no_wall_clock {
            row.wall_s = 0.0;
        }
        writeln!(out, "{}", row.csv_line()).map_err(io)?;
        out.flush().map_err(io)?;
        Ok(())
    })?;
    if a.no_wall_clock {
        rows.iter_mut().for_each(|r| r.wall_s = 0.0);
    }
    write_text(&cli.out_dir.join("objectness_vs_k.csv"), &objectness_table(&rows))?;
    println!("rows={} results={}", rows.len(), path.display());
    Ok(())
}
