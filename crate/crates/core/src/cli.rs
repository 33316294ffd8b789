//! Command-line driver. Every pipeline stage is a subcommand that reads and
//! writes the formats in [`crate::ioformats`].
//!
//! Options may also come from a `key = value` file given with `--config`
//! before the subcommand. Keys are the long option names of the subcommand;
//! `#` starts a comment. Later keys override earlier ones and command-line
//! options override the file.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::edge::{canny, label_to_boundary, CannyConfig};
use crate::error::Error;
use crate::eval::{boundary_f1, format_number, miou};
use crate::gradcheck::{run_suite, SuiteConfig};
use crate::image::{ColorImage, GrayImage};
use crate::ioformats::{
    params_from_container, params_to_container, read_label_pgm, read_ppm, read_tensors, render_heatmap,
    write_atomic, write_label_pgm, write_pgm, write_ppm, write_tensors, StoredTensor, TensorContainer,
};
use crate::loss::{boundary_bce, smoothness_terms, GuideMode, ImageTags, LossConfig};
use crate::refine::{
    build_color_affinity, cam_to_pseudo_label, random_walk_refine, random_walk_transport, refine_cam_by_smoothness,
    RefineConfig, RefineMethod,
};
use crate::sbdm::{mean_boundary_loss, sbdm_forward, SbdmArch, SbdmSample, SbdmTrainer, TrainConfig};
use crate::synth::{degrade_to_cam, generate_scene, scene_sbdm_sample, DegradeSpec, SceneSpec, DEFAULT_PALETTE};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "sbseg", version, about = "Boundary-aware CAM refinement pipeline")]
pub struct Cli {
    /// key = value option file applied before the command-line options.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for commands that process several images.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[command(args_override_self = true)]
pub enum Command {
    /// Generate synthetic scenes: image.ppm, gray.pgm, labels.pgm,
    /// cam.smt (degraded CAM + tags) and features.smt per scene directory.
    Synth(SynthArgs),
    /// Canny edge map of a PGM/PPM image, stored as entry "edges".
    Canny(CannyArgs),
    /// Per-class semantic boundaries of a label map, stored as entry "boundary".
    Boundary(BoundaryArgs),
    /// Train the boundary module on synthetic scene directories.
    SbdmTrain(SbdmTrainArgs),
    /// Predict boundaries with a trained checkpoint.
    SbdmInfer(SbdmInferArgs),
    /// Print the loss terms as CSV: ls1,ls2,ls,lb,total.
    LossEval(LossEvalArgs),
    /// Smoothness refinement of a CAM guided by a boundary map.
    Refine(RefineArgs),
    /// Random-walk diffusion of a CAM over color affinities.
    RandomWalk(RandomWalkArgs),
    /// Argmax pseudo-labels of a CAM as a label PGM.
    PseudoLabel(PseudoLabelArgs),
    /// Segmentation metrics as CSV: per-class rows and a final mIoU row.
    Evaluate(EvaluateArgs),
    /// Render one channel of a stored tensor as a blue-to-red PPM.
    Heatmap(HeatmapArgs),
    /// Finite-difference check of every analytic gradient. Prints
    /// loss,components,within_rel_tol,failures,max_rel_error,max_abs_error_outside,passed.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    /// Output root; scene i goes to <out>/scene_<i>.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    /// Classes including background (at most 6).
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 4.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.35)]
    pub keep_fraction: f64,
    #[arg(long, default_value_t = 2.0)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub spurious_rate: f64,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct CannyOpts {
    #[arg(long, default_value_t = 1.4)]
    pub canny_sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub canny_low: f64,
    #[arg(long, default_value_t = 0.3)]
    pub canny_high: f64,
}

impl CannyOpts {
    fn config(&self) -> Result<CannyConfig, CliError> {
        let c = CannyConfig {
            gaussian_sigma: self.canny_sigma,
            low_threshold: self.canny_low,
            high_threshold: self.canny_high,
        };
        c.validate().map_err(CliError::usage)?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct CannyArgs {
    /// P5 or P6 image; color is converted to luma.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the edge map as a 0/255 PGM.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    #[command(flatten)]
    pub canny: CannyOpts,
}

#[derive(Args, Debug)]
pub struct BoundaryArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub thickness: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SbdmTrainArgs {
    #[arg(long)]
    pub seed: u64,
    /// Directory whose scene subdirectories (from `synth`) form the training set.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    pub l_init: f64,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Comma-separated feature levels to use, finest is 0.
    #[arg(long, default_value = "0,1,2,3", value_delimiter = ',')]
    pub levels: Vec<usize>,
    /// Replace the Canny map by zeros.
    #[arg(long)]
    pub no_canny: bool,
    #[arg(long, default_value_t = 0.05)]
    pub lambda1: f64,
    #[command(flatten)]
    pub canny: CannyOpts,
}

#[derive(Args, Debug)]
pub struct SbdmInferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature pyramid container with entries level0, level1, ...
    #[arg(long)]
    pub features: PathBuf,
    /// Image the Canny map is computed from.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub canny: CannyOpts,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct LossOpts {
    #[arg(long, default_value_t = 10.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_s: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub psi_eps: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub bce_clamp: f64,
    /// Divide smoothness terms by the pixel count.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_enum, default_value_t = GuideArg::Gradient)]
    pub guide_mode: GuideArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum GuideArg {
    Gradient,
    Direct,
}

impl LossOpts {
    fn config(&self) -> Result<LossConfig, CliError> {
        let c = LossConfig {
            alpha: self.alpha,
            lambda_s: self.lambda_s,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            psi_eps: self.psi_eps,
            bce_clamp: self.bce_clamp,
            normalize: self.normalize,
            guide_mode: match self.guide_mode {
                GuideArg::Gradient => GuideMode::Gradient,
                GuideArg::Direct => GuideMode::Direct,
            },
        };
        c.validate().map_err(CliError::usage)?;
        Ok(c)
    }
}

#[derive(Args, Debug, Clone)]
pub struct TagOpts {
    /// Foreground classes present, e.g. "1,3"; defaults to the "tags" entry
    /// of the CAM container.
    #[arg(long, value_delimiter = ',')]
    pub tags: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct LossEvalArgs {
    #[arg(long)]
    pub cam: PathBuf,
    /// Predicted boundary B; also the guide of the smoothness terms.
    #[arg(long)]
    pub boundary: PathBuf,
    /// Target boundary S.
    #[arg(long)]
    pub target: PathBuf,
    /// Externally computed base loss added to the total.
    #[arg(long, default_value_t = 0.0)]
    pub base_loss: f64,
    #[command(flatten)]
    pub tags: TagOpts,
    #[command(flatten)]
    pub loss: LossOpts,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum MethodArg {
    PrimalDual,
    GradientDescent,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub cam: PathBuf,
    #[arg(long)]
    pub guide: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1.0)]
    pub fidelity_mu: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::PrimalDual)]
    pub method: MethodArg,
    #[command(flatten)]
    pub tags: TagOpts,
    #[command(flatten)]
    pub loss: LossOpts,
}

#[derive(Args, Debug)]
pub struct RandomWalkArgs {
    #[arg(long)]
    pub cam: PathBuf,
    /// Color image the affinities are computed from.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 16)]
    pub iters: usize,
    #[arg(long, default_value_t = 4)]
    pub radius: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Push mass with the transposed transition instead of pulling.
    #[arg(long)]
    pub transport: bool,
}

#[derive(Args, Debug)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub cam: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub bg_threshold: f64,
    #[command(flatten)]
    pub tags: TagOpts,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predicted label PGM; repeat together with --truth for several images.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub truth: Vec<PathBuf>,
    #[arg(long)]
    pub classes: usize,
    /// Also score label boundaries with this pixel tolerance.
    #[arg(long)]
    pub boundary_tolerance: Option<usize>,
    /// Write the CSV here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Entry to render; defaults to the first entry.
    #[arg(long)]
    pub entry: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Exit with status 2 when a suite misses the tolerances.
    #[arg(long)]
    pub strict: bool,
}

/// Failure of one invocation.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses a `key = value` option file into `(key, value)` pairs in order.
pub fn parse_config(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key = value", n + 1)));
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", n + 1)));
        }
        out.push((key, v.trim().to_owned()));
    }
    Ok(out)
}

/// Splices the config file options in front of the subcommand's own
/// arguments.
fn expand_config(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let mut head = Vec::new();
    let mut config = None;
    let mut it = argv.into_iter();
    head.extend(it.next());
    let mut rest: Vec<OsString> = Vec::new();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            config = Some(it.next().ok_or_else(|| CliError::Usage("--config needs a file".into()))?);
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(v.into());
        } else if s == "--jobs" {
            head.push(a);
            head.extend(it.next());
        } else if s.starts_with('-') {
            head.push(a);
        } else {
            head.push(a);
            rest.extend(it);
            break;
        }
    }
    let Some(path) = config else {
        head.extend(rest);
        return Ok(head);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", Path::new(&path).display())))?;
    let pairs = parse_config(&text)?;
    let sub = head.last().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let command = Cli::command();
    let Some(sc) = command.find_subcommand(&sub) else {
        return Err(CliError::Usage("--config needs a subcommand".into()));
    };
    let mut injected = Vec::new();
    for (key, value) in pairs {
        let arg = sc
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?} for {sub}")))?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(value));
        } else {
            match value.as_str() {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => return Err(CliError::Usage(format!("config key {key:?} expects true or false"))),
            }
        }
    }
    head.extend(injected);
    head.extend(rest);
    Ok(head)
}

/// Runs the command line `argv` (program name first), printing to the
/// process streams, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with_output(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with_output<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => return report(e, err),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => report(e, err),
    }
}

fn report(e: CliError, err: &mut dyn Write) -> i32 {
    let _ = match &e {
        CliError::Usage(m) => writeln!(err, "usage error: {m}"),
        CliError::Data(d) => writeln!(err, "error: {d}"),
    };
    e.exit_code()
}

fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let text = match cli.command {
        Command::Synth(a) => synth(a, cli.jobs)?,
        Command::Canny(a) => canny_cmd(a)?,
        Command::Boundary(a) => boundary_cmd(a)?,
        Command::SbdmTrain(a) => sbdm_train(a, cli.jobs)?,
        Command::SbdmInfer(a) => sbdm_infer(a)?,
        Command::LossEval(a) => loss_eval(a)?,
        Command::Refine(a) => refine_cmd(a)?,
        Command::RandomWalk(a) => random_walk_cmd(a)?,
        Command::PseudoLabel(a) => pseudo_label_cmd(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::Heatmap(a) => heatmap_cmd(a)?,
        Command::GradCheck(a) => return grad_check(a, out),
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::Data(e.into()))?;
    Ok(())
}

fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> CliResult<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

fn read_gray_any(path: &Path) -> crate::Result<GrayImage> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"P6") {
        Ok(crate::ioformats::decode_ppm(&bytes)?.to_gray())
    } else {
        crate::ioformats::decode_pgm(&bytes)
    }
}

fn tags_to_tensor(tags: &ImageTags) -> StoredTensor {
    let data = (0..tags.k_total()).map(|c| tags.is_active(c) as u8 as f32).collect();
    StoredTensor::new(vec![tags.k_total() as u32], data).expect("rank-1 tags")
}

fn tags_from_container(c: &TensorContainer) -> crate::Result<ImageTags> {
    let t = c.require("tags")?;
    let fg = t.data().iter().skip(1).map(|&v| v != 0.0).collect();
    Ok(ImageTags::new(fg))
}

fn resolve_tags(opts: &TagOpts, container: &TensorContainer, k_total: usize) -> CliResult<ImageTags> {
    match &opts.tags {
        Some(classes) => {
            let mut fg = vec![false; k_total.saturating_sub(1)];
            for &c in classes {
                if c == 0 || c >= k_total {
                    return Err(CliError::Usage(format!("tag {c} outside 1..{k_total}")));
                }
                fg[c - 1] = true;
            }
            Ok(ImageTags::new(fg))
        }
        None => Ok(tags_from_container(container)?),
    }
}

fn write_cam(path: &Path, cam: &Tensor, tags: &ImageTags) -> crate::Result<()> {
    let mut c = TensorContainer::new();
    c.insert_tensor("cam", cam)?;
    c.insert("tags", tags_to_tensor(tags))?;
    write_tensors(path, &c)
}

fn write_single(path: &Path, name: &str, t: &Tensor) -> crate::Result<()> {
    let mut c = TensorContainer::new();
    c.insert_tensor(name, t)?;
    write_tensors(path, &c)
}

fn read_single(path: &Path, name: &str) -> crate::Result<Tensor> {
    read_tensors(path)?.tensor(name)
}

fn synth(a: SynthArgs, jobs: usize) -> CliResult<String> {
    if a.classes < 2 || a.classes > DEFAULT_PALETTE.len() {
        return Err(CliError::Usage(format!("--classes must be in 2..={}", DEFAULT_PALETTE.len())));
    }
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let spec = SceneSpec {
        width: a.width,
        height: a.height,
        num_objects: a.objects,
        class_palette: DEFAULT_PALETTE[..a.classes].to_vec(),
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        ..Default::default()
    };
    spec.validate().map_err(CliError::usage)?;
    let degrade = DegradeSpec {
        keep_fraction: a.keep_fraction,
        blur_sigma: a.blur_sigma,
        spurious_rate: a.spurious_rate,
        seed: a.seed,
    };
    degrade.validate().map_err(CliError::usage)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Data(e.into()))?;
    let dirs: Vec<PathBuf> = with_pool(jobs, || {
        (0..a.count)
            .into_par_iter()
            .map(|i| {
                let seed = a.seed.wrapping_add(i as u64);
                let spec = SceneSpec { seed, ..spec.clone() };
                let scene = generate_scene(&spec)?;
                let cam = degrade_to_cam(&scene.labels, spec.num_classes(), &DegradeSpec { seed, ..degrade })?;
                let dir = a.out.join(format!("scene_{i:04}"));
                std::fs::create_dir_all(&dir)?;
                write_ppm(dir.join("image.ppm"), &scene.image)?;
                write_pgm(dir.join("gray.pgm"), &scene.image.to_gray())?;
                write_label_pgm(dir.join("labels.pgm"), &scene.labels)?;
                write_cam(&dir.join("cam.smt"), &cam, &scene.tags)?;
                let mut f = TensorContainer::new();
                for (l, t) in scene.features.iter().enumerate() {
                    f.insert_tensor(format!("level{l}"), t)?;
                }
                write_tensors(dir.join("features.smt"), &f)?;
                Ok(dir)
            })
            .collect::<crate::Result<Vec<_>>>()
    })??;
    let mut text = String::from("scene,path\n");
    for (i, d) in dirs.iter().enumerate() {
        let _ = writeln!(text, "{i},{}", d.display());
    }
    Ok(text)
}

fn canny_cmd(a: CannyArgs) -> CliResult<String> {
    let config = a.canny.config()?;
    let gray = read_gray_any(&a.image)?;
    let edges = canny(&gray, &config)?;
    write_single(&a.out, "edges", &edges)?;
    if let Some(p) = &a.pgm {
        let data = edges.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        write_pgm(p, &GrayImage::new(gray.width, gray.height, data)?)?;
    }
    let count = edges.data().iter().filter(|&&v| v > 0.5).count();
    Ok(format!("edge_pixels,{count}\n"))
}

fn boundary_cmd(a: BoundaryArgs) -> CliResult<String> {
    if a.classes == 0 || a.thickness == 0 {
        return Err(CliError::Usage("--classes and --thickness must be positive".into()));
    }
    let labels = read_label_pgm(&a.labels)?;
    let b = label_to_boundary(&labels, a.classes, a.thickness)?;
    write_single(&a.out, "boundary", &b)?;
    Ok(String::new())
}

fn scene_dirs(root: &Path) -> crate::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("features.smt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no scene directories under {}", root.display())));
    }
    Ok(dirs)
}

fn load_training_sample(dir: &Path, canny_config: &CannyConfig, levels: &[usize], use_canny: bool) -> crate::Result<SbdmSample> {
    let f = read_tensors(dir.join("features.smt"))?;
    let mut features = Vec::new();
    let mut i = 0;
    while f.get(&format!("level{i}")).is_some() {
        features.push(f.tensor(&format!("level{i}"))?);
        i += 1;
    }
    let image = read_ppm(dir.join("image.ppm"))?;
    let labels = read_label_pgm(dir.join("labels.pgm"))?;
    let k_total = features.first().map(|t| t.channels()).unwrap_or(0);
    let tags = tags_from_container(&read_tensors(dir.join("cam.smt"))?)?;
    if tags.k_total() != k_total {
        return Err(Error::InvalidArgument(format!("{}: tags do not match the features", dir.display())));
    }
    scene_sbdm_sample(&features, &image, &labels, tags, canny_config, levels, use_canny)
}

fn sbdm_train(a: SbdmTrainArgs, jobs: usize) -> CliResult<String> {
    let canny_config = a.canny.config()?;
    let config = TrainConfig {
        l_init: a.l_init,
        gamma: a.gamma,
        max_itr: a.iterations,
        momentum: a.momentum,
        seed: a.seed,
    };
    config.validate().map_err(CliError::usage)?;
    let loss_config = LossConfig {
        lambda1: a.lambda1,
        ..Default::default()
    };
    loss_config.validate().map_err(CliError::usage)?;
    if a.levels.is_empty() {
        return Err(CliError::Usage("--levels must name at least one level".into()));
    }
    let dirs = scene_dirs(&a.scenes)?;
    let samples = with_pool(jobs, || {
        dirs.par_iter()
            .map(|d| load_training_sample(d, &canny_config, &a.levels, !a.no_canny))
            .collect::<crate::Result<Vec<_>>>()
    })??;
    let arch = SbdmArch::new(
        samples[0].features.iter().map(|t| t.channels()).collect(),
        samples[0].target.channels(),
    );
    let mut trainer = SbdmTrainer::new(&arch, config, loss_config)?;
    let before = mean_boundary_loss(&trainer.params, &samples, &loss_config)?;
    trainer.train(&samples)?;
    let after = mean_boundary_loss(&trainer.params, &samples, &loss_config)?;
    let mut c = params_to_container(&trainer.params)?;
    let levels = a.levels.iter().map(|&l| l as f32).collect();
    c.insert("sbdm.levels", StoredTensor::new(vec![a.levels.len() as u32], levels)?)?;
    c.insert("sbdm.canny", StoredTensor::new(vec![], vec![!a.no_canny as u8 as f32])?)?;
    write_tensors(&a.out, &c)?;
    Ok(format!(
        "metric,value\nsamples,{}\ninitial_loss,{}\nfinal_loss,{}\n",
        samples.len(),
        format_number(before),
        format_number(after)
    ))
}

fn sbdm_infer(a: SbdmInferArgs) -> CliResult<String> {
    let canny_config = a.canny.config()?;
    let ckpt = read_tensors(&a.checkpoint)?;
    let params = params_from_container(&ckpt)?;
    let levels: Vec<usize> = match ckpt.get("sbdm.levels") {
        Some(t) => t.data().iter().map(|&v| v as usize).collect(),
        None => (0..params.levels.len()).collect(),
    };
    let use_canny = ckpt.get("sbdm.canny").is_none_or(|t| t.data().first() != Some(&0.0));
    let f = read_tensors(&a.features)?;
    let features = levels
        .iter()
        .map(|l| f.tensor(&format!("level{l}")))
        .collect::<crate::Result<Vec<_>>>()?;
    let gray = read_gray_any(&a.image)?;
    let edges = if use_canny {
        canny(&gray, &canny_config)?
    } else {
        Tensor::zeros(1, gray.height, gray.width)
    };
    let b = sbdm_forward(&features, &edges, &params)?;
    write_single(&a.out, "boundary", &b)?;
    Ok(String::new())
}

fn loss_eval(a: LossEvalArgs) -> CliResult<String> {
    let loss_config = a.loss.config()?;
    if !a.base_loss.is_finite() {
        return Err(CliError::Usage("--base-loss must be finite".into()));
    }
    let cams = read_tensors(&a.cam)?;
    let cam = cams.tensor("cam")?;
    let tags = resolve_tags(&a.tags, &cams, cam.channels())?;
    let boundary = read_single(&a.boundary, "boundary")?;
    let target = read_single(&a.target, "boundary")?;
    let [ls1, ls2, ls] = smoothness_terms(&cam, &boundary, &tags, &loss_config)?;
    let lb = boundary_bce(&boundary, &target, &tags, loss_config.bce_clamp)?;
    let total = a.base_loss + loss_config.lambda1 * lb.value + loss_config.lambda2 * ls.value;
    Ok(format!(
        "ls1,ls2,ls,lb,total\n{},{},{},{},{}\n",
        format_number(ls1.value),
        format_number(ls2.value),
        format_number(ls.value),
        format_number(lb.value),
        format_number(total)
    ))
}

fn refine_cmd(a: RefineArgs) -> CliResult<String> {
    let loss_config = a.loss.config()?;
    let config = RefineConfig {
        steps: a.steps,
        step_size: a.step_size,
        fidelity_mu: a.fidelity_mu,
        method: match a.method {
            MethodArg::PrimalDual => RefineMethod::PrimalDual,
            MethodArg::GradientDescent => RefineMethod::GradientDescent,
        },
        ..Default::default()
    };
    config.validate().map_err(CliError::usage)?;
    let cams = read_tensors(&a.cam)?;
    let cam = cams.tensor("cam")?;
    let tags = resolve_tags(&a.tags, &cams, cam.channels())?;
    let guide = read_single(&a.guide, "boundary")?;
    let refined = refine_cam_by_smoothness(&cam, &guide, &tags, &config, &loss_config)?;
    write_cam(&a.out, &refined, &tags)?;
    Ok(String::new())
}

fn random_walk_cmd(a: RandomWalkArgs) -> CliResult<String> {
    let config = RefineConfig {
        rw_beta: a.beta,
        rw_iters: a.iters,
        affinity_radius: a.radius,
        affinity_sigma: a.sigma,
        ..Default::default()
    };
    config.validate().map_err(CliError::usage)?;
    let cams = read_tensors(&a.cam)?;
    let cam = cams.tensor("cam")?;
    let image: ColorImage = read_ppm(&a.image)?;
    let graph = build_color_affinity(&image, &config)?;
    let out = if a.transport {
        random_walk_transport(&cam, &graph, &config)?
    } else {
        random_walk_refine(&cam, &graph, &config)?
    };
    let mut c = TensorContainer::new();
    c.insert_tensor("cam", &out)?;
    if let Some(t) = cams.get("tags") {
        c.insert("tags", t.clone())?;
    }
    write_tensors(&a.out, &c)?;
    Ok(String::new())
}

fn pseudo_label_cmd(a: PseudoLabelArgs) -> CliResult<String> {
    if !(a.bg_threshold.is_finite()) {
        return Err(CliError::Usage("--bg-threshold must be finite".into()));
    }
    let cams = read_tensors(&a.cam)?;
    let cam = cams.tensor("cam")?;
    let tags = resolve_tags(&a.tags, &cams, cam.channels())?;
    let labels = cam_to_pseudo_label(&cam, &tags, a.bg_threshold)?;
    write_label_pgm(&a.out, &labels)?;
    Ok(String::new())
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult<String> {
    if a.pred.len() != a.truth.len() {
        return Err(CliError::Usage(format!(
            "{} --pred files for {} --truth files",
            a.pred.len(),
            a.truth.len()
        )));
    }
    if a.classes == 0 {
        return Err(CliError::Usage("--classes must be positive".into()));
    }
    let preds = a.pred.iter().map(read_label_pgm).collect::<crate::Result<Vec<_>>>()?;
    let truths = a.truth.iter().map(read_label_pgm).collect::<crate::Result<Vec<_>>>()?;
    let mut report = miou(&preds, &truths, a.classes)?;
    if let Some(tol) = a.boundary_tolerance {
        if preds.len() != 1 {
            return Err(CliError::Usage("--boundary-tolerance scores a single image pair".into()));
        }
        report.boundary = Some(boundary_f1(&preds[0], &truths[0], a.classes, tol)?);
    }
    let csv = report.to_csv();
    if let Some(p) = &a.out {
        write_atomic(p, csv.as_bytes())?;
    }
    Ok(csv)
}

fn heatmap_cmd(a: HeatmapArgs) -> CliResult<String> {
    let c = read_tensors(&a.input)?;
    let name = match &a.entry {
        Some(n) => n.clone(),
        None => c
            .names()
            .next()
            .ok_or_else(|| CliError::Data(Error::MissingTensor("<any>".into())))?
            .to_owned(),
    };
    let t = c.tensor(&name)?;
    if a.channel >= t.channels() {
        return Err(CliError::Usage(format!("--channel {} but {name:?} has {} channels", a.channel, t.channels())));
    }
    let plane = t.slice_channels(a.channel, 1)?;
    write_ppm(&a.out, &render_heatmap(&plane)?)?;
    Ok(String::new())
}

fn grad_check(a: GradCheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let config = SuiteConfig {
        instances: a.instances,
        ..Default::default()
    };
    let reports = run_suite(a.seed, &config)?;
    let mut text = String::from("loss,components,within_rel_tol,failures,max_rel_error,max_abs_error_outside,passed\n");
    for (s, r) in &reports {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            s.name(),
            r.components,
            r.rel_ok,
            r.failures,
            format_number(r.max_rel_error),
            format_number(r.max_abs_error_outside),
            r.passed()
        );
    }
    out.write_all(text.as_bytes()).map_err(|e| CliError::Data(e.into()))?;
    if a.strict && !reports.iter().all(|(_, r)| r.passed()) {
        return Err(CliError::Data(Error::InvalidArgument(
            "gradient check outside tolerance".into(),
        )));
    }
    Ok(())
}
