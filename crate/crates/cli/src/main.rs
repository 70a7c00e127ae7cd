use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use rootreg::cohort::{
    generate_subjects, load_cohort_dir, load_subject_dir, load_template_dir, run_cohort, CohortConfig, MODES,
};
use rootreg::landmarks::LandmarkKind;
use rootreg::manifest::{load_chain, save_registration, Direction};
use rootreg::metrics::{
    csa_profile, overlap_per_level, write_csa_csv, write_overlap_csv, OverlapConvention, DEFAULT_SMOOTH_WINDOW,
};
use rootreg::nifti::{load_volume, save_volume};
use rootreg::phantom::{generate_phantom, make_template, CohortModel, PhantomSpec};
use rootreg::pipeline::{register, PipelineConfig, TemplateInputs};
use rootreg::qc::write_qc;
use rootreg::si_refine::SIRegParams;
use rootreg::warpfield::{apply_warp, apply_warp_labels};
use rootreg::{Image, LabelMap};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Rootlet- or disc-driven registration of spinal cord images to a straight template.
#[derive(Parser, Debug)]
#[command(name = "rootreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register one subject to the template.
    Register(RegisterArgs),
    /// Resample a volume through a saved warp chain.
    ApplyWarp(ApplyWarpArgs),
    /// Overlap and CSA metrics on volumes already in template space.
    Metrics(MetricsArgs),
    /// Write a synthetic phantom (or template) to disk.
    Phantom(PhantomArgs),
    /// Register a cohort in both modes and summarise.
    Cohort(CohortArgs),
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, value_enum, default_value_t = Mode::Rootlets)]
    landmarks: Mode,
    /// Skip the in-plane scaling step.
    #[arg(long)]
    skip_xy_scale: bool,
    /// SI registration override, e.g. `--param control_spacing=10`.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Rootlets,
    Discs,
}

impl From<Mode> for LandmarkKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Rootlets => LandmarkKind::Rootlets,
            Mode::Discs => LandmarkKind::Discs,
        }
    }
}

#[derive(Args, Debug)]
struct RegisterArgs {
    /// Subject directory with t2, cord and rootlets/discs volumes.
    #[arg(long)]
    subject: PathBuf,
    /// Template directory with the same layout.
    #[arg(long)]
    template: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirArg {
    Forward,
    Backward,
}

#[derive(Args, Debug)]
struct ApplyWarpArgs {
    #[arg(long)]
    input: PathBuf,
    /// Registration output directory holding the chain manifests.
    #[arg(long)]
    chain: PathBuf,
    #[arg(long, value_enum, default_value_t = DirArg::Forward)]
    direction: DirArg,
    /// Treat the input as a label map (nearest neighbour).
    #[arg(long)]
    label: bool,
    /// Volume whose grid replaces the manifest's output grid.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Template directory (rootlet labels and the C2-C3 disc).
    #[arg(long)]
    template: PathBuf,
    /// Subject rootlet labels warped to the template.
    #[arg(long)]
    rootlets: Option<PathBuf>,
    /// Subject cord mask warped to the template.
    #[arg(long)]
    cord: Option<PathBuf>,
    /// Template slice range `LO:HI` searched for the enlargement.
    #[arg(long, value_parser = parse_range)]
    search: Option<(usize, usize)>,
    #[arg(long, default_value_t = DEFAULT_SMOOTH_WINDOW)]
    window: usize,
    /// Overlap denominator `inf - sup + 1` instead of `inf - sup`.
    #[arg(long)]
    inclusive_extent: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Phantom spec JSON; defaults to the built-in subject.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Write a 0.5 mm template from a straight spec instead of a subject.
    #[arg(long)]
    template: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CohortArgs {
    /// Template directory; generated from the built-in template when absent.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Directory of subject directories; a phantom cohort is generated when absent.
    #[arg(long)]
    subjects: Option<PathBuf>,
    /// Generated cohort size.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Cohort variation model JSON (defaults to offsets widening caudally).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Template slice range `LO:HI` searched for the enlargement.
    #[arg(long, value_parser = parse_range)]
    search: (usize, usize),
    #[arg(long, default_value_t = DEFAULT_SMOOTH_WINDOW)]
    window: usize,
    #[arg(long)]
    inclusive_extent: bool,
    #[arg(long)]
    skip_xy_scale: bool,
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code chosen by the caller after a partial success.
#[derive(Debug)]
struct PartialFailure(u8, String);

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for PartialFailure {}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo: usize = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let hi: usize = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn si_params(pairs: &[String]) -> anyhow::Result<SIRegParams> {
    SIRegParams::from_pairs(pairs).map_err(|e| UsageError(format!("--param: {e}")).into())
}

fn convention(inclusive: bool) -> OverlapConvention {
    if inclusive {
        OverlapConvention::Inclusive
    } else {
        OverlapConvention::Literal
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn cmd_register(a: &RegisterArgs) -> anyhow::Result<()> {
    let cfg = PipelineConfig {
        mode: a.pipeline.landmarks.into(),
        skip_xy_scale: a.pipeline.skip_xy_scale,
        si: si_params(&a.pipeline.params)?,
    };
    let subject = load_subject_dir(&a.subject)?;
    let template = load_template_dir(&a.template)?;
    create_dir(&a.out)?;
    let reg = register(&subject, &template, &cfg)?;
    let mode = cfg.mode;
    save_registration(&reg, &a.out)?;

    let warped_t2 = reg.image_to_template(&subject.t2);
    save_volume(&warped_t2, a.out.join("t2_to_template.nii.gz"))?;
    save_volume(&reg.labels_to_template(&subject.cord), a.out.join("cord_to_template.nii.gz"))?;
    for (name, labels) in [("rootlets", &subject.rootlets), ("discs", &subject.discs)] {
        if let Some(l) = labels {
            save_volume(&reg.labels_to_template(l), a.out.join(format!("{name}_to_template.nii.gz")))?;
        }
    }
    save_volume(&reg.image_to_subject(&template.t2), a.out.join("template_to_subject.nii.gz"))?;

    // subject landmarks carried to the template by the backward map
    let warped_lm = reg.subject_landmarks.map_points(|p| Ok(reg.backward.pullback(p)))?;
    reg.subject_landmarks
        .write_csv(&a.out.join(format!("landmarks_subject_{mode}.csv")))?;
    reg.template_landmarks
        .write_csv(&a.out.join(format!("landmarks_template_{mode}.csv")))?;
    warped_lm.write_csv(&a.out.join(format!("landmarks_warped_{mode}.csv")))?;
    write_qc(&a.out, mode, &template.t2, &warped_t2, &reg.template_landmarks, &warped_lm)?;
    reg.zmap.write_csv(&a.out.join(format!("zmap_{mode}.csv")))?;
    if let Some(s) = &reg.scale {
        s.write_csv(&a.out.join("xy_scale.csv"))?;
    }

    let p = &cfg.si;
    let report = json!({
        "mode": mode,
        "skip_xy_scale": cfg.skip_xy_scale,
        "missing_interior_levels": reg.subject_landmarks.gaps(),
        "si_params": {
            "control_spacing": p.control_spacing,
            "levels": p.levels,
            "max_iterations": p.max_iterations,
            "dilation": p.dilation,
            "monotonicity_weight": p.monotonicity_weight,
            "step": p.step,
            "min_step": p.min_step,
            "min_slope": p.min_slope,
            "edge_margin": p.edge_margin,
        },
        "si": reg.si.as_ref().map(|s| json!({
            "ncc_identity": s.ncc_identity,
            "ncc_final": s.ncc_final,
            "iterations": s.iterations,
            "fell_back": s.fell_back,
        })),
        "forward": reg.forward.transforms().iter().map(|t| t.describe()).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&report)?;
    rootreg::io_util::write_atomic(&a.out.join("report.json"), text.as_bytes())?;
    info!("registration ({mode}) written to {}", a.out.display());
    Ok(())
}

fn cmd_apply_warp(a: &ApplyWarpArgs) -> anyhow::Result<()> {
    let direction = match a.direction {
        DirArg::Forward => Direction::Forward,
        DirArg::Backward => Direction::Backward,
    };
    let (manifest, chain) = load_chain(&a.chain.join(direction.manifest_name()))?;
    let grid = match &a.reference {
        Some(r) => load_volume::<f32>(r)?.grid().clone(),
        None => manifest.output_grid,
    };
    if a.label {
        let v: LabelMap = load_volume(&a.input)?;
        save_volume(&apply_warp_labels(&v, &chain, &grid), &a.out)?;
    } else {
        let v: Image = load_volume(&a.input)?;
        save_volume(&apply_warp(&v, &chain, &grid, false), &a.out)?;
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> anyhow::Result<()> {
    if a.rootlets.is_none() && a.cord.is_none() {
        bail!(UsageError("metrics needs --rootlets and/or --cord".into()));
    }
    let template = load_template_dir(&a.template)?;
    create_dir(&a.out)?;
    if let Some(path) = &a.rootlets {
        let conv = convention(a.inclusive_extent);
        let warped: LabelMap = load_volume(path)?;
        let report = overlap_per_level(&warped, &template.rootlets, conv)?;
        write_overlap_csv(&a.out.join("overlap.csv"), &[(stem(path), report.clone())])?;
        match report.mean() {
            Some(m) => println!("mean overlap ({conv}): {m:.4}"),
            None => println!("mean overlap ({conv}): undefined"),
        }
    }
    if let Some(path) = &a.cord {
        let Some(search) = a.search else {
            bail!(UsageError("--cord needs --search LO:HI".into()));
        };
        let c23 = rootreg::cohort::c23_slice(&template)?;
        let cord: LabelMap = load_volume(path)?;
        let profile = csa_profile(&cord, c23, a.window, search)?;
        println!("enlargement slice: {}", profile.enlargement);
        write_csa_csv(&a.out.join("csa.csv"), &[(stem(path), profile)])?;
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn read_spec(path: &Path) -> anyhow::Result<PhantomSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(PhantomSpec::from_json(&text)?)
}

fn cmd_phantom(a: &PhantomArgs) -> anyhow::Result<()> {
    let mut spec = match (&a.spec, a.template) {
        (Some(p), _) => read_spec(p)?,
        (None, true) => PhantomSpec::template_default(),
        (None, false) => PhantomSpec::subject_default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let set = if a.template {
        make_template(&spec)?
    } else {
        generate_phantom(&spec)?
    };
    create_dir(&a.out)?;
    set.save(&a.out)?;
    Ok(())
}

fn default_template() -> anyhow::Result<TemplateInputs> {
    let t = make_template(&PhantomSpec::template_default())?;
    Ok(TemplateInputs {
        t2: t.t2,
        cord: t.cord,
        rootlets: t.rootlets,
        discs: t.discs,
    })
}

fn cmd_cohort(a: &CohortArgs) -> anyhow::Result<()> {
    let cfg = CohortConfig {
        si: si_params(&a.params)?,
        skip_xy_scale: a.skip_xy_scale,
        convention: convention(a.inclusive_extent),
        search: a.search,
        smooth_window: a.window,
        jobs: a.jobs.max(1),
    };
    let template = match &a.template {
        Some(dir) => load_template_dir(dir)?,
        None => default_template()?,
    };
    let subjects = match &a.subjects {
        Some(dir) => load_cohort_dir(dir)?,
        None => {
            let model = match &a.model {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("{}: invalid cohort model", p.display()))?
                }
                None => CohortModel::caudal_widening(),
            };
            generate_subjects(&PhantomSpec::subject_default(), a.n, &model, a.seed)?
        }
    };
    create_dir(&a.out)?;
    let report = run_cohort(&template, &subjects, &cfg)?;
    report.write(&a.out)?;
    for mode in MODES {
        if let Some(r) = report.overlap(mode, "all") {
            println!("{mode}: overlap ({}) {:.4} ± {:.4} (n={})", cfg.convention, r.mean, r.std, r.n);
        }
    }
    let failures = report.failures();
    if !failures.is_empty() {
        let code = if failures.iter().any(|(_, _, f)| f.numerical) {
            EXIT_NUMERICAL
        } else {
            EXIT_DATA
        };
        for (name, mode, f) in &failures {
            warn!("{name} ({mode}): {}", f.message);
        }
        bail!(PartialFailure(code, format!("{} of {} runs failed", failures.len(), 2 * subjects.len())));
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if let Some(PartialFailure(code, _)) = e.downcast_ref::<PartialFailure>() {
        return *code;
    }
    match e.downcast_ref::<rootreg::Error>() {
        Some(err) if err.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::ApplyWarp(a) => cmd_apply_warp(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Cohort(a) => cmd_cohort(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
