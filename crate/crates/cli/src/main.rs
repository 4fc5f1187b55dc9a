use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use lgreg::eval::{run_experiment, write_pair, EvalResult, ExperimentInputs, Method, PairManifest};
use lgreg::field::warp;
use lgreg::gradcheck::run_gradcheck;
use lgreg::io::{self, Axis, VolumeFormat};
use lgreg::synth::{make_pair, ModalityRemapSpec, SyntheticDeformSpec};
use lgreg::translator::translate;
use lgreg::{register, Dims, Error, RegistrationConfig, RegistrationMode, Result, TranslatorModel};

#[derive(Parser)]
#[command(name = "lgreg", version, about = "Multi-modal deformable registration of 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic pairs with ground truth and a manifest each.
    Synth(SynthArgs),
    /// Register a floating volume onto a reference.
    Register(RegisterArgs),
    /// Apply a trained translator to a volume.
    Translate(TranslateArgs),
    /// Run experiments on pair manifests and report metrics.
    Eval(EvalArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export one slice of a volume as an 8-bit PNG.
    Slice(SliceArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Registration settings, TOML or JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RegistrationConfig> {
        let mut cfg = match &self.config {
            Some(path) => RegistrationConfig::load(path)?,
            None => RegistrationConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// First pair seed; pairs use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Edge length of the cubic grid.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Deformation spec, TOML or JSON. Defaults to the seeded desk spec.
    #[arg(long)]
    deform: Option<PathBuf>,
    /// Intensity remap spec, TOML or JSON.
    #[arg(long)]
    remap: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "float")]
    floating: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// `lg_only` or `full_alternating`; overrides the config.
    #[arg(long)]
    mode: Option<RegistrationMode>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    /// Translator JSON written by `register`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "float")]
    floating: PathBuf,
    /// Output volume; `.nii` selects NIfTI-1.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Pair manifests. Alternatively give `--ref` and `--float`.
    manifests: Vec<PathBuf>,
    #[arg(long = "ref", requires = "floating", conflicts_with = "manifests")]
    reference: Option<PathBuf>,
    #[arg(long = "float", requires = "reference")]
    floating: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// `mi_report_only`, `lg_only` or `full_alternating`.
    #[arg(long, default_value = "full_alternating")]
    mode: Method,
    /// Field to score with `mi_report_only`.
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Experiments run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SliceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "z")]
    axis: Axis,
    /// Defaults to the middle slice.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Register(a) => register_cmd(&a),
        Command::Translate(a) => translate_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Slice(a) => slice(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_spec<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let toml = path.extension().is_some_and(|e| e == "toml");
    let parsed = if toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn load_volume(path: &Path) -> Result<lgreg::Volume3D> {
    io::load_volume(path, VolumeFormat::from_path(path))
}

fn synth(a: &SynthArgs) -> Result<ExitCode> {
    let remap: Option<ModalityRemapSpec> = a.remap.as_deref().map(read_spec).transpose()?;
    let deform: Option<SyntheticDeformSpec> = a.deform.as_deref().map(read_spec).transpose()?;
    for seed in a.seed..a.seed + a.count {
        let deform = deform.unwrap_or_else(|| SyntheticDeformSpec::desk(seed));
        let remap = remap.clone().unwrap_or(ModalityRemapSpec { seed, ..ModalityRemapSpec::default() });
        let pair = make_pair(Dims::cube(a.size), &deform, &remap, seed)?;
        let dir = a.out_dir.join(format!("pair_{seed:03}"));
        write_pair(&pair, &dir, &deform, &remap, seed)?;
        println!("{}", dir.join("manifest.json").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn register_cmd(a: &RegisterArgs) -> Result<ExitCode> {
    let mut cfg = a.config.load()?;
    if let Some(mode) = a.mode {
        cfg.mode = mode;
    }
    let reference = load_volume(&a.reference)?;
    let floating = load_volume(&a.floating)?;
    create_dir(&a.out_dir)?;
    let reg = match register(&reference, &floating, &cfg) {
        Ok(reg) => reg,
        Err(e) => {
            if let Error::Divergence { last_finite: Some(phi), .. } = e.root() {
                io::save_field(phi, &a.out_dir.join("field_last_finite.raw"))?;
            }
            return Err(e);
        }
    };
    io::save_field(&reg.field, &a.out_dir.join("field.raw"))?;
    let warped = warp(&floating, &reg.field)?;
    io::save_volume(&warped, &a.out_dir.join("warped.raw"), VolumeFormat::Raw)?;
    reg.report.write_trace_csv(&a.out_dir.join("trace.csv"))?;
    write_text(&a.out_dir.join("report.json"), &reg.report.to_json()?)?;
    if let Some(model) = &reg.translator {
        write_text(&a.out_dir.join("translator.json"), &model.to_json()?)?;
        let translated = translate(model, &warped)?;
        io::save_volume(&translated, &a.out_dir.join("translated.raw"), VolumeFormat::Raw)?;
    }
    let t = &reg.report.final_terms;
    println!(
        "total {:.6} lg {:.6} lcc {:.6} smooth {:.6} ({:.1}s)",
        t.total, t.lg, t.lcc, t.smooth, reg.report.runtime.register_seconds
    );
    Ok(ExitCode::SUCCESS)
}

fn translate_cmd(a: &TranslateArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.model).map_err(|e| Error::Io { path: a.model.clone(), source: e })?;
    let model = TranslatorModel::from_json(&text)?;
    let out = translate(&model, &load_volume(&a.floating)?)?;
    io::save_volume(&out, &a.out, VolumeFormat::from_path(&a.out))?;
    Ok(ExitCode::SUCCESS)
}

struct Job {
    name: String,
    /// A manifest file, or `None` for the pair given on the command line.
    manifest: Option<PathBuf>,
}

fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let cfg = a.config.load()?;
    let field = a.field.as_deref().map(io::load_field).transpose()?;
    let jobs: Vec<Job> = match (&a.reference, &a.floating) {
        (Some(_), Some(_)) => vec![Job {
            name: String::new(),
            manifest: None,
        }],
        _ if a.manifests.is_empty() => {
            return Err(Error::Config("give pair manifests or --ref and --float".into()))
        }
        _ => a
            .manifests
            .iter()
            .enumerate()
            .map(|(i, m)| Job {
                name: job_name(m, i, a.manifests.len()),
                manifest: Some(m.clone()),
            })
            .collect(),
    };

    let results: Vec<Mutex<Option<Result<EvalResult>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(i) else { break };
        let dir = a.out_dir.join(&job.name);
        let manifest = match (&job.manifest, &a.reference, &a.floating) {
            (Some(path), _, _) => PairManifest::load(path),
            (None, Some(r), Some(f)) => Ok(PairManifest::new(r, f)),
            _ => unreachable!("jobs come from manifests or --ref and --float"),
        };
        let outcome = manifest
            .and_then(|m| ExperimentInputs::load(&m))
            .and_then(|inputs| run_experiment(&inputs, &cfg, a.mode, field.as_ref(), Some(&dir)))
            .map(|e| e.result);
        *results[i].lock().unwrap() = Some(outcome);
    };
    std::thread::scope(|s| {
        for _ in 0..a.jobs.clamp(1, jobs.len()) {
            s.spawn(worker);
        }
    });

    create_dir(&a.out_dir)?;
    let summary = a.out_dir.join("summary.csv");
    let mut rows = csv::Writer::from_path(&summary).map_err(|e| Error::Format(e.to_string()))?;
    let mut first_error = None;
    for (job, slot) in jobs.iter().zip(results) {
        match slot.into_inner().unwrap().expect("every job ran") {
            Ok(r) => {
                let row = SummaryRow::new(&job.name, &r);
                println!(
                    "{} {}: rmse% {:.3} -> {:.3}, mi {:.4} -> {:.4}{}",
                    if job.name.is_empty() { "." } else { &job.name },
                    row.method,
                    row.rmse_before,
                    row.rmse_after,
                    row.mi_before,
                    row.mi_after,
                    row.epe_after.map(|e| format!(", epe {e:.3}")).unwrap_or_default()
                );
                rows.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
            }
            Err(e) => {
                let e = if job.name.is_empty() { e } else { e.in_stage(job.name.clone()) };
                match first_error {
                    None => first_error = Some(e),
                    Some(_) => eprintln!("error: {e}"),
                }
            }
        }
    }
    rows.flush().map_err(|e| Error::Io { path: summary, source: e })?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(ExitCode::SUCCESS),
    }
}

fn job_name(manifest: &Path, index: usize, count: usize) -> String {
    if count == 1 {
        return String::new();
    }
    let stem = manifest
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    format!("{index:03}_{stem}")
}

#[derive(serde::Serialize)]
struct SummaryRow {
    pair: String,
    method: String,
    seed: u64,
    rmse_before: f64,
    rmse_after: f64,
    mi_before: f64,
    mi_after: f64,
    epe_before: Option<f64>,
    epe_after: Option<f64>,
    mean_dice_after: Option<f64>,
    jacobian_fraction_nonpositive: f64,
    register_seconds: f64,
    warp_seconds: f64,
}

impl SummaryRow {
    fn new(name: &str, r: &EvalResult) -> Self {
        let dice = &r.after.dice_per_label;
        SummaryRow {
            pair: name.to_string(),
            method: r.method.to_string(),
            seed: r.seed,
            rmse_before: r.before.rmse_percent,
            rmse_after: r.after.rmse_percent,
            mi_before: r.before.mutual_information,
            mi_after: r.after.mutual_information,
            epe_before: r.before.mean_endpoint_error,
            epe_after: r.after.mean_endpoint_error,
            mean_dice_after: (!dice.is_empty()).then(|| dice.values().sum::<f64>() / dice.len() as f64),
            jacobian_fraction_nonpositive: r.jacobian.fraction_nonpositive,
            register_seconds: r.runtime_seconds.register,
            warp_seconds: r.runtime_seconds.warp,
        }
    }
}

fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let report = run_gradcheck(a.seed)?;
    for c in &report.checks {
        println!(
            "{} {:<32} max relative error {:.2e}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.max_relative_error
        );
    }
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        write_text(out, &json)?;
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn slice(a: &SliceArgs) -> Result<ExitCode> {
    let vol = load_volume(&a.input)?;
    let index = a.index.unwrap_or(vol.dims().axis(a.axis.index()) / 2);
    io::export_slice(&vol, a.axis, index, &a.out)?;
    Ok(ExitCode::SUCCESS)
}
