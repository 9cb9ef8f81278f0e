use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};

use roireg::easr::{assign_joint_labels, extract_rois, fit_gmm_joint, select_k, FitOptions, GmmModel, KScan};
use roireg::engine::{self, trace_csv, KChoice, RegistrationConfig};
use roireg::io::{self, Kind};
use roireg::loss::LossReport;
use roireg::metrics::{self, MetricsReport};
use roireg::phantom::{make_phantom_pair, PhantomSpec};
use roireg::transform::{self, SsSchedule};
use roireg::volume::Dims;
use roireg::Error;

use crate::{EvaluateArgs, GmmFlags, KscanArgs, RegisterArgs, SegmentArgs, SynthArgs, WarpArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    /// 1 for bad arguments, 2 for unreadable or inconsistent files, 3 for
    /// failures of the numerics themselves.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                Error::InvalidConfig(_) | Error::InvalidRange(..) | Error::InvalidSpec(_) | Error::WindowTooLarge { .. } => 1,
                Error::Format(_)
                | Error::File { .. }
                | Error::Io(_)
                | Error::Json(_)
                | Error::ShapeMismatch(..)
                | Error::LengthMismatch { .. }
                | Error::InvalidDims { .. } => 2,
                _ => 3,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())).into())
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn emit_json<T: Serialize>(value: &T, out: Option<&PathBuf>) -> CliResult<()> {
    if let Some(path) = out {
        io::write_json(path, value)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<PhantomSpec>(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(k) = a.k {
        let base = PhantomSpec::with_k(k);
        spec.k = base.k;
        spec.intensity_means = base.intensity_means;
    }
    if let Some(n) = a.size {
        spec.dims = Dims::cube(n)?;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.noise_sigma {
        spec.noise_sigma = s;
    }
    if let Some(w) = a.warp_amplitude {
        spec.warp_amplitude = w;
    }
    if let Some(m) = a.warp_modes {
        spec.warp_smoothness = m;
    }
    let pair = make_phantom_pair(&spec)?;
    ensure_dir(&a.out)?;
    io::write_volume(&a.out.join("moving"), &pair.moving)?;
    io::write_volume(&a.out.join("fixed"), &pair.fixed)?;
    io::write_labels(&a.out.join("labels_moving"), &pair.labels_moving)?;
    io::write_labels(&a.out.join("labels_fixed"), &pair.labels_fixed)?;
    io::write_field(&a.out.join("true_field"), &pair.true_field)?;
    io::write_json(&a.out.join("spec.json"), &spec)?;
    Ok(())
}

fn fit_options(base: FitOptions, flags: &GmmFlags, overrides: &mut Map<String, Value>) -> FitOptions {
    let mut o = base;
    if let Some(v) = flags.max_iters {
        o.max_iters = v;
        overrides.insert("max_iters".into(), json!(v));
    }
    if let Some(v) = flags.rel_tol {
        o.rel_tol = v;
        overrides.insert("rel_tol".into(), json!(v));
    }
    if let Some(v) = flags.background_threshold {
        o.background_threshold = Some(v);
        overrides.insert("background_threshold".into(), json!(v));
    }
    o
}

pub fn segment(a: &SegmentArgs) -> CliResult<()> {
    let opts = fit_options(FitOptions::default(), &a.gmm, &mut Map::new());
    let mov = io::read_volume(&a.moving)?;
    let fix = io::read_volume(&a.fixed)?;
    let model = fit_gmm_joint(&mov, &fix, a.k, &opts)?;
    let (lm, lf) = assign_joint_labels(&model, &mov, &fix, opts.background_threshold)?;
    let rois_m = extract_rois(&mov, &lm, a.k)?;
    let rois_f = extract_rois(&fix, &lf, a.k)?;
    ensure_dir(&a.out)?;
    io::write_json(&a.out.join("model.json"), &model)?;
    io::write_labels(&a.out.join("labels_moving"), &lm)?;
    io::write_labels(&a.out.join("labels_fixed"), &lf)?;
    for (j, (rm, rf)) in rois_m.iter().zip(rois_f.iter()).enumerate() {
        io::write_volume(&a.out.join(format!("roi_moving_{j}")), rm)?;
        io::write_volume(&a.out.join(format!("roi_fixed_{j}")), rf)?;
    }
    Ok(())
}

pub fn kscan(a: &KscanArgs) -> CliResult<()> {
    let opts = fit_options(FitOptions::default(), &a.gmm, &mut Map::new());
    let mov = io::read_volume(&a.moving)?;
    let fix = io::read_volume(&a.fixed)?;
    let holdout = match &a.holdout_labels {
        Some(paths) => Some((io::read_labels(&paths[0])?, io::read_labels(&paths[1])?)),
        None => None,
    };
    let scan = select_k(
        &mov,
        &fix,
        (a.k_min, a.k_max),
        holdout.as_ref().map(|(m, f)| (m, f)),
        &opts,
    )?;
    emit_json(&scan, a.out.as_ref())
}

/// Defaults, then the config file, then flags. Returns the config and the
/// flags that were applied.
fn registration_config(a: &RegisterArgs) -> CliResult<(RegistrationConfig, Map<String, Value>)> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<RegistrationConfig>(p)?,
        None => RegistrationConfig::default(),
    };
    let mut ov = Map::new();
    if let Some(k) = a.k {
        cfg.k = KChoice::Fixed(k);
        ov.insert("k".into(), json!(k));
    }
    if a.auto_k {
        let (lo, hi) = match cfg.k {
            KChoice::Auto { k_min, k_max } => (k_min, k_max),
            KChoice::Fixed(_) => (1, 5),
        };
        let k_min = a.k_min.unwrap_or(lo);
        let k_max = a.k_max.unwrap_or(hi);
        cfg.k = KChoice::Auto { k_min, k_max };
        ov.insert("k".into(), json!({ "k_min": k_min, "k_max": k_max }));
    }
    if let Some(v) = a.alpha {
        cfg.loss.alpha = v;
        ov.insert("alpha".into(), json!(v));
    }
    if let Some(v) = a.window_radius {
        cfg.loss.window_radius = v;
        ov.insert("window_radius".into(), json!(v));
    }
    if let Some(v) = a.levels {
        cfg.levels = v;
        ov.insert("levels".into(), json!(v));
    }
    if let Some(v) = &a.iters {
        cfg.iters_per_level = v.clone();
        ov.insert("iters".into(), json!(v));
    }
    if let Some(v) = &a.steps {
        cfg.step_sizes = v.clone();
        ov.insert("steps".into(), json!(v));
    }
    if a.diffeomorphic {
        cfg.diffeomorphic = true;
        ov.insert("diffeomorphic".into(), json!(true));
    }
    if let Some(v) = a.ss_steps {
        cfg.ss_schedule = SsSchedule::new(v)?;
        ov.insert("ss_steps".into(), json!(v));
    }
    if let Some(v) = a.refine_iters {
        cfg.refine_iters = v;
        ov.insert("refine_iters".into(), json!(v));
    }
    if let Some(v) = a.fusion_sigma {
        cfg.fusion_smoothing_sigma = v;
        ov.insert("fusion_sigma".into(), json!(v));
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        ov.insert("seed".into(), json!(v));
    }
    cfg.gmm = fit_options(cfg.gmm, &a.gmm, &mut ov);
    cfg.validate()?;
    Ok((cfg, ov))
}

#[derive(Serialize)]
struct Manifest {
    subcommand: &'static str,
    inputs: BTreeMap<&'static str, String>,
    output_dir: String,
    overrides: Map<String, Value>,
    tool_version: &'static str,
    format_version: &'static str,
}

#[derive(Serialize)]
struct ChannelSummary {
    roi_index: usize,
    final_loss: LossReport,
    iterations: usize,
}

/// Layout of `result.json`. Everything except `wall_times` is a pure
/// function of the inputs and the config.
#[derive(Serialize)]
struct RegisterReport<'a> {
    manifest: Manifest,
    config: &'a RegistrationConfig,
    k: usize,
    k_scan: Option<&'a KScan>,
    model: &'a GmmModel,
    channels: Vec<ChannelSummary>,
    final_loss: LossReport,
    metrics: Option<&'a MetricsReport>,
    wall_times: &'a BTreeMap<String, f64>,
}

pub fn register(a: &RegisterArgs) -> CliResult<()> {
    let (cfg, overrides) = registration_config(a)?;
    let mov = io::read_volume(&a.moving)?;
    let fix = io::read_volume(&a.fixed)?;
    let labels = match (&a.moving_labels, &a.fixed_labels) {
        (Some(m), Some(f)) => Some((io::read_labels(m)?, io::read_labels(f)?)),
        _ => None,
    };
    if let Some((lm, lf)) = &labels {
        mov.dims().ensure_same(&lm.dims())?;
        fix.dims().ensure_same(&lf.dims())?;
    }
    let mut result = engine::register(&mov, &fix, &cfg)?;

    ensure_dir(&a.out)?;
    if let Some((lm, lf)) = &labels {
        let warped = transform::warp_labels(lm, &result.field)?;
        result.metrics = Some(metrics::evaluate(&warped, lf, Some(&result.field))?);
        io::write_labels(&a.out.join("warped_labels"), &warped)?;
    }
    io::write_field(&a.out.join("field"), &result.field)?;
    if let Some(v) = &result.velocity {
        io::write_field(&a.out.join("velocity"), v)?;
    }
    io::write_volume(&a.out.join("warped"), &result.warped)?;
    io::write_labels(&a.out.join("segmentation_moving"), &result.labels_moving)?;
    io::write_labels(&a.out.join("segmentation_fixed"), &result.labels_fixed)?;
    io::write_atomic(&a.out.join("trace.csv"), trace_csv(&result.trace).as_bytes())?;

    let mut inputs = BTreeMap::from([("moving", display(&a.moving)), ("fixed", display(&a.fixed))]);
    if let Some(p) = &a.config {
        inputs.insert("config", display(p));
    }
    if let (Some(m), Some(f)) = (&a.moving_labels, &a.fixed_labels) {
        inputs.insert("moving_labels", display(m));
        inputs.insert("fixed_labels", display(f));
    }
    let report = RegisterReport {
        manifest: Manifest {
            subcommand: "register",
            inputs,
            output_dir: display(&a.out),
            overrides,
            tool_version: env!("CARGO_PKG_VERSION"),
            format_version: io::FORMAT_VERSION,
        },
        config: &cfg,
        k: result.model.k,
        k_scan: result.k_scan.as_ref(),
        model: &result.model,
        channels: result
            .channels
            .iter()
            .map(|c| ChannelSummary {
                roi_index: c.roi_index,
                final_loss: c.report,
                iterations: c.trace.len(),
            })
            .collect(),
        final_loss: result.report,
        metrics: result.metrics.as_ref(),
        wall_times: &result.wall_times,
    };
    io::write_json(&a.out.join("result.json"), &report)?;
    Ok(())
}

pub fn warp(a: &WarpArgs) -> CliResult<()> {
    let field = io::read_field(&a.field)?;
    match io::read_header(&a.input)?.kind {
        Kind::Scalar => {
            let v = io::read_volume(&a.input)?;
            io::write_volume(&a.out, &transform::warp(&v, &field)?)?;
        }
        Kind::LabelsU16 => {
            let l = io::read_labels(&a.input)?;
            io::write_labels(&a.out, &transform::warp_labels(&l, &field)?)?;
        }
        Kind::Vector3 => {
            return Err(Error::Format(format!("{}: cannot warp a vector field", display(&a.input))).into());
        }
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let labels = io::read_labels(&a.labels)?;
    let reference = io::read_labels(&a.reference)?;
    let field = match &a.field {
        Some(p) => Some(io::read_field(p)?),
        None => None,
    };
    let report = metrics::evaluate(&labels, &reference, field.as_ref())?;
    emit_json(&report, a.out.as_ref())
}
