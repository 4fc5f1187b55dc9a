//! Evaluation metrics and the experiment runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::field::{jacobian_stats, norm3, warp, warp_labels, DisplacementField, JacobianStats};
use crate::io::{self, Axis, VolumeFormat};
use crate::registration::{register, Registration, RegistrationConfig, RegistrationMode};
use crate::similarity::{l1_loss, lg_similarity, mi_metric, LossConfig};
use crate::synth::{ModalityRemapSpec, SyntheticDeformSpec, SyntheticPair};
use crate::translator::translate;
use crate::volume::{LabelMask, Volume3D};

/// Boundary margin excluded by default from endpoint errors.
pub const EPE_MARGIN: usize = 4;
pub const MI_BINS: usize = 32;

/// `100 * sqrt(mean((a - b)^2))`.
pub fn rmse_percent(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let ss: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(100.0 * (ss / a.len() as f64).sqrt())
}

/// Overlap `2|A ∩ B| / (|A| + |B|)` of one label; 1 when both are empty.
pub fn dice(a: &LabelMask, b: &LabelMask, label: u32) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean `||phi - gt||` over the non-zero voxels of `mask`, or over the
/// interior at [`EPE_MARGIN`] when no mask is given.
pub fn endpoint_error(
    phi: &DisplacementField,
    gt: &DisplacementField,
    mask: Option<&LabelMask>,
) -> Result<f64> {
    check_dims(phi.dims(), gt.dims())?;
    let default;
    let mask = match mask {
        Some(m) => {
            check_dims(phi.dims(), m.dims())?;
            m
        }
        None => {
            default = LabelMask::interior(phi.dims(), EPE_MARGIN);
            &default
        }
    };
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &m) in mask.data().iter().enumerate() {
        if m != 0 {
            let (a, b) = (phi.at(i), gt.at(i));
            sum += norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("endpoint error mask selects no voxels".into()));
    }
    Ok(sum / count as f64)
}

/// Files of one registration problem. Relative paths are resolved against
/// the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub reference: PathBuf,
    pub floating: PathBuf,
    /// Floating anatomy in the reference modality, used for RMSE when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floating_mono: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_field: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_reference: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_floating: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deform: Option<SyntheticDeformSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remap: Option<ModalityRemapSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PairManifest {
    pub fn new(reference: impl Into<PathBuf>, floating: impl Into<PathBuf>) -> Self {
        PairManifest {
            reference: reference.into(),
            floating: floating.into(),
            floating_mono: None,
            gt_field: None,
            mask_reference: None,
            mask_floating: None,
            deform: None,
            remap: None,
            seed: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: PairManifest = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            m.resolve(dir);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn resolve(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.reference);
        fix(&mut self.floating);
        for p in [
            &mut self.floating_mono,
            &mut self.gt_field,
            &mut self.mask_reference,
            &mut self.mask_floating,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

/// Writes every part of `pair` into `dir` in the raw format together with
/// `manifest.json`, and returns the manifest.
pub fn write_pair(
    pair: &SyntheticPair,
    dir: &Path,
    deform: &SyntheticDeformSpec,
    remap: &ModalityRemapSpec,
    seed: u64,
) -> Result<PairManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vol = |v: &Volume3D, name: &str| -> Result<PathBuf> {
        io::save_volume(v, &dir.join(name), VolumeFormat::Raw)?;
        Ok(PathBuf::from(name))
    };
    let mask = |m: &LabelMask, name: &str| -> Result<PathBuf> {
        io::save_mask(m, &dir.join(name))?;
        Ok(PathBuf::from(name))
    };
    io::save_field(&pair.gt, &dir.join("gt_field.raw"))?;
    let manifest = PairManifest {
        reference: vol(&pair.reference, "reference.raw")?,
        floating: vol(&pair.floating, "floating.raw")?,
        floating_mono: Some(vol(&pair.floating_mono, "floating_mono.raw")?),
        gt_field: Some(PathBuf::from("gt_field.raw")),
        mask_reference: Some(mask(&pair.mask_reference, "mask_reference.raw")?),
        mask_floating: Some(mask(&pair.mask_floating, "mask_floating.raw")?),
        deform: Some(*deform),
        remap: Some(remap.clone()),
        seed: Some(seed),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A registration problem held in memory.
#[derive(Debug, Clone)]
pub struct ExperimentInputs {
    pub reference: Volume3D,
    pub floating: Volume3D,
    pub floating_mono: Option<Volume3D>,
    pub gt: Option<DisplacementField>,
    pub mask_reference: Option<LabelMask>,
    pub mask_floating: Option<LabelMask>,
}

impl ExperimentInputs {
    pub fn load(manifest: &PairManifest) -> Result<Self> {
        let vol = |p: &Path| io::load_volume(p, VolumeFormat::from_path(p));
        let inputs = ExperimentInputs {
            reference: vol(&manifest.reference)?,
            floating: vol(&manifest.floating)?,
            floating_mono: manifest.floating_mono.as_deref().map(vol).transpose()?,
            gt: manifest.gt_field.as_deref().map(io::load_field).transpose()?,
            mask_reference: manifest.mask_reference.as_deref().map(io::load_mask).transpose()?,
            mask_floating: manifest.mask_floating.as_deref().map(io::load_mask).transpose()?,
        };
        inputs.check()?;
        Ok(inputs)
    }

    fn check(&self) -> Result<()> {
        let d = self.reference.dims();
        check_dims(d, self.floating.dims())?;
        if let Some(v) = &self.floating_mono {
            check_dims(d, v.dims())?;
        }
        if let Some(g) = &self.gt {
            check_dims(d, g.dims())?;
        }
        for m in [&self.mask_reference, &self.mask_floating].into_iter().flatten() {
            check_dims(d, m.dims())?;
        }
        if self.mask_reference.is_some() != self.mask_floating.is_some() {
            return Err(Error::Config("masks must be given for both volumes or neither".into()));
        }
        Ok(())
    }
}

impl From<SyntheticPair> for ExperimentInputs {
    fn from(p: SyntheticPair) -> Self {
        ExperimentInputs {
            reference: p.reference,
            floating: p.floating,
            floating_mono: Some(p.floating_mono),
            gt: Some(p.gt),
            mask_reference: Some(p.mask_reference),
            mask_floating: Some(p.mask_floating),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Metrics for a supplied field, without optimizing.
    MiReportOnly,
    LgOnly,
    FullAlternating,
}

impl Method {
    fn registration_mode(self) -> Option<RegistrationMode> {
        match self {
            Method::MiReportOnly => None,
            Method::LgOnly => Some(RegistrationMode::LgOnly),
            Method::FullAlternating => Some(RegistrationMode::FullAlternating),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::MiReportOnly => "mi_report_only",
            Method::LgOnly => "lg_only",
            Method::FullAlternating => "full_alternating",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mi_report_only" => Ok(Method::MiReportOnly),
            "lg_only" => Ok(Method::LgOnly),
            "full_alternating" => Ok(Method::FullAlternating),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Metrics of the floating volume under one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    /// Against the reference; uses the mono-modal floating volume when known.
    pub rmse_percent: f64,
    pub mutual_information: f64,
    /// Mean per-voxel local-gradient similarity.
    pub lg_similarity: f64,
    pub dice_per_label: BTreeMap<u32, f64>,
    pub mean_endpoint_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSeconds {
    pub register: f64,
    pub field_steps: f64,
    pub translator_steps: f64,
    /// Applying the final field once.
    pub warp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: Method,
    pub seed: u64,
    pub before: PairMetrics,
    pub after: PairMetrics,
    pub jacobian: JacobianStats,
    /// L1 between translated warped floating and reference, when a
    /// translator was trained.
    pub translator_l1: Option<f64>,
    pub runtime_seconds: RuntimeSeconds,
}

impl EvalResult {
    pub fn rmse_percent(&self) -> f64 {
        self.after.rmse_percent
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Volumes produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub result: EvalResult,
    pub field: DisplacementField,
    pub warped: Volume3D,
    pub translated: Option<Volume3D>,
    pub registration: Option<Registration>,
}

fn metrics(
    inputs: &ExperimentInputs,
    phi: &DisplacementField,
    warped: &Volume3D,
    loss: &LossConfig,
) -> Result<PairMetrics> {
    let mono = match &inputs.floating_mono {
        Some(m) => warp(m, phi)?,
        None => warped.clone(),
    };
    let mut dice_per_label = BTreeMap::new();
    if let (Some(mr), Some(mf)) = (&inputs.mask_reference, &inputs.mask_floating) {
        let moved = warp_labels(mf, phi)?;
        for label in mr.labels() {
            dice_per_label.insert(label, dice(mr, &moved, label)?);
        }
    }
    let n = warped.len() as f64;
    Ok(PairMetrics {
        rmse_percent: rmse_percent(&mono, &inputs.reference)?,
        mutual_information: mi_metric(&inputs.reference, warped, MI_BINS)?,
        lg_similarity: lg_similarity(&inputs.reference, warped, loss)?.value / n,
        dice_per_label,
        mean_endpoint_error: inputs.gt.as_ref().map(|g| endpoint_error(phi, g, None)).transpose()?,
    })
}

/// Registers (or, for [`Method::MiReportOnly`], only scores `field`) and
/// computes metrics before and after. With `out_dir`, writes `result.json`,
/// `trace.csv`, `field.raw`, `warped.raw`, `translated.raw`,
/// `translator.json` and mid-z PNG slices of the reference, floating, warped
/// and translated volumes.
pub fn run_experiment(
    inputs: &ExperimentInputs,
    cfg: &RegistrationConfig,
    method: Method,
    field: Option<&DisplacementField>,
    out_dir: Option<&Path>,
) -> Result<Experiment> {
    inputs.check().map_err(|e| e.in_stage("inputs"))?;
    let dims = inputs.reference.dims();
    let zero = DisplacementField::zeros(dims);
    let before = metrics(inputs, &zero, &inputs.floating, &cfg.loss)
        .map_err(|e| e.in_stage("initial metrics"))?;

    let mut runtime = RuntimeSeconds::default();
    let (phi, registration) = match method.registration_mode() {
        None => {
            let phi = field
                .cloned()
                .ok_or_else(|| Error::Config("mi_report_only needs a field".into()))?;
            check_dims(dims, phi.dims())?;
            (phi, None)
        }
        Some(mode) => {
            let cfg = RegistrationConfig { mode, ..cfg.clone() };
            let reg = register(&inputs.reference, &inputs.floating, &cfg)
                .map_err(|e| e.in_stage("registration"))?;
            runtime.register = reg.report.runtime.register_seconds;
            runtime.field_steps = reg.report.runtime.field_seconds;
            runtime.translator_steps = reg.report.runtime.translator_seconds;
            (reg.field.clone(), Some(reg))
        }
    };

    let t = Instant::now();
    let warped = warp(&inputs.floating, &phi)?;
    runtime.warp = t.elapsed().as_secs_f64();
    let after = metrics(inputs, &phi, &warped, &cfg.loss).map_err(|e| e.in_stage("final metrics"))?;
    let translated = match registration.as_ref().and_then(|r| r.translator.as_ref()) {
        Some(model) => Some(translate(model, &warped).map_err(|e| e.in_stage("translation"))?),
        None => None,
    };
    let translator_l1 = translated
        .as_ref()
        .map(|t| l1_loss(t, &inputs.reference).map(|l| l.value))
        .transpose()?;

    let result = EvalResult {
        method,
        seed: cfg.seed,
        before,
        after,
        jacobian: jacobian_stats(&phi),
        translator_l1,
        runtime_seconds: runtime,
    };
    let experiment = Experiment {
        result,
        field: phi,
        warped,
        translated,
        registration,
    };
    if let Some(dir) = out_dir {
        write_artifacts(&experiment, inputs, dir).map_err(|e| e.in_stage("writing artifacts"))?;
    }
    Ok(experiment)
}

fn write_artifacts(exp: &Experiment, inputs: &ExperimentInputs, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let result_path = dir.join("result.json");
    fs::write(&result_path, exp.result.to_json()?).map_err(|e| Error::io(&result_path, e))?;
    io::save_field(&exp.field, &dir.join("field.raw"))?;
    io::save_volume(&exp.warped, &dir.join("warped.raw"), VolumeFormat::Raw)?;
    if let Some(reg) = &exp.registration {
        reg.report.write_trace_csv(&dir.join("trace.csv"))?;
        if let Some(model) = &reg.translator {
            let path = dir.join("translator.json");
            fs::write(&path, model.to_json()?).map_err(|e| Error::io(&path, e))?;
        }
    }
    let mid = inputs.reference.dims().axis(2) / 2;
    let mut panels = vec![
        ("reference", &inputs.reference),
        ("floating", &inputs.floating),
        ("warped", &exp.warped),
    ];
    if let Some(t) = &exp.translated {
        io::save_volume(t, &dir.join("translated.raw"), VolumeFormat::Raw)?;
        panels.push(("translated", t));
    }
    for (name, vol) in panels {
        io::export_slice(vol, Axis::Z, mid, &dir.join(format!("{name}_z{mid}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(dims, |_, _, _| rng.random())
    }

    #[test]
    fn rmse_examples() {
        let d = Dims::new(5, 4, 3);
        let a = random_volume(d, 1);
        assert_eq!(rmse_percent(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1).unwrap();
        assert!((rmse_percent(&a, &b).unwrap() - 10.0).abs() < 1e-9);
        let c = random_volume(d, 2);
        let mut ss = 0.0;
        for i in 0..a.len() {
            ss += (a.data()[i] - c.data()[i]).powi(2);
        }
        let oracle = 100.0 * (ss / a.len() as f64).sqrt();
        assert!((rmse_percent(&a, &c).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(rmse_percent(&a, &c).unwrap(), rmse_percent(&c, &a).unwrap());
        assert!(rmse_percent(&a, &Volume3D::zeros(Dims::cube(2))).is_err());
    }

    #[test]
    fn dice_examples() {
        let d = Dims::cube(8);
        let cube = |x0: usize| LabelMask::from_fn(d, |x, y, z| (x >= x0 && x < x0 + 4 && y < 4 && z < 4) as u32);
        let a = cube(0);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &cube(4), 1).unwrap(), 0.0);
        // 32 of 64 voxels shared
        assert_eq!(dice(&a, &cube(2), 1).unwrap(), 0.5);
        assert_eq!(dice(&cube(2), &a, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &a, 7).unwrap(), 1.0);
    }

    #[test]
    fn endpoint_error_examples() {
        let d = Dims::cube(12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_field = || DisplacementField::from_fn(d, |_, _, _| std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
        let (a, b) = (rand_field(), rand_field());
        assert_eq!(endpoint_error(&a, &a, None).unwrap(), 0.0);
        let shifted = a.add(&DisplacementField::constant(d, [1.0, 0.0, 0.0])).unwrap();
        assert!((endpoint_error(&shifted, &a, None).unwrap() - 1.0).abs() < 1e-12);

        let (mut sum, mut n) = (0.0, 0);
        for z in EPE_MARGIN..12 - EPE_MARGIN {
            for y in EPE_MARGIN..12 - EPE_MARGIN {
                for x in EPE_MARGIN..12 - EPE_MARGIN {
                    let i = d.index(x, y, z);
                    let (p, q) = (a.at(i), b.at(i));
                    sum += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                    n += 1;
                }
            }
        }
        let e = endpoint_error(&a, &b, None).unwrap();
        assert!((e - sum / n as f64).abs() < 1e-12);
        assert_eq!(e, endpoint_error(&b, &a, None).unwrap());
        assert!(endpoint_error(&a, &b, Some(&LabelMask::zeros(d))).is_err());
    }

    #[test]
    fn method_names() {
        for (s, m) in [
            ("mi_report_only", Method::MiReportOnly),
            ("lg_only", Method::LgOnly),
            ("full_alternating", Method::FullAlternating),
        ] {
            assert_eq!(s.parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{s}\""));
        }
        assert!("mi".parse::<Method>().is_err());
    }

    #[test]
    fn report_only_needs_a_field() {
        let d = Dims::cube(16);
        let v = random_volume(d, 4);
        let inputs = ExperimentInputs {
            reference: v.clone(),
            floating: v,
            floating_mono: None,
            gt: None,
            mask_reference: None,
            mask_floating: None,
        };
        let cfg = RegistrationConfig::default();
        let err = run_experiment(&inputs, &cfg, Method::MiReportOnly, None, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let zero = DisplacementField::zeros(d);
        let exp = run_experiment(&inputs, &cfg, Method::MiReportOnly, Some(&zero), None).unwrap();
        assert_eq!(exp.result.before, exp.result.after);
        assert_eq!(exp.result.after.rmse_percent, 0.0);
        assert!(exp.translated.is_none());
    }
}
