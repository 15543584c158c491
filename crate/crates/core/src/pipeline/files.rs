use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{run_pipeline, InferenceConfig, Models, RunArtifacts, StageHooks};
use crate::atmospherics::{recover_radiance, AtmosphericLight};
use crate::error::{Error, Result};
use crate::image::{RadianceImage, TransmissionMap};
use crate::metrics::QualityReport;
use crate::pnm;

/// Suffixes the pipeline writes next to its outputs. Inputs carrying one of
/// them are skipped in directory mode.
const PRODUCT_SUFFIXES: [&str; 2] = [".out.ppm", ".deglow.ppm"];

/// Output and intermediate file names for one input stem.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpPaths {
    pub output: PathBuf,
    pub deglowed: PathBuf,
    pub transmission: PathBuf,
    pub light: PathBuf,
}

impl DumpPaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self {
            output: dir.join(format!("{stem}.out.ppm")),
            deglowed: dir.join(format!("{stem}.deglow.ppm")),
            transmission: dir.join(format!("{stem}.trans.pgm")),
            light: dir.join(format!("{stem}.light.txt")),
        }
    }
}

fn stem_of(path: &Path) -> Result<String> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::format(path, "file name is not UTF-8"))?;
    Ok(name.strip_suffix(".ppm").unwrap_or(name).to_string())
}

/// `*.ppm` files of `dir` in name order, excluding pipeline products.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".ppm") && !PRODUCT_SUFFIXES.iter().any(|s| name.ends_with(s)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Full-precision `r g b` on one line.
pub fn write_light(path: &Path, light: AtmosphericLight) -> Result<()> {
    let [r, g, b] = light.rgb();
    std::fs::write(path, format!("{r:?} {g:?} {b:?}\n")).map_err(|e| Error::io(path, e))
}

pub fn read_light(path: &Path) -> Result<AtmosphericLight> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let rgb: [f64; 3] = vals.try_into().map_err(|v: Vec<f64>| {
        Error::format(path, format!("expected 3 values, found {}", v.len()))
    })?;
    AtmosphericLight::new(rgb).map_err(|e| Error::format(path, e.to_string()))
}

/// Runs one image and writes `<stem>.out.ppm` into `out_dir`, plus the
/// deglowed image, transmission and light when `dump` is set.
pub fn run_file(
    input: &Path,
    out_dir: &Path,
    models: &Models,
    config: &InferenceConfig,
    dump: bool,
) -> Result<RunArtifacts> {
    let image = pnm::read_ppm(input).map_err(|e| e.in_stage("read"))?;
    let artifacts = run_pipeline(&image, models, config, &StageHooks::default())?;
    let paths = DumpPaths::new(out_dir, &stem_of(input)?);
    let write = || -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        pnm::write_ppm(&paths.output, &artifacts.output)?;
        if dump {
            pnm::write_ppm16(&paths.deglowed, &artifacts.deglowed)?;
            pnm::write_pgm16(&paths.transmission, artifacts.transmission.plane())?;
            write_light(&paths.light, artifacts.light)?;
        }
        Ok(())
    };
    write().map_err(|e| e.in_stage("write"))?;
    Ok(artifacts)
}

/// [`run_file`] over every image of `input_dir`, `config.threads` at a time.
pub fn run_dir(
    input_dir: &Path,
    out_dir: &Path,
    models: &Models,
    config: &InferenceConfig,
    dump: bool,
) -> Result<Vec<(PathBuf, RunArtifacts)>> {
    let inputs = list_images(input_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        inputs
            .par_iter()
            .map(|p| run_file(p, out_dir, models, config, dump).map(|a| (p.clone(), a)))
            .collect()
    })
}

/// Recomputes the final image of `stem` from its dumped intermediates.
pub fn recover_from_dumps(dir: &Path, stem: &str, t_min: f64) -> Result<RadianceImage> {
    let paths = DumpPaths::new(dir, stem);
    let deglowed = pnm::read_ppm(&paths.deglowed)?;
    let plane = pnm::read_pgm(&paths.transmission)?;
    let t = TransmissionMap::new(plane)
        .map_err(|e| Error::format(&paths.transmission, e.to_string()))?;
    let light = read_light(&paths.light)?;
    recover_radiance(&deglowed, &t, light, t_min)
}

/// Scores every `<stem>.ppm` of `truth_dir` against `<stem>.out.ppm` in
/// `pred_dir`, or `<stem>.ppm` when there is no pipeline output.
pub fn evaluate_dirs(pred_dir: &Path, truth_dir: &Path) -> Result<QualityReport> {
    let truths = list_images(truth_dir)?;
    if truths.is_empty() {
        return Err(Error::Data(format!(
            "no .ppm images in {}",
            truth_dir.display()
        )));
    }
    let rows: Vec<(String, RadianceImage, RadianceImage)> = truths
        .par_iter()
        .map(|t| {
            let stem = stem_of(t)?;
            let out = pred_dir.join(format!("{stem}.out.ppm"));
            let pred = if out.exists() {
                out
            } else {
                pred_dir.join(format!("{stem}.ppm"))
            };
            Ok((stem, pnm::read_ppm(&pred)?, pnm::read_ppm(t)?))
        })
        .collect::<Result<_>>()?;
    let mut report = QualityReport::default();
    for (stem, pred, truth) in &rows {
        report.push(stem.clone(), pred, truth)?;
    }
    Ok(report)
}
