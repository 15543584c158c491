use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sample_beta, sample_glow_sources, sample_light, sample_q, synthesize_example};
use super::{SceneParams, SynthesisConfig, SynthesizedExample};
use crate::atmospherics::GlowSource;
use crate::error::{Error, Result};
use crate::image::{DepthMap, Plane, RadianceImage};
use crate::pnm;

/// A clean image with its depth map, before resizing.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub id: String,
    pub clean: RadianceImage,
    pub depth: DepthMap,
}

/// Where `build_dataset` gets its clean/depth pairs.
#[derive(Debug, Clone)]
pub enum PairSource {
    /// `count` procedural scenes drawn from the config seed.
    Procedural { count: usize },
    /// `<stem>.ppm` files, each with a `<stem>.depth.pgm` next to it.
    Directory(PathBuf),
}

impl PairSource {
    pub fn load(&self, config: &SynthesisConfig) -> Result<Vec<ScenePair>> {
        match self {
            PairSource::Procedural { count } => procedural_pairs(*count, config),
            PairSource::Directory(dir) => load_pairs_dir(dir),
        }
    }
}

fn pair_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn procedural_pairs(count: usize, config: &SynthesisConfig) -> Result<Vec<ScenePair>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            // scene streams live above the record streams
            let mut rng = pair_rng(config.rng_seed, (1 << 32) + i as u64);
            let (clean, depth) = super::procedural_pair(&mut rng, config.height, config.width)?;
            Ok(ScenePair {
                id: format!("scene{i:05}"),
                clean,
                depth,
            })
        })
        .collect()
}

/// Reads every `<stem>.ppm` in `dir` (sorted by name) together with
/// `<stem>.depth.pgm`.
pub fn load_pairs_dir(dir: &Path) -> Result<Vec<ScenePair>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!(
            "no .ppm clean images in {}",
            dir.display()
        )));
    }
    stems
        .into_par_iter()
        .map(|stem| {
            let clean = pnm::read_ppm(&dir.join(format!("{stem}.ppm")))?;
            let depth_path = dir.join(format!("{stem}.depth.pgm"));
            let depth = pnm::read_pgm(&depth_path)?;
            if !clean.same_size(depth.height(), depth.width()) {
                return Err(Error::format(
                    depth_path,
                    "depth size differs from its clean image",
                ));
            }
            Ok(ScenePair {
                id: stem,
                clean,
                depth: DepthMap::new(depth),
            })
        })
        .collect()
}

/// One manifest line: the record id, layer file names relative to the
/// manifest directory, and the sampled parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub hazy: String,
    pub haze: String,
    pub clean: String,
    pub trans: String,
    pub mask: String,
    pub streak: String,
    pub beta: f64,
    pub q: f64,
    pub light: [f64; 3],
    pub sources: Vec<(usize, usize)>,
}

impl DatasetRecord {
    fn for_id(id: String, params: &SceneParams, sources: &[GlowSource]) -> Self {
        Self {
            hazy: format!("{id}.hazy.ppm"),
            haze: format!("{id}.haze.ppm"),
            clean: format!("{id}.clean.ppm"),
            trans: format!("{id}.trans.pgm"),
            mask: format!("{id}.mask.pgm"),
            streak: format!("{id}.streak.ppm"),
            beta: params.beta,
            q: params.q,
            light: params.light.rgb(),
            sources: sources.iter().map(|s| (s.y, s.x)).collect(),
            id,
        }
    }

    pub fn to_line(&self) -> String {
        let mut line = format!(
            "id={} hazy={} haze={} clean={} trans={} mask={} streak={} beta={} q={} light={},{},{} sources=",
            self.id,
            self.hazy,
            self.haze,
            self.clean,
            self.trans,
            self.mask,
            self.streak,
            self.beta,
            self.q,
            self.light[0],
            self.light[1],
            self.light[2]
        );
        for (i, (y, x)) in self.sources.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            let _ = write!(line, "{y}:{x}");
        }
        line
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let get = {
            let fields: Vec<(&str, &str)> = line
                .split_whitespace()
                .map(|kv| {
                    kv.split_once('=')
                        .ok_or_else(|| format!("field `{kv}` lacks `=`"))
                })
                .collect::<Result<_, _>>()?;
            move |key: &str| {
                fields
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| v.to_string())
                    .ok_or_else(|| format!("missing field `{key}`"))
            }
        };
        let float = |s: String, key: &str| s.parse::<f64>().map_err(|_| format!("bad {key} `{s}`"));
        let light: Vec<f64> = get("light")?
            .split(',')
            .map(|v| float(v.to_string(), "light"))
            .collect::<Result<_, _>>()?;
        let light: [f64; 3] = light
            .try_into()
            .map_err(|_| "light needs 3 components".to_string())?;
        let sources_field = get("sources")?;
        let sources = if sources_field.is_empty() {
            Vec::new()
        } else {
            sources_field
                .split(',')
                .map(|p| {
                    let (y, x) = p
                        .split_once(':')
                        .ok_or_else(|| format!("bad source `{p}`"))?;
                    Ok((
                        y.parse().map_err(|_| format!("bad source `{p}`"))?,
                        x.parse().map_err(|_| format!("bad source `{p}`"))?,
                    ))
                })
                .collect::<Result<_, String>>()?
        };
        Ok(Self {
            id: get("id")?,
            hazy: get("hazy")?,
            haze: get("haze")?,
            clean: get("clean")?,
            trans: get("trans")?,
            mask: get("mask")?,
            streak: get("streak")?,
            beta: float(get("beta")?, "beta")?,
            q: float(get("q")?, "q")?,
            light,
            sources,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<DatasetRecord>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.txt";

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| DatasetRecord::parse_line(l).map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map_err(|r| Error::format(path, r))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE_NAME);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Flat training layers of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordLayers {
    pub hazy: RadianceImage,
    pub haze: RadianceImage,
    pub clean: RadianceImage,
    pub transmission: Plane,
    pub mask: Plane,
    /// Clamped sum of the streak layers.
    pub streak: RadianceImage,
}

impl RecordLayers {
    pub fn load(dir: &Path, record: &DatasetRecord) -> Result<Self> {
        Ok(Self {
            hazy: pnm::read_ppm(&dir.join(&record.hazy))?,
            haze: pnm::read_ppm(&dir.join(&record.haze))?,
            clean: pnm::read_ppm(&dir.join(&record.clean))?,
            transmission: pnm::read_pgm(&dir.join(&record.trans))?,
            mask: pnm::read_pgm(&dir.join(&record.mask))?,
            streak: pnm::read_ppm(&dir.join(&record.streak))?,
        })
    }

    pub fn load_all(dir: &Path, manifest: &Manifest) -> Result<Vec<Self>> {
        manifest
            .records
            .par_iter()
            .map(|r| Self::load(dir, r))
            .collect()
    }

    pub fn write(&self, dir: &Path, record: &DatasetRecord) -> Result<()> {
        pnm::write_ppm(&dir.join(&record.hazy), &self.hazy)?;
        pnm::write_ppm(&dir.join(&record.haze), &self.haze)?;
        pnm::write_ppm(&dir.join(&record.clean), &self.clean)?;
        pnm::write_pgm16(&dir.join(&record.trans), &self.transmission)?;
        pnm::write_pgm16(&dir.join(&record.mask), &self.mask)?;
        pnm::write_ppm(&dir.join(&record.streak), &self.streak)
    }
}

/// A record generated in memory, with the full glow decomposition.
#[derive(Debug, Clone)]
pub struct GeneratedRecord {
    pub record: DatasetRecord,
    pub clean: RadianceImage,
    pub example: SynthesizedExample,
}

impl GeneratedRecord {
    pub fn layers(&self) -> RecordLayers {
        RecordLayers {
            hazy: self.example.hazy.clone(),
            haze: self.example.haze.clone(),
            clean: self.clean.clone(),
            transmission: self.example.transmission.plane().clone(),
            mask: self.example.glow.mask().clone(),
            streak: self.example.glow.streak_target(),
        }
    }
}

/// The records of one pair: `beta_samples x q_samples` observations sharing
/// the resized scene and its light sources. Each beta draw carries its own
/// airlight.
fn records_for_pair(
    index: usize,
    pair: &ScenePair,
    config: &SynthesisConfig,
) -> Result<Vec<GeneratedRecord>> {
    let (h, w) = (config.height, config.width);
    let (clean, depth) = if pair.clean.same_size(h, w) && pair.depth.plane().same_size(h, w) {
        (pair.clean.clone(), pair.depth.clone())
    } else {
        let mut clean = pair.clean.resize_bilinear(h, w)?;
        clean.clamp01();
        let mut depth = pair.depth.plane().resize_bilinear(h, w)?;
        depth
            .data_mut()
            .iter_mut()
            .for_each(|d| *d = d.clamp(0.0, 1.0));
        (clean, DepthMap::new(depth))
    };
    let mut rng = pair_rng(config.rng_seed, index as u64);
    let media: Vec<(f64, _)> = (0..config.beta_samples_per_image)
        .map(|_| {
            (
                sample_beta(&mut rng, config),
                sample_light(&mut rng, config),
            )
        })
        .collect();
    let qs: Vec<f64> = (0..config.q_samples_per_image)
        .map(|_| sample_q(&mut rng, config))
        .collect();
    let layout = sample_glow_sources(&mut rng, h, w, qs[0], config);

    let mut out = Vec::with_capacity(config.records_per_pair());
    for (bi, &(beta, light)) in media.iter().enumerate() {
        for (qi, &q) in qs.iter().enumerate() {
            let params = SceneParams { beta, q, light };
            let sources: Vec<GlowSource> = layout.iter().map(|s| GlowSource { q, ..*s }).collect();
            let example = synthesize_example(&clean, &depth, &params, &sources, config)
                .map_err(|e| Error::Data(format!("pair `{}`: {e}", pair.id)))?;
            let id = format!("{}_b{bi}_q{qi}", pair.id);
            out.push(GeneratedRecord {
                record: DatasetRecord::for_id(id, &params, &sources),
                clean: clean.clone(),
                example,
            });
        }
    }
    Ok(out)
}

/// Generates every record in memory. The order is pair-major, then beta,
/// then q; it does not depend on the thread count.
pub fn generate_records(
    pairs: &[ScenePair],
    config: &SynthesisConfig,
) -> Result<Vec<GeneratedRecord>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data(
            "dataset needs at least one clean/depth pair".into(),
        ));
    }
    let nested: Vec<Vec<GeneratedRecord>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| records_for_pair(i, p, config))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Synthesizes all records, writes their layers and `manifest.txt` into
/// `out_dir`, and returns the manifest.
pub fn build_dataset(
    pairs: &[ScenePair],
    config: &SynthesisConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data(
            "dataset needs at least one clean/depth pair".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let nested: Vec<Vec<DatasetRecord>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let generated = records_for_pair(i, p, config)?;
            generated
                .into_iter()
                .map(|g| {
                    g.layers().write(out_dir, &g.record)?;
                    Ok(g.record)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        records: nested.into_iter().flatten().collect(),
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atmospherics::{recover_radiance, AtmosphericLight};
    use crate::image::TransmissionMap;

    fn cfg(betas: usize, qs: usize) -> SynthesisConfig {
        SynthesisConfig {
            beta_samples_per_image: betas,
            q_samples_per_image: qs,
            ..SynthesisConfig::desk(20, 11)
        }
    }

    #[test]
    fn record_count_is_the_grid_product() {
        let c = cfg(3, 3);
        let pairs = PairSource::Procedural { count: 2 }.load(&c).unwrap();
        assert_eq!(generate_records(&pairs, &c).unwrap().len(), 18);
        let c = cfg(1, 1);
        assert_eq!(generate_records(&pairs[..1], &c).unwrap().len(), 1);
    }

    #[test]
    fn empty_pair_list_is_rejected() {
        assert!(generate_records(&[], &cfg(1, 1)).is_err());
    }

    #[test]
    fn records_satisfy_layer_invariants() {
        let c = cfg(2, 2);
        let pairs = PairSource::Procedural { count: 3 }.load(&c).unwrap();
        for g in generate_records(&pairs, &c).unwrap() {
            let r = &g.record;
            assert!((0.5..1.5).contains(&r.beta) && (0.2..0.9).contains(&r.q));
            let t = g.example.transmission.data();
            assert!(t.iter().all(|&v| v > 0.0 && v <= 1.0));
            assert!(g
                .example
                .glow
                .mask()
                .data()
                .iter()
                .all(|&m| m == 0.0 || m == 1.0));
            for s in g.example.glow.streaks() {
                assert!(s.data().iter().all(|&v| v >= 0.0));
            }
            let light = AtmosphericLight::new(r.light).unwrap();
            let back =
                recover_radiance(&g.example.haze, &g.example.transmission, light, 0.05).unwrap();
            for (i, (a, b)) in back.data().iter().zip(g.clean.data()).enumerate() {
                if t[i / 3] >= 0.05 {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn resizes_foreign_pairs() {
        let c = cfg(1, 1);
        let pair = ScenePair {
            id: "big".into(),
            clean: RadianceImage::filled(37, 41, [0.3, 0.4, 0.5]).unwrap(),
            depth: DepthMap::new(Plane::filled(37, 41, 0.5).unwrap()),
        };
        let g = &generate_records(&[pair], &c).unwrap()[0];
        assert_eq!((g.clean.height(), g.clean.width()), (20, 20));
        let t = TransmissionMap::new(Plane::filled(20, 20, (-g.record.beta * 0.5).exp()).unwrap())
            .unwrap();
        assert!(g
            .example
            .transmission
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn manifest_line_round_trip() {
        let r = DatasetRecord {
            id: "a_b0_q1".into(),
            hazy: "a.hazy.ppm".into(),
            haze: "a.haze.ppm".into(),
            clean: "a.clean.ppm".into(),
            trans: "a.trans.pgm".into(),
            mask: "a.mask.pgm".into(),
            streak: "a.streak.ppm".into(),
            beta: 0.123456789012345,
            q: 0.7,
            light: [0.61, 0.61, 0.61],
            sources: vec![(3, 4), (10, 0)],
        };
        let back = DatasetRecord::parse_line(&r.to_line()).unwrap();
        assert_eq!(back, r);
        let none = DatasetRecord {
            sources: vec![],
            ..r
        };
        assert_eq!(DatasetRecord::parse_line(&none.to_line()).unwrap(), none);
        assert!(DatasetRecord::parse_line("id=x hazy").is_err());
    }

    #[test]
    fn build_is_byte_deterministic_and_reloads() {
        let c = cfg(2, 1);
        let pairs = PairSource::Procedural { count: 2 }.load(&c).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = build_dataset(&pairs, &c, a.path()).unwrap();
        let mb = build_dataset(&pairs, &c, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.len(), 4);
        let mut names: Vec<_> = std::fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 4 * 6 + 1);
        for n in names {
            assert_eq!(
                std::fs::read(a.path().join(&n)).unwrap(),
                std::fs::read(b.path().join(&n)).unwrap()
            );
        }
        assert_eq!(Manifest::read(a.path()).unwrap(), ma);
        let layers = RecordLayers::load_all(a.path(), &ma).unwrap();
        assert_eq!(layers.len(), 4);
        assert_eq!(layers[0].hazy.height(), 20);
    }

    #[test]
    fn directory_source_names_missing_depth() {
        let dir = tempfile::tempdir().unwrap();
        pnm::write_ppm(
            &dir.path().join("x.ppm"),
            &RadianceImage::filled(16, 16, [0.5; 3]).unwrap(),
        )
        .unwrap();
        let err = load_pairs_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("x.depth.pgm"), "{err}");
    }
}
