use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PipelineConfig;
use crate::error::Result;
use crate::networks::{train, DeGlowModel, DeHazeModel, Sample, TrainReport};
use crate::synthesis::{generate_records, Manifest, RecordLayers};

/// Record layers split into training and validation parts.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub train: Vec<RecordLayers>,
    pub validation: Vec<RecordLayers>,
}

/// Every `every`-th item (1-based) goes to the second part; `every == 0`
/// keeps everything in the first.
pub fn holdout_split<T>(items: Vec<T>, every: usize) -> (Vec<T>, Vec<T>) {
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for (i, item) in items.into_iter().enumerate() {
        if every > 0 && (i + 1) % every == 0 {
            held.push(item);
        } else {
            keep.push(item);
        }
    }
    (keep, held)
}

/// Records from a built dataset directory, or synthesized in memory from the
/// config's pair source when `data_dir` is `None`.
pub fn load_training_set(config: &PipelineConfig, data_dir: Option<&Path>) -> Result<TrainingSet> {
    let layers = match data_dir {
        Some(dir) => RecordLayers::load_all(dir, &Manifest::read(dir)?)?,
        None => {
            let pairs = config.dataset.source().load(&config.synthesis)?;
            generate_records(&pairs, &config.synthesis)?
                .iter()
                .map(|g| g.layers())
                .collect()
        }
    };
    let (train, validation) = holdout_split(layers, config.dataset.holdout_every);
    Ok(TrainingSet { train, validation })
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn train_deglow(
    config: &PipelineConfig,
    set: &TrainingSet,
    out_dir: Option<&Path>,
) -> Result<(DeGlowModel, TrainReport)> {
    let schedule = &config.train_deglow;
    let mut model = DeGlowModel::new(config.network, &mut init_rng(schedule.seed))?;
    let samples: Vec<Sample> = set.train.iter().map(Sample::deglow).collect();
    let validation: Vec<Sample> = set.validation.iter().map(Sample::deglow).collect();
    let report = train(&mut model, &samples, &validation, schedule, out_dir)?;
    Ok((model, report))
}

pub fn train_dehaze(
    config: &PipelineConfig,
    set: &TrainingSet,
    out_dir: Option<&Path>,
) -> Result<(DeHazeModel, TrainReport)> {
    let schedule = &config.train_dehaze;
    let mut model = DeHazeModel::new(config.network, &mut init_rng(schedule.seed))?;
    let samples: Vec<Sample> = set.train.iter().map(Sample::dehaze).collect();
    let validation: Vec<Sample> = set.validation.iter().map(Sample::dehaze).collect();
    let report = train(&mut model, &samples, &validation, schedule, out_dir)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_takes_every_nth() {
        let (a, b) = holdout_split((1..=10).collect(), 3);
        assert_eq!(b, vec![3, 6, 9]);
        assert_eq!(a, vec![1, 2, 4, 5, 7, 8, 10]);
        let (a, b) = holdout_split(vec![1, 2], 0);
        assert_eq!((a.len(), b.len()), (2, 0));
    }
}
