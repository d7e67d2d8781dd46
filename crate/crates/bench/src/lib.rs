use cwm_core::training::{Condition, Models, Trainer, TrainingConfig};
use cwm_core::{environment, Bins, Dataset, EnvConfig};

/// Episode length used by the benchmarks.
pub const STEPS: usize = 50;

pub fn env(bins: Bins) -> EnvConfig {
    EnvConfig {
        bins,
        episode_length: STEPS,
        ..EnvConfig::default()
    }
}

pub fn dataset(bins: Bins, episodes: usize) -> Dataset {
    environment::generate_dataset(&env(bins), episodes).expect("dataset")
}

pub fn trainer(condition: Condition, batch_size: usize) -> Trainer<f32> {
    Trainer::new(TrainingConfig {
        condition,
        batch_size,
        epochs: 1,
        ..TrainingConfig::default()
    })
    .expect("trainer")
}

pub fn models(condition: Condition) -> Models<f32> {
    Models::init(condition, &condition.model_config(), 0).expect("models")
}
