//! Dataset selection shared by the commands that train or evaluate.

use std::path::PathBuf;

use ap3d::traineval::data::{generate_synthetic, import, Dataset, Jitter, SynthConfig};
use clap::Args;

use crate::config::{usage, CliResult};

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Directory written by `synth`; synthetic data is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic identities.
    #[arg(long)]
    pub ids: Option<usize>,
    #[arg(long)]
    pub tracklets_per_id: Option<usize>,
    /// Frames per synthetic tracklet.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Render static tracklets.
    #[arg(long)]
    pub no_jitter: bool,
}

impl DataArgs {
    pub fn apply(&self, data: &mut Option<PathBuf>, synth: &mut SynthConfig) {
        if let Some(d) = &self.data {
            *data = Some(d.clone());
        }
        apply_synth(synth, self.ids, self.tracklets_per_id, self.frames, self.data_seed, self.no_jitter);
    }
}

pub fn apply_synth(
    synth: &mut SynthConfig,
    ids: Option<usize>,
    tracklets: Option<usize>,
    frames: Option<usize>,
    seed: Option<u64>,
    no_jitter: bool,
) {
    if let Some(v) = ids {
        synth.num_identities = v;
    }
    if let Some(v) = tracklets {
        synth.tracklets_per_id = v;
    }
    if let Some(v) = frames {
        synth.frames_per_tracklet = v;
    }
    if let Some(v) = seed {
        synth.seed = v;
    }
    if no_jitter {
        synth.jitter = Jitter::none();
    }
}

pub fn load(data: Option<&PathBuf>, synth: &SynthConfig) -> CliResult<Dataset> {
    Ok(match data {
        Some(dir) => import(dir)?,
        None => generate_synthetic(synth)?,
    })
}

/// Train/test split holding out the last `held_out` tracklets per identity.
pub fn load_split(data: Option<&PathBuf>, synth: &SynthConfig, held_out: usize) -> CliResult<(Dataset, Dataset)> {
    let all = load(data, synth)?;
    if all.tracklets.is_empty() {
        return Err(usage("dataset has no tracklets"));
    }
    Ok(all.split(held_out)?)
}

/// Identities in the training split; the classifier gets one class each.
pub fn num_classes(train: &Dataset) -> usize {
    train.person_ids().len()
}
