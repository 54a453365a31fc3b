//! Learning-rate and phase schedules: constant lr until the decay epoch then
//! linear to zero at the final boundary; attention networks train only for an
//! initial window; discriminators switch from whole images to
//! background-masked real inputs after their own window.

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Scheduled learning rate. `epoch == epochs` is the terminal boundary and
/// yields exactly zero.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch > config.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} out of range for a {}-epoch schedule",
            config.epochs
        )));
    }
    let decay_start = config.decay_start();
    if epoch < decay_start {
        Ok(config.lr)
    } else {
        let span = (config.epochs - decay_start) as f64;
        Ok(config.lr * (config.epochs - epoch) as f64 / span)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhaseFlags {
    /// Attention parameters stop updating at/after the threshold epoch.
    pub attention_frozen: bool,
    /// Discriminators see background-masked real images at/after the
    /// threshold epoch.
    pub disc_masked: bool,
}

pub fn phase_flags(epoch: usize, config: &TrainConfig) -> PhaseFlags {
    PhaseFlags {
        attention_frozen: epoch >= config.attention_epochs(),
        disc_masked: epoch >= config.disc_whole_image(),
    }
}
