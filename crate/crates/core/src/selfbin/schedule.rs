use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometric sharpening schedule `nu_e = nu_start * (nu_end / nu_start)^(e / M)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuSchedule {
    pub nu_start: f64,
    pub nu_end: f64,
    pub total_epochs: usize,
}

impl NuSchedule {
    pub fn new(nu_start: f64, nu_end: f64, total_epochs: usize) -> Result<Self> {
        if !(nu_start > 0.0 && nu_end >= nu_start && nu_end.is_finite()) {
            return Err(Error::Config(format!(
                "schedule endpoints must satisfy 0 < nu_start <= nu_end, got {nu_start}..{nu_end}"
            )));
        }
        Ok(Self {
            nu_start,
            nu_end,
            total_epochs,
        })
    }

    /// Schedule for a run of `epochs` training epochs, with the last epoch at `nu_end`.
    pub fn for_epochs(nu_start: f64, nu_end: f64, epochs: usize) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Self::new(nu_start, nu_end, epochs - 1)
    }

    pub fn nu_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::OutOfRange {
                epoch,
                max: self.total_epochs,
            });
        }
        // a single-epoch run trains directly at the final sharpness
        if self.total_epochs == 0 || epoch == self.total_epochs {
            return Ok(self.nu_end);
        }
        if epoch == 0 {
            return Ok(self.nu_start);
        }
        let frac = epoch as f64 / self.total_epochs as f64;
        Ok(self.nu_start * (self.nu_end / self.nu_start).powf(frac))
    }
}
