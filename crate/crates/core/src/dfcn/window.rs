use serde::{Deserialize, Serialize};

use super::RoiTimeSeries;
use crate::error::{Error, Result};

/// Window length `L` and stride `s`, both in time points. The window count
/// `T = ⌊(M − L)/s⌋ + 1` always follows from the series length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub length: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { length: 70, stride: 2 }
    }
}

impl WindowSpec {
    pub fn new(length: usize, stride: usize) -> Self {
        WindowSpec { length, stride }
    }

    /// Number of windows over a series of `time_points` rows.
    pub fn count(&self, time_points: usize) -> Result<usize> {
        if self.length < 2 {
            return Err(Error::config(format!("window length {} must be at least 2", self.length)));
        }
        if self.stride == 0 {
            return Err(Error::config("window stride must be at least 1"));
        }
        if self.length > time_points {
            return Err(Error::config(format!(
                "window length {} exceeds series length {time_points}",
                self.length
            )));
        }
        Ok((time_points - self.length) / self.stride + 1)
    }
}

/// Row-major `L×N` views; window `t` covers rows `[t·s, t·s + L)`.
pub fn segment_windows<'a>(ts: &'a RoiTimeSeries, spec: &WindowSpec) -> Result<Vec<&'a [f64]>> {
    let count = spec.count(ts.time_points())?;
    let n = ts.regions();
    Ok((0..count)
        .map(|t| {
            let start = t * spec.stride * n;
            &ts.values[start..start + spec.length * n]
        })
        .collect())
}
