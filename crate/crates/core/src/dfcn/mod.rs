//! Sliding-window dynamic functional connectivity.
//!
//! A scan's region-averaged time series is cut into `T` overlapping windows
//! of `L` time points and each window becomes an `N×N` Pearson correlation
//! matrix. The stacked `T×N×N` result is the classifier input.

mod format;
mod pearson;
mod timeseries;
mod window;

pub use format::{decode_dfcn, encode_dfcn, read_dfcn, write_dfcn, DFCN_MAGIC, DFCN_VERSION};
pub use pearson::{pearson_matrix, CorrelationMatrix};
pub use timeseries::{
    load_dataset, load_timeseries, manifest_class_names, write_dataset, write_timeseries, LabelMap, RoiTimeSeries, ScanMeta, DATASET_MANIFEST,
};
pub use window::{segment_windows, WindowSpec};

use crate::error::Result;
use crate::tensor::Tensor;

/// Stacked window correlation matrices of one scan, values `T×N×N`.
#[derive(Clone, Debug, PartialEq)]
pub struct DfcnTensor {
    pub subject_id: String,
    pub scan_id: String,
    pub label: usize,
    pub windows: usize,
    pub regions: usize,
    pub values: Vec<f64>,
    /// Set when some window contained a zero-variance region; that region's
    /// row, column and diagonal entry are 0 in the affected windows.
    pub degenerate: bool,
}

impl DfcnTensor {
    pub fn matrix(&self, t: usize) -> &[f64] {
        let nn = self.regions * self.regions;
        &self.values[t * nn..(t + 1) * nn]
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> f64 {
        self.values[(t * self.regions + i) * self.regions + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.windows, self.regions, self.regions], self.values.clone())
            .expect("dFCN extents are consistent")
    }

    /// Mean over windows of the upper-triangle correlations, `N(N-1)/2` values.
    pub fn mean_upper_triangle(&self) -> Vec<f64> {
        let n = self.regions;
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let s: f64 = (0..self.windows).map(|t| self.get(t, i, j)).sum();
                out.push(s / self.windows as f64);
            }
        }
        out
    }
}

/// Builds the dFCN of a scan: one correlation matrix per window, in order.
pub fn build_dfcn(ts: &RoiTimeSeries, spec: &WindowSpec) -> Result<DfcnTensor> {
    let windows = segment_windows(ts, spec)?;
    let n = ts.regions();
    let mut values = Vec::with_capacity(windows.len() * n * n);
    let mut degenerate = false;
    for w in &windows {
        let c = pearson_matrix(w, spec.length, n)?;
        degenerate |= !c.degenerate_regions.is_empty();
        values.extend_from_slice(&c.values);
    }
    Ok(DfcnTensor {
        subject_id: ts.subject_id.clone(),
        scan_id: ts.scan_id.clone(),
        label: ts.label,
        windows: windows.len(),
        regions: n,
        values,
        degenerate,
    })
}
