use crate::error::{Error, Result};

/// `N×N` correlation matrix of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub regions: usize,
    pub values: Vec<f64>,
    /// Regions whose window is constant. Their row, column and diagonal are 0.
    pub degenerate_regions: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.regions + k]
    }
}

/// Pearson correlation between all column pairs of a row-major `L×N` window,
/// with population (`1/L`) covariance and standard deviation.
///
/// Only the upper triangle is computed; the lower triangle is its mirror, so
/// the result is exactly symmetric.
pub fn pearson_matrix(window: &[f64], length: usize, regions: usize) -> Result<CorrelationMatrix> {
    if length < 2 {
        return Err(Error::config("correlation window needs at least 2 time points"));
    }
    if window.len() != length * regions {
        return Err(Error::dim(format!(
            "window has {} values, expected {length}×{regions}",
            window.len()
        )));
    }
    let lf = length as f64;
    // Column-major centered copy so each region's window is contiguous.
    let mut centered = vec![0.0; length * regions];
    let mut sigma = vec![0.0; regions];
    let mut degenerate_regions = Vec::new();
    for j in 0..regions {
        let col = (0..length).map(|r| window[r * regions + j]);
        let (lo, hi) = col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo == hi {
            degenerate_regions.push(j);
            continue;
        }
        let mean = col.clone().sum::<f64>() / lf;
        let dst = &mut centered[j * length..(j + 1) * length];
        for (d, v) in dst.iter_mut().zip(col) {
            *d = v - mean;
        }
        sigma[j] = (dst.iter().map(|d| d * d).sum::<f64>() / lf).sqrt();
    }

    let mut values = vec![0.0; regions * regions];
    for j in 0..regions {
        if sigma[j] == 0.0 {
            continue;
        }
        values[j * regions + j] = 1.0;
        let xj = &centered[j * length..(j + 1) * length];
        for k in j + 1..regions {
            if sigma[k] == 0.0 {
                continue;
            }
            let xk = &centered[k * length..(k + 1) * length];
            let cov = xj.iter().zip(xk).map(|(a, b)| a * b).sum::<f64>() / lf;
            let r = (cov / (sigma[j] * sigma[k])).clamp(-1.0, 1.0);
            values[j * regions + k] = r;
            values[k * regions + j] = r;
        }
    }
    Ok(CorrelationMatrix {
        regions,
        values,
        degenerate_regions,
    })
}
