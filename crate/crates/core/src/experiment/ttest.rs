use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Two-sample test of one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTest {
    pub feature: usize,
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// 1 for the most discriminative feature (smallest p).
    pub rank: usize,
    /// Both groups have zero variance but different means.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub n_a: usize,
    pub n_b: usize,
    pub df: usize,
    /// In feature order.
    pub features: Vec<FeatureTest>,
}

impl TTestReport {
    /// Features sorted by rank.
    pub fn ranked(&self) -> Vec<&FeatureTest> {
        let mut v: Vec<&FeatureTest> = self.features.iter().collect();
        v.sort_by_key(|f| f.rank);
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature_index,t,p,rank\n");
        for f in &self.features {
            out.push_str(&format!("{},{},{},{}\n", f.feature, f.t, f.p, f.rank));
        }
        out
    }
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom:
/// `P(|T| ≥ |t|) = I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

fn mean_and_ss(x: &[f64]) -> (f64, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    (mean, x.iter().map(|v| (v - mean).powi(2)).sum())
}

/// Pooled-variance Student t-test per feature. `a[s][f]` is feature `f` of
/// sample `s` in group A.
pub fn feature_ttest(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<TTestReport> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data(format!(
            "each group needs at least 2 samples, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let width = a[0].len();
    if a.iter().chain(b).any(|row| row.len() != width) {
        return Err(Error::dim("all samples must have the same number of features"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = a.len() + b.len() - 2;
    let mut features = Vec::with_capacity(width);
    for f in 0..width {
        let xa: Vec<f64> = a.iter().map(|r| r[f]).collect();
        let xb: Vec<f64> = b.iter().map(|r| r[f]).collect();
        if xa.iter().chain(&xb).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("feature {f} has a non-finite value")));
        }
        let (ma, ssa) = mean_and_ss(&xa);
        let (mb, ssb) = mean_and_ss(&xb);
        let pooled = (ssa + ssb) / df as f64;
        let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
        let diff = ma - mb;
        let (t, p, degenerate) = if se > 0.0 {
            let t = diff / se;
            (t, student_t_two_sided(t, df as f64), false)
        } else if diff == 0.0 {
            (0.0, 1.0, false)
        } else {
            (diff.signum() * f64::INFINITY, 0.0, true)
        };
        features.push(FeatureTest {
            feature: f,
            t,
            p,
            rank: 0,
            degenerate,
        });
    }
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&x, &y| features[x].p.total_cmp(&features[y].p).then(x.cmp(&y)));
    for (r, &f) in order.iter().enumerate() {
        features[f].rank = r + 1;
    }
    Ok(TTestReport {
        n_a: a.len(),
        n_b: b.len(),
        df,
        features,
    })
}
