//! Browser bindings for three small interactive views: sliding-window
//! connectivity of a synthetic scan, per-channel attention scores under
//! user-chosen `w_Q`, `w_K`, `w_V`, and the ROC curve of two score
//! distributions.
//!
//! The exported functions are thin wrappers over plain Rust functions that
//! return [`dcacrn::Result`], so everything except the JS error conversion
//! is testable natively.

use dcacrn::dfcn::{build_dfcn, DfcnTensor, RoiTimeSeries, WindowSpec};
use dcacrn::experiment::{roc_auc, roc_curve, synth_generate, SynthSpec};
use dcacrn::model::{dca_forward, DcaVars};
use dcacrn::tensor::{Tape, Tensor};
use dcacrn::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One synthetic scan per class of the benchmark cohort and its dFCN under
/// the current window.
#[wasm_bindgen]
pub struct Explorer {
    scans: Vec<RoiTimeSeries>,
    dfcn: Vec<DfcnTensor>,
    window: WindowSpec,
}

impl Explorer {
    pub fn build(seed: u64, noise: f64, length: usize, stride: usize) -> Result<Explorer> {
        let spec = SynthSpec {
            subjects_per_class: 1,
            scans_per_subject: 1,
            noise,
            ..SynthSpec::benchmark(seed)
        };
        let scans = synth_generate(&spec)?;
        let mut explorer = Explorer {
            scans,
            dfcn: Vec::new(),
            window: WindowSpec::new(length, stride),
        };
        explorer.rewindow(length, stride)?;
        Ok(explorer)
    }

    pub fn rewindow(&mut self, length: usize, stride: usize) -> Result<usize> {
        let window = WindowSpec::new(length, stride);
        let dfcn = self.scans.iter().map(|s| build_dfcn(s, &window)).collect::<Result<Vec<_>>>()?;
        self.window = window;
        self.dfcn = dfcn;
        Ok(self.dfcn[0].windows)
    }

    fn scan(&self, class: usize) -> Result<&DfcnTensor> {
        self.dfcn
            .get(class)
            .ok_or_else(|| Error::Usage(format!("class {class} out of range")))
    }

    pub fn correlation(&self, class: usize, window: usize) -> Result<Vec<f64>> {
        let t = self.scan(class)?;
        if window >= t.windows {
            return Err(Error::Usage(format!("window {window} out of range for {}", t.windows)));
        }
        Ok(t.matrix(window).to_vec())
    }

    /// Per-region connectivity strength over windows, `N×T`: the mean
    /// correlation of region `i` with every other region in window `t`.
    pub fn strength_sequences(&self, class: usize) -> Result<Vec<f64>> {
        let t = self.scan(class)?;
        let n = t.regions;
        let mut out = vec![0.0; n * t.windows];
        for w in 0..t.windows {
            for i in 0..n {
                let s: f64 = (0..n).filter(|&j| j != i).map(|j| t.get(w, i, j)).sum();
                out[i * t.windows + w] = s / (n - 1) as f64;
            }
        }
        Ok(out)
    }

    /// Attention scores of a single channel whose features are the strength
    /// sequences, `N×N` with unit row sums.
    pub fn attention(&self, class: usize, wq: f64, wk: f64, wv: f64) -> Result<Vec<f64>> {
        let t = self.scan(class)?;
        attention_scores(&self.strength_sequences(class)?, t.regions, t.windows, wq, wk, wv)
    }
}

#[wasm_bindgen]
impl Explorer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, noise: f64, length: usize, stride: usize) -> std::result::Result<Explorer, JsError> {
        Explorer::build(u64::from(seed), noise, length, stride).map_err(js)
    }

    /// Rebuilds both dFCNs; returns the new window count.
    #[wasm_bindgen(js_name = setWindow)]
    pub fn set_window(&mut self, length: usize, stride: usize) -> std::result::Result<usize, JsError> {
        self.rewindow(length, stride).map_err(js)
    }

    pub fn regions(&self) -> usize {
        self.dfcn[0].regions
    }

    pub fn windows(&self) -> usize {
        self.dfcn[0].windows
    }

    #[wasm_bindgen(js_name = timePoints)]
    pub fn time_points(&self) -> usize {
        self.scans[0].time_points()
    }

    /// Row-major `N×N` correlation matrix of one window.
    #[wasm_bindgen(js_name = windowMatrix)]
    pub fn window_matrix(&self, class: usize, window: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.correlation(class, window).map_err(js)
    }

    /// Row-major `N×N` attention scores for the given channel scalars.
    #[wasm_bindgen(js_name = attentionMatrix)]
    pub fn attention_matrix(&self, class: usize, wq: f64, wk: f64, wv: f64) -> std::result::Result<Vec<f64>, JsError> {
        self.attention(class, wq, wk, wv).map_err(js)
    }
}

/// Runs the attention layer on one `N×U` feature map with scalar transforms
/// and `d_k = U`; returns the `N×N` score matrix.
pub fn attention_scores(features: &[f64], regions: usize, length: usize, wq: f64, wk: f64, wv: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::new(vec![1, 1, regions, length], features.to_vec())?);
    let mut scalar = |w: f64| tape.constant(Tensor::vector(vec![w]));
    let vars = DcaVars {
        wq: scalar(wq),
        wk: scalar(wk),
        wv: scalar(wv),
        bias: None,
    };
    let out = dca_forward(&mut tape, input, &vars, length)?;
    Ok(tape.value(out.scores).data().to_vec())
}

/// Scores of `n` negatives drawn from N(0, 1) and `n` positives from
/// N(separation, 1), followed by their labels.
pub fn sample_scores(separation: f64, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Usage("need at least one sample per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neg = Normal::new(0.0, 1.0).map_err(|e| Error::Usage(e.to_string()))?;
    let pos = Normal::new(separation, 1.0).map_err(|e| Error::Usage(format!("separation: {e}")))?;
    let mut scores = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for _ in 0..n {
        scores.push(neg.sample(&mut rng));
        labels.push(0);
    }
    for _ in 0..n {
        scores.push(pos.sample(&mut rng));
        labels.push(1);
    }
    Ok((scores, labels))
}

/// ROC curve and AUC of a sampled two-class score set.
#[wasm_bindgen]
pub struct RocDemo {
    auc: f64,
    points: Vec<f64>,
}

impl RocDemo {
    pub fn build(separation: f64, n: usize, seed: u64) -> Result<RocDemo> {
        let (scores, labels) = sample_scores(separation, n, seed)?;
        let auc = roc_auc(&scores, &labels)?;
        let points = roc_curve(&scores, &labels)?.iter().flat_map(|p| [p.fpr, p.tpr]).collect();
        Ok(RocDemo { auc, points })
    }
}

#[wasm_bindgen]
impl RocDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(separation: f64, n: usize, seed: u32) -> std::result::Result<RocDemo, JsError> {
        RocDemo::build(separation, n, u64::from(seed)).map_err(js)
    }

    pub fn auc(&self) -> f64 {
        self.auc
    }

    /// Interleaved `(fpr, tpr)` pairs from (0,0) to (1,1).
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }
}
