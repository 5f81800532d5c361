//! Planted-block synthetic scans.
//!
//! Every region `r` of a planted block `b` is `x_r(t) = √ρ_b · z_b(t) + σ · η_r(t)`
//! with independent standard normal `z_b`, `η_r`. Two regions of the same
//! block therefore have expected correlation `ρ_b / (ρ_b + σ²)`. Regions in no
//! block of the scan's class carry an independent latent of their own,
//! `x_r = z_r + σ · η_r`, and are uncorrelated with everything else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dfcn::{LabelMap, RoiTimeSeries};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedBlock {
    pub regions: Vec<usize>,
    /// Variance `ρ` of the shared block signal.
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPattern {
    pub name: String,
    pub blocks: Vec<PlantedBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<ClassPattern>,
    pub subjects_per_class: usize,
    pub scans_per_subject: usize,
    /// Time points per scan.
    pub time_points: usize,
    pub regions: usize,
    /// Standard deviation `σ` of the per-region noise.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Two classes with disjoint five-region blocks at expected within-block
    /// correlation 0.8: 20 subjects per class, 2 scans each, 16 regions.
    pub fn benchmark(seed: u64) -> Self {
        let block = |regions: std::ops::Range<usize>| PlantedBlock {
            regions: regions.collect(),
            strength: 0.8,
        };
        SynthSpec {
            classes: vec![
                ClassPattern {
                    name: "class0".into(),
                    blocks: vec![block(0..5)],
                },
                ClassPattern {
                    name: "class1".into(),
                    blocks: vec![block(8..13)],
                },
            ],
            subjects_per_class: 20,
            scans_per_subject: 2,
            time_points: 100,
            regions: 16,
            noise: 0.5,
            seed,
        }
    }

    /// Expected correlation of two regions in a block of strength `rho`.
    pub fn expected_correlation(&self, rho: f64) -> f64 {
        rho / (rho + self.noise * self.noise)
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        LabelMap::new(self.classes.iter().map(|c| c.name.clone()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.subjects_per_class == 0 || self.scans_per_subject == 0 {
            return Err(Error::config("subjects_per_class and scans_per_subject must be at least 1"));
        }
        if self.regions < 2 || self.time_points < 2 {
            return Err(Error::config("need at least 2 regions and 2 time points"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be a finite non-negative number"));
        }
        for class in &self.classes {
            let mut used = vec![false; self.regions];
            for block in &class.blocks {
                if !(block.strength > 0.0 && block.strength.is_finite()) {
                    return Err(Error::config(format!(
                        "class {}: block strength must be positive, got {}",
                        class.name, block.strength
                    )));
                }
                if block.regions.len() < 2 {
                    return Err(Error::config(format!("class {}: a block needs 2 or more regions", class.name)));
                }
                for &r in &block.regions {
                    if r >= self.regions {
                        return Err(Error::config(format!(
                            "class {}: block region {r} outside [0, {})",
                            class.name, self.regions
                        )));
                    }
                    if std::mem::replace(&mut used[r], true) {
                        return Err(Error::config(format!(
                            "class {}: region {r} appears in two blocks",
                            class.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Generates every scan of `spec`, subjects ordered by class. Subject ids are
/// `c{class}_s{index}`, scan ids `{subject}_r{index}`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<RoiTimeSeries>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, n) = (spec.time_points, spec.regions);
    let mut scans = Vec::new();
    for (label, class) in spec.classes.iter().enumerate() {
        // region → (block, √ρ)
        let mut membership: Vec<Option<(usize, f64)>> = vec![None; n];
        for (b, block) in class.blocks.iter().enumerate() {
            for &r in &block.regions {
                membership[r] = Some((b, block.strength.sqrt()));
            }
        }
        for s in 0..spec.subjects_per_class {
            let subject = format!("c{label}_s{s:02}");
            for k in 0..spec.scans_per_subject {
                let mut values = vec![0.0; m * n];
                let mut latent = vec![0.0; class.blocks.len()];
                for t in 0..m {
                    for z in latent.iter_mut() {
                        *z = StandardNormal.sample(&mut rng);
                    }
                    for r in 0..n {
                        let signal = match membership[r] {
                            Some((b, amp)) => amp * latent[b],
                            None => StandardNormal.sample(&mut rng),
                        };
                        let eta: f64 = StandardNormal.sample(&mut rng);
                        values[t * n + r] = signal + spec.noise * eta;
                    }
                }
                scans.push(RoiTimeSeries::new(&subject, format!("{subject}_r{k}"), label, values, m, n)?);
            }
        }
    }
    Ok(scans)
}
