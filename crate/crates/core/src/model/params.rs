use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{
    read_checkpoint, write_checkpoint, BatchNormState, BatchStats, LstmVars, ParamId, ParamStore, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DcaIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bias: Option<[ParamId; 3]>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIds {
    pub con1: ConvIds,
    pub dca: Option<DcaIds>,
    pub con2: ConvIds,
    pub con3: ConvIds,
    pub lstm: LstmIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
    pub fc_out: LinearIds,
}

/// Convolution weights and batch-norm affine bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Attention transform scalars bound to a tape, one per channel.
#[derive(Clone, Copy, Debug)]
pub struct DcaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bias: Option<[Var; 3]>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// Every trainable parameter of one model, bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    pub con1: ConvVars,
    pub dca: Option<DcaVars>,
    pub con2: ConvVars,
    pub con3: ConvVars,
    pub lstm: LstmVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
    pub fc_out: LinearVars,
}

/// Trainable weights plus batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Running statistics of the Con1, Con2 and Con3 batch normalizations.
    pub bn: [BatchNormState; 3],
    pub(crate) ids: LayerIds,
}

const BN_LAYERS: [&str; 3] = ["con1", "con2", "con3"];

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
        .expect("positive extents")
}

fn conv_layer(store: &mut ParamStore, name: &str, shape: [usize; 4], rng: &mut ChaCha8Rng) -> ConvIds {
    let fan_in = shape[1] * shape[2] * shape[3];
    let bound = 1.0 / (fan_in as f64).sqrt();
    ConvIds {
        weight: store.add(format!("{name}.weight"), uniform(&shape, bound, rng)),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[shape[0]])),
        gamma: store.add(format!("{name}.bn.gamma"), Tensor::ones(&[shape[0]])),
        beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[shape[0]])),
    }
}

fn linear_layer(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) -> LinearIds {
    let bound = 1.0 / (inp as f64).sqrt();
    LinearIds {
        weight: store.add(format!("{name}.weight"), uniform(&[out, inp], bound, rng)),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out])),
    }
}

impl ModelParams {
    /// Fresh parameters: fan-in scaled uniform weights, zero biases, unit
    /// attention scalars and a forget-gate bias of 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let con1 = conv_layer(&mut store, "con1", [c.c1, c.regions, 1, c.s1], &mut rng);
        let dca = c.dca_enabled.then(|| {
            let wq = store.add("dca.wq", Tensor::ones(&[c.c1]));
            let wk = store.add("dca.wk", Tensor::ones(&[c.c1]));
            let wv = store.add("dca.wv", Tensor::ones(&[c.c1]));
            let bias = c.dca_bias.then(|| {
                [
                    store.add("dca.bq", Tensor::zeros(&[c.c1])),
                    store.add("dca.bk", Tensor::zeros(&[c.c1])),
                    store.add("dca.bv", Tensor::zeros(&[c.c1])),
                ]
            });
            DcaIds { wq, wk, wv, bias }
        });
        let con2 = conv_layer(&mut store, "con2", [c.k1, c.c1, c.regions, c.s2], &mut rng);
        let con3 = conv_layer(&mut store, "con3", [c.k2, c.k1, 1, c.s3], &mut rng);
        let h = c.lstm_hidden;
        let lstm_bound = 1.0 / (h as f64).sqrt();
        let mut lstm_bias = Tensor::zeros(&[4 * h]);
        lstm_bias.data_mut()[h..2 * h].fill(1.0);
        let lstm = LstmIds {
            w_ih: store.add("lstm.w_ih", uniform(&[4 * h, c.k2], lstm_bound, &mut rng)),
            w_hh: store.add("lstm.w_hh", uniform(&[4 * h, h], lstm_bound, &mut rng)),
            bias: store.add("lstm.bias", lstm_bias),
        };
        let fc1 = linear_layer(&mut store, "fc1", c.fc1, h, &mut rng);
        let fc2 = linear_layer(&mut store, "fc2", c.fc2, c.fc1, &mut rng);
        let fc_out = linear_layer(&mut store, "fc_out", c.num_classes, c.fc2, &mut rng);
        Ok(ModelParams {
            config: config.clone(),
            store,
            bn: [
                BatchNormState::new(c.c1),
                BatchNormState::new(c.k1),
                BatchNormState::new(c.k2),
            ],
            ids: LayerIds {
                con1,
                dca,
                con2,
                con3,
                lstm,
                fc1,
                fc2,
                fc_out,
            },
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let s = &self.store;
        let conv = |ids: ConvIds, tape: &mut Tape| ConvVars {
            weight: tape.param(s, ids.weight),
            bias: tape.param(s, ids.bias),
            gamma: tape.param(s, ids.gamma),
            beta: tape.param(s, ids.beta),
        };
        let con1 = conv(self.ids.con1, tape);
        let dca = self.ids.dca.map(|d| DcaVars {
            wq: tape.param(s, d.wq),
            wk: tape.param(s, d.wk),
            wv: tape.param(s, d.wv),
            bias: d.bias.map(|b| b.map(|id| tape.param(s, id))),
        });
        let con2 = conv(self.ids.con2, tape);
        let con3 = conv(self.ids.con3, tape);
        let lstm = LstmVars {
            w_ih: tape.param(s, self.ids.lstm.w_ih),
            w_hh: tape.param(s, self.ids.lstm.w_hh),
            bias: tape.param(s, self.ids.lstm.bias),
        };
        let mut lin = |ids: LinearIds| LinearVars {
            weight: tape.param(s, ids.weight),
            bias: tape.param(s, ids.bias),
        };
        BoundParams {
            con1,
            dca,
            con2,
            con3,
            lstm,
            fc1: lin(self.ids.fc1),
            fc2: lin(self.ids.fc2),
            fc_out: lin(self.ids.fc_out),
        }
    }

    /// Folds training-mode batch statistics (Con1, Con2, Con3 order) into the
    /// running averages.
    pub fn apply_bn_stats(&mut self, stats: &[BatchStats]) {
        for (state, s) in self.bn.iter_mut().zip(stats) {
            state.update(s);
        }
    }

    /// Sets one named parameter from a flat slice, e.g. `"dca.wq"`.
    pub fn set(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named {name}")))?;
        let t = self.store.value_mut(id);
        if t.len() != values.len() {
            return Err(Error::dim(format!("{name} has {} values, got {}", t.len(), values.len())));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn count(&self) -> ParameterCounts {
        ParameterCounts::from_store(&self.store)
    }

    fn buffer_records(&self) -> Vec<(String, Tensor)> {
        BN_LAYERS
            .iter()
            .zip(&self.bn)
            .flat_map(|(name, st)| {
                [
                    (format!("{name}.bn.running_mean"), Tensor::vector(st.running_mean.clone())),
                    (format!("{name}.bn.running_var"), Tensor::vector(st.running_var.clone())),
                ]
            })
            .collect()
    }

    /// Writes weights and running statistics as a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let buffers = self.buffer_records();
        let records = self
            .store
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(buffers.iter().map(|(n, t)| (n.as_str(), t)));
        write_checkpoint(path, records)
    }

    /// Loads a checkpoint written by [`ModelParams::save`] for `config`.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let records = read_checkpoint(path)?;
        let mut params = ModelParams::init(config, 0)?;
        params.store.load_values(records.iter().map(|(n, t)| (n.as_str(), t)))?;
        for (name, state) in BN_LAYERS.iter().zip(params.bn.iter_mut()) {
            for (suffix, target) in [("running_mean", &mut state.running_mean), ("running_var", &mut state.running_var)] {
                let key = format!("{name}.bn.{suffix}");
                let (_, t) = records
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks {key}")))?;
                if t.len() != target.len() {
                    return Err(Error::Data(format!("{key} has {} entries, expected {}", t.len(), target.len())));
                }
                target.copy_from_slice(t.data());
            }
        }
        let has_dca = records.iter().any(|(n, _)| n.starts_with("dca."));
        if has_dca != config.dca_enabled {
            return Err(Error::Data(format!(
                "checkpoint {} attention weights but config has dca_enabled = {}",
                if has_dca { "contains" } else { "lacks" },
                config.dca_enabled
            )));
        }
        Ok(params)
    }
}

/// Trainable scalar counts per layer (parameter name up to its last dot).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub layers: BTreeMap<String, usize>,
    pub total: usize,
}

impl ParameterCounts {
    pub fn from_store(store: &ParamStore) -> Self {
        let mut layers = BTreeMap::new();
        for p in store.iter() {
            let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
            *layers.entry(layer.to_string()).or_insert(0) += p.value.len();
        }
        ParameterCounts {
            total: layers.values().sum(),
            layers,
        }
    }

    pub fn layer(&self, name: &str) -> usize {
        self.layers.get(name).copied().unwrap_or(0)
    }
}
