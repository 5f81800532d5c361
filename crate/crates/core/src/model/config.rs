use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which extent scales the attention logits by its square root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DkMode {
    /// Key feature length, i.e. the number of temporal positions `T − S1 + 1`.
    #[default]
    #[serde(rename = "keylen")]
    KeyLength,
    /// Number of regions `N`.
    #[serde(rename = "regions")]
    Regions,
}

impl std::str::FromStr for DkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keylen" => Ok(DkMode::KeyLength),
            "regions" => Ok(DkMode::Regions),
            other => Err(Error::config(format!("dk_mode must be keylen or regions, got {other:?}"))),
        }
    }
}

/// Architecture hyperparameters. Defaults reproduce the published setting
/// for 116 regions and 34 windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub regions: usize,
    pub windows: usize,
    /// Con1 temporal kernel extent.
    pub s1: usize,
    /// Con2 temporal kernel extent.
    pub s2: usize,
    /// Con3 temporal kernel extent.
    pub s3: usize,
    /// Con2 filter count.
    pub k1: usize,
    /// Con3 filter count.
    pub k2: usize,
    /// Con1 filter count, which is also the attention channel count.
    pub c1: usize,
    pub lstm_hidden: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub num_classes: usize,
    pub dropout_conv: f64,
    pub dropout_lstm: f64,
    pub l2_lambda: f64,
    pub dk_mode: DkMode,
    pub dca_enabled: bool,
    /// Per-channel scalar biases on the query/key/value transforms.
    pub dca_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            regions: 116,
            windows: 34,
            s1: 2,
            s2: 1,
            s3: 8,
            k1: 5,
            k2: 16,
            c1: 32,
            lstm_hidden: 48,
            fc1: 32,
            fc2: 16,
            num_classes: 2,
            dropout_conv: 0.25,
            dropout_lstm: 0.5,
            l2_lambda: 1e-4,
            dk_mode: DkMode::KeyLength,
            dca_enabled: true,
            dca_bias: false,
        }
    }
}

impl ModelConfig {
    /// Temporal length after Con1 (stride 1): `T − S1 + 1`.
    pub fn u1(&self) -> usize {
        self.windows + 1 - self.s1
    }

    /// Temporal length after Con2 (stride 1).
    pub fn con2_len(&self) -> usize {
        self.u1() + 1 - self.s2
    }

    /// Temporal length after Con3 (stride 2), the LSTM sequence length.
    pub fn u2(&self) -> usize {
        (self.con2_len() - self.s3) / 2 + 1
    }

    /// Attention scaling extent.
    pub fn dk(&self) -> usize {
        match self.dk_mode {
            DkMode::KeyLength => self.u1(),
            DkMode::Regions => self.regions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("regions", self.regions),
            ("windows", self.windows),
            ("s1", self.s1),
            ("s2", self.s2),
            ("s3", self.s3),
            ("k1", self.k1),
            ("k2", self.k2),
            ("c1", self.c1),
            ("lstm_hidden", self.lstm_hidden),
            ("fc1", self.fc1),
            ("fc2", self.fc2),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.regions < 2 {
            return Err(Error::config("regions must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.s1 > self.windows {
            return Err(Error::config(format!(
                "s1 = {} exceeds windows = {}: Con1 must fit",
                self.s1, self.windows
            )));
        }
        if self.s2 > self.u1() {
            return Err(Error::config(format!("s2 = {} exceeds U1 = {}: Con2 must fit", self.s2, self.u1())));
        }
        if self.s3 > self.con2_len() {
            return Err(Error::config(format!(
                "s3 = {} exceeds U1 = {}: Con3 must fit",
                self.s3,
                self.con2_len()
            )));
        }
        for (name, p) in [("dropout_conv", self.dropout_conv), ("dropout_lstm", self.dropout_lstm)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1)")));
            }
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::config("l2_lambda must be a finite non-negative number"));
        }
        Ok(())
    }
}
