//! Stochastic categorical policy, value baseline, and checkpoint files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{
    normalize, NormalizationRanges, ObservationVector, PedagogicalAction, FEATURE_NAMES, N_ACTIONS, N_FEATURES,
    SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::nnet::{Activation, Mlp, MlpSpec, OutputHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    OnlinePpo,
    Bc,
    Pois,
    /// Hand-built fixed policy, e.g. the uniform baseline.
    Fixed,
}

/// Self-contained policy: networks, normalization and action ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub feature_order: Vec<String>,
    pub action_order: Vec<PedagogicalAction>,
    pub normalization: NormalizationRanges,
    pub policy: Mlp,
    pub value: Option<Mlp>,
    /// Seeds that produced this checkpoint, outermost first.
    pub seed_lineage: Vec<u64>,
}

pub fn policy_spec(hidden: &[usize], activation: Activation) -> MlpSpec {
    MlpSpec::new(N_FEATURES, hidden, N_ACTIONS, activation, OutputHead::Softmax)
}

pub fn value_spec(hidden: &[usize], activation: Activation) -> MlpSpec {
    MlpSpec::new(N_FEATURES, hidden, 1, activation, OutputHead::Linear)
}

impl PolicyCheckpoint {
    pub fn new(policy: Mlp, value: Option<Mlp>, provenance: Provenance, seed_lineage: Vec<u64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            provenance,
            feature_order: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            action_order: PedagogicalAction::ALL.to_vec(),
            normalization: NormalizationRanges::default(),
            policy,
            value,
            seed_lineage,
        }
    }

    /// Zero-weight policy: uniform over the four actions everywhere.
    pub fn uniform() -> Self {
        Self::new(
            Mlp::zeros(policy_spec(&[], Activation::Tanh)),
            None,
            Provenance::Fixed,
            vec![],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "checkpoint schema_version {} unsupported",
                self.schema_version
            )));
        }
        if self.action_order != PedagogicalAction::ALL {
            return Err(Error::Data("checkpoint action ordering differs from this build".into()));
        }
        if self.feature_order.iter().map(String::as_str).ne(FEATURE_NAMES) {
            return Err(Error::Data(
                "checkpoint feature ordering differs from this build".into(),
            ));
        }
        self.normalization.validate()?;
        let p = &self.policy.spec;
        if p.input_dim != N_FEATURES || p.output_dim != N_ACTIONS || p.output_head != OutputHead::Softmax {
            return Err(Error::Data("policy net must map 8 features to a 4-way softmax".into()));
        }
        self.policy.params.check_shapes(p)?;
        if let Some(v) = &self.value {
            if v.spec.input_dim != N_FEATURES || v.spec.output_dim != 1 || v.spec.output_head != OutputHead::Linear {
                return Err(Error::Data("value net must map 8 features to one linear output".into()));
            }
            v.params.check_shapes(&v.spec)?;
        }
        Ok(())
    }

    pub fn action_distribution(&self, obs: &ObservationVector) -> Result<[f64; N_ACTIONS]> {
        self.distribution_normalized(&normalize(obs, &self.normalization)?)
    }

    pub fn distribution_normalized(&self, x: &[f64; N_FEATURES]) -> Result<[f64; N_ACTIONS]> {
        let out = self.policy.output(x)?;
        let mut p = [0.0; N_ACTIONS];
        p.copy_from_slice(&out);
        Ok(p)
    }

    pub fn value(&self, obs: &ObservationVector) -> Result<f64> {
        self.value_normalized(&normalize(obs, &self.normalization)?)
    }

    pub fn value_normalized(&self, x: &[f64; N_FEATURES]) -> Result<f64> {
        let v = self
            .value
            .as_ref()
            .ok_or_else(|| Error::Usage("checkpoint has no value network".into()))?;
        Ok(v.output(x)?[0])
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text).map_err(|e| Error::Data(format!("malformed checkpoint: {e}")))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Inverse-CDF draw in action-index order. Returns the action and
/// `ln dist[action]`.
pub fn sample_action<R: rand::Rng>(dist: &[f64; N_ACTIONS], rng: &mut R) -> Result<(PedagogicalAction, f64)> {
    if dist.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::Numeric(format!("degenerate action distribution {dist:?}")));
    }
    let u: f64 = rng.random::<f64>() * dist.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut chosen = N_ACTIONS - 1;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            chosen = i;
            break;
        }
    }
    let action = PedagogicalAction::from_index(chosen).expect("index < 4");
    Ok((action, dist[chosen].ln()))
}
