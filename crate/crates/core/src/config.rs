//! Experiment configuration, read from and written to TOML.
//!
//! Every section except the scheme has defaults matching the reference
//! hyperparameters (5 local epochs, batch 10, lr 0.01, momentum 0.5,
//! lambda 0.2, b = 0.01). Unknown keys are rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::byzantine::{AttackKind, AttackSpec, BitPattern};
use crate::error::{ProbitError, Result};
use crate::learners::LearnerKind;
use crate::privacy::PrivacySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One stochastic bit per coordinate, maximum-likelihood aggregation.
    ProbitPlus,
    /// Full-precision mean of updates.
    Fedavg,
    /// Full-precision geometric median of updates.
    FedGm,
    /// Sign bits, majority vote.
    SignsgdMv,
    /// l1-penalized local objective, sign bits, sign accumulation.
    Rsa,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::ProbitPlus,
        Scheme::Fedavg,
        Scheme::FedGm,
        Scheme::SignsgdMv,
        Scheme::Rsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::ProbitPlus => "probit_plus",
            Scheme::Fedavg => "fedavg",
            Scheme::FedGm => "fed_gm",
            Scheme::SignsgdMv => "signsgd_mv",
            Scheme::Rsa => "rsa",
        }
    }

    pub fn transmits_bits(self) -> bool {
        matches!(self, Scheme::ProbitPlus | Scheme::SignsgdMv | Scheme::Rsa)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = ProbitError;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ProbitError::Parse(format!("unknown scheme `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Topology {
    pub clients: usize,
    /// Byzantine fraction; the attackers are the last `floor(beta * M)` ids.
    pub beta: f64,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            clients: 50,
            beta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub gaussian_variance: f64,
    pub flip_factor: f64,
    pub bit_pattern: BitPattern,
    pub lie_in_loss_signal: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let spec = AttackSpec::default();
        Self {
            kind: spec.kind,
            gaussian_variance: spec.gaussian_variance,
            flip_factor: spec.flip_factor,
            bit_pattern: spec.bit_pattern,
            lie_in_loss_signal: spec.lie_in_loss_signal,
        }
    }
}

/// Local training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the proximal term `lambda/2 |w_m - w|^2`.
    pub lambda: f64,
    /// Inexactness threshold; logged against, never enforced.
    pub gamma: f64,
    pub server_lr: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            rounds: 100,
            local_epochs: 5,
            batch_size: 10,
            lr: 0.01,
            momentum: 0.5,
            lambda: 0.2,
            gamma: 0.5,
            server_lr: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    /// Initial clipping range; the privacy margin is added on top.
    pub b_init: f64,
    pub dynamic_b: bool,
    /// Keep the schedule running while an attack is active.
    pub dynamic_b_under_attack: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            b_init: 0.01,
            dynamic_b: true,
            dynamic_b_under_attack: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Majority-vote step and sign-accumulation coefficient.
    pub sign_step: f64,
    /// Weight of the l1 penalty in the RSA local objective.
    pub rsa_penalty: f64,
    pub gm_tol: f64,
    pub gm_max_iter: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            sign_step: 0.01,
            rsa_penalty: 0.01,
            gm_tol: 1e-6,
            gm_max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub learner: LearnerKind,
    pub hidden: usize,
    pub classes: usize,
    pub features: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub spread: f64,
    pub classes_per_client: usize,
    /// Optional CSV files (`f0..f{p-1},label`) replacing the synthetic blobs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            learner: LearnerKind::Logistic,
            hidden: 16,
            classes: 4,
            features: 16,
            per_class_train: 500,
            per_class_test: 250,
            spread: 1.5,
            classes_per_client: 2,
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub privacy: PrivacySpec,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            seed: 0,
            output: None,
            topology: Topology::default(),
            attack: AttackConfig::default(),
            privacy: PrivacySpec::default(),
            schedule: TrainSchedule::default(),
            quant: QuantConfig::default(),
            baseline: BaselineConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ProbitError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ProbitError::Parse(e.to_string()))
    }

    pub fn attack_spec(&self) -> AttackSpec {
        AttackSpec {
            kind: self.attack.kind,
            beta: self.topology.beta,
            gaussian_variance: self.attack.gaussian_variance,
            flip_factor: self.attack.flip_factor,
            bit_pattern: self.attack.bit_pattern,
            lie_in_loss_signal: self.attack.lie_in_loss_signal,
        }
    }

    /// Whether the `b` schedule runs in this configuration.
    pub fn dynamic_b_active(&self) -> bool {
        self.scheme == Scheme::ProbitPlus
            && self.quant.dynamic_b
            && (self.quant.dynamic_b_under_attack
                || !self.attack_spec().is_active(self.topology.clients))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(ProbitError::Config(format!("{field}: {why}")));
        if self.topology.clients == 0 {
            return bad("topology.clients", "must be positive");
        }
        self.attack_spec().validate()?;
        self.privacy.validate()?;
        if self.attack.kind == AttackKind::WorstCaseBits && !self.scheme.transmits_bits() {
            return bad("attack.kind", "worst_case_bits needs a bit-transport scheme");
        }
        let s = &self.schedule;
        if s.batch_size == 0 {
            return bad("schedule.batch_size", "must be positive");
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return bad("schedule.lr", "must be positive");
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return bad("schedule.momentum", "must lie in [0, 1)");
        }
        if !(s.lambda >= 0.0 && s.lambda.is_finite()) {
            return bad("schedule.lambda", "must be nonnegative");
        }
        if !(0.0..=1.0).contains(&s.gamma) {
            return bad("schedule.gamma", "must lie in [0, 1]");
        }
        if !(s.server_lr > 0.0 && s.server_lr.is_finite()) {
            return bad("schedule.server_lr", "must be positive");
        }
        if !(self.quant.b_init > 0.0 && self.quant.b_init.is_finite()) {
            return bad("quant.b_init", "must be positive");
        }
        let b = &self.baseline;
        if !(b.sign_step > 0.0 && b.rsa_penalty >= 0.0 && b.gm_tol > 0.0) {
            return bad("baseline", "step and tolerance must be positive");
        }
        let d = &self.data;
        if d.train_csv.is_some() != d.test_csv.is_some() {
            return bad("data", "train_csv and test_csv must be given together");
        }
        if d.train_csv.is_none() {
            if d.classes < 2 {
                return bad("data.classes", "need at least 2");
            }
            if d.features == 0 || d.per_class_train == 0 || d.per_class_test == 0 {
                return bad("data", "features and sample counts must be positive");
            }
            if !(d.spread >= 0.0 && d.spread.is_finite()) {
                return bad("data.spread", "must be nonnegative");
            }
        }
        if d.classes_per_client == 0 {
            return bad("data.classes_per_client", "must be positive");
        }
        if d.learner == LearnerKind::Mlp && d.hidden == 0 {
            return bad("data.hidden", "must be positive for the mlp learner");
        }
        Ok(())
    }
}
