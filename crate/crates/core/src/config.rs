//! Flat run configuration. Every key has a default; unknown keys are errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::TaskFamilyConfig;
use crate::error::{HillError, Result};
use crate::grpo::{AdvantageConfig, StdMode};
use crate::hintloop::HintScoring;
use crate::policy::init::{HinterPrior, ReasonerPrior};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "HiLL")]
    Hill,
    #[serde(rename = "HiLL_noTW")]
    HillNoTw,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Grpo, Mode::Hill, Mode::HillNoTw];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Grpo => "GRPO",
            Mode::Hill => "HiLL",
            Mode::HillNoTw => "HiLL_noTW",
        }
    }

    pub fn uses_hinter(self) -> bool {
        self != Mode::Grpo
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = HillError;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| HillError::Config(format!("unknown mode `{s}` (expected GRPO, HiLL or HiLL_noTW)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub r_fail: f64,
    pub lr_reasoner: f64,
    pub lr_hinter: f64,

    /// Relative sampling weight of each difficulty `d_min..=d_max`.
    pub difficulty_weights: Vec<f64>,
    pub eval_every: usize,
    pub held_out_per_difficulty: usize,
    /// Seed of the held-out set; shared by runs that differ only in `seed`.
    pub eval_seed: u64,

    pub epsilon: f64,
    pub std_mode: StdMode,
    pub clip_enabled: bool,
    pub eps_low: f64,
    pub eps_high: f64,

    pub modulus: usize,
    pub n_strategy: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub max_hint_len: usize,
    pub max_context: usize,
    pub hint_separator: bool,

    pub reasoner_buckets: usize,
    pub hinter_buckets: usize,
    pub prior_chain_logits: Vec<f64>,
    pub prior_wrap_logits: Vec<f64>,
    pub prior_eos_logit: f64,
    pub prior_special_logit: f64,
    pub prior_strategy_boost: f64,
    pub prior_reveal_boost: f64,
    pub hinter_open_grammar_logit: f64,
    pub hinter_open_reveal_bias: f64,
    pub hinter_open_other_logit: f64,
    pub hinter_reveal_residue_logit: f64,
    pub hinter_stop_logit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let task = TaskFamilyConfig::default();
        let adv = AdvantageConfig::default();
        let rp = ReasonerPrior::default();
        let hp = HinterPrior::default();
        TrainConfig {
            mode: Mode::Hill,
            seed: 0,
            steps: 300,
            batch_size: 32,
            g: 8,
            m: 4,
            temperature: 0.3,
            r_fail: -0.2,
            lr_reasoner: 0.4,
            lr_hinter: 0.5,
            difficulty_weights: vec![1.0; task.d_max - task.d_min + 1],
            eval_every: 10,
            held_out_per_difficulty: 50,
            eval_seed: 20_240_601,
            epsilon: adv.epsilon,
            std_mode: adv.std_mode,
            clip_enabled: adv.clip_enabled,
            eps_low: adv.eps_low,
            eps_high: adv.eps_high,
            modulus: task.vocab.modulus,
            n_strategy: task.vocab.n_strategy,
            d_min: task.d_min,
            d_max: task.d_max,
            max_hint_len: task.max_hint_len,
            max_context: task.max_context,
            hint_separator: task.hint_separator,
            reasoner_buckets: 16,
            hinter_buckets: 4,
            prior_chain_logits: rp.chain_logit_by_pos,
            prior_wrap_logits: rp.wrap_logit_by_pos,
            prior_eos_logit: rp.eos_logit,
            prior_special_logit: rp.special_logit,
            prior_strategy_boost: rp.strategy_boost,
            prior_reveal_boost: rp.reveal_boost,
            hinter_open_grammar_logit: hp.open_grammar_logit,
            hinter_open_reveal_bias: hp.open_reveal_bias,
            hinter_open_other_logit: hp.open_other_logit,
            hinter_reveal_residue_logit: hp.reveal_residue_logit,
            hinter_stop_logit: hp.stop_logit,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| HillError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| HillError::io(path, e))?;
        TrainConfig::from_toml_str(&text).map_err(|e| match e {
            HillError::Config(msg) => HillError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HillError::Config(m.to_string()));
        if self.g < 2 {
            return bad("G must be >= 2");
        }
        if self.m < 2 {
            return bad("M must be >= 2");
        }
        if !(self.temperature > 0.0) {
            return bad("T must be > 0");
        }
        if !(self.r_fail < 0.0) {
            return bad("r_fail must be < 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr_reasoner >= 0.0 && self.lr_reasoner.is_finite()) || !(self.lr_hinter >= 0.0 && self.lr_hinter.is_finite()) {
            return bad("learning rates must be finite and >= 0");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if self.held_out_per_difficulty == 0 {
            return bad("held_out_per_difficulty must be >= 1");
        }
        if self.reasoner_buckets == 0 || self.hinter_buckets == 0 {
            return bad("bucket counts must be >= 1");
        }
        self.task().validate()?;
        self.advantage().validate()?;
        let tiers = self.d_max - self.d_min + 1;
        if self.difficulty_weights.len() != tiers {
            return Err(HillError::Config(format!(
                "difficulty_weights has {} entries, expected {tiers}",
                self.difficulty_weights.len()
            )));
        }
        if self.difficulty_weights.iter().any(|w| !(*w >= 0.0)) || self.difficulty_weights.iter().sum::<f64>() <= 0.0 {
            return bad("difficulty_weights must be >= 0 with a positive sum");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.modulus, self.n_strategy)
    }

    pub fn task(&self) -> TaskFamilyConfig {
        TaskFamilyConfig {
            vocab: self.vocab(),
            d_min: self.d_min,
            d_max: self.d_max,
            max_hint_len: self.max_hint_len,
            max_context: self.max_context,
            hint_separator: self.hint_separator,
        }
    }

    pub fn advantage(&self) -> AdvantageConfig {
        AdvantageConfig {
            epsilon: self.epsilon,
            std_mode: self.std_mode,
            clip_enabled: self.clip_enabled,
            eps_low: self.eps_low,
            eps_high: self.eps_high,
        }
    }

    pub fn scoring(&self) -> HintScoring {
        HintScoring {
            g: self.g,
            temperature: self.temperature,
            r_fail: self.r_fail,
            transfer_weight: self.mode == Mode::Hill,
        }
    }

    pub fn reasoner_prior(&self) -> ReasonerPrior {
        ReasonerPrior {
            chain_logit_by_pos: self.prior_chain_logits.clone(),
            wrap_logit_by_pos: self.prior_wrap_logits.clone(),
            eos_logit: self.prior_eos_logit,
            special_logit: self.prior_special_logit,
            strategy_boost: self.prior_strategy_boost,
            reveal_boost: self.prior_reveal_boost,
        }
    }

    pub fn hinter_prior(&self) -> HinterPrior {
        HinterPrior {
            open_grammar_logit: self.hinter_open_grammar_logit,
            open_reveal_bias: self.hinter_open_reveal_bias,
            open_other_logit: self.hinter_open_other_logit,
            reveal_residue_logit: self.hinter_reveal_residue_logit,
            stop_logit: self.hinter_stop_logit,
        }
    }
}
