use arena_pref::ensemble::DEFAULT_STEP;
use arena_pref::model::{LoraConfig, ModelConfig};
use arena_pref::preset::MemberPreset;
use arena_pref::synthgen::{RuleKind, SynthRule};
use arena_pref::tokenizer::VOCAB_SIZE;
use arena_pref::train::{Clock, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything needed to train one member, with no hidden defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberConfig {
    pub name: String,
    pub preset: MemberPreset,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub lora_seed: u64,
}

impl MemberConfig {
    /// Preset bundle at desk-scale default dimensions.
    pub fn from_preset(preset: MemberPreset, seed: u64) -> Self {
        Self {
            name: preset.name().to_string(),
            preset,
            model: preset.model(),
            lora: preset.lora(),
            train: TrainConfig::new(preset.learning_rate(), seed.wrapping_add(2)),
            init_seed: seed,
            lora_seed: seed.wrapping_add(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunAllConfig {
    pub records: usize,
    pub synth: SynthRule,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub members: Vec<MemberConfig>,
    pub ensemble_step: f64,
}

impl Default for RunAllConfig {
    /// The synthetic demo: 5,000 length-rule records and two small members
    /// with different dimensions and seeds.
    fn default() -> Self {
        let member = |preset: MemberPreset, d_model: usize, seed: u64| {
            let mut m = MemberConfig::from_preset(preset, seed);
            m.model = ModelConfig {
                vocab_size: VOCAB_SIZE,
                d_model,
                n_layers: 3,
                n_heads: 4,
                d_ff: 2 * d_model,
                max_len: 96,
            };
            m.train.batch_size = 8;
            m.train.max_steps = 1500;
            m.train.eval_every = 100;
            m.train.clock = Clock::Work;
            m
        };
        Self {
            records: 5000,
            synth: SynthRule::new(RuleKind::LongerWins, 0.1, 0.05, 1),
            split: [0.8, 0.1, 0.1],
            split_seed: 7,
            members: vec![
                member(MemberPreset::GemmaLike, 32, 11),
                member(MemberPreset::LlamaLike, 24, 21),
            ],
            ensemble_step: DEFAULT_STEP,
        }
    }
}
