//! Run configuration: one structured TOML file holding every knob of every
//! stage, with three shipped profiles. Unknown keys are rejected, and the
//! effective config is echoed into the output directory so any report can
//! be regenerated from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctr::CtrConfig;
use crate::distill::{StudentConfig, TrainStudentConfig};
use crate::error::{Error, Result};
use crate::serving::LatencyModel;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeSection {
    pub n_item_subjects: usize,
    pub min_per_category: usize,
    pub n_user_subjects: usize,
    pub example_pool_size: usize,
    pub prompt_token_budget: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    pub window: usize,
    pub d_tok: usize,
    pub d_hidden: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DistillTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ckpt_every: usize,
    pub eval_every: usize,
    /// Fraction of subjects held out for validation/F1, split by stable
    /// subject hash.
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Cosine threshold for phrase equivalence in the F1 metric.
    pub cosine_threshold: f64,
    /// Decode budget when generating records for F1.
    pub decode_max_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CtrSection {
    pub d_id: usize,
    pub d_proj: usize,
    pub head_hidden: Vec<usize>,
    pub k_top: usize,
    pub p_max: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ServingSection {
    /// Hot-store size: smallest N covering this fraction of exposure mass.
    pub hot_mass_fraction: f64,
    pub lru_capacity: usize,
    pub trace_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    pub hot_hit_us: u64,
    pub lru_hit_us: u64,
    pub compute_miss_us: u64,
    pub ctr_forward_us: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: String,
    pub synth: SynthConfig,
    pub knowledge: KnowledgeSection,
    pub student: StudentSection,
    pub distill_train: DistillTrainSection,
    pub eval: EvalSection,
    pub ctr: CtrSection,
    pub ablate: AblateSection,
    pub serving: ServingSection,
    pub latency: LatencySection,
}

impl RunConfig {
    /// CI-sized profile: the whole pipeline runs in well under a minute.
    pub fn tiny() -> Self {
        RunConfig {
            seed: 42,
            profile: "tiny".into(),
            synth: SynthConfig {
                n_items: 240,
                n_users: 160,
                n_rows: 4_000,
                beta: 1.0,
                max_history: 6,
                target_positive_rate: 0.3,
                zipf_exponent: 1.1,
                n_categories: 4,
                n_brands: 8,
                n_flavors: 6,
                n_explicit_tags: 8,
                n_implicit_tags: 6,
                tags_per_item: 2,
                profile_items_per_user: 3,
                preferred_tags_per_user: 3,
                profile_match_boost: 2.5,
                affinity_weight: 5.0,
                popularity_weight: 0.6,
                n_context_features: 2,
                context_cardinality: 4,
            },
            knowledge: KnowledgeSection {
                n_item_subjects: 72,
                min_per_category: 2,
                n_user_subjects: 20,
                example_pool_size: 4,
                prompt_token_budget: 32,
            },
            student: StudentSection {
                window: 4,
                d_tok: 10,
                d_hidden: 16,
            },
            distill_train: DistillTrainSection {
                steps: 400,
                batch_size: 8,
                learning_rate: 0.02,
                ckpt_every: 100,
                eval_every: 50,
                val_fraction: 0.15,
            },
            eval: EvalSection {
                cosine_threshold: 0.8,
                decode_max_len: 48,
            },
            ctr: CtrSection {
                d_id: 8,
                d_proj: 12,
                head_hidden: vec![32, 16],
                k_top: 3,
                p_max: 0.5,
                lora_rank: 2,
                lora_alpha: 2.0,
                epochs: 2,
                batch_size: 32,
                learning_rate: 0.02,
            },
            ablate: AblateSection { n_seeds: 2 },
            serving: ServingSection {
                hot_mass_fraction: 0.2,
                lru_capacity: 240,
                trace_len: 20_000,
            },
            latency: LatencySection {
                hot_hit_us: 1,
                lru_hit_us: 5,
                compute_miss_us: 80,
                ctr_forward_us: 30,
            },
        }
    }

    /// The profile the acceptance experiments run on: minutes, not hours.
    /// The window is wider than the tiny default so generation can keep the
    /// item payload in view while emitting a whole record.
    pub fn desk() -> Self {
        let mut cfg = Self::tiny();
        cfg.profile = "desk".into();
        cfg.synth.n_items = 2_400;
        cfg.synth.n_users = 900;
        cfg.synth.n_rows = 30_000;
        cfg.synth.max_history = 10;
        cfg.synth.n_categories = 5;
        cfg.synth.n_brands = 10;
        cfg.synth.n_flavors = 8;
        cfg.synth.affinity_weight = 6.5;
        cfg.synth.popularity_weight = 0.35;
        cfg.knowledge = KnowledgeSection {
            n_item_subjects: 420,
            min_per_category: 4,
            n_user_subjects: 120,
            example_pool_size: 6,
            prompt_token_budget: 48,
        };
        cfg.student = StudentSection {
            window: 16,
            d_tok: 14,
            d_hidden: 32,
        };
        cfg.distill_train = DistillTrainSection {
            steps: 1_500,
            batch_size: 16,
            learning_rate: 0.01,
            ckpt_every: 150,
            eval_every: 150,
            val_fraction: 0.15,
        };
        cfg.ctr = CtrSection {
            d_id: 12,
            d_proj: 24,
            head_hidden: vec![48, 24],
            k_top: 3,
            p_max: 0.5,
            lora_rank: 4,
            lora_alpha: 4.0,
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.01,
        };
        cfg.ablate = AblateSection { n_seeds: 5 };
        cfg.serving = ServingSection {
            hot_mass_fraction: 0.2,
            lru_capacity: 2_400,
            trace_len: 100_000,
        };
        cfg
    }

    /// Larger optional profile for longer experiments.
    pub fn stress() -> Self {
        let mut cfg = Self::desk();
        cfg.profile = "stress".into();
        cfg.synth.n_items = 4_000;
        cfg.synth.n_users = 3_000;
        cfg.synth.n_rows = 80_000;
        cfg.knowledge.n_item_subjects = 1_000;
        cfg.knowledge.n_user_subjects = 300;
        cfg.distill_train.steps = 8_000;
        cfg.distill_train.ckpt_every = 1_000;
        cfg.ctr.epochs = 3;
        cfg.serving.trace_len = 300_000;
        cfg
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "stress" => Ok(Self::stress()),
            other => Err(Error::InvalidConfig(format!(
                "unknown profile '{other}' (expected tiny, desk or stress)"
            ))),
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.knowledge.prompt_token_budget == 0 {
            return Err(Error::InvalidConfig(
                "knowledge.prompt_token_budget must be ≥ 1".into(),
            ));
        }
        if self.student.window == 0 || self.student.d_tok == 0 || self.student.d_hidden == 0 {
            return Err(Error::InvalidConfig(
                "student dimensions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.distill_train.val_fraction) {
            return Err(Error::InvalidConfig(
                "distill_train.val_fraction must be in [0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eval.cosine_threshold) {
            return Err(Error::InvalidConfig(
                "eval.cosine_threshold must be in [0, 1]".into(),
            ));
        }
        if self.ctr.k_top == 0 {
            return Err(Error::InvalidConfig("ctr.k_top must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctr.p_max) {
            return Err(Error::InvalidConfig("ctr.p_max must be in [0, 1]".into()));
        }
        if self.ablate.n_seeds == 0 {
            return Err(Error::InvalidConfig("ablate.n_seeds must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.serving.hot_mass_fraction) {
            return Err(Error::InvalidConfig(
                "serving.hot_mass_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn ctr_config(&self) -> CtrConfig {
        CtrConfig {
            d_id: self.ctr.d_id,
            d_proj: self.ctr.d_proj,
            head_hidden: self.ctr.head_hidden.clone(),
            k_top: self.ctr.k_top,
            p_max: self.ctr.p_max,
            lora_rank: self.ctr.lora_rank,
            lora_alpha: self.ctr.lora_alpha,
            epochs: self.ctr.epochs,
            batch_size: self.ctr.batch_size,
            learning_rate: self.ctr.learning_rate,
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            window: self.student.window,
            d_tok: self.student.d_tok,
            d_hidden: self.student.d_hidden,
        }
    }

    pub fn distill_train_config(&self) -> TrainStudentConfig {
        TrainStudentConfig {
            steps: self.distill_train.steps,
            batch_size: self.distill_train.batch_size,
            learning_rate: self.distill_train.learning_rate,
            ckpt_every: self.distill_train.ckpt_every,
            eval_every: self.distill_train.eval_every,
        }
    }

    pub fn latency_model(&self) -> LatencyModel {
        LatencyModel {
            hot_hit_us: self.latency.hot_hit_us,
            lru_hit_us: self.latency.lru_hit_us,
            compute_miss_us: self.latency.compute_miss_us,
            ctr_forward_us: self.latency.ctr_forward_us,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid_and_distinct() {
        for name in ["tiny", "desk", "stress"] {
            let cfg = RunConfig::profile(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.profile, name);
        }
        assert!(RunConfig::profile("huge").is_err());
    }

    #[test]
    fn toml_roundtrip_is_stable() {
        let cfg = RunConfig::desk();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        // Echoing twice is byte-identical.
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::tiny().to_toml();
        text.push_str("\nmystery_knob = 3\n");
        let r: std::result::Result<RunConfig, _> = toml::from_str(&text);
        assert!(r.is_err());
    }

    #[test]
    fn config_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, RunConfig::tiny().to_toml()).unwrap();
        let cfg = RunConfig::from_toml_file(&path).unwrap();
        assert_eq!(cfg, RunConfig::tiny());
    }

    #[test]
    fn invalid_values_name_the_key() {
        let mut cfg = RunConfig::tiny();
        cfg.eval.cosine_threshold = 1.5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("cosine_threshold"), "{err}");
    }
}
