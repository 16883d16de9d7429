//! Run configuration.
//!
//! Files are flat `key = value` lists (TOML syntax, no tables). Missing keys
//! take the desk-scale defaults of [`RunConfig::default`];
//! [`RunConfig::full_scale`] holds the full-scale values. Unknown keys are
//! rejected.
//!
//! Mini-batches are plain batches: there is no gradient accumulation over
//! smaller micro-batches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::biasreg::TermSwitches;
use crate::codec::{CodecConfig, Geometry};
use crate::error::{CoreError, Result};
use crate::recognizer::{CorpusConfig, LmConfig, PretrainSettings, SEEN_TEMPLATE, UNSEEN_TEMPLATE};
use crate::skeldata::{Protocol, SynthSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data
    /// `synth` or a path to a JSONL skeleton file.
    pub data_source: String,
    pub synth_classes: usize,
    pub synth_joints: usize,
    pub synth_frames: usize,
    pub synth_per_class: usize,
    pub synth_noise: f64,
    pub synth_subjects: u32,
    pub protocol: Protocol,
    pub seed: u64,
    pub normalize: bool,

    // stage 1: codec
    pub codec_steps: usize,
    pub codec_lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub curvature: f64,
    pub eps: f64,
    pub tau: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub zipf_alpha: f64,
    pub zipf_beta: f64,
    pub disable_zipf: bool,
    pub disable_context: bool,
    pub disable_mmd: bool,
    pub euclidean_codebook: bool,
    pub no_discretization: bool,
    /// Gumbel usage counts use geodesic distances (else Euclidean distances
    /// between the same ball points).
    pub usage_hyperbolic: bool,
    /// Perturb usage logits with Gumbel noise (off: deterministic softmax
    /// relaxation of the argmin assignment).
    pub gumbel_noise: bool,
    /// Scale codebook gradients by the inverse squared conformal factor.
    pub riemannian_scaling: bool,
    pub gradient_clip: f64,

    // stand-in language model
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ff: usize,
    pub lm_max_len: usize,
    pub corpus_sentences: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,

    // stage 2: adapters
    pub lora_steps: usize,
    pub lora_lr: f64,
    pub lora_batch: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub all_tuning: bool,
    pub template: String,
    pub list_template: String,

    // evaluation and logging
    pub unseen_runs: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_source: "synth".into(),
            synth_classes: 5,
            synth_joints: 8,
            synth_frames: 64,
            synth_per_class: 100,
            synth_noise: 0.05,
            synth_subjects: 10,
            protocol: Protocol::RandomSplit,
            seed: 7,
            normalize: true,

            codec_steps: 20_000,
            codec_lr: 2e-4,
            batch_size: 32,
            hidden: 128,
            latent_dim: 64,
            codebook_size: 64,
            curvature: 1.0,
            eps: 1e-5,
            tau: 0.5,
            omega1: 0.02,
            omega2: 0.2,
            zipf_alpha: 1.0,
            zipf_beta: 2.7,
            disable_zipf: false,
            disable_context: false,
            disable_mmd: false,
            euclidean_codebook: false,
            no_discretization: false,
            usage_hyperbolic: true,
            gumbel_noise: false,
            riemannian_scaling: false,
            gradient_clip: 1.0,

            lm_layers: 4,
            lm_heads: 4,
            lm_ff: 256,
            lm_max_len: 64,
            corpus_sentences: 3000,
            pretrain_steps: 1500,
            pretrain_lr: 3e-3,
            pretrain_batch: 32,

            lora_steps: 5_000,
            lora_lr: 3e-3,
            lora_batch: 16,
            lora_rank: 8,
            lora_alpha: 16.0,
            all_tuning: false,
            template: SEEN_TEMPLATE.into(),
            list_template: UNSEEN_TEMPLATE.into(),

            unseen_runs: 5,
            log_every: 50,
        }
    }
}

impl RunConfig {
    /// Full-scale values of record.
    pub fn full_scale() -> Self {
        Self {
            codec_steps: 300_000,
            batch_size: 256,
            latent_dim: 5120,
            codebook_size: 512,
            lora_steps: 75_000,
            lora_rank: 64,
            lora_alpha: 16.0,
            gumbel_noise: true,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Applies `key=value` overrides. Values are parsed as TOML literals,
    /// falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()).map_err(|e| CoreError::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("override '{o}' is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            if !table.contains_key(k) {
                return Err(CoreError::Config(format!("unknown config key '{k}'")));
            }
            let parsed = toml::from_str::<toml::Table>(&format!("x = {v}"))
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            let parsed = match (&table[k], parsed) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, p) => p,
            };
            table.insert(k.to_string(), parsed);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.omega1 < 0.0 || self.omega2 < 0.0 {
            return bad(format!(
                "loss weights must be non-negative, got {} and {}",
                self.omega1, self.omega2
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 || self.lora_batch == 0 || self.pretrain_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.synth_frames % 4 != 0 {
            return bad(format!(
                "synthetic frame count {} is not a multiple of 4",
                self.synth_frames
            ));
        }
        if self.lm_heads == 0 || self.latent_dim % self.lm_heads != 0 {
            return bad(format!(
                "latent width {} does not split into {} heads",
                self.latent_dim, self.lm_heads
            ));
        }
        self.codec_config().validate()?;
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.synth_classes,
            joints: self.synth_joints,
            frames: self.synth_frames,
            per_class: self.synth_per_class,
            noise_scale: self.synth_noise,
            subjects: self.synth_subjects,
            seed: self.seed,
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        self.codec_config_for(self.synth_joints)
    }

    pub fn codec_config_for(&self, joints: usize) -> CodecConfig {
        CodecConfig {
            joints,
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            curvature: self.curvature,
            eps: self.eps,
            geometry: if self.euclidean_codebook {
                Geometry::Euclidean
            } else {
                Geometry::Hyperbolic
            },
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            d_model: self.latent_dim,
            layers: self.lm_layers,
            heads: self.lm_heads,
            ff: self.lm_ff,
            max_len: self.lm_max_len,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            sentences: self.corpus_sentences,
            slot_len: self.synth_frames / 4,
            held_out_fraction: 0.1,
        }
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            steps: self.pretrain_steps,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
        }
    }

    pub fn term_switches(&self) -> TermSwitches {
        TermSwitches {
            zipf: !self.disable_zipf,
            context: !self.disable_context,
            mmd: !self.disable_mmd,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = RunConfig::from_toml("codec_steps = 10\nprotocol = \"unseen-class\"\n").unwrap();
        assert_eq!(cfg.codec_steps, 10);
        assert_eq!(cfg.protocol, Protocol::UnseenClass);
        assert_eq!(cfg.codebook_size, 64);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("codebok_size = 8").is_err());
        assert!(RunConfig::from_toml("omega2 = -1.0").is_err());
        assert!(RunConfig::from_toml("codebook_size = 7").is_err());
        assert!(RunConfig::from_toml("tau = 0.0").is_err());
    }

    #[test]
    fn overrides_parse_literals() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "omega2=0",
                "euclidean_codebook=true",
                "data_source=data/x.jsonl",
                "protocol=subject-split",
            ])
            .unwrap();
        assert_eq!(cfg.omega2, 0.0);
        assert!(cfg.euclidean_codebook);
        assert_eq!(cfg.data_source, "data/x.jsonl");
        assert_eq!(cfg.protocol, Protocol::SubjectSplit);
        assert!(RunConfig::default().with_overrides(&["nope=1"]).is_err());
    }

    #[test]
    fn full_scale_values() {
        let p = RunConfig::full_scale();
        assert_eq!(
            (p.codebook_size, p.batch_size, p.latent_dim),
            (512, 256, 5120)
        );
        assert_eq!((p.lora_rank, p.lora_alpha), (64, 16.0));
        assert_eq!((p.omega1, p.omega2, p.curvature), (0.02, 0.2, 1.0));
    }
}
