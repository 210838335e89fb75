//! Network configuration: the full-size default, the desk-scale `tiny`
//! preset, and the twelve ablation variants.
//!
//! Configs are read from TOML key-value files. A file may carry a `[run]`
//! table with CLI run settings next to the top-level network keys.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionSpec;
use crate::blocks::{BlockConfig, ExpansionBasis};
use crate::blurpool::Pooling;
use crate::error::{Error, Result};
use crate::ops::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Layers per dense block.
    pub blocks: Vec<usize>,
    /// Output channels of the transition after each block but the last.
    pub transitions: Vec<usize>,
    pub attention: bool,
    /// Index of the first dense block built from attention-augmented layers.
    pub attention_from: usize,
    /// Append the single-layer bottleneck block before the head.
    pub final_bottleneck: bool,
    pub growth: usize,
    pub expansion: usize,
    pub expansion_basis: ExpansionBasis,
    pub activation: Activation,
    pub pooling: Pooling,
    pub blur_n: usize,
    pub heads: usize,
    pub kappa: f64,
    pub upsilon: f64,
    /// Attention layers over more than this many positions log a warning.
    pub attention_hw_budget: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_height: 224,
            input_width: 224,
            input_channels: 3,
            blocks: vec![8, 8, 6, 8, 10, 12, 14, 32],
            transitions: vec![64, 64, 64, 64, 64, 128, 128],
            attention: true,
            attention_from: 2,
            final_bottleneck: true,
            growth: 10,
            expansion: 4,
            expansion_basis: ExpansionBasis::Growth,
            activation: Activation::Mish,
            pooling: Pooling::Blur,
            blur_n: 2,
            heads: 4,
            kappa: 0.25,
            upsilon: 0.25,
            attention_hw_budget: 1024,
        }
    }
}

/// `(attention, pooling, activation)` of ablation architectures 1 to 12.
pub const ABLATIONS: [(bool, Pooling, Activation); 12] = [
    (true, Pooling::Blur, Activation::Mish),
    (false, Pooling::Blur, Activation::Mish),
    (false, Pooling::Average, Activation::Mish),
    (true, Pooling::Average, Activation::Mish),
    (true, Pooling::Blur, Activation::Relu),
    (false, Pooling::Average, Activation::Relu),
    (true, Pooling::Average, Activation::Relu),
    (false, Pooling::Blur, Activation::Relu),
    (false, Pooling::Max, Activation::Mish),
    (true, Pooling::Max, Activation::Mish),
    (false, Pooling::Max, Activation::Relu),
    (true, Pooling::Max, Activation::Relu),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Default,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::config(format!("unknown preset `{other}` (default|tiny)"))),
        }
    }
}

impl NetworkConfig {
    /// 32x32 input, three blocks of two layers, 16-channel transitions,
    /// attention in the last stage.
    pub fn tiny() -> Self {
        NetworkConfig {
            input_height: 32,
            input_width: 32,
            blocks: vec![2, 2, 2],
            transitions: vec![16, 16],
            ..NetworkConfig::default()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Default => NetworkConfig::default(),
            Preset::Tiny => NetworkConfig::tiny(),
        }
    }

    /// Ablation architecture `arch` (1-based) applied to `self`.
    pub fn with_ablation(&self, arch: usize) -> Result<Self> {
        let (attention, pooling, activation) = *arch
            .checked_sub(1)
            .and_then(|i| ABLATIONS.get(i))
            .ok_or_else(|| Error::config(format!("ablation architecture {arch} is not in 1..=12")))?;
        Ok(NetworkConfig {
            attention,
            pooling,
            activation,
            ..self.clone()
        })
    }

    pub fn ablation(arch: usize) -> Result<Self> {
        NetworkConfig::default().with_ablation(arch)
    }

    pub fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            heads: self.heads,
            kappa: self.kappa,
            upsilon: self.upsilon,
        }
    }

    pub fn block_config(&self, attention: bool) -> BlockConfig {
        BlockConfig {
            expansion: self.expansion,
            growth: self.growth,
            activation: self.activation,
            attention: attention.then(|| self.attention_spec()),
            basis: self.expansion_basis,
        }
    }

    pub fn block_uses_attention(&self, block: usize) -> bool {
        self.attention && block >= self.attention_from
    }

    /// Spatial size `(h, w)` at which dense block `i` runs; index
    /// `blocks.len()` is the map the head pools.
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![(self.input_height, self.input_width)];
        for _ in 1..self.blocks.len() {
            let (h, w) = *sizes.last().expect("non-empty");
            sizes.push((h.div_ceil(2), w.div_ceil(2)));
        }
        sizes
    }

    /// Spatial side lengths from the input down to the pooled head input.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.stage_sizes().iter().map(|s| s.0).collect();
        t.push(1);
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::config("input dimensions must be positive"));
        }
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(Error::config("need at least one dense block, each with at least one layer"));
        }
        if self.transitions.len() + 1 != self.blocks.len() {
            return Err(Error::config(format!(
                "{} dense blocks need {} transitions, got {}",
                self.blocks.len(),
                self.blocks.len() - 1,
                self.transitions.len()
            )));
        }
        if self.transitions.contains(&0) {
            return Err(Error::config("transition widths must be positive"));
        }
        if self.blur_n == 0 {
            return Err(Error::config("blur filter size must be at least 1"));
        }
        let attn_anywhere = self.attention && (self.attention_from < self.blocks.len() || self.final_bottleneck);
        for attention in [false, true] {
            if attention && !attn_anywhere {
                continue;
            }
            self.block_config(attention).validate()?;
        }
        if attn_anywhere {
            let spec = self.attention_spec();
            let mut c = self.input_channels;
            for (i, &n) in self.blocks.iter().enumerate() {
                for l in 0..n {
                    if self.block_uses_attention(i) {
                        let e = self.block_config(true).expanded(c + l * self.growth);
                        spec.depths(e).map_err(|err| {
                            Error::config(format!("dense block {} layer {l}: {err}", i + 1))
                        })?;
                    }
                }
                c += n * self.growth;
                if let Some(&t) = self.transitions.get(i) {
                    c = t;
                }
            }
            if self.final_bottleneck {
                spec.depths(self.block_config(true).expanded(c))?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(ConfigFile::parse(s)?.network)
    }

    /// First 8 bytes (big-endian) of SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        u64::from_be_bytes(out)
    }
}

/// Optional `[run]` table: CLI defaults that flags override.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub images: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub momentum: Option<f64>,
    pub lr_min: Option<f64>,
    pub lr_max: Option<f64>,
    pub stepsize: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub max_shift: Option<usize>,
    pub out: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub network: NetworkConfig,
    pub run: RunConfig,
}

impl ConfigFile {
    pub fn parse(s: &str) -> Result<Self> {
        let mut table: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let run = match table.remove("run") {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| Error::config(format!("[run]: {e}")))?,
            None => RunConfig::default(),
        };
        let network: NetworkConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        Ok(ConfigFile { network, run })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ConfigFile::parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_trace_halves_to_one() {
        assert_eq!(
            NetworkConfig::default().spatial_trace(),
            vec![224, 112, 56, 28, 14, 7, 4, 2, 1]
        );
        assert_eq!(NetworkConfig::tiny().spatial_trace(), vec![32, 16, 8, 1]);
    }

    #[test]
    fn presets_validate() {
        NetworkConfig::default().validate().unwrap();
        NetworkConfig::tiny().validate().unwrap();
        for arch in 1..=12 {
            NetworkConfig::ablation(arch).unwrap().validate().unwrap();
        }
        assert!(NetworkConfig::ablation(0).is_err());
        assert!(NetworkConfig::ablation(13).is_err());
    }

    #[test]
    fn ablation_two_is_attention_free_blur_mish() {
        let c = NetworkConfig::ablation(2).unwrap();
        assert!(!c.attention);
        assert_eq!((c.pooling, c.activation), (Pooling::Blur, Activation::Mish));
        assert!((0..8).all(|b| !c.block_uses_attention(b)));
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = NetworkConfig::tiny();
        let back = NetworkConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), NetworkConfig::default().hash());
    }

    #[test]
    fn partial_file_with_run_table() {
        let f = ConfigFile::parse("blocks = [1, 1]\ntransitions = [8]\npooling = \"avg\"\n[run]\nseed = 7\n").unwrap();
        assert_eq!(f.network.blocks, vec![1, 1]);
        assert_eq!(f.network.pooling, Pooling::Average);
        assert_eq!(f.network.input_height, 224);
        assert_eq!(f.run.seed, Some(7));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ConfigFile::parse("bogus_key = 1").is_err());
        let mut c = NetworkConfig::tiny();
        c.transitions = vec![16];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.heads = 64;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.growth = 0;
        assert!(c.validate().is_err());
    }
}
