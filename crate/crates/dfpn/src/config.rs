//! Model configuration from a preset name or a TOML file.
//!
//! ```toml
//! preset = "small"        # optional base: default, small or tiny
//! n_inputs = 4
//! base_channels = 16
//! attention = "both"      # none, channel, spatial or both
//! ```
//!
//! Every key is optional and overrides the preset.

use std::path::Path;

use dfpn_core::attention::AttentionMode;
use dfpn_core::model::ModelConfig;
use serde::Deserialize;

use crate::{Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: Option<String>,
    n_inputs: Option<usize>,
    base_channels: Option<usize>,
    feature_rdbs: Option<usize>,
    bottleneck_rdbs: Option<usize>,
    reconstruction_rdbs: Option<usize>,
    rdb_depth: Option<usize>,
    rdb_growth: Option<usize>,
    attention: Option<String>,
    attention_ratio: Option<usize>,
    spatial_kernel: Option<usize>,
    image_channels: Option<usize>,
}

pub fn preset(name: &str) -> Option<ModelConfig> {
    match name {
        "default" => Some(ModelConfig::default()),
        "small" => Some(ModelConfig::small()),
        "tiny" => Some(ModelConfig::tiny()),
        _ => None,
    }
}

pub fn parse_toml(text: &str) -> Result<ModelConfig> {
    let f: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut c = match &f.preset {
        Some(p) => preset(p).ok_or_else(|| Error::Config(format!("unknown preset `{p}`")))?,
        None => ModelConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = f.$field { c.$field = v; })*
        };
    }
    set!(
        n_inputs,
        base_channels,
        feature_rdbs,
        bottleneck_rdbs,
        reconstruction_rdbs,
        rdb_depth,
        rdb_growth,
        attention_ratio,
        spatial_kernel,
        image_channels
    );
    if let Some(a) = &f.attention {
        c.attention = AttentionMode::parse(a).ok_or_else(|| Error::Config(format!("unknown attention mode `{a}`")))?;
    }
    c.validate()?;
    Ok(c)
}

/// A preset name, or the path of a TOML file.
pub fn resolve(spec: &str) -> Result<ModelConfig> {
    if let Some(c) = preset(spec) {
        return Ok(c);
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
