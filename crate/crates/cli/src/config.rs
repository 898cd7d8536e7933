//! Layered configuration: built-in defaults, then the TOML file, then flags.

use std::path::Path;

use guidecap::corpus::{FeatureDims, SyntheticWorldSpec};
use guidecap::decoding::BeamConfig;
use guidecap::model::{InputFlags, ModelConfig};
use guidecap::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::{DecodeArgs, ModelArgs, OptimArgs, SynthArgs};
use crate::error::CliError;

pub const ABLATIONS: [&str; 7] = ["T", "G", "T+G", "T+G+R_GR", "T+G+R_FRCNN", "T+G+R_GR+R_FRCNN", "copy"];
pub const FULL_ABLATION: &str = "T+G+R_GR+R_FRCNN";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub synth: Option<SynthConfig>,
    pub model: Option<ModelOverrides>,
    pub train: Option<TrainConfig>,
    pub decode: Option<BeamConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub world: SyntheticWorldSpec,
    pub n_images: usize,
    pub guides_per_image: usize,
    pub split: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { world: SyntheticWorldSpec::default(), n_images: 2000, guides_per_image: 3, split: vec![0.8, 0.1, 0.1] }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| CliError::Usage(format!("bad {what} `{s}`"))))
        .collect()
}

pub fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    parse_list(s, what)
}

pub fn resolve_synth(file: &FileConfig, a: &SynthArgs) -> Result<SynthConfig, CliError> {
    let mut c = file.synth.clone().unwrap_or_default();
    let w = &mut c.world;
    w.rng_seed = a.seed.unwrap_or(w.rng_seed);
    w.n_objects = a.n_objects.unwrap_or(w.n_objects);
    w.n_attributes = a.n_attributes.unwrap_or(w.n_attributes);
    w.n_relations = a.n_relations.unwrap_or(w.n_relations);
    w.n_places = a.n_places.unwrap_or(w.n_places);
    w.feature_noise_sigma = a.noise.unwrap_or(w.feature_noise_sigma);
    if let Some(d) = &a.feature_dims {
        let v: Vec<usize> = parse_list(d, "feature dims")?;
        let [global, regional_gr, regional_frcnn, max_regions] = v[..] else {
            return Err(CliError::Usage(format!("feature dims need four numbers, got `{d}`")));
        };
        w.dims = FeatureDims { global, regional_gr, regional_frcnn, max_regions };
    }
    c.n_images = a.n_images.unwrap_or(c.n_images);
    c.guides_per_image = a.guides_per_image.unwrap_or(c.guides_per_image);
    if let Some(s) = &a.split {
        c.split = parse_floats(s, "split")?;
    }
    if c.split.len() != 3 || c.split.iter().any(|f| !(*f >= 0.0)) || (c.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CliError::Usage(format!("split {:?} must be three non-negative fractions summing to 1", c.split)));
    }
    Ok(c)
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub ablation: Option<String>,
    pub preset: Option<String>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub fc_hidden: Option<usize>,
    pub max_caption_len: Option<usize>,
    pub dropout: Option<f32>,
}

/// Ablation name, validated against the fixed list.
pub fn parse_ablation(name: &str) -> Result<&'static str, CliError> {
    ABLATIONS
        .iter()
        .find(|a| **a == name)
        .copied()
        .ok_or_else(|| CliError::Usage(format!("unknown ablation `{name}`; valid names: {}", ABLATIONS.join(", "))))
}

/// Resolved model configuration and its ablation name.
pub fn resolve_model(
    file: &FileConfig,
    a: &ModelArgs,
    vocab_size: usize,
    dims: FeatureDims,
) -> Result<(ModelConfig, &'static str), CliError> {
    let f = file.model.clone().unwrap_or_default();
    let ablation = parse_ablation(a.ablation.as_deref().or(f.ablation.as_deref()).unwrap_or(FULL_ABLATION))?;
    if ablation == "copy" {
        return Err(CliError::Usage("the copy baseline has no parameters; use `decode --ablation copy`".into()));
    }
    let flags: InputFlags = ablation.parse().map_err(|e: guidecap::Error| CliError::Usage(e.to_string()))?;
    let mut c = match a.preset.as_deref().or(f.preset.as_deref()).unwrap_or("desk") {
        "desk" => ModelConfig::desk(vocab_size),
        "paper" => ModelConfig::paper(vocab_size),
        other => return Err(CliError::Usage(format!("unknown preset `{other}`; valid: desk, paper"))),
    };
    c.input_flags = flags;
    c.feature_dims = dims;
    c.d_model = a.d_model.or(f.d_model).unwrap_or(c.d_model);
    c.n_layers = a.layers.or(f.n_layers).unwrap_or(c.n_layers);
    c.n_heads = a.heads.or(f.n_heads).unwrap_or(c.n_heads);
    c.d_ff = a.d_ff.or(f.d_ff).unwrap_or(c.d_ff);
    c.fc_hidden = a.fc_hidden.or(f.fc_hidden).unwrap_or(c.fc_hidden);
    c.max_caption_len = a.max_caption_len.or(f.max_caption_len).unwrap_or(c.max_caption_len);
    c.dropout = a.dropout.or(f.dropout).unwrap_or(c.dropout);
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((c, ablation))
}

pub fn resolve_train(file: &FileConfig, a: &OptimArgs) -> Result<TrainConfig, CliError> {
    let mut c = file.train.clone().unwrap_or_default();
    c.learning_rate = a.lr.unwrap_or(c.learning_rate);
    c.decay_rate = a.decay.unwrap_or(c.decay_rate);
    if a.decay_every.is_some() {
        c.decay_every_steps = a.decay_every;
    }
    c.batch_size = a.batch_size.unwrap_or(c.batch_size);
    c.max_steps = a.max_steps.unwrap_or(c.max_steps);
    c.eval_every_steps = a.eval_every.unwrap_or(c.eval_every_steps);
    c.rng_seed = a.seed.unwrap_or(c.rng_seed);
    c.beam_width = a.beam_width.unwrap_or(c.beam_width);
    if a.max_grad_norm.is_some() {
        c.max_grad_norm = a.max_grad_norm;
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

/// Beam settings; `max_len` falls back to the model's caption limit.
pub fn resolve_beam(file: &FileConfig, a: &DecodeArgs, model_max: usize) -> BeamConfig {
    let mut c = file.decode.unwrap_or(BeamConfig { max_len: model_max, ..BeamConfig::default() });
    c.beam_width = a.beam_width.unwrap_or(c.beam_width);
    c.max_len = a.max_len.unwrap_or(c.max_len);
    c.alpha = a.alpha.unwrap_or(c.alpha);
    c
}
