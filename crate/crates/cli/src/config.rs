//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Every key must be known; a
//! repeated key is an error. [`RunConfig::to_text`] writes every key, and
//! parsing that text gives back an identical config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sliceocc::attention::{AttentionConfig, BlockOrder};
use sliceocc::geometry::SceneConfig;
use sliceocc::model::ModelConfig;
use sliceocc::optim::AdamWConfig;
use sliceocc::synth::{FeatureRenderer, RendererMode, SceneSpec};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}: {reason}")]
    BadValue { line: usize, key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Seed for parameter initialization.
    pub seed: u64,
    /// Seed for scene generation; `None` reuses `seed`.
    pub scene_seed: Option<u64>,
    pub scene: SceneConfig,
    /// Voxel lattice x/y sizes; `None` follows the slice resolution.
    pub voxel_w: Option<usize>,
    pub voxel_l: Option<usize>,
    pub attention: AttentionConfig,
    pub renderer: RendererMode,
    pub head_width: usize,
    pub head_stages: usize,
    pub generator: SceneSpec,
    pub steps: usize,
    pub eval_every: usize,
    pub optimizer: AdamWConfig,
    /// Parameter to poison with NaN before a gradient check.
    pub inject_nan: Option<String>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let attention = AttentionConfig::default();
        Self {
            seed: 0,
            scene_seed: None,
            scene,
            voxel_w: None,
            voxel_l: None,
            head_width: attention.d_model,
            attention,
            renderer: RendererMode::default(),
            head_stages: 1,
            generator: SceneSpec::default(),
            steps: 3000,
            eval_every: 100,
            optimizer: AdamWConfig::default(),
            inject_nan: None,
            out: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_pair<T: FromStr>(v: &str) -> Result<(T, T), String>
where
    T::Err: std::fmt::Display,
{
    let (a, b) = v.split_once(',').ok_or("expected two comma-separated values")?;
    Ok((parse_num(a.trim())?, parse_num(b.trim())?))
}

fn parse_opt<T: FromStr>(v: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        parse_num(v).map(Some)
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_renderer(v: &str) -> Result<RendererMode, String> {
    match v {
        "semantic-onehot" => Ok(RendererMode::SemanticOnehot),
        "depth" => Ok(RendererMode::Depth),
        "learned-toy-encoder" => Ok(RendererMode::LearnedToyEncoder),
        _ => Err("expected semantic-onehot, depth or learned-toy-encoder".into()),
    }
}

fn renderer_name(m: RendererMode) -> &'static str {
    match m {
        RendererMode::SemanticOnehot => "semantic-onehot",
        RendererMode::Depth => "depth",
        RendererMode::LearnedToyEncoder => "learned-toy-encoder",
    }
}

fn opt_text<T: std::fmt::Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "scene_seed",
    "x_range",
    "y_range",
    "z_range",
    "W",
    "L",
    "S",
    "N_r3d",
    "C",
    "layers",
    "num_views",
    "W_v",
    "L_v",
    "H_v",
    "pillar_span",
    "D",
    "heads",
    "planar_points",
    "spatial_points",
    "scales",
    "ffn_hidden",
    "pca_before_ssca",
    "renderer",
    "head_width",
    "head_stages",
    "num_objects",
    "stacking",
    "image_width",
    "image_height",
    "camera_radius",
    "camera_height",
    "target_height",
    "fov_deg",
    "footprint",
    "tower_height",
    "gap",
    "max_attempts",
    "steps",
    "eval_every",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "inject_nan",
    "out",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax { line, text: raw.to_string() })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.to_string() });
            }
            cfg.set(key, value).map_err(|reason| ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
                reason,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Ok(Self::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let s = &mut self.scene;
        let a = &mut self.attention;
        let g = &mut self.generator;
        let o = &mut self.optimizer;
        match key {
            "seed" => self.seed = parse_num(v)?,
            "scene_seed" => self.scene_seed = parse_opt(v)?,
            "x_range" => s.x_range = parse_pair(v)?,
            "y_range" => s.y_range = parse_pair(v)?,
            "z_range" => s.z_range = parse_pair(v)?,
            "W" => s.slice_w = parse_num(v)?,
            "L" => s.slice_l = parse_num(v)?,
            "S" => s.num_slices = parse_num(v)?,
            "N_r3d" => s.pillar_points = parse_num(v)?,
            "C" => s.num_classes = parse_num(v)?,
            "layers" => s.layers = parse_num(v)?,
            "num_views" => s.num_views = parse_num(v)?,
            "W_v" => self.voxel_w = parse_opt(v)?,
            "L_v" => self.voxel_l = parse_opt(v)?,
            "H_v" => s.voxel_h = parse_num(v)?,
            "pillar_span" => s.pillar_span = parse_opt(v)?,
            "D" => a.d_model = parse_num(v)?,
            "heads" => a.heads = parse_num(v)?,
            "planar_points" => a.planar_points = parse_num(v)?,
            "spatial_points" => a.spatial_points = parse_num(v)?,
            "scales" => a.image_levels = parse_num(v)?,
            "ffn_hidden" => a.ffn_hidden = parse_num(v)?,
            "pca_before_ssca" => {
                a.block_order = if parse_bool(v)? { BlockOrder::PlanarFirst } else { BlockOrder::SpatialFirst }
            }
            "renderer" => self.renderer = parse_renderer(v)?,
            "head_width" => self.head_width = parse_num(v)?,
            "head_stages" => self.head_stages = parse_num(v)?,
            "num_objects" => g.num_objects = parse_num(v)?,
            "stacking" => g.stacking = parse_num(v)?,
            "image_width" => g.image_size.0 = parse_num(v)?,
            "image_height" => g.image_size.1 = parse_num(v)?,
            "camera_radius" => g.camera_radius = parse_num(v)?,
            "camera_height" => g.camera_height = parse_num(v)?,
            "target_height" => g.target_height = parse_num(v)?,
            "fov_deg" => g.fov_deg = parse_num(v)?,
            "footprint" => g.footprint = parse_pair(v)?,
            "tower_height" => g.tower_height = parse_pair(v)?,
            "gap" => g.gap = parse_num(v)?,
            "max_attempts" => g.max_attempts = parse_num(v)?,
            "steps" => self.steps = parse_num(v)?,
            "eval_every" => self.eval_every = parse_num(v)?,
            "lr" => o.lr = parse_num(v)?,
            "weight_decay" => o.weight_decay = parse_num(v)?,
            "beta1" => o.beta1 = parse_num(v)?,
            "beta2" => o.beta2 = parse_num(v)?,
            "adam_eps" => o.eps = parse_num(v)?,
            "inject_nan" => self.inject_nan = if v == "none" { None } else { Some(v.to_string()) },
            "out" => self.out = PathBuf::from(v),
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let a = &self.attention;
        let g = &self.generator;
        let o = &self.optimizer;
        let pair = |p: (f64, f64)| format!("{},{}", p.0, p.1);
        let mut out = String::new();
        for &key in KEYS {
            let value = match key {
                "seed" => self.seed.to_string(),
                "scene_seed" => opt_text(&self.scene_seed, "auto"),
                "x_range" => pair(s.x_range),
                "y_range" => pair(s.y_range),
                "z_range" => pair(s.z_range),
                "W" => s.slice_w.to_string(),
                "L" => s.slice_l.to_string(),
                "S" => s.num_slices.to_string(),
                "N_r3d" => s.pillar_points.to_string(),
                "C" => s.num_classes.to_string(),
                "layers" => s.layers.to_string(),
                "num_views" => s.num_views.to_string(),
                "W_v" => opt_text(&self.voxel_w, "auto"),
                "L_v" => opt_text(&self.voxel_l, "auto"),
                "H_v" => s.voxel_h.to_string(),
                "pillar_span" => opt_text(&s.pillar_span, "auto"),
                "D" => a.d_model.to_string(),
                "heads" => a.heads.to_string(),
                "planar_points" => a.planar_points.to_string(),
                "spatial_points" => a.spatial_points.to_string(),
                "scales" => a.image_levels.to_string(),
                "ffn_hidden" => a.ffn_hidden.to_string(),
                "pca_before_ssca" => (a.block_order == BlockOrder::PlanarFirst).to_string(),
                "renderer" => renderer_name(self.renderer).to_string(),
                "head_width" => self.head_width.to_string(),
                "head_stages" => self.head_stages.to_string(),
                "num_objects" => g.num_objects.to_string(),
                "stacking" => g.stacking.to_string(),
                "image_width" => g.image_size.0.to_string(),
                "image_height" => g.image_size.1.to_string(),
                "camera_radius" => g.camera_radius.to_string(),
                "camera_height" => g.camera_height.to_string(),
                "target_height" => g.target_height.to_string(),
                "fov_deg" => g.fov_deg.to_string(),
                "footprint" => pair(g.footprint),
                "tower_height" => pair(g.tower_height),
                "gap" => g.gap.to_string(),
                "max_attempts" => g.max_attempts.to_string(),
                "steps" => self.steps.to_string(),
                "eval_every" => self.eval_every.to_string(),
                "lr" => o.lr.to_string(),
                "weight_decay" => o.weight_decay.to_string(),
                "beta1" => o.beta1.to_string(),
                "beta2" => o.beta2.to_string(),
                "adam_eps" => o.eps.to_string(),
                "inject_nan" => opt_text(&self.inject_nan, "none"),
                "out" => self.out.display().to_string(),
                _ => unreachable!("key list and writer out of sync"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn scene_seed(&self) -> u64 {
        self.scene_seed.unwrap_or(self.seed)
    }

    /// Scene configuration with the voxel lattice resolved.
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            voxel_w: self.voxel_w.unwrap_or(self.scene.slice_w),
            voxel_l: self.voxel_l.unwrap_or(self.scene.slice_l),
            ..self.scene.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            scene: self.scene_config(),
            attention: self.attention.clone(),
            renderer: FeatureRenderer {
                mode: self.renderer,
                levels: self.attention.image_levels,
            },
            head_width: self.head_width,
            head_stages: self.head_stages,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        self.generator.clone()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval_every == 0 {
            return Err(ConfigError::Invalid("eval_every must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(ConfigError::Invalid("optimizer settings out of range".into()));
        }
        if self.generator.num_objects == 0 {
            return Err(ConfigError::Invalid("num_objects must be >= 1".into()));
        }
        Ok(())
    }
}
