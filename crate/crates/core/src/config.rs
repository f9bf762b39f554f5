//! JSON spec documents exchanged by the CLI and HTTP API.
//!
//! Colors are `#RRGGBB` strings and concepts are `"text:weight"` entries.
//! Validation failures name the offending field path.

use serde::{Deserialize, Serialize};

use crate::color::{RegionColorTarget, SigmaPolicy};
use crate::error::Error;
use crate::harmonize::{CompositionConfig, ConceptPrompt, GuidanceConfig, DEFAULT_MAIN_PROMPT};
use crate::pipeline::{MakeupSpec, ReferenceInput};
use crate::raster::{parse_hex_color, to_hex_color};
use crate::reference::ReferenceConfig;
use crate::regions::{RegionConfig, KNOWN_REGIONS};

/// A validation failure at a field path such as `color_targets[0].alpha`.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct SpecError {
    pub field: String,
    pub message: String,
}

impl SpecError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<SpecError> for Error {
    fn from(e: SpecError) -> Self {
        Error::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorTargetDoc {
    pub region: String,
    pub color: String,
    pub alpha: f64,
    /// Explicit target standard deviation; omitted means equalize.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<[f64; 3]>,
}

fn default_main_prompt() -> String {
    DEFAULT_MAIN_PROMPT.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    #[serde(default)]
    pub color_targets: Vec<ColorTargetDoc>,
    #[serde(default)]
    pub concepts: Vec<String>,
    #[serde(default = "default_main_prompt")]
    pub main_prompt: String,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default = "defaults::t_star")]
    pub t_star: usize,
    #[serde(default = "defaults::inversion_steps")]
    pub inversion_steps: usize,
    #[serde(default = "defaults::reverse_steps")]
    pub reverse_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub guidance_scale: f64,
    #[serde(default)]
    pub regions: RegionConfig,
    #[serde(default)]
    pub reference_options: ReferenceConfig,
}

mod defaults {
    pub fn t_star() -> usize {
        300
    }
    pub fn inversion_steps() -> usize {
        20
    }
    pub fn reverse_steps() -> usize {
        30
    }
}

impl Default for SpecDocument {
    fn default() -> Self {
        Self::from_spec(&MakeupSpec::default())
    }
}

impl SpecDocument {
    /// Parses JSON; type errors carry the path of the offending field.
    pub fn parse(json: &str) -> Result<Self, SpecError> {
        let de = &mut serde_json::Deserializer::from_str(json);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "spec".to_string() } else { path };
            SpecError::new(field, e.into_inner().to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec documents always serialize")
    }

    pub fn from_spec(spec: &MakeupSpec) -> Self {
        Self {
            color_targets: spec
                .color_targets
                .iter()
                .map(|t| ColorTargetDoc {
                    region: t.region.clone(),
                    color: to_hex_color(t.mu_tgt),
                    alpha: t.alpha,
                    sigma: match t.sigma_policy {
                        SigmaPolicy::Equalize => None,
                        SigmaPolicy::Explicit { sigma_tgt } => Some(sigma_tgt),
                    },
                })
                .collect(),
            concepts: spec.composition.concepts.iter().map(ConceptPrompt::to_entry).collect(),
            main_prompt: spec.composition.main_prompt.clone(),
            guidance: spec.guidance,
            t_star: spec.t_star,
            inversion_steps: spec.inversion_steps,
            reverse_steps: spec.reverse_steps,
            seed: spec.seed,
            guidance_scale: spec.guidance_scale,
            regions: spec.regions,
            reference_options: spec.reference_config,
        }
    }

    /// Field-level validation against a schedule of `train_timesteps` steps,
    /// without the reference image.
    pub fn check(&self, train_timesteps: usize) -> Result<(), SpecError> {
        self.build(None, train_timesteps).map(|_| ())
    }

    /// Converts to a [`MakeupSpec`], validating every field.
    pub fn into_spec(self, reference: Option<ReferenceInput>, train_timesteps: usize) -> Result<MakeupSpec, SpecError> {
        self.build(reference, train_timesteps)
    }

    fn build(&self, reference: Option<ReferenceInput>, train_timesteps: usize) -> Result<MakeupSpec, SpecError> {
        let mut color_targets = Vec::with_capacity(self.color_targets.len());
        for (i, t) in self.color_targets.iter().enumerate() {
            let at = |f: &str| format!("color_targets[{i}].{f}");
            if !targetable_regions().contains(&t.region.as_str()) {
                return Err(SpecError::new(at("region"), format!("unknown region '{}'", t.region)));
            }
            let mu_tgt = parse_hex_color(&t.color).map_err(|e| SpecError::new(at("color"), e.to_string()))?;
            if !(0.0..=1.0).contains(&t.alpha) {
                return Err(SpecError::new(at("alpha"), format!("must lie in [0, 1], got {}", t.alpha)));
            }
            let sigma_policy = match t.sigma {
                None => SigmaPolicy::Equalize,
                Some(s) if s.iter().all(|v| *v > 0.0 && v.is_finite()) => SigmaPolicy::Explicit { sigma_tgt: s },
                Some(s) => return Err(SpecError::new(at("sigma"), format!("must be positive, got {s:?}"))),
            };
            color_targets.push(RegionColorTarget {
                region: t.region.clone(),
                mu_tgt,
                alpha: t.alpha,
                sigma_policy,
            });
        }
        let concepts = self
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| ConceptPrompt::parse(c).map_err(|e| SpecError::new(format!("concepts[{i}]"), e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if self.main_prompt.trim().is_empty() {
            return Err(SpecError::new("main_prompt", "must not be empty"));
        }
        if !(0.0..=1.0).contains(&self.guidance.lambda) {
            return Err(SpecError::new(
                "guidance.lambda",
                format!("must lie in [0, 1], got {}", self.guidance.lambda),
            ));
        }
        if self.t_star == 0 || self.t_star > train_timesteps {
            return Err(SpecError::new(
                "t_star",
                format!("must lie in [1, {train_timesteps}], got {}", self.t_star),
            ));
        }
        for (name, v) in [("inversion_steps", self.inversion_steps), ("reverse_steps", self.reverse_steps)] {
            if v == 0 || v > self.t_star {
                return Err(SpecError::new(name, format!("must lie in [1, t_star={}], got {v}", self.t_star)));
            }
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(SpecError::new("guidance_scale", format!("must be >= 0, got {}", self.guidance_scale)));
        }
        for (name, v) in [
            ("regions.eyeshadow_decay", self.regions.eyeshadow_decay),
            ("regions.lip_decay", self.regions.lip_decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SpecError::new(name, format!("must be positive, got {v}")));
            }
        }
        let k = self.regions.eyeshadow_kernel;
        if k.height == 0 || k.width == 0 {
            return Err(SpecError::new("regions.eyeshadow_kernel", "must have a nonempty footprint"));
        }
        let r = &self.reference_options;
        if r.bins == 0 {
            return Err(SpecError::new("reference_options.bins", "must be at least 1"));
        }
        if !(r.smoothing > 0.0 && r.smoothing.is_finite()) {
            return Err(SpecError::new("reference_options.smoothing", "must be positive"));
        }
        if r.eye_kernel.height == 0 || r.eye_kernel.width == 0 {
            return Err(SpecError::new("reference_options.eye_kernel", "must have a nonempty footprint"));
        }
        if color_targets.is_empty() && concepts.is_empty() && reference.is_none() {
            return Err(SpecError::new(
                "spec",
                "needs at least one color target, concept or reference image",
            ));
        }
        let spec = MakeupSpec {
            color_targets,
            reference,
            composition: CompositionConfig {
                main_prompt: self.main_prompt.clone(),
                concepts,
            },
            guidance: self.guidance,
            regions: self.regions,
            reference_config: self.reference_options,
            t_star: self.t_star,
            inversion_steps: self.inversion_steps,
            reverse_steps: self.reverse_steps,
            seed: self.seed,
            guidance_scale: self.guidance_scale,
        };
        spec.validate(train_timesteps)
            .map_err(|e| SpecError::new("spec", e.to_string()))?;
        Ok(spec)
    }
}

/// Regions a color target may name.
pub fn targetable_regions() -> Vec<&'static str> {
    KNOWN_REGIONS
        .iter()
        .copied()
        .filter(|r| *r != "background")
        .collect()
}

/// JSON Schema for [`SpecDocument`].
pub fn spec_schema() -> serde_json::Value {
    let kernel = serde_json::json!({
        "type": "object",
        "additionalProperties": false,
        "properties": {
            "shape": {"enum": ["cross", "box"]},
            "height": {"type": "integer", "minimum": 1},
            "width": {"type": "integer", "minimum": 1}
        },
        "required": ["shape", "height", "width"]
    });
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "MakeupSpec",
        "type": "object",
        "additionalProperties": false,
        "properties": {
            "color_targets": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": false,
                    "properties": {
                        "region": {"enum": targetable_regions()},
                        "color": {"type": "string", "pattern": "^#[0-9A-Fa-f]{6}$"},
                        "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                        "sigma": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3}
                    },
                    "required": ["region", "color", "alpha"]
                }
            },
            "concepts": {"type": "array", "items": {"type": "string", "pattern": "^.+:\\s*-?[0-9.eE+-]+$"}},
            "main_prompt": {"type": "string", "minLength": 1, "default": DEFAULT_MAIN_PROMPT},
            "guidance": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "lambda": {"type": "number", "minimum": 0, "maximum": 1, "default": 0.15},
                    "apply_steps": {"type": "integer", "minimum": 0, "default": 2},
                    "domain": {"enum": ["latent", "pixel"], "default": "latent"}
                }
            },
            "t_star": {"type": "integer", "minimum": 1, "default": 300},
            "inversion_steps": {"type": "integer", "minimum": 1, "default": 20},
            "reverse_steps": {"type": "integer", "minimum": 1, "default": 30},
            "seed": {"type": "integer", "minimum": 0, "default": 0},
            "guidance_scale": {"type": "number", "minimum": 0, "default": 0},
            "regions": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "eyeshadow_kernel": kernel,
                    "dilation_iterations": {"type": "integer", "minimum": 0},
                    "eyeshadow_shift": {"type": ["array", "null"], "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                    "eyeshadow_decay": {"type": "number", "exclusiveMinimum": 0},
                    "lip_decay": {"type": "number", "exclusiveMinimum": 0}
                }
            },
            "reference_options": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "bins": {"type": "integer", "minimum": 1},
                    "smoothing": {"type": "number", "exclusiveMinimum": 0},
                    "eye_kernel": kernel,
                    "dilation_iterations": {"type": "integer", "minimum": 0}
                }
            }
        }
    })
}
