use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::metric::{GapProfile, LayerGap, MirOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_ms: f64,
    pub prepare_ms: f64,
    pub distance_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl Timings {
    pub fn from_profile(profile: &GapProfile, total: Duration) -> Self {
        Self {
            load_ms: ms(profile.timings.load),
            prepare_ms: ms(profile.timings.prepare),
            distance_ms: ms(profile.timings.distance),
            total_ms: ms(total),
        }
    }
}

/// JSON written by `mir compute`. Floats use the shortest representation
/// that parses back to the identical `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirResultDocument {
    pub mir: f64,
    pub per_layer_fid: Vec<f64>,
    pub layers: Vec<LayerGap>,
    pub config: MirOptions,
    pub manifest_path: String,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl MirResultDocument {
    pub fn new(profile: &GapProfile, opts: &MirOptions, manifest: &Path, timings: Option<Timings>) -> Self {
        Self {
            mir: profile.mir,
            per_layer_fid: profile.per_layer_fid(),
            layers: profile.layers.clone(),
            config: opts.clone(),
            manifest_path: manifest.display().to_string(),
            warnings: profile.warnings.clone(),
            timings,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
