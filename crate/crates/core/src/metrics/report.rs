use serde::{Deserialize, Serialize};

/// Per-scene record. `cpsnr`/`cssim` are absent when the scene was skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub cpsnr: Option<f64>,
    pub cssim: Option<f64>,
    /// Row offset of the best cPSNR window.
    pub u: usize,
    /// Column offset of the best cPSNR window.
    pub v: usize,
    /// Brightness bias at the best cPSNR window.
    pub b: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub saturated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl SceneMetrics {
    pub fn skipped(scene_id: &str, reason: impl Into<String>) -> Self {
        Self { scene_id: scene_id.into(), cpsnr: None, cssim: None, u: 0, v: 0, b: 0.0, saturated: false, skipped: Some(reason.into()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct Summary {
    scenes: usize,
    scored: usize,
    mean_cpsnr: Option<f64>,
    mean_cssim: Option<f64>,
    excluded: Vec<String>,
}

/// Dataset-level report, ordered by scene id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub per_scene: Vec<SceneMetrics>,
    /// Scenes without a target, left out entirely.
    pub excluded: Vec<String>,
}

impl MetricReport {
    pub fn new(mut per_scene: Vec<SceneMetrics>, mut excluded: Vec<String>) -> Self {
        per_scene.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        excluded.sort();
        Self { per_scene, excluded }
    }

    fn mean(&self, f: impl Fn(&SceneMetrics) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.per_scene.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Unweighted mean over scored scenes.
    pub fn mean_cpsnr(&self) -> Option<f64> {
        self.mean(|s| s.cpsnr)
    }

    pub fn mean_cssim(&self) -> Option<f64> {
        self.mean(|s| s.cssim)
    }

    pub fn scored(&self) -> usize {
        self.per_scene.iter().filter(|s| s.cpsnr.is_some()).count()
    }

    /// One JSON object per scene, then a `{"summary": ...}` footer line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.per_scene {
            out.push_str(&serde_json::to_string(s).expect("record serializes"));
            out.push('\n');
        }
        let summary = Summary {
            scenes: self.per_scene.len(),
            scored: self.scored(),
            mean_cpsnr: self.mean_cpsnr(),
            mean_cssim: self.mean_cssim(),
            excluded: self.excluded.clone(),
        };
        out.push_str(&serde_json::json!({ "summary": summary }).to_string());
        out.push('\n');
        out
    }
}
