//! Offline scoring of checkpoints described by a JSON manifest.
//!
//! Each expert names its router before and after fine-tuning as a slice of
//! a raw little-endian f64 file, optionally with its hidden neurons. Paths
//! are relative to the manifest's directory unless absolute.

use std::collections::HashMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MoELayer;
use crate::pruning::{self, Grouping, ScoreRow};

/// `dim` consecutive f64 values starting `offset` bytes into `path`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    pub path: String,
    pub offset: u64,
    /// Element count; must equal `dim` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertRef {
    pub pre: TensorRef,
    pub post: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_neurons: Option<Vec<TensorRef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_neurons: Option<Vec<TensorRef>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRef {
    pub name: String,
    pub experts: Vec<ExpertRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub layers: Vec<LayerRef>,
}

impl CheckpointManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: CheckpointManifest = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Manifest("manifest lists no layers".into()));
        }
        for layer in &self.layers {
            let name = &layer.name;
            let Some(first) = layer.experts.first() else {
                return Err(Error::Manifest(format!("layer '{name}' lists no experts")));
            };
            let dim = first.pre.dim;
            if dim == 0 {
                return Err(Error::Manifest(format!("layer '{name}' has router dim 0")));
            }
            for (s, e) in layer.experts.iter().enumerate() {
                for (what, t) in [("pre", &e.pre), ("post", &e.post)] {
                    check_length(t, name, s, what)?;
                    if t.dim != dim {
                        return Err(Error::Manifest(format!(
                            "layer '{name}' expert {s} {what} router has dim {}, expected {dim}",
                            t.dim
                        )));
                    }
                }
                match (&e.pre_neurons, &e.post_neurons) {
                    (None, None) => {}
                    (Some(a), Some(b)) => {
                        if a.len() != b.len() || a.is_empty() {
                            return Err(Error::Manifest(format!(
                                "layer '{name}' expert {s}: {} pre neurons vs {} post neurons",
                                a.len(),
                                b.len()
                            )));
                        }
                        for t in a.iter().chain(b) {
                            check_length(t, name, s, "neuron")?;
                            if t.dim != dim {
                                return Err(Error::Manifest(format!(
                                    "layer '{name}' expert {s} neuron has dim {}, expected {dim}",
                                    t.dim
                                )));
                            }
                        }
                    }
                    _ => {
                        return Err(Error::Manifest(format!(
                            "layer '{name}' expert {s}: neurons must be given for both states or neither"
                        )))
                    }
                }
            }
            let with_neurons = layer.experts.iter().filter(|e| e.pre_neurons.is_some()).count();
            if with_neurons != 0 && with_neurons != layer.experts.len() {
                return Err(Error::Manifest(format!(
                    "layer '{name}': neuron tensors given for some experts only"
                )));
            }
        }
        Ok(())
    }
}

fn check_length(t: &TensorRef, layer: &str, s: usize, what: &str) -> Result<()> {
    match t.length {
        Some(len) if len != t.dim => Err(Error::Manifest(format!(
            "layer '{layer}' expert {s} {what} tensor has length {len} but dim {}",
            t.dim
        ))),
        _ => Ok(()),
    }
}

/// Reads tensors, caching each file once.
struct TensorReader {
    base: PathBuf,
    files: HashMap<PathBuf, Vec<u8>>,
}

impl TensorReader {
    fn read(&mut self, t: &TensorRef, reference: &str) -> Result<Vec<f64>> {
        let path = self.base.join(&t.path);
        if !self.files.contains_key(&path) {
            let bytes = fs::read(&path)
                .map_err(|e| Error::io(&path, std::io::Error::new(e.kind(), format!("{reference}: {e}"))))?;
            self.files.insert(path.clone(), bytes);
        }
        let bytes = &self.files[&path];
        let start = t.offset as usize;
        let end = start.checked_add(t.dim * 8).unwrap_or(usize::MAX);
        if end > bytes.len() {
            let msg = format!(
                "{reference}: tensor needs bytes {start}..{end} but the file holds {}",
                bytes.len()
            );
            return Err(Error::io(&path, std::io::Error::new(ErrorKind::UnexpectedEof, msg)));
        }
        Ok(bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scores and pruning plan of one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerScores {
    pub name: String,
    pub deltas: Vec<f64>,
    pub router_magnitude: Vec<f64>,
    pub avg_neuron_magnitude: Option<Vec<f64>>,
    pub avg_change_neuron_magnitude: Option<Vec<f64>>,
    /// Experts ordered by decreasing delta, ties by index.
    pub ranking: Vec<usize>,
    /// Whole-layer retained set at the requested ratio.
    pub retained: Vec<usize>,
}

impl LayerScores {
    pub fn rows(&self) -> Vec<ScoreRow> {
        let pick = |v: &Option<Vec<f64>>, s: usize| v.as_ref().map(|v| v[s]);
        (0..self.deltas.len())
            .map(|s| ScoreRow {
                expert_id: s,
                group: 1,
                delta: self.deltas[s],
                importance_score: None,
                top1_fraction: None,
                confidence: None,
                router_magnitude: self.router_magnitude[s],
                avg_neuron_magnitude: pick(&self.avg_neuron_magnitude, s),
                avg_change_neuron_magnitude: pick(&self.avg_change_neuron_magnitude, s),
                retained: self.retained.contains(&s),
            })
            .collect()
    }

    /// Score table with rows in ranking order.
    pub fn ranking_csv(&self) -> String {
        let rows = self.rows();
        let ordered: Vec<ScoreRow> = self.ranking.iter().map(|&s| rows[s].clone()).collect();
        pruning::score_table_csv(&ordered)
    }
}

/// Scores every layer of the manifest and plans whole-layer pruning at
/// `rho`. `base` resolves relative tensor paths.
pub fn score_checkpoints(manifest: &CheckpointManifest, base: &Path, rho: f64) -> Result<Vec<LayerScores>> {
    manifest.validate()?;
    let mut reader = TensorReader {
        base: base.to_path_buf(),
        files: HashMap::new(),
    };
    let mut out = Vec::with_capacity(manifest.layers.len());
    for layer in &manifest.layers {
        let k = layer.experts.len();
        let mut pre_norms = Vec::with_capacity(k);
        let mut post_norms = Vec::with_capacity(k);
        let mut neuron_pre = Vec::new();
        let mut neuron_post = Vec::new();
        for (s, e) in layer.experts.iter().enumerate() {
            let reference = |what: &str| format!("layer '{}' expert {s} {what}", layer.name);
            pre_norms.push(norm(&reader.read(&e.pre, &reference("pre router"))?));
            post_norms.push(norm(&reader.read(&e.post, &reference("post router"))?));
            if let (Some(a), Some(b)) = (&e.pre_neurons, &e.post_neurons) {
                let mut mean = |list: &[TensorRef], what: &str| -> Result<f64> {
                    let mut total = 0.0;
                    for (r, t) in list.iter().enumerate() {
                        total += norm(&reader.read(t, &reference(&format!("{what} neuron {r}")))?);
                    }
                    Ok(total / list.len() as f64)
                };
                neuron_pre.push(mean(a, "pre")?);
                neuron_post.push(mean(b, "post")?);
            }
        }
        let deltas = pruning::norm_change(&pre_norms, &post_norms);
        let groups = vec![0; k];
        let decision = pruning::select_retained(&deltas, rho, Grouping::WholeLayer, &groups)?;
        let mut ranking: Vec<usize> = (0..k).collect();
        ranking.sort_by(|&a, &b| deltas[b].partial_cmp(&deltas[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        let has_neurons = !neuron_pre.is_empty();
        out.push(LayerScores {
            name: layer.name.clone(),
            avg_change_neuron_magnitude: has_neurons.then(|| pruning::norm_change(&neuron_pre, &neuron_post)),
            avg_neuron_magnitude: has_neurons.then_some(neuron_post),
            router_magnitude: post_norms,
            deltas,
            ranking,
            retained: decision.retained.indices(),
        });
    }
    Ok(out)
}

/// Pruning plan written next to the per-layer tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruningPlan {
    pub rho: f64,
    pub grouping: Grouping,
    pub layers: Vec<PlanLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanLayer {
    pub name: String,
    pub retained: Vec<usize>,
    pub pruned: Vec<usize>,
}

pub fn pruning_plan(scores: &[LayerScores], rho: f64) -> PruningPlan {
    PruningPlan {
        rho,
        grouping: Grouping::WholeLayer,
        layers: scores
            .iter()
            .map(|l| PlanLayer {
                name: l.name.clone(),
                retained: l.retained.clone(),
                pruned: (0..l.deltas.len()).filter(|s| !l.retained.contains(s)).collect(),
            })
            .collect(),
    }
}

/// Writes `scores_<layer>.csv` per layer and `plan.json` into `out`.
pub fn write_scores(scores: &[LayerScores], rho: f64, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for l in scores {
        let safe: String = l
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
            .collect();
        let path = out.join(format!("scores_{safe}.csv"));
        fs::write(&path, l.ranking_csv()).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = out.join("plan.json");
    let text = serde_json::to_string_pretty(&pruning_plan(scores, rho)).expect("plan serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Stores pre-trained and fine-tuned layers as raw f64 files in `dir`,
/// one file per layer state (routers then neurons), and returns the
/// manifest describing them with paths relative to `dir`.
pub fn write_checkpoint(dir: &Path, layers: &[(&str, &MoELayer, &MoELayer)]) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(layers.len());
    for &(name, pre, post) in layers {
        if pre.hidden.dim() != post.hidden.dim() || pre.routers.dim() != post.routers.dim() {
            return Err(Error::Contract(format!("layer '{name}': pre and post shapes differ")));
        }
        let (k, m, d) = pre.hidden.dim();
        let mut refs: Vec<Vec<(TensorRef, Vec<TensorRef>)>> = Vec::with_capacity(2);
        for (state, layer) in [("pre", pre), ("post", post)] {
            let file = format!("{name}_{state}.f64");
            let mut bytes = Vec::with_capacity(8 * k * (m + 1) * d);
            let mut experts = Vec::with_capacity(k);
            let tensor = |offset: usize| TensorRef {
                path: file.clone(),
                offset: offset as u64,
                length: Some(d),
                dim: d,
            };
            for s in 0..k {
                let router = tensor(bytes.len());
                bytes.extend(layer.routers.row(s).iter().flat_map(|v| v.to_le_bytes()));
                let mut neurons = Vec::with_capacity(m);
                for w in layer.hidden.index_axis(Axis(0), s).rows() {
                    neurons.push(tensor(bytes.len()));
                    bytes.extend(w.iter().flat_map(|v| v.to_le_bytes()));
                }
                experts.push((router, neurons));
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            refs.push(experts);
        }
        let post_refs = refs.pop().expect("post state");
        let pre_refs = refs.pop().expect("pre state");
        let experts = pre_refs
            .into_iter()
            .zip(post_refs)
            .map(|((pre, pre_n), (post, post_n))| ExpertRef {
                pre,
                post,
                pre_neurons: (m > 0).then_some(pre_n),
                post_neurons: (m > 0).then_some(post_n),
            })
            .collect();
        out.push(LayerRef {
            name: name.to_string(),
            experts,
        });
    }
    Ok(CheckpointManifest { layers: out })
}
