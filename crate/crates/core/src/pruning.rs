//! Expert scoring and retained-set selection.
//!
//! The main criterion is the change of each router's l2 norm between the
//! pre-trained and fine-tuned layers, `delta_s = ||w_s^(T)|| - ||w_s^(0)||`.
//! Experts with the largest scores are kept, ties going to the smaller index.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use ndarray::Axis;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, MoELayer, PruneMask, RoutingConfig, RoutingMode};
use crate::rng::Rng;
use crate::synthdata::{Dataset, PatternSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Keep the top fraction of each sign group separately.
    #[default]
    BySignGroup,
    /// Rank all experts of the layer together.
    WholeLayer,
}

/// Which per-expert score drives the selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Delta,
    Importance,
    RouterMagnitude,
    NeuronMagnitude,
    NeuronChange,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::Delta,
        Criterion::Importance,
        Criterion::RouterMagnitude,
        Criterion::NeuronMagnitude,
        Criterion::NeuronChange,
        Criterion::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Delta => "delta",
            Criterion::Importance => "importance",
            Criterion::RouterMagnitude => "router_magnitude",
            Criterion::NeuronMagnitude => "neuron_magnitude",
            Criterion::NeuronChange => "neuron_change",
            Criterion::Random => "random",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    /// The per-expert scores that were ranked (`delta_s` for the delta
    /// criterion).
    pub scores: Vec<f64>,
    pub rho: f64,
    pub grouping: Grouping,
    pub retained: PruneMask,
}

/// `||w_s^(T)|| - ||w_s^(0)||` per expert.
pub fn router_norm_change(layer0: &MoELayer, layer_t: &MoELayer) -> Result<Vec<f64>> {
    if layer0.routers.dim() != layer_t.routers.dim() {
        return Err(Error::Contract(format!(
            "router shapes differ: {:?} vs {:?}",
            layer0.routers.dim(),
            layer_t.routers.dim()
        )));
    }
    Ok(norm_change(&layer0.router_norms(), &layer_t.router_norms()))
}

pub(crate) fn norm_change(before: &[f64], after: &[f64]) -> Vec<f64> {
    after.iter().zip(before).map(|(t, o)| t - o).collect()
}

/// Group index per expert: 0 for a `+1` head, 1 for a `-1` head.
pub fn sign_groups(signs: &[f64]) -> Vec<usize> {
    signs.iter().map(|&a| if a > 0.0 { 0 } else { 1 }).collect()
}

/// How many experts each group keeps: `floor((1 - rho) * size)`, at least
/// one. Returns `(group, members, keep)` in increasing group order.
pub fn retained_counts(rho: f64, grouping: Grouping, groups: &[usize]) -> Result<Vec<(usize, Vec<usize>, usize)>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InfeasibleRatio(format!("rho must lie in [0, 1), got {rho}")));
    }
    if groups.is_empty() {
        return Err(Error::InfeasibleRatio("no experts to select from".into()));
    }
    let buckets: Vec<(usize, Vec<usize>)> = match grouping {
        Grouping::WholeLayer => vec![(0, (0..groups.len()).collect())],
        Grouping::BySignGroup => {
            let mut ids: Vec<usize> = groups.to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter()
                .map(|g| (g, (0..groups.len()).filter(|&s| groups[s] == g).collect()))
                .collect()
        }
    };
    Ok(buckets
        .into_iter()
        .map(|(g, members)| {
            let keep = (((1.0 - rho) * members.len() as f64 + 1e-9).floor() as usize).max(1);
            (g, members, keep)
        })
        .collect())
}

fn rank_desc(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Keeps the top `1 - rho` fraction of experts by score, per group or over
/// the whole layer. Ties go to the smaller index.
pub fn select_retained(scores: &[f64], rho: f64, grouping: Grouping, groups: &[usize]) -> Result<PruneDecision> {
    if scores.len() != groups.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} group assignments",
            scores.len(),
            groups.len()
        )));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN pruning score".into()));
    }
    let mut flags = vec![false; scores.len()];
    for (_, mut members, keep) in retained_counts(rho, grouping, groups)? {
        members.sort_by(|&a, &b| rank_desc(scores, a, b));
        for &s in &members[..keep] {
            flags[s] = true;
        }
    }
    Ok(PruneDecision {
        scores: scores.to_vec(),
        rho,
        grouping,
        retained: PruneMask::from_flags(flags)?,
    })
}

/// A uniformly random retained set with the same per-group sizes as
/// [`select_retained`].
pub fn random_mask(k: usize, rho: f64, groups: &[usize], grouping: Grouping, rng: &mut Rng) -> Result<PruneMask> {
    if groups.len() != k {
        return Err(Error::Contract(format!("{} group assignments for k = {k}", groups.len())));
    }
    let mut flags = vec![false; k];
    for (_, members, keep) in retained_counts(rho, grouping, groups)? {
        for i in index::sample(rng, members.len(), keep) {
            flags[members[i]] = true;
        }
    }
    PruneMask::from_flags(flags)
}

/// Token choice needs at least `l` retained experts for every token to fill
/// its selection.
pub fn check_routing_feasible(mask: &PruneMask, cfg: RoutingConfig) -> Result<()> {
    if cfg.mode == RoutingMode::TokenChoice && mask.count() < cfg.l {
        return Err(Error::InfeasibleRatio(format!(
            "token choice with l = {} needs at least {} retained experts, got {}",
            cfg.l,
            cfg.l,
            mask.count()
        )));
    }
    Ok(())
}

/// Scores that prior work prunes by, for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    /// `top1 * conf`; token choice only.
    pub importance_score: Option<Vec<f64>>,
    /// Fraction of all dataset tokens whose largest routing value belongs to
    /// the expert.
    pub top1_fraction: Option<Vec<f64>>,
    /// Mean gate those tokens give the expert.
    pub confidence: Option<Vec<f64>>,
    pub router_magnitude: Vec<f64>,
    pub avg_neuron_magnitude: Vec<f64>,
    pub avg_change_neuron_magnitude: Vec<f64>,
}

impl BaselineScores {
    /// Scores the given criterion ranks by. `Random` has none.
    pub fn for_criterion(&self, criterion: Criterion, deltas: &[f64]) -> Result<Vec<f64>> {
        match criterion {
            Criterion::Delta => Ok(deltas.to_vec()),
            Criterion::Importance => self
                .importance_score
                .clone()
                .ok_or_else(|| Error::Config("importance score needs token-choice routing".into())),
            Criterion::RouterMagnitude => Ok(self.router_magnitude.clone()),
            Criterion::NeuronMagnitude => Ok(self.avg_neuron_magnitude.clone()),
            Criterion::NeuronChange => Ok(self.avg_change_neuron_magnitude.clone()),
            Criterion::Random => Err(Error::Config("the random criterion has no scores".into())),
        }
    }
}

/// Mean neuron norm per expert.
pub(crate) fn mean_neuron_norms(layer: &MoELayer) -> Vec<f64> {
    layer
        .hidden
        .outer_iter()
        .map(|h| {
            let m = h.nrows();
            if m == 0 {
                return 0.0;
            }
            h.lanes(Axis(1)).into_iter().map(|w| w.dot(&w).sqrt()).sum::<f64>() / m as f64
        })
        .collect()
}

/// Magnitude scores, plus the top-1 importance score when routing is token
/// choice. Importance uses `layer_t`'s routers on `dataset`.
pub fn baseline_scores(
    layer0: &MoELayer,
    layer_t: &MoELayer,
    dataset: &Dataset,
    ps: &PatternSet,
    cfg: RoutingConfig,
) -> Result<BaselineScores> {
    if dataset.is_empty() {
        return Err(Error::Contract("baseline scores need a non-empty dataset".into()));
    }
    if layer0.hidden.dim() != layer_t.hidden.dim() || layer0.routers.dim() != layer_t.routers.dim() {
        return Err(Error::Contract("pre-trained and fine-tuned layers differ in shape".into()));
    }
    if dataset.d != layer_t.d() || ps.dim() != layer_t.d() {
        return Err(Error::Shape("dataset, patterns and layer disagree on d".into()));
    }
    let k = layer_t.k();
    let n0 = mean_neuron_norms(layer0);
    let nt = mean_neuron_norms(layer_t);
    let (importance_score, top1_fraction, confidence) = match cfg.mode {
        RoutingMode::ExpertChoice => (None, None, None),
        RoutingMode::TokenChoice => {
            let basis = layer_t.to_pattern_basis(ps);
            let full = PruneMask::full(k);
            let mut count = vec![0usize; k];
            let mut gate_sum = vec![0.0; k];
            let mut tokens = 0usize;
            for smp in &dataset.samples {
                let gating = model::route(&basis, &smp.basis_tokens(ps.dim()), cfg, &full)?;
                for (sel, w) in gating.selected.iter().zip(&gating.weights) {
                    // Selection is ordered by rank, so the head is the argmax.
                    count[sel[0]] += 1;
                    gate_sum[sel[0]] += w[0];
                }
                tokens += gating.n();
            }
            let top1: Vec<f64> = count.iter().map(|&c| c as f64 / tokens as f64).collect();
            let conf: Vec<f64> = (0..k)
                .map(|s| if count[s] == 0 { 0.0 } else { gate_sum[s] / count[s] as f64 })
                .collect();
            let imp = top1.iter().zip(&conf).map(|(t, c)| t * c).collect();
            (Some(imp), Some(top1), Some(conf))
        }
    };
    Ok(BaselineScores {
        importance_score,
        top1_fraction,
        confidence,
        router_magnitude: layer_t.router_norms(),
        avg_change_neuron_magnitude: norm_change(&n0, &nt),
        avg_neuron_magnitude: nt,
    })
}

/// One row of the score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub expert_id: usize,
    pub group: usize,
    pub delta: f64,
    pub importance_score: Option<f64>,
    pub top1_fraction: Option<f64>,
    pub confidence: Option<f64>,
    pub router_magnitude: f64,
    pub avg_neuron_magnitude: Option<f64>,
    pub avg_change_neuron_magnitude: Option<f64>,
    pub retained: bool,
}

pub const SCORE_TABLE_HEADER: &str = "expert_id,group,delta,importance_score,top1_fraction,confidence,router_magnitude,avg_neuron_magnitude,avg_change_neuron_magnitude,retained";

/// Rows for a layer; `groups` are written one-based.
pub fn score_rows(deltas: &[f64], groups: &[usize], baseline: &BaselineScores, retained: &PruneMask) -> Vec<ScoreRow> {
    let pick = |v: &Option<Vec<f64>>, s: usize| v.as_ref().map(|v| v[s]);
    (0..deltas.len())
        .map(|s| ScoreRow {
            expert_id: s,
            group: groups[s] + 1,
            delta: deltas[s],
            importance_score: pick(&baseline.importance_score, s),
            top1_fraction: pick(&baseline.top1_fraction, s),
            confidence: pick(&baseline.confidence, s),
            router_magnitude: baseline.router_magnitude[s],
            avg_neuron_magnitude: Some(baseline.avg_neuron_magnitude[s]),
            avg_change_neuron_magnitude: Some(baseline.avg_change_neuron_magnitude[s]),
            retained: retained.contains(s),
        })
        .collect()
}

/// Score table CSV; absent scores are empty fields.
pub fn score_table_csv(rows: &[ScoreRow]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(SCORE_TABLE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.expert_id,
            r.group,
            r.delta,
            opt(r.importance_score),
            opt(r.top1_fraction),
            opt(r.confidence),
            r.router_magnitude,
            opt(r.avg_neuron_magnitude),
            opt(r.avg_change_neuron_magnitude),
            r.retained as u8
        ));
    }
    out
}
