//! Diagnostics: proficiency, projections, pre-trained assumptions, accuracy
//! and FLOPs.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, GatingOutput, MoELayer, PruneMask, RoutingConfig, RoutingMode};
use crate::rng::Rng;
use crate::synthdata::{self, Dataset, Label, PatternSet, Sample};

/// Monte Carlo proficiency of every router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProficiencyReport {
    /// Probability over class-1 samples that the expert routes `o1` with gate
    /// at least `1/l`.
    pub p1: Vec<f64>,
    /// Same for `o2` over class-2 samples.
    pub p2: Vec<f64>,
    /// Samples drawn per class.
    pub samples: usize,
    pub se1: Vec<f64>,
    pub se2: Vec<f64>,
}

impl ProficiencyReport {
    fn from_counts(c1: &[usize], c2: &[usize], samples: usize) -> Self {
        let p = |c: &[usize]| -> Vec<f64> { c.iter().map(|&h| h as f64 / samples as f64).collect() };
        let se = |p: &[f64]| -> Vec<f64> { p.iter().map(|&p| (p * (1.0 - p) / samples as f64).sqrt()).collect() };
        let p1 = p(c1);
        let p2 = p(c2);
        ProficiencyReport {
            se1: se(&p1),
            se2: se(&p2),
            p1,
            p2,
            samples,
        }
    }

    /// Proficiency for the expert's own task: `p1` for a `+1` head, `p2` for
    /// a `-1` head.
    pub fn own(&self, signs: &[f64]) -> Vec<f64> {
        signs
            .iter()
            .enumerate()
            .map(|(s, &a)| if a > 0.0 { self.p1[s] } else { self.p2[s] })
            .collect()
    }
}

/// Whether expert `s` routes the task token with gate at least `1/l`.
fn proficient(gating: &GatingOutput, s: usize, sample: &Sample, task: u32) -> bool {
    let threshold = 1.0 / gating.l as f64;
    gating.routed[s]
        .iter()
        .any(|&(j, g)| sample.tokens[j] == task && g >= threshold)
}

fn proficiency_hits(layer_basis: &MoELayer, ps: &PatternSet, samples: &[Sample], cfg: RoutingConfig) -> Result<Vec<usize>> {
    let k = layer_basis.k();
    let mask = PruneMask::full(k);
    let per_sample: Vec<Vec<bool>> = samples
        .par_iter()
        .map(|smp| {
            let gating = model::route(layer_basis, &smp.basis_tokens(ps.dim()), cfg, &mask)?;
            let task = ps.task_index(smp.label) as u32;
            Ok((0..k).map(|s| proficient(&gating, s, smp, task)).collect())
        })
        .collect::<Result<_>>()?;
    let mut hits = vec![0usize; k];
    for row in per_sample {
        for (s, h) in row.into_iter().enumerate() {
            hits[s] += h as usize;
        }
    }
    Ok(hits)
}

/// Proficiency measured on caller-provided samples: `p1` over the class-1
/// samples and `p2` over the class-2 samples, which must be equally many.
pub fn proficiency_on_samples(
    layer: &MoELayer,
    ps: &PatternSet,
    class1: &[Sample],
    class2: &[Sample],
    cfg: RoutingConfig,
) -> Result<ProficiencyReport> {
    if class1.is_empty() || class1.len() != class2.len() {
        return Err(Error::Contract("need equally many, non-zero class-1 and class-2 samples".into()));
    }
    let basis = layer.to_pattern_basis(ps);
    let h1 = proficiency_hits(&basis, ps, class1, cfg)?;
    let h2 = proficiency_hits(&basis, ps, class2, cfg)?;
    Ok(ProficiencyReport::from_counts(&h1, &h2, class1.len()))
}

/// Draws `num_samples` fresh samples per class and measures proficiency.
pub fn estimate_proficiency(
    layer: &MoELayer,
    ps: &PatternSet,
    n: usize,
    cfg: RoutingConfig,
    num_samples: usize,
    rng: &mut Rng,
) -> Result<ProficiencyReport> {
    if num_samples == 0 {
        return Err(Error::Config("num_samples must be >= 1".into()));
    }
    let class1 = (0..num_samples)
        .map(|_| synthdata::sample_input(ps, n, Label::Pos, rng))
        .collect::<Result<Vec<_>>>()?;
    let class2 = (0..num_samples)
        .map(|_| synthdata::sample_input(ps, n, Label::Neg, rng))
        .collect::<Result<Vec<_>>>()?;
    proficiency_on_samples(layer, ps, &class1, &class2, cfg)
}

/// Largest number of token configurations [`exact_proficiency`] will visit.
pub const MAX_ENUMERATION: usize = 5_000_000;

/// Exact proficiency by enumerating every task position and every ordered
/// assignment of irrelevant patterns to the other positions.
pub fn exact_proficiency(layer: &MoELayer, ps: &PatternSet, n: usize, cfg: RoutingConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || n > ps.dim() {
        return Err(Error::Config(format!("n = {n} out of range")));
    }
    let q = ps.irrelevant_indices().len();
    let total = (q as f64).powi(n as i32 - 1) * n as f64;
    if total > MAX_ENUMERATION as f64 {
        return Err(Error::Config(format!("{total} configurations exceed the enumeration limit")));
    }
    let basis = layer.to_pattern_basis(ps);
    let k = layer.k();
    let mask = PruneMask::full(k);
    let mut p = [vec![0.0; k], vec![0.0; k]];
    let mut digits = vec![0usize; n.saturating_sub(1)];
    loop {
        let weight_rest: f64 = digits.iter().map(|&i| ps.irrelevant_probs()[i]).product();
        for (class, label) in [Label::Pos, Label::Neg].into_iter().enumerate() {
            let task = ps.task_index(label) as u32;
            for pos in 0..n {
                let mut tokens = Vec::with_capacity(n);
                let mut it = digits.iter();
                for j in 0..n {
                    if j == pos {
                        tokens.push(task);
                    } else {
                        tokens.push(ps.irrelevant_indices()[*it.next().unwrap()] as u32);
                    }
                }
                let smp = Sample {
                    tokens,
                    label,
                    task_position: pos,
                };
                let gating = model::route(&basis, &smp.basis_tokens(ps.dim()), cfg, &mask)?;
                let w = weight_rest / n as f64;
                for s in 0..k {
                    if proficient(&gating, s, &smp, task) {
                        p[class][s] += w;
                    }
                }
            }
        }
        // odometer over irrelevant assignments
        let mut i = 0;
        loop {
            if i == digits.len() {
                let [p1, p2] = p;
                return Ok((p1, p2));
            }
            digits[i] += 1;
            if digits[i] < q {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

/// Router and neuron components along the pattern directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    /// `k x d`, entry `(s, i)` is `<w_s, p_i>`.
    pub router_components: Array2<f64>,
    /// `k x m`: `<w_r^(s), o1>`.
    pub neuron_task1: Array2<f64>,
    /// `k x m`: `<w_r^(s), o2>`.
    pub neuron_task2: Array2<f64>,
    /// `k x m`: largest `<w_r^(s), q>` over irrelevant patterns.
    pub neuron_max_irrelevant: Array2<f64>,
}

impl ProjectionReport {
    /// Router components as a CSV matrix, one row per expert.
    pub fn router_matrix_csv(&self) -> String {
        matrix_csv(&self.router_components, "p")
    }

    /// `expert,neuron,task1,task2,max_irrelevant`
    pub fn neuron_csv(&self) -> String {
        let mut out = String::from("expert,neuron,task1,task2,max_irrelevant\n");
        let (k, m) = self.neuron_task1.dim();
        for s in 0..k {
            for r in 0..m {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    s,
                    r,
                    self.neuron_task1[[s, r]],
                    self.neuron_task2[[s, r]],
                    self.neuron_max_irrelevant[[s, r]]
                ));
            }
        }
        out
    }
}

pub(crate) fn matrix_csv(m: &Array2<f64>, prefix: &str) -> String {
    let mut out = String::from("row");
    for c in 0..m.ncols() {
        out.push_str(&format!(",{prefix}{c}"));
    }
    out.push('\n');
    for (i, row) in m.rows().into_iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn projections(layer: &MoELayer, ps: &PatternSet) -> Result<ProjectionReport> {
    if ps.dim() != layer.d() {
        return Err(Error::Shape(format!("patterns d = {} vs layer d = {}", ps.dim(), layer.d())));
    }
    let basis = layer.to_pattern_basis(ps);
    let (k, m, _) = basis.hidden.dim();
    let (t1, t2) = (ps.task1_index(), ps.task2_index());
    let mut neuron_task1 = Array2::zeros((k, m));
    let mut neuron_task2 = Array2::zeros((k, m));
    let mut neuron_max_irrelevant = Array2::zeros((k, m));
    for s in 0..k {
        for r in 0..m {
            let w = basis.neuron(s, r);
            neuron_task1[[s, r]] = w[t1];
            neuron_task2[[s, r]] = w[t2];
            neuron_max_irrelevant[[s, r]] = ps
                .irrelevant_indices()
                .iter()
                .map(|&i| w[i])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Ok(ProjectionReport {
        router_components: basis.routers,
        neuron_task1,
        neuron_task2,
        neuron_max_irrelevant,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertClass {
    Important,
    Unimportant,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAssumption {
    pub expert: usize,
    pub sign: f64,
    /// Proficiency for the expert's own task pattern.
    pub proficiency: f64,
    pub class: ExpertClass,
    /// `min_q |<w_s, o_task - q>|` over irrelevant `q`.
    pub separation: f64,
    /// Fraction of neurons with `<w_r^(s), o_task> >= 0`.
    pub activated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `max_s ||w_s||`
    pub c1: f64,
    /// `max_{s,r} ||w_r^(s)||`
    pub c2: f64,
    pub experts: Vec<ExpertAssumption>,
    /// Unimportant fraction within `S1` and `S2`.
    pub unimportant_fraction: (f64, f64),
    /// Smaller of the two unimportant fractions.
    pub gamma: f64,
    pub important_threshold: f64,
    pub unimportant_threshold: f64,
}

impl AssumptionReport {
    pub fn important(&self) -> Vec<usize> {
        self.experts
            .iter()
            .filter(|e| e.class == ExpertClass::Important)
            .map(|e| e.expert)
            .collect()
    }

    /// Every sign group has an important expert.
    pub fn has_important_per_group(&self) -> bool {
        let pos = self.experts.iter().any(|e| e.sign > 0.0 && e.class == ExpertClass::Important);
        let neg = self.experts.iter().any(|e| e.sign < 0.0 && e.class == ExpertClass::Important);
        pos && neg
    }
}

pub const DEFAULT_IMPORTANT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_UNIMPORTANT_THRESHOLD: f64 = 0.05;

/// Measures the pre-trained-model constants and classifies experts by
/// proficiency on their own task pattern.
pub fn check_assumptions(
    layer0: &MoELayer,
    ps: &PatternSet,
    proficiency0: &ProficiencyReport,
    important_threshold: f64,
    unimportant_threshold: f64,
) -> Result<AssumptionReport> {
    let valid = |t: f64| t > 0.0 && t < 1.0;
    if !valid(important_threshold) || !valid(unimportant_threshold) || important_threshold <= unimportant_threshold {
        return Err(Error::Config(format!(
            "thresholds must satisfy 0 < unimportant ({unimportant_threshold}) < important ({important_threshold}) < 1"
        )));
    }
    let signs = layer0.signs()?;
    let basis = layer0.to_pattern_basis(ps);
    let c1 = layer0.router_norms().into_iter().fold(0.0, f64::max);
    let c2 = layer0
        .hidden
        .lanes(Axis(2))
        .into_iter()
        .map(|w| w.dot(&w).sqrt())
        .fold(0.0, f64::max);
    let own = proficiency0.own(signs);
    let mut experts = Vec::with_capacity(layer0.k());
    for (s, &a) in signs.iter().enumerate() {
        let task = ps.task_index(if a > 0.0 { Label::Pos } else { Label::Neg });
        let w = basis.routers.row(s);
        let separation = ps
            .irrelevant_indices()
            .iter()
            .map(|&q| (w[task] - w[q]).abs())
            .fold(f64::INFINITY, f64::min);
        let m = basis.m();
        let active = (0..m).filter(|&r| basis.neuron(s, r)[task] >= 0.0).count();
        let class = if own[s] >= important_threshold {
            ExpertClass::Important
        } else if own[s] <= unimportant_threshold {
            ExpertClass::Unimportant
        } else {
            ExpertClass::Ambiguous
        };
        experts.push(ExpertAssumption {
            expert: s,
            sign: a,
            proficiency: own[s],
            class,
            separation,
            activated_fraction: if m == 0 { 0.0 } else { active as f64 / m as f64 },
        });
    }
    let frac = |positive: bool| -> f64 {
        let group: Vec<_> = experts.iter().filter(|e| (e.sign > 0.0) == positive).collect();
        group.iter().filter(|e| e.class == ExpertClass::Unimportant).count() as f64 / group.len() as f64
    };
    let unimportant_fraction = (frac(true), frac(false));
    Ok(AssumptionReport {
        c1,
        c2,
        experts,
        gamma: unimportant_fraction.0.min(unimportant_fraction.1),
        unimportant_fraction,
        important_threshold,
        unimportant_threshold,
    })
}

/// `f(x)` for every sample in the dataset.
pub fn outputs(layer: &MoELayer, mask: &PruneMask, dataset: &Dataset, ps: &PatternSet, cfg: RoutingConfig) -> Result<Vec<f64>> {
    if dataset.d != layer.d() || ps.dim() != layer.d() {
        return Err(Error::Shape("dataset, patterns and layer disagree on d".into()));
    }
    mask.validate_for(layer)?;
    let basis = layer.to_pattern_basis(ps);
    dataset
        .samples
        .par_iter()
        .map(|s| model::classify(&basis, &s.basis_tokens(ps.dim()), cfg, mask))
        .collect()
}

/// Fraction of samples with `y f(x) > 0`; `f(x) = 0` counts as an error.
pub fn test_accuracy(layer: &MoELayer, mask: &PruneMask, dataset: &Dataset, ps: &PatternSet, cfg: RoutingConfig) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Contract("accuracy needs a non-empty dataset".into()));
    }
    let f = outputs(layer, mask, dataset, ps, cfg)?;
    let correct = f
        .iter()
        .zip(&dataset.samples)
        .filter(|(f, s)| s.label.sign() * **f > 0.0)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Inference cost of one sample, multiply-adds counted as two FLOPs.
/// Softmax and ReLU are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub routing_flops: u64,
    pub expert_flops: u64,
    pub total: u64,
    /// Routed (expert, token) pairs evaluated.
    pub routed_tokens: u64,
    /// Parameters kept by the pruned layer.
    pub parameters: u64,
}

/// FLOPs for one sample. Token choice keeps every router (all are needed
/// for the gating denominator); expert choice drops pruned routers. The
/// token-choice routed count is taken from `gating` when given, otherwise the
/// worst case `n * min(l, |S_k'|)`.
#[allow(clippy::too_many_arguments)]
pub fn flops_per_sample(
    k: usize,
    m: usize,
    d: usize,
    d_out: usize,
    n: usize,
    cfg: RoutingConfig,
    mask: &PruneMask,
    gating: Option<&GatingOutput>,
) -> Result<FlopsReport> {
    if mask.k() != k {
        return Err(Error::Contract(format!("mask covers {} experts, k = {k}", mask.k())));
    }
    let retained = mask.count() as u64;
    let (k, m, d, d_out, n, l) = (k as u64, m as u64, d as u64, d_out as u64, n as u64, cfg.l as u64);
    let per_expert_params = d * m + m * d_out;
    let (routing_flops, routed_tokens, parameters) = match cfg.mode {
        RoutingMode::TokenChoice => {
            let routed = match gating {
                Some(g) => g.routed.iter().enumerate().filter(|(s, _)| mask.contains(*s)).map(|(_, p)| p.len() as u64).sum(),
                None => n * l.min(retained),
            };
            (2 * n * d * k, routed, k * d + retained * per_expert_params)
        }
        RoutingMode::ExpertChoice => (2 * n * d * retained, l * retained, retained * (d + per_expert_params)),
    };
    let expert_flops = routed_tokens * (2 * d * m + 2 * m * d_out);
    Ok(FlopsReport {
        routing_flops,
        expert_flops,
        total: routing_flops + expert_flops,
        routed_tokens,
        parameters,
    })
}
