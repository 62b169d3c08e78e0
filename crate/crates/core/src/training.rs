//! SGD fine-tuning of the analyzed model with closed-form gradients.
//!
//! Gradients are taken on the surrogate loss `1 - y f(x)` with every
//! selection set held fixed; the reported loss is the hinge
//! `max(1 - y f(x), 0)`. ReLU's derivative at zero is taken as one.
//!
//! Expert choice, retained expert `s` with selected tokens `J_s` and gates
//! `G_j`, `sigma_j = sum_r ReLU(<w_r^(s), x^(j)>)`:
//!
//! ```text
//! dl/dw_r^(s) = -y a_s sum_{j in J_s} G_j x^(j) 1[<w_r^(s), x^(j)> >= 0]
//! dl/dw_s     = -y a_s sum_{j in J_s} sigma_j G_j sum_{i in J_s, i != j} G_i (x^(j) - x^(i))
//!             = -y a_s sum_{j in J_s} G_j (sigma_j - sum_i G_i sigma_i) x^(j)
//! ```
//!
//! Token choice, token `j` with selected experts `J_j`, softmax weights `p`
//! over all of `J_j` and output `u_j = sum_{s in J_j, s retained} a_s p_s sigma_j^(s)`:
//!
//! ```text
//! dl/dw_t     = -y sum_{j : t in J_j} p_t (a_t sigma_j^(t) - u_j) x^(j)
//! ```
//!
//! Pruned experts receive no gradient in either mode and are never updated.
//! The output heads are never updated.

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, GatingOutput, MoELayer, PruneMask, RoutingConfig, RoutingMode};
use crate::rng;
use crate::synthdata::{self, Dataset, Label, PatternSet};
use crate::tokens::Tokens;

pub fn loss_hinge(f: f64, y: Label) -> f64 {
    (1.0 - y.sign() * f).max(0.0)
}

pub fn loss_surrogate(f: f64, y: Label) -> f64 {
    1.0 - y.sign() * f
}

/// One labeled input.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tokens: Tokens<'a>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// `k x d`
    pub routers: Array2<f64>,
    /// `k x m x d`
    pub neurons: Array3<f64>,
    pub output: f64,
    pub surrogate_loss: f64,
    pub hinge_loss: f64,
}

impl GradientBundle {
    pub fn zeros(k: usize, m: usize, d: usize) -> Self {
        GradientBundle {
            routers: Array2::zeros((k, d)),
            neurons: Array3::zeros((k, m, d)),
            output: 0.0,
            surrogate_loss: 0.0,
            hinge_loss: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.routers.iter().chain(self.neurons.iter()).all(|v| v.is_finite())
    }

    /// `||a - b|| / max(||a||, ||b||)` over routers and neurons separately;
    /// returns the larger of the two. Blocks whose norms are both below
    /// `floor` count as agreeing.
    pub fn relative_error(&self, other: &GradientBundle, floor: f64) -> f64 {
        fn block<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>, floor: f64) -> f64 {
            let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.zip(b) {
                diff += (x - y) * (x - y);
                na += x * x;
                nb += y * y;
            }
            let scale = na.sqrt().max(nb.sqrt());
            if scale < floor {
                0.0
            } else {
                diff.sqrt() / scale
            }
        }
        block(self.routers.iter(), other.routers.iter(), floor)
            .max(block(self.neurons.iter(), other.neurons.iter(), floor))
    }
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Router(usize),
    Neuron(usize, usize),
}

/// Gradient of one sample as a list of `coef * x^(j)` contributions.
struct SampleTerms {
    terms: Vec<(Target, usize, f64)>,
    output: f64,
}

fn sample_terms(
    layer: &MoELayer,
    tokens: &Tokens<'_>,
    label: Label,
    gating: &GatingOutput,
    mask: &PruneMask,
) -> Result<SampleTerms> {
    let signs = layer.signs()?;
    let y = label.sign();
    let m = layer.m();
    let mut terms = Vec::new();
    let mut output = 0.0;
    match gating.mode {
        RoutingMode::ExpertChoice => {
            for s in 0..layer.k() {
                if !mask.contains(s) || gating.selected[s].is_empty() {
                    continue;
                }
                let a = signs[s];
                let sel = &gating.selected[s];
                let gates = &gating.weights[s];
                let sigma: Vec<f64> = sel.iter().map(|&j| model::activation_sum(layer, s, tokens, j)).collect();
                let mean: f64 = gates.iter().zip(&sigma).map(|(g, v)| g * v).sum();
                output += a * mean;
                for (idx, &j) in sel.iter().enumerate() {
                    let g = gates[idx];
                    let coef = -y * a * g * (sigma[idx] - mean);
                    terms.push((Target::Router(s), j, coef));
                    for r in 0..m {
                        if tokens.dot(j, layer.neuron(s, r)) >= 0.0 {
                            terms.push((Target::Neuron(s, r), j, -y * a * g));
                        }
                    }
                }
            }
        }
        RoutingMode::TokenChoice => {
            for (j, (sel, p)) in gating.selected.iter().zip(&gating.weights).enumerate() {
                let sigma: Vec<f64> = sel
                    .iter()
                    .map(|&s| if mask.contains(s) { model::activation_sum(layer, s, tokens, j) } else { 0.0 })
                    .collect();
                let u: f64 = sel
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| mask.contains(s))
                    .map(|(i, &s)| signs[s] * p[i] * sigma[i])
                    .sum();
                output += u;
                for (i, &t) in sel.iter().enumerate() {
                    if !mask.contains(t) {
                        continue;
                    }
                    let coef = -y * p[i] * (signs[t] * sigma[i] - u);
                    terms.push((Target::Router(t), j, coef));
                    for r in 0..m {
                        if tokens.dot(j, layer.neuron(t, r)) >= 0.0 {
                            terms.push((Target::Neuron(t, r), j, -y * signs[t] * p[i]));
                        }
                    }
                }
            }
        }
    }
    Ok(SampleTerms { terms, output })
}

fn apply_terms(terms: &SampleTerms, tokens: &Tokens<'_>, routers: &mut Array2<f64>, neurons: &mut Array3<f64>) {
    for &(target, j, coef) in &terms.terms {
        if coef == 0.0 {
            continue;
        }
        match target {
            Target::Router(s) => tokens.axpy(j, coef, routers.row_mut(s)),
            Target::Neuron(s, r) => tokens.axpy(j, coef, neurons.index_axis_mut(Axis(0), s).row_mut(r)),
        }
    }
}

fn check_analyzed(layer: &MoELayer) -> Result<()> {
    if !layer.is_analyzed() {
        return Err(Error::Mode("gradients are defined for the analyzed (signed-head) layer".into()));
    }
    Ok(())
}

/// Closed-form gradient of the surrogate loss for one sample.
pub fn sample_gradients(
    layer: &MoELayer,
    example: &Example<'_>,
    cfg: RoutingConfig,
    mask: &PruneMask,
) -> Result<GradientBundle> {
    check_analyzed(layer)?;
    let gating = model::route(layer, &example.tokens, cfg, mask)?;
    let terms = sample_terms(layer, &example.tokens, example.label, &gating, mask)?;
    let mut bundle = GradientBundle::zeros(layer.k(), layer.m(), layer.d());
    apply_terms(&terms, &example.tokens, &mut bundle.routers, &mut bundle.neurons);
    bundle.output = terms.output;
    bundle.surrogate_loss = loss_surrogate(terms.output, example.label);
    bundle.hinge_loss = loss_hinge(terms.output, example.label);
    Ok(bundle)
}

fn same_selection(a: &GatingOutput, b: &GatingOutput) -> bool {
    a.selected == b.selected
}

/// Central differences of the surrogate loss over every router and neuron
/// coordinate of the retained experts. The selection sets must not change
/// under any perturbation; a change is reported as
/// [`Error::NonDifferentiable`]. At a ReLU kink the central difference
/// averages the two one-sided slopes, so it reads half the closed-form value
/// there.
pub fn finite_difference_gradients(
    layer: &MoELayer,
    example: &Example<'_>,
    cfg: RoutingConfig,
    mask: &PruneMask,
    eps: f64,
) -> Result<GradientBundle> {
    check_analyzed(layer)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let tokens = &example.tokens;
    let base = model::route(layer, tokens, cfg, mask)?;
    let f0 = model::classify_gated(layer, tokens, &base, mask)?;
    let mut probe = layer.clone();
    let loss_at = |probe: &MoELayer| -> Result<f64> {
        let gating = model::route(probe, tokens, cfg, mask)?;
        if !same_selection(&gating, &base) {
            return Err(Error::NonDifferentiable("top-l selection changed under perturbation".into()));
        }
        Ok(loss_surrogate(model::classify_gated(probe, tokens, &gating, mask)?, example.label))
    };
    let (k, m, d) = layer.hidden.dim();
    let mut bundle = GradientBundle::zeros(k, m, d);
    for s in (0..k).filter(|&s| mask.contains(s)) {
        for c in 0..d {
            let orig = probe.routers[[s, c]];
            probe.routers[[s, c]] = orig + eps;
            let up = loss_at(&probe)?;
            probe.routers[[s, c]] = orig - eps;
            let down = loss_at(&probe)?;
            probe.routers[[s, c]] = orig;
            bundle.routers[[s, c]] = (up - down) / (2.0 * eps);
        }
        for r in 0..m {
            for c in 0..d {
                let orig = probe.hidden[[s, r, c]];
                probe.hidden[[s, r, c]] = orig + eps;
                let up = loss_at(&probe)?;
                probe.hidden[[s, r, c]] = orig - eps;
                let down = loss_at(&probe)?;
                probe.hidden[[s, r, c]] = orig;
                bundle.neurons[[s, r, c]] = (up - down) / (2.0 * eps);
            }
        }
    }
    bundle.output = f0;
    bundle.surrogate_loss = loss_surrogate(f0, example.label);
    bundle.hinge_loss = loss_hinge(f0, example.label);
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Expert (hidden neuron) learning rate.
    pub eta_e: f64,
    /// Router learning rate.
    pub eta_r: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub post_prune_steps: usize,
    pub seed: u64,
    pub init_router_std: f64,
    pub init_neuron_std: f64,
    /// Router norms are recorded every `log_every` steps and at the end.
    pub log_every: usize,
    pub loss: LossKind,
}

/// Which loss drives the SGD updates. `Surrogate` differentiates `1 - y f`
/// on every sample; `Hinge` drops samples whose margin is already >= 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Surrogate,
    Hinge,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta_e: 2.0,
            eta_r: 0.005,
            batch_size: 32,
            steps: 2000,
            post_prune_steps: 200,
            seed: 0,
            init_router_std: 1e-4,
            init_neuron_std: 1e-2,
            log_every: 10,
            loss: LossKind::Surrogate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.eta_e > 0.0 && self.eta_r > 0.0 && self.eta_e.is_finite() && self.eta_r.is_finite();
        if !rates_ok {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be >= 1".into()));
        }
        if !(self.init_router_std >= 0.0 && self.init_neuron_std >= 0.0) {
            return Err(Error::Config("initialization std must be >= 0".into()));
        }
        Ok(())
    }

    /// Checks the rate and batch-size scalings `eta_r <= eta_e / (m d l^2)`
    /// and `B >= l^2 d^2`, taking every hidden constant as one. These are
    /// reported, never enforced.
    pub fn advisory(&self, m: usize, d: usize, l: usize) -> AdvisoryReport {
        let rate_bound = self.eta_e / (m * d * l * l) as f64;
        let batch_bound = (l * l * d * d) as f64;
        AdvisoryReport {
            router_rate_bound: rate_bound,
            router_rate_ok: self.eta_r <= rate_bound,
            batch_bound,
            batch_ok: self.batch_size as f64 >= batch_bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryReport {
    pub router_rate_bound: f64,
    pub router_rate_ok: bool,
    pub batch_bound: f64,
    pub batch_ok: bool,
}

/// Batch statistics of one SGD step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub hinge_loss: f64,
    pub error_rate: f64,
}

/// One SGD step on the batch-mean gradient. Pruned experts and heads are
/// left untouched.
pub fn sgd_step(
    layer: &mut MoELayer,
    batch: &[Example<'_>],
    cfg_train: &TrainConfig,
    cfg_route: RoutingConfig,
    mask: &PruneMask,
) -> Result<StepStats> {
    check_analyzed(layer)?;
    if batch.is_empty() {
        return Err(Error::Contract("sgd_step needs a non-empty batch".into()));
    }
    mask.validate_for(layer)?;
    let frozen: &MoELayer = layer;
    let per_sample: Vec<SampleTerms> = batch
        .par_iter()
        .map(|ex| {
            let gating = model::route(frozen, &ex.tokens, cfg_route, mask)?;
            sample_terms(frozen, &ex.tokens, ex.label, &gating, mask)
        })
        .collect::<Result<_>>()?;

    let (k, m, d) = layer.hidden.dim();
    let mut routers = Array2::zeros((k, d));
    let mut neurons = Array3::zeros((k, m, d));
    let mut hinge = 0.0;
    let mut errors = 0usize;
    for (terms, ex) in per_sample.iter().zip(batch) {
        let h = loss_hinge(terms.output, ex.label);
        if cfg_train.loss == LossKind::Surrogate || h > 0.0 {
            apply_terms(terms, &ex.tokens, &mut routers, &mut neurons);
        }
        hinge += h;
        if ex.label.sign() * terms.output <= 0.0 {
            errors += 1;
        }
    }
    let b = batch.len() as f64;
    for s in (0..k).filter(|&s| mask.contains(s)) {
        let mut w = layer.routers.row_mut(s);
        w.zip_mut_with(&routers.row(s), |w, g| *w -= cfg_train.eta_r * (g / b));
        let mut h = layer.hidden.index_axis_mut(Axis(0), s);
        h.zip_mut_with(&neurons.index_axis(Axis(0), s), |w, g| *w -= cfg_train.eta_e * (g / b));
    }
    if !layer.routers.iter().chain(layer.hidden.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numerical("weights became non-finite during SGD".into()));
    }
    Ok(StepStats {
        hinge_loss: hinge / b,
        error_rate: errors as f64 / b,
    })
}

/// Where training batches come from.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// Fresh i.i.d. samples every step, labels by fair coin, drawn from the
    /// given stream of `TrainConfig::seed`.
    Online { ps: &'a PatternSet, n: usize, stream_id: u64 },
    /// Consecutive batches cycling through a fixed dataset in order.
    Epoch { ps: &'a PatternSet, dataset: &'a Dataset },
}

impl DataSource<'_> {
    fn patterns(&self) -> &PatternSet {
        match self {
            DataSource::Online { ps, .. } | DataSource::Epoch { ps, .. } => ps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub step: usize,
    pub hinge_loss: f64,
    pub train_error: f64,
    pub router_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch hinge loss at each step.
    pub hinge_loss: Vec<f64>,
    /// Batch error rate at each step.
    pub train_error: Vec<f64>,
    pub initial_norms: Vec<f64>,
    /// Rows at every `log_every`-th completed step and at the last step.
    pub logged: Vec<NormRecord>,
    /// Error over the whole dataset after training (epoch mode only).
    pub final_dataset_error: Option<f64>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.hinge_loss.len()
    }

    /// CSV with columns `step,hinge_loss,train_error,norm_1..norm_k`.
    pub fn to_csv(&self) -> String {
        let k = self.initial_norms.len();
        let mut out = String::from("step,hinge_loss,train_error");
        for s in 1..=k {
            out.push_str(&format!(",norm_{s}"));
        }
        out.push('\n');
        for rec in &self.logged {
            out.push_str(&format!("{},{},{}", rec.step, rec.hinge_loss, rec.train_error));
            for v in &rec.router_norms {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `steps` SGD steps. The layer is moved into pattern coordinates for
/// the duration (exact for standard-basis patterns) and returned in its
/// original coordinates.
pub fn train(
    layer: &MoELayer,
    source: DataSource<'_>,
    cfg_train: &TrainConfig,
    cfg_route: RoutingConfig,
    mask: &PruneMask,
    steps: usize,
) -> Result<(MoELayer, TrainReport)> {
    check_analyzed(layer)?;
    cfg_train.validate()?;
    mask.validate_for(layer)?;
    let ps = source.patterns();
    if ps.dim() != layer.d() {
        return Err(Error::Shape(format!("patterns have d = {}, layer d = {}", ps.dim(), layer.d())));
    }
    let d = layer.d();
    let mut work = layer.to_pattern_basis(ps);
    let mut report = TrainReport {
        initial_norms: layer.router_norms(),
        ..Default::default()
    };
    let mut rng = match source {
        DataSource::Online { stream_id, .. } => Some(rng::stream(cfg_train.seed, stream_id)),
        DataSource::Epoch { .. } => None,
    };
    let mut cursor = 0usize;
    let mut owned: Vec<synthdata::Sample> = Vec::with_capacity(cfg_train.batch_size);
    for step in 0..steps {
        owned.clear();
        match source {
            DataSource::Online { n, .. } => {
                let rng = rng.as_mut().expect("online stream");
                for _ in 0..cfg_train.batch_size {
                    let label = if rng.random::<bool>() { Label::Pos } else { Label::Neg };
                    owned.push(synthdata::sample_input(ps, n, label, rng)?);
                }
            }
            DataSource::Epoch { dataset, .. } => {
                if dataset.is_empty() {
                    return Err(Error::Contract("training dataset is empty".into()));
                }
                for _ in 0..cfg_train.batch_size {
                    owned.push(dataset.samples[cursor].clone());
                    cursor = (cursor + 1) % dataset.len();
                }
            }
        }
        let batch: Vec<Example<'_>> = owned
            .iter()
            .map(|s| Example {
                tokens: s.basis_tokens(d),
                label: s.label,
            })
            .collect();
        let stats = sgd_step(&mut work, &batch, cfg_train, cfg_route, mask)?;
        report.hinge_loss.push(stats.hinge_loss);
        report.train_error.push(stats.error_rate);
        let done = step + 1;
        if done % cfg_train.log_every == 0 || done == steps {
            report.logged.push(NormRecord {
                step: done,
                hinge_loss: stats.hinge_loss,
                train_error: stats.error_rate,
                router_norms: work.router_norms(),
            });
        }
    }
    if let DataSource::Epoch { dataset, .. } = source {
        let errors = dataset
            .samples
            .iter()
            .map(|s| model::classify(&work, &s.basis_tokens(d), cfg_route, mask).map(|f| s.label.sign() * f <= 0.0))
            .collect::<Result<Vec<bool>>>()?;
        report.final_dataset_error = Some(errors.iter().filter(|&&e| e).count() as f64 / dataset.len() as f64);
    }
    let trained = work.from_pattern_basis(ps);
    Ok((trained, report))
}

/// Zero-mean Gaussian initialization of an analyzed layer.
pub fn init_gaussian(
    k: usize,
    m: usize,
    d: usize,
    signs: Vec<f64>,
    router_std: f64,
    neuron_std: f64,
    rng: &mut rng::Rng,
) -> Result<MoELayer> {
    use rand_distr::StandardNormal;
    let routers = Array2::from_shape_simple_fn((k, d), || router_std * rng.sample::<f64, _>(StandardNormal));
    let hidden = Array3::from_shape_simple_fn((k, m, d), || neuron_std * rng.sample::<f64, _>(StandardNormal));
    MoELayer::analyzed(routers, hidden, signs)
}

/// Fraction of `dataset` the layer misclassifies (`y f(x) <= 0`).
pub fn dataset_error(layer: &MoELayer, ps: &PatternSet, dataset: &Dataset, cfg: RoutingConfig, mask: &PruneMask) -> Result<f64> {
    crate::metrics::test_accuracy(layer, mask, dataset, ps, cfg).map(|a| 1.0 - a)
}
