//! End-to-end experiments: initialize, train, score, prune, evaluate and
//! optionally fine-tune the pruned layer, plus pruning-ratio sweeps and the
//! finite-difference gradient suite.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{ExperimentConfig, InitMode};
use crate::error::{Error, Result};
use crate::metrics::{self, AssumptionReport, FlopsReport, ProficiencyReport};
use crate::model::{MoELayer, PruneMask, RoutingConfig, RoutingMode};
use crate::pruning::{self, BaselineScores, Criterion};
use crate::rng;
use crate::synthdata::{self, Dataset, Label, PatternSet};
use crate::tokens::Tokens;
use crate::training::{self, DataSource, Example, TrainReport};

/// Everything up to and including training; shared by every pruning ratio.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub ps: PatternSet,
    pub layer0: MoELayer,
    pub layer_t: MoELayer,
    pub train_report: TrainReport,
    /// The fixed training set in epoch mode.
    pub train_set: Option<Dataset>,
    pub eval_set: Dataset,
    pub proficiency0: ProficiencyReport,
    pub assumptions: AssumptionReport,
    pub deltas: Vec<f64>,
    pub baseline: BaselineScores,
    pub groups: Vec<usize>,
    pub unpruned_outputs: Vec<f64>,
    pub unpruned_accuracy: f64,
    pub unpruned_flops: FlopsReport,
}

impl Prepared {
    pub fn route(&self) -> RoutingConfig {
        self.cfg.model.route()
    }

    /// Training error at the end of training: over the fixed set in epoch
    /// mode, otherwise the mean batch error of the last `log_every` steps.
    pub fn final_train_error(&self) -> f64 {
        if let Some(e) = self.train_report.final_dataset_error {
            return e;
        }
        let errs = &self.train_report.train_error;
        let window = self.cfg.train.log_every.min(errs.len());
        if window == 0 {
            return f64::NAN;
        }
        errs[errs.len() - window..].iter().sum::<f64>() / window as f64
    }
}

/// Outcome of pruning at one ratio.
#[derive(Debug, Clone)]
pub struct PrunePoint {
    pub rho: f64,
    pub criterion: Criterion,
    pub retained: PruneMask,
    pub outputs: Vec<f64>,
    pub accuracy: f64,
    pub flops: FlopsReport,
    pub finetuned: Option<Finetuned>,
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    pub layer: MoELayer,
    pub report: TrainReport,
    pub accuracy: f64,
}

/// Step 1: the initial layer, Gaussian or with planted task experts.
pub fn initialize(cfg: &ExperimentConfig, ps: &PatternSet) -> Result<MoELayer> {
    let m = &cfg.model;
    let signs = MoELayer::split_signs(m.k, m.positive_experts);
    let mut r = rng::stream(cfg.data.seed, rng::streams::INIT);
    let mut layer = training::init_gaussian(m.k, m.m, cfg.data.d, signs.clone(), cfg.train.init_router_std, cfg.train.init_neuron_std, &mut r)?;
    if m.init == InitMode::Planted {
        for s in planted_experts(cfg) {
            let task = ps.pattern(ps.task_index(if signs[s] > 0.0 { Label::Pos } else { Label::Neg }));
            layer.routers.row_mut(s).scaled_add(m.plant_router, &task);
            for r in 0..m.m {
                layer.hidden.slice_mut(ndarray::s![s, r, ..]).scaled_add(m.plant_neuron, &task);
            }
        }
    }
    Ok(layer)
}

/// The first `planted_per_group` experts of each sign group.
pub fn planted_experts(cfg: &ExperimentConfig) -> Vec<usize> {
    let m = &cfg.model;
    if m.init != InitMode::Planted {
        return Vec::new();
    }
    let pos = 0..m.planted_per_group;
    let neg = m.positive_experts..m.positive_experts + m.planted_per_group;
    pos.chain(neg).collect()
}

/// Steps 1 and 2 plus everything measured on the unpruned model.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (d, n) = (cfg.data.d, cfg.data.n);
    let route = cfg.model.route();
    let ps = synthdata::build_pattern_set(d, cfg.data.pattern_mode, cfg.data.seed)?;
    let layer0 = initialize(cfg, &ps)?;
    let mut prof_rng = rng::stream(cfg.data.seed, rng::streams::PROFICIENCY);
    let proficiency0 = metrics::estimate_proficiency(&layer0, &ps, n, route, cfg.eval.proficiency_samples, &mut prof_rng)?;
    let assumptions = metrics::check_assumptions(
        &layer0,
        &ps,
        &proficiency0,
        cfg.eval.important_threshold,
        cfg.eval.unimportant_threshold,
    )?;

    let full = PruneMask::full(cfg.model.k);
    let train_set = if cfg.data.train_samples > 0 {
        Some(synthdata::generate_dataset(&ps, n, cfg.data.train_samples, true, cfg.data.seed, rng::streams::TRAIN)?)
    } else {
        None
    };
    let source = match &train_set {
        Some(dataset) => DataSource::Epoch { ps: &ps, dataset },
        None => DataSource::Online {
            ps: &ps,
            n,
            stream_id: rng::streams::TRAIN,
        },
    };
    let (layer_t, train_report) = training::train(&layer0, source, &cfg.train, route, &full, cfg.train.steps)?;

    let eval_set = synthdata::generate_dataset(&ps, n, cfg.eval.eval_samples, true, cfg.data.seed, rng::streams::EVAL)?;
    let deltas = pruning::router_norm_change(&layer0, &layer_t)?;
    let baseline = pruning::baseline_scores(&layer0, &layer_t, &eval_set, &ps, route)?;
    let groups = pruning::sign_groups(layer0.signs()?);
    let unpruned_outputs = metrics::outputs(&layer_t, &full, &eval_set, &ps, route)?;
    let unpruned_accuracy = accuracy_of(&unpruned_outputs, &eval_set);
    let unpruned_flops = flops(cfg, &full)?;
    Ok(Prepared {
        cfg: cfg.clone(),
        ps,
        layer0,
        layer_t,
        train_report,
        train_set,
        eval_set,
        proficiency0,
        assumptions,
        deltas,
        baseline,
        groups,
        unpruned_outputs,
        unpruned_accuracy,
        unpruned_flops,
    })
}

fn accuracy_of(outputs: &[f64], dataset: &Dataset) -> f64 {
    let correct = outputs
        .iter()
        .zip(&dataset.samples)
        .filter(|(f, s)| s.label.sign() * **f > 0.0)
        .count();
    correct as f64 / dataset.len() as f64
}

fn flops(cfg: &ExperimentConfig, mask: &PruneMask) -> Result<FlopsReport> {
    let m = &cfg.model;
    metrics::flops_per_sample(m.k, m.m, cfg.data.d, 1, cfg.data.n, m.route(), mask, None)
}

/// The retained set a criterion picks at ratio `rho`.
pub fn select(p: &Prepared, rho: f64, criterion: Criterion) -> Result<PruneMask> {
    let grouping = p.cfg.prune.grouping;
    let mask = match criterion {
        Criterion::Random => {
            let mut r = rng::stream(p.cfg.train.seed, rng::streams::RANDOM_PRUNE);
            pruning::random_mask(p.layer0.k(), rho, &p.groups, grouping, &mut r)?
        }
        _ => {
            let scores = p.baseline.for_criterion(criterion, &p.deltas)?;
            pruning::select_retained(&scores, rho, grouping, &p.groups)?.retained
        }
    };
    pruning::check_routing_feasible(&mask, p.route())?;
    if mask.validate_for(&p.layer_t).is_err() {
        return Err(Error::InfeasibleRatio(format!(
            "rho = {rho} with whole-layer grouping removes an entire sign group"
        )));
    }
    Ok(mask)
}

/// Steps 3 and 4 at one ratio: prune, evaluate, and fine-tune the pruned
/// layer for `post_steps` steps when nonzero.
pub fn prune_and_evaluate(p: &Prepared, rho: f64, criterion: Criterion, post_steps: usize) -> Result<PrunePoint> {
    let route = p.route();
    let retained = select(p, rho, criterion)?;
    let outputs = metrics::outputs(&p.layer_t, &retained, &p.eval_set, &p.ps, route)?;
    let accuracy = accuracy_of(&outputs, &p.eval_set);
    let finetuned = if post_steps > 0 {
        let source = match &p.train_set {
            Some(dataset) => DataSource::Epoch { ps: &p.ps, dataset },
            None => DataSource::Online {
                ps: &p.ps,
                n: p.cfg.data.n,
                stream_id: rng::streams::POST_TRAIN,
            },
        };
        let (layer, report) = training::train(&p.layer_t, source, &p.cfg.train, route, &retained, post_steps)?;
        let accuracy = metrics::test_accuracy(&layer, &retained, &p.eval_set, &p.ps, route)?;
        Some(Finetuned { layer, report, accuracy })
    } else {
        None
    };
    Ok(PrunePoint {
        rho,
        criterion,
        flops: flops(&p.cfg, &retained)?,
        retained,
        outputs,
        accuracy,
        finetuned,
    })
}

/// Report bundle of a full pipeline run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub prepared: Prepared,
    pub point: PrunePoint,
}

/// Runs the whole pipeline for the single ratio in `cfg.prune.rho`. When
/// `out` is given, reports are written there as they become available and a
/// `FAILED` marker is left behind on error.
pub fn run_full_pipeline(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    let result = (|| {
        cfg.validate()?;
        if cfg.prune.rho.len() != 1 {
            return Err(Error::Config(format!(
                "run takes exactly one rho, got {}; use sweep for several",
                cfg.prune.rho.len()
            )));
        }
        let writer = out.map(OutDir::create).transpose()?;
        if let Some(w) = &writer {
            w.clear_marker()?;
        }
        let prepared = prepare(cfg)?;
        if let Some(w) = &writer {
            write_prepared(w, &prepared)?;
        }
        let point = prune_and_evaluate(&prepared, cfg.prune.rho[0], cfg.prune.criterion, cfg.train.post_prune_steps)?;
        if let Some(w) = &writer {
            write_point(w, &prepared, &point)?;
            write_run_manifest(w, &prepared, "run", Some(&point), &[])?;
        }
        Ok(RunReport { prepared, point })
    })();
    if let (Err(e), Some(dir)) = (&result, out) {
        write_failure_marker(dir, e);
    }
    result
}

/// One row of a sweep. `point` is `None` when the ratio was infeasible.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub rho: f64,
    pub point: Option<PrunePoint>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub prepared: Prepared,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("rho,criterion,status,retained,accuracy,finetuned_accuracy\n");
        let criterion = self.prepared.cfg.prune.criterion;
        for row in &self.rows {
            match &row.point {
                Some(p) => out.push_str(&format!(
                    "{},{},ok,{},{},{}\n",
                    row.rho,
                    criterion,
                    p.retained.count(),
                    p.accuracy,
                    p.finetuned.as_ref().map(|f| f.accuracy.to_string()).unwrap_or_default()
                )),
                None => out.push_str(&format!("{},{},infeasible,,,\n", row.rho, criterion)),
            }
        }
        out
    }

    pub fn flops_csv(&self) -> String {
        let mut out = String::from("rho,status,retained,routing_flops,expert_flops,total_flops,parameters\n");
        for row in &self.rows {
            match &row.point {
                Some(p) => out.push_str(&format!(
                    "{},ok,{},{},{},{},{}\n",
                    row.rho,
                    p.retained.count(),
                    p.flops.routing_flops,
                    p.flops.expert_flops,
                    p.flops.total,
                    p.flops.parameters
                )),
                None => out.push_str(&format!("{},infeasible,,,,,\n", row.rho)),
            }
        }
        out
    }
}

/// Trains once and prunes at every ratio. Infeasible ratios produce warning
/// rows instead of failing the sweep.
pub fn run_pruning_sweep(cfg: &ExperimentConfig, rho_values: &[f64], out: Option<&Path>) -> Result<SweepReport> {
    let result = (|| {
        cfg.validate()?;
        if rho_values.is_empty() {
            return Err(Error::Config("sweep needs at least one rho".into()));
        }
        let writer = out.map(OutDir::create).transpose()?;
        if let Some(w) = &writer {
            w.clear_marker()?;
        }
        let prepared = prepare(cfg)?;
        if let Some(w) = &writer {
            write_prepared(w, &prepared)?;
        }
        let mut rows = Vec::with_capacity(rho_values.len());
        for &rho in rho_values {
            match prune_and_evaluate(&prepared, rho, cfg.prune.criterion, cfg.train.post_prune_steps) {
                Ok(point) => rows.push(SweepRow {
                    rho,
                    point: Some(point),
                    warning: None,
                }),
                Err(Error::InfeasibleRatio(msg)) => rows.push(SweepRow {
                    rho,
                    point: None,
                    warning: Some(msg),
                }),
                Err(e) => return Err(e),
            }
        }
        let report = SweepReport { prepared, rows };
        if let Some(w) = &writer {
            w.write("accuracy_vs_rho.csv", &report.accuracy_csv())?;
            w.write("flops_vs_rho.csv", &report.flops_csv())?;
            let warnings: Vec<String> = report
                .rows
                .iter()
                .filter_map(|r| r.warning.as_ref().map(|m| format!("rho {}: {m}", r.rho)))
                .collect();
            write_run_manifest(w, &report.prepared, "sweep", None, &warnings)?;
        }
        Ok(report)
    })();
    if let (Err(e), Some(dir)) = (&result, out) {
        write_failure_marker(dir, e);
    }
    result
}

struct OutDir {
    dir: PathBuf,
    written: std::cell::RefCell<Vec<String>>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            written: Default::default(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.written.borrow_mut().push(name.to_string());
        Ok(())
    }

    fn record(&self, name: &str) {
        self.written.borrow_mut().push(name.to_string());
    }

    fn clear_marker(&self) -> Result<()> {
        let marker = self.path(FAILURE_MARKER);
        match fs::remove_file(&marker) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::io(&marker, e)),
        }
    }
}

/// File left in the output directory when a run fails.
pub const FAILURE_MARKER: &str = "FAILED";

fn write_failure_marker(dir: &Path, e: &Error) {
    if fs::create_dir_all(dir).is_ok() {
        // Best effort: the original error is what gets reported.
        let _ = fs::write(dir.join(FAILURE_MARKER), format!("exit_code={}\n{e}\n", e.exit_code()));
    }
}

fn assumptions_csv(a: &AssumptionReport) -> String {
    let mut out = String::from("expert,sign,proficiency,class,separation,activated_fraction\n");
    for e in &a.experts {
        let class = serde_json::to_value(e.class).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.expert, e.sign, e.proficiency, class, e.separation, e.activated_fraction
        ));
    }
    out
}

fn write_prepared(w: &OutDir, p: &Prepared) -> Result<()> {
    w.write("train_log.csv", &p.train_report.to_csv())?;
    w.write("assumptions.csv", &assumptions_csv(&p.assumptions))?;
    let proj = metrics::projections(&p.layer_t, &p.ps)?;
    w.write("projections_router.csv", &proj.router_matrix_csv())?;
    w.write("projections_neuron.csv", &proj.neuron_csv())?;
    for (name, layer) in [("layer_init.moel", &p.layer0), ("layer_trained.moel", &p.layer_t)] {
        layer.save(&w.path(name))?;
        w.record(name);
    }
    p.ps.save(&w.path("patterns.moep"))?;
    w.record("patterns.moep");
    Ok(())
}

fn write_point(w: &OutDir, p: &Prepared, point: &PrunePoint) -> Result<()> {
    let rows = pruning::score_rows(&p.deltas, &p.groups, &p.baseline, &point.retained);
    w.write("scores.csv", &pruning::score_table_csv(&rows))?;
    let mut metrics_csv = String::from("stage,retained,accuracy,routing_flops,expert_flops,total_flops\n");
    let mut line = |stage: &str, retained: usize, acc: f64, f: &FlopsReport| {
        metrics_csv.push_str(&format!(
            "{stage},{retained},{acc},{},{},{}\n",
            f.routing_flops, f.expert_flops, f.total
        ));
    };
    line("unpruned", p.layer_t.k(), p.unpruned_accuracy, &p.unpruned_flops);
    line("pruned", point.retained.count(), point.accuracy, &point.flops);
    if let Some(ft) = &point.finetuned {
        line("finetuned", point.retained.count(), ft.accuracy, &point.flops);
    }
    w.write("metrics.csv", &metrics_csv)?;
    if let Some(ft) = &point.finetuned {
        w.write("finetune_log.csv", &ft.report.to_csv())?;
        ft.layer.save(&w.path("layer_finetuned.moel"))?;
        w.record("layer_finetuned.moel");
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    status: &'a str,
    data_seed: u64,
    train_seed: u64,
    config: &'a ExperimentConfig,
    gamma: f64,
    important_experts: Vec<usize>,
    final_train_error: f64,
    unpruned_accuracy: f64,
    retained: Option<Vec<usize>>,
    pruned_accuracy: Option<f64>,
    finetuned_accuracy: Option<f64>,
    warnings: &'a [String],
    outputs: Vec<String>,
}

fn write_run_manifest(w: &OutDir, p: &Prepared, command: &str, point: Option<&PrunePoint>, warnings: &[String]) -> Result<()> {
    let mut outputs = w.written.borrow().clone();
    outputs.push("run_manifest.json".into());
    let manifest = RunManifest {
        command,
        status: "ok",
        data_seed: p.cfg.data.seed,
        train_seed: p.cfg.train.seed,
        config: &p.cfg,
        gamma: p.assumptions.gamma,
        important_experts: p.assumptions.important(),
        final_train_error: p.final_train_error(),
        unpruned_accuracy: p.unpruned_accuracy,
        retained: point.map(|pt| pt.retained.indices()),
        pruned_accuracy: point.map(|pt| pt.accuracy),
        finetuned_accuracy: point.and_then(|pt| pt.finetuned.as_ref().map(|f| f.accuracy)),
        warnings,
        outputs,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    w.write("run_manifest.json", &text)
}

/// One finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub mode: RoutingMode,
    pub instance: usize,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub m: usize,
    pub retained: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    /// Draws rejected because a perturbation changed a selection set.
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn max_error(&self, mode: RoutingMode) -> f64 {
        self.rows.iter().filter(|r| r.mode == mode).map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn count(&self, mode: RoutingMode) -> usize {
        self.rows.iter().filter(|r| r.mode == mode).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,instance,d,n,k,l,m,retained,rel_error\n");
        for r in &self.rows {
            let mode = match r.mode {
                RoutingMode::TokenChoice => "token_choice",
                RoutingMode::ExpertChoice => "expert_choice",
            };
            out.push_str(&format!(
                "{mode},{},{},{},{},{},{},{},{}\n",
                r.instance, r.d, r.n, r.k, r.l, r.m, r.retained, r.rel_error
            ));
        }
        out
    }
}

/// Step used by the suite.
pub const GRADCHECK_EPS: f64 = 1e-6;
/// Gradient blocks with norm below this count as zero.
pub const GRADCHECK_FLOOR: f64 = 1e-9;
/// Largest relative error the suite accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Compares closed-form and central-difference gradients on random small
/// instances (d <= 16, n <= 8, k <= 4, l <= 2, m <= 6) with dense Gaussian
/// tokens, `instances` per routing mode. Every other instance uses a random
/// prune mask.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut r = rng::stream(seed, rng::streams::GRADCHECK);
    let mut rows = Vec::new();
    let mut skipped = 0;
    for mode in [RoutingMode::TokenChoice, RoutingMode::ExpertChoice] {
        let mut done = 0;
        while done < instances {
            let d = r.random_range(2..=16);
            let n = r.random_range(2..=8);
            let k = r.random_range(2..=4);
            let m = r.random_range(1..=6);
            let l = r.random_range(1..=2);
            let positive = r.random_range(1..k);
            let layer = training::init_gaussian(k, m, d, MoELayer::split_signs(k, positive), 1.0, 1.0, &mut r)?;
            let x = Array2::from_shape_simple_fn((n, d), || r.sample::<f64, _>(StandardNormal));
            let label = if r.random::<bool>() { Label::Pos } else { Label::Neg };
            let mask = if done % 2 == 1 {
                let mut flags: Vec<bool> = (0..k).map(|_| r.random::<bool>()).collect();
                flags[r.random_range(0..positive)] = true;
                flags[r.random_range(positive..k)] = true;
                PruneMask::from_flags(flags)?
            } else {
                PruneMask::full(k)
            };
            let cfg = RoutingConfig { mode, l };
            let example = Example {
                tokens: Tokens::Dense(x.view()),
                label,
            };
            let closed = training::sample_gradients(&layer, &example, cfg, &mask)?;
            let fd = match training::finite_difference_gradients(&layer, &example, cfg, &mask, GRADCHECK_EPS) {
                Ok(g) => g,
                Err(Error::NonDifferentiable(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            rows.push(GradcheckRow {
                mode,
                instance: done,
                d,
                n,
                k,
                l,
                m,
                retained: mask.count(),
                rel_error: closed.relative_error(&fd, GRADCHECK_FLOOR),
            });
            done += 1;
        }
    }
    Ok(GradcheckReport { rows, skipped })
}
