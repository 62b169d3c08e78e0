//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero when any fails. Reference values are
//! computed here from the definitions, independently of the library code
//! under test.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use moe_prune::config::{ExperimentConfig, InitMode};
use moe_prune::harness::{self, Prepared};
use moe_prune::manifest::{self, CheckpointManifest};
use moe_prune::metrics;
use moe_prune::model::{self, MoELayer, PruneMask, RoutingConfig, RoutingMode};
use moe_prune::pruning::{self, Criterion};
use moe_prune::synthdata::{self, Dataset, Label, PatternMode, PatternSet};
use moe_prune::training::{self, Example};
use moe_prune::Tokens;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn randn(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_layer(r: &mut ChaCha8Rng, k: usize, m: usize, d: usize) -> MoELayer {
    let positive = r.random_range(1..k);
    let routers = Array2::from_shape_simple_fn((k, d), || randn(r));
    let hidden = ndarray::Array3::from_shape_simple_fn((k, m, d), || randn(r));
    MoELayer::analyzed(routers, hidden, MoELayer::split_signs(k, positive)).unwrap()
}

fn random_mask(r: &mut ChaCha8Rng, k: usize) -> PruneMask {
    let mut flags: Vec<bool> = (0..k).map(|_| r.random::<bool>()).collect();
    flags[r.random_range(0..k)] = true;
    PruneMask::from_flags(flags).unwrap()
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- oracles

/// Order by decreasing value, ties to the lower index.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Softmax with the maximum subtracted, summed in the given order.
fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let mut total = 0.0;
    for v in &e {
        total += v;
    }
    e.iter().map(|v| v / total).collect()
}

/// Dense `k x n` gate matrix straight from the routing definitions.
fn oracle_gates(g: &Array2<f64>, cfg: RoutingConfig, mask: &[bool]) -> Array2<f64> {
    let (k, n) = g.dim();
    let mut out = Array2::zeros((k, n));
    match cfg.mode {
        RoutingMode::TokenChoice => {
            for j in 0..n {
                let col: Vec<f64> = (0..k).map(|s| g[[s, j]]).collect();
                let top: Vec<usize> = ranked(&col).into_iter().take(cfg.l).collect();
                let w = softmax(&top.iter().map(|&s| col[s]).collect::<Vec<_>>());
                for (&s, &v) in top.iter().zip(&w) {
                    if mask[s] {
                        out[[s, j]] = v;
                    }
                }
            }
        }
        RoutingMode::ExpertChoice => {
            for s in (0..k).filter(|&s| mask[s]) {
                let row: Vec<f64> = g.row(s).to_vec();
                let top: Vec<usize> = ranked(&row).into_iter().take(cfg.l).collect();
                let w = softmax(&top.iter().map(|&j| row[j]).collect::<Vec<_>>());
                for (&j, &v) in top.iter().zip(&w) {
                    out[[s, j]] = v;
                }
            }
        }
    }
    out
}

/// `f(x)` from dense tokens and the oracle gates.
fn oracle_output(layer: &MoELayer, x: &Array2<f64>, cfg: RoutingConfig, mask: &[bool]) -> f64 {
    let g = layer.routers.dot(&x.t());
    let gates = oracle_gates(&g, cfg, mask);
    let signs = layer.signs().unwrap();
    let mut f = 0.0;
    for s in 0..layer.k() {
        for j in 0..x.nrows() {
            if gates[[s, j]] == 0.0 {
                continue;
            }
            let act: f64 = (0..layer.m()).map(|r| layer.neuron(s, r).dot(&x.row(j)).max(0.0)).sum();
            f += signs[s] * gates[[s, j]] * act;
        }
    }
    f
}

fn oracle_selection(layer: &MoELayer, x: &Array2<f64>, cfg: RoutingConfig, mask: &[bool]) -> Vec<bool> {
    let g = layer.routers.dot(&x.t());
    let (k, n) = g.dim();
    let mut sel = vec![false; k * n];
    match cfg.mode {
        RoutingMode::TokenChoice => {
            for j in 0..n {
                let col: Vec<f64> = (0..k).map(|s| g[[s, j]]).collect();
                for s in ranked(&col).into_iter().take(cfg.l) {
                    sel[s * n + j] = true;
                }
            }
        }
        RoutingMode::ExpertChoice => {
            for s in (0..k).filter(|&s| mask[s]) {
                for j in ranked(&g.row(s).to_vec()).into_iter().take(cfg.l) {
                    sel[s * n + j] = true;
                }
            }
        }
    }
    sel
}

// ------------------------------------------------------------- criteria

fn gradient_correctness() -> Outcome {
    const PER_MODE: usize = 100;
    const EPS: f64 = 1e-6;
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut worst = [0.0f64; 2];
    let mut skipped = 0;
    for (mi, mode) in [RoutingMode::TokenChoice, RoutingMode::ExpertChoice].into_iter().enumerate() {
        let mut done = 0;
        while done < PER_MODE {
            let d = r.random_range(2..=16);
            let n = r.random_range(2..=8);
            let k = r.random_range(2..=4);
            let m = r.random_range(1..=6);
            let l = r.random_range(1..=2);
            let layer = random_layer(&mut r, k, m, d);
            let mask = if done % 2 == 0 { PruneMask::full(k) } else { random_mask(&mut r, k) };
            let flags = mask.flags().to_vec();
            let x = Array2::from_shape_simple_fn((n, d), || randn(&mut r));
            let y = if r.random::<bool>() { 1.0 } else { -1.0 };
            let cfg = RoutingConfig { mode, l };
            let base = oracle_selection(&layer, &x, cfg, &flags);

            let mut probe = layer.clone();
            let mut fd_r = Array2::<f64>::zeros((k, d));
            let mut fd_n = ndarray::Array3::<f64>::zeros((k, m, d));
            let mut stable = true;
            let loss = |p: &MoELayer| -> Option<f64> {
                if oracle_selection(p, &x, cfg, &flags) != base {
                    return None;
                }
                Some(1.0 - y * oracle_output(p, &x, cfg, &flags))
            };
            'outer: for s in (0..k).filter(|&s| flags[s]) {
                for c in 0..d {
                    let orig = probe.routers[[s, c]];
                    probe.routers[[s, c]] = orig + EPS;
                    let up = loss(&probe);
                    probe.routers[[s, c]] = orig - EPS;
                    let down = loss(&probe);
                    probe.routers[[s, c]] = orig;
                    match (up, down) {
                        (Some(u), Some(v)) => fd_r[[s, c]] = (u - v) / (2.0 * EPS),
                        _ => {
                            stable = false;
                            break 'outer;
                        }
                    }
                    for q in 0..m {
                        let orig = probe.hidden[[s, q, c]];
                        probe.hidden[[s, q, c]] = orig + EPS;
                        let up = loss(&probe);
                        probe.hidden[[s, q, c]] = orig - EPS;
                        let down = loss(&probe);
                        probe.hidden[[s, q, c]] = orig;
                        match (up, down) {
                            (Some(u), Some(v)) => fd_n[[s, q, c]] = (u - v) / (2.0 * EPS),
                            _ => {
                                stable = false;
                                break 'outer;
                            }
                        }
                    }
                }
            }
            if !stable {
                skipped += 1;
                continue;
            }
            let label = if y > 0.0 { Label::Pos } else { Label::Neg };
            let ex = Example {
                tokens: Tokens::dense(x.view()),
                label,
            };
            let closed = training::sample_gradients(&layer, &ex, cfg, &mask).map_err(|e| e.to_string())?;
            let rel = |a: &[f64], b: &[f64]| {
                let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
                if scale < 1e-9 {
                    0.0
                } else {
                    diff / scale
                }
            };
            let e = rel(closed.routers.as_slice().unwrap(), fd_r.as_slice().unwrap())
                .max(rel(closed.neurons.as_slice().unwrap(), fd_n.as_slice().unwrap()));
            worst[mi] = worst[mi].max(e);
            done += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{PER_MODE} instances per mode, max rel error token-choice {:.2e}, expert-choice {:.2e}, {skipped} draws skipped, {secs:.1}s",
        worst[0], worst[1]
    );
    ensure(worst[0] < 1e-4 && worst[1] < 1e-4, || detail.clone())?;
    ensure(secs < 30.0, || detail.clone())?;
    Ok(detail)
}

fn gating_invariants() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(22);
    let mut max_norm_err: f64 = 0.0;
    let mut max_mass: f64 = 0.0;
    for i in 0..1000 {
        let k = r.random_range(2..=8);
        let n = r.random_range(1..=12);
        let mode = if i % 2 == 0 { RoutingMode::TokenChoice } else { RoutingMode::ExpertChoice };
        let bound = if mode == RoutingMode::TokenChoice { k } else { n };
        let cfg = RoutingConfig { mode, l: r.random_range(1..=bound) };
        // Some instances get repeated values to exercise tie-breaking.
        let g = if i % 5 == 0 {
            Array2::from_shape_simple_fn((k, n), || r.random_range(0..3) as f64)
        } else {
            Array2::from_shape_simple_fn((k, n), || 3.0 * randn(&mut r))
        };
        let full = PruneMask::full(k);
        let out = model::gate(&g, cfg, &full).map_err(|e| e.to_string())?;
        let oracle = oracle_gates(&g, cfg, &vec![true; k]);
        let got = out.gate_matrix();
        for (a, b) in got.iter().zip(oracle.iter()) {
            ensure(a.to_bits() == b.to_bits(), || format!("instance {i}: full-mask gate {a} != oracle {b}"))?;
        }
        match mode {
            RoutingMode::TokenChoice => {
                for mass in out.token_mass() {
                    max_norm_err = max_norm_err.max((mass - 1.0).abs());
                }
            }
            RoutingMode::ExpertChoice => {
                for s in 0..k {
                    let sum: f64 = got.row(s).sum();
                    max_norm_err = max_norm_err.max((sum - 1.0).abs());
                }
            }
        }
        let mask = random_mask(&mut r, k);
        let pruned = model::gate(&g, cfg, &mask).map_err(|e| e.to_string())?;
        let pg = pruned.gate_matrix();
        let po = oracle_gates(&g, cfg, mask.flags());
        for (a, b) in pg.iter().zip(po.iter()) {
            ensure(a.to_bits() == b.to_bits(), || format!("instance {i}: pruned gate {a} != oracle {b}"))?;
        }
        if mode == RoutingMode::TokenChoice {
            for mass in pruned.token_mass() {
                max_mass = max_mass.max(mass);
                ensure(mass <= 1.0 + 1e-12, || format!("instance {i}: pruned token mass {mass} > 1"))?;
            }
        }
    }
    ensure(max_norm_err <= 1e-12, || format!("normalization error {max_norm_err:.2e}"))?;
    Ok(format!(
        "1000 instances, max normalization error {max_norm_err:.1e}, max pruned token mass {max_mass:.6}, gates bit-identical to oracle"
    ))
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.d = 40;
    cfg.data.n = 12;
    cfg.model.k = 8;
    cfg.model.m = 4;
    cfg.model.l = 3;
    cfg.model.positive_experts = 4;
    cfg.train.steps = 300;
    cfg.train.post_prune_steps = 0;
    cfg.eval.eval_samples = 1000;
    cfg.eval.proficiency_samples = 100;
    cfg.prune.rho = vec![0.0];
    cfg
}

fn prune_identity() -> Outcome {
    let mut lines = Vec::new();
    for (mode, pattern_mode) in [
        (RoutingMode::ExpertChoice, PatternMode::StandardBasis),
        (RoutingMode::TokenChoice, PatternMode::RandomOrthonormal),
    ] {
        let mut cfg = small_config();
        cfg.model.routing = mode;
        cfg.data.pattern_mode = pattern_mode;
        let rep = harness::run_full_pipeline(&cfg, None).map_err(|e| e.to_string())?;
        let p = &rep.prepared;
        ensure(rep.point.retained.is_full(), || "rho = 0 pruned an expert".into())?;
        ensure(rep.point.accuracy == p.unpruned_accuracy, || {
            format!("accuracy {} != unpruned {}", rep.point.accuracy, p.unpruned_accuracy)
        })?;
        let mut worst: f64 = 0.0;
        for (a, b) in rep.point.outputs.iter().zip(&p.unpruned_outputs) {
            worst = worst.max((a - b).abs());
        }
        // Independent recomputation on dense tokens in the original basis.
        let full = vec![true; cfg.model.k];
        let mut worst_dense: f64 = 0.0;
        for (smp, f) in p.eval_set.samples.iter().zip(&rep.point.outputs).take(300) {
            let x = smp.dense_tokens(&p.ps);
            worst_dense = worst_dense.max((oracle_output(&p.layer_t, &x, cfg.model.route(), &full) - f).abs());
        }
        ensure(worst <= 1e-12 && worst_dense <= 1e-12, || {
            format!("{mode:?}: output gap {worst:.2e}, dense gap {worst_dense:.2e}")
        })?;
        lines.push(format!("{mode:?} accuracy {} gap {worst:.1e} dense gap {worst_dense:.1e}", p.unpruned_accuracy));
    }
    Ok(lines.join("; "))
}

fn task_of(sign: f64, ps: &PatternSet) -> usize {
    ps.task_index(if sign > 0.0 { Label::Pos } else { Label::Neg })
}

fn synthetic_separation() -> Outcome {
    let hi = 1.5 * 5f64.ln();
    let lo = 0.5 * 5f64.ln();
    let mut passed = 0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.set_seed(seed);
        ensure((cfg.data.d, cfg.data.n, cfg.model.k, cfg.model.l) == (200, 100, 20, 5), || "unexpected defaults".into())?;
        let p = harness::prepare(&cfg).map_err(|e| e.to_string())?;
        let signs = p.layer0.signs().unwrap().to_vec();
        let mut ok = p.final_train_error() == 0.0;
        let mut dominant_per_group = [0usize; 2];
        let mut dominant = 0;
        for s in 0..cfg.model.k {
            let w0 = p.layer0.routers.row(s);
            let wt = p.layer_t.routers.row(s);
            let delta = norm(wt) - norm(w0);
            let task = p.ps.pattern(task_of(signs[s], &p.ps));
            let dom = wt.dot(&task) >= 0.5 * norm(wt);
            if dom {
                dominant += 1;
                dominant_per_group[usize::from(signs[s] < 0.0)] += 1;
                ok &= delta > hi;
            } else {
                ok &= delta < lo;
            }
        }
        ok &= dominant_per_group[0] > 0 && dominant_per_group[1] > 0;
        passed += usize::from(ok);
        notes.push(format!("{seed}:{}({dominant})", if ok { "ok" } else { "x" }));
    }
    let detail = format!("{passed}/10 seeds separate [{}]", notes.join(" "));
    ensure(passed >= 9, || detail.clone())?;
    Ok(detail)
}

fn planted(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(seed);
    cfg.model.init = InitMode::Planted;
    cfg
}

fn planted_runs() -> &'static Vec<Prepared> {
    static RUNS: OnceLock<Vec<Prepared>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..20u64)
            .map(|seed| harness::prepare(&planted(seed)).expect("planted run"))
            .collect()
    })
}

fn accuracy(layer: &MoELayer, mask: &[bool], ds: &Dataset, ps: &PatternSet, cfg: RoutingConfig, limit: usize) -> f64 {
    let mut correct = 0;
    let mut total = 0;
    for smp in ds.samples.iter().take(limit) {
        let f = oracle_output(layer, &smp.dense_tokens(ps), cfg, mask);
        correct += usize::from(smp.label.sign() * f > 0.0);
        total += 1;
    }
    correct as f64 / total as f64
}

fn safe_pruning() -> Outcome {
    let mut worst_pruned: f64 = 1.0;
    let mut worst_unpruned: f64 = 1.0;
    let mut gammas = Vec::new();
    for (seed, p) in planted_runs().iter().enumerate() {
        ensure(p.eval_set.len() == 10_000, || "evaluation set is not 10,000 samples".into())?;
        let gamma = p.assumptions.gamma;
        gammas.push(gamma);
        let pt = harness::prune_and_evaluate(p, gamma, Criterion::Delta, 0).map_err(|e| e.to_string())?;
        ensure(pt.finetuned.is_none(), || "fine-tuning ran".into())?;
        let check = accuracy(&p.layer_t, pt.retained.flags(), &p.eval_set, &p.ps, p.route(), 500);
        let lib = pt.outputs.iter().zip(&p.eval_set.samples).take(500).filter(|(f, s)| s.label.sign() * **f > 0.0).count() as f64 / 500.0;
        ensure(check == lib, || format!("seed {seed}: dense accuracy {check} != reported {lib} on 500 samples"))?;
        worst_pruned = worst_pruned.min(pt.accuracy);
        worst_unpruned = worst_unpruned.min(p.unpruned_accuracy);
    }
    let gmin = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    let gmax = gammas.iter().copied().fold(0.0, f64::max);
    let detail = format!(
        "20 planted seeds, gamma in [{gmin:.2}, {gmax:.2}], min pruned accuracy {worst_pruned:.4}, min unpruned {worst_unpruned:.4}"
    );
    ensure(worst_pruned >= 0.995 && worst_unpruned >= 0.995, || detail.clone())?;
    Ok(detail)
}

fn minimal_with_finetuning() -> Outcome {
    let mut worst: f64 = 1.0;
    let mut worst_before: f64 = 1.0;
    for (seed, p) in planted_runs().iter().enumerate() {
        let steps = p.cfg.train.post_prune_steps;
        ensure(steps > 0, || "no fine-tuning steps configured".into())?;
        let pt = harness::prune_and_evaluate(p, 0.9, Criterion::Delta, steps).map_err(|e| e.to_string())?;
        let signs = p.layer0.signs().unwrap();
        let kept = pt.retained.indices();
        ensure(kept.len() == 2 && signs[kept[0]] != signs[kept[1]], || format!("seed {seed}: retained {kept:?}"))?;
        let ft = pt.finetuned.as_ref().expect("fine-tuned");
        worst = worst.min(ft.accuracy);
        worst_before = worst_before.min(pt.accuracy);
    }
    let detail = format!(
        "1 expert per group, T' = {}, min accuracy after fine-tuning {worst:.4} (before {worst_before:.4})",
        planted_runs()[0].cfg.train.post_prune_steps
    );
    ensure(worst >= 0.995, || detail.clone())?;
    Ok(detail)
}

/// One-sided sign test: P(X >= wins) for X ~ Bin(wins + losses, 1/2).
fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut p = 0.0;
    for i in wins..=n {
        let mut c = 1.0;
        for t in 0..i {
            c = c * (n - t) as f64 / (t + 1) as f64;
        }
        p += c * 0.5f64.powi(n as i32);
    }
    p
}

fn random_dominance() -> Outcome {
    let (mut sum_delta, mut sum_random) = (0.0, 0.0);
    let (mut wins, mut losses) = (0, 0);
    for p in planted_runs() {
        let gamma = p.assumptions.gamma;
        let a = harness::prune_and_evaluate(p, gamma, Criterion::Delta, 0).map_err(|e| e.to_string())?.accuracy;
        let b = harness::prune_and_evaluate(p, gamma, Criterion::Random, 0).map_err(|e| e.to_string())?.accuracy;
        sum_delta += a;
        sum_random += b;
        if a > b {
            wins += 1;
        } else if a < b {
            losses += 1;
        }
    }
    let n = planted_runs().len() as f64;
    let gap = (sum_delta - sum_random) / n;
    let p = if wins + losses == 0 { 1.0 } else { sign_test(wins, losses) };
    let detail = format!(
        "mean accuracy delta {:.4} vs random {:.4}, gap {gap:.4}, {wins} wins / {losses} losses, sign-test p = {p:.4}",
        sum_delta / n,
        sum_random / n
    );
    ensure(gap > 0.0 && p < 0.05, || detail.clone())?;
    Ok(detail)
}

fn flops_affinity() -> Outcome {
    let mut checked = 0;
    for (k, m, d, n, l) in [(20usize, 10usize, 200usize, 100usize, 5usize), (8, 3, 17, 9, 4), (33, 7, 64, 50, 50)] {
        let cfg = RoutingConfig::expert_choice(l);
        let mut totals = Vec::new();
        for kept in 1..=k {
            let mask = PruneMask::from_indices(k, &(0..kept).collect::<Vec<_>>()).unwrap();
            let f = metrics::flops_per_sample(k, m, d, 1, n, cfg, &mask, None).map_err(|e| e.to_string())?;
            let hand = kept as u64 * (2 * n * d + l * (2 * d * m + 2 * m)) as u64;
            ensure(f.total == hand, || format!("k'={kept}: {} != hand count {hand}", f.total))?;
            totals.push(f.total as i128);
        }
        for w in totals.windows(3) {
            ensure(w[2] - 2 * w[1] + w[0] == 0, || format!("nonzero second difference at k = {k}"))?;
        }
        // Least-squares affine fit over all retained counts.
        let xs: Vec<f64> = (1..=k).map(|v| v as f64).collect();
        let ys: Vec<f64> = totals.iter().map(|&v| v as f64).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / k as f64, ys.iter().sum::<f64>() / k as f64);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        let resid = xs.iter().zip(&ys).map(|(x, y)| (y - (my + slope * (x - mx))).abs()).fold(0.0, f64::max);
        ensure(resid == 0.0, || format!("affine residual {resid}"))?;
        checked += k;
    }
    Ok(format!("{checked} retained counts over 3 shapes, exact hand counts, affine residual 0"))
}

fn baseline_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let mut worst_ortho: f64 = 0.0;
    for i in 0..60 {
        let mode = if i % 2 == 0 { PatternMode::StandardBasis } else { PatternMode::RandomOrthonormal };
        let k = r.random_range(2..=4);
        let n = r.random_range(1..=6);
        let d = r.random_range(n.max(4)..=10);
        let l = r.random_range(1..=k);
        let count = r.random_range(1..=10);
        let ps = synthdata::build_pattern_set(d, mode, i).map_err(|e| e.to_string())?;
        let ds = synthdata::generate_dataset(&ps, n, count, false, i, 4).map_err(|e| e.to_string())?;
        let l0 = random_layer(&mut r, k, 2, d);
        let mut lt = random_layer(&mut r, k, 2, d);
        lt.head = l0.head.clone();
        if i % 3 == 0 {
            // Force ties between experts on some tokens.
            let row = lt.routers.row(0).to_owned();
            lt.routers.row_mut(k - 1).assign(&row);
        }
        let cfg = RoutingConfig::token_choice(l);
        let got = pruning::baseline_scores(&l0, &lt, &ds, &ps, cfg).map_err(|e| e.to_string())?;

        let mut hits = vec![0usize; k];
        let mut gate_sum = vec![0.0; k];
        let mut tokens = 0;
        for smp in &ds.samples {
            let x = smp.dense_tokens(&ps);
            for j in 0..n {
                let g: Vec<f64> = (0..k).map(|s| lt.routers.row(s).dot(&x.row(j))).collect();
                // Rank of each expert by direct pairwise comparison.
                let beats = |a: usize, b: usize| g[a] > g[b] || (g[a] == g[b] && a < b);
                let rank: Vec<usize> = (0..k).map(|s| (0..k).filter(|&t| t != s && beats(t, s)).count()).collect();
                let mut chosen: Vec<usize> = (0..k).filter(|&s| rank[s] < l).collect();
                chosen.sort_by_key(|&s| rank[s]);
                let w = softmax(&chosen.iter().map(|&s| g[s]).collect::<Vec<_>>());
                let top = chosen[0];
                hits[top] += 1;
                gate_sum[top] += w[0];
                tokens += 1;
            }
        }
        let top1: Vec<f64> = hits.iter().map(|&h| h as f64 / tokens as f64).collect();
        let conf: Vec<f64> = (0..k).map(|s| if hits[s] == 0 { 0.0 } else { gate_sum[s] / hits[s] as f64 }).collect();
        let imp: Vec<f64> = top1.iter().zip(&conf).map(|(a, b)| a * b).collect();
        let pairs = [
            ("top1", got.top1_fraction.as_ref(), &top1),
            ("confidence", got.confidence.as_ref(), &conf),
            ("importance", got.importance_score.as_ref(), &imp),
        ];
        for (name, lib, want) in pairs {
            let lib = lib.ok_or_else(|| format!("{name} missing under token choice"))?;
            for (a, b) in lib.iter().zip(want.iter()) {
                if mode == PatternMode::StandardBasis {
                    ensure(a.to_bits() == b.to_bits(), || format!("instance {i}: {name} {a} != oracle {b}"))?;
                } else {
                    worst_ortho = worst_ortho.max((a - b).abs());
                    ensure((a - b).abs() <= 1e-12, || format!("instance {i}: {name} {a} vs oracle {b}"))?;
                }
            }
        }
    }
    Ok(format!(
        "60 instances (k <= 4, n <= 6, <= 10 samples), standard basis exact, orthonormal max gap {worst_ortho:.1e}"
    ))
}

fn exit_code_of(bin: &str, args: &[&str]) -> Option<i32> {
    Command::new(bin).args(args).output().ok()?.status.code()
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let a0 = random_layer(&mut r, 6, 3, 9);
    let a1 = random_layer(&mut r, 6, 3, 9);
    let b0 = random_layer(&mut r, 4, 2, 5);
    let b1 = random_layer(&mut r, 4, 2, 5);
    let ckpt = manifest::write_checkpoint(dir.path(), &[("enc", &a0, &a1), ("dec", &b0, &b1)]).map_err(|e| e.to_string())?;
    let path = dir.path().join("manifest.json");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = CheckpointManifest::load(&path).map_err(|e| e.to_string())?;
    let scores = manifest::score_checkpoints(&loaded, dir.path(), 0.5).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (ls, (pre, post)) in scores.iter().zip([(&a0, &a1), (&b0, &b1)]) {
        for s in 0..pre.k() {
            let want = norm(post.routers.row(s)) - norm(pre.routers.row(s));
            worst = worst.max((ls.deltas[s] - want).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("delta gap {worst:.2e}"))?;

    let bin = env!("CARGO_BIN_EXE_moe-prune");
    let out = dir.path().join("scores");
    let out_s = out.to_str().unwrap();
    let run = |m: &Path| exit_code_of(bin, &["score", "--config", m.to_str().unwrap(), "--out", out_s]);
    ensure(run(&path) == Some(0), || "CLI score on a valid manifest did not exit 0".into())?;
    ensure(out.join("scores_enc.csv").exists(), || "scores_enc.csv missing".into())?;

    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let mut cases: Vec<(&str, String, i32)> = Vec::new();
    cases.push(("invalid JSON", "{ not json".into(), 1));
    cases.push(("unknown field", text.replacen("\"layers\"", "\"layerz\"", 1), 1));
    let mut m = ckpt.clone();
    m.layers[0].experts[1].post.dim = 8;
    m.layers[0].experts[1].post.length = None;
    cases.push(("dimension mismatch", serde_json::to_string(&m).unwrap(), 1));
    let mut m = ckpt.clone();
    m.layers[0].experts[0].pre.length = Some(10);
    cases.push(("length differs from dim", serde_json::to_string(&m).unwrap(), 1));
    let mut m = ckpt.clone();
    m.layers[1].experts[2].pre.path = "missing.f64".into();
    cases.push(("missing tensor file", serde_json::to_string(&m).unwrap(), 3));
    let mut m = ckpt.clone();
    m.layers[0].experts[5].post.offset = 1 << 20;
    cases.push(("offset past end of file", serde_json::to_string(&m).unwrap(), 3));
    let mut report = Vec::new();
    for (i, (name, body, want)) in cases.iter().enumerate() {
        let p = dir.path().join(format!("bad{i}.json"));
        std::fs::write(&p, body).map_err(|e| e.to_string())?;
        let lib = CheckpointManifest::load(&p).and_then(|m| manifest::score_checkpoints(&m, dir.path(), 0.5));
        let lib_code = lib.err().map(|e| e.exit_code());
        ensure(lib_code == Some(*want), || format!("{name}: library code {lib_code:?}, expected {want}"))?;
        let cli = run(&p);
        ensure(cli == Some(*want), || format!("{name}: CLI exit {cli:?}, expected {want}"))?;
        report.push(format!("{name}={want}"));
    }
    // Truncated tensor file.
    let short = dir.path().join("dec_post.f64");
    let len = std::fs::metadata(&short).map_err(|e| e.to_string())?.len();
    std::fs::OpenOptions::new().write(true).open(&short).and_then(|f| f.set_len(len - 8)).map_err(|e| e.to_string())?;
    let code = manifest::score_checkpoints(&loaded, dir.path(), 0.5).err().map(|e| e.exit_code());
    ensure(code == Some(3) && run(&path) == Some(3), || format!("truncated file gave {code:?}"))?;
    report.push("truncated file=3".into());
    let missing = exit_code_of(bin, &["score", "--config", dir.path().join("nope.json").to_str().unwrap(), "--out", out_s]);
    ensure(missing == Some(3), || format!("missing manifest gave {missing:?}"))?;
    Ok(format!("delta gap {worst:.1e}; exit codes {}", report.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("gating invariants", gating_invariants),
        ("prune identity", prune_identity),
        ("synthetic separation", synthetic_separation),
        ("safe pruning without fine-tuning", safe_pruning),
        ("minimal retained set with fine-tuning", minimal_with_finetuning),
        ("delta beats random pruning", random_dominance),
        ("FLOPs affine in retained experts", flops_affinity),
        ("baseline score oracle", baseline_oracle),
        ("checkpoint scoring round trip", checkpoint_round_trip),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
