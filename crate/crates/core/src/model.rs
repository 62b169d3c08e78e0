//! The MoE layer: routers, experts, gating and forward passes.
//!
//! Expert `s` owns a router `w_s` (row `s` of `routers`), `m` hidden neurons
//! `w_r^(s)` (rows of `hidden[s]`) and an output head. The head is either a
//! general `d_out x m` matrix per expert or, in analyzed mode, a fixed sign
//! `a^(s)` with `d_out = 1`, in which case an expert outputs
//! `a^(s) * sum_r ReLU(<w_r^(s), x>)`.
//!
//! Top-l selection breaks ties toward the smaller index. Gating values are a
//! softmax over the selected set, stabilized by subtracting the largest
//! selected routing value.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::synthdata::PatternSet;
use crate::tokens::Tokens;

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// `W2^(s)` stored as `k x d_out x m`.
    General(Array3<f64>),
    /// Fixed classification signs `a^(s)`, each `+1` or `-1`.
    Signs(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    /// `k x d`, row `s` is `w_s`.
    pub routers: Array2<f64>,
    /// `k x m x d`, `hidden[[s, r, ..]]` is neuron `w_r^(s)`.
    pub hidden: Array3<f64>,
    pub head: Head,
}

/// Which side does the choosing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Each token picks its top-l experts.
    TokenChoice,
    /// Each expert picks its top-l tokens.
    ExpertChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub mode: RoutingMode,
    pub l: usize,
}

impl RoutingConfig {
    pub fn token_choice(l: usize) -> Self {
        RoutingConfig {
            mode: RoutingMode::TokenChoice,
            l,
        }
    }

    pub fn expert_choice(l: usize) -> Self {
        RoutingConfig {
            mode: RoutingMode::ExpertChoice,
            l,
        }
    }

    /// Checks `l` against the expert count (token choice) or token count
    /// (expert choice).
    pub fn validate(&self, k: usize, n: usize) -> Result<()> {
        let (bound, what) = match self.mode {
            RoutingMode::TokenChoice => (k, "k"),
            RoutingMode::ExpertChoice => (n, "n"),
        };
        if self.l == 0 || self.l > bound {
            return Err(Error::Config(format!(
                "{:?} needs 1 <= l <= {what} = {bound}, got l = {}",
                self.mode, self.l
            )));
        }
        Ok(())
    }
}

/// The retained expert set `S_k'`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    retained: Vec<bool>,
}

impl PruneMask {
    pub fn full(k: usize) -> Self {
        PruneMask {
            retained: vec![true; k],
        }
    }

    pub fn from_indices(k: usize, retained: &[usize]) -> Result<Self> {
        let mut mask = vec![false; k];
        for &s in retained {
            if s >= k {
                return Err(Error::Contract(format!("expert {s} out of range for k = {k}")));
            }
            mask[s] = true;
        }
        Self::from_flags(mask)
    }

    pub fn from_flags(retained: Vec<bool>) -> Result<Self> {
        if !retained.iter().any(|&r| r) {
            return Err(Error::Contract("prune mask must retain at least one expert".into()));
        }
        Ok(PruneMask { retained })
    }

    pub fn k(&self) -> usize {
        self.retained.len()
    }

    #[inline]
    pub fn contains(&self, s: usize) -> bool {
        self.retained[s]
    }

    pub fn count(&self) -> usize {
        self.retained.iter().filter(|&&r| r).count()
    }

    pub fn is_full(&self) -> bool {
        self.retained.iter().all(|&r| r)
    }

    pub fn flags(&self) -> &[bool] {
        &self.retained
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.retained.len()).filter(|&s| self.retained[s]).collect()
    }

    /// Analyzed layers need a retained expert of each sign.
    pub fn validate_for(&self, layer: &MoELayer) -> Result<()> {
        if self.k() != layer.k() {
            return Err(Error::Contract(format!(
                "mask covers {} experts, layer has {}",
                self.k(),
                layer.k()
            )));
        }
        if let Head::Signs(signs) = &layer.head {
            let pos = (0..self.k()).any(|s| self.retained[s] && signs[s] > 0.0);
            let neg = (0..self.k()).any(|s| self.retained[s] && signs[s] < 0.0);
            if !(pos && neg) {
                return Err(Error::Contract(
                    "mask must retain at least one expert from each sign group".into(),
                ));
            }
        }
        Ok(())
    }
}

impl MoELayer {
    /// Analyzed-mode layer with fixed signs.
    pub fn analyzed(routers: Array2<f64>, hidden: Array3<f64>, signs: Vec<f64>) -> Result<Self> {
        let layer = MoELayer {
            routers,
            hidden,
            head: Head::Signs(signs),
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn general(routers: Array2<f64>, hidden: Array3<f64>, output: Array3<f64>) -> Result<Self> {
        let layer = MoELayer {
            routers,
            hidden,
            head: Head::General(output),
        };
        layer.validate()?;
        Ok(layer)
    }

    /// All-zero analyzed layer.
    pub fn zeros_analyzed(k: usize, m: usize, d: usize, signs: Vec<f64>) -> Result<Self> {
        Self::analyzed(Array2::zeros((k, d)), Array3::zeros((k, m, d)), signs)
    }

    /// Signs `+1` for the first `positive` experts and `-1` for the rest.
    pub fn split_signs(k: usize, positive: usize) -> Vec<f64> {
        (0..k).map(|s| if s < positive { 1.0 } else { -1.0 }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d) = self.routers.dim();
        let (hk, _m, hd) = self.hidden.dim();
        if k == 0 || d == 0 {
            return Err(Error::Shape("layer needs k >= 1 and d >= 1".into()));
        }
        if hk != k || hd != d {
            return Err(Error::Shape(format!(
                "hidden weights {:?} do not match routers {:?}",
                self.hidden.dim(),
                self.routers.dim()
            )));
        }
        fn finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
            it.all(|v| v.is_finite())
        }
        if !finite(self.routers.iter()) || !finite(self.hidden.iter()) {
            return Err(Error::Numerical("non-finite weight".into()));
        }
        match &self.head {
            Head::General(w2) => {
                let (wk, _, wm) = w2.dim();
                if wk != k || wm != self.m() {
                    return Err(Error::Shape(format!("output weights {:?} mismatch", w2.dim())));
                }
                if !finite(w2.iter()) {
                    return Err(Error::Numerical("non-finite weight".into()));
                }
            }
            Head::Signs(signs) => {
                if signs.len() != k {
                    return Err(Error::Shape(format!("{} signs for {k} experts", signs.len())));
                }
                if signs.iter().any(|&a| a != 1.0 && a != -1.0) {
                    return Err(Error::Mode("analyzed heads must be +1 or -1".into()));
                }
                if !signs.contains(&1.0) || !signs.contains(&-1.0) {
                    return Err(Error::Mode("both sign groups must be non-empty".into()));
                }
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.routers.nrows()
    }

    pub fn d(&self) -> usize {
        self.routers.ncols()
    }

    pub fn m(&self) -> usize {
        self.hidden.dim().1
    }

    pub fn d_out(&self) -> usize {
        match &self.head {
            Head::General(w2) => w2.dim().1,
            Head::Signs(_) => 1,
        }
    }

    pub fn is_analyzed(&self) -> bool {
        matches!(self.head, Head::Signs(_))
    }

    pub fn signs(&self) -> Result<&[f64]> {
        match &self.head {
            Head::Signs(s) => Ok(s),
            Head::General(_) => Err(Error::Mode("layer has a general output head".into())),
        }
    }

    /// `(S1, S2)`: experts with head `+1` and `-1`.
    pub fn sign_groups(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let signs = self.signs()?;
        let s1 = (0..signs.len()).filter(|&s| signs[s] > 0.0).collect();
        let s2 = (0..signs.len()).filter(|&s| signs[s] < 0.0).collect();
        Ok((s1, s2))
    }

    pub fn router_norms(&self) -> Vec<f64> {
        self.routers.rows().into_iter().map(|w| w.dot(&w).sqrt()).collect()
    }

    pub fn neuron(&self, s: usize, r: usize) -> ArrayView1<'_, f64> {
        self.hidden.slice(s![s, r, ..])
    }

    /// Re-expresses every router and neuron in pattern coordinates
    /// (`c_i = <w, p_i>`). Inner products with pattern tokens and all norms
    /// are preserved, so the layer can run on basis tokens.
    pub fn to_pattern_basis(&self, ps: &PatternSet) -> MoELayer {
        self.change_basis(ps, true)
    }

    /// Inverse of [`to_pattern_basis`](Self::to_pattern_basis).
    pub fn from_pattern_basis(&self, ps: &PatternSet) -> MoELayer {
        self.change_basis(ps, false)
    }

    fn change_basis(&self, ps: &PatternSet, forward: bool) -> MoELayer {
        if ps.is_standard_basis() {
            return self.clone();
        }
        let p = ps.patterns();
        let apply = |w: &Array2<f64>| -> Array2<f64> {
            if forward {
                w.dot(&p.t())
            } else {
                w.dot(p)
            }
        };
        let (k, m, d) = self.hidden.dim();
        let flat = self.hidden.to_shape((k * m, d)).expect("contiguous").to_owned();
        let hidden = apply(&flat).into_shape_with_order((k, m, d)).expect("same size");
        MoELayer {
            routers: apply(&self.routers),
            hidden,
            head: self.head.clone(),
        }
    }

    /// Writes the `MOEL1` layer file.
    ///
    /// Header: magic, head tag (u32: 0 = fixed signs, 1 = general), then
    /// `k`, `m`, `d`, `d_out` as u32. Body, all f64: routers (`k x d`
    /// row-major), hidden neurons (expert, neuron, coordinate), then either the
    /// `k` signs or the output matrices (expert, output row, neuron).
    /// Little-endian throughout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = binio::create_file(path)?;
        let res: std::io::Result<()> = (|| {
            w.bytes(b"MOEL1")?;
            w.u32(match self.head {
                Head::Signs(_) => 0,
                Head::General(_) => 1,
            })?;
            for v in [self.k(), self.m(), self.d(), self.d_out()] {
                w.u32(v as u32)?;
            }
            w.f64s(self.routers.iter())?;
            w.f64s(self.hidden.iter())?;
            match &self.head {
                Head::Signs(signs) => w.f64s(signs.iter())?,
                Head::General(w2) => w.f64s(w2.iter())?,
            }
            Ok(())
        })();
        res.and_then(|_| w.finish().map(|_| ()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = binio::read_file(path)?;
        let mut r = Reader::new(&buf, path);
        r.magic(b"MOEL1")?;
        let tag = r.u32()?;
        let k = r.u32()? as usize;
        let m = r.u32()? as usize;
        let d = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let routers = Array2::from_shape_vec((k, d), r.f64s(k * d)?).expect("sized");
        let hidden = Array3::from_shape_vec((k, m, d), r.f64s(k * m * d)?).expect("sized");
        let head = match tag {
            0 => {
                if d_out != 1 {
                    return Err(r.fail("signed head requires d_out = 1"));
                }
                Head::Signs(r.f64s(k)?)
            }
            1 => Head::General(
                Array3::from_shape_vec((k, d_out, m), r.f64s(k * d_out * m)?).expect("sized"),
            ),
            t => return Err(r.fail(format!("unknown head tag {t}"))),
        };
        r.expect_end()?;
        let layer = MoELayer {
            routers,
            hidden,
            head,
        };
        layer.validate().map_err(|e| r.fail(e.to_string()))?;
        Ok(layer)
    }
}

/// Gating decisions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingOutput {
    pub mode: RoutingMode,
    pub l: usize,
    /// `k x n`, entry `(s, j)` is `<w_s, x^(j)>`.
    pub routing_values: Array2<f64>,
    /// Token choice: `J_j` per token. Expert choice: `J_s` per expert (empty
    /// for pruned experts). Ordered by decreasing routing value.
    pub selected: Vec<Vec<usize>>,
    /// Softmax weights over each selected set, aligned with `selected`,
    /// computed before any pruning is applied.
    pub weights: Vec<Vec<f64>>,
    /// Per expert, the `(token, G_j^(s))` pairs with a nonzero gate.
    pub routed: Vec<Vec<(usize, f64)>>,
    pub retained: Vec<bool>,
}

impl GatingOutput {
    pub fn k(&self) -> usize {
        self.routing_values.nrows()
    }

    pub fn n(&self) -> usize {
        self.routing_values.ncols()
    }

    /// `G_j^(s)`, zero when the pair is not routed.
    pub fn gate(&self, s: usize, j: usize) -> f64 {
        self.routed[s]
            .iter()
            .find(|(t, _)| *t == j)
            .map(|(_, g)| *g)
            .unwrap_or(0.0)
    }

    /// Dense `k x n` gate matrix.
    pub fn gate_matrix(&self) -> Array2<f64> {
        let mut g = Array2::zeros((self.k(), self.n()));
        for (s, pairs) in self.routed.iter().enumerate() {
            for &(j, v) in pairs {
                g[[s, j]] = v;
            }
        }
        g
    }

    /// Sum of gates received by each token.
    pub fn token_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.n()];
        for pairs in &self.routed {
            for &(j, v) in pairs {
                mass[j] += v;
            }
        }
        mass
    }

    /// Number of routed (expert, token) pairs.
    pub fn routed_pairs(&self) -> usize {
        self.routed.iter().map(|p| p.len()).sum()
    }
}

fn rank_desc(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Indices of the `l` largest values, ties to the smaller index, ordered by
/// rank.
pub(crate) fn top_l(values: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
    if l < idx.len() {
        idx.select_nth_unstable_by(l - 1, |a, b| rank_desc(*a, *b));
        idx.truncate(l);
    }
    idx.sort_unstable_by(|a, b| rank_desc(*a, *b));
    idx.into_iter().map(|(i, _)| i).collect()
}

/// Softmax of the given values with the maximum subtracted first.
pub(crate) fn stable_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `g_j^(s) = <w_s, x^(j)>` as a `k x n` matrix.
pub fn routing_values(layer: &MoELayer, tokens: &Tokens<'_>) -> Result<Array2<f64>> {
    check_dim(layer, tokens)?;
    Ok(match tokens {
        Tokens::Dense(x) => layer.routers.dot(&x.t()),
        Tokens::Basis { ids, .. } => {
            let mut g = Array2::zeros((layer.k(), ids.len()));
            for (s, w) in layer.routers.rows().into_iter().enumerate() {
                for (j, &id) in ids.iter().enumerate() {
                    g[[s, j]] = w[id as usize];
                }
            }
            g
        }
    })
}

fn check_dim(layer: &MoELayer, tokens: &Tokens<'_>) -> Result<()> {
    if tokens.dim() != layer.d() {
        return Err(Error::Shape(format!(
            "token dimension {} != layer dimension {}",
            tokens.dim(),
            layer.d()
        )));
    }
    Ok(())
}

fn check_mask(g: &Array2<f64>, mask: &PruneMask) -> Result<()> {
    if mask.k() != g.nrows() {
        return Err(Error::Contract(format!(
            "mask covers {} experts, routing matrix has {}",
            mask.k(),
            g.nrows()
        )));
    }
    Ok(())
}

/// Token-choice gating. Pruned experts keep their place in each token's
/// selected set and in the softmax denominator but receive gate zero, so a
/// token's total gate mass can drop below one.
pub fn gate_token_choice(g: &Array2<f64>, cfg: RoutingConfig, mask: &PruneMask) -> Result<GatingOutput> {
    if cfg.mode != RoutingMode::TokenChoice {
        return Err(Error::Config("gate_token_choice called with expert-choice config".into()));
    }
    let (k, n) = g.dim();
    cfg.validate(k, n.max(1))?;
    check_mask(g, mask)?;
    let mut selected = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut routed = vec![Vec::new(); k];
    let mut column = vec![0.0; k];
    for j in 0..n {
        for s in 0..k {
            column[s] = g[[s, j]];
        }
        let chosen = top_l(&column, cfg.l);
        let vals: Vec<f64> = chosen.iter().map(|&s| column[s]).collect();
        let w = stable_softmax(&vals);
        for (&s, &gate) in chosen.iter().zip(&w) {
            if mask.contains(s) {
                routed[s].push((j, gate));
            }
        }
        selected.push(chosen);
        weights.push(w);
    }
    Ok(GatingOutput {
        mode: RoutingMode::TokenChoice,
        l: cfg.l,
        routing_values: g.clone(),
        selected,
        weights,
        routed,
        retained: mask.flags().to_vec(),
    })
}

/// Expert-choice gating. Pruned experts (and their routers) take no part.
pub fn gate_expert_choice(g: &Array2<f64>, cfg: RoutingConfig, mask: &PruneMask) -> Result<GatingOutput> {
    if cfg.mode != RoutingMode::ExpertChoice {
        return Err(Error::Config("gate_expert_choice called with token-choice config".into()));
    }
    let (k, n) = g.dim();
    cfg.validate(k, n)?;
    check_mask(g, mask)?;
    let mut selected = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    let mut routed = Vec::with_capacity(k);
    for s in 0..k {
        if !mask.contains(s) {
            selected.push(Vec::new());
            weights.push(Vec::new());
            routed.push(Vec::new());
            continue;
        }
        let row = g.row(s);
        let row = row.as_slice().map(|r| r.to_vec()).unwrap_or_else(|| row.to_vec());
        let chosen = top_l(&row, cfg.l);
        let vals: Vec<f64> = chosen.iter().map(|&j| row[j]).collect();
        let w = stable_softmax(&vals);
        routed.push(chosen.iter().copied().zip(w.iter().copied()).collect());
        selected.push(chosen);
        weights.push(w);
    }
    Ok(GatingOutput {
        mode: RoutingMode::ExpertChoice,
        l: cfg.l,
        routing_values: g.clone(),
        selected,
        weights,
        routed,
        retained: mask.flags().to_vec(),
    })
}

pub fn gate(g: &Array2<f64>, cfg: RoutingConfig, mask: &PruneMask) -> Result<GatingOutput> {
    match cfg.mode {
        RoutingMode::TokenChoice => gate_token_choice(g, cfg, mask),
        RoutingMode::ExpertChoice => gate_expert_choice(g, cfg, mask),
    }
}

/// Routing values followed by gating.
pub fn route(layer: &MoELayer, tokens: &Tokens<'_>, cfg: RoutingConfig, mask: &PruneMask) -> Result<GatingOutput> {
    let g = routing_values(layer, tokens)?;
    gate(&g, cfg, mask)
}

/// `sum_r ReLU(<w_r^(s), x^(j)>)`
#[inline]
pub(crate) fn activation_sum(layer: &MoELayer, s: usize, tokens: &Tokens<'_>, j: usize) -> f64 {
    layer
        .hidden
        .index_axis(Axis(0), s)
        .rows()
        .into_iter()
        .map(|w| tokens.dot(j, w).max(0.0))
        .sum()
}

fn check_provenance(layer: &MoELayer, tokens: &Tokens<'_>, gating: &GatingOutput, mask: &PruneMask) -> Result<()> {
    check_dim(layer, tokens)?;
    if gating.k() != layer.k() || gating.n() != tokens.len() {
        return Err(Error::Contract(format!(
            "gating is {}x{}, layer/sample is {}x{}",
            gating.k(),
            gating.n(),
            layer.k(),
            tokens.len()
        )));
    }
    if mask.k() != layer.k() {
        return Err(Error::Contract("mask size differs from layer".into()));
    }
    for (s, pairs) in gating.routed.iter().enumerate() {
        if !pairs.is_empty() && !mask.contains(s) {
            return Err(Error::Contract(format!("gating routes tokens to pruned expert {s}")));
        }
    }
    Ok(())
}

/// Per-token layer output, `n x d_out`. Only routed pairs are evaluated; a
/// token with no routed retained expert gets the zero vector.
pub fn expert_forward(
    layer: &MoELayer,
    tokens: &Tokens<'_>,
    gating: &GatingOutput,
    mask: &PruneMask,
) -> Result<Array2<f64>> {
    check_provenance(layer, tokens, gating, mask)?;
    let mut out = Array2::zeros((tokens.len(), layer.d_out()));
    let mut h = Array1::zeros(layer.m());
    for (s, pairs) in gating.routed.iter().enumerate() {
        if !mask.contains(s) {
            continue;
        }
        let neurons = layer.hidden.index_axis(Axis(0), s);
        for &(j, gate) in pairs {
            if gate == 0.0 {
                continue;
            }
            match &layer.head {
                Head::Signs(signs) => {
                    out[[j, 0]] += gate * signs[s] * activation_sum(layer, s, tokens, j);
                }
                Head::General(w2) => {
                    for (r, w) in neurons.rows().into_iter().enumerate() {
                        h[r] = tokens.dot(j, w).max(0.0);
                    }
                    let y = w2.index_axis(Axis(0), s).dot(&h);
                    out.row_mut(j).scaled_add(gate, &y);
                }
            }
        }
    }
    Ok(out)
}

/// `f(x) = sum_j sum_{s in S_k'} a^(s) G_j^(s) sum_r ReLU(<w_r^(s), x^(j)>)`
/// for a gating computed from this layer and sample.
pub fn classify_gated(layer: &MoELayer, tokens: &Tokens<'_>, gating: &GatingOutput, mask: &PruneMask) -> Result<f64> {
    let signs = layer.signs()?;
    check_provenance(layer, tokens, gating, mask)?;
    let mut f = 0.0;
    for (s, pairs) in gating.routed.iter().enumerate() {
        for &(j, gate) in pairs {
            if gate != 0.0 {
                f += signs[s] * gate * activation_sum(layer, s, tokens, j);
            }
        }
    }
    Ok(f)
}

/// Analyzed-model output `f(x)`; the prediction is its sign.
pub fn classify(layer: &MoELayer, tokens: &Tokens<'_>, cfg: RoutingConfig, mask: &PruneMask) -> Result<f64> {
    layer.signs()?;
    let gating = route(layer, tokens, cfg, mask)?;
    classify_gated(layer, tokens, &gating, mask)
}
