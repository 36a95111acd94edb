//! Target hidden states for edit requests: gradient solving at one layer,
//! backward spreading of the final-layer residual, forward replay from the
//! first layer, and the BLUE and OneLayer variants.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Error, Result};
use crate::math;
use crate::model::{HiddenTrace, Injection, TransformerModel};
use crate::tensor::Tensor;

/// Rewrite the answer of `prompt` to `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub prompt: Vec<usize>,
    pub decisive_index: usize,
    pub target: Vec<usize>,
    /// Pre-edit greedy answer.
    pub original: Vec<usize>,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            bail!(Input, "edit request has an empty target answer");
        }
        if self.decisive_index >= self.prompt.len() {
            bail!(
                Input,
                "decisive index {} outside prompt of length {}",
                self.decisive_index,
                self.prompt.len()
            );
        }
        Ok(())
    }

    /// `[prompt, target]`, the sequence the solver runs on.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.target);
        s
    }

    /// Teacher-forced cross-entropy of the target answer, optionally with
    /// the stream at `(layer, decisive_index)` replaced by `vector`.
    pub fn answer_ce(&self, model: &TransformerModel, replacement: Option<(usize, &[f64])>) -> Result<f64> {
        let seq = self.full_sequence();
        let out = match replacement {
            Some((layer, v)) => model.forward_with_replacement(&seq, layer, self.decisive_index, v)?,
            None => model.forward(&seq, None)?,
        };
        let p = self.prompt.len();
        let rows = self
            .target
            .iter()
            .enumerate()
            .map(|(i, &t)| (out.logits.row(p - 1 + i), t));
        Ok(math::mean_nll(rows))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSolveConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the answer cross-entropy (nats per token) drops below this.
    pub ce_threshold: f64,
    /// Optimize `δ` with `m = h + δ` (`δ` starts at zero) instead of `m`.
    pub delta_param: bool,
    /// Clamp `‖δ‖` to this multiple of `‖h‖`.
    pub clamp_factor: Option<f64>,
}

impl Default for TargetSolveConfig {
    fn default() -> Self {
        TargetSolveConfig {
            lr: 0.05,
            max_iters: 100,
            ce_threshold: 0.05,
            delta_param: true,
            clamp_factor: Some(4.0),
        }
    }
}

impl TargetSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            bail!(Input, "max_iters must be at least 1");
        }
        if !(self.ce_threshold > 0.0) || !(self.lr > 0.0) {
            bail!(Input, "ce_threshold and lr must be positive");
        }
        if let Some(c) = self.clamp_factor {
            if !(c > 0.0) {
                bail!(Input, "clamp factor must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "onelayer")]
    OneLayer,
    #[serde(rename = "memit-div", alias = "memit")]
    MemitDividing,
    #[serde(rename = "memit-nodiv")]
    MemitNoDividing,
    #[serde(rename = "blue")]
    Blue,
    #[serde(rename = "fe")]
    ForwardReplay,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::OneLayer,
        Method::MemitDividing,
        Method::MemitNoDividing,
        Method::Blue,
        Method::ForwardReplay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::OneLayer => "onelayer",
            Method::MemitDividing => "memit-div",
            Method::MemitNoDividing => "memit-nodiv",
            Method::Blue => "blue",
            Method::ForwardReplay => "fe",
        }
    }

    /// Layers the method edits, shallow first.
    pub fn edited_layers(self, decisive: &[usize]) -> Vec<usize> {
        match self {
            Method::OneLayer => vec![*decisive.last().expect("non-empty")],
            Method::Blue => vec![decisive[0], *decisive.last().expect("non-empty")],
            _ => decisive.to_vec(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Plain "memit" means the dividing variant.
        if s == "memit" {
            return Ok(Method::MemitDividing);
        }
        match Method::ALL.iter().find(|m| m.name() == s) {
            Some(m) => Ok(*m),
            None => bail!(Input, "unknown method '{}'", s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpreadMode {
    Dividing,
    NoDividing,
}

/// Result of one gradient solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvedTarget {
    pub layer: usize,
    /// Stream at the decisive position before solving.
    pub h: Vec<f64>,
    pub m: Vec<f64>,
    /// Cross-entropy re-evaluated with [`TransformerModel::forward_with_replacement`].
    pub achieved_ce: f64,
    pub iters: usize,
}

/// Per-request targets for the layers a method edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPlan {
    pub method: Method,
    pub layers: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
    /// Answer cross-entropy at the anchor solve (or replay pass).
    pub achieved_ce: f64,
    /// Gradient iterations spent on this request.
    pub iters: usize,
}

impl TargetPlan {
    pub fn target_at(&self, layer: usize) -> Option<&[f64]> {
        let i = self.layers.iter().position(|&l| l == layer)?;
        Some(&self.targets[i])
    }
}

/// Remaining final-layer residual after each edited layer.
///
/// `ratios[s][i]` is `‖m_L − h_L‖ / ‖r₀‖` for request `i` after step `s`;
/// step 0 is before any edit and is all ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrace {
    pub initial_norms: Vec<f64>,
    /// Requests whose initial residual is too small to normalize by; their
    /// ratios are reported as 1.
    pub degenerate: Vec<bool>,
    /// Layer edited at each step; `layers[0]` is `None`.
    pub layers: Vec<Option<usize>>,
    pub ratios: Vec<Vec<f64>>,
}

/// Relative size below which an initial residual counts as degenerate.
pub const DEGENERATE_RESIDUAL: f64 = 1e-9;

impl ResidualTrace {
    /// Starts a trace from the initial residual vectors `r₀ = m_L − h_L`.
    /// `scales` are the `‖h_L‖` values used to judge degeneracy.
    pub fn new(initial: &[Vec<f64>], scales: &[f64]) -> Self {
        let initial_norms: Vec<f64> = initial.iter().map(|r| math::norm(r)).collect();
        let degenerate = initial_norms
            .iter()
            .zip(scales)
            .map(|(n, s)| *n <= DEGENERATE_RESIDUAL * s.max(1.0))
            .collect();
        ResidualTrace {
            layers: vec![None],
            ratios: vec![vec![1.0; initial.len()]],
            initial_norms,
            degenerate,
        }
    }

    /// Records the residuals remaining after editing `layer`.
    pub fn push(&mut self, layer: usize, residuals: &[Vec<f64>]) {
        let row = residuals
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if self.degenerate[i] {
                    1.0
                } else {
                    math::norm(r) / self.initial_norms[i]
                }
            })
            .collect();
        self.layers.push(Some(layer));
        self.ratios.push(row);
    }

    pub fn mean(&self, step: usize) -> f64 {
        let r = &self.ratios[step];
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }

    /// Mean ratio after each edit step (step 0 excluded).
    pub fn means(&self) -> Vec<f64> {
        (1..self.ratios.len()).map(|s| self.mean(s)).collect()
    }
}

struct DeltaAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl DeltaAdam {
    fn new(n: usize) -> Self {
        DeltaAdam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let bc1 = 1.0 - libm::pow(B1, self.t as f64);
        let bc2 = 1.0 - libm::pow(B2, self.t as f64);
        for j in 0..x.len() {
            self.m[j] = B1 * self.m[j] + (1.0 - B1) * g[j];
            self.v[j] = B2 * self.v[j] + (1.0 - B2) * g[j] * g[j];
            x[j] -= lr * (self.m[j] / bc1) / (math::sqrt(self.v[j] / bc2) + 1e-8);
        }
    }
}

/// Records the teacher-forced answer cross-entropy with the stream at
/// `(layer, decisive_index)` replaced by the `1 × d_model` variable `x`.
pub fn record_answer_loss(tape: &mut Tape, model: &TransformerModel, req: &EditRequest, layer: usize, x: Var) -> Result<Var> {
    let seq = req.full_sequence();
    let g = model.record(
        tape,
        &seq,
        Some(Injection {
            layer,
            position: req.decisive_index,
            vector: x,
        }),
    )?;
    let p = req.prompt.len();
    let mut sel = Tensor::zeros(&[req.target.len(), seq.len()]);
    for i in 0..req.target.len() {
        sel.set(i, p - 1 + i, 1.0);
    }
    let sel = tape.constant(sel);
    let rows = tape.matmul(sel, g.logits)?;
    tape.cross_entropy(rows, &req.target)
}

/// Loss and gradient with respect to the injected stream row.
fn loss_and_grad(model: &TransformerModel, req: &EditRequest, layer: usize, ctx: &SolveCtx, v: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::row_vector(v.to_vec()));
    let loss = match &ctx.cache {
        Some(cache) => {
            let out = model.record_suffix(&mut tape, cache, layer, x)?;
            tape.cross_entropy(out.logits, &req.target)?
        }
        None => record_answer_loss(&mut tape, model, req, layer, x)?,
    };
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss, None)?;
    let g = grads.get_or_zeros(x, tape.value(x)).into_data();
    Ok((value, g))
}

struct SolveCtx {
    cache: Option<crate::model::PrefixCache>,
}

/// Finds `m` for the stream at `(layer, decisive_index)` that makes the
/// model emit `req.target`, by Adam on the answer cross-entropy. The model
/// is not modified.
pub fn solve_target(model: &TransformerModel, req: &EditRequest, layer: usize, cfg: &TargetSolveConfig) -> Result<SolvedTarget> {
    req.validate()?;
    cfg.validate()?;
    model.config().decisive_slot(layer)?;
    let trace = model
        .forward(&req.prompt, Some(req.decisive_index))?
        .trace
        .expect("captured");
    let h = trace.hidden_at(layer).expect("decisive layer").to_vec();
    // A single answer token predicted from the last prompt row only needs
    // the blocks above `layer` for that row.
    let fast = req.target.len() == 1 && req.decisive_index + 1 == req.prompt.len();
    let ctx = SolveCtx {
        cache: if fast {
            Some(model.prefix_cache(&req.prompt[..req.decisive_index])?)
        } else {
            None
        },
    };
    let limit = cfg.clamp_factor.map(|c| c * math::norm(&h));
    let mut x = if cfg.delta_param { vec![0.0; h.len()] } else { h.clone() };
    let to_m = |x: &[f64]| -> Vec<f64> {
        if cfg.delta_param {
            math::add(&h, x)
        } else {
            x.to_vec()
        }
    };
    let mut adam = DeltaAdam::new(h.len());
    let mut iters = 0;
    loop {
        let m = to_m(&x);
        let (loss, grad) = loss_and_grad(model, req, layer, &ctx, &m).map_err(|e| match e {
            Error::NonFinite { op, .. } => Error::Numeric(format!(
                "target solve at layer {layer}: non-finite {op} at iteration {iters}"
            )),
            other => other,
        })?;
        if loss < cfg.ce_threshold || iters == cfg.max_iters {
            break;
        }
        adam.step(&mut x, &grad, cfg.lr);
        iters += 1;
        if let Some(limit) = limit {
            let d = if cfg.delta_param { x.clone() } else { math::sub(&x, &h) };
            let n = math::norm(&d);
            if n > limit {
                let s = limit / n;
                let clamped: Vec<f64> = d.iter().map(|v| v * s).collect();
                x = if cfg.delta_param { clamped } else { math::add(&h, &clamped) };
            }
        }
    }
    let m = to_m(&x);
    let achieved_ce = req.answer_ce(model, Some((layer, &m)))?;
    if !achieved_ce.is_finite() {
        bail!(Numeric, "target solve at layer {} ended with non-finite loss", layer);
    }
    Ok(SolvedTarget {
        layer,
        h,
        m,
        achieved_ce,
        iters,
    })
}

/// `m_l = h_l + (m_L − h_L)/remaining` (dividing) or `h_l + (m_L − h_L)`.
pub fn spread_target(current: &HiddenTrace, m_final: &[f64], layer: usize, remaining: usize, mode: SpreadMode) -> Result<Vec<f64>> {
    if remaining == 0 {
        bail!(Domain, "remaining layer count must be at least 1");
    }
    let h_l = match current.hidden_at(layer) {
        Some(h) => h,
        None => bail!(Input, "layer {} is not in the trace", layer),
    };
    let h_final = current.h_final();
    if m_final.len() != h_final.len() {
        bail!(Structural, "target length {} != hidden size {}", m_final.len(), h_final.len());
    }
    let div = match mode {
        SpreadMode::Dividing => remaining as f64,
        SpreadMode::NoDividing => 1.0,
    };
    Ok(h_l
        .iter()
        .zip(m_final.iter().zip(h_final))
        .map(|(h, (m, hf))| h + (m - hf) / div)
        .collect())
}

/// Replays `m_1` at the first decisive layer and reads the targets of every
/// decisive layer from the same pass.
pub fn forward_replay_targets(model: &TransformerModel, req: &EditRequest, m_first: &[f64]) -> Result<TargetPlan> {
    req.validate()?;
    let first = model.config().first_decisive();
    let seq = req.full_sequence();
    let out = model.forward_with_replacement(&seq, first, req.decisive_index, m_first)?;
    let trace = out.trace.expect("captured");
    let p = req.prompt.len();
    let rows = req
        .target
        .iter()
        .enumerate()
        .map(|(i, &t)| (out.logits.row(p - 1 + i), t));
    Ok(TargetPlan {
        method: Method::ForwardReplay,
        layers: trace.layers.clone(),
        targets: trace.hidden.clone(),
        achieved_ce: math::mean_nll(rows),
        iters: 0,
    })
}

/// FE plan: solve at the first decisive layer, then replay.
pub fn fe_targets(model: &TransformerModel, req: &EditRequest, cfg: &TargetSolveConfig) -> Result<TargetPlan> {
    let solved = solve_target(model, req, model.config().first_decisive(), cfg)?;
    let mut plan = forward_replay_targets(model, req, &solved.m)?;
    plan.iters = solved.iters;
    Ok(plan)
}

/// Independent solves at the first and last decisive layers.
pub fn blue_targets(model: &TransformerModel, req: &EditRequest, cfg: &TargetSolveConfig) -> Result<TargetPlan> {
    let c = model.config();
    if c.decisive_layers.len() < 2 {
        bail!(Input, "BLUE needs at least two decisive layers");
    }
    let a = solve_target(model, req, c.first_decisive(), cfg)?;
    let b = solve_target(model, req, c.last_decisive(), cfg)?;
    Ok(TargetPlan {
        method: Method::Blue,
        layers: vec![a.layer, b.layer],
        targets: vec![a.m, b.m],
        achieved_ce: b.achieved_ce,
        iters: a.iters + b.iters,
    })
}

/// Single solve at the last decisive layer.
pub fn onelayer_target(model: &TransformerModel, req: &EditRequest, cfg: &TargetSolveConfig) -> Result<TargetPlan> {
    let s = solve_target(model, req, model.config().last_decisive(), cfg)?;
    Ok(TargetPlan {
        method: Method::OneLayer,
        layers: vec![s.layer],
        targets: vec![s.m],
        achieved_ce: s.achieved_ce,
        iters: s.iters,
    })
}

/// Applies `f` to every request, on the rayon pool when the `parallel`
/// feature is enabled. Output order follows `reqs`.
pub fn map_requests<T, F>(reqs: &[EditRequest], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&EditRequest) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        reqs.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        reqs.iter().map(f).collect()
    }
}

/// Short human-readable summary of a plan, used in logs.
pub fn describe(plan: &TargetPlan) -> String {
    format!(
        "{} layers={:?} ce={:.4} iters={}",
        plan.method, plan.layers, plan.achieved_ce, plan.iters
    )
}
