//! Closed-form batch editing of MLP down-projections.
//!
//! For a layer with weights `W`, keys `K_I`, targets `M_I` and preservation
//! keys `K_J`, the update is
//!
//! ```text
//! Δ (K_I K_Iᵀ + λ K_J K_Jᵀ + ε I) = (M_I − W K_I) K_Iᵀ
//! ```
//!
//! solved by Cholesky factorization. [`run_edit`] applies it layer by layer,
//! shallow to deep, re-collecting keys from the partially edited model.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;
use crate::model::{HiddenTrace, TransformerModel};
use crate::targets::{
    blue_targets, fe_targets, map_requests, onelayer_target, solve_target, spread_target, EditRequest, Method,
    ResidualTrace, SpreadMode, TargetPlan, TargetSolveConfig,
};
use crate::tensor::Tensor;

/// Relative ridge used when `ridge_eps` is not set: `1e-6 · tr(A) / dim`.
pub const DEFAULT_RELATIVE_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub method: Method,
    /// Weight of the preservation term.
    pub lambda: f64,
    /// Diagonal regularizer; `None` uses `1e-6 · tr(A) / dim`.
    pub ridge_eps: Option<f64>,
    /// Number of preservation prompts `u`.
    pub preservation_size: usize,
    /// Seeds the preservation sample.
    pub seed: u64,
    pub solve: TargetSolveConfig,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            method: Method::MemitDividing,
            lambda: 5.0,
            ridge_eps: None,
            preservation_size: 375,
            seed: 0,
            solve: TargetSolveConfig::default(),
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            bail!(Input, "lambda must be positive, got {}", self.lambda);
        }
        if let Some(e) = self.ridge_eps {
            if !(e >= 0.0) {
                bail!(Input, "ridge_eps must be non-negative, got {}", e);
            }
        }
        self.solve.validate()
    }
}

/// Stacked keys and targets for one layer, one column per request.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMatrices {
    /// `d_mlp x n`.
    pub k_i: Tensor,
    /// `d_model x n`.
    pub m_i: Tensor,
    /// `d_mlp x u`.
    pub k_j: Tensor,
}

impl EditMatrices {
    pub fn validate(&self, w: &Tensor) -> Result<()> {
        let (d_out, d_in) = (w.rows(), w.cols());
        if self.k_i.rows() != d_in || self.k_j.rows() != d_in {
            bail!(
                Structural,
                "key rows {} / {} do not match W columns {}",
                self.k_i.rows(),
                self.k_j.rows(),
                d_in
            );
        }
        if self.m_i.rows() != d_out {
            bail!(Structural, "target rows {} do not match W rows {}", self.m_i.rows(), d_out);
        }
        if self.k_i.cols() != self.m_i.cols() {
            bail!(
                Structural,
                "{} key columns for {} target columns",
                self.k_i.cols(),
                self.m_i.cols()
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDelta {
    pub layer: usize,
    pub delta: Tensor,
    pub frobenius: f64,
    pub max_abs: f64,
    /// Ridge actually added to the system.
    pub ridge: f64,
}

impl EditDelta {
    pub fn new(layer: usize, delta: Tensor, ridge: f64) -> Self {
        EditDelta {
            layer,
            frobenius: delta.norm(),
            max_abs: delta.max_abs(),
            delta,
            ridge,
        }
    }

    pub fn negated(&self) -> EditDelta {
        EditDelta::new(self.layer, self.delta.scale(-1.0), self.ridge)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRunRecord {
    pub method: Method,
    pub layers: Vec<usize>,
    pub deltas: Vec<EditDelta>,
    pub residuals: ResidualTrace,
    pub plans: Vec<TargetPlan>,
    pub pre_checksum: String,
    pub post_checksum: String,
    pub solver_iters: usize,
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `K Kᵀ` for a `rows x cols` key matrix.
fn gram(k: &Tensor) -> Tensor {
    let kt = k.transpose();
    let n = k.rows();
    let mut out = vec![0.0; n * n];
    if k.cols() > 0 {
        crate::tensor::gemm_nn(n, k.cols(), n, k.data(), kt.data(), &mut out);
    }
    Tensor::matrix(n, n, out).expect("square")
}

/// Ridge used for a system matrix `a` when none is configured.
pub fn default_ridge(a: &Tensor) -> f64 {
    let n = a.rows();
    let tr: f64 = (0..n).map(|i| a.get(i, i)).sum();
    DEFAULT_RELATIVE_RIDGE * tr / n as f64
}

/// Solves the regularized normal equations for `Δ` (same shape as `w`).
pub fn solve_delta(w: &Tensor, mats: &EditMatrices, lambda: f64, ridge_eps: Option<f64>) -> Result<(Tensor, f64)> {
    mats.validate(w)?;
    let d_in = w.cols();
    let mut a = gram(&mats.k_i);
    if mats.k_j.cols() > 0 {
        a.add_assign(&gram(&mats.k_j).scale(lambda))?;
    }
    let ridge = ridge_eps.unwrap_or_else(|| default_ridge(&a));
    for i in 0..d_in {
        let v = a.get(i, i) + ridge;
        a.set(i, i, v);
    }
    let wk = w.matmul(&mats.k_i)?;
    let resid = mats.m_i.sub(&wk)?;
    // B = R K_Iᵀ, d_out x d_in.
    let b = resid.matmul(&mats.k_i.transpose())?;
    if b.data().iter().all(|v| *v == 0.0) {
        return Ok((Tensor::zeros(w.shape()), ridge));
    }
    let chol = match nalgebra::Cholesky::new(to_dmatrix(&a)) {
        Some(c) => c,
        None => bail!(
            Numeric,
            "preservation system is not positive definite (ridge {:e}); increase ridge_eps",
            ridge
        ),
    };
    // A Δᵀ = Bᵀ since A is symmetric.
    let dt = chol.solve(&to_dmatrix(&b.transpose()));
    let delta = from_dmatrix(&dt.transpose());
    if !delta.is_finite() {
        bail!(Numeric, "edit solve produced non-finite values; increase ridge_eps");
    }
    Ok((delta, ridge))
}

/// Adds `delta` to the down-projection of its layer.
pub fn apply_edit(model: &mut TransformerModel, delta: &EditDelta) -> Result<()> {
    if delta.layer >= model.blocks.len() {
        bail!(Structural, "layer {} out of range", delta.layer);
    }
    let w = model.w_down_mut(delta.layer);
    if w.shape() != delta.delta.shape() {
        bail!(
            Structural,
            "delta shape {:?} does not match W {:?}",
            delta.delta.shape(),
            w.shape()
        );
    }
    if delta.delta.data().iter().all(|v| *v == 0.0) {
        return Ok(());
    }
    for (x, d) in w.data_mut().iter_mut().zip(delta.delta.data()) {
        *x += d;
    }
    Ok(())
}

fn traces(model: &TransformerModel, reqs: &[EditRequest]) -> Result<Vec<HiddenTrace>> {
    let items: Vec<(&[usize], usize)> = reqs.iter().map(|r| (r.prompt.as_slice(), r.decisive_index)).collect();
    model.trace_many(&items)
}

fn keys_from(traces: &[HiddenTrace], layer: usize, d_mlp: usize) -> Tensor {
    let cols: Vec<&[f64]> = traces.iter().map(|t| t.key_at(layer).expect("decisive layer")).collect();
    Tensor::from_fn(d_mlp, cols.len(), |i, j| cols[j][i])
}

/// Current keys of `requests` at `layer`, one column each.
pub fn collect_keys(model: &TransformerModel, requests: &[EditRequest], layer: usize) -> Result<Tensor> {
    model.config().decisive_slot(layer)?;
    let t = traces(model, requests)?;
    Ok(keys_from(&t, layer, model.config().d_mlp))
}

/// Deterministic choice of `u` preservation prompts from `pool`.
pub fn sample_preservation(pool: &[(Vec<usize>, usize)], u: usize, seed: u64) -> Result<Vec<(Vec<usize>, usize)>> {
    if u > pool.len() {
        bail!(Input, "requested {} preservation prompts but only {} are available", u, pool.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, pool.len(), u).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

/// Keys of `u` sampled `(prompt, decisive position)` pairs at `layer`.
pub fn collect_preservation_keys(
    model: &TransformerModel,
    pool: &[(Vec<usize>, usize)],
    layer: usize,
    u: usize,
    seed: u64,
) -> Result<Tensor> {
    model.config().decisive_slot(layer)?;
    let chosen = sample_preservation(pool, u, seed)?;
    preservation_keys(model, &chosen, layer)
}

fn preservation_keys(model: &TransformerModel, chosen: &[(Vec<usize>, usize)], layer: usize) -> Result<Tensor> {
    let d_mlp = model.config().d_mlp;
    if chosen.is_empty() {
        return Ok(Tensor::zeros(&[d_mlp, 0]));
    }
    let items: Vec<(&[usize], usize)> = chosen.iter().map(|(p, d)| (p.as_slice(), *d)).collect();
    let t = model.trace_many(&items)?;
    Ok(keys_from(&t, layer, d_mlp))
}

/// Edits `model` so every request in `batch` is rewritten, using the
/// method in `cfg`. `pool` supplies preservation prompts with their
/// decisive positions. On error the model is restored.
pub fn run_edit(
    model: &mut TransformerModel,
    batch: &[EditRequest],
    pool: &[(Vec<usize>, usize)],
    cfg: &EditConfig,
) -> Result<EditRunRecord> {
    let backup = model.clone();
    match run_edit_inner(model, batch, pool, cfg) {
        Ok(r) => Ok(r),
        Err(e) => {
            *model = backup;
            Err(e)
        }
    }
}

fn run_edit_inner(
    model: &mut TransformerModel,
    batch: &[EditRequest],
    pool: &[(Vec<usize>, usize)],
    cfg: &EditConfig,
) -> Result<EditRunRecord> {
    cfg.validate()?;
    if batch.is_empty() {
        bail!(Input, "edit batch is empty");
    }
    for r in batch {
        r.validate()?;
    }
    let pre_checksum = model.checksum();
    let decisive = model.config().decisive_layers.clone();
    let last = *decisive.last().expect("validated");
    let d_model = model.config().d_model;
    let d_mlp = model.config().d_mlp;
    let layers = cfg.method.edited_layers(&decisive);
    let chosen = sample_preservation(pool, cfg.preservation_size, cfg.seed)?;

    let frozen: &TransformerModel = model;
    let mut plans: Vec<TargetPlan> = match cfg.method {
        Method::MemitDividing | Method::MemitNoDividing => map_requests(batch, |r| {
            let s = solve_target(frozen, r, last, &cfg.solve)?;
            Ok(TargetPlan {
                method: cfg.method,
                layers: vec![last],
                targets: vec![s.m],
                achieved_ce: s.achieved_ce,
                iters: s.iters,
            })
        })?,
        Method::ForwardReplay => map_requests(batch, |r| fe_targets(frozen, r, &cfg.solve))?,
        Method::OneLayer => map_requests(batch, |r| onelayer_target(frozen, r, &cfg.solve))?,
        Method::Blue => map_requests(batch, |r| blue_targets(frozen, r, &cfg.solve))?,
    };
    let m_final: Vec<Vec<f64>> = plans
        .iter()
        .map(|p| p.target_at(last).expect("plan covers the last layer").to_vec())
        .collect();

    let mut current = traces(model, batch)?;
    let r0: Vec<Vec<f64>> = current
        .iter()
        .zip(&m_final)
        .map(|(t, m)| math::sub(m, t.h_final()))
        .collect();
    let scales: Vec<f64> = current.iter().map(|t| math::norm(t.h_final())).collect();
    let mut residuals = ResidualTrace::new(&r0, &scales);

    let spread = match cfg.method {
        Method::MemitDividing => Some(SpreadMode::Dividing),
        Method::MemitNoDividing => Some(SpreadMode::NoDividing),
        _ => None,
    };
    let mut used_targets: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(layers.len()); batch.len()];
    let mut deltas = Vec::with_capacity(layers.len());
    for (step, &layer) in layers.iter().enumerate() {
        let remaining = layers.len() - step;
        let mut m_cols = Vec::with_capacity(batch.len());
        for (i, t) in current.iter().enumerate() {
            let m_l = match spread {
                Some(mode) => spread_target(t, &m_final[i], layer, remaining, mode)?,
                None => plans[i].target_at(layer).expect("plan covers edited layer").to_vec(),
            };
            m_cols.push(m_l);
        }
        let k_i = keys_from(&current, layer, d_mlp);
        let w = model.w_down(layer).clone();
        let wk = w.matmul(&k_i)?;
        let m_i = Tensor::from_fn(d_model, batch.len(), |r, c| {
            let h = current[c].hidden_at(layer).expect("decisive layer")[r];
            wk.get(r, c) + (m_cols[c][r] - h)
        });
        let k_j = preservation_keys(model, &chosen, layer)?;
        let mats = EditMatrices { k_i, m_i, k_j };
        let (delta, ridge) = solve_delta(&w, &mats, cfg.lambda, cfg.ridge_eps)?;
        let delta = EditDelta::new(layer, delta, ridge);
        apply_edit(model, &delta)?;
        deltas.push(delta);
        for (i, m) in m_cols.into_iter().enumerate() {
            used_targets[i].push(m);
        }
        current = traces(model, batch)?;
        let remaining_resid: Vec<Vec<f64>> = current
            .iter()
            .zip(&m_final)
            .map(|(t, m)| math::sub(m, t.h_final()))
            .collect();
        residuals.push(layer, &remaining_resid);
    }
    for (plan, used) in plans.iter_mut().zip(used_targets) {
        plan.layers = layers.clone();
        plan.targets = used;
    }
    let solver_iters = plans.iter().map(|p| p.iters).sum();
    Ok(EditRunRecord {
        method: cfg.method,
        layers,
        deltas,
        residuals,
        plans,
        pre_checksum,
        post_checksum: model.checksum(),
        solver_iters,
    })
}
