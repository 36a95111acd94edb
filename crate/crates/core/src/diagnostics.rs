//! How a perturbation of the decisive hidden state at one layer shows up at
//! the last decisive layer: exact shifts, finite-difference Jacobians and
//! the symmetric/antisymmetric split of those Jacobians.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{fd_step, jvp_fd, Tape, EPS0_JACOBIAN};
use crate::editor::{apply_edit, EditRunRecord};
use crate::error::{bail, Result};
use crate::math;
use crate::model::TransformerModel;
use crate::targets::{EditRequest, Method};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationProbe {
    pub layer: usize,
    pub delta: Vec<f64>,
    /// Exact change of the last decisive stream.
    pub shift: Vec<f64>,
    /// First-order estimate `J δ`.
    pub jvp: Vec<f64>,
    pub cosine: f64,
    pub gain: f64,
}

/// Last-decisive-layer stream when the stream at `(layer, position)` is set
/// to `x`.
fn final_state(model: &TransformerModel, tokens: &[usize], position: usize, layer: usize, x: &[f64]) -> Result<Vec<f64>> {
    let out = model.forward_with_replacement(tokens, layer, position, x)?;
    Ok(out.trace.expect("captured").h_final().to_vec())
}

/// Replaces `h_l` by `h_l + δ` at `position` and measures the change at the
/// last decisive layer.
pub fn passive_shift(model: &TransformerModel, tokens: &[usize], position: usize, layer: usize, delta: &[f64]) -> Result<PerturbationProbe> {
    let c = model.config();
    c.decisive_slot(layer)?;
    if delta.len() != c.d_model {
        bail!(Structural, "perturbation has {} entries, expected {}", delta.len(), c.d_model);
    }
    if delta.iter().all(|v| *v == 0.0) {
        bail!(Domain, "perturbation is zero");
    }
    let dn = math::norm(delta);
    if layer == c.last_decisive() {
        return Ok(PerturbationProbe {
            layer,
            delta: delta.to_vec(),
            shift: delta.to_vec(),
            jvp: delta.to_vec(),
            cosine: math::cosine(delta, delta),
            gain: 1.0,
        });
    }
    let base = model.forward(tokens, Some(position))?.trace.expect("captured");
    let h_l = base.hidden_at(layer).expect("decisive").to_vec();
    let moved = final_state(model, tokens, position, layer, &math::add(&h_l, delta))?;
    let shift = math::sub(&moved, base.h_final());
    let x = Tensor::vector(h_l);
    let eps = fd_step(EPS0_JACOBIAN, &x);
    let jvp = jvp_fd(
        |t: &Tensor| Ok(Tensor::vector(final_state(model, tokens, position, layer, t.data())?)),
        &x,
        &Tensor::vector(delta.to_vec()),
        eps,
    )?
    .into_data();
    Ok(PerturbationProbe {
        layer,
        delta: delta.to_vec(),
        cosine: math::cosine(delta, &shift),
        gain: math::norm(&shift) / dn,
        shift,
        jvp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTable {
    pub layers: Vec<usize>,
    pub mean_cosine: Vec<f64>,
    /// `cosines[step][request]`.
    pub cosines: Vec<Vec<f64>>,
    pub n: usize,
}

/// Cosine between each spread-assigned `δ_{m_l}` and the shift it induces
/// at the last decisive layer, measured on the model as it was when layer
/// `l` was about to be edited. `pre` is the model before the run.
pub fn cosine_table(pre: &TransformerModel, batch: &[EditRequest], record: &EditRunRecord) -> Result<CosineTable> {
    if batch.is_empty() {
        bail!(Input, "cosine table needs at least one request");
    }
    if !matches!(record.method, Method::MemitDividing | Method::MemitNoDividing) {
        bail!(Input, "cosine table expects a spreading run, got {}", record.method);
    }
    if record.plans.len() != batch.len() {
        bail!(Input, "record has {} plans for {} requests", record.plans.len(), batch.len());
    }
    let mut model = pre.clone();
    let mut cosines = Vec::with_capacity(record.layers.len());
    for (step, &layer) in record.layers.iter().enumerate() {
        let mut row = Vec::with_capacity(batch.len());
        for (req, plan) in batch.iter().zip(&record.plans) {
            let trace = model.forward(&req.prompt, Some(req.decisive_index))?.trace.expect("captured");
            let h = trace.hidden_at(layer).expect("decisive");
            let delta = math::sub(&plan.targets[step], h);
            if delta.iter().all(|v| *v == 0.0) {
                row.push(0.0);
                continue;
            }
            row.push(passive_shift(&model, &req.prompt, req.decisive_index, layer, &delta)?.cosine);
        }
        cosines.push(row);
        apply_edit(&mut model, &record.deltas[step])?;
    }
    let mean_cosine = cosines
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    Ok(CosineTable {
        layers: record.layers.clone(),
        mean_cosine,
        cosines,
        n: batch.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianBlock {
    pub source: usize,
    pub sink: usize,
    pub j: Tensor,
    pub s: Tensor,
    pub a: Tensor,
    pub min_eig: f64,
}

impl JacobianBlock {
    /// Splits `j` into symmetric and antisymmetric parts.
    pub fn from_matrix(source: usize, sink: usize, j: Tensor) -> Result<Self> {
        if j.rank() != 2 || j.rows() != j.cols() {
            bail!(Structural, "Jacobian must be square, got {:?}", j.shape());
        }
        let n = j.rows();
        let s = Tensor::from_fn(n, n, |r, c| 0.5 * (j.get(r, c) + j.get(c, r)));
        let a = Tensor::from_fn(n, n, |r, c| 0.5 * (j.get(r, c) - j.get(c, r)));
        let min_eig = min_eigenvalue(&s)?;
        Ok(JacobianBlock {
            source,
            sink,
            j,
            s,
            a,
            min_eig,
        })
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(s: &Tensor) -> Result<f64> {
    let n = s.rows();
    let m = DMatrix::from_row_slice(n, n, s.data());
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 10_000)
        .ok_or_else(|| crate::Error::Numeric("symmetric eigensolver did not converge".into()))?;
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Jacobian of the last-decisive stream with respect to the stream at
/// `source`, at `position`, assembled column by column from central
/// differences. `sink` must be the last decisive layer.
pub fn assemble_jacobian(model: &TransformerModel, tokens: &[usize], position: usize, source: usize, sink: usize) -> Result<JacobianBlock> {
    let c = model.config();
    c.decisive_slot(source)?;
    if sink != c.last_decisive() {
        bail!(Input, "sink {} must be the last decisive layer {}", sink, c.last_decisive());
    }
    if source > sink {
        bail!(Input, "source {} is deeper than sink {}", source, sink);
    }
    let d = c.d_model;
    if source == sink {
        return JacobianBlock::from_matrix(source, sink, Tensor::identity(d));
    }
    let base = model.forward(tokens, Some(position))?.trace.expect("captured");
    let x = Tensor::vector(base.hidden_at(source).expect("decisive").to_vec());
    let eps = fd_step(EPS0_JACOBIAN, &x);
    let mut j = Tensor::zeros(&[d, d]);
    for col in 0..d {
        let mut e = Tensor::zeros(&[d]);
        e.data_mut()[col] = 1.0;
        let jc = jvp_fd(
            |t: &Tensor| Ok(Tensor::vector(final_state(model, tokens, position, source, t.data())?)),
            &x,
            &e,
            eps,
        )?;
        for r in 0..d {
            j.set(r, col, jc.data()[r]);
        }
    }
    JacobianBlock::from_matrix(source, sink, j)
}

/// Rows `rows` of the same Jacobian by reverse mode, for cross-checking.
pub fn jacobian_rows_reverse(
    model: &TransformerModel,
    tokens: &[usize],
    position: usize,
    source: usize,
    rows: &[usize],
) -> Result<Tensor> {
    let c = model.config();
    c.decisive_slot(source)?;
    let d = c.d_model;
    let base = model.forward(tokens, Some(position))?.trace.expect("captured");
    let h = base.hidden_at(source).expect("decisive").to_vec();
    let mut tape = Tape::new();
    let x = tape.input(Tensor::row_vector(h));
    let g = model.record(
        &mut tape,
        tokens,
        Some(crate::model::Injection {
            layer: source,
            position,
            vector: x,
        }),
    )?;
    let out = g.stream[c.last_decisive()];
    let mut result = Tensor::zeros(&[rows.len(), d]);
    for (i, &r) in rows.iter().enumerate() {
        let mut ct = Tensor::zeros(tape.value(out).shape());
        ct.set(position, r, 1.0);
        let grads = tape.backward(out, Some(&ct))?;
        let gx = grads.get_or_zeros(x, tape.value(x));
        result.row_mut(i).copy_from_slice(gx.data());
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadForms {
    pub vjv: f64,
    pub vsv: f64,
    pub vav: f64,
}

fn quad(m: &Tensor, v: &[f64]) -> Result<f64> {
    Ok(math::dot(v, &m.matvec(v)?))
}

/// `vᵀJv`, `vᵀSv` and `vᵀAv` for `J = S + A`.
pub fn quadratic_form_check(j: &Tensor, v: &[f64]) -> Result<QuadForms> {
    let block = JacobianBlock::from_matrix(0, 0, j.clone())?;
    quadratic_forms(&block, v)
}

/// Same as [`quadratic_form_check`] on an already split block.
pub fn quadratic_forms(block: &JacobianBlock, v: &[f64]) -> Result<QuadForms> {
    Ok(QuadForms {
        vjv: quad(&block.j, v)?,
        vsv: quad(&block.s, v)?,
        vav: quad(&block.a, v)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenProbeResult {
    pub direction: Vec<f64>,
    /// `cos(Jδ, δ)`.
    pub alignment: f64,
    /// `δᵀJδ / δᵀδ`.
    pub gain: f64,
}

pub fn eigen_probe(block: &JacobianBlock, delta: &[f64]) -> Result<EigenProbeResult> {
    if delta.iter().all(|v| *v == 0.0) {
        bail!(Domain, "probe direction is zero");
    }
    let jd = block.j.matvec(delta)?;
    Ok(EigenProbeResult {
        direction: delta.to_vec(),
        alignment: math::cosine(&jd, delta),
        gain: math::dot(delta, &jd) / math::dot(delta, delta),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefinitenessReport {
    pub source: usize,
    pub sink: usize,
    pub samples: usize,
    /// Share of directions with `vᵀSv > 0`.
    pub fraction_positive: f64,
    /// Share of directions with `cos(Jv, v) > 0`.
    pub fraction_aligned: f64,
    pub min_eig: f64,
    /// Directions with `vᵀSv > 0` but `cos(Jv, v) <= 0`. Always zero unless
    /// something is broken.
    pub violations: usize,
}

/// Uniform random unit directions in `dim` dimensions.
pub fn sample_directions(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = math::norm(&v);
            if n > 0.0 {
                break v.iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

pub fn definiteness_report(block: &JacobianBlock, directions: &[Vec<f64>]) -> Result<DefinitenessReport> {
    if directions.is_empty() {
        bail!(Input, "need at least one sample direction");
    }
    let mut positive = 0;
    let mut aligned = 0;
    let mut violations = 0;
    for v in directions {
        let vsv = quad(&block.s, v)?;
        let cos = math::cosine(&block.j.matvec(v)?, v);
        if vsv > 0.0 {
            positive += 1;
            if cos <= 0.0 {
                violations += 1;
            }
        }
        if cos > 0.0 {
            aligned += 1;
        }
    }
    let n = directions.len() as f64;
    Ok(DefinitenessReport {
        source: block.source,
        sink: block.sink,
        samples: directions.len(),
        fraction_positive: positive as f64 / n,
        fraction_aligned: aligned as f64 / n,
        min_eig: block.min_eig,
        violations,
    })
}
