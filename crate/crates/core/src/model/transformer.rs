use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::autodiff::{Mask, Tape, Var};
use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor;

/// One pre-norm block: multi-head causal attention, then a GELU MLP whose
/// down-projection `w_down` (`d_model x d_mlp`) is the edited matrix.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_attn: Arc<Tensor>,
    pub wq: Vec<Arc<Tensor>>,
    pub wk: Vec<Arc<Tensor>>,
    pub wv: Vec<Arc<Tensor>>,
    pub wo: Vec<Arc<Tensor>>,
    pub ln_mlp: Arc<Tensor>,
    pub w_up: Arc<Tensor>,
    pub w_down: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    pub tok_emb: Arc<Tensor>,
    pub pos_emb: Arc<Tensor>,
    pub blocks: Vec<Block>,
    pub ln_final: Arc<Tensor>,
    pub unembed: Arc<Tensor>,
}

/// Hidden states at one token position for every decisive layer.
///
/// `keys[i]` feeds the down-projection of `layers[i]`, `mlp_out[i]` is that
/// projection's output, and `hidden[i]` is the residual stream leaving the
/// block, which is the state targets and replacements operate on.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub position: usize,
    pub layers: Vec<usize>,
    pub keys: Vec<Vec<f64>>,
    pub mlp_out: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub final_logits: Vec<f64>,
}

impl HiddenTrace {
    /// Stream leaving the last decisive layer.
    pub fn h_final(&self) -> &[f64] {
        self.hidden.last().expect("trace has at least one layer")
    }

    pub fn hidden_at(&self, layer: usize) -> Option<&[f64]> {
        let i = self.layers.iter().position(|&l| l == layer)?;
        Some(&self.hidden[i])
    }

    pub fn key_at(&self, layer: usize) -> Option<&[f64]> {
        let i = self.layers.iter().position(|&l| l == layer)?;
        Some(&self.keys[i])
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `positions x vocab_size`.
    pub logits: Tensor,
    pub trace: Option<HiddenTrace>,
}

/// Overwrite the stream row `position` leaving block `layer` with `vector`.
#[derive(Debug, Clone, Copy)]
pub struct Injection {
    pub layer: usize,
    pub position: usize,
    pub vector: Var,
}

/// Tape handles for a recorded full-sequence forward pass.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    pub logits: Var,
    /// Per block: down-projection input, output and the stream leaving it.
    pub keys: Vec<Var>,
    pub mlp_out: Vec<Var>,
    pub stream: Vec<Var>,
}

/// Tape handles for a pass that starts from an injected last-row state.
#[derive(Debug, Clone)]
pub struct SuffixOutput {
    /// `1 x vocab_size` logits of the injected row.
    pub logits: Var,
    /// Stream leaving each block after the injection layer (`None` before).
    pub stream: Vec<Option<Var>>,
}

/// Attention keys and values of a token prefix, per block and head.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    len: usize,
    kv: Vec<Vec<(Arc<Tensor>, Arc<Tensor>)>>,
}

impl PrefixCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub(crate) struct BoundBlock {
    ln_attn: Var,
    wq: Vec<Var>,
    wk: Vec<Var>,
    wv: Vec<Var>,
    wo: Vec<Var>,
    ln_mlp: Var,
    w_up: Var,
    w_down: Var,
}

/// Model weights registered as leaves of one tape.
pub(crate) struct Bound {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BoundBlock>,
    ln_final: Var,
    unembed: Var,
}

struct BlockVars {
    kv: Vec<(Var, Var)>,
    key: Var,
    mlp_out: Var,
    out: Var,
}

struct Concat {
    prefix: Var,
    suffix: Var,
}

impl TransformerModel {
    /// Seeded random initialization.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let dh = config.d_head();
        let mut normal = |rows: usize, cols: usize, std: f64| -> Arc<Tensor> {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Arc::new(Tensor::matrix(rows, cols, data).expect("sized"))
        };
        let ones = |n: usize| Arc::new(Tensor::filled(&[n], 1.0));
        let in_std = 1.0 / math::sqrt(d as f64);
        let resid_std = 1.0 / math::sqrt((2 * config.n_layers) as f64);
        let tok_emb = normal(config.vocab_size, d, 1.0);
        let pos_emb = normal(config.max_seq_len, d, 0.5);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let h = config.n_heads;
            let wq = (0..h).map(|_| normal(dh, d, in_std)).collect();
            let wk = (0..h).map(|_| normal(dh, d, in_std)).collect();
            let wv = (0..h).map(|_| normal(dh, d, in_std)).collect();
            let wo = (0..h)
                .map(|_| normal(d, dh, resid_std / math::sqrt(d as f64)))
                .collect();
            blocks.push(Block {
                ln_attn: ones(d),
                wq,
                wk,
                wv,
                wo,
                ln_mlp: ones(d),
                w_up: normal(config.d_mlp, d, in_std),
                w_down: normal(d, config.d_mlp, resid_std / math::sqrt(config.d_mlp as f64)),
            });
        }
        let unembed = normal(config.vocab_size, d, in_std);
        Ok(TransformerModel {
            tok_emb,
            pos_emb,
            blocks,
            ln_final: ones(d),
            unembed,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Down-projection of block `layer` (`d_model x d_mlp`).
    pub fn w_down(&self, layer: usize) -> &Tensor {
        &self.blocks[layer].w_down
    }

    pub fn w_down_mut(&mut self, layer: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.blocks[layer].w_down)
    }

    /// Every weight tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &*self.tok_emb),
            ("pos_emb".into(), &*self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln_attn"), &*b.ln_attn));
            for (kind, ws) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                for (h, w) in ws.iter().enumerate() {
                    out.push((format!("blocks.{i}.{kind}.{h}"), &**w));
                }
            }
            out.push((format!("blocks.{i}.ln_mlp"), &*b.ln_mlp));
            out.push((format!("blocks.{i}.w_up"), &*b.w_up));
            out.push((format!("blocks.{i}.w_down"), &*b.w_down));
        }
        out.push(("ln_final".into(), &*self.ln_final));
        out.push(("unembed".into(), &*self.unembed));
        out
    }

    /// Mutable handles in the same order as [`named_tensors`](Self::named_tensors).
    pub fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.push(&mut b.ln_attn);
            for ws in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                out.extend(ws.iter_mut());
            }
            out.push(&mut b.ln_mlp);
            out.push(&mut b.w_up);
            out.push(&mut b.w_down);
        }
        out.push(&mut self.ln_final);
        out.push(&mut self.unembed);
        out
    }

    /// Rebuilds a model from tensors listed in [`named_tensors`](Self::named_tensors) order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = TransformerModel::init(ModelConfig {
            seed: config.seed,
            ..config.clone()
        })?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            bail!(
                Input,
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            );
        }
        for ((slot, (name, shape)), (got_name, t)) in
            model.params_mut().into_iter().zip(&expected).zip(tensors)
        {
            if *name != got_name || shape.as_slice() != t.shape() {
                bail!(
                    Input,
                    "tensor {} {:?} does not match expected {} {:?}",
                    got_name,
                    t.shape(),
                    name,
                    shape
                );
            }
            *slot = Arc::new(t);
        }
        Ok(model)
    }

    /// Rounds every weight to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            let t = Arc::make_mut(p);
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// SHA-256 over tensor names, shapes and exact 64-bit values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            bail!(Input, "empty token sequence");
        }
        if tokens.len() > self.config.max_seq_len {
            bail!(
                Input,
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            );
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            bail!(Input, "token id {} out of range (vocab {})", t, self.config.vocab_size);
        }
        Ok(())
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut leaf = |t: &Arc<Tensor>| {
            if trainable {
                tape.input_shared(t.clone())
            } else {
                tape.constant_shared(t.clone())
            }
        };
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                ln_attn: leaf(&b.ln_attn),
                wq: b.wq.iter().map(&mut leaf).collect(),
                wk: b.wk.iter().map(&mut leaf).collect(),
                wv: b.wv.iter().map(&mut leaf).collect(),
                wo: b.wo.iter().map(&mut leaf).collect(),
                ln_mlp: leaf(&b.ln_mlp),
                w_up: leaf(&b.w_up),
                w_down: leaf(&b.w_down),
            })
            .collect();
        let ln_final = leaf(&self.ln_final);
        let unembed = leaf(&self.unembed);
        Bound {
            tok_emb,
            pos_emb,
            blocks,
            ln_final,
            unembed,
        }
    }

    /// Leaf handles of a trainable binding, in `params_mut` order.
    pub(crate) fn bound_params(bound: &Bound) -> Vec<Var> {
        let mut out = vec![bound.tok_emb, bound.pos_emb];
        for b in &bound.blocks {
            out.push(b.ln_attn);
            for ws in [&b.wq, &b.wk, &b.wv, &b.wo] {
                out.extend(ws.iter().copied());
            }
            out.push(b.ln_mlp);
            out.push(b.w_up);
            out.push(b.w_down);
        }
        out.push(bound.ln_final);
        out.push(bound.unembed);
        out
    }

    fn run_block(
        &self,
        tape: &mut Tape,
        b: &BoundBlock,
        x: Var,
        mask: Mask,
        groups: usize,
        prefix: Option<(&[(Arc<Tensor>, Arc<Tensor>)], &Concat)>,
    ) -> Result<BlockVars> {
        let scale = 1.0 / math::sqrt(self.config.d_head() as f64);
        let xn = tape.rms_norm(x, b.ln_attn)?;
        let mut attn: Option<Var> = None;
        let mut kv = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let q = tape.matmul_t(xn, b.wq[h])?;
            let k = tape.matmul_t(xn, b.wk[h])?;
            let v = tape.matmul_t(xn, b.wv[h])?;
            kv.push((k, v));
            let (k_all, v_all) = match prefix {
                Some((cache, cat)) => {
                    let kp = tape.constant_shared(cache[h].0.clone());
                    let vp = tape.constant_shared(cache[h].1.clone());
                    (stack(tape, cat, kp, k)?, stack(tape, cat, vp, v)?)
                }
                None => (k, v),
            };
            let s = tape.matmul_t_grouped(q, k_all, groups)?;
            let s = tape.scale(s, scale)?;
            let p = tape.softmax_masked(s, mask)?;
            let ctx = tape.matmul_grouped(p, v_all, groups)?;
            let o = tape.matmul_t(ctx, b.wo[h])?;
            attn = Some(match attn {
                Some(a) => tape.add(a, o)?,
                None => o,
            });
        }
        let x1 = tape.add(x, attn.expect("at least one head"))?;
        let xn2 = tape.rms_norm(x1, b.ln_mlp)?;
        let u = tape.matmul_t(xn2, b.w_up)?;
        let key = tape.gelu(u)?;
        let mlp_out = tape.matmul_t(key, b.w_down)?;
        let out = tape.add(x1, mlp_out)?;
        Ok(BlockVars {
            kv,
            key,
            mlp_out,
            out,
        })
    }

    fn embed(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize], positions: &[usize]) -> Result<Var> {
        let te = tape.embedding(bound.tok_emb, tokens)?;
        let pe = tape.embedding(bound.pos_emb, positions)?;
        tape.add(te, pe)
    }

    fn head(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xn = tape.rms_norm(x, bound.ln_final)?;
        tape.matmul_t(xn, bound.unembed)
    }

    pub(crate) fn record_bound(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        injection: Option<Injection>,
    ) -> Result<GraphOutput> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.config.d_model;
        let mut replace = None;
        if let Some(inj) = injection {
            self.config.decisive_slot(inj.layer)?;
            if inj.position >= n {
                bail!(Input, "position {} outside sequence of length {}", inj.position, n);
            }
            if tape.value(inj.vector).shape() != [1, d] {
                bail!(
                    Input,
                    "replacement vector must be 1 x {}, got {:?}",
                    d,
                    tape.value(inj.vector).shape()
                );
            }
            let mut keep = Tensor::filled(&[n, d], 1.0);
            keep.row_mut(inj.position).fill(0.0);
            let mut pick = Tensor::zeros(&[n, 1]);
            pick.set(inj.position, 0, 1.0);
            let keep = tape.constant(keep);
            let pick = tape.constant(pick);
            replace = Some((inj.layer, keep, pick, inj.vector));
        }
        let positions: Vec<usize> = (0..n).collect();
        let mut x = self.embed(tape, bound, tokens, &positions)?;
        let mask = Mask::Causal { offset: 0 };
        let mut out = GraphOutput {
            logits: x,
            keys: Vec::with_capacity(self.blocks.len()),
            mlp_out: Vec::with_capacity(self.blocks.len()),
            stream: Vec::with_capacity(self.blocks.len()),
        };
        for (l, b) in bound.blocks.iter().enumerate() {
            let bv = self.run_block(tape, b, x, mask, 1, None)?;
            x = bv.out;
            if let Some((layer, keep, pick, v)) = replace {
                if layer == l {
                    let kept = tape.mul(x, keep)?;
                    let placed = tape.matmul(pick, v)?;
                    x = tape.add(kept, placed)?;
                }
            }
            out.keys.push(bv.key);
            out.mlp_out.push(bv.mlp_out);
            out.stream.push(x);
        }
        out.logits = self.head(tape, bound, x)?;
        Ok(out)
    }

    /// Records a full forward pass with constant weights.
    pub fn record(&self, tape: &mut Tape, tokens: &[usize], injection: Option<Injection>) -> Result<GraphOutput> {
        let bound = self.bind(tape, false);
        self.record_bound(tape, &bound, tokens, injection)
    }

    /// Records blocks `layer + 1..` for a single row at position
    /// `cache.len()` whose stream leaving block `layer` is `vector`
    /// (`1 x d_model`). Earlier positions come from `cache`.
    pub fn record_suffix(&self, tape: &mut Tape, cache: &PrefixCache, layer: usize, vector: Var) -> Result<SuffixOutput> {
        if layer >= self.blocks.len() {
            bail!(Input, "layer {} out of range", layer);
        }
        if tape.value(vector).shape() != [1, self.config.d_model] {
            bail!(Input, "suffix state must be 1 x d_model, got {:?}", tape.value(vector).shape());
        }
        if cache.len + 1 > self.config.max_seq_len {
            bail!(Input, "prefix of {} leaves no room for the suffix row", cache.len);
        }
        let bound = self.bind(tape, false);
        let p = cache.len;
        let cat = if p > 0 {
            let mut top = Tensor::zeros(&[p + 1, p]);
            for i in 0..p {
                top.set(i, i, 1.0);
            }
            let mut bottom = Tensor::zeros(&[p + 1, 1]);
            bottom.set(p, 0, 1.0);
            Some(Concat {
                prefix: tape.constant(top),
                suffix: tape.constant(bottom),
            })
        } else {
            None
        };
        let mask = Mask::Causal { offset: p };
        let mut stream = vec![None; self.blocks.len()];
        let mut x = vector;
        for l in layer + 1..self.blocks.len() {
            let prefix = cat.as_ref().map(|c| (cache.kv[l].as_slice(), c));
            let bv = self.run_block(tape, &bound.blocks[l], x, mask, 1, prefix)?;
            x = bv.out;
            stream[l] = Some(x);
        }
        let logits = self.head(tape, &bound, x)?;
        Ok(SuffixOutput { logits, stream })
    }

    /// Attention keys and values of `tokens` at every block.
    pub fn prefix_cache(&self, tokens: &[usize]) -> Result<PrefixCache> {
        if tokens.is_empty() {
            return Ok(PrefixCache {
                len: 0,
                kv: vec![Vec::new(); self.blocks.len()],
            });
        }
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = self.embed(&mut tape, &bound, tokens, &positions)?;
        let mut kv = Vec::with_capacity(self.blocks.len());
        for b in &bound.blocks {
            let bv = self.run_block(&mut tape, b, x, Mask::Causal { offset: 0 }, 1, None)?;
            kv.push(
                bv.kv
                    .iter()
                    .map(|(k, v)| (tape.shared_value(*k), tape.shared_value(*v)))
                    .collect(),
            );
            x = bv.out;
        }
        Ok(PrefixCache {
            len: tokens.len(),
            kv,
        })
    }

    /// Stacks equal-length sequences and runs every block with
    /// per-sequence attention. Rows of sequence `i` are `i*n..(i+1)*n`.
    fn record_stacked(&self, tape: &mut Tape, bound: &Bound, seqs: &[&[usize]]) -> Result<GraphOutput> {
        let n = seqs[0].len();
        let b = seqs.len();
        let mut ids = Vec::with_capacity(n * b);
        let mut positions = Vec::with_capacity(n * b);
        for s in seqs {
            if s.len() != n {
                bail!(Structural, "batched sequences must share a length");
            }
            self.check_tokens(s)?;
            ids.extend_from_slice(s);
            positions.extend(0..n);
        }
        let mut x = self.embed(tape, bound, &ids, &positions)?;
        let mask = Mask::BlockCausal { size: n };
        let mut out = GraphOutput {
            logits: x,
            keys: Vec::with_capacity(self.blocks.len()),
            mlp_out: Vec::with_capacity(self.blocks.len()),
            stream: Vec::with_capacity(self.blocks.len()),
        };
        for blk in &bound.blocks {
            let bv = self.run_block(tape, blk, x, mask, b, None)?;
            x = bv.out;
            out.keys.push(bv.key);
            out.mlp_out.push(bv.mlp_out);
            out.stream.push(x);
        }
        out.logits = x;
        Ok(out)
    }

    /// Logits of the last row of each equal-length sequence in `seqs`.
    pub(crate) fn record_batch_last(&self, tape: &mut Tape, bound: &Bound, seqs: &[&[usize]]) -> Result<Var> {
        let n = seqs[0].len();
        let b = seqs.len();
        let g = self.record_stacked(tape, bound, seqs)?;
        let mut sel = Tensor::zeros(&[b, n * b]);
        for i in 0..b {
            sel.set(i, i * n + n - 1, 1.0);
        }
        let sel = tape.constant(sel);
        let last = tape.matmul(sel, g.logits)?;
        self.head(tape, bound, last)
    }

    /// Traces of many `(prompt, position)` pairs, batched by prompt length.
    /// Each trace equals the one from [`forward`](Self::forward).
    pub fn trace_many(&self, items: &[(&[usize], usize)]) -> Result<Vec<HiddenTrace>> {
        let mut groups: alloc::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, (p, pos)) in items.iter().enumerate() {
            if *pos >= p.len() {
                bail!(Input, "capture position {} outside prompt of length {}", pos, p.len());
            }
            groups.entry(p.len()).or_default().push(i);
        }
        let mut out: Vec<Option<HiddenTrace>> = vec![None; items.len()];
        let layers = self.config.decisive_layers.clone();
        for (n, idx) in groups {
            for chunk in idx.chunks(64) {
                let seqs: Vec<&[usize]> = chunk.iter().map(|&i| items[i].0).collect();
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape, false);
                let g = self.record_stacked(&mut tape, &bound, &seqs)?;
                let logits = self.head(&mut tape, &bound, g.logits)?;
                for (j, &i) in chunk.iter().enumerate() {
                    let r = j * n + items[i].1;
                    let row = |v: Var| tape.value(v).row(r).to_vec();
                    out[i] = Some(HiddenTrace {
                        position: items[i].1,
                        layers: layers.clone(),
                        keys: layers.iter().map(|&l| row(g.keys[l])).collect(),
                        mlp_out: layers.iter().map(|&l| row(g.mlp_out[l])).collect(),
                        hidden: layers.iter().map(|&l| row(g.stream[l])).collect(),
                        final_logits: row(logits),
                    });
                }
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every item traced")).collect())
    }

    /// Plain forward pass. With `capture = Some(pos)` the hidden states at
    /// `pos` are traced for every decisive layer.
    pub fn forward(&self, tokens: &[usize], capture: Option<usize>) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let g = self.record(&mut tape, tokens, None)?;
        self.collect(&tape, &g, capture)
    }

    /// Forward pass with the stream row `position` leaving block `layer`
    /// overwritten by `vector`. The trace is taken at `position`.
    pub fn forward_with_replacement(
        &self,
        tokens: &[usize],
        layer: usize,
        position: usize,
        vector: &[f64],
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row_vector(vector.to_vec()));
        let g = self.record(
            &mut tape,
            tokens,
            Some(Injection {
                layer,
                position,
                vector: v,
            }),
        )?;
        self.collect(&tape, &g, Some(position))
    }

    fn collect(&self, tape: &Tape, g: &GraphOutput, capture: Option<usize>) -> Result<ForwardOutput> {
        let logits = tape.value(g.logits).clone();
        let trace = match capture {
            None => None,
            Some(pos) => {
                if pos >= logits.rows() {
                    bail!(Input, "capture position {} outside sequence", pos);
                }
                let layers = self.config.decisive_layers.clone();
                let row = |v: Var| tape.value(v).row(pos).to_vec();
                Some(HiddenTrace {
                    position: pos,
                    keys: layers.iter().map(|&l| row(g.keys[l])).collect(),
                    mlp_out: layers.iter().map(|&l| row(g.mlp_out[l])).collect(),
                    hidden: layers.iter().map(|&l| row(g.stream[l])).collect(),
                    final_logits: logits.row(pos).to_vec(),
                    layers,
                })
            }
        };
        Ok(ForwardOutput { logits, trace })
    }

    /// Greedy next-token prediction after `tokens` (lowest id on ties).
    pub fn predict_next(&self, tokens: &[usize]) -> Result<usize> {
        let out = self.forward(tokens, None)?;
        Ok(math::argmax(out.logits.row(out.logits.rows() - 1)))
    }

    /// Greedy continuation of `len` tokens.
    pub fn greedy(&self, tokens: &[usize], len: usize) -> Result<Vec<usize>> {
        let mut seq = tokens.to_vec();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let t = self.predict_next(&seq)?;
            out.push(t);
            seq.push(t);
        }
        Ok(out)
    }
}

fn stack(tape: &mut Tape, cat: &Concat, prefix: Var, suffix: Var) -> Result<Var> {
    let a = tape.matmul(cat.prefix, prefix)?;
    let b = tape.matmul(cat.suffix, suffix)?;
    tape.add(a, b)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(DIGITS[(b >> 4) as usize] as char);
        s.push(DIGITS[(b & 15) as usize] as char);
    }
    s
}
