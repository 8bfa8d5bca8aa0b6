//! A tiny class-conditional epsilon-predictor over 2-D point sets whose
//! self-attention layers can be swapped per call between the operators in
//! [`crate::attention`].
//!
//! Each example is a set of `n_tokens` 2-D points, one point per token, so
//! the per-head attention maps are meaningful n x n objects at desk scale.

use std::collections::BTreeSet;

use crate::attention::{attention_map, row_entropy_mean, AttentionMode};
use crate::diffusion::NoiseSchedule;
use crate::error::{CoreError, Result};
use crate::tensor::{NodeId, Rng, Tape, Tensor};

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub n_tokens: usize,
    pub point_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 8,
            n_tokens: 16,
            point_dim: 2,
            d_model: 64,
            n_heads: 2,
            n_blocks: 4,
            ff_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn validate(&self) -> Result<()> {
        if self.n_blocks < 2 {
            return Err(CoreError::InvalidInput(
                "need at least 2 blocks so a middle-layer selection exists".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::InvalidInput(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Which blocks get their self-attention replaced during perturbed passes.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSelection {
    pub indices: BTreeSet<usize>,
}

impl LayerSelection {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Self {
        LayerSelection {
            indices: indices.into_iter().collect(),
        }
    }

    pub fn empty() -> Self {
        LayerSelection {
            indices: BTreeSet::new(),
        }
    }

    /// The middle half of the stack; {1, 2} for a 4-block model.
    pub fn middle(n_blocks: usize) -> Self {
        let lo = n_blocks / 4;
        let hi = (3 * n_blocks + 3) / 4;
        LayerSelection::new(lo..hi.min(n_blocks).max(lo + 1))
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, block: usize) -> bool {
        self.indices.contains(&block)
    }

    /// Bounds check against a model's block count.
    pub fn validate_for(&self, n_blocks: usize) -> Result<()> {
        if let Some(&max) = self.indices.iter().max() {
            if max >= n_blocks {
                return Err(CoreError::InvalidInput(format!(
                    "layer index {max} out of {n_blocks} blocks"
                )));
            }
        }
        Ok(())
    }

    fn validate(&self, n_blocks: usize, mode: &AttentionMode) -> Result<()> {
        if !mode.is_softmax() && self.is_empty() {
            return Err(CoreError::Contract(
                "perturbing attention mode requires a non-empty layer selection".into(),
            ));
        }
        self.validate_for(n_blocks)
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

/// All learnable tensors, with stable names for checkpointing.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub time_w: Tensor,
    pub time_b: Tensor,
    /// num_classes + 1 rows; the last row is the learned null token.
    pub class_table: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl DenoiserParams {
    /// Scaled-Gaussian initialization (variance 1/fan_in); the output head is
    /// zero-initialized so the untrained model predicts eps_hat ~ 0.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let linear = |fan_in: usize, fan_out: usize, rng: &mut Rng| {
            rng.gaussian(vec![fan_in, fan_out])
                .scale(1.0 / (fan_in as f64).sqrt())
        };
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                ln1_g: Tensor::matrix(1, d, vec![1.0; d]).unwrap(),
                ln1_b: Tensor::zeros(vec![1, d]),
                wq: linear(d, d, rng),
                bq: Tensor::zeros(vec![1, d]),
                wk: linear(d, d, rng),
                bk: Tensor::zeros(vec![1, d]),
                wv: linear(d, d, rng),
                bv: Tensor::zeros(vec![1, d]),
                wo: linear(d, d, rng),
                bo: Tensor::zeros(vec![1, d]),
                ln2_g: Tensor::matrix(1, d, vec![1.0; d]).unwrap(),
                ln2_b: Tensor::zeros(vec![1, d]),
                w_ff1: linear(d, config.ff_dim, rng),
                b_ff1: Tensor::zeros(vec![1, config.ff_dim]),
                w_ff2: linear(config.ff_dim, d, rng),
                b_ff2: Tensor::zeros(vec![1, d]),
            })
            .collect();
        Ok(DenoiserParams {
            input_w: linear(config.point_dim, d, rng),
            input_b: Tensor::zeros(vec![1, d]),
            time_w: linear(d, d, rng),
            time_b: Tensor::zeros(vec![1, d]),
            // unit-scale rows: the class signal competes with the input
            // embedding of +-4-range points and must survive the first
            // layer norm untrained
            class_table: rng.gaussian(vec![config.num_classes + 1, d]),
            blocks,
            final_ln_g: Tensor::matrix(1, d, vec![1.0; d]).unwrap(),
            final_ln_b: Tensor::zeros(vec![1, d]),
            head_w: Tensor::zeros(vec![d, config.point_dim]),
            head_b: Tensor::zeros(vec![1, config.point_dim]),
            config,
        })
    }

    /// Stable (name, tensor) listing; the checkpoint and optimizer orders.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("input.w".into(), &self.input_w),
            ("input.b".into(), &self.input_b),
            ("time.w".into(), &self.time_w),
            ("time.b".into(), &self.time_b),
            ("class.table".into(), &self.class_table),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &b.ln1_g),
                ("ln1.b", &b.ln1_b),
                ("attn.wq", &b.wq),
                ("attn.bq", &b.bq),
                ("attn.wk", &b.wk),
                ("attn.bk", &b.bk),
                ("attn.wv", &b.wv),
                ("attn.bv", &b.bv),
                ("attn.wo", &b.wo),
                ("attn.bo", &b.bo),
                ("ln2.g", &b.ln2_g),
                ("ln2.b", &b.ln2_b),
                ("ff.w1", &b.w_ff1),
                ("ff.b1", &b.b_ff1),
                ("ff.w2", &b.w_ff2),
                ("ff.b2", &b.b_ff2),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("final_ln.g".into(), &self.final_ln_g));
        out.push(("final_ln.b".into(), &self.final_ln_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("input.w".into(), &mut self.input_w),
            ("input.b".into(), &mut self.input_b),
            ("time.w".into(), &mut self.time_w),
            ("time.b".into(), &mut self.time_b),
            ("class.table".into(), &mut self.class_table),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &mut b.ln1_g),
                ("ln1.b", &mut b.ln1_b),
                ("attn.wq", &mut b.wq),
                ("attn.bq", &mut b.bq),
                ("attn.wk", &mut b.wk),
                ("attn.bk", &mut b.bk),
                ("attn.wv", &mut b.wv),
                ("attn.bv", &mut b.bv),
                ("attn.wo", &mut b.wo),
                ("attn.bo", &mut b.bo),
                ("ln2.g", &mut b.ln2_g),
                ("ln2.b", &mut b.ln2_b),
                ("ff.w1", &mut b.w_ff1),
                ("ff.b1", &mut b.b_ff1),
                ("ff.w2", &mut b.w_ff2),
                ("ff.b2", &mut b.b_ff2),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("final_ln.g".into(), &mut self.final_ln_g));
        out.push(("final_ln.b".into(), &mut self.final_ln_b));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }
}

/// Diagnostics from one perturbed attention site.
#[derive(Debug, Clone, Copy)]
pub struct AttnDiag {
    pub block: usize,
    pub head: usize,
    /// Mean entropy of the rows of the row-stochastic attention map.
    pub row_entropy: f64,
    pub iterations: Option<usize>,
    pub residual: Option<f64>,
    pub converged: bool,
}

/// Sinusoidal timestep embedding of width `d`.
fn time_embedding(t: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; d];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        data[2 * i] = (t as f64 * freq).sin();
        data[2 * i + 1] = (t as f64 * freq).cos();
    }
    Tensor::matrix(1, d, data).expect("time embedding shape")
}

struct BlockNodes {
    ln1_g: NodeId,
    ln1_b: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    w_ff1: NodeId,
    b_ff1: NodeId,
    w_ff2: NodeId,
    b_ff2: NodeId,
}

pub(crate) struct ParamNodes {
    input_w: NodeId,
    input_b: NodeId,
    time_w: NodeId,
    time_b: NodeId,
    class_table: NodeId,
    blocks: Vec<BlockNodes>,
    final_ln_g: NodeId,
    final_ln_b: NodeId,
    head_w: NodeId,
    head_b: NodeId,
}

impl ParamNodes {
    pub(crate) fn register(tape: &mut Tape, params: &DenoiserParams) -> ParamNodes {
        ParamNodes {
            input_w: tape.input(params.input_w.clone()),
            input_b: tape.input(params.input_b.clone()),
            time_w: tape.input(params.time_w.clone()),
            time_b: tape.input(params.time_b.clone()),
            class_table: tape.input(params.class_table.clone()),
            blocks: params
                .blocks
                .iter()
                .map(|b| BlockNodes {
                    ln1_g: tape.input(b.ln1_g.clone()),
                    ln1_b: tape.input(b.ln1_b.clone()),
                    wq: tape.input(b.wq.clone()),
                    bq: tape.input(b.bq.clone()),
                    wk: tape.input(b.wk.clone()),
                    bk: tape.input(b.bk.clone()),
                    wv: tape.input(b.wv.clone()),
                    bv: tape.input(b.bv.clone()),
                    wo: tape.input(b.wo.clone()),
                    bo: tape.input(b.bo.clone()),
                    ln2_g: tape.input(b.ln2_g.clone()),
                    ln2_b: tape.input(b.ln2_b.clone()),
                    w_ff1: tape.input(b.w_ff1.clone()),
                    b_ff1: tape.input(b.b_ff1.clone()),
                    w_ff2: tape.input(b.w_ff2.clone()),
                    b_ff2: tape.input(b.b_ff2.clone()),
                })
                .collect(),
            final_ln_g: tape.input(params.final_ln_g.clone()),
            final_ln_b: tape.input(params.final_ln_b.clone()),
            head_w: tape.input(params.head_w.clone()),
            head_b: tape.input(params.head_b.clone()),
        }
    }

    /// Tape ids in the same order as [`DenoiserParams::named`].
    pub(crate) fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![
            self.input_w,
            self.input_b,
            self.time_w,
            self.time_b,
            self.class_table,
        ];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                b.ln2_b, b.w_ff1, b.b_ff1, b.w_ff2, b.b_ff2,
            ]);
        }
        out.extend([self.final_ln_g, self.final_ln_b, self.head_w, self.head_b]);
        out
    }
}

fn layer_norm(
    tape: &mut Tape,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let normed = tape.layer_norm_rows(x);
    let scaled = tape.mul_row(normed, gain)?;
    tape.add_row(scaled, bias)
}

/// Class id or the learned null token.
pub type ClassOrNull = Option<usize>;

pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    config: &ModelConfig,
    x_t: NodeId,
    t: usize,
    c: ClassOrNull,
    mode: &AttentionMode,
    layers: &LayerSelection,
    diags: &mut Vec<AttnDiag>,
) -> Result<NodeId> {
    let d = config.d_model;
    let n_heads = config.n_heads;
    let d_head = config.d_head();
    let scale = 1.0 / (d_head as f64).sqrt();

    let class_row = match c {
        Some(id) if id < config.num_classes => id,
        Some(id) => {
            return Err(CoreError::InvalidInput(format!(
                "class id {id} out of {} classes",
                config.num_classes
            )))
        }
        None => config.num_classes,
    };

    let emb = tape.matmul(x_t, nodes.input_w)?;
    let emb = tape.add_row(emb, nodes.input_b)?;
    let t_emb = tape.constant(time_embedding(t, d));
    let t_row = tape.matmul(t_emb, nodes.time_w)?;
    let t_row = tape.add_row(t_row, nodes.time_b)?;
    let c_row = tape.gather_row(nodes.class_table, class_row)?;
    let mut x = tape.add_row(emb, t_row)?;
    x = tape.add_row(x, c_row)?;

    for (bi, block) in nodes.blocks.iter().enumerate() {
        let h = layer_norm(tape, x, block.ln1_g, block.ln1_b)?;
        let q = tape.matmul(h, block.wq)?;
        let q = tape.add_row(q, block.bq)?;
        let k = tape.matmul(h, block.wk)?;
        let k = tape.add_row(k, block.bk)?;
        let v = tape.matmul(h, block.wv)?;
        let v = tape.add_row(v, block.bv)?;

        let perturbed = layers.contains(bi) && !mode.is_softmax();
        let mut head_outputs: Option<NodeId> = None;
        for hi in 0..n_heads {
            let qh = tape.slice_cols(q, hi * d_head, d_head)?;
            let kh = tape.slice_cols(k, hi * d_head, d_head)?;
            let vh = tape.slice_cols(v, hi * d_head, d_head)?;
            let out_h = if perturbed {
                // map built from detached Q/K values, injected as a constant
                let qv = tape.value(qh).clone();
                let kv = tape.value(kh).clone();
                let (map, sink) = attention_map(&qv, &kv, d_head, mode)?;
                diags.push(AttnDiag {
                    block: bi,
                    head: hi,
                    row_entropy: sink
                        .map(|s| s.row_entropy)
                        .unwrap_or_else(|| row_entropy_mean(&map)),
                    iterations: sink.map(|s| s.iterations),
                    residual: sink.map(|s| s.residual),
                    converged: sink.map(|s| s.converged).unwrap_or(true),
                });
                let map_node = tape.constant(map);
                tape.matmul(map_node, vh)?
            } else {
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, scale);
                let a = tape.softmax_rows(s);
                tape.matmul(a, vh)?
            };
            head_outputs = Some(match head_outputs {
                None => out_h,
                Some(prev) => tape.concat_cols(prev, out_h)?,
            });
        }
        let concat = head_outputs.expect("at least one head");
        let proj = tape.matmul(concat, block.wo)?;
        let proj = tape.add_row(proj, block.bo)?;
        x = tape.add(x, proj)?;

        let h2 = layer_norm(tape, x, block.ln2_g, block.ln2_b)?;
        let f1 = tape.matmul(h2, block.w_ff1)?;
        let f1 = tape.add_row(f1, block.b_ff1)?;
        let f1 = tape.gelu(f1);
        let f2 = tape.matmul(f1, block.w_ff2)?;
        let f2 = tape.add_row(f2, block.b_ff2)?;
        x = tape.add(x, f2)?;
    }

    let h = layer_norm(tape, x, nodes.final_ln_g, nodes.final_ln_b)?;
    let out = tape.matmul(h, nodes.head_w)?;
    tape.add_row(out, nodes.head_b)
}

/// Predict eps_hat for one token set. Blocks listed in `layers` use `mode`'s
/// attention operator; all others use softmax attention. `mode = Softmax`
/// with any layer set is exactly the unperturbed network.
pub fn predict_eps(
    params: &DenoiserParams,
    x_t: &Tensor,
    t: usize,
    c: ClassOrNull,
    mode: &AttentionMode,
    layers: &LayerSelection,
) -> Result<(Tensor, Vec<AttnDiag>)> {
    layers.validate(params.config.n_blocks, mode)?;
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let x_node = tape.constant(x_t.clone());
    let mut diags = Vec::new();
    let out = forward_on_tape(
        &mut tape,
        &nodes,
        &params.config,
        x_node,
        t,
        c,
        mode,
        layers,
        &mut diags,
    )?;
    Ok((tape.value(out).clone(), diags))
}

/// Noise-prediction MSE at one (x_t, t, c, eps) tuple together with its
/// gradient for every parameter, in [`DenoiserParams::named`] order. This is
/// the single-example training objective exposed for gradient checking.
pub fn loss_gradients(
    params: &DenoiserParams,
    x_t: &Tensor,
    t: usize,
    c: ClassOrNull,
    eps: &Tensor,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let x_node = tape.constant(x_t.clone());
    let mut diags = Vec::new();
    let eps_hat = forward_on_tape(
        &mut tape,
        &nodes,
        &params.config,
        x_node,
        t,
        c,
        &AttentionMode::Softmax,
        &LayerSelection::empty(),
        &mut diags,
    )?;
    let eps_node = tape.constant(eps.clone());
    let diff = tape.sub(eps_hat, eps_node)?;
    let loss = tape.square_mean(diff);
    let loss_value = tape.value(loss).data[0];
    let grads = tape.backward(loss)?;
    let named = params
        .named()
        .into_iter()
        .zip(nodes.ids())
        .map(|((name, _), id)| Ok((name, grads.get(id)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, named))
}

/// Training knobs for [`train`].
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Classifier-free dropout: probability of replacing c with the null token.
    pub p_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            lr: 1e-3,
            batch_size: 32,
            p_drop: 0.1,
        }
    }
}

/// One labeled training example: a token set and an optional class.
pub type Example = (Tensor, ClassOrNull);

/// Momentum-free gradient descent on the noise-prediction MSE. Returns the
/// per-step loss curve.
pub fn train(
    params: &mut DenoiserParams,
    dataset: &[Example],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(CoreError::InvalidInput("empty training dataset".into()));
    }
    for (_, c) in dataset {
        if let Some(id) = c {
            if *id >= params.config.num_classes {
                return Err(CoreError::InvalidInput(format!(
                    "label {id} out of {} classes",
                    params.config.num_classes
                )));
            }
        }
    }

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size).max(1);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut curve = Vec::with_capacity(total_steps);
    let softmax = AttentionMode::Softmax;
    let no_layers = LayerSelection::empty();

    for step in 0..total_steps {
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, params);
        let mut total_loss: Option<NodeId> = None;
        let mut diags = Vec::new();

        for _ in 0..cfg.batch_size {
            let (x0, label) = &dataset[rng.below(dataset.len())];
            let t = 1 + rng.below(sched.t_max);
            let eps = rng.gaussian(x0.shape.clone());
            let c = if label.is_some() && rng.uniform() < cfg.p_drop {
                None
            } else {
                *label
            };
            let x_t = crate::diffusion::q_sample(x0, t, &eps, sched)?;
            let x_node = tape.constant(x_t);
            let eps_hat = forward_on_tape(
                &mut tape,
                &nodes,
                &params.config,
                x_node,
                t,
                c,
                &softmax,
                &no_layers,
                &mut diags,
            )?;
            let eps_node = tape.constant(eps);
            let diff = tape.sub(eps_hat, eps_node)?;
            let loss = tape.square_mean(diff);
            total_loss = Some(match total_loss {
                None => loss,
                Some(prev) => tape.add(prev, loss)?,
            });
        }

        let sum = total_loss.expect("batch_size >= 1");
        let mean = tape.scale(sum, 1.0 / cfg.batch_size as f64);
        let loss_value = tape.value(mean).data[0];
        if !loss_value.is_finite() {
            return Err(CoreError::Diverged {
                step,
                message: format!("loss {loss_value}"),
            });
        }
        curve.push(loss_value);

        if cfg.lr != 0.0 {
            let grads = tape.backward(mean)?;
            let ids = nodes.ids();
            for ((_, tensor), id) in params.named_mut().into_iter().zip(ids) {
                let g = grads.get(id)?;
                for (p, gv) in tensor.data.iter_mut().zip(&g.data) {
                    *p -= cfg.lr * gv;
                }
            }
        }
    }
    Ok(curve)
}
