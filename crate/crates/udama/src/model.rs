//! The adaptation network: a shared feature encoder (stacked bidirectional
//! GRU over the time series plus an MLP over static metadata), a linear
//! regression head, a coarse binary domain discriminator and a fine-grained
//! Gaussian discriminator, coupled through a gradient-reversal point.
//!
//! Forward passes are built on a [`Tape`] so the adversarial min-max falls
//! out of reverse mode: the reversal is the identity on values and scales
//! gradients flowing back into the encoder by `-lambda`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use crate::datasynth::SensorWindow;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, TensorId};

/// Hidden width of each discriminator's two tanh layers.
const DISC_HIDDEN: usize = 32;

/// Architecture of the shared encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub gru_layers: usize,
    pub hidden_size: usize,
    pub mlp_sizes: Vec<usize>,
    pub input_features: usize,
    pub metadata_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            gru_layers: 2,
            hidden_size: 32,
            mlp_sizes: vec![16],
            input_features: 26,
            metadata_dim: crate::datasynth::N_METADATA,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gru_layers < 1 || self.hidden_size < 1 || self.input_features < 1 {
            return Err(Error::config(format!(
                "encoder spec needs gru_layers, hidden_size, input_features >= 1 (got {self:?})"
            )));
        }
        if self.metadata_dim > 0 && (self.mlp_sizes.is_empty() || self.mlp_sizes.contains(&0)) {
            return Err(Error::config("mlp_sizes must be non-empty positive when metadata_dim > 0"));
        }
        Ok(())
    }

    /// Bidirectional concat plus the metadata branch.
    pub fn embedding_dim(&self) -> usize {
        2 * self.hidden_size
            + if self.metadata_dim > 0 { *self.mlp_sizes.last().unwrap() } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GruDirection {
    Forward,
    Backward,
}

impl GruDirection {
    fn tag(self) -> &'static str {
        match self {
            GruDirection::Forward => "f",
            GruDirection::Backward => "b",
        }
    }
}

/// All trainable weights plus the frozen feature-normalization statistics,
/// addressed by name. Tensor order is fixed at construction, which makes
/// checkpoints and gradient bookkeeping deterministic.
#[derive(Debug, Clone)]
pub struct ModelParams {
    spec: EncoderSpec,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    trainable_ix: Vec<usize>,
}

fn init_seed(seed: u64) -> u64 {
    // keep the init stream distinct from data/shuffle streams
    seed ^ 0x1217_9E37_79B9_7F4A
}

impl ModelParams {
    /// Fresh parameters with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init
    /// per affine, seeded. Normalization statistics start at identity.
    pub fn init(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed(seed));
        let mut p = ModelParams {
            spec: spec.clone(),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            trainable_ix: Vec::new(),
        };

        let f = spec.input_features;
        let m = spec.metadata_dim;
        p.push("norm.x_mean", Tensor::zeros(vec![f]));
        p.push("norm.x_std", Tensor::new(vec![f], vec![1.0; f])?);
        if m > 0 {
            p.push("norm.meta_mean", Tensor::zeros(vec![m]));
            p.push("norm.meta_std", Tensor::new(vec![m], vec![1.0; m])?);
        }
        p.push("norm.y_mean", Tensor::zeros(vec![1]));
        p.push("norm.y_std", Tensor::new(vec![1], vec![1.0])?);

        let h = spec.hidden_size;
        for li in 0..spec.gru_layers {
            let input = if li == 0 { f } else { 2 * h };
            for dir in [GruDirection::Forward, GruDirection::Backward] {
                for gate in ["z", "r", "h"] {
                    p.push_affine(&gru_name(li, dir, &format!("w_{gate}")), input, h, &mut rng);
                    p.push_affine(&gru_name(li, dir, &format!("u_{gate}")), h, h, &mut rng);
                    p.push_bias(&gru_name(li, dir, &format!("b_{gate}")), h, &mut rng);
                }
            }
        }

        if m > 0 {
            let mut input = m;
            for (i, &out) in spec.mlp_sizes.iter().enumerate() {
                p.push_affine(&format!("meta.{i}.w"), input, out, &mut rng);
                p.push_bias(&format!("meta.{i}.b"), out, &mut rng);
                input = out;
            }
        }

        let e = spec.embedding_dim();
        p.push_affine("gy.w", e, 1, &mut rng);
        p.push_bias("gy.b", 1, &mut rng);

        for (prefix, out_dim) in [("dc", 2), ("df.trunk", 0)] {
            let mut input = e;
            for i in 0..2 {
                p.push_affine(&format!("{prefix}.{i}.w"), input, DISC_HIDDEN, &mut rng);
                p.push_bias(&format!("{prefix}.{i}.b"), DISC_HIDDEN, &mut rng);
                input = DISC_HIDDEN;
            }
            if out_dim > 0 {
                p.push_affine(&format!("{prefix}.out.w"), input, out_dim, &mut rng);
                p.push_bias(&format!("{prefix}.out.b"), out_dim, &mut rng);
            }
        }
        for head in ["mu", "var"] {
            p.push_affine(&format!("df.{head}.w"), DISC_HIDDEN, 1, &mut rng);
            p.push_bias(&format!("df.{head}.b"), 1, &mut rng);
        }
        Ok(p)
    }

    fn push(&mut self, name: &str, t: Tensor) {
        let ix = self.tensors.len();
        self.index.insert(name.to_string(), ix);
        if !name.starts_with("norm.") {
            self.trainable_ix.push(ix);
        }
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    fn push_affine(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (rows as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.push(name, Tensor::new(vec![rows, cols], values).expect("static shape"));
    }

    fn push_bias(&mut self, name: &str, cols: usize, rng: &mut ChaCha8Rng) {
        // biases share the incoming affine's fan-in bound
        let parent_rows = match self.tensors.last() {
            Some(t) => t.shape()[0],
            None => cols,
        };
        let bound = 1.0 / (parent_rows as f64).sqrt();
        let values = (0..cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.push(name, Tensor::new(vec![cols], values).expect("static shape"));
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&ix| &self.tensors[ix])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&ix| &mut self.tensors[ix])
    }

    pub fn tensor_names(&self) -> &[String] {
        &self.names
    }

    pub fn n_trainable_values(&self) -> usize {
        self.trainable_ix.iter().map(|&ix| self.tensors[ix].numel()).sum()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Tensor> {
        self.trainable_ix.iter().map(|&ix| &self.tensors[ix])
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut refs: Vec<&mut Tensor> = Vec::with_capacity(self.trainable_ix.len());
        let mut rest: &mut [Tensor] = &mut self.tensors;
        let mut offset = 0usize;
        for &ix in &self.trainable_ix {
            let (head, tail) = rest.split_at_mut(ix - offset + 1);
            refs.push(&mut head[ix - offset]);
            rest = tail;
            offset = ix + 1;
        }
        refs
    }

    /// Overwrites the frozen feature- and label-normalization statistics.
    pub fn set_normalization(
        &mut self,
        x_mean: Vec<f64>,
        x_std: Vec<f64>,
        meta_mean: Vec<f64>,
        meta_std: Vec<f64>,
        y_stats: (f64, f64),
    ) -> Result<()> {
        let f = self.spec.input_features;
        let m = self.spec.metadata_dim;
        if x_mean.len() != f || x_std.len() != f || meta_mean.len() != m || meta_std.len() != m {
            return Err(Error::contract("normalization statistics do not match the encoder spec"));
        }
        if !(y_stats.1 > 0.0) {
            return Err(Error::contract("label std must be > 0"));
        }
        *self.tensor_mut("norm.x_mean").unwrap() = Tensor::new(vec![f], x_mean)?;
        *self.tensor_mut("norm.x_std").unwrap() = Tensor::new(vec![f], x_std)?;
        if m > 0 {
            *self.tensor_mut("norm.meta_mean").unwrap() = Tensor::new(vec![m], meta_mean)?;
            *self.tensor_mut("norm.meta_std").unwrap() = Tensor::new(vec![m], meta_std)?;
        }
        *self.tensor_mut("norm.y_mean").unwrap() = Tensor::new(vec![1], vec![y_stats.0])?;
        *self.tensor_mut("norm.y_std").unwrap() = Tensor::new(vec![1], vec![y_stats.1])?;
        Ok(())
    }

    /// Inserts every trainable tensor as a tape leaf, in fixed order.
    pub fn insert_leaves(&self, tape: &mut Tape) -> ParamLeaves {
        ParamLeaves {
            ids: self.trainable_ix.iter().map(|&ix| tape.leaf(&self.tensors[ix])).collect(),
        }
    }

    fn leaf(&self, leaves: &ParamLeaves, name: &str) -> TensorId {
        let ix = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let pos = self
            .trainable_ix
            .binary_search(&ix)
            .unwrap_or_else(|_| panic!("parameter {name} is not trainable"));
        leaves.ids[pos]
    }

    /// Adds the tape's gradients into each trainable tensor's grad buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, leaves: &ParamLeaves) {
        for (pos, &ix) in self.trainable_ix.clone().iter().enumerate() {
            if let Some(g) = tape.grad(leaves.ids[pos]) {
                let g = g.to_vec();
                self.tensors[ix].accumulate_grad(&g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for &ix in &self.trainable_ix {
            self.tensors[ix].zero_grad();
        }
    }

    fn standardize_x(&self, x: &[f64]) -> Vec<f64> {
        let f = self.spec.input_features;
        let mean = self.tensor("norm.x_mean").unwrap().values();
        let std = self.tensor("norm.x_std").unwrap().values();
        x.iter().enumerate().map(|(i, &v)| (v - mean[i % f]) / std[i % f]).collect()
    }

    fn standardize_meta(&self, meta: &[f64]) -> Vec<f64> {
        let mean = self.tensor("norm.meta_mean").unwrap().values();
        let std = self.tensor("norm.meta_std").unwrap().values();
        meta.iter().enumerate().map(|(i, &v)| (v - mean[i]) / std[i]).collect()
    }
}

/// Tape leaf ids for the trainable tensors, in [`ModelParams`] order.
pub struct ParamLeaves {
    ids: Vec<TensorId>,
}

impl ParamLeaves {
    /// Wraps externally created leaf ids (same order as `trainable()`).
    pub fn from_ids(ids: Vec<TensorId>) -> Self {
        ParamLeaves { ids }
    }
}

fn gru_name(layer: usize, dir: GruDirection, which: &str) -> String {
    format!("gru.l{layer}.{}.{which}", dir.tag())
}

// ── Graph builders ───────────────────────────────────────────────────

struct GruGateIds {
    w: TensorId,
    u: TensorId,
    b: TensorId,
}

struct GruCellIds {
    z: GruGateIds,
    r: GruGateIds,
    h: GruGateIds,
}

fn gru_cell_ids(
    params: &ModelParams,
    leaves: &ParamLeaves,
    layer: usize,
    dir: GruDirection,
) -> GruCellIds {
    let gate = |g: &str| GruGateIds {
        w: params.leaf(leaves, &gru_name(layer, dir, &format!("w_{g}"))),
        u: params.leaf(leaves, &gru_name(layer, dir, &format!("u_{g}"))),
        b: params.leaf(leaves, &gru_name(layer, dir, &format!("b_{g}"))),
    };
    GruCellIds { z: gate("z"), r: gate("r"), h: gate("h") }
}

/// One GRU step: z = σ(Wz x + Uz h + bz), r = σ(Wr x + Ur h + br),
/// h̃ = tanh(Wh x + Uh (r⊙h) + bh), h' = (1-z)⊙h + z⊙h̃.
fn gru_cell_graph(
    tape: &mut Tape,
    ids: &GruCellIds,
    x: TensorId,
    h: TensorId,
    one: TensorId,
) -> Result<TensorId> {
    let gate_pre = |tape: &mut Tape, g: &GruGateIds, state: TensorId| -> Result<TensorId> {
        let xa = tape.affine(x, g.w, g.b)?;
        let ha = tape.matmul(state, g.u)?;
        tape.add(xa, ha)
    };
    let z_pre = gate_pre(tape, &ids.z, h)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate_pre(tape, &ids.r, h)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let c_pre = gate_pre(tape, &ids.h, rh)?;
    let cand = tape.tanh(c_pre);
    let keep = tape.sub(one, z)?;
    let kept = tape.mul(keep, h)?;
    let new = tape.mul(z, cand)?;
    tape.add(kept, new)
}

fn run_gru_direction(
    tape: &mut Tape,
    ids: &GruCellIds,
    inputs: &[TensorId],
    batch: usize,
    hidden: usize,
    dir: GruDirection,
    one: TensorId,
) -> Result<(Vec<TensorId>, TensorId)> {
    let mut h = tape.constant(vec![batch, hidden], vec![0.0; batch * hidden])?;
    let mut outputs = vec![h; inputs.len()];
    let order: Vec<usize> = match dir {
        GruDirection::Forward => (0..inputs.len()).collect(),
        GruDirection::Backward => (0..inputs.len()).rev().collect(),
    };
    for t in order {
        h = gru_cell_graph(tape, ids, inputs[t], h, one)?;
        outputs[t] = h;
    }
    Ok((outputs, h))
}

/// Builds the encoder over a batch of raw windows, applying the stored
/// feature normalization, and returns the `[batch, embedding_dim]` node.
pub fn encode_graph(
    params: &ModelParams,
    tape: &mut Tape,
    leaves: &ParamLeaves,
    xs: &[&[f64]],
    metas: &[&[f64]],
    timesteps: usize,
) -> Result<TensorId> {
    let spec = params.spec();
    let f = spec.input_features;
    let batch = xs.len();
    if batch == 0 {
        return Err(Error::contract("encode on an empty batch"));
    }
    for (i, x) in xs.iter().enumerate() {
        if x.len() != timesteps * f {
            return Err(Error::ShapeMismatch {
                op: "encode: window",
                lhs: vec![x.len() / f.max(1), f],
                rhs: vec![timesteps, f],
            });
        }
        if spec.metadata_dim > 0 && metas.get(i).map_or(true, |m| m.len() != spec.metadata_dim) {
            return Err(Error::contract(format!(
                "metadata of sample {i} does not match metadata_dim {}",
                spec.metadata_dim
            )));
        }
    }

    let standardized: Vec<Vec<f64>> = xs.iter().map(|x| params.standardize_x(x)).collect();
    let mut step_inputs: Vec<TensorId> = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let mut block = Vec::with_capacity(batch * f);
        for s in &standardized {
            block.extend_from_slice(&s[t * f..(t + 1) * f]);
        }
        step_inputs.push(tape.constant(vec![batch, f], block)?);
    }

    let one = tape.scalar(1.0);
    let h = spec.hidden_size;
    let mut last = (step_inputs[0], step_inputs[0]);
    let mut inputs = step_inputs;
    for li in 0..spec.gru_layers {
        let fwd_ids = gru_cell_ids(params, leaves, li, GruDirection::Forward);
        let bwd_ids = gru_cell_ids(params, leaves, li, GruDirection::Backward);
        let (fwd_out, fwd_last) =
            run_gru_direction(tape, &fwd_ids, &inputs, batch, h, GruDirection::Forward, one)?;
        let (bwd_out, bwd_last) =
            run_gru_direction(tape, &bwd_ids, &inputs, batch, h, GruDirection::Backward, one)?;
        last = (fwd_last, bwd_last);
        if li + 1 < spec.gru_layers {
            inputs = fwd_out
                .iter()
                .zip(&bwd_out)
                .map(|(&ft, &bt)| tape.concat(ft, bt))
                .collect::<Result<Vec<_>>>()?;
        }
    }
    let mut emb = tape.concat(last.0, last.1)?;

    if spec.metadata_dim > 0 {
        let mut block = Vec::with_capacity(batch * spec.metadata_dim);
        for m in metas {
            block.extend_from_slice(&params.standardize_meta(m));
        }
        let mut hmeta = tape.constant(vec![batch, spec.metadata_dim], block)?;
        for i in 0..spec.mlp_sizes.len() {
            let w = params.leaf(leaves, &format!("meta.{i}.w"));
            let b = params.leaf(leaves, &format!("meta.{i}.b"));
            let a = tape.affine(hmeta, w, b)?;
            hmeta = tape.tanh(a);
        }
        emb = tape.concat(emb, hmeta)?;
    }
    Ok(emb)
}

/// Linear regression head over the embedding: `[batch, 1]`, in label
/// units. The head itself operates at the standardized label scale; the
/// frozen label statistics rescale its output, which keeps the trainable
/// weights O(1) regardless of the label range.
pub fn predictor_graph(
    params: &ModelParams,
    tape: &mut Tape,
    leaves: &ParamLeaves,
    embedding: TensorId,
) -> Result<TensorId> {
    let w = params.leaf(leaves, "gy.w");
    let b = params.leaf(leaves, "gy.b");
    let z = tape.affine(embedding, w, b)?;
    let y_mean = params.tensor("norm.y_mean").unwrap().values()[0];
    let y_std = params.tensor("norm.y_std").unwrap().values()[0];
    let scaled = tape.mul_scalar(z, y_std);
    Ok(tape.add_scalar(scaled, y_mean))
}

fn disc_trunk(
    params: &ModelParams,
    tape: &mut Tape,
    leaves: &ParamLeaves,
    prefix: &str,
    mut h: TensorId,
) -> Result<TensorId> {
    for i in 0..2 {
        let w = params.leaf(leaves, &format!("{prefix}.{i}.w"));
        let b = params.leaf(leaves, &format!("{prefix}.{i}.b"));
        let a = tape.affine(h, w, b)?;
        h = tape.tanh(a);
    }
    Ok(h)
}

/// Coarse discriminator logits, `[batch, 2]`; class 0 is source, 1 target.
pub fn coarse_graph(
    params: &ModelParams,
    tape: &mut Tape,
    leaves: &ParamLeaves,
    embedding: TensorId,
) -> Result<TensorId> {
    let h = disc_trunk(params, tape, leaves, "dc", embedding)?;
    let w = params.leaf(leaves, "dc.out.w");
    let b = params.leaf(leaves, "dc.out.b");
    tape.affine(h, w, b)
}

/// Fine discriminator heads: (μ, σ²), each `[batch, 1]`, with
/// σ² = softplus(raw) + 1e-6 > 0. Softplus composes as -ln(σ(-raw)).
pub fn fine_graph(
    params: &ModelParams,
    tape: &mut Tape,
    leaves: &ParamLeaves,
    embedding: TensorId,
) -> Result<(TensorId, TensorId)> {
    let h = disc_trunk(params, tape, leaves, "df.trunk", embedding)?;
    let mu_w = params.leaf(leaves, "df.mu.w");
    let mu_b = params.leaf(leaves, "df.mu.b");
    let mu = tape.affine(h, mu_w, mu_b)?;

    let var_w = params.leaf(leaves, "df.var.w");
    let var_b = params.leaf(leaves, "df.var.b");
    let raw = tape.affine(h, var_w, var_b)?;
    let neg_raw = tape.neg(raw);
    let sig = tape.sigmoid(neg_raw);
    let lg = tape.log(sig);
    let softplus = tape.neg(lg);
    let sigma2 = tape.add_scalar(softplus, crate::losses::SIGMA2_FLOOR);
    Ok((mu, sigma2))
}

// ── Single-sample operations ─────────────────────────────────────────

/// Posterior of two-class logits.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// One GRU cell step using stored weights; exposed for inspection and
/// shares the graph path used in training.
pub fn gru_cell_forward(
    params: &ModelParams,
    layer: usize,
    dir: GruDirection,
    x_t: &[f64],
    h_prev: &[f64],
) -> Result<Vec<f64>> {
    let spec = params.spec();
    if layer >= spec.gru_layers {
        return Err(Error::config(format!("layer {layer} out of range")));
    }
    let expected_in = if layer == 0 { spec.input_features } else { 2 * spec.hidden_size };
    if x_t.len() != expected_in || h_prev.len() != spec.hidden_size {
        return Err(Error::ShapeMismatch {
            op: "gru_cell_forward",
            lhs: vec![x_t.len(), h_prev.len()],
            rhs: vec![expected_in, spec.hidden_size],
        });
    }
    let mut tape = Tape::new();
    let leaves = params.insert_leaves(&mut tape);
    let ids = gru_cell_ids(params, &leaves, layer, dir);
    let x = tape.constant(vec![1, x_t.len()], x_t.to_vec())?;
    let h = tape.constant(vec![1, h_prev.len()], h_prev.to_vec())?;
    let one = tape.scalar(1.0);
    let out = gru_cell_graph(&mut tape, &ids, x, h, one)?;
    Ok(tape.values(out).to_vec())
}

fn single_embedding_graph(
    params: &ModelParams,
    tape: &mut Tape,
    window: &SensorWindow,
) -> Result<(ParamLeaves, TensorId)> {
    let leaves = params.insert_leaves(tape);
    let emb = encode_graph(
        params,
        tape,
        &leaves,
        &[window.x.as_slice()],
        &[window.metadata.as_slice()],
        window.t,
    )?;
    Ok((leaves, emb))
}

/// Embedding of one window under the stored parameters.
pub fn encode(params: &ModelParams, window: &SensorWindow) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (_, emb) = single_embedding_graph(params, &mut tape, window)?;
    Ok(tape.values(emb).to_vec())
}

fn head_on_embedding<T>(
    params: &ModelParams,
    embedding: &[f64],
    f: impl FnOnce(&ModelParams, &mut Tape, &ParamLeaves, TensorId) -> Result<T>,
) -> Result<T> {
    let e = params.spec().embedding_dim();
    if embedding.len() != e {
        return Err(Error::ShapeMismatch {
            op: "head: embedding",
            lhs: vec![embedding.len()],
            rhs: vec![e],
        });
    }
    let mut tape = Tape::new();
    let leaves = params.insert_leaves(&mut tape);
    let emb = tape.constant(vec![1, e], embedding.to_vec())?;
    f(params, &mut tape, &leaves, emb)
}

/// Regression prediction (ml/kg/min) from an embedding.
pub fn predict_vo2max(params: &ModelParams, embedding: &[f64]) -> Result<f64> {
    head_on_embedding(params, embedding, |p, tape, leaves, emb| {
        let y = predictor_graph(p, tape, leaves, emb)?;
        Ok(tape.values(y)[0])
    })
}

/// Coarse discriminator logits from an embedding.
pub fn discriminate_coarse(params: &ModelParams, embedding: &[f64]) -> Result<[f64; 2]> {
    head_on_embedding(params, embedding, |p, tape, leaves, emb| {
        let logits = coarse_graph(p, tape, leaves, emb)?;
        Ok([tape.values(logits)[0], tape.values(logits)[1]])
    })
}

/// Fine discriminator output (μ, σ²) from an embedding.
pub fn discriminate_fine(params: &ModelParams, embedding: &[f64]) -> Result<(f64, f64)> {
    head_on_embedding(params, embedding, |p, tape, leaves, emb| {
        let (mu, s2) = fine_graph(p, tape, leaves, emb)?;
        Ok((tape.values(mu)[0], tape.values(s2)[0]))
    })
}

/// Batched regression predictions for evaluation.
pub fn predict_batch(params: &ModelParams, windows: &[&SensorWindow]) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::contract("predict_batch on empty input"));
    }
    let t = windows[0].t;
    let mut tape = Tape::new();
    let leaves = params.insert_leaves(&mut tape);
    let xs: Vec<&[f64]> = windows.iter().map(|w| w.x.as_slice()).collect();
    let metas: Vec<&[f64]> = windows.iter().map(|w| w.metadata.as_slice()).collect();
    let emb = encode_graph(params, &mut tape, &leaves, &xs, &metas, t)?;
    let y = predictor_graph(params, &mut tape, &leaves, emb)?;
    Ok(tape.values(y).to_vec())
}

// ── Checkpoints ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    spec: EncoderSpec,
    tensors: Vec<TensorRecord>,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        spec: params.spec.clone(),
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(name, t)| TensorRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
    let mut params = ModelParams::init(&file.spec, 0)?;
    if file.tensors.len() != params.tensors.len() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!(
                "checkpoint has {} tensors, spec implies {}",
                file.tensors.len(),
                params.tensors.len()
            ),
        });
    }
    for record in file.tensors {
        let Some(&ix) = params.index.get(&record.name) else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("unexpected tensor {}", record.name),
            });
        };
        if params.tensors[ix].shape() != record.shape.as_slice() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    record.name,
                    record.shape,
                    params.tensors[ix].shape()
                ),
            });
        }
        params.tensors[ix] = Tensor::new(record.shape, record.values)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{Domain, N_FEATURES, N_METADATA};
    use crate::numerics::grad_check_multi;

    fn toy_spec() -> EncoderSpec {
        EncoderSpec {
            gru_layers: 1,
            hidden_size: 2,
            mlp_sizes: vec![2],
            input_features: 3,
            metadata_dim: 2,
        }
    }

    fn zeroed(spec: &EncoderSpec) -> ModelParams {
        let mut p = ModelParams::init(spec, 0).unwrap();
        for name in p.tensor_names().to_vec() {
            if !name.starts_with("norm.") {
                p.tensor_mut(&name).unwrap().values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        p
    }

    fn toy_window(spec: &EncoderSpec, values: &[f64]) -> SensorWindow {
        let t = values.len() / spec.input_features;
        SensorWindow {
            id: "w".into(),
            domain: Domain::Target,
            y: 35.0,
            y_c: 1,
            y_d: 0.0,
            metadata: vec![0.5; spec.metadata_dim],
            x: values.to_vec(),
            t,
            f: spec.input_features,
            mask_len: t,
        }
    }

    #[test]
    fn embedding_dim_matches_spec() {
        let spec = EncoderSpec::default();
        assert_eq!(spec.embedding_dim(), 2 * 32 + 16);
        let params = ModelParams::init(&spec, 1).unwrap();
        let w = SensorWindow {
            id: "w".into(),
            domain: Domain::Source,
            y: 40.0,
            y_c: 0,
            y_d: 0.0,
            metadata: vec![0.0; N_METADATA],
            x: vec![0.1; 4 * N_FEATURES],
            t: 4,
            f: N_FEATURES,
            mask_len: 4,
        };
        let emb = encode(&params, &w).unwrap();
        assert_eq!(emb.len(), spec.embedding_dim());
    }

    #[test]
    fn gru_cell_zero_weights_halves_state() {
        let spec = toy_spec();
        let params = zeroed(&spec);
        let h = vec![0.8, -0.4];
        let out =
            gru_cell_forward(&params, 0, GruDirection::Forward, &[0.0, 0.0, 0.0], &h).unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15);
        assert!((out[1] + 0.2).abs() < 1e-15);

        let out0 =
            gru_cell_forward(&params, 0, GruDirection::Forward, &[1.0, 2.0, 3.0], &[0.0, 0.0])
                .unwrap();
        assert_eq!(out0, vec![0.0, 0.0]);
    }

    #[test]
    fn gru_cell_saturated_update_gate_forgets_state() {
        let spec = EncoderSpec {
            gru_layers: 1,
            hidden_size: 1,
            mlp_sizes: vec![1],
            input_features: 1,
            metadata_dim: 0,
        };
        let mut params = zeroed(&spec);
        params.tensor_mut("gru.l0.f.b_z").unwrap().values_mut()[0] = 20.0;
        let out = gru_cell_forward(&params, 0, GruDirection::Forward, &[0.0], &[0.9]).unwrap();
        assert!(out[0].abs() < 1e-8, "h_next {} should be ~0", out[0]);
    }

    #[test]
    fn encode_is_deterministic_and_direction_sensitive() {
        let spec = toy_spec();
        let params = ModelParams::init(&spec, 3).unwrap();
        let seq = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let w = toy_window(&spec, &seq);
        let e1 = encode(&params, &w).unwrap();
        let e2 = encode(&params, &w).unwrap();
        assert_eq!(e1, e2);

        let mut rev = w.clone();
        rev.x = seq
            .chunks(spec.input_features)
            .rev()
            .flatten()
            .copied()
            .collect();
        let er = encode(&params, &rev).unwrap();
        assert!(
            e1.iter().zip(&er).any(|(a, b)| (a - b).abs() > 1e-12),
            "time reversal should change the embedding"
        );
        // the forward and backward halves swap roles on a reversed input
        let h = spec.hidden_size;
        assert!((e1[0] - er[h]).abs() < 1e-12 || (e1[0] - er[0]).abs() > 1e-12);
    }

    #[test]
    fn zero_encoder_gives_zero_embedding() {
        let spec = toy_spec();
        let params = zeroed(&spec);
        let w = toy_window(&spec, &[0.3, -0.5, 0.2, 0.9, 0.0, -0.1]);
        let emb = encode(&params, &w).unwrap();
        assert!(emb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictor_examples() {
        let spec = toy_spec();
        let mut params = zeroed(&spec);
        params.tensor_mut("gy.b").unwrap().values_mut()[0] = 33.0;
        let e = vec![0.7; spec.embedding_dim()];
        assert_eq!(predict_vo2max(&params, &e).unwrap(), 33.0);

        params.tensor_mut("gy.b").unwrap().values_mut()[0] = 0.0;
        params.tensor_mut("gy.w").unwrap().values_mut()[0] = 1.0;
        let mut e = vec![0.0; spec.embedding_dim()];
        e[0] = 2.75;
        assert_eq!(predict_vo2max(&params, &e).unwrap(), 2.75);

        let params = ModelParams::init(&spec, 9).unwrap();
        let e1 = vec![0.3; spec.embedding_dim()];
        let e2 = vec![-0.3; spec.embedding_dim()];
        assert_ne!(predict_vo2max(&params, &e1).unwrap(), predict_vo2max(&params, &e2).unwrap());
    }

    #[test]
    fn coarse_discriminator_examples() {
        let spec = toy_spec();
        let params = zeroed(&spec);
        let e = vec![0.4; spec.embedding_dim()];
        let logits = discriminate_coarse(&params, &e).unwrap();
        assert_eq!(logits, [0.0, 0.0]);
        let post = softmax2(logits);
        assert_eq!(post, [0.5, 0.5]);

        let mut params = zeroed(&spec);
        params.tensor_mut("dc.out.b").unwrap().values_mut().copy_from_slice(&[5.0, -5.0]);
        let post = softmax2(discriminate_coarse(&params, &e).unwrap());
        assert!((post[0] - 0.9999546021312976).abs() < 1e-12);
        assert!((post[0] + post[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fine_discriminator_variance_floor() {
        let spec = toy_spec();
        let params = zeroed(&spec);
        let e = vec![0.4; spec.embedding_dim()];
        let (mu, s2) = discriminate_fine(&params, &e).unwrap();
        assert_eq!(mu, 0.0);
        assert!((s2 - (std::f64::consts::LN_2 + 1e-6)).abs() < 1e-12);

        let mut params = zeroed(&spec);
        params.tensor_mut("df.var.b").unwrap().values_mut()[0] = -20.0;
        let (_, s2) = discriminate_fine(&params, &e).unwrap();
        assert!(s2 >= 1e-6 && s2 < 1.1e-6, "sigma2 {s2} should sit at the floor");

        // positive for extreme raw values in both directions
        let mut params = zeroed(&spec);
        params.tensor_mut("df.var.b").unwrap().values_mut()[0] = 200.0;
        let (_, s2) = discriminate_fine(&params, &e).unwrap();
        assert!(s2 > 0.0);
    }

    #[test]
    fn batch_order_does_not_change_per_sample_outputs() {
        let spec = toy_spec();
        let params = ModelParams::init(&spec, 5).unwrap();
        let w1 = toy_window(&spec, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let w2 = toy_window(&spec, &[-0.3, 0.9, 0.0, 0.2, -0.8, 0.1]);
        let w3 = toy_window(&spec, &[1.0, -1.0, 0.5, -0.5, 0.25, -0.25]);
        let abc = predict_batch(&params, &[&w1, &w2, &w3]).unwrap();
        let cab = predict_batch(&params, &[&w3, &w1, &w2]).unwrap();
        assert_eq!(abc[0], cab[1]);
        assert_eq!(abc[1], cab[2]);
        assert_eq!(abc[2], cab[0]);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // the combined loss as a plain function of the parameters; the
        // reversal's sign flip is checked separately below
        let spec = toy_spec();
        let params = ModelParams::init(&spec, 11).unwrap();
        let w1 = toy_window(&spec, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]);
        let w2 = toy_window(&spec, &[0.9, -0.2, 0.1, 0.3, 0.3, 0.0]);
        let xs = [w1.x.clone(), w2.x.clone()];
        let metas = [w1.metadata.clone(), w2.metadata.clone()];

        let inputs: Vec<Tensor> = params.trainable().cloned().collect();
        let err = grad_check_multi(
            |tape, ids| {
                let leaves = ParamLeaves::from_ids(ids.to_vec());
                let emb = encode_graph(
                    &params,
                    tape,
                    &leaves,
                    &[&xs[0], &xs[1]],
                    &[&metas[0], &metas[1]],
                    2,
                )?;
                let pred = predictor_graph(&params, tape, &leaves, emb)?;
                let mse = crate::losses::mse_node(tape, pred, &[35.0, 42.0])?;
                let logits = coarse_graph(&params, tape, &leaves, emb)?;
                let cse = crate::losses::cross_entropy_node(tape, logits, &[1, 0])?;
                let (mu, s2) = fine_graph(&params, tape, &leaves, emb)?;
                let gll = crate::losses::gaussian_nll_node(tape, mu, s2, &[0.5, -0.5])?;
                let a = tape.mul_scalar(mse, 0.01);
                let b = tape.mul_scalar(cse, 0.5);
                let c = tape.mul_scalar(gll, 0.5);
                let ab = tape.add(a, b)?;
                tape.add(ab, c)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "full model max rel err {err}");
    }

    #[test]
    fn reversal_flips_discriminator_gradient_into_encoder() {
        // with the reversal in place, an encoder tensor's gradient equals
        // (mse path) - lambda * (discriminator path)
        let spec = toy_spec();
        let params = ModelParams::init(&spec, 13).unwrap();
        let w1 = toy_window(&spec, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]);
        let w2 = toy_window(&spec, &[0.9, -0.2, 0.1, 0.3, 0.3, 0.0]);
        let lambda = 0.7;

        #[derive(Clone, Copy)]
        enum Mode {
            MseOnly,
            DiscOnly,
            Combined,
        }
        let grads_of = |mode: Mode, name: &str| -> Vec<f64> {
            let mut tape = Tape::new();
            let leaves = params.insert_leaves(&mut tape);
            let emb = encode_graph(
                &params,
                &mut tape,
                &leaves,
                &[&w1.x, &w2.x],
                &[&w1.metadata, &w2.metadata],
                2,
            )
            .unwrap();
            let disc_input = match mode {
                Mode::Combined => tape.grad_reverse(emb, lambda).unwrap(),
                _ => emb,
            };
            let mut terms = Vec::new();
            if matches!(mode, Mode::MseOnly | Mode::Combined) {
                let pred = predictor_graph(&params, &mut tape, &leaves, emb).unwrap();
                let mse = crate::losses::mse_node(&mut tape, pred, &[35.0, 42.0]).unwrap();
                terms.push(tape.mul_scalar(mse, 0.01));
            }
            if matches!(mode, Mode::DiscOnly | Mode::Combined) {
                let logits = coarse_graph(&params, &mut tape, &leaves, disc_input).unwrap();
                let cse = crate::losses::cross_entropy_node(&mut tape, logits, &[1, 0]).unwrap();
                let (mu, s2) = fine_graph(&params, &mut tape, &leaves, disc_input).unwrap();
                let gll =
                    crate::losses::gaussian_nll_node(&mut tape, mu, s2, &[0.5, -0.5]).unwrap();
                terms.push(tape.mul_scalar(cse, 0.5));
                terms.push(tape.mul_scalar(gll, 0.5));
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t).unwrap();
            }
            tape.backward(total).unwrap();
            let mut probe = params.clone();
            probe.zero_grads();
            probe.accumulate_grads(&tape, &leaves);
            probe.tensor(name).unwrap().grad().unwrap().to_vec()
        };

        let name = "gru.l0.f.w_z";
        let g_mse = grads_of(Mode::MseOnly, name);
        let g_disc = grads_of(Mode::DiscOnly, name);
        let g_comb = grads_of(Mode::Combined, name);
        for i in 0..g_comb.len() {
            let expected = g_mse[i] - lambda * g_disc[i];
            assert!(
                (g_comb[i] - expected).abs() < 1e-12 * expected.abs().max(1.0),
                "coordinate {i}: {} vs {expected}",
                g_comb[i]
            );
        }

        // the discriminator's own weights see the unreversed gradient
        let d_disc = grads_of(Mode::DiscOnly, "dc.0.w");
        let d_comb = grads_of(Mode::Combined, "dc.0.w");
        for (a, b) in d_disc.iter().zip(&d_comb) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_exact() {
        let spec = toy_spec();
        let mut params = ModelParams::init(&spec, 21).unwrap();
        params
            .set_normalization(
                vec![0.5, -1.0, 3.0],
                vec![1.5, 2.0, 0.25],
                vec![10.0, 0.0],
                vec![5.0, 1.0],
                (38.5, 7.25),
            )
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&params, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec(), params.spec());
        for name in params.tensor_names() {
            let a = params.tensor(name).unwrap();
            let b = back.tensor(name).unwrap();
            assert_eq!(a.shape(), b.shape(), "{name}");
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn init_is_seeded_and_reproducible() {
        let spec = toy_spec();
        let a = ModelParams::init(&spec, 7).unwrap();
        let b = ModelParams::init(&spec, 7).unwrap();
        let c = ModelParams::init(&spec, 8).unwrap();
        for name in a.tensor_names() {
            assert_eq!(a.tensor(name).unwrap(), b.tensor(name).unwrap());
        }
        assert!(a.tensor_names().iter().any(|n| a.tensor(n) != c.tensor(n)));
    }

    #[test]
    fn encode_rejects_feature_mismatch() {
        let spec = toy_spec();
        let params = ModelParams::init(&spec, 1).unwrap();
        let mut w = toy_window(&spec, &[0.0; 6]);
        w.f = 2;
        w.x = vec![0.0; 4];
        w.t = 2;
        assert!(encode(&params, &w).is_err());
    }
}
