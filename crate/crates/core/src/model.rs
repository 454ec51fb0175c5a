//! Gated-attention MIL network.
//!
//! For a bag `X` (N×D):
//!
//! ```text
//! h_i   = relu(W_proj x_i + b_proj)                       (H)
//! s_i   = w · (tanh(V h_i + b_V) ⊙ σ(U h_i + b_U)) + b_w   (scalar)
//! a     = softmax_i(s)
//! z     = Σ_i a_i h_i                                     (H)
//! logit = W_cls z + b_cls                                 (2)
//! ```
//!
//! Gradients are derived by hand; `tests::gradients_match_finite_differences`
//! checks them against central differences.

use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbag::FeatureBag;

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_ATTENTION: usize = 256;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub attention: usize,
}

impl ModelDims {
    pub fn new(input: usize, hidden: usize, attention: usize) -> Self {
        ModelDims { input, hidden, attention }
    }

    /// (rows, cols) of each tensor in checkpoint order.
    pub fn shapes(&self) -> [(usize, usize); 10] {
        let (d, h, a) = (self.input, self.hidden, self.attention);
        [(h, d), (1, h), (a, h), (1, a), (a, h), (1, a), (1, a), (1, 1), (NUM_CLASSES, h), (1, NUM_CLASSES)]
    }
}

/// Every trainable tensor of the network. Also used for gradients and Adam moments.
/// Biases are stored as single-row matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w_proj: Array2<f64>,
    pub b_proj: Array2<f64>,
    pub v_attn: Array2<f64>,
    pub b_v: Array2<f64>,
    pub u_attn: Array2<f64>,
    pub b_u: Array2<f64>,
    pub w_attn: Array2<f64>,
    pub b_w: Array2<f64>,
    pub w_cls: Array2<f64>,
    pub b_cls: Array2<f64>,
}

impl Params {
    pub const NAMES: [&'static str; 10] =
        ["W_proj", "b_proj", "V_attn", "b_V", "U_attn", "b_U", "w_attn", "b_w", "W_cls", "b_cls"];

    /// Whether tensor `i` (in [`Params::NAMES`] order) is a bias, exempt from weight decay.
    pub fn is_bias(i: usize) -> bool {
        i % 2 == 1
    }

    pub fn zeros(dims: &ModelDims) -> Self {
        let s = dims.shapes();
        Params {
            w_proj: Array2::zeros(s[0]),
            b_proj: Array2::zeros(s[1]),
            v_attn: Array2::zeros(s[2]),
            b_v: Array2::zeros(s[3]),
            u_attn: Array2::zeros(s[4]),
            b_u: Array2::zeros(s[5]),
            w_attn: Array2::zeros(s[6]),
            b_w: Array2::zeros(s[7]),
            w_cls: Array2::zeros(s[8]),
            b_cls: Array2::zeros(s[9]),
        }
    }

    pub fn tensors(&self) -> [&Array2<f64>; 10] {
        [
            &self.w_proj,
            &self.b_proj,
            &self.v_attn,
            &self.b_v,
            &self.u_attn,
            &self.b_u,
            &self.w_attn,
            &self.b_w,
            &self.w_cls,
            &self.b_cls,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 10] {
        [
            &mut self.w_proj,
            &mut self.b_proj,
            &mut self.v_attn,
            &mut self.b_v,
            &mut self.u_attn,
            &mut self.b_u,
            &mut self.w_attn,
            &mut self.b_w,
            &mut self.w_cls,
            &mut self.b_cls,
        ]
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.tensors().iter().zip(other.tensors()).all(|(a, b)| a.dim() == b.dim())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Half the squared norm of all non-bias tensors.
    pub fn half_weight_norm_sq(&self) -> f64 {
        self.tensors()
            .iter()
            .enumerate()
            .filter(|(i, _)| !Self::is_bias(*i))
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            * 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub dims: ModelDims,
    pub seed: u64,
    pub params: Params,
}

/// Xavier-uniform weights, zero biases, drawn in checkpoint order from a
/// ChaCha8 stream seeded with `seed`.
pub fn init_model(input: usize, hidden: usize, attention: usize, seed: u64) -> Result<MilModel> {
    if input == 0 || hidden == 0 || attention == 0 {
        return Err(Error::invalid(format!("model dims must be positive, got D={input} H={hidden} A={attention}")));
    }
    let dims = ModelDims::new(input, hidden, attention);
    let mut params = Params::zeros(&dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        if Params::is_bias(i) {
            continue;
        }
        let bound = xavier_bound(t.nrows(), t.ncols());
        t.mapv_inplace(|_| rng.random_range(-bound..=bound));
    }
    Ok(MilModel { dims, seed, params })
}

/// `sqrt(6 / (fan_in + fan_out))` for a rows×cols weight acting on column vectors.
pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct BagOutput {
    pub logits: [f64; 2],
    pub probs: [f64; 2],
    /// Pre-softmax attention scores.
    pub scores: Array1<f64>,
    pub attention: Array1<f64>,
    /// N×H post-ReLU patch embeddings.
    pub hidden: Array2<f64>,
    pub bag_embedding: Array1<f64>,
    gate_tanh: Array2<f64>,
    gate_sigmoid: Array2<f64>,
}

impl BagOutput {
    pub fn positive_prob(&self) -> f64 {
        self.probs[1]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(scores: ArrayView1<f64>) -> Array1<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = scores.mapv(|s| (s - max).exp());
    let total = out.sum();
    out /= total;
    out
}

fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Cross-entropy of a two-class logit pair against `label`.
fn cross_entropy2(logits: [f64; 2], label: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label]
}

impl MilModel {
    pub fn forward(&self, bag: &FeatureBag) -> Result<BagOutput> {
        self.forward_features(&bag.features)
    }

    pub fn forward_features(&self, x: &Array2<f64>) -> Result<BagOutput> {
        let (n, d) = x.dim();
        if n == 0 {
            return Err(Error::EmptyBag { n: 0, d: d as u32 });
        }
        if d != self.dims.input {
            return Err(Error::Shape(format!("bag has D={d}, model expects D={}", self.dims.input)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bag features".into()));
        }
        let p = &self.params;

        let mut hidden = x.dot(&p.w_proj.t()) + &p.b_proj;
        hidden.mapv_inplace(|v| v.max(0.0));

        let mut gate_tanh = hidden.dot(&p.v_attn.t()) + &p.b_v;
        gate_tanh.mapv_inplace(f64::tanh);
        let mut gate_sigmoid = hidden.dot(&p.u_attn.t()) + &p.b_u;
        gate_sigmoid.mapv_inplace(sigmoid);

        let gated = &gate_tanh * &gate_sigmoid;
        let scores = gated.dot(&p.w_attn.row(0)) + p.b_w[[0, 0]];
        let attention = softmax(scores.view());

        let bag_embedding = attention.dot(&hidden);
        let l = p.w_cls.dot(&bag_embedding);
        let logits = [l[0] + p.b_cls[[0, 0]], l[1] + p.b_cls[[0, 1]]];

        Ok(BagOutput {
            logits,
            probs: softmax2(logits),
            scores,
            attention,
            hidden,
            bag_embedding,
            gate_tanh,
            gate_sigmoid,
        })
    }
}

/// Auxiliary instance-level objective on the most and least attended patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceLossConfig {
    /// Patches taken from each end of the attention ranking; clamped to N/2.
    pub k: usize,
    /// Weight of the instance term in the total objective.
    pub weight: f64,
}

impl Default for InstanceLossConfig {
    fn default() -> Self {
        InstanceLossConfig { k: 8, weight: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub weight_decay: f64,
    pub instance: Option<InstanceLossConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Loss {
    pub total: f64,
    pub cross_entropy: f64,
    /// Unweighted mean instance loss (0 when disabled).
    pub instance: f64,
    pub decay: f64,
}

/// Instance term and its gradient contributions.
#[derive(Debug, Clone)]
pub struct InstanceTerm {
    pub loss: f64,
    /// (top, bottom) patch indices that were sampled.
    pub selected: (Vec<usize>, Vec<usize>),
    pub d_w_cls: Array2<f64>,
    pub d_b_cls: Array2<f64>,
    /// Gradient with respect to the post-ReLU hidden matrix.
    pub d_hidden: Array2<f64>,
}

/// Indices of the `k` highest- and `k` lowest-attention patches, ties broken by index.
pub fn select_extremes(attention: ArrayView1<f64>, k: usize) -> (Vec<usize>, Vec<usize>) {
    let k = k.min(attention.len() / 2);
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    let top = order[..k].to_vec();
    let bottom = order[order.len() - k..].to_vec();
    (top, bottom)
}

/// Mean cross-entropy of the bag classifier applied to individual patch
/// embeddings. Positive bags: top-k target 1, bottom-k target 0. Negative
/// bags: every sampled patch targets 0. The shared classifier is `W_cls`.
pub fn instance_loss(model: &MilModel, output: &BagOutput, label: u8, k: usize) -> InstanceTerm {
    let p = &model.params;
    let (top, bottom) = select_extremes(output.attention.view(), k);
    let mut term = InstanceTerm {
        loss: 0.0,
        selected: (top.clone(), bottom.clone()),
        d_w_cls: Array2::zeros(p.w_cls.dim()),
        d_b_cls: Array2::zeros(p.b_cls.dim()),
        d_hidden: Array2::zeros(output.hidden.dim()),
    };
    let count = top.len() + bottom.len();
    if count == 0 {
        return term;
    }
    let scale = 1.0 / count as f64;
    let samples = top.iter().map(|&i| (i, if label == 1 { 1 } else { 0 })).chain(bottom.iter().map(|&i| (i, 0)));
    for (i, target) in samples {
        let h = output.hidden.row(i);
        let l = p.w_cls.dot(&h);
        let logits = [l[0] + p.b_cls[[0, 0]], l[1] + p.b_cls[[0, 1]]];
        term.loss += scale * cross_entropy2(logits, target);
        let probs = softmax2(logits);
        for (c, &prob) in probs.iter().enumerate() {
            let g = scale * (prob - if c == target { 1.0 } else { 0.0 });
            term.d_b_cls[[0, c]] += g;
            term.d_w_cls.row_mut(c).scaled_add(g, &h);
            term.d_hidden.row_mut(i).scaled_add(g, &p.w_cls.row(c));
        }
    }
    term
}

/// Bag cross-entropy, optional weighted instance loss, and L2 decay on
/// non-bias tensors, with exact gradients of their sum.
pub fn loss_and_backward(model: &MilModel, bag: &FeatureBag, label: u8, cfg: &LossConfig) -> Result<(Loss, Params)> {
    let mut grads = Params::zeros(&model.dims);
    let loss = loss_and_backward_into(model, bag, label, cfg, &mut grads)?;
    Ok((loss, grads))
}

/// As [`loss_and_backward`], overwriting a caller-owned gradient buffer.
pub fn loss_and_backward_into(
    model: &MilModel,
    bag: &FeatureBag,
    label: u8,
    cfg: &LossConfig,
    g: &mut Params,
) -> Result<Loss> {
    if !g.same_shape(&model.params) {
        return Err(Error::Shape("gradient buffer does not match model".into()));
    }
    if label > 1 {
        return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
    }
    let out = model.forward(bag)?;
    let p = &model.params;
    let x = &bag.features;

    let cross_entropy = cross_entropy2(out.logits, label as usize);
    let dlogits =
        Array1::from_iter((0..NUM_CLASSES).map(|c| out.probs[c] - if c == label as usize { 1.0 } else { 0.0 }));

    g.b_cls.row_mut(0).assign(&dlogits);
    for c in 0..NUM_CLASSES {
        g.w_cls.row_mut(c).assign(&(&out.bag_embedding * dlogits[c]));
    }
    let dz = p.w_cls.t().dot(&dlogits);

    // z = Σ a_i h_i
    let mut d_hidden = outer(&out.attention, &dz);
    let d_attention = out.hidden.dot(&dz);

    let weighted = out.attention.dot(&d_attention);
    let d_scores = &out.attention * &(d_attention - weighted);

    g.b_w[[0, 0]] = d_scores.sum();
    let mut d_tanh_pre = Array2::zeros(out.gate_tanh.dim());
    let mut d_sigm_pre = Array2::zeros(out.gate_tanh.dim());
    {
        let w = p.w_attn.row(0);
        let mut dw = g.w_attn.row_mut(0);
        dw.fill(0.0);
        for i in 0..out.gate_tanh.nrows() {
            let ds = d_scores[i];
            let (t_row, s_row) = (out.gate_tanh.row(i), out.gate_sigmoid.row(i));
            let mut dt_row = d_tanh_pre.row_mut(i);
            let mut du_row = d_sigm_pre.row_mut(i);
            for a in 0..t_row.len() {
                let (t, s) = (t_row[a], s_row[a]);
                dw[a] += ds * t * s;
                let d_gated = ds * w[a];
                dt_row[a] = d_gated * s * (1.0 - t * t);
                du_row[a] = d_gated * t * s * (1.0 - s);
            }
        }
    }

    general_mat_mul(1.0, &d_tanh_pre.t(), &out.hidden, 0.0, &mut g.v_attn);
    g.b_v.row_mut(0).assign(&d_tanh_pre.sum_axis(Axis(0)));
    general_mat_mul(1.0, &d_sigm_pre.t(), &out.hidden, 0.0, &mut g.u_attn);
    g.b_u.row_mut(0).assign(&d_sigm_pre.sum_axis(Axis(0)));
    general_mat_mul(1.0, &d_tanh_pre, &p.v_attn, 1.0, &mut d_hidden);
    general_mat_mul(1.0, &d_sigm_pre, &p.u_attn, 1.0, &mut d_hidden);

    let mut instance = 0.0;
    if let Some(inst) = cfg.instance {
        let term = instance_loss(model, &out, label, inst.k);
        instance = term.loss;
        g.w_cls.scaled_add(inst.weight, &term.d_w_cls);
        g.b_cls.scaled_add(inst.weight, &term.d_b_cls);
        d_hidden.scaled_add(inst.weight, &term.d_hidden);
    }

    // ReLU: hidden > 0 exactly where the pre-activation is positive
    d_hidden.zip_mut_with(&out.hidden, |d, h| {
        if *h <= 0.0 {
            *d = 0.0;
        }
    });
    general_mat_mul(1.0, &d_hidden.t(), x, 0.0, &mut g.w_proj);
    g.b_proj.row_mut(0).assign(&d_hidden.sum_axis(Axis(0)));

    let decay = cfg.weight_decay * p.half_weight_norm_sq();
    if cfg.weight_decay != 0.0 {
        for (i, (grad, param)) in g.tensors_mut().into_iter().zip(p.tensors()).enumerate() {
            if !Params::is_bias(i) {
                grad.scaled_add(cfg.weight_decay, param);
            }
        }
    }

    let weight = cfg.instance.map_or(0.0, |i| i.weight);
    let loss = Loss { total: cross_entropy + weight * instance + decay, cross_entropy, instance, decay };
    Ok(loss)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MILM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (little-endian): magic `MILM`, u32 version, u64 seed,
/// u32 D, H, A, then each tensor in [`Params::NAMES`] order as u32 rows,
/// u32 cols, rows×cols f64.
pub fn encode_checkpoint(model: &MilModel) -> Result<Vec<u8>> {
    if !model.params.all_finite() {
        return Err(Error::NonFinite("model parameters".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    for d in [model.dims.input, model.dims.hidden, model.dims.attention] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in model.params.tensors() {
        buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn checkpoint_len(dims: &ModelDims) -> u64 {
    28 + dims.shapes().iter().map(|(r, c)| 8 + 8 * (r * c) as u64).sum::<u64>()
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<MilModel> {
    let actual = buf.len() as u64;
    let word = |pos: usize| -> Result<u32> {
        buf.get(pos..pos + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or(Error::LengthMismatch { expected: pos as u64 + 4, actual })
    };
    if buf.len() < 4 || buf[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: buf[..buf.len().min(4)].to_vec() });
    }
    let version = word(4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if buf.len() < 28 {
        return Err(Error::LengthMismatch { expected: 28, actual });
    }
    let seed = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    let dims = ModelDims::new(word(16)? as usize, word(20)? as usize, word(24)? as usize);
    if dims.input == 0 || dims.hidden == 0 || dims.attention == 0 {
        return Err(Error::Shape(format!("zero model dimension in {dims:?}")));
    }
    let expected = checkpoint_len(&dims);
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    let mut params = Params::zeros(&dims);
    let mut pos = 28;
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        let rows = word(pos)? as usize;
        let cols = word(pos + 4)? as usize;
        pos += 8;
        if (rows, cols) != t.dim() {
            return Err(Error::Shape(format!("tensor {} is {rows}x{cols}, expected {:?}", Params::NAMES[i], t.dim())));
        }
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
            pos += 8;
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(MilModel { dims, seed, params })
}

pub fn save_checkpoint(model: &MilModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MilModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
