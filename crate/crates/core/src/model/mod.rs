//! The toy vision-language transformer.
//!
//! Decoder-only, pre-norm, causal self-attention over a sequence of
//! projected visual patches followed by text tokens. Exposes per-head
//! activation capture and per-head additive bias hooks in the forward pass;
//! training is plain cross-entropy on the answer token with hand-written
//! backprop.

mod forward;
mod train;

pub use forward::{
    answer_yes_no, embed_sequence, forward, greedy_decode, Capture, DenseBias, EmbeddedSeq,
    ForwardOutput, FullTrace,
};
pub use train::{batch_loss, loss_and_grad, train, OptimizerKind, TrainHyper, TrainOutcome};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Transformer layer count L.
    pub layers: usize,
    /// Heads per layer N.
    pub heads: usize,
    /// Per-head dimension d; the model width is `heads * head_dim`.
    pub head_dim: usize,
    /// Vocabulary size M.
    pub vocab: usize,
    /// Visual feature dimension fed to the projection.
    pub d_v: usize,
    /// Number of visual tokens (P * P).
    pub n_visual: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model()
    }

    pub fn head_count(&self) -> usize {
        self.layers * self.heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
            ("d_v", self.d_v),
            ("n_visual", self.n_visual),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be > 0")));
            }
        }
        if self.max_seq <= self.n_visual {
            return Err(Error::InvalidParameter(
                "max_seq must exceed the visual token count".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LnParams {
    fn ones(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub ln1: LnParams,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2: LnParams,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vec<f64>,
}

/// All trainable parameters. Also reused as the gradient buffer, since the
/// gradient of every tensor has the tensor's own shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// vocab x d_model
    pub token_embedding: Matrix,
    /// max_seq x d_model, learned
    pub pos_embedding: Matrix,
    /// d_v x d_model
    pub visual_projection: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub ln_f: LnParams,
    /// d_model x vocab
    pub fc_w: Matrix,
    pub fc_b: Vec<f64>,
}

/// Gradients mirror the weight layout exactly.
pub type Gradients = ModelWeights;

impl ModelWeights {
    /// Random initialization: N(0, 0.02) matrices, unit layer-norm gains.
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let std = 0.02;
        let mat = |rows: usize, cols: usize, rng: &mut SeededRng| {
            Matrix::from_fn(rows, cols, |_, _| std * rng.standard_gaussian())
        };
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                ln1: LnParams::ones(d),
                w_q: mat(d, d, rng),
                w_k: mat(d, d, rng),
                w_v: mat(d, d, rng),
                w_o: mat(d, d, rng),
                ln2: LnParams::ones(d),
                ffn_w1: mat(d, config.ffn_dim(), rng),
                ffn_b1: vec![0.0; config.ffn_dim()],
                ffn_w2: mat(config.ffn_dim(), d, rng),
                ffn_b2: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            config,
            token_embedding: mat(config.vocab, d, rng),
            pos_embedding: mat(config.max_seq, d, rng),
            visual_projection: mat(config.d_v, d, rng),
            blocks,
            ln_f: LnParams::ones(d),
            fc_w: mat(d, config.vocab, rng),
            fc_b: vec![0.0; config.vocab],
        })
    }

    /// Zeroed buffer with the same shapes, for gradient accumulation.
    pub fn zeros_like(config: ModelConfig) -> Self {
        let d = config.d_model();
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                ln1: LnParams::zeros(d),
                w_q: Matrix::zeros(d, d),
                w_k: Matrix::zeros(d, d),
                w_v: Matrix::zeros(d, d),
                w_o: Matrix::zeros(d, d),
                ln2: LnParams::zeros(d),
                ffn_w1: Matrix::zeros(d, config.ffn_dim()),
                ffn_b1: vec![0.0; config.ffn_dim()],
                ffn_w2: Matrix::zeros(config.ffn_dim(), d),
                ffn_b2: vec![0.0; d],
            })
            .collect();
        Self {
            config,
            token_embedding: Matrix::zeros(config.vocab, d),
            pos_embedding: Matrix::zeros(config.max_seq, d),
            visual_projection: Matrix::zeros(config.d_v, d),
            blocks,
            ln_f: LnParams::zeros(d),
            fc_w: Matrix::zeros(d, config.vocab),
            fc_b: vec![0.0; config.vocab],
        }
    }

    pub fn param_count(&self) -> usize {
        self.flatten().len()
    }

    /// Named views of every trainable tensor, in the canonical flat order.
    pub fn tensor_slices(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("token_embedding".into(), self.token_embedding.data()),
            ("pos_embedding".into(), self.pos_embedding.data()),
            ("visual_projection".into(), self.visual_projection.data()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layer{l}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("layer{l}.ln1.beta"), &b.ln1.beta));
            out.push((format!("layer{l}.w_q"), b.w_q.data()));
            out.push((format!("layer{l}.w_k"), b.w_k.data()));
            out.push((format!("layer{l}.w_v"), b.w_v.data()));
            out.push((format!("layer{l}.w_o"), b.w_o.data()));
            out.push((format!("layer{l}.ln2.gamma"), &b.ln2.gamma));
            out.push((format!("layer{l}.ln2.beta"), &b.ln2.beta));
            out.push((format!("layer{l}.ffn_w1"), b.ffn_w1.data()));
            out.push((format!("layer{l}.ffn_b1"), &b.ffn_b1));
            out.push((format!("layer{l}.ffn_w2"), b.ffn_w2.data()));
            out.push((format!("layer{l}.ffn_b2"), &b.ffn_b2));
        }
        out.push(("ln_f.gamma".into(), &self.ln_f.gamma));
        out.push(("ln_f.beta".into(), &self.ln_f.beta));
        out.push(("fc_w".into(), self.fc_w.data()));
        out.push(("fc_b".into(), &self.fc_b));
        out
    }

    fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embedding.data_mut(),
            self.pos_embedding.data_mut(),
            self.visual_projection.data_mut(),
        ];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            out.push(b.w_q.data_mut());
            out.push(b.w_k.data_mut());
            out.push(b.w_v.data_mut());
            out.push(b.w_o.data_mut());
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            out.push(b.ffn_w1.data_mut());
            out.push(&mut b.ffn_b1);
            out.push(b.ffn_w2.data_mut());
            out.push(&mut b.ffn_b2);
        }
        out.push(&mut self.ln_f.gamma);
        out.push(&mut self.ln_f.beta);
        out.push(self.fc_w.data_mut());
        out.push(&mut self.fc_b);
        out
    }

    /// All parameters in one vector, in the canonical tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, slice) in self.tensor_slices() {
            out.extend_from_slice(slice);
        }
        out
    }

    /// Overwrite every parameter from a flat vector (canonical order).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0usize;
        for slice in self.tensor_slices_mut() {
            let next = offset + slice.len();
            if next > flat.len() {
                return Err(Error::InvalidParameter(format!(
                    "flat parameter vector too short: {} < {next}",
                    flat.len()
                )));
            }
            slice.copy_from_slice(&flat[offset..next]);
            offset = next;
        }
        if offset != flat.len() {
            return Err(Error::InvalidParameter(format!(
                "flat parameter vector too long: {} > {offset}",
                flat.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes; identifies the model
    /// that produced any downstream artifact.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, slice) in self.tensor_slices() {
            for v in slice {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().fold(String::new(), |mut s, b| {
            use std::fmt::Write;
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Per-head last-token attention outputs, layout `[L][N][d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl ActivationRecord {
    pub fn zeros(layers: usize, heads: usize, dim: usize) -> Self {
        Self {
            layers,
            heads,
            dim,
            data: vec![0.0; layers * heads * dim],
        }
    }

    pub fn from_data(layers: usize, heads: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != layers * heads * dim {
            return Err(Error::InvalidParameter(format!(
                "activation record length {} does not match {layers}x{heads}x{dim}",
                data.len()
            )));
        }
        Ok(Self {
            layers,
            heads,
            dim,
            data,
        })
    }

    #[inline]
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let base = (layer * self.heads + head) * self.dim;
        &self.data[base..base + self.dim]
    }

    #[inline]
    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut [f64] {
        let base = (layer * self.heads + head) * self.dim;
        &mut self.data[base..base + self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn matches_config(&self, config: &ModelConfig) -> bool {
        self.layers == config.layers
            && self.heads == config.heads
            && self.dim == config.head_dim
    }
}

/// Sparse per-head additive bias: `(layer, head) -> vector of head_dim`.
/// Added to the head's attention output at every sequence position before
/// the output projection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadBias {
    map: BTreeMap<(usize, usize), Vec<f64>>,
}

impl HeadBias {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, head: usize, bias: Vec<f64>) {
        self.map.insert((layer, head), bias);
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&[f64]> {
        self.map.get(&(layer, head)).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<f64>)> {
        self.map.iter()
    }

    /// Accumulate `scale * vec` onto the entry for `(layer, head)`.
    pub fn add_scaled(&mut self, layer: usize, head: usize, scale: f64, vec: &[f64]) {
        let entry = self
            .map
            .entry((layer, head))
            .or_insert_with(|| vec![0.0; vec.len()]);
        for (e, v) in entry.iter_mut().zip(vec) {
            *e += scale * v;
        }
    }
}

// Unchecked matmul helpers for the hot forward/backward paths. Shapes are
// enforced by construction; divergence is caught by the loss finiteness
// check and the final logits check.

/// `a (m x k) * b (k x n)`
pub(crate) fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `n x k`
pub(crate) fn mm_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols(), b.cols());
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    out
}

/// `a^T * b` where `a` is `k x m` and `b` is `k x n`, accumulated into `out`.
pub(crate) fn mm_tn_accum(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(out.rows(), a.cols());
    debug_assert_eq!(out.cols(), b.cols());
    for k in 0..a.rows() {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 3,
            vocab: 20,
            d_v: 4,
            n_visual: 4,
            max_seq: 24,
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let cfg = tiny_config();
        let w = ModelWeights::init(cfg, &mut SeededRng::new(3)).unwrap();
        let flat = w.flatten();
        let mut w2 = ModelWeights::zeros_like(cfg);
        w2.load_flat(&flat).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn load_flat_rejects_wrong_length() {
        let cfg = tiny_config();
        let mut w = ModelWeights::zeros_like(cfg);
        let flat = w.flatten();
        assert!(w.load_flat(&flat[..flat.len() - 1]).is_err());
        let mut too_long = flat.clone();
        too_long.push(0.0);
        assert!(w.load_flat(&too_long).is_err());
    }

    #[test]
    fn fingerprint_changes_with_any_parameter() {
        let cfg = tiny_config();
        let w = ModelWeights::init(cfg, &mut SeededRng::new(3)).unwrap();
        let fp = w.fingerprint();
        assert_eq!(fp.len(), 64);
        let mut w2 = w.clone();
        let mut flat = w2.flatten();
        flat[123] += 1e-9;
        w2.load_flat(&flat).unwrap();
        assert_ne!(fp, w2.fingerprint());
        assert_eq!(fp, w.fingerprint());
    }

    #[test]
    fn mm_variants_agree_with_checked_matmul() {
        let mut rng = SeededRng::new(8);
        let a = Matrix::from_fn(5, 4, |_, _| rng.standard_gaussian());
        let b = Matrix::from_fn(4, 6, |_, _| rng.standard_gaussian());
        assert_eq!(mm(&a, &b), a.matmul(&b).unwrap());
        let bt = b.transpose();
        assert_eq!(mm_nt(&a, &bt), a.matmul(&b).unwrap());
        let mut acc = Matrix::zeros(4, 6);
        mm_tn_accum(&a, &mm(&a, &b), &mut acc);
        assert_eq!(acc, a.transpose().matmul(&a.matmul(&b).unwrap()).unwrap());
    }

    #[test]
    fn head_bias_accumulates() {
        let mut bias = HeadBias::new();
        bias.add_scaled(1, 0, 2.0, &[1.0, 2.0]);
        bias.add_scaled(1, 0, 1.0, &[0.5, 0.5]);
        assert_eq!(bias.get(1, 0).unwrap(), &[2.5, 4.5]);
        assert_eq!(bias.len(), 1);
    }
}
