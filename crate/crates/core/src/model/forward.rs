//! Forward pass: embedding, causal multi-head attention with per-head
//! capture and additive bias hooks, yes/no answering, greedy decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix};
use crate::scene::{Answer, QAPair, SceneImage};
use crate::vocab::{self, TokenId};

use super::{mm, ActivationRecord, HeadBias, LnParams, ModelConfig, ModelWeights};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let z = GELU_K * (x + GELU_C * x * x * x);
    let t = z.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// A sequence embedded into model space: visual tokens first, then the
/// question, then any answer tokens.
#[derive(Debug, Clone)]
pub struct EmbeddedSeq {
    /// T x d_model input to the first layer.
    pub x: Matrix,
    /// Raw patch features (n_visual x d_v), kept for the embedding backward.
    pub visual_feats: Matrix,
    /// Token ids at the text positions, in order.
    pub text_tokens: Vec<TokenId>,
    pub n_visual: usize,
    pub n_question: usize,
    pub n_answer: usize,
}

impl EmbeddedSeq {
    pub fn len(&self) -> usize {
        self.n_visual + self.n_question + self.n_answer
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The designated last-token position (0-indexed end of the full
    /// visual + question + answer sequence).
    pub fn last_index(&self) -> usize {
        self.len() - 1
    }
}

/// Embed `[visual patches] ++ [question] ++ [answer?]` with learned
/// positional embeddings added at every position.
pub fn embed_sequence(
    weights: &ModelWeights,
    question: &[TokenId],
    image: &SceneImage,
    answer: Option<&[TokenId]>,
) -> Result<EmbeddedSeq> {
    let cfg = &weights.config;
    if question.is_empty() {
        return Err(Error::InvalidParameter("question must be non-empty".into()));
    }
    if image.patches.rows() != cfg.n_visual || image.d_v() != cfg.d_v {
        return Err(Error::InvalidParameter(format!(
            "image grid {}x{} does not match model ({} visual tokens of dim {})",
            image.patches.rows(),
            image.d_v(),
            cfg.n_visual,
            cfg.d_v
        )));
    }
    let answer = answer.unwrap_or(&[]);
    let total = cfg.n_visual + question.len() + answer.len();
    if total > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: total,
            max: cfg.max_seq,
        });
    }
    let text_tokens: Vec<TokenId> = question.iter().chain(answer.iter()).copied().collect();
    if let Some(&bad) = text_tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::InvalidParameter(format!(
            "token id {bad} outside vocabulary of size {}",
            cfg.vocab
        )));
    }

    let d = cfg.d_model();
    let mut x = Matrix::zeros(total, d);
    for i in 0..cfg.n_visual {
        let feat = image.patches.row(i);
        let pos = weights.pos_embedding.row(i);
        let row = x.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (fi, &f) in feat.iter().enumerate() {
                acc += f * weights.visual_projection.at(fi, j);
            }
            *r = acc + pos[j];
        }
    }
    for (t, &token) in text_tokens.iter().enumerate() {
        let pos_idx = cfg.n_visual + t;
        let emb = weights.token_embedding.row(token);
        let pos = weights.pos_embedding.row(pos_idx);
        let row = x.row_mut(pos_idx);
        for ((r, &e), &p) in row.iter_mut().zip(emb).zip(pos) {
            *r = e + p;
        }
    }
    Ok(EmbeddedSeq {
        x,
        visual_feats: image.patches.clone(),
        text_tokens,
        n_visual: cfg.n_visual,
        n_question: question.len(),
        n_answer: answer.len(),
    })
}

/// What the forward pass records besides logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capture {
    None,
    /// Per-head attention outputs at the last token (pre-bias).
    LastToken,
    /// Last-token record plus full per-layer hidden states and per-position
    /// head outputs; diagnostic instrumentation for tests.
    Full,
}

/// Full instrumentation of one forward pass.
#[derive(Debug, Clone)]
pub struct FullTrace {
    /// Hidden states `h^(0)..h^(L)`; L+1 matrices of T x d_model.
    pub hidden: Vec<Matrix>,
    /// Concatenated per-head attention outputs per layer, pre-bias.
    pub attn_out: Vec<Matrix>,
    /// Residual stream right after the attention projection, per layer.
    pub post_attn: Vec<Matrix>,
}

/// Head bias in dense `[layer][head]` layout so lookups during decoding are
/// O(1); built once per configuration, never per token.
#[derive(Debug, Clone)]
pub struct DenseBias {
    slots: Vec<Option<Vec<f64>>>,
    heads: usize,
}

impl DenseBias {
    pub fn new(bias: &HeadBias, config: &ModelConfig) -> Result<Self> {
        let mut slots = vec![None; config.layers * config.heads];
        for (&(layer, head), vec) in bias.iter() {
            if layer >= config.layers || head >= config.heads {
                return Err(Error::BiasKeyOutOfRange {
                    layer,
                    head,
                    layers: config.layers,
                    heads: config.heads,
                });
            }
            if vec.len() != config.head_dim {
                return Err(Error::InvalidParameter(format!(
                    "bias vector for ({layer}, {head}) has dim {}, expected {}",
                    vec.len(),
                    config.head_dim
                )));
            }
            slots[layer * config.heads + head] = Some(vec.clone());
        }
        Ok(Self {
            slots,
            heads: config.heads,
        })
    }

    #[inline]
    fn slot(&self, layer: usize, head: usize) -> Option<&[f64]> {
        self.slots[layer * self.heads + head].as_deref()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// T x vocab logits, one row per position.
    pub logits: Matrix,
    pub record: Option<ActivationRecord>,
    pub trace: Option<FullTrace>,
}

pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) struct LayerCache {
    pub a: Matrix,
    pub ln1: LnCache,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub attn_concat: Matrix,
    pub b_normed: Matrix,
    pub ln2: LnCache,
    pub u: Matrix,
    pub g: Matrix,
}

pub(crate) struct TrainCache {
    pub layers: Vec<LayerCache>,
    pub ln_f: LnCache,
    pub y: Matrix,
}

pub(crate) fn layer_norm(x: &Matrix, params: &LnParams) -> (Matrix, LnCache) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        let xh = xhat.row_mut(r);
        let o = out.row_mut(r);
        for c in 0..cols {
            let h = (row[c] - mean) * istd;
            xh[c] = h;
            o[c] = params.gamma[c] * h + params.beta[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn add_row_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn add_assign(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

pub(crate) struct RunResult {
    pub logits: Matrix,
    pub record: Option<ActivationRecord>,
    pub trace: Option<FullTrace>,
    pub cache: Option<TrainCache>,
}

/// Single implementation of the forward math, shared by inference (with
/// bias/capture) and training (with caches).
pub(crate) fn run_forward(
    weights: &ModelWeights,
    seq: &EmbeddedSeq,
    bias: Option<&DenseBias>,
    capture: Capture,
    want_cache: bool,
) -> Result<RunResult> {
    let cfg = &weights.config;
    let t = seq.x.rows();
    let hd = cfg.head_dim;
    let inv_sqrt_d = 1.0 / (hd as f64).sqrt();
    let last = seq.last_index();

    let mut record = match capture {
        Capture::None => None,
        _ => Some(ActivationRecord::zeros(cfg.layers, cfg.heads, hd)),
    };
    let mut trace = if capture == Capture::Full {
        Some(FullTrace {
            hidden: Vec::with_capacity(cfg.layers + 1),
            attn_out: Vec::with_capacity(cfg.layers),
            post_attn: Vec::with_capacity(cfg.layers),
        })
    } else {
        None
    };
    let mut layer_caches = want_cache.then(|| Vec::with_capacity(cfg.layers));

    let mut h = seq.x.clone();
    if let Some(tr) = trace.as_mut() {
        tr.hidden.push(h.clone());
    }

    for (l, blk) in weights.blocks.iter().enumerate() {
        let (a, ln1) = layer_norm(&h, &blk.ln1);
        let q = mm(&a, &blk.w_q);
        let k = mm(&a, &blk.w_k);
        let v = mm(&a, &blk.w_v);

        let mut attn = Matrix::zeros(t, cfg.d_model());
        let mut probs_cache = want_cache.then(|| Vec::with_capacity(cfg.heads));
        for n in 0..cfg.heads {
            let lo = n * hd;
            let hi = lo + hd;
            // causal scores + row softmax over the unmasked prefix
            let mut probs = Matrix::zeros(t, t);
            for i in 0..t {
                let q_slice = &q.row(i)[lo..hi];
                let row = probs.row_mut(i);
                for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                    let k_slice = &k.row(j)[lo..hi];
                    let mut acc = 0.0;
                    for (x, y) in q_slice.iter().zip(k_slice) {
                        acc += x * y;
                    }
                    *slot = acc * inv_sqrt_d;
                }
                softmax_in_place(&mut row[..=i]);
            }
            // weighted sum of values
            for i in 0..t {
                let out_slice = &mut attn.row_mut(i)[lo..hi];
                for j in 0..=i {
                    let w = probs.at(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &vv) in out_slice.iter_mut().zip(&v.row(j)[lo..hi]) {
                        *o += w * vv;
                    }
                }
            }
            if let Some(rec) = record.as_mut() {
                rec.head_mut(l, n).copy_from_slice(&attn.row(last)[lo..hi]);
            }
            if let Some(pc) = probs_cache.as_mut() {
                pc.push(probs);
            }
        }
        if let Some(tr) = trace.as_mut() {
            tr.attn_out.push(attn.clone());
        }

        // additive per-head intervention, applied at every position before
        // the output projection
        if let Some(dense) = bias {
            for n in 0..cfg.heads {
                if let Some(bv) = dense.slot(l, n) {
                    let lo = n * hd;
                    for i in 0..t {
                        for (o, b) in attn.row_mut(i)[lo..lo + hd].iter_mut().zip(bv) {
                            *o += b;
                        }
                    }
                }
            }
        }

        let proj = mm(&attn, &blk.w_o);
        add_assign(&mut h, &proj);
        if let Some(tr) = trace.as_mut() {
            tr.post_attn.push(h.clone());
        }

        let (b_normed, ln2) = layer_norm(&h, &blk.ln2);
        let mut u = mm(&b_normed, &blk.ffn_w1);
        add_row_bias(&mut u, &blk.ffn_b1);
        let mut g = u.clone();
        for gv in g.data_mut() {
            *gv = gelu(*gv);
        }
        let mut f = mm(&g, &blk.ffn_w2);
        add_row_bias(&mut f, &blk.ffn_b2);
        add_assign(&mut h, &f);

        if let Some(tr) = trace.as_mut() {
            tr.hidden.push(h.clone());
        }
        if let Some(caches) = layer_caches.as_mut() {
            caches.push(LayerCache {
                a,
                ln1,
                q,
                k,
                v,
                probs: probs_cache.unwrap_or_default(),
                attn_concat: attn,
                b_normed,
                ln2,
                u,
                g,
            });
        }
    }

    let (y, ln_f) = layer_norm(&h, &weights.ln_f);
    let mut logits = mm(&y, &weights.fc_w);
    add_row_bias(&mut logits, &weights.fc_b);
    logits.check_finite("forward")?;

    let cache = layer_caches.map(|layers| TrainCache { layers, ln_f, y });
    Ok(RunResult {
        logits,
        record,
        trace,
        cache,
    })
}

/// Causal forward pass. `bias`, when present, is added to each selected
/// head's attention output at every position before the output projection;
/// capture records are taken pre-bias at the last token.
pub fn forward(
    weights: &ModelWeights,
    seq: &EmbeddedSeq,
    bias: Option<&DenseBias>,
    capture: Capture,
) -> Result<ForwardOutput> {
    let run = run_forward(weights, seq, bias, capture, false)?;
    Ok(ForwardOutput {
        logits: run.logits,
        record: run.record,
        trace: run.trace,
    })
}

/// Compare the `yes` and `no` logits at the last question position;
/// ties answer `no`.
pub fn answer_yes_no(
    weights: &ModelWeights,
    qa: &QAPair,
    image: &SceneImage,
    bias: Option<&DenseBias>,
) -> Result<Answer> {
    let seq = embed_sequence(weights, &qa.question_tokens, image, None)?;
    let out = forward(weights, &seq, bias, Capture::None)?;
    let row = out.logits.row(seq.last_index());
    Ok(if row[vocab::YES] > row[vocab::NO] {
        Answer::Yes
    } else {
        Answer::No
    })
}

/// Greedy decoding of `n_tokens` continuation tokens. Recomputes the full
/// forward pass per step (no KV cache); ties go to the smallest token id.
pub fn greedy_decode(
    weights: &ModelWeights,
    question: &[TokenId],
    image: &SceneImage,
    bias: Option<&DenseBias>,
    n_tokens: usize,
) -> Result<Vec<TokenId>> {
    let mut generated: Vec<TokenId> = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let seq = embed_sequence(weights, question, image, Some(&generated))?;
        let out = forward(weights, &seq, bias, Capture::None)?;
        let row = out.logits.row(seq.last_index());
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        generated.push(best);
    }
    Ok(generated)
}

/// Serializable layout metadata of a weights artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub config: ModelConfig,
    pub param_count: usize,
    pub fingerprint: String,
}
