//! Training: cross-entropy on the answer token at the last question
//! position, hand-written backprop, deterministic under a seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::par;
use crate::scene::{Answer, QAPair, SceneImage};
use crate::vocab;

use super::forward::{embed_sequence, gelu_prime, run_forward, Capture, LnCache, TrainCache};
use super::{mm_nt, mm_tn_accum, Gradients, ModelConfig, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Mean training loss: entry 0 is the pre-training loss on the full
    /// set, then one entry per epoch.
    pub loss_curve: Vec<f64>,
}

fn target_token(gold: Answer) -> usize {
    match gold {
        Answer::Yes => vocab::YES,
        Answer::No => vocab::NO,
    }
}

/// Cross-entropy loss of the gold answer at the last position, and its
/// gradient with respect to every parameter.
pub fn loss_and_grad(
    weights: &ModelWeights,
    qa: &QAPair,
    image: &SceneImage,
) -> Result<(f64, Gradients)> {
    let seq = embed_sequence(weights, &qa.question_tokens, image, None)?;
    let run = run_forward(weights, &seq, None, Capture::None, true)?;
    let cache = run.cache.expect("cache requested");
    let logits = run.logits;
    let s = seq.last_index();
    let target = target_token(qa.gold);

    // stable log-softmax at the answer position
    let row = logits.row(s);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - row[target];

    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    {
        let d = dlogits.row_mut(s);
        for (j, v) in d.iter_mut().enumerate() {
            *v = (row[j] - lse).exp();
        }
        d[target] -= 1.0;
    }

    let mut grads = ModelWeights::zeros_like(weights.config);
    backward(weights, &seq.visual_feats, &seq.text_tokens, &cache, &dlogits, &mut grads);
    Ok((loss, grads))
}

/// Mean loss over a dataset, forward-only.
pub fn batch_loss(weights: &ModelWeights, dataset: &[(QAPair, SceneImage)]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("dataset must be non-empty".into()));
    }
    let losses: Vec<Result<f64>> = par::map_slice(dataset, |(qa, image)| {
        let seq = embed_sequence(weights, &qa.question_tokens, image, None)?;
        let run = run_forward(weights, &seq, None, Capture::None, false)?;
        let row = run.logits.row(seq.last_index());
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(lse - row[target_token(qa.gold)])
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / dataset.len() as f64)
}

fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Matrix {
    let (rows, cols) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let dy_row = dy.row(r);
        let xh = cache.xhat.row(r);
        let istd = cache.inv_std[r];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..cols {
            let dxhat = dy_row[c] * gamma[c];
            m1 += dxhat;
            m2 += dxhat * xh[c];
            dgamma[c] += dy_row[c] * xh[c];
            dbeta[c] += dy_row[c];
        }
        m1 /= cols as f64;
        m2 /= cols as f64;
        let out = dx.row_mut(r);
        for c in 0..cols {
            let dxhat = dy_row[c] * gamma[c];
            out[c] = istd * (dxhat - m1 - xh[c] * m2);
        }
    }
    dx
}

fn colsum_into(m: &Matrix, out: &mut [f64]) {
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
}

fn backward(
    weights: &ModelWeights,
    visual_feats: &Matrix,
    text_tokens: &[usize],
    cache: &TrainCache,
    dlogits: &Matrix,
    grads: &mut Gradients,
) {
    let cfg = &weights.config;
    let t = dlogits.rows();
    let hd = cfg.head_dim;
    let inv_sqrt_d = 1.0 / (hd as f64).sqrt();

    // output head
    mm_tn_accum(&cache.y, dlogits, &mut grads.fc_w);
    colsum_into(dlogits, &mut grads.fc_b);
    let dy = mm_nt(dlogits, &weights.fc_w);
    let mut dh = layer_norm_backward(
        &dy,
        &cache.ln_f,
        &weights.ln_f.gamma,
        &mut grads.ln_f.gamma,
        &mut grads.ln_f.beta,
    );

    for l in (0..cfg.layers).rev() {
        let blk = &weights.blocks[l];
        let gblk = &mut grads.blocks[l];
        let lc = &cache.layers[l];

        // FFN block: h_out = h_mid + gelu(LN2(h_mid) W1 + b1) W2 + b2
        let df = &dh;
        mm_tn_accum(&lc.g, df, &mut gblk.ffn_w2);
        colsum_into(df, &mut gblk.ffn_b2);
        let dg = mm_nt(df, &blk.ffn_w2);
        let mut du = dg;
        for (duv, &uv) in du.data_mut().iter_mut().zip(lc.u.data()) {
            *duv *= gelu_prime(uv);
        }
        mm_tn_accum(&lc.b_normed, &du, &mut gblk.ffn_w1);
        colsum_into(&du, &mut gblk.ffn_b1);
        let db_normed = mm_nt(&du, &blk.ffn_w1);
        let dh_mid_ln = layer_norm_backward(
            &db_normed,
            &lc.ln2,
            &blk.ln2.gamma,
            &mut gblk.ln2.gamma,
            &mut gblk.ln2.beta,
        );
        let mut dh_mid = dh;
        for (a, b) in dh_mid.data_mut().iter_mut().zip(dh_mid_ln.data()) {
            *a += b;
        }

        // attention block: h_mid = h_in + attn W_o
        mm_tn_accum(&lc.attn_concat, &dh_mid, &mut gblk.w_o);
        let dattn = mm_nt(&dh_mid, &blk.w_o);

        let mut dq = Matrix::zeros(t, cfg.d_model());
        let mut dk = Matrix::zeros(t, cfg.d_model());
        let mut dv = Matrix::zeros(t, cfg.d_model());
        for n in 0..cfg.heads {
            let lo = n * hd;
            let hi = lo + hd;
            let probs = &lc.probs[n];
            // dV = P^T dO; dP = dO V^T
            let mut dp = Matrix::zeros(t, t);
            for i in 0..t {
                let do_slice = &dattn.row(i)[lo..hi];
                for j in 0..=i {
                    let p = probs.at(i, j);
                    if p != 0.0 {
                        for (dvv, &dov) in dv.row_mut(j)[lo..hi].iter_mut().zip(do_slice) {
                            *dvv += p * dov;
                        }
                    }
                    let v_slice = &lc.v.row(j)[lo..hi];
                    let mut acc = 0.0;
                    for (x, y) in do_slice.iter().zip(v_slice) {
                        acc += x * y;
                    }
                    dp.set(i, j, acc);
                }
            }
            // softmax backward: dS = P o (dP - rowsum(dP o P))
            for i in 0..t {
                let mut rowdot = 0.0;
                for j in 0..=i {
                    rowdot += dp.at(i, j) * probs.at(i, j);
                }
                for j in 0..=i {
                    let ds = probs.at(i, j) * (dp.at(i, j) - rowdot) * inv_sqrt_d;
                    if ds == 0.0 {
                        continue;
                    }
                    // dQ_i += dS_ij K_j ; dK_j += dS_ij Q_i
                    let k_slice = &lc.k.row(j)[lo..hi];
                    for (dqv, &kv) in dq.row_mut(i)[lo..hi].iter_mut().zip(k_slice) {
                        *dqv += ds * kv;
                    }
                    let q_slice = &lc.q.row(i)[lo..hi];
                    for (dkv, &qv) in dk.row_mut(j)[lo..hi].iter_mut().zip(q_slice) {
                        *dkv += ds * qv;
                    }
                }
            }
        }

        mm_tn_accum(&lc.a, &dq, &mut gblk.w_q);
        mm_tn_accum(&lc.a, &dk, &mut gblk.w_k);
        mm_tn_accum(&lc.a, &dv, &mut gblk.w_v);
        let mut da = mm_nt(&dq, &blk.w_q);
        let da_k = mm_nt(&dk, &blk.w_k);
        let da_v = mm_nt(&dv, &blk.w_v);
        for ((a, b), c) in da
            .data_mut()
            .iter_mut()
            .zip(da_k.data())
            .zip(da_v.data())
        {
            *a += b + c;
        }
        let dh_in_ln = layer_norm_backward(
            &da,
            &lc.ln1,
            &blk.ln1.gamma,
            &mut gblk.ln1.gamma,
            &mut gblk.ln1.beta,
        );
        let mut dh_in = dh_mid;
        for (a, b) in dh_in.data_mut().iter_mut().zip(dh_in_ln.data()) {
            *a += b;
        }
        dh = dh_in;
    }

    // embedding backward
    let n_visual = cfg.n_visual;
    for i in 0..n_visual {
        let dx = dh.row(i);
        let feat = visual_feats.row(i);
        for (fi, &f) in feat.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            for (g, &d) in grads.visual_projection.row_mut(fi).iter_mut().zip(dx) {
                *g += f * d;
            }
        }
        for (g, &d) in grads.pos_embedding.row_mut(i).iter_mut().zip(dx) {
            *g += d;
        }
    }
    for (ti, &token) in text_tokens.iter().enumerate() {
        let pos = n_visual + ti;
        let dx = dh.row(pos);
        for (g, &d) in grads.token_embedding.row_mut(token).iter_mut().zip(dx) {
            *g += d;
        }
        for (g, &d) in grads.pos_embedding.row_mut(pos).iter_mut().zip(dx) {
            *g += d;
        }
    }
}

fn accumulate(dst: &mut Gradients, src: &Gradients) {
    let src_slices: Vec<&[f64]> = src.tensor_slices().into_iter().map(|(_, s)| s).collect();
    for (d, s) in dst.tensor_slices_mut().into_iter().zip(src_slices) {
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += sv;
        }
    }
}

enum Optimizer {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: usize,
    },
}

impl Optimizer {
    fn new(kind: OptimizerKind, params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; params],
                v: vec![0.0; params],
                t: 0,
            },
        }
    }

    fn step(&mut self, weights: &mut [f64], grads: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (w, g) in weights.iter_mut().zip(grads) {
                    *w -= lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t as i32);
                let c2 = 1.0 - B2.powi(*t as i32);
                for i in 0..weights.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * grads[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * grads[i] * grads[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    weights[i] -= lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
    }
}

/// Fixed chunking keeps the parallel gradient reduction independent of the
/// thread count.
const GRAD_CHUNK: usize = 4;

/// Mini-batch training from a fresh seeded initialization.
pub fn train(
    config: ModelConfig,
    dataset: &[(QAPair, SceneImage)],
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("dataset must be non-empty".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be > 0".into()));
    }
    let root = SeededRng::new(hyper.seed);
    let mut weights = ModelWeights::init(config, &mut root.derive_named("init"))?;
    let mut shuffle_rng = root.derive_named("shuffle");

    let mut curve = vec![batch_loss(&weights, dataset)?];
    let mut optimizer = Optimizer::new(hyper.optimizer, weights.param_count());
    let mut step = 0usize;

    for _epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            step += 1;
            let items: Vec<&(QAPair, SceneImage)> = batch.iter().map(|&i| &dataset[i]).collect();
            let chunks: Vec<&[&(QAPair, SceneImage)]> = items.chunks(GRAD_CHUNK).collect();
            let partial: Vec<Result<(f64, Gradients)>> = par::map_slice(&chunks, |chunk| {
                let mut sum: Option<(f64, Gradients)> = None;
                for (qa, image) in chunk.iter() {
                    let (loss, grads) = loss_and_grad(&weights, qa, image)?;
                    match sum.as_mut() {
                        None => sum = Some((loss, grads)),
                        Some((l, g)) => {
                            *l += loss;
                            accumulate(g, &grads);
                        }
                    }
                }
                Ok(sum.expect("non-empty chunk"))
            });
            let mut total_loss = 0.0;
            let mut total_grads = ModelWeights::zeros_like(config);
            for part in partial {
                let (loss, grads) = part.map_err(|e| match e {
                    Error::NonFinite { .. } => Error::TrainingDiverged { step },
                    other => other,
                })?;
                total_loss += loss;
                accumulate(&mut total_grads, &grads);
            }
            let scale = 1.0 / batch.len() as f64;
            let batch_mean = total_loss * scale;
            if !batch_mean.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            epoch_loss += total_loss;

            let mut grad_flat = total_grads.flatten();
            for g in grad_flat.iter_mut() {
                *g *= scale;
            }
            let mut weight_flat = weights.flatten();
            optimizer.step(&mut weight_flat, &grad_flat, hyper.learning_rate);
            weights.load_flat(&weight_flat)?;
        }
        curve.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainOutcome {
        weights,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Answer, Strategy};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 3,
            vocab: 20,
            d_v: 3,
            n_visual: 4,
            max_seq: 16,
        }
    }

    fn tiny_dataset(config: &ModelConfig, n: usize, seed: u64) -> Vec<(QAPair, SceneImage)> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|i| {
                let image = SceneImage {
                    id: i as u64,
                    p: 2,
                    patches: Matrix::from_fn(config.n_visual, config.d_v, |_, _| {
                        rng.standard_gaussian()
                    }),
                    objects: vec![],
                    corruption: None,
                };
                let gold = if i % 2 == 0 { Answer::Yes } else { Answer::No };
                let qa = QAPair {
                    image_id: i as u64,
                    question_tokens: vocab::presence_question(i % 3),
                    gold,
                    strategy: Strategy::Random,
                    probed_label: i % 3,
                };
                (qa, image)
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let config = tiny_config();
        let dataset = tiny_dataset(&config, 2, 33);
        let weights = ModelWeights::init(config, &mut SeededRng::new(34)).unwrap();

        // analytic batch gradient (mean over the two samples)
        let mut analytic = ModelWeights::zeros_like(config);
        let mut base_loss = 0.0;
        for (qa, image) in &dataset {
            let (l, g) = loss_and_grad(&weights, qa, image).unwrap();
            base_loss += l;
            accumulate(&mut analytic, &g);
        }
        let scale = 1.0 / dataset.len() as f64;
        base_loss *= scale;
        assert!(base_loss.is_finite());
        let analytic_flat: Vec<f64> = analytic.flatten().iter().map(|g| g * scale).collect();

        // probe a seeded sample of indices in every tensor
        let mut flat = weights.flatten();
        let tensors = weights.tensor_slices();
        let mut offsets = Vec::new();
        let mut off = 0usize;
        for (name, slice) in &tensors {
            offsets.push((name.clone(), off, slice.len()));
            off += slice.len();
        }
        let mut rng = SeededRng::new(35);
        let h = 1e-5;
        let mut scratch = ModelWeights::zeros_like(config);
        for (name, start, len) in offsets {
            for _ in 0..6.min(len) {
                let idx = start + rng.range(len);
                let orig = flat[idx];
                flat[idx] = orig + h;
                scratch.load_flat(&flat).unwrap();
                let lp = batch_loss(&scratch, &dataset).unwrap();
                flat[idx] = orig - h;
                scratch.load_flat(&flat).unwrap();
                let lm = batch_loss(&scratch, &dataset).unwrap();
                flat[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic_flat[idx];
                if fd.abs() < 1e-12 && an.abs() < 1e-12 {
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(
                    rel < 1e-4,
                    "{name}[{idx}]: analytic {an} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let config = tiny_config();
        let dataset = tiny_dataset(&config, 6, 40);
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let hyper = TrainHyper {
                epochs: 1,
                learning_rate: 0.0,
                batch_size: 3,
                seed: 41,
                optimizer,
            };
            let outcome = train(config, &dataset, &hyper).unwrap();
            let init =
                ModelWeights::init(config, &mut SeededRng::new(41).derive_named("init")).unwrap();
            assert_eq!(outcome.weights.fingerprint(), init.fingerprint());
        }
    }

    #[test]
    fn training_reduces_loss() {
        let config = tiny_config();
        let dataset = tiny_dataset(&config, 16, 50);
        let hyper = TrainHyper {
            epochs: 8,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 51,
            optimizer: OptimizerKind::Adam,
        };
        let outcome = train(config, &dataset, &hyper).unwrap();
        let first = outcome.loss_curve[0];
        let final_loss = batch_loss(&outcome.weights, &dataset).unwrap();
        assert!(
            final_loss < first,
            "loss did not decrease: {first} -> {final_loss}"
        );
    }

    #[test]
    fn training_is_seed_deterministic() {
        let config = tiny_config();
        let dataset = tiny_dataset(&config, 10, 60);
        let hyper = TrainHyper {
            epochs: 2,
            learning_rate: 1e-3,
            batch_size: 4,
            seed: 61,
            optimizer: OptimizerKind::Adam,
        };
        let a = train(config, &dataset, &hyper).unwrap();
        let b = train(config, &dataset, &hyper).unwrap();
        assert_eq!(a.weights.fingerprint(), b.weights.fingerprint());
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn divergence_reports_step_index() {
        let config = tiny_config();
        let dataset = tiny_dataset(&config, 8, 70);
        let hyper = TrainHyper {
            epochs: 4,
            learning_rate: 1e160,
            batch_size: 4,
            seed: 71,
            optimizer: OptimizerKind::Sgd,
        };
        match train(config, &dataset, &hyper) {
            Err(Error::TrainingDiverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
