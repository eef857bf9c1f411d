use crate::adapters::{AdaptationMode, LayerGrads, LayerParam, RetainedActivations};
use crate::error::{dim_err, Error, Result};
use crate::optim::Grads;
use crate::tensor::{
    add, cross_entropy, cross_entropy_backward, forward, matmul, matmul_nt, matmul_tn, vjp, OpKind,
    Saved, Slot, Tensor,
};

use super::{LinearSlot, NormSite, ParamId, TransformerModel, LAYER_NORM_EPS};

/// A `b×s` batch of token ids with per-position targets (`None` = unscored).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, targets: Vec<Option<usize>>, batch: usize, seq: usize) -> Result<Self> {
        if tokens.len() != batch * seq || targets.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(dim_err(
                "TokenBatch",
                format!("{} tokens, {} targets for {batch}x{seq}", tokens.len(), targets.len()),
            ));
        }
        Ok(Self {
            tokens,
            targets,
            batch,
            seq,
        })
    }
}

/// How a retained tensor is accounted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    /// Full-width input kept by a linear layer.
    LinearFull,
    /// Rank-`r` product `x·A` kept by an adapter.
    LinearLowRank,
    /// Attention, norm, GeLU, and loss-head saves.
    Other,
}

/// One retained tensor, attributed to the layer that holds it.
#[derive(Clone, Debug)]
pub struct RetainedTensor<'a> {
    pub category: Category,
    /// Owning block and linear slot, for linear-layer tensors.
    pub layer: Option<(usize, LinearSlot)>,
    pub tensor: &'a Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct BlockTape {
    norm_attn: Saved,
    query: RetainedActivations,
    key: RetainedActivations,
    value: RetainedActivations,
    attention: Saved,
    output: RetainedActivations,
    norm_ffn: Saved,
    ffn_up: RetainedActivations,
    gelu: Saved,
    ffn_down: RetainedActivations,
}

impl BlockTape {
    pub fn linear(&self, slot: LinearSlot) -> &RetainedActivations {
        match slot {
            LinearSlot::Query => &self.query,
            LinearSlot::Key => &self.key,
            LinearSlot::Value => &self.value,
            LinearSlot::Output => &self.output,
            LinearSlot::FfnUp => &self.ffn_up,
            LinearSlot::FfnDown => &self.ffn_down,
        }
    }
}

/// Everything a forward pass kept for backward, per the model's mode.
#[derive(Clone, Debug)]
pub struct Tape {
    mode: AdaptationMode,
    batch: TokenBatch,
    loss: f64,
    blocks: Vec<BlockTape>,
    norm_final: Saved,
    /// Input to the tied output head; only needed when the embedding trains.
    head_input: Option<Tensor>,
    probs: Option<Tensor>,
}

impl Tape {
    pub fn mode(&self) -> AdaptationMode {
        self.mode
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn batch(&self) -> &TokenBatch {
        &self.batch
    }

    pub fn blocks(&self) -> &[BlockTape] {
        &self.blocks
    }

    /// Every retained activation. A buffer held by several layers appears
    /// once per holder; deduplicate with [`Tensor::buffer_id`].
    pub fn retained(&self) -> Vec<RetainedTensor<'_>> {
        let mut out = Vec::new();
        fn push_saved<'a>(s: &'a Saved, out: &mut Vec<RetainedTensor<'a>>) {
            for (slot, t) in s.tensors() {
                // parameters, not activations
                if slot == Slot::Gamma {
                    continue;
                }
                out.push(RetainedTensor {
                    category: Category::Other,
                    layer: None,
                    tensor: t,
                });
            }
        }
        for (b, bt) in self.blocks.iter().enumerate() {
            push_saved(&bt.norm_attn, &mut out);
            push_saved(&bt.attention, &mut out);
            push_saved(&bt.norm_ffn, &mut out);
            push_saved(&bt.gelu, &mut out);
            for slot in LinearSlot::ALL {
                let kept = bt.linear(slot);
                if let Ok(t) = kept.full_input() {
                    out.push(RetainedTensor {
                        category: Category::LinearFull,
                        layer: Some((b, slot)),
                        tensor: t,
                    });
                }
                if let Ok(t) = kept.low_rank_input() {
                    out.push(RetainedTensor {
                        category: Category::LinearLowRank,
                        layer: Some((b, slot)),
                        tensor: t,
                    });
                }
            }
        }
        push_saved(&self.norm_final, &mut out);
        for t in self.head_input.iter().chain(self.probs.iter()) {
            out.push(RetainedTensor {
                category: Category::Other,
                layer: None,
                tensor: t,
            });
        }
        out
    }
}

fn norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor, retain: bool) -> Result<(Tensor, Saved)> {
    let (y, saved) = forward(&OpKind::LayerNorm { eps: LAYER_NORM_EPS }, &[x, gain, bias])?;
    Ok((y, if retain { saved } else { Saved::default() }))
}

impl TransformerModel {
    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        let c = &self.config;
        if batch.seq > c.seq_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds model maximum {}",
                batch.seq, c.seq_len
            )));
        }
        let bad_token = batch.tokens.iter().find(|&&t| t >= c.vocab);
        let bad_target = batch.targets.iter().flatten().find(|&&t| t >= c.vocab);
        if let Some(t) = bad_token.or(bad_target) {
            return Err(Error::Data(format!("token id {t} outside vocabulary of {}", c.vocab)));
        }
        Ok(())
    }

    fn embed(&self, batch: &TokenBatch) -> Result<Tensor> {
        let d = self.config.d;
        let (e, p) = (self.token_embedding.data(), self.position_embedding.data());
        let mut x = vec![0.0; batch.tokens.len() * d];
        for (i, &tok) in batch.tokens.iter().enumerate() {
            let pos = i % batch.seq;
            let row = &mut x[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] = e[tok * d + j] + p[pos * d + j];
            }
        }
        Tensor::new(vec![batch.batch, batch.seq, d], x)
    }

    /// Output logits `[b, s, vocab]` without keeping anything for backward.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        Ok(self.run(batch, false)?.0)
    }

    /// Mean cross-entropy over scored positions, plus the tape backward needs.
    pub fn forward_loss(&self, batch: &TokenBatch) -> Result<(f64, Tape)> {
        self.check_batch(batch)?;
        let (_, tape) = self.run(batch, self.mode.trains_anything())?;
        Ok((tape.loss, tape))
    }

    fn run(&self, batch: &TokenBatch, retain: bool) -> Result<(Tensor, Tape)> {
        let heads = self.config.heads;
        let mut h = self.embed(batch)?;
        let mut block_tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut bt = BlockTape::default();
            let (a, s) = norm_forward(&h, &block.norm_attn.gain, &block.norm_attn.bias, retain)?;
            bt.norm_attn = s;
            let (q, kq) = block.query.forward(&a)?;
            let (k, kk) = block.key.forward(&a)?;
            let (v, kv) = block.value.forward(&a)?;
            let (o, s) = forward(&OpKind::CausalAttention { heads }, &[&q, &k, &v])?;
            let (attn, ko) = block.output.forward(&o)?;
            h = add(&h, &attn)?;

            let (f_in, s_ffn) = norm_forward(&h, &block.norm_ffn.gain, &block.norm_ffn.bias, retain)?;
            let (u, k_up) = block.ffn_up.forward(&f_in)?;
            let (g, s_gelu) = forward(&OpKind::Gelu, &[&u])?;
            let (f, k_down) = block.ffn_down.forward(&g)?;
            h = add(&h, &f)?;
            if retain {
                bt.query = kq;
                bt.key = kk;
                bt.value = kv;
                bt.attention = s;
                bt.output = ko;
                bt.norm_ffn = s_ffn;
                bt.ffn_up = k_up;
                bt.gelu = s_gelu;
                bt.ffn_down = k_down;
            }
            block_tapes.push(bt);
        }
        let (hf, norm_final) = norm_forward(&h, &self.norm_final.gain, &self.norm_final.bias, retain)?;
        let logits = matmul_nt(&hf, &self.token_embedding)?;
        let (loss, probs) = cross_entropy(&logits, &batch.targets)?;
        let tape = Tape {
            mode: self.mode,
            batch: batch.clone(),
            loss,
            blocks: block_tapes,
            norm_final,
            head_input: (retain && self.mode == AdaptationMode::Ft).then_some(hf),
            probs: retain.then_some(probs),
        };
        Ok((logits, tape))
    }

    /// Gradients for exactly the mode's trainable parameters.
    pub fn backward(&self, tape: &Tape) -> Result<Grads<ParamId>> {
        let mut grads = Grads::new();
        if tape.mode != self.mode {
            return Err(Error::Mode(format!("tape from a {} model, model is {}", tape.mode, self.mode)));
        }
        if !self.mode.trains_anything() {
            return Ok(grads);
        }
        if tape.blocks.len() != self.blocks.len() {
            return Err(dim_err("backward", "tape does not match model depth"));
        }
        let ft = self.mode == AdaptationMode::Ft;
        let probs = tape
            .probs
            .as_ref()
            .ok_or_else(|| Error::RetentionPolicy("loss-head probabilities were not retained".into()))?;
        let dlogits = cross_entropy_backward(probs, &tape.batch.targets)?;
        let dhf = matmul(&dlogits, &self.token_embedding)?;
        let mut d_embedding = None;
        if ft {
            let hf = tape
                .head_input
                .as_ref()
                .ok_or_else(|| Error::RetentionPolicy("output-head input was not retained".into()))?;
            d_embedding = Some(matmul_tn(&dlogits, hf)?);
        }
        let norm_wants = [true, ft, ft];
        let g = vjp(&OpKind::LayerNorm { eps: LAYER_NORM_EPS }, &tape.norm_final, &dhf, &norm_wants)?;
        let mut dh = take_norm(&mut grads, g, NormSite::Final)?;

        for (bi, (block, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let (dg, gr) = block.ffn_down.backward(&bt.ffn_down, &dh)?;
            insert_layer(&mut grads, bi, LinearSlot::FfnDown, gr);
            let du = vjp(&OpKind::Gelu, &bt.gelu, &dg, &[true])?.remove(0).expect("requested");
            let (df_in, gr) = block.ffn_up.backward(&bt.ffn_up, &du)?;
            insert_layer(&mut grads, bi, LinearSlot::FfnUp, gr);
            let g = vjp(&OpKind::LayerNorm { eps: LAYER_NORM_EPS }, &bt.norm_ffn, &df_in, &norm_wants)?;
            dh = add(&dh, &take_norm(&mut grads, g, NormSite::Ffn(bi))?)?;

            let (d_o, gr) = block.output.backward(&bt.output, &dh)?;
            insert_layer(&mut grads, bi, LinearSlot::Output, gr);
            let mut dqkv = vjp(
                &OpKind::CausalAttention { heads: self.config.heads },
                &bt.attention,
                &d_o,
                &[true, true, true],
            )?
            .into_iter()
            .map(|g| g.expect("requested"));
            let (dq, dk, dv) = (dqkv.next().unwrap(), dqkv.next().unwrap(), dqkv.next().unwrap());
            let (da_q, gr) = block.query.backward(&bt.query, &dq)?;
            insert_layer(&mut grads, bi, LinearSlot::Query, gr);
            let (da_k, gr) = block.key.backward(&bt.key, &dk)?;
            insert_layer(&mut grads, bi, LinearSlot::Key, gr);
            let (da_v, gr) = block.value.backward(&bt.value, &dv)?;
            insert_layer(&mut grads, bi, LinearSlot::Value, gr);
            let da = add(&add(&da_q, &da_k)?, &da_v)?;
            let g = vjp(&OpKind::LayerNorm { eps: LAYER_NORM_EPS }, &bt.norm_attn, &da, &norm_wants)?;
            dh = add(&dh, &take_norm(&mut grads, g, NormSite::Attention(bi))?)?;
        }

        if ft {
            let d = self.config.d;
            let mut de = d_embedding.expect("set for ft").into_vec();
            let mut dp = vec![0.0; self.position_embedding.numel()];
            let batch = &tape.batch;
            for (i, (&tok, row)) in batch.tokens.iter().zip(dh.data().chunks(d)).enumerate() {
                let pos = i % batch.seq;
                for j in 0..d {
                    de[tok * d + j] += row[j];
                    dp[pos * d + j] += row[j];
                }
            }
            grads.insert(ParamId::TokenEmbedding, Tensor::new(self.token_embedding.shape().to_vec(), de)?);
            grads.insert(ParamId::PositionEmbedding, Tensor::new(self.position_embedding.shape().to_vec(), dp)?);
        }
        Ok(grads)
    }
}

fn take_norm(grads: &mut Grads<ParamId>, g: Vec<Option<Tensor>>, site: NormSite) -> Result<Tensor> {
    let mut it = g.into_iter();
    let dx = it.next().flatten().ok_or_else(|| dim_err("layer_norm", "missing input gradient"))?;
    if let Some(gain) = it.next().flatten() {
        grads.insert(ParamId::NormGain(site), gain);
    }
    if let Some(bias) = it.next().flatten() {
        grads.insert(ParamId::NormBias(site), bias);
    }
    Ok(dx)
}

fn insert_layer(grads: &mut Grads<ParamId>, block: usize, slot: LinearSlot, g: LayerGrads) {
    for (p, t) in [
        (LayerParam::Weight, g.weight),
        (LayerParam::Down, g.down),
        (LayerParam::Up, g.up),
    ] {
        if let Some(t) = t {
            grads.insert(ParamId::Linear(block, slot, p), t);
        }
    }
}
