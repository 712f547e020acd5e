use rand_chacha::ChaCha8Rng;

use super::{Dense, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{init_uniform, lstm_step, LstmParams, ParamId, ParamStore, Tape, Tensor, Var, INIT_SCALE};

/// Padded keyword sets for a batch, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordInput {
    pub batch: usize,
    pub len: usize,
    pub words: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl KeywordInput {
    /// Pads each `(words, labels)` row to the longest one. Padding positions
    /// carry `pad_word` / `pad_label` and a false mask.
    pub fn from_rows(rows: &[(&[usize], &[usize])], pad_word: usize, pad_label: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyAxis { op: "keyword batch" });
        }
        let len = rows.iter().map(|(w, _)| w.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::EmptyAxis { op: "keyword set" });
        }
        let mut out = Self {
            batch: rows.len(),
            len,
            words: Vec::with_capacity(rows.len() * len),
            labels: Vec::with_capacity(rows.len() * len),
            mask: Vec::with_capacity(rows.len() * len),
        };
        for (w, l) in rows {
            if w.len() != l.len() {
                return Err(Error::shape("keyword labels", &[w.len()], &[l.len()]));
            }
            if w.is_empty() {
                return Err(Error::EmptyAxis { op: "keyword set" });
            }
            for i in 0..len {
                out.words.push(w.get(i).copied().unwrap_or(pad_word));
                out.labels.push(l.get(i).copied().unwrap_or(pad_label));
                out.mask.push(i < w.len());
            }
        }
        Ok(out)
    }

    pub fn single(words: &[usize], labels: &[usize]) -> Result<Self> {
        Self::from_rows(&[(words, labels)], 0, 0)
    }

    /// Ids of position `t` across the batch.
    fn column(&self, ids: &[usize], t: usize) -> Vec<usize> {
        (0..self.batch).map(|b| ids[b * self.len + t]).collect()
    }

    /// Attention keep-mask `[B, T, T]`: query `i` sees every unmasked key.
    pub fn padding_keep(&self) -> Vec<bool> {
        let t = self.len;
        let mut keep = Vec::with_capacity(self.batch * t * t);
        for b in 0..self.batch {
            for _ in 0..t {
                keep.extend_from_slice(&self.mask[b * t..(b + 1) * t]);
            }
        }
        keep
    }

    /// Like [`padding_keep`](Self::padding_keep), but a real keyword only sees
    /// keywords of its own category.
    pub fn category_keep(&self) -> Vec<bool> {
        let t = self.len;
        let mut keep = Vec::with_capacity(self.batch * t * t);
        for b in 0..self.batch {
            for i in 0..t {
                for j in 0..t {
                    let (qi, kj) = (b * t + i, b * t + j);
                    let same = !self.mask[qi] || self.labels[qi] == self.labels[kj];
                    keep.push(self.mask[kj] && same);
                }
            }
        }
        keep
    }
}

/// Projections and feed-forward block of one self-attention module.
#[derive(Clone, Copy, Debug)]
pub struct SamParams {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub ff1: Dense,
    pub ff2: Dense,
}

impl SamParams {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            query: Dense::register(store, &format!("{prefix}.q"), d, d, rng)?,
            key: Dense::register(store, &format!("{prefix}.k"), d, d, rng)?,
            value: Dense::register(store, &format!("{prefix}.v"), d, d, rng)?,
            ff1: Dense::register(store, &format!("{prefix}.ff1"), d, d, rng)?,
            ff2: Dense::register(store, &format!("{prefix}.ff2"), d, d, rng)?,
        })
    }
}

/// Single-head self-attention, residual, and feed-forward over `x: [B·T, d]`.
///
/// `keep` is the `[B, T, T]` attention mask. Returns `(h, α)` with
/// `h: [B·T, d]` and `α: [B, T, T]`.
pub fn sam_encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &SamParams,
    x: Var,
    batch: usize,
    len: usize,
    keep: &[bool],
) -> Result<(Var, Var)> {
    let d = tape.shape(x)[1];
    let q = p.query.apply(tape, store, x)?;
    let k = p.key.apply(tape, store, x)?;
    let v = p.value.apply(tape, store, x)?;
    let q = tape.reshape(q, &[batch, len, d])?;
    let k = tape.reshape(k, &[batch, len, d])?;
    let v = tape.reshape(v, &[batch, len, d])?;
    let scores = tape.batch_matmul(q, k, true)?;
    let alpha = tape.masked_softmax(scores, keep)?;
    let beta = tape.batch_matmul(alpha, v, false)?;
    let beta = tape.reshape(beta, &[batch * len, d])?;
    let resid = tape.add(x, beta)?;
    let hidden = p.ff1.apply(tape, store, resid)?;
    let hidden = tape.relu(hidden);
    let h = p.ff2.apply(tape, store, hidden)?;
    Ok((h, alpha))
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub word_emb: ParamId,
    pub label_emb: Option<ParamId>,
    pub word_sam: SamParams,
    pub label_sam: Option<SamParams>,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub init_w: Dense,
    pub init_l: Option<Dense>,
}

impl EncoderParams {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        let v = cfg.variant;
        let word_emb = store.register("enc.word_emb", init_uniform(&[cfg.vocab_size, d], INIT_SCALE, rng))?;
        let label_emb = if !v.no_elstm || !v.no_kw_mem {
            Some(store.register("enc.label_emb", init_uniform(&[cfg.num_labels, d], INIT_SCALE, rng))?)
        } else {
            None
        };
        let word_sam = SamParams::register(store, "enc.word_sam", d, rng)?;
        let label_sam = if v.no_elstm {
            None
        } else {
            Some(SamParams::register(store, "enc.label_sam", d, rng)?)
        };
        let fwd = LstmParams::register(store, "enc.birnn.fwd", d, d, rng)?;
        let bwd = LstmParams::register(store, "enc.birnn.bwd", d, d, rng)?;
        let init_w = Dense::register(store, "enc.init_w", 2 * d, d, rng)?;
        let init_l = if v.no_elstm {
            None
        } else {
            Some(Dense::register(store, "enc.init_l", 2 * d, d, rng)?)
        };
        Ok(Self {
            word_emb,
            label_emb,
            word_sam,
            label_sam,
            fwd,
            bwd,
            init_w,
            init_l,
        })
    }
}

/// Encoder outputs for a batch. Rep tensors are `[B, T, d]`.
#[derive(Clone, Debug)]
pub struct EncodedKeywords {
    pub batch: usize,
    pub len: usize,
    pub mask: Vec<bool>,
    pub word_emb: Var,
    pub label_emb: Option<Var>,
    pub words: Var,
    pub labels: Option<Var>,
    pub word_alpha: Var,
}

/// Key-value store read by the decoder.
#[derive(Clone, Debug)]
pub struct KeywordMemory {
    /// Label embedding table, `[C, d]`.
    pub keys: Var,
    /// Per-keyword memory reps, `[B·T, d]`.
    pub values: Var,
    /// Per-category sums of `values`, `[B, C, d]`.
    pub value_sums: Var,
    /// Keywords per category, `[B·C]`.
    pub counts: Vec<usize>,
    pub num_labels: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderInit {
    pub w0: Var,
    pub l0: Option<Var>,
}

/// Embeds the keywords and runs the word and label self-attention modules.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &EncoderParams,
    input: &KeywordInput,
) -> Result<EncodedKeywords> {
    let (b, t) = (input.batch, input.len);
    let table = tape.param(store, p.word_emb);
    let word_emb = tape.gather(table, &input.words)?;
    let d = tape.shape(word_emb)[1];
    let keep = input.padding_keep();
    let (h, word_alpha) = sam_encode(tape, store, &p.word_sam, word_emb, b, t, &keep)?;
    let words = tape.reshape(h, &[b, t, d])?;

    let label_emb = match p.label_emb {
        Some(id) => {
            let table = tape.param(store, id);
            Some(tape.gather(table, &input.labels)?)
        }
        None => None,
    };
    let labels = match (&p.label_sam, label_emb) {
        (Some(sam), Some(e)) => {
            let (m, _) = sam_encode(tape, store, sam, e, b, t, &keep)?;
            Some(tape.reshape(m, &[b, t, d])?)
        }
        _ => None,
    };
    Ok(EncodedKeywords {
        batch: b,
        len: t,
        mask: input.mask.clone(),
        word_emb,
        label_emb,
        words,
        labels,
        word_alpha,
    })
}

/// Builds the keyword memory: keys are the label embeddings, values are
/// word-SAM reps computed within each category.
pub fn build_memory<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &EncoderParams,
    input: &KeywordInput,
    encoded: &EncodedKeywords,
) -> Result<KeywordMemory> {
    let label_id = p
        .label_emb
        .ok_or_else(|| Error::Config("keyword memory needs label embeddings".into()))?;
    let keys = tape.param(store, label_id);
    let c = tape.shape(keys)[0];
    let d = tape.shape(keys)[1];
    let (b, t) = (input.batch, input.len);
    if let Some(&bad) = input.labels.iter().find(|&&l| l >= c) {
        return Err(Error::Config(format!("label id {bad} out of range for {c} categories")));
    }
    let (values, _) = sam_encode(
        tape,
        store,
        &p.word_sam,
        encoded.word_emb,
        b,
        t,
        &input.category_keep(),
    )?;
    let values3 = tape.reshape(values, &[b, t, d])?;

    let mut membership = vec![T::zero(); b * c * t];
    let mut counts = vec![0usize; b * c];
    for bi in 0..b {
        for j in 0..t {
            let pos = bi * t + j;
            if input.mask[pos] {
                let k = input.labels[pos];
                membership[(bi * c + k) * t + j] = T::one();
                counts[bi * c + k] += 1;
            }
        }
    }
    let membership = tape.constant(Tensor::new(vec![b, c, t], membership)?);
    let value_sums = tape.batch_matmul(membership, values3, false)?;
    Ok(KeywordMemory {
        keys,
        values,
        value_sums,
        counts,
        num_labels: c,
    })
}

/// Bidirectional LSTM over the keyword embeddings; the final states of both
/// directions feed two affine+tanh maps.
pub fn init_decoder<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &EncoderParams,
    input: &KeywordInput,
) -> Result<DecoderInit> {
    let (b, t) = (input.batch, input.len);
    let d = p.fwd.hidden;
    let table = tape.param(store, p.word_emb);
    let zero = tape.constant(Tensor::zeros(&[b, d]));

    let run = |tape: &mut Tape<T>, lstm: &LstmParams, order: &mut dyn Iterator<Item = usize>| -> Result<Var> {
        let (mut h, mut c) = (zero, zero);
        for step in order {
            let x = tape.gather(table, &input.column(&input.words, step))?;
            let (h_new, c_new) = lstm_step(tape, store, lstm, h, c, x)?;
            if (0..b).all(|bi| input.mask[bi * t + step]) {
                h = h_new;
                c = c_new;
            } else {
                let mut gate = Vec::with_capacity(b * d);
                for bi in 0..b {
                    let m = if input.mask[bi * t + step] { T::one() } else { T::zero() };
                    gate.extend(std::iter::repeat(m).take(d));
                }
                let gate = tape.constant(Tensor::new(vec![b, d], gate)?);
                h = tape.blend(gate, h_new, h)?;
                c = tape.blend(gate, c_new, c)?;
            }
        }
        Ok(h)
    };
    let hf = run(tape, &p.fwd, &mut (0..t))?;
    let hb = run(tape, &p.bwd, &mut (0..t).rev())?;
    let both = tape.concat(&[hf, hb])?;
    let w0 = p.init_w.apply(tape, store, both)?;
    let w0 = tape.tanh(w0);
    let l0 = match &p.init_l {
        Some(dense) => {
            let l = dense.apply(tape, store, both)?;
            Some(tape.tanh(l))
        }
        None => None,
    };
    Ok(DecoderInit { w0, l0 })
}
