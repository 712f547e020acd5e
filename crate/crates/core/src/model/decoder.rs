use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::KeywordMemory;
use super::{Dense, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{init_uniform, lstm_step, LstmParams, ParamId, ParamStore, Tape, Tensor, Var, INIT_SCALE};

/// Additive attention `W_a·tanh(W_b·query + W_h·item)`.
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wa: ParamId,
    pub wb: ParamId,
    pub wh: ParamId,
}

impl AttnParams {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            wa: store.register(format!("{prefix}.wa"), init_uniform(&[d, 1], INIT_SCALE, rng))?,
            wb: store.register(format!("{prefix}.wb"), init_uniform(&[d, d], INIT_SCALE, rng))?,
            wh: store.register(format!("{prefix}.wh"), init_uniform(&[d, d], INIT_SCALE, rng))?,
        })
    }

    /// Projects the items once so every decoding step reuses `W_h·item`.
    pub fn prepare<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        items: Var,
        mask: &[bool],
    ) -> Result<AttnItems> {
        let s = tape.shape(items).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::shape("attend", &s, &[mask.len()]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let wh = tape.param(store, self.wh);
        let flat = tape.reshape(items, &[b * t, d])?;
        let proj = tape.matmul(flat, wh)?;
        let a = tape.shape(proj)[1];
        let proj = tape.reshape(proj, &[b, t, a])?;
        Ok(AttnItems {
            items,
            proj,
            keep: mask.to_vec(),
            batch: b,
            len: t,
        })
    }
}

/// Items of one attention, `[B, T, d]`, with their cached projection.
#[derive(Clone, Debug)]
pub struct AttnItems {
    pub items: Var,
    pub proj: Var,
    pub keep: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Returns the context `[B, d]` and weights `[B, T]` for `query: [B, d]`.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &AttnParams,
    query: Var,
    items: &AttnItems,
) -> Result<(Var, Var)> {
    let (b, t) = (items.batch, items.len);
    let wa = tape.param(store, p.wa);
    let wb = tape.param(store, p.wb);
    let q = tape.matmul(query, wb)?;
    let q = tape.expand_mid(q, t)?;
    let z = tape.add(q, items.proj)?;
    let z = tape.tanh(z);
    let a = tape.shape(z)[2];
    let z = tape.reshape(z, &[b * t, a])?;
    let scores = tape.matmul(z, wa)?;
    let scores = tape.reshape(scores, &[b, t])?;
    let weights = tape.masked_softmax(scores, &items.keep)?;
    let context = tape.weighted_rows(weights, items.items)?;
    Ok((context, weights))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    /// Plain softmax over the key scores.
    Eval,
    /// Gumbel noise drawn from ChaCha stream `stream` of `seed`.
    Train { seed: u64, stream: u64 },
}

/// `−ln(−ln u)` with `u ~ U(0, 1)`, shape `[batch, n]`.
pub fn gumbel_noise<T: Scalar>(seed: u64, stream: u64, batch: usize, n: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..batch * n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            T::of(-(-u.ln()).ln())
        })
        .collect();
    Tensor::new(vec![batch, n], data).expect("noise shape")
}

/// Gumbel-softmax read of the keyword memory with `query: [B, d]`.
/// Returns `(o′ [B, d], π [B, C])`.
#[allow(clippy::too_many_arguments)]
pub fn memory_read<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    wg: ParamId,
    query: Var,
    memory: &KeywordMemory,
    tau: f64,
    mode: MemoryMode,
) -> Result<(Var, Var)> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    let b = tape.shape(query)[0];
    let c = memory.num_labels;
    let w = tape.param(store, wg);
    let projected = tape.matmul(query, w)?;
    let d = tape.shape(projected)[1];
    let projected = tape.reshape(projected, &[1, b, d])?;
    let keys = tape.reshape(memory.keys, &[1, c, d])?;
    let scores = tape.batch_matmul(projected, keys, true)?;
    let mut scores = tape.reshape(scores, &[b, c])?;
    if let MemoryMode::Train { seed, stream } = mode {
        let noise = tape.constant(gumbel_noise(seed, stream, b, c));
        scores = tape.add(scores, noise)?;
    }
    let scaled = tape.scale(scores, T::of(1.0 / tau));
    let pi = tape.softmax(scaled)?;
    let read = tape.weighted_rows(pi, memory.value_sums)?;
    Ok((read, pi))
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub word_lstm0: LstmParams,
    pub label_lstm: Option<LstmParams>,
    pub polish: Option<Dense>,
    pub word_lstm1: Option<LstmParams>,
    pub gate: Option<Dense>,
    pub attn_m: Option<AttnParams>,
    pub attn_w: AttnParams,
    pub mem_wg: Option<ParamId>,
    pub out_gate: Option<Dense>,
    pub out_v: Dense,
    pub out_e: Option<Dense>,
}

impl DecoderParams {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        let elstm = !cfg.variant.no_elstm;
        let mem = !cfg.variant.no_kw_mem;
        let word_lstm0 = LstmParams::register(store, "dec.word_lstm0", d, d, rng)?;
        let (label_lstm, polish, word_lstm1, gate, attn_m) = if elstm {
            (
                Some(LstmParams::register(store, "dec.label_lstm", d, d, rng)?),
                Some(Dense::register(store, "dec.polish", 2 * d, d, rng)?),
                Some(LstmParams::register(store, "dec.word_lstm1", d, d, rng)?),
                Some(Dense::register(store, "dec.gate", 2 * d, d, rng)?),
                Some(AttnParams::register(store, "dec.attn_m", d, rng)?),
            )
        } else {
            (None, None, None, None, None)
        };
        let attn_w = AttnParams::register(store, "dec.attn_w", d, rng)?;
        let (mem_wg, out_gate) = if mem {
            (
                Some(store.register("dec.mem.wg", init_uniform(&[d, d], INIT_SCALE, rng))?),
                Some(Dense::register(store, "dec.out_gate", 2 * d, d, rng)?),
            )
        } else {
            (None, None)
        };
        let out_v = Dense::register(store, "dec.out_v", 2 * d, cfg.vocab_size, rng)?;
        let out_e = if elstm {
            Some(Dense::register(store, "dec.out_e", 2 * d, cfg.num_labels, rng)?)
        } else {
            None
        };
        Ok(Self {
            word_lstm0,
            label_lstm,
            polish,
            word_lstm1,
            gate,
            attn_m,
            attn_w,
            mem_wg,
            out_gate,
            out_v,
            out_e,
        })
    }
}

/// Recurrent state carried between decoding steps; all tensors `[B, d]`.
/// The label-side fields are `None` when the cell is a plain LSTM.
#[derive(Clone, Debug)]
pub struct ElstmState {
    pub w: Var,
    pub c0: Var,
    pub l: Option<Var>,
    pub cl: Option<Var>,
    pub c1: Option<Var>,
    pub cm: Option<Var>,
}

impl ElstmState {
    /// Zero cells and zero label context around the given hidden states.
    pub fn initial<T: Scalar>(tape: &mut Tape<T>, w0: Var, l0: Option<Var>) -> Self {
        let shape = tape.shape(w0).to_vec();
        let zero = tape.constant(Tensor::zeros(&shape));
        let label = l0.map(|_| zero);
        Self {
            w: w0,
            c0: zero,
            l: l0,
            cl: label,
            c1: label,
            cm: label,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ElstmOutput {
    /// Hidden state of the first word LSTM.
    pub w_prime: Var,
    pub w_next: Var,
    pub c0: Var,
    /// Label LSTM output before polishing.
    pub l_prime: Option<Var>,
    pub l_next: Option<Var>,
    pub cl: Option<Var>,
    pub w1: Option<Var>,
    pub c1: Option<Var>,
    pub gate_gamma: Option<Var>,
}

/// One ELSTM cell update. With `no_elstm` parameters (no label LSTM) this is
/// a single word LSTM and `m_emb` is ignored.
pub fn elstm_cell<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &DecoderParams,
    state: &ElstmState,
    y_emb: Var,
    m_emb: Option<Var>,
) -> Result<ElstmOutput> {
    let (w_prime, c0) = lstm_step(tape, store, &p.word_lstm0, state.w, state.c0, y_emb)?;
    let (Some(label_lstm), Some(polish), Some(lstm1), Some(gate)) = (&p.label_lstm, &p.polish, &p.word_lstm1, &p.gate)
    else {
        return Ok(ElstmOutput {
            w_prime,
            w_next: w_prime,
            c0,
            l_prime: None,
            l_next: None,
            cl: None,
            w1: None,
            c1: None,
            gate_gamma: None,
        });
    };
    let missing = || Error::Config("ELSTM cell needs label state and label input".into());
    let (l, cl, c1, cm) = (
        state.l.ok_or_else(missing)?,
        state.cl.ok_or_else(missing)?,
        state.c1.ok_or_else(missing)?,
        state.cm.ok_or_else(missing)?,
    );
    let m_emb = m_emb.ok_or_else(missing)?;

    let label_in = tape.add(m_emb, w_prime)?;
    let (l_prime, cl) = lstm_step(tape, store, label_lstm, l, cl, label_in)?;
    let polish_in = tape.concat(&[l_prime, cm])?;
    let l_next = polish.apply(tape, store, polish_in)?;
    let l_next = tape.tanh(l_next);
    let word_in = tape.add(y_emb, l_next)?;
    let (w1, c1) = lstm_step(tape, store, lstm1, state.w, c1, word_in)?;
    let gate_in = tape.concat(&[w1, w_prime])?;
    let g = gate.apply(tape, store, gate_in)?;
    let g = tape.sigmoid(g);
    let w_next = tape.blend(g, w1, w_prime)?;
    Ok(ElstmOutput {
        w_prime,
        w_next,
        c0,
        l_prime: Some(l_prime),
        l_next: Some(l_next),
        cl: Some(cl),
        w1: Some(w1),
        c1: Some(c1),
        gate_gamma: Some(g),
    })
}

#[derive(Clone, Debug)]
pub struct Projection {
    /// Log-probabilities over the vocabulary, `[B, V]`.
    pub log_pv: Var,
    /// Log-probabilities over entity labels, `[B, C]`.
    pub log_pe: Option<Var>,
    /// Fused memory/context vector fed to the vocabulary head.
    pub fused: Var,
    pub out_gate: Option<Var>,
}

/// Output heads. Without a memory read (`o_prime = None`) the word context
/// feeds the vocabulary head directly.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &DecoderParams,
    o_prime: Option<Var>,
    cw: Var,
    w_next: Var,
    l_prime: Option<Var>,
    cm_next: Option<Var>,
) -> Result<Projection> {
    let (fused, out_gate) = match (o_prime, &p.out_gate) {
        (Some(o), Some(gate)) => {
            let gi = tape.concat(&[o, cw])?;
            let g = gate.apply(tape, store, gi)?;
            let g = tape.sigmoid(g);
            (tape.blend(g, o, cw)?, Some(g))
        }
        _ => (cw, None),
    };
    let vin = tape.concat(&[fused, w_next])?;
    let logits_v = p.out_v.apply(tape, store, vin)?;
    let log_pv = tape.log_softmax(logits_v);
    let log_pe = match (&p.out_e, l_prime, cm_next) {
        (Some(head), Some(l), Some(cm)) => {
            let ein = tape.concat(&[l, cm])?;
            let logits_e = head.apply(tape, store, ein)?;
            Some(tape.log_softmax(logits_e))
        }
        _ => None,
    };
    Ok(Projection {
        log_pv,
        log_pe,
        fused,
        out_gate,
    })
}

/// Per-step quantities exposed for tracing and testing.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub attn_w: Var,
    pub attn_m: Option<Var>,
    pub pi: Option<Var>,
    pub gate_gamma: Option<Var>,
    pub out_gate: Option<Var>,
    /// `[w1, w′, w_next]`: the gated word-state blend and its two inputs.
    pub word_fusion: Option<[Var; 3]>,
    /// `[o′, c^w, fused]`: the gated memory/context blend and its two inputs.
    pub memory_fusion: Option<[Var; 3]>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub log_pv: Var,
    pub log_pe: Option<Var>,
    pub state: ElstmState,
    pub diagnostics: StepDiagnostics,
}

/// Per-sequence tensors the decoder reads at every step.
#[derive(Clone, Debug)]
pub struct DecoderContext {
    pub word_table: Var,
    pub label_table: Option<Var>,
    pub words: AttnItems,
    pub labels: Option<AttnItems>,
    pub memory: Option<KeywordMemory>,
}

/// One decoding step from `(y_prev, m_prev)` ids, one per batch row.
#[allow(clippy::too_many_arguments)]
pub fn decode_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &DecoderParams,
    cfg: &ModelConfig,
    ctx: &DecoderContext,
    state: &ElstmState,
    y_prev: &[usize],
    m_prev: &[usize],
    mode: MemoryMode,
) -> Result<StepOutput> {
    let y_emb = tape.gather(ctx.word_table, y_prev)?;
    let m_emb = match (ctx.label_table, p.label_lstm.is_some()) {
        (Some(table), true) => Some(tape.gather(table, m_prev)?),
        _ => None,
    };
    let cell = elstm_cell(tape, store, p, state, y_emb, m_emb)?;

    let (cm_next, attn_m) = match (&p.attn_m, &ctx.labels, cell.l_next) {
        (Some(ap), Some(items), Some(l)) => {
            let (c, a) = attend(tape, store, ap, l, items)?;
            (Some(c), Some(a))
        }
        _ => (None, None),
    };
    let (cw, attn_w) = attend(tape, store, &p.attn_w, cell.w_next, &ctx.words)?;

    let (o_prime, pi) = match (p.mem_wg, &ctx.memory) {
        (Some(wg), Some(memory)) => {
            let query = cell.l_next.unwrap_or(cell.w_next);
            let (o, pi) = memory_read(tape, store, wg, query, memory, cfg.tau, mode)?;
            (Some(o), Some(pi))
        }
        _ => (None, None),
    };
    let proj = project(tape, store, p, o_prime, cw, cell.w_next, cell.l_prime, cm_next)?;
    let word_fusion = cell.w1.map(|w1| [w1, cell.w_prime, cell.w_next]);
    let memory_fusion = o_prime.filter(|_| proj.out_gate.is_some()).map(|o| [o, cw, proj.fused]);

    Ok(StepOutput {
        log_pv: proj.log_pv,
        log_pe: proj.log_pe,
        state: ElstmState {
            w: cell.w_next,
            c0: cell.c0,
            l: cell.l_next,
            cl: cell.cl,
            c1: cell.c1,
            cm: cm_next,
        },
        diagnostics: StepDiagnostics {
            attn_w,
            attn_m,
            pi,
            gate_gamma: cell.gate_gamma,
            out_gate: proj.out_gate,
            word_fusion,
            memory_fusion,
        },
    })
}
