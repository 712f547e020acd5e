//! The generator: keyword encoder, ELSTM decoder, and their parameters.

mod decoder;
mod encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{
    attend, decode_step, elstm_cell, gumbel_noise, memory_read, project, AttnItems, AttnParams, DecoderContext,
    DecoderParams, ElstmOutput, ElstmState, MemoryMode, Projection, StepDiagnostics, StepOutput,
};
pub use encoder::{
    build_memory, encode, init_decoder, sam_encode, DecoderInit, EncodedKeywords, EncoderParams, KeywordInput,
    KeywordMemory, SamParams,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{init_uniform, ParamId, ParamStore, Tape, Var, INIT_SCALE};

/// Ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    /// Drop the keyword-memory read; the output layer sees the word context only.
    pub no_kw_mem: bool,
    /// Replace the ELSTM cell by one standard LSTM and drop the label head.
    pub no_elstm: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        no_kw_mem: false,
        no_elstm: false,
    };

    pub fn name(self) -> &'static str {
        match (self.no_elstm, self.no_kw_mem) {
            (false, false) => "full",
            (false, true) => "no_mem",
            (true, false) => "no_elstm",
            (true, true) => "no_elstm+no_mem",
        }
    }

    /// Parses `full`, `no_mem`, `no_elstm`, or `+`-joined combinations.
    pub fn parse(s: &str) -> Result<Self> {
        let mut v = Variant::default();
        for part in s.split('+').map(str::trim) {
            match part {
                "full" => {}
                "no_mem" | "no_kw_mem" => v.no_kw_mem = true,
                "no_elstm" => v.no_elstm = true,
                other => return Err(Error::Config(format!("unknown variant `{other}`"))),
            }
        }
        Ok(v)
    }

    pub fn has_label_head(self) -> bool {
        !self.no_elstm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding and hidden size, shared by every component.
    pub dim: usize,
    pub vocab_size: usize,
    pub num_labels: usize,
    /// Label fed at the first decoding step and used for padding.
    pub normal_label: usize,
    /// Gumbel-softmax temperature of the memory read.
    pub tau: f64,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.vocab_size < 5 || self.num_labels < 2 {
            return Err(Error::Config(format!(
                "dim {}, vocab {}, labels {} are too small",
                self.dim, self.vocab_size, self.num_labels
            )));
        }
        if self.normal_label >= self.num_labels {
            return Err(Error::Config("normal label out of range".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// `x·W + b`
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.register(format!("{prefix}.w"), init_uniform(&[input, output], INIT_SCALE, rng))?,
            bias: store.register(format!("{prefix}.b"), init_uniform(&[output], INIT_SCALE, rng))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Parameters and configuration of one generator instance.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl<T: Scalar> Model<T> {
    /// Registers and initialises every parameter the variant uses, drawing
    /// from a ChaCha stream seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = EncoderParams::register(&mut params, &config, &mut rng)?;
        let decoder = DecoderParams::register(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    /// Runs the encoder and returns the decoder's per-sequence context and
    /// initial state.
    pub fn prepare(&self, tape: &mut Tape<T>, input: &KeywordInput) -> Result<(DecoderContext, ElstmState)> {
        let (enc, dec) = (&self.encoder, &self.decoder);
        let store = &self.params;
        let encoded = encode(tape, store, enc, input)?;
        let memory = if self.config.variant.no_kw_mem {
            None
        } else {
            Some(build_memory(tape, store, enc, input, &encoded)?)
        };
        let words = dec.attn_w.prepare(tape, store, encoded.words, &input.mask)?;
        let labels = match (&dec.attn_m, encoded.labels) {
            (Some(ap), Some(m)) => Some(ap.prepare(tape, store, m, &input.mask)?),
            _ => None,
        };
        let init = init_decoder(tape, store, enc, input)?;
        let state = ElstmState::initial(tape, init.w0, init.l0);
        let ctx = DecoderContext {
            word_table: tape.param(store, enc.word_emb),
            label_table: enc.label_emb.map(|id| tape.param(store, id)),
            words,
            labels,
            memory,
        };
        Ok((ctx, state))
    }

    /// One decoding step; see [`decode_step`].
    pub fn step(
        &self,
        tape: &mut Tape<T>,
        ctx: &DecoderContext,
        state: &ElstmState,
        y_prev: &[usize],
        m_prev: &[usize],
        mode: MemoryMode,
    ) -> Result<StepOutput> {
        decode_step(
            tape,
            &self.params,
            &self.decoder,
            &self.config,
            ctx,
            state,
            y_prev,
            m_prev,
            mode,
        )
    }

    pub fn census(&self) -> usize {
        self.params.census()
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

#[cfg(test)]
mod tests;
