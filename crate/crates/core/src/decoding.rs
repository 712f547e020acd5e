//! Greedy and beam-search generation.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, Sample, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{ElstmState, KeywordInput, MemoryMode, Model};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use crate::training::argmax;

pub const GENERATIONS_FORMAT: &str = "fpdg-generations";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Beam width; 0 selects greedy decoding.
    pub beam: usize,
    /// Minimum number of tokens before EOS may be emitted.
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            min_len: 15,
            max_len: 70,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(self) -> Self {
        Self { beam: 0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length bounds {}..={} are empty",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Decoder diagnostics for one emitted token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub token: usize,
    pub label: usize,
    pub attn_gamma_w: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attn_gamma_m: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_gamma: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_gate: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Emitted tokens, without EOS.
    pub tokens: Vec<usize>,
    /// Entity label fed back after each token.
    pub labels: Vec<usize>,
    /// Sum of the chosen tokens' log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    pub trace: Vec<StepTrace>,
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    labels: Vec<usize>,
    score: f64,
    state: ElstmState,
    trace: Vec<StepTrace>,
}

struct Expansion {
    log_pv: Vec<f64>,
    label: usize,
    state: ElstmState,
    trace: Option<StepTrace>,
}

fn values<T: Scalar>(tape: &Tape<T>, v: Var) -> Vec<f64> {
    tape.value(v).to_f64_vec()
}

/// Runs one noise-free step for a single hypothesis and returns its masked
/// vocabulary log-probabilities.
fn expand<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    ctx: &crate::model::DecoderContext,
    hyp: &Hypothesis,
    cfg: &DecodeConfig,
    trace: bool,
) -> Result<Expansion> {
    let y = *hyp.tokens.last().unwrap_or(&BOS);
    let m = *hyp.labels.last().unwrap_or(&model.config.normal_label);
    let out = model.step(tape, ctx, &hyp.state, &[y], &[m], MemoryMode::Eval)?;
    let mut log_pv = values(tape, out.log_pv);
    log_pv[PAD] = f64::NEG_INFINITY;
    log_pv[BOS] = f64::NEG_INFINITY;
    if hyp.tokens.len() < cfg.min_len {
        log_pv[EOS] = f64::NEG_INFINITY;
    }
    let label = match out.log_pe {
        Some(pe) => argmax(tape.value(pe).data()),
        None => model.config.normal_label,
    };
    let trace = trace.then(|| {
        let d = &out.diagnostics;
        StepTrace {
            step: hyp.tokens.len(),
            token: 0,
            label,
            attn_gamma_w: values(tape, d.attn_w),
            attn_gamma_m: d.attn_m.map(|v| values(tape, v)),
            pi: d.pi.map(|v| values(tape, v)),
            gate_gamma: d.gate_gamma.map(|v| values(tape, v)),
            output_gate: d.out_gate.map(|v| values(tape, v)),
        }
    });
    Ok(Expansion {
        log_pv,
        label,
        state: out.state,
        trace,
    })
}

/// Token ids sorted by log-probability, best first; ties go to the lower id.
fn ranked(log_pv: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..log_pv.len()).filter(|&i| log_pv[i] > f64::NEG_INFINITY).collect();
    ids.sort_by(|&a, &b| log_pv[b].partial_cmp(&log_pv[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    ids
}

/// Generates a description for one keyword set. `cfg.beam` of 0 or 1 both
/// reduce to picking the single best token per step.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    keywords: &[usize],
    labels: &[usize],
    cfg: &DecodeConfig,
    trace: bool,
) -> Result<Generation> {
    cfg.validate()?;
    let input = KeywordInput::single(keywords, labels)?;
    let mut tape = Tape::inference();
    let (ctx, state) = model.prepare(&mut tape, &input)?;
    let width = cfg.beam.max(1);

    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        labels: Vec::new(),
        score: 0.0,
        state,
        trace: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !beam.is_empty() {
        // (score, token, parent, label, state, trace)
        let mut candidates = Vec::new();
        for (h, hyp) in beam.iter().enumerate() {
            let ex = expand(model, &mut tape, &ctx, hyp, cfg, trace)?;
            for tok in ranked(&ex.log_pv).into_iter().take(width) {
                candidates.push((hyp.score + ex.log_pv[tok], tok, h, ex.label, ex.state.clone(), ex.trace.clone()));
            }
        }
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(width);

        let mut next = Vec::with_capacity(width);
        for (score, tok, parent, label, state, step_trace) in candidates {
            let mut hyp = beam[parent].clone();
            hyp.score = score;
            hyp.state = state;
            if let Some(mut st) = step_trace {
                st.token = tok;
                hyp.trace.push(st);
            }
            if tok == EOS {
                finished.push(hyp);
                continue;
            }
            hyp.tokens.push(tok);
            hyp.labels.push(label);
            if hyp.tokens.len() >= cfg.max_len {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        beam = next;
    }

    let best = finished
        .into_iter()
        .map(|h| {
            let norm = h.score / h.tokens.len().max(1) as f64;
            (norm, h)
        })
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(b.1.tokens.cmp(&a.1.tokens)))
        .map(|(_, h)| h)
        .ok_or(Error::EmptyAxis { op: "beam search" })?;
    Ok(Generation {
        tokens: best.tokens,
        labels: best.labels,
        log_prob: best.score,
        trace: best.trace,
    })
}

/// One line of a generations file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: usize,
    pub keywords: Vec<String>,
    pub reference: Vec<String>,
    pub generated: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<StepTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    count: usize,
}

/// Generates for every sample, in order. `ids` name the samples in the output.
pub fn batch_generate<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    schema: &AttributeSchema,
    samples: &[Sample],
    ids: &[usize],
    cfg: &DecodeConfig,
    trace: bool,
) -> Result<Vec<GenerationRecord>> {
    if ids.len() != samples.len() {
        return Err(Error::shape("batch_generate", &[samples.len()], &[ids.len()]));
    }
    samples
        .iter()
        .zip(ids)
        .map(|(s, &id)| {
            let wrap = |e: Error| Error::Sample {
                index: id,
                source: Box::new(e),
            };
            let labels = s.keyword_label_ids(schema).map_err(wrap)?;
            let g = generate(model, &vocab.encode(&s.keywords), &labels, cfg, trace).map_err(wrap)?;
            Ok(GenerationRecord {
                id,
                keywords: s.keywords.clone(),
                reference: s.description.clone(),
                generated: vocab.decode(&g.tokens),
                trace: g.trace,
            })
        })
        .collect()
}

/// JSON lines: a `{"format", "count"}` header, then one record per line.
pub fn write_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: GENERATIONS_FORMAT.into(),
        count: records.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (i, r) in records.iter().enumerate() {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Sample {
            index: i,
            source: Box::new(e.into()),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != GENERATIONS_FORMAT {
        return Err(parse_err(1, format!("unexpected format `{}`", header.format)));
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?);
    }
    if out.len() != header.count {
        return Err(parse_err(
            1,
            format!("header announces {} records, found {}", header.count, out.len()),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_schema, generate_corpus};
    use crate::model::{ModelConfig, Variant};

    fn setup(variant: Variant) -> (Model<f64>, Vocab, AttributeSchema, Vec<Sample>) {
        let schema = default_schema();
        let corpus = generate_corpus(&schema, 6, 2).unwrap();
        let vocab = Vocab::build(&corpus).unwrap();
        let cfg = ModelConfig {
            dim: 8,
            vocab_size: vocab.len(),
            num_labels: schema.num_categories(),
            normal_label: schema.normal(),
            tau: 0.5,
            variant,
        };
        (Model::new(cfg, 1).unwrap(), vocab, schema, corpus)
    }

    fn gen(model: &Model<f64>, vocab: &Vocab, schema: &AttributeSchema, s: &Sample, cfg: DecodeConfig) -> Generation {
        generate(model, &vocab.encode(&s.keywords), &s.keyword_label_ids(schema).unwrap(), &cfg, false).unwrap()
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        assert_eq!(ranked(&[0.0, -1.0, 0.0, f64::NEG_INFINITY, -0.5]), vec![0, 2, 4, 1]);
    }

    #[test]
    fn beam_of_one_is_greedy_and_lengths_hold() {
        for v in ["full", "no_elstm+no_mem"] {
            let (model, vocab, schema, corpus) = setup(Variant::parse(v).unwrap());
            for s in &corpus {
                let g = gen(&model, &vocab, &schema, s, DecodeConfig::default().greedy());
                let b1 = gen(&model, &vocab, &schema, s, DecodeConfig { beam: 1, ..DecodeConfig::default() });
                assert_eq!(g, b1);
                let b4 = gen(&model, &vocab, &schema, s, DecodeConfig::default());
                for out in [&g, &b4] {
                    assert!((15..=70).contains(&out.tokens.len()), "{}", out.tokens.len());
                    assert!(!out.tokens.iter().any(|&t| t == PAD || t == BOS || t == EOS));
                    assert_eq!(out.labels.len(), out.tokens.len());
                }
            }
        }
    }

    #[test]
    fn short_bounds_and_validation() {
        let (model, vocab, schema, corpus) = setup(Variant::FULL);
        let cfg = DecodeConfig {
            beam: 3,
            min_len: 2,
            max_len: 4,
        };
        let g = gen(&model, &vocab, &schema, &corpus[0], cfg);
        assert!((2..=4).contains(&g.tokens.len()));
        let bad = DecodeConfig { min_len: 5, ..cfg };
        assert!(generate(&model, &[4], &[1], &bad, false).is_err());
        assert!(generate(&model, &[], &[], &cfg, false).is_err());
    }

    #[test]
    fn trace_has_one_entry_per_step() {
        let (model, vocab, schema, corpus) = setup(Variant::FULL);
        let s = &corpus[0];
        let cfg = DecodeConfig {
            beam: 2,
            min_len: 3,
            max_len: 6,
        };
        let g = generate(&model, &vocab.encode(&s.keywords), &s.keyword_label_ids(&schema).unwrap(), &cfg, true).unwrap();
        assert!(g.trace.len() == g.tokens.len() || g.trace.len() == g.tokens.len() + 1);
        for (i, st) in g.trace.iter().enumerate() {
            assert_eq!(st.step, i);
            assert_eq!(st.attn_gamma_w.len(), s.keywords.len());
            assert!((st.pi.as_ref().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generations_file_round_trip_and_batching() {
        let (model, vocab, schema, corpus) = setup(Variant::FULL);
        let cfg = DecodeConfig {
            beam: 2,
            min_len: 3,
            max_len: 8,
        };
        let ids: Vec<usize> = (10..10 + corpus.len()).collect();
        let records = batch_generate(&model, &vocab, &schema, &corpus, &ids, &cfg, false).unwrap();
        for (r, s) in records.iter().zip(&corpus) {
            let single = gen(&model, &vocab, &schema, s, cfg);
            assert_eq!(r.generated, vocab.decode(&single.tokens));
            assert_eq!(r.reference, s.description);
        }
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_generations(&a, &records).unwrap();
        let again = batch_generate(&model, &vocab, &schema, &corpus, &ids, &cfg, false).unwrap();
        write_generations(&b, &again).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_generations(&a).unwrap(), records);

        write_generations(&a, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&a).unwrap(), "{\"format\":\"fpdg-generations\",\"count\":0}\n");
        assert!(read_generations(&a).unwrap().is_empty());
        std::fs::write(&a, "{\"format\":\"fpdg-generations\",\"count\":2}\n").unwrap();
        assert!(read_generations(&a).is_err());
    }
}
