use std::fmt;

use serde::{Deserialize, Serialize};

use super::fidelity::{fidelity, Violation};
use super::ngram::{bleu_all, rouge_l, Smoothing};
use super::recall::RecallTable;
use crate::data::{AttributeSchema, LabelId, Sample};
use crate::decoding::GenerationRecord;
use crate::error::{Error, Result};

/// JSON schema that serialized [`EvalReport`]s conform to.
pub const REPORT_SCHEMA: &str = include_str!("../../schemas/report.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub smoothing: Smoothing,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub fidelity: f64,
    pub violating_samples: usize,
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_recall: Option<RecallTable>,
}

impl EvalReport {
    /// Scores generations against their references. Each record's `id`
    /// indexes `corpus`, which supplies the keyword labels.
    pub fn compute(
        records: &[GenerationRecord],
        corpus: &[Sample],
        schema: &AttributeSchema,
        smoothing: Smoothing,
    ) -> Result<Self> {
        let mut labels: Vec<Vec<LabelId>> = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let wrap = |e: Error| Error::Sample {
                index: i,
                source: Box::new(e),
            };
            let s = corpus
                .get(r.id)
                .ok_or_else(|| wrap(Error::Config(format!("id {} outside a corpus of {}", r.id, corpus.len()))))?;
            if s.keywords != r.keywords {
                return Err(wrap(Error::Config(format!("keywords differ from corpus sample {}", r.id))));
            }
            labels.push(s.keyword_label_ids(schema).map_err(wrap)?);
        }
        let cands: Vec<&[String]> = records.iter().map(|r| &r.generated[..]).collect();
        let refs: Vec<&[String]> = records.iter().map(|r| &r.reference[..]).collect();
        let [bleu_1, bleu_2, bleu_3, bleu_4] = bleu_all(&cands, &refs, smoothing)?;
        let rouge_l = rouge_l(&cands, &refs)?;
        let fid = fidelity(
            records
                .iter()
                .zip(&labels)
                .map(|(r, l)| (r.id, &r.keywords[..], &l[..], &r.generated[..])),
            schema,
        );
        Ok(Self {
            samples: records.len(),
            smoothing,
            bleu_1,
            bleu_2,
            bleu_3,
            bleu_4,
            rouge_l,
            fidelity: fid.score,
            violating_samples: fid.violating_samples,
            violations: fid.violations,
            label_recall: None,
        })
    }

    pub fn bleu(&self) -> [f64; 4] {
        [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples     {}", self.samples)?;
        for (n, b) in self.bleu().iter().enumerate() {
            writeln!(f, "BLEU-{}      {:.4}", n + 1, b)?;
        }
        writeln!(f, "ROUGE-L     {:.4}", self.rouge_l)?;
        writeln!(
            f,
            "fidelity    {:.4} ({} of {} samples violate)",
            self.fidelity, self.violating_samples, self.samples
        )?;
        if let Some(r) = &self.label_recall {
            for (k, v) in &r.recall {
                writeln!(f, "R_{}@{:<6} {:.4}", k, r.num_labels, v)?;
            }
        }
        Ok(())
    }
}
