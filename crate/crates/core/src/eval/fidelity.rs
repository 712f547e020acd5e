use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, LabelId};

/// A generated entity value that the input keywords do not license.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub sample_id: usize,
    pub category: String,
    pub token: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Fraction of samples without any violation; 1.0 on an empty corpus.
    pub score: f64,
    pub samples: usize,
    pub violating_samples: usize,
    pub violations: Vec<Violation>,
}

impl FidelityReport {
    pub fn violation_rate(&self) -> f64 {
        1.0 - self.score
    }
}

/// Violations in one generation. Each generated token is labelled with the
/// schema dictionary. An entity token must equal some input keyword of its
/// category; when the input has no keyword of that category the token is
/// allowed only if the category is open-class.
pub fn sample_violations<S: AsRef<str>, G: AsRef<str>>(
    sample_id: usize,
    keywords: &[S],
    keyword_labels: &[LabelId],
    generated: &[G],
    schema: &AttributeSchema,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for tok in generated {
        let tok = tok.as_ref();
        let k = schema.label_of(tok);
        if k == schema.normal() {
            continue;
        }
        let mut present = false;
        let mut licensed = false;
        for (kw, &l) in keywords.iter().zip(keyword_labels) {
            if l == k {
                present = true;
                licensed |= kw.as_ref() == tok;
            }
        }
        let ok = if present { licensed } else { schema.is_open_class(k) };
        if !ok {
            out.push(Violation {
                sample_id,
                category: schema.category_name(k).to_string(),
                token: tok.to_string(),
            });
        }
    }
    out
}

/// Sample-level fidelity: a sample with any violation counts as unfaithful.
/// Items are `(sample id, keywords, keyword labels, generated tokens)`.
pub fn fidelity<'a, I, S, G>(items: I, schema: &AttributeSchema) -> FidelityReport
where
    I: IntoIterator<Item = (usize, &'a [S], &'a [LabelId], &'a [G])>,
    S: AsRef<str> + 'a,
    G: AsRef<str> + 'a,
{
    let mut report = FidelityReport::default();
    for (id, kw, labels, gen) in items {
        let v = sample_violations(id, kw, labels, gen, schema);
        report.samples += 1;
        if !v.is_empty() {
            report.violating_samples += 1;
        }
        report.violations.extend(v);
    }
    report.score = if report.samples == 0 {
        1.0
    } else {
        1.0 - report.violating_samples as f64 / report.samples as f64
    };
    report
}
