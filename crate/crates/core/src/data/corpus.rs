use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::{AttributeSchema, LabelId, Piece, Segment};
use crate::error::{Error, Result};

/// Minimum number of entity categories drawn per sample.
pub const MIN_CATEGORIES: usize = 3;

/// One training instance. Labels are category names, matching the corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub keywords: Vec<String>,
    pub keyword_labels: Vec<String>,
    pub description: Vec<String>,
    pub description_labels: Vec<String>,
}

impl Sample {
    fn check(&self) -> std::result::Result<(), String> {
        if self.keywords.len() != self.keyword_labels.len() {
            return Err("keywords and keyword_labels differ in length".into());
        }
        if self.description.len() != self.description_labels.len() {
            return Err("description and description_labels differ in length".into());
        }
        Ok(())
    }

    pub fn keyword_label_ids(&self, schema: &AttributeSchema) -> Result<Vec<LabelId>> {
        label_ids(&self.keyword_labels, schema)
    }

    pub fn description_label_ids(&self, schema: &AttributeSchema) -> Result<Vec<LabelId>> {
        label_ids(&self.description_labels, schema)
    }
}

fn label_ids(names: &[String], schema: &AttributeSchema) -> Result<Vec<LabelId>> {
    names
        .iter()
        .map(|n| {
            schema
                .category_id(n)
                .ok_or_else(|| Error::Schema(format!("unknown category `{n}`")))
        })
        .collect()
}

/// Draws `n` samples. Sample `i` depends only on `(schema, seed, i)`: each
/// index gets its own ChaCha stream, so shards can be generated independently.
pub fn generate_corpus(schema: &AttributeSchema, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let entities: Vec<LabelId> = schema.entity_categories().collect();
    if entities.len() < MIN_CATEGORIES {
        return Err(Error::Schema(format!(
            "need at least {MIN_CATEGORIES} entity categories, found {}",
            entities.len()
        )));
    }
    if schema.templates().is_empty() {
        return Err(Error::Schema("no templates".into()));
    }
    (0..n).map(|i| generate_sample(schema, &entities, seed, i as u64)).collect()
}

fn generate_sample(schema: &AttributeSchema, entities: &[LabelId], seed: u64, index_: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index_);

    let k = rng.gen_range(MIN_CATEGORIES..=entities.len());
    let mut chosen: Vec<LabelId> = index::sample(&mut rng, entities.len(), k)
        .into_iter()
        .map(|j| entities[j])
        .collect();
    chosen.sort_unstable();

    let mut values: BTreeMap<LabelId, String> = BTreeMap::new();
    for &c in &chosen {
        let value = schema
            .lexicon(c)
            .choose(&mut rng)
            .ok_or_else(|| Error::Schema(format!("empty lexicon for `{}`", schema.category_name(c))))?;
        values.insert(c, value.clone());
    }

    let eligible: Vec<&Vec<Segment>> = schema
        .templates()
        .iter()
        .filter(|t| covers(t, &values))
        .collect();
    let template = eligible
        .choose(&mut rng)
        .ok_or_else(|| Error::Schema("no template can express the drawn categories".into()))?;

    let mut description = Vec::new();
    let mut description_labels = Vec::new();
    for seg in template.iter() {
        let pieces = match seg {
            Segment::Fixed(p) => p,
            Segment::Clause(p) if clause_filled(p, &values) => p,
            Segment::Clause(_) => continue,
        };
        for piece in pieces {
            match piece {
                Piece::Word(w) => {
                    description.push(w.clone());
                    description_labels.push(schema.category_name(schema.normal()).to_string());
                }
                Piece::Slot(c) => {
                    description.push(values[c].clone());
                    description_labels.push(schema.category_name(*c).to_string());
                }
            }
        }
    }

    Ok(Sample {
        keywords: chosen.iter().map(|c| values[c].clone()).collect(),
        keyword_labels: chosen.iter().map(|&c| schema.category_name(c).to_string()).collect(),
        description,
        description_labels,
    })
}

fn clause_filled(pieces: &[Piece], values: &BTreeMap<LabelId, String>) -> bool {
    pieces.iter().all(|p| match p {
        Piece::Slot(c) => values.contains_key(c),
        Piece::Word(_) => true,
    })
}

/// A template can express a draw when its fixed slots are all drawn and
/// every drawn category is mentioned exactly once by the emitted segments.
fn covers(template: &[Segment], values: &BTreeMap<LabelId, String>) -> bool {
    let mut mentions: BTreeMap<LabelId, usize> = BTreeMap::new();
    for seg in template {
        let pieces = match seg {
            Segment::Fixed(p) => {
                if !clause_filled(p, values) {
                    return false;
                }
                p
            }
            Segment::Clause(p) if clause_filled(p, values) => p,
            Segment::Clause(_) => continue,
        };
        for p in pieces {
            if let Piece::Slot(c) = p {
                *mentions.entry(*c).or_default() += 1;
            }
        }
    }
    values.keys().all(|c| mentions.get(c) == Some(&1))
}

/// Fraction of keywords carrying an entity (non-normal) label.
pub fn entity_word_fraction(corpus: &[Sample], schema: &AttributeSchema) -> f64 {
    let normal = schema.category_name(schema.normal());
    let (mut entity, mut total) = (0usize, 0usize);
    for s in corpus {
        total += s.keyword_labels.len();
        entity += s.keyword_labels.iter().filter(|l| *l != normal).count();
    }
    if total == 0 {
        0.0
    } else {
        entity as f64 / total as f64
    }
}

/// Occurrences of every token across keywords and descriptions.
pub fn token_counts(corpus: &[Sample]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in corpus {
        for t in s.keywords.iter().chain(&s.description) {
            *counts.entry(t.clone()).or_default() += 1;
        }
    }
    counts
}

/// JSON-lines, one sample per line.
pub fn write_corpus(path: &Path, corpus: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in corpus {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let s: Sample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        s.check().map_err(parse_err)?;
        out.push(s);
    }
    Ok(out)
}
