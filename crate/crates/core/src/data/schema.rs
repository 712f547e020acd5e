use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the catch-all label for tokens outside every lexicon.
pub const NORMAL_WORD: &str = "normal word";

/// Index into [`AttributeSchema::categories`].
pub type LabelId = usize;

/// One piece of a parsed template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Slot(LabelId),
}

/// A template split into always-present text and optional clauses.
/// A clause is emitted only when every slot inside it is filled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Fixed(Vec<Piece>),
    Clause(Vec<Piece>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SchemaFile {
    categories: Vec<String>,
    lexicons: BTreeMap<String, Vec<String>>,
    templates: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    open_class: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    priority: Vec<String>,
}

/// Entity categories, their value lexicons, and description templates.
///
/// Construction validates the schema: lexicons are pairwise disjoint, no
/// template word is an entity value, and every slot names an entity category.
#[derive(Clone, Debug)]
pub struct AttributeSchema {
    file: SchemaFile,
    normal: LabelId,
    lexicons: Vec<Vec<String>>,
    token_label: HashMap<String, LabelId>,
    templates: Vec<Vec<Segment>>,
    open_class: Vec<bool>,
}

impl AttributeSchema {
    pub fn new(
        categories: Vec<String>,
        lexicons: BTreeMap<String, Vec<String>>,
        templates: Vec<String>,
        open_class: Vec<String>,
    ) -> Result<Self> {
        Self::from_file(SchemaFile {
            categories,
            lexicons,
            templates,
            open_class,
            priority: Vec::new(),
        })
    }

    fn from_file(file: SchemaFile) -> Result<Self> {
        let cats = &file.categories;
        if cats.len() < 2 {
            return Err(Error::Schema("need at least two categories".into()));
        }
        let mut seen = HashSet::new();
        for c in cats {
            if !seen.insert(c.as_str()) {
                return Err(Error::Schema(format!("duplicate category `{c}`")));
            }
        }
        let normal = cats
            .iter()
            .position(|c| c == NORMAL_WORD)
            .ok_or_else(|| Error::Schema(format!("missing `{NORMAL_WORD}` category")))?;
        let index: HashMap<&str, LabelId> = cats.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

        let mut lexicons = vec![Vec::new(); cats.len()];
        let mut token_label = HashMap::new();
        for (name, values) in &file.lexicons {
            let &id = index
                .get(name.as_str())
                .ok_or_else(|| Error::Schema(format!("lexicon for unknown category `{name}`")))?;
            if id == normal {
                return Err(Error::Schema(format!("`{NORMAL_WORD}` cannot have a lexicon")));
            }
            for v in values {
                if v.is_empty() || v.split_whitespace().count() != 1 {
                    return Err(Error::Schema(format!("`{name}` value {v:?} is not a single token")));
                }
                if let Some(prev) = token_label.insert(v.clone(), id) {
                    return Err(Error::Schema(format!(
                        "`{v}` appears in both `{}` and `{name}`",
                        cats[prev]
                    )));
                }
            }
            lexicons[id] = values.clone();
        }

        let templates = file
            .templates
            .iter()
            .map(|t| parse_template(t, &index, normal, &token_label))
            .collect::<Result<Vec<_>>>()?;

        let mut open_class = vec![false; cats.len()];
        for c in &file.open_class {
            let &id = index
                .get(c.as_str())
                .ok_or_else(|| Error::Schema(format!("open class names unknown category `{c}`")))?;
            open_class[id] = true;
        }
        for c in &file.priority {
            if !index.contains_key(c.as_str()) {
                return Err(Error::Schema(format!("priority names unknown category `{c}`")));
            }
        }

        Ok(Self {
            file,
            normal,
            lexicons,
            token_label,
            templates,
            open_class,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("schema serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn categories(&self) -> &[String] {
        &self.file.categories
    }

    pub fn num_categories(&self) -> usize {
        self.file.categories.len()
    }

    pub fn normal(&self) -> LabelId {
        self.normal
    }

    pub fn category_id(&self, name: &str) -> Option<LabelId> {
        self.file.categories.iter().position(|c| c == name)
    }

    pub fn category_name(&self, id: LabelId) -> &str {
        &self.file.categories[id]
    }

    /// Entity categories (everything except the normal-word label), in schema order.
    pub fn entity_categories(&self) -> impl Iterator<Item = LabelId> + '_ {
        (0..self.num_categories()).filter(move |&c| c != self.normal)
    }

    pub fn lexicon(&self, id: LabelId) -> &[String] {
        &self.lexicons[id]
    }

    pub fn templates(&self) -> &[Vec<Segment>] {
        &self.templates
    }

    pub fn is_open_class(&self, id: LabelId) -> bool {
        self.open_class[id]
    }

    /// Dictionary label of one token: its lexicon's category, or normal word.
    pub fn label_of(&self, token: &str) -> LabelId {
        self.token_label.get(token).copied().unwrap_or(self.normal)
    }

    pub fn label_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<LabelId> {
        tokens.iter().map(|t| self.label_of(t.as_ref())).collect()
    }
}

fn parse_template(
    text: &str,
    index: &HashMap<&str, LabelId>,
    normal: LabelId,
    token_label: &HashMap<String, LabelId>,
) -> Result<Vec<Segment>> {
    let bad = |msg: String| Error::Schema(format!("template {text:?}: {msg}"));
    let parse_pieces = |chunk: &str| -> Result<Vec<Piece>> {
        chunk
            .split_whitespace()
            .map(|tok| {
                if let Some(name) = tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                    match index.get(name) {
                        Some(&id) if id != normal => Ok(Piece::Slot(id)),
                        _ => Err(bad(format!("slot `{name}` is not an entity category"))),
                    }
                } else if let Some(&id) = token_label.get(tok) {
                    Err(bad(format!("template word `{tok}` is in the lexicon of category {id}")))
                } else if tok.contains(['{', '}']) {
                    Err(bad(format!("malformed slot `{tok}`")))
                } else {
                    Ok(Piece::Word(tok.to_string()))
                }
            })
            .collect()
    };

    let mut segments = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        match rest.find(['[', ']']) {
            None => {
                segments.push(Segment::Fixed(parse_pieces(rest)?));
                rest = "";
            }
            Some(i) if rest.as_bytes()[i] == b']' => return Err(bad("unbalanced `]`".into())),
            Some(i) => {
                segments.push(Segment::Fixed(parse_pieces(&rest[..i])?));
                let close = rest[i + 1..]
                    .find(['[', ']'])
                    .filter(|&j| rest.as_bytes()[i + 1 + j] == b']')
                    .ok_or_else(|| bad("unbalanced `[`".into()))?;
                let clause = parse_pieces(&rest[i + 1..i + 1 + close])?;
                if !clause.iter().any(|p| matches!(p, Piece::Slot(_))) {
                    return Err(bad("clause without a slot".into()));
                }
                segments.push(Segment::Clause(clause));
                rest = &rest[i + 2 + close..];
            }
        }
    }
    segments.retain(|s| !matches!(s, Segment::Fixed(p) | Segment::Clause(p) if p.is_empty()));
    if segments.is_empty() {
        return Err(bad("empty template".into()));
    }
    Ok(segments)
}
