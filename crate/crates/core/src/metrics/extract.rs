use std::collections::HashMap;
use std::sync::LazyLock;

use serde::Serialize;

use crate::corpus::catalog::{ABSENT_CUES, SENTENCE_END, UNCERTAIN_CUES};
use crate::corpus::{Attribute, ConditionCatalog, Label, LOCATIONS};
use crate::tokenizer::{SectionedReport, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Condition,
    Location,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationType {
    LocatedAt,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Entity {
    pub surface: Vec<String>,
    pub category: Category,
    /// Set for conditions, `None` for locations.
    pub attribute: Option<Attribute>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Relation {
    pub head: usize,
    pub tail: usize,
    pub kind: RelationType,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EntityGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

impl EntityGraph {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }

    /// Entities plus relations, the denominator of micro precision/recall.
    pub fn size(&self) -> usize {
        self.entities.len() + self.relations.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Condition(usize),
    Location(usize),
    Absent,
    Uncertain,
    End,
}

/// Rule-based recognizer for the report grammar.
///
/// Sentences end at `.`. A sentence containing an absent cue makes every
/// condition in it absent; otherwise an uncertain cue makes them uncertain;
/// otherwise present. Each location word attaches to the nearest preceding
/// condition in the same sentence. Other words are ignored.
#[derive(Debug, Clone)]
pub struct Extractor {
    roles: HashMap<String, Role>,
    conditions: Vec<String>,
}

impl Extractor {
    pub fn new(catalog: &ConditionCatalog) -> Self {
        let mut roles = HashMap::new();
        for (i, c) in catalog.conditions().iter().enumerate() {
            roles.insert(c.name.clone(), Role::Condition(i));
        }
        for (i, l) in LOCATIONS.iter().enumerate() {
            roles.insert(l.to_string(), Role::Location(i));
        }
        for w in ABSENT_CUES {
            roles.insert(w.to_string(), Role::Absent);
        }
        for w in UNCERTAIN_CUES {
            roles.insert(w.to_string(), Role::Uncertain);
        }
        roles.insert(SENTENCE_END.to_string(), Role::End);
        Self {
            roles,
            conditions: catalog.conditions().iter().map(|c| c.name.clone()).collect(),
        }
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn extract(&self, text: &str) -> EntityGraph {
        self.extract_words(text.split_whitespace())
    }

    pub fn extract_ids(&self, ids: &[TokenId], vocab: &Vocabulary) -> EntityGraph {
        self.extract_words(ids.iter().filter_map(|&id| vocab.token(id)))
    }

    pub fn extract_words<'a, I: IntoIterator<Item = &'a str>>(&self, words: I) -> EntityGraph {
        let mut g = EntityGraph::default();
        let mut sentence: Vec<(Role, &str)> = Vec::new();
        for w in words {
            match self.roles.get(w) {
                Some(Role::End) => {
                    self.flush(&mut g, &sentence);
                    sentence.clear();
                }
                Some(&r) => sentence.push((r, w)),
                None => {}
            }
        }
        self.flush(&mut g, &sentence);
        g
    }

    fn flush(&self, g: &mut EntityGraph, sentence: &[(Role, &str)]) {
        let attribute = if sentence.iter().any(|(r, _)| *r == Role::Absent) {
            Attribute::Absent
        } else if sentence.iter().any(|(r, _)| *r == Role::Uncertain) {
            Attribute::Uncertain
        } else {
            Attribute::Present
        };
        let mut last_condition = None;
        for &(role, w) in sentence {
            match role {
                Role::Condition(_) => {
                    last_condition = Some(g.entities.len());
                    g.entities.push(Entity {
                        surface: vec![w.to_string()],
                        category: Category::Condition,
                        attribute: Some(attribute),
                    });
                }
                Role::Location(_) => {
                    let idx = g.entities.len();
                    g.entities.push(Entity {
                        surface: vec![w.to_string()],
                        category: Category::Location,
                        attribute: None,
                    });
                    if let Some(head) = last_condition {
                        g.relations.push(Relation {
                            head,
                            tail: idx,
                            kind: RelationType::LocatedAt,
                        });
                    }
                }
                _ => {}
            }
        }
    }

    /// Per-condition labels from extracted graphs. Within a graph a present
    /// mention beats other mentions, else the first mention counts. Earlier
    /// graphs take precedence; later ones only fill unmentioned conditions.
    pub fn labels(&self, graphs: &[&EntityGraph]) -> Vec<Label> {
        let mut labels = vec![Label::Unmentioned; self.conditions.len()];
        for g in graphs {
            let mut local = vec![Label::Unmentioned; labels.len()];
            for e in &g.entities {
                let (Some(Role::Condition(c)), Some(a)) = (self.roles.get(e.surface[0].as_str()).copied(), e.attribute)
                else {
                    continue;
                };
                if local[c] == Label::Unmentioned || a == Attribute::Present {
                    local[c] = a.into();
                }
            }
            for (l, new) in labels.iter_mut().zip(local) {
                if *l == Label::Unmentioned {
                    *l = new;
                }
            }
        }
        labels
    }

    pub fn report_graphs(&self, report: &SectionedReport, vocab: &Vocabulary) -> ReportGraphs {
        ReportGraphs {
            findings: report.findings.as_deref().map(|ids| self.extract_ids(ids, vocab)),
            impression: report.impression.as_deref().map(|ids| self.extract_ids(ids, vocab)),
        }
    }

    pub fn report_labels(&self, graphs: &ReportGraphs) -> Vec<Label> {
        let gs: Vec<&EntityGraph> = graphs.findings.iter().chain(graphs.impression.iter()).collect();
        self.labels(&gs)
    }
}

impl Default for Extractor {
    fn default() -> Self {
        Self::new(&ConditionCatalog::default())
    }
}

static DEFAULT_EXTRACTOR: LazyLock<Extractor> = LazyLock::new(Extractor::default);

/// [`Extractor::extract`] over the full built-in catalog.
pub fn extract_graph(text: &str) -> EntityGraph {
    DEFAULT_EXTRACTOR.extract(text)
}

/// Extracted graphs of both sections; `None` marks a missing section.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportGraphs {
    pub findings: Option<EntityGraph>,
    pub impression: Option<EntityGraph>,
}
