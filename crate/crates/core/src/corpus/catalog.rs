//! The synthetic report grammar: conditions, attributes, location modifiers
//! and the sentence templates that render them.

use serde::{Deserialize, Serialize};

/// Finding attribute of a mentioned condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Present,
    Absent,
    Uncertain,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Present, Attribute::Absent, Attribute::Uncertain];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-condition study label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Present,
    Absent,
    Uncertain,
    Unmentioned,
}

impl From<Attribute> for Label {
    fn from(a: Attribute) -> Self {
        match a {
            Attribute::Present => Label::Present,
            Attribute::Absent => Label::Absent,
            Attribute::Uncertain => Label::Uncertain,
        }
    }
}

impl Label {
    pub fn attribute(self) -> Option<Attribute> {
        match self {
            Label::Present => Some(Attribute::Present),
            Label::Absent => Some(Attribute::Absent),
            Label::Uncertain => Some(Attribute::Uncertain),
            Label::Unmentioned => None,
        }
    }
}

pub const LOCATIONS: [&str; 6] = ["left", "right", "upper", "lower", "apical", "basal"];

const CONDITIONS: [(&str, &[usize]); 12] = [
    ("cardiomegaly", &[]),
    ("effusion", &[0, 1, 5]),
    ("pneumothorax", &[0, 1, 4]),
    ("consolidation", &[0, 1, 2, 3, 5]),
    ("edema", &[]),
    ("atelectasis", &[0, 1, 3, 5]),
    ("nodule", &[0, 1, 2, 3, 4]),
    ("opacity", &[0, 1, 2, 3, 5]),
    ("fracture", &[0, 1]),
    ("emphysema", &[2, 4]),
    ("pneumonia", &[0, 1, 3]),
    ("hernia", &[]),
];

/// `{c}` is the condition word, `{l}` the optional location phrase.
const PRESENT_TEMPLATES: [&str; 2] = ["there is {c}{l} .", "{c} is seen{l} ."];
const UNCERTAIN_TEMPLATES: [&str; 2] = ["possible {c}{l} .", "{c} may be present{l} ."];
const ABSENT_TEMPLATES: [&str; 2] = ["no {c} .", "there is no {c} ."];
const IMPRESSION_TEMPLATES: [&str; 1] = ["{c}{l} ."];
const LOCATION_PHRASE: &str = " in the {loc} zone";

pub const NORMAL_FINDINGS: &str = "the lungs are clear .";
pub const NORMAL_IMPRESSION: &str = "no acute disease .";

/// Sentence cue words that set the attribute of conditions in a sentence.
pub const ABSENT_CUES: [&str; 1] = ["no"];
pub const UNCERTAIN_CUES: [&str; 2] = ["possible", "may"];
pub const SENTENCE_END: &str = ".";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub name: String,
    /// Indices into [`LOCATIONS`]; empty means the condition is never located.
    pub locations: Vec<usize>,
}

/// One mentioned condition with its rendering choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Finding {
    pub condition: usize,
    pub attribute: Attribute,
    pub location: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionCatalog {
    conditions: Vec<Condition>,
}

impl Default for ConditionCatalog {
    fn default() -> Self {
        Self::with_conditions(CONDITIONS.len()).expect("default size is valid")
    }
}

impl ConditionCatalog {
    pub const MAX_CONDITIONS: usize = CONDITIONS.len();

    /// The first `n` built-in conditions.
    pub fn with_conditions(n: usize) -> Option<Self> {
        if !(2..=CONDITIONS.len()).contains(&n) {
            return None;
        }
        Some(Self {
            conditions: CONDITIONS[..n]
                .iter()
                .map(|(name, locs)| Condition {
                    name: name.to_string(),
                    locations: locs.to_vec(),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn condition_index(&self, word: &str) -> Option<usize> {
        self.conditions.iter().position(|c| c.name == word)
    }

    pub fn location_index(word: &str) -> Option<usize> {
        LOCATIONS.iter().position(|&l| l == word)
    }

    /// Template pool for a finding sentence of the given attribute.
    pub fn findings_templates(attribute: Attribute) -> &'static [&'static str] {
        match attribute {
            Attribute::Present => &PRESENT_TEMPLATES,
            Attribute::Uncertain => &UNCERTAIN_TEMPLATES,
            Attribute::Absent => &ABSENT_TEMPLATES,
        }
    }

    pub fn impression_templates() -> &'static [&'static str] {
        &IMPRESSION_TEMPLATES
    }

    /// Location choices for a finding: none for absent findings or
    /// unlocated conditions.
    pub fn location_choices(&self, condition: usize, attribute: Attribute) -> &[usize] {
        if attribute == Attribute::Absent {
            &[]
        } else {
            &self.conditions[condition].locations
        }
    }

    fn fill(&self, template: &str, f: &Finding) -> String {
        let loc = f
            .location
            .map(|l| LOCATION_PHRASE.replace("{loc}", LOCATIONS[l]))
            .unwrap_or_default();
        template
            .replace("{c}", &self.conditions[f.condition].name)
            .replace("{l}", &loc)
    }

    /// Renders one finding sentence with template `variant` of its pool.
    pub fn render_finding(&self, f: &Finding, variant: usize) -> String {
        let pool = Self::findings_templates(f.attribute);
        self.fill(pool[variant % pool.len()], f)
    }

    pub fn render_impression_item(&self, f: &Finding) -> String {
        self.fill(IMPRESSION_TEMPLATES[0], f)
    }

    /// Findings text for findings in catalog order, one template variant per
    /// finding. No findings renders the normal sentence.
    pub fn render_findings(&self, findings: &[(Finding, usize)]) -> String {
        if findings.is_empty() {
            return NORMAL_FINDINGS.to_string();
        }
        findings
            .iter()
            .map(|(f, v)| self.render_finding(f, *v))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Impression text: every present finding, or the normal sentence.
    pub fn render_impression(&self, findings: &[Finding]) -> String {
        let present: Vec<String> = findings
            .iter()
            .filter(|f| f.attribute == Attribute::Present)
            .map(|f| self.render_impression_item(f))
            .collect();
        if present.is_empty() {
            NORMAL_IMPRESSION.to_string()
        } else {
            present.join(" ")
        }
    }

    /// Every word the renderer can emit, sorted and deduplicated.
    pub fn words(&self) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        let templates = PRESENT_TEMPLATES
            .iter()
            .chain(&UNCERTAIN_TEMPLATES)
            .chain(&ABSENT_TEMPLATES)
            .chain(&IMPRESSION_TEMPLATES)
            .chain([&LOCATION_PHRASE, &NORMAL_FINDINGS, &NORMAL_IMPRESSION]);
        for t in templates {
            words.extend(t.split_whitespace().filter(|w| !w.contains('{')).map(str::to_string));
            // "{c}{l}" and "seen{l}" style glue: the literal prefix is a word
            for w in t.split_whitespace().filter(|w| w.contains('{')) {
                let head = &w[..w.find('{').unwrap()];
                if !head.is_empty() {
                    words.push(head.to_string());
                }
            }
        }
        words.extend(self.conditions.iter().map(|c| c.name.clone()));
        words.extend(LOCATIONS.iter().map(|l| l.to_string()));
        words.sort();
        words.dedup();
        words
    }

    /// Every finding the grammar can express, with every template variant.
    pub fn all_findings(&self) -> Vec<(Finding, usize)> {
        let mut out = Vec::new();
        for c in 0..self.len() {
            for a in Attribute::ALL {
                let locs: Vec<Option<usize>> = match self.location_choices(c, a) {
                    [] => vec![None],
                    l => l.iter().map(|&x| Some(x)).collect(),
                };
                for location in locs {
                    for v in 0..Self::findings_templates(a).len() {
                        out.push((
                            Finding {
                                condition: c,
                                attribute: a,
                                location,
                            },
                            v,
                        ));
                    }
                }
            }
        }
        out
    }
}
