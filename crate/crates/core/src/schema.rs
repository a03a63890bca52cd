//! Expert-defined relation schema: the visual / non-visual partition of the
//! relation set, plus the phrase templates used to render triplets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Kind, KnowledgeGraph, RelationId};
use crate::label::normalize;

/// What a relation says about its endpoints, used by harvesting and by the
/// audience profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationRole {
    /// Head has tail as a part (`Have`).
    Part,
    /// Both endpoints are animals or animal groups (`BelongTo`, `Synonym`).
    Taxonomy,
    Habitat,
    #[default]
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDef {
    pub label: String,
    pub kind: Kind,
    #[serde(default)]
    pub role: RelationRole,
    /// Phrase template with `{h}` and `{t}` placeholders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Template used when this relation is the second hop of a chain and
    /// describes the middle entity (e.g. `{t} {h}` renders "long tail").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modifier: Option<String>,
    /// Noun used by the fallback question template ("Which color ...").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

/// Versioned relation set; each expert revision round bumps `version`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub version: u32,
    pub relations: Vec<RelationDef>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl RelationSchema {
    pub fn new(version: u32, relations: Vec<RelationDef>) -> Result<Self> {
        if relations.is_empty() {
            return Err(Error::InvalidConfig("relation schema is empty".into()));
        }
        let mut index = BTreeMap::new();
        for (i, r) in relations.iter().enumerate() {
            let key = normalize(&r.label);
            if key.is_empty() {
                return Err(Error::InvalidConfig("relation with empty label".into()));
            }
            if index.insert(key, i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "relation `{}` declared twice",
                    r.label
                )));
            }
        }
        Ok(Self {
            version,
            relations,
            index,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            version: u32,
            relations: Vec<RelationDef>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(raw.version, raw.relations)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn get(&self, label: &str) -> Option<&RelationDef> {
        self.index.get(&normalize(label)).map(|&i| &self.relations[i])
    }

    pub fn get_by_id(&self, id: &RelationId) -> Option<&RelationDef> {
        let label = id.as_str().strip_prefix("r:")?;
        self.get(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.relations.iter().map(|r| r.label.as_str())
    }

    /// Relation definitions of one kind, in declaration order.
    pub fn of_kind(&self, kind: Kind) -> impl Iterator<Item = &RelationDef> {
        self.relations.iter().filter(move |r| r.kind == kind)
    }

    /// Defines every schema relation in `graph`.
    pub fn install(&self, graph: &mut KnowledgeGraph) -> Result<()> {
        for r in &self.relations {
            graph.define_relation(&r.label, r.kind)?;
        }
        Ok(())
    }

    /// Compact listing embedded in extraction prompts.
    pub fn prompt_listing(&self) -> String {
        let mut out = String::new();
        for kind in [Kind::Visual, Kind::NonVisual] {
            let names: Vec<_> = self.of_kind(kind).map(|r| r.label.as_str()).collect();
            let tag = match kind {
                Kind::Visual => "visual",
                Kind::NonVisual => "non-visual",
            };
            out.push_str(&format!("{tag}: {}\n", names.join(", ")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_labels() {
        let def = |l: &str| RelationDef {
            label: l.into(),
            kind: Kind::Visual,
            role: RelationRole::Attribute,
            template: None,
            modifier: None,
            question: None,
        };
        assert!(RelationSchema::new(1, vec![def("Have"), def("have ")]).is_err());
        assert!(RelationSchema::new(1, vec![]).is_err());
        let s = RelationSchema::new(1, vec![def("Have")]).unwrap();
        assert!(s.get("HAVE").is_some());
        assert!(s.get_by_id(&RelationId::for_label("Have")).is_some());
    }

    #[test]
    fn shipped_schema_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/relations.json");
        let s = RelationSchema::load(&path).unwrap();
        for name in ["Have", "Color", "Num", "BelongTo", "Synonym", "Eat", "AtEnvironment", "PartLength"] {
            assert!(s.get(name).is_some(), "{name}");
        }
        assert_eq!(s.get("Have").unwrap().kind, Kind::Visual);
        assert_eq!(s.get("Eat").unwrap().kind, Kind::NonVisual);
    }
}
