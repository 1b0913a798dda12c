use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CodeSystem;
use crate::hashing::read_to_string;
use crate::{Error, Result};

const ICD10_JSON: &str = include_str!("../../data/icd10cm_descriptor.json");
const ICD9_JSON: &str = include_str!("../../data/icd9cm_descriptor.json");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub start: String,
    pub end: String,
    /// Node name; defaults to `start-end`.
    #[serde(default)]
    pub label: Option<String>,
}

impl Range {
    fn name(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.start, self.end))
    }

    fn contains(&self, code: &str) -> bool {
        code.len() >= self.start.len() && {
            let key = &code[..self.start.len()];
            self.start.as_str() <= key && key <= self.end.as_str()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LevelRule {
    /// Ancestor is the first `len` characters, or `overrides[initial]`
    /// characters for codes starting with that initial. Applies only to
    /// codes longer than the prefix.
    Prefix {
        len: usize,
        #[serde(default)]
        overrides: BTreeMap<String, usize>,
    },
    /// Ancestor is the first range whose bounds enclose the code's leading
    /// characters (compared lexically on `start.len()` characters).
    Ranges { ranges: Vec<Range> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub name: String,
    pub rule: LevelRule,
    /// When false, a code that no rule covers is a descriptor error.
    #[serde(default)]
    pub optional: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Syntax {
    pub min_len: usize,
    pub max_len: usize,
}

/// Ordered level rules, shallowest first, that map a code to its ancestors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSystemDescriptor {
    pub name: String,
    pub system: CodeSystem,
    pub syntax: Syntax,
    pub levels: Vec<Level>,
    /// Display form puts a dot after this many characters.
    pub dot_after: usize,
    #[serde(default)]
    pub dot_overrides: BTreeMap<String, usize>,
}

fn with_override(code: &str, len: usize, overrides: &BTreeMap<String, usize>) -> usize {
    overrides
        .iter()
        .find(|(init, _)| code.starts_with(init.as_str()))
        .map_or(len, |(_, &l)| l)
}

impl CodeSystemDescriptor {
    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Chapter letter, then 3-character category, e.g. `A012` → `A01` → `A`.
    pub fn generic() -> Self {
        Self {
            name: "generic".into(),
            system: CodeSystem::Generic,
            syntax: Syntax { min_len: 2, max_len: 8 },
            levels: vec![
                Level {
                    name: "chapter".into(),
                    rule: LevelRule::Prefix {
                        len: 1,
                        overrides: BTreeMap::new(),
                    },
                    optional: false,
                },
                Level {
                    name: "category".into(),
                    rule: LevelRule::Prefix {
                        len: 3,
                        overrides: BTreeMap::new(),
                    },
                    optional: true,
                },
            ],
            dot_after: 3,
            dot_overrides: BTreeMap::new(),
        }
    }

    /// ICD-10-CM: chapter and block ranges, then category and two
    /// subcategory levels. The bundled block table covers chapters
    /// E, I, J and N only; other chapters skip the block level.
    pub fn icd10cm() -> Self {
        Self::from_json(ICD10_JSON).expect("bundled descriptor is valid")
    }

    /// ICD-9-CM: chapter ranges, then category and subcategory levels.
    /// E codes use 4-character categories.
    pub fn icd9cm() -> Self {
        Self::from_json(ICD9_JSON).expect("bundled descriptor is valid")
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "generic" => Ok(Self::generic()),
            "icd10cm" | "icd10" => Ok(Self::icd10cm()),
            "icd9cm" | "icd9" => Ok(Self::icd9cm()),
            other => Err(Error::Descriptor(format!("no builtin descriptor `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Descriptor("no levels".into()));
        }
        if self.syntax.min_len == 0 || self.syntax.min_len > self.syntax.max_len {
            return Err(Error::Descriptor("bad syntax bounds".into()));
        }
        let mut last_prefix = 0;
        for l in &self.levels {
            match &l.rule {
                LevelRule::Prefix { len, .. } => {
                    if *len <= last_prefix {
                        return Err(Error::Descriptor(format!(
                            "level `{}`: prefix levels must lengthen",
                            l.name
                        )));
                    }
                    last_prefix = *len;
                }
                LevelRule::Ranges { ranges } => {
                    if last_prefix > 0 {
                        return Err(Error::Descriptor(format!(
                            "level `{}`: range levels must precede prefix levels",
                            l.name
                        )));
                    }
                    if let Some(r) = ranges.iter().find(|r| r.start.len() != r.end.len() || r.start > r.end) {
                        return Err(Error::Descriptor(format!("bad range {}-{}", r.start, r.end)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn matches_syntax(&self, code: &str) -> bool {
        (self.syntax.min_len..=self.syntax.max_len).contains(&code.len())
            && code.chars().all(|c| c.is_ascii_digit() || c.is_ascii_uppercase())
    }

    /// Strict ancestors of `code`, shallowest first.
    ///
    /// `N1832` under ICD-10-CM gives `[N00-N99, N17-N19, N18, N183]`.
    pub fn ancestors(&self, code: &str) -> Result<Vec<String>> {
        if !self.matches_syntax(code) {
            return Err(Error::DescriptorSyntax(vec![code.to_string()]));
        }
        let mut out = Vec::new();
        for level in &self.levels {
            let anc = match &level.rule {
                LevelRule::Prefix { len, overrides } => {
                    let n = with_override(code, *len, overrides);
                    (code.len() > n).then(|| code[..n].to_string())
                }
                LevelRule::Ranges { ranges } => ranges.iter().find(|r| r.contains(code)).map(Range::name),
            };
            match anc {
                Some(a) => out.push(a),
                None if level.optional => {}
                None => {
                    // prefix levels only apply to longer codes; that is not a gap
                    if matches!(level.rule, LevelRule::Ranges { .. }) {
                        return Err(Error::Descriptor(format!(
                            "level `{}` does not cover `{code}`",
                            level.name
                        )));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Dotted display form: `N1832` → `N18.32`.
    pub fn display(&self, code: &str) -> String {
        let n = with_override(code, self.dot_after, &self.dot_overrides);
        if code.len() > n && !code.contains('-') {
            format!("{}.{}", &code[..n], &code[n..])
        } else {
            code.to_string()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ckd_chain() {
        let d = CodeSystemDescriptor::icd10cm();
        let chain = d.ancestors("N1832").unwrap();
        assert_eq!(chain, ["N00-N99", "N17-N19", "N18", "N183"]);
        let shown: Vec<String> = chain.iter().rev().map(|c| d.display(c)).collect();
        assert_eq!(shown, ["N18.3", "N18", "N17-N19", "N00-N99"]);
        assert_eq!(d.display("N1832"), "N18.32");
    }

    #[test]
    fn diabetes_siblings_share_parent() {
        let d = CodeSystemDescriptor::icd10cm();
        let a = d.ancestors("E1164").unwrap();
        let b = d.ancestors("E1165").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.last().unwrap(), "E116");
        assert_eq!(a[1], "E08-E13");
    }

    #[test]
    fn icd9_codes() {
        let d = CodeSystemDescriptor::icd9cm();
        assert_eq!(d.ancestors("40301").unwrap(), ["390-459", "403", "4030"]);
        assert_eq!(d.ancestors("486").unwrap(), ["460-519"]);
        assert_eq!(d.ancestors("E8889").unwrap(), ["E000-E999", "E888"]);
        assert_eq!(d.ancestors("V4581").unwrap(), ["V01-V91", "V45", "V458"]);
        assert_eq!(d.display("E8889"), "E888.9");
    }

    #[test]
    fn generic_and_syntax() {
        let d = CodeSystemDescriptor::generic();
        assert_eq!(d.ancestors("A012").unwrap(), ["A", "A01"]);
        assert_eq!(d.ancestors("A01").unwrap(), ["A"]);
        assert!(matches!(d.ancestors("a01"), Err(Error::DescriptorSyntax(_))));
        assert!(matches!(d.ancestors("A"), Err(Error::DescriptorSyntax(_))));
    }

    #[test]
    fn builtin_roundtrip() {
        for name in ["generic", "icd10cm", "icd9cm"] {
            let d = CodeSystemDescriptor::builtin(name).unwrap();
            assert_eq!(CodeSystemDescriptor::from_json(&d.to_json().unwrap()).unwrap(), d);
        }
    }
}
