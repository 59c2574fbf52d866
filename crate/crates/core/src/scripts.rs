//! Script registry and the code-switch predicate.
//!
//! Detection is character level: a text "contains" a language when at least
//! one of its codepoints falls inside a Unicode range registered for that
//! language's script.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::SYNTHETIC_BLOCKS;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub String);

impl LanguageId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LanguageId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptId(pub String);

impl ScriptId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for ScriptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Inclusive codepoint range belonging to one script.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRange {
    pub script: ScriptId,
    pub lo: u32,
    pub hi: u32,
}

impl ScriptRange {
    pub fn contains(&self, cp: u32) -> bool {
        self.lo <= cp && cp <= self.hi
    }
}

impl fmt::Display for ScriptRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} U+{:04X}..U+{:04X}", self.script, self.lo, self.hi)
    }
}

/// Real-script blocks registered by [`ScriptRegistry::with_builtin_scripts`].
pub const BUILTIN_BLOCKS: &[(&str, u32, u32)] = &[
    ("Han", 0x4E00, 0x9FFF),
    ("Cyrillic", 0x0400, 0x04FF),
    ("Hangul", 0xAC00, 0xD7A3),
    ("Hangul", 0x1100, 0x11FF),
];

const BUILTIN_LANGUAGES: &[(&str, &str)] = &[("zh", "Han"), ("ru", "Cyrillic"), ("ko", "Hangul")];

/// Immutable after construction; share freely between evaluation workers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptRegistry {
    ranges: Vec<ScriptRange>,
    languages: BTreeMap<LanguageId, ScriptId>,
}

impl ScriptRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding Han, Cyrillic, Hangul and every synthetic block,
    /// with `zh`/`ru`/`ko` and the synthetic languages mapped onto them.
    pub fn with_builtin_scripts() -> Self {
        Self::new().register_builtin_scripts().expect("built-in blocks are disjoint")
    }

    pub fn register_builtin_scripts(mut self) -> Result<Self> {
        for &(script, lo, hi) in BUILTIN_BLOCKS {
            self.register_range(ScriptId::new(script), lo, hi)?;
        }
        for &(lang, script) in BUILTIN_LANGUAGES {
            self.register_language(LanguageId::new(lang), ScriptId::new(script));
        }
        for block in SYNTHETIC_BLOCKS {
            self.register_range(ScriptId::new(block.script), block.lo, block.hi)?;
            self.register_language(LanguageId::new(block.language), ScriptId::new(block.script));
        }
        Ok(self)
    }

    pub fn register_range(&mut self, script: ScriptId, lo: u32, hi: u32) -> Result<()> {
        let new = ScriptRange { script, lo, hi };
        if lo > hi {
            return Err(Error::InvalidConfig(format!("empty script range {new}")));
        }
        if let Some(existing) = self.ranges.iter().find(|r| r.lo <= hi && lo <= r.hi) {
            return Err(Error::ScriptOverlap { new: new.to_string(), existing: existing.to_string() });
        }
        let at = self.ranges.partition_point(|r| r.lo < lo);
        self.ranges.insert(at, new);
        Ok(())
    }

    pub fn register_language(&mut self, lang: LanguageId, script: ScriptId) {
        self.languages.insert(lang, script);
    }

    pub fn ranges(&self) -> &[ScriptRange] {
        &self.ranges
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn script_of(&self, cp: u32) -> Option<&ScriptId> {
        let at = self.ranges.partition_point(|r| r.lo <= cp);
        at.checked_sub(1).map(|i| &self.ranges[i]).filter(|r| r.contains(cp)).map(|r| &r.script)
    }

    pub fn script_of_language(&self, lang: &LanguageId) -> Result<&ScriptId> {
        self.languages.get(lang).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// `true` iff at least one codepoint of `text` belongs to `lang`'s script.
    pub fn contains_language(&self, lang: &LanguageId, text: &str) -> Result<bool> {
        let script = self.script_of_language(lang)?;
        Ok(text.chars().any(|c| self.script_of(c as u32) == Some(script)))
    }

    /// Index of the first codepoint of `text` (in `char` units) that belongs
    /// to `lang`'s script.
    pub fn first_switch(&self, lang: &LanguageId, text: &str) -> Result<Option<usize>> {
        let script = self.script_of_language(lang)?;
        Ok(text.chars().position(|c| self.script_of(c as u32) == Some(script)))
    }

    /// Reads additional ranges from a `script_id,lo_hex,hi_hex` table.
    pub fn load_table(&mut self, reader: impl Read) -> Result<()> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Format(e.to_string()))?;
            if row.len() != 3 {
                return Err(Error::Format(format!("script table row has {} fields, expected 3", row.len())));
            }
            let parse = |s: &str| {
                u32::from_str_radix(s.trim(), 16).map_err(|_| Error::Format(format!("bad hex codepoint `{s}`")))
            };
            self.register_range(ScriptId::new(row[0].trim()), parse(&row[1])?, parse(&row[2])?)?;
        }
        Ok(())
    }

    pub fn write_table(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["script_id", "lo_hex", "hi_hex"]).map_err(io)?;
        for r in &self.ranges {
            w.write_record([r.script.0.clone(), format!("{:04X}", r.lo), format!("{:04X}", r.hi)]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}
