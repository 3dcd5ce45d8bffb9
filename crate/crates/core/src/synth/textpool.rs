use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../data/textpool.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPool {
    pub name: String,
    pub lexical_variants: Vec<String>,
    pub attribute_phrases: Vec<String>,
}

impl ClassPool {
    /// Every description available for re-sampling: variants, then
    /// attribute phrases.
    pub fn descriptions(&self) -> impl Iterator<Item = &str> {
        self.lexical_variants
            .iter()
            .chain(&self.attribute_phrases)
            .map(String::as_str)
    }
}

/// Per-class synonym and attribute phrases. Read-only once loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPool {
    pub classes: Vec<ClassPool>,
}

impl TextPool {
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN).expect("bundled text pool parses")
    }

    /// Pools for the first `num_classes` classes of the bundled data. Classes
    /// beyond the bundled list get a synthetic name and no extra phrases.
    pub fn for_classes(num_classes: usize) -> Self {
        let mut classes = Self::builtin().classes;
        classes.truncate(num_classes);
        for i in classes.len()..num_classes {
            let name = format!("object{i}");
            classes.push(ClassPool {
                lexical_variants: vec![name.clone()],
                attribute_phrases: Vec::new(),
                name,
            });
        }
        Self { classes }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pool: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate class name {:?}", c.name)));
            }
            if c.name.split_whitespace().count() != 1 {
                return Err(Error::Config(format!(
                    "class name {:?} must be one word",
                    c.name
                )));
            }
            if c.lexical_variants.first() != Some(&c.name) {
                return Err(Error::Config(format!(
                    "class {:?} must list its canonical name as the first variant",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_pool_is_valid() {
        let pool = TextPool::builtin();
        pool.validate().unwrap();
        assert!(pool.classes.len() >= 12);
        assert!(pool.classes.iter().all(|c| !c.lexical_variants.is_empty()));
    }

    #[test]
    fn oversize_request_synthesizes_names() {
        let pool = TextPool::for_classes(20);
        assert_eq!(pool.classes.len(), 20);
        assert_eq!(pool.classes[19].name, "object19");
        pool.validate().unwrap();
    }
}
