use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered class list with an injective class -> RGB palette.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassScheme {
    classes: Vec<ClassInfo>,
    #[serde(skip)]
    lookup: HashMap<[u8; 3], u8>,
}

impl Default for ClassScheme {
    fn default() -> Self {
        let classes = [
            ("sea_surface", [0, 0, 0]),
            ("oil_spill", [0, 255, 255]),
            ("oil_spill_lookalike", [255, 0, 0]),
            ("ship", [153, 76, 0]),
            ("land", [0, 153, 0]),
        ]
        .into_iter()
        .map(|(name, color)| ClassInfo { name: name.to_string(), color })
        .collect();
        ClassScheme::new(classes).expect("default palette is valid")
    }
}

impl ClassScheme {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.len() < 2 || classes.len() > 256 {
            return Err(Error::Config(format!("a class scheme needs 2..=256 classes, got {}", classes.len())));
        }
        let mut lookup = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            if let Some(prev) = lookup.insert(c.color, i as u8) {
                return Err(Error::Config(format!(
                    "palette color {:?} used by both `{}` and `{}`",
                    c.color, classes[prev as usize].name, c.name
                )));
            }
        }
        Ok(ClassScheme { classes, lookup })
    }

    /// Parses `class_name index R G B` lines; `#` starts a comment.
    pub fn parse_palette(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, ClassInfo)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("palette line {}: expected `name index R G B`, got `{line}`", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let index: usize = f[1].parse().map_err(|_| bad())?;
            let mut color = [0u8; 3];
            for (c, s) in color.iter_mut().zip(&f[2..]) {
                *c = s.parse().map_err(|_| bad())?;
            }
            entries.push((index, ClassInfo { name: f[0].to_string(), color }));
        }
        entries.sort_by_key(|(i, _)| *i);
        for (expected, (i, c)) in entries.iter().enumerate() {
            if *i != expected {
                return Err(Error::Config(format!(
                    "palette indices must be contiguous from 0; `{}` has index {i}, expected {expected}",
                    c.name
                )));
            }
        }
        ClassScheme::new(entries.into_iter().map(|(_, c)| c).collect())
    }

    pub fn from_palette_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_palette(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_palette_text(&self) -> String {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{} {i} {} {} {}\n", c.name, c.color[0], c.color[1], c.color[2]))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn color(&self, class: u8) -> Option<[u8; 3]> {
        self.classes.get(class as usize).map(|c| c.color)
    }

    pub fn class_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.lookup.get(&rgb).copied()
    }
}
