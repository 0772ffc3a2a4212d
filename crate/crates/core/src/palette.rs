//! Printable colour sets.

use std::path::Path;

use crate::error::{Error, Result};

const DEFAULT_PALETTE: &str = include_str!("../fixtures/palette_default.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    colors: Vec<[f64; 3]>,
}

impl Palette {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(Error::Palette("palette is empty".into()));
        }
        for (i, c) in colors.iter().enumerate() {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Palette(format!("color {i} {c:?} outside [0,1]")));
            }
            if colors[..i].contains(c) {
                return Err(Error::Palette(format!("duplicate color {c:?}")));
            }
        }
        Ok(Self { colors })
    }

    /// 30-colour default: the `{0, 0.5, 1}^3` lattice plus three grays.
    pub fn default_printable() -> Self {
        Self::parse(DEFAULT_PALETTE).expect("bundled palette is valid")
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// One `r g b` triple per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Palette(format!("line {}: {e}", i + 1)))?;
            let [r, g, b] = vals[..] else {
                return Err(Error::Palette(format!("line {}: expected 3 values", i + 1)));
            };
            colors.push([r, g, b]);
        }
        Self::new(colors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
