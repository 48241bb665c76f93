use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Sensor modality of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Color,
    Depth,
    Ir,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Color, Modality::Depth, Modality::Ir];

    /// Single-letter tag used in manifests, container headers and CLI flags.
    pub fn tag(self) -> char {
        match self {
            Modality::Color => 'R',
            Modality::Depth => 'D',
            Modality::Ir => 'I',
        }
    }

    pub fn from_tag(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'R' => Some(Modality::Color),
            'D' => Some(Modality::Depth),
            'I' => Some(Modality::Ir),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Color => "color",
            Modality::Depth => "depth",
            Modality::Ir => "ir",
        }
    }

    /// Channel count of frames in this modality.
    pub fn channels(self) -> usize {
        match self {
            Modality::Color => 3,
            Modality::Depth | Modality::Ir => 1,
        }
    }

    /// Parses a subset such as `rdi`, `RD` or `i`; order is normalized.
    pub fn parse_set(s: &str) -> Option<Vec<Modality>> {
        let mut out: Vec<Modality> = Vec::new();
        for c in s.chars().filter(|c| !matches!(c, ',' | '&' | ' ')) {
            let m = Modality::from_tag(c)?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out.sort();
        (!out.is_empty()).then_some(out)
    }

    pub fn set_tag(set: &[Modality]) -> String {
        set.iter().map(|m| m.tag().to_ascii_lowercase()).collect()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r" | "rgb" | "color" => Ok(Modality::Color),
            "d" | "depth" => Ok(Modality::Depth),
            "i" | "ir" => Ok(Modality::Ir),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}
