//! Symbolic prompt vocabulary.

use crate::error::{Error, Result};

pub const MAX_PROMPT: usize = 8;

/// Token strings; the id of a token is its index.
pub const VOCAB: [&str; 32] = [
    "fill", "match-scene", "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "white",
    "black", "gray", "pink", "brown", "teal", "smooth", "striped", "dotted", "checker", "noisy", "remove",
    "keep", "brighter", "darker", "blend", "object", "scene", "background", "color", "texture", "with",
];

/// Colors with an RGB meaning, in vocabulary order.
pub const COLORS: [(&str, [f32; 3]); 14] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.85, 0.1, 0.8]),
    ("orange", [0.95, 0.55, 0.1]),
    ("purple", [0.5, 0.15, 0.7]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.05, 0.05, 0.05]),
    ("gray", [0.5, 0.5, 0.5]),
    ("pink", [0.95, 0.6, 0.75]),
    ("brown", [0.5, 0.3, 0.1]),
    ("teal", [0.1, 0.5, 0.5]),
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|&w| w == word)
}

pub fn color_rgb(name: &str) -> Option<[f32; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Splits on whitespace and `:`; `"fill:red"` becomes `[fill, red]`.
pub fn parse_prompt(text: &str) -> Result<Vec<usize>> {
    let ids = text
        .split(|c: char| c.is_whitespace() || c == ':')
        .filter(|w| !w.is_empty())
        .map(|w| token_id(w).ok_or_else(|| Error::Config(format!("unknown prompt token {w:?}"))))
        .collect::<Result<Vec<_>>>()?;
    check_prompt(&ids)?;
    Ok(ids)
}

pub fn check_prompt(ids: &[usize]) -> Result<()> {
    if ids.is_empty() || ids.len() > MAX_PROMPT {
        return Err(Error::Config(format!("prompt must have 1..={MAX_PROMPT} tokens, got {}", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB.len()) {
        return Err(Error::IndexOutOfRange { index: bad, extent: VOCAB.len() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fill_and_directive() {
        assert_eq!(parse_prompt("fill:red").unwrap(), vec![0, 2]);
        assert_eq!(parse_prompt("match-scene").unwrap(), vec![1]);
        assert!(parse_prompt("fill:mauve").is_err());
        assert!(parse_prompt("").is_err());
        assert!(parse_prompt("red red red red red red red red red").is_err());
    }

    #[test]
    fn every_color_is_a_token() {
        for (name, _) in COLORS {
            assert!(token_id(name).is_some(), "{name}");
        }
    }
}
