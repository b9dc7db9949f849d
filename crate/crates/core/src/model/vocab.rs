//! Character-level vocabulary for arithmetic prompts.

use super::ModelError;

pub type Token = u16;

pub const BOS: Token = 0;
pub const EOS: Token = 1;

const CHARSET: &[u8] = b"0123456789+-*= ";

/// Number of distinct tokens: BOS, EOS, and one per character.
pub const VOCAB_SIZE: usize = 2 + CHARSET.len();

pub fn encode(text: &str) -> Result<Vec<Token>, ModelError> {
    text.chars()
        .map(|ch| {
            u8::try_from(ch)
                .ok()
                .and_then(|b| CHARSET.iter().position(|&c| c == b))
                .map(|p| (p + 2) as Token)
                .ok_or(ModelError::UnknownToken(ch))
        })
        .collect()
}

/// Decodes up to the first EOS; BOS is skipped.
pub fn decode(tokens: &[Token]) -> String {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t != BOS)
        .filter_map(|&t| CHARSET.get(t as usize - 2).map(|&b| b as char))
        .collect()
}

/// Canonical answer form for exact-match scoring: whitespace removed and
/// integers printed without sign padding or leading zeros.
pub fn normalize_answer(answer: &str) -> String {
    let compact: String = answer.chars().filter(|c| !c.is_whitespace()).collect();
    match compact.parse::<i64>() {
        Ok(v) => v.to_string(),
        Err(_) => compact,
    }
}
