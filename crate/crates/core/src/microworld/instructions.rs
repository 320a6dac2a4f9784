//! Instruction grammar and the fixed small vocabulary.
//!
//! The benchmark drives with natural-language commands drawn from a closed
//! grammar: follow / turn / stop / lane-change templates plus distractor
//! phrasings. Lane-change templates exist in the grammar but the single-lane
//! road network never makes them feasible, so they only appear as misleading
//! cues.

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Canonical maneuver classes an instruction can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstructionKind {
    FollowLane,
    TurnLeft,
    TurnRight,
    StopAtLight,
    ChangeLaneLeft,
    ChangeLaneRight,
}

/// A language command handed to the agent, with a benchmark-side flag marking
/// deliberately misleading cues (infeasible from the route context).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub misleading: bool,
}

impl Instruction {
    pub fn new(text: impl Into<String>, misleading: bool) -> Instruction {
        Instruction {
            text: text.into(),
            misleading,
        }
    }

    pub fn kind(&self) -> InstructionKind {
        parse_kind(&self.text)
    }
}

/// Phrase templates per kind; index 0 is the canonical phrasing.
pub fn phrases(kind: InstructionKind) -> &'static [&'static str] {
    match kind {
        InstructionKind::FollowLane => &[
            "follow the lane",
            "keep following the road",
            "continue along the lane",
            "drive along the road",
        ],
        InstructionKind::TurnLeft => &[
            "turn left at the next intersection",
            "take a left turn ahead",
            "go left at the junction",
        ],
        InstructionKind::TurnRight => &[
            "turn right at the next intersection",
            "take a right turn ahead",
            "go right at the junction",
        ],
        InstructionKind::StopAtLight => &["stop at the red light", "halt at the light ahead"],
        InstructionKind::ChangeLaneLeft => &["change to the left lane", "shift into the left lane"],
        InstructionKind::ChangeLaneRight => {
            &["change to the right lane", "shift into the right lane"]
        }
    }
}

pub const ALL_KINDS: [InstructionKind; 6] = [
    InstructionKind::FollowLane,
    InstructionKind::TurnLeft,
    InstructionKind::TurnRight,
    InstructionKind::StopAtLight,
    InstructionKind::ChangeLaneLeft,
    InstructionKind::ChangeLaneRight,
];

/// Every sentence the grammar can produce.
pub fn all_sentences() -> Vec<String> {
    ALL_KINDS
        .iter()
        .flat_map(|&k| phrases(k).iter().map(|s| s.to_string()))
        .collect()
}

/// Keyword-based maneuver classification; unknown text falls back to lane
/// following (the safe default the benchmark expects for noise).
pub fn parse_kind(text: &str) -> InstructionKind {
    let t = text.to_lowercase();
    let has = |w: &str| t.split_whitespace().any(|x| x == w);
    if has("lane") && (has("change") || has("shift")) {
        if has("left") {
            return InstructionKind::ChangeLaneLeft;
        }
        if has("right") {
            return InstructionKind::ChangeLaneRight;
        }
    }
    if has("stop") || has("halt") {
        return InstructionKind::StopAtLight;
    }
    if has("left") {
        return InstructionKind::TurnLeft;
    }
    if has("right") {
        return InstructionKind::TurnRight;
    }
    InstructionKind::FollowLane
}

/// Token <-> id table over the closed grammar. Versioned so persisted
/// datasets and checkpoints can assert compatibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub version: u32,
    pub tokens: Vec<String>,
}

impl Vocabulary {
    /// Build from the grammar: specials first, then words in first-seen order.
    pub fn build() -> Vocabulary {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        for sentence in all_sentences() {
            for word in sentence.split_whitespace() {
                if !tokens.iter().any(|t| t == word) {
                    tokens.push(word.to_string());
                }
            }
        }
        Vocabulary { version: 1, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens
            .iter()
            .position(|t| t == token)
            .unwrap_or_else(|| self.id(UNK))
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn bos_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        2
    }

    pub fn unk_id(&self) -> usize {
        3
    }

    /// Lowercase whitespace tokenization wrapped in BOS/EOS.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![self.bos_id()];
        for word in text.to_lowercase().split_whitespace() {
            ids.push(
                self.tokens
                    .iter()
                    .position(|t| t == word)
                    .unwrap_or(self.unk_id()),
            );
        }
        ids.push(self.eos_id());
        ids
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id > self.unk_id())
            .map(|&id| self.tokens[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::other(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_size_is_small_and_stable() {
        let v = Vocabulary::build();
        assert!(v.len() >= 30 && v.len() <= 60, "vocab size {}", v.len());
        assert_eq!(v.tokens[..4], [PAD, BOS, EOS, UNK].map(String::from));
    }

    #[test]
    fn empty_text_is_bos_eos() {
        let v = Vocabulary::build();
        assert_eq!(v.tokenize(""), vec![v.bos_id(), v.eos_id()]);
    }

    #[test]
    fn tokenize_is_deterministic() {
        let v = Vocabulary::build();
        assert_eq!(v.tokenize("turn left"), v.tokenize("turn left"));
    }

    #[test]
    fn roundtrip_over_entire_grammar() {
        let v = Vocabulary::build();
        for s in all_sentences() {
            let ids = v.tokenize(&s);
            assert!(ids.iter().all(|&id| id < v.len()), "id out of bounds");
            assert_eq!(v.detokenize(&ids), s, "roundtrip failed for {s:?}");
        }
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::build();
        let ids = v.tokenize("zebra crossing");
        assert!(ids.contains(&v.unk_id()));
    }

    #[test]
    fn kinds_parse_for_all_phrasings() {
        for kind in ALL_KINDS {
            for p in phrases(kind) {
                assert_eq!(parse_kind(p), kind, "phrase {p:?}");
            }
        }
    }
}
