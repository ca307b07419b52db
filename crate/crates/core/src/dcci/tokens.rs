//! Token estimation and context-window budgeting.

use serde::{Deserialize, Serialize};

use super::DcciError;

/// Appended to any context that had to be cut to fit the window.
pub const TRUNCATION_MARKER: &str = "\n[...content truncated to fit context window...]";

/// Output tokens kept free for the model's answer unless configured otherwise.
pub const DEFAULT_RESERVED_OUTPUT: u64 = 1_024;

/// Counts tokens for budgeting. Implementations must be deterministic and
/// monotone non-decreasing as words are appended.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> u64;

    /// Token count of any text holding exactly `words` whitespace-separated
    /// words, for tokenizers that depend on the word count alone.
    fn count_words(&self, _words: u64) -> Option<u64> {
        None
    }
}

/// `ceil(words * 4 / 3)` over whitespace-separated words, i.e. 0.75 words
/// per token.
#[derive(Debug, Default, Clone, Copy)]
pub struct WordRatioTokenizer;

impl Tokenizer for WordRatioTokenizer {
    fn count(&self, text: &str) -> u64 {
        words_to_tokens(text.split_whitespace().count() as u64)
    }

    fn count_words(&self, words: u64) -> Option<u64> {
        Some(words_to_tokens(words))
    }
}

pub fn words_to_tokens(words: u64) -> u64 {
    (words * 4).div_ceil(3)
}

pub fn estimate_tokens(text: &str) -> u64 {
    WordRatioTokenizer.count(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub window_tokens: u64,
    pub reserved_output: u64,
    pub overhead: u64,
}

impl TokenBudget {
    pub fn new(window_tokens: u64, reserved_output: u64) -> Result<Self, DcciError> {
        Self::with_overhead(window_tokens, reserved_output, 0)
    }

    pub fn with_overhead(window_tokens: u64, reserved_output: u64, overhead: u64) -> Result<Self, DcciError> {
        if window_tokens == 0 || reserved_output == 0 {
            return Err(DcciError::InvalidBudget(
                "window_tokens and reserved_output must be positive".into(),
            ));
        }
        if reserved_output + overhead > window_tokens {
            return Err(DcciError::BudgetTooSmall {
                needed: reserved_output + overhead,
                available: window_tokens,
            });
        }
        Ok(Self {
            window_tokens,
            reserved_output,
            overhead,
        })
    }

    /// Tokens the whole prompt may occupy.
    pub fn prompt_limit(&self) -> u64 {
        self.window_tokens - self.reserved_output
    }

    pub fn available_for_context(&self) -> u64 {
        self.window_tokens - self.reserved_output - self.overhead
    }
}

/// Outcome of [`fit_to_budget`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fitted {
    pub text: String,
    pub truncated: bool,
}

pub fn fit_to_budget(text: &str, budget: &TokenBudget) -> Result<Fitted, DcciError> {
    fit_with(&WordRatioTokenizer, text, budget.available_for_context())
}

/// Keep `text` whole when it fits in `available` tokens; otherwise keep the
/// longest word-boundary prefix that fits together with the marker.
pub fn fit_with(tokenizer: &dyn Tokenizer, text: &str, available: u64) -> Result<Fitted, DcciError> {
    let marker_tokens = tokenizer.count(TRUNCATION_MARKER);
    if available == 0 {
        return Err(DcciError::BudgetTooSmall {
            needed: marker_tokens.max(1),
            available,
        });
    }
    if tokenizer.count(text) <= available {
        return Ok(Fitted {
            text: text.to_string(),
            truncated: false,
        });
    }
    if marker_tokens > available {
        return Err(DcciError::BudgetTooSmall {
            needed: marker_tokens,
            available,
        });
    }

    // Byte offsets where each word ends; a prefix ending at word_ends[k-1]
    // holds exactly k words.
    let word_ends: Vec<usize> = word_end_offsets(text);
    let candidate = |k: usize| -> String {
        let prefix = if k == 0 { "" } else { text[..word_ends[k - 1]].trim_end() };
        format!("{prefix}{TRUNCATION_MARKER}")
    };

    let marker_words = TRUNCATION_MARKER.split_whitespace().count() as u64;
    let fits = |k: usize| match tokenizer.count_words(k as u64 + marker_words) {
        Some(tokens) => tokens <= available,
        None => tokenizer.count(&candidate(k)) <= available,
    };

    // Largest k with count(candidate(k)) <= available; k = 0 is known to fit.
    let (mut lo, mut hi) = (0usize, word_ends.len());
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }

    let text = candidate(lo);
    let text = if lo == 0 {
        text.trim_start().to_string()
    } else {
        text
    };
    Ok(Fitted {
        text,
        truncated: true,
    })
}

fn word_end_offsets(text: &str) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                ends.push(i);
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    if in_word {
        ends.push(text.len());
    }
    ends
}

/// Strip the truncation marker, if present.
pub fn without_marker(text: &str) -> &str {
    text.strip_suffix(TRUNCATION_MARKER)
        .or_else(|| text.strip_suffix(TRUNCATION_MARKER.trim_start()))
        .unwrap_or(text)
}
