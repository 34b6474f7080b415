//! Byte-pair-encoding tokenizer compatible with the CLIP text tokenizer.
//!
//! Text goes through the same pipeline as the reference implementation:
//! NFC normalization with typographic quotes straightened, whitespace
//! collapsed, lowercased, split into pre-tokens by the CLIP pattern, and
//! each pre-token byte-encoded and merged by rank. Every byte has a base
//! symbol, so no input can fail to tokenize.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Read;

use regex::Regex;
use serde::de::{self, DeserializeSeed, MapAccess, Visitor};
use unicode_normalization::char::canonical_combining_class;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const DEFAULT_MAX_LENGTH: usize = 77;

const CLIP_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+";

static CLIP_VOCAB: &[u8] = include_bytes!("../assets/clip/vocab.json");
static CLIP_MERGES: &[u8] = include_bytes!("../assets/clip/merges.txt");

/// Names of the marker tokens looked up in the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub begin: String,
    pub end: String,
    pub pad: String,
}

impl Default for SpecialTokens {
    /// CLIP conventions: `<|startoftext|>`, `<|endoftext|>`, and padding
    /// with token id 0 (`!`) as the original `clip.tokenize` does.
    fn default() -> Self {
        Self {
            begin: "<|startoftext|>".into(),
            end: "<|endoftext|>".into(),
            pad: "!".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VocabConfig {
    pub specials: SpecialTokens,
    pub max_length: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            specials: SpecialTokens::default(),
            max_length: DEFAULT_MAX_LENGTH,
        }
    }
}

/// Character span `[start, end)` in the source prompt, counted in Unicode
/// scalar values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
struct Symbol {
    text: String,
    bytes: Vec<u8>,
    end_of_word: bool,
    id: Option<u32>,
}

/// An immutable BPE vocabulary plus merge table.
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: HashMap<u32, String>,
    merges: Vec<(String, String)>,
    symbols: Vec<Symbol>,
    merge_table: HashMap<(u32, u32), (usize, u32)>,
    byte_decoder: HashMap<char, u8>,
    specials: SpecialTokens,
    begin_id: u32,
    end_id: u32,
    pad_id: u32,
    max_length: usize,
    pattern: Regex,
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary")
            .field("len", &self.token_to_id.len())
            .field("merges", &self.merges.len())
            .field("begin_id", &self.begin_id)
            .field("end_id", &self.end_id)
            .field("pad_id", &self.pad_id)
            .field("max_length", &self.max_length)
            .finish()
    }
}

/// The reversible byte → printable-character table used by CLIP's BPE.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut assigned = [false; 256];
    let printable = (b'!'..=b'~').chain(0xA1u8..=0xAC).chain(0xAEu8..=0xFF);
    for b in printable {
        table[b as usize] = char::from(b);
        assigned[b as usize] = true;
    }
    let mut n = 0u32;
    for b in 0..256usize {
        if !assigned[b] {
            table[b] = char::from_u32(256 + n).expect("valid scalar");
            n += 1;
        }
    }
    table
}

struct VocabSeed<'a> {
    duplicate: &'a RefCell<Option<Duplicate>>,
}

enum Duplicate {
    Token(String),
    Id(u32),
}

impl<'de> DeserializeSeed<'de> for VocabSeed<'_> {
    type Value = Vec<(String, u32)>;

    fn deserialize<D: de::Deserializer<'de>>(self, deserializer: D) -> Result<Self::Value, D::Error> {
        deserializer.deserialize_map(self)
    }
}

impl<'de> Visitor<'de> for VocabSeed<'_> {
    type Value = Vec<(String, u32)>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a JSON object mapping token strings to integer ids")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
        let mut entries = Vec::new();
        let mut tokens = HashSet::new();
        let mut ids = HashSet::new();
        while let Some(token) = map.next_key::<String>()? {
            if tokens.contains(&token) {
                *self.duplicate.borrow_mut() = Some(Duplicate::Token(token));
                return Err(de::Error::custom("duplicate token"));
            }
            let id: u32 = map.next_value()?;
            if !ids.insert(id) {
                *self.duplicate.borrow_mut() = Some(Duplicate::Id(id));
                return Err(de::Error::custom("duplicate id"));
            }
            tokens.insert(token.clone());
            entries.push((token, id));
        }
        Ok(entries)
    }
}

fn parse_vocab_json(bytes: &[u8]) -> Result<Vec<(String, u32)>> {
    let duplicate = RefCell::new(None);
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let parsed = VocabSeed {
        duplicate: &duplicate,
    }
    .deserialize(&mut de)
    .and_then(|entries| de.end().map(|_| entries));
    parsed.map_err(|e| match duplicate.into_inner() {
        Some(Duplicate::Token(token)) => Error::DuplicateToken {
            line: e.line(),
            token,
        },
        Some(Duplicate::Id(id)) => Error::DuplicateId { line: e.line(), id },
        None => Error::MalformedVocab {
            line: e.line(),
            reason: e.to_string(),
        },
    })
}

fn parse_merges(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut merges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 && line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => merges.push((line_no, a.to_string(), b.to_string())),
            _ => {
                return Err(Error::MalformedMerge {
                    line: line_no,
                    reason: format!("expected two space-separated symbols, found {line:?}"),
                })
            }
        }
    }
    Ok(merges)
}

impl Vocabulary {
    /// Loads a vocabulary with CLIP's default special tokens and length.
    pub fn load(vocab_source: impl Read, merges_source: impl Read) -> Result<Self> {
        Self::load_with(vocab_source, merges_source, VocabConfig::default())
    }

    pub fn load_with(
        mut vocab_source: impl Read,
        mut merges_source: impl Read,
        config: VocabConfig,
    ) -> Result<Self> {
        let mut vocab_bytes = Vec::new();
        vocab_source.read_to_end(&mut vocab_bytes)?;
        let mut merges_bytes = Vec::new();
        merges_source.read_to_end(&mut merges_bytes)?;
        let merges_text = String::from_utf8(merges_bytes).map_err(|e| Error::MalformedMerge {
            line: 1 + e.as_bytes()[..e.utf8_error().valid_up_to()]
                .iter()
                .filter(|&&b| b == b'\n')
                .count(),
            reason: "invalid UTF-8".into(),
        })?;
        let entries = parse_vocab_json(&vocab_bytes)?;
        let merges = parse_merges(&merges_text)?;
        Self::from_parts(entries, merges, config)
    }

    /// The CLIP ViT-L/14 vocabulary (49408 tokens) bundled with the crate.
    pub fn clip() -> Self {
        Self::load(CLIP_VOCAB, CLIP_MERGES).expect("bundled CLIP vocabulary is valid")
    }

    fn from_parts(
        entries: Vec<(String, u32)>,
        merge_lines: Vec<(usize, String, String)>,
        config: VocabConfig,
    ) -> Result<Self> {
        if config.max_length < 2 {
            return Err(Error::InvalidVocab(format!(
                "max_length {} leaves no room for begin and end markers",
                config.max_length
            )));
        }
        let token_to_id: HashMap<String, u32> = entries.iter().cloned().collect();
        let id_to_token: HashMap<u32, String> = entries.into_iter().map(|(t, i)| (i, t)).collect();
        let lookup = |name: &str| {
            token_to_id
                .get(name)
                .copied()
                .ok_or_else(|| Error::MissingSpecialToken(name.to_string()))
        };
        let begin_id = lookup(&config.specials.begin)?;
        let end_id = lookup(&config.specials.end)?;
        let pad_id = lookup(&config.specials.pad)?;
        if begin_id == end_id {
            return Err(Error::InvalidVocab("begin and end markers share an id".into()));
        }

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();

        let mut symbols = Vec::with_capacity(512 + merge_lines.len());
        for end_of_word in [false, true] {
            for (b, c) in byte_encoder.iter().enumerate() {
                let mut text = c.to_string();
                if end_of_word {
                    text.push_str(END_OF_WORD);
                }
                symbols.push(Symbol {
                    id: token_to_id.get(&text).copied(),
                    text,
                    bytes: vec![b as u8],
                    end_of_word,
                });
            }
        }
        let mut symbol_index: HashMap<String, u32> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.text.clone(), i as u32))
            .collect();

        let mut merge_table = HashMap::with_capacity(merge_lines.len());
        let mut merges = Vec::with_capacity(merge_lines.len());
        for (rank, (line, first, second)) in merge_lines.into_iter().enumerate() {
            let resolve = |s: &str| {
                symbol_index.get(s).copied().ok_or_else(|| Error::UnresolvableMerge {
                    line,
                    symbol: s.to_string(),
                })
            };
            let a = resolve(&first)?;
            let b = resolve(&second)?;
            let merged = format!("{first}{second}");
            let result = match symbol_index.get(&merged) {
                Some(&idx) => idx,
                None => {
                    let idx = symbols.len() as u32;
                    let (sa, sb) = (&symbols[a as usize], &symbols[b as usize]);
                    let bytes = [sa.bytes.as_slice(), sb.bytes.as_slice()].concat();
                    let end_of_word = sb.end_of_word;
                    symbols.push(Symbol {
                        id: token_to_id.get(&merged).copied(),
                        text: merged.clone(),
                        bytes,
                        end_of_word,
                    });
                    symbol_index.insert(merged, idx);
                    idx
                }
            };
            merge_table.entry((a, b)).or_insert((rank, result));
            merges.push((first, second));
        }

        let mut specials_alt: Vec<String> = [&config.specials.begin, &config.specials.end]
            .iter()
            .map(|s| regex::escape(s))
            .collect();
        specials_alt.push(CLIP_PATTERN.to_string());
        let pattern = Regex::new(&specials_alt.join("|"))
            .map_err(|e| Error::InvalidVocab(format!("special tokens form an invalid pattern: {e}")))?;

        Ok(Self {
            token_to_id,
            id_to_token,
            merges,
            symbols,
            merge_table,
            byte_decoder,
            specials: config.specials,
            begin_id,
            end_id,
            pad_id,
            max_length: config.max_length,
            pattern,
        })
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn begin_id(&self) -> u32 {
        self.begin_id
    }

    pub fn end_id(&self) -> u32 {
        self.end_id
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(&id).map(String::as_str)
    }

    /// Splits a prompt into exactly `max_length` ids: begin marker, at most
    /// `max_length - 2` content tokens, end marker, then padding.
    pub fn tokenize(&self, prompt: &str) -> TokenSequence {
        let normalized = normalize(prompt);
        let text = &normalized.text;
        let byte_to_char = byte_to_char_index(text);

        let mut content: Vec<(u32, Span)> = Vec::new();
        for m in self.pattern.find_iter(text) {
            let piece = m.as_str();
            if piece == self.specials.begin || piece == self.specials.end {
                let id = if piece == self.specials.begin {
                    self.begin_id
                } else {
                    self.end_id
                };
                content.push((id, normalized.source_span(&byte_to_char, m.start(), m.end())));
                continue;
            }
            let mut offset = m.start();
            for sym in self.bpe(piece.as_bytes()) {
                let symbol = &self.symbols[sym as usize];
                let start = offset;
                offset += symbol.bytes.len();
                let span = normalized.source_span(&byte_to_char, start, offset);
                match symbol.id {
                    Some(id) => content.push((id, span)),
                    None => self.push_byte_fallback(symbol, span, &mut content),
                }
            }
        }

        content.truncate(self.max_length - 2);
        let mut ids = Vec::with_capacity(self.max_length);
        ids.push(self.begin_id);
        ids.extend(content.iter().map(|(id, _)| *id));
        ids.push(self.end_id);
        ids.resize(self.max_length, self.pad_id);
        TokenSequence {
            content_len: content.len(),
            spans: content.into_iter().map(|(_, s)| Some(s)).collect(),
            ids,
        }
    }

    // A merged symbol missing from the vocabulary is emitted as its bytes;
    // a byte symbol missing in both its plain and end-of-word forms is dropped.
    fn push_byte_fallback(&self, symbol: &Symbol, span: Span, out: &mut Vec<(u32, Span)>) {
        let last = symbol.bytes.len() - 1;
        for (i, &b) in symbol.bytes.iter().enumerate() {
            let eow = symbol.end_of_word && i == last;
            let preferred = &self.symbols[b as usize + if eow { 256 } else { 0 }];
            let other = &self.symbols[b as usize + if eow { 0 } else { 256 }];
            if let Some(id) = preferred.id.or(other.id) {
                out.push((id, span));
            }
        }
    }

    fn bpe(&self, bytes: &[u8]) -> Vec<u32> {
        let mut word: Vec<u32> = bytes.iter().map(|&b| u32::from(b)).collect();
        if let Some(last) = word.last_mut() {
            *last += 256;
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.merge_table.get(&(w[0], w[1])).map(|&(rank, res)| (rank, w[0], w[1], res)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, first, second, merged)) = best else {
                break;
            };
            let mut next = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(word[i]);
                    i += 1;
                }
            }
            word = next;
        }
        word
    }

    /// Joins the content tokens back into text; end-of-word markers become
    /// spaces and trailing whitespace is trimmed.
    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in seq.content_ids() {
            let token = self.token(id).ok_or(Error::UnknownTokenId(id))?;
            let (body, space) = match token.strip_suffix(END_OF_WORD) {
                Some(body) if id != self.begin_id && id != self.end_id => (body, true),
                _ => (token, false),
            };
            for c in body.chars() {
                match self.byte_decoder.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => bytes.extend_from_slice(c.encode_utf8(&mut [0; 4]).as_bytes()),
                }
            }
            if space {
                bytes.push(b' ');
            }
        }
        for &id in seq.ids() {
            if self.token(id).is_none() {
                return Err(Error::UnknownTokenId(id));
            }
        }
        Ok(String::from_utf8_lossy(&bytes).trim_end().to_string())
    }
}

/// A fixed-length id sequence: begin marker, content, end marker, padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    content_len: usize,
    spans: Vec<Option<Span>>,
}

impl TokenSequence {
    /// Rebuilds a sequence from raw ids. Content ends at the first end
    /// marker after position 0; source spans are unknown.
    pub fn from_ids(ids: Vec<u32>, vocab: &Vocabulary) -> Result<Self> {
        if ids.len() != vocab.max_length {
            return Err(Error::InvalidParameter(format!(
                "token sequence has {} ids, expected {}",
                ids.len(),
                vocab.max_length
            )));
        }
        if ids[0] != vocab.begin_id {
            return Err(Error::InvalidParameter("sequence does not start with the begin marker".into()));
        }
        let end_pos = ids[1..]
            .iter()
            .position(|&id| id == vocab.end_id)
            .map(|p| p + 1)
            .ok_or_else(|| Error::InvalidParameter("sequence has no end marker".into()))?;
        if ids[end_pos + 1..].iter().any(|&id| id != vocab.pad_id) {
            return Err(Error::InvalidParameter("non-padding id after the end marker".into()));
        }
        let content_len = end_pos - 1;
        Ok(Self {
            ids,
            content_len,
            spans: vec![None; content_len],
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn content_ids(&self) -> &[u32] {
        &self.ids[1..1 + self.content_len]
    }

    pub fn content_len(&self) -> usize {
        self.content_len
    }

    /// Source span of each content token.
    pub fn spans(&self) -> &[Option<Span>] {
        &self.spans
    }

    /// Index of the end marker.
    pub fn end_position(&self) -> usize {
        self.content_len + 1
    }
}

struct Normalized {
    text: String,
    // Source char range for every char of `text`.
    source: Vec<(usize, usize)>,
}

impl Normalized {
    fn source_span(&self, byte_to_char: &[usize], start_byte: usize, end_byte: usize) -> Span {
        let first = byte_to_char[start_byte];
        let last = byte_to_char[end_byte - 1];
        let start = self.source[first..=last].iter().map(|r| r.0).min().unwrap_or(0);
        let end = self.source[first..=last].iter().map(|r| r.1).max().unwrap_or(0);
        Span { start, end }
    }
}

fn byte_to_char_index(text: &str) -> Vec<usize> {
    let mut index = vec![0; text.len()];
    for (ci, (bi, c)) in text.char_indices().enumerate() {
        index[bi..bi + c.len_utf8()].fill(ci);
    }
    index
}

fn straighten_quote(c: char) -> char {
    match c {
        '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' => '\'',
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' => '"',
        _ => c,
    }
}

// Python's str.split() also treats the ASCII information separators as
// whitespace.
fn is_split_whitespace(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

fn normalize(prompt: &str) -> Normalized {
    let src: Vec<char> = prompt.chars().collect();

    // NFC per combining sequence so every output char keeps a source range.
    let mut composed: Vec<(char, (usize, usize))> = Vec::with_capacity(src.len());
    let mut seg_start = 0;
    for i in 1..=src.len() {
        if i == src.len() || canonical_combining_class(src[i]) == 0 {
            let range = (seg_start, i);
            if i - seg_start == 1 && src[seg_start].is_ascii() {
                composed.push((src[seg_start], range));
            } else {
                composed.extend(src[seg_start..i].iter().copied().nfc().map(|c| (c, range)));
            }
            seg_start = i;
        }
    }
    let whole: String = prompt.nfc().collect();
    if !composed.iter().map(|(c, _)| *c).eq(whole.chars()) {
        // Composition crossed a segment boundary; fall back to coarse spans.
        composed = whole.chars().map(|c| (c, (0, src.len()))).collect();
    }

    let mut collapsed = String::with_capacity(prompt.len());
    let mut ranges = Vec::with_capacity(composed.len());
    let mut pending_space = false;
    for (c, range) in composed {
        if is_split_whitespace(c) {
            pending_space = !collapsed.is_empty();
            continue;
        }
        if pending_space {
            collapsed.push(' ');
            ranges.push(range);
            pending_space = false;
        }
        collapsed.push(straighten_quote(c));
        ranges.push(range);
    }

    let text = collapsed.to_lowercase();
    let mut source = Vec::with_capacity(text.len());
    for (c, range) in collapsed.chars().zip(ranges) {
        for _ in c.to_lowercase() {
            source.push(range);
        }
    }
    debug_assert_eq!(source.len(), text.chars().count());
    Normalized { text, source }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Vocabulary {
        let vocab = r#"{"<|startoftext|>": 0, "<|endoftext|>": 1, "<|pad|>": 2, "a": 3}"#;
        let config = VocabConfig {
            specials: SpecialTokens {
                pad: "<|pad|>".into(),
                ..SpecialTokens::default()
            },
            max_length: 8,
        };
        Vocabulary::load_with(vocab.as_bytes(), &b""[..], config).unwrap()
    }

    #[test]
    fn minimal_vocabulary_loads() {
        let v = minimal();
        assert_eq!(v.len(), 4);
        assert_eq!((v.begin_id(), v.end_id(), v.pad_id()), (0, 1, 2));
    }

    #[test]
    fn minimal_vocabulary_drops_unrepresentable_bytes() {
        let v = minimal();
        // "a" exists only without the end-of-word marker; "b" not at all.
        let seq = v.tokenize("a b");
        assert_eq!(seq.ids(), &[0, 3, 1, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn duplicate_token_reports_line() {
        let vocab = "{\n\"<|startoftext|>\": 0,\n\"<|endoftext|>\": 1,\n\"a\": 2,\n\"a\": 3\n}";
        let err = Vocabulary::load(vocab.as_bytes(), &b""[..]).unwrap_err();
        match err {
            Error::DuplicateToken { line, token } => {
                assert_eq!(token, "a");
                assert_eq!(line, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let vocab = r#"{"<|startoftext|>": 0, "<|endoftext|>": 1, "!": 1}"#;
        assert!(matches!(
            Vocabulary::load(vocab.as_bytes(), &b""[..]),
            Err(Error::DuplicateId { id: 1, .. })
        ));
    }

    #[test]
    fn malformed_json_reports_line() {
        let vocab = "{\n\"a\": 0,\n\"b\": x\n}";
        match Vocabulary::load(vocab.as_bytes(), &b""[..]).unwrap_err() {
            Error::MalformedVocab { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn merge_errors_carry_line_numbers() {
        let vocab = r#"{"<|startoftext|>": 0, "<|endoftext|>": 1, "!": 2}"#;
        let bad_arity = "#version: 0.2\ni n\nt h e\n";
        match Vocabulary::load(vocab.as_bytes(), bad_arity.as_bytes()).unwrap_err() {
            Error::MalformedMerge { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let unresolvable = "#version: 0.2\ni n\nth e</w>\n";
        match Vocabulary::load(vocab.as_bytes(), unresolvable.as_bytes()).unwrap_err() {
            Error::UnresolvableMerge { line, symbol } => {
                assert_eq!(line, 3);
                assert_eq!(symbol, "th");
            }
            other => panic!("unexpected {other:?}"),
        }
        // Earlier merges make their results available.
        let ok = "i n\nin g</w>\n";
        assert!(Vocabulary::load(vocab.as_bytes(), ok.as_bytes()).is_ok());
    }

    #[test]
    fn missing_special_and_short_length_rejected() {
        let vocab = r#"{"<|startoftext|>": 0, "!": 2}"#;
        assert!(matches!(
            Vocabulary::load(vocab.as_bytes(), &b""[..]),
            Err(Error::MissingSpecialToken(_))
        ));
        let vocab = r#"{"<|startoftext|>": 0, "<|endoftext|>": 1, "!": 2}"#;
        let config = VocabConfig {
            max_length: 1,
            ..VocabConfig::default()
        };
        assert!(Vocabulary::load_with(vocab.as_bytes(), &b""[..], config).is_err());
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let table = bytes_to_unicode();
        let unique: HashSet<char> = table.iter().copied().collect();
        assert_eq!(unique.len(), 256);
        assert_eq!(table[b'a' as usize], 'a');
        assert_eq!(table[b' ' as usize], '\u{120}');
    }

    #[test]
    fn normalization_tracks_source_chars() {
        let n = normalize("  Hello\t  WORLD ");
        assert_eq!(n.text, "hello world");
        assert_eq!(n.source[0], (2, 3));
        assert_eq!(n.source[6], (10, 11));
        let n = normalize("cafe\u{301} “x”");
        assert_eq!(n.text, "café \"x\"");
        assert_eq!(n.source[3], (3, 5));
    }

    #[test]
    fn from_ids_validates_structure() {
        let v = minimal();
        assert!(TokenSequence::from_ids(vec![0, 3, 1, 2, 2, 2, 2, 2], &v).is_ok());
        assert!(TokenSequence::from_ids(vec![0, 3, 1, 3, 2, 2, 2, 2], &v).is_err());
        assert!(TokenSequence::from_ids(vec![3, 3, 1, 2, 2, 2, 2, 2], &v).is_err());
        assert!(TokenSequence::from_ids(vec![0, 3, 1], &v).is_err());
    }
}
