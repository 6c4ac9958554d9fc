//! Default subword tokenization.
//!
//! A small frequency-greedy pair-merge vocabulary learned over whitespace-split
//! words, encoded with greedy longest match. Word-initial pieces carry the
//! [`WORD_MARK`] prefix so that decoding is an exact inverse of encoding.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Prefix of word-initial pieces. Every space in the input becomes one mark.
pub const WORD_MARK: char = '\u{2581}';

pub const PAD_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;
/// Pad, eos and unk; span sentinels follow.
pub const FIXED_SPECIALS: usize = 3;

pub const DEFAULT_VOCAB_SIZE: usize = 1024;
pub const DEFAULT_SENTINELS: usize = 16;

/// Dense subword vocabulary: reserved specials first, then learned pieces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    index: HashMap<String, TokenId>,
    reserved: usize,
    max_piece_chars: usize,
}

fn special_pieces(reserved: usize) -> Vec<String> {
    let mut out = vec!["<pad>".to_string(), "</s>".to_string(), "<unk>".to_string()];
    for k in 0..reserved.saturating_sub(FIXED_SPECIALS) {
        out.push(format!("<extra_id_{k}>"));
    }
    out
}

/// Splits text into marked words: `"ab  c"` becomes `["▁ab", "▁", "▁c"]`.
pub fn pretokenize(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let mut words = Vec::new();
    let mut current = String::new();
    current.push(WORD_MARK);
    for c in text.chars() {
        if c == ' ' {
            words.push(std::mem::take(&mut current));
            current.push(WORD_MARK);
        } else {
            current.push(c);
        }
    }
    words.push(current);
    words
}

impl SubwordVocab {
    /// Learns a vocabulary of exactly `target_size` entries.
    ///
    /// Base pieces are all characters of the marked corpus; merges pick the most
    /// frequent adjacent pair, ties broken by the lexicographically smallest
    /// merged string.
    pub fn learn<S: AsRef<str>>(corpus: &[S], target_size: usize, reserved: usize) -> Result<Self> {
        if reserved < FIXED_SPECIALS {
            return Err(Error::InvalidArgument(format!(
                "reserved must be at least {FIXED_SPECIALS}, got {reserved}"
            )));
        }
        let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for w in pretokenize(line.as_ref()) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let mut alphabet: Vec<String> = word_counts
            .keys()
            .flat_map(|w| w.chars())
            .collect::<HashSet<char>>()
            .into_iter()
            .map(String::from)
            .collect();
        alphabet.sort();
        let required = reserved + alphabet.len();
        if target_size < required {
            return Err(Error::TargetTooSmall {
                target: target_size,
                required,
            });
        }

        let mut pieces = special_pieces(reserved);
        let mut known: HashSet<String> = pieces.iter().cloned().collect();
        for a in alphabet {
            known.insert(a.clone());
            pieces.push(a);
        }

        // Each distinct word as its current symbol sequence.
        let mut words: Vec<(Vec<String>, u64)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.chars().map(String::from).collect(), c))
            .collect();

        while pieces.len() < target_size {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, count) in &words {
                for pair in syms.windows(2) {
                    *pairs
                        .entry((pair[0].as_str(), pair[1].as_str()))
                        .or_default() += count;
                }
            }
            let best = pairs
                .into_iter()
                .map(|((l, r), c)| (c, format!("{l}{r}"), l.to_string(), r.to_string()))
                .min_by(|a, b| {
                    b.0.cmp(&a.0)
                        .then_with(|| a.1.cmp(&b.1))
                        .then_with(|| a.2.cmp(&b.2))
                });
            let Some((_, merged, left, right)) = best else {
                return Err(Error::TargetUnreachable {
                    target: target_size,
                    reached: pieces.len(),
                });
            };
            for (syms, _) in words.iter_mut() {
                let mut i = 0;
                let mut out = Vec::with_capacity(syms.len());
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut syms[i]));
                        i += 1;
                    }
                }
                *syms = out;
            }
            if known.insert(merged.clone()) {
                pieces.push(merged);
            }
        }
        Self::from_pieces(pieces, reserved)
    }

    /// Builds a vocabulary from an explicit piece list whose first `reserved`
    /// entries are the specials.
    pub fn from_pieces(pieces: Vec<String>, reserved: usize) -> Result<Self> {
        if reserved < FIXED_SPECIALS || pieces.len() < reserved {
            return Err(Error::InvalidArgument(format!(
                "vocabulary of {} pieces cannot hold {reserved} reserved ids",
                pieces.len()
            )));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::InvalidArgument(format!("empty piece at id {i}")));
            }
            if index.insert(p.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate piece {p:?}")));
            }
        }
        let max_piece_chars = pieces[reserved..]
            .iter()
            .map(|p| p.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            pieces,
            index,
            reserved,
            max_piece_chars,
        })
    }

    /// Convenience constructor: standard specials plus the given learned pieces.
    pub fn with_specials<S: AsRef<str>>(learned: &[S], num_sentinels: usize) -> Result<Self> {
        let reserved = FIXED_SPECIALS + num_sentinels;
        let mut pieces = special_pieces(reserved);
        pieces.extend(learned.iter().map(|s| s.as_ref().to_string()));
        Self::from_pieces(pieces, reserved)
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn reserved(&self) -> usize {
        self.reserved
    }

    pub fn num_sentinels(&self) -> usize {
        self.reserved - FIXED_SPECIALS
    }

    pub fn sentinel(&self, k: usize) -> Option<TokenId> {
        (k < self.num_sentinels()).then(|| (FIXED_SPECIALS + k) as TokenId)
    }

    pub fn is_sentinel(&self, id: TokenId) -> bool {
        (id as usize) >= FIXED_SPECIALS && (id as usize) < self.reserved
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Pieces produced by learning (everything after the reserved range).
    pub fn learned_pieces(&self) -> &[String] {
        &self.pieces[self.reserved..]
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Id of a learned piece. Special strings are not resolved here so that
    /// text can never produce reserved ids.
    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index
            .get(piece)
            .copied()
            .filter(|&id| id as usize >= self.reserved)
    }

    pub fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    /// Greedy longest match over one marked word.
    pub fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let longest = (1..=self.max_piece_chars.min(chars.len() - i))
                .rev()
                .find_map(|len| {
                    let end = chars.get(i + len).map_or(word.len(), |&(b, _)| b);
                    self.id(&word[start..end]).map(|id| (id, len))
                });
            match longest {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK_ID);
                    i += 1;
                }
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for w in pretokenize(text) {
            self.encode_word(&w, &mut out);
        }
        out
    }

    /// Exact inverse of [`encode`](Self::encode) on its outputs.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let p = self.piece(id).ok_or(Error::IdOutOfRange {
                id: id as usize,
                size: self.size(),
            })?;
            s.push_str(p);
        }
        let mut text: String = s
            .chars()
            .map(|c| if c == WORD_MARK { ' ' } else { c })
            .collect();
        if text.starts_with(' ') {
            text.remove(0);
        }
        Ok(text)
    }

    /// Decodes model output: stops at eos, drops pad and sentinels.
    pub fn decode_generated(&self, ids: &[TokenId]) -> Result<String> {
        let kept: Vec<TokenId> = ids
            .iter()
            .copied()
            .take_while(|&id| id != EOS_ID)
            .filter(|&id| id != PAD_ID && !self.is_sentinel(id))
            .collect();
        self.decode(&kept)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#mowe-vocab reserved={}", self.reserved);
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("vocab file", "missing header line"))?;
        let reserved = header
            .strip_prefix("#mowe-vocab reserved=")
            .and_then(|r| r.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::parse("vocab file", format!("bad header {header:?}")))?;
        Self::from_pieces(lines.map(str::to_string).collect(), reserved)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn content_hash(&self) -> String {
        crate::util::sha256_hex(self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(s: &str) -> String {
        format!("{WORD_MARK}{s}")
    }

    #[test]
    fn pretokenize_marks_every_space() {
        assert_eq!(pretokenize(""), Vec::<String>::new());
        assert_eq!(pretokenize("ab c"), vec![m("ab"), m("c")]);
        assert_eq!(pretokenize("a  b"), vec![m("a"), m(""), m("b")]);
        assert_eq!(pretokenize(" a"), vec![m(""), m("a")]);
        assert_eq!(pretokenize("a "), vec![m("a"), m("")]);
    }

    /// Independent pair-frequency count for the three-word corpus.
    fn brute_force_first_merges(words: &[&str], merges: usize) -> Vec<String> {
        let mut seqs: Vec<Vec<String>> = words
            .iter()
            .map(|w| m(w).chars().map(String::from).collect())
            .collect();
        let mut learned = Vec::new();
        for _ in 0..merges {
            let mut counts: Vec<(String, String, u64)> = Vec::new();
            for s in &seqs {
                for i in 0..s.len().saturating_sub(1) {
                    match counts
                        .iter_mut()
                        .find(|(l, r, _)| *l == s[i] && *r == s[i + 1])
                    {
                        Some(e) => e.2 += 1,
                        None => counts.push((s[i].clone(), s[i + 1].clone(), 1)),
                    }
                }
            }
            let top = counts.iter().map(|c| c.2).max().unwrap();
            let mut best: Vec<_> = counts.into_iter().filter(|c| c.2 == top).collect();
            best.sort_by_key(|(l, r, _)| format!("{l}{r}"));
            let (l, r, _) = best.remove(0);
            for s in seqs.iter_mut() {
                let mut i = 0;
                while i + 1 < s.len() {
                    if s[i] == l && s[i + 1] == r {
                        s[i] = format!("{l}{r}");
                        s.remove(i + 1);
                    }
                    i += 1;
                }
            }
            learned.push(format!("{l}{r}"));
        }
        learned
    }

    #[test]
    fn learns_most_frequent_pairs_first() {
        let oracle = brute_force_first_merges(&["aa", "aa", "ab"], 2);
        assert_eq!(oracle, vec![m("a"), m("aa")]);
        let reserved = 3;
        // base alphabet {▁, a, b} plus two merges
        let v = SubwordVocab::learn(&["aa aa ab"], reserved + 5, reserved).unwrap();
        assert_eq!(v.size(), reserved + 5);
        let learned: Vec<&str> = v.learned_pieces().iter().map(String::as_str).collect();
        assert_eq!(
            learned,
            vec!["a", "b", "\u{2581}", oracle[0].as_str(), oracle[1].as_str()]
        );
        assert_eq!(
            v.encode("aa ab"),
            vec![
                v.id(&m("aa")).unwrap(),
                v.id(&m("a")).unwrap(),
                v.id("b").unwrap()
            ]
        );
    }

    #[test]
    fn single_character_corpus() {
        let v = SubwordVocab::learn(&["x"], 3 + 2, 3).unwrap();
        assert_eq!(
            v.learned_pieces(),
            &["x".to_string(), WORD_MARK.to_string()]
        );
        assert_eq!(v.encode("x").len(), 2);
        assert_eq!(v.decode(&v.encode("x")).unwrap(), "x");
    }

    #[test]
    fn learn_errors() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            SubwordVocab::learn(&empty, 10, 3),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            SubwordVocab::learn(&[""], 10, 3),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            SubwordVocab::learn(&["abc"], 5, 3),
            Err(Error::TargetTooSmall { required: 7, .. })
        ));
        assert!(matches!(
            SubwordVocab::learn(&["ab"], 100, 3),
            Err(Error::TargetUnreachable { .. })
        ));
    }

    #[test]
    fn mathematician_breaks_into_five_pieces() {
        let v = SubwordVocab::with_specials(
            &[
                &m("math"),
                "e",
                "m",
                "a",
                "tician",
                "t",
                "i",
                "c",
                "n",
                "h",
                &m(""),
            ],
            2,
        )
        .unwrap();
        let ids = v.encode("mathematician");
        let pieces: Vec<&str> = ids.iter().map(|&i| v.piece(i).unwrap()).collect();
        assert_eq!(pieces, vec![m("math").as_str(), "e", "m", "a", "tician"]);
        assert_eq!(v.decode(&ids).unwrap(), "mathematician");
    }

    #[test]
    fn empty_input() {
        let v = SubwordVocab::learn(&["a b"], 6, 3).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn unknown_characters_fall_back_to_unk() {
        let v = SubwordVocab::learn(&["ab"], 6, 3).unwrap();
        assert_eq!(
            v.encode("az"),
            vec![v.id(&m("")).unwrap(), v.id("a").unwrap(), UNK_ID]
        );
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = SubwordVocab::learn(&["ab"], 6, 3).unwrap();
        assert!(matches!(
            v.decode(&[99]),
            Err(Error::IdOutOfRange { id: 99, size: 6 })
        ));
    }

    #[test]
    fn text_never_produces_reserved_ids() {
        let v = SubwordVocab::learn(&["<pad> </s> <unk>"], 25, 5).unwrap();
        assert!(v
            .encode("<pad> <unk> </s>")
            .iter()
            .all(|&i| i as usize >= v.reserved()));
    }

    #[test]
    fn file_round_trip() {
        let v = SubwordVocab::learn(&["the cat sat on the mat", "a\tb"], 30, 5).unwrap();
        let back = SubwordVocab::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.to_text(), v.to_text());
        assert!(SubwordVocab::from_text("garbage\n").is_err());
    }

    #[test]
    fn sentinels_and_generated_decoding() {
        let v = SubwordVocab::learn(&["hi"], 3 + 2 + 3, 5).unwrap();
        assert_eq!(v.num_sentinels(), 2);
        assert_eq!(v.sentinel(1), Some(4));
        assert_eq!(v.sentinel(2), None);
        let mut ids = vec![3];
        ids.extend(v.encode("hi"));
        ids.push(EOS_ID);
        ids.extend(v.encode("hi"));
        assert_eq!(v.decode_generated(&ids).unwrap(), "hi");
    }
}
