//! Knowledge-rich routing vocabulary and hash-based routing tokenization.
//!
//! Routing ids `[0, knowledge_threshold)` mirror the default vocabulary one to
//! one (routing id == default token id). Knowledge words follow, ordered by
//! non-increasing corpus frequency. Each routing word is keyed in a hash table
//! by its default tokenization; online assignment adopts, for every position,
//! the routing id of the longest key ending there.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::{SubwordVocab, TokenId, WORD_MARK};

pub type RoutingId = u32;

/// Longest default-token subsequence probed at each position (k in [0, 8]).
pub const MAX_KEY_LEN: usize = 9;

/// Lowercases, trims non-alphanumeric edge characters. Returns `None` when
/// nothing is left.
pub fn normalize_word(raw: &str) -> Option<String> {
    let w = raw
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    (!w.is_empty()).then_some(w)
}

/// Whitespace split followed by [`normalize_word`].
pub fn normalized_words(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().filter_map(normalize_word)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingVocab {
    entries: Vec<String>,
    freq: Vec<u64>,
    default_index: HashMap<String, RoutingId>,
    knowledge_index: HashMap<String, RoutingId>,
    knowledge_threshold: usize,
}

impl RoutingVocab {
    /// Knowledge-only vocabulary from entity/relation names ranked by corpus
    /// frequency; names absent from the corpus rank last with frequency 0.
    pub fn build<N: AsRef<str>, C: AsRef<str>>(
        names: &[N],
        corpus: &[C],
        top_k: usize,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyNameList);
        }
        if top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be positive".into()));
        }
        let mut candidates: BTreeMap<String, u64> = BTreeMap::new();
        for name in names {
            for w in normalized_words(name.as_ref()) {
                candidates.insert(w, 0);
            }
        }
        for line in corpus {
            for w in normalized_words(line.as_ref()) {
                if let Some(c) = candidates.get_mut(&w) {
                    *c += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = candidates.into_iter().collect();
        // BTreeMap order is lexicographic; a stable sort keeps it for ties.
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        ranked.truncate(top_k);
        let (entries, freq) = ranked.into_iter().unzip();
        Self::from_parts(entries, freq, 0)
    }

    fn from_parts(
        entries: Vec<String>,
        freq: Vec<u64>,
        knowledge_threshold: usize,
    ) -> Result<Self> {
        if knowledge_threshold > entries.len() || freq.len() != entries.len() {
            return Err(Error::InvalidArgument(
                "routing vocab parts disagree in length".into(),
            ));
        }
        // default pieces and knowledge words live in separate namespaces:
        // knowledge word "b" is distinct from continuation piece "b"
        let index = |range: &[String], base: usize| -> Result<HashMap<String, RoutingId>> {
            let mut map = HashMap::with_capacity(range.len());
            for (i, e) in range.iter().enumerate() {
                if map.insert(e.clone(), (base + i) as RoutingId).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate routing entry {e:?}"
                    )));
                }
            }
            Ok(map)
        };
        let default_index = index(&entries[..knowledge_threshold], 0)?;
        let knowledge_index = index(&entries[knowledge_threshold..], knowledge_threshold)?;
        if let Some(w) = knowledge_index
            .keys()
            .find(|w| default_index.contains_key(&format!("{WORD_MARK}{w}")))
        {
            return Err(Error::InvalidArgument(format!(
                "knowledge word {w:?} duplicates a default piece"
            )));
        }
        Ok(Self {
            entries,
            freq,
            default_index,
            knowledge_index,
            knowledge_threshold,
        })
    }

    /// Places every default piece at routing id == default id, then the
    /// knowledge words whose word-initial form is not already a default piece.
    pub fn extend_with_default(&self, dv: &SubwordVocab) -> Self {
        let knowledge = &self.entries[self.knowledge_threshold..];
        let knowledge_freq = &self.freq[self.knowledge_threshold..];
        let mut entries: Vec<String> = dv.pieces().to_vec();
        let mut freq = vec![0u64; entries.len()];
        for (w, &f) in knowledge.iter().zip(knowledge_freq) {
            match dv.id(&format!("{WORD_MARK}{w}")) {
                Some(id) => freq[id as usize] = freq[id as usize].max(f),
                None => {
                    entries.push(w.clone());
                    freq.push(f);
                }
            }
        }
        Self::from_parts(entries, freq, dv.size())
            .expect("default pieces and knowledge words are disjoint")
    }

    /// Keeps the low range and the `k` most frequent knowledge words.
    pub fn truncate_knowledge(&self, k: usize) -> Self {
        let end = (self.knowledge_threshold + k).min(self.entries.len());
        Self::from_parts(
            self.entries[..end].to_vec(),
            self.freq[..end].to_vec(),
            self.knowledge_threshold,
        )
        .expect("prefix of a valid vocabulary")
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// First knowledge routing id; ids below it are default pieces.
    pub fn knowledge_threshold(&self) -> usize {
        self.knowledge_threshold
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn freq(&self) -> &[u64] {
        &self.freq
    }

    pub fn knowledge_words(&self) -> &[String] {
        &self.entries[self.knowledge_threshold..]
    }

    /// Routing id of a whole word: its knowledge entry, or the word-initial
    /// default piece spelling it.
    pub fn routing_id(&self, word: &str) -> Option<RoutingId> {
        self.knowledge_index
            .get(word)
            .or_else(|| self.default_index.get(&format!("{WORD_MARK}{word}")))
            .copied()
    }

    /// Routing id of a default piece string.
    pub fn piece_routing_id(&self, piece: &str) -> Option<RoutingId> {
        self.default_index.get(piece).copied()
    }

    pub fn word(&self, id: RoutingId) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("#knowledge_threshold={}\n", self.knowledge_threshold);
        for (i, (w, f)) in self.entries.iter().zip(&self.freq).enumerate() {
            let _ = writeln!(out, "{w}\t{f}\t{i}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let threshold = header
            .strip_prefix("#knowledge_threshold=")
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| Error::parse("routing vocab", format!("bad header {header:?}")))?;
        let mut entries = Vec::new();
        let mut freq = Vec::new();
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::parse("routing vocab", format!("line {}: {line:?}", n + 2));
            if cols.len() != 3 {
                return Err(bad());
            }
            let f: u64 = cols[1].parse().map_err(|_| bad())?;
            let id: usize = cols[2].parse().map_err(|_| bad())?;
            if id != entries.len() {
                return Err(bad());
            }
            entries.push(cols[0].to_string());
            freq.push(f);
        }
        Self::from_parts(entries, freq, threshold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    pub fn content_hash(&self) -> String {
        crate::util::sha256_hex(self.to_tsv().as_bytes())
    }
}

/// Offline table from default-token-id sequences to routing ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoutingHashTable {
    map: HashMap<Vec<TokenId>, RoutingId>,
    /// Knowledge words whose default tokenization is longer than [`MAX_KEY_LEN`].
    pub dropped_too_long: usize,
    /// Knowledge words whose key was already taken by a more frequent word.
    pub collisions: usize,
}

impl RoutingHashTable {
    /// `rv` must already be extended with `dv`.
    pub fn build(rv: &RoutingVocab, dv: &SubwordVocab) -> Self {
        let mut table = Self::default();
        for id in 0..rv.knowledge_threshold().min(dv.size()) {
            table.map.insert(vec![id as TokenId], id as RoutingId);
        }
        for (offset, word) in rv.knowledge_words().iter().enumerate() {
            let rid = (rv.knowledge_threshold() + offset) as RoutingId;
            let mut key = Vec::new();
            dv.encode_word(&format!("{WORD_MARK}{word}"), &mut key);
            if key.len() > MAX_KEY_LEN {
                table.dropped_too_long += 1;
                continue;
            }
            if table.map.contains_key(&key) {
                table.collisions += 1;
                log::debug!("routing key collision for {word:?}; keeping the more frequent word");
                continue;
            }
            table.map.insert(key, rid);
        }
        table
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, key: &[TokenId]) -> Option<RoutingId> {
        self.map.get(key).copied()
    }

    pub fn max_key_len(&self) -> usize {
        MAX_KEY_LEN
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[TokenId], RoutingId)> {
        self.map.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    /// Online routing: each position adopts the longest key ending at it.
    pub fn assign(&self, seq: &[TokenId]) -> Result<RoutingAssignment> {
        let mut routing_ids = Vec::with_capacity(seq.len());
        let mut match_len = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            let longest = (1..=MAX_KEY_LEN.min(i + 1))
                .rev()
                .find_map(|len| self.get(&seq[i + 1 - len..=i]).map(|rid| (rid, len)));
            let (rid, len) = longest.ok_or(Error::MissingRoutingKey(seq[i]))?;
            routing_ids.push(rid);
            match_len.push(len as u8);
        }
        Ok(RoutingAssignment {
            routing_ids,
            match_len,
        })
    }

    /// Deterministic TSV: `id,id,...<TAB>routing_id`, sorted by routing id.
    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<(&Vec<TokenId>, &RoutingId)> = self.map.iter().collect();
        rows.sort_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)));
        let mut out = String::new();
        for (key, rid) in rows {
            let k: Vec<String> = key.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "{}\t{rid}", k.join(","));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut table = Self::default();
        for (n, line) in text.lines().enumerate() {
            let bad = || Error::parse("routing hash table", format!("line {}: {line:?}", n + 1));
            let (key, rid) = line.split_once('\t').ok_or_else(bad)?;
            let key: Vec<TokenId> = key
                .split(',')
                .map(|t| t.parse::<TokenId>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            if key.is_empty() || key.len() > MAX_KEY_LEN {
                return Err(bad());
            }
            table.map.insert(key, rid.parse().map_err(|_| bad())?);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoutingAssignment {
    pub routing_ids: Vec<RoutingId>,
    /// Length of the winning key at each position, in `[1, 9]`.
    pub match_len: Vec<u8>,
}

/// Default vocabulary, routing vocabulary and hash table bundled together.
#[derive(Debug, Clone)]
pub struct Routing {
    pub default_vocab: SubwordVocab,
    pub routing_vocab: RoutingVocab,
    pub table: RoutingHashTable,
}

impl Routing {
    /// Extends `knowledge` with `dv` and builds the hash table.
    pub fn new(dv: SubwordVocab, knowledge: &RoutingVocab) -> Self {
        let routing_vocab = knowledge.extend_with_default(&dv);
        let table = RoutingHashTable::build(&routing_vocab, &dv);
        Self {
            default_vocab: dv,
            routing_vocab,
            table,
        }
    }

    /// Encodes text and assigns routing ids in one pass.
    pub fn tokenize(&self, text: &str) -> (Vec<TokenId>, Vec<RoutingId>) {
        let ids = self.default_vocab.encode(text);
        let rids = self
            .table
            .assign(&ids)
            .expect("every default id has a length-1 key")
            .routing_ids;
        (ids, rids)
    }

    pub fn assign(&self, ids: &[TokenId]) -> Result<Vec<RoutingId>> {
        Ok(self.table.assign(ids)?.routing_ids)
    }
}
