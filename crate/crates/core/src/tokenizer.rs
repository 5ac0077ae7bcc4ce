//! Byte-level BPE tokenizer.
//!
//! Id layout: `0..4` are the special tokens (UNK, BOS, EOS, PAD), `4..260`
//! are the 256 raw bytes, and every merge learned during training appends one
//! id in merge order. There is no pre-tokenization: each document is a single
//! byte sequence and pairs never span documents.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const PAD: TokenId = 3;

pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["<unk>", "<s>", "</s>", "<pad>"];
/// Smallest valid vocabulary: specials plus every byte.
pub const BASE_VOCAB: usize = NUM_SPECIAL + 256;
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Tokenizer {
    /// Byte string for every non-special id, indexed by `id - NUM_SPECIAL`.
    pieces: Vec<Vec<u8>>,
    vocab: HashMap<Vec<u8>, TokenId>,
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), u32>,
    fingerprint: String,
}

#[inline]
pub fn byte_id(b: u8) -> TokenId {
    (NUM_SPECIAL + b as usize) as TokenId
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

impl Tokenizer {
    /// Tokenizer with no merges (one token per byte).
    pub fn byte_level() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is always valid")
    }

    fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = (NUM_SPECIAL + pieces.len()) as TokenId;
            if is_special(l) || is_special(r) || l >= next || r >= next {
                return Err(Error::TokenizerFormat(format!(
                    "merges[{rank}]: references unknown token"
                )));
            }
            let mut joined = pieces[l as usize - NUM_SPECIAL].clone();
            joined.extend_from_slice(&pieces[r as usize - NUM_SPECIAL]);
            pieces.push(joined);
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(Error::TokenizerFormat(format!(
                    "merges[{rank}]: duplicate merge"
                )));
            }
        }
        let mut vocab = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            // Two merges can produce the same byte string; the first id wins.
            vocab.entry(p.clone()).or_insert((i + NUM_SPECIAL) as TokenId);
        }
        let fingerprint = fingerprint_of(&canonical(&merges, &pieces));
        Ok(Tokenizer {
            pieces,
            vocab,
            merges,
            ranks,
            fingerprint,
        })
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIAL + self.pieces.len()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Merges as byte-string pairs, in training order.
    pub fn merge_pieces(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.merges
            .iter()
            .map(|&(l, r)| (self.piece(l).to_vec(), self.piece(r).to_vec()))
            .collect()
    }

    /// Byte string of a non-special token; empty for specials.
    pub fn piece(&self, id: TokenId) -> &[u8] {
        if is_special(id) {
            &[]
        } else {
            &self.pieces[id as usize - NUM_SPECIAL]
        }
    }

    pub fn token_id(&self, piece: &[u8]) -> Option<TokenId> {
        self.vocab.get(piece).copied()
    }

    /// Encode text without adding BOS/EOS.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.bytes().map(byte_id).collect();
        if self.merges.is_empty() {
            return ids;
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, w[0], w[1])))
                .min();
            let Some((rank, l, r)) = best else { break };
            let merged = (BASE_VOCAB + rank as usize) as TokenId;
            ids = merge_pair(&ids, (l, r), merged);
        }
        ids
    }

    /// BOS + encode(text).
    pub fn encode_with_bos(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(BOS);
        ids.extend(self.encode(text));
        ids
    }

    /// Decode ids to text; specials are dropped and invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab_size() {
                return Err(Error::Data(format!(
                    "token id {id} out of range for vocab size {}",
                    self.vocab_size()
                )));
            }
            bytes.extend_from_slice(self.piece(id));
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            vocab_size: self.vocab_size(),
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            merges: self
                .merge_pieces()
                .into_iter()
                .map(|(l, r)| [hex::encode(l), hex::encode(r)])
                .collect(),
            fingerprint: self.fingerprint.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("tokenizer file serializes");
        crate::io::write_atomic(path.as_ref(), json.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |field: &str, why: &str| Error::TokenizerFormat(format!("{field}: {why}"));
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| bad("<root>", &e.to_string()))?;

        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("version", "missing or not an integer"))?;
        if version != FORMAT_VERSION as u64 {
            return Err(bad("version", &format!("unsupported version {version}")));
        }
        let vocab_size = value
            .get("vocab_size")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("vocab_size", "missing or not an integer"))?
            as usize;
        let specials = value
            .get("specials")
            .and_then(|v| v.as_array())
            .ok_or_else(|| bad("specials", "missing or not an array"))?;
        let names: Vec<&str> = specials.iter().filter_map(|s| s.as_str()).collect();
        if names != SPECIAL_NAMES {
            return Err(bad("specials", "expected [\"<unk>\", \"<s>\", \"</s>\", \"<pad>\"]"));
        }

        let raw_merges = value
            .get("merges")
            .and_then(|v| v.as_array())
            .ok_or_else(|| bad("merges", "missing or not an array"))?;
        let mut vocab: HashMap<Vec<u8>, TokenId> =
            (0..=255u8).map(|b| (vec![b], byte_id(b))).collect();
        let mut merges = Vec::with_capacity(raw_merges.len());
        for (i, m) in raw_merges.iter().enumerate() {
            let field = format!("merges[{i}]");
            let pair = m
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| bad(&field, "expected [left, right]"))?;
            let mut ids = [0; 2];
            let mut joined = Vec::new();
            for (slot, side) in pair.iter().enumerate() {
                let bytes = side
                    .as_str()
                    .and_then(|s| hex::decode(s).ok())
                    .ok_or_else(|| bad(&field, "not a hex byte string"))?;
                ids[slot] = *vocab
                    .get(&bytes)
                    .ok_or_else(|| bad(&field, "references unknown token"))?;
                joined.extend(bytes);
            }
            vocab.entry(joined).or_insert((BASE_VOCAB + i) as TokenId);
            merges.push((ids[0], ids[1]));
        }

        let tok = Self::from_merges(merges)?;
        if tok.vocab_size() != vocab_size {
            return Err(bad(
                "vocab_size",
                &format!("declared {vocab_size}, merges imply {}", tok.vocab_size()),
            ));
        }
        let fingerprint = value
            .get("fingerprint")
            .and_then(|v| v.as_str())
            .ok_or_else(|| bad("fingerprint", "missing"))?;
        if fingerprint != tok.fingerprint {
            return Err(bad("fingerprint", "does not match file contents"));
        }
        Ok(tok)
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    vocab_size: usize,
    specials: Vec<String>,
    merges: Vec<[String; 2]>,
    fingerprint: String,
}

#[derive(Serialize)]
struct CanonicalForm<'a> {
    version: u32,
    vocab_size: usize,
    specials: &'a [&'a str],
    merges: Vec<[String; 2]>,
}

fn canonical(merges: &[(TokenId, TokenId)], pieces: &[Vec<u8>]) -> String {
    let piece = |id: TokenId| hex::encode(&pieces[id as usize - NUM_SPECIAL]);
    let form = CanonicalForm {
        version: FORMAT_VERSION,
        vocab_size: NUM_SPECIAL + pieces.len(),
        specials: &SPECIAL_NAMES,
        merges: merges.iter().map(|&(l, r)| [piece(l), piece(r)]).collect(),
    };
    serde_json::to_string(&form).expect("canonical form serializes")
}

fn fingerprint_of(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Replace every non-overlapping occurrence of `pair`, scanning left to right.
pub(crate) fn merge_pair(ids: &[TokenId], pair: (TokenId, TokenId), merged: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Train a tokenizer on the corpus text.
pub fn train_bpe(corpus: &Corpus, vocab_size: usize) -> Result<Tokenizer> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot train a tokenizer on an empty corpus".into()));
    }
    train_bpe_texts(corpus.documents.iter().map(|d| d.text.as_str()), vocab_size)
}

/// Greedy BPE: repeatedly merge the most frequent adjacent pair until the
/// vocabulary is full or no pair occurs at least twice. Ties go to the pair
/// whose left piece is lexicographically smallest, then the right piece.
pub fn train_bpe_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    vocab_size: usize,
) -> Result<Tokenizer> {
    if vocab_size < BASE_VOCAB {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} below minimum {BASE_VOCAB}"
        )));
    }

    // Identical documents are folded together with a weight.
    let mut unique: HashMap<&str, u64> = HashMap::new();
    let mut order = Vec::new();
    for t in texts {
        let e = unique.entry(t).or_insert(0);
        if *e == 0 {
            order.push(t);
        }
        *e += 1;
    }
    if order.is_empty() {
        return Err(Error::Data("cannot train a tokenizer on an empty corpus".into()));
    }
    let mut seqs: Vec<(Vec<TokenId>, u64)> = order
        .iter()
        .map(|t| (t.bytes().map(byte_id).collect(), unique[t]))
        .collect();

    let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    for (seq, w) in &seqs {
        add_pairs(&mut counts, seq, *w);
    }

    let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merges = Vec::new();
    while BASE_VOCAB + merges.len() < vocab_size {
        let piece = |id: TokenId| pieces[id as usize - NUM_SPECIAL].as_slice();
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(a, ca), (b, cb)| {
                ca.cmp(cb)
                    .then_with(|| piece(b.0).cmp(piece(a.0)))
                    .then_with(|| piece(b.1).cmp(piece(a.1)))
            })
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };

        let merged = (BASE_VOCAB + merges.len()) as TokenId;
        let mut joined = piece(pair.0).to_vec();
        joined.extend_from_slice(piece(pair.1));
        pieces.push(joined);
        merges.push(pair);

        for (seq, w) in seqs.iter_mut() {
            if !seq.windows(2).any(|x| x[0] == pair.0 && x[1] == pair.1) {
                continue;
            }
            remove_pairs(&mut counts, seq, *w);
            *seq = merge_pair(seq, pair, merged);
            add_pairs(&mut counts, seq, *w);
        }
    }
    log::debug!("trained BPE with {} merges", merges.len());
    Tokenizer::from_merges(merges)
}

fn add_pairs(counts: &mut HashMap<(TokenId, TokenId), u64>, seq: &[TokenId], w: u64) {
    for p in seq.windows(2) {
        *counts.entry((p[0], p[1])).or_insert(0) += w;
    }
}

fn remove_pairs(counts: &mut HashMap<(TokenId, TokenId), u64>, seq: &[TokenId], w: u64) {
    for p in seq.windows(2) {
        let key = (p[0], p[1]);
        if let Some(c) = counts.get_mut(&key) {
            *c -= w;
            if *c == 0 {
                counts.remove(&key);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aaaa_merges_aa_first() {
        let tok = train_bpe_texts(["aaaa"], 262).unwrap();
        assert_eq!(tok.merge_pieces()[0], (b"a".to_vec(), b"a".to_vec()));
        assert!(tok.token_id(b"aa").is_some());
        // "aaaa" -> [aa, aa]; (aa, aa) occurs once, so training stops there.
        assert_eq!(tok.merges().len(), 1);
        assert_eq!(tok.encode("aaaa").len(), 2);
    }

    #[test]
    fn unique_bytes_give_no_merges() {
        let tok = train_bpe_texts(["abcdefg"], 300).unwrap();
        assert!(tok.merges().is_empty());
        assert_eq!(tok.vocab_size(), 260);
    }

    #[test]
    fn vocab_below_minimum_rejected() {
        assert!(matches!(
            train_bpe_texts(["abc"], 259),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ties_prefer_smaller_left_piece() {
        // "ab" and "cd" both occur twice; "ab" sorts first.
        let tok = train_bpe_texts(["cdab", "abcd"], 261).unwrap();
        assert_eq!(tok.merge_pieces()[0], (b"a".to_vec(), b"b".to_vec()));
    }

    #[test]
    fn encode_applies_merge_table() {
        let tok = train_bpe_texts(["aaaa"], 262).unwrap();
        let aa = tok.token_id(b"aa").unwrap();
        assert_eq!(tok.encode("aa"), vec![aa]);
        assert_eq!(tok.encode(""), Vec::<TokenId>::new());
        assert_eq!(tok.encode("xyz"), vec![byte_id(b'x'), byte_id(b'y'), byte_id(b'z')]);
    }

    #[test]
    fn decode_strips_specials_and_checks_range() {
        let tok = Tokenizer::byte_level();
        let x = byte_id(b'x');
        assert_eq!(tok.decode(&[BOS, x, EOS]).unwrap(), tok.decode(&[x]).unwrap());
        assert!(tok.decode(&[tok.vocab_size() as TokenId]).is_err());
    }

    #[test]
    fn fingerprint_tracks_merges() {
        let a = train_bpe_texts(["hello hello"], 270).unwrap();
        let b = train_bpe_texts(["hello hello"], 270).unwrap();
        let c = train_bpe_texts(["hello hello"], 262).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn load_rejects_unknown_merge_reference() {
        let tok = train_bpe_texts(["aaaa"], 262).unwrap();
        let json = format!(
            r#"{{"version":1,"vocab_size":261,"specials":["<unk>","<s>","</s>","<pad>"],
               "merges":[["6161","61"]],"fingerprint":"{}"}}"#,
            tok.fingerprint()
        );
        let err = Tokenizer::from_json(&json).unwrap_err().to_string();
        assert!(err.contains("merges[0]"), "{err}");
    }

    #[test]
    fn load_names_missing_field() {
        let err = Tokenizer::from_json(r#"{"version":1}"#).unwrap_err().to_string();
        assert!(err.contains("vocab_size"), "{err}");
    }

    #[test]
    fn hand_built_minimal_file_loads() {
        // Canonical form of a merge-free tokenizer, hashed independently here.
        let canonical = r#"{"version":1,"vocab_size":260,"specials":["<unk>","<s>","</s>","<pad>"],"merges":[]}"#;
        let fp = hex::encode(Sha256::digest(canonical.as_bytes()));
        let file = format!(
            r#"{{"version":1,"vocab_size":260,"specials":["<unk>","<s>","</s>","<pad>"],"merges":[],"fingerprint":"{fp}"}}"#
        );
        let tok = Tokenizer::from_json(&file).unwrap();
        assert_eq!(tok.vocab_size(), 260);
    }
}
