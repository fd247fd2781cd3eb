use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Result};
use crate::model::NUM_SPECIAL;

pub const BPE_VERSION: &str = "bpe-v1";
/// Specials plus one token per byte value.
pub const BASE_VOCAB: usize = NUM_SPECIAL + 256;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Other,
}

fn class(c: char) -> Class {
    if c.is_alphabetic() || c == '_' {
        Class::Letter
    } else if c.is_numeric() {
        Class::Digit
    } else if c.is_whitespace() {
        Class::Space
    } else {
        Class::Other
    }
}

/// Splits text into letter runs (with at most one leading space), digit
/// runs, whitespace runs and punctuation runs. The pieces concatenate back
/// to the input.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let starts_word = |i: usize| chars[i].1 == ' ' && i + 1 < n && class(chars[i + 1].1) == Class::Letter;
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        if starts_word(i) {
            while j < n && class(chars[j].1) == Class::Letter {
                j += 1;
            }
        } else {
            let k = class(chars[i].1);
            while j < n && class(chars[j].1) == k && !(k == Class::Space && starts_word(j)) {
                j += 1;
            }
        }
        out.push(&text[at(i)..at(j)]);
        i = j;
    }
    out
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: String,
    merges: Vec<(usize, usize)>,
}

/// Byte-level BPE vocabulary. Ids below [`NUM_SPECIAL`] are reserved,
/// the next 256 are raw bytes, and each merge adds one id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct SubwordVocabulary {
    merges: Vec<(usize, usize)>,
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(usize, usize), usize>,
}

impl From<SubwordVocabulary> for VocabFile {
    fn from(v: SubwordVocabulary) -> Self {
        VocabFile {
            version: BPE_VERSION.into(),
            merges: v.merges,
        }
    }
}

impl TryFrom<VocabFile> for SubwordVocabulary {
    type Error = CorpusError;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.version != BPE_VERSION {
            return Err(CorpusError::Vocabulary(format!("unsupported version {}", f.version)));
        }
        Self::from_merges(f.merges)
    }
}

fn merge_word(word: &mut Vec<usize>, pair: (usize, usize), id: usize) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

fn byte_ids(s: &str) -> Vec<usize> {
    s.bytes().map(|b| b as usize + NUM_SPECIAL).collect()
}

impl SubwordVocabulary {
    /// Byte-only vocabulary.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges")
    }

    pub fn from_merges(merges: Vec<(usize, usize)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..NUM_SPECIAL).map(|_| Vec::new()).collect();
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            if a < NUM_SPECIAL || b < NUM_SPECIAL || a >= pieces.len() || b >= pieces.len() {
                return Err(CorpusError::Vocabulary(format!("merge {rank} refers to unknown ids ({a}, {b})")));
            }
            let piece = [pieces[a].as_slice(), pieces[b].as_slice()].concat();
            ranks.insert((a, b), pieces.len());
            pieces.push(piece);
        }
        Ok(Self { merges, pieces, ranks })
    }

    /// Learns merges from `texts` until the vocabulary reaches `vocab_size`
    /// or no pair occurs twice. Most frequent pair first; ties go to the
    /// lexicographically smallest pair of byte strings.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size < BASE_VOCAB {
            return Err(CorpusError::VocabularyTooSmall { requested: vocab_size, minimum: BASE_VOCAB });
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for piece in pretokenize(t.as_ref()) {
                *counts.entry(piece).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<usize>, usize)> = counts.into_iter().map(|(w, c)| (byte_ids(w), c)).collect();
        words.sort();
        let mut vocab = Self::bytes_only();
        while vocab.pieces.len() < vocab_size {
            let mut pairs: HashMap<(usize, usize), usize> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_insert(0) += c;
                }
            }
            let best = pairs.into_iter().filter(|&(_, c)| c >= 2).max_by(|x, y| {
                x.1.cmp(&y.1).then_with(|| {
                    let kx = (&vocab.pieces[x.0 .0], &vocab.pieces[x.0 .1]);
                    let ky = (&vocab.pieces[y.0 .0], &vocab.pieces[y.0 .1]);
                    ky.cmp(&kx)
                })
            });
            let Some((pair, _)) = best else { break };
            let id = vocab.pieces.len();
            let piece = [vocab.pieces[pair.0].as_slice(), vocab.pieces[pair.1].as_slice()].concat();
            vocab.pieces.push(piece);
            vocab.ranks.insert(pair, id);
            vocab.merges.push(pair);
            for (w, _) in &mut words {
                merge_word(w, pair, id);
            }
        }
        Ok(vocab)
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    /// Bytes of a non-special token.
    pub fn piece(&self, id: usize) -> Option<&[u8]> {
        (id >= NUM_SPECIAL).then(|| self.pieces.get(id).map(Vec::as_slice)).flatten()
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<usize>) {
        let mut w = byte_ids(piece);
        while w.len() > 1 {
            let best = w
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&id| ((p[0], p[1]), id)))
                .min_by_key(|&(_, id)| id);
            let Some((pair, id)) = best else { break };
            merge_word(&mut w, pair, id);
        }
        out.extend(w);
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    /// Concatenated token bytes; special ids are skipped and invalid UTF-8
    /// is replaced.
    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&id| self.piece(id)).flatten().copied().collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CorpusError::Vocabulary(e.to_string()))
    }
}
