//! DNA text ingestion and k-mer tokenization.
//!
//! FASTA parsing, k-mer vocabularies over the {A,C,G,T} alphabet with nine
//! special tokens appended, and the nucleotide <-> token conversions.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const BASES: [char; 4] = ['A', 'C', 'G', 'T'];

/// Special tokens, in vocabulary order after the k-mer block. Only `[M]` and
/// `[PAD]` carry semantics here; the rest exist to fill out the vocabulary.
pub const SPECIAL_TOKENS: [&str; 9] =
    ["[M]", "[PAD]", "[CLS]", "[BOS]", "[EOS]", "[UNK]", "[SEP]", "[RES1]", "[RES2]"];

pub const SUPPORTED_K: [usize; 4] = [1, 3, 6, 9];

/// A validated nonempty sequence over {A,C,G,T}, uppercase canonical form.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NucleotideSequence(String);

impl NucleotideSequence {
    pub fn new(s: impl Into<String>) -> Result<Self> {
        let s = s.into();
        if s.is_empty() {
            return Err(Error::invalid("nucleotide sequence must be nonempty"));
        }
        for (i, c) in s.chars().enumerate() {
            if !BASES.contains(&c) {
                return Err(Error::invalid(format!(
                    "invalid base {c:?} at position {i}; expected one of A,C,G,T"
                )));
            }
        }
        Ok(NucleotideSequence(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for NucleotideSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Bijection between k-mer strings plus special tokens and contiguous ids.
///
/// K-mer ids occupy `0..4^k` in lexicographic order (A<C<G<T); special ids
/// follow in the fixed [`SPECIAL_TOKENS`] order. Total size is `4^k + 9`.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    k: usize,
    kmer_count: usize,
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

fn base_index(c: char) -> usize {
    match c {
        'A' => 0,
        'C' => 1,
        'G' => 2,
        'T' => 3,
        _ => unreachable!("validated upstream"),
    }
}

impl Vocabulary {
    pub fn build(k: usize) -> Result<Self> {
        if !SUPPORTED_K.contains(&k) {
            return Err(Error::invalid(format!("unsupported k {k}; expected one of 1, 3, 6, 9")));
        }
        let kmer_count = 4usize.pow(k as u32);
        let mut id_to_token = Vec::with_capacity(kmer_count + SPECIAL_TOKENS.len());
        for idx in 0..kmer_count {
            let mut kmer = String::with_capacity(k);
            for pos in (0..k).rev() {
                kmer.push(BASES[(idx >> (2 * pos)) & 3]);
            }
            id_to_token.push(kmer);
        }
        id_to_token.extend(SPECIAL_TOKENS.iter().map(|s| s.to_string()));
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocabulary { k, kmer_count, token_to_id, id_to_token })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of k-mer ids (`4^k`); k-mer ids are `0..kmer_count`.
    pub fn kmer_count(&self) -> usize {
        self.kmer_count
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn mask_id(&self) -> u32 {
        self.kmer_count as u32
    }

    pub fn pad_id(&self) -> u32 {
        self.kmer_count as u32 + 1
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) >= self.kmer_count && (id as usize) < self.size()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Id of the k-mer starting at byte `start` of `s`, computed positionally.
    fn kmer_id_at(&self, s: &str, start: usize) -> u32 {
        let mut idx = 0usize;
        for c in s[start..start + self.k].chars() {
            idx = (idx << 2) | base_index(c);
        }
        idx as u32
    }

    /// One `k=<k>` header line, then `<token>\t<id>` lines sorted by id.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "k={}", self.k)?;
        for (id, token) in self.id_to_token.iter().enumerate() {
            writeln!(w, "{token}\t{id}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty vocabulary file".into() })??;
        let k: usize = header
            .strip_prefix("k=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse { line: 1, msg: format!("expected k=<k>, got {header:?}") })?;
        let vocab = Vocabulary::build(k)?;
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            let (token, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse { line: lineno, msg: "expected <token>\\t<id>".into() })?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::Parse { line: lineno, msg: format!("bad id {id:?}") })?;
            if vocab.id_of(token) != Some(id) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("token {token:?} has id {id}, inconsistent with k={k}"),
                });
            }
        }
        Ok(vocab)
    }
}

/// A clean (fully unmasked) token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub vocab_k: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab: &Vocabulary) -> Result<Self> {
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= vocab.size() {
                return Err(Error::invalid(format!("id {id} at position {pos} out of vocabulary")));
            }
            if vocab.is_special(id) {
                return Err(Error::invalid(format!(
                    "special token id {id} at position {pos}; clean sequences hold k-mer ids only"
                )));
            }
        }
        Ok(TokenSequence { ids, vocab_k: vocab.k() })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Non-overlapping k-mer tokenization; a trailing remainder shorter than k is
/// dropped. Output length is `floor(L/k)`.
pub fn tokenize(seq: &NucleotideSequence, vocab: &Vocabulary) -> Result<TokenSequence> {
    let k = vocab.k();
    if seq.len() < k {
        return Err(Error::invalid(format!(
            "sequence length {} shorter than k={k}",
            seq.len()
        )));
    }
    let n = seq.len() / k;
    let ids = (0..n).map(|i| vocab.kmer_id_at(seq.as_str(), i * k)).collect();
    Ok(TokenSequence { ids, vocab_k: k })
}

pub fn detokenize(toks: &TokenSequence, vocab: &Vocabulary) -> Result<NucleotideSequence> {
    let mut s = String::with_capacity(toks.len() * vocab.k());
    for (pos, &id) in toks.ids.iter().enumerate() {
        if vocab.is_special(id) || id as usize >= vocab.size() {
            return Err(Error::invalid(format!(
                "cannot detokenize non-k-mer id {id} at position {pos}"
            )));
        }
        s.push_str(vocab.token_of(id).unwrap());
    }
    NucleotideSequence::new(s)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FastaOptions {
    /// Drop records containing 'N' instead of failing.
    pub skip_n_records: bool,
}

/// Parse FASTA text: `>` lines start records, `;` lines are comments,
/// sequence lines are concatenated. Lowercase input is uppercased.
pub fn parse_fasta(
    r: impl BufRead,
    opts: FastaOptions,
) -> Result<Vec<(String, NucleotideSequence)>> {
    let mut records: Vec<(String, NucleotideSequence)> = Vec::new();
    let mut current: Option<(String, String, bool)> = None; // (header, seq, has_n)

    let mut flush = |cur: Option<(String, String, bool)>,
                     line: usize,
                     out: &mut Vec<(String, NucleotideSequence)>|
     -> Result<()> {
        if let Some((header, seq, has_n)) = cur {
            if has_n {
                if opts.skip_n_records {
                    return Ok(());
                }
                unreachable!("N rejected at its own line unless skipping");
            }
            if seq.is_empty() {
                return Err(Error::Parse { line, msg: format!("empty record {header:?}") });
            }
            out.push((header, NucleotideSequence(seq)));
        }
        Ok(())
    };

    let mut lineno = 0usize;
    for line in r.lines() {
        lineno += 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(';') {
            continue;
        }
        if let Some(header) = trimmed.strip_prefix('>') {
            flush(current.take(), lineno, &mut records)?;
            current = Some((header.trim().to_string(), String::new(), false));
            continue;
        }
        let Some((_, seq, has_n)) = current.as_mut() else {
            return Err(Error::Parse {
                line: lineno,
                msg: "sequence data before any '>' header".into(),
            });
        };
        for c in trimmed.chars() {
            let up = c.to_ascii_uppercase();
            match up {
                'A' | 'C' | 'G' | 'T' => seq.push(up),
                'N' => {
                    if opts.skip_n_records {
                        *has_n = true;
                    } else {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: "base 'N' not allowed (use --skip-n-records to drop such records)"
                                .into(),
                        });
                    }
                }
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("invalid symbol {c:?} in sequence data"),
                    })
                }
            }
        }
    }
    flush(current.take(), lineno, &mut records)?;
    Ok(records)
}

/// Write records as FASTA, 70 columns per sequence line.
pub fn write_fasta(
    w: &mut impl Write,
    records: &[(String, NucleotideSequence)],
) -> Result<()> {
    for (header, seq) in records {
        writeln!(w, ">{header}")?;
        for chunk in seq.as_str().as_bytes().chunks(70) {
            w.write_all(chunk)?;
            writeln!(w)?;
        }
    }
    Ok(())
}
