//! Amino-acid vocabulary and prompt-file parsing.

use std::fmt::Write as _;

/// The 20 standard residues; token id = index in this string.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const NUM_AMINO_ACIDS: usize = 20;

pub const PAD: u32 = 20;
pub const MASK: u32 = 21;
pub const BOS: u32 = 22;
pub const EOS: u32 = 23;
pub const UNK: u32 = 24;

/// Smallest vocabulary that holds the residues plus the special tokens.
pub const MIN_VOCAB: usize = 25;

pub fn aa_index(letter: u8) -> Option<u32> {
    let up = letter.to_ascii_uppercase();
    AMINO_ACIDS.iter().position(|&c| c == up).map(|i| i as u32)
}

pub fn token_char(token: u32) -> char {
    match token {
        t if (t as usize) < NUM_AMINO_ACIDS => AMINO_ACIDS[t as usize] as char,
        PAD => '_',
        MASK => '#',
        BOS => '^',
        EOS => '$',
        _ => 'X',
    }
}

pub fn is_amino_acid(letter: char) -> bool {
    letter.is_ascii() && aa_index(letter as u8).is_some()
}

/// Residue letters to token ids; anything outside the alphabet becomes
/// [`UNK`]. Returns the ids and the number of unknown letters.
pub fn encode_residues(seq: &str) -> (Vec<u32>, usize) {
    let mut unknown = 0;
    let ids = seq
        .bytes()
        .map(|b| {
            aa_index(b).unwrap_or_else(|| {
                unknown += 1;
                UNK
            })
        })
        .collect();
    (ids, unknown)
}

/// One named sequence from a FASTA or plain-text prompt file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRecord {
    pub id: String,
    pub sequence: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceSet {
    pub records: Vec<SequenceRecord>,
    /// Letters outside the 20-residue alphabet; they encode as UNK.
    pub unknown_letters: usize,
}

fn count_unknown(seq: &str) -> usize {
    seq.bytes().filter(|b| aa_index(*b).is_none()).count()
}

/// Parses FASTA (`>id` headers) or, when the first non-blank line is not a
/// header, plain text with one sequence per line.
pub fn parse_sequences(text: &str) -> SequenceSet {
    let mut set = SequenceSet::default();
    let first = text.lines().map(str::trim).find(|l| !l.is_empty());
    let is_fasta = first.is_some_and(|l| l.starts_with('>'));

    if is_fasta {
        let mut current: Option<SequenceRecord> = None;
        for line in text.lines().map(str::trim) {
            if let Some(header) = line.strip_prefix('>') {
                set.records.extend(current.take());
                let id = header.split_whitespace().next().unwrap_or("").to_string();
                current = Some(SequenceRecord {
                    id,
                    sequence: String::new(),
                });
            } else if let Some(rec) = current.as_mut() {
                rec.sequence
                    .extend(line.chars().filter(|c| !c.is_whitespace()));
            }
        }
        set.records.extend(current);
    } else {
        for (i, line) in text.lines().map(str::trim).enumerate() {
            if line.is_empty() {
                continue;
            }
            set.records.push(SequenceRecord {
                id: format!("line{}", i + 1),
                sequence: line.chars().filter(|c| !c.is_whitespace()).collect(),
            });
        }
    }
    for rec in &mut set.records {
        rec.sequence.make_ascii_uppercase();
        set.unknown_letters += count_unknown(&rec.sequence);
    }
    set
}

/// FASTA text with 60-column sequence lines.
pub fn write_fasta(records: &[SequenceRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        let _ = writeln!(out, ">{}", rec.id);
        let bytes = rec.sequence.as_bytes();
        for chunk in bytes.chunks(60) {
            out.push_str(std::str::from_utf8(chunk).unwrap_or_default());
            out.push('\n');
        }
    }
    out
}
