//! Vocabulary, tokenizer, lemma table, embedding table and dataset I/O.
//!
//! On-disk formats:
//! - GHEM embeddings: `b"GHEM"`, `u32` vocab size, `u32` dim (both little
//!   endian), then `vocab_size * dim` little-endian `f32`, row-major. The
//!   vocabulary lives next to it in `<stem>.vocab.txt`, one surface per line.
//! - Lemma TSV: `surface<TAB>lemma` per line.
//! - Dataset JSONL: `{"text": ..., "label": ...}` per line.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GHEM_MAGIC: &[u8; 4] = b"GHEM";
pub const UNK_SURFACE: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    id_of: HashMap<String, usize>,
    unk_id: usize,
}

impl Vocabulary {
    /// Builds a vocabulary; `<unk>` must be one of the surfaces.
    pub fn new(surfaces: Vec<String>) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(surfaces.len());
        for (i, s) in surfaces.iter().enumerate() {
            if id_of.insert(s.clone(), i).is_some() {
                return Err(Error::DuplicateSurface(s.clone()));
            }
        }
        let unk_id = *id_of
            .get(UNK_SURFACE)
            .ok_or_else(|| Error::Config(format!("vocabulary lacks the {UNK_SURFACE} surface")))?;
        Ok(Self {
            surfaces,
            id_of,
            unk_id,
        })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn surface(&self, id: usize) -> Result<&str> {
        self.surfaces
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })
    }

    pub fn id(&self, surface: &str) -> Option<usize> {
        self.id_of.get(surface).copied()
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })
        }
    }
}

/// Row-major `n_V x dim` matrix of token embeddings, stored as `f32` so that
/// GHEM round trips are bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    data: Vec<f32>,
    rows: usize,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(data: Vec<f32>, rows: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{dim} table",
                data.len()
            )));
        }
        for r in 0..rows {
            let row = &data[r * dim..(r + 1) * dim];
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: r, col: c });
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroNormRow(r));
            }
        }
        Ok(Self { data, rows, dim })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Surface -> lemma map. Lookups are total: unknown surfaces are their own lemma.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LemmaTable {
    entries: HashMap<String, String>,
}

impl LemmaTable {
    pub fn new(entries: HashMap<String, String>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|(k, v)| (k.to_lowercase(), v))
                .collect(),
        }
    }

    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self::new(
            pairs
                .into_iter()
                .map(|(a, b)| (a.into(), b.into()))
                .collect(),
        )
    }

    pub fn lookup<'a>(&'a self, surface: &'a str) -> &'a str {
        // Cased surfaces are folded before lookup.
        match self.entries.get(surface) {
            Some(l) => l,
            None => match self.entries.get(&surface.to_lowercase()) {
                Some(l) => l,
                None => surface,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by surface, for stable output.
    pub fn sorted_entries(&self) -> Vec<(&str, &str)> {
        let mut v: Vec<_> = self
            .entries
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        v.sort();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub raw: String,
}

impl LabeledSentence {
    pub fn from_text(text: &str, label: usize, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            tokens: tokenize(text, vocab)?,
            label,
            raw: text.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub text: String,
    pub label: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '#' || c == '_'
}

/// Lowercases and splits on whitespace and punctuation.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !is_word_char(c))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let words = normalize(text);
    if words.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(words
        .iter()
        .map(|w| vocab.id(w).unwrap_or(vocab.unk_id()))
        .collect())
}

pub fn detokenize(tokens: &[usize], vocab: &Vocabulary) -> Result<String> {
    let parts = tokens
        .iter()
        .map(|&t| vocab.surface(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join(" "))
}

pub fn lemma_of(token: usize, vocab: &Vocabulary, lemmas: &LemmaTable) -> Result<String> {
    let s = vocab.surface(token)?;
    Ok(lemmas.lookup(s).to_string())
}

/// `<dir>/<stem>.vocab.txt` for an embedding file `<dir>/<stem>.ghem`.
pub fn vocab_path_for(embeddings: &Path) -> PathBuf {
    let stem = embeddings
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    embeddings.with_file_name(format!("{stem}.vocab.txt"))
}

pub fn encode_ghem(table: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + table.data.len() * 4);
    out.extend_from_slice(GHEM_MAGIC);
    out.extend_from_slice(&(table.rows as u32).to_le_bytes());
    out.extend_from_slice(&(table.dim as u32).to_le_bytes());
    for v in &table.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_ghem(bytes: &[u8], path: &Path) -> Result<EmbeddingTable> {
    if bytes.len() < 12 || &bytes[..4] != GHEM_MAGIC {
        if bytes.len() >= 4 && &bytes[..4] != GHEM_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 12,
            found: bytes.len(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingTable::new(data, rows, dim)
}

pub fn write_embeddings(path: &Path, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<()> {
    if vocab.len() != table.rows() {
        return Err(Error::LengthMismatch {
            vocab: vocab.len(),
            rows: table.rows(),
        });
    }
    fs::write(path, encode_ghem(table)).map_err(|e| Error::io(path, e))?;
    let vpath = vocab_path_for(path);
    let mut text = vocab.surfaces().join("\n");
    text.push('\n');
    fs::write(&vpath, text).map_err(|e| Error::io(&vpath, e))?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<(Vocabulary, EmbeddingTable)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let table = decode_ghem(&bytes, path)?;
    let vpath = vocab_path_for(path);
    let text = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
    let surfaces: Vec<String> = text.lines().map(str::to_string).collect();
    if surfaces.len() != table.rows() {
        return Err(Error::LengthMismatch {
            vocab: surfaces.len(),
            rows: table.rows(),
        });
    }
    Ok((Vocabulary::new(surfaces)?, table))
}

pub fn load_lemmas(path: &Path) -> Result<LemmaTable> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (surface, lemma) = line.split_once('\t').ok_or_else(|| Error::Parse {
            what: "lemma TSV",
            line: i + 1,
            detail: "missing tab separator".into(),
        })?;
        entries.insert(surface.to_string(), lemma.to_string());
    }
    Ok(LemmaTable::new(entries))
}

pub fn write_lemmas(path: &Path, lemmas: &LemmaTable) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (s, l) in lemmas.sorted_entries() {
        writeln!(w, "{s}\t{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads any JSONL file of serde records, reporting the failing line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            what,
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    read_jsonl(path, "dataset JSONL")
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn to_sentences(records: &[DatasetRecord], vocab: &Vocabulary) -> Result<Vec<LabeledSentence>> {
    records
        .iter()
        .map(|r| LabeledSentence::from_text(&r.text, r.label, vocab))
        .collect()
}

pub fn to_records(sentences: &[LabeledSentence]) -> Vec<DatasetRecord> {
    sentences
        .iter()
        .map(|s| DatasetRecord {
            text: s.raw.clone(),
            label: s.label,
        })
        .collect()
}
