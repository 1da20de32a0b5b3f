//! Text ingestion, vocabulary construction, tokenization and dataset splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sequence length.
pub const DEFAULT_SEQ_LEN: usize = 64;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// Ordered collection of documents with unique ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSet {
    docs: Vec<Document>,
}

impl DocumentSet {
    /// Builds a set, rejecting duplicate ids and blank texts.
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for doc in &docs {
            if !seen.insert(doc.id) {
                return Err(Error::invalid(format!("duplicate document id {}", doc.id)));
            }
            if doc.text.trim().is_empty() {
                return Err(Error::invalid(format!("document {} has empty text", doc.id)));
            }
        }
        Ok(Self { docs })
    }

    /// Assigns ids `0..n` in order. Blank texts are skipped.
    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = (S, Option<usize>)>) -> Self {
        let docs = texts
            .into_iter()
            .map(|(t, label)| (t.into(), label))
            .filter(|(t, _)| !t.trim().is_empty())
            .enumerate()
            .map(|(i, (text, label))| Document {
                id: i as u64,
                text,
                label,
            })
            .collect();
        Self { docs }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Document> {
        self.docs.get(i)
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn into_docs(self) -> Vec<Document> {
        self.docs
    }

    /// Documents at the given positions, in the given order.
    pub fn subset(&self, positions: &[usize]) -> Result<DocumentSet> {
        let docs = positions
            .iter()
            .map(|&p| {
                self.docs
                    .get(p)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("position {p} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        DocumentSet::new(docs)
    }

    /// Returns a copy with ids reassigned to `0..n`.
    pub fn renumbered(&self) -> DocumentSet {
        let docs = self
            .docs
            .iter()
            .enumerate()
            .map(|(i, d)| Document {
                id: i as u64,
                ..d.clone()
            })
            .collect();
        DocumentSet { docs }
    }

    pub fn with_labels(&self, labels: &[usize]) -> Result<DocumentSet> {
        if labels.len() != self.docs.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} documents",
                labels.len(),
                self.docs.len()
            )));
        }
        let docs = self
            .docs
            .iter()
            .zip(labels)
            .map(|(d, &l)| Document {
                label: Some(l),
                ..d.clone()
            })
            .collect();
        Ok(DocumentSet { docs })
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.docs.iter().map(|d| d.label).collect()
    }
}

impl<'a> IntoIterator for &'a DocumentSet {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.docs.iter()
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: Option<String>,
    #[serde(default)]
    label: Option<usize>,
}

/// Reads one `{"text": ..., "label": ...}` record per line. Blank lines are
/// ignored and records whose text is empty after trimming are skipped.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<DocumentSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_jsonl(BufReader::new(file))
}

pub fn read_jsonl(reader: impl BufRead) -> Result<DocumentSet> {
    let mut docs = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let text = record.text.ok_or(Error::Parse {
            line: line_no,
            message: "missing text".into(),
        })?;
        if text.trim().is_empty() {
            skipped += 1;
            continue;
        }
        docs.push(Document {
            id: docs.len() as u64,
            text,
            label: record.label,
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} empty documents");
    }
    Ok(DocumentSet { docs })
}

/// Writes documents as JSONL with their `id`.
pub fn write_jsonl(docs: &DocumentSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Lowercased tokens: alphanumeric runs, with each punctuation character as
/// its own token. Whitespace separates and is dropped.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() && !ch.is_control() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    seed: u64,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, seed: u64) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            index,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let raw: Vocab = serde_json::from_reader(BufReader::new(file))?;
        if raw.tokens.len() < 2 || raw.tokens[0] != "<pad>" || raw.tokens[1] != "<unk>" {
            return Err(Error::invalid("vocab must start with <pad>, <unk>"));
        }
        Ok(Vocab::from_tokens(raw.tokens, raw.seed))
    }
}

/// Keeps the `max_size - 2` most frequent tokens, ties broken
/// lexicographically. Index 0 is padding and 1 is unknown.
///
/// The ranking is fully determined by the token counts; `seed` is only
/// recorded on the vocabulary.
pub fn build_vocab(docs: &DocumentSet, max_size: usize, seed: u64) -> Result<Vocab> {
    if max_size < 3 {
        return Err(Error::invalid("vocab max_size must be at least 3"));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for doc in docs {
        for w in words(&doc.text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    // BTreeMap iteration is already lexicographic; a stable sort keeps it as the tie-break.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    tokens.extend(ranked.into_iter().take(max_size - 2).map(|(t, _)| t));
    Ok(Vocab::from_tokens(tokens, seed))
}

/// Fixed-length token ids; positions at or past `valid_len` are padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub valid_len: usize,
}

impl TokenSeq {
    pub fn valid(&self) -> &[u32] {
        &self.ids[..self.valid_len]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize_text(text: &str, vocab: &Vocab, s: usize) -> TokenSeq {
    let mut ids: Vec<u32> = words(text).iter().take(s).map(|w| vocab.id(w)).collect();
    let valid_len = ids.len();
    ids.resize(s, PAD);
    TokenSeq { ids, valid_len }
}

pub fn tokenize(doc: &Document, vocab: &Vocab, s: usize) -> TokenSeq {
    tokenize_text(&doc.text, vocab, s)
}

pub fn tokenize_all(docs: &DocumentSet, vocab: &Vocab, s: usize) -> Vec<TokenSeq> {
    docs.iter().map(|d| tokenize(d, vocab, s)).collect()
}

/// Train / seed / test partitions.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: DocumentSet,
    pub seed: DocumentSet,
    pub test: DocumentSet,
}

/// Deterministic shuffle then floor allocation; the rounding remainder goes to train.
pub fn split(docs: &DocumentSet, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (ft, fs, fe) = fractions;
    if ft <= 0.0 || fs <= 0.0 || fe <= 0.0 {
        return Err(Error::invalid("split fractions must all be positive"));
    }
    if ((ft + fs + fe) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must sum to 1"));
    }
    let n = docs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_seed = (n as f64 * fs).floor() as usize;
    let n_test = (n as f64 * fe).floor() as usize;
    let n_train = n - n_seed - n_test;
    let take = |range: &[usize]| DocumentSet {
        docs: range.iter().map(|&i| docs.docs[i].clone()).collect(),
    };
    Ok(Splits {
        train: take(&order[..n_train]),
        seed: take(&order[n_train..n_train + n_seed]),
        test: take(&order[n_train + n_seed..]),
    })
}

/// Public candidate pool, optionally containing leaked true-training documents.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedPool {
    pub documents: DocumentSet,
    pub leak_mask: Vec<bool>,
}

impl SeedPool {
    pub fn unleaked(documents: DocumentSet) -> Self {
        let leak_mask = vec![false; documents.len()];
        Self {
            documents,
            leak_mask,
        }
    }

    pub fn leaked_count(&self) -> usize {
        self.leak_mask.iter().filter(|&&b| b).count()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            #[serde(flatten)]
            doc: &'a Document,
            leaked: bool,
        }
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut out = BufWriter::new(file);
        for (doc, &leaked) in self.documents.iter().zip(&self.leak_mask) {
            serde_json::to_writer(&mut out, &Row { doc, leaked })?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Builds a pool of `pool_size` documents of which `round(leak_fraction * pool_size)`
/// are sampled from `true_set`, the rest from `distractors`, shuffled together.
/// Ids are reassigned `0..pool_size` in pool order.
pub fn mix_leakage(
    true_set: &DocumentSet,
    distractors: &DocumentSet,
    leak_fraction: f64,
    pool_size: usize,
    seed: u64,
) -> Result<SeedPool> {
    if !(0.0..=1.0).contains(&leak_fraction) {
        return Err(Error::invalid("leak_fraction must lie in [0, 1]"));
    }
    if pool_size == 0 {
        return Err(Error::invalid("pool_size must be positive"));
    }
    let n_leak = (leak_fraction * pool_size as f64).round() as usize;
    let n_other = pool_size - n_leak;
    if n_leak > true_set.len() {
        return Err(Error::invalid(format!(
            "true set too small: need {n_leak} leaked documents, have {}",
            true_set.len()
        )));
    }
    if n_other > distractors.len() {
        return Err(Error::invalid(format!(
            "distractor set too small: need {n_other} documents, have {}",
            distractors.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaked = rand::seq::index::sample(&mut rng, true_set.len(), n_leak);
    let others = rand::seq::index::sample(&mut rng, distractors.len(), n_other);
    let mut pool: Vec<(Document, bool)> = leaked
        .iter()
        .map(|i| (true_set.docs[i].clone(), true))
        .chain(others.iter().map(|i| (distractors.docs[i].clone(), false)))
        .collect();
    pool.shuffle(&mut rng);
    let (docs, leak_mask): (Vec<_>, Vec<_>) = pool
        .into_iter()
        .enumerate()
        .map(|(i, (d, leak))| {
            (
                Document {
                    id: i as u64,
                    ..d
                },
                leak,
            )
        })
        .unzip();
    Ok(SeedPool {
        documents: DocumentSet { docs },
        leak_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(texts: &[&str]) -> DocumentSet {
        DocumentSet::from_texts(texts.iter().map(|t| (*t, None)))
    }

    #[test]
    fn jsonl_reads_three_lines() {
        let input = "{\"text\": \"a b\", \"label\": 1}\n{\"text\": \"c\"}\n{\"text\": \"d e f\", \"label\": 0}\n";
        let docs = read_jsonl(input.as_bytes()).unwrap();
        assert_eq!(docs.len(), 3);
        let ids: Vec<u64> = docs.iter().map(|d| d.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(docs.get(0).unwrap().label, Some(1));
        assert_eq!(docs.get(1).unwrap().label, None);
    }

    #[test]
    fn jsonl_empty_file() {
        assert!(read_jsonl("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn jsonl_missing_text_names_line() {
        let input = "{\"text\": \"a\"}\n{\"label\": 2}\n";
        let err = read_jsonl(input.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "line 2: missing text");
    }

    #[test]
    fn jsonl_malformed_names_line() {
        let input = "{\"text\": \"a\"}\n{\"text\": \"b\"}\nnot json\n";
        let err = read_jsonl(input.as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 3:"), "{err}");
    }

    #[test]
    fn jsonl_skips_blank_texts() {
        let input = "{\"text\": \"a\"}\n{\"text\": \"   \"}\n{\"text\": \"b\"}\n";
        let docs = read_jsonl(input.as_bytes()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs.get(1).unwrap().id, 1);
    }

    #[test]
    fn jsonl_write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let docs = DocumentSet::from_texts([("x y", Some(1)), ("z", None)]);
        write_jsonl(&docs, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), docs);
    }

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let v = build_vocab(&set(&["a a b", "b c"]), 5, 0).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.id("c"), 4);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocab_empty_corpus_has_reserved_only() {
        let v = build_vocab(&DocumentSet::default(), 10, 0).unwrap();
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn vocab_capacity_bound() {
        let v = build_vocab(&set(&["a b c d e f g h i j"]), 3, 0).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.token(2), Some("a"));
    }

    #[test]
    fn vocab_rejects_tiny_max_size() {
        assert!(build_vocab(&set(&["a"]), 2, 0).is_err());
    }

    #[test]
    fn vocab_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        let v = build_vocab(&set(&["a a b", "b c"]), 5, 9).unwrap();
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("c"), 4);
    }

    #[test]
    fn tokenize_maps_and_pads() {
        let v = build_vocab(&set(&["a a b", "b"]), 10, 0).unwrap();
        let seq = tokenize_text("A b", &v, 4);
        assert_eq!(seq.ids, vec![2, 3, 0, 0]);
        assert_eq!(seq.valid_len, 2);
    }

    #[test]
    fn tokenize_truncates() {
        let text: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let doc = set(&[&text.join(" ")]);
        let v = build_vocab(&doc, 200, 0).unwrap();
        let seq = tokenize(doc.get(0).unwrap(), &v, 64);
        assert_eq!(seq.len(), 64);
        assert_eq!(seq.valid_len, 64);
        assert_eq!(seq.ids[0], v.id("w0"));
        assert_eq!(seq.ids[63], v.id("w63"));
    }

    #[test]
    fn tokenize_unknown_token() {
        let v = build_vocab(&set(&["a"]), 10, 0).unwrap();
        let seq = tokenize_text("a q a", &v, 5);
        assert_eq!(seq.ids, vec![2, UNK, 2, 0, 0]);
    }

    #[test]
    fn punctuation_splits_tokens() {
        assert_eq!(words("Hello, World!"), vec!["hello", ",", "world", "!"]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let docs = DocumentSet::from_texts((0..10).map(|i| (format!("doc {i}"), None)));
        let a = split(&docs, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.train.len(), a.seed.len(), a.test.len()), (8, 1, 1));
        let b = split(&docs, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn split_rejects_zero_fraction() {
        let docs = DocumentSet::from_texts((0..10).map(|i| (format!("doc {i}"), None)));
        assert!(split(&docs, (0.5, 0.5, 0.0), 1).is_err());
        assert!(split(&docs, (0.5, 0.3, 0.1), 1).is_err());
    }

    fn numbered(n: usize, prefix: &str) -> DocumentSet {
        DocumentSet::from_texts((0..n).map(|i| (format!("{prefix} {i}"), None)))
    }

    #[test]
    fn leakage_boundaries() {
        let truth = numbered(100, "true");
        let other = numbered(2000, "other");
        let none = mix_leakage(&truth, &other, 0.0, 50, 1).unwrap();
        assert_eq!(none.leaked_count(), 0);
        let all = mix_leakage(&truth, &other, 1.0, 100, 1).unwrap();
        assert_eq!(all.leaked_count(), 100);
        let mut got: Vec<&str> = all.documents.iter().map(|d| d.text.as_str()).collect();
        let mut want: Vec<&str> = truth.iter().map(|d| d.text.as_str()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        let half = mix_leakage(&numbered(600, "true"), &other, 0.5, 1000, 3).unwrap();
        assert_eq!(half.leaked_count(), 500);
        assert_eq!(half.documents.len(), 1000);
    }

    #[test]
    fn leakage_reports_short_side() {
        let truth = numbered(10, "true");
        let other = numbered(10, "other");
        let e = mix_leakage(&truth, &other, 0.9, 100, 0).unwrap_err();
        assert!(e.to_string().contains("true set"), "{e}");
        let e = mix_leakage(&truth, &other, 0.05, 100, 0).unwrap_err();
        assert!(e.to_string().contains("distractor"), "{e}");
    }

    #[test]
    fn leakage_jsonl_has_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let pool = mix_leakage(&numbered(5, "t"), &numbered(5, "o"), 0.4, 5, 2).unwrap();
        pool.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("\"leaked\":true").count(), 2);
        assert_eq!(text.matches("\"id\":").count(), 5);
    }

    proptest! {
        #[test]
        fn tokenize_is_deterministic(text in "[a-z ,.]{0,80}", s in 1usize..40) {
            let v = build_vocab(&set(&["a b c d e"]), 6, 0).unwrap();
            let a = tokenize_text(&text, &v, s);
            let b = tokenize_text(&text, &v, s);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.ids.len(), s);
            prop_assert!(a.ids[a.valid_len..].iter().all(|&i| i == PAD));
        }

        #[test]
        fn split_partitions_ids(n in 3usize..60, seed in any::<u64>()) {
            let docs = numbered(n, "d");
            let sp = split(&docs, (0.6, 0.2, 0.2), seed).unwrap();
            let mut ids: Vec<u64> = sp.train.iter().chain(&sp.seed).chain(&sp.test).map(|d| d.id).collect();
            ids.sort();
            prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
        }

        #[test]
        fn leak_count_is_exact(frac in 0.0f64..=1.0, pool in 1usize..200, seed in any::<u64>()) {
            let p = mix_leakage(&numbered(200, "t"), &numbered(200, "o"), frac, pool, seed).unwrap();
            prop_assert_eq!(p.leaked_count(), (frac * pool as f64).round() as usize);
            prop_assert_eq!(p.leak_mask.len(), p.documents.len());
        }

        #[test]
        fn vocab_ignores_document_order(mut texts in prop::collection::vec("[a-e]( [a-e]){0,6}", 1..12), seed in any::<u64>()) {
            let a = build_vocab(&set(&texts.iter().map(String::as_str).collect::<Vec<_>>()), 4, 0).unwrap();
            use rand::seq::SliceRandom;
            texts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = build_vocab(&set(&texts.iter().map(String::as_str).collect::<Vec<_>>()), 4, 0).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
