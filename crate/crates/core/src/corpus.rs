//! Instruction corpora and the preprocessing pipeline: exact dedup, n-gram
//! dedup, minimum-length and repeated-template filters.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One instruction with identity and provenance metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl InstructionRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            meta: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Real,
    Synthetic,
    Selected,
}

/// An ordered corpus. Record order is the alignment contract for embedding rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<InstructionRecord>,
    pub role: CorpusRole,
}

impl Corpus {
    pub fn new(role: CorpusRole, records: Vec<InstructionRecord>) -> Self {
        Self { records, role }
    }

    /// Build a corpus from bare texts with ids `<prefix>-<index>`.
    pub fn from_texts<S: AsRef<str>>(role: CorpusRole, prefix: &str, texts: &[S]) -> Self {
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| InstructionRecord::new(format!("{prefix}-{i}"), t.as_ref()))
            .collect();
        Self { records, role }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.text.as_str())
    }

    fn retain_records(&self, keep: impl FnMut(&InstructionRecord) -> bool) -> Corpus {
        let mut keep = keep;
        Corpus {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            role: self.role,
        }
    }

    /// Check that ids are unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidValue(format!("duplicate record id {:?}", r.id)));
            }
        }
        Ok(())
    }

    /// Read a line-delimited JSON corpus (`{"id":..,"text":..,"meta":{..}}` per line).
    pub fn read_jsonl(path: impl AsRef<Path>, role: CorpusRole) -> Result<Corpus> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: InstructionRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            records.push(record);
        }
        let corpus = Corpus { records, role };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Splits text into comparison tokens. Implementations must be deterministic.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Whitespace-plus-punctuation splitting, lowercased.
///
/// Runs of alphanumeric characters form one token; every other
/// non-whitespace character is a token of its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

impl Tokenizer for SimpleTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                if !ch.is_whitespace() {
                    tokens.push(ch.to_lowercase().collect());
                }
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
        tokens
    }
}

/// Tokenizer backed by an external vocabulary file: tokens are matched
/// greedily (longest first) against the vocabulary, falling back to single
/// characters. Whitespace separates tokens and is never part of one.
#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    vocab: HashSet<String>,
    max_len: usize,
}

impl VocabTokenizer {
    pub fn new(entries: impl IntoIterator<Item = String>) -> Self {
        let vocab: HashSet<String> = entries
            .into_iter()
            .map(|e| e.to_lowercase())
            .filter(|e| !e.is_empty())
            .collect();
        let max_len = vocab.iter().map(|e| e.chars().count()).max().unwrap_or(1);
        Self { vocab, max_len }
    }

    /// One vocabulary entry per line.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(text.lines().map(|l| l.trim().to_string())))
    }
}

impl Tokenizer for VocabTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        for chunk in text.split_whitespace() {
            let chars: Vec<char> = chunk.to_lowercase().chars().collect();
            let mut i = 0;
            while i < chars.len() {
                let longest = (1..=self.max_len.min(chars.len() - i))
                    .rev()
                    .find(|&len| {
                        let piece: String = chars[i..i + len].iter().collect();
                        self.vocab.contains(&piece)
                    })
                    .unwrap_or(1);
                tokens.push(chars[i..i + longest].iter().collect());
                i += longest;
            }
        }
        tokens
    }
}

/// Keep the first occurrence of each exact text.
pub fn dedup_exact(corpus: &Corpus) -> Corpus {
    let mut seen = HashSet::new();
    corpus.retain_records(|r| seen.insert(r.text.clone()))
}

/// Drop every record sharing an `n`-gram with an earlier kept record.
///
/// N-grams are compared over lowercased tokens. Records with fewer than `n`
/// tokens have no n-grams and are always kept. Dropped records do not
/// contribute their n-grams.
pub fn dedup_ngram(corpus: &Corpus, n: usize, tokenizer: &dyn Tokenizer) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Argument("n-gram size must be at least 1".into()));
    }
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut kept = Vec::new();
    for record in &corpus.records {
        let tokens = tokenizer.tokenize(&record.text);
        let grams: Vec<&[String]> = if tokens.len() >= n {
            tokens.windows(n).collect()
        } else {
            Vec::new()
        };
        if grams.iter().any(|g| seen.contains(*g)) {
            continue;
        }
        for g in grams {
            seen.insert(g.to_vec());
        }
        kept.push(record.clone());
    }
    Ok(Corpus {
        records: kept,
        role: corpus.role,
    })
}

/// Keep records with strictly more than `min_tokens` tokens.
pub fn filter_min_tokens(corpus: &Corpus, min_tokens: usize, tokenizer: &dyn Tokenizer) -> Corpus {
    corpus.retain_records(|r| tokenizer.count(&r.text) > min_tokens)
}

/// Drop records whose `meta[key]` is not one of `allowed` (missing keys are dropped).
pub fn filter_meta(corpus: &Corpus, key: &str, allowed: &[&str]) -> Corpus {
    corpus.retain_records(|r| r.meta.get(key).is_some_and(|v| allowed.contains(&v.as_str())))
}

/// A literal template with `*` wildcard gaps. Each `*` matches one or more
/// characters; literal text is compared case-insensitively with whitespace
/// runs collapsed, and the template must cover the whole record.
#[derive(Debug, Clone)]
pub struct WildcardPattern {
    source: String,
    regex: Regex,
}

impl WildcardPattern {
    /// Parse a template; `\*` escapes a literal asterisk.
    pub fn parse(template: &str) -> Result<Self> {
        let invalid = |why: &str| Error::Config(format!("invalid pattern {template:?}: {why}"));
        let mut pieces = vec![String::new()];
        let mut chars = template.chars();
        while let Some(c) = chars.next() {
            match c {
                '\\' => match chars.next() {
                    Some(next) => pieces.last_mut().unwrap().push(next),
                    None => return Err(invalid("dangling escape")),
                },
                '*' => pieces.push(String::new()),
                _ => pieces.last_mut().unwrap().push(c),
            }
        }
        if pieces.iter().all(|p| p.trim().is_empty()) {
            return Err(invalid("template has no literal text"));
        }
        let body: Vec<String> = pieces.iter().map(|p| regex::escape(&normalize_ws(p))).collect();
        let regex = Regex::new(&format!("^{}$", body.join("(?:.+?)")))
            .map_err(|e| invalid(&e.to_string()))?;
        Ok(Self {
            source: template.to_string(),
            regex,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn matches(&self, text: &str) -> bool {
        self.regex.is_match(normalize_ws(text).trim())
    }
}

fn normalize_ws(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut prev_space = false;
    for c in lowered.chars() {
        if c.is_whitespace() {
            if !prev_space {
                out.push(' ');
            }
            prev_space = true;
        } else {
            out.push(c);
            prev_space = false;
        }
    }
    out
}

/// Drop records matching any of the wildcard templates.
pub fn filter_patterns(corpus: &Corpus, patterns: &[&str]) -> Result<Corpus> {
    let compiled = patterns
        .iter()
        .map(|p| WildcardPattern::parse(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(corpus.retain_records(|r| !compiled.iter().any(|p| p.matches(&r.text))))
}

/// Settings for [`preprocess`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub ngram: usize,
    pub min_tokens: usize,
    pub patterns: Vec<String>,
    /// `(meta key, allowed values)` filters, e.g. `("lang", ["en"])`.
    pub meta_filters: Vec<(String, Vec<String>)>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            ngram: 10,
            min_tokens: 0,
            patterns: Vec::new(),
            meta_filters: Vec::new(),
        }
    }
}

/// The full cleaning pipeline: metadata filters, exact dedup, n-gram dedup,
/// then length and template filters.
pub fn preprocess(corpus: &Corpus, config: &PreprocessConfig, tokenizer: &dyn Tokenizer) -> Result<Corpus> {
    let mut out = corpus.clone();
    for (key, allowed) in &config.meta_filters {
        let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
        out = filter_meta(&out, key, &allowed);
    }
    out = out.retain_records(|r| !r.text.trim().is_empty());
    out = dedup_exact(&out);
    out = dedup_ngram(&out, config.ngram, tokenizer)?;
    out = filter_min_tokens(&out, config.min_tokens, tokenizer);
    let patterns: Vec<&str> = config.patterns.iter().map(String::as_str).collect();
    filter_patterns(&out, &patterns)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::from_texts(CorpusRole::Real, "r", texts)
    }

    fn texts(c: &Corpus) -> Vec<&str> {
        c.texts().collect()
    }

    #[test]
    fn tokenizer_splits_words_and_punctuation() {
        let t = SimpleTokenizer.tokenize("Hello, World! it's 42.");
        assert_eq!(t, ["hello", ",", "world", "!", "it", "'", "s", "42", "."]);
    }

    #[test]
    fn exact_dedup_examples() {
        assert_eq!(texts(&dedup_exact(&corpus(&["A", "B", "A"]))), ["A", "B"]);
        let distinct = corpus(&["x", "y", "z"]);
        assert_eq!(dedup_exact(&distinct), distinct);
        assert_eq!(dedup_exact(&corpus(&["q"; 5])).len(), 1);
    }

    #[test]
    fn ngram_dedup_drops_later_owner_of_shared_window() {
        let shared = "one two three four five six seven eight nine ten";
        let c = corpus(&[
            &format!("alpha {shared} omega"),
            &format!("{shared} beta gamma"),
            "short text",
        ]);
        let out = dedup_ngram(&c, 10, &SimpleTokenizer).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.records[0].id, "r-0");
        assert_eq!(out.records[1].id, "r-2");
    }

    #[test]
    fn ngram_dedup_short_and_disjoint_kept() {
        let c = corpus(&["a b c", "a b c d", "a b c d e"]);
        // Fewer than 10 tokens: no n-grams, nothing dropped.
        assert_eq!(dedup_ngram(&c, 10, &SimpleTokenizer).unwrap().len(), 3);
        let d = corpus(&["red green blue", "cat dog cow", "sun moon star"]);
        assert_eq!(dedup_ngram(&d, 2, &SimpleTokenizer).unwrap(), d);
        assert!(dedup_ngram(&d, 0, &SimpleTokenizer).is_err());
    }

    #[test]
    fn ngram_dedup_is_case_insensitive() {
        let c = corpus(&["The Quick Brown", "the quick brown fox"]);
        assert_eq!(dedup_ngram(&c, 3, &SimpleTokenizer).unwrap().len(), 1);
    }

    #[test]
    fn min_token_boundaries() {
        let words = |n: usize| (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let c = corpus(&[&words(21), &words(20)]);
        let out = filter_min_tokens(&c, 20, &SimpleTokenizer);
        assert_eq!(out.len(), 1);
        assert_eq!(out.records[0].id, "r-0");
        assert_eq!(filter_min_tokens(&c, 0, &SimpleTokenizer).len(), 2);
    }

    #[test]
    fn chemical_industry_template_is_filtered() {
        let c = corpus(&[
            "Write an article about the Safety of 2-Chloropyridine 2000 words in chemical industry",
            "Write an article about cats",
            "Write an instruction of Ethyl acetate with 1500-2000 words in chemical industry",
        ]);
        let out = filter_patterns(
            &c,
            &[
                "Write an article about the * * words in chemical industry",
                "Write an instruction of * with * words in chemical industry",
            ],
        )
        .unwrap();
        assert_eq!(texts(&out), ["Write an article about cats"]);
        assert_eq!(filter_patterns(&c, &[]).unwrap(), c);
        assert_eq!(filter_patterns(&c, &["nothing * like this"]).unwrap(), c);
    }

    #[test]
    fn invalid_pattern_names_itself() {
        let err = filter_patterns(&corpus(&["a"]), &["* *"]).unwrap_err();
        assert!(err.to_string().contains("* *"), "{err}");
        assert!(WildcardPattern::parse("ends with \\").is_err());
    }

    #[test]
    fn wildcard_requires_nonempty_gap() {
        let p = WildcardPattern::parse("say * now").unwrap();
        assert!(p.matches("say hello now"));
        assert!(p.matches("Say  hello   there NOW"));
        assert!(!p.matches("say now"));
        assert!(!p.matches("say hello now please"));
    }

    #[test]
    fn vocab_tokenizer_prefers_longest_entry() {
        let t = VocabTokenizer::new(["hel".to_string(), "hello".to_string(), "wor".to_string()]);
        assert_eq!(t.tokenize("Hello world"), ["hello", "wor", "l", "d"]);
    }

    #[test]
    fn meta_filter_and_jsonl_round_trip() {
        let mut c = corpus(&["keep", "drop"]);
        c.records[0].meta.insert("lang".into(), "en".into());
        c.records[1].meta.insert("lang".into(), "de".into());
        assert_eq!(filter_meta(&c, "lang", &["en"]).len(), 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        c.write_jsonl(&path).unwrap();
        assert_eq!(Corpus::read_jsonl(&path, CorpusRole::Real).unwrap(), c);
    }

    #[test]
    fn duplicate_ids_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n").unwrap();
        assert!(Corpus::read_jsonl(&path, CorpusRole::Real).is_err());
    }
}
