//! Parallel sentence corpora, QA datasets, and train/test splits.
//!
//! Parallel corpora are TSV files whose header row names ISO 639-1 language
//! codes; every pair must have an English side. QA datasets are JSONL with
//! fields `{question_id, language, question, answers: [string]}`.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One aligned sentence tuple across languages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub pair_index: usize,
    /// language code -> sentence
    pub sentences: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub languages: BTreeSet<String>,
    pub pairs: Vec<ParallelPair>,
    /// Rows dropped at load time because a requested cell was empty.
    pub dropped_rows: usize,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sentence(&self, pair_index: usize, language: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|p| p.pair_index == pair_index)
            .and_then(|p| p.sentences.get(language))
            .map(|s| s.as_str())
    }

    /// Keeps the first `n` pairs (by position), mirroring sampled protocols.
    pub fn truncated(&self, n: usize) -> ParallelCorpus {
        ParallelCorpus {
            languages: self.languages.clone(),
            pairs: self.pairs.iter().take(n).cloned().collect(),
            dropped_rows: self.dropped_rows,
        }
    }
}

/// Stable sample id for one sentence: `p{pair:06}-{lang}`.
pub fn sample_id(pair_index: usize, language: &str) -> String {
    format!("p{pair_index:06}-{language}")
}

/// Stable pair id shared by all sides of a parallel tuple: `p{pair:06}`.
pub fn pair_id(pair_index: usize) -> String {
    format!("p{pair_index:06}")
}

/// Pair id of a sample id (`p000012-ja` -> `p000012`).
pub fn pair_id_of_sample(sample: &str) -> &str {
    sample.split('-').next().unwrap_or(sample)
}

/// Loads a parallel corpus from a UTF-8 TSV file with a header row of
/// language codes. Rows with any empty requested cell are dropped and
/// counted.
pub fn load_parallel_tsv(path: impl AsRef<Path>, languages: &[String]) -> Result<ParallelCorpus> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?
        .clone();
    let mut columns = Vec::with_capacity(languages.len());
    for lang in languages {
        let idx = headers.iter().position(|h| h == lang).ok_or_else(|| {
            Error::Corpus(format!(
                "{}: missing '{lang}' column (header: {})",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            ))
        })?;
        columns.push((lang.clone(), idx));
    }
    if !languages.iter().any(|l| l == "en") {
        return Err(Error::Corpus(
            "requested languages must include 'en'".into(),
        ));
    }
    let mut pairs = Vec::new();
    let mut dropped = 0usize;
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        let mut sentences = std::collections::BTreeMap::new();
        let mut complete = true;
        for (lang, idx) in &columns {
            match row.get(*idx).map(str::trim) {
                Some(cell) if !cell.is_empty() => {
                    sentences.insert(lang.clone(), cell.to_string());
                }
                _ => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            pairs.push(ParallelPair {
                pair_index: row_idx,
                sentences,
            });
        } else {
            dropped += 1;
        }
    }
    Ok(ParallelCorpus {
        languages: languages.iter().cloned().collect(),
        pairs,
        dropped_rows: dropped,
    })
}

/// Seeded derangement of `0..n`: a permutation with no fixed points.
///
/// Rejection-samples seeded shuffles until one is a derangement, so the
/// result is deterministic for a given (n, seed).
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "no derangement exists for {n} element(s)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Pairs every English sentence with an L2 sentence of a different
/// pair_index via a seeded derangement. Output length equals corpus length.
pub fn make_nonparallel_pairs(
    corpus: &ParallelCorpus,
    l2: &str,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument(
            "non-parallel pairing needs at least 2 pairs".into(),
        ));
    }
    let perm = derangement(corpus.len(), seed)?;
    let mut out = Vec::with_capacity(corpus.len());
    for (i, pair) in corpus.pairs.iter().enumerate() {
        let en = pair.sentences.get("en").ok_or_else(|| {
            Error::Corpus(format!("pair {} has no English side", pair.pair_index))
        })?;
        let partner = &corpus.pairs[perm[i]];
        let l2_sentence = partner.sentences.get(l2).ok_or_else(|| {
            Error::Corpus(format!(
                "pair {} has no '{l2}' side",
                partner.pair_index
            ))
        })?;
        out.push((en.clone(), l2_sentence.clone()));
    }
    Ok(out)
}

/// Disjoint train/test id sets from a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
}

impl SplitPlan {
    /// Train and test never overlap; violated only by hand-built plans.
    pub fn validate(&self) -> Result<()> {
        let overlap: Vec<_> = self.train_ids.intersection(&self.test_ids).collect();
        if !overlap.is_empty() {
            return Err(Error::SplitHygiene(format!(
                "train/test ids overlap: {} shared",
                overlap.len()
            )));
        }
        Ok(())
    }
}

/// 50:50 split of the given ids with a seeded shuffle. When the count is
/// odd the larger half goes to train.
pub fn split_50_50(ids: &[String], seed: u64) -> Result<SplitPlan> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("cannot split an empty id set".into()));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let train_len = sorted.len().div_ceil(2);
    let train_ids: BTreeSet<String> = sorted[..train_len].iter().cloned().collect();
    let test_ids: BTreeSet<String> = sorted[train_len..].iter().cloned().collect();
    Ok(SplitPlan {
        train_ids,
        test_ids,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question_id: String,
    pub language: String,
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct QaDataset {
    pub items: Vec<QaItem>,
}

impl QaDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn languages(&self) -> BTreeSet<String> {
        self.items.iter().map(|i| i.language.clone()).collect()
    }

    pub fn for_language(&self, language: &str) -> QaDataset {
        QaDataset {
            items: self
                .items
                .iter()
                .filter(|i| i.language == language)
                .cloned()
                .collect(),
        }
    }
}

/// Loads a QA dataset from JSONL. Every item must carry at least one gold
/// answer.
pub fn load_qa_jsonl(path: impl AsRef<Path>) -> Result<QaDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut items = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: QaItem = serde_json::from_str(&line).map_err(|e| {
            Error::Corpus(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        if item.answers.is_empty() {
            return Err(Error::Corpus(format!(
                "{} line {}: question '{}' has no gold answers",
                path.display(),
                lineno + 1,
                item.question_id
            )));
        }
        items.push(item);
    }
    Ok(QaDataset { items })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_corpus(n: usize) -> ParallelCorpus {
        let pairs = (0..n)
            .map(|i| ParallelPair {
                pair_index: i,
                sentences: std::collections::BTreeMap::from([
                    ("en".to_string(), format!("en sentence {i}")),
                    ("ja".to_string(), format!("ja sentence {i}")),
                ]),
            })
            .collect();
        ParallelCorpus {
            languages: BTreeSet::from(["en".to_string(), "ja".to_string()]),
            pairs,
            dropped_rows: 0,
        }
    }

    #[test]
    fn tsv_loads_and_drops_incomplete_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(&path, "en\tja\nhello\tkonnichiwa\nbye\t\nyes\thai\n").unwrap();
        let corpus =
            load_parallel_tsv(&path, &["en".to_string(), "ja".to_string()]).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.dropped_rows, 1);
        assert_eq!(corpus.sentence(0, "ja"), Some("konnichiwa"));
    }

    #[test]
    fn tsv_missing_en_column_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(&path, "ja\tko\na\tb\n").unwrap();
        let err =
            load_parallel_tsv(&path, &["en".to_string(), "ja".to_string()]).unwrap_err();
        assert!(err.to_string().contains("en"), "{err}");
    }

    #[test]
    fn tsv_scales_to_protocol_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.tsv");
        let mut text = String::from("en\tja\n");
        for i in 0..1000 {
            text.push_str(&format!("english {i}\tjapanese {i}\n"));
        }
        std::fs::write(&path, text).unwrap();
        let corpus =
            load_parallel_tsv(&path, &["en".to_string(), "ja".to_string()]).unwrap();
        assert_eq!(corpus.len(), 1000);
    }

    #[test]
    fn derangement_of_two_is_the_swap() {
        assert_eq!(derangement(2, 123).unwrap(), vec![1, 0]);
    }

    #[test]
    fn derangement_has_no_fixed_points_and_is_seeded() {
        for seed in 0..20 {
            let d = derangement(17, seed).unwrap();
            assert!(d.iter().enumerate().all(|(i, &p)| i != p));
            assert_eq!(d, derangement(17, seed).unwrap());
        }
        assert!(derangement(1, 0).is_err());
    }

    #[test]
    fn nonparallel_pairs_never_share_pair_index() {
        let corpus = toy_corpus(31);
        let pairs = make_nonparallel_pairs(&corpus, "ja", 5).unwrap();
        assert_eq!(pairs.len(), 31);
        for (en, ja) in &pairs {
            let en_idx: usize = en.rsplit(' ').next().unwrap().parse().unwrap();
            let ja_idx: usize = ja.rsplit(' ').next().unwrap().parse().unwrap();
            assert_ne!(en_idx, ja_idx);
        }
        assert_eq!(pairs, make_nonparallel_pairs(&corpus, "ja", 5).unwrap());
    }

    #[test]
    fn split_is_even_and_seeded() {
        let ids: Vec<String> = (0..4).map(pair_id).collect();
        let plan = split_50_50(&ids, 9).unwrap();
        assert_eq!(plan.train_ids.len(), 2);
        assert_eq!(plan.test_ids.len(), 2);
        assert_eq!(plan, split_50_50(&ids, 9).unwrap());
        plan.validate().unwrap();
    }

    #[test]
    fn odd_split_gives_larger_half_to_train() {
        let ids: Vec<String> = (0..5).map(pair_id).collect();
        let plan = split_50_50(&ids, 1).unwrap();
        assert_eq!(plan.train_ids.len(), 3);
        assert_eq!(plan.test_ids.len(), 2);
    }

    #[test]
    fn empty_split_errors() {
        assert!(split_50_50(&[], 0).is_err());
    }

    #[test]
    fn qa_jsonl_requires_answers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        std::fs::write(
            &path,
            r#"{"question_id":"q1","language":"en","question":"capital of france","answers":[]}"#,
        )
        .unwrap();
        let err = load_qa_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("q1"), "{err}");
    }
}
