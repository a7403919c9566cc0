//! Zero-shot QA evaluation with token-based F1 under the three-condition
//! intervention protocol (no mask / Type-1 mask / baseline mask).
//!
//! Tokenization is lowercase + punctuation strip + whitespace split for
//! space-delimited scripts, and per-character tokens for ja/ko/zh.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::QaDataset;
use crate::error::{Error, Result};
use crate::model::{generate, DeactivationMask, GatedDecoder};

const CHAR_TOKENIZED: [&str; 3] = ["ja", "ko", "zh"];

/// Normalized token multiset input for the F1 computation.
pub fn tokenize_for_f1(text: &str, language: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    if CHAR_TOKENIZED.contains(&language) {
        lowered
            .chars()
            .filter(|c| c.is_alphanumeric())
            .map(|c| c.to_string())
            .collect()
    } else {
        lowered
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c.is_whitespace() {
                    c
                } else {
                    ' '
                }
            })
            .collect::<String>()
            .split_whitespace()
            .map(|s| s.to_string())
            .collect()
    }
}

fn multiset(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn f1_against(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let pm = multiset(pred);
    let gm = multiset(gold);
    let overlap: usize = pm
        .iter()
        .map(|(t, c)| c.min(gm.get(t).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-based F1 of a prediction against gold answers: the max over golds
/// of the multiset-overlap F1.
pub fn token_f1(prediction: &str, golds: &[String], language: &str) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::EmptyInput("token_f1 needs gold answers".into()));
    }
    let pred = tokenize_for_f1(prediction, language);
    Ok(golds
        .iter()
        .map(|g| f1_against(&pred, &tokenize_for_f1(g, language)))
        .fold(0.0, f64::max))
}

/// Per-language prompt templates; `{question}` is substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTable {
    pub default_template: String,
    pub per_language: BTreeMap<String, String>,
}

impl Default for PromptTable {
    fn default() -> Self {
        PromptTable {
            default_template: "{question}\nAnswer:".into(),
            per_language: BTreeMap::new(),
        }
    }
}

impl PromptTable {
    pub fn bare() -> Self {
        PromptTable {
            default_template: "{question}".into(),
            per_language: BTreeMap::new(),
        }
    }

    pub fn render(&self, language: &str, question: &str) -> String {
        self.per_language
            .get(language)
            .unwrap_or(&self.default_template)
            .replace("{question}", question)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaCondition {
    None,
    Type1,
    Baseline,
}

impl QaCondition {
    pub fn as_str(self) -> &'static str {
        match self {
            QaCondition::None => "none",
            QaCondition::Type1 => "type1",
            QaCondition::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for QaCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One generation outcome. Generation failures are recorded with f1 = 0 and
/// an error tag rather than dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOutcome {
    pub question_id: String,
    pub language: String,
    pub condition: QaCondition,
    pub generated: String,
    pub f1: f64,
    pub error_tag: Option<String>,
}

/// Mean F1 deltas per (language, filter threshold), over the question set
/// whose unmasked score clears the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageDeltas {
    pub language: String,
    pub threshold: f64,
    pub n_filtered: usize,
    pub none_mean: Option<f64>,
    pub type1_delta: Option<f64>,
    pub baseline_delta: Option<f64>,
}

/// Scatter datum: unmasked score vs. score under one intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub question_id: String,
    pub language: String,
    pub condition: QaCondition,
    pub base_f1: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaProtocolReport {
    pub results: Vec<QaOutcome>,
    pub deltas: Vec<LanguageDeltas>,
    pub scatter: Vec<ScatterPoint>,
}

impl QaProtocolReport {
    /// CSV of per-question outcomes.
    pub fn results_csv(&self) -> String {
        let mut s = String::from("question_id,language,condition,f1,error,generated\n");
        for r in &self.results {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.question_id,
                r.language,
                r.condition,
                r.f1,
                r.error_tag.as_deref().unwrap_or(""),
                r.generated.replace(['\n', ','], " ")
            ));
        }
        s
    }

    /// CSV of scatter points (x = unmasked F1, y = condition F1).
    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("question_id,language,condition,base_f1,f1\n");
        for p in &self.scatter {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.question_id, p.language, p.condition, p.base_f1, p.f1
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct QaProtocolConfig {
    pub max_new_tokens: usize,
    /// Unmasked-score filters for the delta report.
    pub thresholds: Vec<f64>,
    pub prompts: PromptTable,
}

impl Default for QaProtocolConfig {
    fn default() -> Self {
        QaProtocolConfig {
            max_new_tokens: 32,
            thresholds: vec![0.5, 0.8],
            prompts: PromptTable::default(),
        }
    }
}

fn first_line(text: &str) -> String {
    text.lines().next().unwrap_or("").trim().to_string()
}

/// Runs every question under the three conditions with greedy zero-shot
/// generation and reports per-question scores, filtered deltas, and scatter
/// data.
pub fn run_qa_protocol(
    dataset: &QaDataset,
    model: &dyn GatedDecoder,
    type1_mask: &DeactivationMask,
    baseline_mask: &DeactivationMask,
    config: &QaProtocolConfig,
) -> Result<QaProtocolReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("QA dataset is empty".into()));
    }
    type1_mask.validate(model.num_layers(), model.mlp_dim())?;
    baseline_mask.validate(model.num_layers(), model.mlp_dim())?;

    let conditions = [
        (QaCondition::None, None),
        (QaCondition::Type1, Some(type1_mask)),
        (QaCondition::Baseline, Some(baseline_mask)),
    ];
    let mut results = Vec::with_capacity(dataset.len() * 3);
    // (question_id, language) -> per-condition F1
    let mut by_question: BTreeMap<(String, String), BTreeMap<QaCondition, f64>> = BTreeMap::new();
    for item in &dataset.items {
        let prompt_text = config.prompts.render(&item.language, &item.question);
        let prompt = model.tokenize(&prompt_text)?;
        for (condition, mask) in &conditions {
            let (generated, f1, error_tag) =
                match generate(model, &prompt, *mask, config.max_new_tokens) {
                    Ok(text) => {
                        let answer = first_line(&text);
                        let f1 = token_f1(&answer, &item.answers, &item.language)?;
                        (answer, f1, None)
                    }
                    Err(e) => (String::new(), 0.0, Some(e.to_string())),
                };
            by_question
                .entry((item.question_id.clone(), item.language.clone()))
                .or_default()
                .insert(*condition, f1);
            results.push(QaOutcome {
                question_id: item.question_id.clone(),
                language: item.language.clone(),
                condition: *condition,
                generated,
                f1,
                error_tag,
            });
        }
    }

    let mut scatter = Vec::new();
    for ((qid, lang), scores) in &by_question {
        let base = scores[&QaCondition::None];
        for cond in [QaCondition::Type1, QaCondition::Baseline] {
            scatter.push(ScatterPoint {
                question_id: qid.clone(),
                language: lang.clone(),
                condition: cond,
                base_f1: base,
                f1: scores[&cond],
            });
        }
    }

    let languages: std::collections::BTreeSet<String> =
        dataset.items.iter().map(|i| i.language.clone()).collect();
    let mut deltas = Vec::new();
    for lang in &languages {
        for &threshold in &config.thresholds {
            // Membership is fixed by the unmasked score alone, so condition
            // order cannot change the filtered set.
            let filtered: Vec<&BTreeMap<QaCondition, f64>> = by_question
                .iter()
                .filter(|((_, l), scores)| l == lang && scores[&QaCondition::None] > threshold)
                .map(|(_, scores)| scores)
                .collect();
            let n = filtered.len();
            let mean_of = |cond: QaCondition| -> Option<f64> {
                (n > 0).then(|| {
                    filtered.iter().map(|s| s[&cond]).sum::<f64>() / n as f64
                })
            };
            let none_mean = mean_of(QaCondition::None);
            deltas.push(LanguageDeltas {
                language: lang.clone(),
                threshold,
                n_filtered: n,
                none_mean,
                type1_delta: mean_of(QaCondition::Type1)
                    .zip(none_mean)
                    .map(|(c, b)| c - b),
                baseline_delta: mean_of(QaCondition::Baseline)
                    .zip(none_mean)
                    .map(|(c, b)| c - b),
            });
        }
    }
    Ok(QaProtocolReport {
        results,
        deltas,
        scatter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn golds(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_match_scores_one() {
        assert_eq!(token_f1("paris", &golds(&["paris"]), "en").unwrap(), 1.0);
        assert_eq!(
            token_f1("Paris.", &golds(&["paris"]), "en").unwrap(),
            1.0,
            "case and punctuation are normalized away"
        );
    }

    #[test]
    fn partial_overlap_worked_example() {
        // {the,red,fox} vs {a,red,dog}: overlap {red}, P = R = 1/3
        let f1 = token_f1("the red fox", &golds(&["a red dog"]), "en").unwrap();
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        assert_eq!(token_f1("alpha beta", &golds(&["gamma"]), "en").unwrap(), 0.0);
        assert_eq!(token_f1("", &golds(&["gamma"]), "en").unwrap(), 0.0);
        assert_eq!(token_f1("", &golds(&[""]), "en").unwrap(), 1.0);
        assert!(token_f1("x", &[], "en").is_err());
    }

    #[test]
    fn max_over_golds() {
        let f1 = token_f1("red fox", &golds(&["a dog", "red fox"]), "en").unwrap();
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn character_tokenization_for_cjk() {
        let toks = tokenize_for_f1("東京 です。", "ja");
        assert_eq!(toks, vec!["東", "京", "で", "す"]);
        let f1 = token_f1("東京", &golds(&["東京です"]), "ja").unwrap();
        // overlap {東,京}: P = 1, R = 1/2 -> F1 = 2/3
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_is_symmetric_for_single_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let words = ["red", "fox", "dog", "a", "the", "blue"];
        for _ in 0..50 {
            let sample = |rng: &mut ChaCha8Rng| -> String {
                let n = rng.random_range(0..5);
                (0..n)
                    .map(|_| words[rng.random_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let x = sample(&mut rng);
            let y = sample(&mut rng);
            let xy = token_f1(&x, &golds(&[&y]), "en").unwrap();
            let yx = token_f1(&y, &golds(&[&x]), "en").unwrap();
            assert!((xy - yx).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&xy));
        }
    }

    #[test]
    fn f1_matches_direct_count_oracle_on_random_multisets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let words = ["w0", "w1", "w2", "w3"];
        for _ in 0..200 {
            let sample = |rng: &mut ChaCha8Rng| -> Vec<&str> {
                let n = rng.random_range(0..6);
                (0..n)
                    .map(|_| words[rng.random_range(0..words.len())])
                    .collect()
            };
            let pred_toks = sample(&mut rng);
            let gold_toks = sample(&mut rng);
            let pred = pred_toks.join(" ");
            let gold = gold_toks.join(" ");
            let got = token_f1(&pred, &golds(&[&gold]), "en").unwrap();
            // direct multiset count
            let mut overlap = 0usize;
            let mut gold_remaining: Vec<&str> = gold_toks.clone();
            for t in &pred_toks {
                if let Some(pos) = gold_remaining.iter().position(|g| g == t) {
                    gold_remaining.remove(pos);
                    overlap += 1;
                }
            }
            let expect = if pred_toks.is_empty() && gold_toks.is_empty() {
                1.0
            } else if overlap == 0 {
                0.0
            } else {
                let p = overlap as f64 / pred_toks.len() as f64;
                let r = overlap as f64 / gold_toks.len() as f64;
                2.0 * p * r / (p + r)
            };
            assert_eq!(got, expect, "pred={pred:?} gold={gold:?}");
        }
    }

    #[test]
    fn f1_one_iff_equal_multisets() {
        let a = token_f1("x y x", &golds(&["x x y"]), "en").unwrap();
        assert_eq!(a, 1.0);
        let b = token_f1("x y", &golds(&["x x y"]), "en").unwrap();
        assert!(b < 1.0);
    }
}
