//! Synthetic planted-neuron fixture used as detection ground truth.
//!
//! The fixture is a [`TinyGatedModel`] whose inputs form one cluster per
//! language and whose MLP layers contain known "routing" neurons:
//!
//! - Early layers (up to the Type-1/Type-2 boundary) hold planted neurons
//!   per language whose value rows point from that language's cluster mean
//!   toward the shared midpoint cluster; their gates key on a per-language
//!   tag coordinate, so they fire selectively on that language.
//! - Later layers hold planted neurons pointing from the midpoint back to
//!   the language means.
//! - One layer past the boundary hosts per-query "reasoning" neurons that
//!   fire only once the representation has reached the shared cluster (a
//!   progress coordinate raised by the Type-1 plants) and write an answer
//!   direction read out by the unembedding. Masking the Type-1 plants
//!   therefore breaks question answering, which is the behavioral ground
//!   truth for intervention experiments.
//!
//! Everything is drawn from one seeded generator, so a fixed seed gives a
//! bitwise-identical fixture.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tiny::{EOS_TOKEN, UNK_TOKEN};
use super::{DeactivationMask, GatedMlpLayer, MaskProvenance, Nonlinearity, TinyGatedModel};
use crate::corpus::{ParallelCorpus, ParallelPair, QaDataset, QaItem};
use crate::detector::type1_boundary;
use crate::error::{Error, Result};
use crate::store::NeuronId;

const TAG_SCALE: f64 = 1.0;
const COMMON_OFFSET_NORM: f64 = 1.0;
const STOP_EMBED: f64 = 4.0;
const EOS_UNEMBED: f64 = 4.0;
const ANSWER_TAG_UNEMBED: f64 = 2.0;
const ANSWER_GAIN: f64 = 0.6;
/// Progress a reasoning neuron needs before its activation turns positive;
/// keyed on the tag axes so it applies to every language equally.
const REASONING_PROG_THRESHOLD: f64 = 0.5;

/// Construction parameters; see [`FixtureSpec::new`] for defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub languages: Vec<String>,
    /// Planted transfer neurons per (layer, language).
    pub planted_per_layer: usize,
    /// Parallel sentence pairs in the synthetic corpus.
    pub num_pairs: usize,
    /// Templated QA items per language (shrunk if hidden_dim lacks room).
    pub num_queries: usize,
    /// Distance of language cluster means from the common offset. English
    /// sits at +radius along the shared axis, every other language at
    /// -radius, so each (en, L2) midpoint collapses onto the common offset.
    pub cluster_radius: f64,
    /// Distance of each non-English language's private offset, which keeps
    /// the L2 clusters apart from each other.
    pub private_radius: f64,
    /// Norm of per-pair semantic vectors.
    pub semantic_scale: f64,
    /// Stddev of per-sentence embedding noise.
    pub noise_scale: f64,
    /// Stddev of non-planted weight entries.
    pub background_scale: f64,
    /// Gate steepness of planted neurons.
    pub gate_sharpness: f64,
    /// Height of the progress coordinate at the shared cluster.
    pub progress_lift: f64,
    pub max_context: usize,
}

impl FixtureSpec {
    pub fn new(
        seed: u64,
        num_layers: usize,
        hidden_dim: usize,
        mlp_dim: usize,
        languages: &[&str],
        planted_per_layer: usize,
    ) -> Self {
        FixtureSpec {
            seed,
            num_layers,
            hidden_dim,
            mlp_dim,
            languages: languages.iter().map(|s| s.to_string()).collect(),
            planted_per_layer,
            num_pairs: 160,
            num_queries: 6,
            cluster_radius: 20.0,
            private_radius: 3.0,
            semantic_scale: 2.0,
            noise_scale: 0.05,
            background_scale: 0.01,
            gate_sharpness: 4.0,
            progress_lift: 2.0,
            max_context: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    /// Moves representations toward the shared cluster (early layers).
    Type1,
    /// Moves representations back toward a language cluster (late layers).
    Type2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedNeuron {
    pub id: NeuronId,
    pub language: String,
    pub kind: PlantKind,
    /// Unit direction of the value row; the stored row is `gain * direction`.
    pub direction: Vec<f32>,
}

/// Per-language input distribution of the synthetic clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub means: BTreeMap<String, Vec<f64>>,
    pub noise_std: f64,
}

pub struct PlantedFixture {
    pub spec: FixtureSpec,
    pub model: TinyGatedModel,
    pub planted: Vec<PlantedNeuron>,
    pub cluster: ClusterSpec,
    /// Shared-cluster location in the (semantic + progress) subspace.
    pub shared_mean: Vec<f64>,
    /// Last Type-1 layer; Type-2 plants start at `boundary + 1`.
    pub boundary: usize,
    /// Queries actually embedded (may be fewer than requested).
    pub num_queries: usize,
}

impl PlantedFixture {
    pub fn ground_truth(&self, kind: PlantKind, language: &str) -> BTreeSet<NeuronId> {
        self.planted
            .iter()
            .filter(|p| p.kind == kind && p.language == language)
            .map(|p| p.id)
            .collect()
    }

    /// Ground-truth ids of one kind restricted to one layer.
    pub fn ground_truth_at_layer(
        &self,
        kind: PlantKind,
        language: &str,
        layer: usize,
    ) -> BTreeSet<NeuronId> {
        self.ground_truth(kind, language)
            .into_iter()
            .filter(|id| id.layer == layer)
            .collect()
    }

    pub fn planted_mask(&self, kind: PlantKind, language: &str) -> DeactivationMask {
        DeactivationMask::new(
            self.ground_truth(kind, language),
            MaskProvenance::Custom,
            Some(self.spec.seed),
        )
    }

    /// The synthetic parallel corpus: one word per (pair, language).
    pub fn corpus(&self) -> ParallelCorpus {
        let pairs = (0..self.spec.num_pairs)
            .map(|k| ParallelPair {
                pair_index: k,
                sentences: self
                    .spec
                    .languages
                    .iter()
                    .map(|l| (l.clone(), sentence_word(k, l)))
                    .collect(),
            })
            .collect();
        ParallelCorpus {
            languages: self.spec.languages.iter().cloned().collect(),
            pairs,
            dropped_rows: 0,
        }
    }

    /// Templated QA items whose answers require the planted routing.
    pub fn qa_dataset(&self, language: &str) -> Result<QaDataset> {
        if !self.spec.languages.iter().any(|l| l == language) {
            return Err(Error::Corpus(format!(
                "fixture has no language '{language}'"
            )));
        }
        let items = (0..self.num_queries)
            .map(|q| QaItem {
                question_id: format!("q{q}"),
                language: language.to_string(),
                question: query_word(q, language),
                answers: vec![answer_word(q, language)],
            })
            .collect();
        Ok(QaDataset { items })
    }
}

fn sentence_word(pair: usize, language: &str) -> String {
    format!("s{pair}_{language}")
}

fn query_word(q: usize, language: &str) -> String {
    format!("q{q}_{language}")
}

fn answer_word(q: usize, language: &str) -> String {
    format!("a{q}_{language}")
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Hidden-state axis bookkeeping.
struct Axes {
    num_languages: usize,
    num_queries: usize,
    hidden_dim: usize,
}

impl Axes {
    fn tag(&self, lang_idx: usize) -> usize {
        lang_idx
    }
    fn prog(&self) -> usize {
        self.num_languages
    }
    fn stop(&self) -> usize {
        self.num_languages + 1
    }
    fn answer(&self, q: usize) -> usize {
        self.num_languages + 2 + q
    }
    fn query_sem(&self, q: usize) -> usize {
        self.num_languages + 2 + self.num_queries + q
    }
    fn sem_range(&self) -> std::ops::Range<usize> {
        (self.num_languages + 2 + 2 * self.num_queries)..self.hidden_dim
    }
}

/// Convenience wrapper over [`build_fixture`] with default extras.
pub fn build_planted_fixture(
    seed: u64,
    num_layers: usize,
    hidden_dim: usize,
    mlp_dim: usize,
    languages: &[&str],
    planted_per_layer: usize,
) -> Result<PlantedFixture> {
    build_fixture(FixtureSpec::new(
        seed,
        num_layers,
        hidden_dim,
        mlp_dim,
        languages,
        planted_per_layer,
    ))
}

pub fn build_fixture(spec: FixtureSpec) -> Result<PlantedFixture> {
    let d = spec.hidden_dim;
    let k = spec.languages.len();
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "hidden_dim {d} cannot embed distinct clusters (need >= 2)"
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(
            "fixture needs at least 2 languages".into(),
        ));
    }
    if !spec.languages.iter().any(|l| l == "en") {
        return Err(Error::InvalidArgument(
            "fixture languages must include 'en'".into(),
        ));
    }
    if spec.planted_per_layer > spec.mlp_dim {
        return Err(Error::InvalidArgument(format!(
            "planted_per_layer {} exceeds mlp_dim {}",
            spec.planted_per_layer, spec.mlp_dim
        )));
    }
    if spec.num_layers < 2 {
        return Err(Error::InvalidArgument(
            "fixture needs at least 2 layers".into(),
        ));
    }
    if d < 2 * k + 4 {
        return Err(Error::InvalidArgument(format!(
            "hidden_dim {d} too small to embed routing for {k} languages (need >= {})",
            2 * k + 4
        )));
    }
    // Shrink the query count until tag/progress/stop/answer/query axes leave
    // enough semantic dimensions for the shared axis plus the per-language
    // private offsets.
    let num_queries = spec.num_queries.min((d - 2 * k - 4) / 2);
    let axes = Axes {
        num_languages: k,
        num_queries,
        hidden_dim: d,
    };
    let sem = axes.sem_range();
    let sem_dims = sem.len();
    let boundary = type1_boundary(spec.num_layers);
    let plants_per_layer_total = k * spec.planted_per_layer;
    let reasoning_layer = boundary + 1;
    if plants_per_layer_total + num_queries > spec.mlp_dim {
        return Err(Error::InvalidArgument(format!(
            "mlp_dim {} cannot hold {} plants plus {} reasoning neurons per layer",
            spec.mlp_dim, plants_per_layer_total, num_queries
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0f64, 1.0).expect("valid stddev");
    let sem_unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..sem_dims).map(|_| normal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    };

    // Semantic layout: one shared axis w with English at +radius and every
    // other language at -radius, plus a small private offset per L2. The
    // (en, L2) midpoint then loses the +-radius components entirely, which
    // keeps the shared cluster near the common offset for every pair.
    let shared_axis = sem_unit(&mut rng);
    let mut private_dirs: Vec<Vec<f64>> = Vec::new(); // per language; en unused
    for _ in 0..k {
        // Gram-Schmidt against the shared axis and earlier privates.
        let p = loop {
            let mut cand = sem_unit(&mut rng);
            let against: Vec<&Vec<f64>> = std::iter::once(&shared_axis)
                .chain(private_dirs.iter())
                .collect();
            for basis in against {
                let dot: f64 = cand.iter().zip(basis.iter()).map(|(a, b)| a * b).sum();
                for (c, b) in cand.iter_mut().zip(basis.iter()) {
                    *c -= dot * b;
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.1 {
                break cand.into_iter().map(|x| x / norm).collect::<Vec<f64>>();
            }
        };
        private_dirs.push(p);
    }
    let common = {
        let c = sem_unit(&mut rng);
        c.into_iter().map(|x| x * COMMON_OFFSET_NORM).collect::<Vec<f64>>()
    };

    // Semantic part of each cluster mean, and of each language's shared
    // target (the (en, L2) midpoint it transfers toward, lifted on the
    // progress axis).
    let sem_mean = |li: usize| -> Vec<f64> {
        let is_en = spec.languages[li] == "en";
        (0..sem_dims)
            .map(|i| {
                let side = if is_en {
                    spec.cluster_radius * shared_axis[i]
                } else {
                    -spec.cluster_radius * shared_axis[i]
                        + spec.private_radius * private_dirs[li][i]
                };
                common[i] + side
            })
            .collect()
    };
    let sem_target = |li: usize| -> Vec<f64> {
        let is_en = spec.languages[li] == "en";
        (0..sem_dims)
            .map(|i| {
                let offset = if is_en {
                    0.0
                } else {
                    0.5 * spec.private_radius * private_dirs[li][i]
                };
                common[i] + offset
            })
            .collect()
    };

    let mut means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (li, lang) in spec.languages.iter().enumerate() {
        let mut mu = vec![0.0f64; d];
        let sem_mu = sem_mean(li);
        for (i, axis) in sem.clone().enumerate() {
            mu[axis] = sem_mu[i];
        }
        mu[axes.tag(li)] = TAG_SCALE;
        means.insert(lang.clone(), mu);
    }
    // Anchor shared location (English's target); L2 targets add half their
    // private offset.
    let mut shared = vec![0.0f64; d];
    for (i, axis) in sem.clone().enumerate() {
        shared[axis] = common[i];
    }
    shared[axes.prog()] = spec.progress_lift;

    // Per-language transfer direction (tag axes untouched so gates stay
    // stable while representations move).
    let mut type1_dirs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (li, lang) in spec.languages.iter().enumerate() {
        let mut u = vec![0.0f64; d];
        let sem_mu = sem_mean(li);
        let target = sem_target(li);
        for (i, axis) in sem.clone().enumerate() {
            u[axis] = target[i] - sem_mu[i];
        }
        u[axes.prog()] = spec.progress_lift;
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "language '{lang}' coincides with its shared target"
            )));
        }
        type1_dirs.insert(lang.clone(), u.into_iter().map(|x| x / norm).collect());
    }

    let alpha_on = silu(spec.gate_sharpness * TAG_SCALE) * TAG_SCALE;
    let early_layers = boundary;
    let late_layers = spec.num_layers - boundary;

    // Background weights first, planted columns and rows overwritten after.
    let mut layers: Vec<GatedMlpLayer> = (0..spec.num_layers)
        .map(|_| GatedMlpLayer {
            gate: Array2::from_shape_fn((d, spec.mlp_dim), |_| {
                (normal.sample(&mut rng) * spec.background_scale) as f32
            }),
            up: Array2::from_shape_fn((d, spec.mlp_dim), |_| {
                (normal.sample(&mut rng) * spec.background_scale) as f32
            }),
            down: Array2::from_shape_fn((spec.mlp_dim, d), |_| {
                (normal.sample(&mut rng) * spec.background_scale) as f32
            }),
        })
        .collect();

    let mut planted = Vec::new();
    for layer_idx in 1..=spec.num_layers {
        let kind = if layer_idx <= boundary {
            PlantKind::Type1
        } else {
            PlantKind::Type2
        };
        let extra = if layer_idx == reasoning_layer {
            num_queries
        } else {
            0
        };
        let chosen = rand::seq::index::sample(
            &mut rng,
            spec.mlp_dim,
            plants_per_layer_total + extra,
        )
        .into_vec();
        let layer = &mut layers[layer_idx - 1];
        for (li, lang) in spec.languages.iter().enumerate() {
            let dist: f64 = {
                let sem_mu = sem_mean(li);
                let target = sem_target(li);
                let mut sq: f64 = sem_mu
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                sq += spec.progress_lift * spec.progress_lift;
                sq.sqrt()
            };
            let steps = match kind {
                PlantKind::Type1 => early_layers,
                PlantKind::Type2 => late_layers,
            } as f64;
            let gain = dist / (steps * spec.planted_per_layer as f64 * alpha_on);
            for slot in 0..spec.planted_per_layer {
                let j = chosen[li * spec.planted_per_layer + slot];
                let direction: Vec<f64> = match kind {
                    PlantKind::Type1 => type1_dirs[lang].clone(),
                    PlantKind::Type2 => type1_dirs[lang].iter().map(|x| -x).collect(),
                };
                for row in 0..d {
                    layer.gate[(row, j)] = 0.0;
                    layer.up[(row, j)] = 0.0;
                }
                layer.gate[(axes.tag(li), j)] = spec.gate_sharpness as f32;
                layer.up[(axes.tag(li), j)] = 1.0;
                for col in 0..d {
                    layer.down[(j, col)] = (gain * direction[col]) as f32;
                }
                planted.push(PlantedNeuron {
                    id: NeuronId::new(layer_idx, j),
                    language: lang.clone(),
                    kind,
                    direction: direction.iter().map(|&x| x as f32).collect(),
                });
            }
        }
        for q in 0..extra {
            let j = chosen[plants_per_layer_total + q];
            for row in 0..d {
                layer.gate[(row, j)] = 0.0;
                layer.up[(row, j)] = 0.0;
            }
            layer.gate[(axes.query_sem(q), j)] =
                (spec.gate_sharpness / spec.semantic_scale) as f32;
            layer.up[(axes.prog(), j)] = 1.0;
            for li in 0..k {
                layer.up[(axes.tag(li), j)] = -(REASONING_PROG_THRESHOLD as f32);
            }
            for col in 0..d {
                layer.down[(j, col)] = 0.0;
            }
            layer.down[(j, axes.answer(q))] = ANSWER_GAIN as f32;
        }
    }

    // Sentence semantics shared across languages; noise per (pair, language)
    // confined to semantic and tag coordinates.
    let sentence_sems: Vec<Vec<f64>> = (0..spec.num_pairs)
        .map(|_| {
            sem_unit(&mut rng)
                .into_iter()
                .map(|x| x * spec.semantic_scale)
                .collect()
        })
        .collect();

    let mut vocab = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
    let mut rows: Vec<Vec<f64>> = vec![
        {
            let mut v = vec![0.0; d];
            v[axes.stop()] = 0.01;
            v
        },
        {
            let mut v = vec![0.0; d];
            v[axes.stop()] = 0.01;
            v
        },
    ];
    for pair in 0..spec.num_pairs {
        for (li, lang) in spec.languages.iter().enumerate() {
            let mut v = means[lang].clone();
            for (i, axis) in sem.clone().enumerate() {
                v[axis] += sentence_sems[pair][i];
                v[axis] += normal.sample(&mut rng) * spec.noise_scale;
            }
            v[axes.tag(li)] += normal.sample(&mut rng) * spec.noise_scale;
            vocab.push(sentence_word(pair, lang));
            rows.push(v);
        }
    }
    for q in 0..num_queries {
        for lang in &spec.languages {
            let mut v = means[lang].clone();
            v[axes.query_sem(q)] = spec.semantic_scale;
            vocab.push(query_word(q, lang));
            rows.push(v);
        }
    }
    let answer_start = vocab.len();
    for q in 0..num_queries {
        for lang in &spec.languages {
            let mut v = vec![0.0; d];
            v[axes.stop()] = STOP_EMBED;
            vocab.push(answer_word(q, lang));
            rows.push(v);
        }
    }

    let vocab_len = vocab.len();
    let embedding = Array2::from_shape_fn((vocab_len, d), |(r, c)| rows[r][c] as f32);
    let mut unembed = Array2::<f32>::zeros((d, vocab_len));
    unembed[(axes.stop(), 1)] = EOS_UNEMBED as f32;
    for q in 0..num_queries {
        for li in 0..k {
            let col = answer_start + q * k + li;
            unembed[(axes.answer(q), col)] = 1.0;
            unembed[(axes.tag(li), col)] = ANSWER_TAG_UNEMBED as f32;
        }
    }

    let model = TinyGatedModel::from_weights(
        format!(
            "planted-fixture-s{}-L{}-d{}-m{}",
            spec.seed, spec.num_layers, d, spec.mlp_dim
        ),
        vocab,
        embedding,
        unembed,
        layers,
        Nonlinearity::Silu,
        spec.max_context,
    )?;

    Ok(PlantedFixture {
        model,
        planted,
        cluster: ClusterSpec {
            means,
            noise_std: spec.noise_scale,
        },
        shared_mean: shared,
        boundary,
        num_queries,
        spec,
    })
}
