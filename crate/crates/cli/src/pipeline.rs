//! Implementations of the pipeline commands.
//!
//! All artifacts are written under the config's output directory:
//!
//! ```text
//! out/
//!   run_train.xfrn  run_test.xfrn  values.xfrn  split.json
//!   detect/{type}_{lang}.{csv,json,mask.csv}
//!   intervene/{type}_{lang}.json + per-curve CSVs, cross_* reports
//!   stats/*.csv
//!   evaluate/qa_{lang}.csv scatter_{lang}.csv delta_report.json
//!   figures/*.svg with sibling .csv data
//! ```
//!
//! Randomness derives from the master seed: split = seed, non-parallel
//! derangement = seed+1, baseline masks = seed+2, probe folds = seed+3.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use xfrn_core::corpus::{
    load_parallel_tsv, load_qa_jsonl, pair_id, sample_id, split_50_50, ParallelCorpus, QaDataset,
    SplitPlan,
};
use xfrn_core::detector::{
    detect_language_specific_neurons, detect_transfer_neurons, DetectionResult, NeuronType,
};
use xfrn_core::error::{Error, Result};
use xfrn_core::geometry::{
    cevr_dimensionality, concat_pairs, mutual_knn_curve, pca_project, separability_probe,
    similarity_gap_curve, trajectory_linearity, centroid, centroid_distance_curve, CurveMeta,
    MetricKind, PairedCaptures, SimilarityCurve,
};
use xfrn_core::intervention::{
    baseline_mask, cross_lingual_effect, remeasure_under_mask, CrossLingualReport,
    InterventionCondition, RemeasureMetric, RemeasureSpec,
};
use xfrn_core::model::{forward_capture, CaptureInput, DeactivationMask, MaskProvenance};
use xfrn_core::stats::{
    anova_oneway, correlation_ratio, jaccard, mann_whitney_u, overlap_by_layer,
    significant_fraction, LabeledActivations,
};
use xfrn_core::store::{write_capture_run, CaptureKind, RunHandle, ValueVectorTable};

use crate::config::{load_adapter, load_experiment_config, ExperimentConfig, LoadedAdapter};

pub struct Ctx {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub out: PathBuf,
}

impl Ctx {
    pub fn load(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Ctx> {
        let (config, config_hash) = load_experiment_config(config_path)?;
        let seed = seed.unwrap_or(config.seed);
        let out = out.unwrap_or_else(|| config.out_dir.clone());
        Ok(Ctx {
            config,
            config_hash,
            seed,
            out,
        })
    }

    pub fn adapter(&self) -> Result<LoadedAdapter> {
        load_adapter(&self.config.adapter)
    }

    fn provenance(&self, command: &str) -> String {
        format!(
            "# tool=xfrn command={command} config={} seed={}\n",
            self.config_hash, self.seed
        )
    }

    fn derangement_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    fn baseline_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    fn probe_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    /// The corpus named by the config, or the adapter's synthetic one,
    /// truncated to the configured sample count.
    fn corpus(&self, adapter: &LoadedAdapter) -> Result<ParallelCorpus> {
        let corpus = match &self.config.parallel_corpus {
            Some(path) => load_parallel_tsv(path, &self.config.languages)?,
            None => adapter.synthetic_corpus().ok_or_else(|| {
                Error::Config(
                    "no parallel_corpus path and the adapter synthesizes none".into(),
                )
            })?,
        };
        for lang in &self.config.languages {
            if !corpus.languages.contains(lang) {
                return Err(Error::Corpus(format!(
                    "corpus has no '{lang}' column"
                )));
            }
        }
        if corpus.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        Ok(corpus.truncated(self.config.sample_count))
    }

    fn split_path(&self) -> PathBuf {
        self.out.join("split.json")
    }

    fn load_split(&self) -> Result<SplitPlan> {
        let path = self.split_path();
        let bytes = std::fs::read(&path).map_err(|_| {
            Error::Config(format!(
                "missing split plan {}; run `xfrn extract` first",
                path.display()
            ))
        })?;
        let plan: SplitPlan = serde_json::from_slice(&bytes)?;
        plan.validate()?;
        Ok(plan)
    }

    fn open_run(&self, name: &str) -> Result<RunHandle> {
        let path = self.out.join(name);
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing capture run {}; run `xfrn extract` first",
                path.display()
            )));
        }
        RunHandle::open(path)
    }

    fn load_values(&self) -> Result<ValueVectorTable> {
        let path = self.out.join("values.xfrn");
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing value-vector file {}; run `xfrn extract` first",
                path.display()
            )));
        }
        ValueVectorTable::load(path)
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Serialize, Deserialize)]
struct Provenance {
    tool: String,
    command: String,
    config_hash: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DetectionArtifact {
    provenance: Provenance,
    result: DetectionResult,
}

fn capture_kinds() -> BTreeSet<CaptureKind> {
    BTreeSet::from([
        CaptureKind::HiddenState,
        CaptureKind::PreMlp,
        CaptureKind::AttentionOut,
        CaptureKind::MlpActivation,
    ])
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

pub fn cmd_extract(ctx: &Ctx) -> Result<()> {
    let adapter = ctx.adapter()?;
    let model = adapter.decoder();
    let corpus = ctx.corpus(&adapter)?;
    ensure_dir(&ctx.out)?;

    let ids: Vec<String> = corpus.pairs.iter().map(|p| pair_id(p.pair_index)).collect();
    let plan = split_50_50(&ids, ctx.seed)?;
    write_json(&ctx.split_path(), &plan)?;

    let manifest = model.manifest(capture_kinds())?;
    for (name, side) in [("run_train.xfrn", &plan.train_ids), ("run_test.xfrn", &plan.test_ids)] {
        let mut inputs = Vec::new();
        for lang in &ctx.config.languages {
            for pair in &corpus.pairs {
                if !side.contains(&pair_id(pair.pair_index)) {
                    continue;
                }
                let text = pair.sentences.get(lang).ok_or_else(|| {
                    Error::Corpus(format!(
                        "pair {} has no '{lang}' side",
                        pair.pair_index
                    ))
                })?;
                inputs.push(CaptureInput::from_text(
                    model,
                    sample_id(pair.pair_index, lang),
                    lang,
                    text,
                )?);
            }
        }
        let records = forward_capture(model, &inputs, &capture_kinds(), None)?;
        let run = write_capture_run(manifest.clone(), records, ctx.out.join(name))?;
        println!(
            "wrote {} ({} records, {} languages)",
            ctx.out.join(name).display(),
            run.num_records(),
            run.languages().len()
        );
    }

    let values = model.value_vectors()?;
    values.write(ctx.out.join("values.xfrn"))?;
    println!("wrote {}", ctx.out.join("values.xfrn").display());

    write_json(
        &ctx.out.join("provenance.json"),
        &Provenance {
            tool: "xfrn".into(),
            command: "extract".into(),
            config_hash: ctx.config_hash.clone(),
            seed: ctx.seed,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

fn detect_stem(neuron_type: NeuronType, language: &str) -> String {
    format!("{neuron_type}_{language}")
}

pub fn cmd_detect(
    ctx: &Ctx,
    neuron_type: NeuronType,
    language: &str,
    top_n: Option<usize>,
) -> Result<()> {
    let run = ctx.open_run("run_train.xfrn")?;
    let values = ctx.load_values()?;
    let split = ctx.load_split()?;
    let top_n = top_n.unwrap_or(ctx.config.top_n);
    let result = detect_transfer_neurons(
        &run,
        &values,
        language,
        neuron_type,
        top_n,
        ctx.config.distance,
        Some(&split),
    )?;
    if result.truncated {
        println!(
            "warning: top_n {} exceeds the {} candidates; returning all",
            top_n, result.candidate_count
        );
    }
    println!(
        "detected {} of {} candidates ({} total neurons; selection is {:.4}% of the population)",
        result.rows.len(),
        result.candidate_count,
        result.population,
        100.0 * result.rows.len() as f64 / result.population as f64
    );
    let dir = ctx.out.join("detect");
    let stem = detect_stem(neuron_type, language);
    write_text(
        &dir.join(format!("{stem}.csv")),
        &format!("{}{}", ctx.provenance("detect"), result.to_csv()),
    )?;
    write_text(
        &dir.join(format!("{stem}.mask.csv")),
        &format!("{}{}", ctx.provenance("detect"), result.mask().to_csv()),
    )?;
    write_json(
        &dir.join(format!("{stem}.json")),
        &DetectionArtifact {
            provenance: Provenance {
                tool: "xfrn".into(),
                command: "detect".into(),
                config_hash: ctx.config_hash.clone(),
                seed: ctx.seed,
            },
            result,
        },
    )?;
    println!("wrote {}", dir.join(format!("{stem}.json")).display());
    Ok(())
}

fn load_detection(ctx: &Ctx, neuron_type: NeuronType, language: &str) -> Result<DetectionResult> {
    let path = ctx
        .out
        .join("detect")
        .join(format!("{}.json", detect_stem(neuron_type, language)));
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing detection artifact {}; run `xfrn detect --type {} --lang {language}` first",
            path.display(),
            neuron_type
        )));
    }
    Ok(read_json::<DetectionArtifact>(&path)?.result)
}

/// Masks are consumed from the `layer,index` CSV files that detect writes.
fn load_mask(ctx: &Ctx, neuron_type: NeuronType, language: &str) -> Result<DeactivationMask> {
    let path = ctx
        .out
        .join("detect")
        .join(format!("{}.mask.csv", detect_stem(neuron_type, language)));
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing mask file {}; run `xfrn detect --type {} --lang {language}` first",
            path.display(),
            neuron_type
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let provenance = match neuron_type {
        NeuronType::Type1 => MaskProvenance::DetectedType1,
        NeuronType::Type2 => MaskProvenance::DetectedType2,
    };
    DeactivationMask::from_csv_str(&text, provenance, None)
}

// ---------------------------------------------------------------------------
// intervene
// ---------------------------------------------------------------------------

fn curve_csv(ctx: &Ctx, command: &str, curves: &[SimilarityCurve]) -> String {
    let mut body = String::new();
    for (i, c) in curves.iter().enumerate() {
        let csv = c.to_csv();
        if i == 0 {
            body.push_str(&csv);
        } else {
            // skip repeated header
            body.push_str(csv.split_once('\n').map(|x| x.1).unwrap_or(""));
        }
    }
    format!("{}{}", ctx.provenance(command), body)
}

pub fn cmd_intervene(ctx: &Ctx, neuron_type: NeuronType, language: &str) -> Result<()> {
    let adapter = ctx.adapter()?;
    let model = adapter.decoder();
    let corpus = ctx.corpus(&adapter)?;
    let split = ctx.load_split()?;
    let detected_mask = load_mask(ctx, neuron_type, language)?;
    let control = baseline_mask(&detected_mask, model.mlp_dim(), ctx.baseline_seed())?;

    let metrics = BTreeSet::from([
        RemeasureMetric::HiddenGap,
        RemeasureMetric::ActivationGap,
        RemeasureMetric::MutualKnn,
        RemeasureMetric::CentroidCos,
    ]);
    let condition = match neuron_type {
        NeuronType::Type1 => InterventionCondition::Type1,
        NeuronType::Type2 => InterventionCondition::Type2,
    };
    let dir = ctx.out.join("intervene");
    let stem = detect_stem(neuron_type, language);
    for (tag, mask, cond) in [
        ("detected", &detected_mask, condition),
        ("baseline", &control, InterventionCondition::Baseline),
    ] {
        let spec = RemeasureSpec {
            model,
            corpus: &corpus,
            split: &split,
            l2: language.to_string(),
            metrics: metrics.clone(),
            knn_k: ctx.config.knn_k,
            nonparallel_seed: ctx.derangement_seed(),
            condition: cond,
        };
        let report = remeasure_under_mask(&spec, mask)?;
        write_json(&dir.join(format!("{stem}_{tag}.json")), &report)?;
        write_text(
            &dir.join(format!("{stem}_{tag}_before.csv")),
            &curve_csv(ctx, "intervene", &report.before),
        )?;
        write_text(
            &dir.join(format!("{stem}_{tag}_after.csv")),
            &curve_csv(ctx, "intervene", &report.after),
        )?;
        write_text(
            &dir.join(format!("{stem}_{tag}_delta.csv")),
            &curve_csv(ctx, "intervene", &report.deltas),
        )?;
        println!("wrote {}", dir.join(format!("{stem}_{tag}.json")).display());
    }

    // Cross-lingual deactivation against every other detected language of
    // the same type.
    for other in &ctx.config.languages {
        if other == language {
            continue;
        }
        let Ok(other_mask) = load_mask(ctx, neuron_type, other) else {
            continue;
        };
        let report: CrossLingualReport = cross_lingual_effect(
            model,
            &corpus,
            &split,
            other,
            language,
            &other_mask,
            &detected_mask,
        )?;
        let stem = format!("cross_{neuron_type}_{other}_to_{language}");
        write_json(&dir.join(format!("{stem}.json")), &report)?;
        write_text(
            &dir.join(format!("{stem}.csv")),
            &curve_csv(
                ctx,
                "intervene",
                &[report.cross.clone(), report.reference.clone()],
            ),
        )?;
        println!("wrote {}", dir.join(format!("{stem}.json")).display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

/// Per-layer f64 slices for one (kind, language) over an entire run.
fn layer_stack(
    run: &RunHandle,
    kind: CaptureKind,
    language: &str,
) -> Result<Vec<ndarray::Array2<f64>>> {
    (1..=run.manifest().num_layers)
        .map(|l| run.load_slice_f64(l, kind, Some(language)))
        .collect()
}

fn geometry_stats(ctx: &Ctx, run: &RunHandle, dir: &Path) -> Result<()> {
    let manifest = run.manifest().clone();
    let num_layers = manifest.num_layers;
    let en_hidden = layer_stack(run, CaptureKind::HiddenState, "en")?;
    let en_act = layer_stack(run, CaptureKind::MlpActivation, "en")?;
    let n = en_hidden[0].nrows();
    if n < 2 {
        return Err(Error::EmptyInput(
            "geometry statistics need at least 2 test sentences".into(),
        ));
    }
    let perm = xfrn_core::corpus::derangement(n, ctx.derangement_seed())?;
    let permute = |layers: &[ndarray::Array2<f64>]| -> Vec<ndarray::Array2<f64>> {
        layers
            .iter()
            .map(|m| {
                let mut out = ndarray::Array2::<f64>::zeros(m.dim());
                for (new_i, &old_i) in perm.iter().enumerate() {
                    out.row_mut(new_i).assign(&m.row(old_i));
                }
                out
            })
            .collect()
    };

    for l2 in ctx.config.languages.iter().filter(|l| *l != "en") {
        let l2_hidden = layer_stack(run, CaptureKind::HiddenState, l2)?;
        let l2_act = layer_stack(run, CaptureKind::MlpActivation, l2)?;
        let meta = CurveMeta::condition("none").with_pair("en", l2.clone());

        let parallel = PairedCaptures {
            a: en_hidden.clone(),
            b: l2_hidden.clone(),
        };
        let nonparallel = PairedCaptures {
            a: en_hidden.clone(),
            b: permute(&l2_hidden),
        };
        let (hs_p, hs_n) =
            similarity_gap_curve(&parallel, &nonparallel, CaptureKind::HiddenState, meta.clone())?;
        let parallel_act = PairedCaptures {
            a: en_act.clone(),
            b: l2_act.clone(),
        };
        let nonparallel_act = PairedCaptures {
            a: en_act.clone(),
            b: permute(&l2_act),
        };
        let (act_p, act_n) = similarity_gap_curve(
            &parallel_act,
            &nonparallel_act,
            CaptureKind::MlpActivation,
            meta.clone(),
        )?;
        write_text(
            &dir.join(format!("similarity_en_{l2}.csv")),
            &curve_csv(ctx, "stats", &[hs_p, hs_n, act_p, act_n]),
        )?;

        let knn = mutual_knn_curve(&en_hidden, &l2_hidden, ctx.config.knn_k, meta.clone())?;
        write_text(
            &dir.join(format!("mutual_knn_en_{l2}.csv")),
            &curve_csv(ctx, "stats", &[knn]),
        )?;

        let dist = centroid_distance_curve(&en_hidden, &l2_hidden, meta.clone())?;
        write_text(
            &dir.join(format!("centroid_cos_en_{l2}.csv")),
            &curve_csv(ctx, "stats", &[dist]),
        )?;

        // separability probe over concatenated pair features
        let mut par_features = Vec::with_capacity(num_layers);
        let mut non_features = Vec::with_capacity(num_layers);
        let l2_deranged = permute(&l2_hidden);
        for l in 0..num_layers {
            par_features.push(concat_pairs(&en_hidden[l].view(), &l2_hidden[l].view())?);
            non_features.push(concat_pairs(&en_hidden[l].view(), &l2_deranged[l].view())?);
        }
        let folds = ctx.config.probe_folds.min(n);
        let probe = separability_probe(&par_features, &non_features, folds, ctx.probe_seed())?;
        let mut probe = probe;
        probe.meta = meta;
        write_text(
            &dir.join(format!("separability_en_{l2}.csv")),
            &curve_csv(ctx, "stats", &[probe]),
        )?;
    }

    // CEVR dimensionality per language and threshold
    let mut cevr_curves = Vec::new();
    for lang in &ctx.config.languages {
        let hidden = if lang == "en" {
            en_hidden.clone()
        } else {
            layer_stack(run, CaptureKind::HiddenState, lang)?
        };
        for &thr in &ctx.config.cevr_thresholds {
            let values: Vec<Option<f64>> = hidden
                .iter()
                .map(|m| {
                    cevr_dimensionality(&m.view(), thr)
                        .map(|k| Some(k as f64))
                        .unwrap_or(None)
                })
                .collect();
            cevr_curves.push(SimilarityCurve::new(
                MetricKind::CevrDim,
                1,
                values,
                CurveMeta::condition(lang.clone()).with_threshold(thr),
            ));
        }
    }
    write_text(&dir.join("cevr.csv"), &curve_csv(ctx, "stats", &cevr_curves))?;

    // English centroid trajectory linearity
    let en_centroids: Vec<ndarray::Array1<f64>> = en_hidden
        .iter()
        .map(|m| centroid(&m.view()))
        .collect::<Result<_>>()?;
    let m = ctx.config.trajectory_m.min(num_layers).max(2);
    let trajectory = trajectory_linearity(&en_centroids, m, CurveMeta::condition("en"))?;
    write_text(
        &dir.join("trajectory_en.csv"),
        &curve_csv(ctx, "stats", &[trajectory]),
    )?;

    // PCA coordinates per layer
    for layer in 1..=num_layers {
        let mut by_language = BTreeMap::new();
        for lang in &ctx.config.languages {
            by_language.insert(
                lang.clone(),
                run.load_slice_f64(layer, CaptureKind::HiddenState, Some(lang))?,
            );
        }
        let projection = pca_project(&by_language, layer)?;
        write_text(
            &dir.join(format!("pca_layer{layer:02}.csv")),
            &format!("{}{}", ctx.provenance("stats"), projection.to_csv()),
        )?;
    }
    Ok(())
}

/// Activation values of one neuron across all test sentences, with binary
/// labels for a target language.
fn neuron_activations_with_labels(
    acts_by_lang: &BTreeMap<String, Vec<ndarray::Array2<f64>>>,
    neuron: xfrn_core::store::NeuronId,
    positive: &dyn Fn(&str) -> bool,
) -> (Vec<f64>, Vec<u32>, Vec<f64>, Vec<f64>) {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut group_pos = Vec::new();
    let mut group_neg = Vec::new();
    for (lang, layers) in acts_by_lang {
        let m = &layers[neuron.layer - 1];
        let is_pos = positive(lang);
        for k in 0..m.nrows() {
            let v = m[(k, neuron.index)];
            values.push(v);
            labels.push(u32::from(is_pos));
            if is_pos {
                group_pos.push(v);
            } else {
                group_neg.push(v);
            }
        }
    }
    (values, labels, group_pos, group_neg)
}

fn detection_stats(ctx: &Ctx, run: &RunHandle, dir: &Path) -> Result<()> {
    let acts_by_lang: BTreeMap<String, Vec<ndarray::Array2<f64>>> = ctx
        .config
        .languages
        .iter()
        .map(|lang| Ok((lang.clone(), layer_stack(run, CaptureKind::MlpActivation, lang)?)))
        .collect::<Result<_>>()?;

    let mut summary_rows: BTreeMap<NeuronType, BTreeMap<String, f64>> = BTreeMap::new();
    let mut family_rows: BTreeMap<NeuronType, BTreeMap<String, f64>> = BTreeMap::new();
    let mut fraction_lines = vec![format!(
        "type,language,eta_threshold,fraction_significant"
    )];
    let mut detections: BTreeMap<NeuronType, BTreeMap<String, DetectionResult>> = BTreeMap::new();

    for neuron_type in [NeuronType::Type1, NeuronType::Type2] {
        for lang in ctx.config.languages.iter().filter(|l| *l != "en") {
            let Ok(detection) = load_detection(ctx, neuron_type, lang) else {
                continue;
            };
            let mut per_neuron = vec![
                "layer,index,rank,eta2,anova_f,anova_p,mw_u,mw_p".to_string(),
            ];
            let mut etas = Vec::new();
            let mut eta_p = Vec::new();
            let mut family_etas = Vec::new();
            let own_family = ctx.config.family_map.get(lang);
            for row in &detection.rows {
                let (values, labels, pos, neg) = neuron_activations_with_labels(
                    &acts_by_lang,
                    row.neuron,
                    &|l: &str| l == lang,
                );
                let eta = correlation_ratio(&LabeledActivations::new(values, labels)?)?;
                let anova = anova_oneway(&[pos.clone(), neg.clone()])?;
                let mw = mann_whitney_u(&pos, &neg)?;
                per_neuron.push(format!(
                    "{},{},{},{eta},{},{},{},{}",
                    row.neuron.layer,
                    row.neuron.index,
                    row.rank,
                    anova.statistic,
                    anova.p_value,
                    mw.statistic,
                    mw.p_value
                ));
                etas.push(eta);
                eta_p.push((eta, anova.p_value));
                if let Some(own) = own_family {
                    let (values, labels, _, _) = neuron_activations_with_labels(
                        &acts_by_lang,
                        row.neuron,
                        &|l: &str| ctx.config.family_map.get(l) == Some(own),
                    );
                    family_etas
                        .push(correlation_ratio(&LabeledActivations::new(values, labels)?)?);
                }
            }
            write_text(
                &dir.join(format!(
                    "neuron_stats_{}.csv",
                    detect_stem(neuron_type, lang)
                )),
                &format!("{}{}\n", ctx.provenance("stats"), per_neuron.join("\n")),
            )?;
            if !etas.is_empty() {
                let mean = etas.iter().sum::<f64>() / etas.len() as f64;
                summary_rows
                    .entry(neuron_type)
                    .or_default()
                    .insert(lang.clone(), mean);
                for (thr, frac) in
                    significant_fraction(&eta_p, &ctx.config.eta_thresholds)?
                {
                    fraction_lines.push(format!(
                        "{neuron_type},{lang},{thr},{frac}"
                    ));
                }
            }
            if !family_etas.is_empty() {
                let mean = family_etas.iter().sum::<f64>() / family_etas.len() as f64;
                family_rows
                    .entry(neuron_type)
                    .or_default()
                    .insert(lang.clone(), mean);
            }
            detections
                .entry(neuron_type)
                .or_default()
                .insert(lang.clone(), detection);
        }
    }

    // correlation-ratio tables: rows = neuron type, columns = languages
    let l2_langs: Vec<&String> = ctx.config.languages.iter().filter(|l| *l != "en").collect();
    let table = |rows: &BTreeMap<NeuronType, BTreeMap<String, f64>>| -> String {
        let mut s = String::from("type");
        for lang in &l2_langs {
            s.push(',');
            s.push_str(lang);
        }
        s.push('\n');
        for (ty, cells) in rows {
            s.push_str(ty.as_str());
            for lang in &l2_langs {
                s.push(',');
                if let Some(v) = cells.get(lang.as_str()) {
                    s.push_str(&format!("{v}"));
                }
            }
            s.push('\n');
        }
        s
    };
    if !summary_rows.is_empty() {
        write_text(
            &dir.join("corr_ratio.csv"),
            &format!("{}{}", ctx.provenance("stats"), table(&summary_rows)),
        )?;
        write_text(
            &dir.join("significant_fraction.csv"),
            &format!(
                "{}{}\n",
                ctx.provenance("stats"),
                fraction_lines.join("\n")
            ),
        )?;
    }
    if !family_rows.is_empty() {
        write_text(
            &dir.join("family_corr_ratio.csv"),
            &format!("{}{}", ctx.provenance("stats"), table(&family_rows)),
        )?;
    }

    // Jaccard overlap across language pairs, per type
    for (neuron_type, by_lang) in &detections {
        if by_lang.len() < 2 {
            continue;
        }
        let langs: Vec<&String> = by_lang.keys().collect();
        let mut s = String::from("pair,jaccard\n");
        for i in 0..langs.len() {
            for j in (i + 1)..langs.len() {
                let a = &by_lang[langs[i]];
                let b = &by_lang[langs[j]];
                let value = jaccard(&a.neuron_set(), &b.neuron_set())?;
                s.push_str(&format!("{}-{},{value}\n", langs[i], langs[j]));
                let overlap = overlap_by_layer(a, b)?;
                write_text(
                    &dir.join(format!(
                        "overlap_{neuron_type}_{}_{}.csv",
                        langs[i], langs[j]
                    )),
                    &curve_csv(ctx, "stats", &[overlap]),
                )?;
            }
        }
        write_text(
            &dir.join(format!("jaccard_{neuron_type}.csv")),
            &format!("{}{}", ctx.provenance("stats"), s),
        )?;
    }

    // language-specific neurons per language and threshold
    for lang in &ctx.config.languages {
        let mut lines = vec!["layer,threshold,count".to_string()];
        for &thr in &ctx.config.eta_thresholds {
            let result = detect_language_specific_neurons(run, lang, thr)?;
            for (i, count) in result.per_layer_histogram.iter().enumerate() {
                lines.push(format!("{},{thr},{count}", i + 1));
            }
        }
        write_text(
            &dir.join(format!("lang_specific_{lang}.csv")),
            &format!("{}{}\n", ctx.provenance("stats"), lines.join("\n")),
        )?;
    }
    Ok(())
}

pub fn cmd_stats(ctx: &Ctx) -> Result<()> {
    let run = ctx.open_run("run_test.xfrn")?;
    let dir = ctx.out.join("stats");
    ensure_dir(&dir)?;
    geometry_stats(ctx, &run, &dir)?;
    detection_stats(ctx, &run, &dir)?;
    println!("wrote statistics under {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn cmd_evaluate(ctx: &Ctx, only_language: Option<&str>) -> Result<()> {
    let adapter = ctx.adapter()?;
    let model = adapter.decoder();
    let dir = ctx.out.join("evaluate");
    ensure_dir(&dir)?;
    let config = xfrn_core::evaluation::QaProtocolConfig {
        max_new_tokens: ctx.config.max_new_tokens,
        thresholds: ctx.config.f1_thresholds.clone(),
        prompts: ctx.config.prompt_table(),
    };
    let external: Option<QaDataset> = match &ctx.config.qa_dataset {
        Some(path) => Some(load_qa_jsonl(path)?),
        None => None,
    };
    let mut all_deltas = Vec::new();
    for lang in ctx.config.languages.iter().filter(|l| *l != "en") {
        if let Some(only) = only_language {
            if lang != only {
                continue;
            }
        }
        let dataset = match &external {
            Some(qa) => qa.for_language(lang),
            None => adapter
                .synthetic_qa(lang)
                .transpose()?
                .ok_or_else(|| {
                    Error::Config(
                        "no qa_dataset path and the adapter synthesizes none".into(),
                    )
                })?,
        };
        if dataset.is_empty() {
            println!("no QA items for '{lang}', skipping");
            continue;
        }
        let type1 = load_mask(ctx, NeuronType::Type1, lang)?;
        let baseline = baseline_mask(&type1, model.mlp_dim(), ctx.baseline_seed())?;
        let report = xfrn_core::evaluation::run_qa_protocol(
            &dataset, model, &type1, &baseline, &config,
        )?;
        write_text(
            &dir.join(format!("qa_{lang}.csv")),
            &format!("{}{}", ctx.provenance("evaluate"), report.results_csv()),
        )?;
        write_text(
            &dir.join(format!("scatter_{lang}.csv")),
            &format!("{}{}", ctx.provenance("evaluate"), report.scatter_csv()),
        )?;
        all_deltas.extend(report.deltas.clone());
        println!("wrote {}", dir.join(format!("qa_{lang}.csv")).display());
    }
    write_json(&dir.join("delta_report.json"), &all_deltas)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report (figures) lives in report.rs
// ---------------------------------------------------------------------------

pub use crate::report::cmd_report;
