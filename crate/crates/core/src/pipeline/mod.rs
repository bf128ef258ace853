//! Deterministic orchestration of the experiment stages over one run
//! directory.
//!
//! Layout under the run directory:
//!
//! ```text
//! manifest.json                 the manifest as given
//! data/                         splits, schema, proportions.json sidecar
//! model/                        model, classifiers, training log
//! samples/<sampler>.{csv,bin}   undefended samples
//! defense/<sampler>/            fitted hyperplanes and defended samples
//! reports/                      attack, stability, defense, utility CSVs
//! provenance/<stage>.json       input and output hashes per stage
//! ```

pub mod manifest;
pub mod provenance;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attack::{stability_curve, AttackReport, PredicateKind, PropertyPredicate, Samples};
use crate::continuous2d::{train_continuous_model, ContinuousConfig, PropertyClassifier};
use crate::defense::{
    defense_rows, fit_defense, guided_sample, ContinuousGenerator, FittedDefense, Generated, Generator,
};
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::eval::{f1_train_synth_test_real, frechet_distance, standardize_by, Metric};
use crate::io::{fmt_f64, read_json, read_matrix, write_atomic, write_json, write_matrix};
use crate::numerics::derive_seed;
use crate::samplers::SamplerConfig;
use crate::tabular::synthetic::{ColumnGenerator, SyntheticSpec};
use crate::tabular::{ingest_csv, train_tabddpm, Split, TabularDataset, TabularModel, TabularSchema};

pub use manifest::{classifier_name, DatasetSpec, ExperimentManifest, MetricSpec, ModelSpec, SamplingSpec, Sizes};
pub use provenance::Provenance;
pub use report::{merge_reports, MergedReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    DatasetGen,
    Train,
    Sample,
    Attack,
    DefendFit,
    DefendSample,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::DatasetGen,
        Stage::Train,
        Stage::Sample,
        Stage::Attack,
        Stage::DefendFit,
        Stage::DefendSample,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::DatasetGen => "dataset-gen",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Attack => "attack",
            Stage::DefendFit => "defend-fit",
            Stage::DefendSample => "defend-sample",
            Stage::Eval => "eval",
        }
    }
}

/// Ground truth for one predicate on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionRecord {
    pub predicate: String,
    /// Fraction the generator was asked for, when the predicate maps onto
    /// a planted parameter.
    pub planted: Option<f64>,
    /// Fraction observed in the generated training rows.
    pub realized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionSidecar {
    pub manifest_hash: String,
    pub seed: u64,
    pub rows: usize,
    pub proportions: Vec<ProportionRecord>,
}

/// Header row and seed-free identity columns shared by every report.
pub(crate) const ID_COLUMNS: [&str; 5] = ["run", "manifest_hash", "seed", "model", "sampler"];

enum Loaded {
    Tabular(TabularModel),
    Points {
        model: DiffusionModel,
        classifiers: BTreeMap<String, PropertyClassifier>,
    },
}

pub struct Run {
    pub manifest: ExperimentManifest,
    pub seed: u64,
    pub dir: PathBuf,
    pub force: bool,
    hash: String,
}

const SIDECAR: &str = "data/proportions.json";
const SCHEMA: &str = "data/schema.json";
const MODEL: &str = "model/model.json";
const CLASSIFIERS: &str = "model/classifiers.json";
const TRAINING_LOG: &str = "model/training_log.json";
const ATTACK: &str = "reports/attack.csv";
const STABILITY: &str = "reports/stability.csv";
const DEFENSE: &str = "reports/defense.csv";
const UTILITY: &str = "reports/utility.csv";

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl Run {
    /// Open a run directory: `out` overrides the manifest's directory and
    /// `seed` its seed. Writes `manifest.json`.
    pub fn open(manifest: ExperimentManifest, seed: Option<u64>, out: Option<PathBuf>, force: bool) -> Result<Self> {
        manifest.validate()?;
        let dir = out
            .or_else(|| manifest.output_dir.clone())
            .ok_or_else(|| Error::input("no output directory: pass --out or set output_dir"))?;
        fs::create_dir_all(&dir)
            .map_err(|e| Error::input(format!("cannot create output directory {}: {e}", dir.display())))?;
        let probe = dir.join(".write-check");
        fs::write(&probe, b"")
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| Error::input(format!("output directory {} is not writable: {e}", dir.display())))?;
        let run = Self {
            seed: seed.unwrap_or(manifest.seed),
            hash: manifest.hash(),
            manifest,
            dir,
            force,
        };
        write_atomic(&run.dir.join("manifest.json"), run.manifest.to_json().as_bytes())?;
        Ok(run)
    }

    pub fn manifest_hash(&self) -> &str {
        &self.hash
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn seed_for(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, purpose)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        match stage {
            Stage::DatasetGen => self.dataset_gen(),
            Stage::Train => self.train(),
            Stage::Sample => self.sample(),
            Stage::Attack => self.attack(),
            Stage::DefendFit => self.defend_fit(),
            Stage::DefendSample => self.defend_sample(),
            Stage::Eval => self.eval(),
        }
    }

    /// Every stage in order; the defense stages are skipped when the
    /// manifest configures no defense.
    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            if matches!(stage, Stage::DefendFit | Stage::DefendSample) && self.manifest.defense.is_none() {
                continue;
            }
            self.run_stage(stage)?;
        }
        Ok(())
    }

    /// Run `body` unless the stage record shows it already ran on the same
    /// inputs. `inputs` pairs each upstream file with the stage producing it.
    fn stage(
        &self,
        stage: Stage,
        inputs: &[(Stage, String)],
        body: impl FnOnce() -> Result<Vec<String>>,
    ) -> Result<StageOutcome> {
        for (from, rel) in inputs {
            if !self.path(rel).exists() {
                return Err(Error::MissingArtifact {
                    stage: from.name().to_string(),
                    path: self.path(rel),
                });
            }
        }
        let names: Vec<String> = inputs.iter().map(|(_, r)| r.clone()).collect();
        let input_hashes = provenance::hash_files(&self.dir, &names)?;
        let record = self.path(&format!("provenance/{}.json", stage.name()));
        if !self.force && record.exists() {
            if let Ok(old) = read_json::<Provenance>(&record) {
                if old.is_current(&self.dir, &self.hash, self.seed, &input_hashes) {
                    log::info!("{}: up to date", stage.name());
                    return Ok(StageOutcome::UpToDate);
                }
            }
        }
        log::info!("{}: running", stage.name());
        let outputs = body()?;
        let prov = Provenance {
            stage: stage.name().to_string(),
            schema_version: manifest::SCHEMA_VERSION,
            manifest_hash: self.hash.clone(),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: input_hashes,
            outputs: provenance::hash_files(&self.dir, &outputs)?,
        };
        write_json(&record, &prov)?;
        Ok(StageOutcome::Ran)
    }

    fn split_file(&self, split: &str) -> String {
        if self.manifest.dataset.is_tabular() {
            format!("data/{split}.csv")
        } else {
            format!("data/{split}.bin")
        }
    }

    fn labels_file(split: &str) -> String {
        format!("data/{split}_labels.bin")
    }

    fn samples_file(&self, sampler: &str) -> String {
        let ext = if self.manifest.dataset.is_tabular() { "csv" } else { "bin" };
        format!("samples/{}.{ext}", sanitize(sampler))
    }

    fn defense_dir(sampler: &str) -> String {
        format!("defense/{}", sanitize(sampler))
    }

    fn defended_file(&self, sampler: &str) -> String {
        let ext = if self.manifest.dataset.is_tabular() { "csv" } else { "bin" };
        format!("{}/samples.{ext}", Self::defense_dir(sampler))
    }

    /// Predicates of the attack and the defense, first occurrence per id.
    fn all_predicates(&self) -> Vec<PropertyPredicate> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        let defended = self.manifest.defense.iter().flat_map(|d| d.properties.iter().flat_map(|p| p.classes.iter()));
        for p in self.manifest.predicates.iter().chain(defended) {
            if seen.insert(p.id.clone()) {
                out.push(p.clone());
            }
        }
        out
    }

    // ---- dataset-gen ----

    pub fn dataset_gen(&self) -> Result<StageOutcome> {
        self.stage(Stage::DatasetGen, &[], || {
            let sizes = self.manifest.dataset.sizes();
            let mut outputs = Vec::new();
            let records = match &self.manifest.dataset {
                DatasetSpec::Tabular { spec, .. } => {
                    let schema = spec.schema()?;
                    write_json(&self.path(SCHEMA), &schema)?;
                    outputs.push(SCHEMA.to_string());
                    let both = spec.generate_split(sizes.train, sizes.test, self.seed_for("dataset"))?;
                    let train = both.select(Split::Train);
                    let test = both.select(Split::Test);
                    let shadow = spec.generate(sizes.shadow, self.seed_for("shadow"))?;
                    for (name, d) in [("train", &train), ("shadow", &shadow), ("test", &test)] {
                        let rel = self.split_file(name);
                        d.write_csv(&self.path(&rel))?;
                        outputs.push(rel);
                    }
                    self.all_predicates()
                        .iter()
                        .map(|p| {
                            Ok(ProportionRecord {
                                predicate: p.id.clone(),
                                planted: planted_tabular(spec, p),
                                realized: crate::attack::infer_proportion(Samples::Tabular(&train), p)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                DatasetSpec::Continuous { mixture, targets, .. } => {
                    let parts = [
                        ("train", sizes.train, "dataset"),
                        ("shadow", sizes.shadow, "shadow"),
                        ("test", sizes.test, "test-split"),
                    ];
                    let mut train = None;
                    for (name, n, purpose) in parts {
                        let d = mixture.make_dataset(n, targets, self.seed_for(purpose))?;
                        let rel = self.split_file(name);
                        write_matrix(&self.path(&rel), &d.points)?;
                        let labels = Array2::from_shape_fn((d.len(), d.labels.len()), |(r, i)| f64::from(d.labels[i][r]));
                        let lrel = Self::labels_file(name);
                        write_matrix(&self.path(&lrel), &labels)?;
                        outputs.extend([rel, lrel]);
                        if name == "train" {
                            train = Some(d);
                        }
                    }
                    let train = train.expect("train split generated");
                    self.all_predicates()
                        .iter()
                        .map(|p| {
                            let (planted, realized) = match &p.kind {
                                PredicateKind::ClassifierBased { classifier } => {
                                    let i = (0..mixture.properties())
                                        .find(|&i| &classifier_name(i) == classifier)
                                        .expect("validated classifier reference");
                                    (Some(targets[i]), train.positive_fraction(i))
                                }
                                _ => (
                                    None,
                                    crate::attack::infer_proportion(
                                        Samples::Points {
                                            points: train.points.view(),
                                            classifier: None,
                                        },
                                        p,
                                    )?,
                                ),
                            };
                            Ok(ProportionRecord {
                                predicate: p.id.clone(),
                                planted,
                                realized,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let sidecar = ProportionSidecar {
                manifest_hash: self.hash.clone(),
                seed: self.seed,
                rows: sizes.train,
                proportions: records,
            };
            write_json(&self.path(SIDECAR), &sidecar)?;
            outputs.push(SIDECAR.to_string());
            Ok(outputs)
        })
    }

    fn schema(&self) -> Result<TabularSchema> {
        read_json(&self.path(SCHEMA))
    }

    fn read_table(&self, rel: &str, schema: &TabularSchema) -> Result<TabularDataset> {
        let ingested = ingest_csv(&self.path(rel), schema)?;
        if let Some(d) = ingested.diagnostics.first() {
            return Err(Error::input(format!("{rel}: line {}: {}", d.line, d.message)));
        }
        Ok(ingested.dataset)
    }

    // ---- train ----

    pub fn train(&self) -> Result<StageOutcome> {
        let tabular = self.manifest.dataset.is_tabular();
        let mut inputs = vec![(Stage::DatasetGen, self.split_file("train"))];
        if tabular {
            inputs.push((Stage::DatasetGen, SCHEMA.to_string()));
        } else {
            inputs.push((Stage::DatasetGen, Self::labels_file("train")));
        }
        self.stage(Stage::Train, &inputs, || {
            let spec = &self.manifest.model;
            let seed = self.seed_for("train");
            let mut outputs = vec![MODEL.to_string(), TRAINING_LOG.to_string()];
            if tabular {
                let train = self.read_table(&self.split_file("train"), &self.schema()?)?;
                let (model, log) = train_tabddpm(&train, &spec.net, spec.steps, &spec.train, seed)?;
                write_json(&self.path(MODEL), &model)?;
                write_json(&self.path(TRAINING_LOG), &log)?;
            } else {
                let points = read_matrix(&self.path(&self.split_file("train")))?;
                let labels = read_matrix(&self.path(&Self::labels_file("train")))?;
                let cfg = ContinuousConfig {
                    net: spec.net.clone(),
                    train: spec.train.clone(),
                    discrete_steps: spec.steps.unwrap_or(ContinuousConfig::default().discrete_steps),
                };
                let kind = spec.schedule.expect("validated schedule");
                let (model, log) = train_continuous_model(points.view(), kind, &cfg, seed)?;
                write_json(&self.path(MODEL), &model)?;
                write_json(&self.path(TRAINING_LOG), &log)?;
                let mut classifiers = BTreeMap::new();
                for i in 0..labels.ncols() {
                    let y: Vec<u8> = labels.column(i).iter().map(|&v| v as u8).collect();
                    let name = classifier_name(i);
                    let clf = PropertyClassifier::train(
                        points.view(),
                        &y,
                        &spec.classifier,
                        self.seed_for(&format!("classifier-{name}")),
                    )?;
                    classifiers.insert(name, clf);
                }
                write_json(&self.path(CLASSIFIERS), &classifiers)?;
                outputs.push(CLASSIFIERS.to_string());
            }
            Ok(outputs)
        })
    }

    fn model_inputs(&self) -> Vec<(Stage, String)> {
        let mut v = vec![(Stage::Train, MODEL.to_string())];
        if self.manifest.dataset.is_tabular() {
            v.push((Stage::DatasetGen, SCHEMA.to_string()));
        } else {
            v.push((Stage::Train, CLASSIFIERS.to_string()));
        }
        v
    }

    fn load(&self) -> Result<Loaded> {
        if self.manifest.dataset.is_tabular() {
            Ok(Loaded::Tabular(read_json(&self.path(MODEL))?))
        } else {
            Ok(Loaded::Points {
                model: read_json(&self.path(MODEL))?,
                classifiers: read_json(&self.path(CLASSIFIERS))?,
            })
        }
    }

    fn sampler_config(&self, label: &str) -> Option<&SamplerConfig> {
        self.manifest.sampling.samplers.iter().find(|s| s.label() == label)
    }

    fn write_generated(&self, rel: &str, generated: &Generated) -> Result<()> {
        match generated {
            Generated::Tabular(d) => d.write_csv(&self.path(rel)),
            Generated::Points(x) => write_matrix(&self.path(rel), x),
        }
    }

    fn read_generated(&self, rel: &str) -> Result<Generated> {
        if self.manifest.dataset.is_tabular() {
            Ok(Generated::Tabular(self.read_table(rel, &self.schema()?)?))
        } else {
            Ok(Generated::Points(read_matrix(&self.path(rel))?))
        }
    }

    // ---- sample ----

    pub fn sample(&self) -> Result<StageOutcome> {
        self.stage(Stage::Sample, &self.model_inputs(), || {
            let loaded = self.load()?;
            let m = self.manifest.sampling.m;
            let mut outputs = Vec::new();
            for label in self.manifest.sampler_labels() {
                let seed = self.seed_for(&format!("sample-{label}"));
                let generated = match &loaded {
                    Loaded::Tabular(model) => model.generate(m, None, seed)?,
                    Loaded::Points { model, .. } => {
                        let cfg = self.sampler_config(&label).expect("listed sampler").clone();
                        ContinuousGenerator {
                            model,
                            sampler: cfg,
                            classifier: None,
                        }
                        .generate(m, None, seed)?
                    }
                };
                let rel = self.samples_file(&label);
                self.write_generated(&rel, &generated)?;
                outputs.push(rel);
            }
            Ok(outputs)
        })
    }

    fn samples_view<'a>(
        generated: &'a Generated,
        predicate: &PropertyPredicate,
        classifiers: Option<&'a BTreeMap<String, PropertyClassifier>>,
    ) -> Samples<'a> {
        let classifier = match (&predicate.kind, classifiers) {
            (PredicateKind::ClassifierBased { classifier }, Some(map)) => map.get(classifier),
            _ => None,
        };
        generated.samples(classifier)
    }

    fn id_fields(&self, sampler: &str) -> Vec<String> {
        vec![
            self.manifest.name.clone(),
            self.hash.clone(),
            self.seed.to_string(),
            self.manifest.model.label().to_string(),
            sampler.to_string(),
        ]
    }

    // ---- attack ----

    pub fn attack(&self) -> Result<StageOutcome> {
        let mut inputs = self.model_inputs();
        inputs.push((Stage::DatasetGen, SIDECAR.to_string()));
        for label in self.manifest.sampler_labels() {
            inputs.push((Stage::Sample, self.samples_file(&label)));
        }
        self.stage(Stage::Attack, &inputs, || {
            let sidecar: ProportionSidecar = read_json(&self.path(SIDECAR))?;
            let real: BTreeMap<&str, f64> =
                sidecar.proportions.iter().map(|r| (r.predicate.as_str(), r.realized)).collect();
            let classifiers = match self.load()? {
                Loaded::Points { classifiers, .. } => Some(classifiers),
                Loaded::Tabular(_) => None,
            };
            let mut attack = csv_writer(&["predicate", "m", "real", "inferred", "abs_difference"]);
            let mut stability = csv_writer(&["predicate", "m", "inferred"]);
            for label in self.manifest.sampler_labels() {
                let generated = self.read_generated(&self.samples_file(&label))?;
                for p in &self.manifest.predicates {
                    let samples = Self::samples_view(&generated, p, classifiers.as_ref());
                    let r = AttackReport::new(samples, p, real.get(p.id.as_str()).copied(), &label, self.manifest.model.label())?;
                    let mut row = self.id_fields(&label);
                    row.extend([
                        r.predicate,
                        r.m.to_string(),
                        opt(r.real),
                        fmt_f64(r.inferred),
                        opt(r.abs_difference),
                    ]);
                    attack.write_record(&row)?;
                    if !self.manifest.sampling.stability_counts.is_empty() {
                        for (m, v) in stability_curve(samples, p, &self.manifest.sampling.stability_counts)? {
                            let mut row = self.id_fields(&label);
                            row.extend([p.id.clone(), m.to_string(), fmt_f64(v)]);
                            stability.write_record(&row)?;
                        }
                    }
                }
            }
            write_atomic(&self.path(ATTACK), &finish(attack)?)?;
            write_atomic(&self.path(STABILITY), &finish(stability)?)?;
            Ok(vec![ATTACK.to_string(), STABILITY.to_string()])
        })
    }

    fn with_generator<T>(&self, label: &str, f: impl FnOnce(&dyn Generator) -> Result<T>) -> Result<T> {
        match self.load()? {
            Loaded::Tabular(model) => f(&model),
            Loaded::Points { model, classifiers } => {
                let defense = self.manifest.defense.as_ref().expect("defense configured");
                let mut names = std::collections::BTreeSet::new();
                for p in defense.properties.iter().flat_map(|p| p.classes.iter()) {
                    if let PredicateKind::ClassifierBased { classifier } = &p.kind {
                        names.insert(classifier.clone());
                    }
                }
                if names.len() > 1 {
                    return Err(Error::config("a point defense may use at most one property classifier"));
                }
                let generator = ContinuousGenerator {
                    model: &model,
                    sampler: self.sampler_config(label).expect("listed sampler").clone(),
                    classifier: names.first().map(|n| &classifiers[n]),
                };
                f(&generator)
            }
        }
    }

    fn require_defense(&self) -> Result<()> {
        if self.manifest.defense.is_none() {
            return Err(Error::input("the manifest configures no defense"));
        }
        Ok(())
    }

    // ---- defend-fit ----

    pub fn defend_fit(&self) -> Result<StageOutcome> {
        self.require_defense()?;
        self.stage(Stage::DefendFit, &self.model_inputs(), || {
            let config = self.manifest.defense.as_ref().expect("checked");
            let mut outputs = Vec::new();
            for label in self.manifest.sampler_labels() {
                let fitted = self.with_generator(&label, |g| {
                    fit_defense(g, config, self.seed_for(&format!("defense-fit-{label}")))
                })?;
                let dir = Self::defense_dir(&label);
                for p in &fitted.properties {
                    let rel = format!("{dir}/{}.json", sanitize(&p.id));
                    write_json(&self.path(&rel), p)?;
                    outputs.push(rel);
                }
                let rel = format!("{dir}/fitted.json");
                write_json(&self.path(&rel), &fitted)?;
                outputs.push(rel);
            }
            Ok(outputs)
        })
    }

    // ---- defend-sample ----

    pub fn defend_sample(&self) -> Result<StageOutcome> {
        self.require_defense()?;
        let mut inputs = self.model_inputs();
        for label in self.manifest.sampler_labels() {
            inputs.push((Stage::DefendFit, format!("{}/fitted.json", Self::defense_dir(&label))));
        }
        self.stage(Stage::DefendSample, &inputs, || {
            let m = self.manifest.sampling.m;
            let mut outputs = Vec::new();
            let mut report = csv_writer(&["property", "predicate", "gamma", "inferred", "abs_difference", "m", "assigned"]);
            for label in self.manifest.sampler_labels() {
                let fitted: FittedDefense = read_json(&self.path(&format!("{}/fitted.json", Self::defense_dir(&label))))?;
                let rows = self.with_generator(&label, |g| {
                    let guided = guided_sample(g, &fitted, m, self.seed_for(&format!("defense-sample-{label}")))?;
                    let rel = self.defended_file(&label);
                    self.write_generated(&rel, &guided.generated)?;
                    outputs.push(rel);
                    defense_rows(g, &fitted, &guided)
                })?;
                for r in rows {
                    let mut row = self.id_fields(&label);
                    row.extend([
                        r.property,
                        r.predicate,
                        fmt_f64(r.gamma),
                        fmt_f64(r.inferred),
                        fmt_f64(r.abs_difference),
                        r.m.to_string(),
                        r.assigned.to_string(),
                    ]);
                    report.write_record(&row)?;
                }
            }
            write_atomic(&self.path(DEFENSE), &finish(report)?)?;
            outputs.push(DEFENSE.to_string());
            Ok(outputs)
        })
    }

    // ---- eval ----

    pub fn eval(&self) -> Result<StageOutcome> {
        let mut inputs = vec![
            (Stage::DatasetGen, self.split_file("train")),
            (Stage::DatasetGen, self.split_file("test")),
            (Stage::Train, MODEL.to_string()),
        ];
        for label in self.manifest.sampler_labels() {
            inputs.push((Stage::Sample, self.samples_file(&label)));
            if self.manifest.defense.is_some() {
                inputs.push((Stage::DefendSample, self.defended_file(&label)));
            }
        }
        self.stage(Stage::Eval, &inputs, || {
            let mut report = csv_writer(&["variant", "metric", "value", "n"]);
            let metrics = &self.manifest.metrics;
            let real_train = self.read_generated(&self.split_file("train"))?;
            let real_test = self.read_generated(&self.split_file("test"))?;
            let codec = match self.load()? {
                Loaded::Tabular(model) => Some(model.codec),
                Loaded::Points { .. } => None,
            };
            let features = |g: &Generated| -> Result<Array2<f64>> {
                match (g, &codec) {
                    (Generated::Tabular(d), Some(codec)) => codec.encode(d.rows.view()),
                    (Generated::Points(x), _) => Ok(x.clone()),
                    _ => Err(Error::input("sample kind does not match the dataset")),
                }
            };
            let test_features = features(&real_test)?;
            let mut emit = |sampler: &str, variant: &str, g: &Generated| -> Result<()> {
                if let (Some(label), Generated::Tabular(train), Generated::Tabular(test)) = (&metrics.label, g, &real_test) {
                    let f1 = f1_train_synth_test_real(train, test, label)?;
                    let mut row = self.id_fields(sampler);
                    row.extend([variant.into(), metric_name(Metric::F1).into(), fmt_f64(f1), g.len().to_string()]);
                    report.write_record(&row)?;
                }
                if metrics.frechet {
                    let (a, b) = standardize_by(test_features.view(), features(g)?.view());
                    let fd = frechet_distance(a.view(), b.view())?;
                    let mut row = self.id_fields(sampler);
                    row.extend([variant.into(), metric_name(Metric::Frechet).into(), fmt_f64(fd), g.len().to_string()]);
                    report.write_record(&row)?;
                }
                Ok(())
            };
            emit("real", "real", &real_train)?;
            for label in self.manifest.sampler_labels() {
                emit(&label, "undefended", &self.read_generated(&self.samples_file(&label))?)?;
                if self.manifest.defense.is_some() {
                    emit(&label, "defended", &self.read_generated(&self.defended_file(&label))?)?;
                }
            }
            write_atomic(&self.path(UTILITY), &finish(report)?)?;
            Ok(vec![UTILITY.to_string()])
        })
    }
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::F1 => "f1",
        Metric::Frechet => "frechet",
    }
}

/// Planted fraction of a tabular predicate, when it reads a planted
/// generator parameter directly.
fn planted_tabular(spec: &SyntheticSpec, p: &PropertyPredicate) -> Option<f64> {
    let column = |name: &str| spec.columns.iter().find(|c| c.name == name).map(|c| &c.generator);
    match &p.kind {
        PredicateKind::CategoricalEquals { column: c, value } | PredicateKind::CategoricalOneVsRest { column: c, value } => {
            match column(c)? {
                ColumnGenerator::Categorical { categories, proportions } => {
                    let i = categories.iter().position(|v| v == value)?;
                    Some(proportions[i] / proportions.iter().sum::<f64>())
                }
                _ => None,
            }
        }
        PredicateKind::NumericLessThan { column: c, threshold } => match column(c)? {
            ColumnGenerator::Numeric {
                planted: Some(planted), ..
            } if planted.threshold == *threshold => Some(planted.fraction_below),
            _ => None,
        },
        _ => None,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_writer(columns: &[&str]) -> csv::Writer<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let header: Vec<&str> = ID_COLUMNS.iter().chain(columns).copied().collect();
    w.write_record(&header).expect("in-memory write");
    w
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// True when `path` lies under a run directory produced by [`Run`].
pub fn is_run_dir(path: &Path) -> bool {
    path.join("manifest.json").is_file()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ExperimentManifest {
        ExperimentManifest::toy_preset()
    }

    fn open(m: ExperimentManifest, dir: &Path) -> Run {
        Run::open(m, None, Some(dir.to_path_buf()), false).unwrap()
    }

    #[test]
    fn manifest_round_trips() {
        for m in [
            ExperimentManifest::adult_preset(),
            ExperimentManifest::churn_preset(),
            toy(),
            ExperimentManifest::mixture_preset(0.3),
        ] {
            let back = ExperimentManifest::from_json(&m.to_json()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_json(), m.to_json());
            assert_eq!(back.hash(), m.hash());
        }
    }

    #[test]
    fn manifest_rejects_unknown_references() {
        let mut m = toy();
        m.predicates.push(PropertyPredicate::categorical_equals("nope", "a", 2).unwrap());
        assert!(m.validate().is_err());
        let mut m = toy();
        m.predicates.push(PropertyPredicate::categorical_equals("flag", "zzz", 2).unwrap());
        assert!(m.validate().is_err());
        let mut m = ExperimentManifest::mixture_preset(0.3);
        m.predicates.push(PropertyPredicate::classifier_based("property7").unwrap());
        assert!(m.validate().is_err());
        let mut m = toy();
        m.schema_version = 99;
        assert!(m.validate().is_err());
    }

    #[test]
    fn sidecar_records_planted_and_realized() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ExperimentManifest::adult_preset();
        m.dataset = match m.dataset {
            DatasetSpec::Tabular { spec, .. } => DatasetSpec::Tabular {
                spec,
                sizes: Sizes {
                    train: 4000,
                    shadow: 10,
                    test: 10,
                },
            },
            d => d,
        };
        let run = open(m, dir.path());
        run.dataset_gen().unwrap();
        let sidecar: ProportionSidecar = read_json(&dir.path().join(SIDECAR)).unwrap();
        let male = sidecar.proportions.iter().find(|r| r.predicate == "gender=Male").unwrap();
        assert_eq!(male.planted, Some(0.6705));
        assert!((male.realized - 0.6705).abs() < 1e-3);
        assert_eq!(sidecar.manifest_hash, run.manifest_hash());
    }

    #[test]
    fn shadow_and_train_share_no_points() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ExperimentManifest::mixture_preset(0.3);
        if let DatasetSpec::Continuous { sizes, .. } = &mut m.dataset {
            *sizes = Sizes {
                train: 2000,
                shadow: 2000,
                test: 10,
            };
        }
        let run = open(m, dir.path());
        run.dataset_gen().unwrap();
        let key = |r: ndarray::ArrayView1<f64>| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let train = crate::io::read_matrix(&dir.path().join("data/train.bin")).unwrap();
        let shadow = crate::io::read_matrix(&dir.path().join("data/shadow.bin")).unwrap();
        let seen: std::collections::HashSet<_> = train.rows().into_iter().map(key).collect();
        assert!(shadow.rows().into_iter().all(|r| !seen.contains(&key(r))));
        assert_ne!(run.seed_for("dataset"), run.seed_for("shadow"));
    }

    #[test]
    fn zero_rows_rejected() {
        let mut m = toy();
        if let DatasetSpec::Tabular { sizes, .. } = &mut m.dataset {
            sizes.train = 0;
        }
        assert!(m.validate().is_err());
    }

    #[test]
    fn unwritable_output_dir() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        let err = Run::open(toy(), None, Some(file.join("run")), false).err().unwrap();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn missing_upstream_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let run = open(toy(), dir.path());
        match run.train() {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "dataset-gen"),
            other => panic!("{other:?}"),
        }
        run.dataset_gen().unwrap();
        match run.attack() {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "train"),
            other => panic!("{other:?}"),
        }
    }

    fn read(dir: &Path, rel: &str) -> Vec<u8> {
        fs::read(dir.join(rel)).unwrap()
    }

    #[test]
    fn full_run_is_deterministic_and_idempotent() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let run_a = open(toy(), a.path());
        run_a.run_all().unwrap();
        open(toy(), b.path()).run_all().unwrap();
        for rel in [ATTACK, STABILITY, DEFENSE, UTILITY] {
            assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel}");
        }

        // One attack row per predicate, one hyperplane file per property.
        let attack = String::from_utf8(read(a.path(), ATTACK)).unwrap();
        assert_eq!(attack.lines().count(), 1 + toy().predicates.len());
        let defense = toy().defense.unwrap();
        for p in &defense.properties {
            let rel = format!("defense/{}/{}.json", TABULAR_SAMPLER_DIR, sanitize(&p.id));
            assert!(a.path().join(rel).is_file());
        }

        // Provenance names the manifest hash and the seed.
        for stage in Stage::ALL {
            let p: Provenance = read_json(&a.path().join(format!("provenance/{}.json", stage.name()))).unwrap();
            assert_eq!(p.manifest_hash, run_a.manifest_hash());
            assert_eq!(p.seed, run_a.seed);
        }
        assert!(attack.contains(run_a.manifest_hash()));

        for stage in Stage::ALL {
            assert_eq!(run_a.run_stage(stage).unwrap(), StageOutcome::UpToDate, "{}", stage.name());
        }
        let forced = Run::open(toy(), None, Some(a.path().to_path_buf()), true).unwrap();
        assert_eq!(forced.attack().unwrap(), StageOutcome::Ran);

        // A different seed changes the draws.
        let c = tempfile::tempdir().unwrap();
        let run_c = Run::open(toy(), Some(99), Some(c.path().to_path_buf()), false).unwrap();
        run_c.dataset_gen().unwrap();
        assert_ne!(read(a.path(), "data/train.csv"), read(c.path(), "data/train.csv"));
    }

    const TABULAR_SAMPLER_DIR: &str = manifest::TABULAR_SAMPLER;

    #[test]
    fn report_merges_runs() {
        assert!(merge_reports(&[]).is_err());
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut ma = toy();
        ma.defense = None;
        ma.metrics.frechet = false;
        ma.sampling.stability_counts.clear();
        let mut mb = ma.clone();
        ma.predicates.truncate(1);
        mb.predicates = vec![PropertyPredicate::numeric_less_than("x1", 2.0).unwrap()];
        mb.name = "toy-b".into();
        for (m, d) in [(ma, a.path()), (mb, b.path())] {
            let run = open(m, d);
            run.run_all().unwrap();
        }
        let merged = merge_reports(&[a.path().to_path_buf(), b.path().to_path_buf()]).unwrap();
        let subjects: std::collections::BTreeSet<&str> =
            merged.rows.iter().filter(|r| r[5] == "attack").map(|r| r[6].as_str()).collect();
        assert_eq!(subjects.len(), 2);
        assert_eq!(merged.plots.diagonal.len(), 2);
        let twice = merge_reports(&[a.path().to_path_buf(), a.path().to_path_buf()]).unwrap();
        let once = merge_reports(&[a.path().to_path_buf()]).unwrap();
        assert_eq!(twice.rows, once.rows);

        let text = fs::read_to_string(b.path().join("manifest.json")).unwrap();
        fs::write(
            b.path().join("manifest.json"),
            text.replace("\"schema_version\": 1", "\"schema_version\": 2"),
        )
        .unwrap();
        assert!(merge_reports(&[a.path().to_path_buf(), b.path().to_path_buf()]).is_err());
    }
}
