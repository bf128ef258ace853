//! The experiment manifest: one JSON document describing a run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{PredicateKind, PropertyPredicate};
use crate::continuous2d::{ClassifierConfig, MixtureSpec};
use crate::defense::DefenseConfig;
use crate::diffusion::{ScheduleKind, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::NetConfig;
use crate::samplers::SamplerConfig;
use crate::tabular::synthetic::{adult_like, churn_like, mixed_toy, SyntheticSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub predicates: Vec<PropertyPredicate>,
    #[serde(default)]
    pub defense: Option<DefenseConfig>,
    #[serde(default)]
    pub metrics: MetricSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sizes {
    pub train: usize,
    pub shadow: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Tabular {
        spec: SyntheticSpec,
        sizes: Sizes,
    },
    /// Mixture points; classifier `property{i}` learns property `i`.
    Continuous {
        mixture: MixtureSpec,
        /// Planted positive fraction of each property.
        targets: Vec<f64>,
        sizes: Sizes,
    },
}

impl DatasetSpec {
    pub fn sizes(&self) -> &Sizes {
        match self {
            DatasetSpec::Tabular { sizes, .. } | DatasetSpec::Continuous { sizes, .. } => sizes,
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, DatasetSpec::Tabular { .. })
    }
}

/// Name of the classifier trained for mixture property `i`.
pub fn classifier_name(i: usize) -> String {
    format!("property{i}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Noise formulation of a point model; tabular models leave it unset.
    #[serde(default)]
    pub schedule: Option<ScheduleKind>,
    #[serde(default)]
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Diffusion step count; defaults per data kind.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

impl ModelSpec {
    pub fn label(&self) -> &'static str {
        self.schedule.map_or("tabddpm", ScheduleKind::name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    /// Samples drawn per sampler, for the attack and the defense alike.
    pub m: usize,
    /// Point samplers; tabular models have a single built-in sampler.
    #[serde(default)]
    pub samplers: Vec<SamplerConfig>,
    /// Prefix sizes of the stability curves; empty skips them.
    #[serde(default)]
    pub stability_counts: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    /// Label column for train-on-synthetic, test-on-real F1.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub frechet: bool,
}

/// Label of the single tabular sampler in reports and file names.
pub const TABULAR_SAMPLER: &str = "ancestral";

impl ExperimentManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::input(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }

    /// Sampler labels in manifest order.
    pub fn sampler_labels(&self) -> Vec<String> {
        if self.dataset.is_tabular() {
            vec![TABULAR_SAMPLER.to_string()]
        } else {
            self.sampling.samplers.iter().map(SamplerConfig::label).collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::input(format!(
                "manifest schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.is_empty() || self.name.contains(',') {
            return Err(Error::input("run name must be non-empty and free of commas"));
        }
        let sizes = self.dataset.sizes();
        if sizes.train == 0 || sizes.test == 0 {
            return Err(Error::input("train and test splits need at least one row"));
        }
        if self.sampling.m == 0 {
            return Err(Error::input("sampling.m must be positive"));
        }
        let columns: BTreeSet<String> = match &self.dataset {
            DatasetSpec::Tabular { spec, .. } => {
                spec.validate()?;
                if self.model.schedule.is_some() {
                    return Err(Error::input("tabular models take no point schedule"));
                }
                if !self.sampling.samplers.is_empty() {
                    return Err(Error::input("tabular models use their own sampler; list no samplers"));
                }
                spec.schema()?.names().iter().map(|s| s.to_string()).collect()
            }
            DatasetSpec::Continuous { mixture, targets, .. } => {
                mixture.validate()?;
                mixture.reweighted(targets)?;
                if self.model.schedule.is_none() {
                    return Err(Error::input("point models need a schedule"));
                }
                if self.sampling.samplers.is_empty() {
                    return Err(Error::input("list at least one sampler"));
                }
                for s in &self.sampling.samplers {
                    s.validate()?;
                }
                let labels = self.sampler_labels();
                if labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
                    return Err(Error::input("sampler labels must be distinct"));
                }
                if self.metrics.label.is_some() {
                    return Err(Error::input("F1 needs a tabular label column"));
                }
                (0..2).map(|i| format!("x{i}")).collect()
            }
        };
        let classifiers: BTreeSet<String> = match &self.dataset {
            DatasetSpec::Continuous { mixture, .. } => (0..mixture.properties()).map(classifier_name).collect(),
            DatasetSpec::Tabular { .. } => BTreeSet::new(),
        };
        let mut predicates: Vec<&PropertyPredicate> = self.predicates.iter().collect();
        if let Some(d) = &self.defense {
            d.validate()?;
            predicates.extend(d.properties.iter().flat_map(|p| p.classes.iter()));
        }
        let mut ids = BTreeSet::new();
        for p in &self.predicates {
            if !ids.insert(&p.id) {
                return Err(Error::input(format!("predicate `{}` is listed twice", p.id)));
            }
        }
        for p in predicates {
            p.validate()?;
            self.check_reference(p, &columns, &classifiers)?;
        }
        if let Some(label) = &self.metrics.label {
            if let DatasetSpec::Tabular { spec, .. } = &self.dataset {
                if spec.schema()?.column(label)?.is_numeric() {
                    return Err(Error::input(format!("label column `{label}` is not categorical")));
                }
            }
        }
        let counts = &self.sampling.stability_counts;
        if counts.windows(2).any(|w| w[0] >= w[1]) || counts.first() == Some(&0) {
            return Err(Error::input("stability counts must be positive and strictly ascending"));
        }
        if counts.last().is_some_and(|&c| c > self.sampling.m) {
            return Err(Error::input("stability counts cannot exceed sampling.m"));
        }
        Ok(())
    }

    fn check_reference(
        &self,
        p: &PropertyPredicate,
        columns: &BTreeSet<String>,
        classifiers: &BTreeSet<String>,
    ) -> Result<()> {
        let missing = |what: &str, name: &str| {
            Err(Error::input(format!("predicate `{}` references unknown {what} `{name}`", p.id)))
        };
        match &p.kind {
            PredicateKind::ClassifierBased { classifier } => {
                if !classifiers.contains(classifier) {
                    return missing("classifier", classifier);
                }
            }
            PredicateKind::CategoricalEquals { column, value } | PredicateKind::CategoricalOneVsRest { column, value } => {
                if !columns.contains(column) {
                    return missing("column", column);
                }
                if let DatasetSpec::Tabular { spec, .. } = &self.dataset {
                    spec.schema()?.category_index(column, value)?;
                } else {
                    return Err(Error::input(format!("predicate `{}`: point sets have no categories", p.id)));
                }
            }
            PredicateKind::NumericLessThan { column, .. } | PredicateKind::NumericRange { column, .. } => {
                if !columns.contains(column) {
                    return missing("column", column);
                }
            }
        }
        Ok(())
    }

    /// Census-like run: attack on the planted properties, defense of Gender.
    pub fn adult_preset() -> Self {
        let spec = adult_like();
        let p = |c: &str, v: &str, k| PropertyPredicate::categorical_equals(c, v, k).expect("valid predicate");
        let race = ["White", "Black", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other"];
        let predicates = vec![
            p("gender", "Male", 2),
            PropertyPredicate::numeric_less_than("age", 30.0).expect("valid predicate"),
            p("race", "Black", 5),
            p("marital_status", "Divorced", 5),
            p("workclass", "Local-gov", 6),
        ];
        let defense = DefenseConfig::new(vec![
            crate::defense::PropertyDefense::binary("gender", p("gender", "Male", 2)),
            crate::defense::PropertyDefense::one_vs_rest(
                "race",
                race.iter()
                    .map(|r| PropertyPredicate::one_vs_rest("race", r, 5).expect("valid predicate"))
                    .collect(),
            ),
        ]);
        Self {
            schema_version: SCHEMA_VERSION,
            name: "adult".into(),
            seed: 7,
            dataset: DatasetSpec::Tabular {
                spec,
                sizes: Sizes {
                    train: 20_000,
                    shadow: 5_000,
                    test: 10_000,
                },
            },
            model: ModelSpec {
                schedule: None,
                net: NetConfig {
                    hidden: vec![128, 128, 128],
                    ..NetConfig::default()
                },
                train: TrainConfig {
                    steps: 8000,
                    lr: 2e-3,
                    ..TrainConfig::default()
                },
                steps: None,
                classifier: ClassifierConfig::default(),
            },
            sampling: SamplingSpec {
                m: 50_000,
                samplers: vec![],
                stability_counts: vec![100, 500, 1000, 5000, 10_000, 50_000],
            },
            predicates,
            defense: Some(defense),
            metrics: MetricSpec {
                label: Some("income".into()),
                frechet: true,
            },
            output_dir: None,
        }
    }

    /// Small mixed-type run that finishes in seconds.
    pub fn toy_preset() -> Self {
        let spec = mixed_toy();
        let schema = spec.schema().expect("valid preset");
        let mut predicates = Vec::new();
        for c in schema.columns() {
            if let Some(cats) = c.categories() {
                predicates.push(
                    PropertyPredicate::categorical_equals(&c.name, &cats[0], cats.len()).expect("valid predicate"),
                );
            }
        }
        let first = predicates[0].clone();
        Self {
            schema_version: SCHEMA_VERSION,
            name: "toy".into(),
            seed: 1,
            dataset: DatasetSpec::Tabular {
                spec,
                sizes: Sizes {
                    train: 2000,
                    shadow: 500,
                    test: 1000,
                },
            },
            model: ModelSpec {
                schedule: None,
                net: NetConfig::default(),
                train: TrainConfig {
                    steps: 300,
                    ..TrainConfig::default()
                },
                steps: Some(50),
                classifier: ClassifierConfig::default(),
            },
            sampling: SamplingSpec {
                m: 2000,
                samplers: vec![],
                stability_counts: vec![100, 1000, 2000],
            },
            predicates,
            defense: Some(DefenseConfig {
                pairs: 500,
                ..DefenseConfig::new(vec![crate::defense::PropertyDefense::binary(&first.id.clone(), first)])
            }),
            metrics: MetricSpec {
                label: None,
                frechet: true,
            },
            output_dir: None,
        }
    }

    /// Two-mode point run with PC and DPM samplers at a planted fraction.
    pub fn mixture_preset(target: f64) -> Self {
        let p = PropertyPredicate::classifier_based(&classifier_name(0)).expect("valid predicate");
        Self {
            schema_version: SCHEMA_VERSION,
            name: format!("mixture-{}", (target * 100.0).round()),
            seed: 11,
            dataset: DatasetSpec::Continuous {
                mixture: MixtureSpec::two_component(),
                targets: vec![target],
                sizes: Sizes {
                    train: 10_000,
                    shadow: 2_000,
                    test: 5_000,
                },
            },
            model: ModelSpec {
                schedule: Some(ScheduleKind::VpDiscrete),
                net: crate::continuous2d::ContinuousConfig::default().net,
                train: crate::continuous2d::ContinuousConfig::default().train,
                steps: Some(1000),
                classifier: ClassifierConfig::default(),
            },
            sampling: SamplingSpec {
                m: 5000,
                samplers: vec![SamplerConfig::pc(1000), SamplerConfig::dpm(40, 3)],
                stability_counts: vec![100, 500, 1000, 5000],
            },
            predicates: vec![p.clone()],
            defense: Some(DefenseConfig::new(vec![crate::defense::PropertyDefense::binary("property0", p)])),
            metrics: MetricSpec {
                label: None,
                frechet: true,
            },
            output_dir: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "adult" => Ok(Self::adult_preset()),
            "churn" => Ok(Self::churn_preset()),
            "toy" => Ok(Self::toy_preset()),
            "mixture" => Ok(Self::mixture_preset(0.3)),
            _ => Err(Error::input(format!("unknown preset `{name}` (adult, churn, toy, mixture)"))),
        }
    }

    /// Bank-churn-like run: attack on its planted properties.
    pub fn churn_preset() -> Self {
        let spec = churn_like();
        let schema = spec.schema().expect("valid preset");
        let predicates = schema
            .columns()
            .iter()
            .filter_map(|c| {
                let cats = c.categories()?;
                (cats.len() > 1).then(|| {
                    PropertyPredicate::categorical_equals(&c.name, &cats[0], cats.len()).expect("valid predicate")
                })
            })
            .collect();
        let mut m = Self::adult_preset();
        m.name = "churn".into();
        m.dataset = DatasetSpec::Tabular {
            spec,
            sizes: Sizes {
                train: 10_000,
                shadow: 2_000,
                test: 5_000,
            },
        };
        m.predicates = predicates;
        m.defense = None;
        m.metrics.label = Some("exited".into());
        m
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
