use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attack::{PropertyPredicate, Samples};
use crate::continuous2d::PropertyClassifier;
use crate::defense::hyperplane::{fit_hyperplane, orthogonalize, Hyperplane, SvmConfig};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, RngStream};
use crate::samplers::{sample, step_grid, SamplerConfig, SamplerKind, ScoreModel, StepInterceptor};
use crate::tabular::synthetic::{apportion, shuffle};
use crate::tabular::{TabularDataset, TabularModel};

/// Samples produced by a [`Generator`].
#[derive(Clone, Debug, PartialEq)]
pub enum Generated {
    Points(Array2<f64>),
    Tabular(TabularDataset),
}

impl Generated {
    pub fn len(&self) -> usize {
        match self {
            Generated::Points(p) => p.nrows(),
            Generated::Tabular(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples<'a>(&'a self, classifier: Option<&'a PropertyClassifier>) -> Samples<'a> {
        match self {
            Generated::Points(p) => Samples::Points {
                points: p.view(),
                classifier,
            },
            Generated::Tabular(d) => Samples::Tabular(d),
        }
    }
}

/// A trained model plus the sampler that drives it, seen from the defense:
/// a state space, a grid of step indices (`last_step` is the prior, 0 the
/// final state) and an interceptable sampling routine.
pub trait Generator: Sync {
    fn state_dim(&self) -> usize;
    fn last_step(&self) -> Result<usize>;
    fn default_step(&self) -> Result<usize>;
    fn generate(&self, m: usize, interceptor: Option<&dyn StepInterceptor>, seed: u64) -> Result<Generated>;

    fn classifier(&self) -> Option<&PropertyClassifier> {
        None
    }

    fn evaluate(&self, generated: &Generated, predicate: &PropertyPredicate) -> Result<Vec<bool>> {
        predicate.evaluate(generated.samples(self.classifier()))
    }
}

pub struct ContinuousGenerator<'a> {
    pub model: &'a dyn ScoreModel,
    pub sampler: SamplerConfig,
    pub classifier: Option<&'a PropertyClassifier>,
}

/// Fraction of the grid, counted from the final sample, at which the
/// continuous defense intervenes by default.
pub const CONTINUOUS_STEP_FRACTION: f64 = 0.3;
/// The Langevin corrector lets low-dimensional chains cross between modes
/// long after the midpoint, erasing earlier shifts, so PC intervenes late.
pub const PC_STEP_FRACTION: f64 = 0.05;
/// Solver steps before the end at which the DPM defense intervenes.
pub const DPM_STEPS_FROM_END: usize = 6;

impl Generator for ContinuousGenerator<'_> {
    fn state_dim(&self) -> usize {
        self.model.dim()
    }

    fn last_step(&self) -> Result<usize> {
        Ok(step_grid(self.model.schedule(), &self.sampler)?.len() - 1)
    }

    fn default_step(&self) -> Result<usize> {
        let n = self.last_step()?;
        Ok(match self.sampler.kind {
            SamplerKind::Dpm => n.saturating_sub(DPM_STEPS_FROM_END),
            SamplerKind::Pc => (PC_STEP_FRACTION * n as f64).round() as usize,
            _ => (CONTINUOUS_STEP_FRACTION * n as f64).round() as usize,
        })
    }

    fn generate(&self, m: usize, interceptor: Option<&dyn StepInterceptor>, seed: u64) -> Result<Generated> {
        Ok(Generated::Points(sample(self.model, &self.sampler, m, interceptor, seed)?))
    }

    fn classifier(&self) -> Option<&PropertyClassifier> {
        self.classifier
    }
}

impl Generator for TabularModel {
    fn state_dim(&self) -> usize {
        TabularModel::state_dim(self)
    }

    fn last_step(&self) -> Result<usize> {
        Ok(self.schedule.steps())
    }

    /// The final state before decoding.
    fn default_step(&self) -> Result<usize> {
        Ok(0)
    }

    fn generate(&self, m: usize, interceptor: Option<&dyn StepInterceptor>, seed: u64) -> Result<Generated> {
        Ok(Generated::Tabular(self.sample(m, interceptor, seed)?))
    }
}

struct Recorder {
    steps: BTreeSet<usize>,
    states: Mutex<Vec<Option<Vec<f64>>>>,
}

impl StepInterceptor for Recorder {
    fn target_steps(&self) -> &BTreeSet<usize> {
        &self.steps
    }

    fn apply(&self, _step: usize, chain: usize, x: &mut [f64]) {
        self.states.lock().expect("recorder lock")[chain] = Some(x.to_vec());
    }
}

/// Intermediate states of `n` chains at one step, labeled by the final
/// sample of the same chain.
#[derive(Clone, Debug)]
pub struct PairedStates {
    pub step: usize,
    pub states: Array2<f64>,
    /// One label vector per predicate, in the order given.
    pub labels: Vec<Vec<bool>>,
}

pub fn collect_paired_states(
    generator: &dyn Generator,
    n: usize,
    step: usize,
    predicates: &[&PropertyPredicate],
    seed: u64,
) -> Result<PairedStates> {
    if n == 0 {
        return Err(Error::input("no chains to pair"));
    }
    let last = generator.last_step()?;
    if step > last {
        return Err(Error::config(format!("step {step} is outside the sampler grid 0..={last}")));
    }
    let recorder = Recorder {
        steps: BTreeSet::from([step]),
        states: Mutex::new(vec![None; n]),
    };
    let generated = generator.generate(n, Some(&recorder), seed)?;
    let d = generator.state_dim();
    let mut states = Array2::zeros((n, d));
    for (r, s) in recorder.states.into_inner().expect("recorder lock").into_iter().enumerate() {
        let s = s.ok_or_else(|| Error::Numerical(format!("chain {r} never reached step {step}")))?;
        states.row_mut(r).assign(&ndarray::ArrayView1::from(&s));
    }
    let mut labels = Vec::with_capacity(predicates.len());
    for p in predicates {
        let l = generator.evaluate(&generated, p)?;
        if l.iter().all(|&v| v) || l.iter().all(|&v| !v) {
            return Err(Error::input(format!(
                "degenerate training set for SVM: every chain has the same `{}` label",
                p.id
            )));
        }
        labels.push(l);
    }
    Ok(PairedStates { step, states, labels })
}

/// One defended property. A single predicate is a binary property steered
/// to both sides; several predicates form a one-vs-rest family whose chains
/// are each pushed into one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyDefense {
    pub id: String,
    pub classes: Vec<PropertyPredicate>,
    /// Binary: the positive-side target. One-vs-rest: one target per class.
    /// Defaults to `1 / k`.
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    /// Shift magnitude; defaults to `alpha_scale` times each hyperplane's
    /// reach.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub step: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Exact side counts up to rounding, in shuffled chain order.
    #[default]
    Stratified,
    /// Independent draws per chain.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub properties: Vec<PropertyDefense>,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default)]
    pub svm: SvmConfig,
    #[serde(default = "default_alpha_scale")]
    pub alpha_scale: f64,
    #[serde(default)]
    pub assignment: Assignment,
}

fn default_pairs() -> usize {
    2000
}

fn default_alpha_scale() -> f64 {
    1.0
}

impl DefenseConfig {
    pub fn new(properties: Vec<PropertyDefense>) -> Self {
        Self {
            properties,
            pairs: default_pairs(),
            svm: SvmConfig::default(),
            alpha_scale: default_alpha_scale(),
            assignment: Assignment::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.properties.is_empty() {
            return Err(Error::config("no properties to defend"));
        }
        if !(self.alpha_scale.is_finite() && self.alpha_scale > 0.0) {
            return Err(Error::config("alpha_scale must be positive"));
        }
        let mut ids = BTreeSet::new();
        for p in &self.properties {
            if !ids.insert(&p.id) {
                return Err(Error::config(format!("property `{}` is defended twice", p.id)));
            }
            if p.classes.is_empty() {
                return Err(Error::config(format!("property `{}` has no predicates", p.id)));
            }
            if let Some(a) = p.alpha {
                if !a.is_finite() || a == 0.0 {
                    return Err(Error::config(format!("property `{}`: alpha must be finite and nonzero", p.id)));
                }
            }
            p.targets()?;
        }
        Ok(())
    }
}

impl PropertyDefense {
    pub fn binary(id: &str, predicate: PropertyPredicate) -> Self {
        Self {
            id: id.to_string(),
            classes: vec![predicate],
            gamma: None,
            alpha: None,
            step: None,
        }
    }

    pub fn one_vs_rest(id: &str, classes: Vec<PropertyPredicate>) -> Self {
        Self {
            id: id.to_string(),
            classes,
            gamma: None,
            alpha: None,
            step: None,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.classes.len() == 1
    }

    /// Target frequency of every option: `[positive, negative]` for a binary
    /// property, one per class otherwise.
    pub fn targets(&self) -> Result<Vec<f64>> {
        let bad = |msg: String| Err(Error::config(format!("property `{}`: {msg}", self.id)));
        if self.is_binary() {
            let g = match &self.gamma {
                None => self.classes[0].default_target(),
                Some(v) if v.len() == 1 => v[0],
                Some(v) => return bad(format!("binary property takes one target, got {}", v.len())),
            };
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("target {g} outside (0, 1)"));
            }
            return Ok(vec![g, 1.0 - g]);
        }
        let k = self.classes.len();
        if self.classes.iter().any(|c| c.arity != k) {
            return bad(format!("one-vs-rest family needs all {} classes of its attribute", self.classes[0].arity));
        }
        let g = match &self.gamma {
            None => vec![1.0 / k as f64; k],
            Some(v) if v.len() == k => v.clone(),
            Some(v) => return bad(format!("{} targets for {k} classes", v.len())),
        };
        if g.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return bad("targets must lie in (0, 1)".into());
        }
        if (g.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("one-vs-rest targets must sum to 1".into());
        }
        Ok(g)
    }
}

/// A property after phase I: its hyperplanes (one per predicate), step,
/// per-option targets and per-hyperplane shift magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedProperty {
    pub id: String,
    pub classes: Vec<PropertyPredicate>,
    pub step: usize,
    pub targets: Vec<f64>,
    pub alphas: Vec<f64>,
    pub hyperplanes: Vec<Hyperplane>,
}

impl FittedProperty {
    pub fn is_binary(&self) -> bool {
        self.classes.len() == 1
    }

    /// Unit direction and magnitude of the shift for one option.
    fn direction(&self, option: usize) -> (Vec<f64>, f64) {
        if self.is_binary() {
            let sign = if option == 0 { 1.0 } else { -1.0 };
            let h = self.hyperplanes[0].normal.iter().map(|v| sign * v).collect();
            (h, self.alphas[0].abs())
        } else {
            (self.hyperplanes[option].normal.clone(), self.alphas[option].abs())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedDefense {
    pub properties: Vec<FittedProperty>,
    pub assignment: Assignment,
}

impl FittedDefense {
    pub fn hyperplanes(&self) -> Vec<&Hyperplane> {
        self.properties.iter().flat_map(|p| &p.hyperplanes).collect()
    }
}

/// Phase I: record intermediate states, label them by the final samples,
/// and fit one hyperplane per predicate.
pub fn fit_defense(generator: &dyn Generator, config: &DefenseConfig, seed: u64) -> Result<FittedDefense> {
    config.validate()?;
    let default_step = generator.default_step()?;
    let mut by_step: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in config.properties.iter().enumerate() {
        by_step.entry(p.step.unwrap_or(default_step)).or_default().push(i);
    }
    let mut fitted: Vec<Option<FittedProperty>> = vec![None; config.properties.len()];
    for (&step, members) in &by_step {
        let predicates: Vec<&PropertyPredicate> = members
            .iter()
            .flat_map(|&i| config.properties[i].classes.iter())
            .collect();
        let paired = collect_paired_states(
            generator,
            config.pairs,
            step,
            &predicates,
            derive_seed(seed, &format!("phase-one-{step}")),
        )?;
        let mut next = 0;
        for &i in members {
            let p = &config.properties[i];
            let mut hyperplanes = Vec::with_capacity(p.classes.len());
            for c in &p.classes {
                let h = fit_hyperplane(
                    paired.states.view(),
                    &paired.labels[next],
                    &c.id,
                    step,
                    &config.svm,
                    derive_seed(seed, &format!("svm-{}-{}", p.id, c.id)),
                )?;
                hyperplanes.push(h);
                next += 1;
            }
            let alphas = hyperplanes
                .iter()
                .map(|h| p.alpha.unwrap_or(config.alpha_scale * h.diagnostics.reach))
                .collect();
            fitted[i] = Some(FittedProperty {
                id: p.id.clone(),
                classes: p.classes.clone(),
                step,
                targets: p.targets()?,
                alphas,
                hyperplanes,
            });
        }
    }
    Ok(FittedDefense {
        properties: fitted.into_iter().map(|p| p.expect("every property fitted")).collect(),
        assignment: config.assignment,
    })
}

/// Option index per property for every chain, as a flat cell index over the
/// product of the properties' options (first property varies fastest).
pub fn assign_cells(targets: &[Vec<f64>], m: usize, policy: Assignment, seed: u64) -> Vec<usize> {
    let sizes: Vec<usize> = targets.iter().map(Vec::len).collect();
    let cells: usize = sizes.iter().product();
    let weights: Vec<f64> = (0..cells)
        .map(|c| {
            let mut rest = c;
            let mut w = 1.0;
            for (t, &s) in targets.iter().zip(&sizes) {
                w *= t[rest % s];
                rest /= s;
            }
            w
        })
        .collect();
    let mut rng = RngStream::new(seed, 0);
    match policy {
        Assignment::Stratified => {
            let counts = apportion(&weights, m);
            let mut out: Vec<usize> = counts
                .iter()
                .enumerate()
                .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
                .collect();
            shuffle(&mut out, &mut rng);
            out
        }
        Assignment::Independent => (0..m)
            .map(|_| {
                let u = rng.uniform();
                let mut acc = 0.0;
                for (c, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return c;
                    }
                }
                cells - 1
            })
            .collect(),
    }
}

/// Option of property `i` within a flat cell index.
pub fn cell_option(targets: &[Vec<f64>], cell: usize, i: usize) -> usize {
    let mut rest = cell;
    for t in &targets[..i] {
        rest /= t.len();
    }
    rest % targets[i].len()
}

struct Guide {
    steps: BTreeSet<usize>,
    /// Per cell, the summed shift at each step.
    shifts: Vec<BTreeMap<usize, Vec<f64>>>,
    cells: Vec<usize>,
}

impl StepInterceptor for Guide {
    fn target_steps(&self) -> &BTreeSet<usize> {
        &self.steps
    }

    fn apply(&self, step: usize, chain: usize, x: &mut [f64]) {
        if let Some(delta) = self.shifts[self.cells[chain]].get(&step) {
            for (v, d) in x.iter_mut().zip(delta) {
                *v += d;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Guided {
    pub generated: Generated,
    /// Cell index per chain; see [`cell_option`].
    pub cells: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

impl Guided {
    /// Chains assigned to each option of property `i`.
    pub fn side_counts(&self, i: usize) -> Vec<usize> {
        let mut counts = vec![0; self.targets[i].len()];
        for &c in &self.cells {
            counts[cell_option(&self.targets, c, i)] += 1;
        }
        counts
    }
}

/// Phase II: assign every chain its target options up front, then shift
/// each chain's state along the matching hyperplane directions at each
/// property's step. Directions of later properties are orthogonalized
/// against those already applied to the same chain.
pub fn guided_sample(generator: &dyn Generator, defense: &FittedDefense, m: usize, seed: u64) -> Result<Guided> {
    if defense.properties.is_empty() {
        return Err(Error::config("no fitted properties"));
    }
    let d = generator.state_dim();
    let last = generator.last_step()?;
    for p in &defense.properties {
        let expected = if p.is_binary() { 1 } else { p.classes.len() };
        if p.hyperplanes.len() != expected || p.alphas.len() != expected {
            return Err(Error::config(format!("missing hyperplane for property `{}`", p.id)));
        }
        if p.step > last {
            return Err(Error::config(format!("property `{}` step {} is outside the grid", p.id, p.step)));
        }
        if let Some(h) = p.hyperplanes.iter().find(|h| h.dim() != d) {
            return Err(Error::config(format!(
                "hyperplane for `{}` has dimension {}, states have {d}",
                h.property,
                h.dim()
            )));
        }
    }
    let targets: Vec<Vec<f64>> = defense.properties.iter().map(|p| p.targets.clone()).collect();
    let cells = assign_cells(&targets, m, defense.assignment, derive_seed(seed, "sides"));
    let n_cells: usize = targets.iter().map(Vec::len).product();
    let mut shifts = Vec::with_capacity(n_cells);
    for cell in 0..n_cells {
        let mut applied: Vec<Vec<f64>> = Vec::new();
        let mut per_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (i, p) in defense.properties.iter().enumerate() {
            let (mut dir, alpha) = p.direction(cell_option(&targets, cell, i));
            for prev in &applied {
                dir = orthogonalize(prev, &dir)?;
            }
            let slot = per_step.entry(p.step).or_insert_with(|| vec![0.0; d]);
            for (s, v) in slot.iter_mut().zip(&dir) {
                *s += alpha * v;
            }
            applied.push(dir);
        }
        shifts.push(per_step);
    }
    let guide = Guide {
        steps: defense.properties.iter().map(|p| p.step).collect(),
        shifts,
        cells,
    };
    let generated = generator.generate(m, Some(&guide), seed)?;
    Ok(Guided {
        generated,
        cells: guide.cells,
        targets,
    })
}
