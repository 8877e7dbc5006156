use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LanguageId;
use crate::{Error, Result};

const COEFF_TOLERANCE: f64 = 1e-6;
const EXPOSURE_TOLERANCE: f64 = 0.01;

/// Which encoders feed a mini-batch and which decoders it trains.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPath")]
pub struct TrainingPath {
    sources: Vec<LanguageId>,
    targets: Vec<LanguageId>,
}

#[derive(Deserialize)]
struct RawPath {
    sources: Vec<LanguageId>,
    targets: Vec<LanguageId>,
    #[serde(default)]
    autoencode: bool,
}

impl TryFrom<RawPath> for TrainingPath {
    type Error = Error;
    fn try_from(r: RawPath) -> Result<Self> {
        TrainingPath::with_options(r.sources, r.targets, r.autoencode)
    }
}

impl TrainingPath {
    /// A path with disjoint sources and targets.
    pub fn new(sources: Vec<LanguageId>, targets: Vec<LanguageId>) -> Result<Self> {
        Self::with_options(sources, targets, false)
    }

    pub fn with_options(sources: Vec<LanguageId>, targets: Vec<LanguageId>, autoencode: bool) -> Result<Self> {
        if sources.is_empty() || targets.is_empty() {
            return Err(Error::InvalidSchedule("a path needs at least one source and one target".into()));
        }
        let s: BTreeSet<_> = sources.iter().collect();
        let t: BTreeSet<_> = targets.iter().collect();
        if s.len() != sources.len() || t.len() != targets.len() {
            return Err(Error::InvalidSchedule("duplicate language within a path".into()));
        }
        if !autoencode && s.intersection(&t).next().is_some() {
            return Err(Error::InvalidSchedule(format!(
                "path {} decodes into one of its sources",
                display(&sources, &targets)
            )));
        }
        Ok(TrainingPath { sources, targets })
    }

    pub fn sources(&self) -> &[LanguageId] {
        &self.sources
    }

    pub fn targets(&self) -> &[LanguageId] {
        &self.targets
    }

    pub fn arity(&self) -> usize {
        self.sources.len()
    }

    /// `p` into every other language of `languages`.
    pub fn one_to_rest(p: &LanguageId, languages: &[LanguageId]) -> Result<Self> {
        let targets = languages.iter().filter(|&l| l != p).cloned().collect();
        Self::new(vec![p.clone()], targets)
    }
}

fn display(sources: &[LanguageId], targets: &[LanguageId]) -> String {
    let join = |v: &[LanguageId]| v.iter().map(|l| l.as_str()).collect::<Vec<_>>().join("+");
    format!("{}->{}", join(sources), join(targets))
}

impl fmt::Display for TrainingPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&display(&self.sources, &self.targets))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(TrainingPath, f64)>", into = "Vec<(TrainingPath, f64)>")]
pub struct PathSchedule {
    entries: Vec<(TrainingPath, f64)>,
}

impl TryFrom<Vec<(TrainingPath, f64)>> for PathSchedule {
    type Error = Error;
    fn try_from(v: Vec<(TrainingPath, f64)>) -> Result<Self> {
        PathSchedule::new(v)
    }
}

impl From<PathSchedule> for Vec<(TrainingPath, f64)> {
    fn from(s: PathSchedule) -> Self {
        s.entries
    }
}

impl PathSchedule {
    /// Coefficients must be positive and sum to 1.
    pub fn new(entries: Vec<(TrainingPath, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidSchedule("empty schedule".into()));
        }
        if let Some((p, c)) = entries.iter().find(|(_, c)| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidSchedule(format!("path {p} has coefficient {c}")));
        }
        let total: f64 = entries.iter().map(|(_, c)| c).sum();
        if (total - 1.0).abs() > COEFF_TOLERANCE {
            return Err(Error::InvalidSchedule(format!("coefficients sum to {total}, not 1")));
        }
        Ok(PathSchedule { entries })
    }

    pub fn entries(&self) -> &[(TrainingPath, f64)] {
        &self.entries
    }

    /// One `p -> all others` path per language, equally weighted.
    pub fn one_to_n(languages: &[LanguageId]) -> Result<Self> {
        let c = 1.0 / languages.len() as f64;
        Self::new(
            languages
                .iter()
                .map(|p| Ok((TrainingPath::one_to_rest(p, languages)?, c)))
                .collect::<Result<_>>()?,
        )
    }

    /// Every `M`-subset of `sources` decoding into the common `target`.
    ///
    /// `arity_coefficients` holds `(M, c_M)` pairs as tabulated per arity: an
    /// `M:1` batch presents `M` sentences to encoders, so the batch fraction
    /// of arity `M` is `M · c_M`, split evenly over its subsets. Fractions
    /// are renormalized to sum to 1.
    pub fn common_target(sources: &[LanguageId], target: &LanguageId, arity_coefficients: &[(usize, f64)]) -> Result<Self> {
        let mut entries = Vec::new();
        let mut total = 0.0;
        for &(m, c) in arity_coefficients {
            if m == 0 || m > sources.len() {
                return Err(Error::InvalidSchedule(format!("arity {m} with {} sources", sources.len())));
            }
            let subsets = subsets_of_size(sources, m);
            let share = m as f64 * c / subsets.len() as f64;
            for s in subsets {
                entries.push((TrainingPath::new(s, vec![target.clone()])?, share));
                total += share;
            }
        }
        if !(total > 0.0) {
            return Err(Error::InvalidSchedule("all arity coefficients are zero".into()));
        }
        for e in &mut entries {
            e.1 /= total;
        }
        Self::new(entries)
    }

    /// Languages appearing in any source set.
    pub fn source_languages(&self) -> BTreeSet<LanguageId> {
        self.entries.iter().flat_map(|(p, _)| p.sources.iter().cloned()).collect()
    }

    /// Languages appearing in any target set.
    pub fn target_languages(&self) -> BTreeSet<LanguageId> {
        self.entries.iter().flat_map(|(p, _)| p.targets.iter().cloned()).collect()
    }
}

fn subsets_of_size(items: &[LanguageId], m: usize) -> Vec<Vec<LanguageId>> {
    let n = items.len();
    (0u64..1 << n)
        .filter(|mask| mask.count_ones() as usize == m)
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| items[i].clone()).collect())
        .collect()
}

/// Draws a path with probability equal to its coefficient.
pub fn sample_path<'a, R: Rng>(schedule: &'a PathSchedule, rng: &mut R) -> &'a TrainingPath {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (p, c) in &schedule.entries {
        acc += c;
        if u < acc {
            return p;
        }
    }
    &schedule.entries.last().expect("schedule is nonempty").0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExposureReport {
    /// Expected sentence presentations per mini-batch, per encoder.
    pub exposure: Vec<(LanguageId, f64)>,
    /// Fraction of mini-batches by source arity.
    pub batch_fraction: BTreeMap<usize, f64>,
    /// `batch_fraction / M`, the per-arity coefficient in tabulated form.
    pub arity_coefficient: BTreeMap<usize, f64>,
    /// All encoders within 1% of each other.
    pub balanced: bool,
}

impl ExposureReport {
    pub fn exposure_of(&self, lang: &LanguageId) -> Option<f64> {
        self.exposure.iter().find(|(l, _)| l == lang).map(|&(_, e)| e)
    }

    /// Exposures rescaled to sum to 1.
    pub fn normalized(&self) -> Vec<(LanguageId, f64)> {
        let total: f64 = self.exposure.iter().map(|(_, e)| e).sum();
        self.exposure.iter().map(|(l, e)| (l.clone(), e / total)).collect()
    }
}

impl fmt::Display for ExposureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, e) in &self.exposure {
            writeln!(f, "encoder {l}\t{e:.4}")?;
        }
        for (m, frac) in &self.batch_fraction {
            writeln!(f, "{m}:N batches\t{:.4}\tcoefficient {:.4}", frac, self.arity_coefficient[m])?;
        }
        Ok(())
    }
}

/// Checks that every language in `encoders` is a source somewhere and
/// reports how often each encoder sees a sentence.
pub fn validate_schedule(schedule: &PathSchedule, encoders: &[LanguageId]) -> Result<ExposureReport> {
    let sources = schedule.source_languages();
    for l in encoders {
        if !sources.contains(l) {
            return Err(Error::InvalidSchedule(format!(
                "language {l} never appears as a source; no embedding would be learned for it"
            )));
        }
    }
    let mut exposure: Vec<(LanguageId, f64)> = encoders.iter().map(|l| (l.clone(), 0.0)).collect();
    for l in &sources {
        if !encoders.contains(l) {
            exposure.push((l.clone(), 0.0));
        }
    }
    let mut batch_fraction = BTreeMap::new();
    for (path, c) in &schedule.entries {
        for s in &path.sources {
            if let Some(e) = exposure.iter_mut().find(|(l, _)| l == s) {
                e.1 += c;
            }
        }
        *batch_fraction.entry(path.arity()).or_insert(0.0) += c;
    }
    let arity_coefficient = batch_fraction.iter().map(|(&m, &f)| (m, f / m as f64)).collect();
    let lo = exposure.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let hi = exposure.iter().map(|e| e.1).fold(0.0, f64::max);
    let balanced = hi - lo <= EXPOSURE_TOLERANCE * hi;
    if !balanced {
        log::warn!("unequal encoder exposure: min {lo:.4}, max {hi:.4}");
    }
    Ok(ExposureReport {
        exposure,
        batch_fraction,
        arity_coefficient,
        balanced,
    })
}
