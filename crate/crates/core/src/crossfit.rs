//! Fold partitions and the nested exclusion-set cache of first- and
//! second-step fits.
//!
//! An entry keyed by `{ℓ}`, `{ℓ, ℓ'}` or `{ℓ, ℓ', ℓ''}` holds `ĝ`, `ĥ` and the
//! plug-in `θ̃` trained only on rows outside those folds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Mode};
use crate::dictionary::{Dictionary, InputKind};
use crate::error::{Error, Result};
use crate::functionals::{row_views, MomentFunctional, StepOverrides, Steps};
use crate::learners::{fit_learner, FittedLearner, LearnerSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    folds: usize,
    assignment: Vec<usize>,
    seed: u64,
}

impl FoldPartition {
    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.assignment[row]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Balanced random partition of `0..n` into `folds` groups.
pub fn make_partition(n: usize, folds: usize, seed: u64) -> Result<FoldPartition> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(Error::Config(format!("{folds} folds requested for {n} observations")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::purpose::PARTITION, n as u64));
    let mut assignment = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        assignment[row] = pos % folds;
    }
    Ok(FoldPartition {
        folds,
        assignment,
        seed,
    })
}

/// A sorted set of one to three excluded folds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExclusionKey(Vec<usize>);

impl ExclusionKey {
    pub fn new(folds: &[usize]) -> Result<Self> {
        let mut v = folds.to_vec();
        v.sort_unstable();
        v.dedup();
        if v.len() != folds.len() || v.is_empty() || v.len() > 3 {
            return Err(Error::Config(format!("invalid exclusion key {folds:?}")));
        }
        Ok(Self(v))
    }

    pub fn single(fold: usize) -> Self {
        Self(vec![fold])
    }

    pub fn folds(&self) -> &[usize] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, fold: usize) -> bool {
        self.0.contains(&fold)
    }

    /// This key with `fold` added.
    pub fn with(&self, fold: usize) -> Result<Self> {
        let mut v = self.0.clone();
        v.push(fold);
        Self::new(&v)
    }

    /// Every key of exactly `depth` folds drawn from `0..folds`.
    pub fn all(folds: usize, depth: usize) -> Vec<Self> {
        fn rec(start: usize, folds: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<ExclusionKey>) {
            if left == 0 {
                out.push(ExclusionKey(cur.clone()));
                return;
            }
            for f in start..folds {
                cur.push(f);
                rec(f + 1, folds, left - 1, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(0, folds, depth, &mut Vec::new(), &mut out);
        out
    }
}

impl fmt::Display for ExclusionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|k| k.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Rows whose fold is not in `key`, in dataset order.
pub fn complement_rows(partition: &FoldPartition, key: &ExclusionKey) -> Result<Vec<usize>> {
    if let Some(&bad) = key.folds().iter().find(|&&f| f >= partition.folds()) {
        return Err(Error::Config(format!("fold {bad} out of range for L = {}", partition.folds())));
    }
    let rows: Vec<usize> = (0..partition.len())
        .filter(|&i| !key.contains(partition.fold_of(i)))
        .collect();
    if rows.is_empty() {
        return Err(Error::UndersizedComplement {
            key: key.to_string(),
            rows: 0,
            required: 1,
        });
    }
    Ok(rows)
}

/// Learner specifications for the two nuisance steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpecs {
    pub g: LearnerSpec,
    pub h: LearnerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: ExclusionKey,
    pub g: FittedLearner,
    pub h: FittedLearner,
    pub theta_tilde: f64,
    /// Standard deviation of `V̂` over the training rows.
    pub sigma_v: f64,
    pub n_train: usize,
    pub steps: Steps,
}

#[derive(Debug, Clone, Default)]
pub struct EstimatorCache {
    entries: BTreeMap<ExclusionKey, CacheEntry>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    digest: String,
    entries: Vec<CacheEntry>,
}

impl EstimatorCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_at_depth(&self, depth: usize) -> usize {
        self.entries.keys().filter(|k| k.depth() == depth).count()
    }

    pub fn get(&self, key: &ExclusionKey) -> Result<&CacheEntry> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::Config(format!("no cached estimator for key {key}")))
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    /// Checks that no entry was trained on a row of its excluded folds and that
    /// each entry saw its whole complement. Returns the number of
    /// `(key, excluded row)` pairs inspected.
    pub fn audit_leakage(&self, partition: &FoldPartition) -> Result<usize> {
        let mut checked = 0;
        for entry in self.entries.values() {
            let complement = complement_rows(partition, &entry.key)?;
            for fit in [&entry.g, &entry.h] {
                if fit.fingerprint.rows() != complement.as_slice() {
                    return Err(Error::Numerical(format!(
                        "training rows of key {} differ from its complement",
                        entry.key
                    )));
                }
            }
            for row in (0..partition.len()).filter(|&i| entry.key.contains(partition.fold_of(i))) {
                if entry.g.fingerprint.contains(row) || entry.h.fingerprint.contains(row) {
                    return Err(Error::Numerical(format!("row {row} leaked into key {}", entry.key)));
                }
                checked += 1;
            }
        }
        Ok(checked)
    }

    pub fn save(&self, path: impl AsRef<Path>, digest: &str) -> Result<()> {
        let file = CacheFile {
            digest: digest.to_string(),
            entries: self.entries.values().cloned().collect(),
        };
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    /// Loads a dump if it exists and matches `digest`.
    pub fn load(path: impl AsRef<Path>, digest: &str) -> Result<Option<Self>> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(None);
        }
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: CacheFile = serde_json::from_reader(r)?;
        if file.digest != digest {
            log::info!("ignoring cache dump {} with stale digest", path.display());
            return Ok(None);
        }
        let entries = file.entries.into_iter().map(|e| (e.key.clone(), e)).collect();
        Ok(Some(Self { entries }))
    }
}

/// SHA-256 over the given byte strings, hex encoded.
pub fn content_digest(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn key_code(key: &ExclusionKey) -> u64 {
    key.folds().iter().fold(0u64, |acc, &f| acc * 64 + f as u64 + 1)
}

fn min_complement(dataset: &Dataset, specs: &NuisanceSpecs) -> Result<usize> {
    let jg = Dictionary::new(specs.g.dictionary.clone(), InputKind::OverZ, dataset.p())?.len();
    let jh = Dictionary::new(specs.h.dictionary.clone(), InputKind::OverXv, dataset.x_dim() + 1)?.len();
    Ok(10.max(2 * jg.max(jh)))
}

pub(crate) fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Trains the nuisances for one exclusion key.
pub fn fit_entry(
    dataset: &Dataset,
    partition: &FoldPartition,
    key: &ExclusionKey,
    specs: &NuisanceSpecs,
    functional: &dyn MomentFunctional,
    steps: StepOverrides,
    seed: u64,
) -> Result<CacheEntry> {
    let rows = complement_rows(partition, key)?;
    let required = min_complement(dataset, specs)?;
    if rows.len() < required {
        return Err(Error::UndersizedComplement {
            key: key.to_string(),
            rows: rows.len(),
            required,
        });
    }
    let key_seed = rng::derive(seed, &[key_code(key)]);
    let z: Vec<Vec<f64>> = rows.iter().map(|&i| dataset.obs(i).z.clone()).collect();
    let d: Vec<f64> = rows.iter().map(|&i| dataset.obs(i).d).collect();
    let mut g = fit_learner(&specs.g, InputKind::OverZ, &z, &d, &rows, rng::derive(key_seed, &[1]))
        .map_err(|e| e.at_stage("first step", key))?;
    if dataset.mode() == Mode::Selection {
        // ĝ is a propensity.
        g = g.with_output_range(0.0, 1.0);
    }
    let views = row_views(dataset, &rows, &g, functional.generated())?;
    let inputs: Vec<Vec<f64>> = views.iter().map(|r| r.xv.clone()).collect();
    let y: Vec<f64> = views.iter().map(|r| r.y).collect();
    let h = fit_learner(&specs.h, InputKind::OverXv, &inputs, &y, &rows, rng::derive(key_seed, &[2]))
        .map_err(|e| e.at_stage("second step", key))?;
    let sigma_v = sample_sd(views.iter().map(|r| r.v()));
    let steps = steps.apply(Steps::from_training(sigma_v, rows.len()));
    let lin = functional.linear_parts(&h, &views, steps);
    let theta_tilde = lin.iter().sum::<f64>() / lin.len() as f64;
    Ok(CacheEntry {
        key: key.clone(),
        g,
        h,
        theta_tilde,
        sigma_v,
        n_train: rows.len(),
        steps,
    })
}

/// Builds every entry with up to `depth` excluded folds.
pub fn populate_cache(
    dataset: &Dataset,
    partition: &FoldPartition,
    specs: &NuisanceSpecs,
    functional: &dyn MomentFunctional,
    depth: usize,
    steps: StepOverrides,
    seed: u64,
) -> Result<EstimatorCache> {
    if !(1..=3).contains(&depth) {
        return Err(Error::Config(format!("nesting depth must be 1, 2 or 3, got {depth}")));
    }
    if partition.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            got: partition.len(),
        });
    }
    let keys: Vec<ExclusionKey> = (1..=depth)
        .flat_map(|k| ExclusionKey::all(partition.folds(), k))
        .collect();
    if depth >= partition.folds() {
        return Err(Error::UndersizedComplement {
            key: ExclusionKey((0..partition.folds()).collect()).to_string(),
            rows: 0,
            required: 1,
        });
    }
    let entries = keys
        .par_iter()
        .map(|key| fit_entry(dataset, partition, key, specs, functional, steps, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimatorCache {
        entries: entries.into_iter().map(|e| (e.key.clone(), e)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        let p = make_partition(10, 5, 3).unwrap();
        assert_eq!(p.fold_sizes(), vec![2; 5]);
        let mut sizes = make_partition(7, 3, 3).unwrap().fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3]);
        assert_eq!(make_partition(50, 5, 9).unwrap(), make_partition(50, 5, 9).unwrap());
        assert_ne!(make_partition(50, 5, 9).unwrap(), make_partition(50, 5, 10).unwrap());
        assert!(make_partition(3, 5, 0).is_err());
        assert!(make_partition(3, 1, 0).is_err());
    }

    #[test]
    fn complement_examples() {
        let p = make_partition(9, 3, 1).unwrap();
        let k0 = ExclusionKey::single(0);
        let rows = complement_rows(&p, &k0).unwrap();
        assert!(rows.iter().all(|&r| p.fold_of(r) != 0));
        assert_eq!(rows.len(), 6);
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
        let k01 = ExclusionKey::new(&[1, 0]).unwrap();
        assert_eq!(complement_rows(&p, &k01).unwrap(), p.fold_rows(2));
        let all = ExclusionKey::new(&[0, 1, 2]).unwrap();
        assert!(complement_rows(&p, &all).is_err());
    }

    #[test]
    fn key_enumeration() {
        assert_eq!(ExclusionKey::all(5, 1).len(), 5);
        assert_eq!(ExclusionKey::all(5, 2).len(), 10);
        assert_eq!(ExclusionKey::all(5, 3).len(), 10);
        assert!(ExclusionKey::new(&[1, 1]).is_err());
        assert_eq!(ExclusionKey::new(&[2, 0]).unwrap().to_string(), "{0,2}");
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = content_digest(&[b"abc", b"d"]);
        assert_eq!(a.len(), 64);
        assert_eq!(a, content_digest(&[b"abc", b"d"]));
        assert_ne!(a, content_digest(&[b"ab", b"cd"]));
    }
}
