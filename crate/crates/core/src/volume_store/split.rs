use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_atomic, Region};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub val_fraction: f64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl SplitManifest {
    pub fn len(&self) -> usize {
        self.train_ids.len() + self.val_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the partition invariants.
    pub fn validate(&self) -> Result<()> {
        check_fraction(self.val_fraction)?;
        let mut seen = BTreeSet::new();
        for id in self.train_ids.iter().chain(&self.val_ids) {
            if !seen.insert(id) {
                return Err(Error::Split(format!("case {id} listed twice in manifest")));
            }
        }
        if self.val_ids.len() != val_count(self.len(), self.val_fraction) {
            return Err(Error::Split(format!(
                "manifest holds {} validation ids, expected round({} * {})",
                self.val_ids.len(),
                self.val_fraction,
                self.len()
            )));
        }
        Ok(())
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Split(format!(
            "validation fraction {f} outside (0, 1)"
        )))
    }
}

fn val_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

fn sorted_unique(ids: &[String]) -> Result<Vec<String>> {
    let mut sorted = ids.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Split(format!("duplicate case id {}", w[0])));
    }
    Ok(sorted)
}

/// Uniform random split. Ids are sorted before shuffling, so the result
/// depends only on the id set, the fraction and the seed.
pub fn make_split(case_ids: &[String], val_fraction: f64, seed: u64) -> Result<SplitManifest> {
    check_fraction(val_fraction)?;
    if case_ids.is_empty() {
        return Err(Error::Split("no cases to split".into()));
    }
    let mut ids = sorted_unique(case_ids)?;
    let n_val = val_count(ids.len(), val_fraction);
    if n_val == 0 || n_val == ids.len() {
        return Err(Error::Split(format!(
            "degenerate split: {} cases at fraction {val_fraction} give {n_val} validation cases",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_ids = ids.split_off(ids.len() - n_val);
    ids.sort();
    val_ids.sort();
    Ok(SplitManifest {
        seed,
        val_fraction,
        train_ids: ids,
        val_ids,
    })
}

/// Split that keeps region proportions. The validation total still equals
/// `round(fraction * n)`; per-region quotas use largest remainders.
pub fn make_stratified_split(
    cases: &[(String, Region)],
    val_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    check_fraction(val_fraction)?;
    let ids: Vec<String> = cases.iter().map(|(id, _)| id.clone()).collect();
    sorted_unique(&ids)?;
    let n_val = val_count(cases.len(), val_fraction);
    if n_val == 0 || n_val == cases.len() {
        return Err(Error::Split(format!(
            "degenerate split: {} cases at fraction {val_fraction} give {n_val} validation cases",
            cases.len()
        )));
    }
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, region) in cases {
        groups
            .entry(format!("{region:?}"))
            .or_default()
            .push(id.clone());
    }
    let exact: Vec<f64> = groups
        .values()
        .map(|g| g.len() as f64 * val_fraction)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n_val - quota.iter().sum::<usize>();
    for &g in order.iter().take(missing) {
        quota[g] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_ids, mut val_ids) = (Vec::new(), Vec::new());
    for (group, q) in groups.into_values().zip(quota) {
        let mut group = group;
        group.sort();
        group.shuffle(&mut rng);
        val_ids.extend(group.split_off(group.len() - q));
        train_ids.extend(group);
    }
    train_ids.sort();
    val_ids.sort();
    Ok(SplitManifest {
        seed,
        val_fraction,
        train_ids,
        val_ids,
    })
}

pub fn write_manifest(manifest: &SplitManifest, path: impl AsRef<Path>) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::Split(e.to_string()))?;
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SplitManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: SplitManifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    manifest.validate()?;
    Ok(manifest)
}
