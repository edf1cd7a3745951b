use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Case;
use crate::rng::substream;
use crate::{Error, Result};

/// Case indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldSplit {
    /// Training and validation cases together, in index order.
    pub fn train_val(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        v.sort_unstable();
        v
    }
}

/// Largest-remainder apportionment of `total` over `weights`, ties to the
/// lower index.
fn apportion(counts: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let target = (fraction * n as f64).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| fraction * c as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(out.iter().sum());
    for i in order {
        if missing == 0 {
            break;
        }
        if out[i] < counts[i] {
            out[i] += 1;
            missing -= 1;
        }
    }
    out
}

/// Subtype-stratified k-fold split. Each subtype's cases are shuffled and
/// dealt round-robin over the k groups, continuing where the previous subtype
/// stopped so group sizes stay within one case of each other. Within each
/// fold, `val_fraction` of the remaining cases (stratified by subtype) form the
/// validation part.
pub fn stratified_kfold(cases: &[Case], k: usize, val_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let Some(n_classes) = cases.first().map(|c| c.subtype.k) else {
        return Err(Error::Stratification("no cases".into()));
    };
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, c) in cases.iter().enumerate() {
        by_class[c.subtype.class].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "subtype {class} has {} cases, need at least {k}",
                members.len()
            )));
        }
    }
    let mut rng = substream(seed, "folds");
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    // group[class][g] = members of that class assigned to group g, in
    // shuffled order.
    let mut groups: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); k]; n_classes];
    let mut offset = 0usize;
    for (class, members) in by_class.iter().enumerate() {
        for (j, &idx) in members.iter().enumerate() {
            groups[class][(offset + j) % k].push(idx);
        }
        offset = (offset + members.len()) % k;
    }

    let folds = (0..k)
        .map(|f| {
            let mut test = Vec::new();
            let mut rest_by_class = Vec::with_capacity(n_classes);
            for class_groups in &groups {
                test.extend_from_slice(&class_groups[f]);
                let rest: Vec<usize> = (1..k)
                    .flat_map(|s| class_groups[(f + s) % k].iter().copied())
                    .collect();
                rest_by_class.push(rest);
            }
            let counts: Vec<usize> = rest_by_class.iter().map(Vec::len).collect();
            let n_val = apportion(&counts, val_fraction);
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (rest, nv) in rest_by_class.iter().zip(n_val) {
                val.extend_from_slice(&rest[..nv]);
                train.extend_from_slice(&rest[nv..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            test.sort_unstable();
            FoldSplit { train, val, test }
        })
        .collect();
    Ok(folds)
}
