//! Session splitting: a large base session followed by N-way K-shot
//! incremental sessions over disjoint class sets.

use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Scalar;

/// One session's classes, support set and query set. The support set holds
/// every train sample of the base classes for session 0 and `way x shot`
/// samples afterwards; queries are always the classes' full test sets.
#[derive(Debug, Clone)]
pub struct SessionSpec<T> {
    pub index: usize,
    pub class_ids: Vec<usize>,
    pub support: LabeledImageSet<T>,
    pub query: LabeledImageSet<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub base_classes: usize,
    pub way: usize,
    pub shot: usize,
    pub sessions: usize,
    pub class_order: Vec<usize>,
    pub sample_seed: u64,
}

impl SplitPlan {
    /// Seeded shuffle of `0..num_classes` for the class order.
    pub fn with_shuffled_order(
        base_classes: usize,
        way: usize,
        shot: usize,
        sessions: usize,
        num_classes: usize,
        seed: u64,
    ) -> SplitPlan {
        let mut order: Vec<usize> = (0..num_classes).collect();
        let mut r = rng::stream(seed, "split-order", 0);
        order.shuffle(&mut r);
        SplitPlan { base_classes, way, shot, sessions, class_order: order, sample_seed: seed }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.way == 0 {
            return Err(Error::arg("split: way must be >= 1"));
        }
        if self.shot == 0 {
            return Err(Error::arg("split: shot must be >= 1"));
        }
        if self.base_classes == 0 {
            return Err(Error::arg("split: base_classes must be >= 1"));
        }
        let needed = self.base_classes + self.way * self.sessions;
        if needed > num_classes {
            return Err(Error::arg(format!(
                "split: base_classes + way * sessions = {} exceeds the {} dataset classes",
                needed, num_classes
            )));
        }
        if self.class_order.len() != num_classes {
            return Err(Error::arg(format!(
                "split: class order lists {} classes, dataset has {}",
                self.class_order.len(),
                num_classes
            )));
        }
        let mut seen = vec![false; num_classes];
        for &c in &self.class_order {
            if c >= num_classes || seen[c] {
                return Err(Error::arg(format!("split: class order is not a permutation (class {c})")));
            }
            seen[c] = true;
        }
        Ok(())
    }
}

/// Partition train/test data into `sessions + 1` disjoint session specs.
pub fn split_sessions<T: Scalar>(
    train: &LabeledImageSet<T>,
    test: &LabeledImageSet<T>,
    plan: &SplitPlan,
) -> Result<Vec<SessionSpec<T>>> {
    let num_classes = train.num_classes();
    plan.validate(num_classes)?;

    let mut specs = Vec::with_capacity(plan.sessions + 1);
    let base: Vec<usize> = plan.class_order[..plan.base_classes].to_vec();
    specs.push(SessionSpec {
        index: 0,
        class_ids: base.clone(),
        support: gather_classes(train, &base, None, 0, plan.sample_seed)?,
        query: gather_classes(test, &base, None, 0, plan.sample_seed)?,
    });
    for t in 1..=plan.sessions {
        let start = plan.base_classes + (t - 1) * plan.way;
        let classes: Vec<usize> = plan.class_order[start..start + plan.way].to_vec();
        specs.push(SessionSpec {
            index: t,
            class_ids: classes.clone(),
            support: gather_classes(train, &classes, Some(plan.shot), t, plan.sample_seed)?,
            query: gather_classes(test, &classes, None, t, plan.sample_seed)?,
        });
    }
    Ok(specs)
}

fn gather_classes<T: Scalar>(
    set: &LabeledImageSet<T>,
    classes: &[usize],
    shot: Option<usize>,
    session: usize,
    seed: u64,
) -> Result<LabeledImageSet<T>> {
    let mut indices = Vec::new();
    for &c in classes {
        let mut of_class = set.indices_of_class(c);
        if let Some(shot) = shot {
            if of_class.len() < shot {
                return Err(Error::arg(format!(
                    "split: class {} has {} train samples, need {} shots",
                    c,
                    of_class.len(),
                    shot
                )));
            }
            let mut r = rng::stream(seed, "split-shots", (session * 1000 + c) as u64);
            let mut picked = Vec::with_capacity(shot);
            for _ in 0..shot {
                let at = r.random_range(0..of_class.len());
                picked.push(of_class.remove(at));
            }
            indices.extend(picked);
        } else {
            indices.extend(of_class);
        }
    }
    Ok(set.subset(&indices))
}

/// Materialise a split as text: `sessions + 1` lines of class ids, then
/// `sessions + 1` lines of train-sample indices for each support set.
pub fn emit_split_file<T: Scalar>(specs: &[SessionSpec<T>], train: &LabeledImageSet<T>) -> String {
    // Recover each support sample's index in the train set by first-match
    // bookkeeping over (label, occurrence).
    let mut out = String::new();
    for spec in specs {
        let ids: Vec<String> = spec.class_ids.iter().map(|c| c.to_string()).collect();
        out.push_str(&ids.join(" "));
        out.push('\n');
    }
    for spec in specs {
        let mut used = vec![false; train.len()];
        let mut line = Vec::with_capacity(spec.support.len());
        for i in 0..spec.support.len() {
            let img = spec.support.image(i);
            let label = spec.support.label(i);
            let idx = (0..train.len())
                .find(|&j| !used[j] && train.label(j) == label && train.image(j) == img)
                .expect("support sample originates from the train set");
            used[idx] = true;
            line.push(idx.to_string());
        }
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Build sessions from an explicit split file (exact class order and
/// support indices).
pub fn split_sessions_from_file<T: Scalar>(
    train: &LabeledImageSet<T>,
    test: &LabeledImageSet<T>,
    path: &Path,
) -> Result<Vec<SessionSpec<T>>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if !lines.len().is_multiple_of(2) {
        return Err(Error::Format(format!(
            "split file: expected paired class/index line blocks, got {} lines",
            lines.len()
        )));
    }
    let sessions = lines.len() / 2;
    let parse_line = |line: &str, what: &str| -> Result<Vec<usize>> {
        line.split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Format(format!("split file: bad {what} `{tok}`")))
            })
            .collect()
    };
    let mut specs = Vec::with_capacity(sessions);
    let mut seen = std::collections::BTreeSet::new();
    for s in 0..sessions {
        let class_ids = parse_line(lines[s], "class id")?;
        for &c in &class_ids {
            if !seen.insert(c) {
                return Err(Error::Format(format!("split file: class {c} appears in two sessions")));
            }
        }
        let support_idx = parse_line(lines[sessions + s], "sample index")?;
        for &i in &support_idx {
            if i >= train.len() {
                return Err(Error::Format(format!("split file: sample index {i} out of range")));
            }
            if !class_ids.contains(&train.label(i)) {
                return Err(Error::Format(format!(
                    "split file: sample {i} has label {} outside session {s}",
                    train.label(i)
                )));
            }
        }
        let mut query_idx = Vec::new();
        for &c in &class_ids {
            query_idx.extend(test.indices_of_class(c));
        }
        specs.push(SessionSpec {
            index: s,
            class_ids,
            support: train.subset(&support_idx),
            query: test.subset(&query_idx),
        });
    }
    Ok(specs)
}
