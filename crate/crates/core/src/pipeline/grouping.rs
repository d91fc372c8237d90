//! Evaluation across datasets whose class definitions differ: classes of the
//! model and of the ground truth are merged into shared groups.

use std::fmt::Write as _;

use super::PipelineError;
use crate::convnet::argmax as network_argmax;

/// Correspondence between the 9 rectal-cancer classes a model is trained on
/// and the 8 colorectal-cancer classes of the public test data.
pub const RC_TO_CRC: &str = "\
# group = model classes -> ground-truth classes
tumor = tumor -> tumor_epithelium
stroma_muscle = stroma, muscle -> simple_stroma, complex_stroma
immune = lymphocytes -> immune_cells
debris_mucus = necrosis, blood, mucus -> debris_mucus
glands = healthy_epithelium -> mucosal_glands
adipose = fatty_tissue -> adipose_tissue
unmatched_truth = background
";

/// Class names of the rectal-cancer model, in class-index order.
pub const RC_CLASSES: [&str; 9] = [
    "tumor",
    "stroma",
    "muscle",
    "lymphocytes",
    "necrosis",
    "blood",
    "mucus",
    "healthy_epithelium",
    "fatty_tissue",
];

/// Class names of the colorectal-cancer data, in class-index order.
pub const CRC_CLASSES: [&str; 8] = [
    "tumor_epithelium",
    "simple_stroma",
    "complex_stroma",
    "immune_cells",
    "debris_mucus",
    "mucosal_glands",
    "adipose_tissue",
    "background",
];

/// One grouped class and its members on both sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassGroup {
    pub name: String,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

/// Groups indexed by position; classes without a counterpart are listed
/// explicitly as unmatched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMapping {
    groups: Vec<ClassGroup>,
    unmatched_predicted: Vec<usize>,
    unmatched_truth: Vec<usize>,
    num_predicted: usize,
    num_truth: usize,
}

fn check_side(name: &str, members: impl Iterator<Item = usize>, count: usize) -> Result<(), PipelineError> {
    let mut seen = vec![false; count];
    for c in members {
        if c >= count {
            return Err(PipelineError::InvalidMapping(format!(
                "{name} class {c} out of range (0..{count})"
            )));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(PipelineError::InvalidMapping(format!(
                "{name} class {c} appears more than once"
            )));
        }
    }
    Ok(())
}

impl ClassMapping {
    pub fn new(
        groups: Vec<ClassGroup>,
        unmatched_predicted: Vec<usize>,
        unmatched_truth: Vec<usize>,
        num_predicted: usize,
        num_truth: usize,
    ) -> Result<Self, PipelineError> {
        if groups.is_empty() {
            return Err(PipelineError::InvalidMapping("no groups".into()));
        }
        if let Some(g) = groups.iter().find(|g| g.predicted.is_empty() || g.truth.is_empty()) {
            return Err(PipelineError::InvalidMapping(format!(
                "group {} needs members on both sides",
                g.name
            )));
        }
        let predicted = groups.iter().flat_map(|g| g.predicted.iter().copied());
        check_side(
            "predicted",
            predicted.chain(unmatched_predicted.iter().copied()),
            num_predicted,
        )?;
        let truth = groups.iter().flat_map(|g| g.truth.iter().copied());
        check_side("ground-truth", truth.chain(unmatched_truth.iter().copied()), num_truth)?;
        Ok(Self {
            groups,
            unmatched_predicted,
            unmatched_truth,
            num_predicted,
            num_truth,
        })
    }

    /// Every class maps to itself.
    pub fn identity(num_classes: usize) -> Self {
        let groups = (0..num_classes)
            .map(|c| ClassGroup {
                name: c.to_string(),
                predicted: vec![c],
                truth: vec![c],
            })
            .collect();
        Self::new(groups, vec![], vec![], num_classes, num_classes).expect("identity mapping is valid")
    }

    /// The rectal-cancer to colorectal-cancer preset resolved against the
    /// given class names.
    pub fn rc_to_crc(predicted_names: &[String], truth_names: &[String]) -> Result<Self, PipelineError> {
        Self::parse(RC_TO_CRC, predicted_names, truth_names)
    }

    pub fn groups(&self) -> &[ClassGroup] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    pub fn unmatched_predicted(&self) -> &[usize] {
        &self.unmatched_predicted
    }

    pub fn unmatched_truth(&self) -> &[usize] {
        &self.unmatched_truth
    }

    fn truth_group(&self, class: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.truth.contains(&class))
    }

    /// Parses the text format of [`RC_TO_CRC`]: `group = a, b -> x, y` lines
    /// plus optional `unmatched_predicted` / `unmatched_truth` lists. Classes
    /// are given by name or by index.
    pub fn parse(text: &str, predicted_names: &[String], truth_names: &[String]) -> Result<Self, PipelineError> {
        let resolve = |line: usize, list: &str, names: &[String]| -> Result<Vec<usize>, PipelineError> {
            list.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|item| {
                    names
                        .iter()
                        .position(|n| n == item)
                        .or_else(|| item.parse::<usize>().ok().filter(|&i| i < names.len()))
                        .ok_or_else(|| PipelineError::MappingFormat {
                            line,
                            reason: format!("unknown class {item:?}"),
                        })
                })
                .collect()
        };
        let mut groups = Vec::new();
        let mut unmatched_predicted = Vec::new();
        let mut unmatched_truth = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| PipelineError::MappingFormat {
                line,
                reason: "expected `name = classes -> classes`".into(),
            })?;
            let key = key.trim();
            match key {
                "unmatched_predicted" => unmatched_predicted.extend(resolve(line, value, predicted_names)?),
                "unmatched_truth" => unmatched_truth.extend(resolve(line, value, truth_names)?),
                _ => {
                    let (pred, truth) = value.split_once("->").ok_or_else(|| PipelineError::MappingFormat {
                        line,
                        reason: "missing `->` between model and ground-truth classes".into(),
                    })?;
                    if key.is_empty() {
                        return Err(PipelineError::MappingFormat {
                            line,
                            reason: "empty group name".into(),
                        });
                    }
                    groups.push(ClassGroup {
                        name: key.to_string(),
                        predicted: resolve(line, pred, predicted_names)?,
                        truth: resolve(line, truth, truth_names)?,
                    });
                }
            }
        }
        Self::new(
            groups,
            unmatched_predicted,
            unmatched_truth,
            predicted_names.len(),
            truth_names.len(),
        )
    }

    /// Inverse of [`ClassMapping::parse`].
    pub fn to_text(&self, predicted_names: &[String], truth_names: &[String]) -> String {
        let names = |ids: &[usize], names: &[String]| {
            ids.iter()
                .map(|&c| names.get(c).cloned().unwrap_or_else(|| c.to_string()))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = String::new();
        for g in &self.groups {
            writeln!(
                out,
                "{} = {} -> {}",
                g.name,
                names(&g.predicted, predicted_names),
                names(&g.truth, truth_names)
            )
            .unwrap();
        }
        if !self.unmatched_predicted.is_empty() {
            writeln!(
                out,
                "unmatched_predicted = {}",
                names(&self.unmatched_predicted, predicted_names)
            )
            .unwrap();
        }
        if !self.unmatched_truth.is_empty() {
            writeln!(out, "unmatched_truth = {}", names(&self.unmatched_truth, truth_names)).unwrap();
        }
        out
    }
}

/// Samples restated in grouped classes.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedSamples {
    /// Per kept sample, the grouped class probabilities.
    pub probabilities: Vec<Vec<f64>>,
    /// Argmax of each grouped probability vector.
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// Index of every kept sample in the input.
    pub kept: Vec<usize>,
}

/// Sums member probabilities per group and renormalizes over the mapped
/// classes. Samples whose ground truth is unmatched are dropped.
pub fn group_classes(
    probabilities: &[Vec<f64>],
    labels: &[usize],
    mapping: &ClassMapping,
) -> Result<GroupedSamples, PipelineError> {
    if probabilities.len() != labels.len() {
        return Err(PipelineError::LengthMismatch {
            predicted: probabilities.len(),
            truth: labels.len(),
        });
    }
    let mut covered = vec![false; mapping.num_predicted];
    for c in mapping
        .groups
        .iter()
        .flat_map(|g| &g.predicted)
        .chain(&mapping.unmatched_predicted)
    {
        covered[*c] = true;
    }
    if let Some(c) = covered.iter().position(|&v| !v) {
        return Err(PipelineError::UnmappedClass {
            side: "predicted",
            class: c,
        });
    }
    let g = mapping.num_groups();
    let mut out = GroupedSamples {
        probabilities: Vec::new(),
        predictions: Vec::new(),
        labels: Vec::new(),
        kept: Vec::new(),
    };
    for (i, (probs, &label)) in probabilities.iter().zip(labels).enumerate() {
        if probs.len() != mapping.num_predicted {
            return Err(PipelineError::InvalidMapping(format!(
                "sample {i} has {} class probabilities, mapping expects {}",
                probs.len(),
                mapping.num_predicted
            )));
        }
        if mapping.unmatched_truth.contains(&label) {
            continue;
        }
        let group = mapping.truth_group(label).ok_or(PipelineError::UnmappedClass {
            side: "ground-truth",
            class: label,
        })?;
        let mut grouped: Vec<f64> = mapping
            .groups
            .iter()
            .map(|grp| grp.predicted.iter().map(|&c| probs[c]).sum())
            .collect();
        // Unmatched classes leave both numerator and denominator; without
        // any the sums already form a distribution.
        if !mapping.unmatched_predicted.is_empty() {
            let total: f64 = grouped.iter().sum();
            if total > 0.0 {
                grouped.iter_mut().for_each(|p| *p /= total);
            } else {
                grouped.iter_mut().for_each(|p| *p = 1.0 / g as f64);
            }
        }
        out.predictions.push(network_argmax(&grouped));
        out.probabilities.push(grouped);
        out.labels.push(group);
        out.kept.push(i);
    }
    Ok(out)
}
