//! Retrieval accuracy, group statistics and training snapshots.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{GroupCatalog, PairRef};
use crate::encoders::{EncoderParams, ExpressionEncoding, PairTape};
use crate::error::{MsrlError, Result};

/// Distractors drawn per item when an image holds no other member of the group.
pub const DEFAULT_DISTRACTORS: usize = 10;

/// One localization query: an expression and the candidate regions it is
/// ranked against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub expression: PairRef,
    pub candidates: Vec<PairRef>,
    /// Index of the matched region within `candidates`.
    pub truth: usize,
}

impl EvalItem {
    pub fn group(&self) -> usize {
        self.expression.group
    }
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    catalog: GroupCatalog,
    items: Vec<EvalItem>,
}

impl EvalSet {
    pub fn new(catalog: GroupCatalog, items: Vec<EvalItem>) -> Result<Self> {
        for item in &items {
            if item.candidates.is_empty() {
                return Err(MsrlError::validation(format!("eval item {:?} has no candidates", item.expression)));
            }
            if item.truth >= item.candidates.len() {
                return Err(MsrlError::validation(format!("eval item {:?} truth index out of range", item.expression)));
            }
        }
        Ok(EvalSet { catalog, items })
    }

    /// One item per pair. Candidates are the group's regions from the same
    /// image; when the image holds no other group member, `distractors`
    /// random regions of the group are added instead. The truth sits at a
    /// random position.
    pub fn build<R: Rng + ?Sized>(catalog: GroupCatalog, distractors: usize, rng: &mut R) -> Result<Self> {
        let mut items = Vec::with_capacity(catalog.n_pairs());
        for anchor in catalog.refs() {
            let members = &catalog.groups()[anchor.group];
            let image = catalog.pair(anchor).image_id();
            let same_image: Vec<PairRef> = (0..members.len())
                .map(|index| PairRef { group: anchor.group, index })
                .filter(|&r| r != anchor && members[r.index].image_id() == image)
                .collect();
            let mut candidates = if same_image.is_empty() {
                let others: Vec<PairRef> =
                    (0..members.len()).map(|index| PairRef { group: anchor.group, index }).filter(|&r| r != anchor).collect();
                let k = distractors.min(others.len());
                index::sample(rng, others.len(), k).into_iter().map(|p| others[p]).collect()
            } else {
                same_image
            };
            let truth = rng.random_range(0..=candidates.len());
            candidates.insert(truth, anchor);
            items.push(EvalItem { expression: anchor, candidates, truth });
        }
        EvalSet::new(catalog, items)
    }

    pub fn catalog(&self) -> &GroupCatalog {
        &self.catalog
    }

    pub fn items(&self) -> &[EvalItem] {
        &self.items
    }

    pub fn n_groups(&self) -> usize {
        self.catalog.n_groups()
    }
}

/// Index of the first maximum.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Matching scores of every candidate of one item.
pub fn item_scores(params: &EncoderParams, catalog: &GroupCatalog, item: &EvalItem) -> Result<Vec<f64>> {
    if item.candidates.is_empty() {
        return Err(MsrlError::validation("empty candidate list"));
    }
    let expr = ExpressionEncoding::new(&catalog.pair(item.expression).expression, params)?;
    item.candidates
        .iter()
        .map(|&c| PairTape::forward(&catalog.pair(c).region, &expr, params).map(|(f, _)| f))
        .collect()
}

pub fn is_correct(scores: &[f64], truth: usize) -> bool {
    argmax_first(scores) == Some(truth)
}

/// Fraction of items whose best-scoring candidate is the truth.
pub fn accuracy(params: &EncoderParams, eval: &EvalSet) -> Result<f64> {
    Ok(group_accuracy(params, eval)?.overall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub overall: f64,
    /// `None` for groups without eval items.
    pub per_group: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub ave: f64,
    /// Population standard deviation over groups with items.
    pub std: f64,
}

impl GroupAccuracy {
    pub fn from_correct(correct: &[usize], counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(MsrlError::validation("evaluation set is empty"));
        }
        let per_group: Vec<Option<f64>> =
            correct.iter().zip(counts).map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64)).collect();
        let present: Vec<f64> = per_group.iter().flatten().copied().collect();
        let (ave, std) = mean_std(&present);
        Ok(GroupAccuracy { overall: correct.iter().sum::<usize>() as f64 / total as f64, per_group, counts: counts.to_vec(), ave, std })
    }
}

pub fn group_accuracy(params: &EncoderParams, eval: &EvalSet) -> Result<GroupAccuracy> {
    let mut correct = vec![0usize; eval.n_groups()];
    let mut counts = vec![0usize; eval.n_groups()];
    for item in eval.items() {
        let scores = item_scores(params, eval.catalog(), item)?;
        counts[item.group()] += 1;
        if is_correct(&scores, item.truth) {
            correct[item.group()] += 1;
        }
    }
    GroupAccuracy::from_correct(&correct, &counts)
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean per-group count and its coefficient of variation in percent.
pub fn selection_cv(counts: &[f64]) -> Result<(f64, f64)> {
    let (mean, std) = mean_std(counts);
    if mean <= 0.0 {
        return Err(MsrlError::Degenerate("selection counts have zero mean".into()));
    }
    Ok((mean, 100.0 * std / mean))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MsrlError::validation("spearman needs two equal-length samples of size >= 2"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, sx) = mean_std(&rx);
    let (my, sy) = mean_std(&ry);
    if sx == 0.0 || sy == 0.0 {
        return Err(MsrlError::Degenerate("spearman of a constant sample".into()));
    }
    let cov = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / rx.len() as f64;
    Ok(cov / (sx * sy))
}

/// Training diagnostics at one iteration. Selection counts and relevance
/// means are averaged over the batches scheduled since the previous snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub iteration: usize,
    pub loss: f64,
    pub mean_r_all: Option<f64>,
    /// `None` when nothing was selected.
    pub mean_r_selected: Option<f64>,
    pub selected_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub val_acc: f64,
    pub selected_per_group: Vec<f64>,
    pub acc_per_group: Vec<Option<f64>>,
}

impl MetricsSnapshot {
    pub fn n_groups(&self) -> usize {
        self.selected_per_group.len()
    }

    /// AVE and STD of the per-group accuracies.
    pub fn group_ave_std(&self) -> (f64, f64) {
        let present: Vec<f64> = self.acc_per_group.iter().flatten().copied().collect();
        mean_std(&present)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_first(&[0.2, 0.7, 0.7]), Some(1));
        assert_eq!(argmax_first(&[]), None);
        assert_eq!(argmax_first(&[-1.0]), Some(0));
    }

    #[test]
    fn group_stats_examples() {
        let all = GroupAccuracy::from_correct(&[3, 5], &[3, 5]).unwrap();
        assert_eq!((all.ave, all.std), (1.0, 0.0));
        let half = GroupAccuracy::from_correct(&[1, 2], &[2, 2]).unwrap();
        assert_eq!((half.ave, half.std), (0.75, 0.25));
        assert_eq!(half.overall, 0.75);
        let sparse = GroupAccuracy::from_correct(&[1, 0], &[1, 0]).unwrap();
        assert_eq!(sparse.per_group, vec![Some(1.0), None]);
    }

    #[test]
    fn cv_examples() {
        assert_eq!(selection_cv(&[5.0, 5.0, 5.0]).unwrap(), (5.0, 0.0));
        assert_eq!(selection_cv(&[10.0, 30.0]).unwrap(), (20.0, 50.0));
        assert!(selection_cv(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[0.0, 2.0]).is_err());
    }
}
