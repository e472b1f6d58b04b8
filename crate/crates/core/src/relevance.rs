//! Anchor-negative relevance matrices, one `M x M'` matrix per group.
//!
//! Entries that do not belong to a group, or whose modality is missing, carry
//! a cleared mask bit. Every reduction goes through the mask.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::domain::{GroupCatalog, IouFilter, Modality, PairRef, TripletBatch};
use crate::encoders::{cosine, EncoderParams, ExpressionEncoding, RegionEncoding};
use crate::error::{MsrlError, Result};

/// Smallest admissible magnitude of a sum-normalization denominator.
pub const MIN_DENOMINATOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMode {
    /// `(1 + cos(a, b)) / 2`, on the same `[0, 1]` scale as the pace thresholds.
    #[default]
    Cosine01,
    /// Dot product divided by the sum of dot products over the unmasked
    /// entries of the same modality in the group matrix.
    PaperLiteral,
}

/// How the visual/textual switch is chosen per entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// Visual for region negatives, textual for expression negatives.
    #[default]
    PerPair,
    ForceVisual,
    ForceTextual,
}

impl AlphaPolicy {
    pub fn resolve(&self, column: Modality) -> Modality {
        match self {
            AlphaPolicy::PerPair => column,
            AlphaPolicy::ForceVisual => Modality::Visual,
            AlphaPolicy::ForceTextual => Modality::Textual,
        }
    }
}

/// The negative side of one relevance estimate.
#[derive(Debug, Clone, Copy)]
pub enum NegativeFeature<'a> {
    Expression(&'a Array1<f64>),
    Region(&'a Array1<f64>),
}

/// Relevance of one anchor-negative pair, or `None` when the modality chosen
/// by `alpha` is missing on the negative side.
///
/// In [`RelevanceMode::PaperLiteral`] this is the raw dot product; the
/// group-sum denominator is applied by [`relevance_matrices`].
pub fn pair_relevance(
    anchor_region: &Array1<f64>,
    anchor_expression: &Array1<f64>,
    negative: NegativeFeature<'_>,
    alpha: Modality,
    mode: RelevanceMode,
) -> Result<Option<f64>> {
    let (a, b) = match (alpha, negative) {
        (Modality::Visual, NegativeFeature::Region(v)) => (anchor_region, v),
        (Modality::Textual, NegativeFeature::Expression(s)) => (anchor_expression, s),
        _ => return Ok(None),
    };
    if a.len() != b.len() {
        return Err(MsrlError::Dimension { context: "relevance features", expected: a.len(), got: b.len() });
    }
    Ok(Some(match mode {
        RelevanceMode::Cosine01 => (1.0 + cosine(a, b)?) / 2.0,
        RelevanceMode::PaperLiteral => a.dot(b),
    }))
}

/// Relevance-space features of a batch.
///
/// Region features here are computed without expression guidance so that a
/// visual relevance depends on region inputs only.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    pub anchor_regions: Vec<Array1<f64>>,
    pub anchor_expressions: Vec<Array1<f64>>,
    /// One feature per negative column, in [`TripletBatch::column`] order.
    pub columns: Vec<Array1<f64>>,
}

impl BatchFeatures {
    /// Encodes every batch member with the current parameters.
    pub fn encode(catalog: &GroupCatalog, batch: &TripletBatch, params: &EncoderParams) -> Result<Self> {
        let unguided = Array1::zeros(params.dims().embed);
        let region = |r: PairRef| -> Result<Array1<f64>> {
            Ok(RegionEncoding::new(&catalog.pair(r).region, &unguided, params)?.features)
        };
        let expression = |r: PairRef| -> Result<Array1<f64>> {
            Ok(ExpressionEncoding::new(&catalog.pair(r).expression, params)?.features)
        };
        let anchor_regions = batch.anchors.iter().map(|&a| region(a)).collect::<Result<_>>()?;
        let anchor_expressions = batch.anchors.iter().map(|&a| expression(a)).collect::<Result<_>>()?;
        let columns = (0..batch.n_negatives())
            .map(|j| match batch.column(j) {
                (neg, Modality::Textual) => expression(neg.pair),
                (neg, Modality::Visual) => region(neg.pair),
            })
            .collect::<Result<_>>()?;
        Ok(BatchFeatures { anchor_regions, anchor_expressions, columns })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceConfig {
    pub mode: RelevanceMode,
    pub alpha: AlphaPolicy,
    pub iou_filter: IouFilter,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig { mode: RelevanceMode::Cosine01, alpha: AlphaPolicy::PerPair, iou_filter: IouFilter::Overlap }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrixSet {
    values: Vec<Array2<f64>>,
    mask: Vec<Array2<bool>>,
    /// Effective modality of each column.
    modality: Vec<Modality>,
}

impl RelevanceMatrixSet {
    /// Builds a set directly from per-group values and masks.
    pub fn from_parts(values: Vec<Array2<f64>>, mask: Vec<Array2<bool>>, modality: Vec<Modality>) -> Result<Self> {
        if values.len() != mask.len() || values.is_empty() {
            return Err(MsrlError::validation("values and mask need one matrix per group"));
        }
        let shape = values[0].dim();
        if values.iter().any(|v| v.dim() != shape) || mask.iter().any(|m| m.dim() != shape) {
            return Err(MsrlError::validation("all group matrices must share one shape"));
        }
        if modality.len() != shape.1 {
            return Err(MsrlError::Dimension { context: "column modalities", expected: shape.1, got: modality.len() });
        }
        Ok(RelevanceMatrixSet { values, mask, modality })
    }

    pub fn n_groups(&self) -> usize {
        self.values.len()
    }

    /// `(M, M')`.
    pub fn shape(&self) -> (usize, usize) {
        self.values[0].dim()
    }

    pub fn modality(&self, column: usize) -> Modality {
        self.modality[column]
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modality
    }

    pub fn is_unmasked(&self, g: usize, i: usize, j: usize) -> bool {
        self.mask[g][[i, j]]
    }

    pub fn get(&self, g: usize, i: usize, j: usize) -> Option<f64> {
        self.mask[g][[i, j]].then(|| self.values[g][[i, j]])
    }

    /// Unmasked entries of group `g` as `(i, j, value)`, row-major.
    pub fn unmasked(&self, g: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.mask[g].indexed_iter().filter(|(_, &m)| m).map(move |((i, j), _)| (i, j, self.values[g][[i, j]]))
    }

    pub fn mask(&self, g: usize) -> &Array2<bool> {
        &self.mask[g]
    }

    pub fn count_unmasked(&self) -> usize {
        self.mask.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }

    /// Folds over every unmasked entry in group order.
    pub fn fold_unmasked<T>(&self, init: T, mut f: impl FnMut(T, usize, usize, usize, f64) -> T) -> T {
        let mut acc = init;
        for g in 0..self.n_groups() {
            for (i, j, v) in self.unmasked(g) {
                acc = f(acc, g, i, j, v);
            }
        }
        acc
    }

    /// Mean over unmasked entries, `None` when everything is masked.
    pub fn mean_unmasked(&self) -> Option<f64> {
        let (sum, n) = self.fold_unmasked((0.0, 0usize), |(s, n), _, _, _, v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Fills `R^(g)` for every group of the catalog. Entry `(i, j)` is unmasked
/// when anchor `i` and negative `j` both belong to `g`, `j` is not anchor
/// `i`'s own pair, `j` passes the IoU filter against anchor `i`, and the
/// modality chosen by `alpha` is available. Without cross-anchor scoring only
/// an anchor's own negatives are filled.
pub fn relevance_matrices(
    catalog: &GroupCatalog,
    batch: &TripletBatch,
    features: &BatchFeatures,
    cfg: &RelevanceConfig,
) -> Result<RelevanceMatrixSet> {
    let m = batch.anchors.len();
    let m_neg = batch.n_negatives();
    if features.anchor_regions.len() != m || features.anchor_expressions.len() != m {
        return Err(MsrlError::Dimension { context: "anchor features", expected: m, got: features.anchor_regions.len() });
    }
    if features.columns.len() != m_neg {
        return Err(MsrlError::Dimension { context: "negative features", expected: m_neg, got: features.columns.len() });
    }
    let n_groups = catalog.n_groups();
    let mut values = vec![Array2::zeros((m, m_neg)); n_groups];
    let mut mask = vec![Array2::from_elem((m, m_neg), false); n_groups];
    let mut modality = Vec::with_capacity(m_neg);

    for j in 0..m_neg {
        let (neg, column_modality) = batch.column(j);
        let alpha = cfg.alpha.resolve(column_modality);
        modality.push(alpha);
        let negative = match column_modality {
            Modality::Textual => NegativeFeature::Expression(&features.columns[j]),
            Modality::Visual => NegativeFeature::Region(&features.columns[j]),
        };
        let g = neg.group;
        for (i, &anchor) in batch.anchors.iter().enumerate() {
            if anchor.group != g || anchor == neg.pair {
                continue;
            }
            if neg.anchor != i {
                if !batch.cross_anchor {
                    continue;
                }
                if !cfg.iou_filter.admits(catalog.pair(anchor), catalog.pair(neg.pair)) {
                    continue;
                }
            }
            let r = pair_relevance(&features.anchor_regions[i], &features.anchor_expressions[i], negative, alpha, cfg.mode)?;
            if let Some(r) = r {
                values[g][[i, j]] = r;
                mask[g][[i, j]] = true;
            }
        }
    }

    if cfg.mode == RelevanceMode::PaperLiteral {
        for g in 0..n_groups {
            for target in [Modality::Visual, Modality::Textual] {
                let entries: Vec<(usize, usize)> = mask[g]
                    .indexed_iter()
                    .filter(|&((_, j), &on)| on && modality[j] == target)
                    .map(|(ij, _)| ij)
                    .collect();
                if entries.is_empty() {
                    continue;
                }
                let denom: f64 = entries.iter().map(|&ij| values[g][ij]).sum();
                if denom.abs() <= MIN_DENOMINATOR {
                    return Err(MsrlError::Degenerate(format!(
                        "group {} {:?} relevance denominator {denom:e}",
                        catalog.labels()[g],
                        target
                    )));
                }
                for ij in entries {
                    values[g][ij] /= denom;
                }
            }
        }
    }
    RelevanceMatrixSet::from_parts(values, mask, modality)
}
