//! Expressions, regions, image groups and triplet batch construction.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsrlError, Result};

/// At most this many surrounding regions feed the location and relation modules.
pub const MAX_NEIGHBORS: usize = 5;

/// IoU at which a same-image candidate counts as overlapping the anchor.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, image_width: f64, image_height: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2, image_width, image_height };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2, self.image_width, self.image_height]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(MsrlError::validation(format!("non-finite box {self:?}")));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(MsrlError::validation(format!(
                "degenerate box: need x1 < x2 and y1 < y2, got ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > self.image_width || self.y2 > self.image_height {
            return Err(MsrlError::validation(format!(
                "box ({}, {}, {}, {}) outside image {}x{}",
                self.x1, self.y1, self.x2, self.y2, self.image_width, self.image_height
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// `[x1/W, y1/H, x2/W, y2/H, wh/WH]`.
    pub fn location_vector(&self) -> [f64; 5] {
        let (w, h) = (self.image_width, self.image_height);
        [self.x1 / w, self.y1 / h, self.x2 / w, self.y2 / h, self.area() / (w * h)]
    }

    /// Offset of `other` relative to `self`: corner deltas scaled by this box's
    /// width/height, plus the area ratio.
    pub fn relative_offset(&self, other: &BoundingBox) -> [f64; 5] {
        let (w, h) = (self.width(), self.height());
        [
            (other.x1 - self.x1) / w,
            (other.y1 - self.y1) / h,
            (other.x2 - self.x2) / w,
            (other.y2 - self.y2) / h,
            other.area() / self.area(),
        ]
    }
}

/// Intersection over union of two boxes in the same pixel frame.
pub fn compute_iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// A surrounding region: its context feature and its box in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub context_feature: Vec<f64>,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionItem {
    pub region_id: usize,
    pub image_id: usize,
    pub group_id: usize,
    pub bbox: BoundingBox,
    /// `c x B` grid feature map, one column per grid cell.
    pub grid_features: Array2<f64>,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionItem {
    pub expression_id: usize,
    pub image_id: usize,
    pub group_id: usize,
    /// `T x d`, one row per word.
    pub word_embeddings: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub region: RegionItem,
    pub expression: ExpressionItem,
    /// Ground-truth attribute values, present for synthetic data only.
    pub attributes: Option<Vec<usize>>,
}

impl MatchedPair {
    pub fn image_id(&self) -> usize {
        self.region.image_id
    }
}

/// Position of a matched pair inside a [`GroupCatalog`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairRef {
    pub group: usize,
    pub index: usize,
}

/// Feature dimensions shared by every item of a catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    /// Word embedding size `d`.
    pub embed: usize,
    /// Grid channels `c`.
    pub channels: usize,
    /// Grid cells `B`.
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCatalog {
    groups: Vec<Vec<MatchedPair>>,
    labels: Vec<String>,
    dims: FeatureDims,
}

impl GroupCatalog {
    pub fn groups(&self) -> &[Vec<MatchedPair>] {
        &self.groups
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dims(&self) -> FeatureDims {
        self.dims
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn pair(&self, r: PairRef) -> &MatchedPair {
        &self.groups[r.group][r.index]
    }

    pub fn refs(&self) -> impl Iterator<Item = PairRef> + '_ {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, pairs)| (0..pairs.len()).map(move |index| PairRef { group: g, index }))
    }
}

fn check_pair(label: &str, pos: usize, pair: &MatchedPair, dims: FeatureDims) -> Result<()> {
    let ctx = |msg: String| MsrlError::validation(format!("group `{label}` pair {pos}: {msg}"));
    pair.region.bbox.validate().map_err(|e| ctx(e.to_string()))?;
    if pair.region.image_id != pair.expression.image_id {
        return Err(ctx("region and expression come from different images".into()));
    }
    let (c, b) = pair.region.grid_features.dim();
    if c != dims.channels || b != dims.cells {
        return Err(ctx(format!("grid features {c}x{b}, expected {}x{}", dims.channels, dims.cells)));
    }
    let (t, d) = pair.expression.word_embeddings.dim();
    if t == 0 {
        return Err(ctx("expression has no words".into()));
    }
    if d != dims.embed {
        return Err(ctx(format!("word embedding size {d}, expected {}", dims.embed)));
    }
    if pair.region.neighbors.len() > MAX_NEIGHBORS {
        return Err(ctx(format!("{} neighbors, at most {MAX_NEIGHBORS}", pair.region.neighbors.len())));
    }
    for n in &pair.region.neighbors {
        n.bbox.validate().map_err(|e| ctx(format!("neighbor: {e}")))?;
        if n.context_feature.len() != dims.embed {
            return Err(ctx(format!(
                "neighbor context feature size {}, expected {}",
                n.context_feature.len(),
                dims.embed
            )));
        }
    }
    let finite = pair.region.grid_features.iter().all(|v| v.is_finite())
        && pair.expression.word_embeddings.iter().all(|v| v.is_finite());
    if !finite {
        return Err(ctx("non-finite feature value".into()));
    }
    Ok(())
}

/// Partitions labelled pairs into groups ordered by label. Group ids on the
/// items are overwritten with the index of the containing group.
pub fn build_catalog(items: Vec<(String, MatchedPair)>) -> Result<GroupCatalog> {
    let Some((_, first)) = items.first() else {
        return Err(MsrlError::validation("cannot build a catalog from zero pairs"));
    };
    let dims = FeatureDims {
        embed: first.expression.word_embeddings.ncols(),
        channels: first.region.grid_features.nrows(),
        cells: first.region.grid_features.ncols(),
    };
    let mut by_label: BTreeMap<String, Vec<MatchedPair>> = BTreeMap::new();
    for (pos, (label, pair)) in items.into_iter().enumerate() {
        if label.trim().is_empty() {
            return Err(MsrlError::validation(format!("pair {pos} has an empty group label")));
        }
        check_pair(&label, pos, &pair, dims)?;
        by_label.entry(label).or_default().push(pair);
    }
    let mut labels = Vec::with_capacity(by_label.len());
    let mut groups = Vec::with_capacity(by_label.len());
    for (g, (label, mut pairs)) in by_label.into_iter().enumerate() {
        for p in &mut pairs {
            p.region.group_id = g;
            p.expression.group_id = g;
        }
        labels.push(label);
        groups.push(pairs);
    }
    Ok(GroupCatalog { groups, labels, dims })
}

/// Which same-image candidates are rejected as negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouFilter {
    /// Reject same-image candidates overlapping the anchor region (IoU >= 0.5).
    #[default]
    Overlap,
    /// Reject same-image candidates with IoU < 0.5.
    PaperLiteral,
}

impl IouFilter {
    /// True when `candidate` may serve as a negative for `anchor`.
    pub fn admits(&self, anchor: &MatchedPair, candidate: &MatchedPair) -> bool {
        if anchor.image_id() != candidate.image_id() {
            return true;
        }
        // boxes are validated at catalog construction
        let iou = compute_iou(&anchor.region.bbox, &candidate.region.bbox).unwrap_or(1.0);
        match self {
            IouFilter::Overlap => iou < IOU_THRESHOLD,
            IouFilter::PaperLiteral => iou >= IOU_THRESHOLD,
        }
    }
}

/// Where negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Any member of the anchor's group.
    Group,
    /// Other objects of the anchor's image, regardless of group.
    SameImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    /// Anchors per batch, `M`.
    pub anchors: usize,
    /// Negatives per batch, `M'`; must be a multiple of `anchors`.
    pub negatives: usize,
    /// Fraction of each anchor's negatives that are expressions.
    pub split_ratio: f64,
    pub iou_filter: IouFilter,
    pub source: NegativeSource,
}

impl BatchConfig {
    pub fn negatives_per_anchor(&self) -> usize {
        self.negatives / self.anchors.max(1)
    }

    /// `(expression negatives, region negatives)` per anchor. Odd splits give
    /// the extra slot to the expression side.
    pub fn split(&self) -> (usize, usize) {
        let k = self.negatives_per_anchor();
        let n_expr = ((k as f64 * self.split_ratio) - 1e-9).ceil().clamp(0.0, k as f64) as usize;
        (n_expr, k - n_expr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors == 0 {
            return Err(MsrlError::validation("batch needs at least one anchor"));
        }
        if self.negatives == 0 || !self.negatives.is_multiple_of(self.anchors) {
            return Err(MsrlError::validation(format!(
                "negatives ({}) must be a positive multiple of anchors ({})",
                self.negatives, self.anchors
            )));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(MsrlError::validation(format!("split_ratio {} outside [0, 1]", self.split_ratio)));
        }
        Ok(())
    }
}

/// One sampled negative: the owning anchor, the catalog pair it was drawn
/// from, and the group whose relevance matrix it lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeRef {
    pub anchor: usize,
    pub pair: PairRef,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletBatch {
    pub anchors: Vec<PairRef>,
    /// Negative expressions paired with the anchor region.
    pub neg_expr: Vec<NegativeRef>,
    /// Negative regions paired with the anchor expression.
    pub neg_region: Vec<NegativeRef>,
    /// Whether a negative may be scored against anchors other than its own.
    pub cross_anchor: bool,
}

impl TripletBatch {
    pub fn n_negatives(&self) -> usize {
        self.neg_expr.len() + self.neg_region.len()
    }

    /// Negative columns in matrix order: expressions first, then regions.
    pub fn column(&self, j: usize) -> (NegativeRef, Modality) {
        if j < self.neg_expr.len() {
            (self.neg_expr[j], Modality::Textual)
        } else {
            (self.neg_region[j - self.neg_expr.len()], Modality::Visual)
        }
    }

    pub fn anchor_group(&self, i: usize) -> usize {
        self.anchors[i].group
    }
}

/// Modality used to estimate an anchor-negative relevance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Region features (`alpha = 1`).
    Visual,
    /// Expression features (`alpha = 0`).
    Textual,
}

fn candidates(catalog: &GroupCatalog, anchor: PairRef, cfg: &BatchConfig) -> Vec<PairRef> {
    let a = catalog.pair(anchor);
    match cfg.source {
        NegativeSource::Group => (0..catalog.groups()[anchor.group].len())
            .map(|index| PairRef { group: anchor.group, index })
            .filter(|&r| r != anchor && cfg.iou_filter.admits(a, catalog.pair(r)))
            .collect(),
        NegativeSource::SameImage => catalog
            .refs()
            .filter(|&r| r != anchor && catalog.pair(r).image_id() == a.image_id())
            .filter(|&r| cfg.iou_filter.admits(a, catalog.pair(r)))
            .collect(),
    }
}

/// Samples `M` anchors uniformly without replacement and draws each anchor's
/// negatives uniformly, without replacement per modality, from its eligible
/// candidates.
pub fn construct_batch<R: Rng + ?Sized>(catalog: &GroupCatalog, rng: &mut R, cfg: &BatchConfig) -> Result<TripletBatch> {
    cfg.validate()?;
    let all: Vec<PairRef> = catalog.refs().collect();
    if cfg.anchors > all.len() {
        return Err(MsrlError::validation(format!(
            "batch asks for {} anchors but the catalog has {} pairs",
            cfg.anchors,
            all.len()
        )));
    }
    let (n_expr, n_region) = cfg.split();
    let needed = n_expr.max(n_region);
    let mut batch = TripletBatch {
        anchors: Vec::with_capacity(cfg.anchors),
        neg_expr: Vec::with_capacity(cfg.anchors * n_expr),
        neg_region: Vec::with_capacity(cfg.anchors * n_region),
        cross_anchor: cfg.source == NegativeSource::Group,
    };
    for (i, pos) in index::sample(rng, all.len(), cfg.anchors).into_iter().enumerate() {
        let anchor = all[pos];
        let pool = candidates(catalog, anchor, cfg);
        if pool.len() < needed {
            return Err(MsrlError::BatchConstruction {
                group: catalog.labels()[anchor.group].clone(),
                reason: format!(
                    "anchor {}/{} has {} eligible negatives, needs {needed}",
                    anchor.group,
                    anchor.index,
                    pool.len()
                ),
            });
        }
        batch.anchors.push(anchor);
        for pick in index::sample(rng, pool.len(), n_expr) {
            batch.neg_expr.push(NegativeRef { anchor: i, pair: pool[pick], group: anchor.group });
        }
        for pick in index::sample(rng, pool.len(), n_region) {
            batch.neg_region.push(NegativeRef { anchor: i, pair: pool[pick], group: anchor.group });
        }
    }
    Ok(batch)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use ndarray::Array2;

    pub fn pair(image_id: usize, bbox: BoundingBox, d: usize) -> MatchedPair {
        MatchedPair {
            region: RegionItem {
                region_id: 0,
                image_id,
                group_id: 0,
                bbox,
                grid_features: Array2::from_elem((d, 1), 0.5),
                neighbors: Vec::new(),
            },
            expression: ExpressionItem {
                expression_id: 0,
                image_id,
                group_id: 0,
                word_embeddings: Array2::from_elem((1, d), 0.25),
            },
            attributes: None,
        }
    }

    pub fn unit_box(offset: f64) -> BoundingBox {
        BoundingBox::new(offset, offset, offset + 10.0, offset + 10.0, 200.0, 200.0).unwrap()
    }

    /// One group of `n` pairs, each in its own image.
    pub fn single_group(n: usize) -> GroupCatalog {
        let items = (0..n).map(|i| ("g".to_string(), pair(i, unit_box(i as f64), 4))).collect();
        build_catalog(items).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2, 100.0, 100.0).unwrap()
    }

    #[test]
    fn iou_identity_disjoint_and_partial() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(compute_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(compute_iou(&a, &bx(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        let iou = compute_iou(&a, &bx(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert!((iou - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_degenerate_box() {
        let bad = BoundingBox { x1: 3.0, y1: 0.0, x2: 1.0, y2: 2.0, image_width: 10.0, image_height: 10.0 };
        assert!(compute_iou(&bad, &bx(0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0, 10.0, 10.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 11.0, 1.0, 10.0, 10.0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..90.0f64, 0.0..90.0f64, 0.1..10.0f64, 0.1..10.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h, 100.0, 100.0).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = compute_iou(&a, &b).unwrap();
            let ba = compute_iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn catalog_partitions_by_label_in_lexicographic_order() {
        let labels = ["person", "person", "car", "car"];
        let items = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.to_string(), pair(i, unit_box(0.0), 4)))
            .collect();
        let cat = build_catalog(items).unwrap();
        assert_eq!(cat.labels(), &["car".to_string(), "person".to_string()]);
        assert_eq!(cat.groups()[0].len(), 2);
        assert_eq!(cat.groups()[1].len(), 2);
        assert!(cat.groups()[1].iter().all(|p| p.region.group_id == 1 && p.expression.group_id == 1));
    }

    #[test]
    fn catalog_errors() {
        assert!(build_catalog(Vec::new()).is_err());
        assert!(build_catalog(vec![(" ".into(), pair(0, unit_box(0.0), 4))]).is_err());
        let one = build_catalog(vec![("x".into(), pair(0, unit_box(0.0), 4))]).unwrap();
        assert_eq!(one.n_groups(), 1);
        assert_eq!(one.n_pairs(), 1);
    }

    fn group_cfg(anchors: usize, negatives: usize) -> BatchConfig {
        BatchConfig {
            anchors,
            negatives,
            split_ratio: 0.5,
            iou_filter: IouFilter::Overlap,
            source: NegativeSource::Group,
        }
    }

    #[test]
    fn split_gives_odd_slot_to_expressions() {
        assert_eq!(group_cfg(10, 60).split(), (3, 3));
        assert_eq!(group_cfg(2, 6).split(), (2, 1));
        assert_eq!(group_cfg(1, 1).split(), (1, 0));
        assert_eq!(group_cfg(10, 60).negatives_per_anchor(), 6);
    }

    #[test]
    fn forced_choice_in_group_of_two() {
        let cat = single_group(2);
        let mut rng = stream_rng(1, Stream::Batch);
        let batch = construct_batch(&cat, &mut rng, &group_cfg(1, 1)).unwrap();
        let anchor = batch.anchors[0];
        assert_eq!(batch.neg_expr.len(), 1);
        assert!(batch.neg_region.is_empty());
        assert_eq!(batch.neg_expr[0].pair.index, 1 - anchor.index);
    }

    #[test]
    fn group_too_small_names_group() {
        let cat = single_group(2);
        let mut rng = stream_rng(1, Stream::Batch);
        let err = construct_batch(&cat, &mut rng, &group_cfg(1, 4)).unwrap_err();
        assert!(err.to_string().contains("group g"), "{err}");
    }

    #[test]
    fn batch_is_deterministic_for_seed() {
        let cat = single_group(30);
        let cfg = group_cfg(4, 12);
        let a = construct_batch(&cat, &mut stream_rng(7, Stream::Batch), &cfg).unwrap();
        let b = construct_batch(&cat, &mut stream_rng(7, Stream::Batch), &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.n_negatives(), 12);
    }

    #[test]
    fn iou_filter_directions() {
        // anchor and two same-image candidates: one overlapping, one apart
        let anchor_box = bx(0.0, 0.0, 10.0, 10.0);
        let items = vec![
            ("g".to_string(), pair(0, anchor_box, 4)),
            ("g".to_string(), pair(0, bx(1.0, 1.0, 10.0, 10.0), 4)),
            ("g".to_string(), pair(0, bx(50.0, 50.0, 60.0, 60.0), 4)),
        ];
        let cat = build_catalog(items).unwrap();
        let a = cat.pair(PairRef { group: 0, index: 0 });
        let near = cat.pair(PairRef { group: 0, index: 1 });
        let far = cat.pair(PairRef { group: 0, index: 2 });
        assert!(!IouFilter::Overlap.admits(a, near));
        assert!(IouFilter::Overlap.admits(a, far));
        assert!(IouFilter::PaperLiteral.admits(a, near));
        assert!(!IouFilter::PaperLiteral.admits(a, far));
    }
}
