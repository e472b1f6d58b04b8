//! Versioned JSON dataset files.
//!
//! ```json
//! {"schema_version": 1,
//!  "groups": [{"label": "dog",
//!              "pairs": [{"region": {"region_id": 0, "image_id": 0,
//!                                    "box": {"x1": 0, "y1": 0, "x2": 10, "y2": 10,
//!                                            "image_width": 100, "image_height": 100},
//!                                    "grid_features": [[...], ...],
//!                                    "neighbors": [{"context_feature": [...], "box": {...}}]},
//!                         "expression": {"expression_id": 0, "image_id": 0,
//!                                        "word_embeddings": [[...], ...]},
//!                         "attributes": [0, 2, 1]}]}]}
//! ```
//!
//! `grid_features` has one row per channel and one column per grid cell;
//! `word_embeddings` has one row per word. `attributes` is optional.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::{build_catalog, BoundingBox, ExpressionItem, GroupCatalog, MatchedPair, Neighbor, RegionItem};
use crate::error::{MsrlError, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxDto {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    image_width: f64,
    image_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NeighborDto {
    context_feature: Vec<f64>,
    #[serde(rename = "box")]
    bbox: BoxDto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionDto {
    region_id: usize,
    image_id: usize,
    #[serde(rename = "box")]
    bbox: BoxDto,
    grid_features: Vec<Vec<f64>>,
    #[serde(default)]
    neighbors: Vec<NeighborDto>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpressionDto {
    expression_id: usize,
    image_id: usize,
    word_embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairDto {
    region: RegionDto,
    expression: ExpressionDto,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attributes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupDto {
    label: String,
    pairs: Vec<PairDto>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDto {
    schema_version: u32,
    groups: Vec<GroupDto>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<serde_json::Value>,
}

impl From<&BoundingBox> for BoxDto {
    fn from(b: &BoundingBox) -> Self {
        BoxDto { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2, image_width: b.image_width, image_height: b.image_height }
    }
}

impl From<&BoxDto> for BoundingBox {
    fn from(b: &BoxDto) -> Self {
        BoundingBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2, image_width: b.image_width, image_height: b.image_height }
    }
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str, where_: &str) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(MsrlError::validation(format!("{where_}: ragged {what}")));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| MsrlError::validation(format!("{where_}: {what}: {e}")))
}

fn dataset_from_catalog(catalog: &GroupCatalog) -> DatasetDto {
    let groups = catalog
        .groups()
        .iter()
        .zip(catalog.labels())
        .map(|(pairs, label)| GroupDto {
            label: label.clone(),
            pairs: pairs
                .iter()
                .map(|p| PairDto {
                    region: RegionDto {
                        region_id: p.region.region_id,
                        image_id: p.region.image_id,
                        bbox: (&p.region.bbox).into(),
                        grid_features: to_rows(&p.region.grid_features),
                        neighbors: p
                            .region
                            .neighbors
                            .iter()
                            .map(|n| NeighborDto { context_feature: n.context_feature.clone(), bbox: (&n.bbox).into() })
                            .collect(),
                    },
                    expression: ExpressionDto {
                        expression_id: p.expression.expression_id,
                        image_id: p.expression.image_id,
                        word_embeddings: to_rows(&p.expression.word_embeddings),
                    },
                    attributes: p.attributes.clone(),
                })
                .collect(),
        })
        .collect();
    DatasetDto { schema_version: DATASET_SCHEMA_VERSION, groups }
}

/// Serializes a catalog to the dataset JSON layout.
pub fn dataset_to_json(catalog: &GroupCatalog) -> Result<String> {
    Ok(serde_json::to_string(&dataset_from_catalog(catalog))?)
}

/// Parses and validates a dataset document.
pub fn dataset_from_json(text: &str) -> Result<GroupCatalog> {
    let probe: VersionProbe = serde_json::from_str(text)?;
    match probe.schema_version {
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(DATASET_SCHEMA_VERSION as u64) => {}
        Some(other) => {
            return Err(MsrlError::Version { found: other.to_string(), expected: DATASET_SCHEMA_VERSION.to_string() })
        }
        None => return Err(MsrlError::Version { found: "missing".into(), expected: DATASET_SCHEMA_VERSION.to_string() }),
    }
    let dto: DatasetDto = serde_json::from_str(text)?;
    let mut items = Vec::new();
    for group in &dto.groups {
        if group.pairs.is_empty() {
            return Err(MsrlError::validation(format!("group `{}` has no pairs", group.label)));
        }
        for (k, p) in group.pairs.iter().enumerate() {
            let where_ = format!("group `{}` pair {k}", group.label);
            let bbox = BoundingBox::from(&p.region.bbox);
            bbox.validate().map_err(|e| MsrlError::validation(format!("{where_}: {e}")))?;
            let pair = MatchedPair {
                region: RegionItem {
                    region_id: p.region.region_id,
                    image_id: p.region.image_id,
                    group_id: 0,
                    bbox,
                    grid_features: from_rows(&p.region.grid_features, "grid_features", &where_)?,
                    neighbors: p
                        .region
                        .neighbors
                        .iter()
                        .map(|n| Neighbor { context_feature: n.context_feature.clone(), bbox: (&n.bbox).into() })
                        .collect(),
                },
                expression: ExpressionItem {
                    expression_id: p.expression.expression_id,
                    image_id: p.expression.image_id,
                    group_id: 0,
                    word_embeddings: from_rows(&p.expression.word_embeddings, "word_embeddings", &where_)?,
                },
                attributes: p.attributes.clone(),
            };
            items.push((group.label.clone(), pair));
        }
    }
    build_catalog(items)
}

pub fn save_dataset(catalog: &GroupCatalog, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_json(catalog)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<GroupCatalog> {
    if path.as_os_str().is_empty() {
        return Err(MsrlError::validation("empty dataset path"));
    }
    dataset_from_json(&fs::read_to_string(path)?)
}
