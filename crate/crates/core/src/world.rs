//! Attribute-structured synthetic worlds with an exact relevance oracle.
//!
//! Every entity has one value per attribute. A fixed codebook maps each
//! `(attribute, value)` and each group subject to a unit vector; expressions
//! are the code vectors as words and regions tile the summed code over the
//! feature grid, both with Gaussian noise.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{build_catalog, BoundingBox, ExpressionItem, GroupCatalog, MatchedPair, Neighbor, RegionItem, MAX_NEIGHBORS};
use crate::error::{MsrlError, Result};

pub const IMAGE_SIZE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub n_attributes: usize,
    pub values_per_attribute: Vec<usize>,
    /// Embedding size `d`; also the grid channel count of synthetic regions.
    pub d: usize,
    pub noise_sigma: f64,
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.n_attributes == 0 {
            return Err(MsrlError::validation("schema needs at least one attribute"));
        }
        if self.values_per_attribute.len() != self.n_attributes {
            return Err(MsrlError::validation(format!(
                "values_per_attribute has {} entries for {} attributes",
                self.values_per_attribute.len(),
                self.n_attributes
            )));
        }
        if let Some(c) = self.values_per_attribute.iter().find(|&&c| c < 2) {
            return Err(MsrlError::validation(format!("attribute cardinality {c} < 2")));
        }
        if self.d < 4 {
            return Err(MsrlError::validation(format!("embedding size {} < 4", self.d)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(MsrlError::validation(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Layout knobs of a synthetic world beyond the attribute schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldLayout {
    pub n_groups: usize,
    /// Grid side; regions carry `grid_side^2` cells.
    pub grid_side: usize,
    /// Consecutive entities sharing one image.
    pub objects_per_image: usize,
    /// Weight of the group subject word, interpolated linearly from the first
    /// to the last group. Larger weights make a group's members more alike.
    pub subject_weight: [f64; 2],
}

impl Default for WorldLayout {
    fn default() -> Self {
        WorldLayout { n_groups: 8, grid_side: 2, objects_per_image: 8, subject_weight: [1.0, 1.0] }
    }
}

impl WorldLayout {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.grid_side == 0 || self.objects_per_image == 0 {
            return Err(MsrlError::validation("n_groups, grid_side and objects_per_image must be positive"));
        }
        if self.subject_weight.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(MsrlError::validation("subject_weight entries must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn weight(&self, group: usize) -> f64 {
        let [lo, hi] = self.subject_weight;
        if self.n_groups == 1 {
            lo
        } else {
            lo + (hi - lo) * group as f64 / (self.n_groups - 1) as f64
        }
    }

    pub fn label(&self, group: usize) -> String {
        let width = (self.n_groups.max(2) - 1).to_string().len();
        format!("group{group:0width$}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticEntity {
    pub attribute_values: Vec<usize>,
    pub group_id: usize,
}

/// Fraction of attributes on which two entities agree.
pub fn oracle_relevance(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MsrlError::validation(format!(
            "oracle needs equal non-empty attribute vectors, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let shared = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(shared as f64 / a.len() as f64)
}

fn unit_gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

fn normalize(v: &mut Array1<f64>) {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
}

/// Removes the components along `basis` (assumed orthonormal).
fn orthogonalize(v: &mut Array1<f64>, basis: &[Array1<f64>]) {
    for b in basis {
        let p = v.dot(b);
        v.scaled_add(-p, b);
    }
}

/// The fixed code vectors of a world.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `attributes[a][v]` is the code of value `v` of attribute `a`.
    pub attributes: Vec<Vec<Array1<f64>>>,
    pub subjects: Vec<Array1<f64>>,
}

impl Codebook {
    /// Draws unit-length codes. Attribute codes are made mutually orthonormal
    /// and subject codes orthogonal to them whenever `d` leaves room, which
    /// makes zero-noise cosines an exact function of attribute agreement.
    pub fn draw<R: Rng + ?Sized>(schema: &AttributeSchema, n_groups: usize, rng: &mut R) -> Self {
        let d = schema.d;
        let total: usize = schema.values_per_attribute.iter().sum();
        let orthonormal = total < d;
        let mut basis: Vec<Array1<f64>> = Vec::new();
        let mut attributes = Vec::with_capacity(schema.n_attributes);
        for &card in &schema.values_per_attribute {
            let mut codes = Vec::with_capacity(card);
            for _ in 0..card {
                let mut v = unit_gaussian(rng, d);
                if orthonormal {
                    orthogonalize(&mut v, &basis);
                }
                normalize(&mut v);
                if orthonormal {
                    basis.push(v.clone());
                }
                codes.push(v);
            }
            attributes.push(codes);
        }
        let subjects = (0..n_groups)
            .map(|_| {
                let mut v = unit_gaussian(rng, d);
                if orthonormal {
                    orthogonalize(&mut v, &basis);
                }
                normalize(&mut v);
                v
            })
            .collect();
        Codebook { attributes, subjects }
    }

    /// Noise-free feature of an entity: weighted subject code plus the sum of
    /// its attribute codes.
    pub fn code_sum(&self, entity: &SyntheticEntity, subject_weight: f64) -> Array1<f64> {
        let mut sum = &self.subjects[entity.group_id] * subject_weight;
        for (a, &v) in entity.attribute_values.iter().enumerate() {
            sum += &self.attributes[a][v];
        }
        sum
    }
}

/// A codebook plus the rules for rendering entities into catalog items.
#[derive(Debug, Clone)]
pub struct World {
    pub schema: AttributeSchema,
    pub layout: WorldLayout,
    pub codebook: Codebook,
}

/// A sampled catalog and its ground-truth entities, `entities[g][i]` aligned
/// with `catalog.groups()[g][i]`.
#[derive(Debug, Clone)]
pub struct SyntheticCatalog {
    pub catalog: GroupCatalog,
    pub entities: Vec<Vec<SyntheticEntity>>,
}

impl World {
    pub fn new<R: Rng + ?Sized>(schema: AttributeSchema, layout: WorldLayout, rng: &mut R) -> Result<Self> {
        schema.validate()?;
        layout.validate()?;
        let codebook = Codebook::draw(&schema, layout.n_groups, rng);
        Ok(World { schema, layout, codebook })
    }

    fn noisy<R: Rng + ?Sized>(&self, base: &Array1<f64>, rng: &mut R) -> Array1<f64> {
        let sigma = self.schema.noise_sigma;
        if sigma == 0.0 {
            return base.clone();
        }
        let noise = Normal::new(0.0, sigma).expect("sigma validated");
        base.mapv(|x| x + noise.sample(rng))
    }

    fn random_box<R: Rng + ?Sized>(rng: &mut R) -> BoundingBox {
        let w = rng.random_range(10.0..40.0);
        let h = rng.random_range(10.0..40.0);
        let x1 = rng.random_range(0.0..IMAGE_SIZE - w);
        let y1 = rng.random_range(0.0..IMAGE_SIZE - h);
        BoundingBox { x1, y1, x2: x1 + w, y2: y1 + h, image_width: IMAGE_SIZE, image_height: IMAGE_SIZE }
    }

    /// Samples `pairs_per_group * n_groups` entities, groups assigned
    /// round-robin, and renders them into a catalog.
    pub fn sample<R: Rng + ?Sized>(&self, pairs_per_group: usize, rng: &mut R) -> Result<SyntheticCatalog> {
        if pairs_per_group < 2 {
            return Err(MsrlError::validation(format!("pairs_per_group {pairs_per_group} < 2")));
        }
        let n_groups = self.layout.n_groups;
        let total = pairs_per_group * n_groups;
        let d = self.schema.d;
        let cells = self.layout.grid_side * self.layout.grid_side;

        let entities: Vec<SyntheticEntity> = (0..total)
            .map(|e| SyntheticEntity {
                attribute_values: self.schema.values_per_attribute.iter().map(|&c| rng.random_range(0..c)).collect(),
                group_id: e % n_groups,
            })
            .collect();
        let sums: Vec<Array1<f64>> = entities
            .iter()
            .map(|ent| self.codebook.code_sum(ent, self.layout.weight(ent.group_id)))
            .collect();
        let boxes: Vec<BoundingBox> = (0..total).map(|_| Self::random_box(rng)).collect();

        let mut items = Vec::with_capacity(total);
        for (e, ent) in entities.iter().enumerate() {
            let image_id = e / self.layout.objects_per_image;
            let weight = self.layout.weight(ent.group_id);

            let mut words = Array2::zeros((1 + self.schema.n_attributes, d));
            words.row_mut(0).assign(&self.noisy(&(&self.codebook.subjects[ent.group_id] * weight), rng));
            for (a, &v) in ent.attribute_values.iter().enumerate() {
                words.row_mut(a + 1).assign(&self.noisy(&self.codebook.attributes[a][v], rng));
            }

            let mut grid = Array2::zeros((d, cells));
            for mut col in grid.columns_mut() {
                col.assign(&self.noisy(&sums[e], rng));
            }

            let start = image_id * self.layout.objects_per_image;
            let end = (start + self.layout.objects_per_image).min(total);
            let neighbors = (start..end)
                .filter(|&o| o != e)
                .take(MAX_NEIGHBORS)
                .map(|o| Neighbor { context_feature: self.noisy(&sums[o], rng).to_vec(), bbox: boxes[o] })
                .collect();

            let pair = MatchedPair {
                region: RegionItem {
                    region_id: e,
                    image_id,
                    group_id: ent.group_id,
                    bbox: boxes[e],
                    grid_features: grid,
                    neighbors,
                },
                expression: ExpressionItem { expression_id: e, image_id, group_id: ent.group_id, word_embeddings: words },
                attributes: Some(ent.attribute_values.clone()),
            };
            items.push((self.layout.label(ent.group_id), pair));
        }
        let catalog = build_catalog(items)?;
        let mut grouped = vec![Vec::with_capacity(pairs_per_group); n_groups];
        for ent in entities {
            grouped[ent.group_id].push(ent);
        }
        Ok(SyntheticCatalog { catalog, entities: grouped })
    }
}

/// Draws a codebook and one catalog from a single generator.
pub fn generate_world<R: Rng + ?Sized>(
    schema: AttributeSchema,
    layout: WorldLayout,
    pairs_per_group: usize,
    rng: &mut R,
) -> Result<(World, SyntheticCatalog)> {
    let world = World::new(schema, layout, rng)?;
    let sampled = world.sample(pairs_per_group, rng)?;
    Ok((world, sampled))
}
