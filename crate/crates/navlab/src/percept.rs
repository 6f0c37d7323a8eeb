//! Seeded joint embedding space and object retrieval.
//!
//! Stands in for a learned image/text encoder: object labels map to seeded
//! unit vectors, panorama slots encode as the sum of their visible objects'
//! vectors plus a per-slot background vector, and relevance is plain cosine
//! similarity between the mean view encoding and a label encoding.
//!
//! Slot encodings are averaged raw and normalization happens inside the
//! cosine, so retrieval scores are scale-free.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::{seeded_rng, stable_hash64};
use crate::world::{Panorama, World, PANORAMA_SLOTS};

#[derive(Debug, thiserror::Error)]
pub enum PerceptError {
    #[error("label {0:?} is not in the embedding space")]
    UnknownLabel(String),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding dimension must be at least 2, got {0}")]
    BadDimension(usize),
}

/// Relevance of one visible label, a valid cosine in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptConfig {
    pub dim: usize,
    /// Scale of the per-slot background vector mixed into slot encodings.
    pub noise_scale: f64,
    /// Pull applied to labels co-located with an episode target; see
    /// [`EmbeddingSpace::warped_toward`].
    pub warp_strength: f64,
    /// Retrieval depth.
    pub top_k: usize,
}

impl Default for PerceptConfig {
    fn default() -> Self {
        PerceptConfig { dim: 32, noise_scale: 0.25, warp_strength: 0.6, top_k: 5 }
    }
}

/// Deterministic label/view embedding space.
#[derive(Debug, Clone)]
pub struct EmbeddingSpace {
    dim: usize,
    seed: u64,
    noise_scale: f64,
    labels: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingSpace {
    /// Build the space for a label set. Vectors depend only on
    /// `(seed, label)`, never on insertion order.
    pub fn new(
        dim: usize,
        seed: u64,
        labels: impl IntoIterator<Item = impl AsRef<str>>,
        noise_scale: f64,
    ) -> Result<Self, PerceptError> {
        if dim < 2 {
            return Err(PerceptError::BadDimension(dim));
        }
        let mut table = BTreeMap::new();
        for label in labels {
            let label = label.as_ref().to_string();
            let vec = seeded_unit_vector(dim, seed, &format!("label:{label}"));
            table.insert(label, vec);
        }
        Ok(EmbeddingSpace { dim, seed, noise_scale, labels: table })
    }

    pub fn for_world(world: &World, config: &PerceptConfig) -> Result<Self, PerceptError> {
        EmbeddingSpace::new(
            config.dim,
            world.seed ^ 0x9e3779b97f4a7c15,
            world.object_lexicon.labels(),
            config.noise_scale,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit-norm encoding of a lexicon label.
    pub fn encode_label(&self, label: &str) -> Result<&[f64], PerceptError> {
        self.labels
            .get(label)
            .map(|v| v.as_slice())
            .ok_or_else(|| PerceptError::UnknownLabel(label.to_string()))
    }

    /// Derived space where labels co-located with a target are pulled toward
    /// the target's vector, making retrieval goal-aware instead of pure noise.
    pub fn warped_toward(
        &self,
        target_label: &str,
        co_located: &[String],
        strength: f64,
    ) -> Result<EmbeddingSpace, PerceptError> {
        let target = self.encode_label(target_label)?.to_vec();
        let mut out = self.clone();
        for label in co_located {
            if label == target_label {
                continue;
            }
            let v = out
                .labels
                .get_mut(label)
                .ok_or_else(|| PerceptError::UnknownLabel(label.clone()))?;
            for (x, t) in v.iter_mut().zip(&target) {
                *x += strength * t;
            }
            normalize(v);
        }
        Ok(out)
    }

    /// Encoding of one panorama slot: background vector plus the vectors of
    /// the objects visible in it.
    pub fn encode_slot(
        &self,
        world: &World,
        panorama: &Panorama,
        slot_index: usize,
    ) -> Result<Vec<f64>, PerceptError> {
        let slot = &panorama.slots[slot_index];
        let mut v = seeded_unit_vector(
            self.dim,
            self.seed,
            &format!("slot-bg:{}:{}", panorama.node, slot_index),
        );
        for x in v.iter_mut() {
            *x *= self.noise_scale;
        }
        for &obj_id in &slot.visible_object_ids {
            let label = &world.object(obj_id).map_err(|_| PerceptError::ZeroVector)?.label;
            let enc = self.encode_label(label)?;
            for (x, e) in v.iter_mut().zip(enc) {
                *x += e;
            }
        }
        Ok(v)
    }

    /// Arithmetic mean of the 36 slot encodings.
    pub fn mean_view_embedding(
        &self,
        world: &World,
        panorama: &Panorama,
    ) -> Result<Vec<f64>, PerceptError> {
        let mut acc = vec![0.0; self.dim];
        for i in 0..PANORAMA_SLOTS {
            let enc = self.encode_slot(world, panorama, i)?;
            for (a, e) in acc.iter_mut().zip(&enc) {
                *a += e;
            }
        }
        for a in acc.iter_mut() {
            *a /= PANORAMA_SLOTS as f64;
        }
        Ok(acc)
    }

    /// The `k` distinct visible labels with the highest cosine score against
    /// the mean view encoding, descending; ties break lexicographically.
    pub fn top_k_objects(
        &self,
        world: &World,
        panorama: &Panorama,
        k: usize,
    ) -> Result<Vec<RelevanceScore>, PerceptError> {
        let mean = self.mean_view_embedding(world, panorama)?;
        let mut labels: BTreeSet<&str> = BTreeSet::new();
        for id in panorama.visible_object_ids() {
            if let Ok(obj) = world.object(id) {
                labels.insert(obj.label.as_str());
            }
        }
        let mut scored: Vec<RelevanceScore> = labels
            .into_iter()
            .map(|label| {
                let enc = self.encode_label(label)?;
                Ok(RelevanceScore { label: label.to_string(), score: cosine_score(&mean, enc)? })
            })
            .collect::<Result<_, PerceptError>>()?;
        scored.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap().then_with(|| a.label.cmp(&b.label))
        });
        scored.truncate(k);
        Ok(scored)
    }
}

/// Cosine similarity; errors on zero vectors rather than clamping.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64, PerceptError> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(PerceptError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Mean of a non-empty set of equal-length vectors.
pub fn mean_of(vectors: &[Vec<f64>]) -> Vec<f64> {
    let dim = vectors[0].len();
    let mut acc = vec![0.0; dim];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    for a in acc.iter_mut() {
        *a /= vectors.len() as f64;
    }
    acc
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn seeded_unit_vector(dim: usize, seed: u64, salt: &str) -> Vec<f64> {
    let mut rng = seeded_rng(seed ^ stable_hash64(salt), "embedding");
    // Box-Muller pairs, then normalize.
    let mut v: Vec<f64> = Vec::with_capacity(dim);
    while v.len() < dim {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        v.push(r * theta.cos());
        if v.len() < dim {
            v.push(r * theta.sin());
        }
    }
    normalize(&mut v);
    v
}
