//! Latent-space exploration on a trained generator: straight-line
//! interpolation between embeddings, and attribute vectors built by simple
//! latent arithmetic — the mean embedding of images showing a trait minus
//! the mean embedding of images lacking it, added back to any embedding
//! with a chosen weight.
//!
//! Everything here works on rank-1 latent tensors and is pure; embeddings
//! come from the encoder's posterior mean so repeated runs agree exactly.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vae::VaeModel;

/// Tensor-name prefix under which attribute vectors live inside a
/// checkpoint container (counts travel in the metadata).
pub const ATTR_TENSOR_PREFIX: &str = "attr.";

/// A named latent direction with the evidence counts behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector<T> {
    pub name: String,
    /// Width equals the model's latent dimension.
    pub vector: Tensor<T>,
    /// Number of images averaged on the positive side.
    pub positives: u64,
    /// Number of images averaged on the negative side.
    pub negatives: u64,
}

fn expect_rank1<T: Scalar>(t: &Tensor<T>, role: &str) -> Result<usize> {
    if t.rank() != 1 {
        return Err(Error::Dimension(format!(
            "{role} must be a rank-1 latent, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.dim(0))
}

/// Evenly spaced points on the straight line from `from` to `to`,
/// including both ends. The endpoints are exact copies of the inputs, so
/// decoding them reproduces the original decodes bit for bit.
pub fn interpolate<T: Scalar>(
    from: &Tensor<T>,
    to: &Tensor<T>,
    steps: usize,
) -> Result<Vec<Tensor<T>>> {
    let wa = expect_rank1(from, "interpolation start")?;
    let wb = expect_rank1(to, "interpolation end")?;
    if wa != wb {
        return Err(Error::Dimension(format!(
            "interpolation endpoints have widths {wa} and {wb}"
        )));
    }
    if steps < 2 {
        return Err(Error::Usage(format!(
            "interpolation needs at least 2 steps to include both endpoints, got {steps}"
        )));
    }
    let mut path = Vec::with_capacity(steps);
    path.push(from.clone());
    for i in 1..steps - 1 {
        let t = T::from_f64(i as f64 / (steps - 1) as f64);
        let one_minus = T::one() - t;
        let data = from
            .data()
            .iter()
            .zip(to.data())
            .map(|(&a, &b)| one_minus * a + t * b)
            .collect();
        path.push(Tensor::new(vec![wa], data)?);
    }
    path.push(to.clone());
    Ok(path)
}

fn mean_of<T: Scalar>(latents: &[Tensor<T>], side: &str) -> Result<Vec<T>> {
    let Some(first) = latents.first() else {
        return Err(Error::Usage(format!(
            "attribute construction needs at least one latent on the {side} side"
        )));
    };
    let width = expect_rank1(first, "attribute latent")?;
    let mut sum = vec![T::zero(); width];
    for latent in latents {
        if expect_rank1(latent, "attribute latent")? != width {
            return Err(Error::Dimension(format!(
                "attribute latents disagree on width: {} vs {:?}",
                width,
                latent.shape()
            )));
        }
        for (s, v) in sum.iter_mut().zip(latent.data()) {
            *s += *v;
        }
    }
    let n = T::from_f64(latents.len() as f64);
    for s in &mut sum {
        *s /= n;
    }
    Ok(sum)
}

/// Mean latent of images showing the trait minus the mean latent of images
/// lacking it.
pub fn build_attribute<T: Scalar>(
    with: &[Tensor<T>],
    without: &[Tensor<T>],
    name: &str,
) -> Result<AttributeVector<T>> {
    let pos = mean_of(with, "positive")?;
    let neg = mean_of(without, "negative")?;
    if pos.len() != neg.len() {
        return Err(Error::Dimension(format!(
            "positive and negative latents have widths {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let data: Vec<T> = pos.iter().zip(&neg).map(|(&p, &n)| p - n).collect();
    Ok(AttributeVector {
        name: name.to_string(),
        vector: Tensor::new(vec![data.len()], data)?,
        positives: with.len() as u64,
        negatives: without.len() as u64,
    })
}

/// `z + weight · attribute`, leaving `z` untouched.
pub fn apply_attribute<T: Scalar>(
    z: &Tensor<T>,
    attribute: &AttributeVector<T>,
    weight: T,
) -> Result<Tensor<T>> {
    let wz = expect_rank1(z, "latent")?;
    let wa = expect_rank1(&attribute.vector, "attribute vector")?;
    if wz != wa {
        return Err(Error::Dimension(format!(
            "latent has width {wz} but attribute '{}' has width {wa}",
            attribute.name
        )));
    }
    let data = z
        .data()
        .iter()
        .zip(attribute.vector.data())
        .map(|(&a, &v)| a + weight * v)
        .collect();
    Tensor::new(vec![wz], data)
}

/// Splits a `[B, N]` batch of embeddings into rank-1 rows.
pub fn latent_rows<T: Scalar>(batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    if batch.rank() != 2 {
        return Err(Error::Dimension(format!(
            "expected a [batch, latent] tensor, got shape {:?}",
            batch.shape()
        )));
    }
    let (b, n) = (batch.dim(0), batch.dim(1));
    (0..b)
        .map(|i| Tensor::new(vec![n], batch.data()[i * n..(i + 1) * n].to_vec()))
        .collect()
}

/// Builds an attribute vector for one of the dataset's labeled traits by
/// encoding every image (posterior mean, in chunks of `batch`) and
/// averaging the two sides of the label.
pub fn build_attribute_from_dataset(
    vae: &VaeModel<f32>,
    dataset: &Dataset,
    attribute: &str,
    batch: usize,
) -> Result<AttributeVector<f32>> {
    let (pos_idx, neg_idx) = dataset.partition(attribute)?;
    let encode_side = |indices: &[usize]| -> Result<Vec<Tensor<f32>>> {
        let mut rows = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(batch.max(1)) {
            let x = dataset.batch(chunk)?;
            rows.extend(latent_rows(&vae.encode_mean(&x)?)?);
        }
        Ok(rows)
    };
    let with = encode_side(&pos_idx)?;
    let without = encode_side(&neg_idx)?;
    if with.is_empty() || without.is_empty() {
        return Err(Error::Usage(format!(
            "attribute '{attribute}' needs images on both sides, found {} with and {} without",
            with.len(),
            without.len()
        )));
    }
    build_attribute(&with, &without, attribute)
}

/// Installs an attribute vector into a checkpoint's tensor map and count
/// table, replacing any previous vector of the same name.
pub fn store_attribute(
    tensors: &mut BTreeMap<String, Tensor<f32>>,
    counts: &mut BTreeMap<String, [u64; 2]>,
    attribute: &AttributeVector<f32>,
) {
    tensors.insert(
        format!("{ATTR_TENSOR_PREFIX}{}", attribute.name),
        attribute.vector.clone(),
    );
    counts.insert(attribute.name.clone(), [attribute.positives, attribute.negatives]);
}

/// Recovers a stored attribute vector from a checkpoint's tensor map.
pub fn load_attribute(
    tensors: &BTreeMap<String, Tensor<f32>>,
    counts: &BTreeMap<String, [u64; 2]>,
    name: &str,
) -> Result<AttributeVector<f32>> {
    let vector = tensors
        .get(&format!("{ATTR_TENSOR_PREFIX}{name}"))
        .ok_or_else(|| Error::Usage(format!("checkpoint stores no attribute vector '{name}'")))?;
    let [positives, negatives] = counts.get(name).copied().unwrap_or([0, 0]);
    Ok(AttributeVector { name: name.to_string(), vector: vector.clone(), positives, negatives })
}
