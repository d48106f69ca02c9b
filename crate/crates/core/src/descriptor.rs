//! Descriptor containers and the similarity / normalization kernels.
//!
//! A [`LocalDescriptor`] is one spatial position of a feature map. Images
//! contribute `m` of them each; a [`DescriptorSet`] keeps them image-major in
//! the order they were ingested, and every index used downstream refers to
//! that order.

use crate::error::{Error, Result};

/// One d-dimensional feature vector. Entries are finite; the norm is cached.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptor {
    values: Vec<f64>,
    norm: f64,
}

impl LocalDescriptor {
    /// Builds a descriptor, rejecting empty or non-finite input.
    ///
    /// Zero-norm vectors are accepted here so that intermediate results (for
    /// example a class mean) can exist; they fail at the first [`cosine`].
    /// Ingestion paths call [`LocalDescriptor::ensure_nonzero`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("descriptor has dimension 0".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "descriptor entry {pos} is not finite ({})",
                values[pos]
            )));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { values, norm })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn ensure_nonzero(&self) -> Result<()> {
        if self.norm > 0.0 {
            Ok(())
        } else {
            Err(Error::DegenerateDescriptor(
                "descriptor has zero norm".into(),
            ))
        }
    }

    /// Unit-length copy of the values.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        self.ensure_nonzero()?;
        Ok(self.values.iter().map(|v| v / self.norm).collect())
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * s).collect())
    }
}

/// Dot product with four independent accumulators.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &LocalDescriptor, b: &LocalDescriptor) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    a.ensure_nonzero()?;
    b.ensure_nonzero()?;
    Ok((dot(&a.values, &b.values) / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("softmax input is not finite".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Descriptors of `image_count` images, `per_image` each, image-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    descriptors: Vec<LocalDescriptor>,
    image_count: usize,
    per_image: usize,
}

impl DescriptorSet {
    pub fn new(
        descriptors: Vec<LocalDescriptor>,
        image_count: usize,
        per_image: usize,
    ) -> Result<Self> {
        if image_count == 0 || per_image == 0 {
            return Err(Error::InvalidInput(
                "descriptor set needs image_count >= 1 and per_image >= 1".into(),
            ));
        }
        if descriptors.len() != image_count * per_image {
            return Err(Error::InvalidInput(format!(
                "descriptor set holds {} descriptors, expected {image_count} x {per_image}",
                descriptors.len()
            )));
        }
        let d = descriptors[0].dim();
        if let Some(bad) = descriptors.iter().position(|l| l.dim() != d) {
            return Err(Error::InvalidInput(format!(
                "descriptor {bad} has dimension {}, set dimension is {d}",
                descriptors[bad].dim()
            )));
        }
        Ok(Self {
            descriptors,
            image_count,
            per_image,
        })
    }

    /// Concatenates single images (each a list of `m` descriptors) into one set.
    pub fn from_images(images: &[Vec<LocalDescriptor>]) -> Result<Self> {
        let per_image = images.first().map(Vec::len).unwrap_or(0);
        if images.iter().any(|im| im.len() != per_image) {
            return Err(Error::InvalidInput(
                "images disagree on descriptor count".into(),
            ));
        }
        let descriptors = images.iter().flatten().cloned().collect();
        Self::new(descriptors, images.len(), per_image)
    }

    pub fn descriptors(&self) -> &[LocalDescriptor] {
        &self.descriptors
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    pub fn per_image(&self) -> usize {
        self.per_image
    }

    pub fn dim(&self) -> usize {
        self.descriptors[0].dim()
    }

    pub fn image(&self, i: usize) -> &[LocalDescriptor] {
        &self.descriptors[i * self.per_image..(i + 1) * self.per_image]
    }
}

/// Averages the k images position by position, yielding one image of `m`
/// mean descriptors.
pub fn mean_descriptorwise(set: &DescriptorSet) -> Result<DescriptorSet> {
    let k = set.image_count as f64;
    let d = set.dim();
    let mut out = Vec::with_capacity(set.per_image);
    for j in 0..set.per_image {
        let mut acc = vec![0.0; d];
        for img in 0..set.image_count {
            for (a, v) in acc.iter_mut().zip(set.image(img)[j].values()) {
                *a += v;
            }
        }
        if set.image_count > 1 {
            acc.iter_mut().for_each(|a| *a /= k);
        }
        out.push(LocalDescriptor::new(acc)?);
    }
    DescriptorSet::new(out, 1, set.per_image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQuery {
    pub set: DescriptorSet,
    /// Episode-local class index in `0..way`.
    pub label: usize,
}

/// An n-way k-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    way: usize,
    shot: usize,
    support: Vec<DescriptorSet>,
    queries: Vec<LabeledQuery>,
}

impl Episode {
    pub fn new(support: Vec<DescriptorSet>, queries: Vec<LabeledQuery>) -> Result<Self> {
        let way = support.len();
        if way == 0 {
            return Err(Error::InvalidInput("episode has no support classes".into()));
        }
        let shot = support[0].image_count();
        let (d, m) = (support[0].dim(), support[0].per_image());
        for (c, s) in support.iter().enumerate() {
            if s.image_count() != shot {
                return Err(Error::InvalidInput(format!(
                    "support class {c} has {} images, expected {shot}",
                    s.image_count()
                )));
            }
            if s.dim() != d || s.per_image() != m {
                return Err(Error::InvalidInput(format!(
                    "support class {c} geometry differs from class 0"
                )));
            }
        }
        for (qi, q) in queries.iter().enumerate() {
            if q.set.image_count() != 1 {
                return Err(Error::InvalidInput(format!(
                    "query {qi} must hold exactly one image"
                )));
            }
            if q.set.dim() != d || q.set.per_image() != m {
                return Err(Error::InvalidInput(format!(
                    "query {qi} geometry differs from support"
                )));
            }
            if q.label >= way {
                return Err(Error::InvalidInput(format!(
                    "query {qi} label {} out of range for {way}-way episode",
                    q.label
                )));
            }
        }
        Ok(Self {
            way,
            shot,
            support,
            queries,
        })
    }

    pub fn way(&self) -> usize {
        self.way
    }

    pub fn shot(&self) -> usize {
        self.shot
    }

    pub fn support(&self) -> &[DescriptorSet] {
        &self.support
    }

    pub fn queries(&self) -> &[LabeledQuery] {
        &self.queries
    }

    pub fn dim(&self) -> usize {
        self.support[0].dim()
    }

    pub fn per_image(&self) -> usize {
        self.support[0].per_image()
    }
}
