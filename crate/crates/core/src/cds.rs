//! Contrastive discriminative scoring of support descriptors and top-K
//! selection per class.
//!
//! Every support descriptor gets an intra-class similarity (mean cosine to the
//! rest of its own class pool) and an inter-class similarity (mean cosine to
//! every descriptor of the other classes). Both vectors are softmax-normalized
//! within the class, and the score is `sigmoid(d_intra / d_inter)`.

use std::fmt;

use crate::descriptor::{
    dot, mean_descriptorwise, sigmoid, softmax, DescriptorSet, LocalDescriptor,
};
use crate::error::{Error, Result};

/// Turns an episode's per-class support sets into the pools scoring runs on.
pub trait SupportPooling: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn build(&self, support: &[DescriptorSet]) -> Result<SupportPool>;
}

/// Every descriptor of every support image, `k * m` per class.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawPooling;

/// Position-wise mean over the k support images, `m` per class.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassMeanPooling;

impl SupportPooling for RawPooling {
    fn name(&self) -> &'static str {
        "raw"
    }

    fn build(&self, support: &[DescriptorSet]) -> Result<SupportPool> {
        let classes = support.iter().map(|s| s.descriptors().to_vec()).collect();
        SupportPool::new(classes, self.name())
    }
}

impl SupportPooling for ClassMeanPooling {
    fn name(&self) -> &'static str {
        "class-mean"
    }

    fn build(&self, support: &[DescriptorSet]) -> Result<SupportPool> {
        let classes = support
            .iter()
            .map(|s| mean_descriptorwise(s).map(|m| m.descriptors().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        SupportPool::new(classes, self.name())
    }
}

/// Per-class descriptor pools with cached unit vectors.
#[derive(Debug, Clone)]
pub struct SupportPool {
    classes: Vec<Vec<LocalDescriptor>>,
    units: Vec<Vec<Vec<f64>>>,
    mode: &'static str,
}

impl SupportPool {
    pub fn new(classes: Vec<Vec<LocalDescriptor>>, mode: &'static str) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "support pool needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let d = classes
            .iter()
            .flatten()
            .next()
            .map(LocalDescriptor::dim)
            .ok_or_else(|| Error::InvalidInput("support pool is empty".into()))?;
        let mut units = Vec::with_capacity(classes.len());
        for (c, class) in classes.iter().enumerate() {
            if class.is_empty() {
                return Err(Error::InvalidInput(format!("support class {c} is empty")));
            }
            let mut cu = Vec::with_capacity(class.len());
            for (i, l) in class.iter().enumerate() {
                if l.dim() != d {
                    return Err(Error::InvalidInput(format!(
                        "support class {c} descriptor {i} has dimension {}, expected {d}",
                        l.dim()
                    )));
                }
                cu.push(l.normalized().map_err(|_| {
                    Error::DegenerateDescriptor(format!(
                        "support class {c} descriptor {i} has zero norm"
                    ))
                })?);
            }
            units.push(cu);
        }
        Ok(Self {
            classes,
            units,
            mode,
        })
    }

    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> &[LocalDescriptor] {
        &self.classes[c]
    }

    pub fn class_size(&self, c: usize) -> usize {
        self.classes[c].len()
    }

    pub fn mode(&self) -> &'static str {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.classes[0][0].dim()
    }

    fn unit_cos(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b).clamp(-1.0, 1.0)
    }

    fn check_index(&self, c: usize, i: usize) -> Result<()> {
        if c >= self.way() || i >= self.class_size(c) {
            return Err(Error::InvalidInput(format!(
                "no support descriptor ({c}, {i})"
            )));
        }
        Ok(())
    }
}

/// Mean cosine between descriptor `i` of class `c` and the other descriptors
/// of the same class.
pub fn intra_similarity(c: usize, i: usize, pool: &SupportPool) -> Result<f64> {
    pool.check_index(c, i)?;
    let size = pool.class_size(c);
    if size < 2 {
        return Err(Error::DegenerateClass { class: c, size });
    }
    let me = &pool.units[c][i];
    let sum: f64 = pool.units[c]
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, u)| SupportPool::unit_cos(me, u))
        .sum();
    Ok(sum / (size - 1) as f64)
}

/// Mean cosine between descriptor `i` of class `c` and every descriptor of the
/// remaining classes.
pub fn inter_similarity(c: usize, i: usize, pool: &SupportPool) -> Result<f64> {
    pool.check_index(c, i)?;
    let me = &pool.units[c][i];
    let mut sum = 0.0;
    let mut count = 0usize;
    for (other, units) in pool.units.iter().enumerate() {
        if other == c {
            continue;
        }
        for u in units {
            sum += SupportPool::unit_cos(me, u);
        }
        count += units.len();
    }
    Ok(sum / count as f64)
}

/// Intermediate quantities of the scoring, kept for inspection and oracle checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
    pub d_intra: Vec<f64>,
    pub d_inter: Vec<f64>,
    pub cds: Vec<f64>,
}

/// Scores every descriptor of every class.
pub fn contrastive_breakdown(pool: &SupportPool) -> Result<Vec<ClassScores>> {
    (0..pool.way())
        .map(|c| {
            let size = pool.class_size(c);
            let intra = (0..size)
                .map(|i| intra_similarity(c, i, pool))
                .collect::<Result<Vec<_>>>()?;
            let inter = (0..size)
                .map(|i| inter_similarity(c, i, pool))
                .collect::<Result<Vec<_>>>()?;
            let d_intra = softmax(&intra)?;
            let d_inter = softmax(&inter)?;
            let cds = d_intra
                .iter()
                .zip(&d_inter)
                .map(|(a, b)| sigmoid(a / b))
                .collect();
            Ok(ClassScores {
                intra,
                inter,
                d_intra,
                d_inter,
                cds,
            })
        })
        .collect()
}

/// Contrastive discriminative score of every descriptor, per class.
pub fn contrastive_scores(pool: &SupportPool) -> Result<Vec<Vec<f64>>> {
    Ok(contrastive_breakdown(pool)?
        .into_iter()
        .map(|s| s.cds)
        .collect())
}

/// Number of descriptors kept from a class pool of `pool_size`.
pub fn selection_size(k_fraction: f64, pool_size: usize) -> usize {
    ((k_fraction * pool_size as f64).round() as usize).max(1)
}

pub fn validate_k_fraction(k_fraction: f64) -> Result<()> {
    if k_fraction > 0.0 && k_fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "top-K fraction must lie in (0, 1], got {k_fraction}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedDescriptor {
    /// Position in the class pool.
    pub index: usize,
    pub cds: f64,
    pub descriptor: LocalDescriptor,
}

/// The discriminative support descriptors of every class, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CdsSelection {
    classes: Vec<Vec<SelectedDescriptor>>,
    k_fraction: f64,
}

impl CdsSelection {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> &[SelectedDescriptor] {
        &self.classes[c]
    }

    pub fn k_fraction(&self) -> f64 {
        self.k_fraction
    }

    pub fn indices(&self, c: usize) -> Vec<usize> {
        self.classes[c].iter().map(|s| s.index).collect()
    }

    pub fn dim(&self) -> usize {
        self.classes[0][0].descriptor.dim()
    }

    /// All selected descriptors across classes, class-major.
    pub fn union(&self) -> impl Iterator<Item = &LocalDescriptor> {
        self.classes.iter().flatten().map(|s| &s.descriptor)
    }
}

/// Keeps the top `max(1, round(K * P_c))` descriptors of each class by score.
pub fn select_top_k(pool: &SupportPool, k_fraction: f64) -> Result<CdsSelection> {
    validate_k_fraction(k_fraction)?;
    let scores = contrastive_scores(pool)?;
    Ok(select_from_scores(pool, &scores, k_fraction))
}

/// Selection given precomputed per-class scores.
pub fn select_from_scores(
    pool: &SupportPool,
    scores: &[Vec<f64>],
    k_fraction: f64,
) -> CdsSelection {
    let classes = scores
        .iter()
        .enumerate()
        .map(|(c, cds)| {
            let mut order: Vec<usize> = (0..cds.len()).collect();
            // stable sort keeps lower index first among equal scores
            order.sort_by(|&a, &b| cds[b].total_cmp(&cds[a]));
            order
                .into_iter()
                .take(selection_size(k_fraction, cds.len()))
                .map(|index| SelectedDescriptor {
                    index,
                    cds: cds[index],
                    descriptor: pool.class(c)[index].clone(),
                })
                .collect()
        })
        .collect();
    CdsSelection {
        classes,
        k_fraction,
    }
}
