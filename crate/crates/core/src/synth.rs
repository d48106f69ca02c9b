//! Synthetic episode pools with planted class-specific and shared background
//! descriptors.
//!
//! Each class has a unit-length center; centers are mutually orthogonal while
//! `d` allows it (Gram-Schmidt over Gaussian draws). One further background
//! direction is shared by every class. Every image carries `ceil(rho * m)`
//! background descriptors at random positions, the rest are drawn around the
//! class center. All descriptors get isotropic Gaussian noise of scale `noise`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::descriptor::LocalDescriptor;
use crate::error::{Error, Result};
use crate::train::{EpisodePool, PoolClass, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub images_per_class: usize,
    pub d: usize,
    pub m: usize,
    pub background_ratio: f64,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticPool {
    pub pool: EpisodePool,
    /// `background[class][image][position]` marks shared-background descriptors.
    pub background: Vec<Vec<Vec<bool>>>,
    pub centers: Vec<Vec<f64>>,
    pub background_center: Vec<f64>,
}

fn gaussian(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Draws a unit vector orthogonal to `basis`; falls back to an unconstrained
/// draw once `basis` spans the space.
fn orthogonal_unit(basis: &[Vec<f64>], d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v = gaussian(d, rng);
        if basis.len() < d {
            for b in basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        if let Some(u) = unit(v) {
            return u;
        }
    }
}

pub fn generate_synthetic_pool(p: SynthParams) -> Result<SyntheticPool> {
    if p.classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {}",
            p.classes
        )));
    }
    if p.d < 1 || p.m < 1 || p.images_per_class < 1 {
        return Err(Error::InvalidConfig(
            "d, m and images per class must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&p.background_ratio) {
        return Err(Error::InvalidConfig(format!(
            "background ratio must lie in [0, 1), got {}",
            p.background_ratio
        )));
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise must be non-negative, got {}",
            p.noise
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(p.classes);
    for _ in 0..p.classes {
        let c = orthogonal_unit(&centers, p.d, &mut rng);
        centers.push(c);
    }
    let background_center = orthogonal_unit(&centers, p.d, &mut rng);
    let n_background = (p.background_ratio * p.m as f64).ceil() as usize;

    let mut classes = Vec::with_capacity(p.classes);
    let mut background = Vec::with_capacity(p.classes);
    for (ci, center) in centers.iter().enumerate() {
        let mut images = Vec::with_capacity(p.images_per_class);
        let mut masks = Vec::with_capacity(p.images_per_class);
        for img in 0..p.images_per_class {
            let mut mask = vec![false; p.m];
            for pos in sample(&mut rng, p.m, n_background) {
                mask[pos] = true;
            }
            let mut descriptors = Vec::with_capacity(p.m);
            for (pos, is_bg) in mask.iter().enumerate() {
                let base = if *is_bg { &background_center } else { center };
                let values: Vec<f64> = base
                    .iter()
                    .map(|b| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        b + p.noise * z
                    })
                    .collect();
                let l = LocalDescriptor::new(values)?;
                l.ensure_nonzero().map_err(|_| {
                    Error::DegenerateDescriptor(format!("class {ci} image {img} position {pos}"))
                })?;
                descriptors.push(l);
            }
            images.push(descriptors);
            masks.push(mask);
        }
        classes.push(PoolClass {
            label: format!("s{}_c{ci:03}", p.seed),
            images,
        });
        background.push(masks);
    }

    Ok(SyntheticPool {
        pool: EpisodePool::new(p.d, p.m, Split::Train, classes)?,
        background,
        centers,
        background_center,
    })
}
