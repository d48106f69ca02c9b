#![allow(dead_code)]

use ldsel::cds::{contrastive_breakdown, SupportPool};
use ldsel::io::{decode_descriptor_file, encode_descriptor_file};
use ldsel::query::{weights_map, ThresholdMlp};
use ldsel::train::PoolClass;
use ldsel::{select_top_k, softmax, Checkpoint, EpisodePool, LocalDescriptor, Scoring, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn ld(v: &[f64]) -> LocalDescriptor {
    LocalDescriptor::new(v.to_vec()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

/// `n` classes of `per_class` random descriptors each.
pub fn random_classes(
    rng: &mut ChaCha8Rng,
    n: usize,
    per_class: usize,
    d: usize,
) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|_| (0..per_class).map(|_| random_vec(rng, d)).collect())
        .collect()
}

pub fn support_pool(classes: &[Vec<Vec<f64>>]) -> SupportPool {
    let classes = classes
        .iter()
        .map(|c| c.iter().map(|v| ld(v)).collect())
        .collect();
    SupportPool::new(classes, "raw").unwrap()
}

pub fn random_pool_shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(2..=5),
        rng.random_range(2..=30),
        rng.random_range(2..=8),
    )
}

fn cds_and_selection(classes: &[Vec<Vec<f64>>], k: f64) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let pool = support_pool(classes);
    let cds = contrastive_breakdown(&pool)
        .unwrap()
        .into_iter()
        .map(|b| b.cds)
        .collect();
    let sel = select_top_k(&pool, k).unwrap();
    (cds, (0..sel.way()).map(|c| sel.indices(c)).collect())
}

/// Scaling every descriptor by `s` must leave CDS and the selection unchanged:
/// bit for bit when `exact`, else within 1e-12 with the same indices.
pub fn check_scale_invariance(seed: u64, s: f64, exact: bool) -> Check {
    let mut r = rng(seed);
    let (n, p, d) = random_pool_shape(&mut r);
    let classes = random_classes(&mut r, n, p, d);
    let scaled: Vec<Vec<Vec<f64>>> = classes
        .iter()
        .map(|c| {
            c.iter()
                .map(|v| v.iter().map(|x| x * s).collect())
                .collect()
        })
        .collect();
    let pool = support_pool(&classes);
    let spool = support_pool(&scaled);
    let a = contrastive_breakdown(&pool).unwrap();
    let b = contrastive_breakdown(&spool).unwrap();
    for (c, (x, y)) in a.iter().zip(&b).enumerate() {
        for (name, u, v) in [
            ("intra", &x.intra, &y.intra),
            ("inter", &x.inter, &y.inter),
            ("cds", &x.cds, &y.cds),
        ] {
            for (i, (p, q)) in u.iter().zip(v.iter()).enumerate() {
                let ok = if exact {
                    p.to_bits() == q.to_bits()
                } else {
                    (p - q).abs() <= 1e-12
                };
                if !ok {
                    return Err(format!(
                        "seed {seed}: {name}[{c}][{i}] {p} vs {q} at scale {s}"
                    ));
                }
            }
        }
    }
    for k in [0.01, 0.1, 0.3, 1.0] {
        let (sa, sb) = (
            select_top_k(&pool, k).unwrap(),
            select_top_k(&spool, k).unwrap(),
        );
        for c in 0..n {
            if sa.indices(c) != sb.indices(c) {
                return Err(format!(
                    "seed {seed}: selection differs for class {c} at K={k}, scale {s}"
                ));
            }
        }
    }
    Ok(())
}

/// Permuting one class's descriptors permutes its CDS vector the same way and
/// selects the same descriptor values.
pub fn check_permutation_equivariance(seed: u64) -> Check {
    let mut r = rng(seed);
    let (n, p, d) = random_pool_shape(&mut r);
    let classes = random_classes(&mut r, n, p, d);
    let c = r.random_range(0..n);
    let mut perm: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let mut permuted = classes.clone();
    permuted[c] = perm.iter().map(|&i| classes[c][i].clone()).collect();
    let k = [0.1, 0.25, 0.3, 1.0][r.random_range(0..4)];
    let (cds, sel) = cds_and_selection(&classes, k);
    let (pcds, psel) = cds_and_selection(&permuted, k);
    for (j, &i) in perm.iter().enumerate() {
        if (pcds[c][j] - cds[c][i]).abs() > 1e-12 {
            return Err(format!(
                "seed {seed}: permuted CDS {} vs {}",
                pcds[c][j], cds[c][i]
            ));
        }
    }
    let mut want: Vec<usize> = sel[c].clone();
    let mut got: Vec<usize> = psel[c].iter().map(|&j| perm[j]).collect();
    want.sort_unstable();
    got.sort_unstable();
    if want != got {
        return Err(format!(
            "seed {seed}: class {c} selects {got:?} after permutation, {want:?} before"
        ));
    }
    Ok(())
}

pub fn check_softmax(x: &[f64]) -> Check {
    let p = softmax(x).map_err(|e| e.to_string())?;
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(format!("softmax of {x:?} sums to {sum}"));
    }
    if !p.iter().all(|v| *v > 0.0) {
        return Err(format!("softmax of {x:?} is not a distribution: {p:?}"));
    }
    if ldsel::descriptor::argmax(&p) != ldsel::descriptor::argmax(x) {
        return Err(format!("softmax moved the argmax of {x:?}"));
    }
    Ok(())
}

/// Finite-difference signs of the weights map at one point.
pub fn check_weights_monotone(disc: f64, threshold: f64, lambda: f64) -> Check {
    let h = 1e-6;
    let m = weights_map(disc, threshold, lambda);
    if weights_map(disc + h, threshold, lambda) <= m {
        return Err(format!(
            "M not increasing in D at D={disc} V={threshold} lambda={lambda}"
        ));
    }
    if weights_map(disc, threshold + h, lambda) >= m {
        return Err(format!(
            "M not decreasing in V at D={disc} V={threshold} lambda={lambda}"
        ));
    }
    Ok(())
}

pub fn random_monotone_point(r: &mut ChaCha8Rng) -> (f64, f64, f64) {
    (
        r.random_range(0.2..=1.0),
        r.random_range(0.0..1.0),
        r.random_range(0.5..=20.0),
    )
}

/// Posterior of every query is positive and sums to one; loss is non-negative.
pub fn check_posterior_validity(seed: u64) -> Check {
    let mut r = rng(seed);
    let inst = ldsel::oracle::random_instance(&mut r, 2).map_err(|e| e.to_string())?;
    let scoring = Scoring::named(inst.k_fraction, inst.lambda, inst.form, inst.mode)
        .map_err(|e| e.to_string())?;
    let eval = scoring
        .evaluate(&inst.episode, &inst.mlp)
        .map_err(|e| e.to_string())?;
    for q in &eval.queries {
        let sum: f64 = q.posterior.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || q.posterior.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(format!("seed {seed}: invalid posterior {:?}", q.posterior));
        }
    }
    if !(eval.loss >= 0.0 && eval.loss.is_finite()) {
        return Err(format!("seed {seed}: loss {}", eval.loss));
    }
    Ok(())
}

/// A pool of `classes` x `images` x `m` descriptors with the given components.
pub fn pool_from_values(d: usize, m: usize, images: usize, values: &[f64]) -> EpisodePool {
    let per_class = images * m * d;
    let classes = values
        .chunks(per_class)
        .enumerate()
        .map(|(c, chunk)| PoolClass {
            label: format!("class-{c}"),
            images: chunk
                .chunks(m * d)
                .map(|img| img.chunks(d).map(ld).collect())
                .collect(),
        })
        .collect();
    EpisodePool::new(d, m, Split::Train, classes).unwrap()
}

/// Encoding then decoding reproduces every stored value exactly.
pub fn check_file_roundtrip(pool: &EpisodePool) -> Check {
    let bytes = encode_descriptor_file(pool).map_err(|e| e.to_string())?;
    let back = decode_descriptor_file(&bytes).map_err(|e| e.to_string())?;
    for (a, b) in pool.classes().iter().zip(back.classes()) {
        if a.label != b.label {
            return Err(format!("label {} came back as {}", a.label, b.label));
        }
        for (ia, ib) in a.images.iter().zip(&b.images) {
            for (x, y) in ia.iter().zip(ib) {
                let want: Vec<u64> = x
                    .values()
                    .iter()
                    .map(|v| (*v as f32 as f64).to_bits())
                    .collect();
                let got: Vec<u64> = y.values().iter().map(|v| v.to_bits()).collect();
                if want != got {
                    return Err(format!(
                        "values {:?} came back as {:?}",
                        x.values(),
                        y.values()
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Saving then loading a checkpoint reproduces every parameter bit for bit.
pub fn check_checkpoint_roundtrip(mlp: ThresholdMlp, scoring: Scoring, seed: u64) -> Check {
    let ck = Checkpoint { mlp, scoring, seed };
    let text = ck.to_json().map_err(|e| e.to_string())?;
    let back = Checkpoint::from_json(&text).map_err(|e| e.to_string())?;
    let bits = |m: &ThresholdMlp| {
        m.flat_params()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    if bits(&ck.mlp) != bits(&back.mlp) {
        return Err("parameters changed across a checkpoint round trip".into());
    }
    if back.scoring.k_fraction.to_bits() != scoring.k_fraction.to_bits()
        || back.scoring.lambda.to_bits() != scoring.lambda.to_bits()
        || back.scoring.rule.name() != scoring.rule.name()
        || back.scoring.pooling.name() != scoring.pooling.name()
        || back.seed != seed
    {
        return Err("scoring settings changed across a checkpoint round trip".into());
    }
    Ok(())
}
