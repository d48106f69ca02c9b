//! Episodic sampling, analytic gradients of the episode loss with respect to
//! the threshold network, Adam with step decay, and evaluation.
//!
//! Gradients stop at the threshold network: the top-K support selection, the
//! query similarities and the discriminative scores are constants of an
//! episode.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cds::CdsSelection;
use crate::descriptor::{DescriptorSet, Episode, LabeledQuery, LocalDescriptor};
use crate::error::{Error, Result};
use crate::pipeline::Scoring;
use crate::query::{episode_scores, pooled_context, threshold_input, ThresholdMlp, LEAKY_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolClass {
    pub label: String,
    /// Each image is `m` descriptors.
    pub images: Vec<Vec<LocalDescriptor>>,
}

/// Labeled images grouped by class, the source episodes are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePool {
    d: usize,
    m: usize,
    split: Split,
    classes: Vec<PoolClass>,
}

impl EpisodePool {
    pub fn new(d: usize, m: usize, split: Split, classes: Vec<PoolClass>) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::InvalidInput("pool needs d >= 1 and m >= 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for class in &classes {
            if !seen.insert(class.label.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate class label '{}'",
                    class.label
                )));
            }
            for (i, img) in class.images.iter().enumerate() {
                if img.len() != m {
                    return Err(Error::InvalidInput(format!(
                        "class '{}' image {i} has {} descriptors, expected {m}",
                        class.label,
                        img.len()
                    )));
                }
                if let Some(bad) = img.iter().position(|l| l.dim() != d) {
                    return Err(Error::InvalidInput(format!(
                        "class '{}' image {i} descriptor {bad} has wrong dimension",
                        class.label
                    )));
                }
            }
        }
        Ok(Self {
            d,
            m,
            split,
            classes,
        })
    }

    /// Concatenates fragments (e.g. several descriptor files) into one pool.
    pub fn merge(fragments: Vec<EpisodePool>, split: Split) -> Result<Self> {
        let first = fragments
            .first()
            .ok_or_else(|| Error::InvalidInput("no pool fragments given".into()))?;
        let (d, m) = (first.d, first.m);
        let mut classes = Vec::new();
        for f in fragments {
            if f.d != d || f.m != m {
                return Err(Error::InvalidInput(format!(
                    "fragment geometry d={} m={} differs from d={d} m={m}",
                    f.d, f.m
                )));
            }
            classes.extend(f.classes);
        }
        Self::new(d, m, split, classes)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn per_image(&self) -> usize {
        self.m
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn classes(&self) -> &[PoolClass] {
        &self.classes
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Fails if any two pools share a class label.
pub fn check_disjoint(pools: &[&EpisodePool]) -> Result<()> {
    let mut owner = std::collections::HashMap::new();
    for pool in pools {
        for class in &pool.classes {
            if let Some(prev) = owner.insert(class.label.as_str(), pool.split) {
                return Err(Error::InvalidInput(format!(
                    "class '{}' appears in both {prev:?} and {:?} pools",
                    class.label, pool.split
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    /// Query images per class.
    pub queries: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 5,
            queries: 15,
        }
    }
}

/// Draws `way` classes, then `shot + queries` distinct images per class.
pub fn sample_episode<R: Rng + ?Sized>(
    pool: &EpisodePool,
    shape: EpisodeShape,
    rng: &mut R,
) -> Result<Episode> {
    let EpisodeShape { way, shot, queries } = shape;
    if way < 2 || shot == 0 {
        return Err(Error::InvalidConfig(format!(
            "episode needs way >= 2 and shot >= 1, got {way}-way {shot}-shot"
        )));
    }
    if pool.classes.len() < way {
        return Err(Error::PoolExhausted(format!(
            "{way}-way episode needs {way} classes, pool has {}",
            pool.classes.len()
        )));
    }
    let need = shot + queries;
    if let Some(c) = pool.classes.iter().find(|c| c.images.len() < need) {
        return Err(Error::PoolExhausted(format!(
            "class '{}' has {} images, episode needs {need}",
            c.label,
            c.images.len()
        )));
    }
    let chosen = sample(rng, pool.classes.len(), way);
    let mut support = Vec::with_capacity(way);
    let mut query_sets = Vec::with_capacity(way * queries);
    for (label, ci) in chosen.iter().enumerate() {
        let class = &pool.classes[ci];
        let picks = sample(rng, class.images.len(), need).into_vec();
        let shots: Vec<_> = picks[..shot]
            .iter()
            .map(|&i| class.images[i].clone())
            .collect();
        support.push(DescriptorSet::from_images(&shots)?);
        for &i in &picks[shot..] {
            query_sets.push(LabeledQuery {
                set: DescriptorSet::new(class.images[i].clone(), 1, pool.m)?,
                label,
            });
        }
    }
    Episode::new(support, query_sets)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub shape: EpisodeShape,
    pub scoring: Scoring,
    pub hidden_dim: Option<usize>,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Episodes whose gradients are averaged into one Adam step.
    pub batch_episodes: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shape: EpisodeShape::default(),
            scoring: Scoring::default(),
            hidden_dim: None,
            lr: 1e-3,
            decay: 0.1,
            decay_every: 10,
            epochs: 30,
            episodes_per_epoch: 100,
            batch_episodes: 1,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scoring.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 || self.decay_every == 0 || self.batch_episodes == 0 {
            return Err(Error::InvalidConfig(
                "epochs, decay interval and batch size must be at least 1".into(),
            ));
        }
        if self.shape.queries == 0 {
            return Err(Error::InvalidConfig(
                "need at least one query per class".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch.max(1) - 1) / self.decay_every;
        self.lr * self.decay.powi(steps as i32)
    }

    pub fn hidden_for(&self, d: usize) -> usize {
        self.hidden_dim.unwrap_or(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: AdamParams, size: usize) -> Self {
        Self {
            params,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut [f64], grads: &[f64], lr: f64) {
        let AdamParams { beta1, beta2, eps } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..weights.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grads[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            weights[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Gradient of the episode loss, laid out like [`ThresholdMlp::flat_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub flat: Vec<f64>,
}

/// Episode loss and its derivatives with respect to every MLP parameter.
pub fn loss_and_gradients(
    episode: &Episode,
    selection: &CdsSelection,
    mlp: &ThresholdMlp,
    scoring: &Scoring,
) -> Result<Gradients> {
    let eval = episode_scores(episode, selection, mlp, scoring.lambda, scoring.rule)?;
    let context = pooled_context(selection)?;
    let (h, input) = (mlp.hidden_dim(), mlp.input_dim());
    let mut g_w1 = vec![0.0; h * input];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; h];
    let mut g_b2 = 0.0;
    let inv_q = 1.0 / eval.queries.len() as f64;
    let lambda = scoring.lambda;

    for (q, res) in episode.queries().iter().zip(&eval.queries) {
        let d_scores: Vec<f64> = res
            .posterior
            .iter()
            .enumerate()
            .map(|(c, p)| (p - if c == res.label { 1.0 } else { 0.0 }) * inv_q)
            .collect();
        for (lq, term) in q.set.descriptors().iter().zip(&res.terms) {
            let (g_v_direct, g_m) = scoring.rule.backprop(term, &d_scores);
            let (m, v) = (term.weight, term.threshold);
            let g_v = g_v_direct - g_m * lambda * m * (1.0 - m);
            let g_z = g_v * v * (1.0 - v);
            if g_z == 0.0 {
                continue;
            }
            let x = threshold_input(lq, &context)?;
            let pre = mlp.hidden_pre(&x);
            g_b2 += g_z;
            for j in 0..h {
                let act = if pre[j] > 0.0 {
                    pre[j]
                } else {
                    LEAKY_SLOPE * pre[j]
                };
                g_w2[j] += g_z * act;
                let slope = if pre[j] > 0.0 { 1.0 } else { LEAKY_SLOPE };
                let g_pre = g_z * mlp.w2()[j] * slope;
                g_b1[j] += g_pre;
                for (g, xi) in g_w1[j * input..(j + 1) * input].iter_mut().zip(&x) {
                    *g += g_pre * xi;
                }
            }
        }
    }

    let mut flat = g_w1;
    flat.extend(g_b1);
    flat.extend(g_w2);
    flat.push(g_b2);
    Ok(Gradients {
        loss: eval.loss,
        flat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochLog {
    /// Tab-separated: epoch, mean loss, lr, wall-clock seconds.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:e}\t{:.3}",
            self.epoch, self.mean_loss, self.lr, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mlp: ThresholdMlp,
    pub log: Vec<EpochLog>,
}

/// Initial parameters for a run with this config.
pub fn initial_mlp(d: usize, cfg: &TrainConfig) -> ThresholdMlp {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ThresholdMlp::init(d, cfg.hidden_for(d), &mut rng)
}

/// Episodic meta-training of the threshold network.
pub fn meta_train(pool: &EpisodePool, cfg: &TrainConfig) -> Result<TrainOutcome> {
    meta_train_with(pool, cfg, |_| {})
}

/// [`meta_train`] with a per-epoch callback.
pub fn meta_train_with(
    pool: &EpisodePool,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut mlp = initial_mlp(pool.dim(), cfg);
    let mut episode_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(cfg.adam, mlp.param_count());
    let mut weights = mlp.flat_params();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut acc = vec![0.0; weights.len()];
        let mut pending = 0usize;
        for _ in 0..cfg.episodes_per_epoch {
            let seed = episode_rng.next_u64();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let episode = sample_episode(pool, cfg.shape, &mut rng)?;
            let selection = cfg.scoring.select(&episode)?;
            let grads = loss_and_gradients(&episode, &selection, &mlp, &cfg.scoring)?;
            if !grads.loss.is_finite() || grads.flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::NumericalFailure {
                    seed,
                    detail: format!("non-finite loss or gradient in epoch {epoch}"),
                });
            }
            loss_sum += grads.loss;
            acc.iter_mut().zip(&grads.flat).for_each(|(a, g)| *a += g);
            pending += 1;
            if pending == cfg.batch_episodes {
                step(&mut adam, &mut weights, &mut acc, pending, lr);
                mlp.set_flat_params(&weights);
                pending = 0;
            }
        }
        if pending > 0 {
            step(&mut adam, &mut weights, &mut acc, pending, lr);
            mlp.set_flat_params(&weights);
        }
        let entry = EpochLog {
            epoch,
            mean_loss: if cfg.episodes_per_epoch > 0 {
                loss_sum / cfg.episodes_per_epoch as f64
            } else {
                f64::NAN
            },
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { mlp, log })
}

fn step(adam: &mut Adam, weights: &mut [f64], acc: &mut [f64], count: usize, lr: f64) {
    acc.iter_mut().for_each(|a| *a /= count as f64);
    adam.step(weights, acc, lr);
    acc.iter_mut().for_each(|a| *a = 0.0);
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    /// 95% confidence half-width over repeats.
    pub ci95: f64,
    pub per_repeat: Vec<f64>,
}

/// Accuracy over `episodes` episodes, repeated `repeats` times with fresh
/// episode draws. Episodes run in parallel; counts merge as integers.
pub fn evaluate(
    pool: &EpisodePool,
    mlp: &ThresholdMlp,
    scoring: &Scoring,
    shape: EpisodeShape,
    episodes: usize,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 || repeats == 0 {
        return Err(Error::InvalidConfig(
            "episodes and repeats must be at least 1".into(),
        ));
    }
    scoring.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut per_repeat = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let seeds: Vec<u64> = (0..episodes).map(|_| master.next_u64()).collect();
        let counts = seeds
            .par_iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let episode = sample_episode(pool, shape, &mut rng)?;
                let eval = scoring.evaluate(&episode, mlp)?;
                Ok((eval.correct(), eval.queries.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        let (correct, total) = counts
            .iter()
            .fold((0usize, 0usize), |(c, t), (dc, dt)| (c + dc, t + dt));
        per_repeat.push(correct as f64 / total as f64);
    }
    let mean = per_repeat.iter().sum::<f64>() / repeats as f64;
    let ci95 = if repeats > 1 {
        let var = per_repeat.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
        1.96 * var.sqrt() / (repeats as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        mean,
        ci95,
        per_repeat,
    })
}

/// Accuracy at each top-K percentage in `grid`, on one fixed episode sequence.
pub fn ablate_topk(
    pool: &EpisodePool,
    mlp: &ThresholdMlp,
    scoring: &Scoring,
    shape: EpisodeShape,
    grid_percent: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<Vec<(f64, EvalReport)>> {
    grid_percent
        .iter()
        .map(|&pct| {
            let s = Scoring {
                k_fraction: pct / 100.0,
                ..*scoring
            };
            Ok((pct, evaluate(pool, mlp, &s, shape, episodes, 1, seed)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ld(v: Vec<f64>) -> LocalDescriptor {
        LocalDescriptor::new(v).unwrap()
    }

    fn tiny_pool(classes: usize, images: usize) -> EpisodePool {
        let classes = (0..classes)
            .map(|c| PoolClass {
                label: format!("c{c}"),
                images: (0..images)
                    .map(|i| {
                        vec![
                            ld(vec![1.0 + c as f64, i as f64 + 0.5]),
                            ld(vec![0.5, c as f64 + 1.0]),
                        ]
                    })
                    .collect(),
            })
            .collect();
        EpisodePool::new(2, 2, Split::Train, classes).unwrap()
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert_eq!(cfg.lr_at(10), 1e-3);
        assert!((cfg.lr_at(11) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(30) - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn sample_exact_pool() {
        let pool = tiny_pool(2, 3);
        let shape = EpisodeShape {
            way: 2,
            shot: 2,
            queries: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&pool, shape, &mut rng).unwrap();
        assert_eq!(ep.queries().len(), 2);
        let mut total: Vec<f64> = ep
            .support()
            .iter()
            .flat_map(|s| s.descriptors().iter())
            .chain(ep.queries().iter().flat_map(|q| q.set.descriptors().iter()))
            .map(|l| l.values()[0] * 10.0 + l.values()[1])
            .collect();
        total.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = pool
            .classes()
            .iter()
            .flat_map(|c| c.images.iter().flatten())
            .map(|l| l.values()[0] * 10.0 + l.values()[1])
            .collect();
        want.sort_by(f64::total_cmp);
        assert_eq!(total, want);
    }

    #[test]
    fn sample_errors() {
        let pool = tiny_pool(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let too_wide = EpisodeShape {
            way: 4,
            shot: 1,
            queries: 1,
        };
        assert!(matches!(
            sample_episode(&pool, too_wide, &mut rng),
            Err(Error::PoolExhausted(_))
        ));
        let too_deep = EpisodeShape {
            way: 2,
            shot: 3,
            queries: 2,
        };
        assert!(matches!(
            sample_episode(&pool, too_deep, &mut rng),
            Err(Error::PoolExhausted(_))
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let pool = tiny_pool(6, 6);
        let shape = EpisodeShape {
            way: 3,
            shot: 2,
            queries: 2,
        };
        let a = sample_episode(&pool, shape, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_episode(&pool, shape, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_frequency_is_uniform() {
        let pool = tiny_pool(10, 2);
        let shape = EpisodeShape {
            way: 5,
            shot: 1,
            queries: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut hits = [0usize; 10];
        for _ in 0..1000 {
            let ep = sample_episode(&pool, shape, &mut rng).unwrap();
            let mut seen = std::collections::HashSet::new();
            for s in ep.support() {
                let c = s.descriptors()[0].values()[0] as usize - 1;
                assert!(seen.insert(c));
                hits[c] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / 1000.0;
            assert!((f - 0.5).abs() <= 0.05, "frequency {f}");
        }
    }

    #[test]
    fn disjoint_labels() {
        let a = tiny_pool(2, 2);
        let b = tiny_pool(2, 2).with_split(Split::Test);
        assert!(check_disjoint(&[&a, &b]).is_err());
        let mut c = tiny_pool(2, 2).with_split(Split::Test);
        c.classes.iter_mut().for_each(|k| k.label.push('x'));
        assert!(check_disjoint(&[&a, &c]).is_ok());
        assert!(EpisodePool::merge(vec![a.clone(), a], Split::Train).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamParams::default(), 2);
        let mut w = vec![1.0, -1.0];
        adam.step(&mut w, &[0.5, -2.0], 0.01);
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn eval_line_format() {
        let e = EpochLog {
            epoch: 3,
            mean_loss: 0.5,
            lr: 1e-4,
            seconds: 1.25,
        };
        assert_eq!(e.to_line(), "3\t5.000000e-1\t1e-4\t1.250");
    }
}
