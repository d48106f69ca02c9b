//! Brute-force reference for the whole scoring pipeline and the suite that
//! compares it against the library on random small instances.
//!
//! The reference works on plain nested `Vec<f64>` and recomputes everything
//! with nested loops: cosine from raw components, softmax without max
//! subtraction, the threshold network as straight-line arithmetic. It shares
//! no code with the library beyond reading the random parameters.

// Index loops are the point here: they mirror the formulas term by term.
#![allow(clippy::needless_range_loop)]

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cds::contrastive_breakdown;
use crate::descriptor::{DescriptorSet, Episode, LabeledQuery, LocalDescriptor};
use crate::error::Result;
use crate::pipeline::Scoring;
use crate::query::{episode_scores, ThresholdMlp};
use crate::registry;

pub const TOLERANCE: f64 = 1e-12;

type Vector = Vec<f64>;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn naive_softmax(x: &[f64]) -> Vector {
    let mut total = 0.0;
    for v in x {
        total += v.exp();
    }
    x.iter().map(|v| v.exp() / total).collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn unit(v: &[f64]) -> Vector {
    let mut n = 0.0;
    for x in v {
        n += x * x;
    }
    let n = n.sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Raw episode data: `support[c][image][position]`, `queries[q] = (image, label)`.
#[derive(Debug, Clone)]
pub struct OracleEpisode {
    pub support: Vec<Vec<Vec<Vector>>>,
    pub queries: Vec<(Vec<Vector>, usize)>,
}

/// Plain copies of the threshold network parameters.
#[derive(Debug, Clone)]
pub struct OracleMlp {
    pub w1: Vec<Vector>,
    pub b1: Vector,
    pub w2: Vector,
    pub b2: f64,
}

impl OracleMlp {
    pub fn from_mlp(mlp: &ThresholdMlp) -> Self {
        Self {
            w1: mlp
                .w1()
                .chunks(mlp.input_dim())
                .map(<[f64]>::to_vec)
                .collect(),
            b1: mlp.b1().to_vec(),
            w2: mlp.w2().to_vec(),
            b2: mlp.b2(),
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let mut z = self.b2;
        for h in 0..self.b1.len() {
            let mut pre = self.b1[h];
            for j in 0..x.len() {
                pre += self.w1[h][j] * x[j];
            }
            let act = if pre > 0.0 { pre } else { 0.01 * pre };
            z += self.w2[h] * act;
        }
        z
    }
}

/// Every intermediate the reference computes.
#[derive(Debug, Clone, Default)]
pub struct OracleOutput {
    pub intra: Vec<Vector>,
    pub inter: Vec<Vector>,
    pub d_intra: Vec<Vector>,
    pub d_inter: Vec<Vector>,
    pub cds: Vec<Vector>,
    pub selected: Vec<Vec<usize>>,
    /// Per query, per descriptor.
    pub sims: Vec<Vec<Vector>>,
    pub disc: Vec<Vector>,
    pub threshold: Vec<Vector>,
    pub weight: Vec<Vector>,
    pub scores: Vec<Vector>,
    pub posterior: Vec<Vector>,
    pub loss: f64,
}

/// Reference evaluation of one episode. `mode` is `raw` or `class-mean`,
/// `form` is `weighted-sim` or `literal`.
pub fn reference(
    ep: &OracleEpisode,
    mlp: &OracleMlp,
    k_fraction: f64,
    lambda: f64,
    mode: &str,
    form: &str,
) -> OracleOutput {
    let n = ep.support.len();
    let pools: Vec<Vec<Vector>> = ep
        .support
        .iter()
        .map(|images| {
            if mode == "class-mean" {
                let k = images.len();
                let m = images[0].len();
                let d = images[0][0].len();
                let mut out = Vec::new();
                for j in 0..m {
                    let mut v = vec![0.0; d];
                    for img in images {
                        for t in 0..d {
                            v[t] += img[j][t];
                        }
                    }
                    if k > 1 {
                        for t in 0..d {
                            v[t] /= k as f64;
                        }
                    }
                    out.push(v);
                }
                out
            } else {
                images.iter().flatten().cloned().collect()
            }
        })
        .collect();

    let mut out = OracleOutput::default();
    for c in 0..n {
        let p = pools[c].len();
        let mut intra = vec![0.0; p];
        let mut inter = vec![0.0; p];
        for i in 0..p {
            let mut s = 0.0;
            for j in 0..p {
                if j != i {
                    s += cos(&pools[c][i], &pools[c][j]);
                }
            }
            intra[i] = s / (p - 1) as f64;
            let mut s = 0.0;
            let mut count = 0;
            for o in 0..n {
                if o == c {
                    continue;
                }
                for l in &pools[o] {
                    s += cos(&pools[c][i], l);
                    count += 1;
                }
            }
            inter[i] = s / count as f64;
        }
        let di = naive_softmax(&intra);
        let de = naive_softmax(&inter);
        let cds: Vector = (0..p).map(|i| logistic(di[i] / de[i])).collect();
        let mut order: Vec<usize> = (0..p).collect();
        // insertion sort: higher score first, lower index on ties
        for a in 1..p {
            let mut b = a;
            while b > 0 && cds[order[b]] > cds[order[b - 1]] {
                order.swap(b, b - 1);
                b -= 1;
            }
        }
        let mut take = (k_fraction * p as f64).round() as usize;
        if take < 1 {
            take = 1;
        }
        order.truncate(take);
        out.intra.push(intra);
        out.inter.push(inter);
        out.d_intra.push(di);
        out.d_inter.push(de);
        out.cds.push(cds);
        out.selected.push(order);
    }

    let d = pools[0][0].len();
    let mut ctx = vec![0.0; d];
    let mut count = 0.0;
    for c in 0..n {
        for &i in &out.selected[c] {
            let u = unit(&pools[c][i]);
            for t in 0..d {
                ctx[t] += u[t];
            }
            count += 1.0;
        }
    }
    for t in 0..d {
        ctx[t] /= count;
    }
    let ctx = unit(&ctx);

    let mut loss = 0.0;
    for (image, label) in &ep.queries {
        let mut q_sims = Vec::new();
        let mut q_disc = Vec::new();
        let mut q_thr = Vec::new();
        let mut q_w = Vec::new();
        let mut q_class = Vec::new();
        for lq in image {
            let mut sims = vec![0.0; n];
            for c in 0..n {
                for &i in &out.selected[c] {
                    sims[c] += cos(lq, &pools[c][i]);
                }
            }
            let mut total = 0.0;
            let mut mag = 0.0;
            for s in &sims {
                total += s;
                mag += s.abs();
            }
            let (disc, class) = if mag == 0.0 || total.abs() <= 1e-12 * mag {
                let mut best = 0;
                for c in 1..n {
                    if sims[c] > sims[best] {
                        best = c;
                    }
                }
                (1.0 / n as f64, best)
            } else {
                let mut best = 0;
                for c in 1..n {
                    if sims[c] / total > sims[best] / total {
                        best = c;
                    }
                }
                (sims[best] / total, best)
            };
            let mut x = unit(lq);
            x.extend_from_slice(&ctx);
            let v = logistic(mlp.eval(&x));
            let w = logistic(lambda * (disc - v));
            q_sims.push(sims);
            q_disc.push(disc);
            q_thr.push(v);
            q_w.push(w);
            q_class.push(class);
        }
        let mut scores = vec![0.0; n];
        for i in 0..image.len() {
            if form == "literal" {
                scores[q_class[i]] += q_thr[i] * q_w[i];
            } else {
                for c in 0..n {
                    scores[c] += q_w[i] * q_sims[i][c];
                }
            }
        }
        let post = naive_softmax(&scores);
        loss += -post[*label].ln();
        out.sims.push(q_sims);
        out.disc.push(q_disc);
        out.threshold.push(q_thr);
        out.weight.push(q_w);
        out.scores.push(scores);
        out.posterior.push(post);
    }
    out.loss = loss / ep.queries.len() as f64;
    out
}

/// A random instance in both representations.
#[derive(Debug, Clone)]
pub struct Instance {
    pub raw: OracleEpisode,
    pub episode: Episode,
    pub mlp: ThresholdMlp,
    pub k_fraction: f64,
    pub lambda: f64,
    pub mode: &'static str,
    pub form: &'static str,
}

const K_GRID: [f64; 7] = [0.01, 0.02, 0.05, 0.1, 0.25, 0.3, 1.0];

/// Random small instance: n <= 5, k <= 2, m <= 6, d <= 8.
pub fn random_instance(rng: &mut ChaCha8Rng, queries_per_class: usize) -> Result<Instance> {
    let n = rng.random_range(2..=5);
    let k = rng.random_range(1..=2);
    let m = rng.random_range(2..=6);
    let d = rng.random_range(2..=8);
    // Non-negative components, like rectified feature maps, keep the summed
    // class similarities positive and the discriminative ratio in (0, 1].
    let draw =
        |rng: &mut ChaCha8Rng| -> Vector { (0..d).map(|_| rng.random_range(0.0..1.0)).collect() };
    let support: Vec<Vec<Vec<Vector>>> = (0..n)
        .map(|_| {
            (0..k)
                .map(|_| (0..m).map(|_| draw(rng)).collect())
                .collect()
        })
        .collect();
    let mut queries = Vec::new();
    for label in 0..n {
        for _ in 0..queries_per_class {
            queries.push(((0..m).map(|_| draw(rng)).collect::<Vec<_>>(), label));
        }
    }
    let hidden = rng.random_range(1..=8);
    let mlp = ThresholdMlp::init(d, hidden, rng);
    let k_fraction = if rng.random_bool(0.5) {
        K_GRID[rng.random_range(0..K_GRID.len())]
    } else {
        rng.random_range(0.01..=1.0)
    };
    let lambda = rng.random_range(1.0..50.0);
    let mode = if rng.random_bool(0.5) {
        "raw"
    } else {
        "class-mean"
    };
    let form = if rng.random_bool(0.5) {
        "weighted-sim"
    } else {
        "literal"
    };

    let to_ld = |v: &Vector| LocalDescriptor::new(v.clone());
    let sets = support
        .iter()
        .map(|images| {
            let imgs = images
                .iter()
                .map(|img| img.iter().map(to_ld).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            DescriptorSet::from_images(&imgs)
        })
        .collect::<Result<Vec<_>>>()?;
    let qs = queries
        .iter()
        .map(|(img, label)| {
            let ds = img.iter().map(to_ld).collect::<Result<Vec<_>>>()?;
            Ok(LabeledQuery {
                set: DescriptorSet::new(ds, 1, m)?,
                label: *label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Instance {
        raw: OracleEpisode { support, queries },
        episode: Episode::new(sets, qs)?,
        mlp,
        k_fraction,
        lambda,
        mode,
        form,
    })
}

/// Compared quantities, in pipeline order.
pub const QUANTITIES: [&str; 12] = [
    "intra_similarity",
    "inter_similarity",
    "softmax_intra",
    "softmax_inter",
    "cds",
    "class_similarity",
    "disc_score",
    "threshold",
    "weights_map",
    "class_score",
    "posterior",
    "loss",
];

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub cases: usize,
    /// Max absolute deviation per entry of [`QUANTITIES`].
    pub max_dev: Vec<(&'static str, f64)>,
    /// Cases whose top-K index sets differ.
    pub selection_mismatches: usize,
    pub seconds: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.selection_mismatches == 0 && self.max_dev.iter().all(|(_, d)| *d <= TOLERANCE)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        let mut out: Vec<_> = self
            .max_dev
            .iter()
            .filter(|(_, d)| *d > TOLERANCE)
            .map(|(n, _)| *n)
            .collect();
        if self.selection_mismatches > 0 {
            out.push("top_k");
        }
        out
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "quantity\tmax_abs_dev\tstatus")?;
        for (name, dev) in &self.max_dev {
            let status = if *dev <= TOLERANCE { "ok" } else { "FAIL" };
            writeln!(f, "{name}\t{dev:.3e}\t{status}")?;
        }
        let status = if self.selection_mismatches == 0 {
            "ok"
        } else {
            "FAIL"
        };
        writeln!(
            f,
            "top_k\t{} mismatched cases\t{status}",
            self.selection_mismatches
        )?;
        write!(
            f,
            "{} cases in {:.3}s: {}",
            self.cases,
            self.seconds,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn max_abs(a: &[f64], b: &[f64], acc: &mut f64) {
    if a.len() != b.len() {
        *acc = f64::INFINITY;
        return;
    }
    for (x, y) in a.iter().zip(b) {
        let d = (x - y).abs();
        if d.is_nan() || d > *acc {
            *acc = if d.is_nan() { f64::INFINITY } else { d };
        }
    }
}

/// Library outputs may be altered by `tamper(quantity, values)` before the
/// comparison; mutation tests use it to check the suite's sensitivity.
pub fn run_oracle_suite_with(
    seed: u64,
    cases: usize,
    tamper: &dyn Fn(&str, &mut [f64]),
) -> Result<OracleReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev = [0.0f64; QUANTITIES.len()];
    let mut selection_mismatches = 0;
    for _ in 0..cases {
        let inst = random_instance(&mut rng, 2)?;
        let want = reference(
            &inst.raw,
            &OracleMlp::from_mlp(&inst.mlp),
            inst.k_fraction,
            inst.lambda,
            inst.mode,
            inst.form,
        );
        let scoring = Scoring {
            k_fraction: inst.k_fraction,
            lambda: inst.lambda,
            rule: registry::score_rule(inst.form)?,
            pooling: registry::pooling(inst.mode)?,
        };
        let pool = scoring.pooling.build(inst.episode.support())?;
        let breakdown = contrastive_breakdown(&pool)?;
        for (c, b) in breakdown.into_iter().enumerate() {
            let mut fields = [b.intra, b.inter, b.d_intra, b.d_inter, b.cds];
            let refs = [
                &want.intra[c],
                &want.inter[c],
                &want.d_intra[c],
                &want.d_inter[c],
                &want.cds[c],
            ];
            for (qi, (got, r)) in fields.iter_mut().zip(refs).enumerate() {
                tamper(QUANTITIES[qi], got);
                max_abs(got, r, &mut dev[qi]);
            }
        }
        let selection = scoring.select(&inst.episode)?;
        if (0..selection.way()).any(|c| selection.indices(c) != want.selected[c]) {
            selection_mismatches += 1;
        }
        let eval = episode_scores(
            &inst.episode,
            &selection,
            &inst.mlp,
            scoring.lambda,
            scoring.rule,
        )?;
        for (qi, res) in eval.queries.iter().enumerate() {
            for (i, t) in res.terms.iter().enumerate() {
                let mut sims = t.sims.clone();
                tamper("class_similarity", &mut sims);
                max_abs(&sims, &want.sims[qi][i], &mut dev[5]);
            }
            let per_desc = [
                (
                    6,
                    res.terms.iter().map(|t| t.disc.value).collect::<Vec<_>>(),
                    &want.disc[qi],
                ),
                (
                    7,
                    res.terms.iter().map(|t| t.threshold).collect(),
                    &want.threshold[qi],
                ),
                (
                    8,
                    res.terms.iter().map(|t| t.weight).collect(),
                    &want.weight[qi],
                ),
                (9, res.scores.clone(), &want.scores[qi]),
                (10, res.posterior.clone(), &want.posterior[qi]),
            ];
            for (slot, mut got, r) in per_desc {
                tamper(QUANTITIES[slot], &mut got);
                max_abs(&got, r, &mut dev[slot]);
            }
        }
        let mut loss = [eval.loss];
        tamper("loss", &mut loss);
        max_abs(&loss, &[want.loss], &mut dev[11]);
    }
    Ok(OracleReport {
        cases,
        max_dev: QUANTITIES.iter().copied().zip(dev).collect(),
        selection_mismatches,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_oracle_suite(seed: u64, cases: usize) -> Result<OracleReport> {
    run_oracle_suite_with(seed, cases, &|_, _| {})
}
