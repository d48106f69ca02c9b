mod common;

use common::*;
use ldsel::cds::contrastive_scores;
use ldsel::gradcheck::{run_gradcheck, MAX_REL_ERROR};
use ldsel::oracle::{reference, run_oracle_suite, OracleEpisode, OracleMlp};
use ldsel::query::{DescriptorTerms, DiscScore, ThresholdMlp};
use ldsel::{
    episode_scores, loss_and_gradients, registry, select_top_k, DescriptorSet, Episode,
    LabeledQuery, Scoring,
};
use rand::Rng;

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Nested-loop CDS for every class.
fn brute_cds(classes: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for (i, x) in class.iter().enumerate() {
            let mut s = 0.0;
            for (j, y) in class.iter().enumerate() {
                if j != i {
                    s += naive_cos(x, y);
                }
            }
            intra.push(s / (class.len() - 1) as f64);
            let mut s = 0.0;
            let mut count = 0;
            for (o, other) in classes.iter().enumerate() {
                if o != c {
                    for y in other {
                        s += naive_cos(x, y);
                        count += 1;
                    }
                }
            }
            inter.push(s / count as f64);
        }
        let norm = |v: &[f64]| {
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            v.iter().map(|x| x.exp() / z).collect::<Vec<_>>()
        };
        let (di, de) = (norm(&intra), norm(&inter));
        out.push(
            di.iter()
                .zip(&de)
                .map(|(a, b)| 1.0 / (1.0 + (-(a / b)).exp()))
                .collect(),
        );
    }
    out
}

fn argsort_top(cds: &[f64], k: f64) -> Vec<usize> {
    let keep = ((k * cds.len() as f64).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..cds.len()).collect();
    idx.sort_by(|&a, &b| cds[b].partial_cmp(&cds[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(keep);
    idx
}

#[test]
fn cds_of_two_classes_matches_brute_force() {
    let mut r = rng(2024);
    let classes = random_classes(&mut r, 2, 4, 4);
    let got = contrastive_scores(&support_pool(&classes)).unwrap();
    let want = brute_cds(&classes);
    for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
    }
}

#[test]
fn cds_and_selection_match_brute_force_on_100_pools() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let (n, p, d) = random_pool_shape(&mut r);
        let classes = random_classes(&mut r, n, p, d);
        let pool = support_pool(&classes);
        let got = contrastive_scores(&pool).unwrap();
        let want = brute_cds(&classes);
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() <= 1e-12, "seed {seed}: {g} vs {w}");
        }
        for k in [0.01, 0.02, 0.05, 0.1, 0.25, 0.3, 1.0] {
            let sel = select_top_k(&pool, k).unwrap();
            for (c, w) in want.iter().enumerate() {
                assert_eq!(
                    sel.indices(c),
                    argsort_top(w, k),
                    "seed {seed}, class {c}, K={k}"
                );
            }
        }
    }
}

fn episode_from(support: &[Vec<Vec<Vec<f64>>>], queries: &[(Vec<Vec<f64>>, usize)]) -> Episode {
    let support = support
        .iter()
        .map(|images| {
            let imgs: Vec<Vec<_>> = images
                .iter()
                .map(|img| img.iter().map(|v| ld(v)).collect())
                .collect();
            DescriptorSet::from_images(&imgs).unwrap()
        })
        .collect();
    let queries = queries
        .iter()
        .map(|(img, label)| LabeledQuery {
            set: DescriptorSet::new(img.iter().map(|v| ld(v)).collect(), 1, img.len()).unwrap(),
            label: *label,
        })
        .collect();
    Episode::new(support, queries).unwrap()
}

#[test]
fn two_way_episode_matches_oracle_in_both_forms() {
    let mut r = rng(11);
    let (m, d) = (4, 4);
    let support: Vec<Vec<Vec<Vec<f64>>>> = (0..2)
        .map(|_| vec![(0..m).map(|_| random_vec(&mut r, d)).collect()])
        .collect();
    let queries: Vec<(Vec<Vec<f64>>, usize)> = (0..2)
        .map(|label| ((0..m).map(|_| random_vec(&mut r, d)).collect(), label))
        .collect();
    let episode = episode_from(&support, &queries);
    let raw = OracleEpisode { support, queries };
    let mlp = ThresholdMlp::init(d, 5, &mut r);
    for form in registry::score_rule_names() {
        for mode in registry::pooling_names() {
            let scoring = Scoring::named(0.5, 20.0, form, mode).unwrap();
            let got = scoring.evaluate(&episode, &mlp).unwrap();
            let want = reference(&raw, &OracleMlp::from_mlp(&mlp), 0.5, 20.0, mode, form);
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
            for (q, res) in got.queries.iter().enumerate() {
                for (i, t) in res.terms.iter().enumerate() {
                    assert!(close(&t.sims, &want.sims[q][i]), "{form}/{mode} sims");
                    assert!(
                        (t.disc.value - want.disc[q][i]).abs() <= 1e-12,
                        "{form}/{mode} D"
                    );
                    assert!(
                        (t.threshold - want.threshold[q][i]).abs() <= 1e-12,
                        "{form}/{mode} V"
                    );
                    assert!(
                        (t.weight - want.weight[q][i]).abs() <= 1e-12,
                        "{form}/{mode} M"
                    );
                }
                assert!(close(&res.scores, &want.scores[q]), "{form}/{mode} scores");
                assert!(
                    close(&res.posterior, &want.posterior[q]),
                    "{form}/{mode} posterior"
                );
            }
            assert!((got.loss - want.loss).abs() <= 1e-12, "{form}/{mode} loss");
        }
    }
}

#[test]
fn oracle_suite_over_100_cases() {
    let report = run_oracle_suite(5, 100).unwrap();
    assert!(report.passed(), "{report}");
}

/// Class 0 is `e0, e1`; class 1 is `e2, e3`; one shot, two positions.
fn basis_episode(query: Vec<Vec<f64>>) -> Episode {
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    episode_from(
        &[vec![vec![e(0), e(1)]], vec![vec![e(2), e(3)]]],
        &[(query, 0)],
    )
}

#[test]
fn query_matching_one_class_prefers_it() {
    let episode = basis_episode(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
    let scoring = Scoring::named(1.0, 20.0, "weighted-sim", "raw").unwrap();
    let eval = scoring
        .evaluate(&episode, &ThresholdMlp::zeros(4, 3))
        .unwrap();
    assert_eq!(eval.queries[0].predicted(), 0);
    assert!(eval.loss < 2f64.ln());
}

#[test]
fn vanishing_weight_gives_uniform_posterior() {
    // V = sigmoid(60) rounds to 1 and lambda is huge, so M underflows to 0.
    let mut mlp = ThresholdMlp::zeros(4, 2);
    let mut p = mlp.flat_params();
    *p.last_mut().unwrap() = 60.0;
    mlp.set_flat_params(&p);
    let episode = episode_from(
        &[
            vec![
                vec![vec![1.0, 0.2, 0.0, 0.0]],
                vec![vec![0.9, 0.0, 0.1, 0.0]],
            ],
            vec![
                vec![vec![0.0, 0.0, 1.0, 0.3]],
                vec![vec![0.0, 0.1, 1.0, 0.0]],
            ],
        ],
        &[(vec![vec![1.0, 0.5, 0.5, 0.0]], 0)],
    );
    let scoring = Scoring::named(1.0, 1e4, "weighted-sim", "raw").unwrap();
    let selection = scoring.select(&episode).unwrap();
    let eval = episode_scores(&episode, &selection, &mlp, 1e4, scoring.rule).unwrap();
    let q = &eval.queries[0];
    assert_eq!(q.terms[0].weight, 0.0);
    assert_eq!(q.scores, vec![0.0, 0.0]);
    assert_eq!(q.posterior, vec![0.5, 0.5]);
    assert_eq!(eval.loss, 2f64.ln());
}

#[test]
fn zero_weight_descriptor_leaves_weighted_scores_unchanged() {
    let rule = registry::score_rule("weighted-sim").unwrap();
    let mut r = rng(3);
    let term = |r: &mut rand_chacha::ChaCha8Rng, weight: f64| DescriptorTerms {
        sims: (0..4).map(|_| r.random_range(-3.0..3.0)).collect(),
        disc: DiscScore {
            value: 0.4,
            class: 1,
            degenerate: false,
        },
        threshold: 0.5,
        weight,
    };
    let mut terms: Vec<_> = (0..6)
        .map(|_| {
            let w = r.random_range(0.0..1.0);
            term(&mut r, w)
        })
        .collect();
    let before = rule.class_scores(&terms, 4);
    terms.insert(2, term(&mut r, 0.0));
    assert_eq!(rule.class_scores(&terms, 4), before);
}

#[test]
fn symmetric_episode_with_zero_network() {
    // Every class holds the same descriptors, so every class score ties.
    let mut r = rng(8);
    let shared: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut r, 5)).collect();
    let query: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut r, 5)).collect();
    let n = 4;
    let support: Vec<_> = (0..n).map(|_| vec![shared.clone()]).collect();
    let queries: Vec<_> = (0..n).map(|label| (query.clone(), label)).collect();
    let episode = episode_from(&support, &queries);
    let scoring = Scoring::named(0.5, 20.0, "weighted-sim", "raw").unwrap();
    let selection = scoring.select(&episode).unwrap();
    let g = loss_and_gradients(&episode, &selection, &ThresholdMlp::zeros(5, 4), &scoring).unwrap();
    assert!((g.loss - (n as f64).ln()).abs() <= 1e-9, "{}", g.loss);
    assert!(g.flat.last().unwrap().is_finite());
}

#[test]
fn zero_lambda_kills_every_gradient() {
    let mut r = rng(21);
    for _ in 0..10 {
        let inst = ldsel::oracle::random_instance(&mut r, 2).unwrap();
        let scoring = Scoring::named(inst.k_fraction, 0.0, "weighted-sim", inst.mode).unwrap();
        let selection = scoring.select(&inst.episode).unwrap();
        let g = loss_and_gradients(&inst.episode, &selection, &inst.mlp, &scoring).unwrap();
        assert!(g.flat.iter().all(|v| *v == 0.0), "{:?}", g.flat);
    }
}

#[test]
fn gradient_loss_equals_episode_loss() {
    let mut r = rng(31);
    for _ in 0..10 {
        let inst = ldsel::oracle::random_instance(&mut r, 2).unwrap();
        let scoring = Scoring::named(inst.k_fraction, inst.lambda, inst.form, inst.mode).unwrap();
        let selection = scoring.select(&inst.episode).unwrap();
        let g = loss_and_gradients(&inst.episode, &selection, &inst.mlp, &scoring).unwrap();
        let e = episode_scores(
            &inst.episode,
            &selection,
            &inst.mlp,
            scoring.lambda,
            scoring.rule,
        )
        .unwrap();
        assert_eq!(g.loss.to_bits(), e.loss.to_bits());
    }
}

#[test]
fn gradients_match_central_differences() {
    for seed in [0, 1, 2] {
        let report = run_gradcheck(seed, 20).unwrap();
        assert!(report.max_rel_error() < MAX_REL_ERROR, "{report}");
    }
}

#[test]
fn huge_lambda_saturates_weights() {
    let mut r = rng(99);
    for _ in 0..20 {
        let inst = ldsel::oracle::random_instance(&mut r, 2).unwrap();
        let scoring = Scoring::named(inst.k_fraction, 1e4, inst.form, inst.mode).unwrap();
        let eval = scoring.evaluate(&inst.episode, &inst.mlp).unwrap();
        for t in eval.queries.iter().flat_map(|q| &q.terms) {
            if (t.disc.value - t.threshold).abs() >= 1e-3 {
                assert!(t.weight.min(1.0 - t.weight) <= 1e-3, "{t:?}");
            }
        }
    }
}
