//! Central-difference check of the analytic threshold-network gradients.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::oracle::{random_instance, Instance};
use crate::pipeline::Scoring;
use crate::query::{episode_scores, pooled_context, threshold_input};
use crate::registry;
use crate::train::loss_and_gradients;

pub const STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)`.
pub const FLOOR: f64 = 1e-6;
/// Instances with a hidden pre-activation closer than this to the leaky-ReLU
/// kink are redrawn; a perturbation of size STEP cannot cross it.
const KINK_MARGIN: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub params: usize,
    pub max_rel_error: f64,
    /// Flat parameter index with the largest error.
    pub worst_param: usize,
    pub form: &'static str,
    pub mode: &'static str,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < MAX_REL_ERROR
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "case\tform\tmode\tparams\tmax_rel_error\tworst_param")?;
        for (i, c) in self.cases.iter().enumerate() {
            writeln!(
                f,
                "{i}\t{}\t{}\t{}\t{:.3e}\t{}",
                c.form, c.mode, c.params, c.max_rel_error, c.worst_param
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} over {} cases in {:.3}s: {}",
            self.max_rel_error(),
            self.cases.len(),
            self.seconds,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn clear_of_kinks(inst: &Instance, scoring: &Scoring) -> Result<bool> {
    let selection = scoring.select(&inst.episode)?;
    let context = pooled_context(&selection)?;
    for q in inst.episode.queries() {
        for lq in q.set.descriptors() {
            let pre = inst.mlp.hidden_pre(&threshold_input(lq, &context)?);
            if pre.iter().any(|p| p.abs() < KINK_MARGIN) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Compares analytic and central-difference gradients for one instance.
pub fn check_instance(inst: &Instance, scoring: &Scoring) -> Result<CaseResult> {
    let selection = scoring.select(&inst.episode)?;
    let grads = loss_and_gradients(&inst.episode, &selection, &inst.mlp, scoring)?;
    let base = inst.mlp.flat_params();
    let mut probe = inst.mlp.clone();
    let mut loss_at = |params: &[f64]| -> Result<f64> {
        probe.set_flat_params(params);
        Ok(episode_scores(
            &inst.episode,
            &selection,
            &probe,
            scoring.lambda,
            scoring.rule,
        )?
        .loss)
    };
    let mut worst = (0.0, 0);
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + STEP;
        let up = loss_at(&params)?;
        params[i] = base[i] - STEP;
        let down = loss_at(&params)?;
        params[i] = base[i];
        let numeric = (up - down) / (2.0 * STEP);
        let err = relative_error(grads.flat[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
        }
    }
    Ok(CaseResult {
        params: base.len(),
        max_rel_error: worst.0,
        worst_param: worst.1,
        form: inst.form,
        mode: inst.mode,
    })
}

/// Runs `cases` random instances (n <= 5, k <= 2, m <= 6, d <= 8, two
/// queries per class, fresh random parameters each).
pub fn run_gradcheck(seed: u64, cases: usize) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    while out.len() < cases {
        let inst = random_instance(&mut rng, 2)?;
        let scoring = Scoring {
            k_fraction: inst.k_fraction,
            lambda: inst.lambda,
            rule: registry::score_rule(inst.form)?,
            pooling: registry::pooling(inst.mode)?,
        };
        if !clear_of_kinks(&inst, &scoring)? {
            continue;
        }
        out.push(check_instance(&inst, &scoring)?);
    }
    Ok(GradcheckReport {
        cases: out,
        seconds: started.elapsed().as_secs_f64(),
    })
}
