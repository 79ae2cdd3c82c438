//! Persistence statistics for luck-based fork choice.
//!
//! After a fork, each round the majority side (M participants) adds the
//! maximum of M uniform draws and the minority side (m participants) the
//! maximum of m draws. `L(h)` is the cumulative difference over h rounds;
//! the minority overtakes when `L(h) <= 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::node::ParticipantId;
use crate::simnet::EventTrace;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("majority ({majority}) must exceed minority ({minority}) and minority must be at least 1")]
    Populations { majority: u32, minority: u32 },
    #[error("h must be at least 1")]
    ZeroDepth,
    #[error("trials must be at least 1")]
    ZeroTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersistenceQuery {
    pub majority: u32,
    pub minority: u32,
    pub h: u32,
    pub trials: u64,
    pub seed: u64,
}

impl PersistenceQuery {
    pub fn validate(&self) -> Result<(), StatsError> {
        check_populations(self.majority, self.minority)?;
        if self.h == 0 {
            return Err(StatsError::ZeroDepth);
        }
        if self.trials == 0 {
            return Err(StatsError::ZeroTrials);
        }
        Ok(())
    }
}

fn check_populations(majority: u32, minority: u32) -> Result<(), StatsError> {
    if minority == 0 || majority <= minority {
        return Err(StatsError::Populations { majority, minority });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PersistenceResult {
    /// Fraction of trials with `L(h) <= 0`.
    pub p_hat: f64,
    /// Three binomial standard deviations of `p_hat`.
    pub ci_halfwidth: f64,
    pub chernoff_rho: f64,
    /// `chernoff_rho^h`.
    pub chernoff_bound: f64,
    pub s_star: f64,
}

/// One row of the persistence CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PersistenceRow {
    #[serde(rename = "M")]
    pub majority: u32,
    #[serde(rename = "m")]
    pub minority: u32,
    pub h: u32,
    pub trials: u64,
    pub p_hat: f64,
    pub ci: f64,
    pub rho: f64,
    pub bound: f64,
    pub s_star: f64,
}

/// Maximum of `n` independent uniforms, by inversion of its CDF `x^n`.
fn max_uniform(rng: &mut ChaCha20Rng, n: u32) -> f64 {
    let u: f64 = rng.random();
    if n == 1 {
        u
    } else {
        u.powf(1.0 / n as f64)
    }
}

/// Whether trial `index` ends with the minority at least as lucky.
fn minority_overtakes(q: &PersistenceQuery, index: u64) -> bool {
    // Each trial owns a ChaCha stream, so results do not depend on how
    // trials are split across threads.
    let mut rng = ChaCha20Rng::seed_from_u64(q.seed);
    rng.set_stream(index);
    let mut l = 0.0;
    for _ in 0..q.h {
        l += max_uniform(&mut rng, q.majority) - max_uniform(&mut rng, q.minority);
    }
    l <= 0.0
}

/// Count of overtaking trials, on `threads` workers (None = rayon default).
pub fn mc_overtakes(q: &PersistenceQuery, threads: Option<usize>) -> Result<u64, StatsError> {
    q.validate()?;
    let count = || (0..q.trials).into_par_iter().filter(|&i| minority_overtakes(q, i)).count() as u64;
    Ok(match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(count),
        None => count(),
    })
}

pub fn mc_persistence(q: &PersistenceQuery) -> Result<PersistenceResult, StatsError> {
    mc_persistence_threads(q, None)
}

pub fn mc_persistence_threads(q: &PersistenceQuery, threads: Option<usize>) -> Result<PersistenceResult, StatsError> {
    let hits = mc_overtakes(q, threads)?;
    let p_hat = hits as f64 / q.trials as f64;
    let (rho, s_star) = chernoff_rho(q.majority, q.minority)?;
    Ok(PersistenceResult {
        p_hat,
        ci_halfwidth: 3.0 * (p_hat * (1.0 - p_hat) / q.trials as f64).sqrt(),
        chernoff_rho: rho,
        chernoff_bound: rho.powi(q.h as i32),
        s_star,
    })
}

/// Rows for each depth in `hs`.
pub fn persistence_table(
    majority: u32,
    minority: u32,
    hs: &[u32],
    trials: u64,
    seed: u64,
    threads: Option<usize>,
) -> Result<Vec<PersistenceRow>, StatsError> {
    hs.iter()
        .map(|&h| {
            let q = PersistenceQuery { majority, minority, h, trials, seed };
            let r = mc_persistence_threads(&q, threads)?;
            Ok(PersistenceRow {
                majority,
                minority,
                h,
                trials,
                p_hat: r.p_hat,
                ci: r.ci_halfwidth,
                rho: r.chernoff_rho,
                bound: r.chernoff_bound,
                s_star: r.s_star,
            })
        })
        .collect()
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, m: f64, fm: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let (lm, flm, left) = simpson(f, a, fa, m, fm);
    let (rm, frm, right) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
}

/// `E[exp(s X)]` for X the maximum of n uniforms: `n ∫_0^1 x^(n-1) e^(sx) dx`
/// by adaptive Simpson quadrature to relative error 1e-10.
pub fn mgf_max_uniform(n: u32, s: f64) -> f64 {
    assert!(n >= 1, "n must be at least 1");
    if s == 0.0 {
        return 1.0;
    }
    let k = (n - 1) as i32;
    let f = |x: f64| n as f64 * x.powi(k) * (s * x).exp();
    // A coarse pass over fixed panels sets the absolute tolerance from the
    // size of the integral, then each panel is refined on its own.
    const PANELS: usize = 64;
    let panels: Vec<_> = (0..PANELS)
        .map(|i| {
            let (a, b) = (i as f64 / PANELS as f64, (i + 1) as f64 / PANELS as f64);
            let (fa, fb) = (f(a), f(b));
            let (m, fm, whole) = simpson(&f, a, fa, b, fb);
            (a, fa, b, fb, m, fm, whole)
        })
        .collect();
    let coarse: f64 = panels.iter().map(|p| p.6).sum();
    let tol = 1e-12 * coarse.abs() / PANELS as f64;
    panels
        .into_iter()
        .map(|(a, fa, b, fb, m, fm, whole)| adaptive(&f, a, fa, b, fb, m, fm, whole, tol, 40))
        .sum()
}

/// The same expectation by its power series `n Σ s^k / (k! (n+k))`.
/// Accurate for moderate |s|; used as an independent check.
pub fn mgf_max_uniform_series(n: u32, s: f64) -> f64 {
    assert!(n >= 1, "n must be at least 1");
    let n = n as f64;
    let mut term = 1.0; // s^k / k!
    let mut sum = 0.0;
    for k in 0..2000 {
        let add = term / (n + k as f64);
        sum += add;
        if k as f64 > s.abs() && add.abs() < 1e-18 * sum.abs() {
            break;
        }
        term *= s / (k + 1) as f64;
    }
    n * sum
}

fn log_g(majority: u32, minority: u32, s: f64) -> f64 {
    mgf_max_uniform(majority, -s).ln() + mgf_max_uniform(minority, s).ln()
}

/// Minimize `g(s) = E[e^{-s lM}] E[e^{s lm}]` over s > 0. Returns `(rho, s_star)`.
pub fn chernoff_rho(majority: u32, minority: u32) -> Result<(f64, f64), StatsError> {
    check_populations(majority, minority)?;
    // g(0) = 1 and g decreases at 0; grow the bracket until g is back above 1.
    let mut hi = 1.0;
    while log_g(majority, minority, hi) < 0.0 {
        hi *= 2.0;
        assert!(hi < 1e4, "no upper bracket for the Chernoff minimizer");
    }
    let mut lo = 0.0;
    while hi - lo > 1e-9 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if log_g(majority, minority, a) <= log_g(majority, minority, b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let s = 0.5 * (lo + hi);
    Ok((log_g(majority, minority, s).exp(), s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Share {
    pub share: f64,
    pub expected: f64,
    /// Normalized binomial deviation of `share` from `expected`.
    pub z: f64,
    pub blocks: usize,
}

/// Fraction of the reference chain's blocks won by `group`.
pub fn proportional_share(trace: &EventTrace, group: &[ParticipantId]) -> Share {
    let population = trace.finals.len().max(1);
    let blocks = trace.rounds.iter().filter(|r| r.winner.is_some()).count();
    let won = trace
        .rounds
        .iter()
        .filter(|r| r.winner.is_some_and(|w| group.contains(&w)))
        .count();
    let share = if blocks == 0 { 0.0 } else { won as f64 / blocks as f64 };
    let expected = group.len() as f64 / population as f64;
    let sd = (expected * (1.0 - expected) / blocks.max(1) as f64).sqrt();
    let z = if sd > 0.0 { (share - expected) / sd } else { 0.0 };
    Share { share, expected, z, blocks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;
    use crate::simnet::run;

    #[test]
    fn preconditions() {
        let q = PersistenceQuery { majority: 2, minority: 2, h: 1, trials: 10, seed: 0 };
        assert!(matches!(mc_persistence(&q), Err(StatsError::Populations { .. })));
        assert_eq!(mc_persistence(&PersistenceQuery { trials: 0, majority: 3, ..q }), Err(StatsError::ZeroTrials));
        assert_eq!(mc_persistence(&PersistenceQuery { h: 0, majority: 3, ..q }), Err(StatsError::ZeroDepth));
        assert!(chernoff_rho(1, 1).is_err());
    }

    #[test]
    fn mgf_closed_forms() {
        assert!((mgf_max_uniform(1, 1.0) - (std::f64::consts::E - 1.0)).abs() < 1e-9);
        assert!((mgf_max_uniform(2, 1.0) - 2.0).abs() < 1e-9);
        assert_eq!(mgf_max_uniform(7, 0.0), 1.0);
        // n=1: (e^s - 1)/s for any s.
        for s in [-3.0f64, -0.5, 0.25, 4.0] {
            assert!((mgf_max_uniform(1, s) - s.exp_m1() / s).abs() < 1e-9);
        }
    }

    #[test]
    fn mgf_quadrature_matches_series() {
        for n in [1, 2, 5, 12, 40] {
            for s in [-4.0, -1.0, 0.5, 2.0, 6.0] {
                let (a, b) = (mgf_max_uniform(n, s), mgf_max_uniform_series(n, s));
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "n={n} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rho_below_one_and_margin_helps() {
        let (rho, s) = chernoff_rho(2, 1).unwrap();
        assert!(rho < 1.0 && s > 0.0);
        let (wide, _) = chernoff_rho(60, 40).unwrap();
        let (narrow, _) = chernoff_rho(55, 45).unwrap();
        assert!(wide < narrow && narrow < 1.0);
    }

    #[test]
    fn single_round_matches_exact_fraction() {
        let q = PersistenceQuery { majority: 3, minority: 2, h: 1, trials: 40_000, seed: 5 };
        let r = mc_persistence(&q).unwrap();
        let exact = 2.0 / 5.0;
        let sigma3 = 3.0 * (exact * (1.0 - exact) / q.trials as f64).sqrt();
        assert!((r.p_hat - exact).abs() <= sigma3, "{} vs {exact}", r.p_hat);
        assert_eq!(r.chernoff_bound, r.chernoff_rho);
    }

    #[test]
    fn thread_count_does_not_change_counts() {
        let q = PersistenceQuery { majority: 6, minority: 4, h: 5, trials: 5_000, seed: 9 };
        let one = mc_overtakes(&q, Some(1)).unwrap();
        let three = mc_overtakes(&q, Some(3)).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn share_of_everyone_is_one() {
        let out = run(&Scenario::honest(4, 6, 3)).unwrap();
        let all = proportional_share(&out.trace, &[0, 1, 2, 3]);
        assert_eq!(all.share, 1.0);
        assert_eq!(all.expected, 1.0);
        let a = proportional_share(&out.trace, &[0, 1]);
        let b = proportional_share(&out.trace, &[2, 3]);
        assert!((a.share + b.share - 1.0).abs() < 1e-12);
    }
}
