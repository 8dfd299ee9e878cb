//! Monotonic text-to-frame alignment: beta-binomial prior, forward-sum loss
//! and Viterbi duration extraction.
//!
//! All functions operate on a T×N matrix of log weights (T frames, N tokens).
//! A valid alignment is a path n₀ = 0, n_{T−1} = N−1 with steps in {0, +1},
//! so every token receives at least one frame and T ≥ N is required.

use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

fn logaddexp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// −log Σ_paths exp(Σ_t m[t][n_t]) via the forward recursion.
///
/// Callers must ensure T ≥ N ≥ 1; see [`forward_sum_loss`] for the checked
/// entry point.
pub fn forward_sum_neg_log<T: Scalar>(m: &Mat<T>) -> T {
    let (t_len, n_len) = m.shape();
    let mut prev = vec![T::neg_infinity(); n_len];
    prev[0] = m.get(0, 0);
    let mut cur = vec![T::neg_infinity(); n_len];
    for t in 1..t_len {
        for n in 0..n_len {
            let stay = prev[n];
            let advance = if n > 0 { prev[n - 1] } else { T::neg_infinity() };
            let best = logaddexp(stay, advance);
            cur[n] = if best == T::neg_infinity() {
                T::neg_infinity()
            } else {
                best + m.get(t, n)
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    -prev[n_len - 1]
}

/// Checked forward-sum loss; errors when no monotonic path exists.
pub fn forward_sum_loss<T: Scalar>(m: &Mat<T>) -> Result<T> {
    let (t_len, n_len) = m.shape();
    if n_len < 1 {
        return Err(Error::Input("alignment matrix needs at least one token".into()));
    }
    if t_len < n_len {
        return Err(Error::Infeasible(format!(
            "no monotonic path for {t_len} frames over {n_len} tokens"
        )));
    }
    Ok(forward_sum_neg_log(m))
}

/// Posterior occupancy P(path visits (t, n)); every row sums to 1.
///
/// The gradient of [`forward_sum_neg_log`] w.r.t. the input matrix is the
/// negated posterior.
pub fn forward_sum_posterior<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    let (t_len, n_len) = m.shape();
    let neg = T::neg_infinity();

    let mut alpha = Mat::filled(t_len, n_len, neg);
    alpha.set(0, 0, m.get(0, 0));
    for t in 1..t_len {
        for n in 0..n_len {
            let stay = alpha.get(t - 1, n);
            let advance = if n > 0 { alpha.get(t - 1, n - 1) } else { neg };
            let best = logaddexp(stay, advance);
            if best != neg {
                alpha.set(t, n, best + m.get(t, n));
            }
        }
    }
    let total = alpha.get(t_len - 1, n_len - 1);

    let mut beta = Mat::filled(t_len, n_len, neg);
    beta.set(t_len - 1, n_len - 1, T::zero());
    for t in (0..t_len - 1).rev() {
        for n in 0..n_len {
            let stay = {
                let b = beta.get(t + 1, n);
                if b == neg {
                    neg
                } else {
                    b + m.get(t + 1, n)
                }
            };
            let advance = if n + 1 < n_len {
                let b = beta.get(t + 1, n + 1);
                if b == neg {
                    neg
                } else {
                    b + m.get(t + 1, n + 1)
                }
            } else {
                neg
            };
            beta.set(t, n, logaddexp(stay, advance));
        }
    }

    Mat::from_fn(t_len, n_len, |t, n| {
        let score = alpha.get(t, n) + beta.get(t, n);
        if score == neg {
            T::zero()
        } else {
            (score - total).exp()
        }
    })
}

/// Max-product alignment; returns per-token frame counts (Σ = T, min ≥ 1).
pub fn viterbi_durations<T: Scalar>(m: &Mat<T>) -> Result<Vec<usize>> {
    let (t_len, n_len) = m.shape();
    if n_len < 1 {
        return Err(Error::Input("alignment matrix needs at least one token".into()));
    }
    if t_len < n_len {
        return Err(Error::Infeasible(format!(
            "no monotonic path for {t_len} frames over {n_len} tokens"
        )));
    }
    let neg = T::neg_infinity();
    let mut score = Mat::filled(t_len, n_len, neg);
    // backpointer: true = advanced from n−1
    let mut advanced = vec![false; t_len * n_len];
    score.set(0, 0, m.get(0, 0));
    for t in 1..t_len {
        for n in 0..n_len {
            let stay = score.get(t - 1, n);
            let adv = if n > 0 { score.get(t - 1, n - 1) } else { neg };
            let (best, from_prev) = if adv > stay { (adv, true) } else { (stay, false) };
            if best != neg {
                score.set(t, n, best + m.get(t, n));
                advanced[t * n_len + n] = from_prev;
            }
        }
    }
    let mut durations = vec![0usize; n_len];
    let mut n = n_len - 1;
    for t in (0..t_len).rev() {
        durations[n] += 1;
        if t > 0 && advanced[t * n_len + n] {
            n -= 1;
        }
    }
    Ok(durations)
}

/// Best monotonic path score under the max-product recursion.
pub fn viterbi_score<T: Scalar>(m: &Mat<T>) -> Result<T> {
    let durations = viterbi_durations(m)?;
    let mut score = T::zero();
    let mut t = 0usize;
    for (n, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            score += m.get(t, n);
            t += 1;
        }
    }
    Ok(score)
}

/// Log prior over token index per frame, from a beta-binomial over
/// k = 0..N−1 with trials N−1, α = ω·(t+1), β = ω·(T−t).
pub fn beta_binomial_prior(t_frames: usize, n_tokens: usize, omega: f64) -> Result<Mat<f64>> {
    if n_tokens < 1 {
        return Err(Error::Input("prior needs at least one token".into()));
    }
    if t_frames < n_tokens {
        return Err(Error::Infeasible(format!(
            "prior needs T >= N, got T={t_frames}, N={n_tokens}"
        )));
    }
    let trials = (n_tokens - 1) as f64;
    let mut prior = Mat::zeros(t_frames, n_tokens);
    for t in 0..t_frames {
        let a = omega * (t as f64 + 1.0);
        let b = omega * (t_frames - t) as f64;
        let ln_beta_ab = ln_beta(a, b);
        for k in 0..n_tokens {
            let kf = k as f64;
            let ln_choose =
                ln_gamma(trials + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(trials - kf + 1.0);
            let v = ln_choose + ln_beta(kf + a, trials - kf + b) - ln_beta_ab;
            prior.set(t, k, v);
        }
    }
    Ok(prior)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-13 relative.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
