//! Small dense-vector helpers shared by the model, objective, and scoring
//! code. Everything is plain `f64` slices; shapes are the caller's problem.
//!
//! `dot` and `add_scaled` sit in the training inner loop, so `dot` runs four
//! independent accumulator chains (a fixed summation order, hence still
//! deterministic) instead of one latency-bound chain.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn l2_norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn l2_norm(a: &[f64]) -> f64 {
    l2_norm_sq(a).sqrt()
}

/// `dst += scale * src`
pub fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divide by n).
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Max-stable log of `sum(exp(x))`. The largest term is factored out and the
/// remainder goes through `ln_1p`, which keeps the result accurate even when
/// one logit dominates by tens of nats.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    let mut max_idx = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[max_idx] {
            max_idx = i;
        }
    }
    let m = xs[max_idx];
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != max_idx)
        .map(|(_, x)| (x - m).exp())
        .sum();
    m + rest.ln_1p()
}

/// Cross-entropy `-log softmax(logits)[label]`, computed as
/// `log_sum_exp(logits - logits[label])`. Shifting by the label logit
/// *before* exponentiating keeps near-zero losses exact: when the label is
/// the largest logit the result is `ln_1p(sum of tiny terms)` with no
/// cancellation, so confident margins (losses around 1e-13) come out to full
/// relative precision. Always ≥ 0.
pub fn cross_entropy(logits: &[f64], label: usize, scratch: &mut Vec<f64>) -> f64 {
    debug_assert!(label < logits.len());
    scratch.clear();
    scratch.extend(logits.iter().map(|x| x - logits[label]));
    log_sum_exp(scratch)
}

/// Allocating convenience wrapper over [`softmax_into`] for test code.
#[cfg(test)]
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    softmax_into(xs, &mut out);
    out
}

/// Allocation-free softmax for hot loops; `dst` is cleared and refilled.
pub fn softmax_into(xs: &[f64], dst: &mut Vec<f64>) {
    debug_assert!(!xs.is_empty());
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    dst.clear();
    dst.extend(xs.iter().map(|x| (x - m).exp()));
    let sum: f64 = dst.iter().sum();
    for e in dst.iter_mut() {
        *e /= sum;
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    debug_assert!(!xs.is_empty());
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_for_all_lengths() {
        for n in 0..20 {
            let a: Vec<f64> = (0..n).map(|i| (i as f64) * 0.7 - 3.0).collect();
            let b: Vec<f64> = (0..n).map(|i| 1.3 - (i as f64) * 0.2).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12, "length {n}");
        }
    }

    #[test]
    fn log_sum_exp_matches_naive_when_safe() {
        let xs = [0.3f64, -1.2, 2.0, 0.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_spread() {
        // exp(1000) overflows; the stable form must not.
        let xs = [1000.0, 0.0];
        let got = log_sum_exp(&xs);
        assert!((got - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_keeps_tiny_tails() {
        // With the largest term already shifted to zero — the arrangement
        // cross_entropy sets up — the e^{-40} tail survives: ln_1p returns
        // ~4.2e-18 where a naive ln(sum) would round the sum to 1 and the
        // log to exactly 0.
        let xs = [0.0, -40.0];
        let got = log_sum_exp(&xs);
        let expect = (-40.0f64).exp().ln_1p();
        assert!(got > 0.0);
        assert!((got - expect).abs() < 1e-30);
    }

    #[test]
    fn cross_entropy_is_exact_for_confident_margins() {
        // Label logit 29.4 above the rest: loss = ln(1 + e^{-29.4}) ≈ 1.7e-13
        // must come out with full relative precision, not cancellation noise.
        let mut scratch = Vec::new();
        let loss = cross_entropy(&[29.4, 0.0], 0, &mut scratch);
        let expect = (-29.4f64).exp().ln_1p();
        assert!((loss - expect).abs() <= 1e-16 * expect.abs().max(1e-300));
    }

    #[test]
    fn cross_entropy_matches_naive_softmax_log() {
        let logits = [0.4, -0.3, 1.1];
        let mut scratch = Vec::new();
        for y in 0..3 {
            let p = softmax(&logits);
            let naive = -p[y].ln();
            assert!((cross_entropy(&logits, y, &mut scratch) - naive).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[0.1, 0.9, -3.0, 2.2]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.7, 0.7, 0.1]), 1);
    }
}
