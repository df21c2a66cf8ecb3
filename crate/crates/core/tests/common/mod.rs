// Independent oracles shared by the integration targets.
#![allow(dead_code)]

use crossq::estimators::DistributionSpec;

/// Every equally likely n-sample outcome of one action as (sample mean, probability).
fn sample_mean_law(support: &[f64], probs: &[f64], n: usize) -> Vec<(f64, f64)> {
    let mut law = vec![(0.0, 1.0)];
    for _ in 0..n {
        law = law
            .iter()
            .flat_map(|&(sum, p)| support.iter().zip(probs).map(move |(&x, &q)| (sum + x, p * q)))
            .collect();
    }
    law.into_iter().map(|(sum, p)| (sum / n as f64, p)).collect()
}

/// Exact expectations by full enumeration of the selector's samples.
///
/// Returns `(single, split)`: the expected maximum sample mean, and the expected
/// value of a held-out evaluator at the selector's argmax (lowest index on ties).
/// With independent identically drawn sets the split value is the same for the
/// double estimator and for every cross pair.
pub fn exact_estimator_means(dist: &DistributionSpec, n: usize) -> (f64, f64) {
    let laws: Vec<Vec<(f64, f64)>> = dist
        .actions()
        .iter()
        .map(|a| sample_mean_law(a.support(), a.probs(), n))
        .collect();
    let true_means = dist.true_means();
    let mut single = 0.0;
    let mut split = 0.0;
    let mut idx = vec![0usize; laws.len()];
    loop {
        let mut p = 1.0;
        let mut best = 0;
        let mut best_mean = f64::NEG_INFINITY;
        for (a, law) in laws.iter().enumerate() {
            let (m, q) = law[idx[a]];
            p *= q;
            if m > best_mean {
                best_mean = m;
                best = a;
            }
        }
        single += p * best_mean;
        split += p * true_means[best];
        // Odometer over the joint outcome.
        let mut a = 0;
        loop {
            if a == laws.len() {
                return (single, split);
            }
            idx[a] += 1;
            if idx[a] < laws[a].len() {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

pub fn outcome_count(dist: &DistributionSpec, n: usize) -> usize {
    dist.actions().iter().map(|a| a.support().len().pow(n as u32)).product()
}
