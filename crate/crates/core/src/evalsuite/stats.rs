//! Small-sample tests used by the ablation and refiner reports.

/// Mann–Whitney U of `x` against `y`: pairs with `x > y` count 1, ties ½.
pub fn u_statistic(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .flat_map(|&a| y.iter().map(move |&b| a.partial_cmp(&b)))
        .map(|o| match o {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum()
}

/// Exact one-sided p-value for "`x` tends to exceed `y`": the share of all
/// relabelings of the pooled sample whose U is at least the observed one.
/// Ties are handled by the permutation itself. Panics above 24 observations.
pub fn rank_sum_greater(x: &[f64], y: &[f64]) -> f64 {
    let (nx, n) = (x.len(), x.len() + y.len());
    assert!(n <= 24, "exact enumeration is limited to 24 observations");
    if nx == 0 || y.is_empty() {
        return 1.0;
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let observed = u_statistic(x, y);
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != nx {
            continue;
        }
        let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|&i| mask & (1 << i) != 0);
        let a: Vec<f64> = a.into_iter().map(|i| pooled[i]).collect();
        let b: Vec<f64> = b.into_iter().map(|i| pooled[i]).collect();
        total += 1;
        if u_statistic(&a, &b) >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips (ties are dropped by the caller).
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // log-space binomial tail, stable for a few thousand trials
    let ln_choose = |k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
    };
    let ln_half = (0.5f64).ln() * n as f64;
    (wins..=n).map(|k| (ln_choose(k) + ln_half).exp()).sum::<f64>().min(1.0)
}

/// Dotted paths at which two JSON documents differ.
pub fn config_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: &str, out: &mut Vec<String>) {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_sum_extremes() {
        // complete separation, 3 vs 3: 1 / C(6,3)
        assert!((rank_sum_greater(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]) - 0.05).abs() < 1e-12);
        assert_eq!(rank_sum_greater(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]), 1.0);
        // all tied: every relabeling has the same U
        assert_eq!(rank_sum_greater(&[1.0; 3], &[1.0; 3]), 1.0);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test(3, 0) - 0.125).abs() < 1e-12);
        assert!((sign_test(0, 3) - 1.0).abs() < 1e-12);
        assert!((sign_test(2, 1) - 0.5).abs() < 1e-12);
        assert!(sign_test(150, 50) < 1e-10);
    }

    #[test]
    fn diff_paths() {
        let a = serde_json::json!({"model": {"mode": "BRIDGE", "c": 1}, "seed": 0});
        let b = serde_json::json!({"model": {"mode": "SELF", "c": 1}, "seed": 1});
        assert_eq!(config_diff(&a, &b), ["model.mode", "seed"]);
        assert!(config_diff(&a, &a).is_empty());
    }
}
