//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

/// Maximum number of one-to-one pairs `(p, r)` with `|p - r| <= tol`, by
/// exhaustive search over (reference index, set of used predictions).
pub fn optimal_matches(pred: &[f64], refs: &[f64], tol: f64) -> usize {
    assert!(pred.len() <= 20, "oracle is exponential in predictions");
    fn go(i: usize, used: u32, pred: &[f64], refs: &[f64], tol: f64, memo: &mut HashMap<(usize, u32), usize>) -> usize {
        if i == refs.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, used)) {
            return v;
        }
        let mut best = go(i + 1, used, pred, refs, tol, memo);
        for (j, p) in pred.iter().enumerate() {
            if used & (1 << j) == 0 && (p - refs[i]).abs() <= tol {
                best = best.max(1 + go(i + 1, used | (1 << j), pred, refs, tol, memo));
            }
        }
        memo.insert((i, used), best);
        best
    }
    go(0, 0, pred, refs, tol, &mut HashMap::new())
}

fn sign(x: f64) -> i32 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// Weak labels written out term by term: `dv_t` is the population SD of
/// frame `t` (two-pass), `s_t = sign(dv_t - dv_{t-1})` and `d_{t+1}` is 1
/// when `s_{t+1} == s_t`. Returns `(frame, d)` for frames `2..n`.
pub fn literal_labels(frames: &[Vec<f64>]) -> Vec<(usize, u8)> {
    let dv: Vec<f64> = frames
        .iter()
        .map(|f| {
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt()
        })
        .collect();
    let mut out = Vec::new();
    for t in 1..frames.len() - 1 {
        let s_t = sign(dv[t] - dv[t - 1]);
        let s_next = sign(dv[t + 1] - dv[t]);
        out.push((t + 1, u8::from(s_next == s_t)));
    }
    out
}
