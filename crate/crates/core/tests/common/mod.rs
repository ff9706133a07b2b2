//! Independent reference implementations used as test oracles. They favor
//! direct enumeration over efficiency and share no code with the library.
#![allow(dead_code)]

use std::collections::BTreeSet;

use tabtune_core::tensor::{Tape, Tensor, TensorError, Var};

pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

/// Support-weighted F1 from a confusion matrix.
pub fn weighted_f1(pred: &[usize], y: &[usize], k: usize) -> f64 {
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(y) {
        confusion[t][p] += 1;
    }
    let n = y.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let col: f64 = (0..k).map(|t| confusion[t][c] as f64).sum();
        let row: f64 = confusion[c].iter().sum::<usize>() as f64;
        let precision = if col == 0.0 { 0.0 } else { tp / col };
        let recall = if row == 0.0 { 0.0 } else { tp / row };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        total += row / n * f1;
    }
    total
}

/// Fraction of (positive, negative) pairs ordered correctly, ties worth half.
pub fn pair_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut good, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| good / pairs)
}

/// Binary: AUC of p1; multiclass: one-vs-rest weighted by class support.
pub fn auc(proba: &[Vec<f64>], y: &[usize]) -> Option<f64> {
    let k = proba[0].len();
    if k == 2 {
        let s: Vec<f64> = proba.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = y.iter().map(|&t| t == 1).collect();
        return pair_auc(&s, &pos);
    }
    let (mut total, mut weight) = (0.0, 0.0);
    for c in 0..k {
        let s: Vec<f64> = proba.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = y.iter().map(|&t| t == c).collect();
        if let Some(a) = pair_auc(&s, &pos) {
            let w = pos.iter().filter(|&&p| p).count() as f64;
            total += w * a;
            weight += w;
        }
    }
    (weight > 0.0).then(|| total / weight)
}

/// (ECE, MCE) with bins ((b-1)/M, b/M] and confidence 0 in the first bin.
pub fn ece_mce(proba: &[Vec<f64>], y: &[usize], m: usize) -> (f64, f64) {
    let n = y.len() as f64;
    let (mut ece, mut mce) = (0.0f64, 0.0f64);
    for b in 1..=m {
        let lo = (b - 1) as f64 / m as f64;
        let hi = b as f64 / m as f64;
        let members: Vec<usize> = (0..y.len())
            .filter(|&i| {
                let conf = proba[i][argmax_lowest(&proba[i])];
                (conf > lo && conf <= hi) || (b == 1 && conf == 0.0)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let c = members.len() as f64;
        let acc = members.iter().filter(|&&i| argmax_lowest(&proba[i]) == y[i]).count() as f64 / c;
        let conf = members.iter().map(|&i| proba[i][argmax_lowest(&proba[i])]).sum::<f64>() / c;
        ece += c / n * (acc - conf).abs();
        mce = mce.max((acc - conf).abs());
    }
    (ece, mce)
}

/// Binary: mean squared error of p1; multiclass: summed over classes.
pub fn brier(proba: &[Vec<f64>], y: &[usize]) -> f64 {
    let k = proba[0].len();
    let mut total = 0.0;
    for (p, &t) in proba.iter().zip(y) {
        if k == 2 {
            let o = if t == 1 { 1.0 } else { 0.0 };
            total += (p[1] - o) * (p[1] - o);
        } else {
            for (c, &v) in p.iter().enumerate() {
                let o = if c == t { 1.0 } else { 0.0 };
                total += (v - o) * (v - o);
            }
        }
    }
    total / y.len() as f64
}

fn rate(rows: &[usize], hit: impl Fn(usize) -> bool) -> Option<f64> {
    (!rows.is_empty()).then(|| rows.iter().filter(|&&i| hit(i)).count() as f64 / rows.len() as f64)
}

fn max_gap(rates: &[f64]) -> f64 {
    let mut g = 0.0f64;
    for a in rates {
        for b in rates {
            g = g.max((a - b).abs());
        }
    }
    g
}

/// (SPD, EOD, EOpD); EOD and EOpD are `None` when some group lacks the
/// rows they condition on.
pub fn fairness(pred: &[usize], y: &[usize], groups: &[u32], pos: usize) -> (f64, Option<f64>, Option<f64>) {
    let distinct: BTreeSet<u32> = groups.iter().copied().collect();
    let (mut ppr, mut tpr, mut fpr) = (Vec::new(), Vec::new(), Vec::new());
    let (mut tpr_ok, mut fpr_ok) = (true, true);
    for g in distinct {
        let rows: Vec<usize> = (0..y.len()).filter(|&i| groups[i] == g).collect();
        ppr.push(rate(&rows, |i| pred[i] == pos).expect("group is non-empty"));
        let p: Vec<usize> = rows.iter().copied().filter(|&i| y[i] == pos).collect();
        let n: Vec<usize> = rows.iter().copied().filter(|&i| y[i] != pos).collect();
        match rate(&p, |i| pred[i] == pos) {
            Some(r) => tpr.push(r),
            None => tpr_ok = false,
        }
        match rate(&n, |i| pred[i] == pos) {
            Some(r) => fpr.push(r),
            None => fpr_ok = false,
        }
    }
    let eopd = tpr_ok.then(|| max_gap(&tpr));
    let eod = (tpr_ok && fpr_ok).then(|| max_gap(&tpr).max(max_gap(&fpr)));
    (max_gap(&ppr), eod, eopd)
}

/// Rank by direct counting: 1 + (strictly better) + half the other ties.
pub fn count_rank(values: &[f64], i: usize, ascending: bool) -> f64 {
    let better = values.iter().filter(|&&v| if ascending { v < values[i] } else { v > values[i] }).count();
    let ties = values.iter().filter(|&&v| v == values[i]).count() - 1;
    1.0 + better as f64 + 0.5 * ties as f64
}

fn subsets(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..items.len() {
        cur.push(items[i]);
        subsets(items, k, i + 1, cur, out);
        cur.pop();
    }
}

pub fn all_subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    subsets(items, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Probability that a uniformly drawn (support, query) pair has a query
/// class absent from the support, by enumerating every pair of subsets.
pub fn exact_skip_probability(y: &[usize], s: usize, q: usize) -> f64 {
    let all: Vec<usize> = (0..y.len()).collect();
    let (mut skip, mut total) = (0u64, 0u64);
    for support in all_subsets(&all, s) {
        let seen: BTreeSet<usize> = support.iter().map(|&i| y[i]).collect();
        let rest: Vec<usize> = all.iter().copied().filter(|i| !support.contains(i)).collect();
        for query in all_subsets(&rest, q) {
            total += 1;
            if query.iter().any(|&i| !seen.contains(&y[i])) {
                skip += 1;
            }
        }
    }
    skip as f64 / total as f64
}

/// Majority vote of the k nearest rows (Euclidean; index breaks distance
/// ties, lowest class breaks vote ties).
pub fn knn_predict(train_x: &[Vec<f64>], train_y: &[usize], k_classes: usize, x: &[f64], k: usize) -> usize {
    let mut d: Vec<(f64, usize)> = train_x
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = vec![0.0; k_classes];
    for &(_, i) in d.iter().take(k) {
        votes[train_y[i]] += 1.0;
    }
    argmax_lowest(&votes)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a small floor so near-zero gradients compare
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the tape gradient and central finite
/// differences of a scalar function of constant inputs.
pub fn fd_check_op(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>) -> f64 {
    let eval = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).expect("op builds");
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("op builds");
    let grads = tape.gradients(out).expect("gradients");
    let mut worst = 0.0f64;
    for (w, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[w]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[w].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[w].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}
