//! Brute-force reference implementations used by the property tests. Each is
//! written directly from the definition with plain loops and no shared code
//! with the library.

#![allow(dead_code)]

/// Row-major `[d][i][j]` grid.
#[derive(Debug, Clone)]
pub struct Grid {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Grid {
    pub fn at(&self, d: usize, i: usize, j: usize) -> f64 {
        self.v[(d * self.h + i) * self.w + j]
    }

    pub fn set(&mut self, d: usize, i: usize, j: usize, x: f64) {
        self.v[(d * self.h + i) * self.w + j] = x;
    }
}

/// Per-class min-max normalization summed over classes; constant classes add nothing.
pub fn combine(classes: &[Grid]) -> Grid {
    let g0 = &classes[0];
    let mut out = Grid { d: g0.d, h: g0.h, w: g0.w, v: vec![0.0; g0.v.len()] };
    for g in classes {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &x in &g.v {
            if x < lo {
                lo = x;
            }
            if x > hi {
                hi = x;
            }
        }
        if hi - lo > 0.0 {
            for (o, &x) in out.v.iter_mut().zip(&g.v) {
                *o += (x - lo) / (hi - lo);
            }
        }
    }
    out
}

/// Greedy exhaustive retrieval: at each step list every admissible window on
/// every slice, sort by score (descending) then `(d, i, j)`, take the first,
/// zero its footprint on slices within `zeta`.
pub fn greedy(a: &Grid, k: usize, zeta: usize, win: (usize, usize)) -> Vec<(usize, usize, usize, f64)> {
    let mut a = a.clone();
    let mut picks: Vec<(usize, usize, usize, f64)> = Vec::new();
    for _ in 0..k {
        let mut cands = Vec::new();
        for d in 0..a.d {
            for i in 0..=(a.h - win.0) {
                for j in 0..=(a.w - win.1) {
                    let clash = picks.iter().any(|&(pd, pi, pj, _)| {
                        let dd = pd.abs_diff(d);
                        let di = pi.abs_diff(i);
                        let dj = pj.abs_diff(j);
                        dd <= zeta && di < win.0 && dj < win.1
                    });
                    if clash {
                        continue;
                    }
                    let mut s = 0.0;
                    for r in i..i + win.0 {
                        for c in j..j + win.1 {
                            s += a.at(d, r, c);
                        }
                    }
                    cands.push((s, d, i, j));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2, x.3).cmp(&(y.1, y.2, y.3))));
        let Some(&(s, d, i, j)) = cands.first() else { break };
        let lo = d.saturating_sub(zeta);
        let hi = (d.saturating_add(zeta)).min(a.d - 1);
        for dd in lo..=hi {
            for r in i..i + win.0 {
                for c in j..j + win.1 {
                    a.set(dd, r, c, 0.0);
                }
            }
        }
        picks.push((d, i, j, s));
    }
    picks
}

/// Single-image retrieval: greedy non-overlapping windows with zeroing.
pub fn retrieve_2d(plane: &[Vec<f64>], k: usize, win: (usize, usize)) -> Vec<(usize, usize)> {
    let h = plane.len();
    let w = plane[0].len();
    let mut a = plane.to_vec();
    let mut taken: Vec<(usize, usize)> = Vec::new();
    for _ in 0..k {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..=h - win.0 {
            for j in 0..=w - win.1 {
                let overlaps = taken
                    .iter()
                    .any(|&(ti, tj)| i < ti + win.0 && ti < i + win.0 && j < tj + win.1 && tj < j + win.1);
                if overlaps {
                    continue;
                }
                let s: f64 = (i..i + win.0).flat_map(|r| a[r][j..j + win.1].iter()).sum();
                match best {
                    Some((b, _, _)) if s <= b => {}
                    _ => best = Some((s, i, j)),
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        for row in a.iter_mut().skip(i).take(win.0) {
            for x in row.iter_mut().skip(j).take(win.1) {
                *x = 0.0;
            }
        }
        taken.push((i, j));
    }
    taken
}

/// Mean of the `n` largest values; ties at the cutoff break toward the smallest index.
pub fn top_mean(values: &[f64], n: usize) -> f64 {
    let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let n = n.min(values.len());
    pairs[..n].iter().map(|p| p.0).sum::<f64>() / n as f64
}

/// Probability that a random positive outranks a random negative (ties count half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// `(tp, fp, tn, fn)` with "positive" meaning `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0, 0.0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.0 += 1.0,
            (true, false) => c.1 += 1.0,
            (false, false) => c.2 += 1.0,
            (false, true) => c.3 += 1.0,
        }
    }
    c
}

pub fn mcc(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let (tp, fp, tn, fn_) = confusion(scores, labels, threshold);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den.sqrt()
    }
}

/// Threshold among the observed scores whose sensitivity is closest to
/// `target`; equally close candidates resolve to the larger threshold.
pub fn threshold_at(scores: &[f64], labels: &[bool], target: f64) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    if pos == 0.0 {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for &t in scores {
        let (tp, ..) = confusion(scores, labels, t);
        let gap = (tp / pos - target).abs();
        best = match best {
            None => Some((gap, t)),
            Some((g, bt)) if gap < g || (gap == g && t > bt) => Some((gap, t)),
            keep => keep,
        };
    }
    best.map(|b| b.1)
}

pub fn specificity(scores: &[f64], labels: &[bool], threshold: f64) -> Option<f64> {
    let (_, fp, tn, _) = confusion(scores, labels, threshold);
    (fp + tn > 0.0).then(|| tn / (fp + tn))
}

pub fn dice(pred: &[bool], truth: &[bool]) -> f64 {
    let inter = pred.iter().zip(truth).filter(|(a, b)| **a && **b).count() as f64;
    let total = (pred.iter().filter(|&&a| a).count() + truth.iter().filter(|&&b| b).count()) as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

/// Best Dice over every threshold `score >= t` (t over observed scores) and
/// the empty prediction.
pub fn best_dice(scores: &[f64], truth: &[bool]) -> f64 {
    let mut best = dice(&vec![false; truth.len()], truth);
    for &t in scores {
        let pred: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        best = best.max(dice(&pred, truth));
    }
    best
}

/// Average precision: sum over distinct thresholds (descending) of
/// `(recall_k - recall_{k-1}) * precision_k`.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos = truth.iter().filter(|&&b| b).count() as f64;
    if pos == 0.0 {
        return None;
    }
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in ts {
        let tp = scores.iter().zip(truth).filter(|(s, y)| **s >= t && **y).count() as f64;
        let n = scores.iter().filter(|s| **s >= t).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * (tp / n);
        prev_recall = recall;
    }
    Some(ap)
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
