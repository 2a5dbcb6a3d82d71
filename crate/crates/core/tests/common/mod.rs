// Brute-force reference implementations used as test oracles. They follow
// the metric definitions literally and share no code with the library.
#![allow(dead_code)]

/// ECE by scanning every bin edge for every pair.
pub fn ece(pairs: &[(f64, f64)], bins: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for i in 0..bins {
        let lo = i as f64 / bins as f64;
        let hi = (i + 1) as f64 / bins as f64;
        let last = i + 1 == bins;
        let mut count = 0usize;
        let mut conf = 0.0;
        let mut label = 0.0;
        for &(c, y) in pairs {
            if c >= lo && (c < hi || (last && c <= 1.0)) {
                count += 1;
                conf += c;
                label += y;
            }
        }
        if count > 0 {
            let k = count as f64;
            total += (k / n) * (label / k - conf / k).abs();
        }
    }
    total
}

pub fn brier(pairs: &[(f64, f64)]) -> f64 {
    let mut s = 0.0;
    for &(c, y) in pairs {
        s += (c - y) * (c - y);
    }
    s / pairs.len() as f64
}

/// Counts every (positive, negative) pair.
pub fn auroc(pairs: &[(f64, f64)]) -> Option<f64> {
    let mut wins = 0.0;
    let mut total = 0usize;
    for &(cp, yp) in pairs {
        if yp != 1.0 {
            continue;
        }
        for &(cn, yn) in pairs {
            if yn != 0.0 {
                continue;
            }
            total += 1;
            if cp > cn {
                wins += 1.0;
            } else if cp == cn {
                wins += 0.5;
            }
        }
    }
    (total > 0).then(|| wins / total as f64)
}

/// Rank = number of smaller values plus the mid-point of the tied block.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let tied = v.iter().filter(|&&y| y == x).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    (den > 0.0).then(|| (n * sxy - sx * sy) / den)
}
