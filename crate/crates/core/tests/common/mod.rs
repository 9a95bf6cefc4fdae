#![allow(dead_code)]

/// Keys cubic with a = -0.5 in expanded polynomial form.
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x.powi(3) - 2.5 * x.powi(2) + 1.0
    } else if x < 2.0 {
        -0.5 * x.powi(3) + 2.5 * x.powi(2) - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Direct bicubic evaluation at output pixel `(y, x)`: sums every source
/// sample within kernel support, clamping out-of-range indices to the
/// border, then clamps negative results to zero.
pub fn direct_bicubic(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize, y: usize, x: usize) -> f64 {
    let sy = (y as f64 + 0.5) * gh as f64 / h as f64 - 0.5;
    let sx = (x as f64 + 0.5) * gw as f64 / w as f64 - 0.5;
    let mut acc = 0.0;
    for r in (sy.floor() as i64 - 3)..=(sy.floor() as i64 + 3) {
        for c in (sx.floor() as i64 - 3)..=(sx.floor() as i64 + 3) {
            let k = cubic(sy - r as f64) * cubic(sx - c as f64);
            if k != 0.0 {
                let rr = r.clamp(0, gh as i64 - 1) as usize;
                let cc = c.clamp(0, gw as i64 - 1) as usize;
                acc += k * grid[rr * gw + cc];
            }
        }
    }
    acc.max(0.0)
}

/// Top-K by explicit ranking: `i` is selected iff fewer than `k` indices
/// outrank it, where larger scores win and ties go to the smaller index.
pub fn ranked_topk(scores: &[f64], k: usize) -> Vec<bool> {
    (0..scores.len())
        .map(|i| {
            let rank = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            rank < k
        })
        .collect()
}
