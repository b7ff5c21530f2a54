//! Reference implementations written from the definitions, sharing no code
//! with the library beyond its plain data types.
#![allow(dead_code)]

use rand::Rng;
use regionfuse::classify::RegionScores;
use regionfuse::{GrayImage, Label};

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> GrayImage {
    let pixels = (0..w * h).map(|_| rng.random::<u8>()).collect();
    GrayImage::new(w, h, pixels).unwrap()
}

/// Eight neighbours clockwise from top-left; bit p is neighbour p.
pub fn naive_lbp(img: &GrayImage) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = img.get(x, y);
            let n = [
                img.get(x - 1, y - 1),
                img.get(x, y - 1),
                img.get(x + 1, y - 1),
                img.get(x + 1, y),
                img.get(x + 1, y + 1),
                img.get(x, y + 1),
                img.get(x - 1, y + 1),
                img.get(x - 1, y),
            ];
            let mut code = 0u32;
            for (p, v) in n.iter().enumerate() {
                if *v >= c {
                    code += 1 << p;
                }
            }
            out.push(code as u8);
        }
    }
    out
}

/// Kirsch masks spelled out by hand: N, NE, E, SE, S, SW, W, NW.
pub const KIRSCH: [[[i32; 3]; 3]; 8] = [
    [[5, 5, 5], [-3, 0, -3], [-3, -3, -3]],
    [[-3, 5, 5], [-3, 0, 5], [-3, -3, -3]],
    [[-3, -3, 5], [-3, 0, 5], [-3, -3, 5]],
    [[-3, -3, -3], [-3, 0, 5], [-3, 5, 5]],
    [[-3, -3, -3], [-3, 0, -3], [5, 5, 5]],
    [[-3, -3, -3], [5, 0, -3], [5, 5, -3]],
    [[5, -3, -3], [5, 0, -3], [5, -3, -3]],
    [[5, 5, -3], [5, 0, -3], [-3, -3, -3]],
];

/// Triple loop over pixels and taps with an explicitly padded copy.
pub fn naive_kirsch(img: &GrayImage, mask: &[[i32; 3]; 3]) -> Vec<i32> {
    let (w, h) = (img.width(), img.height());
    let pw = w + 2;
    let mut padded = vec![0i32; pw * (h + 2)];
    for py in 0..h + 2 {
        for px in 0..pw {
            let sx = px.saturating_sub(1).min(w - 1);
            let sy = py.saturating_sub(1).min(h - 1);
            padded[py * pw + px] = i32::from(img.get(sx, sy));
        }
    }
    let mut out = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0;
            for (i, row) in mask.iter().enumerate() {
                for (j, &m) in row.iter().enumerate() {
                    acc += m * padded[(y + i) * pw + x + j];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Largest absolute eigenvalue of a symmetric matrix by cyclic Jacobi.
pub fn jacobi_spectral_radius(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i].abs()).fold(0.0, f64::max)
}

/// `sum_{l=1..terms} (rA)^l 1`, one matrix-vector product per term.
pub fn truncated_path_sum(a: &[Vec<f64>], r: f64, terms: usize) -> Vec<f64> {
    let n = a.len();
    let mut power = vec![1.0; n];
    let mut total = vec![0.0; n];
    for _ in 0..terms {
        let next: Vec<f64> = (0..n).map(|i| r * (0..n).map(|j| a[i][j] * power[j]).sum::<f64>()).collect();
        for i in 0..n {
            total[i] += next[i];
        }
        power = next;
    }
    total
}

pub fn random_affinity(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = rng.random_range(0.0..1.0);
            a[i][j] = v;
            a[j][i] = v;
        }
    }
    a
}

/// Best geometric margin over a dense set of unit directions in 2-D or 3-D,
/// with the offset chosen optimally for each direction.
pub fn exhaustive_margin(points: &[Vec<f64>], labels: &[Label]) -> f64 {
    let dim = points[0].len();
    let margin_along = |u: &[f64]| -> f64 {
        let mut lo_pos = f64::INFINITY;
        let mut hi_neg = f64::NEG_INFINITY;
        for (p, l) in points.iter().zip(labels) {
            let s: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
            match l {
                Label::Male => lo_pos = lo_pos.min(s),
                Label::Female => hi_neg = hi_neg.max(s),
            }
        }
        (lo_pos - hi_neg) / 2.0
    };
    let mut best = f64::NEG_INFINITY;
    match dim {
        2 => {
            let steps = 20_000;
            for k in 0..steps {
                let t = std::f64::consts::TAU * k as f64 / steps as f64;
                best = best.max(margin_along(&[t.cos(), t.sin()]));
            }
        }
        3 => {
            let steps = 600;
            for i in 0..=steps / 2 {
                let phi = std::f64::consts::PI * i as f64 / (steps / 2) as f64;
                for k in 0..steps {
                    let t = std::f64::consts::TAU * k as f64 / steps as f64;
                    let u = [phi.sin() * t.cos(), phi.sin() * t.sin(), phi.cos()];
                    best = best.max(margin_along(&u));
                }
            }
        }
        _ => panic!("exhaustive margin search only in 2-D or 3-D"),
    }
    best
}

/// Misclassification rate recounted from the weighted score sums; ties go male.
pub fn brute_error(weights: &[f64], scores: &[Vec<RegionScores>], labels: &[Label]) -> f64 {
    if weights.iter().all(|&w| w == 0.0) {
        return 1.0;
    }
    let mut wrong = 0;
    for (s, label) in labels.iter().enumerate() {
        let male: f64 = weights.iter().zip(scores).map(|(a, r)| a * r[s].p_male).sum();
        let female: f64 = weights.iter().zip(scores).map(|(a, r)| a * r[s].p_female).sum();
        let guess = if male >= female { Label::Male } else { Label::Female };
        if guess != *label {
            wrong += 1;
        }
    }
    wrong as f64 / labels.len() as f64
}

/// Lowest error over every weight vector on the 0.05 lattice of `[0, 1]^R`.
pub fn grid_search_error(scores: &[Vec<RegionScores>], labels: &[Label]) -> f64 {
    let r = scores.len();
    let mut idx = vec![0usize; r];
    let mut best = 1.0f64;
    loop {
        let w: Vec<f64> = idx.iter().map(|&i| i as f64 * 0.05).collect();
        best = best.min(brute_error(&w, scores, labels));
        let mut k = 0;
        loop {
            if k == r {
                return best;
            }
            idx[k] += 1;
            if idx[k] <= 20 {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Per-region probabilities whose reliability differs by region: region i
/// agrees with the label with probability `quality[i]`.
pub fn synthetic_scores(rng: &mut impl Rng, quality: &[f64], n: usize) -> (Vec<Vec<RegionScores>>, Vec<Label>) {
    use regionfuse::RegionId;
    let labels: Vec<Label> = (0..n).map(|i| if i % 2 == 0 { Label::Male } else { Label::Female }).collect();
    let scores = quality
        .iter()
        .enumerate()
        .map(|(ri, &q)| {
            let region = RegionId::ALL[ri];
            labels
                .iter()
                .map(|&l| {
                    let confidence = rng.random_range(0.5..1.0);
                    let right = rng.random_bool(q);
                    let p_true = if right { confidence } else { 1.0 - confidence };
                    let p_male = if l == Label::Male { p_true } else { 1.0 - p_true };
                    RegionScores::new(region, p_male)
                })
                .collect()
        })
        .collect();
    (scores, labels)
}

/// Two linearly separable clouds with a guaranteed gap.
pub fn separable_set(rng: &mut impl Rng, dim: usize, n: usize) -> (Vec<Vec<f64>>, Vec<Label>) {
    let normal: Vec<f64> = {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
        v.iter().map(|x| x / len).collect()
    };
    let gap = rng.random_range(0.2..1.0);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    while points.len() < n {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s: f64 = p.iter().zip(&normal).map(|(a, b)| a * b).sum();
        if s.abs() < gap {
            continue;
        }
        let label = if s > 0.0 { Label::Male } else { Label::Female };
        if points.len() + 1 == n && !labels.contains(&label.other()) {
            continue;
        }
        points.push(p);
        labels.push(label);
    }
    (points, labels)
}
