//! Straight-from-formula reference implementations shared by the
//! integration tests. Deliberately naive: plain slices, no shared code with
//! the library.
#![allow(dead_code)]

use ikd_mil::tensor::BinaryMask;

pub fn dice(p: &[f64], t: &[f64], eps: f64) -> f64 {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let st: f64 = t.iter().sum();
    1.0 - (2.0 * inter + eps) / (sp + st + eps)
}

fn flip(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| 1.0 - x).collect()
}

/// Sum of dice terms over `(prediction, target)` pairs, complementing
/// everything for normal images.
fn dice_terms(terms: &[(&[f64], &[f64])], tumor: bool, eps: f64) -> f64 {
    terms
        .iter()
        .map(|(p, t)| if tumor { dice(p, t, eps) } else { dice(&flip(p), &flip(t), eps) })
        .sum()
}

pub fn teacher(fused: &[f64], blocks: &[Vec<f64>], tumor: bool, eps: f64) -> f64 {
    let mask = vec![if tumor { 1.0 } else { 0.0 }; fused.len()];
    let mut terms: Vec<(&[f64], &[f64])> = vec![(fused, &mask)];
    terms.extend(blocks.iter().map(|b| (b.as_slice(), mask.as_slice())));
    dice_terms(&terms, tumor, eps)
}

pub fn kd(fused: &[f64], blocks: &[Vec<f64>], teacher_fused: &[f64], tumor: bool, eps: f64) -> f64 {
    let zeros = vec![0.0; fused.len()];
    let target = if tumor { teacher_fused } else { &zeros[..] };
    let mut terms: Vec<(&[f64], &[f64])> = vec![(fused, target)];
    terms.extend(blocks.iter().map(|b| (b.as_slice(), target)));
    dice_terms(&terms, tumor, eps)
}

pub fn wce(s: &[f64], t: &[f64], log_eps: f64) -> f64 {
    let ce: Vec<f64> = s.iter().zip(t).map(|(si, ti)| -ti * (si + log_eps).ln()).collect();
    let z: f64 = ce.iter().map(|c| (-c).exp()).sum();
    ce.iter().map(|c| c * (-c).exp() / z).sum()
}

pub fn student_total(
    fused: &[f64],
    blocks: &[Vec<f64>],
    teacher_fused: &[f64],
    tumor: bool,
    a: f64,
    dice_eps: f64,
    log_eps: f64,
) -> f64 {
    let zeros = vec![0.0; fused.len()];
    let target = if tumor { teacher_fused } else { &zeros[..] };
    kd(fused, blocks, teacher_fused, tumor, dice_eps) + a * wce(fused, target, log_eps)
}

/// (tp, fp, fn) by direct counting.
pub fn counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        match (p, g) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            _ => {}
        }
    }
    c
}

pub fn f1(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (tp, fp, fn_) = counts(pred, gt);
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (tp, fp, fn_) = counts(pred, gt);
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fn_) as f64
    }
}

/// Foreground pixels with a 4-neighbour that is background or outside.
pub fn border_pixels(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height as i64, m.width as i64);
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.values[(y * w + x) as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(y, x) && (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// O(n^2) symmetric Hausdorff distance between border sets.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Option<f64> {
    let (a, b) = (border_pixels(pred), border_pixels(gt));
    if b.is_empty() {
        return None;
    }
    if a.is_empty() {
        let (h, w) = ((gt.height - 1) as f64, (gt.width - 1) as f64);
        return Some((h * h + w * w).sqrt());
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|&(y, x)| to.iter().map(|&(v, u)| (y - v).pow(2) + (x - u).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    Some((directed(&a, &b).max(directed(&b, &a)) as f64).sqrt())
}

/// Small deterministic generator so oracle cases do not depend on the
/// library's RNG plumbing.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    pub fn unit(&mut self) -> f64 {
        self.next_u64() as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn mask(&mut self, h: usize, w: usize, density: f64) -> BinaryMask {
        BinaryMask::new(h, w, (0..h * w).map(|_| self.unit() < density).collect()).unwrap()
    }
}
