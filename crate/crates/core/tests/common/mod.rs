//! Straight-line reference computations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tashr_core::evaluator::OcrResult;
use tashr_core::imaging::{ImageRgb, TextAnnotation};
use tashr_core::losses::FeatureProvider;
use tashr_core::synthgen::{synthesize_triplet, synthetic_page, GeneratorConfig};
use tashr_core::imaging::SampleTriplet;
use tashr_tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Plain `[N,C,H,W]` array with index helpers.
#[derive(Clone, Debug)]
pub struct Nd {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Nd {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, v: vec![0.0; n * c * h * w] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self { n: s[0], c: s[1], h: s[2], w: s[3], v: t.data().to_vec() }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = ((n * self.c + c) * self.h + y) * self.w + x;
        &mut self.v[i]
    }
}

pub fn conv(x: &Nd, weight: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Nd {
    let s = weight.shape();
    let (o, k) = (s[0], s[2]);
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Nd::zeros(x.n, o, ho, wo);
    for n in 0..x.n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[oc];
                    for ic in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wv = weight.data()[((oc * x.c + ic) * k + ky) * k + kx];
                                acc += wv * x.at(n, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(n, oc, oy, ox) = acc;
                }
            }
        }
    }
    out
}

pub fn relu(x: &Nd) -> Nd {
    Nd { v: x.v.iter().map(|v| v.max(0.0)).collect(), ..x.clone() }
}

pub fn max_pool(x: &Nd) -> Nd {
    let mut out = Nd::zeros(x.n, x.c, x.h / 2, x.w / 2);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h / 2 {
                for xx in 0..x.w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.at(n, c, 2 * y + dy, 2 * xx + dx));
                        }
                    }
                    *out.at_mut(n, c, y, xx) = m;
                }
            }
        }
    }
    out
}

pub fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

/// Per image, `F Fᵀ / (C H W)`, flattened `[N, C, C]`.
pub fn gram(x: &Nd) -> Vec<f64> {
    let hw = x.h * x.w;
    let mut out = Vec::with_capacity(x.n * x.c * x.c);
    for n in 0..x.n {
        for i in 0..x.c {
            for j in 0..x.c {
                let mut acc = 0.0;
                for y in 0..x.h {
                    for xx in 0..x.w {
                        acc += x.at(n, i, y, xx) * x.at(n, j, y, xx);
                    }
                }
                out.push(acc / (x.c * hw) as f64);
            }
        }
    }
    out
}

/// Layer plan of the seeded random backbone: conv+relu per width, pools between.
pub fn random_backbone_features(provider: &FeatureProvider<f64>, widths: &[usize], kernel: usize, x: &Nd) -> Vec<Nd> {
    let mut feats = Vec::new();
    let mut cur = x.clone();
    let mut idx = 0;
    for (i, _) in widths.iter().enumerate() {
        if i > 0 && kernel == 3 {
            cur = max_pool(&cur);
            idx += 1;
        }
        let w = provider.weights().get(&format!("features.{idx}.weight")).unwrap();
        let b = provider.weights().get(&format!("features.{idx}.bias")).unwrap();
        cur = relu(&conv(&cur, w, b.data(), 1, kernel / 2));
        idx += 2;
        feats.push(cur.clone());
    }
    feats
}

pub fn pixel_loss(out: &Nd, gt: &Nd, self_shift: bool) -> f64 {
    let l1 = mean_abs(&out.v, &gt.v);
    let reference = if self_shift { out } else { gt };
    let (mut down, mut nd) = (0.0, 0usize);
    let (mut right, mut nr) = (0.0, 0usize);
    for n in 0..out.n {
        for c in 0..out.c {
            for y in 0..out.h {
                for x in 0..out.w {
                    if y >= 1 {
                        down += (out.at(n, c, y, x) - reference.at(n, c, y - 1, x)).abs();
                        nd += 1;
                    }
                    if x >= 1 {
                        right += (out.at(n, c, y, x) - reference.at(n, c, y, x - 1)).abs();
                        nr += 1;
                    }
                }
            }
        }
    }
    5.0 * l1 + 0.1 * (down / nd as f64 + right / nr as f64)
}

pub fn feature_loss(out_feats: &[Nd], gt_feats: &[Nd]) -> f64 {
    let mut perceptual = 0.0;
    let mut style = 0.0;
    for (a, b) in out_feats.iter().zip(gt_feats) {
        perceptual += mean_abs(&a.v, &b.v);
        style += mean_abs(&gram(a), &gram(b));
    }
    0.05 * perceptual + 120.0 * style
}

pub fn text_loss(det_out: &[Nd], det_gt: &[Nd], rec_out: &[Nd], rec_gt: &[Nd]) -> f64 {
    det_out
        .iter()
        .zip(det_gt)
        .chain(rec_out.iter().zip(rec_gt))
        .map(|(a, b)| mean_abs(&a.v, &b.v))
        .sum()
}

/// SSIM with a direct 2-d Gaussian window at every valid position.
pub fn ssim_direct(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let (h, w) = a.dims();
    let k = 11;
    let sigma: f64 = 1.5;
    let mut win = vec![0.0; k * k];
    let c = (k as f64 - 1.0) / 2.0;
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            win[i * k + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        mx += win[i * k + j] * a.get(ch, y0 + i, x0 + j) as f64;
                        my += win[i * k + j] * b.get(ch, y0 + i, x0 + j) as f64;
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = a.get(ch, y0 + i, x0 + j) as f64 - mx;
                        let q = b.get(ch, y0 + i, x0 + j) as f64 - my;
                        vx += win[i * k + j] * p * p;
                        vy += win[i * k + j] * q * q;
                        cov += win[i * k + j] * p * q;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}

/// Largest number of disjoint eligible pairs, by exhaustive search.
pub fn max_matching(eligible: &[Vec<bool>]) -> usize {
    fn go(row: usize, eligible: &[Vec<bool>], used: &mut Vec<bool>) -> usize {
        if row == eligible.len() {
            return 0;
        }
        let mut best = go(row + 1, eligible, used);
        for j in 0..used.len() {
            if eligible[row][j] && !used[j] {
                used[j] = true;
                best = best.max(1 + go(row + 1, eligible, used));
                used[j] = false;
            }
        }
        best
    }
    let cols = eligible.first().map_or(0, Vec::len);
    go(0, eligible, &mut vec![false; cols])
}

/// Eligibility from first principles: IoU at least the threshold and texts
/// equal after trimming and case folding.
pub fn eligible_pairs(pred: &OcrResult, gt: &TextAnnotation, iou_thresh: f64) -> Vec<Vec<bool>> {
    pred.boxes
        .iter()
        .zip(&pred.texts)
        .map(|(pb, pt)| {
            gt.boxes
                .iter()
                .zip(&gt.transcriptions)
                .map(|(gb, gtext)| {
                    let ix = (pb.x + pb.w).min(gb.x + gb.w) - pb.x.max(gb.x);
                    let iy = (pb.y + pb.h).min(gb.y + gb.h) - pb.y.max(gb.y);
                    let inter = ix.max(0.0) * iy.max(0.0);
                    let union = pb.w * pb.h + gb.w * gb.h - inter;
                    let iou = if union > 0.0 { inter / union } else { 0.0 };
                    iou >= iou_thresh && pt.trim().to_lowercase() == gtext.trim().to_lowercase()
                })
                .collect()
        })
        .collect()
}

/// The fixed overfitting corpus: `n` procedural pages at `size`.
pub fn overfit_set(n: usize, size: usize) -> Vec<SampleTriplet> {
    let config = GeneratorConfig { size, ..GeneratorConfig::default() };
    (0..n)
        .map(|i| synthesize_triplet(&config, &synthetic_page(i as u64, size), 0, i as u64).unwrap())
        .collect()
}
