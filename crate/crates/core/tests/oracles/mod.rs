//! Independent reference implementations shared by the oracle tests and the
//! acceptance run.
#![allow(dead_code)]

use dilnet::{ConvSpec, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct evaluation of y[n,i,j,o] = b[o] + Σ x[n, i·s − p + a·d, j·s − p + c·d, ci] · w[a,c,ci,o].
pub fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Vec<f64> {
    let [n, h, wd, ci] = x.shape() else { panic!("rank") };
    let (n, h, wd, ci) = (*n, *h, *wd, *ci);
    let (k, s, d, p, co) = (spec.kernel, spec.stride, spec.dilation, spec.padding as isize, spec.out_channels);
    let ext = d * (k - 1) + 1;
    let oh = (h + 2 * spec.padding - ext) / s + 1;
    let ow = (wd + 2 * spec.padding - ext) / s + 1;
    let mut out = vec![0.0f64; n * oh * ow * co];
    for bn in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for o in 0..co {
                    let mut acc = b.data()[o] as f64;
                    for a in 0..k {
                        for c in 0..k {
                            let yy = (i * s) as isize - p + (a * d) as isize;
                            let xx = (j * s) as isize - p + (c * d) as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            for q in 0..ci {
                                let xv = x.data()[((bn * h + yy as usize) * wd + xx as usize) * ci + q] as f64;
                                let wv = w.data()[((a * k + c) * ci + q) * co + o] as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bn * oh + i) * ow + j) * co + o] = acc;
                }
            }
        }
    }
    out
}

pub fn conv_via_graph(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(xv, wv, bv, spec).unwrap();
    g.value(y).clone()
}

pub fn legal_case(seed: u64) -> (Tensor, Tensor, Tensor, ConvSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let spec = ConvSpec {
            kernel: [1, 3, 5][rng.gen_range(0..3)],
            stride: rng.gen_range(1..=3),
            dilation: rng.gen_range(1..=4),
            padding: rng.gen_range(0..=4),
            in_channels: rng.gen_range(1..=4),
            out_channels: rng.gen_range(1..=4),
        };
        let h = rng.gen_range(1..=16);
        let w = rng.gen_range(1..=16);
        if spec.output_size(h).is_err() || spec.output_size(w).is_err() {
            continue;
        }
        let n = rng.gen_range(1..=2);
        let x = Tensor::uniform(&[n, h, w, spec.in_channels], -1.0, 1.0, &mut rng);
        let k = spec.kernel;
        let wt = Tensor::uniform(&[k, k, spec.in_channels, spec.out_channels], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[spec.out_channels], -1.0, 1.0, &mut rng);
        return (x, wt, b, spec);
    }
}

/// Cohen's kappa from the raw rater pairs: observed agreement against the
/// agreement expected from each rater's marginals.
pub fn kappa_oracle(pred: &[u8], truth: &[u8]) -> Option<f64> {
    let n = pred.len() as f64;
    let mut table = [[0.0f64; 2]; 2];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p as usize][t as usize] += 1.0;
    }
    let po = (table[0][0] + table[1][1]) / n;
    let pe: f64 = (0..2)
        .map(|k| {
            let rater_a = (table[k][0] + table[k][1]) / n;
            let rater_b = (table[0][k] + table[1][k]) / n;
            rater_a * rater_b
        })
        .sum();
    (pe < 1.0).then(|| (po - pe) / (1.0 - pe))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by exhaustive pairing.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0f64, 0.0f64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// Trapezoidal area under the ROC polyline traced by sweeping the threshold
/// down through every distinct score.
pub fn auc_trapezoid(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let mut levels: Vec<f64> = scores.to_vec();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let (mut area, mut fpr0, mut tpr0) = (0.0, 0.0, 0.0);
    for t in levels {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 0).count() as f64;
        let (fpr, tpr) = (fp / n, tp / p);
        area += (fpr - fpr0) * (tpr + tpr0) / 2.0;
        fpr0 = fpr;
        tpr0 = tpr;
    }
    area
}

pub fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let len = rng.gen_range(2..120);
    let mut labels: Vec<u8> = (0..len).map(|_| rng.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    // coarse levels on some sets to force ties
    let levels = if rng.gen_bool(0.5) { Some(rng.gen_range(2..8)) } else { None };
    let scores = (0..len)
        .map(|_| match levels {
            Some(k) => rng.gen_range(0..k) as f64 / (k - 1) as f64,
            None => rng.gen::<f64>(),
        })
        .collect();
    (scores, labels)
}
