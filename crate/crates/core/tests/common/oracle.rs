//! Brute-force reference transcriptions used to check the library.
//!
//! Everything here is written from the definitions, without calling into the
//! library, so that agreement means two independent computations coincide.
#![allow(dead_code)]

use std::collections::HashMap;

pub fn clip(z: &[f64], c: f64) -> Vec<f64> {
    let mut max = z[0];
    for &v in z {
        if v > max {
            max = v;
        }
    }
    z.iter()
        .map(|&v| {
            let shifted = v - max + c;
            if shifted < -c {
                -c
            } else {
                shifted
            }
        })
        .collect()
}

/// Blended aggregate: `(sum_i clip(z_i) / s + clip(u)) / 2`.
pub fn ell(private: &[Vec<f64>], public: &[f64], c: f64, s: usize) -> Vec<f64> {
    let v = public.len();
    let mut sum = vec![0.0; v];
    for z in private {
        for (i, x) in clip(z, c).into_iter().enumerate() {
            sum[i] += x;
        }
    }
    let u = clip(public, c);
    (0..v).map(|i| (sum[i] / s as f64 + u[i]) / 2.0).collect()
}

/// `log softmax(z / tau)` via log-sum-exp.
pub fn log_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|x| x / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    scaled.iter().map(|x| x - lse).collect()
}

pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    log_softmax(z, tau).into_iter().map(f64::exp).collect()
}

/// `tau = 2 * (c / 2s) * sqrt(2 T ln(1/delta)) / epsilon`.
pub fn temperature(epsilon: f64, delta: f64, t: usize, c: f64, s: usize) -> f64 {
    let delta_l = c / (2.0 * s as f64);
    2.0 * delta_l * (2.0 * t as f64 * (1.0 / delta).ln()).sqrt() / epsilon
}

/// Table model with longest-suffix backoff and a copy head, no random fallback.
///
/// Every lookup must hit a row (the empty context row is mandatory).
pub struct TableModel {
    pub order: usize,
    pub rows: HashMap<Vec<u32>, Vec<f64>>,
    pub copy_weight: f64,
    pub copy_max_match: usize,
}

impl TableModel {
    pub fn logits(&self, seq: &[u32]) -> Vec<f64> {
        let mut out = None;
        for len in (0..=self.order.min(seq.len())).rev() {
            if let Some(row) = self.rows.get(&seq[seq.len() - len..]) {
                out = Some(row.clone());
                break;
            }
        }
        let mut out = out.expect("fixture has an empty-context row");
        if self.copy_weight > 0.0 && self.copy_max_match > 0 {
            // For every earlier position j, how far back does seq[..j] agree with seq's suffix?
            let n = seq.len();
            let mut lens = Vec::new();
            for j in 1..n {
                let mut l = 0;
                while l < self.copy_max_match && l < j && seq[j - 1 - l] == seq[n - 1 - l] {
                    l += 1;
                }
                lens.push((j, l));
            }
            let best = lens.iter().map(|&(_, l)| l).max().unwrap_or(0);
            if best > 0 {
                let mut boosted = std::collections::BTreeSet::new();
                for &(j, l) in &lens {
                    if l == best {
                        boosted.insert(seq[j]);
                    }
                }
                for t in boosted {
                    out[t as usize] += self.copy_weight * best as f64;
                }
            }
        }
        out
    }
}

/// Per-step log-distributions of the private generation loop, recomputed from
/// scratch at every step from the full prompt + output sequences, following
/// the given token sequence (`<eos>` included if it was sampled).
pub fn reference_steps(
    model: &TableModel,
    private_prompts: &[Vec<u32>],
    public_prompt: &[u32],
    tokens: &[u32],
    c: f64,
    s: usize,
    tau: f64,
) -> Vec<Vec<f64>> {
    let mut steps = Vec::new();
    for t in 0..tokens.len() {
        let generated = &tokens[..t];
        let private: Vec<Vec<f64>> = private_prompts
            .iter()
            .map(|p| model.logits(&[p.as_slice(), generated].concat()))
            .collect();
        let public = model.logits(&[public_prompt, generated].concat());
        steps.push(log_softmax(&ell(&private, &public, c, s), tau));
    }
    steps
}
