//! Metric-learning and classification losses: the pairwise term, the
//! log-damped triplet loss with its analytic gradient, softmax cross-entropy,
//! multi-triplet set construction and the weighted total.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{pose_distance, Vec3};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const DEFAULT_MARGIN: f64 = 0.01;
/// Pose distances below this are treated as the same viewpoint.
pub const SAME_POSE_TOL: f64 = 1e-9;

/// Five batch indices: reference, pose-nearest positive, one same-class
/// far-pose negative and two other-class negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSet {
    pub reference: usize,
    pub positive: usize,
    pub negatives: [usize; 3],
}

impl TripletSet {
    pub fn indices(&self) -> [usize; 5] {
        let [a, b, c] = self.negatives;
        [self.reference, self.positive, a, b, c]
    }
}

/// Per-sample labels needed to build triplet sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletLabel {
    pub category: usize,
    pub pose: Vec3,
    pub light: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_pair: f64,
    pub w_tri: f64,
    pub w_softmax: f64,
    pub w_encgen: f64,
    pub m_tri: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_pair: 1.0,
            w_tri: 1.0,
            w_softmax: 1.0,
            w_encgen: 1.0,
            m_tri: DEFAULT_MARGIN,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_pair, self.w_tri, self.w_softmax, self.w_encgen];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be non-negative: {w:?}")));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        if !(self.m_tri > 0.0 && self.m_tri.is_finite()) {
            return Err(Error::invalid(format!(
                "triplet margin {} must be positive",
                self.m_tri
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }
}

/// Unweighted loss components for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub enc_gen: f64,
    pub pair: f64,
    pub tri: f64,
    pub softmax: f64,
}

fn check_lengths(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distance between two descriptors.
pub fn loss_pair(fi: &[f64], fj: &[f64]) -> Result<f64> {
    check_lengths("loss_pair", fi, fj)?;
    Ok(sq_dist(fi, fj))
}

fn check_triplet(fi: &[f64], fj: &[f64], fk: &[f64], m_tri: f64) -> Result<()> {
    check_lengths("loss_tri", fi, fj)?;
    check_lengths("loss_tri", fi, fk)?;
    if m_tri.is_nan() || m_tri <= 0.0 {
        return Err(Error::domain("loss_tri", format!("margin {m_tri} must be positive")));
    }
    Ok(())
}

/// `ln(max(1, 2 - D_ik / (D_ij + m)))` with squared distances; in `[0, ln 2]`.
pub fn loss_tri(fi: &[f64], fj: &[f64], fk: &[f64], m_tri: f64) -> Result<f64> {
    check_triplet(fi, fj, fk, m_tri)?;
    let g = 2.0 - sq_dist(fi, fk) / (sq_dist(fi, fj) + m_tri);
    Ok(g.max(1.0).ln())
}

/// Gradients of [`loss_tri`] with respect to `(fi, fj, fk)`. Zero wherever
/// the max clamps, including the kink itself.
pub fn grad_tri(fi: &[f64], fj: &[f64], fk: &[f64], m_tri: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_triplet(fi, fj, fk, m_tri)?;
    let n = fi.len();
    let den = sq_dist(fi, fj) + m_tri;
    let dik = sq_dist(fi, fk);
    let g = 2.0 - dik / den;
    if g <= 1.0 {
        return Ok((vec![0.0; n], vec![0.0; n], vec![0.0; n]));
    }
    // d ln g = (1/g) [ D_ik / den^2 * dD_ij - dD_ik / den ]
    let a = dik / (den * den) / g;
    let b = 1.0 / (den * g);
    let mut dfi = vec![0.0; n];
    let mut dfj = vec![0.0; n];
    let mut dfk = vec![0.0; n];
    for t in 0..n {
        let ij = 2.0 * (fi[t] - fj[t]);
        let ik = 2.0 * (fi[t] - fk[t]);
        dfi[t] = a * ij - b * ik;
        dfj[t] = -a * ij;
        dfk[t] = b * ik;
    }
    Ok((dfi, dfj, dfk))
}

fn check_sets(sets: &[TripletSet], count: usize) -> Result<()> {
    for s in sets {
        if let Some(bad) = s.indices().iter().find(|i| **i >= count) {
            return Err(Error::domain(
                "loss_multi_triplet",
                format!("index {bad} out of range for {count} descriptors"),
            ));
        }
    }
    Ok(())
}

/// Sum over sets of the optional pair term plus the three triplet terms
/// `(ref, pos, neg)`. Returns the pair and triplet sums separately.
pub fn multi_triplet_parts(descriptors: &[Vec<f64>], sets: &[TripletSet], m_tri: f64) -> Result<(f64, f64)> {
    check_sets(sets, descriptors.len())?;
    let (mut pair, mut tri) = (0.0, 0.0);
    for s in sets {
        let (r, p) = (&descriptors[s.reference], &descriptors[s.positive]);
        pair += loss_pair(r, p)?;
        for n in s.negatives {
            tri += loss_tri(r, p, &descriptors[n], m_tri)?;
        }
    }
    Ok((pair, tri))
}

pub fn loss_multi_triplet(
    descriptors: &[Vec<f64>],
    sets: &[TripletSet],
    m_tri: f64,
    include_pair: bool,
) -> Result<f64> {
    let (pair, tri) = multi_triplet_parts(descriptors, sets, m_tri)?;
    Ok(if include_pair { pair + tri } else { tri })
}

/// Cross-entropy of `logits` against `label`, log-sum-exp stabilized.
pub fn loss_softmax(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::domain(
            "loss_softmax",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Weighted total; the softmax term only counts when fine-tuning.
pub fn loss_total(parts: &LossParts, weights: &LossWeights, stage: Stage) -> f64 {
    let base = weights.w_encgen * parts.enc_gen + weights.w_pair * parts.pair + weights.w_tri * parts.tri;
    match stage {
        Stage::Pretrain => base,
        Stage::Finetune => base + weights.w_softmax * parts.softmax,
    }
}

/// Pair and triplet sums over `descriptors [n, d]` recorded as two tape
/// scalars, each divided by `norm`.
pub fn multi_triplet_tape(
    tape: &mut Tape,
    descriptors: Var,
    sets: &[TripletSet],
    m_tri: f64,
    norm: f64,
) -> Result<(Var, Var)> {
    let (n, d) = match *tape.shape(descriptors) {
        [n, d] => (n, d),
        _ => {
            return Err(Error::domain(
                "loss_multi_triplet",
                format!("descriptor shape {:?}", tape.shape(descriptors)),
            ))
        }
    };
    if norm.is_nan() || norm <= 0.0 {
        return Err(Error::invalid(format!("normalizer {norm} must be positive")));
    }
    let rows: Vec<Vec<f64>> = tape.value(descriptors).chunks(d).map(<[f64]>::to_vec).collect();
    let (pair, tri) = multi_triplet_parts(&rows, sets, m_tri)?;
    let sets: Arc<[TripletSet]> = sets.into();

    let pair_sets = Arc::clone(&sets);
    let pair_var = tape.custom(
        &[descriptors],
        vec![1],
        vec![pair / norm],
        Box::new(move |inputs, _, up| {
            let f = inputs[0];
            let scale = up[0] / norm;
            let mut g = vec![0.0; n * d];
            for s in pair_sets.iter() {
                let (r, p) = (s.reference * d, s.positive * d);
                for t in 0..d {
                    let diff = 2.0 * (f[r + t] - f[p + t]) * scale;
                    g[r + t] += diff;
                    g[p + t] -= diff;
                }
            }
            vec![Some(g)]
        }),
    )?;

    let tri_var = tape.custom(
        &[descriptors],
        vec![1],
        vec![tri / norm],
        Box::new(move |inputs, _, up| {
            let f = inputs[0];
            let scale = up[0] / norm;
            let row = |i: usize| &f[i * d..(i + 1) * d];
            let mut g = vec![0.0; n * d];
            for s in sets.iter() {
                for k in s.negatives {
                    let (gi, gj, gk) =
                        grad_tri(row(s.reference), row(s.positive), row(k), m_tri).expect("validated in forward");
                    for t in 0..d {
                        g[s.reference * d + t] += scale * gi[t];
                        g[s.positive * d + t] += scale * gj[t];
                        g[k * d + t] += scale * gk[t];
                    }
                }
            }
            vec![Some(g)]
        }),
    )?;
    Ok((pair_var, tri_var))
}

/// Mean softmax cross-entropy over the rows of `logits [n, k]`.
pub fn softmax_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = match *tape.shape(logits) {
        [n, k] => (n, k),
        _ => {
            return Err(Error::domain(
                "loss_softmax",
                format!("logit shape {:?}", tape.shape(logits)),
            ))
        }
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "loss_softmax",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    let vals = tape.value(logits);
    let mut total = 0.0;
    for (row, &label) in vals.chunks(k).zip(labels) {
        total += loss_softmax(row, label)?;
    }
    let labels = labels.to_vec();
    tape.custom(
        &[logits],
        vec![1],
        vec![total / n as f64],
        Box::new(move |inputs, _, up| {
            let scale = up[0] / n as f64;
            let mut g = vec![0.0; n * k];
            for (r, row) in inputs[0].chunks(k).enumerate() {
                let lse = log_sum_exp(row);
                for c in 0..k {
                    let p = (row[c] - lse).exp();
                    g[r * k + c] = scale * (p - if c == labels[r] { 1.0 } else { 0.0 });
                }
            }
            vec![Some(g)]
        }),
    )
}

/// One set per eligible reference. The positive is the same-category sample
/// at minimal pose distance (a same-pose, different-light twin when one
/// exists); the same-class negative is drawn from samples strictly farther in
/// pose; the two other-class negatives come from distinct categories when
/// the batch allows. Ties resolve to the lowest index.
pub fn build_triplet_sets<R: Rng + ?Sized>(labels: &[TripletLabel], rng: &mut R) -> Result<Vec<TripletSet>> {
    let mut categories: Vec<usize> = labels.iter().map(|l| l.category).collect();
    categories.sort_unstable();
    categories.dedup();
    if categories.len() < 2 {
        return Err(Error::domain(
            "build_triplet_sets",
            format!("batch has {} categor(ies); need at least 2", categories.len()),
        ));
    }
    let mut sets = Vec::new();
    for (r, lr) in labels.iter().enumerate() {
        let mut same: Vec<(usize, f64)> = Vec::new();
        for (j, lj) in labels.iter().enumerate() {
            if j != r && lj.category == lr.category {
                same.push((j, pose_distance(lr.pose, lj.pose)?));
            }
        }
        let twin = same
            .iter()
            .find(|(j, d)| *d <= SAME_POSE_TOL && labels[*j].light != lr.light);
        let nearest = same.iter().fold(None::<(usize, f64)>, |best, &(j, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((j, d)),
        });
        let Some((pos, pos_d)) = twin.copied().or(nearest) else {
            continue;
        };
        let far: Vec<usize> = same.iter().filter(|(_, d)| *d > pos_d).map(|(j, _)| *j).collect();
        let Some(&neg0) = far.choose(rng) else {
            continue;
        };
        let others: Vec<usize> = (0..labels.len())
            .filter(|j| labels[*j].category != lr.category)
            .collect();
        let Some(&neg1) = others.choose(rng) else {
            continue;
        };
        let distinct: Vec<usize> = others
            .iter()
            .copied()
            .filter(|j| labels[*j].category != labels[neg1].category)
            .collect();
        let pool: Vec<usize> = if distinct.is_empty() {
            others.iter().copied().filter(|j| *j != neg1).collect()
        } else {
            distinct
        };
        let Some(&neg2) = pool.choose(rng) else {
            continue;
        };
        sets.push(TripletSet {
            reference: r,
            positive: pos,
            negatives: [neg0, neg1, neg2],
        });
    }
    if sets.is_empty() {
        return Err(Error::domain(
            "build_triplet_sets",
            "no reference has a positive, a farther same-class sample and two other-class samples",
        ));
    }
    Ok(sets)
}

/// Coefficient of variation of descriptor norms (report-level metric).
pub fn descriptor_norm_cv(descriptors: &[Vec<f64>]) -> f64 {
    if descriptors.is_empty() {
        return 0.0;
    }
    let norms: Vec<f64> = descriptors
        .iter()
        .map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check_multi, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn pair_examples() {
        assert_eq!(loss_pair(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_pair(&[1.0, 2.0, 2.0], &[0.0; 3]).unwrap(), 9.0);
        assert_eq!(loss_pair(&[0.0; 3], &[1.0, 2.0, 2.0]).unwrap(), 9.0);
        assert!(loss_pair(&[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn tri_examples() {
        let fi = [0.0, 0.0];
        assert_eq!(loss_tri(&fi, &[0.1, 0.0], &[5.0, 0.0], 0.01).unwrap(), 0.0);
        assert!((loss_tri(&fi, &[3.0, 1.0], &fi, 0.01).unwrap() - LN_2).abs() < 1e-15);
        let v = loss_tri(&fi, &[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert!((v - 1.5f64.ln()).abs() < 1e-12);
        assert!(loss_tri(&fi, &[1.0], &fi, 0.01).is_err());
        assert!(loss_tri(&fi, &fi, &fi, 0.0).is_err());
    }

    #[test]
    fn grad_clamped_is_zero_and_dfj_parallel() {
        let (a, b, c) = grad_tri(&[0.0, 0.0], &[0.1, 0.0], &[5.0, 0.0], 0.01).unwrap();
        assert!(a.iter().chain(&b).chain(&c).all(|x| *x == 0.0));
        let fi = [0.3, -0.2, 0.5];
        let fj = [0.1, 0.4, 0.2];
        let fk = [0.35, -0.1, 0.45];
        let (_, dj, _) = grad_tri(&fi, &fj, &fk, 0.01).unwrap();
        let diff: Vec<f64> = fj.iter().zip(&fi).map(|(a, b)| a - b).collect();
        let ratio = dj[0] / diff[0];
        assert!(ratio > 0.0);
        for t in 0..3 {
            assert!((dj[t] - ratio * diff[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 50 {
            let v: Vec<Tensor> = (0..3)
                .map(|_| Tensor::new(vec![8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let g = 2.0 - sq_dist(v[0].data(), v[2].data()) / (sq_dist(v[0].data(), v[1].data()) + 0.01);
            if g < 1.01 {
                continue;
            }
            let report = finite_diff_check_multi(
                |tape, vars| {
                    let vals: Vec<Vec<f64>> = vars.iter().map(|x| tape.value(*x).to_vec()).collect();
                    let l = loss_tri(&vals[0], &vals[1], &vals[2], 0.01)?;
                    tape.custom(
                        vars,
                        vec![1],
                        vec![l],
                        Box::new(|ins, _, up| {
                            let (a, b, c) = grad_tri(ins[0], ins[1], ins[2], 0.01).unwrap();
                            [a, b, c]
                                .into_iter()
                                .map(|g| Some(g.into_iter().map(|x| x * up[0]).collect()))
                                .collect()
                        }),
                    )
                },
                &v,
                1e-6,
                None,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
            checked += 1;
        }
    }

    #[test]
    fn multi_triplet_examples() {
        let d = vec![vec![0.5, 0.5]; 5];
        let set = TripletSet {
            reference: 0,
            positive: 1,
            negatives: [2, 3, 4],
        };
        let v = loss_multi_triplet(&d, &[set], 0.01, false).unwrap();
        assert!((v - 3.0 * LN_2).abs() < 1e-12);
        let d2 = vec![
            vec![0.0, 0.0],
            vec![1.0, 2.0],
            vec![0.3, 0.0],
            vec![5.0, 1.0],
            vec![0.0, 0.2],
        ];
        let with = loss_multi_triplet(&d2, &[set], 0.01, true).unwrap();
        let without = loss_multi_triplet(&d2, &[set], 0.01, false).unwrap();
        assert_eq!(with - without, loss_pair(&d2[0], &d2[1]).unwrap());
        assert_eq!(loss_multi_triplet(&d2, &[], 0.01, true).unwrap(), 0.0);
        let bad = TripletSet {
            reference: 0,
            positive: 1,
            negatives: [2, 3, 9],
        };
        assert!(loss_multi_triplet(&d2, &[bad], 0.01, true).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert!((loss_softmax(&[0.0; 12], 3).unwrap() - 12f64.ln()).abs() < 1e-12);
        let mut l = vec![0.0; 4];
        l[2] = 1e3;
        assert!(loss_softmax(&l, 2).unwrap().abs() < 1e-12);
        let a = [0.3, -1.0, 2.0];
        let b: Vec<f64> = a.iter().map(|x| x + 123.0).collect();
        assert!((loss_softmax(&a, 1).unwrap() - loss_softmax(&b, 1).unwrap()).abs() < 1e-9);
        assert!(loss_softmax(&a, 3).is_err());
    }

    #[test]
    fn total_examples() {
        let parts = LossParts {
            enc_gen: 1.5,
            pair: 0.25,
            tri: 0.5,
            softmax: 2.0,
        };
        let only = LossWeights {
            w_pair: 0.0,
            w_tri: 0.0,
            w_softmax: 0.0,
            w_encgen: 1.0,
            m_tri: 0.01,
        };
        assert_eq!(loss_total(&parts, &only, Stage::Finetune), 1.5);
        let w = LossWeights {
            w_pair: 0.5,
            w_tri: 2.0,
            w_softmax: 3.0,
            w_encgen: 0.1,
            m_tri: 0.01,
        };
        let loud = LossWeights { w_softmax: 1e9, ..w };
        assert_eq!(
            loss_total(&parts, &w, Stage::Pretrain),
            loss_total(&parts, &loud, Stage::Pretrain)
        );
        let explicit = 0.1 * 1.5 + 0.5 * 0.25 + 2.0 * 0.5 + 3.0 * 2.0;
        assert_eq!(loss_total(&parts, &w, Stage::Finetune), explicit);
        assert!(LossWeights {
            w_pair: 0.0,
            w_tri: 0.0,
            w_softmax: 0.0,
            w_encgen: 0.0,
            m_tri: 0.01
        }
        .validate()
        .is_err());
        assert!(LossWeights { w_pair: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn tape_losses_match_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let sets = [
            TripletSet {
                reference: 0,
                positive: 1,
                negatives: [2, 3, 4],
            },
            TripletSet {
                reference: 5,
                positive: 2,
                negatives: [1, 0, 3],
            },
        ];
        let (pair, tri) = multi_triplet_parts(&rows, &sets, 0.01).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![6, 4], rows.concat()).unwrap());
        let (p, t) = multi_triplet_tape(&mut tape, x, &sets, 0.01, 2.0).unwrap();
        assert!((tape.scalar_value(p) - pair / 2.0).abs() < 1e-15);
        assert!((tape.scalar_value(t) - tri / 2.0).abs() < 1e-15);

        let logits = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 2.0, 0.0, 1.0]).unwrap();
        let want = (loss_softmax(&[0.1, 0.5, -0.3], 2).unwrap() + loss_softmax(&[2.0, 0.0, 1.0], 0).unwrap()) / 2.0;
        let l = tape.param(&logits);
        let s = softmax_tape(&mut tape, l, &[2, 0]).unwrap();
        assert!((tape.scalar_value(s) - want).abs() < 1e-15);
        assert!(softmax_tape(&mut tape, l, &[2]).is_err());
    }

    #[test]
    fn tape_losses_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let desc = Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let logits = Tensor::new(vec![5, 4], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let sets = [TripletSet {
            reference: 0,
            positive: 1,
            negatives: [2, 3, 4],
        }];
        let report = finite_diff_check_multi(
            |tape, v| {
                let (p, t) = multi_triplet_tape(tape, v[0], &sets, 0.01, 1.0)?;
                let s = softmax_tape(tape, v[1], &[0, 1, 2, 3, 0])?;
                let a = tape.add(p, t)?;
                tape.add(a, s)
            },
            &[desc, logits],
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    fn label(category: usize, pose: Vec3, light: f64) -> TripletLabel {
        TripletLabel { category, pose, light }
    }

    #[test]
    fn twin_is_chosen_as_positive() {
        let labels = [
            label(0, [1.0, 0.0, 0.0], 0.7),
            label(0, [0.9, 0.1, 0.0], 0.7),
            label(0, [1.0, 0.0, 0.0], 1.2),
            label(0, [0.0, 1.0, 0.0], 0.9),
            label(1, [1.0, 0.0, 0.0], 1.0),
            label(2, [0.0, 0.0, 1.0], 1.0),
        ];
        let sets = build_triplet_sets(&labels, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s0 = sets.iter().find(|s| s.reference == 0).unwrap();
        assert_eq!(s0.positive, 2);
        assert_ne!(s0.negatives[0], 2);
    }

    #[test]
    fn single_category_rejected() {
        let labels: Vec<_> = (0..5).map(|i| label(3, [1.0, i as f64, 0.5], 1.0)).collect();
        assert!(build_triplet_sets(&labels, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn sets_are_deterministic() {
        let labels: Vec<_> = (0..12)
            .map(|i| label(i % 3, [1.0, (i * 7 % 5) as f64, 0.3 * i as f64], 1.0))
            .collect();
        let a = build_triplet_sets(&labels, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = build_triplet_sets(&labels, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn tri_bounded_and_monotone(
            fi in proptest::collection::vec(-2.0f64..2.0, 4),
            fj in proptest::collection::vec(-2.0f64..2.0, 4),
            dir in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let mut prev = f64::INFINITY;
            for step in 0..20 {
                let t = step as f64 * 0.2;
                let fk: Vec<f64> = fi.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                let v = loss_tri(&fi, &fj, &fk, 0.01).unwrap();
                prop_assert!((0.0..=LN_2 + 1e-15).contains(&v));
                prop_assert!(v <= prev + 1e-15);
                prev = v;
            }
        }
    }
}
