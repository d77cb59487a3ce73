//! Training objectives: cross-entropy on current and rehearsed samples,
//! consistency regularization, pairwise TAM discrepancy and logit replay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the cross-entropy on buffered samples.
    pub alpha: f64,
    /// Weight of the consistency (or logit replay) term.
    pub beta: f64,
    /// Weight of the pairwise discrepancy term, which is maximized.
    pub lambda: f64,
    /// Softmax temperature applied to TAM outputs in the discrepancy term.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.2,
            lambda: 0.1,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_task: f64,
    pub l_rehearsal: f64,
    pub l_cr: f64,
    pub l_pd: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `l_task + α·l_rehearsal + β·l_cr − λ·l_pd`.
    pub fn compose(l_task: f64, l_rehearsal: f64, l_cr: f64, l_pd: f64, cfg: &LossConfig) -> Self {
        LossBreakdown {
            l_task,
            l_rehearsal,
            l_cr,
            l_pd,
            total: l_task + cfg.alpha * l_rehearsal + cfg.beta * l_cr - cfg.lambda * l_pd,
        }
    }
}

/// Loss terms recorded on a tape. Absent terms count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub task: Var,
    pub rehearsal: Option<Var>,
    pub cr: Option<Var>,
    pub pd: Option<Var>,
}

pub fn loss_task(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `CE(current) + α·CE(buffer)`.
pub fn loss_rehearsal(
    tape: &mut Tape,
    current: Var,
    labels: &[usize],
    buffer: Var,
    buffer_labels: &[usize],
    alpha: f64,
) -> Result<Var> {
    if buffer_labels.is_empty() {
        return Err(Error::arg("rehearsal needs a non-empty buffer batch"));
    }
    let task = loss_task(tape, current, labels)?;
    let reh = tape.cross_entropy(buffer, buffer_labels)?;
    let reh = tape.scale(reh, alpha);
    tape.add(task, reh)
}

/// Zero-padded targets and a 0/1 mask marking the columns each target row
/// actually covers.
fn masked_targets<R: AsRef<[f64]>>(targets: &[R], shape: &[usize]) -> Result<(Tensor, Tensor, usize)> {
    let (rows, cols) = (shape[0], shape.get(1).copied().unwrap_or(0));
    if targets.len() != rows {
        return Err(Error::dim("targets", shape, &[targets.len()]));
    }
    let mut t = Tensor::zeros(&[rows, cols]);
    let mut m = Tensor::zeros(&[rows, cols]);
    let mut valid = 0;
    for (i, z) in targets.iter().enumerate() {
        let z = z.as_ref();
        if z.len() > cols {
            return Err(Error::dim("targets", shape, &[rows, z.len()]));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::arg("target logits must be finite"));
        }
        t.row_mut(i)[..z.len()].copy_from_slice(z);
        m.row_mut(i)[..z.len()].fill(1.0);
        valid += z.len();
    }
    Ok((t, m, valid))
}

fn masked_diff<R: AsRef<[f64]>>(tape: &mut Tape, targets: &[R], logits: Var) -> Result<(Var, usize)> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("targets", &shape, &[targets.len()]));
    }
    let (t, m, valid) = masked_targets(targets, &shape)?;
    let t = tape.constant(t);
    let m = tape.constant(m);
    let d = tape.sub(logits, t)?;
    Ok((tape.mul(d, m)?, valid))
}

/// Mean over the batch of `‖zᵢ − logitsᵢ‖²₂`, each row compared on its
/// first `len(zᵢ)` classes.
pub fn loss_consistency<R: AsRef<[f64]>>(tape: &mut Tape, targets: &[R], logits: Var) -> Result<Var> {
    let (d, _) = masked_diff(tape, targets, logits)?;
    tape.sq_norm_rows_mean(d)
}

/// Mean squared error between stored and current logits over the stored
/// entries only.
pub fn loss_der_logit_replay<R: AsRef<[f64]>>(tape: &mut Tape, targets: &[R], logits: Var) -> Result<Var> {
    let (d, valid) = masked_diff(tape, targets, logits)?;
    if valid == 0 {
        return Err(Error::arg("logit replay needs at least one stored logit"));
    }
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / valid as f64))
}

/// `Σₖ mean‖softmax(current/T) − stopgrad(softmax(previousₖ/T))‖₁` over
/// TAM outputs. Zero when there are no previous TAMs.
pub fn loss_pairwise_discrepancy(
    tape: &mut Tape,
    current: Var,
    previous: &[Var],
    temperature: f64,
) -> Result<Var> {
    if previous.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let scaled = tape.scale(current, 1.0 / temperature);
    let s_t = tape.softmax_rows(scaled)?;
    let mut acc: Option<Var> = None;
    for &p in previous {
        let scaled = tape.scale(p, 1.0 / temperature);
        let s_k = tape.softmax_rows(scaled)?;
        let s_k = tape.stop_grad(s_k);
        let d = tape.sub(s_t, s_k)?;
        let l = tape.l1_rows_mean(d)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Combines recorded terms into the objective. Terms whose weight is zero
/// are left out of the graph entirely.
pub fn loss_total(tape: &mut Tape, terms: LossTerms, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let val = |tape: &Tape, v: Option<Var>| v.map_or(Ok(0.0), |v| tape.value(v).item());
    let breakdown = LossBreakdown::compose(
        tape.value(terms.task).item()?,
        val(tape, terms.rehearsal)?,
        val(tape, terms.cr)?,
        val(tape, terms.pd)?,
        cfg,
    );
    let mut total = terms.task;
    for (term, weight) in [
        (terms.rehearsal, cfg.alpha),
        (terms.cr, cfg.beta),
        (terms.pd, -cfg.lambda),
    ] {
        if let Some(v) = term.filter(|_| weight != 0.0) {
            let w = tape.scale(v, weight);
            total = tape.add(total, w)?;
        }
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn rows(data: &[&[f64]]) -> Tensor {
        Tensor::from_rows(data).unwrap()
    }

    #[test]
    fn rehearsal_cases() {
        let cur = rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let buf = rows(&[&[0.5, 0.5], &[2.0, -1.0]]);
        let mut tape = Tape::new();
        let (c, b) = (tape.constant(cur.clone()), tape.constant(buf));
        let task = loss_task(&mut tape, c, &[0, 1]).unwrap();
        let zero = loss_rehearsal(&mut tape, c, &[0, 1], b, &[1, 1], 0.0).unwrap();
        assert_eq!(scalar(&tape, zero), scalar(&tape, task));

        let c2 = tape.constant(cur);
        let twice = loss_rehearsal(&mut tape, c, &[0, 1], c2, &[0, 1], 1.0).unwrap();
        assert!((scalar(&tape, twice) - 2.0 * scalar(&tape, task)).abs() < 1e-15);

        // 0.22009484928059772 + 0.5 · 1.8708672660668437
        let hand = loss_rehearsal(&mut tape, c, &[0, 1], b, &[1, 1], 0.5).unwrap();
        assert!((scalar(&tape, hand) - 1.1555284823140195).abs() < 1e-12);
        assert!(loss_rehearsal(&mut tape, c, &[0, 1], b, &[], 0.5).is_err());
    }

    #[test]
    fn consistency_cases() {
        let mut tape = Tape::new();
        let l = tape.constant(rows(&[&[1.0, 1.0]]));
        let same = loss_consistency(&mut tape, &[vec![1.0, 1.0]], l).unwrap();
        assert_eq!(scalar(&tape, same), 0.0);
        let v = loss_consistency(&mut tape, &[vec![0.0, 0.0]], l).unwrap();
        assert_eq!(scalar(&tape, v), 2.0);
        let narrow = loss_consistency(&mut tape, &[vec![0.0]], l).unwrap();
        assert_eq!(scalar(&tape, narrow), 1.0);
        assert!(loss_consistency(&mut tape, &[vec![f64::NAN, 0.0]], l).is_err());
        assert!(loss_consistency(&mut tape, &[vec![0.0; 3]], l).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<Vec<f64>> = (0..3).map(|i| (0..2 + i).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let logits: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut brute = 0.0;
        for (zi, li) in z.iter().zip(&logits) {
            for (a, b) in zi.iter().zip(li) {
                brute += (a - b) * (a - b);
            }
        }
        let lv = tape.constant(Tensor::from_rows(&logits).unwrap());
        let got = loss_consistency(&mut tape, &z, lv).unwrap();
        assert!((scalar(&tape, got) - brute / 3.0).abs() < 1e-12);
    }

    #[test]
    fn logit_replay_cases() {
        let mut tape = Tape::new();
        let l = tape.constant(rows(&[&[1.0, 1.0]]));
        let same = loss_der_logit_replay(&mut tape, &[vec![1.0, 1.0]], l).unwrap();
        assert_eq!(scalar(&tape, same), 0.0);
        let v = loss_der_logit_replay(&mut tape, &[vec![0.0, 0.0]], l).unwrap();
        assert_eq!(scalar(&tape, v), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z: Vec<Vec<f64>> = (0..3).map(|i| (0..1 + i).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let logits: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let (mut s, mut n) = (0.0, 0);
        for (zi, li) in z.iter().zip(&logits) {
            for (a, b) in zi.iter().zip(li) {
                s += (a - b) * (a - b);
                n += 1;
            }
        }
        let lv = tape.constant(Tensor::from_rows(&logits).unwrap());
        let got = loss_der_logit_replay(&mut tape, &z, lv).unwrap();
        assert!((scalar(&tape, got) - s / n as f64).abs() < 1e-12);
    }

    #[test]
    fn discrepancy_cases() {
        let mut tape = Tape::new();
        let g = tape.param(rows(&[&[0.1, 0.9, 0.5, 0.3]]));
        let none = loss_pairwise_discrepancy(&mut tape, g, &[], 1.0).unwrap();
        assert_eq!(scalar(&tape, none), 0.0);
        let same = loss_pairwise_discrepancy(&mut tape, g, &[g], 1.0).unwrap();
        assert_eq!(scalar(&tape, same), 0.0);

        let mut tape = Tape::new();
        let g = tape.param(rows(&[&[0.1, 0.9, 0.5, 0.3]]));
        let p = tape.param(rows(&[&[0.7, 0.2, 0.4, 0.6]]));
        let l = loss_pairwise_discrepancy(&mut tape, g, &[p], 1.0).unwrap();
        assert!((scalar(&tape, l) - 0.42331744929313897).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(p).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        assert!(tape.grad(g).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_cases() {
        let cfg = LossConfig {
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            temperature: 1.0,
        };
        assert_eq!(LossBreakdown::compose(1.0, 1.0, 1.0, 1.0, &cfg).total, 2.0);
        let cfg = LossConfig {
            alpha: 0.3,
            beta: 0.15,
            lambda: 0.1,
            temperature: 1.0,
        };
        let b = LossBreakdown::compose(0.7, 1.3, 0.4, 2.2, &cfg);
        assert!((b.total - (0.7 + 0.39 + 0.06 - 0.22)).abs() < 1e-12);

        let mut tape = Tape::new();
        let t = tape.constant(Tensor::scalar(0.9));
        let no_extra = LossConfig {
            beta: 0.0,
            lambda: 0.0,
            ..LossConfig::default()
        };
        let terms = LossTerms {
            task: t,
            rehearsal: None,
            cr: None,
            pd: None,
        };
        let (v, b) = loss_total(&mut tape, terms, &no_extra).unwrap();
        assert_eq!(v, t);
        assert_eq!(b.total, 0.9);

        let r = tape.constant(Tensor::scalar(1.3));
        let c = tape.constant(Tensor::scalar(0.4));
        let p = tape.constant(Tensor::scalar(2.2));
        let terms = LossTerms {
            task: t,
            rehearsal: Some(r),
            cr: Some(c),
            pd: Some(p),
        };
        let (v, b) = loss_total(&mut tape, terms, &cfg).unwrap();
        assert!((scalar(&tape, v) - b.total).abs() < 1e-12);
    }

    #[test]
    fn batch_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = 6;
        let mk = |rng: &mut ChaCha8Rng, c: usize| -> Vec<Vec<f64>> {
            (0..b).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (z, l, g, p) = (mk(&mut rng, 3), mk(&mut rng, 4), mk(&mut rng, 5), mk(&mut rng, 5));
        let perm = [3, 0, 5, 1, 4, 2];
        let shuffle = |v: &Vec<Vec<f64>>| perm.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let eval = |z: &[Vec<f64>], l: &[Vec<f64>], g: &[Vec<f64>], p: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let lv = tape.constant(Tensor::from_rows(l).unwrap());
            let gv = tape.constant(Tensor::from_rows(g).unwrap());
            let pv = tape.constant(Tensor::from_rows(p).unwrap());
            let cr = loss_consistency(&mut tape, z, lv).unwrap();
            let pd = loss_pairwise_discrepancy(&mut tape, gv, &[pv], 1.0).unwrap();
            (scalar(&tape, cr), scalar(&tape, pd))
        };
        let a = eval(&z, &l, &g, &p);
        let s = eval(&shuffle(&z), &shuffle(&l), &shuffle(&g), &shuffle(&p));
        assert!((a.0 - s.0).abs() < 1e-12);
        assert!((a.1 - s.1).abs() < 1e-12);
    }

    #[test]
    fn descending_negative_discrepancy_increases_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = Tensor::new(vec![2, 4], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let lambda = 0.1;
        let eval = |g: &[f64]| {
            let mut tape = Tape::new();
            let gv = tape.param(Tensor::new(vec![2, 4], g.to_vec()).unwrap());
            let pv = tape.constant(p.clone());
            let pd = loss_pairwise_discrepancy(&mut tape, gv, &[pv], 1.0).unwrap();
            let obj = tape.scale(pd, -lambda);
            tape.backward(obj).unwrap();
            (scalar(&tape, pd), tape.grad(gv).unwrap().to_vec())
        };
        let (before, grad) = eval(&g);
        g.iter_mut().zip(&grad).for_each(|(x, d)| *x -= 0.01 * d);
        let (after, _) = eval(&g);
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            alpha: -0.1,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            temperature: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
