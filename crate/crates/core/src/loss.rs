//! Training criteria with their gradients.
//!
//! Reduction convention: each per-image norm is a per-pixel mean, and batch
//! terms are averaged over the batch. Loss values are therefore independent
//! of image resolution and batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, Grid};

pub const REDUCTION: &str = "per-pixel-mean within each image, mean over batch";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the over/under segmentation ratio term.
    pub lambda: f64,
    pub eps: f64,
    /// Restrict the size loss to ground-truth foreground pixels.
    pub size_foreground_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.01,
            eps: 1e-10,
            size_foreground_only: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::argument("lambda must be >= 0"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::argument("eps must be > 0"));
        }
        Ok(())
    }
}

/// A loss value with its gradient w.r.t. each prediction in the batch.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Grid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_con: f64,
    pub l_thr: f64,
    pub l_ousr: f64,
    pub l_size: f64,
    pub total: f64,
}

fn check_batch(pred: &[Grid], target: &[Grid], what: &str) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::argument(format!("{what}: empty batch")));
    }
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "{what}: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    for (p, t) in pred.iter().zip(target) {
        p.check_same_dims(t, what)?;
    }
    Ok(())
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-image term and per-pixel gradient (before the 1/N batch factor),
/// reduced in batch order.
fn batch_mean(
    pred: &[Grid],
    target: &[Grid],
    per_image: impl Fn(&Grid, &Grid) -> (f64, Grid),
) -> LossValue {
    let n = pred.len() as f64;
    let mut values = Vec::with_capacity(pred.len());
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let (v, mut g) = per_image(p, t);
        g.as_mut_slice().iter_mut().for_each(|x| *x /= n);
        values.push(v);
        grads.push(g);
    }
    LossValue {
        value: pairwise_sum(&values) / n,
        grads,
    }
}

/// Squared error, halved: `1/(2N) * sum_k mean((C_k - Ĉ_k)^2)`.
pub fn l_con(pred: &[Grid], target: &[Grid]) -> Result<LossValue> {
    check_batch(pred, target, "l_con")?;
    Ok(batch_mean(pred, target, |p, t| {
        let m = p.len() as f64;
        let diff: Vec<f64> = p.as_slice().iter().zip(t.as_slice()).map(|(a, b)| a - b).collect();
        let sq: Vec<f64> = diff.iter().map(|d| d * d).collect();
        let grad = diff.iter().map(|d| d / m).collect();
        (0.5 * pairwise_sum(&sq) / m, Grid::from_raw(p.height(), p.width(), grad))
    }))
}

fn l1(pred: &[Grid], target: &[Grid], mask_foreground: bool) -> LossValue {
    batch_mean(pred, target, |p, t| {
        let fg: Vec<bool> = t
            .as_slice()
            .iter()
            .map(|&v| !mask_foreground || v > 0.0)
            .collect();
        let count = fg.iter().filter(|&&f| f).count();
        if count == 0 {
            return (0.0, Grid::zeros(p.height(), p.width()));
        }
        let m = count as f64;
        let abs: Vec<f64> = p
            .as_slice()
            .iter()
            .zip(t.as_slice())
            .zip(&fg)
            .map(|((a, b), &f)| if f { (a - b).abs() } else { 0.0 })
            .collect();
        let grad = p
            .as_slice()
            .iter()
            .zip(t.as_slice())
            .zip(&fg)
            .map(|((a, b), &f)| if f { sign(a - b) / m } else { 0.0 })
            .collect();
        (pairwise_sum(&abs) / m, Grid::from_raw(p.height(), p.width(), grad))
    })
}

/// `1/N * sum_k mean|C_k - B̂_k|`, subgradient `sign(B̂ - C)`.
pub fn l_thr(binary: &[Grid], target: &[Grid]) -> Result<LossValue> {
    check_batch(binary, target, "l_thr")?;
    Ok(l1(binary, target, false))
}

/// `1/N * sum_k mean|S_k - Ŝ_k|` over all pixels, or over ground-truth
/// foreground only when `foreground_only` is set.
pub fn l_size(pred: &[Grid], target: &[Grid], foreground_only: bool) -> Result<LossValue> {
    check_batch(pred, target, "l_size")?;
    Ok(l1(pred, target, foreground_only))
}

/// Over/under segmentation ratio of one binary map against its target, with
/// the gradient w.r.t. the binary map.
pub fn ousr_single(binary: &Grid, target: &Grid, eps: f64) -> Result<(f64, Grid)> {
    binary.check_same_dims(target, "l_ousr")?;
    let b = binary.as_slice();
    let c = target.as_slice();
    let bg_total: f64 = pairwise_sum(&c.iter().map(|v| 1.0 - v).collect::<Vec<_>>()) + eps;
    let fg_total: f64 = pairwise_sum(c) + eps;
    let over: Vec<f64> = b.iter().zip(c).map(|(b, c)| b * (1.0 - c)).collect();
    let under: Vec<f64> = b.iter().zip(c).map(|(b, c)| (c - b).abs() * c).collect();
    let value = pairwise_sum(&over) / bg_total + pairwise_sum(&under) / fg_total;
    let grad = b
        .iter()
        .zip(c)
        .map(|(b, c)| (1.0 - c) / bg_total + sign(b - c) * c / fg_total)
        .collect();
    Ok((value, Grid::from_raw(binary.height(), binary.width(), grad)))
}

/// Batch mean of [`ousr_single`].
pub fn l_ousr(binary: &[Grid], target: &[Grid], eps: f64) -> Result<LossValue> {
    check_batch(binary, target, "l_ousr")?;
    let mut out = Vec::with_capacity(binary.len());
    for (b, t) in binary.iter().zip(target) {
        out.push(ousr_single(b, t, eps)?);
    }
    let n = binary.len() as f64;
    let values: Vec<f64> = out.iter().map(|(v, _)| *v).collect();
    Ok(LossValue {
        value: pairwise_sum(&values) / n,
        grads: out
            .into_iter()
            .map(|(_, g)| g.map(|x| x / n))
            .collect(),
    })
}

/// Weighted sum `L_con + L_thr + lambda * L_ousr + L_size`.
pub fn total_loss(l_con: f64, l_thr: f64, l_ousr: f64, l_size: f64, cfg: &LossConfig) -> LossReport {
    LossReport {
        l_con,
        l_thr,
        l_ousr,
        l_size,
        total: l_con + l_thr + cfg.lambda * l_ousr + l_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(rows: usize, cols: usize, v: &[f64]) -> Grid {
        Grid::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Grid {
        Grid::from_fn(h, w, |_, _| rng.gen_range(lo..hi))
    }

    fn binary(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
        Grid::from_fn(h, w, |_, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
    }

    /// Central differences of `f` w.r.t. every pixel of `x`.
    fn fd_grad(x: &Grid, f: impl Fn(&Grid) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += h;
                let mut xm = x.clone();
                xm.as_mut_slice()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn l_con_hand_cases() {
        let c = g(1, 2, &[1.0, 0.0]);
        let p = g(1, 2, &[0.5, 0.5]);
        assert_eq!(l_con(&[p], &[c.clone()]).unwrap().value, 0.125);
        assert_eq!(l_con(&[c.clone()], &[c]).unwrap().value, 0.0);
    }

    #[test]
    fn l_con_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = vec![random(&mut rng, 4, 5, 0.0, 1.0), random(&mut rng, 4, 5, 0.0, 1.0)];
        let t = vec![binary(&mut rng, 4, 5), binary(&mut rng, 4, 5)];
        let lv = l_con(&p, &t).unwrap();
        for k in 0..2 {
            let fd = fd_grad(&p[k], |x| {
                let mut q = p.clone();
                q[k] = x.clone();
                l_con(&q, &t).unwrap().value
            });
            for (a, n) in lv.grads[k].as_slice().iter().zip(&fd) {
                assert!((a - n).abs() <= 1e-8 * a.abs().max(1e-3), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn l_thr_hand_cases() {
        let c = g(1, 2, &[1.0, 0.0]);
        let b = g(1, 2, &[1.0, 1.0]);
        assert_eq!(l_thr(&[b], &[c.clone()]).unwrap().value, 0.5);
        assert_eq!(l_thr(&[c.clone()], &[c]).unwrap().value, 0.0);
    }

    #[test]
    fn l_thr_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let b: Vec<Grid> = (0..3).map(|_| binary(&mut rng, 6, 7)).collect();
            let c: Vec<Grid> = (0..3).map(|_| binary(&mut rng, 6, 7)).collect();
            let mut expect = 0.0;
            for k in 0..3 {
                let mut s = 0.0;
                for i in 0..42 {
                    s += (c[k].as_slice()[i] - b[k].as_slice()[i]).abs();
                }
                expect += s / 42.0;
            }
            expect /= 3.0;
            let got = l_thr(&b, &c).unwrap().value;
            assert!((got - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn l_ousr_hand_cases() {
        let c = g(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = g(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let v = l_ousr(&[b], &[c.clone()], 1e-10).unwrap().value;
        assert!((v - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(l_ousr(&[c.clone()], &[c], 1e-10).unwrap().value, 0.0);

        // negative sample: f false positives over P pixels, empty foreground
        let c = Grid::zeros(2, 3);
        let b = g(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let v = l_ousr(&[b], &[c], 1e-10).unwrap().value;
        assert!((v - 2.0 / (6.0 + 1e-10)).abs() < 1e-15);
    }

    #[test]
    fn l_ousr_gradient_matches_fd_off_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = binary(&mut rng, 5, 5);
        // continuous relaxation away from the |C - B| kink at B = C
        let b = Grid::from_fn(5, 5, |r, col| {
            let v = rng.gen_range(0.05..0.45);
            if c.get(r, col) > 0.5 {
                v
            } else {
                v + 0.5
            }
        });
        let (_, grad) = ousr_single(&b, &c, 1e-10).unwrap();
        let fd = fd_grad(&b, |x| ousr_single(x, &c, 1e-10).unwrap().0);
        for (a, n) in grad.as_slice().iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn l_size_hand_cases() {
        let s = g(1, 2, &[2.5, 0.0]);
        let p = g(1, 2, &[2.0, 0.5]);
        assert_eq!(l_size(&[p.clone()], &[s.clone()], false).unwrap().value, 0.5);
        assert_eq!(l_size(&[s.clone()], &[s.clone()], false).unwrap().value, 0.0);
        // foreground-only: just the first pixel
        assert_eq!(l_size(&[p], &[s], true).unwrap().value, 0.5);
    }

    #[test]
    fn l_size_subgradient_matches_fd_off_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = vec![random(&mut rng, 4, 4, 0.0, 5.0)];
        let p = vec![random(&mut rng, 4, 4, 0.0, 5.0)];
        let lv = l_size(&p, &t, false).unwrap();
        let fd = fd_grad(&p[0], |x| l_size(&[x.clone()], &t, false).unwrap().value);
        for (a, n) in lv.grads[0].as_slice().iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn shape_errors() {
        let a = Grid::zeros(2, 2);
        let b = Grid::zeros(2, 3);
        assert!(matches!(l_con(&[a.clone()], &[b.clone()]), Err(Error::Shape(_))));
        assert!(matches!(l_thr(&[a.clone()], &[b.clone()]), Err(Error::Shape(_))));
        assert!(matches!(l_size(&[a.clone()], &[b.clone()], false), Err(Error::Shape(_))));
        assert!(matches!(l_con(&[a.clone()], &[a.clone(), a]), Err(Error::Shape(_))));
    }

    #[test]
    fn total_loss_weighting() {
        let cfg = LossConfig::default();
        let r = total_loss(1.0, 2.0, 3.0, 4.0, &cfg);
        assert!((r.total - 7.03).abs() < 1e-12);
        let r0 = total_loss(1.0, 2.0, 3.0, 4.0, &LossConfig { lambda: 0.0, ..cfg });
        assert_eq!(r0.total, 7.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &cfg).total, 0.0);
    }

    #[test]
    fn duplicating_batch_leaves_losses_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<Grid> = (0..2).map(|_| random(&mut rng, 5, 6, 0.0, 1.0)).collect();
        let b: Vec<Grid> = (0..2).map(|_| binary(&mut rng, 5, 6)).collect();
        let c: Vec<Grid> = (0..2).map(|_| binary(&mut rng, 5, 6)).collect();
        let dup = |v: &Vec<Grid>| v.iter().chain(v.iter()).cloned().collect::<Vec<_>>();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * a.abs().max(1.0);
        assert!(close(l_con(&p, &c).unwrap().value, l_con(&dup(&p), &dup(&c)).unwrap().value));
        assert!(close(l_thr(&b, &c).unwrap().value, l_thr(&dup(&b), &dup(&c)).unwrap().value));
        assert!(close(
            l_ousr(&b, &c, 1e-10).unwrap().value,
            l_ousr(&dup(&b), &dup(&c), 1e-10).unwrap().value
        ));
        assert!(close(
            l_size(&p, &c, false).unwrap().value,
            l_size(&dup(&p), &dup(&c), false).unwrap().value
        ));
    }
}
