//! Forward and backward kernels behind the graph nodes.

use crate::error::{Error, Result};
use crate::graph::{NormMode, RunningStats, RUNNING_MOMENTUM};
use crate::tensor::Tensor;

pub(crate) fn dense_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        let cols = if w.rank() == 2 { w.shape()[1] } else { 0 };
        return Err(Error::shape("dense", &[x.shape()[0], cols], x.shape()));
    }
    let (n, input) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let mut y = vec![0.0; n * out];
    for b in 0..n {
        let xr = &x.data()[b * input..(b + 1) * input];
        for o in 0..out {
            let wr = &w.data()[o * input..(o + 1) * input];
            y[b * out + o] = xr.iter().zip(wr).map(|(a, c)| a * c).sum();
        }
    }
    Tensor::new(vec![n, out], y)
}

pub(crate) fn dense_backward(x: &Tensor, w: &Tensor, up: &Tensor) -> (Tensor, Tensor) {
    let (n, input) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    for b in 0..n {
        for o in 0..out {
            let u = up[b * out + o];
            if u == 0.0 {
                continue;
            }
            for i in 0..input {
                gx[b * input + i] += u * w[o * input + i];
                gw[o * input + i] += u * x[b * input + i];
            }
        }
    }
    (gx, gw)
}

fn channel_layout(x: &Tensor) -> (usize, usize, usize) {
    let n = x.shape()[0];
    let c = if x.rank() > 1 { x.shape()[1] } else { 1 };
    let s = x.len() / (n * c);
    (n, c, s)
}

pub(crate) fn add_bias_forward(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, c, s) = channel_layout(x);
    b.expect_shape(&[c], "bias")?;
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b[(i / s) % c];
    }
    Ok(y)
}

/// Sums `up` over every axis except axis 1.
pub(crate) fn channel_sum(up: &Tensor, c: usize) -> Tensor {
    let (_, _, s) = channel_layout(up);
    let mut g = Tensor::zeros(&[c]);
    for (i, &u) in up.data().iter().enumerate() {
        g[(i / s) % c] += u;
    }
    g
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<ConvDims> {
    if x.rank() != 4 || k.rank() != 4 || x.shape()[1] != k.shape()[1] {
        let kc = if k.rank() == 4 { k.shape()[1] } else { 0 };
        return Err(Error::shape("conv2d", &[x.shape()[0], kc, 0, 0], x.shape()));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape("conv2d kernel", &[h + 2 * padding, w + 2 * padding], &[kh, kw]));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Visits every (output index, input index, kernel index) triple with the
/// input position inside the image.
fn conv_for_each(d: &ConvDims, stride: usize, padding: usize, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..d.n {
        for o in 0..d.o {
            for y in 0..d.oh {
                for x in 0..d.ow {
                    let out_idx = ((b * d.o + o) * d.oh + y) * d.ow + x;
                    for c in 0..d.c {
                        for ky in 0..d.kh {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy as usize >= d.h {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (x * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix as usize >= d.w {
                                    continue;
                                }
                                let in_idx = ((b * d.c + c) * d.h + iy as usize) * d.w + ix as usize;
                                let k_idx = ((o * d.c + c) * d.kh + ky) * d.kw + kx;
                                f(out_idx, in_idx, k_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let d = conv_dims(x, k, stride, padding)?;
    let mut y = Tensor::zeros(&[d.n, d.o, d.oh, d.ow]);
    conv_for_each(&d, stride, padding, |oi, ii, ki| y[oi] += x[ii] * k[ki]);
    Ok(y)
}

pub(crate) fn conv2d_backward(x: &Tensor, k: &Tensor, up: &Tensor, stride: usize, padding: usize) -> (Tensor, Tensor) {
    let d = conv_dims(x, k, stride, padding).expect("validated in forward");
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    conv_for_each(&d, stride, padding, |oi, ii, ki| {
        let u = up[oi];
        gx[ii] += u * k[ki];
        gk[ki] += u * x[ii];
    });
    (gx, gk)
}

fn norm_group(mode: NormMode, i: usize, c: usize, s: usize) -> usize {
    match mode {
        NormMode::Batch => (i / s) % c,
        NormMode::Layer => i / (c * s),
    }
}

/// Output, normalized input, per-group inverse std, and whether the
/// statistics came from the current batch.
pub(crate) type NormOutput = (Tensor, Tensor, Vec<f64>, bool);

pub(crate) fn normalize_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    mode: NormMode,
    eps: f64,
    train: bool,
    running: Option<&mut RunningStats>,
) -> Result<NormOutput> {
    let (n, c, s) = channel_layout(x);
    scale.expect_shape(&[c], "normalize scale")?;
    shift.expect_shape(&[c], "normalize shift")?;
    let groups = match mode {
        NormMode::Batch => c,
        NormMode::Layer => n,
    };
    let group_size = (x.len() / groups) as f64;

    let use_running = mode == NormMode::Batch && !train;
    if mode == NormMode::Batch && train && n < 2 {
        return Err(Error::DegenerateBatch(n));
    }

    let (mean, var) = if use_running {
        match running {
            Some(r) if !r.mean.is_empty() => (r.mean.clone(), r.var.clone()),
            _ => (vec![0.0; c], vec![1.0; c]),
        }
    } else {
        let mut mean = vec![0.0; groups];
        for (i, &v) in x.data().iter().enumerate() {
            mean[norm_group(mode, i, c, s)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= group_size);
        let mut var = vec![0.0; groups];
        for (i, &v) in x.data().iter().enumerate() {
            let g = norm_group(mode, i, c, s);
            var[g] += (v - mean[g]) * (v - mean[g]);
        }
        var.iter_mut().for_each(|v| *v /= group_size);
        if let (Some(r), NormMode::Batch) = (running, mode) {
            if r.mean.is_empty() {
                r.mean = vec![0.0; c];
                r.var = vec![1.0; c];
            }
            for ch in 0..c {
                r.mean[ch] = RUNNING_MOMENTUM * r.mean[ch] + (1.0 - RUNNING_MOMENTUM) * mean[ch];
                r.var[ch] = RUNNING_MOMENTUM * r.var[ch] + (1.0 - RUNNING_MOMENTUM) * var[ch];
            }
        }
        (mean, var)
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for (i, &v) in x.data().iter().enumerate() {
        let g = norm_group(mode, i, c, s);
        let ch = (i / s) % c;
        let h = (v - mean[g]) * inv_std[g];
        x_hat[i] = h;
        y[i] = scale[ch] * h + shift[ch];
    }
    Ok((y, x_hat, inv_std, !use_running))
}

pub(crate) fn normalize_backward(
    up: &Tensor,
    x_hat: &Tensor,
    inv_std: &[f64],
    scale: &Tensor,
    mode: NormMode,
    batch_stats: bool,
) -> (Tensor, Tensor, Tensor) {
    let (_, c, s) = channel_layout(up);
    let groups = inv_std.len();
    let group_size = (up.len() / groups) as f64;
    let mut g_scale = Tensor::zeros(&[c]);
    let mut g_shift = Tensor::zeros(&[c]);
    let mut d_hat = Tensor::zeros(up.shape());
    for (i, &u) in up.data().iter().enumerate() {
        let ch = (i / s) % c;
        g_scale[ch] += u * x_hat[i];
        g_shift[ch] += u;
        d_hat[i] = u * scale[ch];
    }
    let mut gx = Tensor::zeros(up.shape());
    if !batch_stats {
        for i in 0..up.len() {
            gx[i] = d_hat[i] * inv_std[norm_group(mode, i, c, s)];
        }
        return (gx, g_scale, g_shift);
    }
    let mut sum_d = vec![0.0; groups];
    let mut sum_dh = vec![0.0; groups];
    for i in 0..up.len() {
        let g = norm_group(mode, i, c, s);
        sum_d[g] += d_hat[i];
        sum_dh[g] += d_hat[i] * x_hat[i];
    }
    for i in 0..up.len() {
        let g = norm_group(mode, i, c, s);
        gx[i] = inv_std[g] / group_size * (group_size * d_hat[i] - sum_d[g] - x_hat[i] * sum_dh[g]);
    }
    (gx, g_scale, g_shift)
}

/// Normalizes with statistics of `x` itself: per feature channel over the
/// batch (and spatial) axes in batch mode, per sample over all feature
/// axes in layer mode. `scale`/`shift` are per channel (axis 1). Uses the
/// biased variance estimator.
pub fn normalize(x: &Tensor, mode: NormMode, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let (y, ..) = normalize_forward(x, scale, shift, mode, eps, true, None)?;
    if !y.is_finite() {
        return Err(Error::NumericOverflow { context: "normalize".into() });
    }
    Ok(y)
}

/// Class indices from either an `[N]` index vector or `[N, C]` one-hot rows.
pub(crate) fn class_targets(labels: &Tensor, logits: &Tensor) -> Result<Vec<usize>> {
    if logits.rank() != 2 {
        return Err(Error::shape("classifier logits", &[logits.shape()[0], 0], logits.shape()));
    }
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.shape() == [n] {
        labels
            .data()
            .iter()
            .enumerate()
            .map(|(row, &y)| {
                if y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes {
                    Ok(y as usize)
                } else {
                    Err(Error::Data(format!("label {y} at row {row} is not a class index below {classes}")))
                }
            })
            .collect()
    } else if labels.shape() == [n, classes] {
        (0..n)
            .map(|row| {
                let r = labels.row(row);
                let hot: Vec<usize> = (0..classes).filter(|&c| r[c] == 1.0).collect();
                if hot.len() == 1 && r.iter().all(|&v| v == 0.0 || v == 1.0) {
                    Ok(hot[0])
                } else {
                    Err(Error::Data(format!("row {row} is not a one-hot label")))
                }
            })
            .collect()
    } else {
        Err(Error::shape("labels", &[n], labels.shape()))
    }
}

/// Mean softmax cross-entropy and the softmax probabilities.
pub(crate) fn softmax_cross_entropy(z: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let mut probs = Tensor::zeros(z.shape());
    let mut total = 0.0;
    for b in 0..n {
        let row = z.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[targets[b]];
        for k in 0..c {
            probs[b * c + k] = (row[k] - lse).exp();
        }
    }
    (total / n as f64, probs)
}

pub(crate) fn cross_entropy_grad(probs: &Tensor, targets: &[usize], up: f64) -> Tensor {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let mut g = probs.scale(up / n as f64);
    for (b, &t) in targets.iter().enumerate() {
        g[b * c + t] -= up / n as f64;
    }
    g
}

fn hinge_sign(k: usize, target: usize) -> f64 {
    if k == target {
        1.0
    } else {
        -1.0
    }
}

/// One-vs-all squared hinge with `{-1, +1}` targets, summed over classes,
/// averaged over the batch.
pub(crate) fn squared_hinge(z: &Tensor, targets: &[usize]) -> f64 {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let mut total = 0.0;
    for b in 0..n {
        for k in 0..c {
            let margin = (1.0 - hinge_sign(k, targets[b]) * z[b * c + k]).max(0.0);
            total += margin * margin;
        }
    }
    total / n as f64
}

pub(crate) fn squared_hinge_grad(z: &Tensor, targets: &[usize], up: f64) -> Tensor {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let mut g = Tensor::zeros(z.shape());
    for b in 0..n {
        for k in 0..c {
            let y = hinge_sign(k, targets[b]);
            let margin = (1.0 - y * z[b * c + k]).max(0.0);
            g[b * c + k] = -2.0 * y * margin * up / n as f64;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(c: usize) -> Tensor {
        Tensor::full(&[c], 1.0)
    }

    #[test]
    fn layer_norm_of_two_values() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let y = normalize(&x, NormMode::Layer, &ones(2), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn batch_norm_of_constant_column_is_zero() {
        let x = Tensor::new(vec![3, 2], vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]).unwrap();
        let y = normalize(&x, NormMode::Batch, &ones(2), &Tensor::zeros(&[2]), 1e-5).unwrap();
        for b in 0..3 {
            assert_eq!(y[b * 2], 0.0);
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let err = normalize(&x, NormMode::Batch, &ones(2), &Tensor::zeros(&[2]), 1e-5).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(1)));
        assert!(normalize(&x, NormMode::Layer, &ones(2), &Tensor::zeros(&[2]), 1e-5).is_ok());
    }

    #[test]
    fn normalize_rejects_wrong_affine_shape() {
        let x = Tensor::zeros(&[4, 3]);
        assert!(normalize(&x, NormMode::Layer, &ones(2), &Tensor::zeros(&[3]), 1e-5).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[5, 7], |_| rng.random_range(-1.0..1.0));
        let y = normalize(&x, NormMode::Layer, &ones(7), &Tensor::zeros(&[7]), 0.0).unwrap();
        for b in 0..5 {
            let r = y.row(b);
            let mean = r.iter().sum::<f64>() / 7.0;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_and_layer_modes_differ_on_random_input() {
        // Direct evaluation of both definitions on a 4x4 tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[4, 4], |_| rng.random_range(-1.0..1.0));
        let zero = Tensor::zeros(&[4]);
        let b = normalize(&x, NormMode::Batch, &ones(4), &zero, 0.0).unwrap();
        let l = normalize(&x, NormMode::Layer, &ones(4), &zero, 0.0).unwrap();
        let col = |j: usize| -> Vec<f64> { (0..4).map(|i| x[i * 4 + j]).collect() };
        let std_of = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
            (m, var.sqrt())
        };
        for i in 0..4 {
            for j in 0..4 {
                let (cm, cs) = std_of(&col(j));
                let (rm, rs) = std_of(x.row(i));
                assert!((b[i * 4 + j] - (x[i * 4 + j] - cm) / cs).abs() < 1e-12);
                assert!((l[i * 4 + j] - (x[i * 4 + j] - rm) / rs).abs() < 1e-12);
            }
        }
        assert!(b.data().iter().zip(l.data()).any(|(p, q)| (p - q).abs() > 1e-6));
    }

    #[test]
    fn batch_norm_over_spatial_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[2, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let y = normalize(&x, NormMode::Batch, &ones(3), &Tensor::zeros(&[3]), 0.0).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..y.len()).filter(|i| (i / 4) % 3 == c).map(|i| y[i]).collect();
            assert_eq!(vals.len(), 8);
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut stats = RunningStats { mean: Vec::new(), var: Vec::new() };
        normalize_forward(&x, &ones(1), &Tensor::zeros(&[1]), NormMode::Batch, 0.0, true, Some(&mut stats)).unwrap();
        assert!((stats.mean[0] - 0.2).abs() < 1e-15);
        assert!((stats.var[0] - 1.0).abs() < 1e-15);
        let (y, ..) = normalize_forward(&x, &ones(1), &Tensor::zeros(&[1]), NormMode::Batch, 0.0, false, Some(&mut stats)).unwrap();
        assert!((y[0] - 0.8).abs() < 1e-12);
        // A single sample is fine at evaluation time.
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(normalize_forward(&one, &ones(1), &Tensor::zeros(&[1]), NormMode::Batch, 0.0, false, Some(&mut stats)).is_ok());
    }

    #[test]
    fn class_targets_accepts_indices_and_one_hot() {
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(class_targets(&Tensor::from_vec(vec![2.0, 0.0]), &z).unwrap(), vec![2, 0]);
        let oh = Tensor::new(vec![2, 3], vec![0., 1., 0., 1., 0., 0.]).unwrap();
        assert_eq!(class_targets(&oh, &z).unwrap(), vec![1, 0]);
        assert!(class_targets(&Tensor::from_vec(vec![3.0, 0.0]), &z).is_err());
        assert!(class_targets(&Tensor::from_vec(vec![0.5, 0.0]), &z).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        for c in [2usize, 3, 10] {
            let z = Tensor::full(&[4, c], 0.7);
            let (loss, _) = softmax_cross_entropy(&z, &[0, 1, 0, 1]);
            assert!((loss - (c as f64).ln()).abs() < 1e-14);
        }
    }
}
