//! Frequency enhanced attention: fixed SRM high-pass residuals feed two conv
//! blocks and a spatial attention layer whose sigmoid map multiplicatively
//! gates the feature pyramid.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ForwardCtx, ParamSet};
use crate::tensor::Var;

/// The three fixed residual kernels with their normalizing divisors:
/// a first-order second difference (/2), the 3x3 "KB" kernel (/4), and the
/// 5x5 "KV" kernel (/12). All are constants and never trained.
pub struct SrmKernels {
    pub kernels: [Array2<f64>; 3],
}

impl SrmKernels {
    pub fn standard3() -> Self {
        #[rustfmt::skip]
        let first_order = [
            [0.0, 0.0,  0.0, 0.0, 0.0],
            [0.0, 0.0,  0.0, 0.0, 0.0],
            [0.0, 1.0, -2.0, 1.0, 0.0],
            [0.0, 0.0,  0.0, 0.0, 0.0],
            [0.0, 0.0,  0.0, 0.0, 0.0],
        ];
        #[rustfmt::skip]
        let kb = [
            [0.0,  0.0,  0.0,  0.0, 0.0],
            [0.0, -1.0,  2.0, -1.0, 0.0],
            [0.0,  2.0, -4.0,  2.0, 0.0],
            [0.0, -1.0,  2.0, -1.0, 0.0],
            [0.0,  0.0,  0.0,  0.0, 0.0],
        ];
        #[rustfmt::skip]
        let kv = [
            [-1.0,  2.0,  -2.0,  2.0, -1.0],
            [ 2.0, -6.0,   8.0, -6.0,  2.0],
            [-2.0,  8.0, -12.0,  8.0, -2.0],
            [ 2.0, -6.0,   8.0, -6.0,  2.0],
            [-1.0,  2.0,  -2.0,  2.0, -1.0],
        ];
        let build = |m: [[f64; 5]; 5], div: f64| {
            Array2::from_shape_fn((5, 5), |(i, j)| m[i][j] / div)
        };
        SrmKernels {
            kernels: [
                build(first_order, 2.0),
                build(kb, 4.0),
                build(kv, 12.0),
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "standard3" => Ok(Self::standard3()),
            other => Err(Error::Config(format!("unknown SRM kernel set `{other}`"))),
        }
    }
}

/// ITU-R 601 luminance of a `[C,H,W]` image with C in {1,3}.
fn luminance(x: &Array3<f64>) -> Result<Array2<f64>> {
    let (c, h, w) = x.dim();
    match c {
        1 => Ok(x.index_axis(ndarray::Axis(0), 0).to_owned()),
        3 => {
            let mut out = Array2::zeros((h, w));
            for y in 0..h {
                for xx in 0..w {
                    out[[y, xx]] = 0.299 * x[[0, y, xx]]
                        + 0.587 * x[[1, y, xx]]
                        + 0.114 * x[[2, y, xx]];
                }
            }
            Ok(out)
        }
        other => Err(Error::invalid_input(format!(
            "srm_filter expects 1 or 3 channels, got {other}"
        ))),
    }
}

/// Mirror index for symmetric (edge-inclusive) padding.
fn sym_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    // Fold into [0, 2*len) then reflect; lengths here always exceed the
    // 2-pixel pad so one fold suffices.
    if i < 0 {
        i = -i - 1;
    }
    if i >= len {
        i = 2 * len - 1 - i;
    }
    i as usize
}

/// SRM noise residuals: `[C,H,W]` (C in {1,3}) -> `[3,H,W]`, one channel per
/// kernel, cross-correlation with symmetric padding.
pub fn srm_filter(x: &Array3<f64>, kernels: &SrmKernels) -> Result<Array3<f64>> {
    let (_, h, w) = x.dim();
    if h < 5 || w < 5 {
        return Err(Error::invalid_input(format!(
            "srm_filter needs at least 5x5 input, got {h}x{w}"
        )));
    }
    let lum = luminance(x)?;
    let mut out = Array3::zeros((3, h, w));
    for (ki, kernel) in kernels.kernels.iter().enumerate() {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ky in 0..5 {
                    for kx in 0..5 {
                        let sy = sym_index(y as isize + ky as isize - 2, h);
                        let sx = sym_index(xx as isize + kx as isize - 2, w);
                        acc += kernel[[ky, kx]] * lum[[sy, sx]];
                    }
                }
                out[[ki, y, xx]] = acc;
            }
        }
    }
    Ok(out)
}

/// Gate one pyramid level with an attention map of identical spatial size.
/// `out[c,h,w] = level[c,h,w] * attention[0,h,w]`.
pub fn apply_fea(level: &Array3<f64>, attention: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = level.dim();
    let (ac, ah, aw) = attention.dim();
    if ac != 1 || ah != h || aw != w {
        return Err(Error::internal(format!(
            "attention map {ac}x{ah}x{aw} does not match level {c}x{h}x{w}"
        )));
    }
    let mut out = level.clone();
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[ci, y, xx]] *= attention[[0, y, xx]];
            }
        }
    }
    Ok(out)
}

/// Learnable branch: two conv blocks (conv + batch norm + rectifier) over the
/// SRM residuals, then a spatial attention layer (channel-max and channel-mean
/// maps, 7x7 conv, logistic squashing).
pub struct AttentionBranch {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    attn_conv: Conv2d,
}

impl AttentionBranch {
    pub fn new(channels: usize) -> Self {
        AttentionBranch {
            conv1: Conv2d::new("fea.conv1", 3, channels, 3, 1, 1),
            bn1: BatchNorm2d::new("fea.bn1", channels),
            conv2: Conv2d::new("fea.conv2", channels, channels, 3, 1, 1),
            bn2: BatchNorm2d::new("fea.bn2", channels),
            attn_conv: Conv2d::new("fea.attn", 2, 1, 7, 1, 3),
        }
    }

    pub fn init(&self, params: &mut ParamSet, seed: u64) {
        let mut rng = crate::rng::stream(seed, "init:fea.conv1", 0);
        self.conv1.init(params, &mut rng);
        self.bn1.init(params);
        let mut rng = crate::rng::stream(seed, "init:fea.conv2", 0);
        self.conv2.init(params, &mut rng);
        self.bn2.init(params);
        let mut rng = crate::rng::stream(seed, "init:fea.attn", 0);
        self.attn_conv.init(params, &mut rng);
    }

    /// Full branch: SRM residual batch `[N,3,H,W]` -> attention `[N,1,H,W]`.
    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, residuals: Var<'t>) -> Var<'t> {
        let x = self.conv1.forward(ctx, residuals);
        let x = self.bn1.forward(ctx, x).relu();
        let x = self.conv2.forward(ctx, x);
        let x = self.bn2.forward(ctx, x).relu();
        self.spatial_attention(ctx, x)
    }

    /// Spatial attention over `[N,C,H,W]` features: values strictly in (0,1).
    pub fn spatial_attention<'t>(&self, ctx: &ForwardCtx<'t, '_>, f: Var<'t>) -> Var<'t> {
        let pooled = Var::concat(&[f.channel_max(), f.channel_mean()], 1);
        self.attn_conv.forward(ctx, pooled).sigmoid()
    }
}

/// SRM residuals for a batch of images, as a tape constant input.
pub fn srm_residual_batch(
    images: &[Array3<f64>],
    kernels: &SrmKernels,
) -> Result<ArrayD<f64>> {
    let n = images.len();
    let (_, h, w) = images[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[n, 3, h, w]));
    for (i, img) in images.iter().enumerate() {
        let res = srm_filter(img, kernels)?;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[i, c, y, x]] = res[[c, y, x]];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn kernels_are_high_pass() {
        let k = SrmKernels::standard3();
        for kernel in &k.kernels {
            assert!(kernel.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_gives_zero_response() {
        let k = SrmKernels::standard3();
        let img = Array3::from_elem((3, 16, 16), 0.42);
        let out = srm_filter(&img, &k).unwrap();
        let max = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-6, "high-pass must kill DC, got {max}");
    }

    #[test]
    fn linear_in_input() {
        let k = SrmKernels::standard3();
        let mut rng = crate::rng::stream(9, "fea", 0);
        let x = Array3::from_shape_fn((1, 12, 12), |_| rng.random_range(0.0..1.0));
        let y = Array3::from_shape_fn((1, 12, 12), |_| rng.random_range(0.0..1.0));
        let (a, b) = (1.7, -0.6);
        let combo = srm_filter(&(a * &x + b * &y), &k).unwrap();
        let parts = a * &srm_filter(&x, &k).unwrap() + b * &srm_filter(&y, &k).unwrap();
        let max = (&combo - &parts).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-5);
    }

    #[test]
    fn doubling_input_doubles_output() {
        let k = SrmKernels::standard3();
        let mut rng = crate::rng::stream(9, "fea", 1);
        let x = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(0.0..0.5));
        let twice = srm_filter(&x.mapv(|v| v * 2.0), &k).unwrap();
        let once = srm_filter(&x, &k).unwrap();
        let max = (&twice - &(2.0 * &once))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12);
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        let k = SrmKernels::standard3();
        let mut img = Array3::zeros((1, 15, 15));
        img[[0, 7, 7]] = 1.0;
        let out = srm_filter(&img, &k).unwrap();
        for (ki, kernel) in k.kernels.iter().enumerate() {
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let got = out[[ki, (7 + dy) as usize, (7 + dx) as usize]];
                    let expect = kernel[[(2 - dy) as usize, (2 - dx) as usize]];
                    assert!(
                        (got - expect).abs() < 1e-12,
                        "kernel {ki} at ({dy},{dx}): {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn too_small_input_rejected() {
        let k = SrmKernels::standard3();
        let img = Array3::zeros((1, 4, 8));
        assert!(srm_filter(&img, &k).is_err());
    }

    #[test]
    fn attention_stays_in_open_unit_interval() {
        let branch = AttentionBranch::new(4);
        let mut params = ParamSet::new();
        branch.init(&mut params, 11);
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, &params, true, false);
        let mut rng = crate::rng::stream(9, "fea", 2);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 10, 10]), |_| rng.random_range(-2.0..2.0));
        let a = branch.forward(&ctx, tape.constant(x));
        assert_eq!(a.shape(), vec![2, 1, 10, 10]);
        for &v in a.value().iter() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn attention_with_zeroed_conv_is_sigmoid_of_bias() {
        let branch = AttentionBranch::new(4);
        let mut params = ParamSet::new();
        branch.init(&mut params, 11);
        params.get_mut("fea.attn.w").fill(0.0);
        *params.get_mut("fea.attn.b") = ndarray::arr1(&[0.3]).into_dyn();
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, &params, true, false);
        let mut rng = crate::rng::stream(9, "fea", 3);
        let f = ArrayD::from_shape_fn(IxDyn(&[1, 4, 6, 6]), |_| rng.random_range(-1.0..1.0));
        let a = branch.spatial_attention(&ctx, tape.constant(f));
        let expect = 1.0 / (1.0 + (-0.3f64).exp());
        for &v in a.value().iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_identity_and_annihilator() {
        let mut rng = crate::rng::stream(9, "fea", 4);
        let level = Array3::from_shape_fn((4, 6, 6), |_| rng.random_range(-1.0..1.0));
        let ones = Array3::from_elem((1, 6, 6), 1.0);
        let zeros = Array3::zeros((1, 6, 6));
        assert_eq!(apply_fea(&level, &ones).unwrap(), level);
        assert!(apply_fea(&level, &zeros).unwrap().iter().all(|&v| v == 0.0));
        // random pair equals the scalar-loop product
        let a = Array3::from_shape_fn((1, 6, 6), |_| rng.random_range(0.0..1.0));
        let gated = apply_fea(&level, &a).unwrap();
        for c in 0..4 {
            for y in 0..6 {
                for x in 0..6 {
                    assert_eq!(gated[[c, y, x]], level[[c, y, x]] * a[[0, y, x]]);
                }
            }
        }
    }

    #[test]
    fn gating_preserves_sign() {
        let mut rng = crate::rng::stream(9, "fea", 5);
        let level = Array3::from_shape_fn((2, 5, 5), |_| rng.random_range(-1.0..1.0));
        let attn = Array3::from_shape_fn((1, 5, 5), |_| rng.random_range(0.01..0.99));
        let gated = apply_fea(&level, &attn).unwrap();
        for (g, l) in gated.iter().zip(level.iter()) {
            assert_eq!(g.signum() * l.signum() >= 0.0, true);
            if *l != 0.0 {
                assert_eq!(g.signum(), l.signum());
            }
        }
    }

    #[test]
    fn shape_mismatch_is_internal_error() {
        let level = Array3::zeros((2, 6, 6));
        let attn = Array3::zeros((1, 5, 6));
        assert!(matches!(
            apply_fea(&level, &attn),
            Err(crate::Error::Internal(_))
        ));
    }

    /// End-to-end finite differences through srm -> convs -> attention -> gate.
    #[test]
    fn branch_gradient_matches_finite_differences() {
        let branch = AttentionBranch::new(3);
        let mut params = ParamSet::new();
        branch.init(&mut params, 13);

        let mut rng = crate::rng::stream(9, "fea", 6);
        let img = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(0.0..1.0));
        let kernels = SrmKernels::standard3();
        let residuals = srm_residual_batch(&[img], &kernels).unwrap();
        let feat = ArrayD::from_shape_fn(IxDyn(&[1, 2, 8, 8]), |_| rng.random_range(-1.0..1.0));

        let loss_of = |params: &ParamSet, want_grads: bool| {
            let tape = Tape::new();
            let ctx = ForwardCtx::new(&tape, params, true, want_grads);
            let res = tape.constant(residuals.clone());
            let attn = branch.forward(&ctx, res);
            let gated = tape.constant(feat.clone()).mul_chan(attn);
            let loss = gated.mul(gated).mean_all();
            let value = loss.scalar_value();
            if want_grads {
                let grads = tape.backward(loss);
                (value, Some(ctx.grads_by_name(&grads)))
            } else {
                (value, None)
            }
        };

        let (_, grads) = loss_of(&params, true);
        let grads = grads.unwrap();

        let names: Vec<String> = grads.keys().cloned().collect();
        let mut pick = crate::rng::stream(9, "fea", 7);
        let h = 1e-5;
        for _ in 0..10 {
            let name = &names[pick.random_range(0..names.len())];
            let len = params.get(name).len();
            let idx = pick.random_range(0..len);
            let mut plus = params.clone();
            plus.get_mut(name).as_slice_mut().unwrap()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(name).as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * h);
            let an = grads[name].as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "{name}[{idx}]: fd={fd} analytic={an}"
            );
        }
    }
}
