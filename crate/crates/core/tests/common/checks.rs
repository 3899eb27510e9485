//! Property checks shared by the integration tests and the acceptance suite.
//!
//! Each check returns `Ok(detail)` or `Err(reason)`; callers decide whether to
//! assert or report.

use std::time::Instant;

use aortaseg::io::{read_volume, write_labels, write_volume, VolumeFile};
use aortaseg::metrics::{assd, class_mask, dice_coefficient, evaluate, merge_foreground, surface_voxels, BinaryMask};
use aortaseg::net::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint,
    Network, NetworkSpec, TrainingMeta,
};
use aortaseg::phantom::{generate_phantom, PhantomSpec};
use aortaseg::pipeline::{
    argmax_labels, fuse_probabilities, infer_plane, largest_component_filter, normalize_intensities,
    resample_probabilities_to, resample_trilinear, segment, ISOTROPIC_SPACING,
};
use aortaseg::tensor::{
    batch_norm, batch_norm_grad, conv2d_dilated, conv2d_dilated_grad, pad2d, relu, relu_backward, softmax_channels,
    softmax_channels_backward, BatchNormParams, ConvParams, NormMode,
};
use aortaseg::threads::with_threads;
use aortaseg::train::soft_dice_loss;
use aortaseg::volume::{voxel_index, Spacing};
use aortaseg::{Error, IntensityUnit, LabelVolume, Plane, ProbabilityVolume, Scalar, Tensor, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL_F64: f64 = 1e-5;
pub const GRAD_TOL_F32: f64 = 1e-3;

/// Relative-error floor as a fraction of the gradient scale. 32-bit rounding
/// leaves absolute noise near `1e-7` of the scale on entries whose true
/// gradient is zero.
fn floor_for<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-3
    } else {
        1e-6
    }
}

fn rel_err<T: Scalar>(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_relative_error(analytic, numeric, floor_for::<T>())
}

fn tol<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        GRAD_TOL_F32
    } else {
        GRAD_TOL_F64
    }
}

/// Runs a gradient check in 64-bit and 32-bit.
fn both_precisions(what: &str, f64_err: f64, f32_err: f64) -> Check {
    ensure!(f64_err <= GRAD_TOL_F64, "{what}: 64-bit relative error {f64_err:e} > {GRAD_TOL_F64:e}");
    ensure!(f32_err <= GRAD_TOL_F32, "{what}: 32-bit relative error {f32_err:e} > {GRAD_TOL_F32:e}");
    Ok(format!("{what}: f64 {f64_err:.1e}, f32 {f32_err:.1e}"))
}

struct ConvCase {
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    r: Tensor<f64>,
    d: usize,
}

fn conv_case(d: usize, k: usize, seed: u64) -> ConvCase {
    let mut g = rng(seed);
    let span = d * (k - 1);
    ConvCase {
        x: random(&[2, 2, span + 4, span + 3], &mut g),
        w: random(&[3, 2, k, k], &mut g),
        b: random(&[3], &mut g),
        r: random(&[2, 3, 4, 3], &mut g),
        d,
    }
}

fn conv_loss(c: &ConvCase, x: &[f64], w: &[f64], b: &[f64]) -> f64 {
    let p = ConvParams::new(
        Tensor::new(c.w.shape(), w.to_vec()).unwrap(),
        Tensor::new(c.b.shape(), b.to_vec()).unwrap(),
        c.d,
    )
    .unwrap();
    dot(&conv2d_dilated(&Tensor::new(c.x.shape(), x.to_vec()).unwrap(), &p).unwrap(), &c.r)
}

fn conv_error<T: Scalar>(c: &ConvCase) -> f64 {
    let p = ConvParams::new(c.w.cast::<T>(), c.b.cast::<T>(), c.d).unwrap();
    let g = conv2d_dilated_grad(&c.x.cast::<T>(), &p, &c.r.cast::<T>()).unwrap();
    let (x, w, b) = (c.x.data(), c.w.data(), c.b.data());
    let nx = numeric_gradient(|v| conv_loss(c, v, w, b), x, FD_STEP);
    let nw = numeric_gradient(|v| conv_loss(c, x, v, b), w, FD_STEP);
    let nb = numeric_gradient(|v| conv_loss(c, x, w, v), b, FD_STEP);
    rel_err::<T>(&to_f64(&g.input), &nx)
        .max(rel_err::<T>(&to_f64(&g.weights), &nw))
        .max(rel_err::<T>(&to_f64(&g.bias), &nb))
}

/// Dilated 3x3 convolution at every canonical dilation, plus the 1x1 kernel.
pub fn conv_gradients() -> Check {
    let mut details = Vec::new();
    for (i, d) in [1, 2, 4, 8, 16, 32].into_iter().enumerate() {
        let c = conv_case(d, 3, i as u64);
        details.push(both_precisions(&format!("conv3x3 d={d}"), conv_error::<f64>(&c), conv_error::<f32>(&c))?);
    }
    let c = conv_case(1, 1, 99);
    details.push(both_precisions("conv1x1", conv_error::<f64>(&c), conv_error::<f32>(&c))?);
    Ok(details.join("; "))
}

fn bn_loss(x: &[f64], gamma: &[f64], beta: &[f64], r: &Tensor<f64>) -> f64 {
    let mut p = BatchNormParams::<f64>::new(gamma.len());
    p.gamma = Tensor::new(&[gamma.len()], gamma.to_vec()).unwrap();
    p.beta = Tensor::new(&[beta.len()], beta.to_vec()).unwrap();
    let (y, _) = batch_norm(&Tensor::new(r.shape(), x.to_vec()).unwrap(), &mut p, NormMode::Train).unwrap();
    dot(&y, r)
}

fn bn_error<T: Scalar>(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let mut p = BatchNormParams::<T>::new(gamma.len());
    p.gamma = gamma.cast();
    p.beta = beta.cast();
    let (_, cache) = batch_norm(&x.cast::<T>(), &mut p, NormMode::Train).unwrap();
    let g = batch_norm_grad(&cache, &r.cast::<T>()).unwrap();
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let nx = numeric_gradient(|v| bn_loss(v, gd, bd, r), xd, FD_STEP);
    let ng = numeric_gradient(|v| bn_loss(xd, v, bd, r), gd, FD_STEP);
    let nb = numeric_gradient(|v| bn_loss(xd, gd, v, r), bd, FD_STEP);
    rel_err::<T>(&to_f64(&g.input), &nx)
        .max(rel_err::<T>(&to_f64(&g.gamma), &ng))
        .max(rel_err::<T>(&to_f64(&g.beta), &nb))
}

/// Batch norm on a random 4x3x2x2 batch.
pub fn batch_norm_gradients() -> Check {
    let mut g = rng(7);
    let x = random(&[4, 3, 2, 2], &mut g);
    let gamma = random(&[3], &mut g);
    let beta = random(&[3], &mut g);
    let r = random(&[4, 3, 2, 2], &mut g);
    let e64 = bn_error::<f64>(&x, &gamma, &beta, &r);
    ensure!(e64 <= 1e-6, "batch norm: 64-bit relative error {e64:e} > 1e-6");
    both_precisions("batch norm", e64, bn_error::<f32>(&x, &gamma, &beta, &r))
}

/// ReLU at inputs at least 0.1 away from the kink.
pub fn relu_gradients() -> Check {
    let mut g = rng(8);
    let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |_| {
        let m = g.random_range(0.1..1.0);
        if g.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let r = random(&[2, 3, 4, 4], &mut g);
    let n = numeric_gradient(
        |v| dot(&relu(&Tensor::new(x.shape(), v.to_vec()).unwrap()), &r),
        x.data(),
        FD_STEP,
    );
    let a64 = relu_backward(&x, &r).unwrap();
    let a32 = relu_backward(&x.cast::<f32>(), &r.cast::<f32>()).unwrap();
    both_precisions("relu", rel_err::<f64>(&to_f64(&a64), &n), rel_err::<f32>(&to_f64(&a32), &n))
}

fn softmax_dice_error<T: Scalar>(z: &Tensor<f64>, labels: &[u8]) -> f64 {
    let p = softmax_channels(&z.cast::<T>()).unwrap();
    let (_, gp) = soft_dice_loss(&p, labels).unwrap();
    let gz = softmax_channels_backward(&p, &gp).unwrap();
    let n = numeric_gradient(
        |v| {
            let p = softmax_channels(&Tensor::new(z.shape(), v.to_vec()).unwrap()).unwrap();
            soft_dice_loss(&p, labels).unwrap().0
        },
        z.data(),
        FD_STEP,
    );
    rel_err::<T>(&to_f64(&gz), &n)
}

/// Channel softmax followed by the soft Dice loss, differentiated at the logits.
pub fn softmax_dice_gradients() -> Check {
    let mut g = rng(9);
    let z = Tensor::<f64>::from_fn(&[2, 4, 3, 3], |_| g.random_range(-2.0..2.0));
    let labels: Vec<u8> = (0..18).map(|_| g.random_range(0..4)).collect();
    both_precisions(
        "softmax+dice",
        softmax_dice_error::<f64>(&z, &labels),
        softmax_dice_error::<f32>(&z, &labels),
    )
}

/// Training-mode loss of a network with a fixed dropout stream.
fn net_loss(net: &Network<f64>, x: &Tensor<f64>, labels: &[u8], dropout_seed: u64) -> f64 {
    let mut net = net.clone();
    let (p, _) = net.forward_train(x, &mut rng(dropout_seed)).unwrap();
    soft_dice_loss(&p, labels).unwrap().0
}

fn micro_error<T: Scalar>(net64: &Network<f64>, x: &Tensor<f64>, labels: &[u8]) -> f64 {
    let mut net: Network<T> = net64.cast();
    let (p, trace) = net.forward_train(&x.cast::<T>(), &mut rng(1234)).unwrap();
    let (_, gp) = soft_dice_loss(&p, labels).unwrap();
    let grads = net.backward(&trace, &gp).unwrap();
    let analytic: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().map(|v| v.to_f64_lossy())).collect();
    // One vector over all buffers: a conv bias feeding batch norm has an
    // exactly zero gradient and needs the network-wide scale as its floor.
    let mut numeric = Vec::new();
    let mut probe = net64.clone();
    let buffers: Vec<Vec<f64>> = probe.parameters_mut().iter().map(|b| b.to_vec()).collect();
    for (bi, values) in buffers.iter().enumerate() {
        numeric.extend(numeric_gradient(
            |v| {
                let mut n = net64.clone();
                n.parameters_mut()[bi].copy_from_slice(v);
                net_loss(&n, x, labels, 1234)
            },
            values,
            FD_STEP,
        ));
    }
    rel_err::<T>(&analytic, &numeric)
}

/// Soft Dice loss on raw probabilities.
pub fn dice_gradients() -> Check {
    let mut g = rng(10);
    let p = Tensor::<f64>::from_fn(&[2, 3, 2, 3], |_| g.random_range(0.0..1.0));
    let labels: Vec<u8> = (0..12).map(|_| g.random_range(0..3)).collect();
    let n = numeric_gradient(
        |v| soft_dice_loss(&Tensor::new(p.shape(), v.to_vec()).unwrap(), &labels).unwrap().0,
        p.data(),
        FD_STEP,
    );
    let (_, a64) = soft_dice_loss(&p, &labels).unwrap();
    let (_, a32) = soft_dice_loss(&p.cast::<f32>(), &labels).unwrap();
    both_precisions("dice", rel_err::<f64>(a64.data(), &n), rel_err::<f32>(&to_f64(&a32), &n))
}

/// Loss through the whole three-layer micro-network, all parameters.
pub fn micro_network_gradients() -> Check {
    let mut g = rng(11);
    let net: Network<f64> = Network::from_spec(micro_spec(4), &mut g).unwrap();
    let x = Tensor::<f64>::from_fn(&[2, 1, 9, 10], |_| g.random_range(-1.0..1.0));
    let labels: Vec<u8> = (0..2 * 3 * 4).map(|_| g.random_range(0..4)).collect();
    both_precisions(
        "micro-network",
        micro_error::<f64>(&net, &x, &labels),
        micro_error::<f32>(&net, &x, &labels),
    )
}

// ----------------------------------------------------------------- geometry

pub fn canonical_net<T: Scalar>(classes: usize, seed: u64) -> Network<T> {
    Network::build(classes, &mut rng(seed)).unwrap()
}

/// Output sizes for 281x281 and 131x131 inputs and the analytic receptive field.
pub fn output_geometry() -> Check {
    let net = canonical_net::<f32>(4, 1);
    ensure!(
        net.spec().receptive_field() == (131, 131),
        "analytic receptive field {:?}",
        net.spec().receptive_field()
    );
    let mut g = rng(2);
    let big = Tensor::<f32>::from_fn(&[1, 1, 281, 281], |_| g.random());
    let out = net.forward(&big).map_err(|e| e.to_string())?;
    ensure!(out.shape() == [1, 4, 151, 151], "281x281 input gave {:?}", out.shape());
    let small = Tensor::<f32>::from_fn(&[1, 1, 131, 131], |_| g.random());
    let out = net.forward(&small).map_err(|e| e.to_string())?;
    ensure!(out.shape() == [1, 4, 1, 1], "131x131 input gave {:?}", out.shape());
    ensure!(
        net.forward(&Tensor::zeros(&[1, 1, 130, 131])).is_err(),
        "130-row input was accepted"
    );
    Ok("281->151, 131->1, analytic 131x131".into())
}

/// Perturbs one input pixel and measures which outputs change.
pub fn receptive_field_probe() -> Check {
    let net = canonical_net::<f64>(4, 3);
    let mut g = rng(4);
    let x = Tensor::<f64>::from_fn(&[1, 1, 281, 281], |_| g.random());
    let base = net.forward(&x).map_err(|e| e.to_string())?;
    let mut bumped = x.clone();
    bumped.data_mut()[140 * 281 + 140] += 1.0;
    let after = net.forward(&bumped).map_err(|e| e.to_string())?;
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..151 {
        for c in 0..151 {
            let changed = (0..4).any(|k| base.at4(0, k, r, c) != after.at4(0, k, r, c));
            if changed {
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
    }
    ensure!(rmin != usize::MAX, "no output reacted to the perturbation");
    let (h, w) = (rmax - rmin + 1, cmax - cmin + 1);
    ensure!(
        (h, w) == (131, 131) && (rmin, cmin) == (10, 10),
        "influence region {h}x{w} starting at ({rmin}, {cmin})"
    );
    Ok(format!("empirical receptive field {h}x{w}"))
}

/// Output of a padded 300x300 slice against stitched overlapping 281x281 crops.
pub fn tiling_equivalence() -> Check {
    let net = canonical_net::<f32>(4, 5);
    let mut g = rng(6);
    let slice = Tensor::<f32>::from_fn(&[1, 1, 300, 300], |_| g.random());
    let padded = pad2d(&slice, 65, 0.0).unwrap();
    let full = net.forward(&padded).map_err(|e| e.to_string())?;
    ensure!(full.shape() == [1, 4, 300, 300], "full output {:?}", full.shape());
    let mut worst = 0.0f64;
    for r0 in [0, 149] {
        for c0 in [0, 149] {
            let crop = Tensor::from_fn(&[1, 1, 281, 281], |i| {
                let (r, c) = (i / 281, i % 281);
                padded.at4(0, 0, r0 + r, c0 + c)
            });
            let out = net.forward(&crop).map_err(|e| e.to_string())?;
            for k in 0..4 {
                for r in 0..151 {
                    for c in 0..151 {
                        let d = (out.at4(0, k, r, c) - full.at4(0, k, r0 + r, c0 + c)).abs() as f64;
                        worst = worst.max(d);
                    }
                }
            }
        }
    }
    ensure!(worst <= 1e-5, "max abs difference {worst:e} > 1e-5");
    Ok(format!("max abs difference {worst:.1e}"))
}

// ------------------------------------------------------------------ oracles

/// Library convolution against the nested-loop oracle.
pub fn conv_oracle() -> Check {
    let mut worst = 0.0f64;
    let mut worst32 = 0.0f64;
    for (i, d) in [1, 2, 4, 8, 16, 32].into_iter().enumerate() {
        for k in [1, 3] {
            if k == 1 && d > 1 {
                continue;
            }
            let mut g = rng(100 + i as u64);
            let span = d * (k - 1);
            let x = random(&[2, 3, span + 5, span + 6], &mut g);
            let w = random(&[4, 3, k, k], &mut g);
            let b = random(&[4], &mut g);
            let want = brute_conv(&x, &w, &b, d);
            let got = conv2d_dilated(&x, &ConvParams::new(w.clone(), b.clone(), d).unwrap()).unwrap();
            ensure!(got.shape() == want.shape(), "shape {:?} vs {:?}", got.shape(), want.shape());
            worst = worst.max(max_abs_diff(got.data(), want.data()));
            let p32 = ConvParams::new(w.cast::<f32>(), b.cast::<f32>(), d).unwrap();
            let got32 = conv2d_dilated(&x.cast::<f32>(), &p32).unwrap();
            worst32 = worst32.max(max_abs_diff(&to_f64(&got32), want.data()));
        }
    }
    ensure!(worst <= 1e-6, "64-bit max abs difference {worst:e} > 1e-6");
    ensure!(worst32 <= 1e-5, "32-bit max abs difference {worst32:e} > 1e-5");
    Ok(format!("conv: f64 {worst:.1e}, f32 {worst32:.1e}"))
}

/// Distance-transform ASSD against pairwise brute force.
pub fn assd_oracle() -> Check {
    let mut worst = 0.0f64;
    let mut largest = 0;
    for seed in 0..12u64 {
        let mut g = rng(200 + seed);
        let spacing = [g.random_range(0.5..3.0), g.random_range(0.5..2.0), g.random_range(0.5..2.0)];
        let dims = [10, 13, 15];
        let a = random_blob(dims, spacing, 3, &mut g);
        let b = random_blob(dims, spacing, 3, &mut g);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let (sa, sb) = (brute_surface(&a).len(), brute_surface(&b).len());
        ensure!(sa <= 1000 && sb <= 1000, "instance too large: {sa}, {sb} surface voxels");
        largest = largest.max(sa.max(sb));
        let fast = assd(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((fast - brute_assd(&a, &b)).abs());
    }
    ensure!(worst <= 1e-9, "max abs difference {worst:e} > 1e-9");
    Ok(format!("assd: {worst:.1e} (surfaces up to {largest} voxels)"))
}

fn sprinkle(dims: [usize; 3], density: f64, seed: u64) -> LabelVolume {
    let mut g = rng(seed);
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| if g.random_bool(density) { g.random_range(1..4) } else { 0 })
        .collect();
    LabelVolume::new(dims, [1.0; 3], data).unwrap()
}

/// Union-find component filter against breadth-first flood fill.
pub fn component_oracle() -> Check {
    let mut cases = 0;
    for (i, density) in [0.05, 0.15, 0.3, 0.5, 0.8].into_iter().enumerate() {
        for seed in 0..3u64 {
            let l = sprinkle([9, 11, 13], density, 300 + 10 * i as u64 + seed);
            let got = largest_component_filter(&l);
            ensure!(got == flood_fill_filter(&l), "mismatch at density {density}, seed {seed}");
            cases += 1;
        }
    }
    Ok(format!("components: {cases} random volumes exact"))
}

/// Library resampling against per-point interpolation.
pub fn resample_oracle_check() -> Check {
    let mut worst = 0.0f64;
    for (seed, (dims, spacing)) in [
        ([10, 12, 14], [0.5, 0.5, 0.5]),
        ([7, 20, 18], [2.5, 0.7, 0.7]),
        ([9, 8, 11], [1.3, 0.9, 1.7]),
    ]
    .into_iter()
    .enumerate()
    {
        let mut g = rng(400 + seed as u64);
        let n: usize = dims.iter().product();
        let v = Volume::new(dims, spacing, (0..n).map(|_| g.random()).collect(), IntensityUnit::Normalized).unwrap();
        let got = resample_trilinear(&v, ISOTROPIC_SPACING);
        let want = resample_oracle(&v, ISOTROPIC_SPACING);
        ensure!(got.data.len() == want.len(), "resampled size differs");
        let got: Vec<f64> = got.data.iter().map(|&x| x as f64).collect();
        worst = worst.max(max_abs_diff(&got, &want));
    }
    ensure!(worst <= 1e-6, "max abs difference {worst:e} > 1e-6");
    Ok(format!("trilinear: {worst:.1e}"))
}

/// A field linear in physical position is reproduced at clamped sample points.
pub fn resample_linear_field() -> Check {
    let (dims, spacing) = ([8, 9, 10], [2.0, 0.75, 1.25]);
    let (a, b, c) = (0.01, -0.02, 0.015);
    let mut data = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z, y, x].map(|i| i as f64);
                let phys = [0, 1, 2].map(|k| (p[k] + 0.5) * spacing[k]);
                data.push((0.5 + a * phys[0] + b * phys[1] + c * phys[2]) as f32);
            }
        }
    }
    let v = Volume::new(dims, spacing, data, IntensityUnit::Normalized).unwrap();
    let mut worst = 0.0f64;
    for target in [[1.0; 3], [0.6, 1.3, 0.8]] {
        let out = resample_trilinear(&v, target);
        for z in 0..out.dims[0] {
            for y in 0..out.dims[1] {
                for x in 0..out.dims[2] {
                    let j = [z, y, x];
                    let phys = [0, 1, 2].map(|k| {
                        let lo = 0.5 * spacing[k];
                        let hi = (dims[k] as f64 - 0.5) * spacing[k];
                        ((j[k] as f64 + 0.5) * target[k]).clamp(lo, hi)
                    });
                    let want = 0.5 + a * phys[0] + b * phys[1] + c * phys[2];
                    worst = worst.max((out.get(z, y, x) as f64 - want).abs());
                }
            }
        }
    }
    ensure!(worst <= 1e-5, "linear field error {worst:e} > 1e-5");
    Ok(format!("linear field: {worst:.1e}"))
}

/// Library argmax against a per-voxel scan, with frequent exact ties.
pub fn argmax_oracle() -> Check {
    let mut g = rng(500);
    let (classes, dims) = (4, [6, 7, 8]);
    let n: usize = dims.iter().product();
    let mut data = vec![0.0f32; classes * n];
    for i in 0..n {
        let raw: Vec<f32> = (0..classes).map(|_| g.random_range(0..4) as f32).collect();
        let sum: f32 = raw.iter().sum::<f32>().max(1.0);
        for c in 0..classes {
            data[c * n + i] = raw[c] / sum;
        }
    }
    let p = ProbabilityVolume::new(classes, dims, [1.0; 3], data).unwrap();
    ensure!(argmax_labels(&p).data == argmax_scan(&p), "argmax differs from the scan");
    Ok("argmax: exact".into())
}

// ----------------------------------------------------------------- pipeline

pub fn random_hu_volume(dims: [usize; 3], spacing: Spacing, seed: u64) -> Volume {
    let mut g = rng(seed);
    let n = dims.iter().product();
    let data = (0..n).map(|_| g.random_range(-200..200) as f32).collect();
    Volume::new(dims, spacing, data, IntensityUnit::Hounsfield).unwrap()
}

/// Per-voxel sums at every stage of a tri-planar run on an anisotropic volume.
pub fn probability_sums() -> Check {
    let net = canonical_net::<f32>(4, 7);
    let v = random_hu_volume([7, 9, 8], [1.6, 0.8, 1.1], 8);
    let iso = resample_trilinear(&normalize_intensities(&v).unwrap(), ISOTROPIC_SPACING);
    let maps: Vec<ProbabilityVolume> = Plane::ALL.iter().map(|&p| infer_plane(&net, &iso, p).unwrap()).collect();
    let fused = fuse_probabilities(&maps).unwrap();
    let native = resample_probabilities_to(&fused, v.dims, v.spacing);
    let mut worst = 0.0f64;
    for (name, p) in [("axial", &maps[0]), ("coronal", &maps[1]), ("sagittal", &maps[2]), ("fused", &fused), ("native", &native)] {
        let dev = p.max_sum_deviation();
        ensure!(dev <= 1e-5, "{name} map: sum deviation {dev:e}");
        ensure!(p.data.iter().all(|&x| (0.0..=1.0).contains(&x)), "{name} map: value outside [0, 1]");
        worst = worst.max(dev);
    }
    ensure!(native.dims == v.dims, "native map dims {:?}", native.dims);
    Ok(format!("probability sums: max deviation {worst:.1e}"))
}

/// The filter is idempotent and never adds foreground.
pub fn filter_idempotent() -> Check {
    for seed in 0..6u64 {
        let l = sprinkle([10, 10, 10], 0.1 + 0.12 * seed as f64, 600 + seed);
        let once = largest_component_filter(&l);
        ensure!(largest_component_filter(&once) == once, "not idempotent for seed {seed}");
        for (a, b) in once.data.iter().zip(&l.data) {
            ensure!(*a == 0 || a == b, "filter changed a voxel's class");
        }
    }
    Ok("filter idempotent, never adds foreground".into())
}

/// `segment` gives bit-identical output across runs and pool sizes.
pub fn segment_determinism() -> Check {
    let net = canonical_net::<f32>(4, 9);
    let v = random_hu_volume([8, 7, 9], [1.4, 1.0, 0.9], 10);
    let a = with_threads(1, || segment(&net, &v)).map_err(|e| e.to_string())?;
    let b = with_threads(1, || segment(&net, &v)).map_err(|e| e.to_string())?;
    let c = with_threads(4, || segment(&net, &v)).map_err(|e| e.to_string())?;
    ensure!(a.labels == b.labels && a.probabilities == b.probabilities, "two single-thread runs differ");
    ensure!(a.labels == c.labels && a.probabilities == c.probabilities, "1 and 4 threads differ");
    ensure!(a.labels.dims == v.dims && a.labels.spacing == v.spacing, "label grid differs from input");
    Ok("segment bit-identical across runs and 1/4 threads".into())
}

// ------------------------------------------------------------------ metrics

fn mask(dims: [usize; 3], spacing: Spacing, voxels: &[[usize; 3]]) -> BinaryMask {
    let mut m = BinaryMask::empty(dims, spacing);
    for &[z, y, x] in voxels {
        m.set(z, y, x, true);
    }
    m
}

fn with_spacing(m: &BinaryMask, spacing: Spacing) -> BinaryMask {
    BinaryMask { spacing, ..m.clone() }
}

/// Symmetry, spacing behaviour, translation invariance and the worked examples.
pub fn metric_identities() -> Check {
    let dims = [12, 12, 12];
    let one = [1.0; 3];
    // Worked Dice examples.
    let a = mask(dims, one, &[[1, 1, 1], [1, 1, 2]]);
    let b = mask(dims, one, &[[1, 1, 2], [5, 5, 5]]);
    let d = |x: &BinaryMask, y: &BinaryMask| dice_coefficient(x, y).unwrap();
    ensure!(d(&a, &a) == Some(1.0), "identical masks Dice {:?}", d(&a, &a));
    ensure!(d(&a, &mask(dims, one, &[[9, 9, 9]])) == Some(0.0), "disjoint masks Dice not 0");
    ensure!(d(&a, &b) == Some(0.5), "overlap-1 Dice {:?}", d(&a, &b));
    ensure!(d(&BinaryMask::empty(dims, one), &BinaryMask::empty(dims, one)).is_none(), "empty Dice defined");
    // Surfaces.
    ensure!(surface_voxels(&mask(dims, one, &[[4, 4, 4]])).len() == 1, "single voxel surface");
    let cube: Vec<[usize; 3]> = (0..27).map(|i| [2 + i / 9, 2 + (i / 3) % 3, 2 + i % 3]).collect();
    ensure!(surface_voxels(&mask(dims, one, &cube)).len() == 26, "3x3x3 cube surface not 26");
    // Worked ASSD examples.
    ensure!(assd(&a, &a).unwrap() == 0.0, "identical ASSD not 0");
    let p = mask(dims, one, &[[3, 3, 2]]);
    let q = mask(dims, one, &[[3, 3, 5]]);
    ensure!(assd(&p, &q).unwrap() == 3.0, "3-voxel ASSD {}", assd(&p, &q).unwrap());
    ensure!(
        matches!(assd(&p, &BinaryMask::empty(dims, one)), Err(Error::UndefinedMetric(_))),
        "empty ASSD defined"
    );

    let mut translated = 0;
    for seed in 0..8u64 {
        let mut g = rng(700 + seed);
        let spacing = [g.random_range(0.5..2.5), g.random_range(0.5..2.5), g.random_range(0.5..2.5)];
        let x = random_blob([14, 14, 14], spacing, 3, &mut g);
        let y = random_blob([14, 14, 14], spacing, 3, &mut g);
        if x.is_empty() || y.is_empty() {
            continue;
        }
        ensure!(d(&x, &y) == d(&y, &x), "Dice not symmetric");
        let (xy, yx) = (assd(&x, &y).unwrap(), assd(&y, &x).unwrap());
        ensure!((xy - yx).abs() <= 1e-12 * xy.max(1.0), "ASSD not symmetric: {xy} vs {yx}");
        let k = 2.5;
        let scaled = spacing.map(|s| s * k);
        let (xs, ys) = (with_spacing(&x, scaled), with_spacing(&y, scaled));
        let s = assd(&xs, &ys).unwrap();
        ensure!((s - k * xy).abs() <= 1e-9 * s.max(1.0), "ASSD scaled {s} vs {}", k * xy);
        ensure!(d(&xs, &ys) == d(&x, &y), "Dice changed with spacing");
        // Embed both masks in a larger grid at two offsets, away from the border.
        let embed = |m: &BinaryMask, off: usize| {
            let mut out = BinaryMask::empty([20, 20, 20], m.spacing);
            for z in 0..14 {
                for yy in 0..14 {
                    for xx in 0..14 {
                        if m.get(z, yy, xx) {
                            out.set(z + off, yy + off, xx + off, true);
                        }
                    }
                }
            }
            out
        };
        let base = assd(&embed(&x, 1), &embed(&y, 1)).unwrap();
        let moved = assd(&embed(&x, 5), &embed(&y, 5)).unwrap();
        ensure!((moved - base).abs() <= 1e-9, "ASSD changed under translation: {base} vs {moved}");
        translated += 1;
    }

    ensure!(translated > 0, "no instance exercised translation");

    // Merge and evaluate.
    let l = LabelVolume::new([1, 2, 4], one, vec![0, 1, 2, 3, 3, 0, 2, 1]).unwrap();
    ensure!(merge_foreground(&l).count() == 6, "merged cardinality");
    ensure!(merge_foreground(&LabelVolume::zeros([2, 2, 2], one).unwrap()).is_empty(), "merge of background");
    let r = evaluate(&l, &l, 4).unwrap();
    for row in r.classes.iter().chain([&r.merged]) {
        ensure!(row.dice == Some(1.0) && row.assd_mm == Some(0.0), "pred == ref row {row:?}");
    }
    let mut missing = l.clone();
    missing.data.iter_mut().filter(|v| **v == 2).for_each(|v| *v = 0);
    let r = evaluate(&missing, &l, 4).unwrap();
    let arch = r.class("aortic_arch").unwrap();
    ensure!(arch.dice == Some(0.0) && arch.assd_mm.is_none(), "missing class row {arch:?}");
    ensure!(
        r.to_string().lines().last().unwrap().starts_with("thoracic_aorta dice="),
        "report does not end with the merged row"
    );
    merged_confusion_case()?;
    Ok("metric identities hold".into())
}

/// Errors only at the ascending/arch interface: merged Dice is at least the
/// worst per-class Dice (here it is perfect).
fn merged_confusion_case() -> Check {
    let dims = [10, 4, 4];
    let mut reference = LabelVolume::zeros(dims, [1.0; 3]).unwrap();
    for z in 0..10 {
        let i = voxel_index(dims, z, 1, 1);
        reference.data[i] = if z < 5 { 1 } else { 2 };
    }
    let mut pred = reference.clone();
    pred.data[voxel_index(dims, 5, 1, 1)] = 1;
    pred.data[voxel_index(dims, 6, 1, 1)] = 1;
    let r = evaluate(&pred, &reference, 4).unwrap();
    let worst = [1u8, 2]
        .iter()
        .map(|&c| dice_coefficient(&class_mask(&pred, c), &class_mask(&reference, c)).unwrap().unwrap())
        .fold(1.0, f64::min);
    let merged = r.merged.dice.unwrap();
    ensure!(merged >= worst && merged == 1.0, "merged {merged} vs worst class {worst}");
    Ok(String::new())
}

// ------------------------------------------------------------ serialization

/// Checkpoint bytes survive encode/decode and file round-trips exactly.
pub fn checkpoint_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for classes in [2, 4] {
        let mut net = canonical_net::<f32>(classes, 11);
        let mut g = rng(12);
        for l in net.layers_mut() {
            if let Some(n) = &mut l.norm {
                n.running_mean.data_mut().iter_mut().for_each(|v| *v = g.random());
                n.running_var.data_mut().iter_mut().for_each(|v| *v = g.random_range(0.5..2.0));
            }
        }
        let ckpt = Checkpoint::new(net, TrainingMeta { iteration: 1234, seed: 99, validation_score: 0.875 });
        let bytes = encode_checkpoint(&ckpt).map_err(|e| e.to_string())?;
        let back = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
        ensure!(back == ckpt, "{classes}-class checkpoint changed in memory round-trip");
        ensure!(encode_checkpoint(&back).unwrap() == bytes, "re-encoding differs");
        let path = dir.path().join(format!("m{classes}.adcn"));
        save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
        ensure!(load_checkpoint(&path).map_err(|e| e.to_string())? == ckpt, "file round-trip differs");
        ensure!(
            matches!(load_checkpoint_expecting(&path, 6 - classes), Err(Error::InvalidCheckpoint(_))),
            "{classes}-class checkpoint accepted as {}-class",
            6 - classes
        );
    }
    Ok("checkpoints bit-exact".into())
}

/// Flipped bytes, truncation and a bad magic are all rejected.
pub fn checkpoint_corruption() -> Check {
    let ckpt = Checkpoint::new(canonical_net::<f32>(4, 13), TrainingMeta::default());
    let bytes = encode_checkpoint(&ckpt).unwrap();
    for pos in [0, 4, 20, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        ensure!(
            matches!(decode_checkpoint(&bad), Err(Error::CorruptCheckpoint(_))),
            "flipped byte {pos} not rejected"
        );
    }
    ensure!(
        matches!(decode_checkpoint(&bytes[..bytes.len() - 9]), Err(Error::CorruptCheckpoint(_))),
        "truncation not rejected"
    );
    ensure!(matches!(decode_checkpoint(&[]), Err(Error::CorruptCheckpoint(_))), "empty file not rejected");
    Ok("corrupt checkpoints rejected".into())
}

/// Volumes of all three element types round-trip bit-exactly and write
/// byte-identical files.
pub fn volume_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut g = rng(14);
    let (dims, spacing) = ([5, 6, 7], [2.5, 0.7, 0.7]);
    let n: usize = dims.iter().product();
    let hu = Volume::new(dims, spacing, (0..n).map(|_| g.random_range(-1024..3072) as f32).collect(), IntensityUnit::Hounsfield).unwrap();
    let fl = Volume::new(dims, spacing, (0..n).map(|_| g.random::<f32>()).collect(), IntensityUnit::Normalized).unwrap();
    let lb = LabelVolume::new(dims, spacing, (0..n).map(|_| g.random_range(0..4)).collect()).unwrap();
    let p = |name: &str| dir.path().join(name);

    write_volume(&hu, p("hu.mhd")).map_err(|e| e.to_string())?;
    write_volume(&fl, p("fl.mhd")).map_err(|e| e.to_string())?;
    write_labels(&lb, p("lb.mhd")).map_err(|e| e.to_string())?;
    ensure!(read_volume(p("hu.mhd")).unwrap() == VolumeFile::Intensity(hu.clone()), "int16 round-trip");
    ensure!(read_volume(p("fl.mhd")).unwrap() == VolumeFile::Float(fl.clone()), "float32 round-trip");
    ensure!(read_volume(p("lb.mhd")).unwrap() == VolumeFile::Labels(lb.clone()), "uint8 round-trip");
    let header = std::fs::read_to_string(p("lb.mhd")).unwrap();
    ensure!(header.contains("ElementType = MET_UCHAR"), "label header: {header}");

    let first = (std::fs::read(p("hu.mhd")).unwrap(), std::fs::read(p("hu.raw")).unwrap());
    write_volume(&hu, p("hu.mhd")).unwrap();
    let second = (std::fs::read(p("hu.mhd")).unwrap(), std::fs::read(p("hu.raw")).unwrap());
    ensure!(first == second, "two writes differ");

    std::fs::write(p("hu.raw"), &first.1[..first.1.len() - 2]).unwrap();
    ensure!(
        matches!(read_volume(p("hu.mhd")), Err(Error::Parse { ref key, .. }) if key == "DimSize"),
        "short raw file not rejected"
    );
    Ok("volumes bit-exact, spacing 0.7/0.7/2.5 preserved".into())
}

// --------------------------------------------------------------- throughput

/// Single-threaded segmentation of a default-size phantom.
pub fn segment_throughput(limit_s: f64) -> Check {
    let phantom = generate_phantom(&PhantomSpec::default()).map_err(|e| e.to_string())?;
    let net = canonical_net::<f32>(4, 15);
    let start = Instant::now();
    let seg = with_threads(1, || segment(&net, &phantom.volume)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(seg.labels.dims == phantom.volume.dims, "label dims differ");
    ensure!(secs < limit_s, "segment took {secs:.1} s (limit {limit_s} s)");
    Ok(format!("96x96x128 segmented in {secs:.1} s single-threaded"))
}

/// Spec of a valid network for the CLI and training tests.
pub fn canonical_spec(classes: usize) -> NetworkSpec {
    NetworkSpec::canonical(classes).unwrap()
}
