//! Lightweight decoding heads translating feature maps into segmentation,
//! depth, and RGB at pixel resolution: pointwise MLP body, bilinear upsample,
//! linear output head.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use vfmf_tensor::{
    adamw_step, Binder, LrSchedule, OptimizerConfig, ParamSet, Scalar, Tape, Tensor, TensorError,
    Var,
};

use crate::nn::{add_linear, linear};
use crate::seeding::derive_seed;
use crate::world::Frame;

pub const DEPTH_RANGE: (f64, f64) = (0.1, 1.0);

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("feature channels {got} do not match head input {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}: loss {loss:.4e} > 10x initial {initial:.4e}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("need as many frames as feature maps: {features} vs {frames}")]
    LengthMismatch { features: usize, frames: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTask {
    /// Per-pixel labels 0..classes (0 = background).
    Segmentation { classes: usize },
    /// Cross-entropy over uniform bins spanning DEPTH_RANGE.
    Depth { bins: usize },
    /// l1 regression to [0, 1] RGB.
    Rgb,
}

impl ProbeTask {
    pub fn out_channels(&self) -> usize {
        match self {
            ProbeTask::Segmentation { classes } => *classes,
            ProbeTask::Depth { bins } => *bins,
            ProbeTask::Rgb => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProbeTask::Segmentation { .. } => "segmentation",
            ProbeTask::Depth { .. } => "depth",
            ProbeTask::Rgb => "rgb",
        }
    }
}

/// Uniform depth bin for a ground-truth depth value.
pub fn depth_bin(d: f64, bins: usize) -> usize {
    let (lo, hi) = DEPTH_RANGE;
    let t = (d - lo) / (hi - lo) * bins as f64;
    (t.floor() as isize).clamp(0, bins as isize - 1) as usize
}

/// Center of a depth bin.
pub fn depth_bin_center(bin: usize, bins: usize) -> f64 {
    let (lo, hi) = DEPTH_RANGE;
    lo + (bin as f64 + 0.5) * (hi - lo) / bins as f64
}

/// One trainable probe: bound to a feature space by input channel count.
#[derive(Clone, Debug)]
pub struct ProbeHead {
    pub task: ProbeTask,
    pub in_channels: usize,
    pub width: usize,
    pub blocks: usize,
    /// Pixel-grid upsampling factor (the encoder patch size).
    pub upsample: usize,
    pub params: ParamSet<f32>,
}

impl ProbeHead {
    pub fn new(
        task: ProbeTask,
        in_channels: usize,
        width: usize,
        blocks: usize,
        upsample: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe-init", 0));
        let mut params = ParamSet::new();
        for b in 0..blocks {
            let input = if b == 0 { in_channels } else { width };
            add_linear(&mut params, &mut rng, &format!("body.{b}"), input, width)
                .expect("unique");
        }
        add_linear(&mut params, &mut rng, "head", width, task.out_channels()).expect("unique");
        Self { task, in_channels, width, blocks, upsample, params }
    }
}

/// Bilinear interpolation matrix [n*p, n] (half-pixel centers, edge clamped).
fn bilinear_matrix<S: Scalar>(n: usize, p: usize) -> Tensor<S> {
    let np = n * p;
    Tensor::from_fn(&[np, n], |idx| {
        let (o, i) = (idx / n, idx % n);
        let src = (o as f64 + 0.5) / p as f64 - 0.5;
        let lo = src.floor().clamp(0.0, (n - 1) as f64);
        let hi = (lo + 1.0).min((n - 1) as f64);
        let frac = (src - lo).clamp(0.0, 1.0);
        let weight = if i as f64 == lo && i as f64 == hi {
            1.0
        } else if i as f64 == lo {
            1.0 - frac
        } else if i as f64 == hi {
            frac
        } else {
            0.0
        };
        S::from_f64(weight)
    })
}

/// Full probe graph: [B, H, W, Cin] features to [B, H*p, W*p, out] logits.
pub fn probe_graph<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder<'_, S>,
    head: &ProbeHead,
    x: Var,
) -> Result<Var, TensorError> {
    let sp = tape.value(x).shape().to_vec();
    let (b, h, w) = (sp[0], sp[1], sp[2]);
    let p = head.upsample;
    let mut t = x;
    for blk in 0..head.blocks {
        t = linear(tape, binder, &format!("body.{blk}"), t)?;
        t = tape.gelu(t);
    }
    let c = head.width;
    // upsample rows: [B, H, W*C] -> transpose -> multiply by A_h^T -> back
    let t = tape.reshape(t, &[b, h, w * c])?;
    let t = tape.permute(t, &[0, 2, 1])?;
    let ah_t = tape.constant({
        let m: Tensor<S> = bilinear_matrix(h, p);
        // [H*p, H] -> transpose to [H, H*p]
        Tensor::from_fn(&[h, h * p], |idx| {
            let (i, o) = (idx / (h * p), idx % (h * p));
            m.data()[o * h + i]
        })
    });
    let t = tape.matmul(t, ah_t)?;
    let t = tape.permute(t, &[0, 2, 1])?;
    let t = tape.reshape(t, &[b, h * p, w, c])?;
    // upsample cols: move W to the last matrix axis
    let t = tape.permute(t, &[0, 1, 3, 2])?;
    let aw_t = tape.constant({
        let m: Tensor<S> = bilinear_matrix(w, p);
        Tensor::from_fn(&[w, w * p], |idx| {
            let (i, o) = (idx / (w * p), idx % (w * p));
            m.data()[o * w + i]
        })
    });
    let t = tape.matmul(t, aw_t)?;
    let t = tape.permute(t, &[0, 1, 3, 2])?;
    linear(tape, binder, "head", t)
}

fn check_features(f: &Tensor<f32>, head: &ProbeHead) -> Result<(), ProbeError> {
    let got = *f.shape().last().unwrap_or(&0);
    if got != head.in_channels {
        return Err(ProbeError::ChannelMismatch { expected: head.in_channels, got });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum ProbeOutput {
    /// Argmax labels on the pixel grid (row-major, side length given).
    Labels(Vec<u8>, usize),
    /// Bin-center expectation per pixel.
    Depth(Vec<f32>, usize),
    /// Clamped [0,1] RGB, pixel-major triplets.
    Rgb(Vec<f32>, usize),
}

/// Deterministic inference on one [H, W, Cin] feature map.
pub fn probe_predict(f: &Tensor<f32>, head: &ProbeHead) -> Result<ProbeOutput, ProbeError> {
    check_features(f, head)?;
    let (h, w) = (f.shape()[0], f.shape()[1]);
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::new(&head.params);
    let x = tape.constant(f.clone().reshaped(vec![1, h, w, head.in_channels])?);
    let logits = probe_graph(&mut tape, &mut binder, head, x)?;
    let out = tape.value(logits);
    let side = h * head.upsample;
    let c = head.task.out_channels();
    let n = side * side;
    Ok(match head.task {
        ProbeTask::Segmentation { .. } => {
            let labels = (0..n)
                .map(|p| {
                    let row = &out.data()[p * c..(p + 1) * c];
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                        .map(|(i, _)| i as u8)
                        .expect("non-empty row")
                })
                .collect();
            ProbeOutput::Labels(labels, side)
        }
        ProbeTask::Depth { bins } => {
            let depth = (0..n)
                .map(|p| {
                    let row = &out.data()[p * c..(p + 1) * c];
                    let mx = row.iter().cloned().fold(f32::MIN, f32::max);
                    let mut z = 0.0f64;
                    let mut e = vec![0.0f64; bins];
                    for (j, &v) in row.iter().enumerate() {
                        e[j] = ((v - mx) as f64).exp();
                        z += e[j];
                    }
                    let mut d = 0.0f64;
                    for (j, ej) in e.iter().enumerate() {
                        d += ej / z * depth_bin_center(j, bins);
                    }
                    d as f32
                })
                .collect();
            ProbeOutput::Depth(depth, side)
        }
        ProbeTask::Rgb => {
            let rgb = out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
            ProbeOutput::Rgb(rgb, side)
        }
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub batch_frames: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_frames: 16, learning_rate: 1e-3, weight_decay: 0.0, seed: 0 }
    }
}

/// Per-frame training targets at pixel resolution.
fn frame_targets(frame: &Frame, task: &ProbeTask) -> Vec<usize> {
    match task {
        ProbeTask::Segmentation { .. } => {
            frame.segmentation.iter().map(|&l| l as usize).collect()
        }
        ProbeTask::Depth { bins } => {
            frame.depth.iter().map(|&d| depth_bin(d as f64, *bins)).collect()
        }
        ProbeTask::Rgb => Vec::new(),
    }
}

fn batch_loss<'a>(
    head: &'a ProbeHead,
    features: &[Tensor<f32>],
    frames: &[&Frame],
    idx: &[usize],
) -> Result<(Tape<f32>, Binder<'a, f32>, Var), ProbeError> {
    let (h, w) = (features[idx[0]].shape()[0], features[idx[0]].shape()[1]);
    let mut xdata = Vec::new();
    for &i in idx {
        check_features(&features[i], head)?;
        xdata.extend_from_slice(features[i].data());
    }
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::new(&head.params);
    let x = tape.constant(Tensor::new(vec![idx.len(), h, w, head.in_channels], xdata)?);
    let logits = probe_graph(&mut tape, &mut binder, head, x)?;
    let c = head.task.out_channels();
    let n = idx.len() * (h * head.upsample) * (w * head.upsample);
    let flat = tape.reshape(logits, &[n, c])?;
    let loss = match head.task {
        ProbeTask::Rgb => {
            let mut tdata = Vec::new();
            for &i in idx {
                tdata.extend_from_slice(frames[i].rgb.data());
            }
            let target = tape.constant(Tensor::new(vec![n, 3], tdata)?);
            let diff = tape.sub(flat, target)?;
            // smooth |x| = sqrt(x^2 + eps) keeps the l1 objective differentiable
            let sq = tape.square(diff);
            let sq = tape.add_scalar(sq, 1e-12);
            let absd = tape.sqrt(sq);
            tape.mean_all(absd)
        }
        _ => {
            let mut targets = Vec::new();
            for &i in idx {
                targets.extend(frame_targets(frames[i], &head.task));
            }
            tape.cross_entropy_with_logits(flat, &targets)?
        }
    };
    Ok((tape, binder, loss))
}

/// Trains a head on ground-truth (FeatureMap, Frame) pairs. Aborts on
/// divergence (epoch loss > 10x the first epoch's).
pub fn train_probe(
    features: &[Tensor<f32>],
    frames: &[&Frame],
    head: &mut ProbeHead,
    cfg: &ProbeTrainConfig,
) -> Result<Vec<f64>, ProbeError> {
    if features.len() != frames.len() {
        return Err(ProbeError::LengthMismatch { features: features.len(), frames: frames.len() });
    }
    let steps_per_epoch = features.len().div_ceil(cfg.batch_frames).max(1);
    let opt = OptimizerConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        schedule: LrSchedule::WarmupCosine {
            warmup_steps: (cfg.epochs * steps_per_epoch / 20) as u64,
            total_steps: (cfg.epochs * steps_per_epoch) as u64,
        },
        ..OptimizerConfig::default()
    };
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut initial = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "probe-epoch", epoch as u64));
        {
            use rand::Rng;
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
        }
        let mut sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_frames) {
            // clone-free borrow juggling: recompute the graph per batch
            let head_ref: &ProbeHead = head;
            let (mut tape, binder, loss) = batch_loss(head_ref, features, frames, chunk)?;
            sum += tape.value(loss).item() as f64;
            tape.backward(loss)?;
            let grads = binder.collect_grads(&tape);
            drop(tape);
            head.params.accumulate_grads(grads);
            adamw_step(&mut head.params, &opt)?;
        }
        let mean = sum / steps_per_epoch as f64;
        if epoch == 0 {
            initial = mean;
        }
        if !mean.is_finite() || mean > 10.0 * initial {
            return Err(ProbeError::Diverged { epoch, loss: mean, initial });
        }
        curve.push(mean);
    }
    Ok(curve)
}

/// Binary PPM (P6) encoding of a pixel-major RGB triplet grid in [0, 1].
pub fn write_ppm(rgb: &[f32], side: usize) -> Vec<u8> {
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    for v in rgb {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}

/// Colorizes a label grid for qualitative dumps.
pub fn labels_to_rgb(labels: &[u8]) -> Vec<f32> {
    let palette: [[f32; 3]; 8] = [
        [0.1, 0.1, 0.12],
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.25, 0.4, 0.95],
        [0.95, 0.8, 0.2],
        [0.7, 0.3, 0.85],
        [0.2, 0.85, 0.85],
        [0.9, 0.55, 0.2],
    ];
    labels
        .iter()
        .flat_map(|&l| palette[(l as usize) % palette.len()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, render_sequence, FrozenEncoder, WorldParams};
    use rand::Rng;

    #[test]
    fn depth_bins_round_trip_within_half_width() {
        let bins = 64;
        let half = (DEPTH_RANGE.1 - DEPTH_RANGE.0) / bins as f64 / 2.0;
        let mut d = DEPTH_RANGE.0 + 1e-9;
        while d < DEPTH_RANGE.1 {
            let b = depth_bin(d, bins);
            let c = depth_bin_center(b, bins);
            assert!((c - d).abs() <= half + 1e-12, "d {d} bin {b} center {c}");
            // AbsRel of perfect logits limited only by quantization
            assert!((c - d).abs() / d <= half / DEPTH_RANGE.0 + 1e-9);
            d += 0.003;
        }
        assert_eq!(depth_bin(DEPTH_RANGE.0, bins), 0);
        assert_eq!(depth_bin(DEPTH_RANGE.1, bins), bins - 1);
    }

    #[test]
    fn one_hot_depth_logits_decode_to_bin_center() {
        let bins = 8;
        let head = ProbeHead::new(ProbeTask::Depth { bins }, 4, 8, 1, 1, 0);
        // craft a head that emits near-one-hot logits for bin 5 by zeroing
        // body contributions and setting the bias
        let mut h = head;
        for p in h.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let bias = &mut h.params.get_mut("head.b").unwrap().value;
        for (j, v) in bias.data_mut().iter_mut().enumerate() {
            *v = if j == 5 { 60.0 } else { -60.0 };
        }
        let f = Tensor::zeros(&[2, 2, 4]);
        match probe_predict(&f, &h).unwrap() {
            ProbeOutput::Depth(d, side) => {
                assert_eq!(side, 2);
                for v in d {
                    assert!((v as f64 - depth_bin_center(5, bins)).abs() < 1e-6);
                }
            }
            _ => panic!("wrong output kind"),
        }
    }

    #[test]
    fn predict_shapes_and_channel_check() {
        let head = ProbeHead::new(ProbeTask::Segmentation { classes: 7 }, 16, 8, 2, 4, 1);
        let f = Tensor::from_fn(&[8, 8, 16], |i| (i % 13) as f32 * 0.1);
        match probe_predict(&f, &head).unwrap() {
            ProbeOutput::Labels(l, side) => {
                assert_eq!(side, 32);
                assert_eq!(l.len(), 32 * 32);
            }
            _ => panic!("wrong output kind"),
        }
        let bad = Tensor::zeros(&[8, 8, 15]);
        assert!(matches!(
            probe_predict(&bad, &head),
            Err(ProbeError::ChannelMismatch { .. })
        ));
        // determinism
        let a = probe_predict(&f, &head).unwrap();
        let b = probe_predict(&f, &head).unwrap();
        if let (ProbeOutput::Labels(x, _), ProbeOutput::Labels(y, _)) = (a, b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn bilinear_matrix_rows_sum_to_one() {
        let m: Tensor<f64> = bilinear_matrix(8, 4);
        for r in 0..32 {
            let s: f64 = m.data()[r * 8..(r + 1) * 8].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
        // identity when p = 1
        let id: Tensor<f64> = bilinear_matrix(5, 1);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(id.data()[i * 5 + j], expect);
            }
        }
    }

    #[test]
    fn seg_probe_fits_toy_frames() {
        let params = WorldParams { num_frames: 5, ..WorldParams::default() };
        let encoder = FrozenEncoder::new(11, 8, 64, 4);
        let mut features = Vec::new();
        let mut frames = Vec::new();
        for seed in 0..4u64 {
            let spec = generate_scene(seed, &params);
            for f in render_sequence(&spec) {
                features.push(encoder.encode(&f).unwrap());
                frames.push(f);
            }
        }
        let frame_refs: Vec<&Frame> = frames.iter().collect();
        let mut head = ProbeHead::new(ProbeTask::Segmentation { classes: 7 }, 256, 128, 2, 8, 3);
        let curve = train_probe(
            &features,
            &frame_refs,
            &mut head,
            &ProbeTrainConfig { epochs: 300, learning_rate: 4e-3, ..ProbeTrainConfig::default() },
        )
        .unwrap();
        assert!(curve.last().unwrap() < &(0.3 * curve[0]), "curve {curve:?}");
        // mIoU over the train split: the toy world is nearly linearly decodable,
        // so a fitted head should recover the masks almost exactly.
        let mut inter = vec![0usize; 7];
        let mut union = vec![0usize; 7];
        for (feat, frame) in features.iter().zip(&frames) {
            if let ProbeOutput::Labels(pred, _) = probe_predict(feat, &head).unwrap() {
                for (p, g) in pred.iter().zip(&frame.segmentation) {
                    if p == g {
                        inter[*g as usize] += 1;
                        union[*g as usize] += 1;
                    } else {
                        union[*p as usize] += 1;
                        union[*g as usize] += 1;
                    }
                }
            }
        }
        let ious: Vec<f64> = (0..7)
            .filter(|&c| union[c] > 0)
            .map(|c| inter[c] as f64 / union[c] as f64)
            .collect();
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!(miou > 0.9, "train mIoU {miou} ious {ious:?}");
    }

    #[test]
    fn rgb_probe_beats_mean_image() {
        let params = WorldParams { num_frames: 4, ..WorldParams::default() };
        let encoder = FrozenEncoder::new(11, 8, 64, 4);
        let mut features = Vec::new();
        let mut frames = Vec::new();
        for seed in 0..3u64 {
            let spec = generate_scene(seed, &params);
            for f in render_sequence(&spec) {
                features.push(encoder.encode(&f).unwrap());
                frames.push(f);
            }
        }
        let frame_refs: Vec<&Frame> = frames.iter().collect();
        let mut head = ProbeHead::new(ProbeTask::Rgb, 256, 128, 2, 8, 4);
        train_probe(
            &features,
            &frame_refs,
            &mut head,
            &ProbeTrainConfig { epochs: 60, learning_rate: 4e-3, ..ProbeTrainConfig::default() },
        )
        .unwrap();
        // mean image over the train split
        let n = frames.len() as f64;
        let mut mean = vec![0.0f64; 64 * 64 * 3];
        for f in &frames {
            for (m, &v) in mean.iter_mut().zip(f.rgb.data()) {
                *m += v as f64 / n;
            }
        }
        let (mut l1_probe, mut l1_mean) = (0.0f64, 0.0f64);
        for (feat, frame) in features.iter().zip(&frames) {
            if let ProbeOutput::Rgb(pred, _) = probe_predict(feat, &head).unwrap() {
                for ((&p, &g), &m) in pred.iter().zip(frame.rgb.data()).zip(&mean) {
                    l1_probe += (p as f64 - g as f64).abs();
                    l1_mean += (m - g as f64).abs();
                }
            }
        }
        assert!(l1_probe < l1_mean, "probe {l1_probe} vs mean {l1_mean}");
    }

    #[test]
    fn probe_loss_gradient_passes_grad_check() {
        use crate::nn::params_to_f64;
        use vfmf_tensor::grad_check;
        let head = ProbeHead::new(ProbeTask::Segmentation { classes: 3 }, 4, 8, 2, 2, 0);
        let wide_params = params_to_f64(&head.params);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::from_fn(&[1, 2, 2, 4], |_| rng.gen_range(-1.0..1.0));
        let targets: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let err = grad_check(
            |tape, x| {
                let mut binder = Binder::new(&wide_params);
                let logits = probe_graph(tape, &mut binder, &head, x)?;
                let flat = tape.reshape(logits, &[16, 3])?;
                tape.cross_entropy_with_logits(flat, &targets)
            },
            &x0,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "grad check err {err}");
    }

    #[test]
    fn ppm_header_and_payload() {
        let rgb = vec![0.0f32, 0.5, 1.0, 1.0, 0.0, 0.0];
        // 2x2 grid needs 12 values; use a small side of 1x1 x2 frames worth
        let img = write_ppm(&rgb[..3], 1);
        assert!(img.starts_with(b"P6\n1 1\n255\n"));
        assert_eq!(&img[img.len() - 3..], &[0u8, 128, 255]);
    }
}
