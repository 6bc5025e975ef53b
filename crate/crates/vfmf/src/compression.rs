//! Channel compression of feature maps: a pointwise β-VAE (the proposed
//! path), PCA at arbitrary rank (the linear baseline), and a global latent
//! scaler used before diffusion.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;
use vfmf_tensor::{
    adamw_step, Binder, LrSchedule, OptimizerConfig, ParamSet, Scalar, Tape, Tensor, TensorError,
    Var,
};

use crate::nn::{add_linear, linear};
use crate::parallel::par_map_range;
use crate::seeding::derive_seed;
use crate::world::SceneData;

pub const LOG_VAR_CLAMP: f32 = 10.0;

#[derive(Debug, Error)]
pub enum CompressionError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("pca rank {rank} exceeds dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },
    #[error("pca needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("training diverged at epoch {epoch}: loss {loss:.4e} > 10x initial {initial:.4e}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("3x3-neighborhood encoder needs an [H, W, D] grid, got shape {shape:?}")]
    NeighborhoodNeedsGrid { shape: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Pointwise MLP β-VAE: encoder D -> hidden^B -> 2C, decoder C -> hidden^B -> D.
/// Every spatial location is compressed independently along channels. With
/// `neighborhood` set, the encoder instead reads the 3x3 spatial neighborhood
/// (9D channels, zero-padded at the borders); the decoder stays pointwise.
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub feature_dim: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub beta: f64,
    pub neighborhood: bool,
    pub params: ParamSet<f32>,
}

#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    /// [H, W, C]
    pub mu: Tensor<f32>,
    /// [H, W, C], clamped to [-LOG_VAR_CLAMP, LOG_VAR_CLAMP]
    pub log_var: Tensor<f32>,
}

impl VaeModel {
    pub fn new(
        feature_dim: usize,
        latent_channels: usize,
        hidden: usize,
        blocks: usize,
        beta: f64,
        seed: u64,
    ) -> Self {
        Self::build(feature_dim, latent_channels, hidden, blocks, beta, false, seed)
    }

    /// Variant whose encoder reads the 3x3 spatial neighborhood.
    pub fn new_neighborhood3x3(
        feature_dim: usize,
        latent_channels: usize,
        hidden: usize,
        blocks: usize,
        beta: f64,
        seed: u64,
    ) -> Self {
        Self::build(feature_dim, latent_channels, hidden, blocks, beta, true, seed)
    }

    fn build(
        feature_dim: usize,
        latent_channels: usize,
        hidden: usize,
        blocks: usize,
        beta: f64,
        neighborhood: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "vae-init", 0));
        let mut params = ParamSet::new();
        let enc_in = if neighborhood { 9 * feature_dim } else { feature_dim };
        let enc_dims = mlp_dims(enc_in, hidden, blocks, 2 * latent_channels);
        let dec_dims = mlp_dims(latent_channels, hidden, blocks, feature_dim);
        for (i, w) in enc_dims.windows(2).enumerate() {
            add_linear(&mut params, &mut rng, &format!("enc.{i}"), w[0], w[1]).expect("unique");
        }
        for (i, w) in dec_dims.windows(2).enumerate() {
            add_linear(&mut params, &mut rng, &format!("dec.{i}"), w[0], w[1]).expect("unique");
        }
        Self { feature_dim, latent_channels, hidden, blocks, beta, neighborhood, params }
    }

    fn enc_layers(&self) -> usize {
        self.blocks + 1
    }
}

fn mlp_dims(input: usize, hidden: usize, blocks: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat(hidden).take(blocks));
    dims.push(output);
    dims
}

fn run_mlp<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder<'_, S>,
    prefix: &str,
    layers: usize,
    mut h: Var,
) -> Result<Var, TensorError> {
    for i in 0..layers {
        h = linear(tape, binder, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.gelu(h);
        }
    }
    Ok(h)
}

/// Flattens [H, W, D] (or already-flat [N, D]) to [N, D].
fn as_rows(f: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>), TensorError> {
    let shape = f.shape().to_vec();
    let d = *shape.last().expect("non-scalar feature map");
    let n = f.numel() / d;
    Ok((f.clone().reshaped(vec![n, d])?, shape))
}

/// Encoder input rows for `f`: the plain [N, D] rows for the pointwise
/// encoder, or [H*W, 9D] neighborhood rows (zero-padded) for the 3x3 variant.
fn enc_input_rows(f: &Tensor<f32>, model: &VaeModel) -> Result<Tensor<f32>, CompressionError> {
    if !model.neighborhood {
        return Ok(as_rows(f)?.0);
    }
    let shape = f.shape();
    if shape.len() != 3 {
        return Err(CompressionError::NeighborhoodNeedsGrid { shape: shape.to_vec() });
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let src = f.data();
    let mut data = vec![0.0f32; h * w * 9 * d];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * 9 * d;
            for (k, (dy, dx)) in
                [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
                    .into_iter()
                    .enumerate()
            {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue; // zero padding
                }
                let off = ((ny as usize) * w + nx as usize) * d;
                data[row + k * d..row + (k + 1) * d].copy_from_slice(&src[off..off + d]);
            }
        }
    }
    Ok(Tensor::new(vec![h * w, 9 * d], data)?)
}

fn check_channels(got: usize, expected: usize) -> Result<(), CompressionError> {
    if got != expected {
        return Err(CompressionError::ChannelMismatch { expected, got });
    }
    Ok(())
}

/// Deterministic encode to a diagonal Gaussian posterior with C channels.
pub fn vae_encode(f: &Tensor<f32>, model: &VaeModel) -> Result<GaussianPosterior, CompressionError> {
    check_channels(*f.shape().last().unwrap_or(&0), model.feature_dim)?;
    let shape = f.shape().to_vec();
    let rows = enc_input_rows(f, model)?;
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::new(&model.params);
    let x = tape.constant(rows);
    let out = run_mlp(&mut tape, &mut binder, "enc", model.enc_layers(), x)?;
    let out = tape.value(out);
    let c = model.latent_channels;
    let n = out.numel() / (2 * c);
    let mut mu = vec![0.0f32; n * c];
    let mut log_var = vec![0.0f32; n * c];
    for i in 0..n {
        for j in 0..c {
            mu[i * c + j] = out.data()[i * 2 * c + j];
            log_var[i * c + j] =
                out.data()[i * 2 * c + c + j].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        }
    }
    let mut latent_shape = shape;
    *latent_shape.last_mut().unwrap() = c;
    Ok(GaussianPosterior {
        mu: Tensor::new(latent_shape.clone(), mu)?,
        log_var: Tensor::new(latent_shape, log_var)?,
    })
}

/// z = mu + sigma * eps with eps ~ N(0, I) drawn from the seed.
pub fn reparameterize(post: &GaussianPosterior, noise_seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, "reparam", 0));
    let mut z = post.mu.clone();
    for (v, &lv) in z.data_mut().iter_mut().zip(post.log_var.data()) {
        let eps: f64 = StandardNormal.sample(&mut rng);
        *v += (lv * 0.5).exp() * eps as f32;
    }
    z
}

pub fn vae_decode(z: &Tensor<f32>, model: &VaeModel) -> Result<Tensor<f32>, CompressionError> {
    check_channels(*z.shape().last().unwrap_or(&0), model.latent_channels)?;
    let (rows, shape) = as_rows(z)?;
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::new(&model.params);
    let x = tape.constant(rows);
    let out = run_mlp(&mut tape, &mut binder, "dec", model.enc_layers(), x)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = model.feature_dim;
    Ok(tape.value(out).clone().reshaped(out_shape)?)
}

/// Differentiable loss graph; used by both the public loss and training.
/// Returns (total, recon, kl) as scalar Vars.
fn vae_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder<'_, S>,
    enc_rows: Tensor<S>,
    target_rows: Tensor<S>,
    eps: Tensor<S>,
    enc_layers: usize,
    latent_channels: usize,
    beta: S,
) -> Result<(Var, Var, Var), TensorError> {
    let n = enc_rows.shape()[0];
    let x = tape.constant(enc_rows);
    let target = tape.constant(target_rows);
    let enc = run_mlp(tape, binder, "enc", enc_layers, x)?;
    let c = latent_channels;
    let mu = tape.slice(enc, 1, 0, c)?;
    let log_var_raw = tape.slice(enc, 1, c, c)?;
    // smooth clamp-free variance path; raw clamp happens only in inference encode
    let log_var = log_var_raw;
    let half = tape.mul_scalar(log_var, S::from_f64(0.5));
    let sigma = tape.exp(half);
    let eps_v = tape.constant(eps);
    let noise = tape.mul(sigma, eps_v)?;
    let z = tape.add(mu, noise)?;
    let recon = run_mlp(tape, binder, "dec", enc_layers, z)?;
    let diff = tape.sub(recon, target)?;
    let sq = tape.square(diff);
    let mse = tape.mean_all(sq);
    let recon_loss = tape.mul_scalar(mse, S::from_f64(0.5));
    // KL per element: (mu^2 + sigma^2 - 1 - log sigma^2) / 2, mean reduced
    let mu_sq = tape.square(mu);
    let sigma_sq = tape.square(sigma);
    let kl_sum = tape.add(mu_sq, sigma_sq)?;
    let kl_sum = tape.sub(kl_sum, log_var)?;
    let kl_sum = tape.add_scalar(kl_sum, S::from_f64(-1.0));
    let kl_mean = tape.mean_all(kl_sum);
    let kl = tape.mul_scalar(kl_mean, S::from_f64(0.5));
    let beta_kl = tape.mul_scalar(kl, beta);
    let total = tape.add(recon_loss, beta_kl)?;
    let _ = n;
    Ok((total, recon_loss, kl))
}

/// total = recon + beta * kl; recon = mean(0.5 * (f - psi(z))^2), kl mean over
/// latent elements.
pub fn vae_loss(
    f: &Tensor<f32>,
    model: &VaeModel,
    noise_seed: u64,
) -> Result<(f64, f64, f64), CompressionError> {
    let (rows, _) = as_rows(f)?;
    check_channels(rows.shape()[1], model.feature_dim)?;
    let enc_rows = enc_input_rows(f, model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, "reparam", 0));
    let eps = Tensor::from_fn(&[rows.shape()[0], model.latent_channels], |_| {
        let e: f64 = StandardNormal.sample(&mut rng);
        e as f32
    });
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::new(&model.params);
    let (total, recon, kl) = vae_loss_graph(
        &mut tape,
        &mut binder,
        enc_rows,
        rows,
        eps,
        model.enc_layers(),
        model.latent_channels,
        model.beta as f32,
    )?;
    let t = tape.value(total).item() as f64;
    let r = tape.value(recon).item() as f64;
    let k = tape.value(kl).item() as f64;
    if !(t.is_finite() && r.is_finite() && k.is_finite()) {
        return Err(CompressionError::NonFinite { what: "vae loss" });
    }
    Ok((t, r, k))
}

/// Closed-form KL of a diagonal Gaussian posterior against N(0, I),
/// mean over elements.
pub fn posterior_kl(post: &GaussianPosterior) -> f64 {
    let n = post.mu.numel() as f64;
    post.mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum::<f64>()
        / n
}

#[derive(Clone, Copy, Debug)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_frames: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_frames: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            warmup_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct VaeLossCurve {
    /// (epoch, mean total, mean recon, mean kl)
    pub epochs: Vec<(usize, f64, f64, f64)>,
}

/// Trains the VAE on individual frames (auto-encoded independently).
/// Aborts if the epoch loss exceeds 10x the first epoch's loss.
pub fn train_vae(
    train: &[SceneData],
    model: &mut VaeModel,
    cfg: &VaeTrainConfig,
) -> Result<VaeLossCurve, CompressionError> {
    // flatten every frame's locations into one pool of rows per frame
    let frames: Vec<Tensor<f32>> = train
        .iter()
        .flat_map(|s| s.features.iter().cloned())
        .collect();
    let steps_per_epoch = frames.len().div_ceil(cfg.batch_frames).max(1);
    let total_steps = cfg.epochs * steps_per_epoch;
    let opt = OptimizerConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        schedule: LrSchedule::WarmupCosine {
            warmup_steps: ((total_steps as f64) * cfg.warmup_frac) as u64,
            total_steps: total_steps as u64,
        },
        ..OptimizerConfig::default()
    };
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut curve = VaeLossCurve::default();
    let mut initial = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "vae-epoch", epoch as u64));
        shuffle(&mut order, &mut rng);
        let (mut et, mut er, mut ek) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_frames) {
            let rows = stack_rows(&frames, chunk)?;
            let enc_rows = if model.neighborhood {
                let mut per_frame = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    per_frame.push(enc_input_rows(&frames[i], model)?);
                }
                let mut data = Vec::new();
                for t in &per_frame {
                    data.extend_from_slice(t.data());
                }
                let d = per_frame[0].shape()[1];
                let n = data.len() / d;
                Tensor::new(vec![n, d], data)?
            } else {
                rows.clone()
            };
            let eps = Tensor::from_fn(&[rows.shape()[0], model.latent_channels], |_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                e as f32
            });
            let mut tape = Tape::<f32>::new();
            let mut binder = Binder::new(&model.params);
            let (total, recon, kl) = vae_loss_graph(
                &mut tape,
                &mut binder,
                enc_rows,
                rows,
                eps,
                model.enc_layers(),
                model.latent_channels,
                model.beta as f32,
            )?;
            et += tape.value(total).item() as f64;
            er += tape.value(recon).item() as f64;
            ek += tape.value(kl).item() as f64;
            tape.backward(total)?;
            let grads = binder.collect_grads(&tape);
            model.params.accumulate_grads(grads);
            adamw_step(&mut model.params, &opt)?;
        }
        let k = steps_per_epoch as f64;
        let (et, er, ek) = (et / k, er / k, ek / k);
        if epoch == 0 {
            initial = et;
        }
        if !et.is_finite() || et > 10.0 * initial {
            return Err(CompressionError::Diverged { epoch, loss: et, initial });
        }
        curve.epochs.push((epoch, et, er, ek));
    }
    Ok(curve)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
}

fn stack_rows(frames: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>, TensorError> {
    let d = *frames[idx[0]].shape().last().unwrap();
    let mut data = Vec::new();
    for &i in idx {
        data.extend_from_slice(frames[i].data());
    }
    let n = data.len() / d;
    Tensor::new(vec![n, d], data)
}

// ---- PCA ----

#[derive(Clone, Debug)]
pub struct PcaModel {
    /// [D]
    pub mean: Tensor<f32>,
    /// [k, D], orthonormal rows, descending eigenvalue order
    pub components: Tensor<f32>,
    /// [k], non-increasing
    pub eigenvalues: Vec<f64>,
}

/// Top-k principal components via eigendecomposition of the D x D sample
/// covariance. Sign convention: the largest-magnitude entry of each component
/// is positive.
pub fn fit_pca(rows: &[&[f32]], dim: usize, rank: usize) -> Result<PcaModel, CompressionError> {
    if rank > dim {
        return Err(CompressionError::RankTooLarge { rank, dim });
    }
    if rows.len() < rank + 1 {
        return Err(CompressionError::TooFewSamples { needed: rank + 1, got: rows.len() });
    }
    let n = rows.len();
    let mut mean = vec![0.0f64; dim];
    for r in rows {
        check_channels(r.len(), dim)?;
        for (m, &v) in mean.iter_mut().zip(*r) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for r in rows {
        let centered: Vec<f64> = r.iter().zip(&mean).map(|(&v, &m)| v as f64 - m).collect();
        for i in 0..dim {
            if centered[i] == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite eigenvalues")
    });
    let mut components = vec![0.0f32; rank * dim];
    let mut eigenvalues = Vec::with_capacity(rank);
    for (row, &col) in order.iter().take(rank).enumerate() {
        eigenvalues.push(eig.eigenvalues[col].max(0.0));
        let v = eig.eigenvectors.column(col);
        let (mut best, mut best_abs) = (0.0f64, 0.0f64);
        for i in 0..dim {
            if v[i].abs() > best_abs {
                best_abs = v[i].abs();
                best = v[i];
            }
        }
        let sign = if best < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            components[row * dim + i] = (v[i] * sign) as f32;
        }
    }
    Ok(PcaModel {
        mean: Tensor::new(vec![dim], mean.iter().map(|&m| m as f32).collect())?,
        components: Tensor::new(vec![rank, dim], components)?,
        eigenvalues,
    })
}

/// Uniformly subsamples rows for PCA fitting (fraction of all locations,
/// capped), deterministic in seed.
pub fn pca_training_rows<'a>(
    train: &'a [SceneData],
    frac: f64,
    cap: usize,
    seed: u64,
) -> Vec<&'a [f32]> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pca-subsample", 0));
    let mut rows = Vec::new();
    for scene in train {
        for fm in &scene.features {
            let d = *fm.shape().last().unwrap();
            let n = fm.numel() / d;
            for i in 0..n {
                if rng.gen_bool(frac.clamp(0.0, 1.0)) {
                    rows.push(&fm.data()[i * d..(i + 1) * d]);
                }
            }
        }
    }
    rows.truncate(cap);
    rows
}

fn pca_dims(model: &PcaModel) -> (usize, usize) {
    (model.components.shape()[0], model.components.shape()[1])
}

/// Per-location projection: z = components . (x - mean).
pub fn pca_project(f: &Tensor<f32>, model: &PcaModel) -> Result<Tensor<f32>, CompressionError> {
    let (k, d) = pca_dims(model);
    check_channels(*f.shape().last().unwrap_or(&0), d)?;
    let n = f.numel() / d;
    let mut out = vec![0.0f32; n * k];
    let comp = model.components.data();
    let mean = model.mean.data();
    for i in 0..n {
        let x = &f.data()[i * d..(i + 1) * d];
        for r in 0..k {
            let mut acc = 0.0f32;
            for j in 0..d {
                acc += comp[r * d + j] * (x[j] - mean[j]);
            }
            out[i * k + r] = acc;
        }
    }
    let mut shape = f.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    Ok(Tensor::new(shape, out)?)
}

/// Per-location reconstruction: x = components^T . z + mean.
pub fn pca_reconstruct(z: &Tensor<f32>, model: &PcaModel) -> Result<Tensor<f32>, CompressionError> {
    let (k, d) = pca_dims(model);
    check_channels(*z.shape().last().unwrap_or(&0), k)?;
    let n = z.numel() / k;
    let mut out = vec![0.0f32; n * d];
    let comp = model.components.data();
    let mean = model.mean.data();
    for i in 0..n {
        let zi = &z.data()[i * k..(i + 1) * k];
        for j in 0..d {
            let mut acc = mean[j];
            for r in 0..k {
                acc += comp[r * d + j] * zi[r];
            }
            out[i * d + j] = acc;
        }
    }
    let mut shape = z.shape().to_vec();
    *shape.last_mut().unwrap() = d;
    Ok(Tensor::new(shape, out)?)
}

/// CSV export: header, mean row, then one row per component.
pub fn pca_to_csv(model: &PcaModel) -> String {
    let (k, d) = pca_dims(model);
    let mut out = String::from("row");
    for j in 0..d {
        out.push_str(&format!(",c{j}"));
    }
    out.push('\n');
    let fmt_row = |label: &str, row: &[f32], out: &mut String| {
        out.push_str(label);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    };
    fmt_row("mean", model.mean.data(), &mut out);
    for r in 0..k {
        fmt_row(
            &format!("component{r}"),
            &model.components.data()[r * d..(r + 1) * d],
            &mut out,
        );
    }
    out
}

// ---- latent scaling ----

/// Global scalar latent normalization: scale = 1 / std of training latents.
#[derive(Clone, Copy, Debug)]
pub struct LatentScaler {
    pub scale: f32,
}

impl LatentScaler {
    /// Fits to the pooled standard deviation of the given latent maps.
    pub fn fit(latents: &[Tensor<f32>]) -> Self {
        let mut n = 0usize;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for z in latents {
            for &v in z.data() {
                sum += v as f64;
                sum_sq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        let mean = sum / n.max(1) as f64;
        let var = (sum_sq / n.max(1) as f64 - mean * mean).max(1e-12);
        Self { scale: (1.0 / var.sqrt()) as f32 }
    }

    pub fn apply(&self, z: &Tensor<f32>) -> Tensor<f32> {
        z.map(|v| v * self.scale)
    }

    pub fn invert(&self, z: &Tensor<f32>) -> Tensor<f32> {
        z.map(|v| v / self.scale)
    }
}

/// Mean latents (posterior means) of every training frame, used by the scaler
/// and by the forecaster's dataset construction.
pub fn mean_latents(
    scenes: &[SceneData],
    model: &VaeModel,
    workers: usize,
) -> Result<Vec<Vec<Tensor<f32>>>, CompressionError> {
    let out = par_map_range(scenes.len(), workers, |i| {
        scenes[i]
            .features
            .iter()
            .map(|f| vae_encode(f, model).map(|p| p.mu))
            .collect::<Result<Vec<_>, _>>()
    });
    out.into_iter().collect()
}
