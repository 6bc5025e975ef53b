//! Metrics (mIoU, AbsRel, δ1), the stochastic evaluation protocols
//! (single / mean-of-k / best-of-k), and the full multi-context evaluation
//! harness that turns trained forecasters into report tables.

use vfmf_tensor::Tensor;

use crate::compression::{vae_decode, vae_encode, CompressionError, LatentScaler, PcaModel, VaeModel};
use crate::compression::{pca_project, pca_reconstruct};
use crate::forecaster::{regression_rollout, rollout_many, ForecastError, VelocityField};
use crate::parallel::par_map_range;
use crate::probes::{probe_predict, ProbeError, ProbeHead, ProbeOutput};
use crate::seeding::derive_seed;
use crate::world::{render_frame, Frame, FrozenEncoder, MultiFutureScene, SceneData, WorldError};

#[derive(Debug)]
pub enum EvalError {
    ShapeMismatch { left: usize, right: usize },
    EmptySamples,
    AllDepthExcluded,
    BadContext { got: usize },
    Forecast(ForecastError),
    Compression(CompressionError),
    Probe(ProbeError),
    World(WorldError),
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::ShapeMismatch { left, right } => {
                write!(f, "grid shape mismatch: {left} vs {right} elements")
            }
            Self::EmptySamples => write!(f, "empty sample set"),
            Self::AllDepthExcluded => write!(f, "all ground-truth depth pixels nonpositive"),
            Self::BadContext { got } => write!(f, "context length {got} outside 1..=4"),
            Self::Forecast(e) => write!(f, "forecast error: {e}"),
            Self::Compression(e) => write!(f, "compression error: {e}"),
            Self::Probe(e) => write!(f, "probe error: {e}"),
            Self::World(e) => write!(f, "world error: {e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ForecastError> for EvalError {
    fn from(e: ForecastError) -> Self {
        Self::Forecast(e)
    }
}
impl From<CompressionError> for EvalError {
    fn from(e: CompressionError) -> Self {
        Self::Compression(e)
    }
}
impl From<ProbeError> for EvalError {
    fn from(e: ProbeError) -> Self {
        Self::Probe(e)
    }
}
impl From<WorldError> for EvalError {
    fn from(e: WorldError) -> Self {
        Self::World(e)
    }
}

// ---- metrics ----

/// Mean IoU over the given class set. A class contributes when it appears in
/// prediction or ground truth; classes absent from both are skipped.
pub fn miou(pred: &[u8], gt: &[u8], classes: &[u8]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch { left: pred.len(), right: gt.len() });
    }
    let mut acc = IouAccumulator::new(classes);
    acc.update(pred, gt);
    Ok(acc.value())
}

/// Streaming intersection/union counts so one mIoU can cover many frames.
#[derive(Clone, Debug)]
pub struct IouAccumulator {
    /// label byte -> slot in `inter`/`union`, or usize::MAX for out-of-set
    slot: [usize; 256],
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: &[u8]) -> Self {
        let mut slot = [usize::MAX; 256];
        for (i, &c) in classes.iter().enumerate() {
            slot[c as usize] = i;
        }
        Self { slot, inter: vec![0; classes.len()], union: vec![0; classes.len()] }
    }

    pub fn update(&mut self, pred: &[u8], gt: &[u8]) {
        for (&p, &g) in pred.iter().zip(gt) {
            let (ps, gs) = (self.slot[p as usize], self.slot[g as usize]);
            if p == g {
                if ps != usize::MAX {
                    self.inter[ps] += 1;
                    self.union[ps] += 1;
                }
            } else {
                if ps != usize::MAX {
                    self.union[ps] += 1;
                }
                if gs != usize::MAX {
                    self.union[gs] += 1;
                }
            }
        }
    }

    /// Mean over classes with nonzero union; 0.0 when no class is present.
    pub fn value(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in 0..self.inter.len() {
            if self.union[c] > 0 {
                sum += self.inter[c] as f64 / self.union[c] as f64;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub absrel: f64,
    /// Fraction of pixels with max(pred/gt, gt/pred) < 1.25.
    pub d1: f64,
    /// Pixels excluded because the ground truth was nonpositive.
    pub excluded: usize,
}

pub fn depth_metrics(pred: &[f32], gt: &[f32]) -> Result<DepthMetrics, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch { left: pred.len(), right: gt.len() });
    }
    let mut acc = DepthAccumulator::default();
    acc.update(pred, gt);
    acc.finish()
}

/// Streaming AbsRel / δ1 counts across frames.
#[derive(Clone, Debug, Default)]
pub struct DepthAccumulator {
    absrel_sum: f64,
    d1_hits: u64,
    included: u64,
    excluded: u64,
}

impl DepthAccumulator {
    pub fn update(&mut self, pred: &[f32], gt: &[f32]) {
        for (&p, &g) in pred.iter().zip(gt) {
            if g <= 0.0 {
                self.excluded += 1;
                continue;
            }
            let (p, g) = (p as f64, g as f64);
            self.absrel_sum += (p - g).abs() / g;
            let ratio = if p <= 0.0 { f64::INFINITY } else { (p / g).max(g / p) };
            self.d1_hits += u64::from(ratio < 1.25);
            self.included += 1;
        }
    }

    pub fn finish(&self) -> Result<DepthMetrics, EvalError> {
        if self.included == 0 {
            return Err(EvalError::AllDepthExcluded);
        }
        Ok(DepthMetrics {
            absrel: self.absrel_sum / self.included as f64,
            d1: self.d1_hits as f64 / self.included as f64,
            excluded: self.excluded as usize,
        })
    }
}

// ---- protocols ----

/// Elementwise mean of k same-shape feature maps.
pub fn mean_of_k(samples: &[Tensor<f32>]) -> Result<Tensor<f32>, EvalError> {
    let first = samples.first().ok_or(EvalError::EmptySamples)?;
    let mut acc = vec![0.0f64; first.numel()];
    for s in samples {
        if s.numel() != first.numel() {
            return Err(EvalError::ShapeMismatch { left: s.numel(), right: first.numel() });
        }
        for (a, &v) in acc.iter_mut().zip(s.data()) {
            *a += v as f64;
        }
    }
    let n = samples.len() as f64;
    let data: Vec<f32> = acc.into_iter().map(|v| (v / n) as f32).collect();
    Ok(Tensor::new(first.shape().to_vec(), data).expect("mean shape"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

/// Best per-sample metric value; ties resolve to the first index.
pub fn best_of_k(values: &[f64], orientation: Orientation) -> Result<(usize, f64), EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let better = match orientation {
            Orientation::HigherBetter => v > values[best],
            Orientation::LowerBetter => v < values[best],
        };
        if better {
            best = i;
        }
    }
    Ok((best, values[best]))
}

// ---- reports ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Single,
    MeanOfK,
    BestOfK,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Self::Single => "single",
            Self::MeanOfK => "mean-of-k",
            Self::BestOfK => "best-of-k",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub method: String,
    pub space: String,
    pub context: usize,
    pub horizon: usize,
    pub protocol: Protocol,
    pub k: usize,
    pub miou_all: f64,
    pub miou_mov: f64,
    pub d1: f64,
    pub absrel: f64,
    pub num_scenes: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str =
    "method,space,context,horizon,protocol,k,miou_all,miou_mov,d1,absrel,num_scenes,seed";

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.method,
            r.space,
            r.context,
            r.horizon,
            r.protocol.name(),
            r.k,
            r.miou_all,
            r.miou_mov,
            r.d1,
            r.absrel,
            r.num_scenes,
            r.seed
        ));
    }
    out
}

// ---- evaluation harness ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Flow,
    Regression,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Flow => "flow",
            Self::Regression => "regression",
        }
    }
}

/// The token space the forecaster operates in.
pub enum Space<'a> {
    /// Raw encoder features, one token per grid cell.
    Direct,
    /// VAE latent channels, scaled to roughly unit variance.
    Vae { model: &'a VaeModel, scaler: &'a LatentScaler },
}

impl Space<'_> {
    pub fn name(&self) -> String {
        match self {
            Self::Direct => "direct".into(),
            Self::Vae { model, .. } => format!("vae{}", model.latent_channels),
        }
    }

    /// [H, W, D] feature map -> [N, C] forecaster tokens.
    pub fn to_tokens(&self, features: &Tensor<f32>) -> Result<Tensor<f32>, EvalError> {
        let shape = features.shape();
        let d = *shape.last().expect("feature map rank >= 1");
        let n = features.numel() / d;
        match self {
            Self::Direct => {
                Ok(features.clone().reshaped(vec![n, d]).expect("token reshape"))
            }
            Self::Vae { model, scaler } => {
                let post = vae_encode(features, model)?;
                let c = model.latent_channels;
                let mu = post.mu.reshaped(vec![n, c]).expect("latent reshape");
                Ok(scaler.apply(&mu))
            }
        }
    }

    /// [N, C] forecaster tokens -> [grid, grid, D] feature map for probing.
    pub fn to_features(&self, tokens: &Tensor<f32>, grid: usize) -> Result<Tensor<f32>, EvalError> {
        let features = match self {
            Self::Direct => tokens.clone(),
            Self::Vae { model, scaler } => vae_decode(&scaler.invert(tokens), model)?,
        };
        let d = *features.shape().last().expect("feature rank");
        Ok(features.reshaped(vec![grid, grid, d]).expect("grid reshape"))
    }
}

/// Everything a full evaluation run needs. `scenes` is the multi-future test
/// split; probes are trained on ground-truth raw features.
pub struct EvalSetup<'a> {
    pub scenes: &'a [MultiFutureScene],
    pub encoder: &'a FrozenEncoder,
    pub net: &'a VelocityField,
    pub method: Method,
    pub space: Space<'a>,
    pub seg_probe: &'a ProbeHead,
    pub depth_probe: &'a ProbeHead,
    pub contexts: Vec<usize>,
    pub total_frames: usize,
    pub nfe: usize,
    /// k at context 1 (multi-future scoring).
    pub k_multi: usize,
    /// k at context >= 2 (single realized future).
    pub k_single: usize,
    pub seed: u64,
    pub workers: usize,
}

/// All object labels; the background (0) is the only static class.
pub fn movable_classes(num_slots: usize) -> Vec<u8> {
    (1..=num_slots as u8).collect()
}

pub fn all_classes(num_slots: usize) -> Vec<u8> {
    (0..=num_slots as u8).collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct RolloutScore {
    miou_all: f64,
    miou_mov: f64,
    d1: f64,
    absrel: f64,
}

/// Decodes every rollout step with both probes.
fn decode_rollout(
    latents: &[Tensor<f32>],
    space: &Space<'_>,
    grid: usize,
    seg: &ProbeHead,
    depth: &ProbeHead,
) -> Result<(Vec<Vec<u8>>, Vec<Vec<f32>>), EvalError> {
    let mut segs = Vec::with_capacity(latents.len());
    let mut depths = Vec::with_capacity(latents.len());
    for z in latents {
        let features = space.to_features(z, grid)?;
        match probe_predict(&features, seg)? {
            ProbeOutput::Labels(labels, _) => segs.push(labels),
            _ => unreachable!("segmentation probe yields labels"),
        }
        match probe_predict(&features, depth)? {
            ProbeOutput::Depth(d, _) => depths.push(d),
            _ => unreachable!("depth probe yields depth"),
        }
    }
    Ok((segs, depths))
}

/// Scores a decoded rollout against ground-truth frames, pooling pixels over
/// every step of the horizon.
fn score_rollout(
    segs: &[Vec<u8>],
    depths: &[Vec<f32>],
    gt: &[Frame],
    classes: &[u8],
    movable: &[u8],
) -> Result<RolloutScore, EvalError> {
    let mut all = IouAccumulator::new(classes);
    let mut mov = IouAccumulator::new(movable);
    let mut depth_acc = DepthAccumulator::default();
    for ((seg, dep), frame) in segs.iter().zip(depths).zip(gt) {
        if seg.len() != frame.segmentation.len() {
            return Err(EvalError::ShapeMismatch {
                left: seg.len(),
                right: frame.segmentation.len(),
            });
        }
        all.update(seg, &frame.segmentation);
        mov.update(seg, &frame.segmentation);
        depth_acc.update(dep, &frame.depth);
    }
    let dm = depth_acc.finish()?;
    Ok(RolloutScore { miou_all: all.value(), miou_mov: mov.value(), d1: dm.d1, absrel: dm.absrel })
}

/// Scores against one gt continuation, or the best-matching one (by mIoU-all)
/// when several ground-truth futures exist.
fn score_against(
    segs: &[Vec<u8>],
    depths: &[Vec<f32>],
    gt_futures: &[Vec<Frame>],
    classes: &[u8],
    movable: &[u8],
) -> Result<RolloutScore, EvalError> {
    let mut best: Option<RolloutScore> = None;
    for gt in gt_futures {
        let s = score_rollout(segs, depths, gt, classes, movable)?;
        let replace = match &best {
            None => true,
            Some(b) => s.miou_all > b.miou_all,
        };
        if replace {
            best = Some(s);
        }
    }
    best.ok_or(EvalError::EmptySamples)
}

struct SceneOutcome {
    single: RolloutScore,
    mean_of_k: Option<RolloutScore>,
    best_of_k: Option<RolloutScore>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_scene(
    setup: &EvalSetup<'_>,
    scene: &MultiFutureScene,
    context: usize,
    horizon: usize,
    k: usize,
    scene_seed: u64,
) -> Result<SceneOutcome, EvalError> {
    let grid = setup.encoder.grid_size(scene.parent.frame_size);
    let classes = all_classes(scene.parent.objects.len().max(6));
    let movable = movable_classes(scene.parent.objects.len().max(6));

    // Realized trajectory: first branch. Context frames come from it; at
    // context 1 every branch shares frame 0, so all are fair continuations.
    let realized = &scene.branches[0];
    let mut context_tokens = Vec::with_capacity(context);
    for tau in 0..context {
        let frame = render_frame(realized, tau);
        let features = setup.encoder.encode(&frame)?;
        context_tokens.push(setup.space.to_tokens(&features)?);
    }

    // Ground-truth futures over the horizon.
    let gt_specs: &[_] = if context == 1 { &scene.branches } else { std::slice::from_ref(realized) };
    let gt_futures: Vec<Vec<Frame>> = gt_specs
        .iter()
        .map(|spec| (context..context + horizon).map(|tau| render_frame(spec, tau)).collect())
        .collect();

    match setup.method {
        Method::Regression => {
            let latents = regression_rollout(&context_tokens, setup.net, horizon)?;
            let (segs, depths) =
                decode_rollout(&latents, &setup.space, grid, setup.seg_probe, setup.depth_probe)?;
            let single = score_against(&segs, &depths, &gt_futures, &classes, &movable)?;
            Ok(SceneOutcome { single, mean_of_k: None, best_of_k: None })
        }
        Method::Flow => {
            let seeds: Vec<u64> =
                (0..k).map(|j| derive_seed(scene_seed, "sample", j as u64)).collect();
            let sample_latents = rollout_many(&context_tokens, setup.net, horizon, setup.nfe, &seeds)?;
            let mut sample_scores = Vec::with_capacity(k);
            for latents in &sample_latents {
                let (segs, depths) = decode_rollout(
                    latents,
                    &setup.space,
                    grid,
                    setup.seg_probe,
                    setup.depth_probe,
                )?;
                sample_scores.push(score_against(&segs, &depths, &gt_futures, &classes, &movable)?);
            }
            let single = sample_scores[0];

            // mean-of-k: average the k futures in feature space per step,
            // decode once.
            let mut mean_features = Vec::with_capacity(horizon);
            for step in 0..horizon {
                let per_sample: Vec<Tensor<f32>> = sample_latents
                    .iter()
                    .map(|lat| {
                        setup
                            .space
                            .to_features(&lat[step], grid)
                            .map(|f| f.reshaped(vec![grid * grid, setup.encoder.out_dim()]).expect("flat"))
                    })
                    .collect::<Result<_, _>>()?;
                mean_features.push(mean_of_k(&per_sample)?);
            }
            let direct = Space::Direct;
            let (segs, depths) =
                decode_rollout(&mean_features, &direct, grid, setup.seg_probe, setup.depth_probe)?;
            let mean_score = score_against(&segs, &depths, &gt_futures, &classes, &movable)?;

            // best-of-k: best per-sample value, per metric.
            let pick = |vals: Vec<f64>, o: Orientation| best_of_k(&vals, o).map(|(_, v)| v);
            let best = RolloutScore {
                miou_all: pick(
                    sample_scores.iter().map(|s| s.miou_all).collect(),
                    Orientation::HigherBetter,
                )?,
                miou_mov: pick(
                    sample_scores.iter().map(|s| s.miou_mov).collect(),
                    Orientation::HigherBetter,
                )?,
                d1: pick(sample_scores.iter().map(|s| s.d1).collect(), Orientation::HigherBetter)?,
                absrel: pick(
                    sample_scores.iter().map(|s| s.absrel).collect(),
                    Orientation::LowerBetter,
                )?,
            };
            Ok(SceneOutcome { single, mean_of_k: Some(mean_score), best_of_k: Some(best) })
        }
    }
}

fn mean_scores(scores: &[RolloutScore]) -> RolloutScore {
    let n = scores.len().max(1) as f64;
    let mut m = RolloutScore::default();
    for s in scores {
        m.miou_all += s.miou_all / n;
        m.miou_mov += s.miou_mov / n;
        m.d1 += s.d1 / n;
        m.absrel += s.absrel / n;
    }
    m
}

/// Rolls out `total_frames - c` steps for every context length c, scores with
/// both probes, and emits one report per (context, protocol).
pub fn evaluate_method(setup: &EvalSetup<'_>) -> Result<Vec<EvalReport>, EvalError> {
    let mut reports = Vec::new();
    for &context in &setup.contexts {
        if context == 0 || context > 4 {
            return Err(EvalError::BadContext { got: context });
        }
        let horizon = setup.total_frames - context;
        let k = if context == 1 { setup.k_multi } else { setup.k_single };
        let outcomes: Vec<Result<SceneOutcome, EvalError>> =
            par_map_range(setup.scenes.len(), setup.workers, |i| {
                evaluate_scene(
                    setup,
                    &setup.scenes[i],
                    context,
                    horizon,
                    k,
                    derive_seed(setup.seed, "eval-scene", (context * 1000 + i) as u64),
                )
            });
        let mut singles = Vec::new();
        let mut means = Vec::new();
        let mut bests = Vec::new();
        for o in outcomes {
            let o = o?;
            singles.push(o.single);
            if let Some(m) = o.mean_of_k {
                means.push(m);
            }
            if let Some(b) = o.best_of_k {
                bests.push(b);
            }
        }
        let make = |protocol: Protocol, k: usize, s: RolloutScore| EvalReport {
            method: setup.method.name().into(),
            space: setup.space.name(),
            context,
            horizon,
            protocol,
            k,
            miou_all: s.miou_all,
            miou_mov: s.miou_mov,
            d1: s.d1,
            absrel: s.absrel,
            num_scenes: setup.scenes.len(),
            seed: setup.seed,
        };
        reports.push(make(Protocol::Single, 1, mean_scores(&singles)));
        if !means.is_empty() {
            reports.push(make(Protocol::MeanOfK, k, mean_scores(&means)));
        }
        if !bests.is_empty() {
            reports.push(make(Protocol::BestOfK, k, mean_scores(&bests)));
        }
    }
    Ok(reports)
}

// ---- sample-variance calibration ----

/// Mean per-element variance of k one-step samples, per context length. The
/// context windows share their final frame so every prediction targets the
/// same next step.
pub fn sample_variance_by_context(
    sequence_tokens: &[Tensor<f32>],
    net: &VelocityField,
    contexts: &[usize],
    k: usize,
    nfe: usize,
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    let max_c = *contexts.iter().max().ok_or(EvalError::EmptySamples)?;
    if max_c == 0 || sequence_tokens.len() < max_c {
        return Err(EvalError::BadContext { got: max_c });
    }
    let anchor = sequence_tokens.len();
    let mut out = Vec::with_capacity(contexts.len());
    for &c in contexts {
        let window = &sequence_tokens[anchor - c..anchor];
        let samples: Vec<Tensor<f32>> = (0..k)
            .map(|j| {
                crate::forecaster::sample_future(
                    window,
                    net,
                    nfe,
                    derive_seed(seed, "variance-sample", (c * 10_000 + j) as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        let mean = mean_of_k(&samples)?;
        let mut var_sum = 0.0f64;
        for s in &samples {
            for (&v, &m) in s.data().iter().zip(mean.data()) {
                var_sum += ((v - m) as f64).powi(2);
            }
        }
        out.push(var_sum / (samples.len() as f64 * mean.numel() as f64));
    }
    Ok(out)
}

// ---- compression fidelity (no forecasting) ----

pub enum FidelityMethod<'a> {
    Direct,
    Vae(&'a VaeModel),
    Pca(&'a PcaModel),
}

impl FidelityMethod<'_> {
    pub fn name(&self) -> String {
        match self {
            Self::Direct => "direct".into(),
            Self::Vae(m) => format!("vae{}", m.latent_channels),
            Self::Pca(m) => format!("pca-{}", m.components.shape()[0]),
        }
    }

    fn round_trip(&self, features: &Tensor<f32>) -> Result<Tensor<f32>, EvalError> {
        match self {
            Self::Direct => Ok(features.clone()),
            Self::Vae(model) => {
                let post = vae_encode(features, model)?;
                Ok(vae_decode(&post.mu, model)?)
            }
            Self::Pca(model) => {
                let z = pca_project(features, model)?;
                Ok(pca_reconstruct(&z, model)?)
            }
        }
    }
}

/// Probes (trained on raw features) applied to round-tripped ground-truth
/// features of held-out frames; isolates compression fidelity from
/// forecasting quality.
pub fn eval_compression_fidelity(
    method: &FidelityMethod<'_>,
    scenes: &[SceneData],
    seg_probe: &ProbeHead,
    depth_probe: &ProbeHead,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let slots = 6;
    let classes = all_classes(slots);
    let movable = movable_classes(slots);
    let mut all = IouAccumulator::new(&classes);
    let mut mov = IouAccumulator::new(&movable);
    let mut depth_acc = DepthAccumulator::default();
    let mut frames = 0usize;
    for scene in scenes {
        for (features, frame) in scene.features.iter().zip(&scene.frames) {
            let rt = method.round_trip(features)?;
            if let ProbeOutput::Labels(labels, _) = probe_predict(&rt, seg_probe)? {
                all.update(&labels, &frame.segmentation);
                mov.update(&labels, &frame.segmentation);
            }
            if let ProbeOutput::Depth(d, _) = probe_predict(&rt, depth_probe)? {
                depth_acc.update(&d, &frame.depth);
            }
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(EvalError::EmptySamples);
    }
    let dm = depth_acc.finish()?;
    Ok(EvalReport {
        method: method.name(),
        space: method.name(),
        context: 0,
        horizon: 0,
        protocol: Protocol::Single,
        k: 1,
        miou_all: all.value(),
        miou_mov: mov.value(),
        d1: dm.d1,
        absrel: dm.absrel,
        num_scenes: scenes.len(),
        seed,
    })
}
