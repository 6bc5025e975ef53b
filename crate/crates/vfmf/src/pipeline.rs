//! Experiment orchestration: stage functions shared by the CLI and the
//! integration tests. Every stage consumes/produces files under one output
//! directory, echoes the resolved config, and records a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use vfmf_tensor::{LrSchedule, OptimizerConfig, Tensor};

use crate::checkpoint::{CheckpointError, TensorTable};
use crate::compression::{
    fit_pca, mean_latents, pca_project, pca_reconstruct, pca_to_csv, pca_training_rows, train_vae,
    vae_decode, vae_encode, reparameterize, CompressionError, LatentScaler, PcaModel, VaeModel,
    VaeTrainConfig,
};
use crate::config::{Config, ConfigError};
use crate::evaluation::{
    eval_compression_fidelity, evaluate_method, reports_to_csv, EvalError, EvalReport, EvalSetup,
    FidelityMethod, Method, Space,
};
use crate::forecaster::{
    flow_train_step, regression_train_step, rollout, DenoiserConfig, ForecastError, VelocityField,
};
use crate::probes::{
    labels_to_rgb, probe_predict, train_probe, write_ppm, ProbeError, ProbeHead, ProbeOutput,
    ProbeTask, ProbeTrainConfig,
};
use crate::seeding::derive_seed;
use crate::spectral::{power_spectrum, spectrum_svg, SpectrumProfile};
use crate::world::{
    branch_futures, generate_scene, make_dataset, Dataset, Frame, FrozenEncoder, MultiFutureScene,
    SceneData, WorldError, WorldParams,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact: {path} (run the producing stage first)")]
    Missing { path: PathBuf },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad dataset index: {0}")]
    BadIndex(String),
    #[error("training diverged at step {step}: loss {loss} (initial {initial})")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("evaluation error: {0}")]
    Eval(#[from] EvalError),
}

// ---- output layout ----

#[derive(Clone, Debug)]
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn dataset_index(&self) -> PathBuf {
        self.out.join("dataset/index.txt")
    }
    pub fn split(&self, name: &str) -> PathBuf {
        self.out.join(format!("dataset/{name}.bin"))
    }
    pub fn vae(&self) -> PathBuf {
        self.out.join("vae.bin")
    }
    pub fn pca(&self) -> PathBuf {
        self.out.join("pca.bin")
    }
    pub fn pca_csv(&self) -> PathBuf {
        self.out.join("pca.csv")
    }
    pub fn forecaster(&self, method: Method) -> PathBuf {
        self.out.join(format!("{}.bin", method.name()))
    }
    pub fn probe(&self, task: &str, space: &str) -> PathBuf {
        self.out.join(format!("probe-{task}-{space}.bin"))
    }
    pub fn reports(&self, method: &str) -> PathBuf {
        self.out.join(format!("reports-{method}.csv"))
    }
    pub fn report_txt(&self) -> PathBuf {
        self.out.join("report.txt")
    }
    pub fn spectrum_csv(&self, source: &str) -> PathBuf {
        self.out.join(format!("spectrum-{source}.csv"))
    }
    pub fn spectrum_svg(&self, source: &str) -> PathBuf {
        self.out.join(format!("spectrum-{source}.svg"))
    }
    pub fn config_echo(&self) -> PathBuf {
        self.out.join("config.txt")
    }
    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.out.join(format!("manifest-{stage}.txt"))
    }
    pub fn rollout_dir(&self) -> PathBuf {
        self.out.join("rollout")
    }
}

fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::Missing { path })
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

/// Resolved-config echo plus a per-stage manifest (seeds, version, wall time).
fn finish_stage(
    config: &Config,
    paths: &Paths,
    stage: &str,
    started: Instant,
    extra: &[(String, String)],
) -> Result<(), PipelineError> {
    write_text(&paths.config_echo(), &config.resolved())?;
    let mut manifest = String::new();
    manifest.push_str(&format!("stage = {stage}\n"));
    manifest.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    manifest.push_str(&format!("global_seed = {}\n", config.seed()));
    manifest.push_str(&format!("workers = {}\n", config.workers()));
    for (k, v) in extra {
        manifest.push_str(&format!("{k} = {v}\n"));
    }
    manifest.push_str(&format!("wall_ms = {}\n", started.elapsed().as_millis()));
    write_text(&paths.manifest(stage), &manifest)
}

// ---- config -> domain objects ----

pub fn world_params(config: &Config) -> WorldParams {
    WorldParams {
        frame_size: config.usize("world.frame_size"),
        num_frames: config.usize("world.frames"),
        min_objects: config.usize("world.min_objects"),
        max_objects: config.usize("world.max_objects"),
        ..WorldParams::default()
    }
}

pub fn encoder(config: &Config) -> FrozenEncoder {
    FrozenEncoder::new(
        config.seed(),
        config.usize("world.patch"),
        config.usize("encoder.width"),
        config.usize("encoder.layers"),
    )
}

fn grid(config: &Config) -> usize {
    config.usize("world.frame_size") / config.usize("world.patch")
}

fn feature_dim(config: &Config) -> usize {
    config.usize("encoder.width") * config.usize("encoder.layers")
}

pub fn vae_model(config: &Config) -> VaeModel {
    let build = if config.boolean("vae.neighborhood3x3") {
        VaeModel::new_neighborhood3x3
    } else {
        VaeModel::new
    };
    build(
        feature_dim(config),
        config.usize("vae.latent_channels"),
        config.usize("vae.hidden"),
        config.usize("vae.blocks"),
        config.real("vae.beta"),
        derive_seed(config.seed(), "vae-model", 0),
    )
}

pub fn denoiser_config(config: &Config, prefix: &str, channels: usize) -> DenoiserConfig {
    let g = grid(config);
    DenoiserConfig {
        channels,
        depth: config.usize(&format!("{prefix}.depth")),
        width: config.usize(&format!("{prefix}.width")),
        heads: config.usize(&format!("{prefix}.heads")),
        max_context: config.usize(&format!("{prefix}.max_context")),
        tokens: g * g,
        // the regression baseline ignores flow time, so the embedding width
        // is shared with the flow group
        time_freqs: config.usize("flow.time_freqs"),
        qk_norm: config.boolean("flow.qk_norm"),
    }
}

// ---- dataset persistence ----

fn frames_to_table(
    table: &mut TensorTable,
    idx: usize,
    frames: &[Frame],
    features: &[Tensor<f32>],
) -> Result<(), CheckpointError> {
    let t = frames.len();
    let s = frames[0].size;
    let mut rgb = Vec::with_capacity(t * s * s * 3);
    let mut seg = Vec::with_capacity(t * s * s);
    let mut depth = Vec::with_capacity(t * s * s);
    for f in frames {
        rgb.extend_from_slice(f.rgb.data());
        seg.extend(f.segmentation.iter().map(|&v| v as f32));
        depth.extend_from_slice(&f.depth);
    }
    table.insert(
        &format!("scene{idx}.rgb"),
        Tensor::new(vec![t, s, s, 3], rgb).expect("rgb extents"),
    )?;
    table.insert(
        &format!("scene{idx}.seg"),
        Tensor::new(vec![t, s * s], seg).expect("seg extents"),
    )?;
    table.insert(
        &format!("scene{idx}.depth"),
        Tensor::new(vec![t, s * s], depth).expect("depth extents"),
    )?;
    let fshape = features[0].shape().to_vec();
    let mut fdata = Vec::new();
    for f in features {
        fdata.extend_from_slice(f.data());
    }
    let mut shape = vec![t];
    shape.extend_from_slice(&fshape);
    table.insert(
        &format!("scene{idx}.features"),
        Tensor::new(shape, fdata).expect("feature extents"),
    )?;
    Ok(())
}

fn frames_from_table(
    table: &TensorTable,
    idx: usize,
) -> Result<(Vec<Frame>, Vec<Tensor<f32>>), PipelineError> {
    let rgb = table.get(&format!("scene{idx}.rgb"))?;
    let seg = table.get(&format!("scene{idx}.seg"))?;
    let depth = table.get(&format!("scene{idx}.depth"))?;
    let feat = table.get(&format!("scene{idx}.features"))?;
    let (t, s) = (rgb.shape()[0], rgb.shape()[1]);
    let mut frames = Vec::with_capacity(t);
    for tau in 0..t {
        let px = s * s;
        let rgb_t: Vec<f32> = rgb.data()[tau * px * 3..(tau + 1) * px * 3].to_vec();
        let seg_t: Vec<u8> = seg.data()[tau * px..(tau + 1) * px].iter().map(|&v| v as u8).collect();
        let depth_t: Vec<f32> = depth.data()[tau * px..(tau + 1) * px].to_vec();
        frames.push(Frame {
            rgb: Tensor::new(vec![s, s, 3], rgb_t).expect("rgb extents"),
            segmentation: seg_t,
            depth: depth_t,
            size: s,
        });
    }
    let fshape: Vec<usize> = feat.shape()[1..].to_vec();
    let per = fshape.iter().product::<usize>();
    let mut features = Vec::with_capacity(t);
    for tau in 0..t {
        let data = feat.data()[tau * per..(tau + 1) * per].to_vec();
        features.push(Tensor::new(fshape.clone(), data).expect("feature extents"));
    }
    Ok((frames, features))
}

/// Generates the dataset and persists one tensor-table per split plus a
/// text index listing scene seeds.
pub fn run_gen_data(config: &Config, paths: &Paths) -> Result<Dataset, PipelineError> {
    let started = Instant::now();
    let params = world_params(config);
    let enc = encoder(config);
    let dataset = make_dataset(
        config.usize("world.num_scenes"),
        (
            config.real("world.train_frac"),
            config.real("world.val_frac"),
            config.real("world.test_frac"),
        ),
        config.usize("world.branches"),
        config.seed(),
        &params,
        &enc,
        config.workers(),
    );
    let echo = config.resolved();
    let mut index = String::new();
    index.push_str(&format!("world.frame_size = {}\n", params.frame_size));
    index.push_str(&format!("world.frames = {}\n", params.num_frames));
    index.push_str(&format!("world.branches = {}\n", config.usize("world.branches")));
    for (name, scenes) in [("train", &dataset.train), ("val", &dataset.val)] {
        index.push_str(&format!("{name}.count = {}\n", scenes.len()));
        let mut table = TensorTable::new(echo.clone());
        for (i, scene) in scenes.iter().enumerate() {
            index.push_str(&format!("{name}.scene{i}.seed = {}\n", scene.spec.seed));
            frames_to_table(&mut table, i, &scene.frames, &scene.features)?;
        }
        table.save(&paths.split(name))?;
    }
    index.push_str(&format!("test.count = {}\n", dataset.test_multifuture.len()));
    let mut table = TensorTable::new(echo);
    for (i, scene) in dataset.test_multifuture.iter().enumerate() {
        index.push_str(&format!("test.scene{i}.seed = {}\n", scene.parent.seed));
        let branch_seed = derive_seed(config.seed(), "world-test-branches", i as u64);
        index.push_str(&format!("test.scene{i}.branch_seed = {branch_seed}\n"));
        // frame 0 (the shared context anchor) for inspection / smoke checks
        let frame0 = crate::world::render_frame(&scene.parent, 0);
        let feat0 = enc.encode(&frame0)?;
        frames_to_table(&mut table, i, &[frame0], &[feat0])?;
    }
    table.save(&paths.split("test"))?;
    write_text(&paths.dataset_index(), &index)?;
    finish_stage(config, paths, "gen-data", started, &[])?;
    Ok(dataset)
}

fn parse_index(path: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PipelineError::BadIndex(format!("bad line '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn index_u64(map: &BTreeMap<String, String>, key: &str) -> Result<u64, PipelineError> {
    map.get(key)
        .ok_or_else(|| PipelineError::BadIndex(format!("missing key '{key}'")))?
        .parse::<u64>()
        .map_err(|_| PipelineError::BadIndex(format!("key '{key}' is not an integer")))
}

/// Loads the persisted dataset; frames and features come from the split
/// files, scene specs are regenerated from the indexed seeds.
pub fn load_dataset(config: &Config, paths: &Paths) -> Result<Dataset, PipelineError> {
    let index = parse_index(&require(paths.dataset_index())?)?;
    let params = world_params(config);
    let mut dataset = Dataset::default();
    for (name, target) in [("train", 0usize), ("val", 1)] {
        let table = TensorTable::load(&require(paths.split(name))?)?;
        let count = index_u64(&index, &format!("{name}.count"))? as usize;
        let mut scenes = Vec::with_capacity(count);
        for i in 0..count {
            let seed = index_u64(&index, &format!("{name}.scene{i}.seed"))?;
            let spec = generate_scene(seed, &params);
            let (frames, features) = frames_from_table(&table, i)?;
            scenes.push(SceneData { spec, frames, features });
        }
        if target == 0 {
            dataset.train = scenes;
        } else {
            dataset.val = scenes;
        }
    }
    let count = index_u64(&index, "test.count")? as usize;
    let branches = index_u64(&index, "world.branches")? as usize;
    require(paths.split("test"))?;
    for i in 0..count {
        let seed = index_u64(&index, &format!("test.scene{i}.seed"))?;
        let branch_seed = index_u64(&index, &format!("test.scene{i}.branch_seed"))?;
        let parent = generate_scene(seed, &params);
        let branch_specs = branch_futures(&parent, branches, branch_seed);
        dataset.test_multifuture.push(MultiFutureScene { parent, branches: branch_specs });
    }
    Ok(dataset)
}

// ---- compression stages ----

pub fn run_train_vae(config: &Config, paths: &Paths) -> Result<(VaeModel, LatentScaler), PipelineError> {
    let started = Instant::now();
    let dataset = load_dataset(config, paths)?;
    let mut model = vae_model(config);
    let cfg = VaeTrainConfig {
        epochs: config.usize("vae.epochs"),
        batch_frames: config.usize("vae.batch_frames"),
        learning_rate: config.real("vae.lr"),
        weight_decay: config.real("vae.weight_decay"),
        warmup_frac: config.real("vae.warmup_frac"),
        seed: derive_seed(config.seed(), "vae-train", 0),
    };
    let curve = train_vae(&dataset.train, &mut model, &cfg)?;
    let latents = mean_latents(&dataset.train, &model, config.workers())?;
    let flat: Vec<Tensor<f32>> = latents.into_iter().flatten().collect();
    let scaler = LatentScaler::fit(&flat);
    let mut table = TensorTable::new(config.resolved());
    table.insert_params("vae.", &model.params)?;
    table.insert("scaler.scale", Tensor::new(vec![1], vec![scaler.scale]).expect("scalar"))?;
    table.save(&paths.vae())?;
    let last = curve.epochs.last().map(|e| e.1).unwrap_or(f64::NAN);
    finish_stage(config, paths, "train-vae", started, &[("final_loss".into(), format!("{last}"))])?;
    Ok((model, scaler))
}

pub fn load_vae(config: &Config, paths: &Paths) -> Result<(VaeModel, LatentScaler), PipelineError> {
    let table = TensorTable::load(&require(paths.vae())?)?;
    let mut model = vae_model(config);
    table.load_params("vae.", &mut model.params)?;
    let scale = table.get("scaler.scale")?.data()[0];
    Ok((model, LatentScaler { scale }))
}

pub fn run_fit_pca(config: &Config, paths: &Paths) -> Result<PcaModel, PipelineError> {
    let started = Instant::now();
    let dataset = load_dataset(config, paths)?;
    let rows = pca_training_rows(
        &dataset.train,
        config.real("pca.subsample_frac"),
        config.usize("pca.max_vectors"),
        config.seed(),
    );
    let model = fit_pca(&rows, feature_dim(config), config.usize("pca.rank"))?;
    let mut table = TensorTable::new(config.resolved());
    table.insert("mean", model.mean.clone())?;
    table.insert("components", model.components.clone())?;
    let eig: Vec<f32> = model.eigenvalues.iter().map(|&v| v as f32).collect();
    table.insert("eigenvalues", Tensor::new(vec![eig.len()], eig).expect("eigs"))?;
    table.save(&paths.pca())?;
    write_text(&paths.pca_csv(), &pca_to_csv(&model))?;
    finish_stage(config, paths, "fit-pca", started, &[])?;
    Ok(model)
}

pub fn load_pca(paths: &Paths) -> Result<PcaModel, PipelineError> {
    let table = TensorTable::load(&require(paths.pca())?)?;
    Ok(PcaModel {
        mean: table.get("mean")?.clone(),
        components: table.get("components")?.clone(),
        eigenvalues: table.get("eigenvalues")?.data().iter().map(|&v| v as f64).collect(),
    })
}

// ---- forecaster stages ----

/// Per-scene token sequences in the requested space.
pub fn token_sequences(
    scenes: &[SceneData],
    space: &Space<'_>,
) -> Result<Vec<Vec<Tensor<f32>>>, PipelineError> {
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut seq = Vec::with_capacity(scene.features.len());
        for f in &scene.features {
            seq.push(space.to_tokens(f)?);
        }
        out.push(seq);
    }
    Ok(out)
}

fn forecaster_space<'a>(
    config: &Config,
    prefix: &str,
    vae: Option<&'a (VaeModel, LatentScaler)>,
) -> Space<'a> {
    match (config.string(&format!("{prefix}.space")).as_str(), vae) {
        ("vae", Some((model, scaler))) => Space::Vae { model, scaler },
        _ => Space::Direct,
    }
}

fn train_forecaster(
    config: &Config,
    paths: &Paths,
    method: Method,
) -> Result<VelocityField, PipelineError> {
    let started = Instant::now();
    let prefix = method.name();
    let dataset = load_dataset(config, paths)?;
    let wants_vae = config.string(&format!("{prefix}.space")) == "vae";
    let vae = if wants_vae { Some(load_vae(config, paths)?) } else { None };
    let space = forecaster_space(config, prefix, vae.as_ref());
    let channels = match &space {
        Space::Direct => feature_dim(config),
        Space::Vae { model, .. } => model.latent_channels,
    };
    let sequences = token_sequences(&dataset.train, &space)?;
    let cfg = denoiser_config(config, prefix, channels);
    let mut net = VelocityField::new(
        cfg,
        matches!(method, Method::Flow),
        derive_seed(config.seed(), &format!("{prefix}-model"), 0),
    );
    let steps = config.usize(&format!("{prefix}.steps"));
    let batch = config.usize(&format!("{prefix}.batch"));
    let opt = OptimizerConfig {
        learning_rate: config.real(&format!("{prefix}.lr")),
        weight_decay: config.real(&format!("{prefix}.weight_decay")),
        schedule: LrSchedule::WarmupCosine {
            warmup_steps: (steps as f64 * config.real(&format!("{prefix}.warmup_frac"))) as u64,
            total_steps: steps as u64,
        },
        ..OptimizerConfig::default()
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed(), &format!("{prefix}-train"), 0));
    let mut initial = f64::INFINITY;
    let mut last = f64::NAN;
    for step in 0..steps {
        let picks: Vec<&[Tensor<f32>]> =
            (0..batch).map(|_| sequences[rng.gen_range(0..sequences.len())].as_slice()).collect();
        let loss = match method {
            Method::Flow => flow_train_step(&picks, &mut net, &opt, &mut rng)?,
            Method::Regression => regression_train_step(&picks, &mut net, &opt, &mut rng)?,
        };
        if step == 0 {
            initial = loss;
        }
        if !loss.is_finite() || loss > 20.0 * initial.max(1e-8) {
            return Err(PipelineError::Diverged { step, loss, initial });
        }
        last = loss;
    }
    let mut table = TensorTable::new(config.resolved());
    table.insert_params("net.", &net.params)?;
    table.save(&paths.forecaster(method))?;
    finish_stage(
        config,
        paths,
        &format!("train-{prefix}"),
        started,
        &[("final_loss".into(), format!("{last}")), ("steps".into(), format!("{steps}"))],
    )?;
    Ok(net)
}

pub fn run_train_flow(config: &Config, paths: &Paths) -> Result<VelocityField, PipelineError> {
    train_forecaster(config, paths, Method::Flow)
}

pub fn run_train_regression(config: &Config, paths: &Paths) -> Result<VelocityField, PipelineError> {
    train_forecaster(config, paths, Method::Regression)
}

pub fn load_forecaster(
    config: &Config,
    paths: &Paths,
    method: Method,
    channels: usize,
) -> Result<VelocityField, PipelineError> {
    let prefix = method.name();
    let table = TensorTable::load(&require(paths.forecaster(method))?)?;
    let cfg = denoiser_config(config, prefix, channels);
    let mut net = VelocityField::new(
        cfg,
        matches!(method, Method::Flow),
        derive_seed(config.seed(), &format!("{prefix}-model"), 0),
    );
    table.load_params("net.", &mut net.params)?;
    Ok(net)
}

// ---- probe stages ----

fn probe_task(config: &Config) -> ProbeTask {
    match config.string("probe.task").as_str() {
        "depth" => ProbeTask::Depth { bins: config.usize("probe.depth_bins") },
        "rgb" => ProbeTask::Rgb,
        _ => ProbeTask::Segmentation { classes: config.usize("world.max_objects") + 1 },
    }
}

/// Trains one probe head on training features in the configured space
/// (direct, or round-tripped through VAE/PCA for the fidelity table).
pub fn run_train_probe(config: &Config, paths: &Paths) -> Result<ProbeHead, PipelineError> {
    let started = Instant::now();
    let dataset = load_dataset(config, paths)?;
    let task = probe_task(config);
    let space = config.string("probe.space");
    let mut features: Vec<Tensor<f32>> =
        dataset.train.iter().flat_map(|s| s.features.iter().cloned()).collect();
    match space.as_str() {
        "vae" => {
            let (model, _) = load_vae(config, paths)?;
            for f in &mut features {
                let post = vae_encode(f, &model)?;
                *f = vae_decode(&post.mu, &model)?;
            }
        }
        "pca" => {
            let model = load_pca(paths)?;
            for f in &mut features {
                *f = pca_reconstruct(&pca_project(f, &model)?, &model)?;
            }
        }
        _ => {}
    }
    let frames: Vec<&Frame> = dataset.train.iter().flat_map(|s| s.frames.iter()).collect();
    let mut head = ProbeHead::new(
        task.clone(),
        feature_dim(config),
        config.usize("probe.width"),
        config.usize("probe.blocks"),
        config.usize("world.patch"),
        derive_seed(config.seed(), "probe-model", 0),
    );
    let cfg = ProbeTrainConfig {
        epochs: config.usize("probe.epochs"),
        batch_frames: config.usize("probe.batch_frames"),
        learning_rate: config.real("probe.lr"),
        weight_decay: config.real("probe.weight_decay"),
        seed: derive_seed(config.seed(), "probe-train", 0),
    };
    let curve = train_probe(&features, &frames, &mut head, &cfg)?;
    let mut table = TensorTable::new(config.resolved());
    table.insert_params("probe.", &head.params)?;
    table.save(&paths.probe(task.name(), &space))?;
    let last = curve.last().copied().unwrap_or(f64::NAN);
    finish_stage(
        config,
        paths,
        "train-probe",
        started,
        &[("task".into(), task.name().into()), ("final_loss".into(), format!("{last}"))],
    )?;
    Ok(head)
}

pub fn load_probe(
    config: &Config,
    paths: &Paths,
    task: ProbeTask,
    space: &str,
) -> Result<ProbeHead, PipelineError> {
    let table = TensorTable::load(&require(paths.probe(task.name(), space))?)?;
    let mut head = ProbeHead::new(
        task,
        feature_dim(config),
        config.usize("probe.width"),
        config.usize("probe.blocks"),
        config.usize("world.patch"),
        derive_seed(config.seed(), "probe-model", 0),
    );
    table.load_params("probe.", &mut head.params)?;
    Ok(head)
}

// ---- rollout / evaluate / spectrum / report ----

/// Samples one rollout on the first test scene and dumps decoded frames as
/// PPM images plus a sampling manifest.
pub fn run_rollout(config: &Config, paths: &Paths) -> Result<(), PipelineError> {
    let started = Instant::now();
    let dataset = load_dataset(config, paths)?;
    let scene = dataset
        .test_multifuture
        .first()
        .ok_or_else(|| PipelineError::BadIndex("empty test split".into()))?;
    let wants_vae = config.string("eval.space") == "vae";
    let vae = if wants_vae { Some(load_vae(config, paths)?) } else { None };
    let space = forecaster_space_eval(config, vae.as_ref());
    let channels = match &space {
        Space::Direct => feature_dim(config),
        Space::Vae { model, .. } => model.latent_channels,
    };
    let net = load_forecaster(config, paths, Method::Flow, channels)?;
    let seg = load_probe(
        config,
        paths,
        ProbeTask::Segmentation { classes: config.usize("world.max_objects") + 1 },
        "direct",
    )?;
    let enc = encoder(config);
    let context_len = contexts(config)[0];
    let horizon = 12 - context_len;
    let realized = &scene.branches[0];
    let mut window = Vec::new();
    for tau in 0..context_len {
        let frame = crate::world::render_frame(realized, tau);
        window.push(space.to_tokens(&enc.encode(&frame)?)?);
    }
    let nfe = config.usize("flow.nfe");
    let seed = derive_seed(config.seed(), "cli-rollout", 0);
    let latents = rollout(&window, &net, horizon, nfe, seed)?;
    let g = grid(config);
    for (t, z) in latents.iter().enumerate() {
        let features = space.to_features(z, g)?;
        if let ProbeOutput::Labels(labels, side) = probe_predict(&features, &seg)? {
            let rgb = labels_to_rgb(&labels);
            let path = paths.rollout_dir().join(format!("step{t:02}-seg.ppm"));
            let io = |source| PipelineError::Io { path: path.display().to_string(), source };
            std::fs::create_dir_all(paths.rollout_dir()).map_err(io)?;
            std::fs::write(&path, write_ppm(&rgb, side)).map_err(io)?;
        }
    }
    finish_stage(
        config,
        paths,
        "rollout",
        started,
        &[
            ("nfe".into(), format!("{nfe}")),
            ("seed".into(), format!("{seed}")),
            ("context".into(), format!("{context_len}")),
            ("horizon".into(), format!("{horizon}")),
        ],
    )
}

fn contexts(config: &Config) -> Vec<usize> {
    config
        .string("eval.contexts")
        .split(',')
        .filter_map(|s| s.trim().parse::<usize>().ok())
        .collect()
}

fn forecaster_space_eval<'a>(
    config: &Config,
    vae: Option<&'a (VaeModel, LatentScaler)>,
) -> Space<'a> {
    match (config.string("eval.space").as_str(), vae) {
        ("vae", Some((model, scaler))) => Space::Vae { model, scaler },
        _ => Space::Direct,
    }
}

/// Full evaluation of one method (or the compression-fidelity table when
/// `eval.method = fidelity`); writes a CSV with the fixed header.
pub fn run_evaluate(config: &Config, paths: &Paths) -> Result<Vec<EvalReport>, PipelineError> {
    let started = Instant::now();
    let dataset = load_dataset(config, paths)?;
    let method_name = config.string("eval.method");
    let classes = config.usize("world.max_objects") + 1;
    let bins = config.usize("probe.depth_bins");

    if method_name == "fidelity" {
        // Table-analog protocol: each method is scored with probes trained on
        // its own round-tripped features.
        let (vae, _) = load_vae(config, paths)?;
        let pca = load_pca(paths)?;
        let held_out = &dataset.val;
        let mut reports = Vec::new();
        for (method, space) in [
            (FidelityMethod::Direct, "direct"),
            (FidelityMethod::Vae(&vae), "vae"),
            (FidelityMethod::Pca(&pca), "pca"),
        ] {
            let seg = load_probe(config, paths, ProbeTask::Segmentation { classes }, space)?;
            let depth = load_probe(config, paths, ProbeTask::Depth { bins }, space)?;
            reports.push(eval_compression_fidelity(
                &method,
                held_out,
                &seg,
                &depth,
                config.seed(),
            )?);
        }
        write_text(&paths.reports("fidelity"), &reports_to_csv(&reports))?;
        finish_stage(config, paths, "evaluate", started, &[("method".into(), "fidelity".into())])?;
        return Ok(reports);
    }

    let seg = load_probe(config, paths, ProbeTask::Segmentation { classes }, "direct")?;
    let depth = load_probe(config, paths, ProbeTask::Depth { bins }, "direct")?;

    let method = if method_name == "regression" { Method::Regression } else { Method::Flow };
    let wants_vae = config.string("eval.space") == "vae";
    let vae = if wants_vae { Some(load_vae(config, paths)?) } else { None };
    let space = forecaster_space_eval(config, vae.as_ref());
    let channels = match &space {
        Space::Direct => feature_dim(config),
        Space::Vae { model, .. } => model.latent_channels,
    };
    let net = load_forecaster(config, paths, method, channels)?;
    let enc = encoder(config);
    let num_scenes = config.usize("eval.scenes").min(dataset.test_multifuture.len());
    let setup = EvalSetup {
        scenes: &dataset.test_multifuture[..num_scenes],
        encoder: &enc,
        net: &net,
        method,
        space,
        seg_probe: &seg,
        depth_probe: &depth,
        contexts: contexts(config),
        total_frames: 12,
        nfe: config.usize("flow.nfe"),
        k_multi: config.usize("eval.k_context1"),
        k_single: config.usize("eval.k"),
        seed: derive_seed(config.seed(), "eval", 0),
        workers: config.workers(),
    };
    let reports = evaluate_method(&setup)?;
    write_text(&paths.reports(method.name()), &reports_to_csv(&reports))?;
    finish_stage(
        config,
        paths,
        "evaluate",
        started,
        &[
            ("method".into(), method.name().into()),
            ("nfe".into(), format!("{}", setup.nfe)),
            ("seed".into(), format!("{}", setup.seed)),
            ("contexts".into(), config.string("eval.contexts")),
            ("num_scenes".into(), format!("{num_scenes}")),
        ],
    )?;
    Ok(reports)
}

/// DCT power spectrum of the configured source over training frames.
pub fn run_spectrum(config: &Config, paths: &Paths) -> Result<SpectrumProfile, PipelineError> {
    let started = Instant::now();
    let dataset = load_dataset(config, paths)?;
    let source = config.string("spectral.source");
    let cap = config.usize("spectral.samples");
    let g = grid(config);
    let d = feature_dim(config);
    let frame_size = config.usize("world.frame_size");
    let profile = match source.as_str() {
        "rgb" => {
            let grids: Vec<&[f32]> = dataset
                .train
                .iter()
                .flat_map(|s| s.frames.iter().map(|f| f.rgb.data()))
                .take(cap)
                .collect();
            power_spectrum(&source, frame_size, frame_size, 3, grids)
        }
        "features" => {
            let grids: Vec<&[f32]> = dataset
                .train
                .iter()
                .flat_map(|s| s.features.iter().map(|f| f.data()))
                .take(cap)
                .collect();
            power_spectrum(&source, g, g, d, grids)
        }
        "pca-latents" => {
            let model = load_pca(paths)?;
            let mut latents = Vec::new();
            'outer_pca: for scene in &dataset.train {
                for f in &scene.features {
                    latents.push(pca_project(f, &model)?);
                    if latents.len() >= cap {
                        break 'outer_pca;
                    }
                }
            }
            let c = model.components.shape()[0];
            power_spectrum(&source, g, g, c, latents.iter().map(|t| t.data()))
        }
        _ => {
            // vae-latents: posterior samples, one per frame
            let (model, _) = load_vae(config, paths)?;
            let mut latents = Vec::new();
            'outer_vae: for scene in &dataset.train {
                for f in &scene.features {
                    let post = vae_encode(f, &model)?;
                    let z = reparameterize(
                        &post,
                        derive_seed(config.seed(), "spectrum-sample", latents.len() as u64),
                    );
                    latents.push(z);
                    if latents.len() >= cap {
                        break 'outer_vae;
                    }
                }
            }
            let label = format!("vae-latents(beta={})", model.beta);
            power_spectrum(&label, g, g, model.latent_channels, latents.iter().map(|t| t.data()))
        }
    };
    write_text(&paths.spectrum_csv(&source), &profile.to_csv())?;
    write_text(&paths.spectrum_svg(&source), &spectrum_svg(&[&profile]))?;
    finish_stage(
        config,
        paths,
        "spectrum",
        started,
        &[("source".into(), source.clone()), ("centroid".into(), format!("{}", profile.centroid))],
    )?;
    Ok(profile)
}

/// Renders every reports-*.csv in the output directory as one aligned table.
pub fn run_report(config: &Config, paths: &Paths) -> Result<String, PipelineError> {
    let started = Instant::now();
    let dir = &paths.out;
    let io = |source| PipelineError::Io { path: dir.display().to_string(), source };
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header: Vec<String> = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("reports-") && n.ends_with(".csv"))
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(PipelineError::Missing { path: dir.join("reports-*.csv") });
    }
    for path in &entries {
        let text = std::fs::read_to_string(path)
            .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
        for (i, line) in text.lines().enumerate() {
            let cells: Vec<String> = line.split(',').map(str::to_string).collect();
            if i == 0 {
                header = cells;
            } else {
                rows.push(cells);
            }
        }
    }
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in &rows {
        for (i, c) in row.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let fmt_row = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:>w$}", c, w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = String::new();
    out.push_str(&fmt_row(&header));
    out.push('\n');
    for row in &rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    write_text(&paths.report_txt(), &out)?;
    finish_stage(config, paths, "report", started, &[])?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config() -> Config {
        let mut c = Config::default();
        c.apply_text(
            "world.num_scenes = 6\nworld.frames = 8\nworld.branches = 4\n\
             world.train_frac = 0.5\nworld.val_frac = 0.25\nworld.test_frac = 0.25\n\
             workers = 1\n",
        )
        .unwrap();
        c
    }

    #[test]
    fn gen_data_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config();
        let paths = Paths::new(dir.path());
        run_gen_data(&config, &paths).unwrap();
        let first: Vec<Vec<u8>> = ["train", "val", "test"]
            .iter()
            .map(|s| std::fs::read(paths.split(s)).unwrap())
            .collect();
        let index1 = std::fs::read(paths.dataset_index()).unwrap();
        run_gen_data(&config, &paths).unwrap();
        for (i, s) in ["train", "val", "test"].iter().enumerate() {
            assert_eq!(std::fs::read(paths.split(s)).unwrap(), first[i], "split {s}");
        }
        assert_eq!(std::fs::read(paths.dataset_index()).unwrap(), index1);
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config();
        let paths = Paths::new(dir.path());
        let made = run_gen_data(&config, &paths).unwrap();
        let loaded = load_dataset(&config, &paths).unwrap();
        assert_eq!(loaded.train.len(), made.train.len());
        assert_eq!(loaded.test_multifuture.len(), made.test_multifuture.len());
        for (a, b) in loaded.train.iter().zip(&made.train) {
            assert_eq!(a.spec.seed, b.spec.seed);
            assert_eq!(a.frames.len(), b.frames.len());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert_eq!(fa.segmentation, fb.segmentation);
                assert_eq!(fa.rgb.data(), fb.rgb.data());
            }
            for (fa, fb) in a.features.iter().zip(&b.features) {
                assert_eq!(fa.data(), fb.data());
            }
        }
        for (a, b) in loaded.test_multifuture.iter().zip(&made.test_multifuture) {
            assert_eq!(a.parent.seed, b.parent.seed);
            assert_eq!(a.branches.len(), b.branches.len());
            for (ba, bb) in a.branches.iter().zip(&b.branches) {
                for (oa, ob) in ba.objects.iter().zip(&bb.objects) {
                    assert_eq!(oa.velocity, ob.velocity);
                }
            }
        }
    }

    #[test]
    fn missing_artifacts_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config();
        let paths = Paths::new(dir.path());
        let err = load_dataset(&config, &paths).unwrap_err();
        assert!(err.to_string().contains("index.txt"), "{err}");
        run_gen_data(&config, &paths).unwrap();
        let err = load_vae(&config, &paths).unwrap_err();
        assert!(err.to_string().contains("vae.bin"), "{err}");
        let err = load_forecaster(&config, &paths, Method::Flow, 16).unwrap_err();
        assert!(err.to_string().contains("flow.bin"), "{err}");
    }
}
