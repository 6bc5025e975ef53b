use vfmf::compression::*;
use vfmf::config::Config;
use vfmf::pipeline::*;
use vfmf::seeding::derive_seed;

fn val_mse(recon: impl Fn(&vfmf_tensor::Tensor<f32>) -> vfmf_tensor::Tensor<f32>, scenes: &[vfmf::world::SceneData]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in scenes {
        for f in &s.features {
            let r = recon(f);
            for (&a, &b) in f.data().iter().zip(r.data()) {
                sum += ((a - b) as f64).powi(2);
            }
            n += f.numel();
        }
    }
    sum / n as f64
}

#[test]
#[ignore]
fn vae_sweep() {
    let mut c = Config::default();
    c.apply_text("world.num_scenes = 64\nworld.frames = 12\nworld.branches = 64\nworld.train_frac = 0.375\nworld.val_frac = 0.125\nworld.test_frac = 0.5\n").unwrap();
    let paths = Paths::new("/tmp/acc-tune");
    let dataset = load_dataset(&c, &paths).unwrap();
    let pca = load_pca(&paths).unwrap();
    let pca_mse = val_mse(|f| pca_reconstruct(&pca_project(f, &pca).unwrap(), &pca).unwrap(), &dataset.val);
    println!("pca-16 val mse {pca_mse:.5}");

    for (epochs, lr, hidden, blocks) in [(40usize, 1e-3, 256usize, 4usize), (40, 2e-3, 256, 4), (80, 2e-3, 256, 4)] {
        let mut model = VaeModel::new(256, 16, hidden, blocks, 0.01, derive_seed(0, "vae-model", 0));
        let cfg = VaeTrainConfig { epochs, learning_rate: lr, ..VaeTrainConfig::default() };
        let t = std::time::Instant::now();
        let curve = train_vae(&dataset.train, &mut model, &cfg).unwrap();
        let last = curve.epochs.last().unwrap();
        let mse = val_mse(|f| {
            let post = vae_encode(f, &model).unwrap();
            vae_decode(&post.mu, &model).unwrap()
        }, &dataset.val);
        println!("e={epochs} lr={lr} h={hidden} b={blocks}: total {:.4} recon {:.4} kl {:.4} | val mse {mse:.5} ({:.0}s)", last.1, last.2, last.3, t.elapsed().as_secs_f64());
    }
}

#[test]
#[ignore]
fn beta_centroids() {
    use vfmf::spectral::power_spectrum;
    let mut c = Config::default();
    c.apply_text("world.num_scenes = 64\nworld.frames = 12\nworld.branches = 64\nworld.train_frac = 0.375\nworld.val_frac = 0.125\nworld.test_frac = 0.5\n").unwrap();
    let paths = Paths::new("/tmp/acc-tune");
    let dataset = load_dataset(&c, &paths).unwrap();
    let frames: Vec<&vfmf_tensor::Tensor<f32>> =
        dataset.train.iter().flat_map(|s| s.features.iter()).collect();
    for (i, beta) in [0.001f64, 0.01, 0.1].into_iter().enumerate() {
        let t = std::time::Instant::now();
        let mut model = VaeModel::new(256, 16, 256, 4, beta, derive_seed(77, "beta-vae", i as u64));
        let cfg = VaeTrainConfig { epochs: 30, seed: derive_seed(77, "beta-train", i as u64), ..VaeTrainConfig::default() };
        train_vae(&dataset.train, &mut model, &cfg).unwrap();
        let mut latents = Vec::new();
        for (j, f) in frames.iter().enumerate() {
            let post = vae_encode(f, &model).unwrap();
            latents.push(reparameterize(&post, derive_seed(77, "beta-sample", j as u64)));
        }
        let profile = power_spectrum(&format!("beta={beta}"), 8, 8, 16, latents.iter().map(|t| t.data()));
        println!("beta {beta}: centroid {:.4} ({:.0}s)", profile.centroid, t.elapsed().as_secs_f64());
    }
}
