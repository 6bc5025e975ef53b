//! DCT-based spectral analysis: per-frequency power sorted by zig-zag index
//! and spectral-centroid summaries for RGB, features, and latents.

/// Orthonormal DCT-II matrix of size n x n (64-bit).
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0f64; n * n];
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for j in 0..n {
            m[k * n + j] =
                scale * (std::f64::consts::PI / n as f64 * (j as f64 + 0.5) * k as f64).cos();
        }
    }
    m
}

/// Orthonormal 2-D DCT-II: C_h . X . C_w^T, row-major H x W.
pub fn dct2(grid: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(grid.len(), h * w, "grid length");
    let ch = dct_matrix(h);
    let cw = dct_matrix(w);
    // tmp = C_h . X
    let mut tmp = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for t in 0..h {
                acc += ch[i * h + t] * grid[t * w + j];
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for t in 0..w {
                acc += tmp[i * w + t] * cw[j * w + t];
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Inverse of `dct2` (transpose of the orthonormal transform).
pub fn idct2(coeffs: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(coeffs.len(), h * w, "grid length");
    let ch = dct_matrix(h);
    let cw = dct_matrix(w);
    let mut tmp = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for t in 0..h {
                acc += ch[t * h + i] * coeffs[t * w + j];
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for t in 0..w {
                acc += tmp[i * w + t] * cw[t * w + j];
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// JPEG-convention zig-zag traversal: anti-diagonals of ascending i+j, with
/// alternating direction (even diagonals run bottom-left to top-right).
pub fn zigzag_order(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(h * w);
    for d in 0..h + w - 1 {
        if d % 2 == 0 {
            // up-right: i descending
            let i_start = d.min(h - 1);
            let mut i = i_start as isize;
            while i >= 0 && d - i as usize <= w - 1 {
                order.push((i as usize, d - i as usize));
                i -= 1;
            }
        } else {
            // down-left: j descending
            let j_start = d.min(w - 1);
            let mut j = j_start as isize;
            while j >= 0 && d - j as usize <= h - 1 {
                order.push((d - j as usize, j as usize));
                j -= 1;
            }
        }
    }
    order
}

#[derive(Clone, Debug)]
pub struct SpectrumProfile {
    pub source: String,
    /// (zigzag index, mean power), channel- and sample-averaged.
    pub powers: Vec<(usize, f64)>,
    /// Power-weighted mean zig-zag index, normalized to [0, 1].
    pub centroid: f64,
    /// Mean squared norm of the mean-removed input (Parseval check target).
    pub total_power: f64,
}

/// Power per zig-zag frequency: per-channel spatial mean removal, dct2,
/// squared coefficients, averaged over channels and samples. `samples` yields
/// channel-major grids: each item is (channels, h, w, data) with data laid
/// out [h][w][channels] as in the feature tensors.
pub fn power_spectrum<'a, I>(source: &str, h: usize, w: usize, channels: usize, samples: I) -> SpectrumProfile
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut acc = vec![0.0f64; h * w];
    let mut count = 0usize;
    let mut grid = vec![0.0f64; h * w];
    for data in samples {
        assert_eq!(data.len(), h * w * channels, "sample layout");
        for c in 0..channels {
            let mut mean = 0.0f64;
            for p in 0..h * w {
                grid[p] = data[p * channels + c] as f64;
                mean += grid[p];
            }
            mean /= (h * w) as f64;
            for g in &mut grid {
                *g -= mean;
            }
            let coeffs = dct2(&grid, h, w);
            for (a, &v) in acc.iter_mut().zip(&coeffs) {
                *a += v * v;
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    let order = zigzag_order(h, w);
    let powers: Vec<(usize, f64)> = order
        .iter()
        .enumerate()
        .map(|(idx, &(i, j))| (idx, acc[i * w + j] / n))
        .collect();
    let total: f64 = powers.iter().map(|&(_, p)| p).sum();
    let centroid = if total > 0.0 && powers.len() > 1 {
        powers.iter().map(|&(i, p)| i as f64 * p).sum::<f64>()
            / total
            / (powers.len() - 1) as f64
    } else {
        0.0
    };
    SpectrumProfile { source: source.to_string(), powers, centroid, total_power: total }
}

impl SpectrumProfile {
    /// CSV: zigzag_index,power (raw totals; normalized power derivable).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("zigzag_index,power\n");
        for &(i, p) in &self.powers {
            out.push_str(&format!("{i},{p}\n"));
        }
        out
    }
}

/// Static SVG line plot of log10 power vs zig-zag index for several profiles.
pub fn spectrum_svg(profiles: &[&SpectrumProfile]) -> String {
    let (width, height, pad) = (640.0f64, 400.0f64, 50.0f64);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];
    let mut min_log = f64::INFINITY;
    let mut max_log = f64::NEG_INFINITY;
    let mut max_idx = 1usize;
    for p in profiles {
        let total: f64 = p.powers.iter().map(|&(_, v)| v).sum();
        for &(i, v) in &p.powers {
            let lv = ((v / total.max(1e-300)).max(1e-12)).log10();
            min_log = min_log.min(lv);
            max_log = max_log.max(lv);
            max_idx = max_idx.max(i);
        }
    }
    let x = |i: usize| pad + (width - 2.0 * pad) * i as f64 / max_idx.max(1) as f64;
    let y = |lv: f64| height - pad - (height - 2.0 * pad) * (lv - min_log) / (max_log - min_log).max(1e-9);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-size=\"14\">normalized log10 power vs zig-zag index</text>\n",
        pad
    );
    for (pi, p) in profiles.iter().enumerate() {
        let total: f64 = p.powers.iter().map(|&(_, v)| v).sum();
        let pts: Vec<String> = p
            .powers
            .iter()
            .map(|&(i, v)| {
                format!("{:.2},{:.2}", x(i), y(((v / total.max(1e-300)).max(1e-12)).log10()))
            })
            .collect();
        let color = colors[pi % colors.len()];
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{} (centroid {:.4})</text>\n",
            pts.join(" "),
            pad + 4.0,
            30.0 + 14.0 * pi as f64 + 10.0,
            p.source,
            p.centroid
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_grid_is_dc_only() {
        let c = 0.37;
        let coeffs = dct2(&vec![c; 6 * 4], 6, 4);
        assert!((coeffs[0] - c * 24.0f64.sqrt()).abs() < 1e-12);
        for v in &coeffs[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (h, w) in [(8usize, 8usize), (8, 16), (17, 9)] {
            let grid: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let coeffs = dct2(&grid, h, w);
            let back = idct2(&coeffs, h, w);
            let max_err = grid
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-10, "{h}x{w} round trip err {max_err}");
            let in_sq: f64 = grid.iter().map(|v| v * v).sum();
            let out_sq: f64 = coeffs.iter().map(|v| v * v).sum();
            assert!((in_sq - out_sq).abs() < 1e-9 * in_sq, "parseval");
        }
    }

    #[test]
    fn basis_function_gives_one_hot_coefficient() {
        let (h, w) = (8usize, 8usize);
        let k = 3usize;
        let cw = dct_matrix(w);
        // grid = k-th column basis function, constant over rows
        let grid: Vec<f64> = (0..h * w).map(|p| cw[k * w + p % w]).collect();
        let coeffs = dct2(&grid, h, w);
        for i in 0..h {
            for j in 0..w {
                let expect = if (i, j) == (0, k) { (h as f64).sqrt() } else { 0.0 };
                assert!((coeffs[i * w + j] - expect).abs() < 1e-10, "({i},{j})");
            }
        }
    }

    #[test]
    fn zigzag_small_cases() {
        assert_eq!(zigzag_order(2, 2), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(
            zigzag_order(3, 3),
            vec![
                (0, 0),
                (0, 1),
                (1, 0),
                (2, 0),
                (1, 1),
                (0, 2),
                (1, 2),
                (2, 1),
                (2, 2)
            ]
        );
    }

    #[test]
    fn zigzag_is_bijective_up_to_16() {
        for h in 1..=16usize {
            for w in 1..=16usize {
                let order = zigzag_order(h, w);
                assert_eq!(order.len(), h * w);
                let mut seen = vec![false; h * w];
                for (i, j) in order {
                    assert!(i < h && j < w);
                    assert!(!seen[i * w + j], "duplicate at ({i},{j})");
                    seen[i * w + j] = true;
                }
            }
        }
    }

    #[test]
    fn white_noise_spectrum_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f32>> = (0..10_000)
            .map(|_| {
                (0..64)
                    .map(|_| {
                        use rand_distr::{Distribution, StandardNormal};
                        let v: f64 = StandardNormal.sample(&mut rng);
                        v as f32
                    })
                    .collect()
            })
            .collect();
        let profile =
            power_spectrum("noise", 8, 8, 1, samples.iter().map(|s| s.as_slice()));
        // skip the DC bin: mean removal pins it near zero by construction
        let bins: Vec<f64> = profile.powers[1..].iter().map(|&(_, p)| p).collect();
        let max = bins.iter().cloned().fold(f64::MIN, f64::max);
        let min = bins.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 2.0, "flatness ratio {}", max / min);
    }

    #[test]
    fn constant_images_have_zero_centroid() {
        let samples = vec![vec![0.5f32; 64]; 4];
        let profile = power_spectrum("const", 8, 8, 1, samples.iter().map(|s| s.as_slice()));
        assert_eq!(profile.centroid, 0.0);
        assert!(profile.total_power < 1e-12);
    }

    #[test]
    fn csv_and_svg_render() {
        let samples = vec![vec![0.1f32, 0.9, 0.4, 0.2]; 2];
        let p = power_spectrum("x", 2, 2, 1, samples.iter().map(|s| s.as_slice()));
        let csv = p.to_csv();
        assert!(csv.starts_with("zigzag_index,power\n0,"));
        assert_eq!(csv.lines().count(), 5);
        let svg = spectrum_svg(&[&p]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
    }
}
