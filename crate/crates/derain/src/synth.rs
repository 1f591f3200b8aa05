//! Synthetic rainy-image generation with known ground truth.
//!
//! Streak kernels are anti-aliased line segments through the kernel center;
//! activation maps are sparse seeded Bernoulli fields with positive
//! magnitudes. Pairs satisfy `O == B + R` and `R == synth(C, M)` bitwise
//! when clipping is off, which makes them usable as exact recovery oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{compose, synthesize_rain, Image, KernelBank, RainMapStack};
use crate::tensor::Plane;

/// Geometry of one rendered streak kernel.
#[derive(Clone, Debug)]
pub struct StreakParams {
    /// Degrees from the horizontal axis; 90 is vertical.
    pub angle_deg: f64,
    /// Segment length in pixels; must not exceed the kernel size.
    pub length: f64,
    /// Stroke width in pixels, at least 1.
    pub width: f64,
    /// Frobenius norm of the finished k x k x 3 slice.
    pub intensity: f64,
}

/// Render an anti-aliased line segment through the kernel center, equal
/// across the three channels, scaled to Frobenius norm `intensity`.
pub fn make_streak_kernel(p: &StreakParams, k: usize) -> Result<[Plane; 3]> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {k}")));
    }
    if p.length > k as f64 {
        return Err(Error::Config(format!(
            "streak length {} exceeds kernel size {k}",
            p.length
        )));
    }
    if p.width < 1.0 {
        return Err(Error::Config(format!("streak width must be at least 1, got {}", p.width)));
    }
    if !(p.intensity > 0.0) || !p.intensity.is_finite() {
        return Err(Error::Config(format!("intensity must be positive, got {}", p.intensity)));
    }
    let c = (k / 2) as f64;
    let theta = p.angle_deg.to_radians();
    let (dx, dy) = (theta.cos(), theta.sin());
    let half = p.length / 2.0;
    let mut plane = Plane::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            // pixel center relative to the kernel center; rows grow downward
            let (px, py) = (j as f64 - c, i as f64 - c);
            // project onto the segment direction, clamp to the segment
            let t = (px * dx + py * dy).clamp(-half, half);
            let (sx, sy) = (t * dx, t * dy);
            let dist = ((px - sx).powi(2) + (py - sy).powi(2)).sqrt();
            let coverage = (0.5 + p.width / 2.0 - dist).clamp(0.0, 1.0);
            plane.set(i, j, coverage);
        }
    }
    // norm over all three (equal) channels
    let norm = (3.0 * plane.norm_sq()).sqrt();
    let scaled = plane.scaled(p.intensity / norm);
    Ok([scaled.clone(), scaled.clone(), scaled])
}

/// Sparse activation maps: i.i.d. Bernoulli at `density / 1000` per pixel,
/// magnitudes uniform in [0.5, 1.5).
pub fn sample_sparse_maps(
    h: usize,
    w: usize,
    n: usize,
    density: f64,
    rng: &mut impl Rng,
) -> Result<RainMapStack> {
    if !(density > 0.0) {
        return Err(Error::Config(format!("density must be positive, got {density}")));
    }
    let p = (density / 1000.0).min(1.0);
    let maps = (0..n)
        .map(|_| {
            Plane::from_fn(h, w, |_, _| {
                if rng.random_bool(p) {
                    rng.random_range(0.5..1.5)
                } else {
                    0.0
                }
            })
        })
        .collect();
    RainMapStack::new(maps)
}

/// Generator configuration: kernel geometry ranges, sparsity, and scaling.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub kernel_size: usize,
    pub num_kernels: usize,
    /// Expected activations per 1000 pixels, per map.
    pub density: f64,
    /// Scale applied to the sampled map magnitudes; the rain-strength knob.
    pub map_scale: f64,
    pub angle_range_deg: (f64, f64),
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    /// Streak-slice Frobenius norm; 1.0 yields a normalized bank.
    pub intensity: f64,
    /// Clip the observation to [0, 1.5]. Off by default: clipping breaks the
    /// exact-model identity `O == B + R`.
    pub clip: bool,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            kernel_size: 9,
            num_kernels: 4,
            density: 2.0,
            map_scale: 1.0,
            angle_range_deg: (55.0, 125.0),
            length_range: (5.0, 9.0),
            width_range: (1.0, 1.6),
            intensity: 1.0,
            clip: false,
        }
    }
}

/// A generated pair with all latents.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub o: Image,
    pub b_true: Image,
    pub r_true: Image,
    pub m_true: RainMapStack,
    pub c_true: KernelBank,
}

/// Draw a bank of random streak kernels from the configured ranges.
pub fn make_streak_bank(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<KernelBank> {
    let k = cfg.kernel_size;
    let mut planes = Vec::with_capacity(cfg.num_kernels * 3);
    for _ in 0..cfg.num_kernels {
        let params = StreakParams {
            angle_deg: rng.random_range(cfg.angle_range_deg.0..cfg.angle_range_deg.1),
            length: rng.random_range(cfg.length_range.0..cfg.length_range.1.min(k as f64)),
            width: rng.random_range(cfg.width_range.0..cfg.width_range.1),
            intensity: cfg.intensity,
        };
        planes.extend(make_streak_kernel(&params, k)?);
    }
    let mut bank = KernelBank::new(k, cfg.num_kernels, planes)?;
    if (cfg.intensity - 1.0).abs() < 1e-12 {
        bank.normalized = true;
    }
    Ok(bank)
}

/// Smooth random background: a few low-frequency cosine waves with mild
/// per-channel gain variation, normalized into [0.1, 0.9].
pub fn random_smooth_background(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    let waves = 4;
    let mut params = Vec::with_capacity(waves);
    for _ in 0..waves {
        let fx: f64 = rng.random_range(-0.06..0.06);
        let fy: f64 = rng.random_range(-0.06..0.06);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.random_range(0.3..1.0);
        params.push((fx, fy, phase, amp));
    }
    let luma = Plane::from_fn(h, w, |i, j| {
        params
            .iter()
            .map(|(fx, fy, phase, amp)| {
                amp * (std::f64::consts::TAU * (fx * j as f64 + fy * i as f64) + phase).cos()
            })
            .sum()
    });
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in luma.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-9);
    let gains: Vec<f64> = (0..3).map(|_| rng.random_range(0.8..1.0)).collect();
    let planes: [Plane; 3] = std::array::from_fn(|c| {
        luma.map(|v| 0.1 + 0.8 * gains[c] * (v - lo) / span)
    });
    Image::new(planes).expect("consistent shape")
}

/// Compose an exact-model pair over the given background with a fresh
/// random bank.
pub fn synth_pair(background: &Image, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<SynthPair> {
    let bank = make_streak_bank(cfg, rng)?;
    synth_pair_with_bank(background, &bank, cfg, rng)
}

/// Compose an exact-model pair over the given background, reusing a shared
/// bank (dataset generation keeps one bank across all pairs).
pub fn synth_pair_with_bank(
    background: &Image,
    bank: &KernelBank,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<SynthPair> {
    let (h, w) = background.shape();
    let maps = sample_sparse_maps(h, w, bank.num_kernels(), cfg.density, rng)?
        .scaled(cfg.map_scale);
    let rain = synthesize_rain(bank, &maps)?;
    let mut o = compose(background, &rain)?;
    if cfg.clip {
        o = o.clamp(0.0, 1.5);
    }
    Ok(SynthPair {
        o,
        b_true: background.clone(),
        r_true: rain,
        m_true: maps,
        c_true: bank.clone(),
    })
}

/// Deterministic dataset: one shared bank, `count` pairs over smooth random
/// backgrounds. The same seed reproduces the same bytes.
pub fn generate_dataset(
    cfg: &SynthConfig,
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<(KernelBank, Vec<SynthPair>)> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let bank = make_streak_bank(cfg, &mut master)?;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let sub_seed = master.random::<u64>();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        let background = random_smooth_background(h, w, &mut rng);
        pairs.push(synth_pair_with_bank(&background, &bank, cfg, &mut rng)?);
    }
    Ok((bank, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertical_streak_lights_center_column() {
        let p = StreakParams { angle_deg: 90.0, length: 9.0, width: 1.0, intensity: 1.0 };
        let slice = make_streak_kernel(&p, 9).unwrap();
        let plane = &slice[0];
        let c = 4;
        for i in 0..9 {
            assert!(plane.at(i, c) > 0.0, "row {i} of center column is zero");
        }
        // columns far from the center stay dark for a width-1 stroke
        for i in 0..9 {
            assert_eq!(plane.at(i, 0), 0.0);
            assert_eq!(plane.at(i, 8), 0.0);
        }
    }

    #[test]
    fn streak_kernel_has_contracted_norm_and_180_symmetry() {
        let p = StreakParams { angle_deg: 37.0, length: 7.0, width: 1.2, intensity: 0.8 };
        let a = make_streak_kernel(&p, 9).unwrap();
        let norm: f64 = a.iter().map(|pl| pl.norm_sq()).sum::<f64>().sqrt();
        assert!((norm - 0.8).abs() < 1e-6);

        let mut p2 = p.clone();
        p2.angle_deg += 180.0;
        let b = make_streak_kernel(&p2, 9).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            for (x, y) in pa.data().iter().zip(pb.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn streak_length_cannot_exceed_kernel() {
        let p = StreakParams { angle_deg: 90.0, length: 10.0, width: 1.0, intensity: 1.0 };
        assert!(make_streak_kernel(&p, 9).is_err());
    }

    #[test]
    fn sparse_maps_density_and_determinism() {
        // near-zero density: almost surely no activations
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps = sample_sparse_maps(64, 64, 2, 1e-9, &mut rng).unwrap();
        assert!(maps.count_nonzero() <= 1);

        // fixed seed reproduces identical maps
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = sample_sparse_maps(32, 32, 3, 2.0, &mut r1).unwrap();
        let b = sample_sparse_maps(32, 32, 3, 2.0, &mut r2).unwrap();
        assert_eq!(a, b);

        // empirical count on 512x512 within 20% of the binomial expectation
        let mut r3 = ChaCha8Rng::seed_from_u64(3);
        let big = sample_sparse_maps(512, 512, 1, 2.0, &mut r3).unwrap();
        let expect = 512.0 * 512.0 * 2.0 / 1000.0;
        let got = big.count_nonzero() as f64;
        assert!(
            (got - expect).abs() <= 0.2 * expect,
            "count {got} vs expectation {expect}"
        );
    }

    #[test]
    fn exact_model_identity_holds_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bg = random_smooth_background(24, 24, &mut rng);
        let cfg = SynthConfig::default();
        let pair = synth_pair(&bg, &cfg, &mut rng).unwrap();
        let recomposed =
            compose(&pair.b_true, &synthesize_rain(&pair.c_true, &pair.m_true).unwrap()).unwrap();
        assert_eq!(pair.o, recomposed);
        assert_eq!(pair.o.sub(&pair.b_true), pair.r_true);
    }

    #[test]
    fn zero_density_limit_means_no_rain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bg = random_smooth_background(32, 32, &mut rng);
        let cfg = SynthConfig { density: 1e-9, ..SynthConfig::default() };
        let pair = synth_pair(&bg, &cfg, &mut rng).unwrap();
        if pair.m_true.count_nonzero() == 0 {
            assert_eq!(pair.o, pair.b_true);
        }
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let (bank_a, pairs_a) = generate_dataset(&cfg, 3, 16, 16, 7).unwrap();
        let (bank_b, pairs_b) = generate_dataset(&cfg, 3, 16, 16, 7).unwrap();
        assert_eq!(bank_a.to_tensor(), bank_b.to_tensor());
        for (a, b) in pairs_a.iter().zip(&pairs_b) {
            assert_eq!(a.o, b.o);
            assert_eq!(a.b_true, b.b_true);
        }
    }

    #[test]
    fn backgrounds_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bg = random_smooth_background(40, 40, &mut rng);
        for c in 0..3 {
            for &v in bg.plane(c).data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
