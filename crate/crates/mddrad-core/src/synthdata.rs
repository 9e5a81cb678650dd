//! Deterministic generator of labeled, radar-like range/Doppler
//! spectrogram datasets.
//!
//! Each sample is a set of kinematic components (torso, limbs) whose range
//! trajectory r(t) is a drifting sinusoid; the Doppler trajectory is its
//! time derivative. Components are rasterized at the radar configuration's
//! native resolution (range/speed bins from the resolution fields, time
//! bins from the frame period, integrated over the frame), so two
//! configurations render the *same* underlying motion differently — that
//! rendering difference is the domain shift. All randomness flows through
//! [`Xoshiro256`]; kinematic jitter depends only on (seed, class), never on
//! the configuration.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MddError, Result};
use crate::rng::Xoshiro256;

/// Common crop window applied before resampling: 0-2 s, 0-4.8 m, +/-5 m/s.
pub const CROP_TIME_S: f64 = 2.0;
pub const CROP_RANGE_M: f64 = 4.8;
pub const CROP_SPEED_MPS: f64 = 5.0;

/// Number of activity classes.
pub const CLASS_COUNT: usize = 5;

pub const CLASS_NAMES: [&str; CLASS_COUNT] =
    ["standing", "waving", "walking", "boxing", "boxing_walking"];

/// FMCW configuration analog: the fields that shape the native raster.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RadarConfigSpec {
    pub name: String,
    pub chirps_per_frame: usize,
    pub samples_per_chirp: usize,
    pub bandwidth_ghz: f64,
    pub frame_period_ms: f64,
    pub range_resolution_cm: f64,
    pub max_range_m: f64,
    pub max_speed_mps: f64,
    pub speed_resolution_mps: f64,
    pub noise_sigma: f64,
}

impl RadarConfigSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.bandwidth_ghz,
            self.frame_period_ms,
            self.range_resolution_cm,
            self.max_range_m,
            self.max_speed_mps,
            self.speed_resolution_mps,
        ];
        if fields.iter().any(|f| *f <= 0.0) || self.chirps_per_frame == 0 || self.samples_per_chirp == 0 {
            return Err(MddError::contract(format!(
                "config '{}': all physical fields must be positive",
                self.name
            )));
        }
        if self.max_range_m < CROP_RANGE_M {
            return Err(MddError::contract(format!(
                "config '{}': max range {} m does not cover the {} m crop window",
                self.name, self.max_range_m, CROP_RANGE_M
            )));
        }
        Ok(())
    }
}

/// Built-in presets named after the four configuration columns.
pub fn preset(name: &str) -> Option<RadarConfigSpec> {
    let base = |name: &str| RadarConfigSpec {
        name: name.to_string(),
        chirps_per_frame: 64,
        samples_per_chirp: 256,
        bandwidth_ghz: 2.0,
        frame_period_ms: 32.0,
        range_resolution_cm: 7.5,
        max_range_m: 6.2,
        max_speed_mps: 5.0,
        speed_resolution_mps: 0.15,
        noise_sigma: 0.0,
    };
    // noise floor scales inversely with processing gain: more samples per
    // chirp, more bandwidth, and longer integration all lower it
    let with_noise = |mut cfg: RadarConfigSpec| {
        let samples = 256.0 / cfg.samples_per_chirp as f64;
        let bw = 2.0 / cfg.bandwidth_ghz;
        let frame = 32.0 / cfg.frame_period_ms;
        cfg.noise_sigma = 0.04 * samples.powi(2) * bw.powf(0.75) * frame.powf(0.75);
        Some(cfg)
    };
    match name {
        "I" => with_noise(RadarConfigSpec {
            frame_period_ms: 50.0,
            ..base("I")
        }),
        "II" => with_noise(RadarConfigSpec {
            bandwidth_ghz: 1.0,
            range_resolution_cm: 15.0,
            max_range_m: 12.5,
            ..base("II")
        }),
        "III" => with_noise(RadarConfigSpec {
            samples_per_chirp: 128,
            max_range_m: 4.8,
            ..base("III")
        }),
        "IV" => with_noise(base("IV")),
        _ => None,
    }
}

/// Paired range/Doppler maps, row-major [h, w] with rows = range (or
/// Doppler) bins and columns = time. Values are normalized to [0,1] and
/// exactly f32-representable so the on-disk round trip is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramSample {
    pub x_r: Vec<f64>,
    pub x_d: Vec<f64>,
    pub h: usize,
    pub w: usize,
    /// 1-based class, absent on unlabeled samples.
    pub label: Option<usize>,
    pub config_name: String,
}

/// Native-resolution maps before cropping/resampling.
#[derive(Clone, Debug)]
pub struct NativeMaps {
    /// [n_range, n_frames]
    pub x_r: Vec<f64>,
    pub n_range: usize,
    /// [n_doppler, n_frames]
    pub x_d: Vec<f64>,
    pub n_doppler: usize,
    pub n_frames: usize,
    pub frame_period_s: f64,
    pub range_res_m: f64,
    pub speed_res: f64,
    pub max_speed: f64,
}

/// One kinematic component: r(t) = r0 + drift*t + amp*sin(2*pi*freq*t + phase),
/// Doppler track v(t) = dr/dt.
#[derive(Clone, Debug)]
struct Component {
    weight: f64,
    r0: f64,
    drift: f64,
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Component {
    fn range_at(&self, t: f64) -> f64 {
        self.r0 + self.drift * t + self.amp * (2.0 * std::f64::consts::PI * self.freq * t + self.phase).sin()
    }

    fn speed_at(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.freq;
        self.drift + self.amp * w * (w * t + self.phase).cos()
    }
}

fn jit(rng: &mut Xoshiro256, spread: f64) -> f64 {
    rng.uniform(1.0 - spread, 1.0 + spread)
}

/// Per-class component table with per-sample jitter. Depends only on
/// (class, rng stream), never on the radar configuration.
fn class_components(class_id: usize, rng: &mut Xoshiro256) -> Vec<Component> {
    let tau = 2.0 * std::f64::consts::PI;
    let phase = |rng: &mut Xoshiro256| rng.uniform(0.0, tau);
    let mut comps = Vec::new();
    match class_id {
        // standing: torso micro-sway only, energy pinned to zero Doppler
        1 => {
            let r0 = rng.uniform(1.2, 1.8);
            comps.push(Component {
                weight: 1.0,
                r0,
                drift: 0.0,
                amp: 0.03 * jit(rng, 0.2),
                freq: 0.3 * jit(rng, 0.15),
                phase: phase(rng),
            });
        }
        // waving: static torso plus a periodic arm and its harmonic
        2 => {
            let r0 = rng.uniform(1.4, 2.0);
            comps.push(Component {
                weight: 0.8,
                r0,
                drift: 0.0,
                amp: 0.02 * jit(rng, 0.2),
                freq: 0.3 * jit(rng, 0.15),
                phase: phase(rng),
            });
            let f_arm = 1.8 * jit(rng, 0.1);
            comps.push(Component {
                weight: 1.2,
                r0: r0 + rng.uniform(0.15, 0.3),
                drift: 0.0,
                amp: 0.28 * jit(rng, 0.15),
                freq: f_arm,
                phase: phase(rng),
            });
            comps.push(Component {
                weight: 0.3,
                r0: r0 + rng.uniform(0.15, 0.3),
                drift: 0.0,
                amp: 0.08 * jit(rng, 0.2),
                freq: 2.0 * f_arm,
                phase: phase(rng),
            });
        }
        // walking: approaching torso, leg swing at gait frequency, slower arms
        3 => {
            let speed = 1.1 * jit(rng, 0.1);
            let r0 = rng.uniform(3.6, 4.0);
            let drift = -speed;
            let gait = 1.8 * jit(rng, 0.1);
            comps.push(Component {
                weight: 0.8,
                r0,
                drift,
                amp: 0.04 * jit(rng, 0.2),
                freq: gait,
                phase: phase(rng),
            });
            comps.push(Component {
                weight: 0.6,
                r0,
                drift,
                amp: 0.18 * jit(rng, 0.15),
                freq: gait,
                phase: phase(rng),
            });
            comps.push(Component {
                weight: 0.3,
                r0,
                drift,
                amp: 0.1 * jit(rng, 0.2),
                freq: 0.5 * gait,
                phase: phase(rng),
            });
        }
        // boxing: static body, two alternating fists plus a harmonic
        4 => {
            let r0 = rng.uniform(1.8, 2.6);
            comps.push(Component {
                weight: 0.8,
                r0,
                drift: 0.0,
                amp: 0.03 * jit(rng, 0.2),
                freq: 0.4 * jit(rng, 0.15),
                phase: phase(rng),
            });
            let f_fist = 3.6 * jit(rng, 0.1);
            let p = phase(rng);
            comps.push(Component {
                weight: 0.9,
                r0: r0 + rng.uniform(0.15, 0.3),
                drift: 0.0,
                amp: 0.19 * jit(rng, 0.15),
                freq: f_fist,
                phase: p,
            });
            comps.push(Component {
                weight: 0.7,
                r0: r0 + rng.uniform(0.15, 0.3),
                drift: 0.0,
                amp: 0.17 * jit(rng, 0.15),
                freq: f_fist,
                phase: p + std::f64::consts::PI,
            });
            comps.push(Component {
                weight: 0.2,
                r0: r0 + rng.uniform(0.15, 0.3),
                drift: 0.0,
                amp: 0.08 * jit(rng, 0.2),
                freq: 2.0 * f_fist,
                phase: phase(rng),
            });
        }
        // boxing while walking: receding drift plus fist and leg oscillation
        5 => {
            let speed = 0.8 * jit(rng, 0.1);
            let r0 = rng.uniform(0.8, 1.2);
            let drift = speed;
            let gait = 1.7 * jit(rng, 0.1);
            comps.push(Component {
                weight: 0.8,
                r0,
                drift,
                amp: 0.04 * jit(rng, 0.2),
                freq: gait,
                phase: phase(rng),
            });
            comps.push(Component {
                weight: 0.5,
                r0: r0 + rng.uniform(0.1, 0.3),
                drift,
                amp: 0.2 * jit(rng, 0.15),
                freq: 3.0 * jit(rng, 0.1),
                phase: phase(rng),
            });
            comps.push(Component {
                weight: 0.35,
                r0,
                drift,
                amp: 0.14 * jit(rng, 0.2),
                freq: gait,
                phase: phase(rng),
            });
        }
        _ => unreachable!("class id validated by caller"),
    }
    comps
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}

/// Sub-steps integrated across each frame period; faster frame rates smear
/// fast Doppler tracks less.
const FRAME_SUBSTEPS: usize = 8;

/// Render one sample at the configuration's native resolution.
/// Deterministic in (class_id, config, rng_seed); the underlying motion
/// depends only on (class_id, rng_seed).
pub fn generate_sample(
    class_id: usize,
    config: &RadarConfigSpec,
    rng_seed: u64,
) -> Result<NativeMaps> {
    if !(1..=CLASS_COUNT).contains(&class_id) {
        return Err(MddError::contract(format!(
            "class id {class_id} out of range 1..={CLASS_COUNT}"
        )));
    }
    config.validate()?;

    let mut motion_rng = Xoshiro256::derive(rng_seed, class_id as u64);
    let comps = class_components(class_id, &mut motion_rng);

    let frame_period = config.frame_period_ms / 1000.0;
    let n_frames = (CROP_TIME_S / frame_period).ceil() as usize;
    let range_res = config.range_resolution_cm / 100.0;
    let n_range = (config.max_range_m / range_res).round() as usize;
    let n_doppler = (2.0 * config.max_speed_mps / config.speed_resolution_mps).round() as usize;

    let mut x_r = vec![0.0; n_range * n_frames];
    let mut x_d = vec![0.0; n_doppler * n_frames];

    let sigma_r = range_res;
    let sigma_v = config.speed_resolution_mps;
    let sub_w = 1.0 / FRAME_SUBSTEPS as f64;

    for frame in 0..n_frames {
        for sub in 0..FRAME_SUBSTEPS {
            let t = (frame as f64 + (sub as f64 + 0.5) * sub_w) * frame_period;
            for comp in &comps {
                let r = comp.range_at(t);
                let v = comp.speed_at(t);
                // range-dependent sensitivity droop, scaled by the sensor's
                // own maximum range
                let gain = (-2.0 * r / config.max_range_m).exp();
                let w = comp.weight * sub_w;

                deposit(
                    &mut x_r,
                    n_range,
                    n_frames,
                    frame,
                    (r / range_res) - 0.5,
                    sigma_r / range_res,
                    w * gain,
                );
                deposit(
                    &mut x_d,
                    n_doppler,
                    n_frames,
                    frame,
                    ((v + config.max_speed_mps) / config.speed_resolution_mps) - 0.5,
                    sigma_v / config.speed_resolution_mps,
                    w * gain,
                );
            }
        }
    }

    // static clutter: fixed reflections of the sensor's surroundings and
    // self-interference. Deterministic per configuration — identical in
    // every sample of a domain, different across configurations.
    let mut clutter_rng = Xoshiro256::derive(fnv1a(config.name.as_bytes()), 0x636C7574);
    for _ in 0..3 {
        let r = clutter_rng.uniform(0.3, config.max_range_m.min(CROP_RANGE_M));
        let a = clutter_rng.uniform(0.35, 0.7);
        let gain = (-2.0 * r / config.max_range_m).exp();
        for frame in 0..n_frames {
            deposit(&mut x_r, n_range, n_frames, frame, (r / range_res) - 0.5, 1.0, a * gain);
        }
    }
    let ridge = clutter_rng.uniform(0.12, 0.2);
    let zero_bin = (config.max_speed_mps / config.speed_resolution_mps) - 0.5;
    for frame in 0..n_frames {
        deposit(&mut x_d, n_doppler, n_frames, frame, zero_bin, 1.0, ridge);
    }

    if config.noise_sigma > 0.0 {
        let mut noise_rng = Xoshiro256::derive(rng_seed ^ fnv1a(config.name.as_bytes()), 0x6E6F69);
        for v in x_r.iter_mut().chain(x_d.iter_mut()) {
            *v += config.noise_sigma * noise_rng.normal();
        }
    }

    Ok(NativeMaps {
        x_r,
        n_range,
        x_d,
        n_doppler,
        n_frames,
        frame_period_s: frame_period,
        range_res_m: range_res,
        speed_res: config.speed_resolution_mps,
        max_speed: config.max_speed_mps,
    })
}

/// Gaussian deposit along the bin axis at fractional position `center`
/// (in bins), truncated at 3 sigma.
fn deposit(
    map: &mut [f64],
    n_bins: usize,
    n_frames: usize,
    frame: usize,
    center: f64,
    sigma_bins: f64,
    weight: f64,
) {
    let lo = ((center - 3.0 * sigma_bins).floor().max(0.0)) as usize;
    let hi = ((center + 3.0 * sigma_bins).ceil()).min((n_bins - 1) as f64) as usize;
    let inv2s2 = 1.0 / (2.0 * sigma_bins * sigma_bins);
    for bin in lo..=hi {
        let d = bin as f64 - center;
        map[bin * n_frames + frame] += weight * (-d * d * inv2s2).exp();
    }
}

/// Bilinear lookup at fractional native coordinates, clamped at the edges.
fn bilinear(map: &[f64], n_bins: usize, n_frames: usize, bin: f64, frame: f64) -> f64 {
    let bi = bin.clamp(0.0, (n_bins - 1) as f64);
    let fi = frame.clamp(0.0, (n_frames - 1) as f64);
    let b0 = bi.floor() as usize;
    let f0 = fi.floor() as usize;
    let b1 = (b0 + 1).min(n_bins - 1);
    let f1 = (f0 + 1).min(n_frames - 1);
    let db = bi - b0 as f64;
    let df = fi - f0 as f64;
    let v00 = map[b0 * n_frames + f0];
    let v01 = map[b0 * n_frames + f1];
    let v10 = map[b1 * n_frames + f0];
    let v11 = map[b1 * n_frames + f1];
    v00 * (1.0 - db) * (1.0 - df) + v01 * (1.0 - db) * df + v10 * db * (1.0 - df) + v11 * db * df
}

/// Crop to the common window, bilinearly resample to h x w, min-max scale
/// each map to [0,1], and quantize to f32 precision so file round trips
/// are exact.
pub fn normalize(
    native: &NativeMaps,
    config: &RadarConfigSpec,
    h: usize,
    w: usize,
) -> Result<SpectrogramSample> {
    let native_time = native.n_frames as f64 * native.frame_period_s;
    let native_range = native.n_range as f64 * native.range_res_m;
    if native_time + 1e-9 < CROP_TIME_S
        || native_range + 1e-9 < CROP_RANGE_M
        || native.max_speed + 1e-9 < CROP_SPEED_MPS
    {
        return Err(MddError::Coverage(format!(
            "native extent (t={native_time:.3} s, r={native_range:.2} m, v={:.2} m/s) \
             does not cover the crop window",
            native.max_speed
        )));
    }
    let mut x_r = vec![0.0; h * w];
    let mut x_d = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let t = (j as f64 + 0.5) / w as f64 * CROP_TIME_S;
            let frame = t / native.frame_period_s - 0.5;

            let r = (i as f64 + 0.5) / h as f64 * CROP_RANGE_M;
            let rbin = r / native.range_res_m - 0.5;
            x_r[i * w + j] = bilinear(&native.x_r, native.n_range, native.n_frames, rbin, frame);

            let v = -CROP_SPEED_MPS + (i as f64 + 0.5) / h as f64 * 2.0 * CROP_SPEED_MPS;
            let vbin = (v + native.max_speed) / native.speed_res - 0.5;
            x_d[i * w + j] = bilinear(&native.x_d, native.n_doppler, native.n_frames, vbin, frame);
        }
    }
    for map in [&mut x_r, &mut x_d] {
        min_max_scale(map);
    }
    Ok(SpectrogramSample {
        x_r,
        x_d,
        h,
        w,
        label: None,
        config_name: config.name.clone(),
    })
}

fn min_max_scale(map: &mut [f64]) {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    // spans within rounding noise of zero count as constant maps
    let tiny = 1e-9 * hi.abs().max(lo.abs());
    for v in map.iter_mut() {
        // degenerate constant maps scale to zero
        *v = if span > tiny { (*v - lo) / span } else { 0.0 };
        *v = (*v as f32) as f64;
    }
}

/// Render and normalize in one step.
pub fn generate_normalized(
    class_id: usize,
    config: &RadarConfigSpec,
    rng_seed: u64,
    h: usize,
    w: usize,
) -> Result<SpectrogramSample> {
    let native = generate_sample(class_id, config, rng_seed)?;
    let mut sample = normalize(&native, config, h, w)?;
    sample.label = Some(class_id);
    Ok(sample)
}

/// Ordered, immutable sample collection with provenance.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub samples: Vec<SpectrogramSample>,
    pub labeled: bool,
    pub seed: u64,
    pub k: usize,
    pub config: RadarConfigSpec,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn strip_labels(&mut self) {
        self.labeled = false;
        for s in &mut self.samples {
            s.label = None;
        }
    }
}

fn build_dataset(
    config: &RadarConfigSpec,
    n: usize,
    k: usize,
    seed: u64,
    stream_base: u64,
    h: usize,
    w: usize,
) -> Result<DomainDataset> {
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let class_id = i % k + 1;
        let mut sm = seed ^ (stream_base + i as u64).wrapping_mul(0x9E3779B97F4A7C15);
        crate::rng::splitmix64(&mut sm);
        let sample = generate_normalized(class_id, config, sm, h, w)?;
        samples.push(sample);
    }
    Ok(DomainDataset {
        samples,
        labeled: true,
        seed,
        k,
        config: config.clone(),
    })
}

/// The four datasets of one adaptation experiment. T_train labels are
/// stripped; the underlying classes remain recoverable from the seed for
/// diagnostics.
pub struct DomainPair {
    pub s_train: DomainDataset,
    pub t_train: DomainDataset,
    pub s_test: DomainDataset,
    pub t_test: DomainDataset,
}

#[allow(clippy::too_many_arguments)]
pub fn make_domain_pair(
    cfg_s: &RadarConfigSpec,
    cfg_t: &RadarConfigSpec,
    n_train: usize,
    n_test: usize,
    k: usize,
    seed: u64,
    h: usize,
    w: usize,
) -> Result<DomainPair> {
    if !(2..=CLASS_COUNT).contains(&k) {
        return Err(MddError::contract(format!("k must be in 2..={CLASS_COUNT}")));
    }
    if n_train < k || n_test < k {
        return Err(MddError::contract(format!(
            "need at least k={k} samples per split (got n_train={n_train}, n_test={n_test})"
        )));
    }
    let s_train = build_dataset(cfg_s, n_train, k, seed, 1_000_000, h, w)?;
    let s_test = build_dataset(cfg_s, n_test, k, seed, 2_000_000, h, w)?;
    let mut t_train = build_dataset(cfg_t, n_train, k, seed, 3_000_000, h, w)?;
    let t_test = build_dataset(cfg_t, n_test, k, seed, 4_000_000, h, w)?;
    t_train.strip_labels();
    Ok(DomainPair {
        s_train,
        t_train,
        s_test,
        t_test,
    })
}

/// Recover the stripped labels of a pair's T_train (same class schedule as
/// the labeled splits).
pub fn recover_train_labels(ds: &DomainDataset) -> Vec<usize> {
    (0..ds.len()).map(|i| i % ds.k + 1).collect()
}

const DATASET_MAGIC: &[u8; 8] = b"MDDRAD01";

/// Binary dataset file: magic, little-endian header (k, H, W, count,
/// labeled flag, config-name length + bytes, seed), then per sample the
/// label as signed 32-bit (-1 if unlabeled), x_r then x_d as LE f32.
pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    let (h, w) = ds
        .samples
        .first()
        .map(|s| (s.h, s.w))
        .unwrap_or((0, 0));
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(ds.k as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    buf.push(ds.labeled as u8);
    let name = ds.config.name.as_bytes();
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    buf.extend_from_slice(&ds.seed.to_le_bytes());
    for s in &ds.samples {
        let label: i32 = s.label.map(|l| l as i32).unwrap_or(-1);
        buf.extend_from_slice(&label.to_le_bytes());
        for v in s.x_r.iter().chain(&s.x_d) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(MddError::Format("dataset file truncated".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != DATASET_MAGIC {
        return Err(MddError::Format("dataset magic mismatch".into()));
    }
    let u32at = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let k = u32at(&mut pos)? as usize;
    let h = u32at(&mut pos)? as usize;
    let w = u32at(&mut pos)? as usize;
    let count = u32at(&mut pos)? as usize;
    let labeled = take(&mut pos, 1)?[0] != 0;
    let name_len = u32at(&mut pos)? as usize;
    let name = std::str::from_utf8(take(&mut pos, name_len)?)
        .map_err(|_| MddError::Format("dataset config name not utf-8".into()))?
        .to_string();
    let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let label_raw = i32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let label = if label_raw < 0 {
            None
        } else {
            Some(label_raw as usize)
        };
        let read_map = |pos: &mut usize| -> Result<Vec<f64>> {
            let bytes = take(pos, h * w * 4)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect())
        };
        let x_r = read_map(&mut pos)?;
        let x_d = read_map(&mut pos)?;
        samples.push(SpectrogramSample {
            x_r,
            x_d,
            h,
            w,
            label,
            config_name: name.clone(),
        });
    }
    if pos != buf.len() {
        return Err(MddError::Format("dataset file has trailing bytes".into()));
    }
    let config = preset(&name).unwrap_or_else(|| RadarConfigSpec {
        name: name.clone(),
        chirps_per_frame: 0,
        samples_per_chirp: 0,
        bandwidth_ghz: 0.0,
        frame_period_ms: 0.0,
        range_resolution_cm: 0.0,
        max_range_m: 0.0,
        max_speed_mps: 0.0,
        speed_resolution_mps: 0.0,
        noise_sigma: 0.0,
    });
    Ok(DomainDataset {
        samples,
        labeled,
        seed,
        k,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_exist_and_validate() {
        for name in ["I", "II", "III", "IV"] {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(preset("V").is_none());
    }

    #[test]
    fn standing_energy_sits_at_zero_doppler() {
        let cfg = preset("I").unwrap();
        for seed in 0..5 {
            let s = generate_normalized(1, &cfg, 1000 + seed, 16, 32).unwrap();
            // row energy argmax of x_d should be adjacent to the zero-Doppler rows
            let mut best_row = 0;
            let mut best = f64::NEG_INFINITY;
            for i in 0..16 {
                let e: f64 = s.x_d[i * 32..(i + 1) * 32].iter().sum();
                if e > best {
                    best = e;
                    best_row = i;
                }
            }
            // zero Doppler lies between rows 7 and 8 of 16
            assert!((7..=8).contains(&best_row), "row {best_row}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = preset("III").unwrap();
        cfg.noise_sigma = 0.0;
        let a = generate_sample(4, &cfg, 7).unwrap();
        let b = generate_sample(4, &cfg, 7).unwrap();
        assert_eq!(a.x_r, b.x_r);
        assert_eq!(a.x_d, b.x_d);
        // and with noise on, the stream is still deterministic
        let cfg = preset("III").unwrap();
        let a = generate_normalized(4, &cfg, 7, 16, 32).unwrap();
        let b = generate_normalized(4, &cfg, 7, 16, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frame_period_changes_native_time_bins() {
        let a = generate_sample(2, &preset("I").unwrap(), 3).unwrap();
        let b = generate_sample(2, &preset("IV").unwrap(), 3).unwrap();
        assert_ne!(a.n_frames, b.n_frames); // 50 ms vs 32 ms frames
    }

    #[test]
    fn normalize_output_in_unit_range() {
        let cfg = preset("II").unwrap();
        let s = generate_normalized(3, &cfg, 11, 16, 32).unwrap();
        assert!(s.x_r.iter().chain(&s.x_d).all(|v| (0.0..=1.0).contains(v)));
        assert!(s.x_r.contains(&1.0));
    }

    #[test]
    fn normalize_constant_map_goes_to_zero() {
        let native = NativeMaps {
            x_r: vec![3.5; 64 * 63],
            n_range: 64,
            x_d: vec![0.0; 67 * 63],
            n_doppler: 67,
            n_frames: 63,
            frame_period_s: 0.032,
            range_res_m: 0.075,
            speed_res: 0.15,
            max_speed: 5.0,
        };
        let cfg = preset("III").unwrap();
        let s = normalize(&native, &cfg, 16, 32).unwrap();
        assert!(s.x_r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalize_rejects_uncovered_crop() {
        let native = NativeMaps {
            x_r: vec![0.0; 10 * 10],
            n_range: 10,
            x_d: vec![0.0; 10 * 10],
            n_doppler: 10,
            n_frames: 10,
            frame_period_s: 0.032, // only 0.32 s of native time
            range_res_m: 0.075,
            speed_res: 0.15,
            max_speed: 5.0,
        };
        let cfg = preset("III").unwrap();
        assert!(matches!(
            normalize(&native, &cfg, 16, 32),
            Err(MddError::Coverage(_))
        ));
    }

    #[test]
    fn downsampled_rendering_tracks_direct_rendering() {
        // Render at 2x the target resolution and downsample; compare against
        // rendering straight to the target size. Noise off for the oracle.
        let mut cfg = preset("IV").unwrap();
        cfg.noise_sigma = 0.0;
        let native = generate_sample(3, &cfg, 21).unwrap();
        let coarse = normalize(&native, &cfg, 16, 32).unwrap();
        let fine = normalize(&native, &cfg, 32, 64).unwrap();
        // box-downsample fine to coarse
        let mut mad = 0.0;
        for i in 0..16 {
            for j in 0..32 {
                let avg = (fine.x_r[(2 * i) * 64 + 2 * j]
                    + fine.x_r[(2 * i) * 64 + 2 * j + 1]
                    + fine.x_r[(2 * i + 1) * 64 + 2 * j]
                    + fine.x_r[(2 * i + 1) * 64 + 2 * j + 1])
                    / 4.0;
                mad += (avg - coarse.x_r[i * 32 + j]).abs();
            }
        }
        mad /= (16 * 32) as f64;
        assert!(mad < 0.1, "mean absolute difference {mad}");
    }

    #[test]
    fn domain_pair_shapes_and_stripping() {
        let cfg_s = preset("I").unwrap();
        let cfg_t = preset("III").unwrap();
        let pair = make_domain_pair(&cfg_s, &cfg_t, 20, 10, 5, 9, 16, 32).unwrap();
        assert_eq!(pair.s_train.len(), 20);
        assert!(pair.s_train.labeled);
        assert!(!pair.t_train.labeled);
        assert!(pair.t_train.samples.iter().all(|s| s.label.is_none()));
        assert_eq!(recover_train_labels(&pair.t_train)[..5], [1, 2, 3, 4, 5]);
        // balanced classes
        for c in 1..=5 {
            let n = pair
                .s_train
                .samples
                .iter()
                .filter(|s| s.label == Some(c))
                .count();
            assert_eq!(n, 4);
        }
        assert!(make_domain_pair(&cfg_s, &cfg_t, 3, 10, 5, 9, 16, 32).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = preset("II").unwrap();
        let pair = make_domain_pair(&cfg, &cfg, 6, 5, 3, 4, 16, 32).unwrap();
        for (ds, name) in [(&pair.s_train, "s.bin"), (&pair.t_train, "t.bin")] {
            let path = dir.path().join(name);
            save_dataset(ds, &path).unwrap();
            let loaded = load_dataset(&path).unwrap();
            assert_eq!(loaded.labeled, ds.labeled);
            assert_eq!(loaded.k, ds.k);
            assert_eq!(loaded.seed, ds.seed);
            assert_eq!(loaded.samples.len(), ds.samples.len());
            for (a, b) in loaded.samples.iter().zip(&ds.samples) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn truncated_dataset_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = preset("I").unwrap();
        let pair = make_domain_pair(&cfg, &cfg, 3, 3, 3, 4, 16, 32).unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&pair.s_test, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(&path), Err(MddError::Format(_))));
    }
}
