//! Synthetic transmitter fingerprints and the dataset container.
//!
//! Each device adds a fixed pseudo-noise component to whatever it sends.
//! The receiver subtracts the spectrum of the decoded message from the
//! spectrum of the received burst; what remains is the device signature
//! plus channel noise, independent of the message. A sample stacks three
//! 32×32 planes: residual magnitude per frequency bin, residual phase per
//! bin, and the magnitude of the received baseband burst.
//!
//! # Container format
//!
//! All integers are little-endian `u32`, all values little-endian `f32`:
//!
//! ```text
//! "CSIL"            magic (4 bytes)
//! version           = 1
//! device_count
//! sample_count      total samples
//! train_count       the first train_count samples form the training split
//! ndims, dims[ndims]
//! values            sample_count × Π dims, sample-major, channel-major
//! labels            sample_count device ids
//! ```

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Samples per burst; also the number of frequency bins.
pub const BURST_LEN: usize = 1024;
/// `[channels, height, width]` of a synthesized sample.
pub const SAMPLE_DIMS: [usize; 3] = [3, 32, 32];
/// Fraction of each device's samples placed in the training split.
pub const TRAIN_FRACTION: f64 = 0.6;
/// Largest per-bin signature offset, relative to the carrier amplitude.
pub const MAX_SIGNATURE_OFFSET: f64 = 0.1;

const MAGIC: &[u8; 4] = b"CSIL";
const VERSION: u32 = 1;
const SAMPLES_PER_BIT: usize = 8;

/// Fixed transmitter imperfection of one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: u32,
    pub seed: u64,
    /// Per-bin gain offset, at most 0.1 of the carrier amplitude.
    pub gain: Vec<f64>,
    /// Per-bin phase offset in radians.
    pub phase: Vec<f64>,
    /// Standard deviation of the per-burst multiplicative jitter.
    pub drift: f64,
}

impl DeviceProfile {
    /// Signature spectrum `gain · e^{i·phase}`.
    pub fn signature(&self) -> Vec<Complex64> {
        self.gain
            .iter()
            .zip(&self.phase)
            .map(|(&g, &p)| Complex64::from_polar(g, p))
            .collect()
    }

    pub fn with_drift(mut self, drift: f64) -> Self {
        self.drift = drift;
        self
    }
}

fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| (0..window).map(|k| values[(i + k) % n]).sum::<f64>() / window as f64)
        .collect()
}

/// Deterministic profile for `seed`.
///
/// Gains are smoothed uniform noise mapped into `[0.4, 1.0] × 0.1`, so every
/// bin carries a visible offset; phases follow a wrapped random walk.
pub fn make_profile(id: u32, seed: u64) -> DeviceProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..BURST_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = smooth(&raw, 4);
    let (lo, hi) = g
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let gain = g
        .iter()
        .map(|v| MAX_SIGNATURE_OFFSET * (0.4 + 0.6 * (v - lo) / (hi - lo)))
        .collect();
    let mut theta: f64 = rng.gen_range(-PI..PI);
    let phase = (0..BURST_LEN)
        .map(|_| {
            theta += 0.4 * rng.sample::<f64, _>(StandardNormal);
            (theta + PI).rem_euclid(2.0 * PI) - PI
        })
        .collect();
    DeviceProfile {
        id,
        seed,
        gain,
        phase,
        drift: 0.02,
    }
}

/// One rendered sample: three channel-major 32×32 planes.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTensor {
    pub label: u32,
    pub data: Vec<f32>,
}

/// Intermediate products of one synthesized burst, in f64.
#[derive(Clone, Debug)]
pub struct Burst {
    pub message: Vec<Complex64>,
    pub received: Vec<Complex64>,
    /// `FFT[received] − FFT[message]`.
    pub residual: Vec<Complex64>,
}

fn message_bits(rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    // pulse-position modulation: a one occupies the first half of its bit slot
    let carrier = Complex64::from_polar(1.0, rng.gen_range(-PI..PI));
    let mut out = Vec::with_capacity(BURST_LEN);
    for _ in 0..BURST_LEN / SAMPLES_PER_BIT {
        let one: bool = rng.gen();
        for k in 0..SAMPLES_PER_BIT {
            let high = (k < SAMPLES_PER_BIT / 2) == one;
            out.push(if high { carrier } else { Complex64::new(0.0, 0.0) });
        }
    }
    out
}

fn burst_seed(profile_seed: u64, message_seed: u64) -> u64 {
    profile_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        ^ message_seed.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Renders one burst from `profile`. `snr_db = +∞` disables channel noise.
pub fn synthesize_burst(profile: &DeviceProfile, snr_db: f64, message_seed: u64) -> Result<Burst> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(invalid(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(burst_seed(profile.seed, message_seed));
    let message = message_bits(&mut rng);
    let jitter = 1.0 + profile.drift * rng.sample::<f64, _>(StandardNormal);
    let n = BURST_LEN;
    let scale = 1.0 / (n as f64).sqrt();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    // pseudo-noise component in the time domain
    let mut pn: Vec<Complex64> = profile.signature().iter().map(|s| s * jitter).collect();
    inv.process(&mut pn);
    for v in &mut pn {
        *v *= scale;
    }
    let power = message.iter().map(|m| m.norm_sqr()).sum::<f64>() / n as f64;
    let sigma = if snr_db.is_infinite() {
        0.0
    } else {
        (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt()
    };
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let received: Vec<Complex64> = message
        .iter()
        .zip(&pn)
        .map(|(m, d)| {
            let w = if sigma > 0.0 {
                Complex64::new(noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                Complex64::new(0.0, 0.0)
            };
            m + d + w
        })
        .collect();

    let mut spec_rx = received.clone();
    fwd.process(&mut spec_rx);
    let mut spec_msg = message.clone();
    fwd.process(&mut spec_msg);
    let residual = spec_rx
        .iter()
        .zip(&spec_msg)
        .map(|(r, m)| (r - m) * scale)
        .collect();
    Ok(Burst {
        message,
        received,
        residual,
    })
}

/// Raw (unstandardized) channel planes of one burst, channel-major.
pub fn burst_channels(burst: &Burst) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * BURST_LEN);
    out.extend(burst.residual.iter().map(|r| r.norm()));
    out.extend(burst.residual.iter().map(|r| r.arg()));
    out.extend(burst.received.iter().map(|r| r.norm()));
    out
}

/// Synthesizes one unstandardized sample.
pub fn synthesize_sample(profile: &DeviceProfile, snr_db: f64, message_seed: u64) -> Result<SampleTensor> {
    let b = synthesize_burst(profile, snr_db, message_seed)?;
    Ok(SampleTensor {
        label: profile.id,
        data: burst_channels(&b).into_iter().map(|v| v as f32).collect(),
    })
}

/// Labelled samples split into training and validation parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Vec<usize>,
    pub device_count: usize,
    pub train: Vec<SampleTensor>,
    pub val: Vec<SampleTensor>,
}

impl Dataset {
    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Sample counts per device: `(train, val)`.
    pub fn counts(&self) -> Vec<(usize, usize)> {
        let mut c = vec![(0, 0); self.device_count];
        for s in &self.train {
            c[s.label as usize].0 += 1;
        }
        for s in &self.val {
            c[s.label as usize].1 += 1;
        }
        c
    }

    pub fn train_of(&self, device: u32) -> impl Iterator<Item = &SampleTensor> {
        self.train.iter().filter(move |s| s.label == device)
    }

    pub fn val_of(&self, device: u32) -> impl Iterator<Item = &SampleTensor> {
        self.val.iter().filter(move |s| s.label == device)
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ a.wrapping_mul(0xA24B_AED4_963E_E407));
    rng.gen::<u64>() ^ b.wrapping_mul(0x9FB2_1C65_1E98_DF25)
}

/// Generates `n_devices × samples_per_device` samples with a stratified
/// 60/40 split and per-channel standardization fitted on the training split.
pub fn make_dataset(n_devices: usize, samples_per_device: usize, snr_db: f64, seed: u64) -> Result<Dataset> {
    if n_devices == 0 || samples_per_device < 2 {
        return Err(invalid("need at least one device and two samples per device"));
    }
    let n_train = ((samples_per_device as f64) * TRAIN_FRACTION).round() as usize;
    let n_train = n_train.clamp(1, samples_per_device - 1);
    let per_device: Vec<Vec<Vec<f64>>> = (0..n_devices)
        .into_par_iter()
        .map(|d| {
            let profile = make_profile(d as u32, mix(seed, d as u64, 0));
            (0..samples_per_device)
                .map(|s| {
                    synthesize_burst(&profile, snr_db, mix(seed, d as u64, s as u64 + 1))
                        .map(|b| burst_channels(&b))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    // per-channel mean and standard deviation over the training split
    let plane = BURST_LEN;
    let mut mean = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let count = (n_devices * n_train * plane) as f64;
    for dev in &per_device {
        for s in &dev[..n_train] {
            for c in 0..3 {
                for &v in &s[c * plane..(c + 1) * plane] {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
    }
    let mut std = [1.0f64; 3];
    for c in 0..3 {
        mean[c] /= count;
        let var = sq[c] / count - mean[c] * mean[c];
        std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let render = |label: usize, s: &[f64]| SampleTensor {
        label: label as u32,
        data: s
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                ((v - mean[c]) / std[c]) as f32
            })
            .collect(),
    };
    let mut train = Vec::with_capacity(n_devices * n_train);
    let mut val = Vec::with_capacity(n_devices * (samples_per_device - n_train));
    for (d, dev) in per_device.iter().enumerate() {
        train.extend(dev[..n_train].iter().map(|s| render(d, s)));
        val.extend(dev[n_train..].iter().map(|s| render(d, s)));
    }
    Ok(Dataset {
        dims: SAMPLE_DIMS.to_vec(),
        device_count: n_devices,
        train,
        val,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| invalid(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a dataset into the container format.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let per = ds.sample_len();
    let n = ds.train.len() + ds.val.len();
    let mut buf = Vec::with_capacity(28 + 4 * n * (per + 1));
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize)?;
    put_u32(&mut buf, ds.device_count)?;
    put_u32(&mut buf, n)?;
    put_u32(&mut buf, ds.train.len())?;
    put_u32(&mut buf, ds.dims.len())?;
    for &d in &ds.dims {
        put_u32(&mut buf, d)?;
    }
    for s in ds.train.iter().chain(&ds.val) {
        if s.data.len() != per {
            return Err(invalid(format!("sample has {} values, dims need {per}", s.data.len())));
        }
        for v in &s.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in ds.train.iter().chain(&ds.val) {
        buf.extend_from_slice(&s.label.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let buf: &'a [u8] = self.buf;
        let s = &buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses the container format. Either the whole dataset is returned or an
/// error; nothing partial.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected \"CSIL\"".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let device_count = r.u32()? as usize;
    let n = r.u32()? as usize;
    let n_train = r.u32()? as usize;
    let ndims = r.u32()? as usize;
    if n_train > n || ndims == 0 || ndims > 8 {
        return Err(Error::Format(format!("inconsistent header: {n_train} train of {n}, {ndims} dims")));
    }
    let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let per = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&p| p > 0)
        .ok_or_else(|| Error::Format(format!("bad dims {dims:?}")))?;
    let values_len = n
        .checked_mul(per)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("sample block too large".into()))?;
    let values = r.take(values_len)?;
    let labels = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("label block too large".into()))?)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = u32::from_le_bytes(labels[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        if label as usize >= device_count {
            return Err(Error::Format(format!("label {label} ≥ device count {device_count}")));
        }
        let data = values[4 * i * per..4 * (i + 1) * per]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        samples.push(SampleTensor { label, data });
    }
    let val = samples.split_off(n_train);
    Ok(Dataset {
        dims,
        device_count,
        train: samples,
        val,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// Writes `device_id,train_samples,val_samples` rows.
pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["device_id", "train_samples", "val_samples"])?;
    for (d, (tr, va)) in ds.counts().into_iter().enumerate() {
        w.write_record([d.to_string(), tr.to_string(), va.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    /// Residual magnitude and phase planes.
    fn residual_planes(p: &DeviceProfile, snr: f64, msg: u64) -> Vec<f64> {
        let mut v = burst_channels(&synthesize_burst(p, snr, msg).unwrap());
        v.truncate(2 * BURST_LEN);
        v
    }

    #[test]
    fn profiles_are_deterministic_and_bounded() {
        assert_eq!(make_profile(0, 42), make_profile(0, 42));
        let p = make_profile(3, 7);
        assert!(p.gain.iter().all(|g| g.abs() <= MAX_SIGNATURE_OFFSET + 1e-15));
        assert_eq!(p.gain.len(), BURST_LEN);
    }

    #[test]
    fn distinct_seeds_are_weakly_correlated() {
        let profiles: Vec<_> = (0..46).map(|s| make_profile(s, 1000 + s as u64)).collect();
        let mut pairs = 0;
        let mut worst = 0.0f64;
        'outer: for i in 0..profiles.len() {
            for j in i + 1..profiles.len() {
                worst = worst.max(corr(&profiles[i].gain, &profiles[j].gain).abs());
                pairs += 1;
                if pairs == 1000 {
                    break 'outer;
                }
            }
        }
        assert_eq!(pairs, 1000);
        assert!(worst < 0.5, "max |corr| {worst}");
    }

    #[test]
    fn noise_free_residual_is_the_signature() {
        let p = make_profile(0, 5).with_drift(0.0);
        let b = synthesize_burst(&p, f64::INFINITY, 9).unwrap();
        for (r, s) in b.residual.iter().zip(p.signature()) {
            assert!((r - s).norm() < 1e-12);
        }
        let planes = residual_planes(&p, f64::INFINITY, 9);
        for k in 0..BURST_LEN {
            assert!((planes[k] - p.gain[k].abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_ignores_message_at_high_snr() {
        let p = make_profile(0, 11);
        let a = residual_planes(&p, 40.0, 1);
        let b = residual_planes(&p, 40.0, 2);
        let c = corr(&a, &b);
        assert!(c > 0.9, "corr {c}");
        let ma = synthesize_burst(&p, 40.0, 1).unwrap().message;
        let mb = synthesize_burst(&p, 40.0, 2).unwrap().message;
        assert_ne!(ma, mb);
    }

    #[test]
    fn low_snr_still_separates_devices() {
        let p = make_profile(0, 21);
        let q = make_profile(1, 22);
        let mut within = 0.0;
        let mut cross = 0.0;
        for m in 0..20u64 {
            let a = residual_planes(&p, 0.0, 2 * m);
            let b = residual_planes(&p, 0.0, 2 * m + 1);
            let c = residual_planes(&q, 0.0, 2 * m + 1);
            within += corr(&a, &b);
            cross += corr(&a, &c);
        }
        let high = corr(&residual_planes(&p, 40.0, 0), &residual_planes(&p, 40.0, 1));
        assert!(within / 20.0 < high);
        assert!(within > cross, "within {within} cross {cross}");
    }

    #[test]
    fn residual_average_converges_to_signature() {
        let p = make_profile(0, 31);
        let snr = 10.0;
        let n = 1000;
        let mut acc = vec![Complex64::new(0.0, 0.0); BURST_LEN];
        for m in 0..n {
            let b = synthesize_burst(&p, snr, m).unwrap();
            for (a, r) in acc.iter_mut().zip(&b.residual) {
                *a += r;
            }
        }
        // per-bin noise std is sqrt(P/snr) with P ≈ 0.5
        let noise = (0.5 / 10f64.powf(snr / 10.0)).sqrt();
        let tol = 5.0 * noise / (n as f64).sqrt() + 5.0 * p.drift * MAX_SIGNATURE_OFFSET / (n as f64).sqrt();
        let sig = p.signature();
        let worst = acc
            .iter()
            .zip(&sig)
            .map(|(a, s)| (a / n as f64 - s).norm())
            .fold(0.0, f64::max);
        assert!(worst < tol, "worst {worst} tol {tol}");
    }

    #[test]
    fn dataset_split_and_balance() {
        let ds = make_dataset(10, 100, 20.0, 1).unwrap();
        assert_eq!(ds.train.len(), 600);
        assert_eq!(ds.val.len(), 400);
        for (tr, va) in ds.counts() {
            assert_eq!((tr, va), (60, 40));
        }
        assert_eq!(ds, make_dataset(10, 100, 20.0, 1).unwrap());
        assert!(ds.train.iter().all(|s| s.data.iter().all(|v| v.is_finite())));
        // standardized over the training split
        for c in 0..3 {
            let vals: Vec<f64> = ds
                .train
                .iter()
                .flat_map(|s| s.data[c * BURST_LEN..(c + 1) * BURST_LEN].iter().map(|&v| v as f64))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-3 && (v - 1.0).abs() < 1e-3, "channel {c}: {m} {v}");
        }
    }

    #[test]
    fn nearest_centroid_learns_devices() {
        let ds = make_dataset(10, 100, 20.0, 3).unwrap();
        let per = ds.sample_len();
        let mut cent = vec![vec![0.0f64; per]; 10];
        let mut cnt = [0usize; 10];
        for s in &ds.train {
            cnt[s.label as usize] += 1;
            for (c, &v) in cent[s.label as usize].iter_mut().zip(&s.data) {
                *c += v as f64;
            }
        }
        for (c, n) in cent.iter_mut().zip(cnt) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let correct = ds
            .val
            .iter()
            .filter(|s| {
                let best = (0..10)
                    .min_by(|&a, &b| {
                        let da: f64 = cent[a].iter().zip(&s.data).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                        let db: f64 = cent[b].iter().zip(&s.data).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == s.label as usize
            })
            .count();
        let acc = correct as f64 / ds.val.len() as f64;
        assert!(acc > 0.8, "centroid accuracy {acc}");
    }

    #[test]
    fn container_round_trip_and_truncation() {
        let ds = make_dataset(3, 5, 20.0, 2).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
        for cut in [0, 3, 10, 27, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_dataset(&extra).is_err());
    }

    #[test]
    fn reads_hand_built_file() {
        // two 1×2 samples from two devices, first one in the training split
        let mut b = Vec::new();
        b.extend_from_slice(b"CSIL");
        for v in [1u32, 2, 2, 1, 2, 1, 2] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in [0.5f32, -1.0, 2.0, 3.25] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for l in [1u32, 0] {
            b.extend_from_slice(&l.to_le_bytes());
        }
        let ds = decode_dataset(&b).unwrap();
        assert_eq!(ds.dims, vec![1, 2]);
        assert_eq!(ds.train, vec![SampleTensor { label: 1, data: vec![0.5, -1.0] }]);
        assert_eq!(ds.val, vec![SampleTensor { label: 0, data: vec![2.0, 3.25] }]);
    }
}
