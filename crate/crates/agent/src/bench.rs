//! Key-derivation benchmark: how long the joint derivation takes for encrypt
//! and decrypt, how much of that is computation, and whether it depends on
//! the file size (it should not; the file never enters the derivation).

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, Distribution, OrderStatistics};

use twofe_protocol::approval::{ApprovalPolicy, Mode};
use twofe_protocol::cloud::{Cloud, CloudConfig};
use twofe_protocol::device::Device;
use twofe_protocol::sim::{Deployment, TcpDeployment};
use twofe_protocol::{Error, Result};

pub const KB: usize = 1000;
pub const MB: usize = 1000 * KB;
pub const DEFAULT_SIZES: &[usize] = &[100 * KB, MB, 5 * MB, 10 * MB];

/// Confidence level for the size-dependence test.
pub const CONFIDENCE: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    InProcess,
    Loopback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Op {
    Encrypt,
    Decrypt,
}

#[derive(Clone, Debug, Serialize)]
pub struct Sample {
    pub transport: Transport,
    pub op: Op,
    pub size: usize,
    /// Wall time of the derivation as seen by the primary.
    pub total_ms: f64,
    /// Time both devices spent computing during the derivation.
    pub compute_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub transport: Transport,
    pub op: Op,
    pub size: usize,
    pub n: usize,
    pub median_total_ms: f64,
    pub sd_total_ms: f64,
    pub median_compute_ms: f64,
    pub sd_compute_ms: f64,
}

/// Least-squares fit of derivation time against file size in MB.
#[derive(Clone, Debug, Serialize)]
pub struct Slope {
    pub transport: Transport,
    pub op: Op,
    pub ms_per_mb: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
}

impl Slope {
    pub fn contains_zero(&self) -> bool {
        self.ci_low <= 0.0 && 0.0 <= self.ci_high
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub samples: Vec<Sample>,
    pub summaries: Vec<Summary>,
    pub slopes: Vec<Slope>,
    /// Messages exchanged between primary and secondary per derivation.
    pub encrypt_messages: Vec<String>,
    pub decrypt_messages: Vec<String>,
    pub median_compute_ms: f64,
    /// Share of derivation wall time spent computing, per transport and op.
    pub compute_fraction: Vec<(Transport, Op, f64)>,
}

struct Rig {
    transport: Transport,
    cloud: Arc<Cloud>,
    primary: Arc<Device>,
    secondary: Arc<Device>,
}

fn config() -> CloudConfig {
    // Deleted benchmark files are purged at once to bound memory.
    CloudConfig {
        trash_window: Duration::ZERO,
        ..CloudConfig::fast()
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl Rig {
    fn sample(&self, op: Op, size: usize, f: impl FnOnce() -> Result<()>) -> Result<Sample> {
        let before = self.primary.compute_time() + self.secondary.compute_time();
        f()?;
        let after = self.primary.compute_time() + self.secondary.compute_time();
        let t = self
            .primary
            .last_derivation()
            .ok_or_else(|| Error::Internal("no derivation recorded".into()))?;
        Ok(Sample {
            transport: self.transport,
            op,
            size,
            total_ms: ms(t.total),
            compute_ms: ms(after - before).min(ms(t.total)),
        })
    }

    /// Encrypts every payload in one shuffled order, then decrypts them in
    /// another. Each derivation then follows a transfer whose size is
    /// unrelated to its own, so leftover effects of moving large buffers
    /// (caches, allocator) do not line up with size.
    fn repetition(&self, payloads: &[Vec<u8>], rng: &mut ChaCha20Rng, out: &mut Vec<Sample>) -> Result<()> {
        let mut order: Vec<usize> = (0..payloads.len()).collect();
        order.shuffle(rng);
        let mut tags = vec![None; payloads.len()];
        for &i in &order {
            let data = &payloads[i];
            out.push(self.sample(Op::Encrypt, data.len(), || {
                tags[i] = Some(self.primary.encrypt(&format!("bench-{i}"), data)?);
                Ok(())
            })?);
        }
        order.shuffle(rng);
        for &i in &order {
            let data = &payloads[i];
            let hex = tags[i].expect("encrypted above").to_hex();
            out.push(self.sample(Op::Decrypt, data.len(), || {
                let plain = self.primary.decrypt(&hex)?;
                if plain[..] != data[..] {
                    return Err(Error::Internal("benchmark round trip lost data".into()));
                }
                Ok(())
            })?);
        }
        for i in 0..payloads.len() {
            self.primary.delete(&format!("bench-{i}"))?;
        }
        self.cloud.purge_expired()?;
        Ok(())
    }
}

/// Runs `reps` encryptions and decryptions per size on each transport, sizes
/// interleaved in random order.
pub fn run_bench(sizes: &[usize], reps: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let payloads: Vec<Vec<u8>> = sizes
        .iter()
        .map(|&n| {
            let mut v = vec![0u8; n];
            rng.fill_bytes(&mut v);
            v
        })
        .collect();

    let sim = Deployment::enrolled_with(ApprovalPolicy::new(Mode::Auto), config())?;
    let (encrypt_messages, decrypt_messages) = message_counts(&sim)?;
    sim.net.log().set_enabled(false);
    let tcp = TcpDeployment::enrolled_with(ApprovalPolicy::new(Mode::Auto), config())?;
    let rigs = [
        Rig {
            transport: Transport::InProcess,
            cloud: sim.cloud.clone(),
            primary: sim.primary.clone(),
            secondary: sim.secondary.clone(),
        },
        Rig {
            transport: Transport::Loopback,
            cloud: tcp.cloud.clone(),
            primary: tcp.primary.clone(),
            secondary: tcp.secondary.clone(),
        },
    ];

    let mut samples = Vec::new();
    for rig in &rigs {
        // Warm-up: connections, allocator, caches.
        rig.repetition(&payloads, &mut rng, &mut Vec::new())?;
        for _ in 0..reps {
            rig.repetition(&payloads, &mut rng, &mut samples)?;
        }
    }

    let mut summaries = Vec::new();
    let mut slopes = Vec::new();
    let mut compute_fraction = Vec::new();
    for transport in [Transport::InProcess, Transport::Loopback] {
        for op in [Op::Encrypt, Op::Decrypt] {
            let group: Vec<&Sample> = samples.iter().filter(|s| s.transport == transport && s.op == op).collect();
            for &size in sizes {
                let at: Vec<&Sample> = group.iter().copied().filter(|s| s.size == size).collect();
                let total: Vec<f64> = at.iter().map(|s| s.total_ms).collect();
                let compute: Vec<f64> = at.iter().map(|s| s.compute_ms).collect();
                summaries.push(Summary {
                    transport,
                    op,
                    size,
                    n: at.len(),
                    median_total_ms: median(&total),
                    sd_total_ms: sd(&total),
                    median_compute_ms: median(&compute),
                    sd_compute_ms: sd(&compute),
                });
            }
            let xs: Vec<f64> = group.iter().map(|s| s.size as f64 / MB as f64).collect();
            let ys: Vec<f64> = group.iter().map(|s| s.total_ms).collect();
            if let Some((b, lo, hi)) = ols_slope(&xs, &ys, CONFIDENCE) {
                slopes.push(Slope {
                    transport,
                    op,
                    ms_per_mb: b,
                    ci_low: lo,
                    ci_high: hi,
                    confidence: CONFIDENCE,
                });
            }
            let total: f64 = group.iter().map(|s| s.total_ms).sum();
            let compute: f64 = group.iter().map(|s| s.compute_ms).sum();
            compute_fraction.push((transport, op, if total > 0.0 { compute / total } else { 0.0 }));
        }
    }
    let all_compute: Vec<f64> = samples.iter().map(|s| s.compute_ms).collect();
    Ok(BenchReport {
        sizes: sizes.to_vec(),
        reps,
        median_compute_ms: median(&all_compute),
        samples,
        summaries,
        slopes,
        encrypt_messages,
        decrypt_messages,
        compute_fraction,
    })
}

/// Message types exchanged between the two devices during one encryption
/// and one decryption, read off the in-process wire log.
fn message_counts(d: &Deployment) -> Result<(Vec<String>, Vec<String>)> {
    let one = |f: &dyn Fn() -> Result<()>| -> Result<Vec<String>> {
        d.net.log().clear();
        f()?;
        let records = d.net.log().records();
        let first = records
            .iter()
            .find(|r| r.from == "primary" && r.to == "secondary")
            .ok_or_else(|| Error::Internal("no device-to-device traffic".into()))?;
        let session = first.request_frame().session;
        Ok(d
            .net
            .log()
            .session_messages(&session, "primary", "secondary")
            .into_iter()
            .map(|k| k.name().to_owned())
            .collect())
    };
    let tag = std::cell::Cell::new(None);
    let enc = one(&|| {
        tag.set(Some(d.primary.encrypt("count", b"message count probe")?));
        Ok(())
    })?;
    let hex = tag.get().expect("set by encrypt").to_hex();
    let dec = one(&|| d.primary.decrypt(&hex).map(drop))?;
    d.primary.delete("count")?;
    d.cloud.purge_expired()?;
    Ok((enc, dec))
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut d = Data::new(v.to_vec());
    d.median()
}

pub fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    Data::new(v.to_vec()).std_dev().unwrap_or(0.0)
}

/// Ordinary least squares slope of `ys` on `xs` with a two-sided confidence
/// interval from the t distribution on `n - 2` degrees of freedom.
pub fn ols_slope(xs: &[f64], ys: &[f64], confidence: f64) -> Option<(f64, f64, f64)> {
    let n = xs.len();
    if n < 3 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let se = (sse / (n - 2) as f64 / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 2) as f64)
        .ok()?
        .inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    Some((b, b - t * se, b + t * se))
}

impl BenchReport {
    /// One JSON object per line: samples, then summaries, slopes and totals.
    pub fn json_lines(&self) -> String {
        let mut out = String::new();
        let mut line = |kind: &str, v: serde_json::Value| {
            let mut v = v;
            v["record"] = kind.into();
            out.push_str(&v.to_string());
            out.push('\n');
        };
        for s in &self.samples {
            line("sample", serde_json::to_value(s).unwrap());
        }
        for s in &self.summaries {
            line("summary", serde_json::to_value(s).unwrap());
        }
        for s in &self.slopes {
            let mut v = serde_json::to_value(s).unwrap();
            v["contains_zero"] = s.contains_zero().into();
            line("slope", v);
        }
        line(
            "messages",
            serde_json::json!({
                "encrypt": self.encrypt_messages,
                "decrypt": self.decrypt_messages,
            }),
        );
        for (t, o, f) in &self.compute_fraction {
            line("compute-fraction", serde_json::json!({"transport": t, "op": o, "fraction": f}));
        }
        line("compute", serde_json::json!({"median_compute_ms": self.median_compute_ms}));
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<11} {:<8} {:>10} {:>4} {:>12} {:>9} {:>12} {:>9}",
            "transport", "op", "size", "n", "median ms", "sd", "compute ms", "sd"
        );
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<11} {:<8} {:>10} {:>4} {:>12.3} {:>9.3} {:>12.3} {:>9.3}",
                name(&s.transport),
                name(&s.op),
                s.size,
                s.n,
                s.median_total_ms,
                s.sd_total_ms,
                s.median_compute_ms,
                s.sd_compute_ms
            );
        }
        for s in &self.slopes {
            let _ = writeln!(
                out,
                "slope {} {}: {:+.4} ms/MB, {:.0}% CI [{:+.4}, {:+.4}]",
                name(&s.transport),
                name(&s.op),
                s.ms_per_mb,
                s.confidence * 100.0,
                s.ci_low,
                s.ci_high
            );
        }
        let _ = writeln!(
            out,
            "messages: encrypt {} ({}), decrypt {} ({})",
            self.encrypt_messages.len(),
            self.encrypt_messages.join(" "),
            self.decrypt_messages.len(),
            self.decrypt_messages.join(" ")
        );
        let _ = writeln!(out, "median compute per derivation: {:.3} ms", self.median_compute_ms);
        out
    }
}

fn name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}
