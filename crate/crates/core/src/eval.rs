//! Revealing accuracy, rounds ablation, capacity sweep and report files.
//!
//! Accuracy on the raw channel compares the full-capacity bit stream before
//! any error correction. When ECC is enabled the corrected figure (payload
//! bits after decoding) is reported separately.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::colorspace::LabImage;
use crate::dataset::synthetic_dataset;
use crate::flow::{FlowModel, FlowNet};
use crate::latent::{capacity_bits, decode_latent};
use crate::payload::{bytes_to_bits, max_payload_bytes, unframe_payload};
use crate::pipeline::{
    embed_bits, extract_latent, hide_in_luminance, ideal_channel, load_container, scramble, store_container,
    EmbeddingSettings, StegoError,
};
use crate::training::{train_stage2, ProgressRecord, TrainConfig, TrainError, TrainObserver};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bit streams differ in length: {sent} sent, {received} received")]
    LengthMismatch { sent: usize, received: usize },
    #[error("no evaluation images")]
    NoImages,
    #[error(transparent)]
    Stego(#[from] StegoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Percentage of positions where the two streams agree.
pub fn revealing_accuracy(sent: &[bool], received: &[bool]) -> Result<f64, EvalError> {
    if sent.len() != received.len() {
        return Err(EvalError::LengthMismatch {
            sent: sent.len(),
            received: received.len(),
        });
    }
    if sent.is_empty() {
        return Ok(100.0);
    }
    let same = sent.iter().zip(received).filter(|(a, b)| a == b).count();
    Ok(100.0 * same as f64 / sent.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRow {
    pub round: usize,
    pub acc_ideal: f64,
    pub acc_rounded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelReport {
    pub acc_ideal: f64,
    pub acc_rounded: f64,
    /// Payload accuracy after BCH decoding, when ECC is enabled.
    pub acc_corrected: Option<f64>,
    pub capacity_bpp: f64,
    pub grayscale_linf: f64,
    pub clip_fraction: f64,
    /// Revealed latents on the wrong side of zero with `|z'| < alpha`.
    pub sign_margin_errors: usize,
    pub images: usize,
    pub per_round: Vec<RoundRow>,
}

/// Per-image measurements, summed by [`evaluate_channel`].
struct ImageStats {
    bits: usize,
    ideal_ok: usize,
    rounded_ok: usize,
    linf: f64,
    clip: f64,
    margin_errors: usize,
    corrected: Option<(usize, usize)>,
}

fn evaluate_image(net: &FlowNet, host: &LabImage, settings: &EmbeddingSettings, seed: u64) -> Result<ImageStats, StegoError> {
    let (h, w) = (host.height(), host.width());
    let luma = host.luminance();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<bool> = (0..capacity_bits(h, w)).map(|_| rng.gen()).collect();
    let chroma = embed_bits(net, &bits, luma, h, w, settings.alpha, rng.gen())?;

    let ideal = ideal_channel(luma, &chroma, h, w)?;
    let ideal_bits = decode_latent(&extract_latent(net, &ideal)?);

    let (stored, clip) = store_container(luma, &chroma, h, w)?;
    let lab = load_container(&stored)?;
    let z = extract_latent(net, &lab)?;
    let rounded_bits = decode_latent(&z);
    let margin_errors = z
        .iter()
        .zip(&bits)
        .filter(|(v, b)| v.abs() < settings.alpha && (**v >= 0.0) != **b)
        .count();
    let linf = lab
        .luminance()
        .iter()
        .zip(luma)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let corrected = if settings.ecc.enabled {
        let size = max_payload_bytes(bits.len(), &settings.ecc);
        let payload: Vec<u8> = (0..size).map(|_| rng.gen()).collect();
        let hidden = hide_in_luminance(&payload, luma, h, w, net, settings, rng.gen())?;
        let received = decode_latent(&extract_latent(net, &load_container(&hidden.container)?)?);
        let sent_bits = bytes_to_bits(&payload);
        let got = match unframe_payload(&scramble(&received), &settings.ecc) {
            Ok(bytes) if bytes.len() == payload.len() => bytes_to_bits(&bytes),
            // A failed decode counts every payload bit as lost.
            _ => sent_bits.iter().map(|b| !b).collect(),
        };
        Some((sent_bits.iter().zip(&got).filter(|(a, b)| a == b).count(), sent_bits.len()))
    } else {
        None
    };

    let agree = |got: &[bool]| got.iter().zip(&bits).filter(|(a, b)| a == b).count();
    Ok(ImageStats {
        bits: bits.len(),
        ideal_ok: agree(&ideal_bits),
        rounded_ok: agree(&rounded_bits),
        linf,
        clip,
        margin_errors,
        corrected,
    })
}

/// Hides uniform random bits at full capacity in every host and reveals them
/// through both the ideal and the 8-bit channel.
pub fn evaluate_channel(model: &FlowModel, hosts: &[LabImage], settings: &EmbeddingSettings, seed: u64) -> Result<ChannelReport, EvalError> {
    if hosts.is_empty() {
        return Err(EvalError::NoImages);
    }
    let net = model.net();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = hosts.iter().map(|_| rng.gen()).collect();
    let stats = hosts
        .par_iter()
        .zip(&seeds)
        .map(|(host, &s)| evaluate_image(&net, host, settings, s))
        .collect::<Result<Vec<_>, _>>()?;
    let bits: usize = stats.iter().map(|s| s.bits).sum();
    let pixels: usize = hosts.iter().map(|h| h.height() * h.width()).sum();
    let acc_corrected = settings.ecc.enabled.then(|| {
        let (ok, total) = stats
            .iter()
            .filter_map(|s| s.corrected)
            .fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
        if total == 0 {
            100.0
        } else {
            100.0 * ok as f64 / total as f64
        }
    });
    Ok(ChannelReport {
        acc_ideal: 100.0 * stats.iter().map(|s| s.ideal_ok).sum::<usize>() as f64 / bits as f64,
        acc_rounded: 100.0 * stats.iter().map(|s| s.rounded_ok).sum::<usize>() as f64 / bits as f64,
        acc_corrected,
        capacity_bpp: bits as f64 / pixels as f64,
        grayscale_linf: stats.iter().map(|s| s.linf).fold(0.0, f64::max),
        clip_fraction: stats.iter().map(|s| s.clip).sum::<f64>() / stats.len() as f64,
        sign_margin_errors: stats.iter().map(|s| s.margin_errors).sum(),
        images: hosts.len(),
        per_round: Vec::new(),
    })
}

struct AblationObserver<'a> {
    inner: &'a mut dyn TrainObserver,
    hosts: &'a [LabImage],
    settings: &'a EmbeddingSettings,
    seed: u64,
    rows: Vec<RoundRow>,
    last: Option<ChannelReport>,
}

impl TrainObserver for AblationObserver<'_> {
    fn record(&mut self, record: &ProgressRecord) -> Result<(), TrainError> {
        self.inner.record(record)
    }

    fn round_end(&mut self, round: usize, model: &FlowModel) -> Result<(), TrainError> {
        let report = evaluate_channel(model, self.hosts, self.settings, self.seed).map_err(|e| TrainError::Observer(e.to_string()))?;
        log::info!(
            "round {round}: ideal {:.2}%, rounded {:.2}%",
            report.acc_ideal,
            report.acc_rounded
        );
        self.rows.push(RoundRow {
            round,
            acc_ideal: report.acc_ideal,
            acc_rounded: report.acc_rounded,
        });
        self.last = Some(report);
        self.inner.round_end(round, model)
    }
}

/// Runs round-based training from `base`, measuring both channels before
/// the first round and after every round. The same evaluation bits are used
/// at every round.
pub fn run_rounds_ablation(
    base: &FlowModel,
    train_hosts: &[LabImage],
    eval_hosts: &[LabImage],
    config: &TrainConfig,
    settings: &EmbeddingSettings,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<(ChannelReport, FlowModel), EvalError> {
    let start = evaluate_channel(base, eval_hosts, settings, seed)?;
    let mut obs = AblationObserver {
        inner: observer,
        hosts: eval_hosts,
        settings,
        seed,
        rows: vec![RoundRow {
            round: 0,
            acc_ideal: start.acc_ideal,
            acc_rounded: start.acc_rounded,
        }],
        last: None,
    };
    let model = train_stage2(base, train_hosts, config, settings, &mut obs)?;
    let mut report = obs.last.take().unwrap_or(start);
    report.per_round = obs.rows;
    Ok((report, model))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityRow {
    pub height: usize,
    pub width: usize,
    pub bits: usize,
    pub bpp: f64,
    pub acc_ideal: f64,
    pub acc_rounded: f64,
}

/// Full-capacity embedding at several square sizes on synthetic hosts.
pub fn run_capacity_sweep(model: &FlowModel, sizes: &[usize], per_size: usize, settings: &EmbeddingSettings, seed: u64) -> Result<Vec<CapacityRow>, EvalError> {
    sizes
        .iter()
        .map(|&size| {
            let hosts = synthetic_dataset(per_size, size, seed ^ size as u64);
            let r = evaluate_channel(model, &hosts, settings, seed)?;
            Ok(CapacityRow {
                height: size,
                width: size,
                bits: capacity_bits(size, size),
                bpp: r.capacity_bpp,
                acc_ideal: r.acc_ideal,
                acc_rounded: r.acc_rounded,
            })
        })
        .collect()
}

pub const HIST_BINS: usize = 64;
const HIST_RANGE: f64 = 0.5;

/// Normalized histogram of chrominance values over `[-0.5, 0.5]`
/// (out-of-range values land in the edge bins).
pub fn chroma_histogram(images: &[LabImage]) -> Vec<f64> {
    let mut hist = vec![0.0; HIST_BINS];
    let mut total = 0.0;
    for img in images {
        for &v in img.chroma() {
            let t = ((v + HIST_RANGE) / (2.0 * HIST_RANGE) * HIST_BINS as f64).floor();
            hist[(t.max(0.0) as usize).min(HIST_BINS - 1)] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for h in &mut hist {
            *h /= total;
        }
    }
    hist
}

/// Jensen-Shannon divergence (bits) between two normalized histograms.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// Cheap statistical checks. These are proxies only and say nothing about
/// resistance to trained CNN steganalysers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProxyReport {
    pub note: String,
    pub chroma_js_divergence: f64,
    pub luminance_max_deviation: f64,
    pub luminance_preserved_fraction: f64,
    pub container_histogram: Vec<f64>,
    pub host_histogram: Vec<f64>,
}

pub fn run_proxies(model: &FlowModel, hosts: &[LabImage], settings: &EmbeddingSettings, seed: u64) -> Result<ProxyReport, EvalError> {
    if hosts.is_empty() {
        return Err(EvalError::NoImages);
    }
    let net = model.net();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut containers = Vec::with_capacity(hosts.len());
    let (mut max_dev, mut kept, mut total) = (0.0f64, 0usize, 0usize);
    for host in hosts {
        let (h, w) = (host.height(), host.width());
        let bits: Vec<bool> = (0..capacity_bits(h, w)).map(|_| rng.gen()).collect();
        let chroma = embed_bits(&net, &bits, host.luminance(), h, w, settings.alpha, rng.gen())?;
        let (stored, _) = store_container(host.luminance(), &chroma, h, w)?;
        let lab = load_container(&stored)?;
        for (a, b) in lab.luminance().iter().zip(host.luminance()) {
            let d = (a - b).abs();
            max_dev = max_dev.max(d);
            kept += usize::from(d < 2.0 / 255.0);
            total += 1;
        }
        containers.push(lab);
    }
    let container_histogram = chroma_histogram(&containers);
    let host_histogram = chroma_histogram(hosts);
    Ok(ProxyReport {
        note: "histogram and luminance proxies; not equivalent to CNN steganalysis".into(),
        chroma_js_divergence: js_divergence(&container_histogram, &host_histogram),
        luminance_max_deviation: max_dev,
        luminance_preserved_fraction: kept as f64 / total as f64,
        container_histogram,
        host_histogram,
    })
}

/// Everything one evaluation run produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub alpha: f64,
    pub ecc_enabled: bool,
    #[serde(flatten)]
    pub channel: ChannelReport,
    pub capacity: Vec<CapacityRow>,
    pub proxies: Option<ProxyReport>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned plain-text tables.
    pub fn to_table(&self) -> String {
        let c = &self.channel;
        let mut out = String::new();
        let _ = writeln!(out, "run: {}  (seed {}, alpha {}, ecc {})", self.name, self.seed, self.alpha, self.ecc_enabled);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<28}{:>12}", "metric", "value");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(out, "{k:<28}{v:>12}");
        };
        row("images", c.images.to_string());
        row("capacity (bpp)", format!("{:.2}", c.capacity_bpp));
        row("accuracy, ideal (%)", format!("{:.2}", c.acc_ideal));
        row("accuracy, rounded (%)", format!("{:.2}", c.acc_rounded));
        if let Some(v) = c.acc_corrected {
            row("accuracy, after ECC (%)", format!("{v:.2}"));
        }
        row("grayscale L-inf", format!("{:.6}", c.grayscale_linf));
        row("gamut-fitted pixels", format!("{:.4}", c.clip_fraction));
        row("sign-margin errors", c.sign_margin_errors.to_string());
        if !c.per_round.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:>6}{:>14}{:>14}", "round", "ideal (%)", "rounded (%)");
            for r in &c.per_round {
                let _ = writeln!(out, "{:>6}{:>14.2}{:>14.2}", r.round, r.acc_ideal, r.acc_rounded);
            }
        }
        if !self.capacity.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:>10}{:>10}{:>8}{:>14}{:>14}", "size", "bits", "bpp", "ideal (%)", "rounded (%)");
            for r in &self.capacity {
                let _ = writeln!(
                    out,
                    "{:>10}{:>10}{:>8.2}{:>14.2}{:>14.2}",
                    format!("{}x{}", r.width, r.height),
                    r.bits,
                    r.bpp,
                    r.acc_ideal,
                    r.acc_rounded
                );
            }
        }
        if let Some(p) = &self.proxies {
            let _ = writeln!(out);
            let _ = writeln!(out, "proxies ({})", p.note);
            let _ = writeln!(out, "{:<28}{:>12.6}", "chroma JS divergence (bit)", p.chroma_js_divergence);
            let _ = writeln!(out, "{:<28}{:>12.6}", "L max deviation", p.luminance_max_deviation);
            let _ = writeln!(out, "{:<28}{:>12.4}", "L preserved fraction", p.luminance_preserved_fraction);
        }
        out
    }

    /// Writes `report.json`, `report.txt` and the SVG plots under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, EvalError> {
        let dir = dir.as_ref();
        let plots = dir.join("plots");
        std::fs::create_dir_all(&plots)?;
        let mut written = vec![dir.join("report.json"), dir.join("report.txt")];
        std::fs::write(&written[0], self.to_json())?;
        std::fs::write(&written[1], self.to_table())?;
        if !self.channel.per_round.is_empty() {
            let path = plots.join("accuracy_vs_round.svg");
            std::fs::write(&path, accuracy_plot(&self.channel.per_round))?;
            written.push(path);
        }
        if let Some(p) = &self.proxies {
            let path = plots.join("chroma_histogram.svg");
            std::fs::write(&path, histogram_plot(&p.host_histogram, &p.container_histogram))?;
            written.push(path);
        }
        Ok(written)
    }
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{cx}" y="20" text-anchor="middle" font-size="14">{title}</text>
<line x1="{PAD}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{bottom}" stroke="black"/>
<text x="{cx}" y="{xl}" text-anchor="middle">{x_label}</text>
<text x="14" y="{cy}" text-anchor="middle" transform="rotate(-90 14 {cy})">{y_label}</text>
{body}</svg>
"##,
        cx = W / 2.0,
        cy = H / 2.0,
        bottom = H - PAD,
        right = W - PAD / 2.0,
        xl = H - 12.0,
    )
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Accuracy per round for both channels.
pub fn accuracy_plot(rows: &[RoundRow]) -> String {
    let lo = rows
        .iter()
        .flat_map(|r| [r.acc_ideal, r.acc_rounded])
        .fold(100.0f64, f64::min)
        .floor()
        .min(99.0);
    let last = rows.iter().map(|r| r.round).max().unwrap_or(1).max(1) as f64;
    let sx = |r: usize| PAD + (W - 1.5 * PAD) * r as f64 / last;
    let sy = |a: f64| (H - PAD) - (H - 2.0 * PAD) * (a - lo) / (100.0 - lo);
    let mut body = String::new();
    for (acc, color) in [(false, "#1f77b4"), (true, "#d62728")] {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (sx(r.round), sy(if acc { r.acc_rounded } else { r.acc_ideal })))
            .collect();
        body += &polyline(&pts, color);
        for (x, y) in pts {
            body += &format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>\n");
        }
    }
    for r in rows {
        body += &format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            sx(r.round),
            H - PAD + 16.0,
            r.round
        );
    }
    for a in [lo, 100.0] {
        body += &format!("<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{a:.1}</text>\n", PAD - 4.0, sy(a) + 4.0);
    }
    body += &format!("<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#1f77b4\">ideal</text>\n", W - 120.0, PAD + 10.0);
    body += &format!("<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#d62728\">8-bit</text>\n", W - 120.0, PAD + 26.0);
    svg_frame("Revealing accuracy by round", "round", "accuracy (%)", &body)
}

/// Chrominance histograms of hosts and containers, overlaid.
pub fn histogram_plot(host: &[f64], container: &[f64]) -> String {
    let top = host.iter().chain(container).fold(1e-12f64, |a, &b| a.max(b));
    let n = host.len().max(1) as f64;
    let sx = |i: usize| PAD + (W - 1.5 * PAD) * (i as f64 + 0.5) / n;
    let sy = |v: f64| (H - PAD) - (H - 2.0 * PAD) * v / top;
    let mut body = String::new();
    for (hist, color) in [(host, "#1f77b4"), (container, "#d62728")] {
        let pts: Vec<(f64, f64)> = hist.iter().enumerate().map(|(i, &v)| (sx(i), sy(v))).collect();
        body += &polyline(&pts, color);
    }
    body += &format!("<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#1f77b4\">hosts</text>\n", W - 120.0, PAD + 10.0);
    body += &format!("<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#d62728\">containers</text>\n", W - 120.0, PAD + 26.0);
    svg_frame(
        "Chrominance histogram (proxy only)",
        "normalized a/b value",
        "frequency",
        &body,
    )
}
