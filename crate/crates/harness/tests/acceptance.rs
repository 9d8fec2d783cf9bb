//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Trained checkpoints can be reused across runs by
//! pointing `ASC_ACCEPTANCE_CACHE` at a directory.

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use asc_core::adaptation::{adapt, AdaptConfig, AdaptMode, DomainScope};
use asc_core::autodiff::Graph;
use asc_core::channel::{ChannelConfig, ChannelKind, CsiSampler};
use asc_core::checkpoint::{load_model, save, CheckpointMeta};
use asc_core::data::{procedural_corpus, scene_frames, Image};
use asc_core::jscc_codec::DecoderSnr;
use asc_core::metrics::{bd_psnr, bd_rate};
use asc_core::model::{
    fixed_draw, forward, forward_from_y, hyper_noise, image_leaf, receiver_part, ChannelDraw, HyperMode,
    ModelConfig, NtsccModel, PassOptions, RdModel, RdWeights, SampledChannel, transmit_image,
};
use asc_core::model_delta_codec::{
    bin_mass, decode_stream, encode_stream, ideal_bits, quantize, DeltaQuantConfig,
};
use asc_harness::campaign::run_campaign;
use asc_harness::config::{ExperimentConfig, Scheme};
use asc_harness::train::{train_baseline, TrainConfig};

type Check = Result<(bool, String), String>;

const LAMBDA: f64 = 0.01;
const ETAS: [f64; 4] = [0.1, 0.15, 0.2, 0.3];
const MID_ETA: f64 = 0.2;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn train_cfg(steps: usize, lr: f64, snr_db: Option<(f64, f64)>, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 4,
        lr,
        decay_at: 0.8,
        lambda: LAMBDA,
        eta_y: (0.1, 0.3),
        eta_z: 1.0,
        snr_db,
        crop: 64,
        log_every: 500,
        seed,
    }
}

/// Trains (or loads from the cache) a model, optionally starting from `init`.
fn trained(name: &str, init: Option<&NtsccModel>, modnet: bool, cfg: &TrainConfig) -> Result<NtsccModel, String> {
    let cache = std::env::var_os("ASC_ACCEPTANCE_CACHE").map(PathBuf::from);
    let path = cache.as_ref().map(|d| d.join(format!("{name}.ckpt")));
    if let Some(p) = path.as_ref().filter(|p| p.is_file()) {
        return load_model(p).map(|(_, m)| m).map_err(err);
    }
    let mut model = match init {
        Some(m) => m.clone(),
        None => {
            let mut mc = ModelConfig::default();
            mc.jscc.modnet = modnet;
            NtsccModel::new(mc, 1).map_err(err)?
        }
    };
    let data = procedural_corpus(1, 300, 64, 64);
    let t = Instant::now();
    train_baseline(&mut model, &data, &ChannelConfig::awgn(10.0), cfg, |_| {}).map_err(err)?;
    eprintln!("  trained {name} in {:.0}s", t.elapsed().as_secs_f64());
    if let Some(p) = path {
        std::fs::create_dir_all(p.parent().expect("cache dir")).map_err(err)?;
        let snr = cfg.snr_db.unwrap_or((10.0, 10.0));
        let meta = CheckpointMeta {
            model: model.config.clone(),
            side_info_bits: 2,
            lambda: LAMBDA,
            eta_y: MID_ETA,
            eta_z: 1.0,
            train_snr_db: snr,
            channel: "awgn".into(),
            seed: cfg.seed,
            steps: cfg.steps,
        };
        save(&p, &meta, &model.params).map_err(err)?;
    }
    Ok(model)
}

struct Models {
    baseline: NtsccModel,
    modnet10: NtsccModel,
}

fn baseline_models() -> Result<Models, String> {
    let baseline = trained("baseline", None, false, &train_cfg(4000, 1e-3, None, 11))?;
    let modnet10 = trained("modnet_10db", None, true, &train_cfg(4000, 1e-3, None, 12))?;
    Ok(Models { baseline, modnet10 })
}

fn weights(eta_y: f64) -> RdWeights {
    RdWeights {
        lambda: LAMBDA,
        eta_y,
        eta_z: 1.0,
    }
}

fn held_out() -> Vec<Image> {
    procedural_corpus(99, 10, 64, 64)
}

fn draws(model: &NtsccModel, images: &[Image], ch: &ChannelConfig, seed: u64) -> Result<Vec<ChannelDraw>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = CsiSampler::new(ch.clone()).map_err(err)?;
    images
        .iter()
        .map(|img| fixed_draw(model, img, &mut sampler, &mut rng).map_err(err))
        .collect()
}

fn mean_psnr(model: &NtsccModel, images: &[Image], draws: &[ChannelDraw], eta_y: f64, dec: DecoderSnr) -> Result<f64, String> {
    let mut total = 0.0;
    for (img, d) in images.iter().zip(draws) {
        total += transmit_image(model, img, weights(eta_y), dec, &mut d.clone()).map_err(err)?.psnr;
    }
    Ok(total / images.len() as f64)
}

// 1
fn delta_codec_fidelity() -> Check {
    let cfg = DeltaQuantConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let slab = Normal::new(0.0, cfg.slab_sigma).map_err(err)?;
    let spike = Normal::new(0.0, cfg.spike_sigma()).map_err(err)?;
    let p_slab = 1.0 / (1.0 + cfg.spike_weight);
    let deltas: Vec<f64> = (0..100_000)
        .map(|_| if rng.random::<f64>() < p_slab * 50.0 { slab.sample(&mut rng) } else { spike.sample(&mut rng) })
        .collect();
    let t = Instant::now();
    let qd = quantize(&deltas, &cfg);
    let stream = encode_stream(&qd, &cfg).map_err(err)?;
    let back = decode_stream(&stream, qd.len(), &cfg).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let ideal = ideal_bits(&qd, &cfg);
    let bits = (stream.len() * 8) as f64;
    let exact = back.indices == qd.indices;
    let within = bits <= ideal * 1.01 + 64.0;
    Ok((
        exact && within && secs < 30.0,
        format!(
            "exact={exact} nonzero={} stream={bits:.0} bits ideal={ideal:.1} bits bound={:.1} time={secs:.2}s",
            qd.nonzero(),
            ideal * 1.01 + 64.0
        ),
    ))
}

// 2
fn spike_slab_pricing() -> Check {
    let cfg = DeltaQuantConfig::default();
    let density = |x: f64| {
        let n = |s: f64| (-(x * x) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        (n(cfg.slab_sigma) + cfg.spike_weight * n(cfg.spike_sigma())) / (1.0 + cfg.spike_weight)
    };
    let simpson = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = density(a) + density(b);
        for i in 1..n {
            s += density(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let d = cfg.delta_bin;
    let mut ok = true;
    let mut detail = Vec::new();
    for k in [-1, 0, 1] {
        let lo = (k as f64 - 0.5) * d;
        let oracle = -simpson(lo, lo + d).log2();
        let got = -bin_mass(k, &cfg).log2();
        let rel = (got - oracle).abs() / oracle;
        let bound = if k == 0 { got < 0.01 } else { got > 8.0 };
        ok &= rel < 0.05 && bound;
        detail.push(format!("k={k}: {got:.5} bits (oracle {oracle:.5}, rel {rel:.1e})"));
    }
    Ok((ok, detail.join("; ")))
}

// 3
fn gradient_integrity(model: &NtsccModel) -> Check {
    let img = held_out().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let noise = hyper_noise(model, &img, &mut rng).map_err(err)?;
    let draw = draws(model, std::slice::from_ref(&img), &ChannelConfig::awgn(10.0), 32)?.remove(0);
    let opts = PassOptions {
        weights: weights(MID_ETA),
        hyper: HyperMode::Noise(Rc::clone(&noise)),
        decoder_snr: DecoderSnr::PerToken,
    };
    let loss_of = |m: &NtsccModel| -> Result<(f64, Vec<usize>), String> {
        let mut g = Graph::new();
        let b = m.params().bind(&mut g);
        let f = forward(m, &mut g, &b, &img, &opts, &mut draw.clone()).map_err(err)?;
        Ok((g.scalar(f.loss), f.alloc.k_bar.clone()))
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-9);
    let mut worst: f64 = 0.0;
    let mut alloc_changes = 0;

    // Parameters.
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let f = forward(model, &mut g, &b, &img, &opts, &mut draw.clone()).map_err(err)?;
    let alloc0 = f.alloc.k_bar.clone();
    let grads = g.backward(f.loss);
    let params = model.params().params();
    let mut picked = Vec::new();
    while picked.len() < 20 {
        let i = rng.random_range(0..params.len());
        if params[i].group.is_entropy_model() && rng.random::<f64>() < 0.5 {
            continue;
        }
        let j = rng.random_range(0..params[i].data.len());
        if !picked.contains(&(i, j)) {
            picked.push((i, j));
        }
    }
    for &(i, j) in &picked {
        let analytic = grads.get(b.vars()[i]).map_or(0.0, |gv| gv[j]);
        let h = 1e-6 * params[i].data[j].abs().max(1.0);
        let mut plus = model.clone();
        plus.params_mut().params_mut()[i].data[j] += h;
        let mut minus = model.clone();
        minus.params_mut().params_mut()[i].data[j] -= h;
        let (lp, ap) = loss_of(&plus)?;
        let (lm, am) = loss_of(&minus)?;
        if ap != alloc0 || am != alloc0 {
            alloc_changes += 1;
        }
        worst = worst.max(rel(analytic, (lp - lm) / (2.0 * h)));
    }

    // Latent y.
    let y0 = {
        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let x = image_leaf(&mut g, &img);
        let y = model.analysis(&mut g, &b, x, img.height, img.width).map_err(err)?;
        g.value(y).to_vec()
    };
    let shape = model.latent_shape(img.height, img.width).map_err(err)?;
    let loss_y = |y: &[f64]| -> Result<(f64, Vec<f64>), String> {
        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let yv = g.leaf(shape.tokens, shape.channels, y.to_vec());
        let f = forward_from_y(model, &mut g, &b, &img, yv, &opts, &mut draw.clone()).map_err(err)?;
        let gy = g.backward(f.loss).get_or_zeros(yv, y.len());
        Ok((g.scalar(f.loss), gy))
    };
    let (_, gy) = loss_y(&y0)?;
    for _ in 0..10 {
        let j = rng.random_range(0..y0.len());
        let h = 1e-6;
        let mut yp = y0.clone();
        yp[j] += h;
        let mut ym = y0.clone();
        ym[j] -= h;
        let fd = (loss_y(&yp)?.0 - loss_y(&ym)?.0) / (2.0 * h);
        worst = worst.max(rel(gy[j], fd));
    }

    // Symbols s, with the power constraint inside the pass.
    let alloc = f.alloc.clone();
    let s0 = g.value(f.s).to_vec();
    let loss_s = |s: &[f64]| -> Result<(f64, Vec<f64>), String> {
        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let u = g.leaf(s.len(), 1, s.to_vec());
        let sv = model.constrain_symbols(&mut g, u).map_err(err)?;
        let (_, _, d, _, _) =
            receiver_part(model, &mut g, &b, &img, sv, &alloc, &draw, DecoderSnr::PerToken).map_err(err)?;
        let gs = g.backward(d).get_or_zeros(u, s.len());
        Ok((g.scalar(d), gs))
    };
    let (_, gs) = loss_s(&s0)?;
    for _ in 0..10 {
        let j = rng.random_range(0..s0.len());
        let h = 1e-6;
        let mut sp = s0.clone();
        sp[j] += h;
        let mut sm = s0.clone();
        sm[j] -= h;
        let fd = (loss_s(&sp)?.0 - loss_s(&sm)?.0) / (2.0 * h);
        worst = worst.max(rel(gs[j], fd));
    }
    Ok((
        worst < 1e-3 && alloc_changes == 0,
        format!("20 params + 10 y + 10 s entries, worst relative error {worst:.2e}, allocation changes {alloc_changes}"),
    ))
}

fn campaign_cfg(out: &Path, domain: &str, schemes: &str, extra: &str) -> Result<ExperimentConfig, String> {
    let points: String = ETAS.iter().map(|e| format!("[[rate_points]]\neta_y = {e}\n")).collect();
    let text = format!(
        r#"
seed = 4
output_dir = "{}"
[data]
kind = "procedural"
[train]
lambda = {LAMBDA}
{domain}
[[eval_channels]]
kind = "awgn"
snr_db = 10.0
{points}
[adapt]
schemes = {schemes}
{extra}
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).map_err(err)
}

// 4
fn adaptation_improves(model: &NtsccModel) -> Check {
    let images = held_out();
    let mut lines = Vec::new();
    let mut ok = true;

    // Loss reduction per instance at the middle rate point.
    for mode in [AdaptMode::TxModel, AdaptMode::TxCode, AdaptMode::TxrxFull] {
        let mut improved = 0;
        for (i, img) in images.iter().enumerate() {
            let mut cfg = AdaptConfig::new(mode, LAMBDA);
            cfg.eta_y = MID_ETA;
            cfg.seed = 100 + i as u64;
            if mode == AdaptMode::TxrxFull {
                cfg.steps = 500;
                cfg.select_every = 50;
                cfg.domain_scope = DomainScope::Instance;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
            let mut sampler = CsiSampler::new(ChannelConfig::awgn(10.0)).map_err(err)?;
            let mut src = SampledChannel {
                sampler: &mut sampler,
                rng: &mut rng,
            };
            let res = adapt(model, std::slice::from_ref(img), &mut src, &cfg).map_err(err)?;
            if res.final_eval.loss < res.initial.loss {
                improved += 1;
            }
        }
        ok &= improved >= 9;
        lines.push(format!("{} improved {improved}/10", mode.name()));
    }

    // Transmitter schemes against the baseline at equal rate.
    let dir = tempfile::tempdir().map_err(err)?;
    let domain = "[[domains]]\nname = \"heldout\"\nkind = \"procedural\"\ncount = 10\nseed = 99";
    let cfg = campaign_cfg(dir.path(), domain, "[\"baseline\", \"tx_model\", \"tx_code\"]", "")?;
    let rep = run_campaign(&cfg, model, LAMBDA, dir.path()).map_err(err)?;
    let base = rep.curve(Scheme::Baseline, "heldout", 10.0);
    for s in [Scheme::TxModel, Scheme::TxCode] {
        let d = bd_psnr(&base, &rep.curve(s, "heldout", 10.0)).map_err(err)?;
        ok &= d >= 0.0;
        lines.push(format!("{} BD-PSNR {d:+.3} dB", s.name()));
    }

    // Transceiver adaptation over one scene, model stream included.
    let dir = tempfile::tempdir().map_err(err)?;
    let domain = "[[domains]]\nname = \"scene\"\nkind = \"scene\"\ncount = 30\nseed = 5";
    let cfg = campaign_cfg(dir.path(), domain, "[\"baseline\", \"txrx_full\"]", "")?;
    let t = Instant::now();
    let rep = run_campaign(&cfg, model, LAMBDA, dir.path()).map_err(err)?;
    eprintln!("  scene campaign {:.0}s", t.elapsed().as_secs_f64());
    let base = rep.curve(Scheme::Baseline, "scene", 10.0);
    let txrx = rep.curve(Scheme::TxrxFull, "scene", 10.0);
    let bd = bd_rate(&base, &txrx).map_err(err)?;
    ok &= bd <= -5.0;
    let m: Vec<String> = rep
        .records
        .iter()
        .filter(|(s, _)| *s == Scheme::TxrxFull)
        .map(|(_, r)| format!("{:.2e}", r.cbr_model))
        .collect();
    lines.push(format!("txrx_full scene BD-rate {bd:+.2}% (M = {})", m.join("/")));
    Ok((ok, lines.join("; ")))
}

// 5
fn beta_sweep(model: &NtsccModel) -> Check {
    let frames = scene_frames(5, 30, 64, 64);
    let mut rows = Vec::new();
    let mut zero_ok = false;
    for beta in [16.0, 4.0, 1.0, 0.1, 1e6] {
        let mut cfg = AdaptConfig::new(AdaptMode::TxrxFull, LAMBDA);
        cfg.eta_y = MID_ETA;
        cfg.beta = beta;
        cfg.steps = 2000;
        cfg.seed = 55;
        cfg.domain_scope = DomainScope::Domain;
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let mut sampler = CsiSampler::new(ChannelConfig::awgn(10.0)).map_err(err)?;
        let mut src = SampledChannel {
            sampler: &mut sampler,
            rng: &mut rng,
        };
        let res = adapt(model, &frames, &mut src, &cfg).map_err(err)?;
        let nz = res.delta.as_ref().map_or(usize::MAX, |d| d.nonzero());
        if beta > 1e5 {
            zero_ok = nz == 0;
        } else {
            rows.push((beta, res.final_eval.d, res.final_eval.m, nz));
        }
    }
    let d_ok = rows.windows(2).all(|w| w[1].1 <= w[0].1);
    let m_ok = rows.windows(2).all(|w| w[1].2 >= w[0].2);
    let detail: Vec<String> = rows
        .iter()
        .map(|(b, d, m, nz)| format!("β={b}: D={d:.6} M={m:.2e} nz={nz}"))
        .collect();
    Ok((
        d_ok && m_ok && zero_ok,
        format!("{}; β=1e6 all-zero={zero_ok}", detail.join("; ")),
    ))
}

// 6 and 7 share the SNR-adaptive models.
struct SnrModels {
    wide: NtsccModel,
    per_snr: Vec<(f64, NtsccModel)>,
}

fn snr_models(modnet10: &NtsccModel) -> Result<SnrModels, String> {
    let wide = trained("modnet_wide", Some(modnet10), true, &train_cfg(2000, 3e-4, Some((-5.0, 20.0)), 21))?;
    let mut per_snr = Vec::new();
    for snr in [0.0, 4.0, 10.0] {
        let m = trained(
            &format!("modnet_{snr}db_ft"),
            Some(modnet10),
            true,
            &train_cfg(2000, 3e-4, Some((snr, snr)), 22),
        )?;
        per_snr.push((snr, m));
    }
    Ok(SnrModels { wide, per_snr })
}

fn modnet_adaptivity(base10: &NtsccModel, m: &SnrModels) -> Check {
    let images = held_out();
    let mut ok = true;
    let mut lines = Vec::new();
    for (snr, per) in &m.per_snr {
        let d = draws(base10, &images, &ChannelConfig::awgn(*snr), 600 + *snr as u64)?;
        let pw = mean_psnr(&m.wide, &images, &d, MID_ETA, DecoderSnr::PerToken)?;
        let pp = mean_psnr(per, &images, &d, MID_ETA, DecoderSnr::PerToken)?;
        let pb = mean_psnr(base10, &images, &d, MID_ETA, DecoderSnr::PerToken)?;
        if *snr == 0.0 {
            ok &= pw - pb >= 0.3;
        }
        ok &= pw >= pp - 0.5;
        lines.push(format!("{snr} dB: wide {pw:.2} per-SNR {pp:.2} fixed-10dB {pb:.2}"));
    }
    Ok((ok, lines.join("; ")))
}

fn per_token_snr(m: &SnrModels) -> Check {
    let images = held_out();
    let mut margin = 0.0;
    let mut lines = Vec::new();
    for snr in [0.0, 4.0, 10.0] {
        let ch = ChannelConfig::with_kind(ChannelKind::SelectiveFading, snr);
        let d = draws(&m.wide, &images, &ch, 700 + snr as u64)?;
        let exact = mean_psnr(&m.wide, &images, &d, MID_ETA, DecoderSnr::PerToken)?;
        let cqi = mean_psnr(&m.wide, &images, &d, MID_ETA, DecoderSnr::Cqi)?;
        margin += (exact - cqi) / 3.0;
        lines.push(format!("{snr} dB: per-token {exact:.3} CQI {cqi:.3}"));
    }
    Ok((margin > 0.0, format!("mean margin {margin:+.4} dB; {}", lines.join("; "))))
}

// 8
fn determinism(model: &NtsccModel) -> Check {
    let extra = "[adapt.tx_model]\nsteps = 5\n[adapt.tx_code]\ny_steps = 3\ns_steps = 3\n[adapt.txrx_full]\nsteps = 6\nselect_every = 3";
    let domain = "[[domains]]\nname = \"scene\"\nkind = \"scene\"\ncount = 2\nseed = 9";
    let run = || -> Result<Vec<(String, Vec<u8>)>, String> {
        let dir = tempfile::tempdir().map_err(err)?;
        let cfg = campaign_cfg(dir.path(), domain, "[\"baseline\", \"tx_model\", \"tx_code\", \"txrx_full\"]", extra)?;
        let rep = run_campaign(&cfg, model, LAMBDA, dir.path()).map_err(err)?;
        let mut out = Vec::new();
        for f in rep.files {
            let name = f.file_name().unwrap().to_string_lossy().to_string();
            out.push((name, std::fs::read(&f).map_err(err)?));
        }
        out.sort();
        Ok(out)
    };
    let a = run()?;
    let b = run()?;
    Ok((a == b && !a.is_empty(), format!("{} CSV files compared byte for byte", a.len())))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "[{}] {id}. {name} ({:.1}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    };
    report(1, "delta codec fidelity", &mut delta_codec_fidelity);
    report(2, "spike-and-slab pricing", &mut spike_slab_pricing);
    let models = match baseline_models() {
        Ok(m) => m,
        Err(e) => {
            println!("[FAIL] baseline training failed: {e}");
            std::process::exit(1);
        }
    };
    report(3, "gradient integrity", &mut || gradient_integrity(&models.baseline));
    report(4, "adaptation improves loss", &mut || adaptation_improves(&models.baseline));
    report(5, "beta sweep trend", &mut || beta_sweep(&models.baseline));
    let snr = snr_models(&models.modnet10);
    match &snr {
        Ok(m) => {
            report(6, "channel ModNet adaptivity", &mut || modnet_adaptivity(&models.modnet10, m));
            report(7, "per-token SNR use", &mut || per_token_snr(m));
        }
        Err(e) => {
            let e = e.clone();
            report(6, "channel ModNet adaptivity", &mut || Err(e.clone()));
            report(7, "per-token SNR use", &mut || Err(e.clone()));
        }
    }
    report(8, "determinism", &mut || determinism(&models.baseline));
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
