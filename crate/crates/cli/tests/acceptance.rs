//! Acceptance suite: one `PASS`/`FAIL` line per criterion.
//!
//! Criteria 1–4 are self-contained property checks. Criteria 5–9 share one
//! desk-scale pipeline run through the `anl` command line in-process. Its
//! work directory persists between runs (`ANL_ACCEPTANCE_DIR`, default under
//! the cargo target dir), and the run records make repeated runs cheap.

use std::collections::HashSet;
use std::f64::consts::LN_2;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use anl::attention::{attention_from_values, AttentionMap};
use anl::data::{split_manifest, DatasetManifest, Protocol, Split};
use anl::detector::{bce_loss, BackboneConfig, Detector, DetectorBatch, DetectorConfig, InputMode, Prediction, Stage};
use anl::diffusion::{q_sample, EpsilonNetwork, Geometry, LatentImage, NoiseSchedule, UNetConfig};
use anl::eval::{average_precision, parse_matrix_csv, EvalMatrix, Metric};
use anl::rng;
use anl_nn::{ParamStore, Tape, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(budget: Duration, start: Instant) -> Check {
    let took = start.elapsed();
    ensure!(
        took <= budget,
        "took {:.1} s, budget {:.0} s",
        took.as_secs_f64(),
        budget.as_secs_f64()
    );
    Ok(format!("{:.2} s", took.as_secs_f64()))
}

// ---------------------------------------------------------------- 1

fn schedule_suite() -> Check {
    let start = Instant::now();
    for steps in [200, 1000] {
        let s = NoiseSchedule::default_linear(steps).map_err(|e| e.to_string())?;
        ensure!(s.alpha_bar(0) == 1.0, "ᾱ_0 = {}", s.alpha_bar(0));
        let mut worst = 0.0f64;
        for t in 1..=steps {
            let expected = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
            worst = worst.max((s.alpha_bar(t) - expected).abs());
        }
        ensure!(worst <= 1e-12, "T={steps}: ᾱ recurrence off by {worst:e}");
        ensure!(s.posterior_variance(1) == 0.0, "σ_1² = {:e}", s.posterior_variance(1));
    }

    // Standardised residuals of q_sample should be N(0, 1).
    let sched = NoiseSchedule::default_linear(200).unwrap();
    let mut r = rng::stream(11, "q-sample");
    let x0 = Tensor::randn(vec![1, 4, 4], 0.5, &mut r);
    let img = LatentImage::new(x0.clone(), 0).unwrap();
    let draws = 10_000;
    for t in [1, 50, 200] {
        let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..draws {
            let eps = Tensor::randn(vec![1, 4, 4], 1.0, &mut r);
            let xt = q_sample(&img, t, &eps, &sched).map_err(|e| e.to_string())?;
            for (x, m) in xt.pixels().data().iter().zip(x0.data()) {
                let z = (x - a * m) / b;
                sum += z;
                sq += z * z;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        ensure!(mean.abs() <= 3.0 / n.sqrt(), "t={t}: mean {mean}");
        ensure!((var - 1.0).abs() <= 3.0 * (2.0 / n).sqrt(), "t={t}: variance {var}");
    }
    within(Duration::from_secs(10), start)
}

// ---------------------------------------------------------------- 2

fn bce_oracle(logits: &[f64], labels: &[f64]) -> f64 {
    let eps = 1e-7;
    let mut total = 0.0;
    for (&z, &y) in logits.iter().zip(labels) {
        let p = (1.0 / (1.0 + (-z).exp())).max(eps).min(1.0 - eps);
        total -= if y == 1.0 { p.ln() } else { (1.0 - p).ln() };
    }
    total / logits.len() as f64
}

/// Precision at the rank of each positive, ranks taken by descending score
/// with earlier items first among equal scores.
fn ap_oracle(scores: &[f64], labels: &[f64]) -> f64 {
    let n = scores.len();
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let mut total = 0.0;
    let mut positives = 0.0;
    for i in (0..n).filter(|&i| labels[i] == 1.0) {
        let rank = (0..n).filter(|&j| ahead(i, j)).count() as f64;
        let hits = (0..n).filter(|&j| ahead(i, j) && labels[j] == 1.0).count() as f64;
        total += hits / rank;
        positives += 1.0;
    }
    total / positives
}

fn loss_and_metric_oracles() -> Check {
    let start = Instant::now();
    let mut r = rng::stream(12, "oracles");
    let (mut bce_err, mut tape_err, mut ap_err) = (0.0f64, 0.0f64, 0.0f64);
    for batch in 0..1000 {
        let n = r.random_range(1..=64);
        let labels: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..2u8))).collect();
        let logits: Vec<f64> = (0..n)
            .map(|_| match batch % 4 {
                0 => 0.0,
                1 => r.random_range(-60.0..60.0),
                _ => 3.0 * normal(&mut r),
            })
            .collect();
        let preds: Vec<Prediction> = logits.iter().map(|&z| Prediction::from_logit(z)).collect();
        let oracle = bce_oracle(&logits, &labels);
        if batch % 4 == 0 {
            ensure!((oracle - LN_2).abs() < 1e-15, "oracle at zero logits is {oracle}");
        }
        bce_err = bce_err.max((bce_loss(&preds, &labels).unwrap() - oracle).abs());
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.input(Tensor::new(vec![n], logits.clone()).unwrap());
        let l = tape.bce_with_logits(z, labels.clone(), 1e-7);
        tape_err = tape_err.max((tape.value(l).data()[0] - oracle).abs());

        let mut ap_labels = labels.clone();
        ap_labels[r.random_range(0..n)] = 1.0;
        // Coarse scores force ties on about half the batches.
        let scores: Vec<f64> = if batch % 2 == 0 {
            (0..n).map(|_| f64::from(r.random_range(0..5u8)) / 4.0).collect()
        } else {
            (0..n).map(|_| r.random::<f64>()).collect()
        };
        let ap = average_precision(&scores, &ap_labels).unwrap();
        ap_err = ap_err.max((ap - ap_oracle(&scores, &ap_labels)).abs());
    }
    let clamp = bce_oracle(&[200.0], &[0.0]);
    ensure!((clamp + (1e-7f64).ln()).abs() < 1e-6, "clamped loss {clamp}");
    ensure!(bce_err <= 1e-12, "BCE max error {bce_err:e}");
    ensure!(tape_err <= 1e-12, "training BCE max error {tape_err:e}");
    ensure!(ap_err <= 1e-10, "AP max error {ap_err:e}");
    let t = within(Duration::from_secs(30), start)?;
    Ok(format!(
        "BCE err {bce_err:.1e}, training BCE err {tape_err:.1e}, AP err {ap_err:.1e}; {t}"
    ))
}

// ---------------------------------------------------------------- 3

fn toy_detector(use_attention: bool, geometry: Geometry, seed: u64) -> Detector {
    let cfg = DetectorConfig {
        input_mode: InputMode::Noise,
        use_attention,
        backbone: BackboneConfig {
            stem_width: 4,
            stages: vec![Stage { width: 4, stride: 2 }, Stage { width: 8, stride: 2 }],
            groups: 2,
        },
        timestep: 1,
        geometry,
    };
    let mut d = Detector::new(cfg, Some("probe".into()), seed).unwrap();
    // The head starts at zero; randomise everything so no gradient vanishes.
    let mut r = rng::stream(seed, "perturb");
    for t in d.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * normal(&mut r);
        }
    }
    d
}

fn attention_properties() -> Check {
    let start = Instant::now();
    let mut r = rng::stream(13, "attention");
    let mut general_scale_err = 0.0f64;
    let mut det_cache: Vec<(Geometry, Detector, Detector)> = Vec::new();
    for case in 0..500 {
        let (c, h, w) = (r.random_range(1..=4), r.random_range(2..=12), r.random_range(2..=12));
        let v = Tensor::randn(vec![c, h, w], 1.0, &mut r);
        let a = attention_from_values(&v, 1).unwrap();
        ensure!(
            a.weights().iter().all(|x| (0.0..=1.0).contains(x)),
            "case {case}: weight outside [0, 1]"
        );

        let k = r.random_range(-10..=10);
        let scaled = v.map(|x| x * 2f64.powi(k));
        ensure!(
            attention_from_values(&scaled, 1).unwrap() == a,
            "case {case}: 2^{k} scale changed the map"
        );
        let s = r.random_range(1e-3..1e3);
        let b = attention_from_values(&v.map(|x| x * s), 1).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            general_scale_err = general_scale_err.max((x - y).abs());
        }

        let mut perm: Vec<usize> = (0..c).collect();
        perm.reverse();
        perm.rotate_left(r.random_range(0..c));
        let hw = h * w;
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&k| v.data()[k * hw..(k + 1) * hw].to_vec())
            .collect();
        let pa = attention_from_values(&Tensor::new(vec![c, h, w], permuted).unwrap(), 1).unwrap();
        ensure!(pa == a, "case {case}: channel permutation changed the map");

        let energy: Vec<f64> = (0..hw)
            .map(|p| (0..c).map(|k| v.data()[k * hw + p].abs()).sum::<f64>() / c as f64)
            .collect();
        for p in 0..hw {
            for q in 0..hw {
                if energy[p] > energy[q] + 1e-12 {
                    ensure!(
                        a.weights()[p] >= a.weights()[q],
                        "case {case}: order of pixels {p}, {q} flipped"
                    );
                }
            }
        }

        // An all-ones map must reproduce the attention-free detector bit for bit.
        let g = Geometry {
            channels: c,
            height: h.max(4),
            width: w.max(4),
        };
        if !det_cache.iter().any(|(dg, _, _)| *dg == g) {
            det_cache.push((g, toy_detector(true, g, 7), toy_detector(false, g, 7)));
        }
        let (_, with, without) = det_cache.iter().find(|(dg, _, _)| *dg == g).unwrap();
        let inputs = Tensor::randn(vec![2, c, g.height, g.width], 1.0, &mut r);
        let maps = vec![AttentionMap::identity(g.height, g.width, 1); 2];
        let on = with
            .forward(&DetectorBatch {
                inputs: inputs.clone(),
                maps: Some(maps),
                labels: vec![0.0, 1.0],
            })
            .unwrap();
        let off = without
            .forward(&DetectorBatch {
                inputs,
                maps: None,
                labels: vec![0.0, 1.0],
            })
            .unwrap();
        ensure!(on == off, "case {case}: identity modulation changed the output");
    }
    ensure!(
        general_scale_err <= 1e-12,
        "arbitrary scale error {general_scale_err:e}"
    );
    let t = within(Duration::from_secs(10), start)?;
    Ok(format!(
        "power-of-two scales bit-exact, arbitrary scales within {general_scale_err:.1e}; {t}"
    ))
}

// ---------------------------------------------------------------- 4

/// Largest per-tensor `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, 1e-4)` over every parameter.
fn fd_check(params: &mut ParamStore, loss: impl Fn(&ParamStore) -> f64, analytic: &[Tensor]) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        let mut diff = 0.0;
        let (mut na, mut nf) = (0.0, 0.0);
        for i in 0..params.tensors_mut()[ti].len() {
            let orig = params.tensors_mut()[ti].data()[i];
            params.tensors_mut()[ti].data_mut()[i] = orig + h;
            let up = loss(params);
            params.tensors_mut()[ti].data_mut()[i] = orig - h;
            let down = loss(params);
            params.tensors_mut()[ti].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad.data()[i];
            diff += (fd - an) * (fd - an);
            na += an * an;
            nf += fd * fd;
        }
        // Tensors whose gradient vanishes (biases cancelled by a following
        // normalisation) leave only rounding noise; compare those absolutely.
        let scale = na.sqrt().max(nf.sqrt()).max(1e-4);
        worst = worst.max(diff.sqrt() / scale);
    }
    worst
}

fn gradient_checks() -> Check {
    let start = Instant::now();
    let geometry = Geometry::square(1, 8);
    let mut r = rng::stream(14, "gradients");

    let sched = NoiseSchedule::default_linear(50).unwrap();
    let cfg = UNetConfig {
        geometry,
        base_width: 2,
        channel_mults: vec![1, 2],
        time_embed_dim: 4,
        groups: 2,
        learned_variance: false,
    };
    let mut net = EpsilonNetwork::new(cfg, sched.clone(), 3).unwrap();
    for t in net.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * normal(&mut r);
        }
    }
    let net_params = net.params().num_scalars();
    let x0 = Tensor::randn(vec![2, 1, 8, 8], 0.5, &mut r);
    let eps = Tensor::randn(vec![2, 1, 8, 8], 1.0, &mut r);
    let ts = [3usize, 41];
    let mut xt = x0.clone();
    for (n, &t) in ts.iter().enumerate() {
        let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        for i in 0..64 {
            xt.data_mut()[n * 64 + i] = a * x0.data()[n * 64 + i] + b * eps.data()[n * 64 + i];
        }
    }
    let denoise = |net: &EpsilonNetwork, store: &ParamStore| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new(store);
        let x = tape.input(xt.clone());
        let pred = net.forward(&mut tape, x, &ts);
        let l = tape.mse(pred, eps.clone());
        (tape.value(l).data()[0], tape.backward(l).dense(store))
    };
    let (_, grads) = denoise(&net, net.params());
    let mut store = net.params().clone();
    let net_err = fd_check(&mut store, |p| denoise(&net, p).0, &grads);

    let det = toy_detector(true, geometry, 9);
    let det_params = det.params().num_scalars();
    let maps: Vec<AttentionMap> = (0..3)
        .map(|_| attention_from_values(&Tensor::randn(vec![1, 8, 8], 1.0, &mut r), 1).unwrap())
        .collect();
    let batch = DetectorBatch {
        inputs: Tensor::randn(vec![3, 1, 8, 8], 1.0, &mut r),
        maps: Some(maps),
        labels: vec![0.0, 1.0, 1.0],
    };
    let (_, det_grads) = det.loss_and_grads(&batch).unwrap();
    let mut det_store = det.params().clone();
    let det_err = fd_check(
        &mut det_store,
        |p| {
            let mut d = det.clone();
            d.params_mut().load_from(p).unwrap();
            d.loss_and_grads(&batch).unwrap().0
        },
        &det_grads,
    );

    ensure!(
        net_params <= 5000 && det_params <= 5000,
        "toy networks too large: {net_params}, {det_params}"
    );
    ensure!(net_err < 1e-4, "ε-network relative gradient error {net_err:e}");
    ensure!(det_err < 1e-4, "detector relative gradient error {det_err:e}");
    let t = within(Duration::from_secs(120), start)?;
    Ok(format!(
        "ε-network ({net_params} params) {net_err:.1e}, detector ({det_params} params) {det_err:.1e}; {t}"
    ))
}

// ---------------------------------------------------------------- 5–9

struct Pipeline {
    root: PathBuf,
    cache: PathBuf,
}

impl Pipeline {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn p(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn anl(&self, args: &[String]) -> Result<(), String> {
        let mut argv = vec!["anl".to_string()];
        argv.extend_from_slice(args);
        eprintln!("acceptance: anl {}", args.join(" "));
        match anl_cli::run(&argv) {
            0 => Ok(()),
            code => Err(format!("`anl {}` exited with {code}", args.join(" "))),
        }
    }

    fn json(&self, rel: &str) -> Result<Value, String> {
        let path = self.path(rel);
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn summary(&self, out: &str, command: &str) -> Result<Value, String> {
        Ok(self.json(&format!("{out}/{command}.run.json"))?["summary"].clone())
    }

    fn manifests(&self, names: &[&str]) -> Vec<String> {
        names
            .iter()
            .flat_map(|n| ["--manifest".to_string(), self.p(&format!("{n}/manifest.jsonl"))])
            .collect()
    }

    fn probe_args(&self) -> Vec<String> {
        vec![
            "--checkpoint".into(),
            self.p("ddpm-a/epsilon.ckpt"),
            "--cache-dir".into(),
            self.cache.to_string_lossy().into_owned(),
        ]
    }

    fn stage(&self, head: &[&str], out: &str, manifests: &[&str], probe: bool) -> Result<(), String> {
        let mut args: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        args.extend(["--out".to_string(), self.p(out)]);
        args.extend(self.manifests(manifests));
        if probe {
            args.extend(self.probe_args());
        }
        self.anl(&args)
    }
}

/// Generators: `ddpm-a` is the main desk model; `ddpm-b` and `ddpm-c` differ
/// in seed and are trained for fewer epochs, which is enough for distinct
/// fake distributions in the cross-model matrix.
fn build_generators(p: &Pipeline) -> Result<(), String> {
    p.anl(&[
        "gen-corpus".into(),
        "--out".into(),
        p.p("corpus"),
        "--n".into(),
        "2000".into(),
    ])?;
    for (name, seed, epochs, n) in [
        ("a", "0", "30", "1000"),
        ("b", "1", "10", "300"),
        ("c", "2", "10", "300"),
    ] {
        let ddpm = format!("ddpm-{name}");
        p.stage(
            &["train-diffusion", "--seed", seed, "--epochs", epochs],
            &ddpm,
            &["corpus"],
            false,
        )?;
        p.anl(&[
            "sample-fakes".into(),
            "--checkpoint".into(),
            p.p(&format!("{ddpm}/epsilon.ckpt")),
            "--out".into(),
            p.p(&format!("fakes-{name}")),
            "--n".into(),
            n.into(),
            "--generator".into(),
            ddpm,
            "--seed".into(),
            seed.into(),
        ])?;
    }
    p.stage(&["probe"], "probe", &["corpus", "fakes-a", "fakes-b", "fakes-c"], true)
}

fn pipeline() -> Result<&'static Pipeline, String> {
    static P: OnceLock<Result<Pipeline, String>> = OnceLock::new();
    P.get_or_init(|| {
        let root = std::env::var_os("ANL_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
        fs::create_dir_all(&root).map_err(|e| e.to_string())?;
        let p = Pipeline {
            cache: root.join("cache"),
            root,
        };
        build_generators(&p)?;
        Ok(p)
    })
    .as_ref()
    .map_err(|e| format!("pipeline: {e}"))
}

fn end_to_end() -> Check {
    let p = pipeline()?;
    p.stage(&["train-detector"], "detector", &["corpus", "fakes-a"], true)?;
    let s = p.summary("detector", "train-detector")?;
    let (acc, ap) = (
        s["test_acc"].as_f64().unwrap_or(0.0),
        s["test_ap"].as_f64().unwrap_or(0.0),
    );
    let train = p.json("ddpm-a/train-diffusion.run.json")?;
    let detail = format!(
        "held-out ACC {acc:.4}, AP {ap:.4} (ε-network trained in {:.0} s)",
        train["wall_time_s"].as_f64().unwrap_or(f64::NAN)
    );
    if acc < 0.85 || ap < 0.90 {
        // Same run at a larger step size separates the architecture from the
        // step budget; informational only.
        p.stage(
            &["train-detector", "--lr", "1e-3"],
            "detector-lr1e-3",
            &["corpus", "fakes-a"],
            true,
        )?;
        let f = p.summary("detector-lr1e-3", "train-detector")?;
        return Err(format!(
            "{detail}; need ACC ≥ 0.85 and AP ≥ 0.90 (at lr 1e-3: ACC {:.4}, AP {:.4})",
            f["test_acc"].as_f64().unwrap_or(f64::NAN),
            f["test_ap"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    Ok(detail)
}

fn psd_difference() -> Check {
    let p = pipeline()?;
    p.stage(&["analyze-psd"], "psd", &["corpus", "fakes-a"], true)?;
    let s = p.json("psd/psd_summary.json")?;
    let (n_real, n_fake) = (s["n_real"].as_u64().unwrap_or(0), s["n_fake"].as_u64().unwrap_or(0));
    let (real, fake) = (
        s["mean_flatness_real"].as_f64().unwrap_or(f64::NAN),
        s["mean_flatness_fake"].as_f64().unwrap_or(f64::NAN),
    );
    let pv = s["real_less_flat"]["p_value"].as_f64().unwrap_or(1.0);
    let detail = format!("mid-band CV real {real:.4} vs fake {fake:.4}, one-sided p = {pv:.2e}, n = {n_real}/{n_fake}");
    ensure!(n_real >= 100 && n_fake >= 100, "{detail}; too few images");
    ensure!(pv < 0.01 && fake < real, "{detail}");
    Ok(detail)
}

fn timestep_trend() -> Check {
    let p = pipeline()?;
    p.stage(
        &["sweep-timestep", "--t-values", "1,5,20"],
        "sweep",
        &["corpus", "fakes-a"],
        true,
    )?;
    let s = p.summary("sweep", "sweep-timestep")?;
    let points = p.json("sweep/sweep.json")?;
    let accs: Vec<String> = points
        .as_array()
        .into_iter()
        .flatten()
        .map(|pt| {
            format!(
                "t={}: {:.4}",
                pt["timestep"],
                pt["matrix"]["mean_acc"].as_f64().unwrap_or(f64::NAN)
            )
        })
        .collect();
    let values: Vec<f64> = points
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|pt| pt["matrix"]["mean_acc"].as_f64())
        .collect();
    let detail = format!("mean ACC {}", accs.join(", "));
    // A sweep where every t ties, or whose winner is no better than always
    // answering the majority class, says nothing about the trend.
    ensure!(values.iter().any(|v| *v != values[0]), "{detail}; all timesteps tie");
    let cell = &points[0]["matrix"]["cells"][0];
    let (nr, nf) = (
        cell["n_real"].as_f64().unwrap_or(0.0),
        cell["n_fake"].as_f64().unwrap_or(0.0),
    );
    let majority = nr.max(nf) / (nr + nf);
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure!(
        best > majority,
        "{detail}; best ACC does not beat the constant baseline {majority:.4}"
    );
    ensure!(s["best_t"] == 1, "{detail}; best t = {}", s["best_t"]);
    Ok(detail)
}

fn cross_model_harness() -> Check {
    let p = pipeline()?;
    let sets = ["corpus", "fakes-a", "fakes-b", "fakes-c"];
    p.stage(&["eval", "--protocol", "cross_model"], "cross-model", &sets, true)?;
    let dir = p.path("cross-model");
    let m = EvalMatrix::from_json(&fs::read_to_string(dir.join("matrix.json")).unwrap()).map_err(|e| e.to_string())?;
    ensure!(m.rows() == 3 && m.cols() == 3, "matrix is {}×{}", m.rows(), m.cols());
    ensure!(
        m.cells.iter().all(Option::is_some),
        "absent cells in a complete cross-model run"
    );

    // Test sets recomputed from the manifests; training hashes as recorded.
    let parts: Vec<DatasetManifest> = sets
        .iter()
        .map(|s| DatasetManifest::read(&p.path(&format!("{s}/manifest.jsonl"))).unwrap())
        .collect();
    let merged = DatasetManifest::merge(&parts.iter().collect::<Vec<_>>()).unwrap();
    let bundle = split_manifest(&merged, Protocol::CrossModel, 0).unwrap();
    let mut test: HashSet<String> = bundle
        .reals(Split::Test)
        .iter()
        .map(|r| r.content_hash.clone())
        .collect();
    for g in &m.test_generators {
        test.extend(bundle.fakes(g, Split::Test).iter().map(|r| r.content_hash.clone()));
    }
    for g in &m.train_generators {
        let text =
            fs::read_to_string(dir.join(format!("detectors/{g}.train_hashes.txt"))).map_err(|e| e.to_string())?;
        let train: Vec<&str> = text.lines().collect();
        ensure!(!train.is_empty(), "row {g} recorded no training hashes");
        ensure!(
            train.iter().all(|h| !test.contains(*h)),
            "row {g} trained on a test image"
        );
    }

    for metric in [Metric::Acc, Metric::Ap] {
        let v: Vec<f64> = m
            .cells
            .iter()
            .flatten()
            .map(|c| if metric == Metric::Acc { c.acc } else { c.ap })
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let stored = if metric == Metric::Acc { m.mean_acc } else { m.mean_ap };
        ensure!(
            (stored.unwrap() - mean).abs() <= 1e-12,
            "{metric:?} mean {stored:?} vs {mean}"
        );
    }

    ensure!(
        EvalMatrix::read_heatmap(&dir.join("acc_heatmap.png")).unwrap() == m,
        "heatmap round trip differs"
    );
    ensure!(
        EvalMatrix::from_json(&m.to_json().unwrap()).unwrap() == m,
        "JSON round trip differs"
    );
    for (metric, file) in [(Metric::Acc, "acc.csv"), (Metric::Ap, "ap.csv")] {
        let (rows, cols, values) = parse_matrix_csv(&fs::read_to_string(dir.join(file)).unwrap()).unwrap();
        ensure!(
            rows == m.train_generators && cols == m.test_generators,
            "{file} headers differ"
        );
        ensure!(values == m.values(metric), "{file} values differ");
    }
    Ok(format!(
        "3×3 matrix, mean ACC {:.4}, mean AP {:.4}; hashes disjoint; CSV/JSON/heatmap lossless",
        m.mean_acc.unwrap(),
        m.mean_ap.unwrap()
    ))
}

fn ablation_harness() -> Check {
    let p = pipeline()?;
    p.stage(
        &["eval", "--ablation", "true"],
        "ablation",
        &["corpus", "fakes-a"],
        true,
    )?;
    let rows = p.json("ablation/ablation.json")?;
    let variants: Vec<&str> = rows
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|r| r["variant"].as_str())
        .collect();
    ensure!(variants == ["anl-without-attention", "anl"], "variants {variants:?}");
    p.anl(&[
        "report".into(),
        "--input".into(),
        p.p("ablation"),
        "--out".into(),
        p.p("report"),
    ])?;
    let md = fs::read_to_string(p.path("report/report.md")).map_err(|e| e.to_string())?;
    ensure!(
        md.contains("| anl |") && md.contains("| anl-without-attention |"),
        "report lacks the paired rows"
    );
    let acc = |i: usize| rows[i]["matrix"]["mean_acc"].as_f64().unwrap_or(f64::NAN);
    Ok(format!(
        "paired rows rendered; ACC without {:.4}, with {:.4} (not asserted)",
        acc(0),
        acc(1)
    ))
}

/// Criteria measured to fail at the prescribed settings. They still print
/// `FAIL` with their numbers; the suite only errors if their status changes
/// or another criterion fails.
const KNOWN_FAILURES: [usize; 2] = [5, 7];

fn main() {
    if std::env::var_os("RUST_LOG").is_none() {
        std::env::set_var("RUST_LOG", "warn");
    }
    let criteria: [Criterion; 9] = [
        ("schedule and forward process", schedule_suite),
        ("loss and metric oracles", loss_and_metric_oracles),
        ("attention properties", attention_properties),
        ("gradient checks", gradient_checks),
        ("desk-scale end to end", end_to_end),
        ("noise spectrum real vs fake", psd_difference),
        ("timestep sweep favours t = 1", timestep_trend),
        ("cross-model harness", cross_model_harness),
        ("ablation harness", ablation_harness),
    ];
    let only: Option<Vec<usize>> = std::env::args()
        .skip(1)
        .find(|a| !a.starts_with('-'))
        .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect());
    let mut unexpected = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let known = KNOWN_FAILURES.contains(&id);
        match &outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail}"),
            Err(detail) => println!(
                "FAIL {id} {name}: {detail}{}",
                if known { " [known failure]" } else { "" }
            ),
        }
        if outcome.is_ok() == known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
