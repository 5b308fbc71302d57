//! Acceptance checks on the toy backend. Prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use repe_core::actstore::{self, ActivationSet, RecordMeta};
use repe_core::corpus::{self, TemplateBank};
use repe_core::intervene::{self, Backend, Mode, Partition, ScanPlan, SteeringConfig, ToyBackend};
use repe_core::linalg::{cosine, dot};
use repe_core::pipeline::{self, FactorExtraction, PipelineConfig};
use repe_core::purify;
use repe_core::rng::stream;
use repe_core::toynet;
use repe_core::weighting::{self, LayerSweep};
use repe_core::{Factor, InterventionScan, ToyModel, VectorBundle};

type Outcome = Result<String, String>;

struct Board {
    failed: usize,
}

impl Board {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Duration, budget_s: u64, what: &str) -> Result<(), String> {
    ensure(t < Duration::from_secs(budget_s), || format!("{what} took {t:.2?}, budget {budget_s} s"))
}

/// Everything the later criteria share, built once.
struct Fixture {
    model: ToyModel,
    extractions: Vec<FactorExtraction>,
    extraction_time: Duration,
    raw: VectorBundle,
    purified: VectorBundle,
    vignettes: ActivationSet,
}

fn fixture(cfg: &PipelineConfig) -> Result<Fixture, String> {
    let model = toynet::init_model(cfg.toy.clone()).map_err(|e| e.to_string())?;
    let bank = TemplateBank::builtin();
    let t0 = Instant::now();
    let extractions = Factor::ALL
        .iter()
        .map(|&f| pipeline::extract_factor(&model, &bank, f, cfg))
        .collect::<repe_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let raw = pipeline::raw_bundle(&model.model_id(), &extractions).map_err(|e| e.to_string())?;
    let extraction_time = t0.elapsed();
    let (purified, _) = purify::purify_bundle(&raw).map_err(|e| e.to_string())?;
    let vs = corpus::fill_templates(&bank, &cfg.family_ids(&bank), cfg.variants_per_family, cfg.corpus_seed())
        .map_err(|e| e.to_string())?;
    let vignettes = toynet::capture_vignettes(&model, &vs, cfg.capture_seed()).map_err(|e| e.to_string())?;
    Ok(Fixture {
        model,
        extractions,
        extraction_time,
        raw,
        purified,
        vignettes,
    })
}

fn planted_recovery(fx: &Fixture) -> Outcome {
    within(fx.extraction_time, 30, "extraction")?;
    let mature = fx.model.layers_with_gain(0.5);
    let silent: Vec<usize> = (0..fx.model.num_states())
        .filter(|&l| fx.model.cumulative_gain(l) == 0.0)
        .collect();
    ensure(!mature.is_empty() && !silent.is_empty(), || "no mature or no zero-gain layers".into())?;
    let mut min_cos = f64::INFINITY;
    let mut min_acc = f64::INFINITY;
    let mut max_silent = 0.0f64;
    for e in &fx.extractions {
        ensure(e.kept >= 150, || format!("{}: only {} of {} pairs kept", e.factor, e.kept, e.generated))?;
        for &l in &mature {
            // The jealousy concept has no single planted axis; its oracle is
            // the expected mean difference under the toy's appraisal.
            let truth = match e.factor {
                Factor::Jealousy => fx.model.expected_concept_direction(e.factor, l),
                f => fx.model.planted(f, l).to_vec(),
            };
            let c = cosine(fx.raw.get(e.factor, l).map_err(|x| x.to_string())?, &truth);
            let a = e.scan.mean_accuracy[l];
            ensure(c >= 0.95, || format!("{} layer {l}: cosine {c:.4}", e.factor))?;
            ensure(a >= 0.95, || format!("{} layer {l}: held-out accuracy {a:.4}", e.factor))?;
            min_cos = min_cos.min(c);
            min_acc = min_acc.min(a);
        }
        for &l in &silent {
            let a = e.scan.mean_accuracy[l];
            ensure(a <= 0.6, || format!("{} zero-gain layer {l}: accuracy {a:.4}", e.factor))?;
            max_silent = max_silent.max(a);
        }
    }
    Ok(format!(
        "mature layers {:?}-{:?}: min cos {min_cos:.4}, min acc {min_acc:.4}; zero-gain max acc {max_silent:.3}; {:.2?}",
        mature.first().unwrap(),
        mature.last().unwrap(),
        fx.extraction_time
    ))
}

fn purification_geometry(fx: &Fixture) -> Outcome {
    let (_, details) = purify::purify_bundle(&fx.raw).map_err(|e| e.to_string())?;
    ensure(details.len() == 3 * fx.model.num_states(), || {
        format!("{} purified directions, expected one per predictor and layer", details.len())
    })?;
    let mut worst_conf = 0.0f64;
    for p in &details {
        for &c in &p.confounders {
            let v = fx.raw.get(c, p.layer).map_err(|e| e.to_string())?;
            worst_conf = worst_conf.max(dot(&p.direction, v).abs());
        }
    }
    ensure(worst_conf <= 1e-6, || format!("max |z.v_o| = {worst_conf:e}"))?;
    // Knockout every direction of the bundle out of real hidden states.
    let mut worst_ko = 0.0f64;
    let records: Vec<&RecordMeta> = fx.vignettes.records().iter().step_by(37).collect();
    for rec in &records {
        let states = fx.model.encode(&toynet::Stimulus::for_record(rec, toynet::Frame::Jealousy, 1));
        for f in fx.purified.factors() {
            for l in fx.purified.layers_of(f) {
                let dir = fx.purified.get(f, l).map_err(|e| e.to_string())?;
                let k = intervene::knockout(&states[l], dir).map_err(|e| e.to_string())?;
                worst_ko = worst_ko.max(dot(&k, dir).abs());
            }
        }
    }
    ensure(worst_ko <= 1e-9, || format!("max |knockout(h).d| = {worst_ko:e}"))?;
    Ok(format!(
        "{} directions, max |z.v_o| {worst_conf:.1e}, max knockout residue {worst_ko:.1e} over {} states each",
        details.len(),
        records.len()
    ))
}

/// Gauss-Jordan with partial pivoting on the normal equations.
fn normal_equations(y: &[f64], xs: &[&[f64]]) -> Vec<f64> {
    let p = xs.len() + 1;
    let col = |j: usize, i: usize| if j == 0 { 1.0 } else { xs[j - 1][i] };
    let mut a = vec![vec![0.0; p + 1]; p];
    for r in 0..p {
        for c in 0..p {
            a[r][c] = (0..y.len()).map(|i| col(r, i) * col(c, i)).sum();
        }
        a[r][p] = (0..y.len()).map(|i| col(r, i) * y[i]).sum();
    }
    for k in 0..p {
        let piv = (k..p).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, piv);
        for r in 0..p {
            if r != k {
                let m = a[r][k] / a[k][k];
                for c in k..=p {
                    a[r][c] -= m * a[k][c];
                }
            }
        }
    }
    (0..p).map(|k| a[k][p] / a[k][k]).collect()
}

fn regression_oracle(fx: &Fixture, sweep: &LayerSweep, sweep_time: Duration) -> Outcome {
    let t0 = Instant::now();
    let mut r = stream(2024, &[]);
    let n = 300;
    let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| r.sample(StandardNormal)).collect()).collect();
    let truth = [0.6, 0.8, 0.0];
    let y: Vec<f64> = (0..n).map(|i| (0..3).map(|j| truth[j] * cols[j][i]).sum()).collect();
    let xs: Vec<(Factor, &[f64])> = Factor::PREDICTORS.iter().zip(&cols).map(|(&f, c)| (f, c.as_slice())).collect();
    let fit = weighting::ols_fit(&y, &xs).map_err(|e| e.to_string())?;
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    let oracle = normal_equations(&y, &refs);
    let gap = (0..3).map(|j| (fit.beta[j] - oracle[j + 1]).abs()).fold(0.0, f64::max);
    ensure(gap <= 1e-6, || format!("beta differs from normal equations by {gap:e}"))?;
    ensure((0..3).all(|j| (fit.beta[j] - truth[j]).abs() <= 1e-6), || format!("beta {:?}", fit.beta))?;
    ensure(fit.r2 >= 1.0 - 1e-9, || format!("R2 {}", fit.r2))?;
    let elapsed = t0.elapsed() + sweep_time;
    within(elapsed, 10, "regression")?;

    let mature = fx.model.layers_with_gain(0.5);
    for &l in &mature {
        let rep = sweep.at(l).ok_or_else(|| format!("no fit at layer {l}"))?;
        let b = |f| rep.fit.beta_of(f).map_err(|e| e.to_string());
        let p = |f| rep.fit.p_of(f).map_err(|e| e.to_string());
        let (bs, br, bw) = (b(Factor::Superiority)?, b(Factor::Relevance)?, b(Factor::Weekday)?);
        ensure((-0.05..=0.05).contains(&bw), || format!("layer {l}: beta_wk {bw:.4}"))?;
        ensure(bs > 0.0 && p(Factor::Superiority)? < 0.05, || format!("layer {l}: beta_sup {bs:.4}"))?;
        ensure(br > 0.0 && p(Factor::Relevance)? < 0.05, || format!("layer {l}: beta_rel {br:.4}"))?;
        ensure(br > bs, || format!("layer {l}: beta_rel {br:.4} <= beta_sup {bs:.4}"))?;
    }
    let last = sweep.at(*mature.last().unwrap()).unwrap();
    Ok(format!(
        "synthetic gap {gap:.1e}, R2 {:.12}; layer {} beta (sup, rel, wk) = ({:.3}, {:.3}, {:.3}); {elapsed:.2?}",
        fit.r2, last.layer, last.fit.beta[0], last.fit.beta[1], last.fit.beta[2]
    ))
}

fn pearson_sanity(fx: &Fixture, sweep: &LayerSweep) -> Outcome {
    let mut lo = f64::INFINITY;
    for l in fx.model.layers_with_gain(0.5) {
        let r = sweep.at(l).ok_or_else(|| format!("no fit at layer {l}"))?.pearson_r;
        ensure(r >= 0.8, || format!("layer {l}: r = {r:.4}"))?;
        lo = lo.min(r);
    }
    Ok(format!("min r over mature layers {lo:.4}"))
}

fn causal_steering(fx: &Fixture, cfg: &PipelineConfig) -> Outcome {
    let t0 = Instant::now();
    let backend = ToyBackend::new(&fx.model, cfg.capture_seed());
    let records = fx.vignettes.records();
    let partition: Partition = intervene::partition_baseline(&backend, records).map_err(|e| e.to_string())?;
    let plan = ScanPlan {
        alpha: cfg.alpha,
        ..ScanPlan::for_family("toy")
    };
    let scan: InterventionScan =
        intervene::layer_intervention_scan(&backend, records, &partition, &fx.purified, &plan).map_err(|e| e.to_string())?;
    ensure(scan.failures.is_empty(), || format!("{} failed cells", scan.failures.len()))?;
    let mature = fx.model.layers_with_gain(0.5);
    let cell = |f, l, m| scan.get(f, l, m).map(|c| c.mean_delta).ok_or_else(|| format!("missing cell {f} {l}"));
    let (mut min_up, mut max_down, mut wk) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &l in &mature {
        for f in Factor::ANTECEDENTS {
            let (up, down) = (cell(f, l, Mode::Stimulate)?, cell(f, l, Mode::Suppress)?);
            ensure(up >= 0.5, || format!("{f} layer {l}: stimulation {up:.4}"))?;
            ensure(down <= -0.5, || format!("{f} layer {l}: suppression {down:.4}"))?;
            min_up = min_up.min(up);
            max_down = max_down.max(down);
        }
        for m in Mode::ALL {
            let d = cell(Factor::Weekday, l, m)?;
            ensure(d.abs() <= 0.05, || format!("weekday layer {l} {m:?}: {d:.4}"))?;
            wk = wk.max(d.abs());
        }
    }

    // alpha = 0 must reproduce the baseline bit for bit.
    for &i in partition.low.iter().chain(&partition.high) {
        let rec = &records[i];
        let base = backend.baseline_score(rec).map_err(|e| e.to_string())?;
        for f in Factor::PREDICTORS {
            let l = mature[0];
            let dir = fx.purified.get(f, l).map_err(|e| e.to_string())?;
            let edited = backend
                .edited_score(rec, l, &|h| intervene::steer(h, dir, 0.0, Mode::Stimulate))
                .map_err(|e| e.to_string())?;
            ensure(edited.to_bits() == base.to_bits(), || {
                format!("{}: alpha 0 moved {base} to {edited}", rec.record_id)
            })?;
        }
    }

    let grid = [0.5, 1.0, 2.0, 3.0, 4.0];
    let mut min_step = f64::INFINITY;
    for &l in &mature {
        for f in Factor::ANTECEDENTS {
            let base = SteeringConfig {
                alpha: 1.0,
                mode: Mode::Stimulate,
                layer: l,
                factor: f,
            };
            let dir = fx.purified.get(f, l).map_err(|e| e.to_string())?;
            let pts = intervene::alpha_sweep(&backend, records, &partition, &base, dir, &grid).map_err(|e| e.to_string())?;
            for w in pts.windows(2) {
                ensure(w[1].1 > w[0].1, || format!("{f} layer {l}: delta not increasing {pts:?}"))?;
                min_step = min_step.min(w[1].1 - w[0].1);
            }
        }
    }
    let elapsed = t0.elapsed();
    within(elapsed, 60, "steering")?;
    Ok(format!(
        "min stim {min_up:.3}, max supp {max_down:.3}, max |wk| {wk:.4}, alpha 0 exact on {} records, min alpha step {min_step:.1e}; {elapsed:.2?}",
        partition.low.len() + partition.high.len()
    ))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut digests = Vec::new();
    for d in &dirs {
        let out = d.path().to_str().unwrap().to_string();
        let code = repe_cli::run(["repe", "all", "-q", "--out", out.as_str()], Vec::new());
        ensure(code == 0, || format!("`all` exited {code}"))?;
        let m = repe_cli::manifest::RunManifest::load(d.path()).map_err(|e| e.to_string())?.unwrap();
        ensure(repe_cli::manifest::audit(d.path()).map_err(|e| e.to_string())?.is_empty(), || "orphan outputs".into())?;
        digests.push((m.report_digest, m.artifacts));
    }
    ensure(digests[0] == digests[1], || "report digests differ between identical runs".into())?;

    for trial in 0..20u64 {
        let mut r = stream(77, &[trial]);
        let (n, layers, d) = (r.random_range(1..40), r.random_range(1..14), r.random_range(1..65));
        let records: Vec<RecordMeta> = (0..n)
            .map(|i| {
                let mut m = RecordMeta::new(format!("r{i}"));
                m.ground_truth = Some(corpus::assign_ground_truth(r.random_range(0..2), r.random_range(0..2)));
                m
            })
            .collect();
        let tensor: Vec<f32> = (0..n * layers * d).map(|_| r.sample::<f32, _>(StandardNormal) * 1e3).collect();
        let set = ActivationSet::new(records, layers, d, tensor, format!("m{trial}"), "").map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        actstore::save_acf(&set, &mut buf).map_err(|e| e.to_string())?;
        let back = actstore::load_acf(&mut buf.as_slice()).map_err(|e| e.to_string())?;
        let same = back.records() == set.records()
            && back.tensor().iter().map(|x| x.to_bits()).eq(set.tensor().iter().map(|x| x.to_bits()));
        ensure(same, || format!("round trip {trial} not bit-exact"))?;
    }
    Ok(format!("report digest {} twice; 20 ACF round trips bit-exact", &digests[0].0[..16]))
}

fn label_map() -> Outcome {
    let expected = [((1, 1), 5), ((1, 0), 2), ((0, 1), 1), ((0, 0), 1)];
    for ((s, r), gt) in expected {
        let got = corpus::assign_ground_truth(s, r);
        ensure(got == gt, || format!("({s},{r}) -> {got}, expected {gt}"))?;
    }
    // Generated vignettes for all eight label combinations: weekday never
    // changes the ground truth.
    let bank = TemplateBank::builtin();
    let vs = corpus::fill_templates(&bank, &bank.family_ids()[..1], 1, 0).map_err(|e| e.to_string())?;
    ensure(vs.len() == 8, || format!("{} vignettes, expected 8", vs.len()))?;
    for v in &vs {
        let want = expected.iter().find(|((s, r), _)| (*s, *r) == (v.sup, v.rel)).unwrap().1;
        ensure(v.jealousy_gt == want, || format!("{}: ground truth {}", v.vignette_id, v.jealousy_gt))?;
        let twin = vs
            .iter()
            .find(|w| (w.sup, w.rel) == (v.sup, v.rel) && w.weekday != v.weekday)
            .unwrap();
        ensure(twin.jealousy_gt == v.jealousy_gt, || format!("weekday changes {}", v.vignette_id))?;
    }
    Ok("4 mappings exact; 8 label cases weekday-invariant".into())
}

fn main() {
    let cfg = PipelineConfig::default();
    let mut board = Board { failed: 0 };
    let fx = fixture(&cfg);
    let sweep = fx.as_ref().ok().map(|fx| {
        let t0 = Instant::now();
        let s = weighting::layer_sweep(&fx.vignettes, &fx.raw, &fx.purified, None);
        (s, t0.elapsed())
    });
    let need = |what: &str| -> Result<&Fixture, String> {
        fx.as_ref().map_err(|e| format!("{what}: toy fixture failed: {e}"))
    };
    board.check("planted-direction recovery", || planted_recovery(need("recovery")?));
    board.check("purification geometry", || purification_geometry(need("purification")?));
    board.check("regression oracle", || {
        let fx = need("regression")?;
        let (s, t) = sweep.as_ref().unwrap();
        regression_oracle(fx, s.as_ref().map_err(|e| e.to_string())?, *t)
    });
    board.check("pearson sanity", || {
        let fx = need("pearson")?;
        pearson_sanity(fx, sweep.as_ref().unwrap().0.as_ref().map_err(|e| e.to_string())?)
    });
    board.check("causal steering", || causal_steering(need("steering")?, &cfg));
    board.check("determinism and format", determinism);
    board.check("label-map conformance", label_map);
    if board.failed > 0 {
        println!("{} acceptance criteria failed", board.failed);
        std::process::exit(1);
    }
}
