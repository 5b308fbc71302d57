//! One function per subcommand. Each reads its inputs through the manifest
//! and writes its outputs through it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use repe_core::actstore::{self, ActivationSet};
use repe_core::corpus;
use repe_core::extract::{self, LayerScanReport};
use repe_core::intervene::{self, Backend, InterventionScan, Mode, NoHook, ScanPlan, SteeringConfig, ToyBackend};
use repe_core::linalg::dot;
use repe_core::pipeline::{self, PipelineConfig};
use repe_core::purify;
use repe_core::report;
use repe_core::toynet;
use repe_core::weighting::{self, LayerSweep};
use repe_core::{Error as CoreError, Factor, VectorBundle};

use crate::config::{self, BackendKind, RunConfig};
use crate::exit::Failure;
use crate::manifest::{sha256_hex, Workspace};

pub const VIGNETTES: &str = "corpus/vignettes.jsonl";
pub const VIGNETTE_ACF: &str = "acf/vignettes.acf";
pub const RAW: &str = "vectors/raw.cvb";
pub const PURIFIED: &str = "vectors/purified.cvb";
pub const SCAN_JSON: &str = "reports/scan.json";
pub const REGRESSION_JSON: &str = "reports/regression.json";
pub const STEERING_JSON: &str = "reports/steering.json";
pub const SUMMARY_JSON: &str = "reports/summary.json";

pub fn pairs_path(f: Factor) -> String {
    format!("corpus/pairs-{f}.jsonl")
}

pub fn acf_path(f: Factor) -> String {
    format!("acf/{f}.acf")
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub pipe: PipelineConfig,
    pub ws: Workspace,
    pub quiet: bool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, fresh: bool, quiet: bool) -> Result<Self> {
        let ws = Workspace::open(&cfg, fresh)?;
        Ok(Ctx {
            pipe: cfg.pipeline(),
            cfg,
            ws,
            quiet,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn read_acf(path: &std::path::Path) -> Result<ActivationSet> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    Ok(actstore::load_acf(&mut r).with_context(|| format!("loading {}", path.display()))?)
}

fn acf_bytes(set: &ActivationSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    actstore::save_acf(set, &mut buf)?;
    Ok(buf)
}

fn read_bundle(path: &std::path::Path) -> Result<VectorBundle> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(VectorBundle::decode(&bytes).with_context(|| format!("decoding {}", path.display()))?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

/// Runs `f` for every factor on its own thread; results keep factor order.
fn per_factor<T: Send>(factors: &[Factor], f: impl Fn(Factor) -> Result<T> + Sync) -> Result<Vec<T>> {
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = factors.iter().map(|&fac| s.spawn(move || f(fac))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("worker panicked")))
            .collect()
    })
}

/// Values by layer index, NaN where a layer has none.
fn by_layer(n: usize, points: impl IntoIterator<Item = (usize, f64)>) -> Vec<f64> {
    let mut v = vec![f64::NAN; n];
    for (l, x) in points {
        if l < n {
            v[l] = x;
        }
    }
    v
}

pub fn gen(ctx: &mut Ctx) -> Result<()> {
    ctx.ws.begin("gen")?;
    let factors = ctx.cfg.factors.clone();
    let mut outputs: Vec<(String, Vec<u8>)> = Vec::new();
    if let Some(dir) = ctx.cfg.paths.corpus.clone() {
        ctx.log(format!("gen: importing corpus from {}", dir.display()));
        for &f in &factors {
            let name = format!("pairs-{f}.jsonl");
            let bytes = std::fs::read(dir.join(&name))
                .map_err(|e| Failure::missing(format!("{}: {e}", dir.join(&name).display())))?;
            corpus::load_pairs(bytes.as_slice()).with_context(|| format!("validating {name}"))?;
            outputs.push((pairs_path(f), bytes));
        }
        let bytes = std::fs::read(dir.join("vignettes.jsonl"))
            .map_err(|e| Failure::missing(format!("{}: {e}", dir.join("vignettes.jsonl").display())))?;
        corpus::load_vignettes(bytes.as_slice()).context("validating vignettes.jsonl")?;
        outputs.push((VIGNETTES.into(), bytes));
    } else {
        let bank = config::template_bank(ctx.cfg.paths.templates.as_deref())?;
        let seed = ctx.pipe.corpus_seed();
        for &f in &factors {
            let pairs = corpus::atomic_pairs(&bank, f, ctx.pipe.pairs_per_factor, seed)?;
            let mut bytes = Vec::new();
            corpus::save_jsonl(&pairs, &mut bytes)?;
            outputs.push((pairs_path(f), bytes));
        }
        let vignettes = corpus::fill_templates(&bank, &ctx.pipe.family_ids(&bank), ctx.pipe.variants_per_family, seed)?;
        let mut bytes = Vec::new();
        corpus::save_jsonl(&vignettes, &mut bytes)?;
        ctx.log(format!(
            "gen: {} pairs per factor, {} vignettes",
            ctx.pipe.pairs_per_factor,
            vignettes.len()
        ));
        outputs.push((VIGNETTES.into(), bytes));
    }
    for (rel, bytes) in outputs {
        let name = rel.trim_start_matches("corpus/").to_string();
        ctx.ws.note_corpus(&name, sha256_hex(&bytes));
        ctx.ws.write(&rel, &bytes)?;
    }
    ctx.ws.finish()
}

pub fn capture(ctx: &mut Ctx) -> Result<()> {
    ctx.ws.begin("capture")?;
    let factors = ctx.cfg.factors.clone();
    let mut csv = String::from("factor,generated,kept\n");
    let mut outputs: Vec<(String, Vec<u8>)> = Vec::new();
    match ctx.cfg.backend {
        BackendKind::Tap => {
            return Err(CoreError::HookUnavailable("the model-tap backend is not part of this build".into()).into())
        }
        BackendKind::Acf => {
            let dir = ctx.cfg.paths.acf_in.clone().expect("validated");
            let mut shape = None;
            let mut files: Vec<(String, String)> = factors.iter().map(|&f| (format!("{f}.acf"), acf_path(f))).collect();
            files.push(("vignettes.acf".into(), VIGNETTE_ACF.into()));
            for (name, rel) in files {
                let src = dir.join(&name);
                let bytes = std::fs::read(&src).map_err(|e| Failure::missing(format!("{}: {e}", src.display())))?;
                let set = actstore::load_acf(&mut bytes.as_slice()).with_context(|| format!("loading {}", src.display()))?;
                let s = (set.layers(), set.dim(), set.model_id().to_string());
                if shape.get_or_insert_with(|| s.clone()) != &s {
                    bail!("{} disagrees with the other captures on layers, width or model", src.display());
                }
                if let Some(f) = factors.iter().find(|f| format!("{f}.acf") == name) {
                    let n = set.pair_rows().len();
                    csv.push_str(&format!("{f},{n},{n}\n"));
                }
                outputs.push((rel, bytes));
            }
            ctx.log(format!("capture: imported {} activation files", outputs.len()));
        }
        BackendKind::Toy => {
            let model = toynet::init_model(ctx.pipe.toy.clone())?;
            let inputs: Vec<_> = factors
                .iter()
                .map(|&f| ctx.ws.require(&pairs_path(f), "gen"))
                .collect::<Result<_>>()?;
            let vpath = ctx.ws.require(VIGNETTES, "gen")?;
            let pipe = &ctx.pipe;
            let captured = per_factor(&factors, |f| {
                let path = &inputs[factors.iter().position(|&x| x == f).expect("listed")];
                let pairs = corpus::load_pairs(BufReader::new(File::open(path)?))?;
                let (set, kept) = pipeline::capture_consistent(&model, &pairs, f, pipe)?;
                Ok((pairs.len(), kept, acf_bytes(&set)?))
            })?;
            for (&f, (generated, kept, bytes)) in factors.iter().zip(captured) {
                csv.push_str(&format!("{f},{generated},{kept}\n"));
                ctx.log(format!("capture: {f} kept {kept}/{generated} pairs"));
                outputs.push((acf_path(f), bytes));
            }
            let vignettes = corpus::load_vignettes(BufReader::new(File::open(vpath)?))?;
            let set = toynet::capture_vignettes(&model, &vignettes, ctx.pipe.capture_seed())?;
            outputs.push((VIGNETTE_ACF.into(), acf_bytes(&set)?));
        }
    }
    for (rel, bytes) in outputs {
        ctx.ws.write(&rel, &bytes)?;
    }
    ctx.ws.write("reports/capture.csv", csv.as_bytes())?;
    ctx.ws.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanOutput {
    pub model_id: String,
    pub reports: Vec<LayerScanReport>,
    /// Layers whose full-data direction was degenerate and left out.
    pub skipped: BTreeMap<Factor, Vec<usize>>,
}

pub fn scan(ctx: &mut Ctx) -> Result<()> {
    ctx.ws.begin("scan")?;
    let factors = ctx.cfg.factors.clone();
    let inputs: Vec<_> = factors
        .iter()
        .map(|&f| ctx.ws.require(&acf_path(f), "capture"))
        .collect::<Result<_>>()?;
    let (pipe, th) = (&ctx.pipe, &ctx.cfg.thresholds);
    let results = per_factor(&factors, |f| {
        let set = read_acf(&inputs[factors.iter().position(|&x| x == f).expect("listed")])?;
        let mut rep = pipeline::scan_set(&set, f, pipe)?;
        rep.stable_range = extract::stable_range(&rep.mean_accuracy, th.stable_accuracy, th.stable_min_len);
        let (vectors, skipped) = extract::fit_all_layers(&set, f)?;
        let fitted = extract::transfer_matrix(&set, &vectors)?;
        let mut transfer = vec![vec![f64::NAN; set.layers()]; set.layers()];
        for (v, row) in vectors.iter().zip(fitted) {
            transfer[v.layer] = row;
        }
        Ok((set.model_id().to_string(), set.dim(), rep, vectors, skipped, transfer))
    })?;
    let (model_id, dim) = (results[0].0.clone(), results[0].1);
    if let Some(r) = results.iter().find(|r| r.0 != model_id || r.1 != dim) {
        bail!("captures disagree on the model: {} (width {}) vs {model_id} (width {dim})", r.0, r.1);
    }
    let mut bundle = VectorBundle::new(model_id.clone(), "raw", dim);
    let mut out = ScanOutput {
        model_id,
        reports: Vec::new(),
        skipped: BTreeMap::new(),
    };
    for (_, _, rep, vectors, skipped, transfer) in results {
        let f = rep.factor;
        ctx.log(format!(
            "scan: {f} best layer {:?}, stable range {:?}",
            rep.best_layer(),
            rep.stable_range
        ));
        for cv in vectors {
            bundle.insert(f, cv.layer, cv.direction)?;
        }
        ctx.ws.write(&format!("reports/transfer-{f}.csv"), report::matrix_csv(&transfer).as_bytes())?;
        ctx.ws.write(
            &format!("reports/transfer-{f}.svg"),
            report::heatmap_svg(&transfer, &format!("{f}: accuracy of layer-i direction at layer j")).as_bytes(),
        )?;
        out.skipped.insert(f, skipped);
        out.reports.push(rep);
    }
    ctx.ws.write(RAW, &bundle.encode())?;
    ctx.ws.note_bundle("raw", bundle.digest());
    ctx.ws.write("reports/scan_folds.csv", report::fold_accuracy_csv(&out.reports).as_bytes())?;
    ctx.ws.write("reports/scan_layers.csv", report::layer_scan_csv(&out.reports).as_bytes())?;
    let series: Vec<(String, Vec<f64>)> = out
        .reports
        .iter()
        .map(|r| (r.factor.to_string(), r.mean_accuracy.clone()))
        .collect();
    ctx.ws.write(
        "reports/scan_layers.svg",
        report::line_svg(&series, "held-out projection accuracy by layer").as_bytes(),
    )?;
    ctx.ws.write_json(SCAN_JSON, &out)?;
    ctx.ws.finish()
}

pub fn purify(ctx: &mut Ctx) -> Result<()> {
    ctx.ws.begin("purify")?;
    let raw = read_bundle(&ctx.ws.require(RAW, "scan")?)?;
    let (purified, details) = purify::purify_bundle(&raw)?;
    if details.is_empty() {
        bail!("no layer carries a predictor together with all of its confounders");
    }
    let mut csv = String::from("factor,layer,rank,residual_norm,cos_raw,max_abs_dot\n");
    for p in &details {
        let worst = p
            .confounders
            .iter()
            .map(|&c| raw.get(c, p.layer).map(|v| dot(&p.direction, v).abs()))
            .collect::<repe_core::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.3e}\n",
            p.factor, p.layer, p.rank, p.residual_norm, p.cos_raw, worst
        ));
    }
    ctx.log(format!("purify: {} directions", details.len()));
    ctx.ws.write(PURIFIED, &purified.encode())?;
    ctx.ws.note_bundle("purified", purified.digest());
    ctx.ws.write("reports/purify.csv", csv.as_bytes())?;
    ctx.ws.finish()
}

pub fn regress(ctx: &mut Ctx) -> Result<()> {
    ctx.ws.begin("regress")?;
    let purified = read_bundle(&ctx.ws.require(PURIFIED, "purify")?)?;
    let raw = read_bundle(&ctx.ws.require(RAW, "scan")?)?;
    let set = read_acf(&ctx.ws.require(VIGNETTE_ACF, "capture")?)?;
    let mut sweep = weighting::layer_sweep(&set, &raw, &purified, ctx.cfg.layer_range())?;
    let th = &ctx.cfg.thresholds;
    for r in &mut sweep.reports {
        r.validity = weighting::validity_check_with(&r.fit, th.significance, th.placebo_beta)?;
    }
    let valid: Vec<usize> = sweep.reports.iter().filter(|r| r.validity.valid()).map(|r| r.layer).collect();
    ctx.log(format!("regress: {} layers fitted, valid at {valid:?}", sweep.reports.len()));
    ctx.ws.write("reports/regression.csv", report::regression_csv(&sweep.reports).as_bytes())?;
    let n = set.layers();
    let mut series: Vec<(String, Vec<f64>)> = Factor::PREDICTORS
        .iter()
        .map(|&f| {
            let pts = sweep.reports.iter().filter_map(|r| r.fit.beta_of(f).ok().map(|b| (r.layer, b)));
            (format!("beta {f}"), by_layer(n, pts))
        })
        .collect();
    series.push(("pearson r".into(), by_layer(n, sweep.reports.iter().map(|r| (r.layer, r.pearson_r)))));
    ctx.ws.write(
        "reports/regression.svg",
        report::line_svg(&series, "standardized weights and score-label correlation by layer").as_bytes(),
    )?;
    ctx.ws.write_json(REGRESSION_JSON, &sweep)?;
    ctx.ws.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub factor: Factor,
    pub layer: usize,
    pub alpha: f64,
    pub mean_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerOutput {
    pub scan: InterventionScan,
    pub alpha_sweep: Vec<SweepPoint>,
}

/// Strengths relative to the configured alpha; {0.5, 1, 2, 3, 4} at alpha 3.
pub const SWEEP_FRACTIONS: [f64; 5] = [1.0 / 6.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 4.0 / 3.0];

pub fn steer(ctx: &mut Ctx) -> Result<()> {
    ctx.ws.begin("steer")?;
    let purified = read_bundle(&ctx.ws.require(PURIFIED, "purify")?)?;
    let set = read_acf(&ctx.ws.require(VIGNETTE_ACF, "capture")?)?;
    let model;
    let backend: Box<dyn Backend + '_> = match ctx.cfg.backend {
        BackendKind::Toy => {
            model = toynet::init_model(ctx.pipe.toy.clone())?;
            Box::new(ToyBackend::new(&model, ctx.pipe.capture_seed()))
        }
        other => Box::new(NoHook {
            reason: format!("backend {} cannot re-run the model with edited states", other.name()),
            states: set.layers(),
            dim: set.dim(),
        }),
    };
    let alpha = ctx.cfg.steering_alpha()?;
    let factors: Vec<Factor> = Factor::PREDICTORS
        .into_iter()
        .filter(|f| ctx.cfg.factors.contains(f))
        .collect();
    let layers = ctx.cfg.layer_range().map(|(a, b)| {
        purified
            .common_layers(&factors)
            .into_iter()
            .filter(|l| (a..=b).contains(l))
            .collect()
    });
    let plan = ScanPlan {
        alpha,
        modes: Mode::ALL.to_vec(),
        layers,
        factors: factors.clone(),
        effect_threshold: ctx.cfg.thresholds.effect,
    };
    let records = set.records();
    let partition = intervene::partition_baseline(backend.as_ref(), records)?;
    ctx.log(format!(
        "steer: alpha {alpha}, {} low and {} high records",
        partition.low.len(),
        partition.high.len()
    ));
    let scan = intervene::layer_intervention_scan(backend.as_ref(), records, &partition, &purified, &plan)?;
    ctx.log(format!("steer: target layers {:?}, ranking {:?}", scan.l_target, scan.ranking));

    // Dose-response of stimulation at the centre of the target interval, or
    // at the layer with the largest stimulation effect when there is none.
    let mut sweep = Vec::new();
    for &f in factors.iter().filter(|f| Factor::ANTECEDENTS.contains(f)) {
        let layer = match scan.l_target {
            Some((a, b)) => (a + b) / 2,
            None => {
                let best = scan
                    .cells
                    .iter()
                    .filter(|c| c.factor == f && c.mode == Mode::Stimulate)
                    .max_by(|a, b| a.mean_delta.total_cmp(&b.mean_delta));
                match best {
                    Some(c) => c.layer,
                    None => continue,
                }
            }
        };
        let base = SteeringConfig {
            alpha,
            mode: Mode::Stimulate,
            layer,
            factor: f,
        };
        let alphas: Vec<f64> = SWEEP_FRACTIONS.iter().map(|k| k * alpha).collect();
        let points = intervene::alpha_sweep(backend.as_ref(), records, &partition, &base, purified.get(f, layer)?, &alphas)?;
        sweep.extend(points.into_iter().map(|(alpha, mean_delta)| SweepPoint {
            factor: f,
            layer,
            alpha,
            mean_delta,
        }));
    }

    ctx.ws.write("reports/steering.csv", report::intervention_csv(&scan).as_bytes())?;
    let n = set.layers();
    let series: Vec<(String, Vec<f64>)> = factors
        .iter()
        .flat_map(|&f| Mode::ALL.map(|m| (f, m)))
        .map(|(f, m)| {
            let pts = scan
                .cells
                .iter()
                .filter(|c| c.factor == f && c.mode == m)
                .map(|c| (c.layer, c.mean_delta));
            let name = serde_json::to_value(m).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            (format!("{f} {name}"), by_layer(n, pts))
        })
        .collect();
    ctx.ws.write(
        "reports/steering.svg",
        report::line_svg(&series, "mean score change by steered layer").as_bytes(),
    )?;
    let mut csv = String::from("factor,layer,alpha,mean_delta\n");
    for p in &sweep {
        csv.push_str(&format!("{},{},{},{:.6}\n", p.factor, p.layer, p.alpha, p.mean_delta));
    }
    ctx.ws.write("reports/alpha_sweep.csv", csv.as_bytes())?;
    ctx.ws.write_json(STEERING_JSON, &SteerOutput { scan, alpha_sweep: sweep })?;
    ctx.ws.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub best_layer: usize,
    pub best_accuracy: f64,
    pub stable_range: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub layer: usize,
    pub beta: BTreeMap<Factor, f64>,
    pub p: BTreeMap<Factor, f64>,
    pub r2: f64,
    pub pearson_r: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_digest: String,
    pub model_id: String,
    pub extraction: BTreeMap<Factor, FactorSummary>,
    pub valid_layers: Vec<usize>,
    pub weights: Vec<LayerWeights>,
    pub steering_alpha: Option<f64>,
    pub target_layers: Option<(usize, usize)>,
    pub ranking: Vec<(Factor, f64)>,
    pub ranking_tie: bool,
}

pub fn report(ctx: &mut Ctx) -> Result<()> {
    ctx.ws.begin("report")?;
    let scan: ScanOutput = read_json(&ctx.ws.require(SCAN_JSON, "scan")?)?;
    let sweep: LayerSweep = read_json(&ctx.ws.require(REGRESSION_JSON, "regress")?)?;
    let steering: Option<SteerOutput> = if ctx.ws.has(STEERING_JSON) {
        Some(read_json(&ctx.ws.require(STEERING_JSON, "steer")?)?)
    } else {
        None
    };
    let extraction = scan
        .reports
        .iter()
        .map(|r| {
            let best = r.best_layer();
            (
                r.factor,
                FactorSummary {
                    best_layer: best,
                    best_accuracy: r.mean_accuracy[best],
                    stable_range: r.stable_range,
                },
            )
        })
        .collect();
    let weights: Vec<LayerWeights> = sweep
        .reports
        .iter()
        .map(|r| LayerWeights {
            layer: r.layer,
            beta: r.fit.factors.iter().copied().zip(r.fit.beta.iter().copied()).collect(),
            p: r.fit.factors.iter().copied().zip(r.fit.p.iter().copied()).collect(),
            r2: r.fit.r2,
            pearson_r: r.pearson_r,
            valid: r.validity.valid(),
        })
        .collect();
    let summary = Summary {
        config_digest: ctx.cfg.digest(),
        model_id: scan.model_id.clone(),
        extraction,
        valid_layers: weights.iter().filter(|w| w.valid).map(|w| w.layer).collect(),
        weights,
        steering_alpha: steering.as_ref().map(|s| s.scan.alpha),
        target_layers: steering.as_ref().and_then(|s| s.scan.l_target),
        ranking: steering.as_ref().map(|s| s.scan.ranking.clone()).unwrap_or_default(),
        ranking_tie: steering.as_ref().is_some_and(|s| s.scan.tie),
    };
    ctx.ws.write("reports/summary.md", summary_markdown(&summary).as_bytes())?;
    ctx.ws.write_json(SUMMARY_JSON, &summary)?;
    ctx.log(format!("report: summary written to {}", ctx.ws.path(SUMMARY_JSON).display()));
    ctx.ws.finish()
}

fn summary_markdown(s: &Summary) -> String {
    let mut out = format!("# Run summary\n\nmodel `{}`, config `{}`\n\n", s.model_id, &s.config_digest[..12]);
    out.push_str("## Extraction\n\n| factor | best layer | accuracy | stable range |\n|---|---|---|---|\n");
    for (f, e) in &s.extraction {
        let range = e.stable_range.map_or("-".to_string(), |(a, b)| format!("{a}-{b}"));
        out.push_str(&format!("| {f} | {} | {:.3} | {range} |\n", e.best_layer, e.best_accuracy));
    }
    out.push_str("\n## Weights\n\n| layer | sup | rel | wk | R² | r | valid |\n|---|---|---|---|---|---|---|\n");
    for w in &s.weights {
        let b = |f| w.beta.get(&f).copied().unwrap_or(f64::NAN);
        out.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {} |\n",
            w.layer,
            b(Factor::Superiority),
            b(Factor::Relevance),
            b(Factor::Weekday),
            w.r2,
            w.pearson_r,
            if w.valid { "yes" } else { "no" }
        ));
    }
    out.push_str("\n## Steering\n\n");
    match (s.steering_alpha, s.target_layers) {
        (None, _) => out.push_str("not run\n"),
        (Some(a), None) => out.push_str(&format!("alpha {a}: no layer interval met the effect gate\n")),
        (Some(a), Some((lo, hi))) => {
            out.push_str(&format!("alpha {a}, target layers {lo}-{hi}\n\n"));
            for (i, (f, d)) in s.ranking.iter().enumerate() {
                out.push_str(&format!("{}. {f}: mean |delta| {d:.3}\n", i + 1));
            }
            if s.ranking_tie {
                out.push_str("\n(tie broken by name)\n");
            }
        }
    }
    out
}

/// Every phase in order. Steering is skipped for backends that cannot
/// re-run the model.
pub fn all(ctx: &mut Ctx) -> Result<()> {
    let phases: [(&str, fn(&mut Ctx) -> Result<()>); 7] = [
        ("gen", gen),
        ("capture", capture),
        ("scan", scan),
        ("purify", purify),
        ("regress", regress),
        ("steer", steer),
        ("report", report),
    ];
    for (name, phase) in phases {
        if name == "steer" && ctx.cfg.backend != BackendKind::Toy {
            ctx.log(format!("steer: skipped for backend {}", ctx.cfg.backend.name()));
            continue;
        }
        phase(ctx).with_context(|| format!("{name} failed"))?;
    }
    Ok(())
}
