//! The acceptance gate: nine end-to-end checks over gradients, kernel
//! invariances, thresholding, metric arithmetic, and the synthetic pipeline.
//! The eval subcommand and the acceptance integration tests both run these;
//! each check yields one pass/fail line with its measured numbers.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use crate::backbone::BackboneConfig;
use crate::config::RunConfig;
use crate::data::patches::LoadedCatalog;
use crate::data::raster::read_msr1;
use crate::data::synth::{region_layout, render, synth_generate, ChangePair};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::num::{finite_diff_check, Tensor};
use crate::resenc::{cumulative_residual, init_bank, residual_backward, ClusterBank};
use crate::rng::{substream, substream_indexed};
use crate::tasks::{
    evaluate_pairs, otsu_threshold, rf_sweep, word_map, word_purity, PrfReport, OTSU_BINS,
};
use crate::tern::{compute_kernel, tern_forward, TernConfig, TernStack};
use crate::train::{
    compute_step, loss_forward, nce_backward, nce_loss, pretrain, AnchorPlan, TrainConfig,
    TrainState,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};

const ROOT_SEED: u64 = 42;
/// Training budget shared by every cell of the receptive-field sweep.
const SWEEP_ITERATIONS: u64 = 400;
/// Training budget shared by the three ablation variants.
const ABLATION_ITERATIONS: u64 = 400;

#[derive(Clone, Debug)]
pub struct CriterionResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!("{} {} {}", self.name, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }

    fn from_outcome(name: &'static str, outcome: Result<(bool, String)>) -> Self {
        match outcome {
            Ok((pass, detail)) => Self { name, pass, detail },
            Err(e) => Self { name, pass: false, detail: format!("errored: {e}") },
        }
    }
}

pub fn run_all() -> Vec<CriterionResult> {
    vec![a1(), a2(), a3(), a4(), a5(), a6(), a7(), a8(), a9()]
}

fn micro_model_cfg() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            bands: 2,
            stem_channels: 4,
            block_channels: vec![4],
            descriptor_dim: 8,
            tern: TernConfig {
                blocks: 2,
                layers_per_block: 2,
                dilations: vec![1, 2],
                ..TernConfig::default()
            },
        },
        clusters: 4,
        residual_encoder: true,
    }
}

fn random_tensor64(shape: Vec<usize>, name: &str) -> Tensor<f64> {
    let mut rng = substream(ROOT_SEED, name);
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap()
}

/// A1: analytic gradients against central finite differences, at the loss
/// level, the residual-encoder level, and through the whole training step.
pub fn a1() -> CriterionResult {
    CriterionResult::from_outcome("A1", a1_inner())
}

fn a1_inner() -> Result<(bool, String)> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let tau = 0.05;

    let dim = 8;
    let mk = |name: &str| {
        let mut rng = substream(ROOT_SEED, name);
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::new(vec![dim], v.iter().map(|x| x / norm).collect::<Vec<f64>>()).unwrap()
    };
    let anchor = mk("a1.anchor");
    let positive = mk("a1.positive");
    let negatives = vec![mk("a1.neg0"), mk("a1.neg1"), mk("a1.neg2")];
    let back = nce_backward(&anchor, &positive, &negatives, tau)?;
    worst = worst.max(finite_diff_check(
        |x| nce_loss(x, &positive, &negatives, tau),
        &anchor,
        &back.grad_anchor,
        1e-5,
    )?);
    worst = worst.max(finite_diff_check(
        |x| nce_loss(&anchor, x, &negatives, tau),
        &positive,
        &back.grad_positive,
        1e-5,
    )?);
    for i in 0..negatives.len() {
        worst = worst.max(finite_diff_check(
            |x| {
                let mut ns = negatives.clone();
                ns[i] = x.clone();
                nce_loss(&anchor, &positive, &ns, tau)
            },
            &negatives[i],
            &back.grad_negatives[i],
            1e-5,
        )?);
    }

    let bank: ClusterBank<f64> = init_bank(4, dim, ROOT_SEED)?.convert();
    let z = mk("a1.z");
    let probe = random_tensor64(vec![dim], "a1.probe");
    let functional = |f: &Tensor<f64>| -> f64 {
        f.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let res_back = residual_backward(&z, &bank, &probe)?;
    worst = worst.max(finite_diff_check(
        |x| Ok(functional(&cumulative_residual(x, &bank)?.f)),
        &z,
        &res_back.grad_z,
        1e-5,
    )?);
    worst = worst.max(finite_diff_check(
        |x| {
            let b = ClusterBank::from_parts(x.clone(), bank.log_smoothing.clone())?;
            Ok(functional(&cumulative_residual(&z, &b)?.f))
        },
        &bank.centers,
        &res_back.grad_centers,
        1e-5,
    )?);
    worst = worst.max(finite_diff_check(
        |x| {
            let b = ClusterBank::from_parts(bank.centers.clone(), x.clone())?;
            Ok(functional(&cumulative_residual(&z, &b)?.f))
        },
        &bank.log_smoothing,
        &res_back.grad_log_smoothing,
        1e-5,
    )?);

    let model_cfg = micro_model_cfg();
    let model = Model::init(model_cfg.clone(), ROOT_SEED)?;
    let params = model.params.convert::<f64>();
    let model_bank = model.bank.convert::<f64>();
    let patches = vec![
        random_tensor64(vec![2, 7, 7], "a1.patch.anchor"),
        random_tensor64(vec![2, 7, 7], "a1.patch.positive"),
        random_tensor64(vec![2, 7, 7], "a1.patch.negative"),
    ];
    let plan = vec![AnchorPlan { anchor: 0, positive: 1, negatives: vec![2] }];
    let grads = compute_step(&params, &model_bank, &model_cfg, &patches, &plan, tau)?;
    for idx in 0..params.named().len() {
        let analytic = grads.backbone.named()[idx].1.clone();
        let base = params.named()[idx].1.clone();
        worst = worst.max(finite_diff_check(
            |x| {
                let mut p = params.clone();
                *p.named_mut()[idx].1 = x.clone();
                loss_forward(&p, &model_bank, &model_cfg, &patches, &plan, tau)
            },
            &base,
            &analytic,
            1e-4,
        )?);
    }
    let bank_grads = grads.bank.as_ref().ok_or_else(|| Error::numerical("missing bank grads"))?;
    worst = worst.max(finite_diff_check(
        |x| {
            let b = ClusterBank::from_parts(x.clone(), model_bank.log_smoothing.clone())?;
            loss_forward(&params, &b, &model_cfg, &patches, &plan, tau)
        },
        &model_bank.centers,
        &bank_grads.centers,
        1e-4,
    )?);
    worst = worst.max(finite_diff_check(
        |x| {
            let b = ClusterBank::from_parts(model_bank.centers.clone(), x.clone())?;
            loss_forward(&params, &b, &model_cfg, &patches, &plan, tau)
        },
        &model_bank.log_smoothing,
        &bank_grads.log_smoothing,
        1e-4,
    )?);

    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-3 && secs < 60.0;
    Ok((pass, format!("max relative gradient error {worst:.2e} (limit 1e-3) in {secs:.1}s (limit 60s)")))
}

/// A2: the refinement kernels are scale-invariant, translation-equivariant
/// on interiors, parameter-free, and exactly uniform on constant windows.
pub fn a2() -> CriterionResult {
    CriterionResult::from_outcome("A2", a2_inner())
}

fn a2_inner() -> Result<(bool, String)> {
    let mut rng = substream(ROOT_SEED, "a2.window");
    let window = Tensor::new(
        vec![4, 3, 3],
        (0..36).map(|_| rng.gen_range(0.05f32..1.0)).collect::<Vec<f32>>(),
    )?;
    let base = compute_kernel(&window, 1e-6, true)?;
    let mut scale_diff = 0.0f32;
    for &s in &[0.5f32, 2.0, 10.0] {
        let kernel = compute_kernel(&window.map(|v| v * s), 1e-6, true)?;
        for (a, b) in base.weights().iter().zip(kernel.weights()) {
            scale_diff = scale_diff.max((a - b).abs());
        }
    }

    let cfg = TernConfig { blocks: 1, ..TernConfig::default() };
    let radius = cfg.receptive_radius();
    let (h, w) = (16usize, 16usize);
    let (dy, dx) = (2usize, 3usize);
    let mut rng = substream(ROOT_SEED, "a2.shift");
    let mut fill = |shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(0.05f32..1.0)).collect::<Vec<f32>>())
    };
    let guidance = fill(vec![2, h, w])?;
    let features = fill(vec![2, h, w])?;
    let shift = |t: &Tensor<f32>| {
        let mut out = Tensor::zeros(vec![2, h, w]);
        for c in 0..2 {
            for y in dy..h {
                for x in dx..w {
                    out.data_mut()[c * h * w + y * w + x] =
                        t.data()[c * h * w + (y - dy) * w + (x - dx)];
                }
            }
        }
        out
    };
    let out = tern_forward(&features, &guidance, &cfg)?;
    let out_shifted = tern_forward(&shift(&features), &shift(&guidance), &cfg)?;
    let mut shift_diff = 0.0f32;
    for c in 0..2 {
        for y in radius + dy..h - radius {
            for x in radius + dx..w - radius {
                let a = out.data()[c * h * w + (y - dy) * w + (x - dx)];
                let b = out_shifted.data()[c * h * w + y * w + x];
                shift_diff = shift_diff.max((a - b).abs());
            }
        }
    }

    // Parameter-free: two stacks built from the same guidance agree weight
    // for weight, and nothing about a stack can be trained.
    let full = TernConfig::default();
    let stack_a = TernStack::new(&guidance, &full)?;
    let stack_b = TernStack::new(&guidance, &full)?;
    let refine_a = stack_a.forward(&features)?;
    let refine_b = stack_b.forward(&features)?;
    let parameter_free = refine_a.data() == refine_b.data();

    let constant = Tensor::new(vec![3, 3, 3], vec![0.6f32; 27])?;
    let uniform = compute_kernel(&constant, 1e-6, true)?;
    let mut uniform_diff = 0.0f32;
    for &v in uniform.weights() {
        uniform_diff = uniform_diff.max((v - (-1.0 / 9.0)).abs());
    }

    let pass = scale_diff <= 1e-5 && shift_diff <= 1e-5 && parameter_free && uniform_diff <= 1e-6;
    Ok((
        pass,
        format!(
            "scale diff {scale_diff:.1e} (limit 1e-5), shift diff {shift_diff:.1e} (limit 1e-5), \
             parameter-free {parameter_free}, uniform diff {uniform_diff:.1e} (limit 1e-6)"
        ),
    ))
}

/// A3: the incremental thresholder agrees with an exhaustive between-class
/// variance search on a thousand seeded inputs.
pub fn a3() -> CriterionResult {
    CriterionResult::from_outcome("A3", a3_inner())
}

fn exhaustive_otsu_bin(values: &[f32], bins: usize) -> Option<usize> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if min >= max {
        return None;
    }
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = (((v - min) as f64 / (max - min) as f64) * bins as f64) as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_bin = 0;
    for t in 1..bins {
        let n0: u64 = counts[..t].iter().sum();
        let n1: u64 = counts[t..].iter().sum();
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u64 = counts[..t].iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
        let s1: u64 = counts[t..].iter().enumerate().map(|(i, &c)| (t + i) as u64 * c).sum();
        let num = (s0 as f64) * (n1 as f64) - (s1 as f64) * (n0 as f64);
        let score = num * num / ((n0 as f64) * (n1 as f64));
        if score > best {
            best = score;
            best_bin = t;
        }
    }
    Some(best_bin)
}

fn a3_inner() -> Result<(bool, String)> {
    let start = Instant::now();
    let mut checked = 0usize;
    let mut agreed = 0usize;
    for case in 0..1000u64 {
        let mut rng = substream_indexed(ROOT_SEED, "a3.case", case);
        let n = rng.gen_range(2..600);
        let shape = rng.gen_range(0..4);
        let values: Vec<f32> = (0..n)
            .map(|_| match shape {
                0 => rng.gen_range(0.0f32..1.0),
                1 => {
                    if rng.gen_bool(0.7) {
                        rng.gen_range(0.0f32..0.2)
                    } else {
                        rng.gen_range(0.5f32..1.0)
                    }
                }
                2 => rng.gen_range(0.0f32..1.0).powi(3),
                _ => (rng.gen_range(0..8) as f32) / 7.0,
            })
            .collect();
        let Some(expected) = exhaustive_otsu_bin(&values, OTSU_BINS) else {
            continue;
        };
        checked += 1;
        if otsu_threshold(&values, OTSU_BINS)?.bin == expected {
            agreed += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = checked > 900 && agreed == checked && secs < 30.0;
    Ok((pass, format!("{agreed}/{checked} thresholds agree with the exhaustive search in {secs:.1}s (limit 30s)")))
}

/// A4: the metric arithmetic reproduces two published precision/recall/F-1
/// rows from exact confusion counts.
pub fn a4() -> CriterionResult {
    CriterionResult::from_outcome("A4", a4_inner())
}

fn a4_inner() -> Result<(bool, String)> {
    let row1 = PrfReport::from_counts(27_258_280, 45_391_720, 10_261_720);
    let row2 = PrfReport::from_counts(35_306_340, 21_823_660, 26_493_660);
    let ok1 = (row1.precision - 37.52).abs() < 0.005
        && (row1.recall - 72.65).abs() < 0.005
        && (row1.f1 - 49.48).abs() <= 0.01;
    let ok2 = (row2.precision - 61.80).abs() < 0.005
        && (row2.recall - 57.13).abs() < 0.005
        && (row2.f1 - 59.37).abs() <= 0.01;
    Ok((
        ok1 && ok2,
        format!(
            "P {:.2} R {:.2} -> F1 {:.4} (want 49.48 +/- 0.01); P {:.2} R {:.2} -> F1 {:.4} (want 59.37 +/- 0.01)",
            row1.precision, row1.recall, row1.f1, row2.precision, row2.recall, row2.f1
        ),
    ))
}

/// Everything the synthetic end-to-end checks share: the generated corpus,
/// the trained model, and the change-detection report.
pub struct Fixture {
    pub run: RunConfig,
    pub catalog: LoadedCatalog,
    pub pairs: Vec<ChangePair>,
    pub state: TrainState,
    pub synth_secs: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
    pub report: PrfReport,
}

static FIXTURE: OnceLock<std::result::Result<Fixture, String>> = OnceLock::new();

pub fn fixture() -> Result<&'static Fixture> {
    FIXTURE
        .get_or_init(|| build_fixture().map_err(|e| e.to_string()))
        .as_ref()
        .map_err(|e| Error::data(format!("fixture failed: {e}")))
}

fn build_fixture() -> Result<Fixture> {
    let mut run = RunConfig::default();
    run.train.seed = ROOT_SEED;

    let synth_start = Instant::now();
    let dir = std::env::temp_dir().join(format!("matter-accept-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let output = synth_generate(&run.synth, run.train.seed, &dir)?;
    let catalog = LoadedCatalog::load(output.entries.clone())?;
    let mut pairs = Vec::new();
    for pair in &output.pairs {
        let before = read_msr1(&pair.before)?;
        let after = read_msr1(&pair.after)?;
        let gt = read_msr1(&pair.ground_truth)?;
        let ground_truth = gt.band(0).iter().map(|&v| v > 0.5).collect();
        pairs.push(ChangePair { before, after, ground_truth });
    }
    let _ = std::fs::remove_dir_all(&dir);
    let synth_secs = synth_start.elapsed().as_secs_f64();

    let train_start = Instant::now();
    let model = Model::init(run.model.clone(), run.train.seed)?;
    let mut state = TrainState::new(model, &run.train)?;
    pretrain(&catalog, &mut state, &run.train, |_| Ok(()))?;
    let train_secs = train_start.elapsed().as_secs_f64();

    let eval_start = Instant::now();
    let report = evaluate_pairs(&state.model, &pairs, run.infer_window)?;
    let eval_secs = eval_start.elapsed().as_secs_f64();

    Ok(Fixture { run, catalog, pairs, state, synth_secs, train_secs, eval_secs, report })
}

/// A5: generate, pre-train with defaults, and detect swapped-texture change
/// on held-out pairs at F-1 >= 80 within the time budget.
pub fn a5() -> CriterionResult {
    CriterionResult::from_outcome("A5", a5_inner())
}

fn a5_inner() -> Result<(bool, String)> {
    let fx = fixture()?;
    let total = fx.synth_secs + fx.train_secs + fx.eval_secs;
    let pass = fx.report.f1 >= 80.0 && total <= 600.0;
    Ok((
        pass,
        format!(
            "change F1 {:.2} (limit >= 80) with P {:.2} R {:.2}; synth {:.1}s + train {:.1}s + eval {:.1}s = {total:.1}s (limit 600s)",
            fx.report.f1, fx.report.precision, fx.report.recall, fx.synth_secs, fx.train_secs, fx.eval_secs
        ),
    ))
}

/// A6: on a held-out mosaic, each texture region's pixels agree on a
/// majority word at purity >= 0.70.
pub fn a6() -> CriterionResult {
    CriterionResult::from_outcome("A6", a6_inner())
}

fn a6_inner() -> Result<(bool, String)> {
    let fx = fixture()?;
    // A layout index far beyond the training regions gives an unseen mosaic
    // from the same generator family.
    let layout = region_layout(&fx.run.synth, fx.run.train.seed, 1_000);
    let mut rng = substream(fx.run.train.seed, "accept.holdout");
    let img = render(&fx.run.synth, &layout, 1.0, &mut rng);
    let words = word_map(&img, &fx.state.model, fx.run.infer_window)?;
    let purity = word_purity(&words.words, &layout.classmap, fx.run.synth.texture_classes)?;
    let per: Vec<String> =
        purity.per_class.iter().map(|c| format!("class {} {:.3}", c.class, c.purity)).collect();
    let pass = purity.min >= 0.70;
    Ok((
        pass,
        format!("min purity {:.3} (limit >= 0.70), mean {:.3} [{}]", purity.min, purity.mean, per.join(", ")),
    ))
}

/// A7: training at patch 7 scores at least as well as training at patch 17
/// when both infer at window 9.
pub fn a7() -> CriterionResult {
    CriterionResult::from_outcome("A7", a7_inner())
}

fn a7_inner() -> Result<(bool, String)> {
    let fx = fixture()?;
    let cfg = TrainConfig { iterations: SWEEP_ITERATIONS, ..fx.run.train.clone() };
    let grid = rf_sweep(&fx.catalog, &fx.pairs, &[7, 17], &[9], &fx.run.model, &cfg)?;
    let small = grid.f1[0][0];
    let large = grid.f1[1][0];
    Ok((
        small >= large,
        format!("train 7 -> F1 {small:.2}, train 17 -> F1 {large:.2} at inference 9 ({SWEEP_ITERATIONS} iterations per cell)"),
    ))
}

/// A8: cumulative ablation ordering; the full pipeline beats the pipeline
/// without refinement, which beats raw descriptors without the residual
/// encoder, all trained identically.
pub fn a8() -> CriterionResult {
    CriterionResult::from_outcome("A8", a8_inner())
}

fn ablation_f1(fx: &Fixture, model_cfg: &ModelConfig) -> Result<f64> {
    let cfg = TrainConfig { iterations: ABLATION_ITERATIONS, ..fx.run.train.clone() };
    let model = Model::init(model_cfg.clone(), cfg.seed)?;
    let mut state = TrainState::new(model, &cfg)?;
    pretrain(&fx.catalog, &mut state, &cfg, |_| Ok(()))?;
    Ok(evaluate_pairs(&state.model, &fx.pairs, fx.run.infer_window)?.f1)
}

fn a8_inner() -> Result<(bool, String)> {
    let fx = fixture()?;
    let full_cfg = fx.run.model.clone();
    let mut no_tern = full_cfg.clone();
    no_tern.backbone.tern.blocks = 0;
    let mut raw = no_tern.clone();
    raw.residual_encoder = false;

    let full = ablation_f1(fx, &full_cfg)?;
    let without_tern = ablation_f1(fx, &no_tern)?;
    let raw_desc = ablation_f1(fx, &raw)?;
    let pass = full >= without_tern && without_tern >= raw_desc;
    Ok((
        pass,
        format!(
            "full {full:.2} >= no-refinement {without_tern:.2} >= raw-descriptor {raw_desc:.2} ({ABLATION_ITERATIONS} iterations each)"
        ),
    ))
}

/// A9: the loss curve descends (last tenth <= half the first tenth) and a
/// checkpoint-interrupted run finishes bit-identical to a straight one.
pub fn a9() -> CriterionResult {
    CriterionResult::from_outcome("A9", a9_inner())
}

fn a9_inner() -> Result<(bool, String)> {
    let fx = fixture()?;
    let history = &fx.state.loss_history;
    let tenth = (history.len() / 10).max(1);
    let first: f64 = history[..tenth].iter().map(|(_, l)| l).sum::<f64>() / tenth as f64;
    let last: f64 =
        history[history.len() - tenth..].iter().map(|(_, l)| l).sum::<f64>() / tenth as f64;
    let descended = last <= 0.5 * first;

    let mut run = fx.run.clone();
    run.train.iterations = 60;
    run.train.checkpoint_every = 30;

    let straight = {
        let model = Model::init(run.model.clone(), run.train.seed)?;
        let mut state = TrainState::new(model, &run.train)?;
        pretrain(&fx.catalog, &mut state, &run.train, |_| Ok(()))?;
        state
    };

    let resumed = {
        let mut head_cfg = run.train.clone();
        head_cfg.iterations = 30;
        let model = Model::init(run.model.clone(), run.train.seed)?;
        let mut state = TrainState::new(model, &head_cfg)?;
        pretrain(&fx.catalog, &mut state, &head_cfg, |_| Ok(()))?;

        let path = std::env::temp_dir().join(format!("matter-a9-{}.mtck", std::process::id()));
        save_checkpoint(&state, &run, &path)?;
        let mut loaded = load_checkpoint(&path)?;
        let _ = std::fs::remove_file(&path);
        pretrain(&fx.catalog, &mut loaded.state, &run.train, |_| Ok(()))?;
        loaded.state
    };

    let mut identical = straight.iteration == resumed.iteration;
    for ((_, a), (_, b)) in
        straight.model.params.named().iter().zip(resumed.model.params.named())
    {
        if a.data() != b.data() {
            identical = false;
        }
    }
    for ((_, a), (_, b)) in straight.model.bank.named().iter().zip(resumed.model.bank.named()) {
        if a.data() != b.data() {
            identical = false;
        }
    }
    for (a, b) in straight.opt.velocity().iter().zip(resumed.opt.velocity()) {
        if a.data() != b.data() {
            identical = false;
        }
    }

    let pass = descended && identical;
    Ok((
        pass,
        format!(
            "first-tenth mean loss {first:.4}, last-tenth {last:.4} (limit <= {:.4}); resumed run bit-identical: {identical}",
            0.5 * first
        ),
    ))
}
