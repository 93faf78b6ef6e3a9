use std::path::{Path, PathBuf};

use teal_core::io::{configs_from_text, configs_to_text, load_model, save_model, trace_from_text, trace_to_text};
use teal_core::theory::{error_curve, McConfig};
use teal_core::{
    bench_gemv, block_forward_dense, block_forward_sparse, calibrate_block, greedy_optimize, intermediate_error_cats,
    intermediate_error_teal, mlp_input, select_config, ActivationHistogram, BenchConfig, BlockCalibration, BlockDims,
    Config32, InputDistribution, Matrix32, MatrixKind, Model32, RngStream, StepPolicy, Tap,
};

use crate::output::{cell, manifest_path_for, read_text, write_file, RunManifest, Table};
use crate::{BenchArgs, CalibrateArgs, CliError, EvalArgs, GenModelArgs, GreedyArgs, InputArgs, TheoryArgs};

const GEN_SEED: u64 = 0;
const CALIB_SEED: u64 = 1;
const EVAL_SEED: u64 = 2;
const THEORY_SEED: u64 = 10;
const BENCH_SEED: u64 = 0;

const CALIB_SAMPLES: usize = 10;
const EVAL_SAMPLES: usize = 4;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn check_levels(name: &str, ps: &[f64]) -> Result<(), CliError> {
    if ps.is_empty() {
        return Err(validation(format!("--{name} is empty")));
    }
    match ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        Some(p) => Err(validation(format!("--{name} value {p} outside [0, 1]"))),
        None => Ok(()),
    }
}

fn block_id(b: usize) -> String {
    format!("block{b}")
}

fn hist_path(dir: &Path, b: usize, tap: Tap) -> PathBuf {
    dir.join(format!("{}.{}.tealh", block_id(b), tap.name()))
}

fn load(path: &Path) -> Result<Model32, CliError> {
    load_model(path).map_err(CliError::core(path.display().to_string()))
}

fn load_calibration(dir: &Path, blocks: usize) -> Result<Vec<BlockCalibration>, CliError> {
    (0..blocks)
        .map(|b| {
            let hists = Tap::ALL.map(|tap| {
                let path = hist_path(dir, b, tap);
                let h = ActivationHistogram::from_text(&read_text(&path)?)
                    .map_err(CliError::core(path.display().to_string()))?;
                let want = format!("{}.{}", block_id(b), tap.name());
                if h.layer_id() != want {
                    return Err(validation(format!(
                        "{}: layer id {:?}, expected {want:?}",
                        path.display(),
                        h.layer_id()
                    )));
                }
                Ok(h)
            });
            let [a, b, c, d, e] = hists;
            Ok(BlockCalibration::from_histograms([a?, b?, c?, d?, e?]))
        })
        .collect()
}

/// Dense inputs to every block for `samples` sequences: `out[b][i]` feeds block `b`.
fn block_inputs(
    model: &Model32,
    inputs: &InputArgs,
    seed: u64,
    default_samples: usize,
) -> Result<Vec<Vec<Matrix32>>, CliError> {
    let samples = inputs.samples.unwrap_or(default_samples);
    if samples == 0 || inputs.seq == 0 {
        return Err(validation("--samples and --seq must be >= 1"));
    }
    let dist = InputDistribution::with_channel_spread(model.dims().d_model, inputs.spread, inputs.profile_seed)
        .map_err(CliError::core("input distribution"))?;
    let mut per_block = vec![Vec::with_capacity(samples); model.blocks().len()];
    for x in dist.sample_many::<f32>(&RngStream::new(seed), samples, inputs.seq) {
        let hs = model.block_inputs(&x).map_err(CliError::core("dense forward"))?;
        for (dst, h) in per_block.iter_mut().zip(hs) {
            dst.push(h);
        }
    }
    Ok(per_block)
}

fn record_inputs(m: &mut RunManifest, inputs: &InputArgs, default_samples: usize) {
    m.param("samples", inputs.samples.unwrap_or(default_samples))
        .param("seq", inputs.seq)
        .param("spread", inputs.spread)
        .param("profile_seed", inputs.profile_seed);
}

fn record_dims(m: &mut RunManifest, blocks: usize, dims: BlockDims) {
    m.param("blocks", blocks)
        .param("d_model", dims.d_model)
        .param("heads", dims.heads)
        .param("d_ff", dims.d_ff);
}

fn emit_table(m: &mut RunManifest, out: &Path, table: &Table, args: &crate::Common) -> Result<(), CliError> {
    m.param("format", format!("{:?}", args.format).to_lowercase());
    write_file(out, table.render(args.format).as_bytes())?;
    m.output(out).write(&manifest_path_for(out))
}

pub fn gen_model(a: &GenModelArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(GEN_SEED);
    let dims = BlockDims {
        d_model: a.dims.d_model,
        heads: a.dims.heads,
        d_ff: a.dims.d_ff,
    };
    if a.dims.blocks == 0 {
        return Err(validation("--blocks must be >= 1"));
    }
    let model = Model32::generate(seed, a.dims.blocks, dims).map_err(CliError::core("model dims"))?;
    let out = &a.common.out;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    save_model(out, &model).map_err(CliError::core(out.display().to_string()))?;
    let mut m = RunManifest::new("gen-model", Some(seed));
    record_dims(&mut m, a.dims.blocks, dims);
    m.output(out).write(&manifest_path_for(out))
}

pub fn calibrate(a: &CalibrateArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(CALIB_SEED);
    let model = load(&a.model)?;
    let dir = &a.common.out;
    let per_block = block_inputs(&model, &a.inputs, seed, CALIB_SAMPLES)?;
    let mut m = RunManifest::new("calibrate", Some(seed));
    m.input(&a.model);
    record_inputs(&mut m, &a.inputs, CALIB_SAMPLES);
    m.param("bins", a.bins);

    let mut table = Table::new(&["block", "tap", "total", "overflow", "hi", "threshold_p50"]);
    for (b, (block, xs)) in model.blocks().iter().zip(&per_block).enumerate() {
        let calib = calibrate_block(block, xs, a.bins, &block_id(b)).map_err(CliError::core(block_id(b)))?;
        for tap in Tap::ALL {
            let h = calib.histogram(tap);
            let path = hist_path(dir, b, tap);
            write_file(&path, h.to_text().as_bytes())?;
            m.output(&path);
            let t = h.estimate_threshold(0.5).map_err(CliError::core(block_id(b)))?;
            table.push(vec![
                cell(b),
                cell(tap.name()),
                cell(h.total()),
                cell(h.overflow_count()),
                cell(h.hi()),
                cell(t),
            ]);
        }
    }
    let summary = dir.join(format!("thresholds.{}", ext(&a.common)));
    write_summary(&mut m, dir, &summary, &table, &a.common)
}

/// Directory outputs get one `manifest.json` covering every file written.
fn write_summary(
    m: &mut RunManifest,
    dir: &Path,
    summary: &Path,
    table: &Table,
    args: &crate::Common,
) -> Result<(), CliError> {
    m.param("format", format!("{:?}", args.format).to_lowercase());
    write_file(summary, table.render(args.format).as_bytes())?;
    m.output(summary).write(&dir.join("manifest.json"))
}

fn ext(c: &crate::Common) -> &'static str {
    match c.format {
        crate::output::Format::Tsv => "tsv",
        crate::output::Format::Csv => "csv",
    }
}

pub fn greedy(a: &GreedyArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(CALIB_SEED);
    check_levels("targets", &a.targets)?;
    let policy = StepPolicy::new(a.alpha).map_err(CliError::core("--alpha"))?;
    let model = load(&a.model)?;
    let calibs = load_calibration(&a.hists, model.blocks().len())?;
    let per_block = block_inputs(&model, &a.inputs, seed, CALIB_SAMPLES)?;
    let dir = &a.common.out;
    let footprints = model.dims().footprints();

    let mut m = RunManifest::new("greedy", Some(seed));
    m.input(&a.model).input(&a.hists);
    record_inputs(&mut m, &a.inputs, CALIB_SAMPLES);
    m.param("alpha", a.alpha).param("targets", &a.targets);

    let mut header = vec!["block", "target", "block_sparsity", "error"];
    header.extend(MatrixKind::ALL.map(|k| k.name()));
    let mut table = Table::new(&header);
    let mut configs: Vec<Vec<Config32>> = vec![Vec::new(); a.targets.len()];
    let mut failures = Vec::new();
    for (b, ((block, calib), xs)) in model.blocks().iter().zip(&calibs).zip(&per_block).enumerate() {
        let id = block_id(b);
        let trace = greedy_optimize(block, calib, xs, policy, &id).map_err(CliError::core(id.clone()))?;
        let text = trace_to_text(&trace);
        trace_from_text(&text, &footprints).map_err(CliError::core(format!("{id} trace reload")))?;
        let path = dir.join(format!("{id}.tealg"));
        write_file(&path, text.as_bytes())?;
        m.output(&path);
        for (k, &target) in a.targets.iter().enumerate() {
            let step = match trace.select(target) {
                Ok(s) => s,
                Err(e) => {
                    failures.push(format!("{id} target {target}: {e}"));
                    continue;
                }
            };
            configs[k].push(select_config(&trace, target, calib).map_err(CliError::core(id.clone()))?);
            let mut row = vec![cell(b), cell(target), cell(step.block_sparsity), cell(step.error)];
            row.extend(step.levels.iter().map(|&p| cell(p)));
            table.push(row);
        }
    }
    if !failures.is_empty() {
        return Err(validation(failures.join("; ")));
    }
    for (target, cfgs) in a.targets.iter().zip(&configs) {
        let text = configs_to_text(cfgs);
        let path = dir.join(format!("config_p{target}.tealc"));
        configs_from_text::<f32>(&text).map_err(CliError::core(path.display().to_string()))?;
        write_file(&path, text.as_bytes())?;
        m.output(&path);
    }
    let summary = dir.join(format!("summary.{}", ext(&a.common)));
    write_summary(&mut m, dir, &summary, &table, &a.common)
}

struct EvalRun {
    label: String,
    cfgs: Vec<Config32>,
    /// Level whose calibrated thresholds drive the intermediate-error pair.
    up_levels: Vec<f64>,
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(EVAL_SEED);
    let model = load(&a.model)?;
    let n_blocks = model.blocks().len();
    let calibs = load_calibration(&a.hists, n_blocks)?;
    let mut m = RunManifest::new("eval", Some(seed));
    m.input(&a.model).input(&a.hists);
    record_inputs(&mut m, &a.inputs, EVAL_SAMPLES);

    let runs: Vec<EvalRun> = match &a.config {
        Some(path) => {
            let cfgs: Vec<Config32> =
                configs_from_text(&read_text(path)?).map_err(CliError::core(path.display().to_string()))?;
            if cfgs.len() != n_blocks {
                return Err(validation(format!(
                    "{}: {} block configs for a {n_blocks}-block model",
                    path.display(),
                    cfgs.len()
                )));
            }
            m.input(path);
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let up_levels = cfgs.iter().map(|c| c.level(MatrixKind::Up)).collect();
            vec![EvalRun { label, cfgs, up_levels }]
        }
        None => {
            check_levels("uniform", &a.uniform)?;
            m.param("uniform", &a.uniform);
            a.uniform
                .iter()
                .map(|&p| {
                    let cfgs = calibs
                        .iter()
                        .map(|c| Config32::uniform(p, c))
                        .collect::<teal_core::Result<Vec<_>>>()
                        .map_err(CliError::core(format!("uniform {p}")))?;
                    Ok(EvalRun {
                        label: "uniform".into(),
                        cfgs,
                        up_levels: vec![p; n_blocks],
                    })
                })
                .collect::<Result<_, CliError>>()?
        }
    };

    let dist = InputDistribution::with_channel_spread(model.dims().d_model, a.inputs.spread, a.inputs.profile_seed)
        .map_err(CliError::core("input distribution"))?;
    let samples = a.inputs.samples.unwrap_or(EVAL_SAMPLES);
    if samples == 0 || a.inputs.seq == 0 {
        return Err(validation("--samples and --seq must be >= 1"));
    }
    let xs: Vec<Matrix32> = dist.sample_many(&RngStream::new(seed), samples, a.inputs.seq);
    let per_block = block_inputs(&model, &a.inputs, seed, EVAL_SAMPLES)?;
    let dense_out: Vec<Vec<Matrix32>> = model
        .blocks()
        .iter()
        .zip(&per_block)
        .map(|(blk, hs)| hs.iter().map(|h| block_forward_dense(blk, h)).collect())
        .collect::<teal_core::Result<_>>()
        .map_err(CliError::core("dense forward"))?;
    let model_dense: Vec<Matrix32> = dense_out.last().cloned().unwrap_or_default();
    let mlp_in: Vec<Vec<Matrix32>> = model
        .blocks()
        .iter()
        .zip(&per_block)
        .map(|(blk, hs)| hs.iter().map(|h| mlp_input(blk, h)).collect())
        .collect::<teal_core::Result<_>>()
        .map_err(CliError::core("dense forward"))?;

    let mut table = Table::new(&[
        "config",
        "block",
        "sparsity",
        "rel_error",
        "teal_intermediate",
        "cats_intermediate",
    ]);
    let dims = model.dims();
    for run in &runs {
        let (mut s_sum, mut teal_sum, mut cats_sum) = (0.0, 0.0, 0.0);
        for (b, blk) in model.blocks().iter().enumerate() {
            let ctx = || block_id(b);
            let cfg = &run.cfgs[b];
            let sparse: Vec<Matrix32> = per_block[b]
                .iter()
                .map(|h| block_forward_sparse(blk, h, cfg))
                .collect::<teal_core::Result<_>>()
                .map_err(CliError::core(ctx()))?;
            let err = teal_core::model::relative_error(&sparse, &dense_out[b]);
            let p_up = run.up_levels[b];
            let t_gate = calibs[b]
                .tap_threshold(Tap::GateAct, p_up)
                .map_err(CliError::core(ctx()))?;
            let t_up = cfg.threshold(MatrixKind::Up);
            let (mut teal, mut cats) = (0.0, 0.0);
            for x in &mlp_in[b] {
                teal += intermediate_error_teal(blk, x, t_up).map_err(CliError::core(ctx()))?;
                cats += intermediate_error_cats(blk, x, t_gate).map_err(CliError::core(ctx()))?;
            }
            let (teal, cats) = (teal / samples as f64, cats / samples as f64);
            let s = cfg.block_sparsity(&dims);
            s_sum += s;
            teal_sum += teal;
            cats_sum += cats;
            table.push(vec![
                run.label.clone(),
                cell(b),
                cell(s),
                cell(err),
                cell(teal),
                cell(cats),
            ]);
        }
        let model_sparse: Vec<Matrix32> = xs
            .iter()
            .map(|x| model.forward_sparse(x, &run.cfgs))
            .collect::<teal_core::Result<_>>()
            .map_err(CliError::core("model forward"))?;
        let nb = n_blocks as f64;
        table.push(vec![
            run.label.clone(),
            "model".into(),
            cell(s_sum / nb),
            cell(teal_core::model::relative_error(&model_sparse, &model_dense)),
            cell(teal_sum / nb),
            cell(cats_sum / nb),
        ]);
    }
    emit_table(&mut m, &a.common.out, &table, &a.common)
}

pub fn theory(a: &TheoryArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(THEORY_SEED);
    check_levels("ps", &a.ps)?;
    let cfg = McConfig::square(a.dim, a.trials);
    let curve = error_curve(&a.ps, &cfg, &RngStream::new(seed)).map_err(CliError::core("theory"))?;
    let mut table = Table::new(&[
        "p",
        "analytic_magnitude",
        "analytic_random",
        "mc_mean",
        "mc_stderr",
        "mc_random_mean",
        "mc_random_stderr",
    ]);
    for pt in &curve {
        table.push(vec![
            cell(pt.p),
            cell(pt.analytic_magnitude),
            cell(pt.analytic_random),
            cell(pt.mc_magnitude.mean),
            cell(pt.mc_magnitude.stderr),
            cell(pt.mc_random.mean),
            cell(pt.mc_random.stderr),
        ]);
    }
    let mut m = RunManifest::new("theory", Some(seed));
    m.param("ps", &a.ps).param("dim", a.dim).param("trials", a.trials);
    emit_table(&mut m, &a.common.out, &table, &a.common)
}

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(BENCH_SEED);
    check_levels("sparsities", &a.sparsities)?;
    let cfg = BenchConfig {
        rows: a.rows,
        cols: a.cols,
        sparsities: a.sparsities.clone(),
        reps: a.reps,
        warmup: a.warmup,
        seed,
    };
    let res = bench_gemv(&cfg).map_err(CliError::core("bench"))?;
    let mut table = Table::new(&[
        "sparsity",
        "realized_sparsity",
        "threshold",
        "median_ns",
        "min_ns",
        "dense_median_ns",
        "dense_min_ns",
        "speedup",
        "weight_bytes",
        "dense_weight_bytes",
    ]);
    for pt in &res.points {
        table.push(vec![
            cell(pt.target_sparsity),
            cell(pt.traffic.realized_sparsity),
            cell(pt.threshold),
            cell(pt.median_ns),
            cell(pt.min_ns),
            cell(pt.dense_median_ns),
            cell(pt.dense_min_ns),
            cell(pt.speedup()),
            cell(pt.traffic.weight_bytes_sparse),
            cell(pt.traffic.weight_bytes_dense),
        ]);
    }
    let mut m = RunManifest::new("bench", Some(seed));
    m.param("rows", a.rows)
        .param("cols", a.cols)
        .param("sparsities", &a.sparsities)
        .param("reps", a.reps)
        .param("warmup", a.warmup)
        .param(
            "timing_fields",
            ["median_ns", "min_ns", "dense_median_ns", "dense_min_ns", "speedup"],
        );
    emit_table(&mut m, &a.common.out, &table, &a.common)
}
