use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use brds_core::accel::{compare, comparison_text, structural_sparsity, AccelReport, Accelerator};
use brds_core::lstm::{lstm_run_fixed, FixedParams, LstmParams, LstmState};
use brds_core::memory::{ImageContents, MemoryImage};
use brds_core::model::Model;
use brds_core::numerics::{ActivationTables, FixedSpec};
use brds_core::pruning::{
    apply_dual_prune, brds_search, dual_ratio_sweep, estimate_search_time, iso_sparsity_grid, keep_count, sweep_csv,
    trace_csv, DualMasks, Phase, TraceRow,
};
use brds_core::sparse::RowBalancedMatrix;
use brds_core::trainer::{evaluate, generate_task, retrain_masked, train, Checkpoint, Network, Task, TrainConfig};
use brds_core::{Gate, LstmDims};
use serde::{Deserialize, Serialize};

use crate::config::{read_toml, AccelFile, SearchFile, SweepFile, TaskSpec, TrainFile, DEFAULT_N_RE};
use crate::manifest::Manifest;
use crate::Usage;

pub const MODEL: &str = "model.json";
pub const SIDECAR: &str = "model.sidecar.json";
pub const TASK: &str = "task.json";
pub const MASKS: &str = "masks.json";

struct OutDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl OutDir {
    fn create(dir: &Path, manifest: Manifest) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        std::fs::write(self.dir.join(name), contents).with_context(|| format!("writing {name}"))?;
        self.manifest.outputs.push(name.to_string());
        Ok(())
    }

    fn write_diagnostic(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        std::fs::write(self.dir.join(name), contents).with_context(|| format!("writing {name}"))?;
        self.manifest.diagnostics.push(name.to_string());
        Ok(())
    }

    fn write_checkpoint(&mut self, ck: &Checkpoint, task: &TaskSpec) -> anyhow::Result<()> {
        self.write(MODEL, ck.model().to_json()?)?;
        self.write(SIDECAR, pretty(&ck.sidecar())?)?;
        self.write(TASK, pretty(task)?)
    }

    fn finish(self) -> anyhow::Result<()> {
        self.manifest.write(&self.dir)
    }
}

fn pretty<T: Serialize + ?Sized>(v: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn load_checkpoint(dir: &Path) -> anyhow::Result<(Checkpoint, TaskSpec)> {
    let ck = Checkpoint::load(dir.join(MODEL), dir.join(SIDECAR))
        .with_context(|| format!("loading checkpoint from {}", dir.display()))?;
    let task: TaskSpec = serde_json::from_str(
        &std::fs::read_to_string(dir.join(TASK)).with_context(|| format!("reading {}", dir.join(TASK).display()))?,
    )?;
    Ok((ck, task))
}

fn build_task(spec: &TaskSpec) -> anyhow::Result<Task> {
    Ok(generate_task(spec.kind, spec.seed, spec.sizes)?)
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

pub fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let file: TrainFile = read_toml(a.config)?;
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let task_spec = file.task.resolve(seed);
    let mut cfg = file.train.resolve(task_spec.kind, seed, 50);
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let spec = match &file.fixed {
        Some(f) => f.spec()?,
        None => FixedSpec::Q4_12,
    };
    let task = build_task(&task_spec)?;
    let dims = LstmDims::new(task.input_dim, file.model.hidden)?;
    let out = train(&task, dims, &cfg)?;
    let metric = evaluate(&out.network, &task)?;
    log::info!("trained {} epochs, validation {:?}", cfg.epochs, metric.metric());

    let mut dir = OutDir::create(a.out, Manifest::new("train").config(a.config).seed(seed))?;
    let ck = Checkpoint {
        network: out.network.clone(),
        spec,
        task: task_spec.kind,
        epoch: cfg.epochs,
        learning_rate: out.learning_rate,
    };
    dir.write_checkpoint(&ck, &task_spec)?;
    dir.write("eval.json", pretty(&metric)?)?;
    dir.write_diagnostic("train_log.csv", brds_core::trainer::log_csv(&out.log, true))?;
    dir.finish()
}

#[derive(Serialize)]
struct PruneSummary {
    #[serde(rename = "Spar_x")]
    spar_x: f64,
    #[serde(rename = "Spar_h")]
    spar_h: f64,
    #[serde(rename = "X_SP")]
    x_sp: usize,
    #[serde(rename = "H_SP")]
    h_sp: usize,
    eval: brds_core::trainer::EvalRecord,
}

pub fn prune_cmd(checkpoint: &Path, spar_x: f64, spar_h: f64, out: &Path) -> anyhow::Result<()> {
    for (flag, v) in [("--spar-x", spar_x), ("--spar-h", spar_h)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Usage(format!("{flag} {v} is not a percentage in [0, 100]")).into());
        }
    }
    let (ck, task_spec) = load_checkpoint(checkpoint)?;
    let (lstm, masks) = apply_dual_prune(&ck.network.lstm, spar_x, spar_h)?;
    let network = Network {
        lstm,
        readout: ck.network.readout.clone(),
    };
    let task = build_task(&task_spec)?;
    let dims = network.dims();
    let summary = PruneSummary {
        spar_x,
        spar_h,
        x_sp: keep_count(dims.input, spar_x),
        h_sp: keep_count(dims.hidden, spar_h),
        eval: evaluate(&network, &task)?,
    };
    let mut dir = OutDir::create(out, Manifest::new("prune").input(checkpoint))?;
    dir.write_checkpoint(&Checkpoint { network, ..ck }, &task_spec)?;
    dir.write(MASKS, masks.to_json(spar_x, spar_h)?)?;
    dir.write("prune.json", pretty(&summary)?)?;
    dir.finish()
}

#[derive(Serialize)]
struct SearchResult {
    #[serde(rename = "MA")]
    ma: f64,
    #[serde(rename = "Spar_x_MA")]
    spar_x: f64,
    #[serde(rename = "Spar_h_MA")]
    spar_h: f64,
    masks: &'static str,
    metric: &'static str,
    uniform_accuracy: f64,
    candidates: usize,
    n_re: usize,
    #[serde(rename = "OS")]
    os: f64,
    alpha: f64,
    delta_x: f64,
    delta_h: f64,
}

fn score_name(task: &Task) -> &'static str {
    use brds_core::trainer::TaskKind::*;
    match task.kind {
        AddingProblem => "neg_mse",
        SequenceParity => "accuracy",
        CharLm => "neg_perplexity",
    }
}

fn retrainer<'a>(task: &'a Task, cfg: TrainConfig) -> impl FnMut(&Network, &DualMasks) -> brds_core::Result<Network> + 'a {
    let mut step = 0u64;
    move |net, masks| {
        step += 1;
        let c = TrainConfig {
            seed: cfg.seed.wrapping_add(step),
            ..cfg
        };
        retrain_masked(net, masks, task, &c).map(|o| o.network)
    }
}

pub fn search_cmd(checkpoint: &Path, config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let file: SearchFile = read_toml(config)?;
    let seed = seed.or(file.seed).unwrap_or(0);
    let (ck, task_spec) = load_checkpoint(checkpoint)?;
    let task = build_task(&task_spec)?;
    let cfg = file.retrain.resolve(task_spec.kind, seed, DEFAULT_N_RE);
    let n_re = cfg.epochs;
    let s = &file.sparsity;
    let mut dir = OutDir::create(out, Manifest::new("search").config(config).seed(seed).input(checkpoint))?;

    if s.os == 0.0 {
        // nothing to prune: the input network is the only candidate
        let acc = evaluate(&ck.network, &task)?.score();
        let masks = DualMasks::all_kept(ck.network.dims());
        let row = TraceRow {
            iteration: 0,
            phase: Phase::Initial,
            spar_x: 0.0,
            spar_h: 0.0,
            accuracy: acc,
            wall_time_s: 0.0,
        };
        dir.write_checkpoint(&ck, &task_spec)?;
        dir.write(MASKS, masks.to_json(0.0, 0.0)?)?;
        dir.write(
            "result.json",
            pretty(&SearchResult {
                ma: acc,
                spar_x: 0.0,
                spar_h: 0.0,
                masks: MASKS,
                metric: score_name(&task),
                uniform_accuracy: acc,
                candidates: 1,
                n_re,
                os: 0.0,
                alpha: s.alpha,
                delta_x: s.delta_x,
                delta_h: s.delta_h,
            })?,
        )?;
        dir.write_diagnostic("trace.csv", trace_csv(&[row], n_re, true))?;
        return dir.finish();
    }

    let sp = s.to_config()?;
    let started = Instant::now();
    let mut epochs_run = 0usize;
    let mut inner = retrainer(&task, cfg);
    let outcome = brds_search(
        &ck.network,
        &sp,
        |n, m| {
            epochs_run += n_re;
            inner(n, m)
        },
        |n| evaluate(n, &task).map(|r| r.score()),
    )?;
    let elapsed = started.elapsed().as_secs_f64();
    let best = &outcome.best;
    log::info!(
        "best ({}, {}) score {} over {} candidates",
        best.spar_x,
        best.spar_h,
        best.accuracy,
        outcome.trace.len()
    );

    dir.write_checkpoint(
        &Checkpoint {
            network: best.network.clone(),
            ..ck
        },
        &task_spec,
    )?;
    dir.write(MASKS, best.masks.to_json(best.spar_x, best.spar_h)?)?;
    dir.write(
        "result.json",
        pretty(&SearchResult {
            ma: best.accuracy,
            spar_x: best.spar_x,
            spar_h: best.spar_h,
            masks: MASKS,
            metric: score_name(&task),
            uniform_accuracy: outcome.initial.accuracy,
            candidates: outcome.trace.len(),
            n_re,
            os: sp.os,
            alpha: sp.alpha,
            delta_x: sp.delta_x,
            delta_h: sp.delta_h,
        })?,
    )?;
    dir.write_diagnostic("trace.csv", trace_csv(&outcome.trace, n_re, true))?;
    let ept = if epochs_run > 0 { elapsed / epochs_run as f64 } else { 0.0 };
    if ept > 0.0 {
        let est = estimate_search_time(&sp, ept, n_re as f64)?;
        dir.write_diagnostic(
            "timing.json",
            pretty(&serde_json::json!({ "measured_s": elapsed, "estimate": est }))?,
        )?;
    }
    dir.finish()
}

pub fn sweep_cmd(checkpoint: &Path, config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let file: SweepFile = read_toml(config)?;
    let seed = seed.or(file.seed).unwrap_or(0);
    let (ck, task_spec) = load_checkpoint(checkpoint)?;
    let task = build_task(&task_spec)?;
    let cfg = file.retrain.resolve(task_spec.kind, seed, DEFAULT_N_RE);
    let os = file.sweep.os;
    let grid: Vec<(f64, f64)> = match (&file.sweep.grid, file.sweep.step) {
        (Some(g), _) => g.iter().map(|p| (p[0], p[1])).collect(),
        (None, Some(step)) => iso_sparsity_grid(ck.network.dims(), os, step)?,
        (None, None) => return Err(Usage("sweep needs `grid` or `step`".into()).into()),
    };
    let points = dual_ratio_sweep(&ck.network, os, &grid, retrainer(&task, cfg), |n| {
        evaluate(n, &task).map(|r| r.score())
    })?;
    let mut dir = OutDir::create(out, Manifest::new("sweep").config(config).seed(seed).input(checkpoint))?;
    dir.write("sweep.csv", sweep_csv(&points))?;
    dir.finish()
}

pub fn quantize_cmd(model: &Path, out: &Path, n: Option<u32>, f: Option<u32>) -> anyhow::Result<()> {
    let m = Model::load(model).with_context(|| format!("loading {}", model.display()))?;
    let spec = match (n, f) {
        (None, None) => m.spec(),
        (Some(n), Some(f)) => FixedSpec::new(n, f)?,
        _ => return Err(Usage("give both --n and --f, or neither".into()).into()),
    };
    let fixed = match &m {
        Model::Float { params, .. } => brds_core::lstm::quantize_params(params, spec),
        Model::Fixed(q) if q.spec == spec => q.clone(),
        Model::Fixed(q) => bail!(brds_core::Error::SpecMismatch {
            left: q.spec,
            right: spec
        }),
    };
    let tables = ActivationTables::new(spec, Default::default())?;
    let mut dir = OutDir::create(out, Manifest::new("quantize").input(model))?;
    dir.write(MODEL, Model::Fixed(fixed).to_json()?)?;
    dir.write("sigmoid_pwl.csv", tables.sigmoid.to_csv())?;
    dir.write("tanh_pwl.csv", tables.tanh.to_csv())?;
    dir.finish()
}

fn sparse_set(
    mats: &[brds_core::Matrix<i32>; 4],
    masks: Option<&[brds_core::Mask; 4]>,
    bits: u32,
    what: &str,
) -> anyhow::Result<[RowBalancedMatrix<i32>; 4]> {
    let mut out = Vec::with_capacity(4);
    for (g, m) in mats.iter().enumerate() {
        let s = match masks {
            Some(mk) => RowBalancedMatrix::from_mask(m, &mk[g], bits),
            None => RowBalancedMatrix::encode(m, bits),
        }
        .with_context(|| {
            format!(
                "{what} of gate {} is not row-balanced; pass the pruning masks with --masks",
                Gate::ALL[g].letter()
            )
        })?;
        out.push(s);
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!("four gates")))
}

fn check_uniform_k(set: &[RowBalancedMatrix<i32>; 4], what: &str) -> anyhow::Result<usize> {
    let k = set[0].k();
    if set.iter().any(|m| m.k() != k) {
        bail!(brds_core::Error::Model(format!("{what} gates keep different nonzeros per row")));
    }
    Ok(k)
}

#[derive(Serialize)]
struct ImageSummary {
    file: &'static str,
    bytes: usize,
    geometry: brds_core::memory::ImageGeometry,
    n: u32,
    f: u32,
    accel: brds_core::AccelConfig,
    sizes: brds_core::MemorySizes,
}

pub fn build_image_cmd(model: &Path, masks: Option<&Path>, config: &Path, out: &Path) -> anyhow::Result<()> {
    let accel: AccelFile = read_toml(config)?;
    let m = Model::load(model).with_context(|| format!("loading {}", model.display()))?;
    let spec = accel.spec()?.unwrap_or(m.spec());
    let q = match &m {
        Model::Float { params, .. } => brds_core::lstm::quantize_params(params, spec),
        Model::Fixed(q) if q.spec == spec => q.clone(),
        Model::Fixed(q) => bail!(brds_core::Error::SpecMismatch { left: q.spec, right: spec }),
    };
    let mut manifest = Manifest::new("build-image").config(config).input(model);
    let mask_set = match masks {
        Some(p) => {
            manifest = manifest.input(p);
            let (mk, _, _) = DualMasks::from_json(&std::fs::read_to_string(p)?)?;
            mk.validate(q.params.dims())?;
            Some(mk)
        }
        None => None,
    };
    let bits = accel.addr_bits();
    let contents = ImageContents {
        wx: sparse_set(&q.params.wx, mask_set.as_ref().map(|m| &m.wx), bits, "W_x")?,
        wh: sparse_set(&q.params.wh, mask_set.as_ref().map(|m| &m.wh), bits, "W_h")?,
        bias: q.params.bias.clone(),
    };
    let x_sp = check_uniform_k(&contents.wx, "W_x")?;
    let h_sp = check_uniform_k(&contents.wh, "W_h")?;
    let cfg = accel.configure(q.params.dims(), x_sp, h_sp, spec)?;
    let image = MemoryImage::build(&contents, cfg.rx_per_module(), cfg.rh_per_module(), bits, spec)?;
    let bytes = image.to_bytes();
    let summary = ImageSummary {
        file: "image.brds",
        bytes: bytes.len(),
        geometry: *image.geometry(),
        n: spec.width_bits(),
        f: spec.frac_bits(),
        accel: cfg,
        sizes: image.sizes(),
    };
    let mut dir = OutDir::create(out, manifest)?;
    dir.write("image.brds", &bytes)?;
    dir.write("image.json", pretty(&summary)?)?;
    dir.finish()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InputFile {
    /// `real` values are quantized; `raw` values are fixed-point words.
    #[serde(default = "real")]
    format: String,
    inputs: Vec<Vec<f64>>,
    h0: Option<Vec<f64>>,
    c0: Option<Vec<f64>>,
}

fn real() -> String {
    "real".into()
}

fn to_raw(spec: FixedSpec, format: &str, v: &[f64]) -> anyhow::Result<Vec<i32>> {
    match format {
        "real" => Ok(spec.quantize_slice(v)),
        "raw" => v
            .iter()
            .map(|&x| {
                if x.fract() != 0.0 || !spec.contains(x as i32) || x.abs() > i32::MAX as f64 {
                    Err(anyhow!(brds_core::Error::OutOfRange(format!("raw input {x} is not a {}-bit word", spec.width_bits()))))
                } else {
                    Ok(x as i32)
                }
            })
            .collect(),
        other => Err(Usage(format!("input format {other:?}, expected \"real\" or \"raw\"")).into()),
    }
}

#[derive(Serialize)]
struct SimOutputs {
    timesteps: usize,
    h: Vec<Vec<i32>>,
    c: Vec<Vec<i32>>,
    h_real: Vec<Vec<f64>>,
    reference_match: bool,
}

#[derive(Serialize)]
struct SimReport<'a> {
    timesteps: usize,
    total_cycles: usize,
    #[serde(flatten)]
    report: &'a AccelReport,
}

pub fn simulate_cmd(image_path: &Path, input: &Path, config: &Path, out: &Path) -> anyhow::Result<()> {
    let accel: AccelFile = read_toml(config)?;
    let image = MemoryImage::read(image_path).with_context(|| format!("reading image {}", image_path.display()))?;
    let g = *image.geometry();
    if let Some(s) = accel.spec()? {
        if s != g.spec {
            bail!(brds_core::Error::SpecMismatch { left: s, right: g.spec });
        }
    }
    let dims = LstmDims::new(g.input, g.hidden)?;
    let cfg = accel.configure(dims, g.x_sp, g.h_sp, g.spec)?;
    let file: InputFile = serde_json::from_str(&std::fs::read_to_string(input)?)
        .with_context(|| format!("parsing {}", input.display()))?;
    let spec = g.spec;
    let inputs = file
        .inputs
        .iter()
        .map(|x| to_raw(spec, &file.format, x))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let init = match (&file.h0, &file.c0) {
        (None, None) => None,
        (h, c) => Some(LstmState {
            h: to_raw(spec, &file.format, h.as_deref().unwrap_or(&vec![0.0; g.hidden]))?,
            c: to_raw(spec, &file.format, c.as_deref().unwrap_or(&vec![0.0; g.hidden]))?,
        }),
    };

    let acc = Accelerator::new(cfg)?;
    let (states, cycles) = acc.simulate_sequence(&image, &inputs, init.clone())?;
    let c = image.extract()?;
    let dense = FixedParams {
        spec,
        params: LstmParams {
            wx: std::array::from_fn(|i| c.wx[i].decode()),
            wh: std::array::from_fn(|i| c.wh[i].decode()),
            bias: c.bias.clone(),
        },
    };
    let reference = lstm_run_fixed(&dense, &inputs, init, acc.tables())?;
    let reference_match = reference == states;
    if !reference_match {
        log::error!("accelerator output differs from the fixed-point reference");
    }

    let sparsity = accel.sparsity.unwrap_or_else(|| structural_sparsity(&cfg));
    let report = AccelReport::build(&cfg, sparsity)?;
    let outputs = SimOutputs {
        timesteps: states.len(),
        h: states.iter().map(|s| s.h.clone()).collect(),
        c: states.iter().map(|s| s.c.clone()).collect(),
        h_real: states.iter().map(|s| spec.to_real_slice(&s.h)).collect(),
        reference_match,
    };
    let mut dir = OutDir::create(out, Manifest::new("simulate").config(config).input(image_path).input(input))?;
    dir.write("outputs.json", pretty(&outputs)?)?;
    dir.write(
        "report.json",
        pretty(&SimReport {
            timesteps: states.len(),
            total_cycles: states.len() * cycles.cycles_per_timestep,
            report: &report,
        })?,
    )?;
    dir.write("report.txt", report.to_text())?;
    dir.finish()?;
    if !reference_match {
        bail!(brds_core::Error::Model("simulation disagrees with the reference datapath".into()));
    }
    Ok(())
}

pub fn report_cmd(config: &Path, out: &Path, reference: Option<&Path>) -> anyhow::Result<()> {
    let accel: AccelFile = read_toml(config)?;
    let (dims, x_sp, h_sp) = accel.shape()?;
    let spec = accel.spec()?.unwrap_or(FixedSpec::Q4_12);
    let cfg = accel.configure(dims, x_sp, h_sp, spec)?;
    let sparsity = accel.sparsity.unwrap_or_else(|| structural_sparsity(&cfg));
    let report = AccelReport::build(&cfg, sparsity)?;
    let mut manifest = Manifest::new("report").config(config);
    let cmp = match reference {
        Some(p) => {
            manifest = manifest.input(p);
            let refs: BTreeMap<String, f64> = serde_json::from_str(&std::fs::read_to_string(p)?)
                .with_context(|| format!("parsing reference numbers {}", p.display()))?;
            let (rows, unknown) = compare(&report, &refs);
            for k in &unknown {
                log::warn!("reference metric {k:?} is not reported; ignored");
            }
            Some(rows)
        }
        None => None,
    };
    let mut dir = OutDir::create(out, manifest)?;
    dir.write("report.json", report.to_json()?)?;
    let mut text = report.to_text();
    if let Some(rows) = &cmp {
        text.push('\n');
        text.push_str(&comparison_text(rows));
        dir.write("comparison.json", pretty(rows)?)?;
    }
    print!("{text}");
    dir.write("report.txt", text)?;
    dir.finish()
}
