//! Functional and analytical model of the sparse LSTM accelerator.
//!
//! Two multiplier arrays of `R_S` and `R_L` multipliers are split evenly over
//! `Q` Gate modules. The MA selector routes the weight set with more
//! nonzeros per row to the large array. Each Gate module walks its share of
//! the `4H` gate rows, reducing products through a three-input adder tree,
//! accumulating and adding the bias; Function modules apply the activations
//! and the cell update, overlapped with the Gate work.
//!
//! Timing is schedule arithmetic:
//!
//! ```text
//! per_row = max(ceil(X_SP / Rx_pm), ceil(H_SP / Rh_pm))
//! gate    = ceil(4H / Q) * per_row
//! fill    = tree_depth(R / Q) + 3
//! drain   = 3
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lstm::{check_len, Gate, LstmDims, LstmState};
use crate::memory::{MemoryImage, MemorySizes, WeightSet};
use crate::numerics::{adder_tree_depth, adder_tree_nodes, adder_tree_sum, ActivationTables, FixedSpec, PwlSettings};

/// Accumulate, bias and activation stages behind the adder tree.
pub const POST_TREE_STAGES: usize = 3;
/// Cell update, `tanh(c)` and output product after the last gate row.
pub const FUNCTION_DEPTH: usize = 3;
/// Bits per BRAM block.
pub const BRAM_BITS: usize = 36 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccelConfig {
    pub dims: LstmDims,
    pub x_sp: usize,
    pub h_sp: usize,
    #[serde(skip)]
    pub spec: FixedSpec,
    pub n: u32,
    pub r_s: usize,
    pub r_l: usize,
    pub q: usize,
    /// Multipliers serving `W_x` / `W_h`, across all modules.
    pub r_x: usize,
    pub r_h: usize,
    pub freq_mhz: f64,
    pub pwl: PwlSettings,
    pub addr_bits: u32,
}

/// `R_S` whose split of `r` best matches `k_small / k_large`. Ties take the
/// smaller `R_S`.
pub fn split_multipliers(r: usize, k_small: usize, k_large: usize) -> Result<(usize, usize)> {
    if r < 2 {
        return Err(Error::Config(format!("R = {r}, need at least 2 multipliers")));
    }
    let target = if k_large == 0 { 1.0 } else { k_small as f64 / k_large as f64 };
    let mut best = 1;
    let mut best_err = f64::INFINITY;
    for r_s in 1..r {
        let err = (r_s as f64 / (r - r_s) as f64 - target).abs();
        if err < best_err - 1e-12 {
            best = r_s;
            best_err = err;
        }
    }
    Ok((best, r - best))
}

impl AccelConfig {
    pub fn r(&self) -> usize {
        self.r_s + self.r_l
    }

    /// `W_x` multipliers per Gate module.
    pub fn rx_per_module(&self) -> usize {
        self.r_x / self.q
    }

    pub fn rh_per_module(&self) -> usize {
        self.r_h / self.q
    }

    pub fn x_on_large(&self) -> bool {
        self.x_sp > self.h_sp
    }

    pub fn tables(&self) -> Result<ActivationTables> {
        ActivationTables::new(self.spec, self.pwl)
    }
}

/// Chooses the MA split for the given row widths and assigns the arrays.
pub fn configure(dims: LstmDims, x_sp: usize, h_sp: usize, r: usize, q: usize, freq_mhz: f64) -> Result<AccelConfig> {
    let (r_s, r_l) = split_multipliers(r, x_sp.min(h_sp), x_sp.max(h_sp))?;
    configure_split(dims, x_sp, h_sp, r_s, r_l, q, freq_mhz)
}

/// Like [`configure`] with an explicit `(R_S, R_L)` split.
pub fn configure_split(
    dims: LstmDims,
    x_sp: usize,
    h_sp: usize,
    r_s: usize,
    r_l: usize,
    q: usize,
    freq_mhz: f64,
) -> Result<AccelConfig> {
    if r_s + r_l < 2 || r_s == 0 || r_l == 0 {
        return Err(Error::Config(format!("R_S = {r_s}, R_L = {r_l}: both arrays need multipliers")));
    }
    if q == 0 || q > 4 * dims.hidden {
        return Err(Error::Config(format!("Q = {q} outside 1..={}", 4 * dims.hidden)));
    }
    if r_s < q || r_l < q {
        return Err(Error::Config(format!(
            "R_S = {r_s}, R_L = {r_l} cannot give each of {q} modules a multiplier"
        )));
    }
    if x_sp > dims.input || h_sp > dims.hidden {
        return Err(Error::Config("nonzeros per row exceed matrix width".into()));
    }
    if !(freq_mhz > 0.0 && freq_mhz.is_finite()) {
        return Err(Error::Config(format!("frequency {freq_mhz} MHz")));
    }
    let x_large = x_sp > h_sp;
    let (r_x, r_h) = if x_large { (r_l, r_s) } else { (r_s, r_l) };
    let spec = FixedSpec::Q4_12;
    Ok(AccelConfig {
        dims,
        x_sp,
        h_sp,
        spec,
        n: spec.width_bits(),
        r_s,
        r_l,
        q,
        r_x,
        r_h,
        freq_mhz,
        pwl: PwlSettings::default(),
        addr_bits: crate::sparse::DEFAULT_ADDR_BITS,
    })
}

impl AccelConfig {
    pub fn with_spec(mut self, spec: FixedSpec) -> Self {
        self.spec = spec;
        self.n = spec.width_bits();
        self
    }

    pub fn with_pwl(mut self, pwl: PwlSettings) -> Self {
        self.pwl = pwl;
        self
    }

    pub fn with_addr_bits(mut self, bits: u32) -> Self {
        self.addr_bits = bits;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleReport {
    pub cycles_per_timestep: usize,
    pub gate_cycles: usize,
    pub pipeline_fill: usize,
    pub function_drain: usize,
    pub per_row_cycles: usize,
    pub rows_per_module: usize,
    pub utilization_small: f64,
    pub utilization_large: f64,
    pub ops_actual: u64,
    pub ops_dense: u64,
}

fn ops(h: usize, x_cols: usize, h_cols: usize) -> u64 {
    let rows = 4 * h as u64;
    // two per MAC, then per hidden unit four element-wise ops plus four
    // activation evaluations
    2 * rows * (x_cols + h_cols) as u64 + 4 * h as u64 + 4 * h as u64
}

/// Analytical schedule of one timestep.
pub fn cycle_schedule(cfg: &AccelConfig) -> CycleReport {
    let (rx, rh) = (cfg.rx_per_module(), cfg.rh_per_module());
    let per_row = cfg.x_sp.div_ceil(rx).max(cfg.h_sp.div_ceil(rh)).max(1);
    let rows_per_module = (4 * cfg.dims.hidden).div_ceil(cfg.q);
    let gate_cycles = rows_per_module * per_row;
    let pipeline_fill = adder_tree_depth(cfg.r() / cfg.q) + POST_TREE_STAGES;
    let slots = (cfg.q * rows_per_module * per_row) as f64;
    let rows = (4 * cfg.dims.hidden) as f64;
    let util = |k: usize, width: usize| rows * k as f64 / (slots * width as f64);
    let (ux, uh) = (util(cfg.x_sp, rx), util(cfg.h_sp, rh));
    let (utilization_small, utilization_large) = if cfg.x_on_large() { (uh, ux) } else { (ux, uh) };
    CycleReport {
        cycles_per_timestep: gate_cycles + pipeline_fill + FUNCTION_DEPTH,
        gate_cycles,
        pipeline_fill,
        function_drain: FUNCTION_DEPTH,
        per_row_cycles: per_row,
        rows_per_module,
        utilization_small,
        utilization_large,
        ops_actual: ops(cfg.dims.hidden, cfg.x_sp, cfg.h_sp),
        ops_dense: ops(cfg.dims.hidden, cfg.dims.input, cfg.dims.hidden),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub sparsity: f64,
    pub gops: f64,
    pub effective_gops: f64,
    pub effective_per_dsp: f64,
    pub effective_per_lut: f64,
    pub power_w: &'static str,
    pub gops_per_w: &'static str,
}

/// `gops = ops * f / cycles`, `effective = gops / (1 - sparsity)`.
pub fn throughput_report(
    cfg: &AccelConfig,
    sparsity: f64,
    cycles: &CycleReport,
    resources: &ResourceEstimate,
) -> Result<ThroughputReport> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::OutOfRange(format!("sparsity {sparsity} outside [0, 1)")));
    }
    if cycles.cycles_per_timestep == 0 {
        return Err(Error::OutOfRange("zero cycles".into()));
    }
    let gops = cycles.ops_actual as f64 * cfg.freq_mhz / (cycles.cycles_per_timestep as f64 * 1000.0);
    let effective_gops = gops / (1.0 - sparsity);
    Ok(ThroughputReport {
        sparsity,
        gops,
        effective_gops,
        effective_per_dsp: effective_gops / resources.dsp_count.max(1) as f64,
        effective_per_lut: effective_gops / resources.lut_estimate.max(1) as f64,
        power_w: "n/a",
        gops_per_w: "n/a",
    })
}

/// Weight sparsity implied by the row widths: `1 - (X_SP + H_SP) / (X + H)`.
pub fn structural_sparsity(cfg: &AccelConfig) -> f64 {
    let d = cfg.dims;
    1.0 - (cfg.x_sp + cfg.h_sp) as f64 / (d.input + d.hidden) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceEstimate {
    pub dsp_count: usize,
    pub bram_count: usize,
    pub lut_estimate: usize,
    pub trace: Vec<String>,
}

fn brams(bits: usize) -> usize {
    bits.div_ceil(BRAM_BITS)
}

/// Loose DSP / BRAM / LUT counts from documented formulas.
pub fn estimate_resources(cfg: &AccelConfig) -> ResourceEstimate {
    let r = cfg.r();
    let per_module = r / cfg.q;
    let tree = adder_tree_nodes(per_module);
    let dsp_count = r + cfg.q * (tree + 4);
    let mut trace = vec![format!(
        "dsp = R + Q*(tree_adders(R/Q) + 4) = {r} + {}*({tree} + 4) = {dsp_count}",
        cfg.q
    )];

    let geometry = crate::memory::ImageGeometry {
        hidden: cfg.dims.hidden,
        input: cfg.dims.input,
        x_sp: cfg.x_sp,
        h_sp: cfg.h_sp,
        spec: cfg.spec,
        r_x: cfg.rx_per_module().max(1),
        r_h: cfg.rh_per_module().max(1),
        addr_bits: cfg.addr_bits,
    };
    let s: MemorySizes = geometry.sizes();
    let x_copies = cfg.r_x.div_ceil(2);
    let h_copies = cfg.r_h.div_ceil(2);
    let arrays = [
        ("M_WX", s.m_wx_physical_bits, 1),
        ("M_AdX", s.m_adx_physical_bits, 1),
        ("M_WH", s.m_wh_physical_bits, 1),
        ("M_AdH", s.m_adh_physical_bits, 1),
        ("M_B", s.m_b_bits, 1),
        ("M_X", s.m_x_bits, x_copies),
        ("M_H", s.m_h_bits, h_copies),
        ("M_C", s.m_c_bits, 1),
    ];
    let mut bram_count = 0;
    for (name, bits, copies) in arrays {
        let b = brams(bits) * copies;
        bram_count += b;
        trace.push(format!("bram {name} = ceil({bits}/{BRAM_BITS}) * {copies} = {b}"));
    }

    let n = cfg.n as usize;
    let w = cfg.addr_bits as usize;
    let lut_estimate = r * (4 * n + w) + cfg.q * (2 * cfg.pwl.segments + 8 * n);
    trace.push(format!(
        "lut = R*(4n + w_addr) + Q*(2*segments + 8n) = {r}*({} + {w}) + {}*({} + {}) = {lut_estimate}",
        4 * n,
        cfg.q,
        2 * cfg.pwl.segments,
        8 * n
    ));
    ResourceEstimate {
        dsp_count,
        bram_count,
        lut_estimate,
        trace,
    }
}

/// Executes timesteps by reading weights out of a [`MemoryImage`].
pub struct Accelerator {
    cfg: AccelConfig,
    tables: ActivationTables,
}

impl Accelerator {
    pub fn new(cfg: AccelConfig) -> Result<Self> {
        let tables = cfg.tables()?;
        Ok(Self { cfg, tables })
    }

    pub fn config(&self) -> &AccelConfig {
        &self.cfg
    }

    pub fn tables(&self) -> &ActivationTables {
        &self.tables
    }

    fn check_image(&self, image: &MemoryImage) -> Result<()> {
        let g = image.geometry();
        let c = &self.cfg;
        if g.spec != c.spec {
            return Err(Error::SpecMismatch {
                left: c.spec,
                right: g.spec,
            });
        }
        let want = [
            ("H", c.dims.hidden, g.hidden),
            ("X", c.dims.input, g.input),
            ("X_SP", c.x_sp, g.x_sp),
            ("H_SP", c.h_sp, g.h_sp),
            ("R_x per module", c.rx_per_module(), g.r_x),
            ("R_h per module", c.rh_per_module(), g.r_h),
        ];
        for (name, expected, found) in want {
            if expected != found {
                return Err(Error::Config(format!(
                    "image {name} = {found} but the accelerator expects {expected}"
                )));
            }
        }
        Ok(())
    }

    /// One timestep: gate rows are dealt round-robin to the Q modules, each
    /// row's products go through the adder tree, then the bias; the Function
    /// stage consumes the four gate values of each hidden unit.
    pub fn simulate_timestep(
        &self,
        image: &MemoryImage,
        x: &[i32],
        state: &LstmState<i32>,
    ) -> Result<(LstmState<i32>, CycleReport)> {
        self.check_image(image)?;
        let spec = self.cfg.spec;
        let h = self.cfg.dims.hidden;
        check_len("input x", x.len(), self.cfg.dims.input)?;
        check_len("state h", state.h.len(), h)?;
        check_len("state c", state.c.len(), h)?;
        if let Some(&bad) = x.iter().chain(&state.h).chain(&state.c).find(|&&v| !spec.contains(v)) {
            return Err(Error::OutOfRange(format!("operand {bad} exceeds {} bits", spec.width_bits())));
        }

        let mut pre = vec![0i32; 4 * h];
        let mut terms = Vec::with_capacity(self.cfg.x_sp + self.cfg.h_sp);
        for module in 0..self.cfg.q {
            for row in (module..4 * h).step_by(self.cfg.q) {
                let (r, gate) = (row / 4, Gate::ALL[row % 4]);
                let (wx, cx) = image.fetch_row(gate, r, WeightSet::Input)?;
                let (wh, ch) = image.fetch_row(gate, r, WeightSet::Recurrent)?;
                terms.clear();
                terms.extend(wx.iter().zip(&cx).map(|(&w, &c)| spec.mul(w, x[c])));
                terms.extend(wh.iter().zip(&ch).map(|(&w, &c)| spec.mul(w, state.h[c])));
                let sum = adder_tree_sum(spec, &terms);
                pre[row] = spec.add(sum, image.fetch_bias(gate, r)?);
            }
        }

        let t = &self.tables;
        let mut next = LstmState::zeros(h);
        for r in 0..h {
            let f = t.sigmoid.eval_raw(pre[4 * r]);
            let i = t.sigmoid.eval_raw(pre[4 * r + 1]);
            let g = t.tanh.eval_raw(pre[4 * r + 2]);
            let o = t.sigmoid.eval_raw(pre[4 * r + 3]);
            let c = spec.add(spec.mul(f, state.c[r]), spec.mul(i, g));
            next.c[r] = c;
            next.h[r] = spec.mul(o, t.tanh.eval_raw(c));
        }
        Ok((next, cycle_schedule(&self.cfg)))
    }

    /// Runs a whole sequence from `init` (zeros when `None`).
    pub fn simulate_sequence(
        &self,
        image: &MemoryImage,
        inputs: &[Vec<i32>],
        init: Option<LstmState<i32>>,
    ) -> Result<(Vec<LstmState<i32>>, CycleReport)> {
        let mut state = init.unwrap_or_else(|| LstmState::zeros(self.cfg.dims.hidden));
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            state = self.simulate_timestep(image, x, &state)?.0;
            out.push(state.clone());
        }
        Ok((out, cycle_schedule(&self.cfg)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccelReport {
    pub config: AccelConfig,
    pub cycles: CycleReport,
    pub throughput: ThroughputReport,
    pub resources: ResourceEstimate,
    pub memory: MemorySizes,
}

impl AccelReport {
    pub fn build(cfg: &AccelConfig, sparsity: f64) -> Result<Self> {
        let cycles = cycle_schedule(cfg);
        let resources = estimate_resources(cfg);
        let throughput = throughput_report(cfg, sparsity, &cycles, &resources)?;
        let memory = crate::memory::ImageGeometry {
            hidden: cfg.dims.hidden,
            input: cfg.dims.input,
            x_sp: cfg.x_sp,
            h_sp: cfg.h_sp,
            spec: cfg.spec,
            r_x: cfg.rx_per_module().max(1),
            r_h: cfg.rh_per_module().max(1),
            addr_bits: cfg.addr_bits,
        }
        .sizes();
        Ok(Self {
            config: *cfg,
            cycles,
            throughput,
            resources,
            memory,
        })
    }

    /// Scalar fields by name, for comparisons against reference numbers.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let c = &self.cycles;
        let t = &self.throughput;
        let r = &self.resources;
        [
            ("cycles_per_timestep", c.cycles_per_timestep as f64),
            ("utilization_small", c.utilization_small),
            ("utilization_large", c.utilization_large),
            ("ops_actual", c.ops_actual as f64),
            ("ops_dense", c.ops_dense as f64),
            ("gops", t.gops),
            ("effective_gops", t.effective_gops),
            ("effective_per_dsp", t.effective_per_dsp),
            ("dsp_count", r.dsp_count as f64),
            ("bram_count", r.bram_count as f64),
            ("lut_estimate", r.lut_estimate as f64),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut rows: Vec<(String, String)> = vec![
            ("H x X".into(), format!("{} x {}", c.dims.hidden, c.dims.input)),
            ("X_SP / H_SP".into(), format!("{} / {}", c.x_sp, c.h_sp)),
            ("R_S / R_L".into(), format!("{} / {}", c.r_s, c.r_l)),
            ("R_x / R_h".into(), format!("{} / {}", c.r_x, c.r_h)),
            ("Q".into(), c.q.to_string()),
            ("n / f".into(), format!("{} / {}", c.spec.width_bits(), c.spec.frac_bits())),
            ("frequency (MHz)".into(), format!("{}", c.freq_mhz)),
            ("cycles / timestep".into(), self.cycles.cycles_per_timestep.to_string()),
            (
                "  gate / fill / drain".into(),
                format!(
                    "{} / {} / {}",
                    self.cycles.gate_cycles, self.cycles.pipeline_fill, self.cycles.function_drain
                ),
            ),
            (
                "utilization S / L".into(),
                format!("{:.4} / {:.4}", self.cycles.utilization_small, self.cycles.utilization_large),
            ),
            ("sparsity".into(), format!("{:.4}", self.throughput.sparsity)),
            ("GOPS".into(), format!("{:.2}", self.throughput.gops)),
            ("effective GOPS".into(), format!("{:.2}", self.throughput.effective_gops)),
            ("DSP".into(), self.resources.dsp_count.to_string()),
            ("BRAM (36Kb)".into(), self.resources.bram_count.to_string()),
            ("LUT (estimate)".into(), self.resources.lut_estimate.to_string()),
            ("power".into(), self.throughput.power_w.to_string()),
        ];
        rows.push(("M_WX / M_WH bits".into(), format!("{} / {}", self.memory.m_wx_bits, self.memory.m_wh_bits)));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<width$}  {v}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub ours: f64,
    pub reference: f64,
    pub delta: f64,
    /// `None` when the reference is zero.
    pub delta_pct: Option<f64>,
}

/// Deltas for every reference key the report knows; unknown keys are
/// returned separately.
pub fn compare(report: &AccelReport, reference: &BTreeMap<String, f64>) -> (Vec<Comparison>, Vec<String>) {
    let ours = report.metrics();
    let mut out = Vec::new();
    let mut unknown = Vec::new();
    for (k, &refv) in reference {
        match ours.get(k) {
            Some(&v) => out.push(Comparison {
                metric: k.clone(),
                ours: v,
                reference: refv,
                delta: v - refv,
                delta_pct: (refv != 0.0).then(|| 100.0 * (v - refv) / refv),
            }),
            None => unknown.push(k.clone()),
        }
    }
    (out, unknown)
}

pub fn comparison_text(rows: &[Comparison]) -> String {
    let mut s = format!("{:<22} {:>14} {:>14} {:>14} {:>9}\n", "metric", "ours", "reference", "delta", "delta%");
    for r in rows {
        let pct = r.delta_pct.map_or("n/a".to_string(), |p| format!("{p:+.1}"));
        let _ = writeln!(s, "{:<22} {:>14.3} {:>14.3} {:>+14.3} {:>9}", r.metric, r.ours, r.reference, r.delta, pct);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::{lstm_step_fixed, FixedParams, LstmParams};
    use crate::memory::ImageContents;
    use crate::sparse::RowBalancedMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn timit() -> AccelConfig {
        configure_split(LstmDims::new(153, 1024).unwrap(), 20, 64, 80, 256, 4, 200.0).unwrap()
    }

    #[test]
    fn split_matches_row_ratio() {
        assert_eq!(split_multipliers(336, 20, 64).unwrap(), (80, 256));
        assert_eq!(split_multipliers(10, 7, 7).unwrap(), (5, 5));
        assert_eq!(split_multipliers(2, 1, 1).unwrap(), (1, 1));
        assert!(split_multipliers(1, 1, 1).is_err());
        let d = LstmDims::new(1, 1).unwrap();
        let c = configure(d, 1, 1, 2, 1, 100.0).unwrap();
        assert_eq!((c.r_s, c.r_l, c.r_x, c.r_h), (1, 1, 1, 1));
    }

    #[test]
    fn selector_gives_large_array_to_wider_rows() {
        let d = LstmDims::new(64, 32).unwrap();
        let c = configure(d, 30, 10, 40, 2, 100.0).unwrap();
        assert_eq!((c.r_s, c.r_l), (10, 30));
        assert_eq!((c.r_x, c.r_h), (30, 10));
        let c = timit();
        assert_eq!((c.r_x, c.r_h), (80, 256));
    }

    #[test]
    fn configuration_errors() {
        let d = LstmDims::new(4, 2).unwrap();
        assert!(configure(d, 2, 2, 1, 1, 100.0).unwrap_err().is_config());
        assert!(configure(d, 2, 2, 8, 9, 100.0).is_err());
        assert!(configure(d, 2, 2, 8, 0, 100.0).is_err());
        // R_S = 1 cannot feed two modules
        assert!(configure_split(d, 1, 2, 1, 7, 2, 100.0).is_err());
    }

    #[test]
    fn timit_schedule() {
        let c = cycle_schedule(&timit());
        assert_eq!(c.per_row_cycles, 1);
        assert_eq!(c.gate_cycles, 1024);
        assert_eq!(c.pipeline_fill, adder_tree_depth(84) + 3);
        assert_eq!(c.cycles_per_timestep, 1024 + 5 + 3 + 3);
        assert_eq!((c.utilization_small, c.utilization_large), (1.0, 1.0));
        assert_eq!(c.ops_actual, 2 * 4096 * 84 + 8 * 1024);
    }

    #[test]
    fn effective_throughput_relation() {
        let cfg = timit();
        let rep = AccelReport::build(&cfg, 0.875).unwrap();
        assert_eq!(rep.throughput.effective_gops, rep.throughput.gops / 0.125);
        assert_eq!(rep.throughput.effective_gops * (1.0 - 0.875), rep.throughput.gops);
        let dense = AccelReport::build(&cfg, 0.0).unwrap();
        assert_eq!(dense.throughput.effective_gops, dense.throughput.gops);
        assert!(AccelReport::build(&cfg, 1.0).is_err());
        // 200 GOPS at 87.5% sparsity is 1600 effective
        let r = ResourceEstimate {
            dsp_count: 1,
            bram_count: 0,
            lut_estimate: 1,
            trace: vec![],
        };
        let fake = CycleReport {
            ops_actual: 200_000,
            cycles_per_timestep: 200,
            ..cycle_schedule(&cfg)
        };
        let t = throughput_report(&cfg, 0.875, &fake, &r).unwrap();
        assert_eq!((t.gops, t.effective_gops), (200.0, 1600.0));
        let half = CycleReport {
            cycles_per_timestep: 100,
            ..fake
        };
        assert_eq!(throughput_report(&cfg, 0.875, &half, &r).unwrap().gops, 400.0);
    }

    #[test]
    fn resource_formulas() {
        let d = LstmDims::new(2, 2).unwrap();
        let c = configure(d, 1, 1, 2, 1, 100.0).unwrap();
        assert_eq!(estimate_resources(&c).dsp_count, 7);
        let b = brams(4 * 1024 * 16);
        assert_eq!(b, 2);
        let d = LstmDims::new(64, 64).unwrap();
        let a = estimate_resources(&configure_split(d, 16, 16, 32, 32, 2, 100.0).unwrap());
        let b = estimate_resources(&configure_split(d, 16, 16, 32, 32, 4, 100.0).unwrap());
        assert_eq!(a.dsp_count - 64, 2 * (adder_tree_nodes(32) + 4));
        assert_eq!(b.dsp_count - 64, 4 * (adder_tree_nodes(16) + 4));
        let r = estimate_resources(&timit());
        assert!(r.trace.iter().any(|l| l.starts_with("bram M_B = ceil(65536/36864) * 1 = 2")));
    }

    fn random_model(rng: &mut ChaCha8Rng, x: usize, h: usize, kx: usize, kh: usize) -> ImageContents {
        let spec = FixedSpec::Q4_12;
        let mut sparse = |rows: usize, cols: usize, k: usize| {
            let mut m = crate::tensor::Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in rand::seq::index::sample(rng, cols, k) {
                    m.set(r, c, rng.gen_range(spec.min_raw()..=spec.max_raw()) / 4);
                }
            }
            RowBalancedMatrix::encode(&m, 8).unwrap()
        };
        let wx = std::array::from_fn(|_| sparse(h, x, kx));
        let wh = std::array::from_fn(|_| sparse(h, h, kh));
        ImageContents {
            wx,
            wh,
            bias: std::array::from_fn(|_| (0..h).map(|_| rng.gen_range(-4096..4096)).collect()),
        }
    }

    fn dense(c: &ImageContents) -> FixedParams {
        FixedParams {
            spec: FixedSpec::Q4_12,
            params: LstmParams {
                wx: std::array::from_fn(|g| c.wx[g].decode()),
                wh: std::array::from_fn(|g| c.wh[g].decode()),
                bias: c.bias.clone(),
            },
        }
    }

    #[test]
    fn dense_as_sparse_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_model(&mut rng, 4, 4, 4, 4);
        let cfg = configure(LstmDims::new(4, 4).unwrap(), 4, 4, 8, 2, 100.0).unwrap();
        let img = MemoryImage::build(&c, cfg.rx_per_module(), cfg.rh_per_module(), 8, cfg.spec).unwrap();
        let acc = Accelerator::new(cfg).unwrap();
        let x: Vec<i32> = (0..4).map(|_| rng.gen_range(-8192..8192)).collect();
        let state = LstmState {
            h: (0..4).map(|_| rng.gen_range(-4096..4096)).collect(),
            c: (0..4).map(|_| rng.gen_range(-8192..8192)).collect(),
        };
        let (got, _) = acc.simulate_timestep(&img, &x, &state).unwrap();
        let want = lstm_step_fixed(&dense(&c), &x, &state, acc.tables()).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn module_count_changes_timing_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = LstmDims::new(12, 64).unwrap();
        let c = random_model(&mut rng, 12, 64, 3, 8);
        let run = |q: usize, rng: &mut ChaCha8Rng| {
            let cfg = configure_split(d, 3, 8, 12, 32, q, 100.0).unwrap();
            let img = MemoryImage::build(&c, cfg.rx_per_module(), cfg.rh_per_module(), 8, cfg.spec).unwrap();
            let x: Vec<i32> = (0..12).map(|_| rng.gen_range(-4096..4096)).collect();
            Accelerator::new(cfg).unwrap().simulate_timestep(&img, &x, &LstmState::zeros(64)).unwrap()
        };
        let (s1, c1) = run(1, &mut ChaCha8Rng::seed_from_u64(9));
        let (s4, c4) = run(4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(s1, s4);
        assert_eq!(c1.gate_cycles, 4 * c4.gate_cycles);
        let ratio = c1.cycles_per_timestep as f64 / c4.cycles_per_timestep as f64;
        assert!((3.5..=4.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rejects_mismatched_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_model(&mut rng, 4, 4, 2, 2);
        let cfg = configure(LstmDims::new(4, 4).unwrap(), 2, 2, 4, 1, 100.0).unwrap();
        let wrong_width = MemoryImage::build(&c, 1, 1, 8, cfg.spec).unwrap();
        let acc = Accelerator::new(cfg).unwrap();
        let s = LstmState::zeros(4);
        assert!(acc.simulate_timestep(&wrong_width, &[0; 4], &s).unwrap_err().is_config());
        let other_spec = FixedSpec::new(16, 10).unwrap();
        let img = MemoryImage::build(&c, 2, 2, 8, other_spec).unwrap();
        assert!(matches!(acc.simulate_timestep(&img, &[0; 4], &s), Err(Error::SpecMismatch { .. })));
        let img = MemoryImage::build(&c, 2, 2, 8, cfg.spec).unwrap();
        assert!(acc.simulate_timestep(&img, &[0; 3], &s).is_err());
        assert!(acc.simulate_timestep(&img, &[40000, 0, 0, 0], &s).is_err());
    }

    #[test]
    fn report_text_and_compare() {
        let rep = AccelReport::build(&timit(), 0.875).unwrap();
        let text = rep.to_text();
        assert!(text.contains("R_S / R_L"));
        assert!(text.contains("80 / 256"));
        let reference: BTreeMap<String, f64> =
            [("effective_gops".to_string(), 1600.0), ("power".to_string(), 9.0)].into_iter().collect();
        let (rows, unknown) = compare(&rep, &reference);
        assert_eq!(rows.len(), 1);
        assert_eq!(unknown, vec!["power".to_string()]);
        assert_eq!(rows[0].delta, rep.throughput.effective_gops - 1600.0);
        assert!(comparison_text(&rows).contains("effective_gops"));
        let json = rep.to_json().unwrap();
        assert!(json.contains("\"power_w\": \"n/a\""));
    }
}
