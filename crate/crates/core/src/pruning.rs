//! Row-balanced magnitude pruning and the dual-ratio sparsity search.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{Gate, LstmDims, LstmParams};
use crate::model::weight_name;
use crate::tensor::{Mask, Matrix};

/// Slack for float ratio arithmetic so that `40 / 5` counts as 8 steps.
const RATIO_EPS: f64 = 1e-9;

fn check_percent(what: &str, p: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::OutOfRange(format!("{what} = {p} is not a percentage")));
    }
    Ok(())
}

/// Entries kept per row: `cols - floor(spar/100 * cols)`.
pub fn keep_count(cols: usize, spar: f64) -> usize {
    let pruned = ((spar * cols as f64) / 100.0 + RATIO_EPS).floor() as usize;
    cols - pruned.min(cols)
}

/// Keeps the `keep_count` largest magnitudes of every row. Ties keep the
/// lower column.
pub fn prune_row_balanced(w: &Matrix<f64>, spar: f64) -> Result<(Matrix<f64>, Mask)> {
    check_percent("sparsity", spar)?;
    let k = keep_count(w.cols(), spar);
    let mut pruned = Matrix::zeros(w.rows(), w.cols());
    let mut mask = Mask::filled(w.rows(), w.cols(), false);
    let mut order: Vec<usize> = Vec::with_capacity(w.cols());
    for r in 0..w.rows() {
        let row = w.row(r);
        order.clear();
        order.extend(0..w.cols());
        // stable sort keeps lower columns first among equal magnitudes
        order.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()));
        for &c in &order[..k] {
            pruned.set(r, c, row[c]);
            mask.set(r, c, true);
        }
    }
    Ok((pruned, mask))
}

/// Masks of the eight LSTM weight matrices, indexed by gate.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMasks {
    pub wx: [Mask; 4],
    pub wh: [Mask; 4],
}

#[derive(Serialize, Deserialize)]
struct MaskDocument {
    #[serde(rename = "Spar_x")]
    spar_x: f64,
    #[serde(rename = "Spar_h")]
    spar_h: f64,
    masks: BTreeMap<String, Vec<String>>,
}

fn mask_rows(m: &Mask) -> Vec<String> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&k| if k { '1' } else { '0' }).collect())
        .collect()
}

fn parse_mask(rows: &[String]) -> Result<Mask> {
    let rows = rows
        .iter()
        .map(|s| {
            s.chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    other => Err(Error::Model(format!("mask character {other:?}"))),
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

impl DualMasks {
    pub fn all_kept(dims: LstmDims) -> Self {
        Self {
            wx: std::array::from_fn(|_| Mask::filled(dims.hidden, dims.input, true)),
            wh: std::array::from_fn(|_| Mask::filled(dims.hidden, dims.hidden, true)),
        }
    }

    pub fn dims(&self) -> LstmDims {
        LstmDims {
            input: self.wx[0].cols(),
            hidden: self.wx[0].rows(),
        }
    }

    /// Fails unless every mask matches `dims` and is row-balanced.
    pub fn validate(&self, dims: LstmDims) -> Result<()> {
        let sets = [(&self.wx, dims.input), (&self.wh, dims.hidden)];
        for (set, cols) in sets {
            let k = if set[0].rows() > 0 { set[0].row_count(0) } else { 0 };
            for m in set.iter() {
                if m.shape() != (dims.hidden, cols) {
                    return Err(Error::DimensionMismatch {
                        context: "mask shape",
                        expected: dims.hidden * cols,
                        found: m.rows() * m.cols(),
                    });
                }
                for r in 0..m.rows() {
                    if m.row_count(r) != k {
                        return Err(Error::Unbalanced {
                            row: r,
                            expected: k,
                            found: m.row_count(r),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Zeroes every masked position of `params`.
    pub fn apply(&self, params: &mut LstmParams<f64>) {
        let pairs = params.wx.iter_mut().zip(&self.wx).chain(params.wh.iter_mut().zip(&self.wh));
        for (w, m) in pairs {
            for (v, &keep) in w.as_mut_slice().iter_mut().zip(m.as_slice()) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn to_json(&self, spar_x: f64, spar_h: f64) -> Result<String> {
        let mut masks = BTreeMap::new();
        for g in Gate::ALL {
            masks.insert(weight_name(g, false), mask_rows(&self.wx[g.index()]));
            masks.insert(weight_name(g, true), mask_rows(&self.wh[g.index()]));
        }
        let mut s = serde_json::to_string_pretty(&MaskDocument {
            spar_x,
            spar_h,
            masks,
        })?;
        s.push('\n');
        Ok(s)
    }

    /// Returns the masks and the recorded `(Spar_x, Spar_h)`.
    pub fn from_json(text: &str) -> Result<(Self, f64, f64)> {
        let mut doc: MaskDocument = serde_json::from_str(text)?;
        let mut take = |name: String| -> Result<Mask> {
            let rows = doc
                .masks
                .remove(&name)
                .ok_or_else(|| Error::Model(format!("missing mask {name}")))?;
            parse_mask(&rows)
        };
        let mut wx = Vec::with_capacity(4);
        let mut wh = Vec::with_capacity(4);
        for g in Gate::ALL {
            wx.push(take(weight_name(g, false))?);
            wh.push(take(weight_name(g, true))?);
        }
        let masks = Self {
            wx: wx.try_into().unwrap_or_else(|_| unreachable!("four gates")),
            wh: wh.try_into().unwrap_or_else(|_| unreachable!("four gates")),
        };
        masks.validate(masks.dims())?;
        Ok((masks, doc.spar_x, doc.spar_h))
    }
}

/// Prunes the four `W_x` matrices at `spar_x` and the four `W_h` at `spar_h`.
/// Biases are untouched.
pub fn apply_dual_prune(
    params: &LstmParams<f64>,
    spar_x: f64,
    spar_h: f64,
) -> Result<(LstmParams<f64>, DualMasks)> {
    check_percent("Spar_x", spar_x)?;
    check_percent("Spar_h", spar_h)?;
    let mut out = params.clone();
    let mut wx = Vec::with_capacity(4);
    let mut wh = Vec::with_capacity(4);
    for g in 0..4 {
        let (w, m) = prune_row_balanced(&params.wx[g], spar_x)?;
        out.wx[g] = w;
        wx.push(m);
        let (w, m) = prune_row_balanced(&params.wh[g], spar_h)?;
        out.wh[g] = w;
        wh.push(m);
    }
    let masks = DualMasks {
        wx: wx.try_into().unwrap_or_else(|_| unreachable!("four gates")),
        wh: wh.try_into().unwrap_or_else(|_| unreachable!("four gates")),
    };
    Ok((out, masks))
}

/// Share of all `W_x` / `W_h` weights removed by a `(spar_x, spar_h)` pair,
/// in percent, using the realised per-row keep counts.
pub fn overall_sparsity(dims: LstmDims, spar_x: f64, spar_h: f64) -> f64 {
    let (x, h) = (dims.input, dims.hidden);
    let kept = keep_count(x, spar_x) * h + keep_count(h, spar_h) * h;
    100.0 * (1.0 - kept as f64 / (x * h + h * h) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    #[serde(rename = "OS")]
    pub os: f64,
    pub alpha: f64,
    pub delta_x: f64,
    pub delta_h: f64,
}

impl SparsityConfig {
    pub fn new(os: f64, alpha: f64, delta_x: f64, delta_h: f64) -> Result<Self> {
        let cfg = Self {
            os,
            alpha,
            delta_x,
            delta_h,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.os > 0.0 && self.os < 100.0) {
            return Err(Error::Config(format!("OS = {} must lie in (0, 100)", self.os)));
        }
        for (name, v) in [("alpha", self.alpha), ("delta_x", self.delta_x), ("delta_h", self.delta_h)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    /// Ratios visited while ramping up to `OS`.
    pub fn ramp(&self) -> Vec<f64> {
        let steps = (self.os / self.alpha - RATIO_EPS).ceil().max(1.0) as usize;
        (1..=steps).map(|i| (i as f64 * self.alpha).min(self.os)).collect()
    }

    /// Iterations of the phase that raises `Spar_x` and lowers `Spar_h`.
    pub fn phase2_steps(&self) -> usize {
        ((100.0 - self.os) / self.delta_x)
            .min(self.os / self.delta_h)
            .add_eps_floor()
    }

    /// Iterations of the phase that raises `Spar_h` and lowers `Spar_x`.
    pub fn phase3_steps(&self) -> usize {
        ((100.0 - self.os) / self.delta_h)
            .min(self.os / self.delta_x)
            .add_eps_floor()
    }

    /// Candidates evaluated by [`brds_search`], the starting point included.
    pub fn candidate_count(&self) -> usize {
        1 + self.phase2_steps() + self.phase3_steps()
    }
}

trait EpsFloor {
    fn add_eps_floor(self) -> usize;
}

impl EpsFloor for f64 {
    fn add_eps_floor(self) -> usize {
        (self + RATIO_EPS).floor().max(0.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchCostEstimate {
    pub ept: f64,
    pub n_re: f64,
    pub ex1: f64,
    pub ex2: f64,
    pub ex3: f64,
    pub ex_tot: f64,
}

/// Time spent by the ramp and the two sweep phases.
pub fn estimate_search_time(cfg: &SparsityConfig, ept: f64, n_re: f64) -> Result<SearchCostEstimate> {
    for (name, v) in [
        ("alpha", cfg.alpha),
        ("delta_x", cfg.delta_x),
        ("delta_h", cfg.delta_h),
        ("ept", ept),
        ("n_re", n_re),
    ] {
        if !(v > 0.0) {
            return Err(Error::Config(format!("{name} = {v} must be positive")));
        }
    }
    let unit = ept * n_re;
    let ex1 = cfg.os / cfg.alpha * unit;
    let ex2 = ((100.0 - cfg.os) / cfg.delta_x).min(cfg.os / cfg.delta_h) * unit;
    let ex3 = ((100.0 - cfg.os) / cfg.delta_h).min(cfg.os / cfg.delta_x) * unit;
    Ok(SearchCostEstimate {
        ept,
        n_re,
        ex1,
        ex2,
        ex3,
        ex_tot: ex1 + ex2 + ex3,
    })
}

/// A network whose LSTM weights can be pruned. Extra layers (a readout, for
/// instance) ride along untouched.
pub trait Prunable: Clone {
    fn lstm(&self) -> &LstmParams<f64>;
    fn lstm_mut(&mut self) -> &mut LstmParams<f64>;
}

impl Prunable for LstmParams<f64> {
    fn lstm(&self) -> &LstmParams<f64> {
        self
    }

    fn lstm_mut(&mut self) -> &mut LstmParams<f64> {
        self
    }
}

fn prune_network<N: Prunable>(net: &N, spar_x: f64, spar_h: f64) -> Result<(N, DualMasks)> {
    let (params, masks) = apply_dual_prune(net.lstm(), spar_x, spar_h)?;
    let mut out = net.clone();
    *out.lstm_mut() = params;
    Ok((out, masks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// The uniform `(OS, OS)` network reached by the ramp.
    Initial,
    /// `Spar_x` rising, `Spar_h` falling.
    Up,
    /// `Spar_h` rising, `Spar_x` falling.
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: Phase,
    pub spar_x: f64,
    pub spar_h: f64,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

/// Trace as CSV; `n_re` is the retraining epoch count behind every row.
/// Wall time is only written when `with_time` is set, so that reruns can be
/// compared byte for byte.
pub fn trace_csv(rows: &[TraceRow], n_re: usize, with_time: bool) -> String {
    let mut s = String::from("iteration,phase,spar_x,spar_h,accuracy,n_re");
    s.push_str(if with_time { ",wall_time_s\n" } else { "\n" });
    for r in rows {
        let phase = match r.phase {
            Phase::Initial => "initial",
            Phase::Up => "up",
            Phase::Down => "down",
        };
        let _ = write!(s, "{},{},{},{},{},{}", r.iteration, phase, r.spar_x, r.spar_h, r.accuracy, n_re);
        if with_time {
            let _ = write!(s, ",{:.6}", r.wall_time_s);
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct PruneResult<N> {
    pub spar_x: f64,
    pub spar_h: f64,
    pub masks: DualMasks,
    pub accuracy: f64,
    pub network: N,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<N> {
    pub best: PruneResult<N>,
    /// The uniform `(OS, OS)` candidate.
    pub initial: PruneResult<N>,
    pub trace: Vec<TraceRow>,
}

struct Tracker<N> {
    best: Option<PruneResult<N>>,
    trace: Vec<TraceRow>,
    start: Instant,
}

impl<N: Clone> Tracker<N> {
    fn record(&mut self, phase: Phase, spar_x: f64, spar_h: f64, accuracy: f64, net: &N, masks: &DualMasks) {
        self.trace.push(TraceRow {
            iteration: self.trace.len(),
            phase,
            spar_x,
            spar_h,
            accuracy,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        });
        if !accuracy.is_finite() {
            log::warn!("discarding candidate ({spar_x}, {spar_h}): accuracy {accuracy}");
            return;
        }
        if self.best.as_ref().map_or(true, |b| accuracy > b.accuracy) {
            self.best = Some(PruneResult {
                spar_x,
                spar_h,
                masks: masks.clone(),
                accuracy,
                network: net.clone(),
            });
        }
    }
}

/// Dual-ratio search. `retrain` receives a freshly pruned network and its
/// masks and returns the retrained network; `evaluate` scores a network,
/// higher being better.
pub fn brds_search<N, R, E>(
    net: &N,
    cfg: &SparsityConfig,
    mut retrain: R,
    mut evaluate: E,
) -> Result<SearchOutcome<N>>
where
    N: Prunable,
    R: FnMut(&N, &DualMasks) -> Result<N>,
    E: FnMut(&N) -> Result<f64>,
{
    cfg.validate()?;
    let mut tracker = Tracker {
        best: None,
        trace: Vec::with_capacity(cfg.candidate_count()),
        start: Instant::now(),
    };

    let mut current = net.clone();
    let mut masks = DualMasks::all_kept(net.lstm().dims());
    for s in cfg.ramp() {
        let (pruned, m) = prune_network(&current, s, s)?;
        current = retrain(&pruned, &m)?;
        masks = m;
    }
    let nn_pi = current;
    let nn_pi_masks = masks;
    let acc = evaluate(&nn_pi)?;
    tracker.record(Phase::Initial, cfg.os, cfg.os, acc, &nn_pi, &nn_pi_masks);
    let initial = PruneResult {
        spar_x: cfg.os,
        spar_h: cfg.os,
        masks: nn_pi_masks,
        accuracy: acc,
        network: nn_pi.clone(),
    };

    let phases = [
        (Phase::Up, cfg.phase2_steps(), cfg.delta_x, -cfg.delta_h),
        (Phase::Down, cfg.phase3_steps(), -cfg.delta_x, cfg.delta_h),
    ];
    for (phase, steps, dx, dh) in phases {
        let mut current = nn_pi.clone();
        for j in 1..=steps {
            let x = (cfg.os + j as f64 * dx).clamp(0.0, 100.0);
            let h = (cfg.os + j as f64 * dh).clamp(0.0, 100.0);
            let (pruned, m) = prune_network(&current, x, h)?;
            current = retrain(&pruned, &m)?;
            let acc = evaluate(&current)?;
            tracker.record(phase, x, h, acc, &current, &m);
        }
    }

    let best = tracker
        .best
        .ok_or_else(|| Error::Model("no candidate produced a finite accuracy".into()))?;
    Ok(SearchOutcome {
        best,
        initial,
        trace: tracker.trace,
    })
}

/// Points of constant overall sparsity `os`: `Spar_x` steps by `step` over
/// `[0, 100]` and `Spar_h` absorbs the rest. The uniform point is always
/// included.
pub fn iso_sparsity_grid(dims: LstmDims, os: f64, step: f64) -> Result<Vec<(f64, f64)>> {
    check_percent("OS", os)?;
    if !(step > 0.0) {
        return Err(Error::Config(format!("grid step {step} must be positive")));
    }
    let (x, h) = (dims.input as f64, dims.hidden as f64);
    let mut grid = Vec::new();
    let n = (100.0 / step + RATIO_EPS).floor() as usize;
    for i in 0..=n {
        let sx = (i as f64 * step).min(100.0);
        let sh = (os * (x + h) - sx * x) / h;
        if (0.0..=100.0).contains(&sh) {
            grid.push((sx, sh));
        }
    }
    if !grid.iter().any(|&(a, b)| a == os && b == os) {
        grid.push((os, os));
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub spar_x: f64,
    pub spar_h: f64,
    pub overall: f64,
    pub accuracy: f64,
    pub uniform: bool,
}

/// Prunes the original network at every grid point, retrains and scores it.
/// The uniform `(os, os)` point is added when the grid lacks it.
pub fn dual_ratio_sweep<N, R, E>(
    net: &N,
    os: f64,
    grid: &[(f64, f64)],
    mut retrain: R,
    mut evaluate: E,
) -> Result<Vec<SweepPoint>>
where
    N: Prunable,
    R: FnMut(&N, &DualMasks) -> Result<N>,
    E: FnMut(&N) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut points = grid.to_vec();
    if !points.iter().any(|&(a, b)| a == os && b == os) {
        points.push((os, os));
    }
    let dims = net.lstm().dims();
    points
        .into_iter()
        .map(|(sx, sh)| {
            let (pruned, masks) = prune_network(net, sx, sh)?;
            let trained = retrain(&pruned, &masks)?;
            Ok(SweepPoint {
                spar_x: sx,
                spar_h: sh,
                overall: overall_sparsity(dims, sx, sh),
                accuracy: evaluate(&trained)?,
                uniform: sx == os && sh == os,
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("spar_x,spar_h,overall_sparsity,accuracy,uniform\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{}",
            p.spar_x, p.spar_h, p.overall, p.accuracy, p.uniform as u8
        );
    }
    s
}
