//! Desk-scale training: synthetic sequence tasks, an LSTM plus linear
//! readout, backpropagation through time and plain SGD with masked updates.
//!
//! Everything runs in `f64` with a fixed reduction order, so a seed fully
//! determines the trained weights.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{check_len, LstmDims, LstmParams};
use crate::model::Model;
use crate::numerics::FixedSpec;
use crate::pruning::{DualMasks, Prunable};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AddingProblem,
    SequenceParity,
    CharLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Target {
    /// Regression target read at the last step.
    Value(f64),
    /// Class read at the last step.
    Class(usize),
    /// One class per step.
    Sequence(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Example {
    pub inputs: Vec<Vec<f64>>,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seq_len: usize,
    /// Alphabet size, `char_lm` only.
    pub vocab: usize,
}

impl TaskSizes {
    pub fn for_kind(kind: TaskKind) -> Self {
        let seq_len = match kind {
            TaskKind::AddingProblem => 20,
            TaskKind::SequenceParity => 16,
            TaskKind::CharLm => 32,
        };
        let (train, val, test) = match kind {
            TaskKind::CharLm => (400, 100, 100),
            _ => (2000, 400, 400),
        };
        Self {
            train,
            val,
            test,
            seq_len,
            vocab: 8,
        }
    }
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self::for_kind(TaskKind::AddingProblem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Task {
    pub kind: TaskKind,
    pub seed: u64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub loss: LossKind,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn example_key(ex: &Example) -> Vec<u64> {
    ex.inputs.iter().flatten().map(|v| v.to_bits()).collect()
}

fn adding_example(rng: &mut ChaCha8Rng, t: usize) -> Example {
    let half = (t / 2).max(1);
    let a = rng.gen_range(0..half);
    let b = rng.gen_range(half..t.max(half + 1));
    let mut inputs = Vec::with_capacity(t);
    let mut sum = 0.0;
    for s in 0..t {
        let v: f64 = rng.gen();
        let marked = s == a || s == b;
        if marked {
            sum += v;
        }
        inputs.push(vec![v, if marked { 1.0 } else { 0.0 }]);
    }
    Example {
        inputs,
        target: Target::Value(sum),
    }
}

fn parity_example(rng: &mut ChaCha8Rng, t: usize) -> Example {
    let bits: Vec<usize> = (0..t).map(|_| rng.gen_range(0..2)).collect();
    Example {
        inputs: bits.iter().map(|&b| vec![b as f64]).collect(),
        target: Target::Class(bits.iter().sum::<usize>() % 2),
    }
}

/// Sparse-ish random transition matrix so the chain is learnable.
fn markov_chain(rng: &mut ChaCha8Rng, v: usize) -> Vec<Vec<f64>> {
    (0..v)
        .map(|_| {
            let w: Vec<f64> = (0..v).map(|_| rng.gen::<f64>().powi(4)).collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|x| x / total).collect()
        })
        .collect()
}

fn sample_from(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn char_example(rng: &mut ChaCha8Rng, chain: &[Vec<f64>], t: usize) -> Example {
    let v = chain.len();
    let mut chars = vec![rng.gen_range(0..v)];
    for _ in 0..t {
        let next = sample_from(rng, &chain[*chars.last().unwrap()]);
        chars.push(next);
    }
    let inputs = chars[..t]
        .iter()
        .map(|&c| (0..v).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
        .collect();
    Example {
        inputs,
        target: Target::Sequence(chars[1..].to_vec()),
    }
}

/// Builds a task with disjoint splits, reproducible from `seed`.
pub fn generate_task(kind: TaskKind, seed: u64, sizes: TaskSizes) -> Result<Task> {
    if sizes.seq_len < 2 {
        return Err(Error::Config("sequence length must be at least 2".into()));
    }
    if kind == TaskKind::CharLm && sizes.vocab < 2 {
        return Err(Error::Config("char_lm needs at least two symbols".into()));
    }
    let total = sizes.train + sizes.val + sizes.test;
    if kind == TaskKind::SequenceParity
        && sizes.seq_len < 63
        && (total as u64) > (1u64 << sizes.seq_len)
    {
        return Err(Error::Config(format!(
            "{total} distinct parity sequences of length {} do not exist",
            sizes.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = (kind == TaskKind::CharLm).then(|| markov_chain(&mut rng, sizes.vocab));
    let mut seen = HashSet::with_capacity(total);
    let mut all = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while all.len() < total {
        attempts += 1;
        if attempts > 100 * total + 1000 {
            return Err(Error::Config("could not draw enough distinct examples".into()));
        }
        let ex = match kind {
            TaskKind::AddingProblem => adding_example(&mut rng, sizes.seq_len),
            TaskKind::SequenceParity => parity_example(&mut rng, sizes.seq_len),
            TaskKind::CharLm => char_example(&mut rng, chain.as_ref().unwrap(), sizes.seq_len),
        };
        if seen.insert(example_key(&ex)) {
            all.push(ex);
        }
    }
    let test = all.split_off(sizes.train + sizes.val);
    let val = all.split_off(sizes.train);
    let (input_dim, output_dim, loss) = match kind {
        TaskKind::AddingProblem => (2, 1, LossKind::Mse),
        TaskKind::SequenceParity => (1, 2, LossKind::CrossEntropy),
        TaskKind::CharLm => (sizes.vocab, sizes.vocab, LossKind::CrossEntropy),
    };
    Ok(Task {
        kind,
        seed,
        input_dim,
        output_dim,
        loss,
        train: all,
        val,
        test,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub w: Matrix<f64>,
    pub b: Vec<f64>,
}

/// LSTM layer followed by a linear readout. Only the LSTM is ever pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub lstm: LstmParams<f64>,
    pub readout: Readout,
}

impl Prunable for Network {
    fn lstm(&self) -> &LstmParams<f64> {
        &self.lstm
    }

    fn lstm_mut(&mut self) -> &mut LstmParams<f64> {
        &mut self.lstm
    }
}

impl Network {
    /// Uniform `±1/sqrt(H)` weights, forget bias 1, zero readout bias.
    pub fn init(dims: LstmDims, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let s = 1.0 / (dims.hidden as f64).sqrt();
        let mut lstm = LstmParams::<f64>::zeros(dims);
        for m in lstm.wx.iter_mut().chain(lstm.wh.iter_mut()) {
            m.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-s..s));
        }
        lstm.bias[0].iter_mut().for_each(|v| *v = 1.0);
        let w = Matrix::from_fn(output_dim, dims.hidden, |_, _| rng.gen_range(-s..s));
        Self {
            lstm,
            readout: Readout {
                w,
                b: vec![0.0; output_dim],
            },
        }
    }

    pub fn dims(&self) -> LstmDims {
        self.lstm.dims()
    }

    pub fn output_dim(&self) -> usize {
        self.readout.w.rows()
    }

    fn zeros_like(&self) -> Self {
        Self {
            lstm: self.lstm.map(|_| 0.0),
            readout: Readout {
                w: self.readout.w.map(|_| 0.0),
                b: vec![0.0; self.readout.b.len()],
            },
        }
    }

    /// Every parameter slice: `W_x` (f, i, g, o), `W_h`, biases, readout.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(14);
        v.extend(self.lstm.wx.iter().map(|m| m.as_slice()));
        v.extend(self.lstm.wh.iter().map(|m| m.as_slice()));
        v.extend(self.lstm.bias.iter().map(|b| b.as_slice()));
        v.push(self.readout.w.as_slice());
        v.push(&self.readout.b);
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(14);
        v.extend(self.lstm.wx.iter_mut().map(|m| m.as_mut_slice()));
        v.extend(self.lstm.wh.iter_mut().map(|m| m.as_mut_slice()));
        v.extend(self.lstm.bias.iter_mut().map(|b| b.as_mut_slice()));
        v.push(self.readout.w.as_mut_slice());
        v.push(&mut self.readout.b);
        v
    }

    fn check_task(&self, task: &Task) -> Result<()> {
        check_len("task input dim", task.input_dim, self.dims().input)?;
        check_len("task output dim", task.output_dim, self.output_dim())
    }
}

struct Step {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn forward(net: &Network, inputs: &[Vec<f64>]) -> Vec<Step> {
    let d = net.dims();
    let mut h = vec![0.0; d.hidden];
    let mut c = vec![0.0; d.hidden];
    let mut steps = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut gates: [Vec<f64>; 4] = Default::default();
        for (g, out) in gates.iter_mut().enumerate() {
            let (wx, wh, b) = (&net.lstm.wx[g], &net.lstm.wh[g], &net.lstm.bias[g]);
            *out = (0..d.hidden)
                .map(|r| {
                    let mut acc = b[r];
                    acc += wx.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                    acc += wh.row(r).iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
                    if g == 2 {
                        acc.tanh()
                    } else {
                        sigmoid(acc)
                    }
                })
                .collect();
        }
        let c_new: Vec<f64> = (0..d.hidden)
            .map(|r| gates[0][r] * c[r] + gates[1][r] * gates[2][r])
            .collect();
        let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
        let h_new: Vec<f64> = (0..d.hidden).map(|r| gates[3][r] * tanh_c[r]).collect();
        steps.push(Step {
            h_prev: std::mem::replace(&mut h, h_new.clone()),
            c_prev: std::mem::replace(&mut c, c_new),
            gates,
            tanh_c,
            h: h_new,
        });
    }
    steps
}

fn readout(net: &Network, h: &[f64]) -> Vec<f64> {
    let w = &net.readout.w;
    (0..w.rows())
        .map(|o| net.readout.b[o] + w.row(o).iter().zip(h).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

struct ExampleLoss {
    loss: f64,
    correct: bool,
    /// `(step, dL/dlogits)` for every supervised step.
    grads: Vec<(usize, Vec<f64>)>,
}

fn example_loss(net: &Network, steps: &[Step], target: &Target) -> Result<ExampleLoss> {
    let last = steps.len().checked_sub(1).ok_or_else(|| Error::Config("empty sequence".into()))?;
    let ce = |z: &[f64], class: usize, scale: f64| -> Result<(f64, Vec<f64>)> {
        if class >= z.len() {
            return Err(Error::OutOfRange(format!("class {class} of {}", z.len())));
        }
        let p = softmax(z);
        let mut g: Vec<f64> = p.iter().map(|v| v * scale).collect();
        g[class] -= scale;
        Ok((-p[class].ln() * scale, g))
    };
    match target {
        Target::Value(t) => {
            let y = readout(net, &steps[last].h);
            check_len("regression output", y.len(), 1)?;
            let e = y[0] - t;
            Ok(ExampleLoss {
                loss: e * e,
                correct: false,
                grads: vec![(last, vec![2.0 * e])],
            })
        }
        Target::Class(c) => {
            let z = readout(net, &steps[last].h);
            let (loss, g) = ce(&z, *c, 1.0)?;
            Ok(ExampleLoss {
                loss,
                correct: argmax(&z) == *c,
                grads: vec![(last, g)],
            })
        }
        Target::Sequence(cs) => {
            check_len("target sequence", cs.len(), steps.len())?;
            let scale = 1.0 / cs.len() as f64;
            let mut out = ExampleLoss {
                loss: 0.0,
                correct: false,
                grads: Vec::with_capacity(cs.len()),
            };
            for (t, &c) in cs.iter().enumerate() {
                let z = readout(net, &steps[t].h);
                let (l, g) = ce(&z, c, scale)?;
                out.loss += l;
                out.grads.push((t, g));
            }
            Ok(out)
        }
    }
}

/// Accumulates `scale * dL/dθ` of one example into `grad`.
fn backward(net: &Network, inputs: &[Vec<f64>], steps: &[Step], loss: &ExampleLoss, scale: f64, grad: &mut Network) {
    let d = net.dims();
    let hidden = d.hidden;
    let mut dh_out: Vec<Vec<f64>> = vec![Vec::new(); steps.len()];
    for (t, g) in &loss.grads {
        let mut dh = vec![0.0; hidden];
        for (o, &go) in g.iter().enumerate() {
            let go = go * scale;
            grad.readout.b[o] += go;
            let wrow = net.readout.w.row(o);
            let grow = grad.readout.w.row_mut(o);
            for r in 0..hidden {
                grow[r] += go * steps[*t].h[r];
                dh[r] += go * wrow[r];
            }
        }
        dh_out[*t] = dh;
    }

    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut dp: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        let [f, i, g, o] = &s.gates;
        for r in 0..hidden {
            let dh = dh_next[r] + dh_out[t].get(r).copied().unwrap_or(0.0);
            let tc = s.tanh_c[r];
            let dc = dc_next[r] + dh * o[r] * (1.0 - tc * tc);
            dp[3][r] = dh * tc * o[r] * (1.0 - o[r]);
            dp[0][r] = dc * s.c_prev[r] * f[r] * (1.0 - f[r]);
            dp[1][r] = dc * g[r] * i[r] * (1.0 - i[r]);
            dp[2][r] = dc * i[r] * (1.0 - g[r] * g[r]);
            dc_next[r] = dc * f[r];
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        let x = &inputs[t];
        for gi in 0..4 {
            let wh = &net.lstm.wh[gi];
            for r in 0..hidden {
                let p = dp[gi][r];
                grad.lstm.bias[gi][r] += p;
                for (gw, &xv) in grad.lstm.wx[gi].row_mut(r).iter_mut().zip(x) {
                    *gw += p * xv;
                }
                for (gw, &hv) in grad.lstm.wh[gi].row_mut(r).iter_mut().zip(&s.h_prev) {
                    *gw += p * hv;
                }
                for (dn, &w) in dh_next.iter_mut().zip(wh.row(r)) {
                    *dn += p * w;
                }
            }
        }
    }
}

/// Mean loss over `examples` and its gradient.
pub fn loss_and_gradient(net: &Network, examples: &[Example]) -> Result<(f64, Network)> {
    let mut grad = net.zeros_like();
    if examples.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / examples.len() as f64;
    let mut total = 0.0;
    for ex in examples {
        let steps = forward(net, &ex.inputs);
        let l = example_loss(net, &steps, &ex.target)?;
        total += l.loss;
        backward(net, &ex.inputs, &steps, &l, scale, &mut grad);
    }
    Ok((total * scale, grad))
}

/// Mean loss over `examples`, no gradient.
pub fn loss_only(net: &Network, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let steps = forward(net, &ex.inputs);
        total += example_loss(net, &steps, &ex.target)?.loss;
    }
    Ok(total / examples.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub loss: f64,
    /// Classification tasks only.
    pub accuracy: Option<f64>,
    /// Language-model tasks only.
    pub perplexity: Option<f64>,
}

impl EvalRecord {
    /// Higher is better: accuracy, or the negated loss / perplexity.
    pub fn score(&self) -> f64 {
        match (self.accuracy, self.perplexity) {
            (Some(a), _) => a,
            (None, Some(p)) => -p,
            (None, None) => -self.loss,
        }
    }

    /// Headline metric and its name.
    pub fn metric(&self) -> (&'static str, f64) {
        match (self.accuracy, self.perplexity) {
            (Some(a), _) => ("accuracy", a),
            (None, Some(p)) => ("perplexity", p),
            (None, None) => ("mse", self.loss),
        }
    }
}

pub fn evaluate_examples(net: &Network, kind: TaskKind, examples: &[Example]) -> Result<EvalRecord> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in examples {
        let steps = forward(net, &ex.inputs);
        let l = example_loss(net, &steps, &ex.target)?;
        loss += l.loss;
        correct += l.correct as usize;
    }
    let n = examples.len().max(1) as f64;
    let loss = loss / n;
    Ok(EvalRecord {
        loss,
        accuracy: (kind == TaskKind::SequenceParity).then(|| correct as f64 / n),
        perplexity: (kind == TaskKind::CharLm).then(|| loss.exp()),
    })
}

/// Metrics on the validation split.
pub fn evaluate(net: &Network, task: &Task) -> Result<EvalRecord> {
    net.check_task(task)?;
    evaluate_examples(net, task.kind, &task.val)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(TaskKind::AddingProblem)
    }
}

impl TrainConfig {
    pub fn preset(kind: TaskKind) -> Self {
        let (learning_rate, lr_decay) = match kind {
            TaskKind::AddingProblem => (0.1, 1.0),
            TaskKind::SequenceParity => (0.5, 1.0),
            TaskKind::CharLm => (1.0, 0.95),
        };
        Self {
            learning_rate,
            lr_decay,
            epochs: 50,
            batch_size: 10,
            clip_norm: 5.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.lr_decay > 0.0 && self.clip_norm > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate, lr_decay, clip_norm and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_time_s: f64,
}

/// Training log as CSV. Row 0 is the network before any update.
pub fn log_csv(log: &[EpochLog], with_time: bool) -> String {
    let mut s = String::from("epoch,train_loss,val_metric");
    s.push_str(if with_time { ",wall_time_s\n" } else { "\n" });
    for r in log {
        let _ = write!(s, "{},{},{}", r.epoch, r.train_loss, r.val_metric);
        if with_time {
            let _ = write!(s, ",{:.6}", r.wall_time_s);
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<EpochLog>,
    /// Learning rate after the final decay step.
    pub learning_rate: f64,
}

impl TrainOutcome {
    /// Mean wall time per epoch, zero when no epoch ran.
    pub fn seconds_per_epoch(&self) -> f64 {
        match self.log.last() {
            Some(l) if l.epoch > 0 => l.wall_time_s / l.epoch as f64,
            _ => 0.0,
        }
    }
}

fn mask_slices(masks: &DualMasks) -> Vec<&[bool]> {
    masks.wx.iter().chain(&masks.wh).map(|m| m.as_slice()).collect()
}

fn fit(mut net: Network, masks: Option<&DualMasks>, task: &Task, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.check_task(task)?;
    if let Some(m) = masks {
        m.validate(net.dims())?;
        m.apply(&mut net.lstm);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let start = Instant::now();
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let val_metric = |n: &Network| evaluate(n, task).map(|r| r.metric().1);
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: loss_only(&net, &task.train)?,
        val_metric: val_metric(&net)?,
        wall_time_s: 0.0,
    }];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| task.train[i].clone()));
            let (loss, mut grad) = loss_and_gradient(&net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let mut gs = grad.slices_mut();
            if let Some(m) = masks {
                for (g, keep) in gs.iter_mut().zip(mask_slices(m)) {
                    g.iter_mut().zip(keep).filter(|(_, &k)| !k).for_each(|(v, _)| *v = 0.0);
                }
            }
            let norm = gs.iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt();
            let step = if norm > cfg.clip_norm { lr * cfg.clip_norm / norm } else { lr };
            for (p, g) in net.slices_mut().into_iter().zip(gs) {
                p.iter_mut().zip(g.iter()).for_each(|(w, d)| *w -= step * d);
            }
        }
        let train_loss = loss_only(&net, &task.train)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: train_loss });
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_metric: val_metric(&net)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        lr *= cfg.lr_decay;
    }
    Ok(TrainOutcome {
        network: net,
        log,
        learning_rate: lr,
    })
}

/// Trains a freshly initialised network.
pub fn train(task: &Task, dims: LstmDims, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let net = Network::init(dims, task.output_dim, cfg.seed);
    fit(net, None, task, cfg)
}

/// Continues training `net` without masks.
pub fn train_from(net: &Network, task: &Task, cfg: &TrainConfig) -> Result<TrainOutcome> {
    fit(net.clone(), None, task, cfg)
}

/// Continues training with masked positions of `W_x` / `W_h` frozen at
/// zero. Biases and the readout keep training.
pub fn retrain_masked(net: &Network, masks: &DualMasks, task: &Task, cfg: &TrainConfig) -> Result<TrainOutcome> {
    fit(net.clone(), Some(masks), task, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub task: TaskKind,
    pub readout_w: Vec<Vec<f64>>,
    pub readout_b: Vec<f64>,
    pub optimizer: OptimizerState,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

/// The optimizer has no other state, so its name is a fixed tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
}

/// A model document plus its training sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub spec: FixedSpec,
    pub task: TaskKind,
    pub epoch: usize,
    pub learning_rate: f64,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model::Float {
            params: self.network.lstm.clone(),
            spec: self.spec,
        }
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            task: self.task,
            readout_w: self.network.readout.w.to_rows(),
            readout_b: self.network.readout.b.clone(),
            optimizer: OptimizerState {
                kind: OptimizerKind::Sgd,
                learning_rate: self.learning_rate,
            },
            epoch: self.epoch,
        }
    }

    pub fn save(&self, model_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        self.model().save(model_path)?;
        let mut s = serde_json::to_string_pretty(&self.sidecar())?;
        s.push('\n');
        std::fs::write(sidecar_path, s)?;
        Ok(())
    }

    pub fn load(model_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let (params, spec) = match Model::load(model_path)? {
            Model::Float { params, spec } => (params, spec),
            Model::Fixed(_) => {
                return Err(Error::Model("checkpoints hold float weights, found fixed storage".into()))
            }
        };
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        let w = Matrix::from_rows(&side.readout_w)?;
        let hidden = params.dims().hidden;
        if side.readout_b.is_empty() || w.rows() != side.readout_b.len() || w.cols() != hidden {
            return Err(Error::Model(format!(
                "readout is {}x{} with {} biases, expected {} columns",
                w.rows(),
                w.cols(),
                side.readout_b.len(),
                hidden
            )));
        }
        Ok(Self {
            network: Network {
                lstm: params,
                readout: Readout { w, b: side.readout_b },
            },
            spec,
            task: side.task,
            epoch: side.epoch,
            learning_rate: side.optimizer.learning_rate,
        })
    }
}
