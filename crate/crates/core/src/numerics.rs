//! Two's-complement fixed-point arithmetic matching the accelerator datapath.
//!
//! Every multiply keeps the full double-width product, drops the fractional
//! excess with an arithmetic right shift (round toward negative infinity) and
//! then saturates back to `n` bits. Adds are computed wide and saturated once.
//! Saturation stands in for the datapath's overflow recovery stage.
//!
//! Values are carried as raw `i32` words; [`Fixed`] pairs a word with its
//! format for callers that want the mismatch checks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width/fraction split of an `n`-bit fixed-point word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SpecFields", into = "SpecFields")]
pub struct FixedSpec {
    width_bits: u32,
    frac_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct SpecFields {
    n: u32,
    f: u32,
}

impl TryFrom<SpecFields> for FixedSpec {
    type Error = Error;

    fn try_from(v: SpecFields) -> Result<Self> {
        FixedSpec::new(v.n, v.f)
    }
}

impl From<FixedSpec> for SpecFields {
    fn from(s: FixedSpec) -> Self {
        SpecFields {
            n: s.width_bits,
            f: s.frac_bits,
        }
    }
}

impl Default for FixedSpec {
    fn default() -> Self {
        Self::Q4_12
    }
}

impl FixedSpec {
    /// 16-bit words with 12 fractional bits.
    pub const Q4_12: FixedSpec = FixedSpec {
        width_bits: 16,
        frac_bits: 12,
    };

    pub fn new(width_bits: u32, frac_bits: u32) -> Result<Self> {
        if !(2..=32).contains(&width_bits) || frac_bits >= width_bits {
            return Err(Error::InvalidSpec {
                width: width_bits,
                frac: frac_bits,
            });
        }
        Ok(Self {
            width_bits,
            frac_bits,
        })
    }

    #[inline]
    pub fn width_bits(self) -> u32 {
        self.width_bits
    }

    #[inline]
    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    #[inline]
    pub fn min_raw(self) -> i32 {
        (-(1i64 << (self.width_bits - 1))) as i32
    }

    #[inline]
    pub fn max_raw(self) -> i32 {
        ((1i64 << (self.width_bits - 1)) - 1) as i32
    }

    /// Weight of one least-significant bit.
    #[inline]
    pub fn ulp(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    #[inline]
    pub fn contains(self, raw: i32) -> bool {
        raw >= self.min_raw() && raw <= self.max_raw()
    }

    /// Clamp a wide intermediate into the representable range.
    #[inline]
    pub fn saturate(self, wide: i64) -> i32 {
        wide.clamp(self.min_raw() as i64, self.max_raw() as i64) as i32
    }

    /// Round-to-nearest-even of `x * 2^f`, saturated. NaN maps to zero.
    pub fn quantize(self, x: f64) -> i32 {
        if x.is_nan() {
            return 0;
        }
        let scaled = (x * (self.frac_bits as f64).exp2()).round_ties_even();
        if scaled >= self.max_raw() as f64 {
            self.max_raw()
        } else if scaled <= self.min_raw() as f64 {
            self.min_raw()
        } else {
            scaled as i32
        }
    }

    #[inline]
    pub fn to_real(self, raw: i32) -> f64 {
        raw as f64 * self.ulp()
    }

    /// Raw word for 1.0, saturated when 1.0 is not representable.
    #[inline]
    pub fn one(self) -> i32 {
        self.quantize(1.0)
    }

    #[inline]
    pub fn mul(self, a: i32, b: i32) -> i32 {
        self.saturate((a as i64 * b as i64) >> self.frac_bits)
    }

    #[inline]
    pub fn add(self, a: i32, b: i32) -> i32 {
        self.saturate(a as i64 + b as i64)
    }

    #[inline]
    pub fn add3(self, a: i32, b: i32, c: i32) -> i32 {
        self.saturate(a as i64 + b as i64 + c as i64)
    }

    pub fn quantize_slice(self, xs: &[f64]) -> Vec<i32> {
        xs.iter().map(|&x| self.quantize(x)).collect()
    }

    pub fn to_real_slice(self, raws: &[i32]) -> Vec<f64> {
        raws.iter().map(|&r| self.to_real(r)).collect()
    }
}

/// A raw word tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixed {
    raw: i32,
    spec: FixedSpec,
}

impl Fixed {
    pub fn from_raw(raw: i32, spec: FixedSpec) -> Result<Self> {
        if !spec.contains(raw) {
            return Err(Error::OutOfRange(format!(
                "raw value {raw} outside {}-bit range",
                spec.width_bits
            )));
        }
        Ok(Self { raw, spec })
    }

    pub fn zero(spec: FixedSpec) -> Self {
        Self { raw: 0, spec }
    }

    #[inline]
    pub fn raw(self) -> i32 {
        self.raw
    }

    #[inline]
    pub fn spec(self) -> FixedSpec {
        self.spec
    }

    pub fn to_real(self) -> f64 {
        self.spec.to_real(self.raw)
    }
}

fn same_spec(a: FixedSpec, b: FixedSpec) -> Result<FixedSpec> {
    if a != b {
        return Err(Error::SpecMismatch { left: a, right: b });
    }
    Ok(a)
}

pub fn quantize(x: f64, spec: FixedSpec) -> Fixed {
    Fixed {
        raw: spec.quantize(x),
        spec,
    }
}

pub fn fx_mul(a: Fixed, b: Fixed) -> Result<Fixed> {
    let spec = same_spec(a.spec, b.spec)?;
    Ok(Fixed {
        raw: spec.mul(a.raw, b.raw),
        spec,
    })
}

pub fn fx_add(a: Fixed, b: Fixed) -> Result<Fixed> {
    let spec = same_spec(a.spec, b.spec)?;
    Ok(Fixed {
        raw: spec.add(a.raw, b.raw),
        spec,
    })
}

pub fn fx_add3(a: Fixed, b: Fixed, c: Fixed) -> Result<Fixed> {
    let spec = same_spec(same_spec(a.spec, b.spec)?, c.spec)?;
    Ok(Fixed {
        raw: spec.add3(a.raw, b.raw, c.raw),
        spec,
    })
}

/// Reduces `terms` with the canonical three-input adder tree.
///
/// Zero terms are dropped first, then each level groups the survivors
/// left to right in threes; a trailing pair uses a two-input add and a
/// trailing single passes through. Every node saturates. Dropping zeros
/// makes the result independent of whether pruned positions are present,
/// so a dense row and its sparse encoding reduce identically.
pub fn adder_tree_sum(spec: FixedSpec, terms: &[i32]) -> i32 {
    let mut level = Vec::with_capacity(terms.len());
    level.extend(terms.iter().copied().filter(|&t| t != 0));
    if level.is_empty() {
        return 0;
    }
    let mut len = level.len();
    while len > 1 {
        let mut w = 0;
        let mut i = 0;
        while i < len {
            level[w] = match len - i {
                1 => level[i],
                2 => spec.add(level[i], level[i + 1]),
                _ => spec.add3(level[i], level[i + 1], level[i + 2]),
            };
            w += 1;
            i += 3;
        }
        len = w;
    }
    level[0]
}

/// Number of levels in a three-input reduction of `leaves` operands.
pub fn adder_tree_depth(leaves: usize) -> usize {
    let mut m = leaves;
    let mut depth = 0;
    while m > 1 {
        m = m.div_ceil(3);
        depth += 1;
    }
    depth
}

/// Adder nodes (two- or three-input) in a reduction of `leaves` operands.
pub fn adder_tree_nodes(leaves: usize) -> usize {
    let mut m = leaves;
    let mut nodes = 0;
    while m > 1 {
        nodes += m / 3 + usize::from(m % 3 == 2);
        m = m.div_ceil(3);
    }
    nodes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    fn limits(self) -> (f64, f64) {
        match self {
            Activation::Sigmoid => (0.0, 1.0),
            Activation::Tanh => (-1.0, 1.0),
        }
    }
}

/// One `(a, b)` coefficient pair: the segment evaluates `a * x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PwlSegment {
    pub a: i32,
    pub b: i32,
}

/// Uniform-segment piecewise-linear activation table.
///
/// Each entry holds two `n`-bit coefficients, so a hardware LUT word is
/// `2n` bits. When the domain is symmetric about zero the table is
/// evaluated on `|x|` and reflected (`tanh(-x) = -tanh(x)`,
/// `sig(-x) = 1 - sig(x)`), which keeps odd/complementary symmetry exact
/// under truncating arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlTable {
    kind: Activation,
    segments: Vec<PwlSegment>,
    domain_lo: f64,
    domain_hi: f64,
    spec: FixedSpec,
    // raw lower edge of every segment
    edges: Vec<i32>,
    lo_raw: i32,
    hi_raw: i32,
    symmetric: bool,
}

/// Table construction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwlSettings {
    pub segments: usize,
    pub domain_lo: f64,
    pub domain_hi: f64,
}

impl Default for PwlSettings {
    fn default() -> Self {
        Self {
            segments: 64,
            domain_lo: -8.0,
            domain_hi: 8.0,
        }
    }
}

impl PwlTable {
    pub fn build(
        kind: Activation,
        num_segments: usize,
        domain: (f64, f64),
        spec: FixedSpec,
    ) -> Result<Self> {
        let (lo, hi) = domain;
        if num_segments < 2 {
            return Err(Error::Config(format!(
                "PWL table needs at least 2 segments, got {num_segments}"
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid PWL domain [{lo}, {hi}]")));
        }
        let width = (hi - lo) / num_segments as f64;
        let mut segments = Vec::with_capacity(num_segments);
        let mut edges = Vec::with_capacity(num_segments);
        for s in 0..num_segments {
            let x0 = lo + s as f64 * width;
            let x1 = lo + (s + 1) as f64 * width;
            let (y0, y1) = (kind.eval(x0), kind.eval(x1));
            let a = spec.quantize((y1 - y0) / (x1 - x0));
            // intercept from the quantized slope so the chord still passes
            // through the left knot
            let b = spec.quantize(y0 - spec.to_real(a) * x0);
            segments.push(PwlSegment { a, b });
            edges.push(spec.quantize(x0));
        }
        Ok(Self {
            kind,
            segments,
            domain_lo: lo,
            domain_hi: hi,
            spec,
            edges,
            lo_raw: spec.quantize(lo),
            hi_raw: spec.quantize(hi),
            symmetric: lo == -hi,
        })
    }

    pub fn with_settings(kind: Activation, settings: PwlSettings, spec: FixedSpec) -> Result<Self> {
        Self::build(
            kind,
            settings.segments,
            (settings.domain_lo, settings.domain_hi),
            spec,
        )
    }

    pub fn kind(&self) -> Activation {
        self.kind
    }

    pub fn spec(&self) -> FixedSpec {
        self.spec
    }

    pub fn segments(&self) -> &[PwlSegment] {
        &self.segments
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain_lo, self.domain_hi)
    }

    /// LUT word size in bits (two coefficients per entry).
    pub fn word_bits(&self) -> u32 {
        2 * self.spec.width_bits()
    }

    pub fn eval(&self, x: Fixed) -> Result<Fixed> {
        same_spec(self.spec, x.spec)?;
        Ok(Fixed {
            raw: self.eval_raw(x.raw),
            spec: self.spec,
        })
    }

    pub fn eval_raw(&self, x: i32) -> i32 {
        let spec = self.spec;
        if !self.symmetric {
            return self.eval_direct(x);
        }
        let mag = spec.saturate((x as i64).abs());
        let y = self.eval_direct(mag);
        if x >= 0 {
            return y;
        }
        match self.kind {
            Activation::Tanh => spec.saturate(-(y as i64)),
            Activation::Sigmoid => spec.saturate(spec.one() as i64 - y as i64),
        }
    }

    fn eval_direct(&self, x: i32) -> i32 {
        let spec = self.spec;
        let (lo_limit, hi_limit) = self.kind.limits();
        let (lo_limit, hi_limit) = (spec.quantize(lo_limit), spec.quantize(hi_limit));
        if x >= self.hi_raw {
            return hi_limit;
        }
        if x < self.lo_raw {
            return lo_limit;
        }
        let idx = self
            .edges
            .partition_point(|&e| e <= x)
            .saturating_sub(1)
            .min(self.segments.len() - 1);
        let seg = self.segments[idx];
        let y = spec.add(spec.mul(seg.a, x), seg.b);
        y.clamp(lo_limit, hi_limit)
    }

    /// `segment,a_raw,b_raw` rows for inspection.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,a_raw,b_raw\n");
        for (i, s) in self.segments.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{}", s.a, s.b);
        }
        out
    }
}

/// The sigmoid/tanh pair used by the fixed-point LSTM datapath.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTables {
    pub sigmoid: PwlTable,
    pub tanh: PwlTable,
}

impl ActivationTables {
    pub fn new(spec: FixedSpec, settings: PwlSettings) -> Result<Self> {
        Ok(Self {
            sigmoid: PwlTable::with_settings(Activation::Sigmoid, settings, spec)?,
            tanh: PwlTable::with_settings(Activation::Tanh, settings, spec)?,
        })
    }

    pub fn spec(&self) -> FixedSpec {
        self.sigmoid.spec()
    }
}
