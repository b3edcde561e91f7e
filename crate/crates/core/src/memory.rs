//! Bit-exact emulation of the accelerator's on-chip weight memories.
//!
//! Layout of `M_WX` (and likewise `M_WH`): a physical row is `R_x` words of
//! `n` bits. The nonzeros of logical row `r` are cut into chunks of `R_x`;
//! chunk `c` of the four gate matrices occupies four consecutive physical
//! rows in f, i, g, o order, at physical row `4 * (r * chunks + c) + gate`.
//! A short final chunk is zero padded. `M_AdX` / `M_AdH` mirror the weight
//! arrays with `w_addr`-bit relative indices. `M_B` holds one bias word per
//! row, again interleaved f, i, g, o.
//!
//! Binary file (little-endian):
//!
//! ```text
//! "BRDS" | version u16 | H X X_SP H_SP n f R_x R_h w_addr (u32 each)
//! M_WX | M_AdX | M_WH | M_AdH | M_B
//! ```
//!
//! Each payload is stored row by row, every physical row padded to a byte
//! boundary, bits packed LSB first.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lstm::Gate;
use crate::numerics::FixedSpec;
use crate::sparse::RowBalancedMatrix;

pub const MAGIC: &[u8; 4] = b"BRDS";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 9 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSet {
    /// Feed-forward weights `W_x`.
    Input,
    /// Recurrent weights `W_h`.
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ImageGeometry {
    pub hidden: usize,
    pub input: usize,
    pub x_sp: usize,
    pub h_sp: usize,
    #[serde(skip)]
    pub spec: FixedSpec,
    pub r_x: usize,
    pub r_h: usize,
    pub addr_bits: u32,
}

impl ImageGeometry {
    fn chunks(k: usize, r: usize) -> usize {
        k.div_ceil(r)
    }

    pub fn x_chunks(&self) -> usize {
        Self::chunks(self.x_sp, self.r_x)
    }

    pub fn h_chunks(&self) -> usize {
        Self::chunks(self.h_sp, self.r_h)
    }

    fn arrays(&self) -> [(usize, usize, u32); 5] {
        let n = self.spec.width_bits();
        let rows_x = 4 * self.hidden * self.x_chunks();
        let rows_h = 4 * self.hidden * self.h_chunks();
        [
            (rows_x, self.r_x, n),
            (rows_x, self.r_x, self.addr_bits),
            (rows_h, self.r_h, n),
            (rows_h, self.r_h, self.addr_bits),
            (4 * self.hidden, 1, n),
        ]
    }

    /// Closed-form and physical sizes of every memory array.
    pub fn sizes(&self) -> MemorySizes {
        let n = self.spec.width_bits() as usize;
        let w = self.addr_bits as usize;
        let (h, x) = (self.hidden, self.input);
        let phys = |rows: usize, words: usize, bits: u32| rows * words * bits as usize;
        let [wx, adx, wh, adh, _] = self.arrays();
        MemorySizes {
            m_wx_bits: 4 * h * self.x_sp * n,
            m_wh_bits: 4 * h * self.h_sp * n,
            m_adx_bits: 4 * h * self.x_sp * w,
            m_adh_bits: 4 * h * self.h_sp * w,
            m_b_bits: 4 * h * n,
            m_x_bits: x * n,
            m_h_bits: h * n,
            m_c_bits: h * n,
            m_wx_physical_bits: phys(wx.0, wx.1, wx.2),
            m_wh_physical_bits: phys(wh.0, wh.1, wh.2),
            m_adx_physical_bits: phys(adx.0, adx.1, adx.2),
            m_adh_physical_bits: phys(adh.0, adh.1, adh.2),
        }
    }
}

/// Bit sizes of one copy of each memory array. `*_physical_bits` include
/// padding of short final chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemorySizes {
    pub m_wx_bits: usize,
    pub m_wh_bits: usize,
    pub m_adx_bits: usize,
    pub m_adh_bits: usize,
    pub m_b_bits: usize,
    pub m_x_bits: usize,
    pub m_h_bits: usize,
    pub m_c_bits: usize,
    pub m_wx_physical_bits: usize,
    pub m_wh_physical_bits: usize,
    pub m_adx_physical_bits: usize,
    pub m_adh_physical_bits: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PackedArray {
    rows: usize,
    words_per_row: usize,
    word_bits: u32,
    row_bytes: usize,
    data: Vec<u8>,
}

impl PackedArray {
    fn new(rows: usize, words_per_row: usize, word_bits: u32) -> Self {
        let row_bytes = (words_per_row * word_bits as usize).div_ceil(8);
        Self {
            rows,
            words_per_row,
            word_bits,
            row_bytes,
            data: vec![0; rows * row_bytes],
        }
    }

    fn byte_len(rows: usize, words_per_row: usize, word_bits: u32) -> usize {
        rows * (words_per_row * word_bits as usize).div_ceil(8)
    }

    fn write(&mut self, row: usize, word: usize, value: u64) {
        let base = row * self.row_bytes * 8 + word * self.word_bits as usize;
        for b in 0..self.word_bits as usize {
            if (value >> b) & 1 == 1 {
                let bit = base + b;
                self.data[bit / 8] |= 1 << (bit % 8);
            }
        }
    }

    fn read(&self, row: usize, word: usize) -> u64 {
        let base = row * self.row_bytes * 8 + word * self.word_bits as usize;
        (0..self.word_bits as usize).fold(0u64, |acc, b| {
            let bit = base + b;
            acc | ((((self.data[bit / 8] >> (bit % 8)) & 1) as u64) << b)
        })
    }

    fn write_signed(&mut self, row: usize, word: usize, raw: i32) {
        let mask = (1u64 << self.word_bits) - 1;
        self.write(row, word, (raw as i64 as u64) & mask);
    }

    fn read_signed(&self, row: usize, word: usize) -> i32 {
        let shift = 64 - self.word_bits;
        (((self.read(row, word) << shift) as i64) >> shift) as i32
    }
}

/// The four gate matrices of each weight set plus the biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageContents {
    pub wx: [RowBalancedMatrix<i32>; 4],
    pub wh: [RowBalancedMatrix<i32>; 4],
    pub bias: [Vec<i32>; 4],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryImage {
    geometry: ImageGeometry,
    m_wx: PackedArray,
    m_adx: PackedArray,
    m_wh: PackedArray,
    m_adh: PackedArray,
    m_b: PackedArray,
}

fn uniform_k(set: &[RowBalancedMatrix<i32>; 4], rows: usize, cols: usize, what: &str) -> Result<usize> {
    let k = set[0].k();
    for (g, m) in set.iter().enumerate() {
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::Config(format!(
                "{what} gate {g} is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        if m.k() != k {
            return Err(Error::Unbalanced {
                row: 0,
                expected: k,
                found: m.k(),
            });
        }
    }
    Ok(k)
}

impl MemoryImage {
    pub fn build(
        contents: &ImageContents,
        r_x: usize,
        r_h: usize,
        addr_bits: u32,
        spec: FixedSpec,
    ) -> Result<Self> {
        if r_x == 0 || r_h == 0 {
            return Err(Error::Config("memory row widths must be at least 1".into()));
        }
        if !(1..=32).contains(&addr_bits) {
            return Err(Error::Config(format!("address width {addr_bits} outside 1..=32")));
        }
        let hidden = contents.wx[0].rows();
        let input = contents.wx[0].cols();
        let x_sp = uniform_k(&contents.wx, hidden, input, "W_x")?;
        let h_sp = uniform_k(&contents.wh, hidden, hidden, "W_h")?;
        for b in &contents.bias {
            crate::lstm::check_len("bias", b.len(), hidden)?;
        }
        let limit = if addr_bits == 32 { u32::MAX } else { (1u32 << addr_bits) - 1 };
        let words = contents
            .wx
            .iter()
            .chain(&contents.wh)
            .flat_map(|m| (0..m.rows()).flat_map(move |r| m.row_values(r).iter().copied()))
            .chain(contents.bias.iter().flatten().copied());
        if let Some(bad) = words.into_iter().find(|&v| !spec.contains(v)) {
            return Err(Error::OutOfRange(format!(
                "word {bad} does not fit {} bits",
                spec.width_bits()
            )));
        }
        for m in contents.wx.iter().chain(&contents.wh) {
            for r in 0..m.rows() {
                if let Some(&v) = m.row_rel(r).iter().find(|&&v| v > limit) {
                    return Err(Error::RelativeIndexOverflow {
                        row: r,
                        value: v as usize,
                        bits: addr_bits,
                    });
                }
            }
        }

        let geometry = ImageGeometry {
            hidden,
            input,
            x_sp,
            h_sp,
            spec,
            r_x,
            r_h,
            addr_bits,
        };
        let [wx, adx, wh, adh, b] = geometry.arrays();
        let mut img = Self {
            geometry,
            m_wx: PackedArray::new(wx.0, wx.1, wx.2),
            m_adx: PackedArray::new(adx.0, adx.1, adx.2),
            m_wh: PackedArray::new(wh.0, wh.1, wh.2),
            m_adh: PackedArray::new(adh.0, adh.1, adh.2),
            m_b: PackedArray::new(b.0, b.1, b.2),
        };
        for g in Gate::ALL {
            let gi = g.index();
            for r in 0..hidden {
                img.store_row(WeightSet::Input, gi, r, &contents.wx[gi]);
                img.store_row(WeightSet::Recurrent, gi, r, &contents.wh[gi]);
                img.m_b.write_signed(4 * r + gi, 0, contents.bias[gi][r]);
            }
        }
        Ok(img)
    }

    fn store_row(&mut self, set: WeightSet, gate: usize, row: usize, m: &RowBalancedMatrix<i32>) {
        let (width, chunks) = self.set_shape(set);
        let (vals, rels) = (m.row_values(row), m.row_rel(row));
        let (mw, ma) = match set {
            WeightSet::Input => (&mut self.m_wx, &mut self.m_adx),
            WeightSet::Recurrent => (&mut self.m_wh, &mut self.m_adh),
        };
        for (j, (&v, &rel)) in vals.iter().zip(rels).enumerate() {
            let phys = 4 * (row * chunks + j / width) + gate;
            mw.write_signed(phys, j % width, v);
            ma.write(phys, j % width, rel as u64);
        }
    }

    fn set_shape(&self, set: WeightSet) -> (usize, usize) {
        let g = &self.geometry;
        match set {
            WeightSet::Input => (g.r_x, g.x_chunks()),
            WeightSet::Recurrent => (g.r_h, g.h_chunks()),
        }
    }

    pub fn geometry(&self) -> &ImageGeometry {
        &self.geometry
    }

    pub fn sizes(&self) -> MemorySizes {
        self.geometry.sizes()
    }

    /// Physical row holding chunk `chunk` of `gate`'s logical row `row`.
    pub fn physical_row(&self, set: WeightSet, gate: Gate, row: usize, chunk: usize) -> usize {
        let (_, chunks) = self.set_shape(set);
        4 * (row * chunks + chunk) + gate.index()
    }

    /// Reads back the stored weights and decoded absolute columns of one
    /// logical row.
    pub fn fetch_row(
        &self,
        gate: Gate,
        row: usize,
        set: WeightSet,
    ) -> Result<(Vec<i32>, Vec<usize>)> {
        let g = &self.geometry;
        if row >= g.hidden {
            return Err(Error::OutOfRange(format!("row {row} of {}", g.hidden)));
        }
        let (width, chunks) = self.set_shape(set);
        let (k, cols, mw, ma) = match set {
            WeightSet::Input => (g.x_sp, g.input, &self.m_wx, &self.m_adx),
            WeightSet::Recurrent => (g.h_sp, g.hidden, &self.m_wh, &self.m_adh),
        };
        let mut values = Vec::with_capacity(k);
        let mut rel = Vec::with_capacity(k);
        for j in 0..k {
            let phys = 4 * (row * chunks + j / width) + gate.index();
            values.push(mw.read_signed(phys, j % width));
            rel.push(ma.read(phys, j % width) as u32);
        }
        let columns = crate::sparse::address_decode(&rel, cols)?;
        Ok((values, columns))
    }

    pub fn fetch_bias(&self, gate: Gate, row: usize) -> Result<i32> {
        if row >= self.geometry.hidden {
            return Err(Error::OutOfRange(format!("bias row {row}")));
        }
        Ok(self.m_b.read_signed(4 * row + gate.index(), 0))
    }

    /// Reconstructs every source matrix from the packed arrays.
    pub fn extract(&self) -> Result<ImageContents> {
        let g = self.geometry;
        let extract_set = |set: WeightSet, cols: usize, k: usize| -> Result<[RowBalancedMatrix<i32>; 4]> {
            let mut out = Vec::with_capacity(4);
            for gate in Gate::ALL {
                let mut values = Vec::with_capacity(g.hidden * k);
                let mut rel = Vec::with_capacity(g.hidden * k);
                for r in 0..g.hidden {
                    let (v, c) = self.fetch_row(gate, r, set)?;
                    values.extend(v);
                    let mut next_free = 0;
                    for col in c {
                        rel.push((col - next_free) as u32);
                        next_free = col + 1;
                    }
                }
                out.push(RowBalancedMatrix::from_parts(g.hidden, cols, k, values, rel)?);
            }
            Ok(out.try_into().unwrap_or_else(|_| unreachable!("four gates")))
        };
        let wx = extract_set(WeightSet::Input, g.input, g.x_sp)?;
        let wh = extract_set(WeightSet::Recurrent, g.hidden, g.h_sp)?;
        let mut bias: [Vec<i32>; 4] = Default::default();
        for gate in Gate::ALL {
            bias[gate.index()] = (0..g.hidden)
                .map(|r| self.fetch_bias(gate, r))
                .collect::<Result<_>>()?;
        }
        Ok(ImageContents { wx, wh, bias })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            g.hidden,
            g.input,
            g.x_sp,
            g.h_sp,
            g.spec.width_bits() as usize,
            g.spec.frac_bits() as usize,
            g.r_x,
            g.r_h,
            g.addr_bits as usize,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for a in [&self.m_wx, &self.m_adx, &self.m_wh, &self.m_adh, &self.m_b] {
            out.extend_from_slice(&a.data);
        }
        out
    }

    fn payload_len(&self) -> usize {
        [&self.m_wx, &self.m_adx, &self.m_wh, &self.m_adh, &self.m_b]
            .iter()
            .map(|a| a.data.len())
            .sum()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptImage(m);
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let field = |i: usize| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let spec = FixedSpec::new(field(4) as u32, field(5) as u32)
            .map_err(|e| corrupt(e.to_string()))?;
        let geometry = ImageGeometry {
            hidden: field(0),
            input: field(1),
            x_sp: field(2),
            h_sp: field(3),
            spec,
            r_x: field(6),
            r_h: field(7),
            addr_bits: field(8) as u32,
        };
        let g = &geometry;
        if g.r_x == 0 || g.r_h == 0 || !(1..=32).contains(&g.addr_bits) {
            return Err(corrupt("invalid row width or address width".into()));
        }
        if g.x_sp > g.input || g.h_sp > g.hidden {
            return Err(corrupt("nonzeros per row exceed matrix width".into()));
        }
        let arrays = geometry.arrays();
        let expected: usize = arrays
            .iter()
            .map(|&(r, w, b)| PackedArray::byte_len(r, w, b))
            .sum::<usize>()
            + HEADER_LEN;
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "expected {expected} bytes for this geometry, found {}",
                bytes.len()
            )));
        }
        let mut offset = HEADER_LEN;
        let mut take = |(rows, words, bits): (usize, usize, u32)| {
            let mut a = PackedArray::new(rows, words, bits);
            let len = a.data.len();
            a.data.copy_from_slice(&bytes[offset..offset + len]);
            offset += len;
            a
        };
        let [wx, adx, wh, adh, b] = arrays;
        let img = Self {
            geometry,
            m_wx: take(wx),
            m_adx: take(adx),
            m_wh: take(wh),
            m_adh: take(adh),
            m_b: take(b),
        };
        // every stored address must decode inside its matrix
        img.extract()?;
        Ok(img)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::{seq::index::sample, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const Q: FixedSpec = FixedSpec::Q4_12;

    fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize, k: usize) -> RowBalancedMatrix<i32> {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in sample(rng, cols, k) {
                m.set(r, c, rng.gen_range(1..20000) * if rng.gen() { 1 } else { -1 });
            }
        }
        RowBalancedMatrix::encode(&m, 32).unwrap()
    }

    fn random_contents(rng: &mut ChaCha8Rng, h: usize, x: usize, kx: usize, kh: usize) -> ImageContents {
        ImageContents {
            wx: std::array::from_fn(|_| random_sparse(rng, h, x, kx)),
            wh: std::array::from_fn(|_| random_sparse(rng, h, h, kh)),
            bias: std::array::from_fn(|_| (0..h).map(|_| rng.gen_range(-32768..32768)).collect()),
        }
    }

    // H = 4, 50% sparsity, R_h = 2: one physical row per logical row and
    // gate, four-row groups interleaving f, i, g, o.
    #[test]
    fn four_by_four_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_contents(&mut rng, 4, 4, 2, 2);
        let img = MemoryImage::build(&c, 2, 2, 8, Q).unwrap();
        assert_eq!(img.m_wh.rows, 16);
        assert_eq!(img.m_wh.words_per_row, 2);
        for gate in Gate::ALL {
            for r in 0..4 {
                let phys = img.physical_row(WeightSet::Recurrent, gate, r, 0);
                assert_eq!(phys, 4 * r + gate.index());
                let m = &c.wh[gate.index()];
                assert_eq!(img.m_wh.read_signed(phys, 0), m.row_values(r)[0]);
                assert_eq!(img.m_wh.read_signed(phys, 1), m.row_values(r)[1]);
                assert_eq!(img.m_adh.read(phys, 0) as u32, m.row_rel(r)[0]);
                assert_eq!(img.m_adh.read(phys, 1) as u32, m.row_rel(r)[1]);
            }
        }
        // logical row r of the input gate sits in group 4r at offset 1
        assert_eq!(img.physical_row(WeightSet::Recurrent, Gate::Input, 3, 0), 13);
    }

    #[test]
    fn multi_chunk_rows_interleave_per_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_contents(&mut rng, 3, 10, 5, 3);
        let img = MemoryImage::build(&c, 2, 3, 8, Q).unwrap();
        // 5 nonzeros at width 2 -> 3 chunks, last one padded
        assert_eq!(img.m_wx.rows, 4 * 3 * 3);
        let phys = img.physical_row(WeightSet::Input, Gate::Cell, 1, 2);
        assert_eq!(phys, 4 * (3 + 2) + 2);
        assert_eq!(img.m_wx.read_signed(phys, 0), c.wx[2].row_values(1)[4]);
        assert_eq!(img.m_wx.read_signed(phys, 1), 0);
        assert_eq!(img.extract().unwrap(), c);
    }

    #[test]
    fn closed_form_sizes() {
        let geometry = ImageGeometry {
            hidden: 1024,
            input: 153,
            x_sp: 20,
            h_sp: 64,
            spec: Q,
            r_x: 20,
            r_h: 64,
            addr_bits: 8,
        };
        let s = geometry.sizes();
        assert_eq!(s.m_wx_bits, 1_310_720);
        assert_eq!(s.m_wh_bits, 4 * 1024 * 64 * 16);
        assert_eq!(s.m_b_bits, 4 * 1024 * 16);
        assert_eq!(s.m_c_bits, 1024 * 16);
        assert_eq!(s.m_wx_physical_bits, s.m_wx_bits);
    }

    #[test]
    fn round_trip_and_byte_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_contents(&mut rng, 6, 5, 3, 4);
        let a = MemoryImage::build(&c, 2, 3, 8, Q).unwrap();
        let b = MemoryImage::build(&c, 2, 3, 8, Q).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let back = MemoryImage::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.extract().unwrap(), c);
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"BRDS");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 6);
    }

    #[test]
    fn rejects_corrupt_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_contents(&mut rng, 3, 4, 2, 2);
        let bytes = MemoryImage::build(&c, 2, 2, 8, Q).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MemoryImage::from_bytes(&bad), Err(Error::CorruptImage(_))));
        assert!(MemoryImage::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(MemoryImage::from_bytes(&bytes[..10]).is_err());
        // blow up a relative address so the row decodes past the last column
        let mut bad = bytes.clone();
        let adx_offset = HEADER_LEN + PackedArray::byte_len(4 * 3, 2, 16);
        bad[adx_offset] = 0xff;
        assert!(matches!(MemoryImage::from_bytes(&bad), Err(Error::CorruptImage(_))));
    }

    #[test]
    fn build_validates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = random_contents(&mut rng, 3, 40, 2, 2);
        assert!(MemoryImage::build(&c, 0, 2, 8, Q).is_err());
        // gaps up to 38 do not fit 3 address bits
        let wide = (0..3).map(|_| {
            let mut row = vec![0; 40];
            row[39] = 1;
            row[0] = 1;
            row
        });
        c.wx[0] = RowBalancedMatrix::encode(&Matrix::from_rows(&wide.collect::<Vec<_>>()).unwrap(), 32).unwrap();
        assert!(matches!(
            MemoryImage::build(&c, 2, 2, 3, Q),
            Err(Error::RelativeIndexOverflow { .. })
        ));
        c.wx[1] = random_sparse(&mut rng, 3, 40, 3);
        assert!(matches!(MemoryImage::build(&c, 2, 2, 8, Q), Err(Error::Unbalanced { .. })));
    }

    #[test]
    fn empty_rows_fetch_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_contents(&mut rng, 2, 3, 0, 0);
        let img = MemoryImage::build(&c, 2, 2, 8, Q).unwrap();
        let (v, cols) = img.fetch_row(Gate::Output, 1, WeightSet::Input).unwrap();
        assert!(v.is_empty() && cols.is_empty());
        assert!(img.fetch_row(Gate::Output, 2, WeightSet::Input).is_err());
        assert_eq!(img.extract().unwrap(), c);
    }

    #[test]
    fn narrow_words_sign_extend() {
        let mut a = PackedArray::new(2, 3, 5);
        a.write_signed(1, 2, -16);
        a.write_signed(1, 1, 15);
        a.write_signed(0, 0, -1);
        assert_eq!(a.read_signed(1, 2), -16);
        assert_eq!(a.read_signed(1, 1), 15);
        assert_eq!(a.read_signed(0, 0), -1);
        assert_eq!(a.read_signed(0, 1), 0);
        assert_eq!(a.row_bytes, 2);
    }
}
