//! Shared fixtures for the kernel benchmarks.

use brds_core::accel::{configure, Accelerator};
use brds_core::lstm::{quantize_params, FixedParams};
use brds_core::memory::ImageContents;
use brds_core::numerics::PwlSettings;
use brds_core::pruning::{apply_dual_prune, keep_count};
use brds_core::{ActivationTables, FixedSpec, LstmDims, LstmParams, LstmState, MemoryImage, RowBalancedMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SPEC: FixedSpec = FixedSpec::Q4_12;

/// A pruned model with its memory image and a matching accelerator.
pub struct Fixture {
    pub dense: FixedParams,
    pub pruned: LstmParams<f64>,
    pub image: MemoryImage,
    pub accel: Accelerator,
    pub tables: ActivationTables,
    pub x: Vec<i32>,
    pub state: LstmState<i32>,
}

pub fn random_params(dims: LstmDims, seed: u64) -> LstmParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LstmParams::<f64>::zeros(dims);
    for g in 0..4 {
        for w in p.wx[g].as_mut_slice().iter_mut().chain(p.wh[g].as_mut_slice()) {
            *w = rng.gen_range(-1.0..1.0);
        }
        p.bias[g].iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    p
}

pub fn random_inputs(n: usize, seed: u64) -> Vec<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| SPEC.quantize(rng.gen_range(-1.0..1.0))).collect()
}

/// `r` multipliers split over `q` modules.
pub fn fixture(dims: LstmDims, spar_x: f64, spar_h: f64, r: usize, q: usize) -> Fixture {
    let (pruned, masks) = apply_dual_prune(&random_params(dims, 7), spar_x, spar_h).expect("prune");
    let fixed = quantize_params(&pruned, SPEC);
    let set = |w: &[brds_core::Matrix<i32>; 4], m: &[brds_core::Mask; 4]| -> [RowBalancedMatrix<i32>; 4] {
        std::array::from_fn(|g| RowBalancedMatrix::from_mask(&w[g], &m[g], 16).expect("balanced"))
    };
    let contents = ImageContents {
        wx: set(&fixed.params.wx, &masks.wx),
        wh: set(&fixed.params.wh, &masks.wh),
        bias: fixed.params.bias.clone(),
    };
    let (x_sp, h_sp) = (keep_count(dims.input, spar_x), keep_count(dims.hidden, spar_h));
    let cfg = configure(dims, x_sp, h_sp, r, q, 200.0).expect("config").with_addr_bits(16);
    let image = MemoryImage::build(&contents, cfg.rx_per_module(), cfg.rh_per_module(), 16, SPEC).expect("image");
    Fixture {
        dense: FixedParams {
            spec: SPEC,
            params: LstmParams {
                wx: std::array::from_fn(|g| contents.wx[g].decode()),
                wh: std::array::from_fn(|g| contents.wh[g].decode()),
                bias: contents.bias.clone(),
            },
        },
        pruned,
        image,
        accel: Accelerator::new(cfg).expect("accelerator"),
        tables: ActivationTables::new(SPEC, PwlSettings::default()).expect("tables"),
        x: random_inputs(dims.input, 1),
        state: LstmState {
            h: random_inputs(dims.hidden, 2),
            c: random_inputs(dims.hidden, 3),
        },
    }
}
