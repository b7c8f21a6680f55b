//! Fixtures and independent scalar-loop oracles shared by integration tests.
#![allow(dead_code)]

pub mod metric_oracle;
pub mod oracle;

use defxattn::attention::{AttentionParams, TokenField};
use defxattn::{ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_field(rng: &mut ChaCha8Rng, grid: [usize; 3], c: usize) -> TokenField {
    let n = grid.iter().product::<usize>() * c;
    TokenField::new(grid, c, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Freshly initialized block parameters; with `offset_std > 0` the pointwise
/// offset layer is randomized so that offsets are non-zero and non-integer.
pub fn random_block(
    rng: &mut ChaCha8Rng,
    c: usize,
    heads: usize,
    m: usize,
    offset_std: f64,
) -> (ParameterStore, AttentionParams) {
    let p = AttentionParams::new("blk", c, heads, m).unwrap();
    let mut s = ParameterStore::new();
    p.init(&mut s, rng).unwrap();
    // Non-trivial affine and bias terms so that every parameter matters.
    let names: Vec<String> = s.names().map(str::to_string).collect();
    for n in names {
        let skip_offset = n.contains("offset.pw") && offset_std == 0.0;
        if skip_offset || n.ends_with(".w") && !n.contains("offset.pw") {
            continue;
        }
        let t = s.get_mut(&n).unwrap();
        let scale = if n.contains("offset.pw") { offset_std } else { 0.2 };
        for v in t.data_mut() {
            *v += rng.gen_range(-1.0..1.0) * scale;
        }
    }
    (s, p)
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

/// Random displacement field with entries in `[-amp, amp]`; large amplitudes
/// produce folds.
pub fn random_displacement(seed: u64, ext: [usize; 3], amp: f64) -> defxattn::registration::DisplacementField {
    let mut r = rng(seed);
    let n = 3 * ext.iter().product::<usize>();
    let data = (0..n).map(|_| r.gen_range(-amp..amp)).collect();
    defxattn::registration::DisplacementField::new(tensor(&[3, ext[0], ext[1], ext[2]], data)).unwrap()
}

/// Label map of axis-aligned boxes over background, with a sprinkle of
/// isolated voxels so that boundaries are irregular.
pub fn random_labels(seed: u64, ext: [usize; 3], n_labels: u32) -> defxattn::registration::LabelMap {
    let mut r = rng(seed);
    let n = ext.iter().product::<usize>();
    let mut data = vec![0u32; n];
    for l in 1..=n_labels {
        let lo: [usize; 3] = std::array::from_fn(|a| r.gen_range(0..ext[a] / 2));
        let hi: [usize; 3] = std::array::from_fn(|a| r.gen_range(lo[a] + 1..=ext[a]));
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    data[(x * ext[1] + y) * ext[2] + z] = l;
                }
            }
        }
    }
    for _ in 0..n / 16 {
        data[r.gen_range(0..n)] = r.gen_range(0..=n_labels);
    }
    defxattn::registration::LabelMap::new(ext, data).unwrap()
}
