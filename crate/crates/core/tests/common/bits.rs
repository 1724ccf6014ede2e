use pim_compiler::backend::{PhysicalImage, Polarity};
use pim_compiler::hw::{HardwareConfig, SignMode};
use pim_compiler::partition::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn cfg(cell_bits: u32, sign: SignMode) -> HardwareConfig {
    let mut c = HardwareConfig::preset("desk_tiny").unwrap();
    c.cell_bits = cell_bits;
    c.weight_bits = 16;
    c.sign_mode = sign;
    c
}

/// Reads the weight back from raw cell digits: magnitudes for the
/// positive/negative pair, a sign-extended 16-bit word otherwise.
pub fn recombine(images: &[PhysicalImage], k: usize, cell_bits: u32) -> i64 {
    let mut pos = 0i64;
    let mut neg = 0i64;
    let mut word = 0i64;
    for img in images {
        let d = img.cells.data[k] as i64;
        assert!(d < 1 << cell_bits, "cell digit {d} exceeds {cell_bits} bits");
        let shifted = d << (img.role.slice * cell_bits);
        match img.role.polarity {
            Polarity::Pos => pos += shifted,
            Polarity::Neg => neg += shifted,
            Polarity::SignedTop => word += shifted,
        }
    }
    if images.iter().any(|i| i.role.polarity == Polarity::SignedTop) {
        let w = word + pos;
        if w >= 1 << 15 {
            w - (1 << 16)
        } else {
            w
        }
    } else {
        pos - neg
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: i32) -> Matrix<i32> {
    Matrix { rows, cols, data: (0..rows * cols).map(|_| rng.gen_range(lo..=i16::MAX as i32)).collect() }
}

pub fn reference_mvm(m: &Matrix<i32>, x: &[i32]) -> Vec<i32> {
    (0..m.cols).map(|c| (0..m.rows).map(|r| x[r] as i64 * m.get(r, c) as i64).sum::<i64>() as i32).collect()
}
