//! Synthetic MNIST-shaped IDX fixture shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use pqs::cli::idx;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes train/test IDX files where each class lights up a different 3-pixel-wide column band.
pub fn write_fixture(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1);
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let mut pixels = vec![0u8; n * 784];
        for (i, &l) in labels.iter().enumerate() {
            for r in 0..28 {
                for c in 0..28 {
                    let on = c / 3 == usize::from(l) || rng.gen_ratio(1, 12);
                    pixels[i * 784 + r * 28 + c] = if on { rng.gen_range(128..=255) } else { 0 };
                }
            }
        }
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx::encode_images(28, 28, &pixels)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx::encode_labels(&labels)).unwrap();
    }
}

/// Runs the command line in-process, returning its stdout.
pub fn run_cli(args: &[&str]) -> Result<String, pqs::cli::CliError> {
    use clap::Parser;
    let cli = pqs::cli::Cli::try_parse_from(args).unwrap();
    let mut out = Vec::new();
    pqs::cli::run(cli, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}
