#![allow(dead_code)]

pub mod props;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use catalog_core::matrix::Matrix;
use catalog_core::mlp::{init_params, MlpParams};
use catalog_core::synth::SynthSpec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in [-1, 1].
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Like [`random_matrix`] but every row has norm well away from zero.
pub fn random_nonzero_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    loop {
        let m = random_matrix(rng, rows, cols);
        if m.row_iter().all(|r| catalog_core::matrix::l2_norm(r) > 0.1) {
            return m;
        }
    }
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, n_classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n_classes)).collect()
}

/// A random MLP with 1..=3 layers and every width in 1..=16. Biases are
/// random too (initialization zeroes them), so no output row is identically zero.
pub fn random_mlp(rng: &mut ChaCha8Rng, input: usize, output: usize, dropout: f64) -> MlpParams {
    let hidden = rng.random_range(0..=2);
    let mut dims = vec![input];
    for _ in 0..hidden {
        dims.push(rng.random_range(1..=16));
    }
    dims.push(output);
    let mut params = init_params(&dims, dropout, rng.random()).unwrap();
    for b in params.biases.iter_mut().flatten() {
        *b = rng.random_range(-0.5..=0.5);
    }
    params
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Five-point stencil, O(h^4) truncation; for sharply curved functions such as
/// the loss at small temperatures.
pub fn numeric_gradient_5pt(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |k: f64| {
                probe[i] = orig + k * h;
                f(&probe)
            };
            let g = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h);
            probe[i] = orig;
            g
        })
        .collect()
}

/// Largest element-wise relative error, with magnitudes below `floor` treated as `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Synthetic spec small enough for quick training tests.
pub fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_classes: 4,
        n_train: 120,
        n_val: 40,
        n_test: 40,
        dim: 8,
        dim_prime: 10,
        m: 3,
        seed,
        ..SynthSpec::default()
    }
}

pub fn catalog_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_catalog"))
}

pub fn run_catalog(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(catalog_bin());
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("CATALOG_CORE_THREADS", t),
        None => cmd.env_remove("CATALOG_CORE_THREADS"),
    };
    cmd.output().expect("run catalog binary")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// One random end-to-end gradient check (loss -> S -> Q -> MLP parameters).
/// Returns the largest relative error over all parameters.
pub fn end_to_end_gradient_error(seed: u64) -> f64 {
    use catalog_core::losses::LossKind;
    use catalog_core::trainer::{batch_gradient, TrainConfig};

    let mut r = rng(seed);
    let b = r.random_range(1..=8);
    let c = r.random_range(2..=6);
    let f = r.random_range(2..=16);
    let f_prime = r.random_range(1..=16);
    let dropout = if r.random_bool(0.5) {
        0.0
    } else {
        r.random_range(0.0..0.5)
    };
    let params = random_mlp(&mut r, f_prime, f, dropout);
    let image = random_nonzero_rows(&mut r, b, f);
    let image_text = random_nonzero_rows(&mut r, b, f_prime);
    let text = random_nonzero_rows(&mut r, c, f);
    let labels = random_labels(&mut r, b, c);
    let config = TrainConfig {
        alpha: if r.random_bool(0.2) {
            0.0
        } else {
            r.random_range(0.0..0.95)
        },
        tau: r.random_range(0.05..1.0),
        loss: if r.random_bool(0.5) {
            LossKind::Contrastive
        } else {
            LossKind::SupervisedContrastive
        },
        ..TrainConfig::default()
    };
    let dropout_seed: u64 = r.random();

    let analytic = batch_gradient(&image, &image_text, &labels, &text, &params, &config, dropout_seed)
        .unwrap()
        .grads
        .to_flat();
    let dims = params.layer_dims().to_vec();
    let numeric = numeric_gradient(&params.to_flat(), 1e-6, |flat| {
        let p = MlpParams::from_flat(&dims, dropout, flat).unwrap();
        batch_gradient(&image, &image_text, &labels, &text, &p, &config, dropout_seed)
            .unwrap()
            .loss
    });
    max_relative_error(&analytic, &numeric, GRADIENT_FLOOR)
}

/// Gradient magnitudes below this are compared absolutely: central
/// differences at h = 1e-6 carry ~1e-10 of rounding noise.
pub const GRADIENT_FLOOR: f64 = 1e-4;
