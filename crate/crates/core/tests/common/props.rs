//! Invariant checks over one random instance each, shared by the property
//! tests and the acceptance run.

use catalog_core::alignment::{cosine_similarity_matrix, fuse, FusionConfig};
use catalog_core::losses::{contrastive_loss, supervised_contrastive_loss, LossResult};
use catalog_core::matrix::{argmax, Matrix};
use catalog_core::text::{compose_class_embeddings, PromptEmbeddingBlock};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{random_labels, random_matrix, random_nonzero_rows, rng};

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Positive rescaling of any row of either operand leaves cosines unchanged.
pub fn cosine_scale_invariance(seed: u64) -> Check {
    let mut r = rng(seed);
    let (b, c, d) = (r.random_range(1..=12), r.random_range(1..=12), r.random_range(1..=24));
    let a = random_nonzero_rows(&mut r, b, d);
    let t = random_nonzero_rows(&mut r, c, d);
    let base = cosine_similarity_matrix(&a, &t).map_err(|e| e.to_string())?;
    let mut a2 = a.clone();
    let mut t2 = t.clone();
    for row in 0..b {
        let k = 10f64.powf(r.random_range(-3.0..3.0));
        a2.row_mut(row).iter_mut().for_each(|v| *v *= k);
    }
    for row in 0..c {
        let k = 10f64.powf(r.random_range(-3.0..3.0));
        t2.row_mut(row).iter_mut().for_each(|v| *v *= k);
    }
    let scaled = cosine_similarity_matrix(&a2, &t2).map_err(|e| e.to_string())?;
    let diff = base.max_abs_diff(&scaled);
    ensure(diff <= 1e-12, || format!("rescaling moved cosines by {diff}"))?;
    ensure(base.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)), || {
        "cosine outside [-1, 1]".into()
    })
}

fn random_block(r: &mut rand_chacha::ChaCha8Rng, n: usize, m: usize, d: usize) -> PromptEmbeddingBlock {
    PromptEmbeddingBlock::new(n, m, d, random_matrix(r, n * m, d).into_vec()).unwrap()
}

/// compose(aA + bB) == a compose(A) + b compose(B); prompt order within a
/// class does not matter; identical prompts average to themselves.
pub fn centroid_linearity_and_permutation(seed: u64) -> Check {
    let mut r = rng(seed);
    let (n, m, d) = (r.random_range(1..=6), r.random_range(1..=8), r.random_range(1..=12));
    let a = random_block(&mut r, n, m, d);
    let b = random_block(&mut r, n, m, d);
    let (x, y) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
    let mixed: Vec<f64> = a.values().iter().zip(b.values()).map(|(p, q)| x * p + y * q).collect();
    let mixed = PromptEmbeddingBlock::new(n, m, d, mixed).unwrap();
    let ta = compose_class_embeddings(&a).unwrap();
    let tb = compose_class_embeddings(&b).unwrap();
    let tm = compose_class_embeddings(&mixed).unwrap();
    let expected = Matrix::from_vec(
        n,
        d,
        ta.as_slice()
            .iter()
            .zip(tb.as_slice())
            .map(|(p, q)| x * p + y * q)
            .collect(),
    )
    .unwrap();
    let diff = tm.max_abs_diff(&expected);
    ensure(diff <= 1e-12, || format!("linearity off by {diff}"))?;

    // permute the prompts of one class
    let class = r.random_range(0..n);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut r);
    let mut permuted = a.clone();
    for (dst, &src) in order.iter().enumerate() {
        let row = a.prompt(class, src).to_vec();
        let start = (class * m + dst) * d;
        permuted.values_mut()[start..start + d].copy_from_slice(&row);
    }
    let tp = compose_class_embeddings(&permuted).unwrap();
    let diff = tp.max_abs_diff(&ta);
    ensure(diff <= 1e-12, || format!("permutation moved centroid by {diff}"))?;

    let u = random_matrix(&mut r, 1, d).into_vec();
    let same = PromptEmbeddingBlock::new(1, m, d, u.repeat(m)).unwrap();
    let tu = compose_class_embeddings(&same).unwrap();
    let diff = tu.row(0).iter().zip(&u).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    ensure(diff <= 1e-15, || {
        format!("identical prompts averaged to something else ({diff})")
    })
}

fn both_losses(s: &Matrix, labels: &[usize], tau: f64) -> [LossResult; 2] {
    [
        contrastive_loss(s, labels, tau).unwrap(),
        supervised_contrastive_loss(s, labels, tau).unwrap(),
    ]
}

/// Adding a constant to a row of S changes neither loss.
pub fn loss_row_shift_invariance(seed: u64) -> Check {
    let mut r = rng(seed);
    let (b, c) = (r.random_range(1..=20), r.random_range(1..=20));
    let s = random_matrix(&mut r, b, c);
    let labels = random_labels(&mut r, b, c);
    let tau = r.random_range(0.02..2.0);
    let mut shifted = s.clone();
    for row in 0..b {
        let k = r.random_range(-5.0..5.0);
        shifted.row_mut(row).iter_mut().for_each(|v| *v += k);
    }
    for (plain, moved) in both_losses(&s, &labels, tau)
        .iter()
        .zip(both_losses(&shifted, &labels, tau))
    {
        let diff = (plain.loss - moved.loss).abs();
        ensure(diff <= 1e-10, || format!("row shift changed loss by {diff}"))?;
    }
    Ok(())
}

/// Loss is finite and non-negative; every gradient row sums to zero.
pub fn loss_gradient_rows_sum_to_zero(seed: u64) -> Check {
    let mut r = rng(seed);
    let (b, c) = (r.random_range(1..=20), r.random_range(1..=20));
    let scale = 10f64.powf(r.random_range(-1.0..2.0));
    let s = random_matrix(&mut r, b, c).map(|v| v * scale);
    let labels = random_labels(&mut r, b, c);
    let tau = r.random_range(0.02..2.0);
    for result in both_losses(&s, &labels, tau) {
        ensure(result.loss.is_finite() && result.loss >= 0.0, || {
            format!("loss {}", result.loss)
        })?;
        for (i, row) in result.grad_s.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            ensure(sum.abs() <= 1e-12, || format!("gradient row {i} sums to {sum}"))?;
        }
    }
    Ok(())
}

/// Each fused entry lies between its two branch entries and within [-1, 1];
/// row argmax survives any increasing affine map of S.
pub fn fusion_convexity(seed: u64) -> Check {
    let mut r = rng(seed);
    let (b, c, d) = (r.random_range(1..=12), r.random_range(1..=12), r.random_range(1..=16));
    let text = random_nonzero_rows(&mut r, c, d);
    let w = cosine_similarity_matrix(&random_nonzero_rows(&mut r, b, d), &text).unwrap();
    let q = cosine_similarity_matrix(&random_nonzero_rows(&mut r, b, d), &text).unwrap();
    let alpha = match r.random_range(0..4) {
        0 => 0.0,
        1 => 1.0,
        _ => r.random_range(0.0..=1.0),
    };
    let s = fuse(&w, &q, &FusionConfig::new(alpha, 0.1).unwrap()).unwrap();
    for ((sv, wv), qv) in s.as_slice().iter().zip(w.as_slice()).zip(q.as_slice()) {
        ensure(wv.min(*qv) <= *sv && *sv <= wv.max(*qv), || {
            format!("{sv} outside [{wv}, {qv}] at alpha {alpha}")
        })?;
        ensure((-1.0..=1.0).contains(sv), || {
            format!("fused value {sv} outside [-1, 1]")
        })?;
    }
    let (scale, offset) = (r.random_range(0.01..100.0), r.random_range(-10.0..10.0));
    let mapped = s.map(|v| scale * v + offset);
    for i in 0..b {
        // a tie created by rounding in the map is not a counterexample
        let before = argmax(s.row(i)).unwrap();
        let after = argmax(mapped.row(i)).unwrap();
        ensure(before == after || mapped.get(i, before) == mapped.get(i, after), || {
            format!("argmax moved from {before} to {after} under affine map")
        })?;
    }
    Ok(())
}

/// With the true class on top, a lower temperature never raises the loss;
/// with the true class at the bottom, it never lowers it.
pub fn loss_temperature_monotonicity(seed: u64) -> Check {
    let mut r = rng(seed);
    let c = r.random_range(2..=12);
    let s = random_matrix(&mut r, 1, c);
    let best = argmax(s.row(0)).unwrap();
    let worst = (0..c).min_by(|&i, &j| s.get(0, i).total_cmp(&s.get(0, j))).unwrap();
    let hi = r.random_range(0.05..3.0);
    let lo = hi * r.random_range(0.05..1.0);
    let at = |label: usize, tau: f64| contrastive_loss(&s, &[label], tau).unwrap().loss;
    ensure(at(best, lo) <= at(best, hi) + 1e-15, || {
        "loss rose as tau fell with the true class on top".into()
    })?;
    ensure(at(worst, lo) + 1e-15 >= at(worst, hi), || {
        "loss fell as tau fell with the true class at the bottom".into()
    })
}

fn small_bundle_and_head(seed: u64) -> (catalog_core::store::EmbeddingBundle, catalog_core::mlp::MlpParams) {
    use catalog_core::trainer::{initial_params, TrainConfig};
    let bundle = catalog_core::synth::generate(&super::small_spec(seed)).unwrap();
    let config = TrainConfig {
        mlp_hidden_dims: vec![6],
        seed,
        ..TrainConfig::default()
    };
    let params = initial_params(&bundle, &config).unwrap();
    (bundle, params)
}

/// Relabels classes so that new class `j` is old class `perm[j]`.
pub fn permute_classes(
    bundle: &catalog_core::store::EmbeddingBundle,
    perm: &[usize],
) -> catalog_core::store::EmbeddingBundle {
    use catalog_core::store::ClassCatalog;
    let mut inverse = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let mut out = bundle.clone();
    out.catalog = ClassCatalog::new(perm.iter().map(|&old| bundle.catalog.names()[old].clone()).collect()).unwrap();
    let block = &bundle.class_prompts;
    let values: Vec<f64> = perm
        .iter()
        .flat_map(|&old| block.class_prompts(old).into_vec())
        .collect();
    out.class_prompts = PromptEmbeddingBlock::new(block.n_classes(), block.m(), block.dim(), values).unwrap();
    for split in out.splits.values_mut() {
        for l in &mut split.labels {
            *l = inverse[*l as usize] as u32;
        }
    }
    out
}

/// Scaling image rows by positive factors leaves the fused similarities
/// (hence predictions) unchanged at any alpha.
pub fn classify_image_rescaling(seed: u64) -> Check {
    use catalog_core::evaluator::{branch_similarities, compose_text, PromptSelection};
    let (bundle, params) = small_bundle_and_head(seed);
    let mut r = rng(seed ^ 0x5eed);
    let mut scaled = bundle.clone();
    for m in scaled.image.values_mut() {
        for row in 0..m.rows() {
            let k = 10f64.powf(r.random_range(-2.0..2.0));
            m.row_mut(row).iter_mut().for_each(|v| *v *= k);
        }
    }
    let alpha = r.random_range(0.0..=1.0);
    let config = FusionConfig::new(alpha, 0.1).unwrap();
    let text = compose_text(&bundle, &PromptSelection::FULL).unwrap();
    let fused = |b: &catalog_core::store::EmbeddingBundle| {
        let br = branch_similarities(&b.split("val").unwrap(), &text, Some(&params), 0.5).unwrap();
        fuse(br.image.as_ref().unwrap(), br.image_text.as_ref().unwrap(), &config).unwrap()
    };
    let (s, s2) = (fused(&bundle), fused(&scaled));
    let diff = s.max_abs_diff(&s2);
    ensure(diff <= 1e-12, || format!("rescaling moved fused scores by {diff}"))?;
    let p1 = catalog_core::evaluator::classify(&bundle, "val", Some(&params), &config).unwrap();
    let p2 = catalog_core::evaluator::classify(&scaled, "val", Some(&params), &config).unwrap();
    for (i, (a, b)) in p1.iter().zip(&p2).enumerate() {
        // predictions may only differ on a numerical tie
        ensure(a == b || (s.get(i, *a) - s.get(i, *b)).abs() <= 1e-12, || {
            format!("item {i}: {a} vs {b}")
        })?;
    }
    Ok(())
}

/// Permuting the class order permutes the report and keeps top-1.
pub fn relabeling_permutes_report(seed: u64) -> Check {
    use catalog_core::evaluator::evaluate;
    use catalog_core::evaluator::{compose_text, PromptSelection};
    let (bundle, params) = small_bundle_and_head(seed);
    let mut r = rng(seed ^ 0xbeef);
    let n = bundle.catalog.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let permuted = permute_classes(&bundle, &perm);
    let config = FusionConfig::new(r.random_range(0.0..=1.0), 0.1).unwrap();
    let report = |b: &catalog_core::store::EmbeddingBundle| {
        let text = compose_text(b, &PromptSelection::FULL).unwrap();
        evaluate(b, "val", &text, Some(&params), &config).unwrap()
    };
    let (before, after) = (report(&bundle), report(&permuted));
    ensure(before.top1_accuracy == after.top1_accuracy, || {
        format!("top-1 {} vs {}", before.top1_accuracy, after.top1_accuracy)
    })?;
    ensure(before.per_class_accuracy == after.per_class_accuracy, || {
        "per-class accuracy differs".into()
    })?;
    for (ti, &t_old) in perm.iter().enumerate() {
        for (pi, &p_old) in perm.iter().enumerate() {
            ensure(after.confusion[ti][pi] == before.confusion[t_old][p_old], || {
                "confusion not permuted".into()
            })?;
        }
    }
    Ok(())
}

/// The sweep at each alpha equals classify + score at that alpha.
pub fn sweep_matches_classify(seed: u64) -> Check {
    use catalog_core::evaluator::{alpha_sweep, classify, score, uniform_grid};
    let (bundle, params) = small_bundle_and_head(seed);
    let grid = uniform_grid(6);
    let sweep = alpha_sweep(&bundle, "val", Some(&params), 0.1, &grid).map_err(|e| e.to_string())?;
    let labels = bundle.splits["val"].labels_usize();
    for (alpha, acc) in sweep {
        let config = FusionConfig::new(alpha, 0.1).unwrap();
        let preds = classify(&bundle, "val", Some(&params), &config).unwrap();
        let direct = score("val", &preds, &labels, &bundle.catalog).unwrap().top1_accuracy;
        ensure(direct == acc, || {
            format!("alpha {alpha}: sweep {acc} vs classify {direct}")
        })?;
    }
    Ok(())
}

/// Any valid synthetic spec yields a bundle without violations.
pub fn synth_bundles_validate(seed: u64) -> Check {
    use catalog_core::synth::{generate, SynthSpec};
    let mut r = rng(seed);
    let spec = SynthSpec {
        n_classes: r.random_range(1..=6),
        n_train: r.random_range(1..=30),
        n_val: r.random_range(1..=10),
        n_test: r.random_range(1..=10),
        dim: r.random_range(8..=16),
        dim_prime: r.random_range(1..=12),
        m: r.random_range(1..=5),
        cluster_separation: r.random_range(0.0..0.5),
        noise_sigma: r.random_range(0.0..1.0),
        domain_shift_angle: r.random_range(-3.0..3.0),
        seed: r.random(),
    };
    let bundle = generate(&spec).map_err(|e| format!("{spec:?}: {e}"))?;
    let violations = catalog_core::store::validate_bundle(&bundle);
    ensure(violations.is_empty(), || format!("{spec:?}: {violations:?}"))
}
