use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use csil_core::baselines::{ewc_stage, finetune_stage, lwf_stage, run_stage, Strategy, StrategyConfig};
use csil_core::csil::{prepare_stage, train_stage, FisherMatrix, StageContext, StageRecipe, TrainOptions};
use csil_core::model::{ExtractorKind, HeadKind, Inputs, LabelledSet, Model, ModelConfig};
use csil_core::tensor::Tensor;

const DIM: usize = 8;

/// Gaussian clusters around fixed random centres, one per class.
fn clusters(classes: std::ops::Range<usize>, per_class: usize, seed: u64) -> LabelledSet<f64> {
    let mut centre_rng = ChaCha8Rng::seed_from_u64(99);
    let centres: Vec<Vec<f64>> = (0..classes.end)
        .map(|_| (0..DIM).map(|_| 2.0 * centre_rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in classes.clone() {
        for _ in 0..per_class {
            labels.push(c);
        }
    }
    // features × samples layout
    let n = labels.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &l in &labels {
        cols.push(centres[l].iter().map(|m| m + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect());
    }
    for r in 0..DIM {
        for col in &cols {
            data.push(col[r]);
        }
    }
    LabelledSet::new(Inputs::Raw(Tensor::new(vec![DIM, n], data).unwrap()), labels).unwrap()
}

fn trained_stage_zero() -> (Model<f64>, StageContext<f64>) {
    let cfg = ModelConfig {
        input_shape: [1, 1, DIM],
        extractor: ExtractorKind::Mlp { hidden: 12, features: 6 },
        head: HeadKind::ZeroBias,
        classes: 3,
        embedding_width: None,
        temperature: 4.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::new(&cfg, &mut rng).unwrap();
    let ctx = StageContext::initial(&model, StageRecipe::CSIL);
    let opts = TrainOptions {
        epochs: 15,
        batch_size: 16,
        ..TrainOptions::default()
    };
    let (m, _) = train_stage(&model, &ctx, &clusters(0..3, 40, 2), None, &opts, &mut rng).unwrap();
    (m, ctx)
}

fn grow(
    m0: &Model<f64>,
    ctx0: &StageContext<f64>,
    recipe: StageRecipe,
) -> (Model<f64>, StageContext<f64>, LabelledSet<f64>) {
    let new = clusters(3..5, 40, 3);
    let old_val = clusters(0..3, 20, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (g, c) = prepare_stage(m0, ctx0, 2, &new, &old_val.inputs, recipe, &mut rng).unwrap();
    (g, c, new)
}

fn opts(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: 16,
        ..TrainOptions::default()
    }
}

fn old_rows_displacement(before: &Model<f64>, after: &Model<f64>, old: usize) -> f64 {
    let (a, b) = (before.class_weights(), after.class_weights());
    (0..old)
        .flat_map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn finetune_moves_only_new_rows() {
    let (m0, ctx0) = trained_stage_zero();
    let (grown, ctx, new) = grow(&m0, &ctx0, Strategy::Finetune.recipe());
    let (m, log) = finetune_stage(&grown, &ctx, &new, &opts(5), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert!(log.steps.iter().all(|s| s.kd == 0.0 && s.ewc == 0.0));
    let f = m.fingerprint_index();
    for (i, (a, b)) in grown.params().iter().zip(m.params()).enumerate() {
        if i != f {
            assert_eq!(*a, b, "parameter {i} moved");
        }
    }
    let (a, b) = (grown.class_weights(), m.class_weights());
    for i in 0..3 {
        assert_eq!(a.row(i), b.row(i));
    }
    assert!((3..5).any(|i| a.row(i) != b.row(i)));
}

#[test]
fn lwf_distillation_starts_at_zero_then_grows() {
    let (m0, ctx0) = trained_stage_zero();
    let (grown, ctx, new) = grow(&m0, &ctx0, Strategy::Lwf.recipe());
    let (_, log) = lwf_stage(&grown, &ctx, &new, &opts(3), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(log.steps[0].kd, 0.0);
    assert!(log.steps.iter().skip(1).any(|s| s.kd > 0.0));
    assert!(log.steps.iter().all(|s| s.ewc == 0.0));
}

#[test]
fn ewc_holds_old_fingerprints_closer() {
    let (m0, ctx0) = trained_stage_zero();
    let free_recipe = StageRecipe {
        ewc: false,
        ..Strategy::Ewc.recipe()
    };
    let (grown, ctx, new) = grow(&m0, &ctx0, Strategy::Ewc.recipe());
    let (g_free, ctx_free, _) = grow(&m0, &ctx0, free_recipe);
    assert_eq!(grown, g_free);
    let o = TrainOptions {
        weights: csil_core::csil::LossWeights {
            ewc: 100.0,
            ..Default::default()
        },
        ..opts(8)
    };
    let (with, log) = ewc_stage(&grown, &ctx, &new, &o, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (without, _) = train_stage(&g_free, &ctx_free, &new, None, &o, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(log.steps[0].ewc, 0.0);
    let d_with = old_rows_displacement(&grown, &with, 3);
    let d_without = old_rows_displacement(&grown, &without, 3);
    assert!(d_with < d_without, "with EWC {d_with}, without {d_without}");
}

#[test]
fn zero_fisher_reduces_to_plain_cross_entropy() {
    let (m0, ctx0) = trained_stage_zero();
    let (grown, mut ctx, new) = grow(&m0, &ctx0, Strategy::Ewc.recipe());
    let zeros: Vec<Tensor<f64>> = grown.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    ctx.fisher = Some(FisherMatrix::new(zeros).unwrap());
    let free = StageContext {
        recipe: StageRecipe {
            ewc: false,
            ..ctx.recipe
        },
        fisher: None,
        ..ctx.clone()
    };
    let (a, _) = train_stage(&grown, &ctx, &new, None, &opts(3), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (b, _) = train_stage(&grown, &free, &new, None, &opts(3), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    for (x, y) in a.params().iter().zip(b.params()) {
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn csil_stage_keeps_old_scores_of_old_channels() {
    let (m0, ctx0) = trained_stage_zero();
    let cfg = StrategyConfig::new(Strategy::Csil);
    let new = clusters(3..5, 40, 3);
    let old_val = clusters(0..3, 20, 4);
    let (m, ctx, log) = run_stage(
        &cfg,
        &m0,
        &ctx0,
        2,
        &new,
        None,
        &old_val.inputs,
        &opts(3),
        &mut ChaCha8Rng::seed_from_u64(7),
    )
    .unwrap();
    assert_eq!(m.classes(), 5);
    assert_eq!(m.embedding.width(), 6 + 4);
    assert_eq!(ctx.channel_map.stages[1].channels, 6..10);
    assert!(log.max_decomposition_error <= 1e-10);
    // zero blocks stay exactly zero
    let w = m.class_weights();
    for i in 0..3 {
        assert!(w.row(i)[6..].iter().all(|&x| x == 0.0));
    }
    for i in 3..5 {
        assert!(w.row(i)[..6].iter().all(|&x| x == 0.0));
    }
    // old embedding rows are untouched
    let e0 = m0.embedding.weight.slice_rows(0, 6).unwrap();
    assert_eq!(m.embedding.weight.slice_rows(0, 6).unwrap(), e0);
}

#[test]
fn strategy_helpers_reject_foreign_contexts() {
    let (m0, ctx0) = trained_stage_zero();
    let (grown, ctx, new) = grow(&m0, &ctx0, Strategy::Lwf.recipe());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(finetune_stage(&grown, &ctx, &new, &opts(1), &mut rng).is_err());
    assert!(ewc_stage(&grown, &ctx, &new, &opts(1), &mut rng).is_err());
    let mut bad = StrategyConfig::new(Strategy::Lwf);
    bad.recipe.ewc = true;
    let old_val = clusters(0..3, 5, 4);
    assert!(run_stage(&bad, &m0, &ctx0, 2, &new, None, &old_val.inputs, &opts(1), &mut rng).is_err());
}
