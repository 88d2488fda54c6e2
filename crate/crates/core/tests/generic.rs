//! The core is generic over the float type; these runs use `f32`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csil_core::csil::{accuracy, prepare_stage, train_stage, StageContext, StageRecipe, TrainOptions};
use csil_core::doc::degree_of_conflict;
use csil_core::model::{ExtractorKind, HeadKind, Inputs, LabelledSet, Model, ModelConfig};
use csil_core::signal::{make_dataset, SampleTensor};

fn set(model: &Model<f32>, samples: Vec<&SampleTensor>) -> LabelledSet<f32> {
    let refs: Vec<&[f32]> = samples.iter().map(|s| s.data.as_slice()).collect();
    let labels = samples.iter().map(|s| s.label as usize).collect();
    LabelledSet::new(Inputs::Raw(model.input_tensor(&refs).unwrap()), labels).unwrap()
}

#[test]
fn f32_model_learns_and_grows() {
    let ds = make_dataset(4, 40, 20.0, 3).unwrap();
    let len = ds.sample_len();
    let cfg = ModelConfig {
        input_shape: [1, 1, len],
        extractor: ExtractorKind::Mlp { hidden: 16, features: 8 },
        head: HeadKind::ZeroBias,
        classes: 3,
        embedding_width: None,
        temperature: 4.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::<f32>::new(&cfg, &mut rng).unwrap();
    let pick = |v: &'static str, lo: u32, hi: u32| {
        let src = if v == "train" { &ds.train } else { &ds.val };
        src.iter().filter(move |s| (lo..hi).contains(&s.label)).collect::<Vec<_>>()
    };
    let train0 = set(&model, pick("train", 0, 3));
    let val0 = set(&model, pick("val", 0, 3));
    let ctx = StageContext::initial(&model, StageRecipe::CSIL);
    let opts = TrainOptions {
        epochs: 15,
        batch_size: 16,
        ..TrainOptions::default()
    };
    let (m0, log) = train_stage(&model, &ctx, &train0, Some(&val0), &opts, &mut rng).unwrap();
    assert!(log.epochs.iter().all(|e| e.loss.total.is_finite()));
    assert!(accuracy(&m0, &val0).unwrap() > 60.0);
    assert!(degree_of_conflict(m0.class_weights()).unwrap() < 0.0);

    let train1 = set(&m0, pick("train", 3, 4));
    let (grown, ctx1) = prepare_stage(&m0, &ctx, 1, &train1, &val0.inputs, StageRecipe::CSIL, &mut rng).unwrap();
    let (m1, log1) = train_stage(&grown, &ctx1, &train1, None, &opts, &mut rng).unwrap();
    assert_eq!(m1.classes(), 4);
    assert!(m1.params().iter().all(|p| p.is_finite()));
    // the decomposition is computed in f64 from f32 terms
    assert!(log1.max_decomposition_error <= 1e-6);
    let w = m1.class_weights();
    for i in 0..3 {
        assert!(w.row(i)[6..].iter().all(|&x| x == 0.0));
    }
}
