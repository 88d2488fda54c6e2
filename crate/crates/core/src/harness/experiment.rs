use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{Strategy, StrategyConfig};
use crate::csil::{prepare_stage, train_stage, StageContext, StageLog, StageRecipe};
use crate::doc::{degree_of_conflict, similarity_matrix};
use crate::error::{invalid, Result};
use crate::harness::config::{ExperimentConfig, ExtractorChoice};
use crate::harness::report::{DeviceCount, ExperimentReport, StageMetrics, StrategyReport};
use crate::model::{Head, Inputs, LabelledSet, Model};
use crate::signal::{load_dataset, make_dataset, Dataset, SampleTensor};

/// A finished run: the report plus the models it describes.
pub struct RunOutput {
    pub report: ExperimentReport,
    /// Model and context after stage 0, shared by every strategy.
    pub initial: (Model<f64>, StageContext<f64>),
    /// Final model and context of each strategy, in report order.
    pub finals: Vec<(Strategy, Model<f64>, StageContext<f64>)>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream `tag` of the run seed.
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag)))
}

fn strategy_tag(s: Strategy) -> u64 {
    100 + Strategy::ALL.iter().position(|&t| t == s).expect("listed strategy") as u64
}

/// Synthesizes or loads the data, then runs every strategy.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(run_with_models(cfg, &dataset_for(cfg)?)?.report)
}

/// Full CSIL and its single-component removals under one seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let cfg = ExperimentConfig {
        strategies: Strategy::ABLATION.to_vec(),
        channel_separation: true,
        kd: true,
        ewc: true,
        ..cfg.clone()
    };
    run_experiment(&cfg)
}

pub fn run_on_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentReport> {
    Ok(run_with_models(cfg, ds)?.report)
}

pub fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(p) => load_dataset(p),
        None => make_dataset(cfg.devices, cfg.samples_per_device, cfg.snr_db, cfg.seed),
    }
}

fn input_shape(cfg: &ExperimentConfig, ds: &Dataset) -> Result<[usize; 3]> {
    match (ds.dims.as_slice(), cfg.extractor) {
        (&[c, h, w], _) => Ok([c, h, w]),
        (_, ExtractorChoice::Mlp) => Ok([1, 1, ds.sample_len()]),
        (d, ExtractorChoice::Cnn) => Err(invalid(format!("CNN extractor needs 3-d samples, data has {d:?}"))),
    }
}

fn pack(model: &Model<f64>, samples: &[&SampleTensor]) -> Result<LabelledSet<f64>> {
    let refs: Vec<&[f32]> = samples.iter().map(|s| s.data.as_slice()).collect();
    let x = model.input_tensor(&refs)?;
    LabelledSet::new(Inputs::Raw(x), samples.iter().map(|s| s.label as usize).collect())
}

fn pick<'a>(v: &'a [SampleTensor], devs: &Range<usize>) -> Vec<&'a SampleTensor> {
    v.iter().filter(|s| devs.contains(&(s.label as usize))).collect()
}

fn stage_sets(
    model: &Model<f64>,
    ds: &Dataset,
    schedule: &[Range<usize>],
) -> Result<Vec<(LabelledSet<f64>, LabelledSet<f64>)>> {
    schedule
        .iter()
        .enumerate()
        .map(|(k, devs)| {
            let (tr, va) = (pick(&ds.train, devs), pick(&ds.val, devs));
            if tr.is_empty() || va.is_empty() {
                return Err(invalid(format!("stage {k} (devices {devs:?}) lacks training or validation samples")));
            }
            Ok((pack(model, &tr)?, pack(model, &va)?))
        })
        .collect()
}

fn pct(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

fn sum_counts(counts: &[DeviceCount], devs: Range<usize>) -> Option<f64> {
    let (c, t) = counts
        .iter()
        .filter(|d| devs.contains(&d.device))
        .fold((0, 0), |(c, t), d| (c + d.correct, t + d.total));
    (t > 0).then(|| pct(c, t))
}

fn evaluate(
    model: &Model<f64>,
    strategy: Strategy,
    vals: &[LabelledSet<f64>],
    schedule: &[Range<usize>],
    stage: usize,
    prev_avg: Option<f64>,
) -> Result<StageMetrics> {
    let seen = schedule[stage].end;
    let mut counts: Vec<DeviceCount> = (0..seen)
        .map(|device| DeviceCount {
            device,
            correct: 0,
            total: 0,
        })
        .collect();
    for v in &vals[..=stage] {
        let pred = model.predict(&model.features(&v.inputs)?)?;
        for (p, &l) in pred.iter().zip(&v.labels) {
            counts[l].total += 1;
            if *p == l {
                counts[l].correct += 1;
            }
        }
    }
    let new = schedule[stage].clone();
    let acc_old = if stage > 0 { sum_counts(&counts, 0..new.start) } else { None };
    let weights = model.class_weights();
    let doc_all = if weights.rows() >= 2 {
        Some(degree_of_conflict(weights)?)
    } else {
        None
    };
    let doc_new = if new.len() >= 2 {
        Some(degree_of_conflict(&weights.slice_rows(new.start, new.end)?)?)
    } else {
        None
    };
    Ok(StageMetrics {
        stage,
        strategy,
        acc_new: sum_counts(&counts, new).unwrap_or(0.0),
        acc_old,
        acc_avg: sum_counts(&counts, 0..seen).unwrap_or(0.0),
        doc_all,
        doc_new,
        forget: match (prev_avg, acc_old) {
            (Some(p), Some(o)) => Some(p - o),
            _ => None,
        },
        devices: counts,
    })
}

fn check_stage(
    name: &str,
    grown: &Model<f64>,
    trained: &Model<f64>,
    ctx: &StageContext<f64>,
    log: &StageLog,
    metrics: &StageMetrics,
) -> Vec<String> {
    let mut v = Vec::new();
    let k = ctx.stage;
    for ((a, b), (m, pname)) in grown
        .params()
        .iter()
        .zip(trained.params())
        .zip(ctx.masks.iter().zip(grown.param_names()))
    {
        let moved = a
            .data()
            .iter()
            .zip(b.data())
            .zip(m.iter())
            .filter(|((x, y), open)| !open && x.to_bits() != y.to_bits())
            .count();
        if moved > 0 {
            v.push(format!("{name} stage {k}: {moved} frozen entries of {pname} changed"));
        }
    }
    if log.max_decomposition_error > 1e-10 {
        v.push(format!(
            "{name} stage {k}: loss decomposition off by {}",
            log.max_decomposition_error
        ));
    }
    for (label, acc) in [("acc_new", Some(metrics.acc_new)), ("acc_old", metrics.acc_old), ("acc_avg", Some(metrics.acc_avg))] {
        if let Some(a) = acc {
            if !(0.0..=100.0).contains(&a) {
                v.push(format!("{name} stage {k}: {label} = {a} outside [0, 100]"));
            }
        }
    }
    if ctx.recipe.channel_separation {
        if let Head::ZeroBias(fp) = &trained.head {
            match similarity_matrix(&fp.weights) {
                Ok(sim) => {
                    let map = &ctx.channel_map;
                    for (i, si) in map.stages.iter().enumerate() {
                        for sj in &map.stages[i + 1..] {
                            let m = sim.block_max_abs(si.classes.clone(), sj.classes.clone());
                            if m != 0.0 {
                                v.push(format!("{name} stage {k}: cross-stage similarity {m} is not 0"));
                            }
                        }
                    }
                }
                Err(e) => v.push(format!("{name} stage {k}: {e}")),
            }
        }
    }
    v
}

type StrategyRun = (StrategyReport, Model<f64>, StageContext<f64>, Vec<String>);

/// Runs every configured strategy on `ds` and keeps the final models.
pub fn run_with_models(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    if ds.device_count != cfg.devices {
        return Err(invalid(format!(
            "dataset has {} devices, config expects {}",
            ds.device_count, cfg.devices
        )));
    }
    let strategies = cfg.resolved_strategies()?;
    let model_cfg = cfg.model_config(input_shape(cfg, ds)?);
    let model = Model::new(&model_cfg, &mut stream(cfg.seed, 1))?;
    let sets = stage_sets(&model, ds, &schedule)?;

    let ctx0 = StageContext::initial(&model, StageRecipe::CSIL);
    let (m0, log0) = train_stage(
        &model,
        &ctx0,
        &sets[0].0,
        Some(&sets[0].1),
        &cfg.train_options(cfg.initial_epochs),
        &mut stream(cfg.seed, 2),
    )?;

    // every later stage keeps the extractor frozen, so features are fixed
    let feats: Vec<(LabelledSet<f64>, LabelledSet<f64>)> = sets
        .iter()
        .map(|(t, v)| Ok((t.to_features(&m0)?, v.to_features(&m0)?)))
        .collect::<Result<_>>()?;
    drop(sets);
    let vals: Vec<LabelledSet<f64>> = feats.iter().map(|(_, v)| v.clone()).collect();
    let stage0 = evaluate(&m0, Strategy::Csil, &vals, &schedule, 0, None)?;
    let sim0 = similarity_matrix(m0.class_weights())?;
    let opts = cfg.train_options(cfg.epochs);

    let results: Vec<StrategyRun> = strategies
        .par_iter()
        .map(|sc: &StrategyConfig| {
            let name = sc.strategy.name();
            let mut rng = stream(cfg.seed, strategy_tag(sc.strategy));
            let mut model = m0.clone();
            let mut ctx = StageContext {
                recipe: sc.recipe,
                ..ctx0.clone()
            };
            let mut stages = vec![StageMetrics {
                strategy: sc.strategy,
                ..stage0.clone()
            }];
            let mut logs = vec![log0.clone()];
            let mut similarity = vec![sim0.clone()];
            let mut violations = Vec::new();
            for k in 1..schedule.len() {
                let (train, val) = &feats[k];
                let (grown, next) = prepare_stage(
                    &model,
                    &ctx,
                    schedule[k].len(),
                    train,
                    &feats[k - 1].1.inputs,
                    sc.recipe,
                    &mut rng,
                )?;
                let (trained, log) = train_stage(&grown, &next, train, Some(val), &opts, &mut rng)?;
                let prev_avg = stages.last().map(|s| s.acc_avg);
                let metrics = evaluate(&trained, sc.strategy, &vals, &schedule, k, prev_avg)?;
                violations.extend(check_stage(name, &grown, &trained, &next, &log, &metrics));
                similarity.push(similarity_matrix(trained.class_weights())?);
                stages.push(metrics);
                logs.push(log);
                model = trained;
                ctx = next;
            }
            let report = StrategyReport {
                strategy: sc.strategy,
                recipe: sc.recipe,
                stages,
                logs,
                similarity,
            };
            Ok((report, model, ctx, violations))
        })
        .collect::<Result<_>>()?;

    let mut violations = Vec::new();
    let mut reports = Vec::new();
    let mut finals = Vec::new();
    for (r, m, c, v) in results {
        violations.extend(v);
        finals.push((r.strategy, m, c));
        reports.push(r);
    }
    Ok(RunOutput {
        report: ExperimentReport {
            config: cfg.clone(),
            strategies: reports,
            violations,
        },
        initial: (m0, ctx0),
        finals,
    })
}
