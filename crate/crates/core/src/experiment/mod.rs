//! Experiment harness: per-seed benchmark preparation, method arms over a
//! corruption list, and JSON/CSV reports.

mod config;
mod report;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{
    run_delayed, run_online, AdaptationRecord, Adapter, MailboxLabels, MapperLabels, NoLabels, OnlineMetrics,
    OracleLabels, PseudoSource,
};
use crate::audiomap::{
    HttpChatClient, LabelMapper, LexicalMapper, LlmMapper, Mailbox, MappingCache, PromptTemplate, ReplayMapper,
};
use crate::data::{corrupt_stream, gen_dataset, load_dataset, CorruptionSpec, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{train_source, InputShape, Model, ModelConfig, TrainReport, VideoClip, SEGMENTS};
use crate::stats::{compute_train_stats, TrainStats};

pub use config::{ArmSpec, ExperimentConfig, MapperKind, SourceConfig, StatsSource, Variant};
pub use report::{build_table, AccuracyTable, Metadata, Report, RunResult, SourceSummary};

/// splitmix64 finalizer over `a` and `b`.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHIFTED_SEED_OFFSET: u64 = 1_000_003;

/// Everything one seed's runs share.
#[derive(Debug, Clone)]
pub struct Bench {
    pub seed: u64,
    pub dataset: Dataset,
    pub model: Model,
    pub train_report: TrainReport,
    pub train_stats: TrainStats,
}

impl Bench {
    pub fn clean_test_accuracy(&self) -> Result<f64> {
        accuracy_of(&self.model, &self.dataset.test)
    }
}

fn accuracy_of(model: &Model, clips: &[VideoClip]) -> Result<f64> {
    let mut correct = 0;
    for c in clips {
        correct += usize::from(Some(model.predict(c)?) == c.ground_truth);
    }
    Ok(correct as f64 / clips.len().max(1) as f64)
}

fn seeded_spec(base: &DatasetSpec, seed: u64) -> DatasetSpec {
    DatasetSpec { seed: base.seed.wrapping_add(seed), ..base.clone() }
}

/// Builds the dataset, trains the source model and computes training
/// statistics for one seed.
pub fn prepare_bench(cfg: &ExperimentConfig, seed: u64) -> Result<Bench> {
    let dataset = match &cfg.dataset_path {
        Some(p) => load_dataset(p)?,
        None => gen_dataset(&seeded_spec(&cfg.dataset, seed))?,
    };
    let s = dataset.spec.clip;
    let model_cfg = ModelConfig {
        num_classes: dataset.spec.num_classes,
        layer_widths: cfg.source.layer_widths.clone(),
        input_shape: InputShape { t: SEGMENTS, h: s.h, w: s.w, c_in: s.c_in },
        patch: cfg.source.patch,
        seed,
    };
    let mut model = Model::new(model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0074_7261_696e));
    let train_report = train_source(&mut model, &dataset.train, cfg.source.epochs, cfg.source.lr, &mut rng)?;
    let layers: Vec<usize> = (0..model.num_layers()).collect();
    let train_stats = match cfg.train_stats_source {
        StatsSource::SameDistribution => compute_train_stats(&model, &dataset.train, &layers)?,
        StatsSource::Shifted => {
            let other = gen_dataset(&seeded_spec(&dataset.spec, SHIFTED_SEED_OFFSET.wrapping_add(seed)))?;
            compute_train_stats(&model, &other.train, &layers)?
        }
    };
    log::info!(
        "seed {seed}: source train accuracy {:.3}, final loss {:.4}",
        train_report.final_accuracy,
        train_report.final_loss
    );
    Ok(Bench { seed, dataset, model, train_report, train_stats })
}

/// Builds the pseudo-label mapper named by the config.
pub fn build_mapper(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Option<Arc<dyn LabelMapper>>> {
    let space = dataset.label_space()?;
    let template = match &cfg.prompt_template {
        Some(p) => PromptTemplate::from_file(p)?,
        None => PromptTemplate::default(),
    };
    let cache = || match &cfg.mapping_cache {
        Some(p) => MappingCache::open(p),
        None => Ok(MappingCache::in_memory()),
    };
    Ok(match cfg.mapper {
        MapperKind::Lexical => Some(Arc::new(LexicalMapper::new(space))),
        MapperKind::Llm => {
            let client = HttpChatClient::new(cfg.llm.clone())?;
            Some(Arc::new(LlmMapper::new(space, template, Box::new(client), cache()?)))
        }
        MapperKind::Fixture => Some(Arc::new(ReplayMapper::new(space, template, cache()?))),
        MapperKind::Oracle => None,
    })
}

struct SeedOutput {
    source: SourceSummary,
    results: Vec<RunResult>,
    timings: Vec<(String, f64, usize)>,
    error: Option<Error>,
}

fn labels_for<'a>(
    variant: Variant,
    delayed: bool,
    mapper: &'a Option<Arc<dyn LabelMapper>>,
    dataset: &'a Dataset,
    stream: &[VideoClip],
) -> Box<dyn PseudoSource + 'a> {
    if !variant.uses_audio() {
        return Box::new(NoLabels);
    }
    match mapper {
        None => Box::new(OracleLabels),
        Some(m) if delayed => {
            let jobs = stream.iter().map(|c| (c.sample_id.clone(), dataset.audio.get(&c.sample_id).cloned())).collect();
            Box::new(MailboxLabels(Mailbox::spawn(m.clone(), jobs)))
        }
        Some(m) => Box::new(MapperLabels { mapper: m.as_ref(), audio: &dataset.audio }),
    }
}

fn source_only_metrics(model: &Model, stream: &[VideoClip]) -> Result<OnlineMetrics> {
    let mut records = Vec::with_capacity(stream.len());
    let mut correct = 0;
    for clip in stream {
        let pred = model.predict(clip)?;
        let gt = clip
            .ground_truth
            .ok_or_else(|| Error::Input(format!("sample {:?} has no ground truth", clip.sample_id)))?;
        correct += usize::from(pred == gt);
        records.push(AdaptationRecord {
            sample_id: clip.sample_id.clone(),
            steps_used: 0,
            loss_trace: vec![],
            pseudo_used: false,
            pseudo_label: None,
            pred_before: pred,
            pred_after: pred,
            final_prediction: pred,
            ground_truth: Some(gt),
            aborted: false,
        });
    }
    let total = stream.len();
    Ok(OnlineMetrics {
        accuracy: correct as f64 / total.max(1) as f64,
        correct,
        total,
        pseudo_used: 0,
        pseudo_correct: 0,
        aborted: 0,
        mean_steps: 0.0,
        steps_histogram: vec![total],
        records,
    })
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> SeedOutput {
    let mut out = SeedOutput {
        source: SourceSummary { seed, train_accuracy: 0.0, clean_test_accuracy: 0.0, fingerprint: String::new() },
        results: Vec::new(),
        timings: Vec::new(),
        error: None,
    };
    if let Err(e) = run_seed_inner(cfg, seed, &mut out) {
        log::error!("seed {seed} failed: {e}");
        out.error = Some(e);
    }
    out
}

fn run_seed_inner(cfg: &ExperimentConfig, seed: u64, out: &mut SeedOutput) -> Result<()> {
    let bench = prepare_bench(cfg, seed)?;
    let fingerprint = bench.model.fingerprint();
    out.source = SourceSummary {
        seed,
        train_accuracy: 100.0 * bench.train_report.final_accuracy,
        clean_test_accuracy: 100.0 * bench.clean_test_accuracy()?,
        fingerprint: fingerprint.clone(),
    };
    let mapper = build_mapper(cfg, &bench.dataset)?;
    let validity = match &mapper {
        None => 100.0,
        Some(m) => {
            let valid = bench
                .dataset
                .test
                .iter()
                .filter(|c| bench.dataset.audio.get(&c.sample_id).is_some_and(|a| m.map(a).valid))
                .count();
            100.0 * valid as f64 / bench.dataset.test.len().max(1) as f64
        }
    };

    for (ci, corruption) in cfg.corruptions.iter().enumerate() {
        let run_seed = mix_seed(seed, ci as u64 + 1);
        let stream = corrupt_stream(&bench.dataset.test, *corruption, run_seed)?;
        for arm in &cfg.arms {
            let started = Instant::now();
            let (metrics, changed) = run_arm(cfg, &bench, &mapper, arm, &stream, run_seed, &fingerprint)?;
            let elapsed = started.elapsed().as_secs_f64();
            out.timings.push((arm.label.clone(), elapsed, stream.len()));
            out.results.push(RunResult {
                arm: arm.label.clone(),
                corruption: corruption_label(corruption),
                seed,
                accuracy: 100.0 * metrics.accuracy,
                correct: metrics.correct,
                total: metrics.total,
                mean_steps: metrics.mean_steps,
                steps_histogram: metrics.steps_histogram.clone(),
                pseudo_validity: if arm.variant.uses_audio() { validity } else { 0.0 },
                pseudo_used: metrics.pseudo_used,
                pseudo_accuracy: (metrics.pseudo_used > 0)
                    .then(|| 100.0 * metrics.pseudo_correct as f64 / metrics.pseudo_used as f64),
                aborted: metrics.aborted,
                model_changed: changed,
                records: cfg.include_records.then_some(metrics.records),
            });
        }
        log::info!("seed {seed}: finished {}", corruption_label(corruption));
    }
    Ok(())
}

fn corruption_label(c: &CorruptionSpec) -> String {
    c.label()
}

fn run_arm(
    cfg: &ExperimentConfig,
    bench: &Bench,
    mapper: &Option<Arc<dyn LabelMapper>>,
    arm: &ArmSpec,
    stream: &[VideoClip],
    run_seed: u64,
    fingerprint: &str,
) -> Result<(OnlineMetrics, bool)> {
    if arm.variant == Variant::SourceOnly {
        let model = bench.model.clone();
        let metrics = source_only_metrics(&model, stream)?;
        return Ok((metrics, model.fingerprint() != fingerprint));
    }
    let adapt_cfg = arm.adapt_config(&cfg.adapt);
    let delayed = adapt_cfg.s > 0;
    let availability = arm.availability_percent(cfg.availability) / 100.0;
    let mut adapter = Adapter::new(bench.model.clone(), &bench.train_stats, adapt_cfg)?;
    let mut labels = labels_for(arm.variant, delayed, mapper, &bench.dataset, stream);
    let metrics = if delayed {
        run_delayed(&mut adapter, stream, labels.as_mut(), availability, run_seed)?
    } else {
        run_online(&mut adapter, stream, labels.as_mut(), availability, run_seed)?
    };
    Ok((metrics, adapter.model().fingerprint() != fingerprint))
}

/// Runs every (seed, corruption, arm) combination.
///
/// A failing seed does not stop the others; the report is then marked
/// incomplete and carries the first error message.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix_secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let outputs: Vec<SeedOutput> = if cfg.parallel && cfg.seeds.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg.seeds.iter().map(|&s| scope.spawn(move || run_seed(cfg, s))).collect();
            handles
                .into_iter()
                .zip(&cfg.seeds)
                .map(|(h, &s)| {
                    h.join().unwrap_or_else(|_| SeedOutput {
                        source: SourceSummary { seed: s, train_accuracy: 0.0, clean_test_accuracy: 0.0, fingerprint: String::new() },
                        results: vec![],
                        timings: vec![],
                        error: Some(Error::Contract(format!("seed {s} worker panicked"))),
                    })
                })
                .collect()
        })
    } else {
        cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
    };

    let mut sources = Vec::new();
    let mut results = Vec::new();
    let mut error = None;
    let mut time_by_arm: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for o in outputs {
        sources.push(o.source);
        results.extend(o.results);
        for (arm, secs, n) in o.timings {
            let e = time_by_arm.entry(arm).or_default();
            e.0 += secs;
            e.1 += n;
        }
        if error.is_none() {
            error = o.error.map(|e| e.to_string());
        }
    }
    let arms: Vec<String> = cfg.arms.iter().map(|a| a.label.clone()).collect();
    let corruptions: Vec<String> = cfg.corruptions.iter().map(corruption_label).collect();
    let table = build_table(&arms, &corruptions, &results);
    let metadata = Metadata {
        started_unix_secs,
        wall_seconds: started.elapsed().as_secs_f64(),
        ms_per_sample: time_by_arm.into_iter().map(|(a, (s, n))| (a, 1000.0 * s / n.max(1) as f64)).collect(),
    };
    Ok(Report { config: cfg.clone(), complete: error.is_none(), error, sources, results, table, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_spreads() {
        assert_ne!(mix_seed(0, 1), mix_seed(1, 0));
        assert_ne!(mix_seed(0, 1), mix_seed(0, 2));
        assert_eq!(mix_seed(5, 7), mix_seed(5, 7));
    }
}
