use crate::diagnostics::{
    empirical_gap, features, gap_bound, rpc_fid, ComparisonReport, RpcFidReport, RunRecord,
};
use crate::error::{Error, Result};
use crate::model::{train_reference, Loss, ModelParams, ModelSpec, TrainLog};
use crate::numerics::{splitmix64, RngStream, Tensor};
use crate::prompts::{
    default_templates, gen_mixup_class, gen_nclass, gen_single_class, gen_single_for_class, gen_variant,
    PairingMode, PairingPolicy, PromptRecord, Vocabulary,
};
use crate::quant::{eval_quantized, quantize_model, Quantization};
use crate::world::{augment, render_manifest, sample_real, sample_real_balanced, LabeledSet, World};

use super::config::{ExperimentConfig, Strategy};

/// Real data of one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Everything shared by the runs of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub data: SeedData,
    pub reference: ModelParams,
    pub train_log: TrainLog,
}

/// World and vocabulary materialised from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub world: World,
    pub vocab: Vocabulary,
    pub templates: Vec<String>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { world: cfg.world()?, vocab: cfg.vocabulary()?, templates: default_templates() })
    }

    /// In-distribution prototypes centred on mid-grey, one row per class; the
    /// class vectors behind similarity-based pairing.
    pub fn class_vectors(&self) -> Tensor {
        let k = self.world.num_classes();
        let d = self.world.spec().pixels();
        let mut data = Vec::with_capacity(k * d);
        for c in 0..k {
            data.extend(self.world.in_distribution_prototype(c).data().iter().map(|v| v - 0.5));
        }
        Tensor::new(vec![k, d], data).expect("prototype rows")
    }
}

/// Class-balanced train and test sets of one seed.
pub fn sample_seed_data(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<SeedData> {
    let train = sample_real_balanced(&setup.world, cfg.world.train_per_class, &mut RngStream::labeled(seed, "train-data"))?;
    let test = sample_real_balanced(&setup.world, cfg.world.test_per_class, &mut RngStream::labeled(seed, "test-data"))?;
    Ok(SeedData { seed, train, test })
}

/// Model spec of one seed: the configured spec with a per-seed initialisation.
pub fn seed_model_spec(cfg: &ExperimentConfig, seed: u64) -> ModelSpec {
    ModelSpec { init_seed: splitmix64(cfg.model.init_seed ^ splitmix64(seed)), ..cfg.model.clone() }
}

pub fn train_seed_reference(cfg: &ExperimentConfig, data: &SeedData) -> Result<(ModelParams, TrainLog)> {
    let spec = seed_model_spec(cfg, data.seed);
    train_reference(&data.train, Some(&data.test), &spec, &cfg.train, &mut RngStream::labeled(data.seed, "train"))
}

pub fn prepare_seed(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<SeedContext> {
    let data = sample_seed_data(cfg, setup, seed)?;
    let (reference, train_log) = train_seed_reference(cfg, &data)?;
    Ok(SeedContext { data, reference, train_log })
}

/// Prompt manifest behind a strategy, or `None` for strategies built from real
/// samples. Pixel-augmented single-class sets share the single-class manifest.
pub fn prompts_for(cfg: &ExperimentConfig, setup: &Setup, strategy: Strategy, seed: u64) -> Result<Option<Vec<PromptRecord>>> {
    let n = cfg.calibration_size;
    let (vocab, templates) = (&setup.vocab, &setup.templates);
    let records = match strategy {
        Strategy::Real | Strategy::RealAugmented(_) => return Ok(None),
        Strategy::Single | Strategy::SingleAugmented(_) => {
            gen_single_class(vocab, templates, n, &RngStream::labeled(seed, "prompts/single"))?
        }
        Strategy::Mixup(mode) => {
            let policy = match mode {
                PairingMode::Random => PairingPolicy::random(),
                m => PairingPolicy::by_similarity(m, setup.class_vectors()),
            };
            gen_mixup_class(vocab, templates, n, &policy, &RngStream::labeled(seed, "prompts/mixup"))?
        }
        Strategy::Nclass(k) => gen_nclass(vocab, templates, n, k, &RngStream::labeled(seed, "prompts/nclass"))?,
        Strategy::Variant(v) => {
            gen_variant(vocab, templates, n, v, &RngStream::labeled(seed, &format!("prompts/{strategy}")))?
        }
    };
    Ok(Some(records))
}

/// The first `calibration_size` training samples; the training set is
/// interleaved class by class, so this prefix is class-balanced.
pub fn real_calibration(cfg: &ExperimentConfig, data: &SeedData) -> Result<LabeledSet> {
    let n = cfg.calibration_size;
    if n > data.train.len() {
        return Err(Error::config(format!(
            "calibration_size {n} exceeds the {} training samples",
            data.train.len()
        )));
    }
    Ok(data.train.select(&(0..n).collect::<Vec<_>>()))
}

/// Builds the calibration set of `strategy` from its manifest (if any) and the
/// seed's real data.
pub fn calibration_set(
    cfg: &ExperimentConfig,
    setup: &Setup,
    data: &SeedData,
    strategy: Strategy,
    manifest: Option<&[PromptRecord]>,
) -> Result<LabeledSet> {
    let rendered = || -> Result<LabeledSet> {
        let records = manifest.ok_or_else(|| Error::pre(format!("strategy {strategy} needs a prompt manifest")))?;
        if records.len() != cfg.calibration_size {
            return Err(Error::Data(format!(
                "manifest for {strategy} has {} records, expected {}",
                records.len(),
                cfg.calibration_size
            )));
        }
        render_manifest(&setup.world, records)
    };
    let mut aug_rng = RngStream::labeled(data.seed, &format!("augment/{strategy}"));
    match strategy {
        Strategy::Real => real_calibration(cfg, data),
        Strategy::RealAugmented(k) => augment(&real_calibration(cfg, data)?, k, &cfg.augment, &mut aug_rng),
        Strategy::SingleAugmented(k) => augment(&rendered()?, k, &cfg.augment, &mut aug_rng),
        _ => rendered(),
    }
}

/// Quantizes the seed's reference model on `calib` and measures the result.
pub fn evaluate_strategy(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    strategy: Strategy,
    calib: &LabeledSet,
) -> Result<(RunRecord, Quantization)> {
    let seed = ctx.data.seed;
    let q = quantize_model(&ctx.reference, calib, &cfg.quant, &RngStream::labeled(seed, "quant"))?;
    let record = measure(cfg, ctx, strategy, calib, &q)?;
    Ok((record, q))
}

/// Run record of an existing quantization.
pub fn measure(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    strategy: Strategy,
    calib: &LabeledSet,
    q: &Quantization,
) -> Result<RunRecord> {
    let _ = cfg;
    let gap = empirical_gap(&q.model, calib, &ctx.data.test, Loss::CE)?;
    let (grad_means, traces) = RunRecord::summarize_traces(&q.traces);
    Ok(RunRecord {
        strategy: strategy.name(),
        seed: ctx.data.seed,
        calibration_size: calib.len(),
        fp_accuracy: ctx.reference.accuracy(&ctx.data.test)?,
        accuracy: eval_quantized(&q.model, &ctx.data.test)?,
        calibration_loss: gap.calibration_loss,
        test_loss: gap.test_loss,
        gap: gap.gap,
        bound: gap_bound(&q.traces, calib.len())?,
        grad_means,
        traces,
    })
}

/// One strategy end to end on a prepared seed.
pub fn run_strategy(cfg: &ExperimentConfig, setup: &Setup, ctx: &SeedContext, strategy: Strategy) -> Result<RunRecord> {
    let manifest = prompts_for(cfg, setup, strategy, ctx.data.seed)?;
    let calib = calibration_set(cfg, setup, &ctx.data, strategy, manifest.as_deref())?;
    Ok(evaluate_strategy(cfg, ctx, strategy, &calib)?.0)
}

/// Every configured strategy under every configured seed. `progress` is called
/// after each finished run.
pub fn compare(cfg: &ExperimentConfig, mut progress: impl FnMut(&RunRecord)) -> Result<ComparisonReport> {
    let setup = Setup::new(cfg)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len() * cfg.strategies.len());
    for &seed in &cfg.seeds {
        let ctx = prepare_seed(cfg, &setup, seed)?;
        for &s in &cfg.strategies {
            let r = run_strategy(cfg, &setup, &ctx, s)?;
            progress(&r);
            runs.push(r);
        }
    }
    let names: Vec<String> = cfg.strategies.iter().map(Strategy::name).collect();
    ComparisonReport::build(&cfg.hash(), &names, runs)
}

/// Per-class RPC-FID of single-class renders against fresh real samples,
/// measured in the feature space of `extractor`.
pub fn rpc_fid_report(cfg: &ExperimentConfig, setup: &Setup, extractor: &ModelParams, seed: u64) -> Result<RpcFidReport> {
    let h = cfg.rpcfid.n_half;
    let resample = RngStream::labeled(seed, "rpcfid/resample");
    let mut rows = Vec::with_capacity(setup.vocab.len());
    for class in 0..setup.vocab.len() {
        let c = class as u64;
        let real = sample_real(&setup.world, class, 2 * h, &mut RngStream::labeled(seed, "rpcfid/real").substream(c))?;
        let records = gen_single_for_class(
            &setup.vocab,
            &setup.templates,
            class,
            h,
            &RngStream::labeled(seed, "rpcfid/prompts").substream(c),
        )?;
        let synthetic = render_manifest(&setup.world, &records)?;
        let fr = features(extractor, &real.images)?;
        let fs = features(extractor, &synthetic.images)?;
        rows.push(rpc_fid(class, &fr, &fs, &cfg.rpcfid, &mut resample.substream(c))?);
    }
    Ok(RpcFidReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::prompts::PromptStrategy;
    use crate::quant::QuantConfig;
    use crate::world::{AugmentKind, Provenance, WorldConfig};

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            strategies: vec![Strategy::Real, Strategy::Single, Strategy::Mixup(PairingMode::Random)],
            seeds: vec![0, 1],
            calibration_size: 40,
            world: WorldConfig { image_size: 8, train_per_class: 20, test_per_class: 10, ..WorldConfig::default() },
            model: ModelSpec { input: [1, 8, 8], conv_channels: vec![4], d_feat: 8, num_classes: 10, init_seed: 3 },
            train: crate::model::TrainConfig { epochs: 2, ..Default::default() },
            quant: QuantConfig { steps: 6, batch_size: 8, ..QuantConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn real_calibration_is_class_balanced() {
        let cfg = tiny_config();
        let setup = Setup::new(&cfg).unwrap();
        let data = sample_seed_data(&cfg, &setup, 0).unwrap();
        let calib = real_calibration(&cfg, &data).unwrap();
        for c in 0..10 {
            assert_eq!(calib.indices_of(c).len(), 4);
        }
        let too_big = ExperimentConfig { calibration_size: 201, ..cfg };
        assert!(real_calibration(&too_big, &data).is_err());
    }

    #[test]
    fn every_strategy_builds_a_calibration_set() {
        let cfg = tiny_config();
        let setup = Setup::new(&cfg).unwrap();
        let data = sample_seed_data(&cfg, &setup, 5).unwrap();
        for s in Strategy::known() {
            let m = prompts_for(&cfg, &setup, s, 5).unwrap();
            assert_eq!(m.is_some(), s.is_synthetic(), "{s}");
            let set = calibration_set(&cfg, &setup, &data, s, m.as_deref()).unwrap();
            assert_eq!(set.len(), cfg.calibration_size, "{s}");
            let expected = match s {
                Strategy::Real => Provenance::Real,
                Strategy::RealAugmented(_) | Strategy::SingleAugmented(_) => Provenance::Augmented,
                Strategy::Mixup(_) => Provenance::SyntheticMixup,
                Strategy::Nclass(_) => Provenance::SyntheticNclass,
                _ => Provenance::SyntheticSingle,
            };
            assert_eq!(set.provenance, expected, "{s}");
        }
        let single = prompts_for(&cfg, &setup, Strategy::Single, 5).unwrap().unwrap();
        let aug = prompts_for(&cfg, &setup, Strategy::SingleAugmented(AugmentKind::Cutmix), 5).unwrap().unwrap();
        assert_eq!(single, aug);
        assert!(single.iter().all(|r| r.strategy == PromptStrategy::Single));
    }

    #[test]
    fn similarity_pairing_picks_extreme_partners() {
        let cfg = tiny_config();
        let setup = Setup::new(&cfg).unwrap();
        let v = setup.class_vectors();
        let high = prompts_for(&cfg, &setup, Strategy::Mixup(PairingMode::HighSimilarity), 0).unwrap().unwrap();
        let low = prompts_for(&cfg, &setup, Strategy::Mixup(PairingMode::LowSimilarity), 0).unwrap().unwrap();
        for (h, l) in high.iter().zip(&low) {
            let sims = crate::prompts::cosine_row(&v, h.class_ids[0]);
            assert!(sims[h.class_ids[1]] >= sims[l.class_ids[1]]);
        }
    }

    #[test]
    fn compare_is_deterministic_and_complete() {
        let cfg = ExperimentConfig { seeds: vec![3], ..tiny_config() };
        let mut seen = 0;
        let a = compare(&cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 3);
        let b = compare(&cfg, |_| ()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let r = a.run("mixup", 3).unwrap();
        assert_eq!(r.calibration_size, 40);
        assert!((r.gap - (r.test_loss - r.calibration_loss)).abs() < 1e-12);
        assert!(r.bound > 0.0 && r.traces[0].len() == 6);
    }

    #[test]
    fn rpc_fid_report_covers_every_class() {
        let cfg = ExperimentConfig {
            rpcfid: crate::diagnostics::RpcFidConfig { n_half: 12, resamples: 1 },
            ..tiny_config()
        };
        let setup = Setup::new(&cfg).unwrap();
        let ctx = prepare_seed(&cfg, &setup, 0).unwrap();
        let rep = rpc_fid_report(&cfg, &setup, &ctx.reference, 0).unwrap();
        assert_eq!(rep.rows.len(), 10);
        assert!(rep.rows.iter().all(|r| r.rpc_fid >= 0.0 && r.synthetic_count == 12 && r.real_count == 24));
        assert_eq!(rep, rpc_fid_report(&cfg, &setup, &ctx.reference, 0).unwrap());
    }
}
