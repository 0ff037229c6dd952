//! Pipeline stages and their on-disk artifacts.
//!
//! Every stage writes below `<root>/<stage dir>/` and records the content hash
//! of each file in the run manifest. A completed stage whose artifacts still
//! verify is skipped unless `--force` is given.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dfqlab::diagnostics::{ComparisonReport, RpcFidReport, RunRecord};
use dfqlab::experiment::{
    calibration_set, evaluate_strategy, prompts_for, rpc_fid_report, sample_seed_data, train_seed_reference,
    ExperimentConfig, SeedContext, SeedData, Setup, Strategy,
};
use dfqlab::model::checkpoint::{load_model, save_model};
use dfqlab::model::{ModelParams, TrainLog};
use dfqlab::prompts::{load_manifest, save_manifest};
use dfqlab::quant::{save_quantized, write_traces_csv, BlockReport, ParamGroup};
use dfqlab::world::{load_labeled_set, save_labeled_set, LabeledSet};

use crate::manifest::{Lock, RunManifest};
use crate::report::render_markdown;
use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenPrompts,
    Synth,
    TrainRef,
    Calibrate,
    Rpcfid,
    Gradtrace,
    Compare,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenPrompts => "gen-prompts",
            Stage::Synth => "synth",
            Stage::TrainRef => "train-ref",
            Stage::Calibrate => "calibrate",
            Stage::Rpcfid => "rpcfid",
            Stage::Gradtrace => "gradtrace",
            Stage::Compare => "compare",
            Stage::Report => "report",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Stage::GenPrompts => "prompts",
            Stage::Synth => "synth",
            Stage::TrainRef => "train",
            Stage::Calibrate => "calibrate",
            Stage::Rpcfid => "rpcfid",
            Stage::Gradtrace => "gradtrace",
            Stage::Compare => "compare",
            Stage::Report => "report",
        }
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::GenPrompts => &[],
            Stage::Synth => &[Stage::GenPrompts],
            Stage::TrainRef => &[Stage::Synth],
            Stage::Calibrate => &[Stage::Synth, Stage::TrainRef],
            Stage::Rpcfid => &[Stage::TrainRef],
            Stage::Gradtrace => &[Stage::Calibrate],
            Stage::Compare => &[Stage::Calibrate, Stage::Gradtrace],
            Stage::Report => &[Stage::Compare, Stage::Rpcfid],
        }
    }

    /// Driver stages build whatever upstream stages are missing.
    pub fn is_driver(self) -> bool {
        matches!(self, Stage::Compare | Stage::Report)
    }
}

fn load_reference(path: &Path) -> Result<ModelParams> {
    let (params, header) = load_model(path)?;
    if header.kind != "fp" {
        return Err(Failure::Artifact(format!("{} is a {} checkpoint, expected fp", path.display(), header.kind)).into());
    }
    Ok(params)
}

fn seed_dir(stage: Stage, seed: u64) -> String {
    format!("{}/seed{seed}", stage.dir())
}

/// An opened run directory `<out>/<config hash prefix>/`.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    setup: Setup,
    manifest: RunManifest,
    force: bool,
    /// Stages already brought up to date in this invocation.
    visited: Vec<Stage>,
    _lock: Lock,
}

impl Run {
    pub fn open(cfg: ExperimentConfig, out: &Path, force: bool) -> Result<Self> {
        let setup = Setup::new(&cfg)?;
        let root = out.join(cfg.short_hash());
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let lock = Lock::acquire(&root)?;
        let manifest = RunManifest::open(&root, &cfg.hash())?;
        let config_path = root.join("config.toml");
        let text = cfg.to_toml()?;
        if fs::read_to_string(&config_path).ok().as_deref() != Some(text.as_str()) {
            fs::write(&config_path, text)?;
        }
        Ok(Self { cfg, root, setup, manifest, force, visited: Vec::new(), _lock: lock })
    }

    /// Brings `stage` up to date. Driver stages build their dependencies;
    /// other stages require them to be complete already.
    pub fn ensure(&mut self, stage: Stage) -> Result<()> {
        self.ensure_inner(stage, stage.is_driver())
    }

    fn ensure_inner(&mut self, stage: Stage, build_deps: bool) -> Result<()> {
        if self.visited.contains(&stage) {
            return Ok(());
        }
        for &dep in stage.deps() {
            if build_deps {
                self.ensure_inner(dep, true)?;
            } else if !self.manifest.is_complete(dep.name()) {
                let first = self.outputs(dep).into_iter().next().unwrap_or_else(|| dep.dir().to_string());
                return Err(Failure::Artifact(format!(
                    "missing artifact {} (run `dfqlab {}` first)",
                    self.root.join(first).display(),
                    dep.name()
                ))
                .into());
            } else {
                self.manifest.verify(&self.root, dep.name())?;
            }
        }
        if self.manifest.is_complete(stage.name()) && !self.force {
            self.manifest.verify(&self.root, stage.name())?;
            eprintln!("{}: up to date", stage.name());
            self.visited.push(stage);
            return Ok(());
        }
        self.manifest.invalidate(stage.name());
        self.manifest.save(&self.root)?;
        eprintln!("{}: running", stage.name());
        let written = match stage {
            Stage::GenPrompts => self.gen_prompts()?,
            Stage::Synth => self.synth()?,
            Stage::TrainRef => self.train_ref()?,
            Stage::Calibrate => self.calibrate()?,
            Stage::Rpcfid => self.rpcfid()?,
            Stage::Gradtrace => self.gradtrace()?,
            Stage::Compare => self.compare()?,
            Stage::Report => self.report()?,
        };
        debug_assert_eq!(written, self.outputs(stage));
        self.manifest.record(&self.root, stage.name(), &written)?;
        self.manifest.save(&self.root)?;
        eprintln!("{}: wrote {} artifacts", stage.name(), written.len());
        self.visited.push(stage);
        Ok(())
    }

    /// Relative paths a stage produces, in the order it writes them.
    pub fn outputs(&self, stage: Stage) -> Vec<String> {
        let mut out = Vec::new();
        let strategies = &self.cfg.strategies;
        for &seed in &self.cfg.seeds {
            let d = seed_dir(stage, seed);
            match stage {
                Stage::GenPrompts => {
                    out.extend(strategies.iter().filter(|s| s.is_synthetic()).map(|s| format!("{d}/{s}.jsonl")))
                }
                Stage::Synth => {
                    for name in ["train", "test"].into_iter().map(String::from).chain(strategies.iter().map(|s| format!("calib_{s}"))) {
                        out.push(format!("{d}/{name}.dfqt"));
                        out.push(format!("{d}/{name}.json"));
                    }
                }
                Stage::TrainRef => {
                    out.push(format!("{d}/reference.ckpt"));
                    out.push(format!("{d}/train_log.json"));
                }
                Stage::Calibrate => {
                    for s in strategies {
                        for ext in ["qckpt", "traces.csv", "blocks.json", "run.json"] {
                            out.push(format!("{d}/{s}.{ext}"));
                        }
                    }
                }
                Stage::Rpcfid => out.push(format!("{}/seed{seed}.json", stage.dir())),
                _ => {}
            }
        }
        let d = stage.dir();
        match stage {
            Stage::Rpcfid => out.push(format!("{d}/rpcfid.csv")),
            Stage::Gradtrace => {
                out.push(format!("{d}/traces.csv"));
                for s in strategies {
                    out.extend(ParamGroup::ALL.iter().map(|g| format!("{d}/trace_{s}_{}.dat", g.name())));
                }
            }
            Stage::Compare => {
                out.extend(["report.json", "summary.csv", "runs.csv", "pairwise.csv"].map(|f| format!("{d}/{f}")))
            }
            Stage::Report => out.push(format!("{d}/report.md")),
            _ => {}
        }
        out
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    fn write_json<T: serde::Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let p = self.require(rel)?;
        serde_json::from_slice(&fs::read(&p)?).with_context(|| format!("parsing {}", p.display()))
    }

    fn require(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Failure::Artifact(format!("missing artifact {}", p.display())).into());
        }
        Ok(p)
    }

    fn load_set(&self, rel: &str) -> Result<LabeledSet> {
        Ok(load_labeled_set(&self.require(rel)?)?.0)
    }

    fn seed_context(&self, seed: u64) -> Result<SeedContext> {
        let sd = seed_dir(Stage::Synth, seed);
        let data = SeedData {
            seed,
            train: self.load_set(&format!("{sd}/train.dfqt"))?,
            test: self.load_set(&format!("{sd}/test.dfqt"))?,
        };
        let td = seed_dir(Stage::TrainRef, seed);
        let reference = load_reference(&self.require(&format!("{td}/reference.ckpt"))?)?;
        let train_log: TrainLog = self.read_json(&format!("{td}/train_log.json"))?;
        Ok(SeedContext { data, reference, train_log })
    }

    fn run_records(&self) -> Result<Vec<RunRecord>> {
        let mut runs = Vec::new();
        for &seed in &self.cfg.seeds {
            for s in &self.cfg.strategies {
                runs.push(self.read_json(&format!("{}/{s}.run.json", seed_dir(Stage::Calibrate, seed)))?);
            }
        }
        Ok(runs)
    }

    fn comparison(&self) -> Result<ComparisonReport> {
        let names: Vec<String> = self.cfg.strategies.iter().map(Strategy::name).collect();
        Ok(ComparisonReport::build(&self.cfg.hash(), &names, self.run_records()?)?)
    }

    fn gen_prompts(&self) -> Result<Vec<String>> {
        let mut written = Vec::new();
        for &seed in &self.cfg.seeds {
            for &s in self.cfg.strategies.iter().filter(|s| s.is_synthetic()) {
                let records = prompts_for(&self.cfg, &self.setup, s, seed)?.expect("synthetic strategy");
                let rel = format!("{}/{s}.jsonl", seed_dir(Stage::GenPrompts, seed));
                fs::create_dir_all(self.path(&rel).parent().expect("seed dir"))?;
                save_manifest(&self.path(&rel), &records)?;
                written.push(rel);
            }
        }
        Ok(written)
    }

    fn synth(&self) -> Result<Vec<String>> {
        let world_hash = self.setup.world.spec().config_hash();
        let mut written = Vec::new();
        for &seed in &self.cfg.seeds {
            let d = seed_dir(Stage::Synth, seed);
            fs::create_dir_all(self.path(&d))?;
            let data = sample_seed_data(&self.cfg, &self.setup, seed)?;
            let mut save = |name: &str, set: &LabeledSet| -> Result<()> {
                let rel = format!("{d}/{name}.dfqt");
                save_labeled_set(&self.path(&rel), set, &world_hash, seed)?;
                written.push(rel);
                written.push(format!("{d}/{name}.json"));
                Ok(())
            };
            save("train", &data.train)?;
            save("test", &data.test)?;
            for &s in &self.cfg.strategies {
                let records = if s.is_synthetic() {
                    Some(load_manifest(&self.require(&format!("{}/{s}.jsonl", seed_dir(Stage::GenPrompts, seed)))?)?)
                } else {
                    None
                };
                let set = calibration_set(&self.cfg, &self.setup, &data, s, records.as_deref())?;
                save(&format!("calib_{s}"), &set)?;
            }
        }
        Ok(written)
    }

    fn train_ref(&self) -> Result<Vec<String>> {
        let mut written = Vec::new();
        for &seed in &self.cfg.seeds {
            let sd = seed_dir(Stage::Synth, seed);
            let data = SeedData {
                seed,
                train: self.load_set(&format!("{sd}/train.dfqt"))?,
                test: self.load_set(&format!("{sd}/test.dfqt"))?,
            };
            let (params, log) = train_seed_reference(&self.cfg, &data)?;
            eprintln!(
                "  seed {seed}: train accuracy {:.4}, test accuracy {:.4}",
                log.train_accuracy,
                log.test_accuracy.unwrap_or(f64::NAN)
            );
            let d = seed_dir(Stage::TrainRef, seed);
            fs::create_dir_all(self.path(&d))?;
            let ckpt = format!("{d}/reference.ckpt");
            save_model(&self.path(&ckpt), &params, seed)?;
            let log_rel = format!("{d}/train_log.json");
            self.write_json(&log_rel, &log)?;
            written.extend([ckpt, log_rel]);
        }
        Ok(written)
    }

    fn calibrate(&self) -> Result<Vec<String>> {
        let mut written = Vec::new();
        for &seed in &self.cfg.seeds {
            let ctx = self.seed_context(seed)?;
            let d = seed_dir(Stage::Calibrate, seed);
            fs::create_dir_all(self.path(&d))?;
            for &s in &self.cfg.strategies {
                let calib = self.load_set(&format!("{}/calib_{s}.dfqt", seed_dir(Stage::Synth, seed)))?;
                let (record, q) = evaluate_strategy(&self.cfg, &ctx, s, &calib)?;
                eprintln!(
                    "  seed {seed} {s}: accuracy {:.4} (fp {:.4}), gap {:.4}, bound {:.3e}",
                    record.accuracy, record.fp_accuracy, record.gap, record.bound
                );
                let ck = format!("{d}/{s}.qckpt");
                save_quantized(&self.path(&ck), &q.model, seed)?;
                let tr = format!("{d}/{s}.traces.csv");
                write_traces_csv(BufWriter::new(fs::File::create(self.path(&tr))?), &q.traces)?;
                let bl = format!("{d}/{s}.blocks.json");
                self.write_json(&bl, &q.blocks)?;
                let rr = format!("{d}/{s}.run.json");
                self.write_json(&rr, &record)?;
                written.extend([ck, tr, bl, rr]);
            }
        }
        Ok(written)
    }

    fn rpcfid(&self) -> Result<Vec<String>> {
        let mut written = Vec::new();
        let mut csv = String::from("seed,class,label,numerator,denominator,rpc_fid,rank\n");
        for &seed in &self.cfg.seeds {
            let rel = seed_dir(Stage::TrainRef, seed) + "/reference.ckpt";
            let reference = load_reference(&self.require(&rel)?)?;
            let rep = rpc_fid_report(&self.cfg, &self.setup, &reference, seed)?;
            let ranking = rep.ranking();
            for row in &rep.rows {
                let rank = ranking.iter().position(|&c| c == row.class).expect("ranked") + 1;
                writeln!(
                    csv,
                    "{seed},{},{},{},{},{},{rank}",
                    row.class,
                    self.setup.vocab.label(row.class),
                    row.numerator,
                    row.denominator,
                    row.rpc_fid
                )?;
            }
            let out = format!("{}/seed{seed}.json", Stage::Rpcfid.dir());
            self.write_json(&out, &rep)?;
            written.push(out);
        }
        let out = format!("{}/rpcfid.csv", Stage::Rpcfid.dir());
        self.write(&out, csv.as_bytes())?;
        written.push(out);
        Ok(written)
    }

    fn gradtrace(&self) -> Result<Vec<String>> {
        let d = Stage::Gradtrace.dir();
        let mut csv = String::from("strategy,seed,group,step,grad_sq_norm\n");
        for r in self.run_records()? {
            for (k, g) in ParamGroup::ALL.iter().enumerate() {
                for (t, v) in r.traces[k].iter().enumerate() {
                    writeln!(csv, "{},{},{},{t},{v}", r.strategy, r.seed, g.name())?;
                }
            }
        }
        let mut written = vec![format!("{d}/traces.csv")];
        self.write(&written[0], csv.as_bytes())?;
        let names = self.comparison()?.write_plot_data(&self.path(d))?;
        written.extend(names.into_iter().map(|n| format!("{d}/{n}")));
        Ok(written)
    }

    fn compare(&self) -> Result<Vec<String>> {
        let rep = self.comparison()?;
        let d = Stage::Compare.dir();
        let mut json = rep.to_json()?;
        json.push('\n');
        self.write(&format!("{d}/report.json"), json.as_bytes())?;
        let mut buf = Vec::new();
        rep.write_summary_csv(&mut buf)?;
        self.write(&format!("{d}/summary.csv"), &buf)?;
        buf.clear();
        rep.write_runs_csv(&mut buf)?;
        self.write(&format!("{d}/runs.csv"), &buf)?;
        buf.clear();
        rep.write_pairwise_csv(&mut buf)?;
        self.write(&format!("{d}/pairwise.csv"), &buf)?;
        Ok(self.outputs(Stage::Compare))
    }

    fn report(&self) -> Result<Vec<String>> {
        let rep: ComparisonReport = self.read_json(&format!("{}/report.json", Stage::Compare.dir()))?;
        let mut rpc = Vec::new();
        for &seed in &self.cfg.seeds {
            rpc.push((seed, self.read_json::<RpcFidReport>(&format!("{}/seed{seed}.json", Stage::Rpcfid.dir()))?));
        }
        let mut blocks = Vec::new();
        for &seed in &self.cfg.seeds {
            for s in &self.cfg.strategies {
                let b: Vec<BlockReport> = self.read_json(&format!("{}/{s}.blocks.json", seed_dir(Stage::Calibrate, seed)))?;
                blocks.push((s.name(), seed, b));
            }
        }
        let text = render_markdown(&self.cfg, &self.setup.vocab, &rep, &rpc, &blocks);
        let out = format!("{}/report.md", Stage::Report.dir());
        self.write(&out, text.as_bytes())?;
        Ok(vec![out])
    }

    /// Main human-readable output of a finished stage.
    pub fn headline(&self, stage: Stage) -> Option<PathBuf> {
        match stage {
            Stage::Compare => Some(self.path("compare/summary.csv")),
            Stage::Report => Some(self.path("report/report.md")),
            Stage::Rpcfid => Some(self.path("rpcfid/rpcfid.csv")),
            _ => None,
        }
    }
}
