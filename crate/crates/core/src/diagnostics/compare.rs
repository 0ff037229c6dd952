use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::csv_err;
use crate::error::{Error, Result};
use crate::quant::{GradTrace, ParamGroup};

/// Per-group values, in the order of [`ParamGroup::ALL`].
pub type GroupValues = [f64; 3];

/// Result of calibrating with one strategy under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub seed: u64,
    pub calibration_size: usize,
    pub fp_accuracy: f64,
    pub accuracy: f64,
    pub calibration_loss: f64,
    pub test_loss: f64,
    pub gap: f64,
    pub bound: f64,
    /// Per group: sum over blocks of the mean over steps of g(t).
    pub grad_means: GroupValues,
    /// Per group: g(t) summed over blocks, one entry per step.
    pub traces: [Vec<f64>; 3],
}

impl RunRecord {
    /// Per-group summaries of a set of block traces.
    pub fn summarize_traces(traces: &[GradTrace]) -> (GroupValues, [Vec<f64>; 3]) {
        let steps = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
        let means = ParamGroup::ALL.map(|g| traces.iter().map(|t| t.mean(g)).sum());
        let per_step = ParamGroup::ALL.map(|g| {
            (0..steps).map(|s| traces.iter().filter_map(|t| t.steps.get(s)).map(|st| st.group(g)).sum()).collect()
        });
        (means, per_step)
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Gap => self.gap,
            Metric::Bound => self.bound,
            Metric::Grad(g) => self.grad_means[group_index(g)],
        }
    }
}

fn group_index(g: ParamGroup) -> usize {
    ParamGroup::ALL.iter().position(|&x| x == g).expect("known group")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Gap,
    Bound,
    Grad(ParamGroup),
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Accuracy,
        Metric::Gap,
        Metric::Bound,
        Metric::Grad(ParamGroup::ActScale),
        Metric::Grad(ParamGroup::WeightRounding),
        Metric::Grad(ParamGroup::WeightScale),
    ];

    pub fn name(self) -> String {
        match self {
            Metric::Accuracy => "accuracy".into(),
            Metric::Gap => "gap".into(),
            Metric::Bound => "bound".into(),
            Metric::Grad(g) => format!("g_{}", g.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub seeds: usize,
    pub fp_accuracy: f64,
    pub accuracy: f64,
    pub calibration_loss: f64,
    pub test_loss: f64,
    pub gap: f64,
    pub bound: f64,
    pub grad_means: GroupValues,
}

/// Per-seed comparison of two strategies on one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseOrdering {
    pub metric: String,
    pub a: String,
    pub b: String,
    /// Seeds where `a` is strictly larger.
    pub a_greater: usize,
    pub b_greater: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
    pub summaries: Vec<StrategySummary>,
    pub pairwise: Vec<PairwiseOrdering>,
    pub runs: Vec<RunRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl ComparisonReport {
    /// Builds summaries and per-seed pairwise orderings. Strategy order is the
    /// order of first appearance in `runs`; listing a strategy twice yields two
    /// identical rows.
    pub fn build(config_hash: &str, strategies: &[String], runs: Vec<RunRecord>) -> Result<Self> {
        let mut seeds: Vec<u64> = Vec::new();
        for r in &runs {
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        let of = |name: &str| -> Vec<&RunRecord> { runs.iter().filter(|r| r.strategy == name).collect() };
        let mut summaries = Vec::with_capacity(strategies.len());
        for s in strategies {
            let rs = of(s);
            if rs.is_empty() {
                return Err(Error::Data(format!("no runs for strategy {s}")));
            }
            summaries.push(StrategySummary {
                strategy: s.clone(),
                seeds: rs.len(),
                fp_accuracy: mean(rs.iter().map(|r| r.fp_accuracy)),
                accuracy: mean(rs.iter().map(|r| r.accuracy)),
                calibration_loss: mean(rs.iter().map(|r| r.calibration_loss)),
                test_loss: mean(rs.iter().map(|r| r.test_loss)),
                gap: mean(rs.iter().map(|r| r.gap)),
                bound: mean(rs.iter().map(|r| r.bound)),
                grad_means: [0, 1, 2].map(|k| mean(rs.iter().map(|r| r.grad_means[k]))),
            });
        }
        let mut distinct: Vec<&String> = Vec::new();
        for s in strategies {
            if !distinct.contains(&s) {
                distinct.push(s);
            }
        }
        let mut pairwise = Vec::new();
        for (i, a) in distinct.iter().enumerate() {
            for b in &distinct[i + 1..] {
                for m in Metric::ALL {
                    let (mut ag, mut bg, mut ties) = (0, 0, 0);
                    for &seed in &seeds {
                        let find = |s: &str| runs.iter().find(|r| r.strategy == s && r.seed == seed);
                        if let (Some(x), Some(y)) = (find(a), find(b)) {
                            let (u, v) = (x.metric(m), y.metric(m));
                            if u > v {
                                ag += 1;
                            } else if v > u {
                                bg += 1;
                            } else {
                                ties += 1;
                            }
                        }
                    }
                    pairwise.push(PairwiseOrdering {
                        metric: m.name(),
                        a: (*a).clone(),
                        b: (*b).clone(),
                        a_greater: ag,
                        b_greater: bg,
                        ties,
                    });
                }
            }
        }
        Ok(Self { config_hash: config_hash.to_string(), seeds, strategies: strategies.to_vec(), summaries, pairwise, runs })
    }

    pub fn ordering(&self, metric: &str, a: &str, b: &str) -> Option<&PairwiseOrdering> {
        self.pairwise.iter().find(|p| p.metric == metric && p.a == a && p.b == b)
    }

    pub fn run(&self, strategy: &str, seed: u64) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.strategy == strategy && r.seed == seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per strategy.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "strategy",
            "seeds",
            "fp_accuracy",
            "accuracy",
            "calibration_loss",
            "test_loss",
            "gap",
            "bound",
            "g_act_scale",
            "g_weight_rounding",
            "g_weight_scale",
        ])
        .map_err(csv_err)?;
        for s in &self.summaries {
            let mut rec = vec![s.strategy.clone(), s.seeds.to_string()];
            rec.extend(
                [s.fp_accuracy, s.accuracy, s.calibration_loss, s.test_loss, s.gap, s.bound]
                    .iter()
                    .chain(&s.grad_means)
                    .map(|v| v.to_string()),
            );
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per (strategy, seed).
    pub fn write_runs_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "strategy",
            "seed",
            "calibration_size",
            "fp_accuracy",
            "accuracy",
            "calibration_loss",
            "test_loss",
            "gap",
            "bound",
            "g_act_scale",
            "g_weight_rounding",
            "g_weight_scale",
        ])
        .map_err(csv_err)?;
        for r in &self.runs {
            let mut rec = vec![r.strategy.clone(), r.seed.to_string(), r.calibration_size.to_string()];
            rec.extend(
                [r.fp_accuracy, r.accuracy, r.calibration_loss, r.test_loss, r.gap, r.bound]
                    .iter()
                    .chain(&r.grad_means)
                    .map(|v| v.to_string()),
            );
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_pairwise_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "a", "b", "a_greater", "b_greater", "ties"]).map_err(csv_err)?;
        for p in &self.pairwise {
            out.write_record([
                p.metric.clone(),
                p.a.clone(),
                p.b.clone(),
                p.a_greater.to_string(),
                p.b_greater.to_string(),
                p.ties.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `trace_<strategy>_<group>.dat` files with two columns
    /// `step value`, the value being g(t) summed over blocks and averaged
    /// over seeds. Returns the file names.
    pub fn write_plot_data(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for s in &self.summaries {
            if names.iter().any(|n: &String| n.starts_with(&format!("trace_{}_", s.strategy))) {
                continue;
            }
            let runs: Vec<&RunRecord> = self.runs.iter().filter(|r| r.strategy == s.strategy).collect();
            for (k, g) in ParamGroup::ALL.iter().enumerate() {
                let steps = runs.iter().map(|r| r.traces[k].len()).max().unwrap_or(0);
                let mut text = format!("# step g_{}\n", g.name());
                for t in 0..steps {
                    let v = mean(runs.iter().filter_map(|r| r.traces[k].get(t).copied()));
                    text.push_str(&format!("{t} {v}\n"));
                }
                let name = format!("trace_{}_{}.dat", s.strategy, g.name());
                fs::write(dir.join(&name), text)?;
                names.push(name);
            }
        }
        Ok(names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::GradStep;

    fn run(strategy: &str, seed: u64, acc: f64) -> RunRecord {
        RunRecord {
            strategy: strategy.into(),
            seed,
            calibration_size: 4,
            fp_accuracy: 1.0,
            accuracy: acc,
            calibration_loss: 0.1,
            test_loss: 0.3,
            gap: 0.2,
            bound: 0.01,
            grad_means: [1.0, 2.0, 3.0],
            traces: [vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]],
        }
    }

    #[test]
    fn summaries_and_win_counts() {
        let runs = vec![run("a", 0, 0.5), run("b", 0, 0.6), run("a", 1, 0.7), run("b", 1, 0.6), run("a", 2, 0.4), run("b", 2, 0.4)];
        let names = vec!["a".to_string(), "b".to_string()];
        let r = ComparisonReport::build("h", &names, runs).unwrap();
        assert_eq!(r.summaries.len(), 2);
        assert!((r.summaries[0].accuracy - 1.6 / 3.0).abs() < 1e-12);
        let o = r.ordering("accuracy", "a", "b").unwrap();
        assert_eq!((o.a_greater, o.b_greater, o.ties), (1, 1, 1));
        assert_eq!(r.ordering("gap", "a", "b").unwrap().ties, 3);
        let mut csv = Vec::new();
        r.write_summary_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn duplicate_strategy_gives_identical_rows() {
        let names = vec!["a".to_string(), "a".to_string()];
        let r = ComparisonReport::build("h", &names, vec![run("a", 0, 0.5)]).unwrap();
        assert_eq!(r.summaries[0], r.summaries[1]);
        assert!(ComparisonReport::build("h", &["c".to_string()], vec![run("a", 0, 0.5)]).is_err());
    }

    #[test]
    fn trace_summary_and_plot_files() {
        let step = |t, g| GradStep { step: t, act_scale: g, weight_rounding: 2.0 * g, weight_scale: 0.0, gamma: 1.0, sigma: 1.0, n: 1 };
        let traces = vec![
            GradTrace { block: 0, steps: vec![step(0, 1.0), step(1, 3.0)] },
            GradTrace { block: 1, steps: vec![step(0, 2.0), step(1, 2.0)] },
        ];
        let (means, per_step) = RunRecord::summarize_traces(&traces);
        assert_eq!(means, [4.0, 8.0, 0.0]);
        assert_eq!(per_step[0], vec![3.0, 5.0]);
        let r = ComparisonReport::build("h", &["a".to_string()], vec![run("a", 0, 0.5)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let names = r.write_plot_data(dir.path()).unwrap();
        assert_eq!(names.len(), 3);
        let text = fs::read_to_string(dir.path().join("trace_a_weight_rounding.dat")).unwrap();
        assert_eq!(text, "# step g_weight_rounding\n0 2\n1 2\n");
    }
}
