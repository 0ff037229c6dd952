//! Human-readable summary of a finished run.

use std::fmt::Write;

use dfqlab::diagnostics::{ComparisonReport, RpcFidReport};
use dfqlab::experiment::ExperimentConfig;
use dfqlab::prompts::Vocabulary;
use dfqlab::quant::{BlockReport, ParamGroup};

pub fn render_markdown(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    rep: &ComparisonReport,
    rpc: &[(u64, RpcFidReport)],
    blocks: &[(String, u64, Vec<BlockReport>)],
) -> String {
    let mut s = String::new();
    let q = &cfg.quant;
    let _ = writeln!(s, "# dfqlab run {}\n", &rep.config_hash[..16]);
    let _ = writeln!(s, "- config hash: `{}`", rep.config_hash);
    let seeds: Vec<String> = rep.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "- seeds: {}", seeds.join(", "));
    let _ = writeln!(
        s,
        "- quantization: W{}A{} ({}), {} steps, batch {}, calibration size {}\n",
        q.weight_bits,
        q.act_bits,
        if q.keep_first_last_8bit { "first and last block at 8 bit" } else { "all blocks" },
        q.steps,
        q.batch_size,
        cfg.calibration_size
    );

    let _ = writeln!(s, "## Strategies (mean over seeds)\n");
    let groups: Vec<String> = ParamGroup::ALL.iter().map(|g| format!("g_{}", g.name())).collect();
    let _ = writeln!(s, "| strategy | FP acc | acc | calib loss | test loss | gap | bound | {} |", groups.join(" | "));
    let _ = writeln!(s, "|---|---|---|---|---|---|---|{}", "---|".repeat(groups.len()));
    for m in &rep.summaries {
        let g: Vec<String> = m.grad_means.iter().map(|v| format!("{v:.4e}")).collect();
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4e} | {} |",
            m.strategy,
            m.fp_accuracy,
            m.accuracy,
            m.calibration_loss,
            m.test_loss,
            m.gap,
            m.bound,
            g.join(" | ")
        );
    }

    if !rep.pairwise.is_empty() {
        let _ = writeln!(s, "\n## Per-seed win counts\n");
        let _ = writeln!(s, "| metric | a | b | a > b | b > a | ties |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for p in &rep.pairwise {
            let _ = writeln!(s, "| {} | {} | {} | {} | {} | {} |", p.metric, p.a, p.b, p.a_greater, p.b_greater, p.ties);
        }
    }

    let reverted: Vec<String> = blocks
        .iter()
        .flat_map(|(st, seed, b)| b.iter().filter(|r| r.reverted).map(move |r| format!("{st}/seed{seed}/block{}", r.block)))
        .collect();
    let _ = writeln!(s, "\n## Block reconstruction\n");
    if reverted.is_empty() {
        let _ = writeln!(s, "Every calibrated block ended at or below its nearest-rounding MSE without falling back.");
    } else {
        let _ = writeln!(s, "Blocks that fell back to nearest rounding: {}.", reverted.join(", "));
    }

    if let Some((_, first)) = rpc.first() {
        let _ = writeln!(s, "\n## RPC-FID per class (mean over seeds)\n");
        let _ = writeln!(s, "| class | label | polysemy | RPC-FID | top-2 in seeds |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        let mut rows: Vec<(usize, f64, usize)> = first
            .rows
            .iter()
            .map(|r| {
                let vals: Vec<f64> = rpc.iter().filter_map(|(_, rep)| rep.get(r.class)).map(|x| x.rpc_fid).collect();
                let top = rpc.iter().filter(|(_, rep)| rep.ranking()[..2.min(rep.rows.len())].contains(&r.class)).count();
                (r.class, vals.iter().sum::<f64>() / vals.len() as f64, top)
            })
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (c, v, top) in rows {
            let e = &vocab.classes[c];
            let _ = writeln!(s, "| {c} | {} | {} | {v:.3} | {top}/{} |", e.label, e.polysemy_bias, rpc.len());
        }
    }
    s
}
