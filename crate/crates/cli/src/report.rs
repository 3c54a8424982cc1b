//! Plain-text rendering of optimization traces and influence tables.

use std::fmt::Write;

use promptlex::optimizer::RunStatus;
use promptlex::{InfluenceScore, OptimizationTrace, OrderMode};

pub fn render_trace(trace: &OptimizationTrace) -> String {
    let mut out = String::new();
    let p = &trace.params;
    let order = match p.order_mode {
        OrderMode::Influence => "influence",
        OrderMode::Random => "random",
    };
    let status = match &trace.status {
        RunStatus::Complete => "complete".to_owned(),
        RunStatus::Aborted { error } => format!("aborted: {error}"),
    };
    let _ = writeln!(out, "initial description: {}", trace.initial_description);
    let _ = writeln!(out, "final description:   {}", trace.final_description);
    let _ = writeln!(out, "proxy loss:          {} -> {}", trace.initial_loss, trace.final_loss);
    let _ = writeln!(
        out,
        "proxy batch:         {} tasks, seed {} ({})",
        trace.reference_ids.len(),
        p.seed,
        trace.sampler
    );
    let _ = writeln!(
        out,
        "search:              {order} order, {} of {} positions, k = {}",
        trace.targets.len(),
        trace.initial_description.len(),
        p.candidate_k
    );
    let _ = writeln!(out, "status:              {status}");
    let _ = writeln!(
        out,
        "accepted:            {} of {} steps",
        trace.accepted().count(),
        trace.iterations.len()
    );
    if trace.iterations.is_empty() {
        return out;
    }

    let _ = writeln!(out);
    let rows: Vec<[String; 6]> = trace
        .iterations
        .iter()
        .map(|r| {
            [
                r.step.to_string(),
                r.position.to_string(),
                r.original_word.clone(),
                r.best_candidate
                    .as_ref()
                    .map_or_else(|| "-".to_owned(), |c| c.label().to_owned()),
                r.best_loss.map_or_else(|| "-".to_owned(), |l| l.to_string()),
                if r.accepted { "accepted" } else { "kept" }.to_owned(),
            ]
        })
        .collect();
    table(
        &mut out,
        ["step", "position", "word", "best candidate", "best loss", "result"],
        &rows,
    );
    out
}

/// Influence scores, most influential first, ties by position.
pub fn render_influence(scores: &[InfluenceScore]) -> String {
    let mut ranked: Vec<&InfluenceScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.influence.cmp(&a.influence).then(a.word_index.cmp(&b.word_index)));
    let rows: Vec<[String; 5]> = ranked
        .iter()
        .enumerate()
        .map(|(rank, s)| {
            [
                (rank + 1).to_string(),
                s.word_index.to_string(),
                s.word.clone(),
                s.influence.to_string(),
                s.deleted_loss.to_string(),
            ]
        })
        .collect();
    let mut out = String::new();
    if let Some(s) = scores.first() {
        let _ = writeln!(out, "base loss {}", s.base_loss);
    }
    table(&mut out, ["rank", "index", "word", "influence", "loss without word"], &rows);
    out
}

fn table<const N: usize>(out: &mut String, header: [&str; N], rows: &[[String; N]]) {
    let mut width = header.map(str::len);
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (i, cell) in cells.enumerate() {
            if i + 1 == N {
                s.push_str(cell);
            } else {
                let _ = write!(s, "{cell:<w$}  ", w = width[i]);
            }
        }
        let _ = writeln!(out, "{}", s.trim_end());
    };
    line(out, &mut header.iter().copied());
    for row in rows {
        line(out, &mut row.iter().map(String::as_str));
    }
}
