//! Self-contained HTML report: inline styles only, no scripts or fetches.

use std::fmt::Write;

use crate::pipeline::{AblationRow, ConceptsFile};

pub const BUCKETS: usize = 5;

/// Quantile bucket (0..5) of each score within its own list: the share of
/// strictly smaller scores, in fifths. Equal scores share a bucket.
pub fn quantile_buckets(scores: &[f64]) -> Vec<usize> {
    let n = scores.len();
    scores
        .iter()
        .map(|&s| {
            let below = scores.iter().filter(|&&o| o < s).count();
            (BUCKETS * below / n.max(1)).min(BUCKETS - 1)
        })
        .collect()
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:sans-serif;max-width:60em;margin:2em auto;color:#222}\
table{border-collapse:collapse;margin:1em 0}td,th{border:1px solid #ccc;padding:.25em .6em;text-align:right}\
th{background:#f3f3f3}.ex{margin:.4em 0;line-height:1.8}.kw{font-family:monospace}\
.b0{background:#fff}.b1{background:#fde0c5}.b2{background:#facba6}.b3{background:#f8b58b}.b4{background:#f59e72}\
.legend span{padding:0 .6em;border:1px solid #ccc}";

fn num(v: &serde_json::Value, key: &str) -> String {
    v.get(key).and_then(|x| x.as_f64()).map_or("n/a".into(), |x| format!("{x:.4}"))
}

pub fn render(metrics: &serde_json::Value, concepts: &ConceptsFile, ablation: Option<&[AblationRow]>) -> String {
    let mut h = String::new();
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Concept report</title><style>{STYLE}</style></head><body>\n<h1>Concept report</h1>\n"
    );
    let _ = write!(
        h,
        "<table><tr><th>RAcc</th><th>avg impact</th><th>avg &Delta;Acc</th><th>concepts</th><th>target test acc</th></tr>\
         <tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr></table>\n",
        num(metrics, "racc"),
        num(metrics, "avg_impact"),
        num(metrics, "delta_acc"),
        metrics.get("effective_concepts").map_or("n/a".into(), |v| v.to_string()),
        num(metrics, "target_test_accuracy"),
    );
    if let Some(c) = metrics.get("coherence") {
        let _ = write!(
            h,
            "<p>Keyword coherence: PMI {} &middot; NPMI {} &middot; c_v {}</p>\n",
            num(c, "pmi"),
            num(c, "npmi"),
            num(c, "c_v")
        );
    }
    if !concepts.deactivated.is_empty() {
        let list: Vec<String> = concepts.deactivated.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(h, "<p>Switched off for low impact: {}</p>", list.join(", "));
    }
    h.push_str("<p class=\"legend\">Token impact quantile: ");
    for b in 0..BUCKETS {
        let _ = write!(h, "<span class=\"b{b}\">{}</span> ", b + 1);
    }
    h.push_str("</p>\n");
    for c in &concepts.concepts {
        let _ = write!(
            h,
            "<h2>Concept {}</h2>\n<p>impact {:.4} &middot; &Delta;Acc {:.4}</p>\n",
            c.index, c.impact, c.delta_acc
        );
        if !c.keywords.is_empty() {
            let kw: Vec<String> = c.keywords.iter().map(|k| escape(k)).collect();
            let _ = writeln!(h, "<p>Keywords: <span class=\"kw\">{}</span></p>", kw.join(", "));
        }
        for ex in &c.examples {
            let label: Vec<String> = ex.label.iter().map(|l| l.to_string()).collect();
            let _ = write!(
                h,
                "<div class=\"ex\"><small>#{} p={:.3} label={}</small> ",
                ex.sample,
                ex.probability,
                label.join("")
            );
            match (&ex.tokens, &ex.token_impact, &ex.shapes) {
                (Some(toks), Some(imp), _) => {
                    for (t, b) in toks.iter().zip(quantile_buckets(imp)) {
                        let _ = write!(h, "<span class=\"b{b}\">{}</span> ", escape(t));
                    }
                }
                (_, _, Some(shapes)) => {
                    let s: Vec<String> = shapes.iter().map(|s| s.to_string()).collect();
                    let _ = write!(h, "shapes present: {}", s.join(", "));
                }
                _ => {}
            }
            h.push_str("</div>\n");
        }
    }
    if let Some(rows) = ablation {
        h.push_str("<h2>Ablations</h2>\n<table><tr><th>row</th><th>&lambda;1</th><th>&lambda;2</th><th>&lambda;e</th><th>&lambda;c</th><th>&beta;</th><th>rec</th><th>RAcc</th><th>impact</th><th>&Delta;Acc</th></tr>\n");
        for r in rows {
            let _ = writeln!(
                h,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{:.3}</td><td>{}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td></tr>",
                escape(&r.name),
                r.lambda1,
                r.lambda2,
                r.lambda_e,
                r.lambda_c,
                r.beta,
                r.use_rec,
                r.racc,
                r.avg_impact,
                r.delta_acc
            );
        }
        h.push_str("</table>\n");
    }
    h.push_str("</body></html>\n");
    h
}
