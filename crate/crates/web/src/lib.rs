//! WebAssembly bindings for the browser demo. Every export takes plain text or numbers
//! and returns a JSON string; the `*_json` functions hold the logic and run natively too.

use cascade::arch::{builtin_names, builtin_text, compression_report, human, ArchSpec};
use cascade::hierarchy::derive_ta_keep_ratios;
use cascade::mask::{build_mask, keep_count, FilterMask, ImportanceScores, PruneConfig};
use cascade::optim::LrSchedule;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Keeps the first `round(r * F)` filters of every maskable layer, at least one.
pub fn uniform_mask(arch: &ArchSpec, keep_ratio: f64) -> FilterMask {
    FilterMask {
        layers: arch
            .maskable_filters()
            .iter()
            .map(|&n| {
                let k = keep_count(keep_ratio, n).max(1);
                (0..n).map(|i| i < k).collect()
            })
            .collect(),
    }
}

pub fn analyze_json(arch_text: &str, keep_ratio: f64) -> Result<Value, String> {
    PruneConfig::keep(keep_ratio).map_err(err)?;
    let arch = ArchSpec::parse(arch_text).map_err(err)?;
    let full = arch.stats(None).map_err(err)?;
    let mask = uniform_mask(&arch, keep_ratio);
    let pruned = arch.stats(Some(&mask)).map_err(err)?;
    let report = compression_report(full.totals, pruned.totals).map_err(err)?;
    let rows: Vec<Value> = full
        .layers
        .iter()
        .zip(&pruned.layers)
        .filter(|(a, _)| a.params > 0 || a.flops > 0)
        .map(|(a, b)| {
            json!({
                "id": a.id,
                "kind": a.kind,
                "shape": format!("{}x{}x{}", b.out_shape.0, b.out_shape.1, b.out_shape.2),
                "params": a.params,
                "flops": a.flops,
                "pruned_params": b.params,
                "pruned_flops": b.flops,
            })
        })
        .collect();
    Ok(json!({
        "name": arch.name,
        "rows": rows,
        "params": full.totals.params,
        "flops": full.totals.flops,
        "pruned_params": pruned.totals.params,
        "pruned_flops": pruned.totals.flops,
        "human": [human(full.totals.params), human(full.totals.flops), human(pruned.totals.params), human(pruned.totals.flops)],
        "param_ratio": report.param_ratio,
        "flops_ratio": report.flops_ratio,
    }))
}

/// One layer of scores per line, values separated by commas or whitespace.
pub fn parse_scores(text: &str) -> Result<ImportanceScores, String> {
    let gamma = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("layer {}: `{t}` is not a number", i + 1)))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    if gamma.is_empty() {
        return Err("no scores given".into());
    }
    Ok(ImportanceScores { gamma })
}

pub fn mask_json(scores_text: &str, keep_ratio: f64, min_filters: usize) -> Result<Value, String> {
    let scores = parse_scores(scores_text)?;
    let cfg = PruneConfig {
        keep_ratio,
        min_filters_per_layer: min_filters,
    };
    let mask = build_mask(&scores, &cfg).map_err(err)?;
    Ok(json!({
        "scores": scores.gamma,
        "mask": mask.layers,
        "kept": mask.kept(),
        "total": mask.total(),
    }))
}

pub fn schedule_json(
    r0: f64,
    divisors_text: &str,
    base_lr: f64,
    cycle_len: usize,
    cycle_decay: f64,
    epochs: usize,
) -> Result<Value, String> {
    let divisors = divisors_text
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    let ratios = derive_ta_keep_ratios(r0, &divisors).map_err(err)?;
    let steps_per_epoch = 20;
    let sched = LrSchedule {
        base_lr,
        cycle_len_epochs: cycle_len,
        cycle_decay,
        steps_per_epoch,
    };
    sched.validate().map_err(err)?;
    let lr: Vec<f64> = (0..epochs * steps_per_epoch).map(|s| sched.lr_at(s)).collect();
    Ok(json!({ "ratios": ratios, "lr": lr, "steps_per_epoch": steps_per_epoch }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn builtins() -> String {
    builtin_names().collect::<Vec<_>>().join(",")
}

#[wasm_bindgen]
pub fn builtin_arch(name: &str) -> Option<String> {
    builtin_text(name).map(str::to_string)
}

#[wasm_bindgen]
pub fn analyze(arch_text: &str, keep_ratio: f64) -> Result<String, JsError> {
    to_js(analyze_json(arch_text, keep_ratio))
}

#[wasm_bindgen]
pub fn mask_demo(scores_text: &str, keep_ratio: f64, min_filters: usize) -> Result<String, JsError> {
    to_js(mask_json(scores_text, keep_ratio, min_filters))
}

#[wasm_bindgen]
pub fn schedule(r0: f64, divisors: &str, base_lr: f64, cycle_len: usize, cycle_decay: f64, epochs: usize) -> Result<String, JsError> {
    to_js(schedule_json(r0, divisors, base_lr, cycle_len, cycle_decay, epochs))
}
