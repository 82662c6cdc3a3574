//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every exported function takes and returns JSON strings. The plain
//! functions in [`ops`] do the work and are what the native tests call.

use wasm_bindgen::prelude::*;

pub mod ops;

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Specification task of the running example, as JSON.
#[wasm_bindgen]
pub fn example_task() -> String {
    ops::example_task()
}

/// Offsets and local deadlines of every concrete task of `spec_json`.
#[wasm_bindgen]
pub fn timeline(spec_json: &str, slack: &str) -> Result<String, JsValue> {
    js(ops::timeline(spec_json, slack))
}

/// Demand-bound step curve of each concrete task's `tag` sub-tasks on one
/// engine with the given preemption factor.
#[wasm_bindgen]
pub fn dbf_curve(
    spec_json: &str,
    slack: &str,
    tag: &str,
    factor: f64,
    preemption: &str,
    limit: u32,
) -> Result<String, JsValue> {
    js(ops::dbf_curve(spec_json, slack, tag, factor, preemption, u64::from(limit)))
}

/// Schedulability rate per utilization step on the Xavier fixture.
#[wasm_bindgen]
pub fn mini_sweep(combos: &str, steps: u32, trials: u32, tasks: u32, seed: u32) -> Result<String, JsValue> {
    js(ops::mini_sweep(combos, steps as usize, trials as usize, tasks as usize, u64::from(seed)))
}
