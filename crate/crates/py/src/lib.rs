//! Python bindings: parsing, scoring, dataset forging and the adapter.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use slotcot::adapter::{
    adapter_forward, grad_check, stack_frames, Activation, AdapterConfig, AdapterParams,
    FrameMatrix, PadPolicy, ParamBundle,
};
use slotcot::corpus::{build_vocabulary, parse_corpus, SlotMap};
use slotcot::forge::{forge_regular_dataset, ForgeConfig};
use slotcot::genparse::{self, TagGrammar};
use slotcot::io::to_jsonl;
use slotcot::reasoning::{forge_hybrid_dataset, forge_reasoning_dataset};
use slotcot::slotmetrics::{self, MatchConfig};

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Python `None` values become the `'None'` literal.
fn slot_map(d: &Bound<'_, PyDict>) -> PyResult<SlotMap> {
    let mut out = SlotMap::new();
    for (k, v) in d.iter() {
        let value = if v.is_none() {
            "None".to_string()
        } else {
            v.extract::<String>()?
        };
        out.insert(k.extract::<String>()?, value);
    }
    Ok(out)
}

fn slot_dict<'py>(py: Python<'py>, m: &SlotMap) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in m {
        d.set_item(k, v)?;
    }
    Ok(d)
}

fn match_config(exact: bool) -> MatchConfig {
    if exact {
        MatchConfig::exact()
    } else {
        MatchConfig::containment()
    }
}

/// Returns `{"mode", "thinking", "slot_values", "diagnostics", "malformed"}`.
#[pyfunction]
fn parse_generation<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let parsed = genparse::parse_generation(text, &TagGrammar::default());
    let d = PyDict::new(py);
    let mode = serde_json::to_value(parsed.mode).map_err(value_error)?;
    d.set_item("mode", mode.as_str())?;
    d.set_item("thinking", parsed.thinking.as_deref())?;
    d.set_item("slot_values", slot_dict(py, &parsed.slot_values)?)?;
    let diags: Vec<String> = parsed.diagnostics.iter().map(|x| x.to_string()).collect();
    d.set_item("diagnostics", diags)?;
    d.set_item("malformed", parsed.is_malformed())?;
    Ok(d)
}

#[pyfunction]
fn parse_slot_dict<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let dict = genparse::parse_slot_dict(text).map_err(value_error)?;
    slot_dict(py, &dict.values)
}

#[pyfunction]
fn format_slot_dict(slots: &Bound<'_, PyDict>) -> PyResult<String> {
    Ok(genparse::format_slot_dict(&slot_map(slots)?))
}

#[pyfunction]
#[pyo3(signature = (pred, gold, exact = false))]
fn values_match(pred: &str, gold: &str, exact: bool) -> bool {
    slotmetrics::values_match(pred, gold, &match_config(exact))
}

/// Per-example tallies: `{"tp", "fp", "fn", "per_slot"}`.
#[pyfunction]
#[pyo3(signature = (pred, gold, queried = None, exact = false))]
fn score_example<'py>(
    py: Python<'py>,
    pred: &Bound<'py, PyDict>,
    gold: &Bound<'py, PyDict>,
    queried: Option<Vec<String>>,
    exact: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let score = slotmetrics::score_example(
        &slot_map(pred)?,
        &slot_map(gold)?,
        queried.as_deref(),
        &match_config(exact),
    );
    let d = PyDict::new(py);
    d.set_item("tp", score.tp)?;
    d.set_item("fp", score.fp)?;
    d.set_item("fn", score.fn_)?;
    let per = PyDict::new(py);
    for (label, outcome) in &score.per_slot {
        let name = serde_json::to_value(outcome).map_err(value_error)?;
        per.set_item(label, name.as_str())?;
    }
    d.set_item("per_slot", per)?;
    Ok(d)
}

#[pyfunction]
fn relative_gain(f1_new: f64, f1_base: f64) -> PyResult<f64> {
    slotcot::report::relative_gain(f1_new, f1_base).map_err(value_error)
}

/// Forges a dataset from corpus JSON Lines; returns JSON Lines.
#[pyfunction]
#[pyo3(signature = (corpus, kind = "regular", seed = 0, parallel = false))]
fn forge(py: Python<'_>, corpus: &str, kind: &str, seed: u64, parallel: bool) -> PyResult<String> {
    if !matches!(kind, "regular" | "reasoning" | "hybrid") {
        return Err(PyValueError::new_err(format!("unknown dataset kind {kind:?}")));
    }
    py.detach(|| {
        let calls = parse_corpus(corpus).map_err(|e| e.to_string())?;
        let vocab = build_vocabulary(&calls);
        let config = ForgeConfig::with_seed(seed);
        let regular =
            forge_regular_dataset(&calls, &config, &vocab, parallel).map_err(|e| e.to_string())?;
        let grammar = TagGrammar::default();
        let data = match kind {
            "regular" => regular,
            _ => {
                let reasoning = forge_reasoning_dataset(&calls, &regular, &grammar)
                    .map_err(|e| e.to_string())?;
                if kind == "reasoning" {
                    reasoning
                } else {
                    forge_hybrid_dataset(&regular, &reasoning, seed).map_err(|e| e.to_string())?
                }
            }
        };
        to_jsonl(&data).map_err(|e| e.to_string())
    })
    .map_err(PyValueError::new_err)
}

fn pad_policy(s: &str) -> PyResult<PadPolicy> {
    match s {
        "zero_pad" => Ok(PadPolicy::ZeroPad),
        "truncate" => Ok(PadPolicy::Truncate),
        other => Err(PyValueError::new_err(format!("unknown pad policy {other:?}"))),
    }
}

fn activation(s: &str) -> PyResult<Activation> {
    match s {
        "gelu" => Ok(Activation::Gelu),
        "tanh" => Ok(Activation::Tanh),
        "linear" => Ok(Activation::Linear),
        other => Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
    }
}

fn to_frames(rows: Vec<Vec<f64>>) -> PyResult<FrameMatrix> {
    FrameMatrix::from_rows(&rows).map_err(value_error)
}

/// Frame-stacking MLP adapter with seeded parameters.
#[pyclass(module = "slotcot_py")]
struct Adapter {
    config: AdapterConfig,
    params: AdapterParams,
}

#[pymethods]
impl Adapter {
    #[new]
    #[pyo3(signature = (d_enc = 512, stack_factor = 4, d_hidden = 2048, d_llm = 2048, pad_policy = "zero_pad", activation = "gelu", seed = 0))]
    fn new(
        d_enc: usize,
        stack_factor: usize,
        d_hidden: usize,
        d_llm: usize,
        pad_policy: &str,
        activation: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let config = AdapterConfig {
            d_enc,
            stack_factor,
            d_hidden,
            d_llm,
            pad_policy: self::pad_policy(pad_policy)?,
            activation: self::activation(activation)?,
        };
        config.validate().map_err(value_error)?;
        Ok(Self {
            params: AdapterParams::seeded(&config, seed),
            config,
        })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.n_params()
    }

    fn output_frames(&self, n: usize) -> usize {
        self.config.output_frames(n)
    }

    /// `frames` is a list of `d_enc`-wide rows.
    fn forward(&self, py: Python<'_>, frames: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_frames(frames)?;
        let y = py
            .detach(|| adapter_forward(&x, &self.config, &self.params))
            .map_err(value_error)?;
        Ok(y.to_rows())
    }

    /// Max relative error between analytic and central-difference gradients.
    #[pyo3(signature = (frames, eps = 1e-5))]
    fn grad_check(&self, frames: Vec<Vec<f64>>, eps: f64) -> PyResult<f64> {
        let x = to_frames(frames)?;
        let stacked =
            stack_frames(&x, self.config.stack_factor, self.config.pad_policy).map_err(value_error)?;
        grad_check(&self.params, &stacked, self.config.activation, eps)
            .map(|r| r.max_relative_error)
            .map_err(value_error)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&ParamBundle::from_params(&self.params)).map_err(value_error)
    }

    /// Replaces the parameters with a bundle produced by `to_json`.
    fn load_json(&mut self, text: &str) -> PyResult<()> {
        let bundle: ParamBundle = serde_json::from_str(text).map_err(value_error)?;
        let params = bundle.into_params().map_err(value_error)?;
        if params.w1.shape() != self.params.w1.shape() || params.w2.shape() != self.params.w2.shape() {
            return Err(PyValueError::new_err("bundle shapes do not match this adapter"));
        }
        self.params = params;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Adapter(d_enc={}, stack_factor={}, d_hidden={}, d_llm={}, pad_policy={:?}, activation={})",
            self.config.d_enc,
            self.config.stack_factor,
            self.config.d_hidden,
            self.config.d_llm,
            self.config.pad_policy,
            self.config.activation
        )
    }
}

#[pymodule]
pub fn slotcot_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(parse_generation, m)?)?;
    m.add_function(wrap_pyfunction!(parse_slot_dict, m)?)?;
    m.add_function(wrap_pyfunction!(format_slot_dict, m)?)?;
    m.add_function(wrap_pyfunction!(values_match, m)?)?;
    m.add_function(wrap_pyfunction!(score_example, m)?)?;
    m.add_function(wrap_pyfunction!(relative_gain, m)?)?;
    m.add_function(wrap_pyfunction!(forge, m)?)?;
    m.add_class::<Adapter>()?;
    Ok(())
}
