//! Small dense autodiff engine and Adam.

mod adam;
mod tape;
mod tensor;

use std::collections::HashMap;

use thiserror::Error;

pub use adam::{lr_schedule, AdamState, BASE_LR};
pub use tape::{sigmoid, softplus, Grads, Tape, Var};
pub use tensor::{matmul, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch {a} vs {b}")]
    Shape {
        op: &'static str,
        a: String,
        b: String,
    },
    #[error("non-finite gradient in parameter '{name}'")]
    NanGradient { name: String },
    #[error("duplicate parameter name '{0}'")]
    DuplicateName(String),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(value.rows(), value.cols()),
            value,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize, NnError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn add_grad(&mut self, id: usize, g: &Tensor) {
        for (a, b) in self.params[id].grad.data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// gradients that are zero up to rounding from reading as failures.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d f / d inputs` against central differences with step `h`.
/// `f` must build a scalar on the tape from the supplied variables.
pub fn finite_difference_check<F>(
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out);
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        worst_rel: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (t, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[t].rows(), inputs[t].cols()));
        for e in 0..inputs[t].len() {
            let orig = probe[t].data[e];
            probe[t].data[e] = orig + h;
            let up = eval(&probe)?;
            probe[t].data[e] = orig - h;
            let down = eval(&probe)?;
            probe[t].data[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = relative_error(analytic.data[e], numeric, 1e-6);
            report.checked += 1;
            if rel <= tol {
                report.passed += 1;
            }
            report.worst_rel = report.worst_rel.max(rel);
        }
    }
    Ok(report)
}
