//! WebAssembly bindings for the playground page in `www/`.

mod lab;

pub use lab::Lab;

use wasm_bindgen::prelude::*;

fn js(e: rflow::pipeline::PipelineError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Playground {
    lab: Lab,
}

#[wasm_bindgen]
impl Playground {
    #[wasm_bindgen(constructor)]
    pub fn new(components: usize, seed: u32) -> Result<Playground, JsError> {
        Ok(Self {
            lab: Lab::new(components, seed.into()).map_err(js)?,
        })
    }

    pub fn iteration(&self) -> u32 {
        self.lab.iteration() as u32
    }

    #[wasm_bindgen(js_name = totalIterations)]
    pub fn total_iterations(&self) -> u32 {
        self.lab.total_iterations() as u32
    }

    /// Mean loss of the chunk, or `undefined` when training is finished.
    pub fn train(&mut self, steps: u32) -> Result<Option<f64>, JsError> {
        self.lab.train(steps.into()).map_err(js)
    }

    pub fn paths(&self, n: usize, steps: usize, seed: u32, student: bool) -> Result<Vec<f64>, JsError> {
        self.lab.paths(n, steps, seed.into(), student).map_err(js)
    }

    /// `[teacher straightness, student straightness]`.
    pub fn straighten(&mut self) -> Result<Vec<f64>, JsError> {
        let (a, b) = self.lab.straighten().map_err(js)?;
        Ok(vec![a, b])
    }

    #[wasm_bindgen(js_name = hasStudent)]
    pub fn has_student(&self) -> bool {
        self.lab.has_student()
    }

    pub fn data(&self, n: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        self.lab.data(n, seed.into()).map_err(js)
    }
}
