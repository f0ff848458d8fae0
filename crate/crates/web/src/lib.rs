//! Browser bindings for training and reflowing a 2-D flow.

mod demo;

pub use demo::Demo;

use wasm_bindgen::prelude::*;

fn js(err: rectiflow::Error) -> JsError {
    JsError::new(&format!("{}: {err}", err.kind()))
}

#[wasm_bindgen]
pub struct FlowDemo(Demo);

#[wasm_bindgen]
impl FlowDemo {
    /// `dataset` is one of `two_gaussians`, `two_moons`, `checkerboard`.
    #[wasm_bindgen(constructor)]
    pub fn new(dataset: &str, seed: u32) -> Result<FlowDemo, JsError> {
        Demo::new(dataset, seed.into()).map(FlowDemo).map_err(js)
    }

    /// Mean loss over `steps` optimizer steps.
    pub fn train(&mut self, steps: u32) -> Result<f64, JsError> {
        self.0.train(steps).map_err(js)
    }

    /// `steps + 1` states of `n` points, laid out `[step][row][x, y]`.
    pub fn trajectories(&mut self, n: usize, steps: usize) -> Result<Vec<f64>, JsError> {
        self.0.trajectories(n, steps).map_err(js)
    }

    pub fn target(&mut self, n: usize) -> Result<Vec<f64>, JsError> {
        self.0.target(n).map_err(js)
    }

    /// Starts the next round and returns its number.
    pub fn reflow(&mut self, pairs: usize) -> Result<u32, JsError> {
        self.0.reflow(pairs).map_err(js)
    }

    pub fn straightness(&mut self) -> Result<f64, JsError> {
        self.0.straightness().map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn round(&self) -> u32 {
        self.0.round()
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> f64 {
        self.0.steps() as f64
    }
}
