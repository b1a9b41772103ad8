//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as row-major `Float64Array`s in `[0, 1]`.

use flow_harmonize::baselines::{simulate_domain, DomainTransform};
use flow_harmonize::flow::{FlowArchitecture, FlowModel};
use flow_harmonize::harmonize::{harmonize, HarmonizeConfig};
use flow_harmonize::io::{decode_checkpoint, decode_image};
use flow_harmonize::numeric::{edge_mask, mean_image};
use flow_harmonize::phantom::{phantom_corpus, PhantomConfig};
use flow_harmonize::ImageGrid;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn grid(pixels: &[f64], height: usize, width: usize) -> Result<ImageGrid, JsError> {
    ImageGrid::new(height, width, pixels.to_vec()).map_err(js_err)
}

/// A phantom slice of `size x size` pixels.
#[wasm_bindgen]
pub fn phantom(size: usize, seed: u64) -> Vec<f64> {
    let cfg = PhantomConfig {
        size,
        ..PhantomConfig::default()
    };
    phantom_corpus(&cfg, 1, seed).remove(0).into_data()
}

/// Applies a simulated domain shift. `kind` is `exp`, `log` or `gamma`;
/// `param` is the log epsilon or the gamma power and is ignored for `exp`.
#[wasm_bindgen]
pub fn simulate(pixels: &[f64], height: usize, width: usize, kind: &str, param: f64) -> Result<Vec<f64>, JsError> {
    let t = match kind {
        "exp" => DomainTransform::Exp,
        "log" => DomainTransform::Log { epsilon: param },
        "gamma" => DomainTransform::gamma(param),
        other => return Err(JsError::new(&format!("unknown transform {other:?}"))),
    };
    let y = simulate_domain(&grid(pixels, height, width)?, t).map_err(js_err)?;
    Ok(y.into_data())
}

/// Edge mask at the given gradient-magnitude quantile: 1 off edges, 0 on them.
#[wasm_bindgen(js_name = edgeMask)]
pub fn edge_mask_values(pixels: &[f64], height: usize, width: usize, quantile: f64) -> Result<Vec<f64>, JsError> {
    let mask = edge_mask(&grid(pixels, height, width)?, quantile).map_err(js_err)?;
    Ok(mask.values().data().to_vec())
}

/// A flow prior plus the mean image harmonization starts from.
#[wasm_bindgen]
pub struct Prior {
    model: FlowModel,
    mean: ImageGrid,
}

#[wasm_bindgen]
impl Prior {
    /// Identity flow on `size x size` images with the mean of `count`
    /// phantoms as the starting image. Without a trained checkpoint only the
    /// data terms shape the result.
    #[wasm_bindgen(js_name = untrained)]
    pub fn untrained(size: usize, count: usize, seed: u64) -> Result<Prior, JsError> {
        let arch = FlowArchitecture {
            levels: 2,
            steps_per_level: 1,
            coupling_hidden_width: 4,
            coupling_hidden_layers: 1,
            input_height: size,
            input_width: size,
        };
        let model = FlowModel::identity(arch).map_err(js_err)?;
        let cfg = PhantomConfig {
            size,
            ..PhantomConfig::default()
        };
        let mean = mean_image(&phantom_corpus(&cfg, count.max(1), seed)).map_err(js_err)?;
        Ok(Prior { model, mean })
    }

    /// Loads a checkpoint and a mean image, both as the bytes written by the
    /// `train` command.
    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(checkpoint: &[u8], mean: &[u8]) -> Result<Prior, JsError> {
        let model = decode_checkpoint("checkpoint".as_ref(), checkpoint).map_err(js_err)?;
        let mean = decode_image("mean image".as_ref(), mean).map_err(js_err)?;
        let a = *model.arch();
        if mean.dims() != (a.input_height, a.input_width) {
            return Err(JsError::new("mean image does not match the checkpoint size"));
        }
        Ok(Prior { model, mean })
    }

    pub fn height(&self) -> usize {
        self.model.arch().input_height
    }

    pub fn width(&self) -> usize {
        self.model.arch().input_width
    }

    #[wasm_bindgen(js_name = meanImage)]
    pub fn mean_image(&self) -> Vec<f64> {
        self.mean.data().to_vec()
    }

    /// Harmonizes `source`; returns the output image followed by one NCC
    /// value per iteration.
    pub fn harmonize(
        &self,
        source: &[f64],
        alpha: f64,
        beta1: f64,
        beta2: f64,
        iterations: usize,
        mask_quantile: f64,
    ) -> Result<Vec<f64>, JsError> {
        let x_s = grid(source, self.height(), self.width())?;
        let cfg = HarmonizeConfig {
            alpha,
            beta1,
            beta2,
            iterations,
            mask_quantile,
            ..HarmonizeConfig::default()
        };
        let (out, trace) = harmonize(&self.model, &x_s, &self.mean, &cfg).map_err(js_err)?;
        let mut v = out.into_data();
        v.extend(trace.records.iter().map(|r| r.ncc_to_source));
        Ok(v)
    }
}
