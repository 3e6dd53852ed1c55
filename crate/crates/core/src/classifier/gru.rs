//! Gated recurrent unit stack with temporal mean pooling and a logistic
//! readout, trained with BPTT.
//!
//! Recurrence (reset-before-candidate):
//! `z_t = sigmoid(Wz x + Uz h + bz)`, `r_t = sigmoid(Wr x + Ur h + br)`,
//! `hc_t = tanh(Wh x + Uh (r_t * h) + bh)`,
//! `h_t = (1 - z_t) * h_{t-1} + z_t * hc_t`.
//! The last layer's hidden states are averaged over time and mapped to a
//! single logit.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, sigmoid, Param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl GruConfig {
    pub fn new(input_dim: usize, hidden: usize) -> Self {
        GruConfig {
            n_layers: 2,
            hidden,
            input_dim,
            lr: 1e-3,
            batch_size: 8,
            epochs: 60,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.hidden < 1 || self.input_dim < 1 {
            return Err(Error::Config(
                "n_layers, hidden, and input_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GruLayer {
    pub w_z: Param,
    pub u_z: Param,
    pub b_z: Param,
    pub w_r: Param,
    pub u_r: Param,
    pub b_r: Param,
    pub w_h: Param,
    pub u_h: Param,
    pub b_h: Param,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruLayer {
    fn new(name: &str, in_dim: usize, hidden: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let w = |gate: &str, rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Param::uniform(format!("{name}.{gate}"), &[rows, cols], cols, rng)
        };
        GruLayer {
            w_z: w("w_z", hidden, in_dim, rng),
            u_z: w("u_z", hidden, hidden, rng),
            b_z: Param::zeros(format!("{name}.b_z"), &[hidden]),
            w_r: w("w_r", hidden, in_dim, rng),
            u_r: w("u_r", hidden, hidden, rng),
            b_r: Param::zeros(format!("{name}.b_r"), &[hidden]),
            w_h: w("w_h", hidden, in_dim, rng),
            u_h: w("u_h", hidden, hidden, rng),
            b_h: Param::zeros(format!("{name}.b_h"), &[hidden]),
            in_dim,
            hidden,
        }
    }

    fn gate(&self, w: &Param, u: &Param, b: &Param, x: &Array1<f64>, h: &Array1<f64>) -> Array1<f64> {
        let mut out = w.view2(self.hidden, self.in_dim).dot(x);
        out += &u.view2(self.hidden, self.hidden).dot(h);
        for (o, &bv) in out.iter_mut().zip(b.data.iter()) {
            *o += bv;
        }
        out
    }
}

/// One time-step of saved activations for BPTT.
struct StepCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    z: Array1<f64>,
    r: Array1<f64>,
    hc: Array1<f64>,
}

pub struct GruModel {
    pub(crate) layers: Vec<GruLayer>,
    pub(crate) readout_w: Param,
    pub(crate) readout_b: Param,
    pub config: GruConfig,
}

pub struct GruCaches {
    /// `[layer][t]` step caches.
    steps: Vec<Vec<StepCache>>,
    /// Last-layer hidden states per time-step.
    top_states: Vec<Array1<f64>>,
    pooled: Array1<f64>,
    logit: f64,
}

impl GruCaches {
    pub fn logit(&self) -> f64 {
        self.logit
    }
}

/// Deterministic initialization from the config seed.
pub fn init_gru(config: &GruConfig) -> Result<GruModel> {
    config.validate()?;
    let config = config.clone();
    let mut rng = seeded_rng(config.seed, &[0]);
    let mut layers = Vec::with_capacity(config.n_layers);
    let mut in_dim = config.input_dim;
    for l in 0..config.n_layers {
        layers.push(GruLayer::new(&format!("gru.{l}"), in_dim, config.hidden, &mut rng));
        in_dim = config.hidden;
    }
    let readout_w = Param::uniform("gru.readout.w", &[1, config.hidden], config.hidden, &mut rng);
    let readout_b = Param::zeros("gru.readout.b", &[1]);
    Ok(GruModel {
        layers,
        readout_w,
        readout_b,
        config: config.clone(),
    })
}

impl GruModel {
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend([
                &mut l.w_z, &mut l.u_z, &mut l.b_z, &mut l.w_r, &mut l.u_r, &mut l.b_r,
                &mut l.w_h, &mut l.u_h, &mut l.b_h,
            ]);
        }
        out.push(&mut self.readout_w);
        out.push(&mut self.readout_b);
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([
                &l.w_z, &l.u_z, &l.b_z, &l.w_r, &l.u_r, &l.b_r, &l.w_h, &l.u_h, &l.b_h,
            ]);
        }
        out.push(&self.readout_w);
        out.push(&self.readout_b);
        out
    }

    /// Forward pass over a `[T, input_dim]` sequence, returning the logit
    /// and the caches needed for backprop.
    pub fn forward_cached(&self, seq: ArrayView2<'_, f64>) -> Result<(f64, GruCaches)> {
        let t_len = seq.nrows();
        if t_len == 0 {
            return Err(Error::Shape("sequence must have T >= 1".into()));
        }
        if seq.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "sequence width {} != input_dim {}",
                seq.ncols(),
                self.config.input_dim
            )));
        }
        let h = self.config.hidden;
        let mut steps: Vec<Vec<StepCache>> = Vec::with_capacity(self.layers.len());
        let mut layer_input: Vec<Array1<f64>> = (0..t_len).map(|t| seq.row(t).to_owned()).collect();
        for layer in &self.layers {
            let mut caches = Vec::with_capacity(t_len);
            let mut h_prev = Array1::<f64>::zeros(h);
            let mut outputs = Vec::with_capacity(t_len);
            for x in layer_input.iter() {
                let z = layer
                    .gate(&layer.w_z, &layer.u_z, &layer.b_z, x, &h_prev)
                    .mapv(sigmoid);
                let r = layer
                    .gate(&layer.w_r, &layer.u_r, &layer.b_r, x, &h_prev)
                    .mapv(sigmoid);
                let rh = &r * &h_prev;
                let hc = layer
                    .gate(&layer.w_h, &layer.u_h, &layer.b_h, x, &rh)
                    .mapv(f64::tanh);
                let h_new = (1.0 - &z) * &h_prev + &z * &hc;
                caches.push(StepCache {
                    x: x.clone(),
                    h_prev: h_prev.clone(),
                    z,
                    r,
                    hc,
                });
                outputs.push(h_new.clone());
                h_prev = h_new;
            }
            steps.push(caches);
            layer_input = outputs;
        }
        let top_states = layer_input;
        let mut pooled = Array1::<f64>::zeros(h);
        for s in &top_states {
            pooled += s;
        }
        pooled /= t_len as f64;
        let logit = self.readout_w.view2(1, h).dot(&pooled)[0] + self.readout_b.data[0];
        Ok((
            logit,
            GruCaches {
                steps,
                top_states,
                pooled,
                logit,
            },
        ))
    }

    /// Backprop from a logit gradient; accumulates into parameter grads and
    /// returns the gradient with respect to the input sequence rows.
    pub fn backward(&mut self, dlogit: f64, caches: &GruCaches) -> Vec<Array1<f64>> {
        let h = self.config.hidden;
        let t_len = caches.top_states.len();
        // Readout.
        for j in 0..h {
            self.readout_w.grad[j] += dlogit * caches.pooled[j];
        }
        self.readout_b.grad[0] += dlogit;
        let w_read = self.readout_w.view2(1, h);
        // d pooled -> spread over time.
        let mut dtop: Vec<Array1<f64>> = (0..t_len)
            .map(|_| {
                Array1::from_iter((0..h).map(|j| dlogit * w_read[[0, j]] / t_len as f64))
            })
            .collect();

        for (li, layer) in self.layers.iter_mut().enumerate().rev() {
            let caches_l = &caches.steps[li];
            let mut dx_out: Vec<Array1<f64>> = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                dx_out.push(Array1::zeros(layer.in_dim));
            }
            let mut dh_next = Array1::<f64>::zeros(h);
            for t in (0..t_len).rev() {
                let c = &caches_l[t];
                let mut dh = dtop[t].clone();
                dh += &dh_next;
                // h = (1-z) h_prev + z hc
                let dhc = &dh * &c.z;
                let dz = &dh * &(&c.hc - &c.h_prev);
                let mut dh_prev = &dh * &(1.0 - &c.z);

                // candidate gate
                let dah = &dhc * &c.hc.mapv(|v| 1.0 - v * v);
                accumulate_gate(
                    &mut layer.w_h,
                    &mut layer.u_h,
                    &mut layer.b_h,
                    &dah,
                    &c.x,
                    &(&c.r * &c.h_prev),
                );
                let drh = layer.u_h.view2(h, h).t().dot(&dah);
                let dr = &drh * &c.h_prev;
                dh_prev += &(&drh * &c.r);
                let mut dx = layer.w_h.view2(h, layer.in_dim).t().dot(&dah);

                // update gate
                let daz = &dz * &(&c.z * &(1.0 - &c.z));
                accumulate_gate(
                    &mut layer.w_z,
                    &mut layer.u_z,
                    &mut layer.b_z,
                    &daz,
                    &c.x,
                    &c.h_prev,
                );
                dh_prev += &layer.u_z.view2(h, h).t().dot(&daz);
                dx += &layer.w_z.view2(h, layer.in_dim).t().dot(&daz);

                // reset gate
                let dar = &dr * &(&c.r * &(1.0 - &c.r));
                accumulate_gate(
                    &mut layer.w_r,
                    &mut layer.u_r,
                    &mut layer.b_r,
                    &dar,
                    &c.x,
                    &c.h_prev,
                );
                dh_prev += &layer.u_r.view2(h, h).t().dot(&dar);
                dx += &layer.w_r.view2(h, layer.in_dim).t().dot(&dar);

                dx_out[t] = dx;
                dh_next = dh_prev;
            }
            dtop = dx_out;
        }
        dtop
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let arch = serde_json::to_value(&self.config).expect("gru config json");
        let blobs: Vec<crate::ckpt::Blob> = self
            .params()
            .into_iter()
            .map(|p| crate::ckpt::Blob::from_f64(p.name.clone(), &p.shape, &p.data))
            .collect();
        crate::ckpt::write_checkpoint(path, "gru", &arch, &blobs)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<GruModel> {
        let path = path.as_ref();
        let (kind, arch_json, blobs) = crate::ckpt::read_checkpoint(path)?;
        if kind != "gru" {
            return Err(Error::format(
                path,
                format!("checkpoint kind `{kind}`, expected `gru`"),
            ));
        }
        let config: GruConfig = serde_json::from_value(arch_json)
            .map_err(|e| Error::format(path, format!("arch echo: {e}")))?;
        let mut model = init_gru(&config)?;
        let by_name: std::collections::HashMap<&str, &crate::ckpt::Blob> =
            blobs.iter().map(|b| (b.name.as_str(), b)).collect();
        for p in model.params_mut() {
            let blob = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::format(path, format!("missing blob `{}`", p.name)))?;
            if blob.data.len() != p.data.len() {
                return Err(Error::Shape(format!("blob `{}` length mismatch", p.name)));
            }
            p.data.copy_from_slice(&blob.to_f64());
        }
        Ok(model)
    }
}

fn accumulate_gate(
    w: &mut Param,
    u: &mut Param,
    b: &mut Param,
    da: &Array1<f64>,
    x: &Array1<f64>,
    h_in: &Array1<f64>,
) {
    let hid = da.len();
    let in_dim = x.len();
    for i in 0..hid {
        let d = da[i];
        if d == 0.0 {
            continue;
        }
        let wrow = &mut w.grad[i * in_dim..(i + 1) * in_dim];
        for (wg, &xv) in wrow.iter_mut().zip(x.iter()) {
            *wg += d * xv;
        }
        let urow = &mut u.grad[i * hid..(i + 1) * hid];
        for (ug, &hv) in urow.iter_mut().zip(h_in.iter()) {
            *ug += d * hv;
        }
        b.grad[i] += d;
    }
}
