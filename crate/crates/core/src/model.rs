//! Small convolutional classifier with an embedding hook.
//!
//! Each stage is a 3x3 stride-2 convolution (padding 1) followed by relu, so
//! every stage halves the spatial size. Global average pooling produces the
//! embedding, and a linear head maps it to logits:
//!
//! ```text
//! x (B, C, H, W) -> [conv3x3/2 -> relu] x S -> gap -> z (B, D) -> z W + b -> y (B, K)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::loss::Quad;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub num_classes: usize,
    /// Subtracted from every input pixel before the first convolution.
    pub input_offset: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_widths: vec![8, 16, 32],
            num_classes: 2,
            input_offset: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels", "must be positive"));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::invalid("stage_widths", "need at least one positive width"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least two classes"));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.stage_widths.last().expect("validated")
    }

    /// Ordered `(name, shape)` list of every parameter.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &w) in self.stage_widths.iter().enumerate() {
            out.push((format!("stage{i}.weight"), vec![w, cin, 3, 3]));
            out.push((format!("stage{i}.bias"), vec![w]));
            cin = w;
        }
        out.push(("head.weight".into(), vec![cin, self.num_classes]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

/// Named parameter tensors in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn zeros(manifest: &[(String, Vec<usize>)]) -> Self {
        Self {
            entries: manifest
                .iter()
                .map(|(n, s)| (n.clone(), Tensor::zeros(s)))
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameter leaves bound into one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardResult {
    pub logits: Var,
    /// Post-pool, pre-head activation.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct TinyCnn {
    config: ModelConfig,
    params: ParamStore,
}

impl TinyCnn {
    /// Zero-initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::zeros(&config.manifest());
        Ok(Self { config, params })
    }

    pub fn with_seed(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.init_parameters(seed);
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        let expected = self.config.manifest();
        let ok = params.len() == expected.len()
            && params
                .iter()
                .zip(&expected)
                .all(|((n, t), (en, es))| n == en && t.shape() == es.as_slice());
        if !ok {
            return Err(Error::Checkpoint("parameters do not match the model manifest".into()));
        }
        self.params = params;
        Ok(())
    }

    /// He-style fan-in uniform weights, `U(-a, a)` with `a = sqrt(6 / fan_in)`
    /// (variance `2 / fan_in`), and zero biases.
    pub fn init_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in self.params.iter_mut() {
            if name.ends_with(".bias") {
                t.data_mut().fill(0.0);
                continue;
            }
            let fan_in: usize = match t.shape() {
                [_, cin, kh, kw] => cin * kh * kw,
                [d, _] => *d,
                s => unreachable!("unexpected weight shape {s:?}"),
            };
            let a = (6.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.random_range(-a..a);
            }
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(n, t)| g.param(n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Bind parameters as constants, for inference without gradient bookkeeping.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|(_, t)| g.constant(t.clone())).collect(),
        }
    }

    fn check_input(&self, t: &Tensor) -> Result<()> {
        let stages = self.config.stage_widths.len();
        let factor = 1usize << stages;
        match t.dims4() {
            Some((_, c, h, w)) if c == self.config.in_channels && h % factor == 0 && w % factor == 0 => Ok(()),
            _ => Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!(
                    "expected (B, {}, H, W) with H and W divisible by {factor}",
                    self.config.in_channels
                ),
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, input: Var) -> Result<ForwardResult> {
        self.check_input(g.value(input))?;
        let spec = Conv2dSpec { stride: 2, padding: 1 };
        let mut h = if self.config.input_offset != 0.0 {
            g.add_scalar(input, -self.config.input_offset)?
        } else {
            input
        };
        let stages = self.config.stage_widths.len();
        for s in 0..stages {
            let conv = g.conv2d(h, p.vars[2 * s], Some(p.vars[2 * s + 1]), spec)?;
            h = g.relu(conv)?;
        }
        let embedding = g.global_avg_pool(h)?;
        let head = g.matmul(embedding, p.vars[2 * stages])?;
        let logits = g.add_row_bias(head, p.vars[2 * stages + 1])?;
        Ok(ForwardResult { logits, embedding })
    }

    /// Four forward passes sharing one set of bound parameters.
    pub fn quad_forward(&self, g: &mut Graph, p: &BoundParams, quad: &Quad<Var>) -> Result<Quad<ForwardResult>> {
        quad.try_map(|x| self.forward(g, p, x))
    }

    /// Softmax probability of class 1 for every image of a `(N, C, H, W)` tensor.
    pub fn positive_scores(&self, images: &Tensor, chunk: usize) -> Result<Vec<f64>> {
        self.check_input(images)?;
        let (n, c, h, w) = images.dims4().expect("checked");
        let plane = c * h * w;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut g = Graph::new();
            let p = self.bind_frozen(&mut g);
            let x = g.constant(Tensor::new(
                vec![end - start, c, h, w],
                images.data()[start * plane..end * plane].to_vec(),
            )?);
            let r = self.forward(&mut g, &p, x)?;
            let probs = g.softmax_rows(r.logits)?;
            let t = g.value(probs);
            out.extend((0..end - start).map(|i| t.row(i)[1]));
        }
        Ok(out)
    }
}
