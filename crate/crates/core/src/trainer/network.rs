//! Per-pixel dense network: a shared encoder over a local intensity patch and
//! one small decoder per task.

use crate::diffcore::{GraphError, NodeId, ParamSet, Parameter, ValueGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fully connected layer stored inside a [`ParamSet`]: `inputs * outputs`
/// weights in row-major `(output, input)` order, then `outputs` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl Dense {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.param_count()
    }

    fn weight(&self, o: usize, i: usize) -> usize {
        self.offset + o * self.inputs + i
    }

    fn bias(&self, o: usize) -> usize {
        self.offset + self.inputs * self.outputs + o
    }

    fn forward_graph(
        &self,
        g: &mut ValueGraph,
        nodes: &[NodeId],
        x: &[NodeId],
        relu: bool,
    ) -> Result<Vec<NodeId>, GraphError> {
        let mut out = Vec::with_capacity(self.outputs);
        let mut terms = Vec::with_capacity(self.inputs + 1);
        for o in 0..self.outputs {
            terms.clear();
            for (i, &xi) in x.iter().enumerate() {
                terms.push(g.mul(nodes[self.weight(o, i)], xi)?);
            }
            terms.push(nodes[self.bias(o)]);
            let z = g.sum(&terms)?;
            out.push(if relu { g.relu(z)? } else { z });
        }
        Ok(out)
    }

    fn forward(&self, p: &[f64], x: &[f64], relu: bool) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let w = &p[self.weight(o, 0)..self.weight(o, 0) + self.inputs];
                let z = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[self.bias(o)];
                if relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub hidden: Option<Dense>,
    pub out: Dense,
}

impl Decoder {
    pub fn range(&self) -> std::ops::Range<usize> {
        let start = self.hidden.map_or(self.out.offset, |h| h.offset);
        start..self.out.range().end
    }
}

/// Shared encoder plus per-task decoders. All weights live in one
/// [`ParamSet`]; the encoder block is referenced by every task path.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    pub params: ParamSet,
    pub encoder: Vec<Dense>,
    pub decoders: Vec<Decoder>,
    pub input_dim: usize,
}

/// Output nodes of one graph forward pass, per task and per pixel.
pub type GraphOutputs = Vec<Option<Vec<Vec<NodeId>>>>;

impl ToyNetwork {
    /// Weights are uniform in `±1/√fan_in`, biases zero.
    pub fn new(input_dim: usize, hidden: &[usize], head_hidden: usize, outputs: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut layer = |params: &mut ParamSet, inputs: usize, outputs: usize| {
            let offset = params.len();
            let bound = 1.0 / (inputs as f64).sqrt();
            for _ in 0..inputs * outputs {
                params.push(Parameter::new(rng.random_range(-bound..=bound)));
            }
            for _ in 0..outputs {
                params.push(Parameter::new(0.0));
            }
            Dense {
                inputs,
                outputs,
                offset,
            }
        };
        let mut encoder = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            encoder.push(layer(&mut params, width, h));
            width = h;
        }
        let decoders = outputs
            .iter()
            .map(|&k| {
                if head_hidden > 0 {
                    let h = layer(&mut params, width, head_hidden);
                    Decoder {
                        hidden: Some(h),
                        out: layer(&mut params, head_hidden, k),
                    }
                } else {
                    Decoder {
                        hidden: None,
                        out: layer(&mut params, width, k),
                    }
                }
            })
            .collect();
        Self {
            params,
            encoder,
            decoders,
            input_dim,
        }
    }

    pub fn encoder_range(&self) -> std::ops::Range<usize> {
        let end = self.encoder.last().map_or(0, |l| l.range().end);
        0..end
    }

    /// Builds the forward pass for `inputs` (one feature vector per pixel)
    /// into `g`. Parameters are bound once and shared across pixels; only
    /// decoders flagged in `active` are built.
    pub fn forward_graph(
        &mut self,
        g: &mut ValueGraph,
        inputs: &[Vec<f64>],
        active: &[bool],
    ) -> Result<GraphOutputs, GraphError> {
        let nodes = self.params.bind_all(g)?;
        let mut out: GraphOutputs = active.iter().map(|&a| a.then(Vec::new)).collect();
        let mut x = Vec::with_capacity(self.input_dim);
        for feat in inputs {
            x.clear();
            for &f in feat {
                x.push(g.constant(f)?);
            }
            let mut h = x.clone();
            for layer in &self.encoder {
                h = layer.forward_graph(g, &nodes, &h, true)?;
            }
            for (dec, slot) in self.decoders.iter().zip(out.iter_mut()) {
                let Some(per_pixel) = slot else { continue };
                let mut z = h.clone();
                if let Some(hid) = &dec.hidden {
                    z = hid.forward_graph(g, &nodes, &z, true)?;
                }
                per_pixel.push(dec.out.forward_graph(g, &nodes, &z, false)?);
            }
        }
        Ok(out)
    }

    /// Plain forward pass for one pixel: outputs of every decoder.
    pub fn predict(&self, feat: &[f64]) -> Vec<Vec<f64>> {
        let p: Vec<f64> = self.params.values();
        self.predict_with(&p, feat)
    }

    pub fn predict_with(&self, p: &[f64], feat: &[f64]) -> Vec<Vec<f64>> {
        let mut h = feat.to_vec();
        for layer in &self.encoder {
            h = layer.forward(p, &h, true);
        }
        self.decoders
            .iter()
            .map(|dec| {
                let z = match &dec.hidden {
                    Some(hid) => hid.forward(p, &h, true),
                    None => h.clone(),
                };
                dec.out.forward(p, &z, false)
            })
            .collect()
    }

    /// Human-readable name of parameter `index`.
    pub fn param_name(&self, index: usize) -> String {
        let describe = |prefix: String, d: &Dense| {
            let local = index - d.offset;
            if local < d.inputs * d.outputs {
                format!("{prefix}.w[{},{}]", local / d.inputs, local % d.inputs)
            } else {
                format!("{prefix}.b[{}]", local - d.inputs * d.outputs)
            }
        };
        for (l, d) in self.encoder.iter().enumerate() {
            if d.range().contains(&index) {
                return describe(format!("encoder{l}"), d);
            }
        }
        for (t, dec) in self.decoders.iter().enumerate() {
            if let Some(h) = dec.hidden.filter(|h| h.range().contains(&index)) {
                return describe(format!("decoder{t}.hidden"), &h);
            }
            if dec.out.range().contains(&index) {
                return describe(format!("decoder{t}.out"), &dec.out);
            }
        }
        format!("param{index}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_and_plain_forward_agree() {
        let mut net = ToyNetwork::new(3, &[5, 4], 3, &[3, 1, 2], 11);
        let feats = vec![vec![0.3, -0.2, 0.9], vec![-1.0, 0.5, 0.1]];
        let mut g = ValueGraph::new();
        let out = net.forward_graph(&mut g, &feats, &[true, true, true]).unwrap();
        for (p, f) in feats.iter().enumerate() {
            let plain = net.predict(f);
            for t in 0..3 {
                let nodes = &out[t].as_ref().unwrap()[p];
                for (k, &n) in nodes.iter().enumerate() {
                    assert!((g.value(n) - plain[t][k]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ToyNetwork::new(25, &[8], 0, &[4, 1], 3);
        let b = ToyNetwork::new(25, &[8], 0, &[4, 1], 3);
        let c = ToyNetwork::new(25, &[8], 0, &[4, 1], 4);
        assert_eq!(a, b);
        assert_ne!(a.params.values(), c.params.values());
        let l = a.encoder[0];
        for i in l.offset..l.offset + 200 {
            assert!(a.params.params[i].value.abs() <= 0.2);
        }
    }

    #[test]
    fn inactive_decoders_are_not_built() {
        let mut net = ToyNetwork::new(2, &[3], 0, &[2, 1], 0);
        let mut g = ValueGraph::new();
        let out = net.forward_graph(&mut g, &[vec![1.0, 2.0]], &[false, true]).unwrap();
        assert!(out[0].is_none());
        assert_eq!(out[1].as_ref().unwrap()[0].len(), 1);
    }

    #[test]
    fn names() {
        let net = ToyNetwork::new(2, &[3], 0, &[2], 0);
        assert_eq!(net.param_name(0), "encoder0.w[0,0]");
        assert_eq!(net.param_name(7), "encoder0.b[1]");
        assert_eq!(net.param_name(9), "decoder0.out.w[0,0]");
    }
}
