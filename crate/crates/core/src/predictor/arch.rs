use super::{sinusoidal_positions, Architecture, PredictorParams};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{NormKind, Tensor};

/// A predictor's forward pass recorded on a graph for one batch.
#[derive(Debug)]
pub struct PredictorGraph {
    pub graph: Graph,
    /// Batched input, `[B, ...input_shape]`.
    pub input: NodeId,
    /// `[B, C]` probabilities.
    pub probs: NodeId,
    pub batch: usize,
}

struct Builder<'a> {
    params: &'a PredictorParams,
    graph: Graph,
}

impl Builder<'_> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(id) = self.graph.param_id(name) {
            return Ok(id);
        }
        let t = self.params.get(name)?;
        Ok(self.graph.param(name, t))
    }

    fn optional(&mut self, name: &str) -> Result<Option<NodeId>> {
        if self.params.tensors.contains_key(name) {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.optional(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, b)
    }

    fn norm(&mut self, x: NodeId, prefix: &str, kind: Option<NormKind>) -> Result<NodeId> {
        let Some(kind) = kind else { return Ok(x) };
        let gain = self.param(&format!("{prefix}.gain"))?;
        let shift = self.optional(&format!("{prefix}.shift"))?;
        self.graph
            .normalize(x, kind, gain, shift, self.params.config.norm_epsilon)
    }

    fn act(&mut self, x: NodeId) -> NodeId {
        match self.params.config.activation {
            Some(kind) => self.graph.activate(x, kind),
            None => x,
        }
    }
}

/// Records the forward pass of `params` over a batch of prepared inputs.
/// With `input_grad`, the batched input node receives gradients too.
pub fn build_graph(params: &PredictorParams, inputs: &[&Tensor], input_grad: bool) -> Result<PredictorGraph> {
    let expected = params.input_shape();
    if inputs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per: usize = expected.iter().product();
    let mut data = Vec::with_capacity(per * inputs.len());
    for t in inputs {
        if t.shape() != expected.as_slice() {
            return Err(Error::dim("predictor input", t.shape(), &expected));
        }
        data.extend(t.data().iter().map(|&v| f64::from(v)));
    }
    let b = inputs.len();
    let mut shape = vec![b];
    shape.extend_from_slice(&expected);

    let mut bld = Builder {
        params,
        graph: Graph::new(),
    };
    let input = bld.graph.input_f64(shape, data, input_grad)?;
    let cfg = &params.config;
    let logits = match cfg.architecture {
        Architecture::Mixer => {
            let (rows, n1, n2) = (expected[0], cfg.n1, cfg.n2);
            // block 1 acts on the feature axis of every layer
            let x = bld.norm(input, "block1.norm", cfg.norm)?;
            let x = bld.linear(x, "block1.linear")?;
            let x = bld.act(x);
            // block 2 acts on the layer axis of every block-1 feature
            let x = bld.graph.transpose_last2(x)?;
            debug_assert_eq!(bld.graph.shape(x), &[b, n1, rows]);
            let x = bld.norm(x, "block2.norm", cfg.norm)?;
            let x = bld.linear(x, "block2.linear")?;
            let x = bld.act(x);
            let x = bld.graph.reshape(x, vec![b, n1 * n2])?;
            let x = bld.norm(x, "head.norm", cfg.head_norm)?;
            bld.linear(x, "head.linear")?
        }
        Architecture::Mlp => {
            let x = bld.linear(input, "mlp.hidden")?;
            let x = bld.act(x);
            bld.linear(x, "mlp.out")?
        }
        Architecture::Logistic => bld.linear(input, "logistic")?,
        Architecture::SelfAttention => {
            let (rows, a) = (expected[0], cfg.attn_dim);
            let x = bld.linear(input, "attn.proj")?;
            let cls = bld.param("attn.cls")?;
            let x = bld.graph.append_row(x, cls)?;
            let x = bld.graph.add_const(x, &sinusoidal_positions(rows + 1, a))?;
            let x = bld.norm(x, "attn.norm", Some(NormKind::LayerNorm))?;
            let q = bld.linear(x, "attn.query")?;
            let k = bld.linear(x, "attn.key")?;
            let v = bld.linear(x, "attn.value")?;
            let kt = bld.graph.transpose_last2(k)?;
            let scores = bld.graph.batch_matmul(q, kt)?;
            let scores = bld.graph.scale(scores, 1.0 / (a as f64).sqrt());
            let weights = bld.graph.softmax(scores)?;
            let ctx = bld.graph.batch_matmul(weights, v)?;
            let cls_out = bld.graph.select_row(ctx, rows)?;
            let x = bld.act(cls_out);
            bld.linear(x, "attn.out")?
        }
    };
    let probs = bld.graph.softmax(logits)?;
    Ok(PredictorGraph {
        graph: bld.graph,
        input,
        probs,
        batch: b,
    })
}
