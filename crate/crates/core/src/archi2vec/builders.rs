//! Hand-built runtime graphs for common architecture families. These stand
//! in for extracted graphs in fixtures and the synthetic benchmark; layer
//! hyperparameters are omitted, only operator structure is kept.

use super::graph::{ArchGraph, ArchNode};

/// Appends nodes in creation order; ids are positions.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<ArchNode>,
    edges: Vec<(u64, u64)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, atom: &str, inputs: &[u64]) -> u64 {
        let id = self.nodes.len() as u64;
        self.nodes.push(ArchNode { id, atom: atom.to_string() });
        for &src in inputs {
            self.edges.push((src, id));
        }
        id
    }

    /// Operator with a trainable weight leaf.
    pub fn weighted(&mut self, atom: &str, input: u64) -> u64 {
        let w = self.node("Variable", &[]);
        self.node(atom, &[input, w])
    }

    fn conv_bn(&mut self, x: u64) -> u64 {
        let c = self.weighted("ConvolutionBackward0", x);
        self.weighted("NativeBatchNormBackward0", c)
    }

    fn conv_bn_relu(&mut self, x: u64) -> u64 {
        let b = self.conv_bn(x);
        self.node("ReluBackward0", &[b])
    }

    fn classifier_head(&mut self, x: u64, hidden: usize) -> u64 {
        let pooled = self.node("AdaptiveAvgPool2DBackward0", &[x]);
        let mut h = self.node("ViewBackward0", &[pooled]);
        for _ in 0..hidden {
            let fc = self.linear(h);
            h = self.node("ReluBackward0", &[fc]);
        }
        self.linear(h)
    }

    fn linear(&mut self, x: u64) -> u64 {
        let w = self.node("Variable", &[]);
        let t = self.node("TBackward0", &[w]);
        let bias = self.node("Variable", &[]);
        self.node("AddmmBackward0", &[bias, x, t])
    }

    pub fn finish(self, graph_id: &str) -> ArchGraph {
        ArchGraph::new(graph_id, self.nodes, self.edges)
            .expect("builder graphs are valid DAGs")
            .0
    }
}

/// Residual network with basic blocks; `stages[s]` blocks in stage `s`.
/// `[2, 2, 2, 2]` is the 18-layer layout, `[1, 1, 1, 1]` the 10-layer one.
pub fn resnet_like(graph_id: &str, stages: &[usize]) -> ArchGraph {
    let mut b = GraphBuilder::new();
    let input = b.node("Variable", &[]);
    let stem = b.conv_bn_relu(input);
    let mut x = b.node("MaxPool2DWithIndicesBackward0", &[stem]);
    for (s, &blocks) in stages.iter().enumerate() {
        for blk in 0..blocks {
            let h = b.conv_bn_relu(x);
            let h = b.conv_bn(h);
            let shortcut = if s > 0 && blk == 0 { b.conv_bn(x) } else { x };
            let sum = b.node("AddBackward0", &[h, shortcut]);
            x = b.node("ReluBackward0", &[sum]);
        }
    }
    b.classifier_head(x, 0);
    b.finish(graph_id)
}

/// Plain convolutional chain in the AlexNet/VGG style: conv-relu layers,
/// max-pooling between `groups`, and a three-layer classifier.
pub fn plain_conv(graph_id: &str, groups: &[usize]) -> ArchGraph {
    let mut b = GraphBuilder::new();
    let mut x = b.node("Variable", &[]);
    for &convs in groups {
        for _ in 0..convs {
            let c = b.weighted("ConvolutionBackward0", x);
            x = b.node("ReluBackward0", &[c]);
        }
        x = b.node("MaxPool2DWithIndicesBackward0", &[x]);
    }
    b.classifier_head(x, 2);
    b.finish(graph_id)
}

pub fn alexnet_like(graph_id: &str) -> ArchGraph {
    plain_conv(graph_id, &[1, 1, 3])
}

/// Densely connected blocks: each layer sees the concatenation of all
/// earlier outputs in its block.
pub fn densenet_like(graph_id: &str, blocks: &[usize]) -> ArchGraph {
    let mut b = GraphBuilder::new();
    let input = b.node("Variable", &[]);
    let mut x = b.conv_bn_relu(input);
    for (i, &layers) in blocks.iter().enumerate() {
        let mut features = vec![x];
        for _ in 0..layers {
            let cat = b.node("CatBackward0", &features);
            let bn = b.weighted("NativeBatchNormBackward0", cat);
            let r = b.node("ReluBackward0", &[bn]);
            let c = b.weighted("ConvolutionBackward0", r);
            features.push(c);
        }
        x = b.node("CatBackward0", &features);
        if i + 1 < blocks.len() {
            let bn = b.weighted("NativeBatchNormBackward0", x);
            let r = b.node("ReluBackward0", &[bn]);
            let c = b.weighted("ConvolutionBackward0", r);
            x = b.node("AvgPool2DBackward0", &[c]);
        }
    }
    b.classifier_head(x, 0);
    b.finish(graph_id)
}

/// Inverted-residual blocks with clipped activations.
pub fn mobilenet_like(graph_id: &str, blocks: usize) -> ArchGraph {
    let mut b = GraphBuilder::new();
    let input = b.node("Variable", &[]);
    let stem = b.conv_bn(input);
    let mut x = b.node("HardtanhBackward0", &[stem]);
    for blk in 0..blocks {
        let e = b.conv_bn(x);
        let e = b.node("HardtanhBackward0", &[e]);
        let d = b.conv_bn(e);
        let d = b.node("HardtanhBackward0", &[d]);
        let p = b.conv_bn(d);
        x = if blk % 2 == 1 { b.node("AddBackward0", &[p, x]) } else { p };
    }
    b.classifier_head(x, 0);
    b.finish(graph_id)
}

/// Parallel branches joined by concatenation.
pub fn inception_like(graph_id: &str, modules: usize) -> ArchGraph {
    let mut b = GraphBuilder::new();
    let input = b.node("Variable", &[]);
    let stem = b.conv_bn_relu(input);
    let mut x = b.node("MaxPool2DWithIndicesBackward0", &[stem]);
    for _ in 0..modules {
        let b1 = b.conv_bn_relu(x);
        let b2 = b.conv_bn_relu(x);
        let b2 = b.conv_bn_relu(b2);
        let b3 = b.conv_bn_relu(x);
        let b3 = b.conv_bn_relu(b3);
        let b3 = b.conv_bn_relu(b3);
        let pool = b.node("AvgPool2DBackward0", &[x]);
        let b4 = b.conv_bn_relu(pool);
        x = b.node("CatBackward0", &[b1, b2, b3, b4]);
    }
    b.classifier_head(x, 0);
    b.finish(graph_id)
}
