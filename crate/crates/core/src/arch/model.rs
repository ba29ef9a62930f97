//! Instantiated networks: the base model (stem, units, classifier) and its
//! decoupled form with one auxiliary head per block.

use std::sync::Arc;

use super::partition::BlockPartition;
use super::spec::{ArchitectureSpec, StemSpec, UnitSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    softmax_cross_entropy, Conv2dGeometry, Layer, Padding, Param, ParamAllocator, Pass,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

const BASE_STREAM: u64 = 0;
const HEAD_STREAM: u64 = 1;

/// An indivisible unit: `post(main(x) [+ shortcut(x)])`.
#[derive(Debug, Clone)]
pub struct Unit<T> {
    main: Vec<Layer<T>>,
    /// `Some(vec![])` is an identity shortcut.
    shortcut: Option<Vec<Layer<T>>>,
    post: Vec<Layer<T>>,
}

fn run<T: Scalar>(
    layers: &mut [Layer<T>],
    tape: &mut Tape<T>,
    x: &Var<T>,
    pass: Pass,
) -> Result<Var<T>> {
    let mut h = x.clone();
    for layer in layers {
        h = layer.forward(tape, &h, pass)?;
    }
    Ok(h)
}

struct Builder<'a> {
    alloc: &'a mut ParamAllocator,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn conv<T: Scalar>(
        &mut self,
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Layer<T>> {
        let padding = if k == 1 {
            Padding::Valid
        } else {
            Padding::Same
        };
        Layer::conv(
            self.alloc,
            self.rng,
            &name,
            cin,
            cout,
            Conv2dGeometry::new(k, stride, padding),
            false,
        )
    }

    fn bn<T: Scalar>(&mut self, name: String, channels: usize) -> Layer<T> {
        Layer::batchnorm(self.alloc, &name, channels)
    }

    fn stem<T: Scalar>(&mut self, stem: &StemSpec, cin: usize) -> Result<Unit<T>> {
        Ok(Unit {
            main: vec![
                self.conv(
                    "stem.conv".into(),
                    cin,
                    stem.out_channels,
                    stem.kernel,
                    stem.stride,
                )?,
                self.bn("stem.bn".into(), stem.out_channels),
                Layer::Relu,
            ],
            shortcut: None,
            post: Vec::new(),
        })
    }

    fn unit<T: Scalar>(&mut self, i: usize, spec: &UnitSpec, cin: usize) -> Result<Unit<T>> {
        let n = |s: &str| format!("unit{i}.{s}");
        let main = match *spec {
            UnitSpec::Plain { out_channels, pool } => {
                let mut layers = vec![
                    self.conv(n("conv"), cin, out_channels, 3, 1)?,
                    self.bn(n("bn"), out_channels),
                    Layer::Relu,
                ];
                if pool {
                    layers.push(Layer::MaxPool {
                        kernel: 2,
                        stride: 2,
                    });
                }
                layers
            }
            UnitSpec::Basic {
                out_channels,
                stride,
            } => vec![
                self.conv(n("conv1"), cin, out_channels, 3, stride)?,
                self.bn(n("bn1"), out_channels),
                Layer::Relu,
                self.conv(n("conv2"), out_channels, out_channels, 3, 1)?,
                self.bn(n("bn2"), out_channels),
            ],
            UnitSpec::Bottleneck { width, stride } => vec![
                self.conv(n("conv1"), cin, width, 1, 1)?,
                self.bn(n("bn1"), width),
                Layer::Relu,
                self.conv(n("conv2"), width, width, 3, stride)?,
                self.bn(n("bn2"), width),
                Layer::Relu,
                self.conv(n("conv3"), width, 4 * width, 1, 1)?,
                self.bn(n("bn3"), 4 * width),
            ],
        };
        let (shortcut, post) = if spec.is_residual() {
            let shortcut = if spec.needs_projection(cin) {
                let stride = match *spec {
                    UnitSpec::Basic { stride, .. } | UnitSpec::Bottleneck { stride, .. } => stride,
                    UnitSpec::Plain { .. } => 1,
                };
                vec![
                    self.conv(n("proj"), cin, spec.out_channels(), 1, stride)?,
                    self.bn(n("proj_bn"), spec.out_channels()),
                ]
            } else {
                Vec::new()
            };
            (Some(shortcut), vec![Layer::Relu])
        } else {
            (None, Vec::new())
        };
        Ok(Unit {
            main,
            shortcut,
            post,
        })
    }

    fn head<T: Scalar>(&mut self, name: &str, channels: usize, classes: usize) -> Result<Head<T>> {
        Ok(Head {
            gap: Layer::Gap,
            dense: Layer::dense(
                self.alloc,
                self.rng,
                &format!("{name}.dense"),
                channels,
                classes,
            )?,
        })
    }
}

impl<T: Scalar> Unit<T> {
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Var<T>, pass: Pass) -> Result<Var<T>> {
        let mut h = run(&mut self.main, tape, x, pass)?;
        if let Some(shortcut) = &mut self.shortcut {
            let s = run(shortcut, tape, x, pass)?;
            h = tape.add(&h, &s)?;
        }
        run(&mut self.post, tape, &h, pass)
    }

    pub fn is_residual(&self) -> bool {
        self.shortcut.is_some()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.main
            .iter()
            .chain(self.shortcut.iter().flatten())
            .chain(&self.post)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.main
            .iter_mut()
            .chain(self.shortcut.iter_mut().flatten())
            .chain(&mut self.post)
            .flat_map(Layer::params_mut)
            .collect()
    }
}

/// Global average pooling followed by a dense layer onto the classes.
#[derive(Debug, Clone)]
pub struct Head<T> {
    gap: Layer<T>,
    dense: Layer<T>,
}

impl<T: Scalar> Head<T> {
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Var<T>, pass: Pass) -> Result<Var<T>> {
        let pooled = self.gap.forward(tape, x, pass)?;
        self.dense.forward(tape, &pooled, pass)
    }

    /// Logits, cross-entropy loss and probabilities for a batch.
    pub fn loss(
        &mut self,
        tape: &mut Tape<T>,
        x: &Var<T>,
        labels: &[usize],
        pass: Pass,
    ) -> Result<(Var<T>, Tensor<T>)> {
        let logits = self.forward(tape, x, pass)?;
        softmax_cross_entropy(tape, &logits, labels)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.dense.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.dense.params_mut()
    }
}

/// The base network trained end to end by backpropagation.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: ArchitectureSpec,
    stem: Option<Unit<T>>,
    units: Vec<Unit<T>>,
    classifier: Head<T>,
}

impl<T: Scalar> Network<T> {
    /// He-normal initialization from `seed`. Parameter identities are
    /// numbered in network order: stem, units, classifier.
    pub fn new(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let shapes = spec.propagate()?;
        let mut alloc = ParamAllocator::default();
        let mut rng = Rng::with_stream(seed, BASE_STREAM);
        let mut b = Builder {
            alloc: &mut alloc,
            rng: &mut rng,
        };
        let stem = spec
            .stem
            .as_ref()
            .map(|s| b.stem(s, spec.in_channels))
            .transpose()?;
        let units = spec
            .units
            .iter()
            .enumerate()
            .map(|(i, u)| b.unit(i, u, shapes[i][0]))
            .collect::<Result<Vec<_>>>()?;
        let classifier = b.head("classifier", shapes[shapes.len() - 1][0], spec.num_classes)?;
        Ok(Self {
            spec: spec.clone(),
            stem,
            units,
            classifier,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn units(&self) -> &[Unit<T>] {
        &self.units
    }

    pub fn classifier(&self) -> &Head<T> {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Head<T> {
        &mut self.classifier
    }

    pub fn features(&mut self, tape: &mut Tape<T>, x: &Var<T>, pass: Pass) -> Result<Var<T>> {
        let mut h = x.clone();
        for unit in self.stem.iter_mut().chain(&mut self.units) {
            h = unit.forward(tape, &h, pass)?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Var<T>, pass: Pass) -> Result<Var<T>> {
        let h = self.features(tape, x, pass)?;
        self.classifier.forward(tape, &h, pass)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.stem
            .iter()
            .chain(&self.units)
            .flat_map(Unit::params)
            .chain(self.classifier.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self
            .stem
            .iter_mut()
            .chain(&mut self.units)
            .flat_map(Unit::params_mut)
            .collect();
        out.extend(self.classifier.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Assembles a network from parts, e.g. one block plus its head as a
    /// standalone model.
    pub fn from_parts(
        spec: ArchitectureSpec,
        stem: Option<Unit<T>>,
        units: Vec<Unit<T>>,
        classifier: Head<T>,
    ) -> Self {
        Self {
            spec,
            stem,
            units,
            classifier,
        }
    }
}

/// One block of consecutive units with its auxiliary head.
#[derive(Debug, Clone)]
pub struct Block<T> {
    index: usize,
    stem: Option<Unit<T>>,
    units: Vec<Unit<T>>,
    head: Head<T>,
}

impl<T: Scalar> Block<T> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Var<T>, pass: Pass) -> Result<Var<T>> {
        let mut h = x.clone();
        for unit in self.stem.iter_mut().chain(&mut self.units) {
            h = unit.forward(tape, &h, pass)?;
        }
        Ok(h)
    }

    pub fn head(&self) -> &Head<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head<T> {
        &mut self.head
    }

    pub fn stem(&self) -> Option<&Unit<T>> {
        self.stem.as_ref()
    }

    pub fn units(&self) -> &[Unit<T>] {
        &self.units
    }

    /// Parameters of the block's own layers (excluding the head).
    pub fn body_params(&self) -> Vec<&Param<T>> {
        self.stem
            .iter()
            .chain(&self.units)
            .flat_map(Unit::params)
            .collect()
    }

    /// Block and head parameters.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.body_params();
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self
            .stem
            .iter_mut()
            .chain(&mut self.units)
            .flat_map(Unit::params_mut)
            .collect();
        out.extend(self.head.params_mut());
        out
    }
}

/// A network split into K blocks, each with an auxiliary head, plus the
/// output layer. Heads are read-only taps: ignoring them leaves the base
/// network's function unchanged.
#[derive(Debug, Clone)]
pub struct DecoupledModel<T> {
    spec: ArchitectureSpec,
    partition: BlockPartition,
    blocks: Vec<Block<T>>,
    classifier: Head<T>,
}

/// Splits `network` along `partition` and gives every block a GAP + dense
/// head sized to its output channels. Head parameters are drawn from a
/// stream separate from the base initialization and numbered after the base
/// parameters, so the base model is identical for every K.
pub fn attach_aux<T: Scalar>(
    network: Network<T>,
    partition: &BlockPartition,
    seed: u64,
) -> Result<DecoupledModel<T>> {
    let spec = network.spec.clone();
    if partition.units() != network.units.len() {
        return Err(Error::Partition(format!(
            "partition covers {} units, network has {}",
            partition.units(),
            network.units.len()
        )));
    }
    let shapes = spec.propagate()?;
    let next_id = network
        .params()
        .iter()
        .map(|p| p.id.0 + 1)
        .max()
        .unwrap_or(0);
    let mut alloc = ParamAllocator::starting_at(next_id);
    let mut rng = Rng::with_stream(seed, HEAD_STREAM);
    let mut b = Builder {
        alloc: &mut alloc,
        rng: &mut rng,
    };

    let Network {
        stem,
        units,
        classifier,
        ..
    } = network;
    let mut stem = stem;
    let mut units = units.into_iter();
    let mut blocks = Vec::with_capacity(partition.k());
    for (index, range) in partition.ranges().iter().enumerate() {
        let block_units: Vec<Unit<T>> = units.by_ref().take(range.len()).collect();
        let channels = shapes[range.end][0];
        blocks.push(Block {
            index,
            stem: stem.take(),
            units: block_units,
            head: b.head(&format!("head{}", index + 1), channels, spec.num_classes)?,
        });
    }
    Ok(DecoupledModel {
        spec,
        partition: partition.clone(),
        blocks,
        classifier,
    })
}

impl<T: Scalar> DecoupledModel<T> {
    /// Builds the base network for `spec`, partitions it into `k` blocks and
    /// attaches heads.
    pub fn build(spec: &ArchitectureSpec, k: usize, seed: u64) -> Result<Self> {
        let partition = super::partition::partition(spec.unit_count(), k)?;
        attach_aux(Network::new(spec, seed)?, &partition, seed)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    pub fn classifier(&self) -> &Head<T> {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Head<T> {
        &mut self.classifier
    }

    /// Disjoint mutable access to every stage at once.
    pub fn split_stages_mut(&mut self) -> (&mut [Block<T>], &mut Head<T>) {
        (&mut self.blocks, &mut self.classifier)
    }

    /// Output-layer logits; auxiliary heads are not evaluated.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Var<T>, pass: Pass) -> Result<Var<T>> {
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = block.forward(tape, &h, pass)?;
        }
        self.classifier.forward(tape, &h, pass)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.blocks
            .iter()
            .flat_map(Block::params)
            .chain(self.classifier.params())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Drops the auxiliary heads, recovering the base network.
    pub fn strip_heads(self) -> Network<T> {
        let mut stem = None;
        let mut units = Vec::new();
        for block in self.blocks {
            if block.stem.is_some() {
                stem = block.stem;
            }
            units.extend(block.units);
        }
        Network {
            spec: self.spec,
            stem,
            units,
            classifier: self.classifier,
        }
    }

    /// Moves the blocks and classifier out, e.g. to hand them to workers.
    pub fn into_parts(self) -> (ArchitectureSpec, BlockPartition, Vec<Block<T>>, Head<T>) {
        (self.spec, self.partition, self.blocks, self.classifier)
    }

    pub fn from_parts(
        spec: ArchitectureSpec,
        partition: BlockPartition,
        blocks: Vec<Block<T>>,
        classifier: Head<T>,
    ) -> Result<Self> {
        if blocks.len() != partition.k() {
            return Err(Error::Partition(format!(
                "{} blocks for a {}-block partition",
                blocks.len(),
                partition.k()
            )));
        }
        Ok(Self {
            spec,
            partition,
            blocks,
            classifier,
        })
    }

    /// Block `index` and its head as a standalone network whose classifier
    /// is the head. Parameters (and identities) are copied.
    pub fn block_as_network(&self, index: usize) -> Result<Network<T>> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no block {index}")))?;
        Ok(Network {
            spec: self.spec.clone(),
            stem: block.stem.clone(),
            units: block.units.clone(),
            classifier: block.head.clone(),
        })
    }
}

/// Parameter values by identity, for comparisons across models.
pub fn param_snapshot<T: Scalar>(
    params: &[&Param<T>],
) -> Vec<(crate::autodiff::ParamId, Arc<Tensor<T>>)> {
    let mut out: Vec<_> = params
        .iter()
        .map(|p| (p.id, Arc::clone(&p.value)))
        .collect();
    out.sort_by_key(|(id, _)| *id);
    out
}
