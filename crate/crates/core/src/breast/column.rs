//! Single-view ResNet-22 column.
//!
//! Layout: 7x7/2 stem conv, then five stages of two residual blocks each.
//! The first block of every stage halves the spatial extent with a strided
//! 3x3 conv and a strided 1x1 shortcut conv; the column ends in global
//! average pooling to a 256-vector. Weighted layers: stem (1) + 5 x 2 x 2
//! block convs (20) + the first fully connected head layer (1) = 22.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Layer, LayerSpec, ParamStore, Params, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnConfig {
    pub input_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pad: usize,
    /// Stem width followed by the output width of each stage.
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl ColumnConfig {
    pub fn resnet22(input_channels: usize) -> Self {
        ColumnConfig {
            input_channels,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pad: 3,
            channels: vec![16, 16, 32, 64, 128, 256],
            blocks_per_stage: 2,
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn output_dim(&self) -> usize {
        *self.channels.last().expect("non-empty channel plan")
    }

    fn stem(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: self.input_channels,
            out_channels: self.channels[0],
            kernel: (self.stem_kernel, self.stem_kernel),
            stride: (self.stem_stride, self.stem_stride),
            padding: (self.stem_pad, self.stem_pad),
            bias: false,
        }
    }

    /// Activation shapes `[C, H, W]` after the stem and after each stage for
    /// an input of `height x width`, computed from the layer shape rules only.
    pub fn shape_trace(&self, height: usize, width: usize) -> Result<Vec<(String, [usize; 3])>> {
        let mut rows = Vec::new();
        let s = self.stem().output_shape(&[&[1, self.input_channels, height, width]])?;
        rows.push((format!("Conv{0}x{0}", self.stem_kernel), [s[1], s[2], s[3]]));
        let mut cur = s;
        for stage in 0..self.stages() {
            for block in 0..self.blocks_per_stage {
                for spec in block_specs(self, stage, block).main {
                    cur = spec.output_shape(&[&cur])?;
                }
            }
            rows.push((format!("ResBlock {stage}"), [cur[1], cur[2], cur[3]]));
        }
        Ok(rows)
    }
}

struct BlockSpecs {
    main: Vec<LayerSpec>,
    shortcut: Option<LayerSpec>,
}

fn block_specs(cfg: &ColumnConfig, stage: usize, block: usize) -> BlockSpecs {
    let cin = if block == 0 { cfg.channels[stage] } else { cfg.channels[stage + 1] };
    let cout = cfg.channels[stage + 1];
    let stride = if block == 0 { 2 } else { 1 };
    let conv = |ci, s| LayerSpec::Conv2d {
        in_channels: ci,
        out_channels: cout,
        kernel: (3, 3),
        stride: (s, s),
        padding: (1, 1),
        bias: false,
    };
    let shortcut = (block == 0).then(|| LayerSpec::conv(cin, cout, 1, stride, 0));
    BlockSpecs {
        main: vec![
            conv(cin, stride),
            LayerSpec::batchnorm(cout),
            LayerSpec::Relu,
            conv(cout, 1),
            LayerSpec::batchnorm(cout),
        ],
        shortcut,
    }
}

struct Block {
    conv1: Layer,
    bn1: Layer,
    conv2: Layer,
    bn2: Layer,
    shortcut: Option<Layer>,
}

/// One ResNet column bound to parameters under a name prefix.
pub struct Column {
    pub config: ColumnConfig,
    pub prefix: String,
    stem: Layer,
    stem_bn: Layer,
    blocks: Vec<Block>,
}

impl Column {
    pub fn build<R: Rng>(
        config: ColumnConfig,
        prefix: &str,
        store: &mut ParamStore<f32>,
        rng: &mut R,
    ) -> Result<Self> {
        let stem = Layer::build(config.stem(), &format!("{prefix}.stem.conv"), store, rng)?;
        let stem_bn =
            Layer::build(LayerSpec::batchnorm(config.channels[0]), &format!("{prefix}.stem.bn"), store, rng)?;
        let mut blocks = Vec::new();
        for stage in 0..config.stages() {
            for b in 0..config.blocks_per_stage {
                let specs = block_specs(&config, stage, b);
                let name = format!("{prefix}.s{stage}.b{b}");
                let mut main = specs.main.into_iter();
                let conv1 = Layer::build(main.next().unwrap(), &format!("{name}.conv1"), store, rng)?;
                let bn1 = Layer::build(main.next().unwrap(), &format!("{name}.bn1"), store, rng)?;
                let _relu = main.next();
                let conv2 = Layer::build(main.next().unwrap(), &format!("{name}.conv2"), store, rng)?;
                let bn2 = Layer::build(main.next().unwrap(), &format!("{name}.bn2"), store, rng)?;
                let shortcut = specs
                    .shortcut
                    .map(|s| Layer::build(s, &format!("{name}.short"), store, rng))
                    .transpose()?;
                blocks.push(Block { conv1, bn1, conv2, bn2, shortcut });
            }
        }
        Ok(Column { config, prefix: prefix.to_string(), stem, stem_bn, blocks })
    }

    /// Name of the stem kernel tensor, the only tensor whose shape depends
    /// on the input channel count.
    pub fn stem_weight_name(&self) -> String {
        format!("{}.stem.conv.w", self.prefix)
    }

    /// `[N, C, H, W]` canonically oriented images to `[N, 256]`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &mut Params<'_>, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "column {} expects {} input channels, got {c}",
                self.prefix, self.config.input_channels
            )));
        }
        let h = p.apply(&self.stem, g, &[x])?;
        let h = p.apply(&self.stem_bn, g, &[h])?;
        let mut h = g.relu(h)?;
        for b in &self.blocks {
            let y = p.apply(&b.conv1, g, &[h])?;
            let y = p.apply(&b.bn1, g, &[y])?;
            let y = g.relu(y)?;
            let y = p.apply(&b.conv2, g, &[y])?;
            let y = p.apply(&b.bn2, g, &[y])?;
            let s = match &b.shortcut {
                Some(sc) => p.apply(sc, g, &[h])?,
                None => h,
            };
            let sum = g.add(y, s)?;
            h = g.relu(sum)?;
        }
        g.global_avgpool(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_trace_matches_dimension_table() {
        let cfg = ColumnConfig::resnet22(1);
        let cc = cfg.shape_trace(2677, 1942).unwrap();
        let want_cc = [
            [16, 1339, 971],
            [16, 670, 486],
            [32, 335, 243],
            [64, 168, 122],
            [128, 84, 61],
            [256, 42, 31],
        ];
        assert_eq!(cc.iter().map(|r| r.1).collect::<Vec<_>>(), want_cc);
        let mlo = cfg.shape_trace(2974, 1748).unwrap();
        let want_mlo = [
            [16, 1487, 874],
            [16, 744, 437],
            [32, 372, 219],
            [64, 186, 110],
            [128, 93, 55],
            [256, 47, 28],
        ];
        assert_eq!(mlo.iter().map(|r| r.1).collect::<Vec<_>>(), want_mlo);
        assert_eq!(cc[0].0, "Conv7x7");
        assert_eq!(cc[5].0, "ResBlock 4");
    }
}
