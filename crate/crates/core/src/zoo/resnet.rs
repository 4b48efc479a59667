use super::{GraphBuilder, ModelGraph};
use crate::error::{Error, Result};

pub const SUPPORTED_DEPTHS: [u32; 5] = [18, 34, 50, 101, 152];

const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const STEM_WIDTH: usize = 64;
const EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3 (carrying the stride), 1x1 expand by 4.
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResnetLayout {
    pub block: BlockKind,
    pub blocks_per_stage: [usize; 4],
}

pub fn resnet_layout(depth: u32) -> Result<ResnetLayout> {
    let (block, blocks_per_stage) = match depth {
        18 => (BlockKind::Basic, [2, 2, 2, 2]),
        34 => (BlockKind::Basic, [3, 4, 6, 3]),
        50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
        101 => (BlockKind::Bottleneck, [3, 4, 23, 3]),
        152 => (BlockKind::Bottleneck, [3, 8, 36, 3]),
        _ => {
            return Err(Error::Config(format!(
                "unsupported ResNet depth {depth}; expected one of {SUPPORTED_DEPTHS:?}"
            )))
        }
    };
    Ok(ResnetLayout {
        block,
        blocks_per_stage,
    })
}

fn scaled(width: usize, scale: f64) -> usize {
    ((width as f64 * scale).round() as usize).max(1)
}

/// Builds a ResNet classifier.
///
/// Layer ids follow the usual naming: `conv1`, `bn1`, `relu`, `maxpool`,
/// then `layer{s}.{b}.*` blocks with `downsample.conv`/`downsample.bn`
/// projections, `avgpool` and `fc`.
pub fn build_resnet(
    depth: u32,
    width_scale: f64,
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    let layout = resnet_layout(depth)?;
    if !(width_scale > 0.0 && width_scale <= 1.0) {
        return Err(Error::Config(format!("width_scale {width_scale} outside (0, 1]")));
    }
    if num_classes == 0 || input_shape.contains(&0) {
        return Err(Error::Config("num_classes and input extents must be positive".into()));
    }
    let mut b = GraphBuilder::new(input_shape);
    let stem = scaled(STEM_WIDTH, width_scale);
    b.conv("conv1", "input", stem, 7, 2, 3);
    b.bn("bn1", "conv1");
    b.relu("relu", "bn1");
    let mut x = b.max_pool("maxpool", "relu", 3, 2, 1);

    for (s, &blocks) in layout.blocks_per_stage.iter().enumerate() {
        let width = scaled(BASE_WIDTHS[s], width_scale);
        for i in 0..blocks {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            let p = format!("layer{}.{}", s + 1, i);
            let id = |name: &str| format!("{p}.{name}");
            let main = match layout.block {
                BlockKind::Basic => {
                    b.conv(&id("conv1"), &x, width, 3, stride, 1);
                    b.bn(&id("bn1"), &id("conv1"));
                    b.relu(&id("relu1"), &id("bn1"));
                    b.conv(&id("conv2"), &id("relu1"), width, 3, 1, 1);
                    b.bn(&id("bn2"), &id("conv2"))
                }
                BlockKind::Bottleneck => {
                    b.conv(&id("conv1"), &x, width, 1, 1, 0);
                    b.bn(&id("bn1"), &id("conv1"));
                    b.relu(&id("relu1"), &id("bn1"));
                    b.conv(&id("conv2"), &id("relu1"), width, 3, stride, 1);
                    b.bn(&id("bn2"), &id("conv2"));
                    b.relu(&id("relu2"), &id("bn2"));
                    b.conv(&id("conv3"), &id("relu2"), width * EXPANSION, 1, 1, 0);
                    b.bn(&id("bn3"), &id("conv3"))
                }
            };
            let out_width = b.width_of(&main);
            let skip = if stride != 1 || b.width_of(&x) != out_width {
                b.conv(&id("downsample.conv"), &x, out_width, 1, stride, 0);
                b.bn(&id("downsample.bn"), &id("downsample.conv"))
            } else {
                x.clone()
            };
            b.add(&id("add"), &main, &skip);
            x = b.relu(&id("relu_out"), &id("add"));
        }
    }
    b.gap("avgpool", &x);
    b.linear("fc", "avgpool", num_classes);
    b.build(Some(depth), width_scale, seed)
}
