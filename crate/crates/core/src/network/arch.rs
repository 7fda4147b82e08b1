//! The layer table of the classifier and its channel arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::PoolSpec;

/// Dense block flavour: spatial [1,3,3] or depth-wise [3,1,1] convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    SpConv3D,
    DwConv3D,
}

impl BlockKind {
    pub fn kernel(self) -> [usize; 3] {
        match self {
            BlockKind::SpConv3D => [1, 3, 3],
            BlockKind::DwConv3D => [3, 1, 1],
        }
    }
}

/// A dense block adds `out_channels` new channels to its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    pub kind: BlockKind,
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Step {
    /// Conv + norm + ReLU whose output replaces its input (width multiple of g).
    Conv(usize, [usize; 3]),
    Block(BlockKind, usize),
    Pool([usize; 3]),
    GlobalAvgPool,
    Dense,
}

use BlockKind::{DwConv3D as Dw, SpConv3D as Sp};
use Step::{Block, Conv, Dense, GlobalAvgPool, Pool};

pub(crate) const ARCHITECTURE: &[(&str, Step)] = &[
    ("conv1", Conv(1, [5, 5, 5])),
    ("spconv2", Block(Sp, 1)),
    ("spconv3", Block(Sp, 2)),
    ("pool4", Pool([1, 3, 3])),
    ("spconv5", Block(Sp, 3)),
    ("spconv6", Block(Sp, 4)),
    ("dwconv7", Block(Dw, 5)),
    ("spconv8", Block(Sp, 6)),
    ("spconv9", Block(Sp, 7)),
    ("dwconv10", Block(Dw, 8)),
    ("pool11", Pool([3, 3, 3])),
    ("conv12", Conv(2, [1, 1, 1])),
    ("spconv13", Block(Sp, 2)),
    ("spconv14", Block(Sp, 3)),
    ("dwconv15", Block(Dw, 4)),
    ("spconv16", Block(Sp, 5)),
    ("spconv17", Block(Sp, 6)),
    ("dwconv18", Block(Dw, 7)),
    ("pool19", Pool([3, 3, 3])),
    ("conv20", Conv(4, [1, 1, 1])),
    ("spconv21", Block(Sp, 4)),
    ("spconv22", Block(Sp, 5)),
    ("dwconv23", Block(Dw, 6)),
    ("spconv24", Block(Sp, 7)),
    ("spconv25", Block(Sp, 8)),
    ("dwconv26", Block(Dw, 9)),
    ("pool27", Pool([3, 3, 3])),
    ("conv28", Conv(8, [1, 1, 1])),
    ("spconv29", Block(Sp, 8)),
    ("spconv30", Block(Sp, 9)),
    ("dwconv31", Block(Dw, 10)),
    ("spconv32", Block(Sp, 11)),
    ("spconv33", Block(Sp, 12)),
    ("dwconv34", Block(Dw, 13)),
    ("conv35", Conv(10, [1, 1, 1])),
    ("gap36", GlobalAvgPool),
    ("dense37", Dense),
];

/// Output geometry of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub name: String,
    pub extents: [usize; 3],
    pub channels: usize,
}

/// Walk the layer table, returning every layer's output geometry, or a
/// configuration error naming the first pooling stage the volume cannot pass.
pub fn stage_shapes(growth_rate: usize, input: [usize; 3]) -> Result<Vec<StageShape>> {
    if growth_rate == 0 {
        return Err(Error::config("growth rate must be at least 1"));
    }
    if input.iter().any(|&e| e == 0) {
        return Err(Error::config(format!("input extents must be positive, got {input:?}")));
    }
    let g = growth_rate;
    let mut extents = input;
    let mut channels = 1;
    let mut out = Vec::with_capacity(ARCHITECTURE.len());
    for &(name, step) in ARCHITECTURE {
        match step {
            Conv(mult, _) => channels = mult * g,
            Block(_, mult) => channels += mult * g,
            Pool(window) => {
                extents = PoolSpec::new(window)?.output_extents(extents).ok_or_else(|| {
                    Error::config(format!(
                        "input {input:?} is too small: stage {name} receives {extents:?}, \
                         smaller than its window {window:?}"
                    ))
                })?;
            }
            GlobalAvgPool => extents = [1, 1, 1],
            Dense => channels = 1,
        }
        out.push(StageShape { name: name.to_string(), extents, channels });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn widths(g: usize) -> Vec<usize> {
        stage_shapes(g, [16, 32, 32]).unwrap().iter().map(|s| s.channels).collect()
    }

    #[test]
    fn width_table_matches_concat_arithmetic() {
        // g, 2g, 4g | pool | 7g .. 37g | pool | 2g .. 29g | pool | 4g .. 43g | pool | 8g .. 71g | 10g
        let expect_mult = [
            1, 2, 4, 4, 7, 11, 16, 22, 29, 37, 37, 2, 4, 7, 11, 16, 22, 29, 29, 4, 8, 13, 19, 26, 34,
            43, 43, 8, 16, 25, 35, 46, 58, 71, 10, 10,
        ];
        for g in [1, 2, 3, 16] {
            let w = widths(g);
            let expect: Vec<usize> = expect_mult.iter().map(|m| m * g).chain([1]).collect();
            assert_eq!(w, expect, "g = {g}");
        }
    }

    #[test]
    fn spatial_chain_at_desk_scale() {
        let shapes = stage_shapes(2, [16, 32, 32]).unwrap();
        let at = |n: &str| shapes.iter().find(|s| s.name == n).unwrap().extents;
        assert_eq!(at("pool4"), [16, 15, 15]);
        assert_eq!(at("pool11"), [7, 7, 7]);
        assert_eq!(at("pool19"), [3, 3, 3]);
        assert_eq!(at("pool27"), [1, 1, 1]);
    }

    #[test]
    fn too_small_input_names_the_stage() {
        let err = stage_shapes(1, [8, 12, 12]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("pool"), "{msg}");
    }
}
