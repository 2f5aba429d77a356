use serde::{Deserialize, Serialize};

use crate::volume::Volume;

pub const TRANSFORM_COUNT: usize = 34;
/// Voxel shift per unit of a translation offset.
pub const TRANSLATION_STRIDE: isize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformKind {
    /// Optional x-flip followed by `quarter_turns` rotations about z.
    RotationMirror { quarter_turns: u8, flip_x: bool },
    /// Sampling-window shift of `offset * TRANSLATION_STRIDE` voxels.
    Translation { offset: [i8; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentTransform {
    pub index: usize,
    pub kind: TransformKind,
}

impl AugmentTransform {
    pub fn is_identity(&self) -> bool {
        self.kind == TransformKind::RotationMirror { quarter_turns: 0, flip_x: false }
    }
}

/// The fixed augmentation family, index 0 first.
pub fn enumerate_transforms() -> Vec<AugmentTransform> {
    let mut out = Vec::with_capacity(TRANSFORM_COUNT);
    for quarter_turns in 0..4u8 {
        for flip_x in [false, true] {
            out.push(TransformKind::RotationMirror { quarter_turns, flip_x });
        }
    }
    for a in -1i8..=1 {
        for b in -1i8..=1 {
            for c in -1i8..=1 {
                if (a, b, c) != (0, 0, 0) {
                    out.push(TransformKind::Translation { offset: [a, b, c] });
                }
            }
        }
    }
    out.into_iter().enumerate().map(|(index, kind)| AugmentTransform { index, kind }).collect()
}

/// Output dims of `t` applied to a volume of `dims`.
pub fn transformed_dims(dims: [usize; 3], t: &AugmentTransform) -> [usize; 3] {
    match t.kind {
        TransformKind::RotationMirror { quarter_turns, .. } if quarter_turns % 2 == 1 => [dims[1], dims[0], dims[2]],
        _ => dims,
    }
}

pub fn apply_transform(v: &Volume, t: &AugmentTransform) -> Volume {
    let [nx, ny, nz] = v.dims();
    let out = match t.kind {
        TransformKind::RotationMirror { quarter_turns, flip_x } => {
            let [ox, oy, oz] = transformed_dims(v.dims(), t);
            Volume::from_fn([ox, oy, oz], |a, b, z| {
                // Undo the rotation: one quarter-turn maps source (x, y) to
                // output (y, nx - 1 - x).
                let (mut x, y) = match quarter_turns % 4 {
                    0 => (a, b),
                    1 => (nx - 1 - b, a),
                    2 => (nx - 1 - a, ny - 1 - b),
                    _ => (b, ny - 1 - a),
                };
                if flip_x {
                    x = nx - 1 - x;
                }
                v.get(x, y, z)
            })
        }
        TransformKind::Translation { offset } => {
            let shift = offset.map(|o| o as isize * TRANSLATION_STRIDE);
            let clamp = |c: usize, s: isize, n: usize| (c as isize + s).clamp(0, n as isize - 1) as usize;
            Volume::from_fn([nx, ny, nz], |x, y, z| v.get(clamp(x, shift[0], nx), clamp(y, shift[1], ny), clamp(z, shift[2], nz)))
        }
    };
    out.expect("transforms only copy finite voxels").with_spacing(v.spacing)
}
