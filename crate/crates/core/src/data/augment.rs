//! Dihedral data augmentation applied identically to every plane of a
//! training triplet.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The six geometric transforms sampled during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Quarter turn clockwise.
    Rot90,
    Rot180,
    /// Quarter turn counter-clockwise.
    Rot270,
    HFlip,
    VFlip,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::HFlip,
        Transform::VFlip,
    ];

    /// Uniform draw from [`Transform::ALL`], fully determined by the seed.
    pub fn sample(seed: u64) -> Transform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::ALL[rng.gen_range(0..Self::ALL.len())]
    }

    /// The transform that undoes this one.
    pub fn inverse(self) -> Transform {
        match self {
            Transform::Rot90 => Transform::Rot270,
            Transform::Rot270 => Transform::Rot90,
            other => other,
        }
    }
}

/// Apply a transform to `(C, H, W)` planes; quarter turns swap the
/// spatial extents.
pub fn apply_transform(planes: &Array3<f32>, t: Transform) -> Array3<f32> {
    let (c, h, w) = planes.dim();
    match t {
        Transform::Identity => planes.clone(),
        Transform::Rot90 => Array3::from_shape_fn((c, w, h), |(ch, y, x)| {
            planes[(ch, h - 1 - x, y)]
        }),
        Transform::Rot180 => Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            planes[(ch, h - 1 - y, w - 1 - x)]
        }),
        Transform::Rot270 => Array3::from_shape_fn((c, w, h), |(ch, y, x)| {
            planes[(ch, x, w - 1 - y)]
        }),
        Transform::HFlip => Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            planes[(ch, y, w - 1 - x)]
        }),
        Transform::VFlip => Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            planes[(ch, h - 1 - y, x)]
        }),
    }
}
