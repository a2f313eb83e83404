//! Synthetic scenes whose ground truth is exactly known, and the
//! detection / spatial / bounding-box features synthesized from them.

mod features;
mod scene;

pub use features::{
    attribute_code, bbox_features, build_feature_bundle, covered_cells, round_sig9,
    synth_detection_features, synth_spatial_features, FeatureBundle, FeatureFlags, FeatureSpace,
    Quality, RawFeatures, CODE_WIDTH,
};
pub use scene::{bbox_normalize, gen_scene, BBox, SceneGraph, SceneObject, WorldConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("world config error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

/// A categorical object attribute with a fixed value order.
pub trait Attribute: Copy + Eq + Sized + 'static {
    const ALL: &'static [Self];
    const COUNT: usize;
    fn name(self) -> &'static str;

    fn index(self) -> usize {
        Self::ALL
            .iter()
            .position(|&v| v == self)
            .expect("value listed in ALL")
    }

    fn parse(word: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.name() == word)
    }
}

macro_rules! attribute_enum {
    ($ty:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $ty {
            $($variant),+
        }

        impl $ty {
            pub const ALL: [$ty; [$($word),+].len()] = [$($ty::$variant),+];
            pub const COUNT: usize = Self::ALL.len();
        }

        impl Attribute for $ty {
            const ALL: &'static [Self] = &$ty::ALL;
            const COUNT: usize = $ty::COUNT;

            fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $word),+
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

attribute_enum!(Shape { Cube => "cube", Sphere => "sphere", Pyramid => "pyramid", Cylinder => "cylinder" });
attribute_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow", Gray => "gray" });
attribute_enum!(SizeClass { Small => "small", Large => "large" });
attribute_enum!(Material { Matte => "matte", Shiny => "shiny" });

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_orders_are_fixed() {
        assert_eq!(
            Shape::COUNT + Color::COUNT + SizeClass::COUNT + Material::COUNT,
            13
        );
        assert_eq!(Color::Gray.index(), 4);
        assert_eq!(Shape::parse("pyramid"), Some(Shape::Pyramid));
        assert_eq!(Material::parse("wood"), None);
        assert_eq!(
            serde_json::to_string(&SizeClass::Large).unwrap(),
            "\"large\""
        );
    }
}
