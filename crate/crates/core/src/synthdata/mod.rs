//! Synthetic seasonal optical/SAR scenes and region selection.

mod container;
mod crop;
mod normalize;
mod raster;
mod scene;

pub use container::{read_scene, scene_from_bytes, scene_to_bytes, write_scene, DTYPE_F64, SCENE_MAGIC};
pub use crop::{sample_crops, CropKind, CropStrategy, CropWindow};
pub use normalize::{denormalize, normalize, ChannelStats};
pub use raster::Raster;
pub use scene::{generate_scene, latent_fields, LatentFields, Scene, SceneConfig};
