//! Little-endian binary container for scenes.
//!
//! ```text
//! offset  size  field
//! 0       6     magic "SEAMO1"
//! 6       1     dtype code (1 = f64)
//! 7       1     reserved, 0
//! 8       4     seasons T            (u32)
//! 12      4     optical channels C_O (u32)
//! 16      4     SAR channels C_R     (u32)
//! 20      4     height H             (u32)
//! 24      4     width W              (u32)
//! 28      4     latent label         (u32)
//! 32      8     seed                 (u64)
//! 40      ...   optical payload, T*C_O*H*W f64, season-major then C, H, W
//! ...     ...   SAR payload, T*C_R*H*W f64, same order
//! ```

use std::io::{Read, Write};

use super::raster::Raster;
use super::scene::Scene;
use crate::error::{Error, Result};

pub const SCENE_MAGIC: &[u8; 6] = b"SEAMO1";
pub const DTYPE_F64: u8 = 1;
const HEADER_LEN: usize = 40;

pub fn write_scene(scene: &Scene, mut out: impl Write) -> Result<()> {
    out.write_all(&scene_to_bytes(scene))?;
    Ok(())
}

pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let (o, r) = (&scene.optical[0], &scene.sar[0]);
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * scene.seasons() * (o.data.len() + r.data.len()));
    buf.extend_from_slice(SCENE_MAGIC);
    buf.push(DTYPE_F64);
    buf.push(0);
    for v in [scene.seasons(), o.channels, r.channels, o.height, o.width, scene.latent_label] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&scene.seed.to_le_bytes());
    for raster in scene.optical.iter().chain(&scene.sar) {
        for v in &raster.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn read_scene(mut input: impl Read) -> Result<Scene> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    scene_from_bytes(&buf)
}

pub fn scene_from_bytes(buf: &[u8]) -> Result<Scene> {
    if buf.len() < HEADER_LEN || &buf[..6] != SCENE_MAGIC {
        return Err(Error::Format("not a SEAMO1 scene container".into()));
    }
    if buf[6] != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype code {}", buf[6])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
    let (t, co, cr, h, w, label) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20), u32_at(24), u32_at(28));
    let seed = u64::from_le_bytes(buf[32..40].try_into().unwrap());
    if t == 0 || co == 0 || cr == 0 || h == 0 || w == 0 {
        return Err(Error::Format("zero dimension in scene header".into()));
    }
    let expected = t
        .checked_mul(co + cr)
        .and_then(|n| n.checked_mul(h * w))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("scene dimensions overflow".into()))?;
    if buf.len() - HEADER_LEN != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected}",
            buf.len() - HEADER_LEN
        )));
    }
    let mut values = buf[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |c: usize| Raster::new(c, h, w, values.by_ref().take(c * h * w).collect());
    let optical = (0..t).map(|_| take(co)).collect::<Result<Vec<_>>>()?;
    let sar = (0..t).map(|_| take(cr)).collect::<Result<Vec<_>>>()?;
    Ok(Scene { optical, sar, latent_label: label, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneConfig};

    #[test]
    fn round_trip_is_exact() {
        let cfg = SceneConfig { seasons: 2, height: 8, width: 12, ..SceneConfig::default() };
        let scene = generate_scene(42, &cfg).unwrap();
        let mut bytes = Vec::new();
        write_scene(&scene, &mut bytes).unwrap();
        assert_eq!(&bytes[..6], b"SEAMO1");
        assert_eq!(bytes.len(), 40 + 8 * 2 * (4 + 2) * 8 * 12);
        assert_eq!(read_scene(bytes.as_slice()).unwrap(), scene);
    }

    #[test]
    fn truncated_payload_rejected() {
        let cfg = SceneConfig { seasons: 1, height: 4, width: 4, ..SceneConfig::default() };
        let bytes = scene_to_bytes(&generate_scene(1, &cfg).unwrap());
        assert!(scene_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(scene_from_bytes(b"SEAMO2garbage-garbage-garbage-garbage-garbage").is_err());
    }
}
