//! Layer checkpoints:
//! `magic | version | task_id:i64 (-1 = identity) | n_blocks:u32 | channels:u32 | arrays`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use casam_tensor::Module;

use crate::binio;
use crate::error::{CoreError, Result};

use super::layer::{AlignmentLayer, LayerSlot};

const LAYER_MAGIC: &binio::Magic = b"CASAMAL\0";
const LAYER_VERSION: u32 = 1;
const MAX_BLOCKS: u32 = 64;
const MAX_CHANNELS: u32 = 4096;

pub fn write_layer(w: &mut impl Write, layer: &AlignmentLayer) -> Result<()> {
    binio::write_header(w, LAYER_MAGIC, LAYER_VERSION)?;
    let id = layer.task_id().map(i64::from).unwrap_or(-1);
    binio::write_i64(w, id)?;
    binio::write_u32(w, layer.n_blocks() as u32)?;
    binio::write_u32(w, layer.channels() as u32)?;
    let params = layer.parameters();
    binio::write_arrays(w, params.iter().map(|p| (p.name.as_str(), &p.value)))
}

pub fn read_layer(r: &mut impl Read) -> Result<AlignmentLayer> {
    binio::read_header(r, LAYER_MAGIC, LAYER_VERSION)?;
    let id = binio::read_i64(r)?;
    let n_blocks = binio::read_u32(r)?;
    let channels = binio::read_u32(r)?;
    if n_blocks > MAX_BLOCKS || channels > MAX_CHANNELS {
        return Err(CoreError::Format(format!(
            "implausible layer header: {} blocks of {} channels",
            n_blocks, channels
        )));
    }
    let slot = match id {
        -1 => LayerSlot::Identity,
        t if (0..=u32::MAX as i64).contains(&t) => LayerSlot::Task(t as u32),
        t => return Err(CoreError::Format(format!("invalid task id {} in layer checkpoint", t))),
    };
    let arrays = binio::read_arrays(r)?;
    if slot == LayerSlot::Identity {
        if n_blocks != 0 || !arrays.is_empty() {
            return Err(CoreError::Format("identity layer checkpoint carries weights".into()));
        }
        return Ok(AlignmentLayer::identity());
    }
    let mut layer = AlignmentLayer::new(0, n_blocks as usize, channels as usize, 0);
    binio::load_into(arrays, layer.parameters_mut())?;
    let blocks = layer.blocks().to_vec();
    Ok(AlignmentLayer::from_blocks(slot, channels as usize, blocks))
}

pub fn save_layer(layer: &AlignmentLayer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_layer(&mut w, layer)?;
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn load_layer(path: &Path) -> Result<AlignmentLayer> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_layer(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights_and_slot() {
        let layer = AlignmentLayer::new(7, 2, 8, 11);
        let mut buf = Vec::new();
        write_layer(&mut buf, &layer).unwrap();
        let back = read_layer(&mut buf.as_slice()).unwrap();
        assert_eq!(back.slot(), LayerSlot::Task(7));
        assert_eq!(back.n_blocks(), 2);
        assert_eq!(back.flatten(), layer.flatten());
    }

    #[test]
    fn identity_round_trips() {
        let mut buf = Vec::new();
        write_layer(&mut buf, &AlignmentLayer::identity()).unwrap();
        assert!(read_layer(&mut buf.as_slice()).unwrap().is_identity());
    }

    #[test]
    fn corruption_is_rejected() {
        let layer = AlignmentLayer::new(1, 1, 4, 2);
        let mut buf = Vec::new();
        write_layer(&mut buf, &layer).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] ^= 0xff;
        assert!(read_layer(&mut bad_magic.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 5];
        assert!(read_layer(&mut &truncated[..]).is_err());
        let mut bad_version = buf.clone();
        bad_version[8] = 9;
        assert!(read_layer(&mut bad_version.as_slice()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layer.bin");
        let layer = AlignmentLayer::new(3, 1, 4, 5);
        save_layer(&layer, &path).unwrap();
        assert_eq!(load_layer(&path).unwrap().flatten(), layer.flatten());
    }
}
