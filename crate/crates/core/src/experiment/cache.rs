use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{pretrain_backbone, FrozenBackbone, PretrainReport};
use crate::error::{CoreError, Result};

use super::config::BackboneConfig;

const CACHE_FORMAT: u32 = 1;

#[derive(Serialize)]
struct CacheKey<'a> {
    format: u32,
    seed: u64,
    broad: &'a crate::bench::BroadSpec,
    pretrain: &'a crate::bench::PretrainConfig,
}

/// Content hash of everything that determines the pretrained weights.
pub fn backbone_key(cfg: &BackboneConfig) -> String {
    let key = CacheKey {
        format: CACHE_FORMAT,
        seed: cfg.seed,
        broad: &cfg.broad,
        pretrain: &cfg.pretrain,
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&key).expect("cache key serializes"));
    hex::encode(h.finalize())
}

pub fn backbone_path(cfg: &BackboneConfig) -> PathBuf {
    cfg.cache_dir.join(format!("backbone-{}.bin", &backbone_key(cfg)[..16]))
}

/// How the backbone was obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSource {
    Cached(PathBuf),
    Pretrained { path: PathBuf, report: PretrainReport },
}

/// Loads the cached backbone for `cfg`, or pretrains and caches it when
/// allowed.
pub fn obtain_backbone(cfg: &BackboneConfig) -> Result<(FrozenBackbone, BackboneSource)> {
    let path = backbone_path(cfg);
    if path.exists() {
        return Ok((FrozenBackbone::load(&path)?, BackboneSource::Cached(path)));
    }
    if !cfg.allow_pretrain {
        return Err(CoreError::MissingBackbone(path));
    }
    log::info!("pretraining backbone ({} steps) into {}", cfg.pretrain.steps, path.display());
    let (backbone, report) = pretrain_backbone(&cfg.broad, &cfg.pretrain, cfg.seed)?;
    std::fs::create_dir_all(&cfg.cache_dir).map_err(|e| CoreError::io(&cfg.cache_dir, e))?;
    let tmp = path.with_extension("partial");
    backbone.save(&tmp)?;
    std::fs::rename(&tmp, &path).map_err(|e| CoreError::io(&path, e))?;
    Ok((backbone, BackboneSource::Pretrained { path, report }))
}
