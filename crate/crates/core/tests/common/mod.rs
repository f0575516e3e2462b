#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use casam_core::alignment::{write_layer, AlignmentLayer, TrainConfig};
use casam_core::bench::{FrozenBackbone, PretrainConfig};
use casam_core::experiment::{
    obtain_backbone, prepare_stream, BackboneConfig, ExperimentConfig, PreparedStream, StreamConfig,
};
use casam_core::router::{RouterConfig, VaeConfig};
use casam_core::strategies::{StrategyConfig, StrategyEnv, StrategyKind};
use tempfile::TempDir;

fn cache_dir() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("cache dir")).path()
}

/// Briefly pretrained: weak, but its logits depend on the features, so
/// different alignment layers give different scores.
pub fn backbone_config() -> BackboneConfig {
    BackboneConfig {
        seed: 3,
        pretrain: PretrainConfig {
            steps: 40,
            eval_samples: 8,
            iou_floor: 0.0,
            ..PretrainConfig::default()
        },
        cache_dir: cache_dir().to_path_buf(),
        allow_pretrain: true,
        ..BackboneConfig::default()
    }
}

/// The shared backbone; also fills the cache the experiment configs read.
pub fn backbone() -> &'static FrozenBackbone {
    static CELL: OnceLock<FrozenBackbone> = OnceLock::new();
    CELL.get_or_init(|| obtain_backbone(&backbone_config()).expect("short pretraining").0)
}

pub fn experiment_config(out: &Path, tasks: &[usize], ood: &[usize], strategies: &[StrategyKind]) -> ExperimentConfig {
    backbone();
    ExperimentConfig {
        name: "test".into(),
        output_dir: out.to_path_buf(),
        stream: stream_config(tasks, ood),
        backbone: backbone_config(),
        train: train_config(),
        n_blocks: 1,
        router: router_config(),
        strategies: strategies.to_vec(),
        ..ExperimentConfig::default()
    }
}

/// Every file under `dir` by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn stream_config(tasks: &[usize], ood: &[usize]) -> StreamConfig {
    StreamConfig {
        tasks: tasks.to_vec(),
        ood: ood.to_vec(),
        train_per_task: 12,
        test_per_task: 6,
        ..StreamConfig::default()
    }
}

pub fn stream(tasks: &[usize], ood: &[usize]) -> PreparedStream {
    prepare_stream(&stream_config(tasks, ood), backbone()).expect("stream")
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

pub fn router_config() -> RouterConfig {
    RouterConfig {
        vae: VaeConfig {
            epochs: 3,
            ..VaeConfig::default()
        },
        folds: 3,
        ..RouterConfig::default()
    }
}

pub fn env(strategy: StrategyConfig) -> StrategyEnv<'static> {
    StrategyEnv {
        backbone: backbone(),
        train: train_config(),
        n_blocks: 1,
        router: router_config(),
        strategy,
    }
}

pub fn layer_bytes(layer: &AlignmentLayer) -> Vec<u8> {
    let mut out = Vec::new();
    write_layer(&mut out, layer).expect("layer serializes");
    out
}
