//! Dataset export and import.
//!
//! A stream directory holds `stream.json` (task specs, seeds, file names)
//! and one binary file per task split:
//!
//! ```text
//! magic  "CASAMDS\0"      8 bytes
//! version                 u32 = 1
//! count, channels, height, width   u32 each
//! count × { image f32[channels·height·width], mask f32[height·width], box u32[4] (x0 y0 x1 y1) }
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use casam_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::render::{BoxPrompt, Sample};
use super::spec::{TaskSpec, IMAGE_SIZE};
use super::stream::TaskData;
use crate::binio::{self, Magic};
use crate::error::{CoreError, Result};

const SAMPLES_MAGIC: &Magic = b"CASAMDS\0";
const SAMPLES_VERSION: u32 = 1;
const METADATA_FILE: &str = "stream.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskEntry {
    spec: TaskSpec,
    train_file: String,
    test_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StreamMetadata {
    format_version: u32,
    master_seed: u64,
    tasks: Vec<TaskEntry>,
}

pub fn export_stream(stream: &[TaskData], master_seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut tasks = Vec::new();
    for task in stream {
        let train_file = format!("task-{}-train.bin", task.spec.task_id);
        let test_file = format!("task-{}-test.bin", task.spec.task_id);
        write_samples(&dir.join(&train_file), &task.train)?;
        write_samples(&dir.join(&test_file), &task.test)?;
        tasks.push(TaskEntry {
            spec: task.spec.clone(),
            train_file,
            test_file,
        });
    }
    let meta = StreamMetadata {
        format_version: SAMPLES_VERSION,
        master_seed,
        tasks,
    };
    let path = dir.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| CoreError::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
}

/// Returns the stream and the master seed it was generated with.
pub fn import_stream(dir: &Path) -> Result<(Vec<TaskData>, u64)> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let meta: StreamMetadata = serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{}: {}", path.display(), e)))?;
    if meta.format_version != SAMPLES_VERSION {
        return Err(CoreError::Format(format!("unsupported stream version {}", meta.format_version)));
    }
    let mut out = Vec::new();
    for entry in meta.tasks {
        out.push(TaskData {
            train: read_samples(&dir.join(&entry.train_file))?,
            test: read_samples(&dir.join(&entry.test_file))?,
            spec: entry.spec,
        });
    }
    Ok((out, meta.master_seed))
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    binio::write_header(&mut w, SAMPLES_MAGIC, SAMPLES_VERSION)?;
    for v in [samples.len(), 3, IMAGE_SIZE, IMAGE_SIZE] {
        binio::write_u32(&mut w, v as u32)?;
    }
    for s in samples {
        binio::write_f32s(&mut w, s.image.data())?;
        binio::write_f32s(&mut w, s.mask.data())?;
        for v in [s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1] {
            binio::write_u32(&mut w, v)?;
        }
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    read_samples_from(&mut r)
}

fn read_samples_from(r: &mut impl Read) -> Result<Vec<Sample>> {
    binio::read_header(r, SAMPLES_MAGIC, SAMPLES_VERSION)?;
    let count = binio::read_u32(r)? as usize;
    let channels = binio::read_u32(r)? as usize;
    let height = binio::read_u32(r)? as usize;
    let width = binio::read_u32(r)? as usize;
    if channels != 3 || height != IMAGE_SIZE || width != IMAGE_SIZE {
        return Err(CoreError::Format(format!(
            "sample dims {}x{}x{} unsupported (expected 3x{}x{})",
            channels, height, width, IMAGE_SIZE, IMAGE_SIZE
        )));
    }
    let plane = height * width;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let image = binio::read_f32s(r, channels * plane)?;
        let mask = binio::read_f32s(r, plane)?;
        let mut b = [0u32; 4];
        for v in b.iter_mut() {
            *v = binio::read_u32(r)?;
        }
        let bbox = BoxPrompt { x0: b[0], y0: b[1], x1: b[2], y1: b[3] };
        if bbox.x0 > bbox.x1 || bbox.y0 > bbox.y1 || bbox.x1 as usize >= width || bbox.y1 as usize >= height {
            return Err(CoreError::Format(format!("invalid box {:?}", bbox)));
        }
        out.push(Sample {
            image: Tensor::new(vec![channels, height, width], image)?,
            mask: Tensor::new(vec![1, height, width], mask)?,
            bbox,
        });
    }
    Ok(out)
}
