//! Run directory layout:
//!
//! ```text
//! run_dir/config.json
//! run_dir/metrics.csv
//! run_dir/iter_<i>/{agent.ckpt, buffer.ckpt, summaries.json, feedback.json, record.json}
//! ```
//!
//! `iter_0` holds the state right after buffer initialization. Each
//! `buffer.ckpt` stores only the entries appended in its iteration, so the
//! buffer is rebuilt by replaying the chain from `iter_0`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{IterationDetail, IterationRecord, ItersConfig};
use crate::agent::DqnAgent;
use crate::envs::EnvKind;
use crate::error::{ItersError, Result};
use crate::feedback::MarkedTrajectory;
use crate::shaping::{BufferDelta, FeedbackBuffer, RewardModel};
use crate::trajectory::Episode;

const AGENT: &str = "agent.ckpt";
const BUFFER: &str = "buffer.ckpt";

#[derive(Serialize, Deserialize)]
struct BufferCheckpoint {
    delta: BufferDelta,
    model: RewardModel,
}

pub(crate) struct Resumed {
    pub iteration: usize,
    pub agent: DqnAgent,
    pub buffer: FeedbackBuffer,
    pub model: RewardModel,
    pub details: Vec<IterationDetail>,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn ser_err(e: impl std::fmt::Display) -> ItersError {
    ItersError::Serialization(e.to_string())
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(fs::File::create(&tmp)?);
    write(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(tmp, path)?;
    Ok(())
}

fn write_bin<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| bincode::serialize_into(w, value).map_err(ser_err))
}

fn read_bin<T: DeserializeOwned>(path: &Path) -> Result<T> {
    bincode::deserialize_from(BufReader::new(fs::File::open(path)?)).map_err(ser_err)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| serde_json::to_writer_pretty(w, value).map_err(ser_err))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(fs::File::open(path)?)).map_err(ser_err)
}

impl RunDir {
    pub fn new(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn iter_dir(&self, i: usize) -> PathBuf {
        self.root.join(format!("iter_{i}"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn write_config(&self, cfg: &ItersConfig) -> Result<()> {
        write_atomic(&self.root.join("config.json"), |w| Ok(w.write_all(cfg.to_json().as_bytes())?))
    }

    pub fn write_metrics(&self, records: &[IterationRecord]) -> Result<()> {
        write_atomic(&self.metrics_path(), |w| {
            let mut out = csv::Writer::from_writer(w);
            if records.is_empty() {
                out.write_record(["iter", "marks", "cum_marks", "ret_true", "ret_env", "lane_rate", "seconds"])
                    .map_err(ser_err)?;
            }
            for r in records {
                out.serialize(r).map_err(ser_err)?;
            }
            out.flush()?;
            Ok(())
        })
    }

    pub(crate) fn save_initial(&self, agent: &DqnAgent, buffer: &FeedbackBuffer, model: &RewardModel) -> Result<()> {
        let dir = self.iter_dir(0);
        fs::create_dir_all(&dir)?;
        write_bin(
            &dir.join(BUFFER),
            &BufferCheckpoint {
                delta: buffer.delta_since(0),
                model: model.clone(),
            },
        )?;
        write_bin(&dir.join(AGENT), agent)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn save_iteration(
        &self,
        i: usize,
        agent: &DqnAgent,
        buffer: &FeedbackBuffer,
        prev_len: usize,
        model: &RewardModel,
        summaries: &[Episode],
        marks: &[MarkedTrajectory],
        detail: &IterationDetail,
    ) -> Result<()> {
        let dir = self.iter_dir(i);
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("summaries.json"), summaries)?;
        write_json(&dir.join("feedback.json"), marks)?;
        write_json(&dir.join("record.json"), detail)?;
        write_bin(
            &dir.join(BUFFER),
            &BufferCheckpoint {
                delta: buffer.delta_since(prev_len),
                model: model.clone(),
            },
        )?;
        // the agent goes last: its presence marks the iteration complete
        write_bin(&dir.join(AGENT), agent)
    }

    fn complete(&self, i: usize) -> bool {
        let dir = self.iter_dir(i);
        dir.join(AGENT).is_file() && dir.join(BUFFER).is_file()
    }

    /// The newest complete checkpoint, or `None` if the directory holds none.
    pub(crate) fn load_latest(&self, env: EnvKind, l: usize) -> Result<Option<Resumed>> {
        if !self.complete(0) {
            return Ok(None);
        }
        let mut last = 0;
        while self.complete(last + 1) {
            last += 1;
        }
        let mut buffer: Option<FeedbackBuffer> = None;
        let mut model = None;
        let mut details = Vec::with_capacity(last);
        for i in 0..=last {
            let ckpt: BufferCheckpoint = read_bin(&self.iter_dir(i).join(BUFFER))?;
            match buffer.as_mut() {
                Some(b) => b.apply_delta(ckpt.delta)?,
                None => buffer = Some(FeedbackBuffer::from_deltas(env, l, [ckpt.delta])?),
            }
            model = Some(ckpt.model);
            if i > 0 {
                details.push(read_json(&self.iter_dir(i).join("record.json"))?);
            }
        }
        let agent: DqnAgent = read_bin(&self.iter_dir(last).join(AGENT))?;
        if agent.kind() != env {
            return Err(ItersError::Serialization(format!(
                "checkpoint holds a {} agent but the run is for {env}",
                agent.kind()
            )));
        }
        Ok(Some(Resumed {
            iteration: last,
            agent,
            buffer: buffer.expect("iter_0 loaded"),
            model: model.expect("iter_0 loaded"),
            details,
        }))
    }

    pub fn summaries(&self, i: usize) -> Result<Vec<Episode>> {
        read_json(&self.iter_dir(i).join("summaries.json"))
    }

    pub fn feedback(&self, i: usize) -> Result<Vec<MarkedTrajectory>> {
        read_json(&self.iter_dir(i).join("feedback.json"))
    }
}

/// Reads an `agent.ckpt` file.
pub fn load_agent(path: impl AsRef<Path>) -> Result<DqnAgent> {
    read_bin(path.as_ref())
}

/// Reads a `metrics.csv` back into records.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<IterationRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(ser_err)?;
    r.deserialize().map(|row| row.map_err(ser_err)).collect()
}
