//! On-disk formats handed between pipeline stages.
//!
//! * Cluster cache: JSON Lines. The first line is a header object
//!   `{"format": "ucds-clusters", "version": 1, "source", "k", "records"}`;
//!   every following line is one disadvantaged user:
//!   `{"target", "members": [[user_id, importance], ...], "alpha",
//!   "iterations", "converged", "final_objective", "support_threshold"}`.
//!   Users are written by their dataset ids.
//! * Checkpoint: one JSON object holding the [`TrainConfig`] and both
//!   embedding tables as row lists.
//! * Training log: TSV with columns `epoch utility_loss fairness_loss
//!   combined_loss`.
//! * Evaluation report: pretty-printed JSON of [`EvalReport`].
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! restores every value bit for bit and reruns with the same inputs produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cds::{ConstrainedCluster, Member};
use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::fairness::{ClusterMap, ClusterSource};
use crate::recsys::{Embeddings, ModelParams, TrainConfig, TrainLog};

const CLUSTER_FORMAT: &str = "ucds-clusters";
const CHECKPOINT_FORMAT: &str = "ucds-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    source: ClusterSource,
    k: usize,
    records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    target: String,
    members: Vec<(String, f64)>,
    alpha: f64,
    iterations: usize,
    converged: bool,
    final_objective: f64,
    support_threshold: f64,
}

fn format_error(what: &'static str, message: impl Into<String>) -> Error {
    Error::Format {
        what,
        message: message.into(),
    }
}

pub fn write_cluster_cache<W: Write>(mut out: W, map: &ClusterMap, ds: &InteractionDataset) -> Result<()> {
    let ids = ds.user_ids();
    let header = CacheHeader {
        format: CLUSTER_FORMAT.into(),
        version: VERSION,
        source: map.source,
        k: map.k,
        records: map.len(),
    };
    let io = |e| Error::io("<cluster cache>", e);
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for c in map.entries.values() {
        let record = CacheRecord {
            target: ids[c.target].clone(),
            members: c.members.iter().map(|m| (ids[m.user].clone(), m.importance)).collect(),
            alpha: c.alpha,
            iterations: c.iterations,
            converged: c.converged,
            final_objective: c.final_objective,
            support_threshold: c.support_threshold,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_cluster_cache<R: BufRead>(input: R, ds: &InteractionDataset) -> Result<ClusterMap> {
    const WHAT: &str = "cluster cache";
    let index = ds.user_index();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| format_error(WHAT, format!("user {id:?} is not in the dataset")))
    };
    let mut lines = input.lines();
    let header: CacheHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line.map_err(|e| Error::io("<cluster cache>", e))?)?,
        None => return Err(format_error(WHAT, "empty file")),
    };
    if header.format != CLUSTER_FORMAT || header.version != VERSION {
        return Err(format_error(
            WHAT,
            format!("unsupported header {}/{}", header.format, header.version),
        ));
    }
    let mut entries = BTreeMap::new();
    for line in lines {
        let line = line.map_err(|e| Error::io("<cluster cache>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: CacheRecord = serde_json::from_str(&line)?;
        let target = lookup(&r.target)?;
        let members = r
            .members
            .iter()
            .map(|(id, importance)| {
                Ok(Member {
                    user: lookup(id)?,
                    importance: *importance,
                })
            })
            .collect::<Result<_>>()?;
        let cluster = ConstrainedCluster {
            target,
            members,
            support_threshold: r.support_threshold,
            converged: r.converged,
            iterations: r.iterations,
            final_objective: r.final_objective,
            alpha: r.alpha,
        };
        if entries.insert(target, cluster).is_some() {
            return Err(format_error(WHAT, format!("duplicate record for {}", r.target)));
        }
    }
    if entries.len() != header.records {
        return Err(format_error(
            WHAT,
            format!("header announces {} records, found {}", header.records, entries.len()),
        ));
    }
    ClusterMap::new(entries, header.k, header.source)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: TrainConfig,
    n_users: usize,
    n_items: usize,
    dim: usize,
    user_embeddings: Vec<Vec<f64>>,
    item_embeddings: Vec<Vec<f64>>,
}

pub fn write_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.params;
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: VERSION,
        config: ckpt.config.clone(),
        n_users: p.n_users(),
        n_items: p.n_items(),
        dim: p.dim(),
        user_embeddings: p.user_embeddings.to_rows(),
        item_embeddings: p.item_embeddings.to_rows(),
    };
    serde_json::to_writer(out, &file)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    const WHAT: &str = "checkpoint";
    let file: CheckpointFile = serde_json::from_reader(input)?;
    if file.format != CHECKPOINT_FORMAT || file.version != VERSION {
        return Err(format_error(WHAT, format!("unsupported header {}/{}", file.format, file.version)));
    }
    let users = Embeddings::from_rows(&file.user_embeddings)?;
    let items = Embeddings::from_rows(&file.item_embeddings)?;
    if users.n_rows() != file.n_users
        || items.n_rows() != file.n_items
        || users.dim() != file.dim
        || items.dim() != file.dim
    {
        return Err(format_error(WHAT, "table shapes disagree with the header"));
    }
    let params = ModelParams {
        user_embeddings: users,
        item_embeddings: items,
    };
    if !params.is_finite() {
        return Err(format_error(WHAT, "non-finite embedding entry"));
    }
    Ok(Checkpoint {
        config: file.config,
        params,
    })
}

pub fn write_train_log<W: Write>(mut out: W, log: &TrainLog) -> std::io::Result<()> {
    writeln!(out, "epoch\tutility_loss\tfairness_loss\tcombined_loss")?;
    for r in &log.records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.epoch, r.utility_loss, r.fairness_loss, r.combined_loss
        )?;
    }
    Ok(())
}

pub fn write_report<W: Write>(mut out: W, report: &EvalReport) -> Result<()> {
    let io = |e| Error::io("<report>", e);
    out.write_all(report.to_json()?.as_bytes()).map_err(io)?;
    out.write_all(b"\n").map_err(io)
}

pub fn read_report<R: Read>(input: R) -> Result<EvalReport> {
    Ok(serde_json::from_reader(input)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_cluster_cache(path: impl AsRef<Path>, map: &ClusterMap, ds: &InteractionDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_cluster_cache(&mut w, map, ds)?;
    finish(path, w)
}

pub fn load_cluster_cache(path: impl AsRef<Path>, ds: &InteractionDataset) -> Result<ClusterMap> {
    read_cluster_cache(open(path.as_ref())?, ds)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_checkpoint(&mut w, ckpt)?;
    finish(path, w)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(open(path.as_ref())?)
}

pub fn save_train_log(path: impl AsRef<Path>, log: &TrainLog) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_train_log(&mut w, log).map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

pub fn save_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_report(&mut w, report)?;
    finish(path, w)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    read_report(open(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recsys::EpochRecord;

    fn dataset() -> InteractionDataset {
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        InteractionDataset::from_pairs(ids(&["a", "b", "c"]), ids(&["x", "y", "z"]), [(0, 0), (1, 0), (1, 1), (2, 1), (2, 2)])
            .unwrap()
    }

    fn sample_map() -> ClusterMap {
        let c = ConstrainedCluster {
            target: 0,
            members: vec![
                Member {
                    user: 2,
                    importance: 0.1 + 0.2,
                },
                Member {
                    user: 1,
                    importance: 1.0 / 3.0,
                },
            ],
            support_threshold: 1e-5,
            converged: true,
            iterations: 17,
            final_objective: -0.123456789012345,
            alpha: 3.000000000000001,
        };
        ClusterMap::new(
            [(0, c), (1, ConstrainedCluster::empty(1))].into_iter().collect(),
            3,
            ClusterSource::Ucds,
        )
        .unwrap()
    }

    #[test]
    fn cluster_cache_round_trip_is_exact() {
        let ds = dataset();
        let map = sample_map();
        let mut buf = Vec::new();
        write_cluster_cache(&mut buf, &map, &ds).unwrap();
        let back = read_cluster_cache(buf.as_slice(), &ds).unwrap();
        assert_eq!(back, map);
        let mut again = Vec::new();
        write_cluster_cache(&mut again, &back, &ds).unwrap();
        assert_eq!(buf, again);
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().contains("\"target\":\"a\""));
    }

    #[test]
    fn cluster_cache_rejects_bad_input() {
        let ds = dataset();
        assert!(read_cluster_cache(&b""[..], &ds).is_err());
        let mut buf = Vec::new();
        write_cluster_cache(&mut buf, &sample_map(), &ds).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(read_cluster_cache(truncated.as_bytes(), &ds).is_err());
        let unknown = text.replace("\"target\":\"a\"", "\"target\":\"zz\"");
        assert!(read_cluster_cache(unknown.as_bytes(), &ds).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let params = ModelParams {
            user_embeddings: Embeddings::from_rows(&[vec![0.1, -1e-300], vec![std::f64::consts::PI, 2.5]]).unwrap(),
            item_embeddings: Embeddings::from_rows(&[vec![1.0 / 3.0, 7e22]]).unwrap(),
        };
        let ckpt = Checkpoint {
            config: TrainConfig::default(),
            params,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), ckpt);
        assert!(read_checkpoint(&b"{}"[..]).is_err());
    }

    #[test]
    fn train_log_columns() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 1,
                utility_loss: 0.5,
                fairness_loss: 0.25,
                combined_loss: 0.5000025,
            }],
        };
        let mut buf = Vec::new();
        write_train_log(&mut buf, &log).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch\tutility_loss\tfairness_loss\tcombined_loss\n1\t0.5\t0.25\t0.5000025\n"
        );
    }
}
