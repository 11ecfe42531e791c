//! JSON Lines replay files: one record per segment, written by
//! [`CachingProvider`] and read back by [`ReplayProvider`].

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::model::{ObservationScores, ProgressDistribution};

use super::{ObservationProvider, ProviderError, SegmentObservation, SegmentRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub t: usize,
    pub vsg: ObservationScores,
    pub progress: Vec<ProgressDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<ObservationScores>,
}

impl ReplayRecord {
    pub fn from_observation(t: usize, obs: &SegmentObservation) -> Self {
        Self {
            t,
            vsg: obs.vsg.clone(),
            progress: obs.progress.clone(),
            next: obs.next.clone(),
        }
    }

    pub fn into_observation(self) -> SegmentObservation {
        SegmentObservation {
            vsg: self.vsg,
            progress: self.progress,
            next: self.next,
        }
    }
}

fn corrupt(path: &Path, line: usize, reason: impl Into<String>) -> ProviderError {
    ProviderError::CorruptReplayFile {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ProviderError {
    ProviderError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses a replay file. With `tolerate_torn_tail` a final line lacking its
/// newline (an interrupted append) is dropped and its byte offset returned;
/// otherwise it is a corruption error.
fn parse_records(
    path: &Path,
    bytes: &[u8],
    tolerate_torn_tail: bool,
) -> Result<(BTreeMap<usize, ReplayRecord>, usize), ProviderError> {
    let mut records = BTreeMap::new();
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            if tolerate_torn_tail {
                warn!("{}: dropping torn final record", path.display());
                return Ok((records, offset));
            }
            return Err(corrupt(path, line_no, "truncated record (missing newline)"));
        };
        let line = &rest[..end];
        offset += end + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let record: ReplayRecord =
            serde_json::from_slice(line).map_err(|e| corrupt(path, line_no, e.to_string()))?;
        if records.insert(record.t, record).is_some() {
            return Err(corrupt(path, line_no, "duplicate segment index"));
        }
    }
    Ok((records, offset))
}

fn check_shape(path: &Path, records: &BTreeMap<usize, ReplayRecord>) -> Result<(), ProviderError> {
    let mut shape = None;
    for record in records.values() {
        let this = (record.vsg.len(), record.progress.len());
        if record
            .progress
            .iter()
            .any(|p| p.len() != crate::model::PROGRESS_LEVELS)
        {
            return Err(corrupt(
                path,
                record.t + 1,
                "progress rows must have 10 entries",
            ));
        }
        if this.0 != this.1 + 1 {
            return Err(corrupt(path, record.t + 1, "vsg length must be steps + 1"));
        }
        match shape {
            None => shape = Some(this),
            Some(s) if s != this => {
                return Err(corrupt(path, record.t + 1, "inconsistent record widths"))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Reads a complete replay file strictly.
pub fn read_replay_file(path: &Path) -> Result<BTreeMap<usize, ReplayRecord>, ProviderError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (records, _) = parse_records(path, &bytes, false)?;
    check_shape(path, &records)?;
    Ok(records)
}

/// Serves segments from replay files, one per video.
#[derive(Debug, Default)]
pub struct ReplayProvider {
    videos: HashMap<String, BTreeMap<usize, ReplayRecord>>,
}

impl ReplayProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Single-video provider backed by `path`.
    pub fn open(video_id: &str, path: &Path) -> Result<Self, ProviderError> {
        let mut provider = Self::new();
        provider.add_video(video_id, path)?;
        Ok(provider)
    }

    pub fn add_video(&mut self, video_id: &str, path: &Path) -> Result<(), ProviderError> {
        let records = read_replay_file(path)?;
        self.videos.insert(video_id.to_string(), records);
        Ok(())
    }

    /// Number of segments stored for a video.
    pub fn num_segments(&self, video_id: &str) -> Option<usize> {
        self.videos.get(video_id).map(BTreeMap::len)
    }

    fn record(&self, req: &SegmentRequest<'_>) -> Result<&ReplayRecord, ProviderError> {
        let record = self
            .videos
            .get(req.video_id)
            .and_then(|v| v.get(&req.segment))
            .ok_or_else(|| ProviderError::MissingObservation {
                video_id: req.video_id.to_string(),
                segment: req.segment,
            })?;
        if record.vsg.len() != req.task.num_states() {
            return Err(ProviderError::MalformedResponse {
                raw: format!(
                    "replay record {} has {} classes, task has {}",
                    req.segment,
                    record.vsg.len(),
                    req.task.num_states()
                ),
            });
        }
        Ok(record)
    }
}

impl ObservationProvider for ReplayProvider {
    fn vsg_scores(&self, req: &SegmentRequest<'_>) -> Result<ObservationScores, ProviderError> {
        Ok(self.record(req)?.vsg.clone())
    }

    fn progress_scores(
        &self,
        req: &SegmentRequest<'_>,
        step: usize,
    ) -> Result<ProgressDistribution, ProviderError> {
        Ok(self.record(req)?.progress[step].clone())
    }

    fn next_step_scores(
        &self,
        req: &SegmentRequest<'_>,
    ) -> Result<Option<ObservationScores>, ProviderError> {
        Ok(self.record(req)?.next.clone())
    }

    fn observe(
        &self,
        req: &SegmentRequest<'_>,
        _want_next: bool,
    ) -> Result<SegmentObservation, ProviderError> {
        Ok(self.record(req)?.clone().into_observation())
    }
}

struct VideoCache {
    records: BTreeMap<usize, ReplayRecord>,
    writer: BufWriter<File>,
    path: PathBuf,
}

impl VideoCache {
    fn open(path: PathBuf) -> Result<Self, ProviderError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let mut records = BTreeMap::new();
        if path.exists() {
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            let (parsed, valid_len) = parse_records(&path, &bytes, true)?;
            check_shape(&path, &parsed)?;
            if valid_len < bytes.len() {
                let file = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(|e| io_err(&path, e))?;
                file.set_len(valid_len as u64)
                    .map_err(|e| io_err(&path, e))?;
            }
            debug!(
                "{}: resuming with {} cached segments",
                path.display(),
                parsed.len()
            );
            records = parsed;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        Ok(Self {
            records,
            writer: BufWriter::new(file),
            path,
        })
    }

    fn append(&mut self, record: ReplayRecord) -> Result<(), ProviderError> {
        let mut line = serde_json::to_vec(&record).expect("replay records serialize");
        line.push(b'\n');
        self.writer
            .write_all(&line)
            .and_then(|_| self.writer.flush())
            .map_err(|e| io_err(&self.path, e))?;
        self.records.insert(record.t, record);
        Ok(())
    }
}

/// Wraps a provider and records every segment it serves to
/// `<dir>/<video_id>.jsonl`. Segments already present in the file are
/// served from it, so an interrupted run resumes where it stopped.
pub struct CachingProvider<P> {
    inner: P,
    dir: PathBuf,
    videos: Mutex<HashMap<String, Arc<Mutex<VideoCache>>>>,
}

impl<P: ObservationProvider> CachingProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            videos: Mutex::new(HashMap::new()),
        }
    }

    pub fn cache_path(&self, video_id: &str) -> PathBuf {
        self.dir.join(format!("{video_id}.jsonl"))
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn video(&self, video_id: &str) -> Result<Arc<Mutex<VideoCache>>, ProviderError> {
        let mut videos = self.videos.lock().unwrap();
        if let Some(cache) = videos.get(video_id) {
            return Ok(cache.clone());
        }
        let cache = Arc::new(Mutex::new(VideoCache::open(self.cache_path(video_id))?));
        videos.insert(video_id.to_string(), cache.clone());
        Ok(cache)
    }
}

impl<P: ObservationProvider> ObservationProvider for CachingProvider<P> {
    fn vsg_scores(&self, req: &SegmentRequest<'_>) -> Result<ObservationScores, ProviderError> {
        Ok(self.observe(req, false)?.vsg)
    }

    fn progress_scores(
        &self,
        req: &SegmentRequest<'_>,
        step: usize,
    ) -> Result<ProgressDistribution, ProviderError> {
        Ok(self.observe(req, false)?.progress[step].clone())
    }

    fn next_step_scores(
        &self,
        req: &SegmentRequest<'_>,
    ) -> Result<Option<ObservationScores>, ProviderError> {
        Ok(self.observe(req, true)?.next)
    }

    fn observe(
        &self,
        req: &SegmentRequest<'_>,
        want_next: bool,
    ) -> Result<SegmentObservation, ProviderError> {
        let cache = self.video(req.video_id)?;
        let mut cache = cache.lock().unwrap();
        if let Some(record) = cache.records.get(&req.segment) {
            if !want_next || record.next.is_some() {
                return Ok(record.clone().into_observation());
            }
        }
        let obs = self.inner.observe(req, want_next)?;
        if cache.records.contains_key(&req.segment) {
            // Cached without next-step scores; keep the earlier record.
            let mut merged = cache.records[&req.segment].clone();
            merged.next = obs.next.clone();
            cache.records.insert(req.segment, merged.clone());
            return Ok(merged.into_observation());
        }
        cache.append(ReplayRecord::from_observation(req.segment, &obs))?;
        Ok(obs)
    }
}
