use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Channel, Recording, SegmentId, SpeechSegment, SplitAssignment, Word};
use crate::binio;
use crate::error::{Error, Result};
use crate::speech_features::{load_external_features, AUDIO_RATE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRates {
    pub brain: f64,
    pub audio: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub sample_rates: SampleRates,
    pub channel_count: usize,
    pub subjects: Vec<usize>,
    /// `external` when `features/` holds precomputed targets, else `none`.
    pub feature_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingSidecar {
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub sample_rate: f64,
    pub channel_names: Vec<String>,
    pub positions: Vec<[f64; 2]>,
    pub subject_id: usize,
    pub run: String,
}

/// One row of `events/<subject>_<run>.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub onset_s: f64,
    pub duration_s: f64,
    pub word: String,
    /// Set on the word that anchors a segment window, empty otherwise.
    pub segment_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordRecord {
    pub onset_s: f64,
    pub duration_s: f64,
    pub word: String,
}

/// One entry of `segments.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment_id: u64,
    pub source: String,
    pub source_start_s: f64,
    pub duration_s: f64,
    pub words: Vec<WordRecord>,
}

impl From<&SpeechSegment> for SegmentRecord {
    fn from(s: &SpeechSegment) -> Self {
        SegmentRecord {
            segment_id: s.id.0,
            source: s.source.clone(),
            source_start_s: s.source_start_s,
            duration_s: s.duration_s,
            words: s
                .words
                .iter()
                .map(|w| WordRecord {
                    onset_s: w.onset_s,
                    duration_s: w.duration_s,
                    word: w.text.clone(),
                })
                .collect(),
        }
    }
}

impl From<SegmentRecord> for SpeechSegment {
    fn from(r: SegmentRecord) -> Self {
        SpeechSegment {
            id: SegmentId(r.segment_id),
            source: r.source,
            source_start_s: r.source_start_s,
            duration_s: r.duration_s,
            words: r
                .words
                .into_iter()
                .map(|w| Word {
                    onset_s: w.onset_s,
                    duration_s: w.duration_s,
                    text: w.word,
                })
                .collect(),
        }
    }
}

/// A dataset in the interchange format, fully loaded except audio and
/// feature blobs, which are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub recordings: Vec<Recording>,
    /// Events per recording, same order as `recordings`.
    pub events: Vec<Vec<EventRow>>,
    pub segments: BTreeMap<SegmentId, SpeechSegment>,
    pub splits: Option<SplitAssignment>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest: Manifest = binio::read_json(&root.join("manifest.json"))?;
        let rec_dir = root.join("recordings");
        let mut stems: Vec<String> = fs::read_dir(&rec_dir)
            .map_err(|e| Error::io(&rec_dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension().and_then(|x| x.to_str()) == Some("bin"))
                    .then(|| p.file_stem().and_then(|s| s.to_str()).map(String::from))
                    .flatten()
            })
            .collect();
        stems.sort();
        if stems.is_empty() {
            return Err(Error::format(&rec_dir, "no recordings found"));
        }

        let mut recordings = Vec::new();
        let mut events = Vec::new();
        for stem in &stems {
            let bin = rec_dir.join(format!("{stem}.bin"));
            let side: RecordingSidecar = binio::read_json(&binio::sidecar(&bin))?;
            if side.channel_names.len() != side.c || side.positions.len() != side.c {
                return Err(Error::format(
                    binio::sidecar(&bin),
                    format!("C = {} but {} names and {} positions", side.c, side.channel_names.len(), side.positions.len()),
                ));
            }
            let data = binio::read_f32(&bin, side.c * side.t)?;
            let channels = side
                .channel_names
                .iter()
                .zip(&side.positions)
                .map(|(n, p)| Channel {
                    name: n.clone(),
                    x: p[0],
                    y: p[1],
                })
                .collect();
            let signal = Tensor::from_vec(&[side.c, side.t], data)?;
            let rec = Recording::new(side.subject_id, side.run.clone(), channels, signal, side.sample_rate)
                .map_err(|e| Error::format(&bin, e.to_string()))?;
            if rec.stem() != *stem {
                return Err(Error::format(&bin, format!("sidecar names subject/run `{}`", rec.stem())));
            }
            let ev_path = root.join("events").join(format!("{stem}.csv"));
            events.push(read_events(&ev_path)?);
            recordings.push(rec);
        }

        let seg_path = root.join("segments.json");
        let records: Vec<SegmentRecord> = binio::read_json(&seg_path)?;
        let mut segments = BTreeMap::new();
        for r in records {
            let s = SpeechSegment::from(r);
            s.validate().map_err(|e| Error::format(&seg_path, e.to_string()))?;
            if segments.insert(s.id, s).is_some() {
                return Err(Error::format(&seg_path, "duplicate segment_id"));
            }
        }
        for (rec, evs) in recordings.iter().zip(&events) {
            for e in evs {
                if let Some(id) = e.segment_id {
                    if !segments.contains_key(&SegmentId(id)) {
                        return Err(Error::format(
                            root.join("events").join(format!("{}.csv", rec.stem())),
                            format!("unknown segment_id {id}"),
                        ));
                    }
                }
            }
        }

        let split_path = root.join("splits.json");
        let splits = if split_path.exists() {
            Some(binio::read_json(&split_path)?)
        } else {
            None
        };

        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            recordings,
            events,
            segments,
            splits,
        })
    }

    /// Writes everything except audio and feature blobs under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        binio::write_json(&root.join("manifest.json"), &self.manifest)?;
        for (rec, evs) in self.recordings.iter().zip(&self.events) {
            let bin = root.join("recordings").join(format!("{}.bin", rec.stem()));
            binio::write_f32(&bin, rec.signal.data())?;
            binio::write_json(
                &binio::sidecar(&bin),
                &RecordingSidecar {
                    c: rec.n_channels(),
                    t: rec.n_samples(),
                    sample_rate: rec.sample_rate,
                    channel_names: rec.channels.iter().map(|c| c.name.clone()).collect(),
                    positions: rec.channels.iter().map(|c| [c.x, c.y]).collect(),
                    subject_id: rec.subject_id,
                    run: rec.run.clone(),
                },
            )?;
            write_events(&root.join("events").join(format!("{}.csv", rec.stem())), evs)?;
        }
        let records: Vec<SegmentRecord> = self.segments.values().map(SegmentRecord::from).collect();
        binio::write_json(&root.join("segments.json"), &records)?;
        if let Some(s) = &self.splits {
            binio::write_json(&root.join("splits.json"), s)?;
        }
        Ok(())
    }

    pub fn audio_path(&self, id: SegmentId) -> PathBuf {
        self.root.join("audio").join(format!("{id}.wav"))
    }

    pub fn feature_path(&self, id: SegmentId) -> PathBuf {
        self.root.join("features").join(format!("{id}.bin"))
    }

    pub fn has_features(&self) -> bool {
        self.manifest.feature_kind == "external"
    }

    /// Checks every referenced blob: feature files, audio files, channel
    /// counts against the manifest. Returns a short summary.
    pub fn validate(&self) -> Result<IngestSummary> {
        let mut subjects = BTreeSet::new();
        for rec in &self.recordings {
            if rec.n_channels() != self.manifest.channel_count {
                return Err(Error::format(
                    self.root.join("recordings").join(format!("{}.json", rec.stem())),
                    format!("{} channels, manifest says {}", rec.n_channels(), self.manifest.channel_count),
                ));
            }
            subjects.insert(rec.subject_id);
        }
        let listed: BTreeSet<usize> = self.manifest.subjects.iter().copied().collect();
        if listed != subjects {
            return Err(Error::format(
                self.root.join("manifest.json"),
                format!("subject list {listed:?} does not match recordings {subjects:?}"),
            ));
        }
        let mut features = 0;
        let mut audio = 0;
        for &id in self.segments.keys() {
            if self.has_features() {
                let (f, _) = load_external_features(&self.feature_path(id))?;
                if let Some(dim) = self.manifest.feature_dim {
                    if f.shape()[0] != dim {
                        return Err(Error::format(
                            self.feature_path(id),
                            format!("F = {}, manifest says {dim}", f.shape()[0]),
                        ));
                    }
                }
                features += 1;
            }
            let wav = self.audio_path(id);
            if wav.exists() {
                read_wav(&wav)?;
                audio += 1;
            }
        }
        Ok(IngestSummary {
            recordings: self.recordings.len(),
            subjects: subjects.len(),
            segments: self.segments.len(),
            events: self.events.iter().map(Vec::len).sum(),
            feature_files: features,
            audio_files: audio,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub recordings: usize,
    pub subjects: usize,
    pub segments: usize,
    pub events: usize,
    pub feature_files: usize,
    pub audio_files: usize,
}

pub fn read_events(path: &Path) -> Result<Vec<EventRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = rdr.headers()?.clone();
    let want = ["onset_s", "duration_s", "word", "segment_id"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::format(path, format!("header must be {}", want.join(","))));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn write_events(path: &Path, rows: &[EventRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["onset_s", "duration_s", "word", "segment_id"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::State(e.to_string()))?;
    binio::write_atomic(path, &bytes)
}

/// Reads 16 kHz mono 16-bit PCM as samples in `[−1, 1)`.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_rate != AUDIO_RATE || spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            format!(
                "need {AUDIO_RATE} Hz mono 16-bit PCM, found {} Hz, {} channel(s), {} bits",
                spec.sample_rate, spec.channels, spec.bits_per_sample
            ),
        ));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: AUDIO_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec)?;
        for &s in samples {
            w.write_sample((s.clamp(-1.0, 32767.0 / 32768.0) * 32768.0).round() as i16)?;
        }
        w.finalize()?;
    }
    binio::write_atomic(path, &cursor.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_round_trip_with_empty_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let rows = vec![
            EventRow {
                onset_s: 1.5,
                duration_s: 0.25,
                word: "thank".into(),
                segment_id: Some(4),
            },
            EventRow {
                onset_s: 2.0,
                duration_s: 0.2,
                word: "you".into(),
                segment_id: None,
            },
        ];
        write_events(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("onset_s,duration_s,word,segment_id\n"));
        assert_eq!(read_events(&p).unwrap(), rows);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.01).sin() * 0.5).collect();
        write_wav(&p, &x).unwrap();
        let y = read_wav(&p).unwrap();
        assert_eq!(y.len(), 1000);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1.0 / 32768.0));
    }
}
