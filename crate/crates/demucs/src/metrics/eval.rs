//! Framewise track evaluation and SiSec-style aggregation: metrics per
//! non-overlapping frame per source, median over frames per track, median
//! over tracks per source, and an "All" column that concatenates the
//! per-track medians of every source before taking the median.

use serde::Serialize;

use crate::audio::{SourceSet, SOURCE_NAMES};

use super::{bss_eval, MetricsError, Result};

/// SDR/SIR/SAR of one evaluation frame, in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// Framewise metrics of one track; `None` marks frames skipped because the
/// reference source was digitally silent there.
#[derive(Debug, Clone)]
pub struct TrackEval {
    pub name: String,
    pub frame_s: f64,
    /// `frames[source][frame]`
    pub frames: [Vec<Option<FrameMetrics>>; 4],
}

/// Evaluate estimated stems against references on non-overlapping frames of
/// `frame_s` seconds (the trailing partial frame is dropped). Frames whose
/// reference source is all-zero are recorded as skipped.
pub fn evaluate_track(name: &str, est: &SourceSet, reference: &SourceSet, frame_s: f64) -> Result<TrackEval> {
    if est.channels() != reference.channels() || est.frames() != reference.frames() {
        return Err(MetricsError::Shape(format!(
            "estimate {}x{} vs reference {}x{}",
            est.channels(),
            est.frames(),
            reference.channels(),
            reference.frames()
        )));
    }
    assert!(frame_s > 0.0);
    let frame_len = (frame_s * reference.sample_rate() as f64).round() as usize;
    let n_frames = reference.frames() / frame_len.max(1);

    let per_frame: Vec<[Option<FrameMetrics>; 4]> = crate::par::map_indexed(n_frames, |f| {
        let (a, b) = (f * frame_len, (f + 1) * frame_len);
        let ref_frame = reference.slice_frames(a, b);
        let est_frame = est.slice_frames(a, b);
        let refs = [
            ref_frame.source(0),
            ref_frame.source(1),
            ref_frame.source(2),
            ref_frame.source(3),
        ];
        std::array::from_fn(|j| {
            if refs[j].energy() <= 0.0 {
                return None; // silent reference: skip, do not score
            }
            bss_eval(est_frame.source(j), &refs, j)
                .ok()
                .map(|d| FrameMetrics { sdr: d.sdr, sir: d.sir, sar: d.sar })
        })
    });

    let mut frames: [Vec<Option<FrameMetrics>>; 4] = Default::default();
    for row in per_frame {
        for (j, m) in row.into_iter().enumerate() {
            frames[j].push(m);
        }
    }
    Ok(TrackEval { name: name.to_string(), frame_s, frames })
}

/// Median with the even-count convention mean-of-middle-pair. Empty input
/// yields `None`.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

fn median_metrics(frames: &[Option<FrameMetrics>]) -> Option<FrameMetrics> {
    let present: Vec<&FrameMetrics> = frames.iter().flatten().collect();
    if present.is_empty() {
        return None;
    }
    let take = |f: fn(&FrameMetrics) -> f64| median(&present.iter().map(|m| f(m)).collect::<Vec<_>>()).unwrap();
    Some(FrameMetrics {
        sdr: take(|m| m.sdr),
        sir: take(|m| m.sir),
        sar: take(|m| m.sar),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SourceFrames {
    pub source: String,
    pub frames: Vec<Option<FrameMetrics>>,
    pub median: Option<FrameMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrackReport {
    pub name: String,
    pub sources: Vec<SourceFrames>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SourceAggregate {
    pub source: String,
    pub tracks_scored: usize,
    pub sdr: Option<f64>,
    pub sir: Option<f64>,
    pub sar: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    /// Per-source median over tracks of the per-track frame medians.
    pub sources: Vec<SourceAggregate>,
    /// Median of the concatenation of every source's per-track medians.
    pub all_sdr: Option<f64>,
    pub all_sir: Option<f64>,
    pub all_sar: Option<f64>,
}

/// The full evaluation document; serialized field order is fixed so reports
/// diff cleanly.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub version: u32,
    pub frame_seconds: f64,
    pub aggregate: AggregateReport,
    pub tracks: Vec<TrackReport>,
}

/// Median-of-medians aggregation over per-track framewise metrics.
pub fn aggregate(tracks: &[TrackEval]) -> Result<EvalReport> {
    if tracks.is_empty() {
        return Err(MetricsError::Shape("aggregate needs at least one track".into()));
    }
    let frame_seconds = tracks[0].frame_s;

    let mut track_reports = Vec::with_capacity(tracks.len());
    // track_medians[source] = vec of per-track medians (tracks with no scored
    // frames for that source are absent)
    let mut track_medians: [Vec<FrameMetrics>; 4] = Default::default();
    for t in tracks {
        let mut sources = Vec::with_capacity(4);
        for (j, name) in SOURCE_NAMES.iter().enumerate() {
            let med = median_metrics(&t.frames[j]);
            if let Some(m) = med {
                track_medians[j].push(m);
            }
            sources.push(SourceFrames {
                source: name.to_string(),
                frames: t.frames[j].clone(),
                median: med,
            });
        }
        track_reports.push(TrackReport { name: t.name.clone(), sources });
    }

    let mut per_source = Vec::with_capacity(4);
    for (j, name) in SOURCE_NAMES.iter().enumerate() {
        let meds = &track_medians[j];
        per_source.push(SourceAggregate {
            source: name.to_string(),
            tracks_scored: meds.len(),
            sdr: median(&meds.iter().map(|m| m.sdr).collect::<Vec<_>>()),
            sir: median(&meds.iter().map(|m| m.sir).collect::<Vec<_>>()),
            sar: median(&meds.iter().map(|m| m.sar).collect::<Vec<_>>()),
        });
    }

    // "All": concatenate per-track medians across sources, then take the median
    let concat = |f: fn(&FrameMetrics) -> f64| -> Option<f64> {
        let pool: Vec<f64> = track_medians.iter().flatten().map(f).collect();
        median(&pool)
    };

    Ok(EvalReport {
        version: 1,
        frame_seconds,
        aggregate: AggregateReport {
            sources: per_source,
            all_sdr: concat(|m| m.sdr),
            all_sir: concat(|m| m.sir),
            all_sar: concat(|m| m.sar),
        },
        tracks: track_reports,
    })
}

impl EvalReport {
    /// Stable-key JSON rendering of the report.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Waveform;
    use crate::metrics::DB_CAP;

    fn tone(freq: f64, amp: f32, frames: usize, rate: u32) -> Waveform {
        let data: Vec<f32> = (0..frames)
            .map(|t| (2.0 * std::f64::consts::PI * freq * t as f64 / rate as f64).sin() as f32 * amp)
            .collect();
        Waveform::new(data, 1, rate)
    }

    fn fixture_set(frames: usize, rate: u32) -> SourceSet {
        SourceSet::new([
            tone(100.0, 0.2, frames, rate),
            tone(220.0, 0.2, frames, rate),
            tone(330.0, 0.2, frames, rate),
            tone(440.0, 0.2, frames, rate),
        ])
    }

    #[test]
    fn perfect_estimate_caps_all_frames() {
        let set = fixture_set(8000 * 3, 8000);
        let eval = evaluate_track("t", &set, &set, 1.0).unwrap();
        for j in 0..4 {
            assert_eq!(eval.frames[j].len(), 3);
            for m in eval.frames[j].iter().flatten() {
                assert_eq!(m.sdr, DB_CAP);
            }
        }
    }

    #[test]
    fn ten_second_track_makes_ten_frames() {
        let set = fixture_set(8000 * 10, 8000);
        let eval = evaluate_track("t", &set, &set, 1.0).unwrap();
        assert_eq!(eval.frames[0].len(), 10);
    }

    #[test]
    fn silent_reference_frame_is_skipped() {
        let rate = 8000;
        let mut drums = tone(100.0, 0.2, rate as usize * 3, rate);
        // silence the middle second of the drums reference
        for v in &mut drums.channel_mut(0)[rate as usize..2 * rate as usize] {
            *v = 0.0;
        }
        let reference = SourceSet::new([
            drums,
            tone(220.0, 0.2, rate as usize * 3, rate),
            tone(330.0, 0.2, rate as usize * 3, rate),
            tone(440.0, 0.2, rate as usize * 3, rate),
        ]);
        let eval = evaluate_track("t", &reference, &reference, 1.0).unwrap();
        assert!(eval.frames[0][0].is_some());
        assert!(eval.frames[0][1].is_none(), "silent drums frame must be skipped");
        assert!(eval.frames[0][2].is_some());
        assert!(eval.frames[1].iter().all(Option::is_some));
    }

    fn manual_track(name: &str, per_source_frames: [Vec<f64>; 4]) -> TrackEval {
        TrackEval {
            name: name.into(),
            frame_s: 1.0,
            frames: std::array::from_fn(|j| {
                per_source_frames[j]
                    .iter()
                    .map(|&v| Some(FrameMetrics { sdr: v, sir: v, sar: v }))
                    .collect()
            }),
        }
    }

    #[test]
    fn single_track_median() {
        let t = manual_track("a", [vec![3.0, 5.0, 7.0], vec![5.0], vec![5.0], vec![5.0]]);
        let report = aggregate(&[t]).unwrap();
        assert_eq!(report.aggregate.sources[0].sdr, Some(5.0));
    }

    #[test]
    fn even_count_median_is_middle_mean() {
        let a = manual_track("a", [vec![4.0], vec![4.0], vec![4.0], vec![4.0]]);
        let b = manual_track("b", [vec![6.0], vec![6.0], vec![6.0], vec![6.0]]);
        let report = aggregate(&[a, b]).unwrap();
        assert_eq!(report.aggregate.sources[0].sdr, Some(5.0));
    }

    #[test]
    fn all_column_concatenates_sources() {
        // two sources with track medians {4, 6} and {1, 9}; the rest empty.
        // hand-applied rule: median of {4, 6, 1, 9} = 5
        let a = TrackEval {
            name: "a".into(),
            frame_s: 1.0,
            frames: [
                vec![Some(FrameMetrics { sdr: 4.0, sir: 4.0, sar: 4.0 })],
                vec![Some(FrameMetrics { sdr: 1.0, sir: 1.0, sar: 1.0 })],
                vec![None],
                vec![None],
            ],
        };
        let b = TrackEval {
            name: "b".into(),
            frame_s: 1.0,
            frames: [
                vec![Some(FrameMetrics { sdr: 6.0, sir: 6.0, sar: 6.0 })],
                vec![Some(FrameMetrics { sdr: 9.0, sir: 9.0, sar: 9.0 })],
                vec![None],
                vec![None],
            ],
        };
        let report = aggregate(&[a, b]).unwrap();
        assert_eq!(report.aggregate.all_sdr, Some(5.0));
        assert_eq!(report.aggregate.sources[2].sdr, None);
    }

    #[test]
    fn empty_aggregate_is_error() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_json_is_stable() {
        let t = manual_track("a", [vec![3.0], vec![3.0], vec![3.0], vec![3.0]]);
        let r1 = aggregate(std::slice::from_ref(&t)).unwrap().to_json();
        let r2 = aggregate(&[t]).unwrap().to_json();
        assert_eq!(r1, r2);
        assert!(r1.contains("\"version\": 1"));
        assert!(r1.find("\"aggregate\"").unwrap() < r1.find("\"tracks\"").unwrap());
    }
}
