//! Harvesting silent-source excerpts from unlabeled audio.
//!
//! Calibration picks, per source, the lowest detector-probability threshold
//! p_i such that at least 95% of calibration windows scoring above it are
//! truly quiet (relative volume at or below -20 dB). Extraction then keeps
//! maximal runs of consecutive windows with probability >= p_i, converts
//! them to sample ranges at the original rate, and writes every run of at
//! least five seconds into the per-source excerpt sets D_i together with a
//! tab-separated manifest.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio::{read_wav, write_wav, AudioError, TrackDataset, WavEncoding, Waveform, SOURCE_NAMES};
use crate::detector::{
    detect_track, prepare_track, window_volumes, DetectorConfig, DetectorError, DetectorModel,
    ScatteringPlan, SILENCE_THRESHOLD_DB,
};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ExtractError>;

/// Calibration rule constants.
#[derive(Debug, Clone)]
pub struct CalibrationSettings {
    /// Required fraction of qualifying windows that are truly quiet.
    pub precision_target: f64,
    /// "Truly quiet" bound on the window relative volume, dB.
    pub volume_limit_db: f64,
    /// Minimum number of windows above the threshold for it to count.
    pub min_qualifying: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings { precision_target: 0.95, volume_limit_db: -20.0, min_qualifying: 50 }
    }
}

/// Per-source probability thresholds with the precision they achieved on the
/// calibration set. A source with no admissible threshold stays `None` and
/// is excluded from extraction.
#[derive(Debug, Clone)]
pub struct ThresholdCalibration {
    pub thresholds: [Option<f64>; 4],
    pub precision: [Option<f64>; 4],
    pub qualifying: [usize; 4],
    pub total_windows: usize,
    pub settings_volume_limit_db: f64,
    pub settings_precision_target: f64,
}

/// Calibrate thresholds on a labeled dataset: per source, sweep the detector
/// scores in descending order and keep the lowest cut for which every higher
/// cut with enough support stays at or above the precision target.
pub fn calibrate_thresholds(
    detector: &DetectorModel,
    calib_set: &TrackDataset,
    settings: &CalibrationSettings,
) -> Result<ThresholdCalibration> {
    if calib_set.is_empty() {
        return Err(ExtractError::Contract("calibration set is empty".into()));
    }
    let plan = ScatteringPlan::default();

    // (probability, true_volume_db) per source over all tracks and steps
    let mut samples: [Vec<(f64, f64)>; 4] = Default::default();
    let mut total_windows = 0usize;
    for i in 0..calib_set.len() {
        let set = calib_set.load_track(i)?;
        let prepared = prepare_track(&set, &plan, SILENCE_THRESHOLD_DB)?;
        let probs = detector.probabilities(&prepared.feats)?;
        let volumes = window_volumes(&set, &plan);
        total_windows += probs.len();
        for (u, p) in probs.iter().enumerate() {
            let w = DetectorConfig::time_map(u).min(volumes.len().saturating_sub(1));
            for s in 0..4 {
                samples[s].push((p[s] as f64, volumes[w][s].db()));
            }
        }
    }

    let mut thresholds = [None; 4];
    let mut precision = [None; 4];
    let mut qualifying = [0usize; 4];
    for s in 0..4 {
        if let Some((cut, prec, count)) = sweep_threshold(std::mem::take(&mut samples[s]), settings) {
            thresholds[s] = Some(cut);
            precision[s] = Some(prec);
            qualifying[s] = count;
        }
    }
    Ok(ThresholdCalibration {
        thresholds,
        precision,
        qualifying,
        total_windows,
        settings_volume_limit_db: settings.volume_limit_db,
        settings_precision_target: settings.precision_target,
    })
}

/// Sweep `(probability, true_volume_db)` rows for the lowest admissible cut:
/// every cut at or above it with at least `min_qualifying` supporting windows
/// must reach the precision target. Returns `(threshold, precision, count)`.
pub fn sweep_threshold(
    mut rows: Vec<(f64, f64)>,
    settings: &CalibrationSettings,
) -> Option<(f64, f64, usize)> {
    rows.sort_by(|a, b| b.0.total_cmp(&a.0)); // descending probability
    let mut hits = 0usize;
    let mut best: Option<(f64, f64, usize)> = None;
    let mut idx = 0usize;
    while idx < rows.len() {
        // advance over ties so cuts sit at distinct probabilities
        let cut = rows[idx].0;
        while idx < rows.len() && rows[idx].0 == cut {
            if rows[idx].1 <= settings.volume_limit_db {
                hits += 1;
            }
            idx += 1;
        }
        let count = idx;
        if count < settings.min_qualifying {
            continue;
        }
        let prec = hits as f64 / count as f64;
        if prec >= settings.precision_target {
            best = Some((cut, prec, count));
        } else {
            break; // a higher cut failed: lower cuts are not admissible
        }
    }
    best
}

/// Minimum excerpt duration, seconds.
pub const MIN_EXCERPT_S: f64 = 5.0;

/// One harvested excerpt: `source` was detected silent over the whole span.
#[derive(Debug, Clone)]
pub struct SilentExcerpt {
    pub source: usize,
    pub track_id: String,
    /// Sample range at the original rate.
    pub start_sample: usize,
    pub end_sample: usize,
    pub mean_probability: f64,
    pub audio: Waveform,
}

impl SilentExcerpt {
    pub fn duration_s(&self) -> f64 {
        (self.end_sample - self.start_sample) as f64 / self.audio.sample_rate() as f64
    }
}

/// Extract all qualifying runs from one mixture track (at its original rate
/// and channel count). Sources without a calibrated threshold are skipped
/// with a note on stderr.
pub fn extract_silent_segments(
    detector: &DetectorModel,
    thresholds: &ThresholdCalibration,
    mixture: &Waveform,
    track_id: &str,
) -> Result<Vec<SilentExcerpt>> {
    let plan = ScatteringPlan::default();
    let probs = detect_track(detector, mixture)?;
    let sr = mixture.sample_rate() as u64;
    let fr = plan.sample_rate as u64;
    let (win16, hop16) = (plan.window_len() as u64, plan.hop_len() as u64);

    let mut out = Vec::new();
    for s in 0..4 {
        let Some(p_i) = thresholds.thresholds[s] else {
            eprintln!("extract: no calibrated threshold for {}, skipping", SOURCE_NAMES[s]);
            continue;
        };
        let mut u = 0usize;
        while u < probs.len() {
            if (probs[u][s] as f64) < p_i {
                u += 1;
                continue;
            }
            let run_start = u;
            while u < probs.len() && (probs[u][s] as f64) >= p_i {
                u += 1;
            }
            let run_end = u - 1; // inclusive
            // span: start of the first covered window to the end of the last
            let w_a = DetectorConfig::time_map(run_start) as u64;
            let w_b = DetectorConfig::time_map(run_end) as u64;
            let start16 = w_a * hop16;
            let end16 = w_b * hop16 + win16;
            let start = ((start16 * sr + fr / 2) / fr) as usize;
            let end = ((end16 * sr + fr / 2) / fr) as usize;
            let end = end.min(mixture.frames());
            let dur = (end.saturating_sub(start)) as f64 / sr as f64;
            if dur + 1e-9 < MIN_EXCERPT_S {
                continue;
            }
            let mean_p = probs[run_start..=run_end].iter().map(|p| p[s] as f64).sum::<f64>()
                / (run_end - run_start + 1) as f64;
            out.push(SilentExcerpt {
                source: s,
                track_id: track_id.to_string(),
                start_sample: start,
                end_sample: end,
                mean_probability: mean_p,
                audio: mixture.slice_frames(start, end),
            });
        }
    }
    Ok(out)
}

/// Per-source totals from a harvesting run.
#[derive(Debug, Clone, Default)]
pub struct ExtractionSummary {
    pub excerpts: [usize; 4],
    pub seconds: [f64; 4],
    pub tracks_processed: usize,
    pub failures: usize,
}

/// Harvest a directory of mixture-only WAV files into
/// `out_root/D_<source>/`, one excerpt WAV per qualifying run plus a
/// `manifest.tsv` (source, origin, start sample, end sample, mean
/// probability, output path). Sources without thresholds yield empty sets.
/// Per-file I/O failures are reported and skipped.
pub fn build_unlabeled_sets(
    detector: &DetectorModel,
    thresholds: &ThresholdCalibration,
    corpus_root: &Path,
    out_root: &Path,
) -> Result<ExtractionSummary> {
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(corpus_root)
        .map_err(|e| ExtractError::Io { path: corpus_root.to_path_buf(), source: e })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    wavs.sort();

    for name in SOURCE_NAMES {
        std::fs::create_dir_all(out_root.join(format!("D_{name}")))
            .map_err(|e| ExtractError::Io { path: out_root.to_path_buf(), source: e })?;
    }

    let mut summary = ExtractionSummary::default();
    let mut manifests: [Vec<String>; 4] = Default::default();
    for wav_path in &wavs {
        let track_id = wav_path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let mixture = match read_wav(wav_path) {
            Ok(w) => w,
            Err(e) => {
                eprintln!("extract: failed to read {}: {e}", wav_path.display());
                summary.failures += 1;
                continue;
            }
        };
        let excerpts = extract_silent_segments(detector, thresholds, &mixture, &track_id)?;
        for ex in excerpts {
            let name = SOURCE_NAMES[ex.source];
            let out_name = format!("{track_id}_{}_{}.wav", ex.start_sample, ex.end_sample);
            let out_path = out_root.join(format!("D_{name}")).join(&out_name);
            if let Err(e) = write_wav(&out_path, &ex.audio, WavEncoding::Float32) {
                eprintln!("extract: failed to write {}: {e}", out_path.display());
                summary.failures += 1;
                continue;
            }
            manifests[ex.source].push(format!(
                "{name}\t{}\t{}\t{}\t{:.6}\t{}",
                wav_path.display(),
                ex.start_sample,
                ex.end_sample,
                ex.mean_probability,
                out_path.display()
            ));
            summary.excerpts[ex.source] += 1;
            summary.seconds[ex.source] += ex.duration_s();
        }
        summary.tracks_processed += 1;
    }

    for (s, rows) in manifests.iter().enumerate() {
        let path = out_root.join(format!("D_{}", SOURCE_NAMES[s])).join("manifest.tsv");
        let mut f = std::fs::File::create(&path)
            .map_err(|e| ExtractError::Io { path: path.clone(), source: e })?;
        for row in rows {
            writeln!(f, "{row}").map_err(|e| ExtractError::Io { path: path.clone(), source: e })?;
        }
    }
    Ok(summary)
}

/// Excerpt WAV paths per source, read back from the manifests under `root`.
pub fn load_unlabeled_sets(root: &Path) -> Result<[Vec<PathBuf>; 4]> {
    let mut out: [Vec<PathBuf>; 4] = Default::default();
    for (s, name) in SOURCE_NAMES.iter().enumerate() {
        let manifest = root.join(format!("D_{name}")).join("manifest.tsv");
        if !manifest.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&manifest)
            .map_err(|e| ExtractError::Io { path: manifest.clone(), source: e })?;
        for line in text.lines() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(ExtractError::Contract(format!(
                    "malformed manifest row in {}: {line}",
                    manifest.display()
                )));
            }
            out[s].push(PathBuf::from(cols[5]));
        }
    }
    Ok(out)
}

/// Serialize thresholds as the flat key=value document the CLI reads back.
pub fn thresholds_to_text(cal: &ThresholdCalibration) -> String {
    let mut out = String::new();
    out.push_str("# per-source detector probability thresholds\n");
    out.push_str(&format!("volume_limit_db={}\n", cal.settings_volume_limit_db));
    out.push_str(&format!("precision_target={}\n", cal.settings_precision_target));
    out.push_str(&format!("total_windows={}\n", cal.total_windows));
    for (s, name) in SOURCE_NAMES.iter().enumerate() {
        match cal.thresholds[s] {
            Some(t) => {
                out.push_str(&format!("threshold_{name}={t:.6}\n"));
                out.push_str(&format!("precision_{name}={:.6}\n", cal.precision[s].unwrap_or(0.0)));
                out.push_str(&format!("qualifying_{name}={}\n", cal.qualifying[s]));
            }
            None => {
                out.push_str(&format!("threshold_{name}=none\n"));
            }
        }
    }
    out
}

/// Parse the document produced by [`thresholds_to_text`].
pub fn thresholds_from_text(text: &str) -> Result<ThresholdCalibration> {
    let mut cal = ThresholdCalibration {
        thresholds: [None; 4],
        precision: [None; 4],
        qualifying: [0; 4],
        total_windows: 0,
        settings_volume_limit_db: -20.0,
        settings_precision_target: 0.95,
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ExtractError::Contract(format!("malformed threshold line: {line}")));
        };
        let parse = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| ExtractError::Contract(format!("bad number in threshold file: {v}")))
        };
        match key {
            "volume_limit_db" => cal.settings_volume_limit_db = parse(value)?,
            "precision_target" => cal.settings_precision_target = parse(value)?,
            "total_windows" => cal.total_windows = parse(value)? as usize,
            _ => {
                for (s, name) in SOURCE_NAMES.iter().enumerate() {
                    if key == format!("threshold_{name}") {
                        if value != "none" {
                            cal.thresholds[s] = Some(parse(value)?);
                        }
                    } else if key == format!("precision_{name}") {
                        cal.precision[s] = Some(parse(value)?);
                    } else if key == format!("qualifying_{name}") {
                        cal.qualifying[s] = parse(value)? as usize;
                    }
                }
            }
        }
    }
    Ok(cal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cal_with(thresholds: [Option<f64>; 4]) -> ThresholdCalibration {
        ThresholdCalibration {
            thresholds,
            precision: [Some(1.0); 4],
            qualifying: [100; 4],
            total_windows: 1000,
            settings_volume_limit_db: -20.0,
            settings_precision_target: 0.95,
        }
    }

    #[test]
    fn threshold_text_round_trip() {
        let cal = cal_with([Some(0.9), None, Some(0.75), Some(0.5)]);
        let text = thresholds_to_text(&cal);
        let back = thresholds_from_text(&text).unwrap();
        assert_eq!(back.thresholds[0], Some(0.9));
        assert_eq!(back.thresholds[1], None);
        assert_eq!(back.thresholds[2], Some(0.75));
        assert_eq!(back.settings_volume_limit_db, -20.0);
    }

    #[test]
    fn sweep_picks_lowest_admissible_cut() {
        // 60 windows at p=0.9 all quiet, 60 at p=0.6 all quiet, 60 at p=0.3 loud
        let mut rows: Vec<(f64, f64)> = Vec::new();
        rows.extend(std::iter::repeat_n((0.9, -30.0), 60));
        rows.extend(std::iter::repeat_n((0.6, -25.0), 60));
        rows.extend(std::iter::repeat_n((0.3, -5.0), 60));
        let settings = CalibrationSettings::default();
        let (cut, prec, count) = sweep_threshold(rows, &settings).unwrap();
        assert_eq!(cut, 0.6);
        assert_eq!(prec, 1.0);
        assert_eq!(count, 120);
    }

    #[test]
    fn sweep_rejects_uninformative_scores() {
        // constant 0.5 probability over mixed data never reaches 95%
        let rows: Vec<(f64, f64)> =
            (0..200).map(|i| (0.5, if i % 2 == 0 { -30.0 } else { -5.0 })).collect();
        assert!(sweep_threshold(rows, &CalibrationSettings::default()).is_none());
    }

    #[test]
    fn sweep_needs_enough_support() {
        // perfectly precise but only 10 windows: below the support floor
        let rows: Vec<(f64, f64)> = (0..10).map(|_| (0.99, -40.0)).collect();
        assert!(sweep_threshold(rows, &CalibrationSettings::default()).is_none());
    }

    #[test]
    fn raising_the_cut_from_the_chosen_threshold_keeps_precision() {
        // monotonicity on the sweep: every cut above the chosen one stays
        // at or above the target
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<(f64, f64)> = (0..2000)
            .map(|_| {
                let p: f64 = rng.random_range(0.0..1.0);
                // higher scores are more often truly quiet
                let quiet = rng.random_range(0.0..1.0) < p * p;
                (p, if quiet { -35.0 } else { -10.0 })
            })
            .collect();
        let settings = CalibrationSettings::default();
        if let Some((cut, _, _)) = sweep_threshold(rows.clone(), &settings) {
            let mut sorted = rows;
            sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut hits = 0usize;
            for (i, (p, v)) in sorted.iter().enumerate() {
                if *v <= settings.volume_limit_db {
                    hits += 1;
                }
                let count = i + 1;
                if *p < cut {
                    break;
                }
                if count >= settings.min_qualifying
                    && (i + 1 == sorted.len() || sorted[i + 1].0 != *p)
                {
                    let prec = hits as f64 / count as f64;
                    assert!(prec >= settings.precision_target, "cut {p} precision {prec}");
                }
            }
        }
    }
}
