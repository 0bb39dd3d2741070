//! Source-separation quality metrics.
//!
//! SDR/SIR/SAR are computed from an orthogonal decomposition of the estimate:
//! `s_target` is the projection onto the reference source, `e_interf` is the
//! rest of the projection onto the span of all four references, and `e_artif`
//! is what remains. Stereo signals are flattened channel-by-channel into one
//! vector per signal before projecting. All three ratios are invariant to
//! rescaling of the estimate.
//!
//! Also here: the relative-volume measure `10*log10(|s_i|^2 / |s|^2)` used to
//! call a source silent within a mixture.

mod eval;

pub use eval::{aggregate, evaluate_track, AggregateReport, EvalReport, FrameMetrics, SourceAggregate, TrackEval, TrackReport};

use serde::Serialize;
use thiserror::Error;

use crate::audio::Waveform;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("relative volume undefined: mixture is silent")]
    UndefinedMixture,
    #[error("projection undefined: reference source {0} is all zero")]
    UndefinedProjection(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Metrics are clamped to this magnitude in dB so aggregates stay finite;
/// a perfect estimate reports +300 instead of +infinity.
pub const DB_CAP: f64 = 300.0;

/// Gram-matrix ridge, relative to its trace.
const GRAM_RIDGE: f64 = 1e-10;

/// Denominator regularizer, relative to the estimate energy.
const DENOM_EPS: f64 = 1e-12;

/// Energy ratio of a source against its mixture, in dB. Negative infinity is
/// the sentinel for an all-zero source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelVolume(pub f64);

impl RelVolume {
    pub const SILENT: RelVolume = RelVolume(f64::NEG_INFINITY);

    pub fn db(self) -> f64 {
        self.0
    }

    pub fn is_sentinel(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }
}

/// `10*log10(sum s_i^2 / sum s^2)`; the mixture must carry energy.
pub fn relative_volume(source: &Waveform, mixture: &Waveform) -> Result<RelVolume> {
    if source.channels() != mixture.channels() || source.frames() != mixture.frames() {
        return Err(MetricsError::Shape(format!(
            "source {}x{} vs mixture {}x{}",
            source.channels(),
            source.frames(),
            mixture.channels(),
            mixture.frames()
        )));
    }
    let num = source.energy();
    let den = mixture.energy();
    if den <= 0.0 {
        return Err(MetricsError::UndefinedMixture);
    }
    if num <= 0.0 {
        return Ok(RelVolume::SILENT);
    }
    Ok(RelVolume(10.0 * (num / den).log10()))
}

/// Relative volume over samples `[start, end)` only.
pub fn relative_volume_window(
    source: &Waveform,
    mixture: &Waveform,
    start: usize,
    end: usize,
) -> Result<RelVolume> {
    let num = window_energy(source, start, end);
    let den = window_energy(mixture, start, end);
    if den <= 0.0 {
        return Err(MetricsError::UndefinedMixture);
    }
    if num <= 0.0 {
        return Ok(RelVolume::SILENT);
    }
    Ok(RelVolume(10.0 * (num / den).log10()))
}

fn window_energy(w: &Waveform, start: usize, end: usize) -> f64 {
    let end = end.min(w.frames());
    let mut acc = 0.0f64;
    for c in 0..w.channels() {
        for &v in &w.channel(c)[start..end] {
            acc += (v as f64) * (v as f64);
        }
    }
    acc
}

/// True iff the source counts as silent at this threshold; the boundary is
/// inclusive and the -inf sentinel always qualifies.
pub fn is_silent(v: RelVolume, thres_db: f64) -> bool {
    v.0 <= thres_db
}

/// Orthogonal decomposition of one estimate against the four references,
/// with the three ratios in dB.
#[derive(Debug, Clone)]
pub struct BssDecomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partials: Vec<f64> = a
        .chunks(1024)
        .zip(b.chunks(1024))
        .map(|(ca, cb)| ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>())
        .collect();
    partials.iter().sum()
}

/// Solve the 4x4 system `g x = b` by Gaussian elimination with partial
/// pivoting. `g` is row-major.
fn solve4(mut g: [f64; 16], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let mut pivot = col;
        for row in col + 1..4 {
            if g[row * 4 + col].abs() > g[pivot * 4 + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for k in 0..4 {
                g.swap(col * 4 + k, pivot * 4 + k);
            }
            b.swap(col, pivot);
        }
        let diag = g[col * 4 + col];
        for row in col + 1..4 {
            let factor = g[row * 4 + col] / diag;
            for k in col..4 {
                g[row * 4 + k] -= factor * g[col * 4 + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0f64; 4];
    for col in (0..4).rev() {
        let mut acc = b[col];
        for k in col + 1..4 {
            acc -= g[col * 4 + k] * x[k];
        }
        x[col] = acc / g[col * 4 + col];
    }
    x
}

/// Ratio in dB with an energy floor: components below `eps` (a fixed
/// fraction of the estimate energy) count as zero, so vanishing error terms
/// report the +cap instead of solver noise, and a vanishing target reports
/// the -cap. Both floors scale with the estimate energy, preserving scale
/// invariance.
fn db_clamped(num: f64, den: f64, eps: f64) -> f64 {
    if num <= eps {
        return -DB_CAP;
    }
    if den <= eps {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

/// Decompose `est` (a flattened signal) against four flattened references.
/// `target` picks the reference the estimate is scored against.
pub fn bss_eval_vecs(est: &[f64], refs: &[Vec<f64>; 4], target: usize) -> Result<BssDecomposition> {
    let n = est.len();
    for (j, r) in refs.iter().enumerate() {
        if r.len() != n {
            return Err(MetricsError::Shape(format!(
                "reference {j} length {} vs estimate {n}",
                r.len()
            )));
        }
    }
    let ref_j = &refs[target];
    let e_j = dot(ref_j, ref_j);
    if e_j <= 0.0 {
        return Err(MetricsError::UndefinedProjection(target));
    }

    // projection onto the target reference
    let coef = dot(est, ref_j) / e_j;
    let s_target: Vec<f64> = ref_j.iter().map(|&v| coef * v).collect();

    // projection onto span(s_1..s_4) via the regularized normal equations
    let mut gram = [0.0f64; 16];
    let mut rhs = [0.0f64; 4];
    for a in 0..4 {
        for b in a..4 {
            let g = dot(&refs[a], &refs[b]);
            gram[a * 4 + b] = g;
            gram[b * 4 + a] = g;
        }
        rhs[a] = dot(&refs[a], est);
    }
    let trace: f64 = (0..4).map(|a| gram[a * 4 + a]).sum();
    let ridge = GRAM_RIDGE * trace;
    for a in 0..4 {
        gram[a * 4 + a] += ridge;
    }
    let coefs = solve4(gram, rhs);

    let mut p_all = vec![0.0f64; n];
    for (c, r) in coefs.iter().zip(refs.iter()) {
        for (p, v) in p_all.iter_mut().zip(r) {
            *p += c * v;
        }
    }

    let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(p, t)| p - t).collect();
    let e_artif: Vec<f64> = est.iter().zip(&p_all).map(|(e, p)| e - p).collect();

    let et = dot(&s_target, &s_target);
    let ei = dot(&e_interf, &e_interf);
    let ea = dot(&e_artif, &e_artif);
    let ep = dot(&p_all, &p_all);
    let eps = DENOM_EPS * dot(est, est);

    Ok(BssDecomposition {
        sdr: db_clamped(et, ei + ea, eps),
        sir: db_clamped(et, ei, eps),
        sar: db_clamped(ep, ea, eps),
        s_target,
        e_interf,
        e_artif,
    })
}

/// Waveform front end of [`bss_eval_vecs`]: channels are concatenated into
/// one vector per signal.
pub fn bss_eval(est: &Waveform, refs: &[&Waveform; 4], target: usize) -> Result<BssDecomposition> {
    for (j, r) in refs.iter().enumerate() {
        if r.channels() != est.channels() || r.frames() != est.frames() {
            return Err(MetricsError::Shape(format!(
                "reference {j} shape {}x{} vs estimate {}x{}",
                r.channels(),
                r.frames(),
                est.channels(),
                est.frames()
            )));
        }
    }
    let est_v: Vec<f64> = est.data().iter().map(|&v| v as f64).collect();
    let refs_v: [Vec<f64>; 4] = [
        refs[0].data().iter().map(|&v| v as f64).collect(),
        refs[1].data().iter().map(|&v| v as f64).collect(),
        refs[2].data().iter().map(|&v| v as f64).collect(),
        refs[3].data().iter().map(|&v| v as f64).collect(),
    ];
    bss_eval_vecs(&est_v, &refs_v, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(data: Vec<f32>) -> Waveform {
        Waveform::new(data, 1, 8000)
    }

    #[test]
    fn relative_volume_of_mixture_itself_is_zero_db() {
        let s = wave(vec![0.5, -0.25, 0.1, 0.0]);
        let v = relative_volume(&s, &s).unwrap();
        assert!(v.db().abs() < 1e-12);
    }

    #[test]
    fn hundred_times_quieter_is_minus_twenty() {
        // energy ratio 0.01 <-> -20 dB
        let mix = wave(vec![1.0; 100]);
        let src = wave(vec![0.1; 100]);
        let v = relative_volume(&src, &mix).unwrap();
        assert!((v.db() + 20.0).abs() < 1e-6);
    }

    #[test]
    fn silent_source_is_sentinel() {
        let mix = wave(vec![0.3; 8]);
        let src = wave(vec![0.0; 8]);
        let v = relative_volume(&src, &mix).unwrap();
        assert!(v.is_sentinel());
        assert!(is_silent(v, -13.0));
    }

    #[test]
    fn zero_mixture_is_error() {
        let z = wave(vec![0.0; 8]);
        assert!(matches!(relative_volume(&z, &z), Err(MetricsError::UndefinedMixture)));
    }

    #[test]
    fn silence_threshold_boundary_is_inclusive() {
        assert!(is_silent(RelVolume(-30.0), -13.0));
        assert!(is_silent(RelVolume(-13.0), -13.0));
        assert!(!is_silent(RelVolume(0.0), -13.0));
    }

    /// Orthogonal 4-source fixture: disjoint supports.
    fn orthogonal_refs(n: usize) -> [Vec<f64>; 4] {
        let mut refs = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (j, r) in refs.iter_mut().enumerate() {
            for t in (j..n).step_by(4) {
                r[t] = 1.0 + (t as f64 * 0.1).sin() * 0.5;
            }
        }
        refs
    }

    #[test]
    fn scaled_target_hits_the_cap_and_scale_invariance() {
        let refs = orthogonal_refs(64);
        let est: Vec<f64> = refs[1].iter().map(|&v| 2.5 * v).collect();
        let d = bss_eval_vecs(&est, &refs, 1).unwrap();
        assert_eq!(d.sdr, DB_CAP);
        assert_eq!(d.sir, DB_CAP);
        assert_eq!(d.sar, DB_CAP);
        // alpha-scaling the estimate leaves all metrics unchanged
        let noisy: Vec<f64> = refs[1]
            .iter()
            .zip(&refs[2])
            .enumerate()
            .map(|(t, (a, b))| a + 0.3 * b + 0.01 * ((t * 13 % 7) as f64 - 3.0))
            .collect();
        let base = bss_eval_vecs(&noisy, &refs, 1).unwrap();
        for alpha in [0.1, 3.0, 17.5] {
            let scaled: Vec<f64> = noisy.iter().map(|v| alpha * v).collect();
            let d2 = bss_eval_vecs(&scaled, &refs, 1).unwrap();
            assert!((d2.sdr - base.sdr).abs() < 1e-6);
            assert!((d2.sir - base.sir).abs() < 1e-6);
            assert!((d2.sar - base.sar).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_perturbation_reads_twenty_db() {
        // est = s_j + e with e orthogonal to all refs and |e|^2 = |s_j|^2/100
        let n = 64;
        let refs = orthogonal_refs(n);
        // perturbation in a direction orthogonal to every reference:
        // alternate signs within one reference's support positions
        let mut e = vec![0.0f64; n];
        for t in (0..n).step_by(8) {
            e[t] = refs[0][t];
            if t + 4 < n {
                e[t + 4] = -refs[0][t + 4] * refs[0][t] * refs[0][t] / refs[0][t + 4] / refs[0][t + 4];
            }
        }
        // orthogonalize e against refs[0] explicitly, then normalize
        let proj = e.iter().zip(&refs[0]).map(|(a, b)| a * b).sum::<f64>()
            / refs[0].iter().map(|v| v * v).sum::<f64>();
        for (ev, r) in e.iter_mut().zip(&refs[0]) {
            *ev -= proj * r;
        }
        let e_j: f64 = refs[1].iter().map(|v| v * v).sum();
        let e_e: f64 = e.iter().map(|v| v * v).sum();
        let scale = (e_j / (100.0 * e_e)).sqrt();
        let est: Vec<f64> = refs[1].iter().zip(&e).map(|(s, ev)| s + scale * ev).collect();

        let d = bss_eval_vecs(&est, &refs, 1).unwrap();
        assert!((d.sdr - 20.0).abs() < 0.01, "sdr {}", d.sdr);
        assert!((d.sar - 20.0).abs() < 0.01, "sar {}", d.sar);
        assert_eq!(d.sir, DB_CAP);
    }

    #[test]
    fn decomposition_identity_and_orthogonality() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.random_range(16..128);
            let refs: [Vec<f64>; 4] = std::array::from_fn(|_| {
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            });
            let est: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = bss_eval_vecs(&est, &refs, rng.random_range(0..4)).unwrap();
            let norm_est = dot(&est, &est).sqrt();
            for t in 0..n {
                let sum = d.s_target[t] + d.e_interf[t] + d.e_artif[t];
                assert!((sum - est[t]).abs() <= 1e-5 * norm_est.max(1.0));
            }
            let ortho1 = dot(&d.s_target, &d.e_interf).abs();
            let span: Vec<f64> = d.s_target.iter().zip(&d.e_interf).map(|(a, b)| a + b).collect();
            let ortho2 = dot(&span, &d.e_artif).abs();
            let scale = dot(&est, &est).max(1e-12);
            assert!(ortho1 / scale < 1e-5, "target/interf not orthogonal: {ortho1}");
            assert!(ortho2 / scale < 1e-5, "span/artif not orthogonal: {ortho2}");
        }
    }

    #[test]
    fn zero_reference_is_projection_error() {
        let n = 32;
        let mut refs = orthogonal_refs(n);
        refs[2] = vec![0.0; n];
        let est = refs[0].clone();
        assert!(matches!(
            bss_eval_vecs(&est, &refs, 2),
            Err(MetricsError::UndefinedProjection(2))
        ));
        // a zero NON-target reference is fine (ridge keeps the solve stable)
        let d = bss_eval_vecs(&est, &refs, 0).unwrap();
        assert_eq!(d.sdr, DB_CAP);
    }

    #[test]
    fn permuting_non_target_references_changes_nothing() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let n = 96;
        let refs: [Vec<f64>; 4] =
            std::array::from_fn(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let est: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = bss_eval_vecs(&est, &refs, 0).unwrap();
        let permuted = [refs[0].clone(), refs[3].clone(), refs[1].clone(), refs[2].clone()];
        let d = bss_eval_vecs(&est, &permuted, 0).unwrap();
        assert!((d.sdr - base.sdr).abs() < 1e-9);
        assert!((d.sir - base.sir).abs() < 1e-9);
        assert!((d.sar - base.sar).abs() < 1e-9);
    }
}
