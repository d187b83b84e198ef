//! Forecast quality metrics and the per-step evaluation harness.
//!
//! Four scores cover complementary failure modes: MSE (pointwise error),
//! PSNR (the same in decibels relative to a dynamic range), SSIM (local
//! structure under a Gaussian window), and CORR (Pearson correlation of the
//! mean-removed fields, so a forecast that nails the pattern but misses the
//! bias still scores high).

use crate::error::{Error, Result};
use crate::field::{ScalarField, Sequence};

/// Mean squared difference.
pub fn metric_mse(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.expect_same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for dynamic range `range`:
/// `10 * log10(range^2 / MSE)`, or `+inf` when the fields are identical.
pub fn metric_psnr(a: &ScalarField, b: &ScalarField, range: f64) -> Result<f64> {
    if !(range.is_finite() && range > 0.0) {
        return Err(Error::config(format!(
            "PSNR dynamic range must be positive and finite, got {range}"
        )));
    }
    let mse = metric_mse(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// SSIM settings: an odd Gaussian window and the two standard stabilizers,
/// scaled by the dynamic range of the data.
#[derive(Clone, Copy, Debug)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl SsimConfig {
    /// Standard constants (11x11 window, sigma 1.5, K1 0.01, K2 0.03) for
    /// a given dynamic range.
    pub fn for_range(range: f64) -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::config(format!(
                "SSIM window must be odd and positive, got {}",
                self.window
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config("SSIM window sigma must be positive"));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.k1.is_finite() && self.k2.is_finite()) {
            return Err(Error::config("SSIM stabilizers must be positive"));
        }
        if !(self.range.is_finite() && self.range > 0.0) {
            return Err(Error::config(format!(
                "SSIM dynamic range must be positive and finite, got {}",
                self.range
            )));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian window taps.
    fn taps(&self) -> Vec<f64> {
        let half = (self.window / 2) as isize;
        let mut taps: Vec<f64> = (-half..=half)
            .map(|i| (-(i * i) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = taps.iter().sum();
        for t in &mut taps {
            *t /= sum;
        }
        taps
    }
}

/// Mean local SSIM over every window position fully inside the grid.
pub fn metric_ssim(a: &ScalarField, b: &ScalarField, cfg: &SsimConfig) -> Result<f64> {
    a.expect_same_shape(b)?;
    cfg.validate()?;
    let (h, w) = a.shape();
    if h < cfg.window || w < cfg.window {
        return Err(Error::data(format!(
            "grid {h}x{w} is smaller than the {0}x{0} SSIM window",
            cfg.window
        )));
    }
    let taps = cfg.taps();
    let k = cfg.window;
    let c1 = (cfg.k1 * cfg.range).powi(2);
    let c2 = (cfg.k2 * cfg.range).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    let weight = taps[dy] * taps[dx];
                    let pa = a.get(y0 + dy, x0 + dx);
                    let pb = b.get(y0 + dy, x0 + dx);
                    mu_a += weight * pa;
                    mu_b += weight * pb;
                    aa += weight * pa * pa;
                    bb += weight * pb * pb;
                    ab += weight * pa * pb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += score;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pearson correlation of the mean-removed flattened fields.
pub fn metric_corr(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.expect_same_shape(b)?;
    let n = a.data().len() as f64;
    let mean_a = a.data().iter().sum::<f64>() / n;
    let mean_b = b.data().iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (pa, pb) in a.data().iter().zip(b.data()) {
        let da = pa - mean_a;
        let db = pb - mean_b;
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    let floor_a = 1e-12 * (1.0 + mean_a.abs());
    let floor_b = 1e-12 * (1.0 + mean_b.abs());
    if var_a.sqrt() < floor_a || var_b.sqrt() < floor_b {
        return Err(Error::data(
            "correlation is undefined for a constant field".to_string(),
        ));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Scores at one prediction step, averaged over the evaluated sequences.
#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub corr: f64,
}

/// Per-step scores plus their average over the horizon.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub per_step: Vec<StepMetrics>,
    pub averaged: StepMetrics,
    /// Sequences contributing to every step.
    pub sequences: usize,
}

impl MetricReport {
    /// Plain-text table, one row per step.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} sequence(s), horizon {}\n",
            self.sequences,
            self.per_step.len()
        ));
        out.push_str("step        mse       psnr       ssim       corr\n");
        for (i, m) in self.per_step.iter().enumerate() {
            out.push_str(&format!(
                "{:>4} {:>10.6} {:>10.4} {:>10.6} {:>10.6}\n",
                i + 1,
                m.mse,
                m.psnr,
                m.ssim,
                m.corr
            ));
        }
        let a = &self.averaged;
        out.push_str(&format!(
            " avg {:>10.6} {:>10.4} {:>10.6} {:>10.6}\n",
            a.mse, a.psnr, a.ssim, a.corr
        ));
        out
    }

    /// Machine-readable `key=value` lines.
    pub fn render_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("sequences={}\n", self.sequences));
        out.push_str(&format!("horizon={}\n", self.per_step.len()));
        for (i, m) in self.per_step.iter().enumerate() {
            let k = i + 1;
            out.push_str(&format!("step{k}.mse={}\n", m.mse));
            out.push_str(&format!("step{k}.psnr={}\n", m.psnr));
            out.push_str(&format!("step{k}.ssim={}\n", m.ssim));
            out.push_str(&format!("step{k}.corr={}\n", m.corr));
        }
        let a = &self.averaged;
        out.push_str(&format!("avg.mse={}\n", a.mse));
        out.push_str(&format!("avg.psnr={}\n", a.psnr));
        out.push_str(&format!("avg.ssim={}\n", a.ssim));
        out.push_str(&format!("avg.corr={}\n", a.corr));
        out
    }
}

/// Rolls a forecaster over every sequence and scores each prediction step.
///
/// Each sequence must hold at least `window + horizon` frames: the first
/// `window` feed the forecaster, the next `horizon` are the targets. The
/// forecaster returns `horizon` predicted frames. `range` is the dynamic
/// range used by PSNR and SSIM (typically from the training-split stats).
pub fn evaluate(
    sequences: &[&Sequence],
    window: usize,
    horizon: usize,
    range: f64,
    mut forecast: impl FnMut(&[ScalarField]) -> Result<Vec<ScalarField>>,
) -> Result<MetricReport> {
    if sequences.is_empty() {
        return Err(Error::data("evaluation needs at least one sequence"));
    }
    if window == 0 || horizon == 0 {
        return Err(Error::config("evaluation window and horizon must be positive"));
    }
    let ssim_cfg = SsimConfig::for_range(range);
    let mut sums = vec![
        StepMetrics {
            mse: 0.0,
            psnr: 0.0,
            ssim: 0.0,
            corr: 0.0
        };
        horizon
    ];
    for seq in sequences {
        if seq.len() < window + horizon {
            return Err(Error::data(format!(
                "sequence of {} frames cannot supply {window} inputs plus {horizon} targets",
                seq.len()
            )));
        }
        let inputs = &seq.frames()[..window];
        let predictions = forecast(inputs)?;
        if predictions.len() != horizon {
            return Err(Error::data(format!(
                "forecaster returned {} frames for horizon {horizon}",
                predictions.len()
            )));
        }
        for (k, pred) in predictions.iter().enumerate() {
            let target = seq.frame(window + k);
            let s = &mut sums[k];
            s.mse += metric_mse(pred, target)?;
            s.psnr += metric_psnr(pred, target, range)?;
            s.ssim += metric_ssim(pred, target, &ssim_cfg)?;
            s.corr += metric_corr(pred, target)?;
        }
    }
    let n = sequences.len() as f64;
    let per_step: Vec<StepMetrics> = sums
        .into_iter()
        .map(|s| StepMetrics {
            mse: s.mse / n,
            psnr: s.psnr / n,
            ssim: s.ssim / n,
            corr: s.corr / n,
        })
        .collect();
    let k = per_step.len() as f64;
    let averaged = StepMetrics {
        mse: per_step.iter().map(|m| m.mse).sum::<f64>() / k,
        psnr: per_step.iter().map(|m| m.psnr).sum::<f64>() / k,
        ssim: per_step.iter().map(|m| m.ssim).sum::<f64>() / k,
        corr: per_step.iter().map(|m| m.corr).sum::<f64>() / k,
    };
    Ok(MetricReport {
        per_step,
        averaged,
        sequences: sequences.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_sequence, Blob, FlowProgram, SynthSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_field(rng: &mut ChaCha20Rng, h: usize, w: usize) -> ScalarField {
        ScalarField::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn mse_basics() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = random_field(&mut rng, 8, 8);
        assert_eq!(metric_mse(&a, &a).unwrap(), 0.0);

        let b = ScalarField::from_fn(8, 8, |y, x| a.get(y, x) + 2.0);
        assert!((metric_mse(&a, &b).unwrap() - 4.0).abs() < 1e-12);

        let c = random_field(&mut rng, 8, 8);
        let mut naive = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let d = a.get(y, x) - c.get(y, x);
                naive += d * d;
            }
        }
        naive /= 64.0;
        let got = metric_mse(&a, &c).unwrap();
        assert!(((got - naive) / naive).abs() < 1e-9);
        assert!(metric_mse(&a, &ScalarField::zeros(4, 4)).is_err());
    }

    #[test]
    fn psnr_reference_points() {
        // MSE exactly 1 against a zero reference on a large grid.
        let a = ScalarField::filled(16, 16, 1.0);
        let zero = ScalarField::zeros(16, 16);
        let db = metric_psnr(&a, &zero, 255.0).unwrap();
        assert!((db - 48.1308).abs() < 1e-3, "got {db}");

        assert!(metric_psnr(&a, &a, 255.0).unwrap().is_infinite());

        // MSE = range^2 lands at exactly 0 dB.
        let b = ScalarField::filled(16, 16, 256.0);
        let db = metric_psnr(&b, &a, 255.0).unwrap();
        assert!(db.abs() < 1e-12);

        assert!(metric_psnr(&a, &zero, 0.0).is_err());
        assert!(metric_psnr(&a, &zero, -1.0).is_err());
    }

    #[test]
    fn ssim_is_one_on_identical_fields() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = random_field(&mut rng, 16, 16);
        let cfg = SsimConfig::for_range(1.0);
        let s = metric_ssim(&a, &a, &cfg).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_an_independent_reference_implementation() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = random_field(&mut rng, 18, 14);
        let b = random_field(&mut rng, 18, 14);
        let cfg = SsimConfig::for_range(1.0);
        let got = metric_ssim(&a, &b, &cfg).unwrap();

        // Reference: explicit 2-D window, textbook formula, no shared code.
        let k = 11usize;
        let mut win = vec![0.0; k * k];
        for y in 0..k {
            for x in 0..k {
                let dy = y as f64 - 5.0;
                let dx = x as f64 - 5.0;
                win[y * k + x] = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let wsum: f64 = win.iter().sum();
        for v in &mut win {
            *v /= wsum;
        }
        let c1 = (0.01f64).powi(2);
        let c2 = (0.03f64).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=18 - k {
            for x0 in 0..=14 - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        ma += win[y * k + x] * a.get(y0 + y, x0 + x);
                        mb += win[y * k + x] * b.get(y0 + y, x0 + x);
                    }
                }
                let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let da = a.get(y0 + y, x0 + x) - ma;
                        let db = b.get(y0 + y, x0 + x) - mb;
                        va += win[y * k + x] * da * da;
                        vb += win[y * k + x] * db * db;
                        cab += win[y * k + x] * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let reference = total / count as f64;
        assert!(
            (got - reference).abs() < 1e-9,
            "got {got}, reference {reference}"
        );
    }

    #[test]
    fn ssim_penalizes_inversion_and_bias() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        // High-contrast checkerboard-ish field over the full range.
        let a = ScalarField::from_fn(16, 16, |y, x| {
            if (y + x) % 2 == 0 {
                0.9 + 0.1 * rng.gen_range(0.0..1.0)
            } else {
                0.1 * rng.gen_range(0.0..1.0)
            }
        });
        let cfg = SsimConfig::for_range(1.0);
        let inverted = ScalarField::from_fn(16, 16, |y, x| 1.0 - a.get(y, x));
        let s = metric_ssim(&a, &inverted, &cfg).unwrap();
        assert!(s < 0.5, "inverted field scored {s}");

        let biased = ScalarField::from_fn(16, 16, |y, x| a.get(y, x) + 0.3);
        let s = metric_ssim(&a, &biased, &cfg).unwrap();
        assert!(s < 1.0 - 1e-3, "biased field scored {s}");
    }

    #[test]
    fn ssim_rejects_small_grids_and_bad_configs() {
        let a = ScalarField::zeros(8, 8);
        let cfg = SsimConfig::for_range(1.0);
        assert!(metric_ssim(&a, &a, &cfg).is_err());

        let a = ScalarField::zeros(16, 16);
        let mut bad = SsimConfig::for_range(1.0);
        bad.window = 10;
        assert!(metric_ssim(&a, &a, &bad).is_err());
        let mut bad = SsimConfig::for_range(0.0);
        bad.range = 0.0;
        assert!(metric_ssim(&a, &a, &bad).is_err());
    }

    #[test]
    fn corr_reference_points() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = random_field(&mut rng, 8, 8);
        assert!((metric_corr(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let negated = ScalarField::from_fn(8, 8, |y, x| 3.0 - a.get(y, x));
        assert!((metric_corr(&a, &negated).unwrap() + 1.0).abs() < 1e-12);

        let b = random_field(&mut rng, 8, 8);
        let n = 64.0;
        let ma = a.data().iter().sum::<f64>() / n;
        let mb = b.data().iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (pa, pb) in a.data().iter().zip(b.data()) {
            cov += (pa - ma) * (pb - mb);
            va += (pa - ma) * (pa - ma);
            vb += (pb - mb) * (pb - mb);
        }
        let reference = cov / (va.sqrt() * vb.sqrt());
        let got = metric_corr(&a, &b).unwrap();
        assert!(((got - reference) / reference).abs() < 1e-9);

        let constant = ScalarField::filled(8, 8, 0.3);
        assert!(metric_corr(&constant, &a).is_err());
        assert!(metric_corr(&a, &constant).is_err());
    }

    fn drifting_sequence() -> Sequence {
        let spec = SynthSpec {
            height: 32,
            width: 32,
            blobs: vec![Blob {
                cy: 15.5,
                cx: 12.5,
                amplitude: 1.0,
                sigma: 2.0,
            }],
            flow: FlowProgram::Constant { u: 0.5, v: 0.25 },
            kappa: 0.0,
            frames: 10,
            noise_sigma: 0.0,
        };
        synth_sequence(&spec, 0).unwrap()
    }

    #[test]
    fn perfect_forecaster_maxes_every_metric() {
        let seq = drifting_sequence();
        let frames = seq.frames().to_vec();
        let report = evaluate(&[&seq], 2, 4, 1.0, |_| Ok(frames[2..6].to_vec())).unwrap();
        for m in &report.per_step {
            assert_eq!(m.mse, 0.0);
            assert!(m.psnr.is_infinite());
            assert!((m.ssim - 1.0).abs() < 1e-12);
            assert!((m.corr - 1.0).abs() < 1e-12);
        }
        assert_eq!(report.sequences, 1);
        assert!(report.averaged.psnr.is_infinite());
    }

    #[test]
    fn persistence_forecaster_degrades_with_the_horizon() {
        let seq = drifting_sequence();
        let report = evaluate(&[&seq], 2, 6, 1.0, |inputs| {
            Ok(vec![inputs.last().unwrap().clone(); 6])
        })
        .unwrap();
        for pair in report.per_step.windows(2) {
            assert!(
                pair[1].mse > pair[0].mse,
                "persistence MSE should grow: {} then {}",
                pair[0].mse,
                pair[1].mse
            );
        }
    }

    #[test]
    fn horizon_one_equals_direct_metric_computation() {
        let seq = drifting_sequence();
        let pred = seq.frame(3).clone();
        let offset = ScalarField::from_fn(32, 32, |y, x| pred.get(y, x) * 0.9 + 0.01);
        let report = evaluate(&[&seq], 3, 1, 1.0, |_| Ok(vec![offset.clone()])).unwrap();
        assert_eq!(report.per_step.len(), 1);
        let target = seq.frame(3);
        assert_eq!(report.per_step[0].mse, metric_mse(&offset, target).unwrap());
        assert_eq!(
            report.per_step[0].ssim,
            metric_ssim(&offset, target, &SsimConfig::for_range(1.0)).unwrap()
        );
        assert_eq!(report.averaged.corr, report.per_step[0].corr);
    }

    #[test]
    fn evaluate_rejects_short_sequences_and_bad_shapes() {
        let seq = drifting_sequence();
        assert!(evaluate(&[&seq], 8, 8, 1.0, |_| Ok(vec![])).is_err());
        assert!(evaluate(&[], 2, 2, 1.0, |_| Ok(vec![])).is_err());
        let err = evaluate(&[&seq], 2, 3, 1.0, |_| Ok(vec![ScalarField::zeros(32, 32)]));
        assert!(err.is_err(), "wrong prediction count must fail");
    }

    #[test]
    fn report_rendering_contains_every_key() {
        let seq = drifting_sequence();
        let report = evaluate(&[&seq], 2, 2, 1.0, |inputs| {
            Ok(vec![inputs.last().unwrap().clone(); 2])
        })
        .unwrap();
        let text = report.render_text();
        assert!(text.contains("step"));
        assert!(text.contains("avg"));
        let kv = report.render_key_values();
        for key in [
            "sequences=1",
            "horizon=2",
            "step1.mse=",
            "step2.corr=",
            "avg.psnr=",
        ] {
            assert!(kv.contains(key), "missing {key} in:\n{kv}");
        }
    }
}
