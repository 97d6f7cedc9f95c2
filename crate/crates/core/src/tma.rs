//! Timestep-dependent gains on cross-modal attention scores.
//!
//! Visual queries attend over text keys and visual keys. Early in the flow
//! (`u` near 0) the visual-to-text scores get a cosine-decaying boost; late
//! (`u` near 1) the visual-to-visual scores get a cosine-rising one. Gains
//! multiply the pre-softmax scores.

use std::f64::consts::PI;
use std::io::Write;

use crate::error::{Error, Result};
use crate::vecmath;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmaSchedule {
    pub lambda_txt: f64,
    pub lambda_img: f64,
    /// Text gain decays to 1 by this progress value.
    pub txt_breakpoint: f64,
    /// Visual gain starts rising after this progress value.
    pub img_breakpoint: f64,
}

impl Default for TmaSchedule {
    fn default() -> Self {
        Self {
            lambda_txt: 0.3,
            lambda_img: 0.3,
            txt_breakpoint: 0.4,
            img_breakpoint: 0.6,
        }
    }
}

impl TmaSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("text", self.txt_breakpoint), ("image", self.img_breakpoint)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::validation(format!("{name} breakpoint {b} outside (0, 1)")));
            }
        }
        if !(self.lambda_txt >= 0.0 && self.lambda_img >= 0.0) {
            return Err(Error::validation("gain strengths must be non-negative"));
        }
        Ok(())
    }
}

fn check_progress(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::validation(format!("flow progress {u} outside [0, 1]")))
    }
}

/// Gain on visual-to-text scores at flow progress `u`.
pub fn alpha_txt(u: f64, schedule: &TmaSchedule) -> Result<f64> {
    check_progress(u)?;
    let b = schedule.txt_breakpoint;
    Ok(if u <= b {
        1.0 + schedule.lambda_txt / 2.0 * (1.0 + (PI * u / b).cos())
    } else {
        1.0
    })
}

/// Gain on visual-to-visual scores at flow progress `u`.
pub fn alpha_img(u: f64, schedule: &TmaSchedule) -> Result<f64> {
    check_progress(u)?;
    let b = schedule.img_breakpoint;
    Ok(if u <= b {
        1.0
    } else {
        1.0 + schedule.lambda_img / 2.0 * (1.0 - (PI * (u - b) / (1.0 - b)).cos())
    })
}

/// Pre-softmax scores of `n_visual` visual queries over `n_text` text keys
/// followed by `n_visual` visual keys, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAttentionInstance {
    pub n_text: usize,
    pub n_visual: usize,
    scores: Vec<f64>,
    pub u: f64,
}

impl ToyAttentionInstance {
    pub fn new(n_text: usize, n_visual: usize, scores: Vec<f64>, u: f64) -> Result<Self> {
        if n_visual == 0 {
            return Err(Error::validation("attention instance needs a visual query"));
        }
        if scores.len() != n_visual * (n_text + n_visual) {
            return Err(Error::validation(format!(
                "expected {}x{} scores, got {}",
                n_visual,
                n_text + n_visual,
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::validation("attention scores must be finite"));
        }
        check_progress(u)?;
        Ok(Self {
            n_text,
            n_visual,
            scores,
            u,
        })
    }

    /// Every score set to `value`.
    pub fn constant(n_text: usize, n_visual: usize, value: f64, u: f64) -> Result<Self> {
        Self::new(n_text, n_visual, vec![value; n_visual * (n_text + n_visual)], u)
    }

    pub fn with_progress(&self, u: f64) -> Result<Self> {
        check_progress(u)?;
        Ok(Self { u, ..self.clone() })
    }

    pub fn n_keys(&self) -> usize {
        self.n_text + self.n_visual
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn row(&self, query: usize) -> &[f64] {
        let k = self.n_keys();
        &self.scores[query * k..(query + 1) * k]
    }
}

/// Scale the text-key block by `alpha_txt(u)` and the visual-key block by
/// `alpha_img(u)`. Shape is preserved.
pub fn modulate_scores(instance: &ToyAttentionInstance, schedule: &TmaSchedule) -> Result<Vec<f64>> {
    let gt = alpha_txt(instance.u, schedule)?;
    let gv = alpha_img(instance.u, schedule)?;
    let k = instance.n_keys();
    Ok(instance
        .scores
        .iter()
        .enumerate()
        .map(|(idx, s)| if idx % k < instance.n_text { gt * s } else { gv * s })
        .collect())
}

/// Mean softmax mass that visual queries put on text keys after modulation.
pub fn attention_text_mass(instance: &ToyAttentionInstance, schedule: &TmaSchedule) -> Result<f64> {
    let modulated = modulate_scores(instance, schedule)?;
    let k = instance.n_keys();
    let total: f64 = modulated
        .chunks_exact(k)
        .map(|row| vecmath::softmax(row, 1.0)[..instance.n_text].iter().sum::<f64>())
        .sum();
    Ok(total / instance.n_visual as f64)
}

/// One row of a schedule dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSample {
    pub u: f64,
    pub alpha_txt: f64,
    pub alpha_img: f64,
}

/// Gains on a uniform grid of `samples` points over `[0, 1]`.
pub fn sample_schedule(schedule: &TmaSchedule, samples: usize) -> Result<Vec<GainSample>> {
    if samples < 2 {
        return Err(Error::validation("schedule grid needs at least 2 samples"));
    }
    schedule.validate()?;
    (0..samples)
        .map(|i| {
            // hit both endpoints exactly
            let u = if i + 1 == samples {
                1.0
            } else {
                i as f64 / (samples - 1) as f64
            };
            Ok(GainSample {
                u,
                alpha_txt: alpha_txt(u, schedule)?,
                alpha_img: alpha_img(u, schedule)?,
            })
        })
        .collect()
}

/// Write `u,alpha_txt,alpha_img` rows, with a header line.
pub fn write_schedule_csv(rows: &[GainSample], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "u,alpha_txt,alpha_img")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.u, r.alpha_txt, r.alpha_img)?;
    }
    Ok(())
}
