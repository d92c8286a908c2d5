//! Rule-based trend descriptions of a single sensor window.

use serde::{Deserialize, Serialize};

/// Slope magnitude (per step, standardized units) below which a window is
/// called flat.
pub const SLOPE_DEADBAND: f64 = 0.01;
/// Slope magnitude above which a trend is called sharp.
pub const SLOPE_SHARP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Rising,
    Falling,
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Early,
    Middle,
    Late,
}

impl Position {
    /// Third of a length-`w` window that index `i` falls in.
    pub fn of(i: usize, w: usize) -> Self {
        match 3 * i / w {
            0 => Self::Early,
            1 => Self::Middle,
            _ => Self::Late,
        }
    }

    fn word(self) -> &'static str {
        match self {
            Self::Early => "early",
            Self::Middle => "middle",
            Self::Late => "late",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendFeatures {
    pub slope: f64,
    pub std: f64,
    pub mean: f64,
    pub argmax: usize,
    pub argmin: usize,
}

impl TrendFeatures {
    pub fn compute(window: &[f64]) -> Self {
        let w = window.len();
        let n = w as f64;
        let mean = window.iter().sum::<f64>() / n;
        let t_mean = (n - 1.0) / 2.0;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (t, &y) in window.iter().enumerate() {
            let dt = t as f64 - t_mean;
            sxy += dt * (y - mean);
            sxx += dt * dt;
        }
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let std = (window.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        let first_by = |better: fn(f64, f64) -> bool| {
            (1..w).fold(0, |best, i| if better(window[i], window[best]) { i } else { best })
        };
        Self {
            slope,
            std,
            mean,
            argmax: first_by(|a, b| a > b),
            argmin: first_by(|a, b| a < b),
        }
    }

    pub fn direction(&self) -> Direction {
        if self.slope > SLOPE_DEADBAND {
            Direction::Rising
        } else if self.slope < -SLOPE_DEADBAND {
            Direction::Falling
        } else {
            Direction::Flat
        }
    }
}

fn bucket(v: f64, cuts: [f64; 2]) -> usize {
    if v < cuts[0] {
        0
    } else if v < cuts[1] {
        1
    } else {
        2
    }
}

/// Template generator. Volatility and level bucket boundaries can be fitted
/// to tercile cut points of a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendDescriber {
    pub vol_cuts: [f64; 2],
    pub level_cuts: [f64; 2],
}

impl Default for TrendDescriber {
    fn default() -> Self {
        Self {
            vol_cuts: [0.1, 0.5],
            level_cuts: [-0.5, 0.5],
        }
    }
}

fn terciles(mut v: Vec<f64>) -> [f64; 2] {
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
    [at(1.0 / 3.0), at(2.0 / 3.0)]
}

impl TrendDescriber {
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let feats: Vec<TrendFeatures> = windows.into_iter().map(TrendFeatures::compute).collect();
        if feats.is_empty() {
            return Self::default();
        }
        Self {
            vol_cuts: terciles(feats.iter().map(|f| f.std).collect()),
            level_cuts: terciles(feats.iter().map(|f| f.mean).collect()),
        }
    }

    pub fn describe(&self, window: &[f64]) -> String {
        assert!(window.len() >= 2, "a trend needs at least two points");
        let f = TrendFeatures::compute(window);
        let trend = match f.direction() {
            Direction::Flat => "flat".to_string(),
            dir => {
                let how = if f.slope.abs() > SLOPE_SHARP { "sharply" } else { "gently" };
                let way = if dir == Direction::Rising { "rising" } else { "falling" };
                format!("{how} {way}")
            }
        };
        let vol = ["low", "moderate", "high"][bucket(f.std, self.vol_cuts)];
        let level = ["low", "medium", "high"][bucket(f.mean, self.level_cuts)];
        let w = window.len();
        format!(
            "the series is {trend} with {vol} volatility , peak {} , trough {} , level {level} .",
            Position::of(f.argmax, w).word(),
            Position::of(f.argmin, w).word()
        )
    }
}

/// Description with the default bucket boundaries.
pub fn describe_series(window: &[f64]) -> String {
    TrendDescriber::default().describe(window)
}
