//! Summary statistics of mass samples.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn central_moment(xs: &[f64], k: i32) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(k)).sum::<f64>() / xs.len() as f64
}

/// Population skewness m3 / m2^1.5.
pub fn skewness(xs: &[f64]) -> f64 {
    let m2 = central_moment(xs, 2);
    central_moment(xs, 3) / m2.powf(1.5)
}

/// Population excess kurtosis m4 / m2^2 - 3.
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m2 = central_moment(xs, 2);
    central_moment(xs, 4) / (m2 * m2) - 3.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub skew: f64,
    pub kurtosis: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(xs: &[f64]) -> Summary {
    Summary {
        n: xs.len(),
        mean: mean(xs),
        std: sample_std(xs),
        skew: skewness(xs),
        kurtosis: excess_kurtosis(xs),
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}
