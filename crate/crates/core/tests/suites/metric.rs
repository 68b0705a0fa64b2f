//! Macro metrics against a per-class brute-force loop.

use flora_core::metrics::{macro_metrics, ConfusionMatrix};
use flora_core::Rng;

pub const TOL: f64 = 1e-12;
pub const MATRICES: usize = 200;

pub fn random_matrix(rng: &mut Rng) -> Vec<Vec<u64>> {
    let k = 2 + rng.below(15);
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let heavy = if i == j { 40 } else { 6 };
                    rng.below(heavy) as u64
                })
                .collect()
        })
        .collect()
}

/// Direct per-class loop straight from the definitions.
pub fn oracle(rows: &[Vec<u64>]) -> [f64; 7] {
    let k = rows.len();
    let total: u64 = rows.iter().flatten().sum();
    let mut sums = [0.0f64; 5];
    for i in 0..k {
        let tp = rows[i][i];
        let fn_: u64 = (0..k).filter(|&j| j != i).map(|j| rows[i][j]).sum();
        let fp: u64 = (0..k).filter(|&j| j != i).map(|j| rows[j][i]).sum();
        let tn = total - tp - fn_ - fp;
        let safe = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        sums[0] += (tp + tn) as f64 / total as f64;
        sums[1] += safe(tn, fp + tn);
        sums[2] += safe(tp, tp + fp);
        sums[3] += safe(tp, tp + fn_);
        sums[4] += (fp + fn_) as f64 / total as f64;
    }
    let m: Vec<f64> = sums.iter().map(|s| s / k as f64).collect();
    let f1 = if m[2] + m[3] == 0.0 { 0.0 } else { 2.0 * m[2] * m[3] / (m[2] + m[3]) };
    let trace: u64 = (0..k).map(|i| rows[i][i]).sum();
    [m[0], m[1], m[2], m[3], m[4], f1, trace as f64 / total as f64]
}

pub fn as_array(m: &flora_core::MacroMetrics) -> [f64; 7] {
    [
        m.accuracy_eq1,
        m.specificity,
        m.precision,
        m.recall,
        m.error_rate,
        m.f1,
        m.top1_accuracy,
    ]
}

/// Compares `MATRICES` random matrices with the oracle; returns the worst
/// absolute difference.
pub fn against_oracle() -> Result<f64, String> {
    let mut rng = Rng::new(77);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < MATRICES {
        let rows = random_matrix(&mut rng);
        if rows.iter().flatten().sum::<u64>() == 0 {
            continue;
        }
        checked += 1;
        let got = as_array(&macro_metrics(&ConfusionMatrix::from_rows(&rows)).map_err(|e| e.to_string())?);
        let want = oracle(&rows);
        for (g, w) in got.iter().zip(want) {
            let d = (g - w).abs();
            if !(d <= TOL) {
                return Err(format!("matrix {checked}: {got:?} vs {want:?}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// `accuracy_eq1 + error_rate == 1` on random matrices; returns the worst
/// deviation.
pub fn complement_identity() -> Result<f64, String> {
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..MATRICES {
        let rows = random_matrix(&mut rng);
        if rows.iter().flatten().sum::<u64>() == 0 {
            continue;
        }
        let m = macro_metrics(&ConfusionMatrix::from_rows(&rows)).map_err(|e| e.to_string())?;
        let d = (m.accuracy_eq1 + m.error_rate - 1.0).abs();
        if !(d <= TOL) {
            return Err(format!("deviation {d:e} on {rows:?}"));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

/// The two-class matrix [[8, 2], [3, 7]] against values worked out by hand:
/// class 0 has tp 8, fn 2, fp 3, tn 7; class 1 has tp 7, fn 3, fp 2, tn 8.
pub fn worked_example() -> Result<f64, String> {
    let m = macro_metrics(&ConfusionMatrix::from_rows(&[vec![8, 2], vec![3, 7]])).map_err(|e| e.to_string())?;
    let precision = (8.0 / 11.0 + 7.0 / 9.0) / 2.0;
    let recall = (8.0 / 10.0 + 7.0 / 10.0) / 2.0;
    let want = [
        (15.0 / 20.0 + 15.0 / 20.0) / 2.0,
        (7.0 / 10.0 + 8.0 / 10.0) / 2.0,
        precision,
        recall,
        (5.0 / 20.0 + 5.0 / 20.0) / 2.0,
        2.0 * precision * recall / (precision + recall),
        15.0 / 20.0,
    ];
    let got = as_array(&m);
    let worst = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    if worst <= TOL {
        Ok(worst)
    } else {
        Err(format!("{got:?} vs {want:?}"))
    }
}
