use crate::error::{Error, Result};
use crate::pipeline::{ControlOutput, Pipeline};
use crate::tensor::cosine_flat;

/// Pairwise similarity of control outputs over the first half of the
/// control steps. Entries are stored for `1 <= i < j <= half`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    half: usize,
    // row-major upper triangle
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from explicit rows: `rows[i-1]` holds `a[i][i+1..=half]`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let half = rows.len();
        let mut entries = Vec::with_capacity(half * half.saturating_sub(1) / 2);
        for (idx, row) in rows.into_iter().enumerate() {
            if row.len() != half - idx - 1 {
                return Err(Error::Degenerate(format!(
                    "similarity row {} has {} entries, expected {}",
                    idx + 1,
                    row.len(),
                    half - idx - 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::Degenerate(format!("similarity {v} outside [-1, 1]")));
            }
            entries.extend(row);
        }
        Ok(Self { half, entries })
    }

    pub fn half(&self) -> usize {
        self.half
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn offset(&self, i: usize) -> usize {
        // entries in rows 1..i
        (i - 1) * self.half - (i - 1) * i / 2
    }

    /// `a[i][i+1..=half]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let start = self.offset(i);
        &self.entries[start..start + (self.half - i)]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (1 <= i && i < j && j <= self.half).then(|| self.row(i)[j - i - 1])
    }

    /// `(i, j, a_ij)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (1..=self.half).flat_map(move |i| {
            self.row(i)
                .iter()
                .enumerate()
                .map(move |(k, &v)| (i, i + k + 1, v))
        })
    }
}

/// `a[i][j] = (cos(enc_i, enc_j) + cos(mid_i, mid_j)) / 2` over the first
/// `half` outputs.
pub fn control_similarity(outputs: &[ControlOutput], half: usize) -> Result<SimilarityMatrix> {
    if half == 0 || outputs.len() < half {
        return Err(Error::Degenerate(format!(
            "need {half} control outputs, have {}",
            outputs.len()
        )));
    }
    let mut rows = Vec::with_capacity(half);
    for i in 0..half {
        let mut row = Vec::with_capacity(half - i - 1);
        for j in i + 1..half {
            let enc = cosine_flat(&outputs[i].enc, &outputs[j].enc)?;
            let mid = cosine_flat(&outputs[i].mid, &outputs[j].mid)?;
            row.push((0.5 * (enc + mid)).clamp(-1.0, 1.0));
        }
        rows.push(row);
    }
    SimilarityMatrix::from_rows(rows)
}

/// Earliest step whose similarity to every later first-half step exceeds
/// `theta`. The last row has no later steps and always qualifies.
pub fn select_tau_c(sim: &SimilarityMatrix, theta: f64) -> usize {
    (1..=sim.half())
        .find(|&i| sim.row(i).iter().all(|&a| a > theta))
        .unwrap_or(sim.half())
}

/// Result of a calibration pass.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub tau_c: usize,
    pub similarity: SimilarityMatrix,
}

/// Runs the uncached pipeline over the first half of the control steps,
/// and selects the cached step from the resulting similarity matrix.
pub fn calibrate(pipeline: &Pipeline, theta: f64) -> Result<Calibration> {
    let half = pipeline.config().t_control / 2;
    let outputs = pipeline.uncached_control_outputs(half)?;
    let similarity = control_similarity(&outputs, half)?;
    Ok(Calibration {
        tau_c: select_tau_c(&similarity, theta),
        similarity,
    })
}
