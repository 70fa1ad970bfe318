use ndarray::{Array2, ArrayView2};

use super::search::RetrievalResult;
use crate::error::{Error, Result};

/// Softmax over each query's retrieved similarities (divided by `tau`),
/// then the weighted average of the neighbours' label rows.
pub fn propagate_labels(result: &RetrievalResult, labels: ArrayView2<f32>, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if let Some(&bad) = result.indices.iter().find(|&&i| i >= labels.nrows()) {
        return Err(Error::Shape(format!(
            "neighbour index {bad} outside a bank of {} rows",
            labels.nrows()
        )));
    }
    let nq = result.num_queries();
    let c = labels.ncols();
    let mut out = Array2::<f64>::zeros((nq, c));
    let mut weights = vec![0.0; result.k];
    for q in 0..nq {
        let (idx, sims) = result.neighbors(q);
        let max = sims.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
        let mut z = 0.0;
        for (w, &s) in weights.iter_mut().zip(sims) {
            *w = ((s - max) / tau).exp();
            z += *w;
        }
        let mut row = out.row_mut(q);
        for (&w, &j) in weights.iter().zip(idx) {
            let a = w / z;
            for (o, &l) in row.iter_mut().zip(labels.row(j)) {
                *o += a * f64::from(l);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_neighbour_copies_its_row() {
        let labels = array![[0.25f32, 0.75], [1.0, 0.0]];
        let r = RetrievalResult { k: 1, indices: vec![0], sims: vec![0.3] };
        let p = propagate_labels(&r, labels.view(), 0.07).unwrap();
        assert_eq!(p, array![[0.25, 0.75]]);
    }

    #[test]
    fn equal_similarities_average() {
        let labels = array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let r = RetrievalResult { k: 2, indices: vec![1, 0], sims: vec![0.5, 0.5] };
        let p = propagate_labels(&r, labels.view(), 0.07).unwrap();
        assert_eq!(p, array![[0.5, 0.5, 0.0]]);
    }

    #[test]
    fn rejects_bad_tau() {
        let labels = array![[1.0f32]];
        let r = RetrievalResult { k: 1, indices: vec![0], sims: vec![1.0] };
        assert!(matches!(propagate_labels(&r, labels.view(), 0.0), Err(Error::Parameter(_))));
    }
}
