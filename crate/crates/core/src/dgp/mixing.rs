//! The nonlinear mixing function: a three-layer LeakyReLU MLP whose weight
//! matrices are L2-normalized and selected for the lowest condition number
//! out of a large uniformly sampled candidate pool.

use crate::la;
use crate::rng::SeedKey;
use crate::tensor::TensorValue;

/// Candidates drawn per layer when searching for a well-conditioned weight.
pub const MIXING_CANDIDATE_POOL: usize = 25_000;

pub const MIXING_LEAKY_SLOPE: f64 = 0.2;

/// Which axis the weight L2-normalization acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    /// Each row scaled to unit Euclidean norm (default).
    Rows,
    /// Whole matrix scaled to unit Frobenius norm.
    Matrix,
}

#[derive(Clone, Debug)]
pub struct MixingMlp {
    /// Three square weight matrices, applied as y = x Wᵀ.
    pub weights: [TensorValue; 3],
    /// Per-layer offsets; zero by default (the weight search fully
    /// determines the map).
    pub biases: [Vec<f64>; 3],
    /// Condition numbers of the selected weights.
    pub cond_numbers: [f64; 3],
    /// Candidates evaluated per layer.
    pub candidates_per_layer: usize,
}

impl MixingMlp {
    /// Deterministic forward map z -> x; the first two layers are followed
    /// by LeakyReLU(0.2) so the composition stays injective.
    pub fn apply(&self, z: &TensorValue) -> TensorValue {
        let (b, n) = (z.shape()[0], z.shape()[1]);
        let mut cur = z.data().to_vec();
        for (layer, w) in self.weights.iter().enumerate() {
            let mut next = vec![0.0; b * n];
            for i in 0..b {
                let xin = &cur[i * n..(i + 1) * n];
                let out = &mut next[i * n..(i + 1) * n];
                for j in 0..n {
                    let wrow = w.row(j);
                    let mut acc = self.biases[layer][j];
                    for k in 0..n {
                        acc += wrow[k] * xin[k];
                    }
                    out[j] = acc;
                }
            }
            if layer < 2 {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v *= MIXING_LEAKY_SLOPE;
                    }
                }
            }
            cur = next;
        }
        TensorValue::new(vec![b, n], cur)
    }
}

fn normalize_weight(data: &mut [f64], n: usize, norm: WeightNorm) {
    match norm {
        WeightNorm::Rows => {
            for i in 0..n {
                let row = &mut data[i * n..(i + 1) * n];
                let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm > 0.0 {
                    for v in row.iter_mut() {
                        *v /= nrm;
                    }
                }
            }
        }
        WeightNorm::Matrix => {
            let nrm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm > 0.0 {
                for v in data.iter_mut() {
                    *v /= nrm;
                }
            }
        }
    }
}

/// Select each layer's weight as the minimum-condition-number candidate
/// among `MIXING_CANDIDATE_POOL` standard-normal draws (normalized first);
/// ties break to the earliest candidate.
pub fn build_mixing(n: usize, norm: WeightNorm, key: SeedKey) -> MixingMlp {
    build_mixing_with_pool(n, norm, MIXING_CANDIDATE_POOL, key)
}

pub fn build_mixing_with_pool(
    n: usize,
    norm: WeightNorm,
    pool: usize,
    key: SeedKey,
) -> MixingMlp {
    let mut weights = Vec::with_capacity(3);
    let mut conds = [0.0f64; 3];
    for layer in 0..3u64 {
        let mut stream = key.child(layer).stream();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..pool {
            let mut cand = stream.normals(n * n);
            normalize_weight(&mut cand, n, norm);
            let cond = la::condition_number(&TensorValue::new(vec![n, n], cand.clone()));
            let better = match &best {
                None => true,
                Some((c, _)) => cond < *c,
            };
            if better {
                best = Some((cond, cand));
            }
        }
        let (cond, data) = best.expect("candidate pool must be non-empty");
        conds[layer as usize] = cond;
        weights.push(TensorValue::new(vec![n, n], data));
    }
    MixingMlp {
        weights: [weights[0].clone(), weights[1].clone(), weights[2].clone()],
        biases: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        cond_numbers: conds,
        candidates_per_layer: pool,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selected_condition_number_beats_the_median_candidate() {
        let n = 4;
        let key = SeedKey::root(10);
        let g = build_mixing_with_pool(n, WeightNorm::Rows, 200, key);
        // Recompute the candidate pool of layer 0 and take its median.
        let mut stream = key.child(0).stream();
        let mut conds: Vec<f64> = (0..200)
            .map(|_| {
                let mut cand = stream.normals(n * n);
                normalize_weight(&mut cand, n, WeightNorm::Rows);
                la::condition_number(&TensorValue::new(vec![n, n], cand))
            })
            .collect();
        conds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = conds[conds.len() / 2];
        assert!(g.cond_numbers[0] <= median);
        assert_eq!(g.candidates_per_layer, 200);
    }

    #[test]
    fn identity_candidate_wins_when_present() {
        // A pool where the best possible condition number (1) appears:
        // emulate by normalizing rows of a diagonal-dominant draw is not
        // guaranteed, so check the argmin property directly instead: the
        // selected weight's condition number is the pool minimum.
        let n = 2;
        let key = SeedKey::root(11);
        let g = build_mixing_with_pool(n, WeightNorm::Rows, 500, key);
        let mut stream = key.child(0).stream();
        let min = (0..500)
            .map(|_| {
                let mut cand = stream.normals(n * n);
                normalize_weight(&mut cand, n, WeightNorm::Rows);
                la::condition_number(&TensorValue::new(vec![n, n], cand))
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(g.cond_numbers[0], min);
    }

    #[test]
    fn mixing_is_deterministic_and_injective_on_samples() {
        let n = 6;
        let g = build_mixing_with_pool(n, WeightNorm::Rows, 100, SeedKey::root(12));
        let mut stream = SeedKey::root(13).stream();
        let z = TensorValue::new(vec![512, n], stream.normals(512 * n));
        let x1 = g.apply(&z);
        let x2 = g.apply(&z);
        assert_eq!(x1.data(), x2.data());
        // Injectivity spot check: all pairwise-distinct inputs map to
        // distinct outputs.
        for i in 0..64 {
            for j in (i + 1)..64 {
                let same = x1.row(i).iter().zip(x1.row(j)).all(|(a, b)| a == b);
                assert!(!same, "rows {i} and {j} collide");
            }
        }
    }

    #[test]
    fn default_pool_size_is_25000() {
        assert_eq!(MIXING_CANDIDATE_POOL, 25_000);
    }
}
