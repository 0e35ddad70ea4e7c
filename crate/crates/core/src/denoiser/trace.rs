use std::collections::BTreeMap;

use crate::error::{FecError, Result};

/// Cross-attention probabilities recorded per `(t, layer)`, averaged over heads.
///
/// Each record is a `queries x n_tokens` row-major matrix whose rows sum to one; the
/// queries are the spatial positions of a `grid_height x grid_width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    grid_height: usize,
    grid_width: usize,
    n_tokens: usize,
    maps: BTreeMap<(usize, usize), Vec<f64>>,
}

impl AttentionTrace {
    pub fn new(grid_height: usize, grid_width: usize, n_tokens: usize) -> Self {
        Self { grid_height, grid_width, n_tokens, maps: BTreeMap::new() }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_height, self.grid_width)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn record(&mut self, t: usize, layer: usize, probs: Vec<f64>) -> Result<()> {
        let expected = self.grid_height * self.grid_width * self.n_tokens;
        if probs.len() != expected {
            return Err(FecError::ShapeMismatch {
                expected: format!("{expected} attention weights"),
                actual: probs.len().to_string(),
            });
        }
        self.maps.insert((t, layer), probs);
        Ok(())
    }

    pub fn get(&self, t: usize, layer: usize) -> Option<&[f64]> {
        self.maps.get(&(t, layer)).map(Vec::as_slice)
    }

    pub fn timesteps(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.maps.keys().map(|&(t, _)| t).collect();
        ts.dedup();
        ts.reverse();
        ts
    }

    /// Attention paid to `token` at every spatial position, averaged over all layers
    /// recorded at `t`. `None` when nothing was recorded at `t`.
    pub fn token_map(&self, t: usize, token: usize) -> Option<Vec<f64>> {
        if token >= self.n_tokens {
            return None;
        }
        let layers: Vec<&Vec<f64>> =
            self.maps.range((t, 0)..=(t, usize::MAX)).map(|(_, m)| m).collect();
        if layers.is_empty() {
            return None;
        }
        let queries = self.grid_height * self.grid_width;
        let mut out = vec![0.0; queries];
        for m in &layers {
            for (q, o) in out.iter_mut().enumerate() {
                *o += m[q * self.n_tokens + token];
            }
        }
        let n = layers.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Some(out)
    }

    pub fn clear(&mut self) {
        self.maps.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_map_averages_layers() {
        let mut tr = AttentionTrace::new(1, 2, 2);
        tr.record(7, 0, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        tr.record(7, 1, vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        tr.record(9, 0, vec![0.2, 0.8, 0.2, 0.8]).unwrap();
        assert_eq!(tr.token_map(7, 0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(tr.token_map(9, 1).unwrap(), vec![0.8, 0.8]);
        assert!(tr.token_map(8, 0).is_none());
        assert!(tr.token_map(7, 2).is_none());
        assert_eq!(tr.timesteps(), vec![9, 7]);
        assert!(tr.record(1, 0, vec![1.0]).is_err());
    }
}
