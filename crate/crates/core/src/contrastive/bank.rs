use crate::error::{Error, Result};

/// Fixed-capacity FIFO queue of embedding snapshots.
///
/// Entries are addressed by age: index 0 is the oldest entry still held.
/// Two banks are equal when they hold the same entries in the same order.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    /// Slot the next push writes to.
    cursor: usize,
    count: usize,
}

impl PartialEq for MemoryBank {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity
            && self.dim == other.dim
            && self.count == other.count
            && self.iter().zip(other.iter()).all(|(a, b)| a == b)
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity; errors on a zero vector.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("cosine", format!("{} vs {}", x.len(), y.len())));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(dot / (nx * ny))
}

/// `exp(cos(x, y) / temperature)`.
pub fn similarity(x: &[f64], y: &[f64], temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok((cosine(x, y)? / temperature).exp())
}

/// Neighbour weights proportional to `similarity(query, neighbor)`,
/// normalized to sum to one.
pub fn nn_weights(query: &[f64], neighbors: &[&[f64]], temperature: f64) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::invalid("no neighbours to weight"));
    }
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let logits = neighbors
        .iter()
        .map(|n| Ok(cosine(query, n)? / temperature))
        .collect::<Result<Vec<f64>>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("memory bank needs positive capacity and width"));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            cursor: 0,
            count: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn slot(&self, age: usize) -> usize {
        (self.cursor + self.capacity - self.count + age) % self.capacity
    }

    /// Entry `age` positions after the oldest.
    pub fn get(&self, age: usize) -> &[f64] {
        assert!(age < self.count, "bank index {age} out of range");
        let s = self.slot(age);
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.count).map(move |a| self.get(a))
    }

    /// Stores a copy of `value`, evicting the oldest entry when full.
    pub fn push_value(&mut self, value: &[f64]) -> Result<()> {
        if value.len() != self.dim {
            return Err(Error::shape("bank_push", format!("width {} into a bank of width {}", value.len(), self.dim)));
        }
        let s = self.cursor;
        self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(value);
        self.cursor = (self.cursor + 1) % self.capacity;
        self.count = (self.count + 1).min(self.capacity);
        Ok(())
    }

    /// Stores the mean of two views' embeddings.
    pub fn push(&mut self, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != b.len() {
            return Err(Error::shape("bank_push", "view widths differ"));
        }
        let mean: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
        self.push_value(&mean)
    }

    /// Every entry's age index, most similar to `query` first; ties keep
    /// older entries first.
    pub fn ranking(&self, query: &[f64]) -> Result<Vec<usize>> {
        if query.len() != self.dim {
            return Err(Error::shape("nearest_neighbors", "query width"));
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::invalid("nearest-neighbour query is a zero vector"));
        }
        let mut scored = Vec::with_capacity(self.count);
        for age in 0..self.count {
            let e = self.get(age);
            let en = norm(e);
            if en == 0.0 {
                return Err(Error::invalid("memory bank holds a zero vector"));
            }
            let dot: f64 = query.iter().zip(e).map(|(a, b)| a * b).sum();
            scored.push((dot / (qn * en) + 0.0, age));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(scored.into_iter().map(|(_, age)| age).collect())
    }

    /// Entries ranked `first..=last` (1-based) by similarity to `query`.
    pub fn nearest_neighbors(&self, query: &[f64], first: usize, last: usize) -> Result<Vec<usize>> {
        if first == 0 || last < first {
            return Err(Error::invalid(format!("neighbour ranks {first}..={last}")));
        }
        if self.count < last {
            return Err(Error::invalid(format!("bank holds {} entries, rank {last} requested", self.count)));
        }
        Ok(self.ranking(query)?[first - 1..last].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_stores_view_mean() {
        let mut b = MemoryBank::new(4, 2).unwrap();
        b.push(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(b.get(0), &[0.5, 0.5]);
        assert!(b.push_value(&[1.0]).is_err());
    }

    #[test]
    fn fifo_eviction() {
        let mut b = MemoryBank::new(2, 1).unwrap();
        for v in [1.0, 2.0, 3.0] {
            b.push_value(&[v]).unwrap();
        }
        assert_eq!(b.iter().map(|e| e[0]).collect::<Vec<_>>(), vec![2.0, 3.0]);
    }

    #[test]
    fn neighbours_by_similarity() {
        let mut b = MemoryBank::new(8, 2).unwrap();
        // cosines to [1, 0]: 0.9, 0.1, 0.5
        for c in [0.9f64, 0.1, 0.5] {
            b.push_value(&[c, (1.0 - c * c).sqrt()]).unwrap();
        }
        assert_eq!(b.nearest_neighbors(&[1.0, 0.0], 1, 2).unwrap(), vec![0, 2]);
        assert!(b.nearest_neighbors(&[1.0, 0.0], 1, 4).is_err());
    }

    #[test]
    fn ties_prefer_older() {
        let mut b = MemoryBank::new(3, 2).unwrap();
        for _ in 0..3 {
            b.push_value(&[1.0, 1.0]).unwrap();
        }
        assert_eq!(b.ranking(&[1.0, 0.0]).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn similarity_values() {
        let x = [0.3, -1.2, 0.5];
        assert!((similarity(&x, &x, 0.2).unwrap() - 5f64.exp()).abs() < 1e-9);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((similarity(&x, &neg, 0.2).unwrap() - (-5f64).exp()).abs() < 1e-12);
        assert!((similarity(&[1.0, 0.0], &[0.0, 2.0], 0.2).unwrap() - 1.0).abs() < 1e-15);
        assert!(similarity(&[0.0, 0.0], &[1.0, 0.0], 0.2).is_err());
    }

    #[test]
    fn weights_for_two_neighbours() {
        let w = nn_weights(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]], 0.2).unwrap();
        let e5 = 5f64.exp();
        assert!((w[0] - e5 / (e5 + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e5 + 1.0)).abs() < 1e-12);
        assert_eq!(nn_weights(&[1.0, 0.0], &[&[3.0, 1.0]], 0.2).unwrap(), vec![1.0]);
    }
}
