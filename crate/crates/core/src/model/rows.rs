/// Ordered set of row ids with O(1) membership against a fixed universe.
///
/// Clearing is O(1) via a generation counter, so one set can be reused for
/// every batch.
#[derive(Debug, Clone)]
pub(crate) struct RowSet {
    ids: Vec<usize>,
    slot: Vec<u32>,
    mark: Vec<u32>,
    generation: u32,
}

impl RowSet {
    pub fn new(universe: usize) -> Self {
        RowSet {
            ids: Vec::new(),
            slot: vec![0; universe],
            mark: vec![0; universe],
            generation: 1,
        }
    }

    pub fn clear(&mut self) {
        self.ids.clear();
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.mark.fill(0);
            self.generation = 1;
        }
    }

    /// Local position of `id`, inserting it if absent.
    #[inline]
    pub fn insert(&mut self, id: usize) -> (usize, bool) {
        if self.mark[id] == self.generation {
            return (self.slot[id] as usize, false);
        }
        self.mark[id] = self.generation;
        self.slot[id] = self.ids.len() as u32;
        self.ids.push(id);
        (self.ids.len() - 1, true)
    }

    #[inline]
    pub fn local(&self, id: usize) -> Option<usize> {
        (self.mark[id] == self.generation).then(|| self.slot[id] as usize)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Sparse accumulator of `dim`-wide rows keyed by global id.
#[derive(Debug, Clone)]
pub struct SparseRows {
    dim: usize,
    set: RowSet,
    vals: Vec<f64>,
}

impl SparseRows {
    pub(crate) fn new(universe: usize, dim: usize) -> Self {
        SparseRows {
            dim,
            set: RowSet::new(universe),
            vals: Vec::new(),
        }
    }

    pub(crate) fn clear(&mut self) {
        self.set.clear();
        self.vals.clear();
    }

    /// Mutable row for `id`, zero-initialized on first access.
    #[inline]
    pub(crate) fn row_mut(&mut self, id: usize) -> &mut [f64] {
        let (local, fresh) = self.set.insert(id);
        if fresh {
            self.vals.resize(self.vals.len() + self.dim, 0.0);
        }
        &mut self.vals[local * self.dim..(local + 1) * self.dim]
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.set
            .local(id)
            .map(|l| &self.vals[l * self.dim..(l + 1) * self.dim])
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.len() == 0
    }

    pub fn ids(&self) -> &[usize] {
        self.set.ids()
    }

    /// `(id, row)` pairs in first-touch order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.set
            .ids()
            .iter()
            .copied()
            .zip(self.vals.chunks_exact(self.dim.max(1)))
    }
}
